//! Domain types: subject records, validated datasets, design specifications,
//! parameter sets, the step-function baseline hazard, and fit results.
//! Also enforces the identification constraints (fixed frailty scale, no
//! intercepts in either design) required for the joint model to be estimable.

use serde::{Deserialize, Serialize};

use crate::dist::SeededStream;
use crate::error::{Error, Result};

/// Upper bound on |rho| so that √(1-ρ²) stays well-conditioned.
pub const RHO_CAP: f64 = 0.995;

const JITTER_STREAM_TAG: u64 = 0x4a49_5454;

/// One observation: observed time T = min(T̃, C), event indicator δ,
/// treatment W, covariates X, instruments Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub time: f64,
    pub event: bool,
    pub treatment: bool,
    pub covariates: Vec<f64>,
    pub instruments: Vec<f64>,
}

impl SubjectRecord {
    /// Stable content hash used to key this subject's frailty draw stream,
    /// so estimates do not depend on record order.
    pub(crate) fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        feed(self.time.to_bits());
        feed(self.event as u64 | ((self.treatment as u64) << 1) | 0x100);
        for &x in &self.covariates {
            feed(x.to_bits());
        }
        feed(0x5a5a_5a5a);
        for &z in &self.instruments {
            feed(z.to_bits());
        }
        h
    }
}

/// Validated, immutable collection of records with consistent dimensions and
/// no tied uncensored event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    p: usize,
    k: usize,
}

impl Dataset {
    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Instrument dimension.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn treatments(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.treatment).collect()
    }
}

/// How to handle tied uncensored event times during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TiePolicy {
    /// Reject the dataset (the model assumes continuous times).
    #[default]
    Reject,
    /// Break ties with a deterministic, rank-preserving perturbation of
    /// magnitude 1e-9 · max(time), seeded by the run seed.
    Jitter,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidationOptions {
    pub tie_policy: TiePolicy,
    pub seed: u64,
}

/// Terms available for the treatment (probit) design x̃_w, built from (z, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreatmentTerm {
    Intercept,
    Instrument(usize),
    Covariate(usize),
}

/// Terms available for the hazard design x̃_t, built from (w, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HazardTerm {
    Intercept,
    Treatment,
    Covariate(usize),
    TreatmentByCovariate(usize),
}

/// Design specification for both model parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub treatment_terms: Vec<TreatmentTerm>,
    pub hazard_terms: Vec<HazardTerm>,
}

impl DesignSpec {
    /// All instruments and covariates in the treatment design; treatment and
    /// all covariates in the hazard design. No intercepts, no interactions.
    pub fn default_for(p: usize, k: usize) -> Self {
        let mut treatment_terms = Vec::with_capacity(p + k);
        treatment_terms.extend((0..k).map(TreatmentTerm::Instrument));
        treatment_terms.extend((0..p).map(TreatmentTerm::Covariate));
        let mut hazard_terms = Vec::with_capacity(p + 1);
        hazard_terms.push(HazardTerm::Treatment);
        hazard_terms.extend((0..p).map(HazardTerm::Covariate));
        Self {
            treatment_terms,
            hazard_terms,
        }
    }

    /// Column index of the treatment main effect in the hazard design.
    pub fn treatment_col(&self) -> Option<usize> {
        self.hazard_terms.iter().position(|t| *t == HazardTerm::Treatment)
    }

    pub fn q(&self) -> usize {
        self.treatment_terms.len()
    }

    pub fn r(&self) -> usize {
        self.hazard_terms.len()
    }

    pub fn treatment_row_into(&self, rec: &SubjectRecord, out: &mut [f64]) {
        for (slot, term) in out.iter_mut().zip(&self.treatment_terms) {
            *slot = match term {
                TreatmentTerm::Intercept => 1.0,
                TreatmentTerm::Instrument(j) => rec.instruments[*j],
                TreatmentTerm::Covariate(j) => rec.covariates[*j],
            };
        }
    }

    pub fn hazard_row_into(&self, rec: &SubjectRecord, out: &mut [f64]) {
        let w = if rec.treatment { 1.0 } else { 0.0 };
        for (slot, term) in out.iter_mut().zip(&self.hazard_terms) {
            *slot = match term {
                HazardTerm::Intercept => 1.0,
                HazardTerm::Treatment => w,
                HazardTerm::Covariate(j) => rec.covariates[*j],
                HazardTerm::TreatmentByCovariate(j) => w * rec.covariates[*j],
            };
        }
    }

    fn check_dims(&self, p: usize, k: usize) -> Result<()> {
        for term in &self.treatment_terms {
            let (idx, dim, kind) = match term {
                TreatmentTerm::Instrument(j) => (*j, k, "instrument"),
                TreatmentTerm::Covariate(j) => (*j, p, "covariate"),
                TreatmentTerm::Intercept => continue,
            };
            if idx >= dim {
                return Err(Error::DimensionMismatch {
                    record: 0,
                    kind,
                    expected: dim,
                    found: idx + 1,
                });
            }
        }
        for term in &self.hazard_terms {
            let idx = match term {
                HazardTerm::Covariate(j) | HazardTerm::TreatmentByCovariate(j) => *j,
                _ => continue,
            };
            if idx >= p {
                return Err(Error::DimensionMismatch {
                    record: 0,
                    kind: "covariate",
                    expected: p,
                    found: idx + 1,
                });
            }
        }
        Ok(())
    }
}

/// Row-major design matrix with cheap row access.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rows * n_cols);
        Self {
            n_rows,
            n_cols,
            data,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// x_iᵀ b for row i.
    pub fn row_dot(&self, i: usize, b: &[f64]) -> f64 {
        dot(self.row(i), b)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the treatment and hazard design matrices for a validated dataset.
pub fn build_designs(dataset: &Dataset, design: &DesignSpec) -> (DesignMatrix, DesignMatrix) {
    let n = dataset.n();
    let q = design.q();
    let r = design.r();
    let mut xw = vec![0.0; n * q];
    let mut xt = vec![0.0; n * r];
    for (i, rec) in dataset.records().iter().enumerate() {
        design.treatment_row_into(rec, &mut xw[i * q..(i + 1) * q]);
        design.hazard_row_into(rec, &mut xt[i * r..(i + 1) * r]);
    }
    (
        DesignMatrix::from_rows(n, q, xw),
        DesignMatrix::from_rows(n, r, xt),
    )
}

/// Validates records against a design with the default tie policy (reject).
pub fn validate_dataset(records: Vec<SubjectRecord>, design: &DesignSpec) -> Result<Dataset> {
    validate_dataset_with(records, design, ValidationOptions::default())
}

/// Validates records: non-empty, consistent dimensions, finite values,
/// non-negative times, and no tied uncensored event times (per policy).
pub fn validate_dataset_with(
    mut records: Vec<SubjectRecord>,
    design: &DesignSpec,
    options: ValidationOptions,
) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::EmptyData);
    }
    let p = records[0].covariates.len();
    let k = records[0].instruments.len();
    design.check_dims(p, k)?;
    for (i, rec) in records.iter().enumerate() {
        if rec.covariates.len() != p {
            return Err(Error::DimensionMismatch {
                record: i,
                kind: "covariate",
                expected: p,
                found: rec.covariates.len(),
            });
        }
        if rec.instruments.len() != k {
            return Err(Error::DimensionMismatch {
                record: i,
                kind: "instrument",
                expected: k,
                found: rec.instruments.len(),
            });
        }
        if !rec.time.is_finite() || rec.time < 0.0 {
            return Err(Error::NonFiniteValue {
                record: i,
                field: "time",
                value: rec.time,
            });
        }
        if let Some(&bad) = rec.covariates.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                record: i,
                field: "covariate",
                value: bad,
            });
        }
        if let Some(&bad) = rec.instruments.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                record: i,
                field: "instrument",
                value: bad,
            });
        }
    }

    // Ties among uncensored event times.
    let mut event_times: Vec<(f64, usize)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.event)
        .map(|(i, r)| (r.time, i))
        .collect();
    event_times.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let has_ties = event_times.windows(2).any(|w| w[0].0 == w[1].0);
    if has_ties {
        match options.tie_policy {
            TiePolicy::Reject => {
                let w = event_times.windows(2).find(|w| w[0].0 == w[1].0).unwrap();
                return Err(Error::TiedEventTimes {
                    time: w[0].0,
                    first: w[0].1,
                    second: w[1].1,
                });
            }
            TiePolicy::Jitter => {
                let max_time = records.iter().map(|r| r.time).fold(0.0f64, f64::max);
                let scale = 1e-9 * max_time;
                let mut rng = SeededStream::new(options.seed, JITTER_STREAM_TAG).rng();
                let mut group_start = 0;
                while group_start < event_times.len() {
                    let t = event_times[group_start].0;
                    let mut group_end = group_start + 1;
                    while group_end < event_times.len() && event_times[group_end].0 == t {
                        group_end += 1;
                    }
                    if group_end - group_start > 1 {
                        use rand::Rng;
                        let mut offsets: Vec<f64> = (group_start..group_end)
                            .map(|_| rng.gen_range(0.0..1.0))
                            .collect();
                        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        // group members are already in record-index order, so
                        // sorted offsets preserve that order as the rank order
                        for (j, &(_, idx)) in
                            event_times[group_start..group_end].iter().enumerate()
                        {
                            records[idx].time = t + scale * offsets[j];
                        }
                    }
                    group_start = group_end;
                }
            }
        }
    }

    Ok(Dataset { records, p, k })
}

/// Estimator configuration bits that interact with identification.
#[derive(Debug, Clone, Copy)]
pub struct IdentificationConfig {
    pub estimate_sigma_u: bool,
    /// True when rho is estimated (always the case for this estimator).
    pub rho_is_free: bool,
}

/// Checks the joint model's identification conditions for a design and
/// configuration, returning any non-fatal warnings.
///
/// Conditions: the frailty scale must be fixed (estimating it is an opt-in
/// that only produces a warning), the hazard design must not contain an
/// intercept, and the treatment design must not contain an intercept unless
/// rho is held fixed.
pub fn validate_identification(
    design: &DesignSpec,
    config: IdentificationConfig,
) -> Result<Vec<String>> {
    if design.hazard_terms.contains(&HazardTerm::Intercept) {
        return Err(Error::IdentificationViolation {
            condition: "condition 2: the hazard design must not contain an intercept \
                        (the baseline hazard absorbs it)"
                .into(),
        });
    }
    if design.treatment_terms.contains(&TreatmentTerm::Intercept) && config.rho_is_free {
        return Err(Error::IdentificationViolation {
            condition: "condition 3: the treatment design must not contain an intercept \
                        while rho is estimated"
                .into(),
        });
    }
    let mut warnings = Vec::new();
    if config.estimate_sigma_u {
        warnings.push(
            "estimate_sigma_u is enabled: the frailty scale is not identified jointly \
             with a nonparametric baseline; estimates of sigma_u are exploratory"
                .to_string(),
        );
    }
    Ok(warnings)
}

/// Model parameters θ = (α, β, ξ) with ξ = (σ_u, ρ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub sigma_u: f64,
}

impl ParameterSet {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, rho: f64, sigma_u: f64) -> Result<Self> {
        if !(rho.is_finite() && rho.abs() <= RHO_CAP) {
            return Err(Error::InvalidParameter(format!(
                "rho must satisfy |rho| <= {RHO_CAP}, got {rho}"
            )));
        }
        if !(sigma_u > 0.0 && sigma_u.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_u must be positive, got {sigma_u}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            rho,
            sigma_u,
        })
    }

    /// ξ = (σ_u, ρ).
    pub fn xi(&self) -> (f64, f64) {
        (self.sigma_u, self.rho)
    }
}

/// Nonparametric baseline hazard: positive jumps at the ordered uncensored
/// event times; Λ(t) is the right-continuous step sum of jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    event_times: Vec<f64>,
    jumps: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl BaselineHazard {
    pub fn new(event_times: Vec<f64>, jumps: Vec<f64>) -> Result<Self> {
        if event_times.len() != jumps.len() {
            return Err(Error::InvalidParameter(format!(
                "baseline has {} event times but {} jumps",
                event_times.len(),
                jumps.len()
            )));
        }
        if event_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter(
                "baseline event times must be strictly increasing".into(),
            ));
        }
        if jumps.iter().any(|&j| !(j > 0.0) || !j.is_finite()) {
            return Err(Error::InvalidParameter(
                "baseline jumps must be positive and finite".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(jumps.len());
        let mut acc = 0.0;
        for &j in &jumps {
            acc += j;
            cumulative.push(acc);
        }
        Ok(Self {
            event_times,
            jumps,
            cumulative,
        })
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    /// Number of events n_s.
    pub fn n_s(&self) -> usize {
        self.jumps.len()
    }

    /// Λ(t) = Σ_{t_i ≤ t} λ_i.
    pub fn cumulative(&self, t: f64) -> f64 {
        let idx = self.event_times.partition_point(|&ti| ti <= t);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    /// The jump Λ{t} at exactly t, if t is one of the event times.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        self.event_times
            .binary_search_by(|ti| ti.partial_cmp(&t).unwrap())
            .ok()
            .map(|i| self.jumps[i])
    }

    /// Rebuilds the cumulative cache (needed after deserialization).
    pub fn rebuild_cache(&mut self) {
        self.cumulative.clear();
        let mut acc = 0.0;
        for &j in &self.jumps {
            acc += j;
            self.cumulative.push(acc);
        }
    }
}

/// One per-iteration snapshot of the EM trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub sigma_u: f64,
    pub observed_loglik: f64,
    /// Max-norm parameter change from the previous iteration (0 at k = 0).
    pub max_delta: f64,
}

/// Result of a full EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: ParameterSet,
    pub baseline: BaselineHazard,
    pub hazard_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_observed_loglik: f64,
    pub trace: Vec<TraceEntry>,
    pub frozen_draws: bool,
    pub draws_per_subject: usize,
    pub warnings: Vec<String>,
}
