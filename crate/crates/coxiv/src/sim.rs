//! Scenario data generation, the replication driver comparing the proposed
//! estimator against the ordinary and infeasible Cox fits, and summary
//! metrics shaped like the published tables.
//!
//! Event times come from a unit baseline hazard by inverse transform;
//! censoring is Exponential with rate 0.5 (the convention calibrated against
//! the reported "approximately 70%" proportion, which is the share of
//! records with δ = 1 under the source's labeling of δ).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::fit_cox;
use crate::dist::{
    derive_seed, BivariateNormal, Exponential, Gamma, Logistic, Normal, SeededStream, StudentT,
    Uniform,
};
use crate::em::{run_em, EMConfig};
use crate::error::{Error, Result};
use crate::model::{
    build_designs, validate_dataset, Dataset, DesignMatrix, DesignSpec, SubjectRecord,
};

const SIM_DATA_TAG: u64 = 0x5349_4d44;
const SIM_EM_TAG: u64 = 0x5349_4d45;

/// How the treatment's latent index error V is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreatmentFamily {
    Probit,
    Logistic,
}

/// How the frailty U is generated given V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrailtyFamily {
    BivariateNormal,
    CenteredGamma,
    StudentT,
}

/// One scenario's data-generating configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u32,
    pub n: usize,
    pub sigma_u2: f64,
    pub sigma_uv: f64,
    pub alpha_wz: f64,
    pub treatment_family: TreatmentFamily,
    pub frailty_family: FrailtyFamily,
    pub censor_rate: f64,
    pub true_beta_w: f64,
    pub true_beta_x: f64,
}

impl ScenarioSpec {
    /// Builds the scenario table entry for ids 1..=7.
    ///
    /// 1: high variance, strong correlation, strong instrument (reference)
    /// 2: low variance (σ_u² = 0.1), strong correlation
    /// 3: weak correlation (σ_uv = 0.1·σ_u)
    /// 4: weak instrument (α_wz = 0.1)
    /// 5: logistic treatment error, U = 0.45·V + N(0,1)
    /// 6: asymmetric frailty, U = U' − mean(U'), U' ~ Gamma(0.15·e^V, 1)
    /// 7: heavy-tailed frailty, U ~ t₄ shifted by 0.5·V
    pub fn from_id(id: u32, n: usize) -> Result<Self> {
        let base = Self {
            id,
            n,
            sigma_u2: 1.0,
            sigma_uv: 0.4,
            alpha_wz: 1.0,
            treatment_family: TreatmentFamily::Probit,
            frailty_family: FrailtyFamily::BivariateNormal,
            censor_rate: 0.5,
            true_beta_w: 0.5,
            true_beta_x: 0.2,
        };
        let spec = match id {
            1 => base,
            2 => Self {
                sigma_u2: 0.1,
                sigma_uv: 0.4 * 0.1f64.sqrt(),
                ..base
            },
            3 => Self {
                sigma_uv: 0.1,
                ..base
            },
            4 => Self {
                alpha_wz: 0.1,
                ..base
            },
            5 => Self {
                treatment_family: TreatmentFamily::Logistic,
                ..base
            },
            6 => Self {
                frailty_family: FrailtyFamily::CenteredGamma,
                ..base
            },
            7 => Self {
                frailty_family: FrailtyFamily::StudentT,
                ..base
            },
            other => return Err(Error::InvalidScenario(other)),
        };
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        if !(self.sigma_u2 > 0.0) || !(self.censor_rate > 0.0) {
            return Err(Error::InvalidSpec(
                "sigma_u2 and censor_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output of one generated replication.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: Dataset,
    /// The latent frailty of each subject (for the infeasible comparator).
    pub latent_u: Vec<f64>,
    /// Share of records with δ = 1 (the calibration quantity; the censored
    /// share is its complement).
    pub event_fraction: f64,
}

/// Generates one replication of a scenario from the given stream.
pub fn generate(spec: &ScenarioSpec, stream: SeededStream) -> Result<GeneratedData> {
    spec.validate()?;
    let mut rng = stream.rng();
    let n = spec.n;
    let x_dist = Uniform::new(-1.0, 1.0)?;
    let z_dist = Gamma::new(2.0, 2.0)?;
    let censor = Exponential::new(spec.censor_rate)?;
    let event_exp = Exponential::new(1.0)?;
    let std_normal = Normal::new(0.0, 1.0)?;
    let bivariate = BivariateNormal::from_cov(spec.sigma_uv, spec.sigma_u2)?;
    let logistic = Logistic::new();

    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    let mut raw_event = Vec::with_capacity(n);
    let mut raw_censor = Vec::with_capacity(n);
    for _ in 0..n {
        xs.push(x_dist.sample(&mut rng));
        zs.push(z_dist.sample(&mut rng));
        let (v, u) = match spec.frailty_family {
            FrailtyFamily::BivariateNormal => match spec.treatment_family {
                TreatmentFamily::Probit => bivariate.sample(&mut rng),
                TreatmentFamily::Logistic => {
                    let v = logistic.sample(&mut rng);
                    let u = 0.45 * v + std_normal.sample(&mut rng);
                    (v, u)
                }
            },
            FrailtyFamily::CenteredGamma => {
                let v = std_normal.sample(&mut rng);
                let shape = 0.15 * v.exp();
                let u = Gamma::new(shape, 1.0)?.sample(&mut rng);
                (v, u)
            }
            FrailtyFamily::StudentT => {
                let v = std_normal.sample(&mut rng);
                let u = StudentT::new(0.5 * v, 4.0)?.sample(&mut rng);
                (v, u)
            }
        };
        vs.push(v);
        us.push(u);
        raw_event.push(event_exp.sample(&mut rng));
        raw_censor.push(censor.sample(&mut rng));
    }

    if spec.frailty_family == FrailtyFamily::CenteredGamma {
        let mean = us.iter().sum::<f64>() / n as f64;
        for u in &mut us {
            *u -= mean;
        }
    }

    let mut records = Vec::with_capacity(n);
    let mut n_events = 0usize;
    for i in 0..n {
        let w = spec.alpha_wz * zs[i] + vs[i] >= 0.0;
        let lin = spec.true_beta_w * (w as u8 as f64) + spec.true_beta_x * xs[i] + us[i];
        let t_event = raw_event[i] / lin.exp();
        let time = t_event.min(raw_censor[i]);
        let event = t_event <= raw_censor[i];
        n_events += event as usize;
        records.push(SubjectRecord {
            time,
            event,
            treatment: w,
            covariates: vec![xs[i]],
            instruments: vec![zs[i]],
        });
    }

    let design = DesignSpec::default_for(1, 1);
    let dataset = validate_dataset(records, &design)?;
    Ok(GeneratedData {
        dataset,
        latent_u: us,
        event_fraction: n_events as f64 / n as f64,
    })
}

/// Which estimator produced a summary row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Proposed,
    Ordinary,
    OrdinaryInfeasible,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Proposed => "Proposed",
            EstimatorKind::Ordinary => "Ordinary",
            EstimatorKind::OrdinaryInfeasible => "Ordinary-infeasible",
        }
    }
}

/// Mean/SD/median/range/RMSE/CV of a batch of estimates, plus failure
/// accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub estimator: String,
    pub mean: f64,
    pub sd: f64,
    /// False when fewer than two estimates exist (sd reported as 0).
    pub sd_defined: bool,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub rmse: f64,
    pub cv: f64,
    pub n_estimates: usize,
    /// Hard failures (separation, degenerate weights); their replications
    /// contribute no estimate.
    pub n_failed: usize,
    /// Fits that hit the iteration cap; their best-so-far estimates are
    /// included.
    pub n_nonconverged: usize,
}

/// Summarizes estimates against a known truth: mean, sample SD (divisor
/// n−1), midpoint median, min/max, RMSE, and CV = sd/mean.
pub fn summarize(estimates: &[f64], truth: f64) -> Result<ReplicationSummary> {
    if estimates.is_empty() {
        return Err(Error::EmptyEstimates);
    }
    let n = estimates.len();
    let mean = estimates.iter().sum::<f64>() / n as f64;
    let (sd, sd_defined) = if n > 1 {
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
        (var.sqrt(), true)
    } else {
        (0.0, false)
    };
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let rmse = (estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / n as f64).sqrt();
    Ok(ReplicationSummary {
        estimator: String::new(),
        mean,
        sd,
        sd_defined,
        median,
        min: sorted[0],
        max: sorted[n - 1],
        rmse,
        cv: sd / mean,
        n_estimates: n,
        n_failed: 0,
        n_nonconverged: 0,
    })
}

/// Result of a replication study for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub scenario: u32,
    pub n: usize,
    pub reps: usize,
    pub truth_hazard_ratio: f64,
    pub summaries: Vec<ReplicationSummary>,
}

fn infeasible_design(xt: &DesignMatrix, latent_u: &[f64]) -> DesignMatrix {
    let n = xt.n_rows();
    let r = xt.n_cols();
    let mut data = Vec::with_capacity(n * (r + 1));
    for i in 0..n {
        data.extend_from_slice(xt.row(i));
        data.push(latent_u[i]);
    }
    DesignMatrix::from_rows(n, r + 1, data)
}

struct RepOutcome {
    proposed: Option<(f64, bool)>,
    ordinary: Option<f64>,
    infeasible: Option<f64>,
}

/// Runs `reps` replications of a scenario, fitting the proposed estimator
/// (run_em), the ordinary Cox fit without the frailty, and the infeasible
/// Cox fit that sees the latent U, and summarizes exp(β̂_w) for each.
pub fn run_replications(
    spec: &ScenarioSpec,
    reps: usize,
    config: &EMConfig,
) -> Result<StudyResult> {
    if reps == 0 {
        return Err(Error::InvalidSpec("reps must be at least 1".into()));
    }
    spec.validate()?;
    let design = DesignSpec::default_for(1, 1);
    let treatment_col = design.treatment_col().expect("default design has treatment");
    let seed = config.seed;

    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let data_stream = SeededStream::new(derive_seed(seed, SIM_DATA_TAG, r as u64), 0);
            let gen = match generate(spec, data_stream) {
                Ok(g) => g,
                Err(_) => {
                    return RepOutcome {
                        proposed: None,
                        ordinary: None,
                        infeasible: None,
                    }
                }
            };
            let (_, xt) = build_designs(&gen.dataset, &design);
            let times = gen.dataset.times();
            let events = gen.dataset.events();
            let zeros = vec![0.0; gen.dataset.n()];

            let ordinary = fit_cox(&xt, &times, &events, &zeros)
                .ok()
                .map(|f| f.beta[treatment_col].exp());
            let xt_inf = infeasible_design(&xt, &gen.latent_u);
            let infeasible = fit_cox(&xt_inf, &times, &events, &zeros)
                .ok()
                .map(|f| f.beta[treatment_col].exp());
            let em_config = EMConfig {
                seed: derive_seed(seed, SIM_EM_TAG, r as u64),
                ..*config
            };
            let proposed = run_em(&gen.dataset, &design, &em_config)
                .ok()
                .map(|f| (f.hazard_ratio, f.converged));
            RepOutcome {
                proposed,
                ordinary,
                infeasible,
            }
        })
        .collect();

    let truth = spec.true_beta_w.exp();
    let mut summaries = Vec::with_capacity(3);

    let proposed_estimates: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.proposed.map(|(hr, _)| hr))
        .collect();
    let n_nonconverged = outcomes
        .iter()
        .filter(|o| matches!(o.proposed, Some((_, false))))
        .count();
    let mut s = summarize(&proposed_estimates, truth)?;
    s.estimator = EstimatorKind::Proposed.label().into();
    s.n_failed = reps - proposed_estimates.len();
    s.n_nonconverged = n_nonconverged;
    summaries.push(s);

    let ordinary_estimates: Vec<f64> = outcomes.iter().filter_map(|o| o.ordinary).collect();
    let mut s = summarize(&ordinary_estimates, truth)?;
    s.estimator = EstimatorKind::Ordinary.label().into();
    s.n_failed = reps - ordinary_estimates.len();
    summaries.push(s);

    let infeasible_estimates: Vec<f64> = outcomes.iter().filter_map(|o| o.infeasible).collect();
    let mut s = summarize(&infeasible_estimates, truth)?;
    s.estimator = EstimatorKind::OrdinaryInfeasible.label().into();
    s.n_failed = reps - infeasible_estimates.len();
    summaries.push(s);

    Ok(StudyResult {
        scenario: spec.id,
        n: spec.n,
        reps,
        truth_hazard_ratio: truth,
        summaries,
    })
}

/// CSV rows for a study: header
/// `scenario,estimator,mean,sd,median,min,max,rmse,cv,n_failed`.
pub fn write_summary_csv<W: std::io::Write>(writer: W, study: &StudyResult) -> Result<()> {
    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer.write_record([
        "scenario",
        "estimator",
        "mean",
        "sd",
        "median",
        "min",
        "max",
        "rmse",
        "cv",
        "n_failed",
    ])?;
    for s in &study.summaries {
        csv_writer.write_record([
            study.scenario.to_string(),
            s.estimator.clone(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.median.to_string(),
            s.min.to_string(),
            s.max.to_string(),
            s.rmse.to_string(),
            s.cv.to_string(),
            s.n_failed.to_string(),
        ])?;
    }
    csv_writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scenario_table_is_wired_to_ids() {
        let s1 = ScenarioSpec::from_id(1, 100).unwrap();
        assert_eq!(s1.sigma_u2, 1.0);
        assert_eq!(s1.sigma_uv, 0.4);
        assert_eq!(s1.alpha_wz, 1.0);
        let s2 = ScenarioSpec::from_id(2, 100).unwrap();
        assert_eq!(s2.sigma_u2, 0.1);
        assert_relative_eq!(s2.sigma_uv / s2.sigma_u2.sqrt(), 0.4, max_relative = 1e-12);
        let s3 = ScenarioSpec::from_id(3, 100).unwrap();
        assert_eq!(s3.sigma_uv, 0.1);
        let s4 = ScenarioSpec::from_id(4, 100).unwrap();
        assert_eq!(s4.alpha_wz, 0.1);
        assert_eq!(s4.sigma_uv, 0.4);
        let s5 = ScenarioSpec::from_id(5, 100).unwrap();
        assert_eq!(s5.treatment_family, TreatmentFamily::Logistic);
        let s6 = ScenarioSpec::from_id(6, 100).unwrap();
        assert_eq!(s6.frailty_family, FrailtyFamily::CenteredGamma);
        let s7 = ScenarioSpec::from_id(7, 100).unwrap();
        assert_eq!(s7.frailty_family, FrailtyFamily::StudentT);
        assert!(matches!(
            ScenarioSpec::from_id(8, 100),
            Err(Error::InvalidScenario(8))
        ));
        assert!(matches!(
            ScenarioSpec::from_id(0, 100),
            Err(Error::InvalidScenario(0))
        ));
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = ScenarioSpec::from_id(1, 50).unwrap();
        let a = generate(&spec, SeededStream::new(5, 1)).unwrap();
        let b = generate(&spec, SeededStream::new(5, 1)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.latent_u, b.latent_u);
        let c = generate(&spec, SeededStream::new(5, 2)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn scenario6_centering_and_correlation() {
        let spec = ScenarioSpec::from_id(6, 100_000).unwrap();
        let gen = generate(&spec, SeededStream::new(3, 0)).unwrap();
        let mean_u = gen.latent_u.iter().sum::<f64>() / gen.latent_u.len() as f64;
        assert!(mean_u.abs() < 1e-10, "centered mean {mean_u}");
    }

    #[test]
    fn null_confounding_balances_latent_u() {
        // sigma_uv = 0: treated and control subjects share the same U law
        let spec = ScenarioSpec {
            sigma_uv: 0.0,
            ..ScenarioSpec::from_id(1, 100_000).unwrap()
        };
        let gen = generate(&spec, SeededStream::new(11, 0)).unwrap();
        let mut treated: Vec<f64> = Vec::new();
        let mut control: Vec<f64> = Vec::new();
        for (rec, &u) in gen.dataset.records().iter().zip(&gen.latent_u) {
            if rec.treatment {
                treated.push(u);
            } else {
                control.push(u);
            }
        }
        treated.sort_by(|a, b| a.partial_cmp(b).unwrap());
        control.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // two-sample KS statistic
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < treated.len() && j < control.len() {
            if treated[i] <= control[j] {
                i += 1;
            } else {
                j += 1;
            }
            let d = (i as f64 / treated.len() as f64 - j as f64 / control.len() as f64).abs();
            ks = ks.max(d);
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn summarize_hand_cases() {
        let s = summarize(&[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_relative_eq!(s.mean, 2.0, max_relative = 1e-15);
        assert_relative_eq!(s.sd, 1.0, max_relative = 1e-15);
        assert_relative_eq!(s.median, 2.0, max_relative = 1e-15);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 3.0);
        assert_relative_eq!(s.rmse, (2.0f64 / 3.0).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(s.cv, 0.5, max_relative = 1e-15);

        let exact = summarize(&[1.649], 1.649).unwrap();
        assert_eq!(exact.rmse, 0.0);
        assert_eq!(exact.sd, 0.0);
        assert!(!exact.sd_defined);
        assert_eq!(exact.mean, exact.median);

        let all_truth = summarize(&[2.0, 2.0, 2.0], 2.0).unwrap();
        assert_eq!(all_truth.rmse, 0.0);
        assert_eq!(all_truth.sd, 0.0);

        assert!(matches!(summarize(&[], 1.0), Err(Error::EmptyEstimates)));
    }

    #[test]
    fn summary_order_statistics_hold() {
        let s = summarize(&[0.4, 2.7, 1.1, 0.9], 1.0).unwrap();
        assert!(s.min <= s.median && s.median <= s.max);
        assert!(s.rmse >= 0.0);
        assert_relative_eq!(s.median, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn run_replications_is_deterministic_and_counts() {
        let spec = ScenarioSpec::from_id(1, 60).unwrap();
        let config = EMConfig {
            draws_per_subject: 10,
            max_iter: 6,
            seed: 14,
            ..Default::default()
        };
        let a = run_replications(&spec, 4, &config).unwrap();
        let b = run_replications(&spec, 4, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.summaries.len(), 3);
        assert_eq!(a.summaries[0].estimator, "Proposed");
        assert_eq!(a.summaries[1].estimator, "Ordinary");
        assert_eq!(a.summaries[2].estimator, "Ordinary-infeasible");
        assert_relative_eq!(a.truth_hazard_ratio, 0.5f64.exp(), max_relative = 1e-15);
    }
}
