//! Likelihood kernels: the frailty Cox contribution, the probit treatment
//! weight, self-normalized posterior expectations over frailty draws, the
//! complete-data log-likelihood, a Monte Carlo estimate of the observed
//! log-likelihood, and the closed-form frailty/treatment integral.
//!
//! All weight arithmetic is done in the log domain with per-subject
//! max-subtraction.

use crate::dist::{log_std_normal_cdf, log_std_normal_pdf, std_normal_cdf};
use crate::error::{Error, Result};
use crate::model::{dot, BaselineHazard, DesignMatrix, Dataset, DesignSpec, ParameterSet};

/// Everything the kernels need to know about one subject.
#[derive(Debug, Clone, Copy)]
pub struct SubjectData<'a> {
    pub time: f64,
    pub event: bool,
    pub treatment: bool,
    /// Hazard design row x̃_t.
    pub xt: &'a [f64],
    /// Treatment design row x̃_w.
    pub xw: &'a [f64],
}

impl<'a> SubjectData<'a> {
    pub fn from_dataset(
        dataset: &'a Dataset,
        xw: &'a DesignMatrix,
        xt: &'a DesignMatrix,
        i: usize,
    ) -> Self {
        let rec = &dataset.records()[i];
        Self {
            time: rec.time,
            event: rec.event,
            treatment: rec.treatment,
            xt: xt.row(i),
            xw: xw.row(i),
        }
    }
}

/// log f(t|·)^δ S(t|·)^{1−δ} up to the censoring terms:
/// δ·(log Λ{t} + x̃_tᵀβ + u) − Λ(t)·exp(x̃_tᵀβ + u).
pub fn cox_kernel(
    t: f64,
    event: bool,
    xt: &[f64],
    u: f64,
    beta: &[f64],
    baseline: &BaselineHazard,
) -> Result<f64> {
    let eta = dot(xt, beta) + u;
    let lambda_t = baseline.cumulative(t);
    if event {
        let jump = baseline
            .jump_at(t)
            .ok_or(Error::BaselineNotCovering { time: t })?;
        Ok(jump.ln() + eta - lambda_t * eta.exp())
    } else {
        Ok(-lambda_t * eta.exp())
    }
}

/// Argument of Φ in the treatment weight:
/// (x̃_wᵀα + (ρ/σ_u)·u) / √(1−ρ²), precomputed pieces version.
#[inline]
pub(crate) fn weight_arg(xw_alpha: f64, u: f64, rho: f64, sigma_u: f64) -> f64 {
    (xw_alpha + rho / sigma_u * u) / (1.0 - rho * rho).sqrt()
}

/// P(W = w | U = u, z, x): Φ(a) for w = 1 and 1 − Φ(a) for w = 0, with
/// a = (x̃_wᵀα + (ρ/σ_u)u)/√(1−ρ²).
pub fn treatment_weight(
    w: bool,
    xw: &[f64],
    u: f64,
    alpha: &[f64],
    rho: f64,
    sigma_u: f64,
) -> f64 {
    let a = weight_arg(dot(xw, alpha), u, rho, sigma_u);
    if w {
        std_normal_cdf(a)
    } else {
        std_normal_cdf(-a)
    }
}

/// log of [`treatment_weight`], stable in both tails.
pub fn log_treatment_weight(
    w: bool,
    xw: &[f64],
    u: f64,
    alpha: &[f64],
    rho: f64,
    sigma_u: f64,
) -> f64 {
    let a = weight_arg(dot(xw, alpha), u, rho, sigma_u);
    if w {
        log_std_normal_cdf(a)
    } else {
        log_std_normal_cdf(-a)
    }
}

/// Fills `out` with the unnormalized posterior log-weights
/// log ω̃_b = δ(x̃_tᵀβ + u_b) − Λ(t)e^{x̃_tᵀβ+u_b} + log P(W=w|u_b).
/// Jump-size and censoring factors cancel in the posterior ratio and are
/// omitted.
pub fn posterior_log_weights(
    subject: &SubjectData,
    params: &ParameterSet,
    baseline: &BaselineHazard,
    draws: &[f64],
    out: &mut Vec<f64>,
) {
    let xtb = dot(subject.xt, &params.beta);
    let xwa = dot(subject.xw, &params.alpha);
    let lambda_t = baseline.cumulative(subject.time);
    let delta = if subject.event { 1.0 } else { 0.0 };
    let sign = if subject.treatment { 1.0 } else { -1.0 };
    out.clear();
    out.reserve(draws.len());
    for &u in draws {
        let eta = xtb + u;
        let lw = delta * eta - lambda_t * eta.exp()
            + log_std_normal_cdf(sign * weight_arg(xwa, u, params.rho, params.sigma_u));
        out.push(lw);
    }
}

/// Normalizes log-weights in place to probabilities via max-subtraction.
/// Errors if every weight underflows (or is non-finite).
pub fn normalize_log_weights(log_w: &mut [f64]) -> Result<()> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights { subject: None });
    }
    let mut total = 0.0;
    for lw in log_w.iter_mut() {
        *lw = (*lw - max).exp();
        total += *lw;
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights { subject: None });
    }
    for w in log_w.iter_mut() {
        *w /= total;
    }
    Ok(())
}

/// Self-normalized Monte Carlo estimate of E[G(U) | t, δ, w, z, x] under the
/// given parameters, with draws from the N(0, σ_u²) prior.
pub fn posterior_expectation<G: Fn(f64) -> f64>(
    g: G,
    subject: &SubjectData,
    params: &ParameterSet,
    baseline: &BaselineHazard,
    draws: &[f64],
) -> Result<f64> {
    let mut weights = Vec::new();
    posterior_log_weights(subject, params, baseline, draws, &mut weights);
    normalize_log_weights(&mut weights)?;
    Ok(draws
        .iter()
        .zip(&weights)
        .map(|(&u, &w)| w * g(u))
        .sum())
}

/// Complete-data log-likelihood at frailty vector u: the Cox kernel terms
/// plus the joint treatment/frailty terms log P(W=w|u_i) + log φ(u_i; σ_u²),
/// including the baseline jump sizes at events.
pub fn complete_data_loglik(
    dataset: &Dataset,
    design: &DesignSpec,
    params: &ParameterSet,
    baseline: &BaselineHazard,
    u: &[f64],
) -> Result<f64> {
    if u.len() != dataset.n() {
        return Err(Error::DimensionMismatch {
            record: 0,
            kind: "frailty",
            expected: dataset.n(),
            found: u.len(),
        });
    }
    let (xw, xt) = crate::model::build_designs(dataset, design);
    let mut total = 0.0;
    for (i, rec) in dataset.records().iter().enumerate() {
        total += cox_kernel(rec.time, rec.event, xt.row(i), u[i], &params.beta, baseline)?;
        total += log_treatment_weight(
            rec.treatment,
            xw.row(i),
            u[i],
            &params.alpha,
            params.rho,
            params.sigma_u,
        );
        total += log_std_normal_pdf(u[i] / params.sigma_u) - params.sigma_u.ln();
    }
    Ok(total)
}

/// Monte Carlo estimate of the observed log-likelihood:
/// Σ_i log( (1/B) Σ_b exp(g_i(u_b)) ), where g_i is the subject's complete
/// -data contribution at u_b minus the sampling log-density (the N(0, σ_u²)
/// prior, which cancels against the frailty marginal).
pub fn observed_loglik_mc(
    dataset: &Dataset,
    design: &DesignSpec,
    params: &ParameterSet,
    baseline: &BaselineHazard,
    draws_per_subject: &[Vec<f64>],
) -> Result<f64> {
    if draws_per_subject.len() != dataset.n() {
        return Err(Error::DimensionMismatch {
            record: 0,
            kind: "draw set",
            expected: dataset.n(),
            found: draws_per_subject.len(),
        });
    }
    let (xw, xt) = crate::model::build_designs(dataset, design);
    let mut total = 0.0;
    for i in 0..dataset.n() {
        let subject = SubjectData::from_dataset(dataset, &xw, &xt, i);
        total += subject_observed_loglik_mc(&subject, params, baseline, &draws_per_subject[i])
            .map_err(|e| match e {
                Error::DegenerateWeights { .. } => Error::DegenerateWeights { subject: Some(i) },
                other => other,
            })?;
    }
    Ok(total)
}

/// One subject's contribution to the MC observed log-likelihood, including
/// the baseline jump factor at events.
pub fn subject_observed_loglik_mc(
    subject: &SubjectData,
    params: &ParameterSet,
    baseline: &BaselineHazard,
    draws: &[f64],
) -> Result<f64> {
    let mut log_terms = Vec::new();
    posterior_log_weights(subject, params, baseline, draws, &mut log_terms);
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights { subject: None });
    }
    let sum: f64 = log_terms.iter().map(|&lw| (lw - max).exp()).sum();
    let mut value = max + sum.ln() - (draws.len() as f64).ln();
    if subject.event {
        let jump = baseline
            .jump_at(subject.time)
            .ok_or(Error::BaselineNotCovering { time: subject.time })?;
        value += jump.ln();
    }
    Ok(value)
}

/// Closed form of ∫ e^u P(W=w|u) φ(u; σ_u²) du:
/// exp(σ_u²/2)·Φ(x̃_wᵀα + σ_u ρ) for w = 1 and the complement for w = 0.
pub fn closed_form_frailty_treatment_integral(
    xw_alpha: f64,
    rho: f64,
    sigma_u: f64,
    w: bool,
) -> f64 {
    let scale = (0.5 * sigma_u * sigma_u).exp();
    let shifted = xw_alpha + sigma_u * rho;
    if w {
        scale * std_normal_cdf(shifted)
    } else {
        scale * std_normal_cdf(-shifted)
    }
}

/// Per-subject posterior moments Ê[U], Ê[e^U], Ê[U²] with the retained draws
/// and normalized weights that produced them.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    n: usize,
    b: usize,
    pub e_u: Vec<f64>,
    pub e_expu: Vec<f64>,
    pub e_u2: Vec<f64>,
    draws: Vec<f64>,
    weights: Vec<f64>,
}

impl PosteriorMoments {
    pub fn new(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            e_u: vec![0.0; n],
            e_expu: vec![0.0; n],
            e_u2: vec![0.0; n],
            draws: vec![0.0; n * b],
            weights: vec![0.0; n * b],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn draws_per_subject(&self) -> usize {
        self.b
    }

    pub fn subject_draws(&self, i: usize) -> &[f64] {
        &self.draws[i * self.b..(i + 1) * self.b]
    }

    pub fn subject_weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.b..(i + 1) * self.b]
    }

    pub(crate) fn subject_slots(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let lo = i * self.b;
        let hi = lo + self.b;
        let (draws, weights) = (&mut self.draws[lo..hi], &mut self.weights[lo..hi]);
        (draws, weights)
    }

    /// Computes the three moments for subject i from its stored draws and
    /// weights. `e_u2` is assembled as mean² + weighted variance so the
    /// Jensen inequality Ê[U²] ≥ Ê[U]² holds exactly in floating point.
    pub(crate) fn finalize_subject(&mut self, i: usize) {
        let lo = i * self.b;
        let hi = lo + self.b;
        let mut e_u = 0.0;
        let mut e_expu = 0.0;
        for (&u, &w) in self.draws[lo..hi].iter().zip(&self.weights[lo..hi]) {
            e_u += w * u;
            e_expu += w * u.exp();
        }
        let mut var = 0.0;
        for (&u, &w) in self.draws[lo..hi].iter().zip(&self.weights[lo..hi]) {
            var += w * (u - e_u) * (u - e_u);
        }
        self.e_u[i] = e_u;
        self.e_expu[i] = e_expu;
        self.e_u2[i] = e_u * e_u + var;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dataset, DesignSpec, SubjectRecord};
    use crate::quadrature::GaussHermite;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(alpha: Vec<f64>, beta: Vec<f64>, rho: f64, sigma_u: f64) -> ParameterSet {
        ParameterSet::new(alpha, beta, rho, sigma_u).unwrap()
    }

    #[test]
    fn cox_kernel_hand_cases() {
        let baseline = BaselineHazard::new(vec![1.0], vec![1.0]).unwrap();
        // δ=1, Λ{t}=1, x̃β=0, u=0, Λ(t)=1 → −1
        let v = cox_kernel(1.0, true, &[0.0], 0.0, &[0.0], &baseline).unwrap();
        assert_relative_eq!(v, -1.0, max_relative = 1e-15);
        // δ=0 before the first event: survival 1, contribution 0
        let v = cox_kernel(0.5, false, &[0.0], 0.0, &[1.0], &baseline).unwrap();
        assert_eq!(v, 0.0);
        // δ=0, Λ(t)=2, x̃β+u = log 3 → −6
        let baseline2 = BaselineHazard::new(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        let v = cox_kernel(2.5, false, &[1.0], 3.0f64.ln(), &[0.0], &baseline2).unwrap();
        assert_relative_eq!(v, -6.0, max_relative = 1e-14);
        // event at a time with no jump
        assert!(matches!(
            cox_kernel(0.7, true, &[0.0], 0.0, &[0.0], &baseline),
            Err(Error::BaselineNotCovering { .. })
        ));
    }

    #[test]
    fn treatment_weight_hand_cases() {
        assert_relative_eq!(
            treatment_weight(true, &[0.0], 0.0, &[1.0], 0.3, 1.0),
            0.5,
            max_relative = 1e-14
        );
        // rho = 0: weight is Φ(x̃ᵀα) no matter the frailty
        let w1 = treatment_weight(true, &[0.7], -3.0, &[1.0], 0.0, 1.0);
        let w2 = treatment_weight(true, &[0.7], 4.0, &[1.0], 0.0, 1.0);
        assert_relative_eq!(w1, w2, max_relative = 1e-15);
        assert_relative_eq!(w1, std_normal_cdf(0.7), max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn treatment_weight_complement(
            xw in -3.0f64..3.0,
            u in -4.0f64..4.0,
            alpha in -2.0f64..2.0,
            rho in -0.95f64..0.95,
            sigma in 0.3f64..2.0,
        ) {
            let w1 = treatment_weight(true, &[xw], u, &[alpha], rho, sigma);
            let w0 = treatment_weight(false, &[xw], u, &[alpha], rho, sigma);
            prop_assert!((w1 + w0 - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&w1));
            // strict positivity holds in the log domain even where the
            // probability saturates in f64
            let l1 = log_treatment_weight(true, &[xw], u, &[alpha], rho, sigma);
            let l0 = log_treatment_weight(false, &[xw], u, &[alpha], rho, sigma);
            prop_assert!(l1.is_finite() && l1 <= 0.0);
            prop_assert!(l0.is_finite() && l0 <= 0.0);
        }

        #[test]
        fn posterior_weights_normalize_and_jensen(
            seed in 0u64..500,
            rho in -0.9f64..0.9,
            lambda_t in 0.0f64..3.0,
            event in proptest::bool::ANY,
            treated in proptest::bool::ANY,
        ) {
            use rand::Rng;
            let mut rng = crate::dist::SeededStream::new(seed, 0).rng();
            let draws: Vec<f64> = (0..64)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            let params = params(vec![rng.gen_range(-1.0..1.0)], vec![0.4], rho, 1.0);
            let baseline = if lambda_t > 0.0 {
                BaselineHazard::new(vec![0.5], vec![lambda_t]).unwrap()
            } else {
                BaselineHazard::new(vec![10.0], vec![1.0]).unwrap()
            };
            let xt = [if treated { 1.0 } else { 0.0 }];
            let xw = [0.7];
            let subject = SubjectData {
                time: if event { 0.5 } else { 0.9 },
                event: false, // weights exclude the jump factor anyway
                treatment: treated,
                xt: &xt,
                xw: &xw,
            };
            let mut lw = Vec::new();
            let mut subj = subject;
            subj.event = event;
            posterior_log_weights(&subj, &params, &baseline, &draws, &mut lw);
            normalize_log_weights(&mut lw).unwrap();
            let total: f64 = lw.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(lw.iter().all(|&w| w >= 0.0));

            // Jensen on the finalized moments
            let mut m = PosteriorMoments::new(1, draws.len());
            {
                let (d, w) = m.subject_slots(0);
                d.copy_from_slice(&draws);
                w.copy_from_slice(&lw);
            }
            m.finalize_subject(0);
            prop_assert!(m.e_u2[0] >= m.e_u[0] * m.e_u[0]);
            prop_assert!(m.e_expu[0] >= (m.e_u[0]).exp() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn posterior_expectation_trivial_cases() {
        let baseline = BaselineHazard::new(vec![1.0], vec![0.5]).unwrap();
        let p = params(vec![0.3], vec![0.4], 0.2, 1.0);
        let xt = [1.0];
        let xw = [0.5];
        let subject = SubjectData {
            time: 1.0,
            event: true,
            treatment: true,
            xt: &xt,
            xw: &xw,
        };
        let draws = vec![-0.7, 0.1, 1.3, 2.2];
        // constant G
        let c = posterior_expectation(|_| 4.25, &subject, &p, &baseline, &draws).unwrap();
        assert_relative_eq!(c, 4.25, max_relative = 1e-12);
        // single atom
        let one = posterior_expectation(|u| u, &subject, &p, &baseline, &draws[..1]).unwrap();
        assert_eq!(one, draws[0]);
        // uniform weights when nothing depends on u
        let flat_baseline = BaselineHazard::new(vec![10.0], vec![1.0]).unwrap();
        let p0 = params(vec![0.3], vec![0.4], 0.0, 1.0);
        let censored = SubjectData {
            time: 0.5,
            event: false,
            treatment: true,
            xt: &xt,
            xw: &xw,
        };
        let m = posterior_expectation(|u| u, &censored, &p0, &flat_baseline, &draws).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert_relative_eq!(m, mean, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_weights_detected() {
        let mut lw = vec![f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(matches!(
            normalize_log_weights(&mut lw),
            Err(Error::DegenerateWeights { .. })
        ));
    }

    fn tiny_dataset() -> (Dataset, DesignSpec) {
        let design = DesignSpec::default_for(1, 1);
        let records = vec![SubjectRecord {
            time: 1.0,
            event: true,
            treatment: true,
            covariates: vec![0.0],
            instruments: vec![0.0],
        }];
        (validate_dataset(records, &design).unwrap(), design)
    }

    #[test]
    fn complete_data_loglik_hand_case() {
        // −1 (cox) + log 0.5 (treatment at Φ(0)) + log φ(0)
        let (ds, design) = tiny_dataset();
        let p = params(vec![0.0, 0.0], vec![0.0, 0.0], 0.0, 1.0);
        let baseline = BaselineHazard::new(vec![1.0], vec![1.0]).unwrap();
        let ll = complete_data_loglik(&ds, &design, &p, &baseline, &[0.0]).unwrap();
        let expected = -1.0 + 0.5f64.ln() + log_std_normal_pdf(0.0);
        assert_relative_eq!(ll, expected, max_relative = 1e-14);
    }

    #[test]
    fn complete_data_loglik_additivity_and_monotonicity() {
        let design = DesignSpec::default_for(1, 1);
        let rec = |t: f64, ev: bool| SubjectRecord {
            time: t,
            event: ev,
            treatment: true,
            covariates: vec![0.25],
            instruments: vec![0.5],
        };
        let single = validate_dataset(vec![rec(2.0, false)], &design).unwrap();
        let double = validate_dataset(vec![rec(2.0, false), rec(2.0, false)], &design).unwrap();
        let p = params(vec![0.4, -0.1], vec![0.3, -0.2], 0.25, 1.0);
        let baseline = BaselineHazard::new(vec![1.0], vec![0.7]).unwrap();
        let ll1 = complete_data_loglik(&single, &design, &p, &baseline, &[0.3]).unwrap();
        let ll2 = complete_data_loglik(&double, &design, &p, &baseline, &[0.3, 0.3]).unwrap();
        assert_relative_eq!(ll2, 2.0 * ll1, max_relative = 1e-13);

        // scaling up Λ(t) with δ=0 strictly decreases the log-likelihood
        let bigger = BaselineHazard::new(vec![1.0], vec![1.4]).unwrap();
        let ll_big = complete_data_loglik(&single, &design, &p, &bigger, &[0.3]).unwrap();
        assert!(ll_big < ll1);
    }

    #[test]
    fn observed_loglik_mc_degenerate_average() {
        let (ds, design) = tiny_dataset();
        let p = params(vec![0.2, 0.1], vec![0.1, 0.0], 0.3, 1.0);
        let baseline = BaselineHazard::new(vec![1.0], vec![0.8]).unwrap();
        let u1 = 0.47;
        let obs = observed_loglik_mc(&ds, &design, &p, &baseline, &[vec![u1]]).unwrap();
        let complete = complete_data_loglik(&ds, &design, &p, &baseline, &[u1]).unwrap();
        let sampling_adjustment = log_std_normal_pdf(u1 / p.sigma_u) - p.sigma_u.ln();
        assert_relative_eq!(obs, complete - sampling_adjustment, max_relative = 1e-13);
    }

    #[test]
    fn observed_loglik_mc_reduces_to_probit_term() {
        // ρ=0, δ=0, Λ(t)=0: every frailty term integrates to 1, leaving log Φ(±x̃ᵀα)
        let design = DesignSpec::default_for(1, 1);
        let records = vec![SubjectRecord {
            time: 0.5,
            event: false,
            treatment: true,
            covariates: vec![0.0],
            instruments: vec![1.0],
        }];
        let ds = validate_dataset(records, &design).unwrap();
        let p = params(vec![0.8, 0.0], vec![0.0, 0.0], 0.0, 1.0);
        let baseline = BaselineHazard::new(vec![10.0], vec![1.0]).unwrap();
        let draws = vec![-1.0, -0.2, 0.4, 1.7, 0.0];
        let obs = observed_loglik_mc(&ds, &design, &p, &baseline, &[draws]).unwrap();
        assert_relative_eq!(obs, log_std_normal_cdf(0.8), max_relative = 1e-13);
    }

    #[test]
    fn closed_form_integral_hand_cases() {
        // ρ=0, σ=1, a=0 → e^{1/2}·0.5
        let v = closed_form_frailty_treatment_integral(0.0, 0.0, 1.0, true);
        assert_relative_eq!(v, 0.5f64.exp() * 0.5, max_relative = 1e-14);
        // complement sums to e^{σ²/2}
        for &(a, rho, s) in &[(0.3, 0.4, 1.0), (-1.2, -0.7, 0.5), (2.0, 0.9, 2.0)] {
            let w1 = closed_form_frailty_treatment_integral(a, rho, s, true);
            let w0 = closed_form_frailty_treatment_integral(a, rho, s, false);
            assert_relative_eq!(w1 + w0, (0.5 * s * s).exp(), max_relative = 1e-13);
        }
    }

    #[test]
    fn closed_form_integral_matches_quadrature() {
        let gh = GaussHermite::new(61);
        for &sigma in &[0.5, 1.0] {
            for &rho in &[0.0, 0.4, -0.4, 0.9, -0.9] {
                for &a in &[-2.0, -0.3, 0.0, 0.3, 2.0] {
                    for &w in &[true, false] {
                        let alpha = [a];
                        let xw = [1.0];
                        let quad = gh.integrate_gaussian(sigma, |u| {
                            u.exp() * treatment_weight(w, &xw, u, &alpha, rho, sigma)
                        });
                        let closed = closed_form_frailty_treatment_integral(a, rho, sigma, w);
                        assert!(
                            (quad - closed).abs() < 1e-8,
                            "a={a} rho={rho} sigma={sigma} w={w}: quad {quad} vs closed {closed}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn censoring_factors_cancel_in_posterior() {
        // multiplying any u-independent censoring density into the weights
        // leaves the posterior expectation unchanged
        let baseline = BaselineHazard::new(vec![1.0], vec![0.6]).unwrap();
        let p = params(vec![0.3], vec![0.4], 0.5, 1.0);
        let xt = [1.0];
        let xw = [0.5];
        let subject = SubjectData {
            time: 1.0,
            event: true,
            treatment: false,
            xt: &xt,
            xw: &xw,
        };
        let draws = vec![-1.1, -0.3, 0.2, 0.9, 1.8];
        let mut lw = Vec::new();
        posterior_log_weights(&subject, &p, &baseline, &draws, &mut lw);
        let mut lw_censored: Vec<f64> = lw.iter().map(|x| x + (0.123f64).ln()).collect();
        normalize_log_weights(&mut lw).unwrap();
        normalize_log_weights(&mut lw_censored).unwrap();
        for (a, b) in lw.iter().zip(&lw_censored) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }
}
