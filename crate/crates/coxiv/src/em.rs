//! The Monte Carlo EM loop: initialization from ordinary Cox and probit
//! fits, a self-normalized importance-sampling E-step with per-subject
//! frailty draws, the two M-step blocks (profile Cox update and the
//! treatment/correlation block), convergence control, and nonparametric
//! bootstrap standard errors.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crate::cox::{breslow_update, fit_cox, fit_probit};
use crate::dist::{derive_seed, log_std_normal_cdf, log_std_normal_pdf, SeededStream};
use crate::error::{Error, Result};
use crate::kernel::PosteriorMoments;
use crate::model::{
    build_designs, validate_dataset_with, validate_identification, BaselineHazard, Dataset,
    DesignMatrix, DesignSpec, FitResult, IdentificationConfig, ParameterSet, TiePolicy,
    TraceEntry, ValidationOptions, RHO_CAP,
};
use crate::optim::{bfgs_maximize, BfgsOptions};

const EM_DRAW_TAG: u64 = 0x454d_4452;
const BOOT_IDX_TAG: u64 = 0x424f_4f54;
const BOOT_FIT_TAG: u64 = 0x4246_4954;
const BOOT_JITTER_TAG: u64 = 0x424a_4954;

/// Monte Carlo EM configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EMConfig {
    /// Frailty draws per subject (B).
    pub draws_per_subject: usize,
    /// Convergence tolerance on the max-norm parameter change.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Reuse one set of standard-normal draws across iterations (common
    /// random numbers); false redraws every E-step.
    pub frozen_draws: bool,
    /// Update sigma_u by its closed-form M-step (not identified jointly with
    /// the nonparametric baseline; opt-in).
    pub estimate_sigma_u: bool,
    pub seed: u64,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            draws_per_subject: 100,
            epsilon: 1e-3,
            max_iter: 200,
            frozen_draws: true,
            estimate_sigma_u: false,
            seed: 0,
        }
    }
}

impl EMConfig {
    fn validate(&self) -> Result<()> {
        if self.draws_per_subject < 1 {
            return Err(Error::InvalidParameter(
                "draws_per_subject must be at least 1".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// State carried across EM iterations.
#[derive(Debug, Clone)]
pub struct EMState {
    pub k: usize,
    pub params: ParameterSet,
    pub baseline: BaselineHazard,
    pub moments: Option<PosteriorMoments>,
    pub observed_loglik: f64,
}

/// Precomputed per-fit data: design matrices, outcome arrays, and the
/// per-subject draw streams (keyed by record content so estimates do not
/// depend on record order).
pub struct EMWorkspace {
    xw: DesignMatrix,
    xt: DesignMatrix,
    times: Vec<f64>,
    events: Vec<bool>,
    treatments: Vec<bool>,
    subject_rngs: Vec<ChaCha12Rng>,
    frozen_z: Option<Vec<f64>>,
    b: usize,
}

impl EMWorkspace {
    pub fn new(dataset: &Dataset, design: &DesignSpec, config: &EMConfig) -> Self {
        let (xw, xt) = build_designs(dataset, design);
        let em_seed = derive_seed(config.seed, EM_DRAW_TAG, 0);
        let mut subject_rngs: Vec<ChaCha12Rng> = dataset
            .records()
            .iter()
            .map(|rec| SeededStream::new(em_seed, rec.content_hash()).rng())
            .collect();
        let b = config.draws_per_subject;
        let frozen_z = config.frozen_draws.then(|| {
            let mut z = Vec::with_capacity(dataset.n() * b);
            for rng in &mut subject_rngs {
                for _ in 0..b {
                    z.push(rand_distr::StandardNormal.sample(rng));
                }
            }
            z
        });
        Self {
            xw,
            xt,
            times: dataset.times(),
            events: dataset.events(),
            treatments: dataset.treatments(),
            subject_rngs,
            frozen_z,
            b,
        }
    }

    fn n(&self) -> usize {
        self.times.len()
    }

    pub fn designs(&self) -> (&DesignMatrix, &DesignMatrix) {
        (&self.xw, &self.xt)
    }
}

/// Initializes the EM: β from an ordinary Cox fit (zero offsets), α from the
/// probit MLE, ρ = 0, σ_u = 1, and the Breslow baseline at β₀.
pub fn initialize(
    dataset: &Dataset,
    design: &DesignSpec,
    config: &EMConfig,
) -> Result<(EMState, EMWorkspace, Vec<String>)> {
    config.validate()?;
    let warnings = validate_identification(
        design,
        IdentificationConfig {
            estimate_sigma_u: config.estimate_sigma_u,
            rho_is_free: true,
        },
    )?;
    if design.treatment_col().is_none() {
        return Err(Error::InvalidSpec(
            "hazard design must contain the treatment main effect".into(),
        ));
    }
    let workspace = EMWorkspace::new(dataset, design, config);
    let zero_offsets = vec![0.0; workspace.n()];
    let cox = fit_cox(&workspace.xt, &workspace.times, &workspace.events, &zero_offsets)?;
    let probit = fit_probit(&workspace.xw, &workspace.treatments)?;
    let baseline = breslow_update(
        &cox.beta,
        &workspace.xt,
        &workspace.times,
        &workspace.events,
        &zero_offsets,
    )?;
    let params = ParameterSet::new(probit.alpha, cox.beta, 0.0, 1.0)?;
    Ok((
        EMState {
            k: 0,
            params,
            baseline,
            moments: None,
            observed_loglik: f64::NEG_INFINITY,
        },
        workspace,
        warnings,
    ))
}

/// E-step: per-subject frailty draws u_b ~ N(0, σ_{u,k}²) weighted by the
/// complete-data kernel, yielding Ê[U], Ê[e^U], Ê[U²] and the retained
/// weighted draws. Also returns the Monte Carlo observed log-likelihood at
/// the current parameters (computed from the same draws).
pub fn e_step(
    params: &ParameterSet,
    baseline: &BaselineHazard,
    workspace: &mut EMWorkspace,
) -> Result<(PosteriorMoments, f64)> {
    let n = workspace.n();
    let b = workspace.b;
    let mut moments = PosteriorMoments::new(n, b);
    let mut obs_loglik = 0.0;
    let sigma = params.sigma_u;
    let rho = params.rho;
    let s = 1.0 / (1.0 - rho * rho).sqrt();
    let c = s * rho / sigma;
    let ln_b = (b as f64).ln();

    for i in 0..n {
        let xtb = workspace.xt.row_dot(i, &params.beta);
        let swa = s * workspace.xw.row_dot(i, &params.alpha);
        let lam = baseline.cumulative(workspace.times[i]);
        let delta = if workspace.events[i] { 1.0 } else { 0.0 };
        let sign = if workspace.treatments[i] { 1.0 } else { -1.0 };

        let (draws, weights) = moments.subject_slots(i);
        match &workspace.frozen_z {
            Some(z) => {
                for (slot, &zv) in draws.iter_mut().zip(&z[i * b..(i + 1) * b]) {
                    *slot = sigma * zv;
                }
            }
            None => {
                let rng = &mut workspace.subject_rngs[i];
                for slot in draws.iter_mut() {
                    let zv: f64 = rand_distr::StandardNormal.sample(rng);
                    *slot = sigma * zv;
                }
            }
        }
        let mut max_lw = f64::NEG_INFINITY;
        for (slot, &u) in weights.iter_mut().zip(draws.iter()) {
            let eta = xtb + u;
            let lw = delta * eta - lam * eta.exp() + log_std_normal_cdf(sign * (swa + c * u));
            *slot = lw;
            if lw > max_lw {
                max_lw = lw;
            }
        }
        if !max_lw.is_finite() {
            return Err(Error::DegenerateWeights { subject: Some(i) });
        }
        let mut total = 0.0;
        for slot in weights.iter_mut() {
            *slot = (*slot - max_lw).exp();
            total += *slot;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateWeights { subject: Some(i) });
        }
        for slot in weights.iter_mut() {
            *slot /= total;
        }
        // subject's observed-loglik contribution: logsumexp − log B + δ log Λ{t}
        obs_loglik += max_lw + total.ln() - ln_b;
        if workspace.events[i] {
            let jump = baseline
                .jump_at(workspace.times[i])
                .ok_or(Error::BaselineNotCovering {
                    time: workspace.times[i],
                })?;
            obs_loglik += jump.ln();
        }
        moments.finalize_subject(i);
    }
    Ok((moments, obs_loglik))
}

/// Cox M-step block: offsets log Ê[e^U], Newton fit of β, Breslow update.
pub fn m_step_cox(
    moments: &PosteriorMoments,
    workspace: &EMWorkspace,
) -> Result<(Vec<f64>, BaselineHazard)> {
    let offsets: Vec<f64> = moments.e_expu.iter().map(|e| e.ln()).collect();
    let fit = fit_cox(&workspace.xt, &workspace.times, &workspace.events, &offsets)?;
    let baseline = breslow_update(
        &fit.beta,
        &workspace.xt,
        &workspace.times,
        &workspace.events,
        &offsets,
    )?;
    Ok((fit.beta, baseline))
}

/// The ℓ^{o,1} block of the split E-step objective at (β, baseline) given
/// frozen moments.
pub fn cox_block_objective(
    beta: &[f64],
    baseline: &BaselineHazard,
    moments: &PosteriorMoments,
    workspace: &EMWorkspace,
) -> f64 {
    let mut value = 0.0;
    for i in 0..workspace.n() {
        let xb = workspace.xt.row_dot(i, beta);
        if workspace.events[i] {
            let jump = baseline.jump_at(workspace.times[i]).unwrap_or(f64::NAN);
            value += jump.ln() + xb + moments.e_u[i];
        }
        value -= baseline.cumulative(workspace.times[i]) * xb.exp() * moments.e_expu[i];
    }
    value
}

/// The ℓ^{o,2} block at (α, ρ, σ_u) given frozen moments and weighted draws:
/// −(1/2σ²)ΣÊ[U²] − n log σ + Σ_i Σ_b ω_{ib}[w_i log Φ(a_ib) + (1−w_i) log(1−Φ(a_ib))].
pub fn treatment_block_objective(
    alpha: &[f64],
    rho: f64,
    sigma_u: f64,
    moments: &PosteriorMoments,
    workspace: &EMWorkspace,
) -> f64 {
    let n = workspace.n();
    let s = 1.0 / (1.0 - rho * rho).sqrt();
    let mut value = 0.0;
    for i in 0..n {
        let swa = s * workspace.xw.row_dot(i, alpha);
        let sign = if workspace.treatments[i] { 1.0 } else { -1.0 };
        let draws = moments.subject_draws(i);
        let weights = moments.subject_weights(i);
        for (&u, &w) in draws.iter().zip(weights) {
            value += w * log_std_normal_cdf(sign * (swa + s * rho / sigma_u * u));
        }
        value -= 0.5 * moments.e_u2[i] / (sigma_u * sigma_u);
    }
    value - n as f64 * sigma_u.ln()
}

fn eta_from_rho(rho: f64) -> f64 {
    rho.clamp(-RHO_CAP, RHO_CAP).atanh()
}

/// Value and gradient of the weighted probit block over p = (α, η) with
/// ρ = tanh(η), for fixed moments, weighted draws, and σ_u.
pub(crate) fn treatment_block_value_grad(
    p: &[f64],
    moments: &PosteriorMoments,
    workspace: &EMWorkspace,
    sigma_u: f64,
) -> (f64, DVector<f64>) {
    let n = workspace.n();
    let q = workspace.xw.n_cols();
    let alpha = &p[..q];
    let eta = p[q];
    let rho = eta.tanh();
    let s2 = 1.0 - rho * rho;
    let s = 1.0 / s2.sqrt();
    let mut value = 0.0;
    let mut grad = DVector::zeros(q + 1);
    for i in 0..n {
        let row = workspace.xw.row(i);
        let swa = s * crate::model::dot(row, alpha);
        let sign = if workspace.treatments[i] { 1.0 } else { -1.0 };
        let draws = moments.subject_draws(i);
        let weights = moments.subject_weights(i);
        let mut d_alpha_acc = 0.0;
        for (&u, &w) in draws.iter().zip(weights) {
            let c = u / sigma_u;
            let a = swa + s * rho * c;
            let log_phi_cdf = log_std_normal_cdf(sign * a);
            value += w * log_phi_cdf;
            // d/da log Φ(sign·a) = sign · φ(a)/Φ(sign·a)
            let dlog = sign * (log_std_normal_pdf(a) - log_phi_cdf).exp();
            d_alpha_acc += w * dlog;
            // da/dρ = s·c + a·ρ·s²
            let da_drho = s * c + a * rho * s * s;
            grad[q] += w * dlog * da_drho;
        }
        for (gslot, &x) in grad.iter_mut().take(q).zip(row) {
            *gslot += d_alpha_acc * s * x;
        }
    }
    grad[q] *= s2; // chain rule dρ/dη = 1 − ρ²
    (value, grad)
}

/// Treatment M-step: maximizes the weighted probit block over (α, ρ) by BFGS
/// with ρ = tanh(η); when `estimate_sigma_u`, σ_u is first updated in closed
/// form σ̂² = (1/n) Σ Ê[U²].
pub fn m_step_treatment(
    moments: &PosteriorMoments,
    workspace: &EMWorkspace,
    config: &EMConfig,
    warm_alpha: &[f64],
    warm_rho: f64,
    sigma_u: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    let n = workspace.n();
    let q = workspace.xw.n_cols();
    let new_sigma = if config.estimate_sigma_u {
        (moments.e_u2.iter().sum::<f64>() / n as f64).sqrt().max(1e-6)
    } else {
        sigma_u
    };

    let mut start = warm_alpha.to_vec();
    start.push(eta_from_rho(warm_rho));
    let opts = BfgsOptions::default();
    let result = bfgs_maximize(
        start,
        |p| treatment_block_value_grad(p, moments, workspace, new_sigma),
        &opts,
    )
    .ok_or(Error::NonConvergence {
        max_iter: opts.max_iter,
    })?;
    let alpha = result.x[..q].to_vec();
    let rho = result.x[q].tanh().clamp(-RHO_CAP, RHO_CAP);
    Ok((alpha, rho, new_sigma))
}

/// Runs the full Monte Carlo EM loop until the max-norm change of
/// (β, α, ρ[, σ_u]) drops below ε or `max_iter` is reached. On reaching the
/// cap, the best-so-far (last) iterate is returned with `converged = false`.
pub fn run_em(dataset: &Dataset, design: &DesignSpec, config: &EMConfig) -> Result<FitResult> {
    let (mut state, mut workspace, warnings) = initialize(dataset, design, config)?;
    let treatment_col = design.treatment_col().expect("checked in initialize");
    let mut trace: Vec<TraceEntry> = Vec::with_capacity(config.max_iter + 1);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_delta = 0.0;

    for k in 0..config.max_iter {
        let (moments, obs_ll) = e_step(&state.params, &state.baseline, &mut workspace)?;
        trace.push(TraceEntry {
            iteration: k,
            beta: state.params.beta.clone(),
            alpha: state.params.alpha.clone(),
            rho: state.params.rho,
            sigma_u: state.params.sigma_u,
            observed_loglik: obs_ll,
            max_delta: last_delta,
        });

        let (beta_new, baseline_new) = m_step_cox(&moments, &workspace)?;
        let (alpha_new, rho_new, sigma_new) = m_step_treatment(
            &moments,
            &workspace,
            config,
            &state.params.alpha,
            state.params.rho,
            state.params.sigma_u,
        )?;

        let mut delta = 0.0f64;
        for (new, old) in beta_new.iter().zip(&state.params.beta) {
            delta = delta.max((new - old).abs());
        }
        for (new, old) in alpha_new.iter().zip(&state.params.alpha) {
            delta = delta.max((new - old).abs());
        }
        delta = delta.max((rho_new - state.params.rho).abs());
        if config.estimate_sigma_u {
            delta = delta.max((sigma_new - state.params.sigma_u).abs());
        }

        state.params = ParameterSet::new(alpha_new, beta_new, rho_new, sigma_new)?;
        state.baseline = baseline_new;
        state.moments = Some(moments);
        state.observed_loglik = obs_ll;
        state.k = k + 1;
        iterations = k + 1;
        last_delta = delta;
        if delta < config.epsilon {
            converged = true;
            break;
        }
    }

    // observed log-likelihood at the final parameters, same draw streams
    let (_, final_obs_ll) = e_step(&state.params, &state.baseline, &mut workspace)?;
    trace.push(TraceEntry {
        iteration: iterations,
        beta: state.params.beta.clone(),
        alpha: state.params.alpha.clone(),
        rho: state.params.rho,
        sigma_u: state.params.sigma_u,
        observed_loglik: final_obs_ll,
        max_delta: last_delta,
    });

    let hazard_ratio = state.params.beta[treatment_col].exp();
    Ok(FitResult {
        parameters: state.params,
        baseline: state.baseline,
        hazard_ratio,
        iterations,
        converged,
        final_observed_loglik: final_obs_ll,
        trace,
        frozen_draws: config.frozen_draws,
        draws_per_subject: config.draws_per_subject,
        warnings,
    })
}

/// Per-parameter bootstrap standard errors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BootstrapSe {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub sigma_u: Option<f64>,
    pub hazard_ratio: f64,
    pub log_hazard_ratio: f64,
    pub n_success: usize,
    pub n_failed: usize,
}

/// Nonparametric bootstrap: resamples subjects with replacement, refits, and
/// reports the standard deviation of the estimates over successful
/// resamples. Errors when more than 20% of resamples fail.
pub fn bootstrap_se(
    dataset: &Dataset,
    design: &DesignSpec,
    config: &EMConfig,
    n_boot: usize,
) -> Result<BootstrapSe> {
    if n_boot < 2 {
        return Err(Error::InvalidParameter(
            "bootstrap requires at least 2 resamples".into(),
        ));
    }
    let n = dataset.n();
    let indices: Vec<Vec<usize>> = (0..n_boot)
        .map(|b| {
            let mut rng = SeededStream::new(derive_seed(config.seed, BOOT_IDX_TAG, b as u64), 0).rng();
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        })
        .collect();
    bootstrap_se_from_indices(dataset, design, config, &indices)
}

/// Deterministic core of [`bootstrap_se`]: fits each listed resample.
pub fn bootstrap_se_from_indices(
    dataset: &Dataset,
    design: &DesignSpec,
    config: &EMConfig,
    indices: &[Vec<usize>],
) -> Result<BootstrapSe> {
    let n_boot = indices.len();
    let fits: Vec<Option<FitResult>> = indices
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let records: Vec<_> = idx
                .iter()
                .map(|&i| dataset.records()[i].clone())
                .collect();
            // resampling duplicates subjects, so tied event times are expected
            let opts = ValidationOptions {
                tie_policy: TiePolicy::Jitter,
                seed: derive_seed(config.seed, BOOT_JITTER_TAG, b as u64),
            };
            let resampled = validate_dataset_with(records, design, opts).ok()?;
            let boot_config = EMConfig {
                seed: derive_seed(config.seed, BOOT_FIT_TAG, b as u64),
                ..*config
            };
            run_em(&resampled, design, &boot_config).ok()
        })
        .collect();

    let successes: Vec<&FitResult> = fits.iter().flatten().collect();
    let n_failed = n_boot - successes.len();
    if n_failed * 5 > n_boot {
        return Err(Error::TooManyFailures {
            failed: n_failed,
            total: n_boot,
            limit_percent: 20,
        });
    }

    let sd = |values: &[f64]| -> f64 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        if values.len() < 2 {
            return 0.0;
        }
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };

    let q = design.q();
    let r = design.r();
    let alpha_se: Vec<f64> = (0..q)
        .map(|j| sd(&successes.iter().map(|f| f.parameters.alpha[j]).collect::<Vec<_>>()))
        .collect();
    let beta_se: Vec<f64> = (0..r)
        .map(|j| sd(&successes.iter().map(|f| f.parameters.beta[j]).collect::<Vec<_>>()))
        .collect();
    let rho_se = sd(&successes.iter().map(|f| f.parameters.rho).collect::<Vec<_>>());
    let sigma_se = config
        .estimate_sigma_u
        .then(|| sd(&successes.iter().map(|f| f.parameters.sigma_u).collect::<Vec<_>>()));
    let hr_se = sd(&successes.iter().map(|f| f.hazard_ratio).collect::<Vec<_>>());
    let log_hr_se = sd(&successes.iter().map(|f| f.hazard_ratio.ln()).collect::<Vec<_>>());

    Ok(BootstrapSe {
        alpha: alpha_se,
        beta: beta_se,
        rho: rho_se,
        sigma_u: sigma_se,
        hazard_ratio: hr_se,
        log_hazard_ratio: log_hr_se,
        n_success: successes.len(),
        n_failed,
    })
}
