//! Cox partial-likelihood machinery with subject-level offsets (profile
//! likelihood of the frailty M-step), the Breslow baseline update, and the
//! probit MLE used for initialization and the first-stage comparator.
//!
//! Risk-set sums are accumulated in one reverse pass over subjects sorted by
//! time. The Breslow jump at an event time t_i is 1/Σ_{j: t_j ≥ t_i}
//! exp(x̃_{t,j}ᵀβ + offset_j), i.e. the design rows inside the sum are those
//! of the risk-set members j.

use nalgebra::{DMatrix, DVector};

use crate::dist::{log_std_normal_cdf, mills_ratio};
use crate::error::{Error, Result};
use crate::model::{BaselineHazard, DesignMatrix};
use crate::optim::{newton_maximize, NewtonError, NewtonOptions};

/// Subjects ordered by observed time with per-event risk-set boundaries.
/// Risk sets are nested: the risk set of a later event time is contained in
/// that of an earlier one.
#[derive(Debug, Clone)]
pub struct RiskSetIndex {
    /// Subject indices sorted by ascending time.
    order: Vec<usize>,
    /// For each event (ascending time), (position in `order`, suffix start):
    /// the risk set is `order[suffix_start..]`.
    events: Vec<(usize, usize)>,
}

impl RiskSetIndex {
    pub fn new(times: &[f64], events: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap().then(a.cmp(&b)));
        let mut event_entries = Vec::new();
        let mut pos = 0;
        while pos < order.len() {
            let t = times[order[pos]];
            let mut group_end = pos + 1;
            while group_end < order.len() && times[order[group_end]] == t {
                group_end += 1;
            }
            // the risk set {j : t_j >= t} starts at the group's first position
            for p in pos..group_end {
                if events[order[p]] {
                    event_entries.push((p, pos));
                }
            }
            pos = group_end;
        }
        Self {
            order,
            events: event_entries,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// (event subject index, risk-set suffix start) in ascending time order.
    pub fn events(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.events.iter().map(|&(p, s)| (self.order[p], s))
    }
}

/// Value, gradient, and Hessian of the offset partial log-likelihood
/// Σ_{i: δ_i=1} [x̃_{t,i}ᵀβ − log Σ_{j: t_j ≥ t_i} exp(x̃_{t,j}ᵀβ + offset_j)].
pub fn cox_profile_loglik(
    beta: &[f64],
    xt: &DesignMatrix,
    times: &[f64],
    events: &[bool],
    offset: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let index = RiskSetIndex::new(times, events);
    cox_profile_loglik_indexed(beta, xt, offset, &index)
}

fn cox_profile_loglik_indexed(
    beta: &[f64],
    xt: &DesignMatrix,
    offset: &[f64],
    index: &RiskSetIndex,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let r = xt.n_cols();
    let mut value = 0.0;
    let mut grad = DVector::zeros(r);
    let mut hess = DMatrix::zeros(r, r);

    // reverse pass: accumulate S0, S1, S2 over the order suffix
    let order = index.order();
    let n = order.len();
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; r];
    let mut s2 = vec![0.0; r * r];
    let mut suffix = n; // current sums cover order[suffix..]
    let mut ratio = vec![0.0; r];

    for &(event_pos, risk_start) in index.events.iter().rev() {
        while suffix > risk_start {
            suffix -= 1;
            let j = order[suffix];
            let row = xt.row(j);
            let score = (crate::model::dot(row, beta) + offset[j]).exp();
            s0 += score;
            for a in 0..r {
                s1[a] += score * row[a];
                for b in a..r {
                    s2[a * r + b] += score * row[a] * row[b];
                }
            }
        }
        let i = order[event_pos];
        let row = xt.row(i);
        value += crate::model::dot(row, beta) - s0.ln();
        for a in 0..r {
            ratio[a] = s1[a] / s0;
            grad[a] += row[a] - ratio[a];
        }
        for a in 0..r {
            for b in a..r {
                let h = s2[a * r + b] / s0 - ratio[a] * ratio[b];
                hess[(a, b)] -= h;
                if a != b {
                    hess[(b, a)] = hess[(a, b)];
                }
            }
        }
    }
    (value, grad, hess)
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Newton-Raphson fit of the offset partial likelihood, started at β = 0.
pub fn fit_cox(
    xt: &DesignMatrix,
    times: &[f64],
    events: &[bool],
    offset: &[f64],
) -> Result<CoxFit> {
    let index = RiskSetIndex::new(times, events);
    let r = xt.n_cols();
    let result = newton_maximize(
        vec![0.0; r],
        |beta| cox_profile_loglik_indexed(beta, xt, offset, &index),
        &NewtonOptions::default(),
    )
    .map_err(|e| match e {
        NewtonError::Singular => Error::SingularHessian,
        NewtonError::Diverged { limit } => Error::MonotoneLikelihoodDivergence { limit },
    })?;
    Ok(CoxFit {
        beta: result.x,
        converged: result.converged,
        iterations: result.iterations,
    })
}

/// Breslow update: one jump per uncensored time,
/// λ̂_i = 1 / Σ_{j: t_j ≥ t_i} exp(x̃_{t,j}ᵀβ + offset_j).
pub fn breslow_update(
    beta: &[f64],
    xt: &DesignMatrix,
    times: &[f64],
    events: &[bool],
    offset: &[f64],
) -> Result<BaselineHazard> {
    let index = RiskSetIndex::new(times, events);
    let order = index.order();
    let n = order.len();
    let mut s0 = 0.0;
    let mut suffix = n;
    let mut jumps_rev = Vec::with_capacity(index.n_events());
    let mut times_rev = Vec::with_capacity(index.n_events());
    for &(event_pos, risk_start) in index.events.iter().rev() {
        while suffix > risk_start {
            suffix -= 1;
            let j = order[suffix];
            s0 += (crate::model::dot(xt.row(j), beta) + offset[j]).exp();
        }
        times_rev.push(times[order[event_pos]]);
        jumps_rev.push(1.0 / s0);
    }
    times_rev.reverse();
    jumps_rev.reverse();
    BaselineHazard::new(times_rev, jumps_rev)
}

#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub alpha: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Probit log-likelihood value/gradient/Hessian at α.
pub fn probit_loglik(
    alpha: &[f64],
    xw: &DesignMatrix,
    w: &[bool],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let q = xw.n_cols();
    let mut value = 0.0;
    let mut grad = DVector::zeros(q);
    let mut hess = DMatrix::zeros(q, q);
    for i in 0..xw.n_rows() {
        let row = xw.row(i);
        let eta = crate::model::dot(row, alpha);
        let (score, curvature) = if w[i] {
            value += log_std_normal_cdf(eta);
            let m = mills_ratio(eta);
            (m, m * (m + eta))
        } else {
            value += log_std_normal_cdf(-eta);
            let m = mills_ratio(-eta);
            (-m, m * (m - eta))
        };
        for a in 0..q {
            grad[a] += score * row[a];
            for b in a..q {
                hess[(a, b)] -= curvature * row[a] * row[b];
                if a != b {
                    hess[(b, a)] = hess[(a, b)];
                }
            }
        }
    }
    (value, grad, hess)
}

/// Probit MLE by Newton-Raphson with step-halving, started at α = 0.
pub fn fit_probit(xw: &DesignMatrix, w: &[bool]) -> Result<ProbitFit> {
    let q = xw.n_cols();
    let result = newton_maximize(
        vec![0.0; q],
        |alpha| probit_loglik(alpha, xw, w),
        &NewtonOptions::default(),
    )
    .map_err(|e| match e {
        NewtonError::Singular => Error::SingularHessian,
        NewtonError::Diverged { limit } => Error::Separation { limit },
    })?;
    Ok(ProbitFit {
        alpha: result.x,
        converged: result.converged,
        iterations: result.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DesignMatrix;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn matrix(rows: &[&[f64]]) -> DesignMatrix {
        let n = rows.len();
        let c = rows[0].len();
        DesignMatrix::from_rows(n, c, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn partial_loglik_two_subject_hand_case() {
        let xt = matrix(&[&[1.0], &[0.0]]);
        let (value, _, _) = cox_profile_loglik(
            &[0.0],
            &xt,
            &[1.0, 2.0],
            &[true, true],
            &[0.0, 0.0],
        );
        assert_relative_eq!(value, -(2.0f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn constant_offset_shifts_value_by_ns_times_c() {
        let xt = matrix(&[&[1.0], &[0.3], &[-0.5], &[0.9]]);
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true, false, true, true];
        let beta = [0.4];
        let (v0, _, _) = cox_profile_loglik(&beta, &xt, &times, &events, &[0.0; 4]);
        let c = 0.73;
        let (vc, _, _) = cox_profile_loglik(&beta, &xt, &times, &events, &[c; 4]);
        let n_s = 3.0;
        assert_relative_eq!(vc, v0 - n_s * c, max_relative = 1e-12);

        // and the maximizer is unchanged
        let b0 = fit_cox(&xt, &times, &events, &[0.0; 4]).unwrap();
        let bc = fit_cox(&xt, &times, &events, &[c; 4]).unwrap();
        assert_relative_eq!(b0.beta[0], bc.beta[0], epsilon = 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::dist::SeededStream::new(3, 1).rng();
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let xt = DesignMatrix::from_rows(n, 2, rows.into_iter().flatten().collect());
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let events: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        let offset: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for _ in 0..20 {
            let beta = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (_, grad, _) = cox_profile_loglik(&beta, &xt, &times, &events, &offset);
            let h = 1e-5;
            for a in 0..2 {
                let mut bp = beta;
                bp[a] += h;
                let mut bm = beta;
                bm[a] -= h;
                let (vp, _, _) = cox_profile_loglik(&bp, &xt, &times, &events, &offset);
                let (vm, _, _) = cox_profile_loglik(&bm, &xt, &times, &events, &offset);
                let fd = (vp - vm) / (2.0 * h);
                assert!(
                    (grad[a] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "grad {} vs fd {}",
                    grad[a],
                    fd
                );
            }
        }
    }

    #[test]
    fn hessian_is_negative_semidefinite() {
        let mut rng = crate::dist::SeededStream::new(8, 2).rng();
        let n = 12;
        let rows: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = DesignMatrix::from_rows(n, 2, rows);
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let events: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let offset = vec![0.0; n];
        for _ in 0..10 {
            let beta = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let (_, _, hess) = cox_profile_loglik(&beta, &xt, &times, &events, &offset);
            assert!(
                nalgebra::Cholesky::new(-hess.clone()).is_some(),
                "-H not PD at {beta:?}"
            );
        }
    }

    /// Brute force: coarse grid then golden-section refinement.
    fn brute_force_1d<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
        let mut best_x = lo;
        let mut best_v = f64::NEG_INFINITY;
        let steps = 2000;
        for i in 0..=steps {
            let x = lo + (hi - lo) * i as f64 / steps as f64;
            let v = f(x);
            if v > best_v {
                best_v = v;
                best_x = x;
            }
        }
        let (mut a, mut b) = (best_x - (hi - lo) / steps as f64, best_x + (hi - lo) / steps as f64);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if f(c) < f(d) {
                a = c;
            } else {
                b = d;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn fit_cox_matches_brute_force() {
        let xt = matrix(&[&[0.5], &[-0.3], &[1.2], &[0.1], &[-0.8], &[0.9]]);
        let times = [0.7, 1.4, 2.2, 3.1, 4.5, 5.0];
        let events = [true, true, false, true, true, true];
        let offset = [0.2, -0.1, 0.0, 0.3, -0.2, 0.1];
        let fit = fit_cox(&xt, &times, &events, &offset).unwrap();
        assert!(fit.converged);
        let oracle = brute_force_1d(
            |b| cox_profile_loglik(&[b], &xt, &times, &events, &offset).0,
            -5.0,
            5.0,
        );
        assert!(
            (fit.beta[0] - oracle).abs() < 1e-5,
            "newton {} vs brute force {}",
            fit.beta[0],
            oracle
        );
    }

    #[test]
    fn fit_cox_flat_likelihood_stays_at_zero() {
        let xt = matrix(&[&[0.0], &[0.0], &[0.0]]);
        let fit = fit_cox(&xt, &[1.0, 2.0, 3.0], &[true, true, false], &[0.0; 3]).unwrap();
        assert_eq!(fit.beta[0], 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn fit_cox_invariant_to_time_scaling() {
        let xt = matrix(&[&[0.5], &[-0.3], &[1.2], &[0.1], &[-0.8]]);
        let times = [0.7, 1.4, 2.2, 3.1, 4.5];
        let events = [true, true, false, true, true];
        let offset = [0.0; 5];
        let b1 = fit_cox(&xt, &times, &events, &offset).unwrap();
        let scaled: Vec<f64> = times.iter().map(|t| t * 37.5).collect();
        let b2 = fit_cox(&xt, &scaled, &events, &offset).unwrap();
        assert_relative_eq!(b1.beta[0], b2.beta[0], epsilon = 1e-10);
    }

    #[test]
    fn breslow_hand_cases() {
        // three events, β=0, offsets 0: jumps are 1/3, 1/2, 1
        let xt = matrix(&[&[0.2], &[-0.4], &[0.9]]);
        let times = [1.0, 2.0, 3.0];
        let events = [true, true, true];
        let base = breslow_update(&[0.0], &xt, &times, &events, &[0.0; 3]).unwrap();
        assert_eq!(base.event_times(), &[1.0, 2.0, 3.0]);
        let expected = [1.0 / 3.0, 0.5, 1.0];
        for (j, e) in base.jumps().iter().zip(expected) {
            assert_relative_eq!(*j, e, max_relative = 1e-14);
        }

        // offsets all log 2 halve every jump
        let base2 =
            breslow_update(&[0.0], &xt, &times, &events, &[2.0f64.ln(); 3]).unwrap();
        for (a, b) in base.jumps().iter().zip(base2.jumps()) {
            assert_relative_eq!(*b, 0.5 * a, max_relative = 1e-13);
        }

        // middle subject censored: jumps only at the two event times, full
        // risk sets in the denominators
        let events3 = [true, false, true];
        let base3 = breslow_update(&[0.0], &xt, &times, &events3, &[0.0; 3]).unwrap();
        assert_eq!(base3.event_times(), &[1.0, 3.0]);
        let expected3 = [1.0 / 3.0, 1.0];
        for (j, e) in base3.jumps().iter().zip(expected3) {
            assert_relative_eq!(*j, e, max_relative = 1e-14);
        }
    }

    #[test]
    fn breslow_attains_profile_value() {
        // plugging (β, Breslow jumps) into the complete-data block recovers
        // the partial-likelihood value plus the offset-dependent constant
        let xt = matrix(&[&[0.5], &[-0.3], &[1.2], &[0.1]]);
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true, true, false, true];
        let offset = [0.1, -0.2, 0.4, 0.0];
        let beta = [0.6];
        let base = breslow_update(&beta, &xt, &times, &events, &offset).unwrap();
        // ℓ^{o,1} = Σ δ_i (log λ_i + x̃β_i) − Σ Λ(t_i) exp(x̃β_i + off_i)
        //           + Σ δ_i off_i (the E[U] term is a constant here)
        let mut block = 0.0;
        for i in 0..4 {
            let xb = xt.row_dot(i, &beta);
            if events[i] {
                block += base.jump_at(times[i]).unwrap().ln() + xb + offset[i];
            }
            block -= base.cumulative(times[i]) * (xb + offset[i]).exp();
        }
        let (profile, _, _) = cox_profile_loglik(&beta, &xt, &times, &events, &offset);
        // at the Breslow maximizer, Σ Λ(t_i)e^{...} = n_s, so the identity is
        // block = profile + Σ δ off − n_s
        let n_s = 3.0;
        let off_sum: f64 = (0..4).filter(|&i| events[i]).map(|i| offset[i]).sum();
        assert_relative_eq!(block, profile + off_sum - n_s, max_relative = 1e-12);
    }

    #[test]
    fn probit_gradient_matches_finite_differences() {
        let mut rng = crate::dist::SeededStream::new(5, 5).rng();
        let n = 20;
        let rows: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let xw = DesignMatrix::from_rows(n, 2, rows);
        let w: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        for _ in 0..20 {
            let alpha = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (_, grad, hess) = probit_loglik(&alpha, &xw, &w);
            let h = 1e-5;
            for a in 0..2 {
                let mut ap = alpha;
                ap[a] += h;
                let mut am = alpha;
                am[a] -= h;
                let (vp, _, _) = probit_loglik(&ap, &xw, &w);
                let (vm, _, _) = probit_loglik(&am, &xw, &w);
                let fd = (vp - vm) / (2.0 * h);
                assert!(
                    (grad[a] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "grad {} vs fd {}",
                    grad[a],
                    fd
                );
            }
            assert!(nalgebra::Cholesky::new(-hess).is_some());
        }
    }

    #[test]
    fn probit_matches_grid_oracle_on_symmetric_data() {
        // balanced symmetric design with a minority of contrary outcomes so
        // the MLE is finite
        let mut rows = Vec::new();
        let mut w = Vec::new();
        for _ in 0..6 {
            rows.push(1.0);
            w.push(true);
            rows.push(-1.0);
            w.push(false);
        }
        rows.push(1.0);
        w.push(false);
        rows.push(-1.0);
        w.push(true);
        let n = rows.len();
        let xw = DesignMatrix::from_rows(n, 1, rows);
        let fit = fit_probit(&xw, &w).unwrap();
        assert!(fit.converged);
        let oracle = brute_force_1d(|a| probit_loglik(&[a], &xw, &w).0, -5.0, 5.0);
        assert!(
            (fit.alpha[0] - oracle).abs() < 1e-5,
            "newton {} vs grid {}",
            fit.alpha[0],
            oracle
        );
    }

    #[test]
    fn probit_separation_detected() {
        // small-magnitude instruments keep the flat tail out past the
        // divergence threshold, so the run-away is detected rather than the
        // gradient vanishing first
        let xw = matrix(&[&[0.10], &[0.12], &[0.08], &[0.11]]);
        let w = [true, true, true, true];
        assert!(matches!(
            fit_probit(&xw, &w),
            Err(Error::Separation { .. })
        ));
    }

    #[test]
    fn risk_sets_are_nested() {
        let times = [3.0, 1.0, 2.0, 2.5, 0.5];
        let events = [true, true, false, true, false];
        let idx = RiskSetIndex::new(&times, &events);
        let starts: Vec<usize> = idx.events().map(|(_, s)| s).collect();
        for w in starts.windows(2) {
            assert!(w[0] <= w[1], "risk-set starts must be monotone");
        }
        assert_eq!(idx.n_events(), 3);
    }
}
