//! Scaled two-block ADMM with pluggable operators.
//!
//! One iteration, in this order and no other:
//!
//! ```text
//! x~ <- v^ - u
//! x^ <- F(x~; sigma_lambda)      inversion: forward model + proximal pull
//! v~ <- x^ + u
//! v^ <- H(v~; sigma_n)           denoising: the prior
//! u  <- u + (x^ - v^)
//! ```
//!
//! The loop never interprets the operators; everything problem-specific lives
//! behind the two traits. sigma_n is always recomputed as sqrt(beta) *
//! sigma_lambda so the pair cannot drift apart.
//!
//! Residual bookkeeping: the primal residual of record is ||x^ - v^|| divided
//! by the norm of the *final* iterate, so the loop logs raw norms and the log
//! is renormalized once at termination. The dual surrogate
//! ||v^(k) - v^(k-1)|| / ||u(k)|| is well-defined mid-run and stored as is;
//! 0/0 counts as converged (0) and a vanishing denominator alone yields an
//! infinity sentinel rather than an abort, keeping CSV logs NaN-free.

use crate::error::{bad_param, Error, Result};
use crate::image::Image;
use crate::weights::WeightMatrix;

#[derive(Clone, Debug)]
pub struct PnPConfig {
    pub beta: f64,
    pub sigma_lambda: f64,
    pub max_iterations: usize,
    pub primal_tolerance: f64,
    pub dual_tolerance: f64,
    /// Tolerance-based stopping is opt-in; the default is a fixed count.
    pub early_stop: bool,
    /// None never freezes the denoiser weights.
    pub weight_freeze_iteration: Option<usize>,
}

impl PnPConfig {
    pub fn new(beta: f64, sigma_lambda: f64, max_iterations: usize) -> PnPConfig {
        PnPConfig {
            beta,
            sigma_lambda,
            max_iterations,
            primal_tolerance: 0.0,
            dual_tolerance: 0.0,
            early_stop: false,
            weight_freeze_iteration: None,
        }
    }

    /// The assumed denoiser noise level. Derived, never stored.
    pub fn sigma_n(&self) -> f64 {
        self.beta.sqrt() * self.sigma_lambda
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(bad_param("beta", "must be finite and positive"));
        }
        if !(self.sigma_lambda.is_finite() && self.sigma_lambda > 0.0) {
            return Err(bad_param("sigma_lambda", "must be finite and positive"));
        }
        if self.primal_tolerance < 0.0 || self.dual_tolerance < 0.0 {
            return Err(bad_param("tolerance", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RawResidual {
    pub iteration: usize,
    /// ||x^ - v^||_2, not yet normalized.
    pub primal_raw: f64,
    /// ||v^(k) - v^(k-1)||_2 / ||u(k)||_2 with the 0/0 -> 0 convention.
    pub dual: f64,
}

#[derive(Clone, Debug)]
pub struct PnPState {
    pub x_hat: Image,
    pub v_hat: Image,
    pub u: Image,
    pub k: usize,
    pub residual_log: Vec<RawResidual>,
}

impl PnPState {
    pub fn new(x_init: Image) -> PnPState {
        let u = Image::zeros_3d(x_init.width(), x_init.height(), x_init.depth());
        PnPState {
            x_hat: x_init.clone(),
            v_hat: x_init,
            u,
            k: 0,
            residual_log: Vec::new(),
        }
    }
}

/// Inversion operator: proximal step on the data-fit term.
pub trait InversionOperator {
    fn name(&self) -> &str;
    fn apply(&mut self, x_tilde: &Image, sigma_lambda: f64) -> Result<Image>;
}

/// Denoising operator: the prior. `iteration_index` drives freeze policies.
pub trait DenoisingOperator {
    fn name(&self) -> &str;
    fn apply(&mut self, v_tilde: &Image, sigma_n: f64, iteration_index: usize) -> Result<Image>;
    /// The weight matrix this operator would use on `probe`, when it has one.
    fn weights_for(&self, _probe: &Image, _sigma_n: f64) -> Option<Result<WeightMatrix>> {
        None
    }
    fn set_freeze_at(&mut self, _freeze_at: Option<usize>) {}
}

pub struct IdentityInversion;

impl InversionOperator for IdentityInversion {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&mut self, x_tilde: &Image, _sigma_lambda: f64) -> Result<Image> {
        Ok(x_tilde.clone())
    }
}

pub struct IdentityDenoiser;

impl DenoisingOperator for IdentityDenoiser {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&mut self, v_tilde: &Image, _sigma_n: f64, _iteration_index: usize) -> Result<Image> {
        Ok(v_tilde.clone())
    }

    fn weights_for(&self, probe: &Image, _sigma_n: f64) -> Option<Result<WeightMatrix>> {
        Some(Ok(WeightMatrix::identity(probe.len())))
    }
}

fn check_shape(role: &str, name: &str, got: &Image, want: &Image) -> Result<()> {
    if got.same_shape(want) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: format!("{role} `{name}`"),
            expected: want.shape_string(),
            got: got.shape_string(),
        })
    }
}

/// One ADMM iteration. Consumes and returns the state; appends one residual
/// record. The denoiser sees the pre-increment iteration counter, so the
/// first call observes index 0.
pub fn pnp_iterate(
    state: PnPState,
    f_op: &mut dyn InversionOperator,
    h_op: &mut dyn DenoisingOperator,
    cfg: &PnPConfig,
) -> Result<PnPState> {
    let PnPState {
        v_hat: v_prev,
        u,
        k,
        mut residual_log,
        ..
    } = state;

    let x_tilde = v_prev.sub(&u);
    let x_hat = f_op.apply(&x_tilde, cfg.sigma_lambda)?;
    check_shape("inversion operator", f_op.name(), &x_hat, &v_prev)?;

    let v_tilde = x_hat.add(&u);
    let v_hat = h_op.apply(&v_tilde, cfg.sigma_n(), k)?;
    check_shape("denoising operator", h_op.name(), &v_hat, &v_prev)?;

    let u = u.add(&x_hat.sub(&v_hat));
    let k = k + 1;

    for (img, what) in [(&x_hat, "x_hat"), (&v_hat, "v_hat"), (&u, "u")] {
        if !img.all_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                what: what.to_string(),
            });
        }
    }

    let primal_raw = x_hat.l2_dist(&v_hat);
    residual_log.push(RawResidual {
        iteration: k,
        primal_raw,
        dual: dual_residual(&v_hat, &v_prev, &u),
    });

    Ok(PnPState {
        x_hat,
        v_hat,
        u,
        k,
        residual_log,
    })
}

/// ||x^ - v^||_2 / ||reference||_2. The reference is the current iterate
/// during a live run and the final iterate when renormalizing a finished log.
pub fn primal_residual(state: &PnPState, x_hat_ref: &Image) -> Result<f64> {
    let norm = x_hat_ref.l2_norm();
    if norm == 0.0 {
        return Err(Error::DegenerateReference("primal residual".into()));
    }
    Ok(state.x_hat.l2_dist(&state.v_hat) / norm)
}

/// ||v^(k) - v^(k-1)||_2 / ||u(k)||_2. Both zero means converged (0); a zero
/// denominator with motion left is the infinity sentinel, not an error.
pub fn dual_residual(v_hat_k: &Image, v_hat_km1: &Image, u_k: &Image) -> f64 {
    let num = v_hat_k.l2_dist(v_hat_km1);
    let den = u_k.l2_norm();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Normalized residual log: primal raw norms divided by ||x^ at termination||.
pub fn finalize_residuals(state: &PnPState) -> Result<Vec<(usize, f64, f64)>> {
    if state.residual_log.is_empty() {
        return Ok(Vec::new());
    }
    let norm = state.x_hat.l2_norm();
    if norm == 0.0 {
        return Err(Error::DegenerateReference(
            "final x_hat for residual normalization".into(),
        ));
    }
    Ok(state
        .residual_log
        .iter()
        .map(|r| (r.iteration, r.primal_raw / norm, r.dual))
        .collect())
}

/// Runs the loop from `x_init` (v^ starts there, u at zero) for
/// `max_iterations`, or less when `early_stop` is set and both residuals
/// reach their tolerances. Returns the final state and the normalized log.
pub fn run_pnp(
    x_init: &Image,
    f_op: &mut dyn InversionOperator,
    h_op: &mut dyn DenoisingOperator,
    cfg: &PnPConfig,
) -> Result<(PnPState, Vec<(usize, f64, f64)>)> {
    cfg.validate()?;
    if cfg.weight_freeze_iteration.is_some() {
        h_op.set_freeze_at(cfg.weight_freeze_iteration);
    }
    let mut state = PnPState::new(x_init.clone());
    for _ in 0..cfg.max_iterations {
        state = pnp_iterate(state, f_op, h_op, cfg)?;
        if cfg.early_stop {
            let primal = primal_residual(&state, &state.x_hat)?;
            let dual = state.residual_log.last().map(|r| r.dual).unwrap_or(0.0);
            if primal <= cfg.primal_tolerance && dual <= cfg.dual_tolerance {
                break;
            }
        }
    }
    let log = finalize_residuals(&state)?;
    Ok((state, log))
}

#[derive(Clone, Copy, Debug)]
pub struct SigmaEstimate {
    pub sigma_lambda: f64,
    /// True when the variance heuristic fell below the floor and was clamped.
    pub floored: bool,
}

/// Heuristic noise scale: the sample standard deviation of an approximate
/// reconstruction, floored at 1e-6 times its dynamic range so constant or
/// near-constant baselines still produce a usable positive scale.
pub fn estimate_sigma_lambda(baseline: &Image) -> SigmaEstimate {
    let s = baseline.variance().sqrt();
    let (lo, hi) = baseline.min_max();
    let mut floor = 1e-6 * (hi - lo);
    if floor == 0.0 {
        floor = 1e-6 * baseline.mean().abs().max(1.0);
    }
    if s < floor {
        SigmaEstimate {
            sigma_lambda: floor,
            floored: true,
        }
    } else {
        SigmaEstimate {
            sigma_lambda: s,
            floored: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Proximal map of l(x) = (x - 4)^2 / 2 on a single pixel.
    struct PullToFour;

    impl InversionOperator for PullToFour {
        fn name(&self) -> &str {
            "pull-to-four"
        }

        fn apply(&mut self, x_tilde: &Image, sigma_lambda: f64) -> Result<Image> {
            let s2 = sigma_lambda * sigma_lambda;
            Ok(x_tilde.map(|v| (4.0 * s2 + v) / (s2 + 1.0)))
        }
    }

    fn cfg(iters: usize) -> PnPConfig {
        PnPConfig::new(1.0, 1.0, iters)
    }

    #[test]
    fn identity_operators_are_a_fixed_point() {
        let x0 = Image::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (state, log) =
            run_pnp(&x0, &mut IdentityInversion, &mut IdentityDenoiser, &cfg(5)).unwrap();
        assert_eq!(state.x_hat.data(), x0.data());
        assert_eq!(state.v_hat.data(), x0.data());
        assert_eq!(state.u.l2_norm(), 0.0);
        assert_eq!(log.len(), 5);
        for &(_, primal, dual) in &log {
            assert_eq!(primal, 0.0);
            assert_eq!(dual, 0.0); // 0/0 counts as converged
        }
    }

    #[test]
    fn scalar_quadratic_converges_to_four_in_update_order() {
        let x0 = Image::from_vec(1, 1, vec![0.0]);
        // The first two iterates pin the update order: x~ = v^ - u first,
        // dual update last. Any reordering changes these exact values.
        let (s1, _) = run_pnp(&x0, &mut PullToFour, &mut IdentityDenoiser, &cfg(1)).unwrap();
        assert_eq!(s1.x_hat.data()[0], 2.0);
        let (s2, _) = run_pnp(&x0, &mut PullToFour, &mut IdentityDenoiser, &cfg(2)).unwrap();
        assert_eq!(s2.x_hat.data()[0], 3.0);
        let (s60, log) =
            run_pnp(&x0, &mut PullToFour, &mut IdentityDenoiser, &cfg(60)).unwrap();
        assert!((s60.x_hat.data()[0] - 4.0).abs() < 1e-9);
        // An identity prior makes u stay zero while v^ keeps moving, which is
        // exactly the dual-residual infinity sentinel.
        assert!(log.iter().take(10).all(|&(_, _, d)| d.is_infinite()));
    }

    #[test]
    fn zero_iterations_returns_the_initial_state() {
        let x0 = Image::from_vec(1, 2, vec![7.0, 8.0]);
        let (state, log) =
            run_pnp(&x0, &mut IdentityInversion, &mut IdentityDenoiser, &cfg(0)).unwrap();
        assert_eq!(state.x_hat.data(), x0.data());
        assert_eq!(state.k, 0);
        assert!(log.is_empty());
    }

    #[test]
    fn early_stop_is_opt_in() {
        let x0 = Image::from_vec(1, 1, vec![5.0]);
        let mut c = cfg(10);
        c.primal_tolerance = 1e-6;
        c.dual_tolerance = 1e-6;
        // Residuals are exactly zero from iteration 1, but stopping only
        // happens once early_stop is set.
        let (_, log) = run_pnp(&x0, &mut IdentityInversion, &mut IdentityDenoiser, &c).unwrap();
        assert_eq!(log.len(), 10);
        c.early_stop = true;
        let (_, log) = run_pnp(&x0, &mut IdentityInversion, &mut IdentityDenoiser, &c).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn non_finite_state_aborts_with_iteration_index() {
        struct Poison;
        impl InversionOperator for Poison {
            fn name(&self) -> &str {
                "poison"
            }
            fn apply(&mut self, x_tilde: &Image, _s: f64) -> Result<Image> {
                Ok(x_tilde.map(|_| f64::NAN))
            }
        }
        let x0 = Image::from_vec(1, 1, vec![1.0]);
        match run_pnp(&x0, &mut Poison, &mut IdentityDenoiser, &cfg(3)) {
            Err(Error::NonFinite { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn shape_change_is_reported_with_the_operator_name() {
        struct Shrink;
        impl InversionOperator for Shrink {
            fn name(&self) -> &str {
                "shrink"
            }
            fn apply(&mut self, _x: &Image, _s: f64) -> Result<Image> {
                Ok(Image::zeros(1, 1))
            }
        }
        let x0 = Image::zeros(2, 2);
        match run_pnp(&x0, &mut Shrink, &mut IdentityDenoiser, &cfg(1)) {
            Err(Error::ShapeMismatch { op, .. }) => assert!(op.contains("shrink")),
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sigma_n_is_derived_not_stored() {
        let c = PnPConfig::new(4.77, 8.66e-4, 10);
        assert_eq!(c.sigma_n(), 4.77f64.sqrt() * 8.66e-4);
    }

    #[test]
    fn dual_residual_conventions() {
        let a = Image::from_vec(1, 1, vec![1.0]);
        let b = Image::from_vec(1, 1, vec![2.0]);
        let zero = Image::zeros(1, 1);
        assert_eq!(dual_residual(&a, &a, &zero), 0.0);
        assert!(dual_residual(&a, &b, &zero).is_infinite());
        assert_eq!(dual_residual(&a, &b, &b), 0.5);
    }

    #[test]
    fn sigma_estimate_and_floor() {
        let mut data = vec![0.0; 8];
        data[4..].fill(1.0);
        let est = estimate_sigma_lambda(&Image::from_vec(8, 1, data));
        assert_eq!(est.sigma_lambda, 0.5);
        assert!(!est.floored);

        let flat = estimate_sigma_lambda(&Image::constant(4, 4, 9.0));
        assert!(flat.floored);
        assert_eq!(flat.sigma_lambda, 9e-6);

        let tiny = estimate_sigma_lambda(&Image::constant(2, 2, 0.0));
        assert!(tiny.floored);
        assert_eq!(tiny.sigma_lambda, 1e-6);
    }

    #[test]
    fn residual_log_renormalizes_against_the_final_iterate() {
        let x0 = Image::from_vec(1, 1, vec![0.0]);
        let (state, log) =
            run_pnp(&x0, &mut PullToFour, &mut IdentityDenoiser, &cfg(30)).unwrap();
        let norm = state.x_hat.l2_norm();
        for (raw, &(k, primal, _)) in state.residual_log.iter().zip(&log) {
            assert_eq!(raw.iteration, k);
            assert!((primal - raw.primal_raw / norm).abs() <= 1e-12);
        }
    }
}
