//! Structural probes for denoising operators.
//!
//! A denoiser that is (locally) a linear map `v -> W v` earns convergence
//! guarantees from the structure of W: symmetry plus row stochasticity gives
//! column stochasticity, nonnegative spectrum inside the unit disk makes the
//! map nonexpansive, and all of that together makes it a legitimate proximal
//! operator. This module measures those properties at a probe image and
//! reports them without judging what the caller should do about failures.
//!
//! Operators that expose their weight matrix are probed exactly. Everything
//! else falls back to a dense finite-difference Jacobian, which is only
//! practical (and only meaningful) for small probes and near-linear
//! operators; the fallback refuses probes above 2048 pixels.

use crate::error::{bad_param, Result};
use crate::image::Image;
use crate::pnp::DenoisingOperator;
use crate::weights::deterministic_unit_vector;
use std::fmt;

const FD_PIXEL_CAP: usize = 2048;

#[derive(Clone, Debug)]
pub struct ConditionReport {
    pub pixels: usize,
    pub tolerance: f64,
    pub max_row_sum_deviation: f64,
    pub max_col_sum_deviation: f64,
    pub max_asymmetry: f64,
    pub negative_entries: usize,
    pub spectral_norm: f64,
    /// Reported when the matrix is symmetric enough to define one; informational.
    pub min_eigenvalue: Option<f64>,
    pub from_finite_difference: bool,
}

impl ConditionReport {
    pub fn row_stochastic(&self) -> bool {
        self.max_row_sum_deviation <= self.tolerance
    }

    pub fn col_stochastic(&self) -> bool {
        self.max_col_sum_deviation <= self.tolerance
    }

    pub fn symmetric(&self) -> bool {
        self.max_asymmetry <= self.tolerance
    }

    pub fn nonnegative(&self) -> bool {
        self.negative_entries == 0
    }

    pub fn nonexpansive(&self) -> bool {
        self.spectral_norm <= 1.0 + 1e-9
    }

    pub fn passes(&self) -> bool {
        self.row_stochastic()
            && self.col_stochastic()
            && self.symmetric()
            && self.nonnegative()
            && self.nonexpansive()
    }
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
        writeln!(
            f,
            "condition report over {} pixels (tolerance {:.1e}, {})",
            self.pixels,
            self.tolerance,
            if self.from_finite_difference {
                "finite-difference jacobian"
            } else {
                "explicit weights"
            }
        )?;
        writeln!(
            f,
            "  max row-sum deviation   {:.3e}  {}",
            self.max_row_sum_deviation,
            mark(self.row_stochastic())
        )?;
        writeln!(
            f,
            "  max col-sum deviation   {:.3e}  {}",
            self.max_col_sum_deviation,
            mark(self.col_stochastic())
        )?;
        writeln!(
            f,
            "  max asymmetry           {:.3e}  {}",
            self.max_asymmetry,
            mark(self.symmetric())
        )?;
        writeln!(
            f,
            "  negative entries        {}  {}",
            self.negative_entries,
            mark(self.nonnegative())
        )?;
        writeln!(
            f,
            "  spectral norm estimate  {:.10}  {}",
            self.spectral_norm,
            mark(self.nonexpansive())
        )?;
        match self.min_eigenvalue {
            Some(m) => writeln!(f, "  min eigenvalue estimate {:.6e}  (informational)", m)?,
            None => writeln!(f, "  min eigenvalue estimate n/a (not symmetric)")?,
        }
        write!(
            f,
            "  overall                 {}",
            if self.passes() { "PASS" } else { "FAIL" }
        )
    }
}

/// Measures the operator's weight matrix at `probe`, via the explicit matrix
/// when the operator offers one and a finite-difference Jacobian otherwise.
pub fn verify_operator_conditions(
    h_op: &mut dyn DenoisingOperator,
    probe: &Image,
    sigma_n: f64,
    tolerance: f64,
) -> Result<ConditionReport> {
    if let Some(built) = h_op.weights_for(probe, sigma_n) {
        let w = built?;
        let dev = |sums: Vec<f64>| {
            sums.iter()
                .map(|s| (s - 1.0).abs())
                .fold(0.0f64, f64::max)
        };
        return Ok(ConditionReport {
            pixels: w.n(),
            tolerance,
            max_row_sum_deviation: dev(w.row_sums()),
            max_col_sum_deviation: dev(w.col_sums()),
            max_asymmetry: w.max_asymmetry(),
            negative_entries: w.negative_entries(),
            spectral_norm: w.spectral_norm_estimate(),
            min_eigenvalue: w.min_eigenvalue_estimate(),
            from_finite_difference: false,
        });
    }
    finite_difference_report(h_op, probe, sigma_n, tolerance)
}

fn finite_difference_report(
    h_op: &mut dyn DenoisingOperator,
    probe: &Image,
    sigma_n: f64,
    tolerance: f64,
) -> Result<ConditionReport> {
    let n = probe.len();
    if n > FD_PIXEL_CAP {
        return Err(bad_param(
            "probe",
            format!(
                "{n} pixels exceeds the {FD_PIXEL_CAP}-pixel finite-difference cap; \
                 use an operator that exposes explicit weights or a smaller probe"
            ),
        ));
    }
    let base = h_op.apply(probe, sigma_n, 0)?;
    if !base.same_shape(probe) {
        return Err(bad_param("operator", "changed the image shape under probing"));
    }
    let max_abs = probe.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-4 * max_abs.max(1.0);

    // Column j of the Jacobian, one operator application per pixel.
    let mut dense = vec![0.0f64; n * n];
    let mut bumped = probe.clone();
    for j in 0..n {
        let orig = bumped.data()[j];
        bumped.data_mut()[j] = orig + eps;
        let out = h_op.apply(&bumped, sigma_n, 0)?;
        bumped.data_mut()[j] = orig;
        for i in 0..n {
            dense[i * n + j] = (out.data()[i] - base.data()[i]) / eps;
        }
    }

    let mut row_dev = 0.0f64;
    let mut col_sums = vec![0.0f64; n];
    let mut asym = 0.0f64;
    let mut negatives = 0usize;
    for i in 0..n {
        let mut rs = 0.0;
        for j in 0..n {
            let v = dense[i * n + j];
            rs += v;
            col_sums[j] += v;
            // Differencing noise puts sign jitter on true zeros, so only
            // entries negative beyond the tolerance count.
            if v < -tolerance {
                negatives += 1;
            }
            if j > i {
                asym = asym.max((v - dense[j * n + i]).abs());
            }
        }
        row_dev = row_dev.max((rs - 1.0).abs());
    }
    let col_dev = col_sums
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0f64, f64::max);

    let spectral = dense_spectral_norm(&dense, n);
    let min_eig = if asym <= tolerance.max(1e-7) {
        Some(dense_min_eigenvalue(&dense, n, spectral))
    } else {
        None
    };

    Ok(ConditionReport {
        pixels: n,
        tolerance,
        max_row_sum_deviation: row_dev,
        max_col_sum_deviation: col_dev,
        max_asymmetry: asym,
        negative_entries: negatives,
        spectral_norm: spectral,
        min_eigenvalue: min_eig,
        from_finite_difference: true,
    })
}

fn matvec(a: &[f64], n: usize, v: &[f64], transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let w = if transpose { a[j * n + i] } else { a[i * n + j] };
            acc += w * v[j];
        }
        out[i] = acc;
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn dense_spectral_norm(a: &[f64], n: usize) -> f64 {
    let mut v = deterministic_unit_vector(n);
    let mut lambda = 0.0f64;
    for _ in 0..300 {
        let mut w = matvec(a, n, &matvec(a, n, &v, false), true);
        let next = normalize(&mut w);
        v = w;
        if (next - lambda).abs() <= 1e-13 * next.max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Smallest eigenvalue of the symmetrized matrix via a shifted power
/// iteration on c*I - S, valid because S's spectrum lies within [-c, c].
fn dense_min_eigenvalue(a: &[f64], n: usize, spectral: f64) -> f64 {
    let c = spectral * (1.0 + 1e-9) + 1e-12;
    let mut v = deterministic_unit_vector(n);
    let mut mu = 0.0f64;
    for _ in 0..300 {
        let av = matvec(a, n, &v, false);
        let atv = matvec(a, n, &v, true);
        let mut w: Vec<f64> = (0..n)
            .map(|i| c * v[i] - 0.5 * (av[i] + atv[i]))
            .collect();
        let next = normalize(&mut w);
        v = w;
        if (next - mu).abs() <= 1e-13 * next.max(1.0) {
            mu = next;
            break;
        }
        mu = next;
    }
    c - mu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnp::IdentityDenoiser;

    /// Fixed 3x3 linear map with no exposed weights, for the fallback path:
    /// symmetric, doubly stochastic, eigenvalues {1, 1/2, -1/2}.
    struct ThreePixelMixer;

    const MIX: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]];

    impl DenoisingOperator for ThreePixelMixer {
        fn name(&self) -> &str {
            "three-pixel-mixer"
        }

        fn apply(&mut self, v: &Image, _sigma_n: f64, _k: usize) -> Result<Image> {
            let d = v.data();
            let out = (0..3)
                .map(|i| (0..3).map(|j| MIX[i][j] * d[j]).sum())
                .collect();
            Ok(Image::from_vec(3, 1, out))
        }
    }

    #[test]
    fn identity_passes_via_explicit_weights() {
        let probe = Image::from_vec(4, 2, vec![1.0, 5.0, 2.0, 8.0, 3.0, 1.0, 0.5, 2.5]);
        let report =
            verify_operator_conditions(&mut IdentityDenoiser, &probe, 1.0, 1e-10).unwrap();
        assert!(!report.from_finite_difference);
        assert!(report.passes());
        assert!((report.spectral_norm - 1.0).abs() <= 1e-9);
        assert_eq!(report.min_eigenvalue.map(|m| (m - 1.0).abs() <= 1e-6), Some(true));
    }

    #[test]
    fn finite_difference_recovers_a_hidden_linear_map() {
        let probe = Image::from_vec(3, 1, vec![4.0, -1.0, 2.5]);
        let report =
            verify_operator_conditions(&mut ThreePixelMixer, &probe, 1.0, 1e-6).unwrap();
        assert!(report.from_finite_difference);
        assert!(report.passes(), "report was:\n{report}");
        assert!((report.spectral_norm - 1.0).abs() <= 1e-6);
        let min_eig = report.min_eigenvalue.expect("symmetric map reports a minimum");
        assert!((min_eig + 0.5).abs() <= 1e-6);
    }

    #[test]
    fn finite_difference_refuses_large_probes() {
        struct Opaque;
        impl DenoisingOperator for Opaque {
            fn name(&self) -> &str {
                "opaque"
            }
            fn apply(&mut self, v: &Image, _s: f64, _k: usize) -> Result<Image> {
                Ok(v.clone())
            }
        }
        let probe = Image::zeros(64, 64);
        let err = verify_operator_conditions(&mut Opaque, &probe, 1.0, 1e-10).unwrap_err();
        assert!(err.to_string().contains("finite-difference"));
    }

    #[test]
    fn report_renders_every_line() {
        let probe = Image::from_vec(2, 1, vec![1.0, 2.0]);
        let report =
            verify_operator_conditions(&mut IdentityDenoiser, &probe, 1.0, 1e-10).unwrap();
        let text = report.to_string();
        for needle in [
            "row-sum",
            "col-sum",
            "asymmetry",
            "negative entries",
            "spectral norm",
            "min eigenvalue",
            "overall                 PASS",
        ] {
            assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
        }
    }
}
