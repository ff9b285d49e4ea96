//! Sparse-sampling forward model and its closed-form inversion.
//!
//! The measurement operator picks out a subset of pixels: each measurement
//! row has exactly one unit entry, each pixel is measured at most once. That
//! makes the data-fit proximal map separable, one scalar problem per pixel:
//!
//! * unsampled pixel: `[x~]+`
//! * sampled, noiseless measurements (sigma_w = 0): `[y]+`
//! * sampled, noisy: `[(y/sigma_w^2 + x~/sigma_lambda^2) /
//!   (1/sigma_w^2 + 1/sigma_lambda^2)]+`
//!
//! Positivity lives here, in the data term, never inside denoisers.
//!
//! Shepard inverse-distance interpolation of the same samples serves as the
//! non-iterative baseline and as the initializer for the ADMM runs.

use crate::error::{bad_param, io_err, Error, Result};
use crate::image::Image;
use crate::pnp::InversionOperator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Which pixels were measured and what was measured there.
#[derive(Clone, Debug)]
pub struct SamplingMask {
    width: usize,
    height: usize,
    /// Measurement noise standard deviation; 0 means the measurements are exact.
    sigma_w: f64,
    sampled: Vec<bool>,
    /// Row-major pixel indices of the sampled sites, strictly increasing.
    indices: Vec<usize>,
    /// Measured value per sampled site, aligned with `indices`.
    values: Vec<f64>,
}

impl SamplingMask {
    pub fn new(width: usize, height: usize, mut indices: Vec<usize>) -> Result<SamplingMask> {
        let n = width * height;
        if n == 0 {
            return Err(bad_param("mask", "zero-sized image"));
        }
        indices.sort_unstable();
        let mut sampled = vec![false; n];
        for &i in &indices {
            if i >= n {
                return Err(bad_param(
                    "mask",
                    format!("index {i} out of range for {n} pixels"),
                ));
            }
            if sampled[i] {
                return Err(bad_param("mask", format!("duplicate index {i}")));
            }
            sampled[i] = true;
        }
        let values = vec![0.0; indices.len()];
        Ok(SamplingMask {
            width,
            height,
            sigma_w: 0.0,
            sampled,
            indices,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w
    }

    pub fn set_sigma_w(&mut self, sigma_w: f64) -> Result<()> {
        if !(sigma_w.is_finite() && sigma_w >= 0.0) {
            return Err(bad_param("sigma_w", "must be finite and nonnegative"));
        }
        self.sigma_w = sigma_w;
        Ok(())
    }

    pub fn is_sampled(&self, index: usize) -> bool {
        self.sampled[index]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// (pixel index, measured value) pairs in index order.
    pub fn samples(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

/// Uniform random mask with exactly round(fraction * pixels) sampled sites.
pub fn random_mask(width: usize, height: usize, fraction: f64, seed: u64) -> Result<SamplingMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(bad_param("fraction", "must be in (0, 1]"));
    }
    let n = width * height;
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Err(bad_param(
            "fraction",
            format!("{fraction} of {n} pixels rounds to zero samples"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n, count).into_vec();
    SamplingMask::new(width, height, indices)
}

/// Reads the truth at the mask's sites, adding Gaussian noise of standard
/// deviation `sigma_w` (none when zero), and returns the filled mask.
pub fn sample_image(
    truth: &Image,
    mask: &SamplingMask,
    sigma_w: f64,
    seed: u64,
) -> Result<SamplingMask> {
    check_mask_shape("sample_image", mask, truth)?;
    let mut filled = mask.clone();
    filled.set_sigma_w(sigma_w)?;
    let data = truth.data();
    if sigma_w == 0.0 {
        for (k, &i) in filled.indices.iter().enumerate() {
            filled.values[k] = data[i];
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma_w).map_err(|_| bad_param("sigma_w", "invalid"))?;
        for (k, &i) in filled.indices.iter().enumerate() {
            filled.values[k] = data[i] + noise.sample(&mut rng);
        }
    }
    Ok(filled)
}

fn check_mask_shape(op: &str, mask: &SamplingMask, image: &Image) -> Result<()> {
    if image.width() == mask.width && image.height() == mask.height && image.depth() == 1 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: op.to_string(),
            expected: format!("{}x{}", mask.width, mask.height),
            got: image.shape_string(),
        })
    }
}

/// Pixel-separable proximal map of the sampling data term with positivity.
pub fn interp_prox(x_tilde: &Image, mask: &SamplingMask, sigma_lambda: f64) -> Result<Image> {
    check_mask_shape("interp_prox", mask, x_tilde)?;
    if !(sigma_lambda.is_finite() && sigma_lambda > 0.0) {
        return Err(bad_param("sigma_lambda", "must be finite and positive"));
    }
    let mut out = x_tilde.clip_nonnegative();
    let data = out.data_mut();
    if mask.sigma_w == 0.0 {
        for (i, y) in mask.samples() {
            data[i] = y.max(0.0);
        }
    } else {
        let wi = 1.0 / (mask.sigma_w * mask.sigma_w);
        let li = 1.0 / (sigma_lambda * sigma_lambda);
        let x = x_tilde.data();
        for (i, y) in mask.samples() {
            data[i] = ((y * wi + x[i] * li) / (wi + li)).max(0.0);
        }
    }
    Ok(out)
}

/// The sampling data term as an ADMM inversion operator.
pub struct InterpInversion {
    mask: SamplingMask,
}

impl InterpInversion {
    pub fn new(mask: SamplingMask) -> InterpInversion {
        InterpInversion { mask }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }
}

impl InversionOperator for InterpInversion {
    fn name(&self) -> &str {
        "interp"
    }

    fn apply(&mut self, x_tilde: &Image, sigma_lambda: f64) -> Result<Image> {
        interp_prox(x_tilde, &self.mask, sigma_lambda)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ShepardParams {
    /// Inverse-distance exponent.
    pub power: f64,
    /// Euclidean search radius; infinity means global.
    pub radius: f64,
    /// Hard cap on contributing samples, nearest first.
    pub max_neighbors: usize,
}

impl Default for ShepardParams {
    fn default() -> ShepardParams {
        ShepardParams {
            power: 2.0,
            radius: f64::INFINITY,
            max_neighbors: 64,
        }
    }
}

/// Inverse-distance-weighted interpolation of the mask's samples. Sampled
/// sites keep their measured value exactly; an empty search window falls
/// back to the single nearest sample. Ties break on (distance, index) so the
/// result does not depend on thread count.
pub fn shepard_interpolate(mask: &SamplingMask, params: &ShepardParams) -> Result<Image> {
    if mask.sample_count() == 0 {
        return Err(bad_param("mask", "Shepard interpolation needs at least one sample"));
    }
    if !(params.power > 0.0) || params.max_neighbors == 0 {
        return Err(bad_param("shepard", "power and max_neighbors must be positive"));
    }
    let w = mask.width;
    let sites: Vec<(f64, f64, f64)> = mask
        .samples()
        .map(|(i, y)| ((i % w) as f64, (i / w) as f64, y))
        .collect();
    let r2 = params.radius * params.radius;

    let data: Vec<f64> = (0..w * mask.height)
        .into_par_iter()
        .map(|i| {
            if mask.sampled[i] {
                return mask.values[mask.indices.binary_search(&i).unwrap()];
            }
            let px = (i % w) as f64;
            let py = (i / w) as f64;
            let mut cands: Vec<(f64, usize)> = Vec::new();
            let mut nearest = (f64::INFINITY, 0usize);
            for (k, &(sx, sy, _)) in sites.iter().enumerate() {
                let d2 = (px - sx) * (px - sx) + (py - sy) * (py - sy);
                if (d2, k) < nearest {
                    nearest = (d2, k);
                }
                if d2 <= r2 {
                    cands.push((d2, k));
                }
            }
            if cands.is_empty() {
                return sites[nearest.1].2;
            }
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            if cands.len() > params.max_neighbors {
                cands.select_nth_unstable_by(params.max_neighbors - 1, by_dist);
                cands.truncate(params.max_neighbors);
            }
            cands.sort_unstable_by(by_dist);
            let mut num = 0.0;
            let mut den = 0.0;
            for &(d2, k) in &cands {
                let weight = 1.0 / d2.powf(params.power * 0.5);
                num += weight * sites[k].2;
                den += weight;
            }
            num / den
        })
        .collect();
    Ok(Image::from_vec(w, mask.height, data))
}

/// ||truth - x_hat||_2 / ||truth||_2.
pub fn normalized_rmse(x_hat: &Image, truth: &Image) -> Result<f64> {
    if !x_hat.same_shape(truth) {
        return Err(Error::ShapeMismatch {
            op: "normalized_rmse".into(),
            expected: truth.shape_string(),
            got: x_hat.shape_string(),
        });
    }
    let norm = truth.l2_norm();
    if norm == 0.0 {
        return Err(Error::DegenerateReference("truth norm in normalized_rmse".into()));
    }
    Ok(truth.l2_dist(x_hat) / norm)
}

/// Text format: `mask <width> <height> <count>` then `<index> <value>` lines.
pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    let mut text = format!(
        "mask {} {} {}\n",
        mask.width,
        mask.height,
        mask.sample_count()
    );
    for (i, y) in mask.samples() {
        let _ = writeln!(text, "{i} {y}");
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let fail = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fail("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "mask" {
        return Err(fail(format!("bad header `{header}`")));
    }
    let width: usize = fields[1].parse().map_err(|_| fail("bad width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| fail("bad height".into()))?;
    let count: usize = fields[3].parse().map_err(|_| fail("bad count".into()))?;
    let mut indices = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (i, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(v), None) => (i, v),
            _ => return Err(fail(format!("bad sample line `{line}`"))),
        };
        indices.push(i.parse::<usize>().map_err(|_| fail("bad index".into()))?);
        values.push(v.parse::<f64>().map_err(|_| fail("bad value".into()))?);
    }
    if indices.len() != count {
        return Err(fail(format!(
            "header promises {count} samples, file has {}",
            indices.len()
        )));
    }
    if indices.windows(2).any(|p| p[0] >= p[1]) {
        return Err(fail("sample indices must be strictly increasing".into()));
    }
    let mut mask = SamplingMask::new(width, height, indices).map_err(|e| match e {
        Error::InvalidParameter { detail, .. } => fail(detail),
        other => other,
    })?;
    mask.values = values;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(width: usize, height: usize, samples: &[(usize, f64)]) -> SamplingMask {
        let mut m =
            SamplingMask::new(width, height, samples.iter().map(|s| s.0).collect()).unwrap();
        for (k, &(_, v)) in samples.iter().enumerate() {
            m.values[k] = v;
        }
        m
    }

    #[test]
    fn exact_samples_pin_measured_values_and_clip_the_rest() {
        let mask = mask_with(3, 1, &[(1, 5.0)]);
        let x = Image::from_vec(3, 1, vec![-2.0, 99.0, 0.5]);
        let out = interp_prox(&x, &mask, 1.0).unwrap();
        assert_eq!(out.data(), &[0.0, 5.0, 0.5]);
    }

    #[test]
    fn noisy_sample_matches_the_grid_search_minimizer() {
        // Scalar objective (y-x)^2/(2 sw^2) + (x-xt)^2/(2 sl^2) over x >= 0,
        // minimized by brute force on [0, 10] with step 1e-4.
        let mask = {
            let mut m = mask_with(1, 1, &[(0, 4.0)]);
            m.set_sigma_w(1.0).unwrap();
            m
        };
        let x = Image::from_vec(1, 1, vec![2.0]);
        let closed = interp_prox(&x, &mask, 1.0).unwrap().data()[0];
        assert_eq!(closed, 3.0);
        let objective = |v: f64| (4.0 - v) * (4.0 - v) / 2.0 + (v - 2.0) * (v - 2.0) / 2.0;
        let grid = (0..=100_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| objective(*a).partial_cmp(&objective(*b)).unwrap())
            .unwrap();
        assert!((closed - grid).abs() <= 1e-3);
    }

    #[test]
    fn feasible_points_are_fixed() {
        let mask = mask_with(2, 2, &[(0, 1.0), (3, 4.0)]);
        let x = Image::from_vec(2, 2, vec![1.0, 7.0, 0.0, 4.0]);
        let out = interp_prox(&x, &mask, 0.3).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn prox_is_nonexpansive_and_monotone() {
        let mut mask = mask_with(4, 1, &[(0, 2.0), (2, 1.0)]);
        mask.set_sigma_w(0.7).unwrap();
        let a = Image::from_vec(4, 1, vec![-1.0, 3.0, 0.2, 5.0]);
        let b = Image::from_vec(4, 1, vec![0.5, 3.5, 1.2, 5.0]);
        let fa = interp_prox(&a, &mask, 0.9).unwrap();
        let fb = interp_prox(&b, &mask, 0.9).unwrap();
        assert!(fa.l2_dist(&fb) <= a.l2_dist(&b) + 1e-15);
        // a <= b componentwise, so the outputs stay ordered.
        for (x, y) in fa.data().iter().zip(fb.data()) {
            assert!(x <= y);
        }
    }

    #[test]
    fn vanishing_noise_recovers_the_exact_branch() {
        let samples = [(1, 3.0), (4, 0.25), (7, 9.0)];
        let exact = mask_with(3, 3, &samples);
        let mut noisy = exact.clone();
        noisy.set_sigma_w(1e-8).unwrap();
        let x = Image::from_vec(3, 3, vec![0.1, -4.0, 2.0, 3.0, 1.0, 0.0, 5.0, 2.0, 2.0]);
        let a = interp_prox(&x, &exact, 1.3).unwrap();
        let b = interp_prox(&x, &noisy, 1.3).unwrap();
        assert!(a.l2_dist(&b) <= 1e-6);
    }

    #[test]
    fn random_mask_counts_and_reproducibility() {
        let m = random_mask(10, 10, 0.1, 7).unwrap();
        assert_eq!(m.sample_count(), 10);
        let full = random_mask(4, 4, 1.0, 7).unwrap();
        assert_eq!(full.sample_count(), 16);
        assert_eq!(
            random_mask(10, 10, 0.1, 7).unwrap().indices(),
            m.indices()
        );
        let mut differing = 0;
        for seed in 0..20u64 {
            let a = random_mask(16, 16, 0.2, seed).unwrap();
            let b = random_mask(16, 16, 0.2, seed + 1000).unwrap();
            if a.indices() != b.indices() {
                differing += 1;
            }
        }
        assert_eq!(differing, 20);
        assert!(random_mask(100, 100, 1e-9, 1).is_err());
        assert!(random_mask(10, 10, 1.5, 1).is_err());
    }

    #[test]
    fn sampling_reads_truth_exactly_without_noise() {
        let truth = Image::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mask = SamplingMask::new(2, 2, vec![0, 3]).unwrap();
        let filled = sample_image(&truth, &mask, 0.0, 9).unwrap();
        assert_eq!(filled.values(), &[1.0, 4.0]);
        let again = sample_image(&truth, &mask, 0.5, 9).unwrap();
        assert_eq!(
            again.values(),
            sample_image(&truth, &mask, 0.5, 9).unwrap().values()
        );
    }

    #[test]
    fn sampling_noise_has_the_requested_scale() {
        let truth = Image::constant(100, 100, 50.0);
        let mask = random_mask(100, 100, 1.0, 3).unwrap();
        let filled = sample_image(&truth, &mask, 1.0, 11).unwrap();
        let n = filled.values().len() as f64;
        let mean = filled.values().iter().sum::<f64>() / n;
        let var = filled
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn shepard_constant_from_one_sample_and_midpoint_average() {
        let one = mask_with(5, 5, &[(12, 3.25)]);
        let img = shepard_interpolate(&one, &ShepardParams::default()).unwrap();
        assert!(img.data().iter().all(|&v| v == 3.25));

        let two = mask_with(3, 1, &[(0, 2.0), (2, 4.0)]);
        let img = shepard_interpolate(&two, &ShepardParams::default()).unwrap();
        assert_eq!(img.data()[1], 3.0);
        assert_eq!(img.data()[0], 2.0);
        assert_eq!(img.data()[2], 4.0);
    }

    #[test]
    fn shepard_reproduces_samples_exactly() {
        let truth = Image::from_vec(8, 8, (0..64).map(|i| (i * 7 % 13) as f64).collect());
        let mask = sample_image(&truth, &random_mask(8, 8, 0.25, 5).unwrap(), 0.0, 0).unwrap();
        let img = shepard_interpolate(&mask, &ShepardParams::default()).unwrap();
        for (i, y) in mask.samples() {
            assert_eq!(img.data()[i], y);
        }
    }

    #[test]
    fn shepard_empty_window_falls_back_to_nearest() {
        let mask = mask_with(9, 1, &[(0, 5.0), (8, 7.0)]);
        let params = ShepardParams {
            radius: 0.5,
            ..ShepardParams::default()
        };
        let img = shepard_interpolate(&mask, &params).unwrap();
        assert_eq!(img.data()[1], 5.0);
        assert_eq!(img.data()[7], 7.0);
    }

    #[test]
    fn rmse_examples() {
        let truth = Image::from_vec(2, 1, vec![3.0, 4.0]);
        assert_eq!(normalized_rmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(
            normalized_rmse(&Image::zeros(2, 1), &truth).unwrap(),
            1.0
        );
        let partial = Image::from_vec(2, 1, vec![3.0, 0.0]);
        assert_eq!(normalized_rmse(&partial, &truth).unwrap(), 0.8);
        assert!(normalized_rmse(&truth, &Image::zeros(2, 1)).is_err());
    }

    #[test]
    fn mask_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        let mask = mask_with(4, 2, &[(1, 0.5), (6, -3.75)]);
        write_mask(&path, &mask).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back.width(), 4);
        assert_eq!(back.height(), 2);
        assert_eq!(back.indices(), mask.indices());
        assert_eq!(back.values(), mask.values());

        std::fs::write(&path, "mask 4 2 3\n1 0.5\n").unwrap();
        assert!(read_mask(&path).is_err());
        std::fs::write(&path, "grid 4 2\n").unwrap();
        assert!(read_mask(&path).is_err());
    }

    #[test]
    fn constructor_rejects_bad_indices() {
        assert!(SamplingMask::new(2, 2, vec![4]).is_err());
        assert!(SamplingMask::new(2, 2, vec![1, 1]).is_err());
    }
}
