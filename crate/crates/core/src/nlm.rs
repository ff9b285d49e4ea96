//! Non-local means weight construction, plain and doubly stochastic.
//!
//! The raw similarity between sites s and r is
//! exp(-||P_r - P_s||^2 / (2 * cells * sigma_n^2)), where P are square (or
//! cubic) patches of side 2*patch_radius+1, `cells` is the patch pixel count,
//! and r ranges over the Chebyshev window of radius search_radius around s,
//! truncated at the image border. Patches that stick out are mirrored.
//!
//! Plain NLM divides each row by its sum. The result is row-stochastic but
//! not symmetric, and its columns generally do not sum to one; that is the
//! documented failure mode that costs the filter its fixed-point guarantees.
//!
//! The doubly stochastic variant instead runs three passes: raw weights,
//! division by the geometric mean of row and column sums, and a diagonal
//! shift that restores exact row sums. Symmetry is structural (each unordered
//! pair is stored once), and rows and columns sum to one up to rounding.
//! When the diagonal shift would drive a diagonal entry negative, the entry
//! is clamped to zero, that site's off-diagonal mass is rescaled
//! symmetrically to sum to one, and the shift pass repeats so neighboring
//! rows absorb the change; callers see the number of clamp events as a
//! warning counter. Double stochasticity survives the fallback.

use rayon::prelude::*;

use crate::error::{bad_param, Error, Result};
use crate::image::Image;
use crate::weights::WeightMatrix;

#[derive(Clone, Copy, Debug)]
pub struct NlmParams {
    pub patch_radius: usize,
    pub search_radius: usize,
    pub sigma_n: f64,
}

impl Default for NlmParams {
    fn default() -> NlmParams {
        NlmParams {
            patch_radius: 2,
            search_radius: 10,
            sigma_n: 1.0,
        }
    }
}

impl NlmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n.is_finite() && self.sigma_n > 0.0) {
            return Err(bad_param("sigma_n", "must be finite and positive"));
        }
        Ok(())
    }

    pub fn patch_side(&self) -> usize {
        2 * self.patch_radius + 1
    }
}

/// Symmetric reflection into [0, n): ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
fn mirror(mut c: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if c < 0 {
            c = -c - 1;
        } else if c >= n {
            c = 2 * n - 1 - c;
        } else {
            return c as usize;
        }
    }
}

/// Lookup table mapping coordinate+radius to a mirrored in-range coordinate.
fn mirror_table(n: usize, radius: usize) -> Vec<usize> {
    (0..n + 2 * radius)
        .map(|i| mirror(i as isize - radius as isize, n))
        .collect()
}

struct PatchGeometry {
    offsets: Vec<(isize, isize, isize)>,
    map_x: Vec<usize>,
    map_y: Vec<usize>,
    map_z: Vec<usize>,
    radius: isize,
}

impl PatchGeometry {
    fn new(image: &Image, patch_radius: usize) -> PatchGeometry {
        let pr = patch_radius as isize;
        let mut offsets = Vec::new();
        // The patch is planar for planar images and cubic for volumes, so the
        // normalization constant is the literal patch pixel count either way.
        let z_range: Vec<isize> = if image.depth() > 1 {
            (-pr..=pr).collect()
        } else {
            vec![0]
        };
        for &dz in &z_range {
            for dy in -pr..=pr {
                for dx in -pr..=pr {
                    offsets.push((dx, dy, dz));
                }
            }
        }
        PatchGeometry {
            offsets,
            map_x: mirror_table(image.width(), patch_radius),
            map_y: mirror_table(image.height(), patch_radius),
            map_z: mirror_table(image.depth(), patch_radius),
            radius: pr,
        }
    }

    #[inline]
    fn squared_patch_distance(
        &self,
        data: &[f64],
        width: usize,
        height: usize,
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    ) -> f64 {
        let pr = self.radius;
        let mut acc = 0.0;
        for &(dx, dy, dz) in &self.offsets {
            let ax = self.map_x[(a.0 as isize + dx + pr) as usize];
            let ay = self.map_y[(a.1 as isize + dy + pr) as usize];
            let az = self.map_z[(a.2 as isize + dz + pr) as usize];
            let bx = self.map_x[(b.0 as isize + dx + pr) as usize];
            let by = self.map_y[(b.1 as isize + dy + pr) as usize];
            let bz = self.map_z[(b.2 as isize + dz + pr) as usize];
            let va = data[(az * height + ay) * width + ax];
            let vb = data[(bz * height + by) * width + bx];
            acc += (va - vb) * (va - vb);
        }
        acc
    }
}

/// Raw Gaussian patch-similarity pairs, diagonal included with weight 1.
/// Sorted by (row, col) with row <= col; each unordered pair appears once.
fn raw_pairs(image: &Image, p: &NlmParams) -> Result<Vec<(u32, u32, f64)>> {
    p.validate()?;
    if image.len() > u32::MAX as usize {
        return Err(bad_param("image", "too many pixels for weight indices"));
    }
    let geom = PatchGeometry::new(image, p.patch_radius);
    let cells = geom.offsets.len() as f64;
    let inv_denom = 1.0 / (2.0 * cells * p.sigma_n * p.sigma_n);
    let (w, h, d) = image.shape();
    let ns = p.search_radius;
    let data = image.data();

    let site_pairs = |s: usize| -> Vec<(u32, u32, f64)> {
        let sz = s / (w * h);
        let sy = (s / w) % h;
        let sx = s % w;
        let mut out = Vec::with_capacity((2 * ns + 1).pow(2) / 2 + 1);
        out.push((s as u32, s as u32, 1.0));
        let z_lo = sz.saturating_sub(ns);
        let z_hi = (sz + ns).min(d - 1);
        let y_lo = sy.saturating_sub(ns);
        let y_hi = (sy + ns).min(h - 1);
        let x_lo = sx.saturating_sub(ns);
        let x_hi = (sx + ns).min(w - 1);
        for rz in z_lo..=z_hi {
            for ry in y_lo..=y_hi {
                for rx in x_lo..=x_hi {
                    let r = (rz * h + ry) * w + rx;
                    if r <= s {
                        continue;
                    }
                    let d2 = geom.squared_patch_distance(
                        data,
                        w,
                        h,
                        (sx, sy, sz),
                        (rx, ry, rz),
                    );
                    out.push((s as u32, r as u32, (-d2 * inv_denom).exp()));
                }
            }
        }
        out
    };

    let per_site: Vec<Vec<(u32, u32, f64)>> = (0..image.len())
        .into_par_iter()
        .with_min_len(64)
        .map(site_pairs)
        .collect();
    let total = per_site.iter().map(Vec::len).sum();
    let mut pairs = Vec::with_capacity(total);
    for mut chunk in per_site {
        pairs.append(&mut chunk);
    }
    Ok(pairs)
}

/// Row sums of the mirrored matrix implied by a symmetric pair list.
fn pair_row_sums(n: usize, pairs: &[(u32, u32, f64)]) -> Vec<f64> {
    let mut sums = vec![0.0; n];
    for &(s, r, w) in pairs {
        sums[s as usize] += w;
        if s != r {
            sums[r as usize] += w;
        }
    }
    sums
}

/// Raw symmetric similarity weights, un-normalized.
pub fn nlm_raw_weights(image: &Image, p: &NlmParams) -> Result<WeightMatrix> {
    Ok(WeightMatrix::from_symmetric_pairs(
        image.len(),
        raw_pairs(image, p)?,
    ))
}

/// Plain NLM: raw weights with each row divided by its sum. Row-stochastic;
/// columns generally do not sum to one and the matrix is not symmetric.
pub fn nlm_weights(image: &Image, p: &NlmParams) -> Result<WeightMatrix> {
    let pairs = raw_pairs(image, p)?;
    let n = image.len();
    let row_sums = pair_row_sums(n, &pairs);

    // Mirror the pair list into compressed rows. Pairs are sorted, so each
    // row receives its columns in ascending order.
    let mut counts = vec![0usize; n];
    for &(s, r, _) in &pairs {
        counts[s as usize] += 1;
        if s != r {
            counts[r as usize] += 1;
        }
    }
    let mut row_ptr = vec![0usize; n + 1];
    for i in 0..n {
        row_ptr[i + 1] = row_ptr[i] + counts[i];
    }
    let nnz = row_ptr[n];
    let mut cols = vec![0u32; nnz];
    let mut vals = vec![0.0f64; nnz];
    let mut cursor = row_ptr.clone();
    for &(s, r, w) in &pairs {
        let (si, ri) = (s as usize, r as usize);
        cols[cursor[si]] = r;
        vals[cursor[si]] = w / row_sums[si];
        cursor[si] += 1;
        if s != r {
            cols[cursor[ri]] = s;
            vals[cursor[ri]] = w / row_sums[ri];
            cursor[ri] += 1;
        }
    }
    Ok(WeightMatrix::from_rows(n, row_ptr, cols, vals))
}

/// Doubly stochastic NLM. Returns the weight matrix and the number of
/// diagonal entries the negative-diagonal fallback had to clamp (normally 0).
pub fn dsg_nlm_weights(image: &Image, p: &NlmParams) -> Result<(WeightMatrix, usize)> {
    let mut pairs = raw_pairs(image, p)?;
    let n = image.len();

    // Pass 2: divide by the geometric mean of row and column sums. Row and
    // column sums coincide while the matrix is symmetric.
    let sums = pair_row_sums(n, &pairs);
    for e in &mut pairs {
        e.2 /= (sums[e.0 as usize] * sums[e.1 as usize]).sqrt();
    }

    // Pass 3: shift each diagonal so the row sums to exactly one. If a shift
    // would drive a diagonal negative, clamp it to zero, rescale that site's
    // off-diagonal row/column mass to sum to one, and run the shift pass
    // again so the touching rows absorb the change into their own diagonals.
    // Off-diagonal mass strictly shrinks at every clamp, so this terminates;
    // the result is symmetric and doubly stochastic even when clamps fire.
    let mut clamp_events = 0usize;
    for _round in 0..1000 {
        let sums = pair_row_sums(n, &pairs);
        let mut clamped = vec![false; n];
        let mut scale = vec![1.0f64; n];
        let mut any_negative = false;
        for e in &pairs {
            if e.0 == e.1 {
                let s = e.0 as usize;
                if e.2 + (1.0 - sums[s]) < 0.0 {
                    any_negative = true;
                    clamped[s] = true;
                    scale[s] = 1.0 / (sums[s] - e.2);
                    clamp_events += 1;
                }
            }
        }
        if !any_negative {
            for e in &mut pairs {
                if e.0 == e.1 {
                    e.2 += 1.0 - sums[e.0 as usize];
                }
            }
            return Ok((WeightMatrix::from_symmetric_pairs(n, pairs), clamp_events));
        }
        for e in &mut pairs {
            if e.0 == e.1 {
                if clamped[e.0 as usize] {
                    e.2 = 0.0;
                }
            } else {
                if clamped[e.0 as usize] {
                    e.2 *= scale[e.0 as usize];
                }
                if clamped[e.1 as usize] {
                    e.2 *= scale[e.1 as usize];
                }
            }
        }
    }
    Err(Error::Internal("diagonal repair did not converge"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NlmKind {
    Plain,
    DoublyStochastic,
}

impl NlmKind {
    pub fn name(self) -> &'static str {
        match self {
            NlmKind::Plain => "nlm",
            NlmKind::DoublyStochastic => "dsg-nlm",
        }
    }
}

/// Recompute-or-reuse schedule for the weight matrix across iterations.
/// Before `freeze_at` the weights are rebuilt from the current image; at
/// `freeze_at` they are rebuilt one last time and cached; afterwards the
/// cached matrix is applied bit-identically. `None` never freezes.
#[derive(Default)]
pub struct FreezePolicy {
    pub freeze_at: Option<usize>,
    cached: Option<WeightMatrix>,
}

impl FreezePolicy {
    pub fn new(freeze_at: Option<usize>) -> FreezePolicy {
        FreezePolicy {
            freeze_at,
            cached: None,
        }
    }

    pub fn cached(&self) -> Option<&WeightMatrix> {
        self.cached.as_ref()
    }
}

pub struct NlmDenoiser {
    pub kind: NlmKind,
    pub params: NlmParams,
    policy: FreezePolicy,
    clamp_warnings: usize,
}

impl NlmDenoiser {
    pub fn new(kind: NlmKind, params: NlmParams) -> NlmDenoiser {
        NlmDenoiser {
            kind,
            params,
            policy: FreezePolicy::default(),
            clamp_warnings: 0,
        }
    }

    pub fn with_freeze(mut self, freeze_at: Option<usize>) -> NlmDenoiser {
        self.policy = FreezePolicy::new(freeze_at);
        self
    }

    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings
    }

    pub fn cached_weights(&self) -> Option<&WeightMatrix> {
        self.policy.cached()
    }

    pub fn build_weights(&self, image: &Image, sigma_n: f64) -> Result<(WeightMatrix, usize)> {
        let p = NlmParams {
            sigma_n,
            ..self.params
        };
        match self.kind {
            NlmKind::Plain => Ok((nlm_weights(image, &p)?, 0)),
            NlmKind::DoublyStochastic => dsg_nlm_weights(image, &p),
        }
    }

    /// One denoising application at a given iteration index, honoring the
    /// freeze policy. sigma_n is taken from `self.params`.
    pub fn denoise_at(&mut self, image: &Image, iteration_index: usize) -> Result<Image> {
        let wrap = |image: &Image, data: Vec<f64>| {
            Image::from_vec_3d(image.width(), image.height(), image.depth(), data)
        };
        if matches!(self.policy.freeze_at, Some(f) if iteration_index > f) {
            let w = self
                .policy
                .cached
                .as_ref()
                .ok_or(Error::Internal("weights frozen but never cached"))?;
            if w.n() != image.len() {
                return Err(Error::ShapeMismatch {
                    op: format!("{} denoiser", self.kind.name()),
                    expected: format!("{} pixels", w.n()),
                    got: image.shape_string(),
                });
            }
            return Ok(wrap(image, w.apply(image.data())));
        }
        let (w, clamps) = self.build_weights(image, self.params.sigma_n)?;
        self.clamp_warnings += clamps;
        let out = w.apply(image.data());
        if self.policy.freeze_at == Some(iteration_index) {
            self.policy.cached = Some(w);
        }
        Ok(wrap(image, out))
    }
}

impl crate::pnp::DenoisingOperator for NlmDenoiser {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn apply(&mut self, v_tilde: &Image, sigma_n: f64, iteration_index: usize) -> Result<Image> {
        self.params.sigma_n = sigma_n;
        self.params.validate()?;
        self.denoise_at(v_tilde, iteration_index)
    }

    fn weights_for(&self, probe: &Image, sigma_n: f64) -> Option<Result<WeightMatrix>> {
        Some(self.build_weights(probe, sigma_n).map(|(w, _)| w))
    }

    fn set_freeze_at(&mut self, freeze_at: Option<usize>) {
        self.policy = FreezePolicy::new(freeze_at);
    }
}
