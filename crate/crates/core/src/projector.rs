//! 2D parallel-beam projection with line-length weights.
//!
//! A ray is the set t*w + s*w_perp with w = (cos theta, sin theta); the
//! detector coordinate t spans bins centered on the grid. Projection and
//! backprojection share one ray tracer, so the pair is an exact matrix and
//! its transpose; the adjoint identity holds to summation roundoff.
//!
//! Lengths are in the pitch unit (nm for the tomography experiments), so
//! projecting an attenuation map in 1/nm yields unitless log attenuations.

use crate::error::{bad_param, Error, Result};
use crate::image::Image;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct ProjectionGeometry {
    pub nx: usize,
    pub nz: usize,
    /// Pixel side length, nm.
    pub pixel_pitch: f64,
    /// Detector bin count per view.
    pub bins: usize,
    /// Detector bin spacing, nm.
    pub bin_spacing: f64,
}

impl ProjectionGeometry {
    pub fn new(
        nx: usize,
        nz: usize,
        pixel_pitch: f64,
        bins: usize,
        bin_spacing: f64,
    ) -> Result<ProjectionGeometry> {
        if nx == 0 || nz == 0 || bins == 0 {
            return Err(bad_param("geometry", "grid and detector must be non-empty"));
        }
        if !(pixel_pitch > 0.0 && bin_spacing > 0.0) {
            return Err(bad_param("geometry", "pitch and spacing must be positive"));
        }
        Ok(ProjectionGeometry {
            nx,
            nz,
            pixel_pitch,
            bins,
            bin_spacing,
        })
    }

    /// Detector wide enough to see the whole grid from any angle, with bin
    /// spacing equal to the pixel pitch. The bin count matches the parity of
    /// nx so that zero-angle rays pass through pixel centers, never edges.
    pub fn covering(nx: usize, nz: usize, pixel_pitch: f64) -> ProjectionGeometry {
        let diag = ((nx * nx + nz * nz) as f64).sqrt();
        let mut bins = diag.ceil() as usize;
        if bins % 2 != nx % 2 {
            bins += 1;
        }
        ProjectionGeometry {
            nx,
            nz,
            pixel_pitch,
            bins,
            bin_spacing: pixel_pitch,
        }
    }

    pub fn pixels(&self) -> usize {
        self.nx * self.nz
    }

    /// Signed detector coordinate of a bin center, nm from the rotation axis.
    pub fn t_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.bins as f64 - 1.0) * 0.5) * self.bin_spacing
    }

    /// Pixels the ray crosses with their intersection lengths. Pure and
    /// sequential; every projection-like operation builds on this one
    /// function so forward and transpose use identical coefficients.
    pub fn trace_ray(&self, angle_deg: f64, bin: usize) -> Vec<(u32, f64)> {
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let t = self.t_offset(bin);
        let origin = (t * cos, t * sin);
        let dir = (-sin, cos);
        let p = self.pixel_pitch;
        let x_min = -(self.nx as f64) * 0.5 * p;
        let z_min = -(self.nz as f64) * 0.5 * p;
        let x_max = x_min + self.nx as f64 * p;
        let z_max = z_min + self.nz as f64 * p;

        // Parameter window where the ray is inside the bounding box.
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (o, d, min_a, max_a) in [
            (origin.0, dir.0, x_min, x_max),
            (origin.1, dir.1, z_min, z_max),
        ] {
            if d.abs() < 1e-12 {
                if o < min_a || o > max_a {
                    return Vec::new();
                }
            } else {
                let s1 = (min_a - o) / d;
                let s2 = (max_a - o) / d;
                lo = lo.max(s1.min(s2));
                hi = hi.min(s1.max(s2));
            }
        }
        if !(hi > lo) {
            return Vec::new();
        }

        let mut crossings = vec![lo, hi];
        if dir.0.abs() >= 1e-12 {
            for k in 0..=self.nx {
                let s = (x_min + k as f64 * p - origin.0) / dir.0;
                if s > lo && s < hi {
                    crossings.push(s);
                }
            }
        }
        if dir.1.abs() >= 1e-12 {
            for k in 0..=self.nz {
                let s = (z_min + k as f64 * p - origin.1) / dir.1;
                if s > lo && s < hi {
                    crossings.push(s);
                }
            }
        }
        crossings.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

        let mut out = Vec::with_capacity(crossings.len());
        for w in crossings.windows(2) {
            let len = w[1] - w[0];
            if len <= p * 1e-12 {
                continue;
            }
            let mid = (w[0] + w[1]) * 0.5;
            let ix = ((origin.0 + dir.0 * mid - x_min) / p).floor() as isize;
            let iz = ((origin.1 + dir.1 * mid - z_min) / p).floor() as isize;
            if ix >= 0 && (ix as usize) < self.nx && iz >= 0 && (iz as usize) < self.nz {
                out.push(((iz as usize * self.nx + ix as usize) as u32, len));
            }
        }
        out
    }
}

fn check_grid_shape(op: &str, geom: &ProjectionGeometry, image: &Image) -> Result<()> {
    if image.width() == geom.nx && image.height() == geom.nz && image.depth() == 1 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: op.to_string(),
            expected: format!("{}x{}", geom.nx, geom.nz),
            got: image.shape_string(),
        })
    }
}

/// Line-integral projection of the image at one view angle.
pub fn project(x: &Image, geom: &ProjectionGeometry, angle_deg: f64) -> Result<Vec<f64>> {
    check_grid_shape("project", geom, x)?;
    let data = x.data();
    Ok((0..geom.bins)
        .into_par_iter()
        .map(|bin| {
            geom.trace_ray(angle_deg, bin)
                .iter()
                .map(|&(px, len)| len * data[px as usize])
                .sum()
        })
        .collect())
}

/// Exact transpose of `project` at the same angle.
pub fn backproject(r: &[f64], geom: &ProjectionGeometry, angle_deg: f64) -> Result<Image> {
    if r.len() != geom.bins {
        return Err(Error::ShapeMismatch {
            op: "backproject".into(),
            expected: format!("{} bins", geom.bins),
            got: format!("{}", r.len()),
        });
    }
    let mut out = Image::zeros(geom.nx, geom.nz);
    let data = out.data_mut();
    for (bin, &value) in r.iter().enumerate() {
        if value == 0.0 {
            continue;
        }
        for (px, len) in geom.trace_ray(angle_deg, bin) {
            data[px as usize] += len * value;
        }
    }
    Ok(out)
}

/// The full multi-view system matrix in both row (ray) and column (pixel)
/// form. Rows drive forward projection and residual updates; columns drive
/// coordinate descent in the reconstruction.
pub struct TomoSystem {
    geom: ProjectionGeometry,
    angles: Vec<f64>,
    row_ptr: Vec<usize>,
    row_cols: Vec<u32>,
    row_vals: Vec<f64>,
    col_ptr: Vec<usize>,
    col_rays: Vec<u32>,
    col_vals: Vec<f64>,
}

impl TomoSystem {
    /// An empty angle list builds an empty system (zero rays), which the
    /// reconstruction treats as "no data term".
    pub fn build(geom: ProjectionGeometry, angles: &[f64]) -> Result<TomoSystem> {
        let m = geom.bins;
        let rays = angles.len() * m;
        let rows: Vec<Vec<(u32, f64)>> = (0..rays)
            .into_par_iter()
            .map(|ray| geom.trace_ray(angles[ray / m], ray % m))
            .collect();

        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rays + 1);
        let mut row_cols = Vec::with_capacity(nnz);
        let mut row_vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in &rows {
            for &(px, len) in row {
                row_cols.push(px);
                row_vals.push(len);
            }
            row_ptr.push(row_cols.len());
        }

        // Transpose by counting sort over pixels; deterministic because rows
        // are scanned in ray order.
        let n = geom.pixels();
        let mut counts = vec![0usize; n + 1];
        for &px in &row_cols {
            counts[px as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let col_ptr = counts.clone();
        let mut col_rays = vec![0u32; nnz];
        let mut col_vals = vec![0.0f64; nnz];
        let mut cursor = counts;
        for ray in 0..rays {
            for e in row_ptr[ray]..row_ptr[ray + 1] {
                let px = row_cols[e] as usize;
                col_rays[cursor[px]] = ray as u32;
                col_vals[cursor[px]] = row_vals[e];
                cursor[px] += 1;
            }
        }

        Ok(TomoSystem {
            geom,
            angles: angles.to_vec(),
            row_ptr,
            row_cols,
            row_vals,
            col_ptr,
            col_rays,
            col_vals,
        })
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geom
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn rays(&self) -> usize {
        self.views() * self.geom.bins
    }

    pub fn tilt_of_ray(&self, ray: usize) -> usize {
        ray / self.geom.bins
    }

    pub fn row(&self, ray: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[ray]..self.row_ptr[ray + 1];
        (&self.row_cols[span.clone()], &self.row_vals[span])
    }

    pub fn column(&self, pixel: usize) -> (&[u32], &[f64]) {
        let span = self.col_ptr[pixel]..self.col_ptr[pixel + 1];
        (&self.col_rays[span.clone()], &self.col_vals[span])
    }

    /// All K*M line integrals of `x`, ray-major (tilt outer, bin inner).
    pub fn forward(&self, x: &Image) -> Result<Vec<f64>> {
        check_grid_shape("forward projection", &self.geom, x)?;
        let data = x.data();
        Ok((0..self.rays())
            .into_par_iter()
            .map(|ray| {
                let (cols, vals) = self.row(ray);
                cols.iter()
                    .zip(vals)
                    .map(|(&px, &len)| len * data[px as usize])
                    .sum()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covering_detector_matches_grid_parity() {
        let even = ProjectionGeometry::covering(256, 256, 1.0);
        assert_eq!(even.bins % 2, 0);
        assert!(even.bins >= 362);
        let odd = ProjectionGeometry::covering(3, 3, 1.0);
        assert_eq!(odd.bins % 2, 1);
    }

    #[test]
    fn center_ray_through_one_pixel_measures_the_pitch() {
        let geom = ProjectionGeometry::covering(1, 1, 2.5);
        assert_eq!(geom.bins, 3);
        let x = Image::constant(1, 1, 1.0);
        let p = project(&x, &geom, 0.0).unwrap();
        assert_eq!(p, vec![0.0, 2.5, 0.0]);
    }

    #[test]
    fn zero_in_zero_out() {
        let geom = ProjectionGeometry::covering(8, 8, 1.0);
        let p = project(&Image::zeros(8, 8), &geom, 33.0).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        let b = backproject(&vec![0.0; geom.bins], &geom, 33.0).unwrap();
        assert_eq!(b.l2_norm(), 0.0);
    }

    #[test]
    fn projection_and_backprojection_are_adjoint() {
        let geom = ProjectionGeometry::covering(16, 12, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let angle = rng.random_range(-90.0..90.0);
            let x = Image::from_vec(
                16,
                12,
                (0..192).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let r: Vec<f64> = (0..geom.bins).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax = project(&x, &geom, angle).unwrap();
            let atr = backproject(&r, &geom, angle).unwrap();
            let lhs: f64 = ax.iter().zip(&r).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(atr.data()).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(1.0);
            assert!(
                (lhs - rhs).abs() <= 1e-10 * scale,
                "trial {trial}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn disk_projections_match_analytic_chords() {
        let n = 256;
        let r_disk = 80.0;
        let mu = 0.01;
        let data: Vec<f64> = (0..n * n)
            .map(|i| {
                let x = (i % n) as f64 - (n as f64 - 1.0) / 2.0;
                let z = (i / n) as f64 - (n as f64 - 1.0) / 2.0;
                if x * x + z * z <= r_disk * r_disk {
                    mu
                } else {
                    0.0
                }
            })
            .collect();
        let disk = Image::from_vec(n, n, data);
        let geom = ProjectionGeometry::covering(n, n, 1.0);
        for angle in [0.0, 17.0, 45.0, -63.0] {
            let p = project(&disk, &geom, angle).unwrap();
            for bin in 0..geom.bins {
                let t = geom.t_offset(bin);
                if t.abs() > 0.75 * r_disk {
                    continue;
                }
                let chord = 2.0 * mu * (r_disk * r_disk - t * t).sqrt();
                let rel = (p[bin] - chord).abs() / chord;
                assert!(rel < 0.03, "angle {angle} t {t}: {} vs {chord}", p[bin]);
            }
        }
    }

    #[test]
    fn projection_conserves_mass_at_oblique_angles() {
        let n = 128;
        let r_disk = 40.0;
        let mu = 0.02;
        let mut count = 0usize;
        let data: Vec<f64> = (0..n * n)
            .map(|i| {
                let x = (i % n) as f64 - (n as f64 - 1.0) / 2.0;
                let z = (i / n) as f64 - (n as f64 - 1.0) / 2.0;
                if x * x + z * z <= r_disk * r_disk {
                    count += 1;
                    mu
                } else {
                    0.0
                }
            })
            .collect();
        let disk = Image::from_vec(n, n, data);
        let geom = ProjectionGeometry::covering(n, n, 1.0);
        let mass = mu * count as f64;
        let p = project(&disk, &geom, 33.7).unwrap();
        let integral: f64 = p.iter().sum::<f64>() * geom.bin_spacing;
        assert!(
            (integral - mass).abs() / mass < 0.01,
            "{integral} vs {mass}"
        );
    }

    #[test]
    fn single_ray_backprojection_is_supported_on_its_path() {
        let geom = ProjectionGeometry::covering(4, 4, 1.0);
        assert_eq!(geom.bins, 6);
        let mut r = vec![0.0; 6];
        r[2] = 1.0; // t = -0.5, the column of pixels with ix = 1
        let img = backproject(&r, &geom, 0.0).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                let v = img.get(i, j);
                if i == 1 {
                    assert!((v - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn system_rows_and_columns_describe_the_same_matrix() {
        let geom = ProjectionGeometry::covering(8, 6, 1.0);
        let angles = [-70.0, -10.0, 0.0, 35.0, 70.0];
        let sys = TomoSystem::build(geom, &angles).unwrap();
        // Row-based forward equals per-angle project.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Image::from_vec(8, 6, (0..48).map(|_| rng.random_range(0.0..1.0)).collect());
        let fwd = sys.forward(&x).unwrap();
        for (k, &angle) in angles.iter().enumerate() {
            let p = project(&x, &geom, angle).unwrap();
            for bin in 0..geom.bins {
                assert_eq!(fwd[k * geom.bins + bin], p[bin]);
            }
        }
        // Column view transposes the row view exactly.
        let mut from_cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); sys.rays()];
        for px in 0..geom.pixels() {
            let (rays, vals) = sys.column(px);
            for (&ray, &len) in rays.iter().zip(vals) {
                from_cols[ray as usize].push((px as u32, len));
            }
        }
        for ray in 0..sys.rays() {
            let (cols, vals) = sys.row(ray);
            // Rows store pixels in ray-march order; compare as sets.
            let mut got: Vec<(u32, f64)> =
                cols.iter().copied().zip(vals.iter().copied()).collect();
            got.sort_unstable_by_key(|e| e.0);
            from_cols[ray].sort_unstable_by_key(|e| e.0);
            assert_eq!(from_cols[ray], got);
        }
    }
}
