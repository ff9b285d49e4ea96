//! Dense real-valued image storage shared by every stage.
//!
//! Values are f64 row-major. `depth == 1` is the planar case; volumes are
//! stored as a stack of planes. Arithmetic helpers assert matching shapes:
//! mismatches between module outputs are caught at operator boundaries with
//! typed errors, so a mismatch here is a bug, not an input problem.

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    depth: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Image {
        Image::zeros_3d(width, height, 1)
    }

    pub fn zeros_3d(width: usize, height: usize, depth: usize) -> Image {
        assert!(width > 0 && height > 0 && depth > 0, "empty image");
        Image {
            width,
            height,
            depth,
            data: vec![0.0; width * height * depth],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Image {
        Image::from_vec_3d(width, height, 1, data)
    }

    pub fn from_vec_3d(width: usize, height: usize, depth: usize, data: Vec<f64>) -> Image {
        assert_eq!(data.len(), width * height * depth, "payload length");
        assert!(width > 0 && height > 0 && depth > 0, "empty image");
        Image {
            width,
            height,
            depth,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Image {
        Image::from_vec(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction forbids empty images
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    pub fn shape_string(&self) -> String {
        if self.depth == 1 {
            format!("{}x{}", self.width, self.height)
        } else {
            format!("{}x{}x{}", self.width, self.height, self.depth)
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn idx3(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && z < self.depth);
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            depth: self.depth,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clip_nonnegative(&self) -> Image {
        self.map(|v| v.max(0.0))
    }

    pub fn add(&self, other: &Image) -> Image {
        assert!(self.same_shape(other), "image add shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Image {
            data,
            ..self.clone()
        }
    }

    pub fn sub(&self, other: &Image) -> Image {
        assert!(self.same_shape(other), "image sub shape");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Image {
            data,
            ..self.clone()
        }
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance ||self - other||_2 without materializing the difference.
    pub fn l2_dist(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "image distance shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance (divide by N).
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
