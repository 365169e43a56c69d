//! Small row-major 2D image container shared by augmentation, model I/O,
//! and metrics.

use num_traits::Float;

/// Row-major 2D image; `data[c + w * r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<F> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Float> Image2<F> {
    pub fn new(h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), h * w, "image data length mismatch");
        Image2 { h, w, data }
    }

    pub fn filled(h: usize, w: usize, value: F) -> Self {
        Image2 {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[c + self.w * r]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[c + self.w * r] = v;
    }

    pub fn map<G: Float>(&self, f: impl Fn(F) -> G) -> Image2<G> {
        Image2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (F, F) {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Bilinear sample at fractional pixel coordinates, `fill` outside.
    pub fn sample_bilinear(&self, r: f64, c: f64, fill: F) -> F {
        if r < 0.0 || c < 0.0 || r > (self.h - 1) as f64 || c > (self.w - 1) as f64 {
            return fill;
        }
        let r0 = r.floor();
        let c0 = c.floor();
        let fr = r - r0;
        let fc = c - c0;
        let r0 = r0 as usize;
        let c0 = c0 as usize;
        let r1 = (r0 + 1).min(self.h - 1);
        let c1 = (c0 + 1).min(self.w - 1);
        let get = |rr: usize, cc: usize| self.at(rr, cc).to_f64().unwrap();
        let top = get(r0, c0) * (1.0 - fc) + get(r0, c1) * fc;
        let bot = get(r1, c0) * (1.0 - fc) + get(r1, c1) * fc;
        F::from(top * (1.0 - fr) + bot * fr).unwrap()
    }
}

impl Image2<f64> {
    pub fn to_f32(&self) -> Image2<f32> {
        self.map(|v| v as f32)
    }
}

impl Image2<f32> {
    pub fn to_f64(&self) -> Image2<f64> {
        self.map(|v| v as f64)
    }
}
