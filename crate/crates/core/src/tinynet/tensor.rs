use crate::error::{Error, Result};

/// Dense `(n, c, h, w)` tensor, `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!("{} values for tensor ({n},{c},{h},{w})", data.len())));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let off = (n * self.c + c) * p;
        &self.data[off..off + p]
    }

    #[inline]
    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let off = (n * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.c * self.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.c * self.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for n in 0..a.n {
            let dst = out.sample_mut(n);
            let sa = a.sample(n);
            dst[..sa.len()].copy_from_slice(sa);
            dst[sa.len()..].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(self.n, first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - first, self.h, self.w);
        let cut = first * self.plane();
        for n in 0..self.n {
            let s = self.sample(n);
            a.sample_mut(n).copy_from_slice(&s[..cut]);
            b.sample_mut(n).copy_from_slice(&s[cut..]);
        }
        (a, b)
    }
}
