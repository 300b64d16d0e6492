//! Stateless layer kernels with their backward passes.

use super::tensor::Tensor;

/// Square convolution with zero padding `k / 2`, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `[cout][cin][k][k]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Row ranges for a kernel tap at offset `d` over an extent `len`:
/// returns `(out_start, out_end)` such that `out + d` stays in bounds.
#[inline]
fn valid(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
    (lo.min(hi), hi)
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, weight: vec![0.0; cout * cin * k * k], bias: vec![0.0; cout] }
    }

    /// Rows `ci * k * k + ky * k + kx`, columns `y * w + x`.
    fn im2col(&self, src: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &src[ci * hw..(ci + 1) * hw];
            for ky in 0..self.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid(h, dy);
                for kx in 0..self.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid(w, dx);
                    let row = &mut col[((ci * self.k + ky) * self.k + kx) * hw..][..hw];
                    row.fill(0.0);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        row[y * w + x0..y * w + x1].copy_from_slice(&plane[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Conv2d::im2col`], accumulating into `dst`.
    fn col2im(&self, col: &[f64], h: usize, w: usize, dst: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &mut dst[ci * hw..(ci + 1) * hw];
            for ky in 0..self.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid(h, dy);
                for kx in 0..self.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = &col[((ci * self.k + ky) * self.k + kx) * hw..][..hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        for (d, v) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let mut col = vec![0.0; kk * hw];
        for n in 0..x.n {
            self.im2col(x.sample(n), h, w, &mut col);
            let dst = out.sample_mut(n);
            for co in 0..self.cout {
                dst[co * hw..(co + 1) * hw].fill(self.bias[co]);
            }
            // out (cout x hw) += W (cout x kk) * col (kk x hw)
            unsafe {
                matrixmultiply::dgemm(
                    self.cout,
                    kk,
                    hw,
                    1.0,
                    self.weight.as_ptr(),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    hw as isize,
                    1,
                    1.0,
                    dst.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        }
        out
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut ConvGrad) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        if grad.weight.is_empty() {
            grad.weight = vec![0.0; self.weight.len()];
            grad.bias = vec![0.0; self.bias.len()];
        }
        let mut dx = Tensor::zeros(x.n, self.cin, h, w);
        let mut col = vec![0.0; kk * hw];
        let mut dcol = vec![0.0; kk * hw];
        for n in 0..x.n {
            let g = dout.sample(n);
            for co in 0..self.cout {
                grad.bias[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
            self.im2col(x.sample(n), h, w, &mut col);
            unsafe {
                // dW (cout x kk) += dout (cout x hw) * col^T (hw x kk)
                matrixmultiply::dgemm(
                    self.cout,
                    hw,
                    kk,
                    1.0,
                    g.as_ptr(),
                    hw as isize,
                    1,
                    col.as_ptr(),
                    1,
                    hw as isize,
                    1.0,
                    grad.weight.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // dcol (kk x hw) = W^T (kk x cout) * dout (cout x hw)
                matrixmultiply::dgemm(
                    kk,
                    self.cout,
                    hw,
                    1.0,
                    self.weight.as_ptr(),
                    1,
                    kk as isize,
                    g.as_ptr(),
                    hw as isize,
                    1,
                    0.0,
                    dcol.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            self.col2im(&dcol, h, w, dx.sample_mut(n));
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Linear network, used for exact gradient checks.
    Identity,
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => Tensor { data: x.data.iter().map(|&v| v.max(0.0)).collect(), ..x.clone_shape() },
            Activation::Identity => x.clone(),
        }
    }

    /// `x` is the activation input.
    pub fn backward(self, x: &Tensor, dout: &Tensor) -> Tensor {
        match self {
            Activation::Relu => Tensor {
                data: x.data.iter().zip(&dout.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
                ..x.clone_shape()
            },
            Activation::Identity => dout.clone(),
        }
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor { data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(), ..x.clone_shape() }
}

/// `y` is the sigmoid output.
pub fn sigmoid_backward(y: &Tensor, dout: &Tensor) -> Tensor {
    Tensor { data: y.data.iter().zip(&dout.data).map(|(&p, &g)| g * p * (1.0 - p)).collect(), ..y.clone_shape() }
}

impl Tensor {
    fn clone_shape(&self) -> Tensor {
        Tensor { n: self.n, c: self.c, h: self.h, w: self.w, data: Vec::new() }
    }
}

/// 2×2 max pooling, stride 2; odd extents keep a truncated last window.
/// Returns the pooled tensor and the flat source index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (oh, ow) = ((x.h + 1) / 2, (x.w + 1) / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = Vec::with_capacity(out.data.len());
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * x.plane();
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for y in 2 * oy..(2 * oy + 2).min(x.h) {
                        for xx in 2 * ox..(2 * ox + 2).min(x.w) {
                            let v = src[y * x.w + xx];
                            if v > best {
                                best = v;
                                bi = y * x.w + xx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    arg.push(base + bi);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: (usize, usize, usize, usize), arg: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&i, &g) in arg.iter().zip(&dout.data) {
        dx.data[i] += g;
    }
    dx
}

/// Nearest-neighbour upsampling to an explicit `(h, w)`: `out[y][x] = in[y/2][x/2]`.
pub fn upsample_nearest(x: &Tensor, h: usize, w: usize) -> Tensor {
    assert!(x.h == (h + 1) / 2 && x.w == (w + 1) / 2, "upsample target does not match pooled extent");
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(n, c);
            let sw = x.w;
            let dst = out.channel_mut(n, c);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y / 2) * sw + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dout: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dout.n, dout.c, h, w);
    for n in 0..dout.n {
        for c in 0..dout.c {
            let g = dout.channel(n, c);
            let ow = dout.w;
            let dst = dx.channel_mut(n, c);
            for y in 0..dout.h {
                for xx in 0..ow {
                    dst[(y / 2) * w + xx / 2] += g[y * ow + xx];
                }
            }
        }
    }
    dx
}
