//! Layers with explicit forward caches and backward passes.
//!
//! Weighted layers keep an augmented weight `[W | b]` of shape
//! `out x (in + 1)`, so the bias behaves as the weight of a constant-one
//! input. Gradients and subspace projections use the same layout.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::util::Rng;

/// He-normal initialization for an augmented weight; the bias column is zero.
pub fn he_init(out: usize, fan_in: usize, rng: &mut Rng) -> DMatrix<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    DMatrix::from_fn(out, fan_in + 1, |_, j| {
        if j == fan_in {
            0.0
        } else {
            std * rng.sample::<f64, _>(StandardNormal)
        }
    })
}

/// `x * W^T + b` for an augmented weight.
pub fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let fan_in = w.ncols() - 1;
    let mut out = x * w.columns(0, fan_in).transpose();
    for j in 0..w.nrows() {
        out.column_mut(j).add_scalar_mut(w[(j, fan_in)]);
    }
    out
}

/// Input rows with a trailing column of ones.
pub fn augment(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// Gradient of an affine map with respect to its augmented weight.
fn affine_weight_grad(x: &DMatrix<f64>, grad_out: &DMatrix<f64>) -> DMatrix<f64> {
    let fan_in = x.ncols();
    let mut g = DMatrix::zeros(grad_out.ncols(), fan_in + 1);
    g.columns_mut(0, fan_in).copy_from(&(grad_out.transpose() * x));
    for j in 0..grad_out.ncols() {
        g[(j, fan_in)] = grad_out.column(j).sum();
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
}

impl Dense {
    pub fn new(fan_in: usize, out: usize, rng: &mut Rng) -> Self {
        Self { weight: he_init(out, fan_in, rng) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols() - 1
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// 3x3 convolution, stride 1, zero padding 1, on CHW-flattened rows.
/// The weight is stored as `out_c x (in_c * 9 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: DMatrix<f64>,
    pub in_shape: [usize; 3],
}

pub const KERNEL: usize = 3;

impl Conv2d {
    pub fn new(in_shape: [usize; 3], out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = in_shape[0] * KERNEL * KERNEL;
        Self { weight: he_init(out_channels, fan_in, rng), in_shape }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels(), self.in_shape[1], self.in_shape[2]]
    }

    /// Patch matrix: one row per (sample, output position).
    pub fn im2col(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let [c, h, w] = self.in_shape;
        let n = x.nrows();
        let width = c * KERNEL * KERNEL;
        let mut cols = DMatrix::zeros(n * h * w, width);
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = s * h * w + y * w + xx;
                    for ci in 0..c {
                        for ky in 0..KERNEL {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let col = ci * KERNEL * KERNEL + ky * KERNEL + kx;
                                cols[(row, col)] = x[(s, ci * h * w + iy as usize * w + ix as usize)];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
        let [c, h, w] = self.in_shape;
        let mut dx = DMatrix::zeros(n, c * h * w);
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = s * h * w + y * w + xx;
                    for ci in 0..c {
                        for ky in 0..KERNEL {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let col = ci * KERNEL * KERNEL + ky * KERNEL + kx;
                                dx[(s, ci * h * w + iy as usize * w + ix as usize)] += dcols[(row, col)];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// `(n*h*w) x out_c` position-major rows to CHW-flattened `n x (out_c*h*w)`.
    fn rows_to_chw(&self, r: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
        let [_, h, w] = self.in_shape;
        let oc = self.out_channels();
        DMatrix::from_fn(n, oc * h * w, |s, j| r[(s * h * w + j % (h * w), j / (h * w))])
    }

    fn chw_to_rows(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let [_, h, w] = self.in_shape;
        let oc = self.out_channels();
        let n = g.nrows();
        DMatrix::from_fn(n * h * w, oc, |row, ch| g[(row / (h * w), ch * h * w + row % (h * w))])
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2 {
    pub in_shape: [usize; 3],
}

impl MaxPool2 {
    pub fn out_shape(&self) -> [usize; 3] {
        [self.in_shape[0], self.in_shape[1] / 2, self.in_shape[2] / 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2),
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: DMatrix<f64> },
    Conv { cols: DMatrix<f64>, n: usize },
    Relu { output: DMatrix<f64> },
    MaxPool { argmax: Vec<usize>, in_dim: usize },
}

impl Layer {
    pub fn weight(&self) -> Option<&DMatrix<f64>> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut DMatrix<f64>> {
        match self {
            Layer::Dense(d) => Some(&mut d.weight),
            Layer::Conv(c) => Some(&mut c.weight),
            _ => None,
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, LayerCache) {
        match self {
            Layer::Dense(d) => (affine(x, &d.weight), LayerCache::Dense { input: x.clone() }),
            Layer::Conv(c) => {
                let cols = c.im2col(x);
                let rows = affine(&cols, &c.weight);
                (c.rows_to_chw(&rows, x.nrows()), LayerCache::Conv { cols, n: x.nrows() })
            }
            Layer::Relu => {
                let out = x.map(|v| v.max(0.0));
                (out.clone(), LayerCache::Relu { output: out })
            }
            Layer::MaxPool(p) => {
                let [c, h, w] = p.in_shape;
                let [_, oh, ow] = p.out_shape();
                let n = x.nrows();
                let mut out = DMatrix::zeros(n, c * oh * ow);
                let mut argmax = vec![0; n * c * oh * ow];
                for s in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = (0usize, f64::NEG_INFINITY);
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                                        if x[(s, idx)] > best.1 {
                                            best = (idx, x[(s, idx)]);
                                        }
                                    }
                                }
                                let o = ch * oh * ow + y * ow + xx;
                                out[(s, o)] = best.1;
                                argmax[s * c * oh * ow + o] = best.0;
                            }
                        }
                    }
                }
                (out, LayerCache::MaxPool { argmax, in_dim: c * h * w })
            }
        }
    }

    /// Returns the input gradient and, for weighted layers, the augmented
    /// weight gradient.
    pub fn backward(&self, cache: &LayerCache, grad_out: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => {
                let fan_in = d.fan_in();
                let gw = affine_weight_grad(input, grad_out);
                let gx = grad_out * d.weight.columns(0, fan_in);
                (gx, Some(gw))
            }
            (Layer::Conv(c), LayerCache::Conv { cols, n }) => {
                let g = c.chw_to_rows(grad_out);
                let gw = affine_weight_grad(cols, &g);
                let fan_in = c.weight.ncols() - 1;
                let dcols = &g * c.weight.columns(0, fan_in);
                (c.col2im(&dcols, *n), Some(gw))
            }
            (Layer::Relu, LayerCache::Relu { output }) => {
                (grad_out.zip_map(output, |g, o| if o > 0.0 { g } else { 0.0 }), None)
            }
            (Layer::MaxPool(_), LayerCache::MaxPool { argmax, in_dim }) => {
                let n = grad_out.nrows();
                let per = grad_out.ncols();
                let mut gx = DMatrix::zeros(n, *in_dim);
                for s in 0..n {
                    for o in 0..per {
                        gx[(s, argmax[s * per + o])] += grad_out[(s, o)];
                    }
                }
                (gx, None)
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    /// As [`backward`](Self::backward), but the weight term is the sum over
    /// samples of squared per-sample gradients. Dense layers only: for a
    /// convolution the per-sample gradient is a sum over positions and does
    /// not factor, so `None` is returned.
    pub fn backward_squared(
        &self,
        cache: &LayerCache,
        grad_out: &DMatrix<f64>,
    ) -> Option<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => {
                let fan_in = d.fan_in();
                let sq = affine_weight_grad(&input.component_mul(input), &grad_out.component_mul(grad_out));
                Some((grad_out * d.weight.columns(0, fan_in), Some(sq)))
            }
            (Layer::Conv(_), _) => None,
            _ => Some(self.backward(cache, grad_out)),
        }
    }

    /// Rows spanning the layer's input representation in augmented form:
    /// the input rows for dense layers, the patch rows for convolutions.
    pub fn representation(&self, cache: &LayerCache) -> Option<DMatrix<f64>> {
        match cache {
            LayerCache::Dense { input } => Some(augment(input)),
            LayerCache::Conv { cols, .. } => Some(augment(cols)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn loss_and_grad(layer: &Layer, x: &DMatrix<f64>, probe: &DMatrix<f64>) -> (f64, DMatrix<f64>, Option<DMatrix<f64>>) {
        let (y, cache) = layer.forward(x);
        let loss = y.component_mul(probe).sum();
        let (gx, gw) = layer.backward(&cache, probe);
        (loss, gx, gw)
    }

    fn check_layer(mut layer: Layer, in_dim: usize) {
        let mut rng = seeded_rng(3, &[]);
        let x = DMatrix::from_fn(2, in_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (y, _) = layer.forward(&x);
        let probe = DMatrix::from_fn(y.nrows(), y.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let (_, gx, gw) = loss_and_grad(&layer, &x, &probe);
        let h = 1e-6;
        for idx in [0, in_dim / 2, in_dim - 1] {
            let mut xp = x.clone();
            xp[(1, idx)] += h;
            let mut xm = x.clone();
            xm[(1, idx)] -= h;
            let fd = (loss_and_grad(&layer, &xp, &probe).0 - loss_and_grad(&layer, &xm, &probe).0) / (2.0 * h);
            assert!((fd - gx[(1, idx)]).abs() < 1e-5, "input grad {fd} vs {}", gx[(1, idx)]);
        }
        if let Some(gw) = gw {
            let (r, c) = (gw.nrows() - 1, gw.ncols() - 1);
            for (i, j) in [(0, 0), (r, c), (r / 2, c / 2)] {
                let orig = layer.weight().unwrap()[(i, j)];
                layer.weight_mut().unwrap()[(i, j)] = orig + h;
                let lp = loss_and_grad(&layer, &x, &probe).0;
                layer.weight_mut().unwrap()[(i, j)] = orig - h;
                let lm = loss_and_grad(&layer, &x, &probe).0;
                layer.weight_mut().unwrap()[(i, j)] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - gw[(i, j)]).abs() < 1e-5, "weight grad {fd} vs {}", gw[(i, j)]);
            }
        }
    }

    #[test]
    fn dense_gradients() {
        let mut rng = seeded_rng(1, &[]);
        check_layer(Layer::Dense(Dense::new(5, 3, &mut rng)), 5);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = seeded_rng(2, &[]);
        check_layer(Layer::Conv(Conv2d::new([2, 4, 5], 3, &mut rng)), 40);
    }

    #[test]
    fn pool_and_relu_gradients() {
        check_layer(Layer::MaxPool(MaxPool2 { in_shape: [2, 4, 4] }), 32);
        check_layer(Layer::Relu, 7);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = seeded_rng(4, &[]);
        let conv = Conv2d::new([2, 3, 3], 2, &mut rng);
        let x = DMatrix::from_fn(1, 18, |_, j| j as f64 * 0.1 - 0.5);
        let (y, _) = Layer::Conv(conv.clone()).forward(&x);
        for oc in 0..2 {
            for py in 0..3 {
                for px in 0..3 {
                    let mut acc = conv.weight[(oc, 18)];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                                if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                    acc += conv.weight[(oc, ci * 9 + ky * 3 + kx)]
                                        * x[(0, ci * 9 + iy as usize * 3 + ix as usize)];
                                }
                            }
                        }
                    }
                    assert!((y[(0, oc * 9 + py * 3 + px)] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
