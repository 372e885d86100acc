//! Encoder/classifier models, the frozen random-projection head, parameter
//! censuses and checkpoints.

mod checkpoint;
mod layers;
mod random_projection;

pub use checkpoint::{load_checkpoint, save_checkpoint, NamedArray};
pub use layers::{affine, augment, he_init, Conv2d, Dense, Layer, LayerCache, MaxPool2, KERNEL};
pub use random_projection::RandomProjectionHead;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::Arch;
use crate::error::{Error, Result};
use crate::util::{seeded_rng, Rng};

/// Feature encoder: a layer stack mapping flattened inputs to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: Option<Arch>,
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    frozen: bool,
}

/// Forward intermediates needed for backpropagation and activation capture.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
    pub features: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl Backbone {
    /// Desk-scale reference encoders. `mlp2` is two ReLU hidden layers whose
    /// second width is the feature dimension; `smallconv` is three
    /// conv-ReLU-pool blocks followed by a linear neck with ReLU.
    pub fn build(
        arch: Arch,
        input_shape: &[usize],
        hidden: &[usize],
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(seed, &[0xbac4b0e]);
        let in_dim: usize = input_shape.iter().product();
        if in_dim == 0 {
            return Err(Error::InvalidArgument(format!("bad input shape {input_shape:?}")));
        }
        let (layers, d) = match arch {
            Arch::Mlp2 => {
                let [h1, h2] = hidden else {
                    return Err(Error::InvalidArgument("mlp2 needs exactly two hidden widths".into()));
                };
                (
                    vec![
                        Layer::Dense(Dense::new(in_dim, *h1, &mut rng)),
                        Layer::Relu,
                        Layer::Dense(Dense::new(*h1, *h2, &mut rng)),
                        Layer::Relu,
                    ],
                    *h2,
                )
            }
            Arch::Smallconv => {
                let [c, h, w] = input_shape else {
                    return Err(Error::InvalidArgument(
                        "smallconv needs a [channels, height, width] input".into(),
                    ));
                };
                if *h < 8 || *w < 8 {
                    return Err(Error::InvalidArgument("smallconv needs inputs of at least 8x8".into()));
                }
                let mut shape = [*c, *h, *w];
                let mut layers = Vec::new();
                for out_c in [8, 16, 32] {
                    let conv = Conv2d::new(shape, out_c, &mut rng);
                    let pool = MaxPool2 { in_shape: conv.out_shape() };
                    shape = pool.out_shape();
                    layers.push(Layer::Conv(conv));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool(pool));
                }
                let flat = shape.iter().product();
                layers.push(Layer::Dense(Dense::new(flat, feature_dim, &mut rng)));
                layers.push(Layer::Relu);
                (layers, feature_dim)
            }
        };
        Ok(Self { arch: Some(arch), layers, input_shape: input_shape.to_vec(), feature_dim: d, frozen: false })
    }

    /// Encoder from explicit layers; an empty stack is the identity map.
    pub fn from_layers(layers: Vec<Layer>, input_shape: Vec<usize>, feature_dim: usize) -> Self {
        Self { arch: None, layers, input_shape, feature_dim, frozen: false }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.layers.iter().fold(x.clone(), |h, l| l.forward(&h).0)
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<LayerCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, cache) = l.forward(&h);
            caches.push(cache);
            h = out;
        }
        (h, caches)
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.weight().is_some())
    }

    pub fn census_components(&self) -> Vec<ComponentCount> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weight().map(|w| (i, w)))
            .map(|(i, w)| {
                let n = (w.nrows() * w.ncols()) as u64;
                ComponentCount {
                    name: format!("encoder.{i}"),
                    trainable: if self.frozen { 0 } else { n },
                    frozen: if self.frozen { n } else { 0 },
                }
            })
            .collect()
    }
}

/// Linear classifier over features; row `c` belongs to global class `c` and
/// holds `[w_c | b_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: DMatrix<f64>,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize) -> Self {
        Self { weight: DMatrix::zeros(0, feature_dim + 1) }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols() - 1
    }

    /// Appends `new_classes` rows with He-normal weights and zero bias.
    /// Existing rows are untouched.
    pub fn expand(&mut self, new_classes: usize, rng: &mut Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::InvalidArgument("head expansion by zero classes".into()));
        }
        let fresh = he_init(new_classes, self.feature_dim(), rng);
        let old = self.num_classes();
        let mut w = self.weight.clone().resize_vertically(old + new_classes, 0.0);
        w.rows_mut(old, new_classes).copy_from(&fresh);
        self.weight = w;
        Ok(())
    }

    pub fn logits(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        affine(features, &self.weight)
    }

    pub fn census_component(&self) -> ComponentCount {
        ComponentCount {
            name: "head".into(),
            trainable: (self.weight.nrows() * self.weight.ncols()) as u64,
            frozen: 0,
        }
    }
}

/// One gradient matrix per parameter group (weighted encoder layers in order,
/// then the head). Shapes match [`Model::param_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub groups: Vec<DMatrix<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            groups: model.param_groups().iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            *a += b * s;
        }
    }

    /// Row-major concatenation; the head's rows come last so a growing head
    /// only appends.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(self.groups.iter())
    }

    pub fn from_flat(model: &Model, flat: &[f64]) -> Self {
        let mut groups = Vec::new();
        let mut off = 0;
        for w in model.param_groups() {
            let n = w.nrows() * w.ncols();
            groups.push(DMatrix::from_row_slice(w.nrows(), w.ncols(), &flat[off..off + n]));
            off += n;
        }
        Self { groups }
    }
}

fn flatten<'a>(it: impl Iterator<Item = &'a DMatrix<f64>>) -> Vec<f64> {
    let mut out = Vec::new();
    for m in it {
        for i in 0..m.nrows() {
            out.extend(m.row(i).iter());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: ClassifierHead,
    rng: Rng,
}

impl Model {
    pub fn new(backbone: Backbone, seed: u64) -> Self {
        let head = ClassifierHead::new(backbone.feature_dim);
        Self { backbone, head, rng: seeded_rng(seed, &[0x4ead]) }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn expand_head(&mut self, new_classes: usize) -> Result<()> {
        self.head.expand(new_classes, &mut self.rng)
    }

    pub fn param_groups(&self) -> Vec<&DMatrix<f64>> {
        let mut v: Vec<&DMatrix<f64>> = self.backbone.layers.iter().filter_map(Layer::weight).collect();
        v.push(&self.head.weight);
        v
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v: Vec<&mut DMatrix<f64>> =
            self.backbone.layers.iter_mut().filter_map(Layer::weight_mut).collect();
        v.push(&mut self.head.weight);
        v
    }

    /// Number of encoder parameter groups; the head is group `encoder_groups()`.
    pub fn encoder_groups(&self) -> usize {
        self.backbone.weighted_layers().count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten(self.param_groups().into_iter())
    }

    pub fn num_params(&self) -> usize {
        self.param_groups().iter().map(|w| w.len()).sum()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for w in self.param_groups_mut() {
            let (r, c) = w.shape();
            *w = DMatrix::from_row_slice(r, c, &flat[off..off + r * c]);
            off += r * c;
        }
        Ok(())
    }

    /// Adds `delta` to every group. Frozen encoder groups are skipped.
    pub fn apply_update(&mut self, delta: &Grads) {
        let skip = if self.backbone.is_frozen() { self.encoder_groups() } else { 0 };
        for (w, d) in self.param_groups_mut().into_iter().zip(&delta.groups).skip(skip) {
            *w += d;
        }
    }

    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.backbone.features(x)
    }

    pub fn logits(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.head.logits(&self.features(x))
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> ForwardTrace {
        let (features, caches) = self.backbone.forward_cached(x);
        let logits = self.head.logits(&features);
        ForwardTrace { caches, features, logits }
    }

    /// Gradients of a loss whose derivative with respect to the logits is
    /// `grad_logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &DMatrix<f64>) -> Grads {
        let head_layer = Layer::Dense(Dense { weight: self.head.weight.clone() });
        let (mut g, head_grad) =
            head_layer.backward(&LayerCache::Dense { input: trace.features.clone() }, grad_logits);
        let mut groups = Vec::new();
        for (layer, cache) in self.backbone.layers.iter().zip(&trace.caches).rev() {
            let (gx, gw) = layer.backward(cache, &g);
            if let Some(gw) = gw {
                groups.push(gw);
            }
            g = gx;
        }
        groups.reverse();
        groups.push(head_grad.expect("dense grad"));
        Grads { groups }
    }

    /// Sum over samples of squared per-sample gradients, where row `i` of
    /// `grad_logits` is sample `i`'s logit gradient. `None` when a layer's
    /// per-sample gradients do not factor (convolutions).
    pub fn squared_grad_sum(&self, trace: &ForwardTrace, grad_logits: &DMatrix<f64>) -> Option<Grads> {
        let head_layer = Layer::Dense(Dense { weight: self.head.weight.clone() });
        let (mut g, head_sq) =
            head_layer.backward_squared(&LayerCache::Dense { input: trace.features.clone() }, grad_logits)?;
        let mut groups = Vec::new();
        for (layer, cache) in self.backbone.layers.iter().zip(&trace.caches).rev() {
            let (gx, gw) = layer.backward_squared(cache, &g)?;
            if let Some(gw) = gw {
                groups.push(gw);
            }
            g = gx;
        }
        groups.reverse();
        groups.push(head_sq.expect("dense grad"));
        Some(Grads { groups })
    }

    /// Per-group input representations (augmented) for a forward pass, in
    /// group order including the head. Dense groups contribute one row per
    /// sample; convolutions one row per output position.
    pub fn representations(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let trace = self.forward(x);
        let mut reps: Vec<DMatrix<f64>> = self
            .backbone
            .layers
            .iter()
            .zip(&trace.caches)
            .filter_map(|(l, c)| l.weight().and_then(|_| l.representation(c)))
            .collect();
        reps.push(augment(&trace.features));
        reps
    }

    pub fn census(&self) -> ParameterCensus {
        let mut comps = self.backbone.census_components();
        comps.push(self.head.census_component());
        let dims = self
            .param_groups()
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let name = if i == self.encoder_groups() { "head".to_string() } else { format!("group.{i}") };
                (name, w.ncols())
            })
            .collect();
        ParameterCensus { components: comps, activation_dims: dims }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub trainable: u64,
    pub frozen: u64,
}

/// Exact parameter counts per component, plus the representation width
/// (input width including the bias input) of every parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterCensus {
    pub components: Vec<ComponentCount>,
    pub activation_dims: Vec<(String, usize)>,
}

impl ParameterCensus {
    pub fn trainable(&self) -> u64 {
        self.components.iter().map(|c| c.trainable).sum()
    }

    pub fn frozen(&self) -> u64 {
        self.components.iter().map(|c| c.frozen).sum()
    }

    pub fn merge(mut self, other: ParameterCensus) -> Self {
        self.components.extend(other.components);
        self.activation_dims.extend(other.activation_dims);
        self
    }
}

/// Census of a set of components.
pub fn census(components: &[ComponentCount]) -> ParameterCensus {
    ParameterCensus { components: components.to_vec(), activation_dims: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(seed: u64) -> Model {
        Model::new(Backbone::build(Arch::Mlp2, &[784], &[100, 100], 0, seed).unwrap(), seed)
    }

    #[test]
    fn mlp2_census() {
        let m = mlp(0);
        let c = census(&m.backbone.census_components());
        assert_eq!(c.trainable(), 784 * 100 + 100 + 100 * 100 + 100);
        assert_eq!(c.frozen(), 0);
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(mlp(3).flat_params(), mlp(3).flat_params());
        assert_ne!(mlp(3).flat_params(), mlp(4).flat_params());
    }

    #[test]
    fn smallconv_shape() {
        let bb = Backbone::build(Arch::Smallconv, &[3, 32, 32], &[], 24, 1).unwrap();
        for n in [1, 3] {
            let x = DMatrix::from_fn(n, 3072, |i, j| ((i + j) % 7) as f64 / 7.0);
            assert_eq!(bb.features(&x).shape(), (n, 24));
        }
        assert!(Backbone::build(Arch::Smallconv, &[3, 4, 4], &[], 24, 1).is_err());
        assert!(Backbone::build(Arch::Smallconv, &[48], &[], 24, 1).is_err());
    }

    #[test]
    fn head_expansion_preserves_rows_and_logits() {
        let mut m = mlp(1);
        m.expand_head(10).unwrap();
        let before = m.head.weight.clone();
        let x = DMatrix::from_fn(2, 784, |i, j| ((i * 3 + j) % 11) as f64 * 0.1);
        let logits = m.logits(&x);
        m.expand_head(10).unwrap();
        assert_eq!(m.num_classes(), 20);
        assert_eq!(m.head.weight.rows(0, 10), before.rows(0, 10));
        assert_eq!(m.logits(&x).columns(0, 10), logits.columns(0, 10));
        assert!(m.expand_head(0).is_err());
    }

    #[test]
    fn dense_component_count() {
        let mut rng = seeded_rng(0, &[]);
        let bb = Backbone::from_layers(vec![Layer::Dense(Dense::new(10, 10, &mut rng))], vec![10], 10);
        assert_eq!(census(&bb.census_components()).trainable(), 110);
    }

    #[test]
    fn flat_roundtrip_and_head_prefix() {
        let mut m = mlp(2);
        m.expand_head(3).unwrap();
        let p = m.flat_params();
        m.expand_head(2).unwrap();
        assert_eq!(&m.flat_params()[..p.len()], &p[..]);
        let mut q = m.flat_params();
        q[0] += 1.0;
        m.set_flat_params(&q).unwrap();
        assert_eq!(m.flat_params(), q);
        assert!(m.set_flat_params(&q[1..]).is_err());
    }

    #[test]
    fn model_backward_matches_finite_differences() {
        let mut rng = seeded_rng(5, &[]);
        let bb = Backbone::from_layers(
            vec![Layer::Dense(Dense::new(4, 3, &mut rng)), Layer::Relu],
            vec![4],
            3,
        );
        let mut m = Model::new(bb, 5);
        m.expand_head(2).unwrap();
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3 + 0.1);
        let probe = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.5 - 1.0);
        let loss = |m: &Model| m.logits(&x).component_mul(&probe).sum();
        let g = m.backward(&m.forward(&x), &probe).to_flat();
        let p = m.flat_params();
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += 1e-6;
            let mut b = p.clone();
            b[i] -= 1e-6;
            let mut ma = m.clone();
            ma.set_flat_params(&a).unwrap();
            let mut mb = m.clone();
            mb.set_flat_params(&b).unwrap();
            let fd = (loss(&ma) - loss(&mb)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn squared_sum_matches_per_sample() {
        let mut m = Model::new(Backbone::build(Arch::Mlp2, &[5], &[4, 3], 0, 1).unwrap(), 1);
        m.expand_head(3).unwrap();
        let x = DMatrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let d = DMatrix::from_fn(4, 3, |i, j| ((i + 2 * j) as f64 * 0.7).cos());
        let fast = m.squared_grad_sum(&m.forward(&x), &d).unwrap().to_flat();
        let mut slow = vec![0.0; fast.len()];
        for i in 0..4 {
            let xi = x.rows(i, 1).into_owned();
            let g = m.backward(&m.forward(&xi), &d.rows(i, 1).into_owned()).to_flat();
            for (s, v) in slow.iter_mut().zip(g) {
                *s += v * v;
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn representation_rows_track_samples() {
        let m = mlp(0);
        let x = DMatrix::zeros(7, 784);
        let reps = m.representations(&x);
        assert_eq!(reps.len(), 3);
        assert!(reps.iter().all(|r| r.nrows() == 7));
        assert_eq!(reps[0].ncols(), 785);
        assert_eq!(m.census().trainable(), 88_600);
    }
}
