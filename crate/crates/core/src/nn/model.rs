//! The classifier: a fully-connected ReLU network with exact backpropagation,
//! plain SGD updates, and parameter-space utilities (flatten, perturb).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::{gemm_into, DenseMatrix};
use crate::rng::ComponentRng;
use crate::scalar::Elem;

/// One dense layer: `z = x·W + b` with `W` stored `in×out` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<E: Elem = f64> {
    pub weight: DenseMatrix<E>,
    pub bias: Vec<E>,
}

impl<E: Elem> DenseLayer<E> {
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Fully-connected classifier with ReLU hidden layers and identity (logit)
/// output. `forward` returns pre-softmax logits.
///
/// The experiment architecture is fixed at two hidden layers of 100 units
/// ([`DenseModel::mlp`]); the free constructor exists for small shapes in unit
/// tests and probes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<E: Elem = f64> {
    layers: Vec<DenseLayer<E>>,
}

/// Per-layer gradients with the exact shapes of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<E: Elem = f64> {
    pub weights: Vec<DenseMatrix<E>>,
    pub biases: Vec<Vec<E>>,
}

/// Scratch holding intermediate activations of one forward pass so the
/// backward pass can reuse them without reallocating every step.
#[derive(Debug, Default, Clone)]
pub struct ForwardCache<E: Elem = f64> {
    /// Pre-activations per layer; `pre[last]` are the logits.
    pre: Vec<DenseMatrix<E>>,
    /// Post-ReLU activations per hidden layer.
    post: Vec<DenseMatrix<E>>,
}

impl<E: Elem> ForwardCache<E> {
    pub fn new() -> Self {
        ForwardCache {
            pre: Vec::new(),
            post: Vec::new(),
        }
    }

    /// Logits of the pass that filled this cache.
    pub fn logits(&self) -> &DenseMatrix<E> {
        self.pre.last().expect("cache filled by forward_cached")
    }
}

impl<E: Elem> DenseModel<E> {
    /// He-uniform initialized network over arbitrary layer widths
    /// (`dims = [input, hidden..., output]`).
    ///
    /// Weights draw from `U(−√(6/fan_in), +√(6/fan_in))`, biases start at
    /// zero; the uniform draws are taken in `f64` so the same seed yields the
    /// same network at any scalar type.
    pub fn new(dims: &[usize], rng: &mut ComponentRng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = DenseMatrix::from_fn(fan_in, fan_out, |_, _| {
                let u: f64 = rng.random();
                E::from_f64_lossy((2.0 * u - 1.0) * bound)
            });
            layers.push(DenseLayer {
                weight,
                bias: vec![E::zero(); fan_out],
            });
        }
        DenseModel { layers }
    }

    /// The experiment classifier: 784 → 100 → 100 → `classes`, ReLU hidden.
    pub fn mlp(classes: usize, rng: &mut ComponentRng) -> Self {
        Self::new(&[784, 100, 100, classes], rng)
    }

    pub fn layers(&self) -> &[DenseLayer<E>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<E>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Logits for a batch (`inputs` is `B×input_dim`); panics on width
    /// mismatch.
    pub fn forward(&self, inputs: &DenseMatrix<E>) -> DenseMatrix<E> {
        let mut cache = ForwardCache::new();
        self.forward_cached(inputs, &mut cache);
        cache.pre.pop().expect("logits")
    }

    /// Forward pass retaining every intermediate needed by
    /// [`DenseModel::backward_from`]. Reuses the cache's buffers when shapes
    /// allow.
    pub fn forward_cached(&self, inputs: &DenseMatrix<E>, cache: &mut ForwardCache<E>) {
        assert_eq!(
            inputs.cols(),
            self.input_dim(),
            "input width {} does not match model input dim {}",
            inputs.cols(),
            self.input_dim()
        );
        let batch = inputs.rows();
        let n_layers = self.layers.len();
        let ForwardCache { pre, post } = cache;
        pre.resize_with(n_layers, || DenseMatrix::zeros(0, 0));
        post.resize_with(n_layers.saturating_sub(1), || DenseMatrix::zeros(0, 0));

        for (l, layer) in self.layers.iter().enumerate() {
            let out_dim = layer.output_dim();
            if (pre[l].rows(), pre[l].cols()) != (batch, out_dim) {
                pre[l] = DenseMatrix::zeros(batch, out_dim);
            }
            if l + 1 < n_layers && (post[l].rows(), post[l].cols()) != (batch, out_dim) {
                post[l] = DenseMatrix::zeros(batch, out_dim);
            }

            // z = x·W  (x is the input batch for the first layer, the previous
            // layer's ReLU output otherwise)
            {
                let x: &DenseMatrix<E> = if l == 0 { inputs } else { &post[l - 1] };
                gemm_into(E::one(), x, false, &layer.weight, false, E::zero(), &mut pre[l]);
            }
            for r in 0..batch {
                for (v, b) in pre[l].row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += *b;
                }
            }
            if l + 1 < n_layers {
                for (dst, src) in post[l].data_mut().iter_mut().zip(pre[l].data()) {
                    *dst = if *src > E::zero() { *src } else { E::zero() };
                }
            }
        }
    }

    /// Exact gradients of a scalar loss given `d loss / d logits`.
    ///
    /// `inputs` and `cache` must come from the matching `forward_cached` call;
    /// `grads` is overwritten (not accumulated). ReLU uses the subgradient 0
    /// at exactly 0.
    pub fn backward_from(
        &self,
        inputs: &DenseMatrix<E>,
        cache: &ForwardCache<E>,
        dlogits: &DenseMatrix<E>,
        grads: &mut GradientBundle<E>,
    ) {
        let n_layers = self.layers.len();
        assert_eq!(dlogits.rows(), inputs.rows(), "batch size mismatch");
        assert_eq!(dlogits.cols(), self.output_dim(), "logit width mismatch");
        grads.conform_to(self);

        // delta starts as d loss / d z for the output layer.
        let mut delta = dlogits.clone();
        for l in (0..n_layers).rev() {
            let below: &DenseMatrix<E> = if l == 0 { inputs } else { &cache.post[l - 1] };
            // dW = belowᵀ · delta ; db = column sums of delta
            gemm_into(
                E::one(),
                below,
                true,
                &delta,
                false,
                E::zero(),
                &mut grads.weights[l],
            );
            let db = &mut grads.biases[l];
            db.fill(E::zero());
            for r in 0..delta.rows() {
                for (acc, v) in db.iter_mut().zip(delta.row(r)) {
                    *acc += *v;
                }
            }
            if l > 0 {
                // d(post_{l-1}) = delta · Wᵀ, then gate by ReLU'(pre_{l-1})
                let mut next = DenseMatrix::zeros(delta.rows(), self.layers[l].input_dim());
                gemm_into(
                    E::one(),
                    &delta,
                    false,
                    &self.layers[l].weight,
                    true,
                    E::zero(),
                    &mut next,
                );
                for (d, z) in next.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    if *z <= E::zero() {
                        *d = E::zero();
                    }
                }
                delta = next;
            }
        }
    }

    /// One plain SGD descent step: `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &GradientBundle<E>, lr: E) {
        assert_eq!(grads.weights.len(), self.layers.len(), "gradient layer count");
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            for (w, g) in layer.weight.data_mut().iter_mut().zip(gw.data()) {
                *w = *w - lr * *g;
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b = *b - lr * *g;
            }
        }
    }

    /// Copy with independent `N(0, σ²)` noise added to every parameter; the
    /// original is untouched. Draws are `f64` normals scaled by `sigma`.
    pub fn perturbed(&self, sigma: f64, rng: &mut ComponentRng) -> Self {
        let mut copy = self.clone();
        if sigma == 0.0 {
            return copy;
        }
        for layer in &mut copy.layers {
            for w in layer.weight.data_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *w = *w + E::from_f64_lossy(sigma * n);
            }
            for b in layer.bias.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *b = *b + E::from_f64_lossy(sigma * n);
            }
        }
        copy
    }

    /// All parameters as one flat vector (layer order: W then b, row-major).
    pub fn flatten(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`DenseModel::flatten`]; panics if the length differs.
    pub fn load_flat(&mut self, flat: &[E]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for layer in &mut self.layers {
            let n = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

impl<E: Elem> GradientBundle<E> {
    pub fn zeros_like(model: &DenseModel<E>) -> Self {
        GradientBundle {
            weights: model
                .layers()
                .iter()
                .map(|l| DenseMatrix::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            biases: model
                .layers()
                .iter()
                .map(|l| vec![E::zero(); l.output_dim()])
                .collect(),
        }
    }

    /// Resize to match `model` if needed (cheap no-op when already matching).
    pub fn conform_to(&mut self, model: &DenseModel<E>) {
        let ok = self.weights.len() == model.layers().len()
            && self
                .weights
                .iter()
                .zip(model.layers())
                .all(|(g, l)| (g.rows(), g.cols()) == (l.input_dim(), l.output_dim()));
        if !ok {
            *self = Self::zeros_like(model);
        }
    }

    /// Total parameter count covered by this bundle.
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.data().len())
            .sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// `self ← self + coeff·other` componentwise.
    pub fn scaled_add(&mut self, other: &GradientBundle<E>, coeff: E) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += coeff * *y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += coeff * *y;
            }
        }
    }

    /// Flat inner product `⟨self, other⟩` accumulated in the scalar type.
    pub fn dot(&self, other: &GradientBundle<E>) -> E {
        let mut acc = E::zero();
        for (a, b) in self.weights.iter().zip(&other.weights) {
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += *x * *y;
            }
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            for (x, y) in a.iter().zip(b) {
                acc += *x * *y;
            }
        }
        acc
    }

    /// Squared Euclidean norm of the flattened gradient.
    pub fn norm_sq(&self) -> E {
        self.dot(self)
    }

    /// Flat view in the same order as [`DenseModel::flatten`].
    pub fn flatten(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for w in &mut self.weights {
            w.fill(E::zero());
        }
        for b in &mut self.biases {
            b.fill(E::zero());
        }
    }
}
