//! Differentiable layer primitives and the network assembly: a stack of
//! linear+ReLU feature layers, a bottleneck layer `fcb`, a classifier layer
//! `fcc` producing the target scores `f_T`, and a two-layer residual block
//! `res1`-`res2` whose output `delta_f` bridges the source scores through a
//! shortcut: `f_S = f_T + delta_f`. Both heads are wrapped in softmax.
//!
//! The topology is fixed, so backward is written by hand rather than through
//! a general autodiff graph. A `Network` is owned by a single training loop;
//! `forward` on a frozen network is pure and may run concurrently.

use crate::error::{Error, Result};
use crate::losses::PROB_EPS;
use crate::optim::{ParamSlot, Parameters};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learning-rate multiplier for layers trained from scratch relative to the
/// feature stack.
pub const NEW_LAYER_LR_MULTIPLIER: f64 = 10.0;

/// Damping applied to the first residual layer's init.
pub const RES1_INIT_SCALE: f64 = 0.8;

/// A fully-connected layer with its gradient buffers.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub name: String,
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
    pub weight_grad: Tensor,
    pub bias_grad: Tensor,
    pub lr_multiplier: f64,
}

impl LinearLayer {
    /// Uniform fan-in/fan-out initialization in
    /// `[-sqrt(6/(in+out)), +sqrt(6/(in+out))]` for weights and biases
    /// (weights drawn first, row-major). Non-zero biases keep pre-activations
    /// off the exact ReLU kink, where one-sided derivatives differ.
    pub fn glorot(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        lr_multiplier: f64,
        rng: &mut Rng,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        let bias: Vec<f64> = (0..out_dim).map(|_| rng.uniform(-limit, limit)).collect();
        LinearLayer {
            name: name.to_string(),
            weight: Tensor::from_parts(vec![in_dim, out_dim], weight),
            bias: Tensor::from_parts(vec![out_dim], bias),
            weight_grad: Tensor::zeros(vec![in_dim, out_dim]),
            bias_grad: Tensor::zeros(vec![out_dim]),
            lr_multiplier,
        }
    }

    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize, lr_multiplier: f64) -> Self {
        LinearLayer {
            name: name.to_string(),
            weight: Tensor::zeros(vec![in_dim, out_dim]),
            bias: Tensor::zeros(vec![out_dim]),
            weight_grad: Tensor::zeros(vec![in_dim, out_dim]),
            bias_grad: Tensor::zeros(vec![out_dim]),
            lr_multiplier,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x W + b` for a batch.
    fn affine(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weight)?;
        let (n, c) = (out.rows(), out.cols());
        for i in 0..n {
            for j in 0..c {
                let v = out.get(i, j) + self.bias.data()[j];
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Accumulate weight/bias gradients for upstream `g` at input `x`, and
    /// return the gradient w.r.t. `x`.
    fn backward(&mut self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let wg = x.matmul_tn(g)?;
        add_assign(&mut self.weight_grad, &wg);
        let (n, c) = (g.rows(), g.cols());
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g.get(i, j);
            }
            self.bias_grad.data_mut()[j] += acc;
        }
        g.matmul_nt(&self.weight)
    }

    fn zero_grads(&mut self) {
        self.weight_grad.data_mut().fill(0.0);
        self.bias_grad.data_mut().fill(0.0);
    }
}

fn add_assign(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Elementwise mask of the ReLU derivative applied to `g` at pre-activation
/// `a` (subgradient 0 at exactly zero).
fn relu_backward(a: &Tensor, g: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pre, &grad)| if pre > 0.0 { grad } else { 0.0 })
        .collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

/// Numerically stable row-wise softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..c {
            let v = out.get(i, j) / denom;
            out.set(i, j, v);
        }
    }
    out
}

/// Vector-Jacobian product of softmax: given probabilities `p` and an
/// upstream gradient w.r.t. `p`, return the gradient w.r.t. the logits.
pub fn softmax_backward(probs: &Tensor, g: &Tensor) -> Tensor {
    let (n, c) = (probs.rows(), probs.cols());
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let p = probs.row(i);
        let gr = g.row(i);
        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out.set(i, j, p[j] * (gr[j] - dot));
        }
    }
    out
}

/// Variant gates carried by the network. `use_residual` changes the forward
/// topology; the other two are consumed by the objective assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    pub use_mmd: bool,
    pub use_entropy: bool,
    pub use_residual: bool,
}

/// Head tensors produced by one forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// Pre-softmax target scores (output of `fcc`).
    pub f_big_t: Tensor,
    /// Residual block output; all zeros when the residual path is off.
    pub delta_f: Tensor,
    /// Pre-softmax source scores: `f_T + delta_f`, elementwise in that order.
    pub f_big_s: Tensor,
    /// Softmax of `f_big_t`.
    pub f_t: Tensor,
    /// Softmax of `f_big_s`.
    pub f_s: Tensor,
    /// Post-ReLU bottleneck activations used for fusion.
    pub fcb_feats: Tensor,
}

/// Intermediates cached by `forward_cached` for the matching `backward`.
#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    feature_pre: Vec<Tensor>,
    feature_post: Vec<Tensor>,
    fcb_pre: Tensor,
    fcb_post: Tensor,
    f_big_t: Tensor,
    res1_pre: Option<Tensor>,
    res1_post: Option<Tensor>,
    f_t: Tensor,
    f_s: Tensor,
}

/// Upstream gradients of a scalar objective w.r.t. the head outputs. Fields
/// left as `None` contribute nothing. Gradients on `f_s`/`f_t` are w.r.t. the
/// softmax probabilities; `f_big_s`/`f_big_t`/`fcb_feats` are direct
/// pre-softmax terms (the MMD path enters through the latter two).
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub f_s: Option<Tensor>,
    pub f_t: Option<Tensor>,
    pub f_big_s: Option<Tensor>,
    pub f_big_t: Option<Tensor>,
    pub fcb_feats: Option<Tensor>,
}

/// Widths of a network, input to output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub feature_widths: Vec<usize>,
    pub bottleneck: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub feature_layers: Vec<LinearLayer>,
    pub fcb: LinearLayer,
    pub fcc: LinearLayer,
    pub res1: LinearLayer,
    pub res2: LinearLayer,
    pub variant: VariantFlags,
    cache: Option<ForwardCache>,
    grads_ready: bool,
}

impl Network {
    /// Build a network with fan-in-scaled feature/bottleneck/classifier
    /// layers. The residual block starts as the zero function (`res2` is
    /// zero-initialized) so `f_S == f_T` and `f_s == f_t` on the first
    /// forward pass; `res1` gets a regular init so the block receives
    /// gradient from the start.
    pub fn new(shape: &NetworkShape, variant: VariantFlags, rng: &mut Rng) -> Result<Self> {
        if shape.classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                shape.classes
            )));
        }
        let c = shape.classes;
        let mut feature_layers = Vec::new();
        let mut in_dim = shape.input_dim;
        for (i, &w) in shape.feature_widths.iter().enumerate() {
            feature_layers.push(LinearLayer::glorot(
                &format!("feat{i}"),
                in_dim,
                w,
                1.0,
                rng,
            ));
            in_dim = w;
        }
        let fcb = LinearLayer::glorot(
            "fcb",
            in_dim,
            shape.bottleneck,
            NEW_LAYER_LR_MULTIPLIER,
            rng,
        );
        let fcc = LinearLayer::glorot("fcc", shape.bottleneck, c, NEW_LAYER_LR_MULTIPLIER, rng);
        // res2 starts as the zero map so the block is the identity and both
        // heads coincide on the first forward pass. res1 keeps a live (but
        // damped) init: a fully zeroed block would leave res1 and the res2
        // weights without gradient forever (dead ReLU input times zero
        // output weights), while an undamped res1 lets the heads decouple
        // faster than the source loss can settle early in training.
        let mut res1 = LinearLayer::glorot("res1", c, c, NEW_LAYER_LR_MULTIPLIER, rng);
        {
            let w: Vec<f64> = res1
                .weight
                .data()
                .iter()
                .map(|v| v * RES1_INIT_SCALE)
                .collect();
            let b: Vec<f64> = res1
                .bias
                .data()
                .iter()
                .map(|v| v * RES1_INIT_SCALE)
                .collect();
            res1.weight = Tensor::new(vec![c, c], w)?;
            res1.bias = Tensor::new(vec![c], b)?;
        }
        let res2 = LinearLayer::zeroed("res2", c, c, NEW_LAYER_LR_MULTIPLIER);
        Ok(Network {
            feature_layers,
            fcb,
            fcc,
            res1,
            res2,
            variant,
            cache: None,
            grads_ready: false,
        })
    }

    /// Assemble a network from prebuilt layers, validating that the head
    /// dimensions agree (the residual block must be classes x classes).
    pub fn assemble(
        feature_layers: Vec<LinearLayer>,
        fcb: LinearLayer,
        fcc: LinearLayer,
        res1: LinearLayer,
        res2: LinearLayer,
        variant: VariantFlags,
    ) -> Result<Self> {
        let c = fcc.out_dim();
        if res1.in_dim() != c || res1.out_dim() != c || res2.in_dim() != c || res2.out_dim() != c {
            return Err(Error::Configuration(format!(
                "residual layers must be {c}x{c} to match the classifier"
            )));
        }
        if fcc.in_dim() != fcb.out_dim() {
            return Err(Error::Configuration(format!(
                "fcc expects width {}, bottleneck produces {}",
                fcc.in_dim(),
                fcb.out_dim()
            )));
        }
        let mut expect = None;
        for layer in &feature_layers {
            if let Some(w) = expect {
                if layer.in_dim() != w {
                    return Err(Error::Configuration(format!(
                        "feature layer {} expects width {}, previous produces {w}",
                        layer.name,
                        layer.in_dim()
                    )));
                }
            }
            expect = Some(layer.out_dim());
        }
        if let Some(w) = expect {
            if fcb.in_dim() != w {
                return Err(Error::Configuration(format!(
                    "bottleneck expects width {}, feature stack produces {w}",
                    fcb.in_dim()
                )));
            }
        }
        Ok(Network {
            feature_layers,
            fcb,
            fcc,
            res1,
            res2,
            variant,
            cache: None,
            grads_ready: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.fcc.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_layers
            .first()
            .map(|l| l.in_dim())
            .unwrap_or_else(|| self.fcb.in_dim())
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            input_dim: self.input_dim(),
            feature_widths: self.feature_layers.iter().map(|l| l.out_dim()).collect(),
            bottleneck: self.fcb.out_dim(),
            classes: self.classes(),
        }
    }

    fn run_forward(&self, x: &Tensor) -> Result<(HeadOutputs, ForwardCache)> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: vec![x.rows(), x.cols()],
                right: vec![self.input_dim()],
            });
        }
        let mut feature_pre = Vec::with_capacity(self.feature_layers.len());
        let mut feature_post = Vec::with_capacity(self.feature_layers.len());
        let mut h = x.clone();
        for layer in &self.feature_layers {
            let pre = layer.affine(&h)?;
            let post = relu(&pre);
            feature_pre.push(pre);
            feature_post.push(post.clone());
            h = post;
        }
        let fcb_pre = self.fcb.affine(&h)?;
        let fcb_post = relu(&fcb_pre);
        let f_big_t = self.fcc.affine(&fcb_post)?;

        let (delta_f, res1_pre, res1_post) = if self.variant.use_residual {
            let r1 = self.res1.affine(&f_big_t)?;
            let s1 = relu(&r1);
            let d = self.res2.affine(&s1)?;
            (d, Some(r1), Some(s1))
        } else {
            (
                Tensor::zeros(vec![f_big_t.rows(), f_big_t.cols()]),
                None,
                None,
            )
        };

        // Elementwise t + d, in this exact order, so the residual identity
        // holds bit-for-bit.
        let f_big_s = {
            let data: Vec<f64> = f_big_t
                .data()
                .iter()
                .zip(delta_f.data())
                .map(|(&t, &d)| t + d)
                .collect();
            Tensor::from_parts(f_big_t.shape().to_vec(), data)
        };
        let f_t = softmax(&f_big_t);
        let f_s = softmax(&f_big_s);

        let outputs = HeadOutputs {
            f_big_t: f_big_t.clone(),
            delta_f,
            f_big_s,
            f_t: f_t.clone(),
            f_s: f_s.clone(),
            fcb_feats: fcb_post.clone(),
        };
        let cache = ForwardCache {
            input: x.clone(),
            feature_pre,
            feature_post,
            fcb_pre,
            fcb_post,
            f_big_t,
            res1_pre,
            res1_post,
            f_t,
            f_s,
        };
        Ok((outputs, cache))
    }

    /// Pure forward pass; does not touch the backward cache.
    pub fn forward(&self, x: &Tensor) -> Result<HeadOutputs> {
        self.run_forward(x).map(|(out, _)| out)
    }

    /// Forward pass that stores the intermediates `backward` needs.
    pub fn forward_cached(&mut self, x: &Tensor) -> Result<HeadOutputs> {
        let (out, cache) = self.run_forward(x)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Back-propagate a scalar objective through the cached forward pass,
    /// accumulating parameter gradients; returns the gradient w.r.t. the
    /// input batch. Gradient flows through both the shortcut and the
    /// residual path, and through the whole feature stack.
    pub fn backward(&mut self, upstream: &UpstreamGrads) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::InvalidState(
            "backward called without a cached forward",
        ))?;
        let (n, c) = (cache.f_big_t.rows(), cache.f_big_t.cols());
        let zeros = || Tensor::zeros(vec![n, c]);

        // Source-head gradient: softmax VJP of any f_s term plus direct
        // pre-softmax terms.
        let mut g_fs = match &upstream.f_s {
            Some(g) => softmax_backward(&cache.f_s, g),
            None => zeros(),
        };
        if let Some(g) = &upstream.f_big_s {
            add_assign(&mut g_fs, g);
        }

        // Target-head gradient: softmax VJP of any f_t term, direct terms,
        // plus the shortcut contribution (f_S = f_T + delta_f).
        let mut g_ft = match &upstream.f_t {
            Some(g) => softmax_backward(&cache.f_t, g),
            None => zeros(),
        };
        if let Some(g) = &upstream.f_big_t {
            add_assign(&mut g_ft, g);
        }
        add_assign(&mut g_ft, &g_fs);

        if self.variant.use_residual {
            let s1 = cache.res1_post.as_ref().expect("residual cache");
            let r1 = cache.res1_pre.as_ref().expect("residual cache");
            let g_s1 = self.res2.backward(s1, &g_fs)?;
            let g_r1 = relu_backward(r1, &g_s1);
            let g_res_in = self.res1.backward(&cache.f_big_t, &g_r1)?;
            add_assign(&mut g_ft, &g_res_in);
        }

        let mut g_fcb_post = self.fcc.backward(&cache.fcb_post, &g_ft)?;
        if let Some(g) = &upstream.fcb_feats {
            add_assign(&mut g_fcb_post, g);
        }
        let g_fcb_pre = relu_backward(&cache.fcb_pre, &g_fcb_post);
        let last_features = cache.feature_post.last().unwrap_or(&cache.input);
        let mut g_h = self.fcb.backward(last_features, &g_fcb_pre)?;

        for (i, layer) in self.feature_layers.iter_mut().enumerate().rev() {
            let g_pre = relu_backward(&cache.feature_pre[i], &g_h);
            let input = if i == 0 {
                &cache.input
            } else {
                &cache.feature_post[i - 1]
            };
            g_h = layer.backward(input, &g_pre)?;
        }
        self.grads_ready = true;
        Ok(g_h)
    }

    /// Argmax of the target-head probabilities per row; ties break toward
    /// the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        Ok(argmax_rows(&out.f_t))
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.feature_layers {
            l.zero_grads();
        }
        self.fcb.zero_grads();
        self.fcc.zero_grads();
        self.res1.zero_grads();
        self.res2.zero_grads();
        self.grads_ready = false;
    }

    fn layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut out: Vec<&mut LinearLayer> = self.feature_layers.iter_mut().collect();
        out.push(&mut self.fcb);
        out.push(&mut self.fcc);
        out.push(&mut self.res1);
        out.push(&mut self.res2);
        out
    }

    pub fn layers(&self) -> Vec<&LinearLayer> {
        let mut out: Vec<&LinearLayer> = self.feature_layers.iter().collect();
        out.push(&self.fcb);
        out.push(&self.fcc);
        out.push(&self.res1);
        out.push(&self.res2);
        out
    }
}

impl Parameters for Network {
    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for layer in self.layers_mut() {
            let name = layer.name.clone();
            let lr = layer.lr_multiplier;
            slots.push(ParamSlot {
                name: format!("{name}.weight"),
                lr_multiplier: lr,
                data: layer.weight.data_mut(),
                grad: layer.weight_grad.data_mut(),
            });
            slots.push(ParamSlot {
                name: format!("{name}.bias"),
                lr_multiplier: lr,
                data: layer.bias.data_mut(),
                grad: layer.bias_grad.data_mut(),
            });
        }
        slots
    }

    fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    fn clear_grads(&mut self) {
        self.zero_grads();
    }
}

pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean over the batch of `-ln(max(probs[i][label_i], eps))`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![probs.rows()],
            right: vec![labels.len()],
        });
    }
    let c = probs.cols();
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::IndexOutOfRange(format!(
                "label {y} at row {i} exceeds class count {c}"
            )));
        }
        acc -= probs.get(i, y).max(PROB_EPS).ln();
    }
    Ok(acc / labels.len() as f64)
}

/// Gradient of `cross_entropy` w.r.t. the probability entries.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if probs.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_grad",
            left: vec![probs.rows()],
            right: vec![labels.len()],
        });
    }
    let (n, c) = (probs.rows(), probs.cols());
    let mut g = Tensor::zeros(vec![n, c]);
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::IndexOutOfRange(format!(
                "label {y} at row {i} exceeds class count {c}"
            )));
        }
        let p = probs.get(i, y);
        // Below the floor the loss is constant in p.
        if p >= PROB_EPS {
            g.set(i, y, -inv_n / p);
        }
    }
    Ok(g)
}
