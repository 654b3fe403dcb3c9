//! Minimal differentiable feed-forward network: dense and stride-1 2-D
//! convolution layers, ReLU, pluggable normalization slots, and softmax
//! cross-entropy, with reverse-mode gradients over a recorded forward pass.
//!
//! Parameters and activations are `f32`; reductions (dot products, batch
//! statistics, loss sums) accumulate in `f64`. Normalization statistics are
//! not trainable parameters: they live in each layer's [`NormState`] and
//! change only through the statistics pipeline, never through the tape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::resibn::{
    align_step, compute_batch_stats, ema_update, wasserstein_sq, BatchStats, NormState,
};
use crate::tensor::Tensor;

/// Layer descriptor used to build a [`Network`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    /// Stride-1 convolution with an odd square kernel and zero padding
    /// preserving the spatial extent.
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize },
    Relu,
    Norm { channels: usize },
    Flatten,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        w: Vec<f32>,
        b: Vec<f32>,
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        w: Vec<f32>,
        b: Vec<f32>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Relu,
    Norm(NormState),
    Flatten,
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Norm(_) => "norm",
            Layer::Flatten => "flatten",
        }
    }

    fn param_len(&self) -> usize {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => w.len() + b.len(),
            Layer::Norm(s) => s.gamma.len() + s.beta.len(),
            _ => 0,
        }
    }
}

/// Which statistics normalization layers use during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (Eq.-style biased mean/variance).
    TrainBatch,
    /// The online target statistics.
    EvalTarget,
    /// The frozen source statistics.
    EvalSource,
}

/// Kind of one contiguous parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// A contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// Per-parameter gradients aligned with the network's flat parameter layout.
#[derive(Debug, Clone)]
pub struct GradientTape {
    grads: Vec<f32>,
    version: u64,
}

impl GradientTape {
    pub fn grads(&self) -> &[f32] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f32] {
        &mut self.grads
    }

    pub fn param_version(&self) -> u64 {
        self.version
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }

    pub fn zeros_like(net: &Network) -> Self {
        GradientTape {
            grads: vec![0.0; net.param_count()],
            version: net.version,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerTrace {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    Relu { input: Tensor },
    Norm { x_hat: Tensor, sigma: Vec<f64>, train_batch: bool },
    Flatten { in_shape: Vec<usize> },
}

/// Recorded forward pass; consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    traces: Vec<LayerTrace>,
    batch_stats: Vec<Option<BatchStats>>,
    output_shape: Vec<usize>,
}

impl ForwardTrace {
    /// The batch statistics each normalization layer computed, in layer
    /// order; `None` for layers run with fixed statistics.
    pub fn norm_batch_stats(&self) -> Vec<Option<&BatchStats>> {
        self.traces
            .iter()
            .zip(&self.batch_stats)
            .filter(|(t, _)| matches!(t, LayerTrace::Norm { .. }))
            .map(|(_, s)| s.as_ref())
            .collect()
    }
}

/// Diagnostics of one statistics-updating forward pass.
#[derive(Debug, Clone)]
pub struct AdaptDiag {
    /// Mean squared Wasserstein distance per normalization layer, after the
    /// update.
    pub per_layer_w2: Vec<f64>,
    /// Batch statistics observed per normalization layer.
    pub batch_stats: Vec<BatchStats>,
}

/// A feed-forward network with a fixed layer sequence.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeState {
    Map { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Network {
    /// Build a zero-initialized network, validating layer compatibility.
    /// `input_shape` is `[C, H, W]` for image inputs or `[D]` for flat inputs.
    pub fn new(input_shape: Vec<usize>, num_classes: usize, specs: &[LayerSpec]) -> Result<Self> {
        let mut shape = match input_shape.as_slice() {
            [c, h, w] => ShapeState::Map { c: *c, h: *h, w: *w },
            [d] => ShapeState::Flat { d: *d },
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "input shape must be [C,H,W] or [D], got {:?}",
                    other
                )))
            }
        };
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mismatch = |expected: String, actual: String| CoreError::ShapeMismatch {
                layer: i,
                name: format!("{:?}", spec),
                expected,
                actual,
            };
            match *spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    match shape {
                        ShapeState::Flat { d } if d == in_dim => {}
                        other => {
                            return Err(mismatch(format!("flat {}", in_dim), format!("{:?}", other)))
                        }
                    }
                    layers.push(Layer::Dense {
                        w: vec![0.0; in_dim * out_dim],
                        b: vec![0.0; out_dim],
                        in_dim,
                        out_dim,
                    });
                    shape = ShapeState::Flat { d: out_dim };
                }
                LayerSpec::Conv2d { in_ch, out_ch, kernel } => {
                    if kernel % 2 == 0 || kernel == 0 {
                        return Err(CoreError::InvalidConfig(format!(
                            "conv kernel must be odd and positive, got {}",
                            kernel
                        )));
                    }
                    match shape {
                        ShapeState::Map { c, h, w } if c == in_ch => {
                            shape = ShapeState::Map { c: out_ch, h, w };
                        }
                        other => {
                            return Err(mismatch(
                                format!("map with {} channels", in_ch),
                                format!("{:?}", other),
                            ))
                        }
                    }
                    layers.push(Layer::Conv2d {
                        w: vec![0.0; out_ch * in_ch * kernel * kernel],
                        b: vec![0.0; out_ch],
                        in_ch,
                        out_ch,
                        kernel,
                    });
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::Norm { channels } => {
                    let ok = match shape {
                        ShapeState::Map { c, .. } => c == channels,
                        ShapeState::Flat { d } => d == channels,
                    };
                    if !ok {
                        return Err(mismatch(format!("{} channels", channels), format!("{:?}", shape)));
                    }
                    layers.push(Layer::Norm(NormState::identity(channels, 0.05, 0.01)?));
                }
                LayerSpec::Flatten => match shape {
                    ShapeState::Map { c, h, w } => {
                        layers.push(Layer::Flatten);
                        shape = ShapeState::Flat { d: c * h * w };
                    }
                    other => return Err(mismatch("map input".into(), format!("{:?}", other))),
                },
            }
        }
        match shape {
            ShapeState::Flat { d } if d == num_classes => {}
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "network output {:?} does not match {} classes",
                    other, num_classes
                )))
            }
        }
        Ok(Network {
            layers,
            input_shape,
            num_classes,
            version: 0,
        })
    }

    /// He-normal weight initialization; biases zero, normalization identity.
    pub fn randomize_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dense { w, in_dim, .. } => {
                    let std = (2.0 / *in_dim as f64).sqrt();
                    for v in w.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (z * std) as f32;
                    }
                }
                Layer::Conv2d { w, in_ch, kernel, .. } => {
                    let fan_in = *in_ch * *kernel * *kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in w.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (z * std) as f32;
                    }
                }
                _ => {}
            }
        }
        self.version += 1;
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { in_dim, out_dim, .. } => LayerSpec::Dense {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                },
                Layer::Conv2d { in_ch, out_ch, kernel, .. } => LayerSpec::Conv2d {
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::Norm(s) => LayerSpec::Norm {
                    channels: s.channels(),
                },
                Layer::Flatten => LayerSpec::Flatten,
            })
            .collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_len()).sum()
    }

    /// Contiguous blocks of the flat parameter vector: per layer, weights then
    /// bias, or gamma then beta for normalization layers.
    pub fn param_layout(&self) -> Vec<ParamRange> {
        let mut out = Vec::new();
        let mut offset = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut push = |kind, len: usize, offset: &mut usize| {
                out.push(ParamRange {
                    layer: i,
                    kind,
                    offset: *offset,
                    len,
                });
                *offset += len;
            };
            match layer {
                Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => {
                    push(ParamKind::Weight, w.len(), &mut offset);
                    push(ParamKind::Bias, b.len(), &mut offset);
                }
                Layer::Norm(s) => {
                    push(ParamKind::Gamma, s.gamma.len(), &mut offset);
                    push(ParamKind::Beta, s.beta.len(), &mut offset);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => {
                    out.extend_from_slice(w);
                    out.extend_from_slice(b);
                }
                Layer::Norm(s) => {
                    out.extend_from_slice(&s.gamma);
                    out.extend_from_slice(&s.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(CoreError::LengthMismatch {
                context: "set_params_flat".into(),
                left: self.param_count(),
                right: params.len(),
            });
        }
        let mut at = 0usize;
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dense { w, b, .. } | Layer::Conv2d { w, b, .. } => {
                    w.copy_from_slice(&params[at..at + w.len()]);
                    at += w.len();
                    b.copy_from_slice(&params[at..at + b.len()]);
                    at += b.len();
                }
                Layer::Norm(s) => {
                    s.gamma.copy_from_slice(&params[at..at + s.gamma.len()]);
                    at += s.gamma.len();
                    s.beta.copy_from_slice(&params[at..at + s.beta.len()]);
                    at += s.beta.len();
                }
                _ => {}
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn norm_states(&self) -> Vec<&NormState> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn norm_states_mut(&mut self) -> Vec<&mut NormState> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Norm(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Set the EMA rate and alignment step size on every normalization layer.
    pub fn set_norm_hyper(&mut self, nu_b: f64, eta_t: f64) -> Result<()> {
        for s in self.norm_states_mut() {
            s.nu_b = nu_b;
            s.eta_t = eta_t;
            s.validate()?;
        }
        Ok(())
    }

    /// Initialize the target statistics from the source statistics.
    pub fn reset_target_to_source(&mut self) {
        for s in self.norm_states_mut() {
            s.reset_target_to_source();
        }
    }

    /// Copy target statistics (only) from a same-architecture network.
    pub fn copy_target_stats_from(&mut self, other: &Network) -> Result<()> {
        let theirs: Vec<(Vec<f64>, Vec<f64>)> = other
            .norm_states()
            .iter()
            .map(|s| (s.mu_t.clone(), s.sigma_t.clone()))
            .collect();
        let mut mine = self.norm_states_mut();
        if mine.len() != theirs.len() {
            return Err(CoreError::LengthMismatch {
                context: "copy_target_stats_from: norm layer count".into(),
                left: mine.len(),
                right: theirs.len(),
            });
        }
        for (s, (mu, sigma)) in mine.iter_mut().zip(theirs) {
            if s.mu_t.len() != mu.len() {
                return Err(CoreError::LengthMismatch {
                    context: "copy_target_stats_from: channels".into(),
                    left: s.mu_t.len(),
                    right: mu.len(),
                });
            }
            s.mu_t = mu;
            s.sigma_t = sigma;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match (self.input_shape.as_slice(), x.shape()) {
            ([c, h, w], [_, xc, xh, xw]) => (c, h, w) == (xc, xh, xw),
            ([d], [_, xd]) => d == xd,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::ShapeMismatch {
                layer: 0,
                name: "input".into(),
                expected: format!("batch of {:?}", self.input_shape),
                actual: format!("{:?}", x.shape()),
            })
        }
    }

    /// Forward pass returning logits of shape `B x num_classes`.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    /// Forward pass recording everything [`Network::backward`] needs.
    pub fn forward_traced(&self, x: &Tensor, mode: NormMode) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, trace, bs) = self.apply_layer(i, layer, cur, mode)?;
            traces.push(trace);
            batch_stats.push(bs);
            cur = next;
        }
        cur.check_finite("forward output")?;
        let output_shape = cur.shape().to_vec();
        Ok((
            cur,
            ForwardTrace {
                version: self.version,
                traces,
                batch_stats,
                output_shape,
            },
        ))
    }

    /// One adaptation forward pass: at every normalization layer, compute the
    /// batch statistics of the incoming activations, fold them into the
    /// target statistics, optionally take one alignment step, and normalize
    /// with the updated target statistics.
    pub fn forward_adapt(&mut self, x: &Tensor, align: bool) -> Result<(Tensor, AdaptDiag)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut per_layer_w2 = Vec::new();
        let mut seen_stats = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = match layer {
                Layer::Norm(state) => {
                    let bs = compute_batch_stats(&cur)?;
                    ema_update(state, &bs)?;
                    if align {
                        align_step(state);
                    }
                    let w2 = wasserstein_sq(state);
                    per_layer_w2.push(w2.iter().sum::<f64>() / w2.len() as f64);
                    seen_stats.push(bs);
                    let (out, _) = norm_forward(&cur, state, NormMode::EvalTarget, i)?;
                    out
                }
                other => apply_static_layer(i, other, &cur)?,
            };
        }
        cur.check_finite("adaptation forward output")?;
        Ok((
            cur,
            AdaptDiag {
                per_layer_w2,
                batch_stats: seen_stats,
            },
        ))
    }

    /// Fold the batch statistics recorded by a `TrainBatch` forward into the
    /// source statistics: `stat <- (1 - momentum) stat + momentum batch`.
    pub fn update_source_stats(&mut self, trace: &ForwardTrace, momentum: f64) -> Result<()> {
        let stats: Vec<Option<BatchStats>> = trace
            .traces
            .iter()
            .zip(&trace.batch_stats)
            .filter(|(t, _)| matches!(t, LayerTrace::Norm { .. }))
            .map(|(_, s)| s.clone())
            .collect();
        let mut states = self.norm_states_mut();
        if states.len() != stats.len() {
            return Err(CoreError::LengthMismatch {
                context: "update_source_stats: norm layer count".into(),
                left: states.len(),
                right: stats.len(),
            });
        }
        for (state, bs) in states.iter_mut().zip(stats) {
            let bs = bs.ok_or_else(|| {
                CoreError::InvalidConfig("source statistics need a TrainBatch trace".into())
            })?;
            for c in 0..state.mu_s.len() {
                state.mu_s[c] = (1.0 - momentum) * state.mu_s[c] + momentum * bs.mu_b[c];
                let var_s = state.sigma_s[c] * state.sigma_s[c];
                let var_b = bs.sigma_b[c] * bs.sigma_b[c];
                state.sigma_s[c] = ((1.0 - momentum) * var_s + momentum * var_b)
                    .sqrt()
                    .max(crate::resibn::SIGMA_FLOOR);
            }
        }
        Ok(())
    }

    fn apply_layer(
        &self,
        index: usize,
        layer: &Layer,
        x: Tensor,
        mode: NormMode,
    ) -> Result<(Tensor, LayerTrace, Option<BatchStats>)> {
        match layer {
            Layer::Norm(state) => {
                let (out, aux) = norm_forward(&x, state, mode, index)?;
                let (x_hat, sigma, bs) = aux;
                Ok((
                    out,
                    LayerTrace::Norm {
                        x_hat,
                        sigma,
                        train_batch: mode == NormMode::TrainBatch,
                    },
                    bs,
                ))
            }
            other => {
                let out = apply_static_layer(index, other, &x)?;
                let trace = match other {
                    Layer::Dense { .. } => LayerTrace::Dense { input: x },
                    Layer::Conv2d { .. } => LayerTrace::Conv2d { input: x },
                    Layer::Relu => LayerTrace::Relu { input: x },
                    Layer::Flatten => LayerTrace::Flatten {
                        in_shape: x.shape().to_vec(),
                    },
                    Layer::Norm(_) => unreachable!(),
                };
                Ok((out, trace, None))
            }
        }
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the logits is `loss_grad`. Statistics receive no gradient: the tape
    /// covers exactly the flat parameter vector.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<GradientTape> {
        if trace.version != self.version {
            return Err(CoreError::StaleTrace);
        }
        if loss_grad.shape() != trace.output_shape.as_slice() {
            return Err(CoreError::ShapeMismatch {
                layer: self.layers.len(),
                name: "loss gradient".into(),
                expected: format!("{:?}", trace.output_shape),
                actual: format!("{:?}", loss_grad.shape()),
            });
        }
        let layout = self.param_layout();
        let mut grads = vec![0.0f32; self.param_count()];
        let mut dy = loss_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let ranges: Vec<&ParamRange> = layout.iter().filter(|r| r.layer == i).collect();
            dy = backward_layer(layer, &trace.traces[i], &dy, &ranges, &mut grads)?;
        }
        Ok(GradientTape {
            grads,
            version: self.version,
        })
    }
}

fn apply_static_layer(index: usize, layer: &Layer, x: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Dense { w, b, in_dim, out_dim } => {
            let (rows, cols) = x.dims2().map_err(|_| CoreError::ShapeMismatch {
                layer: index,
                name: "dense".into(),
                expected: format!("B x {}", in_dim),
                actual: format!("{:?}", x.shape()),
            })?;
            if cols != *in_dim {
                return Err(CoreError::ShapeMismatch {
                    layer: index,
                    name: "dense".into(),
                    expected: format!("B x {}", in_dim),
                    actual: format!("{:?}", x.shape()),
                });
            }
            let mut out = vec![0.0f32; rows * out_dim];
            for r in 0..rows {
                let xin = &x.data()[r * in_dim..(r + 1) * in_dim];
                for o in 0..*out_dim {
                    let wrow = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = b[o] as f64;
                    for (xv, wv) in xin.iter().zip(wrow) {
                        acc += *xv as f64 * *wv as f64;
                    }
                    out[r * out_dim + o] = acc as f32;
                }
            }
            Tensor::new(vec![rows, *out_dim], out)
        }
        Layer::Conv2d { w, b, in_ch, out_ch, kernel } => {
            let (bs, c, h, wd) = x.dims4().map_err(|_| CoreError::ShapeMismatch {
                layer: index,
                name: "conv2d".into(),
                expected: format!("B x {} x H x W", in_ch),
                actual: format!("{:?}", x.shape()),
            })?;
            if c != *in_ch || x.rank() != 4 {
                return Err(CoreError::ShapeMismatch {
                    layer: index,
                    name: "conv2d".into(),
                    expected: format!("B x {} x H x W", in_ch),
                    actual: format!("{:?}", x.shape()),
                });
            }
            let k = *kernel;
            let pad = k / 2;
            let mut out = vec![0.0f32; bs * out_ch * h * wd];
            let data = x.data();
            for bi in 0..bs {
                for oc in 0..*out_ch {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let mut acc = b[oc] as f64;
                            for ic in 0..*in_ch {
                                let in_base = (bi * c + ic) * h * wd;
                                let w_base = ((oc * in_ch) + ic) * k * k;
                                for ky in 0..k {
                                    let iy = oy + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..k {
                                        let ix = ox + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        acc += data[in_base + iy * wd + ix] as f64
                                            * w[w_base + ky * k + kx] as f64;
                                    }
                                }
                            }
                            out[((bi * out_ch + oc) * h + oy) * wd + ox] = acc as f32;
                        }
                    }
                }
            }
            Tensor::new(vec![bs, *out_ch, h, wd], out)
        }
        Layer::Relu => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        Layer::Flatten => {
            let (b, c, h, w) = x.dims4()?;
            Tensor::new(vec![b, c * h * w], x.data().to_vec())
        }
        Layer::Norm(_) => unreachable!("norm handled by caller"),
    }
}

type NormAux = (Tensor, Vec<f64>, Option<BatchStats>);

/// Normalization forward shared by every mode. Returns the output plus the
/// pre-affine normalized activations and the deviations used (for backward).
fn norm_forward(x: &Tensor, state: &NormState, mode: NormMode, index: usize) -> Result<(Tensor, NormAux)> {
    let (b, c, h, w) = x.dims4()?;
    if c != state.channels() {
        return Err(CoreError::ShapeMismatch {
            layer: index,
            name: "norm".into(),
            expected: format!("{} channels", state.channels()),
            actual: format!("{:?}", x.shape()),
        });
    }
    let (mu, sigma, bs) = match mode {
        NormMode::TrainBatch => {
            let bs = compute_batch_stats(x)?;
            (bs.mu_b.clone(), bs.sigma_b.clone(), Some(bs))
        }
        NormMode::EvalTarget => (state.mu_t.clone(), state.sigma_t.clone(), None),
        NormMode::EvalSource => (state.mu_s.clone(), state.sigma_s.clone(), None),
    };
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    let mut x_hat = vec![0.0f32; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (sigma[ci] * sigma[ci] + state.eps).sqrt();
        let g = state.gamma[ci] as f64;
        let be = state.beta[ci] as f64;
        let m = mu[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for k in 0..plane {
                let xh = (x.data()[base + k] as f64 - m) * inv;
                x_hat[base + k] = xh as f32;
                out[base + k] = (g * xh + be) as f32;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        (Tensor::new(x.shape().to_vec(), x_hat)?, sigma, bs),
    ))
}

fn backward_layer(
    layer: &Layer,
    trace: &LayerTrace,
    dy: &Tensor,
    ranges: &[&ParamRange],
    grads: &mut [f32],
) -> Result<Tensor> {
    match (layer, trace) {
        (Layer::Dense { w, in_dim, out_dim, .. }, LayerTrace::Dense { input }) => {
            let (rows, _) = input.dims2()?;
            let (wr, br) = (ranges[0], ranges[1]);
            debug_assert_eq!(wr.kind, ParamKind::Weight);
            for o in 0..*out_dim {
                let mut db = 0.0f64;
                for r in 0..rows {
                    db += dy.data()[r * out_dim + o] as f64;
                }
                grads[br.offset + o] = db as f32;
            }
            for o in 0..*out_dim {
                for i in 0..*in_dim {
                    let mut acc = 0.0f64;
                    for r in 0..rows {
                        acc += dy.data()[r * out_dim + o] as f64
                            * input.data()[r * in_dim + i] as f64;
                    }
                    grads[wr.offset + o * in_dim + i] = acc as f32;
                }
            }
            let mut dx = vec![0.0f32; rows * in_dim];
            for r in 0..rows {
                for i in 0..*in_dim {
                    let mut acc = 0.0f64;
                    for o in 0..*out_dim {
                        acc += dy.data()[r * out_dim + o] as f64 * w[o * in_dim + i] as f64;
                    }
                    dx[r * in_dim + i] = acc as f32;
                }
            }
            Tensor::new(vec![rows, *in_dim], dx)
        }
        (Layer::Conv2d { w, in_ch, out_ch, kernel, .. }, LayerTrace::Conv2d { input }) => {
            let (bs, _, h, wd) = input.dims4()?;
            let k = *kernel;
            let pad = k / 2;
            let (wr, br) = (ranges[0], ranges[1]);
            let dyd = dy.data();
            let xd = input.data();
            for oc in 0..*out_ch {
                let mut db = 0.0f64;
                for bi in 0..bs {
                    let base = (bi * out_ch + oc) * h * wd;
                    for v in &dyd[base..base + h * wd] {
                        db += *v as f64;
                    }
                }
                grads[br.offset + oc] = db as f32;
            }
            for oc in 0..*out_ch {
                for ic in 0..*in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0f64;
                            for bi in 0..bs {
                                let dy_base = (bi * out_ch + oc) * h * wd;
                                let in_base = (bi * in_ch + ic) * h * wd;
                                for oy in 0..h {
                                    let iy = oy + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for ox in 0..wd {
                                        let ix = ox + kx;
                                        if ix < pad || ix - pad >= wd {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        acc += dyd[dy_base + oy * wd + ox] as f64
                                            * xd[in_base + iy * wd + ix] as f64;
                                    }
                                }
                            }
                            grads[wr.offset + ((oc * in_ch + ic) * k + ky) * k + kx] = acc as f32;
                        }
                    }
                }
            }
            let mut dx = vec![0.0f32; input.len()];
            for bi in 0..bs {
                for ic in 0..*in_ch {
                    for iy in 0..h {
                        for ix in 0..wd {
                            let mut acc = 0.0f64;
                            for oc in 0..*out_ch {
                                let dy_base = (bi * out_ch + oc) * h * wd;
                                let w_base = (oc * in_ch + ic) * k * k;
                                for ky in 0..k {
                                    // oy + ky = iy + pad
                                    let oy = iy + pad;
                                    if oy < ky || oy - ky >= h {
                                        continue;
                                    }
                                    let oy = oy - ky;
                                    for kx in 0..k {
                                        let ox = ix + pad;
                                        if ox < kx || ox - kx >= wd {
                                            continue;
                                        }
                                        let ox = ox - kx;
                                        acc += dyd[dy_base + oy * wd + ox] as f64
                                            * w[w_base + ky * k + kx] as f64;
                                    }
                                }
                            }
                            dx[(bi * in_ch + ic) * h * wd + iy * wd + ix] = acc as f32;
                        }
                    }
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (Layer::Relu, LayerTrace::Relu { input }) => {
            let mut dx = dy.clone();
            for (g, x) in dx.data_mut().iter_mut().zip(input.data()) {
                if *x <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(dx)
        }
        (Layer::Flatten, LayerTrace::Flatten { in_shape }) => {
            Tensor::new(in_shape.clone(), dy.data().to_vec())
        }
        (Layer::Norm(state), LayerTrace::Norm { x_hat, sigma, train_batch }) => {
            let (b, c, h, w) = x_hat.dims4()?;
            let plane = h * w;
            let n = (b * plane) as f64;
            let (gr, br) = (ranges[0], ranges[1]);
            debug_assert_eq!(gr.kind, ParamKind::Gamma);
            let dyd = dy.data();
            let xh = x_hat.data();
            let mut dx = vec![0.0f32; dy.len()];
            for ci in 0..c {
                let inv = 1.0 / (sigma[ci] * sigma[ci] + state.eps).sqrt();
                let g = state.gamma[ci] as f64;
                let mut dgamma = 0.0f64;
                let mut dbeta = 0.0f64;
                let mut sum_dxh = 0.0f64;
                let mut sum_dxh_xh = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for k in 0..plane {
                        let d = dyd[base + k] as f64;
                        let xv = xh[base + k] as f64;
                        dgamma += d * xv;
                        dbeta += d;
                        let dxh = d * g;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xv;
                    }
                }
                grads[gr.offset + ci] = dgamma as f32;
                grads[br.offset + ci] = dbeta as f32;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for k in 0..plane {
                        let dxh = dyd[base + k] as f64 * g;
                        let v = if *train_batch {
                            // Batch statistics depend on the input; the full
                            // chain through mean and variance applies.
                            inv / n * (n * dxh - sum_dxh - xh[base + k] as f64 * sum_dxh_xh)
                        } else {
                            dxh * inv
                        };
                        dx[base + k] = v as f32;
                    }
                }
            }
            Tensor::new(dy.shape().to_vec(), dx)
        }
        _ => Err(CoreError::InvalidConfig(
            "forward trace does not match layer sequence".into(),
        )),
    }
}

/// Row-wise softmax with max subtraction, accumulated in `f64`.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let probs = softmax_rows_f64(logits)?;
    let (rows, cols) = logits.dims2()?;
    let mut out = vec![0.0f32; rows * cols];
    for (r, row) in probs.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            out[r * cols + c] = *p as f32;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Row-wise softmax returning `f64` probabilities.
pub fn softmax_rows_f64(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (rows, cols) = logits.dims2()?;
    if cols == 0 {
        return Err(CoreError::EmptyInput("softmax over zero classes".into()));
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
        let mut exps: Vec<f64> = row.iter().map(|v| ((*v as f64) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for e in exps.iter_mut() {
            *e /= sum;
        }
        out.push(exps);
    }
    Ok(out)
}

/// Cross entropy `-sum p log q` in nats, with `q` clamped to 1e-12 before the
/// logarithm.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::LengthMismatch {
            context: "cross_entropy".into(),
            left: p.len(),
            right: q.len(),
        });
    }
    let mut acc = 0.0f64;
    for (pv, qv) in p.iter().zip(q) {
        acc -= pv * qv.max(1e-12).ln();
    }
    Ok(acc)
}

/// Mean cross-entropy of `softmax(logits)` against fixed target
/// distributions, together with its gradient with respect to the logits:
/// `(softmax(z) - p) / B` per row.
pub fn mean_cross_entropy_grad(targets: &[Vec<f64>], logits: &Tensor) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits.dims2()?;
    if targets.len() != rows {
        return Err(CoreError::LengthMismatch {
            context: "cross-entropy targets".into(),
            left: rows,
            right: targets.len(),
        });
    }
    let probs = softmax_rows_f64(logits)?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; rows * cols];
    let scale = 1.0 / rows as f64;
    for r in 0..rows {
        loss += cross_entropy(&targets[r], &probs[r])?;
        for c in 0..cols {
            grad[r * cols + c] = ((probs[r][c] - targets[r][c]) * scale) as f32;
        }
    }
    Ok((loss * scale, Tensor::new(vec![rows, cols], grad)?))
}

/// Adam hyperparameters. The first-moment coefficient is 0.9; the
/// second-moment coefficient and epsilon use the common defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn raw(&self) -> (&[f32], &[f32], u64) {
        (&self.m, &self.v, self.t)
    }

    pub(crate) fn from_raw(m: Vec<f32>, v: Vec<f32>, t: u64) -> Self {
        AdamState { m, v, t }
    }
}

/// Result of one optimizer step. A non-finite gradient skips the step and
/// leaves both the parameters and the moments untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOutcome {
    pub applied: bool,
    pub grad_norm: f64,
}

pub fn adam_step(
    net: &mut Network,
    tape: &GradientTape,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<AdamOutcome> {
    let n = net.param_count();
    if tape.grads.len() != n {
        return Err(CoreError::LengthMismatch {
            context: "adam gradient length".into(),
            left: n,
            right: tape.grads.len(),
        });
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(CoreError::LengthMismatch {
            context: "adam state length".into(),
            left: n,
            right: state.m.len(),
        });
    }
    if !tape.all_finite() {
        return Ok(AdamOutcome {
            applied: false,
            grad_norm: f64::NAN,
        });
    }
    let mut params = net.params_flat();
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut norm_sq = 0.0f64;
    for i in 0..n {
        let g = tape.grads[i] as f64;
        norm_sq += g * g;
        let m = cfg.beta1 * state.m[i] as f64 + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        params[i] = (params[i] as f64 - update) as f32;
    }
    net.set_params_flat(&params)?;
    Ok(AdamOutcome {
        applied: true,
        grad_norm: norm_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dense_net(seed: u64) -> Network {
        let mut net = Network::new(
            vec![4],
            3,
            &[
                LayerSpec::Dense { in_dim: 4, out_dim: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 5, out_dim: 3 },
            ],
        )
        .unwrap();
        net.randomize_params(seed);
        net
    }

    #[test]
    fn zero_weight_dense_gives_zero_logits() {
        let net = Network::new(
            vec![4],
            3,
            &[LayerSpec::Dense { in_dim: 4, out_dim: 3 }],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        let y = net.forward(&x, NormMode::EvalSource).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_norm_eval_target_is_near_identity() {
        // gamma=1, beta=0, mu_t=0, sigma_t=1 -> output equals input up to the
        // epsilon scaling in the denominator.
        let net = Network::new(vec![2, 2, 2], 8, &[LayerSpec::Norm { channels: 2 }, LayerSpec::Flatten])
            .unwrap();
        let x = Tensor::new(
            vec![1, 2, 2, 2],
            vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 3.0],
        )
        .unwrap();
        let y = net.forward(&x, NormMode::EvalTarget).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = toy_dense_net(3);
        let x = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = net.forward(&x, NormMode::EvalSource).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("layer 0"), "unexpected message: {}", msg);
    }

    #[test]
    fn backward_requires_matching_forward() {
        let mut net = toy_dense_net(5);
        let x = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, trace) = net.forward_traced(&x, NormMode::EvalSource).unwrap();
        net.randomize_params(6); // invalidates the trace
        let dl = Tensor::filled(vec![1, 3], 1.0);
        assert!(matches!(net.backward(&trace, &dl), Err(CoreError::StaleTrace)));
    }

    #[test]
    fn scalar_linear_chain_rule() {
        // y = w x, loss = y, x = 3 -> dL/dw = 3
        let mut net = Network::new(vec![1], 1, &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }])
            .unwrap();
        net.set_params_flat(&[2.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let (y, trace) = net.forward_traced(&x, NormMode::EvalSource).unwrap();
        assert_eq!(y.data()[0], 6.0);
        let tape = net
            .backward(&trace, &Tensor::filled(vec![1, 1], 1.0))
            .unwrap();
        assert_eq!(tape.grads()[0], 3.0); // dL/dw
        assert_eq!(tape.grads()[1], 1.0); // dL/db
    }

    #[test]
    fn constant_loss_gives_zero_tape() {
        let net = toy_dense_net(7);
        let x = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
        let (_, trace) = net.forward_traced(&x, NormMode::EvalSource).unwrap();
        let tape = net
            .backward(&trace, &Tensor::zeros(vec![2, 3]))
            .unwrap();
        assert!(tape.grads().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -10.0, 0.0, 10.0, 5.0]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for r in 0..2 {
            let s: f32 = p.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_known_values() {
        let onehot = vec![0.0, 1.0, 0.0];
        assert!(cross_entropy(&onehot, &onehot).unwrap() <= 1e-11);
        let uniform = vec![1.0 / 3.0; 3];
        assert!((cross_entropy(&onehot, &uniform).unwrap() - 3.0f64.ln()).abs() < 1e-12);
        // p = [0.5, 0.5], q = [0.25, 0.75] -> 0.836988...
        let v = cross_entropy(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - 0.8369882167858556).abs() < 1e-12);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = toy_dense_net(11);
        let before = net.params_flat();
        let tape = GradientTape::zeros_like(&net);
        let mut st = AdamState::new(net.param_count());
        let out = adam_step(&mut net, &tape, &mut st, &AdamConfig::default()).unwrap();
        assert!(out.applied);
        assert_eq!(net.params_flat(), before);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut net = Network::new(vec![1], 1, &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }])
            .unwrap();
        net.set_params_flat(&[1.0, 0.0]).unwrap();
        let mut st = AdamState::new(2);
        let cfg = AdamConfig::default();
        let mut prev = 1.0f32;
        for _ in 0..50 {
            let tape = GradientTape {
                grads: vec![0.5, 0.0],
                version: net.version(),
            };
            adam_step(&mut net, &tape, &mut st, &cfg).unwrap();
            let now = net.params_flat()[0];
            assert!(now < prev, "positive gradient must decrease the parameter");
            prev = now;
        }
    }

    #[test]
    fn adam_skips_non_finite_gradient() {
        let mut net = toy_dense_net(13);
        let before = net.params_flat();
        let mut grads = vec![0.0f32; net.param_count()];
        grads[0] = f32::NAN;
        let tape = GradientTape {
            grads,
            version: net.version(),
        };
        let mut st = AdamState::new(net.param_count());
        let out = adam_step(&mut net, &tape, &mut st, &AdamConfig::default()).unwrap();
        assert!(!out.applied);
        assert_eq!(net.params_flat(), before);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Single-parameter quadratic (theta - 2)^2, lr = 1e-2, 2000 steps.
        let mut net = Network::new(vec![1], 1, &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }])
            .unwrap();
        net.set_params_flat(&[0.0, 0.0]).unwrap();
        let mut st = AdamState::new(2);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        for _ in 0..2000 {
            let theta = net.params_flat()[0];
            let tape = GradientTape {
                grads: vec![2.0 * (theta - 2.0), 0.0],
                version: net.version(),
            };
            adam_step(&mut net, &tape, &mut st, &cfg).unwrap();
        }
        assert!((net.params_flat()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = toy_dense_net(17);
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f32 * 0.1 - 0.5).collect()).unwrap();
        let a = net.forward(&x, NormMode::EvalSource).unwrap();
        let b = net.forward(&x, NormMode::EvalSource).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_layout_covers_affine_only_kinds() {
        let net = Network::new(
            vec![3, 4, 4],
            10,
            &[
                LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 3 },
                LayerSpec::Norm { channels: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 32, out_dim: 10 },
            ],
        )
        .unwrap();
        let layout = net.param_layout();
        let total: usize = layout.iter().map(|r| r.len).sum();
        assert_eq!(total, net.param_count());
        let kinds: Vec<ParamKind> = layout.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ParamKind::Weight,
                ParamKind::Bias,
                ParamKind::Gamma,
                ParamKind::Beta,
                ParamKind::Weight,
                ParamKind::Bias
            ]
        );
    }
}
