//! Teacher-student self-training over memory-bank snapshots.
//!
//! The online step pipeline, per incoming test batch:
//!
//! 1. the teacher runs one statistics-updating forward pass (per
//!    normalization layer: batch statistics, EMA into the target statistics,
//!    optionally one alignment step, then normalization with the updated
//!    target statistics) and its predictions are the served outputs;
//! 2. every sample is offered to the memory bank with the teacher's
//!    predicted distribution;
//! 3. on the adaptation cadence, the student takes one optimizer step on the
//!    cross-entropy between teacher predictions on weak views and student
//!    predictions on strong views of the bank snapshot, and the teacher
//!    parameters move by EMA toward the student.
//!
//! Gradients flow only into student weights, biases, and the normalization
//! affine parameters; statistics and teacher parameters are updated by their
//! own rules, never by the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::entrobank::Bank;
use crate::error::{CoreError, Result};
use crate::net::{
    adam_step, mean_cross_entropy_grad, softmax_rows_f64, AdamConfig, AdamState, GradientTape,
    Network, NormMode, ParamKind,
};
use crate::resibn::{align_step, BatchStats};
use crate::stream::mix_seed;
use crate::tensor::{argmax_rows, Tensor};

/// Strong-augmentation magnitudes. Zeroing every field makes the strong view
/// the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongAugConfig {
    /// Per-channel scale drawn from `U[1 - s, 1 + s]`.
    pub jitter_scale: f32,
    /// Per-channel shift drawn from `U[-s, s]`.
    pub jitter_shift: f32,
    /// Rotation angle drawn from `U[-deg, deg]`.
    pub rotate_deg: f32,
    /// Translation drawn from `U[-f, f]` of the spatial extent, per axis.
    pub translate_frac: f32,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub noise_sigma: f32,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        StrongAugConfig {
            jitter_scale: 0.1,
            jitter_shift: 0.1,
            rotate_deg: 15.0,
            translate_frac: 0.1,
            flip_prob: 0.5,
            blur_prob: 0.5,
            noise_sigma: 0.02,
        }
    }
}

/// Weak and strong augmentation views, deterministic given the seed and the
/// call index.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub rng_seed: u64,
    pub strong: StrongAugConfig,
    /// Spatial size the weak view resizes to (the model input size).
    pub target_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Strong,
}

impl AugmentationPolicy {
    pub fn new(rng_seed: u64, target_hw: (usize, usize)) -> Self {
        AugmentationPolicy {
            rng_seed,
            strong: StrongAugConfig::default(),
            target_hw,
        }
    }

    /// Augment a batch (or single sample). Strong views draw their randomness
    /// from `(rng_seed, call_index, sample_index)`, so the same call index
    /// reproduces the same views.
    pub fn augment(&self, which: AugKind, x: &Tensor, call_index: u64) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        match which {
            AugKind::Weak => {
                if (h, w) == self.target_hw {
                    return Ok(x.clone());
                }
                resize_bilinear(x, self.target_hw)
            }
            AugKind::Strong => {
                let mut out = vec![0.0f32; b * c * self.target_hw.0 * self.target_hw.1];
                let stride = c * h * w;
                for bi in 0..b {
                    let sample = &x.data()[bi * stride..(bi + 1) * stride];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        mix_seed(self.rng_seed, call_index),
                        bi as u64 + 1,
                    ));
                    let view = self.strong_sample(sample, c, h, w, &mut rng);
                    out[bi * stride..(bi + 1) * stride].copy_from_slice(&view);
                }
                Tensor::new(vec![b, c, h, w], out)
            }
        }
    }

    fn strong_sample(
        &self,
        sample: &[f32],
        c: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f32> {
        let cfg = &self.strong;
        let plane = h * w;
        let mut cur = sample.to_vec();

        // Channel jitter: scale and shift per channel.
        for ci in 0..c {
            let us: f32 = rng.gen();
            let uo: f32 = rng.gen();
            let scale = 1.0 + cfg.jitter_scale * (2.0 * us - 1.0);
            let shift = cfg.jitter_shift * (2.0 * uo - 1.0);
            for v in &mut cur[ci * plane..(ci + 1) * plane] {
                *v = *v * scale + shift;
            }
        }

        // Small rotation and translation, bilinear with zero padding.
        let ua: f32 = rng.gen();
        let ux: f32 = rng.gen();
        let uy: f32 = rng.gen();
        let angle = (cfg.rotate_deg * (2.0 * ua - 1.0)).to_radians();
        let tx = cfg.translate_frac * (2.0 * ux - 1.0) * w as f32;
        let ty = cfg.translate_frac * (2.0 * uy - 1.0) * h as f32;
        if angle != 0.0 || tx != 0.0 || ty != 0.0 {
            cur = affine_sample(&cur, c, h, w, angle, tx, ty);
        }

        if rng.gen::<f64>() < cfg.flip_prob {
            for ci in 0..c {
                for y in 0..h {
                    let row = &mut cur[ci * plane + y * w..ci * plane + (y + 1) * w];
                    row.reverse();
                }
            }
        }

        if rng.gen::<f64>() < cfg.blur_prob {
            cur = blur3x3(&cur, c, h, w);
        }

        if cfg.noise_sigma > 0.0 {
            for v in cur.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += cfg.noise_sigma * n as f32;
            }
        }
        cur
    }
}

fn resize_bilinear(x: &Tensor, (th, tw): (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = vec![0.0f32; b * c * th * tw];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let dst = &mut out[(bi * c + ci) * th * tw..(bi * c + ci + 1) * th * tw];
            for y in 0..th {
                for xcol in 0..tw {
                    let sy = (y as f32 + 0.5) * h as f32 / th as f32 - 0.5;
                    let sx = (xcol as f32 + 0.5) * w as f32 / tw as f32 - 0.5;
                    dst[y * tw + xcol] = bilinear_at(src, h, w, sy, sx);
                }
            }
        }
    }
    Tensor::new(vec![b, c, th, tw], out)
}

fn bilinear_at(src: &[f32], h: usize, w: usize, sy: f32, sx: f32) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let dy = sy - y0;
    let dx = sx - x0;
    let mut acc = 0.0f32;
    for (oy, wy) in [(0isize, 1.0 - dy), (1, dy)] {
        for (ox, wx) in [(0isize, 1.0 - dx), (1, dx)] {
            let yy = y0 as isize + oy;
            let xx = x0 as isize + ox;
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue; // zero padding
            }
            acc += wy * wx * src[yy as usize * w + xx as usize];
        }
    }
    acc
}

fn affine_sample(sample: &[f32], c: usize, h: usize, w: usize, angle: f32, tx: f32, ty: f32) -> Vec<f32> {
    let plane = h * w;
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0f32; sample.len()];
    for ci in 0..c {
        let src = &sample[ci * plane..(ci + 1) * plane];
        for y in 0..h {
            for xcol in 0..w {
                // Inverse map of rotate-about-center then translate.
                let dy = y as f32 - cy - ty;
                let dx = xcol as f32 - cx - tx;
                let sy = cos * dy + sin * dx + cy;
                let sx = -sin * dy + cos * dx + cx;
                out[ci * plane + y * w + xcol] = bilinear_at(src, h, w, sy, sx);
            }
        }
    }
    out
}

fn blur3x3(sample: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = vec![0.0f32; sample.len()];
    for ci in 0..c {
        let src = &sample[ci * plane..(ci + 1) * plane];
        let mut tmp = vec![0.0f32; plane];
        for y in 0..h {
            for xcol in 0..w {
                let l = src[y * w + reflect(xcol as isize - 1, w)];
                let m = src[y * w + xcol];
                let r = src[y * w + reflect(xcol as isize + 1, w)];
                tmp[y * w + xcol] = (l + 2.0 * m + r) / 4.0;
            }
        }
        for y in 0..h {
            for xcol in 0..w {
                let u = tmp[reflect(y as isize - 1, h) * w + xcol];
                let m = tmp[y * w + xcol];
                let d = tmp[reflect(y as isize + 1, h) * w + xcol];
                out[ci * plane + y * w + xcol] = (u + 2.0 * m + d) / 4.0;
            }
        }
    }
    out
}

/// Student and teacher sharing one architecture. The teacher's parameters
/// move only by EMA toward the student; a double-precision shadow accumulates
/// the EMA so small rates are not lost to rounding.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub student: Network,
    pub teacher: Network,
    pub(crate) teacher_shadow: Vec<f64>,
    pub nu_m: f64,
}

impl ModelPair {
    /// Duplicate a source network into student and teacher.
    pub fn from_source(source: &Network, nu_m: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&nu_m) {
            return Err(CoreError::InvalidConfig(format!(
                "nu_m must lie in [0, 1], got {}",
                nu_m
            )));
        }
        let teacher = source.clone();
        let teacher_shadow = teacher.params_flat().iter().map(|v| *v as f64).collect();
        Ok(ModelPair {
            student: source.clone(),
            teacher,
            teacher_shadow,
            nu_m,
        })
    }

    /// `theta' <- (1 - nu_m) theta' + nu_m theta` over every parameter,
    /// including the normalization affine parameters. Statistics untouched.
    pub fn teacher_ema(&mut self) -> Result<()> {
        let student = self.student.params_flat();
        if student.len() != self.teacher_shadow.len() {
            return Err(CoreError::LengthMismatch {
                context: "teacher EMA".into(),
                left: self.teacher_shadow.len(),
                right: student.len(),
            });
        }
        for (sh, st) in self.teacher_shadow.iter_mut().zip(&student) {
            *sh = (1.0 - self.nu_m) * *sh + self.nu_m * *st as f64;
        }
        let f32_params: Vec<f32> = self.teacher_shadow.iter().map(|v| *v as f32).collect();
        self.teacher.set_params_flat(&f32_params)
    }

    pub fn teacher_shadow(&self) -> &[f64] {
        &self.teacher_shadow
    }
}

/// Self-training loss over a bank snapshot: mean cross-entropy of teacher
/// predictions on weak views against student predictions on strong views.
/// Teacher probabilities are constants; the returned tape holds student
/// gradients only. An empty batch is a no-op with zero loss.
pub fn self_training_loss(
    pair: &ModelPair,
    batch: &[Tensor],
    policy: &AugmentationPolicy,
    call_index: u64,
) -> Result<(f64, GradientTape)> {
    if batch.is_empty() {
        return Ok((0.0, GradientTape::zeros_like(&pair.student)));
    }
    let stacked = Tensor::stack(batch)?;
    let weak = policy.augment(AugKind::Weak, &stacked, call_index)?;
    let strong = policy.augment(AugKind::Strong, &stacked, call_index)?;
    let teacher_logits = pair.teacher.forward(&weak, NormMode::EvalTarget)?;
    let targets = softmax_rows_f64(&teacher_logits)?;
    let (student_logits, trace) = pair.student.forward_traced(&strong, NormMode::EvalTarget)?;
    let (loss, dlogits) = mean_cross_entropy_grad(&targets, &student_logits)?;
    debug_assert!(loss >= 0.0);
    let tape = pair.student.backward(&trace, &dlogits)?;
    Ok((loss, tape))
}

/// When the alignment step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignEvery {
    /// Once per test batch, inside the statistics-updating forward.
    Batch,
    /// Once per adaptation step.
    Adapt,
}

/// Which student parameters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    BnAffineOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptSettings {
    /// Adapt once every this many batches; `None` never adapts
    /// (statistics-only operation).
    pub adapt_every: Option<u64>,
    pub align_every: AlignEvery,
    pub trainable: Trainable,
    pub optimizer: AdamConfig,
    /// Record per-step audit payloads (batch statistics, student parameters).
    pub audit: bool,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        AdaptSettings {
            adapt_every: Some(1),
            align_every: AlignEvery::Batch,
            trainable: Trainable::All,
            optimizer: AdamConfig::default(),
            audit: false,
        }
    }
}

/// Per-step diagnostics. Audit payloads are populated only when requested.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    /// Mean squared Wasserstein distance per normalization layer, after the
    /// statistics update.
    pub per_layer_w2: Vec<f64>,
    pub bank_occupancy: usize,
    /// Self-training loss, when an adaptation step ran.
    pub loss: Option<f64>,
    pub adapted: bool,
    /// An adaptation step was due but skipped on a non-finite gradient.
    pub skipped_step: bool,
    pub align_applied_in_forward: bool,
    pub align_applied_at_adapt: bool,
    pub batch_stats: Option<Vec<BatchStats>>,
    pub student_params_after: Option<Vec<f32>>,
}

/// Output of one online step: served predictions plus diagnostics.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub predictions: Vec<usize>,
    pub diagnostics: StepDiagnostics,
}

/// The online adaptation engine for one stream.
#[derive(Debug)]
pub struct Adapter {
    pub pair: ModelPair,
    pub bank: Bank<Tensor>,
    pub policy: AugmentationPolicy,
    pub(crate) opt_state: AdamState,
    pub(crate) settings: AdaptSettings,
    pub(crate) batch_counter: u64,
}

impl Adapter {
    pub fn new(
        pair: ModelPair,
        bank: Bank<Tensor>,
        policy: AugmentationPolicy,
        settings: AdaptSettings,
    ) -> Self {
        let opt_state = AdamState::new(pair.student.param_count());
        Adapter {
            pair,
            bank,
            policy,
            opt_state,
            settings,
            batch_counter: 0,
        }
    }

    pub fn settings(&self) -> &AdaptSettings {
        &self.settings
    }

    pub fn batch_counter(&self) -> u64 {
        self.batch_counter
    }

    pub(crate) fn from_parts(
        pair: ModelPair,
        bank: Bank<Tensor>,
        policy: AugmentationPolicy,
        settings: AdaptSettings,
        opt_state: AdamState,
        batch_counter: u64,
    ) -> Self {
        Adapter {
            pair,
            bank,
            policy,
            opt_state,
            settings,
            batch_counter,
        }
    }

    pub(crate) fn opt_state(&self) -> &AdamState {
        &self.opt_state
    }

    /// Process the next unlabeled test batch.
    pub fn step(&mut self, batch_x: &Tensor) -> Result<StepOutput> {
        let align_in_forward = matches!(self.settings.align_every, AlignEvery::Batch);
        let (logits, adapt_diag) = self.pair.teacher.forward_adapt(batch_x, align_in_forward)?;
        let probs = softmax_rows_f64(&logits)?;
        let predictions = argmax_rows(&logits)?;

        let (b, _, _, _) = batch_x.dims4()?;
        for i in 0..b {
            self.bank.add(batch_x.sample(i)?, &probs[i])?;
        }

        self.batch_counter += 1;
        let mut loss = None;
        let mut adapted = false;
        let mut skipped = false;
        let mut align_at_adapt = false;
        let due = self
            .settings
            .adapt_every
            .map(|every| every > 0 && self.batch_counter % every == 0)
            .unwrap_or(false);
        if due {
            adapted = true;
            if matches!(self.settings.align_every, AlignEvery::Adapt) {
                for state in self.pair.teacher.norm_states_mut() {
                    align_step(state);
                }
                align_at_adapt = true;
            }
            // The student trains against the same target statistics the
            // teacher serves with.
            self.pair.student.copy_target_stats_from(&self.pair.teacher)?;
            let snapshot: Vec<Tensor> =
                self.bank.snapshot().into_iter().map(|(s, _)| s).collect();
            if snapshot.is_empty() {
                loss = Some(0.0);
            } else {
                let (l, mut tape) =
                    self_training_loss(&self.pair, &snapshot, &self.policy, self.batch_counter)?;
                if matches!(self.settings.trainable, Trainable::BnAffineOnly) {
                    mask_non_affine(&self.pair.student, &mut tape);
                }
                let outcome = adam_step(
                    &mut self.pair.student,
                    &tape,
                    &mut self.opt_state,
                    &self.settings.optimizer,
                )?;
                if outcome.applied {
                    self.pair.teacher_ema()?;
                } else {
                    skipped = true;
                }
                loss = Some(l);
            }
        }

        let diagnostics = StepDiagnostics {
            per_layer_w2: adapt_diag.per_layer_w2,
            bank_occupancy: self.bank.occupancy(),
            loss,
            adapted,
            skipped_step: skipped,
            align_applied_in_forward: align_in_forward,
            align_applied_at_adapt: align_at_adapt,
            batch_stats: self.settings.audit.then_some(adapt_diag.batch_stats),
            student_params_after: self
                .settings
                .audit
                .then(|| self.pair.student.params_flat()),
        };
        Ok(StepOutput {
            predictions,
            diagnostics,
        })
    }
}

fn mask_non_affine(net: &Network, tape: &mut GradientTape) {
    for range in net.param_layout() {
        if matches!(range.kind, ParamKind::Weight | ParamKind::Bias) {
            for g in &mut tape.grads_mut()[range.offset..range.offset + range.len] {
                *g = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;

    fn sample(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![3, 8, 8], data).unwrap()
    }

    fn identity_strong() -> StrongAugConfig {
        StrongAugConfig {
            jitter_scale: 0.0,
            jitter_shift: 0.0,
            rotate_deg: 0.0,
            translate_frac: 0.0,
            flip_prob: 0.0,
            blur_prob: 0.0,
            noise_sigma: 0.0,
        }
    }

    fn tiny_pair(seed: u64, nu_m: f64) -> ModelPair {
        let mut net = Network::new(
            vec![3, 8, 8],
            4,
            &[
                LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 3 },
                LayerSpec::Norm { channels: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 128, out_dim: 4 },
            ],
        )
        .unwrap();
        net.randomize_params(seed);
        ModelPair::from_source(&net, nu_m).unwrap()
    }

    #[test]
    fn weak_is_identity_at_matching_size() {
        let policy = AugmentationPolicy::new(1, (8, 8));
        let x = Tensor::stack(&[sample(1), sample(2)]).unwrap();
        let y = policy.augment(AugKind::Weak, &x, 0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn strong_with_zeroed_randomness_is_identity() {
        let mut policy = AugmentationPolicy::new(1, (8, 8));
        policy.strong = identity_strong();
        let x = Tensor::stack(&[sample(3)]).unwrap();
        let y = policy.augment(AugKind::Strong, &x, 5).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn strong_is_deterministic_per_call_index() {
        let policy = AugmentationPolicy::new(9, (8, 8));
        let x = Tensor::stack(&[sample(4), sample(5)]).unwrap();
        let a = policy.augment(AugKind::Strong, &x, 7).unwrap();
        let b = policy.augment(AugKind::Strong, &x, 7).unwrap();
        let c = policy.augment(AugKind::Strong, &x, 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn teacher_ema_boundary_rates() {
        let mut pair = tiny_pair(1, 0.0);
        let before = pair.teacher.params_flat();
        pair.student.randomize_params(99);
        pair.teacher_ema().unwrap();
        assert_eq!(pair.teacher.params_flat(), before);

        let mut pair = tiny_pair(2, 1.0);
        pair.student.randomize_params(100);
        pair.teacher_ema().unwrap();
        assert_eq!(pair.teacher.params_flat(), pair.student.params_flat());
    }

    #[test]
    fn teacher_ema_single_step_value() {
        // theta' = 0, theta = 1, nu_m = 1e-3 -> theta' = 0.001
        let mut net = Network::new(vec![1], 1, &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }])
            .unwrap();
        net.set_params_flat(&[0.0, 0.0]).unwrap();
        let mut pair = ModelPair::from_source(&net, 1e-3).unwrap();
        pair.student.set_params_flat(&[1.0, 1.0]).unwrap();
        pair.teacher_ema().unwrap();
        assert_eq!(pair.teacher.params_flat(), vec![0.001, 0.001]);
    }

    #[test]
    fn self_training_loss_on_shared_model_is_entropy() {
        // Teacher == student with identity augmentations: CE(p, p) = H(p).
        let pair = tiny_pair(5, 1e-3);
        let mut policy = AugmentationPolicy::new(1, (8, 8));
        policy.strong = identity_strong();
        let batch = vec![sample(6), sample(7), sample(8)];
        let (loss, _) = self_training_loss(&pair, &batch, &policy, 0).unwrap();
        let stacked = Tensor::stack(&batch).unwrap();
        let logits = pair.teacher.forward(&stacked, NormMode::EvalTarget).unwrap();
        let probs = softmax_rows_f64(&logits).unwrap();
        let mean_entropy: f64 = probs
            .iter()
            .map(|p| crate::entrobank::entropy_of(p))
            .sum::<f64>()
            / probs.len() as f64;
        assert!((loss - mean_entropy).abs() < 1e-9, "{} vs {}", loss, mean_entropy);
    }

    #[test]
    fn empty_batch_is_a_zero_loss_noop() {
        let pair = tiny_pair(9, 1e-3);
        let policy = AugmentationPolicy::new(1, (8, 8));
        let (loss, tape) = self_training_loss(&pair, &[], &policy, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(tape.grads().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_is_nonnegative() {
        let pair = tiny_pair(11, 1e-3);
        let policy = AugmentationPolicy::new(3, (8, 8));
        for i in 0..5 {
            let batch = vec![sample(20 + i), sample(40 + i)];
            let (loss, _) = self_training_loss(&pair, &batch, &policy, i).unwrap();
            assert!(loss >= 0.0);
        }
    }
}
