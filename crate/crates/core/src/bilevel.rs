//! Two-stage bilevel optimizer for adapter layer positioning.
//!
//! Stage one treats the gate parameters as upper-level variables scored on a
//! validation split while the adapter weights descend the training split;
//! the gate update uses a first-order hypergradient estimate
//!
//! ```text
//! g_alpha = grad_alpha(phi) - (grad_omega(phi) . grad_omega(f) / |grad_omega(f)|^2) grad_alpha(f)
//! ```
//!
//! which is the chain-rule hypergradient with the implicit Jacobian collapsed
//! to a rank-one outer-product approximation — no second derivative is ever
//! evaluated. After the switch epoch, the k layers with the largest gates are
//! frozen in (gates pinned, everything else gated off) and only their adapter
//! weights continue to train.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::h2c::DirectionalLossContext;
use crate::lora::{Backbone, ForwardOpts, ForwardPass, GateFreeze};
use crate::tape::{dot_data, Gradients, Tape};
use crate::tensor::Tensor;

/// First-order hypergradient for the gate parameters.
#[derive(Clone, Debug)]
pub struct HypergradientEstimate {
    pub g_alpha: Tensor,
    /// `grad_omega(phi) . grad_omega(f) / |grad_omega(f)|^2`; zero when the
    /// correction was dropped.
    pub projection_coeff: f64,
    pub grad_norm_sq: f64,
    /// True when `|grad_omega(f)|^2` fell below the guard and the correction
    /// term was suppressed, leaving `g_alpha = grad_alpha(phi)`.
    pub correction_dropped: bool,
}

/// Rank-one first-order hypergradient. The two omega-gradients must share one
/// flattening order, the two alpha-gradients another.
pub fn hypergradient(
    grad_alpha_phi: &Tensor,
    grad_omega_phi: &Tensor,
    grad_alpha_f: &Tensor,
    grad_omega_f: &Tensor,
    guard: f64,
) -> Result<HypergradientEstimate> {
    if grad_omega_phi.len() != grad_omega_f.len() {
        return Err(Error::GradientLengthMismatch {
            left: grad_omega_phi.len(),
            right: grad_omega_f.len(),
        });
    }
    if grad_alpha_phi.len() != grad_alpha_f.len() {
        return Err(Error::GradientLengthMismatch {
            left: grad_alpha_phi.len(),
            right: grad_alpha_f.len(),
        });
    }
    let grad_norm_sq = dot_data(grad_omega_f.data(), grad_omega_f.data());
    if grad_norm_sq < guard {
        return Ok(HypergradientEstimate {
            g_alpha: grad_alpha_phi.clone(),
            projection_coeff: 0.0,
            grad_norm_sq,
            correction_dropped: true,
        });
    }
    let coeff = dot_data(grad_omega_phi.data(), grad_omega_f.data()) / grad_norm_sq;
    let g = grad_alpha_phi
        .data()
        .iter()
        .zip(grad_alpha_f.data())
        .map(|(p, f)| p - coeff * f)
        .collect();
    Ok(HypergradientEstimate {
        g_alpha: Tensor::new(grad_alpha_phi.shape().to_vec(), g),
        projection_coeff: coeff,
        grad_norm_sq,
        correction_dropped: false,
    })
}

/// Indices of the k largest gates, ties broken toward the lower layer index,
/// result sorted ascending. Depends only on the ordering of the raw values
/// (the sigmoid is monotone).
pub fn top_k(gate_raws: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > gate_raws.len() {
        return Err(Error::SelectionOutOfRange { k, max: gate_raws.len() });
    }
    let mut order: Vec<usize> = (0..gate_raws.len()).collect();
    // stable sort: equal gates keep ascending index order
    order.sort_by(|&a, &b| gate_raws[b].partial_cmp(&gate_raws[a]).expect("finite gates"));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Positioning,
    Finetuning,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Positioning => "positioning",
            Phase::Finetuning => "finetuning",
        }
    }
}

/// Optimizer knobs for one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BilevelOptions {
    pub eta_w: f64,
    pub eta_alpha: f64,
    /// Total epochs T.
    pub epochs: usize,
    /// Switch epoch T_s: positioning for t < T_s, fine-tuning after.
    pub switch_epoch: usize,
    /// Layers to keep.
    pub k: usize,
    /// Threshold on |grad_omega(f)|^2 below which the hypergradient
    /// correction is dropped.
    pub guard: f64,
    /// Samples per epoch batch; None uses the whole split.
    pub batch_size: Option<usize>,
    /// Heavy-ball coefficient for the adapter updates; 0 disables.
    pub momentum: f64,
    /// Pin selected gates to 1.0 rather than their learned sigmoid values.
    pub binarize_gates: bool,
    /// Carry stage-1 adapter weights into stage 2 instead of restarting from
    /// the pretrained point (B zeroed).
    pub warm_start_stage2: bool,
}

impl BilevelOptions {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.switch_epoch == 0 || self.switch_epoch >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "switch epoch {} must satisfy 0 < T_s < T = {}",
                self.switch_epoch, self.epochs
            )));
        }
        if self.k == 0 || self.k > layer_count {
            return Err(Error::SelectionOutOfRange { k: self.k, max: layer_count });
        }
        if !(self.eta_w >= 0.0 && self.eta_alpha >= 0.0) {
            return Err(Error::InvalidConfig("step sizes must be non-negative".into()));
        }
        if !(self.guard > 0.0) {
            return Err(Error::InvalidConfig("guard must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses as seen by the optimizer.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub f_train: f64,
    pub phi_val: f64,
    pub skipped_train: usize,
    pub skipped_val: usize,
}

/// One row of the metrics history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub f_train: f64,
    pub phi_val: f64,
    /// Effective gate value per layer after this epoch's updates.
    pub gates: Vec<f64>,
    pub wallclock_ms: f64,
}

/// Mutable optimizer state across epochs.
pub struct BilevelState {
    pub backbone: Backbone,
    pub epoch: usize,
    pub phase: Phase,
    opts: BilevelOptions,
    selection: Option<Vec<usize>>,
    velocity: Option<Vec<(Tensor, Tensor)>>,
}

impl BilevelState {
    pub fn new(backbone: Backbone, opts: BilevelOptions) -> Result<Self> {
        opts.validate(backbone.layer_count())?;
        Ok(BilevelState {
            backbone,
            epoch: 0,
            phase: Phase::Positioning,
            opts,
            selection: None,
            velocity: None,
        })
    }

    pub fn options(&self) -> &BilevelOptions {
        &self.opts
    }

    pub fn selection(&self) -> Option<&[usize]> {
        self.selection.as_deref()
    }

    fn loss_and_grads(
        &self,
        ctx: &DirectionalLossContext,
        batch: &Tensor,
        opts: ForwardOpts,
    ) -> Result<(f64, Gradients, ForwardPass, usize)> {
        batch_loss_and_grads(&self.backbone, ctx, batch, opts)
    }

    fn flatten_lora(&self, pass: &ForwardPass, grads: &Gradients) -> Tensor {
        let mut out = Vec::new();
        for (nodes, layer) in pass.layers.iter().zip(self.backbone.layers()) {
            if let (Some(a), Some(b)) = (nodes.a, nodes.b) {
                out.extend_from_slice(grads.get_or_zeros(a, layer.lora_a().shape()).data());
                out.extend_from_slice(grads.get_or_zeros(b, layer.lora_b().shape()).data());
            }
        }
        Tensor::vector(out)
    }

    fn flatten_gates(&self, pass: &ForwardPass, grads: &Gradients) -> Tensor {
        let mut out = Vec::with_capacity(pass.layers.len());
        for nodes in &pass.layers {
            let g = nodes
                .gate_raw
                .and_then(|id| grads.get(id))
                .map_or(0.0, |t| t.item());
            out.push(g);
        }
        Tensor::vector(out)
    }

    fn apply_lora_step(&mut self, pass: &ForwardPass, grads: &Gradients) {
        let eta = self.opts.eta_w;
        let momentum = self.opts.momentum;
        if momentum > 0.0 && self.velocity.is_none() {
            self.velocity = Some(
                self.backbone
                    .layers()
                    .iter()
                    .map(|l| {
                        (
                            Tensor::zeros(l.lora_a().shape().to_vec()),
                            Tensor::zeros(l.lora_b().shape().to_vec()),
                        )
                    })
                    .collect(),
            );
        }
        for (i, nodes) in pass.layers.iter().enumerate() {
            let (Some(a), Some(b)) = (nodes.a, nodes.b) else { continue };
            let layer = &self.backbone.layers()[i];
            if !layer.adapter_trainable() {
                continue;
            }
            let ga = grads.get_or_zeros(a, layer.lora_a().shape());
            let gb = grads.get_or_zeros(b, layer.lora_b().shape());
            if momentum > 0.0 {
                let vel = &mut self.velocity.as_mut().unwrap()[i];
                for (v, g) in vel.0.data_mut().iter_mut().zip(ga.data()) {
                    *v = momentum * *v + g;
                }
                for (v, g) in vel.1.data_mut().iter_mut().zip(gb.data()) {
                    *v = momentum * *v + g;
                }
                let (va, vb) = (vel.0.clone(), vel.1.clone());
                self.backbone.layers_mut()[i].step_adapter(eta, &va, &vb);
            } else {
                self.backbone.layers_mut()[i].step_adapter(eta, &ga, &gb);
            }
        }
    }

    /// One positioning epoch: gradients of phi (validation batch) and f
    /// (training batch) at the current point, a gate step along the
    /// hypergradient, then an adapter step along `grad_omega f` recomputed
    /// at the *updated* gates.
    pub fn positioning_epoch(
        &mut self,
        ctx: &DirectionalLossContext,
        train_batch: &Tensor,
        val_batch: &Tensor,
    ) -> Result<EpochStats> {
        if self.phase != Phase::Positioning {
            return Err(Error::WrongPhase { expected: "positioning", actual: self.phase.as_str() });
        }
        let (phi, phi_grads, val_pass, skipped_val) =
            self.loss_and_grads(ctx, val_batch, ForwardOpts::positioning())?;
        let (f, f_grads, train_pass, skipped_train) =
            self.loss_and_grads(ctx, train_batch, ForwardOpts::positioning())?;

        let est = hypergradient(
            &self.flatten_gates(&val_pass, &phi_grads),
            &self.flatten_lora(&val_pass, &phi_grads),
            &self.flatten_gates(&train_pass, &f_grads),
            &self.flatten_lora(&train_pass, &f_grads),
            self.opts.guard,
        )?;
        let eta_alpha = self.opts.eta_alpha;
        for (i, layer) in self.backbone.layers_mut().iter_mut().enumerate() {
            layer.step_gate(eta_alpha, est.g_alpha.data()[i]);
        }

        // grad_omega f at (omega_t, alpha_{t+1}): fresh pass, gates constant
        let opts = ForwardOpts { train_gates: false, ..ForwardOpts::positioning() };
        let (_f_after, f2_grads, pass2, _) = self.loss_and_grads(ctx, train_batch, opts)?;
        self.apply_lora_step(&pass2, &f2_grads);

        self.epoch += 1;
        if self.epoch >= self.opts.switch_epoch {
            self.phase = Phase::Finetuning;
        }
        Ok(EpochStats { f_train: f, phi_val: phi, skipped_train, skipped_val })
    }

    /// Rank the gates, freeze the top-k selection into the backbone, and
    /// optionally restart the adapter weights from the pretrained point.
    pub fn select_and_freeze(&mut self) -> Result<Vec<usize>> {
        if self.phase != Phase::Finetuning {
            return Err(Error::WrongPhase { expected: "finetuning", actual: self.phase.as_str() });
        }
        let raws = self.backbone.gate_raws();
        let selection = top_k(&raws, self.opts.k)?;
        let freeze = if self.opts.binarize_gates { GateFreeze::Binarize } else { GateFreeze::Learned };
        self.backbone.apply_selection(&selection, freeze)?;
        if !self.opts.warm_start_stage2 {
            // restart at the pretrained function: zeroing B is enough
            for layer in self.backbone.layers_mut() {
                let zero_a = Tensor::zeros(layer.lora_a().shape().to_vec());
                let b = layer.lora_b().clone();
                layer.step_adapter(1.0, &zero_a, &b);
            }
            self.velocity = None;
        }
        self.selection = Some(selection.clone());
        Ok(selection)
    }

    /// One fine-tuning epoch: adapter step on the training batch under the
    /// frozen selection. Unselected layers are out of the trainable set and
    /// stay bit-identical.
    pub fn finetune_epoch(&mut self, ctx: &DirectionalLossContext, train_batch: &Tensor) -> Result<EpochStats> {
        if self.phase != Phase::Finetuning {
            return Err(Error::WrongPhase { expected: "finetuning", actual: self.phase.as_str() });
        }
        if self.selection.is_none() {
            return Err(Error::InvalidConfig("finetune_epoch before select_and_freeze".into()));
        }
        let (f, grads, pass, skipped_train) =
            self.loss_and_grads(ctx, train_batch, ForwardOpts::finetune())?;
        self.apply_lora_step(&pass, &grads);
        self.epoch += 1;
        Ok(EpochStats { f_train: f, phi_val: f64::NAN, skipped_train, skipped_val: 0 })
    }
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub backbone: Backbone,
    pub selection: Vec<usize>,
    pub history: Vec<EpochRecord>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub stage2_trainable_params: usize,
    pub total_backbone_params: usize,
}

/// Record one forward pass and loss over a batch and run backward, returning
/// the loss value, the gradient map, the parameter node ids, and the count of
/// degenerate samples skipped by the loss.
pub fn batch_loss_and_grads(
    backbone: &Backbone,
    ctx: &DirectionalLossContext,
    batch: &Tensor,
    opts: ForwardOpts,
) -> Result<(f64, Gradients, ForwardPass, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let pass = backbone.forward_batch(&mut tape, x, opts)?;
    let loss = ctx.batched_h2c_from_nodes(&mut tape, x, pass.output)?;
    let grads = tape.backward(loss.loss)?;
    Ok((tape.value(loss.loss).item(), grads, pass, loss.skipped))
}

/// Plain gradient step on the adapter weights of trainable layers.
pub fn sgd_lora_step(backbone: &mut Backbone, pass: &ForwardPass, grads: &Gradients, eta: f64) {
    for (i, nodes) in pass.layers.iter().enumerate() {
        let (Some(a), Some(b)) = (nodes.a, nodes.b) else { continue };
        if !backbone.layers()[i].adapter_trainable() {
            continue;
        }
        let ga = grads.get_or_zeros(a, backbone.layers()[i].lora_a().shape());
        let gb = grads.get_or_zeros(b, backbone.layers()[i].lora_b().shape());
        backbone.layers_mut()[i].step_adapter(eta, &ga, &gb);
    }
}

/// Full-batch gradient descent on the adapter weights under whatever
/// selection is already frozen into the backbone. Used for stage-2-only
/// training (oracle subsets, manual baselines).
pub fn finetune_steps(
    backbone: &mut Backbone,
    ctx: &DirectionalLossContext,
    train: &Tensor,
    steps: usize,
    eta_w: f64,
) -> Result<f64> {
    let mut last = f64::NAN;
    for _ in 0..steps {
        let (f, grads, pass, _) = batch_loss_and_grads(backbone, ctx, train, ForwardOpts::finetune())?;
        sgd_lora_step(backbone, &pass, &grads, eta_w);
        last = f;
    }
    Ok(last)
}

/// Draw one epoch batch: the whole split, or `size` distinct rows.
pub fn draw_batch(data: &Tensor, size: Option<usize>, rng: &mut impl Rng) -> Tensor {
    match size {
        None => data.clone(),
        Some(s) if s >= data.rows() => data.clone(),
        Some(s) => {
            let idx = rand::seq::index::sample(rng, data.rows(), s).into_vec();
            data.gather_rows(&idx)
        }
    }
}

/// The full two-stage procedure: T_s positioning epochs, top-k selection,
/// then fine-tuning under the frozen selection until epoch T.
pub fn run(
    backbone: Backbone,
    ctx: &DirectionalLossContext,
    train: &Tensor,
    val: &Tensor,
    opts: &BilevelOptions,
    batch_rng: &mut ChaCha8Rng,
) -> Result<RunOutcome> {
    let total_backbone_params = backbone.theta_param_count();
    let mut state = BilevelState::new(backbone, opts.clone())?;
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.switch_epoch {
        let started = Instant::now();
        let train_batch = draw_batch(train, opts.batch_size, batch_rng);
        let val_batch = draw_batch(val, opts.batch_size, batch_rng);
        let stats = state.positioning_epoch(ctx, &train_batch, &val_batch)?;
        history.push(EpochRecord {
            epoch,
            phase: Phase::Positioning,
            f_train: stats.f_train,
            phi_val: stats.phi_val,
            gates: state.backbone.gate_effectives(),
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let selection = state.select_and_freeze()?;

    for epoch in opts.switch_epoch..opts.epochs {
        let started = Instant::now();
        let train_batch = draw_batch(train, opts.batch_size, batch_rng);
        let stats = state.finetune_epoch(ctx, &train_batch)?;
        let val_outputs = state.backbone.eval_batch(val);
        let phi = ctx.batch_value(val, &val_outputs)?.loss;
        history.push(EpochRecord {
            epoch,
            phase: Phase::Finetuning,
            f_train: stats.f_train,
            phi_val: phi,
            gates: state.backbone.gate_effectives(),
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let final_train_loss = {
        let out = state.backbone.eval_batch(train);
        ctx.batch_value(train, &out)?.loss
    };
    let final_val_loss = {
        let out = state.backbone.eval_batch(val);
        ctx.batch_value(val, &out)?.loss
    };
    let stage2_trainable_params = state.backbone.trainable_lora_param_count();

    Ok(RunOutcome {
        backbone: state.backbone,
        selection,
        history,
        final_train_loss,
        final_val_loss,
        stage2_trainable_params,
        total_backbone_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::h2c::{FrozenEncoder, DEFAULT_EPS};
    use crate::lora::Architecture;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    #[test]
    fn orthogonal_omega_gradients_leave_phi_term() {
        let est = hypergradient(
            &Tensor::vector(vec![0.3, -0.2]),
            &Tensor::vector(vec![1.0, 0.0]),
            &Tensor::vector(vec![5.0, 5.0]),
            &Tensor::vector(vec![0.0, 1.0]),
            1e-12,
        )
        .unwrap();
        assert_eq!(est.projection_coeff, 0.0);
        assert!(!est.correction_dropped);
        assert_eq!(est.g_alpha.data(), &[0.3, -0.2]);
    }

    #[test]
    fn identical_omega_gradients_subtract_alpha_f() {
        let est = hypergradient(
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::vector(vec![0.5, -0.25, 1.5]),
            &Tensor::vector(vec![0.75, 0.5]),
            &Tensor::vector(vec![0.5, -0.25, 1.5]),
            1e-12,
        )
        .unwrap();
        assert!((est.projection_coeff - 1.0).abs() < 1e-15);
        assert!((est.g_alpha.data()[0] - 0.25).abs() < 1e-15);
        assert!((est.g_alpha.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn hand_case_cancels_exactly() {
        let est = hypergradient(
            &Tensor::vector(vec![0.5]),
            &Tensor::vector(vec![1.0, 0.0]),
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![2.0, 0.0]),
            1e-12,
        )
        .unwrap();
        assert_eq!(est.projection_coeff, 0.5);
        assert_eq!(est.g_alpha.data(), &[0.0]);
    }

    #[test]
    fn vanishing_lower_gradient_triggers_the_guard() {
        let est = hypergradient(
            &Tensor::vector(vec![0.7]),
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::vector(vec![9.0]),
            &Tensor::vector(vec![0.0, 0.0]),
            1e-12,
        )
        .unwrap();
        assert!(est.correction_dropped);
        assert_eq!(est.g_alpha.data(), &[0.7]);
        assert_eq!(est.grad_norm_sq, 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let err = hypergradient(
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            1e-12,
        );
        assert!(matches!(err, Err(Error::GradientLengthMismatch { .. })));
    }

    #[test]
    fn estimator_matches_independent_scalar_arithmetic() {
        let mut rng = stream_rng(21, Stream::OracleInit);
        for _ in 0..200 {
            let dim_w = 1 + (rng.gen::<u32>() % 32) as usize;
            let dim_a = 1 + (rng.gen::<u32>() % 8) as usize;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
            };
            let gap = draw(&mut rng, dim_a);
            let gop = draw(&mut rng, dim_w);
            let gaf = draw(&mut rng, dim_a);
            let gof = draw(&mut rng, dim_w);

            let est = hypergradient(
                &Tensor::vector(gap.clone()),
                &Tensor::vector(gop.clone()),
                &Tensor::vector(gaf.clone()),
                &Tensor::vector(gof.clone()),
                1e-12,
            )
            .unwrap();

            // plain loops, no shared code with the estimator
            let mut norm_sq = 0.0;
            for v in &gof {
                norm_sq += v * v;
            }
            let mut inner = 0.0;
            for (p, f) in gop.iter().zip(&gof) {
                inner += p * f;
            }
            let coeff = inner / norm_sq;
            for i in 0..dim_a {
                let expect = gap[i] - coeff * gaf[i];
                assert!((est.g_alpha.data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_orders_by_gate_and_breaks_ties_low() {
        // raw values whose sigmoids are 0.9, 0.1, 0.7, 0.4
        let raws = [2.197, -2.197, 0.847, -0.405];
        assert_eq!(top_k(&raws, 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k(&raws, 4).unwrap(), vec![0, 1, 2, 3]);

        let tied = [0.5, 0.9, 0.1, 0.9];
        assert_eq!(top_k(&tied, 1).unwrap(), vec![1], "tie broken toward lower index");
        assert_eq!(top_k(&tied, 3).unwrap(), vec![0, 1, 3]);

        assert!(matches!(top_k(&raws, 0), Err(Error::SelectionOutOfRange { .. })));
        assert!(matches!(top_k(&raws, 5), Err(Error::SelectionOutOfRange { .. })));
    }

    #[test]
    fn top_k_depends_only_on_ordering() {
        let raws = [0.3, -1.0, 2.0, 0.9];
        let reparam: Vec<f64> = raws.iter().map(|v| v * 10.0 + 3.0).collect();
        assert_eq!(top_k(&raws, 2).unwrap(), top_k(&reparam, 2).unwrap());
    }

    // ── Epoch-level behaviour on a small synthetic setup ────────────

    fn tiny_setup(seed: u64) -> (Backbone, DirectionalLossContext, Tensor, Tensor) {
        let arch = Architecture { input_dim: 4, hidden_width: 10, output_dim: 4, layers: 4 };
        let mut theta = stream_rng(seed, Stream::PretrainInit);
        let mut adapt = stream_rng(seed, Stream::AdapterInit);
        let backbone = Backbone::random(&arch, 2, 2.0, &mut theta, &mut adapt).unwrap();
        let mut enc_rng = stream_rng(seed, Stream::Encoder);
        let encoder = FrozenEncoder::random(6, 4, &mut enc_rng, "tiny");
        let t_pos = Tensor::vector((0..6).map(|_| enc_rng.gen::<f64>()).collect());
        let t_neg = Tensor::vector((0..6).map(|_| enc_rng.gen::<f64>() - 1.0).collect());
        let ctx = DirectionalLossContext::new(encoder, t_pos, t_neg, DEFAULT_EPS).unwrap();
        let mut data_rng = stream_rng(seed, Stream::TargetData);
        let train = Tensor::new(vec![12, 4], (0..48).map(|_| data_rng.gen::<f64>() * 2.0 - 1.0).collect());
        let val = Tensor::new(vec![12, 4], (0..48).map(|_| data_rng.gen::<f64>() * 2.0 - 1.0).collect());
        (backbone, ctx, train, val)
    }

    fn opts(epochs: usize, switch: usize, k: usize) -> BilevelOptions {
        BilevelOptions {
            eta_w: 1e-2,
            eta_alpha: 1e-2,
            epochs,
            switch_epoch: switch,
            k,
            guard: 1e-12,
            batch_size: None,
            momentum: 0.0,
            binarize_gates: true,
            warm_start_stage2: true,
        }
    }

    #[test]
    fn zero_step_sizes_change_nothing_but_the_epoch() {
        let (backbone, ctx, train, val) = tiny_setup(31);
        let reference = backbone.clone();
        let mut o = opts(4, 2, 2);
        o.eta_w = 0.0;
        o.eta_alpha = 0.0;
        let mut state = BilevelState::new(backbone, o).unwrap();
        state.positioning_epoch(&ctx, &train, &val).unwrap();
        assert_eq!(state.epoch, 1);
        for (a, b) in state.backbone.layers().iter().zip(reference.layers()) {
            assert!(a.lora_a().bit_eq(b.lora_a()));
            assert!(a.lora_b().bit_eq(b.lora_b()));
            assert_eq!(a.gate_raw(), b.gate_raw());
        }
    }

    #[test]
    fn zero_alpha_step_keeps_gates_but_moves_weights() {
        let (backbone, ctx, train, val) = tiny_setup(32);
        let reference = backbone.clone();
        let mut o = opts(4, 2, 2);
        o.eta_alpha = 0.0;
        let mut state = BilevelState::new(backbone, o).unwrap();
        state.positioning_epoch(&ctx, &train, &val).unwrap();
        let moved = state
            .backbone
            .layers()
            .iter()
            .zip(reference.layers())
            .any(|(a, b)| !a.lora_b().bit_eq(b.lora_b()));
        assert!(moved, "adapter weights should take a gradient step");
        for (a, b) in state.backbone.layers().iter().zip(reference.layers()) {
            assert_eq!(a.gate_raw(), b.gate_raw());
        }
    }

    #[test]
    fn wrong_phase_is_reported() {
        let (backbone, ctx, train, val) = tiny_setup(33);
        let mut state = BilevelState::new(backbone, opts(4, 1, 2)).unwrap();
        state.positioning_epoch(&ctx, &train, &val).unwrap();
        // now in finetuning phase
        let err = state.positioning_epoch(&ctx, &train, &val);
        assert!(matches!(err, Err(Error::WrongPhase { .. })));
        // and finetuning before selection is rejected
        let err = state.finetune_epoch(&ctx, &train);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn unselected_adapters_never_move_in_stage_two() {
        let (backbone, ctx, train, val) = tiny_setup(34);
        let mut state = BilevelState::new(backbone, opts(8, 2, 2)).unwrap();
        state.positioning_epoch(&ctx, &train, &val).unwrap();
        state.positioning_epoch(&ctx, &train, &val).unwrap();
        let selection = state.select_and_freeze().unwrap();
        let snapshot = state.backbone.clone();
        for _ in 0..4 {
            state.finetune_epoch(&ctx, &train).unwrap();
        }
        for (i, (a, b)) in state.backbone.layers().iter().zip(snapshot.layers()).enumerate() {
            if selection.contains(&i) {
                assert!(!a.lora_b().bit_eq(b.lora_b()), "selected layer {i} should train");
            } else {
                assert!(a.lora_a().bit_eq(b.lora_a()));
                assert!(a.lora_b().bit_eq(b.lora_b()));
            }
        }
    }

    #[test]
    fn run_produces_the_expected_epoch_split_and_is_deterministic() {
        let (backbone, ctx, train, val) = tiny_setup(35);
        let o = opts(10, 4, 2);
        let go = |backbone: Backbone| {
            let mut rng = stream_rng(35, Stream::Batching);
            run(backbone, &ctx, &train, &val, &o, &mut rng).unwrap()
        };
        let out1 = go(backbone.clone());
        let out2 = go(backbone);

        assert_eq!(out1.history.len(), 10);
        assert_eq!(out1.history.iter().filter(|r| r.phase == Phase::Positioning).count(), 4);
        assert_eq!(out1.history.iter().filter(|r| r.phase == Phase::Finetuning).count(), 6);
        assert_eq!(out1.selection.len(), 2);
        assert_eq!(out1.selection, out2.selection);
        assert_eq!(out1.final_val_loss.to_bits(), out2.final_val_loss.to_bits());
        for (a, b) in out1.backbone.layers().iter().zip(out2.backbone.layers()) {
            assert!(a.lora_a().bit_eq(b.lora_a()));
            assert!(a.lora_b().bit_eq(b.lora_b()));
        }
        // frozen backbone is conserved through the whole run
        assert!(out1.backbone.theta_bit_eq(&out2.backbone));
    }

    #[test]
    fn theta_is_conserved_across_a_run() {
        let (backbone, ctx, train, val) = tiny_setup(36);
        let before = backbone.clone();
        let mut rng = stream_rng(36, Stream::Batching);
        let out = run(backbone, &ctx, &train, &val, &opts(6, 2, 2), &mut rng).unwrap();
        assert!(out.backbone.theta_bit_eq(&before));
    }
}
