//! Layer-selection baselines.
//!
//! The comparison the two-stage optimizer has to win: fixed manual
//! selections (first-k, last-k), a random subset, and single-level joint
//! training where gates and adapter weights descend the training loss
//! together with no validation signal. Every method gets the same adapter
//! initialization, the same batch stream, and the same fine-tuning budget.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{
    batch_loss_and_grads, draw_batch, run, sgd_lora_step, top_k, BilevelOptions,
};
use crate::error::Result;
use crate::lora::{Backbone, ForwardOpts, GateFreeze};
use crate::rng::{stream_rng, Stream};
use crate::task::SyntheticTask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    ManualFirstK,
    ManualLastK,
    RandomK,
    JointSingleLevel,
    Bilevel,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ManualFirstK,
        Method::ManualLastK,
        Method::RandomK,
        Method::JointSingleLevel,
        Method::Bilevel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ManualFirstK => "manual-first-k",
            Method::ManualLastK => "manual-last-k",
            Method::RandomK => "random-k",
            Method::JointSingleLevel => "joint-single-level",
            Method::Bilevel => "bilevel",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub method: Method,
    pub selection: Vec<usize>,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
}

fn fresh_backbone(task: &SyntheticTask, seed: u64) -> Backbone {
    let mut backbone = task.backbone.clone();
    let mut rng = stream_rng(seed, Stream::AdapterInit);
    backbone.reset_adapters(&mut rng);
    backbone
}

fn val_loss(task: &SyntheticTask, backbone: &Backbone) -> Result<f64> {
    let outputs = backbone.eval_batch(&task.target_val);
    Ok(task.ctx.batch_value(&task.target_val, &outputs)?.loss)
}

fn train_loss(task: &SyntheticTask, backbone: &Backbone) -> Result<f64> {
    let outputs = backbone.eval_batch(&task.target_train);
    Ok(task.ctx.batch_value(&task.target_train, &outputs)?.loss)
}

/// Fine-tune under a fixed selection for the stage-2 epoch budget.
fn finetune_under(
    task: &SyntheticTask,
    mut backbone: Backbone,
    selection: Vec<usize>,
    opts: &BilevelOptions,
    batch_rng: &mut ChaCha8Rng,
    method: Method,
) -> Result<BaselineOutcome> {
    backbone.apply_selection(&selection, GateFreeze::Binarize)?;
    for _ in opts.switch_epoch..opts.epochs {
        let batch = draw_batch(&task.target_train, opts.batch_size, batch_rng);
        let (_, grads, pass, _) =
            batch_loss_and_grads(&backbone, &task.ctx, &batch, ForwardOpts::finetune())?;
        sgd_lora_step(&mut backbone, &pass, &grads, opts.eta_w);
    }
    Ok(BaselineOutcome {
        method,
        selection,
        final_val_loss: val_loss(task, &backbone)?,
        final_train_loss: train_loss(task, &backbone)?,
    })
}

/// Single-level joint training: gates and adapter weights take simultaneous
/// gradient steps on the training loss for the positioning budget, then the
/// top-k gates are frozen in and fine-tuning proceeds as usual.
pub fn run_joint(
    task: &SyntheticTask,
    mut backbone: Backbone,
    opts: &BilevelOptions,
    batch_rng: &mut ChaCha8Rng,
) -> Result<BaselineOutcome> {
    for _ in 0..opts.switch_epoch {
        let batch = draw_batch(&task.target_train, opts.batch_size, batch_rng);
        // one tape: both updates read the same gradients of f
        let (_, grads, pass, _) =
            batch_loss_and_grads(&backbone, &task.ctx, &batch, ForwardOpts::positioning())?;
        for (i, nodes) in pass.layers.iter().enumerate() {
            if let Some(gate) = nodes.gate_raw {
                if let Some(g) = grads.get(gate) {
                    backbone.layers_mut()[i].step_gate(opts.eta_alpha, g.item());
                }
            }
        }
        sgd_lora_step(&mut backbone, &pass, &grads, opts.eta_w);
        let _ = draw_batch(&task.target_val, opts.batch_size, batch_rng); // keep batch stream aligned with bilevel
    }
    let selection = top_k(&backbone.gate_raws(), opts.k)?;
    backbone.apply_selection(&selection, GateFreeze::Binarize)?;
    if !opts.warm_start_stage2 {
        for layer in backbone.layers_mut() {
            let zero_a = Tensor::zeros(layer.lora_a().shape().to_vec());
            let b = layer.lora_b().clone();
            layer.step_adapter(1.0, &zero_a, &b);
        }
    }
    for _ in opts.switch_epoch..opts.epochs {
        let batch = draw_batch(&task.target_train, opts.batch_size, batch_rng);
        let (_, grads, pass, _) =
            batch_loss_and_grads(&backbone, &task.ctx, &batch, ForwardOpts::finetune())?;
        sgd_lora_step(&mut backbone, &pass, &grads, opts.eta_w);
    }
    Ok(BaselineOutcome {
        method: Method::JointSingleLevel,
        selection,
        final_val_loss: val_loss(task, &backbone)?,
        final_train_loss: train_loss(task, &backbone)?,
    })
}

/// Run the whole comparison table. One row per method, shared init and
/// batch stream.
pub fn baselines(task: &SyntheticTask, opts: &BilevelOptions, seed: u64) -> Result<Vec<BaselineOutcome>> {
    let layers = task.backbone.layer_count();
    opts.validate(layers)?;
    let k = opts.k;

    let mut out = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let mut batch_rng = stream_rng(seed, Stream::Batching);
        let backbone = fresh_backbone(task, seed);
        let outcome = match method {
            Method::ManualFirstK => {
                let selection: Vec<usize> = (0..k).collect();
                finetune_under(task, backbone, selection, opts, &mut batch_rng, method)?
            }
            Method::ManualLastK => {
                let selection: Vec<usize> = (layers - k..layers).collect();
                finetune_under(task, backbone, selection, opts, &mut batch_rng, method)?
            }
            Method::RandomK => {
                let mut pick_rng = stream_rng(seed, Stream::RandomSubset);
                let mut selection = rand::seq::index::sample(&mut pick_rng, layers, k).into_vec();
                selection.sort_unstable();
                finetune_under(task, backbone, selection, opts, &mut batch_rng, method)?
            }
            Method::JointSingleLevel => run_joint(task, backbone, opts, &mut batch_rng)?,
            Method::Bilevel => {
                let outcome = run(
                    backbone,
                    &task.ctx,
                    &task.target_train,
                    &task.target_val,
                    opts,
                    &mut batch_rng,
                )?;
                BaselineOutcome {
                    method,
                    selection: outcome.selection,
                    final_val_loss: outcome.final_val_loss,
                    final_train_loss: outcome.final_train_loss,
                }
            }
        };
        out.push(outcome);
    }
    Ok(out)
}
