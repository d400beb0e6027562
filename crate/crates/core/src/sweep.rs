//! Sweep over the number of selected layers.
//!
//! One full two-stage run per k, fresh adapters each time, reporting final
//! validation loss and trainable-parameter count so the capacity/quality
//! trade-off is visible as a curve.

use serde::{Deserialize, Serialize};

use crate::bilevel::{run, BilevelOptions};
use crate::error::Result;
use crate::rng::{stream_rng, Stream};
use crate::task::SyntheticTask;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    pub selection: Vec<usize>,
    pub final_val_loss: f64,
    pub final_train_loss: f64,
    pub trainable_params: usize,
}

/// Run the two-stage procedure once per k value.
pub fn layer_count_sweep(
    task: &SyntheticTask,
    base_opts: &BilevelOptions,
    k_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepRecord>> {
    let mut records = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut opts = base_opts.clone();
        opts.k = k;
        opts.validate(task.backbone.layer_count())?;
        let mut backbone = task.backbone.clone();
        let mut init_rng = stream_rng(seed, Stream::AdapterInit);
        backbone.reset_adapters(&mut init_rng);
        let mut batch_rng = stream_rng(seed, Stream::Batching);
        let outcome = run(backbone, &task.ctx, &task.target_train, &task.target_val, &opts, &mut batch_rng)?;
        records.push(SweepRecord {
            k,
            selection: outcome.selection,
            final_val_loss: outcome.final_val_loss,
            final_train_loss: outcome.final_train_loss,
            trainable_params: outcome.stage2_trainable_params,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::lora::Architecture;
    use crate::task::{make_task, TaskSpec};

    #[test]
    fn parameter_counts_strictly_increase_with_k() {
        let spec = TaskSpec {
            arch: Architecture { input_dim: 6, hidden_width: 24, output_dim: 6, layers: 4 },
            embed_dim: 12,
            planted: vec![1, 2],
            shift_magnitude: 1.0,
            source_samples: 64,
            target_samples: 64,
            rank: 4,
            gamma: 2.0,
            pretrain_steps: 1500,
            pretrain_lr: 3e-3,
            pretrain_threshold: 1e-3,
            seed: 51,
        };
        let task = make_task(&spec).unwrap();
        let opts = BilevelOptions {
            eta_w: 0.05,
            eta_alpha: 0.05,
            epochs: 12,
            switch_epoch: 4,
            k: 1,
            guard: 1e-12,
            batch_size: None,
            momentum: 0.0,
            binarize_gates: true,
            warm_start_stage2: true,
        };
        let records = layer_count_sweep(&task, &opts, &[1, 2, 3, 4], 51).unwrap();
        assert_eq!(records.len(), 4);
        for pair in records.windows(2) {
            assert!(pair[1].trainable_params > pair[0].trainable_params);
        }

        // k = 0 violates the state invariant
        let err = layer_count_sweep(&task, &opts, &[0], 51);
        assert!(matches!(err, Err(Error::SelectionOutOfRange { .. })));
    }
}
