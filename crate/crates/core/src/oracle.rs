//! Brute-force layer-subset oracle.
//!
//! Scores every k-subset of layers by fine-tuning a fresh copy of the
//! adapters under that selection for a fixed budget and recording the final
//! validation loss. Exhaustive, so it is the ground truth any learned
//! selection is judged against. Subset evaluations are independent and run
//! in parallel on private backbone copies; aggregation is keyed by subset,
//! so the result does not depend on scheduling.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilevel::finetune_steps;
use crate::error::{Error, Result};
use crate::lora::GateFreeze;
use crate::rng::{stream_rng, Stream};
use crate::task::SyntheticTask;

/// Refuse to enumerate more subsets than this by default.
pub const DEFAULT_TRACTABILITY_BOUND: usize = 500;

/// Fine-tuning budget and step size for each subset evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OracleBudget {
    pub steps: usize,
    pub eta_w: f64,
}

/// Exhaustive scores over all k-subsets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleResult {
    pub k: usize,
    /// Every subset with its post-fine-tuning validation loss, in
    /// enumeration order.
    pub subset_scores: Vec<(Vec<usize>, f64)>,
    /// The same scores sorted ascending by loss (ties by subset order).
    pub ranking: Vec<(Vec<usize>, f64)>,
    pub best_subset: Vec<usize>,
}

/// Where one selection lands in the oracle's ordering.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionReport {
    pub selection: Vec<usize>,
    /// 1-based rank among all scored subsets.
    pub rank: usize,
    pub loss: f64,
    pub best_loss: f64,
    /// (loss - best_loss) / best_loss.
    pub relative_gap: f64,
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out = 1usize;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

/// Score every k-subset of layers. Deterministic for a fixed task and seed:
/// every subset starts from the same adapter initialization.
pub fn brute_force_oracle(
    task: &SyntheticTask,
    k: usize,
    budget: OracleBudget,
    bound: usize,
) -> Result<OracleResult> {
    let layers = task.backbone.layer_count();
    if k == 0 || k > layers {
        return Err(Error::SelectionOutOfRange { k, max: layers });
    }
    if budget.steps == 0 {
        return Err(Error::InvalidConfig("oracle budget must be positive".into()));
    }
    let count = binomial(layers, k);
    if count > bound {
        return Err(Error::OracleIntractable { layers, k, count, bound });
    }

    // one shared adapter init: subset ranking should reflect the selection,
    // not initialization luck
    let mut template = task.backbone.clone();
    let mut init_rng = stream_rng(task.seed, Stream::OracleInit);
    template.reset_adapters(&mut init_rng);

    let subsets: Vec<Vec<usize>> = (0..layers).combinations(k).collect();
    let subset_scores: Vec<(Vec<usize>, f64)> = subsets
        .par_iter()
        .map(|subset| -> Result<(Vec<usize>, f64)> {
            let mut candidate = template.clone();
            candidate.apply_selection(subset, GateFreeze::Binarize)?;
            finetune_steps(&mut candidate, &task.ctx, &task.target_train, budget.steps, budget.eta_w)?;
            let outputs = candidate.eval_batch(&task.target_val);
            let loss = task.ctx.batch_value(&task.target_val, &outputs)?.loss;
            Ok((subset.clone(), loss))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ranking = subset_scores.clone();
    ranking.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite losses").then(a.0.cmp(&b.0)));
    let best_subset = ranking[0].0.clone();
    Ok(OracleResult { k, subset_scores, ranking, best_subset })
}

/// Rank a selection within an oracle result.
pub fn evaluate_selection(selection: &[usize], oracle: &OracleResult) -> Result<SelectionReport> {
    let mut sorted = selection.to_vec();
    sorted.sort_unstable();
    let position = oracle
        .ranking
        .iter()
        .position(|(subset, _)| *subset == sorted)
        .ok_or_else(|| Error::SelectionNotScored { selection: sorted.clone() })?;
    let loss = oracle.ranking[position].1;
    let best_loss = oracle.ranking[0].1;
    Ok(SelectionReport {
        selection: sorted,
        rank: position + 1,
        loss,
        best_loss,
        relative_gap: (loss - best_loss) / best_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::Architecture;
    use crate::task::{make_task, TaskSpec};

    fn oracle_spec(seed: u64, planted: Vec<usize>) -> TaskSpec {
        TaskSpec {
            arch: Architecture { input_dim: 6, hidden_width: 24, output_dim: 6, layers: 4 },
            embed_dim: 12,
            planted,
            shift_magnitude: 1.0,
            source_samples: 64,
            target_samples: 64,
            rank: 4,
            gamma: 2.0,
            pretrain_steps: 1500,
            pretrain_lr: 3e-3,
            pretrain_threshold: 1e-3,
            seed,
        }
    }

    #[test]
    fn binomial_counts() {
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(5, 5), 1);
    }

    #[test]
    fn subset_count_matches_binomial_and_k_equals_l_is_single() {
        let task = make_task(&oracle_spec(3, vec![1])).unwrap();
        let budget = OracleBudget { steps: 30, eta_w: 0.05 };
        let oracle = brute_force_oracle(&task, 2, budget, 500).unwrap();
        assert_eq!(oracle.subset_scores.len(), 6);

        let full = brute_force_oracle(&task, 4, budget, 500).unwrap();
        assert_eq!(full.subset_scores.len(), 1);
        assert_eq!(full.best_subset, vec![0, 1, 2, 3]);
    }

    #[test]
    fn tractability_bound_is_enforced() {
        let task = make_task(&oracle_spec(4, vec![1])).unwrap();
        let budget = OracleBudget { steps: 10, eta_w: 0.05 };
        let err = brute_force_oracle(&task, 2, budget, 5);
        assert!(matches!(err, Err(Error::OracleIntractable { count: 6, bound: 5, .. })));
    }

    #[test]
    fn oracle_is_deterministic() {
        let task = make_task(&oracle_spec(5, vec![2])).unwrap();
        let budget = OracleBudget { steps: 25, eta_w: 0.05 };
        let a = brute_force_oracle(&task, 2, budget, 500).unwrap();
        let b = brute_force_oracle(&task, 2, budget, 500).unwrap();
        for ((sa, la), (sb, lb)) in a.subset_scores.iter().zip(&b.subset_scores) {
            assert_eq!(sa, sb);
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn selection_rank_and_gap() {
        let task = make_task(&oracle_spec(6, vec![1])).unwrap();
        let budget = OracleBudget { steps: 25, eta_w: 0.05 };
        let oracle = brute_force_oracle(&task, 2, budget, 500).unwrap();

        let best = evaluate_selection(&oracle.best_subset, &oracle).unwrap();
        assert_eq!(best.rank, 1);
        assert_eq!(best.relative_gap, 0.0);

        let worst = oracle.ranking.last().unwrap().0.clone();
        let report = evaluate_selection(&worst, &oracle).unwrap();
        assert_eq!(report.rank, 6);

        let err = evaluate_selection(&[0, 1, 2], &oracle);
        assert!(matches!(err, Err(Error::SelectionNotScored { .. })));
    }
}
