//! Haze-to-clear directional loss.
//!
//! A frozen linear encoder maps model-space vectors into an embedding space
//! shared by inputs and outputs. The loss is one minus the cosine between
//! the model's embedding displacement `V_out - V_in` and a fixed target
//! direction `t_pos - t_neg` given by two anchor embeddings, so it asks the
//! model to move its outputs in a semantically prescribed direction without
//! any paired references. Displacements with norm at or below `eps` are
//! degenerate and reported as such so a trainer can skip the sample instead
//! of dividing by near-zero.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{matmul_nt_data, NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-8;

/// Immutable linear embedding map, applied identically to model inputs and
/// outputs. No gradient ever flows into it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenEncoder {
    projection: Tensor, // [e, d]
    provenance: String,
}

impl FrozenEncoder {
    pub fn new(projection: Tensor, provenance: impl Into<String>) -> Self {
        assert!(projection.is_matrix(), "projection must be [e, d]");
        assert!(projection.all_finite(), "projection must be finite");
        FrozenEncoder { projection, provenance: provenance.into() }
    }

    /// Random Gaussian projection with 1/sqrt(d) column scaling.
    pub fn random(embed_dim: usize, input_dim: usize, rng: &mut impl Rng, provenance: impl Into<String>) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let data = (0..embed_dim * input_dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
            .collect();
        FrozenEncoder::new(Tensor::new(vec![embed_dim, input_dim], data), provenance)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// Record `projection · x` on the tape. Accepts a vector [d] or a batch
    /// [n, d] (rows embedded independently). Gradients flow through `x`
    /// only; the projection is registered as a constant.
    pub fn embed(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let proj = tape.constant(self.projection.clone());
        if tape.value(x).is_vector() {
            tape.matvec(proj, x)
        } else {
            tape.matmul_nt(x, proj)
        }
    }

    /// Tape-free batch embedding, same kernel and order as the recorded op.
    pub fn embed_value(&self, x: &Tensor) -> Tensor {
        assert!(x.is_matrix());
        let e = self.embed_dim();
        let out = matmul_nt_data(x.data(), self.projection.data(), x.rows(), self.input_dim(), e);
        Tensor::new(vec![x.rows(), e], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EncoderFile {
            rows: self.projection.rows(),
            cols: self.projection.cols(),
            data: self.projection.data().to_vec(),
            provenance: self.provenance.clone(),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: EncoderFile = serde_json::from_str(&text)?;
        if file.data.len() != file.rows * file.cols {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("{} values for a {}x{} projection", file.data.len(), file.rows, file.cols),
            });
        }
        Ok(FrozenEncoder::new(Tensor::new(vec![file.rows, file.cols], file.data), file.provenance))
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    provenance: String,
}

/// On-disk anchor pair: `{ "dim": e, "t_pos": [...], "t_neg": [...],
/// "provenance": ... }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Anchors {
    pub dim: usize,
    pub t_pos: Vec<f64>,
    pub t_neg: Vec<f64>,
    pub provenance: String,
}

impl Anchors {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let anchors: Anchors = serde_json::from_str(&text)?;
        if anchors.t_pos.len() != anchors.dim || anchors.t_neg.len() != anchors.dim {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "anchor lengths disagree with dim".into(),
            });
        }
        Ok(anchors)
    }
}

/// Frozen encoder plus the anchor pair defining the target direction.
/// Immutable after construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct DirectionalLossContext {
    encoder: FrozenEncoder,
    t_pos: Tensor,
    t_neg: Tensor,
    delta_text: Tensor,
    delta_text_norm: f64,
    eps: f64,
}

/// Batched loss node plus how many samples actually contributed.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub loss: NodeId,
    pub used: usize,
    pub skipped: usize,
}

/// Tape-free batched loss value, for evaluation and metrics.
#[derive(Clone, Copy, Debug)]
pub struct BatchLossValue {
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

impl DirectionalLossContext {
    pub fn new(encoder: FrozenEncoder, t_pos: Tensor, t_neg: Tensor, eps: f64) -> Result<Self> {
        assert!(t_pos.is_vector() && t_neg.is_vector());
        assert_eq!(t_pos.len(), encoder.embed_dim(), "t_pos dimension");
        assert_eq!(t_neg.len(), encoder.embed_dim(), "t_neg dimension");
        assert!(eps > 0.0);
        let delta: Vec<f64> = t_pos.data().iter().zip(t_neg.data()).map(|(p, n)| p - n).collect();
        let delta_text = Tensor::vector(delta);
        let norm = delta_text.l2_norm();
        if norm <= eps {
            return Err(Error::AnchorsTooClose { dist: norm, eps });
        }
        Ok(DirectionalLossContext { encoder, t_pos, t_neg, delta_text, delta_text_norm: norm, eps })
    }

    pub fn from_anchors(encoder: FrozenEncoder, anchors: &Anchors, eps: f64) -> Result<Self> {
        DirectionalLossContext::new(
            encoder,
            Tensor::vector(anchors.t_pos.clone()),
            Tensor::vector(anchors.t_neg.clone()),
            eps,
        )
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    pub fn t_pos(&self) -> &Tensor {
        &self.t_pos
    }

    pub fn t_neg(&self) -> &Tensor {
        &self.t_neg
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn anchors(&self, provenance: impl Into<String>) -> Anchors {
        Anchors {
            dim: self.t_pos.len(),
            t_pos: self.t_pos.data().to_vec(),
            t_neg: self.t_neg.data().to_vec(),
            provenance: provenance.into(),
        }
    }

    /// `1 - cos(v_out - v_in, t_pos - t_neg)` for one embedded pair.
    /// Differentiable with respect to both embedding nodes.
    pub fn h2c_loss(&self, tape: &mut Tape, v_in: NodeId, v_out: NodeId) -> Result<NodeId> {
        let dv = tape.sub(v_out, v_in)?;
        let ndv = tape.l2_norm(dv)?;
        let norm = tape.value(ndv).item();
        if norm <= self.eps {
            return Err(Error::DegenerateDisplacement { norm, eps: self.eps });
        }
        let dt = tape.constant(self.delta_text.clone());
        let num = tape.dot(dv, dt)?;
        let ndt = tape.l2_norm(dt)?;
        let denom = tape.mul(ndv, ndt)?;
        let cos = tape.div(num, denom)?;
        let one = tape.constant(Tensor::scalar(1.0));
        tape.sub(one, cos)
    }

    /// Mean directional loss over a batch already pushed through the model:
    /// `x` and `y` are [n, d] nodes of model inputs and outputs. Degenerate
    /// rows are skipped and counted; a batch with no usable row is an error.
    pub fn batched_h2c_from_nodes(&self, tape: &mut Tape, x: NodeId, y: NodeId) -> Result<BatchLoss> {
        let n = tape.value(x).rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let v_in = self.encoder.embed(tape, x)?;
        let v_out = self.encoder.embed(tape, y)?;
        let dv = tape.sub(v_out, v_in)?;
        let norms = tape.row_l2_norms(dv)?;
        let keep: Vec<usize> = tape
            .value(norms)
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > self.eps)
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            return Err(Error::AllDegenerate { count: n });
        }
        let skipped = n - keep.len();
        let (dv_kept, norms_kept) = if keep.len() == n {
            (dv, norms)
        } else {
            let gathered = tape.gather_rows(dv, keep.clone())?;
            let gn = tape.row_l2_norms(gathered)?;
            (gathered, gn)
        };
        let dt = tape.constant(self.delta_text.clone());
        let dots = tape.matvec(dv_kept, dt)?;
        let denom = tape.scale(norms_kept, self.delta_text_norm)?;
        let cos = tape.div(dots, denom)?;
        let ones = tape.constant(Tensor::vector(vec![1.0; keep.len()]));
        let losses = tape.sub(ones, cos)?;
        let loss = tape.mean(losses)?;
        Ok(BatchLoss { loss, used: keep.len(), skipped })
    }

    /// Convenience wrapper matching the "run the model, then score it" shape:
    /// registers `inputs` as a constant batch, applies `model`, and computes
    /// the batched loss.
    pub fn batched_h2c<M>(&self, tape: &mut Tape, model: M, inputs: &Tensor) -> Result<BatchLoss>
    where
        M: FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
    {
        if inputs.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = tape.constant(inputs.clone());
        let y = model(tape, x)?;
        self.batched_h2c_from_nodes(tape, x, y)
    }

    /// Tape-free batched loss, same arithmetic as the recorded version.
    pub fn batch_value(&self, inputs: &Tensor, outputs: &Tensor) -> Result<BatchLossValue> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let v_in = self.encoder.embed_value(inputs);
        let v_out = self.encoder.embed_value(outputs);
        let e = self.encoder.embed_dim();
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut losses = Vec::with_capacity(n);
        for i in 0..n {
            let dv: Vec<f64> = v_out.row(i).iter().zip(v_in.row(i)).map(|(o, s)| o - s).collect();
            let norm = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= self.eps {
                continue;
            }
            let dot = crate::tape::dot_data(&dv, self.delta_text.data());
            let cos = dot / (norm * self.delta_text_norm);
            losses.push(1.0 - cos);
            used += 1;
        }
        let _ = e;
        if used == 0 {
            return Err(Error::AllDegenerate { count: n });
        }
        for l in &losses {
            sum += l;
        }
        Ok(BatchLossValue { loss: sum / used as f64, used, skipped: n - used })
    }
}
