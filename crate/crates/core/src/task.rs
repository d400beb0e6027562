//! Synthetic planted-bottleneck domain-shift tasks.
//!
//! Construction: fit a backbone to a source mapping (a random linear
//! teacher), then build the target mapping by perturbing the *pretrained*
//! weights of a known subset of layers with rank-one corrections. The domain
//! gap is therefore closable exactly by low-rank adaptation of those layers
//! and of no smaller set — ground truth for judging any layer selection.
//!
//! The directional-loss anchors are the encoder applied to the mean target
//! output (positive) and the mean pretrained output (negative) over the
//! training split, so descending the loss means moving outputs toward the
//! target mapping.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::h2c::{Anchors, DirectionalLossContext, FrozenEncoder, DEFAULT_EPS};
use crate::lora::{Architecture, Backbone, ForwardOpts, GateFreeze};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Everything that determines a task, bar nothing: equal specs with equal
/// seeds produce bit-identical tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub planted: Vec<usize>,
    pub shift_magnitude: f64,
    pub source_samples: usize,
    pub target_samples: usize,
    pub rank: usize,
    pub gamma: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_threshold: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arch.input_dim != self.arch.output_dim {
            return Err(Error::InvalidConfig(
                "encoder is shared by inputs and outputs, so input_dim must equal output_dim".into(),
            ));
        }
        if self.planted.is_empty() {
            return Err(Error::InvalidConfig("planted set must be nonempty".into()));
        }
        for &idx in &self.planted {
            if idx >= self.arch.layers {
                return Err(Error::LayerIndexOutOfRange { index: idx, layers: self.arch.layers });
            }
        }
        if !(self.shift_magnitude >= 0.0) {
            return Err(Error::InvalidConfig("shift magnitude must be non-negative".into()));
        }
        if self.target_samples < 2 {
            return Err(Error::InvalidConfig("need at least two target samples to split".into()));
        }
        Ok(())
    }
}

/// Backbone fit to the source domain, plus the data it was fit on.
#[derive(Clone, Debug)]
pub struct PretrainedSource {
    pub backbone: Backbone,
    pub source_inputs: Tensor,
    pub source_targets: Tensor,
    pub final_loss: f64,
    pub steps_used: usize,
}

/// A complete adaptation problem: pretrained backbone, disjoint target
/// train/validation splits, the planted bottleneck, and the directional-loss
/// context for the target domain.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub backbone: Backbone,
    pub source_inputs: Tensor,
    pub source_targets: Tensor,
    pub target_train: Tensor,
    pub target_train_outputs: Tensor,
    pub target_val: Tensor,
    pub target_val_outputs: Tensor,
    pub planted: Vec<usize>,
    pub shift_magnitude: f64,
    pub ctx: DirectionalLossContext,
    pub seed: u64,
}

/// Mean squared error between a model's outputs on `inputs` and reference
/// `outputs` — the ground-truth target error the directional loss proxies.
pub fn mse(model_outputs: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(model_outputs.shape(), reference.shape());
    model_outputs
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / model_outputs.len() as f64
}

/// Outputs of the frozen backbone (adapters gated off entirely).
pub fn frozen_outputs(backbone: &Backbone, inputs: &Tensor) -> Tensor {
    let mut frozen = backbone.clone();
    frozen
        .apply_selection(&[], GateFreeze::Binarize)
        .expect("empty selection is always valid");
    frozen.eval_batch(inputs)
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
    )
}

/// Fit a fresh backbone to a random linear source mapping with Adam on the
/// mean squared error, stopping early once the threshold is reached.
pub fn pretrain_source(spec: &TaskSpec) -> Result<PretrainedSource> {
    spec.validate()?;
    let arch = &spec.arch;

    let mut teacher_rng = stream_rng(spec.seed, Stream::Teacher);
    let scale = 1.0 / (arch.input_dim as f64).sqrt();
    let teacher: Vec<f64> = (0..arch.output_dim * arch.input_dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut teacher_rng) * scale)
        .collect();
    let teacher = Tensor::new(vec![arch.output_dim, arch.input_dim], teacher);

    let mut data_rng = stream_rng(spec.seed, Stream::SourceData);
    let inputs = uniform_matrix(spec.source_samples, arch.input_dim, &mut data_rng);
    let targets = {
        let out = crate::tape::matmul_nt_data(
            inputs.data(),
            teacher.data(),
            spec.source_samples,
            arch.input_dim,
            arch.output_dim,
        );
        Tensor::new(vec![spec.source_samples, arch.output_dim], out)
    };

    let mut theta_rng = stream_rng(spec.seed, Stream::PretrainInit);
    let mut adapter_rng = stream_rng(spec.seed, Stream::AdapterInit);
    let mut backbone = Backbone::random(arch, spec.rank, spec.gamma, &mut theta_rng, &mut adapter_rng)?;

    let mut adam = AdamState::for_theta(&backbone);
    let mut last_loss = f64::INFINITY;
    let mut steps_used = 0;
    for step in 0..spec.pretrain_steps {
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let pass = backbone.forward_batch(&mut tape, x, ForwardOpts::pretrain())?;
        let t = tape.constant(targets.clone());
        let diff = tape.sub(pass.output, t)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        last_loss = tape.value(loss).item();
        steps_used = step;
        if last_loss <= spec.pretrain_threshold {
            break;
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut backbone, &pass, &grads, spec.pretrain_lr);
    }
    if last_loss > spec.pretrain_threshold {
        return Err(Error::PretrainStalled {
            loss: last_loss,
            threshold: spec.pretrain_threshold,
            steps: spec.pretrain_steps,
        });
    }
    Ok(PretrainedSource {
        backbone,
        source_inputs: inputs,
        source_targets: targets,
        final_loss: last_loss,
        steps_used,
    })
}

/// Build the target side of a task from an already-pretrained source. The
/// pretraining streams are untouched, so one source can serve several
/// plantings.
pub fn plant_target(src: &PretrainedSource, spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let arch = &spec.arch;

    // target mapping: pretrained weights plus rank-one corrections on the
    // planted layers only
    let mut teacher = src.backbone.clone();
    teacher.apply_selection(&[], GateFreeze::Binarize)?;
    let mut perturb_rng = stream_rng(spec.seed, Stream::Perturbation);
    let mut planted_sorted = spec.planted.clone();
    planted_sorted.sort_unstable();
    planted_sorted.dedup();
    for &layer_idx in &planted_sorted {
        let layer = &mut teacher.layers_mut()[layer_idx];
        let (d_out, d_in) = (layer.d_out(), layer.d_in());
        let u: Vec<f64> = (0..d_out)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut perturb_rng))
            .collect();
        // non-negative right factor: hidden activations are non-negative, so
        // the induced pre-activation shift keeps one sign across samples
        let v: Vec<f64> = (0..d_in)
            .map(|_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut perturb_rng).abs()
            })
            .collect();
        let u_norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let v_norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let w_norm = layer.w0().l2_norm();
        let coeff = spec.shift_magnitude * w_norm / (u_norm * v_norm);
        let w = layer.w0_mut();
        for i in 0..d_out {
            for j in 0..d_in {
                w.data_mut()[i * d_in + j] += coeff * u[i] * v[j];
            }
        }
    }

    let mut target_rng = stream_rng(spec.seed, Stream::TargetData);
    let all_inputs = uniform_matrix(spec.target_samples, arch.input_dim, &mut target_rng);
    let half = spec.target_samples / 2;
    let train_idx: Vec<usize> = (0..half).collect();
    let val_idx: Vec<usize> = (half..spec.target_samples).collect();
    let target_train = all_inputs.gather_rows(&train_idx);
    let target_val = all_inputs.gather_rows(&val_idx);

    let target_train_outputs = teacher.eval_batch(&target_train);
    let target_val_outputs = teacher.eval_batch(&target_val);

    // encoder over model outputs; anchors from mean target vs mean pretrained
    // outputs on the training split
    let mut enc_rng = stream_rng(spec.seed, Stream::Encoder);
    let encoder = FrozenEncoder::random(spec.embed_dim, arch.output_dim, &mut enc_rng, format!("task-seed-{}", spec.seed));

    let pretrained_outputs = frozen_outputs(&src.backbone, &target_train);
    let mean_rows = |t: &Tensor| -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut m = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                m[j] += t.data()[i * c + j];
            }
        }
        for v in m.iter_mut() {
            *v /= r as f64;
        }
        Tensor::vector(m)
    };
    let mean_target = mean_rows(&target_train_outputs);
    let mean_source = mean_rows(&pretrained_outputs);
    let embed_vec = |v: &Tensor| -> Tensor {
        let m = Tensor::new(vec![1, v.len()], v.data().to_vec());
        let e = encoder.embed_value(&m);
        Tensor::vector(e.data().to_vec())
    };
    let t_pos = embed_vec(&mean_target);
    let t_neg = embed_vec(&mean_source);
    let ctx = DirectionalLossContext::new(encoder, t_pos, t_neg, DEFAULT_EPS)?;

    Ok(SyntheticTask {
        backbone: src.backbone.clone(),
        source_inputs: src.source_inputs.clone(),
        source_targets: src.source_targets.clone(),
        target_train,
        target_train_outputs,
        target_val,
        target_val_outputs,
        planted: planted_sorted,
        shift_magnitude: spec.shift_magnitude,
        ctx,
        seed: spec.seed,
    })
}

/// Full construction: pretrain on the source, then plant the target shift.
pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    let src = pretrain_source(spec)?;
    plant_target(&src, spec)
}

// ── Adam, used only for source-domain pretraining ───────────────────

struct AdamState {
    m: Vec<(Tensor, Tensor)>,
    v: Vec<(Tensor, Tensor)>,
    t: usize,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn for_theta(backbone: &Backbone) -> Self {
        let zeros = |b: &Backbone| {
            b.layers()
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.w0().shape().to_vec()),
                        Tensor::zeros(l.bias().shape().to_vec()),
                    )
                })
                .collect()
        };
        AdamState { m: zeros(backbone), v: zeros(backbone), t: 0 }
    }

    fn step(
        &mut self,
        backbone: &mut Backbone,
        pass: &crate::lora::ForwardPass,
        grads: &crate::tape::Gradients,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, nodes) in pass.layers.iter().enumerate() {
            let layer = &mut backbone.layers_mut()[i];
            let gw = grads.get_or_zeros(nodes.w0, layer.w0().shape());
            let gb = grads.get_or_zeros(nodes.bias, layer.bias().shape());
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            let update = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
                for k in 0..param.len() {
                    m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * grad[k];
                    v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    param[k] -= lr * mhat / (vhat.sqrt() + Self::EPS);
                }
            };
            update(layer.w0_mut().data_mut(), gw.data(), mw.data_mut(), vw.data_mut());
            update(layer.bias_mut().data_mut(), gb.data(), mb.data_mut(), vb.data_mut());
        }
    }
}

// ── Task directory format: JSON manifest plus raw little-endian blobs ──

#[derive(Serialize, Deserialize)]
struct TaskManifest {
    seed: u64,
    arch: Architecture,
    embed_dim: usize,
    planted: Vec<usize>,
    shift_magnitude: f64,
    tensors: Vec<TensorEntry>,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob file.
    offset: usize,
}

const TENSOR_NAMES: [&str; 6] = [
    "source_inputs",
    "source_targets",
    "target_train",
    "target_train_outputs",
    "target_val",
    "target_val_outputs",
];

impl SyntheticTask {
    fn tensor_by_name(&self, name: &str) -> &Tensor {
        match name {
            "source_inputs" => &self.source_inputs,
            "source_targets" => &self.source_targets,
            "target_train" => &self.target_train,
            "target_train_outputs" => &self.target_train_outputs,
            "target_val" => &self.target_val,
            "target_val_outputs" => &self.target_val_outputs,
            _ => panic!("unknown tensor {name}"),
        }
    }

    /// Write the data side of the task (manifest, blobs, encoder, anchors).
    /// The pretrained backbone travels separately as a checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for name in TENSOR_NAMES {
            let t = self.tensor_by_name(name);
            entries.push(TensorEntry { name: name.into(), shape: t.shape().to_vec(), offset });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        let arch = Architecture {
            input_dim: self.backbone.input_dim(),
            hidden_width: self.backbone.layers()[0].d_out(),
            output_dim: self.backbone.output_dim(),
            layers: self.backbone.layer_count(),
        };
        let manifest = TaskManifest {
            seed: self.seed,
            arch,
            embed_dim: self.ctx.encoder().embed_dim(),
            planted: self.planted.clone(),
            shift_magnitude: self.shift_magnitude,
            tensors: entries,
            provenance: format!("planted-bottleneck seed {}", self.seed),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut f = fs::File::create(dir.join("tensors.bin"))?;
        f.write_all(&blob)?;
        self.ctx.encoder().save(&dir.join("encoder.json"))?;
        self.ctx.anchors(manifest.provenance).save(&dir.join("anchors.json"))?;
        Ok(())
    }

    /// Load the data side back; the backbone comes from its checkpoint.
    pub fn load(dir: &Path, backbone: Backbone) -> Result<Self> {
        let manifest: TaskManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut blob = Vec::new();
        fs::File::open(dir.join("tensors.bin"))?.read_to_end(&mut blob)?;
        let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset * 8;
            let end = start + count * 8;
            if end > blob.len() {
                return Err(Error::Format {
                    path: dir.join("tensors.bin").display().to_string(),
                    detail: format!("tensor {} overruns blob", entry.name),
                });
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::new(entry.shape.clone(), data))
        };
        let mut by_name = std::collections::BTreeMap::new();
        for entry in &manifest.tensors {
            by_name.insert(entry.name.clone(), read_tensor(entry)?);
        }
        let mut take = |name: &str| -> Result<Tensor> {
            by_name.remove(name).ok_or_else(|| Error::Format {
                path: dir.join("manifest.json").display().to_string(),
                detail: format!("missing tensor {name}"),
            })
        };
        let encoder = FrozenEncoder::load(&dir.join("encoder.json"))?;
        let anchors = Anchors::load(&dir.join("anchors.json"))?;
        let ctx = DirectionalLossContext::from_anchors(encoder, &anchors, DEFAULT_EPS)?;
        Ok(SyntheticTask {
            backbone,
            source_inputs: take("source_inputs")?,
            source_targets: take("source_targets")?,
            target_train: take("target_train")?,
            target_train_outputs: take("target_train_outputs")?,
            target_val: take("target_val")?,
            target_val_outputs: take("target_val_outputs")?,
            planted: manifest.planted,
            shift_magnitude: manifest.shift_magnitude,
            ctx,
            seed: manifest.seed,
        })
    }
}
