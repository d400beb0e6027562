//! Gated low-rank adapter layers and the backbone they live in.
//!
//! Each linear layer carries a frozen weight `W0` and bias plus a trainable
//! low-rank pair `A`, `B` and a scalar gate. The effective weight is
//! `W0 + sigmoid(gate_raw) * gamma * B * A`; with `B` zero-initialized the
//! adapted network starts exactly at the pretrained one. The gate is the
//! continuous stand-in for the discrete "inject here / don't" decision, and
//! is frozen to 1 or 0 once a layer subset has been selected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sigmoid_scalar, NodeId, Tape};
use crate::tensor::Tensor;

/// Whether a layer's gate is still being learned or has been pinned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateState {
    Learnable,
    /// Effective gate value fixed; no sigmoid, no gradient.
    Frozen(f64),
}

/// How `apply_selection` pins the gates of selected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateFreeze {
    /// Selected gates become exactly 1.0.
    Binarize,
    /// Selected gates keep their learned sigmoid value.
    Learned,
}

/// One linear layer with a gated low-rank adapter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GatedLoraLayer {
    w0: Tensor,
    bias: Tensor,
    a: Tensor,
    b: Tensor,
    gate_raw: f64,
    gate_state: GateState,
    adapter_trainable: bool,
    rank: usize,
    gamma: f64,
}

impl GatedLoraLayer {
    /// Wrap a frozen weight/bias pair with a fresh adapter: `A` uniform in
    /// `[-1/sqrt(d_in), 1/sqrt(d_in)]`, `B` zero, gate at the sigmoid
    /// midpoint.
    pub fn new(w0: Tensor, bias: Tensor, rank: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        assert!(w0.is_matrix(), "w0 must be a matrix");
        let (d_out, d_in) = (w0.rows(), w0.cols());
        assert_eq!(bias.len(), d_out, "bias length must match d_out");
        assert!(gamma > 0.0, "gamma must be positive");
        if rank >= d_out.min(d_in) {
            return Err(Error::RankTooLarge { rank, d_out, d_in });
        }
        let mut layer = GatedLoraLayer {
            w0,
            bias,
            a: Tensor::zeros(vec![rank, d_in]),
            b: Tensor::zeros(vec![d_out, rank]),
            gate_raw: 0.0,
            gate_state: GateState::Learnable,
            adapter_trainable: true,
            rank,
            gamma,
        };
        layer.reset_adapter(rng);
        Ok(layer)
    }

    /// Re-draw `A`, zero `B`, reset the gate. Leaves the frozen weights alone.
    pub fn reset_adapter(&mut self, rng: &mut impl Rng) {
        let d_in = self.w0.cols();
        let bound = 1.0 / (d_in as f64).sqrt();
        for v in self.a.data_mut() {
            *v = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
        }
        for v in self.b.data_mut() {
            *v = 0.0;
        }
        self.gate_raw = 0.0;
        self.gate_state = GateState::Learnable;
        self.adapter_trainable = true;
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn lora_a(&self) -> &Tensor {
        &self.a
    }

    pub fn lora_b(&self) -> &Tensor {
        &self.b
    }

    pub fn gate_raw(&self) -> f64 {
        self.gate_raw
    }

    pub fn gate_state(&self) -> GateState {
        self.gate_state
    }

    pub fn adapter_trainable(&self) -> bool {
        self.adapter_trainable
    }

    /// Effective gate value: sigmoid of the raw parameter, or the frozen
    /// constant.
    pub fn gate_effective(&self) -> f64 {
        match self.gate_state {
            GateState::Learnable => sigmoid_scalar(self.gate_raw),
            GateState::Frozen(v) => v,
        }
    }

    /// Number of adapter parameters (A plus B) in this layer.
    pub fn adapter_param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub(crate) fn step_adapter(&mut self, step: f64, grad_a: &Tensor, grad_b: &Tensor) {
        self.a.axpy_neg(step, grad_a);
        self.b.axpy_neg(step, grad_b);
    }

    pub(crate) fn step_gate(&mut self, step: f64, grad: f64) {
        debug_assert!(matches!(self.gate_state, GateState::Learnable));
        self.gate_raw -= step * grad;
    }

    pub(crate) fn w0_mut(&mut self) -> &mut Tensor {
        &mut self.w0
    }

    pub(crate) fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }
}

/// Shape of the multi-layer perceptron backbone: `input_dim` in,
/// `layers - 1` hidden blocks of `hidden_width` with rectified-linear
/// activations, linear output of `output_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub layers: usize,
}

impl Architecture {
    /// (d_out, d_in) per layer, first to last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.layers >= 2, "need at least input and output layers");
        let mut dims = Vec::with_capacity(self.layers);
        dims.push((self.hidden_width, self.input_dim));
        for _ in 0..self.layers - 2 {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.output_dim, self.hidden_width));
        dims
    }
}

/// Which parameter sets a forward pass registers as trainable, and whether
/// adapters participate at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts {
    pub include_adapters: bool,
    pub train_theta: bool,
    pub train_lora: bool,
    pub train_gates: bool,
}

impl ForwardOpts {
    /// Adapters active, LoRA weights and gates trainable, backbone frozen.
    pub fn positioning() -> Self {
        ForwardOpts { include_adapters: true, train_theta: false, train_lora: true, train_gates: true }
    }

    /// Adapters active, only LoRA weights of trainable layers update.
    pub fn finetune() -> Self {
        ForwardOpts { include_adapters: true, train_theta: false, train_lora: true, train_gates: false }
    }

    /// Bare backbone with its own weights trainable (source-domain fitting).
    pub fn pretrain() -> Self {
        ForwardOpts { include_adapters: false, train_theta: true, train_lora: false, train_gates: false }
    }

    /// Adapters active, nothing trainable.
    pub fn frozen() -> Self {
        ForwardOpts { include_adapters: true, ..Default::default() }
    }
}

/// Tape node ids registered for one layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub w0: NodeId,
    pub bias: NodeId,
    pub a: Option<NodeId>,
    pub b: Option<NodeId>,
    pub gate_raw: Option<NodeId>,
}

/// Result of recording a forward pass: the output node plus the parameter
/// node ids needed to read gradients back out.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: NodeId,
    pub layers: Vec<LayerNodes>,
}

/// Ordered stack of gated layers. Hidden layers are followed by a
/// rectified-linear activation; the final layer is linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    layers: Vec<GatedLoraLayer>,
}

/// Identity of one parameter tensor, for partition checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub name: &'static str,
}

/// The three disjoint parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Frozen,
    Lora,
    Gates,
}

impl Backbone {
    pub fn from_layers(layers: Vec<GatedLoraLayer>) -> Self {
        assert!(!layers.is_empty());
        Backbone { layers }
    }

    /// Random backbone for pretraining: He-scaled weights, zero biases,
    /// fresh adapters.
    pub fn random(arch: &Architecture, rank: usize, gamma: f64, theta_rng: &mut impl Rng, adapter_rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.layers);
        for (d_out, d_in) in arch.layer_dims() {
            let scale = (2.0 / d_in as f64).sqrt();
            let data = (0..d_out * d_in)
                .map(|_| (theta_rng.gen::<f64>() * 2.0 - 1.0) * scale)
                .collect();
            let w0 = Tensor::new(vec![d_out, d_in], data);
            let bias = Tensor::zeros(vec![d_out]);
            layers.push(GatedLoraLayer::new(w0, bias, rank, gamma, adapter_rng)?);
        }
        Ok(Backbone { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GatedLoraLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GatedLoraLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    /// Fresh adapters on every layer; frozen weights untouched.
    pub fn reset_adapters(&mut self, rng: &mut impl Rng) {
        for layer in &mut self.layers {
            layer.reset_adapter(rng);
        }
    }

    pub fn gate_raws(&self) -> Vec<f64> {
        self.layers.iter().map(GatedLoraLayer::gate_raw).collect()
    }

    pub fn gate_effectives(&self) -> Vec<f64> {
        self.layers.iter().map(GatedLoraLayer::gate_effective).collect()
    }

    /// Stable, deterministic parameter listing for one group. Concatenating
    /// the three groups covers every parameter exactly once.
    pub fn collect_params(&self, group: ParamGroup) -> Vec<(ParamKey, usize)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match group {
                ParamGroup::Frozen => {
                    out.push((ParamKey { layer: i, name: "w0" }, layer.w0.len()));
                    out.push((ParamKey { layer: i, name: "bias" }, layer.bias.len()));
                }
                ParamGroup::Lora => {
                    out.push((ParamKey { layer: i, name: "lora_a" }, layer.a.len()));
                    out.push((ParamKey { layer: i, name: "lora_b" }, layer.b.len()));
                }
                ParamGroup::Gates => {
                    out.push((ParamKey { layer: i, name: "gate_raw" }, 1));
                }
            }
        }
        out
    }

    pub fn theta_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w0.len() + l.bias.len()).sum()
    }

    pub fn lora_param_count(&self) -> usize {
        self.layers.iter().map(GatedLoraLayer::adapter_param_count).sum()
    }

    /// Adapter parameters currently in the trainable set.
    pub fn trainable_lora_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.adapter_trainable)
            .map(GatedLoraLayer::adapter_param_count)
            .sum()
    }

    /// Freeze the selection: chosen layers get their gate pinned (to 1.0
    /// under `Binarize`, to the learned sigmoid value under `Learned`) and
    /// stay trainable; everything else is gated off and dropped from the
    /// trainable set.
    pub fn apply_selection(&mut self, selected: &[usize], freeze: GateFreeze) -> Result<()> {
        for &idx in selected {
            if idx >= self.layers.len() {
                return Err(Error::LayerIndexOutOfRange { index: idx, layers: self.layers.len() });
            }
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if selected.contains(&i) {
                let value = match freeze {
                    GateFreeze::Binarize => 1.0,
                    GateFreeze::Learned => sigmoid_scalar(layer.gate_raw),
                };
                layer.gate_state = GateState::Frozen(value);
                layer.adapter_trainable = true;
            } else {
                layer.gate_state = GateState::Frozen(0.0);
                layer.adapter_trainable = false;
            }
        }
        Ok(())
    }

    /// Record a batched forward pass, inputs as rows of `x`.
    pub fn forward_batch(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts) -> Result<ForwardPass> {
        self.forward_impl(tape, x, opts, true)
    }

    /// Record a single-sample forward pass over a vector input.
    pub fn forward_one(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts) -> Result<ForwardPass> {
        self.forward_impl(tape, x, opts, false)
    }

    fn forward_impl(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts, batched: bool) -> Result<ForwardPass> {
        let mut h = x;
        let mut nodes = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w0 = register(tape, &layer.w0, opts.train_theta);
            let bias = register(tape, &layer.bias, opts.train_theta);

            let main = if batched {
                let prod = tape.matmul_nt(h, w0)?;
                tape.add_bias(prod, bias)?
            } else {
                let prod = tape.matvec(w0, h)?;
                tape.add(prod, bias)?
            };

            // A gate frozen at zero contributes nothing and gets no gradient;
            // skip its ops entirely so the output stays bit-identical to the
            // frozen layer.
            let adapter_active =
                opts.include_adapters && layer.gate_state != GateState::Frozen(0.0);

            let (mut a_id, mut b_id, mut gate_id) = (None, None, None);
            let out = if adapter_active {
                let train_ab = opts.train_lora && layer.adapter_trainable;
                let a = register(tape, &layer.a, train_ab);
                let b = register(tape, &layer.b, train_ab);
                a_id = Some(a);
                b_id = Some(b);

                let low = if batched {
                    tape.matmul_nt(h, a)? // [n, r]
                } else {
                    tape.matvec(a, h)? // [r]
                };
                let delta = if batched {
                    tape.matmul_nt(low, b)? // [n, d_out]
                } else {
                    tape.matvec(b, low)? // [d_out]
                };
                let gated = match layer.gate_state {
                    GateState::Learnable => {
                        let raw = register(tape, &Tensor::scalar(layer.gate_raw), opts.train_gates);
                        gate_id = Some(raw);
                        let alpha = tape.sigmoid(raw)?;
                        tape.scale_by_scalar(delta, alpha)?
                    }
                    GateState::Frozen(v) => tape.scale(delta, v)?,
                };
                let inc = tape.scale(gated, layer.gamma)?;
                tape.add(main, inc)?
            } else {
                main
            };

            h = if i == last { out } else { tape.relu(out)? };
            nodes.push(LayerNodes { w0, bias, a: a_id, b: b_id, gate_raw: gate_id });
        }
        Ok(ForwardPass { output: h, layers: nodes })
    }

    /// Tape-free forward over a batch. Follows the exact operation order of
    /// `forward_batch`, so the values are bit-identical to the recorded pass.
    pub fn eval_batch(&self, x: &Tensor) -> Tensor {
        use crate::tape::matmul_nt_data;
        assert!(x.is_matrix());
        let n = x.rows();
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let d_out = layer.d_out();
            let mut out = matmul_nt_data(h.data(), layer.w0.data(), n, layer.d_in(), d_out);
            for (idx, v) in out.iter_mut().enumerate() {
                *v += layer.bias.data()[idx % d_out];
            }
            let active = layer.gate_state != GateState::Frozen(0.0);
            if active {
                let low = matmul_nt_data(h.data(), layer.a.data(), n, layer.d_in(), layer.rank);
                let mut delta = matmul_nt_data(&low, layer.b.data(), n, layer.rank, d_out);
                let gate = layer.gate_effective();
                for v in delta.iter_mut() {
                    *v = *v * gate * layer.gamma;
                }
                for (o, d) in out.iter_mut().zip(&delta) {
                    *o += d;
                }
            }
            if i != last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = Tensor::new(vec![n, d_out], out);
        }
        h
    }

    /// True when every frozen tensor is bit-identical between the two
    /// backbones.
    pub fn theta_bit_eq(&self, other: &Backbone) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w0.bit_eq(&b.w0) && a.bias.bit_eq(&b.bias))
    }
}

fn register(tape: &mut Tape, value: &Tensor, trainable: bool) -> NodeId {
    if trainable {
        tape.variable(value.clone())
    } else {
        tape.constant(value.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tape::matmul_nt_data;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    fn small_backbone(seed: u64) -> Backbone {
        let arch = Architecture { input_dim: 4, hidden_width: 12, output_dim: 4, layers: 6 };
        let mut theta = stream_rng(seed, Stream::PretrainInit);
        let mut adapt = stream_rng(seed, Stream::AdapterInit);
        Backbone::random(&arch, 3, 2.0, &mut theta, &mut adapt).unwrap()
    }

    #[test]
    fn zero_b_means_output_equals_frozen_layer() {
        let bb = small_backbone(1);
        let mut rng = stream_rng(2, Stream::TargetData);
        let x = rand_tensor(vec![5, 4], &mut rng);

        let mut t1 = Tape::new();
        let x1 = t1.constant(x.clone());
        let with = bb.forward_batch(&mut t1, x1, ForwardOpts::positioning()).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.constant(x.clone());
        let without = bb
            .forward_batch(&mut t2, x2, ForwardOpts { include_adapters: false, ..Default::default() })
            .unwrap();

        assert!(t1.value(with.output).bit_eq(t2.value(without.output)));
    }

    #[test]
    fn gate_at_zero_with_gamma_two_passes_increment_through_unscaled() {
        // sigmoid(0) * gamma = 0.5 * 2 = 1.0, so the layer output is exactly
        // W0 x + bias + B A x
        let mut rng = stream_rng(4, Stream::Perturbation);
        let w0 = rand_tensor(vec![12, 4], &mut rng);
        let bias = rand_tensor(vec![12], &mut rng);
        let mut layer = GatedLoraLayer::new(w0, bias, 3, 2.0, &mut rng).unwrap();
        let nz = rand_tensor(vec![12, 3], &mut rng);
        layer.step_adapter(-1.0, &Tensor::zeros(vec![3, 4]), &nz);
        assert_eq!(layer.gate_raw(), 0.0);

        let x = rand_tensor(vec![3, 4], &mut rng);
        let low = matmul_nt_data(x.data(), layer.lora_a().data(), 3, 4, 3);
        let u = matmul_nt_data(&low, layer.lora_b().data(), 3, 3, 12);
        let mut main = matmul_nt_data(x.data(), layer.w0().data(), 3, 4, 12);
        for (idx, v) in main.iter_mut().enumerate() {
            *v += layer.bias().data()[idx % 12];
        }

        let bb = Backbone::from_layers(vec![layer]);
        let out = bb.eval_batch(&x);
        for ((o, m), uu) in out.data().iter().zip(&main).zip(&u) {
            assert!((o - (m + uu)).abs() < 1e-12);
        }
    }

    #[test]
    fn increment_magnitude_matches_dense_oracle() {
        // rank 8, gamma 2 on a random 16x16 layer, gate_raw = 0
        let mut rng = stream_rng(9, Stream::AdapterInit);
        let w0 = rand_tensor(vec![16, 16], &mut rng);
        let bias = rand_tensor(vec![16], &mut rng);
        let mut layer = GatedLoraLayer::new(w0, bias, 8, 2.0, &mut rng).unwrap();
        let nz_b = rand_tensor(vec![16, 8], &mut rng);
        layer.step_adapter(-1.0, &Tensor::zeros(vec![8, 16]), &nz_b);

        let x = rand_tensor(vec![16], &mut rng);

        // dense oracle: 0.5 * gamma * ||B A x||
        let mut ax = vec![0.0; 8];
        for r in 0..8 {
            for c in 0..16 {
                ax[r] += layer.lora_a().data()[r * 16 + c] * x.data()[c];
            }
        }
        let mut bax = vec![0.0; 16];
        for r in 0..16 {
            for c in 0..8 {
                bax[r] += layer.lora_b().data()[r * 8 + c] * ax[c];
            }
        }
        let expected = 0.5 * 2.0 * bax.iter().map(|v| v * v).sum::<f64>().sqrt();

        let bb = Backbone::from_layers(vec![layer]);
        let mut t_on = Tape::new();
        let xn = t_on.constant(x.clone());
        let on = bb.forward_one(&mut t_on, xn, ForwardOpts::positioning()).unwrap();
        let mut t_off = Tape::new();
        let xf = t_off.constant(x.clone());
        let off = bb
            .forward_one(&mut t_off, xf, ForwardOpts { include_adapters: false, ..Default::default() })
            .unwrap();

        let inc_norm = t_on
            .value(on.output)
            .data()
            .iter()
            .zip(t_off.value(off.output).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((inc_norm - expected).abs() < 1e-9, "{inc_norm} vs {expected}");
    }

    #[test]
    fn fresh_adapter_gate_is_half() {
        let bb = small_backbone(5);
        for layer in bb.layers() {
            assert_eq!(layer.gate_effective(), 0.5);
        }
    }

    #[test]
    fn equal_seeds_give_bit_identical_adapters() {
        let a = small_backbone(7);
        let b = small_backbone(7);
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert!(x.lora_a().bit_eq(y.lora_a()));
        }
    }

    #[test]
    fn rank_must_stay_below_min_dimension() {
        let mut rng = stream_rng(1, Stream::AdapterInit);
        let err = GatedLoraLayer::new(Tensor::zeros(vec![4, 8]), Tensor::zeros(vec![4]), 4, 2.0, &mut rng);
        assert!(matches!(err, Err(Error::RankTooLarge { .. })));
    }

    #[test]
    fn param_partition_is_disjoint_and_exhaustive() {
        let bb = small_backbone(2);
        let frozen = bb.collect_params(ParamGroup::Frozen);
        let lora = bb.collect_params(ParamGroup::Lora);
        let gates = bb.collect_params(ParamGroup::Gates);

        assert_eq!(lora.len(), 12, "A and B per layer");
        assert_eq!(gates.len(), 6);

        let mut keys: Vec<ParamKey> = frozen
            .iter()
            .chain(&lora)
            .chain(&gates)
            .map(|(k, _)| *k)
            .collect();
        let total_listed: usize = frozen
            .iter()
            .chain(&lora)
            .chain(&gates)
            .map(|(_, n)| n)
            .sum();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), frozen.len() + lora.len() + gates.len(), "no key repeats");
        assert_eq!(
            total_listed,
            bb.theta_param_count() + bb.lora_param_count() + bb.layer_count()
        );
    }

    #[test]
    fn selecting_every_layer_keeps_all_adapters_trainable() {
        let mut bb = small_backbone(3);
        bb.apply_selection(&[0, 1, 2, 3, 4, 5], GateFreeze::Binarize).unwrap();
        for layer in bb.layers() {
            assert_eq!(layer.gate_effective(), 1.0);
            assert!(layer.adapter_trainable());
        }
    }

    #[test]
    fn empty_selection_restores_pretrained_behaviour() {
        let mut bb = small_backbone(4);
        let mut rng = stream_rng(6, Stream::TargetData);
        // give the adapters nonzero B first
        for l in bb.layers_mut() {
            let nz = rand_tensor(l.lora_b().shape().to_vec(), &mut rng);
            l.step_adapter(-1.0, &Tensor::zeros(l.lora_a().shape().to_vec()), &nz);
        }
        let x = rand_tensor(vec![7, 4], &mut rng);
        let mut frozen = bb.clone();
        for l in frozen.layers_mut() {
            l.gate_state = GateState::Frozen(0.0);
        }
        bb.apply_selection(&[], GateFreeze::Binarize).unwrap();
        assert!(bb.eval_batch(&x).bit_eq(&frozen.eval_batch(&x)));
        assert_eq!(bb.trainable_lora_param_count(), 0);
    }

    #[test]
    fn selection_index_out_of_range_errors() {
        let mut bb = small_backbone(4);
        assert!(matches!(
            bb.apply_selection(&[9], GateFreeze::Binarize),
            Err(Error::LayerIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn increment_norm_grows_with_gate_raw() {
        let mut bb = small_backbone(8);
        let mut rng = stream_rng(8, Stream::Perturbation);
        for l in bb.layers_mut() {
            let nz = rand_tensor(l.lora_b().shape().to_vec(), &mut rng);
            l.step_adapter(-1.0, &Tensor::zeros(l.lora_a().shape().to_vec()), &nz);
        }
        let x = rand_tensor(vec![4, 4], &mut rng);
        let mut frozen = bb.clone();
        for l in frozen.layers_mut() {
            l.gate_state = GateState::Frozen(0.0);
        }
        let base = frozen.eval_batch(&x);

        let mut prev = -1.0;
        for raw in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let mut probe = bb.clone();
            for l in probe.layers_mut() {
                l.gate_raw = raw;
            }
            let out = probe.eval_batch(&x);
            let norm = out
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(norm > prev, "increment norm must increase: {norm} after {prev}");
            prev = norm;
        }
    }

    #[test]
    fn gradients_reach_adapters_but_not_frozen_weights() {
        let bb = small_backbone(10);
        let mut rng = stream_rng(11, Stream::TargetData);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let pass = bb.forward_batch(&mut tape, xn, ForwardOpts::positioning()).unwrap();
        let loss = tape.l2_norm(pass.output).unwrap();
        let grads = tape.backward(loss).unwrap();
        for nodes in &pass.layers {
            assert!(grads.contains(nodes.a.unwrap()));
            assert!(grads.contains(nodes.b.unwrap()));
            assert!(grads.contains(nodes.gate_raw.unwrap()));
            assert!(!grads.contains(nodes.w0));
            assert!(!grads.contains(nodes.bias));
        }
    }

    #[test]
    fn eval_batch_matches_recorded_forward_bitwise() {
        let mut bb = small_backbone(12);
        let mut rng = stream_rng(13, Stream::TargetData);
        for l in bb.layers_mut() {
            let nz = rand_tensor(l.lora_b().shape().to_vec(), &mut rng);
            l.step_adapter(-1.0, &Tensor::zeros(l.lora_a().shape().to_vec()), &nz);
            l.gate_raw = rng.gen::<f64>() - 0.5;
        }
        let x = rand_tensor(vec![6, 4], &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let pass = bb.forward_batch(&mut tape, xn, ForwardOpts::frozen()).unwrap();
        assert!(tape.value(pass.output).bit_eq(&bb.eval_batch(&x)));
    }
}
