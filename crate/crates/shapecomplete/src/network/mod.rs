//! The denoising auto-encoder: configuration, topology, forward/backward
//! passes, completion composition and parameter accounting.
//!
//! The encoder is `down_stages` two-strided convolutions; the decoder is
//! equally many transposed convolutions, each followed by a unit-stride
//! convolution, and four unit-stride convolutions finish the stack. All
//! hidden activations are ReLU, kernel size is uniform.
//!
//! In residual mode the network's raw output is the missing-part estimate
//! and the addition with the input happens outside the network (in
//! [`compose_completion`] and in the residual loss), which makes the
//! superset guarantee of residual completions provable.

pub mod checkpoint;
pub mod nn;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{BinaryVolume, LabelVolume, Shape3, VoxelError};
use nn::{Conv3d, ConvTranspose3d, Tensor};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    ShapeMismatch { expected: Shape3, got: Shape3 },
    #[error("canonical config parameter count {count} outside [{lo}, {hi}]")]
    ParameterBudget { count: usize, lo: usize, hi: usize },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
    Softmax,
}

/// Architecture plus training-mode description of the auto-encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaeConfig {
    pub input_shape: Shape3,
    pub down_stages: usize,
    /// Encoder widths per stage; the decoder mirrors them.
    pub channel_widths: Vec<usize>,
    pub kernel_size: usize,
    pub residual: bool,
    /// 1 = binary occupancy; >= 2 = multi-class with an explicit
    /// background channel.
    pub num_classes: usize,
    pub final_activation: FinalActivation,
}

pub const CANONICAL_PARAM_RANGE: (usize, usize) = (20_000_000, 24_000_000);

impl DaeConfig {
    /// The stock 128-cube binary completion network.
    pub fn canonical() -> Self {
        DaeConfig {
            input_shape: [128, 128, 128],
            down_stages: 4,
            channel_widths: vec![86, 172, 344, 688],
            kernel_size: 3,
            residual: true,
            num_classes: 1,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    /// A small test/phantom-scale variant of the same topology.
    pub fn small(input_shape: Shape3, base_width: usize, residual: bool) -> Self {
        DaeConfig {
            input_shape,
            down_stages: 4,
            channel_widths: (0..4).map(|i| base_width << i).collect(),
            kernel_size: 3,
            residual,
            num_classes: 1,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    /// Multi-class completion config (channel 0 is background).
    pub fn multiclass(input_shape: Shape3, base_width: usize, num_classes: usize) -> Self {
        DaeConfig {
            input_shape,
            down_stages: 4,
            channel_widths: (0..4).map(|i| base_width << i).collect(),
            kernel_size: 3,
            residual: false,
            num_classes,
            final_activation: FinalActivation::Softmax,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let err = |msg: String| Err(NetworkError::InvalidConfig(msg));
        if self.down_stages == 0 {
            return err("need at least one down stage".into());
        }
        if self.channel_widths.len() != self.down_stages {
            return err(format!(
                "channel_widths has {} entries for {} stages",
                self.channel_widths.len(),
                self.down_stages
            ));
        }
        if self.channel_widths.iter().any(|&w| w == 0) {
            return err("channel widths must be positive".into());
        }
        if self.kernel_size % 2 == 0 || self.kernel_size < 3 {
            return err(format!("kernel size {} must be odd >= 3", self.kernel_size));
        }
        let factor = 1usize << self.down_stages;
        for &d in &self.input_shape {
            if d % factor != 0 || d / factor == 0 {
                return err(format!(
                    "input dimension {d} not divisible by 2^{} with a nonzero bottleneck",
                    self.down_stages
                ));
            }
        }
        if self.num_classes == 0 {
            return err("num_classes must be at least 1".into());
        }
        if self.residual && self.num_classes != 1 {
            return err("residual mode is defined for binary completion only".into());
        }
        match self.final_activation {
            FinalActivation::Sigmoid if self.num_classes != 1 => {
                err("sigmoid head requires num_classes = 1".into())
            }
            FinalActivation::Softmax if self.num_classes < 2 => {
                err("softmax head requires num_classes >= 2".into())
            }
            _ => Ok(()),
        }
    }

    /// Input channel count: occupancy for binary, one-hot for multi-class.
    pub fn input_channels(&self) -> usize {
        if self.num_classes == 1 {
            1
        } else {
            self.num_classes
        }
    }

    /// Whether this config claims the canonical geometry whose parameter
    /// count the budget invariant constrains.
    pub fn is_canonical_geometry(&self) -> bool {
        self.input_shape == [128, 128, 128] && self.num_classes == 1 && self.down_stages == 4
    }

    /// The layer sequence as pure geometry (no weights allocated).
    pub fn plan(&self) -> Vec<PlanEntry> {
        let mut plan = Vec::new();
        let widths = &self.channel_widths;
        let mut in_ch = self.input_channels();
        for &w in widths {
            plan.push(PlanEntry::Conv {
                in_ch,
                out_ch: w,
                stride: 2,
            });
            plan.push(PlanEntry::Relu);
            in_ch = w;
        }
        for stage in (0..self.down_stages).rev() {
            // Mirror widths; the last upsampling stage keeps the first width.
            let out_ch = if stage == 0 { widths[0] } else { widths[stage - 1] };
            plan.push(PlanEntry::TConv { in_ch, out_ch });
            plan.push(PlanEntry::Relu);
            plan.push(PlanEntry::Conv {
                in_ch: out_ch,
                out_ch,
                stride: 1,
            });
            plan.push(PlanEntry::Relu);
            in_ch = out_ch;
        }
        for _ in 0..3 {
            plan.push(PlanEntry::Conv {
                in_ch,
                out_ch: in_ch,
                stride: 1,
            });
            plan.push(PlanEntry::Relu);
        }
        plan.push(PlanEntry::Conv {
            in_ch,
            out_ch: self.num_classes,
            stride: 1,
        });
        plan.push(match self.final_activation {
            FinalActivation::Sigmoid => PlanEntry::Sigmoid,
            FinalActivation::Softmax => PlanEntry::Softmax,
        });
        plan
    }

    /// Spatial shape and channel count after every layer of the plan.
    pub fn shape_trace(&self) -> Vec<(Shape3, usize)> {
        let mut trace = vec![(self.input_shape, self.input_channels())];
        let mut shape = self.input_shape;
        let mut ch = self.input_channels();
        let k = self.kernel_size;
        let pad = (k - 1) / 2;
        for entry in self.plan() {
            match entry {
                PlanEntry::Conv { out_ch, stride, .. } => {
                    shape = [
                        nn::conv_out_dim(shape[0], k, stride, pad),
                        nn::conv_out_dim(shape[1], k, stride, pad),
                        nn::conv_out_dim(shape[2], k, stride, pad),
                    ];
                    ch = out_ch;
                }
                PlanEntry::TConv { out_ch, .. } => {
                    shape = [
                        nn::tconv_out_dim(shape[0], k, 2, pad, 1),
                        nn::tconv_out_dim(shape[1], k, 2, pad, 1),
                        nn::tconv_out_dim(shape[2], k, 2, pad, 1),
                    ];
                    ch = out_ch;
                }
                PlanEntry::Relu | PlanEntry::Sigmoid | PlanEntry::Softmax => {}
            }
            trace.push((shape, ch));
        }
        trace
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanEntry {
    Conv {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    TConv {
        in_ch: usize,
        out_ch: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv3d),
    TConv(ConvTranspose3d),
    Relu,
    Sigmoid,
    Softmax,
}

/// Whether the probabilities estimate the complete volume or only the
/// missing residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Full,
    Residual,
}

/// Network output: per-channel occupancy probabilities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub probabilities: Tensor,
    pub mode: OutputMode,
}

#[derive(Clone, Debug)]
pub struct Dae {
    pub config: DaeConfig,
    layers: Vec<Layer>,
}

/// Builds the network from its config. With `strict` a canonical-geometry
/// config whose parameter count leaves the published budget is an error;
/// otherwise it logs a warning.
pub fn build_dae(config: &DaeConfig, strict: bool) -> Result<Dae, NetworkError> {
    config.validate()?;
    let k = config.kernel_size;
    let layers = config
        .plan()
        .into_iter()
        .map(|entry| match entry {
            PlanEntry::Conv {
                in_ch,
                out_ch,
                stride,
            } => Layer::Conv(Conv3d::new(in_ch, out_ch, k, stride)),
            PlanEntry::TConv { in_ch, out_ch } => {
                Layer::TConv(ConvTranspose3d::new(in_ch, out_ch, k, 2))
            }
            PlanEntry::Relu => Layer::Relu,
            PlanEntry::Sigmoid => Layer::Sigmoid,
            PlanEntry::Softmax => Layer::Softmax,
        })
        .collect();
    let dae = Dae {
        config: config.clone(),
        layers,
    };
    if config.is_canonical_geometry() {
        let count = dae.count_parameters();
        let (lo, hi) = CANONICAL_PARAM_RANGE;
        if count < lo || count > hi {
            if strict {
                return Err(NetworkError::ParameterBudget { count, lo, hi });
            }
            log::warn!(
                "canonical-geometry config has {count} trainable parameters, outside [{lo}, {hi}]"
            );
        }
    }
    Ok(dae)
}

impl Dae {
    /// Fan-in-scaled uniform init for all weights; biases start at zero.
    pub fn init_weights(&mut self, rng: &mut ChaCha8Rng) {
        let k3 = self.config.kernel_size.pow(3);
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    let bound = (6.0 / (c.in_ch * k3) as f64).sqrt() as f32;
                    c.w.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
                    c.b.fill(0.0);
                }
                Layer::TConv(c) => {
                    let bound = (6.0 / (c.in_ch * k3) as f64).sqrt() as f32;
                    c.w.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
                    c.b.fill(0.0);
                }
                _ => {}
            }
        }
    }

    pub fn output_mode(&self) -> OutputMode {
        if self.config.residual {
            OutputMode::Residual
        } else {
            OutputMode::Full
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetworkError> {
        if x.shape != self.config.input_shape {
            return Err(NetworkError::ShapeMismatch {
                expected: self.config.input_shape,
                got: x.shape,
            });
        }
        Ok(())
    }

    /// Inference pass; intermediates are dropped as soon as possible.
    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput, NetworkError> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::TConv(c) => c.forward(&cur),
                Layer::Relu => nn::relu_forward(&cur),
                Layer::Sigmoid => nn::sigmoid_forward(&cur),
                Layer::Softmax => nn::softmax_forward(&cur),
            };
        }
        Ok(ModelOutput {
            probabilities: cur,
            mode: self.output_mode(),
        })
    }

    /// Training pass keeping every intermediate activation;
    /// `activations[0]` is the input, `activations[i + 1]` the output of
    /// layer `i`.
    pub fn forward_train(&self, x: Tensor) -> Result<Vec<Tensor>, NetworkError> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for layer in &self.layers {
            let cur = activations.last().unwrap();
            let next = match layer {
                Layer::Conv(c) => c.forward(cur),
                Layer::TConv(c) => c.forward(cur),
                Layer::Relu => nn::relu_forward(cur),
                Layer::Sigmoid => nn::sigmoid_forward(cur),
                Layer::Softmax => nn::softmax_forward(cur),
            };
            activations.push(next);
        }
        Ok(activations)
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the final activations)
    /// through the stack, accumulating parameter gradients.
    pub fn backward(&mut self, activations: &[Tensor], grad_out: Tensor) {
        assert_eq!(activations.len(), self.layers.len() + 1);
        let mut grad = grad_out;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &activations[i];
            let output = &activations[i + 1];
            grad = match layer {
                Layer::Conv(c) => c.backward(input, &grad),
                Layer::TConv(c) => c.backward(input, &grad),
                Layer::Relu => nn::relu_backward(output, &grad),
                Layer::Sigmoid => nn::sigmoid_backward(output, &grad),
                Layer::Softmax => nn::softmax_backward(output, &grad),
            };
        }
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    c.dw.fill(0.0);
                    c.db.fill(0.0);
                }
                Layer::TConv(c) => {
                    c.dw.fill(0.0);
                    c.db.fill(0.0);
                }
                _ => {}
            }
        }
    }

    /// Visits every (parameter, gradient) buffer pair in a fixed order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f32], &[f32])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(&mut c.w, &c.dw);
                    f(&mut c.b, &c.db);
                }
                Layer::TConv(c) => {
                    f(&mut c.w, &c.dw);
                    f(&mut c.b, &c.db);
                }
                _ => {}
            }
        }
    }

    /// Read-only traversal of parameter buffers, in the same order as
    /// [`Self::visit_params_mut`].
    pub fn visit_params(&self, mut f: impl FnMut(&[f32])) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    f(&c.w);
                    f(&c.b);
                }
                Layer::TConv(c) => {
                    f(&c.w);
                    f(&c.b);
                }
                _ => {}
            }
        }
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        let mut count = 0;
        self.visit_params(|p| count += p.len());
        count
    }

    /// Overwrites parameters from a flat buffer (checkpoint loading).
    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<(), NetworkError> {
        if flat.len() != self.count_parameters() {
            return Err(NetworkError::InvalidConfig(format!(
                "flat parameter buffer has {} values, model needs {}",
                flat.len(),
                self.count_parameters()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(|p, _| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.count_parameters());
        self.visit_params(|p| flat.extend_from_slice(p));
        flat
    }
}

/// Thresholded completion. In full mode the probabilities are compared to
/// the threshold directly; in residual mode the input is added first and
/// the sum clamped to `[0, 1]`, so an input foreground voxel (value 1)
/// always survives any threshold <= 1.
pub fn compose_completion(
    x: &BinaryVolume,
    out: &ModelOutput,
    threshold: f64,
) -> Result<BinaryVolume, NetworkError> {
    if out.probabilities.shape != x.shape() || out.probabilities.channels != 1 {
        return Err(NetworkError::ShapeMismatch {
            expected: x.shape(),
            got: out.probabilities.shape,
        });
    }
    let thr = threshold as f32;
    let data: Vec<u8> = match out.mode {
        OutputMode::Full => out
            .probabilities
            .data
            .iter()
            .map(|&p| (p >= thr) as u8)
            .collect(),
        OutputMode::Residual => x
            .data()
            .iter()
            .zip(&out.probabilities.data)
            .map(|(&xi, &ri)| (((xi as f32 + ri).clamp(0.0, 1.0)) >= thr) as u8)
            .collect(),
    };
    Ok(BinaryVolume::new(x.shape(), data, x.spacing())?)
}

/// Multi-class completion: channel argmax into a label map.
pub fn compose_labels(
    out: &ModelOutput,
    class_table: &std::collections::BTreeMap<u8, String>,
    spacing: [f64; 3],
) -> Result<LabelVolume, NetworkError> {
    let t = &out.probabilities;
    let n = t.voxels();
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_p = t.data[i];
        for c in 1..t.channels {
            let p = t.data[c * n + i];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        labels[i] = best as u8;
    }
    Ok(LabelVolume::new(
        t.shape,
        labels,
        spacing,
        class_table.clone(),
    )?)
}
