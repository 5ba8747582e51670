//! Minimal neural-network kernel: sequential layer stacks, forward/backward
//! passes, cross-entropy and distillation losses, and mini-batch SGD.
//!
//! Models are described by an [`Architecture`] (an ordered list of
//! [`LayerSpec`]s plus an input shape) and trained parameters live in
//! [`ModelParams`]. All convolutions use "same" padding with the TensorFlow
//! convention: an input extent `n` maps to `ceil(n / stride)` outputs.

mod layers;
mod loss;
mod train;

pub use layers::{backward, forward, forward_eval, ForwardCache, Gradients};
pub use loss::{ce_loss_and_grad, kd_loss_and_grad};
pub use train::{sgd_train, sgd_train_view, DataView, TrainConfig};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointwise nonlinearity applied as its own layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative-side slope.
    LeakyRelu(f64),
    /// Softmax over the trailing dimension.
    Softmax,
}

/// One layer of a sequential model. Convolutions and pooling always use
/// "same" padding; that is the only padding mode the architectures need.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv2d { filters: usize, kernel: (usize, usize), stride: (usize, usize) },
    Conv1d { filters: usize, kernel: usize, stride: usize },
    MaxPool1d { pool: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
    Activation(Activation),
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Activation(_) => "activation",
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::ModelBuild(format!("layer {index} ({}): {msg}", self.kind())));
        match self {
            LayerSpec::Dense { units } if *units == 0 => bad("units must be positive".into()),
            LayerSpec::Conv2d { filters, kernel, stride } => {
                if *filters == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return bad("filters and kernel size must be positive".into());
                }
                if stride.0 == 0 || stride.1 == 0 {
                    return bad("stride must be >= 1".into());
                }
                Ok(())
            }
            LayerSpec::Conv1d { filters, kernel, stride } => {
                if *filters == 0 || *kernel == 0 {
                    return bad("filters and kernel size must be positive".into());
                }
                if *stride == 0 {
                    return bad("stride must be >= 1".into());
                }
                Ok(())
            }
            LayerSpec::MaxPool1d { pool, stride } => {
                if *pool == 0 || *stride == 0 {
                    return bad("pool size and stride must be >= 1".into());
                }
                Ok(())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(())
            }
            LayerSpec::Activation(Activation::LeakyRelu(slope)) if !slope.is_finite() => {
                bad("leaky relu slope must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

/// Output length of a same-padded strided window over `n` positions.
pub fn same_out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Leading padding for a same-padded window (TensorFlow convention:
/// the extra element of an odd total goes at the end).
pub(crate) fn same_pad_begin(n: usize, kernel: usize, stride: usize) -> usize {
    let out = same_out_len(n, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(n);
    total / 2
}

/// A named layer chain with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    id: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Validate the chain eagerly so shape mismatches surface at
    /// construction, naming the offending pair of layers.
    pub fn new(id: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture {
            id: id.into(),
            input_shape,
            layers,
        };
        if arch.input_shape.is_empty() || arch.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::ModelBuild(format!(
                "architecture '{}': input shape {:?} must be non-empty and positive",
                arch.id, arch.input_shape
            )));
        }
        for (i, layer) in arch.layers.iter().enumerate() {
            layer.validate(i)?;
        }
        arch.output_shapes()?;
        Ok(arch)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of every layer, in order.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let prev_desc = if i == 0 {
                format!("input {:?}", self.input_shape)
            } else {
                format!("{} (layer {})", self.layers[i - 1].kind(), i - 1)
            };
            let mismatch = |need: &str, got: &[usize]| {
                Error::ModelBuild(format!(
                    "architecture '{}': {} (layer {}) needs {}, but {} produces {:?}",
                    self.id,
                    layer.kind(),
                    i,
                    need,
                    prev_desc,
                    got
                ))
            };
            cur = match layer {
                LayerSpec::Dense { units } => {
                    if cur.len() != 1 {
                        return Err(mismatch("a flat feature vector", &cur));
                    }
                    vec![*units]
                }
                LayerSpec::Conv2d { filters, stride, .. } => {
                    if cur.len() != 3 {
                        return Err(mismatch("a (height, width, channels) input", &cur));
                    }
                    vec![
                        same_out_len(cur[0], stride.0),
                        same_out_len(cur[1], stride.1),
                        *filters,
                    ]
                }
                LayerSpec::Conv1d { filters, stride, .. } => {
                    if cur.len() != 2 {
                        return Err(mismatch("a (length, channels) input", &cur));
                    }
                    vec![same_out_len(cur[0], *stride), *filters]
                }
                LayerSpec::MaxPool1d { stride, .. } => {
                    if cur.len() != 2 {
                        return Err(mismatch("a (length, channels) input", &cur));
                    }
                    vec![same_out_len(cur[0], *stride), cur[1]]
                }
                LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => cur,
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Number of classes the model predicts (length of the final output).
    pub fn class_count(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let last = shapes
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone());
        if last.len() != 1 {
            return Err(Error::ModelBuild(format!(
                "architecture '{}': final output {:?} is not a class vector",
                self.id, last
            )));
        }
        Ok(last[0])
    }
}

/// Weights and biases for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// Trained parameters bound to an architecture. Only dense and convolution
/// layers carry entries; their order follows the layer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn architecture_id(&self) -> &str {
        self.arch.id()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.arch.id() == other.arch.id()
    }

    /// Append every parameter value, weights then biases per layer, to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.biases.data());
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.biases.all_finite())
    }
}

/// Streaming mean of parameter sets, optionally weighted.
///
/// Uses the incremental update `m += (x - m) * w / W` so averaging identical
/// parameter sets reproduces them bit for bit.
pub struct ParamMean {
    acc: Option<ModelParams>,
    weight_sum: f64,
}

impl ParamMean {
    pub fn new() -> Self {
        ParamMean {
            acc: None,
            weight_sum: 0.0,
        }
    }

    pub fn push(&mut self, params: &ModelParams, weight: f64) -> Result<()> {
        if weight <= 0.0 || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "aggregation weight {weight} must be positive and finite"
            )));
        }
        match &mut self.acc {
            None => {
                self.acc = Some(params.clone());
                self.weight_sum = weight;
            }
            Some(acc) => {
                if !acc.same_architecture(params) {
                    return Err(Error::Shape(format!(
                        "cannot average '{}' parameters into '{}'",
                        params.architecture_id(),
                        acc.architecture_id()
                    )));
                }
                self.weight_sum += weight;
                let f = weight / self.weight_sum;
                for (a, p) in acc.layers.iter_mut().zip(&params.layers) {
                    for (av, pv) in a.weights.data_mut().iter_mut().zip(p.weights.data()) {
                        *av += (pv - *av) * f;
                    }
                    for (av, pv) in a.biases.data_mut().iter_mut().zip(p.biases.data()) {
                        *av += (pv - *av) * f;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ModelParams> {
        self.acc
            .ok_or_else(|| Error::InvalidArgument("cannot average zero parameter sets".into()))
    }
}

impl Default for ParamMean {
    fn default() -> Self {
        Self::new()
    }
}

/// Initialize parameters for an architecture: He-style uniform weights with
/// fan-in scaling (`limit = sqrt(6 / fan_in)`), zero biases. Deterministic
/// for a fixed seed.
pub fn build_model(arch: &Architecture, rng_seed: u64) -> Result<ModelParams> {
    arch.output_shapes()?; // surfaces construction errors
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut cur = arch.input_shape().to_vec();
    let mut layers = Vec::new();
    for layer in arch.layers() {
        match layer {
            LayerSpec::Dense { units } => {
                let fan_in = cur[0];
                layers.push(init_layer(&mut rng, vec![fan_in, *units], vec![*units], fan_in));
                cur = vec![*units];
            }
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let in_ch = cur[2];
                let fan_in = kernel.0 * kernel.1 * in_ch;
                layers.push(init_layer(
                    &mut rng,
                    vec![kernel.0, kernel.1, in_ch, *filters],
                    vec![*filters],
                    fan_in,
                ));
                cur = vec![
                    same_out_len(cur[0], stride.0),
                    same_out_len(cur[1], stride.1),
                    *filters,
                ];
            }
            LayerSpec::Conv1d { filters, kernel, stride } => {
                let in_ch = cur[1];
                let fan_in = kernel * in_ch;
                layers.push(init_layer(
                    &mut rng,
                    vec![*kernel, in_ch, *filters],
                    vec![*filters],
                    fan_in,
                ));
                cur = vec![same_out_len(cur[0], *stride), *filters];
            }
            LayerSpec::MaxPool1d { stride, .. } => {
                cur = vec![same_out_len(cur[0], *stride), cur[1]];
            }
            LayerSpec::Flatten => cur = vec![cur.iter().product()],
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => {}
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        layers,
    })
}

fn init_layer(
    rng: &mut ChaCha8Rng,
    weight_shape: Vec<usize>,
    bias_shape: Vec<usize>,
    fan_in: usize,
) -> LayerParams {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = weight_shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit).collect();
    LayerParams {
        weights: Tensor::new(weight_shape, data).expect("init shape is consistent"),
        biases: Tensor::zeros(bias_shape),
    }
}

/// Model catalog used by the experiments.
pub mod architectures {
    use super::{Activation, Architecture, LayerSpec};

    fn conv2(filters: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            filters,
            kernel: (3, 3),
            stride: (2, 2),
        }
    }

    /// 28x28x1 -> four strided 3x3 conv blocks (32/64/64/64) -> dense 10.
    pub fn mnist_teacher() -> Architecture {
        Architecture::new(
            "mnist_teacher",
            vec![28, 28, 1],
            vec![
                conv2(32),
                LayerSpec::Activation(Activation::Relu),
                conv2(64),
                LayerSpec::Activation(Activation::Relu),
                conv2(64),
                LayerSpec::Activation(Activation::Relu),
                conv2(64),
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 10 },
            ],
        )
        .expect("static architecture is valid")
    }

    /// Lightweight MNIST model: conv filters 32/16/16/64 -> dense 10.
    pub fn mnist_student() -> Architecture {
        Architecture::new(
            "mnist_student",
            vec![28, 28, 1],
            vec![
                conv2(32),
                LayerSpec::Activation(Activation::Relu),
                conv2(16),
                LayerSpec::Activation(Activation::Relu),
                conv2(16),
                LayerSpec::Activation(Activation::Relu),
                conv2(64),
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 10 },
            ],
        )
        .expect("static architecture is valid")
    }

    fn har_chain(first_filters: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                filters: first_filters,
                kernel: 3,
                stride: 2,
            },
            LayerSpec::Activation(Activation::LeakyRelu(0.2)),
            LayerSpec::MaxPool1d { pool: 2, stride: 1 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Conv1d {
                filters: 256,
                kernel: 3,
                stride: 2,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 128 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dense { units: 6 },
        ]
    }

    /// 561x1 -> conv1d 128 -> leaky relu -> pool -> dropout -> conv1d 256
    /// -> dense 128 -> dense 6.
    pub fn har_teacher() -> Architecture {
        Architecture::new("har_teacher", vec![561, 1], har_chain(128))
            .expect("static architecture is valid")
    }

    /// HAR model with 64 first-stage filters.
    pub fn har_student() -> Architecture {
        Architecture::new("har_student", vec![561, 1], har_chain(64))
            .expect("static architecture is valid")
    }
}
