//! Feed-forward network engine: models, traces, batch-averaged gradients.
//!
//! Two architectures are supported. `fcn3` is three fully connected layers
//! with relu between them. `cnn_bn` is conv → batch-norm → relu → flatten →
//! fully-connected → relu → classifier, the smallest net that exercises the
//! batch-norm modification path of the attack. The classifier head — the
//! final fully connected layer — is the layer whose gradients leak label
//! counts, so models expose its weight/bias and the embedding feeding it.

mod layers;
mod loss;

pub use layers::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, fc_backward, fc_forward, flatten_forward, relu_backward, relu_forward,
    BnStats,
};
pub use loss::{softmax, softmax_xent};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Free-function batch norm matching the layer's train-mode semantics.
pub fn batchnorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f64) -> Result<Tensor> {
    Ok(batchnorm_forward_train(x, gamma, beta, epsilon)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    FullyConnected {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        features: usize,
        epsilon: f64,
    },
    Relu,
    Flatten,
}

/// Parameters of one layer, mirroring its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    FullyConnected {
        /// [out, in]
        weight: Tensor,
        /// [out]
        bias: Tensor,
    },
    Conv2d {
        /// [out_ch, in_ch, k, k]
        weight: Tensor,
        /// [out_ch]
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        /// Tracked for eval-mode forward passes; never updated by the
        /// one-round simulator and carries no gradient.
        running_mean: Tensor,
        running_var: Tensor,
    },
    None,
}

/// Gradients of one layer's trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerGrads {
    FullyConnected { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    specs: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    /// Per-sample input shape, e.g. [784] or [1, 8, 8].
    input_shape: Vec<usize>,
    num_classes: usize,
    embedding_dim: usize,
}

/// Everything the backward pass and the attack need from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer, in layer order.
    layer_inputs: Vec<Tensor>,
    /// Final-layer output (the logits), [B, n].
    output: Tensor,
    /// Batch statistics per layer; Some only for train-mode batch norm.
    bn_stats: Vec<Option<BnStats>>,
    mode: Mode,
    batch_size: usize,
    model_fingerprint: u64,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Input of the classifier head, one row per sample: [B, m].
    pub fn embedding(&self) -> Matrix {
        let t = self.layer_inputs.last().expect("nonempty model");
        Matrix::from_tensor(t).expect("classifier input is rank 2")
    }

    /// Output of the classifier head, one row per sample: [B, n].
    pub fn logits(&self) -> Matrix {
        Matrix::from_tensor(&self.output).expect("logits are rank 2")
    }
}

impl Model {
    /// Build a model from layer specs, validating shape composition, and
    /// initialize parameters from `rng` with uniform(−1/√fan_in, +1/√fan_in).
    pub fn new<R: Rng>(specs: Vec<LayerSpec>, input_shape: Vec<usize>, rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Architecture("model with no layers".into()));
        }
        let mut shape = input_shape.clone();
        for (idx, spec) in specs.iter().enumerate() {
            shape = infer_output_shape(spec, &shape)
                .map_err(|e| Error::Architecture(format!("layer {idx}: {e}")))?;
        }
        let (num_classes, embedding_dim) = match specs.last().unwrap() {
            LayerSpec::FullyConnected { input, output } => (*output, *input),
            other => {
                return Err(Error::Architecture(format!(
                    "last layer must be fully connected, got {other:?}"
                )))
            }
        };
        let params = specs.iter().map(|s| init_layer(s, rng)).collect();
        Ok(Model {
            specs,
            params,
            input_shape,
            num_classes,
            embedding_dim,
        })
    }

    /// Three fully connected layers with relu activations.
    pub fn fcn3<R: Rng>(
        input_dim: usize,
        hidden: (usize, usize),
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Model::new(
            vec![
                LayerSpec::FullyConnected { input: input_dim, output: hidden.0 },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { input: hidden.0, output: hidden.1 },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { input: hidden.1, output: num_classes },
            ],
            vec![input_dim],
            rng,
        )
    }

    /// conv → batch-norm → relu → flatten → fully-connected → relu → classifier.
    pub fn cnn_bn<R: Rng>(
        input: (usize, usize, usize),
        channels: usize,
        kernel: usize,
        embedding: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, h, w) = input;
        if h < kernel || w < kernel {
            return Err(Error::Architecture(format!(
                "kernel {kernel} larger than {h}x{w} input"
            )));
        }
        let flat = channels * (h - kernel + 1) * (w - kernel + 1);
        Model::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: channels,
                    kernel,
                    stride: 1,
                },
                LayerSpec::BatchNorm { features: channels, epsilon: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected { input: flat, output: embedding },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { input: embedding, output: num_classes },
            ],
            vec![c, h, w],
            rng,
        )
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Index of the first batch-norm layer, if any.
    pub fn first_batchnorm(&self) -> Option<usize> {
        self.specs
            .iter()
            .position(|s| matches!(s, LayerSpec::BatchNorm { .. }))
    }

    /// Classifier-head weight as an n×m matrix.
    pub fn fcl_weight(&self) -> Matrix {
        match self.params.last().unwrap() {
            LayerParams::FullyConnected { weight, .. } => {
                Matrix::from_tensor(weight).expect("fcl weight is rank 2")
            }
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn fcl_bias(&self) -> &[f64] {
        match self.params.last().unwrap() {
            LayerParams::FullyConnected { bias, .. } => bias.data(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Number of trainable parameters (batch-norm running stats excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(layer_param_count).sum()
    }

    /// Trainable parameters flattened in layer order, weight before bias,
    /// gamma before beta.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            match p {
                LayerParams::FullyConnected { weight, bias }
                | LayerParams::Conv2d { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias.data());
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma.data());
                    out.extend_from_slice(beta.data());
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Overwrite trainable parameters from a flat vector laid out as
    /// `flatten_params` produces.
    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} elements, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            match p {
                LayerParams::FullyConnected { weight, bias }
                | LayerParams::Conv2d { weight, bias } => {
                    for t in [weight, bias] {
                        let n = t.len();
                        t.data_mut().copy_from_slice(&flat[off..off + n]);
                        t.validate()?;
                        off += n;
                    }
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    for t in [gamma, beta] {
                        let n = t.len();
                        t.data_mut().copy_from_slice(&flat[off..off + n]);
                        t.validate()?;
                        off += n;
                    }
                }
                LayerParams::None => {}
            }
        }
        Ok(())
    }

    /// Structural plus parameter hash; ties traces to the exact model that
    /// produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::seeding::derive_seed(0x6665_6466_6973_68, "model", 0);
        for spec in &self.specs {
            h = crate::seeding::derive_seed(h, &format!("{spec:?}"), 0);
        }
        for v in self.flatten_params() {
            h = h
                .rotate_left(13)
                .wrapping_mul(0x100_0000_01b3)
                .wrapping_add(v.to_bits());
        }
        h
    }

    /// Serialize to JSON. Shortest-round-trip float formatting makes the
    /// file bit-exact under `load`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Model = serde_json::from_str(&text)?;
        // Re-validate structure: serde accepts any well-formed JSON shape.
        let mut shape = model.input_shape.clone();
        for (idx, spec) in model.specs.iter().enumerate() {
            shape = infer_output_shape(spec, &shape)
                .map_err(|e| Error::Architecture(format!("layer {idx}: {e}")))?;
        }
        Ok(model)
    }
}

fn infer_output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    match spec {
        LayerSpec::FullyConnected { input: in_w, output } => {
            if input != [*in_w] {
                return Err(Error::Shape(format!(
                    "fully connected expects [{in_w}], got {input:?}"
                )));
            }
            Ok(vec![*output])
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => match *input {
            [c, h, w] => {
                if c != *in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                if h < *kernel || w < *kernel || *stride == 0 {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {kernel} stride {stride} on {h}x{w} input"
                    )));
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            _ => Err(Error::Shape(format!("conv2d expects [c,h,w], got {input:?}"))),
        },
        LayerSpec::BatchNorm { features, epsilon } => {
            if *epsilon <= 0.0 {
                return Err(Error::Shape("batch norm epsilon must be positive".into()));
            }
            let f = input.first().copied().unwrap_or(0);
            if f != *features || input.is_empty() || input.len() > 3 {
                return Err(Error::Shape(format!(
                    "batch norm over {features} features, got {input:?}"
                )));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn init_layer<R: Rng>(spec: &LayerSpec, rng: &mut R) -> LayerParams {
    let mut draw = |n: usize, fan_in: usize| -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![n], data).expect("finite init")
    };
    match spec {
        LayerSpec::FullyConnected { input, output } => {
            let weight = draw(output * input, *input)
                .reshape(vec![*output, *input])
                .unwrap();
            let bias = draw(*output, *input);
            LayerParams::FullyConnected { weight, bias }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let fan_in = in_channels * kernel * kernel;
            let weight = draw(out_channels * fan_in, fan_in)
                .reshape(vec![*out_channels, *in_channels, *kernel, *kernel])
                .unwrap();
            let bias = draw(*out_channels, fan_in);
            LayerParams::Conv2d { weight, bias }
        }
        LayerSpec::BatchNorm { features, .. } => LayerParams::BatchNorm {
            gamma: Tensor::full(vec![*features], 1.0).unwrap(),
            beta: Tensor::zeros(vec![*features]),
            running_mean: Tensor::zeros(vec![*features]),
            running_var: Tensor::full(vec![*features], 1.0).unwrap(),
        },
        LayerSpec::Relu | LayerSpec::Flatten => LayerParams::None,
    }
}

fn layer_param_count(p: &LayerParams) -> usize {
    match p {
        LayerParams::FullyConnected { weight, bias } | LayerParams::Conv2d { weight, bias } => {
            weight.len() + bias.len()
        }
        LayerParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
        LayerParams::None => 0,
    }
}

/// Run a batch through the model, recording everything backward needs.
pub fn forward(model: &Model, batch_inputs: &Tensor, mode: Mode) -> Result<ForwardTrace> {
    let shape = batch_inputs.shape();
    if shape.len() < 2 || &shape[1..] != model.input_shape() {
        return Err(Error::Shape(format!(
            "batch shape {shape:?} does not match per-sample input shape {:?}",
            model.input_shape()
        )));
    }
    let batch_size = shape[0];
    let mut x = batch_inputs.clone();
    let mut layer_inputs = Vec::with_capacity(model.specs.len());
    let mut bn_stats = vec![None; model.specs.len()];
    for (idx, (spec, params)) in model.specs.iter().zip(&model.params).enumerate() {
        layer_inputs.push(x.clone());
        let err = |e: Error| Error::Shape(format!("layer {idx} ({spec:?}): {e}"));
        x = match (spec, params) {
            (LayerSpec::FullyConnected { .. }, LayerParams::FullyConnected { weight, bias }) => {
                fc_forward(&x, weight, bias).map_err(err)?
            }
            (LayerSpec::Conv2d { stride, .. }, LayerParams::Conv2d { weight, bias }) => {
                conv2d_forward(&x, weight, bias, *stride).map_err(err)?
            }
            (
                LayerSpec::BatchNorm { epsilon, .. },
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
            ) => match mode {
                Mode::Train => {
                    let (out, stats) =
                        batchnorm_forward_train(&x, gamma, beta, *epsilon).map_err(err)?;
                    bn_stats[idx] = Some(stats);
                    out
                }
                Mode::Eval => {
                    batchnorm_forward_eval(&x, gamma, beta, running_mean, running_var, *epsilon)
                        .map_err(err)?
                }
            },
            (LayerSpec::Relu, _) => relu_forward(&x),
            (LayerSpec::Flatten, _) => flatten_forward(&x).map_err(err)?,
            _ => unreachable!("specs and params are built together"),
        };
    }
    Ok(ForwardTrace {
        layer_inputs,
        output: x,
        bn_stats,
        mode,
        batch_size,
        model_fingerprint: model.fingerprint(),
    })
}

/// Batch-averaged gradients for every trainable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    layers: Vec<LayerGrads>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .params
            .iter()
            .map(|p| match p {
                LayerParams::FullyConnected { weight, bias } => LayerGrads::FullyConnected {
                    weight: Tensor::zeros(weight.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                },
                LayerParams::Conv2d { weight, bias } => LayerGrads::Conv2d {
                    weight: Tensor::zeros(weight.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                },
                LayerParams::BatchNorm { gamma, beta, .. } => LayerGrads::BatchNorm {
                    gamma: Tensor::zeros(gamma.shape().to_vec()),
                    beta: Tensor::zeros(beta.shape().to_vec()),
                },
                LayerParams::None => LayerGrads::None,
            })
            .collect();
        GradientSet { layers }
    }

    pub fn layers(&self) -> &[LayerGrads] {
        &self.layers
    }

    /// Classifier-head weight gradient, n×m.
    pub fn fcl_weight(&self) -> Result<Matrix> {
        match self.layers.last() {
            Some(LayerGrads::FullyConnected { weight, .. }) => Matrix::from_tensor(weight),
            _ => Err(Error::Contract(
                "gradient set does not end in a fully connected layer".into(),
            )),
        }
    }

    /// Classifier-head bias gradient, length n.
    pub fn fcl_bias(&self) -> Result<&[f64]> {
        match self.layers.last() {
            Some(LayerGrads::FullyConnected { bias, .. }) => Ok(bias.data()),
            _ => Err(Error::Contract(
                "gradient set does not end in a fully connected layer".into(),
            )),
        }
    }

    pub fn param_count(&self) -> usize {
        self.iter_tensors().map(Tensor::len).sum()
    }

    fn iter_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| match l {
            LayerGrads::FullyConnected { weight, bias } | LayerGrads::Conv2d { weight, bias } => {
                vec![weight, bias]
            }
            LayerGrads::BatchNorm { gamma, beta } => vec![gamma, beta],
            LayerGrads::None => vec![],
        })
    }

    fn iter_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| match l {
            LayerGrads::FullyConnected { weight, bias } | LayerGrads::Conv2d { weight, bias } => {
                vec![weight, bias]
            }
            LayerGrads::BatchNorm { gamma, beta } => vec![gamma, beta],
            LayerGrads::None => vec![],
        })
    }

    /// Flatten in the same order as `Model::flatten_params`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.iter_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild from a flat vector with this set's shapes.
    pub fn from_flat(template: &GradientSet, flat: &[f64]) -> Result<GradientSet> {
        if flat.len() != template.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} elements, template has {}",
                flat.len(),
                template.param_count()
            )));
        }
        let mut out = template.clone();
        let mut off = 0;
        for t in out.iter_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            t.validate()?;
            off += n;
        }
        Ok(out)
    }

    /// Elementwise accumulate; shape mismatch is a contract error.
    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() || self.param_count() != other.param_count() {
            return Err(Error::Contract("gradient sets have different shapes".into()));
        }
        for (a, b) in self.iter_tensors_mut().zip(other.iter_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Contract("gradient sets have different shapes".into()));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.iter_tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Batch-averaged backward pass from a train-mode trace.
pub fn backward(model: &Model, trace: &ForwardTrace, labels: &[usize]) -> Result<GradientSet> {
    if trace.mode != Mode::Train {
        return Err(Error::Contract("backward needs a train-mode trace".into()));
    }
    if trace.model_fingerprint != model.fingerprint() {
        return Err(Error::Contract(
            "trace was produced by a different model".into(),
        ));
    }
    if labels.len() != trace.batch_size {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            trace.batch_size
        )));
    }
    let b = trace.batch_size;
    let (_, dl_dy) = softmax_xent(&trace.logits(), labels)?;
    // Batch averaging happens once, up front.
    let mut delta = {
        let mut d = dl_dy.to_tensor();
        for v in d.data_mut() {
            *v /= b as f64;
        }
        d
    };
    let mut grads = GradientSet::zeros_like(model);
    for idx in (0..model.specs.len()).rev() {
        let x = &trace.layer_inputs[idx];
        match (&model.specs[idx], &model.params[idx]) {
            (LayerSpec::FullyConnected { .. }, LayerParams::FullyConnected { weight, .. }) => {
                let (dw, db, dx) = fc_backward(x, weight, &delta)?;
                grads.layers[idx] = LayerGrads::FullyConnected { weight: dw, bias: db };
                delta = dx;
            }
            (LayerSpec::Conv2d { stride, .. }, LayerParams::Conv2d { weight, .. }) => {
                let (dw, db, dx) = conv2d_backward(x, weight, &delta, *stride)?;
                grads.layers[idx] = LayerGrads::Conv2d { weight: dw, bias: db };
                delta = dx;
            }
            (LayerSpec::BatchNorm { epsilon, .. }, LayerParams::BatchNorm { gamma, .. }) => {
                let stats = trace.bn_stats[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Contract("missing batch-norm statistics".into()))?;
                let (dg, dbeta, dx) = batchnorm_backward(x, gamma, stats, *epsilon, &delta)?;
                grads.layers[idx] = LayerGrads::BatchNorm { gamma: dg, beta: dbeta };
                delta = dx;
            }
            (LayerSpec::Relu, _) => {
                delta = relu_backward(x, &delta);
            }
            (LayerSpec::Flatten, _) => {
                delta = delta.reshape(x.shape().to_vec())?;
            }
            _ => unreachable!("specs and params are built together"),
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests;
