//! Desk-scale differentiable image classifier.
//!
//! A small convolutional network in double precision with hand-written
//! backward passes. Besides parameter gradients it exposes input gradients and
//! a forward-mode pass over the backward computation (via [`Dual`] numbers),
//! which yields `∇_x (v · ∇_θ L)` exactly. The poisoner needs that mixed
//! derivative to differentiate gradient-matching losses with respect to pixels.

mod layers;
mod scalar;
mod train;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{infer_shapes, LayerSpec, LayerTensors, Shape};
pub use scalar::{Dual, Scalar};
pub use train::{evaluate, schedule_lr, train, Schedule, TrainConfig, TrainOutcome};

use layers::Aux;

use crate::error::{Error, Result};
use crate::semantics::{ImageRecord, SemanticTag, CHANNELS, IMAGE_BYTES, IMAGE_SIDE, NUM_CLASSES};

pub const INPUT_SHAPE: Shape = Shape {
    c: CHANNELS,
    h: IMAGE_SIDE,
    w: IMAGE_SIDE,
};

/// Default architecture: two conv/ReLU/max-pool blocks and a dense readout.
pub fn desk_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Convolution {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Convolution {
            in_channels: 8,
            out_channels: 16,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Dense {
            inputs: 16 * 8 * 8,
            outputs: NUM_CLASSES,
        },
        LayerSpec::SoftmaxReadout,
    ]
}

/// Per-layer parameter gradients, aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub layers: Vec<LayerTensors>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradientSet {
            layers: model
                .params
                .iter()
                .map(|p| LayerTensors::zeros(p.weights.len(), p.bias.len()))
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Iterates the scalars of layer `l` (weights then biases).
    pub fn layer_values(&self, l: usize) -> impl Iterator<Item = f64> + '_ {
        self.layers[l].weights.iter().chain(&self.layers[l].bias).copied()
    }

    pub fn layer_dot(&self, other: &GradientSet, l: usize) -> f64 {
        self.layer_values(l).zip(other.layer_values(l)).map(|(a, b)| a * b).sum()
    }

    pub fn layer_norm_sq(&self, l: usize) -> f64 {
        self.layer_values(l).map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        (0..self.layers.len()).map(|l| self.layer_norm_sq(l)).sum::<f64>().sqrt()
    }

    pub fn is_congruent(&self, other: &GradientSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len())
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &GradientSet, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += k * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += k * y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.layers {
            a.weights.iter_mut().for_each(|x| *x *= k);
            a.bias.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        (0..self.layers.len()).all(|l| self.layer_values(l).all(f64::is_finite))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub top_tag: SemanticTag,
    pub confidence: f64,
}

/// Which scalar the input gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    CrossEntropy,
    /// The raw logit of the label class.
    Logit,
}

/// Layer spec plus parameters for every parametric layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    pub params: Vec<LayerTensors>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    spec: Vec<LayerSpec>,
    params: Vec<LayerTensors>,
}

const MODEL_FORMAT: &str = "deceptive-vis-model";

/// He-normal weights, zero biases, deterministic in `seed`.
pub fn init_model(spec: &[LayerSpec], seed: u64) -> Result<Model> {
    let shapes = infer_shapes(spec, INPUT_SHAPE, NUM_CLASSES)?;
    let mut params = Vec::new();
    for (i, layer) in spec.iter().enumerate() {
        if let Some((nw, nb, fan_in)) = layer.param_shape() {
            let mut rng = crate::seed::rng(seed, &[crate::seed::label("init"), i as u64]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params.push(LayerTensors {
                weights: (0..nw).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; nb],
            });
        }
    }
    Ok(Model {
        spec: spec.to_vec(),
        shapes,
        params,
    })
}

impl Model {
    /// Builds a model from explicit parameters, checking shapes.
    pub fn from_parts(spec: Vec<LayerSpec>, params: Vec<LayerTensors>) -> Result<Self> {
        let shapes = infer_shapes(&spec, INPUT_SHAPE, NUM_CLASSES)?;
        let expected: Vec<_> = spec.iter().filter_map(LayerSpec::param_shape).collect();
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(&params)
                .any(|(&(nw, nb, _), p)| p.weights.len() != nw || p.bias.len() != nb)
        {
            return Err(Error::ShapeMismatch("parameter tensors do not match spec".into()));
        }
        Ok(Model { spec, shapes, params })
    }

    pub fn spec(&self) -> &[LayerSpec] {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(LayerTensors::len).sum()
    }

    pub fn num_param_layers(&self) -> usize {
        self.params.len()
    }

    pub fn predict(&self, input_hwc: &[f64]) -> PredictOutcome {
        let (acts, _) = run_forward(&self.spec, &self.shapes, &self.params, hwc_to_chw(input_hwc));
        outcome(acts.last().expect("non-empty activations").clone())
    }

    pub fn classify(&self, image: &ImageRecord) -> SemanticTag {
        forward(self, image).top_tag
    }

    /// Cross-entropy loss and parameter gradients at a continuous input.
    pub fn loss_and_grads(&self, input_hwc: &[f64], label: SemanticTag) -> (f64, GradientSet) {
        let (acts, aux) = run_forward(&self.spec, &self.shapes, &self.params, hwc_to_chw(input_hwc));
        let (loss, dlogits) = ce_and_grad(acts.last().expect("logits"), label);
        let mut grads = GradientSet::zeros_like(self).layers;
        run_backward(&self.spec, &self.shapes, &self.params, &acts, &aux, dlogits, Some(&mut grads));
        (loss, GradientSet { layers: grads })
    }

    /// One pass with parameters `θ + ε·tangent` (dual numbers). Returns
    /// `(∇_x CE(x, label), ∇_x (tangent · ∇_θ CE(x, label)))`, both in HWC order.
    pub fn input_gradient_with_tangent(
        &self,
        input_hwc: &[f64],
        label: SemanticTag,
        tangent: &GradientSet,
    ) -> (Vec<f64>, Vec<f64>) {
        let params: Vec<LayerTensors<Dual>> = self
            .params
            .iter()
            .zip(&tangent.layers)
            .map(|(p, t)| LayerTensors {
                weights: p.weights.iter().zip(&t.weights).map(|(&a, &b)| Dual::new(a, b)).collect(),
                bias: p.bias.iter().zip(&t.bias).map(|(&a, &b)| Dual::new(a, b)).collect(),
            })
            .collect();
        let input: Vec<Dual> = hwc_to_chw(input_hwc).into_iter().map(Dual::from_f64).collect();
        let (acts, aux) = run_forward(&self.spec, &self.shapes, &params, input);
        let (_, dlogits) = ce_and_grad(acts.last().expect("logits"), label);
        let dx = run_backward(&self.spec, &self.shapes, &params, &acts, &aux, dlogits, None);
        let dx = chw_to_hwc(&dx);
        (dx.iter().map(|d| d.re).collect(), dx.iter().map(|d| d.eps).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format != MODEL_FORMAT || file.version != 1 {
            return Err(Error::Serde(format!(
                "unsupported model container {} v{}",
                file.format, file.version
            )));
        }
        Model::from_parts(file.spec, file.params)
    }
}

/// Normalized [0, 1] HWC tensor of an image.
pub fn image_to_tensor(image: &ImageRecord) -> Vec<f64> {
    image.pixels().iter().map(|&p| p as f64 / 255.0).collect()
}

pub fn forward(model: &Model, image: &ImageRecord) -> PredictOutcome {
    model.predict(&image_to_tensor(image))
}

/// `-log softmax(logits)[label]`, computed with a shifted log-sum-exp.
pub fn loss_crossentropy(logits: &[f64], label: SemanticTag) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label.index()]
}

pub fn backward(model: &Model, image: &ImageRecord, label: SemanticTag) -> GradientSet {
    model.loss_and_grads(&image_to_tensor(image), label).1
}

/// Gradient of the selected loss with respect to the normalized HWC input.
pub fn grad_wrt_input(model: &Model, input_hwc: &[f64], label: SemanticTag, loss: LossSelector) -> Vec<f64> {
    let (acts, aux) = run_forward(&model.spec, &model.shapes, &model.params, hwc_to_chw(input_hwc));
    let logits = acts.last().expect("logits");
    let dlogits = match loss {
        LossSelector::CrossEntropy => ce_and_grad(logits, label).1,
        LossSelector::Logit => {
            let mut d = vec![0.0; logits.len()];
            d[label.index()] = 1.0;
            d
        }
    };
    chw_to_hwc(&run_backward(&model.spec, &model.shapes, &model.params, &acts, &aux, dlogits, None))
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(model: &Model, grads: &GradientSet, lr: f64) -> Result<Model> {
    let mut next = model.clone();
    sgd_step_in_place(&mut next, grads, lr)?;
    Ok(next)
}

pub(crate) fn sgd_step_in_place(model: &mut Model, grads: &GradientSet, lr: f64) -> Result<()> {
    if !GradientSet::zeros_like(model).is_congruent(grads) {
        return Err(Error::ShapeMismatch("gradient set does not match model".into()));
    }
    for (p, g) in model.params.iter_mut().zip(&grads.layers) {
        p.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
        p.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
    }
    Ok(())
}

fn outcome(logits: Vec<f64>) -> PredictOutcome {
    let probabilities = softmax(&logits);
    let mut top = 0;
    for (i, z) in logits.iter().enumerate() {
        if *z > logits[top] {
            top = i;
        }
    }
    PredictOutcome {
        confidence: probabilities[top],
        top_tag: SemanticTag::from_index(top).expect("10 logits"),
        logits,
        probabilities,
    }
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().map(|z| z.re()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - T::from_f64(max)).exp()).collect();
    let mut sum = T::default();
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

fn ce_and_grad<T: Scalar>(logits: &[T], label: SemanticTag) -> (T, Vec<T>) {
    let mut probs = softmax(logits);
    let loss = -probs[label.index()].ln();
    probs[label.index()] = probs[label.index()] - T::from_f64(1.0);
    (loss, probs)
}

fn hwc_to_chw<T: Scalar>(x: &[f64]) -> Vec<T> {
    assert_eq!(x.len(), IMAGE_BYTES, "input tensor must be 32x32x3");
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = vec![T::default(); IMAGE_BYTES];
    for p in 0..plane {
        for c in 0..CHANNELS {
            out[c * plane + p] = T::from_f64(x[p * CHANNELS + c]);
        }
    }
    out
}

fn chw_to_hwc<T: Scalar>(x: &[T]) -> Vec<T> {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = vec![T::default(); IMAGE_BYTES];
    for p in 0..plane {
        for c in 0..CHANNELS {
            out[p * CHANNELS + c] = x[c * plane + p];
        }
    }
    out
}

type Activations<T> = (Vec<Vec<T>>, Vec<Aux>);

fn run_forward<T: Scalar>(
    spec: &[LayerSpec],
    shapes: &[Shape],
    params: &[LayerTensors<T>],
    input: Vec<T>,
) -> Activations<T> {
    let mut acts = Vec::with_capacity(spec.len() + 1);
    let mut aux = Vec::with_capacity(spec.len());
    acts.push(input);
    let mut pi = 0;
    for (i, layer) in spec.iter().enumerate() {
        let x = &acts[i];
        let s = shapes[i];
        let (y, a) = match *layer {
            LayerSpec::Convolution {
                out_channels, kernel, ..
            } => {
                pi += 1;
                (layers::conv_forward(x, s, out_channels, kernel, &params[pi - 1]), Aux::None)
            }
            LayerSpec::Dense { outputs, .. } => {
                pi += 1;
                (layers::dense_forward(x, outputs, &params[pi - 1]), Aux::None)
            }
            LayerSpec::Relu => (
                x.iter().map(|&v| if v.re() > 0.0 { v } else { T::default() }).collect(),
                Aux::None,
            ),
            LayerSpec::Tanh => (x.iter().map(|&v| v.tanh()).collect(), Aux::None),
            LayerSpec::AvgPool { size } => layers::pool_forward(x, s, size, false),
            LayerSpec::MaxPool { size } => layers::pool_forward(x, s, size, true),
            LayerSpec::SoftmaxReadout => (x.clone(), Aux::None),
        };
        acts.push(y);
        aux.push(a);
    }
    (acts, aux)
}

fn run_backward<T: Scalar>(
    spec: &[LayerSpec],
    shapes: &[Shape],
    params: &[LayerTensors<T>],
    acts: &[Vec<T>],
    aux: &[Aux],
    dlogits: Vec<T>,
    mut grads: Option<&mut Vec<LayerTensors<T>>>,
) -> Vec<T> {
    let mut d = dlogits;
    let mut pi = params.len();
    for (i, layer) in spec.iter().enumerate().rev() {
        let x = &acts[i];
        let s = shapes[i];
        d = match *layer {
            LayerSpec::Convolution {
                out_channels, kernel, ..
            } => {
                pi -= 1;
                let g = grads.as_deref_mut().map(|g| &mut g[pi]);
                layers::conv_backward(x, s, out_channels, kernel, &params[pi], &d, g)
            }
            LayerSpec::Dense { outputs, .. } => {
                pi -= 1;
                let g = grads.as_deref_mut().map(|g| &mut g[pi]);
                layers::dense_backward(x, outputs, &params[pi], &d, g)
            }
            LayerSpec::Relu => x
                .iter()
                .zip(&d)
                .map(|(&v, &g)| if v.re() > 0.0 { g } else { T::default() })
                .collect(),
            LayerSpec::Tanh => acts[i + 1]
                .iter()
                .zip(&d)
                .map(|(&y, &g)| g * (T::from_f64(1.0) - y * y))
                .collect(),
            LayerSpec::AvgPool { size } | LayerSpec::MaxPool { size } => {
                layers::pool_backward(s, size, &aux[i], &d)
            }
            LayerSpec::SoftmaxReadout => d,
        };
    }
    d
}
