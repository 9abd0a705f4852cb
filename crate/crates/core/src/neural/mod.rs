//! A small dense-network stack for multimodal fusion.
//!
//! Each modality has an extractor ending in a `tanh` layer of width `d`; the
//! latents are stacked in the fixed order GPS, LiDAR, image, flattened, and
//! fed to a fusion head whose softmax output scores every beam pair.
//! The vehicle can compute its own latents and ship them to the edge
//! server, which appends the image latent and finishes the forward pass
//! ([`distributed`]).

pub mod distributed;
mod network;
mod train;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub use distributed::{decode_features, encode_features, mec_side_predict, vehicle_side_features};
pub use network::{concat_rows, extract_features, fuse, fusion_forward, loss_and_grad, predict, Example};
pub use train::{split_holdout, top1, train, EpochLog, TrainData, TrainOutcome, TrainState, Trainer};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Gps,
    Lidar,
    Image,
}

impl Modality {
    pub fn tag(self) -> char {
        match self {
            Modality::Gps => 'C',
            Modality::Lidar => 'L',
            Modality::Image => 'I',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Gps => "gps",
            Modality::Lidar => "lidar",
            Modality::Image => "image",
        }
    }

    /// Modalities sensed on the vehicle itself.
    pub fn on_vehicle(self) -> bool {
        !matches!(self, Modality::Image)
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gps" | "c" | "coord" | "coordinates" => Ok(Modality::Gps),
            "lidar" | "l" => Ok(Modality::Lidar),
            "image" | "i" | "camera" => Ok(Modality::Image),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation) -> Self {
        LayerSpec { width, activation, dropout: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub modality: Modality,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ExtractorSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    /// Ordered by modality (GPS, LiDAR, image).
    pub extractors: Vec<ExtractorSpec>,
    pub fusion_layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl ModelSpec {
    /// Two dense layers per extractor (16 wide for GPS, 64 otherwise) and a
    /// fusion head with one hidden layer of width `d`; `d = class_count`.
    pub fn desk_scale(inputs: &[(Modality, Vec<usize>)], class_count: usize) -> Self {
        let d = class_count;
        let mut extractors: Vec<ExtractorSpec> = inputs
            .iter()
            .map(|(m, shape)| {
                let hidden = if *m == Modality::Gps { 16 } else { 64 };
                ExtractorSpec {
                    modality: *m,
                    input_shape: shape.clone(),
                    layers: vec![LayerSpec::new(hidden, Activation::Relu), LayerSpec::new(d, Activation::Tanh)],
                }
            })
            .collect();
        extractors.sort_by_key(|e| e.modality);
        ModelSpec {
            latent_dim: d,
            extractors,
            fusion_layers: vec![LayerSpec::new(d, Activation::Relu), LayerSpec::new(class_count, Activation::Linear)],
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim;
        if d == 0 || self.class_count == 0 {
            return Err(Error::invalid("latent_dim and class_count must be positive"));
        }
        if self.extractors.is_empty() {
            return Err(Error::invalid("model needs at least one extractor"));
        }
        for pair in self.extractors.windows(2) {
            if pair[0].modality >= pair[1].modality {
                return Err(Error::invalid("extractors must be listed once each in order gps, lidar, image"));
            }
        }
        for e in &self.extractors {
            if e.input_len() == 0 {
                return Err(Error::invalid(format!("{} extractor has empty input", e.modality.name())));
            }
            match e.layers.last() {
                Some(l) if l.width == d && l.activation == Activation::Tanh => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "{} extractor must end in a tanh layer of width {d}",
                        e.modality.name()
                    )))
                }
            }
        }
        match self.fusion_layers.last() {
            Some(l) if l.width == self.class_count && l.activation == Activation::Linear => {}
            _ => {
                return Err(Error::invalid(format!(
                    "fusion head must end in a linear layer of width {}",
                    self.class_count
                )))
            }
        }
        let all = self.extractors.iter().flat_map(|e| &e.layers).chain(&self.fusion_layers);
        for l in all {
            if l.width == 0 || !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::invalid("layer widths must be positive and dropout in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.extractors.iter().map(|e| e.modality).collect()
    }

    pub fn extractor(&self, modality: Modality) -> Option<(usize, &ExtractorSpec)> {
        self.extractors.iter().enumerate().find(|(_, e)| e.modality == modality)
    }

    /// Dense layers in parameter order: extractors first, then the fusion head.
    pub fn layout(&self) -> Vec<DenseLayout> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, fan_in: usize, fan_out: usize, spec: &LayerSpec| {
            let w = offset..offset + fan_in * fan_out;
            let b = w.end..w.end + fan_out;
            offset = b.end;
            out.push(DenseLayout {
                name,
                fan_in,
                fan_out,
                activation: spec.activation,
                dropout: spec.dropout,
                weights: w,
                biases: b,
            });
        };
        for e in &self.extractors {
            let mut fan_in = e.input_len();
            for (i, l) in e.layers.iter().enumerate() {
                push(format!("{}/{i}", e.modality.name()), fan_in, l.width, l);
                fan_in = l.width;
            }
        }
        let mut fan_in = self.extractors.len() * self.latent_dim;
        for (i, l) in self.fusion_layers.iter().enumerate() {
            push(format!("fusion/{i}"), fan_in, l.width, l);
            fan_in = l.width;
        }
        out
    }
}

/// One dense layer's slice of the flat parameter vector. Weights are stored
/// input-major: `w[i * fan_out + o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayout {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub values: Vec<f64>,
    pub layout: Vec<DenseLayout>,
}

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let n = layout.last().map_or(0, |l| l.biases.end);
        Ok(Parameters { values: vec![0.0; n], layout })
    }

    /// Weights uniform in ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut p = Parameters::zeros(spec)?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        for l in &p.layout {
            let a = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut p.values[l.weights.clone()] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(p)
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        let mut p = Parameters::zeros(spec)?;
        if values.len() != p.values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        p.values = values;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_layers(&self) -> Vec<LayerWeights> {
        self.layout
            .iter()
            .map(|l| LayerWeights {
                name: l.name.clone(),
                fan_in: l.fan_in,
                fan_out: l.fan_out,
                weights: self.values[l.weights.clone()].to_vec(),
                biases: self.values[l.biases.clone()].to_vec(),
            })
            .collect()
    }

    /// Copies every layer of `src` whose name appears here; returns the
    /// names copied.
    pub fn copy_matching_layers(&mut self, src: &[LayerWeights]) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for lw in src {
            let Some(l) = self.layout.iter().find(|l| l.name == lw.name) else { continue };
            if lw.weights.len() != l.weights.len() || lw.biases.len() != l.biases.len() {
                return Err(Error::invalid(format!("layer `{}` has a different shape", lw.name)));
            }
            self.values[l.weights.clone()].copy_from_slice(&lw.weights);
            self.values[l.biases.clone()].copy_from_slice(&lw.biases);
            copied.push(lw.name.clone());
        }
        Ok(copied)
    }

    pub fn from_layers(spec: &ModelSpec, layers: &[LayerWeights]) -> Result<Self> {
        let mut p = Parameters::zeros(spec)?;
        if layers.len() != p.layout.len() {
            return Err(Error::invalid("layer count does not match the model spec"));
        }
        for (l, lw) in p.layout.iter().zip(layers) {
            if l.name != lw.name || lw.weights.len() != l.weights.len() || lw.biases.len() != l.biases.len() {
                return Err(Error::invalid(format!("layer `{}` does not match the model spec", lw.name)));
            }
            p.values[l.weights.clone()].copy_from_slice(&lw.weights);
            p.values[l.biases.clone()].copy_from_slice(&lw.biases);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub modality: Modality,
    pub z: Vec<f64>,
}

/// Softmax output over all beam pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub s: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn argmax(&self) -> usize {
        crate::channel::argmax_first(&self.s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub l1_dense: f64,
    pub l2_dense: f64,
    pub validation_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            l1_dense: 1e-5,
            l2_dense: 1e-4,
            validation_fraction: 0.17,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("learning_rate >= 0, batch_size and max_epochs > 0 required"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and epsilon be positive"));
        }
        if self.l1_dense < 0.0 || self.l2_dense < 0.0 {
            return Err(Error::invalid("regularization weights must be >= 0"));
        }
        Ok(())
    }
}
