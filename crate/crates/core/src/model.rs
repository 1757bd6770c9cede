//! Quantized fully connected models and their JSON file format.
//!
//! ```json
//! {"name": "...", "task": "classify" | "reconstruct",
//!  "layers": [{"in": 784, "out": 64, "weights": [...row-major...],
//!              "bias": [...int32...], "input_scale": 0.0039, "input_zp": -128,
//!              "requant_scales": [...], "output_scale": 0.05, "output_zp": -128,
//!              "activation": "relu", "placement": "macro"}]}
//! ```
//!
//! Weights are signed 4-bit, output-channel-major (`weights[j * in + k]`).
//! `output_scale` is optional except on the last layer of a `reconstruct`
//! model. `placement` defaults to `macro`; `host` layers run on the host
//! instead of through the weight memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::WeightNibble;
use crate::error::{Error, Result};
use crate::nmcu::{activate, requantize, Activation, LayerDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Reconstruct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Macro,
    Host,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    pub weights: Vec<i64>,
    pub bias: Vec<i64>,
    pub input_scale: f64,
    pub input_zp: i32,
    pub requant_scales: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_scale: Option<f64>,
    pub output_zp: i32,
    pub activation: Activation,
    #[serde(default)]
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    pub task: Task,
    pub layers: Vec<LayerFile>,
}

/// One validated layer: the NMCU descriptor plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub desc: LayerDescriptor,
    pub weights: Vec<WeightNibble>,
    pub input_scale: f64,
    pub output_scale: Option<f64>,
    pub placement: Placement,
}

impl QuantLayer {
    /// Host-side execution using the same integer arithmetic as the PEs.
    pub fn forward_host(&self, input: &[i8]) -> Vec<i8> {
        let d = &self.desc;
        debug_assert_eq!(input.len(), d.in_dim);
        (0..d.out_dim)
            .map(|j| {
                let row = &self.weights[j * d.in_dim..(j + 1) * d.in_dim];
                let acc = row.iter().zip(input).fold(d.bias[j], |acc, (w, &x)| {
                    acc + w.value() as i32 * (x as i32 - d.input_zero_point)
                });
                let q = requantize(acc, d.requant_scale[j], d.output_zero_point);
                activate(q, d.activation, d.output_zero_point)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub name: String,
    pub task: Task,
    pub layers: Vec<QuantLayer>,
    deployed: bool,
}

impl QuantModel {
    /// Assemble a model from layers, running the same checks as a file load.
    pub fn new(name: impl Into<String>, task: Task, layers: Vec<QuantLayer>) -> Result<Self> {
        let m = QuantModel {
            name: name.into(),
            task,
            layers,
            deployed: false,
        };
        Self::from_file(m.to_file())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.desc.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.desc.out_dim)
    }

    pub fn input_scale(&self) -> f64 {
        self.layers.first().map_or(1.0, |l| l.input_scale)
    }

    pub fn input_zero_point(&self) -> i32 {
        self.layers.first().map_or(0, |l| l.desc.input_zero_point)
    }

    pub fn is_deployed(&self) -> bool {
        self.deployed
    }

    pub(crate) fn set_deployed(&mut self, deployed: bool) {
        self.deployed = deployed;
    }

    pub fn macro_weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.placement == Placement::Macro)
            .map(|l| l.weights.len())
            .sum()
    }

    /// Pure host int8 forward pass over all layers.
    pub fn forward_software(&self, input: &[i8]) -> Vec<i8> {
        self.layers
            .iter()
            .fold(input.to_vec(), |x, layer| layer.forward_host(&x))
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.layers.is_empty() && file.task == Task::Reconstruct {
            return Err(Error::model("layers", "a reconstruct model needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            layers.push(validate_layer(i, l)?);
        }
        for i in 1..layers.len() {
            let (prev, cur) = (&layers[i - 1], &layers[i]);
            if prev.desc.out_dim != cur.desc.in_dim {
                return Err(Error::model(
                    format!("layers[{i}].in"),
                    format!(
                        "dimension mismatch: layers[{}].out = {} but layers[{i}].in = {}",
                        i - 1,
                        prev.desc.out_dim,
                        cur.desc.in_dim
                    ),
                ));
            }
            if prev.desc.output_zero_point != cur.desc.input_zero_point {
                return Err(Error::model(
                    format!("layers[{i}].input_zp"),
                    format!(
                        "{} does not match layers[{}].output_zp = {}",
                        cur.desc.input_zero_point,
                        i - 1,
                        prev.desc.output_zero_point
                    ),
                ));
            }
        }
        if file.task == Task::Reconstruct {
            let last = layers.last().unwrap();
            if last.output_scale.is_none() {
                return Err(Error::model(
                    format!("layers[{}].output_scale", layers.len() - 1),
                    "required for reconstruct models",
                ));
            }
            if last.desc.out_dim != layers[0].desc.in_dim {
                return Err(Error::model(
                    format!("layers[{}].out", layers.len() - 1),
                    "reconstruct models must output their input dimension",
                ));
            }
        }
        Ok(QuantModel {
            name: file.name,
            task: file.task,
            layers,
            deployed: false,
        })
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            name: self.name.clone(),
            task: self.task,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    in_dim: l.desc.in_dim,
                    out_dim: l.desc.out_dim,
                    weights: l.weights.iter().map(|w| w.value() as i64).collect(),
                    bias: l.desc.bias.iter().map(|b| *b as i64).collect(),
                    input_scale: l.input_scale,
                    input_zp: l.desc.input_zero_point,
                    requant_scales: l.desc.requant_scale.clone(),
                    output_scale: l.output_scale,
                    output_zp: l.desc.output_zero_point,
                    activation: l.desc.activation,
                    placement: l.placement,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::model("$", e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model serializes")
    }
}

fn validate_layer(i: usize, l: LayerFile) -> Result<QuantLayer> {
    let at = |field: &str| format!("layers[{i}].{field}");
    if l.in_dim == 0 || l.out_dim == 0 {
        return Err(Error::model(at("in"), "layer dimensions must be at least 1"));
    }
    if l.weights.len() != l.in_dim * l.out_dim {
        return Err(Error::model(
            at("weights"),
            format!("{} values, expected in*out = {}", l.weights.len(), l.in_dim * l.out_dim),
        ));
    }
    let weights = l
        .weights
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            i32::try_from(w)
                .ok()
                .and_then(|w| WeightNibble::new(w).ok())
                .ok_or_else(|| Error::model(format!("layers[{i}].weights[{k}]"), format!("value {w} outside [-8, 7]")))
        })
        .collect::<Result<Vec<_>>>()?;
    if l.bias.len() != l.out_dim {
        return Err(Error::model(at("bias"), format!("{} values, expected out = {}", l.bias.len(), l.out_dim)));
    }
    let bias = l
        .bias
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            i32::try_from(b).map_err(|_| Error::model(format!("layers[{i}].bias[{k}]"), format!("{b} outside int32")))
        })
        .collect::<Result<Vec<_>>>()?;
    if l.requant_scales.len() != l.out_dim {
        return Err(Error::model(
            at("requant_scales"),
            format!("{} values, expected out = {}", l.requant_scales.len(), l.out_dim),
        ));
    }
    if let Some(k) = l.requant_scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::model(format!("layers[{i}].requant_scales[{k}]"), "scales must be positive"));
    }
    if !(l.input_scale.is_finite() && l.input_scale > 0.0) {
        return Err(Error::model(at("input_scale"), "must be positive"));
    }
    if let Some(s) = l.output_scale {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::model(at("output_scale"), "must be positive"));
        }
    }
    for (field, zp) in [("input_zp", l.input_zp), ("output_zp", l.output_zp)] {
        if !(-128..=127).contains(&zp) {
            return Err(Error::model(at(field), format!("{zp} outside int8")));
        }
    }
    let desc = LayerDescriptor {
        in_dim: l.in_dim,
        out_dim: l.out_dim,
        weight_base_row: 0,
        bias,
        input_zero_point: l.input_zp,
        output_zero_point: l.output_zp,
        requant_scale: l.requant_scales,
        activation: l.activation,
    };
    desc.validate().map_err(|e| Error::model(format!("layers[{i}]"), e.to_string()))?;
    Ok(QuantLayer {
        desc,
        weights,
        input_scale: l.input_scale,
        output_scale: l.output_scale,
        placement: l.placement,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QuantModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading model {}", path.display()), e))?;
    QuantModel::from_json(&text)
}
