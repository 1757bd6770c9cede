//! Deploying models into the weight memory and running them through the NMCU.

use serde::{Deserialize, Serialize};

use crate::array::{DriftReport, EflashMacro};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, auc_rank};
use crate::model::{Placement, QuantModel, Task};
use crate::nmcu::{ExecTrace, InputSource, Nmcu};
use crate::program::{program_pattern_at, rows_for, ProgramSummary, DEFAULT_MAX_PULSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlacement {
    pub layer: usize,
    pub placement: Placement,
    pub base_row: Option<usize>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementMap {
    pub layers: Vec<LayerPlacement>,
    pub total_rows: usize,
}

/// Row layout for the macro-resident layers: each starts on a fresh row,
/// packed from row 0 in layer order.
pub fn plan_placement(model: &QuantModel) -> PlacementMap {
    let mut next = 0;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.placement {
            Placement::Macro => {
                let rows = rows_for(l.weights.len());
                let base = next;
                next += rows;
                LayerPlacement {
                    layer: i,
                    placement: l.placement,
                    base_row: Some(base),
                    rows,
                }
            }
            Placement::Host => LayerPlacement {
                layer: i,
                placement: l.placement,
                base_row: None,
                rows: 0,
            },
        })
        .collect();
    PlacementMap {
        layers,
        total_rows: next,
    }
}

/// Record a placement in the model's descriptors without programming.
pub fn attach_placement(model: &mut QuantModel, placement: &PlacementMap) -> Result<()> {
    if placement.layers.len() != model.layers.len() {
        return Err(Error::NotDeployed);
    }
    for (layer, p) in model.layers.iter_mut().zip(&placement.layers) {
        if let Some(base) = p.base_row {
            layer.desc.weight_base_row = base;
        }
    }
    model.set_deployed(true);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub placement: PlacementMap,
    pub programs: Vec<ProgramSummary>,
}

pub fn deploy(model: &mut QuantModel, mac: &mut EflashMacro) -> Result<Deployment> {
    deploy_with_budget(model, mac, DEFAULT_MAX_PULSES)
}

/// Program every macro-resident layer and record its base row.
pub fn deploy_with_budget(model: &mut QuantModel, mac: &mut EflashMacro, max_pulses: u32) -> Result<Deployment> {
    let placement = plan_placement(model);
    let available = mac.geometry().rows();
    if placement.total_rows > available {
        return Err(Error::CapacityExceeded {
            needed: model.macro_weight_count(),
            available: mac.capacity_cells(),
            unit: "weights",
        });
    }
    let mut programs = Vec::new();
    for (layer, p) in model.layers.iter().zip(&placement.layers) {
        if let Some(base) = p.base_row {
            programs.push(program_pattern_at(mac, base, &layer.weights, max_pulses)?);
        }
    }
    if programs.iter().any(|p| p.rows_programmed > 0) {
        mac.env_mut().power_down();
    }
    attach_placement(model, &placement)?;
    Ok(Deployment { placement, programs })
}

/// One forward pass: the first macro layer reads the input buffer, later
/// macro layers read the ping-pong buffer, host layers run on the host.
pub fn run_inference(model: &QuantModel, mac: &mut EflashMacro, nmcu: &mut Nmcu, sample: &[i8]) -> Result<Vec<i8>> {
    if !model.is_deployed() {
        return Err(Error::NotDeployed);
    }
    if sample.len() != model.input_dim() {
        return Err(Error::Dataset(format!(
            "sample has {} values, model expects {}",
            sample.len(),
            model.input_dim()
        )));
    }
    nmcu.reset();
    // None while activations live in the NMCU's ping-pong buffer
    let mut host: Option<Vec<i8>> = Some(sample.to_vec());
    for layer in &model.layers {
        match layer.placement {
            Placement::Host => {
                let x = host.take().unwrap_or_else(|| nmcu.ping_pong().readable().to_vec());
                host = Some(layer.forward_host(&x));
            }
            Placement::Macro => {
                let source = match host.take() {
                    Some(x) => {
                        nmcu.load_input(&x);
                        InputSource::InputBuffer
                    }
                    None => InputSource::PingPong,
                };
                nmcu.mvm(&layer.desc, source, mac)?;
                nmcu.swap_ping_pong()?;
            }
        }
    }
    Ok(host.unwrap_or_else(|| nmcu.ping_pong().readable().to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: u32,
    pub total: u64,
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub task: Task,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub per_class: Vec<ClassCount>,
    /// Predicted class (classify) per sample, in dataset order.
    pub predictions: Vec<u32>,
    /// Reconstruction error (reconstruct) per sample, in dataset order.
    pub scores: Vec<f64>,
    pub macro_reads: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftReport>,
}

/// Mean squared reconstruction error in real units.
pub fn reconstruction_error(model: &QuantModel, input: &[i8], output: &[i8]) -> f64 {
    let first = &model.layers[0];
    let last = model.layers.last().unwrap();
    let out_scale = last.output_scale.unwrap_or(1.0);
    let sum: f64 = input
        .iter()
        .zip(output)
        .map(|(&x, &y)| {
            let xr = (x as i32 - first.desc.input_zero_point) as f64 * first.input_scale;
            let yr = (y as i32 - last.desc.output_zero_point) as f64 * out_scale;
            (xr - yr) * (xr - yr)
        })
        .sum();
    sum / input.len() as f64
}

struct ShardOutput {
    outputs: Vec<Vec<i8>>,
    macro_reads: u64,
}

fn run_shard(model: &QuantModel, mut mac: EflashMacro, samples: &[Vec<i8>], capacity: usize) -> Result<ShardOutput> {
    let mut nmcu = Nmcu::new(capacity).without_fetch_trace();
    let mut outputs = Vec::with_capacity(samples.len());
    let mut reads = 0;
    for s in samples {
        outputs.push(run_inference(model, &mut mac, &mut nmcu, s)?);
        reads += nmcu.trace().macro_reads();
    }
    Ok(ShardOutput {
        outputs,
        macro_reads: reads,
    })
}

/// Evaluate a deployed model over `data`, sharding across `jobs` workers
/// that each own a clone of the macro.
pub fn evaluate(
    model: &QuantModel,
    mac: &EflashMacro,
    data: &Dataset,
    jobs: usize,
    ping_pong_capacity: usize,
) -> Result<EvalResult> {
    if !model.is_deployed() {
        return Err(Error::NotDeployed);
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if data.dim != model.input_dim() {
        return Err(Error::TaskMismatch(format!(
            "dataset dim {} but model input {}",
            data.dim,
            model.input_dim()
        )));
    }
    let jobs = jobs.clamp(1, data.len());
    let per = data.len().div_ceil(jobs);
    let shards: Vec<Result<ShardOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .samples
            .chunks(per)
            .map(|chunk| {
                let mac = mac.clone();
                scope.spawn(move || run_shard(model, mac, chunk, ping_pong_capacity))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut outputs = Vec::with_capacity(data.len());
    let mut macro_reads = 0;
    for s in shards {
        let s = s?;
        outputs.extend(s.outputs);
        macro_reads += s.macro_reads;
    }

    let mut result = EvalResult {
        model: model.name.clone(),
        task: model.task,
        samples: data.len(),
        accuracy: None,
        auc: None,
        per_class: Vec::new(),
        predictions: Vec::new(),
        scores: Vec::new(),
        macro_reads,
        drift: None,
    };
    match model.task {
        Task::Classify => {
            let preds: Vec<u32> = outputs.iter().map(|o| argmax(o) as u32).collect();
            let classes = data.labels.iter().copied().max().unwrap_or(0).max((model.output_dim() as u32).saturating_sub(1)) + 1;
            let mut per_class: Vec<ClassCount> = (0..classes)
                .map(|class| ClassCount {
                    class,
                    total: 0,
                    correct: 0,
                })
                .collect();
            for (p, l) in preds.iter().zip(&data.labels) {
                per_class[*l as usize].total += 1;
                per_class[*l as usize].correct += (p == l) as u64;
            }
            result.accuracy = Some(accuracy(&preds, &data.labels));
            result.per_class = per_class;
            result.predictions = preds;
        }
        Task::Reconstruct => {
            if data.labels.iter().any(|l| *l > 1) {
                return Err(Error::TaskMismatch("reconstruct needs 0/1 anomaly labels".into()));
            }
            let scores: Vec<f64> = data
                .samples
                .iter()
                .zip(&outputs)
                .map(|(x, y)| reconstruction_error(model, x, y))
                .collect();
            let positive: Vec<bool> = data.labels.iter().map(|l| *l == 1).collect();
            result.auc = auc_rank(&scores, &positive);
            result.scores = scores;
        }
    }
    Ok(result)
}

/// Execution trace of a single inference, fetch events included.
pub fn trace_inference(model: &QuantModel, mac: &mut EflashMacro, sample: &[i8], capacity: usize) -> Result<ExecTrace> {
    let mut nmcu = Nmcu::new(capacity);
    run_inference(model, mac, &mut nmcu, sample)?;
    Ok(nmcu.take_trace())
}
