use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eflash_nmcu::analog::{pump_cycle, pump_trace_csv};
use eflash_nmcu::array::DriftParams;
use eflash_nmcu::config::SimConfig;
use eflash_nmcu::dataset::{load_mnist_idx, synthetic_anomaly_task, Dataset, SynthSpec};
use eflash_nmcu::harness::{attach_placement, deploy_with_budget, evaluate, plan_placement, Deployment};
use eflash_nmcu::model::{load_model, QuantModel};
use eflash_nmcu::program::MarginReport;
use eflash_nmcu::state::{load_state, save_state};
use eflash_nmcu::{selftest, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_CAPACITY: u8 = 4;
const EXIT_VERIFY_TIMEOUT: u8 = 5;
const EXIT_UNREACHABLE: u8 = 6;

#[derive(Parser)]
#[command(name = "eflash", version, about = "4-bits/cell eFlash weight memory and NMCU simulator")]
struct Cli {
    /// Simulator config (JSON); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when omitted
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Program a model into a fresh macro; writes placement and margins
    Program {
        #[arg(long)]
        model: PathBuf,
        /// Where to save the programmed macro state
        #[arg(long)]
        state: PathBuf,
    },
    /// Apply retention drift to a saved macro state; writes the drift report
    Bake {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        state_out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        hours: f64,
        #[arg(long, default_value_t = 125.0)]
        temp_c: f64,
        #[arg(long)]
        loss_fraction: f64,
        #[arg(long)]
        sigma_mv: f64,
    },
    /// Evaluate a model; writes the evaluation result
    Infer {
        /// Model JSON; `--dataset synth` supplies its own autoencoder when omitted
        #[arg(long)]
        model: Option<PathBuf>,
        /// Programmed macro state; the model is programmed afresh when omitted
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DatasetKind::Mnist)]
        dataset: DatasetKind,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Attach a bake report to the result
        #[arg(long)]
        drift_report: Option<PathBuf>,
    },
    /// VT histogram as CSV
    Hist {
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        bank: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        bin_mv: f64,
    },
    /// Charge-pump ramp and discharge as CSV
    Pumptrace {
        #[arg(long, default_value_t = 400)]
        on_steps: usize,
        #[arg(long, default_value_t = 200)]
        off_steps: usize,
    },
    /// Run the built-in invariant checks
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Mnist,
    Synth,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidLadder(_) | Error::InvalidMapping(_) => EXIT_CONFIG,
            Error::Model { .. }
            | Error::Dataset(_)
            | Error::TaskMismatch(_)
            | Error::NotDeployed
            | Error::StateFile(_)
            | Error::WeightOutOfRange(_) => EXIT_MODEL,
            Error::CapacityExceeded { .. } => EXIT_CAPACITY,
            Error::VerifyTimeout { .. } => EXIT_VERIFY_TIMEOUT,
            Error::UnreachableReference { .. } => EXIT_UNREACHABLE,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("eflash: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<SimConfig> {
    let mut cfg = match &cli.config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_model(path: &Path) -> CliResult<QuantModel> {
    load_model(path).map_err(|e| match e {
        Error::Io { .. } => fail(EXIT_MODEL, e.to_string()),
        other => other.into(),
    })
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| fail(EXIT_FAILURE, format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable output");
    text.push('\n');
    emit(out, &text)
}

#[derive(Serialize)]
struct ProgramReport<'a> {
    model: &'a str,
    seed: u64,
    #[serde(flatten)]
    deployment: &'a Deployment,
    margin: Option<MarginReport>,
}

fn run(cli: Cli) -> CliResult<u8> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Program { model, state } => {
            let cfg = load_config(&cli)?;
            let mut model = read_model(model)?;
            let mut mac = cfg.build_macro()?;
            let deployment = deploy_with_budget(&mut model, &mut mac, cfg.program.max_pulses_per_cell)?;
            let mut margin: Option<MarginReport> = None;
            for m in deployment.programs.iter().filter_map(|p| p.margin.as_ref()) {
                match &mut margin {
                    Some(acc) => acc.merge(m),
                    None => margin = Some(m.clone()),
                }
            }
            save_state(state, &mac, &cfg, Some(deployment.placement.clone()))?;
            emit_json(
                out,
                &ProgramReport {
                    model: &model.name,
                    seed: cfg.seed,
                    deployment: &deployment,
                    margin,
                },
            )?;
        }
        Command::Bake {
            state,
            state_out,
            hours,
            temp_c,
            loss_fraction,
            sigma_mv,
        } => {
            let (mut mac, side) = load_state(state)?;
            let mut cfg = side.config.clone();
            if let Some(seed) = cli.seed {
                mac.reseed(seed);
                cfg.seed = seed;
            }
            let params = DriftParams {
                hours: *hours,
                temp_c: *temp_c,
                ..DriftParams::new(*loss_fraction, *sigma_mv)
            };
            let report = mac.apply_bake(&params).map_err(|e| match e {
                Error::InvalidParameter(m) => fail(EXIT_CONFIG, m),
                other => other.into(),
            })?;
            save_state(state_out, &mac, &cfg, side.placement)?;
            emit_json(out, &report)?;
        }
        Command::Infer {
            model,
            state,
            dataset,
            images,
            labels,
            limit,
            jobs,
            drift_report,
        } => {
            let run_seed = load_config(&cli)?.seed;
            let mut synth: Option<Dataset> = None;
            let mut model = match (model, dataset) {
                (Some(path), _) => read_model(path)?,
                (None, DatasetKind::Synth) => {
                    let (m, d) = synthetic_anomaly_task(&SynthSpec {
                        seed: run_seed,
                        ..SynthSpec::default()
                    });
                    synth = Some(d);
                    m
                }
                (None, DatasetKind::Mnist) => return Err(fail(EXIT_MODEL, "--dataset mnist needs --model")),
            };
            let (mac, cfg) = match state {
                Some(path) => {
                    let (mut mac, side) = load_state(path)?;
                    let placement = side
                        .placement
                        .ok_or_else(|| fail(EXIT_MODEL, format!("{} holds no model placement", path.display())))?;
                    if placement != plan_placement(&model) {
                        return Err(fail(EXIT_MODEL, "model does not match the placement stored with the state"));
                    }
                    if let Some(seed) = cli.seed {
                        mac.reseed(seed);
                    }
                    attach_placement(&mut model, &placement)?;
                    (mac, side.config)
                }
                None => {
                    let cfg = load_config(&cli)?;
                    let mut mac = cfg.build_macro()?;
                    deploy_with_budget(&mut model, &mut mac, cfg.program.max_pulses_per_cell)?;
                    (mac, cfg)
                }
            };
            let data = match dataset {
                DatasetKind::Mnist => {
                    let (Some(images), Some(labels)) = (images, labels) else {
                        return Err(fail(EXIT_MODEL, "--dataset mnist needs --images and --labels"));
                    };
                    load_mnist_idx(images, labels, *limit, model.input_scale(), model.input_zero_point())?
                }
                DatasetKind::Synth => {
                    let d = synth.unwrap_or_else(|| synth_dataset(&model, run_seed));
                    let n = (*limit).min(d.len());
                    d.slice(0..n)
                }
            };
            let mut result = evaluate(&model, &mac, &data, *jobs, cfg.nmcu.ping_pong_capacity)?;
            if let Some(path) = drift_report {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| fail(EXIT_MODEL, format!("reading {}: {e}", path.display())))?;
                result.drift = Some(
                    serde_json::from_str(&text)
                        .map_err(|e| fail(EXIT_MODEL, format!("{}: {e}", path.display())))?,
                );
            }
            emit_json(out, &result)?;
        }
        Command::Hist { state, bank, bin_mv } => {
            let mac = match state {
                Some(path) => load_state(path)?.0,
                None => load_config(&cli)?.build_macro()?,
            };
            let hist = mac.vt_histogram(*bank, *bin_mv).map_err(|e| match e {
                Error::InvalidParameter(_) | Error::UnknownBank { .. } => fail(EXIT_CONFIG, e.to_string()),
                other => other.into(),
            })?;
            emit(out, &hist.to_csv())?;
        }
        Command::Pumptrace { on_steps, off_steps } => {
            let cfg = load_config(&cli)?;
            emit(out, &pump_trace_csv(&pump_cycle(&cfg.pump, *on_steps, *off_steps)))?;
        }
        Command::Selftest => {
            let seed = cli.seed.unwrap_or(0);
            let checks = selftest::run(seed);
            emit(out, &selftest::format_table(&checks))?;
            if !selftest::all_passed(&checks) {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}

/// Synthetic anomaly samples sized to `model`'s input.
fn synth_dataset(model: &QuantModel, seed: u64) -> Dataset {
    synthetic_anomaly_task(&SynthSpec {
        dim: model.input_dim(),
        seed,
        ..SynthSpec::default()
    })
    .1
}
