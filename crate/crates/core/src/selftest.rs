//! Quick invariant checks, run by the CLI `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analog::{pump_cycle, reference_reachable, PumpConfig, WlDriverConfig};
use crate::array::{DriftParams, Geometry, CELLS_PER_ROW};
use crate::codec::{CellState, StateCodec, WeightNibble};
use crate::config::SimConfig;
use crate::metrics::auc_rank;
use crate::nmcu::{Activation, InputSource, LayerDescriptor, Nmcu};
use crate::program::{program_row_traced, ProgramJob, ProgramTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        codec_checks(),
        ladder_checks(),
        pump_checks(),
        driver_checks(),
        round_trip_check(&mut rng),
        mvm_check(&mut rng),
        auc_check(&mut rng),
        bake_identity_check(),
    ]
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:width$}  {}\n", c.name, c.detail));
    }
    out
}

fn codec_checks() -> Check {
    let c = StateCodec::default();
    let bijective = WeightNibble::all().all(|w| c.decode(c.encode(w)) == w);
    let adjacent = (0..15).all(|s| {
        let a = c.decode_state(s).unwrap().value() as i32;
        let b = c.decode_state(s + 1).unwrap().value() as i32;
        (a - b).abs() == 1
    });
    check("codec", bijective && adjacent, format!("bijective={bijective} unit-adjacency={adjacent}"))
}

fn ladder_checks() -> Check {
    let l = StateCodec::default().ladder().clone();
    let v = l.verify_levels();
    let r = l.read_levels();
    let ok = v.windows(2).all(|w| w[0] < w[1]) && r.windows(2).all(|w| w[0] < w[1]) && (0..15).all(|k| r[k] < v[k]);
    let mut prev = CellState::ERASED;
    let mut monotone = true;
    for mv in 0..=2600 {
        let s = l.classify(mv as f64);
        monotone &= s >= prev;
        prev = s;
    }
    check(
        "ladder",
        ok && monotone,
        format!("ascending+margin={ok} classify-monotone={monotone}"),
    )
}

fn pump_checks() -> Check {
    let trace = pump_cycle(&PumpConfig::default(), 400, 600);
    let stress_ok = trace.iter().all(|s| s.overstress_free());
    let peak = trace.iter().map(|s| s.vpp_mv[3]).fold(0.0, f64::max);
    let steady = (peak - 10_000.0).abs() <= 200.0;
    check(
        "pump",
        stress_ok && steady,
        format!("overstress-free={stress_ok} vpp4={peak:.1} mV"),
    )
}

fn driver_checks() -> Check {
    let proposed = WlDriverConfig::default();
    let conv = WlDriverConfig::conventional(700.0);
    let full = (0..=2500).all(|v| reference_reachable(&proposed, v as f64));
    let ladder = StateCodec::default().ladder().clone();
    let blocked: Vec<usize> = (1..=15)
        .filter(|&s| !reference_reachable(&conv, ladder.verify_levels()[s - 1]))
        .collect();
    let expected: Vec<usize> = (1..=15).filter(|&s| ladder.verify_levels()[s - 1] > 1800.0).collect();
    check(
        "wl-driver",
        full && blocked == expected,
        format!("proposed-full-range={full} conventional-blocked={blocked:?}"),
    )
}

fn round_trip_check(rng: &mut ChaCha8Rng) -> Check {
    let cfg = SimConfig {
        geometry: Geometry {
            banks: 1,
            rows_per_bank: 16,
        },
        ..SimConfig::noiseless()
    };
    let mut mac = match cfg.build_macro() {
        Ok(m) => m,
        Err(e) => return check("zero-noise-round-trip", false, e.to_string()),
    };
    let mut errors = 0;
    let mut ascending = true;
    for row in 0..16 {
        let targets: Vec<CellState> = (0..CELLS_PER_ROW)
            .map(|_| CellState::new(rng.random_range(0..16)).unwrap())
            .collect();
        let mut trace = ProgramTrace::default();
        if let Err(e) = program_row_traced(&mut mac, &ProgramJob::new(0, row, targets.clone()), Some(&mut trace)) {
            return check("zero-noise-round-trip", false, e.to_string());
        }
        ascending &= trace.is_ascending();
        let back = mac.read_row(0, row).unwrap();
        errors += back.iter().zip(&targets).filter(|(a, b)| a != b).count();
    }
    check(
        "zero-noise-round-trip",
        errors == 0 && ascending,
        format!("16 rows, {errors} read errors, ascending-schedule={ascending}"),
    )
}

fn mvm_check(rng: &mut ChaCha8Rng) -> Check {
    let cfg = SimConfig {
        geometry: Geometry {
            banks: 1,
            rows_per_bank: 8,
        },
        ..SimConfig::noiseless()
    };
    let mut mismatches = 0;
    for _ in 0..8 {
        let in_dim = rng.random_range(1..=300);
        let out_dim = rng.random_range(1..=6);
        let weights: Vec<WeightNibble> = (0..in_dim * out_dim)
            .map(|_| WeightNibble::new(rng.random_range(-8..=7)).unwrap())
            .collect();
        let layer = LayerDescriptor {
            in_dim,
            out_dim,
            weight_base_row: 0,
            bias: (0..out_dim).map(|_| rng.random_range(-5000..5000)).collect(),
            input_zero_point: rng.random_range(-20..20),
            output_zero_point: rng.random_range(-20..20),
            requant_scale: (0..out_dim).map(|_| rng.random_range(0.001..0.05)).collect(),
            activation: Activation::Relu,
        };
        let x: Vec<i8> = (0..in_dim).map(|_| rng.random()).collect();
        let mut mac = cfg.build_macro().unwrap();
        if crate::program::program_pattern(&mut mac, &weights).is_err() {
            return check("mvm-oracle", false, "programming failed");
        }
        let mut nmcu = Nmcu::new(1024);
        nmcu.load_input(&x);
        if nmcu.mvm(&layer, InputSource::InputBuffer, &mut mac).is_err() {
            return check("mvm-oracle", false, "mvm failed");
        }
        let got = nmcu.ping_pong().written().to_vec();
        let expected: Vec<i8> = (0..out_dim)
            .map(|j| {
                let mut acc = layer.bias[j] as i64;
                for k in 0..in_dim {
                    acc += weights[j * in_dim + k].value() as i64 * (x[k] as i64 - layer.input_zero_point as i64);
                }
                let v = (layer.output_zero_point as f64 + (acc as f64 * layer.requant_scale[j]).round())
                    .clamp(-128.0, 127.0) as i32;
                v.max(layer.output_zero_point) as i8
            })
            .collect();
        mismatches += (got != expected) as usize;
    }
    check("mvm-oracle", mismatches == 0, format!("8 random layers, {mismatches} mismatches"))
}

fn auc_check(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let Some(auc) = auc_rank(&scores, &pos) else { continue };
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        worst = worst.max((auc - num / den).abs());
    }
    check("auc-rank", worst == 0.0, format!("max |rank - pairwise| = {worst}"))
}

fn bake_identity_check() -> Check {
    let cfg = SimConfig {
        geometry: Geometry {
            banks: 1,
            rows_per_bank: 4,
        },
        ..Default::default()
    };
    let mut mac = cfg.build_macro().unwrap();
    let before = mac.cells().to_vec();
    let report = mac.apply_bake(&DriftParams::new(0.0, 0.0)).unwrap();
    let ok = report.misreads == 0 && mac.cells() == &before[..];
    check("bake-identity", ok, format!("{} misreads", report.misreads))
}
