//! Browser bindings: pump ramp, program-then-bake VT histograms and word-line
//! driver reachability, each returned as a JSON string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use eflash_nmcu::analog::{pump_cycle, reference_reachable, DriverVariant, PumpConfig, WlDriverConfig};
use eflash_nmcu::array::{DriftParams, Geometry, Histogram};
use eflash_nmcu::codec::{CellState, WeightNibble};
use eflash_nmcu::config::SimConfig;
use eflash_nmcu::program::program_pattern;

pub const DEMO_ROWS: usize = 32;

#[derive(Serialize)]
pub struct PumpTrace {
    pub vpp_mv: Vec<[f64; 4]>,
    pub vps_mv: Vec<[f64; 4]>,
    pub regulated_at: Option<usize>,
    pub worst_tap_mv: f64,
    pub worst_switch_mv: f64,
    pub overstress_free: bool,
}

pub fn pump_trace(on_steps: usize, off_steps: usize, tau_steps: f64) -> Result<PumpTrace, String> {
    let cfg = PumpConfig {
        tau_steps,
        ..PumpConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let trace = pump_cycle(&cfg, on_steps, off_steps);
    Ok(PumpTrace {
        vpp_mv: trace.iter().map(|s| s.vpp_mv).collect(),
        vps_mv: trace.iter().map(|s| s.vps_mv).collect(),
        regulated_at: trace.iter().position(|s| s.regulated),
        worst_tap_mv: trace.iter().map(|s| s.max_tap_stress_mv()).fold(0.0, f64::max),
        worst_switch_mv: trace.iter().map(|s| s.max_switch_stress_mv()).fold(0.0, f64::max),
        overstress_free: trace.iter().all(|s| s.overstress_free()),
    })
}

#[derive(Serialize)]
pub struct BakeDemo {
    pub bin_mv: f64,
    pub lo_mv: f64,
    pub before: Vec<u64>,
    pub after: Vec<u64>,
    pub read_mv: Vec<f64>,
    pub cells: u64,
    pub misreads: u64,
    pub adjacent_misreads: u64,
    pub far_misreads: u64,
    pub misread_rate: f64,
}

/// Program random weights into a small macro, then bake it.
pub fn program_and_bake(seed: u64, loss_fraction: f64, sigma_mv: f64, bin_mv: f64) -> Result<BakeDemo, String> {
    let cfg = SimConfig {
        geometry: Geometry {
            banks: 1,
            rows_per_bank: DEMO_ROWS,
        },
        seed,
        ..SimConfig::default()
    };
    let mut mac = cfg.build_macro().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<WeightNibble> = (0..mac.capacity_cells())
        .map(|_| WeightNibble::new(rng.random_range(-8..=7)).unwrap())
        .collect();
    program_pattern(&mut mac, &weights).map_err(|e| e.to_string())?;
    let before: Histogram = mac.vt_histogram(None, bin_mv).map_err(|e| e.to_string())?;
    let report = mac
        .apply_bake(&DriftParams::new(loss_fraction, sigma_mv))
        .map_err(|e| e.to_string())?;
    let after = mac.vt_histogram(None, bin_mv).map_err(|e| e.to_string())?;
    Ok(BakeDemo {
        bin_mv: before.bin_mv,
        lo_mv: before.lo_mv,
        before: before.counts,
        after: after.counts,
        read_mv: mac.codec().ladder().read_levels().to_vec(),
        cells: report.total_cells,
        misreads: report.misreads,
        adjacent_misreads: report.adjacent_misreads,
        far_misreads: report.far_misreads,
        misread_rate: report.misread_rate,
    })
}

#[derive(Serialize)]
pub struct StateReach {
    pub state: u8,
    pub weight: i8,
    pub verify_mv: f64,
    pub reachable: bool,
}

#[derive(Serialize)]
pub struct DriverRange {
    pub ceiling_mv: f64,
    pub states: Vec<StateReach>,
}

pub fn driver_range(conventional: bool, vth_drop_mv: f64) -> Result<DriverRange, String> {
    let driver = if conventional {
        WlDriverConfig::conventional(vth_drop_mv)
    } else {
        WlDriverConfig {
            variant: DriverVariant::Proposed,
            ..WlDriverConfig::default()
        }
    };
    driver.validate().map_err(|e| e.to_string())?;
    let codec = SimConfig::default().codec().map_err(|e| e.to_string())?;
    let states = (1..16)
        .map(|s| {
            let state = CellState::new(s).unwrap();
            let verify_mv = codec.verify_level(state).unwrap();
            StateReach {
                state: s as u8,
                weight: codec.decode(state).value(),
                verify_mv,
                reachable: reference_reachable(&driver, verify_mv),
            }
        })
        .collect();
    Ok(DriverRange {
        ceiling_mv: driver.reference_ceiling_mv(),
        states,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("serializable"))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pumpTrace)]
pub fn pump_trace_js(on_steps: usize, off_steps: usize, tau_steps: f64) -> Result<String, JsValue> {
    to_js(pump_trace(on_steps, off_steps, tau_steps))
}

#[wasm_bindgen(js_name = programAndBake)]
pub fn program_and_bake_js(seed: u32, loss_fraction: f64, sigma_mv: f64, bin_mv: f64) -> Result<String, JsValue> {
    to_js(program_and_bake(seed as u64, loss_fraction, sigma_mv, bin_mv))
}

#[wasm_bindgen(js_name = driverRange)]
pub fn driver_range_js(conventional: bool, vth_drop_mv: f64) -> Result<String, JsValue> {
    to_js(driver_range(conventional, vth_drop_mv))
}
