//! Behavioral models of the high-voltage generator and the word-line driver.
//!
//! The pump is four regulated taps VPP1..VPP4 with targets linearly spaced
//! above VDDH, each relaxing exponentially toward its target. The supply
//! switches VPS1..VPS4 follow the taps once VPP1 rises above SREF and fall
//! back to VDDH when it drops below. Nothing here models charge transfer or
//! load current; only the voltages and the stress between neighbouring nodes.

use serde::{Deserialize, Serialize};

use crate::codec::{Millivolts, VDDH_MV};
use crate::error::{Error, Result};

pub const TAPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PumpConfig {
    pub vddh_mv: Millivolts,
    pub vpp4_target_mv: Millivolts,
    pub tau_steps: f64,
    /// VPP1 level above which the cascaded switches connect VPPn to VPSn.
    pub sref_mv: Millivolts,
    /// Fraction of the VPP4 target at which regulation is declared.
    pub regulation_fraction: f64,
}

impl Default for PumpConfig {
    fn default() -> Self {
        PumpConfig {
            vddh_mv: VDDH_MV,
            vpp4_target_mv: 10_000.0,
            tau_steps: 20.0,
            sref_mv: 1500.0,
            regulation_fraction: 0.98,
        }
    }
}

impl PumpConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pump: {m}")));
        if !(self.vddh_mv > 0.0) {
            return bad("vddh_mv must be positive");
        }
        if !(self.vpp4_target_mv > self.vddh_mv) {
            return bad("vpp4_target_mv must exceed vddh_mv");
        }
        if !(self.tau_steps > 0.0) {
            return bad("tau_steps must be positive");
        }
        if !(self.regulation_fraction > 0.0 && self.regulation_fraction <= 1.0) {
            return bad("regulation_fraction must lie in (0, 1]");
        }
        if !(self.sref_mv > 0.0 && self.sref_mv < self.tap_targets()[0]) {
            return bad("sref_mv must lie between 0 and the VPP1 target");
        }
        Ok(())
    }

    /// `vddh + n * (vpp4_target - vddh) / 4` for taps n = 1..=4.
    pub fn tap_targets(&self) -> [Millivolts; TAPS] {
        let step = (self.vpp4_target_mv - self.vddh_mv) / TAPS as f64;
        std::array::from_fn(|n| self.vddh_mv + (n + 1) as f64 * step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpState {
    pub vpp_mv: [Millivolts; TAPS],
    pub vps_mv: [Millivolts; TAPS],
    pub enabled: bool,
    pub regulated: bool,
    pub cfg: PumpConfig,
}

impl PumpState {
    /// Discharged and disabled: taps at 0, supply nodes held at VDDH.
    pub fn new(cfg: PumpConfig) -> Self {
        PumpState {
            vpp_mv: [0.0; TAPS],
            vps_mv: [cfg.vddh_mv; TAPS],
            enabled: false,
            regulated: false,
            cfg,
        }
    }

    /// Largest |VPP[n+1] - VPP[n]| over neighbouring taps.
    pub fn max_tap_stress_mv(&self) -> Millivolts {
        self.vpp_mv
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
    }

    /// Largest |VPSn - VPPn| across the switch pairs.
    pub fn max_switch_stress_mv(&self) -> Millivolts {
        self.vpp_mv
            .iter()
            .zip(&self.vps_mv)
            .map(|(p, s)| (s - p).abs())
            .fold(0.0, f64::max)
    }

    pub fn overstress_free(&self) -> bool {
        self.max_tap_stress_mv() <= self.cfg.vddh_mv && self.max_switch_stress_mv() <= self.cfg.vddh_mv
    }
}

/// Advance the pump by one simulation step.
pub fn pump_step(state: &PumpState) -> PumpState {
    let cfg = &state.cfg;
    let alpha = 1.0 - (-1.0 / cfg.tau_steps).exp();
    let targets = if state.enabled {
        cfg.tap_targets()
    } else {
        [0.0; TAPS]
    };
    let vpp_mv: [Millivolts; TAPS] = std::array::from_fn(|n| {
        let v = state.vpp_mv[n];
        v + alpha * (targets[n] - v)
    });
    let regulated = state.enabled
        && (state.regulated || vpp_mv[TAPS - 1] >= cfg.regulation_fraction * cfg.vpp4_target_mv);
    let vps_mv = if vpp_mv[0] > cfg.sref_mv {
        vpp_mv
    } else {
        [cfg.vddh_mv; TAPS]
    };
    PumpState {
        vpp_mv,
        vps_mv,
        enabled: state.enabled,
        regulated,
        cfg: cfg.clone(),
    }
}

/// Enable for `on_steps`, then disable for `off_steps`; returns every state
/// including the initial one.
pub fn pump_cycle(cfg: &PumpConfig, on_steps: usize, off_steps: usize) -> Vec<PumpState> {
    let mut s = PumpState::new(cfg.clone());
    let mut trace = Vec::with_capacity(on_steps + off_steps + 1);
    trace.push(s.clone());
    s.enabled = true;
    for _ in 0..on_steps {
        s = pump_step(&s);
        trace.push(s.clone());
    }
    s.enabled = false;
    for _ in 0..off_steps {
        s = pump_step(&s);
        trace.push(s.clone());
    }
    trace
}

/// CSV with header `step,vpp1,vpp2,vpp3,vpp4,vps1,vps2,vps3,vps4`.
pub fn pump_trace_csv(trace: &[PumpState]) -> String {
    let mut out = String::from("step,vpp1,vpp2,vpp3,vpp4,vps1,vps2,vps3,vps4\n");
    for (i, s) in trace.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in s.vpp_mv.iter().chain(&s.vps_mv) {
            out.push_str(&format!(",{v:.3}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverVariant {
    /// NMOS-only reference path; loses one NMOS VTH off the top of the range.
    Conventional,
    /// Adds the PMOS charging path; passes any reference up to VDDH.
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WlMode {
    Program,
    Verify,
    Read,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WlDriverConfig {
    pub variant: DriverVariant,
    pub vth_drop_mv: Millivolts,
    pub vpgm_mv: Millivolts,
    pub vddh_mv: Millivolts,
}

impl Default for WlDriverConfig {
    fn default() -> Self {
        WlDriverConfig {
            variant: DriverVariant::Proposed,
            vth_drop_mv: 700.0,
            vpgm_mv: 10_000.0,
            vddh_mv: VDDH_MV,
        }
    }
}

impl WlDriverConfig {
    pub fn conventional(vth_drop_mv: Millivolts) -> Self {
        WlDriverConfig {
            variant: DriverVariant::Conventional,
            vth_drop_mv,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vth_drop_mv > 0.0 && self.vth_drop_mv < self.vddh_mv) {
            return Err(Error::Config(format!(
                "driver: vth_drop_mv {} must lie in (0, {})",
                self.vth_drop_mv, self.vddh_mv
            )));
        }
        Ok(())
    }

    /// Highest verify/read level the driver can put on the WL.
    pub fn reference_ceiling_mv(&self) -> Millivolts {
        match self.variant {
            DriverVariant::Proposed => self.vddh_mv,
            DriverVariant::Conventional => self.vddh_mv - self.vth_drop_mv,
        }
    }
}

/// Word-line voltage the driver presents in `mode` for requested level `vrd_mv`.
pub fn wl_voltage(cfg: &WlDriverConfig, mode: WlMode, vrd_mv: Millivolts, pump: &PumpState) -> Result<Millivolts> {
    match mode {
        WlMode::Program if pump.regulated => Ok(cfg.vpgm_mv),
        WlMode::Program => Err(Error::ProgramWhileUnregulated),
        WlMode::Verify | WlMode::Read => {
            if !(0.0..=cfg.vddh_mv).contains(&vrd_mv) {
                return Err(Error::UnreachableReference {
                    vref_mv: vrd_mv,
                    limit_mv: cfg.reference_ceiling_mv(),
                });
            }
            Ok(vrd_mv.min(cfg.reference_ceiling_mv()))
        }
    }
}

/// True iff the driver can actually present `vref_mv` on the WL.
pub fn reference_reachable(cfg: &WlDriverConfig, vref_mv: Millivolts) -> bool {
    (0.0..=cfg.vddh_mv).contains(&vref_mv) && vref_mv.min(cfg.reference_ceiling_mv()) >= vref_mv
}

/// Pump plus WL driver: the analog context a macro programs and reads through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogEnv {
    pub pump: PumpState,
    pub driver: WlDriverConfig,
    /// Minimum WL program voltage accepted before a pulse is applied.
    pub vpgm_min_mv: Millivolts,
}

impl AnalogEnv {
    pub const MAX_RAMP_STEPS: usize = 10_000;

    pub fn new(pump: PumpConfig, driver: WlDriverConfig) -> Self {
        AnalogEnv {
            pump: PumpState::new(pump),
            driver,
            vpgm_min_mv: 9_500.0,
        }
    }

    /// Enable the pump and step until regulated.
    pub fn power_up(&mut self) -> Result<usize> {
        self.pump.enabled = true;
        for step in 0..Self::MAX_RAMP_STEPS {
            if self.pump.regulated {
                return Ok(step);
            }
            self.pump = pump_step(&self.pump);
        }
        if self.pump.regulated {
            Ok(Self::MAX_RAMP_STEPS)
        } else {
            Err(Error::PumpNotReady)
        }
    }

    /// Disable the pump and let it discharge.
    pub fn power_down(&mut self) {
        self.pump.enabled = false;
        self.pump.regulated = false;
        while self.pump.vpp_mv[0] > 1.0 {
            self.pump = pump_step(&self.pump);
        }
        self.pump.vpp_mv = [0.0; TAPS];
        self.pump.vps_mv = [self.pump.cfg.vddh_mv; TAPS];
    }

    pub fn check_program_ready(&self) -> Result<()> {
        match wl_voltage(&self.driver, WlMode::Program, 0.0, &self.pump) {
            Ok(v) if v >= self.vpgm_min_mv => Ok(()),
            _ => Err(Error::PumpNotReady),
        }
    }

    pub fn check_reference(&self, vref_mv: Millivolts) -> Result<()> {
        if reference_reachable(&self.driver, vref_mv) {
            Ok(())
        } else {
            Err(Error::UnreachableReference {
                vref_mv,
                limit_mv: self.driver.reference_ceiling_mv(),
            })
        }
    }
}
