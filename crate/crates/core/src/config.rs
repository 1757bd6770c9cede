//! Simulator configuration file (JSON).
//!
//! Every field is optional; omitted fields take the documented defaults.
//! `ladder` is either `"uniform-default"`, a uniform ladder
//! `{"floor_mv", "ceiling_mv", "read_offset_mv"}`, or explicit level lists
//! `{"verify_mv": [15], "read_mv": [15]}`. `mapping`, when present, lists the
//! weight stored by each of the 16 states in ascending-VT order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analog::{AnalogEnv, PumpConfig, WlDriverConfig};
use crate::array::{CellParams, EflashMacro, Geometry};
use crate::codec::{Millivolts, ReferenceLadder, StateCodec, NUM_STATES};
use crate::error::{Error, Result};
use crate::nmcu::DEFAULT_PING_PONG_CAPACITY;
use crate::program::DEFAULT_MAX_PULSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum LadderSpec {
    Named(String),
    Uniform {
        floor_mv: Millivolts,
        ceiling_mv: Millivolts,
        read_offset_mv: Millivolts,
    },
    Explicit(ReferenceLadder),
}

impl Default for LadderSpec {
    fn default() -> Self {
        LadderSpec::Named("uniform-default".into())
    }
}

impl LadderSpec {
    pub fn build(&self) -> Result<ReferenceLadder> {
        match self {
            LadderSpec::Named(n) if n == "uniform-default" => Ok(ReferenceLadder::uniform_default()),
            LadderSpec::Named(n) => Err(Error::Config(format!("unknown ladder name {n:?}"))),
            LadderSpec::Uniform {
                floor_mv,
                ceiling_mv,
                read_offset_mv,
            } => ReferenceLadder::uniform(*floor_mv, *ceiling_mv, *read_offset_mv),
            LadderSpec::Explicit(l) => Ok(l.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramConfig {
    pub max_pulses_per_cell: u32,
    pub vpgm_min_mv: Millivolts,
}

impl Default for ProgramConfig {
    fn default() -> Self {
        ProgramConfig {
            max_pulses_per_cell: DEFAULT_MAX_PULSES,
            vpgm_min_mv: 9_500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmcuConfig {
    pub ping_pong_capacity: usize,
}

impl Default for NmcuConfig {
    fn default() -> Self {
        NmcuConfig {
            ping_pong_capacity: DEFAULT_PING_PONG_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub geometry: Geometry,
    pub cell: CellParams,
    pub ladder: LadderSpec,
    pub mapping: Option<Vec<i8>>,
    pub driver: WlDriverConfig,
    pub pump: PumpConfig,
    pub program: ProgramConfig,
    pub nmcu: NmcuConfig,
    pub seed: u64,
}

impl SimConfig {
    /// All cell and programming noise set to zero.
    pub fn noiseless() -> Self {
        SimConfig {
            cell: CellParams::noiseless(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.cell.validate()?;
        self.driver.validate()?;
        self.pump.validate()?;
        self.codec()?;
        if self.program.max_pulses_per_cell == 0 {
            return Err(Error::Config("program: max_pulses_per_cell must be at least 1".into()));
        }
        if self.nmcu.ping_pong_capacity == 0 {
            return Err(Error::Config("nmcu: ping_pong_capacity must be at least 1".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<StateCodec> {
        let ladder = self.ladder.build().map_err(|e| Error::Config(e.to_string()))?;
        match &self.mapping {
            None => Ok(StateCodec::monotone(ladder)),
            Some(table) => {
                let table: [i8; NUM_STATES] = table
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Config(format!("mapping has {} entries, need 16", table.len())))?;
                StateCodec::with_table(table, ladder).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    pub fn analog_env(&self) -> AnalogEnv {
        let mut env = AnalogEnv::new(self.pump.clone(), self.driver.clone());
        env.vpgm_min_mv = self.program.vpgm_min_mv;
        env
    }

    /// Fresh, fully erased macro.
    pub fn build_macro(&self) -> Result<EflashMacro> {
        self.validate()?;
        EflashMacro::new(self.geometry, self.cell.clone(), self.codec()?, self.analog_env(), self.seed)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
