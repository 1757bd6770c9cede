//! Saved macro state: a flat binary of cell VTs plus a JSON sidecar.
//!
//! The binary holds one little-endian `i32` per cell in row-major order,
//! each VT in millivolts * 16. The sidecar at `<path>.json` carries the
//! configuration, RNG position, programmed rows and (optionally) the model
//! placement.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::{EflashMacro, FlashCell};
use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::harness::PlacementMap;

pub const STATE_FORMAT: &str = "eflash-macro-state/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSidecar {
    pub format: String,
    pub config: SimConfig,
    pub seed: u64,
    /// ChaCha word position, decimal (u128 does not fit a JSON number).
    pub rng_word_pos: String,
    pub cells: usize,
    pub programmed_rows: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementMap>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_cells(cells: &[FlashCell]) -> Vec<u8> {
    cells.iter().flat_map(|c| c.raw().to_le_bytes()).collect()
}

pub fn decode_cells(bytes: &[u8]) -> Result<Vec<FlashCell>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::StateFile(format!("{} bytes is not a whole number of cells", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| FlashCell::from_raw(i32::from_le_bytes(b.try_into().unwrap())))
        .collect())
}

pub fn sidecar_for(mac: &EflashMacro, config: &SimConfig, placement: Option<PlacementMap>) -> StateSidecar {
    StateSidecar {
        format: STATE_FORMAT.into(),
        config: config.clone(),
        seed: mac.seed(),
        rng_word_pos: mac.rng_word_pos().to_string(),
        cells: mac.cells().len(),
        programmed_rows: mac
            .programmed_rows()
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.then_some(i))
            .collect(),
        placement,
    }
}

pub fn restore_macro(sidecar: &StateSidecar, cells: Vec<FlashCell>) -> Result<EflashMacro> {
    if sidecar.format != STATE_FORMAT {
        return Err(Error::StateFile(format!("unsupported format {:?}", sidecar.format)));
    }
    sidecar.config.validate()?;
    let cfg = &sidecar.config;
    if cells.len() != sidecar.cells {
        return Err(Error::StateFile(format!(
            "sidecar declares {} cells, binary holds {}",
            sidecar.cells,
            cells.len()
        )));
    }
    let mut programmed = vec![false; cfg.geometry.rows()];
    for &r in &sidecar.programmed_rows {
        *programmed
            .get_mut(r)
            .ok_or_else(|| Error::StateFile(format!("programmed row {r} outside geometry")))? = true;
    }
    let pos: u128 = sidecar
        .rng_word_pos
        .parse()
        .map_err(|_| Error::StateFile(format!("bad rng_word_pos {:?}", sidecar.rng_word_pos)))?;
    EflashMacro::restore(
        cfg.geometry,
        cfg.cell.clone(),
        cfg.codec()?,
        cfg.analog_env(),
        cells,
        programmed,
        sidecar.seed,
        pos,
    )
}

pub fn save_state(path: &Path, mac: &EflashMacro, config: &SimConfig, placement: Option<PlacementMap>) -> Result<()> {
    let sidecar = sidecar_for(mac, config, placement);
    std::fs::write(path, encode_cells(mac.cells())).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

pub fn load_state(path: &Path) -> Result<(EflashMacro, StateSidecar)> {
    let bytes = std::fs::read(path).map_err(|e| Error::StateFile(format!("reading {}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::StateFile(format!("reading {}: {e}", side.display())))?;
    let sidecar: StateSidecar = serde_json::from_str(&text).map_err(|e| Error::StateFile(e.to_string()))?;
    let mac = restore_macro(&sidecar, decode_cells(&bytes)?)?;
    Ok((mac, sidecar))
}
