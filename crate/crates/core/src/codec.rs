//! Weight-to-state mapping and the reference ladder of a 4-bits/cell array.
//!
//! Each cell holds one signed 4-bit weight as one of 16 threshold-voltage
//! states. State 0 is the erased state; states 1..=15 are reached by
//! programming until the cell passes its verify level. Reads classify a
//! cell by counting how many read boundaries lie strictly below its VT.
//!
//! The default mapping is monotone (`state = w + 8`), so neighbouring states
//! always hold neighbouring weights and a single-boundary misread moves the
//! weight by exactly one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold and word-line voltages are carried as millivolts.
pub type Millivolts = f64;

/// I/O supply level; the ceiling for every verify and read reference.
pub const VDDH_MV: Millivolts = 2500.0;

pub const NUM_STATES: usize = 16;
pub const NUM_LEVELS: usize = NUM_STATES - 1;

/// Signed two's-complement 4-bit weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct WeightNibble(i8);

impl WeightNibble {
    pub const MIN: i32 = -8;
    pub const MAX: i32 = 7;

    pub fn new(value: i32) -> Result<Self> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(WeightNibble(value as i8))
        } else {
            Err(Error::WeightOutOfRange(value))
        }
    }

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = WeightNibble> {
        (Self::MIN..=Self::MAX).map(|v| WeightNibble(v as i8))
    }
}

impl TryFrom<i32> for WeightNibble {
    type Error = Error;
    fn try_from(v: i32) -> Result<Self> {
        WeightNibble::new(v)
    }
}

impl From<WeightNibble> for i32 {
    fn from(w: WeightNibble) -> i32 {
        w.0 as i32
    }
}

/// Programmed state of a cell, ordered by ascending target VT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub struct CellState(u8);

impl CellState {
    pub const ERASED: CellState = CellState(0);
    pub const TOP: CellState = CellState(15);

    pub fn new(index: i32) -> Result<Self> {
        if (0..NUM_STATES as i32).contains(&index) {
            Ok(CellState(index as u8))
        } else {
            Err(Error::StateOutOfRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = CellState> {
        (0..NUM_STATES as u8).map(CellState)
    }

    pub(crate) fn from_index_unchecked(index: usize) -> Self {
        debug_assert!(index < NUM_STATES);
        CellState(index as u8)
    }
}

impl TryFrom<i32> for CellState {
    type Error = Error;
    fn try_from(v: i32) -> Result<Self> {
        CellState::new(v)
    }
}

impl From<CellState> for i32 {
    fn from(s: CellState) -> i32 {
        s.0 as i32
    }
}

/// Verify levels and read boundaries for the 15 programmed states.
///
/// `verify_mv[k]` is the level a cell targeting state `k + 1` must exceed
/// during program-verify; `read_mv[k]` is the decision boundary between
/// states `k` and `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLadder", into = "RawLadder")]
pub struct ReferenceLadder {
    verify_mv: [Millivolts; NUM_LEVELS],
    read_mv: [Millivolts; NUM_LEVELS],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLadder {
    verify_mv: Vec<Millivolts>,
    read_mv: Vec<Millivolts>,
}

impl TryFrom<RawLadder> for ReferenceLadder {
    type Error = Error;
    fn try_from(raw: RawLadder) -> Result<Self> {
        let verify: [Millivolts; NUM_LEVELS] = raw.verify_mv.try_into().map_err(|v: Vec<_>| {
            Error::InvalidLadder(format!("verify_mv has {} entries, need 15", v.len()))
        })?;
        let read: [Millivolts; NUM_LEVELS] = raw.read_mv.try_into().map_err(|v: Vec<_>| {
            Error::InvalidLadder(format!("read_mv has {} entries, need 15", v.len()))
        })?;
        ReferenceLadder::new(verify, read)
    }
}

impl From<ReferenceLadder> for RawLadder {
    fn from(l: ReferenceLadder) -> Self {
        RawLadder {
            verify_mv: l.verify_mv.to_vec(),
            read_mv: l.read_mv.to_vec(),
        }
    }
}

impl Default for ReferenceLadder {
    fn default() -> Self {
        Self::uniform_default()
    }
}

impl ReferenceLadder {
    pub const DEFAULT_FLOOR_MV: Millivolts = 600.0;
    pub const DEFAULT_CEILING_GUARD_MV: Millivolts = 100.0;
    pub const DEFAULT_READ_OFFSET_MV: Millivolts = 50.0;

    pub fn new(verify_mv: [Millivolts; NUM_LEVELS], read_mv: [Millivolts; NUM_LEVELS]) -> Result<Self> {
        for (name, levels) in [("verify_mv", &verify_mv), ("read_mv", &read_mv)] {
            if let Some(v) = levels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > VDDH_MV) {
                return Err(Error::InvalidLadder(format!("{name} level {v} outside [0, {VDDH_MV}] mV")));
            }
            if let Some(k) = (1..NUM_LEVELS).find(|&k| levels[k] <= levels[k - 1]) {
                return Err(Error::InvalidLadder(format!("{name} not strictly ascending at index {k}")));
            }
        }
        if let Some(k) = (0..NUM_LEVELS).find(|&k| read_mv[k] >= verify_mv[k]) {
            return Err(Error::InvalidLadder(format!(
                "read_mv[{k}] = {} must lie below verify_mv[{k}] = {}",
                read_mv[k], verify_mv[k]
            )));
        }
        Ok(ReferenceLadder { verify_mv, read_mv })
    }

    /// Evenly spaced verify levels over `[floor, ceiling]`, each read boundary
    /// `read_offset` below its verify level.
    pub fn uniform(floor_mv: Millivolts, ceiling_mv: Millivolts, read_offset_mv: Millivolts) -> Result<Self> {
        let spacing = (ceiling_mv - floor_mv) / (NUM_LEVELS - 1) as f64;
        let verify = std::array::from_fn(|k| floor_mv + k as f64 * spacing);
        let read = std::array::from_fn(|k| verify[k] - read_offset_mv);
        Self::new(verify, read)
    }

    /// 600 mV .. 2400 mV in 15 equal steps, read boundaries 50 mV below.
    pub fn uniform_default() -> Self {
        Self::uniform(
            Self::DEFAULT_FLOOR_MV,
            VDDH_MV - Self::DEFAULT_CEILING_GUARD_MV,
            Self::DEFAULT_READ_OFFSET_MV,
        )
        .expect("default ladder is valid")
    }

    pub fn verify_levels(&self) -> &[Millivolts; NUM_LEVELS] {
        &self.verify_mv
    }

    pub fn read_levels(&self) -> &[Millivolts; NUM_LEVELS] {
        &self.read_mv
    }

    /// Number of read boundaries strictly below `vt`.
    pub fn classify(&self, vt: Millivolts) -> CellState {
        CellState::from_index_unchecked(self.read_mv.partition_point(|&r| r < vt))
    }

    /// Smallest gap between consecutive verify levels.
    pub fn min_spacing_mv(&self) -> Millivolts {
        self.verify_mv
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Table-driven weight/state codec plus the active ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct StateCodec {
    state_to_weight: [i8; NUM_STATES],
    weight_to_state: [u8; NUM_STATES],
    ladder: ReferenceLadder,
}

impl Default for StateCodec {
    fn default() -> Self {
        Self::monotone(ReferenceLadder::default())
    }
}

impl StateCodec {
    /// `state = w + 8`.
    pub fn monotone(ladder: ReferenceLadder) -> Self {
        let table = std::array::from_fn(|s| s as i8 - 8);
        Self::with_table(table, ladder).expect("monotone table is a bijection")
    }

    /// `table[s]` is the weight stored by state `s`; must be a permutation of -8..=7.
    pub fn with_table(table: [i8; NUM_STATES], ladder: ReferenceLadder) -> Result<Self> {
        let mut inverse = [u8::MAX; NUM_STATES];
        for (state, &w) in table.iter().enumerate() {
            let w = WeightNibble::new(w as i32).map_err(|e| Error::InvalidMapping(e.to_string()))?;
            let slot = &mut inverse[(w.value() + 8) as usize];
            if *slot != u8::MAX {
                return Err(Error::InvalidMapping(format!("weight {} mapped twice", w.value())));
            }
            *slot = state as u8;
        }
        Ok(StateCodec {
            state_to_weight: table,
            weight_to_state: inverse,
            ladder,
        })
    }

    pub fn ladder(&self) -> &ReferenceLadder {
        &self.ladder
    }

    pub fn table(&self) -> &[i8; NUM_STATES] {
        &self.state_to_weight
    }

    pub fn encode(&self, w: WeightNibble) -> CellState {
        CellState(self.weight_to_state[(w.value() + 8) as usize])
    }

    pub fn decode(&self, s: CellState) -> WeightNibble {
        WeightNibble(self.state_to_weight[s.index()])
    }

    /// Checked variants taking raw integers.
    pub fn encode_weight(&self, w: i32) -> Result<CellState> {
        WeightNibble::new(w).map(|w| self.encode(w))
    }

    pub fn decode_state(&self, s: i32) -> Result<WeightNibble> {
        CellState::new(s).map(|s| self.decode(s))
    }

    pub fn verify_level(&self, s: CellState) -> Result<Millivolts> {
        match s.index() {
            0 => Err(Error::ErasedStateHasNoVerifyLevel),
            k => Ok(self.ladder.verify_mv[k - 1]),
        }
    }

    pub fn classify_vt(&self, vt: Millivolts) -> CellState {
        self.ladder.classify(vt)
    }

    /// True when every pair of neighbouring states decodes to weights one apart.
    pub fn has_unit_adjacency(&self) -> bool {
        self.state_to_weight
            .windows(2)
            .all(|w| (w[1] as i32 - w[0] as i32).abs() == 1)
    }
}
