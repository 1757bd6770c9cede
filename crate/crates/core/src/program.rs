//! Sequential 16-state program-verify.
//!
//! States are programmed in ascending VT order. For each target state every
//! cell aimed at it is pulsed and then sensed at the state's verify level
//! until it passes or runs out of pulses. Cells aimed at the erased state are
//! never pulsed. There is no upper-bound verify: overshoot shows up in the
//! margin report instead.

use serde::{Deserialize, Serialize};

use crate::array::{EflashMacro, CELLS_PER_ROW};
use crate::codec::{CellState, Millivolts, WeightNibble, NUM_LEVELS, NUM_STATES};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PULSES: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramJob {
    pub bank: usize,
    pub row: usize,
    pub targets: Vec<CellState>,
    pub max_pulses_per_cell: u32,
}

impl ProgramJob {
    pub fn new(bank: usize, row: usize, targets: Vec<CellState>) -> Self {
        ProgramJob {
            bank,
            row,
            targets,
            max_pulses_per_cell: DEFAULT_MAX_PULSES,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.targets.len() != CELLS_PER_ROW {
            return Err(Error::InvalidParameter(format!(
                "program job needs {CELLS_PER_ROW} targets, got {}",
                self.targets.len()
            )));
        }
        if self.max_pulses_per_cell == 0 {
            return Err(Error::InvalidParameter("max_pulses_per_cell must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub state: u8,
    pub count: u64,
    pub min_mv: Option<Millivolts>,
    pub max_mv: Option<Millivolts>,
    pub mean_mv: Option<Millivolts>,
    #[serde(skip)]
    sum_mv: f64,
}

impl StateStats {
    fn empty(state: u8) -> Self {
        StateStats {
            state,
            count: 0,
            min_mv: None,
            max_mv: None,
            mean_mv: None,
            sum_mv: 0.0,
        }
    }

    fn add(&mut self, vt: Millivolts) {
        self.count += 1;
        self.sum_mv += vt;
        self.min_mv = Some(self.min_mv.map_or(vt, |m| m.min(vt)));
        self.max_mv = Some(self.max_mv.map_or(vt, |m| m.max(vt)));
        self.mean_mv = Some(self.sum_mv / self.count as f64);
    }

    fn merge(&mut self, other: &StateStats) {
        if other.count == 0 {
            return;
        }
        self.count += other.count;
        self.sum_mv += other.sum_mv;
        self.min_mv = Some(self.min_mv.map_or(other.min_mv.unwrap(), |m| m.min(other.min_mv.unwrap())));
        self.max_mv = Some(self.max_mv.map_or(other.max_mv.unwrap(), |m| m.max(other.max_mv.unwrap())));
        self.mean_mv = Some(self.sum_mv / self.count as f64);
    }
}

/// Per-target-state VT statistics and read margins after programming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub states: Vec<StateStats>,
    /// `lower_margin_mv[k-1]` = min VT of state k minus the read boundary below it.
    pub lower_margin_mv: Vec<Option<Millivolts>>,
    /// `upper_margin_mv[k]` = read boundary above state k minus max VT of state k.
    pub upper_margin_mv: Vec<Option<Millivolts>>,
    #[serde(skip)]
    read_mv: Vec<Millivolts>,
}

impl MarginReport {
    fn empty(read_mv: &[Millivolts; NUM_LEVELS]) -> Self {
        MarginReport {
            states: (0..NUM_STATES as u8).map(StateStats::empty).collect(),
            lower_margin_mv: vec![None; NUM_LEVELS],
            upper_margin_mv: vec![None; NUM_LEVELS],
            read_mv: read_mv.to_vec(),
        }
    }

    fn refresh_margins(&mut self) {
        for k in 1..NUM_STATES {
            self.lower_margin_mv[k - 1] = self.states[k].min_mv.map(|v| v - self.read_mv[k - 1]);
        }
        for k in 0..NUM_LEVELS {
            self.upper_margin_mv[k] = self.states[k].max_mv.map(|v| self.read_mv[k] - v);
        }
    }

    pub fn merge(&mut self, other: &MarginReport) {
        for (a, b) in self.states.iter_mut().zip(&other.states) {
            a.merge(b);
        }
        if self.read_mv.is_empty() {
            self.read_mv = other.read_mv.clone();
        }
        self.refresh_margins();
    }

    /// Smallest lower margin over programmed states present.
    pub fn min_lower_margin_mv(&self) -> Option<Millivolts> {
        self.lower_margin_mv.iter().flatten().copied().reduce(f64::min)
    }

    pub fn min_upper_margin_mv(&self) -> Option<Millivolts> {
        self.upper_margin_mv.iter().flatten().copied().reduce(f64::min)
    }

    pub fn cells(&self) -> u64 {
        self.states.iter().map(|s| s.count).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseStats {
    pub total_pulses: u64,
    pub max_pulses_per_cell: u32,
    pub pulses_per_state: Vec<u64>,
    pub cells_per_state: Vec<u64>,
}

impl PulseStats {
    fn new() -> Self {
        PulseStats {
            total_pulses: 0,
            max_pulses_per_cell: 0,
            pulses_per_state: vec![0; NUM_STATES],
            cells_per_state: vec![0; NUM_STATES],
        }
    }

    fn merge(&mut self, o: &PulseStats) {
        self.total_pulses += o.total_pulses;
        self.max_pulses_per_cell = self.max_pulses_per_cell.max(o.max_pulses_per_cell);
        for k in 0..NUM_STATES {
            self.pulses_per_state[k] += o.pulses_per_state[k];
            self.cells_per_state[k] += o.cells_per_state[k];
        }
    }
}

/// Target state of every pulse in issue order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProgramTrace {
    pub pulse_states: Vec<u8>,
}

impl ProgramTrace {
    /// No pulse for state s after a pulse for a higher state.
    pub fn is_ascending(&self) -> bool {
        self.pulse_states.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowOutcome {
    pub margin: MarginReport,
    pub pulses: PulseStats,
}

pub fn program_row(mac: &mut EflashMacro, job: &ProgramJob) -> Result<MarginReport> {
    program_row_traced(mac, job, None).map(|o| o.margin)
}

/// Program one row, optionally recording the target state of every pulse.
pub fn program_row_traced(
    mac: &mut EflashMacro,
    job: &ProgramJob,
    mut trace: Option<&mut ProgramTrace>,
) -> Result<RowOutcome> {
    job.validate()?;
    let global_row = mac.row_index(job.bank, job.row)?;
    let mut pulses = PulseStats::new();

    if job.targets.iter().any(|s| s.index() > 0) && !mac.env().pump.regulated {
        mac.env_mut().power_up()?;
    }

    for state in CellState::all().skip(1) {
        let cols: Vec<usize> = (0..CELLS_PER_ROW).filter(|&c| job.targets[c] == state).collect();
        if cols.is_empty() {
            continue;
        }
        let verify = mac.codec().verify_level(state)?;
        mac.env().check_reference(verify)?;
        for col in cols {
            let mut n = 0u32;
            loop {
                if n == job.max_pulses_per_cell {
                    return Err(Error::VerifyTimeout {
                        bank: job.bank,
                        row: job.row,
                        col,
                        state: state.index() as u8,
                    });
                }
                mac.program_pulse(job.bank, job.row, col)?;
                n += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.pulse_states.push(state.index() as u8);
                }
                if mac.sense(job.bank, job.row, col, verify)? {
                    break;
                }
            }
            pulses.total_pulses += n as u64;
            pulses.max_pulses_per_cell = pulses.max_pulses_per_cell.max(n);
            pulses.pulses_per_state[state.index()] += n as u64;
        }
    }

    let mut margin = MarginReport::empty(mac.codec().ladder().read_levels());
    for (cell, target) in mac.row_cells(global_row).iter().zip(&job.targets) {
        margin.states[target.index()].add(cell.vt_mv());
        pulses.cells_per_state[target.index()] += 1;
    }
    margin.refresh_margins();
    mac.mark_programmed(global_row);
    Ok(RowOutcome { margin, pulses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramSummary {
    pub first_row: usize,
    pub rows_programmed: usize,
    pub weights: usize,
    pub padded_cells: usize,
    pub margin: Option<MarginReport>,
    pub pulses: PulseStats,
}

/// Rows needed to hold `n` weights.
pub fn rows_for(n: usize) -> usize {
    n.div_ceil(CELLS_PER_ROW)
}

pub fn program_pattern(mac: &mut EflashMacro, weights: &[WeightNibble]) -> Result<ProgramSummary> {
    program_pattern_at(mac, 0, weights, DEFAULT_MAX_PULSES)
}

/// Program `weights` row by row starting at global row `first_row`; the last
/// row is padded with erased cells.
pub fn program_pattern_at(
    mac: &mut EflashMacro,
    first_row: usize,
    weights: &[WeightNibble],
    max_pulses_per_cell: u32,
) -> Result<ProgramSummary> {
    let rows = rows_for(weights.len());
    let available = mac.geometry().rows().saturating_sub(first_row);
    if rows > available {
        return Err(Error::CapacityExceeded {
            needed: weights.len(),
            available: available * CELLS_PER_ROW,
            unit: "weights",
        });
    }
    let mut summary = ProgramSummary {
        first_row,
        rows_programmed: rows,
        weights: weights.len(),
        padded_cells: rows * CELLS_PER_ROW - weights.len(),
        margin: None,
        pulses: PulseStats::new(),
    };
    for (i, chunk) in weights.chunks(CELLS_PER_ROW).enumerate() {
        let mut targets: Vec<CellState> = chunk.iter().map(|w| mac.codec().encode(*w)).collect();
        targets.resize(CELLS_PER_ROW, CellState::ERASED);
        let (bank, row) = mac.row_address(first_row + i)?;
        let job = ProgramJob {
            max_pulses_per_cell,
            ..ProgramJob::new(bank, row, targets)
        };
        let out = program_row_traced(mac, &job, None)?;
        match summary.margin.as_mut() {
            Some(m) => m.merge(&out.margin),
            None => summary.margin = Some(out.margin),
        }
        summary.pulses.merge(&out.pulses);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analog::{AnalogEnv, PumpConfig, WlDriverConfig};
    use crate::array::{CellParams, Geometry};
    use crate::codec::StateCodec;

    fn mac(params: CellParams, driver: WlDriverConfig, rows: usize) -> EflashMacro {
        EflashMacro::new(
            Geometry {
                banks: 1,
                rows_per_bank: rows,
            },
            params,
            StateCodec::default(),
            AnalogEnv::new(PumpConfig::default(), driver),
            11,
        )
        .unwrap()
    }

    fn state(i: i32) -> CellState {
        CellState::new(i).unwrap()
    }

    #[test]
    fn erased_targets_get_no_pulses() {
        let mut m = mac(CellParams::default(), WlDriverConfig::default(), 2);
        let before = m.row_cells(0).to_vec();
        let mut trace = ProgramTrace::default();
        let out = program_row_traced(&mut m, &ProgramJob::new(0, 0, vec![CellState::ERASED; 256]), Some(&mut trace))
            .unwrap();
        assert_eq!(out.pulses.total_pulses, 0);
        assert!(trace.pulse_states.is_empty());
        assert_eq!(m.row_cells(0), &before[..]);
        assert_eq!(out.margin.states[0].count, 256);
    }

    #[test]
    fn three_pulses_from_400_to_pass_600() {
        // 400 -> 500 -> 600 (not > 600) -> 700
        let params = CellParams {
            erased_mean_mv: 400.0,
            step_mean_mv: 100.0,
            ..CellParams::noiseless()
        };
        let mut m = mac(params, WlDriverConfig::default(), 1);
        let mut targets = vec![CellState::ERASED; 256];
        targets[..10].fill(state(1));
        let out = program_row_traced(&mut m, &ProgramJob::new(0, 0, targets), None).unwrap();
        assert_eq!(out.pulses.pulses_per_state[1], 30);
        assert_eq!(out.pulses.max_pulses_per_cell, 3);
        assert_eq!(m.cell(0, 0, 0).unwrap().vt_mv(), 700.0);
    }

    #[test]
    fn conventional_driver_cannot_verify_high_states() {
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::conventional(700.0), 1);
        let targets = vec![state(11); 256];
        assert!(matches!(
            program_row(&mut m, &ProgramJob::new(0, 0, targets)),
            Err(Error::UnreachableReference { .. })
        ));
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::conventional(700.0), 1);
        program_row(&mut m, &ProgramJob::new(0, 0, vec![state(10); 256])).unwrap();
    }

    #[test]
    fn timeout_when_budget_too_small() {
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 1);
        let job = ProgramJob {
            max_pulses_per_cell: 4,
            ..ProgramJob::new(0, 0, vec![state(15); 256])
        };
        assert_eq!(
            program_row(&mut m, &job),
            Err(Error::VerifyTimeout {
                bank: 0,
                row: 0,
                col: 0,
                state: 15
            })
        );
    }

    #[test]
    fn job_must_cover_the_row() {
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 1);
        assert!(program_row(&mut m, &ProgramJob::new(0, 0, vec![state(1); 10])).is_err());
    }

    #[test]
    fn pattern_row_arithmetic() {
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 4);
        let s = program_pattern(&mut m, &[]).unwrap();
        assert_eq!(s.rows_programmed, 0);
        assert!(s.margin.is_none());

        let w = |n: usize| vec![WeightNibble::new(3).unwrap(); n];
        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 4);
        assert_eq!(program_pattern(&mut m, &w(256)).unwrap().rows_programmed, 1);

        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 4);
        let s = program_pattern(&mut m, &w(300)).unwrap();
        assert_eq!(s.rows_programmed, 2);
        assert_eq!(s.padded_cells, 212);
        let second = m.read_global_row(1).unwrap();
        assert!(second[44..].iter().all(|s| *s == CellState::ERASED));
        assert!(second[..44].iter().all(|s| s.index() == 11));

        let mut m = mac(CellParams::noiseless(), WlDriverConfig::default(), 1);
        assert!(matches!(program_pattern(&mut m, &w(300)), Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn margins_positive_after_programming() {
        let mut m = mac(CellParams::default(), WlDriverConfig::default(), 1);
        let targets: Vec<CellState> = (0..256).map(|c| state(c % 16)).collect();
        let r = program_row(&mut m, &ProgramJob::new(0, 0, targets)).unwrap();
        assert!(r.min_lower_margin_mv().unwrap() > 0.0);
        assert_eq!(r.cells(), 256);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["lower_margin_mv"].as_array().unwrap().len(), 15);
    }
}
