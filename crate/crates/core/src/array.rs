//! The 4-bits/cell weight macro: banks of rows of 256 threshold-voltage cells.
//!
//! Cell VTs are held in 1/16 mV fixed point so a saved macro reloads
//! bit-exactly. All randomness comes from one seeded ChaCha stream owned by
//! the macro; identical seed, parameters and call order give identical cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analog::AnalogEnv;
use crate::codec::{CellState, Millivolts, StateCodec, NUM_STATES};
use crate::error::{Error, Result};

pub const CELLS_PER_ROW: usize = 256;
/// 4 Mb at 4 bits per cell.
pub const MAX_CELLS: usize = 1 << 20;
/// Fixed-point resolution of stored VTs (steps per millivolt).
pub const VT_SCALE: f64 = 16.0;

/// One cell's threshold voltage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct FlashCell(i32);

impl FlashCell {
    pub fn from_mv(vt: Millivolts) -> Self {
        FlashCell((vt * VT_SCALE).round() as i32)
    }

    pub fn from_raw(raw: i32) -> Self {
        FlashCell(raw)
    }

    pub fn raw(self) -> i32 {
        self.0
    }

    pub fn vt_mv(self) -> Millivolts {
        self.0 as f64 / VT_SCALE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub banks: usize,
    pub rows_per_bank: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            banks: 4,
            rows_per_bank: 64,
        }
    }
}

impl Geometry {
    /// The full 4 Mb macro.
    pub fn full_scale() -> Self {
        Geometry {
            banks: 16,
            rows_per_bank: 256,
        }
    }

    pub fn rows(&self) -> usize {
        self.banks * self.rows_per_bank
    }

    pub fn cells(&self) -> usize {
        self.rows() * CELLS_PER_ROW
    }

    pub fn validate(&self) -> Result<()> {
        if self.banks == 0 {
            return Err(Error::Config("geometry: banks must be at least 1".into()));
        }
        if self.cells() > MAX_CELLS {
            return Err(Error::Config(format!(
                "geometry: {} cells exceed the {MAX_CELLS}-cell macro",
                self.cells()
            )));
        }
        Ok(())
    }
}

/// Erase distribution and programming step model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellParams {
    pub erased_mean_mv: Millivolts,
    pub erased_sigma_mv: Millivolts,
    pub step_mean_mv: Millivolts,
    pub step_sigma_mv: Millivolts,
}

impl Default for CellParams {
    fn default() -> Self {
        CellParams {
            erased_mean_mv: 300.0,
            erased_sigma_mv: 40.0,
            step_mean_mv: 50.0,
            step_sigma_mv: 5.0,
        }
    }
}

impl CellParams {
    pub fn noiseless() -> Self {
        CellParams {
            erased_sigma_mv: 0.0,
            step_sigma_mv: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("cell: {name} must be finite and non-negative, got {v}")))
            }
        };
        finite_nonneg("erased_mean_mv", self.erased_mean_mv)?;
        finite_nonneg("erased_sigma_mv", self.erased_sigma_mv)?;
        finite_nonneg("step_mean_mv", self.step_mean_mv)?;
        finite_nonneg("step_sigma_mv", self.step_sigma_mv)?;
        if self.step_mean_mv == 0.0 {
            return Err(Error::Config("cell: step_mean_mv must be positive".into()));
        }
        Ok(())
    }
}

/// Retention stress: proportional charge loss toward the erased mean plus
/// Gaussian dispersion. `hours` and `temp_c` are carried as metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub loss_fraction: f64,
    pub sigma_mv: Millivolts,
    pub hours: f64,
    pub temp_c: f64,
}

impl DriftParams {
    pub fn new(loss_fraction: f64, sigma_mv: Millivolts) -> Self {
        DriftParams {
            loss_fraction,
            sigma_mv,
            hours: 0.0,
            temp_c: 125.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_fraction) {
            return Err(Error::InvalidParameter(format!(
                "loss_fraction {} outside [0, 1]",
                self.loss_fraction
            )));
        }
        if !(self.sigma_mv.is_finite() && self.sigma_mv >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_mv {} must be >= 0", self.sigma_mv)));
        }
        Ok(())
    }
}

/// Outcome of a bake: `matrix[before][after]` counts cells by decoded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub params: DriftParams,
    pub total_cells: u64,
    pub misreads: u64,
    /// Misreads whose decoded weight moved by exactly one.
    pub adjacent_misreads: u64,
    /// Misreads whose decoded weight moved by two or more.
    pub far_misreads: u64,
    pub misread_rate: f64,
    pub matrix: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo_mv: Millivolts,
    pub bin_mv: Millivolts,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Lower edge of the range every histogram covers.
    pub const RANGE_LO_MV: Millivolts = 0.0;
    pub const RANGE_HI_MV: Millivolts = 3200.0;

    fn new(bin_mv: Millivolts) -> Result<Self> {
        if !(bin_mv > 0.0 && bin_mv.is_finite()) {
            return Err(Error::InvalidParameter(format!("bin width {bin_mv} must be positive")));
        }
        let bins = ((Self::RANGE_HI_MV - Self::RANGE_LO_MV) / bin_mv).ceil() as usize;
        Ok(Histogram {
            lo_mv: Self::RANGE_LO_MV,
            bin_mv,
            counts: vec![0; bins.max(1)],
        })
    }

    fn add(&mut self, vt: Millivolts) {
        let idx = ((vt - self.lo_mv) / self.bin_mv).floor();
        let idx = (idx.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[idx] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_left_mv(&self, i: usize) -> Millivolts {
        self.lo_mv + i as f64 * self.bin_mv
    }

    /// Maximal runs of non-empty bins.
    pub fn clusters(&self) -> usize {
        let mut n = 0;
        let mut inside = false;
        for &c in &self.counts {
            if c > 0 && !inside {
                n += 1;
            }
            inside = c > 0;
        }
        n
    }

    /// CSV with header `bin_left_mv,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left_mv,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.bin_left_mv(i), c));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EflashMacro {
    geometry: Geometry,
    params: CellParams,
    codec: StateCodec,
    env: AnalogEnv,
    cells: Vec<FlashCell>,
    programmed: Vec<bool>,
    read_events: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl EflashMacro {
    /// Build a macro and erase every bank.
    pub fn new(geometry: Geometry, params: CellParams, codec: StateCodec, env: AnalogEnv, seed: u64) -> Result<Self> {
        geometry.validate()?;
        params.validate()?;
        let mut m = EflashMacro {
            geometry,
            params,
            codec,
            env,
            cells: vec![FlashCell::default(); geometry.cells()],
            programmed: vec![false; geometry.rows()],
            read_events: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        for bank in 0..geometry.banks {
            m.erase_bank(bank)?;
        }
        Ok(m)
    }

    /// Rebuild a macro from saved cells and RNG position.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn restore(
        geometry: Geometry,
        params: CellParams,
        codec: StateCodec,
        env: AnalogEnv,
        cells: Vec<FlashCell>,
        programmed: Vec<bool>,
        seed: u64,
        rng_word_pos: u128,
    ) -> Result<Self> {
        geometry.validate()?;
        params.validate()?;
        if cells.len() != geometry.cells() || programmed.len() != geometry.rows() {
            return Err(Error::StateFile(format!(
                "cell count {} does not match geometry ({} cells)",
                cells.len(),
                geometry.cells()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(rng_word_pos);
        Ok(EflashMacro {
            geometry,
            params,
            codec,
            env,
            cells,
            programmed,
            read_events: 0,
            seed,
            rng,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn params(&self) -> &CellParams {
        &self.params
    }

    pub fn codec(&self) -> &StateCodec {
        &self.codec
    }

    pub fn env(&self) -> &AnalogEnv {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut AnalogEnv {
        &mut self.env
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restart the random stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn cells(&self) -> &[FlashCell] {
        &self.cells
    }

    pub fn read_events(&self) -> u64 {
        self.read_events
    }

    pub fn capacity_cells(&self) -> usize {
        self.geometry.cells()
    }

    pub fn is_programmed(&self, global_row: usize) -> bool {
        self.programmed.get(global_row).copied().unwrap_or(false)
    }

    pub(crate) fn programmed_rows(&self) -> &[bool] {
        &self.programmed
    }

    pub(crate) fn mark_programmed(&mut self, global_row: usize) {
        self.programmed[global_row] = true;
    }

    /// Global row index for `(bank, row)`.
    pub fn row_index(&self, bank: usize, row: usize) -> Result<usize> {
        if bank >= self.geometry.banks {
            return Err(Error::UnknownBank {
                bank,
                banks: self.geometry.banks,
            });
        }
        if row >= self.geometry.rows_per_bank {
            return Err(Error::CellOutOfRange { bank, row, col: 0 });
        }
        Ok(bank * self.geometry.rows_per_bank + row)
    }

    /// `(bank, row)` for a global row index.
    pub fn row_address(&self, global_row: usize) -> Result<(usize, usize)> {
        if global_row >= self.geometry.rows() {
            return Err(Error::CapacityExceeded {
                needed: global_row + 1,
                available: self.geometry.rows(),
                unit: "rows",
            });
        }
        Ok((
            global_row / self.geometry.rows_per_bank,
            global_row % self.geometry.rows_per_bank,
        ))
    }

    fn cell_index(&self, bank: usize, row: usize, col: usize) -> Result<usize> {
        if col >= CELLS_PER_ROW {
            return Err(Error::CellOutOfRange { bank, row, col });
        }
        let r = self.row_index(bank, row)?;
        Ok(r * CELLS_PER_ROW + col)
    }

    pub fn cell(&self, bank: usize, row: usize, col: usize) -> Result<FlashCell> {
        Ok(self.cells[self.cell_index(bank, row, col)?])
    }

    pub fn row_cells(&self, global_row: usize) -> &[FlashCell] {
        &self.cells[global_row * CELLS_PER_ROW..(global_row + 1) * CELLS_PER_ROW]
    }

    fn gaussian(&mut self, mean: f64, sigma: f64) -> f64 {
        // sigma is validated non-negative and finite everywhere it comes from
        Normal::new(mean, sigma).expect("finite sigma").sample(&mut self.rng)
    }

    pub fn erase_bank(&mut self, bank: usize) -> Result<()> {
        let first = self.row_index(bank, 0)?;
        let rows = first..first + self.geometry.rows_per_bank;
        let (mean, sigma) = (self.params.erased_mean_mv, self.params.erased_sigma_mv);
        for i in rows.start * CELLS_PER_ROW..rows.end * CELLS_PER_ROW {
            let vt = self.gaussian(mean, sigma).max(0.0);
            self.cells[i] = FlashCell::from_mv(vt);
        }
        self.programmed[rows].fill(false);
        Ok(())
    }

    /// One fixed program pulse; returns the new VT.
    pub fn program_pulse(&mut self, bank: usize, row: usize, col: usize) -> Result<Millivolts> {
        let idx = self.cell_index(bank, row, col)?;
        self.env.check_program_ready()?;
        let dv = self
            .gaussian(self.params.step_mean_mv, self.params.step_sigma_mv)
            .max(0.0);
        let cell = &mut self.cells[idx];
        *cell = FlashCell::from_raw(cell.raw() + FlashCell::from_mv(dv).raw());
        Ok(cell.vt_mv())
    }

    /// Single-reference compare: true iff VT > `vref_mv`.
    pub fn sense(&self, bank: usize, row: usize, col: usize, vref_mv: Millivolts) -> Result<bool> {
        let idx = self.cell_index(bank, row, col)?;
        self.env.check_reference(vref_mv)?;
        Ok(self.cells[idx].vt_mv() > vref_mv)
    }

    fn check_read_references(&self) -> Result<()> {
        let top = self.codec.ladder().read_levels()[crate::codec::NUM_LEVELS - 1];
        self.env.check_reference(top)
    }

    /// Read one row and classify all 256 cells.
    pub fn read_row(&mut self, bank: usize, row: usize) -> Result<Vec<CellState>> {
        let r = self.row_index(bank, row)?;
        self.read_global_row(r)
    }

    pub fn read_global_row(&mut self, global_row: usize) -> Result<Vec<CellState>> {
        self.check_read_references()?;
        self.row_address(global_row)?;
        self.read_events += 1;
        let ladder = self.codec.ladder();
        Ok(self
            .row_cells(global_row)
            .iter()
            .map(|c| ladder.classify(c.vt_mv()))
            .collect())
    }

    /// Read one row and decode it straight to weights.
    pub fn read_row_weights(&mut self, global_row: usize) -> Result<Vec<i8>> {
        let states = self.read_global_row(global_row)?;
        Ok(states.into_iter().map(|s| self.codec.decode(s).value()).collect())
    }

    /// Decoded state of every cell, without counting a read event.
    pub fn snapshot_states(&self) -> Vec<CellState> {
        let ladder = self.codec.ladder();
        self.cells.iter().map(|c| ladder.classify(c.vt_mv())).collect()
    }

    /// Apply retention drift to every cell and report state changes.
    pub fn apply_bake(&mut self, params: &DriftParams) -> Result<DriftReport> {
        params.validate()?;
        let before = self.snapshot_states();
        let erased = self.params.erased_mean_mv;
        for i in 0..self.cells.len() {
            let vt = self.cells[i].vt_mv();
            let noise = self.gaussian(0.0, params.sigma_mv);
            let drifted = vt - params.loss_fraction * (vt - erased) + noise;
            self.cells[i] = FlashCell::from_mv(drifted.max(0.0));
        }
        let after = self.snapshot_states();

        let mut matrix = vec![vec![0u64; NUM_STATES]; NUM_STATES];
        let (mut misreads, mut adjacent, mut far) = (0, 0, 0);
        for (b, a) in before.iter().zip(&after) {
            matrix[b.index()][a.index()] += 1;
            if a != b {
                misreads += 1;
                let dw = (self.codec.decode(*a).value() as i32 - self.codec.decode(*b).value() as i32).abs();
                if dw == 1 {
                    adjacent += 1;
                } else {
                    far += 1;
                }
            }
        }
        let total = self.cells.len() as u64;
        Ok(DriftReport {
            params: params.clone(),
            total_cells: total,
            misreads,
            adjacent_misreads: adjacent,
            far_misreads: far,
            misread_rate: if total == 0 { 0.0 } else { misreads as f64 / total as f64 },
            matrix,
        })
    }

    /// VT histogram over one bank, or the whole macro when `bank` is `None`.
    pub fn vt_histogram(&self, bank: Option<usize>, bin_mv: Millivolts) -> Result<Histogram> {
        let rows = match bank {
            Some(b) => {
                let first = self.row_index(b, 0)?;
                first..first + self.geometry.rows_per_bank
            }
            None => 0..self.geometry.rows(),
        };
        self.vt_histogram_rows(rows, bin_mv)
    }

    /// VT histogram over a range of global rows; an empty range gives all zeros.
    pub fn vt_histogram_rows(&self, rows: std::ops::Range<usize>, bin_mv: Millivolts) -> Result<Histogram> {
        let mut h = Histogram::new(bin_mv)?;
        let end = rows.end.min(self.geometry.rows());
        for r in rows.start.min(end)..end {
            for c in self.row_cells(r) {
                h.add(c.vt_mv());
            }
        }
        Ok(h)
    }
}
