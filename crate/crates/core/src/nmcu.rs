//! Near-memory computing unit.
//!
//! Two 128-lane processing elements sit behind each macro; one row read
//! delivers 256 weights. Layer weights are stored output-channel-major from
//! `weight_base_row`, so flow control just walks the weight stream row by row
//! while the input fetcher supplies 128-element slices from either the host
//! input buffer or the ping-pong buffer. Every accumulator is requantized to
//! int8 and written to the ping-pong write half.

use serde::{Deserialize, Serialize};

use crate::array::{EflashMacro, CELLS_PER_ROW};
use crate::error::{Error, Result};

pub const PE_LANES: usize = 128;
pub const PES_PER_MACRO: usize = 2;
pub const DEFAULT_PING_PONG_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_base_row: usize,
    pub bias: Vec<i32>,
    pub input_zero_point: i32,
    pub output_zero_point: i32,
    /// Per output channel: input_scale * weight_scale / output_scale.
    pub requant_scale: Vec<f64>,
    pub activation: Activation,
}

impl LayerDescriptor {
    pub const MAX_IN_DIM: usize = 1 << 16;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Descriptor(m));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad(format!("dimensions {}x{} must be at least 1", self.in_dim, self.out_dim));
        }
        if self.bias.len() != self.out_dim {
            return bad(format!("bias has {} entries, out_dim is {}", self.bias.len(), self.out_dim));
        }
        if self.requant_scale.len() != self.out_dim {
            return bad(format!(
                "requant_scale has {} entries, out_dim is {}",
                self.requant_scale.len(),
                self.out_dim
            ));
        }
        if let Some(s) = self.requant_scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("requant scale {s} must be positive"));
        }
        for (name, zp) in [("input", self.input_zero_point), ("output", self.output_zero_point)] {
            if !(-128..=127).contains(&zp) {
                return bad(format!("{name} zero point {zp} outside int8"));
            }
        }
        if self.in_dim > Self::MAX_IN_DIM {
            return bad(format!("in_dim {} exceeds {}", self.in_dim, Self::MAX_IN_DIM));
        }
        // |w| <= 8, |x - zp| <= 255
        let max_bias = self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        let worst = max_bias + self.in_dim as i64 * 8 * 255;
        if worst > i32::MAX as i64 {
            return bad(format!("accumulator may overflow: worst case {worst}"));
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn weight_rows(&self) -> usize {
        self.weight_count().div_ceil(CELLS_PER_ROW)
    }

    pub fn chunks_per_output(&self) -> usize {
        self.in_dim.div_ceil(PE_LANES)
    }
}

/// Σ w[k]·(x[k] − zp) over one PE's 128 lanes.
pub fn pe_dot(weights: &[i8; PE_LANES], inputs: &[i8; PE_LANES], input_zero_point: i32) -> i32 {
    weights
        .iter()
        .zip(inputs)
        .map(|(&w, &x)| w as i32 * (x as i32 - input_zero_point))
        .sum()
}

/// `clamp(zp + round_half_away_from_zero(acc * scale), -128, 127)`.
pub fn requantize(acc: i32, scale: f64, output_zero_point: i32) -> i8 {
    let scaled = (acc as f64 * scale).round();
    (output_zero_point as f64 + scaled).clamp(-128.0, 127.0) as i8
}

pub fn activate(v: i8, activation: Activation, output_zero_point: i32) -> i8 {
    match activation {
        Activation::None => v,
        Activation::Relu => (v as i32).max(output_zero_point) as i8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    InputBuffer,
    PingPong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PingPongBuffer {
    halves: [Vec<i8>; 2],
    capacity: usize,
    read_half: usize,
    write_pending: bool,
}

impl Default for PingPongBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_PING_PONG_CAPACITY)
    }
}

impl PingPongBuffer {
    pub fn new(capacity: usize) -> Self {
        PingPongBuffer {
            halves: [Vec::new(), Vec::new()],
            capacity,
            read_half: 0,
            write_pending: false,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn read_half(&self) -> usize {
        self.read_half
    }

    pub fn write_half(&self) -> usize {
        1 - self.read_half
    }

    pub fn readable(&self) -> &[i8] {
        &self.halves[self.read_half]
    }

    pub fn written(&self) -> &[i8] {
        &self.halves[self.write_half()]
    }

    pub fn write(&mut self, data: &[i8]) -> Result<()> {
        if data.len() > self.capacity {
            return Err(Error::PingPong(format!(
                "{} activations exceed half capacity {}",
                data.len(),
                self.capacity
            )));
        }
        let w = self.write_half();
        self.halves[w].clear();
        self.halves[w].extend_from_slice(data);
        self.write_pending = true;
        Ok(())
    }

    /// Exchange halves; only legal after a layer wrote its results.
    pub fn swap(&mut self) -> Result<()> {
        if !self.write_pending {
            return Err(Error::PingPong("swap without a completed layer".into()));
        }
        self.read_half = self.write_half();
        self.write_pending = false;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.halves.iter_mut().for_each(Vec::clear);
        self.read_half = 0;
        self.write_pending = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchEvent {
    pub layer: usize,
    pub source: InputSource,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub source: InputSource,
    pub in_dim: usize,
    pub out_dim: usize,
    pub macro_reads: u64,
    pub pe_dots: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecTrace {
    /// Vectors the host pushed into the input buffer.
    pub host_loads: usize,
    pub fetches: Vec<FetchEvent>,
    pub layers: Vec<LayerTrace>,
}

impl ExecTrace {
    /// Maximal runs of consecutive input-buffer fetches.
    pub fn input_buffer_episodes(&self) -> usize {
        let mut n = 0;
        let mut prev = None;
        for f in &self.fetches {
            if f.source == InputSource::InputBuffer && prev != Some(InputSource::InputBuffer) {
                n += 1;
            }
            prev = Some(f.source);
        }
        n
    }

    pub fn macro_reads(&self) -> u64 {
        self.layers.iter().map(|l| l.macro_reads).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Nmcu {
    input_buffer: Vec<i8>,
    ping_pong: PingPongBuffer,
    trace: ExecTrace,
    record_fetches: bool,
}

impl Nmcu {
    pub fn new(ping_pong_capacity: usize) -> Self {
        Nmcu {
            ping_pong: PingPongBuffer::new(ping_pong_capacity),
            record_fetches: true,
            ..Default::default()
        }
    }

    /// Skip per-fetch trace events; layer-level counters are kept.
    pub fn without_fetch_trace(mut self) -> Self {
        self.record_fetches = false;
        self
    }

    pub fn ping_pong(&self) -> &PingPongBuffer {
        &self.ping_pong
    }

    pub fn trace(&self) -> &ExecTrace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> ExecTrace {
        std::mem::take(&mut self.trace)
    }

    /// Start a fresh inference: empty buffers and trace.
    pub fn reset(&mut self) {
        self.input_buffer.clear();
        self.ping_pong.clear();
        self.trace = ExecTrace::default();
    }

    pub fn load_input(&mut self, input: &[i8]) {
        self.input_buffer.clear();
        self.input_buffer.extend_from_slice(input);
        self.trace.host_loads += 1;
    }

    fn source_slice(&self, source: InputSource) -> &[i8] {
        match source {
            InputSource::InputBuffer => &self.input_buffer,
            InputSource::PingPong => self.ping_pong.readable(),
        }
    }

    /// 128 inputs from `offset`; lanes past the end hold `pad` (the layer's
    /// input zero point) so they contribute nothing.
    pub fn fetch_inputs(&mut self, source: InputSource, offset: usize, pad: i8) -> Result<[i8; PE_LANES]> {
        let data = self.source_slice(source);
        if data.is_empty() {
            return Err(Error::EmptySource(match source {
                InputSource::InputBuffer => "input buffer",
                InputSource::PingPong => "ping-pong buffer",
            }));
        }
        let mut out = [pad; PE_LANES];
        if offset < data.len() {
            let n = (data.len() - offset).min(PE_LANES);
            out[..n].copy_from_slice(&data[offset..offset + n]);
        }
        if self.record_fetches {
            let layer = self.trace.layers.len();
            self.trace.fetches.push(FetchEvent { layer, source, offset });
        }
        Ok(out)
    }

    /// Run one fully connected layer against weights stored in `mac`.
    pub fn mvm(&mut self, layer: &LayerDescriptor, source: InputSource, mac: &mut EflashMacro) -> Result<()> {
        layer.validate()?;
        if layer.out_dim > self.ping_pong.capacity() {
            return Err(Error::PingPong(format!(
                "layer output {} exceeds half capacity {}",
                layer.out_dim,
                self.ping_pong.capacity()
            )));
        }
        let available = self.source_slice(source).len();
        if available == 0 {
            self.fetch_inputs(source, 0, 0)?;
        }
        if available != layer.in_dim {
            return Err(Error::Descriptor(format!(
                "layer expects {} inputs, source holds {available}",
                layer.in_dim
            )));
        }
        let end_row = layer.weight_base_row + layer.weight_rows();
        if end_row > mac.geometry().rows() {
            return Err(Error::CapacityExceeded {
                needed: end_row,
                available: mac.geometry().rows(),
                unit: "rows",
            });
        }

        let pad = layer.input_zero_point as i8;
        let mut stream = WeightStream::new(layer.weight_base_row);
        let mut outputs = Vec::with_capacity(layer.out_dim);
        let mut pe_dots = 0u64;
        for j in 0..layer.out_dim {
            let mut acc = layer.bias[j];
            for chunk in 0..layer.chunks_per_output() {
                let offset = chunk * PE_LANES;
                let lanes = (layer.in_dim - offset).min(PE_LANES);
                let mut w = [0i8; PE_LANES];
                stream.take(mac, j * layer.in_dim + offset, &mut w[..lanes])?;
                let x = self.fetch_inputs(source, offset, pad)?;
                acc += pe_dot(&w, &x, layer.input_zero_point);
                pe_dots += 1;
            }
            let q = requantize(acc, layer.requant_scale[j], layer.output_zero_point);
            outputs.push(activate(q, layer.activation, layer.output_zero_point));
        }
        self.ping_pong.write(&outputs)?;
        let index = self.trace.layers.len();
        self.trace.layers.push(LayerTrace {
            layer: index,
            source,
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
            macro_reads: stream.reads,
            pe_dots,
        });
        Ok(())
    }

    pub fn swap_ping_pong(&mut self) -> Result<()> {
        self.ping_pong.swap()
    }
}

/// Sequential reader over a layer's weight stream with a one-row cache.
struct WeightStream {
    base_row: usize,
    cached: Option<(usize, Vec<i8>)>,
    reads: u64,
}

impl WeightStream {
    fn new(base_row: usize) -> Self {
        WeightStream {
            base_row,
            cached: None,
            reads: 0,
        }
    }

    fn take(&mut self, mac: &mut EflashMacro, start: usize, out: &mut [i8]) -> Result<()> {
        let mut filled = 0;
        while filled < out.len() {
            let flat = start + filled;
            let row = self.base_row + flat / CELLS_PER_ROW;
            let col = flat % CELLS_PER_ROW;
            if self.cached.as_ref().map(|(r, _)| *r) != Some(row) {
                if !mac.is_programmed(row) {
                    return Err(Error::UnprogrammedRow(row));
                }
                let weights = mac.read_row_weights(row)?;
                self.reads += 1;
                self.cached = Some((row, weights));
            }
            let cached = &self.cached.as_ref().unwrap().1;
            let n = (CELLS_PER_ROW - col).min(out.len() - filled);
            out[filled..filled + n].copy_from_slice(&cached[col..col + n]);
            filled += n;
        }
        Ok(())
    }
}
