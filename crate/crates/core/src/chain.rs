//! Deterministic simulator of the layer-chaining dataflow.
//!
//! A chain is a run of convolutions optionally ending in one deconvolution.
//! Intermediate feature rows stay on chip in a small set of row banks: row
//! `i` of a feature goes to bank `i mod num_banks` when that bank is free
//! and to the lowest free bank otherwise, and a bank recycles the moment
//! its row's last consumer has run. On a fresh buffer the input feature
//! therefore lands exactly on the modulo banks; the fallback is what lets
//! resolution-preserving convolutions (whose input rows outlive the
//! same-numbered output rows) chain without false collisions. Only the
//! first feature, the weights, and the final output cross the off-chip
//! boundary.
//! [`simulate_chain`] schedules the chain as a row wavefront — always
//! advancing the deepest layer whose next output group is computable — and
//! accounts off-chip traffic and cycles against the layer-by-layer baseline
//! of [`simulate_baseline`], where every layer reads its whole input and
//! writes its whole output off chip.
//!
//! Cycle accounting is group-wise in both modes: a layer's cycles are the
//! sum over its output row groups of the array passes for that group, plus
//! the transform-pipeline fills once per fast layer. Trace timestamps count
//! compute passes; the per-layer fill constants are added to the totals.
//! The simulator core is sequential and deterministic: identical inputs
//! produce identical reports and traces.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::ops::Range;

use crate::engine::{self, Algorithm, LayerSpec, ScuConfig};
use crate::error::{Error, Result};
use crate::oracle;
use crate::transforms::OpKind;

/// A fusable run of layers: zero or more convolutions followed by at most
/// one trailing deconvolution, with agreeing shapes along the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    layers: Vec<LayerSpec>,
    /// Dims of features `F_0 ..= F_n` as `(channels, rows, cols)`;
    /// `F_0` is the chain input, `F_n` the final output.
    features: Vec<(usize, usize, usize)>,
}

impl ChainSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("a chain needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.kind == OpKind::Deconv && i + 1 != layers.len() {
                return Err(Error::Invalid(format!(
                    "layer {i} is a deconvolution but not the trailing layer; \
                     chains are convs followed by at most one deconv"
                )));
            }
            if l.algorithm.is_fast() && !l.fast_shape_ok() {
                return Err(Error::Invalid(format!(
                    "layer {i} requests a fast algorithm but its shape has no fast transform"
                )));
            }
        }
        let mut features = Vec::with_capacity(layers.len() + 1);
        features.push((layers[0].cin, layers[0].in_rows, layers[0].in_cols));
        for (i, l) in layers.iter().enumerate() {
            let (or, oc) = l.out_dims()?;
            if i + 1 < layers.len() {
                let n = &layers[i + 1];
                if n.cin != l.cout || n.in_rows != or || n.in_cols != oc {
                    return Err(Error::Shape(format!(
                        "edge {}→{}: producer emits ({}, {}, {}), consumer expects ({}, {}, {})",
                        i,
                        i + 1,
                        l.cout,
                        or,
                        oc,
                        n.cin,
                        n.in_rows,
                        n.in_cols
                    )));
                }
            }
            features.push((l.cout, or, oc));
        }
        Ok(Self { layers, features })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// `(channels, rows, cols)` of features `F_0 ..= F_n`.
    pub fn features(&self) -> &[(usize, usize, usize)] {
        &self.features
    }
}

/// Simulator configuration (array model plus memory-system constants).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub scu: ScuConfig,
    pub num_banks: usize,
    pub activation_bits: u32,
    pub weight_bits: u32,
    pub dram_word_bytes: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scu: ScuConfig::default(),
            num_banks: 10,
            activation_bits: 12,
            weight_bits: 16,
            dram_word_bytes: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scu.validate()?;
        if self.num_banks == 0 {
            return Err(Error::Config("num_banks must be positive".into()));
        }
        if self.activation_bits == 0 || self.weight_bits == 0 {
            return Err(Error::Config("bit widths must be positive".into()));
        }
        if self.dram_word_bytes == 0 {
            return Err(Error::Config("dram_word_bytes must be positive".into()));
        }
        Ok(())
    }
}

fn parse_count(key: &str, v: &str) -> Result<u64> {
    if let Ok(n) = v.parse::<u64>() {
        return Ok(n);
    }
    let f: f64 = v
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))?;
    if f < 0.0 || f.fract() != 0.0 || f > u64::MAX as f64 {
        return Err(Error::Config(format!("{key}: '{v}' is not a whole count")));
    }
    Ok(f as u64)
}

/// Parses a pruning ratio: a fraction `n/d` or a decimal that is an exact
/// multiple of 1/64 (the hardware mask granularity).
pub fn parse_rho(v: &str) -> Result<(u16, u16)> {
    if let Some((n, d)) = v.split_once('/') {
        let num: u16 = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("rho numerator '{n}' invalid")))?;
        let den: u16 = d
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("rho denominator '{d}' invalid")))?;
        if den == 0 || num > den {
            return Err(Error::Config(format!("rho {num}/{den} outside [0, 1]")));
        }
        return Ok((num, den));
    }
    let f: f64 = v
        .parse()
        .map_err(|_| Error::Config(format!("rho '{v}' is not a number or fraction")))?;
    let scaled = f * 64.0;
    if !(0.0..=64.0).contains(&scaled) || scaled.fract() != 0.0 {
        return Err(Error::Config(format!(
            "rho '{v}' must be a multiple of 1/64 or written as a fraction n/d"
        )));
    }
    Ok((scaled as u16, 64))
}

/// Parses a `key = value` simulator configuration file. Unset keys take
/// defaults; unknown keys are rejected.
pub fn parse_sim_config(text: &str) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "frequency_hz" => cfg.scu.frequency_hz = parse_count(key, value)?,
            "pif" => cfg.scu.pif = parse_count(key, value)? as usize,
            "pof" => cfg.scu.pof = parse_count(key, value)? as usize,
            "rho" => {
                let (n, d) = parse_rho(value)?;
                cfg.scu.rho_num = n;
                cfg.scu.rho_den = d;
            }
            "num_banks" => cfg.num_banks = parse_count(key, value)? as usize,
            "preu_fill" => cfg.scu.preu_fill = parse_count(key, value)?,
            "postu_fill" => cfg.scu.postu_fill = parse_count(key, value)?,
            "activation_bits" => cfg.activation_bits = parse_count(key, value)? as u32,
            "weight_bits" => cfg.weight_bits = parse_count(key, value)? as u32,
            "dram_word_bytes" => cfg.dram_word_bytes = parse_count(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The on-chip Input Buffer: `num_banks` banks, each holding one feature
/// row. Row `i` prefers bank `i mod num_banks` and takes the lowest free
/// bank when the preferred one is occupied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BufferConfig {
    pub num_banks: usize,
    pub bank_capacity: u64,
}

impl BufferConfig {
    /// Sizes the buffer for a chain: bank capacity equal to the widest row
    /// among the banked features (`F_0 .. F_{n-1}`; the final output
    /// streams off chip and is never banked).
    pub fn for_chain(chain: &ChainSpec, cfg: &SimConfig) -> Self {
        let widest = chain.features[..chain.features.len() - 1]
            .iter()
            .map(|&(ch, _, cols)| row_bytes(ch, cols, cfg))
            .max()
            .unwrap_or(0);
        Self {
            num_banks: cfg.num_banks,
            bank_capacity: widest,
        }
    }

    pub fn check(&self, chain: &ChainSpec, cfg: &SimConfig) -> Result<()> {
        if self.num_banks == 0 {
            return Err(Error::Config("num_banks must be positive".into()));
        }
        for (i, &(ch, _, cols)) in chain.features[..chain.features.len() - 1].iter().enumerate() {
            let need = row_bytes(ch, cols, cfg);
            if need > self.bank_capacity {
                return Err(Error::Config(format!(
                    "bank capacity {} bytes cannot hold a row of feature F{i} ({need} bytes)",
                    self.bank_capacity
                )));
            }
        }
        Ok(())
    }
}

fn round_word(bytes: u64, word: u64) -> u64 {
    bytes.div_ceil(word) * word
}

/// Off-chip bytes of one feature row (all channels of one spatial row).
pub fn row_bytes(channels: usize, cols: usize, cfg: &SimConfig) -> u64 {
    let bits = channels as u64 * cols as u64 * cfg.activation_bits as u64;
    round_word(bits.div_ceil(8), cfg.dram_word_bytes)
}

/// Off-chip bytes of one whole feature.
pub fn feature_bytes(dims: (usize, usize, usize), cfg: &SimConfig) -> u64 {
    let (ch, rows, cols) = dims;
    rows as u64 * row_bytes(ch, cols, cfg)
}

/// Off-chip bytes of a layer's weights (plus sparse indices where the
/// algorithm uses them), counted once per layer invocation in both the
/// chained and baseline modes.
pub fn layer_weight_bytes(spec: &LayerSpec, cfg: &SimConfig) -> u64 {
    let kernels = spec.cin as u64 * spec.cout as u64;
    let bits = match spec.algorithm {
        Algorithm::Direct => {
            kernels * (spec.geometry.kernel * spec.geometry.kernel) as u64 * cfg.weight_bits as u64
        }
        Algorithm::FastDense => {
            let mu = spec.transform_set().mu() as u64;
            kernels * mu * mu * cfg.weight_bits as u64
        }
        // One value plus one 8-bit position index per surviving product.
        Algorithm::FastSparse => {
            kernels * cfg.scu.kernel_products(spec.kind) * (cfg.weight_bits as u64 + 8)
        }
    };
    round_word(bits.div_ceil(8), cfg.dram_word_bytes)
}

/// Input rows of `spec` needed to produce its output rows `[out_lo, out_hi)`,
/// clipped to the input bounds. Fast layers use their tile geometry (whole
/// patches including halo); direct layers use the minimal dependency range.
fn input_row_range(spec: &LayerSpec, out_lo: usize, out_hi: usize) -> (usize, usize) {
    debug_assert!(out_lo < out_hi);
    let (k, s, pad) = (
        spec.geometry.kernel as isize,
        spec.geometry.stride as isize,
        spec.geometry.pad as isize,
    );
    let rows = spec.in_rows as isize;
    let (lo, hi) = match spec.kind {
        OpKind::Conv => (
            out_lo as isize * s - pad,
            (out_hi as isize - 1) * s + k - pad,
        ),
        OpKind::Deconv => {
            if spec.algorithm.is_fast() && spec.fast_shape_ok() {
                let ts = spec.transform_set();
                let m = ts.m();
                let t0 = out_lo / m;
                let t1 = out_hi.div_ceil(m);
                let a0 = engine::patch_origin(&ts, OpKind::Deconv, spec.geometry.pad, t0);
                let a1 = engine::patch_origin(&ts, OpKind::Deconv, spec.geometry.pad, t1 - 1);
                (a0, a1 + ts.p() as isize)
            } else {
                // Output row o draws on input i when 0 ≤ o + pad − i·s < k.
                let lo = (out_lo as isize + pad - k + 1).div_euclid(s)
                    + if (out_lo as isize + pad - k + 1).rem_euclid(s) != 0 {
                        1
                    } else {
                        0
                    };
                let hi = (out_hi as isize - 1 + pad).div_euclid(s) + 1;
                (lo, hi)
            }
        }
    };
    (lo.clamp(0, rows) as usize, hi.clamp(0, rows) as usize)
}

/// Output rows a layer schedules at once: one fast tile row, or single rows
/// for direct layers.
fn group_rows(spec: &LayerSpec) -> usize {
    spec.output_row_group()
}

fn group_out_range(spec: &LayerSpec, out_rows: usize, g: usize) -> (usize, usize) {
    let m = group_rows(spec);
    (g * m, (g * m + m).min(out_rows))
}

/// Array passes needed for one output row group of a layer.
fn group_passes(spec: &LayerSpec, out_cols: usize, out_lo: usize, out_hi: usize, scu: &ScuConfig) -> u64 {
    if spec.algorithm.is_fast() && spec.fast_shape_ok() {
        let ts = spec.transform_set();
        let tiles = out_cols.div_ceil(ts.m()) as u64;
        let tpp = match spec.kind {
            OpKind::Conv => scu.convs_per_scu_pass(),
            OpKind::Deconv => 1,
        };
        (spec.cin as u64).div_ceil(scu.pif as u64)
            * (spec.cout as u64).div_ceil(scu.pof as u64)
            * tiles.div_ceil(tpp)
    } else {
        let macs = oracle::dense_mult_count(
            spec.kind,
            &spec.geometry,
            out_hi - out_lo,
            out_cols,
            spec.cin,
            spec.cout,
        );
        macs.div_ceil((scu.pif * scu.pof) as u64 * scu.multipliers_per_scu())
    }
}

/// Total cycles of one layer under the group-wise accounting (all groups
/// plus pipeline fills for fast layers). Identical in chained and baseline
/// modes, which is what makes the degenerate one-layer chain equal its
/// baseline exactly.
fn layer_total_cycles(spec: &LayerSpec, scu: &ScuConfig) -> Result<u64> {
    let (or, oc) = spec.out_dims()?;
    let mut cycles = 0u64;
    let groups = or.div_ceil(group_rows(spec));
    for g in 0..groups {
        let (lo, hi) = group_out_range(spec, or, g);
        cycles += group_passes(spec, oc, lo, hi, scu);
    }
    if spec.algorithm.is_fast() && spec.fast_shape_ok() {
        cycles += scu.preu_fill + scu.postu_fill;
    }
    Ok(cycles)
}

/// Per-layer input row ranges needed to produce output rows `out` of the
/// chain's final feature: entry `ℓ` is the range of `F_ℓ` consumed by
/// layer `ℓ`, found by backward dependency propagation.
pub fn rows_needed(chain: &ChainSpec, out: Range<usize>) -> Result<Vec<Range<usize>>> {
    let n = chain.layers.len();
    let final_rows = chain.features[n].1;
    if out.start >= out.end || out.end > final_rows {
        return Err(Error::Invalid(format!(
            "output row range {}..{} outside the final feature's {} rows",
            out.start, out.end, final_rows
        )));
    }
    let mut ranges = vec![0..0; n];
    let (mut lo, mut hi) = (out.start, out.end);
    for l in (0..n).rev() {
        let (ilo, ihi) = input_row_range(&chain.layers[l], lo, hi);
        ranges[l] = ilo..ihi;
        lo = ilo;
        hi = ihi;
    }
    Ok(ranges)
}

/// Bank timeline event states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BankEvent {
    /// A row was fetched or produced into the bank.
    Holds,
    /// The bank's row is being read by a compute step.
    Computing,
    /// The row survived the step for later consumers.
    Retained,
    /// The row's last consumer has run; the bank is free.
    Empty,
}

impl BankEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            BankEvent::Holds => "holds",
            BankEvent::Computing => "computing",
            BankEvent::Retained => "retained",
            BankEvent::Empty => "empty",
        }
    }
}

/// One bank-occupancy trace record. `feature` indexes `F_0 ..= F_n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub bank: usize,
    pub state: BankEvent,
    pub feature: usize,
    pub row: usize,
}

/// Renders a trace as `cycle,bank,state,feature,row` CSV.
pub fn trace_csv(trace: &[TraceEvent]) -> String {
    let mut out = String::from("cycle,bank,state,feature,row\n");
    for e in trace {
        let _ = writeln!(
            out,
            "{},{},{},F{},{}",
            e.cycle,
            e.bank,
            e.state.as_str(),
            e.feature,
            e.row
        );
    }
    out
}

/// Per-layer traffic and cycle figures under both execution modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTraffic {
    pub label: String,
    pub chained_reads: u64,
    pub chained_writes: u64,
    pub baseline_reads: u64,
    pub baseline_writes: u64,
    pub weight_bytes: u64,
    pub cycles: u64,
}

/// Off-chip traffic and cycle report for one chain, with the layer-by-layer
/// baseline alongside. Reads and writes include weight/index bytes; the
/// `reduction_pct` is `100·(1 − chained/baseline)` over reads+writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficCycleReport {
    pub layers: Vec<LayerTraffic>,
    pub chained_reads: u64,
    pub chained_writes: u64,
    pub chained_cycles: u64,
    pub baseline_reads: u64,
    pub baseline_writes: u64,
    pub baseline_cycles: u64,
    pub reduction_pct: f64,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl TrafficCycleReport {
    pub fn chained_total(&self) -> u64 {
        self.chained_reads + self.chained_writes
    }

    pub fn baseline_total(&self) -> u64 {
        self.baseline_reads + self.baseline_writes
    }
}

fn layer_label(spec: &LayerSpec) -> String {
    format!(
        "{}{}x{}/s{}/p{} {}",
        spec.kind.as_str(),
        spec.geometry.kernel,
        spec.geometry.kernel,
        spec.geometry.stride,
        spec.geometry.pad,
        spec.algorithm.as_str()
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum RowState {
    Missing,
    /// Present in the given bank.
    Present(usize),
    Dead,
}

struct Scheduler<'a> {
    chain: &'a ChainSpec,
    cfg: &'a SimConfig,
    num_banks: usize,
    /// Occupant of each bank as `(feature, row)`.
    banks: Vec<Option<(usize, usize)>>,
    /// State of every row of the banked features `F_0 .. F_{n-1}`.
    rows: Vec<Vec<RowState>>,
    /// Per feature: rows below this are dead (all consumers ran).
    live_lo: Vec<usize>,
    /// Per layer: next output row group to schedule / total groups.
    next_group: Vec<usize>,
    total_groups: Vec<usize>,
    cycle: u64,
    per_layer_cycles: Vec<u64>,
    f0_read_bytes: u64,
    final_write_bytes: u64,
    trace: Vec<TraceEvent>,
}

enum Feasibility {
    Ready,
    Blocked(String),
    Done,
}

impl<'a> Scheduler<'a> {
    fn new(chain: &'a ChainSpec, buf: &BufferConfig, cfg: &'a SimConfig) -> Self {
        let n = chain.layers.len();
        let mut total_groups = Vec::with_capacity(n);
        for (l, spec) in chain.layers.iter().enumerate() {
            let out_rows = chain.features[l + 1].1;
            total_groups.push(out_rows.div_ceil(group_rows(spec)));
        }
        Scheduler {
            chain,
            cfg,
            num_banks: buf.num_banks,
            banks: vec![None; buf.num_banks],
            rows: chain.features[..n]
                .iter()
                .map(|&(_, rows, _)| vec![RowState::Missing; rows])
                .collect(),
            live_lo: vec![0; n],
            next_group: vec![0; n],
            total_groups,
            cycle: 0,
            per_layer_cycles: vec![0; n],
            f0_read_bytes: 0,
            final_write_bytes: 0,
            trace: Vec::new(),
        }
    }

    /// Places a row: its modulo bank when free, else the lowest free bank.
    /// Callers guarantee a free bank exists.
    fn place(&mut self, feature: usize, row: usize) -> usize {
        let preferred = row % self.num_banks;
        let b = if self.banks[preferred].is_none() {
            preferred
        } else {
            self.banks
                .iter()
                .position(|occ| occ.is_none())
                .expect("feasibility counted enough free banks")
        };
        self.banks[b] = Some((feature, row));
        self.rows[feature][row] = RowState::Present(b);
        b
    }

    fn row_bank(&self, feature: usize, row: usize) -> usize {
        match self.rows[feature][row] {
            RowState::Present(b) => b,
            state => unreachable!("F{feature} row {row} expected banked, found {state:?}"),
        }
    }

    /// Rows of `F_l` whose every future consumer has run once group `g` of
    /// layer `l` completes (lower bound of the next group's needs, or the
    /// whole feature after the last group).
    fn dead_bound_after(&self, l: usize, g: usize) -> usize {
        if g + 1 < self.total_groups[l] {
            let spec = &self.chain.layers[l];
            let out_rows = self.chain.features[l + 1].1;
            let (nlo, nhi) = group_out_range(spec, out_rows, g + 1);
            input_row_range(spec, nlo, nhi).0
        } else {
            self.chain.features[l].1
        }
    }

    fn feasibility(&self, l: usize) -> Feasibility {
        let g = self.next_group[l];
        if g >= self.total_groups[l] {
            return Feasibility::Done;
        }
        let n = self.chain.layers.len();
        let spec = &self.chain.layers[l];
        let out_rows = self.chain.features[l + 1].1;
        let (olo, ohi) = group_out_range(spec, out_rows, g);
        let (ilo, ihi) = input_row_range(spec, olo, ohi);

        // Inputs must be present; the first layer may fetch missing rows,
        // needing one free bank per fetch (a fetched row has to coexist with
        // every other input row of the step, so fetches cannot use banks
        // freed by this step's own consumption).
        let mut fetches = 0usize;
        for r in ilo..ihi {
            match self.rows[l][r] {
                RowState::Present(_) => {}
                RowState::Dead => {
                    unreachable!("row died while a future consumer existed")
                }
                RowState::Missing => {
                    if l != 0 {
                        return Feasibility::Blocked(format!(
                            "layer {l} waits for F{l} row {r} (not yet produced)"
                        ));
                    }
                    fetches += 1;
                }
            }
        }
        let free_now = self.banks.iter().filter(|occ| occ.is_none()).count();
        if fetches > free_now {
            return Feasibility::Blocked(format!(
                "layer 0 needs {fetches} free banks to fetch F0 rows {ilo}..{ihi}, \
                 only {free_now} free"
            ));
        }

        // Outputs of non-final layers land in banks after the step's
        // consumption, so banks freed by rows dying in this very step count
        // as available (including a fetched row whose only consumer is this
        // step).
        if l + 1 < n {
            let dead_to = self.dead_bound_after(l, g);
            let dying = (self.live_lo[l]..dead_to)
                .filter(|&r| {
                    matches!(self.rows[l][r], RowState::Present(_))
                        || (l == 0
                            && self.rows[l][r] == RowState::Missing
                            && (ilo..ihi).contains(&r))
                })
                .count();
            let available = free_now - fetches + dying;
            let want = ohi - olo;
            if available < want {
                return Feasibility::Blocked(format!(
                    "layer {l} needs {want} free banks for F{} rows {olo}..{ohi}, \
                     only {available} available",
                    l + 1
                ));
            }
        }
        Feasibility::Ready
    }

    fn execute(&mut self, l: usize) {
        let g = self.next_group[l];
        let n = self.chain.layers.len();
        let spec = &self.chain.layers[l];
        let out_rows = self.chain.features[l + 1].1;
        let out_cols = self.chain.features[l + 1].2;
        let (olo, ohi) = group_out_range(spec, out_rows, g);
        let (ilo, ihi) = input_row_range(spec, olo, ohi);

        // Fetch missing first-layer rows.
        if l == 0 {
            let (ch, _, cols) = self.chain.features[0];
            for r in ilo..ihi {
                if self.rows[0][r] == RowState::Missing {
                    let b = self.place(0, r);
                    self.f0_read_bytes += row_bytes(ch, cols, self.cfg);
                    self.trace.push(TraceEvent {
                        cycle: self.cycle,
                        bank: b,
                        state: BankEvent::Holds,
                        feature: 0,
                        row: r,
                    });
                }
            }
        }

        for r in ilo..ihi {
            self.trace.push(TraceEvent {
                cycle: self.cycle,
                bank: self.row_bank(l, r),
                state: BankEvent::Computing,
                feature: l,
                row: r,
            });
        }

        let passes = group_passes(spec, out_cols, olo, ohi, &self.cfg.scu);
        self.cycle += passes;
        self.per_layer_cycles[l] += passes;

        // Retire rows whose final consumer just ran. A row the dependency
        // ranges never touched (possible for exotic direct geometries) was
        // never fetched and frees nothing.
        let dead_to = self.dead_bound_after(l, g);
        for r in self.live_lo[l]..dead_to {
            if let RowState::Present(b) = self.rows[l][r] {
                debug_assert_eq!(self.banks[b], Some((l, r)));
                self.banks[b] = None;
                self.trace.push(TraceEvent {
                    cycle: self.cycle,
                    bank: b,
                    state: BankEvent::Empty,
                    feature: l,
                    row: r,
                });
            }
            self.rows[l][r] = RowState::Dead;
        }
        self.live_lo[l] = dead_to;

        // Emit outputs: into banks, or off chip from the final layer.
        if l + 1 < n {
            for r in olo..ohi {
                let b = self.place(l + 1, r);
                self.trace.push(TraceEvent {
                    cycle: self.cycle,
                    bank: b,
                    state: BankEvent::Holds,
                    feature: l + 1,
                    row: r,
                });
            }
        } else {
            let (ch, _, cols) = self.chain.features[n];
            self.final_write_bytes += (ohi - olo) as u64 * row_bytes(ch, cols, self.cfg);
        }

        // Surviving inputs stay banked for later groups.
        for r in dead_to.max(ilo)..ihi {
            self.trace.push(TraceEvent {
                cycle: self.cycle,
                bank: self.row_bank(l, r),
                state: BankEvent::Retained,
                feature: l,
                row: r,
            });
        }

        self.next_group[l] += 1;
    }

    fn run(mut self) -> Result<TrafficCycleReport> {
        let n = self.chain.layers.len();
        loop {
            let mut all_done = true;
            let mut progressed = false;
            let mut blocks = Vec::new();
            // Deepest computable layer first.
            for l in (0..n).rev() {
                match self.feasibility(l) {
                    Feasibility::Done => {}
                    Feasibility::Ready => {
                        all_done = false;
                        self.execute(l);
                        progressed = true;
                        break;
                    }
                    Feasibility::Blocked(why) => {
                        all_done = false;
                        blocks.push(why);
                    }
                }
            }
            if all_done {
                break;
            }
            if !progressed {
                return Err(Error::Deadlock {
                    step: self.cycle,
                    detail: blocks.join("; "),
                });
            }
        }
        self.report()
    }

    fn report(self) -> Result<TrafficCycleReport> {
        let n = self.chain.layers.len();
        let mut layers = Vec::with_capacity(n);
        let (mut creads, mut cwrites, mut ccycles) = (0u64, 0u64, 0u64);
        let (mut breads, mut bwrites, mut bcycles) = (0u64, 0u64, 0u64);
        for (l, spec) in self.chain.layers.iter().enumerate() {
            let wbytes = layer_weight_bytes(spec, self.cfg);
            let fill = if spec.algorithm.is_fast() && spec.fast_shape_ok() {
                self.cfg.scu.preu_fill + self.cfg.scu.postu_fill
            } else {
                0
            };
            let cycles = self.per_layer_cycles[l] + fill;
            let chained_reads = wbytes + if l == 0 { self.f0_read_bytes } else { 0 };
            let chained_writes = if l + 1 == n { self.final_write_bytes } else { 0 };
            let baseline_reads = wbytes + feature_bytes(self.chain.features[l], self.cfg);
            let baseline_writes = feature_bytes(self.chain.features[l + 1], self.cfg);
            creads += chained_reads;
            cwrites += chained_writes;
            ccycles += cycles;
            breads += baseline_reads;
            bwrites += baseline_writes;
            bcycles += cycles;
            layers.push(LayerTraffic {
                label: layer_label(spec),
                chained_reads,
                chained_writes,
                baseline_reads,
                baseline_writes,
                weight_bytes: wbytes,
                cycles,
            });
        }
        let chained_total = creads + cwrites;
        let baseline_total = breads + bwrites;
        let reduction_pct = if baseline_total == 0 {
            0.0
        } else {
            100.0 * (1.0 - chained_total as f64 / baseline_total as f64)
        };
        Ok(TrafficCycleReport {
            layers,
            chained_reads: creads,
            chained_writes: cwrites,
            chained_cycles: ccycles,
            baseline_reads: breads,
            baseline_writes: bwrites,
            baseline_cycles: bcycles,
            reduction_pct,
            trace: self.trace,
        })
    }
}

/// Simulates a chain with on-chip row chaining. Off-chip reads are the
/// first feature's rows (each fetched exactly once) plus every layer's
/// weight bytes; off-chip writes are the final feature's rows. Returns a
/// deadlock error naming the blocking rows/banks when the buffer is too
/// small for the wavefront.
pub fn simulate_chain(
    chain: &ChainSpec,
    buf: &BufferConfig,
    cfg: &SimConfig,
) -> Result<TrafficCycleReport> {
    cfg.validate()?;
    buf.check(chain, cfg)?;
    Scheduler::new(chain, buf, cfg).run()
}

/// Simulates the layer-by-layer baseline: every layer reads its whole
/// input and writes its whole output off chip. Cycle accounting matches
/// the chained mode, so a one-layer chain equals its baseline exactly.
pub fn simulate_baseline(layers: &[LayerSpec], cfg: &SimConfig) -> Result<TrafficCycleReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(layers.len());
    let (mut reads, mut writes, mut cycles_total) = (0u64, 0u64, 0u64);
    for spec in layers {
        let (or, oc) = spec.out_dims()?;
        let wbytes = layer_weight_bytes(spec, cfg);
        let r = wbytes + feature_bytes((spec.cin, spec.in_rows, spec.in_cols), cfg);
        let w = feature_bytes((spec.cout, or, oc), cfg);
        let cycles = layer_total_cycles(spec, &cfg.scu)?;
        reads += r;
        writes += w;
        cycles_total += cycles;
        rows.push(LayerTraffic {
            label: layer_label(spec),
            chained_reads: r,
            chained_writes: w,
            baseline_reads: r,
            baseline_writes: w,
            weight_bytes: wbytes,
            cycles,
        });
    }
    Ok(TrafficCycleReport {
        layers: rows,
        chained_reads: reads,
        chained_writes: writes,
        chained_cycles: cycles_total,
        baseline_reads: reads,
        baseline_writes: writes,
        baseline_cycles: cycles_total,
        reduction_pct: 0.0,
        trace: Vec::new(),
    })
}

/// Replays a simulation trace against the dependency arithmetic and errors
/// if any bank was reused before its row's final consumer ran, if a row was
/// consumed the wrong number of times, or if a first-feature row was
/// fetched more than once.
pub fn verify_schedule_safety(
    chain: &ChainSpec,
    trace: &[TraceEvent],
) -> Result<()> {
    let n = chain.layers.len();
    // Expected consumption count of every banked row: the number of output
    // groups of its consumer layer whose input range covers it.
    let mut needed: Vec<Vec<usize>> = chain.features[..n]
        .iter()
        .map(|&(_, rows, _)| vec![0; rows])
        .collect();
    for (l, spec) in chain.layers.iter().enumerate() {
        let out_rows = chain.features[l + 1].1;
        for g in 0..out_rows.div_ceil(group_rows(spec)) {
            let (olo, ohi) = group_out_range(spec, out_rows, g);
            let (ilo, ihi) = input_row_range(spec, olo, ohi);
            for r in ilo..ihi {
                needed[l][r] += 1;
            }
        }
    }

    let num_banks = trace
        .iter()
        .map(|e| e.bank + 1)
        .max()
        .unwrap_or(0);
    let mut banks: Vec<Option<(usize, usize)>> = vec![None; num_banks];
    let mut uses: Vec<Vec<usize>> = chain.features[..n]
        .iter()
        .map(|&(_, rows, _)| vec![0; rows])
        .collect();
    let mut loads: Vec<usize> = vec![0; chain.features[0].1];

    let fully_consumed = |uses: &Vec<Vec<usize>>, f: usize, r: usize| -> bool {
        f >= n || uses[f][r] >= needed[f][r]
    };

    for e in trace {
        match e.state {
            BankEvent::Holds => {
                if let Some((f, r)) = banks[e.bank] {
                    if !fully_consumed(&uses, f, r) {
                        return Err(Error::Invalid(format!(
                            "cycle {}: bank {} overwritten while F{f} row {r} still had \
                             consumers ({} of {} uses seen)",
                            e.cycle, e.bank, uses[f][r], needed[f][r]
                        )));
                    }
                }
                banks[e.bank] = Some((e.feature, e.row));
                if e.feature == 0 {
                    loads[e.row] += 1;
                    if loads[e.row] > 1 {
                        return Err(Error::Invalid(format!(
                            "F0 row {} fetched {} times",
                            e.row, loads[e.row]
                        )));
                    }
                }
            }
            BankEvent::Computing => {
                if banks[e.bank] != Some((e.feature, e.row)) {
                    return Err(Error::Invalid(format!(
                        "cycle {}: compute read of F{} row {} from bank {} which holds {:?}",
                        e.cycle, e.feature, e.row, e.bank, banks[e.bank]
                    )));
                }
                uses[e.feature][e.row] += 1;
            }
            BankEvent::Empty => {
                if let Some((f, r)) = banks[e.bank] {
                    if !fully_consumed(&uses, f, r) {
                        return Err(Error::Invalid(format!(
                            "cycle {}: bank {} freed while F{f} row {r} still had consumers",
                            e.cycle, e.bank
                        )));
                    }
                }
                banks[e.bank] = None;
            }
            BankEvent::Retained => {}
        }
    }

    // Every consumed row must have seen exactly its expected use count by
    // the end of the run.
    for (f, per_row) in needed.iter().enumerate() {
        for (r, &want) in per_row.iter().enumerate() {
            if uses[f][r] != want {
                return Err(Error::Invalid(format!(
                    "F{f} row {r} consumed {} times, dependency arithmetic expects {want}",
                    uses[f][r]
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Activation;
    use crate::oracle::ConvGeometry;

    fn layer(
        kind: OpKind,
        k: usize,
        s: usize,
        pad: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        alg: Algorithm,
    ) -> LayerSpec {
        LayerSpec {
            kind,
            geometry: ConvGeometry::new(k, s, pad).unwrap(),
            cin,
            cout,
            in_rows: h,
            in_cols: w,
            algorithm: alg,
            activation: Activation::None,
            out_format: None,
        }
    }

    /// The reference three-layer chain whose row requirements are
    /// 10 → 8 → 5 → 6: a 3×3/s1/p0 conv, a 4×4/s1/p0 conv, and a trailing
    /// 4×4/s2/p3 deconvolution.
    fn reference_chain() -> ChainSpec {
        ChainSpec::new(vec![
            layer(OpKind::Conv, 3, 1, 0, 4, 6, 10, 10, Algorithm::FastSparse),
            layer(OpKind::Conv, 4, 1, 0, 6, 8, 8, 8, Algorithm::Direct),
            layer(OpKind::Deconv, 4, 2, 3, 8, 3, 5, 5, Algorithm::FastSparse),
        ])
        .unwrap()
    }

    #[test]
    fn chain_validation_rejects_bad_patterns() {
        // Deconv in the middle.
        assert!(ChainSpec::new(vec![
            layer(OpKind::Deconv, 4, 2, 1, 2, 2, 8, 8, Algorithm::FastSparse),
            layer(OpKind::Conv, 3, 1, 1, 2, 2, 16, 16, Algorithm::FastSparse),
        ])
        .is_err());
        // Shape mismatch along the edge.
        assert!(ChainSpec::new(vec![
            layer(OpKind::Conv, 3, 1, 1, 2, 4, 8, 8, Algorithm::FastSparse),
            layer(OpKind::Conv, 3, 1, 1, 3, 4, 8, 8, Algorithm::FastSparse),
        ])
        .is_err());
        // Fast algorithm on a shape without a fast transform.
        assert!(ChainSpec::new(vec![layer(
            OpKind::Conv,
            4,
            1,
            0,
            2,
            2,
            8,
            8,
            Algorithm::FastSparse
        )])
        .is_err());
        assert!(ChainSpec::new(Vec::new()).is_err());
    }

    #[test]
    fn rows_needed_single_conv() {
        let chain = ChainSpec::new(vec![layer(
            OpKind::Conv,
            3,
            1,
            1,
            1,
            1,
            8,
            8,
            Algorithm::FastSparse,
        )])
        .unwrap();
        // Output rows [0, 6) need input rows [0, 7): (6−1)·1 + 3 − 1 = 7.
        assert_eq!(rows_needed(&chain, 0..6).unwrap(), vec![0..7]);
    }

    #[test]
    fn rows_needed_reproduces_reference_wavefront() {
        let chain = reference_chain();
        let ranges = rows_needed(&chain, 0..6).unwrap();
        assert_eq!(ranges, vec![0..10, 0..8, 0..5]);
    }

    #[test]
    fn trailing_deconv_tile_needs_five_input_rows() {
        let chain = ChainSpec::new(vec![layer(
            OpKind::Deconv,
            4,
            2,
            3,
            2,
            2,
            5,
            5,
            Algorithm::FastSparse,
        )])
        .unwrap();
        assert_eq!(rows_needed(&chain, 0..6).unwrap(), vec![0..5]);
    }

    #[test]
    fn reference_chain_runs_with_ten_banks_and_zero_intermediate_traffic() {
        let chain = reference_chain();
        let cfg = SimConfig::default();
        let buf = BufferConfig::for_chain(&chain, &cfg);
        assert_eq!(buf.num_banks, 10);
        let report = simulate_chain(&chain, &buf, &cfg).unwrap();

        // Chained reads carry exactly F0 plus weights; writes exactly F3.
        let weights: u64 = chain
            .layers()
            .iter()
            .map(|l| layer_weight_bytes(l, &cfg))
            .sum();
        assert_eq!(
            report.chained_reads,
            feature_bytes(chain.features()[0], &cfg) + weights
        );
        assert_eq!(
            report.chained_writes,
            feature_bytes(chain.features()[3], &cfg)
        );
        // Intermediate features contribute zero off-chip bytes, so the
        // baseline exceeds the chained traffic by exactly twice their size.
        let intermediates: u64 = [1, 2]
            .iter()
            .map(|&i| feature_bytes(chain.features()[i], &cfg))
            .sum();
        assert_eq!(
            report.baseline_total() - report.chained_total(),
            2 * intermediates
        );
        assert!(report.reduction_pct > 0.0);
        assert!(!report.trace.is_empty());
        verify_schedule_safety(&chain, &report.trace).unwrap();

        // Every F0 row fetched exactly once.
        let f0_loads = report
            .trace
            .iter()
            .filter(|e| e.state == BankEvent::Holds && e.feature == 0)
            .count();
        assert_eq!(f0_loads, chain.features()[0].1);
    }

    #[test]
    fn too_few_banks_deadlocks_instead_of_corrupting() {
        let chain = reference_chain();
        let mut cfg = SimConfig::default();
        cfg.num_banks = 4;
        let buf = BufferConfig::for_chain(&chain, &cfg);
        match simulate_chain(&chain, &buf, &cfg) {
            Err(Error::Deadlock { detail, .. }) => {
                assert!(detail.contains("bank"), "detail: {detail}");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_chain_equals_baseline_exactly() {
        let spec = layer(OpKind::Conv, 3, 1, 1, 3, 5, 12, 12, Algorithm::FastSparse);
        let chain = ChainSpec::new(vec![spec]).unwrap();
        let cfg = SimConfig::default();
        let buf = BufferConfig::for_chain(&chain, &cfg);
        let chained = simulate_chain(&chain, &buf, &cfg).unwrap();
        let baseline = simulate_baseline(chain.layers(), &cfg).unwrap();
        assert_eq!(chained.chained_reads, baseline.baseline_reads);
        assert_eq!(chained.chained_writes, baseline.baseline_writes);
        assert_eq!(chained.chained_cycles, baseline.baseline_cycles);
        assert_eq!(chained.reduction_pct, 0.0);
    }

    #[test]
    fn baseline_identity_holds_for_two_layer_chain() {
        let chain = ChainSpec::new(vec![
            layer(OpKind::Conv, 3, 1, 1, 2, 4, 12, 12, Algorithm::FastSparse),
            layer(OpKind::Conv, 3, 1, 1, 4, 2, 12, 12, Algorithm::FastSparse),
        ])
        .unwrap();
        let cfg = SimConfig::default();
        let buf = BufferConfig::for_chain(&chain, &cfg);
        let report = simulate_chain(&chain, &buf, &cfg).unwrap();
        let mid = feature_bytes(chain.features()[1], &cfg);
        assert_eq!(report.baseline_total() - report.chained_total(), 2 * mid);
        verify_schedule_safety(&chain, &report.trace).unwrap();
    }

    #[test]
    fn simulation_is_deterministic() {
        let chain = reference_chain();
        let cfg = SimConfig::default();
        let buf = BufferConfig::for_chain(&chain, &cfg);
        let a = simulate_chain(&chain, &buf, &cfg).unwrap();
        let b = simulate_chain(&chain, &buf, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let chain = reference_chain();
        let cfg = SimConfig::default();
        let buf = BufferConfig::for_chain(&chain, &cfg);
        let report = simulate_chain(&chain, &buf, &cfg).unwrap();
        let csv = trace_csv(&report.trace);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("cycle,bank,state,feature,row"));
        let first = lines.next().unwrap();
        assert!(first.contains(",F0,"), "first event row: {first}");
        assert_eq!(csv.lines().count(), report.trace.len() + 1);
    }

    #[test]
    fn config_parsing_defaults_and_overrides() {
        let cfg = parse_sim_config("").unwrap();
        assert_eq!(cfg, SimConfig::default());
        let cfg = parse_sim_config(
            "# array\nfrequency_hz = 2e8\npif=6\npof = 6\nrho = 0.25\n\
             num_banks = 12\npreu_fill=2\npostu_fill=1\nactivation_bits = 8\n\
             weight_bits = 8\ndram_word_bytes = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.scu.frequency_hz, 200_000_000);
        assert_eq!((cfg.scu.pif, cfg.scu.pof), (6, 6));
        assert_eq!(cfg.scu.multipliers_per_scu(), 48);
        assert_eq!(cfg.num_banks, 12);
        assert_eq!((cfg.scu.preu_fill, cfg.scu.postu_fill), (2, 1));
        assert_eq!((cfg.activation_bits, cfg.weight_bits), (8, 8));
        assert_eq!(cfg.dram_word_bytes, 4);
        // Fractional form.
        let cfg = parse_sim_config("rho = 1/2\n").unwrap();
        assert_eq!((cfg.scu.rho_num, cfg.scu.rho_den), (1, 2));
        // Rejections.
        assert!(parse_sim_config("banks = 3\n").is_err());
        assert!(parse_sim_config("rho = 0.3\n").is_err());
        assert!(parse_sim_config("pif\n").is_err());
    }

    #[test]
    fn bank_capacity_check_rejects_narrow_banks() {
        let chain = reference_chain();
        let cfg = SimConfig::default();
        let buf = BufferConfig {
            num_banks: 10,
            bank_capacity: 1,
        };
        assert!(matches!(
            simulate_chain(&chain, &buf, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weight_bytes_track_algorithm() {
        let cfg = SimConfig::default();
        // Sparse deconv kernel: 32 products · (16 + 8) bits = 96 bytes/kernel.
        let l = layer(OpKind::Deconv, 4, 2, 1, 2, 3, 8, 8, Algorithm::FastSparse);
        assert_eq!(layer_weight_bytes(&l, &cfg), 2 * 3 * 96);
        // Direct 4×4 kernel: 16 weights · 16 bits = 32 bytes/kernel.
        let l = layer(OpKind::Conv, 4, 1, 0, 2, 3, 8, 8, Algorithm::Direct);
        assert_eq!(layer_weight_bytes(&l, &cfg), 2 * 3 * 32);
        // Dense transform-domain conv kernel: 16 values · 16 bits = 32 bytes.
        let l = layer(OpKind::Conv, 3, 1, 1, 2, 3, 8, 8, Algorithm::FastDense);
        assert_eq!(layer_weight_bytes(&l, &cfg), 2 * 3 * 32);
    }

    #[test]
    fn resolution_preserving_chain_needs_more_than_ten_banks() {
        // Two resolution-preserving convs ahead of the deconv hold a deeper
        // wavefront than the reference chain: ten banks deadlock, eleven
        // suffice, and the schedule at eleven is provably safe.
        let chain = ChainSpec::new(vec![
            layer(OpKind::Conv, 3, 1, 1, 2, 3, 20, 16, Algorithm::FastSparse),
            layer(OpKind::Conv, 3, 1, 1, 3, 4, 20, 16, Algorithm::FastSparse),
            layer(OpKind::Deconv, 4, 2, 1, 4, 2, 20, 16, Algorithm::FastSparse),
        ])
        .unwrap();
        let mut cfg = SimConfig::default();
        assert!(matches!(
            simulate_chain(&chain, &BufferConfig::for_chain(&chain, &cfg), &cfg),
            Err(Error::Deadlock { .. })
        ));

        cfg.num_banks = 11;
        let buf = BufferConfig::for_chain(&chain, &cfg);
        let report = simulate_chain(&chain, &buf, &cfg).unwrap();
        verify_schedule_safety(&chain, &report.trace).unwrap();
        assert!(report.chained_total() < report.baseline_total());
        // Output: 20×16 input, s2 deconv with pad 1 → 40×32 rows written.
        assert_eq!(
            report.chained_writes,
            feature_bytes(chain.features()[3], &cfg)
        );
    }
}
