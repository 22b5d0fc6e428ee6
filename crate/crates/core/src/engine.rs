//! Layer execution engine and compute-unit performance model.
//!
//! [`run_layer`] executes one convolution or transposed-convolution layer
//! under a chosen algorithm:
//!
//! * `direct` — the straightforward spatial loop (delegates to
//!   [`crate::oracle`]);
//! * `fast-dense` — tile transforms with dense `μ×μ` Hadamard products;
//! * `fast-sparse` — tile transforms multiplying only at the surviving
//!   positions of a pruned kernel bank.
//!
//! Real tensors run in `f64`. Fixed-point tensors run bit-accurately: all
//! transform arithmetic stays in exact integers and the only rounding is
//! the single round-to-nearest-even requantization at the output stage,
//! followed by the optional ReLU. Work is parallelized over output tiles,
//! which touch disjoint output regions; results are stitched in tile order,
//! so outputs are identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::oracle::{self, ConvGeometry, TileAlignment};
use crate::pruning::SparseKernelBank;
use crate::tensor::{FxpFormat, Shape, Tensor};
use crate::transforms::{OpKind, TransformSet};

/// Pointwise activation applied at the layer output (after requantization
/// in fixed-point mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        }
    }
}

/// Execution algorithm for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Direct,
    FastDense,
    FastSparse,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Algorithm::Direct),
            "fast-dense" => Ok(Algorithm::FastDense),
            "fast-sparse" => Ok(Algorithm::FastSparse),
            other => Err(Error::Format(format!("unknown algorithm '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Direct => "direct",
            Algorithm::FastDense => "fast-dense",
            Algorithm::FastSparse => "fast-sparse",
        }
    }

    pub fn is_fast(&self) -> bool {
        !matches!(self, Algorithm::Direct)
    }
}

/// Complete description of one runnable layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: OpKind,
    pub geometry: ConvGeometry,
    pub cin: usize,
    pub cout: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    pub algorithm: Algorithm,
    pub activation: Activation,
    /// Output format override for fixed-point runs; defaults to the input
    /// activation format.
    pub out_format: Option<FxpFormat>,
}

impl LayerSpec {
    /// Output spatial dims for this layer.
    pub fn out_dims(&self) -> Result<(usize, usize)> {
        match self.kind {
            OpKind::Conv => self.geometry.conv_output_dims(self.in_rows, self.in_cols),
            OpKind::Deconv => self.geometry.deconv_output_dims(self.in_rows, self.in_cols),
        }
    }

    /// Whether the layer's shape admits the builtin fast transform
    /// (3×3 stride-1 convolution or 4×4 stride-2 deconvolution; fast
    /// deconvolution additionally needs the padding parity that keeps tile
    /// origins on input samples).
    pub fn fast_shape_ok(&self) -> bool {
        match self.kind {
            OpKind::Conv => self.geometry.kernel == 3 && self.geometry.stride == 1,
            OpKind::Deconv => {
                self.geometry.kernel == 4
                    && self.geometry.stride == 2
                    && {
                        let al = deconv_alignment();
                        (self.geometry.pad as isize - al.row_offset)
                            % self.geometry.stride as isize
                            == 0
                    }
            }
        }
    }

    /// Transform set used by the fast path for this layer kind.
    pub fn transform_set(&self) -> TransformSet {
        TransformSet::builtin(self.kind)
    }

    /// Output rows produced per scheduling group: one fast tile row
    /// (`m` rows) for fast layers, single rows for direct layers.
    pub fn output_row_group(&self) -> usize {
        if self.algorithm.is_fast() && self.fast_shape_ok() {
            self.transform_set().m()
        } else {
            1
        }
    }
}

/// Compute-array configuration: `pif × pof` sparse compute units, each with
/// `64 - floor(64·ρ)` active multipliers, plus the transform-pipeline fill
/// depths used by the cycle model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScuConfig {
    pub pif: usize,
    pub pof: usize,
    pub rho_num: u16,
    pub rho_den: u16,
    pub frequency_hz: u64,
    pub preu_fill: u64,
    pub postu_fill: u64,
}

impl Default for ScuConfig {
    /// The modeled accelerator: 12×12 units at 400 MHz, ρ = 1/2, input
    /// pipeline 4 stages deep, output pipeline 3.
    fn default() -> Self {
        Self {
            pif: 12,
            pof: 12,
            rho_num: 1,
            rho_den: 2,
            frequency_hz: 400_000_000,
            preu_fill: 4,
            postu_fill: 3,
        }
    }
}

impl ScuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pif == 0 || self.pof == 0 {
            return Err(Error::Config("array dims must be positive".into()));
        }
        if self.rho_den == 0 || self.rho_num > self.rho_den {
            return Err(Error::Config(format!(
                "pruning ratio {}/{} outside [0, 1]",
                self.rho_num, self.rho_den
            )));
        }
        if self.frequency_hz == 0 {
            return Err(Error::Config("frequency must be positive".into()));
        }
        Ok(())
    }

    pub fn rho_f64(&self) -> f64 {
        self.rho_num as f64 / self.rho_den as f64
    }

    /// Active multipliers per compute unit: `64 - floor(64·ρ)`.
    pub fn multipliers_per_scu(&self) -> u64 {
        64 - (64 * self.rho_num as u64) / self.rho_den as u64
    }

    /// A unit processes one deconvolution kernel or four convolution
    /// kernels per pass.
    pub fn convs_per_scu_pass(&self) -> u64 {
        4
    }

    /// Peak multiplier throughput in GOPS
    /// (`pif · pof · multipliers · 2 ops · f`).
    pub fn peak_gops(&self) -> f64 {
        (self.pif as f64)
            * (self.pof as f64)
            * (self.multipliers_per_scu() as f64)
            * 2.0
            * (self.frequency_hz as f64)
            / 1e9
    }

    /// Surviving products per kernel at this ρ for a layer kind
    /// (`μ² - floor(ρ·μ²)`).
    pub fn kernel_products(&self, kind: OpKind) -> u64 {
        let mu2: u64 = match kind {
            OpKind::Conv => 16,
            OpKind::Deconv => 64,
        };
        mu2 - (mu2 * self.rho_num as u64) / self.rho_den as u64
    }
}

/// Weight source for [`run_layer`].
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    /// Spatial `(cout, cin, k, k)` tensor, real or fixed-point.
    Spatial(&'a Tensor),
    /// Pruned transform-domain bank.
    Bank(&'a SparseKernelBank),
}

/// Output of [`run_layer`]: the result tensor plus how many output elements
/// saturated during requantization (always 0 in real mode).
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub tensor: Tensor,
    pub saturated: u64,
}

/// Alignment of the builtin fast deconvolution tile, certified once by the
/// empirical search and cached (the search is deterministic).
pub fn deconv_alignment() -> TileAlignment {
    static ALIGNMENT: OnceLock<TileAlignment> = OnceLock::new();
    *ALIGNMENT.get_or_init(|| {
        oracle::find_tile_alignment(&TransformSet::deconv_t3_6x6_4x4(), 6, 0x5EED)
            .expect("builtin deconvolution matrices certify a unique alignment")
    })
}

/// Prepared per-kernel transform-domain weights.
enum EData {
    DenseReal(Vec<Vec<f64>>),
    DenseCodes(Vec<Vec<i64>>),
    SparseReal(Vec<(Vec<u8>, Vec<f64>)>),
    SparseCodes(Vec<(Vec<u8>, Vec<i64>)>),
}

/// Executes one layer. See the module docs for the algorithm/numeric-mode
/// matrix. `conformance` enables the hardware multiplier-budget check on
/// sparse banks.
pub fn run_layer(
    x: &Tensor,
    weights: Weights<'_>,
    spec: &LayerSpec,
    conformance: bool,
) -> Result<RunOutput> {
    let xs = x.shape();
    if xs.channels != spec.cin || xs.rows != spec.in_rows || xs.cols != spec.in_cols {
        return Err(Error::Shape(format!(
            "input is ({}, {}, {}), layer expects ({}, {}, {})",
            xs.channels, xs.rows, xs.cols, spec.cin, spec.in_rows, spec.in_cols
        )));
    }

    match spec.algorithm {
        Algorithm::Direct => run_direct(x, weights, spec),
        Algorithm::FastDense | Algorithm::FastSparse => {
            if !spec.fast_shape_ok() {
                return Err(Error::Invalid(format!(
                    "fast algorithms support 3x3/s1 convolution and 4x4/s2 deconvolution \
                     with alignment-compatible padding; got {:?} k{} s{} pad{}",
                    spec.kind, spec.geometry.kernel, spec.geometry.stride, spec.geometry.pad
                )));
            }
            run_fast(x, weights, spec, conformance)
        }
    }
}

fn run_direct(x: &Tensor, weights: Weights<'_>, spec: &LayerSpec) -> Result<RunOutput> {
    let w = match weights {
        Weights::Spatial(w) => w,
        Weights::Bank(_) => {
            return Err(Error::Invalid(
                "the direct algorithm needs spatial weights, not a transform-domain bank".into(),
            ))
        }
    };
    if w.shape().batch != spec.cout {
        return Err(Error::Shape(format!(
            "weights provide {} output channels, layer declares {}",
            w.shape().batch,
            spec.cout
        )));
    }
    if x.is_real() {
        if !w.is_real() {
            return Err(Error::Numeric(
                "real input with fixed-point weights; dequantize one side".into(),
            ));
        }
        let mut out = match spec.kind {
            OpKind::Conv => oracle::direct_conv(x, w, &spec.geometry)?,
            OpKind::Deconv => oracle::direct_deconv(x, w, &spec.geometry)?,
        };
        if spec.activation == Activation::Relu {
            let shape = out.shape();
            let data: Vec<f64> = out.real_slice()?.iter().map(|&v| v.max(0.0)).collect();
            out = Tensor::from_real_vec(shape, data)?;
        }
        Ok(RunOutput {
            tensor: out,
            saturated: 0,
        })
    } else {
        if w.is_real() {
            return Err(Error::Numeric(
                "fixed-point input with real weights; quantize the weights first".into(),
            ));
        }
        let out_fmt = spec.out_format.unwrap_or_else(|| x.fxp_format().unwrap());
        let relu = spec.activation == Activation::Relu;
        let (tensor, saturated) = match spec.kind {
            OpKind::Conv => oracle::direct_conv_fxp(x, w, &spec.geometry, out_fmt, relu)?,
            OpKind::Deconv => oracle::direct_deconv_fxp(x, w, &spec.geometry, out_fmt, relu)?,
        };
        Ok(RunOutput { tensor, saturated })
    }
}

/// Prepares transform-domain weights for every `(oc, ic)` kernel.
fn prepare_e(
    ts: &TransformSet,
    weights: Weights<'_>,
    spec: &LayerSpec,
    fxp_input: bool,
    conformance: bool,
) -> Result<(EData, u8)> {
    match (spec.algorithm, weights) {
        (Algorithm::FastSparse, Weights::Spatial(_)) => Err(Error::Invalid(
            "fast-sparse needs a pruned kernel bank; build one from the weights first".into(),
        )),
        (Algorithm::Direct, _) => unreachable!("direct layers never prepare transform weights"),
        (Algorithm::FastDense, Weights::Spatial(w)) => {
            if w.shape().batch != spec.cout || w.shape().channels != spec.cin {
                return Err(Error::Shape(format!(
                    "weights are ({}, {}) channels, layer declares ({}, {})",
                    w.shape().batch,
                    w.shape().channels,
                    spec.cout,
                    spec.cin
                )));
            }
            let k = ts.k();
            if w.shape().rows != k || w.shape().cols != k {
                return Err(Error::Shape(format!(
                    "weights are {}x{}, transform expects {k}x{k}",
                    w.shape().rows,
                    w.shape().cols
                )));
            }
            if fxp_input {
                if w.is_real() {
                    return Err(Error::Numeric(
                        "fixed-point input with real weights; quantize the weights first".into(),
                    ));
                }
                let mut all = Vec::with_capacity(spec.cout * spec.cin);
                let mut extra = 0;
                for oc in 0..spec.cout {
                    for ic in 0..spec.cin {
                        let mut kernel = vec![0i64; k * k];
                        for a in 0..k {
                            for d in 0..k {
                                kernel[a * k + d] = w.get_code(oc, ic, a, d)? as i64;
                            }
                        }
                        let (codes, e) = ts.weight_transform_codes(&kernel)?;
                        extra = e;
                        all.push(codes);
                    }
                }
                Ok((EData::DenseCodes(all), extra))
            } else {
                if !w.is_real() {
                    return Err(Error::Numeric(
                        "real input with fixed-point weights; dequantize one side".into(),
                    ));
                }
                let mut all = Vec::with_capacity(spec.cout * spec.cin);
                for oc in 0..spec.cout {
                    for ic in 0..spec.cin {
                        let mut kernel = vec![0.0; k * k];
                        for a in 0..k {
                            for d in 0..k {
                                kernel[a * k + d] = w.real_value(oc, ic, a, d);
                            }
                        }
                        all.push(ts.weight_transform(&kernel)?.data);
                    }
                }
                Ok((EData::DenseReal(all), 0))
            }
        }
        (alg, Weights::Bank(bank)) => {
            if bank.mu() != ts.mu() {
                return Err(Error::Shape(format!(
                    "bank transform edge {} vs layer transform edge {}",
                    bank.mu(),
                    ts.mu()
                )));
            }
            if bank.cout() != spec.cout || bank.cin() != spec.cin {
                return Err(Error::Shape(format!(
                    "bank is ({}, {}) channels, layer declares ({}, {})",
                    bank.cout(),
                    bank.cin(),
                    spec.cout,
                    spec.cin
                )));
            }
            if conformance {
                bank.check_budget()?;
            }
            let sparse = alg == Algorithm::FastSparse;
            if fxp_input {
                // The bank's value format already carries the full fraction
                // count (source weights plus transform growth); the caller
                // reads it via `bank_value_fraction_bits`.
                if bank.value_format().is_none() {
                    return Err(Error::Numeric(
                        "fixed-point input with a real-valued bank; quantize the weights first"
                            .into(),
                    ));
                }
                let mu2 = ts.mu() * ts.mu();
                let mut kernels = Vec::with_capacity(spec.cout * spec.cin);
                for oc in 0..spec.cout {
                    for ic in 0..spec.cin {
                        let idx = bank.kernel_indices(oc, ic)?.to_vec();
                        let codes: Vec<i64> = bank
                            .kernel_value_codes(oc, ic)?
                            .iter()
                            .map(|&c| c as i64)
                            .collect();
                        if sparse {
                            kernels.push((idx, codes));
                        } else {
                            let mut dense = vec![0i64; mu2];
                            for (&i, &v) in idx.iter().zip(&codes) {
                                dense[i as usize] = v;
                            }
                            kernels.push((Vec::new(), dense));
                        }
                    }
                }
                if sparse {
                    Ok((EData::SparseCodes(kernels), 0))
                } else {
                    Ok((
                        EData::DenseCodes(kernels.into_iter().map(|(_, d)| d).collect()),
                        0,
                    ))
                }
            } else {
                let mu2 = ts.mu() * ts.mu();
                let mut kernels = Vec::with_capacity(spec.cout * spec.cin);
                for oc in 0..spec.cout {
                    for ic in 0..spec.cin {
                        let idx = bank.kernel_indices(oc, ic)?.to_vec();
                        let vals = bank.kernel_values_real(oc, ic)?;
                        if sparse {
                            kernels.push((idx, vals));
                        } else {
                            let mut dense = vec![0.0; mu2];
                            for (&i, &v) in idx.iter().zip(&vals) {
                                dense[i as usize] = v;
                            }
                            kernels.push((Vec::new(), dense));
                        }
                    }
                }
                if sparse {
                    Ok((EData::SparseReal(kernels), 0))
                } else {
                    Ok((
                        EData::DenseReal(kernels.into_iter().map(|(_, d)| d).collect()),
                        0,
                    ))
                }
            }
        }
    }
}

/// Fraction bits carried by a bank's value codes (needed to requantize the
/// accumulated output correctly).
fn bank_value_fraction_bits(bank: &SparseKernelBank) -> u32 {
    bank.value_format()
        .map(|f| f.fraction_bits() as u32)
        .unwrap_or(0)
}

/// Top-left input coordinate of the patch feeding output tile row/col `t`.
pub(crate) fn patch_origin(ts: &TransformSet, kind: OpKind, pad: usize, t: usize) -> isize {
    match kind {
        // Stride-1 convolution: output row o needs input rows
        // [o - pad, o - pad + k); a tile starts at output row m·t.
        OpKind::Conv => (ts.m() * t) as isize - pad as isize,
        // Fast deconvolution: the patch with input origin `a` produces
        // output rows [s·a + offset, s·a + offset + m); solving for the
        // tile at output row m·t gives a = (m·t + pad - offset)/s.
        OpKind::Deconv => {
            let al = deconv_alignment();
            let num = (ts.m() * t) as isize + pad as isize - al.row_offset;
            debug_assert_eq!(num.rem_euclid(ts.s() as isize), 0);
            num.div_euclid(ts.s() as isize)
        }
    }
}

fn gather_patch_real(
    x: &Tensor,
    b: usize,
    c: usize,
    r0: isize,
    c0: isize,
    p: usize,
) -> Vec<f64> {
    let s = x.shape();
    let mut patch = vec![0.0; p * p];
    for i in 0..p {
        let r = r0 + i as isize;
        if r < 0 || r as usize >= s.rows {
            continue;
        }
        for j in 0..p {
            let col = c0 + j as isize;
            if col < 0 || col as usize >= s.cols {
                continue;
            }
            patch[i * p + j] = x.real_value(b, c, r as usize, col as usize);
        }
    }
    patch
}

fn gather_patch_codes(
    x: &Tensor,
    codes: &[i32],
    b: usize,
    c: usize,
    r0: isize,
    c0: isize,
    p: usize,
) -> Vec<i64> {
    let s = x.shape();
    let mut patch = vec![0i64; p * p];
    for i in 0..p {
        let r = r0 + i as isize;
        if r < 0 || r as usize >= s.rows {
            continue;
        }
        for j in 0..p {
            let col = c0 + j as isize;
            if col < 0 || col as usize >= s.cols {
                continue;
            }
            patch[i * p + j] = codes[s.index(b, c, r as usize, col as usize)] as i64;
        }
    }
    patch
}

fn run_fast(
    x: &Tensor,
    weights: Weights<'_>,
    spec: &LayerSpec,
    conformance: bool,
) -> Result<RunOutput> {
    let ts = spec.transform_set();
    let fxp = x.is_fxp();
    let (e_data, extra_from_spatial) = prepare_e(&ts, weights, spec, fxp, conformance)?;

    // Fraction bits of the transform-domain weight values.
    let weight_frac: u32 = match (&e_data, weights) {
        (EData::DenseCodes(_), Weights::Spatial(w)) => {
            w.fxp_format().unwrap().fraction_bits() as u32 + extra_from_spatial as u32
        }
        (EData::DenseCodes(_) | EData::SparseCodes(_), Weights::Bank(b)) => {
            bank_value_fraction_bits(b)
        }
        _ => 0,
    };

    let (or, ocl) = spec.out_dims()?;
    let (m, p) = (ts.m(), ts.p());
    let tr = or.div_ceil(m);
    let tc = ocl.div_ceil(m);
    let xs = x.shape();
    let out_shape = Shape::new(xs.batch, spec.cout, or, ocl);
    let relu = spec.activation == Activation::Relu;

    if fxp {
        let in_fmt = x.fxp_format().unwrap();
        let out_fmt = spec.out_format.unwrap_or(in_fmt);
        let acc_frac = in_fmt.fraction_bits() as u32 + weight_frac;
        let x_codes = x.code_slice()?.to_vec();
        let mut out = Tensor::zeros_fxp(out_shape, out_fmt);
        let mut saturated = 0u64;
        for b in 0..xs.batch {
            // One entry per tile: (per-out-channel m×m code blocks, sat count).
            let tiles: Vec<(Vec<Vec<i64>>, u64)> = (0..tr * tc)
                .into_par_iter()
                .map(|t| {
                    let (ti, tj) = (t / tc, t % tc);
                    let r0 = patch_origin(&ts, spec.kind, spec.geometry.pad, ti);
                    let c0 = patch_origin(&ts, spec.kind, spec.geometry.pad, tj);
                    // Input transform per input channel.
                    let ys: Vec<Vec<i64>> = (0..spec.cin)
                        .map(|c| {
                            let patch = gather_patch_codes(x, &x_codes, b, c, r0, c0, p);
                            ts.input_transform_codes(&patch)
                        })
                        .collect::<Result<_>>()?;
                    let mut blocks = Vec::with_capacity(spec.cout);
                    let mut sat = 0u64;
                    for oc in 0..spec.cout {
                        let mut u_acc = vec![0i64; ts.mu() * ts.mu()];
                        for ic in 0..spec.cin {
                            let slot = oc * spec.cin + ic;
                            match &e_data {
                                EData::DenseCodes(es) => {
                                    for (ua, (ev, yv)) in
                                        u_acc.iter_mut().zip(es[slot].iter().zip(&ys[ic]))
                                    {
                                        *ua += ev * yv;
                                    }
                                }
                                EData::SparseCodes(ks) => {
                                    let (idx, vals) = &ks[slot];
                                    for (&i, &v) in idx.iter().zip(vals) {
                                        u_acc[i as usize] += v * ys[ic][i as usize];
                                    }
                                }
                                _ => unreachable!("fixed-point run prepared code weights"),
                            }
                        }
                        let v = ts.output_transform_codes(&u_acc)?;
                        let mut block = Vec::with_capacity(m * m);
                        for code in v {
                            let (mut q, s) = out_fmt.requantize_from(code, acc_frac);
                            if s {
                                sat += 1;
                            }
                            if relu && q < 0 {
                                q = 0;
                            }
                            block.push(q);
                        }
                        blocks.push(block);
                    }
                    Ok((blocks, sat))
                })
                .collect::<Result<_>>()?;
            for (t, (blocks, sat)) in tiles.into_iter().enumerate() {
                let (ti, tj) = (t / tc, t % tc);
                saturated += sat;
                for (oc, block) in blocks.into_iter().enumerate() {
                    for i in 0..m.min(or - m * ti) {
                        for j in 0..m.min(ocl - m * tj) {
                            out.set_code(b, oc, m * ti + i, m * tj + j, block[i * m + j] as i32)?;
                        }
                    }
                }
            }
        }
        Ok(RunOutput {
            tensor: out,
            saturated,
        })
    } else {
        let mut out = Tensor::zeros_real(out_shape);
        for b in 0..xs.batch {
            let tiles: Vec<Vec<Vec<f64>>> = (0..tr * tc)
                .into_par_iter()
                .map(|t| {
                    let (ti, tj) = (t / tc, t % tc);
                    let r0 = patch_origin(&ts, spec.kind, spec.geometry.pad, ti);
                    let c0 = patch_origin(&ts, spec.kind, spec.geometry.pad, tj);
                    let ys: Vec<Vec<f64>> = (0..spec.cin)
                        .map(|c| {
                            let patch = gather_patch_real(x, b, c, r0, c0, p);
                            Ok(ts.input_transform(&patch)?.data)
                        })
                        .collect::<Result<_>>()?;
                    let mut blocks = Vec::with_capacity(spec.cout);
                    for oc in 0..spec.cout {
                        let mut u_acc = vec![0.0; ts.mu() * ts.mu()];
                        for ic in 0..spec.cin {
                            let slot = oc * spec.cin + ic;
                            match &e_data {
                                EData::DenseReal(es) => {
                                    for (ua, (ev, yv)) in
                                        u_acc.iter_mut().zip(es[slot].iter().zip(&ys[ic]))
                                    {
                                        *ua += ev * yv;
                                    }
                                }
                                EData::SparseReal(ks) => {
                                    let (idx, vals) = &ks[slot];
                                    for (&i, &v) in idx.iter().zip(vals) {
                                        u_acc[i as usize] += v * ys[ic][i as usize];
                                    }
                                }
                                _ => unreachable!("real run prepared real weights"),
                            }
                        }
                        let u = crate::transforms::TransformedPatch {
                            edge: ts.mu(),
                            provenance: crate::transforms::Provenance::ProductDomain,
                            data: u_acc,
                        };
                        let mut v = ts.output_transform(&u)?;
                        if relu {
                            for val in &mut v {
                                *val = val.max(0.0);
                            }
                        }
                        blocks.push(v);
                    }
                    Ok(blocks)
                })
                .collect::<Result<_>>()?;
            for (t, blocks) in tiles.into_iter().enumerate() {
                let (ti, tj) = (t / tc, t % tc);
                for (oc, block) in blocks.into_iter().enumerate() {
                    for i in 0..m.min(or - m * ti) {
                        for j in 0..m.min(ocl - m * tj) {
                            out.set_real(b, oc, m * ti + i, m * tj + j, block[i * m + j])?;
                        }
                    }
                }
            }
        }
        Ok(RunOutput {
            tensor: out,
            saturated: 0,
        })
    }
}

/// Cycle count of one fast layer on the array:
/// `ceil(cin/pif) · ceil(cout/pof) · ceil(tiles/tiles_per_pass)` passes plus
/// the input/output pipeline fills. A pass runs four convolution tiles or
/// one deconvolution tile per unit.
pub fn layer_cycle_model(spec: &LayerSpec, scu: &ScuConfig) -> Result<u64> {
    if !spec.algorithm.is_fast() || !spec.fast_shape_ok() {
        return Err(Error::Invalid(
            "the pass-based cycle model covers fast layers; use direct_layer_cycles otherwise"
                .into(),
        ));
    }
    scu.validate()?;
    let ts = spec.transform_set();
    let (or, oc) = spec.out_dims()?;
    let tiles = (or.div_ceil(ts.m()) * oc.div_ceil(ts.m())) as u64;
    let tpp = match spec.kind {
        OpKind::Conv => scu.convs_per_scu_pass(),
        OpKind::Deconv => 1,
    };
    let passes = (spec.cin as u64).div_ceil(scu.pif as u64)
        * (spec.cout as u64).div_ceil(scu.pof as u64)
        * tiles.div_ceil(tpp);
    Ok(passes + scu.preu_fill + scu.postu_fill)
}

/// Cycle estimate for a layer run without the fast transforms: the array
/// acts as a plain MAC grid, `pif·pof·multipliers` products per cycle, no
/// pipeline fill.
pub fn direct_layer_cycles(spec: &LayerSpec, scu: &ScuConfig) -> Result<u64> {
    scu.validate()?;
    let (or, oc) = spec.out_dims()?;
    let macs = oracle::dense_mult_count(spec.kind, &spec.geometry, or, oc, spec.cin, spec.cout);
    let per_cycle = (scu.pif * scu.pof) as u64 * scu.multipliers_per_scu();
    Ok(macs.div_ceil(per_cycle))
}

/// Dense-equivalent operation count of a layer
/// (`2 · k²/s² · cin · cout · out_rows · out_cols`).
pub fn layer_dense_equiv_ops(spec: &LayerSpec) -> Result<u64> {
    let (or, oc) = spec.out_dims()?;
    Ok(2 * oracle::dense_mult_count(spec.kind, &spec.geometry, or, oc, spec.cin, spec.cout))
}

/// Multiplier products a fast layer actually issues:
/// `kernel_products(ρ) · cin · cout · tiles`.
pub fn layer_issued_products(spec: &LayerSpec, scu: &ScuConfig) -> Result<u64> {
    if !spec.algorithm.is_fast() || !spec.fast_shape_ok() {
        return Err(Error::Invalid("issued-product model covers fast layers".into()));
    }
    let ts = spec.transform_set();
    let (or, oc) = spec.out_dims()?;
    let tiles = (or.div_ceil(ts.m()) * oc.div_ceil(ts.m())) as u64;
    Ok(scu.kernel_products(spec.kind) * spec.cin as u64 * spec.cout as u64 * tiles)
}

/// Sustained multiplier throughput of a fast layer in GOPS
/// (`2 · issued products / execution time`).
pub fn effective_gops(spec: &LayerSpec, scu: &ScuConfig) -> Result<f64> {
    let cycles = layer_cycle_model(spec, scu)?;
    let products = layer_issued_products(spec, scu)?;
    Ok(2.0 * products as f64 * scu.frequency_hz as f64 / cycles as f64 / 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{build_bank, MaskPolicy};

    fn demo_tensor(shape: Shape, mult: usize, modulus: usize, scale: f64, offset: f64) -> Tensor {
        let data = (0..shape.volume())
            .map(|i| ((i * mult) % modulus) as f64 * scale + offset)
            .collect();
        Tensor::from_real_vec(shape, data).unwrap()
    }

    fn conv_spec(cin: usize, cout: usize, h: usize, w: usize, pad: usize, alg: Algorithm) -> LayerSpec {
        LayerSpec {
            kind: OpKind::Conv,
            geometry: ConvGeometry::new(3, 1, pad).unwrap(),
            cin,
            cout,
            in_rows: h,
            in_cols: w,
            algorithm: alg,
            activation: Activation::None,
            out_format: None,
        }
    }

    fn deconv_spec(cin: usize, cout: usize, h: usize, w: usize, pad: usize, alg: Algorithm) -> LayerSpec {
        LayerSpec {
            kind: OpKind::Deconv,
            geometry: ConvGeometry::new(4, 2, pad).unwrap(),
            cin,
            cout,
            in_rows: h,
            in_cols: w,
            algorithm: alg,
            activation: Activation::None,
            out_format: None,
        }
    }

    #[test]
    fn fast_dense_conv_matches_direct_oracle() {
        let x = demo_tensor(Shape::new(1, 3, 9, 11), 37, 101, 0.017, -0.8);
        let w = demo_tensor(Shape::new(4, 3, 3, 3), 53, 61, 0.021, -0.6);
        for pad in [0usize, 1] {
            let spec = conv_spec(3, 4, 9, 11, pad, Algorithm::FastDense);
            let fast = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
            let direct = oracle::direct_conv(&x, &w, &spec.geometry).unwrap();
            assert_eq!(fast.tensor.shape(), direct.shape());
            for (a, b) in fast
                .tensor
                .real_slice()
                .unwrap()
                .iter()
                .zip(direct.real_slice().unwrap())
            {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} at pad {pad}");
            }
        }
    }

    #[test]
    fn fast_dense_deconv_matches_direct_oracle() {
        let w = demo_tensor(Shape::new(3, 2, 4, 4), 41, 83, 0.013, -0.5);
        // pad 1: 16x16 -> 32x32; pad 3: 5x7 -> 6x10; pad 1 odd cols: 7x9 -> 14x18.
        for (h, wd, pad) in [(16, 16, 1), (5, 7, 3), (7, 9, 1)] {
            let x = demo_tensor(Shape::new(1, 2, h, wd), 29, 97, 0.019, -0.9);
            let spec = deconv_spec(2, 3, h, wd, pad, Algorithm::FastDense);
            let fast = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
            let direct = oracle::direct_deconv(&x, &w, &spec.geometry).unwrap();
            assert_eq!(fast.tensor.shape(), direct.shape());
            for (a, b) in fast
                .tensor
                .real_slice()
                .unwrap()
                .iter()
                .zip(direct.real_slice().unwrap())
            {
                assert!((a - b).abs() < 1e-9, "{a} vs {b} at ({h},{wd},{pad})");
            }
        }
    }

    #[test]
    fn fast_deconv_rejects_even_padding() {
        let spec = deconv_spec(1, 1, 8, 8, 2, Algorithm::FastDense);
        let x = demo_tensor(Shape::new(1, 1, 8, 8), 7, 13, 0.1, 0.0);
        let w = demo_tensor(Shape::new(1, 1, 4, 4), 5, 11, 0.1, 0.0);
        assert!(run_layer(&x, Weights::Spatial(&w), &spec, true).is_err());
        // Direct handles any padding.
        let spec = deconv_spec(1, 1, 8, 8, 2, Algorithm::Direct);
        assert!(run_layer(&x, Weights::Spatial(&w), &spec, true).is_ok());
    }

    #[test]
    fn fxp_fast_dense_is_bit_exact_vs_fxp_direct() {
        let act = FxpFormat::activations_default();
        let wfmt = FxpFormat::weights_default();
        // Convolution.
        let x = demo_tensor(Shape::new(1, 2, 8, 8), 37, 101, 0.009, -0.45)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(3, 2, 3, 3), 53, 61, 0.012, -0.35)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let spec = conv_spec(2, 3, 8, 8, 1, Algorithm::FastDense);
        let fast = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
        let (direct, dsat) = oracle::direct_conv_fxp(&x, &w, &spec.geometry, act, false).unwrap();
        assert_eq!(fast.tensor, direct);
        assert_eq!(fast.saturated, dsat);
        // Deconvolution.
        let x = demo_tensor(Shape::new(1, 2, 9, 9), 31, 89, 0.011, -0.5)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(2, 2, 4, 4), 43, 71, 0.013, -0.4)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let spec = deconv_spec(2, 2, 9, 9, 1, Algorithm::FastDense);
        let fast = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
        let (direct, dsat) = oracle::direct_deconv_fxp(&x, &w, &spec.geometry, act, false).unwrap();
        assert_eq!(fast.tensor, direct);
        assert_eq!(fast.saturated, dsat);
    }

    #[test]
    fn unpruned_sparse_bank_is_bit_exact_vs_direct_fxp() {
        let act = FxpFormat::activations_default();
        let wfmt = FxpFormat::weights_default();
        let x = demo_tensor(Shape::new(1, 2, 9, 9), 29, 97, 0.010, -0.48)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(2, 2, 4, 4), 47, 79, 0.012, -0.42)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let ts = TransformSet::deconv_t3_6x6_4x4();
        let bank = build_bank(&ts, &w, 0, 1, MaskPolicy::PerKernel).unwrap().bank;
        let spec = deconv_spec(2, 2, 9, 9, 1, Algorithm::FastSparse);
        let sparse = run_layer(&x, Weights::Bank(&bank), &spec, true).unwrap();
        let (direct, _) = oracle::direct_deconv_fxp(&x, &w, &spec.geometry, act, false).unwrap();
        assert_eq!(sparse.tensor, direct);
    }

    #[test]
    fn sparse_equals_masked_dense_bank_bit_exact() {
        let act = FxpFormat::activations_default();
        let wfmt = FxpFormat::weights_default();
        let x = demo_tensor(Shape::new(1, 3, 9, 9), 23, 103, 0.010, -0.5)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(2, 3, 4, 4), 59, 67, 0.011, -0.38)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let ts = TransformSet::deconv_t3_6x6_4x4();
        let bank = build_bank(&ts, &w, 1, 2, MaskPolicy::PerKernel).unwrap().bank;
        let sparse_spec = deconv_spec(3, 2, 9, 9, 1, Algorithm::FastSparse);
        let dense_spec = deconv_spec(3, 2, 9, 9, 1, Algorithm::FastDense);
        let a = run_layer(&x, Weights::Bank(&bank), &sparse_spec, true).unwrap();
        let b = run_layer(&x, Weights::Bank(&bank), &dense_spec, true).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.saturated, b.saturated);
    }

    #[test]
    fn relu_clamps_fixed_point_output() {
        let act = FxpFormat::activations_default();
        let wfmt = FxpFormat::weights_default();
        let x = demo_tensor(Shape::new(1, 1, 6, 6), 17, 23, 0.08, -0.9)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(1, 1, 3, 3), 7, 11, 0.09, -0.5)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let mut spec = conv_spec(1, 1, 6, 6, 1, Algorithm::FastDense);
        spec.activation = Activation::Relu;
        let out = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
        let codes = out.tensor.code_slice().unwrap();
        assert!(codes.iter().all(|&c| c >= 0));
        // Same run without ReLU must show negatives (otherwise the test is vacuous).
        spec.activation = Activation::None;
        let out = run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap();
        assert!(out.tensor.code_slice().unwrap().iter().any(|&c| c < 0));
    }

    #[test]
    fn results_are_identical_across_thread_counts() {
        let act = FxpFormat::activations_default();
        let wfmt = FxpFormat::weights_default();
        let x = demo_tensor(Shape::new(1, 4, 18, 18), 37, 113, 0.008, -0.4)
            .quantize(act)
            .unwrap()
            .tensor;
        let w = demo_tensor(Shape::new(4, 4, 3, 3), 31, 71, 0.010, -0.33)
            .quantize(wfmt)
            .unwrap()
            .tensor;
        let spec = conv_spec(4, 4, 18, 18, 1, Algorithm::FastDense);
        let mut results = Vec::new();
        for threads in [1usize, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let out = pool.install(|| run_layer(&x, Weights::Spatial(&w), &spec, true).unwrap());
            results.push(out);
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn scu_defaults_and_peak_throughput() {
        let scu = ScuConfig::default();
        assert_eq!(scu.multipliers_per_scu(), 32);
        assert_eq!(scu.kernel_products(OpKind::Conv), 8);
        assert_eq!(scu.kernel_products(OpKind::Deconv), 32);
        // 12 · 12 · 32 · 2 · 0.4 GHz = 3686.4 GOPS.
        assert!((scu.peak_gops() - 3686.4).abs() < 1e-9);
        // Dense configuration: all 64 multipliers.
        let dense = ScuConfig {
            rho_num: 0,
            rho_den: 1,
            ..scu
        };
        assert_eq!(dense.multipliers_per_scu(), 64);
    }

    #[test]
    fn cycle_model_hand_checked_case() {
        let scu = ScuConfig::default();
        // Fast conv, 16x16 output: 8·8 = 64 tiles, 4 per pass -> 16 passes
        // for one 12x12 channel block, plus 4+3 fill.
        let spec = conv_spec(12, 12, 16, 16, 1, Algorithm::FastSparse);
        assert_eq!(layer_cycle_model(&spec, &scu).unwrap(), 16 + 7);
        // Fast deconv, 12x12 -> 24x24 output: 4·4 = 16 tiles, 1 per pass.
        let spec = deconv_spec(12, 12, 12, 12, 1, Algorithm::FastSparse);
        assert_eq!(layer_cycle_model(&spec, &scu).unwrap(), 16 + 7);
        // Channel blocks multiply.
        let spec = conv_spec(24, 36, 16, 16, 1, Algorithm::FastSparse);
        assert_eq!(layer_cycle_model(&spec, &scu).unwrap(), 2 * 3 * 16 + 7);
    }

    #[test]
    fn effective_throughput_near_peak_for_large_layers() {
        let scu = ScuConfig::default();
        let spec = deconv_spec(72, 36, 272, 480, 1, Algorithm::FastSparse);
        let eff = effective_gops(&spec, &scu).unwrap();
        let ratio = eff / scu.peak_gops();
        assert!(ratio > 0.9 && ratio <= 1.0, "utilization {ratio}");
    }

    #[test]
    fn direct_cycles_scale_with_mac_count() {
        let scu = ScuConfig::default();
        let spec = conv_spec(12, 12, 16, 16, 1, Algorithm::Direct);
        // 16·16 outputs · 9 taps · 144 channel pairs = 331776 MACs
        // over 144·32 = 4608 per cycle -> 72 cycles.
        assert_eq!(direct_layer_cycles(&spec, &scu).unwrap(), 72);
    }

    #[test]
    fn algorithm_weight_mismatches_are_rejected() {
        let x = demo_tensor(Shape::new(1, 1, 8, 8), 3, 7, 0.1, 0.0);
        let w = demo_tensor(Shape::new(1, 1, 3, 3), 3, 7, 0.1, 0.0);
        let ts = TransformSet::conv_f2x2_3x3();
        let bank = build_bank(&ts, &w, 1, 2, MaskPolicy::PerKernel).unwrap().bank;
        // Sparse with spatial weights.
        let spec = conv_spec(1, 1, 8, 8, 1, Algorithm::FastSparse);
        assert!(run_layer(&x, Weights::Spatial(&w), &spec, true).is_err());
        // Direct with a bank.
        let spec = conv_spec(1, 1, 8, 8, 1, Algorithm::Direct);
        assert!(run_layer(&x, Weights::Bank(&bank), &spec, true).is_err());
        // Fixed-point input with a real bank.
        let xq = x.quantize(FxpFormat::activations_default()).unwrap().tensor;
        let spec = conv_spec(1, 1, 8, 8, 1, Algorithm::FastSparse);
        assert!(run_layer(&xq, Weights::Bank(&bank), &spec, true).is_err());
    }

    #[test]
    fn deconv_alignment_is_cached_and_stable() {
        let a = deconv_alignment();
        assert_eq!((a.row_offset, a.col_offset, a.input_step), (3, 3, 3));
    }
}
