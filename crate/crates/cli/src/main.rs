//! `nvca` — command-line front end for kernel verification, transform-domain
//! pruning, layer execution, and chain/graph simulation.
//!
//! Conventions shared by every subcommand:
//!
//! * machine-readable output goes to files named by flags; the standard
//!   error stream carries human diagnostics only;
//! * the exit code is 0 iff every invoked check passed — reports are still
//!   written on failure so the evidence survives;
//! * runs are reproducible: the same inputs, `--seed`, and flags produce
//!   byte-identical output files, for any `--threads` value.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use nvca_core::chain;
use nvca_core::engine::{self, Activation, Algorithm, LayerSpec, Weights};
use nvca_core::netgraph::{self, GraphReport};
use nvca_core::oracle::{self, ConvGeometry};
use nvca_core::pruning::{self, MaskPolicy, SparseKernelBank};
use nvca_core::tensor::{FxpFormat, Shape, Tensor};
use nvca_core::transforms::{load_transform_override, OpKind, TransformSet};

#[derive(Parser)]
#[command(
    name = "nvca",
    version,
    about = "Sparse fast convolution/deconvolution verifier and accelerator simulator"
)]
struct Cli {
    /// RNG seed for randomized verification suites.
    #[arg(long, global = true, default_value_t = 0x5EED)]
    seed: u64,

    /// Worker threads for layer execution (default: all cores). Results are
    /// identical for every value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify the fast transform pipelines against direct oracles.
    VerifyKernels(VerifyArgs),
    /// Prune spatial weights into a sparse transform-domain bank.
    Prune(PruneArgs),
    /// Execute one convolution or deconvolution layer.
    RunLayer(RunLayerArgs),
    /// Simulate a layer graph in chained and layer-by-layer modes.
    SimulateChain(SimulateArgs),
    /// Merge simulation reports into a per-module traffic table.
    Report(ReportArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Random input/kernel pairs per suite (each pair checks every tile).
    #[arg(long, default_value_t = 1000)]
    trials: usize,

    /// Verify a transform-matrix override file instead of the builtins.
    #[arg(long)]
    matrices: Option<PathBuf>,

    /// Write a JSON verification report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    /// Spatial weight tensor, shaped (cout, cin, k, k), in NVCT format.
    #[arg(long)]
    weights: PathBuf,

    /// Target sparsity: a fraction like 1/2 or a decimal multiple of 1/64.
    #[arg(long)]
    rho: String,

    /// Mask policy: per-kernel or shared.
    #[arg(long, default_value = "per-kernel")]
    policy: String,

    /// Output sparse bank (NVCS format).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunLayerArgs {
    /// Layer description file (key = value lines; see the README).
    #[arg(long)]
    spec: PathBuf,

    /// Input feature tensor (NVCT).
    #[arg(long)]
    input: PathBuf,

    /// Spatial weight tensor (NVCT), shaped (cout, cin, k, k).
    #[arg(long, conflicts_with = "bank")]
    weights: Option<PathBuf>,

    /// Pre-pruned sparse bank (NVCS) instead of spatial weights.
    #[arg(long)]
    bank: Option<PathBuf>,

    /// Output tensor path (NVCT).
    #[arg(long)]
    out: PathBuf,

    /// Quantize real inputs/weights to the default fixed-point formats and
    /// run the bit-accurate integer path.
    #[arg(long)]
    fxp: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Layer graph file.
    #[arg(long)]
    graph: PathBuf,

    /// Simulator configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,

    /// JSON report output path.
    #[arg(long)]
    report: PathBuf,

    /// Optional bank-occupancy trace CSV output path.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
    Md,
}

#[derive(Args)]
struct ReportArgs {
    /// Input report JSON files produced by simulate-chain.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,

    /// Output format.
    #[arg(long, value_enum, default_value_t = ReportFormat::Md)]
    format: ReportFormat,

    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("nvca: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.cmd {
        Cmd::VerifyKernels(a) => cmd_verify_kernels(a, cli.seed),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::RunLayer(a) => cmd_run_layer(a),
        Cmd::SimulateChain(a) => cmd_simulate_chain(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("nvca: {e:#}");
            ExitCode::from(1)
        }
    }
}

// --------------------------------------------------------------------------
// verify-kernels

/// Largest |fast − direct| accepted from the real-arithmetic pipelines.
const REAL_TOLERANCE: f64 = 1e-12;

struct SuiteOutcome {
    label: String,
    json: serde_json::Value,
    pass: bool,
}

fn cmd_verify_kernels(a: &VerifyArgs, seed: u64) -> Result<bool> {
    let sets: Vec<TransformSet> = match &a.matrices {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            vec![load_transform_override(&text)?]
        }
        None => vec![
            TransformSet::builtin(OpKind::Conv),
            TransformSet::builtin(OpKind::Deconv),
        ],
    };
    let builtin = a.matrices.is_none();

    let mut suites = Vec::new();
    let mut all_pass = true;
    for (i, ts) in sets.iter().enumerate() {
        let suite = match verify_suite(ts, a.trials, seed.wrapping_add(i as u64), builtin) {
            Ok(s) => s,
            Err(e) => SuiteOutcome {
                label: ts.kind().as_str().to_string(),
                json: serde_json::json!({
                    "kind": ts.kind().as_str(),
                    "error": e.to_string(),
                    "pass": false,
                }),
                pass: false,
            },
        };
        eprintln!("{}", suite.label);
        all_pass &= suite.pass;
        suites.push(suite.json);
    }

    if let Some(path) = &a.report {
        let doc = serde_json::json!({ "suites": suites, "pass": all_pass });
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("verify-kernels: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(all_pass)
}

/// Verifies one transform set: every tile of the fast real pipeline against
/// the direct oracle, the fixed-point pipeline bit-for-bit against the
/// direct fixed-point oracle, and (for builtins) the multiplication counts.
fn verify_suite(
    ts: &TransformSet,
    trials: usize,
    seed: u64,
    builtin: bool,
) -> Result<SuiteOutcome> {
    let kind = ts.kind();
    let (m, k, s, p) = (ts.m(), ts.k(), ts.s(), ts.p());

    // Geometry under test: zero padding for convolution; for deconvolution
    // the smallest padding that puts tile origins on input samples, which
    // the empirical alignment search certifies.
    let (geom, alignment) = match kind {
        OpKind::Conv => (ConvGeometry::new(k, s, 0)?, None),
        OpKind::Deconv => {
            let al = oracle::find_tile_alignment(ts, 6, seed)?;
            if (al.col_offset - al.row_offset) % s as isize != 0 {
                bail!(
                    "tile alignment offsets ({}, {}) differ mod stride; \
                     a single symmetric padding cannot align both axes",
                    al.row_offset,
                    al.col_offset
                );
            }
            (ConvGeometry::new(k, s, al.row_offset as usize)?, Some(al))
        }
    };
    let (in_rows, in_cols) = match kind {
        OpKind::Conv => (10, 10),
        // Odd sizes so the last tile row/column is cropped.
        OpKind::Deconv => (7, 9),
    };
    let (out_rows, out_cols) = match kind {
        OpKind::Conv => geom.conv_output_dims(in_rows, in_cols)?,
        OpKind::Deconv => geom.deconv_output_dims(in_rows, in_cols)?,
    };
    let tile_rows = out_rows.div_ceil(m);
    let tile_cols = out_cols.div_ceil(m);
    let origin = |t: usize, offset: isize| -> isize {
        match kind {
            OpKind::Conv => (s * m * t) as isize - geom.pad as isize,
            OpKind::Deconv => ((m * t) as isize + geom.pad as isize - offset)
                .div_euclid(s as isize),
        }
    };

    let act = FxpFormat::activations_default();
    let wfmt = FxpFormat::weights_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut tiles_checked = 0u64;
    let mut fxp_mismatches = 0u64;

    for _ in 0..trials {
        let x = random_tensor(&mut rng, in_rows, in_cols);
        let w = random_tensor(&mut rng, k, k);

        // Real pipeline vs the direct real oracle.
        let direct = match kind {
            OpKind::Conv => oracle::direct_conv(&x, &w, &geom)?,
            OpKind::Deconv => oracle::direct_deconv(&x, &w, &geom)?,
        };
        let wv: Vec<f64> = w.real_slice()?.to_vec();

        // Fixed-point pipeline vs the direct fixed-point oracle.
        let xq = x.quantize(act)?.tensor;
        let wq = w.quantize(wfmt)?.tensor;
        let direct_q = match kind {
            OpKind::Conv => oracle::direct_conv_fxp(&xq, &wq, &geom, act, false)?.0,
            OpKind::Deconv => oracle::direct_deconv_fxp(&xq, &wq, &geom, act, false)?.0,
        };
        let mut wq_codes = vec![0i64; k * k];
        for r in 0..k {
            for c in 0..k {
                wq_codes[r * k + c] = wq.get_code(0, 0, r, c)? as i64;
            }
        }
        let (ew, extra) = ts.weight_transform_codes(&wq_codes)?;
        let acc_frac =
            act.fraction_bits() as u32 + wfmt.fraction_bits() as u32 + extra as u32;

        for tr in 0..tile_rows {
            for tc in 0..tile_cols {
                let (r0, c0) = match alignment {
                    None => (origin(tr, 0), origin(tc, 0)),
                    Some(al) => (origin(tr, al.row_offset), origin(tc, al.col_offset)),
                };
                let patch = gather_real(&x, r0, c0, p);
                let v = ts.fast_tile(&patch, &wv)?;
                for i in 0..m {
                    for j in 0..m {
                        let (or, oc) = (m * tr + i, m * tc + j);
                        if or >= out_rows || oc >= out_cols {
                            continue;
                        }
                        let err = (v[i * m + j] - direct.real_value(0, 0, or, oc)).abs();
                        max_err = max_err.max(err);
                    }
                }

                let patch_q = gather_codes(&xq, r0, c0, p);
                let y = ts.input_transform_codes(&patch_q)?;
                let u: Vec<i64> = y.iter().zip(&ew).map(|(a, b)| a * b).collect();
                let vq = ts.output_transform_codes(&u)?;
                for i in 0..m {
                    for j in 0..m {
                        let (or, oc) = (m * tr + i, m * tc + j);
                        if or >= out_rows || oc >= out_cols {
                            continue;
                        }
                        let (code, _) = act.requantize_from(vq[i * m + j], acc_frac);
                        if code != direct_q.get_code(0, 0, or, oc)? as i64 {
                            fxp_mismatches += 1;
                        }
                    }
                }
                tiles_checked += 1;
            }
        }
    }

    let mults = ts.tile_multiplication_count();
    let counts_ok = if builtin {
        match kind {
            OpKind::Conv => mults.fast == 16 && mults.direct == 36,
            OpKind::Deconv => mults.fast == 64,
        }
    } else {
        true
    };

    let pass = max_err < REAL_TOLERANCE && fxp_mismatches == 0 && counts_ok;
    let mut label = format!(
        "{}: max |fast - direct| = {max_err:.3e} over {tiles_checked} tiles; \
         fxp mismatches {fxp_mismatches}; {} multiplications/tile (direct {})",
        kind.as_str(),
        mults.fast,
        mults.direct,
    );
    if let Some(al) = alignment {
        let _ = write!(
            label,
            "; alignment offset ({}, {}) step {}",
            al.row_offset, al.col_offset, al.input_step
        );
    }
    let json = serde_json::json!({
        "kind": kind.as_str(),
        "trials": trials,
        "tiles": tiles_checked,
        "max_abs_error": max_err,
        "fxp_mismatches": fxp_mismatches,
        "multiplications_fast": mults.fast,
        "multiplications_direct": mults.direct,
        "alignment": alignment.map(|al| serde_json::json!({
            "row_offset": al.row_offset,
            "col_offset": al.col_offset,
            "input_step": al.input_step,
        })),
        "pass": pass,
    });
    Ok(SuiteOutcome { label, json, pass })
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_real_vec(Shape::new(1, 1, rows, cols), data)
        .expect("shape matches generated data")
}

/// A `p×p` window of a single-channel tensor starting at (possibly
/// negative) `(r0, c0)`, zero-padded outside the bounds.
fn gather_real(x: &Tensor, r0: isize, c0: isize, p: usize) -> Vec<f64> {
    let sh = x.shape();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let (r, c) = (r0 + i as isize, c0 + j as isize);
            if r >= 0 && c >= 0 && (r as usize) < sh.rows && (c as usize) < sh.cols {
                out[i * p + j] = x.real_value(0, 0, r as usize, c as usize);
            }
        }
    }
    out
}

fn gather_codes(x: &Tensor, r0: isize, c0: isize, p: usize) -> Vec<i64> {
    let sh = x.shape();
    let mut out = vec![0i64; p * p];
    for i in 0..p {
        for j in 0..p {
            let (r, c) = (r0 + i as isize, c0 + j as isize);
            if r >= 0 && c >= 0 && (r as usize) < sh.rows && (c as usize) < sh.cols {
                out[i * p + j] = x
                    .get_code(0, 0, r as usize, c as usize)
                    .expect("tensor is fixed-point")
                    as i64;
            }
        }
    }
    out
}

// --------------------------------------------------------------------------
// prune

fn cmd_prune(a: &PruneArgs) -> Result<bool> {
    let mut weights =
        Tensor::load(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let sh = weights.shape();
    if sh.rows != sh.cols {
        bail!("weights are {}x{}, expected square kernels", sh.rows, sh.cols);
    }
    let kind = match sh.rows {
        3 => OpKind::Conv,
        4 => OpKind::Deconv,
        k => bail!("no fast transform for {k}x{k} kernels (expected 3x3 or 4x4)"),
    };
    // The sparse bank file stores fixed-point values; quantize real weights
    // to the default weight format first.
    if weights.is_real() {
        let q = weights.quantize(FxpFormat::weights_default())?;
        if q.saturated > 0 {
            eprintln!("quantized weights: {} values saturated", q.saturated);
        }
        weights = q.tensor;
    }
    let (rho_num, rho_den) = chain::parse_rho(&a.rho)?;
    let policy = MaskPolicy::parse(&a.policy)?;
    let ts = TransformSet::builtin(kind);
    let pruned = pruning::build_bank(&ts, &weights, rho_num, rho_den, policy)?;
    pruned
        .bank
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;

    // Realized threshold and the per-kernel population histogram.
    let zetas: Vec<f64> = pruned.masks.iter().map(|mask| mask.zeta()).collect();
    match zetas.as_slice() {
        [z] => eprintln!("realized zeta = {z:.6e}"),
        zs => {
            let (lo, hi) = zs
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| {
                    (lo.min(z), hi.max(z))
                });
            eprintln!("realized zeta in [{lo:.6e}, {hi:.6e}] across {} kernels", zs.len());
        }
    }
    let bank = &pruned.bank;
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for oc in 0..bank.cout() {
        for ic in 0..bank.cin() {
            *hist.entry(bank.kernel_indices(oc, ic)?.len()).or_insert(0) += 1;
        }
    }
    eprintln!(
        "pruned {}x{} {} kernels at rho {}/{} ({} policy):",
        bank.cout(),
        bank.cin(),
        kind.as_str(),
        rho_num,
        rho_den,
        policy.as_str()
    );
    for (nnz, count) in &hist {
        eprintln!("  nnz {nnz:>3}: {count} kernels");
    }
    Ok(true)
}

// --------------------------------------------------------------------------
// run-layer

/// Parsed layer description file.
struct LayerFile {
    kind: OpKind,
    kernel: usize,
    stride: usize,
    pad: usize,
    algorithm: Algorithm,
    activation: Activation,
    cin: Option<usize>,
    cout: Option<usize>,
    h: Option<usize>,
    w: Option<usize>,
    out_format: Option<FxpFormat>,
    rho: (u16, u16),
    policy: MaskPolicy,
}

fn parse_layer_file(text: &str) -> Result<LayerFile> {
    let mut kind_s: Option<String> = None;
    let mut nums: BTreeMap<&str, usize> = BTreeMap::new();
    let mut algorithm = None;
    let mut activation = None;
    let mut rho = None;
    let mut policy = None;
    let mut out_bits: (Option<u8>, Option<u8>) = (None, None);

    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let numeric = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| anyhow!("line {}: {key} = '{v}' is not a whole number", i + 1))
        };
        match key {
            "kind" => kind_s = Some(value.to_string()),
            "k" | "s" | "pad" | "cin" | "cout" | "h" | "w" => {
                let stable = ["k", "s", "pad", "cin", "cout", "h", "w"]
                    .iter()
                    .find(|&&n| n == key)
                    .expect("key just matched");
                nums.insert(stable, numeric(value)?);
            }
            "algorithm" => algorithm = Some(Algorithm::parse(value)?),
            "activation" => activation = Some(Activation::parse(value)?),
            "rho" => rho = Some(chain::parse_rho(value)?),
            "policy" => policy = Some(MaskPolicy::parse(value)?),
            "out_total_bits" => out_bits.0 = Some(numeric(value)? as u8),
            "out_fraction_bits" => out_bits.1 = Some(numeric(value)? as u8),
            other => bail!("line {}: unknown key '{other}'", i + 1),
        }
    }

    let kind_s = kind_s.ok_or_else(|| anyhow!("layer file must set 'kind'"))?;
    let (kind, kernel, stride, default_pad, default_alg) = match kind_s.as_str() {
        "conv3x3s1" | "deconv4x4s2" => {
            if nums.contains_key("k") || nums.contains_key("s") {
                bail!("kind '{kind_s}' fixes k and s; drop those keys");
            }
            if kind_s == "conv3x3s1" {
                (OpKind::Conv, 3, 1, 1, Algorithm::FastSparse)
            } else {
                (OpKind::Deconv, 4, 2, 1, Algorithm::FastSparse)
            }
        }
        "conv" | "deconv" => {
            let k = *nums.get("k").ok_or_else(|| anyhow!("kind '{kind_s}' needs k"))?;
            let s = *nums.get("s").ok_or_else(|| anyhow!("kind '{kind_s}' needs s"))?;
            let op = if kind_s == "conv" { OpKind::Conv } else { OpKind::Deconv };
            (op, k, s, 0, Algorithm::Direct)
        }
        other => bail!("unknown kind '{other}'"),
    };
    let out_format = match out_bits {
        (None, None) => None,
        (Some(t), Some(f)) => Some(FxpFormat::new(t, f, true)?),
        _ => bail!("out_total_bits and out_fraction_bits must be given together"),
    };
    Ok(LayerFile {
        kind,
        kernel,
        stride,
        pad: nums.get("pad").copied().unwrap_or(default_pad),
        algorithm: algorithm.unwrap_or(default_alg),
        activation: activation.unwrap_or(Activation::None),
        cin: nums.get("cin").copied(),
        cout: nums.get("cout").copied(),
        h: nums.get("h").copied(),
        w: nums.get("w").copied(),
        out_format,
        rho: rho.unwrap_or((1, 2)),
        policy: policy.unwrap_or(MaskPolicy::PerKernel),
    })
}

enum WeightSource {
    Spatial(Tensor),
    Bank(SparseKernelBank),
}

fn cmd_run_layer(a: &RunLayerArgs) -> Result<bool> {
    let file = parse_layer_file(
        &fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?,
    )?;
    let mut input =
        Tensor::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut source = match (&a.weights, &a.bank) {
        (Some(p), None) => WeightSource::Spatial(
            Tensor::load(p).with_context(|| format!("reading {}", p.display()))?,
        ),
        (None, Some(p)) => WeightSource::Bank(
            SparseKernelBank::load(p).with_context(|| format!("reading {}", p.display()))?,
        ),
        _ => bail!("exactly one of --weights and --bank is required"),
    };

    if a.fxp {
        if input.is_real() {
            let q = input.quantize(FxpFormat::activations_default())?;
            if q.saturated > 0 {
                eprintln!("quantized input: {} values saturated", q.saturated);
            }
            input = q.tensor;
        }
        if let WeightSource::Spatial(w) = &mut source {
            if w.is_real() {
                let q = w.quantize(FxpFormat::weights_default())?;
                if q.saturated > 0 {
                    eprintln!("quantized weights: {} values saturated", q.saturated);
                }
                *w = q.tensor;
            }
        }
    }

    let ish = input.shape();
    let cout = match &source {
        WeightSource::Spatial(w) => {
            let wsh = w.shape();
            if wsh.channels != ish.channels || wsh.rows != file.kernel || wsh.cols != file.kernel {
                bail!(
                    "weights are ({}, {}, {}, {}), layer expects (cout, {}, {}, {})",
                    wsh.batch,
                    wsh.channels,
                    wsh.rows,
                    wsh.cols,
                    ish.channels,
                    file.kernel,
                    file.kernel
                );
            }
            wsh.batch
        }
        WeightSource::Bank(b) => {
            if b.cin() != ish.channels {
                bail!("bank has cin {}, input has {} channels", b.cin(), ish.channels);
            }
            b.cout()
        }
    };
    for (name, declared, actual) in [
        ("cin", file.cin, ish.channels),
        ("cout", file.cout, cout),
        ("h", file.h, ish.rows),
        ("w", file.w, ish.cols),
    ] {
        if let Some(d) = declared {
            if d != actual {
                bail!("layer file declares {name} = {d}, tensors give {actual}");
            }
        }
    }

    let spec = LayerSpec {
        kind: file.kind,
        geometry: ConvGeometry::new(file.kernel, file.stride, file.pad)?,
        cin: ish.channels,
        cout,
        in_rows: ish.rows,
        in_cols: ish.cols,
        algorithm: file.algorithm,
        activation: file.activation,
        out_format: file.out_format,
    };

    // The sparse algorithm consumes a pruned bank; build one on the fly
    // when spatial weights were supplied.
    let built;
    let weights_ref = match &source {
        WeightSource::Spatial(w) if spec.algorithm == Algorithm::FastSparse => {
            let (rn, rd) = file.rho;
            built = pruning::build_bank(&spec.transform_set(), w, rn, rd, file.policy)?;
            eprintln!(
                "built sparse bank: rho {rn}/{rd}, {} policy, {} values/kernel",
                file.policy.as_str(),
                built.bank.kernel_indices(0, 0)?.len()
            );
            Weights::Bank(&built.bank)
        }
        WeightSource::Spatial(w) => Weights::Spatial(w),
        WeightSource::Bank(b) => Weights::Bank(b),
    };

    let out = engine::run_layer(&input, weights_ref, &spec, true)?;
    let mut bytes = Vec::new();
    out.tensor.write_nvct(&mut bytes)?;
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;

    let osh = out.tensor.shape();
    eprintln!(
        "output: ({}, {}, {}, {}) {}; {} outputs saturated",
        osh.batch,
        osh.channels,
        osh.rows,
        osh.cols,
        if out.tensor.is_fxp() { "fixed-point" } else { "real" },
        out.saturated
    );
    eprintln!("sha256 {}", hex_digest(&bytes));
    Ok(true)
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// --------------------------------------------------------------------------
// simulate-chain

fn cmd_simulate_chain(a: &SimulateArgs) -> Result<bool> {
    let graph = netgraph::load_netgraph(&a.graph)
        .with_context(|| format!("loading {}", a.graph.display()))?;
    let cfg = chain::parse_sim_config(
        &fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?,
    )?;
    match netgraph::simulate_graph(&graph, &cfg) {
        Ok(report) => {
            fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", a.report.display()))?;
            if let Some(path) = &a.trace {
                fs::write(path, netgraph::graph_trace_csv(&report))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!(
                "off-chip traffic: {} bytes chained vs {} bytes baseline (reduction {:.2}%)",
                report.chained_bytes, report.baseline_bytes, report.reduction_pct
            );
            eprintln!(
                "frame estimate: {} cycles = {:.2} ms = {:.1} FPS",
                report.latency.cycles,
                report.latency.seconds * 1e3,
                report.latency.frames_per_second
            );
            Ok(true)
        }
        Err(e) => {
            // The report file still carries the failure for debugging.
            let doc = serde_json::json!({ "error": e.to_string() });
            fs::write(&a.report, serde_json::to_string_pretty(&doc)? + "\n")
                .with_context(|| format!("writing {}", a.report.display()))?;
            Err(e).context("simulation failed (error written to the report file)")
        }
    }
}

// --------------------------------------------------------------------------
// report

#[derive(Default, Clone, Copy)]
struct Totals {
    chained: u64,
    baseline: u64,
    cycles: u64,
}

impl Totals {
    fn add(&mut self, chained: u64, baseline: u64, cycles: u64) {
        self.chained += chained;
        self.baseline += baseline;
        self.cycles += cycles;
    }

    fn reduction_pct(&self) -> f64 {
        if self.baseline == 0 {
            0.0
        } else {
            100.0 * (1.0 - self.chained as f64 / self.baseline as f64)
        }
    }
}

fn cmd_report(a: &ReportArgs) -> Result<bool> {
    let mut modules: BTreeMap<String, Totals> = BTreeMap::new();
    let mut total = Totals::default();
    for path in &a.inputs {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: GraphReport = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a simulate-chain report", path.display()))?;
        for row in &report.modules {
            modules.entry(row.module.clone()).or_default().add(
                row.chained_bytes,
                row.baseline_bytes,
                row.cycles,
            );
            total.add(row.chained_bytes, row.baseline_bytes, row.cycles);
        }
    }

    let rendered = match a.format {
        ReportFormat::Json => {
            let rows: Vec<serde_json::Value> = modules
                .iter()
                .map(|(name, t)| {
                    serde_json::json!({
                        "module": name,
                        "chained_bytes": t.chained,
                        "baseline_bytes": t.baseline,
                        "reduction_pct": t.reduction_pct(),
                        "cycles": t.cycles,
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "modules": rows,
                "totals": {
                    "chained_bytes": total.chained,
                    "baseline_bytes": total.baseline,
                    "reduction_pct": total.reduction_pct(),
                    "cycles": total.cycles,
                },
            });
            serde_json::to_string_pretty(&doc)? + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::from("module,chained_bytes,baseline_bytes,reduction_pct,cycles\n");
            for (name, t) in &modules {
                let _ = writeln!(
                    out,
                    "{name},{},{},{:.4},{}",
                    t.chained,
                    t.baseline,
                    t.reduction_pct(),
                    t.cycles
                );
            }
            let _ = writeln!(
                out,
                "total,{},{},{:.4},{}",
                total.chained,
                total.baseline,
                total.reduction_pct(),
                total.cycles
            );
            out
        }
        ReportFormat::Md => {
            let mut out = String::from(
                "| Module | Chained bytes | Baseline bytes | Reduction | Cycles |\n\
                 |---|---:|---:|---:|---:|\n",
            );
            for (name, t) in &modules {
                let _ = writeln!(
                    out,
                    "| {name} | {} | {} | {:.2}% | {} |",
                    t.chained,
                    t.baseline,
                    t.reduction_pct(),
                    t.cycles
                );
            }
            let _ = writeln!(
                out,
                "| **total** | {} | {} | {:.2}% | {} |",
                total.chained,
                total.baseline,
                total.reduction_pct(),
                total.cycles
            );
            out
        }
    };
    fs::write(&a.out, rendered).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "merged {} report(s): {} module rows, overall reduction {:.2}%",
        a.inputs.len(),
        modules.len(),
        total.reduction_pct()
    );
    Ok(true)
}
