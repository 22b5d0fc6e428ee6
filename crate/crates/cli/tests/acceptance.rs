//! End-to-end acceptance checks for the workspace: ten criteria covering
//! fast-transform correctness, pruning, whole-layer equivalence, the
//! throughput and traffic models, scheduler safety, and CLI determinism.
//!
//! Runs as a plain binary (`harness = false`) so that every criterion
//! prints exactly one `[PASS]`/`[FAIL]` line, and the process exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvca_core::chain::{
    feature_bytes, layer_weight_bytes, simulate_chain, verify_schedule_safety, BufferConfig,
    ChainSpec, SimConfig,
};
use nvca_core::engine::{Activation, Algorithm, LayerSpec, ScuConfig, Weights};
use nvca_core::netgraph;
use nvca_core::oracle::{self, ConvGeometry};
use nvca_core::pruning::{self, MaskPolicy};
use nvca_core::tensor::{FxpFormat, Shape, Tensor};
use nvca_core::transforms::{OpKind, TransformSet};
use nvca_core::Error;

fn main() {
    let criteria: &[(&str, fn())] = &[
        ("fast conv tiles match direct convolution (10,000 pairs, < 1e-12, < 10 s)", c01_fast_conv),
        ("fast deconv alignment is unique and 10,000 tiles partition the output (< 1e-12)", c02_fast_deconv),
        ("multiplication counts: 16 vs 36 per conv tile, 64 per deconv tile", c03_mult_counts),
        ("importance matrix matches six-index brute force (<= 1e-12) and is symmetric", c04_importance),
        ("rho = 0.5 masks drop exactly half; sparse equals masked dense bit-exactly", c05_pruning_budget),
        ("whole layers at rho = 0 match oracles (real bit-exact, fxp within 1 ULP)", c06_whole_layer),
        ("peak throughput model gives 3686.4 GOPS; 3525 GOPS sits in [0.90, 1.00] of it", c07_throughput),
        ("chained traffic: zero intermediate bytes; bundled decoder reduction in [30%, 50%]", c08_traffic),
        ("scheduler safety over 500 random chains (< 60 s)", c09_scheduler_safety),
        ("CLI runs are byte-identical across seeds-equal runs and --threads values", c10_determinism),
    ];
    let mut failed = 0usize;
    for (i, (desc, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!(
                "[PASS] criterion {:2}: {desc} ({:.1} s)",
                i + 1,
                start.elapsed().as_secs_f64()
            ),
            Err(_) => {
                failed += 1;
                println!("[FAIL] criterion {:2}: {desc}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}

// -------------------------------------------------------------------------
// helpers

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values on the 1/64 grid: every product and sum in the fast pipelines
/// stays exactly representable, so real mode admits bitwise comparison.
fn dyadic(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-128..=128) as f64 / 64.0).collect()
}

fn plane(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_real_vec(Shape::new(1, 1, rows, cols), data).unwrap()
}

fn layer(
    kind: OpKind,
    k: usize,
    s: usize,
    pad: usize,
    cin: usize,
    cout: usize,
    rows: usize,
    cols: usize,
    algorithm: Algorithm,
) -> LayerSpec {
    LayerSpec {
        kind,
        geometry: ConvGeometry::new(k, s, pad).unwrap(),
        cin,
        cout,
        in_rows: rows,
        in_cols: cols,
        algorithm,
        activation: Activation::None,
        out_format: None,
    }
}

/// `p x p` window of a single-plane tensor at (possibly negative) origin,
/// zero-padded outside the bounds.
fn gather(x: &Tensor, r0: isize, c0: isize, p: usize) -> Vec<f64> {
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

// -------------------------------------------------------------------------
// criteria

fn c01_fast_conv() {
    let start = Instant::now();
    let ts = TransformSet::builtin(OpKind::Conv);
    let geom = ConvGeometry::new(3, 1, 0).unwrap();
    let mut r = rng(0xC1);
    let mut max_err = 0.0f64;
    for _ in 0..10_000 {
        let x = plane(4, 4, uniform(&mut r, 16));
        let w = plane(3, 3, uniform(&mut r, 9));
        let direct = oracle::direct_conv(&x, &w, &geom).unwrap();
        let fast = ts
            .fast_tile(x.real_slice().unwrap(), w.real_slice().unwrap())
            .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                max_err = max_err.max((fast[i * 2 + j] - direct.real_value(0, 0, i, j)).abs());
            }
        }
    }
    assert!(max_err < 1e-12, "max error {max_err:e}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
}

fn c02_fast_deconv() {
    let ts = TransformSet::builtin(OpKind::Deconv);
    let al = oracle::find_tile_alignment(&ts, 6, 0xC2).unwrap();
    assert_eq!(
        (al.row_offset, al.col_offset, al.input_step),
        (3, 3, 3),
        "alignment"
    );

    // 10,000 single-tile checks: a 5x5 patch at padding 3 produces exactly
    // the one 6x6 output tile of the direct transposed convolution.
    let geom = ConvGeometry::new(4, 2, 3).unwrap();
    let mut r = rng(0xC2);
    let mut max_err = 0.0f64;
    for _ in 0..10_000 {
        let x = plane(5, 5, uniform(&mut r, 25));
        let w = plane(4, 4, uniform(&mut r, 16));
        let direct = oracle::direct_deconv(&x, &w, &geom).unwrap();
        assert_eq!((direct.shape().rows, direct.shape().cols), (6, 6));
        let fast = ts
            .fast_tile(x.real_slice().unwrap(), w.real_slice().unwrap())
            .unwrap();
        for i in 0..6 {
            for j in 0..6 {
                max_err = max_err.max((fast[i * 6 + j] - direct.real_value(0, 0, i, j)).abs());
            }
        }
    }
    assert!(max_err < 1e-12, "max single-tile error {max_err:e}");

    // Partition: on a multi-tile input, patches advancing 3 input rows per
    // 6 output rows cover every output cell exactly once.
    let x = plane(8, 9, uniform(&mut r, 72));
    let w = plane(4, 4, uniform(&mut r, 16));
    let direct = oracle::direct_deconv(&x, &w, &geom).unwrap();
    let (out_rows, out_cols) = (direct.shape().rows, direct.shape().cols);
    assert_eq!((out_rows, out_cols), (12, 14));
    let mut covered = vec![0u32; out_rows * out_cols];
    let wv = w.real_slice().unwrap().to_vec();
    for tr in 0..out_rows.div_ceil(6) {
        for tc in 0..out_cols.div_ceil(6) {
            let patch = gather(&x, (3 * tr) as isize, (3 * tc) as isize, 5);
            let fast = ts.fast_tile(&patch, &wv).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let (or, oc) = (6 * tr + i, 6 * tc + j);
                    if or >= out_rows || oc >= out_cols {
                        continue;
                    }
                    let err = (fast[i * 6 + j] - direct.real_value(0, 0, or, oc)).abs();
                    assert!(err < 1e-12, "tile ({tr},{tc}) cell ({i},{j}): {err:e}");
                    covered[or * out_cols + oc] += 1;
                }
            }
        }
    }
    assert!(covered.iter().all(|&c| c == 1), "tiles must partition the output");
}

fn c03_mult_counts() {
    let conv = TransformSet::builtin(OpKind::Conv).tile_multiplication_count();
    assert_eq!(conv.fast, 16);
    assert_eq!(conv.direct, 36);
    let deconv = TransformSet::builtin(OpKind::Deconv).tile_multiplication_count();
    assert_eq!(deconv.fast, 64);
}

fn c04_importance() {
    for kind in [OpKind::Conv, OpKind::Deconv] {
        let ts = TransformSet::builtin(kind);
        let brute = oracle::importance_matrix_brute_force(&ts);
        let q = pruning::importance_matrix(&ts);
        let mu = q.mu();
        assert_eq!(brute.len(), mu * mu);
        for i in 0..mu {
            for j in 0..mu {
                let diff = (q.get(i, j) - brute[i * mu + j]).abs();
                assert!(diff <= 1e-12, "{kind:?} Q[{i}][{j}] differs by {diff:e}");
                assert_eq!(q.get(i, j), q.get(j, i), "{kind:?} Q not symmetric");
            }
        }
    }
}

fn c05_pruning_budget() {
    let act = FxpFormat::activations_default();
    let wfmt = FxpFormat::weights_default();
    for (kind, zeros) in [(OpKind::Conv, 8usize), (OpKind::Deconv, 32usize)] {
        let ts = TransformSet::builtin(kind);
        let (k, mu) = (ts.k(), ts.mu());
        let (cout, cin) = (40usize, 25usize); // 1,000 kernels
        let mut r = rng(0xC5 + k as u64);
        let weights = Tensor::from_real_vec(
            Shape::new(cout, cin, k, k),
            uniform(&mut r, cout * cin * k * k),
        )
        .unwrap()
        .quantize(wfmt)
        .unwrap()
        .tensor;
        let pruned = pruning::build_bank(&ts, &weights, 1, 2, MaskPolicy::PerKernel).unwrap();
        assert_eq!(pruned.masks.len(), cout * cin);
        for mask in &pruned.masks {
            assert_eq!(mask.keep().iter().filter(|&&keep| !keep).count(), zeros);
            assert_eq!(mask.population(), mu * mu - zeros);
        }

        // Sparse product equals the masked dense pipeline bit-for-bit on
        // integer codes, for every kernel against one random patch.
        let p = ts.p();
        let patch = plane(p, p, uniform(&mut r, p * p))
            .quantize(act)
            .unwrap()
            .tensor;
        let mut patch_codes = vec![0i64; p * p];
        for i in 0..p {
            for j in 0..p {
                patch_codes[i * p + j] = patch.get_code(0, 0, i, j).unwrap() as i64;
            }
        }
        let y = ts.input_transform_codes(&patch_codes).unwrap();
        let bank = &pruned.bank;
        for oc in 0..cout {
            for ic in 0..cin {
                let mut wcodes = vec![0i64; k * k];
                for i in 0..k {
                    for j in 0..k {
                        wcodes[i * k + j] = weights.get_code(oc, ic, i, j).unwrap() as i64;
                    }
                }
                let (ew, _extra) = ts.weight_transform_codes(&wcodes).unwrap();
                let indices = bank.kernel_indices(oc, ic).unwrap();
                let codes = bank.kernel_value_codes(oc, ic).unwrap();
                assert_eq!(indices.len(), mu * mu - zeros);
                for (&idx, &code) in indices.iter().zip(codes) {
                    assert_eq!(code as i64, ew[idx as usize], "bank code mismatch");
                }
                let sparse = pruning::sparse_tile_codes(indices, codes, &y).unwrap();
                let mut dense = vec![0i64; mu * mu];
                for &idx in indices {
                    dense[idx as usize] = ew[idx as usize] * y[idx as usize];
                }
                assert_eq!(sparse, dense, "sparse vs masked dense product");
                let vs = ts.output_transform_codes(&sparse).unwrap();
                let vd = ts.output_transform_codes(&dense).unwrap();
                assert_eq!(vs, vd);
            }
        }
    }
}

fn c06_whole_layer() {
    let act = FxpFormat::activations_default();
    let wfmt = FxpFormat::weights_default();
    let cases = [
        (OpKind::Conv, 3, 1, 1, 12, 8, 32, 32),
        (OpKind::Deconv, 4, 2, 1, 12, 5, 16, 16),
    ];
    for (kind, k, s, pad, cin, cout, rows, cols) in cases {
        let spec = layer(kind, k, s, pad, cin, cout, rows, cols, Algorithm::FastSparse);
        let ts = spec.transform_set();
        let geom = spec.geometry;
        let mut r = rng(0xC6 + k as u64);
        let x = Tensor::from_real_vec(
            Shape::new(1, cin, rows, cols),
            dyadic(&mut r, cin * rows * cols),
        )
        .unwrap();
        let w = Tensor::from_real_vec(
            Shape::new(cout, cin, k, k),
            dyadic(&mut r, cout * cin * k * k),
        )
        .unwrap();

        // Real mode, rho = 0: the sparse engine path must reproduce the
        // direct oracle exactly on grid-valued data.
        let bank = pruning::build_bank(&ts, &w, 0, 1, MaskPolicy::PerKernel).unwrap();
        let run = nvca_core::engine::run_layer(&x, Weights::Bank(&bank.bank), &spec, true).unwrap();
        let direct = match kind {
            OpKind::Conv => oracle::direct_conv(&x, &w, &geom).unwrap(),
            OpKind::Deconv => oracle::direct_deconv(&x, &w, &geom).unwrap(),
        };
        assert_eq!(run.tensor.shape(), direct.shape());
        let (osh, a, b) = (
            direct.shape(),
            run.tensor.real_slice().unwrap(),
            direct.real_slice().unwrap(),
        );
        for (i, (&va, &vb)) in a.iter().zip(b).enumerate() {
            assert!(
                va == vb,
                "{kind:?} real output differs at flat index {i} of {:?}: {va} vs {vb}",
                osh
            );
        }

        // Fixed-point mode: within one output ULP of the direct
        // fixed-point oracle.
        let xq = x.quantize(act).unwrap().tensor;
        let wq = w.quantize(wfmt).unwrap().tensor;
        let bank_q = pruning::build_bank(&ts, &wq, 0, 1, MaskPolicy::PerKernel).unwrap();
        let run_q =
            nvca_core::engine::run_layer(&xq, Weights::Bank(&bank_q.bank), &spec, true).unwrap();
        let (direct_q, _) = match kind {
            OpKind::Conv => oracle::direct_conv_fxp(&xq, &wq, &geom, act, false).unwrap(),
            OpKind::Deconv => oracle::direct_deconv_fxp(&xq, &wq, &geom, act, false).unwrap(),
        };
        let sh = direct_q.shape();
        let mut max_ulp = 0i64;
        for c in 0..sh.channels {
            for i in 0..sh.rows {
                for j in 0..sh.cols {
                    let d = (run_q.tensor.get_code(0, c, i, j).unwrap() as i64
                        - direct_q.get_code(0, c, i, j).unwrap() as i64)
                        .abs();
                    max_ulp = max_ulp.max(d);
                }
            }
        }
        assert!(max_ulp <= 1, "{kind:?} fxp differs by {max_ulp} ULP");
    }
}

fn c07_throughput() {
    let scu = ScuConfig::default();
    assert!((scu.peak_gops() - 3686.4).abs() < 1e-9, "peak {}", scu.peak_gops());
    let utilization = 3525.0 / scu.peak_gops();
    assert!(
        (0.90..=1.00).contains(&utilization),
        "utilization {utilization}"
    );
}

fn c08_traffic() {
    // Three-layer heterogeneous chain: chained intermediates cost zero
    // off-chip bytes, so the baseline exceeds it by exactly twice their
    // size and the reduction is positive.
    let chain = ChainSpec::new(vec![
        layer(OpKind::Conv, 3, 1, 0, 4, 6, 10, 10, Algorithm::FastSparse),
        layer(OpKind::Conv, 4, 1, 0, 6, 8, 8, 8, Algorithm::Direct),
        layer(OpKind::Deconv, 4, 2, 3, 8, 3, 5, 5, Algorithm::FastSparse),
    ])
    .unwrap();
    let cfg = SimConfig::default();
    let buf = BufferConfig::for_chain(&chain, &cfg);
    let report = simulate_chain(&chain, &buf, &cfg).unwrap();
    let weight_total: u64 = chain.layers().iter().map(|l| layer_weight_bytes(l, &cfg)).sum();
    assert_eq!(
        report.chained_reads,
        feature_bytes(chain.features()[0], &cfg) + weight_total,
        "chained reads beyond F0 and weights"
    );
    assert_eq!(
        report.chained_writes,
        feature_bytes(chain.features()[3], &cfg),
        "chained writes beyond the final feature"
    );
    let intermediates: u64 = (1..=2).map(|i| feature_bytes(chain.features()[i], &cfg)).sum();
    assert_eq!(report.baseline_total() - report.chained_total(), 2 * intermediates);
    assert!(report.reduction_pct > 0.0);

    // Bundled decoder graph: overall reduction in the [30%, 50%] band, and
    // every chain obeys the same accounting identity.
    let g = netgraph::bundled_decoder_graph();
    let cfg = netgraph::bundled_decoder_config();
    let rep = netgraph::simulate_graph(&g, &cfg).unwrap();
    assert!(
        (30.0..=50.0).contains(&rep.reduction_pct),
        "bundled reduction {:.2}%",
        rep.reduction_pct
    );
    let extraction = netgraph::extract_chains(&g).unwrap();
    assert_eq!(extraction.chains.len(), rep.chains.len());
    for (ex, entry) in extraction.chains.iter().zip(&rep.chains) {
        let feats = ex.chain.features();
        let mids: u64 = feats[1..feats.len() - 1]
            .iter()
            .map(|&f| feature_bytes(f, &cfg))
            .sum();
        assert_eq!(
            entry.report.baseline_total() - entry.report.chained_total(),
            2 * mids,
            "chain {:?} accounting identity",
            entry.nodes
        );
    }
}

fn c09_scheduler_safety() {
    let start = Instant::now();
    let mut r = rng(0xC9);
    let (mut clean, mut deadlocks) = (0usize, 0usize);
    for trial in 0..500 {
        let chain = random_chain(&mut r);
        let mut cfg = SimConfig::default();
        cfg.num_banks = r.gen_range(2..=14);
        let buf = BufferConfig::for_chain(&chain, &cfg);
        match simulate_chain(&chain, &buf, &cfg) {
            Ok(report) => {
                verify_schedule_safety(&chain, &report.trace)
                    .unwrap_or_else(|e| panic!("trial {trial}: unsafe schedule: {e}"));
                clean += 1;
            }
            Err(Error::Deadlock { .. }) => deadlocks += 1,
            Err(e) => panic!("trial {trial}: expected success or deadlock, got {e}"),
        }
    }
    assert!(clean > 0, "no chain simulated cleanly");
    assert!(deadlocks > 0, "no starved buffer deadlocked");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

fn random_chain(r: &mut ChaCha8Rng) -> ChainSpec {
    loop {
        let convs = r.gen_range(0..=2);
        let deconv = convs == 0 || r.gen_bool(0.6);
        let mut cin = r.gen_range(1..=4);
        let (mut rows, mut cols) = (r.gen_range(6..=16), r.gen_range(6..=16));
        let mut layers = Vec::new();
        for _ in 0..convs {
            let cout = r.gen_range(1..=4);
            let (pad, alg) = match r.gen_range(0..3) {
                0 => (1, Algorithm::FastSparse),
                1 => (1, Algorithm::Direct),
                _ => (0, Algorithm::Direct),
            };
            layers.push(layer(OpKind::Conv, 3, 1, pad, cin, cout, rows, cols, alg));
            rows = rows + 2 * pad - 2;
            cols = cols + 2 * pad - 2;
            cin = cout;
        }
        if deconv {
            let pad = if r.gen_bool(0.5) { 1 } else { 3 };
            let cout = r.gen_range(1..=3);
            layers.push(layer(
                OpKind::Deconv,
                4,
                2,
                pad,
                cin,
                cout,
                rows,
                cols,
                Algorithm::FastSparse,
            ));
        }
        if let Ok(chain) = ChainSpec::new(layers) {
            return chain;
        }
    }
}

fn c10_determinism() {
    let bin = env!("CARGO_BIN_EXE_nvca");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Shared fixtures.
    let mut r = rng(0xCA);
    Tensor::from_real_vec(Shape::new(6, 4, 3, 3), uniform(&mut r, 6 * 4 * 9))
        .unwrap()
        .save(&root.join("w.nvct"))
        .unwrap();
    Tensor::from_real_vec(Shape::new(1, 4, 12, 12), uniform(&mut r, 4 * 144))
        .unwrap()
        .save(&root.join("x.nvct"))
        .unwrap();
    std::fs::write(
        root.join("layer.spec"),
        "kind = conv3x3s1\nalgorithm = fast-sparse\nrho = 1/2\npolicy = per-kernel\n",
    )
    .unwrap();
    std::fs::write(root.join("net.graph"), netgraph::BUNDLED_DECODER_GRAPH).unwrap();
    std::fs::write(root.join("net.sim"), netgraph::BUNDLED_DECODER_CONFIG).unwrap();

    let run_all = |tag: &str, threads: &str| -> Vec<(String, Vec<u8>)> {
        let out = root.join(tag);
        std::fs::create_dir(&out).unwrap();
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let invocations: Vec<Vec<String>> = vec![
            vec![
                "verify-kernels".into(),
                "--trials".into(), "40".into(),
                "--seed".into(), "123".into(),
                "--report".into(), s(&out.join("verify.json")),
            ],
            vec![
                "prune".into(),
                "--weights".into(), s(&root.join("w.nvct")),
                "--rho".into(), "1/2".into(),
                "--policy".into(), "per-kernel".into(),
                "--out".into(), s(&out.join("bank.nvcs")),
            ],
            vec![
                "run-layer".into(),
                "--spec".into(), s(&root.join("layer.spec")),
                "--input".into(), s(&root.join("x.nvct")),
                "--weights".into(), s(&root.join("w.nvct")),
                "--out".into(), s(&out.join("y.nvct")),
                "--fxp".into(),
            ],
            vec![
                "simulate-chain".into(),
                "--graph".into(), s(&root.join("net.graph")),
                "--config".into(), s(&root.join("net.sim")),
                "--report".into(), s(&out.join("sim.json")),
                "--trace".into(), s(&out.join("sim.csv")),
            ],
            vec![
                "report".into(),
                "--inputs".into(), s(&out.join("sim.json")),
                "--format".into(), "md".into(),
                "--out".into(), s(&out.join("modules.md")),
            ],
        ];
        for args in &invocations {
            let output = Command::new(bin)
                .args(args)
                .args(["--threads", threads])
                .output()
                .unwrap();
            assert!(
                output.status.success(),
                "{} failed:\n{}",
                args[0],
                String::from_utf8_lossy(&output.stderr)
            );
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };

    let first = run_all("a", "1");
    let second = run_all("b", "4");
    assert_eq!(first.len(), second.len());
    for ((name_a, bytes_a), (name_b, bytes_b)) in first.iter().zip(&second) {
        assert_eq!(name_a, name_b);
        assert_eq!(
            bytes_a, bytes_b,
            "{name_a} differs between --threads 1 and --threads 4"
        );
    }
}
