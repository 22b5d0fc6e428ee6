//! Independent reference implementations ("oracles").
//!
//! Everything here is written for obviousness, not speed: direct nested-loop
//! convolution and transposed convolution (in real and fixed-point
//! arithmetic), an im2col re-implementation of the same semantics, the
//! zero-stuffing identity for transposed convolution, the empirical
//! tile-alignment search, dense multiplication counts, and the brute-force
//! six-index importance matrix. Fast paths elsewhere in the crate are
//! validated against these and never share code with them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FxpFormat, Shape, Tensor};
use crate::transforms::{OpKind, TransformSet};

/// Spatial geometry of a convolution or transposed convolution:
/// square `kernel`, `stride`, symmetric zero `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Invalid(format!(
                "kernel ({kernel}) and stride ({stride}) must be positive"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            pad,
        })
    }

    /// Output dims of a convolution over an `(rows, cols)` input:
    /// `floor((n + 2·pad - kernel)/stride) + 1` per axis.
    pub fn conv_output_dims(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let dim = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "input extent {n} with pad {} is smaller than kernel {}",
                    self.pad, self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((dim(rows)?, dim(cols)?))
    }

    /// Output dims of a transposed convolution over an `(rows, cols)` input:
    /// `(n-1)·stride + kernel - 2·pad` per axis.
    pub fn deconv_output_dims(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let dim = |n: usize| -> Result<usize> {
            if n == 0 {
                return Err(Error::Shape("empty input".into()));
            }
            let full = (n - 1) * self.stride + self.kernel;
            if full <= 2 * self.pad {
                return Err(Error::Shape(format!(
                    "pad {} swallows the whole {full}-wide transposed output",
                    self.pad
                )));
            }
            Ok(full - 2 * self.pad)
        };
        Ok((dim(rows)?, dim(cols)?))
    }
}

fn check_real(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_real() {
        return Err(Error::Numeric(format!("{what} must be a real tensor")));
    }
    Ok(())
}

fn check_channels(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<(usize, usize)> {
    let ws = w.shape();
    if ws.rows != g.kernel || ws.cols != g.kernel {
        return Err(Error::Shape(format!(
            "weight tensor is {}x{}, geometry says kernel {}",
            ws.rows, ws.cols, g.kernel
        )));
    }
    if ws.channels != x.shape().channels {
        return Err(Error::Shape(format!(
            "weights expect {} input channels, input has {}",
            ws.channels,
            x.shape().channels
        )));
    }
    Ok((ws.channels, ws.batch))
}

/// Direct convolution (CNN correlation semantics, zero padding).
///
/// `x: (batch, cin, rows, cols)`, `w: (cout, cin, k, k)`. Accumulation runs
/// input-channel-major, then kernel row, then kernel column.
pub fn direct_conv(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    check_real(x, "input")?;
    check_real(w, "weights")?;
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    let (or, oc) = g.conv_output_dims(xs.rows, xs.cols)?;
    let mut out = Tensor::zeros_real(Shape::new(xs.batch, cout, or, oc));
    for b in 0..xs.batch {
        for o in 0..cout {
            for i in 0..or {
                for j in 0..oc {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for a in 0..g.kernel {
                            for d in 0..g.kernel {
                                let ri = (i * g.stride + a) as isize - g.pad as isize;
                                let ci = (j * g.stride + d) as isize - g.pad as isize;
                                if ri >= 0
                                    && ci >= 0
                                    && (ri as usize) < xs.rows
                                    && (ci as usize) < xs.cols
                                {
                                    acc += x.real_value(b, c, ri as usize, ci as usize)
                                        * w.real_value(o, c, a, d);
                                }
                            }
                        }
                    }
                    out.set_real(b, o, i, j, acc)?;
                }
            }
        }
    }
    Ok(out)
}

/// Convolution via explicit im2col + matrix multiply — a second,
/// differently-shaped implementation of the same semantics.
pub fn direct_conv_im2col(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    check_real(x, "input")?;
    check_real(w, "weights")?;
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    let (or, oc) = g.conv_output_dims(xs.rows, xs.cols)?;
    let k2 = g.kernel * g.kernel;
    let cols = or * oc;
    let rows = cin * k2;
    let mut out = Tensor::zeros_real(Shape::new(xs.batch, cout, or, oc));
    for b in 0..xs.batch {
        // Column matrix: one column per output position, one row per
        // (channel, kernel offset) pair.
        let mut col = vec![0.0; rows * cols];
        for c in 0..cin {
            for a in 0..g.kernel {
                for d in 0..g.kernel {
                    let row = (c * g.kernel + a) * g.kernel + d;
                    for i in 0..or {
                        for j in 0..oc {
                            let ri = (i * g.stride + a) as isize - g.pad as isize;
                            let ci = (j * g.stride + d) as isize - g.pad as isize;
                            let v = if ri >= 0
                                && ci >= 0
                                && (ri as usize) < xs.rows
                                && (ci as usize) < xs.cols
                            {
                                x.real_value(b, c, ri as usize, ci as usize)
                            } else {
                                0.0
                            };
                            col[row * cols + (i * oc + j)] = v;
                        }
                    }
                }
            }
        }
        // Weight matrix (cout × rows) times column matrix (rows × cols).
        for o in 0..cout {
            for pos in 0..cols {
                let mut acc = 0.0;
                for c in 0..cin {
                    for a in 0..g.kernel {
                        for d in 0..g.kernel {
                            let row = (c * g.kernel + a) * g.kernel + d;
                            acc += w.real_value(o, c, a, d) * col[row * cols + pos];
                        }
                    }
                }
                out.set_real(b, o, pos / oc, pos % oc, acc)?;
            }
        }
    }
    Ok(out)
}

/// Direct transposed convolution (scatter form, zero padding).
///
/// Each input element `x[i][j]` scatters `x·w[a][d]` to output position
/// `(i·stride + a - pad, j·stride + d - pad)`; positions outside the output
/// are dropped.
pub fn direct_deconv(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    check_real(x, "input")?;
    check_real(w, "weights")?;
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    let (or, oc) = g.deconv_output_dims(xs.rows, xs.cols)?;
    let mut out = Tensor::zeros_real(Shape::new(xs.batch, cout, or, oc));
    for b in 0..xs.batch {
        for o in 0..cout {
            for c in 0..cin {
                for i in 0..xs.rows {
                    for j in 0..xs.cols {
                        let xv = x.real_value(b, c, i, j);
                        if xv == 0.0 {
                            continue;
                        }
                        for a in 0..g.kernel {
                            for d in 0..g.kernel {
                                let ri = (i * g.stride + a) as isize - g.pad as isize;
                                let ci = (j * g.stride + d) as isize - g.pad as isize;
                                if ri >= 0
                                    && ci >= 0
                                    && (ri as usize) < or
                                    && (ci as usize) < oc
                                {
                                    let cur = out.get_real(b, o, ri as usize, ci as usize)?;
                                    out.set_real(
                                        b,
                                        o,
                                        ri as usize,
                                        ci as usize,
                                        cur + xv * w.real_value(o, c, a, d),
                                    )?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transposed convolution via the zero-stuffing identity: insert
/// `stride-1` zeros between input samples, then run a stride-1 convolution
/// with the spatially flipped kernel and pad `kernel - 1 - pad`.
pub fn direct_deconv_zero_stuffing(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    check_real(x, "input")?;
    check_real(w, "weights")?;
    if g.pad > g.kernel - 1 {
        return Err(Error::Invalid(format!(
            "zero-stuffing identity needs pad <= kernel-1, got pad {} kernel {}",
            g.pad, g.kernel
        )));
    }
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    // Zero-stuffed input.
    let zr = (xs.rows - 1) * g.stride + 1;
    let zc = (xs.cols - 1) * g.stride + 1;
    let mut stuffed = Tensor::zeros_real(Shape::new(xs.batch, cin, zr, zc));
    for b in 0..xs.batch {
        for c in 0..cin {
            for i in 0..xs.rows {
                for j in 0..xs.cols {
                    stuffed.set_real(b, c, i * g.stride, j * g.stride, x.real_value(b, c, i, j))?;
                }
            }
        }
    }
    // Flipped kernel.
    let mut flipped = Tensor::zeros_real(w.shape());
    for o in 0..cout {
        for c in 0..cin {
            for a in 0..g.kernel {
                for d in 0..g.kernel {
                    flipped.set_real(
                        o,
                        c,
                        g.kernel - 1 - a,
                        g.kernel - 1 - d,
                        w.real_value(o, c, a, d),
                    )?;
                }
            }
        }
    }
    let conv_g = ConvGeometry::new(g.kernel, 1, g.kernel - 1 - g.pad)?;
    direct_conv(&stuffed, &flipped, &conv_g)
}

fn check_fxp(t: &Tensor, what: &str) -> Result<FxpFormat> {
    t.fxp_format()
        .ok_or_else(|| Error::Numeric(format!("{what} must be a fixed-point tensor")))
}

/// Bit-accurate direct convolution on fixed-point codes: exact `i64`
/// accumulation of code products, one round-to-nearest-even requantization
/// into `out_fmt`, optional ReLU after requantization.
/// Returns the output tensor and the saturation count.
pub fn direct_conv_fxp(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    out_fmt: FxpFormat,
    relu: bool,
) -> Result<(Tensor, u64)> {
    let fx = check_fxp(x, "input")?;
    let fw = check_fxp(w, "weights")?;
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    let (or, oc) = g.conv_output_dims(xs.rows, xs.cols)?;
    let acc_frac = fx.fraction_bits() as u32 + fw.fraction_bits() as u32;
    let mut out = Tensor::zeros_fxp(Shape::new(xs.batch, cout, or, oc), out_fmt);
    let mut saturated = 0u64;
    for b in 0..xs.batch {
        for o in 0..cout {
            for i in 0..or {
                for j in 0..oc {
                    let mut acc = 0i64;
                    for c in 0..cin {
                        for a in 0..g.kernel {
                            for d in 0..g.kernel {
                                let ri = (i * g.stride + a) as isize - g.pad as isize;
                                let ci = (j * g.stride + d) as isize - g.pad as isize;
                                if ri >= 0
                                    && ci >= 0
                                    && (ri as usize) < xs.rows
                                    && (ci as usize) < xs.cols
                                {
                                    acc += x.get_code(b, c, ri as usize, ci as usize)? as i64
                                        * w.get_code(o, c, a, d)? as i64;
                                }
                            }
                        }
                    }
                    let (mut code, sat) = out_fmt.requantize_from(acc, acc_frac);
                    if sat {
                        saturated += 1;
                    }
                    if relu && code < 0 {
                        code = 0;
                    }
                    out.set_code(b, o, i, j, code as i32)?;
                }
            }
        }
    }
    Ok((out, saturated))
}

/// Bit-accurate direct transposed convolution on fixed-point codes; same
/// accumulation and requantization discipline as [`direct_conv_fxp`].
pub fn direct_deconv_fxp(
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeometry,
    out_fmt: FxpFormat,
    relu: bool,
) -> Result<(Tensor, u64)> {
    let fx = check_fxp(x, "input")?;
    let fw = check_fxp(w, "weights")?;
    let (cin, cout) = check_channels(x, w, g)?;
    let xs = x.shape();
    let (or, oc) = g.deconv_output_dims(xs.rows, xs.cols)?;
    let acc_frac = fx.fraction_bits() as u32 + fw.fraction_bits() as u32;
    let mut acc = vec![0i64; xs.batch * cout * or * oc];
    let oshape = Shape::new(xs.batch, cout, or, oc);
    for b in 0..xs.batch {
        for o in 0..cout {
            for c in 0..cin {
                for i in 0..xs.rows {
                    for j in 0..xs.cols {
                        let xv = x.get_code(b, c, i, j)? as i64;
                        if xv == 0 {
                            continue;
                        }
                        for a in 0..g.kernel {
                            for d in 0..g.kernel {
                                let ri = (i * g.stride + a) as isize - g.pad as isize;
                                let ci = (j * g.stride + d) as isize - g.pad as isize;
                                if ri >= 0
                                    && ci >= 0
                                    && (ri as usize) < or
                                    && (ci as usize) < oc
                                {
                                    acc[oshape.index(b, o, ri as usize, ci as usize)] +=
                                        xv * w.get_code(o, c, a, d)? as i64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros_fxp(oshape, out_fmt);
    let mut saturated = 0u64;
    for b in 0..xs.batch {
        for o in 0..cout {
            for i in 0..or {
                for j in 0..oc {
                    let (mut code, sat) =
                        out_fmt.requantize_from(acc[oshape.index(b, o, i, j)], acc_frac);
                    if sat {
                        saturated += 1;
                    }
                    if relu && code < 0 {
                        code = 0;
                    }
                    out.set_code(b, o, i, j, code as i32)?;
                }
            }
        }
    }
    Ok((out, saturated))
}

/// Empirically certified placement of a fast deconvolution tile inside the
/// full transposed-convolution output.
///
/// A patch whose top-left input sample sits at row `a` produces the `m`
/// output rows starting at `stride·a + row_offset`; tiles advance
/// `input_step` input rows per `m` output rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileAlignment {
    pub row_offset: isize,
    pub col_offset: isize,
    pub input_step: usize,
}

/// Searches offsets in `[-k, k]²` for the unique placement at which the
/// fast tile reproduces a window of the direct transposed-convolution
/// output, across `trials` random inputs and four patch origins.
///
/// Exactly one surviving offset is required: none signals corrupted
/// matrices, several an under-determined search.
pub fn find_tile_alignment(ts: &TransformSet, trials: usize, seed: u64) -> Result<TileAlignment> {
    if ts.kind() != OpKind::Deconv {
        return Err(Error::Invalid(
            "tile alignment search applies to deconvolution transform sets".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Invalid("alignment search needs at least one trial".into()));
    }
    let (m, k, s, r, p) = (ts.m(), ts.k(), ts.s(), ts.r(), ts.p());
    let n = p + r; // room for patch origins {0, r} on each axis
    let full = (n - 1) * s + k; // unpadded transposed-conv output edge
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_i = k as isize;
    let mut candidates: Vec<(isize, isize)> = (-k_i..=k_i)
        .flat_map(|dr| (-k_i..=k_i).map(move |dc| (dr, dc)))
        .collect();

    for _ in 0..trials {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Direct full output by scatter.
        let mut direct = vec![0.0; full * full];
        for i in 0..n {
            for j in 0..n {
                for a in 0..k {
                    for d in 0..k {
                        direct[(i * s + a) * full + (j * s + d)] += x[i * n + j] * w[a * k + d];
                    }
                }
            }
        }
        for ar in [0usize, r] {
            for ac in [0usize, r] {
                let mut patch = vec![0.0; p * p];
                for i in 0..p {
                    for j in 0..p {
                        patch[i * p + j] = x[(ar + i) * n + (ac + j)];
                    }
                }
                let tile = ts.fast_tile(&patch, &w)?;
                candidates.retain(|&(dr, dc)| {
                    for i in 0..m {
                        for j in 0..m {
                            let fr = (s * ar) as isize + dr + i as isize;
                            let fc = (s * ac) as isize + dc + j as isize;
                            if fr < 0 || fc < 0 || fr as usize >= full || fc as usize >= full {
                                return false;
                            }
                            let d = direct[fr as usize * full + fc as usize];
                            if (tile[i * m + j] - d).abs() > 1e-9 {
                                return false;
                            }
                        }
                    }
                    true
                });
                if candidates.is_empty() {
                    return Err(Error::Alignment(
                        "no offset reproduces the direct output; transform matrices are \
                         inconsistent with the declared geometry"
                            .into(),
                    ));
                }
            }
        }
    }
    if candidates.len() > 1 {
        return Err(Error::Alignment(format!(
            "{} offsets survived {trials} trials; search under-determined",
            candidates.len()
        )));
    }
    let (row_offset, col_offset) = candidates[0];
    Ok(TileAlignment {
        row_offset,
        col_offset,
        input_step: r,
    })
}

/// Dense multiplication count model for a whole layer:
/// `out_rows·out_cols·cin·cout·k²` for convolution and
/// `out_rows·out_cols·cin·cout·k²/s²` for transposed convolution
/// (each output position averages `k²/s²` contributing taps).
pub fn dense_mult_count(
    kind: OpKind,
    g: &ConvGeometry,
    out_rows: usize,
    out_cols: usize,
    cin: usize,
    cout: usize,
) -> u64 {
    let per_output = match kind {
        OpKind::Conv => g.kernel * g.kernel,
        OpKind::Deconv => g.kernel * g.kernel / (g.stride * g.stride),
    };
    (out_rows * out_cols * cin * cout * per_output) as u64
}

/// Six-index brute-force importance matrix.
///
/// With `A: μ×m`, `B: p×μ` (the untransposed forms), the tensor
/// `H[c][d][i][j][q][v] = A[i][c]·A[j][d]·B[q][i]·B[v][j]` collects every
/// coefficient through which transform-domain cell `(i,j)` influences the
/// output; `Q[i][j]` is the Euclidean norm of `H` over `(c,d,q,v)`.
pub fn importance_matrix_brute_force(ts: &TransformSet) -> Vec<f64> {
    let (m, p, mu) = (ts.m(), ts.p(), ts.mu());
    // A[i][c] = Aᵀ[c][i]; B[q][i] = Bᵀ[i][q].
    let a = |i: usize, c: usize| ts.at().get(c, i).as_f64();
    let b = |q: usize, i: usize| ts.bt().get(i, q).as_f64();
    let mut q_out = vec![0.0; mu * mu];
    for i in 0..mu {
        for j in 0..mu {
            let mut sum_sq = 0.0;
            for c in 0..m {
                for d in 0..m {
                    for q in 0..p {
                        for v in 0..p {
                            let h = a(i, c) * a(j, d) * b(q, i) * b(v, j);
                            sum_sq += h * h;
                        }
                    }
                }
            }
            q_out[i * mu + j] = sum_sq.sqrt();
        }
    }
    q_out
}
