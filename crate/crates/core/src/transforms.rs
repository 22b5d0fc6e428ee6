//! Fast tile transforms for convolution and strided deconvolution.
//!
//! Both operations share one tile-level formula,
//!
//! ```text
//! V = Aᵀ · [ (G · W · Gᵀ) ⊙ (Bᵀ · X · B) ] · A
//! ```
//!
//! where `X` is a `p×p` input patch, `W` a `k×k` kernel, `⊙` the elementwise
//! (Hadamard) product in the `μ×μ` transform domain, and `V` the `m×m`
//! output tile. Two concrete transform sets are built in:
//!
//! * convolution `F(2×2, 3×3)`: `m=2, k=3, s=1, p=4, μ=4`;
//! * deconvolution `T₃(6×6, 4×4)` with stride 2: `m=6, k=4, s=2, p=5, μ=8`.
//!
//! All matrix entries are dyadic rationals drawn from `{0, ±1, ±1/2}`, so
//! every transform is exact in `f64` and expressible as shift-and-add on
//! integer codes. The input- and output-side matrices (`Bᵀ`, `Aᵀ`) of both
//! builtin sets contain only `{0, ±1}`, which is what makes the bit-accurate
//! integer path possible without intermediate rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dyadic rational `num / 2^log2_den`, kept in canonical form
/// (`num` odd or zero; zero is `(0, 0)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dyadic {
    num: i32,
    log2_den: u8,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, log2_den: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, log2_den: 0 };

    /// Builds `num / 2^log2_den`, canonicalizing common factors of two.
    pub fn new(mut num: i32, mut log2_den: u8) -> Self {
        if num == 0 {
            return Self::ZERO;
        }
        while num % 2 == 0 && log2_den > 0 {
            num /= 2;
            log2_den -= 1;
        }
        Self { num, log2_den }
    }

    pub fn num(&self) -> i32 {
        self.num
    }

    pub fn log2_den(&self) -> u8 {
        self.log2_den
    }

    /// Exact `f64` value (dyadics of this size are always representable).
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / (1u64 << self.log2_den) as f64
    }

    /// Numerator after rescaling to denominator `2^scale_log2`;
    /// errors if the value is finer than the requested scale.
    pub fn scaled_num(&self, scale_log2: u8) -> Result<i64> {
        if self.log2_den > scale_log2 {
            return Err(Error::Invalid(format!(
                "dyadic {}/{} finer than scale 2^-{scale_log2}",
                self.num,
                1u64 << self.log2_den
            )));
        }
        Ok((self.num as i64) << (scale_log2 - self.log2_den))
    }

    /// Parses `0`, `±n`, or `±n/d` with `d` a power of two.
    pub fn parse(token: &str) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("bad rational '{token}': {why}"));
        if let Some((n, d)) = token.split_once('/') {
            let num: i32 = n.trim().parse().map_err(|_| bad("numerator"))?;
            let den: u64 = d.trim().parse().map_err(|_| bad("denominator"))?;
            if den == 0 || !den.is_power_of_two() {
                return Err(bad("denominator must be a positive power of two"));
            }
            Ok(Self::new(num, den.trailing_zeros() as u8))
        } else {
            let num: i32 = token.trim().parse().map_err(|_| bad("integer"))?;
            Ok(Self::new(num, 0))
        }
    }

    /// Renders in the same syntax `parse` accepts.
    pub fn render(&self) -> String {
        if self.log2_den == 0 {
            format!("{}", self.num)
        } else {
            format!("{}/{}", self.num, 1u64 << self.log2_den)
        }
    }
}

/// Dense matrix of dyadic rationals, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Dyadic>,
}

impl DyadicMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Dyadic>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix payload has {} entries, {rows}x{cols} needs {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from a table of doubled values (`value × 2`), a convenient
    /// integer spelling for entries in `{0, ±1, ±1/2}`.
    fn from_halves(rows: usize, cols: usize, doubled: &[i32]) -> Self {
        assert_eq!(doubled.len(), rows * cols);
        let data = doubled.iter().map(|&d| Dyadic::new(d, 1)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Dyadic {
        self.data[r * self.cols + c]
    }

    pub fn entries(&self) -> &[Dyadic] {
        &self.data
    }

    /// Largest `log2` denominator across entries (0 for all-integer).
    pub fn max_log2_den(&self) -> u8 {
        self.data.iter().map(|d| d.log2_den).max().unwrap_or(0)
    }

    /// True when every entry is an integer.
    pub fn is_integer(&self) -> bool {
        self.max_log2_den() == 0
    }

    /// Euclidean norm of row `r`.
    pub fn row_norm(&self, r: usize) -> f64 {
        (0..self.cols)
            .map(|c| {
                let v = self.get(r, c).as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean norm of column `c`.
    pub fn col_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| {
                let v = self.get(r, c).as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    fn check_entry_domain(&self, name: &str) -> Result<()> {
        for d in &self.data {
            let ok = d.log2_den <= 1 && d.num.abs() <= 1;
            if !ok {
                return Err(Error::Invalid(format!(
                    "matrix {name} entry {} outside the supported set {{0, ±1, ±1/2}}",
                    d.render()
                )));
            }
        }
        Ok(())
    }
}

/// Which operation a transform set implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Conv,
    Deconv,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Deconv => "deconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(OpKind::Conv),
            "deconv" => Ok(OpKind::Deconv),
            other => Err(Error::Format(format!("unknown op kind '{other}'"))),
        }
    }
}

/// Domain a transformed patch lives in; operations check provenance so a
/// weight-domain matrix cannot be fed where an input-domain one is expected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    InputDomain,
    WeightDomain,
    ProductDomain,
}

/// A `μ×μ` real matrix in the transform domain, tagged with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedPatch {
    pub edge: usize,
    pub provenance: Provenance,
    pub data: Vec<f64>,
}

impl TransformedPatch {
    fn expect(&self, p: Provenance, edge: usize) -> Result<()> {
        if self.provenance != p {
            return Err(Error::Invalid(format!(
                "expected a {:?} patch, got {:?}",
                p, self.provenance
            )));
        }
        if self.edge != edge || self.data.len() != edge * edge {
            return Err(Error::Shape(format!(
                "patch edge {} (len {}) does not match transform edge {edge}",
                self.edge,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// One complete fast-transform description: tile geometry plus the three
/// matrices, stored in the orientation the formula applies them
/// (`Bᵀ: μ×p`, `G: μ×k`, `Aᵀ: m×μ`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    kind: OpKind,
    m: usize,
    k: usize,
    s: usize,
    r: usize,
    p: usize,
    mu: usize,
    bt: DyadicMatrix,
    g: DyadicMatrix,
    at: DyadicMatrix,
}

/// The three matrices of a transform set, as parsed from an override file.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixBlocks {
    /// `Bᵀ`, `μ×p`.
    pub bt: DyadicMatrix,
    /// `G`, `μ×k`.
    pub g: DyadicMatrix,
    /// `Aᵀ`, `m×μ`.
    pub at: DyadicMatrix,
}

impl TransformSet {
    /// Assembles and validates a transform set from explicit matrices.
    pub fn with_matrices(kind: OpKind, m: usize, k: usize, s: usize, b: MatrixBlocks) -> Result<Self> {
        if s == 0 || m % s != 0 {
            return Err(Error::Invalid(format!(
                "tile size m={m} must be a positive multiple of stride s={s}"
            )));
        }
        let mu = b.bt.rows();
        if b.g.rows() != mu || b.at.cols() != mu {
            return Err(Error::Shape(format!(
                "transform-domain edge disagrees: Bᵀ has {mu} rows, G {} rows, Aᵀ {} cols",
                b.g.rows(),
                b.at.cols()
            )));
        }
        if b.at.rows() != m {
            return Err(Error::Shape(format!(
                "Aᵀ has {} rows, expected tile size m={m}",
                b.at.rows()
            )));
        }
        if b.g.cols() != k {
            return Err(Error::Shape(format!(
                "G has {} cols, expected kernel size k={k}",
                b.g.cols()
            )));
        }
        b.bt.check_entry_domain("Bᵀ")?;
        b.g.check_entry_domain("G")?;
        b.at.check_entry_domain("Aᵀ")?;
        Ok(Self {
            kind,
            m,
            k,
            s,
            r: m / s,
            p: b.bt.cols(),
            mu,
            bt: b.bt,
            g: b.g,
            at: b.at,
        })
    }

    /// Builtin convolution transform `F(2×2, 3×3)`:
    ///
    /// ```text
    /// Bᵀ = | 1  0 -1  0 |   G = |  1    0    0  |   Aᵀ = | 1 1  1  0 |
    ///      | 0  1  1  0 |       | 1/2  1/2  1/2 |        | 0 1 -1 -1 |
    ///      | 0 -1  1  0 |       | 1/2 -1/2  1/2 |
    ///      | 0  1  0 -1 |       |  0    0    1  |
    /// ```
    pub fn conv_f2x2_3x3() -> Self {
        #[rustfmt::skip]
        let bt = DyadicMatrix::from_halves(4, 4, &[
            2,  0, -2,  0,
            0,  2,  2,  0,
            0, -2,  2,  0,
            0,  2,  0, -2,
        ]);
        #[rustfmt::skip]
        let g = DyadicMatrix::from_halves(4, 3, &[
            2,  0,  0,
            1,  1,  1,
            1, -1,  1,
            0,  0,  2,
        ]);
        #[rustfmt::skip]
        let at = DyadicMatrix::from_halves(2, 4, &[
            2, 2,  2,  0,
            0, 2, -2, -2,
        ]);
        Self::with_matrices(OpKind::Conv, 2, 3, 1, MatrixBlocks { bt, g, at })
            .expect("builtin conv matrices are valid")
    }

    /// Builtin stride-2 deconvolution transform `T₃(6×6, 4×4)`:
    ///
    /// ```text
    /// Bᵀ (8×5)           G (8×4)              Aᵀ (6×8)
    /// | 1  0 -1  0  0 |  |  0    0    0   1 |  | 1 1  1 0 0 0  0 0 |
    /// | 0  1  1  0  0 |  |  0   1/2   0  1/2|  | 0 0  0 0 1 1  1 0 |
    /// | 0 -1  1  0  0 |  |  0  -1/2   0  1/2|  | 0 1 -1 0 0 0  0 0 |
    /// | 0 -1  0  1  0 |  |  0    1    0   0 |  | 0 0  0 0 0 1 -1 0 |
    /// | 0  1  0 -1  0 |  |  0    0    1   0 |  | 0 1  1 1 0 0  0 0 |
    /// | 0  0  1  1  0 |  | 1/2   0   1/2  0 |  | 0 0  0 0 0 1  1 1 |
    /// | 0  0 -1  1  0 |  |-1/2   0   1/2  0 |
    /// | 0  0 -1  0  1 |  |  1    0    0   0 |
    /// ```
    pub fn deconv_t3_6x6_4x4() -> Self {
        #[rustfmt::skip]
        let bt = DyadicMatrix::from_halves(8, 5, &[
            2,  0, -2,  0,  0,
            0,  2,  2,  0,  0,
            0, -2,  2,  0,  0,
            0, -2,  0,  2,  0,
            0,  2,  0, -2,  0,
            0,  0,  2,  2,  0,
            0,  0, -2,  2,  0,
            0,  0, -2,  0,  2,
        ]);
        #[rustfmt::skip]
        let g = DyadicMatrix::from_halves(8, 4, &[
             0,  0,  0,  2,
             0,  1,  0,  1,
             0, -1,  0,  1,
             0,  2,  0,  0,
             0,  0,  2,  0,
             1,  0,  1,  0,
            -1,  0,  1,  0,
             2,  0,  0,  0,
        ]);
        #[rustfmt::skip]
        let at = DyadicMatrix::from_halves(6, 8, &[
            2, 2,  2, 0, 0, 0,  0, 0,
            0, 0,  0, 0, 2, 2,  2, 0,
            0, 2, -2, 0, 0, 0,  0, 0,
            0, 0,  0, 0, 0, 2, -2, 0,
            0, 2,  2, 2, 0, 0,  0, 0,
            0, 0,  0, 0, 0, 2,  2, 2,
        ]);
        Self::with_matrices(OpKind::Deconv, 6, 4, 2, MatrixBlocks { bt, g, at })
            .expect("builtin deconv matrices are valid")
    }

    /// Builtin set for an operation kind.
    pub fn builtin(kind: OpKind) -> Self {
        match kind {
            OpKind::Conv => Self::conv_f2x2_3x3(),
            OpKind::Deconv => Self::deconv_t3_6x6_4x4(),
        }
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    /// Output tile edge `m`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Kernel edge `k`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Stride `s`.
    pub fn s(&self) -> usize {
        self.s
    }

    /// Input rows consumed per tile step (`m = r·s`).
    pub fn r(&self) -> usize {
        self.r
    }

    /// Input patch edge `p`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Transform-domain edge `μ`.
    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn bt(&self) -> &DyadicMatrix {
        &self.bt
    }

    pub fn g(&self) -> &DyadicMatrix {
        &self.g
    }

    pub fn at(&self) -> &DyadicMatrix {
        &self.at
    }

    /// Input transform `Y = Bᵀ·X·B` on a `p×p` real patch.
    pub fn input_transform(&self, x: &[f64]) -> Result<TransformedPatch> {
        if x.len() != self.p * self.p {
            return Err(Error::Shape(format!(
                "input patch has {} elements, expected {}x{}",
                x.len(),
                self.p,
                self.p
            )));
        }
        Ok(TransformedPatch {
            edge: self.mu,
            provenance: Provenance::InputDomain,
            data: sandwich_f64(&self.bt, x, self.p, &self.bt),
        })
    }

    /// Weight transform `E = G·W·Gᵀ` on a `k×k` real kernel.
    pub fn weight_transform(&self, w: &[f64]) -> Result<TransformedPatch> {
        if w.len() != self.k * self.k {
            return Err(Error::Shape(format!(
                "kernel has {} elements, expected {}x{}",
                w.len(),
                self.k,
                self.k
            )));
        }
        Ok(TransformedPatch {
            edge: self.mu,
            provenance: Provenance::WeightDomain,
            data: sandwich_f64(&self.g, w, self.k, &self.g),
        })
    }

    /// Elementwise product `U = E ⊙ Y`; checks both provenances.
    pub fn hadamard(&self, e: &TransformedPatch, y: &TransformedPatch) -> Result<TransformedPatch> {
        e.expect(Provenance::WeightDomain, self.mu)?;
        y.expect(Provenance::InputDomain, self.mu)?;
        let data = e.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
        Ok(TransformedPatch {
            edge: self.mu,
            provenance: Provenance::ProductDomain,
            data,
        })
    }

    /// Output transform `V = Aᵀ·U·A`, returning the `m×m` tile.
    pub fn output_transform(&self, u: &TransformedPatch) -> Result<Vec<f64>> {
        u.expect(Provenance::ProductDomain, self.mu)?;
        Ok(sandwich_f64(&self.at, &u.data, self.mu, &self.at))
    }

    /// Full dense tile pipeline on real data (convenience for tests and the
    /// dense engine path).
    pub fn fast_tile(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let y = self.input_transform(x)?;
        let e = self.weight_transform(w)?;
        let u = self.hadamard(&e, &y)?;
        self.output_transform(&u)
    }

    /// True when the integer-code path is available (`Bᵀ` and `Aᵀ` all
    /// integer entries).
    pub fn supports_integer_path(&self) -> bool {
        self.bt.is_integer() && self.at.is_integer()
    }

    /// Input transform on integer codes. Requires an all-integer `Bᵀ`; each
    /// output code is an exact integer combination of input codes.
    pub fn input_transform_codes(&self, x: &[i64]) -> Result<Vec<i64>> {
        if !self.bt.is_integer() {
            return Err(Error::Invalid(
                "integer input transform requires an all-integer Bᵀ".into(),
            ));
        }
        if x.len() != self.p * self.p {
            return Err(Error::Shape(format!(
                "input patch has {} elements, expected {}x{}",
                x.len(),
                self.p,
                self.p
            )));
        }
        Ok(sandwich_i64(&self.bt, 0, x, self.p, &self.bt)?)
    }

    /// Weight transform on integer codes, computed at scale `2^extra` where
    /// `extra = 2·max_log2_den(G)` so the result is exactly integer:
    /// returns `((2^e·G)·W·(2^e·G)ᵀ, extra)` with `e = max_log2_den(G)`.
    pub fn weight_transform_codes(&self, w: &[i64]) -> Result<(Vec<i64>, u8)> {
        if w.len() != self.k * self.k {
            return Err(Error::Shape(format!(
                "kernel has {} elements, expected {}x{}",
                w.len(),
                self.k,
                self.k
            )));
        }
        let e = self.g.max_log2_den();
        let data = sandwich_i64(&self.g, e, w, self.k, &self.g)?;
        Ok((data, 2 * e))
    }

    /// Output transform on integer codes. Requires an all-integer `Aᵀ`.
    pub fn output_transform_codes(&self, u: &[i64]) -> Result<Vec<i64>> {
        if !self.at.is_integer() {
            return Err(Error::Invalid(
                "integer output transform requires an all-integer Aᵀ".into(),
            ));
        }
        if u.len() != self.mu * self.mu {
            return Err(Error::Shape(format!(
                "product patch has {} elements, expected {}x{}",
                u.len(),
                self.mu,
                self.mu
            )));
        }
        Ok(sandwich_i64(&self.at, 0, u, self.mu, &self.at)?)
    }

    /// Multiplication counts for one output tile: the fast path spends
    /// `μ²` multiplies; the direct path spends `m²·k²/s²`
    /// (each of the `m²` outputs accumulates `k²/s²` products at stride `s`).
    pub fn tile_multiplication_count(&self) -> TileMults {
        let fast = (self.mu * self.mu) as u64;
        let direct = (self.m * self.m * self.k * self.k / (self.s * self.s)) as u64;
        TileMults { fast, direct }
    }

    /// Renders the three matrices in the override-file syntax.
    pub fn render_matrix_file(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("kind {}\n", self.kind.as_str()));
        for (name, m) in [("B", &self.bt), ("G", &self.g), ("A", &self.at)] {
            out.push_str(&format!("{name} {} {}\n", m.rows(), m.cols()));
            for r in 0..m.rows() {
                let row: Vec<String> = (0..m.cols()).map(|c| m.get(r, c).render()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Per-tile multiplication counts (fast path vs direct path).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileMults {
    pub fast: u64,
    pub direct: u64,
}

/// Computes `M · X · Nᵀ` with `M: a×b`, `X: b×b` real, `N: c×b`.
fn sandwich_f64(m: &DyadicMatrix, x: &[f64], b: usize, n: &DyadicMatrix) -> Vec<f64> {
    let a = m.rows();
    let c = n.rows();
    debug_assert_eq!(m.cols(), b);
    debug_assert_eq!(n.cols(), b);
    // tmp = M · X  (a×b)
    let mut tmp = vec![0.0; a * b];
    for i in 0..a {
        for j in 0..b {
            let mut acc = 0.0;
            for t in 0..b {
                let coef = m.get(i, t);
                if coef.num() != 0 {
                    acc += coef.as_f64() * x[t * b + j];
                }
            }
            tmp[i * b + j] = acc;
        }
    }
    // out = tmp · Nᵀ  (a×c)
    let mut out = vec![0.0; a * c];
    for i in 0..a {
        for j in 0..c {
            let mut acc = 0.0;
            for t in 0..b {
                let coef = n.get(j, t);
                if coef.num() != 0 {
                    acc += tmp[i * b + t] * coef.as_f64();
                }
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// Computes `(2^scale·M) · X · (2^scale·N)ᵀ` over `i64` codes; exact because
/// every rescaled entry is an integer.
fn sandwich_i64(
    m: &DyadicMatrix,
    scale: u8,
    x: &[i64],
    b: usize,
    n: &DyadicMatrix,
) -> Result<Vec<i64>> {
    let a = m.rows();
    let c = n.rows();
    let mut tmp = vec![0i64; a * b];
    for i in 0..a {
        for j in 0..b {
            let mut acc = 0i64;
            for t in 0..b {
                let coef = m.get(i, t).scaled_num(scale)?;
                if coef != 0 {
                    acc += coef * x[t * b + j];
                }
            }
            tmp[i * b + j] = acc;
        }
    }
    let mut out = vec![0i64; a * c];
    for i in 0..a {
        for j in 0..c {
            let mut acc = 0i64;
            for t in 0..b {
                let coef = n.get(j, t).scaled_num(scale)?;
                if coef != 0 {
                    acc += tmp[i * b + t] * coef;
                }
            }
            out[i * c + j] = acc;
        }
    }
    Ok(out)
}

/// Parses a matrix override file.
///
/// Line-oriented text: `#` starts a comment; the first directive must be
/// `kind conv|deconv`; each matrix block opens with `B|G|A <rows> <cols>`
/// followed by `rows` lines of `cols` rationals (`0`, `±n`, `±n/d` with `d`
/// a power of two). Blocks hold the matrices exactly as the formula applies
/// them: `B` is `Bᵀ (μ×p)`, `G` is `G (μ×k)`, `A` is `Aᵀ (m×μ)`. All three
/// blocks are required, each exactly once.
pub fn parse_matrix_file(text: &str) -> Result<(OpKind, MatrixBlocks)> {
    let mut tokens: Vec<&str> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace());
    }
    let mut iter = tokens.into_iter().peekable();
    let kind = match (iter.next(), iter.next()) {
        (Some("kind"), Some(k)) => OpKind::parse(k)?,
        _ => {
            return Err(Error::Format(
                "matrix file must start with 'kind conv' or 'kind deconv'".into(),
            ))
        }
    };
    let mut bt = None;
    let mut g = None;
    let mut at = None;
    while let Some(name) = iter.next() {
        let slot = match name {
            "B" => &mut bt,
            "G" => &mut g,
            "A" => &mut at,
            other => {
                return Err(Error::Format(format!(
                    "unknown matrix block '{other}', expected B, G, or A"
                )))
            }
        };
        if slot.is_some() {
            return Err(Error::Format(format!("duplicate matrix block '{name}'")));
        }
        let rows: usize = iter
            .next()
            .ok_or_else(|| Error::Format(format!("block '{name}' missing row count")))?
            .parse()
            .map_err(|_| Error::Format(format!("block '{name}' has a bad row count")))?;
        let cols: usize = iter
            .next()
            .ok_or_else(|| Error::Format(format!("block '{name}' missing col count")))?
            .parse()
            .map_err(|_| Error::Format(format!("block '{name}' has a bad col count")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let tok = iter.next().ok_or_else(|| {
                Error::Format(format!("block '{name}' truncated, expected {rows}x{cols} entries"))
            })?;
            data.push(Dyadic::parse(tok)?);
        }
        *slot = Some(DyadicMatrix::new(rows, cols, data)?);
    }
    match (bt, g, at) {
        (Some(bt), Some(g), Some(at)) => Ok((kind, MatrixBlocks { bt, g, at })),
        _ => Err(Error::Format(
            "matrix file must contain exactly one B, one G, and one A block".into(),
        )),
    }
}

/// Loads a transform set from an override file, taking tile geometry
/// `(m, k, s)` from the builtin set of the file's declared kind. Overrides
/// change matrix entries, not tile geometry, so dimensions must match the
/// builtin layout.
pub fn load_transform_override(text: &str) -> Result<TransformSet> {
    let (kind, blocks) = parse_matrix_file(text)?;
    let builtin = TransformSet::builtin(kind);
    let ts = TransformSet::with_matrices(kind, builtin.m(), builtin.k(), builtin.s(), blocks)?;
    if ts.p() != builtin.p() || ts.mu() != builtin.mu() {
        return Err(Error::Shape(format!(
            "override geometry (p={}, mu={}) does not match the {} layout (p={}, mu={})",
            ts.p(),
            ts.mu(),
            kind.as_str(),
            builtin.p(),
            builtin.mu()
        )));
    }
    Ok(ts)
}
