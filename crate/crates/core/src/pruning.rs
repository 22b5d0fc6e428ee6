//! Transform-domain pruning: importance matrix, sparsity masks, and
//! compressed sparse kernel banks (the `NVCS` container).
//!
//! Pruning happens in the `μ×μ` transform domain. Cell `(i,j)` of a
//! transformed kernel `E` is scored by `Q[i][j]²·E[i][j]²`, where `Q` is the
//! data-independent importance matrix of the transform set; the
//! `floor(ρ·μ²)` lowest-scoring cells are zeroed. The surviving cells are
//! stored as `(flat index, value)` pairs so the compute unit multiplies only
//! at populated positions.
//!
//! `Q` factorizes: with `A: μ×m` and `B: p×μ` (untransposed forms),
//! `Q[i][j] = f[i]·f[j]` where `f[i] = ‖A row i‖·‖B column i‖`. The
//! brute-force six-index definition lives in [`crate::oracle`] and the two
//! routes are checked against each other in tests; they intentionally share
//! no code.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FxpFormat, Tensor};
use crate::transforms::{Provenance, TransformSet, TransformedPatch};

/// Magic bytes opening every `NVCS` sparse-bank file.
pub const NVCS_MAGIC: [u8; 4] = *b"NVCS";
/// Fixed `NVCS` header size in bytes.
pub const NVCS_HEADER_LEN: usize = 24;

/// Data-independent importance weights of the transform-domain cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    mu: usize,
    q: Vec<f64>,
}

impl ImportanceMatrix {
    pub fn mu(&self) -> usize {
        self.mu
    }

    /// Flat `μ×μ` row-major entries.
    pub fn values(&self) -> &[f64] {
        &self.q
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.mu + j]
    }
}

/// Importance matrix via the rank-one factorization
/// `Q[i][j] = f[i]·f[j]`, `f[i] = ‖A row i‖ · ‖B col i‖`
/// (`= ‖Aᵀ col i‖ · ‖Bᵀ row i‖` on the stored transposed forms).
pub fn importance_matrix(ts: &TransformSet) -> ImportanceMatrix {
    let mu = ts.mu();
    let f: Vec<f64> = (0..mu)
        .map(|i| ts.at().col_norm(i) * ts.bt().row_norm(i))
        .collect();
    let mut q = vec![0.0; mu * mu];
    for i in 0..mu {
        for j in 0..mu {
            q[i * mu + j] = f[i] * f[j];
        }
    }
    ImportanceMatrix { mu, q }
}

/// How masks are shared across a layer's kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskPolicy {
    /// Every `(out-channel, in-channel)` kernel is ranked and masked on its
    /// own scores. All masks still have identical population counts.
    PerKernel,
    /// One mask for the whole layer, ranked on scores summed across all
    /// kernels.
    SharedAcrossChannels,
}

impl MaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPolicy::PerKernel => "per-kernel",
            MaskPolicy::SharedAcrossChannels => "shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-kernel" => Ok(MaskPolicy::PerKernel),
            "shared" => Ok(MaskPolicy::SharedAcrossChannels),
            other => Err(Error::Format(format!(
                "unknown mask policy '{other}', expected 'per-kernel' or 'shared'"
            ))),
        }
    }

    fn code(&self) -> u8 {
        match self {
            MaskPolicy::PerKernel => 0,
            MaskPolicy::SharedAcrossChannels => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(MaskPolicy::PerKernel),
            1 => Ok(MaskPolicy::SharedAcrossChannels),
            other => Err(Error::Format(format!("unknown mask policy byte {other}"))),
        }
    }
}

/// Binary keep/prune decision per transform-domain cell.
///
/// Exactly `floor(ρ·μ²)` cells are pruned: cells are sorted by score
/// ascending with ties broken toward pruning the *higher* flat index, so
/// equal-scoring survivors are always the lower indices and the mask is a
/// pure function of the scores. `zeta` is the smallest surviving score
/// (`0` when nothing is pruned); every cell scoring strictly below `zeta`
/// is pruned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityMask {
    mu: usize,
    keep: Vec<bool>,
    rho: f64,
    zeta: f64,
}

impl SparsityMask {
    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Score threshold realized by this mask.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Number of surviving cells.
    pub fn population(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Flat indices of surviving cells, ascending.
    pub fn kept_indices(&self) -> Vec<u8> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i as u8))
            .collect()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Invalid(format!("pruning ratio {rho} outside [0, 1]")));
    }
    Ok(())
}

/// Builds a mask from per-cell scores (`score[idx] = Q[idx]²·E[idx]²`, or a
/// sum of those across kernels under the shared policy).
fn mask_from_scores(scores: &[f64], mu: usize, rho: f64) -> Result<SparsityMask> {
    check_rho(rho)?;
    let n = mu * mu;
    if scores.len() != n {
        return Err(Error::Shape(format!(
            "{} scores for a {mu}x{mu} mask",
            scores.len()
        )));
    }
    let prune_count = (rho * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Ascending score; equal scores prune the higher index first, so the
    // lower flat index survives.
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores are finite")
            .then(b.cmp(&a))
    });
    let mut keep = vec![true; n];
    for &idx in order.iter().take(prune_count) {
        keep[idx] = false;
    }
    let zeta = if prune_count == 0 {
        0.0
    } else if prune_count == n {
        f64::MAX
    } else {
        order[prune_count..]
            .iter()
            .map(|&i| scores[i])
            .fold(f64::MAX, f64::min)
    };
    Ok(SparsityMask {
        mu,
        keep,
        rho,
        zeta,
    })
}

fn scores_for(e: &[f64], q: &ImportanceMatrix) -> Vec<f64> {
    e.iter()
        .zip(q.values())
        .map(|(ev, qv)| {
            let p = qv * ev;
            p * p
        })
        .collect()
}

/// Per-kernel mask for one weight-domain patch.
pub fn make_mask(
    e: &TransformedPatch,
    q: &ImportanceMatrix,
    rho: f64,
) -> Result<SparsityMask> {
    if e.provenance != Provenance::WeightDomain {
        return Err(Error::Invalid(format!(
            "masks are built from weight-domain patches, got {:?}",
            e.provenance
        )));
    }
    if e.edge != q.mu() {
        return Err(Error::Shape(format!(
            "patch edge {} vs importance edge {}",
            e.edge,
            q.mu()
        )));
    }
    mask_from_scores(&scores_for(&e.data, q), q.mu(), rho)
}

/// Shared mask for a whole layer: scores are summed across all kernels
/// before ranking.
pub fn make_shared_mask(
    es: &[TransformedPatch],
    q: &ImportanceMatrix,
    rho: f64,
) -> Result<SparsityMask> {
    if es.is_empty() {
        return Err(Error::Invalid("shared mask needs at least one kernel".into()));
    }
    let mu = q.mu();
    let mut total = vec![0.0; mu * mu];
    for e in es {
        if e.provenance != Provenance::WeightDomain {
            return Err(Error::Invalid(format!(
                "masks are built from weight-domain patches, got {:?}",
                e.provenance
            )));
        }
        if e.edge != mu {
            return Err(Error::Shape(format!(
                "patch edge {} vs importance edge {mu}",
                e.edge
            )));
        }
        for (t, s) in total.iter_mut().zip(scores_for(&e.data, q)) {
            *t += s;
        }
    }
    mask_from_scores(&total, mu, rho)
}

/// Numeric mode of a bank's stored values.
#[derive(Clone, Debug, PartialEq)]
enum BankValues {
    Real(Vec<Vec<f64>>),
    Fxp { fmt: FxpFormat, codes: Vec<Vec<i32>> },
}

/// Compressed transform-domain kernels for one layer.
///
/// Kernel `(oc, ic)` is stored at slot `oc·cin + ic` as parallel arrays of
/// strictly increasing flat indices and the surviving values. Every kernel
/// in a bank has the same population count.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseKernelBank {
    mu: usize,
    cin: usize,
    cout: usize,
    rho_num: u16,
    rho_den: u16,
    policy: MaskPolicy,
    indices: Vec<Vec<u8>>,
    values: BankValues,
}

/// A bank together with the masks that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedBank {
    pub bank: SparseKernelBank,
    /// One mask per kernel under [`MaskPolicy::PerKernel`], a single mask
    /// under [`MaskPolicy::SharedAcrossChannels`].
    pub masks: Vec<SparsityMask>,
}

impl SparseKernelBank {
    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    pub fn policy(&self) -> MaskPolicy {
        self.policy
    }

    /// Pruning ratio as the exact stored rational.
    pub fn rho(&self) -> (u16, u16) {
        (self.rho_num, self.rho_den)
    }

    pub fn rho_f64(&self) -> f64 {
        self.rho_num as f64 / self.rho_den as f64
    }

    pub fn is_real(&self) -> bool {
        matches!(self.values, BankValues::Real(_))
    }

    /// Value format for fixed-point banks.
    pub fn value_format(&self) -> Option<FxpFormat> {
        match &self.values {
            BankValues::Real(_) => None,
            BankValues::Fxp { fmt, .. } => Some(*fmt),
        }
    }

    /// Population count shared by every kernel.
    pub fn nnz(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    fn slot(&self, oc: usize, ic: usize) -> Result<usize> {
        if oc >= self.cout || ic >= self.cin {
            return Err(Error::Invalid(format!(
                "kernel ({oc},{ic}) out of bounds for {}x{} bank",
                self.cout, self.cin
            )));
        }
        Ok(oc * self.cin + ic)
    }

    /// Surviving flat indices of kernel `(oc, ic)`, ascending.
    pub fn kernel_indices(&self, oc: usize, ic: usize) -> Result<&[u8]> {
        Ok(&self.indices[self.slot(oc, ic)?])
    }

    /// Surviving values of kernel `(oc, ic)` as reals (fixed-point codes are
    /// dequantized exactly).
    pub fn kernel_values_real(&self, oc: usize, ic: usize) -> Result<Vec<f64>> {
        let s = self.slot(oc, ic)?;
        Ok(match &self.values {
            BankValues::Real(v) => v[s].clone(),
            BankValues::Fxp { fmt, codes } => codes[s]
                .iter()
                .map(|&c| fmt.dequantize_value(c as i64))
                .collect(),
        })
    }

    /// Surviving value codes of kernel `(oc, ic)`; errors on real banks.
    pub fn kernel_value_codes(&self, oc: usize, ic: usize) -> Result<&[i32]> {
        let s = self.slot(oc, ic)?;
        match &self.values {
            BankValues::Fxp { codes, .. } => Ok(&codes[s]),
            BankValues::Real(_) => Err(Error::Numeric(
                "code access on a real-valued bank".into(),
            )),
        }
    }

    /// Expands kernel `(oc, ic)` back to a dense `μ×μ` real matrix with
    /// zeros at pruned cells.
    pub fn decompress(&self, oc: usize, ic: usize) -> Result<Vec<f64>> {
        let idx = self.kernel_indices(oc, ic)?.to_vec();
        let vals = self.kernel_values_real(oc, ic)?;
        let mut dense = vec![0.0; self.mu * self.mu];
        for (i, v) in idx.iter().zip(vals) {
            dense[*i as usize] = v;
        }
        Ok(dense)
    }

    /// Per-kernel multiplier budget of the compute unit at this bank's
    /// pruning ratio: `μ² - floor(ρ·μ²)` surviving products per kernel
    /// (a deconvolution kernel owns a whole 64-multiplier unit; four
    /// convolution kernels share one, 16 multipliers each).
    pub fn kernel_budget(&self) -> usize {
        let n = self.mu * self.mu;
        n - ((self.rho_f64() * n as f64).floor() as usize)
    }

    /// Hardware-conformance check: every kernel's population must fit the
    /// per-kernel multiplier budget.
    pub fn check_budget(&self) -> Result<()> {
        let budget = self.kernel_budget();
        for (slot, idx) in self.indices.iter().enumerate() {
            if idx.len() > budget {
                return Err(Error::Budget(format!(
                    "kernel (oc={}, ic={}) has {} surviving values, budget is {budget} \
                     at ratio {}/{}",
                    slot / self.cin,
                    slot % self.cin,
                    idx.len(),
                    self.rho_num,
                    self.rho_den
                )));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let n = (self.mu * self.mu).min(u8::MAX as usize + 1);
        if self.mu * self.mu > u8::MAX as usize + 1 {
            return Err(Error::Invalid(format!(
                "transform edge {} needs flat indices beyond u8",
                self.mu
            )));
        }
        if self.rho_den == 0 || self.rho_num > self.rho_den {
            return Err(Error::Invalid(format!(
                "pruning ratio {}/{} outside [0, 1]",
                self.rho_num, self.rho_den
            )));
        }
        if self.indices.len() != self.cin * self.cout {
            return Err(Error::Shape(format!(
                "{} kernels for cin={} cout={}",
                self.indices.len(),
                self.cin,
                self.cout
            )));
        }
        let value_lens: Vec<usize> = match &self.values {
            BankValues::Real(v) => v.iter().map(Vec::len).collect(),
            BankValues::Fxp { codes, .. } => codes.iter().map(Vec::len).collect(),
        };
        if value_lens.len() != self.indices.len() {
            return Err(Error::Shape(
                "value and index kernel counts disagree".into(),
            ));
        }
        let nnz = self.indices.first().map_or(0, Vec::len);
        for (slot, idx) in self.indices.iter().enumerate() {
            if idx.len() != nnz {
                return Err(Error::Invalid(format!(
                    "kernel slot {slot} has {} surviving values, expected the uniform {nnz}",
                    idx.len()
                )));
            }
            if value_lens[slot] != idx.len() {
                return Err(Error::Shape(format!(
                    "kernel slot {slot}: {} values for {} indices",
                    value_lens[slot],
                    idx.len()
                )));
            }
            for w in idx.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Format(format!(
                        "kernel slot {slot}: indices not strictly increasing ({} then {})",
                        w[0], w[1]
                    )));
                }
            }
            if let Some(&last) = idx.last() {
                if (last as usize) >= n {
                    return Err(Error::Format(format!(
                        "kernel slot {slot}: index {last} outside μ²={n}"
                    )));
                }
            }
            if let BankValues::Fxp { fmt, codes } = &self.values {
                for &c in &codes[slot] {
                    if !fmt.contains(c as i64) {
                        return Err(Error::Numeric(format!(
                            "kernel slot {slot}: value code {c} outside its format"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes to the `NVCS` container (fixed-point banks only — the file
    /// format stores value codes).
    ///
    /// Layout (little-endian): magic `NVCS`, `u8 μ`, `u8` policy, `u16` ρ
    /// numerator, `u16` ρ denominator, `u32` cin, `u32` cout, `u8` value
    /// total bits, `u8` value fraction bits, 4 zero pad bytes; then per
    /// kernel (out-channel major): `u16` population, that many `u8` flat
    /// indices, that many `i32` value codes.
    pub fn write_nvcs<W: Write>(&self, mut w: W) -> Result<()> {
        let (fmt, codes) = match &self.values {
            BankValues::Fxp { fmt, codes } => (fmt, codes),
            BankValues::Real(_) => {
                return Err(Error::Numeric(
                    "NVCS stores fixed-point banks; quantize the weights first".into(),
                ))
            }
        };
        let mut header = [0u8; NVCS_HEADER_LEN];
        header[0..4].copy_from_slice(&NVCS_MAGIC);
        header[4] = self.mu as u8;
        header[5] = self.policy.code();
        header[6..8].copy_from_slice(&self.rho_num.to_le_bytes());
        header[8..10].copy_from_slice(&self.rho_den.to_le_bytes());
        header[10..14].copy_from_slice(&(self.cin as u32).to_le_bytes());
        header[14..18].copy_from_slice(&(self.cout as u32).to_le_bytes());
        header[18] = fmt.total_bits();
        header[19] = fmt.fraction_bits();
        // bytes 20..24 stay zero (reserved padding)
        w.write_all(&header)?;
        for (idx, vals) in self.indices.iter().zip(codes) {
            w.write_all(&(idx.len() as u16).to_le_bytes())?;
            w.write_all(idx)?;
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Deserializes from the `NVCS` container, revalidating every invariant.
    pub fn read_nvcs<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; NVCS_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("NVCS header truncated: {e}")))?;
        if header[0..4] != NVCS_MAGIC {
            return Err(Error::Format("bad magic, expected NVCS".into()));
        }
        let mu = header[4] as usize;
        let policy = MaskPolicy::from_code(header[5])?;
        let rho_num = u16::from_le_bytes([header[6], header[7]]);
        let rho_den = u16::from_le_bytes([header[8], header[9]]);
        let cin = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let cout = u32::from_le_bytes(header[14..18].try_into().unwrap()) as usize;
        let fmt = FxpFormat::new(header[18], header[19], true)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut off = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if off + n > rest.len() {
                return Err(Error::Format("NVCS payload truncated".into()));
            }
            let s = &rest[off..off + n];
            off += n;
            Ok(s)
        };
        let mut indices = Vec::with_capacity(cin * cout);
        let mut codes = Vec::with_capacity(cin * cout);
        for _ in 0..cin * cout {
            let nnz = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            indices.push(take(nnz)?.to_vec());
            let vals = take(nnz * 4)?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            codes.push(vals);
        }
        if off != rest.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after NVCS payload",
                rest.len() - off
            )));
        }
        let bank = Self {
            mu,
            cin,
            cout,
            rho_num,
            rho_den,
            policy,
            indices,
            values: BankValues::Fxp { fmt, codes },
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf = Vec::new();
        self.write_nvcs(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_nvcs(bytes.as_slice())
    }
}

/// Transforms, scores, masks, and compresses a layer's spatial weights
/// (`(cout, cin, k, k)`, real or fixed-point) into a sparse bank.
///
/// Real weights produce a real-valued bank. Fixed-point weights produce a
/// bank of exact transform-domain codes: the weight transform is evaluated
/// as `(2^e·G)·W·(2^e·G)ᵀ`, integer by construction, so the stored values
/// carry `fraction_bits + 2e` fraction bits and lose nothing. Scores use
/// the dequantized values, which ranks identically.
pub fn build_bank(
    ts: &TransformSet,
    weights: &Tensor,
    rho_num: u16,
    rho_den: u16,
    policy: MaskPolicy,
) -> Result<PrunedBank> {
    if rho_den == 0 || rho_num > rho_den {
        return Err(Error::Invalid(format!(
            "pruning ratio {rho_num}/{rho_den} outside [0, 1]"
        )));
    }
    let rho = rho_num as f64 / rho_den as f64;
    let ws = weights.shape();
    let (k, mu) = (ts.k(), ts.mu());
    if ws.rows != k || ws.cols != k {
        return Err(Error::Shape(format!(
            "weights are {}x{}, transform expects {k}x{k}",
            ws.rows, ws.cols
        )));
    }
    if mu * mu > u8::MAX as usize + 1 {
        return Err(Error::Invalid(format!(
            "transform edge {mu} needs flat indices beyond u8"
        )));
    }
    let (cout, cin) = (ws.batch, ws.channels);
    let q = importance_matrix(ts);

    // Transform every kernel. Real patches always; exact integer codes too
    // when the weights are fixed-point.
    let mut e_real: Vec<TransformedPatch> = Vec::with_capacity(cout * cin);
    let mut e_codes: Vec<Vec<i64>> = Vec::new();
    let mut code_fmt: Option<FxpFormat> = None;
    for oc in 0..cout {
        for ic in 0..cin {
            let mut kernel_real = vec![0.0; k * k];
            for a in 0..k {
                for d in 0..k {
                    kernel_real[a * k + d] = weights.real_value(oc, ic, a, d);
                }
            }
            if let Some(wfmt) = weights.fxp_format() {
                let mut kernel_codes = vec![0i64; k * k];
                for a in 0..k {
                    for d in 0..k {
                        kernel_codes[a * k + d] = weights.get_code(oc, ic, a, d)? as i64;
                    }
                }
                let (codes, extra) = ts.weight_transform_codes(&kernel_codes)?;
                if code_fmt.is_none() {
                    // Transform-domain values can outgrow the spatial format:
                    // widen by 2·extra+2 integer bits (covers the worst-case
                    // row-sum growth of both builtin transforms).
                    code_fmt = Some(FxpFormat::new(
                        (wfmt.total_bits() + 2 * extra + 2).min(32),
                        wfmt.fraction_bits() + extra,
                        true,
                    )?);
                }
                let fmt = code_fmt.unwrap();
                if let Some(bad) = codes.iter().find(|&&c| !fmt.contains(c)) {
                    return Err(Error::Numeric(format!(
                        "transform-domain value code {bad} overflows the widened format"
                    )));
                }
                // Dequantize the exact codes so scores and values agree.
                let data = codes.iter().map(|&c| fmt.dequantize_value(c)).collect();
                e_real.push(TransformedPatch {
                    edge: mu,
                    provenance: Provenance::WeightDomain,
                    data,
                });
                e_codes.push(codes);
            } else {
                e_real.push(ts.weight_transform(&kernel_real)?);
            }
        }
    }

    // Masks.
    let masks: Vec<SparsityMask> = match policy {
        MaskPolicy::PerKernel => e_real
            .iter()
            .map(|e| make_mask(e, &q, rho))
            .collect::<Result<_>>()?,
        MaskPolicy::SharedAcrossChannels => vec![make_shared_mask(&e_real, &q, rho)?],
    };
    let mask_for = |slot: usize| -> &SparsityMask {
        match policy {
            MaskPolicy::PerKernel => &masks[slot],
            MaskPolicy::SharedAcrossChannels => &masks[0],
        }
    };

    // Compress.
    let mut indices = Vec::with_capacity(cout * cin);
    let mut vals_real: Vec<Vec<f64>> = Vec::new();
    let mut vals_fxp: Vec<Vec<i32>> = Vec::new();
    for slot in 0..cout * cin {
        let kept = mask_for(slot).kept_indices();
        if let Some(codes) = e_codes.get(slot) {
            vals_fxp.push(kept.iter().map(|&i| codes[i as usize] as i32).collect());
        } else {
            vals_real.push(kept.iter().map(|&i| e_real[slot].data[i as usize]).collect());
        }
        indices.push(kept);
    }
    let values = match code_fmt {
        Some(fmt) => BankValues::Fxp {
            fmt,
            codes: vals_fxp,
        },
        None => BankValues::Real(vals_real),
    };
    let bank = SparseKernelBank {
        mu,
        cin,
        cout,
        rho_num,
        rho_den,
        policy,
        indices,
        values,
    };
    bank.validate()?;
    Ok(PrunedBank { bank, masks })
}

/// Sparse tile product on reals: `U[idx] = value·Y[idx]` at surviving
/// positions, zero elsewhere. Equivalent to `decompress ⊙ Y`, but touches
/// only the populated cells — this is the multiplication the hardware
/// actually performs.
pub fn sparse_tile(
    indices: &[u8],
    values: &[f64],
    y: &TransformedPatch,
) -> Result<TransformedPatch> {
    if y.provenance != Provenance::InputDomain {
        return Err(Error::Invalid(format!(
            "sparse tile expects an input-domain patch, got {:?}",
            y.provenance
        )));
    }
    if indices.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} indices vs {} values",
            indices.len(),
            values.len()
        )));
    }
    let mut data = vec![0.0; y.data.len()];
    for (&i, &v) in indices.iter().zip(values) {
        let i = i as usize;
        if i >= data.len() {
            return Err(Error::Invalid(format!("sparse index {i} outside patch")));
        }
        data[i] = v * y.data[i];
    }
    Ok(TransformedPatch {
        edge: y.edge,
        provenance: Provenance::ProductDomain,
        data,
    })
}

/// Sparse tile product on integer codes; same contract as [`sparse_tile`].
pub fn sparse_tile_codes(indices: &[u8], value_codes: &[i32], y: &[i64]) -> Result<Vec<i64>> {
    if indices.len() != value_codes.len() {
        return Err(Error::Shape(format!(
            "{} indices vs {} values",
            indices.len(),
            value_codes.len()
        )));
    }
    let mut out = vec![0i64; y.len()];
    for (&i, &v) in indices.iter().zip(value_codes) {
        let i = i as usize;
        if i >= y.len() {
            return Err(Error::Invalid(format!("sparse index {i} outside patch")));
        }
        out[i] = v as i64 * y[i];
    }
    Ok(out)
}
