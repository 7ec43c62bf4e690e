//! FALCON's CDT discrete Gaussian sampler (`mkgauss`), reproduced bit for bit,
//! with every secret-dependent mask recorded as it is computed.
//!
//! All arithmetic is 64-bit two's complement with wrapping subtraction, as in the
//! C reference. The two values that leak are the inner-loop mask `-(t & (f ^ 1))`
//! and the conditional-negation mask `-neg`; both are always `0` or `!0`.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::words::{ScriptedWords, WordSource, WordStream};

const MSB: u64 = 1 << 63;

/// FALCON's `gauss_1024_12289` table as shipped in `data/`.
pub const FALCON_TABLE_TEXT: &str = include_str!("../data/gauss_1024_12289.txt");

/// Default NTRU modulus.
pub const FALCON_Q: u32 = 12289;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("CDT table needs at least 2 entries, got {0}")]
    TableTooShort(usize),
    #[error("CDT entry {index} has its top bit set")]
    TableMsbSet { index: usize },
    #[error("CDT entries must be non-increasing from index 1 (entry {index} exceeds entry {})", index - 1)]
    TableNotMonotone { index: usize },
    #[error("CDT table line {line}: {message}")]
    TableParse { line: usize, message: String },
    #[error("cannot read CDT table {path}: {source}")]
    TableIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("logn must lie in [1, 10], got {0}")]
    InvalidLogn(u32),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("forced iteration cannot be realized with this table: {0}")]
    ForcingUnsatisfiable(String),
}

/// Cumulative distribution table driving the inner loop.
///
/// Entry 0 is compared against the first draw (it decides the `x = 0` case); entries
/// `1..` are compared against the second draw and must be non-increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaussCdtTable {
    entries: Vec<u64>,
}

impl GaussCdtTable {
    pub fn new(entries: Vec<u64>) -> Result<Self, SamplerError> {
        if entries.len() < 2 {
            return Err(SamplerError::TableTooShort(entries.len()));
        }
        if let Some(index) = entries.iter().position(|&e| e & MSB != 0) {
            return Err(SamplerError::TableMsbSet { index });
        }
        if let Some(pos) = entries[1..].windows(2).position(|w| w[0] < w[1]) {
            return Err(SamplerError::TableNotMonotone { index: pos + 2 });
        }
        Ok(Self { entries })
    }

    /// FALCON's 27-entry reference table.
    pub fn falcon() -> Self {
        Self::parse(FALCON_TABLE_TEXT).expect("shipped table is valid")
    }

    /// One unsigned decimal per line; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, SamplerError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let value = line
                .parse::<u64>()
                .map_err(|e| SamplerError::TableParse { line: i + 1, message: format!("{line:?}: {e}") })?;
            entries.push(value);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, SamplerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SamplerError::TableIo { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of inner-loop iterations per outer iteration.
    pub fn inner_count(&self) -> usize {
        self.entries.len() - 1
    }
}

/// Degree and loop bounds for one FALCON parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerParams {
    pub logn: u32,
    pub q: u32,
}

impl SamplerParams {
    pub fn new(logn: u32) -> Result<Self, SamplerError> {
        if !(1..=10).contains(&logn) {
            return Err(SamplerError::InvalidLogn(logn));
        }
        Ok(Self { logn, q: FALCON_Q })
    }

    pub fn n(&self) -> usize {
        1 << self.logn
    }

    /// Outer loop bound `g = 2^(10 - logn)` of the reference code.
    pub fn outer_count(&self) -> usize {
        1 << (10 - self.logn)
    }
}

/// Ground truth for one outer iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationLeakRecord {
    pub outer_index: usize,
    /// Value of `-neg`.
    pub neg_mask: u64,
    /// Values of `-(t & (f ^ 1))` for `k = 1..table_len`.
    pub inner_masks: Vec<u64>,
    /// `v` before the conditional negation.
    pub v_value: u32,
    /// `v` after `(v ^ -neg) + neg`.
    pub signed_v: i32,
}

impl IterationLeakRecord {
    pub fn neg_bit(&self) -> bool {
        self.neg_mask != 0
    }

    pub fn inner_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.inner_masks.iter().map(|&m| m != 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretCoefficient {
    pub value: i32,
    pub leaks: Vec<IterationLeakRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    F,
    G,
}

impl Role {
    pub fn index(self) -> u32 {
        match self {
            Role::F => 0,
            Role::G => 1,
        }
    }

    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(Role::F),
            1 => Some(Role::G),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::F => "f",
            Role::G => "g",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretPolynomial {
    pub role: Role,
    pub coefficients: Vec<SecretCoefficient>,
}

impl SecretPolynomial {
    pub fn values(&self) -> Vec<i32> {
        self.coefficients.iter().map(|c| c.value).collect()
    }
}

/// `-(x >> 63)`: all ones when the top bit of `x` is set, zero otherwise.
#[inline]
pub fn msb_mask(x: u64) -> u64 {
    (x >> 63).wrapping_neg()
}

/// One call of `mkgauss`.
pub fn sample_coefficient<W: WordStream>(
    source: &mut W,
    params: &SamplerParams,
    table: &GaussCdtTable,
) -> Result<SecretCoefficient, SamplerError> {
    let cdt = table.entries();
    if cdt.len() < 2 {
        return Err(SamplerError::TableTooShort(cdt.len()));
    }
    let outer = params.outer_count();
    let mut val: i32 = 0;
    let mut leaks = Vec::with_capacity(outer);
    for u in 0..outer {
        let mut r = source.next_word();
        let neg = r >> 63;
        r &= !MSB;
        let mut f = r.wrapping_sub(cdt[0]) >> 63;
        let mut v: u64 = 0;
        let r = source.next_word() & !MSB;
        let mut inner_masks = Vec::with_capacity(cdt.len() - 1);
        for (k, &threshold) in cdt.iter().enumerate().skip(1) {
            let t = (r.wrapping_sub(threshold) >> 63) ^ 1;
            let mask = (t & (f ^ 1)).wrapping_neg();
            inner_masks.push(mask);
            v |= (k as u64) & mask;
            f |= t;
        }
        let neg_mask = neg.wrapping_neg();
        let v_value = v as u32;
        let signed_v = (v_value ^ neg_mask as u32).wrapping_add(neg as u32) as i32;
        val = val.wrapping_add(signed_v);
        leaks.push(IterationLeakRecord { outer_index: u, neg_mask, inner_masks, v_value, signed_v });
    }
    Ok(SecretCoefficient { value: val, leaks })
}

/// Draws `n` coefficients of `f` then `n` of `g` from one word stream.
pub fn generate_polynomials(
    seed: u64,
    params: &SamplerParams,
    table: &GaussCdtTable,
) -> Result<(SecretPolynomial, SecretPolynomial), SamplerError> {
    let mut source = WordSource::new(seed);
    let mut draw = |role| -> Result<SecretPolynomial, SamplerError> {
        let coefficients =
            (0..params.n()).map(|_| sample_coefficient(&mut source, params, table)).collect::<Result<Vec<_>, _>>()?;
        Ok(SecretPolynomial { role, coefficients })
    };
    let f = draw(Role::F)?;
    let g = draw(Role::G)?;
    Ok((f, g))
}

/// Per-coefficient standard deviation `1.17 * sqrt(q) / sqrt(2n)`.
pub fn sigma_fg(q: f64, n: f64) -> Result<f64, SamplerError> {
    if !(q > 0.0 && n > 0.0) || !q.is_finite() || !n.is_finite() {
        return Err(SamplerError::Domain(format!("q = {q}, n = {n} must be positive")));
    }
    Ok(1.17 * q.sqrt() / (2.0 * n).sqrt())
}

/// Desired control flow for one outer iteration of a profiling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForcedIteration {
    /// `Some(k)`: the inner mask fires at iteration `k` (1-based). `None`: no inner mask fires.
    pub fire_at: Option<usize>,
    /// Forces the sign bit when set; drawn from the stream otherwise.
    pub neg: Option<bool>,
}

fn pick_in(lo: u64, hi: u64, word: u64) -> u64 {
    debug_assert!(lo < hi);
    lo + word % (hi - lo)
}

/// Chooses the two `r` words that steer an outer iteration into `forced`.
fn forced_words<W: WordStream>(
    source: &mut W,
    table: &GaussCdtTable,
    forced: &ForcedIteration,
) -> Result<[u64; 2], SamplerError> {
    let cdt = table.entries();
    let first_draw = source.next_word();
    let neg = forced.neg.unwrap_or(first_draw & MSB != 0);
    let r1 = match forced.fire_at {
        // f = 1 needs r < cdt[0]
        None if cdt[0] == 0 => {
            return Err(SamplerError::ForcingUnsatisfiable("entry 0 is zero, so some inner mask always fires".into()))
        }
        None => pick_in(0, cdt[0], first_draw),
        Some(_) => pick_in(cdt[0], MSB, first_draw),
    };
    let second_draw = source.next_word();
    let r2 = match forced.fire_at {
        None => second_draw & !MSB,
        Some(k) if k == 0 || k >= cdt.len() => {
            return Err(SamplerError::ForcingUnsatisfiable(format!("inner index {k} outside 1..{}", cdt.len() - 1)))
        }
        Some(k) => {
            let hi = if k == 1 { MSB } else { cdt[k - 1] };
            if cdt[k] >= hi {
                return Err(SamplerError::ForcingUnsatisfiable(format!("empty interval for inner index {k}")));
            }
            pick_in(cdt[k], hi, second_draw)
        }
    };
    Ok([r1 | if neg { MSB } else { 0 }, r2])
}

/// Runs the unmodified sampler on `r` values chosen so that the listed outer
/// iterations follow `plan`; iterations without an entry draw freely.
pub fn sample_coefficient_forced<W: WordStream>(
    source: &mut W,
    params: &SamplerParams,
    table: &GaussCdtTable,
    plan: &[Option<ForcedIteration>],
) -> Result<SecretCoefficient, SamplerError> {
    let outer = params.outer_count();
    let mut words = Vec::with_capacity(2 * outer);
    for u in 0..outer {
        match plan.get(u).copied().flatten() {
            Some(forced) => words.extend(forced_words(source, table, &forced)?),
            None => {
                words.push(source.next_word());
                words.push(source.next_word());
            }
        }
    }
    sample_coefficient(&mut ScriptedWords::new(&words), params, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_table() -> GaussCdtTable {
        GaussCdtTable::new(vec![1 << 61, 1 << 62, 1 << 60, 1 << 58, 0]).unwrap()
    }

    #[test]
    fn msb_mask_examples() {
        assert_eq!(msb_mask(0), 0);
        assert_eq!(msb_mask(1 << 63), u64::MAX);
        assert_eq!(msb_mask((1 << 63) - 1), 0);
    }

    #[test]
    fn falcon_table_shape() {
        let t = GaussCdtTable::falcon();
        assert_eq!(t.len(), 27);
        assert_eq!(t.inner_count(), 26);
        assert_eq!(t.entries()[0], 1_283_868_770_400_643_928);
        assert_eq!(t.entries()[26], 0);
    }

    #[test]
    fn table_validation() {
        assert!(matches!(GaussCdtTable::new(vec![5]), Err(SamplerError::TableTooShort(1))));
        assert!(matches!(GaussCdtTable::new(vec![1, 1 << 63]), Err(SamplerError::TableMsbSet { index: 1 })));
        assert!(matches!(GaussCdtTable::new(vec![1, 5, 6]), Err(SamplerError::TableNotMonotone { index: 2 })));
        // entry 0 is a separate threshold and may be below entry 1
        assert!(GaussCdtTable::new(vec![1, 5, 4]).is_ok());
    }

    #[test]
    fn table_parse_handles_comments_and_errors() {
        let t = GaussCdtTable::parse("# header\n10  # ten\n\n  7\n3\n").unwrap();
        assert_eq!(t.entries(), &[10, 7, 3]);
        match GaussCdtTable::parse("10\nx\n") {
            Err(SamplerError::TableParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(GaussCdtTable::load(Path::new("/nonexistent/table.txt")), Err(SamplerError::TableIo { .. })));
    }

    #[test]
    fn params_loop_bounds() {
        let p = SamplerParams::new(9).unwrap();
        assert_eq!(p.outer_count(), 2);
        assert_eq!(p.n(), 512);
        assert_eq!(SamplerParams::new(10).unwrap().outer_count(), 1);
        assert!(SamplerParams::new(0).is_err());
        assert!(SamplerParams::new(11).is_err());
    }

    #[test]
    fn small_r_gives_zero() {
        // r below every threshold: f starts at 1 (x = 0 path) and stays latched
        let table = GaussCdtTable::new(vec![1 << 62, 1 << 61, 1 << 60, 1]).unwrap();
        let words = [0u64];
        let mut src = ScriptedWords::new(&words);
        let c = sample_coefficient(&mut src, &SamplerParams::new(9).unwrap(), &table).unwrap();
        assert_eq!(c.value, 0);
        for leak in &c.leaks {
            assert_eq!(leak.neg_mask, 0);
            assert!(leak.inner_masks.iter().all(|&m| m == 0));
        }
    }

    #[test]
    fn forced_iterations_follow_plan() {
        let table = GaussCdtTable::falcon();
        let params = SamplerParams::new(9).unwrap();
        let mut src = WordSource::new(11);
        for k in 1..=26 {
            for neg in [false, true] {
                let plan = [Some(ForcedIteration { fire_at: Some(k), neg: Some(neg) }), None];
                let c = sample_coefficient_forced(&mut src, &params, &table, &plan).unwrap();
                let leak = &c.leaks[0];
                assert_eq!(leak.v_value as usize, k);
                assert_eq!(leak.neg_bit(), neg);
                assert!(leak.inner_masks[k - 1] == u64::MAX);
            }
        }
        let plan = [Some(ForcedIteration { fire_at: None, neg: Some(true) })];
        let c = sample_coefficient_forced(&mut src, &params, &table, &plan).unwrap();
        assert_eq!(c.leaks[0].v_value, 0);
        assert_eq!(c.leaks[0].signed_v, 0);
    }

    #[test]
    fn forcing_rejects_impossible_plans() {
        let table = GaussCdtTable::new(vec![0, 8, 8, 1]).unwrap();
        let params = SamplerParams::new(10).unwrap();
        let mut src = WordSource::new(1);
        let none = [Some(ForcedIteration { fire_at: None, neg: None })];
        assert!(sample_coefficient_forced(&mut src, &params, &table, &none).is_err());
        let empty = [Some(ForcedIteration { fire_at: Some(2), neg: None })];
        assert!(sample_coefficient_forced(&mut src, &params, &table, &empty).is_err());
        let out_of_range = [Some(ForcedIteration { fire_at: Some(4), neg: None })];
        assert!(sample_coefficient_forced(&mut src, &params, &table, &out_of_range).is_err());
    }

    #[test]
    fn polynomials_have_expected_shape() {
        let params = SamplerParams::new(9).unwrap();
        let table = GaussCdtTable::falcon();
        let (f, g) = generate_polynomials(42, &params, &table).unwrap();
        assert_eq!(f.coefficients.len(), 512);
        assert_eq!(g.coefficients.len(), 512);
        assert_eq!(f.role, Role::F);
        assert_eq!(g.role, Role::G);
        for c in f.coefficients.iter().chain(&g.coefficients) {
            assert_eq!(c.leaks.len(), 2);
            assert!(c.leaks.iter().all(|l| l.inner_masks.len() == 26));
        }
        let (f2, g2) = generate_polynomials(42, &params, &table).unwrap();
        assert_eq!(f, f2);
        assert_eq!(g, g2);
        assert_ne!(f.values(), g.values());
    }

    #[test]
    fn sigma_examples() {
        assert!((sigma_fg(4.0, 2.0).unwrap() - 1.17).abs() < 1e-15);
        let s512 = sigma_fg(12289.0, 512.0).unwrap();
        // 1.17 * 110.856... / 32, evaluated independently
        assert!((s512 - 4.053_163_803_3).abs() < 1e-6, "{s512}");
        let s1024 = sigma_fg(12289.0, 1024.0).unwrap();
        assert!((s1024 - s512 / 2f64.sqrt()).abs() < 1e-12);
        assert!(sigma_fg(0.0, 2.0).is_err());
        assert!(sigma_fg(4.0, -1.0).is_err());
    }

    #[test]
    fn falcon_512_moments() {
        let params = SamplerParams::new(9).unwrap();
        let table = GaussCdtTable::falcon();
        let mut src = WordSource::new(2024);
        let n = 100_000;
        let values: Vec<f64> =
            (0..n).map(|_| sample_coefficient(&mut src, &params, &table).unwrap().value as f64).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let sigma = sigma_fg(12289.0, 512.0).unwrap();
        assert!(mean.abs() <= 0.2, "mean {mean}");
        assert!((sd - sigma).abs() <= 0.15 * sigma, "sd {sd} vs {sigma}");
    }

    proptest! {
        #[test]
        fn leak_records_are_self_consistent(seed in any::<u64>(), logn in 8u32..=10) {
            let params = SamplerParams::new(logn).unwrap();
            let table = small_table();
            let mut src = WordSource::new(seed);
            let c = sample_coefficient(&mut src, &params, &table).unwrap();
            let mut total = 0i32;
            for leak in &c.leaks {
                prop_assert!(leak.neg_mask == 0 || leak.neg_mask == u64::MAX);
                prop_assert!(leak.inner_masks.iter().all(|&m| m == 0 || m == u64::MAX));
                prop_assert!(leak.inner_masks.iter().filter(|&&m| m != 0).count() <= 1);
                let v = leak.inner_masks.iter().enumerate()
                    .fold(0u64, |acc, (i, &m)| acc | ((i as u64 + 1) & m));
                prop_assert_eq!(v as u32, leak.v_value);
                prop_assert!((leak.v_value as usize) < table.len());
                let expected = if leak.neg_bit() { -(leak.v_value as i32) } else { leak.v_value as i32 };
                prop_assert_eq!(leak.signed_v, expected);
                total += leak.signed_v;
            }
            prop_assert_eq!(total, c.value);
            prop_assert!(c.value.unsigned_abs() as usize <= params.outer_count() * (table.len() - 1));
        }
    }
}
