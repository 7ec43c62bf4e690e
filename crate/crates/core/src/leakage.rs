//! Hamming-weight power model and campaign synthesis.
//!
//! A trace covers one sampler call. Each outer iteration is laid out as
//! `inner_count` blocks of `samples_per_inner` samples followed by a tail of
//! `samples_per_outer_tail` samples. The inner mask of iteration `k` is written at
//! `leak_offset_inner` inside block `k`; `-neg` is written at `leak_offset_neg`
//! inside the tail. Every other sample is baseline plus noise.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::sampler::{
    generate_polynomials, sample_coefficient_forced, ForcedIteration, GaussCdtTable, IterationLeakRecord, Role,
    SamplerError, SamplerParams, SecretCoefficient, SecretPolynomial,
};
use crate::traceio::{LabelRecord, LabelSet, TraceIoError, TraceSet};
use crate::words::WordSource;

const TAG_KEY: u64 = 1;
const TAG_NOISE: u64 = 2;

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid leak model: {0}")]
    InvalidModel(String),
    #[error("campaign needs at least one key")]
    NoKeys,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
}

/// `sample = beta + alpha * HW + N(0, noise_sigma^2)`, in volts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakModel {
    pub alpha: f64,
    pub beta: f64,
    pub noise_sigma: f64,
}

impl Default for LeakModel {
    fn default() -> Self {
        Self { alpha: 0.030 / 64.0, beta: 0.040, noise_sigma: 0.004 }
    }
}

impl LeakModel {
    pub fn validate(&self) -> Result<(), LeakageError> {
        if !(self.alpha.is_finite() && self.alpha != 0.0) {
            return Err(LeakageError::InvalidModel(format!("alpha = {}", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(LeakageError::InvalidModel(format!("beta = {}", self.beta)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(LeakageError::InvalidModel(format!("noise_sigma = {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Distance between the two class means over the noise deviation.
    pub fn separation(&self) -> f64 {
        (64.0 * self.alpha).abs() / self.noise_sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceLayout {
    pub outer_count: usize,
    pub inner_count: usize,
    pub samples_per_inner: usize,
    pub samples_per_outer_tail: usize,
    pub leak_offset_inner: usize,
    pub leak_offset_neg: usize,
}

impl TraceLayout {
    /// Default 8-sample blocks with the writes at offsets 3 (inner) and 5 (tail).
    pub fn for_sampler(params: &SamplerParams, table: &GaussCdtTable) -> Self {
        Self {
            outer_count: params.outer_count(),
            inner_count: table.inner_count(),
            samples_per_inner: 8,
            samples_per_outer_tail: 8,
            leak_offset_inner: 3,
            leak_offset_neg: 5,
        }
    }

    pub fn validate(&self) -> Result<(), LeakageError> {
        let bad = |m: &str| Err(LeakageError::InvalidLayout(m.to_string()));
        if self.outer_count == 0 || self.inner_count == 0 {
            return bad("loop counts must be positive");
        }
        if self.samples_per_inner == 0 || self.samples_per_outer_tail == 0 {
            return bad("block sizes must be at least 1");
        }
        if self.leak_offset_inner >= self.samples_per_inner {
            return bad("inner leak offset outside its block");
        }
        if self.leak_offset_neg >= self.samples_per_outer_tail {
            return bad("neg leak offset outside the outer tail");
        }
        Ok(())
    }

    pub fn outer_span(&self) -> usize {
        self.inner_count * self.samples_per_inner + self.samples_per_outer_tail
    }

    pub fn trace_len(&self) -> usize {
        self.outer_count * self.outer_span()
    }

    /// First sample of inner block `k` (1-based) in outer iteration `outer`.
    pub fn inner_block_start(&self, outer: usize, k: usize) -> usize {
        outer * self.outer_span() + (k - 1) * self.samples_per_inner
    }

    pub fn tail_start(&self, outer: usize) -> usize {
        outer * self.outer_span() + self.inner_count * self.samples_per_inner
    }

    pub fn inner_leak_index(&self, outer: usize, k: usize) -> usize {
        self.inner_block_start(outer, k) + self.leak_offset_inner
    }

    pub fn neg_leak_index(&self, outer: usize) -> usize {
        self.tail_start(outer) + self.leak_offset_neg
    }

    /// Sample indices that carry secret-dependent power.
    pub fn leak_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.outer_count * (self.inner_count + 1));
        for u in 0..self.outer_count {
            out.extend((1..=self.inner_count).map(|k| self.inner_leak_index(u, k)));
            out.push(self.neg_leak_index(u));
        }
        out
    }

    pub fn check_leaks(&self, leaks: &[IterationLeakRecord]) -> Result<(), LeakageError> {
        if leaks.len() != self.outer_count {
            return Err(LeakageError::LayoutMismatch(format!(
                "{} outer iterations recorded, layout has {}",
                leaks.len(),
                self.outer_count
            )));
        }
        if let Some(l) = leaks.iter().find(|l| l.inner_masks.len() != self.inner_count) {
            return Err(LeakageError::LayoutMismatch(format!(
                "{} inner masks recorded, layout has {}",
                l.inner_masks.len(),
                self.inner_count
            )));
        }
        Ok(())
    }

    pub fn write_metadata(&self, meta: &mut BTreeMap<String, String>) {
        for (k, v) in [
            ("outer_count", self.outer_count),
            ("inner_count", self.inner_count),
            ("samples_per_inner", self.samples_per_inner),
            ("samples_per_outer_tail", self.samples_per_outer_tail),
            ("leak_offset_inner", self.leak_offset_inner),
            ("leak_offset_neg", self.leak_offset_neg),
        ] {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    /// Layout recorded in a trace set's metadata, if complete.
    pub fn from_trace_set(set: &TraceSet) -> Option<Self> {
        Some(Self {
            outer_count: set.meta_parse("outer_count")?,
            inner_count: set.meta_parse("inner_count")?,
            samples_per_inner: set.meta_parse("samples_per_inner")?,
            samples_per_outer_tail: set.meta_parse("samples_per_outer_tail")?,
            leak_offset_inner: set.meta_parse("leak_offset_inner")?,
            leak_offset_neg: set.meta_parse("leak_offset_neg")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub samples: Vec<f32>,
    pub coefficient_index: usize,
    pub noise_seed: u64,
}

#[inline]
pub fn hamming_weight(word: u64) -> u32 {
    word.count_ones()
}

fn fill_trace(
    out: &mut [f32],
    leaks: &[IterationLeakRecord],
    model: &LeakModel,
    layout: &TraceLayout,
    noise_seed: u64,
) {
    let mut level: Vec<f64> = vec![model.beta; out.len()];
    for (u, leak) in leaks.iter().enumerate() {
        for (k, &mask) in (1..).zip(&leak.inner_masks) {
            level[layout.inner_leak_index(u, k)] += model.alpha * hamming_weight(mask) as f64;
        }
        level[layout.neg_leak_index(u)] += model.alpha * hamming_weight(leak.neg_mask) as f64;
    }
    if model.noise_sigma > 0.0 {
        let mut rng = WordSource::new(noise_seed);
        for pair in level.chunks_mut(2) {
            let (a, b) = rng.next_normal_pair();
            pair[0] += model.noise_sigma * a;
            if let Some(x) = pair.get_mut(1) {
                *x += model.noise_sigma * b;
            }
        }
    }
    for (o, l) in out.iter_mut().zip(&level) {
        *o = *l as f32;
    }
}

/// Power trace of one sampler call.
pub fn synthesize_trace(
    leaks: &[IterationLeakRecord],
    model: &LeakModel,
    layout: &TraceLayout,
    noise_seed: u64,
) -> Result<PowerTrace, LeakageError> {
    model.validate()?;
    layout.validate()?;
    layout.check_leaks(leaks)?;
    let mut samples = vec![0f32; layout.trace_len()];
    fill_trace(&mut samples, leaks, model, layout, noise_seed);
    Ok(PowerTrace { samples, coefficient_index: 0, noise_seed })
}

/// Control-flow overrides applied while generating a profiling campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Forcing {
    #[default]
    None,
    /// Outer iteration 0 fires its inner mask at `first` for the first half of the
    /// traces and at `second` for the rest; its `neg` alternates with trace parity.
    Split { first: usize, second: usize },
}

impl Forcing {
    fn plan(&self, trace_index: usize, n_traces: usize) -> Option<ForcedIteration> {
        match *self {
            Forcing::None => None,
            Forcing::Split { first, second } => Some(ForcedIteration {
                fire_at: Some(if trace_index < n_traces / 2 { first } else { second }),
                neg: Some(trace_index.is_multiple_of(2)),
            }),
        }
    }

    fn describe(&self) -> String {
        match self {
            Forcing::None => "none".into(),
            Forcing::Split { first, second } => format!("split:{first}:{second}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub seed: u64,
    pub params: SamplerParams,
    pub table: GaussCdtTable,
    pub model: LeakModel,
    pub layout: TraceLayout,
    pub n_keys: usize,
    pub forcing: Forcing,
}

impl CampaignConfig {
    pub fn new(seed: u64, params: SamplerParams, table: GaussCdtTable, n_keys: usize) -> Self {
        let layout = TraceLayout::for_sampler(&params, &table);
        Self { seed, params, table, model: LeakModel::default(), layout, n_keys, forcing: Forcing::None }
    }

    pub fn traces_per_key(&self) -> usize {
        2 * self.params.n()
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub f: SecretPolynomial,
    pub g: SecretPolynomial,
}

/// Traces are ordered key by key; within a key, the `n` coefficients of `f`
/// precede the `n` coefficients of `g`.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub traces: TraceSet,
    pub labels: LabelSet,
    pub keys: Vec<KeyPair>,
}

impl Campaign {
    pub fn coefficient(&self, trace_index: usize) -> &SecretCoefficient {
        let n = self.keys[0].f.coefficients.len();
        let key = &self.keys[trace_index / (2 * n)];
        let within = trace_index % (2 * n);
        if within < n {
            &key.f.coefficients[within]
        } else {
            &key.g.coefficients[within - n]
        }
    }
}

fn generate_key(config: &CampaignConfig, key_index: usize) -> Result<KeyPair, SamplerError> {
    let key_seed = WordSource::derive(config.seed, TAG_KEY, key_index as u64);
    if config.forcing == Forcing::None {
        let (f, g) = generate_polynomials(key_seed, &config.params, &config.table)?;
        return Ok(KeyPair { f, g });
    }
    let n = config.params.n();
    let total = config.n_keys * 2 * n;
    let mut source = WordSource::new(key_seed);
    let mut draw = |role: Role| -> Result<SecretPolynomial, SamplerError> {
        let coefficients = (0..n)
            .map(|i| {
                let trace_index = key_index * 2 * n + role.index() as usize * n + i;
                let plan = [config.forcing.plan(trace_index, total)];
                sample_coefficient_forced(&mut source, &config.params, &config.table, &plan)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SecretPolynomial { role, coefficients })
    };
    let f = draw(Role::F)?;
    let g = draw(Role::G)?;
    Ok(KeyPair { f, g })
}

fn label_for(labels: &LabelSet, key: usize, role: Role, index: usize, c: &SecretCoefficient) -> LabelRecord {
    let mut sites = Vec::with_capacity(labels.sites_per_record());
    for leak in &c.leaks {
        sites.extend(leak.inner_bits());
        sites.push(leak.neg_bit());
    }
    LabelRecord { key_index: key as u32, role, coefficient_index: index as u32, value: c.value, sites }
}

/// Runs `n_keys` key generations and records one trace per coefficient.
pub fn synthesize_campaign(config: &CampaignConfig) -> Result<Campaign, LeakageError> {
    if config.n_keys == 0 {
        return Err(LeakageError::NoKeys);
    }
    config.model.validate()?;
    config.layout.validate()?;
    let expected = TraceLayout {
        outer_count: config.params.outer_count(),
        inner_count: config.table.inner_count(),
        ..config.layout
    };
    if expected != config.layout {
        return Err(LeakageError::LayoutMismatch(format!(
            "layout loop counts {}x{} do not match sampler {}x{}",
            config.layout.outer_count, config.layout.inner_count, expected.outer_count, expected.inner_count
        )));
    }

    let keys = (0..config.n_keys).into_par_iter().map(|k| generate_key(config, k)).collect::<Result<Vec<_>, _>>()?;

    let n = config.params.n();
    let width = config.layout.trace_len();
    let n_traces = config.n_keys * 2 * n;
    let coefficient = |t: usize| {
        let key = &keys[t / (2 * n)];
        let within = t % (2 * n);
        if within < n {
            &key.f.coefficients[within]
        } else {
            &key.g.coefficients[within - n]
        }
    };
    let mut samples = vec![0f32; n_traces * width];
    samples.par_chunks_mut(width.max(1)).enumerate().for_each(|(t, row)| {
        let noise_seed = WordSource::derive(config.seed, TAG_NOISE, t as u64);
        fill_trace(row, &coefficient(t).leaks, &config.model, &config.layout, noise_seed);
    });

    let mut labels = LabelSet::new(config.layout.outer_count, config.layout.inner_count);
    for (k, key) in keys.iter().enumerate() {
        for poly in [&key.f, &key.g] {
            for (i, c) in poly.coefficients.iter().enumerate() {
                labels.records.push(label_for(&labels, k, poly.role, i, c));
            }
        }
    }

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "mkgauss-sca".into());
    meta.insert("order".into(), "key-major,f-then-g,coefficient".into());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("logn".into(), config.params.logn.to_string());
    meta.insert("q".into(), config.params.q.to_string());
    meta.insert("table_len".into(), config.table.len().to_string());
    meta.insert("n_keys".into(), config.n_keys.to_string());
    meta.insert("alpha".into(), config.model.alpha.to_string());
    meta.insert("beta".into(), config.model.beta.to_string());
    meta.insert("noise_sigma".into(), config.model.noise_sigma.to_string());
    meta.insert("forcing".into(), config.forcing.describe());
    config.layout.write_metadata(&mut meta);

    let traces = TraceSet::new(n_traces, width, samples)?.with_metadata(meta);
    Ok(Campaign { traces, labels, keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TraceLayout {
        TraceLayout {
            outer_count: 2,
            inner_count: 3,
            samples_per_inner: 4,
            samples_per_outer_tail: 5,
            leak_offset_inner: 1,
            leak_offset_neg: 2,
        }
    }

    fn record(outer_index: usize, fire: Option<usize>, neg: bool) -> IterationLeakRecord {
        let inner_masks = (1..=3).map(|k| if Some(k) == fire { u64::MAX } else { 0 }).collect();
        let v = fire.unwrap_or(0) as u32;
        IterationLeakRecord {
            outer_index,
            neg_mask: if neg { u64::MAX } else { 0 },
            inner_masks,
            v_value: v,
            signed_v: if neg { -(v as i32) } else { v as i32 },
        }
    }

    #[test]
    fn hamming_weight_examples() {
        assert_eq!(hamming_weight(0), 0);
        assert_eq!(hamming_weight(u64::MAX), 64);
        assert_eq!(hamming_weight(0xF0F0_F0F0_F0F0_F0F0), 32);
    }

    #[test]
    fn layout_arithmetic() {
        let l = layout();
        assert_eq!(l.outer_span(), 17);
        assert_eq!(l.trace_len(), 34);
        assert_eq!(l.inner_leak_index(0, 1), 1);
        assert_eq!(l.inner_leak_index(1, 3), 17 + 8 + 1);
        assert_eq!(l.neg_leak_index(1), 17 + 12 + 2);
        assert_eq!(l.leak_indices().len(), 8);
        let mut bad = l;
        bad.leak_offset_neg = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_all_zero_masks_are_baseline() {
        let model = LeakModel { noise_sigma: 0.0, ..LeakModel::default() };
        let leaks = [record(0, None, false), record(1, None, false)];
        let trace = synthesize_trace(&leaks, &model, &layout(), 9).unwrap();
        assert!(trace.samples.iter().all(|&s| s == model.beta as f32));
    }

    #[test]
    fn noiseless_single_firing_mask() {
        let model = LeakModel { noise_sigma: 0.0, ..LeakModel::default() };
        let l = layout();
        let leaks = [record(0, Some(2), false), record(1, None, true)];
        let trace = synthesize_trace(&leaks, &model, &l, 9).unwrap();
        let high = (model.beta + 64.0 * model.alpha) as f32;
        for (i, &s) in trace.samples.iter().enumerate() {
            let expected =
                if i == l.inner_leak_index(0, 2) || i == l.neg_leak_index(1) { high } else { model.beta as f32 };
            assert_eq!(s, expected, "sample {i}");
        }
    }

    #[test]
    fn mismatched_records_are_rejected() {
        let model = LeakModel::default();
        let one = [record(0, None, false)];
        assert!(matches!(synthesize_trace(&one, &model, &layout(), 0), Err(LeakageError::LayoutMismatch(_))));
        let mut short = record(1, None, false);
        short.inner_masks.pop();
        assert!(matches!(
            synthesize_trace(&[record(0, None, false), short], &model, &layout(), 0),
            Err(LeakageError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn class_means_match_model() {
        let model = LeakModel::default();
        let l = TraceLayout { outer_count: 1, ..layout() };
        let n = 10_000;
        let (mut lo, mut hi) = (0.0, 0.0);
        for i in 0..n {
            let t = synthesize_trace(&[record(0, Some(1), false)], &model, &l, i).unwrap();
            hi += t.samples[l.inner_leak_index(0, 1)] as f64;
            lo += t.samples[l.inner_leak_index(0, 2)] as f64;
        }
        let tol = 3.0 * model.noise_sigma / (n as f64).sqrt();
        assert!((lo / n as f64 - model.beta).abs() < tol);
        assert!((hi / n as f64 - model.beta - 0.030).abs() < tol);
    }

    #[test]
    fn campaign_shape_and_determinism() {
        let params = SamplerParams::new(9).unwrap();
        let config = CampaignConfig::new(42, params, GaussCdtTable::falcon(), 1);
        let a = synthesize_campaign(&config).unwrap();
        assert_eq!(a.traces.n_traces(), 1024);
        assert_eq!(a.traces.n_samples(), 2 * (26 * 8 + 8));
        assert_eq!(a.labels.len(), 1024);
        let b = synthesize_campaign(&config).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.coefficient(600).value, a.keys[0].g.coefficients[88].value);
        assert_eq!(TraceLayout::from_trace_set(&a.traces), Some(config.layout));
    }

    #[test]
    fn campaign_rejects_bad_config() {
        let params = SamplerParams::new(9).unwrap();
        let mut config = CampaignConfig::new(1, params, GaussCdtTable::falcon(), 0);
        assert!(matches!(synthesize_campaign(&config), Err(LeakageError::NoKeys)));
        config.n_keys = 1;
        config.layout.outer_count = 1;
        assert!(matches!(synthesize_campaign(&config), Err(LeakageError::LayoutMismatch(_))));
    }

    #[test]
    fn split_forcing_controls_first_iteration() {
        let params = SamplerParams::new(10).unwrap();
        let mut config = CampaignConfig::new(5, params, GaussCdtTable::falcon(), 1);
        config.forcing = Forcing::Split { first: 1, second: 3 };
        let c = synthesize_campaign(&config).unwrap();
        let n = c.traces.n_traces();
        for (t, rec) in c.labels.records.iter().enumerate() {
            let fire = if t < n / 2 { 1 } else { 3 };
            for k in 1..=26 {
                assert_eq!(rec.sites[c.labels.inner_site(0, k)], k == fire, "trace {t}");
            }
            assert_eq!(rec.sites[c.labels.neg_site(0)], t % 2 == 0);
        }
    }
}
