//! Rebuilding coefficients and secret polynomials from classified leak sites.
//!
//! Each trace is classified on its own: one sampler call, one trace, no
//! averaging across traces of the same coefficient.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::leakage::TraceLayout;
use crate::profile::{AttackPoint, SiteTemplate};
use crate::sampler::{Role, SamplerParams};
use crate::template::{
    full_key_success, per_coefficient_success, success_from_overlap, template_overlap, SuccessModel, TemplateError,
};
use crate::traceio::{write_atomically, LabelSet, TraceIoError, TraceSet};

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("missing template for the {0} attack point")]
    MissingTemplate(AttackPoint),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
}

/// OR over `k` (1-based) of `k & mask_k`, with `mask_k` all ones where the bit is set.
pub fn reconstruct_v(inner_bits: &[bool]) -> u32 {
    inner_bits.iter().zip(1u32..).fold(0, |v, (&bit, k)| v | (k & (bit as u32).wrapping_neg()))
}

/// `(v ^ -neg) + neg` in 32-bit wrapping arithmetic.
pub fn apply_neg(v: u32, neg_bit: bool) -> i32 {
    let neg = neg_bit as u32;
    (v ^ neg.wrapping_neg()).wrapping_add(neg) as i32
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedIteration {
    pub inner_bits: Vec<bool>,
    pub neg_bit: bool,
    pub inner_margins: Vec<f64>,
    pub neg_margin: f64,
}

impl ClassifiedIteration {
    /// Bits only, with unit confidence.
    pub fn from_bits(inner_bits: Vec<bool>, neg_bit: bool) -> Self {
        let inner_margins = vec![1.0; inner_bits.len()];
        Self { inner_bits, neg_bit, inner_margins, neg_margin: 1.0 }
    }

    /// More than one inner mask classified as firing, which the latch forbids.
    pub fn is_anomalous(&self) -> bool {
        self.inner_bits.iter().filter(|&&b| b).count() > 1
    }

    fn min_margin(&self) -> f64 {
        self.inner_margins.iter().copied().fold(self.neg_margin, f64::min)
    }
}

/// Classified leak sites of one sampler call.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedLeaks {
    pub outers: Vec<ClassifiedIteration>,
}

impl ClassifiedLeaks {
    pub fn anomalies(&self) -> usize {
        self.outers.iter().filter(|o| o.is_anomalous()).count()
    }

    pub fn min_margin(&self) -> f64 {
        self.outers.iter().map(ClassifiedIteration::min_margin).fold(f64::INFINITY, f64::min)
    }
}

pub fn reconstruct_coefficient(classified: &ClassifiedLeaks) -> i32 {
    classified.outers.iter().fold(0i32, |acc, o| acc.wrapping_add(apply_neg(reconstruct_v(&o.inner_bits), o.neg_bit)))
}

/// Classifies every leak site of one trace.
pub fn classify_trace(
    trace: &[f32],
    inner: &SiteTemplate,
    neg: &SiteTemplate,
    layout: &TraceLayout,
) -> ClassifiedLeaks {
    let outers = (0..layout.outer_count)
        .map(|u| {
            let (inner_bits, inner_margins) = (1..=layout.inner_count)
                .map(|k| {
                    let c = inner.template.classify_shifted(trace, inner.shift_to(layout.inner_block_start(u, k)));
                    (c.is_one(), c.margin())
                })
                .unzip();
            let c = neg.template.classify_shifted(trace, neg.shift_to(layout.tail_start(u)));
            ClassifiedIteration { inner_bits, neg_bit: c.is_one(), inner_margins, neg_margin: c.margin() }
        })
        .collect();
    ClassifiedLeaks { outers }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredKey {
    pub f: Vec<i32>,
    pub g: Vec<i32>,
}

impl RecoveredKey {
    pub fn poly(&self, role: Role) -> &[i32] {
        match role {
            Role::F => &self.f,
            Role::G => &self.g,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteCounts {
    pub inner_sites: usize,
    pub inner_ones: usize,
    pub neg_sites: usize,
    pub neg_ones: usize,
    /// Outer iterations with more than one inner mask classified as firing.
    pub anomalies: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correctness {
    /// One flag per trace, in trace order.
    pub coefficient_correct: Vec<bool>,
    pub coefficients_correct: usize,
    pub keys_recovered: usize,
    pub inner_site_errors: usize,
    pub neg_site_errors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub inner_overlap: f64,
    pub neg_overlap: f64,
    pub p_inner: f64,
    pub p_neg: f64,
    pub per_coefficient: f64,
    pub full_key: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub n: usize,
    pub keys: Vec<RecoveredKey>,
    /// Smallest log-likelihood margin over the sites of each trace.
    pub min_margins: Vec<f64>,
    pub counts: SiteCounts,
    pub correctness: Option<Correctness>,
    pub predicted: Prediction,
}

impl RecoveryReport {
    pub fn n_coefficients(&self) -> usize {
        self.keys.len() * 2 * self.n
    }

    pub fn total_sites(&self) -> usize {
        self.counts.inner_sites + self.counts.neg_sites
    }

    /// Fraction of correctly classified sites, when labels were supplied.
    pub fn empirical_site_accuracy(&self) -> Option<f64> {
        let c = self.correctness.as_ref()?;
        let sites = self.total_sites();
        Some(1.0 - (c.inner_site_errors + c.neg_site_errors) as f64 / sites.max(1) as f64)
    }

    pub fn full_recovery(&self) -> Option<bool> {
        self.correctness.as_ref().map(|c| c.keys_recovered == self.keys.len())
    }

    pub fn summary_line(&self) -> Option<String> {
        self.correctness
            .as_ref()
            .map(|c| format!("{}/{} coefficients correct", c.coefficients_correct, self.n_coefficients()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# mkgauss-sca recovery report\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("n", self.n.to_string());
        line("n_keys", self.keys.len().to_string());
        line("coefficients", self.n_coefficients().to_string());
        line("sites.inner", self.counts.inner_sites.to_string());
        line("sites.inner_ones", self.counts.inner_ones.to_string());
        line("sites.neg", self.counts.neg_sites.to_string());
        line("sites.neg_ones", self.counts.neg_ones.to_string());
        line("sites.anomalies", self.counts.anomalies.to_string());
        let min = self.min_margins.iter().copied().fold(f64::INFINITY, f64::min);
        line("confidence.min_margin", min.to_string());
        let p = &self.predicted;
        line("predicted.inner_overlap", p.inner_overlap.to_string());
        line("predicted.neg_overlap", p.neg_overlap.to_string());
        line("predicted.p_inner", p.p_inner.to_string());
        line("predicted.p_neg", p.p_neg.to_string());
        line("predicted.per_coefficient", p.per_coefficient.to_string());
        line("predicted.full_key", p.full_key.to_string());
        if let Some(c) = &self.correctness {
            line("correct.coefficients", c.coefficients_correct.to_string());
            line("correct.keys", c.keys_recovered.to_string());
            line("correct.inner_site_errors", c.inner_site_errors.to_string());
            line("correct.neg_site_errors", c.neg_site_errors.to_string());
            line("empirical.site_accuracy", self.empirical_site_accuracy().unwrap_or(0.0).to_string());
        }
        for (i, key) in self.keys.iter().enumerate() {
            for role in [Role::F, Role::G] {
                let values: Vec<String> = key.poly(role).iter().map(i32::to_string).collect();
                line(&format!("key.{i}.{role}"), values.join(","));
                if let Some(c) = &self.correctness {
                    let start = (i * 2 + role.index() as usize) * self.n;
                    let flags: String = c.coefficient_correct[start..start + self.n]
                        .iter()
                        .map(|&ok| if ok { '1' } else { '0' })
                        .collect();
                    line(&format!("key.{i}.{role}.correct"), flags);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceIoError> {
        let text = self.to_text();
        write_atomically(path, |w| std::io::Write::write_all(w, text.as_bytes()))
    }
}

fn predict(
    inner: &SiteTemplate,
    neg: &SiteTemplate,
    layout: &TraceLayout,
    n: usize,
) -> Result<Prediction, TemplateError> {
    let inner_overlap = template_overlap(&inner.template)?.area;
    let neg_overlap = template_overlap(&neg.template)?.area;
    let p_inner = success_from_overlap(inner_overlap)?;
    let p_neg = success_from_overlap(neg_overlap)?;
    let model = SuccessModel {
        p_inner,
        p_neg,
        inner_count: layout.inner_count as u64,
        outer_count: layout.outer_count as u64,
        n: n as u64,
        poly_count: 2,
    };
    let per_coefficient = per_coefficient_success(&model)?;
    let full_key = full_key_success(per_coefficient, model.n, model.poly_count)?;
    Ok(Prediction { inner_overlap, neg_overlap, p_inner, p_neg, per_coefficient, full_key })
}

fn check_inputs(
    traces: &TraceSet,
    templates: &[&SiteTemplate],
    layout: &TraceLayout,
    params: &SamplerParams,
    labels: Option<&LabelSet>,
) -> Result<(), RecoverError> {
    layout.validate().map_err(|e| RecoverError::LayoutMismatch(e.to_string()))?;
    if layout.trace_len() != traces.n_samples() {
        return Err(RecoverError::LayoutMismatch(format!(
            "layout spans {} samples, traces have {}",
            layout.trace_len(),
            traces.n_samples()
        )));
    }
    if layout.outer_count != params.outer_count() {
        return Err(RecoverError::LayoutMismatch(format!(
            "layout has {} outer iterations, logn = {} needs {}",
            layout.outer_count,
            params.logn,
            params.outer_count()
        )));
    }
    let per_key = 2 * params.n();
    if !traces.n_traces().is_multiple_of(per_key) {
        return Err(RecoverError::LayoutMismatch(format!(
            "{} traces is not a whole number of keys of {per_key} coefficients",
            traces.n_traces()
        )));
    }
    for t in templates {
        let first = t.shift_to(0) + t.template.poi.iter().copied().min().unwrap_or(0) as isize;
        let last_block = match t.attack_point {
            AttackPoint::Inner => layout.inner_block_start(layout.outer_count - 1, layout.inner_count),
            AttackPoint::Neg => layout.tail_start(layout.outer_count - 1),
        };
        let last = t.shift_to(last_block) + t.template.max_poi() as isize;
        if first < 0 || last >= traces.n_samples() as isize {
            return Err(RecoverError::LayoutMismatch(format!(
                "{} template POIs fall outside the trace when replayed on every site",
                t.attack_point
            )));
        }
    }
    if let Some(labels) = labels {
        if labels.len() != traces.n_traces()
            || labels.outer_count != layout.outer_count
            || labels.inner_count != layout.inner_count
        {
            return Err(RecoverError::LayoutMismatch(format!(
                "labels ({} records, {}x{} loops) do not match traces ({} traces, {}x{} loops)",
                labels.len(),
                labels.outer_count,
                labels.inner_count,
                traces.n_traces(),
                layout.outer_count,
                layout.inner_count
            )));
        }
    }
    Ok(())
}

/// Classifies every site of every trace, rebuilds `f` and `g` for each key, and
/// scores the result against `labels` when given.
pub fn recover_key(
    traces: &TraceSet,
    inner: Option<&SiteTemplate>,
    neg: Option<&SiteTemplate>,
    layout: &TraceLayout,
    params: &SamplerParams,
    labels: Option<&LabelSet>,
) -> Result<RecoveryReport, RecoverError> {
    let inner = inner.ok_or(RecoverError::MissingTemplate(AttackPoint::Inner))?;
    let neg = neg.ok_or(RecoverError::MissingTemplate(AttackPoint::Neg))?;
    if inner.attack_point != AttackPoint::Inner {
        return Err(RecoverError::MissingTemplate(AttackPoint::Inner));
    }
    if neg.attack_point != AttackPoint::Neg {
        return Err(RecoverError::MissingTemplate(AttackPoint::Neg));
    }
    check_inputs(traces, &[inner, neg], layout, params, labels)?;

    let classified: Vec<ClassifiedLeaks> =
        (0..traces.n_traces()).into_par_iter().map(|t| classify_trace(traces.trace(t), inner, neg, layout)).collect();
    let values: Vec<i32> = classified.iter().map(reconstruct_coefficient).collect();

    let n = params.n();
    let keys =
        values.chunks(2 * n).map(|c| RecoveredKey { f: c[..n].to_vec(), g: c[n..].to_vec() }).collect::<Vec<_>>();

    let mut counts = SiteCounts::default();
    for c in &classified {
        counts.anomalies += c.anomalies();
        for o in &c.outers {
            counts.inner_sites += o.inner_bits.len();
            counts.inner_ones += o.inner_bits.iter().filter(|&&b| b).count();
            counts.neg_sites += 1;
            counts.neg_ones += o.neg_bit as usize;
        }
    }

    let correctness = labels.map(|labels| {
        let mut inner_site_errors = 0;
        let mut neg_site_errors = 0;
        let coefficient_correct: Vec<bool> = classified
            .iter()
            .zip(&labels.records)
            .zip(&values)
            .map(|((c, rec), &v)| {
                for (u, o) in c.outers.iter().enumerate() {
                    for (k, &bit) in (1..).zip(&o.inner_bits) {
                        inner_site_errors += (bit != rec.sites[labels.inner_site(u, k)]) as usize;
                    }
                    neg_site_errors += (o.neg_bit != rec.sites[labels.neg_site(u)]) as usize;
                }
                v == rec.value
            })
            .collect();
        let coefficients_correct = coefficient_correct.iter().filter(|&&ok| ok).count();
        let keys_recovered = coefficient_correct.chunks(2 * n).filter(|k| k.iter().all(|&ok| ok)).count();
        Correctness { coefficient_correct, coefficients_correct, keys_recovered, inner_site_errors, neg_site_errors }
    });

    Ok(RecoveryReport {
        n,
        keys,
        min_margins: classified.iter().map(ClassifiedLeaks::min_margin).collect(),
        counts,
        correctness,
        predicted: predict(inner, neg, layout, n)?,
    })
}
