//! Profiling: locate each attack point with CPA and fit a template there.
//!
//! A template is fitted on one anchor site (inner iteration `k` of outer
//! iteration 0, or the `-neg` write of outer iteration 0) and stored with the
//! start of the anchor's block, so it can be replayed on every other site of
//! the same kind by shifting its POIs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::cpa::{correlation_trace, find_poi_in, CorrelationTrace, CpaError, HypothesisVector};
use crate::leakage::TraceLayout;
use crate::template::{build_template, parse_fields, Template, TemplateError};
use crate::traceio::{write_atomically, LabelSet, TraceIoError, TraceSet};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Cpa(#[from] CpaError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackPoint {
    /// `v |= k & -(t & (f ^ 1))`
    Inner,
    /// `v = (v ^ -neg) + neg`
    Neg,
}

impl fmt::Display for AttackPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackPoint::Inner => "inner",
            AttackPoint::Neg => "neg",
        })
    }
}

impl FromStr for AttackPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inner" => Ok(AttackPoint::Inner),
            "neg" => Ok(AttackPoint::Neg),
            other => Err(format!("unknown attack point {other:?}")),
        }
    }
}

/// A template bound to one attack point, with POIs relative to `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteTemplate {
    pub attack_point: AttackPoint,
    /// Start of the anchor block the POIs were measured in.
    pub origin: usize,
    pub template: Template,
    /// Peak |correlation| seen while profiling (informational).
    pub peak_correlation: f64,
}

impl SiteTemplate {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# mkgauss-sca template\n");
        out.push_str(&format!("attack_point={}\n", self.attack_point));
        out.push_str(&format!("origin={}\n", self.origin));
        out.push_str(&format!("peak_correlation={}\n", self.peak_correlation));
        self.template.write_fields(&mut out, "");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TemplateError> {
        let fields = parse_fields(text)?;
        let field = |k: &str| fields.get(k).ok_or_else(|| TemplateError::Parse(format!("missing {k}")));
        Ok(Self {
            attack_point: field("attack_point")?.parse().map_err(TemplateError::Parse)?,
            origin: field("origin")?.parse().map_err(|_| TemplateError::Parse("bad origin".into()))?,
            peak_correlation: field("peak_correlation")?
                .parse()
                .map_err(|_| TemplateError::Parse("bad peak_correlation".into()))?,
            template: Template::read_fields(&fields, "")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceIoError> {
        let text = self.to_text();
        write_atomically(path, |w| std::io::Write::write_all(w, text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TraceIoError::Io { path: path.display().to_string(), source })?;
        Ok(Self::from_text(&text)?)
    }

    /// Offset to add to the POIs to land on the site whose block starts at `block_start`.
    pub fn shift_to(&self, block_start: usize) -> isize {
        block_start as isize - self.origin as isize
    }
}

/// Which site a profiling run is anchored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub attack_point: AttackPoint,
    pub outer: usize,
    /// Inner iteration (1-based); ignored for `Neg`.
    pub k: usize,
}

impl Anchor {
    pub fn inner(k: usize) -> Self {
        Self { attack_point: AttackPoint::Inner, outer: 0, k }
    }

    pub fn neg() -> Self {
        Self { attack_point: AttackPoint::Neg, outer: 0, k: 0 }
    }

    pub fn block(&self, layout: &TraceLayout) -> std::ops::Range<usize> {
        match self.attack_point {
            AttackPoint::Inner => {
                let s = layout.inner_block_start(self.outer, self.k);
                s..s + layout.samples_per_inner
            }
            AttackPoint::Neg => {
                let s = layout.tail_start(self.outer);
                s..s + layout.samples_per_outer_tail
            }
        }
    }

    fn site(&self, labels: &LabelSet) -> usize {
        match self.attack_point {
            AttackPoint::Inner => labels.inner_site(self.outer, self.k),
            AttackPoint::Neg => labels.neg_site(self.outer),
        }
    }

    /// Ground-truth class of the anchor site for every trace.
    pub fn labels(&self, labels: &LabelSet) -> Vec<bool> {
        let site = self.site(labels);
        labels.records.iter().map(|r| r.sites[site]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub site: SiteTemplate,
    pub correlation: CorrelationTrace,
    /// Absolute sample indices of the POIs.
    pub pois: Vec<usize>,
}

pub fn check_labels(traces: &TraceSet, labels: &LabelSet, layout: &TraceLayout) -> Result<(), ProfileError> {
    if layout.trace_len() != traces.n_samples() {
        return Err(ProfileError::LayoutMismatch(format!(
            "layout spans {} samples, traces have {}",
            layout.trace_len(),
            traces.n_samples()
        )));
    }
    if labels.len() != traces.n_traces() {
        return Err(ProfileError::LayoutMismatch(format!(
            "{} label records for {} traces",
            labels.len(),
            traces.n_traces()
        )));
    }
    if labels.outer_count != layout.outer_count || labels.inner_count != layout.inner_count {
        return Err(ProfileError::LayoutMismatch(format!(
            "labels describe {}x{} loops, layout {}x{}",
            labels.outer_count, labels.inner_count, layout.outer_count, layout.inner_count
        )));
    }
    Ok(())
}

/// CPA against the anchor's ground-truth mask Hamming weights, POI search inside
/// the anchor block, and a template at the chosen POIs.
pub fn profile_attack_point(
    traces: &TraceSet,
    labels: &LabelSet,
    layout: &TraceLayout,
    anchor: Anchor,
    poi_count: usize,
) -> Result<ProfileResult, ProfileError> {
    check_labels(traces, labels, layout)?;
    let classes = anchor.labels(labels);
    let hypothesis = HypothesisVector::from_bits(classes.iter().copied());
    let correlation = correlation_trace(traces, &hypothesis)?;
    let block = anchor.block(layout);
    let pois = find_poi_in(&correlation, block.clone(), poi_count.max(1));
    let template = build_template(traces, &classes, &pois)?;
    let peak_correlation = pois.first().map(|&p| correlation.0[p].abs()).unwrap_or(0.0);
    Ok(ProfileResult {
        site: SiteTemplate { attack_point: anchor.attack_point, origin: block.start, template, peak_correlation },
        correlation,
        pois,
    })
}
