//! Univariate Gaussian templates, log-likelihood classification and the
//! success-rate arithmetic built on class overlap.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::traceio::TraceSet;

/// Lower bound on class variances, in volts².
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Absolute tolerance of the adaptive Simpson integration.
pub const OVERLAP_TOLERANCE: f64 = 1e-15;

const OVERLAP_SPAN: f64 = 12.0;
const MAX_DEPTH: u32 = 48;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("class {class} has {count} profiling traces at least 2 are needed")]
    InsufficientClassData { class: u8, count: usize },
    #[error("no points of interest given")]
    EmptyPoi,
    #[error("point of interest {poi} outside traces of {n_samples} samples")]
    PoiOutOfRange { poi: usize, n_samples: usize },
    #[error("{labels} labels for {traces} traces")]
    LabelMismatch { labels: usize, traces: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed template: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub mu: f64,
    pub var: f64,
    pub count: usize,
}

impl ClassStats {
    /// Mean and unbiased variance (floored) of `values`.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
        Self { mu, var: (ss / (n - 1.0)).max(VARIANCE_FLOOR), count: values.len() }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        log_normal_pdf(x, self.mu, self.var)
    }
}

pub fn log_normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * (std::f64::consts::TAU * var).ln() - d * d / (2.0 * var)
}

/// Per-POI statistics for class 0 (mask zero) and class 1 (mask all ones).
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub poi: Vec<usize>,
    pub classes: Vec<[ClassStats; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub class: u8,
    pub log_likelihood: [f64; 2],
}

impl Classification {
    pub fn is_one(&self) -> bool {
        self.class == 1
    }

    /// Log-likelihood of the chosen class minus the other one (never negative).
    pub fn margin(&self) -> f64 {
        (self.log_likelihood[1] - self.log_likelihood[0]).abs()
    }
}

pub fn build_template(traces: &TraceSet, labels: &[bool], pois: &[usize]) -> Result<Template, TemplateError> {
    if pois.is_empty() {
        return Err(TemplateError::EmptyPoi);
    }
    if labels.len() != traces.n_traces() {
        return Err(TemplateError::LabelMismatch { labels: labels.len(), traces: traces.n_traces() });
    }
    if let Some(&poi) = pois.iter().find(|&&p| p >= traces.n_samples()) {
        return Err(TemplateError::PoiOutOfRange { poi, n_samples: traces.n_samples() });
    }
    for class in [false, true] {
        let count = labels.iter().filter(|&&b| b == class).count();
        if count < 2 {
            return Err(TemplateError::InsufficientClassData { class: class as u8, count });
        }
    }
    let mut poi = Vec::with_capacity(pois.len());
    let mut classes = Vec::with_capacity(pois.len());
    for &p in pois {
        if poi.contains(&p) {
            continue;
        }
        let column = |class: bool| -> Vec<f64> {
            traces.rows().zip(labels).filter(|(_, &b)| b == class).map(|(row, _)| row[p] as f64).collect()
        };
        poi.push(p);
        classes.push([ClassStats::from_values(&column(false)), ClassStats::from_values(&column(true))]);
    }
    Ok(Template { poi, classes })
}

impl Template {
    /// Summed log-likelihoods of `values[i]` (the sample at `poi[i]`); ties go to class 0.
    pub fn classify_values(&self, values: &[f64]) -> Classification {
        let mut ll = [0.0; 2];
        for (stats, &x) in self.classes.iter().zip(values) {
            ll[0] += stats[0].log_pdf(x);
            ll[1] += stats[1].log_pdf(x);
        }
        Classification { class: u8::from(ll[1] > ll[0]), log_likelihood: ll }
    }

    /// Classifies with every POI displaced by `shift` samples.
    pub fn classify_shifted(&self, trace: &[f32], shift: isize) -> Classification {
        let values: Vec<f64> = self
            .poi
            .iter()
            .map(|&p| trace[p.checked_add_signed(shift).expect("shifted POI in range")] as f64)
            .collect();
        self.classify_values(&values)
    }

    pub fn max_poi(&self) -> usize {
        self.poi.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.poi.is_empty() {
            return Err(TemplateError::EmptyPoi);
        }
        if self.poi.len() != self.classes.len() {
            return Err(TemplateError::Parse("POI and class counts differ".into()));
        }
        for (i, p) in self.poi.iter().enumerate() {
            if self.poi[..i].contains(p) {
                return Err(TemplateError::Parse(format!("duplicate POI {p}")));
            }
        }
        for stats in self.classes.iter().flatten() {
            if !(stats.mu.is_finite() && stats.var.is_finite() && stats.var >= VARIANCE_FLOOR) {
                return Err(TemplateError::Parse(format!("invalid class statistics {stats:?}")));
            }
            if stats.count < 2 {
                return Err(TemplateError::Parse(format!("class count {} below 2", stats.count)));
            }
        }
        Ok(())
    }

    /// Appends `prefix`-qualified `key=value` lines.
    pub fn write_fields(&self, out: &mut String, prefix: &str) {
        use std::fmt::Write;
        let _ = writeln!(out, "{prefix}poi_count={}", self.poi.len());
        for (i, (p, stats)) in self.poi.iter().zip(&self.classes).enumerate() {
            let _ = writeln!(out, "{prefix}poi.{i}.index={p}");
            for (c, s) in stats.iter().enumerate() {
                let _ = writeln!(out, "{prefix}poi.{i}.class{c}.mu={}", s.mu);
                let _ = writeln!(out, "{prefix}poi.{i}.class{c}.var={}", s.var);
                let _ = writeln!(out, "{prefix}poi.{i}.class{c}.count={}", s.count);
            }
        }
    }

    pub fn read_fields(fields: &BTreeMap<String, String>, prefix: &str) -> Result<Self, TemplateError> {
        fn get<T: std::str::FromStr>(f: &BTreeMap<String, String>, key: &str) -> Result<T, TemplateError> {
            f.get(key)
                .ok_or_else(|| TemplateError::Parse(format!("missing {key}")))?
                .parse()
                .map_err(|_| TemplateError::Parse(format!("bad value for {key}")))
        }
        let count: usize = get(fields, &format!("{prefix}poi_count"))?;
        let mut template = Template { poi: Vec::with_capacity(count), classes: Vec::with_capacity(count) };
        for i in 0..count {
            template.poi.push(get(fields, &format!("{prefix}poi.{i}.index"))?);
            let stats = |c: usize| -> Result<ClassStats, TemplateError> {
                Ok(ClassStats {
                    mu: get(fields, &format!("{prefix}poi.{i}.class{c}.mu"))?,
                    var: get(fields, &format!("{prefix}poi.{i}.class{c}.var"))?,
                    count: get(fields, &format!("{prefix}poi.{i}.class{c}.count"))?,
                })
            };
            template.classes.push([stats(0)?, stats(1)?]);
        }
        template.validate()?;
        Ok(template)
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_fields(text: &str) -> Result<BTreeMap<String, String>, TemplateError> {
    let mut fields = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| TemplateError::Parse(format!("line {}: missing '='", n + 1)))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(fields)
}

/// Standard normal lower tail `P(Z <= x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    /// `∫ min(p0, p1)`, in `[0, 1]`.
    pub area: f64,
    /// `area / 2`: share of the total area under both curves.
    pub fraction_of_total: f64,
}

fn check_variances(var0: f64, var1: f64) -> Result<(), TemplateError> {
    if !(var0 > 0.0 && var1 > 0.0 && var0.is_finite() && var1.is_finite()) {
        return Err(TemplateError::Domain(format!("variances must be positive, got {var0} and {var1}")));
    }
    Ok(())
}

/// Overlap of `N(mu0, var0)` and `N(mu1, var1)`.
///
/// Equal variances use `2Φ(-|Δμ| / 2σ)`; anything else goes through
/// [`overlap_numeric`].
pub fn gaussian_overlap(mu0: f64, var0: f64, mu1: f64, var1: f64) -> Result<Overlap, TemplateError> {
    check_variances(var0, var1)?;
    let area = if var0 == var1 {
        2.0 * normal_cdf(-(mu1 - mu0).abs() / (2.0 * var0.sqrt()))
    } else {
        return overlap_numeric(mu0, var0, mu1, var1);
    };
    Ok(Overlap { area, fraction_of_total: area / 2.0 })
}

/// Adaptive Simpson integration of `min(p0, p1)` over
/// `[min μ - 12σmax, max μ + 12σmax]`, split at the density crossings.
pub fn overlap_numeric(mu0: f64, var0: f64, mu1: f64, var1: f64) -> Result<Overlap, TemplateError> {
    check_variances(var0, var1)?;
    // work in units of the wider deviation, centred on mu0
    let scale = var0.max(var1).sqrt();
    let (m0, m1) = (0.0, (mu1 - mu0) / scale);
    let (a, b) = (var0 / (scale * scale), var1 / (scale * scale));
    let integrand = |x: f64| log_normal_pdf(x, m0, a).min(log_normal_pdf(x, m1, b)).exp();

    let lo = m0.min(m1) - OVERLAP_SPAN;
    let hi = m0.max(m1) + OVERLAP_SPAN;
    let mut cuts = vec![lo];
    let mut crossings = density_crossings(m0, a, m1, b);
    crossings.sort_by(f64::total_cmp);
    cuts.extend(crossings.into_iter().filter(|x| *x > lo && *x < hi));
    cuts.push(hi);

    let area: f64 = cuts
        .windows(2)
        .map(|w| adaptive_simpson(&integrand, w[0], w[1], OVERLAP_TOLERANCE / (cuts.len() - 1) as f64))
        .sum();
    let area = area.clamp(0.0, 1.0);
    Ok(Overlap { area, fraction_of_total: area / 2.0 })
}

/// Points where the two densities are equal.
fn density_crossings(m0: f64, a: f64, m1: f64, b: f64) -> Vec<f64> {
    if a == b {
        return if m0 == m1 { vec![] } else { vec![0.5 * (m0 + m1)] };
    }
    // b(x-m0)^2 - a(x-m1)^2 + ab ln(a/b) = 0
    let qa = b - a;
    let qb = 2.0 * (a * m1 - b * m0);
    let qc = b * m0 * m0 - a * m1 * m1 + a * b * (a / b).ln();
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return vec![];
    }
    let s = disc.sqrt();
    // numerically stable pair of roots
    let t = -0.5 * (qb + qb.signum() * s);
    let mut roots = Vec::with_capacity(2);
    if t != 0.0 {
        roots.push(qc / t);
        roots.push(t / qa);
    } else {
        roots.push(s / (2.0 * qa));
        roots.push(-s / (2.0 * qa));
    }
    roots
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Overlap between the two classes of a single-POI template (first POI when several).
pub fn template_overlap(template: &Template) -> Result<Overlap, TemplateError> {
    let [c0, c1] = template.classes.first().ok_or(TemplateError::EmptyPoi)?;
    gaussian_overlap(c0.mu, c0.var, c1.mu, c1.var)
}

fn check_probability(name: &str, p: f64) -> Result<(), TemplateError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TemplateError::Domain(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Bayes success under equal priors: `1 - overlap / 2`.
pub fn success_from_overlap(overlap_area: f64) -> Result<f64, TemplateError> {
    check_probability("overlap area", overlap_area)?;
    Ok(1.0 - overlap_area / 2.0)
}

/// `p^e`, accurate for `p` close to 1.
fn pow_prob(p: f64, e: u64) -> f64 {
    if e == 0 {
        1.0
    } else if p == 0.0 {
        0.0
    } else {
        (e as f64 * (p - 1.0).ln_1p()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessModel {
    pub p_inner: f64,
    pub p_neg: f64,
    pub inner_count: u64,
    pub outer_count: u64,
    pub n: u64,
    pub poly_count: u64,
}

impl SuccessModel {
    /// FALCON-512 loop counts: 26 inner iterations, 2 outer iterations, 2 polynomials.
    pub fn falcon512(p_inner: f64, p_neg: f64) -> Self {
        Self { p_inner, p_neg, inner_count: 26, outer_count: 2, n: 512, poly_count: 2 }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        check_probability("p_inner", self.p_inner)?;
        check_probability("p_neg", self.p_neg)
    }
}

/// `p_inner^(inner·outer) · p_neg^outer`.
pub fn per_coefficient_success(model: &SuccessModel) -> Result<f64, TemplateError> {
    model.validate()?;
    Ok(pow_prob(model.p_inner, model.inner_count * model.outer_count) * pow_prob(model.p_neg, model.outer_count))
}

/// `p_coeff^(n · poly_count)`.
pub fn full_key_success(p_coeff: f64, n: u64, poly_count: u64) -> Result<f64, TemplateError> {
    check_probability("p_coeff", p_coeff)?;
    Ok(pow_prob(p_coeff, n * poly_count))
}
