//! Single-trace power analysis of FALCON's CDT Gaussian key-generation sampler.
//!
//! The pipeline runs bottom-up:
//!
//! - [`sampler`] reproduces `mkgauss` bit for bit and records the masks that leak;
//! - [`leakage`] turns those records into Hamming-weight power traces;
//! - [`traceio`] stores traces and ground-truth labels;
//! - [`cpa`] and [`profile`] locate the two attack points and fit templates;
//! - [`template`] classifies single samples and holds the success-rate arithmetic;
//! - [`recover`] rebuilds `f` and `g` from one trace per coefficient;
//! - [`cli`] wires it all into the `mkgauss-sca` binary.

pub mod cli;
pub mod cpa;
pub mod leakage;
pub mod profile;
pub mod recover;
pub mod sampler;
pub mod template;
pub mod traceio;
pub mod words;

pub use cpa::{correlation_trace, find_poi, pearson, CorrelationTrace, HypothesisVector};
pub use leakage::{synthesize_campaign, synthesize_trace, Campaign, CampaignConfig, Forcing, LeakModel, TraceLayout};
pub use profile::{profile_attack_point, Anchor, AttackPoint, SiteTemplate};
pub use recover::{apply_neg, reconstruct_coefficient, reconstruct_v, recover_key, RecoveryReport};
pub use sampler::{generate_polynomials, msb_mask, sample_coefficient, sigma_fg, GaussCdtTable, SamplerParams};
pub use template::{
    build_template, full_key_success, gaussian_overlap, per_coefficient_success, success_from_overlap, SuccessModel,
    Template,
};
pub use traceio::{read_label_set, read_trace_set, write_label_set, write_trace_set, LabelSet, TraceSet};
pub use words::{WordSource, WordStream};
