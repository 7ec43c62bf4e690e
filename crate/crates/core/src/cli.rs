//! `mkgauss-sca` command line.
//!
//! Exit codes: 0 success, 1 attack ran but the key was not fully recovered,
//! 2 usage, I/O or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::leakage::{synthesize_campaign, CampaignConfig, Forcing, LeakModel, TraceLayout};
use crate::profile::{profile_attack_point, Anchor, SiteTemplate};
use crate::recover::recover_key;
use crate::sampler::{GaussCdtTable, SamplerParams};
use crate::template::{
    full_key_success, gaussian_overlap, parse_fields, per_coefficient_success, success_from_overlap, template_overlap,
    SuccessModel,
};
use crate::traceio::{
    read_label_set, read_trace_set, write_label_set, write_trace_set, LabelSet, TraceSet, LABEL_MAGIC, TRACE_MAGIC,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ATTACK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mkgauss-sca",
    version,
    about = "Single-trace power analysis of FALCON's Gaussian key-generation sampler"
)]
pub struct Cli {
    /// Campaign seed; all randomness derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// log2 of the polynomial degree (9 = FALCON-512, 10 = FALCON-1024).
    #[arg(long, global = true)]
    pub logn: Option<u32>,
    /// CDT table file (defaults to FALCON's gauss_1024_12289).
    #[arg(long, global = true)]
    pub table: Option<PathBuf>,
    /// Output path or prefix.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key=value file pre-populating flags; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate keys, synthesize one trace per coefficient, write <out>.trc and <out>.lbl.
    Simulate(SimulateArgs),
    /// Locate both attack points with CPA and write <out>.inner.tpl and <out>.neg.tpl.
    Profile(ProfileArgs),
    /// Recover f and g from single traces and write a recovery report.
    Attack(AttackArgs),
    /// Print overlap and success-rate analytics.
    Analyze(AnalyzeArgs),
    /// Summarize a trace, label, template or report file.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct LayoutArgs {
    #[arg(long)]
    pub samples_per_inner: Option<usize>,
    #[arg(long)]
    pub samples_per_tail: Option<usize>,
    #[arg(long)]
    pub inner_offset: Option<usize>,
    #[arg(long)]
    pub neg_offset: Option<usize>,
}

impl LayoutArgs {
    fn apply(&self, mut layout: TraceLayout) -> TraceLayout {
        if let Some(v) = self.samples_per_inner {
            layout.samples_per_inner = v;
        }
        if let Some(v) = self.samples_per_tail {
            layout.samples_per_outer_tail = v;
        }
        if let Some(v) = self.inner_offset {
            layout.leak_offset_inner = v;
        }
        if let Some(v) = self.neg_offset {
            layout.leak_offset_neg = v;
        }
        layout
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of independent key generations.
    #[arg(long, default_value_t = 1)]
    pub keys: usize,
    /// Volts per Hamming-weight unit.
    #[arg(long, default_value_t = 0.030 / 64.0)]
    pub alpha: f64,
    /// Baseline level in volts.
    #[arg(long, default_value_t = 0.040)]
    pub beta: f64,
    /// Noise standard deviation in volts.
    #[arg(long, default_value_t = 0.004)]
    pub noise: f64,
    /// Force the first outer iteration: inner mask fires at --force-first for the
    /// first half of the traces and at --force-second for the rest; neg alternates.
    #[arg(long)]
    pub profiling: bool,
    #[arg(long, default_value_t = 1)]
    pub force_first: usize,
    #[arg(long, default_value_t = 3)]
    pub force_second: usize,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Points of interest per attack point.
    #[arg(long, default_value_t = 1)]
    pub poi_count: usize,
    /// Inner iteration used as the anchor for the inner attack point.
    #[arg(long, default_value_t = 1)]
    pub inner_k: usize,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub traces: PathBuf,
    /// Template prefix; reads <prefix>.inner.tpl and <prefix>.neg.tpl.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub inner_template: Option<PathBuf>,
    #[arg(long)]
    pub neg_template: Option<PathBuf>,
    /// Ground truth; enables correctness scoring.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub p_inner: Option<f64>,
    #[arg(long)]
    pub p_neg: Option<f64>,
    /// Inner iterations per outer iteration.
    #[arg(long, default_value_t = 26)]
    pub inner: u64,
    /// Outer iterations per coefficient.
    #[arg(long, default_value_t = 2)]
    pub outer: u64,
    /// Polynomial degree.
    #[arg(long, default_value_t = 512)]
    pub n: u64,
    #[arg(long, default_value_t = 2)]
    pub polys: u64,
    /// Template prefix; p-inner / p-neg default to the templates' overlap-derived rates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, requires_all = ["var0", "mu1", "var1"])]
    pub mu0: Option<f64>,
    #[arg(long)]
    pub var0: Option<f64>,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub var1: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_ERROR, message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::config(e.to_string())
    }
}

/// Outcome of a subcommand: text for stdout plus an exit code.
pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, code: EXIT_OK }
    }
}

const SUBCOMMANDS: [&str; 5] = ["simulate", "profile", "attack", "analyze", "report"];

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Splices `key=value` lines from the config file in after the subcommand, skipping
/// any flag already present on the command line.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let fields = parse_fields(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let Some(sub) = args.iter().position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s))) else {
        return Ok(args);
    };
    let mut extra = Vec::new();
    for (key, value) in fields {
        let flag = key.replace('_', "-");
        if flag == "config" || given.contains(&flag) {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{flag}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{flag}")));
                extra.push(OsString::from(value));
            }
        }
    }
    let mut out = args;
    out.splice(sub + 1..sub + 1, extra);
    Ok(out)
}

fn load_table(path: Option<&Path>) -> Result<GaussCdtTable, CliError> {
    match path {
        Some(p) => Ok(GaussCdtTable::load(p)?),
        None => Ok(GaussCdtTable::falcon()),
    }
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn trace_layout(traces: &TraceSet, overrides: &LayoutArgs, path: &Path) -> Result<TraceLayout, CliError> {
    let base = TraceLayout::from_trace_set(traces)
        .ok_or_else(|| CliError::config(format!("{} carries no layout metadata", path.display())))?;
    Ok(overrides.apply(base))
}

fn percent(p: f64) -> String {
    format!("{:.10}%", 100.0 * p)
}

pub fn run_simulate(cli: &Cli, args: &SimulateArgs) -> Result<Outcome, CliError> {
    let out = cli.out.as_deref().ok_or_else(|| CliError::config("simulate needs --out <prefix>"))?;
    let table = load_table(cli.table.as_deref())?;
    let params = SamplerParams::new(cli.logn.unwrap_or(9))?;
    let mut config = CampaignConfig::new(cli.seed.unwrap_or(0), params, table, args.keys);
    config.model = LeakModel { alpha: args.alpha, beta: args.beta, noise_sigma: args.noise };
    config.layout = args.layout.apply(config.layout);
    if args.profiling {
        config.forcing = Forcing::Split { first: args.force_first, second: args.force_second };
    }
    let campaign = synthesize_campaign(&config)?;
    let (trc, lbl) = (with_extension(out, "trc"), with_extension(out, "lbl"));
    write_trace_set(&campaign.traces, &trc)?;
    write_label_set(&campaign.labels, &lbl)?;

    let l = &config.layout;
    let mut s = String::new();
    let _ = writeln!(s, "traces={}", campaign.traces.n_traces());
    let _ = writeln!(s, "samples_per_trace={}", campaign.traces.n_samples());
    let _ = writeln!(s, "keys={}", config.n_keys);
    let _ = writeln!(
        s,
        "logn={} n={} outer_count={} inner_count={}",
        params.logn,
        params.n(),
        l.outer_count,
        l.inner_count
    );
    let _ = writeln!(
        s,
        "layout samples_per_inner={} samples_per_tail={} inner_offset={} neg_offset={}",
        l.samples_per_inner, l.samples_per_outer_tail, l.leak_offset_inner, l.leak_offset_neg
    );
    let _ = writeln!(
        s,
        "model alpha={} beta={} noise_sigma={} separation={:.3}",
        config.model.alpha,
        config.model.beta,
        config.model.noise_sigma,
        config.model.separation()
    );
    let _ = writeln!(s, "wrote {} and {}", trc.display(), lbl.display());
    Ok(Outcome::ok(s))
}

pub fn run_profile(cli: &Cli, args: &ProfileArgs) -> Result<Outcome, CliError> {
    let out = cli.out.as_deref().ok_or_else(|| CliError::config("profile needs --out <prefix>"))?;
    let traces = read_trace_set(&args.traces)?;
    let labels = read_label_set(&args.labels)?;
    let layout = trace_layout(&traces, &args.layout, &args.traces)?;
    let mut s = String::new();
    for (name, anchor, expected) in [
        ("inner", Anchor::inner(args.inner_k), layout.inner_leak_index(0, args.inner_k)),
        ("neg", Anchor::neg(), layout.neg_leak_index(0)),
    ] {
        let result = profile_attack_point(&traces, &labels, &layout, anchor, args.poi_count)?;
        let path = with_extension(out, &format!("{name}.tpl"));
        result.site.save(&path)?;
        let pois: Vec<String> = result.pois.iter().map(usize::to_string).collect();
        let peaks: Vec<String> = result.pois.iter().map(|&p| format!("{:.6}", result.correlation.0[p])).collect();
        let _ = writeln!(s, "{name}.poi={}", pois.join(","));
        let _ = writeln!(s, "{name}.layout_leak_index={expected}");
        let _ = writeln!(s, "{name}.correlation={}", peaks.join(","));
        let _ = writeln!(s, "{name}.template={}", path.display());
    }
    Ok(Outcome::ok(s))
}

fn template_paths(
    prefix: Option<&Path>,
    inner: Option<&Path>,
    neg: Option<&Path>,
) -> (Option<PathBuf>, Option<PathBuf>) {
    let from_prefix = |ext: &str| prefix.map(|p| with_extension(p, ext));
    (
        inner.map(Path::to_path_buf).or_else(|| from_prefix("inner.tpl")),
        neg.map(Path::to_path_buf).or_else(|| from_prefix("neg.tpl")),
    )
}

pub fn run_attack(cli: &Cli, args: &AttackArgs) -> Result<Outcome, CliError> {
    let traces = read_trace_set(&args.traces)?;
    let layout = trace_layout(&traces, &args.layout, &args.traces)?;
    let logn = match cli.logn {
        Some(l) => l,
        None => {
            traces.meta_parse("logn").ok_or_else(|| CliError::config("traces carry no logn metadata; pass --logn"))?
        }
    };
    let params = SamplerParams::new(logn)?;
    let (inner_path, neg_path) =
        template_paths(args.templates.as_deref(), args.inner_template.as_deref(), args.neg_template.as_deref());
    let inner = inner_path.as_deref().map(SiteTemplate::load).transpose()?;
    let neg = neg_path.as_deref().map(SiteTemplate::load).transpose()?;
    let labels: Option<LabelSet> = args.labels.as_deref().map(read_label_set).transpose()?;

    let report = recover_key(&traces, inner.as_ref(), neg.as_ref(), &layout, &params, labels.as_ref())?;
    let out = cli.out.clone().unwrap_or_else(|| args.traces.with_extension("report"));
    report.save(&out)?;

    let mut s = String::new();
    let _ = writeln!(s, "keys={} coefficients={}", report.keys.len(), report.n_coefficients());
    let _ = writeln!(s, "anomalies={}", report.counts.anomalies);
    let _ = writeln!(s, "predicted per-coefficient success {}", percent(report.predicted.per_coefficient));
    let _ = writeln!(s, "predicted full-key success {}", percent(report.predicted.full_key));
    let mut code = EXIT_OK;
    if let (Some(line), Some(c)) = (report.summary_line(), report.correctness.as_ref()) {
        let _ = writeln!(s, "{line}");
        let _ = writeln!(s, "{}/{} keys fully recovered", c.keys_recovered, report.keys.len());
        if report.full_recovery() != Some(true) {
            code = EXIT_ATTACK_FAILED;
        }
    }
    let _ = writeln!(s, "report={}", out.display());
    Ok(Outcome { stdout: s, code })
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<Outcome, CliError> {
    let mut s = String::new();
    let mut p_inner = args.p_inner;
    let mut p_neg = args.p_neg;

    if let (Some(mu0), Some(var0), Some(mu1), Some(var1)) = (args.mu0, args.var0, args.mu1, args.var1) {
        let ov = gaussian_overlap(mu0, var0, mu1, var1)?;
        let _ = writeln!(s, "pair.overlap_area={:e}", ov.area);
        let _ = writeln!(s, "pair.overlap_fraction_of_total={:e}", ov.fraction_of_total);
        let _ = writeln!(s, "pair.success={:.14}", success_from_overlap(ov.area)?);
    }
    if let Some(prefix) = args.templates.as_deref() {
        for (name, slot) in [("inner", &mut p_inner), ("neg", &mut p_neg)] {
            let t = SiteTemplate::load(&with_extension(prefix, &format!("{name}.tpl")))?;
            let ov = template_overlap(&t.template)?;
            let success = success_from_overlap(ov.area)?;
            let _ = writeln!(s, "{name}.overlap_area={:e}", ov.area);
            let _ = writeln!(s, "{name}.overlap_fraction_of_total={:e}", ov.fraction_of_total);
            let _ = writeln!(s, "{name}.success={:.14} ({})", success, percent(success));
            slot.get_or_insert(success);
        }
    }

    if let (Some(p_inner), Some(p_neg)) = (p_inner, p_neg) {
        let model = SuccessModel {
            p_inner,
            p_neg,
            inner_count: args.inner,
            outer_count: args.outer,
            n: args.n,
            poly_count: args.polys,
        };
        let per = per_coefficient_success(&model)?;
        let _ = writeln!(s, "p_inner={p_inner}");
        let _ = writeln!(s, "p_neg={p_neg}");
        let _ = writeln!(s, "sites_per_coefficient={}x{}+{}", args.inner, args.outer, args.outer);
        let _ = writeln!(s, "per_coefficient_success={per:.14} ({})", percent(per));
        let mut degrees = vec![args.n];
        degrees.extend([512, 1024].into_iter().filter(|d| *d != args.n));
        for n in degrees {
            let full = full_key_success(per, n, args.polys)?;
            let _ = writeln!(s, "full_key_success.n{n}={full:.14} ({})", percent(full));
        }
    } else if s.is_empty() {
        return Err(CliError::config("analyze needs --p-inner and --p-neg, --templates, or --mu0/--var0/--mu1/--var1"));
    }
    Ok(Outcome::ok(s))
}

pub fn run_report(args: &ReportArgs) -> Result<Outcome, CliError> {
    let bytes = std::fs::read(&args.input).map_err(|e| CliError::config(format!("{}: {e}", args.input.display())))?;
    let mut s = String::new();
    if bytes.starts_with(TRACE_MAGIC) {
        let set = TraceSet::from_bytes(&bytes)?;
        let _ = writeln!(s, "kind=traces");
        let _ = writeln!(s, "n_traces={}", set.n_traces());
        let _ = writeln!(s, "n_samples={}", set.n_samples());
        for (k, v) in &set.metadata {
            let _ = writeln!(s, "meta.{k}={v}");
        }
    } else if bytes.starts_with(LABEL_MAGIC) {
        let labels = LabelSet::from_bytes(&bytes)?;
        let ones = labels.records.iter().flat_map(|r| &r.sites).filter(|&&b| b).count();
        let _ = writeln!(s, "kind=labels");
        let _ = writeln!(s, "records={}", labels.len());
        let _ = writeln!(s, "outer_count={}", labels.outer_count);
        let _ = writeln!(s, "inner_count={}", labels.inner_count);
        let _ = writeln!(s, "firing_sites={ones}");
    } else {
        let text = String::from_utf8(bytes).map_err(|_| CliError::config("unrecognized binary file"))?;
        let fields = parse_fields(&text)?;
        if fields.contains_key("attack_point") {
            let _ = writeln!(s, "kind=template");
            let t = SiteTemplate::from_text(&text)?;
            let ov = template_overlap(&t.template)?;
            let _ = writeln!(s, "attack_point={}", t.attack_point);
            let _ = writeln!(s, "poi={:?}", t.template.poi);
            let _ = writeln!(s, "overlap_area={:e}", ov.area);
        } else if fields.contains_key("coefficients") {
            let _ = writeln!(s, "kind=recovery_report");
            for (k, v) in fields.iter().filter(|(k, _)| !k.starts_with("key.")) {
                let _ = writeln!(s, "{k}={v}");
            }
        } else {
            return Err(CliError::config(format!("{} is not a recognized file", args.input.display())));
        }
    }
    Ok(Outcome::ok(s))
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => run_simulate(cli, a),
        Command::Profile(a) => run_profile(cli, a),
        Command::Attack(a) => run_attack(cli, a),
        Command::Analyze(a) => run_analyze(a),
        Command::Report(a) => run_report(a),
    }
}

/// Parses `args` (including the program name) and runs without touching stdout.
pub fn run_captured<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(args).map_err(|e| CliError {
        code: if e.use_stderr() { EXIT_ERROR } else { EXIT_OK },
        message: e.render().to_string(),
    })?;
    execute(&cli)
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    match run_captured(args) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            outcome.code
        }
        Err(e) if e.code == EXIT_OK => {
            print!("{}", e.message);
            EXIT_OK
        }
        Err(e) => {
            let msg = e.message.trim_end();
            if msg.starts_with("error:") {
                eprintln!("{msg}");
            } else {
                eprintln!("error: {msg}");
            }
            e.code
        }
    }
}
