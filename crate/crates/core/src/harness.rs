//! Command orchestration: run configuration, the comparison commands and
//! their CSV reports.
//!
//! Report CSVs start with `#` header lines (command, formula ids, ensemble
//! hash, seed, parameters, check verdicts, one `# generated-unix:` line) and
//! then the fixed columns of [`REPORT_COLUMNS`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::ensemble::{ConditionReport, EnsembleDoc, FiniteEnsemble, LoadedEnsemble, ScalarReference, ScalarReferenceDoc};
use crate::error::{Error, Result};
use crate::rate::{default_samples, lambda_curve, CumulantTable, SpectralCgf};
use crate::rng::RandomStream;
use crate::sampler::{
    estimate_drifts, is_probability, simulate_paths, tilted_simulate, Estimate, Observable, PathObservables,
    PathSpec, Tail, TiltMode, Tracking,
};
use crate::spectral::{perturbed_eigenvalue_check, SolverOptions, SpectralContext, SpectralSolution, S_GUARD};

pub const REPORT_COLUMNS: &str = "formula,n,variant,x,empirical,predicted,stderr,ratio";
pub const TIMESTAMP_PREFIX: &str = "# generated-unix:";
pub const WORKERS_ENV: &str = "CONELAB_WORKERS";
pub const Y_GRID_POINTS: usize = 41;
pub const MIN_COUNT: usize = 1000;
pub const MIN_EXPECTED_HITS: f64 = 50.0;
pub const DEFAULT_RESOLUTION_D2: usize = 1024;
pub const DEFAULT_RESOLUTION_D3: usize = 96;
/// Room kept between the sampled s-range and the solver guard for the
/// difference stencils.
const STENCIL_MARGIN: f64 = 0.2;

/// Test function catalog: `const1`, `coord_<i>` (1-based), `bump`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PhiSpec {
    Const1,
    Coord(usize),
    /// Gaussian bump of width 0.25 centred at the barycenter.
    Bump,
}

impl PhiSpec {
    pub const BUMP_WIDTH: f64 = 0.25;

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            PhiSpec::Const1 => 1.0,
            PhiSpec::Coord(i) => u[i - 1],
            PhiSpec::Bump => {
                let c = 1.0 / u.len() as f64;
                let r2: f64 = u.iter().map(|x| (x - c) * (x - c)).sum();
                (-r2 / (2.0 * Self::BUMP_WIDTH * Self::BUMP_WIDTH)).exp()
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, PhiSpec::Const1)
    }
}

impl Default for PhiSpec {
    fn default() -> Self {
        PhiSpec::Const1
    }
}

impl TryFrom<String> for PhiSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "const1" => Ok(PhiSpec::Const1),
            "bump" => Ok(PhiSpec::Bump),
            _ => match s.strip_prefix("coord_").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) if i >= 1 => Ok(PhiSpec::Coord(i)),
                _ => Err(format!("unknown test function `{s}` (const1, coord_<i>, bump)")),
            },
        }
    }
}

impl From<PhiSpec> for String {
    fn from(p: PhiSpec) -> String {
        match p {
            PhiSpec::Const1 => "const1".into(),
            PhiSpec::Coord(i) => format!("coord_{i}"),
            PhiSpec::Bump => "bump".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LltMode {
    /// Window `[a1, a2]` around `n lambda`.
    #[default]
    Central,
    /// Window shifted by `sigma n l_n`, `l_n = md_scale n^{-1/4}`.
    Moderate,
    /// Window `[a1, a2] + n q` at the tilts in `s_targets`.
    Large,
}

fn default_n_list() -> Vec<usize> {
    vec![64, 256, 1024]
}
fn default_count() -> usize {
    100_000
}
fn default_s_range() -> [f64; 2] {
    [-2.0, 2.0]
}
fn default_s_samples() -> usize {
    41
}
fn default_interval() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_md_scale() -> f64 {
    1.0
}
fn default_n_tail() -> usize {
    200
}
fn default_residual_tol() -> f64 {
    1e-8
}

/// Flat JSON run configuration: the ensemble document fields (or
/// `ensemble_path`) plus harness fields. Unknown keys are kept and warned
/// about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar_reference: Option<ScalarReferenceDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_path: Option<PathBuf>,

    /// Defaults to the all-ones vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Paths per drift estimate; defaults to `count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_count: Option<usize>,
    #[serde(default = "default_n_tail")]
    pub n_tail: usize,
    #[serde(default)]
    pub s_targets: Vec<f64>,
    #[serde(default)]
    pub q_targets: Vec<f64>,
    #[serde(default = "default_s_range")]
    pub s_range: [f64; 2],
    #[serde(default = "default_s_samples")]
    pub s_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub phi: PhiSpec,
    #[serde(default = "default_interval")]
    pub interval: [f64; 2],
    #[serde(default)]
    pub llt_mode: LltMode,
    #[serde(default = "default_md_scale")]
    pub md_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observables: Option<Vec<Observable>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_comparability: Option<f64>,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,

    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    /// Minimal configuration around an ensemble document.
    pub fn from_ensemble(doc: &EnsembleDoc) -> Self {
        let mut cfg = Self::parse_unvalidated("{}").expect("empty config parses");
        cfg.dim = Some(doc.dim);
        cfg.atoms = Some(doc.atoms.clone());
        cfg.probs = Some(doc.probs.clone());
        cfg.scalar_reference = doc.scalar_reference.clone();
        cfg
    }

    fn parse_unvalidated(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::SchemaViolation {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Parses and validates; unknown keys produce warnings.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        for key in cfg.extra.keys() {
            log::warn!("ignoring unknown configuration key `{key}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `ensemble_path` is taken relative to
    /// the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.ensemble_path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.ensemble_path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn schema(path: &str, message: impl Into<String>) -> Error {
        Error::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list[0] == 0 {
            return Err(Self::schema("n_list", "needs at least one positive n"));
        }
        if self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Self::schema("n_list", "must be strictly increasing"));
        }
        if self.count < MIN_COUNT {
            return Err(Self::schema("count", format!("must be at least {MIN_COUNT}")));
        }
        if matches!(self.drift_count, Some(c) if c < MIN_COUNT) {
            return Err(Self::schema("drift_count", format!("must be at least {MIN_COUNT}")));
        }
        if self.n_tail == 0 {
            return Err(Self::schema("n_tail", "must be positive"));
        }
        let [lo, hi] = self.s_range;
        let bound = S_GUARD - STENCIL_MARGIN;
        if !(lo < 0.0 && hi > 0.0 && lo >= -bound && hi <= bound) {
            return Err(Self::schema(
                "s_range",
                format!("must satisfy -{bound} <= lo < 0 < hi <= {bound}"),
            ));
        }
        if self.s_samples < 5 {
            return Err(Self::schema("s_samples", "need at least 5 samples"));
        }
        for (i, s) in self.s_targets.iter().enumerate() {
            if !(s.is_finite() && *s > lo && *s < hi && *s != 0.0) {
                return Err(Self::schema(
                    &format!("s_targets[{i}]"),
                    format!("{s} must be nonzero and inside s_range ({lo}, {hi})"),
                ));
            }
        }
        if !(self.interval[0] < self.interval[1]) {
            return Err(Self::schema("interval", "needs a1 < a2"));
        }
        if !(self.md_scale.is_finite() && self.md_scale > 0.0) {
            return Err(Self::schema("md_scale", "must be positive"));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Self::schema("residual_tol", "must be positive"));
        }
        if self.ensemble_path.is_some() && (self.atoms.is_some() || self.probs.is_some()) {
            return Err(Self::schema("ensemble_path", "give either ensemble_path or inline atoms/probs"));
        }
        Ok(())
    }

    pub fn ensemble_doc(&self) -> Result<EnsembleDoc> {
        if let Some(p) = &self.ensemble_path {
            return EnsembleDoc::from_json(&std::fs::read_to_string(p)?);
        }
        let missing = |field: &str| Self::schema(field, format!("missing field `{field}`"));
        Ok(EnsembleDoc {
            dim: self.dim.ok_or_else(|| missing("dim"))?,
            atoms: self.atoms.clone().ok_or_else(|| missing("atoms"))?,
            probs: self.probs.clone().ok_or_else(|| missing("probs"))?,
            scalar_reference: self.scalar_reference.clone(),
        })
    }

    pub fn ensemble(&self) -> Result<LoadedEnsemble> {
        self.ensemble_doc()?.load()
    }
}

/// One comparison row. For `*-sup` rows `ratio` carries the
/// `sqrt(n)`-scaled discrepancy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub formula: String,
    pub n: usize,
    pub variant: String,
    pub x: f64,
    pub empirical: f64,
    pub predicted: f64,
    pub stderr: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ComparisonReport {
    pub command: String,
    pub formulas: Vec<String>,
    pub ensemble_hash: String,
    pub seed: u64,
    pub params: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.push((key.into(), value.to_string()));
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn row(&mut self, formula: &str, n: usize, variant: &str, x: f64, empirical: f64, predicted: f64, stderr: f64) {
        if !self.formulas.iter().any(|f| f == formula) {
            self.formulas.push(formula.into());
        }
        self.rows.push(ReportRow {
            formula: formula.into(),
            n,
            variant: variant.into(),
            x,
            empirical,
            predicted,
            stderr,
            ratio: empirical / predicted,
        });
    }

    pub fn rows_for<'a>(&'a self, formula: &'a str, variant: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.formula == formula && r.variant == variant)
    }

    /// CSV text; `timestamp` adds the generated-unix header line.
    pub fn render(&self, timestamp: Option<u64>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# command: {}", self.command);
        let _ = writeln!(out, "# formulas: {}", self.formulas.join(" "));
        let _ = writeln!(out, "# ensemble: {}", self.ensemble_hash);
        let _ = writeln!(out, "# seed: {}", self.seed);
        for (k, v) in &self.params {
            let _ = writeln!(out, "# {k}: {v}");
        }
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "# check {}: {verdict} {}", c.name, c.detail);
        }
        if let Some(t) = timestamp {
            let _ = writeln!(out, "{TIMESTAMP_PREFIX} {t}");
        }
        let _ = writeln!(out, "{REPORT_COLUMNS}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                r.formula, r.n, r.variant, r.x, r.empirical, r.predicted, r.stderr, r.ratio
            );
        }
        out
    }
}

pub fn emit_report(report: &ComparisonReport, path: &Path) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, report.render(Some(now)))?;
    Ok(())
}

/// Sizes the global rayon pool from `CONELAB_WORKERS`, if set.
pub fn init_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already initialized: {e}");
        }
    }
}

/// Exit status for an error: 2 for configuration and condition problems,
/// 1 for numerical failures.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NoConvergence { .. }
        | Error::IterationBudgetExceeded { .. }
        | Error::NegativeWeight(_)
        | Error::DerivativeUnstable { .. }
        | Error::OverflowGuard(_) => 1,
        _ => 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Check,
    Spectral,
    Cumulants,
    Edgeworth,
    BerryEsseen,
    Ldp,
    Llt,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Spectral => "spectral",
            Command::Cumulants => "cumulants",
            Command::Edgeworth => "edgeworth",
            Command::BerryEsseen => "berry-esseen",
            Command::Ldp => "ldp",
            Command::Llt => "llt",
        }
    }
}

/// What a command produced: a report, auxiliary files, console text.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub report: ComparisonReport,
    pub files: Vec<(String, String)>,
    pub stdout: String,
    pub exit_code: i32,
}

impl CommandOutput {
    fn from_report(report: ComparisonReport) -> Self {
        let exit_code = if report.passed() { 0 } else { 1 };
        let mut stdout = String::new();
        for c in &report.checks {
            let _ = writeln!(stdout, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        Self {
            report,
            files: Vec::new(),
            stdout,
            exit_code,
        }
    }
}

/// Runs a command and writes `<command>.csv` plus auxiliary files into `out`.
pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let output = match cmd {
        Command::Check => cmd_check(cfg)?,
        Command::Spectral => cmd_spectral(cfg)?,
        Command::Cumulants => cmd_cumulants(cfg)?,
        Command::Edgeworth => cmd_edgeworth(cfg)?,
        Command::BerryEsseen => cmd_berry_esseen(cfg)?,
        Command::Ldp => cmd_ldp(cfg)?,
        Command::Llt => cmd_llt(cfg)?,
    };
    std::fs::create_dir_all(out)?;
    emit_report(&output.report, &out.join(format!("{}.csv", cmd.name())))?;
    for (name, body) in &output.files {
        std::fs::write(out.join(name), body)?;
    }
    Ok(output)
}

/// Ensemble, conditions and (lazily) the spectral context for one run.
struct Setup {
    cfg: RunConfig,
    ens: FiniteEnsemble,
    scalar: Option<ScalarReference>,
    conditions: ConditionReport,
    opts: SolverOptions,
    hash: String,
    f: Vec<f64>,
    v: Vec<f64>,
    ctx: OnceLock<Arc<SpectralContext>>,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let loaded = cfg.ensemble()?;
        let ens = loaded.ensemble;
        let d = ens.dim();
        let vec_or_ones = |x: &Option<Vec<f64>>, name: &str| -> Result<Vec<f64>> {
            let x = x.clone().unwrap_or_else(|| vec![1.0; d]);
            if x.len() != d {
                return Err(RunConfig::schema(name, format!("expected {d} entries, found {}", x.len())));
            }
            if x.iter().any(|c| !(c.is_finite() && *c >= 0.0)) || x.iter().all(|c| *c == 0.0) {
                return Err(RunConfig::schema(name, "must be a nonzero nonnegative vector"));
            }
            Ok(x)
        };
        let f = vec_or_ones(&cfg.f, "f")?;
        let v = vec_or_ones(&cfg.v, "v")?;
        if let PhiSpec::Coord(i) = cfg.phi {
            if i > d {
                return Err(RunConfig::schema("phi", format!("coord_{i} exceeds dimension {d}")));
            }
        }
        let conditions = ens.check_conditions();
        Ok(Self {
            opts: SolverOptions {
                max_comparability: cfg.max_comparability,
                ..SolverOptions::default()
            },
            hash: ens.content_hash(),
            scalar: loaded.scalar_reference,
            conditions,
            ens,
            f,
            v,
            cfg: cfg.clone(),
            ctx: OnceLock::new(),
        })
    }

    fn resolution(&self) -> usize {
        self.cfg.resolution.unwrap_or(match self.ens.dim() {
            2 => DEFAULT_RESOLUTION_D2,
            _ => DEFAULT_RESOLUTION_D3,
        })
    }

    fn context(&self) -> Result<Arc<SpectralContext>> {
        if let Some(c) = self.ctx.get() {
            return Ok(Arc::clone(c));
        }
        let c = SpectralContext::build(&self.ens, self.resolution())?;
        Ok(Arc::clone(self.ctx.get_or_init(|| c)))
    }

    fn solve(&self, s: f64) -> Result<SpectralSolution> {
        self.context()?.solve(s, &self.opts)
    }

    fn table(&self) -> Result<CumulantTable> {
        let src = Arc::new(SpectralCgf {
            ctx: self.context()?,
            opts: self.opts.clone(),
        });
        let [lo, hi] = self.cfg.s_range;
        lambda_curve(src, &default_samples(lo, hi, self.cfg.s_samples))
    }

    fn seed(&self, label: &str) -> u64 {
        RandomStream::new(self.cfg.seed, 0).derive(label).seed()
    }

    fn report(&self, cmd: Command) -> ComparisonReport {
        let mut r = ComparisonReport {
            command: cmd.name().into(),
            ensemble_hash: self.hash.clone(),
            seed: self.cfg.seed,
            ..Default::default()
        };
        r.param("resolution", self.resolution());
        r.param("f", fmt_vec(&self.f));
        r.param("v", fmt_vec(&self.v));
        r
    }

    fn phi(&self) -> impl Fn(&[f64]) -> f64 + '_ {
        move |u: &[f64]| self.cfg.phi.eval(u)
    }

    fn tracking(&self) -> Tracking {
        Tracking {
            product: false,
            endpoint: !self.cfg.phi.is_constant(),
        }
    }
}

fn fmt_vec(x: &[f64]) -> String {
    x.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// `(e^{-s a1} - e^{-s a2}) / s`, continuous at `s = 0`.
pub fn ld_interval_factor(s: f64, a1: f64, a2: f64) -> f64 {
    if s == 0.0 {
        a2 - a1
    } else {
        -(-s * a1).exp() * (-s * (a2 - a1)).exp_m1() / s
    }
}

/// The 41-point grid on `[-3, 3]`.
pub fn y_grid() -> Vec<f64> {
    (0..Y_GRID_POINTS)
        .map(|k| -3.0 + 6.0 * k as f64 / (Y_GRID_POINTS - 1) as f64)
        .collect()
}

/// Kolmogorov distance between the empirical law of `sorted` and `cdf`.
pub fn ks_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0, |acc: f64, (i, &z)| {
        let c = cdf(z);
        acc.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n)
    })
}

fn empirical_cdf(sorted: &[f64], y: f64) -> f64 {
    sorted.partition_point(|z| *z <= y) as f64 / sorted.len() as f64
}

fn standardized(col: &[f64], n: usize, lambda: f64, sigma: f64) -> Vec<f64> {
    let nf = n as f64;
    let mut z: Vec<f64> = col.iter().map(|x| (x - nf * lambda) / (sigma * nf.sqrt())).collect();
    z.sort_by(f64::total_cmp);
    z
}

/// `mean(W phi(G_n.v) 1{hit})` over a (possibly tilted) batch.
fn weighted_indicator(batch: &PathObservables, col: &[f64], hit: impl Fn(f64) -> bool, phi: &PhiSpec) -> Estimate {
    Estimate::from_samples(col.iter().enumerate().map(|(i, &x)| {
        if !hit(x) {
            return 0.0;
        }
        let w = if batch.log_weight.is_empty() {
            1.0
        } else {
            batch.log_weight[i].exp()
        };
        if phi.is_constant() {
            w
        } else {
            w * phi.eval(batch.endpoint(i))
        }
    }))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Each successive `|ratio - 1|` strictly smaller.
fn trend_check(ratios: &[f64]) -> bool {
    ratios.windows(2).all(|w| (w[1] - 1.0).abs() < (w[0] - 1.0).abs())
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn cmd_check(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let c = &setup.conditions;
    let mut report = setup.report(Command::Check);
    report.param("c_full", c.c_full);
    report.param("c_col", c.c_col);
    report.param("epsilon", c.epsilon);
    report.param("nonarithmetic_heuristic", c.nonarithmetic_heuristic);
    report.param("balanced_differences_nonlattice", c.balanced_differences_nonlattice);
    report.check("a1", c.a1_holds(), format!("c = {}", c.c_full));
    report.check("a2", c.a2_holds(), format!("c_col = {}, epsilon = {}", c.c_col, c.epsilon));
    if let Some(cap) = cfg.max_comparability {
        report.check(
            "comparability-cap",
            c.c_col <= cap,
            format!("c_col = {} against cap {cap}", c.c_col),
        );
    }
    let json = serde_json::to_string_pretty(c).expect("condition report serializes");
    let mut out = CommandOutput::from_report(report);
    if out.exit_code != 0 {
        out.exit_code = 2;
    }
    out.stdout = format!(
        "c = {}\nc_col = {}\nepsilon = {}\nnonarithmetic heuristic (rational-ratio test, not a proof) = {}\nbalanced differences non-lattice = {}\n{}",
        c.c_full, c.c_col, c.epsilon, c.nonarithmetic_heuristic, c.balanced_differences_nonlattice, out.stdout
    );
    out.files.push(("conditions.json".into(), json));
    Ok(out)
}

pub fn cmd_spectral(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let mut report = setup.report(Command::Spectral);
    let targets = if cfg.s_targets.is_empty() {
        vec![-1.0, -0.5, 0.5, 1.0]
    } else {
        cfg.s_targets.clone()
    };
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (k, &s) in targets.iter().enumerate() {
        let sol = setup.solve(s)?;
        let mut csv = Vec::new();
        sol.write_csv(&mut csv)?;
        files.push((format!("spectral_s{k}.csv"), String::from_utf8(csv).expect("ascii csv")));
        report.row("eigen-residual", 0, "forward", s, sol.residual, 0.0, f64::NAN);
        report.row("eigen-residual", 0, "conjugate", s, sol.residual_conjugate, 0.0, f64::NAN);
        report.row("normalization-gap", 0, "forward", s, sol.normalization_gap, 0.0, f64::NAN);
        report.check(
            format!("residual-s{k}"),
            sol.residual.max(sol.residual_conjugate) <= cfg.residual_tol,
            format!(
                "s = {s}: residuals {:e} / {:e} against {:e}",
                sol.residual, sol.residual_conjugate, cfg.residual_tol
            ),
        );
        let z = 0.5 * s.abs();
        if (s + z).abs() < S_GUARD {
            let p = perturbed_eigenvalue_check(&setup.context()?, s, z, sol.log_kappa(), &setup.opts)?;
            report.row("perturbed-eigenvalue", 0, &format!("z={z}"), s, p.lambda_sz, p.predicted, f64::NAN);
            report.check(
                format!("perturbed-eigenvalue-s{k}"),
                p.discrepancy <= 1e-6,
                format!("s = {s}, z = {z}: discrepancy {:e}", p.discrepancy),
            );
        }
        summaries.push(sol.summary());
    }
    files.push((
        "spectral_summary.json".into(),
        serde_json::to_string_pretty(&summaries).expect("summaries serialize"),
    ));
    let mut out = CommandOutput::from_report(report);
    out.files = files;
    Ok(out)
}

pub fn cmd_cumulants(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let table = setup.table()?;
    let mut report = setup.report(Command::Cumulants);
    let (lambda, sigma2, m3) = table.cumulants();
    let exact = setup.scalar.as_ref().map(|r| (r.lyapunov(), r.sigma2(), r.m3()));
    let nan3 = (f64::NAN, f64::NAN, f64::NAN);
    let (el, es, em) = exact.unwrap_or(nan3);
    report.row("cumulant", 0, "lambda", 0.0, lambda, el, f64::NAN);
    report.row("cumulant", 0, "sigma2", 0.0, sigma2, es, f64::NAN);
    report.row("cumulant", 0, "m3", 0.0, m3, em, f64::NAN);
    report.param("spline_fd_discrepancy", fmt_list(&table.spline_fd_discrepancy));
    report.check(
        "convexity",
        table.min_second_difference > -1e-8,
        format!("min second difference {:e}", table.min_second_difference),
    );
    let at_lambda = table.legendre(lambda)?;
    report.check(
        "rate-zero-at-lambda",
        at_lambda.rate.abs() <= 1e-10,
        format!("rate at lambda = {:e}", at_lambda.rate),
    );
    if let Some(r) = &setup.scalar {
        report.check("lambda-closed-form", (lambda - el).abs() <= 1e-6, format!("|diff| = {:e}", (lambda - el).abs()));
        report.check("sigma2-closed-form", (sigma2 - es).abs() <= 1e-5, format!("|diff| = {:e}", (sigma2 - es).abs()));
        report.check("m3-closed-form", (m3 - em).abs() <= 1e-3, format!("|diff| = {:e}", (m3 - em).abs()));
        for &s in &cfg.s_targets {
            let got = table.lambda_at(s)?;
            let want = r.lambda(s);
            report.row("cgf", 0, "lambda", s, got, want, f64::NAN);
            report.check(format!("cgf-closed-form-s{s}"), (got - want).abs() <= 1e-6, format!("|diff| = {:e}", (got - want).abs()));
        }
    }
    let (qlo, qhi) = table.q_range();
    let points = (0..21)
        .map(|k| {
            let t = 0.02 + 0.96 * k as f64 / 20.0;
            table.legendre(qlo + t * (qhi - qlo))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut lambda_csv = Vec::new();
    table.write_lambda_csv(&mut lambda_csv)?;
    let mut rate_csv = Vec::new();
    table.write_rate_csv(&mut rate_csv, &points)?;
    let mut out = CommandOutput::from_report(report);
    out.files.push(("lambda.csv".into(), String::from_utf8(lambda_csv).expect("ascii")));
    out.files.push(("rate.csv".into(), String::from_utf8(rate_csv).expect("ascii")));
    Ok(out)
}

/// Edgeworth prediction `Phi + m3/(6 sigma^3 sqrt n)(1-y^2)phi - drift/(sigma sqrt n) phi`.
pub fn edgeworth_cdf(y: f64, n: usize, sigma: f64, m3: f64, drift: f64) -> f64 {
    let nd = std_normal();
    let rn = (n as f64).sqrt();
    nd.cdf(y) + m3 / (6.0 * sigma.powi(3) * rn) * (1.0 - y * y) * nd.pdf(y) - drift / (sigma * rn) * nd.pdf(y)
}

pub fn cmd_edgeworth(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let table = setup.table()?;
    let (lambda, sigma2, m3) = table.cumulants();
    if sigma2 <= 1e-10 {
        return Err(Error::DerivativeUnstable { gamma2: sigma2 });
    }
    let sigma = sigma2.sqrt();
    let d = setup.ens.dim();
    let ones = vec![1.0; d];
    let drift_count = cfg.drift_count.unwrap_or(cfg.count);
    let drifts = estimate_drifts(&setup.ens, lambda, &setup.f, &setup.v, cfg.n_tail, drift_count, setup.seed("drift"))?;
    let drifts_one = estimate_drifts(&setup.ens, lambda, &ones, &ones, cfg.n_tail, drift_count, setup.seed("drift-ones"))?;
    let mut report = setup.report(Command::Edgeworth);
    report.param("lambda", lambda);
    report.param("sigma", sigma);
    report.param("m3", m3);
    report.param("m3_raw_from_nu", drifts.m3_raw.mean);
    report.param("b_v", drifts.b_v.mean);
    report.param("d_f", drifts.d_f.mean);
    report.param("b_ones", drifts_one.b_v.mean);
    report.param("count", cfg.count);
    let variants: [(&str, Observable, f64, bool); 3] = [
        ("coefficient", Observable::Coefficient, drifts.b_v.mean + drifts.d_f.mean, false),
        ("vector_norm", Observable::VectorNorm, drifts.b_v.mean, false),
        ("matrix_norm", Observable::MatrixNorm, drifts_one.b_v.mean, true),
    ];
    let nd = std_normal();
    let ys = y_grid();
    let mut sups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for &n in &cfg.n_list {
        let rn = (n as f64).sqrt();
        let spec = |v: &[f64], product: bool| PathSpec {
            v: v.to_vec(),
            f: setup.f.clone(),
            n,
            count: cfg.count,
            tracking: Tracking {
                product,
                endpoint: false,
            },
        };
        let batch_v = simulate_paths(&setup.ens, &spec(&setup.v, false), setup.seed(&format!("edgeworth/n{n}/v")))?;
        let batch_one = simulate_paths(&setup.ens, &spec(&ones, true), setup.seed(&format!("edgeworth/n{n}/ones")))?;
        for &(name, obs, drift, product) in &variants {
            let batch = if product { &batch_one } else { &batch_v };
            let z = standardized(batch.column(obs), n, lambda, sigma);
            let (mut sup_e, mut sup_g) = (0.0_f64, 0.0_f64);
            for &y in &ys {
                let emp = empirical_cdf(&z, y);
                let se = (emp * (1.0 - emp) / z.len() as f64).sqrt();
                let pe = edgeworth_cdf(y, n, sigma, m3, drift);
                let pg = nd.cdf(y);
                report.row("edgeworth", n, name, y, emp, pe, se);
                report.row("gaussian-cdf", n, name, y, emp, pg, se);
                sup_e = sup_e.max((emp - pe).abs());
                sup_g = sup_g.max((emp - pg).abs());
            }
            let se = 1.0 / (z.len() as f64).sqrt();
            report.row("edgeworth-sup", n, name, 0.0, sup_e, 0.0, se);
            report.row("gaussian-sup", n, name, 0.0, sup_g, 0.0, se);
            // ratio column of sup rows carries sqrt(n) * sup
            for r in report.rows.iter_mut().rev().take(2) {
                r.ratio = rn * r.empirical;
            }
            sups.entry(name).or_default().push((sup_e, sup_g));
        }
    }
    let coef = &sups["coefficient"];
    let improves = coef.iter().all(|(e, g)| e < g);
    report.check(
        "edgeworth-beats-gaussian",
        improves,
        format!(
            "coefficient sup edgeworth/gaussian: {}",
            coef.iter().map(|(e, g)| format!("{e:.5}/{g:.5}")).collect::<Vec<_>>().join(" ")
        ),
    );
    let scaled: Vec<f64> = coef.iter().zip(&cfg.n_list).map(|((e, _), n)| (*n as f64).sqrt() * e).collect();
    report.check(
        "edgeworth-scaled-decreases",
        scaled.len() < 2 || scaled.last() < scaled.first(),
        format!("sqrt(n) sup: {}", fmt_list(&scaled)),
    );
    Ok(CommandOutput::from_report(report))
}

pub fn cmd_berry_esseen(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let table = setup.table()?;
    let (lambda, sigma2, _) = table.cumulants();
    if sigma2 <= 1e-10 {
        return Err(Error::DerivativeUnstable { gamma2: sigma2 });
    }
    let sigma = sigma2.sqrt();
    let nd = std_normal();
    let mut report = setup.report(Command::BerryEsseen);
    report.param("lambda", lambda);
    report.param("sigma", sigma);
    report.param("count", cfg.count);
    let variants = [
        ("coefficient", Observable::Coefficient),
        ("matrix_norm", Observable::MatrixNorm),
        ("spectral_radius", Observable::SpectralRadius),
    ];
    let mut constants: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &n in &cfg.n_list {
        let rn = (n as f64).sqrt();
        let from = |v: &[f64], label: &str| {
            simulate_paths(
                &setup.ens,
                &PathSpec {
                    v: v.to_vec(),
                    f: setup.f.clone(),
                    n,
                    count: cfg.count,
                    tracking: Tracking {
                        product: true,
                        endpoint: false,
                    },
                },
                setup.seed(&format!("berry-esseen/n{n}/{label}")),
            )
        };
        let batch = from(&setup.v, "v")?;
        for (name, obs) in variants {
            let z = standardized(batch.column(obs), n, lambda, sigma);
            let sup = ks_distance(&z, |y| nd.cdf(y));
            let band = 1.628 / (z.len() as f64).sqrt();
            report.row("berry-esseen-sup", n, name, 0.0, sup, band, f64::NAN);
            report.rows.last_mut().expect("row pushed").ratio = rn * sup;
            constants.entry(name).or_default().push(rn * sup);
        }
    }
    for (name, _) in variants {
        let c = &constants[name];
        let m = median(c);
        let ok = c.iter().all(|x| x.is_finite() && *x <= 2.0 * m && *x >= 0.5 * m);
        report.check(
            format!("bounded-{name}"),
            ok,
            format!("c_n = {} (median {m:.4})", fmt_list(c)),
        );
    }
    Ok(CommandOutput::from_report(report))
}

/// Observables of the sharp large-deviation comparison.
fn ldp_observables(cfg: &RunConfig) -> Vec<Observable> {
    cfg.observables.clone().unwrap_or_else(|| {
        vec![
            Observable::Coefficient,
            Observable::VectorNorm,
            Observable::MatrixNorm,
            Observable::SpectralRadius,
        ]
    })
}

fn ldp_formula(obs: Observable) -> &'static str {
    match obs {
        Observable::Coefficient => "brp-coefficient",
        Observable::VectorNorm => "brp-vector-norm",
        Observable::MatrixNorm => "brp-matrix-norm",
        Observable::Entry11 => "brp-entry11",
        Observable::SpectralRadius => "rho-sandwich",
    }
}

/// `r_s(v) int phi <f,u>^s dnu_s / nu_s(r_s)`.
pub fn brp_prefactor(sol: &SpectralSolution, f: &[f64], v: &[f64], phi: impl Fn(&[f64]) -> f64) -> f64 {
    sol.r_at(v) * sol.nu_weighted(f, phi) / sol.nu_r()
}

/// `e^{-n rate} / (|s| sigma_s sqrt(2 pi n))`.
pub fn brp_tail_factor(n: usize, s: f64, rate: f64, sigma_s: f64) -> f64 {
    let nf = n as f64;
    (-nf * rate).exp() / (s.abs() * sigma_s * (2.0 * PI * nf).sqrt())
}

pub fn cmd_ldp(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let table = setup.table()?;
    let (lambda, sigma2, _) = table.cumulants();
    let mut targets = cfg.s_targets.clone();
    for &q in &cfg.q_targets {
        targets.push(table.legendre(q)?.s_star);
    }
    if targets.is_empty() {
        targets.push(0.5);
    }
    let observables = ldp_observables(cfg);
    let wants = |o: Observable| observables.contains(&o);
    let d = setup.ens.dim();
    let ones = vec![1.0; d];
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let phi = setup.phi();
    let mut report = setup.report(Command::Ldp);
    report.param("count", cfg.count);
    report.param("phi", String::from(cfg.phi.clone()));
    let mut files = Vec::new();
    let mut tilts = String::from("index,s,q,rate,sigma_s,kappa,nu_r\n");

    for (k, &s) in targets.iter().enumerate() {
        if s == 0.0 {
            return Err(Error::InvalidArgument("tilt s = 0 has no large-deviation regime".into()));
        }
        if s < 0.0 && !setup.conditions.a1_holds() {
            return Err(Error::ConditionViolation("negative tilts need the full comparability condition".into()));
        }
        let sol = setup.solve(s)?;
        let lp = table.legendre_at_s(s)?;
        let (q, rate) = (lp.q, lp.rate);
        let sigma_s = table.sigma_s(s)?;
        let tail = if s > 0.0 { Tail::Upper } else { Tail::Lower };
        let tail_name = if s > 0.0 { "upper" } else { "lower" };
        let mut csv = Vec::new();
        sol.write_csv(&mut csv)?;
        files.push((format!("spectral_s{k}.csv"), String::from_utf8(csv).expect("ascii")));
        let _ = writeln!(tilts, "{k},{s:e},{q:e},{rate:e},{sigma_s:e},{:e},{:e}", sol.kappa, sol.nu_r());

        let mut ratios: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut bounds_last = None;
        for &n in &cfg.n_list {
            let threshold = n as f64 * q;
            let hit = |x: f64| match tail {
                Tail::Upper => x >= threshold,
                Tail::Lower => x <= threshold,
            };
            let factor = brp_tail_factor(n, s, rate, sigma_s);
            if wants(Observable::Coefficient) || wants(Observable::VectorNorm) {
                let spec = PathSpec {
                    v: setup.v.clone(),
                    f: setup.f.clone(),
                    n,
                    count: cfg.count,
                    tracking: setup.tracking(),
                };
                let batch = tilted_simulate(
                    &sol,
                    &TiltMode::Coefficient(setup.f.clone()),
                    &spec,
                    setup.seed(&format!("ldp/s{k}/n{n}/v")),
                )?;
                for (obs, f_eff) in [(Observable::Coefficient, &setup.f), (Observable::VectorNorm, &ones)] {
                    if !wants(obs) {
                        continue;
                    }
                    let est = if cfg.phi.is_constant() {
                        let t = is_probability(&batch, obs, threshold, tail)?;
                        (t.estimate, t.stderr)
                    } else {
                        let e = weighted_indicator(&batch, batch.column(obs), hit, &cfg.phi);
                        (e.mean, e.stderr)
                    };
                    let pred = brp_prefactor(&sol, f_eff, &setup.v, &phi) * factor;
                    report.row(ldp_formula(obs), n, tail_name, q, est.0, pred, est.1);
                    ratios.entry(ldp_formula(obs)).or_default().push(est.0 / pred);
                }
            }
            let rho = wants(Observable::SpectralRadius) && s > 0.0;
            if wants(Observable::SpectralRadius) && s < 0.0 {
                log::warn!("spectral-radius sandwich rows need an upper tail; skipped at s = {s}");
            }
            if wants(Observable::MatrixNorm) || rho {
                let spec = PathSpec {
                    v: ones.clone(),
                    f: ones.clone(),
                    n,
                    count: cfg.count,
                    tracking: Tracking::FULL,
                };
                let batch = tilted_simulate(&sol, &TiltMode::Norm, &spec, setup.seed(&format!("ldp/s{k}/n{n}/ones")))?;
                let mat = is_probability(&batch, Observable::MatrixNorm, threshold, tail)?;
                let pred_mat = brp_prefactor(&sol, &ones, &ones, |_| 1.0) * factor;
                if wants(Observable::MatrixNorm) {
                    report.row("brp-matrix-norm", n, tail_name, q, mat.estimate, pred_mat, mat.stderr);
                    ratios.entry("brp-matrix-norm").or_default().push(mat.estimate / pred_mat);
                }
                if rho {
                    let e11 = is_probability(&batch, Observable::Entry11, threshold, tail)?;
                    let sr = is_probability(&batch, Observable::SpectralRadius, threshold, tail)?;
                    let pred_e11 = brp_prefactor(&sol, &e1, &e1, |_| 1.0) * factor;
                    report.row("brp-entry11", n, tail_name, q, e11.estimate, pred_e11, e11.stderr);
                    report.row("rho-sandwich", n, tail_name, q, sr.estimate, f64::NAN, sr.stderr);
                    report.check(
                        format!("rho-sandwich-s{k}-n{n}"),
                        e11.estimate <= sr.estimate && sr.estimate <= mat.estimate,
                        format!("{:e} <= {:e} <= {:e}", e11.estimate, sr.estimate, mat.estimate),
                    );
                    bounds_last = Some((e11.estimate / pred_e11, mat.estimate / pred_mat));
                }
            }
        }
        for (formula, r) in &ratios {
            report.check(
                format!("trend-{formula}-s{k}"),
                trend_check(r),
                format!("s = {s}: ratios {}", fmt_list(r)),
            );
        }
        if let Some((a, b)) = bounds_last {
            let inside = |x: f64| (0.2..=5.0).contains(&x);
            report.check(
                format!("rho-bound-ratios-s{k}"),
                inside(a) && inside(b),
                format!("entry11 ratio {a:.4}, matrix-norm ratio {b:.4} at n = {}", cfg.n_list.last().unwrap()),
            );
        }
    }

    // IS against direct Monte Carlo two standard deviations out
    let s0 = targets[0];
    let n0 = cfg.n_list[0];
    let sign = s0.signum();
    let sigma = sigma2.sqrt();
    let q_m = lambda + sign * 2.0 * sigma / (n0 as f64).sqrt();
    let s_m = table.legendre(q_m)?.s_star;
    let tail = if sign > 0.0 { Tail::Upper } else { Tail::Lower };
    let spec = PathSpec {
        v: setup.v.clone(),
        f: setup.f.clone(),
        n: n0,
        count: cfg.count,
        tracking: Tracking::MINIMAL,
    };
    let sol_m = setup.solve(s_m)?;
    let tilted = tilted_simulate(&sol_m, &TiltMode::Coefficient(setup.f.clone()), &spec, setup.seed("ldp/crosscheck/is"))?;
    let direct = simulate_paths(&setup.ens, &spec, setup.seed("ldp/crosscheck/direct"))?;
    let threshold = n0 as f64 * q_m;
    let is = is_probability(&tilted, Observable::Coefficient, threshold, tail)?;
    let mc = is_probability(&direct, Observable::Coefficient, threshold, tail)?;
    let comb = (is.stderr.powi(2) + mc.stderr.powi(2)).sqrt();
    report.row("is-direct-crosscheck", n0, if sign > 0.0 { "upper" } else { "lower" }, q_m, is.estimate, mc.estimate, comb);
    report.check(
        "is-direct-crosscheck",
        (is.estimate - mc.estimate).abs() <= 3.0 * comb,
        format!("IS {:e} vs direct {:e} (combined se {:e})", is.estimate, mc.estimate, comb),
    );

    files.push(("ldp_tilts.csv".into(), tilts));
    let mut out = CommandOutput::from_report(report);
    out.files = files;
    Ok(out)
}

pub fn cmd_llt(cfg: &RunConfig) -> Result<CommandOutput> {
    let setup = Setup::new(cfg)?;
    let table = setup.table()?;
    let (lambda, sigma2, _) = table.cumulants();
    if sigma2 <= 1e-10 {
        return Err(Error::DerivativeUnstable { gamma2: sigma2 });
    }
    let sigma = sigma2.sqrt();
    let [a1, a2] = cfg.interval;
    let width = a2 - a1;
    let window = format!("{a1}..{a2}");
    let phi = setup.phi();
    let mut report = setup.report(Command::Llt);
    report.param("lambda", lambda);
    report.param("sigma", sigma);
    report.param("interval", &window);
    report.param("mode", format!("{:?}", cfg.llt_mode).to_lowercase());
    report.param("count", cfg.count);
    report.param("phi", String::from(cfg.phi.clone()));
    let continuity = (ld_interval_factor(1e-12, a1, a2) - width).abs();
    report.check("ld-interval-continuity", continuity <= 1e-10, format!("|factor(1e-12) - width| = {continuity:e}"));
    let expected_hits = |n: usize, sig: f64| cfg.count as f64 * width / (sig * (2.0 * PI * n as f64).sqrt());
    let spec = |n: usize| PathSpec {
        v: setup.v.clone(),
        f: setup.f.clone(),
        n,
        count: cfg.count,
        tracking: setup.tracking(),
    };

    match cfg.llt_mode {
        LltMode::Central | LltMode::Moderate => {
            let nu_phi = setup.solve(0.0)?.nu_of(&phi);
            let moderate = cfg.llt_mode == LltMode::Moderate;
            let formula = if moderate { "llt-moderate" } else { "llt-central" };
            let mut ratios = Vec::new();
            for &n in &cfg.n_list {
                let nf = n as f64;
                let l = if moderate { cfg.md_scale * nf.powf(-0.25) } else { 0.0 };
                let lo = nf * lambda + a1 + sigma * nf * l;
                let hi = nf * lambda + a2 + sigma * nf * l;
                let in_window = |x: f64| x >= lo && x <= hi;
                let base = width / (sigma * (2.0 * PI * nf).sqrt()) * nu_phi;
                let (est, pred) = if moderate {
                    let lp = table.legendre(lambda + sigma * l)?;
                    let sig_m = table.sigma_s(lp.s_star)?;
                    let hits = expected_hits(n, sig_m);
                    if hits < MIN_EXPECTED_HITS {
                        return Err(Error::IntervalTooNarrow { expected: hits });
                    }
                    let sol = setup.solve(lp.s_star)?;
                    let batch = tilted_simulate(
                        &sol,
                        &TiltMode::Coefficient(setup.f.clone()),
                        &spec(n),
                        setup.seed(&format!("llt/moderate/n{n}")),
                    )?;
                    let zeta = table.cramer_series(0.0, l)?;
                    let e = weighted_indicator(&batch, &batch.log_coeff, in_window, &cfg.phi);
                    (e, base * (-nf * l * l / 2.0 + nf * l.powi(3) * zeta).exp())
                } else {
                    let hits = expected_hits(n, sigma);
                    if hits < MIN_EXPECTED_HITS {
                        return Err(Error::IntervalTooNarrow { expected: hits });
                    }
                    let batch = simulate_paths(&setup.ens, &spec(n), setup.seed(&format!("llt/central/n{n}")))?;
                    (weighted_indicator(&batch, &batch.log_coeff, in_window, &cfg.phi), base)
                };
                report.row(formula, n, &window, l, est.mean, pred, est.stderr);
                ratios.push(est.mean / pred);
            }
            let last = *ratios.last().expect("non-empty n list");
            if moderate {
                report.check(
                    "llt-moderate-trend",
                    ratios.len() < 2 || (last - 1.0).abs() < (ratios[0] - 1.0).abs(),
                    format!("ratios {}", fmt_list(&ratios)),
                );
            } else {
                report.check(
                    "llt-central-band",
                    (0.85..=1.15).contains(&last),
                    format!("ratios {} (band [0.85, 1.15] at the largest n)", fmt_list(&ratios)),
                );
            }
        }
        LltMode::Large => {
            let targets = if cfg.s_targets.is_empty() { vec![0.5] } else { cfg.s_targets.clone() };
            for (k, &s) in targets.iter().enumerate() {
                if s < 0.0 && !setup.conditions.a1_holds() {
                    return Err(Error::ConditionViolation("negative tilts need the full comparability condition".into()));
                }
                let sol = setup.solve(s)?;
                let lp = table.legendre_at_s(s)?;
                let sigma_s = table.sigma_s(s)?;
                let mut ratios = Vec::new();
                for &n in &cfg.n_list {
                    let hits = expected_hits(n, sigma_s);
                    if hits < MIN_EXPECTED_HITS {
                        return Err(Error::IntervalTooNarrow { expected: hits });
                    }
                    let nf = n as f64;
                    let (lo, hi) = (a1 + nf * lp.q, a2 + nf * lp.q);
                    let batch = tilted_simulate(
                        &sol,
                        &TiltMode::Coefficient(setup.f.clone()),
                        &spec(n),
                        setup.seed(&format!("llt/large/s{k}/n{n}")),
                    )?;
                    let est = weighted_indicator(&batch, &batch.log_coeff, |x| x >= lo && x <= hi, &cfg.phi);
                    let pred = sol.r_at(&setup.v) / sol.nu_r()
                        * ld_interval_factor(s, a1, a2)
                        * (-nf * lp.rate).exp()
                        / (sigma_s * (2.0 * PI * nf).sqrt())
                        * sol.nu_weighted(&setup.f, &phi);
                    report.row("llt-large", n, &window, lp.q, est.mean, pred, est.stderr);
                    ratios.push(est.mean / pred);
                }
                report.check(format!("llt-large-trend-s{k}"), trend_check(&ratios), format!("s = {s}: ratios {}", fmt_list(&ratios)));
            }
        }
    }
    Ok(CommandOutput::from_report(report))
}
