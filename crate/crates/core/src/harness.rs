//! Experiment configuration, orchestration and artifact output.
//!
//! An experiment directory holds `config.json` (the validated config echoed
//! back), `series.csv`, `snapshots/*.csv` and `summary.json`. Output is a pure
//! function of the config: no timestamps, fixed float formatting, and
//! parallel sweeps aggregated in ladder order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bd::{band_initial, equilibrium_initial, run_bd, BdRun, BdRunConfig, BdScheme, Closure};
use crate::diagnostics::{coarsening_rate, kohn_otto_report, TrajectorySeries};
use crate::error::{Error, Result};
use crate::initial::{InitialData, InitialDataSpec};
use crate::lsw_classical::{
    run_classical, ClassicalConfig, ClassicalRun, ClassicalState, LHistory,
};
use crate::lsw_diffusive::{
    adjoint_solve, duality_check, interpolate_centers, pairing, run_diffusive, ContinuousState,
    DiffusiveConfig, DiffusiveRun, Grid, LMode, Payoff,
};
use crate::rates::RateModel;
use crate::sde::{estimate_duality, estimate_survival_payoff, BoundaryScheme, McConfig, McRecord};

pub const SCHEMA_VERSION: u32 = 1;

/// Number of quantile probes used by [`tail_distance`] in sweeps.
pub const TAIL_PROBES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Bd,
    Classical,
    Diffusive,
    Sweep,
    McCheck,
    Duality,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Bd => "bd",
            ExperimentKind::Classical => "classical",
            ExperimentKind::Diffusive => "diffusive",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::McCheck => "mc-check",
            ExperimentKind::Duality => "duality",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bd" => ExperimentKind::Bd,
            "classical" => ExperimentKind::Classical,
            "diffusive" => ExperimentKind::Diffusive,
            "sweep" => ExperimentKind::Sweep,
            "mc-check" => ExperimentKind::McCheck,
            "duality" => ExperimentKind::Duality,
            other => {
                return Err(Error::config(
                    "kind",
                    format!("unknown experiment kind `{other}`"),
                ))
            }
        })
    }
}

/// How the initial cluster densities of a Becker-Döring run are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BdInitial {
    /// `Q_l c1^l`
    Equilibrium { c1: f64 },
    /// flat over `lo..=hi`, unit mass
    Band { lo: usize, hi: usize },
    /// explicit `γ_1..γ_lmax`
    Explicit { gamma: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClosureKind {
    /// monomers from the total mass
    Full,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdExperiment {
    #[serde(default)]
    pub model: RateModel,
    pub closure: ClosureKind,
    pub initial: BdInitial,
    pub l_max: usize,
    pub t_end: f64,
    #[serde(default = "default_bd_dt")]
    pub dt_init: f64,
    #[serde(default)]
    pub scheme: BdScheme,
    pub output_stride: f64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_bd_rtol")]
    pub rtol: f64,
    #[serde(default = "default_bd_atol")]
    pub atol: f64,
}

fn default_bd_dt() -> f64 {
    1e-3
}
fn default_snapshot_every() -> usize {
    10
}
fn default_bd_rtol() -> f64 {
    1e-8
}
fn default_bd_atol() -> f64 {
    1e-12
}

impl BdExperiment {
    /// Resolves the initial data and closure into a solver config.
    pub fn run_config(&self) -> Result<BdRunConfig> {
        if self.l_max < 3 {
            return Err(Error::config("bd.l_max", "must be >= 3"));
        }
        let initial = match &self.initial {
            BdInitial::Equilibrium { c1 } => equilibrium_initial(&self.model, *c1, self.l_max)?.0,
            BdInitial::Band { lo, hi } => band_initial(*lo, *hi, self.l_max)?,
            BdInitial::Explicit { gamma } => {
                if gamma.len() != self.l_max {
                    return Err(Error::config("bd.initial.gamma", "length must equal l_max"));
                }
                gamma.clone()
            }
        };
        let closure = match self.closure {
            ClosureKind::Full => Closure::Full {
                rho: initial
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (i + 1) as f64 * g)
                    .sum(),
            },
            ClosureKind::Dirichlet => Closure::Dirichlet,
        };
        let config = BdRunConfig {
            model: self.model,
            closure,
            initial,
            t_end: self.t_end,
            dt_init: self.dt_init,
            scheme: self.scheme,
            output_stride: self.output_stride,
            snapshot_every: self.snapshot_every,
            rtol: self.rtol,
            atol: self.atol,
            mass_tol: 1e-6,
        };
        config.validate()?;
        Ok(config)
    }
}

/// ε-ladder comparison of the diffusive runs against the classical limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub initial: InitialDataSpec,
    pub eps_ladder: Vec<f64>,
    /// comparison time T
    pub t_final: f64,
    #[serde(default = "default_sweep_cells")]
    pub cells: usize,
    #[serde(default = "default_sweep_x_max")]
    pub x_max: f64,
    #[serde(default = "default_stride")]
    pub output_stride: f64,
    #[serde(default = "default_classical_dt")]
    pub classical_dt: f64,
}

fn default_sweep_cells() -> usize {
    1024
}
fn default_sweep_x_max() -> f64 {
    60.0
}
fn default_stride() -> f64 {
    0.05
}
fn default_classical_dt() -> f64 {
    0.01
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            initial: InitialDataSpec::default(),
            eps_ladder: vec![0.2, 0.1, 0.05, 0.025],
            t_final: 1.0,
            cells: default_sweep_cells(),
            x_max: default_sweep_x_max(),
            output_stride: default_stride(),
            classical_dt: default_classical_dt(),
        }
    }
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        validate_ladder(&self.eps_ladder, "sweep.eps_ladder")?;
        if !(self.t_final > 0.0) {
            return Err(Error::config("sweep.t_final", "must be positive"));
        }
        let k = self.t_final / self.output_stride;
        if !(k >= 1.0) || (k - k.round()).abs() > 1e-9 * k {
            return Err(Error::config("sweep.output_stride", "must divide t_final"));
        }
        self.initial.build()?;
        Ok(())
    }

    /// Both runs continue past `T` so the wide rate stencil at `T` fits.
    fn run_end(&self) -> f64 {
        self.t_final + 4.0 * self.output_stride
    }

    fn classical(&self) -> ClassicalConfig {
        ClassicalConfig {
            initial: self.initial.clone(),
            dt: self.classical_dt,
            t_end: self.run_end(),
            output_stride: self.output_stride,
            ..ClassicalConfig::default()
        }
    }

    fn diffusive(&self, eps: f64) -> DiffusiveConfig {
        DiffusiveConfig {
            initial: self.initial.clone(),
            eps,
            cells: self.cells,
            x_max: self.x_max,
            t_end: self.run_end(),
            output_stride: self.output_stride,
            snapshot_every: (self.t_final / self.output_stride).round() as usize,
            ..DiffusiveConfig::default()
        }
    }
}

/// Checks that an ε ladder is nonempty, inside `(0, 1]` and strictly decreasing.
pub fn validate_ladder(ladder: &[f64], field: &str) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::config(field, "ladder is empty"));
    }
    for (i, e) in ladder.iter().enumerate() {
        if !(*e > 0.0 && *e <= 1.0) {
            return Err(Error::config(
                field,
                format!("entry {i} = {e} is outside (0, 1]"),
            ));
        }
    }
    if let Some(i) = ladder.windows(2).position(|w| !(w[1] < w[0])) {
        return Err(Error::config(
            field,
            format!("not strictly decreasing at entry {}", i + 1),
        ));
    }
    Ok(())
}

/// Monte Carlo against the backward PDE with `L` held constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCheckConfig {
    pub eps: f64,
    #[serde(default = "one")]
    pub l: f64,
    pub t_final: f64,
    pub probes: Vec<f64>,
    pub n_paths: usize,
    #[serde(default = "default_mc_dt")]
    pub dt: f64,
    #[serde(default)]
    pub boundary: BoundaryScheme,
    /// PDE grid; the grid tolerance compares against half as many cells
    #[serde(default = "default_mc_cells")]
    pub cells: usize,
    #[serde(default = "default_mc_x_max")]
    pub x_max: f64,
    /// paths for the `x ~ c0` duality estimate (0 skips it)
    #[serde(default)]
    pub duality_paths: usize,
    #[serde(default)]
    pub initial: InitialDataSpec,
}

fn one() -> f64 {
    1.0
}
fn default_mc_dt() -> f64 {
    1e-3
}
fn default_mc_cells() -> usize {
    2048
}
fn default_mc_x_max() -> f64 {
    40.0
}

impl Default for McCheckConfig {
    fn default() -> Self {
        Self {
            eps: 0.25,
            l: 1.0,
            t_final: 0.25,
            probes: vec![0.1, 0.25, 0.5, 1.0, 2.0],
            n_paths: 200_000,
            dt: default_mc_dt(),
            boundary: BoundaryScheme::BridgeCorrection,
            cells: default_mc_cells(),
            x_max: default_mc_x_max(),
            duality_paths: 0,
            initial: InitialDataSpec::default(),
        }
    }
}

impl McCheckConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::config("mc.eps", "must lie in (0, 1]"));
        }
        if !(self.l > 0.0) {
            return Err(Error::config("mc.l", "must be positive"));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::config("mc.t_final", "must be positive"));
        }
        if self.probes.is_empty() || self.probes.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::config("mc.probes", "need nonnegative probe points"));
        }
        if self.cells < 4 {
            return Err(Error::config("mc.cells", "must be >= 4"));
        }
        self.mc(0).validate()?;
        self.initial.build()?;
        Ok(())
    }

    fn history(&self) -> LHistory {
        LHistory::constant(self.l, self.t_final).expect("validated l and t_final")
    }

    fn mc(&self, seed: u64) -> McConfig {
        McConfig {
            eps: self.eps,
            history: self.history(),
            x0: self.probes.clone(),
            t_final: self.t_final,
            n_paths: self.n_paths,
            dt: self.dt,
            seed,
            boundary: self.boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityConfig {
    #[serde(default)]
    pub initial: InitialDataSpec,
    pub eps: f64,
    pub t_final: f64,
    pub cells: usize,
    #[serde(default = "default_mc_x_max")]
    pub x_max: f64,
    #[serde(default = "default_payoffs")]
    pub payoffs: Vec<Payoff>,
}

fn default_payoffs() -> Vec<Payoff> {
    vec![Payoff::One, Payoff::CubeRoot, Payoff::Indicator { x0: 1.0 }]
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            initial: InitialDataSpec::default(),
            eps: 0.25,
            t_final: 0.5,
            cells: 2048,
            x_max: default_mc_x_max(),
            payoffs: default_payoffs(),
        }
    }
}

impl DualityConfig {
    fn forward(&self, cells: usize) -> DiffusiveConfig {
        DiffusiveConfig {
            initial: self.initial.clone(),
            eps: self.eps,
            cells,
            x_max: self.x_max,
            t_end: self.t_final,
            output_stride: self.t_final / 10.0,
            ..DiffusiveConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.payoffs.is_empty() {
            return Err(Error::config("duality.payoffs", "need at least one payoff"));
        }
        self.forward(self.cells).validate()
    }
}

/// Check thresholds shared across experiment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// relative mass drift for Becker-Döring, absolute for diffusive runs
    pub mass_drift: f64,
    /// `|∫ x c - 1|` for the classical solver
    pub classical_mass: f64,
    /// relative slack on monotonicity of Λ and on `L ≤ Λ`
    pub monotone_slack: f64,
    /// relative agreement of finite-difference and semi-analytic rates
    pub rate_agreement: f64,
    /// duality residual for the payoff one
    pub duality_residual: f64,
    /// allowed deviation of the refinement ratio from 1/2, relative
    pub halving_band: f64,
    /// error bars allowed in Monte Carlo comparisons
    pub mc_sigmas: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            mass_drift: 1e-8,
            classical_mass: 1e-6,
            monotone_slack: 1e-9,
            rate_agreement: 0.01,
            duality_residual: 1e-4,
            halving_band: 0.3,
            mc_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// default artifact directory when none is given on the command line
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bd: Option<BdExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classical: Option<ClassicalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusive: Option<DiffusiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McCheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duality: Option<DualityConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            seed: 0,
            output: None,
            bd: None,
            classical: None,
            diffusive: None,
            sweep: None,
            mc: None,
            duality: None,
            tolerances: Tolerances::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        fn need<'a, T>(section: &'a Option<T>, field: &str) -> Result<&'a T> {
            section
                .as_ref()
                .ok_or_else(|| Error::config(field, "section required for this experiment kind"))
        }
        match self.kind {
            ExperimentKind::Bd => need(&self.bd, "bd")?.run_config().map(|_| ()),
            ExperimentKind::Classical => need(&self.classical, "classical")?.validate(),
            ExperimentKind::Diffusive => need(&self.diffusive, "diffusive")?.validate(),
            ExperimentKind::Sweep => need(&self.sweep, "sweep")?.validate(),
            ExperimentKind::McCheck => need(&self.mc, "mc")?.validate(),
            ExperimentKind::Duality => need(&self.duality, "duality")?.validate(),
        }
    }

    /// Same experiment at doubled resolution: twice the cells, half the
    /// time steps.
    pub fn refined(&self) -> Self {
        let mut c = self.clone();
        if let Some(b) = c.bd.as_mut() {
            b.rtol *= 0.1;
            b.atol *= 0.1;
        }
        if let Some(k) = c.classical.as_mut() {
            k.dt *= 0.5;
        }
        if let Some(d) = c.diffusive.as_mut() {
            d.cells *= 2;
        }
        if let Some(s) = c.sweep.as_mut() {
            s.cells *= 2;
            s.classical_dt *= 0.5;
        }
        if let Some(m) = c.mc.as_mut() {
            m.dt *= 0.5;
            m.cells *= 2;
        }
        if let Some(d) = c.duality.as_mut() {
            d.cells *= 2;
        }
        c
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes)
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Exit status for a failed experiment.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } | Error::Json(_) => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }

    fn flag(name: &str, passed: bool) -> Self {
        Self {
            name: name.into(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub report: serde_json::Value,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Rows of a CSV table. Floats use Rust's shortest round-trip formatting.
struct Table {
    text: String,
}

impl Table {
    fn new(header: &str) -> Self {
        Self {
            text: format!("{header}\n"),
        }
    }

    fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    fn nums(&mut self, values: &[f64]) {
        let fields: Vec<String> = values.iter().map(|v| num(*v)).collect();
        self.row(&fields);
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Sup-norm comparison of the two tails at a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailDistance {
    pub t: f64,
    pub max: f64,
    pub probes: Vec<TailProbe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailProbe {
    pub x: f64,
    pub diffusive: f64,
    pub classical: f64,
}

/// `count` probes at the initial-tail quantiles `(k + 1/2) / count`.
pub fn quantile_probes(data: &InitialData, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|k| data.tail_quantile((k as f64 + 0.5) / count as f64))
        .collect()
}

fn sup_distance(
    probes: &[f64],
    a: impl Fn(f64) -> Result<f64>,
    b: impl Fn(f64) -> Result<f64>,
) -> Result<Vec<TailProbe>> {
    probes
        .iter()
        .map(|&x| {
            Ok(TailProbe {
                x,
                diffusive: a(x)?,
                classical: b(x)?,
            })
        })
        .collect()
}

/// `max_x |∫_x^∞ c_ε(·, t) - w0(F(x, t))|` over `probes`, where `t` is the
/// time of `snapshot`.
pub fn tail_distance(
    grid: &Grid,
    snapshot: &ContinuousState,
    classical: &ClassicalState,
    t: f64,
    probes: &[f64],
) -> Result<TailDistance> {
    if (snapshot.t - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::TimeMismatch {
            left: snapshot.t,
            right: t,
        });
    }
    if t > classical.t + 1e-9 * t.abs().max(1.0) {
        return Err(Error::TimeMismatch {
            left: t,
            right: classical.t,
        });
    }
    let rows = sup_distance(
        probes,
        |x| Ok(snapshot.tail(grid, x)),
        |x| classical.tail(x, t),
    )?;
    let max = rows
        .iter()
        .map(|r| (r.diffusive - r.classical).abs())
        .fold(0.0, f64::max);
    Ok(TailDistance {
        t,
        max,
        probes: rows,
    })
}

fn lambda_checks(series: &TrajectorySeries, slack: f64, with_l: bool) -> Vec<Check> {
    let s = &series.samples;
    let worst_drop = s
        .windows(2)
        .map(|w| (w[0].lambda - w[1].lambda) / w[0].lambda.abs().max(1e-300))
        .fold(0.0, f64::max);
    let mut out = vec![Check::at_most("lambda_nondecreasing", worst_drop, slack)];
    if with_l {
        let excess = s
            .iter()
            .map(|x| (x.l - x.lambda) / x.lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(Check::at_most("l_below_lambda", excess, slack));
    }
    out
}

fn kohn_otto_checks(
    series: &TrajectorySeries,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    if series.len() < 8 {
        return Ok(serde_json::Value::Null);
    }
    let r = kohn_otto_report(series)?;
    checks.push(Check::flag("energy_nonincreasing", r.energy_nonincreasing));
    checks.push(Check::flag("em_lower_bound", r.em_ok));
    checks.push(Check::flag(
        "dissipation_ratio_bounded",
        r.dissipation_ratio_bounded,
    ));
    if r.ladder_start.is_some() {
        checks.push(Check::flag("coarsening_ladder_bounded", r.ladder_bounded));
    }
    Ok(serde_json::to_value(r)?)
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("snapshots"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn snapshot(&self, name: &str) -> PathBuf {
        self.dir.join("snapshots").join(name)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }
}

/// Runs an experiment and writes its artifacts under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let hash = config.hash();
    let out = Output::create(out_dir)?;
    out.json("config.json", config)?;
    let tol = &config.tolerances;
    let mut checks = Vec::new();
    let report = match config.kind {
        ExperimentKind::Bd => {
            bd_experiment(config.bd.as_ref().unwrap(), &hash, tol, &out, &mut checks)?
        }
        ExperimentKind::Classical => classical_experiment(
            config.classical.as_ref().unwrap(),
            &hash,
            tol,
            &out,
            &mut checks,
        )?,
        ExperimentKind::Diffusive => diffusive_experiment(
            config.diffusive.as_ref().unwrap(),
            &hash,
            tol,
            &out,
            &mut checks,
        )?,
        ExperimentKind::Sweep => sweep_experiment(
            config.sweep.as_ref().unwrap(),
            &hash,
            tol,
            &out,
            &mut checks,
        )?,
        ExperimentKind::McCheck => mc_experiment(
            config.mc.as_ref().unwrap(),
            config.seed,
            tol,
            &out,
            &mut checks,
        )?,
        ExperimentKind::Duality => duality_experiment(
            config.duality.as_ref().unwrap(),
            &hash,
            tol,
            &out,
            &mut checks,
        )?,
    };
    let summary = Summary {
        kind: config.kind,
        config_hash: hash,
        passed: checks.iter().all(|c| c.passed),
        checks,
        report,
    };
    out.json("summary.json", &summary)?;
    Ok(summary)
}

fn bd_experiment(
    exp: &BdExperiment,
    hash: &str,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let config = exp.run_config()?;
    let run = run_bd(&config, hash)?;
    write_bd(&run, &config, out)?;
    let s = &run.series.samples;
    let mass0 = s[0].mass;
    checks.push(Check::at_most(
        "mass_drift",
        run.series.max_mass_drift() / mass0.abs().max(f64::MIN_POSITIVE),
        tol.mass_drift,
    ));
    let dirichlet = matches!(config.closure, Closure::Dirichlet);
    checks.extend(lambda_checks(&run.series, tol.monotone_slack, dirichlet));
    if dirichlet {
        let z_s = config.model.z_s;
        let min_c1 = s
            .iter()
            .filter_map(|x| x.monomer)
            .fold(f64::INFINITY, f64::min);
        checks.push(Check {
            name: "monomer_supersaturated".into(),
            passed: min_c1 > z_s,
            value: min_c1,
            threshold: z_s,
        });
        let g_decreasing = s.windows(2).all(|w| w[1].number < w[0].number);
        checks.push(Check::flag("cluster_number_decreasing", g_decreasing));
    }
    Ok(json!({
        "solver": run.series.solver,
        "samples": run.series.len(),
        "accepted_steps": run.accepted_steps,
        "rejected_steps": run.rejected_steps,
        "max_mass_drift": run.series.max_mass_drift(),
    }))
}

fn write_bd(run: &BdRun, config: &BdRunConfig, out: &Output) -> Result<()> {
    let counts_monomers = config.closure.first_counted() == 1;
    let mut t = Table::new("t,mass,c1,g,Lambda");
    for s in &run.series.samples {
        let c1 = s.monomer.unwrap_or(f64::NAN);
        let g = if counts_monomers {
            s.number - c1
        } else {
            s.number
        };
        t.nums(&[s.t, s.mass, c1, g, s.lambda]);
    }
    t.write(&out.file("series.csv"))?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        let mut t = Table::new("t,ell,c");
        for (i, c) in snap.c.iter().enumerate() {
            t.row(&[num(snap.t), (i + 1).to_string(), num(*c)]);
        }
        t.write(&out.snapshot(&format!("bd_{k:04}.csv")))?;
    }
    Ok(())
}

fn classical_experiment(
    config: &ClassicalConfig,
    hash: &str,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let run = run_classical(config, hash)?;
    write_classical(&run, out, "series.csv", "tail")?;
    checks.push(Check::at_most(
        "mass_residual",
        run.max_mass_residual(),
        tol.classical_mass,
    ));
    checks.extend(lambda_checks(&run.series, tol.monotone_slack, true));
    let ko = kohn_otto_checks(&run.series, checks)?;
    Ok(json!({
        "solver": run.series.solver,
        "samples": run.series.len(),
        "max_mass_residual": run.max_mass_residual(),
        "kohn_otto": ko,
    }))
}

fn write_classical(
    run: &ClassicalRun,
    out: &Output,
    series_name: &str,
    prefix: &str,
) -> Result<()> {
    let mut t = Table::new("t,L,Lambda,N,mass_residual");
    for (s, m) in run.series.samples.iter().zip(&run.moments) {
        t.nums(&[s.t, s.l, s.lambda, s.number, m.mass - 1.0]);
    }
    t.write(&out.file(series_name))?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        let mut t = Table::new("t,x,w");
        for (x, w) in snap.x.iter().zip(&snap.w) {
            t.nums(&[snap.t, *x, *w]);
        }
        t.write(&out.snapshot(&format!("{prefix}_{k:04}.csv")))?;
    }
    Ok(())
}

fn diffusive_experiment(
    config: &DiffusiveConfig,
    hash: &str,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let run = run_diffusive(config, hash)?;
    write_diffusive(&run, &out.file("series.csv"), out, "state")?;
    if matches!(config.l_mode, LMode::Conserve) {
        checks.push(Check::at_most(
            "mass_drift",
            run.max_mass_drift(),
            tol.mass_drift,
        ));
    }
    checks.extend(lambda_checks(&run.series, tol.monotone_slack, true));
    let ko = kohn_otto_checks(&run.series, checks)?;
    Ok(json!({
        "solver": run.series.solver,
        "samples": run.series.len(),
        "steps": run.steps,
        "max_mass_drift": run.max_mass_drift(),
        "kohn_otto": ko,
    }))
}

fn write_diffusive(
    run: &DiffusiveRun,
    series_path: &Path,
    out: &Output,
    prefix: &str,
) -> Result<()> {
    let mut t = Table::new("t,L,Lambda,E,M,N,mass_residual");
    let mass0 = run.series.samples[0].mass;
    for s in &run.series.samples {
        t.nums(&[
            s.t,
            s.l,
            s.lambda,
            s.energy,
            s.length_scale,
            s.number,
            s.mass - mass0,
        ]);
    }
    t.write(series_path)?;
    let centers = run.grid.centers();
    for (k, snap) in run.snapshots.iter().enumerate() {
        let mut t = Table::new("t,x_center,c");
        for (x, c) in centers.iter().zip(&snap.cbar) {
            t.nums(&[snap.t, *x, *c]);
        }
        t.write(&out.snapshot(&format!("{prefix}_{k:04}.csv")))?;
    }
    Ok(())
}

/// One rung of an ε sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub tail_distance: f64,
    pub max_l_difference: f64,
    pub rate: f64,
    pub rate_difference: f64,
    pub mass_drift: f64,
    pub probes: Vec<TailProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub t_final: f64,
    pub classical_rate_fd: f64,
    pub classical_rate_semi_analytic: f64,
    pub classical_mass_residual: f64,
    pub rows: Vec<SweepRow>,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Runs the classical limit and every rung of the ladder (in parallel) and
/// compares them at `T`.
pub fn run_sweep(
    config: &SweepConfig,
    hash: &str,
) -> Result<(SweepReport, ClassicalRun, Vec<DiffusiveRun>)> {
    config.validate()?;
    let t = config.t_final;
    let (classical, diffusive) = rayon::join(
        || run_classical(&config.classical(), hash),
        || {
            config
                .eps_ladder
                .par_iter()
                .map(|&eps| run_diffusive(&config.diffusive(eps), hash))
                .collect::<Vec<_>>()
        },
    );
    let classical = classical?;
    let diffusive = diffusive.into_iter().collect::<Result<Vec<_>>>()?;
    let data = config.initial.build()?;
    let probes = quantile_probes(&data, TAIL_PROBES)?;
    let semi = classical.state.semi_analytic_rate(t)?;
    let fd = coarsening_rate(&classical.series, t)?.rate;
    let mut rows = Vec::with_capacity(diffusive.len());
    for (eps, run) in config.eps_ladder.iter().zip(&diffusive) {
        let snap = run
            .snapshots
            .iter()
            .find(|s| (s.t - t).abs() <= 1e-9 * t.max(1.0))
            .ok_or(Error::TimeMismatch {
                left: run.final_state.t,
                right: t,
            })?;
        let td = tail_distance(&run.grid, snap, &classical.state, t, &probes)?;
        let max_l_difference = run
            .series
            .samples
            .iter()
            .filter(|s| s.t <= t * (1.0 + 1e-12))
            .map(|s| Ok((s.l - classical.history().eval(s.t)?).abs()))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let rate = coarsening_rate(&run.series, t)?.rate;
        rows.push(SweepRow {
            eps: *eps,
            tail_distance: td.max,
            max_l_difference,
            rate,
            rate_difference: (rate - semi).abs(),
            mass_drift: run.max_mass_drift(),
            probes: td.probes,
        });
    }
    let report = SweepReport {
        t_final: t,
        classical_rate_fd: fd,
        classical_rate_semi_analytic: semi,
        classical_mass_residual: classical.max_mass_residual(),
        rows,
    };
    Ok((report, classical, diffusive))
}

impl SweepReport {
    pub fn checks(&self, tol: &Tolerances) -> Vec<Check> {
        let col = |f: fn(&SweepRow) -> f64| self.rows.iter().map(f).collect::<Vec<_>>();
        let rel = (self.classical_rate_fd - self.classical_rate_semi_analytic).abs()
            / self.classical_rate_semi_analytic.abs();
        vec![
            Check::flag(
                "tail_distance_decreasing",
                strictly_decreasing(&col(|r| r.tail_distance)),
            ),
            Check::flag(
                "l_difference_decreasing",
                strictly_decreasing(&col(|r| r.max_l_difference)),
            ),
            Check::flag(
                "rate_difference_decreasing",
                strictly_decreasing(&col(|r| r.rate_difference)),
            ),
            Check::at_most("classical_rate_agreement", rel, tol.rate_agreement),
            Check::at_most(
                "classical_mass_residual",
                self.classical_mass_residual,
                tol.classical_mass,
            ),
        ]
    }
}

fn sweep_experiment(
    config: &SweepConfig,
    hash: &str,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let (report, classical, diffusive) = run_sweep(config, hash)?;
    let mut t = Table::new("eps,tail_distance,max_L_difference,rate,rate_difference,mass_drift");
    for r in &report.rows {
        t.nums(&[
            r.eps,
            r.tail_distance,
            r.max_l_difference,
            r.rate,
            r.rate_difference,
            r.mass_drift,
        ]);
    }
    t.write(&out.file("series.csv"))?;
    write_classical(
        &classical,
        out,
        "snapshots/classical_series.csv",
        "classical_tail",
    )?;
    for (i, (run, row)) in diffusive.iter().zip(&report.rows).enumerate() {
        let mut t = Table::new("t,x,diffusive,classical");
        for p in &row.probes {
            t.nums(&[report.t_final, p.x, p.diffusive, p.classical]);
        }
        t.write(&out.snapshot(&format!("tails_eps{i}.csv")))?;
        write_diffusive(
            run,
            &out.snapshot(&format!("series_eps{i}.csv")),
            out,
            &format!("eps{i}_state"),
        )?;
    }
    checks.extend(report.checks(tol));
    Ok(serde_json::to_value(report)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McProbe {
    pub x: f64,
    pub pde: f64,
    pub grid_tolerance: f64,
    pub record: McRecord,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub probes: Vec<McProbe>,
    pub agreeing: usize,
    pub duality: Option<serde_json::Value>,
}

fn adjoint_on(config: &McCheckConfig, cells: usize, payoff: &Payoff) -> Result<(Grid, Vec<f64>)> {
    let grid = Grid::for_eps(config.eps, cells, config.x_max)?;
    let dx_min = grid.widths()[0];
    let n_steps = (config.t_final / (0.4 * dx_min)).ceil() as usize;
    let w = adjoint_solve(
        payoff,
        config.t_final,
        &config.history(),
        config.eps,
        &grid,
        n_steps,
    )?;
    Ok((grid, w))
}

/// Survival estimates at each probe against the backward PDE. The grid
/// tolerance is the change from half the cells.
pub fn run_mc_check(config: &McCheckConfig, seed: u64, sigmas: f64) -> Result<McReport> {
    config.validate()?;
    let payoff = Payoff::One;
    let (fine, coarse) = rayon::join(
        || adjoint_on(config, config.cells, &payoff),
        || adjoint_on(config, config.cells / 2, &payoff),
    );
    let ((g_fine, w_fine), (g_coarse, w_coarse)) = (fine?, coarse?);
    let mc = config.mc(seed);
    let mut probes = Vec::new();
    for &x in &config.probes {
        let est = estimate_survival_payoff(&mc, x, &payoff)?;
        let pde = interpolate_centers(&g_fine, &w_fine, x);
        let grid_tolerance = (pde - interpolate_centers(&g_coarse, &w_coarse, x)).abs();
        probes.push(McProbe {
            x,
            pde,
            grid_tolerance,
            agrees: (est.mean - pde).abs() <= sigmas * (est.stderr + grid_tolerance),
            record: McRecord::new(&mc, &payoff, x, &est),
        });
    }
    let duality = if config.duality_paths > 0 {
        let forward_cfg = DiffusiveConfig {
            initial: config.initial.clone(),
            eps: config.eps,
            cells: config.cells,
            x_max: config.x_max,
            t_end: config.t_final,
            output_stride: config.t_final / 5.0,
            l_mode: LMode::Prescribed {
                history: config.history(),
            },
            ..DiffusiveConfig::default()
        };
        let run = run_diffusive(&forward_cfg, "mc-duality")?;
        let forward = pairing(&payoff.on_grid(&run.grid), &run.final_state.cbar, &run.grid);
        let data = config.initial.build()?;
        let dual = McConfig {
            n_paths: config.duality_paths,
            ..mc.clone()
        };
        let est = estimate_duality(&dual, &data, &payoff)?;
        Some(json!({
            "forward": forward,
            "mc_mean": est.mean,
            "mc_stderr": est.stderr,
            "agrees": (est.mean - forward).abs() <= sigmas * est.stderr,
        }))
    } else {
        None
    };
    Ok(McReport {
        agreeing: probes.iter().filter(|p| p.agrees).count(),
        probes,
        duality,
    })
}

fn mc_experiment(
    config: &McCheckConfig,
    seed: u64,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let report = run_mc_check(config, seed, tol.mc_sigmas)?;
    let mut t = Table::new("x,mc_mean,mc_stderr,pde,grid_tolerance,agrees");
    for p in &report.probes {
        t.row(&[
            num(p.x),
            num(p.record.mean),
            num(p.record.stderr),
            num(p.pde),
            num(p.grid_tolerance),
            p.agrees.to_string(),
        ]);
    }
    t.write(&out.file("series.csv"))?;
    let records: Vec<&McRecord> = report.probes.iter().map(|p| &p.record).collect();
    out.json("snapshots/estimates.json", &records)?;
    let n = report.probes.len();
    checks.push(Check::at_least(
        "mc_pde_agreement",
        report.agreeing as f64,
        n.saturating_sub(1).max(1) as f64,
    ));
    let bounded = report
        .probes
        .iter()
        .all(|p| (0.0..=1.0).contains(&p.record.mean));
    checks.push(Check::flag("estimates_in_unit_interval", bounded));
    if let Some(d) = &report.duality {
        checks.push(Check::flag(
            "mc_duality",
            d["agrees"].as_bool().unwrap_or(false),
        ));
    }
    Ok(serde_json::to_value(report)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityRow {
    pub payoff: String,
    pub cells: usize,
    pub refined_cells: usize,
    pub residual: f64,
    pub refined_residual: f64,
    pub ratio: f64,
    pub forward: f64,
    pub backward: f64,
}

/// Duality residuals for every payoff at `cells` and `2 · cells`.
pub fn run_duality(config: &DualityConfig, hash: &str) -> Result<Vec<DualityRow>> {
    config.validate()?;
    let (base, fine) = rayon::join(
        || run_diffusive(&config.forward(config.cells), hash),
        || run_diffusive(&config.forward(2 * config.cells), hash),
    );
    let (base, fine) = (base?, fine?);
    config
        .payoffs
        .iter()
        .map(|p| {
            let a = duality_check(&base, p)?;
            let b = duality_check(&fine, p)?;
            Ok(DualityRow {
                payoff: p.label(),
                cells: config.cells,
                refined_cells: 2 * config.cells,
                residual: a.residual,
                refined_residual: b.residual,
                ratio: b.residual / a.residual,
                forward: a.forward,
                backward: a.backward,
            })
        })
        .collect()
}

fn duality_experiment(
    config: &DualityConfig,
    hash: &str,
    tol: &Tolerances,
    out: &Output,
    checks: &mut Vec<Check>,
) -> Result<serde_json::Value> {
    let rows = run_duality(config, hash)?;
    let mut t = Table::new("payoff,cells,forward,backward,residual,refined_residual,ratio");
    for r in &rows {
        t.row(&[
            r.payoff.clone(),
            r.cells.to_string(),
            num(r.forward),
            num(r.backward),
            num(r.residual),
            num(r.refined_residual),
            num(r.ratio),
        ]);
    }
    t.write(&out.file("series.csv"))?;
    for (r, p) in rows.iter().zip(&config.payoffs) {
        if matches!(p, Payoff::One) {
            checks.push(Check::at_most(
                "duality_residual_one",
                r.residual,
                tol.duality_residual,
            ));
        }
        checks.push(Check::at_most(
            &format!("halving_{}", r.payoff),
            (r.ratio / 0.5 - 1.0).abs(),
            tol.halving_band,
        ));
    }
    Ok(serde_json::to_value(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_validation_names_the_field() {
        assert!(validate_ladder(&[0.2, 0.1, 0.05], "sweep.eps_ladder").is_ok());
        for bad in [
            vec![0.2, 0.0],
            vec![0.1, 0.2],
            vec![1.5],
            vec![],
            vec![0.1, 0.1],
        ] {
            match validate_ladder(&bad, "sweep.eps_ladder") {
                Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "sweep.eps_ladder"),
                other => panic!("{bad:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_configs_exit_two() {
        let mut c = ExperimentConfig::new(ExperimentKind::Sweep);
        c.sweep = Some(SweepConfig {
            eps_ladder: vec![0.2, 0.0],
            ..SweepConfig::default()
        });
        let err = c.validate().unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("sweep.eps_ladder"));

        let missing = ExperimentConfig::new(ExperimentKind::Duality);
        assert!(missing
            .validate()
            .unwrap_err()
            .to_string()
            .contains("duality"));

        let err =
            ExperimentConfig::from_json(r#"{"schema_version": 9, "kind": "bd"}"#).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
        let err = ExperimentConfig::from_json("{not json").unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert_eq!(exit_code(&Error::EmptyDistribution), 3);
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let mut c = ExperimentConfig::new(ExperimentKind::Sweep);
        c.sweep = Some(SweepConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        c.seed = 1;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn kinds_parse() {
        for k in [
            "bd",
            "classical",
            "diffusive",
            "sweep",
            "mc-check",
            "duality",
        ] {
            let kind: ExperimentKind = k.parse().unwrap();
            assert_eq!(kind.as_str(), k);
        }
        assert!("nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn identical_tails_have_zero_distance() {
        let data = InitialDataSpec::exponential().build().unwrap();
        let probes = quantile_probes(&data, TAIL_PROBES).unwrap();
        assert_eq!(probes.len(), 16);
        assert!(probes.windows(2).all(|w| w[1] < w[0]));
        let rows = sup_distance(&probes, |x| Ok(data.tail(x)), |x| Ok(data.tail(x))).unwrap();
        assert!(rows.iter().all(|r| r.diffusive == r.classical));
    }

    #[test]
    fn far_probe_tails_are_negligible() {
        let config = ClassicalConfig {
            t_end: 0.1,
            dt: 0.01,
            output_stride: 0.05,
            ..ClassicalConfig::default()
        };
        let classical = run_classical(&config, "t").unwrap();
        let dconf = DiffusiveConfig {
            eps: 0.1,
            cells: 256,
            x_max: 80.0,
            t_end: 0.1,
            output_stride: 0.05,
            ..DiffusiveConfig::default()
        };
        let run = run_diffusive(&dconf, "t").unwrap();
        let td =
            tail_distance(&run.grid, &run.final_state, &classical.state, 0.1, &[45.0]).unwrap();
        assert!(td.probes[0].diffusive < 1e-10 && td.probes[0].classical < 1e-10);
        assert!(td.max < 1e-10);
        let err =
            tail_distance(&run.grid, &run.snapshots[0], &classical.state, 0.1, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::TimeMismatch { .. }));
    }

    #[test]
    fn bd_experiment_resolves_initial_data() {
        let exp = BdExperiment {
            model: RateModel::default(),
            closure: ClosureKind::Full,
            initial: BdInitial::Equilibrium { c1: 0.9 },
            l_max: 50,
            t_end: 1.0,
            dt_init: 1e-3,
            scheme: BdScheme::SemiImplicit,
            output_stride: 0.1,
            snapshot_every: 5,
            rtol: 1e-8,
            atol: 1e-12,
        };
        let cfg = exp.run_config().unwrap();
        assert_eq!(cfg.initial.len(), 50);
        let Closure::Full { rho } = cfg.closure else {
            panic!()
        };
        assert!(rho > 0.9);
        let bad = BdExperiment {
            initial: BdInitial::Explicit {
                gamma: vec![1.0; 3],
            },
            ..exp
        };
        assert!(matches!(bad.run_config(), Err(Error::InvalidConfig { .. })));
    }
}
