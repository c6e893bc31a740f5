//! Time integration of the truncated Becker-Döring system.
//!
//! Two closures determine the monomer density `c1`:
//!
//! * [`Closure::Full`]: total mass `Σ_{l≥1} l c_l = ρ` fixes
//!   `c1 = max(ρ - Σ_{l≥2} l c_l, 0)`.
//! * [`Closure::Dirichlet`]: `c(1, t) = 0` inside the flux `J_1`, and `c1`
//!   multiplying the aggregation rates is chosen by the flux-balance formula
//!   that keeps `Σ_{l≥2} l c_l = 1`.
//!
//! In both cases `c1` is re-evaluated from the state at every stage of a
//! step, so mass conservation is structural: the semi-implicit scheme solves
//! for `c1` at the new time level and every explicit Runge-Kutta stage sees a
//! right-hand side with zero weighted sum.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{Sample, SizeDistribution, TrajectorySeries};
use crate::error::{Error, Result};
use crate::numeric::{brent, dopri5_step_vec, solve_tridiagonal};
use crate::rates::RateModel;

/// Negative densities above this magnitude are clipped to zero.
pub const CLIP_THRESHOLD: f64 = 1e-14;

/// Top-bin density (relative to `mass / l_max`) that signals truncation
/// saturation.
pub const SATURATION_FRACTION: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Closure {
    Full { rho: f64 },
    Dirichlet,
}

impl Closure {
    /// First cluster size counted by moments of this closure.
    pub fn first_counted(&self) -> usize {
        match self {
            Closure::Full { .. } => 1,
            Closure::Dirichlet => 2,
        }
    }

    pub fn conserved_mass(&self) -> f64 {
        match self {
            Closure::Full { rho } => *rho,
            Closure::Dirichlet => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BdScheme {
    /// trapezoidal rule, monomer density solved at the new level
    #[default]
    SemiImplicit,
    /// embedded Dormand-Prince 5(4)
    ExplicitAdaptive,
}

/// Cluster densities `c_l` for `l = 1..=l_max` (index `l - 1`) at time `t`.
///
/// Slot 0 holds the monomer density given by the closure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteState {
    pub c: Vec<f64>,
    pub t: f64,
}

impl DiscreteState {
    pub fn new(c: Vec<f64>, t: f64) -> Self {
        Self { c, t }
    }

    pub fn l_max(&self) -> usize {
        self.c.len()
    }

    /// `c_l`, zero outside the stored range.
    pub fn get(&self, ell: usize) -> f64 {
        if ell == 0 || ell > self.c.len() {
            0.0
        } else {
            self.c[ell - 1]
        }
    }

    /// View restricted to cluster sizes `first..=l_max`.
    pub fn counted(&self, first: usize) -> DiscreteView<'_> {
        DiscreteView {
            c: &self.c[first - 1..],
            first,
        }
    }

    /// `Σ_{l≥2} l c_l`
    pub fn excess_mass(&self) -> f64 {
        self.c
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, c)| (i + 1) as f64 * c)
            .sum()
    }
}

/// Moments over a contiguous range of cluster sizes.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteView<'a> {
    c: &'a [f64],
    first: usize,
}

impl SizeDistribution for DiscreteView<'_> {
    fn moment(&self, p: f64) -> f64 {
        self.c
            .iter()
            .enumerate()
            .map(|(i, c)| c * ((i + self.first) as f64).powf(p))
            .sum()
    }

    fn edge_moment(&self, p: f64) -> f64 {
        let last = self.c.len() - 1;
        self.c[last] * ((last + self.first) as f64).powf(p)
    }
}

/// Flux `J_l = a_l c1 c_l - b_{l+1} c_{l+1}` read from the state; zero at
/// the truncation level.
pub fn bd_flux(state: &DiscreteState, model: &RateModel, c1: f64, ell: usize) -> Result<f64> {
    let l_max = state.l_max();
    if ell == 0 || ell > l_max {
        return Err(Error::invalid(format!(
            "flux index {ell} outside 1..={l_max}"
        )));
    }
    if ell == l_max {
        return Ok(0.0);
    }
    Ok(model.a(ell) * c1 * state.get(ell) - model.b(ell + 1) * state.get(ell + 1))
}

/// `c1 = max(ρ - Σ_{l≥2} l c_l, 0)`.
pub fn monomer_closure_full(state: &DiscreteState, rho: f64) -> f64 {
    (rho - state.excess_mass()).max(0.0)
}

fn dirichlet_c1(y: &[f64], model: &RateModel) -> Result<f64> {
    // y[j] = c_{j+2}; the top bin has no aggregation flux, so the
    // denominator stops one short of l_max
    let n = y.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, &c) in y.iter().enumerate() {
        let ell = j + 2;
        num += model.b(ell) * c;
        if j + 1 < n {
            den += model.a(ell) * c;
        }
    }
    num += model.b(2) * y[0];
    if !(den > 0.0) {
        return Err(Error::DegenerateState(
            "no clusters below the truncation level".into(),
        ));
    }
    Ok(num / den)
}

/// `c1 = z_s + [a1 q Σ c_l + b_2 c_2] / Σ a_l c_l` over `l ≥ 2`.
pub fn monomer_closure_dirichlet(state: &DiscreteState, model: &RateModel) -> Result<f64> {
    if state.l_max() < 3 {
        return Err(Error::invalid("Dirichlet closure needs l_max >= 3"));
    }
    dirichlet_c1(&state.c[1..], model)
}

fn closure_c1(y: &[f64], model: &RateModel, closure: &Closure) -> Result<f64> {
    match closure {
        Closure::Full { rho } => {
            let excess: f64 = y.iter().enumerate().map(|(j, c)| (j + 2) as f64 * c).sum();
            Ok((rho - excess).max(0.0))
        }
        Closure::Dirichlet => dirichlet_c1(y, model),
    }
}

/// Tridiagonal generator of the linear system for `c_l`, `l ≥ 2`, at fixed
/// monomer density, plus the source entering `dc_2/dt` through `J_1`.
struct Generator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    source: f64,
}

struct RateCache {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl RateCache {
    fn new(model: &RateModel, l_max: usize) -> Self {
        Self {
            a: (0..=l_max + 1)
                .map(|l| if l == 0 { 0.0 } else { model.a(l) })
                .collect(),
            b: (0..=l_max + 1)
                .map(|l| if l == 0 { 0.0 } else { model.b(l) })
                .collect(),
        }
    }

    fn generator(&self, n: usize, c1: f64, closure: &Closure) -> Generator {
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for j in 0..n {
            let ell = j + 2;
            let top = j + 1 == n;
            diag[j] = -self.b[ell] - if top { 0.0 } else { self.a[ell] * c1 };
            if j > 0 {
                lower[j] = self.a[ell - 1] * c1;
            }
            if !top {
                upper[j] = self.b[ell + 1];
            }
        }
        let source = match closure {
            Closure::Full { .. } => self.a[1] * c1 * c1,
            Closure::Dirichlet => 0.0,
        };
        Generator {
            lower,
            diag,
            upper,
            source,
        }
    }
}

impl Generator {
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut v = self.diag[j] * y[j];
            if j > 0 {
                v += self.lower[j] * y[j - 1];
            }
            if j + 1 < n {
                v += self.upper[j] * y[j + 1];
            }
            out[j] = v;
        }
        out[0] += self.source;
        out
    }
}

/// `dc_l/dt = J_{l-1} - J_l` for `l ≥ 2` (slot 0 is zero: `c1` is algebraic).
pub fn bd_rhs(state: &DiscreteState, model: &RateModel, closure: &Closure) -> Result<Vec<f64>> {
    if state.l_max() < 3 {
        return Err(Error::invalid("l_max must be >= 3"));
    }
    let y = &state.c[1..];
    let c1 = closure_c1(y, model, closure)?;
    let cache = RateCache::new(model, state.l_max());
    let mut out = vec![0.0];
    out.extend(cache.generator(y.len(), c1, closure).apply(y));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdRunConfig {
    pub model: RateModel,
    pub closure: Closure,
    /// initial densities `γ_l`, `l = 1..=l_max`
    pub initial: Vec<f64>,
    pub t_end: f64,
    pub dt_init: f64,
    #[serde(default)]
    pub scheme: BdScheme,
    /// time between recorded samples
    pub output_stride: f64,
    /// record a distribution snapshot every this many samples
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    /// relative mass drift that aborts the run
    #[serde(default = "default_mass_tol")]
    pub mass_tol: f64,
}

fn default_snapshot_every() -> usize {
    10
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-12
}
fn default_mass_tol() -> f64 {
    1e-9
}

impl BdRunConfig {
    pub fn l_max(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.initial.len() < 3 {
            return Err(Error::config("bd.initial", "need at least 3 cluster sizes"));
        }
        if let Some((i, g)) = self
            .initial
            .iter()
            .enumerate()
            .find(|(_, g)| !(**g >= 0.0 && g.is_finite()))
        {
            return Err(Error::config(
                "bd.initial",
                format!("gamma_{} = {g} is not a nonnegative number", i + 1),
            ));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::config("bd.t_end", "must be positive"));
        }
        if !(self.dt_init > 0.0) {
            return Err(Error::config("bd.dt_init", "must be positive"));
        }
        if !(self.output_stride > 0.0) {
            return Err(Error::config("bd.output_stride", "must be positive"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.mass_tol > 0.0) {
            return Err(Error::config("bd.rtol", "tolerances must be positive"));
        }
        let weighted: f64 = self
            .initial
            .iter()
            .enumerate()
            .map(|(i, g)| (i + 1) as f64 * g)
            .sum();
        match self.closure {
            Closure::Full { rho } => {
                if !(rho > 0.0) {
                    return Err(Error::config("bd.closure.rho", "must be positive"));
                }
                if (weighted - rho).abs() > 1e-10 * rho {
                    return Err(Error::config(
                        "bd.initial",
                        format!("sum l*gamma_l = {weighted} differs from rho = {rho}"),
                    ));
                }
            }
            Closure::Dirichlet => {
                if self.initial[0] != 0.0 {
                    return Err(Error::config(
                        "bd.initial",
                        "gamma_1 must be 0 for the Dirichlet closure",
                    ));
                }
                if (weighted - 1.0).abs() > 1e-10 {
                    return Err(Error::config(
                        "bd.initial",
                        format!(
                            "sum l*gamma_l = {weighted} must equal 1 for the Dirichlet closure"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Equilibrium initial data `γ_l = Q_l c1^l` with `ρ` matching it.
pub fn equilibrium_initial(model: &RateModel, c1: f64, l_max: usize) -> Result<(Vec<f64>, f64)> {
    let table = crate::rates::equilibrium_table(model, l_max)?;
    let gamma = table.profile(c1);
    let rho = gamma
        .iter()
        .enumerate()
        .map(|(i, g)| (i + 1) as f64 * g)
        .sum();
    Ok((gamma, rho))
}

/// Flat band `γ_l ∝ 1` on `lo..=hi`, normalised to `Σ l γ_l = 1`, zero
/// elsewhere (Dirichlet-closure data).
pub fn band_initial(lo: usize, hi: usize, l_max: usize) -> Result<Vec<f64>> {
    if lo < 2 || hi < lo || hi >= l_max {
        return Err(Error::invalid("band must satisfy 2 <= lo <= hi < l_max"));
    }
    let weight: f64 = (lo..=hi).map(|l| l as f64).sum();
    Ok((1..=l_max)
        .map(|l| {
            if (lo..=hi).contains(&l) {
                1.0 / weight
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct BdRun {
    pub series: TrajectorySeries,
    pub snapshots: Vec<DiscreteState>,
    pub final_state: DiscreteState,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

struct Integrator<'a> {
    config: &'a BdRunConfig,
    cache: RateCache,
}

impl Integrator<'_> {
    fn c1(&self, y: &[f64]) -> Result<f64> {
        closure_c1(y, &self.config.model, &self.config.closure)
    }

    fn rhs(&self, y: &[f64]) -> Result<Vec<f64>> {
        let c1 = self.c1(y)?;
        Ok(self
            .cache
            .generator(y.len(), c1, &self.config.closure)
            .apply(y))
    }

    /// Trapezoidal step with the new monomer density solved from the closure
    /// applied to the new state.
    fn trapezoid(&self, y: &[f64], h: f64) -> Result<Vec<f64>> {
        let closure = &self.config.closure;
        let n = y.len();
        let c1_old = self.c1(y)?;
        let g_old = self.cache.generator(n, c1_old, closure);
        let explicit: Vec<f64> = g_old
            .apply(y)
            .iter()
            .zip(y)
            .map(|(f, y)| y + 0.5 * h * f)
            .collect();
        let solve = |c1: f64| -> Vec<f64> {
            let g = self.cache.generator(n, c1, closure);
            let lower: Vec<f64> = g.lower.iter().map(|v| -0.5 * h * v).collect();
            let upper: Vec<f64> = g.upper.iter().map(|v| -0.5 * h * v).collect();
            let diag: Vec<f64> = g.diag.iter().map(|v| 1.0 - 0.5 * h * v).collect();
            let mut rhs = explicit.clone();
            rhs[0] += 0.5 * h * g.source;
            solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
            rhs
        };
        let residual = |c1: f64| -> f64 {
            match closure_c1(&solve(c1), &self.config.model, closure) {
                Ok(v) => v - c1,
                Err(_) => f64::NAN,
            }
        };
        let tol = 1e-15 * c1_old.abs().max(1.0);

        // secant from the explicit guess, Brent on a bracket if that stalls
        let mut x0 = c1_old;
        let mut r0 = residual(x0);
        let mut x1 = x0 + r0;
        let mut converged = r0.abs() <= tol;
        if !converged {
            for _ in 0..30 {
                let r1 = residual(x1);
                if !r1.is_finite() {
                    break;
                }
                if r1.abs() <= tol {
                    x0 = x1;
                    converged = true;
                    break;
                }
                let denom = r1 - r0;
                if denom == 0.0 {
                    break;
                }
                let x2 = x1 - r1 * (x1 - x0) / denom;
                x0 = x1;
                r0 = r1;
                x1 = x2;
                if (x1 - x0).abs() <= tol {
                    x0 = x1;
                    converged = true;
                    break;
                }
            }
        }
        let c1_new = if converged {
            x0
        } else {
            let (lo, mut hi) = match closure {
                Closure::Full { rho } => (0.0, *rho),
                Closure::Dirichlet => (
                    self.config.model.z_s,
                    2.0 * c1_old.max(self.config.model.z_s),
                ),
            };
            let mut expand = 0;
            while residual(hi) > 0.0 && expand < 60 {
                hi *= 2.0;
                expand += 1;
            }
            brent(residual, lo, hi, tol, 200)?
        };
        Ok(solve(c1_new))
    }
}

fn error_norm(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (atol + rtol * x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

/// Integrates the configured system to `t_end`, sampling every
/// `output_stride`.
pub fn run_bd(config: &BdRunConfig, config_hash: &str) -> Result<BdRun> {
    config.validate()?;
    let l_max = config.l_max();
    let integrator = Integrator {
        config,
        cache: RateCache::new(&config.model, l_max),
    };
    let mass_ref = config.closure.conserved_mass();
    let saturation = SATURATION_FRACTION * mass_ref / l_max as f64;
    let first = config.closure.first_counted();

    let mut y: Vec<f64> = config.initial[1..].to_vec();
    let mut t = 0.0;
    let mut h = config.dt_init.min(config.output_stride);
    let mut series = TrajectorySeries::new(
        match config.closure {
            Closure::Full { .. } => "bd-full",
            Closure::Dirichlet => "bd-dirichlet",
        },
        config_hash,
    );
    let mut snapshots = Vec::new();
    let mut accepted = 0;
    let mut rejected = 0;

    let assemble = |y: &[f64], t: f64| -> Result<DiscreteState> {
        let c1 = closure_c1(y, &config.model, &config.closure)?;
        let mut c = Vec::with_capacity(l_max);
        c.push(c1);
        c.extend_from_slice(y);
        Ok(DiscreteState { c, t })
    };
    let record = |state: &DiscreteState, series: &mut TrajectorySeries| -> Result<()> {
        let view = state.counted(first);
        let n = view.moment(0.0);
        let mass = view.moment(1.0);
        let c1 = state.c[0];
        let l = if c1 > config.model.z_s && config.model.q > 0.0 {
            (config.model.q / (c1 - config.model.z_s)).powi(3)
        } else {
            f64::INFINITY
        };
        series.push(Sample {
            t: state.t,
            lambda: mass / n,
            l,
            energy: view.moment(2.0 / 3.0),
            length_scale: view.moment(4.0 / 3.0),
            number: n,
            mass,
            monomer: Some(c1),
        })
    };

    let state0 = assemble(&y, 0.0)?;
    record(&state0, &mut series)?;
    snapshots.push(state0);

    let n_out = (config.t_end / config.output_stride - 1e-9).ceil() as usize;
    for k in 1..=n_out {
        let t_target = (k as f64 * config.output_stride).min(config.t_end);
        while t < t_target {
            let step = h.min(t_target - t);
            let last = step >= t_target - t;
            let (candidate, err) = match config.scheme {
                BdScheme::SemiImplicit => {
                    let big = integrator.trapezoid(&y, step)?;
                    let half = integrator.trapezoid(&y, 0.5 * step)?;
                    let small = integrator.trapezoid(&half, 0.5 * step)?;
                    let err = error_norm(&small, &big, config.rtol, config.atol) / 3.0;
                    (small, err)
                }
                BdScheme::ExplicitAdaptive => {
                    let mut f = |_t: f64, y: &[f64]| integrator.rhs(y);
                    dopri5_step_vec(&mut f, t, &y, step, config.rtol, config.atol)?
                }
            };
            let order = match config.scheme {
                BdScheme::SemiImplicit => 3.0,
                BdScheme::ExplicitAdaptive => 5.0,
            };
            let fac = if err == 0.0 {
                4.0
            } else {
                (0.9 * err.powf(-1.0 / order)).clamp(0.2, 4.0)
            };
            if err <= 1.0 {
                let mut next = candidate;
                for (j, v) in next.iter_mut().enumerate() {
                    if *v < 0.0 {
                        if *v < -CLIP_THRESHOLD {
                            return Err(Error::Negativity {
                                t: t + step,
                                index: j + 2,
                                value: *v,
                            });
                        }
                        debug!("clipping c_{} = {:e} at t = {}", j + 2, v, t + step);
                        *v = 0.0;
                    }
                }
                y = next;
                t = if last { t_target } else { t + step };
                accepted += 1;
                if !last || fac > 1.0 {
                    h = step * fac;
                }

                let top = *y.last().unwrap();
                if top > saturation {
                    return Err(Error::TruncationSaturation {
                        t,
                        density: top,
                        threshold: saturation,
                    });
                }
            } else {
                rejected += 1;
                h = step * fac.min(0.9);
                if h < 1e-12 * config.t_end.max(1.0) {
                    return Err(Error::StepUnderflow { t, dt: h });
                }
            }
        }
        let state = assemble(&y, t)?;
        let mass = match config.closure {
            Closure::Full { .. } => state.c[0] + state.excess_mass(),
            Closure::Dirichlet => state.excess_mass(),
        };
        let drift = (mass - mass_ref).abs();
        if drift > config.mass_tol * mass_ref {
            return Err(Error::MassDrift {
                t,
                drift,
                tol: config.mass_tol * mass_ref,
            });
        }
        record(&state, &mut series)?;
        if k % config.snapshot_every.max(1) == 0 || k == n_out {
            snapshots.push(state);
        }
    }
    let final_state = assemble(&y, t)?;
    Ok(BdRun {
        series,
        snapshots,
        final_state,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}
