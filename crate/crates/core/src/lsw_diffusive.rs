//! Finite-volume solver for the diffusive LSW equation
//!
//! `∂c/∂t = ∂²/∂x²[D(x) c] + ∂/∂x[(1 - (x/L)^{1/3}) c]`, `D = ε(1 + x/ε)^{1/3}`,
//!
//! with `c(0, t) = 0` and `L(t)` chosen so that `∫ x c dx` stays fixed, plus
//! the backward (adjoint) equation `∂w/∂t = -[D ∂²w/∂x² - (1 - (x/L)^{1/3}) ∂w/∂x]`.
//!
//! Time stepping is IMEX Euler: limited upwind advection explicit, the
//! diffusion `∂x[-∂x(D c)]` implicit. In conserve mode `L` is the root of the
//! fully discrete mass balance of that step, so the discrete mass
//! `Σ c̄_i x̄_i Δx_i` is preserved to rounding.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{Sample, SizeDistribution, TrajectorySeries};
use crate::error::{Error, Result};
use crate::initial::InitialDataSpec;
use crate::lsw_classical::LHistory;
use crate::numeric::{brent, solve_tridiagonal, solve_tridiagonal_transposed};

/// `D(x) = ε (1 + x/ε)^{1/3}`; requires `ε > 0`, `x ≥ 0`.
pub fn diffusion_coefficient(eps: f64, x: f64) -> f64 {
    eps * (1.0 + x / eps).cbrt()
}

/// Cell edges `0 = x_0 < … < x_M = x_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    edges: Vec<f64>,
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl Grid {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 || edges[0] != 0.0 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(
                "grid edges must start at 0 and increase strictly",
            ));
        }
        let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            edges,
            centers,
            widths,
        })
    }

    /// `x(ξ) = x_s (exp(ξ ln(1 + x_max/x_s)) - 1)` on a uniform `ξ` grid:
    /// spacing about `x_s ln(1 + x_max/x_s)/M` near 0, geometric beyond `x_s`.
    pub fn geometric(cells: usize, x_max: f64, x_s: f64) -> Result<Self> {
        if cells < 2 {
            return Err(Error::invalid("grid needs at least 2 cells"));
        }
        if !(x_max > 0.0 && x_s > 0.0) {
            return Err(Error::invalid("x_max and x_s must be positive"));
        }
        let k = (x_max / x_s).ln_1p();
        let mut edges: Vec<f64> = (0..=cells)
            .map(|i| x_s * (k * i as f64 / cells as f64).exp_m1())
            .collect();
        edges[cells] = x_max;
        Self::from_edges(edges)
    }

    /// The standard grid for diffusion parameter `ε`: `x_s = min(1, 4ε)`.
    pub fn for_eps(eps: f64, cells: usize, x_max: f64) -> Result<Self> {
        Self::geometric(cells, x_max, (4.0 * eps).min(1.0))
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn x_max(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    fn cell_moment(&self, i: usize, p: f64) -> f64 {
        (self.edges[i + 1].powf(p + 1.0) - self.edges[i].powf(p + 1.0)) / (p + 1.0)
    }
}

/// Cell averages of `c(·, t)`, with the current `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousState {
    pub cbar: Vec<f64>,
    pub t: f64,
    pub eps: f64,
    pub l: f64,
}

/// Moments of a cell-average state, treating `c` as piecewise constant.
#[derive(Debug, Clone, Copy)]
pub struct CellView<'a> {
    pub grid: &'a Grid,
    pub cbar: &'a [f64],
}

impl SizeDistribution for CellView<'_> {
    fn moment(&self, p: f64) -> f64 {
        self.cbar
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.grid.cell_moment(i, p))
            .sum()
    }

    fn edge_moment(&self, p: f64) -> f64 {
        let i = self.cbar.len() - 1;
        self.cbar[i] * self.grid.cell_moment(i, p)
    }
}

impl ContinuousState {
    pub fn view<'a>(&'a self, grid: &'a Grid) -> CellView<'a> {
        CellView {
            grid,
            cbar: &self.cbar,
        }
    }

    /// `Σ c̄_i x̄_i Δx_i`
    pub fn mass(&self, grid: &Grid) -> f64 {
        self.view(grid).moment(1.0)
    }

    pub fn number(&self, grid: &Grid) -> f64 {
        self.view(grid).moment(0.0)
    }

    /// `∫_x^∞ c`
    pub fn tail(&self, grid: &Grid, x: f64) -> f64 {
        let e = grid.edges();
        if x >= grid.x_max() {
            return 0.0;
        }
        let x = x.max(0.0);
        let i = e.partition_point(|v| *v <= x).clamp(1, grid.len()) - 1;
        let mut sum = self.cbar[i] * (e[i + 1] - x);
        for j in i + 1..grid.len() {
            sum += self.cbar[j] * grid.widths()[j];
        }
        sum
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LMode {
    /// `L^{1/3} = ∫ x^{1/3} c / ∫ c`
    Moment,
    /// `L` makes the discrete step mass-conservative
    #[default]
    Conserve,
    /// `L` read from a given history; mass is not controlled
    Prescribed { history: LHistory },
}

/// Grid-dependent operators for one `(grid, ε)` pair.
struct Operators<'a> {
    grid: &'a Grid,
    /// `x^{1/3}` at faces `1..M-1` (index = face)
    face_cbrt: Vec<f64>,
    /// distance between neighbouring centres; entry 0 is `x̄_0`
    hc: Vec<f64>,
    /// diffusion generator (tridiagonal)
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> Operators<'a> {
    fn new(grid: &'a Grid, eps: f64) -> Self {
        let m = grid.len();
        let xc = grid.centers();
        let dx = grid.widths();
        let d: Vec<f64> = xc.iter().map(|&x| diffusion_coefficient(eps, x)).collect();
        let mut hc = vec![xc[0]; m];
        for i in 1..m {
            hc[i] = xc[i] - xc[i - 1];
        }
        let mut lower = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        for i in 0..m {
            diag[i] = -d[i] / (hc[i] * dx[i]);
            if i > 0 {
                lower[i] = d[i - 1] / (hc[i] * dx[i]);
            }
            if i + 1 < m {
                diag[i] -= d[i] / (hc[i + 1] * dx[i]);
                upper[i] = d[i + 1] / (hc[i + 1] * dx[i]);
            }
        }
        let face_cbrt = grid.edges()[..m].iter().map(|x| x.cbrt()).collect();
        Self {
            grid,
            face_cbrt,
            hc,
            lower,
            diag,
            upper,
        }
    }

    /// Limited edge values: (right edge of cell i, left edge of cell i).
    fn reconstruct(&self, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = c.len();
        let dx = self.grid.widths();
        let mut right = vec![0.0; m];
        let mut left = vec![0.0; m];
        for i in 0..m {
            let back = if i == 0 {
                c[0] / self.hc[0]
            } else {
                (c[i] - c[i - 1]) / self.hc[i]
            };
            let slope = if i + 1 < m {
                let fwd = (c[i + 1] - c[i]) / self.hc[i + 1];
                if back * fwd > 0.0 {
                    2.0 * back * fwd / (back + fwd)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            right[i] = c[i] + 0.5 * dx[i] * slope;
            left[i] = c[i] - 0.5 * dx[i] * slope;
        }
        (right, left)
    }

    /// Advective face fluxes for `κ = L^{-1/3}`; faces 0 and M carry none.
    fn advective_fluxes(&self, right: &[f64], left: &[f64], kappa: f64, out: &mut [f64]) {
        let m = right.len();
        out[0] = 0.0;
        out[m] = 0.0;
        for f in 1..m {
            let v = kappa * self.face_cbrt[f] - 1.0;
            out[f] = if v > 0.0 {
                v * right[f - 1]
            } else {
                v * left[f]
            };
        }
    }

    fn implicit_matrix(&self, dt: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.lower.iter().map(|v| -dt * v).collect(),
            self.diag.iter().map(|v| 1.0 - dt * v).collect(),
            self.upper.iter().map(|v| -dt * v).collect(),
        )
    }

    /// Largest stable explicit step for speeds up to `κ_max x^{1/3} - 1`.
    fn stable_dt(&self, kappa_max: f64, cfl: f64) -> f64 {
        let e = self.grid.edges();
        let dx = self.grid.widths();
        let mut dt = f64::INFINITY;
        for i in 0..dx.len() {
            let v = (kappa_max * e[i].cbrt() - 1.0)
                .abs()
                .max((kappa_max * e[i + 1].cbrt() - 1.0).abs())
                .max(1e-12);
            dt = dt.min(cfl * dx[i] / v);
        }
        dt
    }
}

fn moment_kappa(c: &[f64], grid: &Grid) -> Result<f64> {
    let view = CellView { grid, cbar: c };
    let n = view.moment(0.0);
    if !(n > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    Ok(n / view.moment(1.0 / 3.0))
}

/// `L` for the step from `state` of length `dt`.
pub fn determine_l(state: &ContinuousState, grid: &Grid, mode: &LMode, dt: f64) -> Result<f64> {
    match mode {
        LMode::Moment => Ok(moment_kappa(&state.cbar, grid)?.powi(-3)),
        LMode::Prescribed { history } => history.eval(state.t),
        LMode::Conserve => {
            let ops = Operators::new(grid, state.eps);
            Ok(conserve_kappa(&ops, &state.cbar, dt)?.powi(-3))
        }
    }
}

fn conserve_kappa(ops: &Operators, c: &[f64], dt: f64) -> Result<f64> {
    let grid = ops.grid;
    let m = grid.len();
    let k_moment = moment_kappa(c, grid)?;
    let w: Vec<f64> = grid
        .centers()
        .iter()
        .zip(grid.widths())
        .map(|(x, h)| x * h)
        .collect();
    let mass: f64 = w.iter().zip(c).map(|(w, c)| w * c).sum();
    let (lo, di, up) = ops.implicit_matrix(dt);
    let mut y = w.clone();
    solve_tridiagonal_transposed(&lo, &di, &up, &mut y);
    let base: f64 = y.iter().zip(c).map(|(y, c)| y * c).sum::<f64>() - mass;
    // y · div(Φ) summed by faces
    let z: Vec<f64> = y.iter().zip(grid.widths()).map(|(y, h)| y / h).collect();
    let (right, left) = ops.reconstruct(c);
    let mut flux = vec![0.0; m + 1];
    let g = |kappa: f64, flux: &mut Vec<f64>| -> f64 {
        ops.advective_fluxes(&right, &left, kappa, flux);
        let mut s = 0.0;
        for f in 1..m {
            s += flux[f] * (z[f] - z[f - 1]);
        }
        base + dt * s
    };
    let lo_k = k_moment * 2f64.powf(-1.0 / 3.0);
    let hi_k = k_moment * 2f64.cbrt();
    brent(|k| g(k, &mut flux), lo_k, hi_k, 1e-15 * k_moment, 200)
}

/// One IMEX Euler step at fixed `L`.
fn step_with(ops: &Operators, c: &[f64], l: f64, dt: f64) -> Vec<f64> {
    let m = c.len();
    let dx = ops.grid.widths();
    let (right, left) = ops.reconstruct(c);
    let mut flux = vec![0.0; m + 1];
    ops.advective_fluxes(&right, &left, l.powf(-1.0 / 3.0), &mut flux);
    let mut rhs: Vec<f64> = (0..m)
        .map(|i| c[i] - dt * (flux[i + 1] - flux[i]) / dx[i])
        .collect();
    let (lo, di, up) = ops.implicit_matrix(dt);
    solve_tridiagonal(&lo, &di, &up, &mut rhs);
    rhs
}

fn check_sign(c: &mut [f64], t: f64) -> Result<()> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, v) in c.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v < -1e-12 * scale {
                return Err(Error::Negativity {
                    t,
                    index: i,
                    value: *v,
                });
            }
            *v = 0.0;
        }
    }
    Ok(())
}

/// Advances `state` by `dt` and returns the `L` used for the step.
pub fn step_diffusive(
    state: &mut ContinuousState,
    grid: &Grid,
    mode: &LMode,
    dt: f64,
) -> Result<f64> {
    if state.cbar.len() != grid.len() {
        return Err(Error::invalid("state does not match grid"));
    }
    let ops = Operators::new(grid, state.eps);
    step_inner(&ops, state, mode, dt)
}

fn step_inner(ops: &Operators, state: &mut ContinuousState, mode: &LMode, dt: f64) -> Result<f64> {
    if state.cbar.iter().all(|v| *v == 0.0) {
        state.t += dt;
        return Ok(state.l);
    }
    let l = match mode {
        LMode::Moment => moment_kappa(&state.cbar, ops.grid)?.powi(-3),
        LMode::Conserve => conserve_kappa(ops, &state.cbar, dt)?.powi(-3),
        LMode::Prescribed { history } => history.eval(state.t)?,
    };
    let mut next = step_with(ops, &state.cbar, l, dt);
    check_sign(&mut next, state.t + dt)?;
    state.cbar = next;
    state.t += dt;
    state.l = l;
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveConfig {
    #[serde(default)]
    pub initial: InitialDataSpec,
    pub eps: f64,
    pub cells: usize,
    pub x_max: f64,
    pub t_end: f64,
    pub output_stride: f64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default)]
    pub l_mode: LMode,
    #[serde(default = "default_l_floor")]
    pub l_floor: f64,
    /// scale applied to the initial data after mass normalisation
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn default_snapshot_every() -> usize {
    10
}
fn default_cfl() -> f64 {
    0.4
}
fn default_l_floor() -> f64 {
    1e-6
}
fn one() -> f64 {
    1.0
}

impl Default for DiffusiveConfig {
    fn default() -> Self {
        Self {
            initial: InitialDataSpec::default(),
            eps: 0.1,
            cells: 1024,
            x_max: 100.0,
            t_end: 1.0,
            output_stride: 0.05,
            snapshot_every: default_snapshot_every(),
            cfl: default_cfl(),
            l_mode: LMode::Conserve,
            l_floor: default_l_floor(),
            amplitude: 1.0,
        }
    }
}

impl DiffusiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("diffusive.eps", "must be positive"));
        }
        if self.cells < 8 {
            return Err(Error::config("diffusive.cells", "need at least 8 cells"));
        }
        if !(self.x_max > 0.0) {
            return Err(Error::config("diffusive.x_max", "must be positive"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::config("diffusive.t_end", "must be positive"));
        }
        if !(self.output_stride > 0.0) {
            return Err(Error::config("diffusive.output_stride", "must be positive"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return Err(Error::config("diffusive.cfl", "must lie in (0, 0.5]"));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::config("diffusive.amplitude", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::for_eps(self.eps, self.cells, self.x_max)
    }

    /// Initial cell averages, mass-normalised on the grid, times `amplitude`.
    pub fn initial_state(&self, grid: &Grid) -> Result<ContinuousState> {
        let data = self.initial.build()?;
        let mut cbar = data.cell_averages(grid.edges());
        let mut state = ContinuousState {
            cbar: cbar.clone(),
            t: 0.0,
            eps: self.eps,
            l: 1.0,
        };
        let mass = state.mass(grid);
        if !(mass > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        for v in cbar.iter_mut() {
            *v *= self.amplitude / mass;
        }
        state.cbar = cbar;
        state.l = moment_kappa(&state.cbar, grid)?.powi(-3);
        Ok(state)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusiveRun {
    pub grid: Grid,
    pub series: TrajectorySeries,
    pub history: LHistory,
    pub snapshots: Vec<ContinuousState>,
    pub initial: ContinuousState,
    pub final_state: ContinuousState,
    pub steps: usize,
}

impl DiffusiveRun {
    /// Largest `|mass(t) - mass(0)|` over all recorded samples.
    pub fn max_mass_drift(&self) -> f64 {
        self.series.max_mass_drift()
    }
}

fn sample(state: &ContinuousState, grid: &Grid, l: f64) -> Result<Sample> {
    let view = state.view(grid);
    let n = view.moment(0.0);
    if !(n > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    let mass = view.moment(1.0);
    Ok(Sample {
        t: state.t,
        lambda: mass / n,
        l,
        energy: view.moment(2.0 / 3.0),
        length_scale: view.moment(4.0 / 3.0),
        number: n,
        mass,
        monomer: None,
    })
}

pub fn run_diffusive(config: &DiffusiveConfig, config_hash: &str) -> Result<DiffusiveRun> {
    config.validate()?;
    let grid = config.grid()?;
    let ops = Operators::new(&grid, config.eps);
    let initial = config.initial_state(&grid)?;
    let mut state = initial.clone();
    let mut series = TrajectorySeries::new("lsw-diffusive", config_hash);
    let mut snapshots = vec![state.clone()];
    let mut history: Option<LHistory> = None;
    let n_out = (config.t_end / config.output_stride - 1e-9).ceil() as usize;
    let mut steps = 0;
    let mut first_l = None;

    for k in 1..=n_out {
        let t_start = (k - 1) as f64 * config.output_stride;
        let t_target = (k as f64 * config.output_stride).min(config.t_end);
        let kappa = moment_kappa(&state.cbar, &grid)?;
        let dt_max = ops.stable_dt(2.0 * kappa, config.cfl);
        let n = ((t_target - t_start) / dt_max).ceil().max(1.0) as usize;
        let dt = (t_target - t_start) / n as f64;
        for j in 0..n {
            state.t = t_start + j as f64 * dt;
            let l = step_inner(&ops, &mut state, &config.l_mode, dt)?;
            if l < config.l_floor {
                return Err(Error::LBelowFloor {
                    t: state.t,
                    value: l,
                    floor: config.l_floor,
                });
            }
            let t_knot = t_start + j as f64 * dt;
            match history.as_mut() {
                None => history = Some(LHistory::new(t_knot, l)?),
                Some(h) => h.push(t_knot, l)?,
            }
            if first_l.is_none() {
                first_l = Some(l);
                series.push(sample(&initial, &grid, l)?)?;
            }
            steps += 1;
        }
        state.t = t_target;
        // L that the next step would use, at the same step size
        let l_now = match &config.l_mode {
            LMode::Moment => moment_kappa(&state.cbar, &grid)?.powi(-3),
            LMode::Conserve => conserve_kappa(&ops, &state.cbar, dt)?.powi(-3),
            LMode::Prescribed { history } => history.eval(state.t)?,
        };
        state.l = l_now;
        series.push(sample(&state, &grid, l_now)?)?;
        if k == n_out {
            history.as_mut().unwrap().push(t_target, l_now)?;
        }
        if k % config.snapshot_every.max(1) == 0 || k == n_out {
            snapshots.push(state.clone());
        }
    }
    Ok(DiffusiveRun {
        grid,
        series,
        history: history.unwrap(),
        snapshots,
        initial,
        final_state: state,
        steps,
    })
}

/// Terminal payoffs for the backward equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "payoff", rename_all = "snake_case")]
pub enum Payoff {
    One,
    CubeRoot,
    /// `1_{x > x0}`
    Indicator {
        x0: f64,
    },
}

impl Payoff {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Payoff::One => 1.0,
            Payoff::CubeRoot => x.max(0.0).cbrt(),
            Payoff::Indicator { x0 } => {
                if x > *x0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Values on the grid; the indicator is replaced by its cell average.
    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let e = grid.edges();
        (0..grid.len())
            .map(|i| match self {
                Payoff::Indicator { x0 } => ((e[i + 1] - x0) / (e[i + 1] - e[i])).clamp(0.0, 1.0),
                _ => self.eval(grid.centers()[i]),
            })
            .collect()
    }

    pub fn label(&self) -> String {
        match self {
            Payoff::One => "one".into(),
            Payoff::CubeRoot => "cuberoot".into(),
            Payoff::Indicator { x0 } => format!("indicator({x0})"),
        }
    }
}

/// Solves the backward equation from `w(·, t_final) = payoff` down to time 0
/// with `n_steps` implicit Euler steps (centred second derivative, upwind
/// first derivative, `w(0) = 0`, `∂w/∂x = 0` at `x_max`). Returns `w(x̄_i, 0)`.
pub fn adjoint_solve(
    payoff: &Payoff,
    t_final: f64,
    history: &LHistory,
    eps: f64,
    grid: &Grid,
    n_steps: usize,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if n_steps == 0 || !(t_final > 0.0) {
        return Err(Error::invalid("need t_final > 0 and at least one step"));
    }
    history.eval(0.0)?;
    history.eval(t_final)?;
    let m = grid.len();
    let xc = grid.centers();
    let d: Vec<f64> = xc.iter().map(|&x| diffusion_coefficient(eps, x)).collect();
    let cbrt: Vec<f64> = xc.iter().map(|x| x.cbrt()).collect();
    let mut hc = vec![xc[0]; m];
    for i in 1..m {
        hc[i] = xc[i] - xc[i - 1];
    }
    let dt = t_final / n_steps as f64;
    let mut w = payoff.on_grid(grid);
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    for k in (0..n_steps).rev() {
        let t = k as f64 * dt;
        let kappa = history.eval_clamped(t).powf(-1.0 / 3.0);
        for i in 0..m {
            let hm = hc[i];
            let (a_lo, a_up) = if i + 1 < m {
                let hp = hc[i + 1];
                (2.0 * d[i] / (hm * (hm + hp)), 2.0 * d[i] / (hp * (hm + hp)))
            } else {
                // Neumann: ghost value equals w_{M-1}
                (d[i] / (hm * hm), 0.0)
            };
            let v = kappa * cbrt[i] - 1.0;
            let (v_lo, v_up) = if v > 0.0 {
                if i + 1 < m {
                    (0.0, v / hc[i + 1])
                } else {
                    (0.0, 0.0)
                }
            } else {
                (-v / hm, 0.0)
            };
            lower[i] = -dt * (a_lo + v_lo);
            upper[i] = -dt * (a_up + v_up);
            diag[i] = 1.0 + dt * (a_lo + a_up + v_lo + v_up);
            if i == 0 {
                lower[i] = 0.0;
            }
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut w);
    }
    Ok(w)
}

/// `Σ w_i c̄_i Δx_i`
pub fn pairing(w: &[f64], c: &[f64], grid: &Grid) -> f64 {
    w.iter()
        .zip(c)
        .zip(grid.widths())
        .map(|((w, c), h)| w * c * h)
        .sum()
}

/// Piecewise linear interpolation of centre values, `w(0) = 0`.
pub fn interpolate_centers(grid: &Grid, w: &[f64], x: f64) -> f64 {
    let xc = grid.centers();
    if x <= xc[0] {
        return w[0] * x.max(0.0) / xc[0];
    }
    if x >= xc[xc.len() - 1] {
        return w[w.len() - 1];
    }
    let i = xc.partition_point(|v| *v <= x) - 1;
    let f = (x - xc[i]) / (xc[i + 1] - xc[i]);
    w[i] + f * (w[i + 1] - w[i])
}

/// Duality residual `|∫ w0 c(T) - ∫ w(·,0) c(0)|` for a forward run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    pub forward: f64,
    pub backward: f64,
    pub residual: f64,
}

pub fn duality_check(run: &DiffusiveRun, payoff: &Payoff) -> Result<DualityCheck> {
    let t_final = run.final_state.t;
    let w0 = payoff.on_grid(&run.grid);
    let forward = pairing(&w0, &run.final_state.cbar, &run.grid);
    let w = adjoint_solve(
        payoff,
        t_final,
        &run.history,
        run.final_state.eps,
        &run.grid,
        run.steps,
    )?;
    let backward = pairing(&w, &run.initial.cbar, &run.grid);
    Ok(DualityCheck {
        forward,
        backward,
        residual: (forward - backward).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::mean_volume;

    #[test]
    fn diffusion_coefficient_examples() {
        assert_eq!(diffusion_coefficient(0.3, 0.0), 0.3);
        assert!((diffusion_coefficient(1.0, 7.0) - 2.0).abs() < 1e-15);
        let (eps, x) = (1e-3f64, 1e3f64);
        let lead = eps.powf(2.0 / 3.0) * x.cbrt();
        assert!((diffusion_coefficient(eps, x) / lead - 1.0).abs() < 1e-5);
    }

    #[test]
    fn grid_is_graded() {
        let g = Grid::for_eps(0.1, 512, 50.0).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(g.edges()[0], 0.0);
        assert_eq!(g.x_max(), 50.0);
        assert!(g.widths()[0] <= 0.1 / 4.0);
        assert!(g.widths().windows(2).all(|w| w[1] > w[0]));
        assert!(Grid::from_edges(vec![0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn moments_of_single_cell_and_exponential_data() {
        let g = Grid::from_edges(vec![0.0, 7.99, 8.01, 10.0]).unwrap();
        let s = ContinuousState {
            cbar: vec![0.0, 5.0, 0.0],
            t: 0.0,
            eps: 0.1,
            l: 1.0,
        };
        let l = determine_l(&s, &g, &LMode::Moment, 0.01).unwrap();
        assert!((l - 8.0).abs() < 1e-4);

        let cfg = DiffusiveConfig {
            cells: 4096,
            x_max: 60.0,
            ..DiffusiveConfig::default()
        };
        let grid = cfg.grid().unwrap();
        let s = cfg.initial_state(&grid).unwrap();
        assert!((s.mass(&grid) - 1.0).abs() < 1e-14);
        assert!((s.l - 1.687_876_604_891_803).abs() < 1e-5, "{}", s.l);
        assert!((mean_volume(&s.view(&grid)).unwrap() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn conserve_mode_balances_the_discrete_step() {
        let cfg = DiffusiveConfig {
            cells: 256,
            x_max: 40.0,
            ..DiffusiveConfig::default()
        };
        let grid = cfg.grid().unwrap();
        let s = cfg.initial_state(&grid).unwrap();
        let dt = 1e-3;
        let l = determine_l(&s, &grid, &LMode::Conserve, dt).unwrap();
        let moment = determine_l(&s, &grid, &LMode::Moment, dt).unwrap();
        assert!(l > 0.5 * moment && l < 2.0 * moment);
        let ops = Operators::new(&grid, cfg.eps);
        let next = step_with(&ops, &s.cbar, l, dt);
        let after = ContinuousState {
            cbar: next,
            ..s.clone()
        };
        let change = after.mass(&grid) - s.mass(&grid);
        assert!(change.abs() < 1e-14, "{change}");
    }

    #[test]
    fn zero_data_stays_zero() {
        let grid = Grid::for_eps(0.1, 64, 10.0).unwrap();
        let mut s = ContinuousState {
            cbar: vec![0.0; 64],
            t: 0.0,
            eps: 0.1,
            l: 1.0,
        };
        step_diffusive(&mut s, &grid, &LMode::Conserve, 0.01).unwrap();
        assert!(s.cbar.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn run_conserves_mass_and_orders_functionals() {
        let cfg = DiffusiveConfig {
            cells: 256,
            x_max: 40.0,
            t_end: 1.0,
            output_stride: 0.1,
            ..DiffusiveConfig::default()
        };
        let run = run_diffusive(&cfg, "t").unwrap();
        assert!(run.max_mass_drift() < 1e-12, "{}", run.max_mass_drift());
        let s = &run.series.samples;
        assert_eq!(s.len(), 11);
        assert!(s.windows(2).all(|w| w[1].lambda >= w[0].lambda));
        assert!(s.windows(2).all(|w| w[1].energy <= w[0].energy));
        assert!(s
            .iter()
            .all(|x| x.l <= x.lambda && x.energy * x.length_scale >= x.mass * x.mass));
        assert!((run.history.end() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_l_evolution_is_linear() {
        let history = LHistory::constant(1.5, 0.5).unwrap();
        let base = DiffusiveConfig {
            cells: 128,
            x_max: 30.0,
            t_end: 0.5,
            output_stride: 0.25,
            l_mode: LMode::Prescribed { history },
            ..DiffusiveConfig::default()
        };
        let a = run_diffusive(&base, "a").unwrap();
        let b = run_diffusive(
            &DiffusiveConfig {
                amplitude: 3.0,
                ..base
            },
            "b",
        )
        .unwrap();
        for (x, y) in a.final_state.cbar.iter().zip(&b.final_state.cbar) {
            assert!((3.0 * x - y).abs() <= 1e-13 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn adjoint_probability_bounds_and_monotonicity() {
        let grid = Grid::for_eps(0.25, 256, 30.0).unwrap();
        let h = LHistory::constant(1.0, 0.5).unwrap();
        let w = adjoint_solve(&Payoff::One, 0.5, &h, 0.25, &grid, 200).unwrap();
        assert!(w.iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-14));
        let w = adjoint_solve(&Payoff::CubeRoot, 0.5, &h, 0.25, &grid, 200).unwrap();
        assert!(w.windows(2).all(|p| p[1] > p[0]));
        let ind = Payoff::Indicator { x0: 2.0 }.on_grid(&grid);
        assert!(ind.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ind.iter().filter(|v| **v > 0.0 && **v < 1.0).count(), 1);
    }

    #[test]
    fn tail_of_cells() {
        let g = Grid::from_edges(vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let s = ContinuousState {
            cbar: vec![1.0, 2.0, 0.5],
            t: 0.0,
            eps: 1.0,
            l: 1.0,
        };
        assert_eq!(s.tail(&g, 0.0), 4.0);
        assert_eq!(s.tail(&g, 1.5), 2.0);
        assert_eq!(s.tail(&g, 5.0), 0.0);
    }
}
