//! Classical LSW equation solved by characteristics.
//!
//! The number tail is transported exactly, `w(x, t) = w0(F(x, t))`, where
//! `F(x, t)` is the foot at time 0 of the backward characteristic
//! `dx/ds = -[1 - (x/L(s))^{1/3}]`, `x(t) = x`. `L(t)` is stored as a
//! piecewise linear history and extended step by step by a fixed-point
//! iteration on
//!
//! `L^{1/3} = ∫_0^∞ w(u³, t) du / w(0, t)`.
//!
//! Characteristics are integrated in two phases. Close to `x = 0` the
//! variable `v = x^{1/3}` is used as the independent variable, which removes
//! the `x^{-2/3}` singularity of the Jacobian integrand; further out the
//! elapsed backward time is the independent variable and the integration is
//! split at the history knots.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{Sample, TrajectorySeries};
use crate::error::{Error, Result};
use crate::initial::{InitialData, InitialDataSpec};
use crate::numeric::{brent, dopri5, integrate_vec, OdeTolerances};

/// Piecewise linear record of `L(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LHistory {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl LHistory {
    pub fn new(t0: f64, l0: f64) -> Result<Self> {
        if !(l0 > 0.0 && l0.is_finite()) {
            return Err(Error::invalid("L must be positive"));
        }
        Ok(Self {
            times: vec![t0],
            values: vec![l0],
        })
    }

    /// `L ≡ l` on `[0, t_end]`.
    pub fn constant(l: f64, t_end: f64) -> Result<Self> {
        let mut h = Self::new(0.0, l)?;
        h.push(t_end, l)?;
        Ok(h)
    }

    pub fn from_knots(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::invalid("history needs matching, nonempty knots"));
        }
        let mut h = Self::new(times[0], values[0])?;
        for (t, l) in times.into_iter().zip(values).skip(1) {
            h.push(t, l)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, t: f64, l: f64) -> Result<()> {
        if !(t > *self.times.last().unwrap()) {
            return Err(Error::invalid("history times must increase strictly"));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::invalid("L must be positive"));
        }
        self.times.push(t);
        self.values.push(l);
        Ok(())
    }

    fn set_last(&mut self, l: f64) {
        *self.values.last_mut().unwrap() = l;
    }

    fn pop(&mut self) {
        self.times.pop();
        self.values.pop();
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation; times beyond the ends take the end values.
    pub fn eval_clamped(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let i = self.times.partition_point(|v| *v <= t) - 1;
        let f = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] + f * (self.values[i + 1] - self.values[i])
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let slack = 1e-12 * (1.0 + self.end().abs());
        if t < self.start() - slack || t > self.end() + slack {
            return Err(Error::OutOfDomain {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        Ok(self.eval_clamped(t))
    }

    /// Minimum over `[a, b]` (attained at a knot or an end point).
    pub fn min_on(&self, a: f64, b: f64) -> f64 {
        let mut m = self.eval_clamped(a).min(self.eval_clamped(b));
        for (t, v) in self.times.iter().zip(&self.values) {
            if *t > a && *t < b {
                m = m.min(*v);
            }
        }
        m
    }

    /// Knot times strictly inside `(a, b)`, ascending.
    fn knots_inside(&self, a: f64, b: f64) -> &[f64] {
        let lo = self.times.partition_point(|v| *v <= a);
        let hi = self.times.partition_point(|v| *v < b);
        &self.times[lo..hi.max(lo)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicOptions {
    pub rtol: f64,
    pub atol: f64,
    /// backward characteristics may not reach beyond this size
    pub x_max: f64,
}

impl Default for CharacteristicOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-15,
            x_max: 1e8,
        }
    }
}

impl CharacteristicOptions {
    fn ode(&self) -> OdeTolerances {
        OdeTolerances {
            rtol: self.rtol,
            atol: self.atol,
            h_min: 1e-15,
        }
    }
}

/// Foot of a backward characteristic and the log of its Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Characteristic {
    /// `F(x, t)`
    pub foot: f64,
    /// `-(1/3) ∫_0^t ds / (x(s)² L(s))^{1/3}`
    pub log_jacobian: f64,
}

/// Integrates the backward characteristic through `(x, t)` down to `s = 0`.
pub fn trace_characteristic(
    x: f64,
    t: f64,
    history: &LHistory,
    opts: &CharacteristicOptions,
) -> Result<Characteristic> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::invalid(format!("x = {x} must be nonnegative")));
    }
    if t < 0.0 {
        return Err(Error::invalid("t must be nonnegative"));
    }
    history.eval(t)?;
    if history.start() > 0.0 {
        return Err(Error::OutOfDomain {
            t: 0.0,
            start: history.start(),
            end: history.end(),
        });
    }
    if t == 0.0 {
        return Ok(Characteristic {
            foot: x,
            log_jacobian: 0.0,
        });
    }
    let tol = opts.ode();
    let v_switch = 0.5 * history.min_on(0.0, t).cbrt();
    let v0 = x.cbrt();

    let (mut xs, mut sigma, mut integral) = (x, 0.0, 0.0);
    if v0 < v_switch {
        // phase 1: independent variable v = x^{1/3}, state (σ, I)
        let rhs = |v: f64, y: &[f64; 2]| -> [f64; 2] {
            let ell = history.eval_clamped(t - y[0]).cbrt();
            let speed = 1.0 - v / ell;
            [3.0 * v * v / speed, 3.0 / (ell * speed)]
        };
        let h0 = 0.1 * (v_switch - v0);
        let (y, _) = dopri5(rhs, v0, [0.0, 0.0], v_switch, h0, tol)?;
        if y[0] <= t {
            xs = v_switch * v_switch * v_switch;
            sigma = y[0];
            integral = y[1];
        } else {
            // σ(v) is increasing and convex: Newton from the right
            let mut v = v_switch;
            let mut state = y;
            for _ in 0..60 {
                let ell = history.eval_clamped(t - state[0]).cbrt();
                let slope = 3.0 * v * v / (1.0 - v / ell);
                let excess = state[0] - t;
                if excess.abs() <= 1e-15 * t.max(1e-3) {
                    break;
                }
                let v_next = (v - excess / slope).max(v0);
                if (v_next - v).abs() <= 1e-16 * v.max(1e-300) {
                    break;
                }
                let (y, _) = dopri5(rhs, v, state, v_next, (v_next - v).abs(), tol)?;
                v = v_next;
                state = y;
            }
            return Ok(Characteristic {
                foot: v * v * v,
                log_jacobian: -state[1] / 3.0,
            });
        }
    }

    // phase 2: independent variable σ = t - s, state (x, I), split at knots
    let mut breaks: Vec<f64> = history
        .knots_inside(0.0, t - sigma)
        .iter()
        .rev()
        .map(|tk| t - tk)
        .collect();
    breaks.push(t);
    let mut y = [xs, integral];
    let mut h = (t - sigma).min(0.05);
    for sb in breaks {
        if sb <= sigma {
            continue;
        }
        let rhs = |s: f64, y: &[f64; 2]| -> [f64; 2] {
            let l = history.eval_clamped(t - s);
            let r = (y[0].max(0.0) / l).cbrt();
            [1.0 - r, 1.0 / (r * r * l)]
        };
        let (yn, last) = dopri5(rhs, sigma, y, sb, h, tol)?;
        y = yn;
        h = last;
        sigma = sb;
        if !(y[0] > 0.0) {
            return Err(Error::DegenerateState(format!(
                "backward characteristic reached x = {} at s = {}",
                y[0],
                t - sigma
            )));
        }
        if y[0] > opts.x_max {
            return Err(Error::CharacteristicEscape {
                x: y[0],
                x_max: opts.x_max,
            });
        }
    }
    Ok(Characteristic {
        foot: y[0],
        log_jacobian: -y[1] / 3.0,
    })
}

/// `F(x, t)`
pub fn characteristic_backward(x: f64, t: f64, history: &LHistory) -> Result<f64> {
    Ok(trace_characteristic(x, t, history, &CharacteristicOptions::default())?.foot)
}

/// `∂F/∂x (x, t)`. At `x = 0` the Jacobian integral is still finite and
/// the limiting value is returned.
pub fn characteristic_jacobian(x: f64, t: f64, history: &LHistory) -> Result<f64> {
    Ok(
        trace_characteristic(x, t, history, &CharacteristicOptions::default())?
            .log_jacobian
            .exp(),
    )
}

/// Forward characteristic from `x0` at time 0 to time `t`.
pub fn characteristic_forward(
    x0: f64,
    t: f64,
    history: &LHistory,
    opts: &CharacteristicOptions,
) -> Result<f64> {
    history.eval(t)?;
    let mut breaks: Vec<f64> = history.knots_inside(0.0, t).to_vec();
    breaks.push(t);
    let mut y = [x0];
    let mut s = 0.0;
    let mut h = t.min(0.05);
    for sb in breaks {
        if sb <= s {
            continue;
        }
        let rhs = |s: f64, y: &[f64; 1]| [(y[0].max(0.0) / history.eval_clamped(s)).cbrt() - 1.0];
        let (yn, last) = dopri5(rhs, s, y, sb, h, opts.ode())?;
        y = yn;
        h = last;
        s = sb;
        if y[0] <= 0.0 {
            return Ok(0.0);
        }
    }
    Ok(y[0])
}

/// Time `T_x` at which the characteristic leaving `x` reaches 0, i.e.
/// `F(0, T_x) = x`.
pub fn exit_time(x: f64, history: &LHistory) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::invalid("x must be nonnegative"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let opts = CharacteristicOptions::default();
    let g = |t: f64| match trace_characteristic(0.0, t, history, &opts) {
        Ok(c) => c.foot - x,
        Err(_) => f64::NAN,
    };
    let hi = history.end();
    if !(g(hi) > 0.0) {
        return Err(Error::RootBracket { lo: x, hi });
    }
    brent(g, x.min(hi), hi, 1e-14 * hi.max(1.0), 200)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalConfig {
    #[serde(default)]
    pub initial: InitialDataSpec,
    pub dt: f64,
    pub t_end: f64,
    pub output_stride: f64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_l_floor")]
    pub l_floor: f64,
    #[serde(default = "default_quad_rtol")]
    pub quad_rtol: f64,
    #[serde(default = "default_fixed_point_tol")]
    pub fixed_point_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_fixed_point_iter: usize,
    #[serde(default)]
    pub characteristic: CharacteristicOptions,
}

fn default_snapshot_every() -> usize {
    10
}
fn default_l_floor() -> f64 {
    1e-6
}
fn default_quad_rtol() -> f64 {
    1e-12
}
fn default_fixed_point_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    50
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            initial: InitialDataSpec::default(),
            dt: 0.01,
            t_end: 1.0,
            output_stride: 0.05,
            snapshot_every: default_snapshot_every(),
            l_floor: default_l_floor(),
            quad_rtol: default_quad_rtol(),
            fixed_point_tol: default_fixed_point_tol(),
            max_fixed_point_iter: default_max_iter(),
            characteristic: CharacteristicOptions::default(),
        }
    }
}

/// Number of `dt` steps per output interval.
pub(crate) fn steps_per_output(dt: f64, stride: f64, field: &str) -> Result<usize> {
    let ratio = stride / dt;
    let k = ratio.round();
    if !(k >= 1.0) || (ratio - k).abs() > 1e-9 * k {
        return Err(Error::config(
            field,
            "output stride must be a whole multiple of dt",
        ));
    }
    Ok(k as usize)
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("classical.dt", "must be positive"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::config("classical.t_end", "must be positive"));
        }
        steps_per_output(self.dt, self.output_stride, "classical.output_stride")?;
        if !(self.l_floor > 0.0) {
            return Err(Error::config("classical.l_floor", "must be positive"));
        }
        if !(self.quad_rtol > 0.0 && self.fixed_point_tol > 0.0) {
            return Err(Error::config(
                "classical.quad_rtol",
                "tolerances must be positive",
            ));
        }
        if self.max_fixed_point_iter == 0 {
            return Err(Error::config(
                "classical.max_fixed_point_iter",
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Moments of the transported distribution at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalMoments {
    pub t: f64,
    /// `F(0, t)`
    pub front: f64,
    pub number: f64,
    pub mass: f64,
    pub energy: f64,
    pub length_scale: f64,
    /// `L` given by the moment formula at this time
    pub l_moment: f64,
}

/// Solver state: initial data plus the history of `L` up to `t`.
#[derive(Debug, Clone)]
pub struct ClassicalState {
    pub data: InitialData,
    pub history: LHistory,
    pub t: f64,
    pub config: ClassicalConfig,
}

impl ClassicalState {
    pub fn new(config: ClassicalConfig) -> Result<Self> {
        config.validate()?;
        let data = config.initial.build()?;
        let history = LHistory::new(0.0, 1.0)?;
        let mut state = Self {
            data,
            history,
            t: 0.0,
            config,
        };
        let l0 = state.l_from_tail(0.0)?;
        state.history.set_last(l0);
        Ok(state)
    }

    fn opts(&self) -> &CharacteristicOptions {
        &self.config.characteristic
    }

    /// `w(x, t) = w0(F(x, t))`.
    pub fn tail(&self, x: f64, t: f64) -> Result<f64> {
        let c = trace_characteristic(x, t, &self.history, self.opts())?;
        Ok(self.data.tail(c.foot))
    }

    /// Upper end in `u = x^{1/3}` beyond which the tail is negligible.
    fn u_max(&self, t: f64) -> Result<f64> {
        let x_cut = self.data.support_end();
        Ok(characteristic_forward(x_cut, t, &self.history, self.opts())?.cbrt())
    }

    fn quad<const K: usize>(&self, t: f64, f: impl Fn(f64, f64) -> [f64; K]) -> Result<[f64; K]> {
        let u_max = self.u_max(t)?;
        let mut failure = None;
        let (v, _) = integrate_vec(
            |u| match trace_characteristic(u * u * u, t, &self.history, self.opts()) {
                Ok(c) => f(u, self.data.tail(c.foot)),
                Err(e) => {
                    failure.get_or_insert(e);
                    [0.0; K]
                }
            },
            0.0,
            u_max,
            1e-16,
            self.config.quad_rtol,
            4000,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }

    fn l_from_tail(&self, t: f64) -> Result<f64> {
        let n = self.tail(0.0, t)?;
        if !(n > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let [s] = self.quad(t, |_, w| [w])?;
        Ok((s / n).powi(3))
    }

    /// Number, mass, energy and length scale from the tail.
    pub fn moments(&self, t: f64) -> Result<ClassicalMoments> {
        let front = trace_characteristic(0.0, t, &self.history, self.opts())?.foot;
        let number = self.data.tail(front);
        if !(number > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let [s, mass, energy, length_scale] = self.quad(t, |u, w| {
            [w, 3.0 * u * u * w, 2.0 * u * w, 4.0 * u * u * u * w]
        })?;
        Ok(ClassicalMoments {
            t,
            front,
            number,
            mass,
            energy,
            length_scale,
            l_moment: (s / number).powi(3),
        })
    }

    /// `dΛ/dt = c0(F(0,t)) ∂F/∂x(0,t) / N²` for unit mass.
    pub fn semi_analytic_rate(&self, t: f64) -> Result<f64> {
        let c = trace_characteristic(0.0, t, &self.history, self.opts())?;
        let n = self.data.tail(c.foot);
        if !(n > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        Ok(self.data.density(c.foot) * c.log_jacobian.exp() / (n * n))
    }
}

/// Extends `L` over `[t, t + dt]` by fixed-point iteration on its end value.
pub fn advance_classical(state: &mut ClassicalState, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let t_new = state.t + dt;
    let mut l = *state.history.values().last().unwrap();
    state.history.push(t_new, l)?;
    let tol = state.config.fixed_point_tol;
    for iter in 1..=state.config.max_fixed_point_iter {
        let l_next = match state.l_from_tail(t_new) {
            Ok(v) => v,
            Err(e) => {
                state.history.pop();
                return Err(e);
            }
        };
        let change = (l_next - l).abs();
        l = l_next;
        state.history.set_last(l);
        if change <= tol * l {
            debug!("classical step to t = {t_new}: L = {l} after {iter} iterations");
            if l < state.config.l_floor {
                state.history.pop();
                return Err(Error::LBelowFloor {
                    t: t_new,
                    value: l,
                    floor: state.config.l_floor,
                });
            }
            state.t = t_new;
            return Ok(());
        }
    }
    state.history.pop();
    Err(Error::FixedPointNonConvergence {
        t: t_new,
        iterations: state.config.max_fixed_point_iter,
    })
}

/// Tail samples `(x, w(x, t))` at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSnapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassicalRun {
    pub series: TrajectorySeries,
    pub moments: Vec<ClassicalMoments>,
    pub snapshots: Vec<TailSnapshot>,
    pub state: ClassicalState,
}

impl ClassicalRun {
    pub fn history(&self) -> &LHistory {
        &self.state.history
    }

    /// Largest `|mass - 1|` over the recorded times.
    pub fn max_mass_residual(&self) -> f64 {
        self.moments
            .iter()
            .map(|m| (m.mass - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Snapshot abscissae: uniform in `x^{1/3}` over the initial support.
pub fn default_snapshot_points(data: &InitialData, count: usize) -> Vec<f64> {
    let u_end = data.support_end().cbrt();
    (0..count)
        .map(|i| {
            let u = u_end * i as f64 / (count - 1).max(1) as f64;
            u * u * u
        })
        .collect()
}

fn snapshot(state: &ClassicalState, t: f64, points: &[f64]) -> Result<TailSnapshot> {
    let w = points
        .iter()
        .map(|&x| state.tail(x, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(TailSnapshot {
        t,
        x: points.to_vec(),
        w,
    })
}

fn record(
    state: &ClassicalState,
    t: f64,
    series: &mut TrajectorySeries,
) -> Result<ClassicalMoments> {
    let m = state.moments(t)?;
    series.push(Sample {
        t,
        lambda: 1.0 / m.number,
        l: state.history.eval(t)?,
        energy: m.energy,
        length_scale: m.length_scale,
        number: m.number,
        mass: m.mass,
        monomer: None,
    })?;
    Ok(m)
}

pub fn run_classical(config: &ClassicalConfig, config_hash: &str) -> Result<ClassicalRun> {
    let mut state = ClassicalState::new(config.clone())?;
    let per_output = steps_per_output(config.dt, config.output_stride, "classical.output_stride")?;
    let n_steps = (config.t_end / config.dt - 1e-9).ceil() as usize;
    let points = default_snapshot_points(&state.data, 65);
    let mut series = TrajectorySeries::new("lsw-classical", config_hash);
    let mut moments = vec![record(&state, 0.0, &mut series)?];
    let mut snapshots = vec![snapshot(&state, 0.0, &points)?];
    let mut outputs = 0;
    for n in 1..=n_steps {
        let t_target = (n as f64 * config.dt).min(config.t_end);
        let dt = t_target - state.t;
        advance_classical(&mut state, dt)?;
        state.t = t_target;
        if n % per_output == 0 || n == n_steps {
            outputs += 1;
            moments.push(record(&state, t_target, &mut series)?);
            if outputs % config.snapshot_every.max(1) == 0 || n == n_steps {
                snapshots.push(snapshot(&state, t_target, &points)?);
            }
        }
    }
    Ok(ClassicalRun {
        series,
        moments,
        snapshots,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::integrate;

    fn unit_history(t_end: f64) -> LHistory {
        LHistory::constant(1.0, t_end).unwrap()
    }

    /// Exit time from `x` for `L ≡ 1`, in closed form.
    fn exit_time_unit(x: f64) -> f64 {
        let u: f64 = x.cbrt();
        3.0 * (-(1.0 - u).ln() - u - 0.5 * u * u)
    }

    #[test]
    fn history_interpolates_and_guards_domain() {
        let h = LHistory::from_knots(vec![0.0, 1.0, 3.0], vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(h.eval(0.5).unwrap(), 1.5);
        assert_eq!(h.eval(2.0).unwrap(), 1.5);
        assert_eq!(h.min_on(0.5, 2.5), 1.25);
        assert!(matches!(h.eval(3.5), Err(Error::OutOfDomain { .. })));
        assert!(LHistory::from_knots(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(LHistory::new(0.0, 0.0).is_err());
    }

    #[test]
    fn stationary_point_is_fixed() {
        let h = LHistory::constant(2.0, 3.0).unwrap();
        let f = characteristic_backward(2.0, 3.0, &h).unwrap();
        assert!((f - 2.0).abs() < 1e-13);
    }

    #[test]
    fn front_matches_quadrature_oracle() {
        let h = unit_history(2.0);
        let f = characteristic_backward(0.0, 0.5, &h).unwrap();
        assert!((f - 0.251_005_433_430_258_4).abs() < 1e-10, "{f}");
        assert!(f > 0.0 && f < 0.5);
        // closed form of the exit time agrees with the quadrature oracle
        assert!((exit_time_unit(0.3) - 0.640_327_736_017_490_4).abs() < 1e-13);
        let f = characteristic_backward(0.0, exit_time_unit(0.3), &h).unwrap();
        assert!((f - 0.3).abs() < 1e-11);
    }

    #[test]
    fn exit_time_matches_oracle() {
        let h = unit_history(3.0);
        let t = exit_time(0.3, &h).unwrap();
        assert!((t - 0.640_327_736_017_490_4).abs() < 1e-10, "{t}");
        let t = exit_time(0.5, &h).unwrap();
        assert!((t - 1.409_236_860_174_643_5).abs() < 1e-10, "{t}");
        assert_eq!(exit_time(0.0, &h).unwrap(), 0.0);
        assert!(exit_time(0.95, &h).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let h = unit_history(1.0);
        assert_eq!(characteristic_jacobian(0.7, 0.0, &h).unwrap(), 1.0);
        let j = characteristic_jacobian(1.0, 0.25, &h).unwrap();
        assert!((j - 0.920_044_414_629_323_2).abs() < 1e-12, "{j}");
        let mut prev = characteristic_jacobian(0.0, 0.5, &h).unwrap();
        assert!(prev > 0.0);
        for x in [0.01, 0.1, 0.5, 1.0, 3.0] {
            let j = characteristic_jacobian(x, 0.5, &h).unwrap();
            assert!(j > prev && j <= 1.0);
            prev = j;
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let h = LHistory::from_knots(vec![0.0, 0.4, 1.0], vec![1.2, 1.5, 1.9]).unwrap();
        for x in [0.05f64, 0.3, 2.0] {
            let d = 1e-6;
            let fd = (characteristic_backward(x + d, 1.0, &h).unwrap()
                - characteristic_backward(x - d, 1.0, &h).unwrap())
                / (2.0 * d);
            let j = characteristic_jacobian(x, 1.0, &h).unwrap();
            assert!((fd - j).abs() < 1e-5, "x={x}: {fd} vs {j}");
        }
        // F has an x^{4/3} term at the origin, so x = 0 is checked as a limit
        let j0 = characteristic_jacobian(0.0, 1.0, &h).unwrap();
        let j_small = characteristic_jacobian(1e-12, 1.0, &h).unwrap();
        assert!((j0 - j_small).abs() < 1e-4 * j0);
    }

    #[test]
    fn characteristic_map_is_increasing_and_bounded() {
        let h = LHistory::from_knots(vec![0.0, 0.5, 1.0], vec![1.0, 1.3, 1.6]).unwrap();
        let mut prev = -1.0;
        for i in 0..40 {
            let x = 0.2 * i as f64;
            let f = characteristic_backward(x, 1.0, &h).unwrap();
            assert!(f > prev && f < x + 1.0);
            prev = f;
        }
        let fwd = characteristic_forward(2.5, 1.0, &h, &CharacteristicOptions::default()).unwrap();
        assert!((characteristic_backward(fwd, 1.0, &h).unwrap() - 2.5).abs() < 1e-10);
    }

    #[test]
    fn initial_l_and_moments() {
        let state = ClassicalState::new(ClassicalConfig::default()).unwrap();
        let l0 = state.history.eval(0.0).unwrap();
        assert!((l0 - 1.687_876_604_891_803).abs() < 1e-10, "{l0}");
        let m = state.moments(0.0).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-11);
        assert!((m.number - 0.5).abs() < 1e-15);
        assert!((m.energy - 0.752_287_744_125_778).abs() < 1e-10);
        assert!((m.length_scale - 1.389_079_240_218_832_1).abs() < 1e-10);
    }

    #[test]
    fn short_run_properties() {
        let cfg = ClassicalConfig {
            t_end: 0.5,
            output_stride: 0.1,
            ..ClassicalConfig::default()
        };
        let run = run_classical(&cfg, "t").unwrap();
        assert!(
            run.max_mass_residual() < 1e-6,
            "{}",
            run.max_mass_residual()
        );
        let s = &run.series.samples;
        assert!(s.windows(2).all(|w| w[1].lambda >= w[0].lambda));
        assert!(s.iter().all(|x| x.l <= x.lambda));
        // Λ is the reciprocal of the tail at the origin
        let last = s.last().unwrap();
        let w = run.state.tail(0.0, 0.5).unwrap();
        assert!((last.lambda - 1.0 / w).abs() < 1e-13);
        // tail identity at t = 0 and decay at large x
        assert_eq!(run.state.tail(1.3, 0.0).unwrap(), run.state.data.tail(1.3));
        assert!(run.state.tail(60.0, 0.5).unwrap() < 1e-10);
        // conservation in tail form from an independent quadrature
        let (mass, _) = integrate(
            |x| run.state.tail(x, 0.5).unwrap(),
            0.0,
            60.0,
            1e-12,
            1e-10,
            2000,
        );
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn step_halving_is_second_order() {
        let run = |dt: f64| {
            let mut s = ClassicalState::new(ClassicalConfig::default()).unwrap();
            let n = (0.2 / dt).round() as usize;
            for _ in 0..n {
                advance_classical(&mut s, dt).unwrap();
            }
            s.history.eval(0.2).unwrap()
        };
        let (a, b, c) = (run(0.1), run(0.05), run(0.025));
        let ratio = (a - b) / (b - c);
        assert!(ratio > 2.5 && ratio < 6.0, "{ratio}");
    }

    #[test]
    fn semi_analytic_rate_matches_difference() {
        let mut s = ClassicalState::new(ClassicalConfig::default()).unwrap();
        for _ in 0..30 {
            advance_classical(&mut s, 0.01).unwrap();
        }
        let lam = |t: f64| 1.0 / s.tail(0.0, t).unwrap();
        let fd = (lam(0.21) - lam(0.19)) / 0.02;
        let sa = s.semi_analytic_rate(0.2).unwrap();
        assert!((fd - sa).abs() < 1e-3 * sa, "{fd} vs {sa}");
    }
}
