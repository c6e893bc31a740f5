//! Monte Carlo for the absorbed diffusion
//!
//! `dX = -[1 - (X/L(s))^{1/3}] ds + √(2ε) (1 + X/ε)^{1/6} dW`, absorbed at 0.
//!
//! Paths use Euler-Maruyama. Each path draws from its own ChaCha stream
//! selected by `(seed, path index)`, so results do not depend on how paths
//! are scheduled across threads; reductions run in path order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initial::InitialData;
use crate::lsw_classical::LHistory;
use crate::lsw_diffusive::Payoff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryScheme {
    /// absorbed at the first nonpositive value
    Naive,
    /// also absorbed with the frozen-coefficient bridge crossing probability
    #[default]
    BridgeCorrection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// ε = 0 switches the noise off
    pub eps: f64,
    pub history: LHistory,
    pub x0: Vec<f64>,
    pub t_final: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub boundary: BoundaryScheme,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("mc.eps", "must be nonnegative"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("mc.n_paths", "must be >= 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("mc.dt", "must be positive"));
        }
        if !(self.t_final >= 0.0) {
            return Err(Error::config("mc.t_final", "must be nonnegative"));
        }
        if self.x0.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::config("mc.x0", "start points must be nonnegative"));
        }
        self.history.eval(0.0)?;
        self.history.eval(self.t_final)?;
        Ok(())
    }

    fn steps(&self) -> (usize, f64) {
        let n = (self.t_final / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, self.t_final / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PathOutcome {
    Absorbed { time: f64 },
    Survived { position: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_absorbed: usize,
    pub n_survived: usize,
}

/// JSON record for one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub payoff: String,
    pub x_start: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub eps: f64,
    pub n_paths: usize,
    pub mean: f64,
    pub stderr: f64,
    pub seed: u64,
}

impl McRecord {
    pub fn new(config: &McConfig, payoff: &Payoff, x_start: f64, est: &McEstimate) -> Self {
        Self {
            payoff: payoff.label(),
            x_start,
            t_final: config.t_final,
            eps: config.eps,
            n_paths: config.n_paths,
            mean: est.mean,
            stderr: est.stderr,
            seed: config.seed,
        }
    }
}

fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn run_path(config: &McConfig, x_start: f64, rng: &mut ChaCha8Rng) -> PathOutcome {
    if x_start <= 0.0 {
        return PathOutcome::Absorbed { time: 0.0 };
    }
    let (n, dt) = config.steps();
    let sqrt_dt = dt.sqrt();
    let noise = config.eps > 0.0;
    let amp = (2.0 * config.eps).sqrt();
    let mut x = x_start;
    for k in 0..n {
        let t = k as f64 * dt;
        let l = config.history.eval_clamped(t);
        let xc = x.max(0.0);
        let drift = (xc / l).cbrt() - 1.0;
        let sigma = if noise {
            amp * (1.0 + xc / config.eps).powf(1.0 / 6.0)
        } else {
            0.0
        };
        let z: f64 = if noise {
            rng.sample(StandardNormal)
        } else {
            0.0
        };
        let next = x + drift * dt + sigma * sqrt_dt * z;
        if next <= 0.0 {
            let frac = x / (x - next);
            return PathOutcome::Absorbed {
                time: t + frac * dt,
            };
        }
        if noise && config.boundary == BoundaryScheme::BridgeCorrection {
            let p = (-2.0 * x * next / (sigma * sigma * dt)).exp();
            let u: f64 = rng.random();
            if u < p {
                return PathOutcome::Absorbed { time: t + 0.5 * dt };
            }
        }
        x = next;
    }
    PathOutcome::Survived { position: x }
}

/// Simulates path `index` of the configured ensemble from `x_start`.
pub fn simulate_path(config: &McConfig, x_start: f64, index: u64) -> Result<PathOutcome> {
    config.validate()?;
    if !(x_start >= 0.0) {
        return Err(Error::invalid("x_start must be nonnegative"));
    }
    Ok(run_path(config, x_start, &mut path_rng(config.seed, index)))
}

fn outcomes(config: &McConfig, x_start: f64) -> Vec<PathOutcome> {
    (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| run_path(config, x_start, &mut path_rng(config.seed, i)))
        .collect()
}

fn summarize(values: &[f64], absorbed: usize) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        n_absorbed: absorbed,
        n_survived: values.len() - absorbed,
    }
}

/// `E[payoff(X(T)); τ > T]` for paths started at `x_start`.
pub fn estimate_survival_payoff(
    config: &McConfig,
    x_start: f64,
    payoff: &Payoff,
) -> Result<McEstimate> {
    config.validate()?;
    if !(x_start >= 0.0) {
        return Err(Error::invalid("x_start must be nonnegative"));
    }
    let outs = outcomes(config, x_start);
    let mut absorbed = 0;
    let values: Vec<f64> = outs
        .iter()
        .map(|o| match o {
            PathOutcome::Absorbed { .. } => {
                absorbed += 1;
                0.0
            }
            PathOutcome::Survived { position } => payoff.eval(*position),
        })
        .collect();
    Ok(summarize(&values, absorbed))
}

/// `∫ w(x, 0) c0(x) dx` with `x` drawn from `c0 / N0` (one start per path).
pub fn estimate_duality(
    config: &McConfig,
    data: &InitialData,
    payoff: &Payoff,
) -> Result<McEstimate> {
    config.validate()?;
    let n0 = data.number();
    let values: Vec<(bool, f64)> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(config.seed, i);
            let u: f64 = rng.random::<f64>().clamp(1e-15, 1.0 - 1e-15);
            let x = data.tail_quantile(u).unwrap_or(0.0);
            match run_path(config, x, &mut rng) {
                PathOutcome::Absorbed { .. } => (true, 0.0),
                PathOutcome::Survived { position } => (false, n0 * payoff.eval(position)),
            }
        })
        .collect();
    let absorbed = values.iter().filter(|v| v.0).count();
    let v: Vec<f64> = values.into_iter().map(|v| v.1).collect();
    Ok(summarize(&v, absorbed))
}

/// Normalised histogram of absorption times on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHistogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    pub survival: f64,
}

impl ExitHistogram {
    /// Centre of the fullest bin.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |a, (i, d)| if *d > a.1 { (i, *d) } else { a },
            );
        0.5 * (self.edges[i] + self.edges[i + 1])
    }

    /// `∫ density + survival`, which is 1 by construction.
    pub fn total(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum::<f64>()
            + self.survival
    }
}

pub fn exit_time_histogram(config: &McConfig, x_start: f64, bins: usize) -> Result<ExitHistogram> {
    config.validate()?;
    if bins == 0 || !(config.t_final > 0.0) {
        return Err(Error::invalid("need bins >= 1 and T > 0"));
    }
    let outs = outcomes(config, x_start);
    let width = config.t_final / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut survived = 0;
    for o in &outs {
        match o {
            PathOutcome::Absorbed { time } => {
                let b = ((time / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            PathOutcome::Survived { .. } => survived += 1,
        }
    }
    let n = config.n_paths as f64;
    Ok(ExitHistogram {
        edges: (0..=bins).map(|i| i as f64 * width).collect(),
        density: counts.iter().map(|c| *c as f64 / (n * width)).collect(),
        survival: survived as f64 / n,
    })
}
