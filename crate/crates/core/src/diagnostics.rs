//! Coarsening functionals shared by every solver.
//!
//! All time derivatives are taken from recorded [`TrajectorySeries`] samples,
//! never from solver internals, so the same checks apply to the
//! Becker-Döring, diffusive and classical runs alike.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that can report power moments `∫ x^p c(x) dx`.
pub trait SizeDistribution {
    fn moment(&self, p: f64) -> f64;

    /// Contribution of the outermost resolved bin to `moment(p)`; used to
    /// flag moments whose tail runs off the grid.
    fn edge_moment(&self, _p: f64) -> f64 {
        0.0
    }
}

/// A single cluster population `weight · δ(x - x)`.
#[derive(Debug, Clone, Copy)]
pub struct PointMass {
    pub x: f64,
    pub weight: f64,
}

impl SizeDistribution for PointMass {
    fn moment(&self, p: f64) -> f64 {
        self.weight * self.x.powf(p)
    }
}

/// `Λ = ∫ x c / ∫ c`.
pub fn mean_volume<D: SizeDistribution + ?Sized>(state: &D) -> Result<f64> {
    let n = state.moment(0.0);
    if !(n > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    Ok(state.moment(1.0) / n)
}

/// `L^{1/3} = ∫ x^{1/3} c / ∫ c`.
pub fn moment_l<D: SizeDistribution + ?Sized>(state: &D) -> Result<f64> {
    let n = state.moment(0.0);
    if !(n > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    Ok((state.moment(1.0 / 3.0) / n).powi(3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyScale {
    /// `E = ∫ x^{2/3} c`
    pub energy: f64,
    /// `M = ∫ x^{4/3} c`
    pub length_scale: f64,
    /// the 4/3 moment still has more than 1e-8 of its weight in the last bin
    pub tail_unresolved: bool,
}

pub fn energy_and_scale<D: SizeDistribution + ?Sized>(state: &D) -> EnergyScale {
    let energy = state.moment(2.0 / 3.0);
    let length_scale = state.moment(4.0 / 3.0);
    let edge = state.edge_moment(4.0 / 3.0);
    EnergyScale {
        energy,
        length_scale,
        tail_unresolved: !length_scale.is_finite() || edge > 1e-8 * length_scale.abs(),
    }
}

/// One recorded time of a solver run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    /// mean cluster volume Λ
    pub lambda: f64,
    /// conservation parameter L
    pub l: f64,
    /// E = ∫ x^{2/3} c
    pub energy: f64,
    /// M = ∫ x^{4/3} c
    pub length_scale: f64,
    /// N = ∫ c
    pub number: f64,
    /// the conserved first moment
    pub mass: f64,
    /// monomer density, Becker-Döring runs only
    pub monomer: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySeries {
    pub solver: String,
    pub config_hash: String,
    pub samples: Vec<Sample>,
}

impl TrajectorySeries {
    pub fn new(solver: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            solver: solver.into(),
            config_hash: config_hash.into(),
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(last) = self.samples.last() {
            if !(sample.t > last.t) {
                return Err(Error::invalid(format!(
                    "series times must increase strictly ({} after {})",
                    sample.t, last.t
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn column(&self, f: impl Fn(&Sample) -> f64) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }

    /// Largest |mass(t) - mass(0)| over the run.
    pub fn max_mass_drift(&self) -> f64 {
        let Some(first) = self.samples.first() else {
            return 0.0;
        };
        self.samples
            .iter()
            .map(|s| (s.mass - first.mass).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the sample at time `t` (relative tolerance 1e-9).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.samples.iter().position(|s| (s.t - t).abs() <= tol)
    }

    /// Piecewise-linear interpolation of a column at time `t`.
    pub fn interpolate(&self, t: f64, f: impl Fn(&Sample) -> f64) -> Result<f64> {
        let first = self.samples.first().ok_or(Error::EmptyDistribution)?;
        let last = self.samples.last().unwrap();
        if t < first.t || t > last.t {
            return Err(Error::OutOfDomain {
                t,
                start: first.t,
                end: last.t,
            });
        }
        let k = self.samples.partition_point(|s| s.t < t);
        if k == 0 {
            return Ok(f(first));
        }
        let (a, b) = (&self.samples[k - 1], &self.samples[k]);
        let w = (t - a.t) / (b.t - a.t);
        Ok((1.0 - w) * f(a) + w * f(b))
    }
}

/// Finite-difference estimate of `dΛ/dt` from a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseningRate {
    pub t: f64,
    /// Richardson-extrapolated centered difference
    pub rate: f64,
    /// centered difference over one stride
    pub narrow: f64,
    /// centered difference over two strides
    pub wide: f64,
    /// narrow and wide estimates disagree by more than 20%
    pub non_smooth: bool,
}

fn centered_derivative(t: [f64; 3], y: [f64; 3]) -> f64 {
    // three-point derivative at the middle node of a nonuniform stencil
    let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
    (-h2 / (h1 * (h1 + h2))) * y[0]
        + ((h2 - h1) / (h1 * h2)) * y[1]
        + (h1 / (h2 * (h1 + h2))) * y[2]
}

/// Centered finite difference of Λ at sample time `t` with Richardson
/// extrapolation over strides one and two.
pub fn coarsening_rate(series: &TrajectorySeries, t: f64) -> Result<CoarseningRate> {
    let i = series
        .index_of(t)
        .ok_or_else(|| Error::invalid(format!("t = {t} is not a sample time")))?;
    if i < 2 || i + 2 >= series.len() {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            min: 5,
        });
    }
    let s = &series.samples;
    let narrow = centered_derivative(
        [s[i - 1].t, s[i].t, s[i + 1].t],
        [s[i - 1].lambda, s[i].lambda, s[i + 1].lambda],
    );
    let wide = centered_derivative(
        [s[i - 2].t, s[i].t, s[i + 2].t],
        [s[i - 2].lambda, s[i].lambda, s[i + 2].lambda],
    );
    let rate = (4.0 * narrow - wide) / 3.0;
    let non_smooth = (narrow - wide).abs() > 0.2 * narrow.abs().max(wide.abs()) && narrow != wide;
    Ok(CoarseningRate {
        t: s[i].t,
        rate,
        narrow,
        wide,
        non_smooth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry {
    pub t: f64,
    /// R(T) = [T⁻¹ ∫₀ᵀ E² dt]^{-3/2} / T
    pub ratio: f64,
}

/// Outcome of the time-averaged coarsening checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KohnOttoReport {
    pub energy_nonincreasing: bool,
    /// largest increase of E between consecutive samples (0 when monotone)
    pub max_energy_increase: f64,
    /// max over sample intervals of |ΔM/Δt|² / |ΔE/Δt|
    pub dissipation_ratio_max: f64,
    /// least-squares slope of ln(ratio) against ln(t) over the last half
    pub dissipation_ratio_growth: f64,
    pub dissipation_ratio_bounded: bool,
    /// min E·M / mass²
    pub min_em: f64,
    pub em_ok: bool,
    /// first time Λ reaches twice its initial value
    pub ladder_start: Option<f64>,
    pub ladder: Vec<LadderEntry>,
    pub ladder_bounded: bool,
    pub passed: bool,
}

/// Allowed log-log growth rate of the dissipation ratio over the late half
/// of a run before it counts as unbounded.
pub const RATIO_GROWTH_LIMIT: f64 = 0.25;

/// Slack on `E·M ≥ mass²` for quadrature error.
pub const EM_SLACK: f64 = 1e-6;

pub fn kohn_otto_report(series: &TrajectorySeries) -> Result<KohnOttoReport> {
    const MIN_SAMPLES: usize = 8;
    if series.len() < MIN_SAMPLES {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            min: MIN_SAMPLES,
        });
    }
    let s = &series.samples;

    let mut max_energy_increase: f64 = 0.0;
    for w in s.windows(2) {
        max_energy_increase = max_energy_increase.max(w[1].energy - w[0].energy);
    }

    let mut ratios = Vec::with_capacity(s.len() - 1);
    for w in s.windows(2) {
        let dt = w[1].t - w[0].t;
        let dm = (w[1].length_scale - w[0].length_scale) / dt;
        let de = ((w[1].energy - w[0].energy) / dt).abs();
        let r = if dm == 0.0 { 0.0 } else { dm * dm / de };
        ratios.push((0.5 * (w[0].t + w[1].t), r));
    }
    let dissipation_ratio_max = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    let late: Vec<(f64, f64)> = ratios
        .iter()
        .copied()
        .skip(ratios.len() / 2)
        .filter(|(t, r)| *t > 0.0 && *r > 0.0 && r.is_finite())
        .map(|(t, r)| (t.ln(), r.ln()))
        .collect();
    let dissipation_ratio_growth = if late.len() >= 2 {
        let n = late.len() as f64;
        let mx = late.iter().map(|p| p.0).sum::<f64>() / n;
        let my = late.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = late.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = late.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    let dissipation_ratio_bounded =
        dissipation_ratio_max.is_finite() && dissipation_ratio_growth <= RATIO_GROWTH_LIMIT;

    let min_em = s
        .iter()
        .map(|x| x.energy * x.length_scale / (x.mass * x.mass))
        .fold(f64::INFINITY, f64::min);
    let em_ok = min_em >= 1.0 - EM_SLACK;

    // running ∫₀ᵀ E² dt by the trapezoid rule
    let mut cumulative = vec![0.0; s.len()];
    for k in 1..s.len() {
        cumulative[k] = cumulative[k - 1]
            + 0.5 * (s[k].t - s[k - 1].t) * (s[k].energy.powi(2) + s[k - 1].energy.powi(2));
    }
    let t0 = s[0].t;
    let lambda0 = s[0].lambda;
    let ladder_start = s.iter().find(|x| x.lambda >= 2.0 * lambda0).map(|x| x.t);
    let mut ladder = Vec::new();
    if let Some(start) = ladder_start {
        let mut target = start;
        for (k, x) in s.iter().enumerate() {
            if x.t >= target - 1e-12 && x.t > t0 {
                let span = x.t - t0;
                let avg = cumulative[k] / span;
                ladder.push(LadderEntry {
                    t: x.t,
                    ratio: avg.powf(-1.5) / span,
                });
                target = (x.t - t0) * 2.0 + t0;
            }
        }
        if let Some(last) = s.last() {
            if ladder.last().map(|e| e.t) != Some(last.t) && last.t > t0 {
                let span = last.t - t0;
                ladder.push(LadderEntry {
                    t: last.t,
                    ratio: (cumulative[s.len() - 1] / span).powf(-1.5) / span,
                });
            }
        }
    }
    let ladder_bounded = match ladder.first() {
        Some(first) => ladder
            .iter()
            .all(|e| e.ratio.is_finite() && e.ratio <= first.ratio * (1.0 + 1e-9)),
        None => false,
    };

    let energy_nonincreasing = max_energy_increase <= 0.0;
    let passed = energy_nonincreasing && dissipation_ratio_bounded && em_ok && ladder_bounded;
    Ok(KohnOttoReport {
        energy_nonincreasing,
        max_energy_increase,
        dissipation_ratio_max,
        dissipation_ratio_growth,
        dissipation_ratio_bounded,
        min_em,
        em_ok,
        ladder_start,
        ladder,
        ladder_bounded,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, lambda: f64, energy: f64, length_scale: f64) -> Sample {
        Sample {
            t,
            lambda,
            l: lambda,
            energy,
            length_scale,
            number: 1.0 / lambda,
            mass: 1.0,
            monomer: None,
        }
    }

    #[test]
    fn point_mass_functionals() {
        let p = PointMass {
            x: 3.5,
            weight: 2.0,
        };
        assert!((mean_volume(&p).unwrap() - 3.5).abs() < 1e-15);
        let unit = PointMass {
            x: 1.0,
            weight: 1.0,
        };
        let es = energy_and_scale(&unit);
        assert_eq!((es.energy, es.length_scale), (1.0, 1.0));
        assert!(!es.tail_unresolved);
        assert!(
            (moment_l(&PointMass {
                x: 8.0,
                weight: 0.3
            })
            .unwrap()
                - 8.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn empty_distribution_is_an_error() {
        let p = PointMass {
            x: 1.0,
            weight: 0.0,
        };
        assert!(matches!(mean_volume(&p), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn series_rejects_non_increasing_times() {
        let mut s = TrajectorySeries::new("test", "0");
        s.push(sample(0.0, 1.0, 1.0, 1.0)).unwrap();
        assert!(s.push(sample(0.0, 1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn stationary_series_has_zero_rate() {
        let mut s = TrajectorySeries::new("test", "0");
        for k in 0..10 {
            s.push(sample(k as f64 * 0.1, 2.0, 1.0, 1.0)).unwrap();
        }
        let r = coarsening_rate(&s, 0.5).unwrap();
        assert_eq!(r.rate, 0.0);
        assert!(!r.non_smooth);
    }

    #[test]
    fn richardson_rate_exact_for_cubics() {
        let mut s = TrajectorySeries::new("test", "0");
        for k in 0..21 {
            let t = k as f64 * 0.1;
            s.push(sample(t, 1.0 + t * t * t - t, 1.0, 1.0)).unwrap();
        }
        let r = coarsening_rate(&s, 1.0).unwrap();
        assert!((r.rate - 2.0).abs() < 1e-10, "{}", r.rate);
        assert!(coarsening_rate(&s, 0.1).is_err());
        assert!(coarsening_rate(&s, 0.55).is_err());
    }

    #[test]
    fn kohn_otto_report_on_self_similar_profile() {
        // Λ ∝ (1+t), E ∝ (1+t)^{-1/3}, M ∝ (1+t)^{1/3}
        let mut s = TrajectorySeries::new("test", "0");
        for k in 0..200 {
            let t = k as f64 * 0.25;
            let g = 1.0 + t;
            s.push(sample(t, g, g.powf(-1.0 / 3.0), 1.1 * g.powf(1.0 / 3.0)))
                .unwrap();
        }
        let r = kohn_otto_report(&s).unwrap();
        assert!(r.energy_nonincreasing);
        assert!(r.em_ok && (r.min_em - 1.1).abs() < 1e-12);
        assert!(
            r.dissipation_ratio_bounded,
            "{}",
            r.dissipation_ratio_growth
        );
        assert!(r.ladder_bounded);
        assert_eq!(r.ladder_start, Some(1.0));
        assert!(r.passed);
    }

    #[test]
    fn kohn_otto_flags_energy_increase_and_short_series() {
        let mut s = TrajectorySeries::new("test", "0");
        for k in 0..10 {
            let t = k as f64;
            s.push(sample(t, 1.0 + t, 1.0 + 0.01 * t, 1.0)).unwrap();
        }
        let r = kohn_otto_report(&s).unwrap();
        assert!(!r.energy_nonincreasing);
        assert!(!r.passed);
        let mut short = TrajectorySeries::new("test", "0");
        short.push(sample(0.0, 1.0, 1.0, 1.0)).unwrap();
        assert!(matches!(
            kohn_otto_report(&short),
            Err(Error::SeriesTooShort { .. })
        ));
    }
}
