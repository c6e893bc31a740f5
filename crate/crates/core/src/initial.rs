//! Initial size distributions `c0(x)` with their number tails
//! `w0(x) = ∫_x^∞ c0`, normalised to unit mass `∫ x c0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::brent;

/// Tail level below which the distribution is treated as exhausted.
pub const TAIL_CUTOFF: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialShape {
    /// `c0(x) = x e^{-x} / 2`
    ExponentialMoment,
    /// `(1 - s²)³` on `[a, b]`, `s = (2x - a - b)/(b - a)`
    CompactBump { a: f64, b: f64 },
    /// piecewise linear through `(x, c)` samples, zero outside
    Table { x: Vec<f64>, c: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDataSpec {
    #[serde(flatten)]
    pub shape: InitialShape,
    /// `λ` in `λ² c0(λ x)`; mass is unchanged
    #[serde(default = "one")]
    pub dilation: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for InitialDataSpec {
    fn default() -> Self {
        Self {
            shape: InitialShape::ExponentialMoment,
            dilation: 1.0,
        }
    }
}

impl InitialDataSpec {
    pub fn exponential() -> Self {
        Self::default()
    }

    pub fn dilated(mut self, lambda: f64) -> Self {
        self.dilation *= lambda;
        self
    }

    pub fn build(&self) -> Result<InitialData> {
        InitialData::new(self.clone())
    }
}

#[derive(Debug, Clone)]
enum Prepared {
    Exponential,
    Bump {
        a: f64,
        b: f64,
        norm: f64,
    },
    Table {
        x: Vec<f64>,
        c: Vec<f64>,
        cum: Vec<f64>,
        norm: f64,
    },
}

/// Evaluable initial data built from an [`InitialDataSpec`].
#[derive(Debug, Clone)]
pub struct InitialData {
    spec: InitialDataSpec,
    prepared: Prepared,
}

fn bump_antiderivative(s: f64) -> f64 {
    let s2 = s * s;
    s * (1.0 - s2 + 0.6 * s2 * s2 - s2 * s2 * s2 / 7.0)
}

impl InitialData {
    pub fn new(spec: InitialDataSpec) -> Result<Self> {
        if !(spec.dilation > 0.0 && spec.dilation.is_finite()) {
            return Err(Error::config("initial.dilation", "must be positive"));
        }
        let prepared = match &spec.shape {
            InitialShape::ExponentialMoment => Prepared::Exponential,
            InitialShape::CompactBump { a, b } => {
                if !(*a >= 0.0 && b > a && b.is_finite()) {
                    return Err(Error::config("initial.b", "compact bump needs 0 <= a < b"));
                }
                let half = 0.5 * (b - a);
                let raw_mass = 0.5 * (a + b) * half * 32.0 / 35.0;
                Prepared::Bump {
                    a: *a,
                    b: *b,
                    norm: 1.0 / raw_mass,
                }
            }
            InitialShape::Table { x, c } => {
                if x.len() < 2 || x.len() != c.len() {
                    return Err(Error::config(
                        "initial.x",
                        "table needs matching x and c with >= 2 rows",
                    ));
                }
                if x[0] < 0.0 || x.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::config(
                        "initial.x",
                        "must be nonnegative and strictly increasing",
                    ));
                }
                if c.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::config("initial.c", "must be nonnegative"));
                }
                let n = x.len();
                let mut cum = vec![0.0; n];
                let mut raw_mass = 0.0;
                for i in (0..n - 1).rev() {
                    let h = x[i + 1] - x[i];
                    cum[i] = cum[i + 1] + 0.5 * h * (c[i] + c[i + 1]);
                    let xm = 0.5 * (x[i] + x[i + 1]);
                    let cm = 0.5 * (c[i] + c[i + 1]);
                    raw_mass += h / 6.0 * (x[i] * c[i] + 4.0 * xm * cm + x[i + 1] * c[i + 1]);
                }
                if !(raw_mass > 0.0) {
                    return Err(Error::config("initial.c", "table carries no mass"));
                }
                Prepared::Table {
                    x: x.clone(),
                    c: c.clone(),
                    cum,
                    norm: 1.0 / raw_mass,
                }
            }
        };
        Ok(Self { spec, prepared })
    }

    pub fn spec(&self) -> &InitialDataSpec {
        &self.spec
    }

    fn base_density(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match &self.prepared {
            Prepared::Exponential => 0.5 * x * (-x).exp(),
            Prepared::Bump { a, b, norm } => {
                if x <= *a || x >= *b {
                    0.0
                } else {
                    let s = (2.0 * x - a - b) / (b - a);
                    norm * (1.0 - s * s).powi(3)
                }
            }
            Prepared::Table { x: xs, c, norm, .. } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                let i = xs.partition_point(|v| *v <= x).clamp(1, xs.len() - 1) - 1;
                let f = (x - xs[i]) / (xs[i + 1] - xs[i]);
                norm * (c[i] + f * (c[i + 1] - c[i]))
            }
        }
    }

    fn base_tail(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.prepared {
            Prepared::Exponential => 0.5 * (x + 1.0) * (-x).exp(),
            Prepared::Bump { a, b, norm } => {
                if x >= *b {
                    0.0
                } else {
                    let s = ((2.0 * x - a - b) / (b - a)).max(-1.0);
                    norm * 0.5 * (b - a) * (bump_antiderivative(1.0) - bump_antiderivative(s))
                }
            }
            Prepared::Table {
                x: xs,
                c,
                cum,
                norm,
            } => {
                let n = xs.len();
                if x >= xs[n - 1] {
                    return 0.0;
                }
                if x <= xs[0] {
                    return norm * cum[0];
                }
                let i = xs.partition_point(|v| *v <= x).clamp(1, n - 1) - 1;
                let f = (x - xs[i]) / (xs[i + 1] - xs[i]);
                let cx = c[i] + f * (c[i + 1] - c[i]);
                norm * (cum[i + 1] + 0.5 * (xs[i + 1] - x) * (cx + c[i + 1]))
            }
        }
    }

    /// `c0(x)`
    pub fn density(&self, x: f64) -> f64 {
        let l = self.spec.dilation;
        l * l * self.base_density(l * x)
    }

    /// `w0(x) = ∫_x^∞ c0`
    pub fn tail(&self, x: f64) -> f64 {
        let l = self.spec.dilation;
        l * self.base_tail(l * x)
    }

    /// Total number `N0 = w0(0)`.
    pub fn number(&self) -> f64 {
        self.tail(0.0)
    }

    /// A point beyond which `w0 < TAIL_CUTOFF` (or the support ends).
    pub fn support_end(&self) -> f64 {
        let l = self.spec.dilation;
        let base = match &self.prepared {
            Prepared::Exponential => {
                // (x + 1) e^{-x} / 2 is decreasing; bracket is generous
                brent(|x| self.base_tail(x) - TAIL_CUTOFF, 0.0, 100.0, 1e-12, 200).unwrap_or(100.0)
            }
            Prepared::Bump { b, .. } => *b,
            Prepared::Table { x, .. } => x[x.len() - 1],
        };
        base / l
    }

    /// The size `x` with `w0(x) = p · N0`, `0 < p < 1`.
    pub fn tail_quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid("quantile level must lie in (0, 1)"));
        }
        let target = p * self.number();
        let hi = self.support_end();
        brent(|x| self.tail(x) - target, 0.0, hi, 1e-14 * hi.max(1.0), 300)
    }

    /// Cell averages over consecutive edges, exact from the tail.
    pub fn cell_averages(&self, edges: &[f64]) -> Vec<f64> {
        edges
            .windows(2)
            .map(|w| (self.tail(w[0]) - self.tail(w[1])) / (w[1] - w[0]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::integrate;

    fn moments(d: &InitialData) -> (f64, f64) {
        let end = d.support_end();
        let (n, _) = integrate(|x| d.density(x), 0.0, end, 1e-14, 1e-13, 500);
        let (m, _) = integrate(|x| x * d.density(x), 0.0, end, 1e-14, 1e-13, 500);
        (n, m)
    }

    #[test]
    fn exponential_moment_data() {
        let d = InitialDataSpec::exponential().build().unwrap();
        assert_eq!(d.number(), 0.5);
        let (n, m) = moments(&d);
        assert!((n - 0.5).abs() < 1e-12 && (m - 1.0).abs() < 1e-12);
        assert!(d.tail(d.support_end()) <= 1.0001 * TAIL_CUTOFF);
    }

    #[test]
    fn bump_and_table_are_mass_normalised() {
        for spec in [
            InitialDataSpec {
                shape: InitialShape::CompactBump { a: 1.0, b: 3.0 },
                dilation: 1.0,
            },
            InitialDataSpec {
                shape: InitialShape::Table {
                    x: vec![0.0, 0.5, 1.5, 4.0],
                    c: vec![0.0, 2.0, 1.0, 0.0],
                },
                dilation: 1.0,
            },
        ] {
            let d = spec.build().unwrap();
            let (n, m) = moments(&d);
            assert!((m - 1.0).abs() < 1e-11, "{m}");
            assert!((n - d.number()).abs() < 1e-11);
            for x in [0.2, 1.1, 2.0, 2.9] {
                let (t, _) = integrate(|y| d.density(y), x, d.support_end(), 1e-15, 1e-13, 500);
                assert!((t - d.tail(x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dilation_keeps_mass_and_scales_number() {
        let d = InitialDataSpec::exponential().dilated(2.0).build().unwrap();
        let (n, m) = moments(&d);
        assert!((m - 1.0).abs() < 1e-12);
        assert!((n - 1.0).abs() < 1e-12);
        assert!((d.tail(0.7) - 2.0 * 0.5 * 2.4 * (-1.4f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn quantiles_and_cells() {
        let d = InitialDataSpec::exponential().build().unwrap();
        let x = d.tail_quantile(0.25).unwrap();
        assert!((d.tail(x) - 0.125).abs() < 1e-14);
        let edges = [0.0, 0.5, 1.0, 3.0];
        let avg = d.cell_averages(&edges);
        let total: f64 = avg
            .iter()
            .zip(edges.windows(2))
            .map(|(a, w)| a * (w[1] - w[0]))
            .sum();
        assert!((total - (d.tail(0.0) - d.tail(3.0))).abs() < 1e-15);
        assert!(d.tail_quantile(1.0).is_err());
    }

    #[test]
    fn invalid_specs() {
        let bad = InitialDataSpec {
            shape: InitialShape::CompactBump { a: 2.0, b: 1.0 },
            dilation: 1.0,
        };
        assert!(matches!(bad.build(), Err(Error::InvalidConfig { .. })));
        let bad = InitialDataSpec {
            shape: InitialShape::Table {
                x: vec![0.0, 1.0],
                c: vec![1.0, -1.0],
            },
            dilation: 1.0,
        };
        assert!(bad.build().is_err());
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = InitialDataSpec {
            shape: InitialShape::CompactBump { a: 0.5, b: 2.0 },
            dilation: 2.0,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"compact-bump\""));
        let back: InitialDataSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let default: InitialDataSpec =
            serde_json::from_str(r#"{"kind":"exponential-moment"}"#).unwrap();
        assert_eq!(default, InitialDataSpec::exponential());
    }
}
