//! Becker-Döring rate coefficients `a_l = a1 l^{1/3}`,
//! `b_l = a_l (z_s + q l^{-1/3})`, the equilibrium family `c_l = Q_l c1^l`
//! and the critical density of the saturated equilibrium.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on the number of terms summed by [`critical_density`].
pub const CRITICAL_DENSITY_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub a1: f64,
    pub z_s: f64,
    pub q: f64,
}

impl Default for RateModel {
    fn default() -> Self {
        Self {
            a1: 1.0,
            z_s: 1.0,
            q: 1.0,
        }
    }
}

impl RateModel {
    pub fn new(a1: f64, z_s: f64, q: f64) -> Result<Self> {
        let model = Self { a1, z_s, q };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0 && self.a1.is_finite()) {
            return Err(Error::config("a1", "must be positive"));
        }
        if !(self.z_s > 0.0 && self.z_s.is_finite()) {
            return Err(Error::config("z_s", "must be positive"));
        }
        // q = 0 is the surface-tension-free limit; it has no finite critical density
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::config("q", "must be nonnegative"));
        }
        Ok(())
    }

    /// Aggregation rate `a_l`.
    #[inline]
    pub fn a(&self, ell: usize) -> f64 {
        self.a1 * (ell as f64).cbrt()
    }

    /// Evaporation rate `b_l`.
    #[inline]
    pub fn b(&self, ell: usize) -> f64 {
        let cr = (ell as f64).cbrt();
        self.a1 * cr * (self.z_s + self.q / cr)
    }
}

/// Returns `(a_l, b_l)`.
pub fn cluster_rates(model: &RateModel, ell: usize) -> Result<(f64, f64)> {
    if ell == 0 {
        return Err(Error::invalid("cluster size must be >= 1"));
    }
    Ok((model.a(ell), model.b(ell)))
}

/// Equilibrium coefficients `Q_l`, `l = 1..=l_max`, held as logarithms.
#[derive(Debug, Clone)]
pub struct EquilibriumTable {
    log_q: Vec<f64>,
}

impl EquilibriumTable {
    pub fn l_max(&self) -> usize {
        self.log_q.len()
    }

    /// `ln Q_l`.
    pub fn log_q(&self, ell: usize) -> f64 {
        self.log_q[ell - 1]
    }

    /// `Q_l`; underflows to 0 for very large `l`.
    pub fn q(&self, ell: usize) -> f64 {
        self.log_q[ell - 1].exp()
    }

    /// Equilibrium density `Q_l c1^l` evaluated in log space.
    pub fn density(&self, ell: usize, c1: f64) -> f64 {
        if c1 <= 0.0 {
            return 0.0;
        }
        (self.log_q[ell - 1] + ell as f64 * c1.ln()).exp()
    }

    /// The full equilibrium sequence `c_l = Q_l c1^l`, `l = 1..=l_max`.
    pub fn profile(&self, c1: f64) -> Vec<f64> {
        (1..=self.l_max()).map(|l| self.density(l, c1)).collect()
    }
}

/// Builds `Q_l` from `Q_1 = 1`, `Q_{l+1} = Q_l a_l / b_{l+1}`.
pub fn equilibrium_table(model: &RateModel, l_max: usize) -> Result<EquilibriumTable> {
    if l_max < 2 {
        return Err(Error::invalid("l_max must be >= 2"));
    }
    let mut log_q = Vec::with_capacity(l_max);
    let mut acc = 0.0;
    log_q.push(acc);
    for ell in 1..l_max {
        acc += model.a(ell).ln() - model.b(ell + 1).ln();
        log_q.push(acc);
    }
    Ok(EquilibriumTable { log_q })
}

/// Leading-order large-`l` asymptote of `ln Q_l`.
pub fn log_q_asymptote(model: &RateModel, ell: usize) -> f64 {
    let l = ell as f64;
    -(l - 1.0) * model.z_s.ln() - l.ln() / 3.0 - 1.5 * model.q / model.z_s * l.powf(2.0 / 3.0)
}

/// `rho_crit = sum_l l Q_l z_s^l`.
///
/// Summation stops once five consecutive terms fall below `tol` times the
/// partial sum.
pub fn critical_density(model: &RateModel, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let ln_z = model.z_s.ln();
    let mut log_q = 0.0;
    let mut sum = 0.0;
    let mut quiet = 0;
    for ell in 1..=CRITICAL_DENSITY_CAP {
        let term = (ell as f64) * (log_q + ell as f64 * ln_z).exp();
        sum += term;
        if term < tol * sum {
            quiet += 1;
            if quiet >= 5 {
                return Ok(sum);
            }
        } else {
            quiet = 0;
        }
        log_q += model.a(ell).ln() - model.b(ell + 1).ln();
    }
    Err(Error::DegenerateState(format!(
        "critical density series not converged after {CRITICAL_DENSITY_CAP} terms"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> RateModel {
        RateModel::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn rates_at_small_sizes() {
        assert_eq!(cluster_rates(&unit(), 1).unwrap(), (1.0, 2.0));
        let (a, b) = cluster_rates(&unit(), 2).unwrap();
        assert!((a - 1.259_921_049_894_873_2).abs() < 1e-15);
        assert!((b - 2.259_921_049_894_873_2).abs() < 1e-15);
        let m = RateModel::new(2.0, 0.5, 0.0).unwrap();
        let (a, b) = cluster_rates(&m, 8).unwrap();
        assert!((a - 4.0).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_cluster_size_is_rejected() {
        assert!(matches!(
            cluster_rates(&unit(), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(RateModel::new(0.0, 1.0, 1.0).is_err());
        assert!(RateModel::new(1.0, -1.0, 1.0).is_err());
        assert!(RateModel::new(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn equilibrium_table_first_entries() {
        let t = equilibrium_table(&unit(), 2).unwrap();
        assert_eq!(t.q(1), 1.0);
        assert!((t.q(2) - 0.442_493_334_024_442_1).abs() < 1e-15);
        assert!(equilibrium_table(&unit(), 1).is_err());
    }

    #[test]
    fn table_versus_asymptote() {
        // ln Q_64 and the exact recursion/asymptote ratio, frozen from a
        // 40-digit evaluation of the recursion
        let t = equilibrium_table(&unit(), 1_000_000).unwrap();
        let ratio = (t.log_q(64) - log_q_asymptote(&unit(), 64)).exp();
        assert!((ratio / 184.442_176_914_628_55 - 1.0).abs() < 1e-10);
        // the asymptote is a logarithmic equivalence
        let far = 1_000_000;
        let rel = t.log_q(far) / log_q_asymptote(&unit(), far);
        assert!((rel - 1.0).abs() < 0.05, "{rel}");
        let near = t.log_q(64) / log_q_asymptote(&unit(), 64);
        assert!((rel - 1.0).abs() < (near - 1.0).abs());
    }

    #[test]
    fn equilibrium_profile_has_zero_flux() {
        let m = RateModel::new(1.3, 0.7, 1.9).unwrap();
        let t = equilibrium_table(&m, 300).unwrap();
        for &c1 in &[0.1, 0.5, 0.7] {
            let c = t.profile(c1);
            for ell in 1..300 {
                let j = m.a(ell) * c1 * c[ell - 1] - m.b(ell + 1) * c[ell];
                let scale = m.a(ell) * c1 * c[ell - 1];
                if scale < 1e-280 {
                    break;
                }
                assert!(j.abs() <= 1e-12 * scale, "l={ell} j={j}");
            }
        }
    }

    #[test]
    fn critical_density_reference_values() {
        // 10^4-term sums at 30 significant digits
        let rho = critical_density(&unit(), 1e-14).unwrap();
        assert!((rho - 4.468_487_765_372_002).abs() < 1e-12, "{rho}");
        let rho_q2 = critical_density(&RateModel::new(1.0, 1.0, 2.0).unwrap(), 1e-14).unwrap();
        assert!((rho_q2 - 2.342_246_700_438_350_4).abs() < 1e-12);
        let rho_z2 = critical_density(&RateModel::new(1.0, 2.0, 1.0).unwrap(), 1e-14).unwrap();
        assert!((rho_z2 - 23.175_291_614_737_61).abs() < 1e-10);
    }

    #[test]
    fn critical_density_independent_of_a1() {
        let r1 = critical_density(&unit(), 1e-12).unwrap();
        let r2 = critical_density(&RateModel::new(7.5, 1.0, 1.0).unwrap(), 1e-12).unwrap();
        assert!((r1 - r2).abs() < 1e-12 * r1);
    }

    #[test]
    fn critical_density_fails_without_surface_tension() {
        let m = RateModel::new(1.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            critical_density(&m, 1e-12),
            Err(Error::DegenerateState(_))
        ));
        assert!(critical_density(&unit(), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn evaporation_exceeds_saturated_aggregation(
            a1 in 0.1f64..10.0, z_s in 0.1f64..5.0, q in 0.01f64..5.0, ell in 1usize..100_000
        ) {
            let m = RateModel::new(a1, z_s, q).unwrap();
            let (a, b) = cluster_rates(&m, ell).unwrap();
            prop_assert!(b > a * z_s);
            let (a2, b2) = cluster_rates(&m, ell + 1).unwrap();
            prop_assert!(b2 / a2 < b / a);
        }

        #[test]
        fn critical_density_monotone(z_s in 0.3f64..2.0, q in 0.5f64..3.0, dz in 0.01f64..0.5, dq in 0.01f64..0.5) {
            let base = critical_density(&RateModel::new(1.0, z_s, q).unwrap(), 1e-12).unwrap();
            let more_z = critical_density(&RateModel::new(1.0, z_s + dz, q).unwrap(), 1e-12).unwrap();
            let more_q = critical_density(&RateModel::new(1.0, z_s, q + dq).unwrap(), 1e-12).unwrap();
            prop_assert!(more_z > base);
            prop_assert!(more_q < base);
        }
    }
}
