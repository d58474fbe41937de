use crate::{Error, Result};

/// Linear-beta schedule with cumulative products and DDIM coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    /// `alpha_bar[0] = 1`, length `steps + 1`.
    alpha_bar: Vec<f64>,
    eta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// `x_{t-1} = a·x_t + b·ε̂ + c·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    eta: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta {eta} must be >= 0")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|s| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_bar,
        eta,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        Ok(self.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt())
    }

    pub fn coeffs(&self, t: usize) -> Result<DdimCoeffs> {
        let sigma = self.sigma(t)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let a = (ab_prev / ab).sqrt();
        let b = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt() - a * (1.0 - ab).sqrt();
        Ok(DdimCoeffs { a, b, c: sigma })
    }

    /// Product `a_1 · … · a_t` (1 for `t = 0`).
    pub fn a_product(&self, t: usize) -> f64 {
        (self.alpha_bar[0] / self.alpha_bar[t]).sqrt()
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
    pub fn q_sample<F: crate::Real>(
        &self,
        x0: &crate::Tensor<F>,
        t: usize,
        eps: &crate::Tensor<F>,
    ) -> Result<crate::Tensor<F>> {
        if t > self.steps {
            return Err(Error::Contract(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        if x0.dims() != eps.dims() {
            return Err(Error::shape(format!(
                "q_sample {:?} vs {:?}",
                x0.dims(),
                eps.dims()
            )));
        }
        let (s, n) = (
            F::c(self.alpha_bar[t].sqrt()),
            F::c((1.0 - self.alpha_bar[t]).sqrt()),
        );
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| s * *x + n * *e)
            .collect();
        crate::Tensor::new(x0.dims().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.05, 0.0).is_err());
        assert!(make_schedule(10, 0.0, 0.05, 0.0).is_err());
        assert!(make_schedule(10, 0.1, 0.05, 0.0).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, 0.0).is_err());
        assert!(make_schedule(10, 1e-4, 0.05, -1.0).is_err());
    }

    #[test]
    fn desk_schedule_properties() {
        let s = make_schedule(35, 1e-4, 0.05, 0.0).unwrap();
        for t in 1..=35 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
            assert_eq!(s.coeffs(t).unwrap().c, 0.0);
        }
        // Direct product: sum of betas is 35 * 0.02505, ᾱ_T ≈ 0.414.
        let direct: f64 = (0..35)
            .map(|i| 1.0 - (1e-4 + (0.05 - 1e-4) * i as f64 / 34.0))
            .product();
        assert!((s.alpha_bar(35) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(35) < 0.5);
        assert!(s.coeffs(0).is_err() && s.coeffs(36).is_err());
    }

    #[test]
    fn coefficient_identities() {
        let s = make_schedule(35, 1e-4, 0.05, 0.0).unwrap();
        let mut prod = 1.0;
        for t in 1..=35 {
            let c = s.coeffs(t).unwrap();
            prod *= c.a;
            let lhs = c.a * s.alpha_bar(t).sqrt();
            let rhs = s.alpha_bar(t - 1).sqrt();
            assert!((lhs - rhs).abs() / rhs < 1e-12);
        }
        assert!((prod - (1.0 / s.alpha_bar(35)).sqrt()).abs() < 1e-12 * prod);
        assert!((s.a_product(35) - prod).abs() < 1e-12 * prod);
    }

    #[test]
    fn one_step_model_inverts_forward_noising() {
        let s = make_schedule(1, 0.3, 0.3, 0.0).unwrap();
        let ab = 0.7f64;
        let c = s.coeffs(1).unwrap();
        assert!((c.a - (1.0 / ab).sqrt()).abs() < 1e-15);
        assert!((c.b + ((1.0 - ab) / ab).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stochastic_eta_gives_positive_sigma() {
        let s = make_schedule(10, 1e-3, 0.1, 1.0).unwrap();
        for t in 2..=10 {
            assert!(s.coeffs(t).unwrap().c > 0.0);
        }
    }
}
