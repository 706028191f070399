//! Noise schedule, forward corruption, and the reverse denoising update.

use crate::autodiff::Var;
use crate::error::{shape_err, OccError, Result};
use crate::tensor::{Real, Tensor};

/// Per-step diffusion coefficients. `alpha_bar` is the cumulative product of
/// `alpha` and is strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation, endpoints inclusive.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 1 {
            return Err(OccError::InvalidRange("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(OccError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..t_count)
            .map(|t| {
                if t_count == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (t_count - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(OccError::InvalidRange("empty beta array".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(OccError::InvalidRange("beta out of (0,1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(OccError::IndexOutOfRange { index: t, limit: self.len() });
        }
        Ok(())
    }

    /// Evenly spaced sub-schedule for sampling with fewer steps.
    ///
    /// Returns the derived schedule plus the original step index each
    /// sub-step corresponds to (for timestep conditioning). Sub-step alphas
    /// are ratios of consecutive selected alpha_bars, so the reverse-update
    /// formula applies unchanged.
    pub fn subsample(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        if steps < 1 || steps > self.len() {
            return Err(OccError::InvalidRange(format!(
                "steps {steps} outside [1, {}]",
                self.len()
            )));
        }
        if steps == self.len() {
            return Ok((self.clone(), (0..self.len()).collect()));
        }
        // evenly spaced, always including the last index
        let idx: Vec<usize> = (0..steps)
            .map(|k| ((k + 1) * self.len()) / steps - 1)
            .collect();
        let mut alpha = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &i in &idx {
            alpha.push(self.alpha_bar[i] / prev);
            prev = self.alpha_bar[i];
        }
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let sub = NoiseSchedule::from_betas(beta)?;
        Ok((sub, idx))
    }
}

/// Forward corruption: sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps.
pub fn q_sample<T: Real>(
    y0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if y0.shape() != eps.shape() {
        return Err(shape_err(format!(
            "q_sample shapes {:?} vs {:?}",
            y0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (c0, c1) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data: Vec<T> = y0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&y, &e)| c0 * y + c1 * e)
        .collect();
    Tensor::from_vec(y0.shape().to_vec(), data)
}

fn ddpm_coeffs(sched: &NoiseSchedule, t: usize) -> (f64, f64, f64) {
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let inv_sqrt_a = 1.0 / a.sqrt();
    let eps_coef = (1.0 - a) / (1.0 - ab).sqrt();
    let noise_scale = (1.0 - a).sqrt();
    (inv_sqrt_a, eps_coef, noise_scale)
}

/// One reverse step:
/// y_{t-1} = (y_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_t)
///           + sqrt(1-alpha_t) * z,
/// with z required to be zero at the final step (t == 0).
pub fn ddpm_step<T: Real>(
    y_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if y_t.shape() != eps_hat.shape() || y_t.shape() != z.shape() {
        return Err(shape_err(format!(
            "ddpm_step shapes {:?} / {:?} / {:?}",
            y_t.shape(),
            eps_hat.shape(),
            z.shape()
        )));
    }
    if t == 0 && z.data().iter().any(|&v| v != T::ZERO) {
        return Err(OccError::DomainError("z must be zero at the final step".into()));
    }
    let (inv_sqrt_a, eps_coef, noise_scale) = ddpm_coeffs(sched, t);
    let (ca, ce, cz) = (T::of(inv_sqrt_a), T::of(eps_coef), T::of(noise_scale));
    let data: Vec<T> = y_t
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .zip(z.data().iter())
        .map(|((&y, &e), &n)| ca * (y - ce * e) + cz * n)
        .collect();
    Tensor::from_vec(y_t.shape().to_vec(), data)
}

/// Differentiable reverse step with z = 0 (used by gradient checks).
pub fn ddpm_step_var<T: Real>(
    y_t: &Var<T>,
    eps_hat: &Var<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var<T>> {
    sched.check_t(t)?;
    let (inv_sqrt_a, eps_coef, _) = ddpm_coeffs(sched, t);
    y_t.sub(&eps_hat.mul_scalar(eps_coef)?)?.mul_scalar(inv_sqrt_a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9]);
    }

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_scalar_case() {
        // alpha_bar = 0.25: 0.5*2.0 + sqrt(0.75)*1.0
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let y0 = Tensor::scalar(2.0f64);
        let eps = Tensor::scalar(1.0f64);
        let y = q_sample(&y0, 0, &eps, &s).unwrap();
        assert!((y.item() - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((y.item() - 1.8660).abs() < 1e-4);
    }

    #[test]
    fn q_sample_is_linear() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let y0 = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = Tensor::from_vec(vec![3], vec![1.0, 0.3, -0.7]).unwrap();
        let a = 3.7f64;
        let lhs = q_sample(&y0.map(|x| x * a), 4, &eps.map(|x| x * a), &s).unwrap();
        let rhs = q_sample(&y0, 4, &eps, &s).unwrap().map(|x| x * a);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn ddpm_step_scalar_case() {
        // alpha = alpha_bar = 0.99 (single step), eps_hat = 0.5, z = 0
        let s = NoiseSchedule::from_betas(vec![0.01]).unwrap();
        let y = Tensor::scalar(1.0f64);
        let e = Tensor::scalar(0.5f64);
        let z = Tensor::scalar(0.0f64);
        let out = ddpm_step(&y, &e, 0, &z, &s).unwrap();
        let expect = (1.0 - (0.01 / 0.1) * 0.5) / 0.99f64.sqrt();
        assert!((out.item() - expect).abs() < 1e-12);
        assert!((out.item() - 0.95479).abs() < 1e-4);
    }

    #[test]
    fn ddpm_step_zero_eps_divides_by_sqrt_alpha() {
        let s = NoiseSchedule::from_betas(vec![0.3, 0.04]).unwrap();
        let y = Tensor::from_vec(vec![2], vec![1.0f64, -2.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let out = ddpm_step(&y, &zero, 1, &zero, &s).unwrap();
        let inv = 1.0 / 0.96f64.sqrt();
        assert!((out.data()[0] - inv).abs() < 1e-12);
        assert!((out.data()[1] + 2.0 * inv).abs() < 1e-12);
    }

    #[test]
    fn one_step_loop_on_zero_is_zero() {
        // y_T = 0, eps_hat = 0, z = 0 -> y_0 = 0
        let s = NoiseSchedule::from_betas(vec![0.02]).unwrap();
        let y = Tensor::<f64>::zeros(&[4]);
        let out = ddpm_step(&y, &Tensor::zeros(&[4]), 0, &Tensor::zeros(&[4]), &s).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonzero_z_at_final_step_rejected() {
        let s = NoiseSchedule::from_betas(vec![0.01]).unwrap();
        let y = Tensor::scalar(1.0f64);
        let e = Tensor::scalar(0.0f64);
        let z = Tensor::scalar(0.5f64);
        assert!(ddpm_step(&y, &e, 0, &z, &s).is_err());
    }

    #[test]
    fn subsample_matches_selected_alpha_bars() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let (sub, idx) = s.subsample(50).unwrap();
        assert_eq!(sub.len(), 50);
        assert_eq!(*idx.last().unwrap(), 199);
        for (k, &i) in idx.iter().enumerate() {
            assert!((sub.alpha_bar(k) - s.alpha_bar(i)).abs() < 1e-12);
        }
        // full-length subsample is the identity
        let (same, idx_full) = s.subsample(200).unwrap();
        assert_eq!(same, s);
        assert_eq!(idx_full[0], 0);
    }
}
