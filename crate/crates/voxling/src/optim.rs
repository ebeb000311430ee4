//! Adam optimizer over flattened parameter vectors, plus the central
//! finite-difference gradient checker used by the verification suite.

use rand::Rng;

use crate::error::{Result, VoxError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Adam {
        Adam {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(VoxError::DimensionMismatch("optimizer state shape != parameter shape"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(VoxError::NonFinite("gradient"));
        }
        self.t += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.config.lr * mhat / (vhat.sqrt() + self.config.eps);
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale gradients down so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub probes: usize,
}

/// Central finite differences on randomly probed coordinates:
/// rel = |g_analytic - g_fd| / max(1e-8, |g_fd|), report the maximum.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    probes: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(VoxError::invalid("finite-difference step must be positive"));
    }
    if probes == 0 {
        return Err(VoxError::invalid("probe count must be at least 1"));
    }
    if params.len() != analytic.len() {
        return Err(VoxError::DimensionMismatch("analytic gradient length != parameter length"));
    }
    if params.is_empty() {
        return Err(VoxError::EmptyInput("parameters"));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        probes,
    };
    for _ in 0..probes {
        let i = rng.gen_range(0..params.len());
        work[i] = params[i] + h;
        let fp = f(&work)?;
        work[i] = params[i] - h;
        let fm = f(&work)?;
        work[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(VoxError::NonFinite("loss evaluation during gradient check"));
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.worst_analytic = analytic[i];
            report.worst_fd = fd;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn quadratic_gradient_checks_tightly() {
        let params: Vec<f64> = (0..40).map(|i| (i as f64) * 0.1 - 2.0).collect();
        let analytic: Vec<f64> = params.iter().map(|w| 2.0 * w).collect();
        let mut rng = derive_rng(1, &[1]);
        let report = grad_check(
            |w| Ok(w.iter().map(|x| x * x).sum()),
            &params,
            &analytic,
            1e-5,
            100,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let params = vec![1.0, 2.0, 3.0];
        let wrong = vec![0.0, 0.0, 0.0];
        let mut rng = derive_rng(2, &[2]);
        let report = grad_check(
            |w| Ok(w.iter().map(|x| x * x).sum()),
            &params,
            &wrong,
            1e-5,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            3,
        );
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        adam.step(&mut params, &[0.3, -0.1, 0.9]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            2,
        );
        let mut w = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut w, &g).unwrap();
        }
        assert!(w.iter().all(|x| x.abs() < 1e-2), "w = {w:?}");
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_nonfinite() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut w = vec![0.0, 0.0];
        assert!(adam.step(&mut w, &[1.0]).is_err());
        assert!(adam.step(&mut w, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn clip_preserves_direction() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }
}
