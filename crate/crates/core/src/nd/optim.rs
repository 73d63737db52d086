//! Adam with decoupled weight decay, and the warmup/step-decay schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One update of every parameter that has a gradient.
    ///
    /// Parameters without an entry in `grads` are left untouched (their moments
    /// are not advanced), which is how frozen subsets are handled.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor>,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Parameter(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: gradient shape {:?} != parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * weight_decay * *pi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub warmup_start: f64,
    pub warmup_end: f64,
    pub warmup_steps: u64,
    /// Steps strictly after this one use `warmup_end * decay_factor`.
    /// Absent means no decay, so a config that omits it round-trips.
    #[serde(default)]
    pub decay_step: Option<u64>,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_start: 1e-7,
            warmup_end: 2e-4,
            warmup_steps: 5_000,
            decay_step: Some(50_000),
            decay_factor: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { warmup_start: lr, warmup_end: lr, warmup_steps: 0, decay_step: None, decay_factor: 1.0 }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + frac * (self.warmup_end - self.warmup_start);
        }
        match self.decay_step {
            Some(d) if step > d => self.warmup_end * self.decay_factor,
            _ => self.warmup_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> IndexMap<String, Tensor> {
        IndexMap::from([(name.to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut st = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = one("w", 0.3);
        st.step(&mut p, &one("w", 0.0), 0.1).unwrap();
        assert_eq!(p["w"].data()[0], 0.3);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut st = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = one("w", 0.0);
        st.step(&mut p, &one("w", 1.0), 0.1).unwrap();
        assert!((p["w"].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay() {
        let mut st = AdamState::new(AdamConfig { weight_decay: 1e-5, ..Default::default() });
        let mut p = one("w", 1.0);
        st.step(&mut p, &one("w", 0.0), 0.1).unwrap();
        assert_eq!(p["w"].data()[0], 1.0 - 0.1 * 1e-5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = one("enc.in.w", 1.0);
        let err = st.step(&mut p, &one("enc.in.w", f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.in.w"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_reference_points() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-7);
        assert_eq!(s.lr_at(5_000), 2e-4);
        assert_eq!(s.lr_at(50_000), 2e-4);
        assert_eq!(s.lr_at(50_001), 1e-4);
        let mut prev = 0.0;
        for step in 0..=5_000 {
            let lr = s.lr_at(step);
            assert!(lr >= prev);
            prev = lr;
        }
        // continuity at the end of warmup
        assert!((s.lr_at(4_999) - 2e-4).abs() < 1e-7);
    }
}
