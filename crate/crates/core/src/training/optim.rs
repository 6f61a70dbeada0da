//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Steps of warmup at full scale.
pub const WARMUP_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// `None` means 10,000 steps, or 5% of the run when it is shorter than that.
    pub warmup_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_max: 1e-4,
            lr_min: 1e-7,
            warmup_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            batch: 28,
            epochs: 80,
        }
    }
}

impl OptimConfig {
    pub fn warmup_for(&self, total_steps: usize) -> usize {
        match self.warmup_steps {
            Some(w) => w,
            None if total_steps < WARMUP_STEPS => total_steps / 20,
            None => WARMUP_STEPS,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            warmup: self.warmup_for(total_steps),
            total: total_steps,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if !(self.lr_min < self.lr_max) {
            return Err(Error::invalid(format!("lr_min {} must be below lr_max {}", self.lr_min, self.lr_max)));
        }
        if total_steps > 0 && self.warmup_for(total_steps) >= total_steps {
            return Err(Error::invalid(format!(
                "warmup {} must be shorter than the {total_steps}-step run",
                self.warmup_for(total_steps)
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate as a function of the step count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Linear from 0 to `lr_max` over the warmup, then half a cosine down to
    /// `lr_min` at `total`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup && self.warmup > 0 {
            return self.lr_max * (step as f64 / self.warmup as f64);
        }
        if step >= self.total {
            return self.lr_min;
        }
        let t = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &OptimConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update at learning rate `lr`. Any non-finite gradient aborts the
    /// step before a single parameter changes.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (name, p) in &params {
            let g = grads
                .get(*name)
                .ok_or_else(|| Error::invalid(format!("no gradient for '{name}'")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient of '{name}' is {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{name}'")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| zeros_like(p));
            let v = self.v.entry(name.clone()).or_insert_with(|| zeros_like(p));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, gk) in g.data().iter().enumerate() {
                let gk = gk.to_f64c();
                let mk = self.beta1 * md[k].to_f64c() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * vd[k].to_f64c() + (1.0 - self.beta2) * gk * gk;
                md[k] = T::from_f64c(mk);
                vd[k] = T::from_f64c(vk);
                let mut x = pd[k].to_f64c();
                x -= lr * self.weight_decay * x;
                x -= lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                pd[k] = T::from_f64c(x);
            }
        }
        Ok(())
    }
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(t.shape()).expect("existing tensor shape is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn published_schedule() -> Schedule {
        OptimConfig::default().schedule(200_000)
    }

    #[test]
    fn schedule_hits_endpoints() {
        let s = published_schedule();
        assert_eq!(s.warmup, 10_000);
        assert_eq!(s.lr_at(10_000), 1e-4);
        assert_eq!(s.lr_at(200_000), 1e-7);
        assert_eq!(s.lr_at(0), 0.0);
        let mid = s.lr_at(105_000);
        assert!((mid - (1e-4 + 1e-7) / 2.0).abs() < 1e-18, "{mid}");
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = OptimConfig::default().schedule(1000);
        assert_eq!(s.warmup, 50);
        let lrs: Vec<f64> = (0..=1000).map(|k| s.lr_at(k)).collect();
        assert!(lrs[..=50].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[50..].windows(2).all(|w| w[1] <= w[0]));
        assert!((s.lr_at(51) - s.lr_at(50)).abs() < 1e-7);
    }

    #[test]
    fn validates() {
        let bad = OptimConfig { lr_min: 1.0, ..Default::default() };
        assert!(bad.validate(100).is_err());
        let bad = OptimConfig { warmup_steps: Some(100), ..Default::default() };
        assert!(bad.validate(100).is_err());
        assert!(OptimConfig::default().validate(100).is_ok());
    }

    fn one(x: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(x))])
    }

    #[test]
    fn zero_lr_or_zero_grad_without_decay_changes_nothing() {
        let mut opt = AdamW::new(&OptimConfig::default());
        let mut p = one(1.0);
        opt.update(p.iter_mut(), &one(3.0), 0.0).unwrap();
        assert_eq!(p["x"].data()[0], 1.0);
        let mut opt = AdamW::new(&OptimConfig { weight_decay: 0.0, ..Default::default() });
        opt.update(p.iter_mut(), &one(0.0), 0.1).unwrap();
        assert_eq!(p["x"].data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut opt = AdamW::new(&OptimConfig::default());
        let mut p = one(1.0);
        assert!(matches!(opt.update(p.iter_mut(), &one(f64::NAN), 0.1), Err(Error::NonFinite(_))));
        assert_eq!(p["x"].data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn decreases_a_quadratic() {
        let mut opt = AdamW::new(&OptimConfig::default());
        let mut p = one(1.0);
        let mut prev = 1.0;
        for _ in 0..100 {
            let x = p["x"].data()[0];
            opt.update(p.iter_mut(), &one(2.0 * x), 1e-3).unwrap();
            let f = p["x"].data()[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }
}
