//! First-order optimizers: Adam, and RMSProp with momentum.

use serde::{Deserialize, Serialize};

use crate::engine::{GradSet, ParamSet, Scalar, Tensor};
use crate::error::{Error, Phase, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Square-average decay.
    pub rho: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            rho: 0.99,
            momentum: 0.9,
            eps: 1e-8,
        }
    }
}

pub trait Optimizer<T: Scalar> {
    /// Applies one update. On error neither `params` nor the state change.
    fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) -> Result<()>;
    fn steps(&self) -> u64;
    /// Named buffers for checkpointing.
    fn state_records(&self, params: &ParamSet<T>) -> Vec<(String, Tensor<T>)>;
    fn restore(&mut self, params: &ParamSet<T>, records: &[(String, Tensor<T>)]) -> Result<()>;
}

fn validate<T: Scalar>(name: &'static str, params: &ParamSet<T>, grads: &GradSet<T>) -> Result<()> {
    if grads.grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{name}: {} gradients for {} parameter leaves",
            grads.grads.len(),
            params.len()
        )));
    }
    for (leaf, g) in params.leaves().iter().zip(&grads.grads) {
        if let Some(g) = g {
            if g.shape() != leaf.tensor.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} for leaf `{}` {:?}",
                    g.shape(),
                    leaf.name,
                    leaf.tensor.shape()
                )));
            }
        }
    }
    if !grads.all_finite() {
        return Err(Error::NumericFailure {
            primitive: name,
            phase: Phase::Update,
        });
    }
    Ok(())
}

fn zeros_like<T: Scalar>(params: &ParamSet<T>) -> Vec<Tensor<T>> {
    params
        .leaves()
        .iter()
        .map(|l| Tensor::zeros(l.tensor.shape().to_vec()))
        .collect()
}

fn restore_buffers<T: Scalar>(
    params: &ParamSet<T>,
    records: &[(String, Tensor<T>)],
    prefix: &str,
) -> Result<Vec<Tensor<T>>> {
    params
        .leaves()
        .iter()
        .map(|l| {
            let key = format!("{prefix}{}", l.name);
            let t = records
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Incompatible(format!("optimizer buffer `{key}` missing")))?;
            if t.shape() != l.tensor.shape() {
                return Err(Error::Incompatible(format!("optimizer buffer `{key}` has wrong shape")));
            }
            Ok(t)
        })
        .collect()
}

fn restore_step<T: Scalar>(records: &[(String, Tensor<T>)], key: &str) -> Result<u64> {
    records
        .iter()
        .find(|(n, _)| n == key)
        .map(|(_, t)| t.item().as_f64() as u64)
        .ok_or_else(|| Error::Incompatible(format!("optimizer record `{key}` missing")))
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) -> Result<()> {
        validate("adam", params, grads)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, leaf) in params.leaves_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &gi), mi), vi) in leaf.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.step
    }

    fn state_records(&self, params: &ParamSet<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam/step".to_string(), Tensor::scalar(T::from_f64(self.step as f64)))];
        for (i, l) in params.leaves().iter().enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(i), self.v.get(i)) {
                out.push((format!("adam/m/{}", l.name), m.clone()));
                out.push((format!("adam/v/{}", l.name), v.clone()));
            }
        }
        out
    }

    fn restore(&mut self, params: &ParamSet<T>, records: &[(String, Tensor<T>)]) -> Result<()> {
        self.step = restore_step(records, "adam/step")?;
        if self.step > 0 {
            self.m = restore_buffers(params, records, "adam/m/")?;
            self.v = restore_buffers(params, records, "adam/v/")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp<T: Scalar> {
    pub config: RmsPropConfig,
    step: u64,
    square_avg: Vec<Tensor<T>>,
    momentum: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            step: 0,
            square_avg: Vec::new(),
            momentum: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) -> Result<()> {
        validate("rmsprop", params, grads)?;
        if self.square_avg.is_empty() {
            self.square_avg = zeros_like(params);
            self.momentum = zeros_like(params);
        }
        self.step += 1;
        let c = &self.config;
        let rho = T::from_f64(c.rho);
        let one_rho = T::from_f64(1.0 - c.rho);
        let mu = T::from_f64(c.momentum);
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, leaf) in params.leaves_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let (s, b) = (self.square_avg[i].data_mut(), self.momentum[i].data_mut());
            for (((p, &gi), si), bi) in leaf.tensor.data_mut().iter_mut().zip(g.data()).zip(s).zip(b) {
                *si = rho * *si + one_rho * gi * gi;
                *bi = mu * *bi + gi / (si.sqrt() + eps);
                *p -= lr * *bi;
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.step
    }

    fn state_records(&self, params: &ParamSet<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("rmsprop/step".to_string(), Tensor::scalar(T::from_f64(self.step as f64)))];
        for (i, l) in params.leaves().iter().enumerate() {
            if let (Some(s), Some(b)) = (self.square_avg.get(i), self.momentum.get(i)) {
                out.push((format!("rmsprop/square_avg/{}", l.name), s.clone()));
                out.push((format!("rmsprop/momentum/{}", l.name), b.clone()));
            }
        }
        out
    }

    fn restore(&mut self, params: &ParamSet<T>, records: &[(String, Tensor<T>)]) -> Result<()> {
        self.step = restore_step(records, "rmsprop/step")?;
        if self.step > 0 {
            self.square_avg = restore_buffers(params, records, "rmsprop/square_avg/")?;
            self.momentum = restore_buffers(params, records, "rmsprop/momentum/")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(p: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("p", Tensor::from_f64([1], &[p]).unwrap(), true).unwrap();
        s
    }

    fn grad(g: f64) -> GradSet<f64> {
        GradSet {
            grads: vec![Some(Tensor::from_f64([1], &[g]).unwrap())],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.7);
        Adam::new(AdamConfig::default()).step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.leaves()[0].tensor.data()[0], 0.7);
        RmsProp::new(RmsPropConfig::default()).step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.leaves()[0].tensor.data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = scalar_param(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &grad(1.0)).unwrap();
        let before = (p.clone(), opt.state_records(&p));
        let err = opt.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(before.0, p);
        assert_eq!(before.1, opt.state_records(&p));
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn state_restores_exactly() {
        let mut p = scalar_param(1.0);
        let mut opt = RmsProp::new(RmsPropConfig::default());
        for _ in 0..3 {
            opt.step(&mut p, &grad(0.5)).unwrap();
        }
        let rec = opt.state_records(&p);
        let mut other = RmsProp::new(RmsPropConfig::default());
        other.restore(&p, &rec).unwrap();
        let mut p2 = p.clone();
        opt.step(&mut p, &grad(0.25)).unwrap();
        other.step(&mut p2, &grad(0.25)).unwrap();
        assert_eq!(p, p2);
    }
}
