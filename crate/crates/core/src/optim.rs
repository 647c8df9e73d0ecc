//! Optimizers over a [`ParamSet`].
//!
//! Parameters and moment estimates are rounded to f32 after every update so
//! a checkpoint (which stores f32) captures the state exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Blob;
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine decay to zero over `total_steps`; constant rate when false.
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            cosine_decay: true,
        }
    }
}

/// Learning rate for the update that follows `step` completed updates.
pub fn scheduled_lr(config: &OptimizerConfig, step: u64, total_steps: u64) -> f64 {
    if !config.cosine_decay || total_steps == 0 {
        return config.lr;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Completed updates.
    pub step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

fn round(a: &mut Array2<f64>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, v)| Array2::zeros(v.dim()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update with learning rate `lr`; `grads[k]` pairs with the k-th
    /// parameter of `params`.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (k, (value, grad)) in params.values_mut().zip(grads).enumerate() {
            let mut g = grad.clone();
            if c.weight_decay > 0.0 {
                g.scaled_add(c.weight_decay, value);
            }
            match c.kind {
                OptimizerKind::Sgd => value.scaled_add(-lr, &g),
                OptimizerKind::Adam => {
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    m.zip_mut_with(&g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                    v.zip_mut_with(&g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
                    round(m);
                    round(v);
                    ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / bias1) / ((v / bias2).sqrt() + c.eps);
                    });
                }
            }
            round(value);
        }
    }

    /// Moment estimates as named blobs (`<prefix>m/<param>`, `<prefix>v/<param>`).
    pub fn to_blobs(&self, params: &ParamSet, prefix: &str) -> Vec<Blob> {
        let mut out = Vec::new();
        for (k, (name, _)) in params.iter().enumerate() {
            out.push(Blob::from_array(format!("{prefix}m/{name}"), &self.first[k]));
            out.push(Blob::from_array(format!("{prefix}v/{name}"), &self.second[k]));
        }
        out
    }

    /// Restores moments written by [`Self::to_blobs`].
    pub fn load_blobs(
        &mut self,
        params: &ParamSet,
        prefix: &str,
        blobs: &[Blob],
        step: u64,
    ) -> Result<(), String> {
        let find = |n: String| {
            blobs
                .iter()
                .find(|b| b.name == n)
                .ok_or_else(|| format!("missing optimizer blob {n}"))
        };
        for (k, (name, value)) in params.iter().enumerate() {
            let m = find(format!("{prefix}m/{name}"))?.to_array();
            let v = find(format!("{prefix}v/{name}"))?.to_array();
            if m.dim() != value.dim() || v.dim() != value.dim() {
                return Err(format!("optimizer state shape mismatch for {name}"));
            }
            self.first[k] = m;
            self.second[k] = v;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(value: Array2<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", value);
        p
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = single(array![[1.0, -2.0]]);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p);
        opt.apply(&mut p, &[array![[3.0, 4.0]]], 0.0);
        assert_eq!(p.get(p.ids().next().unwrap()), before.get(before.ids().next().unwrap()));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = single(array![[1.0, 1.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p);
        opt.apply(&mut p, &[array![[0.5, -2.0]]], 0.01);
        let w = p.by_name("w").unwrap();
        assert!((w[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_follows_gradient() {
        let mut p = single(array![[1.0]]);
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, ..Default::default() };
        let mut opt = Optimizer::new(cfg, &p);
        opt.apply(&mut p, &[array![[2.0]]], 0.25);
        assert_eq!(p.by_name("w").unwrap()[[0, 0]], 0.5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = OptimizerConfig::default();
        assert_eq!(scheduled_lr(&c, 0, 100), 1e-4);
        assert!((scheduled_lr(&c, 50, 100) - 5e-5).abs() < 1e-15);
        assert!(scheduled_lr(&c, 100, 100).abs() < 1e-20);
        let flat = OptimizerConfig { cosine_decay: false, ..c };
        assert_eq!(scheduled_lr(&flat, 70, 100), 1e-4);
    }

    #[test]
    fn state_round_trips_through_blobs() {
        let mut p = single(array![[0.3, 0.7]]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &p);
        opt.apply(&mut p, &[array![[0.1, -0.2]]], 1e-3);
        let blobs = opt.to_blobs(&p, "optim/");
        let mut restored = Optimizer::new(OptimizerConfig::default(), &p);
        restored.load_blobs(&p, "optim/", &blobs, opt.step).unwrap();
        assert_eq!(restored, opt);
    }
}
