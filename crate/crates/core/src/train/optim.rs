use std::collections::BTreeMap;

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with learning rate `lr`. Parameters absent from `grads`
    /// are left alone, moments included.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::domain("adam", format!("non-finite gradient for {}", params.name(*id))));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(*id).data_mut();
            if g.numel() != p.len() {
                return Err(Error::dim("adam", format!("gradient size mismatch for parameter {}", id.0)));
            }
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    pub fn to_extras(&self, params: &ParamStore, out: &mut BTreeMap<String, Tensor>) {
        out.insert("adam.step".into(), Tensor::scalar(self.step as f64));
        for id in params.ids() {
            let name = params.name(id);
            out.insert(format!("adam.m.{name}"), Tensor::from_vec(self.m[id.0].clone()));
            out.insert(format!("adam.v.{name}"), Tensor::from_vec(self.v[id.0].clone()));
        }
    }

    pub fn from_extras(params: &ParamStore, extras: &BTreeMap<String, Tensor>) -> Result<Self> {
        let missing = |k: &str| Error::format(format!("checkpoint lacks {k}"));
        let step = extras.get("adam.step").ok_or_else(|| missing("adam.step"))?.item() as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in params.ids() {
            let name = params.name(id);
            for (prefix, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let t = extras.get(&key).ok_or_else(|| missing(&key))?;
                if t.numel() != params.get(id).numel() {
                    return Err(Error::format(format!("{key} has the wrong size")));
                }
                dst.push(t.data().to_vec());
            }
        }
        Ok(Adam { step, m, v })
    }
}

/// Halves the learning rate when the monitored loss has not improved by a
/// relative `threshold` for more than `patience` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Plateau {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            threshold: 1e-4,
        }
    }

    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn to_extras(&self, out: &mut BTreeMap<String, Tensor>) {
        out.insert(
            "plateau".into(),
            Tensor::from_vec(vec![self.lr, self.best, self.bad_epochs as f64, self.patience as f64, self.factor, self.threshold]),
        );
    }

    pub fn from_extras(extras: &BTreeMap<String, Tensor>) -> Result<Self> {
        let t = extras.get("plateau").ok_or_else(|| Error::format("checkpoint lacks plateau"))?;
        match t.data() {
            &[lr, best, bad, patience, factor, threshold] => Ok(Plateau {
                lr,
                best,
                bad_epochs: bad as usize,
                patience: patience as usize,
                factor,
                threshold,
            }),
            _ => Err(Error::format("plateau state has the wrong size")),
        }
    }
}
