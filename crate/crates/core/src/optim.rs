use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gradcore::RealMatrix;
use crate::model::{ParamGroup, ParamStore};

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch convention:
/// the first step initializes the buffer with the raw gradient).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, RealMatrix>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn num_buffers(&self) -> usize {
        self.buffers.len()
    }

    /// Updates every trainable entry from its gradient slot. Frozen entries
    /// are never read or written.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for e in params.iter_mut().filter(|e| e.group == ParamGroup::Trainable) {
            let mut d = e.grad.clone();
            if self.weight_decay != 0.0 {
                for (dv, &v) in d.data_mut().iter_mut().zip(e.value.data()) {
                    *dv += self.weight_decay * v;
                }
            }
            let step = match self.buffers.get_mut(&e.name) {
                Some(buf) => {
                    for (b, &dv) in buf.data_mut().iter_mut().zip(d.data()) {
                        *b = self.momentum * *b + dv;
                    }
                    buf.clone()
                }
                None => {
                    if self.momentum != 0.0 {
                        self.buffers.insert(e.name.clone(), d.clone());
                    }
                    d
                }
            };
            for (v, &s) in e.value.data_mut().iter_mut().zip(step.data()) {
                *v -= self.lr * s;
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}` after SGD step", e.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_hand_recursion() {
        let mut p = ParamStore::new();
        p.insert("w", RealMatrix::scalar(1.0), ParamGroup::Trainable).unwrap();
        p.insert("f", RealMatrix::scalar(5.0), ParamGroup::Frozen).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..2 {
            p.iter_mut().for_each(|e| e.grad = RealMatrix::scalar(1.0));
            opt.step(&mut p).unwrap();
        }
        // buf1 = 1, buf2 = 0.9 + 1 = 1.9 → w = 1 - 0.1 - 0.19
        assert!((p.get("w").unwrap().item() - 0.71).abs() < 1e-15);
        assert_eq!(p.get("f").unwrap().item(), 5.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = ParamStore::new();
        p.insert("w", RealMatrix::scalar(0.3), ParamGroup::Trainable).unwrap();
        p.iter_mut().for_each(|e| e.grad = RealMatrix::scalar(7.0));
        Sgd::new(0.0, 0.9, 0.0).step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.3);
    }
}
