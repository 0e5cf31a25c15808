use super::array::{Array, Element};
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
///
/// Velocity buffers are created lazily on the first step and persist across
/// calls.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    momentum: T,
    velocity: Vec<Array<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} not in [0, 1)")));
        }
        Ok(SgdMomentum {
            momentum: T::from_f64(momentum),
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if grads.len() != store.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = store
                .ids()
                .map(|id| Array::zeros(store.get(id).shape()))
                .collect();
        }
        let lr = T::from_f64(lr);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let v = &mut self.velocity[id.index()];
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}
