use super::params::{ParamKind, ParamStore, Parameter};
use super::Scalar;
use crate::error::{CoalaError, Result};

/// Plain stochastic gradient descent, optionally with heavy-ball momentum and
/// global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
    velocity: Vec<Option<Vec<T>>>,
}

/// What one [`Sgd::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CoalaError::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Sgd {
            lr,
            momentum: 0.0,
            clip_norm: None,
            velocity: Vec::new(),
        })
    }

    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(CoalaError::Invalid(format!("momentum {momentum} not in [0, 1)")));
        }
        self.momentum = momentum;
        Ok(self)
    }

    pub fn with_clip_norm(mut self, clip_norm: Option<f64>) -> Result<Self> {
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(CoalaError::Invalid(format!("clip norm must be positive, got {c}")));
            }
        }
        self.clip_norm = clip_norm;
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// `p <- p - lr * g` for every selected weight, then zeroes all grads.
    ///
    /// A non-finite gradient aborts the step before anything is written; the
    /// error names every offending parameter and the grads are left in place.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        select: impl Fn(&Parameter<T>) -> bool,
    ) -> Result<StepReport> {
        let selected = |p: &Parameter<T>| p.kind == ParamKind::Weight && select(p);
        let bad: Vec<String> = store
            .iter()
            .filter(|(_, p)| selected(p))
            .filter(|(_, p)| p.grad.as_ref().is_some_and(|g| !g.is_finite()))
            .map(|(_, p)| p.name.clone())
            .collect();
        if !bad.is_empty() {
            return Err(CoalaError::NonFinite(format!(
                "gradient of {} parameter(s): {}",
                bad.len(),
                bad.join(", ")
            )));
        }

        let grad_norm = store.grad_norm_sq(selected).sqrt();
        let scale = match self.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = T::c(self.lr);
        let scale_t = T::c(scale);
        let momentum = T::c(self.momentum);
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !selected(p) {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            if self.momentum > 0.0 {
                let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); grad.numel()]);
                for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                    *vel = momentum * *vel + g * scale_t;
                    *w -= lr * *vel;
                }
            } else {
                for (w, &g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * g * scale_t;
                }
            }
        }
        store.zero_grads();
        Ok(StepReport {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
