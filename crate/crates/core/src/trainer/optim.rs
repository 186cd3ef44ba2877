use aidmae_tensor::{ParamId, ParamStore};
use log::warn;
use serde::{Deserialize, Serialize};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Learning rate and weight decay for one parameter, or `None` to leave it.
pub type Hyper = Option<(f64, f64)>;

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// One update of every trainable parameter from its accumulated gradient:
    ///
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
    ///
    /// Returns `false` and leaves everything untouched if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, hyper: impl Fn(ParamId) -> Hyper) -> bool {
        store.ensure_grad_buffers();
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.requires_grad && p.grad.iter().any(|g| !g.is_finite()))
        {
            warn!("non-finite gradient in {}; update skipped", p.name);
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some((lr, wd)) = hyper(id) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * wd * *theta;
            }
        }
        true
    }
}

/// Warmup-then-cosine learning-rate schedule over (fractional) epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub max_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 20.0,
            max_epochs: 400,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then
/// `min + ½(base − min)(1 + cos(π·progress))` until `max_epochs`.
pub fn cosine_lr(epoch: f64, s: &Schedule) -> f64 {
    if epoch < s.warmup_epochs {
        return s.base_lr * epoch.max(0.0) / s.warmup_epochs;
    }
    let span = s.max_epochs as f64 - s.warmup_epochs;
    let progress = if span > 0.0 {
        ((epoch - s.warmup_epochs) / span).clamp(0.0, 1.0)
    } else {
        1.0
    };
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use aidmae_tensor::Tensor;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::from_vec(vec![theta]));
        s.get_mut(id).grad = vec![grad];
        s
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(&s);
        assert!(opt.step(&mut s, |_| Some((0.1, 0.0))));
        // m̂ = v̂ = 1 after bias correction.
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.get(ParamId(0)).value.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(&s);
        for _ in 0..5 {
            opt.step(&mut s, |_| Some((0.1, 0.0)));
        }
        assert_eq!(s.get(ParamId(0)).value.data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_is_geometric() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(&s);
        for k in 1..=10 {
            opt.step(&mut s, |_| Some((0.1, 0.5)));
            let want = 2.0 * (1.0 - 0.05f64).powi(k);
            assert!((s.get(ParamId(0)).value.data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(&s);
        assert!(!opt.step(&mut s, |_| Some((0.1, 0.0))));
        assert_eq!(opt.step, 0);
        assert_eq!(s.get(ParamId(0)).value.data()[0], 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(cosine_lr(0.0, &s), 0.0);
        assert_eq!(cosine_lr(20.0, &s), 1e-3);
        assert_eq!(cosine_lr(400.0, &s), 1e-5);
        let mid = cosine_lr(210.0, &s);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((cosine_lr(10.0, &s) - 5e-4).abs() < 1e-18);
        for e in 20..=400 {
            let lr = cosine_lr(e as f64, &s);
            assert!((s.min_lr..=s.base_lr).contains(&lr));
        }
    }
}
