//! Adam optimizer with bias correction.

use crate::diff::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment state per parameter name. Iteration order is the
/// name order, so updates are deterministic.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// Advance the shared step counter (drives bias correction). Call once
    /// per optimization step, before the per-parameter updates.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in place using the current step's bias
    /// correction.
    pub fn update_param(&mut self, cfg: &AdamConfig, name: &str, param: &mut [T], grad: &[T]) {
        debug_assert!(self.step > 0, "advance() before update_param");
        debug_assert_eq!(param.len(), grad.len(), "gradient shape for {name}");
        let t = self.step as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.eps);
        let c1 = T::one() - T::of(cfg.beta1).powi(t);
        let c2 = T::one() - T::of(cfg.beta2).powi(t);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (T::one() - b2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// One whole step over `(name, param, grad)` triples.
    pub fn apply<'a>(
        &mut self,
        cfg: &AdamConfig,
        updates: impl Iterator<Item = (&'a str, &'a mut [T], &'a [T])>,
    ) {
        self.advance();
        for (name, param, grad) in updates {
            self.update_param(cfg, name, param, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar reference for f(x) = 0.5 (x - 3)^2.
    #[test]
    fn matches_reference_on_scalar_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut state = AdamState::<f64>::new();
        let mut x = vec![0.0f64];

        let mut rx = 0.0f64;
        let (mut rm, mut rv) = (0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = x[0] - 3.0;
            state.apply(&cfg, std::iter::once(("x", x.as_mut_slice(), &[g][..])));

            let rg = rx - 3.0;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rx -= 0.05 * mh / (vh.sqrt() + 1e-8);

            assert!(
                (x[0] - rx).abs() < 1e-10,
                "diverged at step {t}: {} vs {rx}",
                x[0]
            );
        }
        assert!((x[0] - 3.0).abs() < 3.0, "should move toward the minimum");
    }
}
