use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Tensor};

/// AdamW with decoupled weight decay applied to linear weights (`*.w`) only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW { beta1: betas.0, beta2: betas.1, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn decays(name: &str) -> bool {
        name.ends_with(".w")
    }

    /// One update. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let step_size = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (name, g) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let decay = if Self::decays(name) { T::from_f64(1.0 - lr * self.weight_decay) } else { T::one() };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *w = *w * decay - step_size * *mi / denom;
            }
        }
    }

    /// Moment buffers and step counter as named tensors, for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "opt.step".to_string(),
            Tensor::row_vector(vec![T::from_f64(self.step as f64)]),
        )];
        for (k, m) in &self.m {
            out.push((format!("opt.m.{k}"), Tensor::row_vector(m.clone())));
            out.push((format!("opt.v.{k}"), Tensor::row_vector(self.v[k].clone())));
        }
        out
    }

    pub fn load_state<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) {
        for (name, t) in entries {
            if name == "opt.step" {
                self.step = t.data()[0].as_f64() as u64;
            } else if let Some(k) = name.strip_prefix("opt.m.") {
                self.m.insert(k.to_string(), t.data().to_vec());
            } else if let Some(k) = name.strip_prefix("opt.v.") {
                self.v.insert(k.to_string(), t.data().to_vec());
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::from_f64(max_norm / (norm + 1e-6));
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

/// Linear warmup over `warmup` tokens, then cosine decay to 10% of `base` at `total`.
pub fn lr_schedule(base: f64, tokens: f64, warmup: f64, total: f64) -> f64 {
    if tokens < warmup {
        return base * tokens / warmup.max(1.0);
    }
    let progress = ((tokens - warmup) / (total - warmup).max(1.0)).min(1.0);
    base * (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.1)
}
