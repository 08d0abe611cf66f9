//! AdamW with a linear warm-up / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Matrix, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of total steps spent warming up.
    pub warmup: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 10,
            lr: 1e-5,
            warmup: 0.1,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(crate::Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(crate::Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup) || self.weight_decay < 0.0 {
            return Err(crate::Error::Config("warmup must lie in [0, 1] and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearSchedule {
    peak: f64,
    warmup_steps: usize,
    total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let total_steps = total_steps.max(1);
        Self {
            peak,
            warmup_steps: ((total_steps as f64) * warmup_frac).round() as usize,
            total_steps,
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let remaining = self.total_steps.saturating_sub(step) as f64;
            let span = (self.total_steps - self.warmup_steps).max(1) as f64;
            self.peak * (remaining / span).clamp(0.0, 1.0)
        }
    }
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to dense weights (`*.w`) only.
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let first = params.iter().map(|(_, m)| Matrix::zeros(m.dim())).collect();
        let second = params.iter().map(|(_, m)| Matrix::zeros(m.dim())).collect();
        let decay_mask = params.iter().map(|(n, _)| n.ends_with(".w")).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first,
            second,
            decay_mask,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            self.first[i].zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
            self.second[i].zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
            let decay = if self.decay_mask[i] { self.weight_decay } else { 0.0 };
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(&self.first[i])
                .and(&self.second[i])
                .for_each(|w, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                    *w -= lr * (update + decay * *w);
                });
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, params: &ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .ids()
        .filter_map(|id| grads.get(id))
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW driven by a [`LinearSchedule`], with global-norm clipping at 1.
pub struct Trainer {
    optimizer: AdamW,
    schedule: LinearSchedule,
    step: usize,
}

impl Trainer {
    pub const CLIP_NORM: f64 = 1.0;

    pub fn new(params: &ParamStore, config: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            optimizer: AdamW::new(params, config.weight_decay),
            schedule: LinearSchedule::new(config.lr, config.epochs * steps_per_epoch.max(1), config.warmup),
            step: 0,
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Grads) -> f64 {
        clip_global_norm(&mut grads, params, Self::CLIP_NORM);
        let lr = self.schedule.lr(self.step);
        self.optimizer.step(params, &grads, lr);
        self.step += 1;
        lr
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

/// Shuffled mini-batches of `0..n`.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LinearSchedule::new(1.0, 10, 0.2);
        assert_eq!(s.lr(0), 0.5);
        assert_eq!(s.lr(1), 1.0);
        assert_eq!(s.lr(2), 1.0);
        assert!(s.lr(9) < s.lr(5));
        assert_eq!(s.lr(10), 0.0);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x.b", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(x);
                let sq = g.matmul_t(v, v);
                g.backward(sq)
            };
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let batches = shuffled_batches(23, 10, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 3]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }
}
