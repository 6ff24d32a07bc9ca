//! AdamW with decoupled weight decay and the warmup-then-cosine learning
//! rate schedule used by every training stage.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter with its weight-decay eligibility. Matrices decay;
/// biases and norm gains do not.
pub struct ParamDef {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub lr_max: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Floor of the cosine decay as a fraction of lr_max.
    pub final_lr_frac: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) {
            return Err(Error::InvalidConfig("lr_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig("warmup_frac must be in [0, 1)".into()));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return Err(Error::InvalidConfig("final_lr_frac must be in (0, 1]".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate applied at `step` (0-based). Linear ramp to lr_max over
    /// the warmup window, then cosine decay to final_lr_frac * lr_max.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.warmup_frac * self.total_steps as f64).round() as usize)
            .min(self.total_steps.saturating_sub(1));
        if step < warmup {
            return self.lr_max * (step + 1) as f64 / warmup as f64;
        }
        let floor = self.final_lr_frac * self.lr_max;
        let span = (self.total_steps - warmup).max(1);
        let progress = (step - warmup) as f64 / span as f64;
        let progress = progress.min(1.0);
        floor + (self.lr_max - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step_count: usize,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(params: &[ParamDef], betas: (f64, f64), weight_decay: f64) -> AdamW {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            slots: params
                .iter()
                .map(|p| Slot { m: vec![0.0; p.tensor.len()], v: vec![0.0; p.tensor.len()] })
                .collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One update. Consumes each parameter's accumulated gradient (missing
    /// gradients count as zero). Weight decay is decoupled: it scales the
    /// parameter directly and never enters the moment estimates.
    pub fn step(&mut self, params: &[ParamDef], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer built for {} params, given {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, slot) in params.iter().zip(self.slots.iter_mut()) {
            let g = p.tensor.take_grad();
            let mut bad = false;
            p.tensor.apply(|theta| {
                for i in 0..theta.len() {
                    let gi = g.as_ref().map_or(0.0, |g| g[i]);
                    slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                    slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = slot.m[i] / bc1;
                    let vhat = slot.v[i] / bc2;
                    let mut upd = mhat / (vhat.sqrt() + self.eps);
                    if p.decay {
                        upd += self.weight_decay * theta[i];
                    }
                    theta[i] -= lr * upd;
                    if !theta[i].is_finite() {
                        bad = true;
                    }
                }
            });
            if bad {
                return Err(Error::Numeric {
                    kernel: "adamw",
                    detail: format!("non-finite parameter after update: {}", p.name),
                });
            }
        }
        Ok(())
    }

    /// Moment vectors for checkpointing, aligned with the parameter list the
    /// optimizer was built over.
    pub fn state(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.slots.iter().map(|s| (s.m.clone(), s.v.clone())).collect()
    }

    pub fn restore(&mut self, step_count: usize, state: Vec<(Vec<f64>, Vec<f64>)>) -> Result<()> {
        if state.len() != self.slots.len() {
            return Err(Error::InvalidConfig("optimizer state length mismatch".into()));
        }
        for (slot, (m, v)) in self.slots.iter_mut().zip(state) {
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(Error::InvalidConfig("optimizer moment shape mismatch".into()));
            }
            slot.m = m;
            slot.v = v;
        }
        self.step_count = step_count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn sched(lr_max: f64, warmup_frac: f64, final_frac: f64, steps: usize) -> LrSchedule {
        let s = LrSchedule { lr_max, warmup_frac, final_lr_frac: final_frac, total_steps: steps };
        s.validate().unwrap();
        s
    }

    #[test]
    fn warmup_ramps_linearly_to_max() {
        let s = sched(3e-3, 0.1, 0.1, 300);
        // 30 warmup steps
        assert!((s.lr_at(0) - 3e-3 / 30.0).abs() < 1e-15);
        assert!((s.lr_at(14) - 3e-3 * 15.0 / 30.0).abs() < 1e-15);
        assert!((s.lr_at(29) - 3e-3).abs() < 1e-15);
        for i in 1..30 {
            assert!(s.lr_at(i) > s.lr_at(i - 1));
        }
    }

    #[test]
    fn cosine_decays_to_final_fraction() {
        let s = sched(1e-3, 0.1, 0.1, 1000);
        let warmup = 100;
        assert!((s.lr_at(warmup) - 1e-3).abs() < 1e-10);
        // midpoint of the cosine sits halfway between max and floor
        let mid = s.lr_at(warmup + 450);
        assert!((mid - (1e-3 + 1e-4) / 2.0).abs() < 2e-6, "mid {mid}");
        let last = s.lr_at(999);
        assert!(last > 1e-4 && last < 1.01e-4, "last {last}");
        for step in 0..1000 {
            let lr = s.lr_at(step);
            assert!(lr > 0.0 && lr <= 1e-3 + 1e-15, "step {step} lr {lr}");
            if step >= warmup {
                assert!(lr >= 1e-4 - 1e-15, "decay floor violated at {step}: {lr}");
            }
        }
    }

    #[test]
    fn tiny_warmup_fraction_rounds_to_whole_steps() {
        let s = sched(1.0, 1.0 / 300.0, 0.1, 300);
        // exactly one warmup step: full lr immediately, cosine starts at max
        assert!((s.lr_at(0) - 1.0).abs() < 1e-15);
        assert!((s.lr_at(1) - 1.0).abs() < 1e-15);
        assert!(s.lr_at(2) < 1.0);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let theta = Tensor::leaf(&[1], vec![1.0], true).unwrap();
        let params = vec![ParamDef { name: "w".into(), tensor: theta.clone(), decay: true }];
        let mut opt = AdamW::new(&params, (0.9, 0.95), 0.1);

        let half = Tensor::constant(&[1], vec![0.5]).unwrap();
        let loss = theta.mul(&half).unwrap().reduce_sum().unwrap();
        backward(&loss).unwrap();
        opt.step(&params, 0.01).unwrap();

        // independent arithmetic: g=0.5, m=0.05, v=0.0125, mhat=0.5, vhat=0.25
        let g: f64 = 0.5;
        let m = 0.1 * g;
        let v = 0.05 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.95);
        let expect = 1.0 - 0.01 * (mhat / (vhat.sqrt() + 1e-8) + 0.1 * 1.0);
        assert!((theta.values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_flagged_params() {
        let w = Tensor::leaf(&[1], vec![2.0], true).unwrap();
        let b = Tensor::leaf(&[1], vec![2.0], true).unwrap();
        let params = vec![
            ParamDef { name: "w".into(), tensor: w.clone(), decay: true },
            ParamDef { name: "b".into(), tensor: b.clone(), decay: false },
        ];
        let mut opt = AdamW::new(&params, (0.9, 0.95), 0.1);
        // zero gradient: only decay moves anything
        opt.step(&params, 0.01).unwrap();
        assert!((w.values()[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
        assert_eq!(b.values()[0], 2.0);
    }

    #[test]
    fn state_roundtrip_is_exact() {
        let theta = Tensor::leaf(&[3], vec![0.5, -0.2, 1.0], true).unwrap();
        let params = vec![ParamDef { name: "w".into(), tensor: theta.clone(), decay: true }];
        let mut opt = AdamW::new(&params, (0.9, 0.95), 0.1);
        for i in 0..5 {
            let c = Tensor::constant(&[3], vec![0.1 * i as f64, 0.2, -0.3]).unwrap();
            backward(&theta.mul(&c).unwrap().reduce_sum().unwrap()).unwrap();
            opt.step(&params, 1e-2).unwrap();
        }
        let saved_vals = theta.values();
        let saved_state = opt.state();
        let saved_count = opt.step_count();

        let theta2 = Tensor::leaf(&[3], saved_vals.clone(), true).unwrap();
        let params2 = vec![ParamDef { name: "w".into(), tensor: theta2.clone(), decay: true }];
        let mut opt2 = AdamW::new(&params2, (0.9, 0.95), 0.1);
        opt2.restore(saved_count, saved_state).unwrap();

        for i in 0..5 {
            let c = Tensor::constant(&[3], vec![0.05 * i as f64, -0.1, 0.2]).unwrap();
            backward(&theta.mul(&c).unwrap().reduce_sum().unwrap()).unwrap();
            opt.step(&params, 1e-2).unwrap();
            let c2 = Tensor::constant(&[3], vec![0.05 * i as f64, -0.1, 0.2]).unwrap();
            backward(&theta2.mul(&c2).unwrap().reduce_sum().unwrap()).unwrap();
            opt2.step(&params2, 1e-2).unwrap();
        }
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(theta.values()), bits(theta2.values()));
    }
}
