//! AdamW with decoupled weight decay and a warmup-cosine learning-rate
//! schedule, plus a finite-difference gradient checker for whole models.

use ndarray::ArrayD;

use crate::params::{Binding, ParamSet};
use crate::tape::{Real, Tape, Tx};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps of linear warmup from 0 to `lr`.
    pub warmup_steps: usize,
    /// Total schedule length; cosine decay from `lr` to `min_lr_frac * lr`.
    pub total_steps: usize,
    pub min_lr_frac: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 5000,
            total_steps,
            min_lr_frac: 0.0,
        }
    }

    /// Learning rate at optimizer step `t` (1-based, the step being taken).
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            // lr 0 at step 0, peak at the warmup step
            return self.lr * t as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let prog = (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let prog = prog.min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * prog).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

/// Decoupled-weight-decay Adam. Moments are stored in the parameter scalar
/// type and indexed by parameter position.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let m = (0..params.len())
            .map(|i| ArrayD::zeros(params.value_at(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| ArrayD::zeros(params.value_at(i).raw_dim()))
            .collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// One update. Weight decay is decoupled (applied directly to the
    /// parameter, scaled by the current lr) and skips biases and norm/gate
    /// modulation parameters.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[ArrayD<T>]) {
        assert_eq!(grads.len(), params.len(), "grad/param count mismatch");
        self.t += 1;
        let lr = T::from_f64(self.cfg.lr_at(self.t)).unwrap();
        let b1 = T::from_f64(self.cfg.beta1).unwrap();
        let b2 = T::from_f64(self.cfg.beta2).unwrap();
        let eps = T::from_f64(self.cfg.eps).unwrap();
        let wd = T::from_f64(self.cfg.weight_decay).unwrap();
        let bc1 = T::one() - T::from_f64(self.cfg.beta1.powi(self.t as i32)).unwrap();
        let bc2 = T::one() - T::from_f64(self.cfg.beta2.powi(self.t as i32)).unwrap();
        for i in 0..params.len() {
            let decay = decay_applies(params.name_at(i));
            let g = &grads[i];
            assert_eq!(
                g.shape(),
                params.value_at(i).shape(),
                "grad shape mismatch for {}",
                params.name_at(i)
            );
            ndarray::Zip::from(&mut self.m[i]).and(g).for_each(|m, &gv| {
                *m = b1 * *m + (T::one() - b1) * gv;
            });
            ndarray::Zip::from(&mut self.v[i]).and(g).for_each(|v, &gv| {
                *v = b2 * *v + (T::one() - b2) * gv * gv;
            });
            let (m, v) = (&self.m[i], &self.v[i]);
            let p = params.value_at_mut(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                let mut upd = lr * mhat / (vhat.sqrt() + eps);
                if decay {
                    upd = upd + lr * wd * *p;
                }
                *p = *p - upd;
            });
        }
    }
}

/// Weight decay applies to weight matrices only, not biases, gains or
/// modulation heads.
fn decay_applies(name: &str) -> bool {
    !(name.ends_with(".b") || name.contains("norm") || name.contains("mod") || name.contains("bias"))
}

/// Finite-difference check of every parameter gradient for an arbitrary
/// scalar loss builder. Checks up to `per_param` entries of each parameter
/// (evenly strided) with central differences and returns the worst relative
/// error. The builder must be deterministic.
pub fn grad_check<F>(params: &ParamSet<f64>, build: F, h: f64, per_param: usize) -> f64
where
    F: Fn(&mut Tape<f64>, &Binding) -> Tx,
{
    let mut tape = Tape::<f64>::new();
    let binding = params.bind(&mut tape);
    let root = build(&mut tape, &binding);
    let grads = tape.backward(root);
    let analytic = params.grads(&binding, &grads);

    let eval = |p: &ParamSet<f64>| -> f64 {
        let mut t = Tape::<f64>::new();
        let b = p.bind(&mut t);
        let r = build(&mut t, &b);
        t.scalar(r)
    };

    // scale-aware floor: entries whose gradient is orders of magnitude below
    // the largest one are compared with an absolute tolerance
    let gmax = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()))
        .max(1e-12);

    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let n = params.value_at(i).len();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let mut pp = params.clone();
            let mut pm = params.clone();
            {
                let s = pp.value_at_mut(i).as_slice_mut().unwrap();
                s[j] += h;
            }
            {
                let s = pm.value_at_mut(i).as_slice_mut().unwrap();
                s[j] -= h;
            }
            let fd = (eval(&pp) - eval(&pm)) / (2.0 * h);
            let an = analytic[i].as_slice().unwrap()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3 * gmax);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
