//! Generative emulation of the forecast residual.
//!
//! The deterministic forecaster's one-step error, scaled to unit variance per
//! variable and level, is the target of a denoiser network conditioned on the
//! input state and a diffusion time `s`. Two objectives share the backbone:
//! flow matching on the linear interpolant `z_s = (1-s) r + s eps`, and a
//! cosine-schedule DDPM baseline predicting `r` directly. Sampling is an
//! Euler integration of the probability-flow velocity (or DDIM for the
//! baseline); the samplers take the denoiser as a closure so that their exact
//! endpoint properties can be tested against analytic oracles.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::grid::{denormalize, normalize, GridSpec, NormStats, StateTensor};
use crate::model::{
    forward, init_params, output_to_input_mask, pack_states, unpack_state, ArchConfig,
    DeterministicModel,
};
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::rng::{stream, StreamKind};
use crate::tape::Tape;
use crate::toy::{Dataset, Split};
use crate::train::{packed_weights, weighted_mse, LogRow, TrainConfig, TrainError, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Flow,
    Ddpm,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub arch: ArchConfig,
    pub objective: Objective,
    /// Initial-noise scaling at sampling time.
    pub rho: f64,
    /// Integration steps of the sampler.
    pub sample_steps: usize,
    /// Apply the signal/noise loss weighting instead of uniform weights.
    pub gamma_weighting: bool,
    /// Integrate `dz = (g - z) ds` literally instead of the probability-flow
    /// velocity `(g - z)/s`.
    pub paper_ode: bool,
    /// Diffusion time is clamped to `[s_clamp, 1 - s_clamp]` for training
    /// draws and network conditioning.
    pub s_clamp: f64,
}

impl FlowConfig {
    fn with_arch(mut arch: ArchConfig) -> Self {
        arch.in_fields = 2;
        arch.s_cond = true;
        arch.delta_out = false;
        FlowConfig {
            arch,
            objective: Objective::Flow,
            rho: 1.05,
            sample_steps: 25,
            gamma_weighting: true,
            paper_ode: false,
            s_clamp: 1e-3,
        }
    }

    pub fn toy_default() -> Self {
        Self::with_arch(ArchConfig::toy_default())
    }

    pub fn micro() -> Self {
        Self::with_arch(ArchConfig::micro())
    }
}

/// Draw `s` from a logistic-normal: `sigmoid(n)`, `n ~ N(0,1)`, clamped away
/// from the endpoints.
pub fn sigmoid_normal_s(rng: &mut ChaCha12Rng, s_clamp: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    let s = 1.0 / (1.0 + (-n).exp());
    s.clamp(s_clamp, 1.0 - s_clamp)
}

/// Cosine noise schedule: signal fraction at diffusion time `s` in `[0, 1]`,
/// with `alpha_bar(0) = 1` and `alpha_bar(1) = 0`.
pub fn alpha_bar(s: f64) -> f64 {
    let f = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (f(s) / f(0.0)).clamp(0.0, 1.0)
}

/// Loss weight at diffusion time `s` (clamped signal-to-noise style weights).
pub fn gamma_weight(objective: Objective, s: f64) -> f64 {
    match objective {
        Objective::Flow => ((1.0 - s) / s).clamp(0.05, 20.0),
        Objective::Ddpm => {
            let a = alpha_bar(s);
            (a / (1.0 - a).max(1e-12)).sqrt().clamp(0.05, 5.0)
        }
    }
}

/// Noisy residual at diffusion time `s`.
pub fn interpolant(
    objective: Objective,
    r: &ArrayD<f32>,
    eps: &ArrayD<f32>,
    s: f64,
) -> ArrayD<f32> {
    match objective {
        Objective::Flow => r * (1.0 - s) as f32 + eps * s as f32,
        Objective::Ddpm => {
            let a = alpha_bar(s);
            r * (a.sqrt() as f32) + eps * ((1.0 - a).sqrt() as f32)
        }
    }
}

/// Euler integration of the flow sampler from `z = rho * eps` at `s = 1` down
/// to `s = 0`. With the probability-flow velocity `(z - g)/s` the final step
/// lands exactly on the denoiser output; `paper_ode` integrates `dz = (g - z)
/// ds` instead.
pub fn euler_sample<F>(
    mut g: F,
    eps: &ArrayD<f32>,
    steps: usize,
    rho: f64,
    paper_ode: bool,
) -> ArrayD<f32>
where
    F: FnMut(&ArrayD<f32>, f64) -> ArrayD<f32>,
{
    assert!(steps > 0, "sampler needs at least one step");
    let dt = 1.0 / steps as f64;
    let mut z = eps * rho as f32;
    for k in 0..steps {
        let s = 1.0 - k as f64 * dt;
        let xhat = g(&z, s);
        assert_eq!(xhat.shape(), z.shape(), "denoiser changed shape");
        let rate = if paper_ode { dt } else { dt / s };
        z = &z + &((&xhat - &z) * rate as f32);
    }
    z
}

/// Deterministic DDIM sampler (eta = 0) under the cosine schedule. The final
/// step has `alpha_bar = 1`, so the output is exactly the last denoiser
/// prediction.
pub fn ddim_sample<F>(mut g: F, eps: &ArrayD<f32>, steps: usize) -> ArrayD<f32>
where
    F: FnMut(&ArrayD<f32>, f64) -> ArrayD<f32>,
{
    assert!(steps > 0, "sampler needs at least one step");
    let dt = 1.0 / steps as f64;
    let mut z = eps.clone();
    for k in 0..steps {
        let s = 1.0 - k as f64 * dt;
        let s_next = s - dt;
        let (a, an) = (alpha_bar(s), alpha_bar(s_next));
        let x0 = g(&z, s);
        assert_eq!(x0.shape(), z.shape(), "denoiser changed shape");
        let noise_dir = (&z - &(&x0 * (a.sqrt() as f32))) / ((1.0 - a).sqrt().max(1e-12) as f32);
        z = &x0 * (an.sqrt() as f32) + &noise_dir * ((1.0 - an).sqrt() as f32);
    }
    z
}

fn cast32(a: &ArrayD<f64>) -> ArrayD<f32> {
    a.mapv(|v| v as f32)
}

/// Per-slot residual sigma in the packed `[Z, H, W, V_u + V_s]` layout
/// (1 at the unused surface slots above level 0).
pub fn packed_residual_sigma(grid: &GridSpec, stats: &NormStats) -> ArrayD<f32> {
    let (z, h, w) = (grid.n_levels, grid.n_lat, grid.n_lon);
    let vc = grid.n_upper() + grid.n_surface();
    let mut out = ArrayD::<f32>::ones(ndarray::IxDyn(&[z, h, w, vc]));
    for vi in 0..grid.n_upper() {
        for zi in 0..z {
            let s = stats.upper_residual_std[[vi, zi]] as f32;
            out.index_axis_mut(Axis(3), vi)
                .index_axis_mut(Axis(0), zi)
                .fill(s);
        }
    }
    for vi in 0..grid.n_surface() {
        let s = stats.surface_residual_std[vi] as f32;
        out.index_axis_mut(Axis(3), grid.n_upper() + vi)
            .index_axis_mut(Axis(0), 0)
            .fill(s);
    }
    out
}

/// Standard-normal noise in the packed layout, zeroed at the unused surface
/// slots.
pub fn masked_noise(grid: &GridSpec, rng: &mut ChaCha12Rng) -> ArrayD<f32> {
    let mask = output_to_input_mask::<f32>(grid);
    let mut out = ArrayD::<f32>::zeros(mask.raw_dim());
    ndarray::Zip::from(&mut out).and(&mask).for_each(|o, &m| {
        let n: f32 = rng.sample(StandardNormal);
        *o = n * m;
    });
    out
}

/// One training example: normalized packed input state, unit-sigma packed
/// residual, and the input valid time.
pub struct PairSample {
    pub x: ArrayD<f32>,
    pub r: ArrayD<f32>,
    pub t: i64,
}

/// Deterministic forward of the forecaster in normalized packed space,
/// without gradients.
fn det_forward_packed(det: &DeterministicModel, xp: &ArrayD<f32>, t: i64) -> ArrayD<f32> {
    let mut tape = Tape::<f32>::new();
    let b = det.params.bind(&mut tape);
    let inp = tape.constant(xp.clone());
    let out = forward(&det.cfg, &det.grid, &mut tape, &b, inp, t, None);
    let out = crate::model::apply_delta(&det.cfg, &mut tape, out, inp);
    tape.value(out).as_standard_layout().to_owned()
}

/// Raw (masked, normalized-space) one-step residuals of the forecaster over
/// every pair of `split`.
fn raw_residuals(
    det: &DeterministicModel,
    ds: &Dataset,
    split: Split,
) -> Result<Vec<PairSample>, TrainError> {
    if split == Split::Test {
        return Err(TrainError::TestSplitForbidden);
    }
    let range = ds.range(split);
    if range.len() < 3 {
        return Err(TrainError::SplitTooShort {
            need: 3,
            have: range.len(),
        });
    }
    let mask = output_to_input_mask::<f32>(&det.grid);
    let mut out = Vec::with_capacity(range.len() - 1);
    for i in range.start..range.end - 1 {
        let xn = normalize(&ds.states[i], &det.stats);
        let yn = normalize(&ds.states[i + 1], &det.stats);
        let xp = cast32(&pack_states(&[&xn]));
        let yp = cast32(&pack_states(&[&yn]));
        let fp = det_forward_packed(det, &xp, ds.states[i].valid_time);
        let r = (&yp - &fp) * &mask;
        out.push(PairSample {
            x: xp,
            r,
            t: ds.states[i].valid_time,
        });
    }
    Ok(out)
}

/// Root-mean-square residual per upper variable/level and per surface
/// variable, over all pairs and grid cells.
fn fit_sigma(grid: &GridSpec, raws: &[PairSample]) -> (Array2<f64>, Array1<f64>) {
    let (z, h, w) = (grid.n_levels, grid.n_lat, grid.n_lon);
    let ncell = (raws.len() * h * w) as f64;
    let mut upper = Array2::<f64>::zeros((grid.n_upper(), z));
    let mut surface = Array1::<f64>::zeros(grid.n_surface());
    for p in raws {
        for vi in 0..grid.n_upper() {
            for zi in 0..z {
                let mut s = 0.0f64;
                for hi in 0..h {
                    for wi in 0..w {
                        let v = p.r[[zi, hi, wi, vi]] as f64;
                        s += v * v;
                    }
                }
                upper[[vi, zi]] += s;
            }
        }
        for vi in 0..grid.n_surface() {
            let mut s = 0.0f64;
            for hi in 0..h {
                for wi in 0..w {
                    let v = p.r[[0, hi, wi, grid.n_upper() + vi]] as f64;
                    s += v * v;
                }
            }
            surface[vi] += s;
        }
    }
    upper.mapv_inplace(|v| (v / ncell).sqrt().max(1e-6));
    surface.mapv_inplace(|v| (v / ncell).sqrt().max(1e-6));
    (upper, surface)
}

fn unitize(raws: &mut [PairSample], sigma: &ArrayD<f32>) {
    for p in raws.iter_mut() {
        p.r = &p.r / sigma;
        // dead surface slots stay exactly zero
    }
}

/// Denoiser network plus everything needed to sample residuals: the flow
/// configuration and the (train-split) normalization and residual-sigma
/// statistics.
pub struct GenerativeEmulator {
    pub cfg: FlowConfig,
    pub grid: Arc<GridSpec>,
    pub params: ParamSet<f32>,
    pub stats: NormStats,
}

impl GenerativeEmulator {
    pub fn init(cfg: FlowConfig, grid: Arc<GridSpec>, seed: u64) -> Self {
        cfg.arch.validate(&grid).expect("invalid architecture");
        assert_eq!(cfg.arch.in_fields, 2, "denoiser takes state + noisy residual");
        assert!(cfg.arch.s_cond, "denoiser needs s conditioning");
        let params = init_params(&cfg.arch, &grid, seed);
        let stats = NormStats::unit(&grid);
        GenerativeEmulator {
            cfg,
            grid,
            params,
            stats,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    /// One denoiser evaluation: predicted unit residual given the packed
    /// input state, the noisy residual `z`, and diffusion time `s`.
    pub fn denoise(&self, xp: &ArrayD<f32>, z: &ArrayD<f32>, t: i64, s: f64) -> ArrayD<f32> {
        let s = s.clamp(self.cfg.s_clamp, 1.0 - self.cfg.s_clamp);
        let inp = ndarray::concatenate(Axis(3), &[xp.view(), z.view()])
            .expect("state/residual shape mismatch")
            .as_standard_layout()
            .to_owned();
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let node = tape.constant(inp);
        let out = forward(&self.cfg.arch, &self.grid, &mut tape, &b, node, t, Some(s));
        let mask = output_to_input_mask::<f32>(&self.grid);
        tape.value(out).as_standard_layout().to_owned() * &mask
    }

    /// Sample one unit-sigma packed residual for the given normalized packed
    /// input state. Noise comes from `rng` only; the integration itself is
    /// deterministic.
    pub fn sample_residual(
        &self,
        xp: &ArrayD<f32>,
        t: i64,
        rng: &mut ChaCha12Rng,
    ) -> ArrayD<f32> {
        let eps = masked_noise(&self.grid, rng);
        let g = |z: &ArrayD<f32>, s: f64| self.denoise(xp, z, t, s);
        match self.cfg.objective {
            Objective::Flow => euler_sample(
                g,
                &eps,
                self.cfg.sample_steps,
                self.cfg.rho,
                self.cfg.paper_ode,
            ),
            Objective::Ddpm => ddim_sample(g, &eps, self.cfg.sample_steps),
        }
    }
}

/// One stochastic forecast: deterministic prediction plus a sampled residual,
/// scaled back through sigma and the normalization.
pub fn sample_forecast(
    det: &DeterministicModel,
    em: &GenerativeEmulator,
    x: &StateTensor,
    rng: &mut ChaCha12Rng,
) -> StateTensor {
    let xn = normalize(x, &em.stats);
    let xp = cast32(&pack_states(&[&xn]));
    let fp = det_forward_packed(det, &xp, x.valid_time);
    let r = em.sample_residual(&xp, x.valid_time, rng);
    let sigma = packed_residual_sigma(&em.grid, &em.stats);
    let outp = &fp + &(&r * &sigma);
    let packed64 = outp.mapv(|v| v as f64);
    let st = unpack_state(&packed64, &em.grid, x.valid_time + 1);
    denormalize(&st, &em.stats)
}

#[allow(clippy::too_many_arguments)]
fn flow_phase(
    em: &mut GenerativeEmulator,
    samples: &[PairSample],
    heldback: &[usize],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    stream_salt: u64,
) {
    let grid = em.grid.clone();
    let w = crate::grid::latitude_weights(&grid);
    let wp = cast32(&packed_weights(&grid, &w));
    let n_entries = grid.n_entries();
    let n_train = samples.len() - heldback.len();
    assert!(n_train > 0, "no training pairs left");
    let mut opt = AdamW::new(cfg.opt.clone(), &em.params);

    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, StreamKind::FlowTraining, stream_salt ^ step as u64);
        let mut grad_acc: Option<Vec<ArrayD<f32>>> = None;
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch {
            let p = &samples[rng.gen_range(0..n_train)];
            let s = sigmoid_normal_s(&mut rng, em.cfg.s_clamp);
            let eps = masked_noise(&grid, &mut rng);
            let z = interpolant(em.cfg.objective, &p.r, &eps, s);
            let inp = ndarray::concatenate(Axis(3), &[p.x.view(), z.view()])
                .unwrap()
                .as_standard_layout()
                .to_owned();
            let gamma = if em.cfg.gamma_weighting {
                gamma_weight(em.cfg.objective, s)
            } else {
                1.0
            };

            let mut tape = Tape::<f32>::new();
            let b = em.params.bind(&mut tape);
            let node = tape.constant(inp);
            let out = forward(&em.cfg.arch, &grid, &mut tape, &b, node, p.t, Some(s));
            let tgt = tape.constant(p.r.clone());
            let wnode = tape.constant(wp.clone());
            let mse = weighted_mse(&mut tape, out, tgt, wnode, n_entries);
            let loss = tape.scale(mse, gamma as f32);
            loss_acc += tape.scalar(loss) as f64;
            let grads = tape.backward(loss);
            let gs = em.params.grads(&b, &grads);
            match &mut grad_acc {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(gs) {
                        *a += &g;
                    }
                }
                None => grad_acc = Some(gs),
            }
        }
        let mut gs = grad_acc.unwrap();
        let inv = 1.0 / cfg.batch as f32;
        for g in gs.iter_mut() {
            g.mapv_inplace(|v| v * inv);
        }
        opt.step(&mut em.params, &gs);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(LogRow {
                step,
                train_loss: loss_acc / cfg.batch as f64,
                heldback_loss: eval_flow_pairs(em, samples, heldback),
                lr: cfg.opt.lr_at(opt.step_count()),
            });
        }
    }
}

/// Denoising loss at fixed `s = 0.5` with frozen noise over the given pairs
/// (unweighted), for monitoring.
pub fn eval_flow_pairs(em: &GenerativeEmulator, samples: &[PairSample], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    let grid = &em.grid;
    let w = crate::grid::latitude_weights(grid);
    let wp = packed_weights(grid, &w);
    let n_entries = grid.n_entries() as f64;
    let s = 0.5;
    let mut total = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        let p = &samples[i];
        let mut rng = stream(0xE7A1, StreamKind::Oracle, k as u64);
        let eps = masked_noise(grid, &mut rng);
        let z = interpolant(em.cfg.objective, &p.r, &eps, s);
        let out = em.denoise(&p.x, &z, p.t, s);
        let mut acc = 0.0f64;
        ndarray::Zip::from(&out).and(&p.r).and(&wp).for_each(|&o, &r, &wv| {
            let d = (o - r) as f64;
            acc += wv * d * d;
        });
        total += acc / n_entries;
    }
    total / idx.len() as f64
}

/// Train the denoiser on one-step residuals of `split`. Residual sigma is fit
/// on the same split and frozen into the emulator's statistics alongside the
/// forecaster's normalization.
pub fn train_flow(
    det: &DeterministicModel,
    ds: &Dataset,
    split: Split,
    flow_cfg: FlowConfig,
    cfg: &TrainConfig,
) -> Result<(GenerativeEmulator, TrainLog), TrainError> {
    let mut raws = raw_residuals(det, ds, split)?;
    let (up_sig, sf_sig) = fit_sigma(&det.grid, &raws);
    let mut stats = det.stats.clone();
    stats.upper_residual_std = up_sig;
    stats.surface_residual_std = sf_sig;
    let sigma = packed_residual_sigma(&det.grid, &stats);
    unitize(&mut raws, &sigma);

    let mut em = GenerativeEmulator::init(flow_cfg, det.grid.clone(), cfg.seed);
    em.stats = stats;

    let n_hb = ((raws.len() as f64 * cfg.heldback_frac) as usize).clamp(1, 4);
    let heldback: Vec<usize> = (raws.len() - n_hb..raws.len()).collect();
    let mut log = TrainLog::default();
    flow_phase(&mut em, &raws, &heldback, cfg, &mut log, 0);
    Ok((em, log))
}

/// Continue denoiser training on residuals of the out-of-distribution
/// fine-tune split. The forecaster and the residual sigma stay frozen.
pub fn ood_finetune(
    em: &mut GenerativeEmulator,
    det: &DeterministicModel,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let mut raws = raw_residuals(det, ds, Split::OodFinetune)?;
    let sigma = packed_residual_sigma(&det.grid, &em.stats);
    unitize(&mut raws, &sigma);
    let n_hb = 1usize.min(raws.len() - 1).max(1);
    let heldback: Vec<usize> = (raws.len() - n_hb..raws.len()).collect();
    let mut log = TrainLog::default();
    flow_phase(em, &raws, &heldback, cfg, &mut log, 0x4f4f_4446);
    Ok(log)
}
