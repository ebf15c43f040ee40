//! Deterministic forecaster training: the main phase on one-step pairs, a
//! recent-past fine-tune (RPFT) on the tail of the training period, and an
//! autoregressive multi-step fine-tune that backpropagates through chained
//! forwards.
//!
//! Training never touches the test split: every entry point takes a [`Split`]
//! handle and refuses `Split::Test`.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use thiserror::Error;

use crate::grid::{latitude_weights, normalize, GridSpec, LatWeights, NormStats};
use crate::model::{
    apply_delta, forward, output_to_input_mask, pack_states, ArchConfig, DeterministicModel,
    EnsembleMean,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream, StreamKind};
use crate::tape::{Tape, Tx};
use crate::toy::{Dataset, Split};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training on the test split is forbidden")]
    TestSplitForbidden,
    #[error("split too short: need at least {need} states, have {have}")]
    SplitTooShort { need: usize, have: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub opt: AdamWConfig,
    /// Last fraction of the split reserved for held-back eval logging.
    pub heldback_frac: f64,
    /// Last fraction of the split used by the RPFT phase.
    pub rpft_frac: f64,
    /// Number of chained forwards in the multi-step fine-tune. Deeper chains
    /// push the horizon over which rollout error growth is penalized.
    #[serde(default = "default_multistep_chain")]
    pub multistep_chain: usize,
    pub seed: u64,
    pub log_every: usize,
}

fn default_multistep_chain() -> usize {
    2
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        let mut opt = AdamWConfig::new(3e-3, steps);
        opt.warmup_steps = (steps / 10).max(1).min(5000);
        TrainConfig {
            steps,
            batch: 2,
            opt,
            heldback_frac: 0.1,
            rpft_frac: 0.3,
            multistep_chain: 2,
            seed,
            log_every: 50,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldback_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,train_loss,heldback_loss,lr")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.step, r.train_loss, r.heldback_loss, r.lr)?;
        }
        Ok(())
    }
}

/// Per-entry weights of the packed `[Z, H, W, V_u + V_s]` layout matching the
/// state norm (surface slots above level 0 get weight zero).
pub fn packed_weights(grid: &GridSpec, w: &LatWeights) -> ArrayD<f64> {
    let (z, h, wd) = (grid.n_levels, grid.n_lat, grid.n_lon);
    let vc = grid.n_upper() + grid.n_surface();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[z, h, wd, vc]));
    for (vi, v) in grid.upper_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for zi in 0..z {
            for hi in 0..h {
                let c = wv * w.level_weights[zi] * w.per_cell[hi];
                for wi in 0..wd {
                    out[[zi, hi, wi, vi]] = c;
                }
            }
        }
    }
    for (vi, v) in grid.surface_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for hi in 0..h {
            let c = wv * w.per_cell[hi];
            for wi in 0..wd {
                out[[0, hi, wi, grid.n_upper() + vi]] = c;
            }
        }
    }
    out
}

/// Weighted MSE between a packed output node and a packed target constant:
/// `sum(w * (out - tgt)^2) / n_entries`, identical to the state norm of the
/// error.
pub fn weighted_mse(
    tape: &mut Tape<f32>,
    out: Tx,
    tgt: Tx,
    wpacked: Tx,
    n_entries: usize,
) -> Tx {
    let d = tape.sub(out, tgt);
    let d2 = tape.mul(d, d);
    let wd = tape.mul(d2, wpacked);
    let s = tape.sum_all(wd);
    tape.scale(s, 1.0 / n_entries as f32)
}

fn cast32(a: &ArrayD<f64>) -> ArrayD<f32> {
    a.mapv(|v| v as f32)
}

/// Indices `i` such that the pair `(i, i+1)` lies inside `range`.
fn pair_starts(range: &std::ops::Range<usize>) -> Vec<usize> {
    if range.len() < 2 {
        return vec![];
    }
    (range.start..range.end - 1).collect()
}

struct PairBatcher<'a> {
    ds: &'a Dataset,
    stats: &'a NormStats,
    starts: Vec<usize>,
}

impl<'a> PairBatcher<'a> {
    /// Normalized packed (input, target) for pair starting at `i`.
    fn pair(&self, i: usize) -> (ArrayD<f32>, ArrayD<f32>, i64) {
        let x = normalize(&self.ds.states[i], self.stats);
        let y = normalize(&self.ds.states[i + 1], self.stats);
        (
            cast32(&pack_states(&[&x])),
            cast32(&pack_states(&[&y])),
            self.ds.states[i].valid_time,
        )
    }
}

fn forbid_test(split: Split) -> Result<(), TrainError> {
    if split == Split::Test {
        return Err(TrainError::TestSplitForbidden);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sgd_phase(
    model: &mut DeterministicModel,
    ds: &Dataset,
    starts: &[usize],
    heldback: &[usize],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    stream_salt: u64,
) {
    let grid = model.grid.clone();
    let w = latitude_weights(&grid);
    let wp = cast32(&packed_weights(&grid, &w));
    let n_entries = grid.n_entries();
    let stats = model.stats.clone();
    let batcher = PairBatcher {
        ds,
        stats: &stats,
        starts: starts.to_vec(),
    };
    let mut opt = AdamW::new(cfg.opt.clone(), &model.params);

    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, StreamKind::BatchSampling, stream_salt ^ step as u64);
        let mut grad_acc: Option<Vec<ArrayD<f32>>> = None;
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch {
            let i = batcher.starts[rng.gen_range(0..batcher.starts.len())];
            let (xin, ytg, t) = batcher.pair(i);
            let mut tape = Tape::<f32>::new();
            let b = model.params.bind(&mut tape);
            let inp = tape.constant(xin.into_dyn());
            let out = forward(&model.cfg, &grid, &mut tape, &b, inp, t, None);
            let out = apply_delta(&model.cfg, &mut tape, out, inp);
            let tgt = tape.constant(ytg.into_dyn());
            let wnode = tape.constant(wp.clone());
            let loss = weighted_mse(&mut tape, out, tgt, wnode, n_entries);
            loss_acc += tape.scalar(loss) as f64;
            let grads = tape.backward(loss);
            let gs = model.params.grads(&b, &grads);
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
        opt.step(&mut model.params, &gs);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let hb = eval_pairs(model, ds, heldback);
            log.rows.push(LogRow {
                step,
                train_loss: loss_acc / cfg.batch as f64,
                heldback_loss: hb,
                lr: cfg.opt.lr_at(opt.step_count()),
            });
        }
    }
}

/// Mean one-step weighted MSE over given pair starts (physical-space states,
/// loss in normalized units).
pub fn eval_pairs(model: &DeterministicModel, ds: &Dataset, starts: &[usize]) -> f64 {
    if starts.is_empty() {
        return f64::NAN;
    }
    let grid = model.grid.clone();
    let w = latitude_weights(&grid);
    let wp = cast32(&packed_weights(&grid, &w));
    let n_entries = grid.n_entries();
    let mut total = 0.0;
    for &i in starts {
        let x = normalize(&ds.states[i], &model.stats);
        let y = normalize(&ds.states[i + 1], &model.stats);
        let mut tape = Tape::<f32>::new();
        let b = model.params.bind(&mut tape);
        let inp = tape.constant(cast32(&pack_states(&[&x])));
        let out = forward(
            &model.cfg,
            &grid,
            &mut tape,
            &b,
            inp,
            ds.states[i].valid_time,
            None,
        );
        let out = apply_delta(&model.cfg, &mut tape, out, inp);
        let tgt = tape.constant(cast32(&pack_states(&[&y])));
        let wnode = tape.constant(wp.clone());
        let loss = weighted_mse(&mut tape, out, tgt, wnode, n_entries);
        total += tape.scalar(loss) as f64;
    }
    total / starts.len() as f64
}

/// Main training phase on one-step pairs of `split`. Normalization statistics
/// are fit on the same split and frozen into the model.
pub fn train_det(
    ds: &Dataset,
    split: Split,
    arch: ArchConfig,
    cfg: &TrainConfig,
) -> Result<(DeterministicModel, TrainLog), TrainError> {
    forbid_test(split)?;
    let range = ds.range(split);
    let starts = pair_starts(&range);
    if starts.len() < 4 {
        return Err(TrainError::SplitTooShort {
            need: 5,
            have: range.len(),
        });
    }
    let mut model = DeterministicModel::init(arch, ds.grid.clone(), cfg.seed);
    let refs: Vec<&crate::grid::StateTensor> = ds.states[range.clone()].iter().collect();
    model.stats = NormStats::fit(&refs);
    model.stats.check().map_err(|e| TrainError::Invalid(e.to_string()))?;

    // held-back tail of the split, excluded from the sampled pairs
    let n_hb = ((starts.len() as f64 * cfg.heldback_frac) as usize).clamp(1, 8);
    let (train_starts, hb_starts) = starts.split_at(starts.len() - n_hb);

    let mut log = TrainLog::default();
    sgd_phase(&mut model, ds, train_starts, hb_starts, cfg, &mut log, 0);
    Ok((model, log))
}

/// Recent-past fine-tune: continue training on the last `rpft_frac` of the
/// split at the given (usually reduced) settings.
pub fn finetune_rpft(
    model: &mut DeterministicModel,
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    forbid_test(split)?;
    let range = ds.range(split);
    let starts = pair_starts(&range);
    if starts.is_empty() {
        return Err(TrainError::SplitTooShort {
            need: 2,
            have: range.len(),
        });
    }
    let n = ((starts.len() as f64 * cfg.rpft_frac).ceil() as usize).max(2).min(starts.len());
    let recent = &starts[starts.len() - n..];
    let hb = &recent[recent.len().saturating_sub(2)..];
    let mut log = TrainLog::default();
    sgd_phase(model, ds, recent, hb, cfg, &mut log, 0x5250_4654);
    Ok(log)
}

/// Multi-step fine-tune: the loss averages the 1..=`multistep_chain`-step
/// errors of a chained forward, with the model's own (masked) output fed
/// back as input at each step.
pub fn finetune_multistep(
    model: &mut DeterministicModel,
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    forbid_test(split)?;
    let chain = cfg.multistep_chain.max(2);
    let range = ds.range(split);
    if range.len() < chain + 2 {
        return Err(TrainError::SplitTooShort {
            need: chain + 2,
            have: range.len(),
        });
    }
    // i ..= i+chain all inside the split
    let starts: Vec<usize> = (range.start..range.end - chain).collect();
    let grid = model.grid.clone();
    let w = latitude_weights(&grid);
    let wp = cast32(&packed_weights(&grid, &w));
    let n_entries = grid.n_entries();
    let mask = tape_mask(&grid);
    let mut opt = AdamW::new(cfg.opt.clone(), &model.params);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, StreamKind::BatchSampling, 0x4d53 ^ step as u64);
        let mut grad_acc: Option<Vec<ArrayD<f32>>> = None;
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch {
            let i = starts[rng.gen_range(0..starts.len())];
            let x0 = normalize(&ds.states[i], &model.stats);
            let t = ds.states[i].valid_time;

            let mut tape = Tape::<f32>::new();
            let b = model.params.bind(&mut tape);
            let inp = tape.constant(cast32(&pack_states(&[&x0])));
            let mnode = tape.constant(mask.clone());
            let wnode = tape.constant(wp.clone());
            let mut cur = inp;
            let mut lsum: Option<Tx> = None;
            for d in 1..=chain {
                let out = forward(&model.cfg, &grid, &mut tape, &b, cur, t + d as i64 - 1, None);
                let out = apply_delta(&model.cfg, &mut tape, out, cur);
                let y = normalize(&ds.states[i + d], &model.stats);
                let tgt = tape.constant(cast32(&pack_states(&[&y])));
                let l = weighted_mse(&mut tape, out, tgt, wnode, n_entries);
                lsum = Some(match lsum {
                    Some(s) => tape.add(s, l),
                    None => l,
                });
                if d < chain {
                    cur = tape.mul(out, mnode);
                }
            }
            let loss = tape.scale(lsum.unwrap(), 1.0 / chain as f32);
            loss_acc += tape.scalar(loss) as f64;
            let grads = tape.backward(loss);
            let gs = model.params.grads(&b, &grads);
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
        opt.step(&mut model.params, &gs);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(LogRow {
                step,
                train_loss: loss_acc / cfg.batch as f64,
                heldback_loss: f64::NAN,
                lr: cfg.opt.lr_at(opt.step_count()),
            });
        }
    }
    Ok(log)
}

fn tape_mask(grid: &GridSpec) -> ArrayD<f32> {
    output_to_input_mask::<f32>(grid)
}

/// Independently initialized forecasters trained on the same data.
pub fn train_ensemble(
    ds: &Dataset,
    split: Split,
    arch: ArchConfig,
    cfg: &TrainConfig,
    n_members: usize,
) -> Result<EnsembleMean, TrainError> {
    let mut members = Vec::with_capacity(n_members);
    for m in 0..n_members {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(1000 * (m as u64 + 1));
        let (model, _) = train_det(ds, split, arch.clone(), &c)?;
        members.push(model);
    }
    Ok(EnsembleMean { members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{weighted_norm_sq, StateTensor};
    use crate::toy::{generate, ToyDynamicsConfig};

    fn tiny_dataset() -> Dataset {
        let grid = crate::grid::GridSpec::new(
            4,
            8,
            2,
            vec!["temp".into()],
            vec!["t2m".into()],
        )
        .unwrap();
        let mut cfg = ToyDynamicsConfig::defaults(&grid);
        cfg.seed = 5;
        generate(&cfg, 60, 20).unwrap()
    }

    fn tiny_arch() -> ArchConfig {
        let mut a = ArchConfig::micro();
        a.dim = 8;
        a.mlp_hidden = 16;
        a.cond_dim = 8;
        a.n_layers = 2;
        a
    }

    #[test]
    fn packed_weights_match_state_norm() {
        let ds = tiny_dataset();
        let w = latitude_weights(&ds.grid);
        let wp = packed_weights(&ds.grid, &w);
        let st = &ds.states[3];
        let packed = pack_states(&[st]);
        let manual: f64 =
            (&packed * &packed * &wp).sum() / ds.grid.n_entries() as f64;
        let vianorm = weighted_norm_sq(st, &w);
        assert!((manual - vianorm).abs() < 1e-10 * vianorm.max(1e-10));
    }

    #[test]
    fn test_split_is_rejected() {
        let ds = tiny_dataset();
        let cfg = TrainConfig::new(1, 1);
        assert!(matches!(
            train_det(&ds, Split::Test, tiny_arch(), &cfg),
            Err(TrainError::TestSplitForbidden)
        ));
        let mut m = DeterministicModel::init(tiny_arch(), ds.grid.clone(), 1);
        assert!(matches!(
            finetune_rpft(&mut m, &ds, Split::Test, &cfg),
            Err(TrainError::TestSplitForbidden)
        ));
        assert!(matches!(
            finetune_multistep(&mut m, &ds, Split::Test, &cfg),
            Err(TrainError::TestSplitForbidden)
        ));
    }

    #[test]
    fn short_training_reduces_loss() {
        let ds = tiny_dataset();
        let mut cfg = TrainConfig::new(60, 3);
        cfg.opt.lr = 3e-3;
        cfg.opt.warmup_steps = 10;
        cfg.batch = 2;
        cfg.log_every = 10;
        let (model, log) = train_det(&ds, Split::Train, tiny_arch(), &cfg).unwrap();
        assert!(log.rows.len() >= 3);
        let first = log.rows.first().unwrap().heldback_loss;
        let last = log.rows.last().unwrap().heldback_loss;
        assert!(
            last < first,
            "held-back loss did not improve: {first} -> {last}"
        );
        // prediction is finite and state-shaped
        let pred = model.predict_next(&ds.states[0]);
        pred.check_finite("pred").unwrap();
        assert_eq!(pred.valid_time, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let mut cfg = TrainConfig::new(8, 4);
        cfg.opt.warmup_steps = 2;
        let (m1, _) = train_det(&ds, Split::Train, tiny_arch(), &cfg).unwrap();
        let (m2, _) = train_det(&ds, Split::Train, tiny_arch(), &cfg).unwrap();
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn rpft_and_multistep_run() {
        let ds = tiny_dataset();
        let mut cfg = TrainConfig::new(10, 6);
        cfg.opt.warmup_steps = 2;
        let (mut model, _) = train_det(&ds, Split::Train, tiny_arch(), &cfg).unwrap();
        let mut ft = TrainConfig::new(4, 6);
        ft.opt.lr = 3e-4;
        ft.opt.warmup_steps = 1;
        finetune_rpft(&mut model, &ds, Split::Train, &ft).unwrap();
        finetune_multistep(&mut model, &ds, Split::Train, &ft).unwrap();
        let pred = model.predict_next(&ds.states[0]);
        pred.check_finite("pred").unwrap();
    }

    #[test]
    fn ensemble_mean_averages_members() {
        let ds = tiny_dataset();
        let mut cfg = TrainConfig::new(4, 9);
        cfg.opt.warmup_steps = 1;
        let ens = train_ensemble(&ds, Split::Train, tiny_arch(), &cfg, 2).unwrap();
        assert_eq!(ens.members.len(), 2);
        let x = &ds.states[0];
        let a = ens.members[0].predict_next(x);
        let b = ens.members[1].predict_next(x);
        let m = ens.predict_next(x);
        let expect = StateTensor::mean_of(&[a, b]);
        assert!(m
            .upper
            .iter()
            .zip(expect.upper.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        // members differ (different init seeds)
        assert_ne!(ens.members[0].params, ens.members[1].params);
    }

    #[test]
    fn csv_log_roundtrip() {
        let mut log = TrainLog::default();
        log.rows.push(LogRow {
            step: 0,
            train_loss: 1.5,
            heldback_loss: 2.0,
            lr: 1e-3,
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("step,train_loss,heldback_loss,lr\n0,1.5,2,0.001"));
    }

    #[test]
    fn multistep_mask_blocks_fake_surface_levels() {
        let grid = crate::grid::GridSpec::new(4, 8, 3, vec!["u".into()], vec!["s".into()]).unwrap();
        let m = tape_mask(&grid);
        assert_eq!(m.shape(), [3, 4, 8, 2]);
        // upper channel all ones; surface channel only level 0
        for z in 0..3 {
            for h in 0..4 {
                for w in 0..8 {
                    assert_eq!(m[[z, h, w, 0]], 1.0);
                    assert_eq!(m[[z, h, w, 1]], if z == 0 { 1.0 } else { 0.0 });
                }
            }
        }
    }
}
