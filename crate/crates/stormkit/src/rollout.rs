//! Autoregressive forecasts: deterministic rollouts and stochastic ensembles.
//!
//! Ensemble members draw their sampler noise from a dedicated stream per
//! (member, lead) pair, so a thread-parallel rollout is bit-identical to a
//! serial one regardless of scheduling.

use std::path::Path;

use thiserror::Error;

use crate::flow::{sample_forecast, GenerativeEmulator};
use crate::grid::StateTensor;
use crate::model::DeterministicModel;
use crate::rng::{stream, StreamKind};
use crate::toy::{read_dataset, write_states_file, DataError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Deterministic autoregressive rollout: `n_steps` successive one-step
/// predictions, each fed the previous output.
pub fn rollout_det(det: &DeterministicModel, x0: &StateTensor, n_steps: usize) -> Vec<StateTensor> {
    let mut out = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    for _ in 0..n_steps {
        x = det.predict_next(&x);
        out.push(x.clone());
    }
    out
}

/// An ensemble rollout from one initial condition. `members[m][k]` is member
/// `m` at lead `k + 1` steps.
#[derive(Clone, Debug)]
pub struct EnsembleForecast {
    pub init_time: i64,
    pub seed: u64,
    pub members: Vec<Vec<StateTensor>>,
}

impl EnsembleForecast {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_leads(&self) -> usize {
        self.members.first().map_or(0, |m| m.len())
    }

    /// All member states at lead `k + 1` steps.
    pub fn at_lead(&self, k: usize) -> Vec<&StateTensor> {
        self.members.iter().map(|m| &m[k]).collect()
    }
}

fn member_rollout(
    det: &DeterministicModel,
    em: &GenerativeEmulator,
    x0: &StateTensor,
    n_steps: usize,
    seed: u64,
    member: usize,
) -> Vec<StateTensor> {
    let mut out = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    for k in 0..n_steps {
        let idx = ((member as u64) << 32) | k as u64;
        let mut rng = stream(seed, StreamKind::SamplerNoise, idx);
        x = sample_forecast(det, em, &x, &mut rng);
        out.push(x.clone());
    }
    out
}

/// Stochastic ensemble rollout. `jobs` caps the worker threads; every
/// member's noise comes from its own stream, so the result does not depend on
/// `jobs`.
pub fn rollout_ensemble(
    det: &DeterministicModel,
    em: &GenerativeEmulator,
    x0: &StateTensor,
    n_steps: usize,
    n_members: usize,
    seed: u64,
    jobs: usize,
) -> EnsembleForecast {
    let jobs = jobs.max(1).min(n_members.max(1));
    let mut members: Vec<Option<Vec<StateTensor>>> = vec![None; n_members];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, chunk) in members.chunks_mut(n_members.div_ceil(jobs).max(1)).enumerate() {
            let base = w * n_members.div_ceil(jobs).max(1);
            handles.push(scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(member_rollout(det, em, x0, n_steps, seed, base + off));
                }
            }));
        }
        for h in handles {
            h.join().expect("ensemble worker panicked");
        }
    });
    EnsembleForecast {
        init_time: x0.valid_time,
        seed,
        members: members.into_iter().map(|m| m.unwrap()).collect(),
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EnsembleManifest {
    init_time: i64,
    seed: u64,
    n_members: usize,
    n_leads: usize,
}

/// Persist an ensemble as one state file per member plus a JSON manifest.
pub fn save_ensemble(dir: &Path, ens: &EnsembleForecast) -> Result<(), RolloutError> {
    std::fs::create_dir_all(dir)?;
    let man = EnsembleManifest {
        init_time: ens.init_time,
        seed: ens.seed,
        n_members: ens.n_members(),
        n_leads: ens.n_leads(),
    };
    std::fs::write(
        dir.join("ensemble.json"),
        serde_json::to_string_pretty(&man).unwrap(),
    )?;
    for (m, states) in ens.members.iter().enumerate() {
        let grid = states
            .first()
            .map(|s| s.grid.clone())
            .ok_or_else(|| RolloutError::Manifest("empty member".into()))?;
        write_states_file(&dir.join(format!("member_{m:03}.wt1")), &grid, states)?;
    }
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleForecast, RolloutError> {
    let man: EnsembleManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ensemble.json"))?)
            .map_err(|e| RolloutError::Manifest(e.to_string()))?;
    let mut members = Vec::with_capacity(man.n_members);
    for m in 0..man.n_members {
        let ds = read_dataset(&dir.join(format!("member_{m:03}.wt1")))?;
        if ds.states.len() != man.n_leads {
            return Err(RolloutError::Manifest(format!(
                "member {m}: expected {} leads, found {}",
                man.n_leads,
                ds.states.len()
            )));
        }
        // valid times restart from 0 in the file; restore from the manifest
        let states: Vec<StateTensor> = ds
            .states
            .into_iter()
            .enumerate()
            .map(|(k, mut s)| {
                s.valid_time = man.init_time + 1 + k as i64;
                s
            })
            .collect();
        members.push(states);
    }
    Ok(EnsembleForecast {
        init_time: man.init_time,
        seed: man.seed,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{train_flow, FlowConfig};
    use crate::model::ArchConfig;
    use crate::toy::{generate, Dataset, Split, ToyDynamicsConfig};
    use crate::train::{train_det, TrainConfig};

    fn tiny_dataset() -> Dataset {
        let grid =
            crate::grid::GridSpec::new(4, 8, 2, vec!["temp".into()], vec!["t2m".into()]).unwrap();
        let mut cfg = ToyDynamicsConfig::defaults(&grid);
        cfg.seed = 13;
        generate(&cfg, 60, 20).unwrap()
    }

    fn tiny_models(ds: &Dataset) -> (DeterministicModel, GenerativeEmulator) {
        let mut a = ArchConfig::micro();
        a.dim = 8;
        a.mlp_hidden = 16;
        a.cond_dim = 8;
        let mut cfg = TrainConfig::new(4, 17);
        cfg.opt.warmup_steps = 1;
        let (det, _) = train_det(ds, Split::Train, a, &cfg).unwrap();
        let mut f = FlowConfig::micro();
        f.arch.dim = 8;
        f.arch.mlp_hidden = 16;
        f.arch.cond_dim = 8;
        f.sample_steps = 2;
        let (em, _) = train_flow(&det, ds, Split::Train, f, &cfg).unwrap();
        (det, em)
    }

    #[test]
    fn det_rollout_advances_time() {
        let ds = tiny_dataset();
        let (det, _) = tiny_models(&ds);
        let states = rollout_det(&det, &ds.states[0], 3);
        assert_eq!(states.len(), 3);
        for (k, s) in states.iter().enumerate() {
            assert_eq!(s.valid_time, ds.states[0].valid_time + 1 + k as i64);
            s.check_finite("rollout").unwrap();
        }
    }

    #[test]
    fn parallel_ensemble_matches_serial() {
        let ds = tiny_dataset();
        let (det, em) = tiny_models(&ds);
        let serial = rollout_ensemble(&det, &em, &ds.states[0], 2, 3, 99, 1);
        let parallel = rollout_ensemble(&det, &em, &ds.states[0], 2, 3, 99, 3);
        assert_eq!(serial.n_members(), 3);
        assert_eq!(serial.n_leads(), 2);
        for m in 0..3 {
            for k in 0..2 {
                assert_eq!(serial.members[m][k].upper, parallel.members[m][k].upper);
                assert_eq!(serial.members[m][k].surface, parallel.members[m][k].surface);
            }
        }
        // members differ from each other
        assert_ne!(serial.members[0][0].upper, serial.members[1][0].upper);
    }

    #[test]
    fn ensemble_roundtrips_through_files() {
        let ds = tiny_dataset();
        let (det, em) = tiny_models(&ds);
        let ens = rollout_ensemble(&det, &em, &ds.states[2], 2, 2, 5, 1);
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(dir.path(), &ens).unwrap();
        let back = load_ensemble(dir.path()).unwrap();
        assert_eq!(back.init_time, ens.init_time);
        assert_eq!(back.n_members(), 2);
        for m in 0..2 {
            for k in 0..2 {
                assert_eq!(back.members[m][k].valid_time, ens.members[m][k].valid_time);
                // states were quantized to f32 on write
                let err = (&back.members[m][k].upper - &ens.members[m][k].upper)
                    .iter()
                    .fold(0.0f64, |a, &b| a.max(b.abs()));
                assert!(err < 1e-6, "roundtrip error {err}");
            }
        }
    }
}
