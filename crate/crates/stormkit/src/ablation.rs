//! Scripted ablation matrix: cross-product arms over attention mode, recent-
//! past fine-tuning, generative objective, out-of-distribution fine-tuning,
//! noise scaling and the underlying deterministic model, repeated over paired
//! seeds and compared with sign tests.
//!
//! Arms differ only in the flagged axes; deterministic models are memoized
//! within a seed so that arms sharing a backbone reuse it. Seeds run as
//! independent parallel jobs and the result does not depend on the job count.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::flow::{ood_finetune, train_flow, FlowConfig, GenerativeEmulator, Objective};
use crate::grid::{latitude_weights, GridSpec};
use crate::metrics::{ens_crps, rmse, SpreadSkill};
use crate::model::{ArchConfig, DeterministicModel, VerticalMode};
use crate::rollout::rollout_ensemble;
use crate::toy::{generate, Dataset, Split, ToyDynamicsConfig};
use crate::train::{finetune_multistep, finetune_rpft, train_det, train_ensemble, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetKind {
    /// Small backbone.
    SToy,
    /// Medium backbone.
    MToy,
    /// Medium backbone with the autoregressive multi-step fine-tune.
    MToyMultistep,
    /// Mean of four independently initialized medium backbones (no
    /// generative stage; ensemble-mean forecasts only).
    Mx4Toy,
}

impl DetKind {
    fn tag(&self) -> &'static str {
        match self {
            DetKind::SToy => "s-toy",
            DetKind::MToy => "m-toy",
            DetKind::MToyMultistep => "m-toy-ms",
            DetKind::Mx4Toy => "mx4-toy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub seeds: Vec<u64>,
    pub attention_modes: Vec<VerticalMode>,
    pub rpft: Vec<bool>,
    pub gen_modes: Vec<Objective>,
    pub ood: Vec<bool>,
    pub rho: Vec<f64>,
    pub det_models: Vec<DetKind>,
    /// "tiny" (4x8x2), "micro" (8x16x4) or "default" (16x32x4).
    pub grid: String,
    pub data_steps: usize,
    pub burn_in: usize,
    /// Linear forcing drift, making the later splits out-of-distribution.
    pub forcing_std_drift: f64,
    pub det_steps: usize,
    pub rpft_steps: usize,
    pub multistep_steps: usize,
    pub flow_steps: usize,
    pub ood_steps: usize,
    pub n_members: usize,
    /// Evaluation initial conditions taken from the start of the test split.
    pub n_eval: usize,
    pub sample_steps: usize,
}

impl MatrixSpec {
    /// One-arm baseline at micro scale.
    pub fn small_default() -> Self {
        MatrixSpec {
            seeds: vec![1],
            attention_modes: vec![VerticalMode::Cla],
            rpft: vec![false],
            gen_modes: vec![Objective::Flow],
            ood: vec![false],
            rho: vec![1.05],
            det_models: vec![DetKind::MToy],
            grid: "micro".into(),
            data_steps: 240,
            burn_in: 40,
            forcing_std_drift: 0.0,
            det_steps: 150,
            rpft_steps: 30,
            multistep_steps: 30,
            flow_steps: 200,
            ood_steps: 40,
            n_members: 4,
            n_eval: 4,
            sample_steps: 8,
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let s = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&s).map_err(|e| format!("bad matrix spec: {e}"))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    fn grid_spec(&self) -> Result<std::sync::Arc<GridSpec>, String> {
        match self.grid.as_str() {
            "tiny" => Ok(std::sync::Arc::new(
                GridSpec::new(4, 8, 2, vec!["temp".into()], vec!["t2m".into()]).unwrap(),
            )),
            "micro" => Ok(GridSpec::toy_micro()),
            "default" => Ok(GridSpec::toy_default()),
            other => Err(format!("unknown grid '{other}'")),
        }
    }

    pub fn arms(&self) -> Vec<ArmAxes> {
        let mut out = Vec::new();
        for &attention in &self.attention_modes {
            for &rpft in &self.rpft {
                for &gen in &self.gen_modes {
                    for &ood in &self.ood {
                        for &rho in &self.rho {
                            for &det in &self.det_models {
                                out.push(ArmAxes {
                                    attention,
                                    rpft,
                                    gen,
                                    ood,
                                    rho,
                                    det,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmAxes {
    pub attention: VerticalMode,
    pub rpft: bool,
    pub gen: Objective,
    pub ood: bool,
    pub rho: f64,
    pub det: DetKind,
}

impl ArmAxes {
    pub fn name(&self) -> String {
        format!(
            "{}{}+{}{}+rho{}+{}",
            mode_tag(self.attention),
            if self.rpft { "+rpft" } else { "" },
            match self.gen {
                Objective::Flow => "flow",
                Objective::Ddpm => "ddpm",
            },
            if self.ood { "+ood" } else { "" },
            self.rho,
            self.det.tag()
        )
    }

    /// Human-readable difference to a baseline arm (the audited config diff).
    pub fn diff(&self, base: &ArmAxes) -> String {
        let mut d = Vec::new();
        if self.attention != base.attention {
            d.push(format!("attention={}", mode_tag(self.attention)));
        }
        if self.rpft != base.rpft {
            d.push(format!("rpft={}", self.rpft));
        }
        if self.gen != base.gen {
            d.push(format!("gen={:?}", self.gen).to_lowercase());
        }
        if self.ood != base.ood {
            d.push(format!("ood={}", self.ood));
        }
        if (self.rho - base.rho).abs() > 1e-12 {
            d.push(format!("rho={}", self.rho));
        }
        if self.det != base.det {
            d.push(format!("det={}", self.det.tag()));
        }
        if d.is_empty() {
            "baseline".into()
        } else {
            d.join(",")
        }
    }
}

fn mode_tag(m: VerticalMode) -> &'static str {
    match m {
        VerticalMode::Cla => "cla",
        VerticalMode::Local3d => "local3d",
        VerticalMode::Stacked2d => "stacked2d",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    /// Deterministic 1-step RMSE over the evaluation cases.
    pub rmse1: f64,
    /// Fair CRPS of the generative ensemble at lead 1 (NaN without a
    /// generative stage).
    pub fcrps: f64,
    /// Fair spread-skill ratio at lead 1 (NaN without a generative stage).
    pub spread_skill: f64,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub axes: ArmAxes,
    pub name: String,
    /// One entry per seed; failed runs keep their error message.
    pub per_seed: Vec<Result<ArmMetrics, String>>,
}

#[derive(Clone, Debug)]
pub struct MatrixResult {
    pub spec: MatrixSpec,
    pub arms: Vec<ArmResult>,
}

/// Exact one-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties must be dropped beforehand.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut logc = 0.0f64; // ln C(n, k) running
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut p = 0.0;
    for k in 0..=n {
        if k >= wins {
            p += (logc - ln2n).exp();
        }
        logc += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    p.min(1.0)
}

/// Paired comparison over seeds: wins counts pairs where `a` is better
/// (smaller when `lower_better`). Non-finite pairs and ties are dropped.
pub fn paired_sign(a: &[f64], b: &[f64], lower_better: bool) -> (usize, usize, f64) {
    assert_eq!(a.len(), b.len());
    let mut wins = 0;
    let mut losses = 0;
    for (&x, &y) in a.iter().zip(b) {
        if !x.is_finite() || !y.is_finite() || x == y {
            continue;
        }
        let better = if lower_better { x < y } else { x > y };
        if better {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    (wins, losses, sign_test_p(wins, losses))
}

fn det_arch(kind: DetKind, mode: VerticalMode, grid: &GridSpec) -> ArchConfig {
    let mut a = ArchConfig::micro();
    a.vertical_mode = mode;
    if mode == VerticalMode::Local3d {
        a.window.0 = 2;
    }
    if kind == DetKind::SToy {
        a.dim = 8;
        a.n_heads = 2;
        a.mlp_hidden = 16;
        a.cond_dim = 8;
    }
    if grid.n_lat <= 4 {
        // tiny test grid cannot afford the full micro width
        a.dim = a.dim.min(8);
        a.mlp_hidden = a.mlp_hidden.min(16);
        a.cond_dim = a.cond_dim.min(8);
    }
    a
}

enum DetVariant {
    Single(DeterministicModel),
    Ensemble(crate::model::EnsembleMean),
}

fn build_det(
    spec: &MatrixSpec,
    ds: &Dataset,
    kind: DetKind,
    mode: VerticalMode,
    rpft: bool,
    seed: u64,
) -> Result<DetVariant, String> {
    let arch = det_arch(kind, mode, &ds.grid);
    let mut cfg = TrainConfig::new(spec.det_steps, seed);
    cfg.opt.warmup_steps = (spec.det_steps / 10).max(1);
    if kind == DetKind::Mx4Toy {
        let ens = train_ensemble(ds, Split::Train, arch, &cfg, 4).map_err(|e| e.to_string())?;
        return Ok(DetVariant::Ensemble(ens));
    }
    let (mut model, _) = train_det(ds, Split::Train, arch, &cfg).map_err(|e| e.to_string())?;
    if rpft {
        let mut ft = TrainConfig::new(spec.rpft_steps, seed);
        ft.opt.lr = cfg.opt.lr * 0.1;
        ft.opt.warmup_steps = 1;
        finetune_rpft(&mut model, ds, Split::Train, &ft).map_err(|e| e.to_string())?;
    }
    if kind == DetKind::MToyMultistep {
        let mut ft = TrainConfig::new(spec.multistep_steps, seed);
        ft.opt.lr = cfg.opt.lr * 0.1;
        ft.opt.warmup_steps = 1;
        finetune_multistep(&mut model, ds, Split::Train, &ft).map_err(|e| e.to_string())?;
    }
    Ok(DetVariant::Single(model))
}

fn eval_seed(spec: &MatrixSpec, arms: &[ArmAxes], seed: u64) -> Vec<Result<ArmMetrics, String>> {
    let run = || -> Result<Vec<Result<ArmMetrics, String>>, String> {
        let grid = spec.grid_spec()?;
        let mut toy = ToyDynamicsConfig::defaults(&grid);
        toy.seed = seed;
        toy.forcing_std_drift_per_step = spec.forcing_std_drift;
        let ds = generate(&toy, spec.data_steps, spec.burn_in).map_err(|e| e.to_string())?;
        let test = ds.range(Split::Test);
        let n_eval = spec.n_eval.min(test.len().saturating_sub(1));
        if n_eval == 0 {
            return Err("test split too short for evaluation".into());
        }
        let starts: Vec<usize> = (test.start..test.start + n_eval).collect();
        let w = latitude_weights(&ds.grid);

        let mut det_memo: HashMap<(VerticalMode, bool, DetKind), Result<DetVariant, String>> =
            HashMap::new();
        let mut gen_memo: HashMap<
            (VerticalMode, bool, DetKind, Objective, bool),
            Result<GenerativeEmulator, String>,
        > = HashMap::new();

        let mut out = Vec::with_capacity(arms.len());
        for arm in arms {
            let dkey = (arm.attention, arm.rpft, arm.det);
            let det = det_memo
                .entry(dkey)
                .or_insert_with(|| build_det(spec, &ds, arm.det, arm.attention, arm.rpft, seed));
            let det = match det {
                Ok(d) => d,
                Err(e) => {
                    out.push(Err(e.clone()));
                    continue;
                }
            };

            // deterministic 1-step RMSE over the eval cases
            let mut rm = 0.0;
            for &i in &starts {
                let pred = match det {
                    DetVariant::Single(m) => m.predict_next(&ds.states[i]),
                    DetVariant::Ensemble(e) => e.predict_next(&ds.states[i]),
                };
                rm += rmse(&pred, &ds.states[i + 1], &w);
            }
            let rmse1 = rm / starts.len() as f64;

            let single = match det {
                DetVariant::Single(m) => m,
                DetVariant::Ensemble(_) => {
                    out.push(Ok(ArmMetrics {
                        rmse1,
                        fcrps: f64::NAN,
                        spread_skill: f64::NAN,
                    }));
                    continue;
                }
            };

            let gkey = (arm.attention, arm.rpft, arm.det, arm.gen, arm.ood);
            if !gen_memo.contains_key(&gkey) {
                let built = (|| {
                    let mut fc = FlowConfig::micro();
                    fc.arch = single.cfg.clone();
                    fc.arch.in_fields = 2;
                    fc.arch.s_cond = true;
                    fc.objective = arm.gen;
                    fc.sample_steps = spec.sample_steps;
                    let mut tc = TrainConfig::new(spec.flow_steps, seed);
                    tc.opt.warmup_steps = (spec.flow_steps / 10).max(1);
                    let (mut em, _) = train_flow(single, &ds, Split::Train, fc, &tc)
                        .map_err(|e| e.to_string())?;
                    if arm.ood {
                        let mut oc = TrainConfig::new(spec.ood_steps, seed);
                        oc.opt.lr = tc.opt.lr * 0.1;
                        oc.opt.warmup_steps = 1;
                        ood_finetune(&mut em, single, &ds, &oc).map_err(|e| e.to_string())?;
                    }
                    Ok::<GenerativeEmulator, String>(em)
                })();
                gen_memo.insert(gkey, built);
            }
            let em = match gen_memo.get(&gkey).unwrap() {
                Ok(e) => e,
                Err(e) => {
                    out.push(Err(e.clone()));
                    continue;
                }
            };

            // ensemble metrics at lead 1 with the arm's noise scaling
            let mut em_arm = GenerativeEmulator {
                cfg: em.cfg.clone(),
                grid: em.grid.clone(),
                params: em.params.clone(),
                stats: em.stats.clone(),
            };
            em_arm.cfg.rho = arm.rho;
            let mut fc_sum = 0.0;
            let mut ss = SpreadSkill::default();
            for &i in &starts {
                let ens = rollout_ensemble(
                    single,
                    &em_arm,
                    &ds.states[i],
                    1,
                    spec.n_members,
                    seed ^ 0x454e53,
                    1,
                );
                let members = ens.at_lead(0);
                fc_sum += ens_crps(&members, &ds.states[i + 1], &w, true);
                ss.add_case(&members, &ds.states[i + 1], &w);
            }
            out.push(Ok(ArmMetrics {
                rmse1,
                fcrps: fc_sum / starts.len() as f64,
                spread_skill: ss.ratio(),
            }));
        }
        Ok(out)
    };
    match run() {
        Ok(v) => v,
        Err(e) => arms.iter().map(|_| Err(e.clone())).collect(),
    }
}

/// Run the full matrix. Seeds are distributed over at most `jobs` threads;
/// the result is independent of `jobs`.
pub fn run_matrix(spec: &MatrixSpec, jobs: usize) -> MatrixResult {
    let arms = spec.arms();
    let n_seeds = spec.seeds.len();
    let jobs = jobs.max(1).min(n_seeds.max(1));
    let mut per_seed: Vec<Option<Vec<Result<ArmMetrics, String>>>> = vec![None; n_seeds];
    std::thread::scope(|scope| {
        let chunk = n_seeds.div_ceil(jobs).max(1);
        let mut handles = Vec::new();
        for (wi, slots) in per_seed.chunks_mut(chunk).enumerate() {
            let base = wi * chunk;
            let arms = &arms;
            handles.push(scope.spawn(move || {
                for (off, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(eval_seed(spec, arms, spec.seeds[base + off]));
                }
            }));
        }
        for h in handles {
            h.join().expect("ablation worker panicked");
        }
    });
    let per_seed: Vec<Vec<Result<ArmMetrics, String>>> =
        per_seed.into_iter().map(|s| s.unwrap()).collect();
    let arms = arms
        .into_iter()
        .enumerate()
        .map(|(ai, axes)| ArmResult {
            name: axes.name(),
            axes,
            per_seed: per_seed.iter().map(|s| s[ai].clone()).collect(),
        })
        .collect();
    MatrixResult {
        spec: spec.clone(),
        arms,
    }
}

impl MatrixResult {
    /// Per-seed values of one metric for an arm (NaN for failed seeds).
    pub fn metric(&self, arm: usize, pick: fn(&ArmMetrics) -> f64) -> Vec<f64> {
        self.arms[arm]
            .per_seed
            .iter()
            .map(|r| r.as_ref().map(pick).unwrap_or(f64::NAN))
            .collect()
    }

    fn mean_metric(&self, arm: usize, pick: fn(&ArmMetrics) -> f64) -> f64 {
        let v: Vec<f64> = self
            .metric(arm, pick)
            .into_iter()
            .filter(|x| x.is_finite())
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Write `report.md` and `metrics.csv` into `dir`.
    pub fn write_report(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
        writeln!(csv, "arm,seed,metric,value")?;
        for a in &self.arms {
            for (si, r) in a.per_seed.iter().enumerate() {
                let seed = self.spec.seeds[si];
                match r {
                    Ok(m) => {
                        writeln!(csv, "{},{},rmse1,{}", a.name, seed, m.rmse1)?;
                        writeln!(csv, "{},{},fcrps,{}", a.name, seed, m.fcrps)?;
                        writeln!(csv, "{},{},spread_skill,{}", a.name, seed, m.spread_skill)?;
                    }
                    Err(e) => writeln!(csv, "{},{},error,\"{}\"", a.name, seed, e)?,
                }
            }
        }

        let mut md = String::new();
        md.push_str("# Ablation report\n\n");
        md.push_str(&format!(
            "{} arms x {} seeds on the {} grid.\n\n",
            self.arms.len(),
            self.spec.seeds.len(),
            self.spec.grid
        ));
        md.push_str(
            "| arm | diff vs baseline | mean rmse1 | mean fcrps | mean spread-skill | fcrps wins | p (sign) |\n",
        );
        md.push_str("|---|---|---|---|---|---|---|\n");
        let base = &self.arms[0].axes;
        let base_fcrps = self.metric(0, |m| m.fcrps);
        for (ai, a) in self.arms.iter().enumerate() {
            let fcrps = self.metric(ai, |m| m.fcrps);
            let (wins, losses, p) = if ai == 0 {
                (0, 0, 1.0)
            } else {
                paired_sign(&fcrps, &base_fcrps, true)
            };
            md.push_str(&format!(
                "| {} | {} | {:.5} | {:.5} | {:.3} | {}-{} | {:.4} |\n",
                a.name,
                a.axes.diff(base),
                self.mean_metric(ai, |m| m.rmse1),
                self.mean_metric(ai, |m| m.fcrps),
                self.mean_metric(ai, |m| m.spread_skill),
                wins,
                losses,
                p
            ));
        }
        let n_failed: usize = self
            .arms
            .iter()
            .flat_map(|a| &a.per_seed)
            .filter(|r| r.is_err())
            .count();
        if n_failed > 0 {
            md.push_str(&format!("\n{n_failed} arm-seed runs failed; see metrics.csv.\n"));
        }
        std::fs::write(dir.join("report.md"), md)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_exact_binomial() {
        assert!((sign_test_p(10, 0) - 1.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(7, 3) - 176.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(0, 5) - 1.0).abs() < 1e-12);
        // symmetric: p(k wins) + p(n-k+1 wins) = 1 + point mass handling
        let (w, l, p) = paired_sign(&[1.0, 2.0, f64::NAN, 3.0, 3.0], &[2.0, 1.0, 0.0, 4.0, 3.0], true);
        assert_eq!((w, l), (2, 1));
        assert!((p - sign_test_p(2, 1)).abs() < 1e-12);
    }

    #[test]
    fn arm_cross_product_and_diffs() {
        let mut spec = MatrixSpec::small_default();
        spec.attention_modes = vec![VerticalMode::Cla, VerticalMode::Local3d];
        spec.gen_modes = vec![Objective::Flow, Objective::Ddpm];
        let arms = spec.arms();
        assert_eq!(arms.len(), 4);
        assert_eq!(arms[0].diff(&arms[0]), "baseline");
        assert_eq!(arms[1].diff(&arms[0]), "gen=ddpm");
        assert!(arms[2].diff(&arms[0]).contains("attention=local3d"));
    }

    #[test]
    fn tiny_matrix_runs_and_is_deterministic() {
        let mut spec = MatrixSpec::small_default();
        spec.grid = "tiny".into();
        spec.seeds = vec![3, 4];
        spec.data_steps = 60;
        spec.burn_in = 20;
        spec.det_steps = 3;
        spec.flow_steps = 3;
        spec.n_members = 2;
        spec.n_eval = 2;
        spec.sample_steps = 2;
        spec.gen_modes = vec![Objective::Flow, Objective::Ddpm];
        let r1 = run_matrix(&spec, 1);
        let r2 = run_matrix(&spec, 2);
        assert_eq!(r1.arms.len(), 2);
        for (a, b) in r1.arms.iter().zip(&r2.arms) {
            for (x, y) in a.per_seed.iter().zip(&b.per_seed) {
                match (x, y) {
                    (Ok(mx), Ok(my)) => {
                        assert_eq!(mx.rmse1.to_bits(), my.rmse1.to_bits());
                        assert_eq!(mx.fcrps.to_bits(), my.fcrps.to_bits());
                    }
                    _ => panic!("arm failed: {x:?} {y:?}"),
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        r1.write_report(dir.path()).unwrap();
        let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(md.contains("| arm |"));
        assert!(md.contains("gen=ddpm"));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.lines().count() > 4);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = MatrixSpec::small_default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("matrix.json");
        spec.save(&p).unwrap();
        let back = MatrixSpec::load(&p).unwrap();
        assert_eq!(back, spec);
        assert!(MatrixSpec::load(&dir.path().join("missing.json")).is_err());
    }
}
