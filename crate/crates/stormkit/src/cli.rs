//! Command-line pipeline: data generation, training, sampling, evaluation,
//! reporting and the ablation matrix.
//!
//! Every command takes `--seed` (default from `STORMKIT_SEED`, then 0) and
//! writes a provenance JSON with content hashes of its inputs and outputs.
//! Exit codes: 0 success, 2 usage, 3 missing file / I/O, 4 bad configuration,
//! 5 malformed data, 6 training or runtime failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::ablation::{run_matrix, MatrixSpec};
use crate::flow::{
    ood_finetune, train_flow, FlowConfig, GenerativeEmulator, Objective,
};
use crate::grid::{latitude_weights, GridSpec, NormStats, StateTensor};
use crate::metrics::{
    activity, ens_brier, ens_crps, energy_score, fit_climatology, rmse, spectrum_ratio,
    zonal_spectrum, Climatology, MetricTable, RankHistogram, SpreadSkill,
};
use crate::model::{ArchConfig, DeterministicModel, VerticalMode};
use crate::params::{load_ckpt, save_ckpt, ParamSet};
use crate::provenance::RunManifest;
use crate::rng::{stream, StreamKind};
use crate::rollout::{load_ensemble, rollout_ensemble, save_ensemble};
use crate::toy::{generate, read_dataset, write_dataset, write_states_file, Dataset, Split, ToyDynamicsConfig};
use crate::train::{finetune_multistep, finetune_rpft, train_det, TrainConfig};

const EXIT_USAGE: i32 = 2;
const EXIT_IO: i32 = 3;
const EXIT_CONFIG: i32 = 4;
const EXIT_DATA: i32 = 5;
const EXIT_RUNTIME: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn io(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
    fn config(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
    fn data(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "stormkit",
    about = "Toy-sphere weather emulator pipeline",
    after_help = "Exit codes: 0 success, 2 usage, 3 missing file or I/O error, \
                  4 bad configuration, 5 malformed data, 6 training/runtime failure.\n\
                  STORMKIT_SEED sets the default --seed."
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Base RNG seed (overrides STORMKIT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results never depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a toy dataset (WT1).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the deterministic forecaster.
    TrainDet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recent-past fine-tune after the main phase.
        #[arg(long)]
        rpft: bool,
        /// Autoregressive multi-step fine-tune after the main phase.
        #[arg(long)]
        multistep: bool,
    },
    /// Train the generative residual emulator on a frozen forecaster.
    TrainFlow {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generative objective.
        #[arg(long, default_value = "flow")]
        mode: String,
        /// Continue training on the out-of-distribution split.
        #[arg(long)]
        ood_finetune: bool,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 300)]
        ood_steps: usize,
        #[arg(long, default_value_t = 25)]
        sample_steps: usize,
    },
    /// Sample an ensemble forecast.
    Sample {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init_index: usize,
        #[arg(long, default_value_t = 8)]
        members: usize,
        #[arg(long, default_value_t = 3)]
        lead_days: usize,
        /// Initial-noise scaling rho.
        #[arg(long, default_value_t = 1.05)]
        noise_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an ensemble against truth and a climatology.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        clim: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a markdown report with skill scores against a reference.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the training-split states as a climatology fixture.
    MakeClim {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Dataset generation config (JSON). Unset fields keep the toy defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataConfig {
    /// "tiny", "micro" or "default".
    #[serde(default = "default_grid_name")]
    pub grid: String,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    pub forcing_std: Option<f64>,
    pub forcing_smoothing: Option<usize>,
    pub forcing_std_drift_per_step: Option<f64>,
    pub vertical_mixing: Option<f64>,
    pub nonlinearity: Option<f64>,
    pub zonal_shift_per_level: Option<Vec<usize>>,
}

fn default_grid_name() -> String {
    "default".into()
}
fn default_n_steps() -> usize {
    400
}
fn default_burn_in() -> usize {
    50
}

pub fn grid_by_name(name: &str) -> Result<Arc<GridSpec>, String> {
    match name {
        "tiny" => Ok(Arc::new(
            GridSpec::new(4, 8, 2, vec!["temp".into()], vec!["t2m".into()]).unwrap(),
        )),
        "micro" => Ok(GridSpec::toy_micro()),
        "default" => Ok(GridSpec::toy_default()),
        other => Err(format!("unknown grid '{other}'")),
    }
}

impl GenDataConfig {
    pub fn to_toy(&self, seed: u64) -> Result<ToyDynamicsConfig, String> {
        let grid = grid_by_name(&self.grid)?;
        let mut c = ToyDynamicsConfig::defaults(&grid);
        c.seed = seed;
        if let Some(v) = self.forcing_std {
            c.forcing_std = v;
        }
        if let Some(v) = self.forcing_smoothing {
            c.forcing_smoothing = v;
        }
        if let Some(v) = self.forcing_std_drift_per_step {
            c.forcing_std_drift_per_step = v;
        }
        if let Some(v) = self.vertical_mixing {
            c.vertical_mixing = v;
        }
        if let Some(v) = self.nonlinearity {
            c.nonlinearity = v;
        }
        if let Some(v) = &self.zonal_shift_per_level {
            c.zonal_shift_per_level = Some(v.clone());
        }
        Ok(c)
    }
}

/// Forecaster training config (JSON). Unset fields keep the defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DetTrainFileConfig {
    /// "default" or "micro" backbone preset.
    pub arch: Option<String>,
    pub vertical_mode: Option<VerticalMode>,
    pub unet: Option<bool>,
    pub positional_bias: Option<bool>,
    pub dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub cond_dim: Option<usize>,
    /// Attention window as `[levels, lat, lon]` tokens.
    pub window: Option<(usize, usize, usize)>,
    pub delta_out: Option<bool>,
    pub steps: Option<usize>,
    pub rpft_steps: Option<usize>,
    pub multistep_steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
}

impl DetTrainFileConfig {
    pub fn to_arch(&self) -> Result<ArchConfig, String> {
        let mut a = match self.arch.as_deref().unwrap_or("default") {
            "default" => ArchConfig::toy_default(),
            "micro" => ArchConfig::micro(),
            other => return Err(format!("unknown arch preset '{other}'")),
        };
        if let Some(v) = self.vertical_mode {
            a.vertical_mode = v;
            if v == VerticalMode::Local3d && a.window.0 < 2 {
                a.window.0 = 2;
            }
        }
        if let Some(v) = self.unet {
            a.unet = v;
        }
        if let Some(v) = self.window {
            a.window = v;
            if self.vertical_mode == Some(VerticalMode::Local3d) && a.window.0 < 2 {
                return Err("local3d needs window[0] >= 2".into());
            }
        }
        if let Some(v) = self.delta_out {
            a.delta_out = v;
        }
        if let Some(v) = self.positional_bias {
            a.positional_bias = v;
        }
        if let Some(v) = self.dim {
            a.dim = v;
        }
        if let Some(v) = self.n_heads {
            a.n_heads = v;
        }
        if let Some(v) = self.n_layers {
            a.n_layers = v;
        }
        if let Some(v) = self.mlp_hidden {
            a.mlp_hidden = v;
        }
        if let Some(v) = self.cond_dim {
            a.cond_dim = v;
        }
        Ok(a)
    }

    pub fn to_train(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(self.steps.unwrap_or(2000), seed);
        if let Some(v) = self.lr {
            c.opt.lr = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        c.opt.warmup_steps = (c.steps / 10).clamp(1, 5000);
        c
    }
}

// ---- checkpoint plumbing -------------------------------------------------

/// Normalization statistics travel inside the checkpoint as reserved
/// parameter entries under the `stats.` prefix.
fn stats_entries(stats: &NormStats) -> Vec<(&'static str, ArrayD<f32>)> {
    let c = |a: &Array2<f64>| a.mapv(|v| v as f32).into_dyn();
    let c1 = |a: &Array1<f64>| a.mapv(|v| v as f32).into_dyn();
    vec![
        ("stats.upper_mean", c(&stats.upper_mean)),
        ("stats.upper_std", c(&stats.upper_std)),
        ("stats.surface_mean", c1(&stats.surface_mean)),
        ("stats.surface_std", c1(&stats.surface_std)),
        ("stats.upper_residual_std", c(&stats.upper_residual_std)),
        ("stats.surface_residual_std", c1(&stats.surface_residual_std)),
    ]
}

fn split_stats(all: ParamSet<f32>, grid: &GridSpec) -> Result<(ParamSet<f32>, NormStats), String> {
    let mut params = ParamSet::new();
    let mut stats = NormStats::unit(grid);
    let to2 = |v: &ArrayD<f32>| -> Result<Array2<f64>, String> {
        v.mapv(|x| x as f64)
            .into_dimensionality()
            .map_err(|_| "bad stats shape".to_string())
    };
    let to1 = |v: &ArrayD<f32>| -> Result<Array1<f64>, String> {
        v.mapv(|x| x as f64)
            .into_dimensionality()
            .map_err(|_| "bad stats shape".to_string())
    };
    for (name, v) in all.iter() {
        match name {
            "stats.upper_mean" => stats.upper_mean = to2(v)?,
            "stats.upper_std" => stats.upper_std = to2(v)?,
            "stats.surface_mean" => stats.surface_mean = to1(v)?,
            "stats.surface_std" => stats.surface_std = to1(v)?,
            "stats.upper_residual_std" => stats.upper_residual_std = to2(v)?,
            "stats.surface_residual_std" => stats.surface_residual_std = to1(v)?,
            _ => params.add(name, v.clone()),
        }
    }
    Ok((params, stats))
}

#[derive(Serialize, Deserialize)]
struct DetCkptHeader {
    kind: String,
    arch: ArchConfig,
    grid: GridSpec,
}

#[derive(Serialize, Deserialize)]
struct GenCkptHeader {
    kind: String,
    flow: FlowConfig,
    grid: GridSpec,
}

pub fn save_det_ckpt(path: &Path, model: &DeterministicModel) -> Result<(), String> {
    let hdr = DetCkptHeader {
        kind: "det".into(),
        arch: model.cfg.clone(),
        grid: (*model.grid).clone(),
    };
    let mut all = model.params.clone();
    for (n, v) in stats_entries(&model.stats) {
        all.add(n, v);
    }
    save_ckpt(path, &serde_json::to_string(&hdr).unwrap(), &all).map_err(|e| e.to_string())
}

pub fn load_det_ckpt(path: &Path) -> Result<DeterministicModel, CliError> {
    let (cfg_json, all): (String, ParamSet<f32>) = load_ckpt(path).map_err(ckpt_err)?;
    let hdr: DetCkptHeader =
        serde_json::from_str(&cfg_json).map_err(|e| CliError::data(format!("bad checkpoint header: {e}")))?;
    if hdr.kind != "det" {
        return Err(CliError::data(format!(
            "expected a det checkpoint, found '{}'",
            hdr.kind
        )));
    }
    let grid = Arc::new(hdr.grid);
    let (params, stats) = split_stats(all, &grid).map_err(CliError::data)?;
    Ok(DeterministicModel {
        cfg: hdr.arch,
        grid,
        params,
        stats,
    })
}

pub fn save_gen_ckpt(path: &Path, em: &GenerativeEmulator) -> Result<(), String> {
    let hdr = GenCkptHeader {
        kind: "gen".into(),
        flow: em.cfg.clone(),
        grid: (*em.grid).clone(),
    };
    let mut all = em.params.clone();
    for (n, v) in stats_entries(&em.stats) {
        all.add(n, v);
    }
    save_ckpt(path, &serde_json::to_string(&hdr).unwrap(), &all).map_err(|e| e.to_string())
}

pub fn load_gen_ckpt(path: &Path) -> Result<GenerativeEmulator, CliError> {
    let (cfg_json, all): (String, ParamSet<f32>) = load_ckpt(path).map_err(ckpt_err)?;
    let hdr: GenCkptHeader =
        serde_json::from_str(&cfg_json).map_err(|e| CliError::data(format!("bad checkpoint header: {e}")))?;
    if hdr.kind != "gen" {
        return Err(CliError::data(format!(
            "expected a gen checkpoint, found '{}'",
            hdr.kind
        )));
    }
    let grid = Arc::new(hdr.grid);
    let (params, stats) = split_stats(all, &grid).map_err(CliError::data)?;
    Ok(GenerativeEmulator {
        cfg: hdr.flow,
        grid,
        params,
        stats,
    })
}

fn ckpt_err(e: crate::params::CkptError) -> CliError {
    match e {
        crate::params::CkptError::Io(io) => CliError::io(io),
        other => CliError::data(other),
    }
}

// ---- command implementations ---------------------------------------------

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let s = std::fs::read_to_string(path).map_err(CliError::io)?;
    let v = serde_json::from_str(&s).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok((v, s))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    match read_dataset(path) {
        Ok(d) => Ok(d),
        Err(crate::toy::DataError::Io(e)) => Err(CliError::io(e)),
        Err(e) => Err(CliError::data(e)),
    }
}

fn finish_manifest(mut man: RunManifest, output: &Path) -> CliResult {
    man.add_output(output).map_err(CliError::io)?;
    man.save_for(output).map_err(CliError::io)
}

fn cmd_gen_data(seed: u64, config: &Path, out: &Path) -> CliResult {
    let (cfg, raw): (GenDataConfig, String) = read_config(config)?;
    let toy = cfg.to_toy(seed).map_err(CliError::config)?;
    let ds = generate(&toy, cfg.n_steps, cfg.burn_in).map_err(CliError::config)?;
    write_dataset(out, &ds).map_err(CliError::io)?;
    let mut man = RunManifest::new("gen-data", seed, serde_json::from_str(&raw).unwrap());
    man.add_input(config).map_err(CliError::io)?;
    finish_manifest(man, out)
}

fn cmd_train_det(
    seed: u64,
    config: &Path,
    data: &Path,
    out: &Path,
    rpft: bool,
    multistep: bool,
) -> CliResult {
    let (cfg, raw): (DetTrainFileConfig, String) = read_config(config)?;
    let ds = load_data(data)?;
    let arch = cfg.to_arch().map_err(CliError::config)?;
    arch.validate(&ds.grid).map_err(CliError::config)?;
    let tc = cfg.to_train(seed);
    let (mut model, log) = train_det(&ds, Split::Train, arch, &tc).map_err(CliError::runtime)?;
    if rpft {
        let mut ft = TrainConfig::new(cfg.rpft_steps.unwrap_or(400), seed);
        ft.opt.lr = tc.opt.lr * 0.1;
        ft.opt.warmup_steps = (ft.steps / 10).max(1);
        finetune_rpft(&mut model, &ds, Split::Train, &ft).map_err(CliError::runtime)?;
    }
    if multistep {
        let mut ft = TrainConfig::new(cfg.multistep_steps.unwrap_or(200), seed);
        ft.opt.lr = tc.opt.lr * 0.1;
        ft.opt.warmup_steps = (ft.steps / 10).max(1);
        finetune_multistep(&mut model, &ds, Split::Train, &ft).map_err(CliError::runtime)?;
    }
    save_det_ckpt(out, &model).map_err(CliError::io)?;
    let mut logp = out.as_os_str().to_owned();
    logp.push(".log.csv");
    log.write_csv(Path::new(&logp)).map_err(CliError::io)?;
    let mut man = RunManifest::new("train-det", seed, serde_json::from_str(&raw).unwrap());
    man.add_input(config).map_err(CliError::io)?;
    man.add_input(data).map_err(CliError::io)?;
    finish_manifest(man, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_flow(
    seed: u64,
    det: &Path,
    data: &Path,
    out: &Path,
    mode: &str,
    ood: bool,
    steps: usize,
    ood_steps: usize,
    sample_steps: usize,
) -> CliResult {
    let model = load_det_ckpt(det)?;
    let ds = load_data(data)?;
    let objective = match mode {
        "flow" => Objective::Flow,
        "ddpm" => Objective::Ddpm,
        other => return Err(CliError::config(format!("unknown mode '{other}'"))),
    };
    let mut fc = FlowConfig::toy_default();
    fc.arch = model.cfg.clone();
    fc.arch.in_fields = 2;
    fc.arch.s_cond = true;
    fc.objective = objective;
    fc.sample_steps = sample_steps;
    let mut tc = TrainConfig::new(steps, seed);
    tc.opt.warmup_steps = (steps / 10).clamp(1, 5000);
    let (mut em, log) =
        train_flow(&model, &ds, Split::Train, fc, &tc).map_err(CliError::runtime)?;
    if ood {
        let mut oc = TrainConfig::new(ood_steps, seed);
        oc.opt.lr = tc.opt.lr * 0.1;
        oc.opt.warmup_steps = (ood_steps / 10).max(1);
        ood_finetune(&mut em, &model, &ds, &oc).map_err(CliError::runtime)?;
    }
    save_gen_ckpt(out, &em).map_err(CliError::io)?;
    let mut logp = out.as_os_str().to_owned();
    logp.push(".log.csv");
    log.write_csv(Path::new(&logp)).map_err(CliError::io)?;
    let mut man = RunManifest::new(
        "train-flow",
        seed,
        serde_json::json!({
            "mode": mode, "ood_finetune": ood, "steps": steps,
            "ood_steps": ood_steps, "sample_steps": sample_steps
        }),
    );
    man.add_input(det).map_err(CliError::io)?;
    man.add_input(data).map_err(CliError::io)?;
    finish_manifest(man, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    seed: u64,
    jobs: usize,
    det: &Path,
    gen: &Path,
    data: &Path,
    init_index: usize,
    members: usize,
    lead_days: usize,
    noise_scale: f64,
    out: &Path,
) -> CliResult {
    let model = load_det_ckpt(det)?;
    let mut em = load_gen_ckpt(gen)?;
    em.cfg.rho = noise_scale;
    let ds = load_data(data)?;
    if init_index >= ds.states.len() {
        return Err(CliError::config(format!(
            "init index {init_index} out of range ({} states)",
            ds.states.len()
        )));
    }
    let ens = rollout_ensemble(
        &model,
        &em,
        &ds.states[init_index],
        lead_days,
        members,
        seed,
        jobs,
    );
    save_ensemble(out, &ens).map_err(CliError::io)?;
    let mut man = RunManifest::new(
        "sample",
        seed,
        serde_json::json!({
            "init_index": init_index, "members": members, "lead_days": lead_days,
            "noise_scale": noise_scale
        }),
    );
    man.add_input(det).map_err(CliError::io)?;
    man.add_input(gen).map_err(CliError::io)?;
    man.add_input(data).map_err(CliError::io)?;
    man.add_output(&out.join("ensemble.json")).map_err(CliError::io)?;
    man.save_for(out).map_err(CliError::io)
}

/// Scores an ensemble at every stored lead against the truth series.
pub fn evaluate_ensemble(
    ens: &crate::rollout::EnsembleForecast,
    truth: &Dataset,
    clim: &Climatology,
    seed: u64,
) -> Result<MetricTable, String> {
    let grid = truth.grid.clone();
    let w = latitude_weights(&grid);
    let mut table = MetricTable::default();
    let kmax = grid.n_lon / 2;
    let hi_start = kmax - kmax / 3 + 1;
    for k in 0..ens.n_leads() {
        let vt = ens.init_time + 1 + k as i64;
        let idx = usize::try_from(vt).map_err(|_| "negative valid time".to_string())?;
        let y = truth
            .states
            .get(idx)
            .ok_or_else(|| format!("truth has no state at time {vt}"))?;
        let members = ens.at_lead(k);
        let owned: Vec<StateTensor> = members.iter().map(|s| (*s).clone()).collect();
        let ens_mean = StateTensor::mean_of(&owned);
        let lead = k + 1;
        table.push("rmse_ensmean", lead, rmse(&ens_mean, y, &w));
        table.push("crps_fair", lead, ens_crps(&members, y, &w, true));
        table.push("crps", lead, ens_crps(&members, y, &w, false));
        table.push("energy_fair", lead, energy_score(&members, y, &w, true));
        table.push("brier_fair", lead, ens_brier(&members, y, clim, &w, true));
        let mut ss = SpreadSkill::default();
        ss.add_case(&members, y, &w);
        table.push("spread", lead, ss.spread());
        table.push("spread_skill", lead, ss.ratio());
        let act: f64 = members
            .iter()
            .map(|m| activity(m, &clim.mean, &w))
            .sum::<f64>()
            / members.len() as f64;
        table.push("activity_ens", lead, act);
        table.push("activity_truth", lead, activity(y, &clim.mean, &w));

        let truth_spec = zonal_spectrum(y, &w);
        let mut mean_ratio_hi = 0.0;
        for m in &members {
            let r = spectrum_ratio(&zonal_spectrum(m, &w), &truth_spec);
            mean_ratio_hi += r[hi_start..].iter().sum::<f64>() / r[hi_start..].len() as f64;
        }
        table.push("spectrum_ratio_hi", lead, mean_ratio_hi / members.len() as f64);

        let mut hist = RankHistogram::new(members.len());
        let mut tie = stream(seed, StreamKind::TieBreak, k as u64);
        hist.add_field(&members, y, &mut tie);
        for (b, &c) in hist.counts.iter().enumerate() {
            table.push(&format!("rank_hist_{b}"), lead, c as f64);
        }
    }
    Ok(table)
}

fn cmd_evaluate(seed: u64, forecast: &Path, truth: &Path, clim: &Path, out: &Path) -> CliResult {
    let ens = load_ensemble(forecast).map_err(CliError::data)?;
    let truth_ds = load_data(truth)?;
    let clim_ds = load_data(clim)?;
    if clim_ds.states.len() < 2 {
        return Err(CliError::data("climatology needs at least 2 states"));
    }
    let refs: Vec<&StateTensor> = clim_ds.states.iter().collect();
    let climatology = fit_climatology(&refs, 0.01);
    let table = evaluate_ensemble(&ens, &truth_ds, &climatology, seed).map_err(CliError::data)?;
    table.write_csv(out).map_err(CliError::io)?;
    let mut man = RunManifest::new("evaluate", seed, serde_json::json!({"q": 0.01}));
    man.add_input(&forecast.join("ensemble.json")).map_err(CliError::io)?;
    man.add_input(truth).map_err(CliError::io)?;
    man.add_input(clim).map_err(CliError::io)?;
    finish_manifest(man, out)
}

fn read_metric_csv(path: &Path) -> Result<MetricTable, CliError> {
    let s = std::fs::read_to_string(path).map_err(CliError::io)?;
    let mut t = MetricTable::default();
    for (i, line) in s.lines().enumerate() {
        if i == 0 {
            if line != "metric,lead,value" {
                return Err(CliError::data(format!("{}: bad header", path.display())));
            }
            continue;
        }
        let mut it = line.split(',');
        let (m, l, v) = (it.next(), it.next(), it.next());
        match (m, l, v) {
            (Some(m), Some(l), Some(v)) => {
                let l: usize = l
                    .parse()
                    .map_err(|_| CliError::data(format!("bad lead in '{line}'")))?;
                let v: f64 = v
                    .parse()
                    .map_err(|_| CliError::data(format!("bad value in '{line}'")))?;
                t.push(m, l, v);
            }
            _ => return Err(CliError::data(format!("bad row '{line}'"))),
        }
    }
    Ok(t)
}

fn cmd_report(seed: u64, metrics: &Path, reference: &Path, out: &Path) -> CliResult {
    let t = read_metric_csv(metrics)?;
    let r = read_metric_csv(reference)?;
    let mut md = String::new();
    md.push_str("# Forecast verification report\n\n");
    md.push_str("Skill = 1 - value/reference; positive beats the reference.\n\n");
    md.push_str("| metric | lead | value | reference | skill |\n|---|---|---|---|---|\n");
    for (m, l, v) in &t.rows {
        if m.starts_with("rank_hist_") {
            continue;
        }
        if let Some(rv) = r.get(m, *l) {
            let skill = crate::metrics::skill_score(*v, rv);
            md.push_str(&format!("| {m} | {l} | {v:.6} | {rv:.6} | {skill:.4} |\n"));
        }
    }
    // rank histogram blocks per lead
    let leads: Vec<usize> = {
        let mut ls: Vec<usize> = t
            .rows
            .iter()
            .filter(|(m, _, _)| m == "rank_hist_0")
            .map(|&(_, l, _)| l)
            .collect();
        ls.dedup();
        ls
    };
    for l in leads {
        md.push_str(&format!("\n## Rank histogram, lead {l}\n\n|bin|count|\n|---|---|\n"));
        let mut b = 0;
        while let Some(c) = t.get(&format!("rank_hist_{b}"), l) {
            md.push_str(&format!("| {b} | {c} |\n"));
            b += 1;
        }
    }
    std::fs::write(out, md).map_err(CliError::io)?;
    let mut man = RunManifest::new("report", seed, serde_json::Value::Null);
    man.add_input(metrics).map_err(CliError::io)?;
    man.add_input(reference).map_err(CliError::io)?;
    finish_manifest(man, out)
}

fn cmd_ablate(seed: u64, jobs: usize, matrix: &Path, out: &Path) -> CliResult {
    let spec = MatrixSpec::load(matrix).map_err(CliError::config)?;
    let result = run_matrix(&spec, jobs);
    result.write_report(out).map_err(CliError::io)?;
    let mut man = RunManifest::new(
        "ablate",
        seed,
        serde_json::to_value(&spec).unwrap(),
    );
    man.add_input(matrix).map_err(CliError::io)?;
    man.add_output(&out.join("report.md")).map_err(CliError::io)?;
    man.add_output(&out.join("metrics.csv")).map_err(CliError::io)?;
    man.save_for(out).map_err(CliError::io)
}

fn cmd_make_clim(seed: u64, data: &Path, out: &Path) -> CliResult {
    let ds = load_data(data)?;
    let train = ds.range(Split::Train);
    if train.len() < 2 {
        return Err(CliError::data("training split too short for a climatology"));
    }
    write_states_file(out, &ds.grid, &ds.states[train]).map_err(CliError::io)?;
    let mut man = RunManifest::new("make-clim", seed, serde_json::Value::Null);
    man.add_input(data).map_err(CliError::io)?;
    finish_manifest(man, out)
}

// ---- entry points ----------------------------------------------------------

fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(v) = std::env::var("STORMKIT_SEED") {
        if let Ok(s) = v.parse() {
            return s;
        }
    }
    0
}

/// Run with explicit arguments; returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with code 0
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let seed = resolve_seed(cli.seed);
    let jobs = cli.jobs.max(1);
    let r = match &cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(seed, config, out),
        Cmd::TrainDet {
            config,
            data,
            out,
            rpft,
            multistep,
        } => cmd_train_det(seed, config, data, out, *rpft, *multistep),
        Cmd::TrainFlow {
            det,
            data,
            out,
            mode,
            ood_finetune,
            steps,
            ood_steps,
            sample_steps,
        } => cmd_train_flow(
            seed,
            det,
            data,
            out,
            mode,
            *ood_finetune,
            *steps,
            *ood_steps,
            *sample_steps,
        ),
        Cmd::Sample {
            det,
            gen,
            data,
            init_index,
            members,
            lead_days,
            noise_scale,
            out,
        } => cmd_sample(
            seed,
            jobs,
            det,
            gen,
            data,
            *init_index,
            *members,
            *lead_days,
            *noise_scale,
            out,
        ),
        Cmd::Evaluate {
            forecast,
            truth,
            clim,
            out,
        } => cmd_evaluate(seed, forecast, truth, clim, out),
        Cmd::Report {
            metrics,
            reference,
            out,
        } => cmd_report(seed, metrics, reference, out),
        Cmd::Ablate { matrix, out } => cmd_ablate(seed, jobs, matrix, out),
        Cmd::MakeClim { data, out } => cmd_make_clim(seed, data, out),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
