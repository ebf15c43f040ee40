//! Synthetic cylindrical-sphere dynamics with an analytically known
//! transition distribution, plus the WT1 on-disk dataset format.
//!
//! The transition of each field is: circular longitude shift (level
//! dependent), vertical relaxation toward the density-weighted column mean,
//! then a pointwise tanh blend. The stochastic step adds longitudinally
//! smoothed Gaussian forcing, so the conditional distribution of the next
//! state is exactly Gaussian with mean `step_mean(x)` and a per-cell standard
//! deviation of `forcing_std / sqrt(smoothing_width)`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, StateTensor};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected WT1 header")]
    BadMagic,
    #[error("truncated file: expected {expected} floats, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("shape mismatch in header: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    Parse(String),
    #[error("degenerate config: {0}")]
    DegenerateConfig(String),
}

/// Parameters of the toy dynamical system.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyDynamicsConfig {
    pub grid: GridSpec,
    /// Cells of circular longitude shift per step for each level; defaults to
    /// `level + 1`. Surface variables use the level-0 shift.
    #[serde(default)]
    pub zonal_shift_per_level: Option<Vec<usize>>,
    /// Relaxation strength toward the column mean (kappa).
    pub vertical_mixing: f64,
    /// Pointwise tanh blend strength (beta).
    pub nonlinearity: f64,
    /// Forcing standard deviation before smoothing (sigma_f).
    pub forcing_std: f64,
    /// Width of the longitudinal moving average applied to the forcing.
    pub forcing_smoothing: usize,
    /// Linear drift of the forcing std per step, as a fraction. Zero by
    /// default; nonzero values emulate a slowly changing observing system.
    #[serde(default)]
    pub forcing_std_drift_per_step: f64,
    pub seed: u64,
}

impl ToyDynamicsConfig {
    pub fn defaults(grid: &GridSpec) -> Self {
        ToyDynamicsConfig {
            grid: grid.clone(),
            zonal_shift_per_level: None,
            vertical_mixing: 0.2,
            nonlinearity: 0.1,
            forcing_std: 0.05,
            forcing_smoothing: 3,
            forcing_std_drift_per_step: 0.0,
            seed: 0,
        }
    }

    pub fn shifts(&self) -> Vec<usize> {
        match &self.zonal_shift_per_level {
            Some(v) => v.clone(),
            None => (0..self.grid.n_levels).map(|z| z + 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.grid
            .validate()
            .map_err(|e| DataError::DegenerateConfig(e.to_string()))?;
        if self.vertical_mixing + self.nonlinearity >= 1.0
            || self.vertical_mixing < 0.0
            || self.nonlinearity < 0.0
        {
            return Err(DataError::DegenerateConfig(format!(
                "need 0 <= kappa + beta < 1, got kappa={} beta={}",
                self.vertical_mixing, self.nonlinearity
            )));
        }
        if self.forcing_std < 0.0 {
            return Err(DataError::DegenerateConfig("forcing_std < 0".into()));
        }
        if self.forcing_smoothing == 0 || self.forcing_smoothing > self.grid.n_lon {
            return Err(DataError::DegenerateConfig(
                "forcing_smoothing must be in 1..=n_lon".into(),
            ));
        }
        let shifts = self.shifts();
        if shifts.len() != self.grid.n_levels {
            return Err(DataError::DegenerateConfig(
                "zonal_shift_per_level length != n_levels".into(),
            ));
        }
        if shifts.iter().any(|s| *s >= self.grid.n_lon) {
            return Err(DataError::DegenerateConfig("shift >= n_lon".into()));
        }
        Ok(())
    }

    /// Forcing std at a given step index.
    pub fn forcing_std_at(&self, t: i64) -> f64 {
        self.forcing_std * (1.0 + self.forcing_std_drift_per_step * t as f64)
    }

    /// Per-cell std of the smoothed forcing at step `t`: a width-k moving
    /// average of unit normals has per-cell variance 1/k.
    pub fn noise_cell_std(&self, t: i64) -> f64 {
        self.forcing_std_at(t) / (self.forcing_smoothing as f64).sqrt()
    }
}

fn roll_rows(mut field: ArrayViewMut2<f64>, shift: usize) {
    if shift == 0 {
        return;
    }
    let w = field.ncols();
    let mut buf = vec![0.0; w];
    for mut row in field.rows_mut() {
        for (j, v) in row.iter().enumerate() {
            buf[(j + shift) % w] = *v;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v = buf[j];
        }
    }
}

/// Deterministic transition mean `E[x_{t+1} | x_t]`.
pub fn step_mean(x: &StateTensor, cfg: &ToyDynamicsConfig) -> StateTensor {
    let g = &x.grid;
    assert_eq!(**g, cfg.grid, "state grid does not match config grid");
    let kappa = cfg.vertical_mixing;
    let beta = cfg.nonlinearity;
    let shifts = cfg.shifts();
    let mut out = x.clone();
    out.valid_time = x.valid_time + 1;

    // (1) circular shift per level
    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            roll_rows(out.upper.slice_mut(ndarray::s![vi, z, .., ..]), shifts[z]);
        }
    }
    for vi in 0..g.n_surface() {
        roll_rows(out.surface.slice_mut(ndarray::s![vi, .., ..]), shifts[0]);
    }

    // (2) relaxation toward the density-weighted column mean. The density
    // weights (level z weight proportional to z+1) make the relaxation
    // non-expansive in the state norm; a plain column mean is not.
    if kappa > 0.0 && g.n_levels > 1 {
        let zn = g.n_levels;
        let wsum: f64 = (1..=zn).map(|p| p as f64).sum();
        for vi in 0..g.n_upper() {
            let mut col_mean = Array2::<f64>::zeros((g.n_lat, g.n_lon));
            for z in 0..zn {
                col_mean.scaled_add(
                    (z + 1) as f64 / wsum,
                    &out.upper.slice(ndarray::s![vi, z, .., ..]),
                );
            }
            for z in 0..zn {
                let mut lvl = out.upper.slice_mut(ndarray::s![vi, z, .., ..]);
                lvl.zip_mut_with(&col_mean, |u, m| *u = (1.0 - kappa) * *u + kappa * m);
            }
        }
    }

    // (3) pointwise tanh blend
    if beta > 0.0 {
        out.upper
            .mapv_inplace(|u| (1.0 - beta) * u + beta * u.tanh());
        out.surface
            .mapv_inplace(|u| (1.0 - beta) * u + beta * u.tanh());
    }
    out
}

fn smoothed_noise(h: usize, w: usize, width: usize, std: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let mut raw = Array2::<f64>::zeros((h, w));
    raw.mapv_inplace(|_| rng.sample::<f64, _>(rand_distr::StandardNormal));
    if width <= 1 {
        return raw * std;
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let half = width / 2;
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for o in 0..width {
                s += raw[[i, (j + w + o - half) % w]];
            }
            out[[i, j]] = std * s / width as f64;
        }
    }
    out
}

/// Draw the smoothed forcing field for every channel of a state.
pub fn sample_forcing(
    grid: &GridSpec,
    cfg: &ToyDynamicsConfig,
    t: i64,
    rng: &mut ChaCha12Rng,
) -> StateTensor {
    let std = cfg.forcing_std_at(t);
    let mut f = StateTensor::zeros(Arc::new(grid.clone()), t + 1);
    for vi in 0..grid.n_upper() {
        for z in 0..grid.n_levels {
            let n = smoothed_noise(grid.n_lat, grid.n_lon, cfg.forcing_smoothing, std, rng);
            f.upper.slice_mut(ndarray::s![vi, z, .., ..]).assign(&n);
        }
    }
    for vi in 0..grid.n_surface() {
        let n = smoothed_noise(grid.n_lat, grid.n_lon, cfg.forcing_smoothing, std, rng);
        f.surface.slice_mut(ndarray::s![vi, .., ..]).assign(&n);
    }
    f
}

/// Stochastic transition: `step_mean(x) + forcing`.
pub fn step_sample(
    x: &StateTensor,
    cfg: &ToyDynamicsConfig,
    rng: &mut ChaCha12Rng,
) -> StateTensor {
    let mut out = step_mean(x, cfg);
    if cfg.forcing_std_at(x.valid_time) > 0.0 {
        let f = sample_forcing(&x.grid, cfg, x.valid_time, rng);
        out.upper += &f.upper;
        out.surface += &f.surface;
    }
    out
}

/// A time-ordered trajectory with train / OOD-fine-tune / test split markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: Arc<GridSpec>,
    /// Present for generated datasets; WT1 files do not carry the config.
    pub config: Option<ToyDynamicsConfig>,
    pub states: Vec<StateTensor>,
    pub train: Range<usize>,
    pub ood: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    OodFinetune,
    Test,
}

impl Dataset {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::OodFinetune => self.ood.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Indices `i` in `split` such that (i-1, i, i+1) are all inside the
    /// split: usable as the center of a one-step training triple.
    pub fn triple_centers(&self, split: Split) -> Vec<usize> {
        let r = self.range(split);
        if r.len() < 3 {
            return vec![];
        }
        (r.start + 1..r.end - 1).collect()
    }
}

/// Quantize to f32 and back, so in-memory states match the WT1 file bytes.
fn quantize(st: &mut StateTensor) {
    st.upper.mapv_inplace(|v| v as f32 as f64);
    st.surface.mapv_inplace(|v| v as f32 as f64);
}

/// Simulate the toy system: burn in from a random smooth field, then record
/// `n_steps` consecutive states and mark 80/10/10 splits.
pub fn generate(cfg: &ToyDynamicsConfig, n_steps: usize, burn_in: usize) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if n_steps < 10 {
        return Err(DataError::DegenerateConfig("n_steps must be >= 10".into()));
    }
    let grid = Arc::new(cfg.grid.clone());
    let mut init_rng = stream(cfg.seed, StreamKind::ToyInit, 0);
    let mut st = StateTensor::zeros(grid.clone(), -(burn_in as i64) - 1);
    for vi in 0..grid.n_upper() {
        for z in 0..grid.n_levels {
            let n = smoothed_noise(grid.n_lat, grid.n_lon, cfg.forcing_smoothing.max(3), 0.3, &mut init_rng);
            st.upper.slice_mut(ndarray::s![vi, z, .., ..]).assign(&n);
        }
    }
    for vi in 0..grid.n_surface() {
        let n = smoothed_noise(grid.n_lat, grid.n_lon, cfg.forcing_smoothing.max(3), 0.3, &mut init_rng);
        st.surface.slice_mut(ndarray::s![vi, .., ..]).assign(&n);
    }

    let total = burn_in + n_steps;
    let mut states = Vec::with_capacity(n_steps);
    for step in 0..total {
        let mut rng = stream(cfg.seed, StreamKind::Forcing, step as u64);
        st = step_sample(&st, cfg, &mut rng);
        if step >= burn_in {
            st.valid_time = (step - burn_in) as i64;
            let mut rec = st.clone();
            quantize(&mut rec);
            st = rec.clone(); // keep trajectory consistent with recorded values
            states.push(rec);
        }
    }

    let t1 = (n_steps as f64 * 0.8).round() as usize;
    let t2 = (n_steps as f64 * 0.9).round() as usize;
    Ok(Dataset {
        grid,
        config: Some(cfg.clone()),
        states,
        train: 0..t1,
        ood: t1..t2,
        test: t2..n_steps,
    })
}

// ---------------------------------------------------------------------------
// WT1 file format
//
// Line 1: `WT1 <V_u> <V_s> <Z> <H> <W> <T>`
// Line 2: space-separated variable names, upper-air then surface
// Line 3: `<train_end> <ood_end> <lead_hours>`
// Then raw little-endian f32 in [T][V][Z][H][W] order; the surface block is
// stored as a Z=1 block after the upper block of each state.
// ---------------------------------------------------------------------------

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_states(&mut w, &ds.grid, &ds.states, ds.train.end, ds.ood.end)
}

/// Write a bare sequence of states (used for ensemble members and
/// climatology fixtures, where splits are meaningless and stored as 0 0).
pub fn write_states_file(path: &Path, grid: &GridSpec, states: &[StateTensor]) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_states(&mut w, grid, states, 0, 0)
}

fn write_states<W: Write>(
    w: &mut W,
    grid: &GridSpec,
    states: &[StateTensor],
    train_end: usize,
    ood_end: usize,
) -> Result<(), DataError> {
    writeln!(
        w,
        "WT1 {} {} {} {} {} {}",
        grid.n_upper(),
        grid.n_surface(),
        grid.n_levels,
        grid.n_lat,
        grid.n_lon,
        states.len()
    )?;
    let names: Vec<&str> = grid
        .upper_vars
        .iter()
        .chain(grid.surface_vars.iter())
        .map(|s| s.as_str())
        .collect();
    writeln!(w, "{}", names.join(" "))?;
    writeln!(w, "{} {} {}", train_end, ood_end, grid.lead_time_hours)?;
    let mut buf = Vec::new();
    for st in states {
        buf.clear();
        for v in st.upper.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in st.surface.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut it = line.split_whitespace();
    if it.next() != Some("WT1") {
        return Err(DataError::BadMagic);
    }
    let mut next_num = |what: &str| -> Result<usize, DataError> {
        it.next()
            .ok_or_else(|| DataError::Parse(format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| DataError::Parse(format!("bad {what}")))
    };
    let vu = next_num("V_u")?;
    let vs = next_num("V_s")?;
    let z = next_num("Z")?;
    let h = next_num("H")?;
    let wd = next_num("W")?;
    let t = next_num("T")?;

    let mut names_line = String::new();
    r.read_line(&mut names_line)?;
    let names: Vec<String> = names_line.split_whitespace().map(|s| s.to_string()).collect();
    if names.len() != vu + vs {
        return Err(DataError::ShapeMismatch(format!(
            "{} variable names for V_u={} V_s={}",
            names.len(),
            vu,
            vs
        )));
    }

    let mut split_line = String::new();
    r.read_line(&mut split_line)?;
    let nums: Vec<usize> = split_line
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| DataError::Parse("bad split index".into())))
        .collect::<Result<_, _>>()?;
    if nums.len() != 3 {
        return Err(DataError::Parse("split line needs 3 numbers".into()));
    }
    let (train_end, ood_end, lead) = (nums[0], nums[1], nums[2]);
    if train_end > t || ood_end > t || train_end > ood_end {
        return Err(DataError::ShapeMismatch("split indices out of order".into()));
    }

    let mut grid = GridSpec::new(
        h,
        wd,
        z,
        names[..vu].to_vec(),
        names[vu..].to_vec(),
    )
    .map_err(|e| DataError::ShapeMismatch(e.to_string()))?;
    grid.lead_time_hours = lead as u32;
    let grid = Arc::new(grid);

    let per_state = vu * z * h * wd + vs * h * wd;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != t * per_state * 4 {
        return Err(DataError::Truncated {
            expected: t * per_state,
            found: bytes.len() / 4,
        });
    }
    let mut states = Vec::with_capacity(t);
    let mut off = 0usize;
    for ti in 0..t {
        let mut st = StateTensor::zeros(grid.clone(), ti as i64);
        for v in st.upper.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        for v in st.surface.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        states.push(st);
    }

    Ok(Dataset {
        grid,
        config: None,
        states,
        train: 0..train_end,
        ood: train_end..ood_end,
        test: ood_end..t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{latitude_weights, weighted_norm_sq};
    use rand::Rng;

    fn micro_cfg() -> ToyDynamicsConfig {
        let grid = GridSpec::new(
            4,
            8,
            2,
            vec!["temp".into()],
            vec!["t2m".into()],
        )
        .unwrap();
        let mut c = ToyDynamicsConfig::defaults(&grid);
        c.seed = 42;
        c
    }

    #[test]
    fn zero_state_is_fixed_point_of_mean() {
        let cfg = micro_cfg();
        let st = StateTensor::zeros(Arc::new(cfg.grid.clone()), 0);
        let next = step_mean(&st, &cfg);
        assert!(next.upper.iter().all(|v| *v == 0.0));
        assert!(next.surface.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pure_shift_is_periodic() {
        let mut cfg = micro_cfg();
        cfg.vertical_mixing = 0.0;
        cfg.nonlinearity = 0.0;
        cfg.zonal_shift_per_level = Some(vec![2, 2]);
        let mut rng = stream(1, StreamKind::Oracle, 0);
        let mut st = StateTensor::zeros(Arc::new(cfg.grid.clone()), 0);
        st.upper.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        st.surface.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut cur = st.clone();
        for _ in 0..cfg.grid.n_lon / 2 {
            cur = step_mean(&cur, &cfg);
        }
        assert!(cur
            .upper
            .iter()
            .zip(st.upper.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn single_level_scalar_update_matches_hand_value() {
        let grid = GridSpec::new(4, 8, 1, vec!["temp".into()], vec![]).unwrap();
        let mut cfg = ToyDynamicsConfig::defaults(&grid);
        cfg.vertical_mixing = 0.0;
        cfg.nonlinearity = 0.1;
        cfg.zonal_shift_per_level = Some(vec![1]);
        let mut st = StateTensor::zeros(Arc::new(grid), 0);
        st.upper[[0, 0, 0, 0]] = 1.0;
        let next = step_mean(&st, &cfg);
        // shifted cell: 0.9*1.0 + 0.1*tanh(1.0)
        let expect = 0.9 + 0.1 * 1.0f64.tanh();
        assert!((next.upper[[0, 0, 0, 1]] - expect).abs() < 1e-12);
        assert!((expect - 0.976159).abs() < 1e-6);
    }

    #[test]
    fn zero_forcing_sample_equals_mean() {
        let mut cfg = micro_cfg();
        cfg.forcing_std = 0.0;
        let mut rng = stream(2, StreamKind::Oracle, 0);
        let mut st = StateTensor::zeros(Arc::new(cfg.grid.clone()), 0);
        st.upper.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let mut r2 = stream(3, StreamKind::Oracle, 0);
        let s = step_sample(&st, &cfg, &mut r2);
        let m = step_mean(&st, &cfg);
        assert_eq!(s.upper, m.upper);
    }

    #[test]
    fn forcing_mean_and_std_match_analytics() {
        // Monte Carlo oracle: E[step_sample] = step_mean and per-cell forcing
        // std = sigma_f / sqrt(width).
        let cfg = micro_cfg();
        let grid = Arc::new(cfg.grid.clone());
        let n = 10_000;
        let mut mean_acc = Array2::<f64>::zeros((grid.n_lat, grid.n_lon));
        let mut var_acc = 0.0;
        let mut cells = 0usize;
        for i in 0..n {
            let mut rng = stream(99, StreamKind::Oracle, i as u64);
            let f = sample_forcing(&grid, &cfg, 0, &mut rng);
            mean_acc += &f.upper.slice(ndarray::s![0, 0, .., ..]);
            var_acc += f.upper.iter().map(|v| v * v).sum::<f64>();
            cells = f.upper.len();
        }
        mean_acc /= n as f64;
        assert!(mean_acc.iter().all(|v| v.abs() < 3e-3));
        let cell_std = (var_acc / (n * cells) as f64).sqrt();
        let expect = cfg.forcing_std / (cfg.forcing_smoothing as f64).sqrt();
        assert!(
            (cell_std - expect).abs() < 0.02 * expect,
            "cell std {cell_std} vs {expect}"
        );
    }

    #[test]
    fn step_mean_contracts_weighted_norm() {
        let cfg = micro_cfg();
        let grid = Arc::new(cfg.grid.clone());
        let w = latitude_weights(&grid);
        for seed in 0..50u64 {
            let mut rng = stream(seed, StreamKind::Oracle, 7);
            let mut st = StateTensor::zeros(grid.clone(), 0);
            st.upper.mapv_inplace(|_| rng.gen_range(-3.0..3.0));
            st.surface.mapv_inplace(|_| rng.gen_range(-3.0..3.0));
            let before = weighted_norm_sq(&st, &w);
            let after = weighted_norm_sq(&step_mean(&st, &cfg), &w);
            assert!(after <= before * (1.0 + 1e-12), "{after} > {before}");
        }
    }

    #[test]
    fn generate_is_deterministic_and_split() {
        let cfg = micro_cfg();
        let a = generate(&cfg, 20, 5).unwrap();
        let b = generate(&cfg, 20, 5).unwrap();
        assert_eq!(a.states.len(), 20);
        assert_eq!(a, b);
        assert_eq!(a.train, 0..16);
        assert_eq!(a.ood, 16..18);
        assert_eq!(a.test, 18..20);
        for (i, s) in a.states.iter().enumerate() {
            assert_eq!(s.valid_time, i as i64);
        }
    }

    #[test]
    fn climatology_stabilizes() {
        let cfg = micro_cfg();
        let ds = generate(&cfg, 2000, 100).unwrap();
        let half = 1000;
        let std_of = |states: &[StateTensor]| {
            let n = states.len() * states[0].upper.len();
            let mean: f64 = states.iter().map(|s| s.upper.sum()).sum::<f64>() / n as f64;
            let var: f64 = states
                .iter()
                .map(|s| s.upper.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / n as f64;
            var.sqrt()
        };
        let s1 = std_of(&ds.states[1000..1500]);
        let s2 = std_of(&ds.states[1500..half + 1000]);
        assert!(
            (s1 - s2).abs() < 0.05 * s1,
            "climatological std drifts: {s1} vs {s2}"
        );
    }

    #[test]
    fn wt1_roundtrip_and_errors() {
        let cfg = micro_cfg();
        let ds = generate(&cfg, 12, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wt1");
        write_dataset(&p, &ds).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.states, ds.states);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.ood, ds.ood);
        assert_eq!(back.test, ds.test);
        assert_eq!(*back.grid, *ds.grid);

        // corrupted magic
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        let p2 = dir.path().join("bad.wt1");
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(read_dataset(&p2), Err(DataError::BadMagic)));

        // truncation after header
        let good = std::fs::read(&p).unwrap();
        let p3 = dir.path().join("trunc.wt1");
        std::fs::write(&p3, &good[..good.len() - 10]).unwrap();
        assert!(matches!(
            read_dataset(&p3),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = micro_cfg();
        cfg.vertical_mixing = 0.95;
        cfg.nonlinearity = 0.1;
        assert!(matches!(
            generate(&cfg, 20, 0),
            Err(DataError::DegenerateConfig(_))
        ));
        let cfg2 = micro_cfg();
        assert!(matches!(
            generate(&cfg2, 5, 0),
            Err(DataError::DegenerateConfig(_))
        ));
    }
}
