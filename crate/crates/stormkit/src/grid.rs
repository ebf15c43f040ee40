//! Grid geometry, state tensors and the weighted state norm.
//!
//! The norm implemented by [`weighted_norm_sq`] is the mean over all tensor
//! entries of `w_var * w_level * w_lat * a^2`, with latitude weights
//! normalized to mean 1 and per-level weights (upper air only) proportional
//! to a synthetic pressure value `1..=Z`, also normalized to mean 1. With all
//! weights at 1 the norm of an all-ones state is exactly 1.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("zero std for variable {0} level {1}")]
    ZeroStd(String, usize),
}

/// Grid geometry and variable layout. Latitude cell centers are equiangular
/// and offset by half a cell from the poles; longitude is periodic.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_levels: usize,
    pub upper_vars: Vec<String>,
    pub surface_vars: Vec<String>,
    /// Lead time between consecutive states, in hours.
    pub lead_time_hours: u32,
}

impl GridSpec {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        n_levels: usize,
        upper_vars: Vec<String>,
        surface_vars: Vec<String>,
    ) -> Result<Self, GridError> {
        let g = GridSpec {
            n_lat,
            n_lon,
            n_levels,
            upper_vars,
            surface_vars,
            lead_time_hours: 24,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.n_lat < 2 || self.n_lon < 2 || self.n_levels < 1 {
            return Err(GridError::InvalidGrid(format!(
                "need n_lat>=2, n_lon>=2, n_levels>=1, got {}x{}x{}",
                self.n_lat, self.n_lon, self.n_levels
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for v in self.upper_vars.iter().chain(self.surface_vars.iter()) {
            if !seen.insert(v.as_str()) {
                return Err(GridError::InvalidGrid(format!("duplicate variable {v}")));
            }
        }
        Ok(())
    }

    /// Latitude cell centers in degrees, strictly inside (-90, 90).
    pub fn lat_centers_deg(&self) -> Vec<f64> {
        let h = self.n_lat as f64;
        (0..self.n_lat)
            .map(|i| -90.0 + (i as f64 + 0.5) * 180.0 / h)
            .collect()
    }

    pub fn n_upper(&self) -> usize {
        self.upper_vars.len()
    }

    pub fn n_surface(&self) -> usize {
        self.surface_vars.len()
    }

    /// Total number of scalar entries in one state.
    pub fn n_entries(&self) -> usize {
        self.n_upper() * self.n_levels * self.n_lat * self.n_lon
            + self.n_surface() * self.n_lat * self.n_lon
    }

    /// Default toy grid: 4 levels, 16x32, two upper-air and two surface variables.
    pub fn toy_default() -> Arc<Self> {
        Arc::new(
            GridSpec::new(
                16,
                32,
                4,
                vec!["temp".into(), "wind".into()],
                vec!["t2m".into(), "msl".into()],
            )
            .unwrap(),
        )
    }

    /// Small grid for fast paired-seed experiments.
    pub fn toy_micro() -> Arc<Self> {
        Arc::new(
            GridSpec::new(
                8,
                16,
                4,
                vec!["temp".into(), "wind".into()],
                vec!["t2m".into(), "msl".into()],
            )
            .unwrap(),
        )
    }
}

/// One weather state: upper-air `[V_u][Z][H][W]` plus surface `[V_s][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTensor {
    pub grid: Arc<GridSpec>,
    pub upper: Array4<f64>,
    pub surface: Array3<f64>,
    /// Step index; wall-clock time is `valid_time * lead_time_hours`.
    pub valid_time: i64,
}

impl StateTensor {
    pub fn zeros(grid: Arc<GridSpec>, valid_time: i64) -> Self {
        let upper = Array4::zeros((grid.n_upper(), grid.n_levels, grid.n_lat, grid.n_lon));
        let surface = Array3::zeros((grid.n_surface(), grid.n_lat, grid.n_lon));
        StateTensor {
            grid,
            upper,
            surface,
            valid_time,
        }
    }

    pub fn check_shapes(&self) -> Result<(), GridError> {
        let g = &self.grid;
        let ue = (g.n_upper(), g.n_levels, g.n_lat, g.n_lon);
        let se = (g.n_surface(), g.n_lat, g.n_lon);
        if self.upper.dim() != ue || self.surface.dim() != se {
            return Err(GridError::ShapeMismatch(format!(
                "state arrays {:?}/{:?} do not match grid {:?}/{:?}",
                self.upper.dim(),
                self.surface.dim(),
                ue,
                se
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<(), GridError> {
        let ok = self.upper.iter().all(|v| v.is_finite())
            && self.surface.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(GridError::NonFinite(what.to_string()))
        }
    }

    /// Elementwise `self - other`, keeping `self`'s valid time.
    pub fn sub(&self, other: &StateTensor) -> StateTensor {
        assert_eq!(self.upper.dim(), other.upper.dim(), "state shape mismatch");
        StateTensor {
            grid: self.grid.clone(),
            upper: &self.upper - &other.upper,
            surface: &self.surface - &other.surface,
            valid_time: self.valid_time,
        }
    }

    pub fn add(&self, other: &StateTensor) -> StateTensor {
        assert_eq!(self.upper.dim(), other.upper.dim(), "state shape mismatch");
        StateTensor {
            grid: self.grid.clone(),
            upper: &self.upper + &other.upper,
            surface: &self.surface + &other.surface,
            valid_time: self.valid_time,
        }
    }

    pub fn scale(&self, c: f64) -> StateTensor {
        StateTensor {
            grid: self.grid.clone(),
            upper: &self.upper * c,
            surface: &self.surface * c,
            valid_time: self.valid_time,
        }
    }

    /// Mean of a set of states (ensemble mean).
    pub fn mean_of(states: &[StateTensor]) -> StateTensor {
        assert!(!states.is_empty());
        let mut acc = states[0].clone();
        for s in &states[1..] {
            acc.upper += &s.upper;
            acc.surface += &s.surface;
        }
        acc.scale(1.0 / states.len() as f64)
    }
}

/// Latitude, per-variable and per-level weights defining the state norm.
#[derive(Clone, Debug)]
pub struct LatWeights {
    /// Per-latitude-cell weight, mean 1 over cells.
    pub per_cell: Array1<f64>,
    pub variable_weights: HashMap<String, f64>,
    /// Upper-air per-level weight, mean 1 over levels.
    pub level_weights: Array1<f64>,
}

/// Cosine-latitude weights, normalized so the weighted mean of a constant-1
/// field is 1.
pub fn latitude_weights(grid: &GridSpec) -> LatWeights {
    let cos: Vec<f64> = grid
        .lat_centers_deg()
        .iter()
        .map(|d| d.to_radians().cos())
        .collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    let per_cell = Array1::from_iter(cos.iter().map(|c| c / mean));

    // Synthetic "pressure" 1..=Z stands in for the air-density coefficient.
    let z = grid.n_levels;
    let psum: f64 = (1..=z).map(|p| p as f64).sum();
    let level_weights = Array1::from_iter((1..=z).map(|p| p as f64 * z as f64 / psum));

    let mut variable_weights = HashMap::new();
    for v in &grid.upper_vars {
        variable_weights.insert(v.clone(), 1.0);
    }
    for v in &grid.surface_vars {
        let w = match v.as_str() {
            "t2m" => 1.0,
            "msl" | "u10" | "v10" => 0.1,
            _ => 1.0,
        };
        variable_weights.insert(v.clone(), w);
    }
    LatWeights {
        per_cell,
        variable_weights,
        level_weights,
    }
}

impl LatWeights {
    /// Weights with every variable and level coefficient set to 1 (latitude
    /// weighting only). Used by metrics that aggregate a single channel.
    pub fn unit_variables(grid: &GridSpec) -> LatWeights {
        let mut w = latitude_weights(grid);
        for v in w.variable_weights.values_mut() {
            *v = 1.0;
        }
        w.level_weights.fill(1.0);
        w
    }

    pub fn var_weight(&self, name: &str) -> f64 {
        *self
            .variable_weights
            .get(name)
            .unwrap_or_else(|| panic!("no weight for variable {name}"))
    }

    /// Mean entry weight of a full state on `grid` (the norm of an all-ones state).
    pub fn total_mass(&self, grid: &GridSpec) -> f64 {
        let mut sum = 0.0;
        let latsum: f64 = self.per_cell.sum() * grid.n_lon as f64;
        for v in &grid.upper_vars {
            let wv = self.var_weight(v);
            for z in 0..grid.n_levels {
                sum += wv * self.level_weights[z] * latsum;
            }
        }
        for v in &grid.surface_vars {
            sum += self.var_weight(v) * latsum;
        }
        sum / grid.n_entries() as f64
    }
}

/// Weighted mean of squared entries of a state-shaped array: the squared
/// state norm used by every loss and RMSE in the pipeline.
pub fn weighted_norm_sq(a: &StateTensor, w: &LatWeights) -> f64 {
    a.check_shapes().expect("weighted_norm_sq shape mismatch");
    let g = &a.grid;
    let mut sum = 0.0;
    for (vi, v) in g.upper_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for z in 0..g.n_levels {
            let wl = wv * w.level_weights[z];
            for h in 0..g.n_lat {
                let wc = wl * w.per_cell[h];
                let row = a.upper.slice(ndarray::s![vi, z, h, ..]);
                sum += wc * row.iter().map(|x| x * x).sum::<f64>();
            }
        }
    }
    for (vi, v) in g.surface_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for h in 0..g.n_lat {
            let wc = wv * w.per_cell[h];
            let row = a.surface.slice(ndarray::s![vi, h, ..]);
            sum += wc * row.iter().map(|x| x * x).sum::<f64>();
        }
    }
    sum / g.n_entries() as f64
}

/// Per-variable-per-level normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    /// `[V_u][Z]` upper means and `[V_s]` surface means.
    pub upper_mean: Array2<f64>,
    pub upper_std: Array2<f64>,
    pub surface_mean: Array1<f64>,
    pub surface_std: Array1<f64>,
    /// Residual scale sigma, fit on train residuals; 1 until fit.
    pub upper_residual_std: Array2<f64>,
    pub surface_residual_std: Array1<f64>,
}

impl NormStats {
    pub fn unit(grid: &GridSpec) -> Self {
        NormStats {
            upper_mean: Array2::zeros((grid.n_upper(), grid.n_levels)),
            upper_std: Array2::ones((grid.n_upper(), grid.n_levels)),
            surface_mean: Array1::zeros(grid.n_surface()),
            surface_std: Array1::ones(grid.n_surface()),
            upper_residual_std: Array2::ones((grid.n_upper(), grid.n_levels)),
            surface_residual_std: Array1::ones(grid.n_surface()),
        }
    }

    /// Fit mean/std from a set of states (training period only).
    pub fn fit(states: &[&StateTensor]) -> Self {
        assert!(!states.is_empty());
        let g = states[0].grid.clone();
        let mut stats = NormStats::unit(&g);
        let n = (states.len() * g.n_lat * g.n_lon) as f64;
        for vi in 0..g.n_upper() {
            for z in 0..g.n_levels {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for st in states {
                    for x in st.upper.slice(ndarray::s![vi, z, .., ..]).iter() {
                        s += x;
                        s2 += x * x;
                    }
                }
                let m = s / n;
                stats.upper_mean[[vi, z]] = m;
                stats.upper_std[[vi, z]] = (s2 / n - m * m).max(1e-24).sqrt();
            }
        }
        for vi in 0..g.n_surface() {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for st in states {
                for x in st.surface.slice(ndarray::s![vi, .., ..]).iter() {
                    s += x;
                    s2 += x * x;
                }
            }
            let m = s / n;
            stats.surface_mean[vi] = m;
            stats.surface_std[vi] = (s2 / n - m * m).max(1e-24).sqrt();
        }
        stats
    }

    pub fn check(&self) -> Result<(), GridError> {
        for ((vi, z), s) in self.upper_std.indexed_iter() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(GridError::ZeroStd(format!("upper[{vi}]"), z));
            }
        }
        for (vi, s) in self.surface_std.indexed_iter() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(GridError::ZeroStd(format!("surface[{vi}]"), 0));
            }
        }
        Ok(())
    }
}

/// `(x - mean) / std`, per variable and level.
pub fn normalize(x: &StateTensor, stats: &NormStats) -> StateTensor {
    let mut out = x.clone();
    let g = &x.grid;
    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            let m = stats.upper_mean[[vi, z]];
            let s = stats.upper_std[[vi, z]];
            out.upper
                .slice_mut(ndarray::s![vi, z, .., ..])
                .mapv_inplace(|v| (v - m) / s);
        }
    }
    for vi in 0..g.n_surface() {
        let m = stats.surface_mean[vi];
        let s = stats.surface_std[vi];
        out.surface
            .slice_mut(ndarray::s![vi, .., ..])
            .mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &StateTensor, stats: &NormStats) -> StateTensor {
    let mut out = x.clone();
    let g = &x.grid;
    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            let m = stats.upper_mean[[vi, z]];
            let s = stats.upper_std[[vi, z]];
            out.upper
                .slice_mut(ndarray::s![vi, z, .., ..])
                .mapv_inplace(|v| v * s + m);
        }
    }
    for vi in 0..g.n_surface() {
        let m = stats.surface_mean[vi];
        let s = stats.surface_std[vi];
        out.surface
            .slice_mut(ndarray::s![vi, .., ..])
            .mapv_inplace(|v| v * s + m);
    }
    out
}

/// Scale a residual-unit state by sigma (or its inverse), per variable/level.
pub fn apply_residual_sigma(x: &StateTensor, stats: &NormStats, invert: bool) -> StateTensor {
    let mut out = x.clone();
    let g = &x.grid;
    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            let s = stats.upper_residual_std[[vi, z]];
            let f = if invert { 1.0 / s } else { s };
            out.upper
                .slice_mut(ndarray::s![vi, z, .., ..])
                .mapv_inplace(|v| v * f);
        }
    }
    for vi in 0..g.n_surface() {
        let s = stats.surface_residual_std[vi];
        let f = if invert { 1.0 / s } else { s };
        out.surface
            .slice_mut(ndarray::s![vi, .., ..])
            .mapv_inplace(|v| v * f);
    }
    out
}
