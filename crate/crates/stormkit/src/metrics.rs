//! Probabilistic verification: fair ensemble scores, spread-skill, rank
//! histograms, activity and zonal spectra.
//!
//! All field-level scores aggregate per-entry values with the same
//! variable/level/latitude weights as the state norm, divided by the entry
//! count (so with unit weights they reduce to plain means). "Fair" variants
//! de-bias the finite-ensemble estimators so their expectation equals the
//! score of the underlying predictive distribution for any member count.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::grid::{weighted_norm_sq, LatWeights, StateTensor};

/// Walk every scalar entry of a set of member states plus the verifying
/// state, with the state-norm weight of the entry. `f(weight, members, obs)`.
fn for_each_entry<F: FnMut(f64, &[f64], f64)>(
    members: &[&StateTensor],
    y: &StateTensor,
    w: &LatWeights,
    mut f: F,
) {
    let g = &y.grid;
    let mut vals = vec![0.0f64; members.len()];
    for (vi, v) in g.upper_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for z in 0..g.n_levels {
            let wl = wv * w.level_weights[z];
            for h in 0..g.n_lat {
                let wc = wl * w.per_cell[h];
                for x in 0..g.n_lon {
                    for (k, m) in members.iter().enumerate() {
                        vals[k] = m.upper[[vi, z, h, x]];
                    }
                    f(wc, &vals, y.upper[[vi, z, h, x]]);
                }
            }
        }
    }
    for (vi, v) in g.surface_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for h in 0..g.n_lat {
            let wc = wv * w.per_cell[h];
            for x in 0..g.n_lon {
                for (k, m) in members.iter().enumerate() {
                    vals[k] = m.surface[[vi, h, x]];
                }
                f(wc, &vals, y.surface[[vi, h, x]]);
            }
        }
    }
}

/// State-norm RMSE of a single forecast.
pub fn rmse(f: &StateTensor, y: &StateTensor, w: &LatWeights) -> f64 {
    weighted_norm_sq(&f.sub(y), w).sqrt()
}

/// 1 - score/reference (positive when the forecast beats the reference).
pub fn skill_score(score: f64, reference: f64) -> f64 {
    1.0 - score / reference
}

/// CRPS of a scalar ensemble. The fair estimator divides the member-pair
/// term by `M (M-1)` instead of `M^2`, which removes the finite-ensemble
/// bias.
pub fn crps_ensemble(members: &[f64], y: f64, fair: bool) -> f64 {
    let m = members.len();
    assert!(m >= if fair { 2 } else { 1 }, "need enough members");
    let t1: f64 = members.iter().map(|&x| (x - y).abs()).sum::<f64>() / m as f64;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in 0..m {
            pairs += (members[i] - members[j]).abs();
        }
    }
    let denom = if fair { m * (m - 1) } else { m * m };
    t1 - pairs / (2.0 * denom as f64)
}

/// Closed-form CRPS of a Gaussian predictive distribution.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * phi - 1.0 / std::f64::consts::PI.sqrt())
}

/// Field CRPS: weighted mean of per-entry ensemble CRPS.
pub fn ens_crps(members: &[&StateTensor], y: &StateTensor, w: &LatWeights, fair: bool) -> f64 {
    let n = y.grid.n_entries() as f64;
    let mut total = 0.0;
    for_each_entry(members, y, w, |wc, vals, obs| {
        total += wc * crps_ensemble(vals, obs, fair);
    });
    total / n
}

/// Energy score with the state norm as the ground metric.
pub fn energy_score(members: &[&StateTensor], y: &StateTensor, w: &LatWeights, fair: bool) -> f64 {
    let m = members.len();
    assert!(m >= if fair { 2 } else { 1 }, "need enough members");
    let t1: f64 = members
        .iter()
        .map(|x| weighted_norm_sq(&x.sub(y), w).sqrt())
        .sum::<f64>()
        / m as f64;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            pairs += 2.0 * weighted_norm_sq(&members[i].sub(members[j]), w).sqrt();
        }
    }
    let denom = if fair { m * (m - 1) } else { m * m };
    t1 - pairs / (2.0 * denom as f64)
}

/// Fair Brier score of a scalar event forecast by `k` of `m` members, with
/// outcome `o`. The fair correction subtracts `k (m-k) / (m^2 (m-1))`.
pub fn brier_ensemble(k: usize, m: usize, o: bool, fair: bool) -> f64 {
    assert!(k <= m && m >= if fair { 2 } else { 1 });
    let p = k as f64 / m as f64;
    let ov = if o { 1.0 } else { 0.0 };
    let raw = (p - ov) * (p - ov);
    if fair {
        raw - (k * (m - k)) as f64 / ((m * m * (m - 1)) as f64)
    } else {
        raw
    }
}

/// Time-mean and per-cell quantile climatology.
#[derive(Clone, Debug)]
pub struct Climatology {
    pub mean: StateTensor,
    /// Lower/upper tail thresholds at probability `q` and `1 - q`.
    pub q_low: StateTensor,
    pub q_high: StateTensor,
    pub q: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    // nearest-rank with linear interpolation
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Fit a climatology over a sequence of states (training period only).
pub fn fit_climatology(states: &[&StateTensor], q: f64) -> Climatology {
    assert!(!states.is_empty(), "empty climatology");
    assert!(q > 0.0 && q < 0.5, "tail probability must be in (0, 0.5)");
    let g = states[0].grid.clone();
    let mut mean = StateTensor::zeros(g.clone(), 0);
    let mut q_low = StateTensor::zeros(g.clone(), 0);
    let mut q_high = StateTensor::zeros(g.clone(), 0);
    let mut buf: Vec<f64> = Vec::with_capacity(states.len());
    let t = states.len() as f64;

    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            for h in 0..g.n_lat {
                for x in 0..g.n_lon {
                    buf.clear();
                    buf.extend(states.iter().map(|s| s.upper[[vi, z, h, x]]));
                    mean.upper[[vi, z, h, x]] = buf.iter().sum::<f64>() / t;
                    buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    q_low.upper[[vi, z, h, x]] = quantile_sorted(&buf, q);
                    q_high.upper[[vi, z, h, x]] = quantile_sorted(&buf, 1.0 - q);
                }
            }
        }
    }
    for vi in 0..g.n_surface() {
        for h in 0..g.n_lat {
            for x in 0..g.n_lon {
                buf.clear();
                buf.extend(states.iter().map(|s| s.surface[[vi, h, x]]));
                mean.surface[[vi, h, x]] = buf.iter().sum::<f64>() / t;
                buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
                q_low.surface[[vi, h, x]] = quantile_sorted(&buf, q);
                q_high.surface[[vi, h, x]] = quantile_sorted(&buf, 1.0 - q);
            }
        }
    }
    Climatology {
        mean,
        q_low,
        q_high,
        q,
    }
}

/// Field Brier score for climatology-tail exceedance, averaged over the
/// upper- and lower-tail events and all entries.
pub fn ens_brier(
    members: &[&StateTensor],
    y: &StateTensor,
    clim: &Climatology,
    w: &LatWeights,
    fair: bool,
) -> f64 {
    let n = y.grid.n_entries() as f64;
    let m = members.len();
    let mut total = 0.0;
    let with_threshold = |thr: &StateTensor, upper: bool| {
        let mut acc = 0.0;
        let g = &y.grid;
        for (vi, v) in g.upper_vars.iter().enumerate() {
            let wv = w.var_weight(v);
            for z in 0..g.n_levels {
                let wl = wv * w.level_weights[z];
                for h in 0..g.n_lat {
                    let wc = wl * w.per_cell[h];
                    for x in 0..g.n_lon {
                        let t = thr.upper[[vi, z, h, x]];
                        let k = members
                            .iter()
                            .filter(|s| exceeds(s.upper[[vi, z, h, x]], t, upper))
                            .count();
                        let o = exceeds(y.upper[[vi, z, h, x]], t, upper);
                        acc += wc * brier_ensemble(k, m, o, fair);
                    }
                }
            }
        }
        for (vi, v) in g.surface_vars.iter().enumerate() {
            let wv = w.var_weight(v);
            for h in 0..g.n_lat {
                let wc = wv * w.per_cell[h];
                for x in 0..g.n_lon {
                    let t = thr.surface[[vi, h, x]];
                    let k = members
                        .iter()
                        .filter(|s| exceeds(s.surface[[vi, h, x]], t, upper))
                        .count();
                    let o = exceeds(y.surface[[vi, h, x]], t, upper);
                    acc += wc * brier_ensemble(k, m, o, fair);
                }
            }
        }
        acc / n
    };
    total += with_threshold(&clim.q_high, true);
    total += with_threshold(&clim.q_low, false);
    total / 2.0
}

fn exceeds(v: f64, thr: f64, upper: bool) -> bool {
    if upper {
        v > thr
    } else {
        v < thr
    }
}

/// Spread-skill accumulator over forecast cases at one lead time.
///
/// `ratio` applies the `sqrt((M+1)/M)` fair inflation, so a statistically
/// consistent ensemble scores 1.
#[derive(Clone, Debug, Default)]
pub struct SpreadSkill {
    sum_mse: f64,
    sum_var: f64,
    n_cases: usize,
    n_members: usize,
}

impl SpreadSkill {
    pub fn add_case(&mut self, members: &[&StateTensor], y: &StateTensor, w: &LatWeights) {
        let m = members.len();
        assert!(m >= 2, "spread needs at least 2 members");
        if self.n_cases == 0 {
            self.n_members = m;
        }
        assert_eq!(m, self.n_members, "member count changed between cases");
        let owned: Vec<StateTensor> = members.iter().map(|s| (*s).clone()).collect();
        let mean = StateTensor::mean_of(&owned);
        self.sum_mse += weighted_norm_sq(&mean.sub(y), w);
        // weighted mean of per-entry unbiased ensemble variance
        let n = y.grid.n_entries() as f64;
        let mut var_acc = 0.0;
        for_each_entry(members, y, w, |wc, vals, _| {
            let mu = vals.iter().sum::<f64>() / m as f64;
            let v = vals.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1) as f64;
            var_acc += wc * v;
        });
        self.sum_var += var_acc / n;
        self.n_cases += 1;
    }

    pub fn skill(&self) -> f64 {
        (self.sum_mse / self.n_cases as f64).sqrt()
    }

    pub fn spread(&self) -> f64 {
        (self.sum_var / self.n_cases as f64).sqrt()
    }

    pub fn ratio(&self) -> f64 {
        let m = self.n_members as f64;
        (((m + 1.0) / m) * self.sum_var / self.sum_mse).sqrt()
    }
}

/// Rank histogram with random tie-breaking. `counts` has `M + 1` bins.
#[derive(Clone, Debug)]
pub struct RankHistogram {
    pub counts: Vec<u64>,
}

impl RankHistogram {
    pub fn new(n_members: usize) -> Self {
        RankHistogram {
            counts: vec![0; n_members + 1],
        }
    }

    /// Rank of `y` among the members; ties are resolved uniformly.
    pub fn add(&mut self, members: &[f64], y: f64, rng: &mut ChaCha12Rng) {
        assert_eq!(members.len() + 1, self.counts.len());
        let below = members.iter().filter(|&&x| x < y).count();
        let equal = members.iter().filter(|&&x| x == y).count();
        let rank = below + rng.gen_range(0..=equal);
        self.counts[rank] += 1;
    }

    /// Add every entry of a field-level case.
    pub fn add_field(&mut self, members: &[&StateTensor], y: &StateTensor, rng: &mut ChaCha12Rng) {
        let w = LatWeights::unit_variables(&y.grid);
        let mut pending: Vec<(Vec<f64>, f64)> = Vec::new();
        for_each_entry(members, y, &w, |_, vals, obs| {
            pending.push((vals.to_vec(), obs));
        });
        for (vals, obs) in pending {
            self.add(&vals, obs, rng);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pearson chi-square statistic against the uniform distribution.
    pub fn chi2(&self) -> f64 {
        let n = self.total() as f64;
        let e = n / self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| {
                let d = c as f64 - e;
                d * d / e
            })
            .sum()
    }

    /// Upper-tail p-value of the chi-square uniformity test.
    pub fn p_value(&self) -> f64 {
        let dof = (self.counts.len() - 1) as f64;
        let dist = ChiSquared::new(dof).unwrap();
        1.0 - dist.cdf(self.chi2())
    }
}

/// Weighted spatial standard deviation of the climatology-removed field: the
/// "activity" of a forecast.
pub fn activity(f: &StateTensor, clim_mean: &StateTensor, w: &LatWeights) -> f64 {
    let d = f.sub(clim_mean);
    let mut mass = 0.0;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for_each_entry(&[&d], &d, w, |wc, vals, _| {
        mass += wc;
        s += wc * vals[0];
        s2 += wc * vals[0] * vals[0];
    });
    let mu = s / mass;
    (s2 / mass - mu * mu).max(0.0).sqrt()
}

/// Zonal power spectrum: squared DFT magnitude along longitude per
/// wavenumber `0..=W/2`, averaged over all rows with state-norm weights.
pub fn zonal_spectrum(a: &StateTensor, w: &LatWeights) -> Vec<f64> {
    let g = &a.grid;
    let nw = g.n_lon;
    let kmax = nw / 2;
    let mut power = vec![0.0f64; kmax + 1];
    let mut mass = 0.0f64;
    let row = |vals: &mut dyn Iterator<Item = f64>, wc: f64, power: &mut Vec<f64>| {
        let v: Vec<f64> = vals.collect();
        for (k, p) in power.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (x, &vx) in v.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * x) as f64 / nw as f64;
                re += vx * ang.cos();
                im += vx * ang.sin();
            }
            *p += wc * (re * re + im * im) / (nw * nw) as f64;
        }
    };
    for (vi, v) in g.upper_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for z in 0..g.n_levels {
            let wl = wv * w.level_weights[z];
            for h in 0..g.n_lat {
                let wc = wl * w.per_cell[h];
                mass += wc;
                row(
                    &mut a.upper.slice(ndarray::s![vi, z, h, ..]).iter().copied(),
                    wc,
                    &mut power,
                );
            }
        }
    }
    for (vi, v) in g.surface_vars.iter().enumerate() {
        let wv = w.var_weight(v);
        for h in 0..g.n_lat {
            let wc = wv * w.per_cell[h];
            mass += wc;
            row(
                &mut a.surface.slice(ndarray::s![vi, h, ..]).iter().copied(),
                wc,
                &mut power,
            );
        }
    }
    for p in power.iter_mut() {
        *p /= mass;
    }
    power
}

/// Per-wavenumber power ratio of a forecast spectrum to a reference
/// spectrum (wavenumber 0 carries the mean and is usually ignored).
pub fn spectrum_ratio(fc: &[f64], reference: &[f64]) -> Vec<f64> {
    fc.iter()
        .zip(reference)
        .map(|(&a, &b)| a / b.max(1e-300))
        .collect()
}

/// Long table of named metric values per lead time.
#[derive(Clone, Debug, Default)]
pub struct MetricTable {
    pub rows: Vec<(String, usize, f64)>,
}

impl MetricTable {
    pub fn push(&mut self, metric: &str, lead: usize, value: f64) {
        self.rows.push((metric.to_string(), lead, value));
    }

    pub fn get(&self, metric: &str, lead: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, l, _)| m == metric && *l == lead)
            .map(|&(_, _, v)| v)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "metric,lead,value")?;
        for (m, l, v) in &self.rows {
            writeln!(f, "{m},{l},{v}")?;
        }
        Ok(())
    }
}
