//! Windowed-attention U-Net forecaster over `[Z, H, W, C]` token grids.
//!
//! One architecture backs both the deterministic forecaster and the residual
//! denoiser; they differ only in input channel count and whether a diffusion
//! timestep is fed to the conditioning vector. Blocks follow the DiT adaptive
//! LayerNorm recipe: every sub-layer computes `x + alpha(c) * F(LN(x) * (1 +
//! gamma(c)) + beta(c))` with all modulation heads zero-initialized, so the
//! network is the identity map around the embedding at init.
//!
//! Vertical structure comes in three flavors:
//! * `Cla` — 2-d windows within each level plus a cross-level attention
//!   sub-layer over columns (parameters independent of Z);
//! * `Local3d` — 3-d windows spanning `window.0` levels;
//! * `Stacked2d` — levels folded into channels, a single 2-d token plane.
//!
//! Longitude is cyclic (shifted windows roll, no mask); latitude and level
//! shifts use Swin-style additive masks. The optional positional bias is a
//! learned relative-position table additionally indexed by the window's
//! latitude row.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grid::{denormalize, normalize, GridSpec, NormStats, StateTensor};
use crate::params::{Binding, ParamSet};
use crate::rng::{stream, StreamKind};
use crate::tape::{Real, Tape, Tx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalMode {
    Cla,
    Local3d,
    Stacked2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Patch size in (lat, lon); no patching along levels.
    pub patch: (usize, usize),
    /// Window extent (levels, lat, lon); clamped to the token grid.
    pub window: (usize, usize, usize),
    pub vertical_mode: VerticalMode,
    pub positional_bias: bool,
    /// One down/up stage at double width when the layer budget allows.
    pub unet: bool,
    pub mlp_hidden: usize,
    pub cond_dim: usize,
    /// Number of state-sized channel groups in the input (1 for the
    /// forecaster, 2 for the denoiser: previous state + noisy residual).
    pub in_fields: usize,
    /// Feed a diffusion timestep embedding into the conditioning vector.
    pub s_cond: bool,
    /// Predict the tendency: the packed input is added back onto the network
    /// output outside of `forward` (training targets and rollout chaining
    /// apply the same shift). Only meaningful for single-field forecasters.
    #[serde(default)]
    pub delta_out: bool,
}

impl ArchConfig {
    pub fn toy_default() -> Self {
        ArchConfig {
            dim: 48,
            n_heads: 4,
            n_layers: 4,
            patch: (2, 2),
            window: (1, 4, 4),
            vertical_mode: VerticalMode::Cla,
            positional_bias: true,
            unet: true,
            mlp_hidden: 96,
            cond_dim: 48,
            in_fields: 1,
            s_cond: false,
            delta_out: false,
        }
    }

    /// Small config for paired-seed experiments and gradient checks.
    pub fn micro() -> Self {
        ArchConfig {
            dim: 16,
            n_heads: 2,
            n_layers: 2,
            patch: (2, 2),
            window: (1, 4, 4),
            vertical_mode: VerticalMode::Cla,
            positional_bias: true,
            unet: false,
            mlp_hidden: 32,
            cond_dim: 16,
            in_fields: 1,
            s_cond: false,
            delta_out: false,
        }
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(), String> {
        if self.dim % self.n_heads != 0 {
            return Err(format!("dim {} not divisible by heads {}", self.dim, self.n_heads));
        }
        if grid.n_lat % self.patch.0 != 0 || grid.n_lon % self.patch.1 != 0 {
            return Err(format!(
                "grid {}x{} not divisible by patch {:?}",
                grid.n_lat, grid.n_lon, self.patch
            ));
        }
        if self.n_layers == 0 {
            return Err("need at least one layer".into());
        }
        if self.vertical_mode == VerticalMode::Local3d && self.window.0 < 2 {
            return Err("local3d needs window.0 >= 2".into());
        }
        Ok(())
    }

    /// Channels per input field group.
    pub fn field_channels(&self, grid: &GridSpec) -> usize {
        grid.n_upper() + grid.n_surface()
    }
}

/// Which layers run at the downsampled stage: one contiguous middle span
/// when the U-Net is on and there are at least 4 layers.
pub fn stage_plan(cfg: &ArchConfig) -> Vec<bool> {
    let n = cfg.n_layers;
    if !cfg.unet || n < 4 {
        return vec![false; n];
    }
    let n1 = n / 4;
    let n2 = n / 2;
    (0..n)
        .map(|i| i >= n1 && i < n1 + n2)
        .collect()
}

/// Token-grid geometry for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub zp: usize,
    pub hp: usize,
    pub wp: usize,
    /// Channel multiplier (2 inside the downsampled stage).
    pub mult: usize,
    /// Effective window, clamped to the token grid.
    pub win: (usize, usize, usize),
}

pub fn block_geom(cfg: &ArchConfig, grid: &GridSpec, low: bool) -> Geom {
    let zp = match cfg.vertical_mode {
        VerticalMode::Stacked2d => 1,
        _ => grid.n_levels,
    };
    let mut hp = grid.n_lat / cfg.patch.0;
    let mut wp = grid.n_lon / cfg.patch.1;
    let mult = if low { 2 } else { 1 };
    if low {
        hp /= 2;
        wp /= 2;
    }
    let zw = match cfg.vertical_mode {
        VerticalMode::Local3d => cfg.window.0.min(zp),
        _ => 1,
    };
    Geom {
        zp,
        hp,
        wp,
        mult,
        win: (zw, cfg.window.1.min(hp), cfg.window.2.min(wp)),
    }
}

/// Width of the relative-position table for a window.
fn n_rel(win: (usize, usize, usize)) -> usize {
    (2 * win.0 - 1) * (2 * win.1 - 1) * (2 * win.2 - 1)
}

/// Embedded channel width (stacked2d folds levels into the channels).
fn effective_dim(cfg: &ArchConfig, grid: &GridSpec) -> usize {
    match cfg.vertical_mode {
        VerticalMode::Stacked2d => cfg.dim * grid.n_levels,
        _ => cfg.dim,
    }
}

fn effective_hidden(cfg: &ArchConfig, grid: &GridSpec) -> usize {
    match cfg.vertical_mode {
        VerticalMode::Stacked2d => cfg.mlp_hidden * grid.n_levels,
        _ => cfg.mlp_hidden,
    }
}

/// Initialize all parameters. Weights are N(0, 0.02); biases, positional
/// tables and modulation heads start at zero; the output head uses ICNR
/// tiling so every output patch block is constant at init.
pub fn init_params(cfg: &ArchConfig, grid: &GridSpec, seed: u64) -> ParamSet<f32> {
    let mut rng = stream(seed, StreamKind::ParamInit, 0);
    let mut p = ParamSet::new();
    let d = effective_dim(cfg, grid);
    let hid = effective_hidden(cfg, grid);
    let cd = cfg.cond_dim;
    let (ph, pw) = cfg.patch;
    let vc = cfg.field_channels(grid);
    let cin = match cfg.vertical_mode {
        VerticalMode::Stacked2d => vc * cfg.in_fields * grid.n_levels,
        _ => vc * cfg.in_fields,
    };
    let vout = match cfg.vertical_mode {
        VerticalMode::Stacked2d => grid.n_upper() * grid.n_levels + grid.n_surface(),
        _ => vc,
    };

    let mut normal = |p: &mut ParamSet<f32>, name: &str, shape: &[usize], std: f64| {
        let arr = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            (rng.sample::<f64, _>(StandardNormal) * std) as f32
        });
        p.add(name, arr);
    };
    let zeros = |p: &mut ParamSet<f32>, name: &str, shape: &[usize]| {
        p.add(name, ArrayD::zeros(IxDyn(shape)));
    };

    normal(&mut p, "embed.w", &[ph * pw * cin, d], 0.02);
    zeros(&mut p, "embed.b", &[d]);

    zeros(&mut p, "cond.month", &[12, cd]);
    zeros(&mut p, "cond.hour", &[24, cd]);
    if cfg.s_cond {
        normal(&mut p, "cond.s1.w", &[16, cd], 0.02);
        zeros(&mut p, "cond.s1.b", &[cd]);
        normal(&mut p, "cond.s2.w", &[cd, cd], 0.02);
        zeros(&mut p, "cond.s2.b", &[cd]);
    }

    let plan = stage_plan(cfg);
    for (i, &low) in plan.iter().enumerate() {
        let g = block_geom(cfg, grid, low);
        let db = d * g.mult;
        let pre = format!("block{i}");
        normal(&mut p, &format!("{pre}.attn.qkv.w"), &[db, 3 * db], 0.02);
        zeros(&mut p, &format!("{pre}.attn.qkv.b"), &[3 * db]);
        normal(&mut p, &format!("{pre}.attn.proj.w"), &[db, db], 0.02);
        zeros(&mut p, &format!("{pre}.attn.proj.b"), &[db]);
        if cfg.positional_bias {
            // rows: latitude row of the window x relative offset
            let hn = g.hp / g.win.1;
            zeros(&mut p, &format!("{pre}.posbias"), &[hn * n_rel(g.win), cfg.n_heads]);
        }
        zeros(&mut p, &format!("{pre}.mod_attn.w"), &[cd, 3 * db]);
        zeros(&mut p, &format!("{pre}.mod_attn.b"), &[3 * db]);
        if cfg.vertical_mode == VerticalMode::Cla && grid.n_levels > 1 {
            normal(&mut p, &format!("{pre}.cla.attn.qkv.w"), &[db, 3 * db], 0.02);
            zeros(&mut p, &format!("{pre}.cla.attn.qkv.b"), &[3 * db]);
            normal(&mut p, &format!("{pre}.cla.attn.proj.w"), &[db, db], 0.02);
            zeros(&mut p, &format!("{pre}.cla.attn.proj.b"), &[db]);
            zeros(&mut p, &format!("{pre}.mod_cla.w"), &[cd, 3 * db]);
            zeros(&mut p, &format!("{pre}.mod_cla.b"), &[3 * db]);
        }
        let hb = hid * g.mult;
        normal(&mut p, &format!("{pre}.mlp.w1"), &[db, hb], 0.02);
        normal(&mut p, &format!("{pre}.mlp.w2"), &[db, hb], 0.02);
        normal(&mut p, &format!("{pre}.mlp.w3"), &[hb, db], 0.02);
        zeros(&mut p, &format!("{pre}.mlp.b"), &[db]);
        zeros(&mut p, &format!("{pre}.mod_mlp.w"), &[cd, 3 * db]);
        zeros(&mut p, &format!("{pre}.mod_mlp.b"), &[3 * db]);
    }

    if plan.iter().any(|l| *l) {
        normal(&mut p, "down.w", &[4 * d, 2 * d], 0.02);
        zeros(&mut p, "down.b", &[2 * d]);
        normal(&mut p, "up.w", &[2 * d, 4 * d], 0.02);
        zeros(&mut p, "up.b", &[4 * d]);
        normal(&mut p, "fuse.w", &[2 * d, d], 0.02);
        zeros(&mut p, "fuse.b", &[d]);
    }

    zeros(&mut p, "final.mod.w", &[cd, 2 * d]);
    zeros(&mut p, "final.mod.b", &[2 * d]);

    // ICNR: draw one base map [d, vout] and tile it over every patch
    // position, so the ph*pw outputs of a block are identical at init.
    let base = ArrayD::from_shape_fn(IxDyn(&[d, vout]), |_| {
        (rng.sample::<f64, _>(StandardNormal) * 0.02) as f32
    });
    let mut head = ArrayD::zeros(IxDyn(&[d, ph * pw * vout]));
    for di in 0..d {
        for pp in 0..ph * pw {
            for v in 0..vout {
                head[[di, pp * vout + v]] = base[[di, v]];
            }
        }
    }
    p.add("head.w", head);
    zeros(&mut p, "head.b", &[ph * pw * vout]);
    p
}

/// Pack states into `[Z, H, W, n_states * (V_u + V_s)]`; surface channels are
/// nonzero only at level 0.
pub fn pack_states(states: &[&StateTensor]) -> ArrayD<f64> {
    assert!(!states.is_empty());
    let g = states[0].grid.clone();
    let vc = g.n_upper() + g.n_surface();
    let c = vc * states.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[g.n_levels, g.n_lat, g.n_lon, c]));
    for (si, st) in states.iter().enumerate() {
        st.check_shapes().expect("pack_states");
        for vi in 0..g.n_upper() {
            for z in 0..g.n_levels {
                for h in 0..g.n_lat {
                    for w in 0..g.n_lon {
                        out[[z, h, w, si * vc + vi]] = st.upper[[vi, z, h, w]];
                    }
                }
            }
        }
        for vi in 0..g.n_surface() {
            for h in 0..g.n_lat {
                for w in 0..g.n_lon {
                    out[[0, h, w, si * vc + g.n_upper() + vi]] = st.surface[[vi, h, w]];
                }
            }
        }
    }
    out
}

/// Inverse of [`pack_states`] for a single model output `[Z, H, W, V_u + V_s]`.
pub fn unpack_state(arr: &ArrayD<f64>, grid: &Arc<GridSpec>, valid_time: i64) -> StateTensor {
    let g = grid;
    assert_eq!(
        arr.shape(),
        [g.n_levels, g.n_lat, g.n_lon, g.n_upper() + g.n_surface()],
        "unpack_state shape"
    );
    let mut st = StateTensor::zeros(grid.clone(), valid_time);
    for vi in 0..g.n_upper() {
        for z in 0..g.n_levels {
            for h in 0..g.n_lat {
                for w in 0..g.n_lon {
                    st.upper[[vi, z, h, w]] = arr[[z, h, w, vi]];
                }
            }
        }
    }
    for vi in 0..g.n_surface() {
        for h in 0..g.n_lat {
            for w in 0..g.n_lon {
                st.surface[[vi, h, w]] = arr[[0, h, w, g.n_upper() + vi]];
            }
        }
    }
    st
}

fn cast_arr<T: Real>(a: &ArrayD<f64>) -> ArrayD<T> {
    a.mapv(|v| T::from_f64(v).unwrap())
}

/// Swin region id along one axis (0 everywhere when unshifted or cyclic).
fn axis_regions(len: usize, win: usize, shift: usize) -> Vec<usize> {
    let mut r = vec![0usize; len];
    if shift == 0 {
        return r;
    }
    for (i, ri) in r.iter_mut().enumerate() {
        *ri = if i < len - win {
            0
        } else if i < len - shift {
            1
        } else {
            2
        };
    }
    r
}

fn roll_vec(v: &[usize], shift: usize) -> Vec<usize> {
    let n = v.len();
    (0..n).map(|i| v[(i + shift) % n]).collect()
}

/// Additive attention mask `[nw, t, t]` for a shifted window layout.
/// Longitude is cyclic and never masked.
fn window_mask<T: Real>(g: &Geom, sz: usize, sh: usize) -> Option<ArrayD<T>> {
    if sz == 0 && sh == 0 {
        return None;
    }
    let (zw, hw, ww) = g.win;
    // region ids on the rolled coordinate image
    let rz = roll_vec(&axis_regions(g.zp, zw, sz), sz);
    let rh = roll_vec(&axis_regions(g.hp, hw, sh), sh);
    let (zn, hn, wn) = (g.zp / zw, g.hp / hw, g.wp / ww);
    let nw = zn * hn * wn;
    let t = zw * hw * ww;
    let neg = T::from_f64(-1e9).unwrap();
    let mut ids = vec![0usize; nw * t];
    for zi in 0..zn {
        for hi in 0..hn {
            for wi in 0..wn {
                let win = (zi * hn + hi) * wn + wi;
                for a in 0..t {
                    let az = a / (hw * ww);
                    let ah = (a / ww) % hw;
                    ids[win * t + a] = rz[zi * zw + az] * 3 + rh[hi * hw + ah];
                }
            }
        }
    }
    let mut m = ArrayD::<T>::zeros(IxDyn(&[nw, t, t]));
    for win in 0..nw {
        for a in 0..t {
            for b in 0..t {
                if ids[win * t + a] != ids[win * t + b] {
                    m[[win, a, b]] = neg;
                }
            }
        }
    }
    Some(m)
}

/// Index vector into the per-block positional table: row = latitude-window
/// index * n_rel + relative offset of the token pair.
fn posbias_index(g: &Geom) -> Arc<Vec<usize>> {
    let (zw, hw, ww) = g.win;
    let (zn, hn, wn) = (g.zp / zw, g.hp / hw, g.wp / ww);
    let t = zw * hw * ww;
    let nr = n_rel(g.win);
    let mut idx = Vec::with_capacity(zn * hn * wn * t * t);
    let coord = |a: usize| (a / (hw * ww), (a / ww) % hw, a % ww);
    for _zi in 0..zn {
        for hi in 0..hn {
            for _wi in 0..wn {
                for a in 0..t {
                    let (az, ah, aw) = coord(a);
                    for b in 0..t {
                        let (bz, bh, bw) = coord(b);
                        let dz = az + zw - 1 - bz;
                        let dh = ah + hw - 1 - bh;
                        let dw = aw + ww - 1 - bw;
                        let rel = (dz * (2 * hw - 1) + dh) * (2 * ww - 1) + dw;
                        idx.push(hi * nr + rel);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

fn multihead_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Tx,
    k: Tx,
    v: Tx,
    heads: usize,
    bias: Option<Tx>,  // [B, t, t] added after head split as [B, 1->h, t, t]
) -> Tx {
    // q,k,v: [B, t, d]
    let shape = tape.value(q).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(d % heads, 0, "attention dim not divisible by heads");
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, x: Tx| {
        let x = tape.reshape(x, &[b, t, heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[b * heads, t, dh])
    };
    let qs = split(tape, q);
    let qs = tape.scale(qs, T::from_f64(1.0 / (dh as f64).sqrt()).unwrap());
    let ks = split(tape, k);
    let vs = split(tape, v);
    let kt = tape.permute(ks, &[0, 2, 1]);
    let mut logits = tape.bmm(qs, kt); // [b*h, t, t]
    if let Some(m) = bias {
        let l4 = tape.reshape(logits, &[b, heads, t, t]);
        let m4 = tape.reshape(m, &[b, 1, t, t]);
        let l4 = tape.add_b(l4, m4);
        logits = tape.reshape(l4, &[b * heads, t, t]);
    }
    let attn = tape.softmax_last(logits);
    let out = tape.bmm(attn, vs); // [b*h, t, dh]
    let out = tape.reshape(out, &[b, heads, t, dh]);
    let out = tape.permute(out, &[0, 2, 1, 3]);
    tape.reshape(out, &[b, t, d])
}

struct ForwardCtx<'a, T: Real> {
    cfg: &'a ArchConfig,
    b: &'a Binding,
    cond: Tx, // [1, cond_dim]
    _t: std::marker::PhantomData<T>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    /// `x + alpha * f(LN(x) * (1 + gamma) + beta)` over `[N, db]` tokens.
    fn modulated<F>(&self, tape: &mut Tape<T>, x: Tx, mod_name: &str, db: usize, f: F) -> Tx
    where
        F: FnOnce(&mut Tape<T>, Tx) -> Tx,
    {
        let m = tape.linear(
            self.cond,
            self.b.tx(&format!("{mod_name}.w")),
            Some(self.b.tx(&format!("{mod_name}.b"))),
        ); // [1, 3db]
        let gamma = tape.slice_ax(m, 1, 0, db);
        let beta = tape.slice_ax(m, 1, db, 2 * db);
        let alpha = tape.slice_ax(m, 1, 2 * db, 3 * db);
        let ones = tape.constant(ArrayD::from_elem(IxDyn(&[1, db]), T::one()));
        let g1 = tape.add(gamma, ones);
        let ln = tape.layernorm_last(x, T::from_f64(1e-5).unwrap());
        let y = tape.mul_b(ln, g1);
        let y = tape.add_b(y, beta);
        let fy = f(tape, y);
        let gated = tape.mul_b(fy, alpha);
        tape.add(x, gated)
    }

    /// Windowed self-attention over a `[Zp, Hp, Wp, db]` token grid given as
    /// flat `[N, db]`; `shifted` rolls by half a window with Swin masks.
    fn window_attn(
        &self,
        tape: &mut Tape<T>,
        x: Tx,
        geom: &Geom,
        prefix: &str,
        shifted: bool,
    ) -> Tx {
        let db = *tape.value(x).shape().last().unwrap();
        let (zw, hw, ww) = geom.win;
        let (zp, hp, wp) = (geom.zp, geom.hp, geom.wp);
        let x = tape.reshape(x, &[zp, hp, wp, db]);
        let (sz, sh, sw) = if shifted {
            (
                if zw > 1 { zw / 2 } else { 0 },
                if hw > 1 { hw / 2 } else { 0 },
                if ww > 1 { ww / 2 } else { 0 },
            )
        } else {
            (0, 0, 0)
        };
        let mut xr = x;
        if sz > 0 {
            xr = tape.roll(xr, 0, sz as isize);
        }
        if sh > 0 {
            xr = tape.roll(xr, 1, sh as isize);
        }
        if sw > 0 {
            xr = tape.roll(xr, 2, sw as isize);
        }
        let (zn, hn, wn) = (zp / zw, hp / hw, wp / ww);
        let nw = zn * hn * wn;
        let t = zw * hw * ww;
        let xp = tape.reshape(xr, &[zn, zw, hn, hw, wn, ww, db]);
        let xp = tape.permute(xp, &[0, 2, 4, 1, 3, 5, 6]);
        let xp = tape.reshape(xp, &[nw, t, db]);

        let qkv = tape.linear(
            xp,
            self.b.tx(&format!("{prefix}.qkv.w")),
            Some(self.b.tx(&format!("{prefix}.qkv.b"))),
        );
        let q = tape.slice_ax(qkv, 2, 0, db);
        let k = tape.slice_ax(qkv, 2, db, 2 * db);
        let v = tape.slice_ax(qkv, 2, 2 * db, 3 * db);

        // combined additive term: positional bias plus shift mask
        let blk = prefix.trim_end_matches(".attn");
        let mut bias_tx: Option<Tx> = None;
        if self.cfg.positional_bias {
            let idx = posbias_index(geom);
            let table = self.b.tx(&format!("{blk}.posbias"));
            let g = tape.gather0(table, idx); // [nw*t*t, heads]
            let g = tape.reshape(g, &[nw, t, t, self.cfg.n_heads]);
            let g = tape.permute(g, &[0, 3, 1, 2]); // [nw, heads, t, t]
            bias_tx = Some(g);
        }
        let mask = window_mask::<T>(geom, sz, sh).map(|m| tape.constant(m));
        let combined = match (bias_tx, mask) {
            (Some(bt), Some(mt)) => {
                let m4 = tape.reshape(mt, &[nw, 1, t, t]);
                Some(tape.add_b(bt, m4))
            }
            (Some(bt), None) => Some(bt),
            (None, Some(mt)) => Some(tape.reshape(mt, &[nw, 1, t, t])),
            (None, None) => None,
        };

        // inline multihead with a per-window [nw, h|1, t, t] additive term
        let heads = self.cfg.n_heads;
        let dh = db / heads;
        assert_eq!(db % heads, 0, "attention dim not divisible by heads");
        let split = |tape: &mut Tape<T>, x: Tx| {
            let x = tape.reshape(x, &[nw, t, heads, dh]);
            let x = tape.permute(x, &[0, 2, 1, 3]);
            tape.reshape(x, &[nw * heads, t, dh])
        };
        let qs = split(tape, q);
        let qs = tape.scale(qs, T::from_f64(1.0 / (dh as f64).sqrt()).unwrap());
        let ks = split(tape, k);
        let vs = split(tape, v);
        let kt = tape.permute(ks, &[0, 2, 1]);
        let mut logits = tape.bmm(qs, kt);
        if let Some(add) = combined {
            let l4 = tape.reshape(logits, &[nw, heads, t, t]);
            let l4 = tape.add_b(l4, add);
            logits = tape.reshape(l4, &[nw * heads, t, t]);
        }
        let attn = tape.softmax_last(logits);
        let out = tape.bmm(attn, vs);
        let out = tape.reshape(out, &[nw, heads, t, dh]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[nw, t, db]);

        let out = tape.linear(
            out,
            self.b.tx(&format!("{prefix}.proj.w")),
            Some(self.b.tx(&format!("{prefix}.proj.b"))),
        );

        // un-partition and un-shift
        let out = tape.reshape(out, &[zn, hn, wn, zw, hw, ww, db]);
        let out = tape.permute(out, &[0, 3, 1, 4, 2, 5, 6]);
        let mut out = tape.reshape(out, &[zp, hp, wp, db]);
        if sw > 0 {
            out = tape.roll(out, 2, -(sw as isize));
        }
        if sh > 0 {
            out = tape.roll(out, 1, -(sh as isize));
        }
        if sz > 0 {
            out = tape.roll(out, 0, -(sz as isize));
        }
        tape.reshape(out, &[zp * hp * wp, db])
    }

    /// Cross-level attention: every column attends over its levels. No
    /// positional bias, so parameters do not depend on Z.
    fn cla(&self, tape: &mut Tape<T>, x: Tx, geom: &Geom, prefix: &str) -> Tx {
        let db = *tape.value(x).shape().last().unwrap();
        let (zp, hp, wp) = (geom.zp, geom.hp, geom.wp);
        let x = tape.reshape(x, &[zp, hp, wp, db]);
        let xc = tape.permute(x, &[1, 2, 0, 3]);
        let xc = tape.reshape(xc, &[hp * wp, zp, db]);
        let qkv = tape.linear(
            xc,
            self.b.tx(&format!("{prefix}.qkv.w")),
            Some(self.b.tx(&format!("{prefix}.qkv.b"))),
        );
        let q = tape.slice_ax(qkv, 2, 0, db);
        let k = tape.slice_ax(qkv, 2, db, 2 * db);
        let v = tape.slice_ax(qkv, 2, 2 * db, 3 * db);
        let out = multihead_attention(tape, q, k, v, self.cfg.n_heads, None);
        let out = tape.linear(
            out,
            self.b.tx(&format!("{prefix}.proj.w")),
            Some(self.b.tx(&format!("{prefix}.proj.b"))),
        );
        let out = tape.reshape(out, &[hp, wp, zp, db]);
        let out = tape.permute(out, &[2, 0, 1, 3]);
        tape.reshape(out, &[zp * hp * wp, db])
    }

    /// SwiGLU MLP over `[N, db]`.
    fn mlp(&self, tape: &mut Tape<T>, x: Tx, prefix: &str) -> Tx {
        let a = tape.linear(x, self.b.tx(&format!("{prefix}.w1")), None);
        let gsrc = tape.linear(x, self.b.tx(&format!("{prefix}.w2")), None);
        let g = tape.silu(gsrc);
        let h = tape.mul(a, g);
        tape.linear(
            h,
            self.b.tx(&format!("{prefix}.w3")),
            Some(self.b.tx(&format!("{prefix}.b"))),
        )
    }
}

/// Sinusoidal features of the diffusion time `s` in (0, 1).
pub fn s_features<T: Real>(s: f64) -> ArrayD<T> {
    let mut v = Vec::with_capacity(16);
    for k in 0..8 {
        let f = (2.0f64.powi(k) * std::f64::consts::PI * s).sin();
        let g = (2.0f64.powi(k) * std::f64::consts::PI * s).cos();
        v.push(T::from_f64(f).unwrap());
        v.push(T::from_f64(g).unwrap());
    }
    ArrayD::from_shape_vec(IxDyn(&[1, 16]), v).unwrap()
}

/// Full forward pass. `input` is a tape node shaped
/// `[Z, H, W, in_fields * (V_u + V_s)]`; the result is `[Z, H, W, V_u + V_s]`
/// (normalized units; surface channels meaningful at level 0 only).
pub fn forward<T: Real>(
    cfg: &ArchConfig,
    grid: &GridSpec,
    tape: &mut Tape<T>,
    b: &Binding,
    input: Tx,
    valid_time: i64,
    s: Option<f64>,
) -> Tx {
    cfg.validate(grid).expect("invalid architecture");
    assert_eq!(cfg.s_cond, s.is_some(), "s conditioning mismatch");
    let d = effective_dim(cfg, grid);
    let (ph, pw) = cfg.patch;
    let (z, hh, ww_) = (grid.n_levels, grid.n_lat, grid.n_lon);
    let vc = cfg.field_channels(grid);
    let cin_raw = vc * cfg.in_fields;
    assert_eq!(
        tape.value(input).shape(),
        [z, hh, ww_, cin_raw],
        "forward: bad input shape"
    );

    // conditioning vector [1, cd]
    let hours = valid_time * grid.lead_time_hours as i64;
    let month = ((hours.rem_euclid(24 * 360)) / (24 * 30)) as usize;
    let hour = hours.rem_euclid(24) as usize;
    let mtab = b.tx("cond.month");
    let htab = b.tx("cond.hour");
    let mvec = tape.gather0(mtab, Arc::new(vec![month]));
    let hvec = tape.gather0(htab, Arc::new(vec![hour]));
    let mut cond = tape.add(mvec, hvec);
    if let Some(sv) = s {
        let feats = tape.constant(s_features::<T>(sv));
        let h1 = tape.linear(feats, b.tx("cond.s1.w"), Some(b.tx("cond.s1.b")));
        let h1 = tape.silu(h1);
        let h2 = tape.linear(h1, b.tx("cond.s2.w"), Some(b.tx("cond.s2.b")));
        cond = tape.add(cond, h2);
    }

    // fold levels for stacked2d: [Z,H,W,C] -> [1,H,W,Z*C]
    let (zp0, cin) = match cfg.vertical_mode {
        VerticalMode::Stacked2d => (1, cin_raw * z),
        _ => (z, cin_raw),
    };
    let mut x = input;
    if cfg.vertical_mode == VerticalMode::Stacked2d {
        let t1 = tape.permute(x, &[1, 2, 0, 3]);
        x = tape.reshape(t1, &[1, hh, ww_, cin]);
    }

    // patch embed
    let (hp0, wp0) = (hh / ph, ww_ / pw);
    let x = tape.reshape(x, &[zp0, hp0, ph, wp0, pw, cin]);
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5]);
    let x = tape.reshape(x, &[zp0 * hp0 * wp0, ph * pw * cin]);
    let mut x = tape.linear(x, b.tx("embed.w"), Some(b.tx("embed.b")));

    let ctx = ForwardCtx::<T> {
        cfg,
        b,
        cond,
        _t: std::marker::PhantomData,
    };

    let plan = stage_plan(cfg);
    let mut skip: Option<Tx> = None;
    let mut prev_low = false;
    for (i, &low) in plan.iter().enumerate() {
        let geom = block_geom(cfg, grid, low);
        let db = d * geom.mult;
        if low && !prev_low {
            // downsample: [Zp,Hp,Wp,d] -> merge 2x2 -> [Zp,Hp/2,Wp/2,2d]
            skip = Some(x);
            let gfull = block_geom(cfg, grid, false);
            let xx = tape.reshape(x, &[gfull.zp, gfull.hp / 2, 2, gfull.wp / 2, 2, d]);
            let xx = tape.permute(xx, &[0, 1, 3, 2, 4, 5]);
            let xx = tape.reshape(xx, &[gfull.zp * (gfull.hp / 2) * (gfull.wp / 2), 4 * d]);
            x = tape.linear(xx, b.tx("down.w"), Some(b.tx("down.b")));
        } else if !low && prev_low {
            // upsample + skip fuse
            let gfull = block_geom(cfg, grid, false);
            let up = tape.linear(x, b.tx("up.w"), Some(b.tx("up.b"))); // [N_low, 4d]
            let up = tape.reshape(up, &[gfull.zp, gfull.hp / 2, gfull.wp / 2, 2, 2, d]);
            let up = tape.permute(up, &[0, 1, 3, 2, 4, 5]);
            let up = tape.reshape(up, &[gfull.zp * gfull.hp * gfull.wp, d]);
            let cat = tape.concat(1, &[up, skip.take().expect("missing skip")]);
            x = tape.linear(cat, b.tx("fuse.w"), Some(b.tx("fuse.b")));
        }
        prev_low = low;

        let pre = format!("block{i}");
        let shifted = i % 2 == 1;
        x = ctx.modulated(tape, x, &format!("{pre}.mod_attn"), db, |t, y| {
            ctx.window_attn(t, y, &geom, &format!("{pre}.attn"), shifted)
        });
        if cfg.vertical_mode == VerticalMode::Cla && grid.n_levels > 1 {
            x = ctx.modulated(tape, x, &format!("{pre}.mod_cla"), db, |t, y| {
                ctx.cla(t, y, &geom, &format!("{pre}.cla.attn"))
            });
        }
        x = ctx.modulated(tape, x, &format!("{pre}.mod_mlp"), db, |t, y| {
            ctx.mlp(t, y, &format!("{pre}.mlp"))
        });
    }
    if prev_low {
        // plan ended inside the low stage: bring tokens back up
        let gfull = block_geom(cfg, grid, false);
        let up = tape.linear(x, b.tx("up.w"), Some(b.tx("up.b")));
        let up = tape.reshape(up, &[gfull.zp, gfull.hp / 2, gfull.wp / 2, 2, 2, d]);
        let up = tape.permute(up, &[0, 1, 3, 2, 4, 5]);
        let up = tape.reshape(up, &[gfull.zp * gfull.hp * gfull.wp, d]);
        let cat = tape.concat(1, &[up, skip.take().expect("missing skip")]);
        x = tape.linear(cat, b.tx("fuse.w"), Some(b.tx("fuse.b")));
    }

    // final modulated LN (gamma/beta only) + ICNR head + pixel shuffle
    let m = tape.linear(ctx.cond, b.tx("final.mod.w"), Some(b.tx("final.mod.b")));
    let gamma = tape.slice_ax(m, 1, 0, d);
    let beta = tape.slice_ax(m, 1, d, 2 * d);
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[1, d]), T::one()));
    let g1 = tape.add(gamma, ones);
    let ln = tape.layernorm_last(x, T::from_f64(1e-5).unwrap());
    let y = tape.mul_b(ln, g1);
    let y = tape.add_b(y, beta);

    let vout = match cfg.vertical_mode {
        VerticalMode::Stacked2d => grid.n_upper() * z + grid.n_surface(),
        _ => vc,
    };
    let y = tape.linear(y, b.tx("head.w"), Some(b.tx("head.b"))); // [N, ph*pw*vout]
    let y = tape.reshape(y, &[zp0, hp0, wp0, ph, pw, vout]);
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5]);
    let y = tape.reshape(y, &[zp0, hh, ww_, vout]);

    if cfg.vertical_mode == VerticalMode::Stacked2d {
        // unfold [1,H,W, Z*Vu + Vs] back to [Z,H,W, Vu+Vs]
        let vu = grid.n_upper();
        let vs = grid.n_surface();
        let upper = tape.slice_ax(y, 3, 0, z * vu); // [1,H,W,Z*Vu]
        let upper = tape.reshape(upper, &[hh, ww_, z, vu]);
        let upper = tape.permute(upper, &[2, 0, 1, 3]); // [Z,H,W,Vu]
        if vs == 0 {
            return upper;
        }
        let surf = tape.slice_ax(y, 3, z * vu, z * vu + vs); // [1,H,W,Vs]
        // surface lives at level 0; other levels zero
        let zeros = tape.constant(ArrayD::zeros(IxDyn(&[z - 1, hh, ww_, vs])));
        let surf_full = tape.concat(0, &[surf, zeros]);
        return tape.concat(3, &[upper, surf_full]);
    }
    y
}

/// Finish a forecaster forward: tendency models add the packed input back.
pub fn apply_delta<T: Real>(cfg: &ArchConfig, tape: &mut Tape<T>, out: Tx, inp: Tx) -> Tx {
    if cfg.delta_out {
        tape.add(out, inp)
    } else {
        out
    }
}

/// Mask that zeroes surface channels at levels above 0, turning a model
/// output into a valid packed input for chained (multi-step) forwards.
pub fn output_to_input_mask<T: Real>(grid: &GridSpec) -> ArrayD<T> {
    let (z, h, w) = (grid.n_levels, grid.n_lat, grid.n_lon);
    let vc = grid.n_upper() + grid.n_surface();
    let mut m = ArrayD::from_elem(IxDyn(&[z, h, w, vc]), T::one());
    for zi in 1..z {
        for hi in 0..h {
            for wi in 0..w {
                for vi in grid.n_upper()..vc {
                    m[[zi, hi, wi, vi]] = T::zero();
                }
            }
        }
    }
    m
}

/// A trained deterministic forecaster: backbone parameters plus the
/// normalization statistics it was fit with.
#[derive(Clone)]
pub struct DeterministicModel {
    pub cfg: ArchConfig,
    pub grid: Arc<GridSpec>,
    pub params: ParamSet<f32>,
    pub stats: NormStats,
}

impl DeterministicModel {
    pub fn init(cfg: ArchConfig, grid: Arc<GridSpec>, seed: u64) -> Self {
        assert_eq!(cfg.in_fields, 1, "forecaster takes a single state");
        cfg.validate(&grid).expect("invalid architecture");
        let params = init_params(&cfg, &grid, seed);
        let stats = NormStats::unit(&grid);
        DeterministicModel {
            cfg,
            grid,
            params,
            stats,
        }
    }

    /// One-step forecast in physical units.
    pub fn predict_next(&self, x: &StateTensor) -> StateTensor {
        let xn = normalize(x, &self.stats);
        let packed = cast_arr::<f32>(&pack_states(&[&xn]));
        let mut tape = Tape::<f32>::new();
        let b = self.params.bind(&mut tape);
        let inp = tape.constant(packed);
        let out = forward(&self.cfg, &self.grid, &mut tape, &b, inp, x.valid_time, None);
        let out = apply_delta(&self.cfg, &mut tape, out, inp);
        let arr = tape.value(out).mapv(|v| v as f64);
        let st = unpack_state(&arr, &self.grid, x.valid_time + 1);
        denormalize(&st, &self.stats)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    /// Scalar count of attention parameters (window and cross-level).
    pub fn attention_param_count(&self) -> usize {
        self.params.count_matching(".attn")
    }
}

/// Mean over an ensemble of independently trained forecasters.
pub struct EnsembleMean {
    pub members: Vec<DeterministicModel>,
}

impl EnsembleMean {
    pub fn predict_next(&self, x: &StateTensor) -> StateTensor {
        assert!(!self.members.is_empty());
        let preds: Vec<StateTensor> = self.members.iter().map(|m| m.predict_next(x)).collect();
        StateTensor::mean_of(&preds)
    }
}
