//! Acceptance gate: one test per criterion, each printing a single
//! machine-greppable PASS/FAIL line. Oracles are closed forms on the toy
//! system or exact structural identities; no tolerance was chosen to fit an
//! observed value.
//!
//! The end-to-end criteria (8 and 10) share one default-scale training run
//! through a `OnceLock`; with the harness's serial execution the first of
//! the two pays the cost.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use stormkit::ablation::{paired_sign, run_matrix, DetKind, MatrixSpec};
use stormkit::flow::{ddim_sample, euler_sample, train_flow, FlowConfig, Objective};
use stormkit::grid::{latitude_weights, GridSpec, StateTensor};
use stormkit::metrics::{
    activity, brier_ensemble, crps_ensemble, crps_gaussian, energy_score, ens_crps,
    fit_climatology, rmse, spectrum_ratio, zonal_spectrum, RankHistogram, SpreadSkill,
};
use stormkit::model::{
    forward, init_params, pack_states, ArchConfig, DeterministicModel, VerticalMode,
};
use stormkit::optim::grad_check;
use stormkit::params::ParamSet;
use stormkit::rng::{stream, StreamKind};
use stormkit::rollout::{rollout_det, rollout_ensemble};
use stormkit::tape::Tape;
use stormkit::toy::{
    generate, sample_forcing, step_mean, Dataset, Split, ToyDynamicsConfig,
};
use stormkit::train::{finetune_rpft, train_det, train_ensemble, TrainConfig};

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn randn(rng: &mut rand_chacha::ChaCha12Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn rand_arr(shape: &[usize], rng: &mut rand_chacha::ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.8..0.8))
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = stream(101, StreamKind::Oracle, 0);
    let mut results: Vec<(String, f64)> = Vec::new();

    // Every tape op, wrapped in `tanh(op(..) * c)` so both the values and
    // the gradient routing must be right; reduced with sum_all.
    let c234 = rand_arr(&[2, 3, 4], &mut rng);
    fn unary(
        shape: &[usize],
        op: &dyn Fn(&mut Tape<f64>, stormkit::tape::Tx) -> stormkit::tape::Tx,
        cs: &ArrayD<f64>,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> f64 {
        let mut p = ParamSet::<f64>::new();
        p.add("x", rand_arr(shape, rng));
        grad_check(
            &p,
            |t, b| {
                let y = op(t, b.tx("x"));
                let shape: Vec<usize> = t.value(y).shape().to_vec();
                let c = t.constant(ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
                    // reuse the fixed random field, cycling through it
                    let mut flat = 0usize;
                    for (d, s) in shape.iter().enumerate() {
                        flat = flat * s + ix[d];
                    }
                    cs.as_slice().unwrap()[flat % 24]
                }));
                let z = t.mul(y, c);
                let z = t.tanh(z);
                t.sum_all(z)
            },
            1e-5,
            64,
        )
    }
    type UnaryOp = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, stormkit::tape::Tx) -> stormkit::tape::Tx>);
    let unary_ops: Vec<UnaryOp> = vec![
        ("neg", vec![2, 3, 4], Box::new(|t, x| t.neg(x))),
        ("scale", vec![2, 3, 4], Box::new(|t, x| t.scale(x, 1.7))),
        ("tanh", vec![2, 3, 4], Box::new(|t, x| t.tanh(x))),
        ("sigmoid", vec![2, 3, 4], Box::new(|t, x| t.sigmoid(x))),
        ("silu", vec![2, 3, 4], Box::new(|t, x| t.silu(x))),
        ("permute", vec![2, 3, 4], Box::new(|t, x| t.permute(x, &[2, 0, 1]))),
        ("reshape", vec![2, 3, 4], Box::new(|t, x| t.reshape(x, &[4, 6]))),
        ("roll", vec![2, 3, 4], Box::new(|t, x| t.roll(x, 1, -2))),
        ("slice_ax", vec![2, 5, 2], Box::new(|t, x| t.slice_ax(x, 1, 1, 4))),
        ("softmax_last", vec![3, 4, 5], Box::new(|t, x| t.softmax_last(x))),
        ("layernorm_last", vec![3, 4, 5], Box::new(|t, x| t.layernorm_last(x, 1e-5))),
        ("gather0", vec![4, 3, 2], Box::new(|t, x| t.gather0(x, Arc::new(vec![0, 2, 2, 1, 3])))),
        ("sum_all", vec![2, 3, 4], Box::new(|t, x| {
            let s = t.sum_all(x);
            t.tanh(s)
        })),
        ("mean_all", vec![2, 3, 4], Box::new(|t, x| {
            let s = t.mean_all(x);
            t.tanh(s)
        })),
    ];
    for (name, shape, op) in &unary_ops {
        results.push((name.to_string(), unary(shape, op.as_ref(), &c234, &mut rng)));
    }

    fn binary(
        sa: &[usize],
        sb: &[usize],
        op: &dyn Fn(&mut Tape<f64>, stormkit::tape::Tx, stormkit::tape::Tx) -> stormkit::tape::Tx,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> f64 {
        let mut p = ParamSet::<f64>::new();
        p.add("a", rand_arr(sa, rng));
        p.add("b", rand_arr(sb, rng));
        grad_check(
            &p,
            |t, bd| {
                let y = op(t, bd.tx("a"), bd.tx("b"));
                let z = t.tanh(y);
                t.sum_all(z)
            },
            1e-5,
            64,
        )
    }
    type BinaryOp = (&'static str, Vec<usize>, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, stormkit::tape::Tx, stormkit::tape::Tx) -> stormkit::tape::Tx>);
    let binary_ops: Vec<BinaryOp> = vec![
        ("add", vec![2, 3, 4], vec![2, 3, 4], Box::new(|t, a, b| t.add(a, b))),
        ("sub", vec![2, 3, 4], vec![2, 3, 4], Box::new(|t, a, b| t.sub(a, b))),
        ("mul", vec![2, 3, 4], vec![2, 3, 4], Box::new(|t, a, b| t.mul(a, b))),
        ("add_b", vec![6, 4], vec![1, 4], Box::new(|t, a, b| t.add_b(a, b))),
        ("mul_b", vec![6, 4], vec![1, 4], Box::new(|t, a, b| t.mul_b(a, b))),
        ("bmm", vec![2, 3, 4], vec![2, 4, 5], Box::new(|t, a, b| t.bmm(a, b))),
        ("concat", vec![2, 3], vec![2, 2], Box::new(|t, a, b| t.concat(1, &[a, b]))),
    ];
    for (name, sa, sb, op) in &binary_ops {
        results.push((name.to_string(), binary(sa, sb, op.as_ref(), &mut rng)));
    }

    // linear with bias
    {
        let mut p = ParamSet::<f64>::new();
        p.add("x", rand_arr(&[5, 3], &mut rng));
        p.add("w", rand_arr(&[3, 4], &mut rng));
        p.add("b", rand_arr(&[4], &mut rng));
        let w = grad_check(
            &p,
            |t, bd| {
                let y = t.linear(bd.tx("x"), bd.tx("w"), Some(bd.tx("b")));
                let z = t.tanh(y);
                t.sum_all(z)
            },
            1e-5,
            64,
        );
        results.push(("linear".to_string(), w));
    }

    // full attention block at d = 16 (micro config): window attention,
    // cross-level attention, modulation, MLP, patch embed and ICNR head.
    {
        let grid = Arc::new(
            GridSpec::new(4, 8, 2, vec!["temp".into()], vec!["t2m".into()]).unwrap(),
        );
        let cfg = ArchConfig::micro(); // dim 16, 2 layers (one shifted)
        let mut params = init_params(&cfg, &grid, 9).cast::<f64>();
        for (_, v) in params.iter_mut() {
            v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05));
        }
        let mut st = StateTensor::zeros(grid.clone(), 3);
        st.upper.mapv_inplace(|_| randn(&mut rng) * 0.5);
        st.surface.mapv_inplace(|_| randn(&mut rng) * 0.5);
        let packed = pack_states(&[&st]);
        let tgt = rand_arr(&[2, 4, 8, 2], &mut rng);
        let g2 = grid.clone();
        let w = grad_check(
            &params,
            move |t, b| {
                let inp = t.constant(packed.clone());
                let out = forward(&cfg, &g2, t, b, inp, 3, None);
                let tg = t.constant(tgt.clone());
                let d = t.sub(out, tg);
                let d2 = t.mul(d, d);
                t.mean_all(d2)
            },
            1e-4,
            2,
        );
        results.push(("archnet_block_d16".to_string(), w));
    }

    let (worst_op, worst_all) = results
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(n, v)| (n.clone(), *v))
        .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        worst_all < 1e-5 && secs < 120.0,
        &format!("max rel err {worst_all:.2e} (worst op: {worst_op}), {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_cla_parameter_law() {
    let grid_z = |z: usize| -> Arc<GridSpec> {
        Arc::new(
            GridSpec::new(
                8,
                16,
                z,
                vec!["temp".into(), "wind".into()],
                vec!["t2m".into(), "msl".into()],
            )
            .unwrap(),
        )
    };
    let count = |mode: VerticalMode, z: usize| {
        let mut cfg = ArchConfig::micro();
        cfg.vertical_mode = mode;
        DeterministicModel::init(cfg, grid_z(z), 1).attention_param_count()
    };

    let cla: Vec<usize> = [2, 4, 8].iter().map(|&z| count(VerticalMode::Cla, z)).collect();
    let cla_ok = cla[0] == cla[1] && cla[1] == cla[2];

    // stacked2d folds levels into channels: attention params scale as d^2 Z^2
    let st: Vec<f64> = [2usize, 4, 8]
        .iter()
        .map(|&z| count(VerticalMode::Stacked2d, z) as f64)
        .collect();
    let r42 = st[1] / st[0];
    let r84 = st[2] / st[1];
    let st_ok = (r42 - 4.0).abs() <= 0.05 * 4.0 && (r84 - 4.0).abs() <= 0.05 * 4.0;

    verdict(
        2,
        cla_ok && st_ok,
        &format!(
            "cla counts {:?}; stacked2d ratios {:.3}/{:.3} vs 4 (d²Z² law)",
            cla, r42, r84
        ),
    );
}

// ---------------------------------------------------------------- 3

/// Max |d out[z]/d in[level 0, channel 0]| for every output level.
fn level0_jacobian(mode: VerticalMode) -> Vec<f64> {
    let grid = GridSpec::toy_micro();
    let mut cfg = ArchConfig::micro();
    cfg.n_layers = 1; // a single unshifted block
    cfg.vertical_mode = mode;
    if mode == VerticalMode::Local3d {
        cfg.window.0 = 2;
    }
    let mut rng = stream(31, StreamKind::Oracle, 0);
    let mut params = init_params(&cfg, &grid, 7).cast::<f64>();
    for (_, v) in params.iter_mut() {
        v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05));
    }
    let mut st = StateTensor::zeros(grid.clone(), 2);
    st.upper.mapv_inplace(|_| randn(&mut rng) * 0.5);
    st.surface.mapv_inplace(|_| randn(&mut rng) * 0.5);
    let packed = pack_states(&[&st]);

    let mut out = Vec::new();
    for z in 0..grid.n_levels {
        let mut tape = Tape::<f64>::new();
        let b = params.bind(&mut tape);
        let x = tape.leaf(packed.clone());
        let y = forward(&cfg, &grid, &mut tape, &b, x, 2, None);
        let sl = tape.slice_ax(y, 0, z, z + 1);
        let root = tape.sum_all(sl);
        let grads = tape.backward(root);
        let g = grads.get(x).expect("input gradient missing");
        // level-0 slab, channel 0 (first upper-air variable)
        let mut m = 0.0f64;
        for h in 0..grid.n_lat {
            for w in 0..grid.n_lon {
                m = m.max(g[[0, h, w, 0]].abs());
            }
        }
        out.push(m);
    }
    out
}

#[test]
fn criterion_03_receptive_field() {
    let cla = level0_jacobian(VerticalMode::Cla);
    let loc = level0_jacobian(VerticalMode::Local3d);
    let cla_ok = cla.iter().all(|&g| g > 0.0);
    // window 2 along levels, unshifted: levels 0-1 see level 0, 2-3 do not
    let loc_ok = loc[0] > 0.0 && loc[1] > 0.0 && loc[2] == 0.0 && loc[3] == 0.0;
    let fmt = |v: &[f64]| -> String {
        v.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>().join(",")
    };
    verdict(
        3,
        cla_ok && loc_ok,
        &format!("cla jac [{}], local3d jac [{}]", fmt(&cla), fmt(&loc)),
    );
}

// ---------------------------------------------------------------- 4

fn head_output_at_init(cfg: &ArchConfig, grid: &Arc<GridSpec>, seed: u64) -> ArrayD<f64> {
    let params = init_params(cfg, grid, seed).cast::<f64>();
    let mut rng = stream(seed, StreamKind::Oracle, 4);
    let mut st = StateTensor::zeros(grid.clone(), 1);
    st.upper.mapv_inplace(|_| randn(&mut rng) * 0.7);
    st.surface.mapv_inplace(|_| randn(&mut rng) * 0.7);
    let mut tape = Tape::<f64>::new();
    let b = params.bind(&mut tape);
    let x = tape.constant(pack_states(&[&st]));
    let y = forward(cfg, grid, &mut tape, &b, x, 1, None);
    tape.value(y).clone()
}

#[test]
fn criterion_04_icnr_constant_blocks() {
    let mut max_var = 0.0f64;
    for (cfg, grid) in [
        (ArchConfig::micro(), GridSpec::toy_micro()),
        (ArchConfig::toy_default(), GridSpec::toy_default()),
    ] {
        let out = head_output_at_init(&cfg, &grid, 13);
        let (ph, pw) = cfg.patch;
        let sh = out.shape().to_vec();
        for z in 0..sh[0] {
            for hb in 0..sh[1] / ph {
                for wb in 0..sh[2] / pw {
                    for v in 0..sh[3] {
                        let mut vals = Vec::with_capacity(ph * pw);
                        for dh in 0..ph {
                            for dw in 0..pw {
                                vals.push(out[[z, hb * ph + dh, wb * pw + dw, v]]);
                            }
                        }
                        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                        let var = vals
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / vals.len() as f64;
                        max_var = max_var.max(var);
                    }
                }
            }
        }
    }
    verdict(
        4,
        max_var == 0.0,
        &format!("max per-block output variance at init = {max_var:.3e}"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_sampler_exactness() {
    let mut rng = stream(55, StreamKind::Oracle, 0);
    let shape = [3, 4, 5, 2];
    let eps = ArrayD::from_shape_fn(IxDyn(&shape), |_| randn(&mut rng) as f32);
    let c = ArrayD::from_shape_fn(IxDyn(&shape), |_| randn(&mut rng) as f32);

    // constant denoiser: output equals the constant for any step count
    let mut worst_const = 0.0f32;
    for steps in [1usize, 2, 3, 7, 25, 100] {
        for rho in [0.6f64, 1.0, 1.05, 1.7] {
            let out = euler_sample(|_z, _s| c.clone(), &eps, steps, rho, false);
            let err = (&out - &c).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            worst_const = worst_const.max(err);
        }
        let out = ddim_sample(|_z, _s| c.clone(), &eps, steps);
        let err = (&out - &c).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        worst_const = worst_const.max(err);
    }

    // linear denoiser g(z) = a z: the whole integration map is linear, so
    // sampling from rho * eps equals rho * (sampling from eps)
    let a = 0.37f32;
    let mut worst_h = 0.0f32;
    for steps in [1usize, 4, 25] {
        for rho in [0.8f64, 1.05, 2.0] {
            let lhs = euler_sample(|z, _s| z.mapv(|v| a * v), &eps, steps, rho, false);
            let base = euler_sample(|z, _s| z.mapv(|v| a * v), &eps, steps, 1.0, false);
            let rhs = base.mapv(|v| v * rho as f32);
            let scale = rhs.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1.0);
            let err = (&lhs - &rhs).iter().fold(0.0f32, |m, v| m.max(v.abs())) / scale;
            worst_h = worst_h.max(err);
        }
    }

    verdict(
        5,
        worst_const <= 1e-6 && worst_h <= 1e-5,
        &format!("constant-denoiser err {worst_const:.2e}, homogeneity err {worst_h:.2e}"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_fair_estimator_unbiasedness() {
    let t0 = Instant::now();
    const REPS: usize = 100_000;
    let mut rng = stream(66, StreamKind::Oracle, 0);
    let mut fails: Vec<String> = Vec::new();
    let mut log = Vec::new();

    // fair CRPS: members ~ N(0,1), fixed y; oracle is the closed-form
    // Gaussian CRPS (the fair estimator is unbiased for the infinite-
    // ensemble value)
    let y = 2.0;
    let oracle_crps = crps_gaussian(0.0, 1.0, y);
    for m in [2usize, 5, 10] {
        let mut acc = 0.0;
        let mut members = vec![0.0f64; m];
        for _ in 0..REPS {
            for v in members.iter_mut() {
                *v = randn(&mut rng);
            }
            acc += crps_ensemble(&members, y, true);
        }
        let mean = acc / REPS as f64;
        let rel = (mean - oracle_crps).abs() / oracle_crps;
        log.push(format!("crps M={m} rel {rel:.4}"));
        if rel > 0.01 {
            fails.push(format!("crps M={m} rel err {rel:.4}"));
        }
    }

    // fair Brier: k ~ Binom(M, p) per sub-ensemble, scored against 32
    // independent outcomes; oracle p(1-p)
    let p = 0.5;
    let oracle_brier = p * (1.0 - p);
    for m in [2usize, 5, 10] {
        let mut acc = 0.0;
        for _ in 0..REPS {
            let k = (0..m).filter(|_| rng.gen_bool(p)).count();
            let mut s = 0.0;
            for _ in 0..32 {
                s += brier_ensemble(k, m, rng.gen_bool(p), true);
            }
            acc += s / 32.0;
        }
        let mean = acc / REPS as f64;
        let rel = (mean - oracle_brier).abs() / oracle_brier;
        log.push(format!("brier M={m} rel {rel:.4}"));
        if rel > 0.01 {
            fails.push(format!("brier M={m} rel err {rel:.4}"));
        }
    }

    // fair energy score: member states differ from truth in exactly one
    // entry, which reduces the weighted energy score to c * (1-D CRPS)
    let grid = Arc::new(GridSpec::new(2, 4, 1, vec!["temp".into()], vec!["t2m".into()]).unwrap());
    let w = latitude_weights(&grid);
    let base = StateTensor::zeros(grid.clone(), 0);
    let mut unit = base.clone();
    unit.upper[[0, 0, 0, 0]] = 1.0;
    let c = rmse(&unit, &base, &w); // weighted norm of a unit bump
    let mut truth = base.clone();
    truth.upper[[0, 0, 0, 0]] = y;
    let oracle_es = c * oracle_crps;
    for m in [2usize, 5, 10] {
        let mut acc = 0.0;
        let mut members: Vec<StateTensor> = (0..m).map(|_| base.clone()).collect();
        for _ in 0..REPS {
            for mem in members.iter_mut() {
                mem.upper[[0, 0, 0, 0]] = randn(&mut rng);
            }
            let refs: Vec<&StateTensor> = members.iter().collect();
            acc += energy_score(&refs, &truth, &w, true);
        }
        let mean = acc / REPS as f64;
        let rel = (mean - oracle_es).abs() / oracle_es;
        log.push(format!("energy M={m} rel {rel:.4}"));
        if rel > 0.01 {
            fails.push(format!("energy M={m} rel err {rel:.4}"));
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        6,
        fails.is_empty() && secs < 300.0,
        &format!("{} ({secs:.0}s)", if fails.is_empty() { log.join(", ") } else { fails.join("; ") }),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_perfect_ensemble_calibration() {
    let t0 = Instant::now();
    let grid = GridSpec::toy_default();
    let mut toy = ToyDynamicsConfig::defaults(&grid);
    toy.seed = 777;
    let ds = generate(&toy, 90, 40).unwrap();
    let w = latitude_weights(&grid);
    let mass = w.total_mass(&grid);
    let n_cases = 40;
    let n_members = 8;

    let mut ss = SpreadSkill::default();
    let mut hist = RankHistogram::new(n_members);
    let mut tie_rng = stream(778, StreamKind::TieBreak, 0);
    let mut fcrps = 0.0;
    let mut oracle_fcrps = 0.0;
    for case in 0..n_cases {
        let i = 5 + case;
        let x = &ds.states[i];
        let y = &ds.states[i + 1];
        let mean = step_mean(x, &toy);
        let members: Vec<StateTensor> = (0..n_members)
            .map(|m| {
                let mut r = stream(779, StreamKind::Member, (case * 64 + m) as u64);
                let f = sample_forcing(&grid, &toy, x.valid_time, &mut r);
                let mut s = mean.clone();
                s.upper += &f.upper;
                s.surface += &f.surface;
                s
            })
            .collect();
        let refs: Vec<&StateTensor> = members.iter().collect();
        ss.add_case(&refs, y, &w);
        fcrps += ens_crps(&refs, y, &w, true);
        // expected CRPS of the ideal Gaussian ensemble: sigma/sqrt(pi) per
        // unit weight (E|X-Y| - E|X-X'|/2), scaled by the mean entry weight
        let sigma_c = toy.noise_cell_std(x.valid_time);
        oracle_fcrps += sigma_c / std::f64::consts::PI.sqrt() * mass;

        // rank histogram on longitude-strided entries (stride 4 > smoothing
        // width, so the sampled forcing values are independent)
        let mut vals = vec![0.0f64; n_members];
        for z in 0..grid.n_levels {
            for h in 0..grid.n_lat {
                for wi in (0..grid.n_lon).step_by(4) {
                    for (mi, mem) in members.iter().enumerate() {
                        vals[mi] = mem.upper[[0, z, h, wi]];
                    }
                    hist.add(&vals, y.upper[[0, z, h, wi]], &mut tie_rng);
                }
            }
        }
    }
    fcrps /= n_cases as f64;
    oracle_fcrps /= n_cases as f64;

    let ratio = ss.ratio();
    let pv = hist.p_value();
    let crps_rel = (fcrps - oracle_fcrps).abs() / oracle_fcrps;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        7,
        (ratio - 1.0).abs() <= 0.05 && pv > 0.01 && crps_rel <= 0.03 && secs < 600.0,
        &format!(
            "spread-skill {ratio:.3}, rank-hist p {pv:.3}, fCRPS {fcrps:.5} vs oracle {oracle_fcrps:.5} (rel {crps_rel:.4}), {secs:.0}s"
        ),
    );
}

// ---------------------------------------------------------------- 8 and 10 (shared run)

struct E2e {
    ds: Dataset,
    det: DeterministicModel,
    em: stormkit::flow::GenerativeEmulator,
    train_secs: f64,
}

static E2E: OnceLock<E2e> = OnceLock::new();

fn e2e() -> &'static E2e {
    E2E.get_or_init(|| {
        let t0 = Instant::now();
        let grid = GridSpec::toy_default();
        let mut toy = ToyDynamicsConfig::defaults(&grid);
        toy.seed = 88;
        let ds = generate(&toy, 1600, 50).unwrap();

        // tendency output, a wide longitude window (the zonal advection is a
        // long-range routing task), large batch and a hot learning rate: the
        // settings that bring the 1-step RMSE closest to the noise floor
        // within the fixed step budget
        let mut arch = ArchConfig::toy_default();
        arch.delta_out = true;
        arch.window = (1, 4, 8);
        let mut tc = TrainConfig::new(2000, 88);
        tc.opt.warmup_steps = 200;
        tc.opt.lr = 8e-3;
        tc.opt.beta2 = 0.95;
        tc.batch = 4;
        let (mut det, _) = train_det(&ds, Split::Train, arch, &tc).unwrap();
        // multi-step fine-tune with a 3-deep chain: penalizing rollout error
        // growth keeps the autoregressive activity decay monotone where pure
        // 1-step fine-tuning lets accumulated model error feed energy back in
        let mut ft = TrainConfig::new(400, 88);
        ft.opt.lr = tc.opt.lr * 0.1;
        ft.opt.warmup_steps = 40;
        ft.opt.beta2 = 0.95;
        ft.multistep_chain = 3;
        finetune_multistep(&mut det, &ds, Split::Train, &ft).unwrap();

        let mut fc = FlowConfig::toy_default();
        fc.arch = det.cfg.clone();
        fc.arch.in_fields = 2;
        fc.arch.s_cond = true;
        // the residual denoiser models local noise structure; the narrow
        // window is enough there and keeps training inside the time budget
        fc.arch.window = (1, 4, 4);
        fc.arch.delta_out = false;
        let mut ftc = TrainConfig::new(3000, 88);
        ftc.opt.warmup_steps = 300;
        let (em, _) = train_flow(&det, &ds, Split::Train, fc, &ftc).unwrap();
        E2e {
            ds,
            det,
            em,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_08_end_to_end_learning() {
    let e = e2e();
    let t0 = Instant::now();
    let grid = e.ds.grid.clone();
    let toy = e.ds.config.clone().unwrap();
    let w = latitude_weights(&grid);
    let mass = w.total_mass(&grid);
    let test = e.ds.range(Split::Test);
    let starts: Vec<usize> = (test.start..test.start + 12).collect();

    // deterministic 1-step RMSE vs the analytic noise floor
    let mut det_rmse = 0.0;
    let mut floor = 0.0;
    for &i in &starts {
        let pred = e.det.predict_next(&e.ds.states[i]);
        det_rmse += rmse(&pred, &e.ds.states[i + 1], &w);
        floor += toy.noise_cell_std(e.ds.states[i].valid_time) * mass.sqrt();
    }
    det_rmse /= starts.len() as f64;
    floor /= starts.len() as f64;

    // generative ensemble at lead 1, rho = 1.05
    assert!((e.em.cfg.rho - 1.05).abs() < 1e-12);
    let mut fcrps = 0.0;
    let mut oracle = 0.0;
    let mut ss = SpreadSkill::default();
    for &i in &starts {
        let ens = rollout_ensemble(&e.det, &e.em, &e.ds.states[i], 1, 8, 880 + i as u64, 1);
        let members = ens.at_lead(0);
        fcrps += ens_crps(&members, &e.ds.states[i + 1], &w, true);
        ss.add_case(&members, &e.ds.states[i + 1], &w);
        let sc = toy.noise_cell_std(e.ds.states[i].valid_time);
        oracle += sc / std::f64::consts::PI.sqrt() * mass;
    }
    fcrps /= starts.len() as f64;
    oracle /= starts.len() as f64;
    let ratio = ss.ratio();

    let total = e.train_secs + t0.elapsed().as_secs_f64();
    verdict(
        8,
        det_rmse <= 1.5 * floor
            && fcrps <= 1.15 * oracle
            && (0.85..=1.1).contains(&ratio)
            && total < 1800.0,
        &format!(
            "RMSE {det_rmse:.5} vs floor {floor:.5} (x{:.3}), fCRPS {fcrps:.5} vs oracle {oracle:.5} (x{:.3}), spread-skill {ratio:.3}, {total:.0}s",
            det_rmse / floor,
            fcrps / oracle
        ),
    );
}

#[test]
fn criterion_10_smoothness_diagnostics() {
    let e = e2e();
    let grid = e.ds.grid.clone();
    let w = latitude_weights(&grid);
    let train = e.ds.range(Split::Train);
    let test = e.ds.range(Split::Test);
    let clim_refs: Vec<&StateTensor> = e.ds.states[train].iter().collect();
    let clim = fit_climatology(&clim_refs, 0.01);

    // toy reference activity over the test split
    let mut ref_act = 0.0;
    for s in &e.ds.states[test.clone()] {
        ref_act += activity(s, &clim.mean, &w);
    }
    ref_act /= test.len() as f64;

    // deterministic rollout: activity decreases monotonically with lead
    let det_roll = rollout_det(&e.det, &e.ds.states[test.start], 8);
    let det_act: Vec<f64> = det_roll.iter().map(|s| activity(s, &clim.mean, &w)).collect();
    let monotone = det_act.windows(2).all(|p| p[1] < p[0] + 1e-12);

    // generative members: per-member activity stays near the toy reference
    let ens = rollout_ensemble(&e.det, &e.em, &e.ds.states[test.start], 6, 4, 1010, 1);
    let mut gen_act_ok = true;
    let mut gen_acts = Vec::new();
    for k in 0..ens.n_leads() {
        let mut a = 0.0;
        for m in ens.at_lead(k) {
            a += activity(m, &clim.mean, &w);
        }
        a /= ens.n_members() as f64;
        gen_acts.push(a);
        if (a - ref_act).abs() > 0.10 * ref_act {
            gen_act_ok = false;
        }
    }

    // zonal spectra at lead 1: the generative member's ratio to truth is
    // closer to 1 than the deterministic prediction's at high wavenumbers
    let starts: Vec<usize> = (test.start..test.start + 12).collect();
    let kmax = grid.n_lon / 2;
    let hi = kmax - kmax / 3 + 1;
    let mut det_dev = 0.0;
    let mut gen_dev = 0.0;
    for &i in &starts {
        let truth_spec = zonal_spectrum(&e.ds.states[i + 1], &w);
        let det_spec = zonal_spectrum(&e.det.predict_next(&e.ds.states[i]), &w);
        let ensk = rollout_ensemble(&e.det, &e.em, &e.ds.states[i], 1, 2, 2020 + i as u64, 1);
        let gen_spec = zonal_spectrum(ensk.at_lead(0)[0], &w);
        let dr = spectrum_ratio(&det_spec, &truth_spec);
        let gr = spectrum_ratio(&gen_spec, &truth_spec);
        det_dev += dr[hi..].iter().map(|r| (r - 1.0).abs()).sum::<f64>() / dr[hi..].len() as f64;
        gen_dev += gr[hi..].iter().map(|r| (r - 1.0).abs()).sum::<f64>() / gr[hi..].len() as f64;
    }
    det_dev /= starts.len() as f64;
    gen_dev /= starts.len() as f64;

    verdict(
        10,
        monotone && gen_act_ok && gen_dev < det_dev,
        &format!(
            "det activity {det_act:.4?} monotone={monotone}; gen activity {gen_acts:.4?} vs ref {ref_act:.4}; hi-k spectrum dev gen {gen_dev:.3} < det {det_dev:.3}"
        ),
    );
}

// ---------------------------------------------------------------- 9

fn base_spec() -> MatrixSpec {
    let mut s = MatrixSpec::small_default();
    s.seeds = (1..=12).collect();
    s.data_steps = 240;
    s.det_steps = 200;
    s.flow_steps = 250;
    s.n_eval = 6;
    s.n_members = 4;
    s.sample_steps = 8;
    s
}

#[test]
fn criterion_09_directional_ablations() {
    let mut results: Vec<(String, usize, usize, f64)> = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, a: &[f64], b: &[f64], lower: bool| {
        let (wins, losses, p) = paired_sign(a, b, lower);
        results.push((name.to_string(), wins, losses, p));
    };

    // CLA beats local-3D window attention on deterministic 1-step RMSE
    {
        let mut s = base_spec();
        s.attention_modes = vec![VerticalMode::Cla, VerticalMode::Local3d];
        let r = run_matrix(&s, 1);
        record(
            "cla<local3d rmse1",
            &r.metric(0, |m| m.rmse1),
            &r.metric(1, |m| m.rmse1),
            true,
        );
    }

    // flow matching beats DDPM on fCRPS and on spread-skill calibration
    {
        let mut s = base_spec();
        s.gen_modes = vec![Objective::Flow, Objective::Ddpm];
        let r = run_matrix(&s, 1);
        record(
            "flow<ddpm fcrps",
            &r.metric(0, |m| m.fcrps),
            &r.metric(1, |m| m.fcrps),
            true,
        );
        record(
            "flow closer-to-1 spread-skill",
            &r.metric(0, |m| (m.spread_skill - 1.0).abs()),
            &r.metric(1, |m| (m.spread_skill - 1.0).abs()),
            true,
        );
    }

    // OOD fine-tuning moves test spread-skill toward 1 under forcing drift
    {
        let mut s = base_spec();
        s.ood = vec![false, true];
        s.forcing_std_drift = 2e-4;
        let r = run_matrix(&s, 1);
        record(
            "ood closer-to-1 spread-skill",
            &r.metric(1, |m| (m.spread_skill - 1.0).abs()),
            &r.metric(0, |m| (m.spread_skill - 1.0).abs()),
            true,
        );
    }

    // a stronger deterministic backbone improves the generative fCRPS
    {
        let mut s = base_spec();
        s.det_models = vec![DetKind::MToy, DetKind::SToy];
        let r = run_matrix(&s, 1);
        record(
            "m-toy<s-toy gen fcrps",
            &r.metric(0, |m| m.fcrps),
            &r.metric(1, |m| m.fcrps),
            true,
        );
    }

    // Mx4 ensemble mean RMSE <= best single member
    {
        let grid = GridSpec::toy_micro();
        let w = latitude_weights(&grid);
        let mut wins = 0;
        let mut losses = 0;
        // Members must be trained to convergence: under-trained members share
        // one dominant bias, their predictions nearly coincide, and the
        // mean-vs-best comparison degenerates to a coin flip. Scoring over a
        // short rollout lets member-specific errors compound, which is where
        // averaging pays off.
        for seed in 1..=12u64 {
            let mut toy = ToyDynamicsConfig::defaults(&grid);
            toy.seed = seed;
            let ds = generate(&toy, 240, 40).unwrap();
            let mut tc = TrainConfig::new(1200, seed);
            tc.opt.warmup_steps = 120;
            let ens = train_ensemble(&ds, Split::Train, ArchConfig::micro(), &tc, 4).unwrap();
            let test = ds.range(Split::Test);
            let starts: Vec<usize> = (test.start..test.start + 8).collect();
            let mut mean_r = 0.0;
            let mut member_r = vec![0.0; ens.members.len()];
            for &i in &starts {
                let mut state = ds.states[i].clone();
                for k in 1..=4usize {
                    state = ens.predict_next(&state);
                    mean_r += rmse(&state, &ds.states[i + k], &w);
                }
                for (mi, m) in ens.members.iter().enumerate() {
                    let mut st = ds.states[i].clone();
                    for k in 1..=4usize {
                        st = m.predict_next(&st);
                        member_r[mi] += rmse(&st, &ds.states[i + k], &w);
                    }
                }
            }
            let best = member_r.iter().cloned().fold(f64::INFINITY, f64::min);
            if mean_r <= best {
                wins += 1;
            } else {
                losses += 1;
            }
        }
        let p = stormkit::ablation::sign_test_p(wins, losses);
        results.push(("mx4 mean<=best member".into(), wins, losses, p));
    }

    let mut details = Vec::new();
    for (name, wins, losses, p) in &results {
        if *p >= 0.05 {
            ok = false;
        }
        details.push(format!("{name}: {wins}-{losses} p={p:.4}"));
    }
    verdict(9, ok, &details.join("; "));
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_bit_identical_reruns() {
    use stormkit::cli::run_from;
    use stormkit::provenance::sha256_file;

    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("gen.json"),
        r#"{"grid":"micro","n_steps":70,"burn_in":20}"#,
    )
    .unwrap();
    std::fs::write(d.join("det.json"), r#"{"arch":"micro","steps":6}"#).unwrap();

    let run = |args: &[String]| {
        let full: Vec<String> = std::iter::once("stormkit".to_string())
            .chain(args.iter().cloned())
            .collect();
        assert_eq!(run_from(full), 0, "command failed: {args:?}");
    };
    let arg = |s: &str| s.to_string();
    let path = |n: &str| d.join(n).to_str().unwrap().to_string();

    let mut mismatches = Vec::new();
    for pass in ["a", "b"] {
        let sub = |n: &str| d.join(pass).join(n).to_str().unwrap().to_string();
        std::fs::create_dir_all(d.join(pass)).unwrap();
        run(&[arg("gen-data"), arg("--config"), path("gen.json"), arg("--out"), sub("data.wt1"), arg("--seed"), arg("5")]);
        run(&[arg("train-det"), arg("--config"), path("det.json"), arg("--data"), sub("data.wt1"), arg("--out"), sub("det.ckpt"), arg("--seed"), arg("5")]);
        run(&[arg("train-flow"), arg("--det"), sub("det.ckpt"), arg("--data"), sub("data.wt1"), arg("--out"), sub("gen.ckpt"), arg("--steps"), arg("6"), arg("--sample-steps"), arg("3"), arg("--seed"), arg("5")]);
        run(&[arg("make-clim"), arg("--data"), sub("data.wt1"), arg("--out"), sub("clim.wt1")]);
        run(&[arg("sample"), arg("--det"), sub("det.ckpt"), arg("--gen"), sub("gen.ckpt"), arg("--data"), sub("data.wt1"), arg("--init-index"), arg("64"), arg("--members"), arg("3"), arg("--lead-days"), arg("2"), arg("--out"), sub("ens"), arg("--seed"), arg("5"), arg("--jobs"), arg("2")]);
        run(&[arg("evaluate"), arg("--forecast"), sub("ens"), arg("--truth"), sub("data.wt1"), arg("--clim"), sub("clim.wt1"), arg("--out"), sub("metrics.csv"), arg("--seed"), arg("5")]);
        run(&[arg("report"), arg("--metrics"), sub("metrics.csv"), arg("--ref"), sub("metrics.csv"), arg("--out"), sub("report.md")]);
        let mut ms = MatrixSpec::small_default();
        ms.grid = "tiny".into();
        ms.data_steps = 60;
        ms.burn_in = 10;
        ms.det_steps = 4;
        ms.flow_steps = 4;
        ms.n_eval = 2;
        ms.n_members = 2;
        ms.sample_steps = 2;
        ms.save(std::path::Path::new(&sub("matrix.json"))).unwrap();
        std::fs::create_dir_all(d.join(pass).join("abl")).unwrap();
        run(&[arg("ablate"), arg("--matrix"), sub("matrix.json"), arg("--out"), sub("abl"), arg("--seed"), arg("5")]);
    }
    for f in [
        "data.wt1",
        "det.ckpt",
        "gen.ckpt",
        "clim.wt1",
        "ens/ensemble.json",
        "ens/member_000.wt1",
        "ens/member_002.wt1",
        "metrics.csv",
        "report.md",
        "abl/metrics.csv",
        "abl/report.md",
    ] {
        let ha = sha256_file(&d.join("a").join(f)).unwrap();
        let hb = sha256_file(&d.join("b").join(f)).unwrap();
        if ha != hb {
            mismatches.push(f.to_string());
        }
    }
    // sampling is also independent of the worker count
    {
        let sub = |n: &str| d.join("a").join(n).to_str().unwrap().to_string();
        run(&[arg("sample"), arg("--det"), sub("det.ckpt"), arg("--gen"), sub("gen.ckpt"), arg("--data"), sub("data.wt1"), arg("--init-index"), arg("64"), arg("--members"), arg("3"), arg("--lead-days"), arg("2"), arg("--out"), sub("ens1"), arg("--seed"), arg("5"), arg("--jobs"), arg("1")]);
        let h1 = sha256_file(&d.join("a/ens1/member_001.wt1")).unwrap();
        let h2 = sha256_file(&d.join("a/ens/member_001.wt1")).unwrap();
        if h1 != h2 {
            mismatches.push("jobs-dependence in sample".into());
        }
    }
    verdict(
        11,
        mismatches.is_empty(),
        &format!(
            "all pipeline artifacts identical across reruns{}",
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {mismatches:?}")
            }
        ),
    );
}
