//! Acceptance gates. Prints one `ACn ... PASS|FAIL` line per criterion.
//!
//! The process exits successfully even when a gate fails so that the
//! workspace test run stays usable on slow machines; set
//! `CFRC_ACCEPTANCE_STRICT=1` to turn any failure into a nonzero exit.
//! `CFRC_ACCEPTANCE_SKIP=8,9` skips the named gates.

use std::io::Write;
use std::time::{Duration, Instant};

use cfrc_core::crackpath::{extract_crack_path, percent_rmse_path, rmse_stress, CrackParams, CrackPath};
use cfrc_core::losses::{
    bce_damage, hybrid_total, mse_increments, mse_stress_components, physics_residual, BcePolicy, HybridWeights,
    LossGrad,
};
use cfrc_core::material::{
    damage_g, simulate_case, softening_end, update_damage_and_threshold, yield_phi, CohesiveLaw, DamageState,
    MaterialParams,
};
use cfrc_core::microgen::{generate_fiber_centers, rasterize, LayoutConfig, MicrostructureGrid};
use cfrc_core::{DeformationSequence, Grid};
use cfrc_surrogate::dataset::{fit_dataset_stats, stage_samples, with_mirrors, DatasetParams};
use cfrc_surrogate::models::{ConstantDamage, Scripted};
use cfrc_surrogate::{
    rollout_case, rollout_from, stage_config, train_stage, ArchParams, CompositeState, OracleEcho, RolloutParams,
    Stage, TrainParams, UNetFinalDamage, UNetIncrement,
};
use cfrc_unet::{Head, Mode, UNet, UNetConfig};
use ndarray::{Array2, Array4, Axis};

type Gate = Result<String, String>;

/// Id, name, wall-time budget in seconds, check.
type GateEntry = (&'static str, &'static str, u64, fn() -> Gate);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

fn grid(seed: u64, n: usize) -> MicrostructureGrid {
    let layout = generate_fiber_centers(0.5, &LayoutConfig::default(), seed).expect("layout");
    rasterize(&layout, n)
}

fn simulate(seeds: std::ops::Range<u64>, n: usize) -> Result<Vec<DeformationSequence>, String> {
    let params = MaterialParams::default();
    seeds
        .map(|s| simulate_case(&grid(s, n), &params).map_err(|e| e.to_string()))
        .collect()
}

fn ac1() -> Gate {
    let m = MaterialParams::default().matrix;
    let at_t = yield_phi(&[m.sigma_t, 0.0, 0.0], m.sigma_c, m.sigma_t);
    let at_c = yield_phi(&[-m.sigma_c, 0.0, 0.0], m.sigma_c, m.sigma_t);
    // Relative to the yield function's own scale at zero stress.
    let scale = yield_phi(&[0.0; 3], m.sigma_c, m.sigma_t).abs();
    ensure(at_t.abs() <= 1e-9 * scale && at_c.abs() <= 1e-9 * scale, || {
        format!("yield_phi at the uniaxial strengths: {at_t}, {at_c}")
    })?;
    let g0 = damage_g(m.tau0, m.tau0, m.damage_a, m.damage_b).map_err(|e| e.to_string())?;
    ensure(g0.abs() <= 1e-12, || format!("damage_g at the threshold = {g0}"))?;
    let next = update_damage_and_threshold(DamageState { damage: 0.0, threshold: 0.2 }, 0.5, 10.0, 0.01);
    ensure(close(next.damage, 0.003 / 1.1, 1e-9) && close(next.threshold, 0.25 / 1.1, 1e-9), || {
        format!("damage update gave d={} Y={}", next.damage, next.threshold)
    })?;
    Ok(format!("d={:.7} Y={:.7}", next.damage, next.threshold))
}

fn ac2() -> Gate {
    let i = MaterialParams::default().interface;
    let delta_f = softening_end(i.t_c, i.g_c);
    ensure(close(delta_f, 250.0, 1e-9), || format!("delta_f = {delta_f}"))?;
    let law = CohesiveLaw::new(i.t_c, i.delta_c, i.g_c);
    let steps = 200_000;
    let h = law.delta_f / steps as f64;
    let area: f64 = (0..steps)
        .map(|k| 0.5 * h * (law.traction(k as f64 * h) + law.traction((k + 1) as f64 * h)))
        .sum();
    // MPa·nm to N/m.
    let g = area * 1e-3;
    ensure((g - i.g_c).abs() / i.g_c < 1e-3, || format!("area {g} N/m vs {}", i.g_c))?;
    Ok(format!("delta_f={delta_f} nm area={g:.6} N/m"))
}

fn field(shape: (usize, usize, usize, usize), salt: usize, lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_fn(shape, |(b, c, i, j)| {
        let k = b * 7919 + c * 613 + i * 31 + j * 7 + salt * 104_729;
        lo + (hi - lo) * ((k * 2_654_435_761usize) % 10_007) as f64 / 10_007.0
    })
}

fn fd_check(f: impl Fn(&Array4<f64>) -> LossGrad<f64>, x: &Array4<f64>, rel: f64) -> Result<(), String> {
    let analytic = f(x).grad;
    let h = 1e-6;
    for idx in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[idx] += h;
        minus.as_slice_mut().unwrap()[idx] -= h;
        let fd = (f(&plus).value.total - f(&minus).value.total) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[idx];
        // The absolute slack covers entries whose true gradient is zero.
        ensure((fd - a).abs() <= rel * fd.abs().max(a.abs()) + 1e-8, || format!("index {idx}: fd {fd} vs {a}"))?;
    }
    Ok(())
}

fn ac3() -> Gate {
    let half = Array4::from_elem((1, 1, 8, 8), 0.5);
    let labels = field((1, 1, 8, 8), 1, 0.0, 1.0).mapv(|v| (v > 0.5) as u8 as f64);
    let bce = bce_damage(half.view(), labels.view(), BcePolicy::default()).map_err(|e| e.to_string())?;
    ensure((bce.value.total - std::f64::consts::LN_2).abs() <= 1e-9, || format!("bce(0.5) = {}", bce.value.total))?;

    // σ11 = x on a 6×6 grid: the stencil gives div σ = (1, 0) at every
    // pixel, so the squared residual norm averages to 1.
    let ramp = Array4::from_shape_fn((1, 3, 6, 6), |(_, c, _, j)| if c == 0 { j as f64 } else { 0.0 });
    let phys = physics_residual(ramp.view()).map_err(|e| e.to_string())?.value.total;
    ensure(phys == 1.0, || format!("physics residual of the ramp = {phys}"))?;

    let hy = hybrid_total(2.0, 4.0, HybridWeights::default()).map_err(|e| e.to_string())?.total;
    ensure(hy == 3.0, || format!("hybrid_total(2, 4) = {hy}"))?;

    let p3 = field((2, 3, 8, 8), 2, -2.0, 2.0);
    let t3 = field((2, 3, 8, 8), 3, -2.0, 2.0);
    fd_check(|x| mse_stress_components(x.view(), t3.view()).unwrap(), &p3, 1e-4).map_err(|e| format!("mse: {e}"))?;
    fd_check(|x| physics_residual(x.view()).unwrap(), &p3, 1e-4).map_err(|e| format!("physics: {e}"))?;
    let p2 = field((2, 2, 8, 8), 4, -1.0, 1.0);
    let t2 = field((2, 2, 8, 8), 5, -1.0, 1.0);
    fd_check(|x| mse_increments(x.view(), t2.view()).unwrap(), &p2, 1e-4).map_err(|e| format!("increments: {e}"))?;
    let pb = field((1, 1, 8, 8), 6, 0.05, 0.95);
    fd_check(|x| bce_damage(x.view(), labels.view(), BcePolicy::default()).unwrap(), &pb, 1e-4)
        .map_err(|e| format!("bce: {e}"))?;
    // The hybrid total is linear in its terms; check the combined gradient.
    let hybrid = |x: &Array4<f64>| {
        let a = mse_stress_components(x.view(), t3.view()).unwrap();
        let b = physics_residual(x.view()).unwrap();
        let w = HybridWeights::default();
        LossGrad {
            value: hybrid_total(a.value.total, b.value.total, w).unwrap(),
            grad: &a.grad * w.mse + &b.grad * w.physics,
        }
    };
    fd_check(hybrid, &p3, 1e-4).map_err(|e| format!("hybrid: {e}"))?;
    Ok(format!("bce={:.12} physics={phys} hybrid={hy}", bce.value.total))
}

fn ac4() -> Gate {
    let cfg = UNetConfig::full(4, 2, Head::Linear);
    let mut net = UNet::<f32>::build(cfg, 0).map_err(|e| e.to_string())?;
    let x = field((1, 4, 256, 256), 7, -1.0, 1.0).mapv(|v| v as f32);
    let y = net.forward(&x, Mode::Eval).map_err(|e| e.to_string())?;
    ensure(y.dim() == (1, 2, 256, 256), || format!("output shape {:?}", y.dim()))?;
    let bottleneck = net.last_bottleneck_dim();
    ensure(bottleneck == Some((1, 2048, 1, 1)), || format!("bottleneck {bottleneck:?}"))?;
    drop(net);

    let loss_of = |net: &mut UNet<f64>, x: &Array4<f64>, w: &Array4<f64>| (&net.forward(x, Mode::Train).unwrap() * w).sum();
    let mut checked = 0;
    for head in [Head::Linear, Head::Sigmoid] {
        let mut net = UNet::<f64>::build(UNetConfig::reduced(4, 2, head, 3, 8), 21).map_err(|e| e.to_string())?;
        let x = field((2, 4, 8, 8), 8, -1.0, 1.0);
        let w = field((2, 2, 8, 8), 9, -1.0, 1.0);
        net.zero_grad();
        net.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
        let dx = net.backward(&w);
        let mut probes = Vec::new();
        net.visit_params(&mut |name, p| {
            if p.trainable {
                for idx in [0, p.value.len() / 2, p.value.len() - 1] {
                    probes.push((name.to_string(), idx, p.grad.as_slice().unwrap()[idx]));
                }
            }
        });
        let h = 1e-6;
        for (name, idx, a) in probes {
            let bumped = |delta: f64| {
                let mut n = net.clone();
                n.visit_params(&mut |pn, p| {
                    if pn == name {
                        p.value.as_slice_mut().unwrap()[idx] += delta;
                    }
                });
                n
            };
            let fd = (loss_of(&mut bumped(h), &x, &w) - loss_of(&mut bumped(-h), &x, &w)) / (2.0 * h);
            ensure((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()) + 1e-7, || {
                format!("{head:?} {name}[{idx}]: fd {fd} vs {a}")
            })?;
            checked += 1;
        }
        for idx in [0usize, 101, 255, 511] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss_of(&mut net.clone(), &xp, &w) - loss_of(&mut net.clone(), &xm, &w)) / (2.0 * h);
            let a = dx.as_slice().unwrap()[idx];
            ensure((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()) + 1e-7, || format!("input[{idx}]: fd {fd} vs {a}"))?;
            checked += 1;
        }
    }
    Ok(format!("4x256x256 -> 2x256x256, bottleneck 2048x1x1, {checked} gradient probes"))
}

fn ac5() -> Gate {
    let defaults = RolloutParams::default();
    // (script of macro increments, starting macro stress)
    let scripts: [(&[f64], f64); 5] = [
        (&[0.05], 70.0),
        (&[1.0, 0.05], 70.0),
        (&[2.0, 2.0, 0.09, 0.01], 55.0),
        (&[3.0, 0.0999, 0.5, 0.01], 58.0),
        (&[0.05], 0.0),
    ];
    for (script, start) in scripts {
        let micro = Array2::zeros((4, 4));
        let state = CompositeState {
            sv: Array2::from_elem((4, 4), start),
            ..CompositeState::initial(4)
        };
        let mut uts = Scripted::new(script.to_vec(), 0.0);
        let mut neck = Scripted::new(vec![-1.0], 0.01);
        let r = rollout_from("ac5", 0, &micro, state, &mut uts, &mut neck, &mut ConstantDamage(0.7), &defaults)
            .map_err(|e| e.to_string())?;
        let steps = (defaults.eps_f / defaults.d_eps).round() as usize;
        ensure(steps == 60 && r.sequence.frames.len() == steps + 1 && r.dsm_history.len() == steps, || {
            format!("{} frames for {steps} steps", r.sequence.frames.len())
        })?;
        let mut s = start;
        let mut expected = None;
        for k in 0..steps {
            let d = *script.get(k).unwrap_or(script.last().unwrap());
            s += d;
            if d < 0.1 && s > 60.0 {
                expected = Some(k + 1);
                break;
            }
        }
        ensure(r.switch_step == expected, || {
            format!("script {script:?} from {start}: switch {:?}, expected {expected:?}", r.switch_step)
        })?;
    }
    Ok(format!("{} scripts, 60 steps", scripts.len()))
}

fn line_grid(n: usize, f: impl Fn(usize) -> usize) -> Grid {
    let mut g = Array2::zeros((n, n));
    for r in 0..n {
        g[[r, f(r)]] = 1.0;
    }
    g
}

fn ac6() -> Gate {
    let params = CrackParams::default();
    let vertical = extract_crack_path(&line_grid(256, |_| 128), &params).map_err(|e| e.to_string())?;
    ensure(vertical.x_index.iter().all(|&x| x == 128.0), || "vertical crack moved".into())?;
    let shifted = CrackPath {
        x_index: vertical.x_index.iter().map(|x| x + 2.56).collect(),
        valid_mask: vertical.valid_mask.clone(),
    };
    let pct = percent_rmse_path(&vertical, &shifted).map_err(|e| e.to_string())?;
    ensure((pct - 1.0).abs() < 1e-12, || format!("2.56 px offset scored {pct}%"))?;
    let diagonal = extract_crack_path(&line_grid(256, |r| r / 2), &params).map_err(|e| e.to_string())?;
    let worst = diagonal
        .x_index
        .iter()
        .enumerate()
        .map(|(r, x)| (x - r as f64 / 2.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1.0, || format!("diagonal off by {worst} px"))?;
    Ok(format!("offset {pct:.12}%, diagonal max error {worst:.3} px"))
}

fn flip(g: &Grid) -> Grid {
    let mut g = g.clone();
    g.invert_axis(Axis(1));
    g
}

fn ac7() -> Gate {
    let params = MaterialParams::default();
    let n = 256;
    for seed in 0..10u64 {
        let g = grid(seed, n);
        let seq = simulate_case(&g, &params).map_err(|e| e.to_string())?;
        for (k, w) in seq.frames.windows(2).enumerate() {
            ensure(w[0].damage.iter().zip(w[1].damage.iter()).all(|(a, b)| b >= a), || {
                format!("case {seed}: damage decreased at step {}", k + 1)
            })?;
        }
        let curve = seq.macro_curve();
        let uts = seq.uts_index;
        ensure(uts > 0 && uts < curve.len() - 1, || format!("case {seed}: UTS at frame {uts}"))?;
        ensure(curve[uts..].windows(2).all(|w| w[1] <= w[0]), || format!("case {seed}: curve rises after UTS"))?;
        let mut mirrored = g.clone();
        mirrored.pixels.invert_axis(Axis(1));
        let mseq = simulate_case(&mirrored, &params).map_err(|e| e.to_string())?;
        for (a, b) in seq.frames.iter().zip(&mseq.frames) {
            let same = flip(&a.s11) == b.s11
                && flip(&a.s22) == b.s22
                && flip(&a.s12).mapv(|v| -v) == b.s12
                && flip(&a.sv) == b.sv
                && flip(&a.damage) == b.damage;
            ensure(same, || format!("case {seed}: mirrored run differs at strain {}", a.strain))?;
        }
    }
    Ok(format!("10 cases at {n}x{n}"))
}

/// Trains all four stages on `train` and returns the rollout RMSE of every
/// case in `eval`, with the per-case and training-set maximum stress.
fn learn(
    train: &[DeformationSequence],
    eval: &[DeformationSequence],
    arch: &ArchParams,
    tp: &TrainParams,
) -> Result<Vec<(f64, f64)>, String> {
    let n = train[0].size();
    let all = with_mirrors(train);
    let dp = DatasetParams {
        damage_threshold: 0.05,
        ..Default::default()
    };
    let norm = fit_dataset_stats(&all, &dp).map_err(|e| e.to_string())?;
    let mut nets = Vec::new();
    for (i, stage) in Stage::ALL.into_iter().enumerate() {
        let samples = stage_samples(stage, &all, &norm, &dp).map_err(|e| e.to_string())?;
        let config = stage_config(stage, arch, n).map_err(|e| e.to_string())?;
        let params = TrainParams {
            seed: tp.seed + i as u64,
            ..*tp
        };
        let out = train_stage(stage, &samples, config, &norm, &params, &mut std::io::sink()).map_err(|e| e.to_string())?;
        nets.push(out.model);
    }
    let necking = nets.pop().unwrap();
    let uts = nets.pop().unwrap();
    let damage2 = nets.pop().unwrap();
    let damage1 = nets.pop().unwrap();
    let mut uts = UNetIncrement::new(uts, norm.clone(), Stage::Uts, None).map_err(|e| e.to_string())?;
    let mut neck = UNetIncrement::new(necking, norm.clone(), Stage::Necking, None).map_err(|e| e.to_string())?;
    let mut dmg = UNetFinalDamage::new(damage1, damage2, norm).map_err(|e| e.to_string())?;
    let rp = RolloutParams::default();
    eval.iter()
        .map(|c| {
            let r = rollout_case(&c.case_id, c.seed, &c.microstructure, &mut uts, &mut neck, &mut dmg, &rp)
                .map_err(|e| e.to_string())?;
            let e = rmse_stress(&c.frames, &r.sequence.frames).map_err(|e| e.to_string())?;
            Ok((e, c.max_stress() as f64))
        })
        .collect()
}

fn ac8() -> Gate {
    let cases = simulate(0..4, 32)?;
    let arch = ArchParams {
        levels: 4,
        base_channels: 16,
        ..Default::default()
    };
    let tp = TrainParams {
        max_epochs: 200,
        batch_size: 2,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let scores = learn(&cases, &cases, &arch, &tp)?;
    let pct: Vec<f64> = scores.iter().map(|(e, m)| 100.0 * e / m).collect();
    let text = pct.iter().map(|p| format!("{p:.1}%")).collect::<Vec<_>>().join(" ");
    ensure(pct.iter().all(|&p| p < 5.0), || format!("rmse/case max {text}"))?;
    Ok(format!("rmse/case max {text}"))
}

fn ac9() -> Gate {
    let cases = simulate(100..125, 32)?;
    let (train, test) = cases.split_at(20);
    let dataset_max = train.iter().map(|c| c.max_stress() as f64).fold(0.0, f64::max);
    let arch = ArchParams {
        levels: 4,
        base_channels: 16,
        ..Default::default()
    };
    let tp = TrainParams {
        max_epochs: 40,
        batch_size: 2,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let scores = learn(train, test, &arch, &tp)?;
    let pct: Vec<f64> = scores.iter().map(|(e, _)| 100.0 * e / dataset_max).collect();
    let passing = pct.iter().filter(|&&p| p < 20.0).count();
    let text = pct.iter().map(|p| format!("{p:.1}%")).collect::<Vec<_>>().join(" ");
    ensure(passing >= 4, || format!("{passing}/5 below 20%: {text}"))?;
    Ok(format!("{passing}/5 below 20% of {dataset_max:.0} MPa: {text}"))
}

fn ac10() -> Gate {
    // In memory: echoed increments must rebuild the simulated sequence.
    let params = RolloutParams::default();
    for truth in simulate(200..203, 32)? {
        let mut uts = OracleEcho { truth: truth.clone() };
        let mut neck = uts.clone();
        let mut dmg = uts.clone();
        let r = rollout_case(&truth.case_id, truth.seed, &truth.microstructure, &mut uts, &mut neck, &mut dmg, &params)
            .map_err(|e| e.to_string())?;
        for (a, b) in r.sequence.frames.iter().zip(&truth.frames) {
            let ok = a.strain == b.strain
                && a.sv.iter().chain(a.damage.iter()).zip(b.sv.iter().chain(b.damage.iter())).all(|(x, y)| {
                    (x - y).abs() as f64 <= 1e-5 * (y.abs() as f64).max(1.0)
                });
            ensure(ok, || format!("{}: echo diverged at strain {}", truth.case_id, b.strain))?;
        }
    }

    // Through the command-line pipeline.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.toml");
    let mut text = String::from("seed = 11\n[microgen]\nn_cases = 3\nresolution = 32\n");
    for stage in Stage::ALL {
        text.push_str(&format!("[network.{}]\nlevels = 3\n", stage.name()));
    }
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let ctx = cfrc_cli::Context::load(&config, None, Some(1), None).map_err(|e| e.to_string())?;
    for cmd in [cfrc_cli::Command::GenMicro, cfrc_cli::Command::Simulate] {
        cfrc_cli::run(&cmd, &ctx).map_err(|e| e.to_string())?;
    }
    let backend = cfrc_cli::Backend::OracleEcho;
    cfrc_cli::rollout(&ctx, backend).map_err(|e| e.to_string())?;
    let metrics = cfrc_cli::evaluate(&ctx, backend).map_err(|e| e.to_string())?;
    let worst = metrics.iter().map(|m| m.rmse_stress).fold(0.0, f64::max);
    ensure(metrics.len() == 3 && worst < 1e-4, || format!("{} cases, worst rmse {worst}", metrics.len()))?;
    Ok(format!("worst evaluate rmse_stress {worst:.2e} MPa"))
}

fn main() {
    let skip: Vec<String> = std::env::var("CFRC_ACCEPTANCE_SKIP")
        .unwrap_or_default()
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let strict = std::env::var("CFRC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let gates: [GateEntry; 10] = [
        ("1", "constitutive exactness", 1, ac1),
        ("2", "cohesive law", 1, ac2),
        ("3", "loss exactness and gradients", 30, ac3),
        ("4", "architecture contract", 120, ac4),
        ("5", "switching and termination", 10, ac5),
        ("6", "crack-path pipeline", 10, ac6),
        ("7", "oracle properties", 300, ac7),
        ("8", "overfit gate", 1800, ac8),
        ("9", "generalization smoke", 7200, ac9),
        ("10", "pipeline identity", 60, ac10),
    ];
    let mut failures = 0;
    for (id, name, budget, gate) in gates {
        if skip.iter().any(|s| s == id) {
            println!("AC{id} {name} SKIP");
            continue;
        }
        let t0 = Instant::now();
        let outcome = gate();
        let elapsed = t0.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget} s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("AC{id} {name} {status} ({:.2} s) {detail}", elapsed.as_secs_f64());
        let _ = std::io::stdout().flush();
    }
    println!("acceptance: {} of 10 gates failed", failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
