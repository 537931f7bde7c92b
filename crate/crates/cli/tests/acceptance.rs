//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run alone with `cargo test -p jar --test acceptance`.

use std::process::{Command, ExitCode};
use std::time::Instant;

use jar::config::{toy_fusion, toy_task};
use jar_core::costmodel::{flops_total, sweep, ArchSpec, SweepAxis};
use jar_core::fusion::{
    baseline_forward, desymmetrize, jar_forward, model_grad_check, zero_params, CombinationMode, FusionBody,
    FusionConfig, FusionKind, FusionModel, InputShape, ModalityFeatures,
};
use jar_core::rng::{derive, seeded};
use jar_core::sampler::{compute_weights, proportional_weights, TaskMixState};
use jar_core::tasks::TaskSpec;
use jar_core::train::{train, TaskModel, TrainConfig, TrainLog};
use jar_core::{Graph, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let data = (0..shape.iter().product()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

fn features(input: InputShape, width: usize, seed: u64) -> ModalityFeatures {
    ModalityFeatures::new(
        random(&[input.text_len, width], derive(seed, 1)),
        random(&[input.grid_h, input.grid_w, input.channels], derive(seed, 2)),
    )
    .expect("matching widths")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_fidelity() -> Verdict {
    let cfg = FusionConfig {
        latents: 8,
        iterations: 2,
        total_layers: 4,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        ..FusionConfig::default()
    };
    let input = InputShape {
        text_len: 6,
        grid_h: 4,
        grid_w: 4,
        channels: 8,
    };
    let start = Instant::now();
    let (model, mut store) = FusionModel::new(FusionKind::Jar, &cfg, input, 11).map_err(err)?;
    desymmetrize(&mut store, 12);
    let report = model_grad_check(&model, &mut store, &features(input, 16, 13), 1e-5, 1e-4, 14, None).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("has params");
    let summary = format!(
        "{} parameters, worst relative error {:.2e} ({}), {secs:.1} s",
        report.params.len(),
        worst.max_rel_error,
        worst.name
    );
    ensure(report.passed(), || {
        let names: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
        format!("{summary}; failing: {}", names.join(", "))
    })?;
    ensure(secs < 60.0, || format!("{summary}: slower than 60 s"))?;
    Ok(summary)
}

fn cost_model_exactness() -> Verdict {
    let mut rng = seeded(21);
    let pick = |rng: &mut jar_core::rng::Rng, options: &[usize]| options[rng.random_range(0..options.len())];
    let mut checked = 0;
    for i in 0..25 {
        let kind = FusionKind::ALL[i % FusionKind::ALL.len()];
        let heads = pick(&mut rng, &[1, 2, 4]);
        let iterations = pick(&mut rng, &[1, 2, 3]);
        let spec = ArchSpec {
            width: heads * pick(&mut rng, &[2, 4, 6]),
            heads,
            total_layers: iterations * pick(&mut rng, &[1, 2]),
            text_len: pick(&mut rng, &[1, 3, 5, 8]),
            grid_h: pick(&mut rng, &[1, 2, 3, 5]),
            grid_w: pick(&mut rng, &[1, 2, 4]),
            channels: pick(&mut rng, &[1, 3, 8]),
            latents: pick(&mut rng, &[1, 2, 5, 8]),
            iterations,
            kind,
            mlp_ratio: pick(&mut rng, &[1, 2, 4]),
            combination: CombinationMode::ALL[pick(&mut rng, &[0, 1, 2])],
            image_positions: pick(&mut rng, &[0, 1]) == 1,
        };
        let predicted = flops_total(&spec).map_err(err)?;
        let (model, store) = FusionModel::new(kind, &spec.fusion_config(), spec.input_shape(), i as u64).map_err(err)?;
        let out = model.run(&store, &features(spec.input_shape(), spec.width, i as u64)).map_err(err)?;
        let measured = out.flops.total_flops();
        ensure(predicted.flops == measured, || {
            format!("{spec:?}: predicted {} FLOPs, tape counted {measured}", predicted.flops)
        })?;
        ensure(predicted.peak_activation_values == out.activation_values, || {
            format!("{spec:?}: predicted {} activation values, tape held {}", predicted.peak_activation_values, out.activation_values)
        })?;
        ensure(predicted.params == store.num_values() as u64, || format!("{spec:?}: parameter count differs"))?;
        checked += 1;
    }
    Ok(format!("{checked} random specs over all five kinds agree to the FLOP"))
}

fn scaling_shape() -> Verdict {
    let grid = [64usize, 196, 784, 3136];
    let rows = sweep(SweepAxis::ImageSize, &grid, &ArchSpec::default(), &[FusionKind::Jar, FusionKind::Concat]).map_err(err)?;
    let jar: Vec<f64> = rows.iter().filter(|r| r.kind == FusionKind::Jar).map(|r| r.report.flops as f64).collect();
    let concat: Vec<f64> = rows.iter().filter(|r| r.kind == FusionKind::Concat).map(|r| r.report.flops as f64).collect();
    let m: Vec<f64> = grid.iter().map(|&v| v as f64).collect();

    // least-squares line through the JAR points, in exact integer arithmetic
    let jar_i: Vec<i128> = rows.iter().filter(|r| r.kind == FusionKind::Jar).map(|r| r.report.flops as i128).collect();
    let mi: Vec<i128> = grid.iter().map(|&v| v as i128).collect();
    let n = mi.len() as i128;
    let (sx, sy) = (mi.iter().sum::<i128>(), jar_i.iter().sum::<i128>());
    let sxx: i128 = mi.iter().map(|x| x * x).sum();
    let sxy: i128 = mi.iter().zip(&jar_i).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    let slope_num = n * sxy - sx * sy;
    let icpt_num = sy * sxx - sx * sxy;
    // residual_k = y_k - (icpt + slope x_k) = (y_k det - icpt_num - slope_num x_k) / det
    let max_resid = mi
        .iter()
        .zip(&jar_i)
        .map(|(x, y)| ((y * det - icpt_num - slope_num * x) as f64 / det as f64).abs())
        .fold(0.0, f64::max);
    ensure(max_resid < 1.0, || format!("JAR FLOPs are not affine in M: residual {max_resid}"))?;

    // second divided difference over the first three points
    let dd = |f: &[f64]| ((f[2] - f[1]) / (m[2] - m[1]) - (f[1] - f[0]) / (m[1] - m[0])) / (m[2] - m[0]);
    let quad = dd(&concat);
    ensure(quad > 0.0, || format!("Concat FLOPs show no quadratic term ({quad})"))?;

    let ratio: Vec<f64> = concat.iter().zip(&jar).map(|(c, j)| c / j).collect();
    ensure(ratio.windows(2).all(|w| w[0] < w[1]), || format!("ratio not increasing: {ratio:?}"))?;
    ensure(ratio[1] >= 1.4, || format!("ratio at M=196 is {:.3}", ratio[1]))?;
    Ok(format!(
        "JAR affine (max residual {max_resid:.2e}), Concat quadratic coefficient {quad:.1}, Concat/JAR = {}",
        ratio.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" < ")
    ))
}

fn ablation_orderings() -> Verdict {
    let base = ArchSpec::default();
    let mut parts = Vec::new();
    for (axis, grid) in [
        (SweepAxis::Iterations, &[1usize, 2, 4, 8][..]),
        (SweepAxis::Tokens, &[16, 32, 64, 128][..]),
        (SweepAxis::Depth, &[8, 16, 32][..]),
    ] {
        let flops: Vec<u64> = sweep(axis, grid, &base, &[FusionKind::Jar])
            .map_err(err)?
            .iter()
            .map(|r| r.report.flops)
            .collect();
        ensure(flops.windows(2).all(|w| w[0] < w[1]), || format!("{} FLOPs not increasing: {flops:?}", axis.name()))?;
        parts.push(format!("{} increasing", axis.name()));
    }
    let combos: Vec<u64> = CombinationMode::ALL
        .iter()
        .map(|&combination| flops_total(&ArchSpec { combination, ..base.clone() }).map(|r| r.flops))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    ensure(combos.iter().all(|f| *f == combos[0]), || format!("combination modes differ: {combos:?}"))?;
    parts.push("combination modes equal".into());
    Ok(parts.join(", "))
}

fn gating_identity() -> Verdict {
    let mut worst: f64 = 0.0;
    for iterations in [1, 2, 4] {
        let cfg = FusionConfig {
            latents: 6,
            iterations,
            total_layers: 4,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            ..FusionConfig::default()
        };
        let input = InputShape {
            text_len: 5,
            grid_h: 3,
            grid_w: 4,
            channels: 6,
        };
        let (model, mut store) = FusionModel::new(FusionKind::Jar, &cfg, input, 31).map_err(err)?;
        desymmetrize(&mut store, 32);
        zero_params(&mut store, &["fuse.alpha", "fuse.beta", "fuse.lambda", "iter"]);
        let f = features(input, 16, 33);
        let out = jar_forward(&model, &store, &f).map_err(err)?;
        let FusionBody::Jar { bank, fusion } = &model.body else {
            return Err("JAR model has an unexpected body".into());
        };
        let mut g = Graph::with_params(&store);
        let text = g.input(&f.text);
        let t = bank.text.apply(&mut g, text).map_err(err)?;
        let ln = fusion.query_norm.apply(&mut g, t).map_err(err)?;
        for (a, b) in out.features.data().iter().zip(g.value(ln)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation from Ln(t_N) is {worst:.3e}"))?;
    Ok(format!("output equals Ln(t_N) for K in {{1, 2, 4}}, max deviation {worst:.1e}"))
}

fn shape_decoupling() -> Verdict {
    let cfg = FusionConfig {
        latents: 8,
        iterations: 2,
        total_layers: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        ..FusionConfig::default()
    };
    let mut cells = 0;
    for l in [1, 4, 16, 64] {
        for (h, w) in [(4, 4), (14, 14), (32, 32)] {
            let input = InputShape {
                text_len: l,
                grid_h: h,
                grid_w: w,
                channels: 4,
            };
            let f = features(input, 16, (l * 1000 + h) as u64);
            let (model, store) = FusionModel::new(FusionKind::Jar, &cfg, input, 41).map_err(err)?;
            let out = jar_forward(&model, &store, &f).map_err(err)?;
            ensure(out.features.shape() == [8, 16], || format!("JAR L={l} M={}: {:?}", h * w, out.features.shape()))?;
            let (model, store) = FusionModel::new(FusionKind::CrossAttn, &cfg, input, 42).map_err(err)?;
            let out = baseline_forward(FusionKind::CrossAttn, &model, &store, &f).map_err(err)?;
            ensure(out.features.shape() == [l, 16], || format!("CrossAttn L={l} M={}: {:?}", h * w, out.features.shape()))?;
            cells += 1;
        }
    }
    Ok(format!("JAR output 8×16 in all {cells} (L, M) cells; CrossAttn output L×16"))
}

/// Seed used for every toy training run.
const TOY_SEED: u64 = 0;

fn toy_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        seed: TOY_SEED,
        eval_every: 50,
        eval_samples: 256,
        ..TrainConfig::default()
    }
}

fn run_toy(kind: FusionKind, spec: &TaskSpec, cfg: &TrainConfig) -> Result<TrainLog, String> {
    let (model, mut store) = TaskModel::new(kind, &toy_fusion(), std::slice::from_ref(spec), TOY_SEED).map_err(err)?;
    train(&model, &mut store, spec, cfg).map_err(err)
}

fn toy_learnability() -> Verdict {
    let spec = toy_task();
    let start = Instant::now();
    let log = run_toy(FusionKind::Jar, &spec, &TrainConfig {
        stop_at_accuracy: Some(0.95),
        ..toy_config(2000)
    })?;
    let secs = start.elapsed().as_secs_f64();
    let steps = log.rows.last().map_or(0, |r| r.step);
    ensure(log.final_accuracy >= 0.95, || {
        format!("JAR reached only {:.3} after {steps} steps", log.final_accuracy)
    })?;
    ensure(secs < 600.0, || format!("training took {secs:.0} s"))?;

    let control = run_toy(FusionKind::Jar, &spec, &TrainConfig {
        ablate_image: true,
        ..toy_config(2000)
    })?;
    ensure(control.final_accuracy <= 0.6, || {
        format!("image-ablated control reached {:.3}", control.final_accuracy)
    })?;
    Ok(format!(
        "JAR {:.3} at step {steps} ({secs:.0} s, seed {TOY_SEED}); image-ablated control {:.3} after 2000 steps",
        log.final_accuracy, control.final_accuracy
    ))
}

/// Budget of the Concat reference run.
const CONCAT_STEPS: usize = 200;

fn flops_at_matched_accuracy() -> Verdict {
    let spec = TaskSpec {
        grid_h: 14,
        grid_w: 14,
        ..toy_task()
    };
    let concat = run_toy(FusionKind::Concat, &spec, &toy_config(CONCAT_STEPS))?;
    let target = concat.final_accuracy;
    let jar = run_toy(FusionKind::Jar, &spec, &TrainConfig {
        eval_every: 10,
        stop_at_accuracy: Some(target - 0.02),
        ..toy_config(2000)
    })?;
    let reached = jar.final_accuracy >= target - 0.02;
    ensure(reached, || format!("JAR never came within 2% of Concat's {target:.3} (best final {:.3})", jar.final_accuracy))?;
    let (jf, cf) = (jar.total_flops(), concat.total_flops());
    let summary = format!(
        "Concat {target:.3} after {CONCAT_STEPS} steps using {cf:.3e} FLOPs; JAR {:.3} after {} steps using {jf:.3e} FLOPs ({:.1}x fewer)",
        jar.final_accuracy,
        jar.rows.last().map_or(0, |r| r.step),
        cf as f64 / jf as f64
    );
    ensure(jf < cf, || summary.clone())?;
    if target < 0.6 {
        return Ok(format!("{summary}; the matched accuracy is near chance"));
    }
    Ok(summary)
}

fn sampler_correctness() -> Verdict {
    let mut rng = seeded(91);
    for _ in 0..10_000 {
        let tasks = rng.random_range(1..=6);
        let losses: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.0..10.0)).collect();
        let floor = rng.random_range(0.0..=1.0) / tasks as f64;
        let mut state = TaskMixState::new(tasks, 0.0, floor).map_err(err)?;
        for (i, l) in losses.iter().enumerate() {
            state.update_loss(i, *l).map_err(err)?;
        }
        let w = compute_weights(&state).map_err(err)?;
        let total: f64 = w.iter().sum();
        ensure((total - 1.0).abs() <= 1e-12 && w.iter().all(|x| *x >= 0.0), || format!("{losses:?}: {w:?} off the simplex"))?;
        ensure(w.iter().all(|x| *x >= floor - 1e-12), || format!("{losses:?}: {w:?} below floor {floor}"))?;

        let c = rng.random_range(1e-3..1e3);
        let mut scaled = TaskMixState::new(tasks, 0.0, floor).map_err(err)?;
        for (i, l) in losses.iter().enumerate() {
            scaled.update_loss(i, l * c).map_err(err)?;
        }
        let ws = compute_weights(&scaled).map_err(err)?;
        ensure(w.iter().zip(&ws).all(|(a, b)| (a - b).abs() <= 1e-12), || format!("{losses:?} scaled by {c}: {w:?} vs {ws:?}"))?;

        let raw = proportional_weights(&losses).map_err(err)?;
        let k = rng.random_range(0..tasks);
        let mut raised = losses.clone();
        raised[k] += rng.random_range(0.0..5.0);
        let wr = proportional_weights(&raised).map_err(err)?;
        ensure(wr[k] >= raw[k], || format!("raising loss {k} of {losses:?} lowered its weight"))?;
    }
    let exact = proportional_weights(&[3.0, 1.0]).map_err(err)?;
    ensure(exact == [0.75, 0.25], || format!("(3, 1) gave {exact:?}"))?;
    Ok("10000 random loss vectors: simplex, floors, scale invariance, monotonicity; (3,1) -> (0.75, 0.25) exactly".into())
}

fn determinism() -> Verdict {
    let dir = std::env::temp_dir().join(format!("jar-acceptance-{}", std::process::id()));
    let bin = env!("CARGO_BIN_EXE_jar");
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin).args(args).output().map_err(err)?;
        ensure(o.status.success(), || format!("`jar {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
    };
    for name in ["a", "b"] {
        let out = dir.join(name);
        let out = out.to_str().ok_or("non-UTF-8 temp dir")?;
        run(&["train", "--seed", "7", "--steps", "30", "--set", "train.eval_every=10", "--set", "train.eval_samples=32", "--out-dir", out])?;
        run(&["sweep", "--seed", "7", "--out-dir", out])?;
    }
    let mut compared = Vec::new();
    for file in ["train_log.csv", "sweep.csv"] {
        let a = std::fs::read(dir.join("a").join(file)).map_err(err)?;
        let b = std::fs::read(dir.join("b").join(file)).map_err(err)?;
        ensure(a == b, || format!("{file} differs between identical invocations"))?;
        compared.push(format!("{file} ({} bytes)", a.len()));
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("byte-identical {}", compared.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("cost-model exactness", cost_model_exactness),
        ("scaling shape", scaling_shape),
        ("ablation orderings", ablation_orderings),
        ("gating identity", gating_identity),
        ("shape decoupling", shape_decoupling),
        ("toy learnability", toy_learnability),
        ("FLOPs at matched accuracy", flops_at_matched_accuracy),
        ("sampler correctness", sampler_correctness),
        ("determinism", determinism),
    ];
    // comma-separated criterion numbers, e.g. ACCEPTANCE_ONLY=1,3
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let verdict = check();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
