//! Subcommand bodies. Each returns its artifacts instead of printing so the
//! binary and the tests share one code path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use jar_core::costmodel::{flops_total, sweep as cost_sweep, sweep_csv, ArchSpec};
use jar_core::fusion::{
    desymmetrize, model_grad_check, param_group, CombinationMode, FusionConfig, FusionKind, FusionModel, InputShape,
    ModalityFeatures, ResampleMode,
};
use jar_core::gradcheck::GradCheckReport;
use jar_core::graph::OP_NAMES;
use jar_core::params::ParamStore;
use jar_core::rng::{derive, seeded};
use jar_core::tasks::QUESTION_LEN;
use jar_core::tensor::Tensor;
use jar_core::train::{eval_set, train_mixture, TaskModel, TrainLog};

use crate::checkpoint;
use crate::config::{AblateAxis, RunConfig, GRADCHECK_MAX_TOKENS};
use crate::error::{CliError, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const WEIGHTS_LOG: &str = "weights.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const DATASET: &str = "dataset.bin";
pub const SWEEP_CSV: &str = "sweep.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Every file written, in creation order.
    pub files: Vec<PathBuf>,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    ensure_dir(&cfg.out_dir)?;
    let specs = cfg.task_specs();
    let (model, mut store) = TaskModel::new(cfg.kind, &cfg.fusion, &specs, cfg.seed)?;
    let log = train_mixture(&model, &mut store, &specs, &cfg.train, cfg.decay, cfg.floor)?;

    let mut files = Vec::new();
    let path = cfg.out_dir.join(TRAIN_LOG);
    write(&path, &log.to_csv())?;
    files.push(path);
    if specs.len() > 1 {
        let names: Vec<&str> = specs.iter().map(|s| s.kind.name()).collect();
        let path = cfg.out_dir.join(WEIGHTS_LOG);
        write(&path, &log.weights_csv(&names))?;
        files.push(path);
    }
    let path = cfg.out_dir.join(CHECKPOINT);
    checkpoint::save_store(&path, &store)?;
    files.push(path);
    if cfg.dump_samples > 0 {
        let mut samples = eval_set(&specs, &cfg.train)?;
        samples.truncate(cfg.dump_samples);
        let path = cfg.out_dir.join(DATASET);
        checkpoint::save_samples(&path, &samples)?;
        files.push(path);
    }
    Ok(TrainOutcome { log, files })
}

/// Cost-model sweep; the CSV is also written to `sweep.csv`.
pub fn sweep(cfg: &RunConfig) -> Result<String> {
    let s = &cfg.sweep;
    let rows = cost_sweep(s.axis, &s.grid, &s.base, &s.kinds)?;
    let csv = sweep_csv(&rows);
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(SWEEP_CSV), &csv)?;
    Ok(csv)
}

pub const ABLATE_CSV_HEADER: &str =
    "axis,value,kind,latents,iterations,layers,combination,resample,flops,params,accuracy";

/// One trained configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateCell {
    pub value: String,
    pub kind: FusionKind,
    pub fusion: FusionConfig,
    /// Forward FLOPs of the fusion module for one sample.
    pub flops: u64,
    pub params: usize,
    pub accuracy: f64,
}

fn ablate_variant(cfg: &RunConfig, axis: AblateAxis, value: &str) -> Result<FusionConfig> {
    let bad = |what: &str| CliError::Usage(format!("ablation value `{value}` is not a valid {what}"));
    let count = || value.parse::<usize>().map_err(|_| bad("count"));
    let mut f = cfg.fusion.clone();
    match axis {
        AblateAxis::Iterations => f.iterations = count()?,
        AblateAxis::Tokens => f.latents = count()?,
        AblateAxis::Layers => f.total_layers = count()?,
        AblateAxis::Combination => f.combination = CombinationMode::parse(value).map_err(|_| bad("combination mode"))?,
        AblateAxis::Resample => f.resample = ResampleMode::parse(value).map_err(|_| bad("resample mode"))?,
    }
    f.validate()
        .map_err(|e| CliError::Usage(format!("ablation value `{value}`: {e}")))?;
    Ok(f)
}

/// Trains one model per grid value (in parallel, at most `jobs` at a time)
/// and writes `ablate_<axis>.csv`. Rows follow the grid order.
pub fn ablate(cfg: &RunConfig) -> Result<(Vec<AblateCell>, String)> {
    let a = &cfg.ablate;
    if a.grid.is_empty() {
        return Err(CliError::Usage("ablation grid is empty".into()));
    }
    if a.grid.len() > a.max_cells {
        return Err(CliError::Usage(format!(
            "ablation grid has {} cells, more than the limit of {} (raise ablate.max_cells)",
            a.grid.len(),
            a.max_cells
        )));
    }
    let variants: Vec<FusionConfig> = a
        .grid
        .iter()
        .map(|v| ablate_variant(cfg, a.axis, v))
        .collect::<Result<_>>()?;
    let specs = cfg.task_specs();
    let input = InputShape {
        text_len: QUESTION_LEN,
        grid_h: cfg.task.grid_h,
        grid_w: cfg.task.grid_w,
        channels: cfg.task.channels(),
    };

    let run_cell = |i: usize| -> Result<AblateCell> {
        let fusion = &variants[i];
        let (model, mut store) = TaskModel::new(cfg.kind, fusion, &specs, cfg.seed)?;
        let log = train_mixture(&model, &mut store, &specs, &cfg.train, cfg.decay, cfg.floor)?;
        Ok(AblateCell {
            value: a.grid[i].clone(),
            kind: cfg.kind,
            fusion: fusion.clone(),
            flops: flops_total(&ArchSpec::from_parts(cfg.kind, fusion, input))?.flops,
            params: store.num_values(),
            accuracy: log.final_accuracy,
        })
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblateCell>>>> = Mutex::new((0..variants.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(variants.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= variants.len() {
                    break;
                }
                let r = run_cell(i);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let cells: Vec<AblateCell> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<_>>()?;

    let mut csv = String::from(ABLATE_CSV_HEADER);
    csv.push('\n');
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{:.6}",
            a.axis.name(),
            c.value,
            c.kind.name(),
            c.fusion.latents,
            c.fusion.iterations,
            c.fusion.total_layers,
            c.fusion.combination.name(),
            c.fusion.resample.name(),
            c.flops,
            c.params,
            c.accuracy
        );
    }
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(format!("ablate_{}.csv", a.axis.name())), &csv)?;
    Ok((cells, csv))
}

#[derive(Debug)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    /// Worst relative error per parameter group, in first-seen order.
    pub groups: Vec<(String, f64, String)>,
    pub text: String,
    /// Set when the check failed; names the offending parameters.
    pub failure: Option<String>,
}

fn normal(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut scratch = ParamStore::new();
    let id = scratch.normal("x", shape, 1.0, &mut seeded(seed))?;
    let mut t = scratch.get(id).clone();
    t.requires_grad = false;
    Ok(t)
}

/// Finite-difference check of every fusion parameter at a generic point.
/// `corrupt` names an op whose backward pass is deliberately broken.
pub fn gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<GradcheckOutcome> {
    let g = &cfg.gradcheck;
    let counts = [
        ("text_len", g.input.text_len),
        ("image tokens", g.input.image_tokens()),
        ("latents", g.fusion.latents),
    ];
    if let Some((name, n)) = counts.iter().find(|(_, n)| *n > GRADCHECK_MAX_TOKENS) {
        return Err(CliError::Usage(format!(
            "gradcheck {name} is {n}; token counts above {GRADCHECK_MAX_TOKENS} are not supported"
        )));
    }
    let fault: Option<&'static str> = match corrupt {
        None => None,
        Some(op) => Some(
            OP_NAMES
                .iter()
                .copied()
                .find(|o| *o == op)
                .ok_or_else(|| CliError::Usage(format!("unknown op `{op}`; known ops: {}", OP_NAMES.join(", "))))?,
        ),
    };
    let (model, mut store) = FusionModel::new(g.kind, &g.fusion, g.input, cfg.seed)?;
    desymmetrize(&mut store, derive(cfg.seed, 1));
    let features = ModalityFeatures::new(
        normal(&[g.input.text_len, g.fusion.width], derive(cfg.seed, 2))?,
        normal(&[g.input.grid_h, g.input.grid_w, g.input.channels], derive(cfg.seed, 3))?,
    )?;
    let report = model_grad_check(&model, &mut store, &features, g.step, g.tolerance, derive(cfg.seed, 4), fault)?;

    let mut groups: Vec<(String, f64, String)> = Vec::new();
    for p in &report.params {
        let group = param_group(&p.name);
        match groups.iter_mut().find(|(g, _, _)| *g == group) {
            Some(entry) if p.max_rel_error > entry.1 => {
                entry.1 = p.max_rel_error;
                entry.2 = p.name.clone();
            }
            Some(_) => {}
            None => groups.push((group, p.max_rel_error, p.name.clone())),
        }
    }
    let mut text = String::from("group,max_rel_error,worst_param\n");
    for (group, err, name) in &groups {
        let _ = writeln!(text, "{group},{err:.3e},{name}");
    }
    let failing: Vec<String> = report
        .failing()
        .map(|p| format!("{} (rel. error {:.3e}, analytic {:.6e} vs numeric {:.6e})", p.name, p.max_rel_error, p.analytic, p.numeric))
        .collect();
    let failure = (!failing.is_empty()).then(|| {
        let cause = match fault {
            Some(op) => format!("backward of `{op}` corrupted; "),
            None => String::new(),
        };
        let shown = failing.len().min(5);
        let more = match failing.len() - shown {
            0 => String::new(),
            n => format!("; and {n} more"),
        };
        format!(
            "gradient check failed at tolerance {:e}: {cause}{} parameter(s) disagree: {}{more}",
            g.tolerance,
            failing.len(),
            failing[..shown].join("; ")
        )
    });
    Ok(GradcheckOutcome {
        report,
        groups,
        text,
        failure,
    })
}
