//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! kind = jar
//! latents = 16
//! ```
//!
//! Every key is checked against its section; unknown sections, unknown keys,
//! duplicates and unparsable values are reported as `file:line: message`.
//! Command-line overrides use `section.key=value` and are applied after the
//! file, in order.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use jar_core::costmodel::{ArchSpec, SweepAxis};
use jar_core::fusion::{CombinationMode, FusionConfig, FusionKind, InputShape, ResampleMode};
use jar_core::sampler::{TaskMixState, DEFAULT_DECAY};
use jar_core::tasks::{TaskKind, TaskSpec};
use jar_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// One `section.key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub section: String,
    pub key: String,
    pub value: String,
    /// `file:line` or the flag that produced it.
    pub origin: String,
}

impl Setting {
    pub fn new(section: &str, key: &str, value: impl Into<String>, origin: impl Into<String>) -> Self {
        Self {
            section: section.into(),
            key: key.into(),
            value: value.into(),
            origin: origin.into(),
        }
    }

    fn error(&self, message: impl Display) -> CliError {
        CliError::Config {
            origin: self.origin.clone(),
            message: message.to_string(),
        }
    }
}

pub const SECTIONS: [&str; 8] = ["run", "model", "task", "train", "sampler", "sweep", "ablate", "gradcheck"];

/// Reads and tokenises a config file. A missing file is an error naming it.
pub fn parse_file(path: &Path) -> Result<Vec<Setting>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_text(&text, &path.display().to_string())
}

pub fn parse_text(text: &str, name: &str) -> Result<Vec<Setting>> {
    let mut section: Option<String> = None;
    let mut out: Vec<Setting> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = format!("{name}:{}", i + 1);
        let fail = |message: String| CliError::Config {
            origin: origin.clone(),
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let s = rest
                .strip_suffix(']')
                .ok_or_else(|| fail(format!("unterminated section header `{line}`")))?
                .trim();
            if !SECTIONS.contains(&s) {
                return Err(fail(format!("unknown section `{s}` (expected one of {})", SECTIONS.join(", "))));
            }
            section = Some(s.into());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected `key = value`, found `{line}`")))?;
        let sec = section
            .clone()
            .ok_or_else(|| fail("key outside of any [section]".into()))?;
        let key = key.trim();
        if out.iter().any(|s| s.section == sec && s.key == key) {
            return Err(fail(format!("duplicate key `{key}` in [{sec}]")));
        }
        out.push(Setting::new(&sec, key, value.trim(), origin.clone()));
    }
    Ok(out)
}

/// Parses a `section.key=value` override.
pub fn parse_override(s: &str) -> Result<Setting> {
    let origin = format!("--set {s}");
    let bad = || CliError::Config {
        origin: origin.clone(),
        message: "expected `section.key=value`".into(),
    };
    let (path, value) = s.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    Ok(Setting::new(section, key, value.trim(), origin))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub grid: Vec<usize>,
    pub kinds: Vec<FusionKind>,
    /// Fixed dimensions of every swept architecture.
    pub base: ArchSpec,
}

/// Ablated dimension of the trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Iterations,
    Tokens,
    Combination,
    Resample,
    Layers,
}

impl AblateAxis {
    pub const ALL: [AblateAxis; 5] = [Self::Iterations, Self::Tokens, Self::Combination, Self::Resample, Self::Layers];

    pub fn name(self) -> &'static str {
        match self {
            Self::Iterations => "iterations",
            Self::Tokens => "tokens",
            Self::Combination => "combination",
            Self::Resample => "resample",
            Self::Layers => "layers",
        }
    }
}

impl FromStr for AblateAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation axis `{s}`; valid axes: iterations, tokens, combination, resample, layers"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateSettings {
    pub axis: AblateAxis,
    pub grid: Vec<String>,
    /// Largest accepted grid.
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub kind: FusionKind,
    pub fusion: FusionConfig,
    pub input: InputShape,
    pub step: f64,
    pub tolerance: f64,
}

/// Largest token count of any sequence a gradient check may use.
pub const GRADCHECK_MAX_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub kind: FusionKind,
    pub fusion: FusionConfig,
    pub tasks: Vec<TaskKind>,
    /// Shared scene parameters; `kind` is replaced per task.
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub decay: f64,
    pub floor: f64,
    /// Samples of the evaluation set written next to the checkpoint.
    pub dump_samples: usize,
    pub sweep: SweepSettings,
    pub ablate: AblateSettings,
    pub gradcheck: GradcheckSettings,
}

/// Model trained by default: 16 latents, 2 iterations, width 64, 4 layers.
pub fn toy_fusion() -> FusionConfig {
    FusionConfig {
        latents: 16,
        iterations: 2,
        total_layers: 4,
        width: 64,
        heads: 4,
        ..FusionConfig::default()
    }
}

/// Scene parameters of the default presence task: 6×6 grid, 3 colours,
/// 2 shapes, at most 2 distractors.
pub fn toy_task() -> TaskSpec {
    TaskSpec {
        colors: 3,
        shapes: 2,
        max_distractors: 2,
        ..TaskSpec::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 1,
            kind: FusionKind::Jar,
            fusion: toy_fusion(),
            tasks: vec![TaskKind::Presence],
            task: toy_task(),
            train: TrainConfig::default(),
            decay: DEFAULT_DECAY,
            floor: 0.05,
            dump_samples: 0,
            sweep: SweepSettings {
                axis: SweepAxis::ImageSize,
                grid: vec![64, 196, 784, 3136],
                kinds: FusionKind::ALL.to_vec(),
                base: ArchSpec::default(),
            },
            ablate: AblateSettings {
                axis: AblateAxis::Iterations,
                grid: vec!["1".into(), "2".into(), "4".into()],
                max_cells: 16,
            },
            gradcheck: GradcheckSettings {
                kind: FusionKind::Jar,
                fusion: FusionConfig {
                    latents: 8,
                    iterations: 2,
                    total_layers: 4,
                    width: 16,
                    heads: 2,
                    mlp_ratio: 2,
                    ..FusionConfig::default()
                },
                input: InputShape {
                    text_len: 6,
                    grid_h: 4,
                    grid_w: 4,
                    channels: 8,
                },
                step: 1e-5,
                tolerance: 1e-4,
            },
        }
    }
}

fn value<T: FromStr>(s: &Setting) -> Result<T>
where
    T::Err: Display,
{
    s.value
        .parse::<T>()
        .map_err(|e| s.error(format!("invalid value `{}` for {}.{}: {e}", s.value, s.section, s.key)))
}

fn core<T>(s: &Setting, r: jar_core::error::Result<T>) -> Result<T> {
    r.map_err(|e| s.error(e))
}

fn list<T>(s: &Setting, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(parse)
        .collect()
}

fn boolean(s: &Setting) -> Result<bool> {
    match s.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(s.error(format!("invalid boolean `{v}` for {}.{}", s.section, s.key))),
    }
}

/// Model keys shared by `[model]` and `[gradcheck]`.
fn apply_fusion(kind: &mut FusionKind, f: &mut FusionConfig, s: &Setting) -> Result<bool> {
    match s.key.as_str() {
        "kind" => *kind = core(s, FusionKind::parse(&s.value))?,
        "latents" => f.latents = value(s)?,
        "iterations" => f.iterations = value(s)?,
        "layers" => f.total_layers = value(s)?,
        "width" => f.width = value(s)?,
        "heads" => f.heads = value(s)?,
        "mlp_ratio" => f.mlp_ratio = value(s)?,
        "combination" => f.combination = core(s, CombinationMode::parse(&s.value))?,
        "resample" => f.resample = core(s, ResampleMode::parse(&s.value))?,
        "image_positions" => f.image_positions = boolean(s)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides; validated.
    pub fn load(file: Option<&Path>, overrides: &[Setting]) -> Result<Self> {
        let mut cfg = Self::default();
        let from_file = match file {
            Some(p) => parse_file(p)?,
            None => Vec::new(),
        };
        for s in from_file.iter().chain(overrides) {
            cfg.apply(s)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, s: &Setting) -> Result<()> {
        match s.section.as_str() {
            "run" => match s.key.as_str() {
                "seed" => self.seed = value(s)?,
                "out_dir" => self.out_dir = PathBuf::from(&s.value),
                "jobs" => self.jobs = value(s)?,
                _ => return Err(unknown(s)),
            },
            "model" => {
                if !apply_fusion(&mut self.kind, &mut self.fusion, s)? {
                    return Err(unknown(s));
                }
            }
            "task" => {
                let t = &mut self.task;
                match s.key.as_str() {
                    "kinds" => self.tasks = list(s, |v| core(s, TaskKind::parse(v)))?,
                    "grid_h" => t.grid_h = value(s)?,
                    "grid_w" => t.grid_w = value(s)?,
                    "colors" => t.colors = value(s)?,
                    "shapes" => t.shapes = value(s)?,
                    "max_distractors" => t.max_distractors = value(s)?,
                    "max_count" => t.max_count = value(s)?,
                    "noise" => t.noise = value(s)?,
                    _ => return Err(unknown(s)),
                }
            }
            "train" => {
                let t = &mut self.train;
                match s.key.as_str() {
                    "steps" => t.steps = value(s)?,
                    "batch_size" => t.batch_size = value(s)?,
                    "learning_rate" => t.learning_rate = value(s)?,
                    "beta1" => t.beta1 = value(s)?,
                    "beta2" => t.beta2 = value(s)?,
                    "eps" => t.eps = value(s)?,
                    "eval_every" => t.eval_every = value(s)?,
                    "eval_samples" => t.eval_samples = value(s)?,
                    "stop_at_accuracy" => {
                        t.stop_at_accuracy = if s.value == "none" { None } else { Some(value(s)?) }
                    }
                    "ablate_image" => t.ablate_image = boolean(s)?,
                    "frozen" => t.frozen = list(s, |v| Ok(v.to_string()))?,
                    "dump_samples" => self.dump_samples = value(s)?,
                    _ => return Err(unknown(s)),
                }
            }
            "sampler" => match s.key.as_str() {
                "decay" => self.decay = value(s)?,
                "floor" => self.floor = value(s)?,
                _ => return Err(unknown(s)),
            },
            "sweep" => {
                let w = &mut self.sweep;
                let b = &mut w.base;
                match s.key.as_str() {
                    "axis" => w.axis = core(s, SweepAxis::parse(&s.value))?,
                    "grid" => w.grid = list(s, |v| value(&Setting { value: v.into(), ..s.clone() }))?,
                    "kinds" => w.kinds = list(s, |v| core(s, FusionKind::parse(v)))?,
                    "width" => b.width = value(s)?,
                    "heads" => b.heads = value(s)?,
                    "layers" => b.total_layers = value(s)?,
                    "text_len" => b.text_len = value(s)?,
                    "grid_h" => b.grid_h = value(s)?,
                    "grid_w" => b.grid_w = value(s)?,
                    "channels" => b.channels = value(s)?,
                    "latents" => b.latents = value(s)?,
                    "iterations" => b.iterations = value(s)?,
                    "mlp_ratio" => b.mlp_ratio = value(s)?,
                    "combination" => b.combination = core(s, CombinationMode::parse(&s.value))?,
                    "image_positions" => b.image_positions = boolean(s)?,
                    _ => return Err(unknown(s)),
                }
            }
            "ablate" => {
                let a = &mut self.ablate;
                match s.key.as_str() {
                    "axis" => a.axis = value(s)?,
                    "grid" => a.grid = list(s, |v| Ok(v.to_string()))?,
                    "max_cells" => a.max_cells = value(s)?,
                    _ => return Err(unknown(s)),
                }
            }
            "gradcheck" => {
                let g = &mut self.gradcheck;
                if !apply_fusion(&mut g.kind, &mut g.fusion, s)? {
                    match s.key.as_str() {
                        "text_len" => g.input.text_len = value(s)?,
                        "grid_h" => g.input.grid_h = value(s)?,
                        "grid_w" => g.input.grid_w = value(s)?,
                        "channels" => g.input.channels = value(s)?,
                        "step" => g.step = value(s)?,
                        "tolerance" => g.tolerance = value(s)?,
                        _ => return Err(unknown(s)),
                    }
                }
            }
            other => {
                return Err(s.error(format!(
                    "unknown section `{other}` (expected one of {})",
                    SECTIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Task specs in training order.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|&kind| TaskSpec { kind, ..self.task.clone() })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: jar_core::error::Error| CliError::Usage(e.to_string());
        if self.jobs == 0 {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(CliError::Usage("task.kinds lists no tasks".into()));
        }
        self.fusion.validate().map_err(invalid)?;
        for spec in self.task_specs() {
            spec.validate().map_err(invalid)?;
        }
        self.train.validate().map_err(invalid)?;
        TaskMixState::new(self.tasks.len(), self.decay, self.floor).map_err(invalid)?;
        if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(CliError::Usage("gradcheck step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

fn unknown(s: &Setting) -> CliError {
    s.error(format!("unknown key `{}` in [{}]", s.key, s.section))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let s = parse_text("# top\n[model]\nkind = concat # trailing\n\n[train]\nsteps=5\n", "c.cfg").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], Setting::new("model", "kind", "concat", "c.cfg:3"));
        assert_eq!(s[1].origin, "c.cfg:6");
    }

    #[test]
    fn errors_name_the_line() {
        let err = |text: &str| parse_text(text, "c.cfg").unwrap_err().to_string();
        assert!(err("steps = 3").starts_with("c.cfg:1: key outside"));
        assert!(err("[model]\n[bogus]").starts_with("c.cfg:2: unknown section"));
        assert!(err("[model]\nkind").starts_with("c.cfg:2: expected"));
        assert!(err("[model]\nkind=a\nkind=b").starts_with("c.cfg:3: duplicate"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply(&Setting::new("model", "depth", "3", "c.cfg:4")).unwrap_err();
        assert_eq!(e.to_string(), "c.cfg:4: unknown key `depth` in [model]");
        assert_eq!(e.exit_code(), 2);
        let e = cfg.apply(&Setting::new("train", "steps", "many", "c.cfg:9")).unwrap_err();
        assert!(e.to_string().starts_with("c.cfg:9: invalid value `many`"));
        assert!(cfg.apply(&Setting::new("model", "kind", "gru", "x")).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = [parse_override("train.steps=7").unwrap(), parse_override("train.steps = 9").unwrap()];
        let cfg = RunConfig::load(None, &o).unwrap();
        assert_eq!(cfg.train.steps, 9);
        assert!(parse_override("steps=3").is_err());
        assert!(parse_override("train.steps").is_err());
    }

    #[test]
    fn lists_and_seed() {
        let o = [
            parse_override("task.kinds=presence, spatial").unwrap(),
            parse_override("sweep.grid=1,2,3").unwrap(),
            parse_override("run.seed=42").unwrap(),
        ];
        let cfg = RunConfig::load(None, &o).unwrap();
        assert_eq!(cfg.tasks, vec![TaskKind::Presence, TaskKind::Spatial]);
        assert_eq!(cfg.sweep.grid, vec![1, 2, 3]);
        assert_eq!(cfg.train.seed, 42);
    }

    #[test]
    fn inconsistent_configs_fail_validation() {
        let o = [parse_override("model.layers=3").unwrap()];
        assert_eq!(RunConfig::load(None, &o).unwrap_err().exit_code(), 2);
        let o = [parse_override("run.jobs=0").unwrap()];
        assert!(RunConfig::load(None, &o).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = RunConfig::load(Some(Path::new("/nonexistent/run.cfg")), &[]).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/run.cfg"));
        assert_eq!(e.exit_code(), 2);
    }
}
