//! Synthetic visual question answering over grids of coloured shapes.
//!
//! A scene is an `H×W` grid in which some cells hold an object with one of
//! `colors` colours and one of `shapes` shapes. Each cell is encoded as a
//! one-hot colour block followed by a one-hot shape block (empty cells are
//! zero), plus Gaussian noise, so `C = colors + shapes`.
//!
//! Questions are three tokens from a shared vocabulary:
//!
//! | task | question | answer |
//! |---|---|---|
//! | presence | `PRES c s` | 1 iff an object of colour `c` and shape `s` exists |
//! | counting | `COUNT c ANY` | number of objects of colour `c` |
//! | spatial | `LEFT a b` | 1 iff the `a` object lies in a column left of the `b` object |

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

pub const TOKEN_PRESENCE: usize = 0;
pub const TOKEN_COUNT: usize = 1;
pub const TOKEN_LEFT: usize = 2;
pub const TOKEN_ANY: usize = 3;
const RESERVED_TOKENS: usize = 4;

/// Length of every question.
pub const QUESTION_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Presence,
    Counting,
    Spatial,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::Presence, Self::Counting, Self::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Self::Presence => "presence",
            Self::Counting => "counting",
            Self::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (presence, counting, spatial)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub colors: usize,
    pub shapes: usize,
    /// Upper bound on objects besides the ones the question is about.
    pub max_distractors: usize,
    /// Largest count asked about in the counting task.
    pub max_count: usize,
    /// Standard deviation of the per-channel noise.
    pub noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Presence,
            grid_h: 6,
            grid_w: 6,
            colors: 4,
            shapes: 3,
            max_distractors: 3,
            max_count: 3,
            noise: 0.1,
        }
    }
}

impl TaskSpec {
    pub fn channels(&self) -> usize {
        self.colors + self.shapes
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED_TOKENS + self.colors + self.shapes
    }

    pub fn classes(&self) -> usize {
        match self.kind {
            TaskKind::Presence | TaskKind::Spatial => 2,
            TaskKind::Counting => self.max_count + 1,
        }
    }

    pub fn color_token(&self, c: usize) -> usize {
        RESERVED_TOKENS + c
    }

    pub fn shape_token(&self, s: usize) -> usize {
        RESERVED_TOKENS + self.colors + s
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(m.into()));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid must be non-empty");
        }
        if self.colors == 0 || self.shapes == 0 {
            return bad("need at least one colour and one shape");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        let needed = match self.kind {
            TaskKind::Presence => 1 + self.max_distractors,
            TaskKind::Counting => {
                if self.max_count == 0 {
                    return bad("counting needs max_count ≥ 1");
                }
                if self.max_distractors > 0 && self.colors < 2 {
                    return bad("counting distractors need a second colour");
                }
                self.max_count + self.max_distractors
            }
            TaskKind::Spatial => {
                if self.colors < 2 {
                    return bad("spatial relations need two colours");
                }
                if self.grid_w < 2 {
                    return bad("spatial relations need two columns");
                }
                if self.max_distractors > 0 && self.colors < 3 {
                    return bad("spatial distractors need a third colour");
                }
                2 + self.max_distractors
            }
        };
        if needed > self.cells() {
            return Err(Error::Generation(format!(
                "{needed} objects do not fit in {} cells",
                self.cells()
            )));
        }
        Ok(())
    }
}

/// One question about one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[H×W×C]`
    pub image: Tensor,
    pub question: Vec<usize>,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Object {
    color: usize,
    shape: usize,
}

struct Scene {
    cells: Vec<Option<Object>>,
}

impl Scene {
    fn new(spec: &TaskSpec) -> Self {
        Self {
            cells: vec![None; spec.cells()],
        }
    }

    fn encode(&self, spec: &TaskSpec, rng: &mut Rng) -> Tensor {
        let c = spec.channels();
        let mut data = vec![0.0; spec.cells() * c];
        for (i, cell) in self.cells.iter().enumerate() {
            if let Some(o) = cell {
                data[i * c + o.color] = 1.0;
                data[i * c + spec.colors + o.shape] = 1.0;
            }
        }
        if spec.noise > 0.0 {
            let normal = Normal::new(0.0, spec.noise).expect("validated noise");
            for v in &mut data {
                *v += normal.sample(rng);
            }
        }
        Tensor::new(&[spec.grid_h, spec.grid_w, c], data).expect("scene shape")
    }
}

fn random_object(spec: &TaskSpec, rng: &mut Rng, allowed: impl Fn(Object) -> bool) -> Object {
    loop {
        let o = Object {
            color: rng.random_range(0..spec.colors),
            shape: rng.random_range(0..spec.shapes),
        };
        if allowed(o) {
            return o;
        }
    }
}

/// Places `objects` in distinct random cells.
fn place(scene: &mut Scene, cells: &[usize], objects: &[Object]) {
    for (&cell, &o) in cells.iter().zip(objects) {
        scene.cells[cell] = Some(o);
    }
}

fn presence(spec: &TaskSpec, rng: &mut Rng) -> SyntheticSample {
    let target = random_object(spec, rng, |_| true);
    let planted = rng.random_bool(0.5);
    let mut objects = Vec::new();
    if planted {
        objects.push(target);
    }
    // With a single colour and shape every object is the target.
    let distractors = if spec.colors * spec.shapes > 1 {
        rng.random_range(0..=spec.max_distractors)
    } else {
        0
    };
    for _ in 0..distractors {
        objects.push(random_object(spec, rng, |o| o != target));
    }
    let mut scene = Scene::new(spec);
    let cells = sample(rng, spec.cells(), objects.len()).into_vec();
    place(&mut scene, &cells, &objects);
    SyntheticSample {
        image: scene.encode(spec, rng),
        question: vec![TOKEN_PRESENCE, spec.color_token(target.color), spec.shape_token(target.shape)],
        answer: planted as usize,
    }
}

fn counting(spec: &TaskSpec, rng: &mut Rng) -> SyntheticSample {
    let color = rng.random_range(0..spec.colors);
    let count = rng.random_range(0..=spec.max_count);
    let mut objects: Vec<Object> = (0..count).map(|_| random_object(spec, rng, |o| o.color == color)).collect();
    let distractors = if spec.colors > 1 {
        rng.random_range(0..=spec.max_distractors)
    } else {
        0
    };
    for _ in 0..distractors {
        objects.push(random_object(spec, rng, |o| o.color != color));
    }
    let mut scene = Scene::new(spec);
    let cells = sample(rng, spec.cells(), objects.len()).into_vec();
    place(&mut scene, &cells, &objects);
    SyntheticSample {
        image: scene.encode(spec, rng),
        question: vec![TOKEN_COUNT, spec.color_token(color), TOKEN_ANY],
        answer: count,
    }
}

fn spatial(spec: &TaskSpec, rng: &mut Rng) -> SyntheticSample {
    let pair = sample(rng, spec.colors, 2).into_vec();
    let (a, b) = (pair[0], pair[1]);
    let cols = sample(rng, spec.grid_w, 2).into_vec();
    let (row_a, row_b) = (rng.random_range(0..spec.grid_h), rng.random_range(0..spec.grid_h));
    let cell_a = row_a * spec.grid_w + cols[0];
    let cell_b = row_b * spec.grid_w + cols[1];
    let mut scene = Scene::new(spec);
    scene.cells[cell_a] = Some(random_object(spec, rng, |o| o.color == a));
    scene.cells[cell_b] = Some(random_object(spec, rng, |o| o.color == b));
    let distractors = if spec.colors > 2 {
        rng.random_range(0..=spec.max_distractors)
    } else {
        0
    };
    let free: Vec<usize> = (0..spec.cells()).filter(|&c| c != cell_a && c != cell_b).collect();
    for i in sample(rng, free.len(), distractors) {
        scene.cells[free[i]] = Some(random_object(spec, rng, |o| o.color != a && o.color != b));
    }
    SyntheticSample {
        image: scene.encode(spec, rng),
        question: vec![TOKEN_LEFT, spec.color_token(a), spec.color_token(b)],
        answer: (cols[0] < cols[1]) as usize,
    }
}

/// Draws one sample from `rng`.
pub fn sample_one(spec: &TaskSpec, rng: &mut Rng) -> Result<SyntheticSample> {
    spec.validate()?;
    Ok(match spec.kind {
        TaskKind::Presence => presence(spec, rng),
        TaskKind::Counting => counting(spec, rng),
        TaskKind::Spatial => spatial(spec, rng),
    })
}

/// `n` i.i.d. samples; the same seed always yields the same samples.
pub fn generate(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Generation("sample count must be at least 1".into()));
    }
    spec.validate()?;
    let mut rng = seeded(seed);
    (0..n).map(|_| sample_one(spec, &mut rng)).collect()
}

/// Recomputes the answer from the encoded scene (noise below 0.5 assumed).
pub fn answer_from_scene(spec: &TaskSpec, image: &Tensor, question: &[usize]) -> usize {
    let c = spec.channels();
    let objects: Vec<(usize, Object)> = image
        .data()
        .chunks(c)
        .enumerate()
        .filter_map(|(i, cell)| {
            let color = (0..spec.colors).find(|&k| cell[k] > 0.5)?;
            let shape = (0..spec.shapes).find(|&k| cell[spec.colors + k] > 0.5)?;
            Some((i, Object { color, shape }))
        })
        .collect();
    let color_of = |t: usize| t - RESERVED_TOKENS;
    match question[0] {
        TOKEN_PRESENCE => {
            let target = Object {
                color: color_of(question[1]),
                shape: question[2] - RESERVED_TOKENS - spec.colors,
            };
            objects.iter().any(|(_, o)| *o == target) as usize
        }
        TOKEN_COUNT => objects.iter().filter(|(_, o)| o.color == color_of(question[1])).count(),
        _ => {
            let col = |color| {
                objects
                    .iter()
                    .find(|(_, o)| o.color == color)
                    .map(|(i, _)| i % spec.grid_w)
                    .expect("spatial scene holds both colours")
            };
            (col(color_of(question[1])) < col(color_of(question[2]))) as usize
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn answers_follow_the_scene() {
        for kind in TaskKind::ALL {
            let s = spec(kind);
            for sample in generate(&s, 300, 4).unwrap() {
                assert_eq!(answer_from_scene(&s, &sample.image, &sample.question), sample.answer, "{kind:?}");
                assert_eq!(sample.image.shape(), &[6, 6, 7]);
                assert!(sample.answer < s.classes());
            }
        }
    }

    #[test]
    fn planted_and_absent_objects() {
        let s = TaskSpec { noise: 0.0, ..spec(TaskKind::Presence) };
        let samples = generate(&s, 200, 1).unwrap();
        let present = samples.iter().find(|x| x.answer == 1).unwrap();
        let absent = samples.iter().find(|x| x.answer == 0).unwrap();
        let has = |x: &SyntheticSample| {
            let (c, sh) = (x.question[1] - 4, x.question[2] - 4 - s.colors);
            x.image.data().chunks(s.channels()).any(|cell| cell[c] == 1.0 && cell[s.colors + sh] == 1.0)
        };
        assert!(has(present));
        assert!(!has(absent));
    }

    #[test]
    fn counting_three_planted() {
        let s = TaskSpec { noise: 0.0, ..spec(TaskKind::Counting) };
        let x = generate(&s, 100, 2).unwrap().into_iter().find(|x| x.answer == 3).unwrap();
        let c = x.question[1] - 4;
        let n = x.image.data().chunks(s.channels()).filter(|cell| cell[c] == 1.0).count();
        assert_eq!(n, 3);
    }

    #[test]
    fn presence_labels_are_balanced() {
        let samples = generate(&spec(TaskKind::Presence), 10_000, 9).unwrap();
        let ones = samples.iter().filter(|x| x.answer == 1).count() as f64 / 1e4;
        assert!((0.45..=0.55).contains(&ones), "{ones}");
    }

    #[test]
    fn same_seed_same_samples() {
        for kind in TaskKind::ALL {
            assert_eq!(generate(&spec(kind), 20, 5).unwrap(), generate(&spec(kind), 20, 5).unwrap());
        }
        assert_ne!(generate(&spec(TaskKind::Presence), 20, 5).unwrap(), generate(&spec(TaskKind::Presence), 20, 6).unwrap());
    }

    #[test]
    fn impossible_specs() {
        let crowded = TaskSpec { grid_h: 1, grid_w: 2, max_distractors: 3, ..spec(TaskKind::Presence) };
        assert!(matches!(generate(&crowded, 1, 0), Err(Error::Generation(_))));
        let mono = TaskSpec { colors: 1, max_distractors: 0, ..spec(TaskKind::Spatial) };
        assert!(matches!(generate(&mono, 1, 0), Err(Error::Generation(_))));
        assert!(matches!(generate(&spec(TaskKind::Presence), 0, 0), Err(Error::Generation(_))));
    }
}
