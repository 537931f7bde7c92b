//! Closed-form FLOP, parameter and activation counts for every fusion kind.
//!
//! The formulas follow the op sequence recorded by [`crate::fusion`] under the
//! convention in [`crate::graph::cost`], so for any architecture
//! `flops_total(spec).flops` equals the instrumented tape total exactly.
//!
//! Per-block totals (`q` query rows, `m` key/value rows, `D` width, `h` heads,
//! `r` MLP ratio):
//!
//! | block | FLOPs | stored values |
//! |---|---|---|
//! | attention | `4qD² + 4mD² + 4qmD + 6qmh` | `5qD + 4mD + 3qmh` |
//! | MLP | `4rqD² + 9rqD + qD` | `2rqD + qD` |
//! | layer norm | `8qD` | `qD` |
//! | transformer layer | `attn(q,q) + mlp(q) + 18qD` | `attn + mlp + 4qD` |

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::ops::{Add, AddAssign, Mul};

use crate::error::{Error, Result};
use crate::fusion::{CombinationMode, FusionConfig, FusionKind, InputShape, ResampleMode};
use crate::graph::cost;
use crate::nn;

/// FLOPs and stored activation values of a block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub flops: u64,
    pub values: u64,
}

impl Cost {
    const fn new(flops: u64, values: u64) -> Self {
        Self { flops, values }
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost::new(self.flops + o.flops, self.values + o.values)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost::new(self.flops * k, self.values * k)
    }
}

// Primitive ops.

fn matmul(m: u64, k: u64, n: u64) -> Cost {
    Cost::new(2 * m * k * n, m * n)
}

fn linear(m: u64, k: u64, n: u64) -> Cost {
    Cost::new(2 * m * k * n + m * n, m * n)
}

fn elementwise(per_elem: u64, n: u64) -> Cost {
    Cost::new(per_elem * n, n)
}

/// Ops that only move data.
fn copy(n: u64) -> Cost {
    Cost::new(0, n)
}

// Blocks.

pub fn attention_cost(q: u64, m: u64, d: u64, heads: u64) -> Cost {
    let hd = d / heads;
    let per_head = copy(q * hd)
        + copy(2 * m * hd)
        + matmul(q, hd, m)
        + elementwise(cost::SCALE, q * m)
        + elementwise(cost::SOFTMAX, q * m)
        + matmul(q, m, hd);
    matmul(q, d, d) + matmul(m, d, d) * 2 + per_head * heads + copy(q * d) + matmul(q, d, d)
}

/// Attention FLOPs for `q` queries over `m` keys/values.
pub fn flops_attention(q: u64, m: u64, d: u64, heads: u64) -> u64 {
    attention_cost(q, m, d, heads).flops
}

pub fn mlp_cost(q: u64, d: u64, ratio: u64) -> Cost {
    let hidden = ratio * d;
    linear(q, d, hidden) + elementwise(cost::GELU, q * hidden) + linear(q, hidden, d)
}

fn layer_norm(q: u64, d: u64) -> Cost {
    elementwise(cost::LAYER_NORM, q * d)
}

pub fn transformer_layer_cost(q: u64, d: u64, heads: u64, ratio: u64) -> Cost {
    layer_norm(q, d)
        + attention_cost(q, q, d, heads)
        + elementwise(cost::ADD, q * d)
        + layer_norm(q, d)
        + mlp_cost(q, d, ratio)
        + elementwise(cost::ADD, q * d)
}

fn gated_fuse_cost(n: u64, d: u64, heads: u64, ratio: u64) -> Cost {
    layer_norm(n, d) * 2
        + attention_cost(n, n, d, heads)
        + elementwise(cost::BLEND, n * d)
        + mlp_cost(n, d, ratio)
        + elementwise(cost::BLEND, n * d)
}

fn spatial_resample_cost(n: u64, m: u64, d: u64) -> Cost {
    matmul(n, d, m) + elementwise(cost::SOFTMAX, n * m) + matmul(n, m, d)
}

fn cross_attn_layer_cost(l: u64, m: u64, d: u64, heads: u64, ratio: u64) -> Cost {
    layer_norm(l, d)
        + layer_norm(m, d)
        + attention_cost(l, m, d, heads)
        + elementwise(cost::ADD, l * d)
        + layer_norm(l, d)
        + mlp_cost(l, d, ratio)
        + elementwise(cost::ADD, l * d)
}

/// Architecture description for the cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub width: usize,
    pub heads: usize,
    pub total_layers: usize,
    pub text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub latents: usize,
    pub iterations: usize,
    pub kind: FusionKind,
    pub mlp_ratio: usize,
    pub combination: CombinationMode,
    pub image_positions: bool,
}

impl Default for ArchSpec {
    /// Base-size configuration: width 768, 32 fusion layers, 14×14 image grid.
    fn default() -> Self {
        Self {
            width: 768,
            heads: 12,
            total_layers: 32,
            text_len: 16,
            grid_h: 14,
            grid_w: 14,
            channels: 768,
            latents: 64,
            iterations: 4,
            kind: FusionKind::Jar,
            mlp_ratio: nn::MLP_RATIO,
            combination: CombinationMode::Weighted,
            image_positions: true,
        }
    }
}

impl ArchSpec {
    pub fn image_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn from_parts(kind: FusionKind, config: &FusionConfig, input: InputShape) -> Self {
        let kind = match (kind, config.resample) {
            (FusionKind::Jar, ResampleMode::Spatial) => FusionKind::Spatial,
            (k, _) => k,
        };
        Self {
            width: config.width,
            heads: config.heads,
            total_layers: config.total_layers,
            text_len: input.text_len,
            grid_h: input.grid_h,
            grid_w: input.grid_w,
            channels: input.channels,
            latents: config.latents,
            iterations: config.iterations,
            kind,
            mlp_ratio: config.mlp_ratio,
            combination: config.combination,
            image_positions: config.image_positions,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            latents: self.latents,
            iterations: self.iterations,
            total_layers: self.total_layers,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            combination: self.combination,
            resample: if self.kind == FusionKind::Spatial {
                ResampleMode::Spatial
            } else {
                ResampleMode::Latent
            },
            image_positions: self.image_positions,
        }
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            text_len: self.text_len,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            channels: self.channels,
        }
    }

    /// Sets the image grid to `tokens` cells, as square as the count allows.
    pub fn with_image_tokens(mut self, tokens: usize) -> Self {
        let mut h = libm::sqrt(tokens as f64) as usize;
        while h > 1 && !tokens.is_multiple_of(h) {
            h -= 1;
        }
        self.grid_h = h.max(1);
        self.grid_w = tokens / self.grid_h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("width", self.width),
            ("heads", self.heads),
            ("total_layers", self.total_layers),
            ("text_len", self.text_len),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("latents", self.latents),
            ("iterations", self.iterations),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        nn::check_heads(self.width, self.heads)?;
        if self.kind.is_iterative() && !self.total_layers.is_multiple_of(self.iterations) {
            return Err(Error::Config(format!(
                "total_layers {} is not divisible by iterations {}",
                self.total_layers, self.iterations
            )));
        }
        Ok(())
    }
}

/// Analytical cost of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    /// Values kept alive for the backward pass (no recomputation), inputs included.
    pub peak_activation_values: u64,
}

fn forward_cost(s: &ArchSpec) -> Cost {
    let (d, h, r) = (s.width as u64, s.heads as u64, s.mlp_ratio as u64);
    let (l, m, c) = (s.text_len as u64, s.image_tokens() as u64, s.channels as u64);
    let (n, k) = (s.latents as u64, s.iterations as u64);

    let text_input = copy(l * d);
    let mut projection = copy(m * c) + copy(m * c) + linear(m, c, d);
    if s.image_positions {
        projection += elementwise(cost::ADD, m * d);
    }
    let stem = text_input + projection;

    match s.kind {
        FusionKind::Jar | FusionKind::Spatial => {
            let image = if s.kind == FusionKind::Spatial {
                spatial_resample_cost(n, m, d)
            } else {
                attention_cost(n, m, d, h)
            };
            let per_iteration = gated_fuse_cost(n, d, h, r) + transformer_layer_cost(n, d, h, r) * (s.total_layers as u64 / k);
            stem + image
                + attention_cost(n, l, d, h)
                + per_iteration * k
                + elementwise(cost::BLEND, n * d) * (k - 1)
        }
        FusionKind::Perceiver => {
            let per_iteration = attention_cost(n, m, d, h)
                + attention_cost(n, l, d, h)
                + gated_fuse_cost(n, d, h, r)
                + transformer_layer_cost(n, d, h, r) * (s.total_layers as u64 / k);
            stem + per_iteration * k
        }
        FusionKind::Concat => {
            stem + copy((l + m) * d) + transformer_layer_cost(l + m, d, h, r) * s.total_layers as u64
        }
        FusionKind::CrossAttn => stem + cross_attn_layer_cost(l, m, d, h, r) * s.total_layers as u64,
    }
}

fn param_count(s: &ArchSpec) -> u64 {
    let (d, r) = (s.width as u64, s.mlp_ratio as u64);
    let (m, c, n, k) = (s.image_tokens() as u64, s.channels as u64, s.latents as u64, s.iterations as u64);
    let attn = 4 * d * d;
    let mlp = 2 * r * d * d + r * d + d;
    let norm = 2 * d;
    let layer = 2 * norm + attn + mlp;
    let projection = c * d + d + if s.image_positions { m * d } else { 0 };
    let resampler = n * d + attn;
    let fuse = |lambdas: u64| 2 + lambdas + 2 * norm + attn + mlp + layer * s.total_layers as u64;
    projection
        + match s.kind {
            FusionKind::Jar => 2 * resampler + fuse(k - 1),
            FusionKind::Spatial => resampler + n * d + fuse(k - 1),
            FusionKind::Perceiver => 2 * resampler + fuse(0),
            FusionKind::Concat => layer * s.total_layers as u64,
            FusionKind::CrossAttn => (3 * norm + attn + mlp) * s.total_layers as u64,
        }
}

pub fn flops_total(spec: &ArchSpec) -> Result<CostReport> {
    spec.validate()?;
    let cost = forward_cost(spec);
    Ok(CostReport {
        flops: cost.flops,
        params: param_count(spec),
        peak_activation_values: cost.values,
    })
}

/// Swept architecture dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Image token count `M`.
    ImageSize,
    Width,
    /// Fusion layer budget.
    Depth,
    Iterations,
    /// Latent token count `N`.
    Tokens,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [Self::ImageSize, Self::Width, Self::Depth, Self::Iterations, Self::Tokens];

    pub fn name(self) -> &'static str {
        match self {
            Self::ImageSize => "image_size",
            Self::Width => "width",
            Self::Depth => "depth",
            Self::Iterations => "iterations",
            Self::Tokens => "tokens",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown axis `{s}`; valid axes: image_size, width, depth, iterations, tokens"
            ))
        })
    }

    pub fn apply(self, base: &ArchSpec, value: usize) -> ArchSpec {
        let mut s = base.clone();
        match self {
            Self::ImageSize => s = s.with_image_tokens(value),
            Self::Width => s.width = value,
            Self::Depth => s.total_layers = value,
            Self::Iterations => s.iterations = value,
            Self::Tokens => s.latents = value,
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub kind: FusionKind,
    pub report: CostReport,
}

/// One report per grid point and kind, value-major, kinds in the given order.
pub fn sweep(axis: SweepAxis, grid: &[usize], base: &ArchSpec, kinds: &[FusionKind]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no fusion kinds selected".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * kinds.len());
    for &value in grid {
        let spec = axis.apply(base, value);
        for &kind in kinds {
            let spec = ArchSpec { kind, ..spec.clone() };
            rows.push(SweepRow {
                axis,
                value,
                kind,
                report: flops_total(&spec)?,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,kind,flops,params,peak_values";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.axis.name(),
            r.value,
            r.kind.name(),
            r.report.flops,
            r.report.params,
            r.report.peak_activation_values
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::{multi_head_attention, AttentionParams};
    use crate::params::ParamStore;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn instrumented_attention(q: usize, m: usize, d: usize, heads: usize) -> (u64, u64) {
        let mut store = ParamStore::new();
        let p = AttentionParams::init(&mut store, "a", d, heads, &mut seeded(3)).unwrap();
        let mut g = Graph::with_params(&store);
        let qv = g.input(&Tensor::filled(&[q, d], 0.1));
        let kv = g.input(&Tensor::filled(&[m, d], 0.2));
        let before = g.activation_values();
        multi_head_attention(&mut g, qv, kv, &p).unwrap();
        (g.counter().total_flops(), g.activation_values() - before)
    }

    #[test]
    fn single_token_attention() {
        let (flops, values) = instrumented_attention(1, 1, 1, 1);
        assert_eq!(flops, 18);
        assert_eq!(flops_attention(1, 1, 1, 1), flops);
        assert_eq!(attention_cost(1, 1, 1, 1).values, values);
    }

    #[test]
    fn attention_matches_tape() {
        for &(q, m, d, h) in &[(3, 5, 8, 2), (2, 7, 12, 3), (4, 1, 4, 4)] {
            let (flops, values) = instrumented_attention(q, m, d, h);
            let c = attention_cost(q as u64, m as u64, d as u64, h as u64);
            assert_eq!((c.flops, c.values), (flops, values), "q={q} m={m} d={d} h={h}");
        }
    }

    #[test]
    fn doubling_queries_doubles_only_query_terms() {
        let (m, d, h) = (9, 16, 4);
        let f = |q| flops_attention(q, m, d, h);
        // query-linear part: 4qD² + 4qmD + 6qmh; the rest (4mD²) is fixed
        let fixed = 4 * m * d * d;
        assert_eq!(f(6) - fixed, 2 * (f(3) - fixed));
    }

    #[test]
    fn jar_and_perceiver_coincide_at_one_iteration() {
        let base = ArchSpec {
            iterations: 1,
            ..ArchSpec::default()
        };
        let jar = flops_total(&base).unwrap();
        let per = flops_total(&ArchSpec {
            kind: FusionKind::Perceiver,
            ..base
        })
        .unwrap();
        assert_eq!(jar.flops, per.flops);
    }

    #[test]
    fn sweep_rows_and_errors() {
        let base = ArchSpec::default();
        let rows = sweep(SweepAxis::Depth, &[8], &base, &FusionKind::ALL).unwrap();
        assert_eq!(rows.len(), FusionKind::ALL.len());
        assert!(sweep(SweepAxis::Depth, &[], &base, &FusionKind::ALL).is_err());
        assert!(SweepAxis::parse("bogus").is_err());
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("axis,value,kind,flops,params,peak_values\n"));
        assert_eq!(csv.lines().count(), 1 + FusionKind::ALL.len());
    }

    #[test]
    fn image_token_grid_factorisation() {
        let s = ArchSpec::default().with_image_tokens(196);
        assert_eq!((s.grid_h, s.grid_w), (14, 14));
        let s = ArchSpec::default().with_image_tokens(3136);
        assert_eq!((s.grid_h, s.grid_w), (56, 56));
        let s = ArchSpec::default().with_image_tokens(13);
        assert_eq!((s.grid_h, s.grid_w), (1, 13));
    }

    #[test]
    fn invalid_specs() {
        let bad = ArchSpec {
            total_layers: 30,
            ..ArchSpec::default()
        };
        assert!(matches!(flops_total(&bad), Err(Error::Config(_))));
        // non-iterative kinds ignore the iteration split
        assert!(flops_total(&ArchSpec {
            kind: FusionKind::Concat,
            ..bad
        })
        .is_ok());
    }
}
