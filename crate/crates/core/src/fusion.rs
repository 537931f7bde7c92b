//! Joint adaptive representation: latent resampling of each modality followed
//! by iterative tanh-gated cross-attention fusion, plus the comparison
//! baselines (concatenation, text-query cross-attention, Perceiver-style
//! repeated resampling and spatial attention-map resampling).
//!
//! The pipeline for the main model is
//!
//! ```text
//! image [H×W×C] --flatten, W_1, +pos--> [M×D] --latent attention--> f_N [N×D]
//! text  [L×D]   -----------------------------latent attention--> t_N [N×D]
//! x_1 = t_N
//! for i in 1..=K:
//!     P   = Ln(x_i) + tanh(α)·Attn(Ln(x_i), Ln(f_N))
//!     F_i = T_i(P + tanh(β)·MLP(P))            T_i: total_layers/K layers
//!     x_{i+1} = combine(F_i, t_N)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Coef, Graph, OpCounter, Var};
use crate::nn::{
    self, multi_head_attention, mlp_forward, transformer_layer, AttentionParams, LayerNormParams,
    MlpParams, TransformerLayerParams,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Standard deviation of the learned latent queries and position embeddings.
pub const EMBED_STD: f64 = 0.02;

/// How the next iteration's query input is formed from `F_i` and `t_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CombinationMode {
    /// `F_i`
    None,
    /// `F_i + t_N`
    Residual,
    /// `tanh(λ_i)·F_i + t_N`
    Weighted,
}

impl CombinationMode {
    pub const ALL: [CombinationMode; 3] = [Self::None, Self::Residual, Self::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Residual => "residual",
            Self::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown combination mode `{s}` (none, residual, weighted)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    Latent,
    Spatial,
}

impl ResampleMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Latent => "latent",
            Self::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "spatial" => Ok(Self::Spatial),
            _ => Err(Error::Config(format!("unknown resample mode `{s}` (latent, spatial)"))),
        }
    }
}

/// Fusion strategy. `Spatial` is the main model with attention-map image
/// resampling in place of latent attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionKind {
    Jar,
    Concat,
    CrossAttn,
    Perceiver,
    Spatial,
}

impl FusionKind {
    /// Declaration order; also the row order of sweeps.
    pub const ALL: [FusionKind; 5] = [Self::Jar, Self::Concat, Self::CrossAttn, Self::Perceiver, Self::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Self::Jar => "jar",
            Self::Concat => "concat",
            Self::CrossAttn => "crossattn",
            Self::Perceiver => "perceiver",
            Self::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind `{s}` (jar, concat, crossattn, perceiver, spatial)")))
    }

    /// Whether the kind uses latent tokens and iterations.
    pub fn is_iterative(self) -> bool {
        matches!(self, Self::Jar | Self::Perceiver | Self::Spatial)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Latent token count `N`.
    pub latents: usize,
    /// Iteration count `K`.
    pub iterations: usize,
    /// Transformer layers in the fusion stack, split evenly over iterations.
    pub total_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub combination: CombinationMode,
    pub resample: ResampleMode,
    /// Learned absolute position embeddings on the projected image tokens.
    pub image_positions: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            latents: 64,
            iterations: 4,
            total_layers: 32,
            width: 768,
            heads: 12,
            mlp_ratio: nn::MLP_RATIO,
            combination: CombinationMode::Weighted,
            resample: ResampleMode::Latent,
            image_positions: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latents", self.latents),
            ("iterations", self.iterations),
            ("total_layers", self.total_layers),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.total_layers.is_multiple_of(self.iterations) {
            return Err(Error::Config(format!(
                "total_layers {} is not divisible by iterations {}",
                self.total_layers, self.iterations
            )));
        }
        nn::check_heads(self.width, self.heads)
    }

    pub fn layers_per_iteration(&self) -> usize {
        self.total_layers / self.iterations
    }
}

/// Token counts of the two modalities entering fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn image_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn validate(&self) -> Result<()> {
        if self.text_len == 0 || self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::Config(format!("input shape {self:?} must be positive")));
        }
        Ok(())
    }
}

/// Text tokens `[L×D]` and an image feature grid `[H×W×C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub text: Tensor,
    pub image: Tensor,
}

impl ModalityFeatures {
    pub fn new(text: Tensor, image: Tensor) -> Result<Self> {
        if text.shape().len() != 2 {
            return dim_err("modality_features", text.shape(), &[0, 0]);
        }
        if image.shape().len() != 3 {
            return dim_err("modality_features", image.shape(), &[0, 0, 0]);
        }
        if !text.is_finite() || !image.is_finite() {
            return Err(Error::NonFinite("modality_features"));
        }
        Ok(Self { text, image })
    }

    pub fn shape(&self) -> InputShape {
        let s = self.image.shape();
        InputShape {
            text_len: self.text.rows(),
            grid_h: s[0],
            grid_w: s[1],
            channels: s[2],
        }
    }
}

/// Image-to-width projection `W_1` (with bias) and optional position table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub positions: Option<ParamId>,
    pub channels: usize,
    pub width: usize,
}

impl ProjectionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        tokens: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal("proj.w", &[channels, width], 1.0 / libm::sqrt(channels as f64), rng)?,
            bias: store.constant("proj.b", &[width], 0.0)?,
            positions: tokens
                .map(|m| store.normal("proj.pos", &[m, width], EMBED_STD, rng))
                .transpose()?,
            channels,
            width,
        })
    }
}

/// Flattens `image [H×W×C]` to `[M×C]`, projects to `[M×D]` and adds positions.
pub fn project_image(g: &mut Graph, image: Var, p: &ProjectionParams) -> Result<Var> {
    let [h, w, c] = *g.shape(image) else {
        return dim_err("project_image", g.shape(image), &[0, 0, p.channels]);
    };
    if c != p.channels {
        return dim_err("project_image", g.shape(image), &[h, w, p.channels]);
    }
    let flat = g.reshape(image, &[h * w, c])?;
    let (wt, b) = (g.param(p.weight), g.param(p.bias));
    let projected = g.linear(flat, wt, b)?;
    match p.positions {
        Some(pos) => {
            let pos = g.param(pos);
            if g.shape(pos)[0] != h * w {
                return dim_err("project_image", g.shape(pos), &[h * w, p.width]);
            }
            g.add(projected, pos)
        }
        None => Ok(projected),
    }
}

/// Learned query tokens plus the attention that pools one modality onto them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentResampler {
    pub latents: ParamId,
    pub attn: AttentionParams,
}

impl LatentResampler {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            latents: store.normal(&format!("{prefix}.latents"), &[cfg.latents, cfg.width], EMBED_STD, rng)?,
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), cfg.width, cfg.heads, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        let latents = g.param(self.latents);
        latent_resample(g, inputs, latents, &self.attn)
    }
}

/// Cross-attention with `latents [N×D]` as queries over `inputs [M×D]`;
/// the attention output projection plays the role of `W_2`. Output is `N×D`.
pub fn latent_resample(g: &mut Graph, inputs: Var, latents: Var, attn: &AttentionParams) -> Result<Var> {
    multi_head_attention(g, latents, inputs, attn)
}

/// `N` softmax maps over the `M` image tokens, each pooling one output token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialResampler {
    /// `[N×D]`; row `n` scores every token for map `n`.
    pub maps: ParamId,
}

pub fn spatial_resample(g: &mut Graph, inputs: Var, maps: Var) -> Result<Var> {
    let logits = g.matmul_nt(maps, inputs)?;
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageResampler {
    Latent(LatentResampler),
    Spatial(SpatialResampler),
}

impl ImageResampler {
    pub fn apply(&self, g: &mut Graph, inputs: Var) -> Result<Var> {
        match self {
            Self::Latent(r) => r.apply(g, inputs),
            Self::Spatial(s) => {
                let maps = g.param(s.maps);
                spatial_resample(g, inputs, maps)
            }
        }
    }
}

/// Per-modality resamplers; text and image never share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentBank {
    pub text: LatentResampler,
    pub image: ImageResampler,
}

/// Parameters of the gated fusion block and the per-iteration stacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    /// `λ_i` for iterations `2..=K` (used by the weighted combination).
    pub lambdas: Vec<ParamId>,
    pub query_norm: LayerNormParams,
    pub kv_norm: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub mlp: MlpParams,
    /// `layers[i]` is the stack applied after the fusion block in iteration `i`.
    pub layers: Vec<Vec<TransformerLayerParams>>,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        with_lambdas: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let alpha = store.constant("fuse.alpha", &[1], 0.0)?;
        let beta = store.constant("fuse.beta", &[1], 0.0)?;
        let lambdas = if with_lambdas {
            (2..=cfg.iterations)
                .map(|i| store.constant(&format!("fuse.lambda{i}"), &[1], 0.0))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let query_norm = LayerNormParams::init(store, "fuse.ln_q", cfg.width)?;
        let kv_norm = LayerNormParams::init(store, "fuse.ln_kv", cfg.width)?;
        let cross_attn = AttentionParams::init(store, "fuse.attn", cfg.width, cfg.heads, rng)?;
        let mlp = MlpParams::init(store, "fuse.mlp", cfg.width, cfg.mlp_ratio, rng)?;
        let mut layers = Vec::with_capacity(cfg.iterations);
        for i in 0..cfg.iterations {
            let stack = (0..cfg.layers_per_iteration())
                .map(|j| {
                    let prefix = format!("iter{}.layer{}", i + 1, j + 1);
                    TransformerLayerParams::init(store, &prefix, cfg.width, cfg.heads, cfg.mlp_ratio, rng)
                })
                .collect::<Result<_>>()?;
            layers.push(stack);
        }
        Ok(Self {
            alpha,
            beta,
            lambdas,
            query_norm,
            kv_norm,
            cross_attn,
            mlp,
            layers,
        })
    }
}

/// `P = Ln(t) + tanh(α)·Attn(Ln(t), Ln(f))`, then `P + tanh(β)·MLP(P)`.
pub fn gated_cross_fuse(g: &mut Graph, t: Var, f: Var, p: &FusionParams) -> Result<Var> {
    if g.shape(t) != g.shape(f) {
        return dim_err("gated_cross_fuse", g.shape(t), g.shape(f));
    }
    let tn = p.query_norm.apply(g, t)?;
    let fn_ = p.kv_norm.apply(g, f)?;
    let attended = multi_head_attention(g, tn, fn_, &p.cross_attn)?;
    let alpha = g.param(p.alpha);
    let cross = g.blend(tn, attended, Coef::Const(1.0), Coef::Tanh(alpha))?;
    let m = mlp_forward(g, cross, &p.mlp)?;
    let beta = g.param(p.beta);
    g.blend(cross, m, Coef::Const(1.0), Coef::Tanh(beta))
}

/// Query input of iteration `i` (zero-based, `i ≥ 1`).
fn combine(g: &mut Graph, prev: Var, text: Var, i: usize, mode: CombinationMode, p: &FusionParams) -> Result<Var> {
    let (cf, ct) = match mode {
        CombinationMode::None => (Coef::Const(1.0), Coef::Const(0.0)),
        CombinationMode::Residual => (Coef::Const(1.0), Coef::Const(1.0)),
        CombinationMode::Weighted => {
            let lambda = p
                .lambdas
                .get(i - 1)
                .ok_or_else(|| Error::Config(format!("no combination weight for iteration {}", i + 1)))?;
            (Coef::Tanh(g.param(*lambda)), Coef::Const(1.0))
        }
    };
    g.blend(prev, text, cf, ct)
}

/// Runs `K` rounds of gated fusion plus transformer stacks. The image latents
/// `f` are fixed; only the query path is updated between rounds.
pub fn iterative_refine(g: &mut Graph, t: Var, f: Var, cfg: &FusionConfig, p: &FusionParams) -> Result<Var> {
    cfg.validate()?;
    if p.layers.len() != cfg.iterations {
        return Err(Error::Config(format!(
            "parameters hold {} iterations, config asks for {}",
            p.layers.len(),
            cfg.iterations
        )));
    }
    let mut features = t;
    for (i, stack) in p.layers.iter().enumerate() {
        let query = if i == 0 { t } else { combine(g, features, t, i, cfg.combination, p)? };
        features = gated_cross_fuse(g, query, f, p)?;
        for layer in stack {
            features = transformer_layer(g, features, layer)?;
        }
    }
    Ok(features)
}

/// Cross-attention baseline layer: text attends to image tokens, then an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttnLayerParams {
    pub norm_q: LayerNormParams,
    pub norm_kv: LayerNormParams,
    pub attn: AttentionParams,
    pub norm_mlp: LayerNormParams,
    pub mlp: MlpParams,
}

impl CrossAttnLayerParams {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNormParams::init(store, &format!("{prefix}.ln_q"), cfg.width)?,
            norm_kv: LayerNormParams::init(store, &format!("{prefix}.ln_kv"), cfg.width)?,
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), cfg.width, cfg.heads, rng)?,
            norm_mlp: LayerNormParams::init(store, &format!("{prefix}.ln_mlp"), cfg.width)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), cfg.width, cfg.mlp_ratio, rng)?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var, image: Var) -> Result<Var> {
        let q = self.norm_q.apply(g, x)?;
        let kv = self.norm_kv.apply(g, image)?;
        let a = multi_head_attention(g, q, kv, &self.attn)?;
        let x = g.add(x, a)?;
        let n = self.norm_mlp.apply(g, x)?;
        let m = mlp_forward(g, n, &self.mlp)?;
        g.add(x, m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FusionBody {
    /// Main model; `bank.image` is spatial for [`FusionKind::Spatial`].
    Jar { bank: LatentBank, fusion: FusionParams },
    /// Resamples both modalities again in every iteration, using the running
    /// features as queries after the first.
    Perceiver {
        text: LatentResampler,
        image: LatentResampler,
        fusion: FusionParams,
    },
    /// Self-attention stack over the `L+M` concatenated tokens.
    Concat { layers: Vec<TransformerLayerParams> },
    /// Text tokens cross-attend to all image tokens in every layer.
    CrossAttn { layers: Vec<CrossAttnLayerParams> },
}

/// Output of a standalone fusion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub features: Tensor,
    pub flops: OpCounter,
    pub activation_values: u64,
}

/// Parameter handles and hyperparameters of one fusion architecture. Values
/// live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub kind: FusionKind,
    pub config: FusionConfig,
    pub input: InputShape,
    pub projection: ProjectionParams,
    pub body: FusionBody,
}

impl FusionModel {
    /// Registers all parameters of `kind` in `store`.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: FusionKind,
        config: &FusionConfig,
        input: InputShape,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        input.validate()?;
        let mut config = config.clone();
        let kind = match (kind, config.resample) {
            (FusionKind::Jar, ResampleMode::Spatial) => FusionKind::Spatial,
            (FusionKind::Spatial, _) => {
                config.resample = ResampleMode::Spatial;
                FusionKind::Spatial
            }
            (k, _) => {
                config.resample = ResampleMode::Latent;
                k
            }
        };
        let tokens = config.image_positions.then(|| input.image_tokens());
        let projection = ProjectionParams::init(store, input.channels, config.width, tokens, rng)?;
        let body = match kind {
            FusionKind::Jar | FusionKind::Spatial => {
                let text = LatentResampler::init(store, "text", &config, rng)?;
                let image = if kind == FusionKind::Spatial {
                    ImageResampler::Spatial(SpatialResampler {
                        maps: store.normal("image.maps", &[config.latents, config.width], EMBED_STD, rng)?,
                    })
                } else {
                    ImageResampler::Latent(LatentResampler::init(store, "image", &config, rng)?)
                };
                let fusion = FusionParams::init(store, &config, true, rng)?;
                FusionBody::Jar {
                    bank: LatentBank { text, image },
                    fusion,
                }
            }
            FusionKind::Perceiver => FusionBody::Perceiver {
                text: LatentResampler::init(store, "text", &config, rng)?,
                image: LatentResampler::init(store, "image", &config, rng)?,
                fusion: FusionParams::init(store, &config, false, rng)?,
            },
            FusionKind::Concat => FusionBody::Concat {
                layers: (0..config.total_layers)
                    .map(|j| {
                        let prefix = format!("layer{}", j + 1);
                        TransformerLayerParams::init(store, &prefix, config.width, config.heads, config.mlp_ratio, rng)
                    })
                    .collect::<Result<_>>()?,
            },
            FusionKind::CrossAttn => FusionBody::CrossAttn {
                layers: (0..config.total_layers)
                    .map(|j| CrossAttnLayerParams::init(store, &format!("layer{}", j + 1), &config, rng))
                    .collect::<Result<_>>()?,
            },
        };
        Ok(Self {
            kind,
            config,
            input,
            projection,
            body,
        })
    }

    /// Builds a model and a fresh store seeded from `seed`.
    pub fn new(kind: FusionKind, config: &FusionConfig, input: InputShape, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::build(&mut store, kind, config, input, &mut seeded(seed))?;
        Ok((model, store))
    }

    /// Rows of the fused output for this architecture.
    pub fn output_tokens(&self) -> usize {
        match self.kind {
            FusionKind::Concat => self.input.text_len + self.input.image_tokens(),
            FusionKind::CrossAttn => self.input.text_len,
            _ => self.config.latents,
        }
    }

    /// Records the fusion forward pass on `g` and returns its output node.
    pub fn forward(&self, g: &mut Graph, text: Var, image: Var) -> Result<Var> {
        if g.shape(text).len() != 2 || g.shape(text)[1] != self.config.width {
            return dim_err("fusion text", g.shape(text), &[self.input.text_len, self.config.width]);
        }
        let image_tokens = project_image(g, image, &self.projection)?;
        match &self.body {
            FusionBody::Jar { bank, fusion } => {
                let f = bank.image.apply(g, image_tokens)?;
                let t = bank.text.apply(g, text)?;
                iterative_refine(g, t, f, &self.config, fusion)
            }
            FusionBody::Perceiver { text: tr, image: ir, fusion } => {
                let mut features = text;
                for (i, stack) in fusion.layers.iter().enumerate() {
                    let (f, t) = if i == 0 {
                        (ir.apply(g, image_tokens)?, tr.apply(g, text)?)
                    } else {
                        (
                            latent_resample(g, image_tokens, features, &ir.attn)?,
                            latent_resample(g, text, features, &tr.attn)?,
                        )
                    };
                    features = gated_cross_fuse(g, t, f, fusion)?;
                    for layer in stack {
                        features = transformer_layer(g, features, layer)?;
                    }
                }
                Ok(features)
            }
            FusionBody::Concat { layers } => {
                let mut x = g.concat_rows(&[text, image_tokens])?;
                for layer in layers {
                    x = transformer_layer(g, x, layer)?;
                }
                Ok(x)
            }
            FusionBody::CrossAttn { layers } => {
                let mut x = text;
                for layer in layers {
                    x = layer.apply(g, x, image_tokens)?;
                }
                Ok(x)
            }
        }
    }

    /// Standalone pass over concrete features, returning output and costs.
    pub fn run(&self, store: &ParamStore, features: &ModalityFeatures) -> Result<FusionOutput> {
        let mut g = Graph::with_params(store);
        let text = g.input(&features.text);
        let image = g.input(&features.image);
        let out = self.forward(&mut g, text, image)?;
        Ok(FusionOutput {
            features: g.tensor(out),
            flops: g.counter().clone(),
            activation_values: g.activation_values(),
        })
    }

    /// Names of the parameters owned by this model, in store order.
    pub fn param_names<'s>(&self, store: &'s ParamStore) -> Vec<&'s str> {
        store.iter().map(|(_, n, _)| n).collect()
    }
}

/// Main-model forward pass (latent or spatial image resampling).
pub fn jar_forward(model: &FusionModel, store: &ParamStore, features: &ModalityFeatures) -> Result<FusionOutput> {
    if !matches!(model.kind, FusionKind::Jar | FusionKind::Spatial) {
        return Err(Error::Config(format!("jar_forward given a {} model", model.kind.name())));
    }
    model.run(store, features)
}

/// Baseline forward pass; `kind` must match the model that was built.
pub fn baseline_forward(
    kind: FusionKind,
    model: &FusionModel,
    store: &ParamStore,
    features: &ModalityFeatures,
) -> Result<FusionOutput> {
    if kind == FusionKind::Jar || kind != model.kind {
        return Err(Error::Config(format!(
            "baseline `{}` does not match model `{}`",
            kind.name(),
            model.kind.name()
        )));
    }
    model.run(store, features)
}

/// Zeroes every parameter whose name starts with one of `prefixes`.
pub fn zero_params(store: &mut ParamStore, prefixes: &[&str]) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Short group label of a parameter name (`iter2.layer1.attn.wq` → `iter2`).
pub fn param_group(name: &str) -> String {
    name.split('.').next().unwrap_or(name).into()
}

/// Moves a freshly initialised model to a generic point: gates get random
/// values in roughly `[0.2, 0.8]` and latent queries and spatial maps get
/// unit-scale entries. At initialisation the latents are nearly equal, which
/// makes query/key gradients vanish below finite-difference resolution.
pub fn desymmetrize(store: &mut ParamStore, seed: u64) {
    let mut rng = seeded(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id);
        let gate = matches!(name, "fuse.alpha" | "fuse.beta") || name.starts_with("fuse.lambda");
        let embed = name.ends_with(".latents") || name == "image.maps";
        if !(gate || embed) {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v = if gate { 0.5 + 0.15 * z } else { z };
        }
    }
}

/// Finite-difference check of every parameter of `model` on the scalar
/// `sum(output ⊙ R)` with a fixed random `R`.
pub fn model_grad_check(
    model: &FusionModel,
    store: &mut ParamStore,
    features: &ModalityFeatures,
    h: f64,
    tol: f64,
    seed: u64,
    fault: Option<&'static str>,
) -> Result<crate::gradcheck::GradCheckReport> {
    let mut rng = seeded(seed);
    let n = model.output_tokens() * model.config.width;
    let r: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let r = Tensor::new(&[model.output_tokens(), model.config.width], r)?;
    crate::gradcheck::grad_check(store, h, tol, |g| {
        if let Some(op) = fault {
            g.inject_backward_fault(op);
        }
        let text = g.input(&features.text);
        let image = g.input(&features.image);
        let out = model.forward(g, text, image)?;
        let weights = g.input(&r);
        let y = g.mul(out, weights)?;
        Ok(g.sum(y))
    })
}
