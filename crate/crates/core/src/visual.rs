//! High-resolution image encoder, the strided-convolution down-sampling
//! projector, the resampler baseline, and the token budget planner.
//!
//! The projector is `tokens = W · Conv(features)`: one strided convolution
//! followed by one affine map, with nothing in between. The number of visual
//! tokens therefore grows with the square of `resolution / (patch · stride)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{BlockCache, BlockDims, LayerNorm, Linear, TransformerStack};
use crate::nn::ops::{self, conv_out, AttentionCache, LayerNormCache};
use crate::nn::{Init, ParamId, ParamStore, Partition, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub patch_size: usize,
    /// Patches per side of the grid the position table was created for.
    pub pretrained_grid: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Input height and width in pixels.
    pub resolution: usize,
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by patch size {}",
                self.resolution, self.patch_size
            )));
        }
        if self.pretrained_grid < 2 {
            return Err(Error::DegenerateGrid(self.pretrained_grid));
        }
        if self.grid() < 2 {
            return Err(Error::DegenerateGrid(self.grid()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub conv_channels: usize,
    pub out_dim: usize,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("projector kernel and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn output_side(&self, grid: usize) -> usize {
        conv_out(grid, self.kernel, self.stride, self.padding)
    }
}

/// Encoder output: a `g×g×D` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<F> {
    pub features: Tensor<F>,
}

impl<F: Scalar> FeatureGrid<F> {
    pub fn side(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    /// Row-major `(g·g)×D` view.
    pub fn flat(&self) -> Tensor<F> {
        let (g, d) = (self.side(), self.dim());
        self.features.clone().reshape(&[g * g, d]).expect("same size")
    }
}

/// Token sequence handed to the language model, `N×D_word`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens<F> {
    pub tokens: Tensor<F>,
}

impl<F: Scalar> VisualTokens<F> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------- planning

/// Visual tokens produced for an `h`-pixel square input with patch size `p`
/// and a `k×k` convolution of stride `s` and padding `pad`.
pub fn visual_token_count(h: usize, p: usize, s: usize, k: usize, pad: usize) -> Result<usize> {
    if p == 0 || h % p != 0 {
        return Err(Error::Config(format!("resolution {h} is not divisible by patch size {p}")));
    }
    if s == 0 || k == 0 {
        return Err(Error::Config("stride and kernel must be >= 1".into()));
    }
    let g = h / p;
    if g + 2 * pad < k {
        return Err(Error::Dimension(format!("grid side {g} too small for kernel {k} with padding {pad}")));
    }
    let side = conv_out(g, k, s, pad);
    Ok(side * side)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub limit: usize,
    pub answer: usize,
    pub reserve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub resolution: usize,
    pub grid: usize,
    pub tokens: usize,
    pub budget: TokenBudget,
}

pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_PADDING: usize = 1;
pub const DEFAULT_RESERVE: usize = 200;

/// Largest visual token count that fits next to the answer budget and the
/// instruction reserve, realized at the smallest resolution (a multiple of
/// `patch`) that reaches it.
pub fn plan_resolution(context_limit: usize, answer_budget: usize, reserve: usize, patch: usize, stride: usize) -> Result<ResolutionPlan> {
    let budget = TokenBudget { limit: context_limit, answer: answer_budget, reserve };
    if context_limit <= answer_budget + reserve {
        return Err(Error::Infeasible(format!(
            "context {context_limit} leaves nothing after answer {answer_budget} + reserve {reserve}"
        )));
    }
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch and stride must be >= 1".into()));
    }
    let room = context_limit - answer_budget - reserve;
    let mut best: Option<ResolutionPlan> = None;
    // Token count is non-decreasing in the grid side, so stop at the first overflow.
    for grid in 2.. {
        let tokens = visual_token_count(grid * patch, patch, stride, DEFAULT_KERNEL, DEFAULT_PADDING)?;
        if tokens > room {
            break;
        }
        if best.map_or(true, |b| tokens > b.tokens) {
            best = Some(ResolutionPlan { resolution: grid * patch, grid, tokens, budget });
        }
    }
    best.ok_or_else(|| Error::Infeasible(format!("{room} tokens of room is below the smallest grid")))
}

/// Resizes a pretrained `g0×g0×D` position table to `g×g×D`.
pub fn adapt_pos_embed<F: Scalar>(pretrained: &Tensor<F>, g: usize) -> Result<Tensor<F>> {
    ops::bilinear_resize(pretrained, g)
}

// ---------------------------------------------------------------- patches

/// Splits an `H×W×C` image into `(H/P)·(W/P)` flattened patches, row-major
/// over the grid, each ordered `(row, col, channel)`.
pub fn patchify<F: Scalar>(image: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let s = image.shape();
    if s.len() != 3 || s[0] % p != 0 || s[1] % p != 0 {
        return Err(Error::Config(format!("image {s:?} is not divisible into {p}-pixel patches")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Tensor::zeros(&[gh * gw, p * p * c]);
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for iy in 0..p {
                let start = ((gy * p + iy) * w + gx * p) * c;
                row[iy * p * c..(iy + 1) * p * c].copy_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify<F: Scalar>(patches: &Tensor<F>, h: usize, w: usize, c: usize, p: usize) -> Tensor<F> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            for iy in 0..p {
                let start = ((gy * p + iy) * w + gx * p) * c;
                dst[start..start + p * c].copy_from_slice(&row[iy * p * c..(iy + 1) * p * c]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------- encoder

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: TransformerStack,
    pub norm: LayerNorm,
}

pub struct EncoderCache<F> {
    patches: Tensor<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

impl VisualEncoder {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, cfg: VisualEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::VisualEncoder;
        let d = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        let std = (1.0 / patch_dim as f64).sqrt();
        let g0 = cfg.pretrained_grid;
        Ok(Self {
            cfg,
            patch_embed: Linear::new(ps, "visual.patch_embed", part, patch_dim, d, true, std, rng),
            pos_embed: ps.init("visual.pos_embed", part, &[g0, g0, d], Init::SinCos2d, rng),
            blocks: TransformerStack::new(
                ps,
                "visual",
                part,
                BlockDims { dim: d, heads: cfg.heads, mlp_ratio: cfg.mlp_ratio },
                cfg.depth,
                false,
                rng,
            ),
            norm: LayerNorm::new(ps, "visual.norm", part, d, rng),
        })
    }

    /// Encodes an `H×W×3` image with values in `[-1, 1]` into a `g×g×D` grid.
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, image: &Tensor<F>) -> Result<(FeatureGrid<F>, EncoderCache<F>)> {
        let r = self.cfg.resolution;
        image.expect_shape(&[r, r, 3], "encode_image input")?;
        let g = self.cfg.grid();
        let patches = patchify(image, self.cfg.patch_size)?;
        let mut x = self.patch_embed.forward(ps, &patches)?;
        let pos = adapt_pos_embed(ps.value(self.pos_embed), g)?;
        for (a, &b) in x.data_mut().iter_mut().zip(pos.data()) {
            *a += b;
        }
        let (h, blocks) = self.blocks.forward(ps, &x)?;
        let (y, norm) = self.norm.forward(ps, &h);
        let features = y.reshape(&[g, g, self.cfg.embed_dim])?;
        Ok((FeatureGrid { features }, EncoderCache { patches, blocks, norm }))
    }

    /// Backpropagates a `(g·g)×D` gradient. Returns the image gradient when
    /// requested.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &EncoderCache<F>, dgrid: &Tensor<F>, need_dimage: bool) -> Option<Tensor<F>> {
        let g = self.cfg.grid();
        let d = self.cfg.embed_dim;
        let dflat = dgrid.clone().reshape(&[g * g, d]).expect("grid gradient size");
        let dh = self.norm.backward(ps, &cache.norm, &dflat);
        let dx = self.blocks.backward(ps, &cache.blocks, &dh);
        if ps.is_trainable(self.pos_embed) {
            let dpos = ops::bilinear_resize_backward(&dx.clone().reshape(&[g, g, d]).expect("size"), self.cfg.pretrained_grid)
                .expect("square grid");
            ps.grad_mut(self.pos_embed).expect("trainable").add_assign(&dpos);
        }
        let dpatches = self.patch_embed.backward(ps, &cache.patches, &dx, need_dimage)?;
        let r = self.cfg.resolution;
        Some(unpatchify(&dpatches, r, r, 3, self.cfg.patch_size))
    }
}

// ---------------------------------------------------------------- projector

#[derive(Debug, Clone)]
pub struct DownsampleProjector {
    pub cfg: ProjectorConfig,
    pub in_dim: usize,
    pub kernels: ParamId,
    pub bias: ParamId,
    pub proj: Linear,
}

pub struct ProjectorCache<F> {
    chw: Tensor<F>,
    conv_tokens: Tensor<F>,
    out_side: usize,
}

impl DownsampleProjector {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, cfg: ProjectorConfig, in_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::DownsampleProjector;
        let fan_in = in_dim * cfg.kernel * cfg.kernel;
        let c = cfg.conv_channels;
        Ok(Self {
            cfg,
            in_dim,
            kernels: ps.init(
                "projector.conv.weight",
                part,
                &[c, in_dim, cfg.kernel, cfg.kernel],
                Init::Normal((1.0 / fan_in as f64).sqrt()),
                rng,
            ),
            bias: ps.init("projector.conv.bias", part, &[c], Init::Zeros, rng),
            proj: Linear::new(ps, "projector.proj", part, c, cfg.out_dim, true, (1.0 / c as f64).sqrt(), rng),
        })
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, grid: &FeatureGrid<F>) -> Result<(VisualTokens<F>, ProjectorCache<F>)> {
        let (g, d) = (grid.side(), grid.dim());
        if d != self.in_dim {
            return Err(Error::Dimension(format!("projector expects {} channels, grid has {d}", self.in_dim)));
        }
        if g + self.cfg.padding < self.cfg.kernel {
            return Err(Error::Dimension(format!("grid side {g} below kernel {} - padding {}", self.cfg.kernel, self.cfg.padding)));
        }
        let chw = grid.flat().transpose2().reshape(&[d, g, g])?;
        let conv = ops::conv2d(&chw, ps.value(self.kernels), ps.value(self.bias), self.cfg.stride, self.cfg.padding)?;
        let out_side = conv.shape()[1];
        let c = self.cfg.conv_channels;
        let conv_tokens = conv.reshape(&[c, out_side * out_side])?.transpose2();
        let tokens = self.proj.forward(ps, &conv_tokens)?;
        Ok((VisualTokens { tokens }, ProjectorCache { chw, conv_tokens, out_side }))
    }

    /// Returns the `(g·g)×D` grid gradient when requested.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &ProjectorCache<F>, dtokens: &Tensor<F>, need_dgrid: bool) -> Option<Tensor<F>> {
        let trainable = ps.is_trainable(self.kernels);
        if !trainable && !need_dgrid {
            return None;
        }
        let dconv_tokens = self.proj.backward(ps, &cache.conv_tokens, dtokens, true).expect("dx requested");
        let c = self.cfg.conv_channels;
        let s = cache.out_side;
        let dconv = dconv_tokens.transpose2().reshape(&[c, s, s]).expect("size");
        let grads = ops::conv2d_backward(&cache.chw, ps.value(self.kernels), &dconv, self.cfg.stride, self.cfg.padding)
            .expect("shapes fixed by forward");
        if let Some(gk) = ps.grad_mut(self.kernels) {
            gk.add_assign(&grads.dkernels);
        }
        if let Some(gb) = ps.grad_mut(self.bias) {
            gb.add_assign(&grads.dbias);
        }
        need_dgrid.then(|| {
            let d = self.in_dim;
            let g = cache.chw.shape()[1];
            grads.dx.reshape(&[d, g * g]).expect("size").transpose2()
        })
    }
}

// ---------------------------------------------------------------- resampler

/// One cross-attention + MLP layer of the resampler.
#[derive(Debug, Clone)]
pub struct ResamplerLayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub wq: Linear,
    pub wkv: Linear,
    pub wo: Linear,
    pub norm_ff: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Learnable queries cross-attending over the flattened feature grid. Output
/// length equals the number of queries whatever the grid size.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub queries: ParamId,
    pub layers: Vec<ResamplerLayer>,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplerConfig {
    pub queries: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
}

struct ResamplerLayerCache<F> {
    x_in: Tensor<F>,
    nq: LayerNormCache<F>,
    q_in: Tensor<F>,
    nkv: LayerNormCache<F>,
    kv_in: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    attn: AttentionCache<F>,
    attn_out: Tensor<F>,
    nff: LayerNormCache<F>,
    ff_in: Tensor<F>,
    hidden: Tensor<F>,
    act: Tensor<F>,
}

pub struct ResamplerCache<F> {
    layers: Vec<ResamplerLayerCache<F>>,
    last: Tensor<F>,
}

impl Resampler {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, cfg: ResamplerConfig, in_dim: usize, rng: &mut R) -> Result<Self> {
        if cfg.queries == 0 {
            return Err(Error::Config("resampler needs at least one query".into()));
        }
        if cfg.heads == 0 || in_dim % cfg.heads != 0 {
            return Err(Error::Config(format!("resampler dim {in_dim} not divisible by {} heads", cfg.heads)));
        }
        let part = Partition::DownsampleProjector;
        let d = in_dim;
        let layers = (0..cfg.depth)
            .map(|i| {
                let n = format!("resampler.layers.{i}");
                ResamplerLayer {
                    norm_q: LayerNorm::new(ps, &format!("{n}.norm_q"), part, d, rng),
                    norm_kv: LayerNorm::new(ps, &format!("{n}.norm_kv"), part, d, rng),
                    wq: Linear::new(ps, &format!("{n}.wq"), part, d, d, false, 0.02, rng),
                    wkv: Linear::new(ps, &format!("{n}.wkv"), part, d, 2 * d, false, 0.02, rng),
                    wo: Linear::new(ps, &format!("{n}.wo"), part, d, d, true, 0.02, rng),
                    norm_ff: LayerNorm::new(ps, &format!("{n}.norm_ff"), part, d, rng),
                    fc1: Linear::new(ps, &format!("{n}.fc1"), part, d, d * cfg.mlp_ratio, true, 0.02, rng),
                    fc2: Linear::new(ps, &format!("{n}.fc2"), part, d * cfg.mlp_ratio, d, true, 0.02, rng),
                }
            })
            .collect();
        Ok(Self {
            queries: ps.init("resampler.queries", part, &[cfg.queries, d], Init::Normal(1.0), rng),
            layers,
            out: Linear::new(ps, "resampler.out", part, d, cfg.out_dim, true, (1.0 / d as f64).sqrt(), rng),
            heads: cfg.heads,
            dim: d,
        })
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, grid: &FeatureGrid<F>) -> Result<(VisualTokens<F>, ResamplerCache<F>)> {
        if grid.dim() != self.dim {
            return Err(Error::Dimension(format!("resampler expects {} channels, grid has {}", self.dim, grid.dim())));
        }
        let feats = grid.flat();
        let d = self.dim;
        let mut x = ps.value(self.queries).clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (q_in, nq) = l.norm_q.forward(ps, &x);
            let (kv_in, nkv) = l.norm_kv.forward(ps, &feats);
            let q = l.wq.forward(ps, &q_in)?;
            let kv = l.wkv.forward(ps, &kv_in)?;
            let (mut k, mut v) = (Tensor::zeros(&[kv.rows(), d]), Tensor::zeros(&[kv.rows(), d]));
            for i in 0..kv.rows() {
                k.row_mut(i).copy_from_slice(&kv.row(i)[..d]);
                v.row_mut(i).copy_from_slice(&kv.row(i)[d..]);
            }
            let (attn_out, attn) = ops::attention(&q, &k, &v, self.heads, None)?;
            let mut h = l.wo.forward(ps, &attn_out)?;
            h.add_assign(&x);
            let (ff_in, nff) = l.norm_ff.forward(ps, &h);
            let hidden = l.fc1.forward(ps, &ff_in)?;
            let act = ops::gelu(&hidden);
            let mut y = l.fc2.forward(ps, &act)?;
            y.add_assign(&h);
            caches.push(ResamplerLayerCache { x_in: x, nq, q_in, nkv, kv_in, q, k, v, attn, attn_out, nff, ff_in, hidden, act });
            x = y;
        }
        let tokens = self.out.forward(ps, &x)?;
        Ok((VisualTokens { tokens }, ResamplerCache { layers: caches, last: x }))
    }

    /// Returns the `(g·g)×D` feature gradient when requested.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &ResamplerCache<F>, dtokens: &Tensor<F>, need_dgrid: bool) -> Option<Tensor<F>> {
        let d = self.dim;
        let mut dx = self.out.backward(ps, &cache.last, dtokens, true).expect("dx requested");
        let mut dfeats: Option<Tensor<F>> = None;
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let dact = l.fc2.backward(ps, &c.act, &dx, true).expect("dx");
            let dhidden = ops::gelu_backward(&c.hidden, &dact);
            let dff_in = l.fc1.backward(ps, &c.ff_in, &dhidden, true).expect("dx");
            let mut dh = l.norm_ff.backward(ps, &c.nff, &dff_in);
            dh.add_assign(&dx);
            let dattn = l.wo.backward(ps, &c.attn_out, &dh, true).expect("dx");
            let g = ops::attention_backward(&c.q, &c.k, &c.v, self.heads, &c.attn, &dattn);
            let dq_in = l.wq.backward(ps, &c.q_in, &g.dq, true).expect("dx");
            let n = g.dk.rows();
            let mut dkv = Tensor::zeros(&[n, 2 * d]);
            for i in 0..n {
                dkv.row_mut(i)[..d].copy_from_slice(g.dk.row(i));
                dkv.row_mut(i)[d..].copy_from_slice(g.dv.row(i));
            }
            let dkv_in = l.wkv.backward(ps, &c.kv_in, &dkv, true).expect("dx");
            let dfeat = l.norm_kv.backward(ps, &c.nkv, &dkv_in);
            match dfeats.as_mut() {
                Some(acc) => acc.add_assign(&dfeat),
                None => dfeats = Some(dfeat),
            }
            let mut dxi = l.norm_q.backward(ps, &c.nq, &dq_in);
            dxi.add_assign(&dh);
            debug_assert_eq!(dxi.shape(), c.x_in.shape());
            dx = dxi;
        }
        if let Some(gq) = ps.grad_mut(self.queries) {
            gq.add_assign(&dx);
        }
        if need_dgrid {
            dfeats
        } else {
            None
        }
    }
}

/// Parameter count of a projector with the given dimensions.
pub fn projector_param_count(cfg: &ProjectorConfig, in_dim: usize) -> usize {
    let c = cfg.conv_channels;
    c * in_dim * cfg.kernel * cfg.kernel + c + c * cfg.out_dim + cfg.out_dim
}

/// Parameter count of a resampler with the given dimensions.
pub fn resampler_param_count(cfg: &ResamplerConfig, in_dim: usize) -> usize {
    let d = in_dim;
    let h = d * cfg.mlp_ratio;
    let per_layer = 3 * 2 * d + d * d + 2 * d * d + d * d + d + d * h + h + h * d + d;
    cfg.queries * d + cfg.depth * per_layer + d * cfg.out_dim + cfg.out_dim
}
