//! Referring to an object by a cropped image or by its coordinates, and
//! assembling the embedded sequence the decoder consumes.
//!
//! A crop is encoded by a small ViT; only its CLS output survives, projected
//! to word width. That single vector replaces the `<region>` placeholder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_box, BoxNorm, BoxPix, CoordText, DEFAULT_PRECISION};
use crate::nn::layers::{BlockCache, BlockDims, Embedding, LayerNorm, Linear, TransformerStack};
use crate::nn::ops::LayerNormCache;
use crate::nn::{Init, ParamId, ParamStore, Partition, Scalar, Tensor};
use crate::textcodec::{TokenId, TokenSeq, BOS, PLACEHOLDER};
use crate::visual::{patchify, unpatchify, VisualTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEncoderConfig {
    /// Side of the square input every crop is resized to.
    pub resolution: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
}

impl RegionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "region resolution {} not divisible by patch size {}",
                self.resolution, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("region dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        Ok(())
    }

    fn patches(&self) -> usize {
        let g = self.resolution / self.patch_size;
        g * g
    }
}

/// One word-space vector standing for a referring image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPromptToken<F> {
    pub embedding: Tensor<F>,
}

/// Crops `b` out of an `H×W×C` image and resamples it to `r×r` with
/// half-pixel-centred bilinear sampling and edge clamping.
pub fn crop_region<F: Scalar>(image: &Tensor<F>, b: &BoxPix, r: usize) -> Result<Tensor<F>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("crop_region expects H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if r == 0 {
        return Err(Error::Config("crop resolution must be >= 1".into()));
    }
    if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w as f64 && b.y2 <= h as f64) {
        return Err(Error::OutOfFrame(format!("{:?}", b.to_array()), w as f64, h as f64));
    }
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(Error::InvalidBox("zero-area crop".into()));
    }
    let sx = b.width() / r as f64;
    let sy = b.height() / r as f64;
    let src = image.data();
    let mut out = Tensor::zeros(&[r, r, c]);
    let dst = out.data_mut();
    let taps = |pos: f64, n: usize| {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for i in 0..r {
        let (y0, y1, fy) = taps(b.y1 + (i as f64 + 0.5) * sy - 0.5, h);
        for j in 0..r {
            let (x0, x1, fx) = taps(b.x1 + (j as f64 + 0.5) * sx - 0.5, w);
            let wts = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
            let idx = [(y0 * w + x0) * c, (y0 * w + x1) * c, (y1 * w + x0) * c, (y1 * w + x1) * c];
            for ch in 0..c {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += wts[t] * src[idx[t] + ch].to_f64().unwrap_or(0.0);
                }
                dst[(i * r + j) * c + ch] = F::lit(acc);
            }
        }
    }
    Ok(out)
}

/// Coordinates spliced into an instruction in place of a description.
pub fn refer_by_coords(b: &BoxNorm) -> CoordText {
    encode_box(b, DEFAULT_PRECISION)
}

#[derive(Debug, Clone)]
pub struct RegionEncoder {
    pub cfg: RegionEncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos_embed: ParamId,
    pub blocks: TransformerStack,
    pub norm: LayerNorm,
    /// Lives in the region projector partition.
    pub proj: Linear,
}

pub struct RegionCache<F> {
    patches: Tensor<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
    cls_out: Tensor<F>,
}

impl RegionEncoder {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, cfg: RegionEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::RegionEncoder;
        let d = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        Ok(Self {
            cfg,
            patch_embed: Linear::new(ps, "region.patch_embed", part, patch_dim, d, true, (1.0 / patch_dim as f64).sqrt(), rng),
            cls: ps.init("region.cls", part, &[1, d], Init::Normal(0.02), rng),
            pos_embed: ps.init("region.pos_embed", part, &[cfg.patches() + 1, d], Init::SinCos1d, rng),
            blocks: TransformerStack::new(
                ps,
                "region",
                part,
                BlockDims { dim: d, heads: cfg.heads, mlp_ratio: cfg.mlp_ratio },
                cfg.depth,
                false,
                rng,
            ),
            norm: LayerNorm::new(ps, "region.norm", part, d, rng),
            proj: Linear::new(ps, "region_projector", Partition::RegionProjector, d, cfg.out_dim, true, (1.0 / d as f64).sqrt(), rng),
        })
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, region: &Tensor<F>) -> Result<(VisualPromptToken<F>, RegionCache<F>)> {
        let r = self.cfg.resolution;
        region.expect_shape(&[r, r, 3], "encode_region input")?;
        let patches = patchify(region, self.cfg.patch_size)?;
        let emb = self.patch_embed.forward(ps, &patches)?;
        let mut x = Tensor::vcat(&[ps.value(self.cls), &emb])?;
        x.add_assign(ps.value(self.pos_embed));
        let (h, blocks) = self.blocks.forward(ps, &x)?;
        let (cls_out, norm) = self.norm.forward(ps, &h.slice_rows(0, 1));
        let embedding = self.proj.forward(ps, &cls_out)?;
        Ok((VisualPromptToken { embedding }, RegionCache { patches, blocks, norm, cls_out }))
    }

    fn encoder_trainable<F: Scalar>(&self, ps: &ParamStore<F>) -> bool {
        ps.is_trainable(self.cls)
    }

    /// Backpropagates the prompt-token gradient. Returns the crop gradient
    /// when requested.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &RegionCache<F>, dtoken: &Tensor<F>, need_dinput: bool) -> Option<Tensor<F>> {
        let deep = self.encoder_trainable(ps) || need_dinput;
        let dcls_out = self.proj.backward(ps, &cache.cls_out, dtoken, deep);
        let dcls_out = dcls_out?;
        let dcls = self.norm.backward(ps, &cache.norm, &dcls_out);
        let n = cache.patches.rows() + 1;
        let mut dh = Tensor::zeros(&[n, self.cfg.embed_dim]);
        dh.row_mut(0).copy_from_slice(dcls.row(0));
        let dx = self.blocks.backward(ps, &cache.blocks, &dh);
        if let Some(g) = ps.grad_mut(self.pos_embed) {
            g.add_assign(&dx);
        }
        if let Some(g) = ps.grad_mut(self.cls) {
            g.add_assign(&dx.slice_rows(0, 1));
        }
        let dpatches = self.patch_embed.backward(ps, &cache.patches, &dx.slice_rows(1, n), need_dinput)?;
        let r = self.cfg.resolution;
        Some(unpatchify(&dpatches, r, r, 3, self.cfg.patch_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Bos,
    Image,
    Instruction,
    Region,
    Answer,
}

/// Fused decoder input: `[BOS][image tokens][instruction][answer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence<F> {
    pub embeddings: Tensor<F>,
    pub segments: Vec<Segment>,
    /// Token id of each text position; `None` for image and region rows.
    pub token_ids: Vec<Option<TokenId>>,
    /// True where the position's token is a training target.
    pub loss_mask: Vec<bool>,
}

/// Gradients routed back out of an [`EmbeddedSequence`].
pub struct SequenceGrads<F> {
    pub visual: Tensor<F>,
    pub region: Option<Tensor<F>>,
}

impl<F: Scalar> EmbeddedSequence<F> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == seg).count()
    }

    /// Appends text tokens under `segment`; answer rows are scored.
    pub fn append_tokens(&mut self, ps: &ParamStore<F>, emb: &Embedding, ids: &[TokenId], segment: Segment) -> Result<()> {
        let d = self.embeddings.cols();
        let mut rows = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= emb.vocab_size(ps) {
                return Err(Error::Dimension(format!("token id {id} outside vocabulary")));
            }
            rows.row_mut(i).copy_from_slice(emb.row(ps, id));
        }
        self.embeddings = Tensor::vcat(&[&self.embeddings, &rows])?;
        for &id in ids {
            self.segments.push(segment);
            self.token_ids.push(Some(id));
            self.loss_mask.push(segment == Segment::Answer);
        }
        Ok(())
    }

    /// Splits a per-position gradient into visual-token and region-token
    /// parts and accumulates the text rows into the embedding table.
    pub fn scatter_grad(&self, ps: &mut ParamStore<F>, emb: &Embedding, d: &Tensor<F>) -> SequenceGrads<F> {
        let width = d.cols();
        let n_img = self.count(Segment::Image);
        let mut visual = Tensor::zeros(&[n_img, width]);
        let mut region = None;
        let mut text = Vec::new();
        let mut vi = 0;
        for (pos, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Image => {
                    visual.row_mut(vi).copy_from_slice(d.row(pos));
                    vi += 1;
                }
                Segment::Region => region = Some(d.slice_rows(pos, pos + 1)),
                _ => text.push((pos, self.token_ids[pos].expect("text position"))),
            }
        }
        emb.backward_rows(ps, &text, d);
        SequenceGrads { visual, region }
    }
}

/// Builds `[BOS][H_v][instruction]`, replacing each placeholder with `H_q`.
pub fn assemble_prompt<F: Scalar>(
    ps: &ParamStore<F>,
    h_v: &VisualTokens<F>,
    ins: &TokenSeq,
    h_q: Option<&VisualPromptToken<F>>,
    emb: &Embedding,
) -> Result<EmbeddedSequence<F>> {
    let placeholders = ins.placeholder_count();
    let prompts = usize::from(h_q.is_some());
    if placeholders != prompts {
        return Err(Error::ReferringArity { placeholders, prompts });
    }
    let d = emb.dim;
    if h_v.tokens.cols() != d {
        return Err(Error::Dimension(format!("visual tokens have width {}, words {d}", h_v.tokens.cols())));
    }
    if let Some(q) = h_q {
        q.embedding.expect_shape(&[1, d], "visual prompt token")?;
    }
    let n_v = h_v.len();
    let n = 1 + n_v + ins.len();
    let mut data = Vec::with_capacity(n * d);
    let mut segments = Vec::with_capacity(n);
    let mut token_ids = Vec::with_capacity(n);
    data.extend_from_slice(emb.row(ps, BOS));
    segments.push(Segment::Bos);
    token_ids.push(Some(BOS));
    data.extend_from_slice(h_v.tokens.data());
    segments.extend(std::iter::repeat(Segment::Image).take(n_v));
    token_ids.extend(std::iter::repeat(None).take(n_v));
    for &id in &ins.ids {
        if id == PLACEHOLDER {
            let q = h_q.expect("arity checked");
            data.extend_from_slice(q.embedding.data());
            segments.push(Segment::Region);
            token_ids.push(None);
        } else {
            if id as usize >= emb.vocab_size(ps) {
                return Err(Error::Dimension(format!("token id {id} outside vocabulary")));
            }
            data.extend_from_slice(emb.row(ps, id));
            segments.push(Segment::Instruction);
            token_ids.push(Some(id));
        }
    }
    Ok(EmbeddedSequence {
        embeddings: Tensor::from_vec(&[n, d], data)?,
        segments,
        token_ids,
        loss_mask: vec![false; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::decode_boxes;
    use crate::textcodec::{tokenize, Vocab, UNK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn crop_full_image_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_t(&[12, 12, 3], &mut rng);
        let b = BoxPix::new(0.0, 0.0, 12.0, 12.0).unwrap();
        assert!(crop_region(&img, &b, 12).unwrap().max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn crop_uniform_stays_uniform() {
        let img = Tensor::<f64>::full(&[20, 20, 3], 0.3);
        let b = BoxPix::new(3.5, 2.0, 17.0, 9.0).unwrap();
        let c = crop_region(&img, &b, 8).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn crop_checkerboard_downscale_matches_oracle() {
        let n = 8;
        let px = |y: usize, x: usize| ((x + y) % 2) as f64;
        let mut img = Tensor::<f64>::zeros(&[n, n, 1]);
        for y in 0..n {
            for x in 0..n {
                img.data_mut()[y * n + x] = px(y, x);
            }
        }
        let b = BoxPix::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let c = crop_region(&img, &b, 4).unwrap();
        // Each output sample sits midway between four source pixels.
        for i in 0..4 {
            for j in 0..4 {
                let want = (px(2 * i, 2 * j) + px(2 * i, 2 * j + 1) + px(2 * i + 1, 2 * j) + px(2 * i + 1, 2 * j + 1)) / 4.0;
                assert!((c.data()[i * 4 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crop_rejects_bad_boxes() {
        let img = Tensor::<f64>::zeros(&[10, 10, 3]);
        assert!(crop_region(&img, &BoxPix::new(5.0, 5.0, 11.0, 8.0).unwrap(), 4).is_err());
        assert!(BoxPix::new(5.0, 5.0, 5.0, 8.0).is_err());
    }

    fn encoder(ps: &mut ParamStore<f64>) -> RegionEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RegionEncoderConfig { resolution: 8, patch_size: 4, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, out_dim: 6 };
        RegionEncoder::new(ps, cfg, &mut rng).unwrap()
    }

    #[test]
    fn region_token_shape_and_sensitivity() {
        let mut ps = ParamStore::new();
        let enc = encoder(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_t(&[16, 16, 3], &mut rng);
        let a = crop_region(&img, &BoxPix::new(2.0, 2.0, 10.0, 10.0).unwrap(), 8).unwrap();
        let b = crop_region(&img, &BoxPix::new(3.0, 2.0, 11.0, 10.0).unwrap(), 8).unwrap();
        let (ta, _) = enc.forward(&ps, &a).unwrap();
        let (ta2, _) = enc.forward(&ps, &a).unwrap();
        let (tb, _) = enc.forward(&ps, &b).unwrap();
        assert_eq!(ta.embedding.shape(), &[1, 6]);
        assert_eq!(ta, ta2);
        assert!(ta.embedding.max_abs_diff(&tb.embedding) > 0.0);
        assert!(enc.forward(&ps, &Tensor::zeros(&[4, 4, 3])).is_err());
    }

    #[test]
    fn identity_projection_passes_cls_through() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = RegionEncoderConfig { resolution: 8, patch_size: 4, embed_dim: 6, depth: 1, heads: 2, mlp_ratio: 2, out_dim: 6 };
        let enc = RegionEncoder::new(&mut ps, cfg, &mut rng).unwrap();
        let w = ps.value_mut(enc.proj.weight);
        w.fill(0.0);
        for i in 0..6 {
            w.data_mut()[i * 6 + i] = 1.0;
        }
        let img = rand_t(&[8, 8, 3], &mut rng);
        let (tok, cache) = enc.forward(&ps, &img).unwrap();
        assert!(tok.embedding.max_abs_diff(&cache.cls_out) < 1e-15);
    }

    #[test]
    fn coords_fragment() {
        let b = BoxNorm::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let t = refer_by_coords(&b);
        assert_eq!(t.as_str(), "[0.100,0.100,0.300,0.300]");
        assert_eq!(decode_boxes(t.as_str()).boxes, vec![b]);
        let v = Vocab::build(&["x"]).unwrap();
        assert!(tokenize(t.as_str(), &v).ids.iter().all(|&i| i != UNK));
    }

    fn setup() -> (ParamStore<f64>, Embedding, Vocab, VisualTokens<f64>) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Vocab::build(&["count the <region> locate cat"]).unwrap();
        let emb = Embedding::new(&mut ps, "word", Partition::WordEmbeddings, v.len(), 6, 1.0, &mut rng);
        let h_v = VisualTokens { tokens: rand_t(&[4, 6], &mut rng) };
        (ps, emb, v, h_v)
    }

    #[test]
    fn assembly_layout() {
        let (ps, emb, v, h_v) = setup();
        let ins = tokenize("locate the cat", &v);
        let seq = assemble_prompt(&ps, &h_v, &ins, None, &emb).unwrap();
        assert_eq!(seq.len(), 1 + 4 + 3);
        assert_eq!(seq.segments[0], Segment::Bos);
        assert_eq!(seq.count(Segment::Image), 4);
        assert!(seq.loss_mask.iter().all(|&m| !m));
    }

    #[test]
    fn substitution_preserves_everything_else() {
        let (ps, emb, v, h_v) = setup();
        let ins = tokenize("count the <region>", &v);
        let q = VisualPromptToken { embedding: Tensor::from_f64(&[1, 6], &[9., 8., 7., 6., 5., 4.]).unwrap() };
        let with = assemble_prompt(&ps, &h_v, &ins, Some(&q), &emb).unwrap();
        let plain = assemble_prompt(&ps, &h_v, &tokenize("count the cat", &v), None, &emb).unwrap();
        assert_eq!(with.len(), plain.len());
        assert_eq!(with.count(Segment::Region), 1);
        let pos = with.segments.iter().position(|&s| s == Segment::Region).unwrap();
        assert_eq!(with.embeddings.row(pos), q.embedding.data());
        for i in (0..with.len()).filter(|&i| i != pos) {
            assert_eq!(with.embeddings.row(i), plain.embeddings.row(i));
        }
    }

    #[test]
    fn arity_mismatch() {
        let (ps, emb, v, h_v) = setup();
        let q = VisualPromptToken { embedding: Tensor::zeros(&[1, 6]) };
        let r = assemble_prompt(&ps, &h_v, &tokenize("count <region>", &v), None, &emb);
        assert!(matches!(r, Err(Error::ReferringArity { placeholders: 1, prompts: 0 })));
        let r = assemble_prompt(&ps, &h_v, &tokenize("count cat", &v), Some(&q), &emb);
        assert!(matches!(r, Err(Error::ReferringArity { placeholders: 0, prompts: 1 })));
    }

    #[test]
    fn answer_rows_are_scored() {
        let (ps, emb, v, h_v) = setup();
        let mut seq = assemble_prompt(&ps, &h_v, &tokenize("locate cat", &v), None, &emb).unwrap();
        seq.append_tokens(&ps, &emb, &tokenize("cat", &v).ids, Segment::Answer).unwrap();
        assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(*seq.loss_mask.last().unwrap(), true);
    }
}
