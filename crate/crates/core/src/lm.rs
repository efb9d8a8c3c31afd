//! Causal decoder over embedded multimodal sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coreferring::EmbeddedSequence;
use crate::error::{Error, Result};
use crate::nn::layers::{BlockCache, BlockDims, Embedding, KvCache, LayerNorm, Linear, TransformerStack};
use crate::nn::ops::{self, LayerNormCache};
use crate::nn::{Init, ParamId, ParamStore, Partition, Scalar, Tensor};
use crate::textcodec::{TokenId, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Longest sequence the decoder accepts, prompt plus answer.
    pub context_limit: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub pos_embed: ParamId,
    /// Normalizes input embeddings before positions are added, so visual
    /// tokens of any scale share one footing with text.
    pub in_norm: LayerNorm,
    pub blocks: TransformerStack,
    pub norm: LayerNorm,
    pub lm_head: Linear,
}

pub struct DecoderCache<F> {
    input: LayerNormCache<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
    normed: Tensor<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// Emitted ids, including a final EOS when one was produced.
    pub ids: Vec<TokenId>,
    pub probs: Vec<f64>,
    pub finish: FinishReason,
}

impl Decoder {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let part = Partition::Decoder;
        Ok(Self {
            cfg,
            pos_embed: ps.init("decoder.pos_embed", part, &[cfg.context_limit, cfg.dim], Init::SinCos1d, rng),
            in_norm: LayerNorm::new(ps, "decoder.in_norm", part, cfg.dim, rng),
            blocks: TransformerStack::new(
                ps,
                "decoder",
                part,
                BlockDims { dim: cfg.dim, heads: cfg.heads, mlp_ratio: cfg.mlp_ratio },
                cfg.depth,
                true,
                rng,
            ),
            norm: LayerNorm::new(ps, "decoder.norm", part, cfg.dim, rng),
            lm_head: Linear::new(ps, "lm_head", Partition::LmHead, cfg.dim, cfg.vocab_size, true, 0.02, rng),
        })
    }

    fn add_positions<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>, offset: usize) -> Result<(Tensor<F>, LayerNormCache<F>)> {
        let len = offset + x.rows();
        if len > self.cfg.context_limit {
            return Err(Error::Length { len, limit: self.cfg.context_limit });
        }
        if x.cols() != self.cfg.dim {
            return Err(Error::Dimension(format!("decoder width {}, input {}", self.cfg.dim, x.cols())));
        }
        let (mut h, cache) = self.in_norm.forward(ps, x);
        h.add_assign(&ps.value(self.pos_embed).slice_rows(offset, len));
        Ok((h, cache))
    }

    /// Causal logits for every position.
    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, seq: &EmbeddedSequence<F>) -> Result<(Tensor<F>, DecoderCache<F>)> {
        let (h, input) = self.add_positions(ps, &seq.embeddings, 0)?;
        let (y, blocks) = self.blocks.forward(ps, &h)?;
        let (normed, norm) = self.norm.forward(ps, &y);
        let logits = self.lm_head.forward(ps, &normed)?;
        Ok((logits, DecoderCache { input, blocks, norm, normed }))
    }

    /// Returns the gradient with respect to the input embeddings.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &DecoderCache<F>, dlogits: &Tensor<F>) -> Tensor<F> {
        let dnormed = self.lm_head.backward(ps, &cache.normed, dlogits, true).expect("dx requested");
        let dy = self.norm.backward(ps, &cache.norm, &dnormed);
        let dh = self.blocks.backward(ps, &cache.blocks, &dy);
        let n = dh.rows();
        if let Some(g) = ps.grad_mut(self.pos_embed) {
            for (a, &b) in g.data_mut()[..dh.numel()].iter_mut().zip(dh.data()) {
                *a += b;
            }
        }
        debug_assert_eq!(n, cache.normed.rows());
        self.in_norm.backward(ps, &cache.input, &dh)
    }

    /// Greedy decoding from `prefix`, feeding each emitted token back through
    /// `emb`. Keys and values of earlier positions are kept between steps.
    pub fn generate<F: Scalar>(&self, ps: &ParamStore<F>, emb: &Embedding, prefix: &EmbeddedSequence<F>, max_new: usize) -> Result<GenerationOutput> {
        let limit = self.cfg.context_limit;
        if prefix.len() + max_new > limit {
            return Err(Error::Length { len: prefix.len() + max_new, limit });
        }
        let mut caches: Vec<Option<KvCache<F>>> = vec![None; self.blocks.blocks.len()];
        let mut x = self.add_positions(ps, &prefix.embeddings, 0)?.0;
        let mut pos = prefix.len();
        let mut out = GenerationOutput { ids: Vec::new(), probs: Vec::new(), finish: FinishReason::MaxLength };
        for _ in 0..max_new {
            for (b, kv) in self.blocks.blocks.iter().zip(caches.iter_mut()) {
                x = b.forward_incremental(ps, &x, kv)?;
            }
            let last = x.slice_rows(x.rows() - 1, x.rows());
            let (normed, _) = self.norm.forward(ps, &last);
            let logits = self.lm_head.forward(ps, &normed)?;
            let probs = ops::softmax_rows(&logits);
            let (id, p) = argmax(probs.row(0));
            out.ids.push(id as TokenId);
            out.probs.push(p);
            if id as TokenId == EOS {
                out.finish = FinishReason::Eos;
                break;
            }
            let next = Tensor::from_vec(&[1, self.cfg.dim], emb.row(ps, id as TokenId).to_vec())?;
            x = self.add_positions(ps, &next, pos)?.0;
            pos += 1;
        }
        Ok(out)
    }
}

/// First index of the largest value; ties go to the lower id.
fn argmax<F: Scalar>(row: &[F]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best].to_f64().unwrap_or(0.0))
}

/// Next-token targets: logits at position `t` predict the token at `t + 1`.
fn shifted<F: Scalar>(seq: &EmbeddedSequence<F>) -> (Vec<u32>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0u32; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        if seq.loss_mask[t + 1] {
            targets[t] = seq.token_ids[t + 1].expect("scored positions hold tokens");
            mask[t] = true;
        }
    }
    (targets, mask)
}

/// Mean cross-entropy over the answer tokens.
pub fn lm_loss<F: Scalar>(logits: &Tensor<F>, seq: &EmbeddedSequence<F>) -> Result<F> {
    let (targets, mask) = shifted(seq);
    ops::cross_entropy(logits, &targets, &mask)
}

pub fn lm_loss_backward<F: Scalar>(logits: &Tensor<F>, seq: &EmbeddedSequence<F>) -> Result<Tensor<F>> {
    let (targets, mask) = shifted(seq);
    ops::cross_entropy_backward(logits, &targets, &mask)
}

/// Geometric mean of the token probabilities of one predicted object.
pub fn token_confidence(span_probs: &[f64]) -> Result<f64> {
    if span_probs.is_empty() {
        return Err(Error::EmptyInput("confidence span"));
    }
    if let Some(p) = span_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::NonFinite(format!("probability {p} outside (0,1]")));
    }
    let mean_log = span_probs.iter().map(|p| p.ln()).sum::<f64>() / span_probs.len() as f64;
    Ok(mean_log.exp().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreferring::{assemble_prompt, Segment};
    use crate::textcodec::{tokenize, Vocab};
    use crate::visual::VisualTokens;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Toy {
        ps: ParamStore<f64>,
        emb: Embedding,
        dec: Decoder,
        vocab: Vocab,
    }

    fn toy() -> Toy {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab = Vocab::build(&["locate the red circle square"]).unwrap();
        let emb = Embedding::new(&mut ps, "word", Partition::WordEmbeddings, vocab.len(), 8, 1.0, &mut rng);
        let cfg = DecoderConfig { dim: 8, depth: 2, heads: 2, mlp_ratio: 2, vocab_size: vocab.len(), context_limit: 40 };
        let dec = Decoder::new(&mut ps, cfg, &mut rng).unwrap();
        Toy { ps, emb, dec, vocab }
    }

    fn seq(t: &Toy, answer: &str) -> EmbeddedSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h_v = VisualTokens { tokens: Tensor::from_vec(&[3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap() };
        let mut s = assemble_prompt(&t.ps, &h_v, &tokenize("locate the red circle", &t.vocab), None, &t.emb).unwrap();
        s.append_tokens(&t.ps, &t.emb, &tokenize(answer, &t.vocab).ids, Segment::Answer).unwrap();
        s
    }

    #[test]
    fn causality_probe() {
        let t = toy();
        let a = seq(&t, "[0.1,0.2,0.3,0.4]");
        let mut b = a.clone();
        let n = b.len();
        for v in b.embeddings.row_mut(n - 2) {
            *v += 3.0;
        }
        let (la, _) = t.dec.forward(&t.ps, &a).unwrap();
        let (lb, _) = t.dec.forward(&t.ps, &b).unwrap();
        for i in 0..n - 2 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert_ne!(la.row(n - 2), lb.row(n - 2));
        let (la2, _) = t.dec.forward(&t.ps, &a).unwrap();
        assert_eq!(la, la2);
    }

    #[test]
    fn length_limit() {
        let t = toy();
        let long = seq(&t, &"red ".repeat(40));
        assert!(matches!(t.dec.forward(&t.ps, &long), Err(Error::Length { .. })));
        let s = seq(&t, "red");
        assert!(matches!(t.dec.generate(&t.ps, &t.emb, &s, 40), Err(Error::Length { .. })));
    }

    #[test]
    fn loss_ignores_unscored_positions() {
        let t = toy();
        let s = seq(&t, "square");
        let (mut logits, _) = t.dec.forward(&t.ps, &s).unwrap();
        let base = lm_loss(&logits, &s).unwrap();
        // Only the row before the answer token is scored.
        let scored = s.len() - 2;
        for i in (0..s.len()).filter(|&i| i != scored) {
            logits.row_mut(i).iter_mut().for_each(|v| *v = 100.0 * (i as f64).sin());
        }
        assert_eq!(lm_loss(&logits, &s).unwrap(), base);
        let uniform = Tensor::<f64>::zeros(&[s.len(), t.vocab.len()]);
        assert!((lm_loss(&uniform, &s).unwrap() - (t.vocab.len() as f64).ln()).abs() < 1e-12);
        let g = lm_loss_backward(&logits, &s).unwrap();
        for i in (0..s.len()).filter(|&i| i != scored) {
            assert!(g.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_token_hand_case() {
        let t = toy();
        let s = seq(&t, "red square");
        let n = s.len();
        let v = t.vocab.len();
        let mut logits = Tensor::<f64>::zeros(&[n, v]);
        let red = t.vocab.id("red").unwrap() as usize;
        let sq = t.vocab.id("square").unwrap() as usize;
        logits.row_mut(n - 3)[red] = 2.0;
        logits.row_mut(n - 2)[sq] = 1.0;
        let vm1 = (v - 1) as f64;
        let want = (-(2f64.exp() / (2f64.exp() + vm1)).ln() - (1f64.exp() / (1f64.exp() + vm1)).ln()) / 2.0;
        assert!((lm_loss(&logits, &s).unwrap() - want).abs() < 1e-12);
        let mut empty = s.clone();
        empty.loss_mask.iter_mut().for_each(|m| *m = false);
        assert!(matches!(lm_loss(&logits, &empty), Err(Error::EmptyLoss)));
    }

    #[test]
    fn rigged_head_repeats_token() {
        let mut t = toy();
        let red = t.vocab.id("red").unwrap() as usize;
        let b = t.dec.lm_head.bias.unwrap();
        t.ps.value_mut(b).data_mut()[red] = 1e3;
        let s = seq(&t, "");
        let out = t.dec.generate(&t.ps, &t.emb, &s, 5).unwrap();
        assert_eq!(out.ids, vec![red as TokenId; 5]);
        assert_eq!(out.finish, FinishReason::MaxLength);
        let eos_out = {
            t.ps.value_mut(b).data_mut()[EOS as usize] = 2e3;
            t.dec.generate(&t.ps, &t.emb, &s, 5).unwrap()
        };
        assert_eq!(eos_out.ids, vec![EOS]);
        assert_eq!(eos_out.finish, FinishReason::Eos);
    }

    #[test]
    fn generated_probs_match_full_recompute() {
        let t = toy();
        let prefix = seq(&t, "");
        let out = t.dec.generate(&t.ps, &t.emb, &prefix, 6).unwrap();
        assert_eq!(out, t.dec.generate(&t.ps, &t.emb, &prefix, 6).unwrap());
        let mut s = prefix.clone();
        for (&id, &p) in out.ids.iter().zip(&out.probs) {
            let (logits, _) = t.dec.forward(&t.ps, &s).unwrap();
            let probs = ops::softmax_rows(&logits.slice_rows(s.len() - 1, s.len()));
            assert_eq!(argmax(probs.row(0)).0 as TokenId, id);
            assert!((probs.row(0)[id as usize] - p).abs() < 1e-12);
            assert!(p > 0.0 && p <= 1.0);
            s.append_tokens(&t.ps, &t.emb, &[id], Segment::Answer).unwrap();
        }
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(token_confidence(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((token_confidence(&[0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((token_confidence(&[0.9, 0.4, 0.6]).unwrap() - 0.6).abs() < 1e-12);
        assert!(token_confidence(&[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn appending_a_weaker_token_lowers_confidence(ps in proptest::collection::vec(0.01..1.0f64, 1..10), frac in 0.01..0.99f64) {
                let c = token_confidence(&ps).unwrap();
                let mut longer = ps.clone();
                longer.push(c * frac);
                prop_assert!(token_confidence(&longer).unwrap() < c);
            }
        }
    }
}
