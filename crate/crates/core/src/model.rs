//! The assembled model: image encoder, connector, region encoder, word
//! embeddings and decoder over one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreferring::{assemble_prompt, EmbeddedSequence, RegionCache, RegionEncoder, RegionEncoderConfig, Segment};
use crate::error::{Error, Result};
use crate::lm::{lm_loss, lm_loss_backward, Decoder, DecoderCache, DecoderConfig, GenerationOutput};
use crate::nn::checkpoint;
use crate::nn::layers::Embedding;
use crate::nn::{ParamStore, Partition, Scalar, Tensor};
use crate::textcodec::{TokenId, TokenSeq, Vocab};
use crate::visual::{
    DownsampleProjector, EncoderCache, ProjectorCache, ProjectorConfig, Resampler, ResamplerCache, ResamplerConfig, VisualEncoder,
    VisualEncoderConfig, VisualTokens,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConnectorConfig {
    Downsample(ProjectorConfig),
    Resampler(ResamplerConfig),
}

impl ConnectorConfig {
    pub fn out_dim(&self) -> usize {
        match self {
            Self::Downsample(c) => c.out_dim,
            Self::Resampler(c) => c.out_dim,
        }
    }

    /// Visual tokens produced for an encoder grid of side `g`.
    pub fn token_count(&self, g: usize) -> usize {
        match self {
            Self::Downsample(c) => c.output_side(g).pow(2),
            Self::Resampler(c) => c.queries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: VisualEncoderConfig,
    pub connector: ConnectorConfig,
    pub region: RegionEncoderConfig,
    pub decoder: DecoderConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Checks that every component agrees on the word width and that the
    /// visual tokens leave room in the context.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.region.validate()?;
        if let ConnectorConfig::Downsample(p) = &self.connector {
            p.validate()?;
        }
        let d = self.decoder.dim;
        if self.connector.out_dim() != d || self.region.out_dim != d {
            return Err(Error::Config(format!(
                "word width disagrees: connector {}, region {}, decoder {d}",
                self.connector.out_dim(),
                self.region.out_dim
            )));
        }
        let n_v = self.visual_tokens();
        if 1 + n_v >= self.decoder.context_limit {
            return Err(Error::Config(format!("{n_v} visual tokens leave no room in context {}", self.decoder.context_limit)));
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        self.connector.token_count(self.encoder.grid())
    }
}

#[derive(Debug, Clone)]
pub enum Connector {
    Downsample(DownsampleProjector),
    Resampler(Resampler),
}

enum ConnectorCache<F> {
    Downsample(ProjectorCache<F>),
    Resampler(ResamplerCache<F>),
}

/// One training or inference input. Images are `H×W×3` in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Example<F> {
    pub image: Tensor<F>,
    /// Referring crop, already resized to the region encoder's resolution.
    pub region: Option<Tensor<F>>,
    pub instruction: TokenSeq,
    /// Answer ids, normally ending with EOS.
    pub answer: Vec<TokenId>,
}

pub struct ForwardCache<F> {
    encoder: EncoderCache<F>,
    connector: ConnectorCache<F>,
    region: Option<RegionCache<F>>,
    seq: EmbeddedSequence<F>,
    decoder: DecoderCache<F>,
    logits: Tensor<F>,
}

/// Gradients with respect to the model inputs.
pub struct InputGrads<F> {
    pub image: Option<Tensor<F>>,
    pub region: Option<Tensor<F>>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<F>,
    pub encoder: VisualEncoder,
    pub connector: Connector,
    pub region: RegionEncoder,
    pub words: Embedding,
    pub decoder: Decoder,
}

impl<F: Scalar> Model<F> {
    /// Builds a freshly initialized model; the decoder's vocabulary size is
    /// taken from `vocab`.
    pub fn new(mut cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.decoder.vocab_size = vocab.len();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut ps = ParamStore::new();
        let encoder = VisualEncoder::new(&mut ps, cfg.encoder, &mut rng)?;
        let connector = match cfg.connector {
            ConnectorConfig::Downsample(p) => Connector::Downsample(DownsampleProjector::new(&mut ps, p, cfg.encoder.embed_dim, &mut rng)?),
            ConnectorConfig::Resampler(r) => Connector::Resampler(Resampler::new(&mut ps, r, cfg.encoder.embed_dim, &mut rng)?),
        };
        let region = RegionEncoder::new(&mut ps, cfg.region, &mut rng)?;
        let words = Embedding::new(&mut ps, "word_embeddings", Partition::WordEmbeddings, vocab.len(), cfg.decoder.dim, 0.5, &mut rng);
        let decoder = Decoder::new(&mut ps, cfg.decoder, &mut rng)?;
        Ok(Self { cfg, vocab, params: ps, encoder, connector, region, words, decoder })
    }

    pub fn param_count(&self, part: Option<Partition>) -> usize {
        self.params.count(part)
    }

    fn visual_tokens(&self, image: &Tensor<F>) -> Result<(VisualTokens<F>, EncoderCache<F>, ConnectorCache<F>)> {
        let (grid, enc) = self.encoder.forward(&self.params, image)?;
        Ok(match &self.connector {
            Connector::Downsample(p) => {
                let (t, c) = p.forward(&self.params, &grid)?;
                (t, enc, ConnectorCache::Downsample(c))
            }
            Connector::Resampler(r) => {
                let (t, c) = r.forward(&self.params, &grid)?;
                (t, enc, ConnectorCache::Resampler(c))
            }
        })
    }

    /// `[BOS][image][instruction]` for inference.
    pub fn prompt(&self, image: &Tensor<F>, region: Option<&Tensor<F>>, instruction: &TokenSeq) -> Result<EmbeddedSequence<F>> {
        let (h_v, _, _) = self.visual_tokens(image)?;
        let h_q = match region {
            Some(r) => Some(self.region.forward(&self.params, r)?.0),
            None => None,
        };
        assemble_prompt(&self.params, &h_v, instruction, h_q.as_ref(), &self.words)
    }

    pub fn forward(&self, ex: &Example<F>) -> Result<(F, ForwardCache<F>)> {
        let (h_v, encoder, connector) = self.visual_tokens(&ex.image)?;
        let (h_q, region) = match &ex.region {
            Some(r) => {
                let (t, c) = self.region.forward(&self.params, r)?;
                (Some(t), Some(c))
            }
            None => (None, None),
        };
        let mut seq = assemble_prompt(&self.params, &h_v, &ex.instruction, h_q.as_ref(), &self.words)?;
        seq.append_tokens(&self.params, &self.words, &ex.answer, Segment::Answer)?;
        let (logits, decoder) = self.decoder.forward(&self.params, &seq)?;
        let loss = lm_loss(&logits, &seq)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        Ok((loss, ForwardCache { encoder, connector, region, seq, decoder, logits }))
    }

    pub fn loss(&self, ex: &Example<F>) -> Result<F> {
        Ok(self.forward(ex)?.0)
    }

    /// Accumulates parameter gradients of the loss; frozen partitions are
    /// skipped unless an input gradient needs to pass through them.
    pub fn backward(&mut self, cache: &ForwardCache<F>, need_inputs: bool) -> Result<InputGrads<F>> {
        self.backward_scaled(cache, need_inputs, F::one())
    }

    /// As [`Model::backward`] for the loss multiplied by `scale`.
    pub fn backward_scaled(&mut self, cache: &ForwardCache<F>, need_inputs: bool, scale: F) -> Result<InputGrads<F>> {
        let ps = &mut self.params;
        let mut dlogits = lm_loss_backward(&cache.logits, &cache.seq)?;
        if scale != F::one() {
            dlogits.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
        let dseq = self.decoder.backward(ps, &cache.decoder, &dlogits);
        let grads = cache.seq.scatter_grad(ps, &self.words, &dseq);

        let region = match (&cache.region, &grads.region) {
            (Some(rc), Some(dq)) => self.region.backward(ps, rc, dq, need_inputs),
            _ => None,
        };

        let encoder_live = ps.partition_trainable(Partition::VisualEncoder) || need_inputs;
        let dgrid = match (&self.connector, &cache.connector) {
            (Connector::Downsample(p), ConnectorCache::Downsample(c)) => p.backward(ps, c, &grads.visual, encoder_live),
            (Connector::Resampler(r), ConnectorCache::Resampler(c)) => r.backward(ps, c, &grads.visual, encoder_live),
            _ => unreachable!("cache built by the same connector"),
        };
        let image = match dgrid {
            Some(dg) => self.encoder.backward(ps, &cache.encoder, &dg, need_inputs),
            None => None,
        };
        Ok(InputGrads { image, region })
    }

    /// Forward and backward in one call; returns the loss.
    pub fn loss_and_grad(&mut self, ex: &Example<F>) -> Result<F> {
        self.loss_and_grad_scaled(ex, F::one())
    }

    /// Returns the unscaled loss; accumulated gradients are those of
    /// `scale · loss`.
    pub fn loss_and_grad_scaled(&mut self, ex: &Example<F>, scale: F) -> Result<F> {
        let (loss, cache) = self.forward(ex)?;
        self.backward_scaled(&cache, false, scale)?;
        Ok(loss)
    }

    pub fn generate(&self, image: &Tensor<F>, region: Option<&Tensor<F>>, instruction: &TokenSeq, max_new: usize) -> Result<GenerationOutput> {
        let prefix = self.prompt(image, region, instruction)?;
        let room = self.cfg.decoder.context_limit.saturating_sub(prefix.len());
        self.decoder.generate(&self.params, &self.words, &prefix, max_new.min(room))
    }

    pub fn set_trainable(&mut self, part: Partition, trainable: bool) {
        self.params.set_partition_trainable(part, trainable);
    }

    pub fn checkpoint_meta(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "model": self.cfg,
            "vocab": self.vocab,
            "extra": extra,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.params, self.checkpoint_meta(extra))
    }

    /// Rebuilds a model from a checkpoint, restoring values and trainable
    /// flags.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (manifest, stored) = checkpoint::load::<F>(path)?;
        let meta = manifest.meta;
        let cfg: ModelConfig = serde_json::from_value(meta.get("model").cloned().ok_or_else(|| Error::Checkpoint("missing model config".into()))?)?;
        let vocab: Vocab = serde_json::from_value(meta.get("vocab").cloned().ok_or_else(|| Error::Checkpoint("missing vocab".into()))?)?;
        let mut model = Self::new(cfg, vocab)?;
        model.params.load_values(&stored)?;
        for (dst, src) in model.params.iter_mut().zip(stored.iter()) {
            dst.trainable = src.trainable;
        }
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            cfg: self.cfg,
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            connector: self.connector.clone(),
            region: self.region.clone(),
            words: self.words.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

/// Small configuration used by tests and gradient checks: 16-px images,
/// 4-px patches, a 2×2 pretrained position grid.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: VisualEncoderConfig { patch_size: 4, pretrained_grid: 2, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, resolution: 16 },
        connector: ConnectorConfig::Downsample(ProjectorConfig { kernel: 3, stride: 2, padding: 1, conv_channels: 6, out_dim: 8 }),
        region: RegionEncoderConfig { resolution: 8, patch_size: 4, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, out_dim: 8 },
        decoder: DecoderConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2, vocab_size: 0, context_limit: 48 },
        init_seed: 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcodec::{tokenize, EOS};
    use rand::Rng;

    fn vocab() -> Vocab {
        Vocab::build(&["count the <region> locate red circle"]).unwrap()
    }

    fn example(v: &Vocab, seed: u64, with_region: bool) -> Example<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |s: &[usize]| {
            let n: usize = s.iter().product();
            Tensor::from_vec(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let image = t(&[16, 16, 3]);
        let region = with_region.then(|| t(&[8, 8, 3]));
        let ins = if with_region { "count the <region>" } else { "locate the red circle" };
        let mut answer = tokenize("2 [0.1,0.2,0.3,0.4]", v).ids;
        answer.push(EOS);
        Example { image, region, instruction: tokenize(ins, v), answer }
    }

    #[test]
    fn word_width_must_agree() {
        let mut cfg = toy_config();
        cfg.region.out_dim = 4;
        assert!(matches!(Model::<f64>::new(cfg, vocab()), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_partitions_get_no_gradient() {
        let v = vocab();
        let mut m = Model::<f64>::new(toy_config(), v.clone()).unwrap();
        for p in Partition::ALL {
            m.set_trainable(p, p == Partition::DownsampleProjector);
        }
        m.loss_and_grad(&example(&v, 1, true)).unwrap();
        for p in m.params.iter() {
            let nonzero = p.grad.data().iter().any(|&g| g != 0.0);
            assert_eq!(nonzero, p.partition == Partition::DownsampleProjector, "{}", p.name);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = vocab();
        let mut m = Model::<f32>::new(toy_config(), v).unwrap();
        m.set_trainable(Partition::RegionEncoder, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"stage": 2})).unwrap();
        let (back, extra) = Model::<f32>::load(&path).unwrap();
        assert_eq!(extra["stage"], 2);
        assert_eq!(back.params.checksums(), m.params.checksums());
        assert!(!back.params.partition_trainable(Partition::RegionEncoder));
    }

    #[test]
    fn generation_respects_context() {
        let v = vocab();
        let m = Model::<f64>::new(toy_config(), v.clone()).unwrap();
        let ex = example(&v, 2, false);
        let out = m.generate(&ex.image, None, &ex.instruction, 1000).unwrap();
        let prompt = 1 + m.cfg.visual_tokens() + ex.instruction.len();
        assert!(prompt + out.ids.len() <= m.cfg.decoder.context_limit);
    }
}
