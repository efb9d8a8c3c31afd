//! Parameterized layers built from the kernels in [`super::ops`]. Forward
//! passes return a cache; backward passes consume it, accumulate gradients
//! into trainable parameters and return the input gradient.

use rand::Rng;

use crate::error::Result;
use crate::nn::ops::{self, AttentionCache, LayerNormCache};
use crate::nn::params::{Init, ParamId, ParamStore, Partition};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        part: Partition,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.init(format!("{name}.weight"), part, &[d_in, d_out], Init::Normal(std), rng);
        let bias = bias.then(|| ps.init(format!("{name}.bias"), part, &[d_out], Init::Zeros, rng));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::linear(x, ps.value(self.weight), self.bias.map(|b| ps.value(b)))
    }

    /// Accumulates parameter gradients; returns `dx` only when `need_dx`.
    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, x: &Tensor<F>, dy: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let dx = need_dx.then(|| ops::linear_backward_input(ps.value(self.weight), dy));
        if ps.is_trainable(self.weight) {
            let mut dw = std::mem::replace(ps.grad_mut(self.weight).expect("trainable"), Tensor::zeros(&[0]));
            match self.bias.and_then(|b| ps.grad_mut(b)) {
                Some(db) => ops::linear_backward_params(x, dy, &mut dw, Some(db)),
                None => ops::linear_backward_params(x, dy, &mut dw, None),
            }
            *ps.grad_mut(self.weight).expect("trainable") = dw;
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, name: &str, part: Partition, dim: usize, rng: &mut R) -> Self {
        Self {
            gamma: ps.init(format!("{name}.gamma"), part, &[dim], Init::Ones, rng),
            beta: ps.init(format!("{name}.beta"), part, &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> (Tensor<F>, LayerNormCache<F>) {
        ops::layer_norm(x, ps.value(self.gamma), ps.value(self.beta))
    }

    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, cache: &LayerNormCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let gamma = ps.value(self.gamma).clone();
        let mut dg = ps.grad_mut(self.gamma).map(std::mem::take);
        let dx = {
            let mut db = ps.grad_mut(self.beta).map(std::mem::take);
            let dx = ops::layer_norm_backward(cache, &gamma, dy, dg.as_mut(), db.as_mut());
            if let Some(db) = db {
                *ps.grad_mut(self.beta).expect("trainable") = db;
            }
            dx
        };
        if let Some(dg) = dg.take() {
            *ps.grad_mut(self.gamma).expect("trainable") = dg;
        }
        dx
    }
}

/// Dimensions of a pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

/// Pre-norm block: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    /// Query and value biases. A key bias shifts every score in a row by the
    /// same amount, so it is left out.
    pub qv_bias: ParamId,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
}

pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    a_in: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    attn: AttentionCache<F>,
    attn_out: Tensor<F>,
    ln2: LayerNormCache<F>,
    m_in: Tensor<F>,
    hidden: Tensor<F>,
    act: Tensor<F>,
}

/// Keys and values of every position processed so far, for incremental
/// decoding.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

fn split_qkv<F: Scalar>(qkv: &Tensor<F>, d: usize) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let n = qkv.rows();
    let mut parts = [Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d])];
    for i in 0..n {
        let row = qkv.row(i);
        for (j, p) in parts.iter_mut().enumerate() {
            p.row_mut(i).copy_from_slice(&row[j * d..(j + 1) * d]);
        }
    }
    let [q, k, v] = parts;
    (q, k, v)
}

fn join_qkv<F: Scalar>(dq: &Tensor<F>, dk: &Tensor<F>, dv: &Tensor<F>) -> Tensor<F> {
    let (n, d) = (dq.rows(), dq.cols());
    let mut out = Tensor::zeros(&[n, 3 * d]);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(dq.row(i));
        row[d..2 * d].copy_from_slice(dk.row(i));
        row[2 * d..].copy_from_slice(dv.row(i));
    }
    out
}

impl TransformerBlock {
    fn qkv_forward<F: Scalar>(&self, ps: &ParamStore<F>, a_in: &Tensor<F>) -> Result<Tensor<F>> {
        let mut qkv = self.qkv.forward(ps, a_in)?;
        let d = self.dim;
        let b = ps.value(self.qv_bias).data();
        for i in 0..qkv.rows() {
            let row = qkv.row_mut(i);
            for j in 0..d {
                row[j] += b[j];
                row[2 * d + j] += b[d + j];
            }
        }
        Ok(qkv)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamStore<F>,
        name: &str,
        part: Partition,
        dims: BlockDims,
        causal: bool,
        depth_scale: f64,
        rng: &mut R,
    ) -> Self {
        let d = dims.dim;
        let hidden = d * dims.mlp_ratio;
        let std = (1.0 / d as f64).sqrt();
        let out_std = (1.0 / hidden as f64).sqrt() * depth_scale;
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), part, d, rng),
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), part, d, 3 * d, false, std, rng),
            qv_bias: ps.init(format!("{name}.attn.qv_bias"), part, &[2 * d], Init::Zeros, rng),
            proj: Linear::new(ps, &format!("{name}.attn.proj"), part, d, d, true, std * depth_scale, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), part, d, rng),
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), part, d, hidden, true, std, rng),
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), part, hidden, d, true, out_std, rng),
            heads: dims.heads,
            dim: d,
            causal,
        }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, BlockCache<F>)> {
        let (a_in, ln1) = self.ln1.forward(ps, x);
        let qkv = self.qkv_forward(ps, &a_in)?;
        let (q, k, v) = split_qkv(&qkv, self.dim);
        let (attn_out, attn) = ops::attention(&q, &k, &v, self.heads, self.causal.then_some(0))?;
        let mut h = self.proj.forward(ps, &attn_out)?;
        h.add_assign(x);
        let (m_in, ln2) = self.ln2.forward(ps, &h);
        let hidden = self.fc1.forward(ps, &m_in)?;
        let act = ops::gelu(&hidden);
        let mut y = self.fc2.forward(ps, &act)?;
        y.add_assign(&h);
        Ok((y, BlockCache { ln1, a_in, q, k, v, attn, attn_out, ln2, m_in, hidden, act }))
    }

    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, c: &BlockCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        // y = h + fc2(gelu(fc1(ln2(h))))
        let dact = self.fc2.backward(ps, &c.act, dy, true).expect("dx requested");
        let dhidden = ops::gelu_backward(&c.hidden, &dact);
        let dm_in = self.fc1.backward(ps, &c.m_in, &dhidden, true).expect("dx requested");
        let mut dh = self.ln2.backward(ps, &c.ln2, &dm_in);
        dh.add_assign(dy);
        // h = x + proj(attn(qkv(ln1(x))))
        let dattn = self.proj.backward(ps, &c.attn_out, &dh, true).expect("dx requested");
        let g = ops::attention_backward(&c.q, &c.k, &c.v, self.heads, &c.attn, &dattn);
        let dqkv = join_qkv(&g.dq, &g.dk, &g.dv);
        if let Some(gb) = ps.grad_mut(self.qv_bias) {
            let d = self.dim;
            let gb = gb.data_mut();
            for i in 0..dqkv.rows() {
                let row = dqkv.row(i);
                for j in 0..d {
                    gb[j] += row[j];
                    gb[d + j] += row[2 * d + j];
                }
            }
        }
        let da_in = self.qkv.backward(ps, &c.a_in, &dqkv, true).expect("dx requested");
        let mut dx = self.ln1.backward(ps, &c.ln1, &da_in);
        dx.add_assign(&dh);
        dx
    }

    /// Processes new rows `x` that follow the positions already held in
    /// `kv`, appending their keys and values. Requires a causal block.
    pub fn forward_incremental<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>, kv: &mut Option<KvCache<F>>) -> Result<Tensor<F>> {
        let (a_in, _) = self.ln1.forward(ps, x);
        let qkv = self.qkv_forward(ps, &a_in)?;
        let (q, k, v) = split_qkv(&qkv, self.dim);
        let offset = kv.as_ref().map_or(0, |c| c.k.rows());
        let cache = match kv.take() {
            Some(c) => KvCache {
                k: Tensor::vcat(&[&c.k, &k])?,
                v: Tensor::vcat(&[&c.v, &v])?,
            },
            None => KvCache { k, v },
        };
        let (attn_out, _) = ops::attention(&q, &cache.k, &cache.v, self.heads, Some(offset))?;
        *kv = Some(cache);
        let mut h = self.proj.forward(ps, &attn_out)?;
        h.add_assign(x);
        let (m_in, _) = self.ln2.forward(ps, &h);
        let act = ops::gelu(&self.fc1.forward(ps, &m_in)?);
        let mut y = self.fc2.forward(ps, &act)?;
        y.add_assign(&h);
        Ok(y)
    }
}

/// Lookup table mapping token ids to rows.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, name: &str, part: Partition, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = ps.init(format!("{name}.weight"), part, &[vocab, dim], Init::Normal(std), rng);
        Self { table, dim }
    }

    pub fn vocab_size<F: Scalar>(&self, ps: &ParamStore<F>) -> usize {
        ps.value(self.table).rows()
    }

    pub fn row<'a, F: Scalar>(&self, ps: &'a ParamStore<F>, id: u32) -> &'a [F] {
        ps.value(self.table).row(id as usize)
    }

    /// Scatter-adds `dy` rows into the table gradient.
    pub fn backward_rows<F: Scalar>(&self, ps: &mut ParamStore<F>, ids: &[(usize, u32)], dy: &Tensor<F>) {
        if let Some(g) = ps.grad_mut(self.table) {
            for &(pos, id) in ids {
                for (a, &b) in g.row_mut(id as usize).iter_mut().zip(dy.row(pos)) {
                    *a += b;
                }
            }
        }
    }
}

/// Stack of blocks sharing dimensions.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new<F: Scalar, R: Rng>(ps: &mut ParamStore<F>, name: &str, part: Partition, dims: BlockDims, depth: usize, causal: bool, rng: &mut R) -> Self {
        let depth_scale = 1.0 / ((2 * depth.max(1)) as f64).sqrt();
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(ps, &format!("{name}.blocks.{i}"), part, dims, causal, depth_scale, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamStore<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Vec<BlockCache<F>>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, &h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward<F: Scalar>(&self, ps: &mut ParamStore<F>, caches: &[BlockCache<F>], dy: &Tensor<F>) -> Tensor<F> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            d = b.backward(ps, c, &d);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(causal: bool) -> (ParamStore<f64>, TransformerBlock) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = BlockDims { dim: 8, heads: 2, mlp_ratio: 2 };
        let b = TransformerBlock::new(&mut ps, "b", Partition::Decoder, dims, causal, 5.0, &mut rng);
        (ps, b)
    }

    fn rand_x(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zeroed_output_projections_make_identity() {
        let (mut ps, b) = block(true);
        for id in [b.proj.weight, b.fc2.weight] {
            ps.value_mut(id).fill(0.0);
        }
        let x = rand_x(5, 8, 1);
        let (y, _) = b.forward(&ps, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn causal_block_ignores_future_rows() {
        let (ps, b) = block(true);
        let x = rand_x(6, 8, 2);
        let mut x2 = x.clone();
        for v in x2.row_mut(4) {
            *v += 0.5;
        }
        let (y1, _) = b.forward(&ps, &x).unwrap();
        let (y2, _) = b.forward(&ps, &x2).unwrap();
        for i in 0..4 {
            assert_eq!(y1.row(i), y2.row(i));
        }
        assert_ne!(y1.row(4), y2.row(4));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let (ps, b) = block(true);
        let x = rand_x(7, 8, 3);
        let (full, _) = b.forward(&ps, &x).unwrap();
        let mut kv = None;
        let head = b.forward_incremental(&ps, &x.slice_rows(0, 4), &mut kv).unwrap();
        let t1 = b.forward_incremental(&ps, &x.slice_rows(4, 5), &mut kv).unwrap();
        let t2 = b.forward_incremental(&ps, &x.slice_rows(5, 7), &mut kv).unwrap();
        let inc = Tensor::vcat(&[&head, &t1, &t2]).unwrap();
        assert!(inc.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn frozen_block_accumulates_nothing() {
        let (mut ps, b) = block(false);
        ps.set_partition_trainable(Partition::Decoder, false);
        let x = rand_x(3, 8, 4);
        let (y, c) = b.forward(&ps, &x).unwrap();
        let dx = b.backward(&mut ps, &c, &y);
        assert!(dx.all_finite());
        assert!(ps.iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }
}
