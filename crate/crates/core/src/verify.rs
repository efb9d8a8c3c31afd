//! Finite-difference verification of every differentiable component, run in
//! 64-bit. Each check reduces the component output to `sum(out ⊙ R)` for a
//! fixed random `R` and compares analytic input and parameter gradients
//! against central differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coreferring::{RegionEncoder, RegionEncoderConfig};
use crate::model::{toy_config, Example, Model};
use crate::nn::layers::{BlockDims, TransformerBlock};
use crate::nn::{grad_check, ops, ParamStore, Partition, Tensor};
use crate::textcodec::{tokenize, Vocab, EOS};
use crate::visual::{DownsampleProjector, ProjectorConfig, Resampler, ResamplerConfig, VisualEncoder, VisualEncoderConfig};

pub const EPS: f64 = 1e-5;
/// Bound for isolated kernels and layers.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for the composed pixel-to-loss path.
pub const STACK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub op: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type T = Tensor<f64>;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> T {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn dot(a: &T, b: &T) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(shape: &[usize], v: &[f64]) -> T {
    Tensor::from_vec(shape, v.to_vec()).expect("sized")
}

/// Moves every parameter to a generic random point: weights and embeddings
/// `U(-scale, scale)`, biases `U(-scale, scale)/2`, norm gains `1 + U(-0.5, 0.5)`.
/// Freshly initialized layers have zero biases, unit gains and tiny weights,
/// which leaves many gradient entries near round-off.
fn spread_weights(ps: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for p in ps.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = if p.name.ends_with("gamma") {
            rand_t(&shape, rng).map(|v| 1.0 + 0.5 * v)
        } else if p.name.ends_with("bias") || p.name.ends_with("beta") {
            rand_t(&shape, rng).map(|v| 0.5 * scale * v)
        } else {
            rand_t(&shape, rng).map(|v| scale * v)
        };
    }
}

/// Checks the gradients of a loss over an explicit list of tensors.
fn check_tensors(inputs: &[T], loss: impl Fn(&[T]) -> f64, grads: &[T]) -> f64 {
    let mut worst = 0.0f64;
    for (i, (x, g)) in inputs.iter().zip(grads).enumerate() {
        let mut work = inputs.to_vec();
        let err = grad_check(
            |v| {
                work[i] = with(x.shape(), v);
                loss(&work)
            },
            x.data(),
            g.data(),
            EPS,
            None,
        );
        worst = worst.max(err);
    }
    worst
}

/// Checks gradients of a parameterized layer with respect to its input and
/// every parameter (at most `per_param` sampled coordinates of each).
fn check_layer(
    ps: &ParamStore<f64>,
    x: &T,
    loss: impl Fn(&ParamStore<f64>, &T) -> f64,
    grad: impl Fn(&mut ParamStore<f64>, &T) -> T,
    per_param: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut g_ps = ps.clone();
    g_ps.zero_grad();
    let dx = grad(&mut g_ps, x);
    let mut worst = grad_check(|v| loss(ps, &with(x.shape(), v)), x.data(), dx.data(), EPS, None);
    let mut work = ps.clone();
    for (idx, p) in g_ps.iter().enumerate() {
        let n = p.value.numel();
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { sample(rng, n, per_param).into_vec() };
        let shape = p.value.shape().to_vec();
        let id = crate::nn::ParamId(idx);
        let err = grad_check(
            |v| {
                *work.value_mut(id) = with(&shape, v);
                loss(&work, x)
            },
            p.value.data(),
            p.grad.data(),
            EPS,
            Some(&coords),
        );
        *work.value_mut(id) = p.value.clone();
        worst = worst.max(err);
    }
    worst
}

pub fn check_linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, w, b, r) = (rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng), rand_t(&[5], &mut rng), rand_t(&[3, 5], &mut rng));
    let loss = |t: &[T]| dot(&ops::linear(&t[0], &t[1], Some(&t[2])).expect("dims"), &r);
    let dx = ops::linear_backward_input(&w, &r);
    let (mut dw, mut db) = (Tensor::zeros(&[4, 5]), Tensor::zeros(&[5]));
    ops::linear_backward_params(&x, &r, &mut dw, Some(&mut db));
    check_tensors(&[x, w, b], loss, &[dx, dw, db])
}

pub fn check_conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&[3, 7, 7], &mut rng);
    let k = rand_t(&[4, 3, 3, 3], &mut rng);
    let b = rand_t(&[4], &mut rng);
    let r = rand_t(&[4, 4, 4], &mut rng);
    let loss = |t: &[T]| dot(&ops::conv2d(&t[0], &t[1], &t[2], 2, 1).expect("dims"), &r);
    let g = ops::conv2d_backward(&x, &k, &r, 2, 1).expect("dims");
    check_tensors(&[x, k, b], loss, &[g.dx, g.dkernels, g.dbias])
}

pub fn check_bilinear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&[3, 3, 2], &mut rng);
    let r = rand_t(&[5, 5, 2], &mut rng);
    let loss = |t: &[T]| dot(&ops::bilinear_resize(&t[0], 5).expect("grid"), &r);
    let dx = ops::bilinear_resize_backward(&r, 3).expect("grid");
    check_tensors(&[x], loss, &[dx])
}

pub fn check_layer_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, gm, bt, r) = (rand_t(&[4, 6], &mut rng), rand_t(&[6], &mut rng), rand_t(&[6], &mut rng), rand_t(&[4, 6], &mut rng));
    let loss = |t: &[T]| dot(&ops::layer_norm(&t[0], &t[1], &t[2]).0, &r);
    let (_, cache) = ops::layer_norm(&x, &gm, &bt);
    let (mut dg, mut db) = (Tensor::zeros(&[6]), Tensor::zeros(&[6]));
    let dx = ops::layer_norm_backward(&cache, &gm, &r, Some(&mut dg), Some(&mut db));
    check_tensors(&[x, gm, bt], loss, &[dx, dg, db])
}

pub fn check_gelu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&[5, 4], &mut rng).map(|v| 3.0 * v);
    let r = rand_t(&[5, 4], &mut rng);
    let loss = |t: &[T]| dot(&ops::gelu(&t[0]), &r);
    let dx = ops::gelu_backward(&x, &r);
    check_tensors(&[x], loss, &[dx])
}

fn check_attention_impl(seed: u64, causal: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = if causal { (5, 5) } else { (3, 6) };
    let (q, k, v) = (rand_t(&[m, 8], &mut rng), rand_t(&[n, 8], &mut rng), rand_t(&[n, 8], &mut rng));
    let r = rand_t(&[m, 8], &mut rng);
    let off = causal.then_some(0);
    let loss = |t: &[T]| dot(&ops::attention(&t[0], &t[1], &t[2], 2, off).expect("dims").0, &r);
    let (_, cache) = ops::attention(&q, &k, &v, 2, off).expect("dims");
    let g = ops::attention_backward(&q, &k, &v, 2, &cache, &r);
    check_tensors(&[q, k, v], loss, &[g.dq, g.dk, g.dv])
}

pub fn check_attention(seed: u64) -> f64 {
    check_attention_impl(seed, false)
}

pub fn check_causal_attention(seed: u64) -> f64 {
    check_attention_impl(seed, true)
}

pub fn check_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = rand_t(&[5, 7], &mut rng).map(|v| 2.0 * v);
    let targets: Vec<u32> = (0..5).map(|_| rng.gen_range(0..7)).collect();
    let mask = [true, false, true, true, false];
    let loss = |t: &[T]| ops::cross_entropy(&t[0], &targets, &mask).expect("scored");
    let d = ops::cross_entropy_backward(&logits, &targets, &mask).expect("scored");
    check_tensors(&[logits], loss, &[d])
}

pub fn check_decoder_block(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let block = TransformerBlock::new(&mut ps, "b", Partition::Decoder, BlockDims { dim: 8, heads: 2, mlp_ratio: 2 }, true, 5.0, &mut rng);
    spread_weights(&mut ps, 0.5, &mut rng);
    let x = rand_t(&[5, 8], &mut rng);
    let r = rand_t(&[5, 8], &mut rng);
    check_layer(
        &ps,
        &x,
        |ps, x| dot(&block.forward(ps, x).expect("dims").0, &r),
        |ps, x| {
            let (_, c) = block.forward(ps, x).expect("dims");
            block.backward(ps, &c, &r)
        },
        usize::MAX,
        &mut rng,
    )
}

fn toy_encoder(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> VisualEncoder {
    let cfg = VisualEncoderConfig { patch_size: 4, pretrained_grid: 2, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, resolution: 16 };
    VisualEncoder::new(ps, cfg, rng).expect("valid")
}

/// Image encoder followed by the down-sampling projector on a 16-px input.
pub fn check_encoder_projector(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let enc = toy_encoder(&mut ps, &mut rng);
    let proj = DownsampleProjector::new(
        &mut ps,
        ProjectorConfig { kernel: 3, stride: 2, padding: 1, conv_channels: 6, out_dim: 5 },
        8,
        &mut rng,
    )
    .expect("valid");
    spread_weights(&mut ps, 0.5, &mut rng);
    let x = rand_t(&[16, 16, 3], &mut rng);
    let r = rand_t(&[4, 5], &mut rng);
    check_layer(
        &ps,
        &x,
        |ps, x| {
            let (g, _) = enc.forward(ps, x).expect("dims");
            dot(&proj.forward(ps, &g).expect("dims").0.tokens, &r)
        },
        |ps, x| {
            let (g, ec) = enc.forward(ps, x).expect("dims");
            let (_, pc) = proj.forward(ps, &g).expect("dims");
            let dg = proj.backward(ps, &pc, &r, true).expect("requested");
            enc.backward(ps, &ec, &dg, true).expect("requested")
        },
        24,
        &mut rng,
    )
}

pub fn check_resampler(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let rs = Resampler::new(&mut ps, ResamplerConfig { queries: 3, depth: 2, heads: 2, mlp_ratio: 2, out_dim: 5 }, 4, &mut rng).expect("valid");
    spread_weights(&mut ps, 0.5, &mut rng);
    let x = rand_t(&[3, 3, 4], &mut rng);
    let r = rand_t(&[3, 5], &mut rng);
    let grid = |x: &T| crate::visual::FeatureGrid { features: x.clone() };
    check_layer(
        &ps,
        &x,
        |ps, x| dot(&rs.forward(ps, &grid(x)).expect("dims").0.tokens, &r),
        |ps, x| {
            let (_, c) = rs.forward(ps, &grid(x)).expect("dims");
            rs.backward(ps, &c, &r, true).expect("requested").reshape(&[3, 3, 4]).expect("size")
        },
        24,
        &mut rng,
    )
}

pub fn check_region_encoder(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let cfg = RegionEncoderConfig { resolution: 8, patch_size: 4, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2, out_dim: 5 };
    let enc = RegionEncoder::new(&mut ps, cfg, &mut rng).expect("valid");
    spread_weights(&mut ps, 0.5, &mut rng);
    let x = rand_t(&[8, 8, 3], &mut rng);
    let r = rand_t(&[1, 5], &mut rng);
    check_layer(
        &ps,
        &x,
        |ps, x| dot(&enc.forward(ps, x).expect("dims").0.embedding, &r),
        |ps, x| {
            let (_, c) = enc.forward(ps, x).expect("dims");
            enc.backward(ps, &c, &r, true).expect("requested")
        },
        24,
        &mut rng,
    )
}

/// Vocabulary used by the full-stack check.
fn stack_vocab() -> Vocab {
    Vocab::build(&["count the <region> red circle"]).expect("non-empty")
}

/// Image pixels, crop pixels and a sample of parameters through encoder,
/// projector, region encoder, decoder and answer-masked loss.
pub fn check_full_stack(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = stack_vocab();
    let mut cfg = toy_config();
    cfg.init_seed = seed;
    let mut model = Model::<f64>::new(cfg, v.clone()).expect("valid");
    spread_weights(&mut model.params, 0.5, &mut rng);
    let mut answer = tokenize("2 red", &v).ids;
    answer.push(EOS);
    let ex = Example {
        image: rand_t(&[16, 16, 3], &mut rng),
        region: Some(rand_t(&[8, 8, 3], &mut rng)),
        instruction: tokenize("count the <region>", &v),
        answer,
    };
    model.params.zero_grad();
    let (_, cache) = model.forward(&ex).expect("forward");
    let grads = model.backward(&cache, true).expect("backward");
    let (dimg, dreg) = (grads.image.expect("requested"), grads.region.expect("requested"));

    let base = model.clone();
    let loss_with = |m: &Model<f64>, ex: &Example<f64>| m.loss(ex).expect("forward");
    let mut worst = grad_check(
        |vals| {
            let mut e = ex.clone();
            e.image = with(&[16, 16, 3], vals);
            loss_with(&base, &e)
        },
        ex.image.data(),
        dimg.data(),
        EPS,
        None,
    );
    worst = worst.max(grad_check(
        |vals| {
            let mut e = ex.clone();
            e.region = Some(with(&[8, 8, 3], vals));
            loss_with(&base, &e)
        },
        ex.region.as_ref().expect("set").data(),
        dreg.data(),
        EPS,
        None,
    ));
    let mut work = base.clone();
    for (idx, p) in model.params.iter().enumerate() {
        let n = p.value.numel();
        let coords: Vec<usize> = if n <= 6 { (0..n).collect() } else { sample(&mut rng, n, 6).into_vec() };
        let id = crate::nn::ParamId(idx);
        let shape = p.value.shape().to_vec();
        worst = worst.max(grad_check(
            |vals| {
                *work.params.value_mut(id) = with(&shape, vals);
                loss_with(&work, &ex)
            },
            p.value.data(),
            p.grad.data(),
            EPS,
            Some(&coords),
        ));
        *work.params.value_mut(id) = p.value.clone();
    }
    worst
}

type CheckFn = fn(u64) -> f64;

/// Every check with its tolerance.
pub const CHECKS: &[(&str, CheckFn, f64)] = &[
    ("linear", check_linear, OP_TOLERANCE),
    ("conv2d", check_conv2d, OP_TOLERANCE),
    ("bilinear_resize", check_bilinear, OP_TOLERANCE),
    ("layer_norm", check_layer_norm, OP_TOLERANCE),
    ("gelu", check_gelu, OP_TOLERANCE),
    ("attention", check_attention, OP_TOLERANCE),
    ("causal_attention", check_causal_attention, OP_TOLERANCE),
    ("cross_entropy", check_cross_entropy, OP_TOLERANCE),
    ("decoder_block", check_decoder_block, OP_TOLERANCE),
    ("resampler", check_resampler, OP_TOLERANCE),
    ("region_encoder", check_region_encoder, OP_TOLERANCE),
    ("encoder+projector", check_encoder_projector, STACK_TOLERANCE),
    ("full_stack", check_full_stack, STACK_TOLERANCE),
];

/// Runs every check over `seeds` seeds and reports the worst error per check.
pub fn run_all(seeds: usize) -> Vec<CheckRow> {
    CHECKS
        .iter()
        .map(|&(op, f, tolerance)| CheckRow {
            op: op.to_string(),
            seeds,
            max_rel_err: (0..seeds as u64).map(f).fold(0.0, f64::max),
            tolerance,
        })
        .collect()
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<20} {:>6} {:>12} {:>10} {}\n", "op", "seeds", "max_rel_err", "tol", "status");
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>6} {:>12.3e} {:>10.0e} {}\n",
            r.op,
            r.seeds,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
