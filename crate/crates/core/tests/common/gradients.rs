//! Reverse-mode gradients against fourth-order finite differences in f64.
//!
//! Each check records its worst relative error instead of asserting, so the
//! same suite serves the per-op tests and the acceptance summary.

use std::cell::RefCell;

use plainseg::autograd::{finite_difference_check, store_gradient_check};
use plainseg::model::decoder::DecoderLayer;
use plainseg::model::hier::reference_points;
use plainseg::model::{DecoderConfig, MaskClassOutput, ModelConfig, Prediction, Refiner, Segmenter, ViTConfig};
use plainseg::nn::{ConvParams, Ctx, KeyMask, MsDeformAttn, ParamBuilder, ParamGroup, ParamRole, ParamStore};
use plainseg::train::{dense_ce_loss, mask_class_loss, GtSegmentation, LossWeights};
use plainseg::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;
const INSTANCES: u64 = 5;

thread_local! {
    static LOG: RefCell<Vec<(String, f64)>> = const { RefCell::new(Vec::new()) };
}

/// Keeps the worst error seen under `name`.
fn record(name: &str, err: f64) {
    LOG.with(|l| {
        let mut l = l.borrow_mut();
        match l.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => l.push((name.to_string(), err)),
        }
    });
}

/// Runs one group and returns `(check, worst relative error)` pairs.
pub fn collect(group: fn()) -> Vec<(String, f64)> {
    LOG.with(|l| l.borrow_mut().clear());
    group();
    LOG.with(|l| l.take())
}

pub const SUITE: &[(&str, fn())] = &[
    ("elementwise", elementwise_and_broadcast),
    ("reductions", reductions_and_normalization),
    ("shape", shape_ops),
    ("matmul", matrix_products),
    ("conv", convolutions),
    ("interp", interpolation_and_pooling),
    ("masked attention", masked_attention),
    ("deform sampling", deformable_sampling),
    ("deform attention", deformable_attention_module),
    ("refiner", refiner),
    ("decoder layer", decoder_layer),
    ("mask loss", set_prediction_loss),
    ("dense loss", dense_loss),
    ("models", total_loss_through_models),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// `sum(x * w)` for a fixed pseudo-random `w`, so every output element
/// contributes with a distinct weight.
fn project<'g>(x: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = Tensor::randn(x.shape(), 1.0, &mut rng(seed ^ 0xABCD));
    x.mul(x.graph().constant(w))?.sum()
}

fn check_ops(
    name: &str,
    shapes: &[&[usize]],
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| randn(s, &mut r)).collect();
        let err = finite_difference_check(|g, v| project(f(g, v)?, seed), &inputs, EPS).unwrap();
        worst = worst.max(err);
    }
    record(name, worst);
}

pub fn elementwise_and_broadcast() {
    check_ops("add", &[&[2, 3, 4], &[3, 1]], |_, v| v[0].add(v[1]));
    check_ops("sub", &[&[2, 1, 4], &[3, 4]], |_, v| v[0].sub(v[1]));
    check_ops("mul", &[&[2, 3, 4], &[4]], |_, v| v[0].mul(v[1]));
    check_ops("div", &[&[3, 4], &[3, 1]], |_, v| v[0].div(v[1].square().add_scalar(0.5)));
    check_ops("neg scale", &[&[5]], |_, v| Ok(v[0].neg().scale(1.7).add_scalar(0.3)));
    check_ops("exp", &[&[6]], |_, v| Ok(v[0].exp()));
    check_ops("ln", &[&[6]], |_, v| Ok(v[0].square().add_scalar(0.1).ln()));
    check_ops("sqrt", &[&[6]], |_, v| Ok(v[0].square().add_scalar(0.2).sqrt()));
    check_ops("relu", &[&[10]], |_, v| Ok(v[0].relu()));
    check_ops("gelu", &[&[10]], |_, v| Ok(v[0].gelu()));
    check_ops("sigmoid", &[&[10]], |_, v| Ok(v[0].sigmoid()));
    check_ops("softplus", &[&[10]], |_, v| Ok(v[0].softplus()));
}

pub fn reductions_and_normalization() {
    check_ops("sum_axis", &[&[2, 3, 4]], |_, v| v[0].sum_axis(1));
    check_ops("mean_axis", &[&[2, 3, 4]], |_, v| v[0].mean_axis(2));
    check_ops("mean", &[&[2, 3]], |_, v| v[0].mean());
    check_ops("softmax", &[&[3, 5]], |_, v| v[0].softmax());
    check_ops("log_softmax", &[&[3, 5]], |_, v| v[0].log_softmax());
    check_ops("layer_norm", &[&[3, 6], &[6], &[6]], |_, v| v[0].layer_norm(v[1], v[2], 1e-6));
    check_ops("layer_norm_channels", &[&[2, 4, 3, 3], &[4], &[4]], |_, v| v[0].layer_norm_channels(v[1], v[2], 1e-6));
    check_ops("batch_norm_train", &[&[3, 2, 3, 3], &[2], &[2]], |_, v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0));
    check_ops("batch_norm_eval", &[&[2, 3, 2, 2], &[3], &[3]], |_, v| {
        let mean = Tensor::from_f64([3], &[0.1, -0.2, 0.3])?;
        let var = Tensor::from_f64([3], &[0.5, 1.5, 2.0])?;
        v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)
    });
}

pub fn shape_ops() {
    check_ops("reshape permute", &[&[2, 3, 4]], |_, v| v[0].reshape([6, 4])?.permute(&[1, 0]));
    check_ops("narrow", &[&[4, 5]], |_, v| v[0].narrow(1, 1, 3));
    check_ops("split concat", &[&[2, 6]], |_, v| {
        let p = v[0].split(1, 3)?;
        Var::concat(&[p[2], p[0]], 1)
    });
    check_ops("index_select", &[&[5, 3]], |_, v| v[0].index_select(&[4, 0, 4, 2]));
}

pub fn matrix_products() {
    check_ops("matmul", &[&[3, 4], &[4, 2]], |_, v| v[0].matmul(v[1]));
    check_ops("bmm", &[&[2, 3, 4], &[2, 4, 5]], |_, v| v[0].bmm(v[1], false));
    check_ops("bmm transposed", &[&[2, 3, 4], &[2, 5, 4]], |_, v| v[0].bmm(v[1], true));
    check_ops("linear", &[&[2, 3, 4], &[4, 5], &[5]], |_, v| v[0].linear(v[1], Some(v[2])));
}

pub fn convolutions() {
    let p = ConvParams::same(4, 6, 3).groups(2);
    check_ops("grouped conv", &[&[2, 4, 5, 5], &[6, 2, 3, 3], &[6]], move |_, v| v[0].conv2d(v[1], Some(v[2]), p));
    let p = ConvParams { stride: 2, ..ConvParams::same(3, 2, 3) }.bias(false);
    check_ops("strided conv", &[&[1, 3, 6, 6], &[2, 3, 3, 3]], move |_, v| v[0].conv2d(v[1], None, p));
    let p = ConvParams { kernel: 2, stride: 2, padding: 0, ..ConvParams::same(3, 4, 1) };
    check_ops("deconv", &[&[2, 3, 3, 2], &[3, 4, 2, 2], &[4]], move |_, v| v[0].conv_transpose2d(v[1], Some(v[2]), p));
}

pub fn interpolation_and_pooling() {
    check_ops("upsample x2", &[&[1, 2, 3, 4]], |_, v| v[0].upsample_bilinear(2));
    check_ops("upsample x4", &[&[2, 1, 3, 3]], |_, v| v[0].upsample_bilinear(4));
    check_ops("resize", &[&[1, 2, 5, 4]], |_, v| v[0].resize_bilinear(3, 7));
    check_ops("max_pool", &[&[2, 2, 4, 6]], |_, v| v[0].max_pool2d());
}

pub fn masked_attention() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (b, nq, nk, d, heads) = (2, 3, 5, 8, 2);
        let masked: Vec<bool> = (0..b * nq * nk).map(|_| r.random_bool(0.5)).collect();
        let mut mask = KeyMask::new(b, nq, nk, masked).unwrap();
        // one row fully masked to exercise the safeguard
        mask.masked[..nk].fill(true);
        let inputs = [
            randn(&[b, nq, d], &mut r),
            randn(&[b, nk, d], &mut r),
            randn(&[b, nk, d], &mut r),
            randn(&[heads, nq, nk], &mut r),
        ];
        let err = finite_difference_check(
            |_, v| {
                let (o, _) = plainseg::nn::scaled_dot_product(v[0], v[1], v[2], heads, Some(v[3]), Some(&mask))?;
                project(o, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        record("masked attention", err);
    }
}

pub fn deformable_sampling() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let levels = [(4, 5), (2, 3)];
        let s: usize = levels.iter().map(|(h, w)| h * w).sum();
        let (b, nq, heads, hd, p) = (1, 3, 2, 3, 2);
        let value = randn(&[b, s, heads, hd], &mut r);
        // keep sampling points inside the maps, away from the clamped border
        let loc = Tensor::uniform(vec![b, nq, heads, levels.len(), p, 2], 0.15, 0.85, &mut r);
        let w = randn(&[b, nq, heads, levels.len(), p], &mut r);
        let err = finite_difference_check(
            |_, v| project(v[0].ms_deform_sample(&levels, v[1], v[2])?, seed),
            &[value, loc, w],
            EPS,
        )
        .unwrap();
        record("deformable sampling", err);
    }
}

fn input_param(pb: &mut ParamBuilder<'_, f64>, shape: &[usize], r: &mut ChaCha8Rng) -> plainseg::nn::ParamId {
    pb.add_value("input", randn(shape, r), ParamRole::Weight)
}

/// Perturbs every parameter with noise so that zero-initialized weights do
/// not hide gradient paths.
fn jitter(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let e = store.get(id);
        let v = if e.role == ParamRole::Buffer {
            e.value.map(|x| if e.name.ends_with("running_var") { 1.0 + 0.5 * x.abs() } else { x })
        } else {
            e.value.zip_map(&Tensor::randn(e.value.shape().to_vec(), 0.3, r), |a, b| a + b).unwrap()
        };
        store.set(id, v).unwrap();
    }
}

pub fn deformable_attention_module() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let levels = [(4, 4), (2, 2)];
        let s: usize = levels.iter().map(|(h, w)| h * w).sum();
        let (attn, x) = {
            let mut pb = ParamBuilder::new(&mut store, &mut r, ParamGroup::Head);
            let attn = MsDeformAttn::new(&mut pb, "attn", 8, 2, 2, 2).unwrap();
            let x = pb.add_value("input", Tensor::randn(vec![1, s, 8], 1.0, &mut rng(seed + 100)), ParamRole::Weight);
            (attn, x)
        };
        // small offsets keep the sampled points off the clamped border
        let mut r2 = rng(seed + 7);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let e = store.get(id);
            let std = if e.name.contains("sampling_offsets") { 0.02 } else { 0.3 };
            let v = e.value.zip_map(&Tensor::randn(e.value.shape().to_vec(), std, &mut r2), |a, b| a + b).unwrap();
            store.set(id, v).unwrap();
        }
        let reference = reference_points::<f64>(1, &levels);
        let err = store_gradient_check(
            &store,
            |ctx| {
                let v = ctx.p(x);
                project(attn.forward(ctx, v, &reference, v, &levels)?, seed)
            },
            EPS,
            6,
            seed,
        )
        .unwrap();
        record("deformable attention", err);
    }
}

pub fn refiner() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let (refiner, x) = {
            let mut pb = ParamBuilder::new(&mut store, &mut r, ParamGroup::Head);
            let refiner = Refiner::new(&mut pb, 6, 4, 2).unwrap();
            let x = input_param(&mut pb, &[1, 6, 2, 3], &mut rng(seed + 50));
            (refiner, x)
        };
        jitter(&mut store, &mut rng(seed + 9));
        let err = store_gradient_check(
            &store,
            |ctx| {
                let o = refiner.forward(ctx, ctx.p(x))?;
                let mut loss = project(o.mask, seed)?;
                for (i, g) in o.cross_attn.iter().enumerate() {
                    loss = loss.add(project(*g, seed + 1 + i as u64)?)?;
                }
                Ok(loss)
            },
            EPS,
            8,
            seed,
        )
        .unwrap();
        record("refiner", err);
    }
}

pub fn decoder_layer() {
    let cfg = DecoderConfig { width: 8, num_layers: 1, num_queries: 3, num_heads: 2, ffn_dim: 12 };
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let (layer, q, pos, mem) = {
            let mut pb = ParamBuilder::new(&mut store, &mut r, ParamGroup::Head);
            let layer = DecoderLayer::new(&mut pb, "layer", &cfg).unwrap();
            let mut r2 = rng(seed + 3);
            let q = pb.add_value("q", randn(&[2, 3, 8], &mut r2), ParamRole::Weight);
            let pos = pb.add_value("pos", randn(&[2, 3, 8], &mut r2), ParamRole::Weight);
            let mem = pb.add_value("mem", randn(&[2, 6, 8], &mut r2), ParamRole::Weight);
            (layer, q, pos, mem)
        };
        jitter(&mut store, &mut rng(seed + 11));
        let mut mr = rng(seed + 5);
        let mask = KeyMask::new(2, 3, 6, (0..36).map(|_| mr.random_bool(0.4)).collect()).unwrap();
        let err = store_gradient_check(
            &store,
            |ctx| project(layer.forward(ctx, ctx.p(q), ctx.p(pos), ctx.p(mem), Some(&mask))?, seed),
            EPS,
            8,
            seed,
        )
        .unwrap();
        record("decoder layer", err);
    }
}

fn random_labels(r: &mut ChaCha8Rng, n: usize, k: u8) -> Vec<u8> {
    (0..n).map(|_| if r.random_bool(0.05) { 255 } else { r.random_range(0..k) }).collect()
}

pub fn set_prediction_loss() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (b, nq, k, h, w) = (2, 5, 3, 4, 4);
        let gts: Vec<_> = (0..b)
            .map(|_| GtSegmentation::from_labels(&random_labels(&mut r, 64, k as u8), 8, 8, h, w, k).unwrap())
            .collect();
        let inputs = [
            randn(&[b, nq, k + 1], &mut r),
            randn(&[b, nq, h, w], &mut r),
            randn(&[b, nq, k + 1], &mut r),
            randn(&[b, nq, h, w], &mut r),
        ];
        let err = finite_difference_check(
            |_, v| {
                let out = MaskClassOutput {
                    predictions: vec![
                        Prediction { class_logits: v[0], mask_logits: v[1] },
                        Prediction { class_logits: v[2], mask_logits: v[3] },
                    ],
                    sources: vec![0],
                    reset_rows: vec![0, 0],
                };
                Ok(mask_class_loss(&out, &gts, &LossWeights::default())?.0)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        record("mask loss", err);
    }
}

pub fn dense_loss() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let labels = vec![random_labels(&mut r, 36, 3)];
        let err =
            finite_difference_check(|_, v| dense_ce_loss(v[0], &labels, 6, 6), &[randn(&[1, 3, 3, 3], &mut r)], EPS)
                .unwrap();
        record("dense loss", err);
    }
}

/// Whole models: encoder, head and loss, probed at sampled parameters.
pub fn total_loss_through_models() {
    let encoder = ViTConfig { img_size: 16, embed_dim: 8, depth: 2, num_heads: 2, mlp_ratio: 2, ..ViTConfig::tiny() };
    let base = ModelConfig {
        encoder,
        decoder: DecoderConfig { width: 8, num_layers: 2, num_queries: 4, num_heads: 2, ffn_dim: 8 },
        ..ModelConfig::plainseg_tiny(3)
    };
    let hier = ModelConfig {
        variant: plainseg::model::Variant::PlainsegHier,
        decoder: DecoderConfig { num_layers: 3, ..base.decoder.clone() },
        hier: plainseg::model::HierConfig { deform_heads: 2, deform_points: 2, deform_ffn_dim: 8 },
        ..base.clone()
    };
    for (cfg, seeds) in [(base, 0..3u64), (hier, 3..5u64)] {
        for seed in seeds {
            let mut model = Segmenter::<f64>::new(&cfg, seed).unwrap();
            jitter(&mut model.store, &mut rng(seed + 21));
            // offsets stay small so deformable samples remain interior
            let ids: Vec<_> =
                model.store.iter().filter(|(_, e)| e.name.contains("sampling_offsets")).map(|(id, _)| id).collect();
            for id in ids {
                let v = model.store.get(id).value.scale(0.05);
                model.store.set(id, v).unwrap();
            }
            let mut r = rng(seed + 1);
            let image = randn(&[1, 3, 16, 16], &mut r);
            let labels = random_labels(&mut r, 256, 3);
            let err = store_gradient_check(
                &model.store,
                |ctx: &Ctx<'_, f64>| {
                    let out = match model.forward(ctx, ctx.constant(image.clone()))? {
                        plainseg::model::SegOutput::MaskClass(o) => o,
                        _ => unreachable!(),
                    };
                    let ms = out.last().mask_logits.shape();
                    let gt = GtSegmentation::from_labels(&labels, 16, 16, ms[2], ms[3], 3)?;
                    Ok(mask_class_loss(&out, &[gt], &LossWeights::default())?.0)
                },
                EPS,
                2,
                seed,
            )
            .unwrap();
            record(&format!("{:?} total loss", cfg.variant), err);
        }
    }
}
