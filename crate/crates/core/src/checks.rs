//! Finite-difference verification of every differentiable primitive, the
//! layers built from them, and the end-to-end losses of a two-patch model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::loss::ChamferForm;
use crate::model::{build_dual_mask, Batch, Model, ModelConfig};
use crate::nncore::{
    gradcheck, AttentionMask, Ctx, GradcheckOptions, GradcheckReport, Graph, Init, LayerNorm, Linear, ParameterSet,
    Tensor, TransformerBlock, Var,
};
use crate::sequencer::{prepare_sequence, PatchEmbedder};

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParameterSet<f64>,
    loss: LossFn,
}

fn normal(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Normal values kept at least 0.2 away from zero (for kinked primitives).
fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = normal(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.2));
    t
}

/// `sum(out * w)` with a fixed random `w`, so every output entry matters.
fn project(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Var {
    let w = g.input(w.clone());
    let prod = g.mul(out, w);
    g.sum(prod)
}

fn params_of(rng: &mut ChaCha8Rng, specs: &[(&str, Vec<usize>)]) -> ParameterSet<f64> {
    let mut ps = ParameterSet::new();
    for (name, shape) in specs {
        ps.insert(*name, normal(shape.clone(), rng), true)
            .expect("unique names");
    }
    ps
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut push = |name, params, loss: LossFn| cases.push(Case { name, params, loss });

    let w = normal(vec![3, 2], rng);
    push(
        "matmul",
        params_of(rng, &[("a", vec![3, 4]), ("b", vec![4, 2])]),
        Box::new(move |g, ps| {
            let (a, b) = (g.param(ps, ps.id("a").unwrap()), g.param(ps, ps.id("b").unwrap()));
            let y = g.matmul(a, b);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 4], rng);
    push(
        "add_bias",
        params_of(rng, &[("x", vec![3, 4]), ("b", vec![4])]),
        Box::new(move |g, ps| {
            let (x, b) = (g.param(ps, ps.id("x").unwrap()), g.param(ps, ps.id("b").unwrap()));
            let y = g.add_bias(x, b);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 4], rng);
    push(
        "add",
        params_of(rng, &[("a", vec![3, 4]), ("b", vec![3, 4])]),
        Box::new(move |g, ps| {
            let (a, b) = (g.param(ps, ps.id("a").unwrap()), g.param(ps, ps.id("b").unwrap()));
            let y = g.add(a, b);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 4], rng);
    push(
        "mul",
        params_of(rng, &[("a", vec![3, 4]), ("b", vec![3, 4])]),
        Box::new(move |g, ps| {
            let (a, b) = (g.param(ps, ps.id("a").unwrap()), g.param(ps, ps.id("b").unwrap()));
            let y = g.mul(a, b);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 4], rng);
    push(
        "scale",
        params_of(rng, &[("x", vec![3, 4])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.scale(x, -1.7);
            Ok(project(g, y, &w))
        }),
    );

    push(
        "sum",
        params_of(rng, &[("x", vec![3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let s = g.sum(x);
            Ok(g.scale(s, 0.5))
        }),
    );

    let w = normal(vec![6, 2], rng);
    push(
        "reshape",
        params_of(rng, &[("x", vec![3, 4])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.reshape(x, vec![6, 2]);
            Ok(project(g, y, &w))
        }),
    );

    let mut relu_ps = ParameterSet::new();
    relu_ps.insert("x", away_from_zero(vec![4, 5], rng), true).unwrap();
    let w = normal(vec![4, 5], rng);
    push(
        "relu",
        relu_ps,
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.relu(x);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![4, 5], rng);
    push(
        "gelu",
        params_of(rng, &[("x", vec![4, 5])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.gelu(x);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 6], rng);
    push(
        "layer_norm",
        params_of(rng, &[("x", vec![3, 6]), ("gamma", vec![6]), ("beta", vec![6])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let gamma = g.param(ps, ps.id("gamma").unwrap());
            let beta = g.param(ps, ps.id("beta").unwrap());
            let y = g.layer_norm(x, gamma, beta);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![8, 4], rng);
    let mask = AttentionMask::causal(4);
    push(
        "softmax",
        params_of(rng, &[("x", vec![8, 4])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.softmax(x, Some(&mask));
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![6, 4], rng);
    let mask = Arc::new(build_dual_mask(3, 0.5, rng).expect("valid ratio").mask);
    push(
        "attention",
        params_of(rng, &[("qkv", vec![6, 12])]),
        Box::new(move |g, ps| {
            let qkv = g.param(ps, ps.id("qkv").unwrap());
            let y = g.attention(qkv, 3, 2, &mask);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![2, 3], rng);
    push(
        "group_max",
        params_of(rng, &[("x", vec![6, 3])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.group_max(x, 3);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![2, 3], rng);
    push(
        "group_mean",
        params_of(rng, &[("x", vec![6, 3])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.group_mean(x, 3);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![6, 5], rng);
    push(
        "concat_broadcast",
        params_of(rng, &[("global", vec![2, 3]), ("local", vec![6, 2])]),
        Box::new(move |g, ps| {
            let a = g.param(ps, ps.id("global").unwrap());
            let b = g.param(ps, ps.id("local").unwrap());
            let y = g.concat_broadcast(a, b, 3);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![3, 6], rng);
    push(
        "concat_cols",
        params_of(rng, &[("a", vec![3, 2]), ("b", vec![3, 4])]),
        Box::new(move |g, ps| {
            let a = g.param(ps, ps.id("a").unwrap());
            let b = g.param(ps, ps.id("b").unwrap());
            let y = g.concat_cols(a, b);
            Ok(project(g, y, &w))
        }),
    );

    let w = normal(vec![4, 3], rng);
    push(
        "gather_rows",
        params_of(rng, &[("x", vec![4, 3])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let y = g.gather_rows(x, vec![3, 0, 0, 2]);
            Ok(project(g, y, &w))
        }),
    );

    for (name, form) in [("chamfer_l1", ChamferForm::L1), ("chamfer_l2", ChamferForm::L2)] {
        let mut ps = ParameterSet::new();
        ps.insert("pred", away_from_zero(vec![8, 3], rng), true).unwrap();
        ps.insert("target", normal(vec![10, 3], rng), true).unwrap();
        push(
            name,
            ps,
            Box::new(move |g, ps| {
                let p = g.param(ps, ps.id("pred").unwrap());
                let t = g.param(ps, ps.id("target").unwrap());
                Ok(g.chamfer(p, t, 4, 5, form))
            }),
        );
    }

    push(
        "cross_entropy",
        params_of(rng, &[("logits", vec![3, 4])]),
        Box::new(|g, ps| {
            let x = g.param(ps, ps.id("logits").unwrap());
            g.cross_entropy(x, &[2, 0, 3])
        }),
    );

    let w = normal(vec![4, 5], rng);
    push(
        "dropout",
        params_of(rng, &[("x", vec![4, 5])]),
        Box::new(move |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            // same mask on every evaluation
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let y = g.dropout(x, 0.3, &mut r);
            Ok(project(g, y, &w))
        }),
    );
    cases
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();

    let mut ps = ParameterSet::new();
    let lin = Linear::new(&mut ps, "linear", 5, 3, Init::FanIn, rng).unwrap();
    let x = normal(vec![4, 5], rng);
    let w = normal(vec![4, 3], rng);
    cases.push(Case {
        name: "linear",
        params: ps,
        loss: Box::new(move |g, ps| {
            let cx = Ctx::new(ps);
            let x = g.input(x.clone());
            let y = lin.forward(g, &cx, x);
            Ok(project(g, y, &w))
        }),
    });

    let mut ps = ParameterSet::new();
    let ln = LayerNorm::new(&mut ps, "norm", 6).unwrap();
    perturb(&mut ps, rng);
    let x = normal(vec![3, 6], rng);
    let w = normal(vec![3, 6], rng);
    cases.push(Case {
        name: "layer_norm_layer",
        params: ps,
        loss: Box::new(move |g, ps| {
            let cx = Ctx::new(ps);
            let x = g.input(x.clone());
            let y = ln.forward(g, &cx, x);
            Ok(project(g, y, &w))
        }),
    });

    let mut ps = ParameterSet::new();
    let block = TransformerBlock::new(&mut ps, "block", 6, 2, rng).unwrap();
    perturb(&mut ps, rng);
    let x = normal(vec![8, 6], rng);
    let pos = normal(vec![8, 6], rng);
    let w = normal(vec![8, 6], rng);
    let mask = Arc::new(build_dual_mask(4, 0.5, rng).unwrap().mask);
    cases.push(Case {
        name: "transformer_block",
        params: ps,
        loss: Box::new(move |g, ps| {
            let mut cx = Ctx::new(ps);
            let x = g.input(x.clone());
            let pos = g.input(pos.clone());
            let y = block.forward(g, &mut cx, x, Some(pos), 4, &mask)?;
            Ok(project(g, y, &w))
        }),
    });

    let mut ps = ParameterSet::new();
    let emb = PatchEmbedder::new(&mut ps, "embed", 6, rng).unwrap();
    let pts = normal(vec![8, 3], rng);
    let w = normal(vec![2, 6], rng);
    cases.push(Case {
        name: "patch_embedder",
        params: ps,
        loss: Box::new(move |g, ps| {
            let cx = Ctx::new(ps);
            let x = g.input(pts.clone());
            let y = emb.forward(g, &cx, x, 4);
            Ok(project(g, y, &w))
        }),
    });
    cases
}

/// Moves every parameter off its deterministic init (unit gains, zero biases).
fn perturb(ps: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng) {
    for (_, _, p) in ps.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.random::<f64>() - 0.15;
        }
    }
}

fn toy_model(rng: &mut ChaCha8Rng) -> (Model<f64>, Batch<f64>) {
    let cfg = ModelConfig {
        patches: 2,
        patch_size: 4,
        num_classes: 3,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(cfg, rng.random()).unwrap();
    perturb(&mut model.params, rng);
    let seqs: Vec<_> = (0..2)
        .map(|_| {
            let pts = (0..12)
                .map(|_| {
                    [
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ]
                })
                .collect();
            prepare_sequence(&PointCloud::new(pts).unwrap(), &cfg.sequencer(12)).unwrap()
        })
        .collect();
    let refs: Vec<_> = seqs.iter().collect();
    let batch = Batch::new(&refs, vec![1, 2]).unwrap();
    (model, batch)
}

fn model_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let (model, batch) = toy_model(rng);
    let causal = Arc::new(AttentionMask::causal(2));

    let arch = model.clone();
    let latents = normal(vec![2, 12], rng);
    let w = normal(vec![8, 3], rng);
    cases.push(Case {
        name: "prediction_head",
        params: model.params.clone(),
        loss: Box::new(move |g, ps| {
            let cx = Ctx::new(ps);
            let x = g.input(latents.clone());
            let y = arch.predict_patches(g, &cx, x);
            Ok(project(g, y, &w))
        }),
    });

    let arch = model.clone();
    let latents = normal(vec![4, 12], rng);
    cases.push(Case {
        name: "classification_head",
        params: model.params.clone(),
        loss: Box::new(move |g, ps| {
            let cx = Ctx::new(ps);
            let x = g.input(latents.clone());
            let logits = arch.classification_head(g, &cx, x, 2);
            g.cross_entropy(logits, &[0, 2])
        }),
    });

    let arch = model.clone();
    let b = batch.clone();
    let mask = causal.clone();
    cases.push(Case {
        name: "model_generation_loss",
        params: model.params.clone(),
        loss: Box::new(move |g, ps| {
            let mut cx = Ctx::new(ps);
            let out = arch.forward(g, &mut cx, &b, &mask, true, false)?;
            Ok(out.generation.expect("generation loss"))
        }),
    });

    let arch = model.clone();
    cases.push(Case {
        name: "model_finetune_loss",
        params: model.params,
        loss: Box::new(move |g, ps| {
            let mut cx = Ctx::new(ps);
            let out = arch.forward(g, &mut cx, &batch, &causal, true, true)?;
            let ce = g.cross_entropy(out.logits.expect("logits"), &batch.labels)?;
            let lg = g.scale(out.generation.expect("generation loss"), 3.0);
            Ok(g.add(ce, lg))
        }),
    });
    cases
}

/// Names of all checks, in report order.
pub fn suite_names() -> Vec<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v: Vec<_> = primitive_cases(&mut rng).into_iter().map(|c| c.name).collect();
    v.extend(layer_cases(&mut rng).into_iter().map(|c| c.name));
    v.extend(model_cases(&mut rng).into_iter().map(|c| c.name));
    v
}

/// Runs every check. `opts.corrupt` scales one op kind's analytic gradient.
pub fn gradcheck_suite(opts: GradcheckOptions, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(layer_cases(&mut rng));
    cases.extend(model_cases(&mut rng));
    let mut reports = Vec::with_capacity(cases.len());
    for mut case in cases {
        reports.push(gradcheck(case.name, &mut case.params, opts, &case.loss)?);
    }
    Ok(reports)
}

/// Fixed-width table with one row per check.
pub fn format_report(reports: &[GradcheckReport]) -> String {
    let mut s = format!(
        "{:<24} {:>12} {:>10}  {}\n",
        "primitive", "max_rel_err", "tolerance", "status"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<24} {:>12.3e} {:>10.1e}  {}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
