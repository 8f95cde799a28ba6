use std::sync::Arc;

use pointar::data::{generate_pool, Pool};
use pointar::model::{build_dual_mask, Batch, Model, ModelConfig};
use pointar::nncore::{AttentionMask, Ctx, Graph, Tensor};
use pointar::sequencer::prepare_sequence;
use pointar::training::{evaluate_corpus, post_pretrain, pretrain, Corpus, FinetuneConfig, PretrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        channels: 18,
        heads: 2,
        extractor_depth: 2,
        generator_depth: 1,
        patches: 6,
        patch_size: 8,
        ..ModelConfig::tiny()
    }
}

fn latents(model: &Model<f64>, batch: &Batch<f64>, mask: &Arc<AttentionMask>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&model.params);
    let out = model.forward(&mut g, &mut cx, batch, mask, false, false).unwrap();
    g.value(out.latents).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // holds for the dual mask too: it only ever removes allowed positions
    #[test]
    fn later_patches_never_reach_earlier_latents(
        model_seed in 0u64..1000,
        cloud_seed in 0u64..1000,
        j in 1usize..6,
        dual in any::<bool>(),
        shift in -0.5f64..0.5,
    ) {
        let cfg = small();
        let model = Model::<f64>::new(cfg, model_seed).unwrap();
        let rec = &generate_pool(Pool::A, 1, 96, cloud_seed).unwrap()[0];
        let seq = prepare_sequence(&rec.cloud, &cfg.sequencer(96)).unwrap();
        let batch = Batch::<f64>::new(&[&seq], vec![]).unwrap();
        let mask = Arc::new(if dual {
            build_dual_mask(cfg.patches, 0.7, &mut ChaCha8Rng::seed_from_u64(model_seed)).unwrap().mask
        } else {
            AttentionMask::causal(cfg.patches)
        });
        let before = latents(&model, &batch, &mask);
        let mut moved = batch.clone();
        let k = cfg.patch_size;
        for v in &mut moved.points.data_mut()[j * k * 3..(j + 1) * k * 3] {
            *v += shift;
        }
        let after = latents(&model, &moved, &mask);
        for r in 0..j {
            prop_assert_eq!(before.row(r), after.row(r));
        }
    }
}

#[test]
fn sequences_in_a_batch_do_not_interact() {
    let cfg = small();
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let recs = generate_pool(Pool::A, 2, 96, 3).unwrap();
    let seqs: Vec<_> = recs
        .iter()
        .map(|r| prepare_sequence(&r.cloud, &cfg.sequencer(96)).unwrap())
        .collect();
    let mask = Arc::new(AttentionMask::causal(cfg.patches));
    let pair = latents(&model, &Batch::new(&[&seqs[0], &seqs[1]], vec![]).unwrap(), &mask);
    let alone = latents(&model, &Batch::new(&[&seqs[1]], vec![]).unwrap(), &mask);
    let n = cfg.patches;
    for r in 0..n {
        let (a, b) = (pair.row(n + r), alone.row(r));
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "row {r}: {diff}");
    }
}

#[test]
fn pretraining_lowers_the_generation_loss() {
    let cfg = small();
    let corpus = Corpus::for_model(generate_pool(Pool::A, 16, 96, 0).unwrap(), &cfg).unwrap();
    let pc = PretrainConfig {
        epochs: 100,
        batch_size: 8,
        base_lr: 3e-3,
        ..PretrainConfig::desk()
    };
    let t = pretrain(Model::<f32>::new(cfg, 0).unwrap(), &corpus, &pc, |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = t.metrics.steps.iter().map(|r| r.loss_total).collect();
    let head = losses[..6].iter().sum::<f64>() / 6.0;
    let tail = losses[losses.len() - 6..].iter().sum::<f64>() / 6.0;
    // the near-zero head starts at "every point on its center", close to the
    // floor for 8-point patches, so the headroom is small
    assert!(tail < 0.9 * head, "loss went from {head} to {tail}");
}

#[test]
fn supervised_training_fits_its_own_data() {
    let cfg = ModelConfig {
        channels: 24,
        ..small()
    };
    let corpus = Corpus::for_model(generate_pool(Pool::B, 20, 96, 2).unwrap(), &cfg).unwrap();
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let before = evaluate_corpus(&model, &corpus).unwrap().accuracy;
    let fc = FinetuneConfig {
        epochs: 60,
        batch_size: 10,
        lr: 3e-3,
        weight_decay: 0.0,
        ..FinetuneConfig::default()
    };
    let t = post_pretrain(model, &corpus, &fc, |_, _| Ok(())).unwrap();
    let after = evaluate_corpus(&t.model, &corpus).unwrap().accuracy;
    assert!(after > before, "{before} -> {after}");
    assert_eq!(after, 1.0, "training accuracy {after}");
}
