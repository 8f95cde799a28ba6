//! Pre-train on pool A, then fine-tune on the pool B classes with and
//! without the auxiliary generation loss, against a model trained from scratch.

use pointar::data::{generate_pool, make_splits, DatasetManifest, Pool, Split};
use pointar::model::{Model, ModelConfig};
use pointar::training::{evaluate_corpus, finetune, pretrain, Corpus, FinetuneConfig, PretrainConfig};

fn main() -> pointar::Result<()> {
    let cfg = ModelConfig {
        channels: 48,
        extractor_depth: 2,
        generator_depth: 2,
        patches: 16,
        patch_size: 16,
        ..ModelConfig::desk()
    };
    let pool_b = generate_pool(Pool::B, 200, 256, 2)?;
    let manifest = make_splits(&DatasetManifest::from_records(&pool_b, 2), 2, [0.6, 0.0, 0.4])?;
    let split = |s| Corpus::for_model(manifest.indices(s).iter().map(|&i| pool_b[i].clone()).collect(), &cfg);
    let (train, test) = (split(Split::Train)?, split(Split::Test)?);

    let pool_a = Corpus::for_model(generate_pool(Pool::A, 300, 256, 1)?, &cfg)?;
    let pc = PretrainConfig {
        epochs: 6,
        ..PretrainConfig::desk()
    };
    let pre = pretrain(Model::<f32>::new(cfg, 0)?, &pool_a, &pc, |_, _| Ok(()))?.model;

    let cases = [
        ("pretrained, lambda 3", pre.clone(), 3.0),
        ("pretrained, lambda 0", pre, 0.0),
        ("from scratch", Model::new(cfg, 0)?, 3.0),
    ];
    for (name, model, lambda) in cases {
        let fc = FinetuneConfig {
            epochs: 16,
            lr: 1e-3,
            lambda,
            ..FinetuneConfig::default()
        };
        let t = finetune(model, &train, &fc, |_, _| Ok(()))?;
        println!(
            "{name:<22} test accuracy {:.3}",
            evaluate_corpus(&t.model, &test)?.accuracy
        );
    }
    Ok(())
}
