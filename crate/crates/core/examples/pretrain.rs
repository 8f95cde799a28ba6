//! A short pre-training run with a reduced desk model, printing the
//! generation loss per epoch.
//!
//! `cargo run --release --example pretrain -- [epochs]`

use std::time::Instant;

use pointar::data::{generate_pool, AugmentConfig, Pool};
use pointar::model::{Model, ModelConfig};
use pointar::training::{pretrain, Corpus, PretrainConfig};

fn main() -> pointar::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(Ok(8), |a| a.parse())
        .expect("epochs must be a number");
    let cfg = ModelConfig {
        channels: 48,
        extractor_depth: 2,
        generator_depth: 2,
        patches: 32,
        patch_size: 16,
        ..ModelConfig::desk()
    };
    let corpus = Corpus::for_model(generate_pool(Pool::A, 256, 512, 1)?, &cfg)?;
    let pc = PretrainConfig {
        epochs,
        augment: Some(AugmentConfig::default()),
        ..PretrainConfig::desk()
    };
    let t0 = Instant::now();
    let trainer = pretrain(Model::<f32>::new(cfg, 0)?, &corpus, &pc, |t, epoch| {
        let last = &t.metrics.steps[t.metrics.steps.len() - t.steps_per_epoch() as usize..];
        let mean = last.iter().map(|r| r.loss_total).sum::<f64>() / last.len() as f64;
        println!(
            "epoch {epoch:>3}  mean loss {mean:.4}  lr {:.2e}  {:.1}s",
            last[last.len() - 1].lr,
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    println!(
        "{} steps, final loss {:.4}",
        trainer.step,
        trainer.metrics.last_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}
