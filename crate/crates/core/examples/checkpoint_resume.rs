//! Stops training halfway, goes through a checkpoint on disk, and shows that
//! the resumed run ends byte-identical to an uninterrupted one.

use pointar::data::{generate_pool, Pool};
use pointar::model::{Model, ModelConfig};
use pointar::training::{pretrain, Checkpoint, Corpus, PretrainConfig, Trainer};

fn main() -> pointar::Result<()> {
    let cfg = ModelConfig::tiny();
    let corpus = Corpus::for_model(generate_pool(Pool::A, 16, 128, 0)?, &cfg)?;
    let pc = PretrainConfig {
        epochs: 4,
        batch_size: 4,
        ..PretrainConfig::desk()
    };
    let path = std::env::temp_dir().join("pointar-example-epoch2.ckpt");

    let full = pretrain(Model::<f64>::new(cfg, 0)?, &corpus, &pc, |t, epoch| {
        if epoch == 2 {
            t.checkpoint().save(&path)?;
        }
        Ok(())
    })?;
    let mut resumed = Trainer::<f64>::from_checkpoint(&Checkpoint::load(&path)?, corpus.len())?;
    println!("resuming at step {} of {}", resumed.step, resumed.total_steps());
    resumed.run(&corpus, |_, _| Ok(()))?;

    let same = resumed.checkpoint().encode()? == full.checkpoint().encode()?;
    println!("final checkpoints byte-identical: {same}");
    Ok(())
}
