//! N-way K-shot evaluation with a linear head on frozen features.

use pointar::data::{generate_pool, Pool};
use pointar::model::{Model, ModelConfig};
use pointar::training::{few_shot_eval, Corpus, FewShotConfig};

fn main() -> pointar::Result<()> {
    let cfg = ModelConfig {
        patches: 16,
        patch_size: 16,
        ..ModelConfig::tiny()
    };
    let corpus = Corpus::for_model(generate_pool(Pool::B, 250, 256, 3)?, &cfg)?;
    let model = Model::<f32>::new(cfg, 0)?;
    for (ways, shots) in [(5, 10), (5, 20), (3, 10)] {
        let fs = FewShotConfig {
            ways,
            shots,
            trials: 5,
            ..FewShotConfig::default()
        };
        let report = few_shot_eval(&model, &corpus, &fs)?;
        println!("{ways}-way {shots}-shot, random extractor: {report}");
    }
    Ok(())
}
