//! `w`-way `s`-shot evaluation over independent trials.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, finetune, Corpus, FinetuneConfig};
use crate::data::{record_rng, CloudRecord};
use crate::error::{invalid_arg, Result};
use crate::geometry::PointCloud;
use crate::model::{ClassificationHead, Model};
use crate::nncore::{adamw_step, Ctx, Graph, LRSchedule, OptimizerState, ParameterSet, Scalar, Tensor};
use crate::sequencer::PreparedSequence;

pub const DEFAULT_QUERIES: usize = 20;
pub const DEFAULT_TRIALS: usize = 10;

/// Labelled records seen by the protocol.
///
/// Episodes are drawn from [`FewShotSource::class_members`]; individual
/// labels are read through [`FewShotSource::label`] only for support
/// records during adaptation and for queries after
/// [`FewShotSource::begin_scoring`] has been called with them.
pub trait FewShotSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sequence(&self, index: usize) -> &PreparedSequence;
    fn cloud(&self, index: usize) -> &PointCloud;
    /// Record indices grouped by class id.
    fn class_members(&self) -> Vec<Vec<usize>>;
    fn label(&self, index: usize) -> usize;
    /// Query predictions of a trial are final.
    fn begin_scoring(&self, _queries: &[usize]) {}
}

impl FewShotSource for Corpus {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn sequence(&self, index: usize) -> &PreparedSequence {
        &self.sequences[index]
    }

    fn cloud(&self, index: usize) -> &PointCloud {
        &self.records[index].cloud
    }

    fn class_members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if out.len() <= r.label {
                out.resize(r.label + 1, Vec::new());
            }
            out[r.label].push(i);
        }
        out
    }

    fn label(&self, index: usize) -> usize {
        self.records[index].label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub trials: usize,
    pub seed: u64,
    /// Full-batch AdamW steps for the head.
    pub head_steps: usize,
    pub head_lr: f64,
    pub head_weight_decay: f64,
    /// Fine-tune the whole model on the support set instead of the head only.
    pub full_finetune: Option<FinetuneConfig>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 10,
            queries: DEFAULT_QUERIES,
            trials: DEFAULT_TRIALS,
            seed: 0,
            head_steps: 200,
            head_lr: 1e-3,
            head_weight_decay: 0.05,
            full_finetune: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub std: f64,
}

impl std::fmt::Display for FewShotReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Classes, support and query indices of one trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    /// `support[w]` are the shots of `classes[w]`.
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<Vec<usize>>,
}

pub fn sample_episode(members: &[Vec<usize>], cfg: &FewShotConfig, trial: usize) -> Result<Episode> {
    let need = cfg.shots + cfg.queries;
    let mut eligible: Vec<usize> = (0..members.len()).filter(|&c| members[c].len() >= need).collect();
    if cfg.ways == 0 || cfg.shots == 0 || cfg.queries == 0 {
        return Err(invalid_arg("ways, shots and queries must be positive"));
    }
    if eligible.len() < cfg.ways {
        return Err(invalid_arg(format!(
            "{}-way {}-shot needs {} classes with {need} records each, found {}",
            cfg.ways,
            cfg.shots,
            cfg.ways,
            eligible.len()
        )));
    }
    let mut rng = record_rng(cfg.seed, trial as u64);
    eligible.shuffle(&mut rng);
    eligible.truncate(cfg.ways);
    let mut support = Vec::new();
    let mut queries = Vec::new();
    for &c in &eligible {
        let mut pool = members[c].clone();
        pool.shuffle(&mut rng);
        support.push(pool[..cfg.shots].to_vec());
        queries.push(pool[cfg.shots..need].to_vec());
    }
    Ok(Episode {
        classes: eligible,
        support,
        queries,
    })
}

pub fn few_shot_eval<T: Scalar, S: FewShotSource + ?Sized>(
    model: &Model<T>,
    source: &S,
    cfg: &FewShotConfig,
) -> Result<FewShotReport> {
    if cfg.trials == 0 {
        return Err(invalid_arg("need at least one trial"));
    }
    let members = source.class_members();
    let episodes = (0..cfg.trials)
        .map(|t| sample_episode(&members, cfg, t))
        .collect::<Result<Vec<_>>>()?;

    let mut accuracies = Vec::with_capacity(cfg.trials);
    if let Some(ft) = &cfg.full_finetune {
        for (t, ep) in episodes.iter().enumerate() {
            accuracies.push(full_finetune_trial(model, source, ep, ft, cfg.seed, t)?);
        }
    } else {
        // features never depend on labels, so compute them once for every record used
        let mut needed: Vec<usize> = episodes
            .iter()
            .flat_map(|e| e.support.iter().chain(&e.queries).flatten().copied())
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let seqs: Vec<&PreparedSequence> = needed.iter().map(|&i| source.sequence(i)).collect();
        let feats = model.pooled_features(&seqs)?.cast::<f64>();
        let row_of: BTreeMap<usize, usize> = needed.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let gather = |idx: &[usize]| -> Tensor<f64> {
            let width = feats.dims2().1;
            let mut data = Vec::with_capacity(idx.len() * width);
            for i in idx {
                data.extend_from_slice(feats.row(row_of[i]));
            }
            Tensor::new(vec![idx.len(), width], data)
        };
        for (t, ep) in episodes.iter().enumerate() {
            let support: Vec<usize> = ep.support.iter().flatten().copied().collect();
            let targets = support
                .iter()
                .map(|&i| way_of(&ep.classes, source.label(i)))
                .collect::<Result<Vec<_>>>()?;
            let head = train_head(
                &gather(&support),
                &targets,
                model.config.channels,
                ep.classes.len(),
                cfg,
                t,
            )?;
            let queries: Vec<usize> = ep.queries.iter().flatten().copied().collect();
            let predicted = head.predict(&gather(&queries));
            accuracies.push(score(source, ep, &queries, &predicted)?);
        }
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(FewShotReport { accuracies, mean, std })
}

fn way_of(classes: &[usize], label: usize) -> Result<usize> {
    classes
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| invalid_arg(format!("support record with label {label} outside the episode")))
}

fn score<S: FewShotSource + ?Sized>(source: &S, ep: &Episode, queries: &[usize], predicted: &[usize]) -> Result<f64> {
    source.begin_scoring(queries);
    let mut correct = 0;
    for (&q, &p) in queries.iter().zip(predicted) {
        if ep.classes[p] == source.label(q) {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

struct TrainedHead {
    params: ParameterSet<f64>,
    head: ClassificationHead,
}

impl TrainedHead {
    fn predict(&self, x: &Tensor<f64>) -> Vec<usize> {
        let mut g = Graph::new();
        let cx = Ctx::new(&self.params);
        let input = g.input(x.clone());
        let logits = self.head.forward(&mut g, &cx, input);
        let l = g.value(logits);
        (0..l.dims2().0).map(|r| argmax(l.row(r))).collect()
    }
}

fn train_head(
    x: &Tensor<f64>,
    targets: &[usize],
    channels: usize,
    ways: usize,
    cfg: &FewShotConfig,
    trial: usize,
) -> Result<TrainedHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000);
    rng.set_stream(trial as u64);
    let mut params = ParameterSet::new();
    let head = ClassificationHead::new(&mut params, channels, ways, &mut rng)?;
    let mut opt = OptimizerState::new(&params, cfg.head_lr, cfg.head_weight_decay);
    let schedule = LRSchedule {
        base_lr: cfg.head_lr,
        warmup_steps: 0,
        total_steps: cfg.head_steps as u64,
    };
    for step in 0..cfg.head_steps {
        let mut g = Graph::new();
        let root = {
            let cx = Ctx::new(&params);
            let input = g.input(x.clone());
            let logits = head.forward(&mut g, &cx, input);
            g.cross_entropy(logits, targets)?
        };
        g.backward_into(root, &mut params)?;
        opt.lr = schedule.lr(step as u64);
        adamw_step(&mut params, &mut opt)?;
    }
    Ok(TrainedHead { params, head })
}

fn full_finetune_trial<T: Scalar, S: FewShotSource + ?Sized>(
    model: &Model<T>,
    source: &S,
    ep: &Episode,
    ft: &FinetuneConfig,
    seed: u64,
    trial: usize,
) -> Result<f64> {
    let mut m = model.clone();
    m.reset_classifier(ep.classes.len(), seed.wrapping_add(trial as u64))?;
    let support: Vec<usize> = ep.support.iter().flatten().copied().collect();
    let mut records = Vec::with_capacity(support.len());
    let mut sequences = Vec::with_capacity(support.len());
    for &i in &support {
        records.push(CloudRecord {
            cloud: source.cloud(i).clone(),
            label: way_of(&ep.classes, source.label(i))?,
            provenance: None,
        });
        sequences.push(source.sequence(i).clone());
    }
    let sequencer = crate::sequencer::SequencerConfig {
        points: records[0].cloud.len(),
        ..m.config.sequencer(0)
    };
    let corpus = Corpus {
        records,
        sequences,
        sequencer,
    };
    let trained = finetune(m, &corpus, ft, |_, _| Ok(()))?.model;
    let queries: Vec<usize> = ep.queries.iter().flatten().copied().collect();
    let seqs: Vec<&PreparedSequence> = queries.iter().map(|&i| source.sequence(i)).collect();
    let logits = trained.logits(&seqs)?;
    let predicted: Vec<usize> = (0..queries.len()).map(|r| argmax(logits.row(r))).collect();
    score(source, ep, &queries, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, Pool};
    use crate::model::ModelConfig;
    use std::cell::RefCell;

    #[derive(Debug, Clone, PartialEq)]
    enum Event {
        Label(usize),
        Scoring(Vec<usize>),
    }

    struct Tracking {
        inner: Corpus,
        log: RefCell<Vec<Event>>,
    }

    impl FewShotSource for Tracking {
        fn len(&self) -> usize {
            self.inner.len()
        }
        fn sequence(&self, i: usize) -> &PreparedSequence {
            self.inner.sequence(i)
        }
        fn cloud(&self, i: usize) -> &PointCloud {
            self.inner.cloud(i)
        }
        fn class_members(&self) -> Vec<Vec<usize>> {
            self.inner.class_members()
        }
        fn label(&self, i: usize) -> usize {
            self.log.borrow_mut().push(Event::Label(i));
            self.inner.label(i)
        }
        fn begin_scoring(&self, queries: &[usize]) {
            self.log.borrow_mut().push(Event::Scoring(queries.to_vec()));
        }
    }

    fn setup(per_class: usize) -> (Model<f64>, Tracking) {
        let cfg = ModelConfig::tiny();
        let recs = generate_pool(Pool::A, per_class * 5, 32, 4).unwrap();
        let inner = Corpus::for_model(recs, &cfg).unwrap();
        let t = Tracking {
            inner,
            log: RefCell::new(vec![]),
        };
        (Model::new(cfg, 0).unwrap(), t)
    }

    fn cfg(ways: usize, shots: usize) -> FewShotConfig {
        FewShotConfig {
            ways,
            shots,
            queries: 3,
            trials: 3,
            head_steps: 20,
            ..FewShotConfig::default()
        }
    }

    #[test]
    fn query_labels_only_read_while_scoring() {
        let (m, src) = setup(6);
        let c = cfg(3, 2);
        few_shot_eval(&m, &src, &c).unwrap();
        let members = src.class_members();
        let mut expected = Vec::new();
        for t in 0..c.trials {
            let ep = sample_episode(&members, &c, t).unwrap();
            let queries: Vec<usize> = ep.queries.into_iter().flatten().collect();
            expected.extend(ep.support.into_iter().flatten().map(Event::Label));
            expected.push(Event::Scoring(queries.clone()));
            expected.extend(queries.into_iter().map(Event::Label));
        }
        assert_eq!(*src.log.borrow(), expected);
    }

    #[test]
    fn single_way_is_perfect_and_runs_are_repeatable() {
        let (m, src) = setup(5);
        let r = few_shot_eval(&m, &src, &cfg(1, 2)).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        let c = cfg(3, 2);
        assert_eq!(
            few_shot_eval(&m, &src, &c).unwrap(),
            few_shot_eval(&m, &src, &c).unwrap()
        );
    }

    #[test]
    fn insufficient_records_are_rejected() {
        let (m, src) = setup(4);
        assert!(few_shot_eval(&m, &src, &cfg(3, 2)).is_err());
    }

    #[test]
    fn full_finetune_flag_runs() {
        let (m, src) = setup(5);
        let c = FewShotConfig {
            trials: 1,
            full_finetune: Some(FinetuneConfig {
                epochs: 1,
                batch_size: 4,
                ..FinetuneConfig::default()
            }),
            ..cfg(2, 2)
        };
        let r = few_shot_eval(&m, &src, &c).unwrap();
        assert!((0.0..=1.0).contains(&r.mean));
    }
}
