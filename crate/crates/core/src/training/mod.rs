//! Pre-training, post-pre-training, fine-tuning, evaluation, the few-shot
//! protocol, checkpoints and metrics.
//!
//! All stages share one [`Trainer`]: the epoch order is a pure function of
//! `(seed, epoch)` and every other random draw (dual masks, augmentation,
//! dropout) comes from a single ChaCha stream whose position is saved in the
//! checkpoint, so a resumed run replays an uninterrupted one exactly.

pub mod checkpoint;
pub mod fewshot;
pub mod metrics;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentConfig, CloudRecord};
use crate::error::{invalid_arg, Error, Result};
use crate::model::{Batch, Mode, Model, ModelConfig};
use crate::nncore::{adamw_step, clip_grad_norm, Ctx, Graph, LRSchedule, OptimizerState, Scalar, Tensor};
use crate::sequencer::{prepare_sequence, PreparedSequence, SequencerConfig};

pub use checkpoint::{Checkpoint, CheckpointTensor, TensorData};
pub use fewshot::{few_shot_eval, FewShotConfig, FewShotReport, FewShotSource};
pub use metrics::{EvalRecord, MetricsLog, StepRecord, METRICS_HEADER};

pub const DEFAULT_CLIP_NORM: f64 = 10.0;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretrain,
    PostPretrain,
    Finetune,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::PostPretrain => "post-pretrain",
            Self::Finetune => "finetune",
        })
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "post-pretrain" => Ok(Self::PostPretrain),
            "finetune" => Ok(Self::Finetune),
            other => Err(invalid_arg(format!("unknown stage {other}"))),
        }
    }
}

/// Where fine-tuning weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    FromPretrain,
    FromPostPretrain,
    FromScratch,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from-pretrain" => Ok(Self::FromPretrain),
            "from-post-pretrain" => Ok(Self::FromPostPretrain),
            "from-scratch" => Ok(Self::FromScratch),
            other => Err(invalid_arg(format!("unknown init mode {other}"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FromPretrain => "from-pretrain",
            Self::FromPostPretrain => "from-post-pretrain",
            Self::FromScratch => "from-scratch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub dual_mask_ratio: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub augment: Option<AugmentConfig>,
    /// Epoch interval of the checkpoint hook; 0 disables it.
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    /// 60 epochs of batch 16.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            base_lr: 0.001,
            weight_decay: 0.05,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            dual_mask_ratio: 0.7,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            augment: None,
            checkpoint_every: 0,
        }
    }

    /// 300 epochs of batch 128.
    pub fn full() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            ..Self::desk()
        }
    }

    fn stage(&self) -> StageConfig {
        StageConfig {
            kind: StageKind::Pretrain,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.base_lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            seed: self.seed,
            clip_norm: self.clip_norm,
            lambda: 0.0,
            augment: self.augment,
            frozen: vec!["cls.".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub init: InitMode,
    pub clip_norm: f64,
    pub augment: Option<AugmentConfig>,
    /// Parameter-name prefixes kept fixed; `""` freezes everything.
    pub frozen: Vec<String>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epochs: 30,
            lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 16,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            seed: 0,
            init: InitMode::FromPretrain,
            clip_norm: DEFAULT_CLIP_NORM,
            augment: None,
            frozen: vec![],
        }
    }
}

impl FinetuneConfig {
    fn stage(&self, kind: StageKind) -> StageConfig {
        let lambda = if kind == StageKind::PostPretrain {
            0.0
        } else {
            self.lambda
        };
        let mut frozen = self.frozen.clone();
        if lambda == 0.0 {
            // unused by the loss; keep weight decay from eroding them
            frozen.extend(["generator.".to_string(), "head.".to_string()]);
        }
        StageConfig {
            kind,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            seed: self.seed,
            clip_norm: self.clip_norm,
            lambda,
            augment: self.augment,
            frozen,
        }
    }
}

/// Everything the training loop needs, shared by all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub kind: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub augment: Option<AugmentConfig>,
    pub frozen: Vec<String>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_arg("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(invalid_arg(
                "learning rate and clip norm must be positive, weight decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid_arg("warmup fraction must be in [0, 1)"));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(invalid_arg(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    fn write(&self, ck: &mut Checkpoint) {
        ck.set("stage.kind", self.kind);
        ck.set("stage.epochs", self.epochs);
        ck.set("stage.batch_size", self.batch_size);
        ck.set("stage.lr", self.lr);
        ck.set("stage.weight_decay", self.weight_decay);
        ck.set("stage.warmup_fraction", self.warmup_fraction);
        ck.set("stage.seed", self.seed);
        ck.set("stage.clip_norm", self.clip_norm);
        ck.set("stage.lambda", self.lambda);
        ck.set(
            "stage.augment",
            match self.augment {
                None => "none".to_string(),
                Some(a) => format!(
                    "{},{},{},{},{}",
                    a.scale_min, a.scale_max, a.rotate, a.jitter_sigma, a.jitter_clip
                ),
            },
        );
        ck.set("stage.frozen", self.frozen.join(","));
    }

    fn read(ck: &Checkpoint) -> Result<Self> {
        let augment = match ck.require("stage.augment")? {
            "none" => None,
            raw => {
                let f: Vec<&str> = raw.split(',').collect();
                let bad = || Error::Format(format!("bad augment entry {raw:?}"));
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                Some(AugmentConfig {
                    scale_min: num(f[0])?,
                    scale_max: num(f[1])?,
                    rotate: f[2].parse().map_err(|_| bad())?,
                    jitter_sigma: num(f[3])?,
                    jitter_clip: num(f[4])?,
                })
            }
        };
        let frozen = ck.require("stage.frozen")?;
        Ok(Self {
            kind: ck.parse("stage.kind")?,
            epochs: ck.parse("stage.epochs")?,
            batch_size: ck.parse("stage.batch_size")?,
            lr: ck.parse("stage.lr")?,
            weight_decay: ck.parse("stage.weight_decay")?,
            warmup_fraction: ck.parse("stage.warmup_fraction")?,
            seed: ck.parse("stage.seed")?,
            clip_norm: ck.parse("stage.clip_norm")?,
            lambda: ck.parse("stage.lambda")?,
            augment,
            frozen: if frozen.is_empty() {
                vec![]
            } else {
                frozen.split(',').map(str::to_string).collect()
            },
        })
    }
}

/// Records with their partitioned, sorted and encoded sequences.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<CloudRecord>,
    pub sequences: Vec<PreparedSequence>,
    pub sequencer: SequencerConfig,
}

impl Corpus {
    pub fn new(records: Vec<CloudRecord>, sequencer: SequencerConfig) -> Result<Self> {
        let sequences = records
            .iter()
            .map(|r| prepare_sequence(&r.cloud, &sequencer))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            sequences,
            sequencer,
        })
    }

    pub fn for_model(records: Vec<CloudRecord>, config: &ModelConfig) -> Result<Self> {
        let points = records.first().map_or(0, |r| r.cloud.len());
        Self::new(records, config.sequencer(points))
    }

    /// Subset in the order of `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            sequencer: self.sequencer,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Visit order of epoch `epoch`; depends only on `(seed, epoch, len)`.
pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u32> {
    let seed = rng.get_seed();
    let mut words: Vec<u32> = seed
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let stream = rng.get_stream();
    words.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    words
}

fn rng_from_words(words: &[u32]) -> Result<ChaCha8Rng> {
    if words.len() != 14 {
        return Err(Error::Format(format!(
            "rng state has {} words, expected 14",
            words.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[8] as u64 | (words[9] as u64) << 32);
    let pos = (0..4).fold(0u128, |acc, i| acc | (words[10 + i] as u128) << (32 * i));
    rng.set_word_pos(pos);
    Ok(rng)
}

fn tensor_data<T: Scalar>(values: &[T]) -> TensorData {
    if T::BYTES == 4 {
        TensorData::F32(values.iter().map(|v| v.f64() as f32).collect())
    } else {
        TensorData::F64(values.iter().map(|v| v.f64()).collect())
    }
}

fn to_tensor<T: Scalar>(t: &CheckpointTensor) -> Tensor<T> {
    Tensor::new(t.dims.clone(), t.data.to_f64().into_iter().map(T::c).collect())
}

pub fn write_model_config(ck: &mut Checkpoint, c: &ModelConfig) {
    ck.set("model.channels", c.channels);
    ck.set("model.heads", c.heads);
    ck.set("model.extractor_depth", c.extractor_depth);
    ck.set("model.generator_depth", c.generator_depth);
    ck.set("model.patches", c.patches);
    ck.set("model.patch_size", c.patch_size);
    ck.set("model.dual_mask_ratio", c.dual_mask_ratio);
    ck.set("model.num_classes", c.num_classes);
    ck.set("model.dropout", c.dropout);
}

pub fn read_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    Ok(ModelConfig {
        channels: ck.parse("model.channels")?,
        heads: ck.parse("model.heads")?,
        extractor_depth: ck.parse("model.extractor_depth")?,
        generator_depth: ck.parse("model.generator_depth")?,
        patches: ck.parse("model.patches")?,
        patch_size: ck.parse("model.patch_size")?,
        dual_mask_ratio: ck.parse("model.dual_mask_ratio")?,
        num_classes: ck.parse("model.num_classes")?,
        dropout: ck.parse("model.dropout")?,
    })
}

/// Weights-only checkpoint of `model`.
pub fn model_checkpoint<T: Scalar>(model: &Model<T>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set("dtype", T::NAME);
    write_model_config(&mut ck, &model.config);
    for (_, name, p) in model.params.iter() {
        ck.push(
            format!("param.{name}"),
            p.value.shape().to_vec(),
            tensor_data(p.value.data()),
        );
    }
    ck
}

/// Copies weights from `ck` into `model`, which must share its architecture.
pub fn load_weights<T: Scalar>(model: &mut Model<T>, ck: &Checkpoint) -> Result<()> {
    let stored = read_model_config(ck)?;
    let c = model.config;
    let pairs = [
        ("channels", stored.channels, c.channels),
        ("heads", stored.heads, c.heads),
        ("extractor_depth", stored.extractor_depth, c.extractor_depth),
        ("generator_depth", stored.generator_depth, c.generator_depth),
        ("patches", stored.patches, c.patches),
        ("patch_size", stored.patch_size, c.patch_size),
        ("num_classes", stored.num_classes, c.num_classes),
    ];
    for (key, s, m) in pairs {
        if s != m {
            return Err(Error::ConfigMismatch(format!(
                "{key}: checkpoint has {s}, model has {m}"
            )));
        }
    }
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let t = ck
            .tensor(&format!("param.{name}"))
            .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter {name}")))?;
        let id = model.params.id(&name).expect("own name");
        let p = model.params.get_mut(id);
        if t.dims != p.value.shape() {
            return Err(Error::ConfigMismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.dims,
                p.value.shape()
            )));
        }
        p.value = to_tensor(t);
    }
    Ok(())
}

/// Rebuilds the model stored in `ck` (any dtype is cast to `T`).
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Model<T>> {
    let mut model = Model::new(read_model_config(ck)?, 0)?;
    load_weights(&mut model, ck)?;
    Ok(model)
}

/// The shared optimisation loop.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub stage: StageConfig,
    pub schedule: LRSchedule,
    /// Completed optimizer steps.
    pub step: u64,
    pub metrics: MetricsLog,
    dataset_len: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, stage: StageConfig, dataset_len: usize) -> Result<Self> {
        stage.validate()?;
        if dataset_len == 0 {
            return Err(invalid_arg("dataset is empty"));
        }
        apply_frozen(&mut model, &stage.frozen);
        let optimizer = OptimizerState::new(&model.params, stage.lr, stage.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
        rng.set_stream(0);
        let schedule = schedule_for(&stage, dataset_len);
        Ok(Self {
            model,
            optimizer,
            schedule,
            step: 0,
            metrics: MetricsLog::default(),
            dataset_len,
            rng,
            stage,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset_len.div_ceil(self.stage.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn mode(&self) -> Mode {
        match self.stage.kind {
            StageKind::Pretrain => Mode::Pretrain,
            _ => Mode::Finetune,
        }
    }

    /// Runs at most `n` further steps; returns how many ran.
    pub fn run_steps(&mut self, corpus: &Corpus, n: u64) -> Result<u64> {
        let mut ran = 0;
        while ran < n && !self.is_finished() {
            self.step_once(corpus)?;
            ran += 1;
        }
        Ok(ran)
    }

    /// Trains to the end, calling `on_epoch(trainer, epoch)` after every epoch.
    pub fn run<F>(&mut self, corpus: &Corpus, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&mut Self, usize) -> Result<()>,
    {
        let spe = self.steps_per_epoch();
        while !self.is_finished() {
            self.step_once(corpus)?;
            if self.step.is_multiple_of(spe) {
                on_epoch(self, (self.step / spe) as usize)?;
            }
        }
        Ok(())
    }

    /// Corpus indices of the batch at the current step.
    pub fn current_batch(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let within = (self.step % spe) as usize;
        let order = epoch_permutation(self.stage.seed, epoch, self.dataset_len);
        let b = self.stage.batch_size;
        order[within * b..((within + 1) * b).min(self.dataset_len)].to_vec()
    }

    pub fn step_once(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        if corpus.len() != self.dataset_len {
            return Err(Error::ConfigMismatch(format!(
                "trainer was set up for {} records, corpus has {}",
                self.dataset_len,
                corpus.len()
            )));
        }
        let indices = self.current_batch();
        let batch_id = (self.step % self.steps_per_epoch()) as usize;
        let classify = self.stage.kind != StageKind::Pretrain;
        let with_generation = !classify || self.stage.lambda > 0.0;

        let seqs: Vec<Cow<'_, PreparedSequence>> = match self.stage.augment {
            None => indices.iter().map(|&i| Cow::Borrowed(&corpus.sequences[i])).collect(),
            Some(cfg) => indices
                .iter()
                .map(|&i| {
                    let rec = augment(&corpus.records[i], &mut self.rng, &cfg)?;
                    prepare_sequence(&rec.cloud, &corpus.sequencer).map(Cow::Owned)
                })
                .collect::<Result<_>>()?,
        };
        let labels: Vec<usize> = if classify {
            let labels: Vec<usize> = indices.iter().map(|&i| corpus.records[i].label).collect();
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.model.config.num_classes) {
                return Err(invalid_arg(format!(
                    "label {bad} out of range for a {}-class head",
                    self.model.config.num_classes
                )));
            }
            labels
        } else {
            vec![]
        };
        let refs: Vec<&PreparedSequence> = seqs.iter().map(|s| s.as_ref()).collect();
        let batch = Batch::<T>::new(&refs, labels)?;
        let mask = self.model.mask_for(self.mode(), &mut self.rng)?;

        let mut g = Graph::new();
        let dropout = self.model.config.dropout;
        let (root, parts) = {
            let mut cx = if dropout > 0.0 {
                Ctx::with_dropout(&self.model.params, dropout, &mut self.rng)
            } else {
                Ctx::new(&self.model.params)
            };
            let out = self
                .model
                .forward(&mut g, &mut cx, &batch, &mask, with_generation, classify)?;
            let ce = match out.logits {
                Some(logits) => Some(g.cross_entropy(logits, &batch.labels)?),
                None => None,
            };
            let root = match (ce, out.generation) {
                (Some(ce), Some(lg)) => {
                    let weighted = g.scale(lg, self.stage.lambda);
                    g.add(ce, weighted)
                }
                (Some(ce), None) => ce,
                (None, Some(lg)) => lg,
                (None, None) => unreachable!("stage computes no loss"),
            };
            (root, [out.cd_l1, out.cd_l2, ce])
        };
        let scalar = |v: Option<crate::nncore::Var>| v.map(|v| g.value(v).data()[0].f64());
        let loss = g.value(root).data()[0].f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                batch: batch_id,
                detail: format!("loss {loss} on records {indices:?}"),
            });
        }
        g.backward_into(root, &mut self.model.params)?;
        let norm = clip_grad_norm(&mut self.model.params, self.stage.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                batch: batch_id,
                detail: format!("gradient norm {norm} on records {indices:?}"),
            });
        }
        let lr = self.schedule.lr(self.step + 1);
        self.optimizer.lr = lr;
        adamw_step(&mut self.model.params, &mut self.optimizer)?;
        let record = StepRecord {
            step: self.step,
            lr,
            loss_total: loss,
            loss_cd1: scalar(parts[0]),
            loss_cd2: scalar(parts[1]),
            loss_ce: scalar(parts[2]),
        };
        self.metrics.push(record);
        self.step += 1;
        Ok(record)
    }

    /// Full training state: config, weights, optimizer moments and rng position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model);
        self.stage.write(&mut ck);
        ck.set("train.step", self.step);
        ck.set("train.dataset_len", self.dataset_len);
        ck.set("optim.step", self.optimizer.step);
        ck.set("optim.beta1", self.optimizer.beta1);
        ck.set("optim.beta2", self.optimizer.beta2);
        ck.set("optim.eps", self.optimizer.eps);
        for (i, (_, name, p)) in self.model.params.iter().enumerate() {
            let dims = p.value.shape().to_vec();
            ck.push(
                format!("optim.m.{name}"),
                dims.clone(),
                tensor_data(self.optimizer.first_moment[i].data()),
            );
            ck.push(
                format!("optim.v.{name}"),
                dims,
                tensor_data(self.optimizer.second_moment[i].data()),
            );
        }
        let words = rng_words(&self.rng);
        ck.push("rng.state", vec![words.len()], TensorData::Words(words));
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, dataset_len: usize) -> Result<Self> {
        if ck.dtype()? != T::NAME {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} values, trainer uses {}",
                ck.dtype()?,
                T::NAME
            )));
        }
        let saved_len: usize = ck.parse("train.dataset_len")?;
        if saved_len != dataset_len {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained on {saved_len} records, got {dataset_len}"
            )));
        }
        let model = model_from_checkpoint::<T>(ck)?;
        let stage = StageConfig::read(ck)?;
        let mut t = Self::new(model, stage, dataset_len)?;
        t.step = ck.parse("train.step")?;
        t.optimizer.step = ck.parse("optim.step")?;
        t.optimizer.beta1 = ck.parse("optim.beta1")?;
        t.optimizer.beta2 = ck.parse("optim.beta2")?;
        t.optimizer.eps = ck.parse("optim.eps")?;
        let names: Vec<String> = t.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [
                ("optim.m.", &mut t.optimizer.first_moment[i]),
                ("optim.v.", &mut t.optimizer.second_moment[i]),
            ] {
                let tensor = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))?;
                if tensor.dims != slot.shape() {
                    return Err(Error::ConfigMismatch(format!("{prefix}{name} has the wrong shape")));
                }
                *slot = to_tensor(tensor);
            }
        }
        match &ck
            .tensor("rng.state")
            .ok_or_else(|| Error::Format("checkpoint lacks rng.state".into()))?
            .data
        {
            TensorData::Words(w) => t.rng = rng_from_words(w)?,
            _ => return Err(Error::Format("rng.state must hold words".into())),
        }
        Ok(t)
    }
}

fn schedule_for(stage: &StageConfig, dataset_len: usize) -> LRSchedule {
    let total = (stage.epochs * dataset_len.div_ceil(stage.batch_size)) as u64;
    LRSchedule {
        base_lr: stage.lr,
        warmup_steps: (stage.warmup_fraction * total as f64).round() as u64,
        total_steps: total,
    }
}

fn apply_frozen<T: Scalar>(model: &mut Model<T>, prefixes: &[String]) {
    model.params.set_all_frozen(false);
    for p in prefixes {
        model.params.set_frozen_prefix(p, true);
    }
}

/// Self-supervised next-patch pre-training with dual masking.
pub fn pretrain<T: Scalar>(
    mut model: Model<T>,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    on_epoch: impl FnMut(&mut Trainer<T>, usize) -> Result<()>,
) -> Result<Trainer<T>> {
    if !(0.0..1.0).contains(&cfg.dual_mask_ratio) {
        return Err(invalid_arg("dual mask ratio must be in [0, 1)"));
    }
    model.config.dual_mask_ratio = cfg.dual_mask_ratio;
    let mut t = Trainer::new(model, cfg.stage(), corpus.len())?;
    t.run(corpus, on_epoch)?;
    Ok(t)
}

fn check_classes<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<()> {
    if let Some(max) = corpus.records.iter().map(|r| r.label).max() {
        if max >= model.config.num_classes {
            return Err(invalid_arg(format!(
                "dataset has label {max} but the classifier has {} classes",
                model.config.num_classes
            )));
        }
    }
    Ok(())
}

/// Supervised classification on the labelled intermediate corpus.
pub fn post_pretrain<T: Scalar>(
    model: Model<T>,
    corpus: &Corpus,
    cfg: &FinetuneConfig,
    on_epoch: impl FnMut(&mut Trainer<T>, usize) -> Result<()>,
) -> Result<Trainer<T>> {
    check_classes(&model, corpus)?;
    let mut t = Trainer::new(model, cfg.stage(StageKind::PostPretrain), corpus.len())?;
    t.run(corpus, on_epoch)?;
    Ok(t)
}

/// Classification fine-tuning with the auxiliary generation loss weighted by `lambda`.
pub fn finetune<T: Scalar>(
    model: Model<T>,
    corpus: &Corpus,
    cfg: &FinetuneConfig,
    on_epoch: impl FnMut(&mut Trainer<T>, usize) -> Result<()>,
) -> Result<Trainer<T>> {
    check_classes(&model, corpus)?;
    let mut t = Trainer::new(model, cfg.stage(StageKind::Finetune), corpus.len())?;
    t.run(corpus, on_epoch)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub count: usize,
    pub predictions: Vec<usize>,
}

/// Arg-max accuracy with the causal-only extractor.
pub fn evaluate<T: Scalar>(model: &Model<T>, sequences: &[&PreparedSequence], labels: &[usize]) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(invalid_arg("cannot evaluate an empty split"));
    }
    if sequences.len() != labels.len() {
        return Err(invalid_arg("one label per sequence required"));
    }
    let classes = model.config.num_classes;
    let logits = model.logits(sequences)?;
    let predictions: Vec<usize> = (0..sequences.len()).map(|r| argmax(logits.row(r))).collect();
    let mut hit = vec![0usize; classes.max(labels.iter().max().map_or(0, |m| m + 1))];
    let mut seen = vec![0usize; hit.len()];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        count: labels.len(),
        predictions,
    })
}

pub fn evaluate_corpus<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<EvalReport> {
    let refs: Vec<&PreparedSequence> = corpus.sequences.iter().collect();
    evaluate(model, &refs, &corpus.labels())
}

/// First index of the largest value.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, Pool};

    fn tiny_corpus(count: usize) -> (ModelConfig, Corpus) {
        let cfg = ModelConfig::tiny();
        let recs = generate_pool(Pool::A, count, 32, 1).unwrap();
        (cfg, Corpus::for_model(recs, &cfg).unwrap())
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch() {
        let a = epoch_permutation(3, 0, 20);
        assert_eq!(a, epoch_permutation(3, 0, 20));
        assert_ne!(a, epoch_permutation(3, 1, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn rng_words_round_trip() {
        use rand::RngCore;
        let mut r = ChaCha8Rng::seed_from_u64(99);
        r.set_stream(5);
        for _ in 0..37 {
            r.next_u32();
        }
        let mut back = rng_from_words(&rng_words(&r)).unwrap();
        for _ in 0..10 {
            assert_eq!(r.next_u64(), back.next_u64());
        }
    }

    #[test]
    fn zero_epochs_leave_initialisation() {
        let (cfg, corpus) = tiny_corpus(5);
        let model = Model::<f64>::new(cfg, 2).unwrap();
        let init = model_checkpoint(&model);
        let pc = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::desk()
        };
        let t = pretrain(model, &corpus, &pc, |_, _| Ok(())).unwrap();
        assert_eq!(t.step, 0);
        assert_eq!(model_checkpoint(&t.model).tensors, init.tensors);
    }

    #[test]
    fn lr_trace_matches_schedule() {
        let (cfg, corpus) = tiny_corpus(6);
        let pc = PretrainConfig {
            epochs: 3,
            batch_size: 4,
            ..PretrainConfig::desk()
        };
        let t = pretrain(Model::<f64>::new(cfg, 0).unwrap(), &corpus, &pc, |_, _| Ok(())).unwrap();
        assert_eq!(t.metrics.steps.len(), 6);
        for r in &t.metrics.steps {
            assert_eq!(r.lr, crate::nncore::cosine_lr(r.step + 1, &t.schedule));
            assert!(r.loss_ce.is_none() && r.loss_cd1.is_some());
        }
    }

    #[test]
    fn frozen_everything_changes_nothing() {
        let (cfg, corpus) = tiny_corpus(5);
        let model = Model::<f64>::new(cfg, 2).unwrap();
        let before = model_checkpoint(&model);
        let fc = FinetuneConfig {
            epochs: 2,
            batch_size: 5,
            frozen: vec![String::new()],
            ..FinetuneConfig::default()
        };
        let t = finetune(model, &corpus, &fc, |_, _| Ok(())).unwrap();
        assert_eq!(t.step, 2);
        assert_eq!(model_checkpoint(&t.model).tensors, before.tensors);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let (mut cfg, _) = tiny_corpus(1);
        cfg.num_classes = 2;
        let recs = generate_pool(Pool::B, 5, 32, 1).unwrap();
        let corpus = Corpus::for_model(recs, &cfg).unwrap();
        let err = post_pretrain(
            Model::<f64>::new(cfg, 0).unwrap(),
            &corpus,
            &FinetuneConfig::default(),
            |_, _| Ok(()),
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mismatched_width_is_a_config_error() {
        let (cfg, _) = tiny_corpus(1);
        let ck = model_checkpoint(&Model::<f64>::new(cfg, 0).unwrap());
        let wider = ModelConfig { channels: 18, ..cfg };
        let mut other = Model::<f64>::new(wider, 0).unwrap();
        assert!(matches!(load_weights(&mut other, &ck), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn evaluation_is_repeatable_and_rejects_empty() {
        let (cfg, corpus) = tiny_corpus(7);
        let model = Model::<f64>::new(cfg, 0).unwrap();
        let a = evaluate_corpus(&model, &corpus).unwrap();
        assert_eq!(a, evaluate_corpus(&model, &corpus).unwrap());
        assert!(evaluate(&model, &[], &[]).is_err());
    }
}
