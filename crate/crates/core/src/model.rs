//! Extractor-generator transformer decoder with dual masking, the patch
//! prediction head and the downstream classification head.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, shape_err, Result};
use crate::loss::generation_loss_graph;
use crate::nncore::{AttentionMask, Ctx, Graph, Init, Linear, ParameterSet, Scalar, Tensor, TransformerBlock, Var};
use crate::sequencer::{PatchEmbedder, PreparedSequence, SequencerConfig};

pub const DEFAULT_GENERATOR_DEPTH: usize = 4;
pub const DEFAULT_DUAL_MASK_RATIO: f64 = 0.7;
const INFERENCE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dual mask in the extractor.
    Pretrain,
    /// Causal mask only; generator kept for the auxiliary loss.
    Finetune,
    /// Causal mask only; generator unused.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub extractor_depth: usize,
    pub generator_depth: usize,
    pub patches: usize,
    pub patch_size: usize,
    pub dual_mask_ratio: f64,
    pub num_classes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small CPU preset: D = 96, 4 heads, 4 extractor and 4 generator blocks.
    pub fn desk() -> Self {
        Self {
            channels: 96,
            heads: 4,
            extractor_depth: 4,
            generator_depth: DEFAULT_GENERATOR_DEPTH,
            patches: 64,
            patch_size: 32,
            dual_mask_ratio: DEFAULT_DUAL_MASK_RATIO,
            num_classes: 5,
            dropout: 0.0,
        }
    }

    /// ViT-S sized extractor: D = 384, 6 heads, 12 blocks.
    pub fn full() -> Self {
        Self {
            channels: 384,
            heads: 6,
            extractor_depth: 12,
            ..Self::desk()
        }
    }

    /// Very small model for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            channels: 12,
            heads: 2,
            extractor_depth: 1,
            generator_depth: 1,
            patches: 4,
            patch_size: 4,
            dual_mask_ratio: DEFAULT_DUAL_MASK_RATIO,
            num_classes: 5,
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(invalid_arg(format!("unknown preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dual_mask_ratio) {
            return Err(invalid_arg(format!(
                "dual mask ratio {} must be in [0, 1)",
                self.dual_mask_ratio
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(6) {
            return Err(invalid_arg("channels must be a positive multiple of 6"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(invalid_arg("heads must divide channels"));
        }
        if self.patches < 2 || self.patch_size == 0 || self.num_classes == 0 {
            return Err(invalid_arg("need n >= 2, k >= 1 and at least one class"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid_arg("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn sequencer(&self, points: usize) -> SequencerConfig {
        SequencerConfig {
            points,
            patches: self.patches,
            patch_size: self.patch_size,
            channels: self.channels,
            fps_seed: 0,
        }
    }
}

/// Causal attention mask with extra random removal of preceding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMask {
    pub mask: AttentionMask,
    pub ratio: f64,
}

/// Number of preceding positions removed from row `i`.
pub fn masked_count(ratio: f64, i: usize) -> usize {
    // the nudge keeps decimal ratios exact, e.g. 0.7 * 90 -> 63
    (ratio * i as f64 + 1e-9).floor() as usize
}

/// Lower-triangular mask where row `i >= 1` loses `floor(ratio * i)` of its
/// `i` preceding positions, drawn uniformly without replacement.
pub fn build_dual_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<DualMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid_arg(format!("dual mask ratio {ratio} must be in [0, 1)")));
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allowed[i * n + j] = true;
        }
        let drop = masked_count(ratio, i);
        if i >= 1 && drop > 0 {
            for j in sample(rng, i, drop).into_iter() {
                allowed[i * n + j] = false;
            }
        }
    }
    Ok(DualMask {
        mask: AttentionMask::new(n, allowed)?,
        ratio,
    })
}

/// A batch of prepared sequences laid out as stacked matrices.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub size: usize,
    pub patches: usize,
    pub patch_size: usize,
    /// `(B * n * k) x 3` center-relative patch points.
    pub points: Tensor<T>,
    /// `(B * n) x D`.
    pub ape: Tensor<T>,
    /// `(B * (n - 1)) x D`.
    pub rdp: Tensor<T>,
    /// `(B * (n - 1) * k) x 3` prediction targets.
    pub targets: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(seqs: &[&PreparedSequence], labels: Vec<usize>) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| invalid_arg("empty batch"))?;
        let n = first.len();
        let k = first.patches.k;
        let d = first.ape.dims2().1;
        let mut points = Vec::with_capacity(seqs.len() * n * k * 3);
        let mut targets = Vec::with_capacity(seqs.len() * (n - 1) * k * 3);
        let mut ape = Vec::with_capacity(seqs.len() * n * d);
        let mut rdp = Vec::with_capacity(seqs.len() * (n - 1) * d);
        for s in seqs {
            if s.len() != n || s.patches.k != k || s.ape.dims2().1 != d {
                return Err(shape_err("sequences in a batch must share n, k and D"));
            }
            points.extend(s.patches.points.iter().flat_map(|p| p.iter().map(|&c| T::c(c))));
            targets.extend(s.targets().iter().flat_map(|p| p.iter().map(|&c| T::c(c))));
            ape.extend(s.ape.data().iter().map(|&c| T::c(c)));
            rdp.extend(s.rdp.data().iter().map(|&c| T::c(c)));
        }
        let b = seqs.len();
        if !labels.is_empty() && labels.len() != b {
            return Err(shape_err("label count differs from batch size"));
        }
        Ok(Self {
            size: b,
            patches: n,
            patch_size: k,
            points: Tensor::new(vec![b * n * k, 3], points),
            ape: Tensor::new(vec![b * n, d], ape),
            rdp: Tensor::new(vec![b * (n - 1), d], rdp),
            targets: Tensor::new(vec![b * (n - 1) * k, 3], targets),
            labels,
        })
    }
}

/// ReLU MLP `D -> 4D -> 3k` producing center-relative patch coordinates.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Max+mean pooled features through `2D -> D -> classes`.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassificationHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(params, "cls.fc1", 2 * channels, channels, Init::TruncNormal, rng)?,
            fc2: Linear::new(params, "cls.fc2", channels, classes, Init::TruncNormal, rng)?,
        })
    }

    /// Logits from pooled `[max | mean]` features.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, pooled: Var) -> Var {
        let h = self.fc1.forward(g, cx, pooled);
        let h = g.gelu(h);
        self.fc2.forward(g, cx, h)
    }
}

/// Channel-wise max and mean over each group of `seq` latent rows.
pub fn pool_latents<T: Scalar>(g: &mut Graph<T>, latents: Var, seq: usize) -> Var {
    let max = g.group_max(latents, seq);
    let mean = g.group_mean(latents, seq);
    g.concat_cols(max, mean)
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub tokens: Var,
    pub latents: Var,
    pub generated: Option<Var>,
    pub predicted: Option<Var>,
    pub logits: Option<Var>,
    pub cd_l1: Option<Var>,
    pub cd_l2: Option<Var>,
    pub generation: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    pub embedder: PatchEmbedder,
    pub extractor: Vec<TransformerBlock>,
    pub generator: Vec<TransformerBlock>,
    pub head: PredictionHead,
    pub classifier: ClassificationHead,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let d = config.channels;
        let embedder = PatchEmbedder::new(&mut params, "embed", d, &mut rng)?;
        let extractor = (0..config.extractor_depth)
            .map(|i| TransformerBlock::new(&mut params, &format!("extractor.blocks.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let generator = (0..config.generator_depth)
            .map(|i| TransformerBlock::new(&mut params, &format!("generator.blocks.{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = PredictionHead {
            fc1: Linear::new(&mut params, "head.fc1", d, 4 * d, Init::TruncNormal, &mut rng)?,
            fc2: Linear::new(
                &mut params,
                "head.fc2",
                4 * d,
                3 * config.patch_size,
                Init::TruncNormal,
                &mut rng,
            )?,
        };
        let classifier = ClassificationHead::new(&mut params, d, config.num_classes, &mut rng)?;
        Ok(Self {
            config,
            params,
            embedder,
            extractor,
            generator,
            head,
            classifier,
        })
    }

    /// Re-creates the classification head with `num_classes` outputs.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(invalid_arg("need at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (_, name, p) in self.params.iter().filter(|(_, n, _)| !n.starts_with("cls.")) {
            let id = params.insert(name, p.value.clone(), p.decay)?;
            params.get_mut(id).frozen = p.frozen;
        }
        self.classifier = ClassificationHead::new(&mut params, self.config.channels, num_classes, &mut rng)?;
        self.params = params;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Patch tokens `(B * n) x D` from stacked patch points.
    pub fn embed(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, points: Var) -> Var {
        self.embedder.forward(g, cx, points, self.config.patch_size)
    }

    /// Stacked extractor blocks with the absolute encoding added at each block input.
    pub fn extractor_forward(
        &self,
        g: &mut Graph<T>,
        cx: &mut Ctx<'_, T>,
        tokens: Var,
        ape: Var,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let seq = mask.size();
        let mut h = tokens;
        for block in &self.extractor {
            h = block.forward(g, cx, h, Some(ape), seq, mask)?;
        }
        Ok(h)
    }

    /// Generator over latents `0..n-1` of every sequence, prompted by `rdp`.
    pub fn generator_forward(
        &self,
        g: &mut Graph<T>,
        cx: &mut Ctx<'_, T>,
        latents: Var,
        rdp: Var,
        seq: usize,
    ) -> Result<Var> {
        if seq < 2 {
            return Err(shape_err("generator needs sequences of at least two patches"));
        }
        let (rows, _) = g.value(latents).dims2();
        if rows % seq != 0 {
            return Err(shape_err(format!("{rows} latent rows for sequence length {seq}")));
        }
        let batch = rows / seq;
        let keep: Vec<usize> = (0..batch)
            .flat_map(|b| (0..seq - 1).map(move |i| b * seq + i))
            .collect();
        if g.value(rdp).dims2().0 != keep.len() {
            return Err(shape_err("direction prompts must have n - 1 rows per sequence"));
        }
        let mut h = g.gather_rows(latents, keep);
        let mask = Arc::new(AttentionMask::causal(seq - 1));
        for block in &self.generator {
            h = block.forward(g, cx, h, Some(rdp), seq - 1, &mask)?;
        }
        Ok(h)
    }

    /// Predicted patches as `(rows * k) x 3` points.
    pub fn predict_patches(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, generated: Var) -> Var {
        let h = self.head.fc1.forward(g, cx, generated);
        let h = g.relu(h);
        let out = self.head.fc2.forward(g, cx, h);
        let rows = g.value(out).dims2().0;
        g.reshape(out, vec![rows * self.config.patch_size, 3])
    }

    pub fn classification_head(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, latents: Var, seq: usize) -> Var {
        let pooled = pool_latents(g, latents, seq);
        self.classifier.forward(g, cx, pooled)
    }

    /// Extractor attention mask for `mode`.
    pub fn mask_for<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Result<Arc<AttentionMask>> {
        let n = self.config.patches;
        Ok(Arc::new(match mode {
            Mode::Pretrain => build_dual_mask(n, self.config.dual_mask_ratio, rng)?.mask,
            Mode::Finetune | Mode::Inference => AttentionMask::causal(n),
        }))
    }

    /// Records a full forward pass of `batch`.
    ///
    /// `with_generation` adds the generator, head and Chamfer losses;
    /// `with_classes` adds the classification logits.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        cx: &mut Ctx<'_, T>,
        batch: &Batch<T>,
        mask: &Arc<AttentionMask>,
        with_generation: bool,
        with_classes: bool,
    ) -> Result<ForwardVars> {
        if batch.patches != self.config.patches || batch.patch_size != self.config.patch_size {
            return Err(shape_err(format!(
                "batch has n = {}, k = {}; model expects n = {}, k = {}",
                batch.patches, batch.patch_size, self.config.patches, self.config.patch_size
            )));
        }
        let points = g.input(batch.points.clone());
        let tokens = self.embed(g, cx, points);
        let ape = g.input(batch.ape.clone());
        let latents = self.extractor_forward(g, cx, tokens, ape, mask)?;
        let mut out = ForwardVars {
            tokens,
            latents,
            generated: None,
            predicted: None,
            logits: None,
            cd_l1: None,
            cd_l2: None,
            generation: None,
        };
        if with_generation {
            let rdp = g.input(batch.rdp.clone());
            let generated = self.generator_forward(g, cx, latents, rdp, batch.patches)?;
            let predicted = self.predict_patches(g, cx, generated);
            let targets = g.input(batch.targets.clone());
            let (l1, l2, total) = generation_loss_graph(g, predicted, targets, batch.patch_size);
            out.generated = Some(generated);
            out.predicted = Some(predicted);
            out.cd_l1 = Some(l1);
            out.cd_l2 = Some(l2);
            out.generation = Some(total);
        }
        if with_classes {
            out.logits = Some(self.classification_head(g, cx, latents, batch.patches));
        }
        Ok(out)
    }

    /// Causal-mask latents `n x D` of one prepared sequence.
    pub fn encode(&self, seq: &PreparedSequence) -> Result<Tensor<T>> {
        let batch = Batch::new(&[seq], vec![])?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&self.params);
        let mask = Arc::new(AttentionMask::causal(self.config.patches));
        let out = self.forward(&mut g, &mut cx, &batch, &mask, false, false)?;
        Ok(g.value(out.latents).clone())
    }

    /// Pooled `[max | mean]` causal features, one `2D` row per sequence.
    pub fn pooled_features(&self, seqs: &[&PreparedSequence]) -> Result<Tensor<T>> {
        let mut rows = Vec::new();
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let batch = Batch::new(chunk, vec![])?;
            let mut g = Graph::new();
            let mut cx = Ctx::new(&self.params);
            let mask = Arc::new(AttentionMask::causal(self.config.patches));
            let out = self.forward(&mut g, &mut cx, &batch, &mask, false, false)?;
            let pooled = pool_latents(&mut g, out.latents, self.config.patches);
            rows.extend_from_slice(g.value(pooled).data());
        }
        Ok(Tensor::new(vec![seqs.len(), 2 * self.config.channels], rows))
    }

    /// Inference-mode class logits, one row per sequence.
    pub fn logits(&self, seqs: &[&PreparedSequence]) -> Result<Tensor<T>> {
        let mut rows = Vec::new();
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let batch = Batch::new(chunk, vec![])?;
            let mut g = Graph::new();
            let mut cx = Ctx::new(&self.params);
            let mask = Arc::new(AttentionMask::causal(self.config.patches));
            let out = self.forward(&mut g, &mut cx, &batch, &mask, false, true)?;
            rows.extend_from_slice(g.value(out.logits.expect("logits")).data());
        }
        Ok(Tensor::new(vec![seqs.len(), self.config.num_classes], rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_zero_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_dual_mask(3, 0.0, &mut rng).unwrap();
        assert_eq!(m.mask, AttentionMask::causal(3));
        assert!(build_dual_mask(3, 1.0, &mut rng).is_err());
        assert!(build_dual_mask(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn row_cardinalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = build_dual_mask(11, 0.7, &mut rng).unwrap();
        assert_eq!(m.mask.row_count(10), 4);
        assert!(m.mask.allows(10, 10));
        for i in 0..11 {
            assert_eq!(m.mask.row_count(i), i - masked_count(0.7, i) + 1);
            for j in i + 1..11 {
                assert!(!m.mask.allows(i, j));
            }
        }
        assert_eq!(masked_count(0.7, 90), 63);
    }

    #[test]
    fn defaults_follow_ablation_rows() {
        let d = ModelConfig::desk();
        assert_eq!(d.generator_depth, 4);
        assert_eq!(d.dual_mask_ratio, 0.7);
        assert_eq!(3 * d.patch_size, 96);
        let p = ModelConfig::full();
        assert_eq!((p.channels, p.heads, p.extractor_depth), (384, 6, 12));
    }

    #[test]
    fn zero_head_predicts_zero_patches() {
        let cfg = ModelConfig::tiny();
        let mut m = Model::<f64>::new(cfg, 1).unwrap();
        for id in [m.head.fc1.weight, m.head.fc1.bias, m.head.fc2.weight, m.head.fc2.bias] {
            m.params.get_mut(id).value.fill(0.0);
        }
        let mut g = Graph::new();
        let cx = Ctx::new(&m.params);
        let x = g.input(Tensor::from_f64(vec![2, 12], &[0.3; 24]));
        let p = m.predict_patches(&mut g, &cx, x);
        assert_eq!(g.value(p).shape(), &[2 * cfg.patch_size, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }
}
