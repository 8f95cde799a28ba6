//! Parameterized building blocks recorded onto a [`Graph`].

use std::sync::Arc;

use rand::{Rng, RngCore};

use super::graph::{Graph, Var};
use super::mask::AttentionMask;
use super::params::{fan_in_uniform, trunc_normal, ParamId, ParameterSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Forward-pass context: parameters plus optional dropout randomness.
pub struct Ctx<'a, T: Scalar> {
    pub params: &'a ParameterSet<T>,
    pub dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ParameterSet<T>) -> Self {
        Self {
            params,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn with_dropout(params: &'a ParameterSet<T>, dropout: f64, rng: &'a mut dyn RngCore) -> Self {
        Self {
            params,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.params, id)
    }

    pub fn dropout(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match (&mut self.rng, self.dropout > 0.0) {
            (Some(rng), true) => g.dropout(x, self.dropout, &mut **rng),
            _ => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal with [`INIT_STD`].
    TruncNormal,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
}

/// Affine map `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::TruncNormal => trunc_normal(vec![inputs, outputs], INIT_STD, rng),
            Init::FanIn => fan_in_uniform(vec![inputs, outputs], inputs, rng),
        };
        let b = match init {
            Init::TruncNormal => Tensor::zeros(vec![outputs]),
            Init::FanIn => fan_in_uniform(vec![outputs], inputs, rng),
        };
        Ok(Self {
            weight: params.insert(format!("{name}.weight"), w, true)?,
            bias: params.insert(format!("{name}.bias"), b, false)?,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, x: Var) -> Var {
        let w = cx.p(g, self.weight);
        let b = cx.p(g, self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParameterSet<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.insert(format!("{name}.weight"), Tensor::full(vec![width], T::one()), false)?,
            beta: params.insert(format!("{name}.bias"), Tensor::zeros(vec![width]), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, cx: &Ctx<'_, T>, x: Var) -> Var {
        let gamma = cx.p(g, self.gamma);
        let beta = cx.p(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Fused-QKV multi-head self-attention followed by an output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(shape_err(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            qkv: Linear::new(params, &format!("{name}.qkv"), width, 3 * width, Init::TruncNormal, rng)?,
            proj: Linear::new(params, &format!("{name}.proj"), width, width, Init::TruncNormal, rng)?,
            heads,
        })
    }

    /// `x` holds `batch * seq` rows; every sequence shares `mask`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        cx: &mut Ctx<'_, T>,
        x: Var,
        seq: usize,
        mask: &Arc<AttentionMask>,
    ) -> Var {
        let qkv = self.qkv.forward(g, cx, x);
        let mixed = g.attention(qkv, seq, self.heads, mask);
        let out = self.proj.forward(g, cx, mixed);
        cx.dropout(g, out)
    }
}

/// Pre-norm transformer block with a GELU MLP of hidden ratio 4.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

pub const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), width)?,
            attn: SelfAttention::new(params, &format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), width)?,
            fc1: Linear::new(
                params,
                &format!("{name}.mlp.fc1"),
                width,
                MLP_RATIO * width,
                Init::TruncNormal,
                rng,
            )?,
            fc2: Linear::new(
                params,
                &format!("{name}.mlp.fc2"),
                MLP_RATIO * width,
                width,
                Init::TruncNormal,
                rng,
            )?,
            width,
        })
    }

    /// `x + pos`, then `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        cx: &mut Ctx<'_, T>,
        tokens: Var,
        pos: Option<Var>,
        seq: usize,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let (rows, cols) = g.value(tokens).dims2();
        if cols != self.width || rows % seq != 0 {
            return Err(shape_err(format!(
                "block expects rows multiple of {seq} and width {}, got {rows}x{cols}",
                self.width
            )));
        }
        let x = match pos {
            Some(p) => {
                if g.value(p).dims2() != (rows, cols) {
                    return Err(shape_err("positional encoding shape differs from tokens"));
                }
                g.add(tokens, p)
            }
            None => tokens,
        };
        let h = self.norm1.forward(g, cx, x);
        let a = self.attn.forward(g, cx, h, seq, mask);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, cx, x);
        let h = self.fc1.forward(g, cx, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, cx, h);
        let h = cx.dropout(g, h);
        Ok(g.add(x, h))
    }
}

/// Runs one attention layer on a standalone `n x D` token matrix.
pub fn masked_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    cx: &mut Ctx<'_, T>,
    attn: &SelfAttention,
    tokens: Var,
    mask: &Arc<AttentionMask>,
) -> Result<Var> {
    let (rows, cols) = g.value(tokens).dims2();
    if mask.size() != rows {
        return Err(shape_err(format!("mask of size {} for {rows} tokens", mask.size())));
    }
    if cols % attn.heads != 0 {
        return Err(shape_err(format!("{} heads do not divide width {cols}", attn.heads)));
    }
    Ok(attn.forward(g, cx, tokens, rows, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::<f64>::new();
        let attn = SelfAttention::new(&mut ps, "a", 4, 2, &mut rng).unwrap();
        let x = random_tokens(1, 4, 2);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut cx = Ctx::new(&ps);
        let y = masked_self_attention(&mut g, &mut cx, &attn, xv, &Arc::new(AttentionMask::full(1))).unwrap();
        // value projection = columns 8..12 of x Wqkv + b, then the output projection
        let w = ps.value(attn.qkv.weight);
        let mut v = [0.0; 4];
        for (j, vj) in v.iter_mut().enumerate() {
            for i in 0..4 {
                *vj += x.data()[i] * w.get2(i, 8 + j);
            }
        }
        let pw = ps.value(attn.proj.weight);
        for j in 0..4 {
            let expect: f64 = (0..4).map(|i| v[i] * pw.get2(i, j)).sum();
            assert!((g.value(y).data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_and_causal_masks_isolate_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::<f64>::new();
        let attn = SelfAttention::new(&mut ps, "a", 6, 3, &mut rng).unwrap();
        let run = |x: &Tensor<f64>, m: &Arc<AttentionMask>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let mut cx = Ctx::new(&ps);
            let y = masked_self_attention(&mut g, &mut cx, &attn, xv, m).unwrap();
            g.value(y).clone()
        };
        let x = random_tokens(3, 6, 9);
        let mut x2 = x.clone();
        for j in 0..6 {
            x2.data_mut()[2 * 6 + j] += 0.5;
        }
        let causal = Arc::new(AttentionMask::causal(3));
        let (a, b) = (run(&x, &causal), run(&x2, &causal));
        assert_eq!(&a.data()[..12], &b.data()[..12]);
        assert_ne!(&a.data()[12..], &b.data()[12..]);

        let diag = Arc::new(AttentionMask::diagonal(3));
        let mut x3 = x.clone();
        x3.data_mut()[0] -= 1.0;
        let (a, b) = (run(&x, &diag), run(&x3, &diag));
        assert_eq!(&a.data()[6..], &b.data()[6..]);
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParameterSet::<f64>::new();
        let block = TransformerBlock::new(&mut ps, "b", 6, 2, &mut rng).unwrap();
        ps.get_mut(block.attn.proj.weight).value.fill(0.0);
        ps.get_mut(block.fc2.weight).value.fill(0.0);
        let x = random_tokens(4, 6, 3);
        let pos = random_tokens(4, 6, 4);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let pv = g.input(pos.clone());
        let mut cx = Ctx::new(&ps);
        let y = block
            .forward(&mut g, &mut cx, xv, Some(pv), 4, &Arc::new(AttentionMask::causal(4)))
            .unwrap();
        for ((&o, &a), &b) in g.value(y).data().iter().zip(x.data()).zip(pos.data()) {
            assert_eq!(o, a + b);
        }
    }

    #[test]
    fn zero_pos_matches_no_pos() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParameterSet::<f64>::new();
        let block = TransformerBlock::new(&mut ps, "b", 6, 2, &mut rng).unwrap();
        let x = random_tokens(3, 6, 1);
        let mask = Arc::new(AttentionMask::causal(3));
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let zero = g.input(Tensor::zeros(vec![3, 6]));
        let mut cx = Ctx::new(&ps);
        let a = block.forward(&mut g, &mut cx, xv, Some(zero), 3, &mask).unwrap();
        let b = block.forward(&mut g, &mut cx, xv, None, 3, &mask).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        let bad = g.input(Tensor::zeros(vec![2, 6]));
        assert!(block.forward(&mut g, &mut cx, xv, Some(bad), 3, &mask).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut ps = ParameterSet::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 16).unwrap();
        let x = random_tokens(5, 16, 11);
        let mut g = Graph::new();
        let xv = g.input(x);
        let cx = Ctx::new(&ps);
        let y = ln.forward(&mut g, &cx, xv);
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
