//! Spatial and channel attention (CBAM form) and scaled dot-product
//! attention over spatial tokens.
//!
//! Spatial and channel attention return pre-sigmoid logits; callers decide
//! where the squashing happens.

use aggrnet_tensor::{Element, Tape, TensorError, Var};

use crate::error::Result;
use crate::params::{Ctx, Init, ParamId, Registry};

/// Default reduction ratio of the channel-attention MLP.
pub const CHANNEL_REDUCTION: usize = 16;
/// Narrowest hidden layer the reduction is allowed to produce.
pub const MIN_HIDDEN: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Wraparound; makes the spatial logits exactly shift-equivariant.
    Circular,
}

/// Hidden width `C / reduction`, raised to `min(MIN_HIDDEN, C)` for narrow maps.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(MIN_HIDDEN.min(channels)).max(1)
}

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    /// `[hidden, C]`
    pub w1: ParamId,
    /// `[C, hidden]`
    pub w2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl ChannelAttention {
    pub fn register(reg: &mut Registry, prefix: &str, channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        let w1 =
            reg.learnable(format!("{prefix}.mlp_w1"), &[hidden, channels], Init::KaimingUniform { fan_in: channels });
        let w2 =
            reg.learnable(format!("{prefix}.mlp_w2"), &[channels, hidden], Init::KaimingUniform { fan_in: hidden });
        Self { w1, w2, channels, hidden }
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w1, w2) = (ctx.param(self.w1), ctx.param(self.w2));
        channel_attention(ctx.tape, x, w1, w2)
    }
}

fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| TensorError::Shape(format!("expected NCHW, got {shape:?}")).into())
}

/// `MLP(avgpool(x)) + MLP(maxpool(x))` with a shared two-layer ReLU MLP,
/// shaped `[N,C,1,1]`.
pub fn channel_attention<F: Element>(tape: &mut Tape<F>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let [n, c, _, _] = nchw(tape.shape(x))?;
    let w1s = tape.shape(w1).to_vec();
    if w1s.len() != 2 || w1s[1] != c || tape.shape(w2) != [c, w1s[0]] {
        return Err(TensorError::Shape(format!(
            "channel attention weights {:?}/{:?} do not fit {c} channels",
            w1s,
            tape.shape(w2)
        ))
        .into());
    }
    let w1t = tape.transpose_last(w1)?;
    let w2t = tape.transpose_last(w2)?;
    let branch = |tape: &mut Tape<F>, pooled: Var| -> Result<Var> {
        let v = tape.reshape(pooled, &[n, c])?;
        let h = tape.matmul(v, w1t)?;
        let h = tape.relu(h);
        Ok(tape.matmul(h, w2t)?)
    };
    let avg = tape.global_avg_pool(x)?;
    let avg = branch(tape, avg)?;
    let max = tape.global_max_pool(x)?;
    let max = branch(tape, max)?;
    let sum = tape.add(avg, max)?;
    Ok(tape.reshape(sum, &[n, c, 1, 1])?)
}

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    /// `[1, 2, k, k]`
    pub w: ParamId,
    /// `[1]`
    pub b: ParamId,
    pub kernel: usize,
    pub padding: Padding,
}

impl SpatialAttention {
    pub fn register(reg: &mut Registry, prefix: &str, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(crate::Error::Config(format!("spatial attention kernel must be odd, got {kernel}")));
        }
        let w = reg.learnable(
            format!("{prefix}.conv_w"),
            &[1, 2, kernel, kernel],
            Init::KaimingUniform { fan_in: 2 * kernel * kernel },
        );
        let b = reg.learnable(format!("{prefix}.conv_b"), &[1], Init::Const(0.0));
        Ok(Self { w, b, kernel, padding: Padding::Zero })
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.w), ctx.param(self.b));
        spatial_attention(ctx.tape, x, w, b, self.padding)
    }
}

/// `k×k` conv over `[channel-mean(x); channel-max(x)]`, shaped `[N,1,H,W]`.
pub fn spatial_attention<F: Element>(tape: &mut Tape<F>, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
    nchw(tape.shape(x))?;
    let ws = tape.shape(w).to_vec();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 2 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(TensorError::Shape(format!("spatial attention kernel {ws:?} must be [1,2,k,k] with odd k")).into());
    }
    let pad = ws[2] / 2;
    let mean = tape.mean_axes(x, &[1], true)?;
    let max = tape.max_axes(x, &[1], true)?;
    let stacked = tape.concat(&[mean, max], 1)?;
    Ok(match padding {
        Padding::Zero => tape.conv2d(stacked, w, Some(b), 1, pad)?,
        Padding::Circular => {
            let p = tape.pad_circular(stacked, pad)?;
            tape.conv2d(p, w, Some(b), 1, 0)?
        }
    })
}

/// `[N,C,H,W]` → `[N,H·W,C]`: one token per spatial position.
pub fn tokenize<F: Element>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let [n, c, h, w] = nchw(tape.shape(x))?;
    let flat = tape.reshape(x, &[n, c, h * w])?;
    Ok(tape.transpose_last(flat)?)
}

/// Inverse of [`tokenize`].
pub fn untokenize<F: Element>(tape: &mut Tape<F>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(TensorError::Shape(format!("{s:?} is not a token map for {h}x{w}")).into());
    }
    let t = tape.transpose_last(tokens)?;
    Ok(tape.reshape(t, &[s[0], s[2], h, w])?)
}

/// `softmax(Q·Kᵀ/√d)` over the key axis, shaped `[N,T,T]`.
pub fn attention_weights<F: Element>(tape: &mut Tape<F>, q: Var, k: Var) -> Result<Var> {
    let qs = tape.shape(q);
    if qs.len() != 3 || qs != tape.shape(k) {
        return Err(TensorError::Shape(format!(
            "attention needs equal [N,T,d] q/k, got {:?} and {:?}",
            qs,
            tape.shape(k)
        ))
        .into());
    }
    let d = qs[2];
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, F::one() / F::lit(d as f64).sqrt());
    Ok(tape.softmax(scores, 2)?)
}

/// `softmax(Q·Kᵀ/√d)·V`, single head.
pub fn scaled_dot_attention<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    if tape.shape(v) != tape.shape(q) {
        return Err(TensorError::Shape(format!(
            "attention values {:?} do not match queries {:?}",
            tape.shape(v),
            tape.shape(q)
        ))
        .into());
    }
    let weights = attention_weights(tape, q, k)?;
    Ok(tape.matmul(weights, v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aggrnet_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_width_rule() {
        assert_eq!(hidden_width(256, 16), 16);
        assert_eq!(hidden_width(64, 16), 4);
        assert_eq!(hidden_width(2, 16), 2);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::randn(vec![2, 8, 5, 5], &mut ChaCha8Rng::seed_from_u64(3)));
        let w1 = t.constant(Tensor::zeros(vec![4, 8]));
        let w2 = t.constant(Tensor::zeros(vec![8, 4]));
        let ca = channel_attention(&mut t, x, w1, w2).unwrap();
        assert_eq!(t.shape(ca), &[2, 8, 1, 1]);
        assert!(t.value(ca).data().iter().all(|&v| v == 0.0));
        let sw = t.constant(Tensor::zeros(vec![1, 2, 7, 7]));
        let sb = t.constant(Tensor::zeros(vec![1]));
        let sa = spatial_attention(&mut t, x, sw, sb, Padding::Zero).unwrap();
        assert_eq!(t.shape(sa), &[2, 1, 5, 5]);
        assert!(t.value(sa).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(vec![1, 6, 2, 2]));
        let w1 = t.constant(Tensor::zeros(vec![4, 8]));
        let w2 = t.constant(Tensor::zeros(vec![8, 4]));
        assert!(channel_attention(&mut t, x, w1, w2).is_err());
    }

    #[test]
    fn tokenize_round_trip() {
        let mut t = Tape::<f64>::new();
        let x = Tensor::randn(vec![2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(3));
        let v = t.constant(x.clone());
        let tok = tokenize(&mut t, v).unwrap();
        assert_eq!(t.shape(tok), &[2, 20, 3]);
        // token (n, p) holds the channel vector at position p
        assert_eq!(t.value(tok).data()[(20 + 7) * 3 + 2], x.data()[(3 + 2) * 20 + 7]);
        let back = untokenize(&mut t, tok, 4, 5).unwrap();
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn attention_shape_errors() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::zeros(vec![1, 3, 2]));
        let k = t.constant(Tensor::zeros(vec![1, 4, 2]));
        assert!(scaled_dot_attention(&mut t, q, k, q).is_err());
    }
}
