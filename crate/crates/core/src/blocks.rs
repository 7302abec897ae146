//! Backbone building blocks: the conv unit, C3K2, SPPF, and the two
//! cross-stage partial attention heads (C2PCA and the C2PSA baseline).

use aggrnet_tensor::{Element, Tensor, TensorError, Var};

use crate::attention::{self, ChannelAttention};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, Registry};

pub const BN_EPS: f64 = 1e-5;
/// Default weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const FFN_EXPANSION: usize = 2;
pub const SPPF_KERNEL: usize = 5;

fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| TensorError::Shape(format!("expected NCHW, got {shape:?}")).into())
}

fn check_channels(shape: &[usize], expected: usize, block: &str) -> Result<()> {
    let [_, c, _, _] = nchw(shape)?;
    if c != expected {
        return Err(TensorError::Shape(format!("{block} expects {expected} input channels, got {c}")).into());
    }
    Ok(())
}

/// Conv (no bias) → batch norm → SiLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn register(reg: &mut Registry, prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let weight = reg.learnable(
            format!("{prefix}.conv.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingUniform { fan_in: c_in * kernel * kernel },
        );
        let gamma = reg.learnable(format!("{prefix}.bn.weight"), &[c_out], Init::Const(1.0));
        let beta = reg.learnable(format!("{prefix}.bn.bias"), &[c_out], Init::Const(0.0));
        let running_mean = reg.buffer(format!("{prefix}.bn.running_mean"), &[c_out], 0.0);
        let running_var = reg.buffer(format!("{prefix}.bn.running_var"), &[c_out], 1.0);
        Self { weight, gamma, beta, running_mean, running_var, c_in, c_out, kernel, stride }
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        check_channels(ctx.tape.shape(x), self.c_in, "conv block")?;
        let w = ctx.param(self.weight);
        let y = ctx.tape.conv2d(x, w, None, self.stride, self.kernel / 2)?;
        let y = self.normalize(ctx, y)?;
        Ok(ctx.tape.silu(y))
    }

    /// Batch norm without the nonlinearity.
    pub fn normalize<F: Element>(&self, ctx: &mut Ctx<'_, F>, y: Var) -> Result<Var> {
        let c = self.c_out;
        let per_channel = [1, c, 1, 1];
        let yhat = if ctx.mode.batch_stats {
            let [n, _, h, w] = nchw(ctx.tape.shape(y))?;
            let mean = ctx.tape.mean_axes(y, &[0, 2, 3], true)?;
            let centered = ctx.tape.sub(y, mean)?;
            let sq = ctx.tape.mul(centered, centered)?;
            let var = ctx.tape.mean_axes(sq, &[0, 2, 3], true)?;
            let shifted = ctx.tape.add_scalar(var, F::lit(BN_EPS));
            let inv_std = ctx.tape.powf(shifted, F::lit(-0.5));

            let m = (n * h * w) as f64;
            let bessel = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = F::lit(ctx.mode.stat_momentum);
            let keep = F::one() - mom;
            let batch_mean = ctx.tape.value(mean).data().to_vec();
            let batch_var = ctx.tape.value(var).data().to_vec();
            let rm = ctx.stored(self.running_mean).data().iter().zip(&batch_mean).map(|(&r, &b)| keep * r + mom * b);
            let rm = Tensor::new(vec![c], rm.collect())?;
            let rv = ctx
                .stored(self.running_var)
                .data()
                .iter()
                .zip(&batch_var)
                .map(|(&r, &b)| keep * r + mom * b * F::lit(bessel));
            let rv = Tensor::new(vec![c], rv.collect())?;
            ctx.push_update(self.running_mean, rm);
            ctx.push_update(self.running_var, rv);

            ctx.tape.mul(centered, inv_std)?
        } else {
            let mean = ctx.stored(self.running_mean).reshape(per_channel)?;
            let inv_std =
                ctx.stored(self.running_var).map(|v| (v + F::lit(BN_EPS)).sqrt().recip()).reshape(per_channel)?;
            let mean = ctx.tape.constant(mean);
            let inv_std = ctx.tape.constant(inv_std);
            let centered = ctx.tape.sub(y, mean)?;
            ctx.tape.mul(centered, inv_std)?
        };
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let gamma = ctx.tape.reshape(gamma, &per_channel)?;
        let beta = ctx.tape.reshape(beta, &per_channel)?;
        let scaled = ctx.tape.mul(yhat, gamma)?;
        Ok(ctx.tape.add(scaled, beta)?)
    }
}

/// Two 3×3 conv blocks with an identity shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl Bottleneck {
    pub fn register(reg: &mut Registry, prefix: &str, c: usize) -> Self {
        Self {
            cv1: ConvBlock::register(reg, &format!("{prefix}.cv1"), c, c, 3, 1),
            cv2: ConvBlock::register(reg, &format!("{prefix}.cv2"), c, c, 3, 1),
        }
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        Ok(ctx.tape.add(x, y)?)
    }
}

/// Cross-stage partial block: 1×1 expand, split, a chain of bottlenecks on
/// one half, concat every intermediate, 1×1 fuse.
#[derive(Debug, Clone)]
pub struct C3k2 {
    pub cv1: ConvBlock,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBlock,
    pub hidden: usize,
}

impl C3k2 {
    pub fn register(reg: &mut Registry, prefix: &str, c_in: usize, c_out: usize, n: usize) -> Result<Self> {
        if c_out % 2 != 0 || c_out == 0 {
            return Err(Error::Config(format!("C3K2 output width must be even, got {c_out}")));
        }
        let hidden = c_out / 2;
        let cv1 = ConvBlock::register(reg, &format!("{prefix}.cv1"), c_in, 2 * hidden, 1, 1);
        let blocks = (0..n).map(|i| Bottleneck::register(reg, &format!("{prefix}.m{i}"), hidden)).collect();
        let cv2 = ConvBlock::register(reg, &format!("{prefix}.cv2"), (2 + n) * hidden, c_out, 1, 1);
        Ok(Self { cv1, blocks, cv2, hidden })
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let mut parts = ctx.tape.split(y, 1, 2)?;
        let mut cur = parts[1];
        for b in &self.blocks {
            cur = b.forward(ctx, cur)?;
            parts.push(cur);
        }
        let cat = ctx.tape.concat(&parts, 1)?;
        self.cv2.forward(ctx, cat)
    }
}

/// Spatial pyramid pooling, fast variant.
#[derive(Debug, Clone)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl Sppf {
    pub fn register(reg: &mut Registry, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let hidden = c_in / 2;
        if hidden == 0 {
            return Err(Error::Config(format!("SPPF needs at least 2 input channels, got {c_in}")));
        }
        Ok(Self {
            cv1: ConvBlock::register(reg, &format!("{prefix}.cv1"), c_in, hidden, 1, 1),
            cv2: ConvBlock::register(reg, &format!("{prefix}.cv2"), 4 * hidden, c_out, 1, 1),
        })
    }

    /// Returns the reduced map and its three pooled versions.
    pub fn pyramid<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<[Var; 4]> {
        let y = self.cv1.forward(ctx, x)?;
        let pad = SPPF_KERNEL / 2;
        let p1 = ctx.tape.maxpool2d(y, SPPF_KERNEL, 1, pad)?;
        let p2 = ctx.tape.maxpool2d(p1, SPPF_KERNEL, 1, pad)?;
        let p3 = ctx.tape.maxpool2d(p2, SPPF_KERNEL, 1, pad)?;
        Ok([y, p1, p2, p3])
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let levels = self.pyramid(ctx, x)?;
        let cat = ctx.tape.concat(&levels, 1)?;
        self.cv2.forward(ctx, cat)
    }
}

/// 1×1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn register(reg: &mut Registry, prefix: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            weight: reg.learnable(
                format!("{prefix}.weight"),
                &[c_out, c_in, 1, 1],
                Init::KaimingUniform { fan_in: c_in },
            ),
            bias: reg.learnable(format!("{prefix}.bias"), &[c_out], Init::Const(0.0)),
        }
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        Ok(ctx.tape.conv2d(x, w, Some(b), 1, 0)?)
    }
}

/// `conv1×1 (C→eC) → SiLU → conv1×1 (eC→C)`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Conv1x1,
    pub fc2: Conv1x1,
}

impl Ffn {
    pub fn register(reg: &mut Registry, prefix: &str, c: usize) -> Self {
        Self {
            fc1: Conv1x1::register(reg, &format!("{prefix}.fc1"), c, FFN_EXPANSION * c),
            fc2: Conv1x1::register(reg, &format!("{prefix}.fc2"), FFN_EXPANSION * c, c),
        }
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.silu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Intermediate maps of a cross-stage partial attention block.
#[derive(Debug, Clone, Copy)]
pub struct PartialOutput {
    pub expanded: Var,
    pub x_a: Var,
    pub x_b: Var,
    pub x_b_out: Var,
    pub output: Var,
}

/// Cross-stage partial block with channel attention on the active half.
/// Maps `C` channels to `2C`.
#[derive(Debug, Clone)]
pub struct C2pca {
    pub cv1: ConvBlock,
    pub ca: ChannelAttention,
    pub ffn: Ffn,
    pub channels: usize,
}

impl C2pca {
    pub fn register(reg: &mut Registry, prefix: &str, c: usize, reduction: usize) -> Self {
        Self {
            cv1: ConvBlock::register(reg, &format!("{prefix}.cv1"), c, 2 * c, 1, 1),
            ca: ChannelAttention::register(reg, &format!("{prefix}.ca"), c, reduction),
            ffn: Ffn::register(reg, &format!("{prefix}.ffn"), c),
            channels: c,
        }
    }

    pub fn forward_detailed<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<PartialOutput> {
        let expanded = self.cv1.forward(ctx, x)?;
        let halves = ctx.tape.split(expanded, 1, 2)?;
        let (x_a, x_b) = (halves[0], halves[1]);
        let logits = self.ca.forward(ctx, x_b)?;
        let gate = ctx.tape.sigmoid(logits);
        let att = ctx.tape.mul(gate, x_b)?;
        let res1 = ctx.tape.add(x_b, att)?;
        let f = self.ffn.forward(ctx, res1)?;
        let x_b_out = ctx.tape.add(res1, f)?;
        let output = ctx.tape.concat(&[x_a, x_b_out], 1)?;
        Ok(PartialOutput { expanded, x_a, x_b, x_b_out, output })
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, x)?.output)
    }
}

/// Cross-stage partial block with single-head spatial self-attention on the
/// active half. Maps `C` channels to `2C`.
#[derive(Debug, Clone)]
pub struct C2psa {
    pub cv1: ConvBlock,
    pub q: Conv1x1,
    pub k: Conv1x1,
    pub v: Conv1x1,
    pub ffn: Ffn,
    pub channels: usize,
}

impl C2psa {
    pub fn register(reg: &mut Registry, prefix: &str, c: usize) -> Self {
        Self {
            cv1: ConvBlock::register(reg, &format!("{prefix}.cv1"), c, 2 * c, 1, 1),
            q: Conv1x1::register(reg, &format!("{prefix}.attn.q"), c, c),
            k: Conv1x1::register(reg, &format!("{prefix}.attn.k"), c, c),
            v: Conv1x1::register(reg, &format!("{prefix}.attn.v"), c, c),
            ffn: Ffn::register(reg, &format!("{prefix}.ffn"), c),
            channels: c,
        }
    }

    /// The attention sub-step on its own: `untok(SDPA(tok q, tok k, tok v))`.
    pub fn attend<F: Element>(&self, ctx: &mut Ctx<'_, F>, x_b: Var) -> Result<Var> {
        let [_, _, h, w] = nchw(ctx.tape.shape(x_b))?;
        let q = self.q.forward(ctx, x_b)?;
        let k = self.k.forward(ctx, x_b)?;
        let v = self.v.forward(ctx, x_b)?;
        let q = attention::tokenize(ctx.tape, q)?;
        let k = attention::tokenize(ctx.tape, k)?;
        let v = attention::tokenize(ctx.tape, v)?;
        let out = attention::scaled_dot_attention(ctx.tape, q, k, v)?;
        attention::untokenize(ctx.tape, out, h, w)
    }

    pub fn forward_detailed<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<PartialOutput> {
        let expanded = self.cv1.forward(ctx, x)?;
        let halves = ctx.tape.split(expanded, 1, 2)?;
        let (x_a, x_b) = (halves[0], halves[1]);
        let att = self.attend(ctx, x_b)?;
        let res1 = ctx.tape.add(x_b, att)?;
        let f = self.ffn.forward(ctx, res1)?;
        let x_b_out = ctx.tape.add(res1, f)?;
        let output = ctx.tape.concat(&[x_a, x_b_out], 1)?;
        Ok(PartialOutput { expanded, x_a, x_b, x_b_out, output })
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, x)?.output)
    }
}
