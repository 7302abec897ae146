//! Feature Extraction and Aggregation.
//!
//! FEM scores every element of a feature map with `σ(SA + CA)` and splits the
//! map at a learnable threshold `τ` into complementary informative and
//! non-informative parts. FAM then runs cross-attention over spatial tokens
//! with `Q = info + ninfo`, `K = info − ninfo`, `V = info`, and the module
//! adds its input back as a residual.
//!
//! The binary mask has zero gradient almost everywhere, so training uses the
//! relaxation `σ(κ(S − τ))` (or a straight-through estimator) while inference
//! always uses the exact `S ≥ τ` rule.

use aggrnet_tensor::{ops, Element, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{self, ChannelAttention, Padding, SpatialAttention};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamKind, ParamSpec, Registry};

pub const TAU_INIT: f64 = 0.5;
/// `τ` is kept inside this range after every optimizer step.
pub const TAU_RANGE: (f64, f64) = (0.01, 0.99);
pub const DEFAULT_KAPPA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `w_info = [S ≥ τ]`.
    Hard,
    /// `w_info = σ(κ(S − τ))`.
    #[default]
    Soft,
    /// Hard forward value, soft gradient.
    StraightThrough,
}

/// How FAM builds its keys. Only `Contrast` is the real module; `Flipped`
/// exists so the verification suite can prove it notices a sign error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyRule {
    /// `K = info − ninfo`
    #[default]
    Contrast,
    /// `K = info + ninfo`
    Flipped,
}

/// Parameters of one FEA module.
#[derive(Debug, Clone)]
pub struct FeaState {
    pub sa: SpatialAttention,
    pub ca: ChannelAttention,
    pub tau: ParamId,
    pub kappa: f64,
    pub key_rule: KeyRule,
}

/// Tape variables standing in for a [`FeaState`]'s learnable tensors.
#[derive(Debug, Clone, Copy)]
pub struct FeaVars {
    pub sa_w: Var,
    pub sa_b: Var,
    pub ca_w1: Var,
    pub ca_w2: Var,
    pub tau: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SegregatedFeatures {
    pub x_info: Var,
    pub x_ninfo: Var,
    pub scores: Var,
    pub w_info: Var,
    pub w_ninfo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeaOutput {
    pub seg: SegregatedFeatures,
    /// FAM output before the residual.
    pub aggregated: Var,
    pub output: Var,
}

impl FeaState {
    pub fn register(
        reg: &mut Registry,
        prefix: &str,
        channels: usize,
        kappa: f64,
        spatial_kernel: usize,
        reduction: usize,
    ) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("mask temperature must be positive, got {kappa}")));
        }
        let sa = SpatialAttention::register(reg, &format!("{prefix}.sa"), spatial_kernel)?;
        let ca = ChannelAttention::register(reg, &format!("{prefix}.ca"), channels, reduction);
        let tau = reg.push(ParamSpec {
            name: format!("{prefix}.tau"),
            shape: vec![1],
            kind: ParamKind::Learnable,
            init: Init::Const(TAU_INIT),
            clamp: Some(TAU_RANGE),
        });
        Ok(Self { sa, ca, tau, kappa, key_rule: KeyRule::Contrast })
    }

    pub fn bind<F: Element>(&self, ctx: &mut Ctx<'_, F>) -> FeaVars {
        FeaVars {
            sa_w: ctx.param(self.sa.w),
            sa_b: ctx.param(self.sa.b),
            ca_w1: ctx.param(self.ca.w1),
            ca_w2: ctx.param(self.ca.w2),
            tau: ctx.param(self.tau),
        }
    }

    pub fn forward_detailed<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<FeaOutput> {
        let vars = self.bind(ctx);
        let mask = ctx.mode.mask;
        let seg = fem_forward(ctx.tape, x, &vars, self.sa.padding, self.kappa, mask)?;
        let aggregated = fam_forward_with(ctx.tape, &seg, self.key_rule)?;
        let output = ctx.tape.add(aggregated, x)?;
        Ok(FeaOutput { seg, aggregated, output })
    }

    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, x)?.output)
    }
}

/// Split `x` into informative and non-informative parts.
pub fn fem_forward<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    p: &FeaVars,
    padding: Padding,
    kappa: f64,
    mode: MaskMode,
) -> Result<SegregatedFeatures> {
    if tape.value(p.tau).numel() != 1 {
        return Err(TensorError::Shape(format!("tau must be a single scalar, got {:?}", tape.shape(p.tau))).into());
    }
    let sa = attention::spatial_attention(tape, x, p.sa_w, p.sa_b, padding)?;
    let ca = attention::channel_attention(tape, x, p.ca_w1, p.ca_w2)?;
    let logits = tape.add(sa, ca)?;
    let scores = tape.sigmoid(logits);

    let hard = || -> Result<Tensor<F>> {
        let tau = tape.value(p.tau).item()?;
        Ok(tape.value(scores).map(|s| if s >= tau { F::one() } else { F::zero() }))
    };
    let soft = |tape: &mut Tape<F>| -> Result<Var> {
        let d = tape.sub(scores, p.tau)?;
        let d = tape.scale(d, F::lit(kappa));
        Ok(tape.sigmoid(d))
    };
    let w_info = match mode {
        MaskMode::Hard => {
            let h = hard()?;
            tape.constant(h)
        }
        MaskMode::Soft => soft(tape)?,
        MaskMode::StraightThrough => {
            let h = hard()?;
            let s = soft(tape)?;
            tape.straight_through(h, s)?
        }
    };
    let w_ninfo = tape.one_minus(w_info);
    let x_info = tape.mul(w_info, x)?;
    let x_ninfo = tape.mul(w_ninfo, x)?;
    Ok(SegregatedFeatures { x_info, x_ninfo, scores, w_info, w_ninfo })
}

/// Contrast-based cross-attention over spatial tokens.
pub fn fam_forward<F: Element>(tape: &mut Tape<F>, seg: &SegregatedFeatures) -> Result<Var> {
    fam_forward_with(tape, seg, KeyRule::Contrast)
}

pub fn fam_forward_with<F: Element>(tape: &mut Tape<F>, seg: &SegregatedFeatures, key: KeyRule) -> Result<Var> {
    let shape = tape.shape(seg.x_info).to_vec();
    if shape.len() != 4 || tape.shape(seg.x_ninfo) != shape.as_slice() {
        return Err(TensorError::Shape(format!(
            "segregated maps differ: {:?} vs {:?}",
            shape,
            tape.shape(seg.x_ninfo)
        ))
        .into());
    }
    let (h, w) = (shape[2], shape[3]);
    let q = tape.add(seg.x_info, seg.x_ninfo)?;
    let k = match key {
        KeyRule::Contrast => tape.sub(seg.x_info, seg.x_ninfo)?,
        KeyRule::Flipped => tape.add(seg.x_info, seg.x_ninfo)?,
    };
    let q = attention::tokenize(tape, q)?;
    let k = attention::tokenize(tape, k)?;
    let v = attention::tokenize(tape, seg.x_info)?;
    let out = attention::scaled_dot_attention(tape, q, k, v)?;
    attention::untokenize(tape, out, h, w)
}

/// `FAM(FEM(x)) + x`.
pub fn fea_forward<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    p: &FeaVars,
    padding: Padding,
    kappa: f64,
    mode: MaskMode,
) -> Result<FeaOutput> {
    let seg = fem_forward(tape, x, p, padding, kappa, mode)?;
    let aggregated = fam_forward(tape, &seg)?;
    let output = tape.add(aggregated, x)?;
    Ok(FeaOutput { seg, aggregated, output })
}

/// Largest deviation between `Q·Kᵀ` (as FAM forms it under `key`) and the
/// four-term expansion `I·Iᵀ − I·Nᵀ + N·Iᵀ − N·Nᵀ`, for token matrices
/// `info`/`ninfo` of shape `[.., T, d]`.
pub fn qk_expansion_deviation<F: Element>(info: &Tensor<F>, ninfo: &Tensor<F>, key: KeyRule) -> Result<F> {
    if info.shape() != ninfo.shape() || info.rank() < 2 {
        return Err(
            TensorError::Shape(format!("token matrices differ: {:?} vs {:?}", info.shape(), ninfo.shape())).into()
        );
    }
    let q = ops::add(info, ninfo)?;
    let k = match key {
        KeyRule::Contrast => ops::sub(info, ninfo)?,
        KeyRule::Flipped => ops::add(info, ninfo)?,
    };
    let qk = ops::matmul_nt(&q, &k)?;
    let ii = ops::matmul_nt(info, info)?;
    let in_ = ops::matmul_nt(info, ninfo)?;
    let ni = ops::matmul_nt(ninfo, info)?;
    let nn = ops::matmul_nt(ninfo, ninfo)?;
    let expansion = ops::sub(&ops::add(&ops::sub(&ii, &in_)?, &ni)?, &nn)?;
    Ok(qk.max_abs_diff(&expansion)?)
}

pub fn qk_contrast_expansion_check<F: Element>(info: &Tensor<F>, ninfo: &Tensor<F>) -> Result<F> {
    qk_expansion_deviation(info, ninfo, KeyRule::Contrast)
}
