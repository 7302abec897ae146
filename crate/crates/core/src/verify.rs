//! Self-verification: finite-difference gradient checks of every block,
//! segregation invariants, the Q·Kᵀ expansion identity, attention and C2PCA
//! contracts, and metric brute-force comparisons.
//!
//! Each check reports pass/fail with a one-line detail. A [`Fault`] can be
//! injected to confirm the suite notices a broken implementation.

use std::time::Instant;

use aggrnet_tensor::{grad_check, ops, Element, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, ChannelAttention, Padding, SpatialAttention};
use crate::blocks::{C2pca, C2psa, C3k2, ConvBlock, Sppf};
use crate::error::Result;
use crate::fea::{self, FeaState, FeaVars, KeyRule, MaskMode, SegregatedFeatures};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, Mode, ParamStore, Registry};

pub const GRAD_TOL: f64 = 1e-4;
pub const QK_TOL_F32: f64 = 1e-5;
pub const QK_TOL_F64: f64 = 1e-10;
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Build FAM keys as `info + ninfo`.
    FlipKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    /// Random instances for the segregation and metric checks.
    pub trials: usize,
    pub qk_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, fault: None, trials: 1000, qk_trials: 100 }
    }
}

fn key_rule(fault: Option<Fault>) -> KeyRule {
    match fault {
        Some(Fault::FlipKey) => KeyRule::Flipped,
        None => KeyRule::Contrast,
    }
}

/// Everything, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = grad_suite(opts.seed);
    out.push(segregation_invariants(opts.trials, opts.seed));
    out.extend(qk_identity(opts.qk_trials, opts.seed, opts.fault));
    out.push(attention_contracts(opts.seed, opts.fault));
    out.push(c2pca_structure(opts.seed));
    out.push(metric_oracles(opts.trials, opts.seed));
    out
}

// ---------------------------------------------------------------------------
// gradient checks

/// Finite-difference check of a registered module. The scalar objective is
/// `Σ R ⊙ forward(x)` for a fixed random `R`; inputs are `x` and every
/// learnable tensor of the module.
pub fn module_grad_check<M>(
    build: impl FnOnce(&mut Registry) -> Result<M>,
    forward: impl Fn(&M, &mut Ctx<'_, f64>, Var) -> Result<Var>,
    input_shape: &[usize],
    mode: Mode,
    seed: u64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    let mut reg = Registry::new();
    let module = build(&mut reg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store: ParamStore<f64> = reg.materialize(&mut rng);
    let ids: Vec<_> = store.learnable_ids().collect();
    let x = Tensor::randn(input_shape.to_vec(), &mut rng);

    let out_shape = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, mode);
        let xv = ctx.tape.constant(x.clone());
        let y = forward(&module, &mut ctx, xv)?;
        tape.shape(y).to_vec()
    };
    let probe = Tensor::randn(out_shape, &mut rng);

    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> aggrnet_tensor::Result<Var> {
        let mut ctx = Ctx::new(tape, &store, mode);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            ctx.bind(id, v);
        }
        let y = forward(&module, &mut ctx, vars[0]).map_err(to_tensor_err)?;
        let r = ctx.tape.constant(probe.clone());
        let prod = ctx.tape.mul(y, r)?;
        ctx.tape.sum_all(prod)
    };
    Ok(grad_check(f, &inputs, &GradCheckOptions { eps: 1e-5, max_coords, seed })?)
}

fn to_tensor_err(e: crate::Error) -> aggrnet_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => aggrnet_tensor::TensorError::Usage(other.to_string()),
    }
}

/// Full model + cross-entropy on a small batch. Checks `max_coords`
/// coordinates of the input and of every learnable tensor.
pub fn model_grad_check(cfg: &ModelConfig, batch: usize, seed: u64, max_coords: usize) -> Result<GradCheckReport> {
    let model = Model::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store: ParamStore<f64> = model.init_params(&mut rng);
    let ids: Vec<_> = store.learnable_ids().collect();
    let x = Tensor::rand_uniform(vec![batch, cfg.in_channels, cfg.input_size, cfg.input_size], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    let mode = Mode::train(MaskMode::Soft);
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> aggrnet_tensor::Result<Var> {
        let mut ctx = Ctx::new(tape, &store, mode);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            ctx.bind(id, v);
        }
        let logits = model.forward(&mut ctx, vars[0]).map_err(to_tensor_err)?;
        ctx.tape.cross_entropy(logits, &labels)
    };
    Ok(grad_check(f, &inputs, &GradCheckOptions { eps: 1e-5, max_coords: Some(max_coords), seed })?)
}

/// A tiny model configuration for gradient checks.
pub fn grad_check_model_config(shape_index: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    let (size, widths) = match shape_index % 3 {
        0 => (16, vec![4, 8, 8, 16, 16]),
        1 => (12, vec![4, 4, 8, 8, 12]),
        _ => (20, vec![6, 8, 12, 16, 16]),
    };
    cfg.input_size = size;
    cfg.stage_widths = widths;
    cfg.num_classes = 3;
    cfg
}

const BLOCK_SHAPES: [[usize; 4]; 3] = [[2, 4, 5, 5], [1, 6, 4, 3], [3, 8, 3, 4]];

fn fam_grad_check(shape: &[usize], seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info = Tensor::randn(shape.to_vec(), &mut rng);
    let ninfo = Tensor::randn(shape.to_vec(), &mut rng);
    let probe = Tensor::randn(shape.to_vec(), &mut rng);
    let f = |tape: &mut Tape<f64>, v: &[Var]| -> aggrnet_tensor::Result<Var> {
        let seg = SegregatedFeatures { x_info: v[0], x_ninfo: v[1], scores: v[0], w_info: v[0], w_ninfo: v[1] };
        let y = fea::fam_forward(tape, &seg).map_err(to_tensor_err)?;
        let r = tape.constant(probe.clone());
        let p = tape.mul(y, r)?;
        tape.sum_all(p)
    };
    Ok(grad_check(f, &[info, ninfo], &GradCheckOptions { seed, ..Default::default() })?)
}

fn ops_grad_check(i: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = BLOCK_SHAPES[i];
    let x = Tensor::randn(vec![n, c, h, w], &mut rng);
    let y = Tensor::randn(vec![1, c, 1, w], &mut rng);
    let k = Tensor::randn(vec![2, c, 3, 3], &mut rng);
    let m = Tensor::randn(vec![w, 3], &mut rng);
    let labels: Vec<usize> = (0..n * c * h).map(|j| j % 3).collect();
    let f = |t: &mut Tape<f64>, v: &[Var]| -> aggrnet_tensor::Result<Var> {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[0])?;
        let s = t.sigmoid(b);
        let e = t.silu(s);
        let q = t.sub(e, v[1])?;
        let den = t_one_plus_sq(t, v[1])?;
        let d = t.div(q, den)?;
        let sm = t.softmax(d, 3)?;
        let conv = t.conv2d(d, v[2], None, 1, 1)?;
        let pool = t.maxpool2d(conv, 3, 1, 1)?;
        let pad = t.pad_circular(sm, 1)?;
        let mm = t.reshape(d, &[n * c * h, w])?;
        let mm = t.matmul(mm, v[3])?;
        let ce = t.cross_entropy(mm, &labels)?;
        let mx = t.max_axes(pool, &[1], true)?;
        let parts = [t.sum_all(pad)?, t.sum_all(mx)?, ce, t.sum_all(sm)?];
        let damped = t.scale(parts[0], 0.01);
        let small = t.exp(damped);
        let tot = t.add(small, parts[1])?;
        let tot = t.add(tot, parts[2])?;
        let p3 = t.powf(parts[3], 2.0);
        t.add(tot, p3)
    };
    Ok(grad_check(f, &[x, y, k, m], &GradCheckOptions { seed, max_coords: Some(24), ..Default::default() })?)
}

fn t_one_plus_sq(t: &mut Tape<f64>, v: Var) -> aggrnet_tensor::Result<Var> {
    let sq = t.mul(v, v)?;
    Ok(t.add_scalar(sq, 1.0))
}

fn report_detail(reports: &[GradCheckReport]) -> (bool, String) {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passes(GRAD_TOL));
    let coords: usize = reports.iter().map(|r| r.coords_checked).sum();
    (passed, format!("max rel err {worst:.2e} over {} shapes, {coords} coords", reports.len()))
}

fn fea_module(reg: &mut Registry, c: usize) -> Result<FeaState> {
    FeaState::register(reg, "fea", c, fea::DEFAULT_KAPPA, 3, 16)
}

/// Gradient checks of every primitive and block on three shapes each.
pub fn grad_suite(seed: u64) -> Vec<Check> {
    let soft = Mode::train(MaskMode::Soft);
    let mut checks = Vec::new();
    let mut block = |name: &str, run: &dyn Fn(usize, u64) -> Result<GradCheckReport>| {
        let start = Instant::now();
        let r: Result<Vec<_>> = (0..3).map(|i| run(i, seed.wrapping_add(i as u64))).collect();
        let c = Check::from_result(
            format!("grad/{name}"),
            r.map(|rs| {
                let (p, d) = report_detail(&rs);
                (p, format!("{d} ({:.1}s)", start.elapsed().as_secs_f64()))
            }),
        );
        checks.push(c);
    };
    block("ops", &|i, s| ops_grad_check(i, s));
    block("spatial_attention", &|i, s| {
        let pad = if i == 1 { Padding::Circular } else { Padding::Zero };
        module_grad_check(
            |r| {
                let mut sa = SpatialAttention::register(r, "sa", 3)?;
                sa.padding = pad;
                Ok(sa)
            },
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            None,
        )
    });
    block("channel_attention", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| Ok(ChannelAttention::register(r, "ca", c, 16)),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            None,
        )
    });
    block("fem_soft", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| fea_module(r, c),
            |m, ctx, x| {
                let vars = m.bind(ctx);
                let seg = fea::fem_forward(ctx.tape, x, &vars, m.sa.padding, m.kappa, MaskMode::Soft)?;
                Ok(ctx.tape.concat(&[seg.x_info, seg.x_ninfo], 1)?)
            },
            &BLOCK_SHAPES[i],
            soft,
            s,
            None,
        )
    });
    block("fam", &|i, s| fam_grad_check(&BLOCK_SHAPES[i], s));
    block("fea_soft", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(|r| fea_module(r, c), |m, ctx, x| m.forward(ctx, x), &BLOCK_SHAPES[i], soft, s, None)
    });
    block("conv_block", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        let stride = 1 + i % 2;
        let k = if i == 2 { 1 } else { 3 };
        module_grad_check(
            |r| Ok(ConvBlock::register(r, "cb", c, 5, k, stride)),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            None,
        )
    });
    block("c3k2", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| C3k2::register(r, "c3k2", c, 4, i % 2 + 1),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            Some(16),
        )
    });
    block("sppf", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| Sppf::register(r, "sppf", c, c),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            Some(24),
        )
    });
    block("c2psa", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| Ok(C2psa::register(r, "c2psa", c)),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            Some(16),
        )
    });
    block("c2pca", &|i, s| {
        let c = BLOCK_SHAPES[i][1];
        module_grad_check(
            |r| Ok(C2pca::register(r, "c2pca", c, 16)),
            |m, ctx, x| m.forward(ctx, x),
            &BLOCK_SHAPES[i],
            soft,
            s,
            Some(16),
        )
    });
    block("model_ce", &|i, s| model_grad_check(&grad_check_model_config(i), 2 + i % 2, s, 2));
    checks
}

// ---------------------------------------------------------------------------
// segregation

fn random_fea_vars(tape: &mut Tape<f32>, c: usize, k: usize, tau: f32, rng: &mut ChaCha8Rng) -> FeaVars {
    let h = attention::hidden_width(c, 16);
    FeaVars {
        sa_w: tape.constant(Tensor::randn(vec![1, 2, k, k], rng)),
        sa_b: tape.constant(Tensor::randn(vec![1], rng)),
        ca_w1: tape.constant(Tensor::randn(vec![h, c], rng)),
        ca_w2: tape.constant(Tensor::randn(vec![c, h], rng)),
        tau: tape.constant(Tensor::full(vec![1], tau)),
    }
}

/// Complementarity, disjoint support and τ-monotonicity on random inputs.
pub fn segregation_invariants(trials: usize, seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9);
        let mut worst = [0.0f64; 3];
        let mut violations = 0usize;
        for _ in 0..trials {
            let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=5), rng.gen_range(1..=5)];
            let c = shape[1];
            let x = Tensor::<f32>::randn(shape, &mut rng);
            let tau: f32 = rng.gen_range(0.01..0.99);
            let raise: f32 = rng.gen_range(0.0..0.3);
            let vseed: u64 = rng.gen();
            for mode in [MaskMode::Hard, MaskMode::Soft] {
                let mut w_at = Vec::new();
                for t in [tau, (tau + raise).min(0.99)] {
                    let mut tape = Tape::new();
                    let vars = random_fea_vars(&mut tape, c, 3, t, &mut ChaCha8Rng::seed_from_u64(vseed));
                    let xv = tape.constant(x.clone());
                    let seg = fea::fem_forward(&mut tape, xv, &vars, Padding::Zero, fea::DEFAULT_KAPPA, mode)?;
                    let wi = tape.value(seg.w_info);
                    let wn = tape.value(seg.w_ninfo);
                    let xi = tape.value(seg.x_info);
                    let xn = tape.value(seg.x_ninfo);
                    for j in 0..x.numel() {
                        let wsum = (wi.data()[j] + wn.data()[j] - 1.0).abs() as f64;
                        let xsum = (xi.data()[j] + xn.data()[j] - x.data()[j]).abs() as f64;
                        let slot = if mode == MaskMode::Hard { 0 } else { 1 };
                        worst[slot] = worst[slot].max(wsum);
                        worst[2] = worst[2].max(xsum);
                        if mode == MaskMode::Hard
                            && (xi.data()[j] * xn.data()[j] != 0.0 || !(wi.data()[j] == 0.0 || wi.data()[j] == 1.0))
                        {
                            violations += 1;
                        }
                    }
                    w_at.push(wi.clone());
                }
                violations += w_at[0].data().iter().zip(w_at[1].data()).filter(|(a, b)| b > a).count();
            }
        }
        let passed = worst[0] == 0.0 && worst[1] <= 1e-6 && worst[2] <= 1e-5 && violations == 0;
        Ok((
            passed,
            format!(
                "{trials} inputs: |w_info+w_ninfo-1| hard {:.1e} soft {:.1e}; |x_info+x_ninfo-x| {:.1e}; {violations} support/monotonicity violations",
                worst[0], worst[1], worst[2]
            ),
        ))
    };
    Check::from_result("segregation", run())
}

// ---------------------------------------------------------------------------
// Q·Kᵀ identity

fn qk_worst<F: Element>(trials: usize, seed: u64, rule: KeyRule) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let i = Tensor::<F>::rand_uniform(shape.clone(), -1.0, 1.0, &mut rng);
        let n = Tensor::<F>::rand_uniform(shape, -1.0, 1.0, &mut rng);
        worst = worst.max(fea::qk_expansion_deviation(&i, &n, rule)?.to_f64_lossy());
    }
    Ok(worst)
}

pub fn qk_identity(trials: usize, seed: u64, fault: Option<Fault>) -> Vec<Check> {
    let rule = key_rule(fault);
    let f32c = qk_worst::<f32>(trials, seed, rule)
        .map(|w| (w <= QK_TOL_F32, format!("{trials} token sets, max deviation {w:.2e} (tol {QK_TOL_F32:.0e})")));
    let f64c = qk_worst::<f64>(trials, seed, rule)
        .map(|w| (w <= QK_TOL_F64, format!("{trials} token sets, max deviation {w:.2e} (tol {QK_TOL_F64:.0e})")));
    vec![Check::from_result("qk_identity/f32", f32c), Check::from_result("qk_identity/f64", f64c)]
}

// ---------------------------------------------------------------------------
// attention contracts

/// Softmax rows, convex combination of values, and the `x_ninfo = 0`
/// collapse of FAM to plain self-attention, against a loop computation.
pub fn attention_contracts(seed: u64, fault: Option<Fault>) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77);
        let (mut row_err, mut hull_err, mut collapse_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..50 {
            let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let t = h * w;
            let info = Tensor::<f64>::randn(vec![n, c, h, w], &mut rng);
            let ninfo = Tensor::<f64>::randn(vec![n, c, h, w], &mut rng);

            let mut tape = Tape::new();
            let iv = tape.constant(info.clone());
            let nv = tape.constant(ninfo.clone());
            let q = tape.add(iv, nv)?;
            let k = tape.sub(iv, nv)?;
            let (qt, kt, vt) = (
                attention::tokenize(&mut tape, q)?,
                attention::tokenize(&mut tape, k)?,
                attention::tokenize(&mut tape, iv)?,
            );
            let a = attention::attention_weights(&mut tape, qt, kt)?;
            let seg = SegregatedFeatures { x_info: iv, x_ninfo: nv, scores: iv, w_info: iv, w_ninfo: nv };
            let out = fea::fam_forward_with(&mut tape, &seg, key_rule(fault))?;
            let out_tok = attention::tokenize(&mut tape, out)?;
            let (a, v, o) = (tape.value(a), tape.value(vt), tape.value(out_tok));
            for b in 0..n {
                for r in 0..t {
                    let row = &a.data()[(b * t + r) * t..(b * t + r + 1) * t];
                    row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                    if row.iter().any(|&p| p < 0.0) {
                        row_err = f64::INFINITY;
                    }
                    for d in 0..c {
                        let col = (0..t).map(|j| v.data()[(b * t + j) * c + d]);
                        let (lo, hi) =
                            col.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                        let combo: f64 = row.iter().zip(col).map(|(p, x)| p * x).sum();
                        let got = o.data()[(b * t + r) * c + d];
                        let outside = (lo - got).max(got - hi).max(0.0);
                        hull_err = hull_err.max(outside).max((combo - got).abs());
                    }
                }
            }

            // x_ninfo = 0: plain softmax(I·Iᵀ/√C)·I
            let mut tape = Tape::new();
            let iv = tape.constant(info.clone());
            let zv = tape.constant(info.zeros_like());
            let seg = SegregatedFeatures { x_info: iv, x_ninfo: zv, scores: iv, w_info: iv, w_ninfo: zv };
            let out = fea::fam_forward_with(&mut tape, &seg, key_rule(fault))?;
            let got = tape.value(out);
            let oracle = self_attention_oracle(&info);
            collapse_err = collapse_err.max(got.max_abs_diff(&oracle)?);
        }
        let passed = row_err <= 1e-6 && hull_err <= 1e-6 && collapse_err <= 1e-6;
        Ok((
            passed,
            format!(
                "row-sum err {row_err:.1e}, convex-combination err {hull_err:.1e}, collapse err {collapse_err:.1e}"
            ),
        ))
    };
    Check::from_result("attention_contracts", run())
}

/// Loop computation of single-head self-attention over spatial tokens.
fn self_attention_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, t) = (s[0], s[1], s[2] * s[3]);
    let at = |b: usize, ch: usize, p: usize| x.data()[(b * c + ch) * t + p];
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for i in 0..t {
            let logits: Vec<f64> =
                (0..t).map(|j| (0..c).map(|ch| at(b, ch, i) * at(b, ch, j)).sum::<f64>() / (c as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                out[(b * c + ch) * t + i] = (0..t).map(|j| e[j] / z * at(b, ch, j)).sum();
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

// ---------------------------------------------------------------------------
// C2PCA structure

pub fn c2pca_structure(seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2);
        let mut failures = Vec::new();
        for (trial, &c) in [2usize, 5, 8].iter().enumerate() {
            let mut reg = Registry::new();
            let block = C2pca::register(&mut reg, "c2pca", c, 16);
            let mut store: ParamStore<f64> = reg.materialize(&mut rng);
            let x = Tensor::randn(vec![2, c, 3, 4], &mut rng);

            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::eval());
            let xv = ctx.tape.constant(x.clone());
            let parts = block.forward_detailed(&mut ctx, xv)?;
            let out = tape.value(parts.output);
            if out.shape() != [2, 2 * c, 3, 4] {
                failures.push(format!("trial {trial}: output shape {:?}", out.shape()));
            }
            let xa = ops::slice(out, 1, 0, c)?;
            let split = ops::slice(tape.value(parts.expanded), 1, 0, c)?;
            if !xa.bit_eq(&split) {
                failures.push(format!("trial {trial}: X_A half differs from the split"));
            }

            for id in [
                block.ca.w1,
                block.ca.w2,
                block.ffn.fc1.weight,
                block.ffn.fc1.bias,
                block.ffn.fc2.weight,
                block.ffn.fc2.bias,
            ] {
                let z = store.get(id).zeros_like();
                store.set(id, z)?;
            }
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::eval());
            let xv = ctx.tape.constant(x.clone());
            let parts = block.forward_detailed(&mut ctx, xv)?;
            let xb = tape.value(parts.x_b);
            let expected = xb.map(|v| 1.5 * v);
            let err = tape.value(parts.x_b_out).max_abs_diff(&expected)?;
            if err > 1e-12 {
                failures.push(format!("trial {trial}: zero-weight right half off by {err:.1e}"));
            }
            let xa = ops::slice(tape.value(parts.output), 1, 0, c)?;
            if !xa.bit_eq(tape.value(parts.x_a)) {
                failures.push(format!("trial {trial}: zero-weight X_A changed"));
            }
        }
        Ok((
            failures.is_empty(),
            if failures.is_empty() {
                "2C channels, X_A pass-through, 1.5·X_B closed form".into()
            } else {
                failures.join("; ")
            },
        ))
    };
    Check::from_result("c2pca_structure", run())
}

// ---------------------------------------------------------------------------
// metrics

mod oracle {
    /// `1 − Σ(t−p)² / ((1/N) Σ_a Σ_b (t_a − p_b)²)`
    pub fn qwk(t: &[usize], p: &[usize]) -> f64 {
        let n = t.len() as f64;
        let sq = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
        let num: f64 = t.iter().zip(p).map(|(&a, &b)| sq(a, b)).sum();
        let den: f64 = t.iter().map(|&a| p.iter().map(|&b| sq(a, b)).sum::<f64>()).sum::<f64>() / n;
        if den == 0.0 {
            1.0
        } else {
            1.0 - num / den
        }
    }

    /// Fraction of (positive, negative) pairs ordered correctly, ties half.
    pub fn auc(scores: &[f64], t: &[usize], k: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut defined = 0;
        for c in 0..k {
            let (mut good, mut pairs) = (0.0, 0.0);
            for i in 0..t.len() {
                for j in 0..t.len() {
                    if t[i] == c && t[j] != c {
                        pairs += 1.0;
                        let (a, b) = (scores[i * k + c], scores[j * k + c]);
                        good += if a > b {
                            1.0
                        } else if a == b {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            if pairs > 0.0 {
                sum += good / pairs;
                defined += 1;
            }
        }
        (defined > 0).then(|| sum / defined as f64)
    }

    /// Per-class precision/recall/F1 from raw label lists, and macro F1 over
    /// classes that occur.
    pub fn prf(t: &[usize], p: &[usize], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let (mut pr, mut re, mut f1) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
        let mut macro_sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64;
            let pp = p.iter().filter(|&&b| b == c).count() as f64;
            let ap = t.iter().filter(|&&a| a == c).count() as f64;
            pr[c] = if pp > 0.0 { tp / pp } else { 0.0 };
            re[c] = if ap > 0.0 { tp / ap } else { 0.0 };
            f1[c] = if pr[c] + re[c] > 0.0 { 2.0 * pr[c] * re[c] / (pr[c] + re[c]) } else { 0.0 };
            if pp + ap > 0.0 {
                macro_sum += f1[c];
                present += 1;
            }
        }
        (pr, re, f1, macro_sum / present.max(1) as f64)
    }
}

pub fn metric_oracles(trials: usize, seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7);
        let mut worst = 0.0f64;
        let mut mismatches = Vec::new();
        for trial in 0..trials {
            let k = rng.gen_range(2..=5);
            let n = rng.gen_range(2..=50);
            let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();

            let conf = metrics::confusion_matrix(&t, &p, k)?;
            let acc = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64;
            let s = metrics::precision_recall_f1(&conf);
            let (pr, re, f1, mf1) = oracle::prf(&t, &p, k);
            let mae = t.iter().zip(&p).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n as f64;
            let mut diffs = vec![
                (metrics::accuracy(&conf) - acc).abs(),
                (s.macro_f1 - mf1).abs(),
                (metrics::qwk(&t, &p, k)? - oracle::qwk(&t, &p)).abs(),
                (metrics::mae(&t, &p)? - mae).abs(),
            ];
            for c in 0..k {
                diffs.extend([(s.precision[c] - pr[c]).abs(), (s.recall[c] - re[c]).abs(), (s.f1[c] - f1[c]).abs()]);
            }
            match (metrics::auc_macro_ovr(&scores, &t, k), oracle::auc(&scores, &t, k)) {
                (Ok(a), Some(b)) => diffs.push((a - b).abs()),
                (Err(_), None) => {}
                (a, b) => mismatches.push(format!("trial {trial}: AUC defined-ness differs ({:?} vs {b:?})", a.ok())),
            }
            if (metrics::qwk(&t, &t, k)? - 1.0).abs() > 0.0 {
                mismatches.push(format!("trial {trial}: qwk(x, x) != 1"));
            }
            worst = diffs.into_iter().fold(worst, f64::max);
        }
        let passed = worst <= METRIC_TOL && mismatches.is_empty();
        let mut detail = format!("{trials} instances, max deviation {worst:.1e}");
        if !mismatches.is_empty() {
            detail.push_str(&format!("; {}", mismatches.join("; ")));
        }
        Ok((passed, detail))
    };
    Check::from_result("metric_oracles", run())
}
