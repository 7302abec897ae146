//! Acceptance suite: one PASS/FAIL line per criterion (criterion 10 is
//! informational and prints INFO). Exits non-zero if a gating criterion
//! fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aggrnet_core::attention::{self, hidden_width, Padding};
use aggrnet_core::blocks::C2pca;
use aggrnet_core::checkpoint::{self, Archive};
use aggrnet_core::data;
use aggrnet_core::fea::{self, FeaVars, KeyRule, MaskMode, SegregatedFeatures};
use aggrnet_core::metrics;
use aggrnet_core::model::{Model, ModelConfig};
use aggrnet_core::params::{Ctx, Mode, ParamStore, Registry};
use aggrnet_core::tensor::io::{self as tio, Record};
use aggrnet_core::tensor::{Element, Tape, Tensor};
use aggrnet_core::train::{TrainConfig, Trainer};
use aggrnet_core::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 120.0;
const SOFT_SUM_TOL: f64 = 1e-6;
const RECON_TOL: f64 = 1e-5;
const QK_TOL_F32: f64 = 1e-5;
const QK_TOL_F64: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-6;
const COLLAPSE_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;
const OVERFIT_LOSS: f64 = 0.05;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_BUDGET_SECS: f64 = 300.0;
const HELDOUT_ACC: f64 = 0.90;
const FULL_PARAMS: f64 = 38.65e6;
const FULL_PARAMS_TOL: f64 = 0.15;

const VARIANT_LABELS: [&str; 6] = [
    "YOLOv11 classification backbone with C2PSA",
    "YOLOv11 classification backbone with C2PCA",
    "YOLOv11 + C2PCA + FEA@1",
    "YOLOv11 + C2PCA + FEA@1,2",
    "YOLOv11 + C2PCA + FEA@1,2,3",
    "AGGRNet/Ours (YOLOv11 + C2PCA + FEA@1,2,3 + SPPF)",
];

fn main() {
    let criteria: [(&str, bool, fn() -> Outcome); 10] = [
        ("gradient suite", true, c1_gradients),
        ("segregation invariants", true, c2_segregation),
        ("QK contrast identity", true, c3_qk_identity),
        ("attention contracts", true, c4_attention),
        ("C2PCA structure", true, c5_c2pca),
        ("metric oracles", true, c6_metrics),
        ("trainability", true, c7_trainability),
        ("ablation grid", true, c8_ablation),
        ("persistence", true, c9_persistence),
        ("full preset size", false, c10_full_preset),
    ];
    let mut failed = Vec::new();
    for (i, &(name, gating, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panicked: {}", p.downcast_ref::<String>().cloned().unwrap_or_default())),
        };
        let tag = match (passed, gating) {
            (true, true) => "PASS",
            (false, true) => "FAIL",
            (true, false) => "INFO",
            (false, false) => "INFO(out of range)",
        };
        println!("{tag} [{}] {name}: {detail} ({:.1}s)", i + 1, start.elapsed().as_secs_f64());
        if gating && !passed {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        println!("gating criteria failed: {failed:?}");
        std::process::exit(1);
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aggrnet")
}

// 1 ------------------------------------------------------------------------

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let checks = verify::grad_suite(0);
    let secs = start.elapsed().as_secs_f64();
    let wanted = [
        "ops",
        "spatial_attention",
        "channel_attention",
        "fem_soft",
        "fam",
        "fea_soft",
        "conv_block",
        "c3k2",
        "sppf",
        "c2psa",
        "c2pca",
        "model_ce",
    ];
    let missing: Vec<&str> =
        wanted.iter().copied().filter(|w| !checks.iter().any(|c| c.name == format!("grad/{w}"))).collect();
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed || !c.detail.contains("over 3 shapes"))
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    let ok = missing.is_empty() && bad.is_empty() && secs < GRAD_BUDGET_SECS && verify::GRAD_TOL <= GRAD_TOL;
    Ok((
        ok,
        format!("{} blocks × 3 shapes at rel err ≤ {GRAD_TOL:e}; failing {bad:?}; missing {missing:?}", checks.len()),
    ))
}

// 2 ------------------------------------------------------------------------

struct FemWeights<F: Element> {
    sa_w: Tensor<F>,
    sa_b: Tensor<F>,
    w1: Tensor<F>,
    w2: Tensor<F>,
}

fn fem_weights<F: Element>(c: usize, k: usize, rng: &mut ChaCha8Rng) -> FemWeights<F> {
    let h = hidden_width(c, 16);
    FemWeights {
        sa_w: Tensor::rand_uniform(vec![1, 2, k, k], -1.0, 1.0, rng),
        sa_b: Tensor::rand_uniform(vec![1], -0.5, 0.5, rng),
        w1: Tensor::rand_uniform(vec![h, c], -1.0, 1.0, rng),
        w2: Tensor::rand_uniform(vec![c, h], -1.0, 1.0, rng),
    }
}

/// `(w_info, w_ninfo, x_info, x_ninfo)` values.
fn fem_values<F: Element>(
    x: &Tensor<F>,
    w: &FemWeights<F>,
    tau: f64,
    mode: MaskMode,
) -> Result<[Vec<f64>; 4], aggrnet_core::Error> {
    let mut tape = Tape::<F>::new();
    let xv = tape.constant(x.clone());
    let vars = FeaVars {
        sa_w: tape.param(w.sa_w.clone()),
        sa_b: tape.param(w.sa_b.clone()),
        ca_w1: tape.param(w.w1.clone()),
        ca_w2: tape.param(w.w2.clone()),
        tau: tape.param(Tensor::from_f64(vec![1], &[tau])?),
    };
    let seg = fea::fem_forward(&mut tape, xv, &vars, Padding::Zero, fea::DEFAULT_KAPPA, mode)?;
    let v = |var| tape.value(var).to_f64_vec();
    Ok([v(seg.w_info), v(seg.w_ninfo), v(seg.x_info), v(seg.x_ninfo)])
}

fn c2_segregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut hard_sum, mut soft_sum, mut recon) = (0.0f64, 0.0f64, 0.0f64);
    let (mut overlap, mut nonmono) = (0usize, 0usize);
    let trials = 1000;
    for _ in 0..trials {
        let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let scale = rng.gen_range(0.1..4.0);
        let x = Tensor::<f32>::randn(shape.clone(), &mut rng).map(|v| v * scale as f32);
        let w = fem_weights::<f32>(shape[1], if rng.gen_bool(0.5) { 3 } else { 7 }, &mut rng);
        let t1: f64 = rng.gen_range(0.01..0.99);
        let t2: f64 = rng.gen_range(t1..=0.99);
        let xs = x.to_f64_vec();
        for mode in [MaskMode::Hard, MaskMode::Soft] {
            let [wi, wn, xi, xn] = fem_values(&x, &w, t1, mode)?;
            let [wi2, ..] = fem_values(&x, &w, t2, mode)?;
            for j in 0..xs.len() {
                let s = (wi[j] + wn[j] - 1.0).abs();
                match mode {
                    MaskMode::Hard => {
                        hard_sum = hard_sum.max(s);
                        overlap += usize::from(xi[j] * xn[j] != 0.0);
                    }
                    _ => soft_sum = soft_sum.max(s),
                }
                recon = recon.max((xi[j] + xn[j] - xs[j]).abs());
                nonmono += usize::from(wi2[j] > wi[j]);
            }
        }
    }
    let ok = hard_sum == 0.0 && soft_sum <= SOFT_SUM_TOL && recon <= RECON_TOL && overlap == 0 && nonmono == 0;
    Ok((
        ok,
        format!(
            "{trials} inputs (f32): hard |Σw−1| {hard_sum:e}, soft {soft_sum:.1e} (≤{SOFT_SUM_TOL:e}), |x_info+x_ninfo−x| {recon:.1e} (≤{RECON_TOL:e}), {overlap} overlaps, {nonmono} τ-monotonicity violations"
        ),
    ))
}

// 3 ------------------------------------------------------------------------

fn c3_qk_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut d32, mut d64) = (0.0f64, 0.0f64);
    let sets = 100;
    for _ in 0..sets {
        let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=16), rng.gen_range(1..=8)];
        let info = Tensor::<f64>::randn(shape.clone(), &mut rng);
        let ninfo = Tensor::<f64>::randn(shape, &mut rng);
        d64 = d64.max(fea::qk_expansion_deviation(&info, &ninfo, KeyRule::Contrast)?);
        let dev32 = fea::qk_expansion_deviation(&info.cast::<f32>(), &ninfo.cast::<f32>(), KeyRule::Contrast)?;
        d32 = d32.max(dev32 as f64);
    }
    // The same suite, with the key sign flipped, must fail and say where.
    let out = Command::new(bin()).args(["verify", "--inject-fault", "flip-key", "--trials", "50"]).output()?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    let caught = out.status.code() == Some(1) && stderr.contains("qk_identity");
    let ok = d32 <= QK_TOL_F32 && d64 <= QK_TOL_F64 && caught;
    Ok((
        ok,
        format!(
            "{sets} token sets: f32 {d32:.1e} (≤{QK_TOL_F32:e}), f64 {d64:.1e} (≤{QK_TOL_F64:e}); sign-flip mutation {}",
            if caught { "detected (exit 1)" } else { "NOT detected" }
        ),
    ))
}

// 4 ------------------------------------------------------------------------

/// Softmax weights of `q·kᵀ/√d` by loops, for one `[T,d]` batch entry.
fn softmax_oracle(q: &[f64], k: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut w = vec![0.0; t * t];
    for i in 0..t {
        let logits: Vec<f64> =
            (0..t).map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..t {
            w[i * t + j] = (logits[j] - m).exp() / z;
        }
    }
    w
}

/// `[C,H,W]` → `[T,C]` token rows.
fn tokens(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for ch in 0..c {
        for p in 0..t {
            out[p * c + ch] = x[ch * t + p];
        }
    }
    out
}

fn c4_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut row_err, mut hull_err, mut mix_err, mut collapse_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (c, h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let t = h * w;

        // Row sums, in the training precision.
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(Tensor::randn(vec![1, t, c], &mut rng).map(|v| v * 3.0));
        let k = tape.constant(Tensor::randn(vec![1, t, c], &mut rng).map(|v| v * 3.0));
        let a = attention::attention_weights(&mut tape, q, k)?;
        for row in tape.value(a).data().chunks(t) {
            row_err = row_err.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }

        // FAM output as a convex combination of V = tok(x_info).
        let x = Tensor::<f64>::randn(vec![1, c, h, w], &mut rng);
        let wts = fem_weights::<f64>(c, 3, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let vars = FeaVars {
            sa_w: tape.param(wts.sa_w.clone()),
            sa_b: tape.param(wts.sa_b.clone()),
            ca_w1: tape.param(wts.w1.clone()),
            ca_w2: tape.param(wts.w2.clone()),
            tau: tape.param(Tensor::from_f64(vec![1], &[rng.gen_range(0.2..0.8)])?),
        };
        let seg = fea::fem_forward(&mut tape, xv, &vars, Padding::Zero, fea::DEFAULT_KAPPA, MaskMode::Soft)?;
        let out = fea::fam_forward(&mut tape, &seg)?;
        let info = tokens(&tape.value(seg.x_info).to_f64_vec(), c, t);
        let ninfo = tokens(&tape.value(seg.x_ninfo).to_f64_vec(), c, t);
        let qt: Vec<f64> = info.iter().zip(&ninfo).map(|(a, b)| a + b).collect();
        let kt: Vec<f64> = info.iter().zip(&ninfo).map(|(a, b)| a - b).collect();
        let wmat = softmax_oracle(&qt, &kt, t, c);
        let got = tokens(&tape.value(out).to_f64_vec(), c, t);
        for i in 0..t {
            let row = &wmat[i * t..(i + 1) * t];
            mix_err = mix_err.max((row.iter().sum::<f64>() - 1.0).abs());
            for ch in 0..c {
                let want: f64 = (0..t).map(|j| row[j] * info[j * c + ch]).sum();
                mix_err = mix_err.max((got[i * c + ch] - want).abs());
                let lo = (0..t).map(|j| info[j * c + ch]).fold(f64::INFINITY, f64::min);
                let hi = (0..t).map(|j| info[j * c + ch]).fold(f64::NEG_INFINITY, f64::max);
                hull_err = hull_err.max(lo - got[i * c + ch]).max(got[i * c + ch] - hi);
            }
        }

        // x_ninfo = 0: plain self-attention of x with itself.
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros(x.shape().to_vec()));
        let ones = tape.constant(Tensor::ones(x.shape().to_vec()));
        let seg = SegregatedFeatures { x_info: xi, x_ninfo: zero, scores: ones, w_info: ones, w_ninfo: zero };
        let out = fea::fam_forward(&mut tape, &seg)?;
        let xt = tokens(&x.to_f64_vec(), c, t);
        let wmat = softmax_oracle(&xt, &xt, t, c);
        let got = tokens(&tape.value(out).to_f64_vec(), c, t);
        for i in 0..t {
            for ch in 0..c {
                let want: f64 = (0..t).map(|j| wmat[i * t + j] * xt[j * c + ch]).sum();
                collapse_err = collapse_err.max((got[i * c + ch] - want).abs());
            }
        }
    }
    let hull_ok = hull_err <= 1e-12 && mix_err <= 1e-12;
    let ok = row_err <= ROW_SUM_TOL && hull_ok && collapse_err <= COLLAPSE_TOL;
    Ok((
        ok,
        format!(
            "softmax row-sum err {row_err:.1e} (≤{ROW_SUM_TOL:e}); FAM = convex mix of V rows (mix err {mix_err:.1e}, hull excess {hull_err:.1e}); x_ninfo=0 collapse err {collapse_err:.1e} (≤{COLLAPSE_TOL:e})"
        ),
    ))
}

// 5 ------------------------------------------------------------------------

fn c5_c2pca() -> Outcome {
    let c = 6;
    let mut reg = Registry::new();
    let blk = C2pca::register(&mut reg, "h", c, 16);
    let mut store: ParamStore<f64> = reg.materialize(&mut ChaCha8Rng::seed_from_u64(5));
    let x = Tensor::<f64>::randn(vec![2, c, 3, 4], &mut ChaCha8Rng::seed_from_u64(6));

    let run = |store: &ParamStore<f64>| -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>), aggrnet_core::Error> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::train(MaskMode::Soft));
        let xv = ctx.tape.constant(x.clone());
        let o = blk.forward_detailed(&mut ctx, xv)?;
        Ok((tape.value(o.expanded).clone(), tape.value(o.x_b).clone(), tape.value(o.output).clone()))
    };
    let (expanded, _, output) = run(&store)?;
    let channels_ok = output.shape() == [2, 2 * c, 3, 4];
    // First C output channels are the first C expanded channels, bit for bit.
    let plane = 3 * 4;
    let mut passthrough_ok = true;
    for n in 0..2 {
        let src = &expanded.data()[n * 2 * c * plane..][..c * plane];
        let dst = &output.data()[n * 2 * c * plane..][..c * plane];
        passthrough_ok &= src.iter().zip(dst).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    for name in
        ["h.ca.mlp_w1", "h.ca.mlp_w2", "h.ffn.fc1.weight", "h.ffn.fc1.bias", "h.ffn.fc2.weight", "h.ffn.fc2.bias"]
    {
        let id = store.id(name).ok_or(format!("no parameter {name}"))?;
        let zeros = Tensor::zeros(store.get(id).shape().to_vec());
        store.set(id, zeros)?;
    }
    let (_, x_b, output) = run(&store)?;
    let mut closed_err = 0.0f64;
    for n in 0..2 {
        let xb = &x_b.data()[n * c * plane..][..c * plane];
        let active = &output.data()[(n * 2 * c + c) * plane..][..c * plane];
        for (a, b) in active.iter().zip(xb) {
            closed_err = closed_err.max((a - 1.5 * b).abs());
        }
    }
    let ok = channels_ok && passthrough_ok && closed_err <= 1e-12;
    Ok((
        ok,
        format!(
            "output {:?} for C={c}; X_A pass-through {}; zero weights → 1.5·X_B err {closed_err:.1e}",
            output.shape(),
            if passthrough_ok { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}

// 6 ------------------------------------------------------------------------

struct Brute {
    accuracy: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    macro_f1: f64,
    qwk: f64,
    mae: f64,
    auc: Option<f64>,
}

/// Everything from per-sample counting; no confusion matrix.
fn brute(t: &[usize], p: &[usize], scores: &[f64], k: usize) -> Brute {
    let n = t.len();
    let nf = n as f64;
    let accuracy = (0..n).filter(|&i| t[i] == p[i]).count() as f64 / nf;
    let (mut precision, mut recall, mut f1) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut present = 0usize;
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = (0..n).filter(|&i| t[i] == c && p[i] == c).count() as f64;
        let fp = (0..n).filter(|&i| t[i] != c && p[i] == c).count() as f64;
        let fneg = (0..n).filter(|&i| t[i] == c && p[i] != c).count() as f64;
        let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rc = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        precision[c] = pr;
        recall[c] = rc;
        f1[c] = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 };
        if tp + fp + fneg > 0.0 {
            present += 1;
            f1_sum += f1[c];
        }
    }
    let sq = |a: usize, b: usize| (a as f64 - b as f64).powi(2);
    let observed: f64 = (0..n).map(|i| sq(t[i], p[i])).sum::<f64>() / nf;
    let expected: f64 =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| sq(t[i], p[j])).sum::<f64>() / (nf * nf);
    let qwk = if expected == 0.0 { 1.0 } else { 1.0 - observed / expected };
    let mae = (0..n).map(|i| t[i].abs_diff(p[i]) as f64).sum::<f64>() / nf;
    let mut aucs = Vec::new();
    for c in 0..k {
        let pos: Vec<usize> = (0..n).filter(|&i| t[i] == c).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| t[i] != c).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &a in &pos {
            for &b in &neg {
                let (sa, sb) = (scores[a * k + c], scores[b * k + c]);
                wins += if sa > sb {
                    1.0
                } else if sa == sb {
                    0.5
                } else {
                    0.0
                };
            }
        }
        aucs.push(wins / (pos.len() * neg.len()) as f64);
    }
    let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
    Brute { accuracy, precision, recall, f1, macro_f1: f1_sum / present.max(1) as f64, qwk, mae, auc }
}

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut mismatches = Vec::new();
    let trials = 1000;
    for trial in 0..trials {
        let k = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=50);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let p: Vec<usize> = t.iter().map(|&l| if rng.gen_bool(0.5) { l } else { rng.gen_range(0..k) }).collect();
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let b = brute(&t, &p, &scores, k);

        let cm = metrics::confusion_matrix(&t, &p, k)?;
        let cs = metrics::precision_recall_f1(&cm);
        let mut diffs = vec![
            (metrics::accuracy(&cm) - b.accuracy).abs(),
            (cs.macro_f1 - b.macro_f1).abs(),
            (metrics::qwk(&t, &p, k)? - b.qwk).abs(),
            (metrics::mae(&t, &p)? - b.mae).abs(),
        ];
        for c in 0..k {
            diffs.push((cs.precision[c] - b.precision[c]).abs());
            diffs.push((cs.recall[c] - b.recall[c]).abs());
            diffs.push((cs.f1[c] - b.f1[c]).abs());
        }
        match (metrics::auc_macro_ovr(&scores, &t, k).ok(), b.auc) {
            (Some(x), Some(y)) => diffs.push((x - y).abs()),
            (None, None) => {}
            (x, y) => mismatches.push(format!("trial {trial}: auc {x:?} vs {y:?}")),
        }
        let d = diffs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        if metrics::qwk(&t, &t, k)? != 1.0 {
            mismatches.push(format!("trial {trial}: qwk(x,x) != 1"));
        }
    }
    let hand =
        [(vec![0, 1, 2], vec![1, 1, 3], 2.0 / 3.0), (vec![0, 3], vec![3, 0], 3.0), (vec![2, 2], vec![2, 2], 0.0)];
    for (t, p, want) in hand {
        if metrics::mae(&t, &p)? != want {
            mismatches.push(format!("mae({t:?},{p:?}) != {want}"));
        }
    }
    let ok = worst <= METRIC_TOL && mismatches.is_empty();
    Ok((
        ok,
        format!("{trials} instances (N≤50, K≤5): max deviation {worst:.1e} (≤{METRIC_TOL:e}); issues {mismatches:?}"),
    ))
}

// 7 ------------------------------------------------------------------------

fn c7_trainability() -> Outcome {
    let aggr = ModelConfig::toy();
    let pass_cfg = aggr.attention_block == aggrnet_core::model::AttentionBlock::C2pca
        && aggr.fea_positions == [1, 2, 3]
        && aggr.use_sppf;

    // Overfit one 32-sample batch.
    let batch = data::generate_synthetic(4, 8, 32, 32, 7, 0.0)?;
    let cfg = TrainConfig { batch_size: 32, seed: 7, mask_mode: MaskMode::Soft, ..TrainConfig::default() };
    let mut t = Trainer::<f32>::new(&aggr, &cfg)?;
    let start = Instant::now();
    let mut loss = f64::INFINITY;
    let mut epochs = 0;
    while epochs < OVERFIT_MAX_EPOCHS && loss >= OVERFIT_LOSS {
        loss = t.run_epoch(&batch)?;
        epochs += 1;
    }
    let overfit_secs = start.elapsed().as_secs_f64();
    let taus = t.model.tau_ids();
    let silent: Vec<String> =
        taus.iter().filter(|id| t.grad_norm_sum[id.index()] <= 0.0).map(|&id| t.params.spec(id).name.clone()).collect();

    // Held-out accuracy on difficulty-0 data: 32 train / 8 test per class,
    // a fixed 8-epoch schedule.
    let all = data::generate_synthetic(4, 40, 32, 32, 8, 0.0)?;
    let (train_set, test_set) = data::holdout_split(&all, 8)?;
    let cfg = TrainConfig { batch_size: 16, seed: 8, epochs: 8, ..TrainConfig::default() };
    let mut h = Trainer::<f32>::new(&aggr, &cfg)?;
    for _ in 0..cfg.epochs {
        h.run_epoch(&train_set)?;
    }
    let acc = h.evaluate(&test_set)?.accuracy;

    let ok = pass_cfg
        && loss < OVERFIT_LOSS
        && overfit_secs < OVERFIT_BUDGET_SECS
        && acc >= HELDOUT_ACC
        && silent.is_empty()
        && taus.len() == 3;
    Ok((
        ok,
        format!(
            "32-sample batch: CE {loss:.4} after {epochs} epochs in {overfit_secs:.0}s (<{OVERFIT_LOSS} within {OVERFIT_MAX_EPOCHS}); held-out accuracy {acc:.3} on {} samples after 8 epochs (≥{HELDOUT_ACC}); τ without gradient: {silent:?}",
            test_set.len()
        ),
    ))
}

// 8 ------------------------------------------------------------------------

fn run_ablate(out: &Path) -> Result<Vec<u8>, Box<dyn std::error::Error>> {
    let status = Command::new(bin())
        .args(["ablate", "--seed", "5", "--out"])
        .arg(out)
        .args([
            "--set",
            "data.synthetic.per_class=8",
            "--set",
            "data.synthetic.holdout_per_class=4",
            "--set",
            "ablation.epochs=1",
        ])
        .env("RUST_LOG", "error")
        .output()?
        .status;
    if !status.success() {
        return Err(format!("ablate exited with {status}").into());
    }
    Ok(std::fs::read(out.join("ablation.csv"))?)
}

fn c8_ablation() -> Outcome {
    let dir = tempfile::tempdir()?;
    let a = run_ablate(&dir.path().join("a"))?;
    let b = run_ablate(&dir.path().join("b"))?;
    let mut reader = csv::Reader::from_reader(a.as_slice());
    let header = reader.headers()?.clone();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    let params: Vec<u64> = rows.iter().map(|r| r[2].parse()).collect::<Result<_, _>>()?;
    let labels_ok = &header == vec!["variant", "accuracy", "params"] && labels == VARIANT_LABELS;
    // Rows 2–6 add FEA positions and then SPPF to the C2PCA backbone.
    let monotone = params.len() == 6 && params[1..].windows(2).all(|w| w[0] <= w[1]);
    let same = a == b;
    Ok((
        labels_ok && monotone && same,
        format!(
            "{} rows, labels {}; params {params:?} nondecreasing over FEA/SPPF rows: {monotone}; byte-identical rerun: {same}",
            rows.len(),
            if labels_ok { "exact" } else { "WRONG" }
        ),
    ))
}

// 9 ------------------------------------------------------------------------

fn c9_persistence() -> Outcome {
    let ds = data::generate_synthetic(4, 4, 32, 32, 9, 0.0)?;
    let cfg = TrainConfig { batch_size: 4, seed: 9, ..TrainConfig::default() };
    let model = ModelConfig::toy();

    let mut a = Trainer::<f32>::new(&model, &cfg)?;
    a.run_epoch(&ds)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("a.ckpt");
    checkpoint::save(&a, &path)?;
    let b = checkpoint::load::<f32>(&path)?;
    let (x, _) = ds.batch::<f32>(&(0..ds.len()).collect::<Vec<_>>())?;
    let forward_same = a.model.predict(&a.params, &x)?.bit_eq(&b.model.predict(&b.params, &x)?);

    // 4 steps, checkpoint, then 8 more against 12 uninterrupted steps.
    let mut straight = Trainer::<f32>::new(&model, &cfg)?;
    for _ in 0..3 {
        straight.run_epoch(&ds)?;
    }
    let mut first = Trainer::<f32>::new(&model, &cfg)?;
    first.run_epoch(&ds)?;
    let mut resumed: Trainer<f32> = Archive::decode(&checkpoint::encode(&first)?)?.into_trainer()?;
    for _ in 0..2 {
        resumed.run_epoch(&ds)?;
    }
    let resumed_steps = resumed.step_losses.len();
    let losses_same = resumed.step_losses == straight.step_losses[4..];
    let params_same = straight.params.ids().all(|id| straight.params.get(id).bit_eq(resumed.params.get(id)));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut agt_same = true;
    for _ in 0..50 {
        let shape: Vec<usize> = (0..rng.gen_range(0..=4)).map(|_| rng.gen_range(1..=5)).collect();
        let n: usize = shape.iter().product();
        let special = [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN, f64::MIN_POSITIVE, 1e-310];
        let v64: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    special[rng.gen_range(0..special.len())]
                } else {
                    rng.gen::<f64>() * 1e3 - 5e2
                }
            })
            .collect();
        let t64 = Tensor::<f64>::new(shape.clone(), v64)?;
        let t32: Tensor<f32> = t64.cast();
        let i64s: Vec<i64> = (0..n).map(|_| rng.gen()).collect();
        agt_same &= match tio::read_record(&mut tio::encode(&t64)?.as_slice())? {
            Record::F64(t) => t.bit_eq(&t64),
            _ => false,
        };
        agt_same &= match tio::read_record(&mut tio::encode(&t32)?.as_slice())? {
            Record::F32(t) => t.bit_eq(&t32),
            _ => false,
        };
        agt_same &= tio::read_record(&mut tio::encode_i64(&shape, &i64s)?.as_slice())?
            == Record::I64 { shape: shape.clone(), data: i64s };
    }
    let ok = forward_same && losses_same && params_same && resumed_steps >= 5 && agt_same;
    Ok((
        ok,
        format!(
            "save→load→forward bit-identical: {forward_same}; resumed {resumed_steps} steps bit-match (losses {losses_same}, params {params_same}); AGT1 f32/f64/i64 round-trips bit-exact: {agt_same}"
        ),
    ))
}

// 10 -----------------------------------------------------------------------

fn c10_full_preset() -> Outcome {
    let n = Model::build(&ModelConfig::full())?.param_count() as f64;
    let dev = n / FULL_PARAMS - 1.0;
    Ok((
        dev.abs() <= FULL_PARAMS_TOL,
        format!("{:.2}M learnable parameters vs 38.65M reference: {:+.1}% (band ±15%)", n / 1e6, dev * 100.0),
    ))
}
