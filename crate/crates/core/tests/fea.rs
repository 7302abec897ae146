//! FEA against a plain-loop oracle, plus segregation properties.

use aggrnet_core::attention::Padding;
use aggrnet_core::fea::{self, FeaVars, KeyRule, MaskMode};
use aggrnet_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KAPPA: f64 = 10.0;

struct Weights {
    sa_w: Tensor<f64>, // [1,2,k,k]
    sa_b: f64,
    w1: Tensor<f64>, // [h,C]
    w2: Tensor<f64>, // [C,h]
    tau: f64,
}

fn weights(c: usize, hidden: usize, k: usize, tau: f64, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Weights {
        sa_w: Tensor::rand_uniform(vec![1, 2, k, k], -0.3, 0.3, &mut rng),
        sa_b: 0.1,
        w1: Tensor::rand_uniform(vec![hidden, c], -0.5, 0.5, &mut rng),
        w2: Tensor::rand_uniform(vec![c, hidden], -0.5, 0.5, &mut rng),
        tau,
    }
}

fn bind(tape: &mut Tape<f64>, w: &Weights) -> FeaVars {
    FeaVars {
        sa_w: tape.param(w.sa_w.clone()),
        sa_b: tape.param(Tensor::from_f64(vec![1], &[w.sa_b]).unwrap()),
        ca_w1: tape.param(w.w1.clone()),
        ca_w2: tape.param(w.w2.clone()),
        tau: tape.param(Tensor::from_f64(vec![1], &[w.tau]).unwrap()),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Attention scores `σ(SA + CA)` per `[n][y][x][c]`, by loops.
fn scores_oracle(x: &Tensor<f64>, w: &Weights) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let at = |b: usize, ch: usize, i: usize, j: usize| x.data()[((b * c + ch) * h + i) * wd + j];
    let k = w.sa_w.shape()[2];
    let r = k as isize / 2;
    let hidden = w.w1.shape()[0];
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        let mlp = |pooled: &[f64]| -> Vec<f64> {
            let hid: Vec<f64> = (0..hidden)
                .map(|u| (0..c).map(|ch| w.w1.data()[u * c + ch] * pooled[ch]).sum::<f64>().max(0.0))
                .collect();
            (0..c).map(|ch| (0..hidden).map(|u| w.w2.data()[ch * hidden + u] * hid[u]).sum()).collect()
        };
        let avg: Vec<f64> = (0..c)
            .map(|ch| {
                (0..h).flat_map(|i| (0..wd).map(move |j| (i, j))).map(|(i, j)| at(b, ch, i, j)).sum::<f64>()
                    / (h * wd) as f64
            })
            .collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| {
                (0..h).flat_map(|i| (0..wd).map(move |j| (i, j))).map(|(i, j)| at(b, ch, i, j)).fold(f64::MIN, f64::max)
            })
            .collect();
        let ca: Vec<f64> = mlp(&avg).iter().zip(mlp(&max)).map(|(a, m)| a + m).collect();
        let pool = |i: usize, j: usize| -> [f64; 2] {
            let vals: Vec<f64> = (0..c).map(|ch| at(b, ch, i, j)).collect();
            [vals.iter().sum::<f64>() / c as f64, vals.iter().copied().fold(f64::MIN, f64::max)]
        };
        for i in 0..h {
            for j in 0..wd {
                let mut sa = w.sa_b;
                for p in 0..2 {
                    for di in 0..k {
                        for dj in 0..k {
                            let (yi, xj) = (i as isize + di as isize - r, j as isize + dj as isize - r);
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                continue;
                            }
                            sa += w.sa_w.data()[(p * k + di) * k + dj] * pool(yi as usize, xj as usize)[p];
                        }
                    }
                }
                for ch in 0..c {
                    out[((b * c + ch) * h + i) * wd + j] = sigmoid(sa + ca[ch]);
                }
            }
        }
    }
    out
}

/// Whole FEA output by loops, soft masks.
fn fea_oracle(x: &Tensor<f64>, w: &Weights) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let t = h * wd;
    let s = scores_oracle(x, w);
    let m: Vec<f64> = s.iter().map(|&v| sigmoid(KAPPA * (v - w.tau))).collect();
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        let idx = |ch: usize, p: usize| (b * c + ch) * t + p;
        let info = |ch, p| m[idx(ch, p)] * x.data()[idx(ch, p)];
        let ninfo = |ch, p| (1.0 - m[idx(ch, p)]) * x.data()[idx(ch, p)];
        for qi in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|kj| {
                    (0..c).map(|ch| (info(ch, qi) + ninfo(ch, qi)) * (info(ch, kj) - ninfo(ch, kj))).sum::<f64>()
                        / (c as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let agg: f64 = (0..t).map(|kj| e[kj] / z * info(ch, kj)).sum();
                out[idx(ch, qi)] = agg + x.data()[idx(ch, qi)];
            }
        }
    }
    out
}

#[test]
fn soft_fea_matches_loop_oracle() {
    for (shape, seed) in [([1, 2, 2, 2], 1u64), ([2, 3, 4, 5], 2), ([1, 6, 3, 3], 3)] {
        let x = Tensor::<f64>::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let w = weights(shape[1], 2, 3, 0.45, seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = bind(&mut tape, &w);
        let out = fea::fea_forward(&mut tape, xv, &vars, Padding::Zero, KAPPA, MaskMode::Soft).unwrap();

        let scores = scores_oracle(&x, &w);
        assert_eq!(tape.shape(out.seg.scores), x.shape());
        for (a, b) in tape.value(out.seg.scores).data().iter().zip(&scores) {
            assert!((a - b).abs() < 1e-12, "scores {a} vs {b}");
        }
        for (a, b) in tape.value(out.output).data().iter().zip(fea_oracle(&x, &w)) {
            assert!((a - b).abs() < 1e-10, "{shape:?}: fea {a} vs {b}");
        }
    }
}

#[test]
fn hard_mask_is_indicator_of_score_at_or_above_tau() {
    let x = Tensor::<f64>::randn(vec![2, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(9));
    let w = weights(4, 2, 3, 0.5, 4);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = bind(&mut tape, &w);
    let seg = fea::fem_forward(&mut tape, xv, &vars, Padding::Zero, KAPPA, MaskMode::Hard).unwrap();
    let s = scores_oracle(&x, &w);
    for (i, &wi) in tape.value(seg.w_info).data().iter().enumerate() {
        assert_eq!(wi, if s[i] >= 0.5 { 1.0 } else { 0.0 });
    }
}

#[test]
fn residual_adds_input_exactly() {
    // The skip is a single addition: no rescaling or extra rounding of x.
    let x = Tensor::<f32>::randn(vec![2, 4, 3, 3], &mut ChaCha8Rng::seed_from_u64(5));
    let w = weights(4, 2, 3, 0.5, 5);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let vars = FeaVars {
        sa_w: tape.param(w.sa_w.cast()),
        sa_b: tape.param(Tensor::from_f64(vec![1], &[w.sa_b]).unwrap()),
        ca_w1: tape.param(w.w1.cast()),
        ca_w2: tape.param(w.w2.cast()),
        tau: tape.param(Tensor::from_f64(vec![1], &[w.tau]).unwrap()),
    };
    let out = fea::fea_forward(&mut tape, xv, &vars, Padding::Zero, KAPPA, MaskMode::Soft).unwrap();
    let agg = tape.value(out.aggregated).data();
    for ((o, a), xi) in tape.value(out.output).data().iter().zip(agg).zip(x.data()) {
        assert_eq!(o.to_bits(), (a + xi).to_bits());
    }
}

#[test]
fn flipped_key_breaks_the_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let info = Tensor::<f64>::randn(vec![1, 6, 4], &mut rng);
    let ninfo = Tensor::<f64>::randn(vec![1, 6, 4], &mut rng);
    assert!(fea::qk_expansion_deviation(&info, &ninfo, KeyRule::Contrast).unwrap() < 1e-10);
    assert!(fea::qk_expansion_deviation(&info, &ninfo, KeyRule::Flipped).unwrap() > 1e-3);
}

fn segregate(x: &Tensor<f64>, tau: f64, mode: MaskMode, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = weights(x.shape()[1], 2, 3, tau, seed);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = bind(&mut tape, &w);
    let seg = fea::fem_forward(&mut tape, xv, &vars, Padding::Zero, KAPPA, mode).unwrap();
    let v = |var| tape.value(var).data().to_vec();
    (v(seg.w_info), v(seg.w_ninfo), v(seg.x_info), v(seg.x_ninfo))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_partition_the_input(
        seed in any::<u64>(),
        c in 1usize..5, h in 1usize..5, w in 1usize..5,
        tau in 0.01f64..0.99,
        hard in any::<bool>(),
    ) {
        let x = Tensor::<f64>::randn(vec![1, c, h, w], &mut ChaCha8Rng::seed_from_u64(seed));
        let mode = if hard { MaskMode::Hard } else { MaskMode::Soft };
        let (wi, wn, xi, xn) = segregate(&x, tau, mode, seed ^ 1);
        for i in 0..x.numel() {
            if hard {
                prop_assert_eq!(wi[i] + wn[i], 1.0);
                prop_assert_eq!(xi[i] * xn[i], 0.0);
            } else {
                prop_assert!((wi[i] + wn[i] - 1.0).abs() <= 1e-6);
            }
            prop_assert!((xi[i] + xn[i] - x.data()[i]).abs() <= 1e-5);
        }
    }

    #[test]
    fn raising_tau_never_grows_the_informative_mask(
        seed in any::<u64>(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99, hard in any::<bool>(),
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let x = Tensor::<f64>::randn(vec![1, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(seed));
        let mode = if hard { MaskMode::Hard } else { MaskMode::Soft };
        let (w_lo, ..) = segregate(&x, lo, mode, 7);
        let (w_hi, ..) = segregate(&x, hi, mode, 7);
        for (a, b) in w_lo.iter().zip(&w_hi) {
            prop_assert!(b <= a);
        }
    }
}
