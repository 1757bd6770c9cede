#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use eflash_nmcu::model::QuantModel;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// One result line per acceptance criterion, written past the test harness's
/// output capture so it shows up in plain `cargo test` logs.
pub fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {status} {criterion}: {detail}");
}

/// Round half away from zero, written without `f64::round`.
pub fn round_half_away(v: f64) -> f64 {
    if v >= 0.0 {
        (v + 0.5).floor()
    } else {
        -((-v + 0.5).floor())
    }
}

/// Scalar int8 reference for one fully connected layer.
#[allow(clippy::too_many_arguments)]
pub fn reference_layer(
    weights: &[i8],
    in_dim: usize,
    out_dim: usize,
    bias: &[i32],
    input_zp: i32,
    scales: &[f64],
    output_zp: i32,
    relu: bool,
    x: &[i8],
) -> Vec<i8> {
    let mut out = Vec::with_capacity(out_dim);
    for j in 0..out_dim {
        let mut acc: i64 = bias[j] as i64;
        for k in 0..in_dim {
            acc += weights[j * in_dim + k] as i64 * (x[k] as i64 - input_zp as i64);
        }
        let mut q = output_zp as f64 + round_half_away(acc as f64 * scales[j]);
        q = q.clamp(-128.0, 127.0);
        let mut q = q as i32;
        if relu && q < output_zp {
            q = output_zp;
        }
        out.push(q as i8);
    }
    out
}

/// Scalar reference forward pass over a whole model.
pub fn reference_forward(model: &QuantModel, x: &[i8]) -> Vec<i8> {
    let mut cur = x.to_vec();
    for l in &model.layers {
        let w: Vec<i8> = l.weights.iter().map(|w| w.value()).collect();
        let d = &l.desc;
        cur = reference_layer(
            &w,
            d.in_dim,
            d.out_dim,
            &d.bias,
            d.input_zero_point,
            &d.requant_scale,
            d.output_zero_point,
            d.activation == eflash_nmcu::nmcu::Activation::Relu,
            &cur,
        );
    }
    cur
}

pub fn argmax_first(v: &[i8]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Pairwise ROC AUC: P(score_pos > score_neg) + 0.5 P(tie).
pub fn auc_pairwise(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}
