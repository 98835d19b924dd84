//! Routing, fusion, and the training objective.
//!
//! Routing weights are normalized OOD scores; the fused prediction is the
//! resulting convex combination of per-expert softmax distributions.
//! The classification loss weights each expert's cross-entropy by its
//! routing weight and the blended class weight, masked to samples whose
//! label the expert's group covers. Routing weights stay inside the graph,
//! so OOD heads also receive gradient through the classification loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::moe::{ExpertSpec, NUM_EXPERTS};

/// Which OOD head loss to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodLossKind {
    Bce,
    Entropy,
    Focal,
    Margin,
}

impl OodLossKind {
    pub const ALL: [OodLossKind; 4] = [
        OodLossKind::Bce,
        OodLossKind::Entropy,
        OodLossKind::Focal,
        OodLossKind::Margin,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OodLossKind::Bce => "bce",
            OodLossKind::Entropy => "entropy",
            OodLossKind::Focal => "focal",
            OodLossKind::Margin => "margin",
        }
    }
}

impl std::str::FromStr for OodLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(OodLossKind::Bce),
            "entropy" => Ok(OodLossKind::Entropy),
            "focal" => Ok(OodLossKind::Focal),
            "margin" => Ok(OodLossKind::Margin),
            other => Err(Error::Config(vec![format!(
                "unknown ood loss {other:?}, expected bce|entropy|focal|margin"
            )])),
        }
    }
}

/// Variant plus its knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodLossParams {
    pub kind: OodLossKind,
    /// Focusing exponent for the focal variant.
    pub focal_g: f64,
    /// Hinge margin on the signed score for the margin variant.
    pub margin_m: f64,
    /// Weight of the binary-entropy penalty in the entropy variant.
    pub entropy_eta: f64,
}

impl Default for OodLossParams {
    fn default() -> Self {
        OodLossParams {
            kind: OodLossKind::Bce,
            focal_g: 2.0,
            margin_m: 0.5,
            entropy_eta: 0.1,
        }
    }
}

/// Binary targets `b[k][i] = 1` iff sample i's label is in expert k's group.
pub fn ood_targets(
    experts: &[ExpertSpec; NUM_EXPERTS],
    labels: &[usize],
) -> [Vec<f64>; NUM_EXPERTS] {
    [
        experts[0].sample_mask(labels),
        experts[1].sample_mask(labels),
        experts[2].sample_mask(labels),
    ]
}

/// Normalize per-expert scores into routing weights: `α_k = s_k / Σ_j s_j`.
pub fn route(g: &mut Graph, scores: &[Tensor; NUM_EXPERTS]) -> Result<[Tensor; NUM_EXPERTS]> {
    let sum01 = g.add(scores[0], scores[1])?;
    let total = g.add(sum01, scores[2])?;
    Ok([
        g.div(scores[0], total)?,
        g.div(scores[1], total)?,
        g.div(scores[2], total)?,
    ])
}

/// Convex combination of per-expert class distributions:
/// `fused[i] = Σ_k α_k[i] · probs_k[i]`.
pub fn fuse(
    g: &mut Graph,
    alpha: &[Tensor; NUM_EXPERTS],
    probs: &[Tensor; NUM_EXPERTS],
) -> Result<Tensor> {
    let t0 = g.scale_rows(alpha[0], probs[0])?;
    let t1 = g.scale_rows(alpha[1], probs[1])?;
    let t2 = g.scale_rows(alpha[2], probs[2])?;
    let sum01 = g.add(t0, t1)?;
    g.add(sum01, t2)
}

/// Binary entropy −[s·ln s + (1−s)·ln(1−s)], elementwise.
fn binary_entropy(g: &mut Graph, s: Tensor) -> Result<Tensor> {
    let log_s = g.log_clamped(s);
    let term_pos = g.mul(s, log_s)?;
    let neg_s = g.scale(s, -1.0);
    let one_minus = g.add_const(neg_s, 1.0);
    let log_one_minus = g.log_clamped(one_minus);
    let term_neg = g.mul(one_minus, log_one_minus)?;
    let total = g.add(term_pos, term_neg)?;
    Ok(g.scale(total, -1.0))
}

/// −[b·ln s + (1−b)·ln(1−s)], elementwise over a batch.
fn bce_terms(g: &mut Graph, score: Tensor, target: Tensor) -> Result<Tensor> {
    let log_s = g.log_clamped(score);
    let pos = g.mul(target, log_s)?;
    let neg_s = g.scale(score, -1.0);
    let one_minus_s = g.add_const(neg_s, 1.0);
    let log_oms = g.log_clamped(one_minus_s);
    let neg_b = g.scale(target, -1.0);
    let one_minus_b = g.add_const(neg_b, 1.0);
    let neg = g.mul(one_minus_b, log_oms)?;
    let total = g.add(pos, neg)?;
    Ok(g.scale(total, -1.0))
}

/// OOD loss of one expert over a batch, averaged over samples.
///
/// `score` and `target` are `[B]`; `probs` is that expert's `[B × C]`
/// softmax output and feeds only the entropy variant, whose effective score
/// is the equal-weight average of the head score and the classifier-derived
/// confidence `1 − H(probs)/ln C`.
pub fn ood_loss(
    g: &mut Graph,
    params: &OodLossParams,
    score: Tensor,
    target: Tensor,
    probs: Tensor,
) -> Result<Tensor> {
    let per_sample = match params.kind {
        OodLossKind::Bce => bce_terms(g, score, target)?,
        OodLossKind::Focal => {
            // −[b·(1−s)^g·ln s + (1−b)·s^g·ln(1−s)]
            let log_s = g.log_clamped(score);
            let neg_s = g.scale(score, -1.0);
            let one_minus_s = g.add_const(neg_s, 1.0);
            let log_oms = g.log_clamped(one_minus_s);
            let focus_pos = g.pow_const(one_minus_s, params.focal_g);
            let focus_neg = g.pow_const(score, params.focal_g);
            let pos_raw = g.mul(focus_pos, log_s)?;
            let pos = g.mul(target, pos_raw)?;
            let neg_b = g.scale(target, -1.0);
            let one_minus_b = g.add_const(neg_b, 1.0);
            let neg_raw = g.mul(focus_neg, log_oms)?;
            let neg = g.mul(one_minus_b, neg_raw)?;
            let total = g.add(pos, neg)?;
            g.scale(total, -1.0)
        }
        OodLossKind::Margin => {
            // max(0, m − (2b−1)·(2s−1))
            let signed_b = {
                let two_b = g.scale(target, 2.0);
                g.add_const(two_b, -1.0)
            };
            let signed_s = {
                let two_s = g.scale(score, 2.0);
                g.add_const(two_s, -1.0)
            };
            let agreement = g.mul(signed_b, signed_s)?;
            let neg_agreement = g.scale(agreement, -1.0);
            let hinge_arg = g.add_const(neg_agreement, params.margin_m);
            g.relu(hinge_arg)
        }
        OodLossKind::Entropy => {
            // blend the head score with classifier confidence, then
            // bce + eta·H_bin on the blended score
            let cols = g.shape(probs)[1];
            let log_p = g.log_clamped(probs);
            let p_log_p = g.mul(probs, log_p)?;
            let row_sums = g.sum_rows(p_log_p)?;
            // row_sums = −H, so confidence = 1 + row_sums/ln C
            let scaled = g.scale(row_sums, 1.0 / (cols as f64).ln());
            let confidence = g.add_const(scaled, 1.0);
            let total_score = g.add(score, confidence)?;
            let blended = g.scale(total_score, 0.5);
            let bce = bce_terms(g, blended, target)?;
            let ent = binary_entropy(g, blended)?;
            let penalty = g.scale(ent, params.entropy_eta);
            g.add(bce, penalty)?
        }
    };
    Ok(g.mean(per_sample))
}

/// Routing- and class-weighted cross-entropy over a batch:
/// mean_i Σ_k α_k[i] · w̃_{y_i} · CE(probs_k[i], y_i), with expert k's term
/// masked to samples whose label lies in its class group.
pub fn cls_loss(
    g: &mut Graph,
    alpha: &[Tensor; NUM_EXPERTS],
    probs: &[Tensor; NUM_EXPERTS],
    labels: &[usize],
    class_weights: &[f64],
    masks: &[Tensor; NUM_EXPERTS],
) -> Result<Tensor> {
    let batch = labels.len();
    let weight_data: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let weights = g.constant(weight_data, &[batch])?;
    let mut total: Option<Tensor> = None;
    for k in 0..NUM_EXPERTS {
        let ce = g.cross_entropy_rows(probs[k], labels)?;
        let weighted = g.mul(ce, weights)?;
        let routed = g.mul(weighted, alpha[k])?;
        let masked = g.mul(routed, masks[k])?;
        total = Some(match total {
            Some(t) => g.add(t, masked)?,
            None => masked,
        });
    }
    Ok(g.mean(total.expect("three experts")))
}

/// Single-expert weighted cross-entropy: mean_i w̃_{y_i} · CE(probs[i], y_i).
pub fn weighted_ce(
    g: &mut Graph,
    probs: Tensor,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<Tensor> {
    let batch = labels.len();
    let weight_data: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let weights = g.constant(weight_data, &[batch])?;
    let ce = g.cross_entropy_rows(probs, labels)?;
    let weighted = g.mul(ce, weights)?;
    Ok(g.mean(weighted))
}

/// Joint objective: `cls + λ_OOD · ood`.
pub fn total_loss(g: &mut Graph, cls: Tensor, ood: Tensor, lambda_ood: f64) -> Result<Tensor> {
    if !lambda_ood.is_finite() || lambda_ood < 0.0 {
        return Err(Error::Config(vec![format!(
            "lambda_ood must be finite and >= 0, got {lambda_ood}"
        )]));
    }
    let scaled = g.scale(ood, lambda_ood);
    g.add(cls, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    fn scores(g: &mut Graph, s: [f64; 3]) -> [Tensor; 3] {
        [
            g.constant(vec![s[0]], &[1]).unwrap(),
            g.constant(vec![s[1]], &[1]).unwrap(),
            g.constant(vec![s[2]], &[1]).unwrap(),
        ]
    }

    #[test]
    fn route_symmetric_scores() {
        let mut g = Graph::new();
        let s = scores(&mut g, [0.5, 0.5, 0.5]);
        let alpha = route(&mut g, &s).unwrap();
        for a in alpha {
            assert_close(g.value(a)[0], 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn route_already_normalized_scores() {
        let mut g = Graph::new();
        let s = scores(&mut g, [0.2, 0.3, 0.5]);
        let alpha = route(&mut g, &s).unwrap();
        assert_close(g.value(alpha[0])[0], 0.2, 1e-9);
        assert_close(g.value(alpha[1])[0], 0.3, 1e-9);
        assert_close(g.value(alpha[2])[0], 0.5, 1e-9);
    }

    #[test]
    fn route_is_scale_invariant() {
        let mut g = Graph::new();
        let s = scores(&mut g, [0.1, 0.25, 0.4]);
        let a1 = route(&mut g, &s).unwrap();
        let doubled = scores(&mut g, [0.2, 0.5, 0.8]);
        let a2 = route(&mut g, &doubled).unwrap();
        for k in 0..3 {
            assert_close(g.value(a1[k])[0], g.value(a2[k])[0], 1e-12);
        }
    }

    fn dist(g: &mut Graph, rows: Vec<f64>, b: usize, c: usize) -> Tensor {
        g.constant(rows, &[b, c]).unwrap()
    }

    #[test]
    fn fuse_identical_distributions_is_identity() {
        let mut g = Graph::new();
        let p = vec![0.2, 0.5, 0.3];
        let probs = [
            dist(&mut g, p.clone(), 1, 3),
            dist(&mut g, p.clone(), 1, 3),
            dist(&mut g, p.clone(), 1, 3),
        ];
        let alpha = scores(&mut g, [0.7, 0.2, 0.1]);
        let fused = fuse(&mut g, &alpha, &probs).unwrap();
        for (got, want) in g.value(fused).iter().zip(&p) {
            assert_close(*got, *want, 1e-12);
        }
    }

    #[test]
    fn fuse_one_hot_alpha_selects_expert() {
        let mut g = Graph::new();
        let probs = [
            dist(&mut g, vec![0.9, 0.05, 0.05], 1, 3),
            dist(&mut g, vec![0.1, 0.8, 0.1], 1, 3),
            dist(&mut g, vec![0.3, 0.3, 0.4], 1, 3),
        ];
        let alpha = scores(&mut g, [1.0, 0.0, 0.0]);
        let fused = fuse(&mut g, &alpha, &probs).unwrap();
        assert_eq!(g.value(fused), g.value(probs[0]));
    }

    #[test]
    fn fuse_hand_arithmetic() {
        let mut g = Graph::new();
        let probs = [
            dist(&mut g, vec![0.6, 0.3, 0.1], 1, 3),
            dist(&mut g, vec![0.2, 0.5, 0.3], 1, 3),
            dist(&mut g, vec![0.1, 0.1, 0.8], 1, 3),
        ];
        let alpha = scores(&mut g, [0.5, 0.25, 0.25]);
        let fused = fuse(&mut g, &alpha, &probs).unwrap();
        let v = g.value(fused);
        assert_close(v[0], 0.375, 1e-9);
        assert_close(v[1], 0.3, 1e-9);
        assert_close(v[2], 0.325, 1e-9);
        assert_close(v.iter().sum::<f64>(), 1.0, 1e-9);
    }

    fn eval_ood(params: &OodLossParams, s: f64, b: f64) -> f64 {
        let mut g = Graph::new();
        let score = g.constant(vec![s], &[1]).unwrap();
        let target = g.constant(vec![b], &[1]).unwrap();
        // uniform two-class distribution keeps the entropy variant defined
        let probs = g.constant(vec![0.5, 0.5], &[1, 2]).unwrap();
        let loss = ood_loss(&mut g, params, score, target, probs).unwrap();
        g.scalar_value(loss)
    }

    #[test]
    fn bce_confident_correct_score_approaches_zero() {
        let params = OodLossParams::default();
        let loss = eval_ood(&params, 1.0 - 1e-9, 1.0);
        assert!(loss < 1e-6, "loss {loss} should vanish as s → b");
    }

    #[test]
    fn bce_half_score_is_ln_two() {
        let params = OodLossParams::default();
        assert_close(eval_ood(&params, 0.5, 1.0), 2.0f64.ln(), 1e-9);
    }

    #[test]
    fn margin_satisfied_at_full_confidence() {
        let params = OodLossParams {
            kind: OodLossKind::Margin,
            ..OodLossParams::default()
        };
        assert_close(eval_ood(&params, 1.0, 1.0), 0.0, 1e-12);
        // violating side: b=1, s=0 → max(0, 0.5 + 1) = 1.5
        assert_close(eval_ood(&params, 0.0, 1.0), 1.5, 1e-12);
    }

    #[test]
    fn focal_downweights_easy_examples_against_bce() {
        let bce = OodLossParams::default();
        let focal = OodLossParams {
            kind: OodLossKind::Focal,
            ..OodLossParams::default()
        };
        // easy example (s close to b): focal shrinks the loss
        assert!(eval_ood(&focal, 0.9, 1.0) < eval_ood(&bce, 0.9, 1.0));
        // focal with g = 0 reduces to bce
        let focal0 = OodLossParams {
            kind: OodLossKind::Focal,
            focal_g: 0.0,
            ..OodLossParams::default()
        };
        assert_close(eval_ood(&focal0, 0.3, 1.0), eval_ood(&bce, 0.3, 1.0), 1e-12);
    }

    #[test]
    fn every_variant_is_nonnegative_and_minimized_at_ideal_score() {
        for kind in OodLossKind::ALL {
            let params = OodLossParams {
                kind,
                ..OodLossParams::default()
            };
            for b in [0.0, 1.0] {
                let ideal = if b > 0.5 { 0.999_999_999 } else { 1e-9 };
                let ideal_loss = eval_ood(&params, ideal, b);
                let grid: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
                for s in grid {
                    let loss = eval_ood(&params, s, b);
                    assert!(loss >= -1e-12, "{kind:?} loss {loss} negative at s={s}");
                    assert!(
                        loss + 1e-9 >= ideal_loss,
                        "{kind:?} at s={s}, b={b}: {loss} below ideal {ideal_loss}"
                    );
                }
            }
        }
    }

    #[test]
    fn entropy_variant_blends_classifier_confidence() {
        // with a one-hot classifier row the confidence is 1; the blended
        // score (s + 1)/2 feeds bce + eta·H_bin
        let params = OodLossParams {
            kind: OodLossKind::Entropy,
            entropy_eta: 0.1,
            ..OodLossParams::default()
        };
        let mut g = Graph::new();
        let score = g.constant(vec![0.6], &[1]).unwrap();
        let target = g.constant(vec![1.0], &[1]).unwrap();
        let probs = g.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
        let loss = ood_loss(&mut g, &params, score, target, probs).unwrap();
        let blended: f64 = 0.5 * (0.6 + 1.0);
        let expected_bce = -blended.ln();
        let expected_ent = -(blended * blended.ln() + (1.0 - blended) * (1.0 - blended).ln());
        assert_close(
            g.scalar_value(loss),
            expected_bce + 0.1 * expected_ent,
            1e-9,
        );
    }

    fn three_alpha(g: &mut Graph, a: [f64; 3], b: usize) -> [Tensor; 3] {
        [
            g.constant(vec![a[0]; b], &[b]).unwrap(),
            g.constant(vec![a[1]; b], &[b]).unwrap(),
            g.constant(vec![a[2]; b], &[b]).unwrap(),
        ]
    }

    fn ones_masks(g: &mut Graph, b: usize) -> [Tensor; 3] {
        [
            g.constant(vec![1.0; b], &[b]).unwrap(),
            g.constant(vec![1.0; b], &[b]).unwrap(),
            g.constant(vec![1.0; b], &[b]).unwrap(),
        ]
    }

    #[test]
    fn cls_loss_vanishes_on_perfect_single_expert() {
        let mut g = Graph::new();
        let perfect = dist(&mut g, vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let empty = dist(&mut g, vec![0.5, 0.5, 0.5, 0.5], 2, 2);
        let probs = [perfect, empty, empty];
        let alpha = three_alpha(&mut g, [1.0, 0.0, 0.0], 2);
        let masks = ones_masks(&mut g, 2);
        let loss = cls_loss(&mut g, &alpha, &probs, &[0, 1], &[0.5, 0.5], &masks).unwrap();
        assert_close(g.scalar_value(loss), 0.0, 1e-12);
    }

    #[test]
    fn cls_loss_is_linear_in_class_weights() {
        let mut g = Graph::new();
        let p = dist(&mut g, vec![0.7, 0.3], 1, 2);
        let probs = [p, p, p];
        let alpha = three_alpha(&mut g, [1.0 / 3.0; 3], 1);
        let masks = ones_masks(&mut g, 1);
        let base = cls_loss(&mut g, &alpha, &probs, &[0], &[0.4, 0.6], &masks).unwrap();
        let doubled = cls_loss(&mut g, &alpha, &probs, &[0], &[0.8, 0.6], &masks).unwrap();
        assert_close(g.scalar_value(doubled), 2.0 * g.scalar_value(base), 1e-12);
    }

    #[test]
    fn cls_loss_hand_arithmetic() {
        let mut g = Graph::new();
        let probs = [
            dist(&mut g, vec![0.8, 0.2], 1, 2),
            dist(&mut g, vec![0.5, 0.5], 1, 2),
            dist(&mut g, vec![0.9, 0.1], 1, 2),
        ];
        let alpha = three_alpha(&mut g, [0.2, 0.3, 0.5], 1);
        let masks = ones_masks(&mut g, 1);
        let loss = cls_loss(&mut g, &alpha, &probs, &[0], &[0.7, 0.3], &masks).unwrap();
        let expected = 0.7 * (0.2 * -(0.8f64.ln()) + 0.3 * -(0.5f64.ln()) + 0.5 * -(0.9f64.ln()));
        assert_close(g.scalar_value(loss), expected, 1e-9);
    }

    #[test]
    fn cls_loss_mask_drops_uncovered_sample() {
        let mut g = Graph::new();
        let p = dist(&mut g, vec![0.5, 0.5], 1, 2);
        let probs = [p, p, p];
        let alpha = three_alpha(&mut g, [0.0, 1.0, 0.0], 1);
        // expert 1 (the routed one) does not cover the label
        let masks = [
            g.constant(vec![1.0], &[1]).unwrap(),
            g.constant(vec![0.0], &[1]).unwrap(),
            g.constant(vec![1.0], &[1]).unwrap(),
        ];
        let loss = cls_loss(&mut g, &alpha, &probs, &[0], &[0.5, 0.5], &masks).unwrap();
        assert_close(g.scalar_value(loss), 0.0, 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let cls = g.scalar(1.0);
        let ood = g.scalar(0.5);
        let t0 = total_loss(&mut g, cls, ood, 0.0).unwrap();
        assert_close(g.scalar_value(t0), 1.0, 1e-12);
        let t2 = total_loss(&mut g, cls, ood, 2.0).unwrap();
        assert_close(g.scalar_value(t2), 2.0, 1e-9);
        let ood_one = g.scalar(1.0);
        let t3 = total_loss(&mut g, cls, ood_one, 2.0).unwrap();
        assert_close(g.scalar_value(t3), 3.0, 1e-9);
    }

    #[test]
    fn total_loss_rejects_bad_lambda() {
        let mut g = Graph::new();
        let cls = g.scalar(1.0);
        let ood = g.scalar(1.0);
        assert!(total_loss(&mut g, cls, ood, -1.0).is_err());
        assert!(total_loss(&mut g, cls, ood, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn routing_weights_form_distribution(
            s in proptest::collection::vec(1e-6f64..1.0, 3),
        ) {
            let mut g = Graph::new();
            let tensors = scores(&mut g, [s[0], s[1], s[2]]);
            let alpha = route(&mut g, &tensors).unwrap();
            let total: f64 = alpha.iter().map(|a| g.value(*a)[0]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for a in alpha {
                prop_assert!(g.value(a)[0] >= 0.0);
            }
        }

        #[test]
        fn fused_output_is_distribution(
            logits in proptest::collection::vec(-5.0f64..5.0, 9),
            raw_s in proptest::collection::vec(0.05f64..0.95, 3),
        ) {
            let mut g = Graph::new();
            let mut probs = Vec::new();
            for k in 0..3 {
                let l = g.constant(logits[k * 3..(k + 1) * 3].to_vec(), &[1, 3]).unwrap();
                probs.push(g.softmax(l).unwrap());
            }
            let s = scores(&mut g, [raw_s[0], raw_s[1], raw_s[2]]);
            let alpha = route(&mut g, &s).unwrap();
            let fused = fuse(&mut g, &alpha, &[probs[0], probs[1], probs[2]]).unwrap();
            let v = g.value(fused);
            let total: f64 = v.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for p in v {
                prop_assert!(*p >= 0.0 && *p <= 1.0 + 1e-12);
            }
        }
    }
}
