//! Per-stack loss terms: discriminator and non-saturating adversarial
//! losses, the conditional recovery loss (Euclidean for features,
//! cross-entropy for labels), and the entropy loss driving the
//! Q-network's posterior-mean prediction.
//!
//! Each loss exists twice: a plain-value form over tensors (validated,
//! f64 arithmetic) and a graph form that builds tape nodes for training.
//! The value forms double as hand-arithmetic anchors in tests.

use crate::error::{Error, Result};
use crate::nn::PROB_EPS;
use crate::ops::Op;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Loss-term coefficients (lambda_1, lambda_2, lambda_3).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub conditional: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            conditional: 1.0,
            entropy: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.adversarial < 0.0 || self.conditional < 0.0 || self.entropy < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondKind {
    Euclidean,
    CrossEntropy,
}

impl CondKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euclidean" => Ok(CondKind::Euclidean),
            "cross_entropy" => Ok(CondKind::CrossEntropy),
            other => Err(Error::Unknown {
                what: "conditional loss kind",
                name: other.to_string(),
            }),
        }
    }
}

/// Target of the conditional loss: conditioning features for intermediate
/// levels, class labels (indices or one-hot rows) at the top.
pub enum CondTarget<'a> {
    Features(&'a Tensor<f32>),
    Classes(&'a [usize]),
    OneHot(&'a Tensor<f32>),
}

fn check_probs(op: &'static str, t: &Tensor<f32>) -> Result<()> {
    if t.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Domain {
            op,
            detail: "probabilities must lie strictly in (0,1)".into(),
        });
    }
    Ok(())
}

/// mean(-log d_real) + mean(-log(1 - d_fake))
pub fn loss_discriminator(d_real: &Tensor<f32>, d_fake: &Tensor<f32>) -> Result<f64> {
    check_probs("loss_discriminator", d_real)?;
    check_probs("loss_discriminator", d_fake)?;
    let real: f64 =
        d_real.data().iter().map(|&v| -(v as f64).ln()).sum::<f64>() / d_real.numel() as f64;
    let fake: f64 = d_fake
        .data()
        .iter()
        .map(|&v| -(1.0 - v as f64).ln())
        .sum::<f64>()
        / d_fake.numel() as f64;
    Ok(real + fake)
}

/// mean(-log d_fake): the non-saturating generator loss.
pub fn loss_adversarial(d_fake: &Tensor<f32>) -> Result<f64> {
    check_probs("loss_adversarial", d_fake)?;
    Ok(d_fake.data().iter().map(|&v| -(v as f64).ln()).sum::<f64>() / d_fake.numel() as f64)
}

/// Euclidean: mean over the batch of squared L2 distance. Cross-entropy:
/// mean softmax cross-entropy of `recovered` logits against the target
/// classes.
pub fn loss_conditional(
    recovered: &Tensor<f32>,
    target: &CondTarget,
    kind: CondKind,
) -> Result<f64> {
    match kind {
        CondKind::Euclidean => {
            let CondTarget::Features(t) = target else {
                return Err(Error::Domain {
                    op: "loss_conditional",
                    detail: "euclidean distance needs feature targets".into(),
                });
            };
            if t.shape() != recovered.shape() {
                return Err(Error::shape(
                    "loss_conditional",
                    format!("{:?} vs {:?}", recovered.shape(), t.shape()),
                ));
            }
            let batch = recovered.dim0() as f64;
            let sum: f64 = recovered
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            Ok(sum / batch)
        }
        CondKind::CrossEntropy => {
            let classes: Vec<usize> = match target {
                CondTarget::Classes(c) => c.to_vec(),
                CondTarget::OneHot(t) => one_hot_to_classes(t)?,
                CondTarget::Features(_) => {
                    return Err(Error::Domain {
                        op: "loss_conditional",
                        detail: "cross-entropy needs class targets".into(),
                    })
                }
            };
            if classes.len() != recovered.dim0() || recovered.shape().len() != 2 {
                return Err(Error::shape(
                    "loss_conditional",
                    format!(
                        "logits {:?} vs {} targets",
                        recovered.shape(),
                        classes.len()
                    ),
                ));
            }
            let k = recovered.shape()[1];
            let mut acc = 0.0f64;
            for (row, &t) in recovered.data().chunks(k).zip(&classes) {
                if t >= k {
                    return Err(Error::Domain {
                        op: "loss_conditional",
                        detail: format!("target {t} out of range for {k} classes"),
                    });
                }
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                let lse: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
                acc += max + lse.ln() - row[t] as f64;
            }
            Ok(acc / classes.len() as f64)
        }
    }
}

fn one_hot_to_classes(t: &Tensor<f32>) -> Result<Vec<usize>> {
    if t.shape().len() != 2 {
        return Err(Error::shape(
            "loss_conditional",
            format!("one-hot must be [B,K], got {:?}", t.shape()),
        ));
    }
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// mean over the batch of 0.5 * ||z - q_mean||^2: the entropy loss for a
/// diagonal unit-variance Gaussian posterior, constants dropped.
pub fn loss_entropy(q_mean: &Tensor<f32>, z: &Tensor<f32>) -> Result<f64> {
    if q_mean.shape() != z.shape() {
        return Err(Error::shape(
            "loss_entropy",
            format!("{:?} vs {:?}", q_mean.shape(), z.shape()),
        ));
    }
    let batch = z.dim0() as f64;
    let sum: f64 = q_mean
        .data()
        .iter()
        .zip(z.data())
        .map(|(&m, &zv)| {
            let d = zv as f64 - m as f64;
            d * d
        })
        .sum();
    Ok(0.5 * sum / batch)
}

/// lambda_1 * adv + lambda_2 * cond + lambda_3 * ent
pub fn total_generator_loss(adv: f64, cond: f64, ent: f64, w: &LossWeights) -> f64 {
    w.adversarial * adv + w.conditional * cond + w.entropy * ent
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

fn clamp_prob(tape: &mut Tape<f32>, p: NodeId) -> Result<NodeId> {
    tape.apply(
        Op::Clamp {
            lo: PROB_EPS,
            hi: 1.0 - PROB_EPS,
        },
        &[p],
    )
}

fn mean_neg_log(tape: &mut Tape<f32>, p: NodeId) -> Result<NodeId> {
    let lg = tape.apply(Op::Log, &[p])?;
    let neg = tape.apply(Op::Scale { c: -1.0 }, &[lg])?;
    tape.apply(Op::ReduceMean, &[neg])
}

pub fn graph_loss_discriminator(
    tape: &mut Tape<f32>,
    d_real: NodeId,
    d_fake: NodeId,
) -> Result<NodeId> {
    let real = clamp_prob(tape, d_real)?;
    let real_term = mean_neg_log(tape, real)?;
    let fake = clamp_prob(tape, d_fake)?;
    let ones = tape.constant(Tensor::ones(tape.value(fake).shape()));
    let one_minus = tape.apply(Op::Sub, &[ones, fake])?;
    let fake_term = mean_neg_log(tape, one_minus)?;
    tape.apply(Op::Add, &[real_term, fake_term])
}

pub fn graph_loss_adversarial(tape: &mut Tape<f32>, d_fake: NodeId) -> Result<NodeId> {
    let fake = clamp_prob(tape, d_fake)?;
    mean_neg_log(tape, fake)
}

/// mean over batch of squared L2 distance between two feature nodes.
pub fn graph_loss_cond_euclidean(
    tape: &mut Tape<f32>,
    recovered: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let batch = tape.value(recovered).dim0();
    let diff = tape.apply(Op::Sub, &[recovered, target])?;
    let sq = tape.apply(Op::Mul, &[diff, diff])?;
    let sum = tape.apply(Op::ReduceSum, &[sq])?;
    tape.apply(
        Op::Scale {
            c: 1.0 / batch as f64,
        },
        &[sum],
    )
}

pub fn graph_loss_cond_cross_entropy(
    tape: &mut Tape<f32>,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    tape.apply(
        Op::CrossEntropyMean {
            targets: targets.to_vec(),
        },
        &[logits],
    )
}

/// mean over batch of 0.5 * ||z - q_mean||^2.
pub fn graph_loss_entropy(tape: &mut Tape<f32>, q_mean: NodeId, z: NodeId) -> Result<NodeId> {
    let batch = tape.value(z).dim0();
    let diff = tape.apply(Op::Sub, &[z, q_mean])?;
    let sq = tape.apply(Op::Mul, &[diff, diff])?;
    let sum = tape.apply(Op::ReduceSum, &[sq])?;
    tape.apply(
        Op::Scale {
            c: 0.5 / batch as f64,
        },
        &[sum],
    )
}

/// Weighted sum of whichever terms are present.
pub fn graph_total_generator_loss(
    tape: &mut Tape<f32>,
    adv: NodeId,
    cond: Option<NodeId>,
    ent: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut total = tape.apply(Op::Scale { c: w.adversarial }, &[adv])?;
    if let Some(c) = cond {
        let wc = tape.apply(Op::Scale { c: w.conditional }, &[c])?;
        total = tape.apply(Op::Add, &[total, wc])?;
    }
    if let Some(e) = ent {
        let we = tape.apply(Op::Scale { c: w.entropy }, &[e])?;
        total = tape.apply(Op::Add, &[total, we])?;
    }
    Ok(total)
}

#[cfg(test)]
#[allow(clippy::approx_constant)] // literals below are pinned expected values
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(data: Vec<f32>) -> Tensor<f32> {
        let n = data.len();
        Tensor::from_vec(&[n, 1], data).unwrap()
    }

    /// Evaluate a graph builder on constant inputs.
    fn graph_value(build: impl Fn(&mut Tape<f32>) -> NodeId) -> f32 {
        let mut tape = Tape::new();
        let id = build(&mut tape);
        tape.value(id).item()
    }

    #[test]
    fn discriminator_loss_values() {
        // Perfect discriminator: ~0.
        let eps = 1e-6f32;
        let near0 = loss_discriminator(&t(vec![1.0 - eps]), &t(vec![eps])).unwrap();
        assert!(near0.abs() < 1e-5, "{near0}");

        // Maximal confusion: 2 ln 2.
        let conf = loss_discriminator(&t(vec![0.5, 0.5]), &t(vec![0.5])).unwrap();
        assert!((conf - 1.386294).abs() < 1e-6, "{conf}");

        // Hand arithmetic: 0.5(-ln 0.9 - ln 0.8) + (-ln 0.9).
        let want = 0.5 * (-(0.9f64).ln() - (0.8f64).ln()) - (0.9f64).ln();
        let got = loss_discriminator(&t(vec![0.9, 0.8]), &t(vec![0.1])).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((got - 0.269613).abs() < 1e-6, "{got}");

        // Domain error outside (0,1).
        assert!(loss_discriminator(&t(vec![1.0]), &t(vec![0.5])).is_err());
        assert!(loss_discriminator(&t(vec![0.5]), &t(vec![0.0])).is_err());

        // Graph route agrees to 6 decimals.
        let g = graph_value(|tape| {
            let r = tape.constant(t(vec![0.9, 0.8]));
            let f = tape.constant(t(vec![0.1]));
            graph_loss_discriminator(tape, r, f).unwrap()
        });
        assert!((g as f64 - want).abs() < 1e-6, "{g}");
    }

    #[test]
    fn adversarial_loss_values() {
        let eps = 1e-6f32;
        assert!(loss_adversarial(&t(vec![1.0 - eps])).unwrap().abs() < 1e-5);
        let half = loss_adversarial(&t(vec![0.5])).unwrap();
        assert!((half - 0.693147).abs() < 1e-6, "{half}");
        let two = loss_adversarial(&t(vec![0.25, 0.75])).unwrap();
        let want = 0.5 * ((4.0f64).ln() + (4.0f64 / 3.0).ln());
        assert!((two - want).abs() < 1e-6);
        assert!((two - 0.836988).abs() < 1e-6, "{two}");

        let g = graph_value(|tape| {
            let f = tape.constant(t(vec![0.25, 0.75]));
            graph_loss_adversarial(tape, f).unwrap()
        });
        assert!((g as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn conditional_loss_values() {
        // Identical features: 0.
        let f = Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap();
        let zero = loss_conditional(&f, &CondTarget::Features(&f), CondKind::Euclidean).unwrap();
        assert_eq!(zero, 0.0);

        // Per-sample difference (1,1,1,1): mean squared L2 = 4.
        let a = Tensor::from_vec(&[3, 4], vec![1.0; 12]).unwrap();
        let b = Tensor::from_vec(&[3, 4], vec![0.0; 12]).unwrap();
        let four = loss_conditional(&a, &CondTarget::Features(&b), CondKind::Euclidean).unwrap();
        assert!((four - 4.0).abs() < 1e-9);

        // Uniform logits over 10 classes: ln 10.
        let logits = Tensor::<f32>::zeros(&[4, 10]);
        let ce = loss_conditional(
            &logits,
            &CondTarget::Classes(&[0, 3, 9, 5]),
            CondKind::CrossEntropy,
        )
        .unwrap();
        assert!((ce - 2.302585).abs() < 1e-6, "{ce}");

        // One-hot targets give the same answer.
        let mut oh = Tensor::<f32>::zeros(&[4, 10]);
        for (i, &c) in [0usize, 3, 9, 5].iter().enumerate() {
            oh.data_mut()[i * 10 + c] = 1.0;
        }
        let ce2 =
            loss_conditional(&logits, &CondTarget::OneHot(&oh), CondKind::CrossEntropy).unwrap();
        assert_eq!(ce, ce2);

        // Kind/target mismatches and shape errors.
        assert!(loss_conditional(&a, &CondTarget::Features(&f), CondKind::Euclidean).is_err());
        assert!(loss_conditional(&a, &CondTarget::Features(&b), CondKind::CrossEntropy).is_err());
        assert!(CondKind::parse("taxi").is_err());

        // Graph euclidean route.
        let g = graph_value(|tape| {
            let r = tape.constant(a.clone());
            let t = tape.constant(b.clone());
            graph_loss_cond_euclidean(tape, r, t).unwrap()
        });
        assert!((g - 4.0).abs() < 1e-6);
        let g = graph_value(|tape| {
            let l = tape.constant(logits.clone());
            graph_loss_cond_cross_entropy(tape, l, &[0, 3, 9, 5]).unwrap()
        });
        assert!((g as f64 - (10.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn entropy_loss_values() {
        let z = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let zero = loss_entropy(&z, &z).unwrap();
        assert_eq!(zero, 0.0);

        // z - q = (1,1): 0.5 * 2 = 1.
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!((loss_entropy(&q, &z).unwrap() - 1.0).abs() < 1e-9);

        // z - q = (3,4): 0.5 * 25 = 12.5.
        let z2 = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let v = loss_entropy(&q, &z2).unwrap();
        assert!((v - 12.5).abs() < 1e-9, "{v}");

        let g = graph_value(|tape| {
            let qn = tape.constant(q.clone());
            let zn = tape.constant(z2.clone());
            graph_loss_entropy(tape, qn, zn).unwrap()
        });
        assert!((g - 12.5).abs() < 1e-6);

        assert!(loss_entropy(&q, &Tensor::<f32>::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let w = LossWeights::default();
        let v = total_generator_loss(0.7, 0.2, 0.05, &w);
        assert!((v - 1.4).abs() < 1e-12);
        let adv_only = LossWeights {
            adversarial: 1.0,
            conditional: 0.0,
            entropy: 0.0,
        };
        assert_eq!(total_generator_loss(0.7, 123.0, 99.0, &adv_only), 0.7);
        assert_eq!(total_generator_loss(0.0, 0.0, 0.0, &w), 0.0);

        let g = graph_value(|tape| {
            let a = tape.constant(Tensor::scalar(0.7f32));
            let c = tape.constant(Tensor::scalar(0.2f32));
            let e = tape.constant(Tensor::scalar(0.05f32));
            graph_total_generator_loss(tape, a, Some(c), Some(e), &w).unwrap()
        });
        assert!((g - 1.4).abs() < 1e-6);
    }

    #[test]
    fn losses_nonnegative_and_permutation_invariant() {
        let mut rng = RngStream::new(123, 5);
        for trial in 0..50u64 {
            let n = 3 + (trial % 5) as usize;
            let probs: Vec<f32> = (0..n)
                .map(|_| (rng.next_f64() * 0.98 + 0.01) as f32)
                .collect();
            let fake: Vec<f32> = (0..n)
                .map(|_| (rng.next_f64() * 0.98 + 0.01) as f32)
                .collect();
            let ld = loss_discriminator(&t(probs.clone()), &t(fake.clone())).unwrap();
            let la = loss_adversarial(&t(fake.clone())).unwrap();
            assert!(ld >= 0.0 && la >= 0.0);

            // Reverse the batch order: identical losses.
            let mut rp = probs.clone();
            rp.reverse();
            let mut rf = fake.clone();
            rf.reverse();
            let ld2 = loss_discriminator(&t(rp), &t(rf.clone())).unwrap();
            let la2 = loss_adversarial(&t(rf)).unwrap();
            assert!((ld - ld2).abs() < 1e-12);
            assert!((la - la2).abs() < 1e-12);
        }
    }

    /// The entropy loss equals the negative Gaussian log-likelihood up to
    /// the additive constant (noise_dim/2) ln(2 pi), sigma = 1.
    #[test]
    fn entropy_loss_is_gaussian_nll_minus_constant() {
        let mut rng = RngStream::new(9, 9);
        let (b, d) = (6, 5);
        let z: Tensor<f32> = rng.normal_tensor(&[b, d]);
        let q: Tensor<f32> = rng.normal_tensor(&[b, d]);
        let ent = loss_entropy(&q, &z).unwrap();
        let mut nll = 0.0f64;
        for i in 0..b {
            for j in 0..d {
                let diff = z.data()[i * d + j] as f64 - q.data()[i * d + j] as f64;
                // -log N(z; mu, 1) = 0.5 ln(2 pi) + 0.5 diff^2
                nll += 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * diff * diff;
            }
        }
        nll /= b as f64;
        let constant = d as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!(
            (ent - (nll - constant)).abs() < 1e-9,
            "{ent} vs {}",
            nll - constant
        );
    }
}
