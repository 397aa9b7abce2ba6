//! Pretraining of the bottom-up classifier, its decomposition into
//! stacks, and "real" representation extraction for GAN training.
//!
//! The encoder is frozen everywhere downstream: its parameters bind to
//! training tapes as constants, so gradients reach generated inputs but
//! never the encoder weights.

use std::collections::BTreeMap;

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    bind_params, build_encoder_spec, forward_graph, init_params, Bindings, Mode, ModelSpec,
    ParamStore,
};
use crate::ops::Op;
use crate::optim::AdamHyper;
use crate::rng::RngStream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Decomposition of the encoder into bottom-up mappings E_0..E_{N-1}.
/// `bounds` has N+1 layer indices; E_i spans layers [bounds[i], bounds[i+1]).
#[derive(Debug, Clone, PartialEq)]
pub struct StackSpec {
    pub num_stacks: usize,
    pub cut_points: Vec<String>,
    pub bounds: Vec<usize>,
    /// Representation shape per level, length N+1: level 0 is the image,
    /// level N the class-score vector.
    pub level_shapes: Vec<Vec<usize>>,
}

/// Cut the encoder after each named layer (its activation included).
pub fn split_stacks(spec: &ModelSpec, cut_points: &[String]) -> Result<StackSpec> {
    let mut bounds = vec![0usize];
    let mut level_shapes = vec![spec.input_shape.clone()];
    for name in cut_points {
        let idx = spec.layer_index(name).ok_or_else(|| Error::Unknown {
            what: "cut layer",
            name: name.clone(),
        })?;
        let end = idx + 1;
        if end <= *bounds.last().unwrap() {
            return Err(Error::Config(format!(
                "cut points out of order at `{name}`"
            )));
        }
        if end >= spec.layers.len() {
            return Err(Error::Config(format!(
                "cut `{name}` leaves an empty top stack"
            )));
        }
        bounds.push(end);
        level_shapes.push(spec.layer_output_shape(idx).to_vec());
    }
    bounds.push(spec.layers.len());
    level_shapes.push(spec.output_shape.clone());
    Ok(StackSpec {
        num_stacks: cut_points.len() + 1,
        cut_points: cut_points.to_vec(),
        bounds,
        level_shapes,
    })
}

/// Trained classifier plus its stack decomposition.
#[derive(Debug, Clone)]
pub struct EncoderArtifact {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
    pub stack: StackSpec,
    pub test_accuracy: f64,
}

impl EncoderArtifact {
    /// Sub-model applying E_from .. E_{to-1}.
    pub fn stage_spec(&self, from_level: usize, to_level: usize) -> Result<ModelSpec> {
        if from_level >= to_level || to_level > self.stack.num_stacks {
            return Err(Error::Config(format!(
                "encode_up levels {from_level}..{to_level} out of range (N = {})",
                self.stack.num_stacks
            )));
        }
        self.spec
            .slice(self.stack.bounds[from_level], self.stack.bounds[to_level])
    }

    /// Bind the frozen encoder onto a tape.
    pub fn bind(&self, tape: &mut Tape<f32>) -> Bindings {
        bind_params(tape, &self.params, false)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub fc3_dim: usize,
    pub conv_channels: (usize, usize),
    /// Horizontal-flip augmentation (off by default; meant for CIFAR-like data).
    pub hflip: bool,
    pub cut_points: Vec<String>,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 1,
            fc3_dim: 256,
            conv_channels: (32, 64),
            hflip: false,
            cut_points: vec!["fc3".to_string()],
        }
    }
}

/// Flip each sample left-right with probability 1/2.
fn hflip_half(images: &Tensor<f32>, stream: &mut RngStream) -> Tensor<f32> {
    let [n, c, h, w] = *images.shape() else {
        unreachable!()
    };
    let mut out = images.clone();
    for i in 0..n {
        if stream.next_below(2) == 1 {
            let base = i * c * h * w;
            let dst = &mut out.data_mut()[base..base + c * h * w];
            for ch in 0..c {
                for r in 0..h {
                    dst[ch * h * w + r * w..ch * h * w + (r + 1) * w].reverse();
                }
            }
        }
    }
    out
}

/// Softmax cross-entropy training of the encoder with Adam; reports
/// final test accuracy. Fully deterministic in `config.seed`.
pub fn pretrain_encoder(
    train: &Dataset,
    test: &Dataset,
    config: &EncoderTrainConfig,
) -> Result<EncoderArtifact> {
    let spec = build_encoder_spec(
        train.image_shape(),
        train.num_classes,
        config.fc3_dim,
        config.conv_channels,
    )?;
    let root = RngStream::new(config.seed, 0xE0C0);
    let mut init_stream = root.derive(1);
    let hyper = AdamHyper {
        lr: config.lr,
        ..AdamHyper::CLASSIFIER
    };
    let mut params: ParamStore<f32> = init_params(&spec, &mut init_stream, hyper);
    let mut shuffle_stream = root.derive(2);
    let mut flip_stream = root.derive(3);

    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        for (images, labels) in batches(train, config.batch_size, &mut shuffle_stream, true) {
            let images = if config.hflip {
                hflip_half(&images, &mut flip_stream)
            } else {
                images
            };
            let mut tape = Tape::new();
            let binds = bind_params(&mut tape, &params, true);
            let x = tape.constant(images);
            let out = forward_graph(&spec, &binds, &mut tape, x, Mode::Train)
                .map_err(|e| wrap_div(e, step))?;
            let loss = tape
                .apply(Op::CrossEntropyMean { targets: labels }, &[out.output])
                .map_err(|e| wrap_div(e, step))?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Divergence {
                    phase: "encoder",
                    level: 0,
                    step,
                    terms: format!("loss = {}", tape.value(loss).item()),
                });
            }
            let mut grads = tape.backward(loss)?;
            let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for (name, id) in binds.iter() {
                if let Some(g) = grads.take(*id) {
                    by_name.insert(name.clone(), g);
                }
            }
            params.adam_step_all(&by_name)?;
            for (layer, stats) in &out.bn_batch_stats {
                params.update_bn(layer, stats, crate::nn::BN_MOMENTUM);
            }
            step += 1;
        }
    }

    let stack = split_stacks(&spec, &config.cut_points)?;
    let mut artifact = EncoderArtifact {
        spec,
        params,
        stack,
        test_accuracy: 0.0,
    };
    artifact.test_accuracy = evaluate_accuracy(&artifact, test)?;
    Ok(artifact)
}

fn wrap_div(e: Error, step: usize) -> Error {
    match e {
        Error::Domain { op, detail } => Error::Divergence {
            phase: "encoder",
            level: 0,
            step,
            terms: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Fraction of test samples whose argmax logit matches the label.
pub fn evaluate_accuracy(artifact: &EncoderArtifact, test: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    let mut stream = RngStream::new(0, 0);
    for (images, labels) in batches(test, 256, &mut stream, false) {
        let logits = extract_features(artifact, &images, artifact.stack.num_stacks)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == label);
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// h_level for a batch of images: level 0 is the input itself, level N
/// the class scores. Eval mode, no gradients.
pub fn extract_features(
    artifact: &EncoderArtifact,
    images: &Tensor<f32>,
    level: usize,
) -> Result<Tensor<f32>> {
    if level > artifact.stack.num_stacks {
        return Err(Error::Config(format!(
            "level {level} out of range (N = {})",
            artifact.stack.num_stacks
        )));
    }
    if level == 0 {
        return Ok(images.clone());
    }
    let mut tape = Tape::new();
    let binds = artifact.bind(&mut tape);
    let x = tape.constant(images.clone());
    let out = encode_up_graph(artifact, &mut tape, &binds, x, 0, level)?;
    Ok(tape.value(out).clone())
}

/// Apply E_from..E_{to-1} on the tape. Differentiable with respect to the
/// input; encoder parameters stay frozen (bound as constants).
pub fn encode_up_graph(
    artifact: &EncoderArtifact,
    tape: &mut Tape<f32>,
    encoder_binds: &Bindings,
    input: NodeId,
    from_level: usize,
    to_level: usize,
) -> Result<NodeId> {
    let spec = artifact.stage_spec(from_level, to_level)?;
    let pass = forward_graph(&spec, encoder_binds, tape, input, Mode::Eval)?;
    Ok(pass.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::tape::finite_diff_at;

    fn tiny_artifact() -> EncoderArtifact {
        // Random (untrained) encoder is enough for structural tests.
        let spec = build_encoder_spec(&[1, 16, 16], 4, 32, (4, 8)).unwrap();
        let mut s = RngStream::new(3, 3);
        let params = init_params(&spec, &mut s, AdamHyper::CLASSIFIER);
        let stack = split_stacks(&spec, &["fc3".to_string()]).unwrap();
        EncoderArtifact {
            spec,
            params,
            stack,
            test_accuracy: 0.0,
        }
    }

    #[test]
    fn split_two_stacks() {
        let art = tiny_artifact();
        assert_eq!(art.stack.num_stacks, 2);
        assert_eq!(art.stack.level_shapes[0], vec![1, 16, 16]);
        assert_eq!(art.stack.level_shapes[1], vec![32]);
        assert_eq!(art.stack.level_shapes[2], vec![4]);
    }

    #[test]
    fn split_errors() {
        let art = tiny_artifact();
        assert!(split_stacks(&art.spec, &["nope".to_string()]).is_err());
        assert!(split_stacks(&art.spec, &["fc3".to_string(), "conv1".to_string()]).is_err());
        // Cutting at the last layer would leave an empty top stack.
        assert!(split_stacks(&art.spec, &["fc4".to_string()]).is_err());
        // No cuts: degenerate single-stack model.
        let s = split_stacks(&art.spec, &[]).unwrap();
        assert_eq!(s.num_stacks, 1);
        assert_eq!(s.level_shapes.len(), 2);
    }

    #[test]
    fn composition_matches_full_forward_bitwise() {
        let art = tiny_artifact();
        let x = RngStream::new(5, 1).normal_tensor::<f32>(&[9, 1, 16, 16]);
        let full = extract_features(&art, &x, 2).unwrap();
        let mid = extract_features(&art, &x, 1).unwrap();
        assert!(mid.data().iter().all(|&v| v >= 0.0), "fc3 is post-relu");

        let mut tape = Tape::new();
        let binds = art.bind(&mut tape);
        let h = tape.constant(mid);
        let top = encode_up_graph(&art, &mut tape, &binds, h, 1, 2).unwrap();
        assert_eq!(tape.value(top).data(), full.data());

        // Level 0 is the identity.
        let same = extract_features(&art, &x, 0).unwrap();
        assert_eq!(same.data(), x.data());
    }

    #[test]
    fn encode_up_differentiable_but_frozen() {
        let art = tiny_artifact();
        let h = RngStream::new(6, 1)
            .normal_tensor::<f32>(&[2, 32])
            .map(|v| v.abs());

        let mut tape = Tape::new();
        let binds = art.bind(&mut tape);
        let hid = tape.leaf(h.clone());
        let out = encode_up_graph(&art, &mut tape, &binds, hid, 1, 2).unwrap();
        let sq = tape.apply(Op::Mul, &[out, out]).unwrap();
        let loss = tape.apply(Op::ReduceMean, &[sq]).unwrap();
        let grads = tape.backward(loss).unwrap();

        // No gradient reaches encoder parameters.
        for (name, id) in binds.iter() {
            assert!(
                grads.get(*id).is_none(),
                "encoder param {name} got a gradient"
            );
        }

        // Gradient w.r.t. the representation matches finite differences
        // through an f64 re-evaluation.
        let g = grads.get(hid).unwrap();
        let spec64 = art.stage_spec(1, 2).unwrap();
        let params64 = art.params.widen();
        let h64 = h.to_f64();
        let mut rng = RngStream::new(7, 7);
        for _ in 0..10 {
            let coord = rng.next_below(h64.numel() as u64) as usize;
            let fd = finite_diff_at(
                |probe: &crate::tensor::Tensor<f64>| {
                    let out = crate::nn::forward_eval(&spec64, &params64, probe)?;
                    let mean = out.data().iter().map(|v| v * v).sum::<f64>() / out.numel() as f64;
                    Ok(mean)
                },
                &h64,
                coord,
                1e-3,
            )
            .unwrap();
            let an = g.data()[coord] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-2, "coord {coord}: {an} vs {fd}");
        }
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        let train = make_synthetic(4, 50, 16, 11);
        let test = make_synthetic(4, 100, 16, 12);
        let cfg = EncoderTrainConfig {
            epochs: 0,
            fc3_dim: 32,
            conv_channels: (4, 8),
            seed: 11,
            ..Default::default()
        };
        let art = pretrain_encoder(&train, &test, &cfg).unwrap();
        assert!(
            (art.test_accuracy - 0.25).abs() <= 0.05,
            "untrained accuracy {}",
            art.test_accuracy
        );
    }

    #[test]
    fn short_training_is_deterministic_and_learns() {
        let train = make_synthetic(4, 120, 16, 21);
        let test = make_synthetic(4, 40, 16, 22);
        let cfg = EncoderTrainConfig {
            epochs: 8,
            fc3_dim: 64,
            conv_channels: (8, 16),
            seed: 5,
            ..Default::default()
        };
        let a = pretrain_encoder(&train, &test, &cfg).unwrap();
        let b = pretrain_encoder(&train, &test, &cfg).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(
                t.data(),
                b.params.get(name).unwrap().data(),
                "{name} differs across runs"
            );
        }
        assert!(
            a.test_accuracy > 0.9,
            "accuracy after 8 epochs: {}",
            a.test_accuracy
        );
    }
}
