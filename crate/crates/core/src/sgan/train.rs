//! Per-stack GAN training: independent and joint phases, the single-GAN
//! ablation variants, and top-down sampling.

use std::collections::BTreeMap;

use crate::data::{batches, one_hot, Dataset};
use crate::encoder::{encode_up_graph, extract_features, EncoderArtifact};
use crate::error::{Error, Result};
use crate::nn::{
    bind_params, build_discriminator_spec, build_generator_spec, forward_graph, init_params,
    Bindings, DiscSpec, GanArch, Mode, ModelSpec, ParamStore, BN_MOMENTUM,
};
use crate::ops::Op;
use crate::optim::AdamHyper;
use crate::rng::RngStream;
use crate::sgan::losses::{
    graph_loss_adversarial, graph_loss_cond_cross_entropy, graph_loss_cond_euclidean,
    graph_loss_discriminator, graph_loss_entropy, graph_total_generator_loss, LossWeights,
};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// One GAN level: generator, two-headed discriminator, and its noise stream.
#[derive(Debug, Clone)]
pub struct StackGan {
    pub level: usize,
    pub gen_spec: ModelSpec,
    pub disc_spec: DiscSpec,
    pub gen: ParamStore<f32>,
    pub trunk: ParamStore<f32>,
    pub d_head: ParamStore<f32>,
    pub q_head: ParamStore<f32>,
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub noise_stream: RngStream,
}

/// Top-down stack of GANs (index 0 generates images; the last level is
/// the top). Single-GAN variants hold one level.
#[derive(Debug, Clone)]
pub struct StackModels {
    pub levels: Vec<StackGan>,
    pub num_classes: usize,
}

impl StackModels {
    pub fn top_level(&self) -> usize {
        self.levels.len() - 1
    }

    /// Named stores with checkpoint-style prefixes, deterministic order.
    pub fn stores(&self) -> Vec<(String, &ParamStore<f32>)> {
        let mut out = Vec::new();
        for gan in &self.levels {
            let l = gan.level;
            out.push((format!("g{l}"), &gan.gen));
            out.push((format!("d{l}.trunk"), &gan.trunk));
            out.push((format!("d{l}.head"), &gan.d_head));
            out.push((format!("q{l}"), &gan.q_head));
        }
        out
    }

    pub fn stores_mut(&mut self) -> Vec<(String, &mut ParamStore<f32>)> {
        let mut out = Vec::new();
        for gan in &mut self.levels {
            let l = gan.level;
            out.push((format!("g{l}"), &mut gan.gen));
            out.push((format!("d{l}.trunk"), &mut gan.trunk));
            out.push((format!("d{l}.head"), &mut gan.d_head));
            out.push((format!("q{l}"), &mut gan.q_head));
        }
        out
    }
}

/// Representation shape at `level` flattened to a conditioning width.
fn flat_dim(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[allow(clippy::too_many_arguments)]
fn build_level(
    level: usize,
    cond_dim: usize,
    noise_dim: usize,
    out_shape: &[usize],
    arch: &GanArch,
    hyper: AdamHyper,
    init_root: &RngStream,
    noise_root: &RngStream,
) -> Result<StackGan> {
    let builder_level = if out_shape.len() == 3 { 0 } else { 1 };
    let gen_spec = build_generator_spec(builder_level, cond_dim, noise_dim, out_shape, arch)?;
    let disc_spec = build_discriminator_spec(builder_level, out_shape, noise_dim, arch)?;
    let mut s_gen = init_root.derive(10 + level as u64);
    let mut s_trunk = init_root.derive(20 + level as u64);
    let mut s_dh = init_root.derive(30 + level as u64);
    let mut s_qh = init_root.derive(40 + level as u64);
    Ok(StackGan {
        level,
        gen: init_params(&gen_spec, &mut s_gen, hyper),
        trunk: init_params(&disc_spec.trunk, &mut s_trunk, hyper),
        d_head: init_params(&disc_spec.d_head, &mut s_dh, hyper),
        q_head: init_params(&disc_spec.q_head, &mut s_qh, hyper),
        gen_spec,
        disc_spec,
        noise_dim,
        cond_dim,
        noise_stream: noise_root.derive(50 + level as u64),
    })
}

/// All N stacked levels: level i generates h_i conditioned on h_{i+1};
/// the top conditions on one-hot labels.
#[allow(clippy::too_many_arguments)]
pub fn build_stacked_models(
    encoder: &EncoderArtifact,
    num_classes: usize,
    noise_dim: usize,
    arch: &GanArch,
    hyper: AdamHyper,
    init_root: &RngStream,
    noise_root: &RngStream,
) -> Result<StackModels> {
    let n = encoder.stack.num_stacks;
    let mut levels = Vec::with_capacity(n);
    for level in 0..n {
        let cond_dim = if level == n - 1 {
            num_classes
        } else {
            flat_dim(&encoder.stack.level_shapes[level + 1])
        };
        levels.push(build_level(
            level,
            cond_dim,
            noise_dim,
            &encoder.stack.level_shapes[level].clone(),
            arch,
            hyper,
            init_root,
            noise_root,
        )?);
    }
    Ok(StackModels {
        levels,
        num_classes,
    })
}

/// One image-level GAN conditioned on labels (or nothing).
#[allow(clippy::too_many_arguments)]
pub fn build_single_gan(
    image_shape: &[usize],
    num_classes: usize,
    conditioned: bool,
    noise_dim: usize,
    arch: &GanArch,
    hyper: AdamHyper,
    init_root: &RngStream,
    noise_root: &RngStream,
) -> Result<StackModels> {
    let cond_dim = if conditioned { num_classes } else { 0 };
    let gan = build_level(
        0,
        cond_dim,
        noise_dim,
        image_shape,
        arch,
        hyper,
        init_root,
        noise_root,
    )?;
    Ok(StackModels {
        levels: vec![gan],
        num_classes,
    })
}

/// Per-iteration loss record matching the CSV log schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub phase: &'static str,
    pub level: usize,
    pub step: usize,
    pub loss_d: f64,
    pub loss_adv: f64,
    pub loss_cond: f64,
    pub loss_ent: f64,
    pub loss_g_total: f64,
}

#[derive(Debug, Clone)]
pub struct PhaseConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Discriminator updates per iteration ("updated alternately"; 1/1
    /// by default).
    pub d_steps: usize,
    /// Generator (+Q) updates per iteration.
    pub g_steps: usize,
}

impl PhaseConfig {
    pub fn new(iterations: usize, batch_size: usize, weights: LossWeights) -> Self {
        PhaseConfig {
            iterations,
            batch_size,
            weights,
            d_steps: 1,
            g_steps: 1,
        }
    }
}

fn take_grads(binds: &Bindings, grads: &mut Gradients<f32>) -> BTreeMap<String, Tensor<f32>> {
    let mut by_name = BTreeMap::new();
    for (name, id) in binds.iter() {
        if let Some(g) = grads.take(*id) {
            by_name.insert(name.clone(), g);
        }
    }
    by_name
}

fn divergence(phase: &'static str, level: usize, step: usize, terms: String) -> Error {
    Error::Divergence {
        phase,
        level,
        step,
        terms,
    }
}

fn wrap_err(e: Error, phase: &'static str, level: usize, step: usize) -> Error {
    match e {
        Error::Domain { op, detail } => divergence(phase, level, step, format!("{op}: {detail}")),
        other => other,
    }
}

/// Generator forward without gradients, train-mode batch norm; used to
/// produce the fake batch for discriminator updates.
fn gen_forward_detached(
    gan: &StackGan,
    cond: Option<&Tensor<f32>>,
    z: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let binds = bind_params(&mut tape, &gan.gen, false);
    let zid = tape.constant(z.clone());
    let gin = match cond {
        Some(c) => {
            let cid = tape.constant(c.clone());
            tape.apply(Op::Concat { axis: 1 }, &[cid, zid])?
        }
        None => zid,
    };
    let pass = forward_graph(&gan.gen_spec, &binds, &mut tape, gin, Mode::Train)?;
    Ok(tape.value(pass.output).clone())
}

/// One discriminator update on (real, fake) representations; returns Eq. 4.
fn disc_step(
    gan: &mut StackGan,
    h_real: &Tensor<f32>,
    h_fake: &Tensor<f32>,
    phase: &'static str,
    step: usize,
) -> Result<f64> {
    let level = gan.level;
    let mut tape = Tape::new();
    let trunk_b = bind_params(&mut tape, &gan.trunk, true);
    let dh_b = bind_params(&mut tape, &gan.d_head, true);
    let real_in = tape.constant(h_real.clone());
    let fake_in = tape.constant(h_fake.clone());
    let tr_real = forward_graph(
        &gan.disc_spec.trunk,
        &trunk_b,
        &mut tape,
        real_in,
        Mode::Train,
    )
    .map_err(|e| wrap_err(e, phase, level, step))?;
    let tr_fake = forward_graph(
        &gan.disc_spec.trunk,
        &trunk_b,
        &mut tape,
        fake_in,
        Mode::Train,
    )
    .map_err(|e| wrap_err(e, phase, level, step))?;
    let d_real = forward_graph(
        &gan.disc_spec.d_head,
        &dh_b,
        &mut tape,
        tr_real.output,
        Mode::Train,
    )?;
    let d_fake = forward_graph(
        &gan.disc_spec.d_head,
        &dh_b,
        &mut tape,
        tr_fake.output,
        Mode::Train,
    )?;
    let loss = graph_loss_discriminator(&mut tape, d_real.output, d_fake.output)?;
    let loss_val = tape.value(loss).item() as f64;
    if !loss_val.is_finite() {
        return Err(divergence(
            phase,
            level,
            step,
            format!("loss_d = {loss_val}"),
        ));
    }
    let mut grads = tape.backward(loss)?;
    let trunk_grads = take_grads(&trunk_b, &mut grads);
    let dh_grads = take_grads(&dh_b, &mut grads);
    gan.trunk.adam_step_all(&trunk_grads)?;
    gan.d_head.adam_step_all(&dh_grads)?;
    for (layer, stats) in tr_real.bn_batch_stats.iter().chain(&tr_fake.bn_batch_stats) {
        gan.trunk.update_bn(layer, stats, BN_MOMENTUM);
    }
    Ok(loss_val)
}

/// Conditional-loss target plan for one level in one step.
struct CondPlan<'a> {
    /// Class targets for the top level's cross-entropy recovery loss.
    labels: &'a [usize],
    /// encode_up span for the recovery loss.
    span: (usize, usize),
    is_top: bool,
}

/// (total loss node, [adv, cond, ent, total] values).
type GenLossOut = (NodeId, [f64; 4]);

/// Generator + Q loss terms for one level. The conditioning node may
/// itself be generated (joint phase), letting gradients flow into the
/// upper generator.
#[allow(clippy::too_many_arguments)]
fn gen_loss_terms(
    tape: &mut Tape<f32>,
    gan: &StackGan,
    encoder: &EncoderArtifact,
    enc_b: &Bindings,
    gen_b: &Bindings,
    trunk_b: &Bindings,
    dh_b: &Bindings,
    qh_b: &Bindings,
    fake: NodeId,
    z: NodeId,
    cond_node: Option<NodeId>,
    plan: &CondPlan,
    weights: &LossWeights,
) -> Result<GenLossOut> {
    let tr = forward_graph(&gan.disc_spec.trunk, trunk_b, tape, fake, Mode::Train)?;
    let d = forward_graph(&gan.disc_spec.d_head, dh_b, tape, tr.output, Mode::Train)?;
    let adv = graph_loss_adversarial(tape, d.output)?;

    let cond_loss = if weights.conditional > 0.0 && (plan.is_top || cond_node.is_some()) {
        let recovered = encode_up_graph(encoder, tape, enc_b, fake, plan.span.0, plan.span.1)?;
        Some(if plan.is_top {
            graph_loss_cond_cross_entropy(tape, recovered, plan.labels)?
        } else {
            graph_loss_cond_euclidean(tape, recovered, cond_node.expect("feature conditioning"))?
        })
    } else {
        None
    };

    let ent_loss = if weights.entropy > 0.0 {
        let q = forward_graph(&gan.disc_spec.q_head, qh_b, tape, tr.output, Mode::Train)?;
        Some(graph_loss_entropy(tape, q.output, z)?)
    } else {
        None
    };

    let total = graph_total_generator_loss(tape, adv, cond_loss, ent_loss, weights)?;
    let vals = [
        tape.value(adv).item() as f64,
        cond_loss.map_or(0.0, |n| tape.value(n).item() as f64),
        ent_loss.map_or(0.0, |n| tape.value(n).item() as f64),
        tape.value(total).item() as f64,
    ];
    let _ = gen_b;
    Ok((total, vals))
}

/// Independent training of one stack (Fig. 1(b), left): the generator
/// conditions on encoder features of real data; D contrasts encoder
/// representations with generated ones; G and Q update jointly on the
/// three-term loss.
pub fn train_stack_independent(
    level: usize,
    encoder: &EncoderArtifact,
    models: &mut StackModels,
    data: &Dataset,
    cfg: &PhaseConfig,
    shuffle: &mut RngStream,
    phase: &'static str,
) -> Result<Vec<LossRow>> {
    cfg.weights.validate()?;
    let top = models.top_level();
    let enc_stacks = encoder.stack.num_stacks;
    let num_classes = models.num_classes;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut step = 0usize;
    'outer: loop {
        for (images, labels) in batches(data, cfg.batch_size, shuffle, true) {
            if step >= cfg.iterations {
                break 'outer;
            }
            let b = images.dim0();
            let gan = &models.levels[level];
            let is_top = level == top;

            let h_real = extract_features(encoder, &images, level)?;
            let cond: Option<Tensor<f32>> = if gan.cond_dim == 0 {
                None
            } else if is_top {
                Some(one_hot(&labels, num_classes))
            } else {
                let feats = extract_features(encoder, &images, level + 1)?;
                let n = feats.dim0();
                let d = feats.sample_len();
                Some(feats.reshaped(&[n, d])?)
            };
            let z: Tensor<f32> = {
                let gan = &mut models.levels[level];
                let dim = gan.noise_dim;
                gan.noise_stream.normal_tensor(&[b, dim])
            };

            // Discriminator updates on the current generator's output.
            let fake = gen_forward_detached(&models.levels[level], cond.as_ref(), &z)?;
            let mut loss_d = 0.0;
            for _ in 0..cfg.d_steps {
                loss_d = disc_step(&mut models.levels[level], &h_real, &fake, phase, step)?;
            }

            // Generator + Q updates against the updated discriminator.
            let mut g_out = None;
            for _ in 0..cfg.g_steps {
                let gan = &models.levels[level];
                let mut tape = Tape::new();
                let gen_b = bind_params(&mut tape, &gan.gen, true);
                let trunk_b = bind_params(&mut tape, &gan.trunk, false);
                let dh_b = bind_params(&mut tape, &gan.d_head, false);
                let qh_b = bind_params(&mut tape, &gan.q_head, true);
                let enc_b = encoder.bind(&mut tape);
                let z_node = tape.constant(z.clone());
                let cond_node = cond.as_ref().map(|c| tape.constant(c.clone()));
                let gin = match cond_node {
                    Some(c) => tape.apply(Op::Concat { axis: 1 }, &[c, z_node])?,
                    None => z_node,
                };
                let gpass = forward_graph(&gan.gen_spec, &gen_b, &mut tape, gin, Mode::Train)
                    .map_err(|e| wrap_err(e, phase, level, step))?;
                let span = if is_top {
                    (level, enc_stacks)
                } else {
                    (level, level + 1)
                };
                let plan = CondPlan {
                    labels: &labels,
                    span,
                    is_top,
                };
                let (total, vals) = gen_loss_terms(
                    &mut tape,
                    gan,
                    encoder,
                    &enc_b,
                    &gen_b,
                    &trunk_b,
                    &dh_b,
                    &qh_b,
                    gpass.output,
                    z_node,
                    cond_node,
                    &plan,
                    &cfg.weights,
                )
                .map_err(|e| wrap_err(e, phase, level, step))?;
                if !vals.iter().all(|v| v.is_finite()) {
                    return Err(divergence(
                        phase,
                        level,
                        step,
                        format!("adv = {}, cond = {}, ent = {}", vals[0], vals[1], vals[2]),
                    ));
                }
                let mut grads = tape.backward(total)?;
                let gen_grads = take_grads(&gen_b, &mut grads);
                let q_grads = take_grads(&qh_b, &mut grads);
                let gan = &mut models.levels[level];
                gan.gen.adam_step_all(&gen_grads)?;
                if cfg.weights.entropy > 0.0 {
                    gan.q_head.adam_step_all(&q_grads)?;
                }
                for (layer, stats) in &gpass.bn_batch_stats {
                    gan.gen.update_bn(layer, stats, BN_MOMENTUM);
                }
                g_out = Some(vals);
            }

            let vals = g_out.expect("at least one generator step");
            rows.push(LossRow {
                phase,
                level,
                step,
                loss_d,
                loss_adv: vals[0],
                loss_cond: vals[1],
                loss_ent: vals[2],
                loss_g_total: vals[3],
            });
            step += 1;
        }
    }
    Ok(rows)
}

/// Top-down generation of all representations without gradients
/// (train-mode batch norm for training, eval for sampling).
pub fn forward_chain(
    models: &StackModels,
    cond_top: Option<&Tensor<f32>>,
    zs: &[Tensor<f32>],
    mode: Mode,
) -> Result<Vec<Tensor<f32>>> {
    let n = models.levels.len();
    let mut chain = vec![Tensor::zeros(&[1]); n];
    let mut cond = cond_top.cloned();
    for level in (0..n).rev() {
        let gan = &models.levels[level];
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &gan.gen, false);
        let zid = tape.constant(zs[level].clone());
        let gin = match (&cond, gan.cond_dim) {
            (_, 0) => zid,
            (Some(c), _) => {
                let cid = tape.constant(c.clone());
                tape.apply(Op::Concat { axis: 1 }, &[cid, zid])?
            }
            (None, d) => {
                return Err(Error::Config(format!(
                    "level {level} expects {d}-dim conditioning"
                )))
            }
        };
        let pass = forward_graph(&gan.gen_spec, &binds, &mut tape, gin, mode)?;
        let out = tape.value(pass.output).clone();
        // The level below conditions on this output, flattened.
        let b = out.dim0();
        let d = out.sample_len();
        cond = Some(out.reshaped(&[b, d])?);
        chain[level] = out;
    }
    Ok(chain)
}

/// Joint end-to-end training (Fig. 1(b), right): the chain is generated
/// from sampled labels; every D_i contrasts real encoder features with
/// the generated ones; one backward pass drives all generators, with
/// cross-level gradient flowing through the generated conditioning.
pub fn train_joint(
    encoder: &EncoderArtifact,
    models: &mut StackModels,
    data: &Dataset,
    cfg: &PhaseConfig,
    shuffle: &mut RngStream,
    label_stream: &mut RngStream,
) -> Result<Vec<LossRow>> {
    cfg.weights.validate()?;
    let n = models.levels.len();
    let enc_stacks = encoder.stack.num_stacks;
    let num_classes = models.num_classes;
    let mut rows = Vec::with_capacity(cfg.iterations * n);
    let mut step = 0usize;
    'outer: loop {
        for (images, _labels) in batches(data, cfg.batch_size, shuffle, true) {
            if step >= cfg.iterations {
                break 'outer;
            }
            let b = images.dim0();
            let sampled: Vec<usize> = (0..b)
                .map(|_| label_stream.next_below(num_classes as u64) as usize)
                .collect();
            let cond_top = one_hot(&sampled, num_classes);
            // Draw noise top-down.
            let mut zs = vec![Tensor::zeros(&[1]); n];
            for level in (0..n).rev() {
                let gan = &mut models.levels[level];
                zs[level] = gan.noise_stream.normal_tensor(&[b, gan.noise_dim]);
            }

            // Discriminator updates per level on the detached chain.
            let chain = forward_chain(models, Some(&cond_top), &zs, Mode::Train)?;
            let mut loss_d = vec![0.0f64; n];
            for level in (0..n).rev() {
                let h_real = extract_features(encoder, &images, level)?;
                for _ in 0..cfg.d_steps {
                    loss_d[level] = disc_step(
                        &mut models.levels[level],
                        &h_real,
                        &chain[level],
                        "joint",
                        step,
                    )?;
                }
            }

            // One tape for the whole generator chain.
            let mut tape = Tape::new();
            let enc_b = encoder.bind(&mut tape);
            let mut gen_bs = Vec::with_capacity(n);
            let mut trunk_bs = Vec::with_capacity(n);
            let mut dh_bs = Vec::with_capacity(n);
            let mut qh_bs = Vec::with_capacity(n);
            for gan in &models.levels {
                gen_bs.push(bind_params(&mut tape, &gan.gen, true));
                trunk_bs.push(bind_params(&mut tape, &gan.trunk, false));
                dh_bs.push(bind_params(&mut tape, &gan.d_head, false));
                qh_bs.push(bind_params(&mut tape, &gan.q_head, true));
            }
            let top_cond = tape.constant(cond_top.clone());
            let mut cond_node = Some(top_cond);
            let mut fakes = vec![None; n];
            let mut z_nodes = vec![None; n];
            let mut bn_updates: Vec<Vec<(String, crate::ops::BnStats)>> = vec![Vec::new(); n];
            for level in (0..n).rev() {
                let gan = &models.levels[level];
                let zid = tape.constant(zs[level].clone());
                z_nodes[level] = Some(zid);
                let gin = match (cond_node, gan.cond_dim) {
                    (_, 0) => zid,
                    (Some(c), _) => tape.apply(Op::Concat { axis: 1 }, &[c, zid])?,
                    (None, _) => unreachable!("stacked levels are conditioned"),
                };
                let gpass =
                    forward_graph(&gan.gen_spec, &gen_bs[level], &mut tape, gin, Mode::Train)
                        .map_err(|e| wrap_err(e, "joint", level, step))?;
                bn_updates[level] = gpass.bn_batch_stats;
                fakes[level] = Some(gpass.output);
                // Flatten for the next conditioning.
                let shape = tape.value(gpass.output).shape().to_vec();
                let flat: usize = shape[1..].iter().product();
                cond_node = Some(tape.apply(
                    Op::Reshape {
                        shape: vec![shape[0], flat],
                    },
                    &[gpass.output],
                )?);
            }

            // Per-level three-term losses summed into one objective.
            let mut total: Option<NodeId> = None;
            let mut per_level = vec![[0.0f64; 4]; n];
            for level in (0..n).rev() {
                let gan = &models.levels[level];
                let is_top = level == n - 1;
                let span = if is_top {
                    (level, enc_stacks)
                } else {
                    (level, level + 1)
                };
                // Conditioning target of level i is the generated h_{i+1}
                // (flattened node), except at the top where it is labels.
                let cond_for_level = if is_top {
                    None
                } else {
                    let upper = fakes[level + 1].expect("upper level generated");
                    let shape = tape.value(upper).shape().to_vec();
                    let flat: usize = shape[1..].iter().product();
                    Some(tape.apply(
                        Op::Reshape {
                            shape: vec![shape[0], flat],
                        },
                        &[upper],
                    )?)
                };
                let plan = CondPlan {
                    labels: &sampled,
                    span,
                    is_top,
                };
                let (lvl_total, vals) = gen_loss_terms(
                    &mut tape,
                    gan,
                    encoder,
                    &enc_b,
                    &gen_bs[level],
                    &trunk_bs[level],
                    &dh_bs[level],
                    &qh_bs[level],
                    fakes[level].expect("generated"),
                    z_nodes[level].expect("noise node"),
                    cond_for_level,
                    &plan,
                    &cfg.weights,
                )
                .map_err(|e| wrap_err(e, "joint", level, step))?;
                if !vals.iter().all(|v| v.is_finite()) {
                    return Err(divergence(
                        "joint",
                        level,
                        step,
                        format!("adv = {}, cond = {}, ent = {}", vals[0], vals[1], vals[2]),
                    ));
                }
                per_level[level] = vals;
                total = Some(match total {
                    Some(t) => tape.apply(Op::Add, &[t, lvl_total])?,
                    None => lvl_total,
                });
            }

            let mut grads = tape.backward(total.expect("at least one level"))?;
            for level in 0..n {
                let gen_grads = take_grads(&gen_bs[level], &mut grads);
                let q_grads = take_grads(&qh_bs[level], &mut grads);
                let gan = &mut models.levels[level];
                gan.gen.adam_step_all(&gen_grads)?;
                if cfg.weights.entropy > 0.0 {
                    gan.q_head.adam_step_all(&q_grads)?;
                }
                for (layer, stats) in &bn_updates[level] {
                    gan.gen.update_bn(layer, stats, BN_MOMENTUM);
                }
            }
            for level in 0..n {
                rows.push(LossRow {
                    phase: "joint",
                    level,
                    step,
                    loss_d: loss_d[level],
                    loss_adv: per_level[level][0],
                    loss_cond: per_level[level][1],
                    loss_ent: per_level[level][2],
                    loss_g_total: per_level[level][3],
                });
            }
            step += 1;
        }
    }
    Ok(rows)
}

/// How to choose the class labels driving the sampling chain.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSpec {
    Uniform,
    Fixed(Vec<usize>),
}

pub struct SampleOutput {
    /// Generated images, [count, C, H, W] in [-1, 1].
    pub images: Tensor<f32>,
    /// Generated representation per level (level 0 repeats `images`).
    pub intermediates: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

/// Top-down sampling in eval mode; fully deterministic for a fixed
/// stream. `fixed_z[level]` pins the noise at that level (Fig. 2(c):
/// fixed top conditioning, varying bottom noise).
pub fn sample(
    models: &StackModels,
    labels: &LabelSpec,
    count: usize,
    stream: &mut RngStream,
    fixed_z: &[Option<Tensor<f32>>],
) -> Result<SampleOutput> {
    let n = models.levels.len();
    let labels: Vec<usize> = match labels {
        LabelSpec::Uniform => (0..count)
            .map(|_| stream.next_below(models.num_classes as u64) as usize)
            .collect(),
        LabelSpec::Fixed(ids) => {
            if let Some(&bad) = ids.iter().find(|&&c| c >= models.num_classes) {
                return Err(Error::Config(format!(
                    "label {bad} out of range for {} classes",
                    models.num_classes
                )));
            }
            (0..count).map(|i| ids[i % ids.len()]).collect()
        }
    };
    let cond_top = if models.levels[models.top_level()].cond_dim == 0 {
        None
    } else {
        Some(one_hot(&labels, models.num_classes))
    };
    let mut zs = Vec::with_capacity(n);
    for level in 0..n {
        let gan = &models.levels[level];
        match fixed_z.get(level).and_then(|z| z.as_ref()) {
            Some(z) => {
                if z.shape() != [count, gan.noise_dim] {
                    return Err(Error::shape(
                        "sample",
                        format!(
                            "fixed z at level {level}: {:?} vs [{count}, {}]",
                            z.shape(),
                            gan.noise_dim
                        ),
                    ));
                }
                zs.push(z.clone());
            }
            None => zs.push(stream.normal_tensor(&[count, gan.noise_dim])),
        }
    }
    let chain = forward_chain(models, cond_top.as_ref(), &zs, Mode::Eval)?;
    Ok(SampleOutput {
        images: chain[0].clone(),
        intermediates: chain,
        labels,
    })
}
