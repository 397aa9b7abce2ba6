//! Stacked-GAN training: per-stack losses, independent and joint phases,
//! ablation variants, and top-down sampling.

pub mod losses;
pub mod train;

pub use losses::{
    loss_adversarial, loss_conditional, loss_discriminator, loss_entropy, total_generator_loss,
    CondKind, CondTarget, LossWeights,
};
pub use train::{
    build_single_gan, build_stacked_models, forward_chain, sample, train_joint,
    train_stack_independent, LabelSpec, LossRow, PhaseConfig, SampleOutput, StackGan, StackModels,
};

use crate::data::Dataset;
use crate::encoder::EncoderArtifact;
use crate::error::{Error, Result};
use crate::nn::GanArch;
use crate::optim::AdamHyper;
use crate::rng::RngStream;

/// The six experiment variants: the stacked model with and without joint
/// training, and single-GAN baselines over subsets of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sgan,
    SganNoJoint,
    DcganAdvCondEnt,
    DcganAdvCond,
    DcganAdvEnt,
    DcganAdv,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Sgan,
        Variant::SganNoJoint,
        Variant::DcganAdvCondEnt,
        Variant::DcganAdvCond,
        Variant::DcganAdvEnt,
        Variant::DcganAdv,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Variant::Sgan => "SGAN",
            Variant::SganNoJoint => "SGAN-no-joint",
            Variant::DcganAdvCondEnt => "DCGAN_adv_cond_ent",
            Variant::DcganAdvCond => "DCGAN_adv_cond",
            Variant::DcganAdvEnt => "DCGAN_adv_ent",
            Variant::DcganAdv => "DCGAN_adv",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.id() == name)
            .ok_or_else(|| Error::Unknown {
                what: "variant",
                name: name.to_string(),
            })
    }

    pub fn stacked(&self) -> bool {
        matches!(self, Variant::Sgan | Variant::SganNoJoint)
    }

    pub fn has_joint_phase(&self) -> bool {
        matches!(self, Variant::Sgan)
    }

    /// Single-GAN variants condition the image generator on labels, not
    /// fc3 features; (e) and (f) use no label information at all.
    pub fn uses_labels(&self) -> bool {
        !matches!(self, Variant::DcganAdvEnt | Variant::DcganAdv)
    }

    /// Zero out the loss terms this variant ablates.
    pub fn effective_weights(&self, base: LossWeights) -> LossWeights {
        match self {
            Variant::Sgan | Variant::SganNoJoint | Variant::DcganAdvCondEnt => base,
            Variant::DcganAdvCond => LossWeights {
                entropy: 0.0,
                ..base
            },
            Variant::DcganAdvEnt => LossWeights {
                conditional: 0.0,
                ..base
            },
            Variant::DcganAdv => LossWeights {
                conditional: 0.0,
                entropy: 0.0,
                ..base
            },
        }
    }
}

/// Independent seeds for the three stochastic ingredients of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SganSeeds {
    pub data: u64,
    pub init: u64,
    pub noise: u64,
}

impl Default for SganSeeds {
    fn default() -> Self {
        SganSeeds {
            data: 1,
            init: 2,
            noise: 3,
        }
    }
}

impl SganSeeds {
    /// One master seed fans out to the three streams.
    pub fn from_master(seed: u64) -> Self {
        SganSeeds {
            data: seed,
            init: seed.wrapping_add(1),
            noise: seed.wrapping_add(2),
        }
    }
}

/// Knobs of one GAN training run (built from the run config).
#[derive(Debug, Clone)]
pub struct SganTrainSettings {
    pub batch_size: usize,
    pub independent_iterations: usize,
    pub joint_iterations: usize,
    pub weights: LossWeights,
    pub noise_dim: usize,
    pub arch: GanArch,
    pub hyper: AdamHyper,
    pub seeds: SganSeeds,
    pub d_steps: usize,
    pub g_steps: usize,
}

pub struct RunResult {
    pub models: StackModels,
    pub rows: Vec<LossRow>,
}

/// Train one variant end to end: stacked variants run per-stack
/// independent phases top-down and (for the full model) a joint phase;
/// single-GAN variants train one image-level GAN with the variant's loss
/// subset. Fully deterministic in `settings.seed`.
/// Called after each finished training phase with a name like
/// `independent_l1` or `joint`; commands hook checkpoints and sample
/// grids here.
pub type PhaseHook<'a> = dyn FnMut(&str, &StackModels) -> Result<()> + 'a;

pub fn run_variant(
    variant: Variant,
    encoder: &EncoderArtifact,
    data: &Dataset,
    settings: &SganTrainSettings,
    mut on_phase: Option<&mut PhaseHook>,
) -> Result<RunResult> {
    let init_root = RngStream::new(settings.seeds.init, 0x56A7);
    let noise_root = RngStream::new(settings.seeds.noise, 0x401E);
    let data_root = RngStream::new(settings.seeds.data, 0xDA7A);
    let weights = variant.effective_weights(settings.weights);
    weights.validate()?;
    let mut rows = Vec::new();

    let mut models = if variant.stacked() {
        build_stacked_models(
            encoder,
            data.num_classes,
            settings.noise_dim,
            &settings.arch,
            settings.hyper,
            &init_root,
            &noise_root,
        )?
    } else {
        build_single_gan(
            data.image_shape(),
            data.num_classes,
            variant.uses_labels(),
            settings.noise_dim,
            &settings.arch,
            settings.hyper,
            &init_root,
            &noise_root,
        )?
    };

    let mut phase_cfg = PhaseConfig::new(
        settings.independent_iterations,
        settings.batch_size,
        weights,
    );
    phase_cfg.d_steps = settings.d_steps;
    phase_cfg.g_steps = settings.g_steps;
    // Independent phases, top stack first.
    for level in (0..models.levels.len()).rev() {
        let mut shuffle = data_root.derive(100 + level as u64);
        rows.extend(train_stack_independent(
            level,
            encoder,
            &mut models,
            data,
            &phase_cfg,
            &mut shuffle,
            "independent",
        )?);
        if let Some(hook) = on_phase.as_mut() {
            hook(&format!("independent_l{level}"), &models)?;
        }
    }

    if variant.has_joint_phase() && models.levels.len() > 1 {
        let joint_cfg = PhaseConfig {
            iterations: settings.joint_iterations,
            ..phase_cfg.clone()
        };
        let mut shuffle = data_root.derive(200);
        let mut label_stream = noise_root.derive(201);
        rows.extend(train_joint(
            encoder,
            &mut models,
            data,
            &joint_cfg,
            &mut shuffle,
            &mut label_stream,
        )?);
        if let Some(hook) = on_phase.as_mut() {
            hook("joint", &models)?;
        }
    }

    Ok(RunResult { models, rows })
}
