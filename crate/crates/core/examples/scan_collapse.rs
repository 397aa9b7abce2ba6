//! Scan desk-scale knobs for the collapse-vs-entropy separation.

use sganlab::data::make_synthetic;
use sganlab::encoder::{pretrain_encoder, EncoderTrainConfig};
use sganlab::metrics::conditional_diversity;
use sganlab::nn::GanArch;
use sganlab::optim::AdamHyper;
use sganlab::rng::RngStream;
use sganlab::sgan::*;
use sganlab::Tensor;

fn diversity(models: &StackModels, spc: usize) -> f64 {
    let mut stream = RngStream::new(1, 0xD1F);
    conditional_diversity(
        |c| {
            let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
            Ok(sample(models, &LabelSpec::Fixed(vec![c]), spc, &mut stream, &fixed)?.images)
        },
        8,
        spc,
    )
    .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise_dim: usize = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let d0a: usize = args[3].parse().unwrap();
    let d0b: usize = args[4].parse().unwrap();
    let strip_d_bn: bool = args.get(5).map(|v| v == "nobn").unwrap_or(false);

    let train = make_synthetic(8, 500, 16, 7);
    let test = make_synthetic(8, 125, 16, 7 ^ 0x7E57);
    let enc_cfg = EncoderTrainConfig {
        epochs: 3,
        fc3_dim: 128,
        conv_channels: (16, 32),
        seed: 2,
        ..Default::default()
    };
    let encoder = pretrain_encoder(&train, &test, &enc_cfg).unwrap();
    eprintln!("encoder acc {:.4}", encoder.test_accuracy);

    let arch = GanArch {
        d0_ch: (d0a, d0b),
        ..GanArch::default()
    };
    let hyper = AdamHyper {
        lr,
        ..AdamHyper::GAN
    };
    for variant in [Variant::DcganAdvCond, Variant::DcganAdvCondEnt] {
        let seeds = SganSeeds::from_master(42);
        let init_root = RngStream::new(seeds.init, 0x56A7);
        let noise_root = RngStream::new(seeds.noise, 0x401E);
        let mut models = build_single_gan(
            &[1, 16, 16],
            8,
            true,
            noise_dim,
            &arch,
            hyper,
            &init_root,
            &noise_root,
        )
        .unwrap();
        if strip_d_bn {
            let gan = &mut models.levels[0];
            let mut layers = gan.disc_spec.trunk.layers.clone();
            for l in &mut layers {
                l.batch_norm = false;
            }
            gan.disc_spec.trunk =
                sganlab::nn::ModelSpec::new(gan.disc_spec.trunk.input_shape.clone(), layers)
                    .unwrap();
            let mut s = RngStream::new(77, 3);
            gan.trunk = sganlab::nn::init_params(&gan.disc_spec.trunk, &mut s, hyper);
        }
        let weights = variant.effective_weights(LossWeights::default());
        let mut shuffle = RngStream::new(seeds.data, 0xDA7A).derive(100);
        for chunk in 0..3 {
            let cfg = PhaseConfig::new(1000, 64, weights);
            let rows = train_stack_independent(
                0,
                &encoder,
                &mut models,
                &train,
                &cfg,
                &mut shuffle,
                "independent",
            )
            .unwrap();
            let last = rows.last().unwrap();
            println!(
                "{} noise={} lr={} d0=({},{}) bn={} iter={}: diversity {:.4} (d {:.3} adv {:.3} cond {:.3} ent {:.3})",
                variant.id(), noise_dim, lr, d0a, d0b, !strip_d_bn, (chunk + 1) * 1000,
                diversity(&models, 12),
                last.loss_d, last.loss_adv, last.loss_cond, last.loss_ent
            );
        }
    }
}
