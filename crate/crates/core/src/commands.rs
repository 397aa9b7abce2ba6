//! Subcommand implementations: experiment running and persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::{load_checkpoint, restore_store, save_checkpoint, save_entries};
use crate::config::{parse_config, write_resolved, RunConfig};
use crate::data::Dataset;
use crate::encoder::{pretrain_encoder, split_stacks, EncoderArtifact};
use crate::error::{Error, Result};
use crate::metrics::{classifier_score, conditional_diversity, nearest_neighbor, write_grid_ppm};
use crate::nn::{build_encoder_spec, init_params, ParamStore};
use crate::rng::RngStream;
use crate::sgan::{
    build_single_gan, build_stacked_models, run_variant, sample, LabelSpec, LossRow, StackModels,
    Variant,
};
use crate::tensor::Tensor;

pub const ENCODER_CHECKPOINT: &str = "encoder.sgck";
pub const FINAL_CHECKPOINT: &str = "final.sgck";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";

/// Resolve config text/path plus CLI overrides into a validated config.
pub fn resolve_config(source: &str, out: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = parse_config(source)?;
    if let Some(out) = out {
        cfg.output_dir.0 = out.to_path_buf();
    }
    if let Some(seed) = seed {
        cfg.seeds = crate::sgan::SganSeeds::from_master(seed);
    }
    Ok(cfg)
}

fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut text =
        String::from("phase,level,step,loss_d,loss_adv,loss_cond,loss_ent,loss_g_total\n");
    for r in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            r.phase, r.level, r.step, r.loss_d, r.loss_adv, r.loss_cond, r.loss_ent, r.loss_g_total
        )
        .expect("string write");
    }
    fs::write(path, text)?;
    Ok(())
}

/// One `variant,metric,value,step` row.
pub struct MetricRow {
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub step: usize,
}

fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut text = String::from("variant,metric,value,step\n");
    for r in rows {
        writeln!(text, "{},{},{},{}", r.variant, r.metric, r.value, r.step).expect("string write");
    }
    fs::write(path, text)?;
    Ok(())
}

fn encoder_to_entries(art: &EncoderArtifact) -> Vec<(String, Tensor<f32>)> {
    let mut entries: Vec<(String, Tensor<f32>)> = art
        .params
        .iter()
        .map(|(name, t)| (format!("encoder/{name}"), t.clone()))
        .collect();
    entries.push((
        "meta/test_accuracy".to_string(),
        Tensor::from_vec(&[], vec![art.test_accuracy as f32]).expect("scalar"),
    ));
    entries
}

fn save_encoder(art: &EncoderArtifact, path: &Path) -> Result<()> {
    let entries = encoder_to_entries(art);
    let refs: Vec<(String, &Tensor<f32>)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_entries(&refs, path)
}

fn load_encoder(path: &Path, cfg: &RunConfig, train: &Dataset) -> Result<EncoderArtifact> {
    let entries = load_checkpoint(path)?;
    let spec = build_encoder_spec(
        train.image_shape(),
        train.num_classes,
        cfg.arch.fc3_dim,
        cfg.arch.encoder_channels,
    )?;
    let mut stream = RngStream::new(0, 0);
    let mut params: ParamStore<f32> = init_params(&spec, &mut stream, cfg.optimizer.gan_hyper());
    restore_store(&entries, "encoder", &mut params)?;
    let stack = split_stacks(&spec, &["fc3".to_string()])?;
    let test_accuracy = entries
        .get("meta/test_accuracy")
        .map(|t| t.data()[0] as f64)
        .unwrap_or(f64::NAN);
    Ok(EncoderArtifact {
        spec,
        params,
        stack,
        test_accuracy,
    })
}

/// Train the encoder, or reuse `encoder.sgck` when it is already present
/// in the output directory.
pub fn obtain_encoder(
    cfg: &RunConfig,
    outdir: &Path,
    train: &Dataset,
    test: &Dataset,
) -> Result<EncoderArtifact> {
    let path = outdir.join(ENCODER_CHECKPOINT);
    if path.exists() {
        return load_encoder(&path, cfg, train);
    }
    let art = pretrain_encoder(train, test, &cfg.encoder_train_config())?;
    save_encoder(&art, &path)?;
    Ok(art)
}

/// Rebuild the variant's models from config shapes and restore weights.
pub fn load_models(
    checkpoint: &Path,
    cfg: &RunConfig,
    encoder: &EncoderArtifact,
    train: &Dataset,
) -> Result<StackModels> {
    let entries = load_checkpoint(checkpoint)?;
    let variant = cfg.variant()?;
    let settings = cfg.sgan_settings();
    let init_root = RngStream::new(0, 0);
    let noise_root = RngStream::new(settings.seeds.noise, 0x401E);
    let mut models = if variant.stacked() {
        build_stacked_models(
            encoder,
            train.num_classes,
            settings.noise_dim,
            &settings.arch,
            settings.hyper,
            &init_root,
            &noise_root,
        )?
    } else {
        build_single_gan(
            train.image_shape(),
            train.num_classes,
            variant.uses_labels(),
            settings.noise_dim,
            &settings.arch,
            settings.hyper,
            &init_root,
            &noise_root,
        )?
    };
    for (prefix, store) in models.stores_mut() {
        restore_store(&entries, &prefix, store)?;
    }
    Ok(models)
}

fn grid_of_samples(
    models: &StackModels,
    cfg: &RunConfig,
    stream: &mut RngStream,
    path: &Path,
) -> Result<()> {
    let rows = cfg.sample_grid.rows;
    let cols = cfg.sample_grid.cols;
    // One row per class when the model is conditional and classes fit.
    let labels = if models.levels[models.top_level()].cond_dim > 0 && rows >= models.num_classes {
        LabelSpec::Fixed((0..models.num_classes).collect())
    } else {
        LabelSpec::Uniform
    };
    let count = rows * cols;
    // Row-major tiling groups each label's samples into one row when the
    // fixed labels repeat every `cols` tiles.
    let by_row: Vec<usize> = match &labels {
        LabelSpec::Fixed(ids) => (0..count).map(|i| ids[(i / cols) % ids.len()]).collect(),
        LabelSpec::Uniform => Vec::new(),
    };
    let spec = if by_row.is_empty() {
        labels
    } else {
        LabelSpec::Fixed(by_row)
    };
    let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
    let out = sample(models, &spec, count, stream, &fixed)?;
    write_grid_ppm(&out.images, rows, cols, path)
}

/// Train the bottom-up classifier alone.
pub fn cmd_train_encoder(cfg: &RunConfig) -> Result<()> {
    let outdir = cfg.output_dir.0.clone();
    write_resolved(cfg, &outdir)?;
    let (train, test) = cfg.load_datasets()?;
    let art = pretrain_encoder(&train, &test, &cfg.encoder_train_config())?;
    save_encoder(&art, &outdir.join(ENCODER_CHECKPOINT))?;
    println!(
        "encoder: {} train / {} test samples, test accuracy {:.4}",
        train.len(),
        test.len(),
        art.test_accuracy
    );
    Ok(())
}

/// Full training pipeline for the configured variant: encoder (reused if
/// checkpointed), per-stack independent phases, joint phase when the
/// variant calls for it; checkpoints and sample grids after each phase.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let outdir = cfg.output_dir.0.clone();
    write_resolved(cfg, &outdir)?;
    let variant = cfg.variant()?;
    let (train, test) = cfg.load_datasets()?;
    let encoder = obtain_encoder(cfg, &outdir, &train, &test)?;
    println!("encoder ready (test accuracy {:.4})", encoder.test_accuracy);

    let settings = cfg.sgan_settings();
    let grid_seed = settings.seeds.noise;
    let mut hook = |phase: &str, models: &StackModels| -> Result<()> {
        let stores = models.stores();
        save_checkpoint(&stores, &outdir.join(format!("after_{phase}.sgck")))?;
        let mut stream = RngStream::new(grid_seed, 0x981D).derive(1);
        grid_of_samples(
            models,
            cfg,
            &mut stream,
            &outdir.join(format!("samples_{phase}.ppm")),
        )?;
        println!("phase {phase} done");
        Ok(())
    };
    let result = run_variant(variant, &encoder, &train, &settings, Some(&mut hook))?;

    save_checkpoint(&result.models.stores(), &outdir.join(FINAL_CHECKPOINT))?;
    write_loss_csv(&result.rows, &outdir.join(TRAIN_LOG))?;
    let mut stream = RngStream::new(grid_seed, 0x981D).derive(2);
    grid_of_samples(
        &result.models,
        cfg,
        &mut stream,
        &outdir.join("samples_final.ppm"),
    )?;
    println!("{} training complete: {}", variant.id(), outdir.display());
    Ok(())
}

/// Sample a grid of images from a checkpoint. `labels` is "uniform" or a
/// comma-separated class list cycled across the grid.
pub fn cmd_sample(
    checkpoint: &Path,
    cfg: &RunConfig,
    labels: &str,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (train, test) = cfg.load_datasets()?;
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let encoder = obtain_encoder(cfg, dir, &train, &test)?;
    let models = load_models(checkpoint, cfg, &encoder, &train)?;
    let spec = if labels == "uniform" {
        LabelSpec::Uniform
    } else {
        let ids: Vec<usize> = labels
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad label `{s}` (want ints or `uniform`)")))
            })
            .collect::<Result<_>>()?;
        LabelSpec::Fixed(ids)
    };
    let mut stream = RngStream::new(seed, 0x5A3C);
    let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
    let output = sample(&models, &spec, count, &mut stream, &fixed)?;
    let cols = cfg.sample_grid.cols.min(count);
    let rows = (count / cols).max(1);
    fs::create_dir_all(out)?;
    let path = out.join("samples.ppm");
    write_grid_ppm(&output.images, rows, cols, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Compute requested metrics for a trained checkpoint and append them to
/// the run's metrics CSV.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: &RunConfig,
    metric_names: &[String],
    out: &Path,
) -> Result<()> {
    let (train, test) = cfg.load_datasets()?;
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let encoder = obtain_encoder(cfg, dir, &train, &test)?;
    let models = load_models(checkpoint, cfg, &encoder, &train)?;
    let variant = cfg.variant()?.id().to_string();
    let mut stream = RngStream::new(cfg.seeds.noise, 0xE7A1);
    let mut rows = Vec::new();
    for metric in metric_names {
        match metric.as_str() {
            "score" => {
                let report = eval_score(&models, &encoder, cfg, &mut stream)?;
                rows.push(MetricRow {
                    variant: variant.clone(),
                    metric: "classifier_score_mean".into(),
                    value: report.0,
                    step: 0,
                });
                rows.push(MetricRow {
                    variant: variant.clone(),
                    metric: "classifier_score_std".into(),
                    value: report.1,
                    step: 0,
                });
            }
            "diversity" => {
                let d = eval_diversity(&models, cfg, &mut stream)?;
                rows.push(MetricRow {
                    variant: variant.clone(),
                    metric: "conditional_diversity".into(),
                    value: d,
                    step: 0,
                });
            }
            "nn" => {
                let mean_d = eval_nearest_neighbors(&models, &train, cfg, &mut stream, out)?;
                rows.push(MetricRow {
                    variant: variant.clone(),
                    metric: "nn_mean_distance".into(),
                    value: mean_d,
                    step: 0,
                });
            }
            other => {
                return Err(Error::Unknown {
                    what: "metric",
                    name: other.to_string(),
                });
            }
        }
    }
    fs::create_dir_all(out)?;
    let path = out.join(METRICS_CSV);
    write_metrics_csv(&rows, &path)?;
    for r in &rows {
        println!("{},{},{},{}", r.variant, r.metric, r.value, r.step);
    }
    Ok(())
}

/// Classifier score of `score_samples` generated images (chunked draws).
pub fn eval_score(
    models: &StackModels,
    encoder: &EncoderArtifact,
    cfg: &RunConfig,
    stream: &mut RngStream,
) -> Result<(f64, f64)> {
    let images = sample_many(models, cfg.metrics.score_samples, stream)?;
    let report = classifier_score(encoder, &images, cfg.metrics.score_splits)?;
    Ok((report.mean, report.std))
}

pub fn sample_many(
    models: &StackModels,
    count: usize,
    stream: &mut RngStream,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    let mut left = count;
    while left > 0 {
        let take = left.min(500);
        let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
        let out = sample(models, &LabelSpec::Uniform, take, stream, &fixed)?;
        parts.push(out.images);
        left -= take;
    }
    let refs: Vec<Tensor<f32>> = parts;
    let mut data = Vec::new();
    let tail = refs[0].shape()[1..].to_vec();
    for p in &refs {
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![count];
    shape.extend(tail);
    Tensor::new(shape, data)
}

/// Mean pairwise distance between samples sharing a class label (all
/// noise varied); unconditional models measure plain sample diversity.
pub fn eval_diversity(
    models: &StackModels,
    cfg: &RunConfig,
    stream: &mut RngStream,
) -> Result<f64> {
    let spc = cfg.metrics.diversity_samples_per_condition;
    let conditional = models.levels[models.top_level()].cond_dim > 0;
    let conditions = if conditional { models.num_classes } else { 1 };
    let mut stream = stream.derive(11);
    conditional_diversity(
        |c| {
            let labels = if conditional {
                LabelSpec::Fixed(vec![c])
            } else {
                LabelSpec::Uniform
            };
            let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
            Ok(sample(models, &labels, spc, &mut stream, &fixed)?.images)
        },
        conditions,
        spc,
    )
}

fn eval_nearest_neighbors(
    models: &StackModels,
    train: &Dataset,
    cfg: &RunConfig,
    stream: &mut RngStream,
    out: &Path,
) -> Result<f64> {
    let q = cfg.metrics.nn_queries;
    let k = cfg.metrics.nn_k;
    let fixed: Vec<Option<Tensor<f32>>> = vec![None; models.levels.len()];
    let queries = sample(models, &LabelSpec::Uniform, q, stream, &fixed)?.images;
    let neighbors = nearest_neighbor(&queries, &train.images, k)?;
    // Grid: one row per query, the query followed by its neighbors.
    let mut tiles = Vec::new();
    for (qi, row) in neighbors.iter().enumerate() {
        tiles.push(Tensor::from_vec(
            train.image_shape(),
            queries.sample(qi).to_vec(),
        )?);
        for &(idx, _) in row {
            tiles.push(Tensor::from_vec(
                train.image_shape(),
                train.images.sample(idx).to_vec(),
            )?);
        }
    }
    let grid = Tensor::stack(&tiles)?;
    fs::create_dir_all(out)?;
    write_grid_ppm(&grid, q, k + 1, &out.join("nn_grid.ppm"))?;
    let mean: f64 = neighbors.iter().map(|row| row[0].1).sum::<f64>() / neighbors.len() as f64;
    Ok(mean)
}

/// Run several variants with a shared encoder and identical seeds,
/// emitting per-variant artifacts and one comparison CSV.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[String]) -> Result<()> {
    let outdir = cfg.output_dir.0.clone();
    write_resolved(cfg, &outdir)?;
    let names: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|v| Variant::parse(v))
            .collect::<Result<_>>()?
    };
    let (train, test) = cfg.load_datasets()?;
    let encoder = obtain_encoder(cfg, &outdir, &train, &test)?;
    println!(
        "shared encoder ready (test accuracy {:.4})",
        encoder.test_accuracy
    );

    let mut rows: Vec<MetricRow> = Vec::new();
    for variant in names {
        let vdir = outdir.join(variant.id());
        fs::create_dir_all(&vdir)?;
        let mut vcfg = cfg.clone();
        vcfg.variant.0 = variant.id().to_string();
        vcfg.output_dir.0 = vdir.clone();
        let settings = vcfg.sgan_settings();
        let result = run_variant(variant, &encoder, &train, &settings, None)?;
        save_checkpoint(&result.models.stores(), &vdir.join(FINAL_CHECKPOINT))?;
        write_loss_csv(&result.rows, &vdir.join(TRAIN_LOG))?;
        let mut gstream = RngStream::new(settings.seeds.noise, 0x981D).derive(2);
        grid_of_samples(
            &result.models,
            &vcfg,
            &mut gstream,
            &vdir.join("samples_final.ppm"),
        )?;

        let mut mstream = RngStream::new(settings.seeds.noise, 0xE7A1);
        let (mean, std) = eval_score(&result.models, &encoder, &vcfg, &mut mstream)?;
        let diversity = eval_diversity(&result.models, &vcfg, &mut mstream)?;
        println!(
            "{}: score {:.3} +- {:.3}, diversity {:.4}",
            variant.id(),
            mean,
            std,
            diversity
        );
        rows.push(MetricRow {
            variant: variant.id().into(),
            metric: "classifier_score_mean".into(),
            value: mean,
            step: 0,
        });
        rows.push(MetricRow {
            variant: variant.id().into(),
            metric: "classifier_score_std".into(),
            value: std,
            step: 0,
        });
        rows.push(MetricRow {
            variant: variant.id().into(),
            metric: "conditional_diversity".into(),
            value: diversity,
            step: 0,
        });
    }
    write_metrics_csv(&rows, &outdir.join("ablation.csv"))?;
    println!("ablation table: {}", outdir.join("ablation.csv").display());
    Ok(())
}

/// Convenience for tests: train everything in one call and return the
/// pieces.
pub struct TrainedRun {
    pub encoder: EncoderArtifact,
    pub models: StackModels,
    pub rows: Vec<LossRow>,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn train_in_memory(cfg: &RunConfig) -> Result<TrainedRun> {
    let (train, test) = cfg.load_datasets()?;
    let encoder = pretrain_encoder(&train, &test, &cfg.encoder_train_config())?;
    let result = run_variant(cfg.variant()?, &encoder, &train, &cfg.sgan_settings(), None)?;
    Ok(TrainedRun {
        encoder,
        models: result.models,
        rows: result.rows,
        train,
        test,
    })
}

/// Byte-for-byte file comparison helper used by reproducibility checks.
pub fn files_identical(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}
