use std::path::{Path, PathBuf};

use protoseg::data::{
    generate_synthetic, load_dataset, load_image, load_mask, resize_sample, save_dataset, save_mask, save_overlay,
    EpisodeSpec, IMAGE_SIZE,
};
use protoseg::encoder::{Encoder, EncoderConfig};
use protoseg::numerics::bilinear_resize;
use protoseg::prototype::{classify_at, compute_prototypes};
use protoseg::train_eval::{
    evaluate, export_loss_csv, export_report, format_duration, load_checkpoint, method_name, read_report, render_table,
    save_checkpoint, scenario_name, train_with_observer, CheckpointMeta, PrototypePredictor, ReportRow, TrainConfig,
};
use protoseg::Error;

use crate::args::{required, EvalArgs, GenerateArgs, ReportArgs, SegmentArgs, TrainArgs};
use crate::CliError;

fn get<T: Copy>(value: Option<T>) -> T {
    value.expect("resolved from defaults")
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let out = required(&a.out, "out")?;
    let (count, seed, size) = (get(a.count), get(a.seed), get(a.size));
    if count == 0 || size == 0 {
        return Err(CliError::Usage("--count and --size must be positive".into()));
    }
    let dataset = generate_synthetic(count, seed, size)?;
    save_dataset(&dataset, out)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn episode_spec(way: Option<usize>, shot: Option<usize>, queries: Option<usize>) -> EpisodeSpec {
    EpisodeSpec {
        way: get(way),
        shot: get(shot),
        queries_per_class: get(queries),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let preset = required(&a.preset, "preset")?;
    let config = TrainConfig {
        iterations: get(a.iterations),
        lr: get(a.lr),
        momentum: get(a.momentum),
        episode: episode_spec(a.way, a.shot, a.queries),
        alpha: get(a.alpha),
        par_enabled: !get(a.no_par),
        seed: get(a.seed),
        log_every: get(a.log_every),
    };
    config.validate()?;
    let encoder_config = EncoderConfig::preset(preset)?;
    let dataset = load_dataset(data)?;
    let mut encoder = Encoder::build(
        encoder_config.with_input_channels(dataset.image_channels()),
        config.seed,
    )?;
    let outcome = train_with_observer(&mut encoder, &dataset, &config, |r| {
        eprintln!(
            "iter {:>6}  seg {:.6}  par {:.6}  total {:.6}  {:.1}s",
            r.iteration, r.seg_loss, r.par_loss, r.total_loss, r.elapsed_seconds
        );
    })?;
    save_checkpoint(&encoder, out)?;
    CheckpointMeta {
        preset: Some(preset.clone()),
        way: config.episode.way,
        shot: config.episode.shot,
        iterations: config.iterations,
        seed: config.seed,
        alpha: config.alpha,
        par_enabled: config.par_enabled,
        learning_time_seconds: outcome.learning_time_seconds,
    }
    .save(out)?;
    if let Some(log) = &a.log {
        export_loss_csv(&outcome.log, log)?;
    }
    let last = outcome.log.last().expect("at least one logged row");
    println!(
        "trained {preset} ({}) for {} iterations in {}; final total loss {:.6}",
        scenario_name(&config.episode),
        config.iterations,
        format_duration(outcome.learning_time_seconds),
        last.total_loss
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let data = required(&a.data, "data")?;
    let ckpt = required(&a.ckpt, "ckpt")?;
    let spec = episode_spec(a.way, a.shot, a.queries);
    let encoder = load_checkpoint(ckpt)?;
    let meta = CheckpointMeta::load(ckpt)?;
    let dataset = load_dataset(data)?;
    let predictor = PrototypePredictor {
        encoder: &encoder,
        alpha: get(a.alpha) as f32,
    };
    let mut report = evaluate(&predictor, &dataset, &spec, get(a.episodes), get(a.seed))?;
    report.learning_time_seconds = meta.as_ref().map(|m| m.learning_time_seconds);
    let method = a.method.clone().unwrap_or_else(|| {
        let preset = meta
            .as_ref()
            .and_then(|m| m.preset.clone())
            .or_else(|| encoder.config().preset_name().map(str::to_owned));
        method_name(preset.as_deref().unwrap_or("custom"))
    });
    let row = ReportRow::new(method, scenario_name(&spec), &report);
    if let Some(path) = &a.report {
        export_report(std::slice::from_ref(&row), path)?;
    }
    for (c, v) in report.per_class.iter().enumerate() {
        println!("class {}: IoU {v:.4}", c + 1);
    }
    print!("{}", render_table(&[row]));
    Ok(())
}

fn default_overlay(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_overlay.png"))
}

pub fn segment(a: &SegmentArgs) -> Result<(), CliError> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    let images = required(&a.support_images, "support-images")?;
    let masks = required(&a.support_masks, "support-masks")?;
    let query_path = required(&a.query, "query")?;
    let out = required(&a.out, "out")?;
    if images.len() != masks.len() || images.is_empty() {
        return Err(CliError::Usage(format!(
            "{} support images for {} support masks",
            images.len(),
            masks.len()
        )));
    }
    let encoder = load_checkpoint(ckpt)?;
    let channels = encoder.config().input_channels;
    let mut supports = Vec::with_capacity(images.len());
    for (image_path, mask_path) in images.iter().zip(masks) {
        let image = load_image(image_path, channels)?;
        let mask = load_mask(mask_path)?;
        let (_, h, w) = image.dims3()?;
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::Data {
                id: mask_path.display().to_string(),
                reason: "support image and mask sizes differ".into(),
            }
            .into());
        }
        supports.push(resize_sample(&image, &mask, IMAGE_SIZE)?);
    }
    let way = match a.way {
        Some(w) => w,
        None => supports.iter().map(|(_, m)| m.max_label() as usize).max().unwrap_or(0),
    };
    if way == 0 {
        return Err(Error::Data {
            id: "support-masks".into(),
            reason: "no foreground class in the support masks".into(),
        }
        .into());
    }
    let features = supports
        .iter()
        .map(|(image, _)| encoder.encode(image))
        .collect::<Result<Vec<_>, _>>()?;
    let support_masks: Vec<_> = supports.iter().map(|(_, m)| m.restricted_to(way)).collect();
    let prototypes = compute_prototypes(&features, &support_masks, way)?;

    let query = load_image(query_path, channels)?;
    let (_, h, w) = query.dims3()?;
    let resized = bilinear_resize(&query, IMAGE_SIZE, IMAGE_SIZE)?;
    let probs = classify_at(
        &encoder.encode(&resized)?,
        &prototypes,
        get(a.alpha) as f32,
        IMAGE_SIZE,
        IMAGE_SIZE,
    )?;
    let predicted = probs.argmax().resize_nearest(h, w);
    save_mask(&predicted, out)?;
    let overlay = a.overlay.clone().unwrap_or_else(|| default_overlay(out));
    save_overlay(&query, &predicted, &overlay)?;
    println!("wrote {} and {}", out.display(), overlay.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let inputs = required(&a.inputs, "inputs")?;
    let out = required(&a.out, "out")?;
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_report(path)?);
    }
    let table = render_table(&rows);
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("md")) {
        std::fs::write(out, &table).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    } else {
        export_report(&rows, out)?;
    }
    print!("{table}");
    Ok(())
}
