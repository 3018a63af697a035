use crate::manifest::Manifest;
use crate::overlay::overlay_svg;
use crate::{CliError, DetectArgs, EvaluateArgs, GenDataArgs, TrainArgs};
use roidet::detector::{
    detect_with_threshold, load_model, save_model, DetectorConfig, DetectorModel,
};
use roidet::evaluation::{curves_svg, evaluate as evaluate_pairs, pairs_from_records};
use roidet::synthdata::{
    generate, load_annotations, load_records, save_annotations, save_records, GenConfig, Record,
    RecordBox,
};
use roidet::trainer::{train as train_model, TrainConfig};
use std::fs;
use std::path::Path;

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn write_artifact(manifest: &mut Manifest, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    manifest.artifact(path);
    Ok(())
}

// ── gen-data ─────────────────────────────────────────────────────────

pub fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let size_range = match &args.var_size {
        Some(spec) => {
            let (lo, hi) = spec
                .split_once(',')
                .ok_or_else(|| CliError::Usage(format!("--var-size wants LO,HI, got {spec:?}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("bad size {s:?}")))
            };
            Some((parse(lo)?, parse(hi)?))
        }
        None => None,
    };
    let cfg = GenConfig {
        image_size: args.size,
        size_range,
        count_per_trait: args.count,
        position_jitter: args.position_jitter,
        scale_jitter: args.scale_jitter,
        noise_amplitude: args.noise,
        seed: args.seed,
    };
    cfg.validate().map_err(CliError::usage)?;

    ensure_out_dir(&args.out)?;
    let dataset = generate(&cfg).map_err(CliError::runtime)?;
    let annotations = args.out.join("annotations.txt");
    save_annotations(&dataset, &annotations).map_err(CliError::runtime)?;

    let mut manifest = Manifest::new("gen-data");
    manifest.set("seed", args.seed);
    manifest.set("gen.count_per_trait", cfg.count_per_trait);
    manifest.set("gen.image_size", cfg.image_size);
    manifest.set(
        "gen.size_range",
        cfg.size_range
            .map(|(lo, hi)| format!("{lo},{hi}"))
            .unwrap_or_else(|| "off".into()),
    );
    manifest.set("gen.noise_amplitude", cfg.noise_amplitude);
    manifest.set("gen.position_jitter", cfg.position_jitter);
    manifest.set("gen.scale_jitter", cfg.scale_jitter);
    manifest.set("output.annotations", annotations.display());
    manifest.set("output.images", dataset.len());
    manifest.artifact(&annotations);
    // One combined checksum over every image file, in dataset order.
    let mut image_bytes = Vec::new();
    for img in &dataset {
        let path = args.out.join("images").join(format!("{}.pgm", img.id));
        image_bytes.extend(fs::read(&path).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    manifest.set(
        "checksum.images",
        format!("{:016x}", roidet::fnv1a64(&image_bytes)),
    );
    manifest
        .write(&args.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} images and {}",
        dataset.len(),
        annotations.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

/// Flags take precedence over the config file, which takes precedence over
/// the defaults. Config files mix detector keys with `train.`-prefixed
/// trainer keys.
fn resolve_train_configs(args: &TrainArgs) -> Result<(DetectorConfig, TrainConfig), CliError> {
    let mut detector = DetectorConfig::compact();
    let mut trainer = TrainConfig::default();

    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut detector_lines = String::new();
        let mut trainer_lines = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match trimmed.strip_prefix("train.") {
                Some(rest) => {
                    trainer_lines.push_str(rest);
                    trainer_lines.push('\n');
                }
                None => {
                    detector_lines.push_str(trimmed);
                    detector_lines.push('\n');
                }
            }
        }
        detector.apply_text(&detector_lines).map_err(CliError::usage)?;
        trainer.apply_text(&trainer_lines).map_err(CliError::usage)?;
    }

    if let Some(schedule) = &args.schedule {
        trainer
            .apply_text(&format!("schedule = {schedule}\n"))
            .map_err(CliError::usage)?;
    } else {
        trainer.restrict_phases(&args.phases).map_err(CliError::usage)?;
    }
    trainer.seed = args.seed;
    trainer.validate().map_err(CliError::usage)?;
    detector.validate().map_err(CliError::usage)?;
    Ok((detector, trainer))
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    require_file(&args.data, "dataset")?;
    let (detector_cfg, train_cfg) = resolve_train_configs(&args)?;
    let dataset = load_annotations(&args.data).map_err(CliError::usage)?;
    if dataset.is_empty() {
        return Err(CliError::Usage("dataset has no images".into()));
    }
    ensure_out_dir(&args.out)?;

    let mut model =
        DetectorModel::new(detector_cfg.clone(), args.seed).map_err(CliError::usage)?;
    let report = train_model(&mut model, &dataset, &train_cfg).map_err(CliError::runtime)?;

    let model_path = args.out.join("model.bin");
    save_model(&model, &model_path).map_err(CliError::runtime)?;
    let report_path = args.out.join("train_report.csv");
    fs::write(&report_path, report.to_csv())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut manifest = Manifest::new("train");
    manifest.set("seed", args.seed);
    manifest.set("input.data", args.data.display());
    manifest.set("input.images", dataset.len());
    manifest.set_config("detector", &detector_cfg.to_text());
    manifest.set_config("train", &train_cfg.to_text());
    for (component, checksum) in &report.final_checksums {
        manifest.set(&format!("param_checksum.{component}"), format!("{checksum:016x}"));
    }
    manifest.set("output.model", model_path.display());
    manifest.set("output.report", report_path.display());
    manifest.artifact(&model_path);
    manifest.artifact(&report_path);
    manifest
        .write(&args.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let last = report.epochs.last().unwrap();
    println!(
        "trained {} epochs over phases {}; final losses rpn {:.4}/{:.4} head {:.4}/{:.4}",
        report.epochs.len(),
        train_cfg.phase_letters(),
        last.rpn_cls,
        last.rpn_reg,
        last.head_cls,
        last.head_reg
    );
    Ok(())
}

// ── detect ───────────────────────────────────────────────────────────

pub fn detect(args: DetectArgs) -> Result<(), CliError> {
    require_file(&args.model, "model file")?;
    require_file(&args.data, "dataset")?;
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage(format!(
                "--threshold must be in [0, 1], got {t}"
            )));
        }
    }
    let model = load_model(&args.model).map_err(CliError::runtime)?;
    let threshold = args.threshold.unwrap_or(model.config.score_threshold);
    let dataset = load_annotations(&args.data).map_err(CliError::usage)?;
    ensure_out_dir(&args.out)?;
    if args.svg {
        ensure_out_dir(&args.out.join("overlays"))?;
    }

    let mut records = Vec::with_capacity(dataset.len());
    let mut manifest = Manifest::new("detect");
    for img in &dataset {
        let detections = detect_with_threshold(&model, &img.to_tensor(), threshold)
            .map_err(CliError::runtime)?;
        if args.svg {
            let svg = overlay_svg(img.width, img.height, &img.pixels, &detections);
            let path = args.out.join("overlays").join(format!("{}.svg", img.id));
            write_artifact(&mut manifest, &path, svg.as_bytes())?;
        }
        records.push(Record {
            id: img.id.clone(),
            image_path: format!("images/{}.pgm", img.id),
            boxes: detections
                .iter()
                .map(|d| RecordBox {
                    bbox: d.bbox,
                    label: d.label.unwrap(),
                    score: Some(d.score),
                })
                .collect(),
        });
    }
    let predictions = args.out.join("predictions.txt");
    save_records(&records, &predictions).map_err(CliError::runtime)?;

    manifest.set("input.model", args.model.display());
    manifest.set("input.data", args.data.display());
    manifest.set("score_threshold", threshold);
    manifest.set("output.predictions", predictions.display());
    manifest.artifact(&predictions);
    manifest
        .write(&args.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let total: usize = records.iter().map(|r| r.boxes.len()).sum();
    println!(
        "wrote {total} detections over {} images to {}",
        records.len(),
        predictions.display()
    );
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    require_file(&args.predictions, "predictions file")?;
    require_file(&args.truth, "ground-truth file")?;
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad threshold {s:?}")))
        })
        .collect::<Result<_, _>>()?;

    let truth = load_records(&args.truth).map_err(CliError::usage)?;
    let preds = load_records(&args.predictions).map_err(CliError::usage)?;
    let pairs = pairs_from_records(&truth, &preds).map_err(CliError::usage)?;
    let report = evaluate_pairs(&pairs, &thresholds).map_err(CliError::usage)?;

    ensure_out_dir(&args.out)?;
    let mut manifest = Manifest::new("evaluate");
    let report_path = args.out.join("report.csv");
    write_artifact(&mut manifest, &report_path, report.to_csv().as_bytes())?;
    for (label, curve) in &report.curves {
        let path = args.out.join(format!("curve_{label}.csv"));
        write_artifact(&mut manifest, &path, curve.to_csv().as_bytes())?;
    }
    let svg = curves_svg(
        &report
            .curves
            .iter()
            .map(|(l, c)| (l.clone(), c))
            .collect::<Vec<_>>(),
    );
    let svg_path = args.out.join("curves.svg");
    write_artifact(&mut manifest, &svg_path, svg.as_bytes())?;

    manifest.set("input.predictions", args.predictions.display());
    manifest.set("input.truth", args.truth.display());
    manifest.set("thresholds", &args.thresholds);
    manifest.set("output.report", report_path.display());
    manifest
        .write(&args.out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    print!("{}", report.to_csv());
    Ok(())
}

