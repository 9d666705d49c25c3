use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use sunformer::aggregate::{estimate_lines, read_estimates, write_estimates, Aggregator, EstimateSet, MeanShiftParams};
use sunformer::diagnostics::gradient_suite;
use sunformer::encoding::EncodingConfig;
use sunformer::evaluate::{evaluate_checkpoint, perturb_poses, EvalOptions};
use sunformer::geometry::solar::sun_from_gps_time;
use sunformer::geometry::{angular_error, Direction3};
use sunformer::model::{AttentionScope, ModelConfig};
use sunformer::synth::dataset::{read_dataset, write_dataset, Dataset, SpecEcho};
use sunformer::synth::{generate_sequences, SceneSpec};
use sunformer::train::{read_checkpoint, train_model, write_checkpoint, EpochMetrics, TrainConfig, TrainError};

use crate::error::CliError;
use crate::{AggregateOpts, AggregatorArg, AttentionArg, BaselineArgs, EvalArgs, GenerateArgs, GradcheckArgs, Preset, PredictArgs, SolarArgs, TrainArgs};

pub const RUN_FORMAT: &str = "sunformer-run";
pub const RUN_VERSION: u32 = 1;

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        }
    }

    fn encoding(self) -> EncodingConfig {
        EncodingConfig {
            d_angle: self.model().d_model / 3,
            ..EncodingConfig::default()
        }
    }

    fn training(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

impl From<AggregatorArg> for Aggregator {
    fn from(a: AggregatorArg) -> Self {
        match a {
            AggregatorArg::Mean => Aggregator::Mean,
            AggregatorArg::Meanshift => Aggregator::Meanshift,
        }
    }
}

fn meanshift_params(bandwidth_deg: f64, outlier_sigma: f64) -> Result<MeanShiftParams, CliError> {
    let p = MeanShiftParams {
        bandwidth: bandwidth_deg.to_radians(),
        outlier_sigma,
    };
    p.validate()?;
    Ok(p)
}

impl AggregateOpts {
    fn params(&self) -> Result<MeanShiftParams, CliError> {
        meanshift_params(self.bandwidth, self.outlier_sigma)
    }
}

/// Refuses to replace an existing file unless forced.
fn check_new(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::usage(format!("{} exists (use --force to overwrite)", path.display())));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8], force: bool) -> Result<(), CliError> {
    check_new(path, force)?;
    fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    read_dataset(dir).map_err(|e| CliError::from(e).context(&dir.display().to_string()))
}

fn direction_json(d: Direction3) -> serde_json::Value {
    json!({
        "direction": d.to_array(),
        "azimuth_deg": d.azimuth().to_degrees(),
        "altitude_deg": d.altitude().to_degrees(),
    })
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let preset_size = a.preset.model().patch_size;
    let patch_size = match a.patch_size {
        Some(p) if p != preset_size && a.preset != Preset::Desk => {
            return Err(CliError::usage(format!(
                "--preset {} fixes {preset_size} px patches but --patch-size is {p}; drop one of them",
                a.preset.name()
            )))
        }
        Some(p) => p,
        None => preset_size,
    };
    let spec = SceneSpec {
        outlier_prob: a.outlier_prob,
        noise_sigma: a.noise,
        frames: a.frames,
        crops: a.crops,
        patch_size,
        min_altitude: a.min_altitude_deg.to_radians(),
        max_altitude: a.max_altitude_deg.to_radians(),
        ..SceneSpec::default()
    };
    let samples = generate_sequences(&spec, a.sequences, a.seed, a.workers)?;
    let ds = Dataset {
        spec: Some(SpecEcho::from(&spec)),
        seed: Some(a.seed),
        samples,
    };
    write_dataset(&a.out, &ds, a.force)?;
    eprintln!("wrote {} sequences ({} patches) to {}", ds.samples.len(), ds.patch_count(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine {
    epoch: usize,
    train_loss: Option<f64>,
    val_mean_err_deg: f64,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let preset = a.preset;
    let mut model_cfg = preset.model();
    let enc = preset.encoding();
    let mut cfg = preset.training();
    cfg.seed = a.seed;
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.aggregate_weight {
        cfg.aggregate_weight = v;
    }
    if let Some(v) = a.layers {
        model_cfg.n_layers = v;
    }
    if let Some(v) = a.heads {
        model_cfg.n_heads = v;
    }
    if let Some(v) = a.dropout {
        model_cfg.dropout = v;
    }
    model_cfg.attention = match a.attention {
        AttentionArg::Joint => AttentionScope::Joint,
        AttentionArg::PerPatch => AttentionScope::PerPatch,
    };
    let explain = |e: CliError| e.context(&format!("preset {} with the given overrides", preset.name()));
    model_cfg.validate(&enc).map_err(|e| explain(e.into()))?;
    cfg.validate().map_err(|e| explain(e.into()))?;

    let train_ds = load(&a.train)?;
    let val_ds = load(&a.val)?;
    for (dir, ds) in [(&a.train, &train_ds), (&a.val, &val_ds)] {
        if let Some(p) = ds.patch_size() {
            if p != model_cfg.patch_size {
                return Err(CliError::usage(format!(
                    "preset {} expects {} px patches but {} has {p} px",
                    preset.name(),
                    model_cfg.patch_size,
                    dir.display()
                )));
            }
        }
    }

    fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    let ckpt_path = a.out.join("checkpoint.bin");
    let metrics_path = a.out.join("metrics.jsonl");
    let timing_path = a.out.join("timing.jsonl");
    let run_path = a.out.join("run.json");
    for p in [&ckpt_path, &metrics_path, &timing_path, &run_path] {
        check_new(p, a.force)?;
    }
    let run = json!({
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "preset": preset.name(),
        "model": model_cfg,
        "encoding": enc,
        "train": cfg,
        "train_sequences": train_ds.samples.len(),
        "val_sequences": val_ds.samples.len(),
    });
    write_file(&run_path, format!("{}\n", serde_json::to_string_pretty(&run).expect("plain json")).as_bytes(), true)?;

    let open = |p: &Path| fs::File::create(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())));
    let mut metrics = open(&metrics_path)?;
    let mut timing = open(&timing_path)?;
    let mut sink = |m: &EpochMetrics| -> Result<(), TrainError> {
        let line = MetricsLine {
            epoch: m.epoch,
            train_loss: m.train_loss,
            val_mean_err_deg: m.val_mean_err_deg,
        };
        let s = serde_json::to_string(&line).map_err(|e| TrainError::Sink(e.to_string()))?;
        writeln!(metrics, "{s}").map_err(|e| TrainError::Sink(e.to_string()))?;
        writeln!(timing, "{{\"epoch\":{},\"wall_ms\":{}}}", m.epoch, m.wall_ms).map_err(|e| TrainError::Sink(e.to_string()))?;
        match m.train_loss {
            Some(l) => eprintln!("epoch {:>3}  loss {l:.5}  val {:.3} deg", m.epoch, m.val_mean_err_deg),
            None => eprintln!("epoch {:>3}  untrained  val {:.3} deg", m.epoch, m.val_mean_err_deg),
        }
        Ok(())
    };
    let outcome = train_model(&train_ds.samples, &val_ds.samples, &model_cfg, &enc, &cfg, &mut sink)?;
    write_checkpoint(&ckpt_path, &outcome.checkpoint(a.seed, a.with_optimizer), true)?;
    eprintln!(
        "best epoch {} (val {:.3} deg); checkpoint at {}",
        outcome.best_epoch,
        outcome.best_val_deg,
        ckpt_path.display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let expected = match (a.preset, a.d_angle) {
        (None, None) => None,
        (p, d) => {
            let mut enc = p.map(Preset::encoding).unwrap_or(ckpt.model.encoding);
            if let Some(d) = d {
                enc.d_angle = d;
            }
            Some(enc)
        }
    };
    if !(a.pose_noise_deg >= 0.0 && a.pose_noise_deg.is_finite()) {
        return Err(CliError::usage(format!("--pose-noise-deg must be >= 0, got {}", a.pose_noise_deg)));
    }
    let opts = EvalOptions {
        aggregator: a.agg.aggregator.into(),
        meanshift: a.agg.params()?,
        pose_noise: a.pose_noise_deg.to_radians(),
        seed: a.seed,
        workers: a.workers,
        method: match ckpt.model.config.attention {
            AttentionScope::Joint => "transformer".into(),
            AttentionScope::PerPatch => "independent".into(),
        },
        ..EvalOptions::default()
    };
    let report = evaluate_checkpoint(&ckpt, &ds.samples, expected.as_ref(), &opts)?;
    report.write(&a.out, a.force)?;
    print_json(&json!({
        "method": report.method,
        "aggregator": report.aggregator,
        "count": report.count,
        "mean_deg": report.mean_deg,
        "median_deg": report.median_deg,
        "max_deg": report.max_deg,
        "patch_median_deg": report.patch_median_deg,
    }))
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let ds = load(&a.data)?;
    let sample = ds
        .samples
        .iter()
        .find(|s| s.scene_id == a.sequence)
        .ok_or_else(|| CliError::data(format!("{} has no sequence {}", a.data.display(), a.sequence)))?;
    ckpt.check_patch_size(sample.patch_size)?;
    if !(a.pose_noise_deg >= 0.0 && a.pose_noise_deg.is_finite()) {
        return Err(CliError::usage(format!("--pose-noise-deg must be >= 0, got {}", a.pose_noise_deg)));
    }
    let params = a.agg.params()?;
    let seen = perturb_poses(sample, a.pose_noise_deg.to_radians(), a.seed)?;
    let raw = ckpt.model.predict(&seen)?;
    let set = EstimateSet::from_sample(&seen, &raw)?;
    let v = Aggregator::from(a.agg.aggregator).apply(&set, &params)?;
    if let Some(path) = &a.estimates_out {
        check_new(path, a.force)?;
        let file = fs::File::create(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        write_estimates(std::io::BufWriter::new(file), &estimate_lines(sample.scene_id, &set))?;
    }
    let mut out = direction_json(v);
    out["sequence_id"] = json!(sample.scene_id);
    out["patches"] = json!(set.len());
    out["error_deg"] = json!(angular_error(v, sample.gt_world)?.to_degrees());
    print_json(&out)
}

pub fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let params = meanshift_params(a.bandwidth, a.outlier_sigma)?;
    let file = fs::File::open(&a.estimates).map_err(|e| CliError::data(format!("{}: {e}", a.estimates.display())))?;
    let groups = read_estimates(BufReader::new(file)).map_err(|e| CliError::from(e).context(&a.estimates.display().to_string()))?;
    if groups.is_empty() {
        return Err(CliError::data(format!("{} holds no estimates", a.estimates.display())));
    }
    let agg = Aggregator::from(a.aggregator);
    let mut text = String::new();
    for (id, set) in &groups {
        let v = agg.apply(set, &params).map_err(|e| CliError::from(e).context(&format!("sequence {id}")))?;
        let mut line = direction_json(v);
        line["sequence_id"] = json!(id);
        line["patches"] = json!(set.len());
        text.push_str(&serde_json::to_string(&line).expect("plain json"));
        text.push('\n');
    }
    match &a.out {
        Some(p) => write_file(p, text.as_bytes(), a.force),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let cases = gradient_suite(a.seed);
    if a.json {
        print_json(&cases)?;
    } else {
        for c in &cases {
            println!(
                "{:<16} rel_err {:.3e}  tol {:.0e}  {}",
                c.name,
                c.max_rel_err,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn solar(a: &SolarArgs) -> Result<(), CliError> {
    let p = sun_from_gps_time(a.lat_deg, a.lon_deg, a.time)?;
    print_json(&json!({
        "azimuth_deg": p.azimuth_deg,
        "altitude_deg": p.altitude_deg,
        "direction_enu": p.direction().to_array(),
    }))
}
