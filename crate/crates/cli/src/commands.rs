use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cft_core::autodiff::Graph;
use cft_core::cft::diagnostics::{write_attention_dump, ResidualReport, ResidualStats};
use cft_core::cft::CftConfig;
use cft_core::complexity::{complexity_report, detector_param_count};
use cft_core::data::{generate_dataset, parse_key_values, to_model_input, Dataset, SynthParams, CLASS_NAMES};
use cft_core::detector::{DetectorConfig, ForwardOptions, Mode};
use cft_core::train::{evaluate, prepare_all, train as train_loop, Model, LOG_HEADER};

use crate::config::{read_file, RunConfig, KEYS};
use crate::{CliError, ComplexityArgs, DumpAttnArgs, EvalArgs, GenDataArgs, RunArgs, TrainArgs};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let probs: Vec<f64> = a
        .visibility_probs
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --visibility-probs {:?}", a.visibility_probs)))?;
    let probs: [f64; 3] = probs
        .try_into()
        .map_err(|_| CliError::Usage("--visibility-probs needs three values".into()))?;
    let params = SynthParams {
        size: a.size,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        visibility_probs: probs,
        night_fraction: a.night_fraction,
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (train, test) = generate_dataset(&a.out, a.seed, a.n, a.n_test, &params)?;
    println!(
        "wrote {} train and {} test pairs to {}",
        train.count,
        test.count,
        a.out.display()
    );
    Ok(())
}

/// Defaults, then `base` (a config file), then `extra`, then flags.
fn resolve(
    run: &RunArgs,
    base: Option<&Path>,
    extra: BTreeMap<String, String>,
) -> Result<RunConfig, CliError> {
    let mut map = match (&run.config, base) {
        (Some(p), _) => read_file(p, KEYS)?,
        (None, Some(p)) if p.exists() => read_file(p, KEYS)?,
        _ => BTreeMap::new(),
    };
    map.extend(extra);
    map.extend(run.overrides());
    RunConfig::from_map(&map)
}

fn load_split(root: &Path, split: &str) -> Result<Dataset, CliError> {
    Dataset::open(root, split)
        .map_err(|e| CliError::Runtime(format!("cannot open dataset split {split:?} under {}: {e}", root.display())))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut extra = BTreeMap::new();
    if let Some(d) = &a.data {
        extra.insert("data".into(), d.display().to_string());
    }
    if let Some(o) = &a.out {
        extra.insert("out".into(), o.display().to_string());
    }
    let cfg = resolve(&a.run, None, extra)?;
    let data = cfg.data.clone().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;

    let dataset = load_split(&data, "train")?;
    let samples = prepare_all(&dataset.load_all()?)?;
    create_dir(&out)?;
    write(&out.join(RUN_CONFIG_FILE), cfg.to_text())?;

    let mut model = Model::new(cfg.detector.clone(), cfg.train.seed)?;
    let mut log = format!("{LOG_HEADER}\n");
    let log_path = out.join(LOG_FILE);
    write(&log_path, &log)?;
    let best_path = out.join(BEST_CHECKPOINT);
    let mut best = f64::INFINITY;
    let logs = train_loop(&mut model, &samples, &cfg.train, |entry, m| {
        log.push_str(&entry.csv_line());
        log.push('\n');
        fs::write(&log_path, &log).map_err(|e| cft_core::CftError::Io {
            path: log_path.display().to_string(),
            source: e,
        })?;
        if entry.loss.total < best {
            best = entry.loss.total;
            m.save(&best_path)?;
        }
        Ok(())
    })?;
    model.save(out.join(FINAL_CHECKPOINT))?;
    let last = logs.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs on {} samples; final loss {:.6}, best {:.6}",
        cfg.detector.mode,
        logs.len(),
        samples.len(),
        last.loss.total,
        best
    );
    Ok(())
}

fn checkpoint_config(checkpoint: &Path, run: &RunArgs) -> Result<RunConfig, CliError> {
    let beside = checkpoint
        .parent()
        .map(|d| d.join(RUN_CONFIG_FILE))
        .unwrap_or_else(|| PathBuf::from(RUN_CONFIG_FILE));
    resolve(run, Some(&beside), BTreeMap::new())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = checkpoint_config(&a.checkpoint, &a.run)?;
    let model = Model::load(cfg.detector.clone(), &a.checkpoint)?;
    let dataset = load_split(&a.data, &a.split)?;
    let samples = prepare_all(&dataset.load_all()?)?;
    let report = evaluate(&model, &samples, &cfg.decode, cfg.interpolation)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.txt", a.split))
    });
    write(&out, report.to_text(&CLASS_NAMES))?;
    println!("mAP50 = {:.4}", report.map50);
    println!("mAP75 = {:.4}", report.map75);
    println!("mAP = {:.4}", report.map);
    Ok(())
}

pub fn dump_attn(a: &DumpAttnArgs) -> Result<(), CliError> {
    let cfg = checkpoint_config(&a.checkpoint, &a.run)?;
    if cfg.detector.mode != Mode::Cft {
        return Err(CliError::Runtime(format!(
            "checkpoint was trained in {} mode; attention exists only in cft mode",
            cfg.detector.mode
        )));
    }
    let model = Model::load(cfg.detector.clone(), &a.checkpoint)?;
    let dataset = load_split(&a.data, &a.split)?;
    if a.index >= dataset.len() {
        return Err(CliError::Runtime(format!(
            "sample {} out of {} in split {}",
            a.index,
            dataset.len(),
            a.split
        )));
    }
    let sample = dataset.load(a.index)?;
    let (rgb, thermal) = to_model_input::<f32>(&sample);
    let g = Graph::new();
    let opts = ForwardOptions {
        record_attention: true,
        record_residuals: true,
        ..ForwardOptions::default()
    };
    let out = model
        .detector
        .forward(&g, &model.store, g.constant(rgb), g.constant(thermal), opts)?;

    create_dir(&a.out)?;
    let mut written = 0;
    for (stage, matrices) in out.attention.iter().enumerate() {
        let pooled = model.detector.fusion_modules()[stage].config().pooled_size;
        written += write_attention_dump(&a.out, &format!("stage{}_", stage + 1), matrices, pooled)?.len();
    }
    let report = ResidualReport {
        stages: out
            .residuals
            .iter()
            .map(|r| {
                (
                    r.stage,
                    ResidualStats::measure(&r.f_r, &r.delta_r),
                    ResidualStats::measure(&r.f_t, &r.delta_t),
                )
            })
            .collect(),
    };
    write(&a.out.join("residuals.txt"), report.to_text())?;
    println!("wrote {} attention files and residuals.txt to {}", written, a.out.display());
    Ok(())
}

const COMPLEXITY_KEYS: &[&str] = &[
    "channels",
    "heads",
    "blocks",
    "pooled_size",
    "mlp_ratio",
    "literal_heads",
    "layernorm",
];

fn parse_key<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("invalid value {v:?} for {k}")))
}

pub fn complexity(a: &ComplexityArgs) -> Result<(), CliError> {
    let mut cfg = CftConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", p.display())))?;
        let map = parse_key_values(&text).map_err(|e| CliError::Usage(e.to_string()))?;
        for (k, v) in &map {
            match k.as_str() {
                "channels" => cfg.channels = parse_key(k, v)?,
                "heads" => cfg.heads = parse_key(k, v)?,
                "blocks" => cfg.blocks = parse_key(k, v)?,
                "pooled_size" => cfg.pooled_size = parse_key(k, v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_key(k, v)?,
                "literal_heads" => cfg.paper_literal_heads = parse_key(k, v)?,
                "layernorm" => cfg.use_layernorm = parse_key(k, v)?,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown config key {other:?} (expected one of {})",
                        COMPLEXITY_KEYS.join(", ")
                    )))
                }
            }
        }
    }
    if let Some(v) = a.channels {
        cfg.channels = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    if let Some(v) = a.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = a.pooled_size {
        cfg.pooled_size = v;
    }
    if let Some(v) = a.mlp_ratio {
        cfg.mlp_ratio = v;
    }
    if let Some(v) = a.literal_heads {
        cfg.paper_literal_heads = v;
    }
    if let Some(v) = a.layernorm {
        cfg.use_layernorm = v;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut report = complexity_report(&cfg)?;
    for mode in Mode::ALL {
        let det = DetectorConfig {
            mode,
            ..DetectorConfig::default()
        };
        report.detector_params.push((mode.to_string(), detector_param_count(&det)?));
    }
    let text = report.to_text();
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}
