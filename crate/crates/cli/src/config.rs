//! Run configuration: defaults, then a flat `key = value` file, then flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cft_core::data::parse_key_values;
use cft_core::detector::{DecodeParams, DetectorConfig};
use cft_core::metrics::Interpolation;
use cft_core::train::TrainConfig;

use crate::CliError;

/// Every key a run config file may contain.
pub const KEYS: &[&str] = &[
    "mode",
    "data",
    "out",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "lr_step_every",
    "lr_step_factor",
    "zero_deltas",
    "w_box",
    "w_cls",
    "w_obj",
    "w_noobj",
    "image_size",
    "num_classes",
    "stem_channels",
    "stage_channels",
    "pyramid_channels",
    "head_hidden",
    "obj_bias_init",
    "cft_heads",
    "cft_blocks",
    "cft_pooled_size",
    "cft_mlp_ratio",
    "cft_literal_heads",
    "cft_layernorm",
    "score_threshold",
    "iou_threshold",
    "interpolation",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub decode: DecodeParams,
    pub interpolation: Interpolation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let detector = DetectorConfig::default();
        RunConfig {
            data: None,
            out: None,
            train: TrainConfig::default(),
            decode: DecodeParams::new(detector.image_size),
            detector,
            interpolation: Interpolation::AllPoints,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Read a config file into a key map, rejecting keys not in `allowed`.
pub fn read_file(path: &Path, allowed: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
    let map = parse_key_values(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("unknown config key {k:?} in {}", path.display())));
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let (mut step_every, mut step_factor) = (None, None);
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "mode" => c.detector.mode = v.parse().map_err(|e: cft_core::CftError| CliError::Usage(e.to_string()))?,
                "data" => c.data = Some(PathBuf::from(v)),
                "out" => c.out = Some(PathBuf::from(v)),
                "seed" => c.train.seed = parse(k, v)?,
                "epochs" => c.train.epochs = parse(k, v)?,
                "batch_size" => c.train.batch_size = parse(k, v)?,
                "lr" => c.train.lr = parse(k, v)?,
                "momentum" => c.train.momentum = parse(k, v)?,
                "weight_decay" => c.train.weight_decay = parse(k, v)?,
                "lr_step_every" => step_every = Some(parse(k, v)?),
                "lr_step_factor" => step_factor = Some(parse(k, v)?),
                "zero_deltas" => c.train.zero_deltas = parse_bool(k, v)?,
                "w_box" => c.train.loss_weights.box_loss = parse(k, v)?,
                "w_cls" => c.train.loss_weights.cls = parse(k, v)?,
                "w_obj" => c.train.loss_weights.obj = parse(k, v)?,
                "w_noobj" => c.train.loss_weights.noobj = parse(k, v)?,
                "image_size" => c.detector.image_size = parse(k, v)?,
                "num_classes" => c.detector.num_classes = parse(k, v)?,
                "stem_channels" => c.detector.stem_channels = parse(k, v)?,
                "stage_channels" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| parse(k, p.trim()))
                        .collect::<Result<_, _>>()?;
                    c.detector.stage_channels = parts
                        .try_into()
                        .map_err(|_| CliError::Usage("stage_channels needs three values".into()))?;
                }
                "pyramid_channels" => c.detector.pyramid_channels = parse(k, v)?,
                "head_hidden" => c.detector.head_hidden = parse(k, v)?,
                "obj_bias_init" => c.detector.obj_bias_init = parse(k, v)?,
                "cft_heads" => c.detector.cft.heads = parse(k, v)?,
                "cft_blocks" => c.detector.cft.blocks = parse(k, v)?,
                "cft_pooled_size" => c.detector.cft.pooled_size = parse(k, v)?,
                "cft_mlp_ratio" => c.detector.cft.mlp_ratio = parse(k, v)?,
                "cft_literal_heads" => c.detector.cft.paper_literal_heads = parse_bool(k, v)?,
                "cft_layernorm" => c.detector.cft.use_layernorm = parse_bool(k, v)?,
                "score_threshold" => c.decode.score_threshold = parse(k, v)?,
                "iou_threshold" => c.decode.iou_threshold = parse(k, v)?,
                "interpolation" => {
                    c.interpolation = match v {
                        "all_points" => Interpolation::AllPoints,
                        "coco101" => Interpolation::Coco101,
                        _ => return Err(CliError::Usage(format!("interpolation must be all_points or coco101, got {v:?}"))),
                    }
                }
                other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
            }
        }
        match (step_every, step_factor) {
            (Some(e), Some(f)) => c.train.lr_step = Some((e, f)),
            (None, None) => {}
            _ => return Err(CliError::Usage("lr_step_every and lr_step_factor go together".into())),
        }
        // the stage width of each fusion module comes from stage_channels
        c.detector.cft.channels = c.detector.stage_channels[0];
        c.decode.image_width = c.detector.image_size as f64;
        c.decode.image_height = c.detector.image_size as f64;
        c.detector.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        c.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    /// Every key, in [`KEYS`] order. Paths are omitted when unset.
    pub fn to_text(&self) -> String {
        let d = &self.detector;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", d.mode.to_string());
        if let Some(p) = &self.data {
            put("data", p.display().to_string());
        }
        if let Some(p) = &self.out {
            put("out", p.display().to_string());
        }
        put("seed", t.seed.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        if let Some((e, f)) = t.lr_step {
            put("lr_step_every", e.to_string());
            put("lr_step_factor", f.to_string());
        }
        put("zero_deltas", t.zero_deltas.to_string());
        put("w_box", t.loss_weights.box_loss.to_string());
        put("w_cls", t.loss_weights.cls.to_string());
        put("w_obj", t.loss_weights.obj.to_string());
        put("w_noobj", t.loss_weights.noobj.to_string());
        put("image_size", d.image_size.to_string());
        put("num_classes", d.num_classes.to_string());
        put("stem_channels", d.stem_channels.to_string());
        put(
            "stage_channels",
            d.stage_channels.map(|c| c.to_string()).join(","),
        );
        put("pyramid_channels", d.pyramid_channels.to_string());
        put("head_hidden", d.head_hidden.to_string());
        put("obj_bias_init", d.obj_bias_init.to_string());
        put("cft_heads", d.cft.heads.to_string());
        put("cft_blocks", d.cft.blocks.to_string());
        put("cft_pooled_size", d.cft.pooled_size.to_string());
        put("cft_mlp_ratio", d.cft.mlp_ratio.to_string());
        put("cft_literal_heads", d.cft.paper_literal_heads.to_string());
        put("cft_layernorm", d.cft.use_layernorm.to_string());
        put("score_threshold", self.decode.score_threshold.to_string());
        put("iou_threshold", self.decode.iou_threshold.to_string());
        put(
            "interpolation",
            match self.interpolation {
                Interpolation::AllPoints => "all_points",
                Interpolation::Coco101 => "coco101",
            }
            .to_string(),
        );
        s
    }
}
