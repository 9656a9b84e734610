//! Paired image records, their on-disk layout, and the synthetic generator.
//!
//! Layout of one split:
//!
//! ```text
//! <root>/<split>/rgb/NNNNNN.ppm
//! <root>/<split>/thermal/NNNNNN.pgm
//! <root>/<split>/annotations.csv     image_id,class_id,x1,y1,x2,y2
//! <root>/<split>/manifest.txt        key = value
//! ```

pub mod pnm;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CftError, Result};
use crate::geometry::{BBox, GroundTruth};
use crate::real::Real;
use crate::tensor::Tensor;

pub use pnm::Image8;
pub use synth::{synthesize, ObjectSpec, SynthParams, SynthScene, Visibility, CLASS_NAMES, NUM_CLASSES};

pub const ANNOTATION_HEADER: &str = "image_id,class_id,x1,y1,x2,y2";

/// One aligned RGB/thermal pair and its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub rgb: Image8,
    pub thermal: Image8,
    pub annotations: Vec<GroundTruth>,
}

impl PairSample {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    fn check_alignment(&self) -> Result<()> {
        if self.rgb.channels != 3 || self.thermal.channels != 1 {
            return Err(CftError::format("pair", "expected a 3-channel RGB and a 1-channel thermal image"));
        }
        if (self.rgb.width, self.rgb.height) != (self.thermal.width, self.thermal.height) {
            return Err(CftError::Alignment {
                rgb_w: self.rgb.width,
                rgb_h: self.rgb.height,
                thermal_w: self.thermal.width,
                thermal_h: self.thermal.height,
            });
        }
        Ok(())
    }
}

/// Read an RGB/thermal pair. Fails if the two images differ in extent.
pub fn load_pair(
    rgb_path: impl AsRef<Path>,
    thermal_path: impl AsRef<Path>,
    annotations: Vec<GroundTruth>,
) -> Result<PairSample> {
    let sample = PairSample {
        rgb: Image8::read(rgb_path)?,
        thermal: Image8::read(thermal_path)?,
        annotations,
    };
    sample.check_alignment()?;
    Ok(sample)
}

pub fn write_pair(sample: &PairSample, rgb_path: impl AsRef<Path>, thermal_path: impl AsRef<Path>) -> Result<()> {
    sample.check_alignment()?;
    sample.rgb.write(rgb_path)?;
    sample.thermal.write(thermal_path)
}

/// Planar `[3 x H x W]` and `[1 x H x W]` tensors scaled to `[0, 1]`.
pub fn to_model_input<S: Real>(sample: &PairSample) -> (Tensor<S>, Tensor<S>) {
    let (w, h) = (sample.width(), sample.height());
    let scale = |v: u8| S::from_f64(v as f64 / 255.0);
    let rgb = Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        scale(sample.rgb.pixels[rest * 3 + c])
    });
    let thermal = Tensor::from_fn(&[1, h, w], |i| scale(sample.thermal.pixels[i]));
    (rgb, thermal)
}

/// Flat `key = value` text: one pair per line, `#` comments, blank lines ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CftError::format("key=value file", format!("line {}: missing '='", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub seed: u64,
    pub params: SynthParams,
    /// `(rgb, thermal)` paths relative to the split directory.
    pub files: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "size = {}", p.size);
        let _ = writeln!(s, "min_objects = {}", p.min_objects);
        let _ = writeln!(s, "max_objects = {}", p.max_objects);
        let _ = writeln!(
            s,
            "visibility_probs = {},{},{}",
            p.visibility_probs[0], p.visibility_probs[1], p.visibility_probs[2]
        );
        let _ = writeln!(s, "night_fraction = {}", p.night_fraction);
        for (i, (rgb, th)) in self.files.iter().enumerate() {
            let _ = writeln!(s, "file.{i:06} = {rgb},{th}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| CftError::format("manifest", format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| CftError::format("manifest", format!("bad number for {k}")))
        };
        let probs: Vec<f64> = get("visibility_probs")?
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CftError::format("manifest", "bad visibility_probs"))?;
        let probs: [f64; 3] = probs
            .try_into()
            .map_err(|_| CftError::format("manifest", "visibility_probs needs three values"))?;
        let count = num("count")? as usize;
        let mut files = Vec::with_capacity(count);
        for i in 0..count {
            let entry = get(&format!("file.{i:06}"))?;
            let (rgb, th) = entry
                .split_once(',')
                .ok_or_else(|| CftError::format("manifest", format!("bad file entry {i}")))?;
            files.push((rgb.to_string(), th.to_string()));
        }
        Ok(DatasetManifest {
            split: get("split")?.clone(),
            count,
            seed: get("seed")?
                .parse()
                .map_err(|_| CftError::format("manifest", "bad seed"))?,
            params: SynthParams {
                size: num("size")? as usize,
                min_objects: num("min_objects")? as usize,
                max_objects: num("max_objects")? as usize,
                visibility_probs: probs,
                night_fraction: num("night_fraction")?,
            },
            files,
        })
    }
}

pub fn annotations_to_csv(per_image: &[Vec<GroundTruth>]) -> String {
    let mut s = format!("{ANNOTATION_HEADER}\n");
    for (id, gts) in per_image.iter().enumerate() {
        for gt in gts {
            let b = gt.bbox;
            let _ = writeln!(s, "{id},{},{},{},{},{}", gt.class_id, b.x1, b.y1, b.x2, b.y2);
        }
    }
    s
}

/// Parse annotation lines into per-image lists for `count` images.
pub fn annotations_from_csv(text: &str, count: usize) -> Result<Vec<Vec<GroundTruth>>> {
    let mut out = vec![Vec::new(); count];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == ANNOTATION_HEADER {
            continue;
        }
        let bad = || CftError::format("annotations", format!("line {}: {line:?}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad());
        }
        let id: usize = fields[0].parse().map_err(|_| bad())?;
        let class_id: usize = fields[1].parse().map_err(|_| bad())?;
        let c: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let gt = GroundTruth {
            bbox: BBox::new(c[0], c[1], c[2], c[3]),
            class_id,
        };
        gt.validate(NUM_CLASSES)?;
        out.get_mut(id).ok_or_else(bad)?.push(gt);
    }
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CftError::io(path, e))
}

/// Generate `count` pairs into `<root>/<split>/`.
pub fn generate(
    root: impl AsRef<Path>,
    split: &str,
    seed: u64,
    count: usize,
    params: &SynthParams,
) -> Result<DatasetManifest> {
    params.validate()?;
    let dir = root.as_ref().join(split);
    for sub in ["rgb", "thermal"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| CftError::io(&d, e))?;
    }
    let scenes = crate::parallel::map_indexed(count, |i| synthesize(seed, i as u64, params));
    let mut annotations = Vec::with_capacity(count);
    let mut files = Vec::with_capacity(count);
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let rgb = format!("rgb/{i:06}.ppm");
        let th = format!("thermal/{i:06}.pgm");
        write_pair(&scene.sample, dir.join(&rgb), dir.join(&th))?;
        annotations.push(scene.sample.annotations);
        files.push((rgb, th));
    }
    write_file(&dir.join("annotations.csv"), annotations_to_csv(&annotations))?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        count,
        seed,
        params: params.clone(),
        files,
    };
    write_file(&dir.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

/// Seed used for a split: the dataset seed for `train`, a derived one for
/// any other split so the splits never share samples.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    if split == "train" {
        return seed;
    }
    // FNV-1a over the split name selects the derived stream
    let tag = split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    crate::rng::Rng::derive(seed, tag).next_u64()
}

/// Write `train` and `test` splits under `root`.
pub fn generate_dataset(
    root: impl AsRef<Path>,
    seed: u64,
    n_train: usize,
    n_test: usize,
    params: &SynthParams,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let root = root.as_ref();
    let train = generate(root, "train", split_seed(seed, "train"), n_train, params)?;
    let test = generate(root, "test", split_seed(seed, "test"), n_test, params)?;
    Ok((train, test))
}

/// A split on disk with its annotations loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub annotations: Vec<Vec<GroundTruth>>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = root.as_ref().join(split);
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| CftError::io(&mpath, e))?;
        let manifest = DatasetManifest::parse(&text)?;
        let apath = dir.join("annotations.csv");
        let text = fs::read_to_string(&apath).map_err(|e| CftError::io(&apath, e))?;
        let annotations = annotations_from_csv(&text, manifest.count)?;
        Ok(Dataset {
            dir,
            manifest,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn load(&self, index: usize) -> Result<PairSample> {
        let (rgb, th) = &self.manifest.files[index];
        load_pair(
            self.dir.join(rgb),
            self.dir.join(th),
            self.annotations[index].clone(),
        )
    }

    pub fn load_all(&self) -> Result<Vec<PairSample>> {
        crate::parallel::map_indexed(self.len(), |i| self.load(i))
            .into_iter()
            .collect()
    }
}
