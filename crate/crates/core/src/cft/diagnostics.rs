//! Inspection output for trained fusion modules: attention dumps and the
//! size of the corrections relative to the features they modify.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::correlation::CorrelationMatrix;
use crate::data::Image8;
use crate::error::{CftError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Value ranges of one modality's features and the correction added to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub feature_min: f64,
    pub feature_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// `max|delta| / max|F|`; 0 when the correction vanishes.
    pub ratio: f64,
}

impl ResidualStats {
    pub fn measure<S: Real>(feature: &Tensor<S>, delta: &Tensor<S>) -> Self {
        let (fmin, fmax) = feature.min_max();
        let (dmin, dmax) = delta.min_max();
        let dabs = delta.max_abs().to_f64();
        let fabs = feature.max_abs().to_f64();
        let ratio = if dabs == 0.0 {
            0.0
        } else if fabs == 0.0 {
            f64::INFINITY
        } else {
            dabs / fabs
        };
        ResidualStats {
            feature_min: fmin.to_f64(),
            feature_max: fmax.to_f64(),
            delta_min: dmin.to_f64(),
            delta_max: dmax.to_f64(),
            ratio,
        }
    }
}

/// Per stage, per modality statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualReport {
    /// `(stage, rgb, thermal)`.
    pub stages: Vec<(usize, ResidualStats, ResidualStats)>,
}

impl ResidualReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("stage,modality,feature_min,feature_max,delta_min,delta_max,ratio\n");
        for (stage, r, t) in &self.stages {
            for (name, st) in [("rgb", r), ("thermal", t)] {
                let _ = writeln!(
                    s,
                    "{stage},{name},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    st.feature_min, st.feature_max, st.delta_min, st.delta_max, st.ratio
                );
            }
        }
        s
    }
}

/// 8-bit grayscale rendering of `alpha`, min-max scaled to `[0, 255]`.
pub fn attention_heatmap<S: Real>(alpha: &Tensor<S>) -> Image8 {
    let n = alpha.shape()[0];
    let (lo, hi) = alpha.min_max();
    let (lo, hi) = (lo.to_f64(), hi.to_f64());
    let span = hi - lo;
    let px = alpha
        .data()
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v.to_f64() - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Image8::from_pixels(alpha.shape()[1], n, 1, px).expect("square matrix")
}

/// Write one CSV, one heatmap and one sidecar per (block, head).
///
/// Returns the paths written, in (block, head) order.
pub fn write_attention_dump<S: Real>(
    dir: impl AsRef<Path>,
    prefix: &str,
    matrices: &[CorrelationMatrix<S>],
    pooled_size: usize,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CftError::io(dir, e))?;
    let boundary = pooled_size * pooled_size;
    let mut written = Vec::new();
    for m in matrices {
        if m.extent() != 2 * boundary {
            return Err(CftError::dim(format!(
                "attention extent {} does not match 2 x {boundary} tokens",
                m.extent()
            )));
        }
        let stem = format!("{prefix}block{}_head{}", m.block, m.head);
        let n = m.extent();

        let mut csv = String::with_capacity(n * n * 12);
        for row in m.alpha.data().chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{:.8e}", v.to_f64())).collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, csv).map_err(|e| CftError::io(&csv_path, e))?;

        let pgm_path = dir.join(format!("{stem}.pgm"));
        attention_heatmap(&m.alpha).write(&pgm_path)?;

        let (lo, hi) = m.alpha.min_max();
        let sidecar = format!(
            "block = {}\nhead = {}\nextent = {n}\nscale_min = {:.8e}\nscale_max = {:.8e}\n\
             quadrant_boundary = {boundary}\nrows_rgb = 0..{boundary}\nrows_thermal = {boundary}..{n}\n",
            m.block,
            m.head,
            lo.to_f64(),
            hi.to_f64(),
        );
        let side_path = dir.join(format!("{stem}.txt"));
        fs::write(&side_path, sidecar).map_err(|e| CftError::io(&side_path, e))?;
        written.extend([csv_path, pgm_path, side_path]);
    }
    Ok(written)
}
