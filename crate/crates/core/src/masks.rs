//! Router mask images: hard patches white, easy patches black, at input resolution.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::backbone::CatAir;
use crate::degrade::write_gray_png;
use crate::error::{Error, Result};
use crate::spatial::RouterDecision;

pub const HARD: u8 = 255;
pub const EASY: u8 = 0;

/// Renders one decision at `scale` times the routed feature resolution.
pub fn mask_image(decision: &RouterDecision, window: usize, scale: usize) -> Array2<u8> {
    let cell = window * scale;
    let mut hard = vec![false; decision.rows * decision.cols];
    for &i in &decision.idx_hard {
        hard[i] = true;
    }
    Array2::from_shape_fn((decision.rows * cell, decision.cols * cell), |(y, x)| {
        if hard[(y / cell) * decision.cols + x / cell] {
            HARD
        } else {
            EASY
        }
    })
}

/// `(label, level)` of every spatial-attention sublayer in execution order.
pub fn sublayer_labels(model: &CatAir) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, blocks) in model.encoder.iter().enumerate() {
        for j in 0..blocks.len() {
            out.push((format!("enc{}.block{j}", i + 1), i + 1));
        }
    }
    for d in &model.decoder {
        for j in 0..d.blocks.len() {
            out.push((format!("dec{}.block{j}", d.level), d.level));
        }
    }
    out
}

/// Writes one grayscale PNG per sublayer into `dir` and returns the paths.
pub fn dump_masks(model: &CatAir, decisions: &[RouterDecision], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let labels = sublayer_labels(model);
    if labels.len() != decisions.len() {
        return Err(Error::Shape(format!(
            "{} decisions for {} spatial sublayers",
            decisions.len(),
            labels.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    labels
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(i, ((label, level), d))| {
            let path = dir.join(format!("mask_{i:02}_{label}.png"));
            write_gray_png(&mask_image(d, model.config.window, 1 << (level - 1)), &path)?;
            Ok(path)
        })
        .collect()
}

/// Fraction of white pixels.
pub fn white_fraction(mask: &Array2<u8>) -> f64 {
    mask.iter().filter(|&&v| v == HARD).count() as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::decide_infer;

    #[test]
    fn mask_layout() {
        let d = decide_infer(&[1.0, 0.0, 0.0, 2.0], 2, 2, 0.5).unwrap();
        let m = mask_image(&d, 2, 2);
        assert_eq!(m.dim(), (8, 8));
        assert_eq!(m[[0, 0]], HARD);
        assert_eq!(m[[3, 3]], HARD);
        assert_eq!(m[[0, 4]], EASY);
        assert_eq!(m[[7, 7]], HARD);
        assert_eq!(m[[7, 0]], EASY);
        assert_eq!(white_fraction(&m), 0.5);
    }

    #[test]
    fn extremes_are_uniform() {
        let logits = [0.3, -1.0, 2.0, 0.0, 0.0, 5.0];
        let all = mask_image(&decide_infer(&logits, 2, 3, 1.0).unwrap(), 4, 1);
        assert!(all.iter().all(|&v| v == HARD));
        let none = mask_image(&decide_infer(&logits, 2, 3, 0.0).unwrap(), 4, 1);
        assert!(none.iter().all(|&v| v == EASY));
    }
}
