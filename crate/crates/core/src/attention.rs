//! Word-aligned attention traces and their heatmap overlays.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::beam::{beam_search, BeamConfig};
use crate::decoder::{generate_greedy, DecoderParams};
use crate::encoder::FeatureMap;
use crate::error::{invalid, Result};
use crate::image::{resize_values, GrayImage};
use crate::math;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// Overlay opacity of the heat layer.
pub const OVERLAY_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Emitted tokens in order, `<end>` included when it was emitted.
    pub words: Vec<String>,
    pub alphas: Vec<Tensor>,
    /// `(rows, cols)` of the feature grid.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy { max_len: usize },
    /// Top hypothesis of a beam search.
    Beam(BeamConfig),
}

/// Decodes once and records the attention weights of every emission step.
pub fn capture_trace(features: &FeatureMap, params: &DecoderParams, vocab: &Vocabulary, mode: DecodeMode) -> Result<AttentionTrace> {
    let (indices, alphas) = match mode {
        DecodeMode::Greedy { max_len } => {
            let (report, alphas) = generate_greedy(features, params, max_len)?;
            let mut emitted = report.indices()[1..].to_vec();
            emitted.truncate(alphas.len());
            (emitted, alphas)
        }
        DecodeMode::Beam(cfg) => {
            let best = beam_search(features, params, &cfg)?
                .into_iter()
                .next()
                .ok_or_else(|| invalid("beam search returned nothing"))?;
            (best.indices[1..].to_vec(), best.alphas)
        }
    };
    let words = indices
        .iter()
        .map(|&i| vocab.token(i).map(|t| t.to_string()).ok_or(crate::Error::IndexOutOfRange { index: i, len: vocab.len() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace {
        words,
        alphas,
        grid: (features.grid_side, features.grid_side),
    })
}

/// Bilinear upsampling of one attention map to `width x height`.
pub fn upsample_alpha(alpha: &[f64], grid: (usize, usize), width: usize, height: usize) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    if rows * cols != alpha.len() || rows == 0 {
        return Err(invalid(format!(
            "attention of length {} does not fit a {rows}x{cols} grid",
            alpha.len()
        )));
    }
    if width == 0 || height == 0 {
        return Err(invalid("heatmap target must be non-empty"));
    }
    Ok(resize_values(alpha, cols, rows, width, height))
}

/// Upsampled map scaled so its maximum is 1; an all-zero map stays zero.
pub fn heat_map(alpha: &[f64], grid: (usize, usize), width: usize, height: usize) -> Result<Vec<f64>> {
    let mut m = upsample_alpha(alpha, grid, width, height)?;
    let max = m.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        m.iter_mut().for_each(|v| *v /= max);
    } else {
        m.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(m)
}

/// RGB overlay: the grayscale base blended with a red heat layer at fixed opacity.
pub fn overlay(base: &GrayImage, heat: &[f64]) -> Result<Vec<u8>> {
    if heat.len() != base.pixels().len() {
        return Err(invalid("heat map and base image differ in size"));
    }
    let a = OVERLAY_OPACITY;
    let mut rgb = Vec::with_capacity(heat.len() * 3);
    for (&p, &h) in base.pixels().iter().zip(heat) {
        let g = p as f64;
        rgb.push(math::to_u8((1.0 - a) * g + a * 255.0 * h));
        rgb.push(math::to_u8((1.0 - a) * g));
        rgb.push(math::to_u8((1.0 - a) * g));
    }
    Ok(rgb)
}

/// `NNN_<word>.png`, with characters outside `[A-Za-z0-9-]` replaced by `_`.
pub fn heatmap_file_name(position: usize, word: &str) -> String {
    let clean: String = word
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{position:03}_{clean}.png")
}

/// One `(file name, RGB pixels)` overlay per traced word.
pub fn render_overlays(trace: &AttentionTrace, base: &GrayImage) -> Result<Vec<(String, Vec<u8>)>> {
    trace
        .words
        .iter()
        .zip(&trace.alphas)
        .enumerate()
        .map(|(i, (w, a))| {
            let heat = heat_map(a.data(), trace.grid, base.width(), base.height())?;
            Ok((heatmap_file_name(i, w), overlay(base, &heat)?))
        })
        .collect()
}
