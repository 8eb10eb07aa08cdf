//! Attention overlays for one image, written as PNGs plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use cxr_core::attention::{capture_trace, render_overlays, AttentionTrace, DecodeMode};
use cxr_core::image::{preprocess, GrayImage};
use cxr_core::model::Model;
use cxr_core::text::Vocabulary;
use serde::Serialize;

use crate::dataset::write_rgb_png;
use crate::error::{io_err, Error, Result};

pub const TRACE_FILE: &str = "trace.json";

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    words: &'a [String],
    grid: (usize, usize),
    alphas: Vec<&'a [f64]>,
    files: &'a [String],
}

/// Decodes `image` (original resolution) and renders one overlay per emitted word.
pub fn trace_image(model: &Model, vocab: &Vocabulary, image: &GrayImage, mode: DecodeMode) -> Result<AttentionTrace> {
    let input = preprocess(image, model.config.encoder.input_size)?;
    let features = model.features(&input)?;
    Ok(capture_trace(&features, &model.decoder_params(), vocab, mode)?)
}

/// Writes the overlays and `trace.json` into `out_dir`; returns the PNG paths.
pub fn write_overlays(trace: &AttentionTrace, base: &GrayImage, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let overlays = render_overlays(trace, base)?;
    let mut paths = Vec::with_capacity(overlays.len());
    for (name, rgb) in &overlays {
        let path = out_dir.join(name);
        write_rgb_png(&path, rgb, base.width(), base.height())?;
        paths.push(path);
    }
    let names: Vec<String> = overlays.into_iter().map(|(n, _)| n).collect();
    let sidecar = Sidecar {
        words: &trace.words,
        grid: trace.grid,
        alphas: trace.alphas.iter().map(|a| a.data()).collect(),
        files: &names,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|source| Error::Json {
        context: "attention trace".into(),
        source,
    })?;
    let path = out_dir.join(TRACE_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(paths)
}
