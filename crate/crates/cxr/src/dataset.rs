//! On-disk corpus: a directory of 8-bit grayscale PNGs plus `reports.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cxr_core::image::GrayImage;
use cxr_core::synth::{synth_dataset, SynthConfig};
use cxr_core::text::{build_vocab, segment, Vocabulary};
use cxr_core::train::split_dataset;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const REPORTS_FILE: &str = "reports.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    /// Relative to the dataset directory.
    pub image_file: String,
    pub report: String,
    pub findings: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<ReportRecord>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(REPORTS_FILE);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReportRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
                context: format!("{} line {}", path.display(), n + 1),
                source,
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Invalid(format!("{} holds no records", path.display())));
        }
        Ok(Self { root, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ReportRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&ReportRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn image_path(&self, rec: &ReportRecord) -> PathBuf {
        self.root.join(&rec.image_file)
    }

    pub fn image(&self, rec: &ReportRecord) -> Result<GrayImage> {
        read_png(&self.image_path(rec))
    }

    /// Vocabulary over the training reports only.
    pub fn train_vocab(&self, min_count: usize) -> Result<Vocabulary> {
        let corpus: Vec<Vec<String>> = self.split(Split::Train).iter().map(|r| segment(&r.report)).collect();
        if corpus.is_empty() {
            return Err(Error::Invalid("dataset has no training records".into()));
        }
        Ok(build_vocab(&corpus, min_count))
    }
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    Ok(GrayImage::new(w as usize, h as usize, luma.into_raw())?)
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    image::save_buffer(path, img.pixels(), img.width() as u32, img.height() as u32, image::ExtendedColorType::L8).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

pub fn write_rgb_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    image::save_buffer(path, rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Draws a synthetic corpus, assigns splits with the seeded split rule and
/// writes it under `dir`.
pub fn write_synthetic(dir: &Path, config: &SynthConfig, seed: u64, ratios: (f64, f64, f64)) -> Result<Dataset> {
    let samples = synth_dataset(config, seed)?;
    let parts = split_dataset(samples.len(), ratios, seed)?;
    let mut split_of = vec![Split::Train; samples.len()];
    parts.val.iter().for_each(|&i| split_of[i] = Split::Val);
    parts.test.iter().for_each(|&i| split_of[i] = Split::Test);

    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut records = Vec::with_capacity(samples.len());
    for (s, split) in samples.iter().zip(split_of) {
        let image_file = format!("images/{}.png", s.id);
        write_png(&dir.join(&image_file), &s.image)?;
        records.push(ReportRecord {
            id: s.id.clone(),
            image_file,
            report: s.report.clone(),
            findings: s.findings.iter().map(|f| f.label().to_string()).collect(),
            split,
        });
    }
    let path = dir.join(REPORTS_FILE);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    for rec in &records {
        let line = serde_json::to_string(rec).map_err(|source| Error::Json {
            context: "report record".into(),
            source,
        })?;
        writeln!(out, "{line}").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let body = VocabFile {
        version: 1,
        tokens: vocab.tokens().to_vec(),
    };
    let text = serde_json::to_string_pretty(&body).map_err(|source| Error::Json {
        context: "vocabulary".into(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let body: VocabFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    if body.version != 1 {
        return Err(Error::Invalid(format!("unsupported vocabulary version {}", body.version)));
    }
    Ok(Vocabulary::from_index_list(body.tokens)?)
}
