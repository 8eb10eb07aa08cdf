//! Synthetic chest-like images paired with template reports.
//!
//! Each finding is drawn as a simple geometric primitive and described by one
//! fixed sentence, so the image-to-report mapping is learnable at desk scale
//! and the findings can be read back from any report by template matching.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::math;
use crate::text::segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Finding {
    Effusion,
    EnlargedHeart,
    IncreasedMarkings,
    Nodule,
}

pub const ALL_FINDINGS: [Finding; 4] = [
    Finding::Effusion,
    Finding::EnlargedHeart,
    Finding::IncreasedMarkings,
    Finding::Nodule,
];

pub const NO_FINDINGS_SENTENCE: &str = "No obvious abnormalities are seen in the chest.";

impl Finding {
    pub fn label(self) -> &'static str {
        match self {
            Finding::Effusion => "effusion",
            Finding::EnlargedHeart => "enlarged_heart",
            Finding::IncreasedMarkings => "increased_markings",
            Finding::Nodule => "nodule",
        }
    }

    /// Accepts the snake_case label or the same words separated by spaces.
    pub fn parse(label: &str) -> Result<Self> {
        let norm: String = label
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        ALL_FINDINGS
            .iter()
            .copied()
            .find(|f| f.label() == norm)
            .ok_or_else(|| Error::UnknownFinding(label.to_string()))
    }

    pub fn sentence(self) -> &'static str {
        match self {
            Finding::Effusion => "Pleural effusion is seen on the right side.",
            Finding::EnlargedHeart => "The heart shadow is enlarged.",
            Finding::IncreasedMarkings => "Increased lung markings in both lungs.",
            Finding::Nodule => "A small nodule is seen in the left lung.",
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Report text for a set of findings, sentences in canonical finding order.
pub fn render_report(findings: &[Finding]) -> String {
    let mut sorted = findings.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.is_empty() {
        return NO_FINDINGS_SENTENCE.to_string();
    }
    let parts: Vec<&str> = sorted.iter().map(|f| f.sentence()).collect();
    parts.join(" ")
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Findings whose template sentence occurs, token for token, in `text`.
pub fn recover_findings(text: &str) -> Vec<Finding> {
    let tokens = segment(text);
    ALL_FINDINGS
        .iter()
        .copied()
        .filter(|f| contains_run(&tokens, &segment(f.sentence())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub finding_set: Vec<Finding>,
    pub image_size: usize,
    /// Standard deviation of additive Gaussian noise, as a fraction of full scale.
    pub noise_level: f64,
}

impl SynthConfig {
    pub fn from_labels(n_samples: usize, labels: &[&str], image_size: usize, noise_level: f64) -> Result<Self> {
        let finding_set = labels.iter().map(|l| Finding::parse(l)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_samples,
            finding_set,
            image_size,
            noise_level,
        })
    }

    /// 200-ish sample desk corpora use the first three findings.
    pub fn desk(n_samples: usize) -> Self {
        Self {
            n_samples,
            finding_set: ALL_FINDINGS[..3].to_vec(),
            image_size: 64,
            noise_level: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: GrayImage,
    pub report: String,
    pub findings: Vec<Finding>,
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, base: f64) -> Self {
        Self {
            size,
            px: alloc::vec![base; size * size],
        }
    }

    /// Visits pixels whose centre lies inside the ellipse, in unit coordinates.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, mut f: impl FnMut(&mut f64, usize, usize)) {
        let s = self.size as f64;
        for y in 0..self.size {
            let v = (y as f64 + 0.5) / s;
            for x in 0..self.size {
                let u = (x as f64 + 0.5) / s;
                let d = ((u - cx) / rx) * ((u - cx) / rx) + ((v - cy) / ry) * ((v - cy) / ry);
                if d <= 1.0 {
                    f(&mut self.px[y * self.size + x], x, y);
                }
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn draw(findings: &[Finding], size: usize, noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut jitter = |amp: f64| rng.gen_range(-amp..=amp);
    let mut c = Canvas::new(size, 25.0);
    c.ellipse(0.5 + jitter(0.02), 0.55, 0.46, 0.44, |p, _, _| *p = 95.0);

    let lungs = [(0.3 + jitter(0.02), 0.5 + jitter(0.02)), (0.7 + jitter(0.02), 0.5 + jitter(0.02))];
    let lung_r = (0.16 * (1.0 + jitter(0.06)), 0.3 * (1.0 + jitter(0.06)));
    for &(lx, ly) in &lungs {
        c.ellipse(lx, ly, lung_r.0, lung_r.1, |p, _, _| *p = 40.0);
    }

    if findings.contains(&Finding::IncreasedMarkings) {
        let period = (size / 12).max(3);
        let phase = (jitter(1.0).abs() * period as f64) as usize;
        for &(lx, ly) in &lungs {
            c.ellipse(lx, ly, lung_r.0, lung_r.1, |p, x, y| {
                if (x + y + phase) % period == 0 || (x + 2 * size - y + phase) % (2 * period) == 0 {
                    *p += 70.0;
                }
            });
        }
    }
    if findings.contains(&Finding::Effusion) {
        c.ellipse(0.28 + jitter(0.02), 0.76 + jitter(0.02), 0.15, 0.1, |p, _, _| *p = 185.0);
    }
    let (hr, hry) = if findings.contains(&Finding::EnlargedHeart) {
        (0.2, 0.16)
    } else {
        (0.1, 0.09)
    };
    let scale = 1.0 + jitter(0.08);
    c.ellipse(0.54 + jitter(0.02), 0.62 + jitter(0.02), hr * scale, hry * scale, |p, _, _| *p = 215.0);
    if findings.contains(&Finding::Nodule) {
        c.ellipse(0.7 + jitter(0.03), 0.38 + jitter(0.03), 0.045, 0.045, |p, _, _| *p = 205.0);
    }

    let sigma = noise * 255.0;
    let pixels = c
        .px
        .iter()
        .map(|&v| math::to_u8(if sigma > 0.0 { v + sigma * gaussian(rng) } else { v }))
        .collect();
    GrayImage::new(size, size, pixels).expect("square canvas")
}

/// Draws `n_samples` image/report pairs; identical `(config, seed)` gives identical output.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<SynthSample>> {
    if config.n_samples == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    if config.finding_set.is_empty() {
        return Err(Error::Empty("finding set"));
    }
    if config.image_size < 8 {
        return Err(invalid("synthetic images must be at least 8 pixels wide"));
    }
    let mut pool = config.finding_set.clone();
    pool.sort();
    pool.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let k = rng.gen_range(0..=pool.len().min(2));
        let mut picks = pool.clone();
        for j in 0..k {
            let r = rng.gen_range(j..picks.len());
            picks.swap(j, r);
        }
        picks.truncate(k);
        picks.sort();
        let image = draw(&picks, config.image_size, config.noise_level, &mut rng);
        out.push(SynthSample {
            id: alloc::format!("{i:05}"),
            image,
            report: render_report(&picks),
            findings: picks,
        });
    }
    Ok(out)
}
