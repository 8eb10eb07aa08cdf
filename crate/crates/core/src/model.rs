//! Encoder, decoder, and pretraining head bundled over one parameter store.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::decoder::{teacher_forced_graph, DecoderConfig, DecoderDims, DecoderLayout, DecoderParams, FeatureVars};
use crate::encoder::{is_frozen, EncoderConfig, EncoderLayout, FeatureMap, NormStats};
use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::math;
use crate::params::{uniform, Group, Kind, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::TokenizedReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

/// Loss, per-parameter gradients (indexed by [`ParamId`]) and observed
/// normalization statistics of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradients {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
    pub norm_stats: Vec<NormStats>,
    pub clamp_hits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: EncoderLayout,
    decoder: DecoderLayout,
    classifier: Option<(ParamId, ParamId)>,
}

/// What a training pass optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Caption { frozen_blocks: usize },
    Pretrain,
}

impl Objective {
    fn trains(self, group: Group) -> bool {
        match (self, group) {
            (Objective::Caption { frozen_blocks }, Group::EncoderBlock(b)) => b >= frozen_blocks,
            (Objective::Caption { .. }, Group::Classifier) => false,
            (Objective::Caption { .. }, _) => true,
            (Objective::Pretrain, Group::Decoder) => false,
            (Objective::Pretrain, _) => true,
        }
    }
}

impl Model {
    /// Fresh model; `n_findings > 0` adds a linear pretraining classifier over `V_gav`.
    pub fn new(config: ModelConfig, vocab_size: usize, n_findings: usize, seed: u64) -> Result<Self> {
        if vocab_size < 3 {
            return Err(invalid("vocabulary must hold at least the three special tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderLayout::register(config.encoder, &mut store, &mut rng)?;
        let (channels, side) = config.encoder.output_dims();
        let dims = DecoderDims {
            vocab: vocab_size,
            embed: config.decoder.embed,
            channels,
            positions: side * side,
            hidden: config.decoder.hidden,
        };
        let decoder = DecoderParams::random(dims, config.decoder.gate_bias, &mut rng).register(&mut store);
        let classifier = (n_findings > 0).then(|| {
            let bound = math::sqrt(3.0 / channels as f64);
            let w = store.add("cls.weight", uniform(&mut rng, &[n_findings, channels], bound), Group::Classifier, Kind::Weight);
            let b = store.add("cls.bias", Tensor::zeros(&[n_findings]), Group::Classifier, Kind::Weight);
            (w, b)
        });
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            classifier,
        })
    }

    /// Rebuilds a model around tensors loaded from disk.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let encoder = EncoderLayout::locate(config.encoder, &store)?;
        let decoder = DecoderLayout::locate(&store)?;
        let classifier = match (store.find("cls.weight"), store.find("cls.bias")) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        };
        let model = Self {
            config,
            store,
            encoder,
            decoder,
            classifier,
        };
        let (c, side) = config.encoder.output_dims();
        let d = model.dims();
        if d.channels != c || d.positions != side * side || d.hidden != config.decoder.hidden || d.embed != config.decoder.embed {
            return Err(invalid("stored tensors do not match the model configuration"));
        }
        Ok(model)
    }

    pub fn dims(&self) -> DecoderDims {
        self.decoder_params().dims()
    }

    pub fn vocab_size(&self) -> usize {
        self.dims().vocab
    }

    pub fn decoder_params(&self) -> DecoderParams {
        self.decoder.params(&self.store)
    }

    /// Features of an image already preprocessed to the encoder input size.
    pub fn features(&self, img: &GrayImage) -> Result<FeatureMap> {
        self.encoder.encode(&self.store, img)
    }

    fn run(&self, img: &GrayImage, objective: Objective, target: Target<'_>, collect: bool) -> Result<SampleGradients> {
        let mut g = Graph::new();
        let bind = self
            .store
            .bind(&mut g, |_, p| collect && objective.trains(p.group));
        let input = g.constant(img.to_tensor());
        let mut stats = Vec::new();
        let (v, v_gav, _) = self
            .encoder
            .forward(&mut g, &self.store, &bind, input, collect.then_some(&mut stats))?;
        let loss = match target {
            Target::Report(truth) => {
                let dv = self.decoder.vars(&bind);
                let fv = FeatureVars::new(&mut g, &dv, v, v_gav)?;
                teacher_forced_graph(&mut g, &dv, &fv, truth)?.0
            }
            Target::Findings(labels) => {
                let (w, b) = self.classifier.ok_or_else(|| invalid("model has no pretraining classifier"))?;
                let z = g.matmul(bind.var(w), v_gav)?;
                let z = g.add(z, bind.var(b))?;
                let l = g.bce_with_logits(z, labels)?;
                g.scale(l, 1.0 / labels.len() as f64)
            }
        };
        let value = g.value(loss).item().expect("scalar loss");
        let mut grads = vec![None; self.store.len()];
        if collect {
            g.backward(loss)?;
            for (id, _) in self.store.iter() {
                grads[id.0] = g.take_grad(bind.var(id));
            }
            let frozen = match objective {
                Objective::Caption { frozen_blocks } => frozen_blocks,
                Objective::Pretrain => 0,
            };
            stats.retain(|s| !is_frozen(self.store.param(s.mean_id), frozen));
        }
        Ok(SampleGradients {
            loss: value,
            grads,
            norm_stats: stats,
            clamp_hits: g.clamp_hits(),
        })
    }

    /// Teacher-forced caption loss with gradients for every parameter outside the frozen blocks.
    pub fn caption_gradients(&self, img: &GrayImage, truth: &TokenizedReport, frozen_blocks: usize) -> Result<SampleGradients> {
        self.run(img, Objective::Caption { frozen_blocks }, Target::Report(truth), true)
    }

    pub fn caption_loss(&self, img: &GrayImage, truth: &TokenizedReport) -> Result<f64> {
        Ok(self
            .run(img, Objective::Caption { frozen_blocks: 0 }, Target::Report(truth), false)?
            .loss)
    }

    /// Mean binary cross-entropy of the finding classifier; trains encoder and classifier.
    pub fn pretrain_gradients(&self, img: &GrayImage, labels: &[f64]) -> Result<SampleGradients> {
        self.run(img, Objective::Pretrain, Target::Findings(labels), true)
    }

    /// Parameter ids optimized by the caption objective, split into (encoder, decoder).
    pub fn caption_param_groups(&self, frozen_blocks: usize) -> (Vec<ParamId>, Vec<ParamId>) {
        let obj = Objective::Caption { frozen_blocks };
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for (id, p) in self.store.iter() {
            if p.kind != Kind::Weight || !obj.trains(p.group) {
                continue;
            }
            if p.group == Group::Decoder {
                dec.push(id);
            } else {
                enc.push(id);
            }
        }
        (enc, dec)
    }

    pub fn pretrain_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.kind == Kind::Weight && Objective::Pretrain.trains(p.group))
            .map(|(id, _)| id)
            .collect()
    }
}

enum Target<'a> {
    Report(&'a TokenizedReport),
    Findings(&'a [f64]),
}
