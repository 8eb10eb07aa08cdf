//! Densely connected convolutional encoder.
//!
//! Layout for `n_blocks` blocks:
//!
//! ```text
//! stem:        conv3x3/2 (1 -> c0) . norm . relu . avgpool2
//! block b:     L x [norm . relu . conv3x3 (c -> growth)], each output concatenated
//!              onto everything before it
//! transition:  norm . relu . conv1x1 (c -> c/2) . avgpool2      (between blocks)
//! head:        norm . relu                                       -> V [c, p]
//! ```
//!
//! Normalization uses per-channel running statistics as fixed constants in
//! the forward pass. Statistics of trainable blocks are refreshed from each
//! sample after the optimizer step; frozen blocks keep theirs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::math;
use crate::params::{uniform, Binding, Group, Kind, Param, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub input_size: usize,
    pub frozen_blocks: usize,
    /// Output channels of the stem convolution.
    pub stem_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            layers_per_block: 6,
            growth_rate: 32,
            input_size: 256,
            frozen_blocks: 2,
            stem_channels: 64,
        }
    }
}

impl EncoderConfig {
    /// 3 blocks x 2 layers, growth 8, 64x64 input.
    pub fn desk() -> Self {
        Self {
            n_blocks: 3,
            layers_per_block: 2,
            growth_rate: 8,
            input_size: 64,
            frozen_blocks: 2,
            stem_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 || self.stem_channels == 0 {
            return Err(invalid("encoder: blocks, layers, growth and stem width must be positive"));
        }
        if self.frozen_blocks > self.n_blocks {
            return Err(invalid(format!(
                "encoder: frozen_blocks {} exceeds n_blocks {}",
                self.frozen_blocks, self.n_blocks
            )));
        }
        let div = 4usize << (self.n_blocks - 1);
        if self.input_size < div || self.input_size % div != 0 {
            return Err(invalid(format!(
                "encoder: input_size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// `(channels, grid side)` of V; `p = side * side`.
    pub fn output_dims(&self) -> (usize, usize) {
        let mut c = self.stem_channels;
        let mut side = self.input_size / 4;
        for b in 0..self.n_blocks {
            c += self.layers_per_block * self.growth_rate;
            if b + 1 < self.n_blocks {
                c /= 2;
                side /= 2;
            }
        }
        (c, side)
    }
}

/// Encoder output: `v` is `[c, p]` over a row-major `grid_side x grid_side` grid, `v_gav` its row means.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub v: Tensor,
    pub v_gav: Tensor,
    pub grid_side: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.v.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    /// Transition into this block (none for the first).
    transition: Option<(Norm, ParamId)>,
    layers: Vec<(Norm, ParamId)>,
}

/// Parameter ids of an encoder registered in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayout {
    config: EncoderConfig,
    stem: (ParamId, Norm),
    blocks: Vec<Block>,
    head: Norm,
}

/// Per-channel statistics observed at one normalization layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn add_norm(store: &mut ParamStore, name: &str, c: usize, group: Group) -> Norm {
    Norm {
        scale: store.add(format!("{name}.scale"), Tensor::full(&[c], 1.0), group, Kind::Weight),
        shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c]), group, Kind::Weight),
        mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), group, Kind::Buffer),
        var: store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), group, Kind::Buffer),
    }
}

fn conv_init<R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    uniform(rng, &[cout, cin, k, k], math::sqrt(6.0 / fan_in))
}

impl EncoderLayout {
    /// Registers freshly initialized encoder tensors in `store`.
    pub fn register<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g0 = Group::EncoderBlock(0);
        let stem_w = store.add("enc.stem.conv", conv_init(rng, config.stem_channels, 1, 3), g0, Kind::Weight);
        let stem_n = add_norm(store, "enc.stem.norm", config.stem_channels, g0);
        let mut c = config.stem_channels;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let group = Group::EncoderBlock(b);
            let transition = if b == 0 {
                None
            } else {
                let n = add_norm(store, &format!("enc.trans{b}.norm"), c, group);
                let w = store.add(format!("enc.trans{b}.conv"), conv_init(rng, c / 2, c, 1), group, Kind::Weight);
                c /= 2;
                Some((n, w))
            };
            let mut layers = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                let n = add_norm(store, &format!("enc.block{b}.layer{l}.norm"), c, group);
                let w = store.add(
                    format!("enc.block{b}.layer{l}.conv"),
                    conv_init(rng, config.growth_rate, c, 3),
                    group,
                    Kind::Weight,
                );
                layers.push((n, w));
                c += config.growth_rate;
            }
            blocks.push(Block { transition, layers });
        }
        let head = add_norm(store, "enc.head.norm", c, Group::EncoderHead);
        Ok(Self {
            config,
            stem: (stem_w, stem_n),
            blocks,
            head,
        })
    }

    /// Recovers the layout of an encoder registered earlier under the standard names.
    pub fn locate(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let id = |name: &str| store.find(name).ok_or_else(|| invalid(format!("missing parameter `{name}`")));
        let norm = |name: &str| -> Result<Norm> {
            Ok(Norm {
                scale: id(&format!("{name}.scale"))?,
                shift: id(&format!("{name}.shift"))?,
                mean: id(&format!("{name}.running_mean"))?,
                var: id(&format!("{name}.running_var"))?,
            })
        };
        let stem = (id("enc.stem.conv")?, norm("enc.stem.norm")?);
        let mut blocks = Vec::new();
        for b in 0..config.n_blocks {
            let transition = if b == 0 {
                None
            } else {
                Some((norm(&format!("enc.trans{b}.norm"))?, id(&format!("enc.trans{b}.conv"))?))
            };
            let layers = (0..config.layers_per_block)
                .map(|l| Ok((norm(&format!("enc.block{b}.layer{l}.norm"))?, id(&format!("enc.block{b}.layer{l}.conv"))?)))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block { transition, layers });
        }
        Ok(Self {
            config,
            stem,
            blocks,
            head: norm("enc.head.norm")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bind: &Binding,
        n: Norm,
        x: Var,
        stats: &mut Option<&mut Vec<NormStats>>,
    ) -> Result<Var> {
        let mean = store.get(n.mean).data();
        let inv_std: Vec<f64> = store.get(n.var).data().iter().map(|v| 1.0 / math::sqrt(v + NORM_EPS)).collect();
        if let Some(out) = stats.as_mut() {
            let xv = g.value(x);
            let c = xv.shape()[0];
            let per = xv.numel() / c;
            let m = crate::autodiff::row_means(xv.data(), c);
            let var = (0..c)
                .map(|ch| {
                    xv.data()[ch * per..(ch + 1) * per]
                        .iter()
                        .map(|v| (v - m[ch]) * (v - m[ch]))
                        .sum::<f64>()
                        / per as f64
                })
                .collect();
            out.push(NormStats {
                mean_id: n.mean,
                var_id: n.var,
                mean: m,
                var,
            });
        }
        let y = g.channel_affine(x, bind.var(n.scale), bind.var(n.shift), mean, &inv_std)?;
        Ok(g.relu(y))
    }

    /// Forward pass over a `[1, s, s]` image node. When `stats` is given, the
    /// per-channel statistics seen at every normalization layer are appended.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bind: &Binding,
        image: Var,
        mut stats: Option<&mut Vec<NormStats>>,
    ) -> Result<(Var, Var, usize)> {
        let s = self.config.input_size;
        if g.value(image).shape() != [1, s, s] {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                left: g.value(image).shape().to_vec(),
                right: vec![1, s, s],
            });
        }
        let (stem_w, stem_n) = self.stem;
        let x = g.conv2d(image, bind.var(stem_w), 2, 1)?;
        let x = self.norm(g, store, bind, stem_n, x, &mut stats)?;
        let mut x = g.avg_pool2(x)?;
        for block in &self.blocks {
            if let Some((n, w)) = block.transition {
                let y = self.norm(g, store, bind, n, x, &mut stats)?;
                let y = g.conv2d(y, bind.var(w), 1, 0)?;
                x = g.avg_pool2(y)?;
            }
            for &(n, w) in &block.layers {
                let y = self.norm(g, store, bind, n, x, &mut stats)?;
                let y = g.conv2d(y, bind.var(w), 1, 1)?;
                x = g.concat(&[x, y])?;
            }
        }
        let x = self.norm(g, store, bind, self.head, x, &mut stats)?;
        let shape = g.value(x).shape().to_vec();
        let (c, side) = (shape[0], shape[1]);
        let v = g.reshape(x, &[c, side * side])?;
        let v_gav = g.row_mean(v)?;
        Ok((v, v_gav, side))
    }

    /// Inference-only forward pass on a preprocessed image.
    pub fn encode(&self, store: &ParamStore, img: &GrayImage) -> Result<FeatureMap> {
        let s = self.config.input_size;
        if img.width() != s || img.height() != s {
            return Err(invalid(format!(
                "encoder expects {s}x{s} input, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let mut g = Graph::new();
        let bind = store.bind(&mut g, |_, _| false);
        let input = g.constant(img.to_tensor());
        let (v, v_gav, grid_side) = self.forward(&mut g, store, &bind, input, None)?;
        Ok(FeatureMap {
            v: g.value(v).clone(),
            v_gav: g.value(v_gav).clone(),
            grid_side,
        })
    }
}

/// Blends observed statistics into the running buffers, in the order given.
pub fn update_running_stats(store: &mut ParamStore, stats: &[NormStats], momentum: f64) {
    for s in stats {
        for (r, v) in store.get_mut(s.mean_id).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
        for (r, v) in store.get_mut(s.var_id).data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Exhaustive, disjoint split of parameter ids into frozen and trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub frozen: Vec<ParamId>,
    pub trainable: Vec<ParamId>,
}

impl Partition {
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.binary_search(&id).is_ok()
    }
}

/// Whether a parameter sits in one of the first `frozen_blocks` encoder blocks.
pub fn is_frozen(p: &Param, frozen_blocks: usize) -> bool {
    matches!(p.group, Group::EncoderBlock(b) if b < frozen_blocks)
}

/// Freezes every encoder tensor in blocks `0..frozen_blocks`; everything else stays trainable.
pub fn set_trainable(store: &ParamStore, n_blocks: usize, frozen_blocks: usize) -> Result<Partition> {
    if frozen_blocks > n_blocks {
        return Err(invalid(format!(
            "frozen_blocks {frozen_blocks} exceeds n_blocks {n_blocks}"
        )));
    }
    let (frozen, trainable) = store.iter().map(|(id, p)| (id, is_frozen(p, frozen_blocks))).fold(
        (Vec::new(), Vec::new()),
        |(mut f, mut t), (id, fr)| {
            if fr {
                f.push(id);
            } else {
                t.push(id);
            }
            (f, t)
        },
    );
    Ok(Partition { frozen, trainable })
}
