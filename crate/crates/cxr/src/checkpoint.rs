//! Versioned single-file checkpoint. The byte layout is described in
//! `docs/checkpoint.md`; everything is little-endian.

use std::fs;
use std::path::Path;

use cxr_core::params::{Group, Kind, ParamId, ParamStore};
use cxr_core::model::Model;
use cxr_core::text::Vocabulary;
use cxr_core::train::{Adam, Trainer};
use cxr_core::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::metrics::EpochMetrics;

pub const MAGIC: &[u8; 8] = b"CXRCKPT\0";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run or to decode with its model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub vocab: Vocabulary,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            train: self.trainer.config.clone(),
            model: self.trainer.model.config,
        }
    }

    pub fn model(&self) -> &Model {
        &self.trainer.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.trainer.epoch as u64);
        w.str(&self.run_config().to_text());

        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }

        let store = &self.trainer.model.store;
        w.u32(store.len() as u32);
        for (_, p) in store.iter() {
            w.str(&p.name);
            let (tag, index) = match p.group {
                Group::EncoderBlock(i) => (0u8, i as u32),
                Group::EncoderHead => (1, 0),
                Group::Decoder => (2, 0),
                Group::Classifier => (3, 0),
            };
            w.u8(tag);
            w.u32(index);
            w.u8(match p.kind {
                Kind::Weight => 0,
                Kind::Buffer => 1,
            });
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }

        for opt in [&self.trainer.encoder_opt, &self.trainer.decoder_opt] {
            w.f64(opt.lr);
            w.u64(opt.t);
            w.u32(opt.ids.len() as u32);
            for (k, id) in opt.ids.iter().enumerate() {
                w.u32(id.0 as u32);
                w.f64s(&opt.m[k]);
                w.f64s(&opt.v[k]);
            }
        }

        w.u32(self.history.len() as u32);
        for h in &self.history {
            w.u64(h.epoch as u64);
            w.f64(h.train_loss);
            w.f64(h.val_loss);
            w.u8(h.val_cider.is_some() as u8);
            w.f64(h.val_cider.unwrap_or(0.0));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let epoch = r.u64()? as usize;
        let config = RunConfig::parse(&r.str()?).map_err(|e| e.to_string())?;

        let n_tokens = r.u32()? as usize;
        let tokens = (0..n_tokens).map(|_| r.str()).collect::<std::result::Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::from_index_list(tokens).map_err(|e| e.to_string())?;

        let n_params = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let group = match (r.u8()?, r.u32()? as usize) {
                (0, i) => Group::EncoderBlock(i),
                (1, _) => Group::EncoderHead,
                (2, _) => Group::Decoder,
                (3, _) => Group::Classifier,
                (t, _) => return Err(format!("unknown group tag {t}")),
            };
            let kind = match r.u8()? {
                0 => Kind::Weight,
                1 => Kind::Buffer,
                k => return Err(format!("unknown kind tag {k}")),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            let value = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            store.add(name, value, group, kind);
        }
        let model = Model::from_store(config.model, store).map_err(|e| e.to_string())?;
        if model.vocab_size() != vocab.len() {
            return Err(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.vocab_size()
            ));
        }

        let mut opts = Vec::with_capacity(2);
        for _ in 0..2 {
            let lr = r.f64()?;
            let t = r.u64()?;
            let n = r.u32()? as usize;
            let (mut ids, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let id = r.u32()? as usize;
                if id >= model.store.len() {
                    return Err(format!("optimizer refers to missing tensor {id}"));
                }
                let numel = model.store.get(ParamId(id)).numel();
                ids.push(ParamId(id));
                m.push(r.f64s(numel)?);
                v.push(r.f64s(numel)?);
            }
            opts.push(Adam {
                lr,
                hyper: config.train.adam,
                t,
                ids,
                m,
                v,
            });
        }
        let decoder_opt = opts.pop().expect("two optimizers");
        let encoder_opt = opts.pop().expect("two optimizers");

        let n_hist = r.u32()? as usize;
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let epoch = r.u64()? as usize;
            let train_loss = r.f64()?;
            let val_loss = r.f64()?;
            let has = r.u8()? != 0;
            let c = r.f64()?;
            history.push(EpochMetrics {
                epoch,
                train_loss,
                val_loss,
                val_cider: has.then_some(c),
            });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            trainer: Trainer {
                model,
                config: config.train,
                encoder_opt,
                decoder_opt,
                epoch,
            },
            vocab,
            history,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8 string".to_string())
    }
}
