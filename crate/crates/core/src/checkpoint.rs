//! Versioned binary checkpoints. The byte layout is documented in
//! `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cell::{CellConfig, CellParams, CellVariant};
use crate::data::InputKind;
use crate::error::{Result, RkmError};
use crate::grad::{ParamStore, Tensor, LAYER_NORM_EPS};
use crate::heads::{Classifier, LanguageModel};

pub const MAGIC: &[u8; 4] = b"RKMC";
pub const VERSION: u32 = 1;

pub const SECTION_PARAMS: u8 = 0x01;
pub const SECTION_WAVELET: u8 = 0x02;
pub const SECTION_CLASSIFIER: u8 = 0x03;
pub const SECTION_LM: u8 = 0x04;
pub const SECTION_VOCAB: u8 = 0x05;
pub const SECTION_META: u8 = 0x7F;

const FLAG_LAYER_NORM: u32 = 1;
const FLAG_LEARN_SIGMA: u32 = 1 << 1;
const FLAG_NGRAM_GATES: u32 = 1 << 2;
const FLAG_WAVELET: u32 = 1 << 3;
const FLAG_FILTER_LENGTHS: u32 = 1 << 4;

const WAVELET_PREFIX: &str = "cell.wav.";
const TIME_GRID: &str = "cell.wav.time_grid";

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    None,
    Classifier { classes: usize, input: InputKind },
    LanguageModel { vocab: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cell: CellConfig,
    pub head: Head,
    /// Every parameter array by name, in store order.
    pub arrays: Vec<(String, Tensor)>,
    pub time_grid: Vec<f64>,
    pub vocab: Option<Vec<String>>,
    pub meta: BTreeMap<String, String>,
}

/// A model rebuilt from a checkpoint.
#[derive(Clone, Debug)]
pub enum Model {
    Cell { store: ParamStore, params: CellParams },
    Classifier(Classifier),
    LanguageModel(LanguageModel),
}

fn arrays_of(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

fn base_meta(cell: &CellConfig) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("ln_eps".into(), format!("{LAYER_NORM_EPS:e}"));
    meta.insert("seed".into(), cell.seed.to_string());
    meta.insert("time_grid".into(), "centered".into());
    if let Some(l) = &cell.filter_lengths {
        let s: Vec<String> = l.iter().map(usize::to_string).collect();
        meta.insert("filter_lengths".into(), s.join(","));
    }
    meta
}

impl Checkpoint {
    pub fn from_cell(store: &ParamStore, params: &CellParams) -> Self {
        Checkpoint {
            cell: params.config.clone(),
            head: Head::None,
            arrays: arrays_of(store),
            time_grid: params.time_grid.clone(),
            vocab: None,
            meta: base_meta(&params.config),
        }
    }

    pub fn from_classifier(model: &Classifier, vocab: Option<&[String]>) -> Self {
        let mut meta = base_meta(&model.cell.config);
        meta.insert("fc_activation".into(), "tanh".into());
        Checkpoint {
            cell: model.cell.config.clone(),
            head: Head::Classifier {
                classes: model.classes,
                input: model.input.kind(),
            },
            arrays: arrays_of(&model.store),
            time_grid: model.cell.time_grid.clone(),
            vocab: vocab.map(<[String]>::to_vec),
            meta,
        }
    }

    pub fn from_lm(model: &LanguageModel, vocab: Option<&[String]>) -> Self {
        Checkpoint {
            cell: model.cell.config.clone(),
            head: Head::LanguageModel { vocab: model.vocab },
            arrays: arrays_of(&model.store),
            time_grid: model.cell.time_grid.clone(),
            vocab: vocab.map(<[String]>::to_vec),
            meta: base_meta(&model.cell.config),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.cell;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(c.variant.tag());
        for v in [c.m, c.d, c.n, c.dilation] {
            put_u32(&mut out, to_u32(v)?);
        }
        out.extend(c.sigma_i_sq.to_le_bytes());
        out.extend(c.sigma_f_sq.to_le_bytes());
        let mut flags = 0;
        for (on, bit) in [
            (c.use_layer_norm, FLAG_LAYER_NORM),
            (c.learn_sigma, FLAG_LEARN_SIGMA),
            (c.ngram_gates, FLAG_NGRAM_GATES),
            (c.wavelet_content, FLAG_WAVELET),
            (c.filter_lengths.is_some(), FLAG_FILTER_LENGTHS),
        ] {
            if on {
                flags |= bit;
            }
        }
        put_u32(&mut out, flags);

        let is_head = |n: &str| n.starts_with("head.");
        let is_wavelet = |n: &str| n.starts_with(WAVELET_PREFIX);
        let cell_arrays: Vec<&(String, Tensor)> = self.arrays.iter().filter(|(n, _)| !is_head(n) && !is_wavelet(n)).collect();
        section(&mut out, SECTION_PARAMS, &array_list(&cell_arrays)?);

        if c.wavelet_content {
            let grid = (TIME_GRID.to_string(), Tensor::vector(self.time_grid.clone()));
            let mut wav: Vec<&(String, Tensor)> = self.arrays.iter().filter(|(n, _)| is_wavelet(n)).collect();
            wav.push(&grid);
            section(&mut out, SECTION_WAVELET, &array_list(&wav)?);
        }

        let head_arrays: Vec<&(String, Tensor)> = self.arrays.iter().filter(|(n, _)| is_head(n)).collect();
        match &self.head {
            Head::None => {}
            Head::Classifier { classes, input } => {
                let mut p = Vec::new();
                put_u32(&mut p, to_u32(*classes)?);
                let (kind, width) = match *input {
                    InputKind::Tokens { vocab } => (0u8, vocab),
                    InputKind::Signal { channels } => (1u8, channels),
                };
                p.push(kind);
                put_u32(&mut p, to_u32(width)?);
                p.extend(array_list(&head_arrays)?);
                section(&mut out, SECTION_CLASSIFIER, &p);
            }
            Head::LanguageModel { vocab } => {
                let mut p = Vec::new();
                put_u32(&mut p, to_u32(*vocab)?);
                p.extend(array_list(&head_arrays)?);
                section(&mut out, SECTION_LM, &p);
            }
        }

        if let Some(v) = &self.vocab {
            let mut p = Vec::new();
            put_u32(&mut p, to_u32(v.len())?);
            for s in v {
                put_u32(&mut p, to_u32(s.len())?);
                p.extend(s.as_bytes());
            }
            section(&mut out, SECTION_VOCAB, &p);
        }

        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        section(&mut out, SECTION_META, meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RkmError::Checkpoint("not an RKMC checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RkmError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let variant = CellVariant::from_tag(r.u8()?).ok_or_else(|| RkmError::Checkpoint("unknown variant tag".into()))?;
        let (m, d, n, dilation) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let (si, sf) = (r.f64()?, r.f64()?);
        let flags = r.u32()?;
        let mut cell = CellConfig::new(variant, m, d, n).with_dilation(dilation).with_gains(si, sf);
        cell.use_layer_norm = flags & FLAG_LAYER_NORM != 0;
        cell.learn_sigma = flags & FLAG_LEARN_SIGMA != 0;
        cell.ngram_gates = flags & FLAG_NGRAM_GATES != 0;
        cell.wavelet_content = flags & FLAG_WAVELET != 0;

        let mut arrays = Vec::new();
        let mut head = Head::None;
        let mut vocab = None;
        let mut meta = BTreeMap::new();
        let mut time_grid = None;
        while !r.done() {
            let tag = r.u8()?;
            let len = usize::try_from(r.u64()?).map_err(|_| RkmError::Checkpoint("section too large".into()))?;
            let mut s = Reader { buf: r.take(len)?, pos: 0 };
            match tag {
                SECTION_PARAMS => arrays.extend(s.arrays()?),
                SECTION_WAVELET => {
                    for (name, t) in s.arrays()? {
                        if name == TIME_GRID {
                            time_grid = Some(t.into_data());
                        } else {
                            arrays.push((name, t));
                        }
                    }
                }
                SECTION_CLASSIFIER => {
                    let classes = s.u32()? as usize;
                    let kind = s.u8()?;
                    let width = s.u32()? as usize;
                    let input = match kind {
                        0 => InputKind::Tokens { vocab: width },
                        1 => InputKind::Signal { channels: width },
                        k => return Err(RkmError::Checkpoint(format!("unknown input kind {k}"))),
                    };
                    head = Head::Classifier { classes, input };
                    arrays.extend(s.arrays()?);
                }
                SECTION_LM => {
                    head = Head::LanguageModel { vocab: s.u32()? as usize };
                    arrays.extend(s.arrays()?);
                }
                SECTION_VOCAB => {
                    let count = s.u32()? as usize;
                    let mut v = Vec::with_capacity(count.min(1 << 20));
                    for _ in 0..count {
                        let len = s.u32()? as usize;
                        let text = std::str::from_utf8(s.take(len)?).map_err(|_| RkmError::Checkpoint("vocabulary is not UTF-8".into()))?;
                        v.push(text.to_string());
                    }
                    vocab = Some(v);
                }
                SECTION_META => {
                    let text = std::str::from_utf8(s.buf).map_err(|_| RkmError::Checkpoint("metadata is not UTF-8".into()))?;
                    for line in text.lines().filter(|l| !l.is_empty()) {
                        let (k, v) = line.split_once('=').ok_or_else(|| RkmError::Checkpoint(format!("bad metadata line `{line}`")))?;
                        meta.insert(k.to_string(), v.to_string());
                    }
                    s.pos = s.buf.len();
                }
                other => {
                    log::warn!("skipping unknown checkpoint section 0x{other:02x}");
                    s.pos = s.buf.len();
                }
            }
            if !s.done() {
                return Err(RkmError::Checkpoint(format!("section 0x{tag:02x} has trailing bytes")));
            }
        }

        if let Some(eps) = meta.get("ln_eps") {
            let eps: f64 = eps.parse().map_err(|_| RkmError::Checkpoint(format!("bad ln_eps `{eps}`")))?;
            if eps != LAYER_NORM_EPS {
                return Err(RkmError::Checkpoint(format!("layer-norm eps {eps} differs from the built-in {LAYER_NORM_EPS}")));
            }
        }
        if let Some(seed) = meta.get("seed") {
            cell.seed = seed.parse().map_err(|_| RkmError::Checkpoint(format!("bad seed `{seed}`")))?;
        }
        if flags & FLAG_FILTER_LENGTHS != 0 {
            let raw = meta.get("filter_lengths").ok_or_else(|| RkmError::Checkpoint("filter_lengths flag set but no lengths stored".into()))?;
            let lengths = raw
                .split(',')
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| RkmError::Checkpoint(format!("bad filter_lengths `{raw}`")))?;
            cell.filter_lengths = Some(lengths);
        }
        cell.validate()?;
        let time_grid = time_grid.unwrap_or_else(|| crate::wavelet::centered_grid(n));
        Ok(Checkpoint {
            cell,
            head,
            arrays,
            time_grid,
            vocab,
            meta,
        })
    }

    /// Rebuild the model and overwrite every array with the stored values.
    pub fn into_model(self) -> Result<Model> {
        let mut model = match self.head {
            Head::None => {
                let (store, params) = crate::cell::init_params(&self.cell)?;
                Model::Cell { store, params }
            }
            Head::Classifier { classes, input } => Model::Classifier(Classifier::new(&self.cell, input, classes)?),
            Head::LanguageModel { vocab } => Model::LanguageModel(LanguageModel::new(&self.cell, vocab)?),
        };
        let (store, params) = match &mut model {
            Model::Cell { store, params } => (store, &*params),
            Model::Classifier(c) => (&mut c.store, &c.cell),
            Model::LanguageModel(l) => (&mut l.store, &l.cell),
        };
        if params.time_grid != self.time_grid {
            return Err(RkmError::Checkpoint("stored time grid differs from the centered grid".into()));
        }
        if self.arrays.len() != store.len() {
            return Err(RkmError::Checkpoint(format!("{} stored arrays for a model with {}", self.arrays.len(), store.len())));
        }
        for (name, t) in self.arrays {
            let p = store.get_mut(&name).map_err(|_| RkmError::Checkpoint(format!("unexpected array `{name}`")))?;
            if p.value.shape() != t.shape() {
                return Err(RkmError::Checkpoint(format!("array `{name}` has shape {:?}, model expects {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        Ok(model)
    }
}

pub fn save_classifier(path: &Path, model: &Classifier, vocab: Option<&[String]>) -> Result<()> {
    Checkpoint::from_classifier(model, vocab).save(path)
}

pub fn save_lm(path: &Path, model: &LanguageModel, vocab: Option<&[String]>) -> Result<()> {
    Checkpoint::from_lm(model, vocab).save(path)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| RkmError::Checkpoint(format!("{v} does not fit in 32 bits")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn section(out: &mut Vec<u8>, tag: u8, payload: &[u8]) {
    out.push(tag);
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(payload);
}

fn array_list(arrays: &[&(String, Tensor)]) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_u32(&mut p, to_u32(arrays.len())?);
    for (name, t) in arrays {
        put_u32(&mut p, to_u32(name.len())?);
        p.extend(name.as_bytes());
        put_u32(&mut p, to_u32(t.shape().len())?);
        for &dim in t.shape() {
            p.extend((dim as u64).to_le_bytes());
        }
        for v in t.data() {
            p.extend(v.to_le_bytes());
        }
    }
    Ok(p)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| RkmError::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn arrays(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| RkmError::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(self.u64()?).map_err(|_| RkmError::Checkpoint("dimension too large".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| RkmError::Checkpoint(format!("array `{name}` is too large")))?;
            let bytes = self.take(numel.checked_mul(8).ok_or_else(|| RkmError::Checkpoint("array too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| RkmError::Checkpoint(format!("array `{name}`: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
