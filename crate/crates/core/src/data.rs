//! Datasets, file formats and synthetic tasks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RkmError};

/// Shakespeare's Sonnets, plain ASCII.
pub const SONNETS: &str = include_str!("../data/sonnets.txt");

#[derive(Clone, Debug, PartialEq)]
pub enum Sequence {
    Tokens(Vec<usize>),
    /// One vector of channel values per time step.
    Signal(Vec<Vec<f64>>),
}

impl Sequence {
    pub fn len(&self) -> usize {
        match self {
            Sequence::Tokens(t) => t.len(),
            Sequence::Signal(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sequence: Sequence,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Tokens { vocab: usize },
    Signal { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub items: Vec<Example>,
    pub input: InputKind,
    pub classes: usize,
    /// Token spellings, indexed by id.
    pub vocab: Option<Vec<String>>,
}

impl SequenceDataset {
    pub fn new(items: Vec<Example>, input: InputKind, classes: usize) -> Result<Self> {
        let ds = SequenceDataset {
            items,
            input,
            classes,
            vocab: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for ex in &self.items {
            if ex.label >= self.classes {
                return Err(RkmError::LabelOutOfRange {
                    label: ex.label,
                    classes: self.classes,
                });
            }
            if ex.sequence.is_empty() {
                return Err(RkmError::EmptySequence("dataset item"));
            }
            match (&ex.sequence, self.input) {
                (Sequence::Tokens(t), InputKind::Tokens { vocab }) => {
                    if let Some(&token) = t.iter().find(|&&x| x >= vocab) {
                        return Err(RkmError::UnknownToken { token, vocab });
                    }
                }
                (Sequence::Signal(s), InputKind::Signal { channels }) => {
                    if s.iter().any(|x| x.len() != channels) {
                        return Err(RkmError::shape("dataset", format!("signal frame width differs from {channels} channels")));
                    }
                }
                _ => return Err(RkmError::shape("dataset", "item kind does not match the dataset input kind")),
            }
        }
        if let (Some(v), InputKind::Tokens { vocab }) = (&self.vocab, self.input) {
            if v.len() != vocab {
                return Err(RkmError::shape("dataset", format!("{} spellings for vocabulary of {vocab}", v.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Width of one input step after embedding lookup is bypassed.
    pub fn input_width(&self) -> Option<usize> {
        match self.input {
            InputKind::Signal { channels } => Some(channels),
            InputKind::Tokens { .. } => None,
        }
    }

    fn subset(&self, range: std::ops::Range<usize>) -> SequenceDataset {
        SequenceDataset {
            items: self.items[range].to_vec(),
            input: self.input,
            classes: self.classes,
            vocab: self.vocab.clone(),
        }
    }

    /// Contiguous split by index into two parts; `first` is a fraction in [0, 1].
    pub fn split(&self, first: f64) -> (SequenceDataset, SequenceDataset) {
        let k = ((self.len() as f64) * first.clamp(0.0, 1.0)).round() as usize;
        (self.subset(0..k), self.subset(k..self.len()))
    }

    pub fn split_counts(&self, first: usize) -> (SequenceDataset, SequenceDataset) {
        let k = first.min(self.len());
        (self.subset(0..k), self.subset(k..self.len()))
    }

    /// Fraction of items carrying the most common label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for ex in &self.items {
            counts[ex.label] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}

/// Permutation of `0..n` fixed by `seed`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Sidecar path holding one token spelling per line.
pub fn vocab_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Parse rows of `label,tok tok tok`. Lines starting with `#` are comments,
/// except `# classes=N`, which fixes the class count. Token ids come from the
/// `.vocab` sidecar when present, otherwise from first appearance.
pub fn load_token_csv(path: &Path) -> Result<SequenceDataset> {
    let text = fs::read_to_string(path)?;
    let side = vocab_path(path);
    let (mut names, fixed_vocab) = if side.exists() {
        let names: Vec<String> = fs::read_to_string(&side)?.lines().map(str::to_string).collect();
        (names, true)
    } else {
        (Vec::new(), false)
    };
    let mut ids: HashMap<String, usize> = names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let mut declared_classes = None;
    let mut items = Vec::new();
    let parse_err = |line: usize, msg: String| RkmError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("classes=") {
                let n = v.trim().parse().map_err(|_| parse_err(line_no, format!("bad class count `{v}`")))?;
                declared_classes = Some(n);
            }
            continue;
        }
        let (label, body) = line
            .split_once(',')
            .ok_or_else(|| parse_err(line_no, "expected `label,tokens`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("label `{label}` is not a non-negative integer")))?;
        let mut seq = Vec::new();
        for tok in body.split_whitespace() {
            let id = match ids.get(tok) {
                Some(&id) => id,
                None if fixed_vocab => return Err(parse_err(line_no, format!("token `{tok}` missing from {}", side.display()))),
                None => {
                    names.push(tok.to_string());
                    ids.insert(tok.to_string(), names.len() - 1);
                    names.len() - 1
                }
            };
            seq.push(id);
        }
        if seq.is_empty() {
            return Err(parse_err(line_no, "row has no tokens".into()));
        }
        items.push(Example {
            sequence: Sequence::Tokens(seq),
            label,
        });
    }
    if items.is_empty() {
        return Err(RkmError::EmptyDataset);
    }
    let max_label = items.iter().map(|e| e.label).max().unwrap_or(0);
    let classes = declared_classes.unwrap_or(max_label + 1);
    if max_label >= classes {
        return Err(RkmError::LabelOutOfRange { label: max_label, classes });
    }
    let ds = SequenceDataset {
        items,
        input: InputKind::Tokens { vocab: names.len() },
        classes,
        vocab: Some(names),
    };
    ds.validate()?;
    Ok(ds)
}

/// Inverse of [`load_token_csv`]; always writes the sidecar so ids survive.
pub fn write_token_csv(path: &Path, ds: &SequenceDataset) -> Result<()> {
    let InputKind::Tokens { vocab } = ds.input else {
        return Err(RkmError::InvalidConfig("token CSV needs a token dataset".into()));
    };
    let names: Vec<String> = match &ds.vocab {
        Some(v) => v.clone(),
        None => (0..vocab).map(|i| i.to_string()).collect(),
    };
    if let Some(bad) = names.iter().find(|s| s.is_empty() || s.contains(char::is_whitespace) || s.contains('\n')) {
        return Err(RkmError::InvalidConfig(format!("token `{bad}` cannot be written to a whitespace-separated file")));
    }
    let mut side = BufWriter::new(fs::File::create(vocab_path(path))?);
    for n in &names {
        writeln!(side, "{n}")?;
    }
    side.flush()?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# classes={}", ds.classes)?;
    for ex in &ds.items {
        let Sequence::Tokens(t) = &ex.sequence else {
            return Err(RkmError::InvalidConfig("signal item in token dataset".into()));
        };
        let body: Vec<&str> = t.iter().map(|&i| names[i].as_str()).collect();
        writeln!(out, "{},{}", ex.label, body.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Read signal records. Binary files hold, per record, `u32 C, u32 T,
/// u32 label` followed by the `[C x T]` matrix as row-major little-endian
/// f64 (channel-major). Files ending in `.csv` hold a `C,T,label` line
/// followed by `C` lines of `T` values.
pub fn load_signal_matrix(path: &Path) -> Result<SequenceDataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let records = if is_csv { read_signal_csv(path)? } else { read_signal_bin(path)? };
    if records.is_empty() {
        return Err(RkmError::EmptyDataset);
    }
    let channels = records[0].0.len();
    let mut items = Vec::with_capacity(records.len());
    let mut classes = 0;
    for (rows, label) in records {
        if rows.len() != channels {
            return Err(RkmError::Signal {
                path: path.to_path_buf(),
                msg: format!("record has {} channels, expected {channels}", rows.len()),
            });
        }
        classes = classes.max(label as usize + 1);
        let t_len = rows[0].len();
        let frames = (0..t_len).map(|t| rows.iter().map(|r| r[t]).collect()).collect();
        items.push(Example {
            sequence: Sequence::Signal(frames),
            label: label as usize,
        });
    }
    SequenceDataset::new(items, InputKind::Signal { channels }, classes)
}

type SignalRecord = (Vec<Vec<f64>>, u32);

fn read_signal_bin(path: &Path) -> Result<Vec<SignalRecord>> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| RkmError::Signal {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0usize;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            bad(format!("truncated at byte {} (need {n} more, {} left)", *pos, bytes.len() - *pos))
        })?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    while pos < bytes.len() {
        let mut hdr = [0u32; 3];
        for h in &mut hdr {
            *h = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
        }
        let [c, t, label] = hdr;
        if c == 0 || t == 0 {
            return Err(bad(format!("record header C={c}, T={t} must be positive")));
        }
        let n = (c as usize)
            .checked_mul(t as usize)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("record size overflows".into()))?;
        let body = take(&mut pos, n)?;
        let vals: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let rows = vals.chunks_exact(t as usize).map(<[f64]>::to_vec).collect();
        out.push((rows, label));
    }
    Ok(out)
}

fn read_signal_csv(path: &Path) -> Result<Vec<SignalRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, msg: String| RkmError::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let mut out = Vec::new();
    while let Some((ln, header)) = lines.next() {
        let h: Vec<u32> = header
            .split(',')
            .map(|v| v.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(ln, "expected header `C,T,label`".into()))?;
        let [c, t, label] = h[..] else {
            return Err(parse_err(ln, "expected header `C,T,label`".into()));
        };
        let mut rows = Vec::with_capacity(c as usize);
        for _ in 0..c {
            let (ln, row) = lines.next().ok_or_else(|| RkmError::Signal {
                path: path.to_path_buf(),
                msg: format!("record declares {c} channels but the file ends early"),
            })?;
            let vals: Vec<f64> = row
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(ln, "non-numeric value".into()))?;
            if vals.len() != t as usize {
                return Err(parse_err(ln, format!("{} values, header says T={t}", vals.len())));
            }
            rows.push(vals);
        }
        out.push((rows, label));
    }
    Ok(out)
}

/// Write signal items in the binary record format.
pub fn write_signal_matrix(path: &Path, ds: &SequenceDataset) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for ex in &ds.items {
        let Sequence::Signal(frames) = &ex.sequence else {
            return Err(RkmError::InvalidConfig("token item in signal dataset".into()));
        };
        let c = frames[0].len();
        out.write_all(&(c as u32).to_le_bytes())?;
        out.write_all(&(frames.len() as u32).to_le_bytes())?;
        out.write_all(&(ex.label as u32).to_le_bytes())?;
        for ch in 0..c {
            for f in frames {
                out.write_all(&f[ch].to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// `T` symbols uniform over `0..V`, then the query marker `V`; the label is
/// the symbol `L` places before the marker.
pub fn gen_delayed_recall(lag: usize, classes: usize, length: usize, count: usize, seed: u64) -> Result<SequenceDataset> {
    if lag >= length {
        return Err(RkmError::InvalidConfig(format!("lag {lag} must be smaller than length {length}")));
    }
    if lag == 0 || classes == 0 {
        return Err(RkmError::InvalidConfig("lag and class count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|_| {
            let mut s: Vec<usize> = (0..length).map(|_| rng.gen_range(0..classes)).collect();
            let label = s[length - lag];
            s.push(classes);
            Example {
                sequence: Sequence::Tokens(s),
                label,
            }
        })
        .collect();
    SequenceDataset::new(items, InputKind::Tokens { vocab: classes + 1 }, classes)
}

pub fn parity(bits: &[usize]) -> usize {
    bits.iter().fold(0, |a, &b| a ^ (b & 1))
}

pub fn gen_parity(length: usize, count: usize, seed: u64) -> Result<SequenceDataset> {
    if length == 0 {
        return Err(RkmError::InvalidConfig("parity length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|_| {
            let s: Vec<usize> = (0..length).map(|_| rng.gen_range(0..2)).collect();
            Example {
                label: parity(&s),
                sequence: Sequence::Tokens(s),
            }
        })
        .collect();
    SequenceDataset::new(items, InputKind::Tokens { vocab: 2 }, 2)
}

pub const KEYWORD: [usize; 3] = [1, 2, 3];
pub const KEYWORD_VOCAB: usize = 6;
pub const KEYWORD_LENGTH: usize = 20;

pub fn contains_keyword(tokens: &[usize]) -> bool {
    tokens.windows(KEYWORD.len()).any(|w| w == KEYWORD)
}

/// Balanced keyword-spotting task: label 1 iff the trigram [`KEYWORD`] occurs.
pub fn gen_keyword(count: usize, seed: u64) -> Result<SequenceDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let positive = i % 2 == 1;
        let mut s: Vec<usize> = (0..KEYWORD_LENGTH).map(|_| rng.gen_range(0..KEYWORD_VOCAB)).collect();
        if positive {
            let at = rng.gen_range(0..=KEYWORD_LENGTH - KEYWORD.len());
            s[at..at + KEYWORD.len()].copy_from_slice(&KEYWORD);
        } else {
            while contains_keyword(&s) {
                let at = rng.gen_range(0..KEYWORD_LENGTH);
                s[at] = rng.gen_range(0..KEYWORD_VOCAB);
            }
        }
        items.push(Example {
            label: contains_keyword(&s) as usize,
            sequence: Sequence::Tokens(s),
        });
    }
    items.shuffle(&mut rng);
    SequenceDataset::new(items, InputKind::Tokens { vocab: KEYWORD_VOCAB }, 2)
}

/// Character-level corpus with a sorted alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    pub alphabet: Vec<char>,
    pub ids: Vec<usize>,
}

impl CharCorpus {
    pub fn from_text(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(RkmError::EmptyDataset);
        }
        let mut alphabet: Vec<char> = text.chars().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let index: HashMap<char, usize> = alphabet.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let ids = text.chars().map(|c| index[&c]).collect();
        Ok(CharCorpus { alphabet, ids })
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    /// Train on the leading part, validate on the trailing `val_fraction`.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let cut = ((self.ids.len() as f64) * (1.0 - val_fraction.clamp(0.0, 1.0))).round() as usize;
        (self.ids[..cut].to_vec(), self.ids[cut..].to_vec())
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.alphabet[i]).collect()
    }
}
