//! Causal n-gram windows and filter-bank contraction.

use crate::error::{Result, RkmError};
use crate::grad::kernels::dot;

/// The stacked input `(x_t, x_{t-s}, ..., x_{t-(n-1)s})`; positions before the
/// start of the sequence are zero vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramWindow {
    columns: Vec<Vec<f64>>,
    dilation: usize,
}

impl NGramWindow {
    pub fn from_columns(columns: Vec<Vec<f64>>, dilation: usize) -> Result<Self> {
        let m = columns.first().map(Vec::len).ok_or(RkmError::EmptySequence("window"))?;
        if columns.iter().any(|c| c.len() != m) {
            return Err(RkmError::shape("window", "columns differ in length"));
        }
        Ok(NGramWindow { columns, dilation })
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn m(&self) -> usize {
        self.columns[0].len()
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Column `k` holds `x_{t - k * dilation}`.
    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Columns concatenated newest first, the layout [`FilterBank`] expects.
    pub fn stacked(&self) -> Vec<f64> {
        self.columns.iter().flatten().copied().collect()
    }

    pub fn scaled_add(&self, a: f64, other: &NGramWindow, b: f64) -> Result<NGramWindow> {
        if self.n() != other.n() || self.m() != other.m() {
            return Err(RkmError::shape("window", "windows differ in shape"));
        }
        let columns = self
            .columns
            .iter()
            .zip(&other.columns)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect())
            .collect();
        Ok(NGramWindow {
            columns,
            dilation: self.dilation,
        })
    }
}

/// Index of the input feeding column `k` of the window at time `t`, if any.
pub fn lagged_index(t: usize, k: usize, dilation: usize) -> Option<usize> {
    t.checked_sub(k * dilation)
}

pub fn window(sequence: &[Vec<f64>], t: usize, n: usize, dilation: usize) -> Result<NGramWindow> {
    if t >= sequence.len() {
        return Err(RkmError::TimeOutOfRange { t, len: sequence.len() });
    }
    if n == 0 || dilation == 0 {
        return Err(RkmError::InvalidConfig(format!(
            "window length {n} and dilation {dilation} must be positive"
        )));
    }
    let m = sequence[0].len();
    let columns = (0..n)
        .map(|k| match lagged_index(t, k, dilation) {
            Some(i) => sequence[i].clone(),
            None => vec![0.0; m],
        })
        .collect();
    NGramWindow::from_columns(columns, dilation)
}

/// `n` blocks `X_0, X_{-1}, ..., X_{-n+1}` of shape `[j x m]`, stored as one
/// `[j x (n*m)]` row-major matrix whose column `k*m + c` multiplies channel `c`
/// of window column `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    j: usize,
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(j: usize, m: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if j * m * n == 0 || data.len() != j * m * n {
            return Err(RkmError::shape(
                "filter_bank",
                format!("j={j}, m={m}, n={n} needs {} values, got {}", j * m * n, data.len()),
            ));
        }
        Ok(FilterBank { j, m, n, data })
    }

    pub fn zeros(j: usize, m: usize, n: usize) -> Self {
        FilterBank {
            j,
            m,
            n,
            data: vec![0.0; j * m * n],
        }
    }

    /// Build from explicit blocks, newest lag first.
    pub fn from_blocks(blocks: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = blocks.len();
        let j = blocks.first().map(Vec::len).ok_or(RkmError::EmptySequence("filter_bank"))?;
        let m = blocks[0].first().map(Vec::len).unwrap_or(0);
        if blocks.iter().any(|b| b.len() != j || b.iter().any(|r| r.len() != m)) {
            return Err(RkmError::shape("filter_bank", "blocks must share shape"));
        }
        let mut bank = FilterBank::zeros(j, m, n);
        for (k, block) in blocks.iter().enumerate() {
            for (i, row) in block.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    *bank.at_mut(i, k, c) = v;
                }
            }
        }
        Ok(bank)
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, filter: usize, lag: usize, channel: usize) -> f64 {
        self.data[filter * self.n * self.m + lag * self.m + channel]
    }

    pub fn at_mut(&mut self, filter: usize, lag: usize, channel: usize) -> &mut f64 {
        &mut self.data[filter * self.n * self.m + lag * self.m + channel]
    }

    /// Block `X_{-lag}` as a `[j x m]` row list.
    pub fn block(&self, lag: usize) -> Vec<Vec<f64>> {
        (0..self.j)
            .map(|i| (0..self.m).map(|c| self.at(i, lag, c)).collect())
            .collect()
    }

    /// Zero the lags `>= lengths[i]` of filter `i`, giving per-filter lengths
    /// within one uniformly shaped bank.
    pub fn mask_lengths(&mut self, lengths: &[usize]) -> Result<()> {
        let mask = length_mask(self.j, self.m, self.n, lengths)?;
        for (v, keep) in self.data.iter_mut().zip(mask) {
            *v *= keep;
        }
        Ok(())
    }

    /// `sum_k X_{-k} x_{t-k}`
    pub fn contract(&self, win: &NGramWindow) -> Result<Vec<f64>> {
        if win.n() != self.n || win.m() != self.m {
            return Err(RkmError::shape(
                "contract",
                format!(
                    "bank expects n={}, m={} but window has n={}, m={}",
                    self.n,
                    self.m,
                    win.n(),
                    win.m()
                ),
            ));
        }
        let stacked = win.stacked();
        Ok(self
            .data
            .chunks_exact(self.n * self.m)
            .map(|row| dot(row, &stacked))
            .collect())
    }
}

/// 0/1 mask over a `[j x (n*m)]` bank keeping the first `lengths[i]` lags of row `i`.
pub fn length_mask(j: usize, m: usize, n: usize, lengths: &[usize]) -> Result<Vec<f64>> {
    if lengths.len() != j {
        return Err(RkmError::shape(
            "mask_lengths",
            format!("{} lengths for {j} filters", lengths.len()),
        ));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > n) {
        return Err(RkmError::InvalidConfig(format!("filter length {bad} outside 1..={n}")));
    }
    let mut mask = vec![0.0; j * n * m];
    for (i, &len) in lengths.iter().enumerate() {
        for v in &mut mask[i * n * m..i * n * m + len * m] {
            *v = 1.0;
        }
    }
    Ok(mask)
}
