use crate::cell::CellVariant;
use crate::error::{Result, RkmError};

#[derive(Clone, Debug, PartialEq)]
pub struct CellConfig {
    pub variant: CellVariant,
    /// input width
    pub m: usize,
    /// hidden and memory width
    pub d: usize,
    /// window length
    pub n: usize,
    pub dilation: usize,
    pub sigma_i_sq: f64,
    pub sigma_f_sq: f64,
    pub use_layer_norm: bool,
    /// Treat the static gains as trainable scalars.
    pub learn_sigma: bool,
    /// Gate filters span the full n-gram window; otherwise gates only see `x_t`.
    pub ngram_gates: bool,
    /// Content filters generated from Morlet-wavelet parameters.
    pub wavelet_content: bool,
    /// Per-filter lengths, realized by masking the trailing lags of each row.
    pub filter_lengths: Option<Vec<usize>>,
    pub seed: u64,
}

impl CellConfig {
    pub fn new(variant: CellVariant, m: usize, d: usize, n: usize) -> Self {
        CellConfig {
            variant,
            m,
            d,
            n,
            dilation: 1,
            sigma_i_sq: 0.5,
            sigma_f_sq: 0.5,
            use_layer_norm: false,
            learn_sigma: false,
            ngram_gates: true,
            wavelet_content: false,
            filter_lengths: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_gains(mut self, sigma_i_sq: f64, sigma_f_sq: f64) -> Self {
        self.sigma_i_sq = sigma_i_sq;
        self.sigma_f_sq = sigma_f_sq;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.use_layer_norm = on;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_wavelet_content(mut self, on: bool) -> Self {
        self.wavelet_content = on;
        self
    }

    /// Forget gain actually applied: memoryless variants always use 0.
    pub fn effective_sigma_f_sq(&self) -> f64 {
        if self.variant.has_feedback() {
            self.sigma_f_sq
        } else {
            0.0
        }
    }

    /// Width of the input seen by the gate filters.
    pub fn gate_window(&self) -> usize {
        if self.ngram_gates {
            self.n
        } else {
            1
        }
    }

    /// How many past inputs a window reaches back.
    pub fn receptive_lag(&self) -> usize {
        (self.n - 1) * self.dilation
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RkmError::InvalidConfig(msg));
        if self.m == 0 || self.d == 0 || self.n == 0 || self.dilation == 0 {
            return bad(format!(
                "m, d, n and dilation must be positive (m={}, d={}, n={}, dilation={})",
                self.m, self.d, self.n, self.dilation
            ));
        }
        for (name, v) in [("sigma_i_sq", self.sigma_i_sq), ("sigma_f_sq", self.sigma_f_sq)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.variant.uses_static_gains() && self.variant.has_feedback() && self.sigma_f_sq >= 1.0 {
            return bad(format!("sigma_f_sq = {} must be < 1 for stability", self.sigma_f_sq));
        }
        if let Some(lengths) = &self.filter_lengths {
            if lengths.len() != self.d || lengths.iter().any(|&l| l == 0 || l > self.n) {
                return bad(format!("filter_lengths needs {} entries in 1..={}", self.d, self.n));
            }
            if self.wavelet_content {
                return bad("filter_lengths cannot be combined with wavelet content filters".into());
            }
        }
        Ok(())
    }
}
