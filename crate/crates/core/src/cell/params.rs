use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{CellConfig, CellVariant};
use crate::error::{Result, RkmError};
use crate::grad::{ParamId, ParamStore, Tensor};
use crate::ngram::length_mask;
use crate::wavelet::{centered_grid, WaveletIds, WaveletParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Output,
    Input,
    Forget,
}

impl Gate {
    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Output => "o",
            Gate::Input => "eta",
            Gate::Forget => "f",
        }
    }
}

/// Filters, feedback matrix and bias of one sigmoid gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateIds {
    pub x: ParamId,
    pub w: Option<ParamId>,
    pub b: ParamId,
}

/// Handles into the [`ParamStore`] for every array one cell allocates. Which
/// fields are present is fixed by the variant and config.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub config: CellConfig,
    pub prefix: String,
    pub xc: Option<ParamId>,
    pub wavelet: Option<WaveletIds>,
    pub time_grid: Vec<f64>,
    pub hc: Option<ParamId>,
    pub bc: Option<ParamId>,
    pub out_gate: Option<GateIds>,
    pub in_gate: Option<GateIds>,
    pub forget_gate: Option<GateIds>,
    pub ln: Option<(ParamId, ParamId)>,
    pub sigma: Option<(ParamId, ParamId)>,
    /// 0/1 masks for content and gate banks when per-filter lengths are in use.
    pub content_mask: Option<Vec<f64>>,
    pub gate_mask: Option<Vec<f64>>,
}

/// Fresh store holding one cell under the prefix `cell`.
pub fn init_params(config: &CellConfig) -> Result<(ParamStore, CellParams)> {
    let mut store = ParamStore::new();
    let params = CellParams::register(config, &mut store, "cell")?;
    Ok((store, params))
}

impl CellParams {
    /// Allocate and initialize the cell's arrays in `store`.
    ///
    /// Weights are Glorot-uniform, gate biases are zero except the forget gate
    /// (one), and everything is a pure function of `config.seed`.
    pub fn register(config: &CellConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let CellConfig { variant, m, d, n, .. } = *config;
        let nm = n * m;
        let gate_in = config.gate_window() * m;
        let name = |s: &str| format!("{prefix}.{s}");

        let (xc, wavelet, time_grid) = if config.wavelet_content {
            let wp = WaveletParams::random(d, m, n, &mut rng);
            let ids = WaveletIds::register(store, &name("wav"), &wp)?;
            (None, Some(ids), wp.time_grid)
        } else {
            let id = store.add(name("xc"), Tensor::glorot(d, nm, &mut rng), true)?;
            (Some(id), None, centered_grid(n))
        };
        let hc = if variant.has_feedback() {
            Some(store.add(name("hc"), Tensor::glorot(d, d, &mut rng), true)?)
        } else {
            None
        };
        let bc = if variant == CellVariant::Lstm {
            Some(store.add(name("bc"), Tensor::zeros(vec![d]), true)?)
        } else {
            None
        };

        let mut gate = |g: Gate, present: bool, bias: f64| -> Result<Option<GateIds>> {
            if !present {
                return Ok(None);
            }
            let s = g.suffix();
            let x = store.add(name(&format!("x_{s}")), Tensor::glorot(d, gate_in, &mut rng), true)?;
            let w = if variant.has_feedback() {
                Some(store.add(name(&format!("w_{s}")), Tensor::glorot(d, d, &mut rng), true)?)
            } else {
                None
            };
            let b = store.add(name(&format!("b_{s}")), Tensor::filled(vec![d], bias), true)?;
            Ok(Some(GateIds { x, w, b }))
        };
        let out_gate = gate(Gate::Output, variant.has_output_gate(), 0.0)?;
        let in_gate = gate(Gate::Input, variant.has_input_gate(), 0.0)?;
        let forget_gate = gate(Gate::Forget, variant.has_forget_gate(), 1.0)?;

        let ln = if config.use_layer_norm {
            Some((
                store.add(name("ln_gain"), Tensor::filled(vec![d], 1.0), true)?,
                store.add(name("ln_bias"), Tensor::zeros(vec![d]), true)?,
            ))
        } else {
            None
        };
        let sigma = if config.learn_sigma && variant.uses_static_gains() {
            Some((
                store.add(name("sigma_i_sq"), Tensor::vector(vec![config.sigma_i_sq]), true)?,
                store.add(name("sigma_f_sq"), Tensor::vector(vec![config.effective_sigma_f_sq()]), variant.has_feedback())?,
            ))
        } else {
            None
        };

        let (content_mask, gate_mask) = match &config.filter_lengths {
            Some(lengths) => (
                Some(length_mask(d, m, n, lengths)?),
                if config.ngram_gates {
                    Some(length_mask(d, m, n, lengths)?)
                } else {
                    None
                },
            ),
            None => (None, None),
        };

        Ok(CellParams {
            config: config.clone(),
            prefix: prefix.to_string(),
            xc,
            wavelet,
            time_grid,
            hc,
            bc,
            out_gate,
            in_gate,
            forget_gate,
            ln,
            sigma,
            content_mask,
            gate_mask,
        })
    }

    pub fn gate(&self, g: Gate) -> Option<GateIds> {
        match g {
            Gate::Output => self.out_gate,
            Gate::Input => self.in_gate,
            Gate::Forget => self.forget_gate,
        }
    }

    /// Weight matrices counted by the table accounting (no biases, no
    /// layer-norm, no static gains).
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = Vec::new();
        ids.extend(self.xc);
        if let Some(w) = self.wavelet {
            ids.extend([w.alpha, w.omega, w.phi, w.beta]);
        }
        ids.extend(self.hc);
        for g in [self.out_gate, self.in_gate, self.forget_gate].into_iter().flatten() {
            ids.push(g.x);
            ids.extend(g.w);
        }
        ids
    }

    pub fn weight_scalars(&self, store: &ParamStore) -> usize {
        self.weight_ids().iter().map(|&id| store.param(id).value.numel()).sum()
    }

    /// Every array this cell owns.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.weight_ids();
        ids.extend(self.bc);
        for g in [self.out_gate, self.in_gate, self.forget_gate].into_iter().flatten() {
            ids.push(g.b);
        }
        if let Some((a, b)) = self.ln {
            ids.extend([a, b]);
        }
        if let Some((a, b)) = self.sigma {
            ids.extend([a, b]);
        }
        ids
    }

    pub fn wavelet_params(&self, store: &ParamStore) -> Option<Result<WaveletParams>> {
        self.wavelet.map(|ids| ids.read(store, &self.time_grid))
    }

    /// Re-resolve handles against another store holding the same names, e.g.
    /// after loading a checkpoint.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        for id in self.all_ids() {
            if id.index() >= store.len() {
                return Err(RkmError::UnknownParameter(format!("#{}", id.index())));
            }
        }
        Ok(())
    }
}
