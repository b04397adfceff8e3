use crate::cell::{CellParams, CellVariant, GateIds};
use crate::error::{Result, RkmError};
use crate::grad::{Graph, ParamStore, Value, LAYER_NORM_EPS};
use crate::ngram::{lagged_index, NGramWindow};

/// Memory cell `c_t` and hidden output `h'_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl CellState {
    pub fn zeros(d: usize) -> Self {
        CellState {
            c: vec![0.0; d],
            h: vec![0.0; d],
        }
    }
}

/// A [`CellState`] living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub c: Value,
    pub h: Value,
}

enum Gain {
    Fixed(f64),
    Learned(Value),
}

struct BoundGate {
    x: Value,
    w: Option<Value>,
    b: Value,
}

/// Cell parameters resolved to graph leaves, ready to be stepped.
pub struct BoundCell<'a> {
    cell: &'a CellParams,
    xc: Value,
    hc: Option<Value>,
    bc: Option<Value>,
    out_gate: Option<BoundGate>,
    in_gate: Option<BoundGate>,
    forget_gate: Option<BoundGate>,
    ln: Option<(Value, Value)>,
    sigma_i: Gain,
    sigma_f: Gain,
    zero_input: Value,
}

impl CellParams {
    /// Put this cell's parameters on `g`. Wavelet content filters are
    /// materialized here, once per graph.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> Result<BoundCell<'a>> {
        let cfg = &self.config;
        let mut xc = match (self.xc, self.wavelet) {
            (Some(id), _) => g.param(id),
            (None, Some(w)) => {
                let (a, o, p, b) = (g.param(w.alpha), g.param(w.omega), g.param(w.phi), g.param(w.beta));
                crate::wavelet::warn_negative_beta(g.data(b));
                g.wavelet_bank(a, o, p, b, &self.time_grid)?
            }
            (None, None) => return Err(RkmError::InvalidConfig("cell has no content filters".into())),
        };
        if let Some(mask) = &self.content_mask {
            let m = g.constant(g.shape(xc).to_vec(), mask.clone())?;
            xc = g.hadamard(xc, m)?;
        }
        let bind_gate = |g: &mut Graph, ids: Option<GateIds>| -> Result<Option<BoundGate>> {
            let Some(ids) = ids else { return Ok(None) };
            let mut x = g.param(ids.x);
            if let Some(mask) = &self.gate_mask {
                let m = g.constant(g.shape(x).to_vec(), mask.clone())?;
                x = g.hadamard(x, m)?;
            }
            Ok(Some(BoundGate {
                x,
                w: ids.w.map(|w| g.param(w)),
                b: g.param(ids.b),
            }))
        };
        let out_gate = bind_gate(g, self.out_gate)?;
        let in_gate = bind_gate(g, self.in_gate)?;
        let forget_gate = bind_gate(g, self.forget_gate)?;
        let (sigma_i, sigma_f) = match self.sigma {
            Some((i, f)) => (Gain::Learned(g.param(i)), Gain::Learned(g.param(f))),
            None => (Gain::Fixed(cfg.sigma_i_sq), Gain::Fixed(cfg.effective_sigma_f_sq())),
        };
        Ok(BoundCell {
            cell: self,
            xc,
            hc: self.hc.map(|id| g.param(id)),
            bc: self.bc.map(|id| g.param(id)),
            out_gate,
            in_gate,
            forget_gate,
            ln: self.ln.map(|(a, b)| (g.param(a), g.param(b))),
            sigma_i,
            sigma_f,
            zero_input: g.zeros(cfg.m),
        })
    }

    /// One step from `state` on an explicit window.
    pub fn step(&self, store: &ParamStore, state: &CellState, win: &NGramWindow) -> Result<CellState> {
        let cfg = &self.config;
        if win.n() != cfg.n || win.m() != cfg.m {
            return Err(RkmError::shape(
                "step",
                format!("cell expects n={}, m={} but window has n={}, m={}", cfg.n, cfg.m, win.n(), win.m()),
            ));
        }
        if state.c.len() != cfg.d || state.h.len() != cfg.d {
            return Err(RkmError::shape("step", format!("state width differs from d={}", cfg.d)));
        }
        let mut g = Graph::with_params(store);
        let bound = self.bind(&mut g)?;
        let cols: Vec<Value> = win.columns().iter().map(|c| g.vector(c.clone())).collect();
        let prev = StateNodes {
            c: g.vector(state.c.clone()),
            h: g.vector(state.h.clone()),
        };
        let next = bound.step(&mut g, prev, &cols)?;
        Ok(CellState {
            c: g.data(next.c).to_vec(),
            h: g.data(next.h).to_vec(),
        })
    }

    /// Run from a zero state over `sequence`, returning every state.
    pub fn run_states(&self, store: &ParamStore, sequence: &[Vec<f64>]) -> Result<Vec<CellState>> {
        if sequence.is_empty() {
            return Err(RkmError::EmptySequence("run_sequence"));
        }
        let mut g = Graph::with_params(store);
        let bound = self.bind(&mut g)?;
        let inputs = sequence
            .iter()
            .map(|x| {
                if x.len() != self.config.m {
                    return Err(RkmError::shape("run_sequence", format!("input of width {} for m={}", x.len(), self.config.m)));
                }
                Ok(g.vector(x.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let states = bound.run(&mut g, &inputs, None)?;
        Ok(states
            .iter()
            .map(|s| CellState {
                c: g.data(s.c).to_vec(),
                h: g.data(s.h).to_vec(),
            })
            .collect())
    }

    /// Hidden outputs `h'_t` for every step from a zero state.
    pub fn run_sequence(&self, store: &ParamStore, sequence: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_states(store, sequence)?.into_iter().map(|s| s.h).collect())
    }
}

impl BoundCell<'_> {
    pub fn params(&self) -> &CellParams {
        self.cell
    }

    pub fn zero_state(&self, g: &mut Graph) -> StateNodes {
        let d = self.cell.config.d;
        StateNodes {
            c: g.zeros(d),
            h: g.zeros(d),
        }
    }

    /// Window columns for time `t`, newest first, zero-padded on the past side.
    pub fn window_at(&self, inputs: &[Value], t: usize) -> Vec<Value> {
        let cfg = &self.cell.config;
        (0..cfg.n)
            .map(|k| lagged_index(t, k, cfg.dilation).map_or(self.zero_input, |i| inputs[i]))
            .collect()
    }

    /// Step over every input, starting from `init` or zeros.
    pub fn run(&self, g: &mut Graph, inputs: &[Value], init: Option<StateNodes>) -> Result<Vec<StateNodes>> {
        self.run_from(g, inputs, 0, init)
    }

    /// Step over `inputs[start..]`; earlier inputs only fill the windows.
    pub fn run_from(&self, g: &mut Graph, inputs: &[Value], start: usize, init: Option<StateNodes>) -> Result<Vec<StateNodes>> {
        let mut state = init.unwrap_or_else(|| self.zero_state(g));
        let mut out = Vec::with_capacity(inputs.len().saturating_sub(start));
        for t in start..inputs.len() {
            let cols = self.window_at(inputs, t);
            state = self.step(g, state, &cols).map_err(|e| match e {
                RkmError::NonFinite(what) => RkmError::NonFinite(format!("{what} at step {t}")),
                other => other,
            })?;
            out.push(state);
        }
        Ok(out)
    }

    fn scale(&self, g: &mut Graph, v: Value, gain: &Gain) -> Result<Value> {
        match gain {
            Gain::Fixed(s) => Ok(g.scale(v, *s)),
            Gain::Learned(s) => g.scale_by(v, *s),
        }
    }

    fn gate(&self, g: &mut Graph, gate: &BoundGate, z: Value, h_prev: Value) -> Result<Value> {
        let mut pre = g.affine(gate.x, z, Some(gate.b))?;
        if let Some(w) = gate.w {
            let fb = g.affine(w, h_prev, None)?;
            pre = g.add(pre, fb)?;
        }
        Ok(g.sigmoid(pre))
    }

    /// Advance one step given the window columns `cols` (newest first).
    pub fn step(&self, g: &mut Graph, prev: StateNodes, cols: &[Value]) -> Result<StateNodes> {
        let cfg = &self.cell.config;
        if cols.len() != cfg.n {
            return Err(RkmError::shape("step", format!("{} window columns for n={}", cols.len(), cfg.n)));
        }
        let z = g.concat(cols)?;
        let z_gate = if cfg.ngram_gates { z } else { cols[0] };

        // cell input: contraction of the window, plus feedback for recurrent cells
        let mut pre = g.affine(self.xc, z, None)?;
        if let Some(hc) = self.hc {
            let fb = g.affine(hc, prev.h, None)?;
            pre = g.add(pre, fb)?;
        }
        if let Some(bc) = self.bc {
            pre = g.add(pre, bc)?;
        }
        let c_tilde = if cfg.variant == CellVariant::Lstm { g.tanh(pre) } else { pre };

        let o = match &self.out_gate {
            Some(gt) => Some(self.gate(g, gt, z_gate, prev.h)?),
            None => None,
        };
        let eta = match &self.in_gate {
            Some(gt) => Some(self.gate(g, gt, z_gate, prev.h)?),
            None => None,
        };
        let f = match &self.forget_gate {
            Some(gt) => Some(self.gate(g, gt, z_gate, prev.h)?),
            None => None,
        };
        let need = |v: Option<Value>| v.ok_or_else(|| RkmError::InvalidConfig("missing gate".into()));

        let mut c = match cfg.variant {
            CellVariant::Lstm | CellVariant::RkmLstm => {
                let a = g.hadamard(need(eta)?, c_tilde)?;
                let b = g.hadamard(need(f)?, prev.c)?;
                g.add(a, b)?
            }
            CellVariant::RkmCifg => {
                let f = need(f)?;
                let keep_new = g.one_minus(f);
                let a = g.hadamard(keep_new, c_tilde)?;
                let b = g.hadamard(f, prev.c)?;
                g.add(a, b)?
            }
            CellVariant::LinearKernelOutGate | CellVariant::LinearKernel => {
                let a = self.scale(g, c_tilde, &self.sigma_i)?;
                let b = self.scale(g, prev.c, &self.sigma_f)?;
                g.add(a, b)?
            }
            CellVariant::GatedCnn | CellVariant::Cnn => self.scale(g, c_tilde, &self.sigma_i)?,
        };
        if let Some((gain, bias)) = self.ln {
            c = g.layer_norm(c, gain, bias, LAYER_NORM_EPS)?;
        }

        let h = match cfg.variant {
            CellVariant::Lstm => {
                let tc = g.tanh(c);
                g.hadamard(need(o)?, tc)?
            }
            CellVariant::RkmLstm | CellVariant::RkmCifg | CellVariant::LinearKernelOutGate => g.hadamard(need(o)?, c)?,
            CellVariant::LinearKernel | CellVariant::Cnn => g.tanh(c),
            CellVariant::GatedCnn => g.hadamard(need(eta)?, c)?,
        };
        if !g.data(c).iter().chain(g.data(h)).all(|v| v.is_finite()) {
            return Err(RkmError::NonFinite("cell state".into()));
        }
        Ok(StateNodes { c, h })
    }
}
