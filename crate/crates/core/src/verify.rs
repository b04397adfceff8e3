//! Self-checks shared by the command line and the test suites: gradient
//! checks against finite differences, reductions between cell variants and
//! the impulse response of the static-gain cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell::{init_params, CellConfig, CellParams, CellState, CellVariant};
use crate::error::{Result, RkmError};
use crate::grad::{finite_diff_grad, max_relative_error, sigmoid, Graph, ParamStore, DEFAULT_EPS};
use crate::kernel::{recursion_gap, KernelRecursion, PointwiseKernel};
use crate::ngram::FilterBank;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_SEQ_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub max_rel_error: f64,
    pub scalars: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// `sum_t r_t . h'_t` for fixed random readouts `r_t`.
fn readout_loss(params: &CellParams, store: &ParamStore, seq: &[Vec<f64>], readout: &[Vec<f64>], grad: bool) -> Result<(f64, Option<crate::grad::ParamGrads>)> {
    let mut g = Graph::with_params(store);
    let bound = params.bind(&mut g)?;
    let xs: Vec<_> = seq.iter().map(|x| g.vector(x.clone())).collect();
    let states = bound.run(&mut g, &xs, None)?;
    let mut terms = Vec::with_capacity(states.len());
    for (s, r) in states.iter().zip(readout) {
        let w = g.constant(vec![1, r.len()], r.clone())?;
        terms.push(g.affine(w, s.h, None)?);
    }
    let mean = g.mean_pool(&terms)?;
    let loss = g.scale(mean, terms.len() as f64);
    let value = g.scalar(loss);
    let grads = if grad { Some(g.backward(loss)?.param_grads(store)) } else { None };
    Ok((value, grads))
}

/// Analytic against central-difference gradients of a readout loss over a
/// random sequence, for every parameter the cell owns.
pub fn cell_grad_check(cfg: &CellConfig, seq_len: usize, seed: u64) -> Result<GradReport> {
    let (store, params) = init_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = random_seq(&mut rng, seq_len, cfg.m);
    let readout = random_seq(&mut rng, seq_len, cfg.d);
    let (_, analytic) = readout_loss(&params, &store, &seq, &readout, true)?;
    let analytic = analytic.expect("requested");
    let numeric = finite_diff_grad(
        |s| readout_loss(&params, s, &seq, &readout, false).map(|r| r.0).unwrap_or(f64::NAN),
        &store,
        DEFAULT_EPS,
    );
    let mut label = format!("{} m={} d={} n={}", cfg.variant, cfg.m, cfg.d, cfg.n);
    if cfg.use_layer_norm {
        label.push_str(" +ln");
    }
    if cfg.learn_sigma {
        label.push_str(" +sigma");
    }
    if cfg.wavelet_content {
        label.push_str(" +wavelet");
    }
    Ok(GradReport {
        label,
        max_rel_error: max_relative_error(&analytic.flatten(), &numeric.flatten()),
        scalars: store.num_scalars(),
    })
}

/// Per variant: the plain cell, then layer norm with learned static gains.
pub fn gradient_suite(m: usize, d: usize, n: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (k, v) in CellVariant::ALL.into_iter().enumerate() {
        let base = CellConfig::new(v, m, d, n).with_seed(seed + k as u64);
        out.push(cell_grad_check(&base, GRAD_SEQ_LEN, seed + 100 + k as u64)?);
        let mut extra = base.clone().with_layer_norm(true);
        extra.learn_sigma = v.uses_static_gains();
        out.push(cell_grad_check(&extra, GRAD_SEQ_LEN, seed + 200 + k as u64)?);
    }
    Ok(out)
}

/// Wavelet-generated content filters inside a cell, three small shapes.
pub fn wavelet_grad_check(seed: u64) -> Result<Vec<GradReport>> {
    [(2, 3, 4), (3, 4, 2), (4, 2, 3)]
        .into_iter()
        .enumerate()
        .map(|(k, (m, d, n))| {
            let cfg = CellConfig::new(CellVariant::RkmLstm, m, d, n).with_wavelet_content(true).with_seed(seed + k as u64);
            cell_grad_check(&cfg, GRAD_SEQ_LEN, seed + 50 + k as u64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_abs_diff: f64,
    /// Whether the identity is required to hold bitwise.
    pub exact: bool,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        if self.exact {
            self.max_abs_diff == 0.0
        } else {
            self.max_abs_diff < self.tolerance
        }
    }
}

fn copy(from: &ParamStore, to: &mut ParamStore, src: &str, dst: &str, scale: f64) -> Result<()> {
    let data: Vec<f64> = from.get(src)?.value.data().iter().map(|v| v * scale).collect();
    to.set(dst, &data)
}

fn zero(store: &mut ParamStore, name: &str) -> Result<()> {
    store.get_mut(name)?.value.data_mut().fill(0.0);
    Ok(())
}

fn max_state_diff(a: &[CellState], b: &[CellState]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.c.iter().chain(&x.h).zip(y.c.iter().chain(&y.h)) {
            let d = if p == q { 0.0 } else { (p - q).abs() };
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    worst
}

struct Case {
    rng: ChaCha8Rng,
    m: usize,
    d: usize,
    n: usize,
    seq: Vec<Vec<f64>>,
}

impl Case {
    fn new(seed: u64, max_n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=max_n));
        let len = rng.gen_range(3..=12);
        let seq = random_seq(&mut rng, len, m);
        Case { rng, m, d, n, seq }
    }

    fn seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Gated CNN against the output-gated linear kernel with unit input gain,
/// no memory and no feedback.
pub fn identity_gated_cnn(seed: u64) -> Result<f64> {
    let mut c = Case::new(seed, 4);
    let gcfg = CellConfig::new(CellVariant::GatedCnn, c.m, c.d, c.n).with_gains(1.0, 0.0).with_seed(c.seed());
    let (gs, gp) = init_params(&gcfg)?;
    let lcfg = CellConfig::new(CellVariant::LinearKernelOutGate, c.m, c.d, c.n).with_gains(1.0, 0.0).with_seed(c.seed());
    let (mut ls, lp) = init_params(&lcfg)?;
    copy(&gs, &mut ls, "cell.xc", "cell.xc", 1.0)?;
    copy(&gs, &mut ls, "cell.x_eta", "cell.x_o", 1.0)?;
    copy(&gs, &mut ls, "cell.b_eta", "cell.b_o", 1.0)?;
    zero(&mut ls, "cell.hc")?;
    zero(&mut ls, "cell.w_o")?;
    Ok(max_state_diff(&gp.run_states(&gs, &c.seq)?, &lp.run_states(&ls, &c.seq)?))
}

/// Reference recurrent additive network with identity output, in plain loops:
/// `c~ = X x_t`, gates `sigmoid(W_x x_t + W_h c_{t-1} + b)`,
/// `c_t = i * c~ + f * c_{t-1}`, `h_t = c_t`.
pub struct Ran {
    pub d: usize,
    pub m: usize,
    pub wc: Vec<f64>,
    pub wix: Vec<f64>,
    pub wih: Vec<f64>,
    pub bi: Vec<f64>,
    pub wfx: Vec<f64>,
    pub wfh: Vec<f64>,
    pub bf: Vec<f64>,
}

impl Ran {
    pub fn run(&self, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (d, m) = (self.d, self.m);
        let mv = |w: &[f64], x: &[f64], cols: usize, i: usize| -> f64 { (0..cols).map(|j| w[i * cols + j] * x[j]).sum() };
        let mut c = vec![0.0; d];
        let mut out = Vec::with_capacity(seq.len());
        for x in seq {
            let next: Vec<f64> = (0..d)
                .map(|i| {
                    let content = mv(&self.wc, x, m, i);
                    let ig = sigmoid(mv(&self.wix, x, m, i) + mv(&self.wih, &c, d, i) + self.bi[i]);
                    let fg = sigmoid(mv(&self.wfx, x, m, i) + mv(&self.wfh, &c, d, i) + self.bf[i]);
                    ig * content + fg * c[i]
                })
                .collect();
            c = next;
            out.push(c.clone());
        }
        out
    }
}

/// RKM-LSTM with the output gate pinned at one and no content feedback
/// against [`Ran`].
pub fn identity_ran(seed: u64) -> Result<f64> {
    let mut c = Case::new(seed, 1);
    let cfg = CellConfig::new(CellVariant::RkmLstm, c.m, c.d, 1).with_seed(c.seed());
    let (mut s, p) = init_params(&cfg)?;
    zero(&mut s, "cell.hc")?;
    zero(&mut s, "cell.x_o")?;
    zero(&mut s, "cell.w_o")?;
    // sigmoid(1000) rounds to exactly 1
    s.get_mut("cell.b_o")?.value.data_mut().fill(1000.0);
    let get = |n: &str| s.get(n).map(|p| p.value.data().to_vec());
    let ran = Ran {
        d: c.d,
        m: c.m,
        wc: get("cell.xc")?,
        wix: get("cell.x_eta")?,
        wih: get("cell.w_eta")?,
        bi: get("cell.b_eta")?,
        wfx: get("cell.x_f")?,
        wfh: get("cell.w_f")?,
        bf: get("cell.b_f")?,
    };
    let cell: Vec<Vec<f64>> = p.run_sequence(&s, &c.seq)?;
    let reference = ran.run(&c.seq);
    let mut worst = 0.0f64;
    for (a, b) in cell.iter().flatten().zip(reference.iter().flatten()) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// CIFG against RKM-LSTM whose input gate is the forget gate negated.
pub fn identity_cifg(seed: u64) -> Result<f64> {
    let mut c = Case::new(seed, 3);
    let ccfg = CellConfig::new(CellVariant::RkmCifg, c.m, c.d, c.n).with_seed(c.seed());
    let (cs, cp) = init_params(&ccfg)?;
    let lcfg = CellConfig::new(CellVariant::RkmLstm, c.m, c.d, c.n).with_seed(c.seed());
    let (mut ls, lp) = init_params(&lcfg)?;
    for name in ["cell.xc", "cell.hc", "cell.x_o", "cell.w_o", "cell.b_o", "cell.x_f", "cell.w_f", "cell.b_f"] {
        copy(&cs, &mut ls, name, name, 1.0)?;
    }
    for g in ["x", "w", "b"] {
        copy(&cs, &mut ls, &format!("cell.{g}_f"), &format!("cell.{g}_eta"), -1.0)?;
    }
    Ok(max_state_diff(&cp.run_states(&cs, &c.seq)?, &lp.run_states(&ls, &c.seq)?))
}

/// Linear kernel without memory or feedback against the CNN cell.
pub fn identity_cnn(seed: u64) -> Result<f64> {
    let mut c = Case::new(seed, 4);
    let gain = c.rng.gen_range(0.1..1.0);
    let ncfg = CellConfig::new(CellVariant::Cnn, c.m, c.d, c.n).with_gains(gain, 0.0).with_seed(c.seed());
    let (ns, np) = init_params(&ncfg)?;
    let lcfg = CellConfig::new(CellVariant::LinearKernel, c.m, c.d, c.n).with_gains(gain, 0.0).with_seed(c.seed());
    let (mut ls, lp) = init_params(&lcfg)?;
    copy(&ns, &mut ls, "cell.xc", "cell.xc", 1.0)?;
    zero(&mut ls, "cell.hc")?;
    Ok(max_state_diff(&np.run_states(&ns, &c.seq)?, &lp.run_states(&ls, &c.seq)?))
}

/// Nested against recursive kernel evaluation for the three test kernels,
/// worst case over them.
pub fn kernel_cross_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for q in [PointwiseKernel::Identity, PointwiseKernel::Scaled(rng.gen_range(0.1..0.9)), PointwiseKernel::Tanh] {
        let (j, m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let len = rng.gen_range(1..=12);
        let bank = FilterBank::new(j, m, n, (0..j * m * n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let seq = random_seq(&mut rng, len, m);
        let mut k = KernelRecursion::new(q, bank);
        if rng.gen_bool(0.5) {
            k = k.with_feedback((0..j * j).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
        }
        worst = worst.max(recursion_gap(&k, &seq)?);
    }
    Ok(worst)
}

pub fn run_identities(seeds: u64) -> Result<Vec<IdentityReport>> {
    type Check = fn(u64) -> Result<f64>;
    let table: [(&'static str, Check, bool, f64); 5] = [
        ("gated-cnn = linear-kernel-ot (unit gain, no memory, no feedback)", identity_gated_cnn, true, 0.0),
        ("rkm-lstm (o = 1, no feedback) = ran", identity_ran, false, 1e-12),
        ("rkm-cifg = rkm-lstm (eta = 1 - f)", identity_cifg, false, 1e-12),
        ("linear-kernel (no memory, no feedback) = cnn", identity_cnn, true, 0.0),
        ("nested kernel = recursive kernel", kernel_cross_check, false, 1e-10),
    ];
    table
        .into_iter()
        .map(|(name, f, exact, tolerance)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(f(s)?);
            }
            Ok(IdentityReport {
                name,
                seeds: seeds as usize,
                max_abs_diff: worst,
                exact,
                tolerance,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImpulseRow {
    pub lag: usize,
    pub measured: f64,
    pub predicted: f64,
}

impl ImpulseRow {
    pub fn ratio(&self) -> f64 {
        self.measured / self.predicted
    }
}

/// Contribution of `c~_0` to `c_N` for `N = 0..=lags`, measured by
/// running an impulse through the cell with feedback removed, against
/// `s_i (s_f)^N`.
pub fn impulse_response(variant: CellVariant, sigma_i_sq: f64, sigma_f_sq: f64, lags: usize, seed: u64) -> Result<Vec<ImpulseRow>> {
    if !variant.uses_static_gains() {
        return Err(RkmError::InvalidConfig(format!("{variant} has no static gains; the impulse decay is input dependent")));
    }
    let (m, d) = (2, 3);
    let cfg = CellConfig::new(variant, m, d, 1).with_gains(sigma_i_sq, sigma_f_sq).with_seed(seed);
    let (mut store, params) = init_params(&cfg)?;
    if variant.has_feedback() {
        zero(&mut store, "cell.hc")?;
    }
    let mut seq = vec![vec![0.0; m]; lags + 1];
    seq[0] = vec![1.0, -0.5];
    let bank = FilterBank::new(d, m, 1, store.get("cell.xc")?.value.data().to_vec())?;
    let c_tilde = bank.contract(&crate::ngram::window(&seq, 0, 1, 1)?)?;
    let (i, _) = c_tilde
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("d > 0");
    let states = params.run_states(&store, &seq)?;
    let sf = cfg.effective_sigma_f_sq();
    Ok(states
        .iter()
        .enumerate()
        .map(|(lag, s)| ImpulseRow {
            lag,
            measured: s.c[i] / c_tilde[i],
            predicted: sigma_i_sq * sf.powi(lag as i32),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_differences() {
        for r in gradient_suite(3, 4, 2, 0).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.label, r.max_rel_error);
        }
        for r in wavelet_grad_check(0).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.label, r.max_rel_error);
        }
    }

    #[test]
    fn identities_hold() {
        for r in run_identities(5).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_abs_diff);
        }
    }

    #[test]
    fn broken_tying_is_detected() {
        // the CIFG identity must fail if the input gate is not tied
        let mut c = Case::new(1, 2);
        let ccfg = CellConfig::new(CellVariant::RkmCifg, c.m, c.d, c.n).with_seed(c.seed());
        let (cs, cp) = init_params(&ccfg).unwrap();
        let lcfg = CellConfig::new(CellVariant::RkmLstm, c.m, c.d, c.n).with_seed(c.seed());
        let (mut ls, lp) = init_params(&lcfg).unwrap();
        for name in ["cell.xc", "cell.hc", "cell.x_o", "cell.w_o", "cell.b_o", "cell.x_f", "cell.w_f", "cell.b_f"] {
            copy(&cs, &mut ls, name, name, 1.0).unwrap();
        }
        let diff = max_state_diff(&cp.run_states(&cs, &c.seq).unwrap(), &lp.run_states(&ls, &c.seq).unwrap());
        assert!(diff > 1e-6);
    }

    #[test]
    fn impulse_decays_at_the_static_gain_rate() {
        let rows = impulse_response(CellVariant::LinearKernel, 0.5, 0.5, 10, 1).unwrap();
        for r in &rows {
            assert!((r.ratio() - 1.0).abs() < 1e-10, "{r:?}");
        }
        assert!(impulse_response(CellVariant::RkmLstm, 0.5, 0.5, 3, 0).is_err());
        let cnn = impulse_response(CellVariant::Cnn, 0.5, 0.5, 3, 0).unwrap();
        assert_eq!(cnn[0].measured, 0.5);
        assert!(cnn[1..].iter().all(|r| r.measured == 0.0 && r.predicted == 0.0));
    }
}
