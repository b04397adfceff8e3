//! Reference evaluation of the recurrent kernel.
//!
//! The kernel between a filter `x~` and the history `x_{<=t}` is the nested
//! form `q(x~'x_t + q(x~'x_{t-1} + q(...)))`. Unrolling it gives the memory
//! recursion `c_t = c~_t + q(c_{t-1})`, `h'_t = q(c_t)`. Both are evaluated
//! here literally, in plain loops, so the cell implementations can be checked
//! against them.

use crate::error::{Result, RkmError};
use crate::grad::kernels::dot;
use crate::ngram::{window, FilterBank};

/// Scalar map applied elementwise inside the kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointwiseKernel {
    Identity,
    /// `q(u) = s u`; the linear kernel with gain `s`.
    Scaled(f64),
    Tanh,
}

impl PointwiseKernel {
    pub fn q(self, u: f64) -> f64 {
        match self {
            PointwiseKernel::Identity => u,
            PointwiseKernel::Scaled(s) => s * u,
            PointwiseKernel::Tanh => u.tanh(),
        }
    }

    pub fn theta(self) -> Vec<f64> {
        match self {
            PointwiseKernel::Scaled(s) => vec![s],
            _ => Vec::new(),
        }
    }

    fn apply(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&u| self.q(u)).collect()
    }
}

/// A filter bank, a pointwise kernel and the optional extras of the recursion.
#[derive(Clone, Debug)]
pub struct KernelRecursion {
    pub q: PointwiseKernel,
    pub bank: FilterBank,
    pub dilation: usize,
    /// `[j x j]` feedback matrix; `c~_t` gains `H h'_{t-1}`.
    pub feedback: Option<Vec<f64>>,
    /// Constant added at the innermost level in place of the dropped history.
    pub tail: Option<Vec<f64>>,
}

impl KernelRecursion {
    pub fn new(q: PointwiseKernel, bank: FilterBank) -> Self {
        KernelRecursion {
            q,
            bank,
            dilation: 1,
            feedback: None,
            tail: None,
        }
    }

    pub fn with_feedback(mut self, h: Vec<f64>) -> Result<Self> {
        let j = self.bank.j();
        if h.len() != j * j {
            return Err(RkmError::shape("feedback", format!("need {j}x{j}, got {} entries", h.len())));
        }
        self.feedback = Some(h);
        Ok(self)
    }

    pub fn with_tail(mut self, tail: Vec<f64>) -> Result<Self> {
        if tail.len() != self.bank.j() {
            return Err(RkmError::shape("tail", format!("need {} entries, got {}", self.bank.j(), tail.len())));
        }
        self.tail = Some(tail);
        Ok(self)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    fn conv(&self, seq: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
        self.bank.contract(&window(seq, t, self.bank.n(), self.dilation)?)
    }

    fn cell_input(&self, conv: Vec<f64>, h_prev: Option<&[f64]>) -> Vec<f64> {
        match (&self.feedback, h_prev) {
            (Some(h), Some(prev)) => {
                let j = self.bank.j();
                conv.iter().enumerate().map(|(i, c)| c + dot(&h[i * j..(i + 1) * j], prev)).collect()
            }
            _ => conv,
        }
    }

    fn tail_or_zero(&self) -> Vec<f64> {
        self.tail.clone().unwrap_or_else(|| vec![0.0; self.bank.j()])
    }

    /// `h'_t` from `depth` nested applications of `q`, innermost first.
    ///
    /// With feedback, the `h'` entering each `c~_s` is itself the full-depth
    /// nested value at `s - 1`.
    pub fn nested_eval(&self, seq: &[Vec<f64>], t: usize, depth: usize) -> Result<Vec<f64>> {
        if t >= seq.len() {
            return Err(RkmError::TimeOutOfRange { t, len: seq.len() });
        }
        if depth == 0 || depth > t + 1 {
            return Err(RkmError::InvalidConfig(format!("depth {depth} outside 1..={}", t + 1)));
        }
        let mut memo: Vec<Option<Vec<f64>>> = vec![None; t + 1];
        self.nested_memo(seq, t, depth, &mut memo)
    }

    fn nested_memo(&self, seq: &[Vec<f64>], t: usize, depth: usize, memo: &mut Vec<Option<Vec<f64>>>) -> Result<Vec<f64>> {
        if depth == t + 1 {
            if let Some(h) = &memo[t] {
                return Ok(h.clone());
            }
        }
        let mut inputs = Vec::with_capacity(depth);
        for s in (t + 1 - depth..=t).rev() {
            let h_prev = match (&self.feedback, s) {
                (Some(_), s) if s > 0 => Some(self.nested_memo(seq, s - 1, s, memo)?),
                _ => None,
            };
            inputs.push(self.cell_input(self.conv(seq, s)?, h_prev.as_deref()));
        }
        // inputs[0] is time t; fold from the oldest outward
        let mut acc = self.tail_or_zero();
        for c_tilde in inputs.iter().rev() {
            let inner: Vec<f64> = c_tilde.iter().zip(&acc).map(|(c, a)| c + a).collect();
            acc = self.q.apply(&inner);
        }
        if depth == t + 1 {
            memo[t] = Some(acc.clone());
        }
        Ok(acc)
    }

    /// Memory states `c_t` and outputs `h'_t` of the recursion from `c_{-1}`
    /// such that `q(c_{-1})` is the tail (zero by default).
    pub fn recursive_states(&self, seq: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if seq.is_empty() {
            return Err(RkmError::EmptySequence("recursive_eval"));
        }
        let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let h_prev = out.last().map(|(_, h)| h.as_slice());
            let c_tilde = self.cell_input(self.conv(seq, t)?, h_prev);
            let carried = match out.last() {
                Some((c, _)) => self.q.apply(c),
                None => self.tail_or_zero(),
            };
            let c: Vec<f64> = c_tilde.iter().zip(&carried).map(|(a, b)| a + b).collect();
            let h = self.q.apply(&c);
            out.push((c, h));
        }
        Ok(out)
    }

    pub fn recursive_eval(&self, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.recursive_states(seq)?.into_iter().map(|(_, h)| h).collect())
    }
}

/// Largest absolute difference between nested and recursive evaluation over
/// every time step.
pub fn recursion_gap(k: &KernelRecursion, seq: &[Vec<f64>]) -> Result<f64> {
    let rec = k.recursive_eval(seq)?;
    let mut gap = 0.0f64;
    for (t, r) in rec.iter().enumerate() {
        let nested = k.nested_eval(seq, t, t + 1)?;
        for (a, b) in nested.iter().zip(r) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{init_params, CellConfig, CellVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(rng: &mut ChaCha8Rng, j: usize, m: usize, n: usize) -> FilterBank {
        FilterBank::new(j, m, n, (0..j * m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn conv_seq(bank: &FilterBank, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..seq.len()).map(|t| bank.contract(&window(seq, t, bank.n(), 1).unwrap()).unwrap()).collect()
    }

    #[test]
    fn depth_one_is_the_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = random_bank(&mut rng, 3, 2, 2);
        let seq = random_seq(&mut rng, 5, 2);
        let k = KernelRecursion::new(PointwiseKernel::Identity, bank.clone());
        let conv = conv_seq(&bank, &seq);
        for t in 0..5 {
            assert_eq!(k.nested_eval(&seq, t, 1).unwrap(), conv[t]);
        }
    }

    #[test]
    fn identity_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng, 2, 3, 1);
        let seq = random_seq(&mut rng, 6, 3);
        let conv = conv_seq(&bank, &seq);
        let k = KernelRecursion::new(PointwiseKernel::Identity, bank);
        let got = k.nested_eval(&seq, 4, 3).unwrap();
        for i in 0..2 {
            let want = conv[4][i] + conv[3][i] + conv[2][i];
            assert!((got[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn scaled_kernel_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(&mut rng, 3, 2, 2);
        let seq = random_seq(&mut rng, 9, 2);
        let conv = conv_seq(&bank, &seq);
        let k = KernelRecursion::new(PointwiseKernel::Scaled(0.5), bank);
        for t in 0..9 {
            let got = k.nested_eval(&seq, t, t + 1).unwrap();
            for i in 0..3 {
                let want: f64 = (0..=t).map(|s| 0.5f64.powi(s as i32 + 1) * conv[t - s][i]).sum();
                assert!((got[i] - want).abs() < 1e-14, "t={t}");
            }
        }
    }

    #[test]
    fn recursion_matches_nesting() {
        for q in [PointwiseKernel::Identity, PointwiseKernel::Scaled(0.7), PointwiseKernel::Tanh] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bank = random_bank(&mut rng, 4, 3, 3);
                let seq = random_seq(&mut rng, 12, 3);
                let h: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let plain = KernelRecursion::new(q, bank.clone());
                assert!(recursion_gap(&plain, &seq).unwrap() < 1e-10);
                let fb = KernelRecursion::new(q, bank).with_feedback(h).unwrap();
                assert!(recursion_gap(&fb, &seq).unwrap() < 1e-10, "{q:?} seed {seed}");
            }
        }
    }

    #[test]
    fn dilated_recursion_matches_nesting() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = random_bank(&mut rng, 2, 2, 3);
        let seq = random_seq(&mut rng, 10, 2);
        let k = KernelRecursion::new(PointwiseKernel::Tanh, bank).with_dilation(2);
        assert!(recursion_gap(&k, &seq).unwrap() < 1e-10);
    }

    #[test]
    fn zero_sequence_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = random_bank(&mut rng, 3, 2, 2);
        let seq = vec![vec![0.0; 2]; 7];
        for q in [PointwiseKernel::Identity, PointwiseKernel::Scaled(0.5), PointwiseKernel::Tanh] {
            let k = KernelRecursion::new(q, bank.clone());
            assert!(k.recursive_eval(&seq).unwrap().iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scaled_kernel_is_the_linear_kernel_cell() {
        let cfg = CellConfig::new(CellVariant::LinearKernel, 3, 4, 2).with_seed(4);
        let (mut store, p) = init_params(&cfg).unwrap();
        store.param_mut(p.hc.unwrap()).value.data_mut().fill(0.0);
        let bank = FilterBank::new(4, 3, 2, store.param(p.xc.unwrap()).value.data().to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = random_seq(&mut rng, 10, 3);
        let cell = p.run_states(&store, &seq).unwrap();
        let oracle = KernelRecursion::new(PointwiseKernel::Scaled(0.5), bank).recursive_eval(&seq).unwrap();
        for (s, h) in cell.iter().zip(&oracle) {
            assert_eq!(&s.c, h);
            let tanh: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
            assert_eq!(s.h, tanh);
        }
    }

    #[test]
    fn permuting_channels_with_filters_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (j, m, n) = (3, 4, 2);
        let bank = random_bank(&mut rng, j, m, n);
        let seq = random_seq(&mut rng, 8, m);
        let perm = [2, 0, 3, 1];
        let mut pbank = FilterBank::zeros(j, m, n);
        for i in 0..j {
            for lag in 0..n {
                for c in 0..m {
                    *pbank.at_mut(i, lag, perm[c]) = bank.at(i, lag, c);
                }
            }
        }
        let pseq: Vec<Vec<f64>> = seq
            .iter()
            .map(|x| {
                let mut y = vec![0.0; m];
                for c in 0..m {
                    y[perm[c]] = x[c];
                }
                y
            })
            .collect();
        let a = KernelRecursion::new(PointwiseKernel::Tanh, bank).recursive_eval(&seq).unwrap();
        let b = KernelRecursion::new(PointwiseKernel::Tanh, pbank).recursive_eval(&pseq).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn tail_carrying_the_dropped_history_recovers_full_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = random_bank(&mut rng, 2, 2, 2);
        let seq = random_seq(&mut rng, 11, 2);
        let q = PointwiseKernel::Tanh;
        let full = KernelRecursion::new(q, bank.clone());
        let states = full.recursive_states(&seq).unwrap();
        let (t, depth) = (10, 4);
        let tail = q.apply(&states[t - depth].0);
        let truncated = KernelRecursion::new(q, bank).with_tail(tail).unwrap();
        let got = truncated.nested_eval(&seq, t, depth).unwrap();
        for (a, b) in got.iter().zip(&states[t].1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_error_decays_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = random_bank(&mut rng, 2, 2, 1);
        let seq = random_seq(&mut rng, 16, 2);
        let k = KernelRecursion::new(PointwiseKernel::Scaled(0.5), bank.clone());
        let conv = conv_seq(&bank, &seq);
        let t = 15;
        let full = k.nested_eval(&seq, t, t + 1).unwrap();
        for depth in 1..=t {
            let cut = k.nested_eval(&seq, t, depth).unwrap();
            for i in 0..2 {
                // the dropped terms are sum_{s >= depth} 0.5^{s+1} conv_{t-s}
                let dropped: f64 = (depth..=t).map(|s| 0.5f64.powi(s as i32 + 1) * conv[t - s][i]).sum();
                assert!((full[i] - cut[i] - dropped).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bad_depth_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = KernelRecursion::new(PointwiseKernel::Identity, random_bank(&mut rng, 1, 1, 1));
        let seq = vec![vec![1.0]; 3];
        assert!(k.nested_eval(&seq, 1, 3).is_err());
        assert!(k.nested_eval(&seq, 5, 1).is_err());
        assert!(k.recursive_eval(&[]).is_err());
    }
}
