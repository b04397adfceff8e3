//! Sequence classifier and language model built around one cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{BoundCell, CellConfig, CellParams, CellState, StateNodes};
use crate::data::{Example, InputKind, Sequence};
use crate::error::{Result, RkmError};
use crate::grad::{softmax, Graph, ParamGrads, ParamId, ParamStore, Tensor, Value};

/// Seed offset separating head initialization from the cell's stream.
const HEAD_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// How a sequence reaches the cell: token ids through an embedding table or
/// raw real-valued frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputLayer {
    Embedding { table: ParamId, vocab: usize },
    Raw { channels: usize },
}

impl InputLayer {
    fn register(kind: InputKind, m: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        match kind {
            InputKind::Tokens { vocab } => {
                if vocab == 0 {
                    return Err(RkmError::InvalidConfig("empty vocabulary".into()));
                }
                let table = store.add("head.embedding", Tensor::glorot(vocab, m, rng), true)?;
                Ok(InputLayer::Embedding { table, vocab })
            }
            InputKind::Signal { channels } => {
                if channels != m {
                    return Err(RkmError::InvalidConfig(format!("raw input has {channels} channels but the cell expects m={m}")));
                }
                Ok(InputLayer::Raw { channels })
            }
        }
    }

    pub fn kind(&self) -> InputKind {
        match *self {
            InputLayer::Embedding { vocab, .. } => InputKind::Tokens { vocab },
            InputLayer::Raw { channels } => InputKind::Signal { channels },
        }
    }

    fn embed(&self, g: &mut Graph, seq: &Sequence) -> Result<Vec<Value>> {
        match (self, seq) {
            (InputLayer::Embedding { table, vocab }, Sequence::Tokens(ids)) => {
                let t = g.param(*table);
                ids.iter()
                    .map(|&id| {
                        if id >= *vocab {
                            return Err(RkmError::UnknownToken { token: id, vocab: *vocab });
                        }
                        g.gather(t, id)
                    })
                    .collect()
            }
            (InputLayer::Raw { channels }, Sequence::Signal(frames)) => frames
                .iter()
                .map(|f| {
                    if f.len() != *channels {
                        return Err(RkmError::shape("input", format!("frame of width {} for {channels} channels", f.len())));
                    }
                    Ok(g.vector(f.clone()))
                })
                .collect(),
            _ => Err(RkmError::InvalidConfig("sequence kind does not match the model input".into())),
        }
    }
}

/// Mean-pooled cell outputs, `tanh` fully connected layer, then logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore,
    pub cell: CellParams,
    pub input: InputLayer,
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub classes: usize,
}

impl Classifier {
    pub fn new(cell: &CellConfig, input: InputKind, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(RkmError::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut store = ParamStore::new();
        let cell_params = CellParams::register(cell, &mut store, "cell")?;
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed ^ HEAD_SEED);
        let d = cell.d;
        let input = InputLayer::register(input, cell.m, &mut store, &mut rng)?;
        let fc1 = (
            store.add("head.fc1_w", Tensor::glorot(d, d, &mut rng), true)?,
            store.add("head.fc1_b", Tensor::zeros(vec![d]), true)?,
        );
        let fc2 = (
            store.add("head.fc2_w", Tensor::glorot(classes, d, &mut rng), true)?,
            store.add("head.fc2_b", Tensor::zeros(vec![classes]), true)?,
        );
        Ok(Classifier {
            store,
            cell: cell_params,
            input,
            fc1,
            fc2,
            classes,
        })
    }

    fn pooled(&self, g: &mut Graph, bound: &BoundCell, seq: &Sequence) -> Result<Value> {
        if seq.is_empty() {
            return Err(RkmError::EmptySequence("classify"));
        }
        let inputs = self.input.embed(g, seq)?;
        let states = bound.run(g, &inputs, None)?;
        let hs: Vec<Value> = states.iter().map(|s| s.h).collect();
        g.mean_pool(&hs)
    }

    fn head(&self, g: &mut Graph, pooled: Value) -> Result<Value> {
        let (w1, b1) = (g.param(self.fc1.0), g.param(self.fc1.1));
        let hidden = g.affine(w1, pooled, Some(b1))?;
        let hidden = g.tanh(hidden);
        let (w2, b2) = (g.param(self.fc2.0), g.param(self.fc2.1));
        g.affine(w2, hidden, Some(b2))
    }

    /// Logits node for `seq`.
    pub fn forward(&self, g: &mut Graph, seq: &Sequence) -> Result<Value> {
        let bound = self.cell.bind(g)?;
        let pooled = self.pooled(g, &bound, seq)?;
        self.head(g, pooled)
    }

    pub fn logits(&self, seq: &Sequence) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward(&mut g, seq)?;
        Ok(g.data(out).to_vec())
    }

    pub fn classify(&self, seq: &Sequence) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(seq)?))
    }

    pub fn predict(&self, seq: &Sequence) -> Result<usize> {
        Ok(argmax(&self.logits(seq)?))
    }

    /// Cross-entropy of one example.
    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.forward(&mut g, &ex.sequence)?;
        let (loss, _) = g.softmax_xent(logits, ex.label)?;
        Ok(g.scalar(loss))
    }

    /// Cross-entropy of one example, its parameter gradient and whether the
    /// prediction was correct.
    pub fn loss_grad(&self, ex: &Example) -> Result<(f64, ParamGrads, bool)> {
        let mut g = Graph::with_params(&self.store);
        let logits = self.forward(&mut g, &ex.sequence)?;
        let correct = argmax(g.data(logits)) == ex.label;
        let (loss, _) = g.softmax_xent(logits, ex.label)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(RkmError::NonFinite(format!("loss {value}")));
        }
        let grads = g.backward(loss)?.param_grads(&self.store);
        Ok((value, grads, correct))
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Token model with output `softmax(A h'_t + beta)`. The cell output plays the
/// role of the factor scores, so `A` is the only output matrix.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub store: ParamStore,
    pub cell: CellParams,
    pub embedding: ParamId,
    pub out: ParamId,
    pub beta: ParamId,
    pub vocab: usize,
}

/// Summed negative log-likelihood over a chunk and its token count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkLoss {
    pub nll: f64,
    pub tokens: usize,
}

impl LanguageModel {
    pub fn new(cell: &CellConfig, vocab: usize) -> Result<Self> {
        if cell.d > vocab {
            return Err(RkmError::InvalidConfig(format!("factor width d={} exceeds vocabulary {vocab}", cell.d)));
        }
        let mut store = ParamStore::new();
        let cell_params = CellParams::register(cell, &mut store, "cell")?;
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed ^ HEAD_SEED);
        let embedding = store.add("head.embedding", Tensor::glorot(vocab, cell.m, &mut rng), true)?;
        let out = store.add("head.out", Tensor::glorot(vocab, cell.d, &mut rng), true)?;
        let beta = store.add("head.beta", Tensor::zeros(vec![vocab]), true)?;
        Ok(LanguageModel {
            store,
            cell: cell_params,
            embedding,
            out,
            beta,
            vocab,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(&token) => Err(RkmError::UnknownToken { token, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    /// Logit nodes for every position of `inputs`, starting from `init`.
    /// `context` holds the tokens preceding `inputs`; only its last
    /// `(n - 1) * dilation` entries matter, as window fill.
    pub fn forward(&self, g: &mut Graph, context: &[usize], inputs: &[usize], init: &CellState) -> Result<(Vec<Value>, StateNodes)> {
        self.check_tokens(inputs)?;
        let context = &context[context.len().saturating_sub(self.cell.config.receptive_lag())..];
        self.check_tokens(context)?;
        let bound = self.cell.bind(g)?;
        let table = g.param(self.embedding);
        let xs = context.iter().chain(inputs).map(|&t| g.gather(table, t)).collect::<Result<Vec<_>>>()?;
        let start = StateNodes {
            c: g.vector(init.c.clone()),
            h: g.vector(init.h.clone()),
        };
        let states = bound.run_from(g, &xs, context.len(), Some(start))?;
        let (a, beta) = (g.param(self.out), g.param(self.beta));
        let logits = states.iter().map(|s| g.affine(a, s.h, Some(beta))).collect::<Result<Vec<_>>>()?;
        let last = *states.last().ok_or(RkmError::EmptySequence("language model"))?;
        Ok((logits, last))
    }

    fn chunk(&self, g: &mut Graph, context: &[usize], inputs: &[usize], targets: &[usize], init: &CellState) -> Result<(Value, ChunkLoss, CellState)> {
        if inputs.len() != targets.len() {
            return Err(RkmError::shape("language model", format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        self.check_tokens(targets)?;
        let (logits, last) = self.forward(g, context, inputs, init)?;
        let mut losses = Vec::with_capacity(logits.len());
        for (&l, &y) in logits.iter().zip(targets) {
            losses.push(g.softmax_xent(l, y)?.0);
        }
        let mean = g.mean_pool(&losses)?;
        let nll = g.scalar(mean) * losses.len() as f64;
        let state = CellState {
            c: g.data(last.c).to_vec(),
            h: g.data(last.h).to_vec(),
        };
        Ok((mean, ChunkLoss { nll, tokens: losses.len() }, state))
    }

    /// Teacher-forced loss over one chunk, without gradients.
    pub fn chunk_loss(&self, context: &[usize], inputs: &[usize], targets: &[usize], init: &CellState) -> Result<(ChunkLoss, CellState)> {
        let mut g = Graph::with_params(&self.store);
        let (_, loss, state) = self.chunk(&mut g, context, inputs, targets, init)?;
        Ok((loss, state))
    }

    /// Gradient of the mean per-token loss of one chunk; the incoming state is
    /// treated as a constant.
    pub fn chunk_loss_grad(&self, context: &[usize], inputs: &[usize], targets: &[usize], init: &CellState) -> Result<(ChunkLoss, ParamGrads, CellState)> {
        let mut g = Graph::with_params(&self.store);
        let (mean, loss, state) = self.chunk(&mut g, context, inputs, targets, init)?;
        if !loss.nll.is_finite() {
            return Err(RkmError::NonFinite(format!("loss {}", loss.nll)));
        }
        let grads = g.backward(mean)?.param_grads(&self.store);
        Ok((loss, grads, state))
    }

    /// Next-token distribution after reading `history` from a zero state.
    pub fn lm_step(&self, history: &[usize]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(RkmError::EmptySequence("lm_step"));
        }
        let mut g = Graph::with_params(&self.store);
        let (logits, _) = self.forward(&mut g, &[], history, &CellState::zeros(self.cell.config.d))?;
        Ok(softmax(g.data(*logits.last().expect("nonempty"))))
    }

    /// `exp` of the mean next-token negative log-likelihood over `corpus`,
    /// read in chunks of `chunk` positions with the state carried across.
    pub fn perplexity(&self, corpus: &[usize], chunk: usize) -> Result<f64> {
        if corpus.len() < 2 {
            return Err(RkmError::EmptySequence("perplexity"));
        }
        let chunk = chunk.max(1);
        let mut state = CellState::zeros(self.cell.config.d);
        let (mut nll, mut count) = (0.0, 0usize);
        let mut start = 0;
        while start + 1 < corpus.len() {
            let end = (start + chunk).min(corpus.len() - 1);
            let (loss, next) = self.chunk_loss(&corpus[..start], &corpus[start..end], &corpus[start + 1..end + 1], &state)?;
            nll += loss.nll;
            count += loss.tokens;
            state = next;
            start = end;
        }
        Ok((nll / count as f64).exp())
    }
}

/// Perplexity of the add-one smoothed unigram distribution of `train`,
/// measured on the next-token targets of `eval`.
pub fn unigram_perplexity(train: &[usize], eval: &[usize], vocab: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab];
    for &t in train {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval[1..].iter().map(|&t| -(counts[t] / total).ln()).sum();
    (nll / (eval.len() - 1) as f64).exp()
}
