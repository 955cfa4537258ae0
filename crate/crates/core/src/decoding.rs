//! Joint CTC/attention beam search with shallow language-model fusion.
//!
//! A hypothesis carries three log-scores: the attention log-likelihood of its
//! tokens, the CTC prefix score of its tokens (replaced by the CTC
//! probability of exactly those tokens once end-of-sequence is emitted) and
//! the language-model log-likelihood. They are combined as
//! `(1 - lambda) * att + lambda * ctc + beta * lm`.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDecoder, DecoderState, EOS};
use crate::ctc::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

/// `logp_att + beta * logp_lm`.
pub fn fuse(logp_att: f64, logp_lm: f64, beta: f64) -> f64 {
    logp_att + weighted(beta, logp_lm)
}

/// `w * x`, with a zero weight silencing the term even when `x` is `-inf`.
fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

/// Maps characters to token ids `1..=V`; id 0 is reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTokenizer {
    alphabet: Vec<char>,
}

impl CharTokenizer {
    pub fn new(alphabet: impl IntoIterator<Item = char>) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.into_iter().collect();
        let mut seen = alphabet.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != alphabet.len() || alphabet.is_empty() {
            return Err(Error::Config("alphabet must be nonempty without repeats".into()));
        }
        Ok(Self { alphabet })
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.alphabet
                    .iter()
                    .position(|&a| a == ch)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Domain(format!("character {ch:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| t.checked_sub(1).and_then(|i| self.alphabet.get(i)))
            .collect()
    }
}

/// Opaque per-hypothesis language-model state (the token history).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LmState(pub Vec<usize>);

/// Next-symbol distributions over end-of-sequence (index 0) and tokens
/// `1..=V`.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> LmState {
        LmState::default()
    }

    fn log_probs(&self, state: &LmState) -> Vec<f64>;

    fn advance(&self, state: &LmState, token: usize) -> LmState {
        let mut next = state.0.clone();
        next.push(token);
        LmState(next)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UniformLm {
    pub vocab_size: usize,
}

impl LanguageModel for UniformLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, _state: &LmState) -> Vec<f64> {
        vec![-((self.vocab_size + 1) as f64).ln(); self.vocab_size + 1]
    }
}

/// Add-one smoothed bigram model. Row 0 of `counts` is the sentence start,
/// column 0 is end-of-sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLm {
    format: String,
    vocab_size: usize,
    counts: Vec<Vec<u64>>,
}

impl BigramLm {
    pub fn train(corpus: &[Vec<usize>], vocab_size: usize) -> Result<Self> {
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::Domain("language-model corpus is empty".into()));
        }
        let mut counts = vec![vec![0u64; vocab_size + 1]; vocab_size + 1];
        for sentence in corpus {
            let mut prev = 0;
            for &tok in sentence {
                if tok == 0 || tok > vocab_size {
                    return Err(Error::Domain(format!("token {tok} outside 1..={vocab_size}")));
                }
                counts[prev][tok] += 1;
                prev = tok;
            }
            counts[prev][EOS] += 1;
        }
        Ok(Self {
            format: "lsc-bigram".into(),
            vocab_size,
            counts,
        })
    }

    /// One sentence per nonempty line.
    pub fn train_text(text: &str, tokenizer: &CharTokenizer) -> Result<Self> {
        let corpus = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| tokenizer.encode(l.trim()))
            .collect::<Result<Vec<_>>>()?;
        Self::train(&corpus, tokenizer.vocab_size())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)? + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lm: Self = serde_json::from_str(&text)?;
        let n = lm.vocab_size + 1;
        if lm.format != "lsc-bigram" || lm.counts.len() != n || lm.counts.iter().any(|r| r.len() != n) {
            return Err(Error::Checkpoint(format!("{} is not a bigram model", path.display())));
        }
        Ok(lm)
    }
}

impl LanguageModel for BigramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, state: &LmState) -> Vec<f64> {
        let row = &self.counts[state.0.last().copied().unwrap_or(0)];
        let total = (row.iter().sum::<u64>() + row.len() as u64) as f64;
        row.iter().map(|&c| ((c + 1) as f64 / total).ln()).collect()
    }
}

/// Log-likelihood of a sentence including its end-of-sequence symbol.
pub fn sentence_log_prob(lm: &dyn LanguageModel, tokens: &[usize]) -> f64 {
    let mut state = lm.initial_state();
    let mut total = 0.0;
    for &tok in tokens {
        total += lm.log_probs(&state)[tok];
        state = lm.advance(&state, tok);
    }
    total + lm.log_probs(&state)[EOS]
}

/// Per-symbol perplexity over a corpus, counting end-of-sequence symbols.
pub fn perplexity(lm: &dyn LanguageModel, corpus: &[Vec<usize>]) -> f64 {
    let symbols: usize = corpus.iter().map(|s| s.len() + 1).sum();
    let total: f64 = corpus.iter().map(|s| sentence_log_prob(lm, s)).sum();
    (-total / symbols as f64).exp()
}

/// The attention side of the search, abstracted so the search can run with
/// any incremental scorer.
pub trait AttentionScorer {
    type State: Clone;

    /// Number of output symbols including end-of-sequence (`V + 1`).
    fn num_symbols(&self) -> usize;

    fn initial(&self) -> Self::State;

    /// `log p_att` of the next symbol and the state after consuming it
    /// (before the chosen token is recorded with [`Self::advance`]).
    fn step(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;

    fn advance(&self, state: Self::State, token: usize) -> Self::State;
}

/// Attention decoder bound to one utterance's encoder states.
pub struct AttentionContext<'a> {
    decoder: &'a AttentionDecoder,
    store: &'a ParamStore,
    states: Tensor,
    projected: Tensor,
}

impl<'a> AttentionContext<'a> {
    pub fn new(decoder: &'a AttentionDecoder, store: &'a ParamStore, states: Tensor) -> Result<Self> {
        let projected = decoder.project_values(store, &states)?;
        Ok(Self {
            decoder,
            store,
            states,
            projected,
        })
    }
}

impl AttentionScorer for AttentionContext<'_> {
    type State = DecoderState;

    fn num_symbols(&self) -> usize {
        self.decoder.num_symbols
    }

    fn initial(&self) -> DecoderState {
        self.decoder.initial_state(self.states.dims2().0)
    }

    fn step(&self, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        self.decoder
            .step_values(self.store, &self.states, &self.projected, state)
    }

    fn advance(&self, mut state: DecoderState, token: usize) -> DecoderState {
        state.prev_token = token;
        state
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub lambda: f64,
    pub beta: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            lambda: 0.4,
            beta: 0.5,
            max_len: 50,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        crate::attention::check_lambda(self.lambda)?;
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn combine(&self, att: f64, ctc: f64, lm: f64) -> f64 {
        weighted(1.0 - self.lambda, att) + weighted(self.lambda, ctc) + weighted(self.beta, lm)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens, without end-of-sequence.
    pub tokens: Vec<usize>,
    pub att: f64,
    pub ctc: f64,
    pub lm: f64,
    pub score: f64,
    pub finalized: bool,
    pub decoder_state: S,
    pub ctc_state: CtcPrefixState,
    pub lm_state: LmState,
}

#[derive(Clone, Debug)]
pub struct BeamResult<S> {
    /// Best first.
    pub hypotheses: Vec<Hypothesis<S>>,
    /// Set when no hypothesis emitted end-of-sequence within `max_len`.
    pub truncated: bool,
}

impl<S> BeamResult<S> {
    pub fn best(&self) -> &Hypothesis<S> {
        &self.hypotheses[0]
    }
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Beam search over `scorer`, `ctc` and `lm`. Candidates compete for the
/// beam together with their end-of-sequence extensions; those that end are
/// moved to the finished list.
pub fn beam_search<A: AttentionScorer>(
    scorer: &A,
    ctc: &CtcPrefixScorer,
    lm: &dyn LanguageModel,
    cfg: &BeamConfig,
) -> Result<BeamResult<A::State>> {
    cfg.validate()?;
    let symbols = scorer.num_symbols();
    if ctc.posteriors().num_symbols() != symbols || lm.vocab_size() + 1 != symbols {
        return Err(Error::Dimension {
            op: "beam_search",
            left: vec![symbols],
            right: vec![ctc.posteriors().num_symbols(), lm.vocab_size() + 1],
        });
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        att: 0.0,
        ctc: 0.0,
        lm: 0.0,
        score: 0.0,
        finalized: false,
        decoder_state: scorer.initial(),
        ctc_state: ctc.initial_state(),
        lm_state: lm.initial_state(),
    }];
    let mut finished: Vec<Hypothesis<A::State>> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let (att_lp, dec_state) = scorer.step(&hyp.decoder_state)?;
            let ctc_scores = ctc.extension_scores(&hyp.ctc_state)?;
            let lm_lp = lm.log_probs(&hyp.lm_state);
            for token in 0..symbols {
                let ctc_score = if token == EOS {
                    ctc.terminal(&hyp.ctc_state)
                } else {
                    ctc_scores[token - 1]
                };
                let score = cfg.combine(hyp.att + att_lp[token], ctc_score, hyp.lm + lm_lp[token]);
                if score > f64::NEG_INFINITY {
                    candidates.push(Candidate { parent, token, score });
                }
            }
            expanded.push((att_lp, dec_state, lm_lp));
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam_width);
        let mut next = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let hyp = &live[cand.parent];
            let (att_lp, dec_state, lm_lp) = &expanded[cand.parent];
            let att = hyp.att + att_lp[cand.token];
            let lm_score = hyp.lm + lm_lp[cand.token];
            if cand.token == EOS {
                finished.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    att,
                    ctc: ctc.terminal(&hyp.ctc_state),
                    lm: lm_score,
                    score: cand.score,
                    finalized: true,
                    decoder_state: dec_state.clone(),
                    ctc_state: hyp.ctc_state.clone(),
                    lm_state: hyp.lm_state.clone(),
                });
            } else {
                let (ctc_score, ctc_state) = ctc.extend(&hyp.ctc_state, cand.token)?;
                let mut tokens = hyp.tokens.clone();
                tokens.push(cand.token);
                next.push(Hypothesis {
                    tokens,
                    att,
                    ctc: ctc_score,
                    lm: lm_score,
                    score: cand.score,
                    finalized: false,
                    decoder_state: scorer.advance(dec_state.clone(), cand.token),
                    ctc_state,
                    lm_state: lm.advance(&hyp.lm_state, cand.token),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    let truncated = finished.is_empty();
    if truncated && live.is_empty() {
        return Err(Error::Domain("every hypothesis has probability zero".into()));
    }
    let mut hypotheses = if truncated { live } else { finished };
    // Stable sort keeps discovery order among equal scores.
    hypotheses.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(BeamResult { hypotheses, truncated })
}

/// Argmax attention decoding until end-of-sequence or `max_len` tokens.
pub fn greedy_attention<A: AttentionScorer>(scorer: &A, max_len: usize) -> Result<Vec<usize>> {
    let mut state = scorer.initial();
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let (lp, next) = scorer.step(&state)?;
        let best = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("nonempty distribution");
        if best == EOS {
            break;
        }
        tokens.push(best);
        state = scorer.advance(next, best);
    }
    Ok(tokens)
}

/// Scores a complete token sequence from scratch: attention log-likelihood
/// (with end-of-sequence), CTC log-probability and LM log-likelihood.
pub fn rescore<A: AttentionScorer>(
    scorer: &A,
    ctc: &CtcPrefixScorer,
    lm: &dyn LanguageModel,
    tokens: &[usize],
) -> Result<(f64, f64, f64)> {
    let mut state = scorer.initial();
    let mut att = 0.0;
    for &tok in tokens.iter().chain(std::iter::once(&EOS)) {
        let (lp, next) = scorer.step(&state)?;
        att += lp[tok];
        state = scorer.advance(next, tok);
    }
    let ctc_state = ctc.score_prefix(tokens)?;
    Ok((att, ctc.terminal(&ctc_state), sentence_log_prob(lm, tokens)))
}
