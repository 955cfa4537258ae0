//! Connectionist Temporal Classification: loss, greedy decoding and prefix
//! scoring for joint beam search.
//!
//! Label 0 is the blank. All dynamic programming runs in log space.

use crate::error::{Error, Result};
use crate::nn::{log_add_exp, log_sum_exp, softmax_slice, Graph, Tensor, Var};

pub const BLANK: usize = 0;
const NEG_INF: f64 = f64::NEG_INFINITY;

/// Per-frame distributions over `V` tokens plus the blank, `[T, V+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPosteriors {
    probs: Tensor,
    log_probs: Vec<f64>,
}

impl TokenPosteriors {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 || probs.shape()[1] < 2 {
            return Err(Error::Domain(format!(
                "posteriors must be [T, V+1] with V >= 1, got {:?}",
                probs.shape()
            )));
        }
        let cols = probs.shape()[1];
        for (t, row) in probs.data().chunks(cols).enumerate() {
            if row.iter().any(|p| p.is_nan() || *p < 0.0) {
                return Err(Error::Domain(format!("posterior row {t} has negative or NaN entries")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("posterior row {t} sums to {total}")));
            }
        }
        let log_probs = probs.data().iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs })
    }

    /// Row-wise softmax of `[T, V+1]` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (_, cols) = logits.dims2();
        let data = logits.data().chunks(cols.max(1)).flat_map(softmax_slice).collect();
        Self::new(Tensor::from_vec(logits.shape(), data))
    }

    pub fn num_frames(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Number of symbols including the blank.
    pub fn num_symbols(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_prob(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.num_symbols() + k]
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        let v = self.num_symbols();
        &self.log_probs[t * v..(t + 1) * v]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&k| k == BLANK || k >= self.num_symbols()) {
            return Err(Error::Domain(format!(
                "token {bad} is outside the vocabulary 1..{}",
                self.num_symbols() - 1
            )));
        }
        Ok(())
    }
}

/// Minimum number of frames able to emit `target`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Loss value and gradient with respect to the pre-softmax logits.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad_logits: Tensor,
}

/// `-log p(target | posteriors)` by forward-backward over the
/// blank-interleaved target.
pub fn ctc_loss(posteriors: &TokenPosteriors, target: &[usize]) -> Result<CtcLoss> {
    if target.is_empty() {
        return Err(Error::Domain("CTC target must be nonempty".into()));
    }
    posteriors.check_tokens(target)?;
    let t_len = posteriors.num_frames();
    let required = min_frames(target);
    if t_len < required {
        return Err(Error::InfeasibleAlignment {
            target_len: target.len(),
            required,
            frames: t_len,
        });
    }
    let v = posteriors.num_symbols();
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && label(s) != BLANK && label(s) != label(s - 2);

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = posteriors.log_prob(0, BLANK);
    alpha[1] = posteriors.log_prob(0, label(1));
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add_exp(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add_exp(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + posteriors.log_prob(t, label(s));
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = log_add_exp(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(Error::Numeric(format!(
            "CTC path probability underflowed (log p = {log_p})"
        )));
    }

    // beta[t][s]: log prob of finishing from state s at frame t, excluding
    // the emission at t.
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    beta[last + s_len - 2] = 0.0;
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + posteriors.log_prob(t + 1, label(s));
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[next + s + 1] + posteriors.log_prob(t + 1, label(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add_exp(acc, beta[next + s + 2] + posteriors.log_prob(t + 1, label(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = posteriors.probs().data().to_vec();
    let mut occupancy = vec![NEG_INF; v];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = NEG_INF);
        for s in 0..s_len {
            let k = label(s);
            occupancy[k] = log_add_exp(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for (k, o) in occupancy.iter().enumerate() {
            grad[t * v + k] -= (o - log_p).exp();
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        grad_logits: Tensor::from_vec(posteriors.probs().shape(), grad),
    })
}

/// CTC loss as a graph node over `[T, V+1]` logits.
pub fn ctc_loss_op(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let posteriors = TokenPosteriors::from_logits(g.value(logits))?;
    let CtcLoss { loss, grad_logits } = ctc_loss(&posteriors, target)?;
    Ok(g.custom(&[logits], Tensor::scalar(loss), move |a| {
        vec![Some(grad_logits.scale(a.grad.item()))]
    }))
}

/// Removes repeats not separated by a blank, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax followed by [`collapse`]. Ties go to the lower index.
pub fn greedy_decode(posteriors: &TokenPosteriors) -> Vec<usize> {
    let v = posteriors.num_symbols();
    let path: Vec<usize> = posteriors
        .probs()
        .data()
        .chunks(v)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (k, &p)| if p > best.1 { (k, p) } else { best },
                )
                .0
        })
        .collect();
    collapse(&path)
}

/// Forward variables of one prefix, per frame: log probability of having
/// emitted exactly the prefix by frame `t`, ending in a non-blank or a blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub non_blank: Vec<f64>,
    pub blank: Vec<f64>,
    pub last: Option<usize>,
    /// Log probability that the collapsed output starts with the prefix.
    pub prefix_score: f64,
}

/// Incremental prefix scorer over fixed posteriors.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer {
    posteriors: TokenPosteriors,
}

impl CtcPrefixScorer {
    pub fn new(posteriors: TokenPosteriors) -> Self {
        Self { posteriors }
    }

    pub fn posteriors(&self) -> &TokenPosteriors {
        &self.posteriors
    }

    /// State of the empty prefix.
    pub fn initial_state(&self) -> CtcPrefixState {
        let t_len = self.posteriors.num_frames();
        let mut blank = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += self.posteriors.log_prob(t, BLANK);
            blank.push(acc);
        }
        CtcPrefixState {
            non_blank: vec![NEG_INF; t_len],
            blank,
            last: None,
            prefix_score: 0.0,
        }
    }

    /// Log probability that the collapsed output begins with the state's
    /// prefix followed by `token`, and the state of the extended prefix.
    pub fn extend(&self, state: &CtcPrefixState, token: usize) -> Result<(f64, CtcPrefixState)> {
        self.posteriors.check_tokens(&[token])?;
        let t_len = self.posteriors.num_frames();
        let mut non_blank = vec![NEG_INF; t_len];
        let mut blank = vec![NEG_INF; t_len];
        if t_len == 0 {
            let next = CtcPrefixState {
                non_blank,
                blank,
                last: Some(token),
                prefix_score: NEG_INF,
            };
            return Ok((NEG_INF, next));
        }
        let emit = |t: usize| self.posteriors.log_prob(t, token);
        if state.last.is_none() {
            non_blank[0] = emit(0);
        }
        let mut psi = non_blank[0];
        for t in 1..t_len {
            let phi = if state.last == Some(token) {
                state.blank[t - 1]
            } else {
                log_add_exp(state.blank[t - 1], state.non_blank[t - 1])
            };
            non_blank[t] = log_add_exp(non_blank[t - 1], phi) + emit(t);
            blank[t] = log_add_exp(blank[t - 1], non_blank[t - 1]) + self.posteriors.log_prob(t, BLANK);
            psi = log_add_exp(psi, phi + emit(t));
        }
        let next = CtcPrefixState {
            non_blank,
            blank,
            last: Some(token),
            prefix_score: psi,
        };
        Ok((psi, next))
    }

    /// Log probability that the collapsed output is exactly the prefix.
    pub fn terminal(&self, state: &CtcPrefixState) -> f64 {
        match (state.non_blank.last(), state.blank.last()) {
            (Some(&n), Some(&b)) => log_add_exp(n, b),
            // No frames: only the empty output is possible.
            _ => {
                if state.last.is_none() {
                    0.0
                } else {
                    NEG_INF
                }
            }
        }
    }

    /// Scores `prefix` from scratch by extending the empty prefix token by token.
    pub fn score_prefix(&self, prefix: &[usize]) -> Result<CtcPrefixState> {
        let mut state = self.initial_state();
        for &k in prefix {
            state = self.extend(&state, k)?.1;
        }
        Ok(state)
    }

    /// Log prefix scores of every single-token extension, index `k-1` for token `k`.
    pub fn extension_scores(&self, state: &CtcPrefixState) -> Result<Vec<f64>> {
        (1..self.posteriors.num_symbols())
            .map(|k| self.extend(state, k).map(|(s, _)| s))
            .collect()
    }
}

/// Checks that `state` belongs to `prefix`, then extends it with `next_token`.
pub fn ctc_prefix_score(
    scorer: &CtcPrefixScorer,
    prefix: &[usize],
    state: &CtcPrefixState,
    next_token: usize,
) -> Result<(f64, CtcPrefixState)> {
    if state.last != prefix.last().copied() {
        return Err(Error::Domain(format!(
            "prefix state ends in {:?} but prefix ends in {:?}",
            state.last,
            prefix.last()
        )));
    }
    scorer.extend(state, next_token)
}

/// Log total probability of a set of scores (helper for completeness checks).
pub fn log_total(scores: &[f64]) -> f64 {
    log_sum_exp(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> TokenPosteriors {
        TokenPosteriors::new(Tensor::full(&[t, v], 1.0 / v as f64)).unwrap()
    }

    #[test]
    fn three_frame_uniform_example() {
        let loss = ctc_loss(&uniform(3, 2), &[1]).unwrap();
        assert!((loss.loss + 0.75f64.ln()).abs() < 1e-14);
        let scorer = CtcPrefixScorer::new(uniform(3, 2));
        let st = scorer.score_prefix(&[1]).unwrap();
        assert!((scorer.terminal(&st) - 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn repeated_label_needs_separator() {
        assert_eq!(min_frames(&[1, 1]), 3);
        assert!(matches!(
            ctc_loss(&uniform(2, 2), &[1, 1]),
            Err(Error::InfeasibleAlignment {
                required: 3,
                frames: 2,
                ..
            })
        ));
        assert!(ctc_loss(&uniform(3, 2), &[1, 1]).is_ok());
    }

    #[test]
    fn invalid_targets() {
        assert!(matches!(ctc_loss(&uniform(3, 2), &[]), Err(Error::Domain(_))));
        assert!(matches!(ctc_loss(&uniform(3, 2), &[2]), Err(Error::Domain(_))));
        assert!(matches!(ctc_loss(&uniform(3, 2), &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn posterior_validation() {
        assert!(TokenPosteriors::new(Tensor::full(&[2, 2], 0.6)).is_err());
        assert!(TokenPosteriors::new(Tensor::from_vec(&[1, 2], vec![1.5, -0.5])).is_err());
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 1]), vec![1]);
    }

    #[test]
    fn greedy_uses_argmax_path() {
        let p = TokenPosteriors::new(Tensor::from_vec(&[4, 2], vec![0.1, 0.9, 0.2, 0.8, 0.7, 0.3, 0.4, 0.6])).unwrap();
        assert_eq!(greedy_decode(&p), vec![1, 1]);
    }

    #[test]
    fn empty_prefix_terminal_is_all_blank_path() {
        let p = TokenPosteriors::new(Tensor::from_vec(&[3, 2], vec![0.9, 0.1, 0.6, 0.4, 0.5, 0.5])).unwrap();
        let scorer = CtcPrefixScorer::new(p);
        let st = scorer.initial_state();
        let expected = 0.9f64.ln() + 0.6f64.ln() + 0.5f64.ln();
        assert!((scorer.terminal(&st) - expected).abs() < 1e-14);
    }

    #[test]
    fn prefix_state_consistency_is_checked() {
        let scorer = CtcPrefixScorer::new(uniform(3, 3));
        let st = scorer.score_prefix(&[1]).unwrap();
        assert!(ctc_prefix_score(&scorer, &[2], &st, 1).is_err());
        assert!(ctc_prefix_score(&scorer, &[1], &st, 2).is_ok());
        assert!(ctc_prefix_score(&scorer, &[1], &st, 3).is_err());
    }
}
