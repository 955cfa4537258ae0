//! Toy tone corpus and the joint CTC/attention training loop.
//!
//! Each token of the toy alphabet is rendered as a sine tone at its own
//! frequency, so a corpus of a few short utterances is enough to show the
//! whole pipeline (Sinc front-end included) learning end to end.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{frame_signal, read_wav, AudioBuffer};
use crate::augment::{apply_audio_masks, plan_for, AugmentPolicy, Mode};
use crate::config::{AudioConfig, RunConfig};
use crate::ctc::greedy_decode;
use crate::decoding::CharTokenizer;
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::nn::{Adam, Graph, LrScales, ParamStore, Sgd, Tensor};
use crate::sinc::{SincConfig, SincFilterBank};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToneCorpusConfig {
    pub alphabet: String,
    /// One tone frequency per alphabet character.
    pub frequencies_hz: Vec<f64>,
    pub num_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub tone_ms: f64,
    pub gap_ms: f64,
    /// Silence before the first and after the last tone.
    pub edge_ms: f64,
    pub amplitude: f64,
    /// Half-width of the uniform additive noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToneCorpusConfig {
    fn default() -> Self {
        Self {
            alphabet: "abcd".into(),
            frequencies_hz: vec![400.0, 900.0, 1800.0, 3500.0],
            num_utterances: 20,
            min_tokens: 2,
            max_tokens: 4,
            tone_ms: 80.0,
            gap_ms: 30.0,
            edge_ms: 30.0,
            amplitude: 0.5,
            noise: 0.01,
            seed: 7,
        }
    }
}

impl ToneCorpusConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let n = self.alphabet.chars().count();
        if n != self.frequencies_hz.len() {
            return Err(Error::Config(format!(
                "corpus: {n} alphabet characters but {} frequencies",
                self.frequencies_hz.len()
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if let Some(f) = self.frequencies_hz.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
            return Err(Error::Config(format!(
                "corpus: tone frequency {f} Hz outside (0, {nyquist})"
            )));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("corpus: need 1 <= min_tokens <= max_tokens".into()));
        }
        if !(self.tone_ms > 0.0 && self.gap_ms >= 0.0 && self.edge_ms >= 0.0) {
            return Err(Error::Config(
                "corpus: durations must be nonnegative and tones nonempty".into(),
            ));
        }
        CharTokenizer::new(self.alphabet.chars()).map(|_| ())
    }

    pub fn tokenizer(&self) -> Result<CharTokenizer> {
        CharTokenizer::new(self.alphabet.chars())
    }

    /// Renders `tokens` (ids `1..=V`) as tones with the configured spacing.
    pub fn render(&self, tokens: &[usize], sample_rate: u32, rng: &mut impl Rng) -> Result<AudioBuffer> {
        let rate = sample_rate as f64;
        let samples = |ms: f64| (ms * rate / 1000.0).round() as usize;
        let (tone, gap, edge) = (samples(self.tone_ms), samples(self.gap_ms), samples(self.edge_ms));
        let ramp = samples(5.0).min(tone / 2).max(1);
        let mut out = vec![0.0; edge];
        for (i, &tok) in tokens.iter().enumerate() {
            let freq = *self
                .frequencies_hz
                .get(tok.wrapping_sub(1))
                .ok_or_else(|| Error::Domain(format!("token {tok} has no tone")))?;
            if i > 0 {
                out.extend(std::iter::repeat_n(0.0, gap));
            }
            for n in 0..tone {
                let env = ((n.min(tone - 1 - n) as f64 + 1.0) / ramp as f64).min(1.0);
                out.push(self.amplitude * env * (2.0 * std::f64::consts::PI * freq * n as f64 / rate).sin());
            }
        }
        out.extend(std::iter::repeat_n(0.0, edge));
        for v in &mut out {
            *v += rng.gen_range(-self.noise..=self.noise);
        }
        AudioBuffer::new(out, sample_rate)
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub tokens: Vec<usize>,
    pub audio: AudioBuffer,
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub tokenizer: CharTokenizer,
    pub utterances: Vec<Utterance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    alphabet: String,
    utterances: Vec<CorpusEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusEntry {
    transcript: String,
    /// Relative to the corpus file. Absent entries are synthesized as tones.
    wav: Option<PathBuf>,
}

impl ToyCorpus {
    /// Random transcripts of `min_tokens..=max_tokens` tokens rendered as tones.
    pub fn synthesize(cfg: &ToneCorpusConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let tokenizer = cfg.tokenizer()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut utterances = Vec::with_capacity(cfg.num_utterances);
        for i in 0..cfg.num_utterances {
            let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=tokenizer.vocab_size())).collect();
            let audio = cfg.render(&tokens, sample_rate, &mut rng)?;
            utterances.push(Utterance {
                id: format!("tone{i:03}"),
                transcript: tokenizer.decode(&tokens),
                tokens,
                audio,
            });
        }
        Ok(Self { tokenizer, utterances })
    }

    /// Reads a TOML corpus listing `alphabet` and `[[utterances]]` entries.
    pub fn load(path: &Path, tones: &ToneCorpusConfig, sample_rate: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CorpusFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let tokenizer = CharTokenizer::new(file.alphabet.chars())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rng = ChaCha8Rng::seed_from_u64(tones.seed);
        let mut utterances = Vec::with_capacity(file.utterances.len());
        for (i, entry) in file.utterances.into_iter().enumerate() {
            if entry.transcript.is_empty() {
                return Err(Error::Domain(format!("utterance {i} has an empty transcript")));
            }
            let tokens = tokenizer.encode(&entry.transcript)?;
            let audio = match entry.wav {
                Some(wav) => read_wav(&base.join(wav))?,
                None => tones.render(&tokens, sample_rate, &mut rng)?,
            };
            utterances.push(Utterance {
                id: format!("utt{i:03}"),
                transcript: entry.transcript,
                tokens,
                audio,
            });
        }
        if utterances.is_empty() {
            return Err(Error::Domain(format!("{} lists no utterances", path.display())));
        }
        Ok(Self { tokenizer, utterances })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with `momentum`.
    Sgd,
    #[default]
    Adam,
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &TrainConfig) -> Self {
        let scales = LrScales(vec![("frontend.sinc.".into(), cfg.sinc_lr_scale)]);
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(cfg.lr, cfg.momentum).with_scales(scales)),
            OptimizerKind::Adam => Self::Adam(Adam::new(cfg.lr).with_scales(scales)),
        }
    }

    fn step(&mut self, store: &mut ParamStore) {
        match self {
            Self::Sgd(o) => o.step(store),
            Self::Adam(o) => o.step(store),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Learning-rate multiplier for the Sinc cutoff parameters.
    pub sinc_lr_scale: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Stop as soon as greedy CTC token accuracy reaches this value.
    pub target_accuracy: f64,
    pub augment: bool,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            sinc_lr_scale: 0.01,
            momentum: 0.9,
            clip_norm: 5.0,
            batch_size: 4,
            lambda: 0.5,
            target_accuracy: 1.0,
            augment: false,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(Error::Config("train.batch_size and train.jobs must be positive".into()));
        }
        if !(self.sinc_lr_scale >= 0.0 && self.sinc_lr_scale.is_finite()) {
            return Err(Error::Config("train.sinc_lr_scale must be nonnegative".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("train.clip_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Relative movement of filter centers away from their initial values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterDrift {
    pub mean_rel: f64,
    pub max_rel: f64,
    /// Filters whose center moved by more than 1 %.
    pub moved: usize,
}

pub fn filter_centers(bank: &SincFilterBank) -> Vec<f64> {
    bank.cutoffs().iter().map(|(f1, f2)| (f1 + f2) / 2.0).collect()
}

pub fn filter_drift(initial: &[f64], current: &[f64]) -> FilterDrift {
    let rel: Vec<f64> = initial.iter().zip(current).map(|(a, b)| (b - a).abs() / a).collect();
    FilterDrift {
        mean_rel: rel.iter().sum::<f64>() / rel.len().max(1) as f64,
        max_rel: rel.iter().copied().fold(0.0, f64::max),
        moved: rel.iter().filter(|&&r| r > 0.01).count(),
    }
}

/// Checks `min_low <= f1 <= f2 <= 0.5` for every filter.
pub fn check_filter_bounds(bank: &SincFilterBank) -> Result<()> {
    for (i, (f1, f2)) in bank.cutoffs().into_iter().enumerate() {
        if !(f1 >= bank.min_low && f2 >= f1 && f2 <= 0.5) {
            return Err(Error::Numeric(format!("filter {i} left its bounds: f1={f1}, f2={f2}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub att_loss: f64,
    pub ctc_loss: f64,
    pub accuracy: f64,
    pub drift: FilterDrift,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best accuracy (earliest on ties).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub final_params: ParamStore,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.accuracy)
    }
}

/// Token accuracy `sum(len - edits) / sum(len)` over the corpus, clamped at 0.
pub fn token_accuracy(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let total: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    let edits: usize = pairs.iter().map(|(r, h)| strsim::generic_levenshtein(r, h)).sum();
    if total == 0 {
        return 0.0;
    }
    (1.0 - edits as f64 / total as f64).max(0.0)
}

fn frames_of(audio: &AudioBuffer, cfg: &AudioConfig) -> Result<Tensor> {
    let fm = frame_signal(audio, cfg.frame_ms, cfg.shift_ms)?;
    if fm.num_frames() == 0 {
        return Err(Error::EmptySequence("utterance shorter than one frame"));
    }
    Ok(fm.frames)
}

/// Greedy CTC accuracy of `store` on `corpus`, without augmentation.
pub fn evaluate(model: &HybridModel, store: &ParamStore, corpus: &ToyCorpus, audio: &AudioConfig) -> Result<f64> {
    let pairs = corpus
        .utterances
        .iter()
        .map(|u| {
            let (_, post) = model.infer(store, &frames_of(&u.audio, audio)?)?;
            Ok((u.tokens.clone(), greedy_decode(&post)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(token_accuracy(&pairs))
}

struct StepResult {
    loss: f64,
    att: f64,
    ctc: f64,
    grads: Vec<(String, Tensor)>,
}

fn utterance_step(
    model: &HybridModel,
    store: &ParamStore,
    utt: &Utterance,
    frames: &Tensor,
    run: &RunConfig,
    epoch: usize,
    index: usize,
) -> Result<StepResult> {
    let policy: &AugmentPolicy = &run.augment;
    let mode = if run.train.augment { Mode::Train } else { Mode::Eval };
    let mut rng = policy.rng_for(epoch, index);
    let masked;
    let frames = if mode == Mode::Train && policy.num_audio_masks > 0 {
        let samples = apply_audio_masks(&utt.audio.samples, policy, &mut rng);
        masked = frames_of(&AudioBuffer::new(samples, utt.audio.sample_rate_hz)?, &run.audio)?;
        &masked
    } else {
        frames
    };
    let plan = plan_for(mode, policy, frames.dims2().0, model.cfg.frontend.output_dim, &mut rng);
    let mut g = Graph::new();
    let parts = model.loss(&mut g, store, frames, &utt.tokens, run.train.lambda, plan.as_ref())?;
    let grads = g.backward(parts.total)?;
    Ok(StepResult {
        loss: g.value(parts.total).item(),
        att: g.value(parts.att).item(),
        ctc: g.value(parts.ctc).item(),
        grads: grads.params().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    })
}

/// Joint training with per-epoch evaluation. `on_epoch` sees every epoch's
/// metrics as soon as they are known.
pub fn train(
    model: &HybridModel,
    corpus: &ToyCorpus,
    run: &RunConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    run.validate()?;
    let tc = &run.train;
    let frames = corpus
        .utterances
        .iter()
        .map(|u| frames_of(&u.audio, &run.audio))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tc.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let sinc_cfg: &SincConfig = &model.cfg.frontend.sinc;
    let mut store = model.init(run.seed)?;
    let initial_centers = filter_centers(&SincFilterBank::from_store(&store, sinc_cfg, model.sample_rate)?);
    let mut optimizer = Optimizer::new(tc);
    let mut order_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut history = Vec::new();
    let mut best = (store.clone(), 0, -1.0);
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss, mut att, mut ctc) = (0.0, 0.0, 0.0);
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<Result<StepResult>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| utterance_step(model, &store, &corpus.utterances[i], &frames[i], run, epoch, i))
                    .collect()
            });
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step} (epoch {epoch})"
                    )));
                }
                loss += r.loss;
                att += r.att;
                ctc += r.ctc;
                for (name, grad) in &r.grads {
                    store.accumulate(name, grad)?;
                }
            }
            store.scale_grads(1.0 / batch.len() as f64);
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step} (epoch {epoch})"
                )));
            }
            if tc.clip_norm > 0.0 && norm > tc.clip_norm {
                store.scale_grads(tc.clip_norm / norm);
            }
            optimizer.step(&mut store);
            check_filter_bounds(&SincFilterBank::from_store(&store, sinc_cfg, model.sample_rate)?)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            step += 1;
        }
        let n = corpus.utterances.len() as f64;
        let centers = filter_centers(&SincFilterBank::from_store(&store, sinc_cfg, model.sample_rate)?);
        let metrics = EpochMetrics {
            epoch,
            loss: loss / n,
            att_loss: att / n,
            ctc_loss: ctc / n,
            accuracy: evaluate(model, &store, corpus, &run.audio)?,
            drift: filter_drift(&initial_centers, &centers),
        };
        on_epoch(&metrics);
        if metrics.accuracy > best.2 {
            best = (store.clone(), epoch, metrics.accuracy);
        }
        let done = metrics.accuracy >= tc.target_accuracy;
        history.push(metrics);
        if done {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_accuracy: best.2,
        final_params: store,
        history,
    })
}
