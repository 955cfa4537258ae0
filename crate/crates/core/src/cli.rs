//! Command-line surface. Each subcommand is a plain function over parsed
//! arguments so it can be driven from tests as well as from `main`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::EOS;
use crate::audio::{frame_signal, read_wav, write_wav};
use crate::augment::AugmentPolicy;
use crate::config::RunConfig;
use crate::ctc::CtcPrefixScorer;
use crate::decoding::{
    beam_search, AttentionContext, AttentionScorer, BigramLm, CharTokenizer, LanguageModel, UniformLm,
};
use crate::diagnostics::gradient_suite;
use crate::error::{Error, Result};
use crate::export::{
    bounds_svg, features_binary, features_csv, filters_csv, kernels_svg, matrix_csv, sha256_hex, write_text,
    FeatureHeader,
};
use crate::frontend::{FeatureSequence, FrontEnd};
use crate::model::HybridModel;
use crate::nn::{Checkpoint, ParamStore, Tensor};
use crate::sinc::{inspect_filters, Activation, SincFilterBank};
use crate::train::{filter_centers, train, ToyCorpus, TrainOutcome};

/// Gradient checks fail above this relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "lsc",
    version,
    about = "Learnable Sinc-convolution front-end and CTC/attention toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write front-end features of one WAV file.
    Extract(ExtractArgs),
    /// Train on the synthesized tone corpus (or a corpus file).
    TrainToy(TrainArgs),
    /// Beam-search decode one WAV file with a trained checkpoint.
    Decode(DecodeArgs),
    /// Print the parameter accounting table.
    Params(ParamsArgs),
    /// Export the filter table and plots of a checkpoint.
    Filters(FiltersArgs),
    /// Write features of one WAV before and after augmentation.
    AugmentPreview(PreviewArgs),
    /// Run the finite-difference gradient suite.
    CheckGradients(GradArgs),
    /// Write the synthesized tone corpus as WAV files plus a corpus file.
    Synth(SynthArgs),
    /// Train a bigram character language model from a text file.
    TrainLm(LmArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the compact binary format instead of CSV.
    #[arg(long)]
    pub binary: bool,
    /// Seed for a fresh front-end when no checkpoint is given.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Logc,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Logc => Activation::Logc,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file; the tone corpus from the config is synthesized otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Enable the augmentation policy of the config.
    #[arg(long)]
    pub augment: bool,
    /// Front-end nonlinearity for every layer.
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// `uniform` or the path of a bigram model from `train-lm`.
    #[arg(long, default_value = "uniform")]
    pub lm: String,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Number of hypotheses to print.
    #[arg(long, default_value_t = 1)]
    pub nbest: usize,
    /// Write CTC posteriors `[T, V+1]` as CSV.
    #[arg(long)]
    pub posteriors: Option<PathBuf>,
    /// Write the attention weights of the best hypothesis as CSV.
    #[arg(long)]
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary size used for the back-end rows.
    #[arg(long)]
    pub vocab: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FiltersArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Filters shown in the kernel plot; evenly spaced when omitted.
    #[arg(long, value_delimiter = ',')]
    pub select: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the policy seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LmArgs {
    /// One sentence per line.
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub alphabet: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Extract(a) => cmd_extract(&a, out),
        Command::TrainToy(a) => cmd_train_toy(&a, out).map(|_| ()),
        Command::Decode(a) => cmd_decode(&a, out),
        Command::Params(a) => cmd_params(&a, out),
        Command::Filters(a) => cmd_filters(&a, out),
        Command::AugmentPreview(a) => cmd_augment_preview(&a, out),
        Command::CheckGradients(a) => cmd_check_gradients(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::TrainLm(a) => cmd_train_lm(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// A checkpoint with its configuration, parameters and file digest.
pub struct Loaded {
    pub run: RunConfig,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
    pub sha256: String,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Checkpoint(format!("{} is not UTF-8", path.display())))?;
        let checkpoint = Checkpoint::from_json(&text)?;
        let run: RunConfig = serde_json::from_value(checkpoint.config.clone())
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        run.validate()?;
        Ok(Self {
            run,
            store: checkpoint.to_store()?,
            checkpoint,
            sha256: sha256_hex(&bytes),
        })
    }

    pub fn tokenizer(&self) -> Result<CharTokenizer> {
        let alphabet = self
            .checkpoint
            .metadata
            .get("alphabet")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("metadata has no `alphabet`".into()))?;
        CharTokenizer::new(alphabet.chars())
    }
}

/// Checkpoint of `store` trained (or initialized) under `run`.
pub fn make_checkpoint(store: &ParamStore, run: &RunConfig, alphabet: &[char]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(store, serde_json::to_value(run)?, run.seed)?;
    ck.metadata
        .insert("alphabet".into(), serde_json::Value::String(alphabet.iter().collect()));
    Ok(ck)
}

/// Front-end parameters either from `checkpoint` or freshly initialized,
/// with the digest written into feature headers.
fn frontend_params(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
) -> Result<(RunConfig, ParamStore, String)> {
    if let Some(path) = checkpoint {
        let loaded = Loaded::read(path)?;
        return Ok((loaded.run, loaded.store, loaded.sha256));
    }
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    let fe = FrontEnd::new(run.model.frontend.clone(), run.audio.sample_rate);
    let mut store = ParamStore::new();
    fe.init(&mut store, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let digest = sha256_hex(
        Checkpoint::from_store(&store, serde_json::to_value(&run)?, run.seed)?
            .to_json()?
            .as_bytes(),
    );
    Ok((run, store, digest))
}

fn extract_features(run: &RunConfig, store: &ParamStore, wav: &Path) -> Result<FeatureSequence> {
    let audio = read_wav(wav)?;
    if audio.sample_rate_hz != run.audio.sample_rate {
        return Err(Error::Domain(format!(
            "{} is sampled at {} Hz, the configuration expects {} Hz",
            wav.display(),
            audio.sample_rate_hz,
            run.audio.sample_rate
        )));
    }
    let frames = frame_signal(&audio, run.audio.frame_ms, run.audio.shift_ms)?;
    FrontEnd::new(run.model.frontend.clone(), run.audio.sample_rate).extract(store, &frames)
}

pub fn cmd_extract(a: &ExtractArgs, out: &mut dyn Write) -> Result<()> {
    let (run, store, digest) = frontend_params(a.config.as_deref(), a.checkpoint.as_deref(), a.seed)?;
    let features = extract_features(&run, &store, &a.wav)?;
    let header = FeatureHeader {
        frame_ms: run.audio.frame_ms,
        shift_ms: run.audio.shift_ms,
        checkpoint_sha256: digest,
    };
    if a.binary {
        let bytes = features_binary(&features, &header)?;
        std::fs::write(&a.out, bytes).map_err(|e| Error::io(&a.out, e))?;
    } else {
        write_text(&a.out, &features_csv(&features, &header))?;
    }
    emit(
        out,
        &format!(
            "{} frames x {} channels -> {}\n",
            features.num_frames(),
            features.dim(),
            a.out.display()
        ),
    )
}

/// Runs training and writes `metrics.jsonl`, `checkpoint.json` (best
/// accuracy) and the filter exports into `out_dir`.
pub fn cmd_train_toy(a: &TrainArgs, out: &mut dyn Write) -> Result<TrainOutcome> {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(j) = a.jobs {
        run.train.jobs = j;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if a.augment {
        run.train.augment = true;
    }
    if let Some(act) = a.activation {
        run.model.frontend = run.model.frontend.clone().with_activation(act.into());
    }
    run.validate()?;
    let corpus = match &a.corpus {
        Some(p) => ToyCorpus::load(p, &run.corpus, run.audio.sample_rate)?,
        None => ToyCorpus::synthesize(&run.corpus, run.audio.sample_rate)?,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let metrics_path = a.out_dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let model = HybridModel::new(run.model.clone(), run.audio.sample_rate, corpus.tokenizer.vocab_size());
    let mut write_err = None;
    let outcome = train(&model, &corpus, &run, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        log::info!(
            "epoch {} loss {:.4} acc {:.3} drift max {:.4}",
            m.epoch,
            m.loss,
            m.accuracy,
            m.drift.max_rel
        );
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let mut ck = make_checkpoint(&outcome.best, &run, corpus.tokenizer.alphabet())?;
    ck.metadata.insert("epoch".into(), outcome.best_epoch.into());
    ck.metadata.insert("accuracy".into(), outcome.best_accuracy.into());
    let ck_path = a.out_dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    export_filters(&run, &outcome.best, &a.out_dir, &[])?;
    emit(
        out,
        &format!(
            "best accuracy {:.4} at epoch {} of {}\ncheckpoint {}\n",
            outcome.best_accuracy,
            outcome.best_epoch,
            outcome.history.len(),
            ck_path.display()
        ),
    )?;
    Ok(outcome)
}

fn export_filters(run: &RunConfig, store: &ParamStore, dir: &Path, select: &[usize]) -> Result<()> {
    let sr = run.audio.sample_rate;
    let sinc = &run.model.frontend.sinc;
    let bank = SincFilterBank::from_store(store, sinc, sr)?;
    let initial = SincFilterBank::mel(sinc, sr)?;
    let selected: Vec<usize> = if select.is_empty() {
        let n = bank.len();
        let k = n.min(8);
        (0..k).map(|i| i * (n - 1) / (k - 1).max(1)).collect()
    } else {
        select.to_vec()
    };
    let rate = f64::from(sr);
    let init_centers: Vec<f64> = filter_centers(&initial).iter().map(|c| c * rate).collect();
    write_text(
        &dir.join("filters.csv"),
        &filters_csv(&inspect_filters(&bank, sr)?, &init_centers),
    )?;
    write_text(&dir.join("kernels.svg"), &kernels_svg(&bank, &initial, &selected, sr)?)?;
    write_text(&dir.join("bounds.svg"), &bounds_svg(&bank, sr))
}

pub fn cmd_filters(a: &FiltersArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = Loaded::read(&a.checkpoint)?;
    export_filters(&loaded.run, &loaded.store, &a.out_dir, &a.select)?;
    emit(
        out,
        &format!(
            "wrote filters.csv, kernels.svg, bounds.svg to {}\n",
            a.out_dir.display()
        ),
    )
}

pub fn cmd_decode(a: &DecodeArgs, out: &mut dyn Write) -> Result<()> {
    let loaded = Loaded::read(&a.checkpoint)?;
    let tokenizer = loaded.tokenizer()?;
    let run = &loaded.run;
    let mut beam = run.decode.clone();
    if let Some(b) = a.beam {
        beam.beam_width = b;
    }
    if let Some(l) = a.lambda {
        beam.lambda = l;
    }
    if let Some(b) = a.beta {
        beam.beta = b;
    }
    if let Some(m) = a.max_len {
        beam.max_len = m;
    }
    beam.validate().map_err(|e| match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    })?;
    let lm: Box<dyn LanguageModel> = if a.lm == "uniform" {
        Box::new(UniformLm {
            vocab_size: tokenizer.vocab_size(),
        })
    } else {
        Box::new(BigramLm::load(Path::new(&a.lm))?)
    };
    let model = HybridModel::new(run.model.clone(), run.audio.sample_rate, tokenizer.vocab_size());
    let audio = read_wav(&a.wav)?;
    let frames = frame_signal(&audio, run.audio.frame_ms, run.audio.shift_ms)?;
    if frames.num_frames() == 0 {
        return Err(Error::EmptySequence("utterance shorter than one frame"));
    }
    let (states, posteriors) = model.infer(&loaded.store, &frames.frames)?;
    if let Some(p) = &a.posteriors {
        let header: Vec<String> = std::iter::once("blank".to_string())
            .chain(tokenizer.alphabet().iter().map(char::to_string))
            .collect();
        write_text(p, &matrix_csv(&header, posteriors.probs()))?;
    }
    let decoder = model.decoder();
    let ctx = AttentionContext::new(&decoder, &loaded.store, states.clone())?;
    let ctc = CtcPrefixScorer::new(posteriors);
    let result = beam_search(&ctx, &ctc, lm.as_ref(), &beam)?;
    if result.truncated {
        log::warn!("no hypothesis ended within {} tokens", beam.max_len);
    }
    let mut text = String::from("rank\ttext\tscore\tatt\tctc\tlm\tfinal\n");
    for (i, h) in result.hypotheses.iter().take(a.nbest).enumerate() {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            tokenizer.decode(&h.tokens),
            h.score,
            h.att,
            h.ctc,
            h.lm,
            h.finalized
        );
    }
    if let Some(p) = &a.attention {
        let mut state = ctx.initial();
        let mut rows = Vec::new();
        for &tok in result.best().tokens.iter().chain(std::iter::once(&EOS)) {
            let (_, next) = ctx.step(&state)?;
            rows.extend_from_slice(next.attention.data());
            state = ctx.advance(next, tok);
        }
        let frames = states.dims2().0;
        let header: Vec<String> = (0..frames).map(|t| format!("t{t}")).collect();
        write_text(
            p,
            &matrix_csv(&header, &Tensor::from_vec(&[rows.len() / frames, frames], rows)),
        )?;
    }
    emit(out, &text)
}

pub fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let vocab = match a.vocab {
        Some(v) => v,
        None => run.corpus.tokenizer()?.vocab_size(),
    };
    let model = HybridModel::new(run.model.clone(), run.audio.sample_rate, vocab);
    let fe = model.frontend();
    let mut text = String::from("layer\tshape\tcount\tformula\tfull_conv\tpointwise\n");
    let dash = |v: Option<usize>| v.map_or("-".to_string(), |n| n.to_string());
    let mut full_total = run.model.frontend.sinc.num_params();
    for row in fe.param_table() {
        full_total += row.full_count.unwrap_or(0);
        let shape: Vec<String> = row.shape.iter().map(usize::to_string).collect();
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}",
            row.name,
            shape.join("x"),
            row.count,
            row.formula,
            dash(row.full_count),
            dash(row.pointwise_count)
        );
    }
    let s = model.param_summary();
    let _ = writeln!(text, "\nfront-end total\t{}", s.frontend);
    let _ = writeln!(
        text,
        "pointwise-omission saving\t{}",
        run.model.frontend.pointwise_saving()
    );
    let _ = writeln!(text, "full-convolution front-end\t{full_total}");
    let _ = writeln!(text, "encoder\t{}", s.encoder);
    let _ = writeln!(text, "ctc head\t{}", s.ctc);
    let _ = writeln!(text, "attention decoder\t{}", s.decoder);
    let _ = writeln!(text, "back-end total\t{}", s.backend());
    let _ = writeln!(text, "total\t{}", s.total());
    emit(out, &text)
}

pub fn cmd_augment_preview(a: &PreviewArgs, out: &mut dyn Write) -> Result<()> {
    let (run, store, _) = frontend_params(a.config.as_deref(), a.checkpoint.as_deref(), None)?;
    let policy = AugmentPolicy {
        seed: a.seed.unwrap_or(run.augment.seed),
        ..run.augment.clone()
    };
    let features = extract_features(&run, &store, &a.wav)?;
    let plan = policy.sample(features.num_frames(), features.dim(), &mut policy.rng_for(0, 0));
    let after = plan.apply(&features.values)?;
    let header: Vec<String> = (0..features.dim()).map(|c| format!("c{c}")).collect();
    write_text(&a.out_dir.join("before.csv"), &matrix_csv(&header, &features.values))?;
    write_text(&a.out_dir.join("after.csv"), &matrix_csv(&header, &after))?;
    let masked = plan.mask.data().iter().filter(|&&m| m == 0.0).count();
    emit(
        out,
        &format!(
            "{} of {} cells masked, warp {}\n",
            masked,
            plan.mask.len(),
            if plan.warp.is_some() { "applied" } else { "skipped" }
        ),
    )
}

pub fn cmd_check_gradients(a: &GradArgs, out: &mut dyn Write) -> Result<()> {
    let cases = gradient_suite(a.seed, a.instances)?;
    let mut text = String::from("op\tinstance\tmax_rel_error\tcoords\tstatus\n");
    let mut failed = Vec::new();
    for c in &cases {
        let ok = c.max_rel_error < GRADIENT_TOLERANCE;
        if !ok {
            failed.push(format!("{}#{}", c.op, c.instance));
        }
        let _ = writeln!(
            text,
            "{}\t{}\t{:.3e}\t{}\t{}",
            c.op,
            c.instance,
            c.max_rel_error,
            c.coords_checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    emit(out, &text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let corpus = ToyCorpus::synthesize(&run.corpus, run.audio.sample_rate)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let alphabet: String = corpus.tokenizer.alphabet().iter().collect();
    let mut listing = format!("alphabet = {alphabet:?}\n");
    for u in &corpus.utterances {
        let name = format!("{}.wav", u.id);
        write_wav(&a.out_dir.join(&name), &u.audio)?;
        let _ = write!(
            listing,
            "\n[[utterances]]\ntranscript = {:?}\nwav = {name:?}\n",
            u.transcript
        );
    }
    write_text(&a.out_dir.join("corpus.toml"), &listing)?;
    emit(
        out,
        &format!("{} utterances -> {}\n", corpus.utterances.len(), a.out_dir.display()),
    )
}

pub fn cmd_train_lm(a: &LmArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.text).map_err(|e| Error::io(&a.text, e))?;
    let tokenizer = CharTokenizer::new(a.alphabet.chars())?;
    let lm = BigramLm::train_text(&text, &tokenizer)?;
    lm.save(&a.out)?;
    emit(
        out,
        &format!(
            "bigram model over {} tokens -> {}\n",
            tokenizer.vocab_size(),
            a.out.display()
        ),
    )
}
