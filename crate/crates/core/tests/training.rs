use std::path::Path;

use lsc::attention::{AttentionConfig, AttentionDecoder, DecoderConfig};
use lsc::config::RunConfig;
use lsc::model::HybridModel;
use lsc::nn::{sgd_step, Graph, ParamStore, Tensor};
use lsc::train::{train, EpochMetrics, ToyCorpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml")).unwrap()
}

fn run(cfg: &RunConfig) -> Vec<EpochMetrics> {
    let corpus = ToyCorpus::synthesize(&cfg.corpus, cfg.audio.sample_rate).unwrap();
    let model = HybridModel::new(cfg.model.clone(), cfg.audio.sample_rate, corpus.tokenizer.vocab_size());
    train(&model, &corpus, cfg, |_| {}).unwrap().history
}

#[test]
fn attention_loss_decreases_over_50_sgd_steps() {
    let decoder = AttentionDecoder::new(
        AttentionConfig {
            att_dim: 8,
            loc_kernel: 3,
            loc_channels: 2,
            ..Default::default()
        },
        DecoderConfig {
            embed_dim: 4,
            hidden: 8,
            layers: 1,
        },
        5,
        4,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    decoder.init(&mut store, &mut rng).unwrap();
    let states = Tensor::from_vec(&[7, 5], (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let target = [2, 1, 3];
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let h = g.constant(states.clone());
        let (loss, _) = decoder.teacher_forced_loss(&mut g, &store, h, &target).unwrap();
        losses.push(g.value(loss).item());
        g.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
        sgd_step(&mut store, 0.05);
    }
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let cfg = small();
    assert_eq!(run(&cfg), run(&cfg));
}

#[test]
fn thread_count_does_not_change_results() {
    let mut cfg = small();
    cfg.train.epochs = 2;
    let one = run(&cfg);
    cfg.train.jobs = 3;
    assert_eq!(one, run(&cfg));
}

#[test]
fn augmented_training_stays_finite() {
    let mut cfg = small();
    cfg.train.augment = true;
    cfg.augment.max_time_mask_frames = 3;
    cfg.augment.max_channel_mask = 4;
    cfg.augment.num_audio_masks = 1;
    let history = run(&cfg);
    assert_eq!(history.len(), cfg.train.epochs);
    assert!(history
        .iter()
        .all(|m| m.loss.is_finite() && m.drift.max_rel.is_finite()));
}

#[test]
fn ctc_only_training_leaves_the_decoder_untouched() {
    let mut cfg = small();
    cfg.train.lambda = 1.0;
    cfg.train.epochs = 1;
    let corpus = ToyCorpus::synthesize(&cfg.corpus, cfg.audio.sample_rate).unwrap();
    let model = HybridModel::new(cfg.model.clone(), cfg.audio.sample_rate, corpus.tokenizer.vocab_size());
    let initial = model.init(cfg.seed).unwrap();
    let out = train(&model, &corpus, &cfg, |_| {}).unwrap();
    for (name, value) in initial
        .iter()
        .filter(|(n, _)| n.starts_with("att.") || n.starts_with("dec."))
    {
        assert_eq!(out.final_params.get(name).unwrap(), value, "{name}");
    }
    assert_ne!(
        out.final_params.get("ctc.out.weight").unwrap(),
        initial.get("ctc.out.weight").unwrap()
    );
}
