use lsc::cli::{cmd_params, ParamsArgs};
use lsc::frontend::{FrontEnd, FrontEndConfig};
use lsc::model::{HybridModel, ModelConfig};
use lsc::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_frontend_counts() {
    let cfg = FrontEndConfig::default();
    assert_eq!(cfg.sinc.num_params(), 2 * cfg.sinc.num_filters);
    let mut expected = 2 * cfg.sinc.num_filters;
    let mut saving = 0;
    for b in &cfg.blocks {
        let c_out = b.in_channels * b.multiplier;
        let count = c_out * b.kernel_size + if b.bias { c_out } else { 0 };
        assert_eq!(b.param_count(), count);
        expected += count;
        saving += b.in_channels * c_out;
    }
    assert_eq!(cfg.num_params(), expected);
    assert!((10_000..=20_000).contains(&expected), "{expected}");
    assert_eq!(cfg.pointwise_saving(), saving);
}

#[test]
fn initialized_store_matches_the_accounting() {
    let cfg = FrontEndConfig::default();
    let mut store = ParamStore::new();
    FrontEnd::new(cfg.clone(), 16_000)
        .init(&mut store, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(store.num_scalars(), cfg.num_params());

    let model = HybridModel::new(ModelConfig::default(), 16_000, 4);
    let full = model.init(0).unwrap();
    let s = model.param_summary();
    assert_eq!(full.num_scalars(), s.total());
    assert_eq!(full.num_scalars_with_prefix("frontend."), s.frontend);
}

#[test]
fn table_prints_exact_totals() {
    let mut out = Vec::new();
    cmd_params(
        &ParamsArgs {
            config: None,
            vocab: Some(4),
        },
        &mut out,
    )
    .unwrap();
    let text = String::from_utf8(out).unwrap();
    let cfg = FrontEndConfig::default();
    let value = |key: &str| -> usize {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
            .unwrap_or_else(|| panic!("no `{key}` line in\n{text}"))
            .parse()
            .unwrap()
    };
    assert_eq!(value("front-end total"), cfg.num_params());
    let saving: usize = cfg
        .blocks
        .iter()
        .map(|b| b.in_channels * b.in_channels * b.multiplier)
        .sum();
    assert_eq!(value("pointwise-omission saving"), saving);
    assert!(text.lines().any(|l| l.starts_with("sinc\t2x128\t256\t")), "{text}");
}
