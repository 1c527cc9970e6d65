use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcl_core::encoders::{Architecture, EncoderPair};
use tcl_core::losses::Variant;
use tcl_core::pseudo::argmax;
use tcl_core::synthdata::{generate_suite, Suite};
use tcl_core::trainer::{
    evaluate, generate_data, metrics_to_csv, run_multisource, train, SourceSet, TrainConfig, TrainError, Trainer,
};

fn small(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(Suite::Blobs3);
    cfg.variant = variant;
    cfg.samples_per_domain = 96;
    cfg.batch_size = 16;
    cfg.epochs = 4;
    cfg.warmup_epochs = 2;
    cfg.mem_capacity = 40;
    cfg.log_interval = 2;
    cfg.seed = 5;
    cfg
}

#[test]
fn same_seed_gives_identical_metrics_and_weights() {
    let cfg = small(Variant::Tcl);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(metrics_to_csv(a.metrics()), metrics_to_csv(b.metrics()));
    assert!(a.pair().query.bit_eq(&b.pair().query));
    assert!(a.pair().key.bit_eq(&b.pair().key));
    let mut other = cfg.clone();
    other.seed = 6;
    assert_ne!(metrics_to_csv(a.metrics()), metrics_to_csv(train(&other).unwrap().metrics()));
}

#[test]
fn zero_lambda_and_no_variant_share_a_trajectory() {
    let mut zero = small(Variant::Tcl);
    zero.lambda = 0.0;
    let a = train(&zero).unwrap();
    let b = train(&small(Variant::None)).unwrap();
    assert!(a.pair().query.bit_eq(&b.pair().query));
    assert!(a.pair().key.bit_eq(&b.pair().key));
    assert_eq!(metrics_to_csv(a.metrics()), metrics_to_csv(b.metrics()));
}

#[test]
fn one_source_multisource_run_equals_plain_run() {
    let mut cfg = small(Variant::Tcl);
    let source = (0..Suite::Blobs3.domain_count()).find(|&d| d != cfg.target).unwrap();
    cfg.sources = SourceSet::List(vec![source]);
    let a = train(&cfg).unwrap();
    let b = run_multisource(&cfg).unwrap();
    assert!(a.pair().query.bit_eq(&b.pair().query));
    assert_eq!(metrics_to_csv(a.metrics()), metrics_to_csv(b.metrics()));
}

#[test]
fn bank_sizes_grow_by_one_batch_per_step_up_to_capacity() {
    for variant in [Variant::Tcl, Variant::TclSourceCombine] {
        let cfg = small(variant);
        let (b, k) = (cfg.batch_size, cfg.mem_capacity);
        let mut t = Trainer::new(cfg.clone(), generate_data(&cfg)).unwrap();
        let m = cfg.source_domains().len();
        let batches = t.epoch_batches(0);
        for (s, batch) in batches.iter().enumerate() {
            t.train_step(batch, s).unwrap();
            let steps = s + 1;
            assert_eq!(t.target_bank().len(), k.min(steps * b));
            if variant == Variant::Tcl {
                assert_eq!(t.source_banks().len(), m);
                assert!(t.source_banks().iter().all(|bank| bank.len() == k.min(steps * b)));
            } else {
                assert_eq!(t.source_banks().len(), 1);
                assert_eq!(t.source_banks()[0].len(), k.min(steps * m * b));
            }
        }
    }
}

#[test]
fn warmup_epoch_total_excludes_the_contrastive_term() {
    let t = train(&small(Variant::Tcl)).unwrap();
    let first: Vec<_> = t.metrics().iter().filter(|r| r.epoch == 0).collect();
    assert!(!first.is_empty());
    for r in first {
        assert_eq!(r.total, r.l_src + r.l_tar);
    }
    assert!(t.metrics().iter().any(|r| r.l_tcl > 0.0));
}

#[test]
fn every_row_total_is_the_weighted_sum() {
    let cfg = small(Variant::Tcl);
    let t = train(&cfg).unwrap();
    for r in t.metrics() {
        let want = r.l_src + r.l_tar + cfg.lambda_at(r.epoch) * r.l_tcl;
        assert!((r.total - want).abs() <= 1e-12, "{r:?}");
        for acc in [r.gated_fraction, r.pl_acc, r.tgt_acc] {
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn evaluation_scores_a_perfect_labelling_as_one() {
    let cfg = small(Variant::None);
    let t = Trainer::new(cfg.clone(), generate_data(&cfg)).unwrap();
    let mut data = t.target_data().clone();
    let probs = t.pair().predict(&data.all_inputs()).unwrap().probs;
    for (i, s) in data.samples.iter_mut().enumerate() {
        s.label = argmax(probs.row(i)) as i32;
    }
    assert_eq!(evaluate(t.pair(), &data).unwrap(), 1.0);
    assert_eq!(evaluate(t.pair(), &data).unwrap(), evaluate(t.pair(), &data).unwrap());
}

#[test]
fn random_initialization_is_at_chance_on_ten_classes() {
    // A single random network is biased towards a few classes, so chance
    // level holds for the mean over initializations.
    let data = &generate_suite(Suite::Digits5, 1000, 0)[2];
    let arch = Architecture::new(data.dim, 32, 10);
    let accs: Vec<f64> = (0..8)
        .map(|seed| evaluate(&EncoderPair::new(arch, 0.99, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(), data).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.05, "{accs:?}");
}

#[test]
fn empty_evaluation_set_is_a_data_error() {
    let mut data = generate_suite(Suite::Blobs3, 8, 0).remove(0);
    data.samples.clear();
    let arch = Architecture::new(data.dim, 4, 4);
    let pair = EncoderPair::new(arch, 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(evaluate(&pair, &data), Err(TrainError::Data(_))));
}
