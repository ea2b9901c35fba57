use hman::model::init_params;
use hman::numcore::{ParamSet, Tape};
use hman::synthdata::{Split, SpanSource};
use hman::training::{
    adam_step, batch_objective, evaluate_objective, fit, reference_batch, Checkpoint,
    OptimizerState, PreparedCorpus,
};
use hman::*;

fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&SyntheticSpec {
        n_videos: 4,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn overfit_ratio(variant: Variant) -> f64 {
    let corpus = small_corpus(3);
    let hyper = Hyperparams {
        variant,
        ..Hyperparams::default()
    };
    let data = PreparedCorpus::<f32>::new(&corpus, hyper.pos_iou_threshold).unwrap();
    let batch = data.pairs();
    let mut model = init_params::<f32>(0, &corpus.profile, ModelDims::new(32, 32, 32)).unwrap();
    let mut opt = OptimizerState::new(model.params());
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (total, report) =
            batch_objective(&mut model, &mut tape, &bound, &data, &batch, &hyper, Mode::Train).unwrap();
        losses.push(report.total);
        model.zero_grad();
        tape.backward(total, model.params_mut()).unwrap();
        adam_step(model.params_mut(), &mut opt, hyper.lr0).unwrap();
    }
    let last = evaluate_objective(&model, &data, &batch, &hyper).unwrap().total;
    last / losses[0]
}

#[test]
fn overfits_one_batch_sum() {
    let r = overfit_ratio(Variant::Sum);
    assert!(r <= 0.5, "final/initial = {r}");
}

#[test]
fn overfits_one_batch_max() {
    let r = overfit_ratio(Variant::Max);
    assert!(r <= 0.5, "final/initial = {r}");
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let corpus = small_corpus(1);
    let hyper = Hyperparams {
        epochs: 3,
        batch_size: 4,
        ..Hyperparams::default()
    };
    let dims = ModelDims::new(32, 32, 16);
    let a = fit::<f64>(&corpus, &hyper, dims).unwrap();
    let b = fit::<f64>(&corpus, &hyper, dims).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let c = fit::<f64>(&corpus, &Hyperparams { seed: 9, ..hyper }, dims).unwrap();
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn lambda_zero_matches_intra_only() {
    let corpus = small_corpus(2);
    let dims = ModelDims::new(32, 32, 16);
    let base = Hyperparams {
        epochs: 3,
        batch_size: 4,
        ..Hyperparams::default()
    };
    let proposed = fit::<f32>(&corpus, &Hyperparams { lambda1: 0.0, ..base.clone() }, dims).unwrap();
    let intra = fit::<f32>(
        &corpus,
        &Hyperparams {
            objective: Objective::Intra,
            ..base
        },
        dims,
    )
    .unwrap();
    let (p, q) = (&proposed.checkpoint, &intra.checkpoint);
    for (a, b) in p.params.params().iter().zip(q.params.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(p.optimizer, q.optimizer);
    assert_eq!(p.params.sent_bn, q.params.sent_bn);
}

#[test]
fn reloaded_checkpoint_reproduces_logged_loss() {
    let corpus = small_corpus(4);
    for variant in [Variant::Sum, Variant::Max] {
        let hyper = Hyperparams {
            epochs: 2,
            batch_size: 4,
            variant,
            ..Hyperparams::default()
        };
        let out = fit::<f32>(&corpus, &hyper, ModelDims::new(32, 32, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.hmc");
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(loaded.hyper.variant, variant);

        let data = PreparedCorpus::<f32>::new(&corpus, hyper.pos_iou_threshold).unwrap();
        let pairs = data.pairs();
        let again = evaluate_objective(&loaded.params, &data, reference_batch(&pairs, 4), &loaded.hyper)
            .unwrap();
        let logged = loaded.metrics["checkpoint.total"];
        assert!((again.total - logged).abs() <= 1e-5, "{variant:?}: {} vs {logged}", again.total);
        assert_eq!(out.log.last().unwrap().checkpoint_loss.total, logged);

        // save → load → save is byte-identical
        let path2 = dir.path().join("ck2.hmc");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

#[test]
fn whole_video_oracle_is_found_at_rank_one() {
    let corpus = generate_corpus(&SyntheticSpec {
        n_videos: 1,
        sentences_per_video: 1,
        noise_sigma: 0.0,
        span_source: SpanSource::Whole,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let hyper = Hyperparams {
        epochs: 30,
        lr0: 1e-2,
        ..Hyperparams::default()
    };
    let out = fit::<f32>(&corpus, &hyper, ModelDims::new(32, 32, 16)).unwrap();
    let report = evaluate(
        &out.checkpoint.params,
        &corpus,
        &EvalSettings {
            ks: vec![1],
            ious: vec![0.5],
            min_annotations: 1,
        },
    )
    .unwrap();
    // positives are every candidate at IoU ≥ 0.5 with the whole video
    assert_eq!(report.recall_at(1, 0.5), Some(1.0), "{report}");
    assert_eq!(report.median_rank_at(0.5), Some(1.0));
}

#[test]
fn losses_trend_down_over_training() {
    let corpus = small_corpus(5);
    let hyper = Hyperparams {
        epochs: 10,
        batch_size: 4,
        ..Hyperparams::default()
    };
    let out = fit::<f32>(&corpus, &hyper, ModelDims::new(32, 32, 16)).unwrap();
    let first = out.log.first().unwrap().report.total;
    let last = out.log.last().unwrap().report.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn more_noise_hurts_retrieval_on_average() {
    let mean_recall = |noise: f64| {
        (0..3)
            .map(|seed| {
                let corpus = generate_corpus(&SyntheticSpec {
                    noise_sigma: noise,
                    seed,
                    ..SyntheticSpec::default()
                })
                .unwrap();
                let hyper = Hyperparams {
                    batch_size: 16,
                    seed,
                    ..Hyperparams::default()
                };
                let train = corpus.with_split(Split::Train);
                let out = fit::<f32>(&train, &hyper, ModelDims::default()).unwrap();
                evaluate(&out.checkpoint.params, &corpus, &EvalSettings::default())
                    .unwrap()
                    .recall_at(10, 0.5)
                    .unwrap()
            })
            .sum::<f64>()
            / 3.0
    };
    let (clean, noisy) = (mean_recall(0.1), mean_recall(2.0));
    assert!(clean > noisy, "noise 0.1: {clean}, noise 2.0: {noisy}");
}

#[test]
fn non_finite_features_abort_with_last_good_state() {
    let mut corpus = small_corpus(6);
    corpus.videos[0].annotations[0].feature[0] = f32::NAN;
    let hyper = Hyperparams {
        epochs: 2,
        batch_size: 8,
        ..Hyperparams::default()
    };
    let err = fit::<f32>(&corpus, &hyper, ModelDims::new(32, 32, 16)).unwrap_err();
    assert!(matches!(err.error, Error::Numeric(_)), "{}", err.error);
    assert_eq!(err.last_good.epoch, 0);
    assert!(err.last_good.params.all_finite());
}
