use candle_core::{DType, Tensor};

use cspc_core::acoustic::TextSequence;
use cspc_core::checkpoint::{
    encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
};
use cspc_core::corpus::{generate_corpus, ingest, Corpus, CorpusItem, CorpusSpec, IngestOptions};
use cspc_core::nn::Mode;
use cspc_core::pipeline::{
    synthesize, train_step, Ablation, Batch, ModelConfig, TrainConfig, TrainState,
};
use cspc_core::Error;

fn small_corpus(full_factorial: bool) -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        items_per_cell: 2,
        target_speaker_neutral_only: !full_factorial,
        ..CorpusSpec::default()
    };
    let generated = generate_corpus(&spec, dir.path()).unwrap();
    let corpus = ingest(&generated.manifest, &IngestOptions::default()).unwrap();
    (dir, corpus)
}

fn batch(corpus: &Corpus, offset: usize) -> Batch {
    let items: Vec<&CorpusItem> = corpus
        .items
        .iter()
        .skip(offset)
        .step_by(3)
        .take(6)
        .collect();
    Batch::collate(&items).unwrap()
}

fn fresh(corpus: &Corpus, seed: u64) -> TrainState {
    TrainState::new(&ModelConfig::for_corpus(corpus), seed).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

fn snapshot(state: &TrainState) -> Vec<(String, Vec<f64>)> {
    state
        .store
        .params()
        .iter()
        .map(|(name, var)| (name.clone(), values(var.as_tensor())))
        .collect()
}

#[test]
fn adversarial_step_raises_emotion_cross_entropy_of_speaker_encoder() {
    let (_dir, corpus) = small_corpus(false);
    let mut raised = 0;
    let trials = 6;
    for trial in 0..trials {
        let state = fresh(&corpus, 100 + trial as u64);
        let b = batch(&corpus, trial);
        let adv = |state: &TrainState| {
            let out = state
                .model
                .forward(&b, Ablation::FULL, 1.0, Mode::Eval)
                .unwrap();
            out.adv_emo
        };
        let before = adv(&state);
        let grads = before.backward().unwrap();
        let speaker_params: Vec<_> = state
            .store
            .params()
            .iter()
            .filter(|(name, _)| name.starts_with("sdm.speaker_encoder."))
            .collect();
        assert!(!speaker_params.is_empty());
        let norm: f64 = speaker_params
            .iter()
            .filter_map(|(_, v)| grads.get(v.as_tensor()))
            .map(|g| values(g).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0);
        let step = 1e-2 / norm;
        for (_, var) in &speaker_params {
            if let Some(g) = grads.get(var.as_tensor()) {
                let moved =
                    (var.as_tensor() - (g.to_dtype(DType::F32).unwrap() * step).unwrap()).unwrap();
                var.set(&moved).unwrap();
            }
        }
        let after = adv(&state).to_scalar::<f64>().unwrap();
        raised += usize::from(after > before.to_scalar::<f64>().unwrap());
    }
    assert_eq!(
        raised, trials,
        "descent on the reversed loss must ascend the cross-entropy"
    );
}

#[test]
fn zero_alpha_removes_every_orthogonality_gradient() {
    let (_dir, corpus) = small_corpus(false);
    let state = fresh(&corpus, 3);
    let out = state
        .model
        .forward(&batch(&corpus, 0), Ablation::FULL, 1.0, Mode::Train)
        .unwrap();
    let ort = out.ort.clone().unwrap();

    let grads = (&ort * 0.0).unwrap().backward().unwrap();
    for (name, var) in state.store.params() {
        if let Some(g) = grads.get(var.as_tensor()) {
            assert!(
                values(g).iter().all(|&x| x == 0.0),
                "{name} got gradient at alpha 0"
            );
        }
    }

    let grads = (&ort * 0.1).unwrap().backward().unwrap();
    for prefix in ["sdm.emotion_encoder.", "sdm.speaker_encoder."] {
        let moved = state.store.params().iter().any(|(name, var)| {
            name.starts_with(prefix)
                && grads
                    .get(var.as_tensor())
                    .is_some_and(|g| values(g).iter().any(|&x| x != 0.0))
        });
        assert!(
            moved,
            "{prefix} should receive gradient from ort at alpha 0.1"
        );
    }
}

#[test]
fn disabling_gc_leaves_sdm_outputs_unchanged_at_init() {
    let (_dir, corpus) = small_corpus(false);
    let state = fresh(&corpus, 4);
    let b = batch(&corpus, 1);
    let full = state
        .model
        .forward(&b, Ablation::FULL, 1.0, Mode::Eval)
        .unwrap();
    let no_gc = state
        .model
        .forward(&b, Ablation::WITHOUT_GC, 1.0, Mode::Eval)
        .unwrap();
    assert_eq!(
        values(full.emotion.as_ref().unwrap()),
        values(no_gc.emotion.as_ref().unwrap())
    );
    assert_eq!(values(&full.speaker), values(&no_gc.speaker));
    for (a, b) in [
        (full.emo.unwrap(), no_gc.emo.unwrap()),
        (full.spk, no_gc.spk),
        (full.adv_emo, no_gc.adv_emo),
        (full.ort.unwrap(), no_gc.ort.unwrap()),
    ] {
        assert_eq!(a.to_scalar::<f64>().unwrap(), b.to_scalar::<f64>().unwrap());
    }
}

#[test]
fn checkpoints_round_trip_and_guard_the_ablation() {
    let (_dir, corpus) = small_corpus(false);
    let mut state = fresh(&corpus, 5);
    let config = TrainConfig {
        ablation: Ablation::WITHOUT_GC,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_step(&mut state, &batch(&corpus, 0), &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a, &state, &config, &corpus.fingerprint).unwrap();
    save_checkpoint(&b, &state, &config, &corpus.fingerprint).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let restored = load_checkpoint(&a).unwrap();
    assert_eq!(restored.step(), 1);
    assert_eq!(restored.train, config);
    assert_eq!(restored.corpus_fingerprint, corpus.fingerprint);
    assert_eq!(snapshot(&restored.state), snapshot(&state));
    let probe = batch(&corpus, 2);
    let run = |s: &TrainState| {
        let out = s
            .model
            .forward(&probe, config.ablation, 1.0, Mode::Eval)
            .unwrap();
        (
            values(&out.mel_after),
            values(&out.stop_logits),
            values(&out.alignments),
        )
    };
    assert_eq!(run(&restored.state), run(&state));
    assert_eq!(
        encode_checkpoint(
            &restored.state,
            &restored.train,
            &restored.corpus_fingerprint
        )
        .unwrap(),
        std::fs::read(&a).unwrap()
    );

    assert!(load_checkpoint_for(&a, Ablation::WITHOUT_GC).is_ok());
    assert!(matches!(
        load_checkpoint_for(&a, Ablation::FULL),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn train_step_is_deterministic_and_zero_rate_is_a_null_update() {
    let (_dir, corpus) = small_corpus(false);
    let state = fresh(&corpus, 6);
    let b = batch(&corpus, 0);
    let config = TrainConfig::default();

    let (mut x, mut y) = (state.deep_clone().unwrap(), state.deep_clone().unwrap());
    let rx = train_step(&mut x, &b, &config).unwrap();
    let ry = train_step(&mut y, &b, &config).unwrap();
    assert_eq!(rx, ry);
    assert_eq!(snapshot(&x), snapshot(&y));
    assert_ne!(snapshot(&x), snapshot(&state));

    let mut z = state.deep_clone().unwrap();
    let frozen = TrainConfig {
        learning_rate: 0.0,
        ..config
    };
    train_step(&mut z, &b, &frozen).unwrap();
    assert_eq!(snapshot(&z), snapshot(&state));
    assert_eq!(z.step(), 1);
}

#[test]
fn synthesis_is_deterministic_and_conditioning_is_live() {
    let (_dir, corpus) = small_corpus(false);
    let mut state = fresh(&corpus, 7);
    let config = TrainConfig::default();
    for k in 0..3 {
        train_step(&mut state, &batch(&corpus, k), &config).unwrap();
    }
    let reference = corpus
        .items
        .iter()
        .find(|i| i.speaker == 0 && i.emotion == 3)
        .unwrap();
    let text = TextSequence::new(reference.tokens.clone(), corpus.vocab.len()).unwrap();
    let run = |speaker: usize, ablation: Ablation| {
        synthesize(
            &state.model,
            &text,
            &reference.mel,
            &reference.aif,
            speaker,
            ablation,
            30,
        )
        .unwrap()
        .mel
    };
    let base = run(1, Ablation::FULL);
    assert_eq!(base, run(1, Ablation::FULL));
    assert_ne!(base.data(), run(0, Ablation::FULL).data());
    assert_ne!(base.data(), run(1, Ablation::WITHOUT_PCE).data());
    assert!(matches!(
        synthesize(
            &state.model,
            &text,
            &reference.mel,
            &reference.aif,
            2,
            Ablation::FULL,
            30
        ),
        Err(Error::UnknownSpeaker { .. })
    ));
}

#[test]
fn permuting_speaker_rows_permutes_synthesis() {
    let (_dir, corpus) = small_corpus(false);
    let state = fresh(&corpus, 8);
    let reference = &corpus.items[5];
    let text = TextSequence::new(reference.tokens.clone(), corpus.vocab.len()).unwrap();
    let run = |speaker: usize| {
        synthesize(
            &state.model,
            &text,
            &reference.mel,
            &reference.aif,
            speaker,
            Ablation::FULL,
            25,
        )
        .unwrap()
        .mel
    };
    let (zero, one) = (run(0), run(1));

    let table = state.store.param("speaker_table.table").unwrap();
    let swapped = Tensor::cat(
        &[
            table.narrow(0, 1, 1).unwrap(),
            table.narrow(0, 0, 1).unwrap(),
        ],
        0,
    )
    .unwrap();
    table.set(&swapped).unwrap();
    assert_eq!(run(0), one);
    assert_eq!(run(1), zero);
}
