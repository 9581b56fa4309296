mod common;

use common::{config, rng};
use lrf_core::exec::Execution;
use lrf_core::training::{
    batch_gradients, evaluate_loss, fit, global_norm, greedy_decode, greedy_decode_batch, load_checkpoint,
    save_checkpoint, train_step_with, Pair, StepStats, TrainConfig, TrainState,
};
use lrf_core::{LrfVariant, Seq2Seq};
use proptest::prelude::*;

fn pairs(n: usize, vocab: usize, seed: u64) -> Vec<Pair> {
    let mut r = rng(seed);
    (0..n).map(|_| common::pair(&mut r, 6, vocab)).collect()
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: 3e-3,
        warmup: 10,
        checkpoint_interval: 5,
        ..TrainConfig::default()
    }
}

/// Dropout on, so the runs also exercise the mask stream.
fn with_dropout(mut c: lrf_core::ModelConfig) -> lrf_core::ModelConfig {
    c.dropout = 0.1;
    c
}

fn bits(m: &Seq2Seq) -> Vec<u64> {
    m.params()
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

fn run(model: &mut Seq2Seq, state: &mut TrainState, data: &[Pair], c: &TrainConfig, exec: Execution) -> Vec<StepStats> {
    let mut log = Vec::new();
    fit(model, state, data, c, exec, |s, _, _| {
        log.push(s.clone());
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn initial_loss_is_near_uniform() {
    for vocab in [30, 120, 225] {
        let model = Seq2Seq::new(config(LrfVariant::LRF, 3, 32, 4, vocab, 1)).unwrap();
        let loss = evaluate_loss(&model, &pairs(32, vocab, 2), Execution::Sequential).unwrap();
        let expect = (vocab as f64).ln();
        assert!((loss - expect).abs() < 0.1 * expect, "{loss} vs {expect}");
    }
}

#[test]
fn repeated_steps_on_one_batch_mostly_decrease_the_loss() {
    let mut model = Seq2Seq::new(config(LrfVariant::LRF, 2, 16, 2, 20, 1)).unwrap();
    let batch = pairs(4, 20, 3);
    let c = TrainConfig {
        lr: 1e-3,
        warmup: 20,
        ..cfg(250)
    };
    let mut state = TrainState::new(&model, 1);
    let losses: Vec<f64> = (0..250)
        .map(|_| {
            train_step_with(&mut model, &batch, &mut state, &c, Execution::Sequential)
                .unwrap()
                .loss
        })
        .collect();
    let windows: Vec<bool> = losses.windows(51).map(|w| w[50] <= w[0]).collect();
    let ok = windows.iter().filter(|&&b| b).count();
    assert!(ok * 10 >= windows.len() * 9, "{ok}/{}", windows.len());
    assert!(losses[249] < 0.5 * losses[0]);
}

#[test]
fn clipping_bounds_the_update_norm() {
    let model = Seq2Seq::new(config(LrfVariant::LRF, 2, 8, 2, 15, 1)).unwrap();
    let (_, mut g) = batch_gradients(&model, &pairs(4, 15, 1), 0.1, None, Execution::Sequential).unwrap();
    let before = lrf_core::training::clip_gradients(&mut g, 1e-3);
    assert!(before > 1e-3);
    assert!(global_norm(&g) <= 1e-3 + 1e-9);
}

#[test]
fn overfit_single_pair_decodes_its_target() {
    let mut model = Seq2Seq::new(config(LrfVariant::LRF, 2, 16, 2, 15, 1)).unwrap();
    let pair = Pair::new(vec![5, 9, 7, 12], vec![6, 14, 8, 10, 4]);
    let c = TrainConfig {
        label_smoothing: 0.0,
        lr: 3e-3,
        warmup: 20,
        ..cfg(300)
    };
    let mut state = TrainState::new(&model, 1);
    for _ in 0..300 {
        train_step_with(
            &mut model,
            std::slice::from_ref(&pair),
            &mut state,
            &c,
            Execution::Sequential,
        )
        .unwrap();
    }
    let out = greedy_decode(&model, &pair.src, 10).unwrap();
    assert_eq!(out.tokens, pair.tgt);
    assert!(!out.truncated);
    assert_eq!(greedy_decode(&model, &pair.src, 10).unwrap(), out);
    assert_eq!(greedy_decode(&model, &pair.src, 1).unwrap().tokens.len(), 1);
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let data = pairs(12, 17, 4);
    let mut model = Seq2Seq::new(config(LrfVariant::LRF, 2, 8, 2, 17, 5)).unwrap();
    let mut state = TrainState::new(&model, 9);
    run(&mut model, &mut state, &data, &cfg(6), Execution::Sequential);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &state, &serde_json::json!({"note": 1})).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.state, state);
    assert_eq!(back.meta["note"], 1);
    let logits = |m: &Seq2Seq| {
        let s = m.eval_session();
        let e = s.encode(&data[0].src, data[0].src.len()).unwrap();
        let d = s.decode(&data[0].teacher_forcing().0, &e).unwrap();
        let v: Vec<u64> = s.tape().value(d.logits).data().iter().map(|x| x.to_bits()).collect();
        v
    };
    assert_eq!(logits(&back.model), logits(&model));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = pairs(10, 17, 6);
    let mut c = cfg(10);
    c.checkpoint_interval = 4;
    let mut base = Seq2Seq::new(with_dropout(config(LrfVariant::LRF, 2, 8, 2, 17, 2))).unwrap();
    let init = base.clone();

    let mut state = TrainState::new(&base, 3);
    let full = run(&mut base, &mut state, &data, &c, Execution::Sequential);

    let mut model = init;
    let mut state = TrainState::new(&model, 3);
    let path = dir.path().join("last.ckpt");
    let first = run(
        &mut model,
        &mut state,
        &data,
        &TrainConfig { steps: 4, ..c.clone() },
        Execution::Sequential,
    );
    save_checkpoint(&path, &model, &state, &serde_json::Value::Null).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let (mut model, mut state) = (loaded.model, loaded.state);
    let rest = run(&mut model, &mut state, &data, &c, Execution::Sequential);

    let stitched: Vec<u64> = first.iter().chain(&rest).map(|s| s.loss.to_bits()).collect();
    assert_eq!(stitched, full.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>());
    assert_eq!(bits(&model), bits(&base));
}

#[test]
fn parallel_and_sequential_runs_are_identical() {
    let data = pairs(16, 17, 7);
    let c = cfg(5);
    let start = Seq2Seq::new(with_dropout(config(LrfVariant::LRF, 2, 8, 2, 17, 2))).unwrap();
    let go = |exec| {
        let mut m = start.clone();
        let mut s = TrainState::new(&m, 4);
        let log = run(&mut m, &mut s, &data, &c, exec);
        let sources: Vec<Vec<usize>> = data.iter().map(|p| p.src.clone()).collect();
        let decoded = greedy_decode_batch(&m, &sources, 8, exec).unwrap();
        (log, bits(&m), decoded)
    };
    assert_eq!(go(Execution::Sequential), go(Execution::Parallel));
}

#[test]
fn zero_steps_is_rejected_by_the_core_config() {
    assert!(TrainConfig { steps: 0, ..cfg(1) }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identical_seeds_give_identical_loss_curves(seed in any::<u64>()) {
        let data = pairs(8, 13, seed);
        let go = || {
            let mut m = Seq2Seq::new(with_dropout(config(LrfVariant::ACCU, 1, 8, 2, 13, seed))).unwrap();
            let mut s = TrainState::new(&m, seed);
            run(&mut m, &mut s, &data, &cfg(3), Execution::Sequential)
                .iter()
                .map(|s| s.loss.to_bits())
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(go(), go());
    }
}
