mod common;

use candle_core::Tensor;
use common::*;
use tempfile::tempdir;
use textped_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use textped_core::data::TrainingSet;
use textped_core::model::{GEN_PREFIX, MATCH_PREFIX, TEXT_PREFIX};
use textped_core::{AblationFlags, Error, StepLog, TrainState};

fn run(state: &mut TrainState, data: &TrainingSet, steps: u64) -> Vec<StepLog> {
    (0..steps)
        .map(|_| {
            let batch = state.next_batch(data).unwrap();
            state.train_step(&batch).unwrap()
        })
        .collect()
}

fn prepared(flags: AblationFlags) -> (tempfile::TempDir, TrainState, TrainingSet) {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(4, 2);
    cfg.ablation = flags;
    let (mut state, data) = setup(dir.path(), 12, cfg);
    pretrain(&mut state, &data);
    (dir, state, data)
}

fn family<'a>(names: &'a [String], pred: impl Fn(&str) -> bool + 'a) -> impl Iterator<Item = &'a String> + 'a {
    names.iter().filter(move |n| pred(n))
}

fn is_fine_or_part(n: &str) -> bool {
    n.starts_with("disc") && (n.contains(".fine.") || n.contains(".part."))
}

fn is_part_visa(n: &str) -> bool {
    n.starts_with("disc") && n.contains(".part.") && n.contains(".visa.")
}

fn is_sca(n: &str) -> bool {
    n.starts_with("disc") && n.contains(".global.sca.")
}

#[test]
fn training_is_deterministic() {
    let (_d1, mut a, data_a) = prepared(AblationFlags::default());
    let (_d2, mut b, data_b) = prepared(AblationFlags::default());
    assert_eq!(run(&mut a, &data_a, 2), run(&mut b, &data_b, 2));
    assert_eq!(snapshot(&a.model.store), snapshot(&b.model.store));
}

#[test]
fn pretraining_touches_only_text_and_matching_encoders() {
    let dir = tempdir().unwrap();
    let (mut state, data) = setup(dir.path(), 12, tiny_config(4, 1));
    let before = snapshot(&state.model.store);
    let batch = state.next_batch(&data).unwrap();
    let log = state.pretrain_step(&batch).unwrap();
    assert!(log.loss.is_finite());
    let moved = changed(&before, &snapshot(&state.model.store));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| n.starts_with(TEXT_PREFIX) || n.starts_with(MATCH_PREFIX)), "{moved:?}");
    assert!(state.pretraining_done());
}

#[test]
fn phases_update_disjoint_families() {
    let (_d, mut state, data) = prepared(AblationFlags::default());
    let batch = state.next_batch(&data).unwrap();
    let inputs = state.prepare_step(&batch).unwrap();

    let s0 = snapshot(&state.model.store);
    let (_, total, updated) = state.discriminator_phase(&batch, &inputs).unwrap();
    assert!(total.is_finite());
    let s1 = snapshot(&state.model.store);
    let moved = changed(&s0, &s1);
    assert!(moved.iter().all(|n| n.starts_with("disc")), "{moved:?}");
    assert_eq!(updated, state.disc_trainable().len());

    let (breakdown, _, updated) = state.generator_phase(&inputs).unwrap();
    assert!(breakdown.total.is_finite());
    let moved = changed(&s1, &snapshot(&state.model.store));
    assert!(moved.iter().all(|n| n.starts_with(GEN_PREFIX)), "{moved:?}");
    assert!(!moved.is_empty());
    assert!(updated > 0);
}

#[test]
fn logged_losses_are_finite_and_consistent() {
    let (_d, mut state, data) = prepared(AblationFlags::default());
    for log in run(&mut state, &data, 2) {
        assert_eq!(log.disc.len(), 3);
        let sum: f64 = log.disc.iter().map(|d| d.total).sum();
        assert!((sum - log.disc_total).abs() < 1e-4 * sum.abs().max(1.0));
        let g = &log.gen;
        let want = g.stages.iter().map(|s| s.total).sum::<f64>() + g.lambda_cond * g.cond + g.lambda_damsm * g.damsm;
        assert!((want - g.total).abs() < 1e-9);
        assert!((g.damsm - log.damsm_terms.iter().sum::<f64>()).abs() < 1e-4 * g.damsm.max(1.0));
        for s in &g.stages {
            assert!(s.local.is_some());
        }
    }
    assert_eq!(state.step, 2);
}

#[test]
fn ablations_freeze_their_families() {
    let cases: [(&str, fn(&str) -> bool); 3] = [("no-hpd", is_fine_or_part), ("no-visa", is_part_visa), ("no-sca", is_sca)];
    // with everything enabled each family does move
    let (_d, mut full, data) = prepared(AblationFlags::default());
    let before = snapshot(&full.model.store);
    run(&mut full, &data, 1);
    let moved = changed(&before, &snapshot(&full.model.store));
    for (name, pred) in cases {
        assert!(moved.iter().any(|n| pred(n)), "{name} family never trains");
    }

    for (name, pred) in cases {
        let mut flags = AblationFlags::default();
        flags.disable(name).unwrap();
        let (_d, mut state, data) = prepared(flags);
        let names: Vec<String> = state.model.store.iter().map(|(n, _)| n.clone()).collect();
        assert!(family(&names, pred).count() > 0);
        assert!(state.disc_trainable().iter().all(|n| !pred(n)));
        let before = snapshot(&state.model.store);
        let logs = run(&mut state, &data, 2);
        let moved = changed(&before, &snapshot(&state.model.store));
        let frozen: Vec<&String> = moved.iter().filter(|n| pred(n)).collect();
        assert!(frozen.is_empty(), "{name}: {frozen:?}");
        assert!(moved.iter().any(|n| n.starts_with("disc")));
        if name == "no-hpd" {
            assert!(logs.iter().all(|l| l.disc.iter().all(|d| d.part.is_none())));
            assert!(logs.iter().all(|l| l.gen.stages.iter().all(|s| s.local.is_none())));
        }
    }
}

#[test]
fn no_sca_equals_zero_gate_path() {
    let (_d, state, data) = prepared(AblationFlags::default());
    for (name, var) in state.model.store.iter() {
        if name.ends_with(".sca.gamma") {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
    let batch = state.next_batch(&data).unwrap();
    let text = state.model.encode_text(&batch.tokens).unwrap();
    for (i, d) in state.model.discriminators.iter().enumerate() {
        let on = d.global_scores(&batch.images[i], &text.sentence, true).unwrap();
        let off = d.global_scores(&batch.images[i], &text.sentence, false).unwrap();
        assert_eq!(values(&on.unconditional), values(&off.unconditional));
        assert_eq!(values(&on.conditional), values(&off.conditional));
    }

    // the gate starts at zero, so the first discriminator losses coincide
    let (_d1, mut full, data_full) = prepared(AblationFlags::default());
    let mut flags = AblationFlags::default();
    flags.disable("no-sca").unwrap();
    let (_d2, mut ablated, data_ablated) = prepared(flags);
    let a = run(&mut full, &data_full, 1);
    let b = run(&mut ablated, &data_ablated, 1);
    for (x, y) in a[0].disc.iter().zip(&b[0].disc) {
        assert_eq!(x.global, y.global);
    }
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let (dir, mut state, data) = prepared(AblationFlags::default());
    run(&mut state, &data, 2);
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&state, &path).unwrap();
    let continued = run(&mut state, &data, 2);

    let mut restored = load_checkpoint(&path, Some(&state.config)).unwrap();
    assert_eq!(restored.step, 2);
    let resumed = run(&mut restored, &data, 2);
    assert_eq!(continued, resumed);
    assert_eq!(snapshot(&state.model.store), snapshot(&restored.model.store));
    assert_eq!(encode_checkpoint(&state).unwrap(), encode_checkpoint(&restored).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_d, state, _) = prepared(AblationFlags::default());
    let bytes = encode_checkpoint(&state).unwrap();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut], None), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0xff;
    assert!(matches!(decode_checkpoint(&flipped, None), Err(Error::Checkpoint(_))));
    let mut other = state.config.clone();
    other.model.gen_width += 1;
    let err = decode_checkpoint(&bytes, Some(&other)).unwrap_err();
    assert!(err.to_string().contains("config hash"), "{err}");
    assert!(decode_checkpoint(&bytes, Some(&state.config)).is_ok());
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let (_d, mut state, data) = prepared(AblationFlags::default());
    let name = state.gen_trainable()[0].clone();
    let var = state.model.store.get(&name).unwrap();
    let nan = Tensor::full(f32::NAN, var.shape(), var.device()).unwrap();
    var.set(&nan).unwrap();
    let batch = state.next_batch(&data).unwrap();
    match state.train_step(&batch) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected abort, got {other:?}"),
    }
    assert_eq!(state.step, 0);
}
