use candle_core::DType;
use csi_codec::eval;
use csi_codec::model::CODEBOOK_PARAM;
use csi_codec::training::{self, Batch, TrainState};
use csi_codec::{ChannelConfig, CsiSample, Dataset, Split, TrainingConfig};

fn small_set(n: usize) -> Dataset {
    let config = ChannelConfig { n_subcarriers: 64, ..ChannelConfig::default() };
    Dataset::generate(&config, Split::Train, n).unwrap().without_raw()
}

fn tiny_config() -> TrainingConfig {
    TrainingConfig { batch_size: 2, n_vectors: 4, seed: 11, ..TrainingConfig::desk() }
}

fn batch(ds: &Dataset, state: &TrainState) -> Batch {
    let samples: Vec<&CsiSample> = ds.samples.iter().take(2).collect();
    Batch::new(&samples, state.codec.normalizer(), state.config.use_side_info, state.codec.dtype()).unwrap()
}

fn codebook_values(state: &TrainState) -> Vec<f32> {
    state.codec.codebook_tensor().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = small_set(5);
    let dir = tempfile::tempdir().unwrap();
    let full = TrainingConfig { n_train: 10, ..tiny_config() };
    let (_, straight) = training::train(&full, &ds, None, None).unwrap();

    let half = TrainingConfig { n_train: 5, ..full.clone() };
    let (first, head) = training::train(&half, &ds, None, None).unwrap();
    let path = dir.path().join("half.ckpt");
    first.save(&path).unwrap();
    let mut resumed = TrainState::load(&path, None).unwrap();
    resumed.config.n_train = 10;
    let tail = training::train_from(&mut resumed, &ds, None, None).unwrap();

    let joined: Vec<_> = head.iter().chain(&tail).collect();
    assert_eq!(joined.len(), straight.len());
    for (a, b) in joined.iter().zip(&straight) {
        assert_eq!(a.step, b.step);
        let rel = (a.loss - b.loss).abs() / b.loss.abs().max(1e-12);
        assert!(rel <= 1e-6, "step {}: {} vs {}", a.step, a.loss, b.loss);
    }
}

#[test]
fn zero_steps_leave_state_unchanged() {
    let ds = small_set(3);
    let config = TrainingConfig { n_train: 0, ..tiny_config() };
    let fresh = TrainState::new(&config, &ds).unwrap();
    let (state, log) = training::train(&config, &ds, None, None).unwrap();
    assert!(log.is_empty());
    assert_eq!(state.step, 0);
    assert_eq!(codebook_values(&state), codebook_values(&fresh));
}

#[test]
fn eta_zero_isolates_the_codebook() {
    let ds = small_set(3);
    let config = TrainingConfig { eta: 0.0, ..tiny_config() };
    let mut state = TrainState::new(&config, &ds).unwrap();
    let before = codebook_values(&state);
    let b = batch(&ds, &state);
    for _ in 0..3 {
        let l = state.train_step(&b).unwrap();
        assert_eq!(l.total, l.denoise);
    }
    assert_eq!(codebook_values(&state), before);
}

#[test]
fn frozen_codebook_encoder_still_learns() {
    let ds = small_set(3);
    let config = TrainingConfig { eta: 0.0, freeze_codebook: true, ..tiny_config() };
    let state = TrainState::new(&config, &ds).unwrap();
    assert!(state.optimizer.names().all(|n| n != CODEBOOK_PARAM));
    let b = batch(&ds, &state);
    // Train the decoder a little so its output head is no longer zero.
    let mut state = state;
    for _ in 0..3 {
        state.train_step(&b).unwrap();
    }
    let (steps, eps) = state.step_randomness(99, b.len()).unwrap();
    let parts = state.codec.loss(&b.x, None, &b.z, &steps, &eps, 0.0).unwrap();
    let grads = parts.total.backward().unwrap();
    let enc_norm: f64 = state
        .codec
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("encoder"))
        .filter_map(|(_, v)| grads.get(v.as_tensor()))
        .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64)
        .sum();
    assert!(enc_norm > 0.0);
}

#[test]
fn loss_is_finite_for_every_step_and_param_count_constant() {
    let ds = small_set(2);
    let mut state = TrainState::new(&tiny_config(), &ds).unwrap();
    let count = state.codec.params().count();
    let b = batch(&ds, &state);
    for t in 1..=4 {
        let (_, eps) = state.step_randomness(0, 2).unwrap();
        let parts = state.codec.loss(&b.x, None, &b.z, &[t, t], &eps, 4.5e-4).unwrap();
        assert!(training::scalar(&parts.total).unwrap().is_finite(), "t = {t}");
    }
    for _ in 0..2 {
        state.train_step(&b).unwrap();
    }
    assert_eq!(state.optimizer.t, 2);
    assert_eq!(state.codec.params().count(), count);
}

#[test]
fn untrained_codec_is_near_zero_db() {
    let ds = small_set(4);
    let state = TrainState::new(&tiny_config(), &ds).unwrap();
    let p = eval::evaluate(&state.codec, &ds).unwrap();
    assert!(p.nmse_db.abs() < 1e-6, "{}", p.nmse_db);
    assert_eq!(p.rate_bits, 128);
}

#[test]
fn metrics_and_checkpoints_are_written() {
    let ds = small_set(4);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainingConfig { n_train: 4, checkpoint_every: 2, val_every: 2, val_samples: 2, log_every: 2, ..tiny_config() };
    let (_, log) = training::train(&config, &ds, Some(&ds), Some(dir.path())).unwrap();
    assert!(dir.path().join("step_00000002.ckpt").exists());
    assert!(dir.path().join("final.ckpt").exists());
    let back = training::read_metrics(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back, log);
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), [2, 4]);
    assert!(log.iter().all(|r| r.val_nmse_db.is_some()));
    let header = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,loss,denoise_loss,cb_loss,val_nmse_db"));
}

#[test]
fn f64_training_path_runs() {
    let ds = small_set(2);
    let config = tiny_config();
    let normalizer = csi_codec::Normalizer::fit_dataset(&ds);
    let mut state = TrainState::with_dtype(&config, normalizer, DType::F64).unwrap();
    let b = batch(&ds, &state);
    assert!(state.train_step(&b).unwrap().total.is_finite());
}
