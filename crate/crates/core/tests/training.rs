use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use duofield::loss::{LossWeights, Phase, Term};
use duofield::pipeline::{forward_backward, place_samples, SamplingConfig, StepBatch, StepOptions};
use duofield::train::{Checkpoint, TrainConfig, Trainer};
use duofield::Error;

fn short_config() -> TrainConfig {
    TrainConfig { steps: Some(90), seed: 5, ..TrainConfig::desk() }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let mut t = Trainer::new(TrainConfig { steps: Some(3), ..short_config() }).unwrap();
    t.run_until(3, |_| Ok(())).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    let p = std::path::Path::new("mem.duoc");
    assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), t.checkpoint());

    let is_format = |b: &[u8]| matches!(Checkpoint::from_bytes(b, p), Err(Error::Format { .. }));
    for cut in [0, 3, 4, 8, 15, 40, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
        assert!(is_format(&bytes[..cut]), "truncation at {cut} accepted");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(is_format(&magic));
    let mut version = bytes.clone();
    version[4] = 2;
    assert!(is_format(&version));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(is_format(&trailing));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(&dir.path().join("absent.duoc")), Err(Error::Io(_))));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let mut straight = Trainer::new(short_config()).unwrap();
    straight.run_until(u64::MAX, |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.duoc");
    let mut first = Trainer::new(short_config()).unwrap();
    // straddles the init/full boundary
    first.run_until(70, |_| Ok(())).unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run_until(u64::MAX, |_| Ok(())).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());
}

/// Reconstruction loss of the current model on a fixed set of training
/// patches, without sample jitter.
fn held_rgb_loss(t: &Trainer, batch: &StepBatch) -> f64 {
    let sampling = SamplingConfig { jitter: false, ..t.config.sampling };
    let samples = place_samples(&t.model, &batch.rays, &sampling, true, None).unwrap();
    let opts = StepOptions {
        terms: vec![Term::Rgb],
        compute_grads: false,
        ..StepOptions::new(Phase::Full, LossWeights::default())
    };
    forward_backward(&t.model, batch, &samples, &opts).unwrap().report.get(Term::Rgb).unwrap()
}

#[test]
fn reconstruction_loss_falls_below_a_fifth_of_its_step_50_value() {
    let mut t = Trainer::new(TrainConfig { steps: Some(2000), ..TrainConfig::desk() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batch = StepBatch::from_patches(&t.data.sample_patches(8, &mut rng).unwrap()).unwrap();
    t.run_until(50, |_| Ok(())).unwrap();
    let early = held_rgb_loss(&t, &batch);
    t.run_until(u64::MAX, |_| Ok(())).unwrap();
    let last = held_rgb_loss(&t, &batch);
    assert!(last < 0.2 * early, "L_rgb {last} at the end vs {early} at step 50");
}

#[test]
fn inlier_fraction_settles_when_the_init_phase_never_ends() {
    let cfg = TrainConfig { steps: Some(600), init_epochs: 1000, ..TrainConfig::desk() };
    let mut t = Trainer::new(cfg).unwrap();
    assert_eq!(t.init_steps(), 600);
    let mut fractions = Vec::new();
    t.run_until(u64::MAX, |rec| {
        assert_eq!(rec.phase, Phase::Init);
        fractions.push(rec.inlier_fraction.unwrap());
        Ok(())
    })
    .unwrap();
    let tail = &fractions[fractions.len() - 100..];
    let mean = tail.iter().sum::<f64>() / 100.0;
    let std = (tail.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
    assert!(std < 0.02, "trailing inlier-fraction std {std:.4} (mean {mean:.3})");
}
