mod common;

use loopgan::checkpoint;
use loopgan::data::{self, DomainDataset, SynthKind, SynthSpec};
use loopgan::objective::{self, FitOptions, NoCallback, TrainConfig, Trainer};
use loopgan::rng;
use loopgan::{ArchConfig, Error, SequenceSpec};

fn tiny_data(n: usize, per_domain: usize) -> (SequenceSpec, Vec<DomainDataset>) {
    let spec = SynthSpec {
        kind: SynthKind::HueCycle,
        n_domains: n,
        per_domain,
        resolution: 8,
        seed: 2,
    };
    (spec.sequence().unwrap(), data::generate_synthetic(&spec).unwrap())
}

fn tiny_trainer(spec: &SequenceSpec, seed: u64, epochs: usize) -> Trainer<f32> {
    let cfg = TrainConfig {
        seed,
        epochs_flat: epochs,
        epochs_decay: 0,
        image_buffer: 3,
        ..TrainConfig::default()
    };
    Trainer::new(spec, &ArchConfig::tiny(), &cfg).unwrap()
}

fn same_params(a: &Trainer<f32>, b: &Trainer<f32>) -> bool {
    a.gen.store().tensors() == b.gen.store().tensors()
        && a.dset.members().iter().zip(b.dset.members()).all(|(x, y)| x.store().tensors() == y.store().tensors())
}

#[test]
fn seeded_runs_write_identical_loss_csvs() {
    let (spec, ds) = tiny_data(3, 12);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let csvs: Vec<String> = dirs
        .iter()
        .map(|d| {
            let mut t = tiny_trainer(&spec, 7, 1);
            let opts = FitOptions {
                augment: true,
                out_dir: Some(d.path().to_path_buf()),
                max_iterations: Some(10),
                ..FitOptions::default()
            };
            objective::fit(&mut t, &ds, &opts, &mut NoCallback).unwrap();
            std::fs::read_to_string(d.path().join("loss_history.csv")).unwrap()
        })
        .collect();
    assert_eq!(csvs[0].lines().count(), 11);
    assert_eq!(csvs[0], csvs[1]);
    let mut other = tiny_trainer(&spec, 8, 1);
    let h = objective::fit(&mut other, &ds, &FitOptions { max_iterations: Some(10), ..FitOptions::default() }, &mut NoCallback).unwrap();
    let rows: Vec<String> = h.iter().map(objective::LossCsv::row).collect();
    assert_ne!(rows.join("\n"), csvs[0].lines().skip(1).collect::<Vec<_>>().join("\n"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (spec, ds) = tiny_data(3, 6);
    let mut t = tiny_trainer(&spec, 1, 1);
    objective::fit(&mut t, &ds, &FitOptions::default(), &mut NoCallback).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_trainer(&t, dir.path(), true).unwrap();
    let back = checkpoint::load_trainer::<f32>(dir.path()).unwrap();
    assert!(same_params(&t, &back));
    assert_eq!(back.gen_opt, t.gen_opt);
    assert_eq!(back.disc_opts, t.disc_opts);
    assert_eq!(back.pools, t.pools);
    assert_eq!((back.epoch, back.iteration), (t.epoch, t.iteration));
    assert_eq!(back.cfg, t.cfg);
    assert_eq!(back.spec, t.spec);

    // Without optimizer state only parameters come back.
    let dir2 = tempfile::tempdir().unwrap();
    checkpoint::save_trainer(&t, dir2.path(), false).unwrap();
    let light = checkpoint::load_trainer::<f32>(dir2.path()).unwrap();
    assert!(same_params(&t, &light));
    assert_eq!(light.gen_opt.steps, 0);
}

#[test]
fn truncated_array_is_named_in_the_error() {
    let (spec, _) = tiny_data(2, 1);
    let t = tiny_trainer(&spec, 1, 1);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_trainer(&t, dir.path(), false).unwrap();
    let victim = dir.path().join("generator.dec.c7.weight.f32");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let err = checkpoint::load_trainer::<f32>(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("generator.dec.c7.weight"), "{err}");
}

#[test]
fn resuming_at_an_epoch_boundary_matches_an_uninterrupted_run() {
    let (spec, ds) = tiny_data(2, 5);
    let mut straight = tiny_trainer(&spec, 4, 2);
    let h_straight = objective::fit(&mut straight, &ds, &FitOptions { augment: true, ..FitOptions::default() }, &mut NoCallback).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = tiny_trainer(&spec, 4, 2);
    let opts = FitOptions {
        augment: true,
        out_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 1,
        ..FitOptions::default()
    };
    let mut h = objective::fit(&mut first, &ds, &FitOptions { max_iterations: Some(5), ..opts.clone() }, &mut NoCallback).unwrap();
    assert_eq!(first.epoch, 1);
    let mut resumed = checkpoint::load_trainer::<f32>(&dir.path().join("checkpoints/epoch_0001")).unwrap();
    h.extend(objective::fit(&mut resumed, &ds, &opts, &mut NoCallback).unwrap());
    assert_eq!(h, h_straight);
    assert!(same_params(&straight, &resumed));
    assert!(dir.path().join("final/manifest.json").exists());
}

#[test]
fn one_step_generates_n_squared_fakes() {
    for n in [2, 3, 4] {
        let (spec, ds) = tiny_data(n, 2);
        let mut t = tiny_trainer(&spec, 0, 1);
        let mut r = rng::stream(0, "batches", 0);
        let batches: Vec<_> = ds.iter().map(|d| data::sample_batch::<f32>(d, 2, &mut r, false).unwrap()).collect();
        let rep = t.train_step(&batches, 2e-4, &mut r).unwrap();
        assert_eq!(rep.fakes_per_domain, vec![2 * n; n]);
        assert_eq!(rep.fakes_generated(), 2 * n * n);
        assert_eq!(rep.encode_calls, n);
        assert_eq!(rep.decode_calls, n * n);
        assert_eq!(rep.losses.loop_.len(), n);
        assert_eq!(rep.losses.adv_d.len(), n);
    }
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let (spec, ds) = tiny_data(2, 3);
    let mut t = tiny_trainer(&spec, 0, 1);
    let id = t.gen.store().id("dec.c7.bias").unwrap();
    t.gen.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let before = t.clone();
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..FitOptions::default()
    };
    let err = objective::fit(&mut t, &ds, &opts, &mut NoCallback).unwrap_err();
    assert!(matches!(err, Error::NonFinite { iteration: 0, .. }), "{err}");
    assert_eq!(t.iteration, 0);
    assert_eq!(t.gen_opt, before.gen_opt);
    assert!(dir.path().join("nonfinite_dump/manifest.json").exists());
}

#[test]
fn training_reduces_loop_error_on_tiny_problem() {
    let (spec, ds) = tiny_data(2, 4);
    let mut t = tiny_trainer(&spec, 0, 30);
    let before = loopgan::eval::loop_reconstruction_error(&t.gen, &ds, &spec).unwrap().overall;
    let cfg = TrainConfig { learning_rate: 2e-3, ..t.cfg.clone() };
    t.cfg = cfg;
    objective::fit(&mut t, &ds, &FitOptions::default(), &mut NoCallback).unwrap();
    let after = loopgan::eval::loop_reconstruction_error(&t.gen, &ds, &spec).unwrap().overall;
    assert!(after < before * 0.7, "{before} -> {after}");
}
