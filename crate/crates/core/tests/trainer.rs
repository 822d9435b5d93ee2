use ugsp::checkpoint::Checkpoint;
use ugsp::data::SynthSpec;
use ugsp::trainer::{TrainConfig, UenTrainer, VfiTrainer};
use ugsp::uen::{load_labels, save_labels};
use ugsp::Error;

fn tiny() -> TrainConfig {
    TrainConfig::from_kv(
        "phase1_epochs = 2\nphase2_epochs = 2\nsteps_per_epoch = 2\nbatch_size = 2\npatch = 32\n\
         width_mult = 0.125\nsparse_convs = 2\nlr_start = 1e-3\nlr_end = 1e-4\n\
         synth_count = 6\nsynth_height = 48\nsynth_width = 48\nsynth_max_disp = 4\n\
         lambda_s = 0.1\nlambda_ugm = 0.1\nlambda_sc = 0.1\nseed = 5\nfinite_checks = true\n",
    )
    .unwrap()
}

fn bits(ck: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    ck.entries
        .iter()
        .map(|e| (e.name.clone(), e.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn two_phase_pipeline_runs_and_logs_finite_losses() {
    let cfg = tiny();
    let ds = cfg.dataset().unwrap();
    let mut p1 = UenTrainer::<f32>::new(cfg.clone()).unwrap();
    let mut seen = 0;
    let logs = p1.run(&ds, &mut |_| seen += 1).unwrap();
    assert_eq!(logs.len(), 4);
    assert_eq!(seen, 4);
    assert!(logs.iter().all(|l| l.parts.total.is_finite() && l.phase == 1));

    let labels = p1.labels(&ds, cfg.alphas()).unwrap();
    assert_eq!(labels.len(), ds.len());
    // A barely trained UEN yields tied uncertainty values, which `U > T`
    // drops; the exact 1/HW bound for distinct values is a property test.
    for l in &labels {
        for (p, want) in l.planes.iter().zip([0.8, 0.6, 0.2]) {
            assert!((p.density() - want).abs() <= 0.01, "{} vs {want}", p.density());
        }
    }

    let mut p2 = VfiTrainer::<f32>::new(cfg.clone(), Some(labels)).unwrap();
    let logs = p2.run(&ds, &mut |_| {}).unwrap();
    assert_eq!(logs.len(), 4);
    for l in &logs {
        assert!(l.parts.all_finite());
        let d = l.densities.unwrap();
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(l.parts.ugm > 0.0 && l.parts.self_contrast > 0.0);
        assert!(l.to_string().contains("L_rec="));
    }
}

#[test]
fn phase_two_requires_labels_for_every_sample() {
    let cfg = tiny();
    assert!(matches!(VfiTrainer::<f32>::new(cfg.clone(), None), Err(Error::Contract { .. })));
    let ds = cfg.dataset().unwrap();
    let p1 = UenTrainer::<f32>::new(cfg.clone()).unwrap();
    let mut labels = p1.labels(&ds, cfg.alphas()).unwrap();
    labels.retain(|l| l.sample_id != 3);
    let mut p2 = VfiTrainer::<f32>::new(cfg.clone(), Some(labels)).unwrap();
    assert!(matches!(p2.run(&ds, &mut |_| {}), Err(Error::MissingLabel(3))));

    let mut dense = cfg;
    dense.dense_only = true;
    let mut t = VfiTrainer::<f32>::new(dense, None).unwrap();
    let l = t.train_step(&ds).unwrap();
    assert!(l.densities.is_none());
    assert_eq!(l.parts.total, l.parts.rec);
}

#[test]
fn resume_from_checkpoint_file_is_bit_exact() {
    let cfg = tiny();
    let ds = cfg.dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut straight = UenTrainer::<f32>::new(cfg.clone()).unwrap();
    straight.run(&ds, &mut |_| {}).unwrap();

    let mut first = UenTrainer::<f32>::new(cfg.clone()).unwrap();
    first.train_step(&ds).unwrap();
    first.train_step(&ds).unwrap();
    let path = dir.path().join("uen.ckpt");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = UenTrainer::<f32>::from_checkpoint(cfg.clone(), &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    resumed.run(&ds, &mut |_| {}).unwrap();
    assert_eq!(bits(&resumed.checkpoint()), bits(&straight.checkpoint()));

    let labels = straight.labels(&ds, cfg.alphas()).unwrap();
    let lpath = dir.path().join("labels.bin");
    save_labels(&lpath, &labels).unwrap();
    let labels = load_labels(&lpath).unwrap();

    let mut straight = VfiTrainer::<f32>::new(cfg.clone(), Some(labels.clone())).unwrap();
    straight.run(&ds, &mut |_| {}).unwrap();
    let mut first = VfiTrainer::<f32>::new(cfg.clone(), Some(labels.clone())).unwrap();
    first.train_step(&ds).unwrap();
    first.train_step(&ds).unwrap();
    first.train_step(&ds).unwrap();
    let path = dir.path().join("vfi.ckpt");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = VfiTrainer::<f32>::from_checkpoint(cfg, Some(labels), &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(&ds, &mut |_| {}).unwrap();
    assert_eq!(bits(&resumed.checkpoint()), bits(&straight.checkpoint()));
}

#[test]
fn checkpoint_of_the_other_network_is_rejected() {
    let mut cfg = tiny();
    cfg.dense_only = true;
    let uen = UenTrainer::<f32>::new(cfg.clone()).unwrap();
    let r = VfiTrainer::<f32>::from_checkpoint(cfg, None, &uen.checkpoint());
    assert!(matches!(r, Err(Error::Load(_))));
}

#[test]
fn synthetic_spec_is_validated() {
    let mut cfg = tiny();
    cfg.synth = SynthSpec {
        height: 40,
        ..cfg.synth
    };
    let ds = cfg.dataset().unwrap();
    assert!(ds.get::<f32>(0).is_err());
}
