mod common;

use std::path::Path;

use candle_core::{Device, Tensor};
use scat_core::losses::{self, LossReport};
use scat_core::mask::{compose, corrupt};
use scat_core::nn::{Mode, Registry};
use scat_core::trainer::{
    build_schedule, checkpoint_path, config_echo_path, fit, fit_with, latest_checkpoint_path,
    Ablation, Batch, FitOptions, TrainConfig, TrainState,
};
use scat_core::Error;

fn dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    scat_core::synthetic::write_texture_dataset(&data, 4, 32, 11).unwrap();
    data
}

fn config(dir: &Path, ablation: Ablation, max_steps: u64) -> TrainConfig {
    let mut c = common::tiny_config(&dataset(dir), &dir.join("out"), ablation);
    c.max_steps = max_steps;
    c
}

fn values(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .into_iter()
        .map(f32::to_bits)
        .collect()
}

fn same(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| values(x) == values(y))
}

fn snapshot(r: &Registry) -> Vec<Tensor> {
    r.snapshot().unwrap()
}

fn first_batch(c: &TrainConfig) -> Batch {
    build_schedule(c, &Device::Cpu).unwrap().batch(0, &Device::Cpu).unwrap()
}

#[test]
fn updates_touch_only_their_own_networks() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 1);
    let mut state = TrainState::new(&c, &Device::Cpu).unwrap();
    let batch = first_batch(&c);
    let g0 = snapshot(state.generator().registry());
    let d0 = snapshot(state.discriminator().registry());
    let s0 = snapshot(state.segmenter().unwrap().registry());
    let mut mid = None;
    state
        .train_step_observed(&batch, |st| {
            assert!(same(&snapshot(st.generator().registry()), &g0), "G moved during the (D, S) step");
            mid = Some((
                snapshot(st.discriminator().registry()),
                snapshot(st.segmenter().unwrap().registry()),
            ));
        })
        .unwrap();
    let (d1, s1) = mid.unwrap();
    assert!(!same(&d1, &d0), "D did not change");
    assert!(!same(&s1, &s0), "S did not change");
    assert!(!same(&snapshot(state.generator().registry()), &g0), "G did not change");
    assert!(same(&snapshot(state.discriminator().registry()), &d1), "D moved during the G step");
    assert!(same(&snapshot(state.segmenter().unwrap().registry()), &s1), "S moved during the G step");
}

#[test]
fn ablations_zero_their_terms() {
    let dir = tempfile::tempdir().unwrap();
    for ablation in Ablation::ALL {
        let c = config(dir.path(), ablation, 1);
        let mut state = TrainState::new(&c, &Device::Cpu).unwrap();
        let r = state.train_step(&first_batch(&c)).unwrap();
        let scat = ablation != Ablation::Baseline;
        let text = matches!(ablation, Ablation::PlusText | Ablation::Full);
        let sem = ablation == Ablation::Full;
        assert_eq!(state.segmenter().is_some(), scat, "{ablation:?}");
        assert_eq!(r.scat_s != 0.0, scat, "{ablation:?} {r:?}");
        assert_eq!(r.scat_g != 0.0, scat, "{ablation:?} {r:?}");
        assert_eq!(r.contra_text != 0.0, text, "{ablation:?} {r:?}");
        assert_eq!(r.contra_sem != 0.0, sem, "{ablation:?} {r:?}");
        let w = c.effective_weights();
        assert_eq!(w.lambda_text > 0.0, text);
        assert_eq!(w.lambda_sem > 0.0, sem);
    }
}

#[test]
fn every_loss_reaches_every_generator_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 1);
    let state = TrainState::new(&c, &Device::Cpu).unwrap();
    let schedule = build_schedule(&c, &Device::Cpu).unwrap();
    let w = c.effective_weights();
    let (g, d, s) = (state.generator(), state.discriminator(), state.segmenter().unwrap());
    let params = g.registry().params();
    let names = ["adv_G", "scat_G", "contra_text", "contra_sem", "rec"];
    let mut reached = vec![vec![false; params.len()]; names.len()];
    for step in 0..3 {
        let batch = schedule.batch(step, &Device::Cpu).unwrap();
        let (x, m) = (&batch.images, &batch.masks);
        let b = x.dim(0).unwrap();
        let x_tilde = corrupt(x, m).unwrap();
        let x_hat = g.forward(&x_tilde, m).unwrap();
        let x_bar = compose(&x_hat, &x_tilde, m).unwrap();
        let fake = d.forward(&x_bar, Mode::Frozen).unwrap();
        let mut refs = vec![x.clone(), x_tilde.clone()];
        for nm in &batch.negative_masks[..w.num_negatives - 1] {
            refs.push(corrupt(x, nm).unwrap());
        }
        let refs = d.forward(&Tensor::cat(&refs, 0).unwrap(), Mode::Frozen).unwrap();
        let emb = refs.embedding().unwrap();
        let negs: Vec<Tensor> = (0..w.num_negatives)
            .map(|j| emb.narrow(0, (1 + j) * b, b).unwrap())
            .collect();
        let terms = [
            losses::adv_hinge_g(&fake.last).unwrap(),
            losses::scat_loss_g(&s.forward(&x_bar, Mode::Frozen).unwrap().prob).unwrap(),
            losses::textural_contrastive(
                &fake.shallow,
                &refs.narrow(0, b).unwrap().shallow,
                &refs.narrow(b, b).unwrap().shallow,
            )
            .unwrap(),
            losses::semantic_contrastive(
                &fake.embedding().unwrap(),
                &emb.narrow(0, 0, b).unwrap(),
                &Tensor::stack(&negs, 1).unwrap(),
                w.temperature_t,
            )
            .unwrap(),
            losses::reconstruction(&x_hat, x).unwrap(),
        ];
        for (t, term) in terms.iter().enumerate() {
            let grads = term.backward().unwrap();
            for (p, (_, var)) in params.iter().enumerate() {
                if let Some(gr) = grads.get(var.as_tensor()) {
                    let nonzero = gr.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0;
                    reached[t][p] |= nonzero;
                }
            }
        }
    }
    for (t, name) in names.iter().enumerate() {
        for (p, (pname, _)) in params.iter().enumerate() {
            assert!(reached[t][p], "{name} never reaches {pname}");
        }
    }
}

fn stream(c: &TrainConfig, options: &FitOptions) -> Vec<(u64, LossReport)> {
    let mut out = Vec::new();
    fit_with(c, options, |s, r| out.push((s, *r))).unwrap();
    out
}

#[test]
fn identical_seeds_give_identical_streams() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), Ablation::Full, 3);
    let a = stream(&c, &FitOptions::default());
    c.output_dir = dir.path().join("other");
    let b = stream(&c, &FitOptions::default());
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![1, 2, 3]);
    c.seed = 1;
    c.output_dir = dir.path().join("seed1");
    assert_ne!(stream(&c, &FitOptions::default()), a);
}

#[test]
fn resume_continues_the_same_stream() {
    let dir = tempfile::tempdir().unwrap();
    let full = config(dir.path(), Ablation::Full, 4);
    let reference = stream(&full, &FitOptions::default());

    let mut first = full.clone();
    first.max_steps = 2;
    first.output_dir = dir.path().join("split");
    let head = stream(&first, &FitOptions::default());
    assert_eq!(head[..], reference[..2]);

    let mut second = full.clone();
    second.output_dir = first.output_dir.clone();
    let options = FitOptions {
        resume: Some(checkpoint_path(&first.output_dir, 2)),
    };
    let tail = stream(&second, &options);
    assert_eq!(tail[..], reference[2..]);

    // the log holds every step exactly once, in order
    let log = std::fs::read_to_string(scat_core::trainer::log_path(&second.output_dir)).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn log_lines_carry_every_term() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 1);
    fit(&c).unwrap();
    let log = std::fs::read_to_string(scat_core::trainer::log_path(&c.output_dir)).unwrap();
    let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["step", "scat_S", "scat_G", "contra_text", "contra_sem", "adv_D", "adv_G", "rec", "total_G", "total_DS"] {
        assert!(keys.contains(&k), "missing {k} in {keys:?}");
    }
    assert_eq!(keys.len(), 10);
}

fn tensors(path: &Path) -> Vec<(String, Vec<u8>)> {
    let bytes = std::fs::read(path).unwrap();
    let st = safetensors::SafeTensors::deserialize(&bytes).unwrap();
    let mut out: Vec<(String, Vec<u8>)> = st
        .tensors()
        .into_iter()
        .map(|(name, view)| (name, view.data().to_vec()))
        .collect();
    out.sort();
    out
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 2);
    let trained = fit(&c).unwrap();
    let saved = latest_checkpoint_path(&c.output_dir);
    let loaded = TrainState::load_checkpoint(&saved, &Device::Cpu).unwrap();
    assert_eq!(loaded.step(), 2);
    assert!(same(
        &snapshot(loaded.generator().registry()),
        &snapshot(trained.generator().registry())
    ));
    let again = dir.path().join("again.safetensors");
    loaded.save_checkpoint(&again).unwrap();
    let (a, b) = (tensors(&saved), tensors(&again));
    assert!(a.iter().any(|(n, _)| n.starts_with("s.")));
    assert!(a.iter().any(|(n, _)| n.starts_with("opt.ds.")));
    assert_eq!(a, b);
}

#[test]
fn checkpoint_mismatches_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Baseline, 1);
    fit(&c).unwrap();
    let path = latest_checkpoint_path(&c.output_dir);

    let mut bigger = c.clone();
    bigger.image_size = 64;
    assert!(matches!(
        TrainState::resume(&bigger, &path, &Device::Cpu),
        Err(Error::ConfigMismatch(_))
    ));

    let mut full = c.clone();
    full.ablation = Ablation::Full;
    match TrainState::resume(&full, &path, &Device::Cpu) {
        Err(Error::MissingKeys { missing, .. }) => {
            assert!(missing.iter().any(|k| k.starts_with("s.")), "{missing:?}");
        }
        other => panic!("expected missing keys, got {other:?}"),
    }

    let garbage = dir.path().join("garbage.safetensors");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(matches!(
        TrainState::load_checkpoint(&garbage, &Device::Cpu),
        Err(Error::Format { .. })
    ));
}

#[test]
fn zero_steps_only_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 0);
    let state = fit(&c).unwrap();
    assert_eq!(state.step(), 0);
    let echo = std::fs::read_to_string(config_echo_path(&c.output_dir)).unwrap();
    assert_eq!(TrainConfig::from_json(&echo).unwrap(), c);
    assert!(!latest_checkpoint_path(&c.output_dir).exists());
}

#[test]
fn dataset_problems_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), Ablation::Baseline, 1);
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    c.dataset_dir = empty;
    assert!(matches!(fit(&c), Err(Error::Config(_))));
    c.dataset_dir = dir.path().join("absent");
    assert!(matches!(fit(&c), Err(Error::Config(_))));
    c.dataset_dir = dataset(dir.path());
    c.batch_size = 5;
    assert!(matches!(fit(&c), Err(Error::Config(_))));
}

#[test]
fn non_finite_losses_name_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), Ablation::Full, 1);
    let mut state = TrainState::new(&c, &Device::Cpu).unwrap();
    let mut batch = first_batch(&c);
    batch.images = (batch.images * f64::NAN).unwrap();
    match state.train_step(&batch) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn l1_only_training_descends_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), Ablation::Full, 50);
    c.loss_weights.lambda_adv = 0.0;
    c.loss_weights.lambda_text = 0.0;
    c.loss_weights.lambda_sem = 0.0;
    let mut state = TrainState::new(&c, &Device::Cpu).unwrap();
    let batch = first_batch(&c);
    let recs: Vec<f64> = (0..50).map(|_| state.train_step(&batch).unwrap().rec).collect();
    let increases = recs.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(increases <= 5, "{increases} increases: {recs:?}");
    assert!(recs[49] < recs[0]);
}

#[test]
fn long_runs_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("smoke");
    scat_core::synthetic::write_texture_dataset(&data, 16, 64, 0).unwrap();
    for seed in 0..3 {
        let mut c = common::tiny_config(&data, &dir.path().join(format!("run{seed}")), Ablation::Full);
        c.seed = seed;
        c.max_steps = 500;
        c.checkpoint_every = 0;
        c.log_every = 100;
        let mut worst = None;
        fit_with(&c, &FitOptions::default(), |step, r| {
            if worst.is_none() {
                worst = r.first_non_finite().map(|(t, v)| (step, t, v));
            }
        })
        .unwrap();
        assert_eq!(worst, None, "seed {seed}");
    }
}
