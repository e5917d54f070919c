use coseg::data::netpbm::Raster;
use coseg::data::synth::{generate, SynthConfig};
use coseg::data::{save_dataset, SegSample};
use coseg::export::export_heatmaps;
use coseg::model::{predict, Checkpoint};
use coseg::tensor::Tensor;
use coseg::train::{log_path, LoadedModel, RunConfig, StepRecord, Trainer};
use coseg::Error;

fn small_config() -> RunConfig {
    RunConfig {
        num_categories: 3,
        c_feat: 8,
        c_class: 8,
        encoder_widths: vec![6, 8, 8],
        topk_ratio: 0.1,
        image_size: 16,
        batch_size: 3,
        total_steps: 8,
        lr: 1e-3,
        seed: 5,
        ..RunConfig::default()
    }
}

fn samples(n: usize) -> Vec<SegSample> {
    generate(&SynthConfig::new(21, n, 16, 3)).unwrap().0
}

fn param_bits(t: &Trainer<f64>) -> Vec<(String, Vec<u64>)> {
    t.params
        .named()
        .into_iter()
        .map(|(n, v)| (n, v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_weights_follow_the_main_loss_trajectory() {
    let cfg = RunConfig {
        lambda_hm: 0.0,
        lambda_fd: 0.0,
        ..small_config()
    };
    let mut zero = Trainer::<f64>::new(cfg.clone(), samples(7)).unwrap();
    let mut main = Trainer::<f64>::new(cfg, samples(7)).unwrap();
    main.main_only = true;
    let (rz, rm) = (zero.run(None, None).unwrap(), main.run(None, None).unwrap());
    for (a, b) in rz.iter().zip(&rm) {
        assert_eq!(a.loss.l_total, a.loss.l_main);
        assert_eq!(a, b);
        // the auxiliary terms are still reported
        assert!(a.loss.l_hm > 0.0 && a.loss.l_fd.is_finite());
    }
    for ((n, a), (_, b)) in zero.params.named().into_iter().zip(main.params.named()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn nonzero_weights_change_the_trajectory() {
    let mut full = Trainer::<f64>::new(small_config(), samples(7)).unwrap();
    let mut main = Trainer::<f64>::new(small_config(), samples(7)).unwrap();
    main.main_only = true;
    full.run(Some(2), None).unwrap();
    main.run(Some(2), None).unwrap();
    assert_ne!(param_bits(&full), param_bits(&main));
}

#[test]
fn resume_reproduces_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut whole = Trainer::<f64>::new(small_config(), samples(7)).unwrap();
    let all = whole.run(None, None).unwrap();

    let mut first = Trainer::<f64>::new(small_config(), samples(7)).unwrap();
    let head = first.run(Some(3), None).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();

    let mut second = Trainer::<f64>::new(small_config(), samples(7)).unwrap();
    second.resume_from(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(second.step, 3);
    let tail = second.run(None, None).unwrap();

    let joined: Vec<StepRecord> = head.into_iter().chain(tail).collect();
    assert_eq!(joined.len(), all.len());
    for (a, b) in joined.iter().zip(&all) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        assert_eq!(a.loss.l_total.to_bits(), b.loss.l_total.to_bits());
    }
    assert_eq!(param_bits(&second), param_bits(&whole));
}

#[test]
fn resume_rejects_a_different_model() {
    let first = Trainer::<f64>::new(small_config(), samples(4)).unwrap();
    let ckpt = first.checkpoint().unwrap();
    let mut other = Trainer::<f64>::new(
        RunConfig {
            c_feat: 12,
            ..small_config()
        },
        samples(4),
    )
    .unwrap();
    assert!(matches!(other.resume_from(&ckpt), Err(Error::Checkpoint(_))));
}

#[test]
fn log_lines_carry_every_term() {
    let mut t = Trainer::<f64>::new(small_config(), samples(4)).unwrap();
    let mut buf = Vec::new();
    let recs = t.run(Some(3), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, rec) in lines.iter().zip(&recs) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "lr", "l_total", "l_main", "l_hm", "l_fd"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        assert_eq!(v["step"].as_u64().unwrap() as usize, rec.step);
    }
    // cosine schedule starts at the base rate and decays
    assert_eq!(recs[0].lr, 1e-3);
    assert!(recs[2].lr < recs[1].lr);
    assert!(log_path(std::path::Path::new("a/b.ckpt")).ends_with("b.ckpt.log.jsonl"));
}

#[test]
fn trainer_rejects_bad_inputs() {
    assert!(matches!(
        Trainer::<f64>::new(
            RunConfig {
                batch_size: 0,
                ..small_config()
            },
            samples(2)
        ),
        Err(Error::Config(_))
    ));
    assert!(Trainer::<f64>::new(small_config(), Vec::new()).is_err());
    let mut bad = samples(1);
    bad[0].label[0] = 3;
    assert!(matches!(
        Trainer::<f64>::new(small_config(), bad),
        Err(Error::LabelOutOfRange { .. })
    ));
    let missing = RunConfig {
        train_data: Some("/nonexistent/dir".into()),
        ..small_config()
    };
    assert!(missing.validate().is_err());
}

#[test]
fn config_json_round_trips_and_names_bad_fields() {
    let cfg = small_config();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    let err = RunConfig::from_json(r#"{"lambda_fd": -1, "topk_ratio": 0, "lamda_fd": 1}"#).unwrap_err();
    let msg = err.to_string();
    for key in ["lambda_fd", "topk_ratio", "lamda_fd: unknown key"] {
        assert!(msg.contains(key), "{key} missing in {msg}");
    }
    assert!(RunConfig::from_json("[1, 2]").is_err());
}

#[test]
fn loaded_model_evaluates_like_a_manual_loop() {
    let data = samples(5);
    let mut t = Trainer::<f64>::new(small_config(), data.clone()).unwrap();
    t.run(Some(2), None).unwrap();
    let model = LoadedModel::from_checkpoint(&t.checkpoint().unwrap(), None).unwrap();
    let cm = model.evaluate(&data, 2, None).unwrap();
    assert_eq!(cm.total(), 5 * 16 * 16);

    let mut manual = coseg::metrics::ConfusionMatrix::new(3);
    for s in &data {
        let (x, labels) = coseg::data::collate::<f64>(&[s]).unwrap();
        let (probs, _) = model.infer(x).unwrap();
        manual.accumulate(&predict(&probs), &labels, None).unwrap();
    }
    assert_eq!(cm, manual);
    let foreground: u64 = data
        .iter()
        .map(|s| s.label.iter().filter(|&&l| l != 0).count() as u64)
        .sum();
    assert_eq!(model.evaluate(&data, 5, Some(0)).unwrap().total(), foreground);
}

#[test]
fn export_writes_one_map_per_layer_and_category() {
    let cfg = RunConfig {
        num_categories: 4,
        ..small_config()
    };
    let data4 = generate(&SynthConfig::new(2, 2, 16, 4)).unwrap().0;
    let t = Trainer::<f64>::new(cfg, data4.clone()).unwrap();
    let model = LoadedModel::from_checkpoint(&t.checkpoint().unwrap(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = export_heatmaps(&model, &data4[0], dir.path()).unwrap();
    assert_eq!(written.len(), 2 * 4 + 1);
    assert!(dir.path().join("layer2_class3.pgm").is_file());
    let pred = Raster::read(dir.path().join("pred.pgm")).unwrap();
    assert_eq!((pred.width, pred.height, pred.channels), (16, 16, 1));
    assert!(pred.data.iter().all(|&v| v < 4));
    let heat = Raster::read(dir.path().join("layer1_class0.pgm")).unwrap();
    assert_eq!((heat.width, heat.height), (4, 4));

    let again = tempfile::tempdir().unwrap();
    export_heatmaps(&model, &data4[0], again.path()).unwrap();
    for p in &written {
        let name = p.file_name().unwrap();
        assert_eq!(
            std::fs::read(p).unwrap(),
            std::fs::read(again.path().join(name)).unwrap()
        );
    }
}

#[test]
fn saved_dataset_feeds_the_trainer() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&samples(4), dir.path()).unwrap();
    let cfg = RunConfig {
        train_data: Some(dir.path().to_path_buf()),
        ..small_config()
    };
    cfg.validate().unwrap();
    let loaded = coseg::data::load_dataset(dir.path()).unwrap();
    let mut t = Trainer::<f32>::new(cfg, loaded).unwrap();
    let recs = t.run(Some(2), None).unwrap();
    assert!(recs.iter().all(|r| r.loss.l_total.is_finite()));
    let ckpt = t.checkpoint().unwrap();
    let p: &Tensor<f32> = ckpt.get("embeddings").unwrap();
    assert!(p.data().iter().all(|v| v.is_finite()));
}
