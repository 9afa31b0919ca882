use std::fs;

use cib::data_io::{
    checkpoint_from_str, load_checkpoint, load_dataset, load_splits, read_idx, read_metrics,
    save_checkpoint, save_dataset, tradeoff_to_csv, write_idx, write_metrics, Config,
    DecoderVariant, NoiseModeKind, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, TRADEOFF_HEADER,
};
use cib::model::{evaluate_with_config, tradeoff_point, train, Checkpoint, Network};
use cib::Error;

fn short_config(variant: DecoderVariant) -> Config {
    let mut c = Config::reference_gmm(0.5);
    c.decoder.variant = variant;
    c.optim.steps = 20;
    c.eval.log_every = 5;
    c
}

#[test]
fn checkpoint_file_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [DecoderVariant::Softmax, DecoderVariant::NaiveBayes] {
        let config = short_config(variant);
        let splits = load_splits(&config).unwrap();
        let run = train(&config, &splits).unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        save_checkpoint(&a, &Checkpoint::new(config.clone(), run.network.clone())).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(loaded.network(), run.network);

        let before = evaluate_with_config(&run.network, &config, &splits.test).unwrap();
        let after = evaluate_with_config(&loaded.network(), &loaded.config, &splits.test).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn checkpoint_rejects_unknown_version_and_bad_shapes() {
    let config = short_config(DecoderVariant::Softmax);
    let splits = load_splits(&config).unwrap();
    let priors = cib::gaussians::empirical_priors(splits.train.labels(), 2).unwrap();
    let net = Network::init(&config, priors).unwrap();
    let text = cib::data_io::checkpoint_to_string(&Checkpoint::new(config, net)).unwrap();

    let v2 = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(
        checkpoint_from_str(&v2),
        Err(Error::UnsupportedVersion(2))
    ));

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["config"]["encoder"]["layer_dims"] = serde_json::json!([2, 8, 2]);
    assert!(matches!(
        checkpoint_from_str(&doc.to_string()),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn naive_bayes_head_adds_no_parameters() {
    let mut config = short_config(DecoderVariant::NaiveBayes);
    config.encoder.noise_mode = NoiseModeKind::LearnedEta;
    config.encoder.sigma2 = 1e-4;
    let net = Network::init(&config, vec![0.5, 0.5]).unwrap();
    let store = net.pack(true).unwrap();
    let encoder = net.encoder.params().len();
    let (k, d) = (2, 2);
    assert_eq!(store.len(), encoder + k * d + k);
    assert!(store.layout().iter().all(|s| !s.name.starts_with("dec.")));
}

#[test]
fn idx_files_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 37 % 256) as u8).collect();
    write_idx(&ip, IDX_IMAGES_MAGIC, &[3, 2, 2], &pixels).unwrap();
    write_idx(&lp, IDX_LABELS_MAGIC, &[3], &[2, 0, 1]).unwrap();
    let d = read_idx(&ip, &lp).unwrap();
    let back: Vec<u8> = d
        .features()
        .iter()
        .flatten()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    assert_eq!(back, pixels);
    assert_eq!(d.class_count(), 3);

    let (ip2, lp2) = (dir.path().join("img2"), dir.path().join("lbl2"));
    write_idx(&ip2, IDX_IMAGES_MAGIC, &[3, 2, 2], &back).unwrap();
    let labels: Vec<u8> = d.labels().iter().map(|&y| y as u8).collect();
    write_idx(&lp2, IDX_LABELS_MAGIC, &[3], &labels).unwrap();
    assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
    assert_eq!(fs::read(&lp).unwrap(), fs::read(&lp2).unwrap());

    fs::write(&ip2, [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    assert!(matches!(read_idx(&ip2, &lp), Err(Error::IdxMagic { .. })));
    assert!(matches!(
        read_idx(&dir.path().join("absent"), &lp),
        Err(Error::Io { .. })
    ));
}

#[test]
fn dataset_json_roundtrip() {
    let config = short_config(DecoderVariant::Softmax);
    let splits = load_splits(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.json");
    save_dataset(&p, &splits.train).unwrap();
    assert_eq!(load_dataset(&p).unwrap(), splits.train);
    let bayes = splits.train.provenance().bayes_error.unwrap();
    assert!((bayes - 0.022_750_131_948_179_2).abs() < 1e-12, "{bayes:e}");
}

#[test]
fn metrics_file_roundtrip_and_steps() {
    let config = short_config(DecoderVariant::NaiveBayes);
    let splits = load_splits(&config).unwrap();
    let run = train(&config, &splits).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("metrics.csv");
    write_metrics(&p, &run.metrics).unwrap();
    assert_eq!(read_metrics(&p).unwrap(), run.metrics);
    let steps: Vec<usize> = run.metrics.iter().map(|m| m.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 15, 20]);
}

#[test]
fn tradeoff_csv_is_sorted_and_header_only_when_empty() {
    assert_eq!(
        tradeoff_to_csv(&[]).unwrap(),
        format!("{TRADEOFF_HEADER}\n").into_bytes()
    );
    let config = short_config(DecoderVariant::NaiveBayes);
    let splits = load_splits(&config).unwrap();
    let run = train(&config, &splits).unwrap();
    let p = tradeoff_point(&run.network, &config, &splits).unwrap();
    let mut points = Vec::new();
    for bp in [3.0, 0.0, 10.0, 1.0, 0.3] {
        points.push(cib::model::TradeoffPoint {
            beta_prime: bp,
            ..p.clone()
        });
    }
    let text = String::from_utf8(tradeoff_to_csv(&points).unwrap()).unwrap();
    let order: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(order, vec![0.0, 0.3, 1.0, 3.0, 10.0]);
}

#[test]
fn json_dataset_source_matches_generated_splits() {
    let config = short_config(DecoderVariant::Softmax);
    let splits = load_splits(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = (dir.path().join("train.json"), dir.path().join("test.json"));
    save_dataset(&tr, &splits.train).unwrap();
    save_dataset(&te, &splits.test).unwrap();
    let mut from_files = config.clone();
    from_files.dataset.source = cib::data_io::DatasetSource::Json {
        train: tr,
        test: te,
    };
    assert_eq!(load_splits(&from_files).unwrap(), splits);
    assert_eq!(
        train(&from_files, &splits).unwrap(),
        train(&config, &splits).unwrap()
    );
}
