use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{Tape, Tensor};
use crate::error::Error;
use crate::graphnet::{GraphContext, SkeletonTopology};

fn tiny_config(gnn: GnnKind) -> ModelConfig {
    ModelConfig {
        stages: 2,
        gnn,
        heads: 2,
        hidden: 4,
        seq_len: 3,
        n_nodes: 3,
        input_dim: 2,
        classes: 3,
        dropout: 0.0,
        norm_epsilon: 1e-5,
        classifier_width: None,
        leaky_slope: 0.2,
    }
}

fn random_batch(config: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> SequenceBatch {
    let (t, n, d) = (config.seq_len, config.n_nodes, config.input_dim);
    let data = (0..b * t * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::new(vec![b, t, n, d], data).unwrap();
    let labels = (0..b).map(|i| i % config.classes).collect();
    SequenceBatch::new(features, vec![true; b * t], labels).unwrap()
}

fn run(params: &ModelParams, config: &ModelConfig, batch: &SequenceBatch, graph: &GraphContext) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model_forward(&mut tape, &vars, config, batch, graph, false, &mut rng).unwrap();
    (tape.value(out.logits).clone(), tape.value(out.attention).clone())
}

#[test]
fn forward_shapes_for_both_spatial_layers() {
    for gnn in [GnnKind::Gcn, GnnKind::Gat] {
        let config = tiny_config(gnn);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let graph = GraphContext::new(SkeletonTopology::chain(3).unwrap()).unwrap();
        let batch = random_batch(&config, 5, &mut rng);
        let (logits, attn) = run(&params, &config, &batch, &graph);
        assert_eq!(logits.shape(), &[5, 3]);
        assert_eq!(attn.shape(), &[5, 3]);
        for row in attn.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn parameter_names_are_canonical() {
    let config = tiny_config(GnnKind::Gat);
    let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let names = params.names();
    assert_eq!(&names[..2], &["embed.weight", "embed.bias"]);
    assert!(names.contains(&"stage1.gat.attn".to_string()));
    assert!(names.contains(&"stage0.gru.w_z".to_string()));
    assert_eq!(names.last().unwrap(), "out.bias");
    let unique: std::collections::BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
}

#[test]
fn zero_classifier_gives_uniform_loss() {
    let config = tiny_config(GnnKind::Gat);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ModelParams::init(&config, &mut rng).unwrap();
    params.out_w = Tensor::zeros(params.out_w.shape().to_vec());
    let graph = GraphContext::new(SkeletonTopology::chain(3).unwrap()).unwrap();
    let batch = random_batch(&config, 4, &mut rng);

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = model_forward(&mut tape, &vars, &config, &batch, &graph, false, &mut rng).unwrap();
    let loss = cross_entropy_loss(&mut tape, out.logits, &batch.labels).unwrap();
    assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() <= 1e-12);

    for p in predict(tape.value(out.logits)).unwrap() {
        assert_eq!(p.class, 0);
        assert!((p.probability - 1.0 / 3.0).abs() <= 1e-12);
    }
}

#[test]
fn equal_scores_pool_to_temporal_mean() {
    let mut tape = Tape::new();
    let frames: Vec<_> = (0..4)
        .map(|t| tape.constant(Tensor::full(vec![2 * 3, 2], t as f64)))
        .collect();
    let seq = FrameSeq {
        frames,
        batch: 2,
        n_nodes: 3,
    };
    let w = tape.constant(Tensor::zeros(vec![6, 1]));
    let b = tape.constant(Tensor::scalar(0.7).reshape(vec![1]).unwrap());
    let pooled = temporal_attention_pool(&mut tape, w, b, &seq, &[true; 8]).unwrap();
    for &a in tape.value(pooled.weights).data() {
        assert!((a - 0.25).abs() <= 1e-12);
    }
    for &v in tape.value(pooled.features).data() {
        assert!((v - 1.5).abs() <= 1e-12);
    }
}

#[test]
fn masked_frames_have_no_influence() {
    let config = tiny_config(GnnKind::Gat);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let graph = GraphContext::new(SkeletonTopology::chain(3).unwrap()).unwrap();
    let base = random_batch(&config, 2, &mut rng);
    let mut mask = base.mask.clone();
    mask[2] = false;
    mask[5] = false;
    let masked = SequenceBatch::new(base.features.clone(), mask.clone(), base.labels.clone()).unwrap();
    let (logits, attn) = run(&params, &config, &masked, &graph);
    assert_eq!(attn.data()[2], 0.0);
    assert_eq!(attn.data()[5], 0.0);

    let mut features = base.features.clone();
    for s in 0..2 {
        for n in 0..3 {
            for d in 0..2 {
                features.set(&[s, 2, n, d], 1e3 * rng.gen_range(-1.0..1.0));
            }
        }
    }
    let perturbed = SequenceBatch::new(features, mask, base.labels.clone()).unwrap();
    let (logits2, _) = run(&params, &config, &perturbed, &graph);
    assert!(logits.bit_eq(&logits2));
}

#[test]
fn fully_masked_sample_is_rejected() {
    let features = Tensor::zeros(vec![1, 2, 3, 2]);
    let err = SequenceBatch::new(features, vec![false, false], vec![0]).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn out_of_range_label_is_rejected() {
    let config = tiny_config(GnnKind::Gcn);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let graph = GraphContext::new(SkeletonTopology::chain(3).unwrap()).unwrap();
    let mut batch = random_batch(&config, 2, &mut rng);
    batch.labels[1] = 3;
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let err = model_forward(&mut tape, &vars, &config, &batch, &graph, false, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn predict_breaks_ties_toward_lowest_index() {
    let logits = Tensor::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.0, 0.0, -1.0]]).unwrap();
    let preds = predict(&logits).unwrap();
    assert_eq!(preds[0].class, 1);
    assert_eq!(preds[1].class, 0);
}

#[test]
fn dropout_is_inactive_at_inference() {
    let mut config = tiny_config(GnnKind::Gat);
    config.dropout = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(&config, &mut rng).unwrap();
    let graph = GraphContext::new(SkeletonTopology::chain(3).unwrap()).unwrap();
    let batch = random_batch(&config, 3, &mut rng);
    let (a, _) = run(&params, &config, &batch, &graph);
    let (b, _) = run(&params, &config, &batch, &graph);
    assert!(a.bit_eq(&b));
}

#[test]
fn config_validation_messages() {
    let mut c = tiny_config(GnnKind::Gat);
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("heads")));
    let mut c = tiny_config(GnnKind::Gat);
    c.classes = 1;
    assert!(c.validate().is_err());
    let mut c = tiny_config(GnnKind::Gcn);
    c.heads = 3;
    assert!(c.validate().is_ok());
}

mod checkpoints {
    use super::*;

    fn fixture(config: &ModelConfig) -> (ModelParams, SkeletonTopology, tempfile::TempDir) {
        let params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (params, SkeletonTopology::chain(config.n_nodes).unwrap(), tempfile::tempdir().unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let config = tiny_config(GnnKind::Gat);
        let (params, topo, dir) = fixture(&config);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config, &topo).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.params.bit_eq(&params));
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.topology_fingerprint, topo.fingerprint());
        loaded.check_compatible(&config, &topo).unwrap();
    }

    #[test]
    fn truncation_is_reported_as_corruption() {
        let config = tiny_config(GnnKind::Gcn);
        let (params, topo, dir) = fixture(&config);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config, &topo).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 12, 40, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch() {
        let config = tiny_config(GnnKind::Gcn);
        let (params, topo, dir) = fixture(&config);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config, &topo).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn class_count_mismatch_names_both_values() {
        let mut config = tiny_config(GnnKind::Gat);
        config.classes = 226;
        let (params, topo, dir) = fixture(&config);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config, &topo).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut other = config.clone();
        other.classes = 200;
        let msg = loaded.check_compatible(&other, &topo).unwrap_err().to_string();
        assert!(msg.contains("226") && msg.contains("200"), "{msg}");
    }

    #[test]
    fn topology_mismatch_is_incompatible() {
        let config = tiny_config(GnnKind::Gat);
        let (params, topo, dir) = fixture(&config);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, &config, &topo).unwrap();
        let other = SkeletonTopology::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let err = load_checkpoint(&path).unwrap().check_compatible(&config, &other).unwrap_err();
        assert!(matches!(err, Error::Incompatible(m) if m.contains("topology")));
    }

    #[test]
    fn saving_mismatched_params_fails() {
        let config = tiny_config(GnnKind::Gat);
        let (params, topo, dir) = fixture(&config);
        let mut other = config.clone();
        other.hidden = 6;
        let err = save_checkpoint(&dir.path().join("x"), &params, &other, &topo).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
    }
}

mod whole_model_gradients {
    use super::*;

    #[test]
    fn reference_model_passes() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let report = model_gradcheck(&reference_config(), &topo, 7, MODEL_GRADCHECK_EPS, None).unwrap();
        let worst = report.worst();
        assert!(
            report.passed(MODEL_GRADCHECK_TOL),
            "{} {:?}",
            worst.name,
            worst.report
        );
        let again = model_gradcheck(&reference_config(), &topo, 7, MODEL_GRADCHECK_EPS, None).unwrap();
        assert_eq!(report.max_rel_error().to_bits(), again.max_rel_error().to_bits());
    }

    #[test]
    fn gcn_variant_passes() {
        let mut config = reference_config();
        config.gnn = GnnKind::Gcn;
        let topo = SkeletonTopology::chain(3).unwrap();
        let report = model_gradcheck(&config, &topo, 8, MODEL_GRADCHECK_EPS, None).unwrap();
        assert!(report.passed(MODEL_GRADCHECK_TOL), "{:?}", report.worst());
    }

    #[test]
    fn injected_fault_is_named() {
        let topo = SkeletonTopology::chain(3).unwrap();
        let fault = GradientFault {
            param: "stage1.gru.w_r".into(),
            offset: 1e-2,
        };
        let report = model_gradcheck(&reference_config(), &topo, 7, MODEL_GRADCHECK_EPS, Some(&fault)).unwrap();
        assert!(!report.passed(MODEL_GRADCHECK_TOL));
        assert_eq!(report.worst().name, "stage1.gru.w_r");
    }
}
