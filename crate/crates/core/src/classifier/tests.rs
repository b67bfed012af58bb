use super::*;
use crate::data::synth::{generate_synthetic_volume, SyntheticSpec};
use crate::nn::encoder::init_params;
use crate::rng::{rng_for, stream};
use rand::Rng;

fn tiny_encoder() -> (EncoderConfig, ParameterSet) {
    let cfg = EncoderConfig::with_dim(8);
    let params = init_params(&cfg, &mut rng_for(1, stream::PARAM_INIT, 0)).unwrap();
    (cfg, params)
}

fn tiny_classifier(feature_dim: usize) -> (ClassifierConfig, ParameterSet) {
    let config = ClassifierConfig {
        hidden: 6,
        layers: 1,
        ..ClassifierConfig::new(feature_dim)
    };
    let params =
        init_classifier_params(&config, &mut rng_for(2, stream::CLASSIFIER_INIT, 0)).unwrap();
    (config, params)
}

fn random_stack(seed: u64, shape: [usize; 3]) -> SliceStack {
    let mut rng = rng_for(seed, stream::FINETUNE_BATCH, 0);
    let n = shape[0] * shape[1] * shape[2];
    SliceStack::new(shape, format!("p{seed}"), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
        .unwrap()
}

fn random_seq(seed: u64, t_len: usize, dim: usize) -> SequenceFeatures {
    let mut rng = rng_for(seed, stream::FINETUNE_BATCH, 1);
    SequenceFeatures {
        t_len,
        dim,
        rows: (0..t_len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn sequence_features_are_rowwise_slice_encodings() {
    let (enc_cfg, backbone) = tiny_encoder();
    let stack = random_stack(5, [3, 6, 6]);
    let seq = extract_sequence_features(&backbone, &enc_cfg, &stack).unwrap();
    assert_eq!((seq.t_len, seq.dim), (3, 8));
    for t in 0..3 {
        let direct = encoder::encode_slice(&backbone, &enc_cfg, 6, 6, stack.slice(t)).unwrap();
        assert_eq!(seq.row(t), direct.as_slice());
    }
    // T = 1 degenerates to a single encode_slice row.
    let single = random_stack(6, [1, 6, 6]);
    let seq1 = extract_sequence_features(&backbone, &enc_cfg, &single).unwrap();
    assert_eq!(seq1.t_len, 1);
    assert_eq!(
        seq1.row(0),
        encoder::encode_slice(&backbone, &enc_cfg, 6, 6, single.slice(0)).unwrap().as_slice()
    );
}

#[test]
fn permuting_slices_permutes_rows() {
    let (enc_cfg, backbone) = tiny_encoder();
    let stack = random_stack(7, [4, 5, 5]);
    let seq = extract_sequence_features(&backbone, &enc_cfg, &stack).unwrap();
    // Rebuild the stack with slices reversed.
    let mut values = Vec::new();
    for t in (0..4).rev() {
        values.extend_from_slice(stack.slice(t));
    }
    let reversed = SliceStack::new([4, 5, 5], "p", values).unwrap();
    let seq_rev = extract_sequence_features(&backbone, &enc_cfg, &reversed).unwrap();
    for t in 0..4 {
        assert_eq!(seq.row(t), seq_rev.row(3 - t));
    }
}

#[test]
fn forward_outputs_valid_probabilities() {
    let (config, params) = tiny_classifier(8);
    let seq = random_seq(9, 5, 8);
    let trace = forward_classifier(&config, &params, &seq).unwrap();
    trace.prediction.validate().unwrap();
    for organ in Organ::ALL {
        let sum: f64 = trace.prediction.probs[organ.index()].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_heads_predict_uniform() {
    let (config, mut params) = tiny_classifier(8);
    for organ in Organ::ALL {
        params.get_mut(&head_name(organ, "w")).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        params.get_mut(&head_name(organ, "b")).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    }
    let seq = random_seq(10, 4, 8);
    let trace = forward_classifier(&config, &params, &seq).unwrap();
    for organ in Organ::ALL {
        for c in 0..3 {
            assert!((trace.prediction.probs[organ.index()][c] - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}

#[test]
fn direction_swap_with_symmetric_heads_is_reverse_invariant() {
    // Swap the two directions' LSTM weights, reverse the sequence, and use
    // head weights that are identical on both halves of the pooled vector:
    // mean-pooled logits are unchanged.
    let (mut config, params) = tiny_classifier(8);
    config.pooling = Pooling::Mean;
    let h = config.hidden;
    let mut swapped = params.clone();
    for which in ["w_x", "w_h", "b"] {
        let fwd = params.get(&lstm::param_name(0, 0, which)).unwrap().clone();
        let bwd = params.get(&lstm::param_name(0, 1, which)).unwrap().clone();
        *swapped.get_mut(&lstm::param_name(0, 0, which)).unwrap() = bwd;
        *swapped.get_mut(&lstm::param_name(0, 1, which)).unwrap() = fwd;
    }
    // Symmetric heads: W[:, j] == W[:, h + j].
    let mut sym = params.clone();
    let mut rng = rng_for(31, stream::CLASSIFIER_INIT, 5);
    for organ in Organ::ALL {
        let w = sym.get_mut(&head_name(organ, "w")).unwrap();
        for c in 0..3 {
            for j in 0..h {
                let v: f64 = rng.gen_range(-0.5..0.5);
                w.data[c * 2 * h + j] = v;
                w.data[c * 2 * h + h + j] = v;
            }
        }
    }
    let mut swapped_sym = swapped.clone();
    for organ in Organ::ALL {
        *swapped_sym.get_mut(&head_name(organ, "w")).unwrap() =
            sym.get(&head_name(organ, "w")).unwrap().clone();
        *swapped_sym.get_mut(&head_name(organ, "b")).unwrap() =
            sym.get(&head_name(organ, "b")).unwrap().clone();
    }
    let seq = random_seq(12, 6, 8);
    let mut rev_rows = Vec::new();
    for t in (0..6).rev() {
        rev_rows.extend_from_slice(seq.row(t));
    }
    let rev = SequenceFeatures { t_len: 6, dim: 8, rows: rev_rows };

    let base = forward_classifier(&config, &sym, &seq).unwrap();
    let flipped = forward_classifier(&config, &swapped_sym, &rev).unwrap();
    for organ in Organ::ALL {
        for c in 0..3 {
            let a = base.logits[organ.index()][c];
            let b = flipped.logits[organ.index()][c];
            assert!((a - b).abs() < 1e-9, "{} class {c}: {a} vs {b}", organ.name());
        }
    }
}

#[test]
fn weighted_ce_worked_examples() {
    let labels = OrganLabelTriple {
        kidney: InjuryLabel::Healthy,
        liver: InjuryLabel::Low,
        spleen: InjuryLabel::High,
    };
    // Exact one-hot on the true class -> loss 0.
    let onehot = StudyPrediction {
        probs: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };
    let w = [WeightTable::default(); 3];
    assert_eq!(weighted_ce_loss(&onehot, &labels, &w), 0.0);
    // Uniform predictions, unit weights -> 3 ln 3.
    let unit = [WeightTable { healthy: 1.0, low: 1.0, high: 1.0 }; 3];
    let loss = weighted_ce_loss(&StudyPrediction::uniform(), &labels, &unit);
    assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12, "{loss}");
    assert!((loss - 3.2958).abs() < 1e-4);
}

#[test]
fn loss_is_additive_across_organs() {
    let labels = OrganLabelTriple {
        kidney: InjuryLabel::Low,
        liver: InjuryLabel::Healthy,
        spleen: InjuryLabel::High,
    };
    let pred = StudyPrediction {
        probs: [[0.2, 0.5, 0.3], [0.7, 0.2, 0.1], [0.1, 0.3, 0.6]],
    };
    let full = [WeightTable::default(); 3];
    let total = weighted_ce_loss(&pred, &labels, &full);
    let zero = WeightTable { healthy: 0.0, low: 0.0, high: 0.0 };
    let mut only_kidney = full;
    only_kidney[1] = zero;
    only_kidney[2] = zero;
    let mut only_liver = full;
    only_liver[0] = zero;
    only_liver[2] = zero;
    let mut only_spleen = full;
    only_spleen[0] = zero;
    only_spleen[1] = zero;
    let parts = weighted_ce_loss(&pred, &labels, &only_kidney)
        + weighted_ce_loss(&pred, &labels, &only_liver)
        + weighted_ce_loss(&pred, &labels, &only_spleen);
    assert!((total - parts).abs() < 1e-12);
}

#[test]
fn head_gradients_ignore_other_organ_labels() {
    let (config, params) = tiny_classifier(8);
    let seq = random_seq(14, 4, 8);
    let trace = forward_classifier(&config, &params, &seq).unwrap();
    let labels_a = OrganLabelTriple {
        kidney: InjuryLabel::High,
        liver: InjuryLabel::Healthy,
        spleen: InjuryLabel::Low,
    };
    let labels_b = OrganLabelTriple {
        kidney: InjuryLabel::High,
        liver: InjuryLabel::Low,
        spleen: InjuryLabel::Healthy,
    };
    let mut grads_a = params.zeros_like();
    backward_classifier(&config, &params, &trace, &labels_a, 1.0, &mut grads_a).unwrap();
    let trace_b = forward_classifier(&config, &params, &seq).unwrap();
    let mut grads_b = params.zeros_like();
    backward_classifier(&config, &params, &trace_b, &labels_b, 1.0, &mut grads_b).unwrap();
    // The kidney head saw the same kidney label in both: identical gradient.
    let ka = grads_a.get(&head_name(Organ::Kidney, "w")).unwrap();
    let kb = grads_b.get(&head_name(Organ::Kidney, "w")).unwrap();
    assert_eq!(ka.data, kb.data);
    // The liver head saw different labels: different gradient.
    let la = grads_a.get(&head_name(Organ::Liver, "w")).unwrap();
    let lb = grads_b.get(&head_name(Organ::Liver, "w")).unwrap();
    assert_ne!(la.data, lb.data);
}

#[test]
fn classifier_gradients_match_finite_differences() {
    for pooling in [Pooling::Mean, Pooling::LastStates] {
        let (mut config, mut params) = tiny_classifier(8);
        config.pooling = pooling;
        let seq = random_seq(15, 5, 8);
        let labels = OrganLabelTriple {
            kidney: InjuryLabel::Low,
            liver: InjuryLabel::High,
            spleen: InjuryLabel::Healthy,
        };
        let loss = |p: &ParameterSet| -> f64 {
            let tr = forward_classifier(&config, p, &seq).unwrap();
            weighted_ce_loss(&tr.prediction, &labels, &config.organ_class_weights)
        };
        let trace = forward_classifier(&config, &params, &seq).unwrap();
        let mut grads = params.zeros_like();
        backward_classifier(&config, &params, &trace, &labels, 1.0, &mut grads).unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let len = params.get(&name).unwrap().len();
            for idx in (0..len).step_by(5) {
                let orig = params.get(&name).unwrap().data[idx];
                let h = 1e-6;
                params.get_mut(&name).unwrap().data[idx] = orig + h;
                let up = loss(&params);
                params.get_mut(&name).unwrap().data[idx] = orig - h;
                let down = loss(&params);
                params.get_mut(&name).unwrap().data[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let analytic = grads.get(&name).unwrap().data[idx];
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() < 1e-8 || (analytic - fd).abs() / denom < 1e-4,
                    "{pooling:?} {name}[{idx}]: analytic {analytic} fd {fd}"
                );
            }
        }
    }
}

#[test]
fn frozen_backbone_stays_bitwise_identical() {
    let (enc_cfg, backbone) = tiny_encoder();
    let (mut config, class_params) = tiny_classifier(8);
    config.finetune_mode = FinetuneMode::FrozenBackbone;
    let mut state = ClassifierState {
        backbone: backbone.clone(),
        encoder_config: enc_cfg,
        params: class_params,
        config,
        step: 0,
    };
    let batch = vec![
        (random_stack(20, [2, 6, 6]), OrganLabelTriple::ALL_HEALTHY),
        (
            random_stack(21, [2, 6, 6]),
            OrganLabelTriple {
                kidney: InjuryLabel::High,
                liver: InjuryLabel::Healthy,
                spleen: InjuryLabel::Healthy,
            },
        ),
    ];
    let before = state.params.clone();
    let loss = finetune_step(&mut state, &batch, 0.05).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(state.backbone.max_abs_diff(&backbone).unwrap(), 0.0);
    assert!(state.params.max_abs_diff(&before).unwrap() > 0.0);
    assert_eq!(state.step, 1);
}

#[test]
fn full_mode_updates_backbone() {
    let (enc_cfg, backbone) = tiny_encoder();
    let (config, class_params) = tiny_classifier(8);
    let mut state = ClassifierState {
        backbone: backbone.clone(),
        encoder_config: enc_cfg,
        params: class_params,
        config,
        step: 0,
    };
    let batch = vec![(random_stack(22, [2, 6, 6]), OrganLabelTriple::ALL_HEALTHY)];
    finetune_step(&mut state, &batch, 0.05).unwrap();
    assert!(state.backbone.max_abs_diff(&backbone).unwrap() > 0.0);
}

#[test]
fn full_mode_backbone_gradients_match_finite_differences() {
    let (enc_cfg, backbone) = tiny_encoder();
    let (config, class_params) = tiny_classifier(8);
    let stack = random_stack(25, [2, 6, 6]);
    let labels = OrganLabelTriple {
        kidney: InjuryLabel::High,
        liver: InjuryLabel::Low,
        spleen: InjuryLabel::Healthy,
    };
    let loss_of = |bb: &ParameterSet| -> f64 {
        let seq = extract_sequence_features(bb, &enc_cfg, &stack).unwrap();
        let tr = forward_classifier(&config, &class_params, &seq).unwrap();
        weighted_ce_loss(&tr.prediction, &labels, &config.organ_class_weights)
    };
    // Recreate the full-mode gradient path by hand.
    let mut slice_traces = Vec::new();
    let mut rows = Vec::new();
    for t in 0..2 {
        let tr = encoder::forward_trunk(&backbone, &enc_cfg, 6, 6, stack.slice(t)).unwrap();
        rows.extend_from_slice(&tr.feature);
        slice_traces.push(tr);
    }
    let seq = SequenceFeatures { t_len: 2, dim: 8, rows };
    let trace = forward_classifier(&config, &class_params, &seq).unwrap();
    let mut class_grads = class_params.zeros_like();
    let d_seq =
        backward_classifier(&config, &class_params, &trace, &labels, 1.0, &mut class_grads)
            .unwrap();
    let mut bb_grads = backbone.zeros_like();
    for (t, tr) in slice_traces.iter().enumerate() {
        encoder::backward_trunk(&backbone, &enc_cfg, tr, &d_seq[t * 8..(t + 1) * 8], &mut bb_grads)
            .unwrap();
    }
    let mut bb = backbone.clone();
    for name in ["conv1.w", "conv3.w", "fc.w", "fc.b"] {
        let len = bb.get(name).unwrap().len();
        for idx in (0..len).step_by(37) {
            let orig = bb.get(name).unwrap().data[idx];
            let h = 1e-5;
            bb.get_mut(name).unwrap().data[idx] = orig + h;
            let up = loss_of(&bb);
            bb.get_mut(name).unwrap().data[idx] = orig - h;
            let down = loss_of(&bb);
            bb.get_mut(name).unwrap().data[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = bb_grads.get(name).unwrap().data[idx];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() < 1e-8 || (analytic - fd).abs() / denom < 1e-3,
                "{name}[{idx}]: analytic {analytic} fd {fd}"
            );
        }
    }
}

#[test]
fn predict_study_is_pure_and_valid() {
    let (enc_cfg, backbone) = tiny_encoder();
    let (config, class_params) = tiny_classifier(8);
    let state = ClassifierState {
        backbone,
        encoder_config: enc_cfg,
        params: class_params,
        config,
        step: 0,
    };
    let spec = SyntheticSpec {
        shape: [8, 24, 24],
        num_blobs: 2,
        injury_pattern: None,
        rng_seed: 33,
        class_prior: [0.4, 0.3, 0.3],
    };
    let volume = generate_synthetic_volume(&spec).unwrap();
    let pp = PreprocessSpec {
        target_shape: [4, 12, 12],
        ..PreprocessSpec::pretrain_default()
    };
    let a = predict_study(&state, &volume, &pp).unwrap();
    let b = predict_study(&state, &volume, &pp).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();
}

#[test]
fn classifier_state_checkpoint_round_trips() {
    let (enc_cfg, backbone) = tiny_encoder();
    let (config, class_params) = tiny_classifier(8);
    let state = ClassifierState {
        backbone,
        encoder_config: enc_cfg,
        params: class_params,
        config,
        step: 12,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("classifier.svck");
    save_state(&state, &path).unwrap();
    let loaded = load_state(&path).unwrap();
    assert_eq!(loaded.step, 12);
    assert_eq!(loaded.backbone.max_abs_diff(&state.backbone).unwrap(), 0.0);
    assert_eq!(loaded.params.max_abs_diff(&state.params).unwrap(), 0.0);
    assert_eq!(loaded.config, state.config);
    assert_eq!(loaded.encoder_config, state.encoder_config);
}

#[test]
fn predictions_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    let entries = vec![
        (
            "p0".to_string(),
            StudyPrediction {
                probs: [[0.5, 0.25, 0.25], [0.125, 0.5, 0.375], [0.75, 0.125, 0.125]],
            },
        ),
        ("p1".to_string(), StudyPrediction::uniform()),
    ];
    write_predictions_csv(&entries, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("patient_id,kidney_healthy,kidney_low,kidney_high,"));
    let loaded = read_predictions_csv(&path).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].0, "p0");
    for organ in 0..3 {
        for class in 0..3 {
            assert!(
                (loaded[0].1.probs[organ][class] - entries[0].1.probs[organ][class]).abs() < 1e-6
            );
        }
    }
}

#[test]
fn predictions_csv_rejects_invalid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    std::fs::write(
        &path,
        "patient_id,kidney_healthy,kidney_low,kidney_high,liver_healthy,liver_low,liver_high,spleen_healthy,spleen_low,spleen_high\np0,0.9,0.9,0.9,0.1,0.1,0.8,0.3,0.3,0.4\n",
    )
    .unwrap();
    assert!(read_predictions_csv(&path).is_err());
}
