use super::*;
use crate::verify;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn small_fcn3(rng: &mut ChaCha8Rng) -> Model {
    Model::fcn3(6, (8, 7), 4, rng).unwrap()
}

fn small_cnn(rng: &mut ChaCha8Rng) -> Model {
    Model::cnn_bn((1, 6, 6), 2, 3, 8, 3, rng).unwrap()
}

#[test]
fn identity_network_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::new(
        vec![LayerSpec::FullyConnected { input: 3, output: 3 }],
        vec![3],
        &mut rng,
    )
    .unwrap();
    model.params_mut()[0] = LayerParams::FullyConnected {
        weight: Matrix::identity(3).to_tensor(),
        bias: Tensor::zeros(vec![3]),
    };
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, -3.0]).unwrap();
    let trace = forward(&model, &x, Mode::Train).unwrap();
    assert_eq!(trace.logits().data(), x.data());
}

#[test]
fn fcn3_matches_straight_line_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = small_fcn3(&mut rng);
    let x = random_batch(&mut rng, vec![2, 6]);
    let trace = forward(&model, &x, Mode::Train).unwrap();

    // Independent re-computation: walk the three layers with scalar loops,
    // reading parameters straight out of the model.
    let weights: Vec<(&Tensor, &Tensor)> = model
        .params()
        .iter()
        .filter_map(|p| match p {
            LayerParams::FullyConnected { weight, bias } => Some((weight, bias)),
            _ => None,
        })
        .collect();
    for s in 0..2 {
        let mut act: Vec<f64> = x.data()[s * 6..(s + 1) * 6].to_vec();
        for (li, (w, b)) in weights.iter().enumerate() {
            let (out_w, in_w) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; out_w];
            for o in 0..out_w {
                let mut acc = b.data()[o];
                for i in 0..in_w {
                    acc += w.data()[o * in_w + i] * act[i];
                }
                next[o] = if li < 2 { acc.max(0.0) } else { acc };
            }
            act = next;
        }
        for (o, want) in act.iter().enumerate() {
            let got = trace.logits().get(s, o);
            assert!((got - want).abs() <= 1e-12, "sample {s} logit {o}");
        }
    }
}

#[test]
fn forward_shape_error_names_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = small_fcn3(&mut rng);
    let bad = Tensor::zeros(vec![2, 5]);
    let err = forward(&model, &bad, Mode::Train).unwrap_err();
    assert!(err.to_string().contains("input shape"), "{err}");
}

#[test]
fn single_sample_bias_gradient_is_logit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = small_fcn3(&mut rng);
    let x = random_batch(&mut rng, vec![1, 6]);
    let trace = forward(&model, &x, Mode::Train).unwrap();
    let label = 2usize;
    let grads = backward(&model, &trace, &[label]).unwrap();
    let (_, dl_dy) = softmax_xent(&trace.logits(), &[label]).unwrap();
    let db = grads.fcl_bias().unwrap();
    for (g, w) in db.iter().zip(dl_dy.row(0)) {
        assert_eq!(g, w, "B=1 bias gradient must equal dL/dy bitwise");
    }
    // The unique non-positive entry sits at the true class.
    let nonpos: Vec<usize> = (0..4).filter(|&i| db[i] <= 0.0).collect();
    assert_eq!(nonpos, vec![label]);
}

#[test]
fn equal_embeddings_factor_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = small_fcn3(&mut rng);
    // Identical samples force identical embeddings.
    let one = random_batch(&mut rng, vec![1, 6]);
    let mut data = Vec::new();
    for _ in 0..5 {
        data.extend_from_slice(one.data());
    }
    let x = Tensor::new(vec![5, 6], data).unwrap();
    let trace = forward(&model, &x, Mode::Train).unwrap();
    let labels = [0usize, 1, 1, 3, 2];
    let grads = backward(&model, &trace, &labels).unwrap();
    let dw = grads.fcl_weight().unwrap();
    let db = grads.fcl_bias().unwrap();
    let e = trace.embedding();
    for i in 0..4 {
        for j in 0..model.embedding_dim() {
            let want = db[i] * e.get(0, j);
            assert!((dw.get(i, j) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn count_identity_links_bias_gradient_and_labels() {
    // For any batch: count_i + B*db_i - sum_k softmax(y(k))_i == 0.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for arch in 0..2 {
        let (model, x) = if arch == 0 {
            (small_fcn3(&mut rng), random_batch(&mut rng, vec![9, 6]))
        } else {
            (small_cnn(&mut rng), random_batch(&mut rng, vec![9, 1, 6, 6]))
        };
        let n = model.num_classes();
        let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(0..n)).collect();
        let trace = forward(&model, &x, Mode::Train).unwrap();
        let grads = backward(&model, &trace, &labels).unwrap();
        let db = grads.fcl_bias().unwrap();
        let logits = trace.logits();
        for i in 0..n {
            let count = labels.iter().filter(|&&c| c == i).count() as f64;
            let soft_sum: f64 = (0..9).map(|k| softmax(logits.row(k))[i]).sum();
            let resid = count + 9.0 * db[i] - soft_sum;
            assert!(resid.abs() <= 1e-9, "class {i}: residual {resid}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for arch in 0..2 {
        let (model, x) = if arch == 0 {
            (small_fcn3(&mut rng), random_batch(&mut rng, vec![3, 6]))
        } else {
            (small_cnn(&mut rng), random_batch(&mut rng, vec![3, 1, 6, 6]))
        };
        let n = model.num_classes();
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..n)).collect();
        let trace = forward(&model, &x, Mode::Train).unwrap();
        let analytic = backward(&model, &trace, &labels).unwrap().flatten();
        let fd = verify::finite_difference_grads(&model, &x, &labels, 1e-5).unwrap();
        let dev = verify::max_relative_deviation(&analytic, &fd);
        assert!(dev <= 1e-4, "arch {arch}: max deviation {dev}");
    }
}

#[test]
fn gamma_zero_blocks_gradient_upstream_of_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = small_cnn(&mut rng);
    let bn = model.first_batchnorm().unwrap();
    if let LayerParams::BatchNorm { gamma, beta, .. } = &mut model.params_mut()[bn] {
        for v in gamma.data_mut() {
            *v = 0.0;
        }
        for v in beta.data_mut() {
            *v = 0.7;
        }
    }
    let x = random_batch(&mut rng, vec![4, 1, 6, 6]);
    let trace = forward(&model, &x, Mode::Train).unwrap();
    let grads = backward(&model, &trace, &[0, 1, 2, 0]).unwrap();
    match &grads.layers()[0] {
        LayerGrads::Conv2d { weight, bias } => {
            assert!(weight.data().iter().all(|&v| v == 0.0));
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
        _ => panic!("layer 0 is the conv layer"),
    }
}

#[test]
fn forward_backward_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = small_cnn(&mut rng);
    let x = random_batch(&mut rng, vec![4, 1, 6, 6]);
    let labels = [0usize, 2, 1, 1];
    let t1 = forward(&model, &x, Mode::Train).unwrap();
    let t2 = forward(&model, &x, Mode::Train).unwrap();
    assert_eq!(t1.logits().data(), t2.logits().data());
    let g1 = backward(&model, &t1, &labels).unwrap();
    let g2 = backward(&model, &t2, &labels).unwrap();
    assert_eq!(g1.flatten(), g2.flatten());
}

#[test]
fn trace_from_other_model_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = small_fcn3(&mut rng);
    let b = small_fcn3(&mut rng);
    let x = random_batch(&mut rng, vec![2, 6]);
    let trace = forward(&a, &x, Mode::Train).unwrap();
    assert!(matches!(
        backward(&b, &trace, &[0, 1]),
        Err(crate::error::Error::Contract(_))
    ));
}

#[test]
fn eval_mode_trace_cannot_drive_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = small_fcn3(&mut rng);
    let x = random_batch(&mut rng, vec![2, 6]);
    let trace = forward(&model, &x, Mode::Eval).unwrap();
    assert!(matches!(
        backward(&model, &trace, &[0, 1]),
        Err(crate::error::Error::Contract(_))
    ));
}

#[test]
fn model_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = small_cnn(&mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let a = model.flatten_params();
    let b = loaded.flatten_params();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_eq!(model.specs(), loaded.specs());
}

#[test]
fn last_layer_must_be_fully_connected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let err = Model::new(
        vec![
            LayerSpec::FullyConnected { input: 4, output: 4 },
            LayerSpec::Relu,
        ],
        vec![4],
        &mut rng,
    )
    .unwrap_err();
    assert!(matches!(err, crate::error::Error::Architecture(_)));
}

#[test]
fn mismatched_layer_shapes_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let err = Model::new(
        vec![
            LayerSpec::FullyConnected { input: 4, output: 5 },
            LayerSpec::FullyConnected { input: 6, output: 3 },
        ],
        vec![4],
        &mut rng,
    )
    .unwrap_err();
    assert!(err.to_string().contains("layer 1"), "{err}");
}

#[test]
fn init_respects_fan_in_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = Model::fcn3(100, (50, 20), 10, &mut rng).unwrap();
    if let LayerParams::FullyConnected { weight, bias } = &model.params()[0] {
        let bound = 1.0 / 10.0;
        assert!(weight.data().iter().all(|v| v.abs() < bound));
        assert!(bias.data().iter().all(|v| v.abs() < bound));
        // Spread should fill a good part of the range, not collapse to 0.
        let max = weight.data().iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > bound * 0.9);
    } else {
        panic!("first layer is fully connected");
    }
}
