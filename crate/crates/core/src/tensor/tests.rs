use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller is plenty here; values stay O(1).
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity_case() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_annihilator() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let z = tape.constant(Tensor::zeros(vec![2, 2]));
    let c = tape.matmul(a, z).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Dim(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 2], &mut rng);
    let err = grad_check_multi(
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum_all(c))
        },
        &[a, b],
        1e-5,
        CoordSelection::All,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn softmax_uniform_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_does_not_overflow_on_large_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!(v[1].abs() < 1e-12);
}

#[test]
fn softmax_matches_high_precision_oracle() {
    // Reference digits computed at 40 decimal places.
    let expected = [
        0.09003057317038045799802210148449179786793,
        0.2447284710547976524729596183407627971993,
        0.6652409557748218895290182801747454049328,
    ];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for (got, want) in tape.value(y).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}

#[test]
fn softmax_rows_sum_to_one_both_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(vec![5, 7], &mut rng);
    for axis in [0usize, 1] {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let y = tape.softmax(xid, axis).unwrap();
        let v = tape.value(y);
        let (m, n) = (5, 7);
        if axis == 1 {
            for i in 0..m {
                let s: f64 = (0..n).map(|j| v.at(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        } else {
            for j in 0..n {
                let s: f64 = (0..m).map(|i| v.at(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(v.data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv1d(x, k, None, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 4]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn conv1d_box_sum_stride_two() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
    let y = tape.conv1d(x, k, None, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn conv1d_kernel_larger_than_input_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3]));
    let k = tape.constant(Tensor::zeros(vec![1, 1, 5]));
    assert!(matches!(tape.conv1d(x, k, None, 1), Err(TensorError::Dim(_))));
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(vec![2, 3, 20], &mut rng);
    let k = randn(vec![4, 3, 5], &mut rng);
    let b = randn(vec![4], &mut rng);
    let err = grad_check_multi(
        |tape, ids| {
            let y = tape.conv1d(ids[0], ids[1], Some(ids[2]), 2)?;
            let flat = tape.reshape(y, vec![tape.value(y).numel(), 1])?;
            let sq = tape.mul(flat, flat)?;
            Ok(tape.mean_all(sq))
        },
        &[x, k, b],
        1e-5,
        CoordSelection::All,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn batch_norm_constant_batch_returns_beta() {
    // Zero variance: normalized values collapse to 0, output = 0*gamma + beta.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![4, 3], 2.5));
    let gamma = tape.constant(Tensor::new(vec![3], vec![1.5, 2.0, 3.0]).unwrap());
    let beta = tape.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            assert!((tape.value(y).at(i, j) - [0.1, 0.2, 0.3][j]).abs() < 1e-12);
        }
    }
    assert!(mean.iter().all(|&m| (m - 2.5).abs() < 1e-12));
    assert!(var.iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn composite_mlp_gradient_check() {
    // linear -> batch norm -> relu -> linear -> layer norm -> mean
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = randn(vec![5, 4], &mut rng);
    let w1 = randn(vec![4, 6], &mut rng);
    let g1 = randn(vec![6], &mut rng);
    let b1 = randn(vec![6], &mut rng);
    let w2 = randn(vec![6, 3], &mut rng);
    let g2 = randn(vec![3], &mut rng);
    let b2 = randn(vec![3], &mut rng);
    let err = grad_check_multi(
        |tape, ids| {
            let h = tape.matmul(ids[0], ids[1])?;
            let (bn, _, _) = tape.batch_norm_train(h, ids[2], ids[3], 1e-5)?;
            let a = tape.relu(bn);
            let h2 = tape.matmul(a, ids[4])?;
            let ln = tape.layer_norm(h2, ids[5], ids[6], 1e-5)?;
            Ok(tape.mean_all(ln))
        },
        &[x, w1, g1, b1, w2, g2, b2],
        1e-5,
        CoordSelection::All,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_check_linear_function_is_exact() {
    // Dyadic values keep every finite-difference evaluation exact in f64.
    let x = Tensor::new(vec![4], vec![0.25, 1.5, -2.0, 0.5]).unwrap();
    let err = grad_check(
        |tape, id| Ok(tape.sum_all(id)),
        &x,
        0.0009765625, // 2^-10
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_square_function() {
    let x = Tensor::new(vec![1], vec![3.0]).unwrap();
    let analytic = {
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone().with_grad());
        let y = tape.mul(id, id).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        tape.grad(id).unwrap()[0]
    };
    assert!((analytic - 6.0).abs() < 1e-12);
    let err = grad_check(
        |tape, id| {
            let y = tape.mul(id, id)?;
            Ok(tape.sum_all(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn backward_populates_every_reachable_leaf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let a = tape.leaf(randn(vec![2, 3], &mut rng).with_grad());
    let b = tape.leaf(randn(vec![3, 2], &mut rng).with_grad());
    let frozen = tape.leaf(randn(vec![2, 2], &mut rng)); // requires_grad = false
    let c = tape.matmul(a, b).unwrap();
    let d = tape.add(c, frozen).unwrap();
    let loss = tape.mean_all(d);
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).is_some());
    assert!(tape.grad(b).is_some());
    assert!(tape.grad(frozen).is_none());
}

#[test]
fn backward_is_bit_stable_across_replays() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let a = tape.leaf(randn(vec![4, 4], &mut rng).with_grad());
        let b = tape.leaf(randn(vec![4, 4], &mut rng).with_grad());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let l = tape.mean_all(s);
        tape.backward(l).unwrap();
        (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}

#[test]
fn slice_concat_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = randn(vec![4, 6], &mut rng);
    let err = grad_check(
        |tape, id| {
            let top = tape.slice_rows(id, 0, 2)?;
            let bottom = tape.slice_rows(id, 2, 4)?;
            let swapped = tape.concat(&[bottom, top], 0)?;
            let cols = tape.slice_cols(swapped, 1, 5)?;
            let t = tape.transpose(cols)?;
            let prod = tape.mul(t, t)?;
            Ok(tape.mean_all(prod))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn fused_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let logits = randn(vec![3, 4], &mut rng);
    let targets: Vec<f64> = (0..12).map(|i| f64::from(i % 2 == 0)).collect();
    let err = grad_check(
        |tape, id| tape.bce_with_logits(id, &targets),
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "bce rel err {err}");

    let classes = vec![2usize, 0, 3];
    let err = grad_check(
        |tape, id| tape.softmax_cross_entropy(id, &classes),
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "ce rel err {err}");
}

#[test]
fn every_differentiable_op_passes_grad_check_over_ten_seeds() {
    type OpCase = (
        &'static str,
        Vec<Vec<usize>>,
        fn(&mut Tape, &[TensorId]) -> TensorResult<TensorId>,
    );
    // Each case ends in a scalar via mean_all of a squared output so that
    // second-order terms exercise the chain rule, not just linear paths.
    fn finish(tape: &mut Tape, y: TensorId) -> TensorResult<TensorId> {
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    }
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("add", vec![vec![3, 3], vec![3, 3]], |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("sub", vec![vec![3, 3], vec![3, 3]], |t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("mul", vec![vec![3, 3], vec![3, 3]], |t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("add_bias", vec![vec![4, 3], vec![3]], |t, ids| {
            let y = t.add_bias(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("add_tiled", vec![vec![6, 3], vec![2, 3]], |t, ids| {
            let y = t.add_tiled(ids[0], ids[1], 3)?;
            finish(t, y)
        }),
        ("scale", vec![vec![3, 3]], |t, ids| {
            let y = t.scale(ids[0], -1.7);
            finish(t, y)
        }),
        ("mul_scalar_t", vec![vec![3, 3], vec![1]], |t, ids| {
            let y = t.mul_scalar_t(ids[0], ids[1])?;
            finish(t, y)
        }),
        ("exp", vec![vec![3, 3]], |t, ids| {
            let y = t.exp(ids[0]);
            finish(t, y)
        }),
        ("gelu", vec![vec![3, 3]], |t, ids| {
            let y = t.gelu(ids[0]);
            finish(t, y)
        }),
        ("sigmoid", vec![vec![3, 3]], |t, ids| {
            let y = t.sigmoid(ids[0]);
            finish(t, y)
        }),
        ("softmax", vec![vec![3, 5]], |t, ids| {
            let y = t.softmax(ids[0], 1)?;
            finish(t, y)
        }),
        ("log_softmax", vec![vec![3, 5]], |t, ids| {
            let y = t.log_softmax(ids[0], 1)?;
            finish(t, y)
        }),
        ("layer_norm", vec![vec![4, 5], vec![5], vec![5]], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            finish(t, y)
        }),
        (
            "batch_norm_train",
            vec![vec![6, 4], vec![4], vec![4]],
            |t, ids| {
                let (y, _, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
                finish(t, y)
            },
        ),
        (
            "batch_norm_eval",
            vec![vec![6, 4], vec![4], vec![4]],
            |t, ids| {
                let rm = vec![0.3; 4];
                let rv = vec![1.2; 4];
                let y = t.batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
                finish(t, y)
            },
        ),
        ("conv1d", vec![vec![2, 12], vec![3, 2, 4]], |t, ids| {
            let y = t.conv1d(ids[0], ids[1], None, 3)?;
            let flat = t.reshape(y, vec![t.value(y).numel(), 1])?;
            finish(t, flat)
        }),
        ("transpose", vec![vec![3, 4]], |t, ids| {
            let y = t.transpose(ids[0])?;
            finish(t, y)
        }),
        ("gather_rows", vec![vec![5, 3]], |t, ids| {
            let y = t.gather_rows(ids[0], &[4, 0, 0, 2])?;
            finish(t, y)
        }),
        ("channels_last", vec![vec![2, 3, 4]], |t, ids| {
            let y = t.channels_last(ids[0])?;
            finish(t, y)
        }),
        ("row_l2_normalize", vec![vec![4, 5]], |t, ids| {
            let shifted = t.add_scalar(ids[0], 3.0); // keep rows well away from zero norm
            let y = t.row_l2_normalize(shifted)?;
            finish(t, y)
        }),
        ("take_diag", vec![vec![4, 4]], |t, ids| {
            let y = t.take_diag(ids[0])?;
            let col = t.reshape(y, vec![4, 1])?;
            finish(t, col)
        }),
        ("masked_fill", vec![vec![3, 4]], |t, ids| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
            let y = t.masked_fill(ids[0], &mask, 0.0)?;
            finish(t, y)
        }),
        ("relu_smoothed", vec![vec![3, 4]], |t, ids| {
            // relu is kinked at 0; shift inputs away from the kink so the
            // finite-difference oracle is valid.
            let shifted = t.add_scalar(ids[0], 5.0);
            let y = t.relu(shifted);
            finish(t, y)
        }),
        ("log_shifted", vec![vec![3, 4]], |t, ids| {
            let shifted = t.add_scalar(ids[0], 10.0);
            let y = t.log(shifted);
            finish(t, y)
        }),
        ("recip_shifted", vec![vec![3, 4]], |t, ids| {
            let shifted = t.add_scalar(ids[0], 10.0);
            let y = t.recip(shifted);
            finish(t, y)
        }),
    ];

    for (name, shapes, f) in cases {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let xs: Vec<Tensor> = shapes.iter().map(|s| randn(s.clone(), &mut rng)).collect();
            let err = grad_check_multi(f, &xs, 1e-5, CoordSelection::All).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: max rel err {err}");
        }
    }
}
