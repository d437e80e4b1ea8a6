use super::*;
use crate::tensor::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct seven-loop cross-correlation, the oracle every conv path must match.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (out_c, kh, kw): (usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
    bias: Option<&[f64]>,
) -> (Vec<f64>, usize, usize) {
    let oh = conv_output_extent(h, kh, stride.0, pad.0, dil.0).unwrap();
    let ow = conv_output_extent(w, kw, stride.1, pad.1, dil.1).unwrap();
    let mut out = vec![0.0; n * out_c * oh * ow];
    for ni in 0..n {
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (oy * stride.0 + ky * dil.0) as i64 - pad.0 as i64;
                                let sx = (ox * stride.1 + kx * dil.1) as i64 - pad.1 as i64;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + sy as usize) * w + sx as usize;
                                let wi = ((oc * c + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * weight[wi];
                            }
                        }
                    }
                    out[((ni * out_c + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_1x1_identity_weight_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::constant(randn(&mut rng, 2 * 3 * 4 * 4), &[2, 3, 4, 4]);
    // Per-channel identity: weight[o, i] = (o == i).
    let mut w = vec![0.0; 3 * 3];
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let p = Conv2dParams::new(
        Tensor::constant(w, &[3, 3, 1, 1]),
        Some(Tensor::zeros(&[3])),
    );
    let y = conv2d(&x, &p).unwrap();
    assert_eq!(y.shape(), x.shape());
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(a, b);
    }
}

#[test]
fn conv_3x3_ones_counts_overlap() {
    let x = Tensor::filled(&[1, 1, 4, 4], 1.0);
    let p = Conv2dParams::new(Tensor::filled(&[1, 1, 3, 3], 1.0), None)
        .with_geometry((1, 1), (1, 1), (1, 1));
    let y = conv2d(&x, &p).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    let d = y.data();
    // Corners see 4 taps, edges 6, interior 9.
    assert_eq!(d[0], 4.0);
    assert_eq!(d[1], 6.0);
    assert_eq!(d[5], 9.0);
    let (oracle, _, _) = conv_oracle(
        x.data(),
        (1, 1, 4, 4),
        &vec![1.0; 9],
        (1, 3, 3),
        (1, 1),
        (1, 1),
        (1, 1),
        None,
    );
    assert_eq!(d, &oracle[..]);
}

#[test]
fn dilated_3x3_with_pad_2_keeps_spatial_size() {
    let x = Tensor::filled(&[1, 1, 8, 8], 0.5);
    let p = Conv2dParams::new(Tensor::filled(&[1, 1, 3, 3], 1.0), None)
        .with_geometry((1, 1), (2, 2), (2, 2));
    let y = conv2d(&x, &p).unwrap();
    assert_eq!(y.shape(), &[1, 1, 8, 8]);
}

#[test]
fn conv_matches_direct_oracle_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cases = [
        ((1, 2, 5, 6), (3, 3, 3), (1, 1), (1, 1), (1, 1)),
        ((2, 3, 8, 7), (4, 3, 3), (2, 2), (1, 1), (1, 1)),
        ((1, 2, 9, 9), (2, 3, 3), (1, 1), (2, 2), (2, 2)),
        ((2, 4, 6, 5), (3, 1, 1), (1, 1), (0, 0), (1, 1)),
        ((1, 1, 7, 4), (2, 2, 3), (2, 1), (0, 2), (1, 1)),
    ];
    for &((n, c, h, w), (oc, kh, kw), stride, pad, dil) in &cases {
        let x = randn(&mut rng, n * c * h * w);
        let wgt = randn(&mut rng, oc * c * kh * kw);
        let b = randn(&mut rng, oc);
        let p = Conv2dParams::new(
            Tensor::constant(wgt.clone(), &[oc, c, kh, kw]),
            Some(Tensor::constant(b.clone(), &[oc])),
        )
        .with_geometry(stride, pad, dil);
        let y = conv2d(&Tensor::constant(x.clone(), &[n, c, h, w]), &p).unwrap();
        let (oracle, oh, ow) =
            conv_oracle(&x, (n, c, h, w), &wgt, (oc, kh, kw), stride, pad, dil, Some(&b));
        assert_eq!(y.shape(), &[n, oc, oh, ow]);
        for (got, want) in y.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_degenerate_output() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let p = Conv2dParams::new(Tensor::zeros(&[1, 3, 1, 1]), None);
    assert!(conv2d(&x, &p).is_err());

    let p = Conv2dParams::new(Tensor::zeros(&[1, 2, 5, 5]), None);
    let err = conv2d(&x, &p).unwrap_err();
    assert!(err.to_string().contains("not positive"), "{err}");
}

#[test]
fn conv_gradients_check_out_for_input_weight_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, 1 * 2 * 5 * 4);
    let wgt = randn(&mut rng, 3 * 2 * 3 * 3);
    let b = randn(&mut rng, 3);
    let geom = ((2, 1), (1, 1), (1, 1));

    let err_x = grad_check(
        |t| {
            let p = Conv2dParams::new(
                Tensor::constant(wgt.clone(), &[3, 2, 3, 3]),
                Some(Tensor::constant(b.clone(), &[3])),
            )
            .with_geometry(geom.0, geom.1, geom.2);
            Ok(conv2d(t, &p)?.sum())
        },
        &Tensor::constant(x.clone(), &[1, 2, 5, 4]),
        1e-5,
    )
    .unwrap();
    assert!(err_x < 1e-4, "input grad err {err_x}");

    let err_w = grad_check(
        |t| {
            let p = Conv2dParams::new(t.clone(), Some(Tensor::constant(b.clone(), &[3])))
                .with_geometry(geom.0, geom.1, geom.2);
            conv2d(&Tensor::constant(x.clone(), &[1, 2, 5, 4]), &p).map(|y| y.mul(&y).sum())
        },
        &Tensor::constant(wgt.clone(), &[3, 2, 3, 3]),
        1e-5,
    )
    .unwrap();
    assert!(err_w < 1e-4, "weight grad err {err_w}");

    let err_b = grad_check(
        |t| {
            let p = Conv2dParams::new(
                Tensor::constant(wgt.clone(), &[3, 2, 3, 3]),
                Some(t.clone()),
            )
            .with_geometry(geom.0, geom.1, geom.2);
            conv2d(&Tensor::constant(x.clone(), &[1, 2, 5, 4]), &p).map(|y| y.mul(&y).sum())
        },
        &Tensor::constant(b, &[3]),
        1e-5,
    )
    .unwrap();
    assert!(err_b < 1e-4, "bias grad err {err_b}");
}

#[test]
fn conv_1x1_equals_per_position_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, c, h, w, oc) = (2, 4, 3, 5, 3);
    let x = randn(&mut rng, n * c * h * w);
    let wgt = randn(&mut rng, oc * c);
    let p = Conv2dParams::new(Tensor::constant(wgt.clone(), &[oc, c, 1, 1]), None);
    let y = conv2d(&Tensor::constant(x.clone(), &[n, c, h, w]), &p).unwrap();
    for ni in 0..n {
        for yx in 0..h * w {
            for o in 0..oc {
                let mut want = 0.0;
                for ci in 0..c {
                    want += wgt[o * c + ci] * x[(ni * c + ci) * h * w + yx];
                }
                let got = y.data()[(ni * oc + o) * h * w + yx];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_train_centers_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, c, h, w) = (4, 3, 2, 2);
    let x = Tensor::constant(randn(&mut rng, n * c * h * w), &[n, c, h, w]);
    let mut s = BatchNormState::new(c);
    let y = batch_norm(&x, &mut s).unwrap();

    let spatial = h * w;
    let m = (n * spatial) as f64;
    for ch in 0..c {
        let mut mean = 0.0;
        let mut var = 0.0;
        for ni in 0..n {
            for sp in 0..spatial {
                mean += y.data()[(ni * c + ch) * spatial + sp];
            }
        }
        mean /= m;
        for ni in 0..n {
            for sp in 0..spatial {
                let d = y.data()[(ni * c + ch) * spatial + sp] - mean;
                var += d * d;
            }
        }
        var /= m;
        assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
        // Variance is 1 up to the epsilon in the denominator.
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn batch_norm_eval_is_the_running_stat_affine() {
    let x = Tensor::constant(vec![0.5, -1.0, 2.0, 0.0], &[2, 1, 1, 2]);
    let mut s = BatchNormState::new(1);
    s.mode = BnMode::Eval;
    s.scale = Tensor::filled(&[1], 2.0);
    s.shift = Tensor::filled(&[1], 3.0);
    let y = batch_norm(&x, &mut s).unwrap();
    for (yv, xv) in y.data().iter().zip(x.data()) {
        let want = 2.0 * xv / (1.0 + s.epsilon).sqrt() + 3.0;
        assert!((yv - want).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_gradients_check_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, 4 * 3 * 2 * 2);
    let err = grad_check(
        |t| {
            let mut s = BatchNormState::new(3);
            s.scale = Tensor::constant(vec![1.3, 0.7, -0.4], &[3]);
            s.shift = Tensor::constant(vec![0.1, -0.2, 0.5], &[3]);
            batch_norm(t, &mut s).map(|y| y.mul(&y).sum())
        },
        &Tensor::constant(x.clone(), &[4, 3, 2, 2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "x grad err {err}");

    let err_affine = grad_check(
        |t| {
            let mut s = BatchNormState::new(3);
            s.scale = t.clone();
            batch_norm(&Tensor::constant(x.clone(), &[4, 3, 2, 2]), &mut s)
                .map(|y| y.mul(&y).sum())
        },
        &Tensor::constant(vec![1.3, 0.7, -0.4], &[3]),
        1e-5,
    )
    .unwrap();
    assert!(err_affine < 1e-4, "scale grad err {err_affine}");
}

#[test]
fn batch_norm_train_requires_two_samples() {
    let x = Tensor::zeros(&[1, 2, 1, 1]);
    let mut s = BatchNormState::new(2);
    assert!(batch_norm(&x, &mut s).is_err());
}

#[test]
fn activations_match_their_definitions() {
    let x = Tensor::constant(vec![-1.0, 0.0, 2.0], &[3]);
    let y = activation(&x, Activation::Relu).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let x = Tensor::constant(vec![-2.0, 3.0], &[2]);
    let y = activation(&x, Activation::LeakyRelu(0.1)).unwrap();
    assert!((y.data()[0] + 0.2).abs() < 1e-15);
    assert_eq!(y.data()[1], 3.0);

    assert!(activation(&x, Activation::LeakyRelu(1.0)).is_err());
}

#[test]
fn global_pool_reduces_constant_and_average() {
    let x = Tensor::filled(&[2, 3, 2, 2], 0.7);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        let y = global_pool(&x, kind).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
    let x = Tensor::constant(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]);
    let y = global_pool(&x, PoolKind::Avg).unwrap();
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn max_pool_gradient_is_one_hot_at_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Perturbed distinct values so the argmax is stable under eps.
    let mut x: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
    for v in x.iter_mut() {
        *v += rng.random_range(-0.01..0.01);
    }
    let err = grad_check(
        |t| global_pool(t, PoolKind::Max).map(|y| y.mul(&y).sum()),
        &Tensor::constant(x, &[1, 2, 2, 4]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max pool grad err {err}");
}

#[test]
fn softmax_rows_handles_uniform_large_and_random_rows() {
    let y = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let y = softmax_rows(&Tensor::constant(vec![1000.0, 0.0], &[1, 2])).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!(y.data()[1] < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Tensor::constant(randn(&mut rng, 25), &[5, 5]);
    let y = softmax_rows(&m).unwrap();
    for r in 0..5 {
        let sum: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_is_shift_invariant_per_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let base = randn(&mut rng, 12);
    let shifted: Vec<f64> = base.iter().map(|v| v + 37.5).collect();
    let a = softmax_rows(&Tensor::constant(base, &[3, 4])).unwrap();
    let b = softmax_rows(&Tensor::constant(shifted, &[3, 4])).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_rejects_nan() {
    let m = Tensor::constant(vec![0.0, f64::NAN], &[1, 2]);
    match softmax_rows(&m) {
        Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

fn zeroed_bottleneck(in_c: usize, mid: usize) -> BottleneckParams {
    let mut bn1 = BatchNormState::new(mid);
    let mut bn2 = BatchNormState::new(mid);
    let mut bn3 = BatchNormState::new(in_c);
    for bn in [&mut bn1, &mut bn2, &mut bn3] {
        bn.mode = BnMode::Eval;
    }
    BottleneckParams {
        conv1: Conv2dParams::new(Tensor::zeros(&[mid, in_c, 1, 1]), None),
        bn1,
        conv2: Conv2dParams::new(Tensor::zeros(&[mid, mid, 3, 3]), None)
            .with_geometry((1, 1), (1, 1), (1, 1)),
        bn2,
        conv3: Conv2dParams::new(Tensor::zeros(&[in_c, mid, 1, 1]), None),
        bn3,
        projection: None,
    }
}

#[test]
fn bottleneck_with_zero_weights_is_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::constant(randn(&mut rng, 1 * 4 * 3 * 3), &[1, 4, 3, 3]);
    let mut p = zeroed_bottleneck(4, 2);
    // Zero running stats: eval BN of a zero map stays zero.
    for bn in [&mut p.bn1, &mut p.bn2, &mut p.bn3] {
        bn.running_mean = vec![0.0; bn.channels()];
        bn.running_var = vec![0.0; bn.channels()];
    }
    let y = bottleneck(&x, &mut p).unwrap();
    for (yv, xv) in y.data().iter().zip(x.data()) {
        assert_eq!(*yv, xv.max(0.0));
    }
}

#[test]
fn bottleneck_preserves_spatial_size() {
    for (h, w) in [(1, 1), (3, 5), (4, 4)] {
        let x = Tensor::filled(&[2, 4, h, w], 0.3);
        let mut p = zeroed_bottleneck(4, 2);
        let y = bottleneck(&x, &mut p).unwrap();
        assert_eq!(y.shape(), &[2, 4, h, w]);
    }
}

#[test]
fn bottleneck_end_to_end_gradient_checks_out() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (in_c, mid) = (8, 2);
    let w1 = randn(&mut rng, mid * in_c);
    let w2 = randn(&mut rng, mid * mid * 9);
    let w3 = randn(&mut rng, in_c * mid);
    let x = randn(&mut rng, 2 * in_c * 4 * 4);

    let err = grad_check(
        |t| {
            let mut p = zeroed_bottleneck(in_c, mid);
            p.conv1.weight = Tensor::constant(w1.clone(), &[mid, in_c, 1, 1]);
            p.conv2.weight = Tensor::constant(w2.clone(), &[mid, mid, 3, 3]);
            p.conv3.weight = Tensor::constant(w3.clone(), &[in_c, mid, 1, 1]);
            for bn in [&mut p.bn1, &mut p.bn2, &mut p.bn3] {
                bn.mode = BnMode::Train;
            }
            bottleneck(t, &mut p).map(|y| y.mul(&y).sum())
        },
        &Tensor::constant(x, &[2, in_c, 4, 4]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "bottleneck grad err {err}");
}
