//! Minimal reverse-mode automatic differentiation: exactly the layer and
//! loss vocabulary the detector needs, recorded on a [`Tape`] and replayed
//! in reverse. See [`tape::Tape`] for the op set.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{sgd_step, BnMode, RunningStats, Tape, ValueId, PROB_FLOOR};
pub use tensor::{AutogradError, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0))
    }

    /// Reference convolution: the direct sextuple loop, no reuse of the
    /// production kernel's structure.
    fn conv_reference(
        input: &Tensor,
        weight: &Tensor,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (n, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (f, _, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        let iv = input.data()
                                            [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                        let wv = weight.data()
                                            [((fi * c + ci) * kh + ky) * kw + kx];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        t(&[n, f, oh, ow], &out)
    }

    #[test]
    fn conv2d_all_ones_sums_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let input = rand_tensor(&[1, 1, 4, 5], &mut rng);
        let x = tape.leaf(input.clone());
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), input.data());
    }

    #[test]
    fn conv2d_matches_reference_loop() {
        let mut rng = Rng::new(3);
        let input = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let weight = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = rand_tensor(&[3], &mut rng);
        let expect = conv_reference(&input, &weight, bias.data(), 2, 1);

        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let w = tape.leaf(weight);
        let b = tape.leaf(bias);
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3, 3]);
        for (a, e) in tape.data(y).iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn conv_and_pool_shapes_satisfy_floor_formula() {
        for h in 3..8 {
            for k in 1..=3 {
                for s in 1..=3 {
                    for p in 0..=1 {
                        let mut tape = Tape::new();
                        let x = tape.leaf(Tensor::zeros(vec![1, 1, h, h]));
                        let w = tape.leaf(Tensor::zeros(vec![1, 1, k, k]));
                        let b = tape.leaf(Tensor::zeros(vec![1]));
                        match tape.conv2d(x, w, b, s, p) {
                            Ok(y) => {
                                let expect = (h + 2 * p - k) / s + 1;
                                assert_eq!(tape.shape(y), &[1, 1, expect, expect]);
                            }
                            Err(_) => assert!(h + 2 * p < k),
                        }
                        if p == 0 && k <= h {
                            let mut tape = Tape::new();
                            let x = tape.leaf(Tensor::zeros(vec![1, 1, h, h]));
                            let y = tape.maxpool2d(x, k, s).unwrap();
                            let expect = (h - k) / s + 1;
                            assert_eq!(tape.shape(y), &[1, 1, expect, expect]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_zeroes_out() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 1, 2, 2], 3.7));
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let mut stats = RunningStats::new(1);
        let y = tape
            .batchnorm(x, g, b, &mut stats, BnMode::Train, 0.9, 1e-5)
            .unwrap();
        assert!(tape.data(y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batchnorm_beta_shifts_channel_mean() {
        let mut rng = Rng::new(4);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 3, 4, 4], &mut rng));
        let g = tape.leaf(Tensor::full(vec![3], 1.0));
        let b = tape.leaf(Tensor::full(vec![3], 5.0));
        let mut stats = RunningStats::new(3);
        let y = tape
            .batchnorm(x, g, b, &mut stats, BnMode::Train, 0.9, 1e-5)
            .unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for n in 0..2 {
                for i in 0..16 {
                    sum += tape.data(y)[(n * 3 + c) * 16 + i];
                }
            }
            assert!((sum / 32.0 - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_statistics_match_direct_computation() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 3, 4, 4], &mut rng));
        let gamma = [1.5, 0.5, 2.0];
        let beta = [-1.0, 0.25, 3.0];
        let g = tape.leaf(t(&[3], &gamma));
        let b = tape.leaf(t(&[3], &beta));
        let mut stats = RunningStats::new(3);
        let y = tape
            .batchnorm(x, g, b, &mut stats, BnMode::Train, 0.9, 1e-5)
            .unwrap();
        // Direct per-channel statistics oracle over the output.
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| tape.data(y)[(n * 3 + c) * 16 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!((mean - beta[c]).abs() < 1e-6);
            assert!((var - gamma[c] * gamma[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[4.0, 6.0]));
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let mut stats = RunningStats {
            mean: vec![5.0],
            var: vec![4.0],
        };
        let y = tape
            .batchnorm(x, g, b, &mut stats, BnMode::Eval, 0.9, 1e-12)
            .unwrap();
        assert!((tape.data(y)[0] - (4.0 - 5.0) / 2.0).abs() < 1e-9);
        assert!((tape.data(y)[1] - (6.0 - 5.0) / 2.0).abs() < 1e-9);
        // Eval must not touch the stats.
        assert_eq!(stats.mean, vec![5.0]);
    }

    #[test]
    fn batchnorm_rejects_bad_epsilon() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let mut stats = RunningStats::new(1);
        assert!(tape
            .batchnorm(x, g, b, &mut stats, BnMode::Train, 0.9, 0.0)
            .is_err());
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 6], &[0.3; 6]));
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(vec![4, 7], |_| rng.range(-30.0, 30.0)));
            let y = tape.softmax(x, 1).unwrap();
            for row in 0..4 {
                let s: f64 = tape.data(y)[row * 7..(row + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn maxpool_window_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn maxpool_matches_bruteforce_windows() {
        let mut rng = Rng::new(7);
        let input = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            m = m.max(input.data()[(c * 6 + oy * 2 + ky) * 6 + ox * 2 + kx]);
                        }
                    }
                    assert_eq!(tape.data(y)[(c * 3 + oy) * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn bce_known_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[1.0]));
        let l = tape.loss_bce(p, &[1.0]).unwrap();
        assert!(tape.data(l)[0].abs() < 1e-9);

        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.5]));
        let l = tape.loss_bce(p, &[1.0]).unwrap();
        assert!((tape.data(l)[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_elementwise_sum_oracle() {
        let mut rng = Rng::new(8);
        let preds: Vec<f64> = (0..40).map(|_| rng.range(0.01, 0.99)).collect();
        let targets: Vec<f64> = (0..40).map(|_| (rng.below(2)) as f64).collect();
        let mut expect = 0.0;
        for (p, t) in preds.iter().zip(&targets) {
            expect -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        expect /= 40.0;
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[40], &preds));
        let l = tape.loss_bce(p, &targets).unwrap();
        assert!((tape.data(l)[0] - expect).abs() < 1e-12);
        assert!(tape.data(l)[0] >= 0.0);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.5]));
        assert!(tape.loss_bce(p, &[0.5]).is_err());
    }

    #[test]
    fn cce_known_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let l = tape.loss_cce(p, &[1]).unwrap();
        assert!(tape.data(l)[0].abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1, 6], &[1.0 / 6.0; 6]));
        let l = tape.loss_cce(p, &[4]).unwrap();
        assert!((tape.data(l)[0] - 6.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cce_batch_mean_of_row_oracle() {
        let mut rng = Rng::new(9);
        let mut rows = vec![0.0; 3 * 4];
        for r in 0..3 {
            let mut sum = 0.0;
            for c in 0..4 {
                rows[r * 4 + c] = rng.range(0.05, 1.0);
                sum += rows[r * 4 + c];
            }
            for c in 0..4 {
                rows[r * 4 + c] /= sum;
            }
        }
        let classes = [2usize, 0, 3];
        let expect = classes
            .iter()
            .enumerate()
            .map(|(r, &k)| -rows[r * 4 + k].ln())
            .sum::<f64>()
            / 3.0;
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[3, 4], &rows));
        let l = tape.loss_cce(p, &classes).unwrap();
        assert!((tape.data(l)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn cce_rejects_class_out_of_range() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[1, 3], &[0.2, 0.3, 0.5]));
        assert!(tape.loss_cce(p, &[3]).is_err());
    }

    #[test]
    fn mse_known_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[0.0, 0.0]));
        let target = tape.constant(t(&[2], &[3.0, 4.0]));
        let l = tape.loss_mse(p, target).unwrap();
        assert_eq!(tape.data(l)[0], 12.5);

        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.loss_mse(a, b).unwrap();
        assert_eq!(tape.data(l)[0], 0.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.loss_mse(a, b).is_err());
    }

    #[test]
    fn mse_gradient_matches_closed_form_and_fd() {
        let mut rng = Rng::new(10);
        let pred = rand_tensor(&[6], &mut rng).with_grad();
        let target = rand_tensor(&[6], &mut rng);
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let tt = tape.constant(target.clone());
        let l = tape.loss_mse(p, tt).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(p).unwrap().to_vec();
        for i in 0..6 {
            let expect = 2.0 * (pred.data()[i] - target.data()[i]) / 6.0;
            assert!((grad[i] - expect).abs() < 1e-12);
            // Central finite difference.
            let f = |v: f64| {
                let mut d = pred.data().to_vec();
                d[i] = v;
                d.iter()
                    .zip(target.data())
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    / 6.0
            };
            let h = 1e-5;
            let fd = (f(pred.data()[i] + h) - f(pred.data()[i] - h)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 3], 2.5).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut rng = Rng::new(11);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[4], &mut rng).with_grad());
        let y = tape.sigmoid(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(AutogradError::NotScalar(_))
        ));
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2], 1.0).with_grad());
        let unused = tape.leaf(Tensor::full(vec![3], 1.0).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn composite_network_gradients_match_finite_differences() {
        // conv -> batchnorm -> relu -> maxpool -> linear -> softmax -> cce,
        // every parameter checked against the central-difference oracle.
        let mut rng = Rng::new(12);
        let input = rand_tensor(&[2, 2, 6, 6], &mut rng);
        let conv_w0 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let conv_b0 = rand_tensor(&[3], &mut rng);
        let gamma0 = Tensor::from_fn(vec![3], |_| rng.range(0.5, 1.5));
        let beta0 = rand_tensor(&[3], &mut rng);
        let lin_w0 = rand_tensor(&[4, 3 * 2 * 2], &mut rng);
        let lin_b0 = rand_tensor(&[4], &mut rng);
        let classes = [1usize, 3];

        let forward = |params: &[Tensor], tape: &mut Tape, with_grad: bool| {
            let mut stats = RunningStats::new(3);
            let x = tape.constant(input.clone());
            let ids: Vec<ValueId> = params
                .iter()
                .map(|p| {
                    let mut p = p.clone();
                    p.requires_grad = with_grad;
                    tape.leaf(p)
                })
                .collect();
            let c = tape.conv2d(x, ids[0], ids[1], 1, 0).unwrap();
            let bn = tape
                .batchnorm(c, ids[2], ids[3], &mut stats, BnMode::Train, 0.9, 1e-5)
                .unwrap();
            let r = tape.relu(bn).unwrap();
            let p = tape.maxpool2d(r, 2, 2).unwrap();
            let flat = tape.reshape(p, vec![2, 3 * 2 * 2]).unwrap();
            let lin = tape.linear(flat, ids[4], ids[5]).unwrap();
            let sm = tape.softmax(lin, 1).unwrap();
            let loss = tape.loss_cce(sm, &classes).unwrap();
            (ids, loss)
        };

        let params = vec![conv_w0, conv_b0, gamma0, beta0, lin_w0, lin_b0];
        let mut tape = Tape::new();
        let (ids, loss) = forward(&params, &mut tape, true);
        tape.backward(loss).unwrap();

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = tape.grad(ids[pi]).unwrap().to_vec();
            for k in 0..p.numel() {
                let probe = |v: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[k] = v;
                    let mut t2 = Tape::new();
                    let (_, l) = forward(&ps, &mut t2, false);
                    t2.data(l)[0]
                };
                let fd = (probe(p.data()[k] + h) - probe(p.data()[k] - h)) / (2.0 * h);
                let denom = analytic[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (analytic[k] - fd).abs() / denom < 1e-4,
                    "param {pi}[{k}]: analytic {} vs fd {fd}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&[1, 2, 5, 5], &mut rng).with_grad());
            let w = tape.leaf(rand_tensor(&[2, 2, 3, 3], &mut rng).with_grad());
            let b = tape.leaf(rand_tensor(&[2], &mut rng).with_grad());
            let c = tape.conv2d(x, w, b, 1, 1).unwrap();
            let r = tape.relu(c).unwrap();
            let s = tape.sum(r).unwrap();
            tape.backward(s).unwrap();
            (
                tape.data(s).to_vec(),
                tape.grad(w).unwrap().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn sgd_step_semantics() {
        let mut p = t(&[1], &[1.0]);
        sgd_step(&mut p, &[2.0], 0.1, false).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);

        let mut p = t(&[2], &[1.0, -2.0]);
        sgd_step(&mut p, &[5.0, 5.0], 0.0, false).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut p = t(&[2], &[1.0, -2.0]);
        let before = p.data().to_vec();
        sgd_step(&mut p, &[5.0, 5.0], 0.1, true).unwrap();
        assert_eq!(p.data(), &before[..]);

        let mut p = t(&[1], &[1.0]);
        assert!(sgd_step(&mut p, &[f64::NAN], 0.1, false).is_err());
    }

    #[test]
    fn gather_routes_gradient_to_sources() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 5.0, 2.0, 5.0]).with_grad());
        let g = tape.gather(x, vec![1, 1, 3], vec![3]).unwrap();
        assert_eq!(tape.data(g), &[5.0, 5.0, 5.0]);
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 2.0, 0.0, 1.0]);
    }
}
