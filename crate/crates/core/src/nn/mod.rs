//! Small reverse-mode differentiation kit for fixed layer stacks: dense,
//! (transposed) convolution, activations, reshaping, side-input
//! concatenation, batch norm and a reparameterized sampling layer, plus
//! Adam and a checkpoint format.

pub mod gradcheck;
mod layer;
mod optim;
mod stack;
mod tensor;

pub use gradcheck::gradient_check;
pub use layer::{Activation, LayerSpec, Mode};
pub use optim::Adam;
pub use stack::{Architecture, BatchStats, Gradients, LayerStack, Tape, CHECKPOINT_MAGIC};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Mean squared error over all elements and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.data().len().max(1) as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::raw(pred.shape().to_vec(), grad)))
}

/// KL(N(mu, diag exp logvar) ‖ N(0, I)).
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l)).sum()
}

/// mu + exp(logvar/2)·eps.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter().zip(logvar).zip(eps).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use super::gradcheck::randn;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn arch(input: &[usize], side: usize, layers: Vec<LayerSpec>) -> Architecture {
        Architecture { input_shape: input.to_vec(), side_width: side, layers }
    }

    fn check_seeds(name: &str, a: &Architecture, batch: usize, mode: Mode, kinks: bool) {
        for seed in 0..10 {
            let e = gradient_check(a, batch, mode, seed, kinks).unwrap();
            assert!(e < 1e-4, "{name} seed {seed}: max relative error {e:.3e}");
        }
    }

    fn act(func: Activation) -> LayerSpec {
        LayerSpec::Activation { func }
    }

    #[test]
    fn grad_dense() {
        check_seeds("dense", &arch(&[5], 0, vec![LayerSpec::Dense { units: 4 }]), 3, Mode::Train, false);
    }

    #[test]
    fn grad_conv2d() {
        let a = arch(&[2, 5, 6], 0, vec![LayerSpec::Conv2d { filters: 3, kernel: 3, stride: 2, padding: 1 }]);
        check_seeds("conv2d", &a, 2, Mode::Train, false);
        let a = arch(&[1, 4, 4], 0, vec![LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 1, padding: 0 }]);
        check_seeds("conv2d valid", &a, 2, Mode::Train, false);
    }

    #[test]
    fn grad_conv_transpose() {
        let a = arch(
            &[3, 3, 4],
            0,
            vec![LayerSpec::ConvTranspose2d { filters: 2, kernel: 3, stride: 2, padding: 1, output_padding: 1 }],
        );
        check_seeds("conv_transpose2d", &a, 2, Mode::Train, false);
    }

    #[test]
    fn grad_activations() {
        for f in [Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Linear] {
            let a = arch(&[6], 0, vec![act(f)]);
            check_seeds(&format!("{f:?}"), &a, 3, Mode::Train, true);
        }
    }

    #[test]
    fn grad_reshape_concat() {
        let a = arch(
            &[1, 4, 6],
            2,
            vec![
                LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Flatten,
                LayerSpec::ConcatSide,
                LayerSpec::Dense { units: 12 },
                LayerSpec::Reshape { shape: vec![3, 2, 2] },
                act(Activation::Tanh),
            ],
        );
        check_seeds("flatten/concat/reshape", &a, 3, Mode::Train, false);
    }

    #[test]
    fn grad_batch_norm() {
        let bn = LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 };
        let dense = arch(&[4], 0, vec![LayerSpec::Dense { units: 3 }, bn.clone()]);
        check_seeds("batch_norm dense train", &dense, 5, Mode::Train, false);
        check_seeds("batch_norm dense eval", &dense, 5, Mode::Eval, false);
        let conv = arch(&[2, 3, 3], 0, vec![bn]);
        check_seeds("batch_norm conv train", &conv, 3, Mode::Train, false);
    }

    #[test]
    fn grad_sampling() {
        let a = arch(&[6], 0, vec![LayerSpec::Dense { units: 8 }, LayerSpec::Sampling { kl_weight: 0.5 }]);
        check_seeds("sampling train", &a, 3, Mode::Train, false);
        check_seeds("sampling eval", &a, 3, Mode::Eval, false);
    }

    #[test]
    fn grad_encoder_decoder() {
        let a = arch(
            &[1, 8, 8],
            2,
            vec![
                LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 2, padding: 1 },
                act(Activation::Tanh),
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 6 },
                LayerSpec::Sampling { kl_weight: 1e-1 },
                LayerSpec::ConcatSide,
                LayerSpec::Dense { units: 32 },
                act(Activation::Tanh),
                LayerSpec::Reshape { shape: vec![2, 4, 4] },
                LayerSpec::ConvTranspose2d { filters: 2, kernel: 3, stride: 2, padding: 1, output_padding: 1 },
            ],
        );
        check_seeds("encoder/decoder", &a, 2, Mode::Train, false);
    }

    #[test]
    fn identity_dense_passes_input() {
        let a = arch(&[3], 0, vec![LayerSpec::Dense { units: 3 }, act(Activation::Linear)]);
        let mut s = LayerStack::new(a, RngSeed::new(0, 0)).unwrap();
        {
            let mut p = s.params_mut();
            *p[0] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            *p[1] = vec![0.0; 3];
        }
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(s.predict(&x, None).unwrap(), x);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let s = LayerStack::new(arch(&[2, 3], 0, vec![act(Activation::Tanh)]), RngSeed::new(0, 0)).unwrap();
        let x = Tensor::zeros(vec![4, 2, 3]);
        assert_eq!(s.predict(&x, None).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let a = arch(&[1, 5, 5], 0, vec![LayerSpec::Conv2d { filters: 1, kernel: 3, stride: 1, padding: 1 }]);
        let mut s = LayerStack::new(a, RngSeed::new(0, 0)).unwrap();
        *s.params_mut()[0] = vec![1.0; 9];
        let y = s.predict(&Tensor::new(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap(), None).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let a = arch(
            &[4, 2, 8],
            0,
            vec![LayerSpec::ConvTranspose2d { filters: 2, kernel: 3, stride: 2, padding: 1, output_padding: 1 }],
        );
        let s = LayerStack::new(a, RngSeed::new(0, 0)).unwrap();
        assert_eq!(s.output_shape(), &[2, 4, 16]);
    }

    #[test]
    fn dense_sum_loss_weight_gradient() {
        let a = arch(&[2], 0, vec![LayerSpec::Dense { units: 3 }]);
        let s = LayerStack::new(a, RngSeed::new(4, 0)).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let (y, tape) = s.forward(&x, None, Mode::Train, RngSeed::new(0, 0)).unwrap();
        let g = s.backward(tape, &Tensor::new(y.shape().to_vec(), vec![1.0; 6]).unwrap()).unwrap();
        // Every output row gets the batch-summed input.
        for o in 0..3 {
            assert!((g.params[0][o * 2] - -2.0).abs() < 1e-15);
            assert!((g.params[0][o * 2 + 1] - 2.5).abs() < 1e-15);
            assert_eq!(g.params[1][o], 2.0);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let a = arch(
            &[1, 4, 4],
            0,
            vec![
                LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 1, padding: 1 },
                act(Activation::Tanh),
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
        );
        let s = LayerStack::new(a, RngSeed::new(1, 0)).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], randn(32, RngSeed::new(2, 0))).unwrap();
        let (y, tape) = s.forward(&x, None, Mode::Train, RngSeed::new(0, 0)).unwrap();
        let g = s.backward(tape, &Tensor::zeros(y.shape().to_vec())).unwrap();
        assert!(g.params.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let a = arch(&[2], 0, vec![LayerSpec::Dense { units: 2 }]);
        let mut s = LayerStack::new(a, RngSeed::new(0, 0)).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (y, tape) = s.forward(&x, None, Mode::Train, RngSeed::new(0, 0)).unwrap();
        let grads = s.params().iter().map(|p| vec![0.1; p.len()]).collect::<Vec<_>>();
        Adam::new(1e-3).step_stack(&mut s, &grads).unwrap();
        assert!(matches!(s.backward(tape, &y), Err(Error::StaleTape(_))));
    }

    #[test]
    fn eval_forward_is_pure() {
        let a = arch(&[4], 0, vec![LayerSpec::Dense { units: 6 }, LayerSpec::Sampling { kl_weight: 1.0 }]);
        let s = LayerStack::new(a, RngSeed::new(3, 0)).unwrap();
        let x = Tensor::new(vec![2, 4], randn(8, RngSeed::new(5, 0))).unwrap();
        let y1 = s.forward(&x, None, Mode::Eval, RngSeed::new(1, 0)).unwrap().0;
        let y2 = s.forward(&x, None, Mode::Eval, RngSeed::new(2, 0)).unwrap().0;
        assert_eq!(y1, y2);
        let t1 = s.forward(&x, None, Mode::Train, RngSeed::new(1, 0)).unwrap().0;
        assert_ne!(t1, y1);
    }

    #[test]
    fn parameter_count_matches_hyperparameters() {
        let a = arch(
            &[1, 16, 64],
            2,
            vec![
                LayerSpec::Conv2d { filters: 16, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Conv2d { filters: 32, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 20 },
                LayerSpec::ConcatSide,
                LayerSpec::Dense { units: 32 * 4 * 16 },
                LayerSpec::Reshape { shape: vec![32, 4, 16] },
                LayerSpec::ConvTranspose2d { filters: 16, kernel: 3, stride: 2, padding: 1, output_padding: 1 },
                LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 },
            ],
        );
        let s = LayerStack::new(a, RngSeed::new(0, 0)).unwrap();
        let expect = (16 * 9 + 16)
            + (32 * 16 * 9 + 32)
            + (32 * 4 * 16 * 20 + 20)
            + (22 * 2048 + 2048)
            + (32 * 16 * 9 + 16)
            + 2 * 16;
        assert_eq!(s.param_count(), expect);
        assert_eq!(s.output_shape(), &[16, 8, 32]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let a = arch(&[6], 0, vec![LayerSpec::Dense { units: 4 }, LayerSpec::Conv2d { filters: 1, kernel: 3, stride: 1, padding: 1 }]);
        let e = LayerStack::new(a, RngSeed::new(0, 0)).unwrap_err().to_string();
        assert!(e.contains("layer 1"), "{e}");
        let even = arch(&[1, 4, 4], 0, vec![LayerSpec::Conv2d { filters: 1, kernel: 2, stride: 1, padding: 0 }]);
        assert!(LayerStack::new(even, RngSeed::new(0, 0)).is_err());
        let ok = LayerStack::new(arch(&[3], 0, vec![LayerSpec::Dense { units: 2 }]), RngSeed::new(0, 0)).unwrap();
        assert!(ok.predict(&Tensor::zeros(vec![1, 4]), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let a = arch(&[3], 2, vec![LayerSpec::ConcatSide, LayerSpec::Dense { units: 4 }, LayerSpec::BatchNorm { momentum: 0.5, eps: 1e-5 }]);
        let s = LayerStack::new(a.clone(), RngSeed::new(9, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        s.save(&path).unwrap();
        let back = LayerStack::load(&path, Some(&a)).unwrap();
        for (p, q) in s.params().iter().zip(back.params()) {
            for (x, y) in p.iter().zip(q) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let other = arch(&[3], 2, vec![LayerSpec::ConcatSide, LayerSpec::Dense { units: 5 }]);
        assert!(LayerStack::load(&path, Some(&other)).is_err());
    }

    #[test]
    fn loss_helpers() {
        assert_eq!(kl_standard_normal(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_standard_normal(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(reparameterize(&[1.0, 2.0], &[0.3, -1.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[1.0], &[0.0], &[0.25]), vec![1.25]);
        let p = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn reparameterized_spread_matches_logvar() {
        let n = 100_000;
        let mut r = RngSeed::new(21, 0).rng();
        let eps: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let z = reparameterize(&vec![0.7; n], &vec![-0.8; n], &eps);
        let mean = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let expect = (-0.4f64).exp();
        assert!((sd / expect - 1.0).abs() < 0.02, "{sd} vs {expect}");
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 1..8), lv in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let k = kl_standard_normal(&mu, &lv[..mu.len()]);
            proptest::prop_assert!(k >= 0.0);
        }
    }
}
