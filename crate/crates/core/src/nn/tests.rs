use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn channel_stats(y: &[f64], shape: &[usize]) -> Vec<(f64, f64)> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| y[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        })
        .collect()
}

#[test]
fn batchnorm_training_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::randn(&[4, 3, 5, 5], 3.0, &mut rng).add_scalar(7.0);
    let mut bn = BatchNorm2d::new(3);
    let y = bn.normalize(&x, Mode::Train).unwrap();
    for (mean, var) in channel_stats(&y.to_vec(), y.shape()) {
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
    // running stats moved towards the batch statistics
    assert!(bn.running_mean.iter().all(|&m| (m - 0.7).abs() < 0.2));
}

#[test]
fn batchnorm_constant_channel_gives_zeros() {
    let x = Tensor::full(&[2, 2, 3, 3], 4.5);
    let mut bn = BatchNorm2d::new(2);
    let y = bn.normalize(&x, Mode::Train).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    // ±1 per channel: mean 0, population variance 1.
    let mut data = Vec::new();
    for b in 0..2 {
        for _c in 0..2 {
            for i in 0..4 {
                data.push(if (i + b) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
    }
    let x = Tensor::new(data, &[2, 2, 2, 2]).unwrap();
    let mut bn = BatchNorm2d::new(2);
    let y = bn.forward(&x, Mode::Train).unwrap();
    for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
        assert!((a - b).abs() < 1e-5 * 1.0 + 1e-6, "{a} vs {b}");
    }
}

#[test]
fn batchnorm_requires_batch_of_two() {
    let mut bn = BatchNorm2d::new(1);
    let err = bn.forward(&Tensor::ones(&[1, 1, 2, 2]), Mode::Train).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(bn.forward(&Tensor::ones(&[1, 1, 2, 2]), Mode::Eval).is_ok());
    assert!(bn.forward(&Tensor::ones(&[2, 3, 2, 2]), Mode::Train).is_err());
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::uniform(&[3, 2, 2, 2], -2.0, 2.0, &mut rng);
    x.set_requires_grad(true);
    let probe = Tensor::uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let f = |x: &Tensor| {
        let mut bn = BatchNorm2d::new(2);
        bn.forward(x, Mode::Train).unwrap().mul(&probe).unwrap().sum()
    };
    f(&x).backward().unwrap();
    let g = x.grad().unwrap();
    for j in 0..x.numel() {
        let at = |d: f64| {
            let mut v = x.to_vec();
            v[j] += d;
            f(&Tensor::new(v, x.shape()).unwrap()).item()
        };
        let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
        assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{j}: {fd} vs {}", g[j]);
    }
}

#[test]
fn dense_forward_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut d = Dense::new(3, 2, &mut rng);
    d.weight.update_data(|w| w.copy_from_slice(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.5])).unwrap();
    let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let y = d.forward(&x, Mode::Train).unwrap();
    assert_eq!(y.to_vec(), vec![-2.0, 5.5]);
    y.sum().backward().unwrap();
    assert_eq!(d.weight.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert_eq!(d.bias.grad().unwrap(), vec![1.0, 1.0]);
    assert!(d.forward(&Tensor::ones(&[1, 4]), Mode::Train).is_err());
}

#[test]
fn module_enumerates_params_and_buffers() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut conv = Conv2d::new(2, 4, 3, 1, 1, true, &mut rng);
    conv.enable_spectral_norm(true, &mut rng);
    let mut ps = Vec::new();
    conv.params("c", &mut ps);
    let names: Vec<_> = ps.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["c.weight", "c.bias"]);
    let mut bs = Vec::new();
    conv.buffers("c", &mut bs);
    assert_eq!(bs.len(), 1);
    assert_eq!(bs[0].name, "c.sn_u");
    assert_eq!(bs[0].values.len(), 4);

    let mut bn = BatchNorm2d::new(3);
    let mut bs = Vec::new();
    bn.buffers("bn", &mut bs);
    assert_eq!(bs.len(), 2);
}

#[test]
fn spectral_norm_bounds_effective_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut conv = Conv2d::new(3, 6, 3, 1, 1, false, &mut rng);
    conv.weight.update_data(|w| w.iter_mut().for_each(|v| *v *= 100.0)).unwrap();
    conv.enable_spectral_norm(true, &mut rng);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
    for _ in 0..60 {
        conv.forward(&x, Mode::Train).unwrap();
    }
    let w = conv.effective_weight().unwrap();
    let m = nalgebra::DMatrix::from_row_slice(6, 27, &w.to_vec());
    assert!(m.singular_values().max() <= 1.0 + 1e-3);
    let sn = conv.spectral_norm().unwrap();
    let unorm: f64 = sn.u().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((unorm - 1.0).abs() < 1e-6);
}
