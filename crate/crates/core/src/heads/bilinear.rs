use crate::error::{Error, Result};
use crate::nn::layers::conv2d_forward;
use crate::nn::{flops, Padding};
use crate::tensor::{Scalar, Tensor};

/// Linear 1×1 projection `(N,H,W,C) → (N,H,W,K)` with weights `(1,1,C,K)`.
pub fn channel_reduce<T: Scalar>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 1 {
        return Err(Error::shape("channel_reduce", format!("weights must be (1,1,C,K), got {ws:?}")));
    }
    conv2d_forward(features, weights, bias, 1, Padding::Same)
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected (N,H,W,K), got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `B[n] = Σ_{i,j} f(i,j) f(i,j)ᵀ` for each sample: `(N,H,W,K) → (N,K,K)`.
pub fn bilinear_pool_self<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    bilinear_pool_dual(features, features)
}

/// `B[n] = Σ_{i,j} f_A(i,j) f_B(i,j)ᵀ`: `(N,H,W,K_A) × (N,H,W,K_B) → (N,K_A,K_B)`.
pub fn bilinear_pool_dual<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, ka] = dims4("bilinear_pool", a)?;
    let [nb, hb, wb, kb] = dims4("bilinear_pool", b)?;
    if (h, w) != (hb, wb) {
        return Err(Error::SpatialMismatch { a: (h, w), b: (hb, wb) });
    }
    if n != nb {
        return Err(Error::shape("bilinear_pool", format!("batch {n} vs {nb}")));
    }
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * ka * kb];
    for s in 0..n {
        let acc = &mut out[s * ka * kb..(s + 1) * ka * kb];
        for p in 0..hw {
            let fa = &ad[(s * hw + p) * ka..][..ka];
            let fb = &bd[(s * hw + p) * kb..][..kb];
            for (row, &x) in acc.chunks_exact_mut(kb).zip(fa) {
                for (o, &y) in row.iter_mut().zip(fb) {
                    *o += x * y;
                }
            }
        }
    }
    flops::record((n * 2 * hw * ka * kb) as u64);
    Tensor::new(vec![n, ka, kb], out)
}

/// Gradients of [`bilinear_pool_dual`]: `dF_A(i,j) = G·f_B(i,j)`,
/// `dF_B(i,j) = Gᵀ·f_A(i,j)`.
pub fn bilinear_pool_dual_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, h, w, ka] = dims4("bilinear_pool_backward", a)?;
    let [_, _, _, kb] = dims4("bilinear_pool_backward", b)?;
    if grad_out.shape() != [n, ka, kb] {
        return Err(Error::shape("bilinear_pool_backward", format!("upstream {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for s in 0..n {
        let g = &gd[s * ka * kb..(s + 1) * ka * kb];
        for p in 0..hw {
            let fa = &ad[(s * hw + p) * ka..][..ka];
            let fb = &bd[(s * hw + p) * kb..][..kb];
            let da = &mut ga[(s * hw + p) * ka..][..ka];
            for (i, d) in da.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (j, &y) in fb.iter().enumerate() {
                    acc += g[i * kb + j] * y;
                }
                *d = acc;
            }
            let db = &mut gb[(s * hw + p) * kb..][..kb];
            for (j, d) in db.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (i, &x) in fa.iter().enumerate() {
                    acc += g[i * kb + j] * x;
                }
                *d = acc;
            }
        }
    }
    Ok((Tensor::new(a.shape().to_vec(), ga)?, Tensor::new(b.shape().to_vec(), gb)?))
}

/// Gradient of [`bilinear_pool_self`]: `dF(i,j) = (G + Gᵀ)·f(i,j)`.
pub fn bilinear_pool_self_backward<T: Scalar>(features: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (ga, gb) = bilinear_pool_dual_backward(features, features, grad_out)?;
    let data = ga.data().iter().zip(gb.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(features.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::conv2d_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn reducer_examples() {
        let f = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[2., 4., 2., 4., 2., 4., 2., 4.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[0.5, 0.5]).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = channel_reduce(&f, &w, Some(&b)).unwrap();
        assert_eq!(out.data(), &[3.0; 4]);

        let f = random(&[2, 3, 3, 4], 1);
        let id = Tensor::from_fn(&[1, 1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(channel_reduce(&f, &id, None).unwrap(), f);

        let w = random(&[1, 1, 4, 2], 2);
        let b = random(&[2], 3);
        assert_eq!(
            channel_reduce(&f, &w, Some(&b)).unwrap(),
            conv2d_forward(&f, &w, Some(&b), 1, Padding::Same).unwrap()
        );
        let bad = random(&[1, 1, 3, 2], 2);
        assert!(channel_reduce(&f, &bad, None).is_err());
    }

    #[test]
    fn self_pool_examples() {
        let f = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1., 2.]).unwrap();
        assert_eq!(bilinear_pool_self(&f).unwrap().data(), &[1., 2., 2., 4.]);
        let f = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        assert_eq!(bilinear_pool_self(&f).unwrap().data(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn dual_pool_examples() {
        let a = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1., 2.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[3.]).unwrap();
        let out = bilinear_pool_dual(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1]);
        assert_eq!(out.data(), &[3., 6.]);

        let f = random(&[2, 3, 3, 3], 4);
        assert_eq!(bilinear_pool_dual(&f, &f).unwrap(), bilinear_pool_self(&f).unwrap());

        let a = random(&[1, 3, 3, 2], 5);
        let b = random(&[1, 2, 3, 2], 6);
        assert!(matches!(
            bilinear_pool_dual(&a, &b),
            Err(Error::SpatialMismatch { a: (3, 3), b: (2, 3) })
        ));
    }

    #[test]
    fn dual_pool_matches_naive_loop() {
        let a = random(&[2, 4, 3, 3], 7);
        let b = random(&[2, 4, 3, 5], 8);
        let out = bilinear_pool_dual(&a, &b).unwrap();
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for y in 0..4 {
                        for x in 0..3 {
                            acc += a.at(&[n, y, x, i]) * b.at(&[n, y, x, j]);
                        }
                    }
                    let got = out.at(&[n, i, j]);
                    assert!((got - acc).abs() <= 1e-5 * acc.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn self_backward_is_symmetrized_upstream_times_feature() {
        let f = random(&[1, 2, 2, 3], 9);
        let g = random(&[1, 3, 3], 10);
        let d = bilinear_pool_self_backward(&f, &g).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for i in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..3 {
                        acc += (g.at(&[0, i, j]) + g.at(&[0, j, i])) * f.at(&[0, y, x, j]);
                    }
                    assert!((d.at(&[0, y, x, i]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
