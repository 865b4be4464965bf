//! Elementary kernels. All loops run in ascending index order so results are
//! reproducible bit for bit.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `C = A · B` for rank-2 operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims {k} and {k2} disagree"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    /// Multiply every element by a scalar.
    Scale(f64),
    Relu,
    Exp,
    Log,
}

/// Applies `op` per element. Binary ops take two equally shaped operands;
/// unary ops use only the first.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = operands
        .first()
        .ok_or_else(|| Error::shape("elementwise", "no operands"))?;
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let second = operands
            .get(1)
            .ok_or_else(|| Error::shape("elementwise", "binary op needs two operands"))?;
        if first.shape() != second.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", first.shape(), second.shape()),
            ));
        }
        let data = first
            .data()
            .iter()
            .zip(second.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(first.shape().to_vec(), data)
    };
    match op {
        ElementwiseOp::Add => binary(|x, y| x + y),
        ElementwiseOp::Mul => binary(|x, y| x * y),
        ElementwiseOp::Scale(c) => {
            let c = T::from_f64(c);
            Ok(first.map(|x| x * c))
        }
        ElementwiseOp::Relu => Ok(first.map(|x| x.max(T::zero()))),
        ElementwiseOp::Exp => Ok(first.map(|x| x.exp())),
        ElementwiseOp::Log => Ok(first.map(|x| x.ln())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduces over `axes`; the reduced axes are removed from the shape. Reducing
/// every axis yields a shape-`[1]` tensor.
pub fn reduce<T: Scalar>(op: ReduceOp, tensor: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = tensor.shape();
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(Error::BadAxis { axis, rank });
        }
        reduced[axis] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_len: usize = out_shape.iter().product();
    let init = match op {
        ReduceOp::Max => T::neg_infinity(),
        _ => T::zero(),
    };
    let mut out = vec![init; out_len.max(1)];
    let count = tensor.len() / out_len.max(1);

    let mut index = vec![0usize; rank];
    for &v in tensor.data() {
        let mut flat = 0;
        for axis in 0..rank {
            if !reduced[axis] {
                flat = flat * shape[axis] + index[axis];
            }
        }
        match op {
            ReduceOp::Sum | ReduceOp::Mean => out[flat] += v,
            ReduceOp::Max => out[flat] = out[flat].max(v),
        }
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    if op == ReduceOp::Mean {
        let c = T::from_usize(count);
        for o in &mut out {
            *o = *o / c;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    Tensor::new(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::from_fn(&[5, 7], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[7, 3], |_| rng.random_range(-1.0..1.0));
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..7 {
                    acc += a.at(&[i, k]) as f64 * b.at(&[k, j]) as f64;
                }
                let got = c.at(&[i, j]) as f64;
                assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_cases() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(elementwise(ElementwiseOp::Relu, &[&x]).unwrap().data(), &[0., 0., 2.]);
        let z = Tensor::zeros(&[3]);
        assert_eq!(elementwise(ElementwiseOp::Add, &[&x, &z]).unwrap(), x);
        let y = t(&[3], &[1., 2., 3.]);
        assert_eq!(
            elementwise(ElementwiseOp::Scale(2.0), &[&y]).unwrap().data(),
            &[2., 4., 6.]
        );
        let e = elementwise(ElementwiseOp::Exp, &[&y]).unwrap();
        let back = elementwise(ElementwiseOp::Log, &[&e]).unwrap();
        for (a, b) in back.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = t(&[2], &[1., 2.]);
        assert!(elementwise(ElementwiseOp::Mul, &[&x, &w]).is_err());
    }

    #[test]
    fn reduce_cases() {
        let c = Tensor::<f64>::full(&[2, 3, 4], 1.5);
        assert_eq!(reduce(ReduceOp::Mean, &c, &[0, 1, 2]).unwrap().data(), &[1.5]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(reduce(ReduceOp::Sum, &m, &[0]).unwrap().data(), &[4., 6.]);
        assert_eq!(reduce(ReduceOp::Sum, &m, &[1]).unwrap().data(), &[3., 7.]);
        let v = t(&[2], &[-5., -2.]);
        assert_eq!(reduce(ReduceOp::Max, &v, &[0]).unwrap().data(), &[-2.]);
        assert!(matches!(
            reduce(ReduceOp::Sum, &m, &[2]),
            Err(Error::BadAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn kernels_are_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::from_fn(&[9, 11], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[11, 4], |_| rng.random_range(-1.0..1.0));
        let r1 = matmul(&a, &b).unwrap();
        let r2 = matmul(&a, &b).unwrap();
        assert!(r1.data().iter().zip(r2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let s1 = reduce(ReduceOp::Mean, &a, &[0]).unwrap();
        let s2 = reduce(ReduceOp::Mean, &a, &[0]).unwrap();
        assert!(s1.data().iter().zip(s2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(m in 1usize..16, k in 1usize..16, l in 1usize..16, n in 1usize..16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::from_fn(&[m, k], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::<f32>::from_fn(&[k, l], |_| rng.random_range(-1.0..1.0));
            let c = Tensor::<f32>::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let diff = left.data().iter().zip(right.data()).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
            prop_assert!(diff < 1e-4);
        }
    }
}
