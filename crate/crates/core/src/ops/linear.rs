use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]]
    {
        return Err(Error::shape(format!(
            "fully connected: input {:?}, weights {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], w.shape()[0]))
}

/// `(N, K) x (M, K)^T + b -> (N, M)`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, k, m) = check(x, w, b)?;
    let mut out: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    T::gemm(
        n,
        k,
        m,
        T::one(),
        x.data(),
        false,
        w.data(),
        true,
        T::one(),
        &mut out,
    );
    Tensor::new(vec![n, m], out)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, k, m) = check(x, w, b)?;
    grad_out.expect_shape(&[n, m])?;
    let mut dx = vec![T::zero(); n * k];
    T::gemm(
        n,
        m,
        k,
        T::one(),
        grad_out.data(),
        false,
        w.data(),
        false,
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); m * k];
    T::gemm(
        m,
        n,
        k,
        T::one(),
        grad_out.data(),
        true,
        x.data(),
        false,
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); m];
    for row in grad_out.data().chunks(m) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, k], dx)?,
        weights: Tensor::new(vec![m, k], dw)?,
        bias: Tensor::new(vec![m], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_affine() {
        let x = Tensor::new(vec![1, 1], vec![3.0f64]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        assert_eq!(fully_connected(&x, &w, &b).unwrap().data(), &[6.5]);
        let g = fully_connected_backward(&x, &w, &b, &Tensor::ones(vec![1, 1])).unwrap();
        assert_eq!(
            (g.input.data()[0], g.weights.data()[0], g.bias.data()[0]),
            (2.0, 3.0, 1.0)
        );
    }

    #[test]
    fn matrix_product() {
        let x = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let y = fully_connected(&x, &w, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0, 4.0, 11.0]);
        assert!(fully_connected(&x, &Tensor::zeros(vec![2, 2]), &Tensor::zeros(vec![2])).is_err());
    }
}
