//! Dense tensors with a define-by-run tape and exact reverse-mode gradients.
//!
//! Parameters live in a [`ParamStore`]; every forward pass records onto a
//! fresh [`Tape`], and [`Tape::backward`] hands back a [`Gradients`] map.

mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Mask, Tape, Var, LOG_CLAMP_EPS};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe);
        probe.data_mut()[k] = orig - step;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error, `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_and_sigmoid_basics() {
        let tape = Tape::new();
        let x = tape.constant(t(1, 3, &[0.0, 0.0, 0.0]));
        let s = x.row_softmax(None, None).unwrap().value();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = tape.constant(Tensor::scalar(0.0)).sigmoid().unwrap();
        assert_eq!(z.value().item().unwrap(), 0.5);
    }

    #[test]
    fn masked_softmax_zeroes_and_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]));
        let mask = Mask::from_additive(&t(2, 3, &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY])).unwrap();
        let y = x.row_softmax(None, Some(&mask)).unwrap();
        let yv = y.value();
        assert_eq!(yv.get(0, 1), 0.0);
        assert_eq!(yv.get(1, 2), 0.0);
        let w = tape.constant(t(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
        let loss = y.mul(&w).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x).unwrap();
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(1, 2), 0.0);

        let full = Mask::new(1, 2, vec![true, true]).unwrap();
        let tape = Tape::new();
        let x = tape.constant(t(1, 2, &[0.0, 1.0]));
        assert!(matches!(x.row_softmax(None, Some(&full)), Err(Error::Contract(_))));
        assert!(Mask::from_additive(&t(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn sum_of_squares_gradient_matches_finite_differences() {
        let x0 = t(1, 3, &[1.0, 2.0, 3.0]);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();
        assert_eq!(analytic.data(), &[2.0, 4.0, 6.0]);
        let numeric = numeric_gradient(&x0, 1e-5, |p| p.data().iter().map(|v| v * v).sum());
        assert!(max_relative_error(&analytic, &numeric, 1e-12) < 1e-7);
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        // a failed backward still consumes the tape
        assert!(matches!(tape.backward(x), Err(Error::TapeConsumed)));

        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));

        let tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0]);

        let tape = Tape::new();
        let x = tape.constant(t(1, 2, &[1.0, -2.0]));
        assert!(matches!(x.ln(), Err(Error::Domain { .. })));
        let y = tape.constant(t(2, 2, &[1.0; 4]));
        assert!(matches!(x.matmul(&x), Err(Error::Shape { .. })));
        assert!(matches!(x.sub(&y), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_loss_gradient_replicates_input_per_row() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(t(3, 1, &[1.0, -2.0, 0.5]));
        let loss = wv.matmul(&x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn strict_tape_rejects_non_finite_outputs() {
        let tape = Tape::strict();
        let x = tape.constant(t(1, 1, &[1e308]));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite("scale"))));
        let lax = Tape::new();
        let x = lax.constant(t(1, 1, &[1e308]));
        assert!(x.scale(10.0).is_ok());
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(1, 1, &[2.0]));
        let tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(&b).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(2, 4, &[1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 0.25, 8.0]));
        let gamma = tape.constant(Tensor::full(1, 4, 1.0));
        let beta = tape.constant(Tensor::zeros(1, 4));
        let y = x.layer_norm(&gamma, &beta, 1e-9).unwrap().value();
        for i in 0..2 {
            let row = y.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
