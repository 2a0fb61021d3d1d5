//! Dense layers and weight initialization.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Negative-side slope shared by every hidden activation in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A dense layer: weights [d_in x d_out] plus bias [d_out].
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weights, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Dense {
            w: uniform_init(d_in, d_out, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// x [m x d_in] -> x.W + b, bias tiled across rows.
    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let y = tape.matmul(x, &self.w)?;
        let rows = y.shape()[0];
        let bias = tape.expand_rows(&self.b, rows)?;
        tape.add(&y, &bias)
    }

    /// Register both tensors as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> Self {
        Dense {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

pub fn uniform_init(d_in: usize, d_out: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (d_in.max(1) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::from_vec(data, &[d_in, d_out]).expect("init shape")
}

/// Preimage of a positive value under softplus: ln(exp(y) - 1).
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus only takes positive values");
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Random square orthogonal matrix via modified Gram-Schmidt on Gaussian
/// rows. Row norms after projection are positive with probability 1, which
/// fixes the sign convention.
pub fn orthogonal_init(d: usize, rng: &mut Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = (0..d).map(|_| rng.normal_vec(d)).collect();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| rows[i][k] * rows[j][k]).sum();
            for k in 0..d {
                rows[i][k] -= dot * rows[j][k];
            }
        }
        let norm: f64 = (0..d).map(|k| rows[i][k] * rows[i][k]).sum::<f64>().sqrt();
        assert!(norm > 1e-10, "degenerate draw in orthogonal init");
        for k in 0..d {
            rows[i][k] /= norm;
        }
    }
    Tensor::from_vec(rows.into_iter().flatten().collect(), &[d, d]).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_rel_err;

    #[test]
    fn dense_hand_value() {
        let mut tape = Tape::new();
        let layer = Dense {
            w: Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]),
            b: Tensor::vector(&[0.5, -0.5]),
        };
        let x = Tensor::matrix(&[[1.0, 2.0]]);
        let y = layer.apply(&mut tape, &x).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5]);
    }

    #[test]
    fn dense_batch_rows_independent() {
        let mut rng = Rng::seeded(1);
        let layer = Dense::init(3, 2, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]);
        let both = layer.apply(&mut tape, &x).unwrap();
        let first = layer
            .apply(&mut tape, &Tensor::matrix(&[[0.1, 0.2, 0.3]]))
            .unwrap();
        assert_eq!(&both.data()[0..2], first.data());
    }

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = Rng::seeded(2);
        let w = uniform_init(16, 8, &mut rng);
        let bound = 0.25;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
        assert!(mean.abs() < 0.05, "mean {}", mean);
    }

    #[test]
    fn softplus_inv_round_trips() {
        let softplus = |x: f64| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        };
        for y in [1e-3, 0.5, 0.9999, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12, "y = {y}");
        }
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = Rng::seeded(3);
        let q = orthogonal_init(6, &mut rng);
        // Q . Q^T = I
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| q.at2(i, k) * q.at2(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({},{}) -> {}", i, j, dot);
            }
        }
    }

    #[test]
    fn dense_gradients_match_fd() {
        let mut rng = Rng::seeded(4);
        let eps = 1e-5;
        let w0 = uniform_init(3, 2, &mut rng);
        let b0 = Tensor::vector(&[0.1, -0.2]);
        let x = Tensor::matrix(&[[0.4, -1.2, 0.7], [1.1, 0.3, -0.5]]);

        let eval = |w: &Tensor, b: &Tensor, track: bool| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut tape = Tape::new();
            let layer = if track {
                Dense {
                    w: tape.leaf(w),
                    b: tape.leaf(b),
                }
            } else {
                Dense {
                    w: w.clone(),
                    b: b.clone(),
                }
            };
            let y = layer.apply(&mut tape, &x).unwrap();
            let t = tape.tanh(&y).unwrap();
            let loss = tape.sum_all(&t).unwrap();
            let val = loss.item();
            if track {
                let g = tape.backward(&loss).unwrap();
                (
                    val,
                    Some((g.wrt_or_zeros(&layer.w), g.wrt_or_zeros(&layer.b))),
                )
            } else {
                (val, None)
            }
        };

        let (_, grads) = eval(&w0, &b0, true);
        let (gw, gb) = grads.unwrap();
        for i in 0..w0.numel() {
            let mut plus = w0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= eps;
            let num = (eval(&plus, &b0, false).0 - eval(&minus, &b0, false).0) / (2.0 * eps);
            assert!(grad_rel_err(gw[i], num) < 1e-4);
        }
        for i in 0..b0.numel() {
            let mut plus = b0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = b0.clone();
            minus.data_mut()[i] -= eps;
            let num = (eval(&w0, &plus, false).0 - eval(&w0, &minus, false).0) / (2.0 * eps);
            assert!(grad_rel_err(gb[i], num) < 1e-4);
        }
    }
}
