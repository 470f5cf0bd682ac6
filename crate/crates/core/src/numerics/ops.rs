use super::tensor::dot;
use super::{NumericsError, Tensor2};

/// `y = x·W + b`, with `b` broadcast over the rows of `x`.
pub fn linear_forward(x: &Tensor2, weight: &Tensor2, bias: &Tensor2) -> Result<Tensor2, NumericsError> {
    if bias.rows() != 1 || bias.cols() != weight.cols() {
        return Err(NumericsError::Shape {
            op: "linear_forward(bias)",
            left: weight.shape(),
            right: bias.shape(),
        });
    }
    let mut y = x.matmul(weight)?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    y.ensure_finite("linear_forward")
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<f64, NumericsError> {
    cross_entropy_grad(logits, labels).map(|(loss, _)| loss)
}

/// Cross-entropy and its gradient with respect to the logits,
/// `(softmax − onehot) / n`.
pub fn cross_entropy_grad(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2), NumericsError> {
    masked_cross_entropy_grad(logits, labels, None)
}

/// Cross-entropy restricted to the classes flagged in `active`; inactive
/// logits are treated as `−∞` and receive zero gradient.
pub fn masked_cross_entropy_grad(
    logits: &Tensor2,
    labels: &[usize],
    active: Option<&[bool]>,
) -> Result<(f64, Tensor2), NumericsError> {
    if labels.len() != logits.rows() {
        return Err(NumericsError::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(mask) = active {
        if mask.len() != logits.cols() {
            return Err(NumericsError::Shape {
                op: "cross_entropy(mask)",
                left: logits.shape(),
                right: (1, mask.len()),
            });
        }
    }
    let classes = logits.cols();
    let n = logits.rows();
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NumericsError::LabelOutOfRange { label, classes });
        }
        let row = grad.row_mut(r);
        if let Some(mask) = active {
            if !mask[label] {
                return Err(NumericsError::LabelMasked { label });
            }
            for (v, &on) in row.iter_mut().zip(mask) {
                if !on {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        // log-sum-exp on the raw row for an accurate log-probability
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() })
                .sum::<f64>()
                .ln();
        total += lse - row[label];
        softmax_in_place(row);
        row[label] -= 1.0;
    }
    let inv_n = 1.0 / n.max(1) as f64;
    grad.scale(inv_n);
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(NumericsError::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, grad))
}

/// Anchor alignment loss `1 − cos(a, b)` over the flattened tensors.
pub fn cosine_align_loss(a: &Tensor2, b: &Tensor2) -> Result<f64, NumericsError> {
    let (na, nb, ab) = cosine_parts(a, b)?;
    Ok(1.0 - ab / (na * nb))
}

/// Alignment loss and its gradient with respect to `a`; `b` is a constant.
///
/// `∂/∂a [1 − a·b/(‖a‖‖b‖)] = −b/(‖a‖‖b‖) + (a·b) a/(‖a‖³‖b‖)`
pub fn cosine_align_grad(a: &Tensor2, b: &Tensor2) -> Result<(f64, Tensor2), NumericsError> {
    let (na, nb, ab) = cosine_parts(a, b)?;
    let inv = 1.0 / (na * nb);
    let coef_a = ab * inv / (na * na);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&ai, &bi)| coef_a * ai - inv * bi)
        .collect();
    let grad = Tensor2::from_vec(a.rows(), a.cols(), data)?;
    Ok((1.0 - ab * inv, grad))
}

fn cosine_parts(a: &Tensor2, b: &Tensor2) -> Result<(f64, f64, f64), NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::Shape {
            op: "cosine_align",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(NumericsError::Degenerate {
            op: "cosine_align",
            reason: "operand has zero or non-finite norm",
        });
    }
    Ok((na, nb, dot(a.data(), b.data())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(x: &Tensor2, w: &Tensor2) -> Vec<f64> {
        let mut out = vec![0.0; x.rows() * w.cols()];
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut s = 0.0;
                for k in 0..x.cols() {
                    s += x.get(i, k) * w.get(k, j);
                }
                out[i * w.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_hand_cases() {
        let i2 = Tensor2::identity(2);
        let y = linear_forward(&i2, &i2, &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(y, i2);

        let x = Tensor2::from_rows(&[&[1.0, 2.0]]);
        let b = Tensor2::from_rows(&[&[1.0, 1.0]]);
        let y = linear_forward(&x, &i2, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor2::random_normal(3, 4, 1.0, &mut rng);
        let w = Tensor2::random_normal(4, 2, 1.0, &mut rng);
        let b = Tensor2::random_normal(1, 2, 1.0, &mut rng);
        let y = linear_forward(&x, &w, &b).unwrap();
        let naive = naive_matmul(&x, &w);
        for i in 0..3 {
            for j in 0..2 {
                assert!((y.get(i, j) - (naive[i * 2 + j] + b.get(0, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_error() {
        let err = linear_forward(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 2), &Tensor2::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, NumericsError::Shape { left: (2, 3), right: (2, 2), .. }));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor2::zeros(1, 4);
        assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let saturated = Tensor2::from_rows(&[&[0.0, 1000.0, 0.0]]);
        assert!(cross_entropy(&saturated, &[1]).unwrap() < 1e-12);

        assert_eq!(
            cross_entropy(&uniform, &[4]).unwrap_err(),
            NumericsError::LabelOutOfRange { label: 4, classes: 4 }
        );
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor2::random_normal(5, 3, 2.0, &mut rng);
        let labels = [0, 2, 1, 1, 0];
        let (loss, grad) = cross_entropy_grad(&logits, &labels).unwrap();
        let mut expected = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let exps: Vec<f64> = logits.row(r).iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            expected += -(exps[y] / z).ln();
            for c in 0..3 {
                let onehot = if c == y { 1.0 } else { 0.0 };
                assert!((grad.get(r, c) - (exps[c] / z - onehot) / 5.0).abs() < 1e-10);
            }
        }
        assert!((loss - expected / 5.0).abs() < 1e-10);
    }

    #[test]
    fn masked_classes_get_no_gradient() {
        let logits = Tensor2::from_rows(&[&[0.3, 5.0, -1.0]]);
        let mask = [true, false, true];
        let (loss, grad) = masked_cross_entropy_grad(&logits, &[0], Some(&mask)).unwrap();
        let p0 = 0.3f64.exp() / (0.3f64.exp() + (-1.0f64).exp());
        assert!((loss + p0.ln()).abs() < 1e-12);
        assert_eq!(grad.get(0, 1), 0.0);
        assert!(masked_cross_entropy_grad(&logits, &[1], Some(&mask)).is_err());
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = softmax_rows(&Tensor2::random_normal(6, 7, 3.0, &mut rng));
        for r in 0..6 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_reference_values() {
        let a = Tensor2::row_vector(&[1.0, 2.0, -0.5]);
        assert!(cosine_align_loss(&a, &a).unwrap().abs() < 1e-15);
        let e1 = Tensor2::row_vector(&[1.0, 0.0]);
        let e2 = Tensor2::row_vector(&[0.0, 3.0]);
        assert!((cosine_align_loss(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_align_loss(&a, &a.scaled(-1.0)).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = Tensor2::zeros(1, 3);
        let a = Tensor2::row_vector(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine_align_loss(&z, &a), Err(NumericsError::Degenerate { .. })));
        assert!(matches!(cosine_align_grad(&a, &z), Err(NumericsError::Degenerate { .. })));
    }

    #[test]
    fn cosine_gradient_vanishes_when_aligned() {
        let c = Tensor2::row_vector(&[0.4, -1.2, 2.0, 0.1]);
        let (loss, grad) = cosine_align_grad(&c, &c).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.norm() < 1e-15);
    }
}
