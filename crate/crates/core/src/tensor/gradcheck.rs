//! Central finite-difference gradient checking.
//!
//! Used by unit tests and by the acceptance suite; kept independent of the
//! backward pass it verifies (the numerical side only ever calls forward).

use super::{Graph, NodeId, Tensor};

/// Builds a scalar loss from leaf nodes registered for the given tensors.
pub type LossBuilder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Compare analytic gradients against central finite differences.
///
/// Returns the worst relative error across all checked coordinates, where
/// relative error is |a - n| / max(|a|, |n|, eps_scale).
pub fn max_rel_error(inputs: &[Tensor], f: &LossBuilder, h: f64) -> f64 {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.input(t.clone(), true))
        .collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).expect("backward failed in gradcheck");
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone(), false)).collect();
        let loss = f(&mut g, &ids);
        g.value(loss).item()
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let fp = eval(&work);
            work[ti].data_mut()[i] = orig - h;
            let fm = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::UnaryKind;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::rand_uniform(shape, 1.0, rng)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let a = rand_t(&[3, 3], &mut rng);
            let b = rand_t(&[3, 3], &mut rng);
            let err = max_rel_error(
                &[a, b],
                &|g, ids| {
                    let c = g.matmul(ids[0], ids[1]).unwrap();
                    g.sum_all(c)
                },
                1e-5,
            );
            assert!(err <= 1e-6, "matmul rel err {err}");
        }
    }

    #[test]
    fn unary_gradients() {
        let kinds = [
            UnaryKind::Tanh,
            UnaryKind::Exp,
            UnaryKind::Silu,
            UnaryKind::Square,
            UnaryKind::Gelu,
            UnaryKind::Softplus,
            UnaryKind::Neg,
        ];
        let mut rng = Rng::new(2);
        for kind in kinds {
            let x = rand_t(&[2, 4], &mut rng);
            let err = max_rel_error(
                &[x],
                &move |g, ids| {
                    let y = g.unary(ids[0], kind);
                    let sq = g.unary(y, UnaryKind::Square);
                    g.sum_all(sq)
                },
                1e-5,
            );
            assert!(err <= 1e-6, "{kind:?} rel err {err}");
        }
    }

    #[test]
    fn tanh_grad_at_point() {
        // grad of tanh at 0.3 vs finite differences
        let x = Tensor::scalar(0.3);
        let err = max_rel_error(
            &[x],
            &|g, ids| {
                let y = g.unary(ids[0], UnaryKind::Tanh);
                g.sum_all(y)
            },
            1e-5,
        );
        assert!(err <= 1e-6);
    }

    #[test]
    fn binary_broadcast_gradients() {
        let mut rng = Rng::new(3);
        let a = rand_t(&[3, 4], &mut rng);
        let row = rand_t(&[1, 4], &mut rng);
        let scalar = Tensor::scalar(0.7);
        for build in [0usize, 1, 2, 3] {
            let err = max_rel_error(
                &[a.clone(), row.clone(), scalar.clone()],
                &move |g, ids| {
                    let y = match build {
                        0 => g.add(ids[0], ids[1]).unwrap(),
                        1 => g.mul(ids[0], ids[1]).unwrap(),
                        2 => g.div(ids[0], ids[2]).unwrap(),
                        _ => g.sub(ids[0], ids[2]).unwrap(),
                    };
                    let sq = g.unary(y, UnaryKind::Square);
                    g.sum_all(sq)
                },
                1e-5,
            );
            assert!(err <= 1e-6, "binary case {build}: rel err {err}");
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng::new(4);
        let x = rand_t(&[2, 4], &mut rng);
        let gamma = rand_t(&[4], &mut rng);
        let beta = rand_t(&[4], &mut rng);
        let err = max_rel_error(
            &[x, gamma, beta],
            &|g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let sq = g.unary(y, UnaryKind::Square);
                g.sum_all(sq)
            },
            1e-5,
        );
        assert!(err <= 1e-5, "layer_norm rel err {err}");
    }

    #[test]
    fn softmax_gradients() {
        let mut rng = Rng::new(5);
        let x = rand_t(&[2, 3], &mut rng);
        let w = rand_t(&[2, 3], &mut rng);
        let err = max_rel_error(
            &[x, w],
            &|g, ids| {
                let s = g.softmax_rows(ids[0]);
                let weighted = g.mul(s, ids[1]).unwrap();
                g.sum_all(weighted)
            },
            1e-5,
        );
        assert!(err <= 1e-5, "softmax rel err {err}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = Rng::new(6);
        let x = rand_t(&[4, 3], &mut rng);
        let labels = vec![0usize, 2, 1, 1];
        let mut g = Graph::new();
        let id = g.input(x.clone(), true);
        let loss = g.cross_entropy(id, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(id).unwrap();
        // closed-form oracle
        let mut g2 = Graph::new();
        let id2 = g2.input(x.clone(), false);
        let sm = g2.softmax_rows(id2);
        let smv = g2.value(sm).clone();
        for r in 0..4 {
            for c in 0..3 {
                let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                let expect = (smv.at(r, c) - onehot) / 4.0;
                assert!((grad.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = Rng::new(7);
        let x = rand_t(&[4, 6], &mut rng);
        let s = rand_t(&[4, 1], &mut rng);
        let err = max_rel_error(
            &[x, s],
            &|g, ids| {
                let picked = g.gather_rows(ids[0], &[2, 0, 2]).unwrap();
                let t = g.transpose(picked).unwrap();
                let back = g.transpose(t).unwrap();
                let left = g.slice_cols(back, 0, 3).unwrap();
                let right = g.slice_cols(back, 3, 6).unwrap();
                let cat = g.concat_cols(&[left, right]).unwrap();
                let scaled = g.gather_rows(ids[1], &[2, 0, 2]).unwrap();
                let gated = g.col_scale(cat, scaled).unwrap();
                let m = g.mean_rows(gated);
                let sq = g.unary(m, UnaryKind::Square);
                g.mean_all(sq)
            },
            1e-5,
        );
        assert!(err <= 1e-5, "structural rel err {err}");
    }

    #[test]
    fn backward_linearity_of_accumulation() {
        let mut rng = Rng::new(8);
        let x = rand_t(&[3, 3], &mut rng);
        // combined: loss = sum(x^2) + sum(tanh(x))
        let mut g = Graph::new();
        let id = g.input(x.clone(), true);
        let a = g.unary(id, UnaryKind::Square);
        let la = g.sum_all(a);
        let b = g.unary(id, UnaryKind::Tanh);
        let lb = g.sum_all(b);
        let total = g.add(la, lb).unwrap();
        g.backward(total).unwrap();
        let combined = g.grad(id).unwrap().clone();
        // separate passes
        let grad_of = |kind: UnaryKind| {
            let mut g = Graph::new();
            let id = g.input(x.clone(), true);
            let y = g.unary(id, kind);
            let l = g.sum_all(y);
            g.backward(l).unwrap();
            g.grad(id).unwrap().clone()
        };
        let ga = grad_of(UnaryKind::Square);
        let gb = grad_of(UnaryKind::Tanh);
        for i in 0..combined.numel() {
            assert!((combined.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_leaf_grad_untouched() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0), true);
        let b = g.input(Tensor::scalar(2.0), true);
        let y = g.unary(a, UnaryKind::Square);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 2]), true);
        assert!(g.backward(a).is_err());
    }
}
