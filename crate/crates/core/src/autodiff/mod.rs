//! Dense tensors and reverse-mode differentiation, including gradients of
//! input-gradients (needed because the metriplectic field is built from
//! `∇H` and `∇Φ` of learned scalar networks).

mod graph;
mod mlp;
mod params;
mod tensor;

pub use graph::{Bindings, Evaluation, Graph, Node, NodeId, Op};
pub use mlp::Mlp;
pub use params::ParameterStore;
pub use tensor::Tensor;

/// Convenience for building a [`Bindings`] map.
pub fn bindings<const N: usize>(pairs: [(&str, Tensor); N]) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval_scalar(g: &Graph, out: NodeId, b: &Bindings, p: &ParameterStore) -> f64 {
        g.forward(b, p).unwrap().value(out).item()
    }

    /// Central differences over every parameter entry.
    fn fd_param_grad(g: &Graph, out: NodeId, b: &Bindings, p: &ParameterStore) -> Vec<f64> {
        let base = p.flatten();
        let mut q = p.clone();
        base.iter()
            .enumerate()
            .map(|(i, &v)| {
                let h = 1e-5 * v.abs().max(1.0);
                let mut x = base.clone();
                x[i] = v + h;
                q.assign_flat(&x);
                let fp = eval_scalar(g, out, b, &q);
                x[i] = v - h;
                q.assign_flat(&x);
                let fm = eval_scalar(g, out, b, &q);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn flatten_grads(grads: &std::collections::BTreeMap<String, Tensor>) -> Vec<f64> {
        grads.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64, floor: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            assert!(
                err <= rel * scale || err <= floor,
                "entry {i}: analytic {a} vs numeric {n} (err {err:e})"
            );
        }
    }

    #[test]
    fn forward_examples() {
        let p = ParameterStore::new();
        let mut g = Graph::new();
        let x = g.input("x", &[1]);
        let t = g.tanh(x);
        assert_eq!(
            g.forward(&bindings([("x", Tensor::vector(vec![0.0]))]), &p)
                .unwrap()
                .value(t)
                .data(),
            &[0.0]
        );

        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let x = g.input("x", &[2]);
        let y = g.matmul(i2, x);
        let e = g
            .forward(&bindings([("x", Tensor::vector(vec![3.0, -1.0]))]), &p)
            .unwrap();
        assert_eq!(e.value(y).data(), &[3.0, -1.0]);

        let mut g = Graph::new();
        let x = g.input("x", &[3]);
        let sq = g.square(x);
        let s = g.sum(sq);
        let e = g
            .forward(&bindings([("x", Tensor::vector(vec![1.0, 2.0, 2.0]))]), &p)
            .unwrap();
        assert_eq!(e.value(s).item(), 9.0);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]);
        let b = g.input("b", &[3]);
        let bad = g.add(a, b);
        let err = g
            .forward(
                &bindings([("a", Tensor::vector(vec![0.0; 2])), ("b", Tensor::vector(vec![0.0; 3]))]),
                &ParameterStore::new(),
            )
            .unwrap_err();
        match err {
            Error::Shape { node, op, .. } => {
                assert_eq!(node, bad.index());
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binding_with_wrong_shape_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let _ = g.sum(x);
        let err = g
            .forward(&bindings([("x", Tensor::vector(vec![1.0; 3]))]), &ParameterStore::new())
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Shape {
                node: 0,
                op: "input",
                ..
            }
        ));
        let err = g.forward(&Bindings::new(), &ParameterStore::new()).unwrap_err();
        assert!(matches!(err, Error::Unbound { .. }));
    }

    #[test]
    fn input_gradient_of_squared_norm() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let sq = g.square(x);
        let s = g.sum(sq);
        let gx = g.input_gradient(s, x).unwrap();
        let e = g
            .forward(
                &bindings([("x", Tensor::vector(vec![1.0, -2.0]))]),
                &ParameterStore::new(),
            )
            .unwrap();
        assert_eq!(e.value(gx).data(), &[2.0, -4.0]);
        assert_eq!(e.value(gx).shape(), &[2]);
    }

    #[test]
    fn input_gradient_of_tanh_at_zero() {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::matrix(1, 1, vec![1.0])).unwrap();
        let mut g = Graph::new();
        let w = g.parameter("w", &[1, 1]);
        let x = g.input("x", &[1]);
        let wx = g.matmul(w, x);
        let t = g.tanh(wx);
        let s = g.sum(t);
        let gx = g.input_gradient(s, x).unwrap();
        let e = g.forward(&bindings([("x", Tensor::vector(vec![0.0]))]), &p).unwrap();
        assert_eq!(e.value(gx).data(), &[1.0]);
    }

    #[test]
    fn input_gradient_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let t = g.tanh(x);
        assert!(matches!(g.input_gradient(t, x), Err(Error::NotScalar { .. })));
        let s = g.sum(t);
        let c = g.constant(Tensor::scalar(1.0));
        let not_input = g.add(s, c);
        assert!(matches!(g.input_gradient(s, not_input), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new("f", vec![3, 8, 8, 1]);
        let mut p = ParameterStore::new();
        mlp.init(&mut p, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input("x", &[3, 1]);
        let y = mlp.build(&mut g, x);
        let s = g.sum(y);
        let gx = g.input_gradient(s, x).unwrap();
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = g
            .forward(&bindings([("x", Tensor::matrix(3, 1, x0.clone()))]), &p)
            .unwrap();
        let analytic = e.value(gx).data().to_vec();
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let h = 1e-5 * x0[i].abs().max(1.0);
                let mut xp = x0.clone();
                xp[i] += h;
                let mut xm = x0.clone();
                xm[i] -= h;
                let fp = eval_scalar(&g, s, &bindings([("x", Tensor::matrix(3, 1, xp))]), &p);
                let fm = eval_scalar(&g, s, &bindings([("x", Tensor::matrix(3, 1, xm))]), &p);
                (fp - fm) / (2.0 * h)
            })
            .collect();
        assert_close(&analytic, &numeric, 1e-5, 1e-8);
    }

    #[test]
    fn backward_examples() {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::scalar(3.0)).unwrap();
        p.insert("u", Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new();
        let w = g.parameter("w", &[]);
        let _u = g.parameter("u", &[]);
        let loss = g.square(w);
        let e = g.forward(&Bindings::new(), &p).unwrap();
        let grads = g.backward(&e, loss).unwrap();
        assert_eq!(grads["w"].item(), 6.0);
        assert_eq!(grads["u"].item(), 0.0);

        let again = g.backward(&e, loss).unwrap();
        assert_eq!(grads, again);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let e = g
            .forward(
                &bindings([("x", Tensor::vector(vec![1.0, 2.0]))]),
                &ParameterStore::new(),
            )
            .unwrap();
        assert!(matches!(g.backward(&e, x), Err(Error::NotScalar { .. })));
    }

    fn random_mlp(rng: &mut ChaCha8Rng, prefix: &str, input: usize, output: usize) -> Mlp {
        let hidden = rng.gen_range(0..=2);
        let mut sizes = vec![input];
        for _ in 0..hidden {
            sizes.push(rng.gen_range(1..=16));
        }
        sizes.push(output);
        Mlp::new(prefix, sizes)
    }

    #[test]
    fn gradient_check_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..100 {
            let d = rng.gen_range(1..=4);
            let batch = rng.gen_range(1..=3);
            let out = rng.gen_range(1..=3);
            let mlp = random_mlp(&mut rng, "m", d, out);
            let mut p = ParameterStore::new();
            mlp.init(&mut p, &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.input("x", &[d, batch]);
            let y = mlp.build(&mut g, x);
            // mix in the remaining primitives so every rule is exercised
            let s = g.sin(y);
            let c = g.cos(y);
            let sc = g.mul(s, c);
            let sp = g.softplus(sc);
            let sq = g.square(sp);
            let tot = g.sum(sq);
            let scaled = g.scale(tot, 0.5);
            let xs: Vec<f64> = (0..d * batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = bindings([("x", Tensor::matrix(d, batch, xs))]);
            let e = g.forward(&b, &p).unwrap();
            let analytic = flatten_grads(&g.backward(&e, scaled).unwrap());
            let numeric = fd_param_grad(&g, scaled, &b, &p);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let err = (a - n).abs();
                assert!(
                    err <= 1e-5 * a.abs().max(n.abs()) || err <= 1e-8,
                    "case {case}, entry {i}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn second_order_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let d = rng.gen_range(1..=3);
            let batch = rng.gen_range(1..=4);
            let mlp = random_mlp(&mut rng, "h", d, 1);
            let mut p = ParameterStore::new();
            mlp.init(&mut p, &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.input("x", &[d, batch]);
            let h = mlp.build(&mut g, x);
            let hs = g.sum(h);
            let gx = g.input_gradient(hs, x).unwrap();
            let sq = g.square(gx);
            let loss = g.sum(sq);
            let xs: Vec<f64> = (0..d * batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = bindings([("x", Tensor::matrix(d, batch, xs))]);
            let e = g.forward(&b, &p).unwrap();
            let analytic = flatten_grads(&g.backward(&e, loss).unwrap());
            let numeric = fd_param_grad(&g, loss, &b, &p);
            assert_close(&analytic, &numeric, 1e-4, 1e-8);
        }
    }

    #[test]
    fn symbolic_rules_cover_every_differentiable_op() {
        // d/dx of a scalar built from each op, checked against central differences
        let mut g = Graph::new();
        let x = g.input("x", &[2, 2]);
        let t = g.transpose(x);
        let m = g.matmul(t, x);
        let r = g.sum_rows(m);
        let bc = g.broadcast_rows(r, 3);
        let cs = g.sum_cols(bc);
        let bcc = g.broadcast_cols(cs, 2);
        let off = g.offset(bcc, 3.0);
        let rc = g.recip(off);
        let sg = g.sigmoid(rc);
        let td = g.tanh_deriv(sg);
        let sl = g.slice_rows(td, 1, 2);
        let pd = g.pad_rows(sl, 0, 3);
        let cat = g.concat(&[pd, x]);
        let s = g.sum(cat);
        let b = g.broadcast(s, &[2]);
        let co = g.cos(b);
        let out = g.sum(co);
        let gx = g.input_gradient(out, x).unwrap();
        let x0 = vec![0.3, -0.2, 0.5, 0.1];
        let p = ParameterStore::new();
        let e = g
            .forward(&bindings([("x", Tensor::matrix(2, 2, x0.clone()))]), &p)
            .unwrap();
        let analytic = e.value(gx).data().to_vec();
        let numeric: Vec<f64> = (0..4)
            .map(|i| {
                let h = 1e-6;
                let mut xp = x0.clone();
                xp[i] += h;
                let mut xm = x0.clone();
                xm[i] -= h;
                (eval_scalar(&g, out, &bindings([("x", Tensor::matrix(2, 2, xp))]), &p)
                    - eval_scalar(&g, out, &bindings([("x", Tensor::matrix(2, 2, xm))]), &p))
                    / (2.0 * h)
            })
            .collect();
        assert_close(&analytic, &numeric, 1e-6, 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new("f", vec![2, 16, 16, 2]);
        let mut p = ParameterStore::new();
        mlp.init(&mut p, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input("x", &[2, 5]);
        let y = mlp.build(&mut g, x);
        let b = bindings([("x", Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.1).collect()))]);
        let a = g.forward(&b, &p).unwrap().value(y).clone();
        let c = g.forward(&b, &p).unwrap().value(y).clone();
        assert!(a.data().iter().zip(c.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x", &[1]);
        let r = g.recip(x);
        let _ = g.sum(r);
        let err = g
            .forward(&bindings([("x", Tensor::vector(vec![0.0]))]), &ParameterStore::new())
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
