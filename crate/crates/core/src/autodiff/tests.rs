use super::*;
use crate::gradcheck::suites::primitive_checks;
use crate::gradcheck::DEFAULT_TOLERANCE;

#[test]
fn every_primitive_passes_finite_differences_over_twenty_seeds() {
    let mut failures = Vec::new();
    for seed in 0..20 {
        for r in primitive_checks(seed).unwrap() {
            if !r.passes(DEFAULT_TOLERANCE) {
                failures.push(format!("{} seed {seed}: {:.2e}", r.name, r.max_rel_err));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn identity_matmul_returns_operand() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn silu_of_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0]));
    let y = g.silu(x);
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
    let gamma = g.constant(Tensor::full(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn squared_norm_gradient_at_identity() {
    // d‖W x‖² / dW = 2 (W x) xᵀ; with W = I and x = e₁ that is 2 e₁ e₁ᵀ.
    // Row convention: y = xᵀ Wᵀ, so W enters transposed.
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::eye(3), true);
    let mut g = Graph::with_trainable(&store);
    let wv = g.param(&store, w);
    let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap());
    let y = g.matmul(x, wv).unwrap();
    let l = g.sum_sq(y);
    let grads = g.backward(l).unwrap();
    let mut expected = vec![0.0; 9];
    expected[0] = 2.0;
    assert_eq!(grads.param(w).unwrap().data(), expected.as_slice());
}

#[test]
fn straight_through_forwards_quantized_and_passes_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3]));
    let q = g.straight_through(x, Tensor::vector(vec![0.0])).unwrap();
    assert_eq!(g.value(q).data(), &[0.0]);
    let s = g.sum(q);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn straight_through_composed_with_projections_has_product_jacobian() {
    // y = ST(x W_in, e) W_out, so dy/dx in row form is W_in W_out.
    let w_in = Tensor::matrix(3, 2, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
    let w_out = Tensor::matrix(2, 3, vec![0.2, -0.4, 1.0, 1.5, 0.3, -0.7]).unwrap();
    let product = w_in.matmul(&w_out).unwrap();
    for j in 0..3 {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![0.1, -0.2, 0.4]).unwrap());
        let a = g.constant(w_in.clone());
        let b = g.constant(w_out.clone());
        let p = g.matmul(x, a).unwrap();
        let q = g.straight_through(p, Tensor::matrix(1, 2, vec![7.0, -7.0]).unwrap()).unwrap();
        let y = g.matmul(q, b).unwrap();
        let mut sel = vec![0.0; 3];
        sel[j] = 1.0;
        let sv = g.constant(Tensor::matrix(1, 3, sel).unwrap());
        let yj = g.mul(y, sv).unwrap();
        let l = g.sum(yj);
        let grads = g.backward(l).unwrap();
        let col: Vec<Real> = (0..3).map(|i| product.data()[i * 3 + j]).collect();
        assert_eq!(grads.get(x).unwrap().data(), col.as_slice());
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
}

fn per_sample_loss(g: &mut Graph<'_>, w: Var, x: &Tensor) -> Var {
    let xv = g.constant(x.clone());
    let h = g.matmul(xv, w).unwrap();
    let s = g.silu(h);
    g.sum_sq(s)
}

#[test]
fn batch_gradient_is_sum_of_per_sample_gradients() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::matrix(2, 2, vec![0.3, -0.5, 0.8, 0.1]).unwrap(), true);
    let xs = [
        Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
        Tensor::matrix(1, 2, vec![-0.5, 0.25]).unwrap(),
    ];
    let mut g = Graph::with_trainable(&store);
    let wv = g.param(&store, w);
    let l0 = per_sample_loss(&mut g, wv, &xs[0]);
    let l1 = per_sample_loss(&mut g, wv, &xs[1]);
    let total = g.add(l0, l1).unwrap();
    let joint = g.backward(total).unwrap().param(w).unwrap().clone();

    let mut summed = Tensor::zeros(&[2, 2]);
    for x in &xs {
        let mut g = Graph::with_trainable(&store);
        let wv = g.param(&store, w);
        let l = per_sample_loss(&mut g, wv, x);
        summed.add_assign(g.backward(l).unwrap().param(w).unwrap());
    }
    assert!(joint.max_abs_diff(&summed) < 1e-6);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![4, 8], (0..32).map(|i| (i as Real * 0.37).sin()).collect()).unwrap());
        let k = g.input(Tensor::new(vec![4, 8], (0..32).map(|i| (i as Real * 0.11).cos()).collect()).unwrap());
        let a = g
            .attention(
                q,
                k,
                k,
                AttnLayout {
                    heads: 2,
                    window: 3,
                    q_pos0: 0,
                    k_pos0: 0,
                },
            )
            .unwrap();
        let l = g.sum_sq(a);
        let grads = g.backward(l).unwrap();
        (g.scalar(l), grads.get(q).unwrap().clone(), grads.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_accumulate_over_shared_uses() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![2.0]));
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x).unwrap();
    let y = g.add(a, b).unwrap();
    let l = g.sum(y);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[7.0]);
}
