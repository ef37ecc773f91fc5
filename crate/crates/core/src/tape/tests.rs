use super::*;
use crate::params::ParamStore;
use alloc::vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Compares reverse-mode gradients of `f` against central differences on
/// every scalar of every input.
fn check<F>(inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.iter().enumerate().map(|(i, t)| store.add(alloc::format!("p{i}"), t.clone())).collect();
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let nodes: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let root = f(&mut tape, &nodes);
        (tape, root)
    };
    let (tape, root) = eval(&store);
    let grads = tape.param_grads(root, store.len()).unwrap();
    let h = 1e-6;
    for &id in &ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + h;
            let (t1, r1) = eval(&store);
            store.get_mut(id).data[k] = orig - h;
            let (t2, r2) = eval(&store);
            store.get_mut(id).data[k] = orig;
            let fd = (t1.scalar(r1) - t2.scalar(r2)) / (2.0 * h);
            let ad = grads.get(id).map_or(0.0, |g| g[k]);
            let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(err < tol, "param {} elem {k}: fd {fd} vs ad {ad}", id.0);
        }
    }
}

/// Reduces a node to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, n: NodeId) -> NodeId {
    let shape = tape.value(n).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = random(&mut rng, shape.0, shape.1, 1.0);
    let w = tape.constant(w);
    let m = tape.mul(n, w).unwrap();
    tape.sum(m)
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(3.0));
    let mut tape = Tape::new();
    let xn = tape.param(&store, x);
    let y = tape.mul(xn, xn).unwrap();
    let g = tape.param_grads(y, store.len()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn elementwise_and_broadcast_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random(&mut rng, 3, 4, 1.0),
        random(&mut rng, 3, 4, 1.0),
        random(&mut rng, 1, 4, 1.0),
        random(&mut rng, 3, 1, 1.0),
        random(&mut rng, 1, 1, 1.0),
    ];
    check(
        &inputs,
        |t, n| {
            let a = t.add(n[0], n[1]).unwrap();
            let b = t.sub(a, n[1]).unwrap();
            let c = t.mul(b, n[1]).unwrap();
            let d = t.mul_row(c, n[2]).unwrap();
            let e = t.add_row(d, n[2]).unwrap();
            let f = t.mul_col(e, n[3]).unwrap();
            let g = t.mul_scalar(f, n[4]).unwrap();
            let h = t.scale(g, -0.7);
            let i = t.add_const(h, 0.3);
            weighted_sum(t, i)
        },
        1e-6,
    );
}

#[test]
fn unary_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, 2, 5, 2.0)];
    for kind in [Unary::Exp, Unary::Sigmoid, Unary::Softplus, Unary::LogSigmoid, Unary::Relu, Unary::Tanh] {
        check(
            &inputs,
            |t, n| {
                let y = t.unary(n[0], kind);
                weighted_sum(t, y)
            },
            1e-6,
        );
    }
}

#[test]
fn structural_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&mut rng, 4, 3, 1.0),
        random(&mut rng, 5, 3, 1.0),
        random(&mut rng, 1, 5, 1.0),
        random(&mut rng, 4, 2, 1.0),
        random(&mut rng, 1, 3, 1.0),
    ];
    check(
        &inputs,
        |t, n| {
            let a = t.affine(n[0], n[1], Some(n[2])).unwrap();
            let b = t.gather(a, &[3, 0, 0, 2]).unwrap();
            let c = t.concat_cols(b, n[3]).unwrap();
            let d = t.softmax_rows(c);
            let e = t.column(d, 2).unwrap();
            let f = t.mul_col(c, e).unwrap();
            let r = t.repeat_row(n[4], 4);
            let s = t.shift_down(n[0], n[4]).unwrap();
            let u = t.add(r, s).unwrap();
            let w1 = weighted_sum(t, f);
            let w2 = weighted_sum(t, u);
            t.add(w1, w2).unwrap()
        },
        1e-6,
    );
}

#[test]
fn manifold_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(&mut rng, 3, 5, 1.5),
        random(&mut rng, 3, 5, 1.5),
        random(&mut rng, 1, 2, 3.0),
        random(&mut rng, 4, 5, 1.0),
    ];
    check(
        &inputs,
        |t, n| {
            let x = t.exp_o(n[0]);
            let y = t.exp_o(n[1]);
            let m = t.mobius(x, y).unwrap();
            let r = t.rotate(m, n[2]).unwrap();
            let l = t.log_o(r);
            let d = t.sq_dist_rows(x, r).unwrap();
            let c = t.exp_o(n[3]);
            let s = t.dist_scores(l, c).unwrap();
            let e = t.euclid_scores(m, n[3]).unwrap();
            let w1 = weighted_sum(t, l);
            let w2 = weighted_sum(t, d);
            let w3 = weighted_sum(t, s);
            let w4 = weighted_sum(t, e);
            let a = t.add(w1, w2).unwrap();
            let b = t.add(w3, w4).unwrap();
            t.add(a, b).unwrap()
        },
        1e-5,
    );
}

#[test]
fn exp_log_near_origin() {
    let inputs = [Tensor::from_vec(2, 3, vec![1e-4, -2e-4, 5e-5, 0.0, 3e-9, 0.0])];
    check(
        &inputs,
        |t, n| {
            let x = t.exp_o(n[0]);
            let y = t.log_o(x);
            let z = t.exp_o(y);
            weighted_sum(t, z)
        },
        1e-6,
    );
}

#[test]
fn sequence_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        random(&mut rng, 5, 4, 1.0),
        random(&mut rng, 5, 4, 1.0),
        random(&mut rng, 5, 4, 1.0),
        random(&mut rng, 5, 4, 1.0),
        Tensor::from_vec(5, 4, (0..20).map(|_| rng.random_range(0.05..2.0)).collect()),
    ];
    let a = [0.0, -(2.0f64.ln()), -(3.0f64.ln()), -(4.0f64.ln())];
    check(
        &inputs,
        |t, n| {
            let att = t.attention(n[0], n[1], n[2], 2).unwrap();
            let s = t.sigmoid(n[3]);
            let h = t.recurrence(s, att).unwrap();
            let z = t.zoh_input(n[4], &a).unwrap();
            let w1 = weighted_sum(t, h);
            let w2 = weighted_sum(t, z);
            t.add(w1, w2).unwrap()
        },
        1e-6,
    );
}

#[test]
fn cross_entropy_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&mut rng, 3, 6, 2.0)];
    check(&inputs, |t, n| t.softmax_ce(n[0], &[0, 5, 2]).unwrap(), 1e-6);
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let id = store.add("z", Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
    let z = tape.param(&store, id);
    let l = tape.softmax_ce(z, &[2, 0]).unwrap();
    let g = tape.param_grads(l, 1).unwrap();
    let g = g.get(id).unwrap();
    assert!((g[0] + g[1] + g[2]).abs() < 1e-12);
    assert!((g[3] + g[4] + g[5]).abs() < 1e-12);
    assert!((tape.scalar(l) - (0.4076059644 + super::log_sum_exp(&[-1.0, 0.5, 4.0]) + 1.0)).abs() < 1e-9);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(c).is_err());
}

#[test]
fn zoh_gain_is_continuous_across_switch() {
    let a = -2.0;
    let dt = ZOH_TAYLOR_SWITCH / 2.0;
    let below = zoh_gain(dt * (1.0 - 1e-12), a);
    let above = zoh_gain(dt, a);
    assert!((below - above).abs() <= 1e-12);
}

#[test]
fn attention_single_row_returns_value_row() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]));
    let k = tape.constant(Tensor::vector(vec![1.0, 1.0, -1.0, 0.0]));
    let v = tape.constant(Tensor::vector(vec![7.0, 8.0, 9.0, 10.0]));
    let o = tape.attention(q, k, v, 2).unwrap();
    assert_eq!(tape.value(o).data, vec![7.0, 8.0, 9.0, 10.0]);
}
