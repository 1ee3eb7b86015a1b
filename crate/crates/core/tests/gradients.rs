//! Backprop through each graph op against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtab_core::tensor::{Graph, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

struct Input {
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
}

fn inp(shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), lo: -1.5, hi: 1.5 }
}

fn positive(shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), lo: 0.5, hi: 2.0 }
}

/// Checks d/dx of `sum(f(x) * r)` for a fixed random `r`.
fn check(inputs: &[Input], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let values: Vec<Vec<f64>> = inputs
        .iter()
        .map(|i| (0..i.shape.iter().product::<usize>()).map(|_| rng.random_range(i.lo..i.hi)).collect())
        .collect();

    let eval = |values: &[Vec<f64>], rng_seed: u64| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new(false, 0);
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|(i, v)| g.leaf(&Tensor::new(i.shape.clone(), v.clone()).unwrap().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &vars);
        let mut wr = ChaCha8Rng::seed_from_u64(rng_seed);
        let r: Vec<f64> = (0..g.value(out).len()).map(|_| wr.random_range(-1.0..1.0)).collect();
        let r = g.constant_from(g.shape(out).to_vec(), r).unwrap();
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod);
        let value = g.scalar_value(loss).unwrap();
        let grads = g.backward(loss).unwrap();
        let per_input = vars
            .iter()
            .map(|&v| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        (value, per_input)
    };

    let (_, analytic) = eval(&values, 99);
    for (k, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let mut up = values.clone();
            up[k][i] += H;
            let mut down = values.clone();
            down[k][i] -= H;
            let numeric = (eval(&up, 99).0 - eval(&down, 99).0) / (2.0 * H);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < TOL, "input {k} element {i}: backprop {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_binary_with_broadcasting() {
    check(&[inp(&[2, 3, 4]), inp(&[4])], |g, v| g.add(v[0], v[1]).unwrap());
    check(&[inp(&[4]), inp(&[2, 3, 4])], |g, v| g.sub(v[0], v[1]).unwrap());
    check(&[inp(&[2, 3, 4]), inp(&[3, 1])], |g, v| g.mul(v[0], v[1]).unwrap());
    check(&[inp(&[2, 3]), positive(&[2, 3])], |g, v| g.div(v[0], v[1]).unwrap());
    check(&[inp(&[3, 2]), inp(&[3, 2])], |g, v| g.mul(v[0], v[0]).unwrap());
}

#[test]
fn elementwise_unary() {
    check(&[inp(&[5])], |g, v| g.exp(v[0]).unwrap());
    check(&[positive(&[5])], |g, v| g.log(v[0]).unwrap());
    check(&[positive(&[5])], |g, v| g.sqrt(v[0]).unwrap());
    check(&[inp(&[5])], |g, v| g.softplus(v[0]).unwrap());
    check(&[positive(&[5])], |g, v| g.relu(v[0]).unwrap());
    check(&[inp(&[5])], |g, v| g.scale(v[0], -2.5));
    check(&[inp(&[5])], |g, v| g.add_scalar(v[0], 3.0));
}

#[test]
fn matrix_products() {
    check(&[inp(&[3, 4]), inp(&[4, 2])], |g, v| g.matmul(v[0], v[1]).unwrap());
    check(&[inp(&[2, 3, 4]), inp(&[4, 5])], |g, v| g.matmul(v[0], v[1]).unwrap());
    check(&[inp(&[2, 3, 4]), inp(&[2, 4, 3])], |g, v| g.matmul(v[0], v[1]).unwrap());
    check(&[inp(&[2, 3, 4]), inp(&[4, 2]), inp(&[2])], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
}

#[test]
fn shape_ops() {
    check(&[inp(&[2, 3, 4])], |g, v| g.permute(v[0], &[1, 0, 2]).unwrap());
    check(&[inp(&[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check(&[inp(&[2, 3, 4])], |g, v| g.transpose(v[0], 1, 2).unwrap());
    check(&[inp(&[2, 5, 3])], |g, v| g.narrow(v[0], 1, 1, 3).unwrap());
    check(&[inp(&[2, 5, 3])], |g, v| g.select(v[0], 1, 4).unwrap());
    check(&[inp(&[2, 6])], |g, v| g.reshape(v[0], &[3, 4]).unwrap());
    check(&[inp(&[2, 2, 3]), inp(&[2, 1, 3])], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
}

#[test]
fn reductions() {
    check(&[inp(&[2, 3, 4])], |g, v| g.sum_axis(v[0], 1).unwrap());
    check(&[inp(&[2, 3, 4])], |g, v| g.sum_axis(v[0], 0).unwrap());
    check(&[inp(&[2, 3])], |g, v| g.sum(v[0]));
    check(&[inp(&[2, 3])], |g, v| g.mean(v[0]));
}

#[test]
fn normalizations() {
    check(&[inp(&[2, 3, 4])], |g, v| g.softmax(v[0], 2).unwrap());
    check(&[inp(&[2, 3, 4])], |g, v| g.softmax(v[0], 1).unwrap());
    check(&[inp(&[3, 5])], |g, v| g.log_softmax(v[0]).unwrap());
    check(&[inp(&[2, 3, 6]), inp(&[6]), inp(&[6])], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn gated_and_indexed_ops() {
    // Keep the gate half away from the ReLU kink.
    check(&[Input { shape: vec![3, 8], lo: 0.2, hi: 1.5 }], |g, v| g.reglu(v[0]).unwrap());
    check(&[inp(&[5, 3])], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check(&[inp(&[4, 3])], |g, v| g.pick(v[0], &[2, 0, 1, 1]).unwrap());
}
