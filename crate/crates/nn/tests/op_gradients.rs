//! Every differentiable op checked against central finite differences.

use synthvision_nn::gradcheck::{compare, numeric_gradient};
use synthvision_nn::rng::stream;
use synthvision_nn::{Graph, ParamSet, Tensor, Var};

fn check(params: ParamSet, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |p: &ParamSet| {
        let mut g = Graph::new();
        let bound = g.bind(p, true);
        let vars: Vec<Var> = p.iter().map(|(n, _)| bound.get(n)).collect();
        let loss = build(&mut g, &vars);
        (g, bound, loss)
    };
    let (g, bound, loss) = eval(&params);
    let grads = g.backward(loss);
    let analytic: Vec<f64> = bound
        .collect(&grads)
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let x0 = params.flatten();
    let numeric = numeric_gradient(&x0, 1e-5, |x| {
        let mut p = params.clone();
        p.assign_flat(x).unwrap();
        let (g, _, loss) = eval(&p);
        g.value(loss).item()
    });
    let (worst, at) = compare(&analytic, &numeric, 1e-6);
    assert!(
        worst < 1e-6,
        "worst rel err {worst:e} at {at}: analytic {} numeric {}",
        analytic[at],
        numeric[at]
    );
}

fn rand_params(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet {
    let mut rng = stream(seed, 0);
    let mut p = ParamSet::new();
    for (n, s) in shapes {
        p.insert(*n, Tensor::randn(s, 0.7, &mut rng));
    }
    p
}

/// Reduce any tensor to a scalar through a fixed random projection so every
/// output element contributes a distinct weight.
fn project(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = stream(99, shape.iter().product::<usize>() as u64);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let y = g.mul(x, w);
    g.mean(y)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let p = rand_params(
        &[
            ("a", &[2, 3, 4]),
            ("b", &[2, 3, 4]),
            ("bias", &[4]),
            ("e", &[2, 3]),
        ],
        1,
    );
    check(p, |g, v| {
        let s = g.add(v[0], v[1]);
        let m = g.mul(s, v[0]);
        let t = g.add_suffix(m, v[2]);
        let c = g.add_channel(t, v[3]);
        let a1 = g.silu(c);
        let a2 = g.gelu(a1);
        let a3 = g.tanh(a2);
        let sc = g.scale(a3, -1.7);
        project(g, sc)
    });
}

#[test]
fn matmul_and_batched_transposes() {
    let p = rand_params(
        &[
            ("x", &[2, 3, 4]),
            ("w", &[4, 5]),
            ("q", &[3, 4, 2]),
            ("k", &[3, 5, 2]),
            ("kt", &[3, 2, 5]),
        ],
        2,
    );
    check(p, |g, v| {
        let y = g.matmul(v[0], v[1]);
        let a = g.bmm(v[2], v[3], false, true);
        let b = g.bmm(v[2], v[4], false, false);
        let c = g.bmm(v[3], v[4], true, true);
        let l1 = project(g, y);
        let l2 = project(g, a);
        let l3 = project(g, b);
        let l4 = project(g, c);
        let s = g.add(l1, l2);
        let s = g.add(s, l3);
        g.add(s, l4)
    });
}

#[test]
fn softmax_layernorm_cross_entropy() {
    let p = rand_params(
        &[
            ("x", &[3, 5]),
            ("gamma", &[5]),
            ("beta", &[5]),
            ("w", &[5, 3]),
        ],
        3,
    );
    check(p, |g, v| {
        let n = g.layer_norm(v[0], v[1], v[2], 1e-5);
        let s = g.softmax(n);
        let l1 = project(g, s);
        let logits = g.matmul(n, v[3]);
        let ce = g.cross_entropy(logits, &[0, 2, 1]);
        g.add(l1, ce)
    });
}

#[test]
fn conv_pool_upsample_concat() {
    let p = rand_params(
        &[
            ("x", &[2, 2, 4, 4]),
            ("w", &[3, 2, 3, 3]),
            ("b", &[3]),
            ("w2", &[2, 5, 3, 3]),
            ("b2", &[2]),
        ],
        4,
    );
    check(p, |g, v| {
        let h = g.conv2d(v[0], v[1], v[2], 1);
        let d = g.avg_pool2(h);
        let u = g.upsample(d, 2);
        let c = g.concat(u, v[0], 1);
        let o = g.conv2d(c, v[3], v[4], 1);
        project(g, o)
    });
}

#[test]
fn shape_ops_and_mse() {
    let p = rand_params(
        &[
            ("table", &[6, 4]),
            ("tok", &[4]),
            ("x", &[2, 3, 4]),
            ("t", &[2, 4, 4]),
        ],
        5,
    );
    check(p, |g, v| {
        let r = g.gather(v[0], &[1, 3, 3, 0, 5, 2]);
        let r = g.reshape(r, &[2, 3, 4]);
        let s = g.add(r, v[2]);
        let tok = g.broadcast(v[1], 2);
        let tok = g.reshape(tok, &[2, 1, 4]);
        let seq = g.concat(tok, s, 1);
        let p = g.permute(seq, &[2, 0, 1]);
        let p = g.permute(p, &[1, 2, 0]);
        let sl = g.slice(p, 1, 1, 2);
        let l1 = project(g, sl);
        let mse = g.mse(p, v[3]);
        g.add(l1, mse)
    });
}
