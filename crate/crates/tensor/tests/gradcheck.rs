//! Finite-difference checks of every graph op's adjoint, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volgen_tensor::{ConvGeom, Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(sum(w * f(x)))/dx against central differences for every leaf.
fn check(leaves: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |leaves: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let w = weights.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            random(g.shape(out), &mut r)
        });
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v))))
            .collect();
        (g.value(loss).item(), gs, w)
    };
    let (_, analytic, w) = eval(&leaves, None);
    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        for _ in 0..12.min(leaf.numel()) {
            let i = rng.gen_range(0..leaf.numel());
            let mut plus = leaves.clone();
            plus[li].data_mut()[i] += h;
            let mut minus = leaves.clone();
            minus[li].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            let a = analytic[li].data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-5, "leaf {li} element {i}: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn conv3d_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        vec![random(&[2, 2, 6, 6, 6], &mut rng), random(&[3, 2, 4, 4, 4], &mut rng)],
        |g, v| g.conv3d(v[0], v[1], ConvGeom::new(4, 2, 1)),
    );
    check(
        vec![random(&[2, 3, 4, 4, 4], &mut rng), random(&[2, 3, 3, 3, 3], &mut rng)],
        |g, v| g.conv3d(v[0], v[1], ConvGeom::new(3, 1, 1)),
    );
}

#[test]
fn linear_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(vec![random(&[3, 5], &mut rng), random(&[4, 5], &mut rng)], |g, v| {
        g.linear(v[0], v[1])
    });
}

#[test]
fn channel_ops_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let leaves = vec![random(&[2, 3, 2, 2, 2], &mut rng), random(&[3], &mut rng)];
    check(leaves.clone(), |g, v| g.channel_add(v[0], v[1]));
    check(leaves.clone(), |g, v| g.channel_sub(v[0], v[1]));
    check(leaves.clone(), |g, v| g.channel_mul(v[0], v[1]));
    check(leaves, |g, v| g.channel_mean(v[0]));
}

#[test]
fn batch_norm_composition_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&[3, 2, 2, 2, 2], &mut rng)], |g, v| {
        let mu = g.channel_mean(v[0]);
        let xc = g.channel_sub(v[0], mu);
        let sq = g.square(xc);
        let var = g.channel_mean(sq);
        let ve = g.offset(var, 1e-5);
        let r = g.rsqrt(ve);
        g.channel_mul(xc, r)
    });
}

#[test]
fn elementwise_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 7], &mut rng);
    let b = random(&[2, 7], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale(v[0], -2.5));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |g, v| g.relu(v[0]));
    check(vec![a.clone()], |g, v| g.tanh(v[0]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.abs(v[0]));
    check(vec![a.clone()], |g, v| g.clamp(v[0], -0.5, 0.5));
    let pos = a.map(|x| x.abs() + 0.5);
    check(vec![pos.clone()], |g, v| g.ln(v[0]));
    check(vec![pos], |g, v| g.rsqrt(v[0]));
    let mask = random(&[2, 7], &mut rng);
    check(vec![a], move |g, v| g.mask_mul(v[0], mask.clone()));
}

#[test]
fn shape_ops_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 2, 2, 3, 2], &mut rng);
    check(vec![x.clone()], |g, v| g.upsample2x(v[0]));
    check(vec![x.clone()], |g, v| g.reshape(v[0], &[4, 12]));
    check(vec![x.clone()], |g, v| g.sample_sum(v[0]));
    check(vec![x.clone()], |g, v| {
        let s = g.mean(v[0]);
        g.reshape(s, &[1])
    });
}

#[test]
fn backward_wrt_restricts_propagation() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[2], 2.0));
    let b = g.param(Tensor::full(&[2], 3.0));
    let p = g.mul(a, b);
    let s = g.sum(p);
    let grads = g.backward_wrt(s, &[a]);
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
    assert!(grads.get(b).is_none());
}
