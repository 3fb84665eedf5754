//! Finite-difference gradient checking shared by integration tests.

#![allow(dead_code)]

use volgen::networks::{Network, Phase};
use volgen_tensor::{Graph, Tensor};

/// Worst per-tensor relative error between analytic and central-difference
/// gradients, with the name of the tensor that produced it.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Up to `cap` evenly spaced indices of a tensor with `n` entries.
pub fn probe_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

/// Checks the parameter gradient of `L = Σ probe ⊙ net(x)` in training
/// phase against central differences with step `h`.
pub fn check_network(net: &Network<f64>, x: &Tensor<f64>, probe: &Tensor<f64>, h: f64, cap: usize) -> GradCheck {
    let loss_and_grads = |net: &Network<f64>, want_grads: bool| {
        let mut work = net.clone();
        let mut g = Graph::new();
        let pv = work.bind(&mut g, want_grads);
        let xv = g.constant(x.clone());
        let y = work.forward(&mut g, &pv, xv, Phase::Train);
        let weighted = g.mask_mul(y, probe.clone());
        let l = g.sum(weighted);
        let value = g.value(l).item();
        let grads = want_grads.then(|| {
            let mut gr = g.backward(l);
            pv.iter()
                .zip(net.params())
                .map(|(&v, p)| gr.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, grads) = loss_and_grads(net, true);
    let grads = grads.unwrap();
    let mut out = GradCheck {
        worst: 0.0,
        worst_tensor: String::new(),
        checked: 0,
    };
    let mut work = net.clone();
    for (pi, analytic) in grads.iter().enumerate() {
        let idx = probe_indices(analytic.numel(), cap);
        let mut a = Vec::with_capacity(idx.len());
        let mut fd = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work.params()[pi].value.data()[j];
            work.params_mut()[pi].value.data_mut()[j] = orig + h;
            let (lp, _) = loss_and_grads(&work, false);
            work.params_mut()[pi].value.data_mut()[j] = orig - h;
            let (lm, _) = loss_and_grads(&work, false);
            work.params_mut()[pi].value.data_mut()[j] = orig;
            a.push(analytic.data()[j]);
            fd.push((lp - lm) / (2.0 * h));
        }
        out.checked += idx.len();
        let e = relative_error(&a, &fd);
        if out.worst_tensor.is_empty() || e > out.worst {
            out.worst = e;
            out.worst_tensor = net.params()[pi].name.clone();
        }
    }
    out
}
