//! Adversarial objectives, the reconstruction term and the gradient penalty.
//!
//! Every loss is recorded on a [`Graph`] so that the trainer can
//! differentiate it with respect to whichever network it is updating.

use rand::Rng;
use volgen_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Result, VolgenError};
use crate::networks::{Network, Phase, Trace};

/// A scalar-per-sample function whose input gradient can be differentiated
/// again with respect to its parameters.
///
/// `score` must return a `[N]` node. `score_tangent` returns the
/// directional derivative of `score` at the traced point along `dx`, as a
/// node that depends on the parameters through the tape.
pub trait Critic<T: Scalar> {
    type Trace;
    fn score(&mut self, g: &mut Graph<T>, x: Var) -> (Var, Self::Trace);
    fn score_tangent(&self, g: &mut Graph<T>, trace: &Self::Trace, dx: Var) -> Var;
}

/// A [`Network`] whose parameters already live on the graph.
pub struct NetCritic<'a, T> {
    pub net: &'a mut Network<T>,
    pub params: &'a [Var],
    pub phase: Phase,
}

impl<T: Scalar> Critic<T> for NetCritic<'_, T> {
    type Trace = Trace<T>;

    fn score(&mut self, g: &mut Graph<T>, x: Var) -> (Var, Trace<T>) {
        self.net.forward_traced(g, self.params, x, self.phase)
    }

    fn score_tangent(&self, g: &mut Graph<T>, trace: &Trace<T>, dx: Var) -> Var {
        self.net.tangent(g, self.params, trace, dx)
    }
}

/// `x_hat = ε·real + (1 − ε)·fake`, with one ε per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationSample<T> {
    pub x_hat: Tensor<T>,
    pub epsilon: Vec<T>,
}

impl<T: Scalar> InterpolationSample<T> {
    pub fn draw<R: Rng + ?Sized>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Result<Self> {
        let n = real.shape().first().copied().unwrap_or(0);
        let epsilon = (0..n).map(|_| T::from_f64(rng.gen::<f64>())).collect::<Vec<_>>();
        Self::with_epsilon(real, fake, epsilon)
    }

    pub fn with_epsilon(real: &Tensor<T>, fake: &Tensor<T>, epsilon: Vec<T>) -> Result<Self> {
        if real.shape() != fake.shape() {
            return Err(VolgenError::Shape(format!(
                "interpolation endpoints differ: {:?} vs {:?}",
                real.shape(),
                fake.shape()
            )));
        }
        let (n, per) = real.batch_split();
        if epsilon.len() != n {
            return Err(VolgenError::Shape(format!("{} interpolation weights for {n} samples", epsilon.len())));
        }
        let x_hat = Tensor::from_fn(real.shape(), |i| {
            let e = epsilon[i / per];
            e * real.data()[i] + (T::one() - e) * fake.data()[i]
        });
        Ok(Self { x_hat, epsilon })
    }
}

/// Gradient penalty `mean_i (‖∇ critic(x̂)_i‖₂ − 1)²` at freshly drawn
/// interpolates.
pub fn gradient_penalty<T: Scalar, C: Critic<T>, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    critic: &mut C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut R,
) -> Result<Var> {
    let sample = InterpolationSample::draw(real, fake, rng)?;
    gradient_penalty_at(g, critic, sample.x_hat)
}

/// Gradient penalty at given points.
///
/// The returned node has the penalty as its value. Its parameter gradient
/// is obtained without second-order adjoints: with the input gradient `γ`
/// and `v_i = (2/N)(‖γ_i‖ − 1) γ_i / ‖γ_i‖` held fixed, the penalty and the
/// directional derivative `v · γ` have the same parameter gradient, and the
/// latter is a first-order quantity recorded by the critic's tangent pass.
pub fn gradient_penalty_at<T: Scalar, C: Critic<T>>(g: &mut Graph<T>, critic: &mut C, x_hat: Tensor<T>) -> Result<Var> {
    let shape = x_hat.shape().to_vec();
    let (n, per) = x_hat.batch_split();
    if n == 0 {
        return Err(VolgenError::Shape("gradient penalty on an empty batch".into()));
    }
    let x = g.input(x_hat);
    let (scores, trace) = critic.score(g, x);
    let total = g.sum(scores);
    let grad = g
        .backward_wrt(total, &[x])
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(&shape));
    if !grad.is_finite() {
        return Err(VolgenError::Data("gradient penalty: non-finite gradient".into()));
    }

    let mut penalty = 0.0f64;
    let mut dir = vec![T::zero(); grad.numel()];
    for i in 0..n {
        let gi = &grad.data()[i * per..(i + 1) * per];
        let norm = gi.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        penalty += (norm - 1.0).powi(2);
        if norm > 0.0 {
            let c = 2.0 / n as f64 * (norm - 1.0) / norm;
            for (d, &v) in dir[i * per..(i + 1) * per].iter_mut().zip(gi) {
                *d = T::from_f64(c * v.as_f64());
            }
        }
    }
    penalty /= n as f64;

    let v = g.constant(Tensor::new(shape, dir).expect("shape matches"));
    let tangent = critic.score_tangent(g, &trace, v);
    let s = g.sum(tangent);
    let shift = T::from_f64(penalty) - g.value(s).item();
    Ok(g.offset(s, shift))
}

/// `Σ_f mean(fake_f) − k·mean(real) + λ1·gp` for `k` fake populations.
pub fn loss_critic_wasserstein<T: Scalar>(g: &mut Graph<T>, real: Var, fakes: &[Var], gp: Option<Var>, lambda1: f64) -> Var {
    let mr = g.mean(real);
    let mut loss = g.scale(mr, -T::from_f64(fakes.len() as f64));
    for &f in fakes {
        let mf = g.mean(f);
        loss = g.add(loss, mf);
    }
    if let Some(gp) = gp {
        let pen = g.scale(gp, T::from_f64(lambda1));
        loss = g.add(loss, pen);
    }
    loss
}

/// `mean D(x_rec) + mean D(x_rand) − 2·mean D(x_real) + λ1·gp`.
pub fn loss_discriminator<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_rand: Var, d_rec: Var, gp: Var, lambda1: f64) -> Var {
    loss_critic_wasserstein(g, d_real, &[d_rec, d_rand], Some(gp), lambda1)
}

/// Mean absolute difference over every voxel of the batch.
pub fn recon_l1<T: Scalar>(g: &mut Graph<T>, x_real: Var, x_rec: Var) -> Var {
    let d = g.sub(x_real, x_rec);
    let a = g.abs(d);
    g.mean(a)
}

/// `−mean D(x_rec) − mean D(x_rand) + λ2·mean|x_real − x_rec|`.
///
/// Returns the loss and the reconstruction term.
pub fn loss_generator<T: Scalar>(
    g: &mut Graph<T>,
    d_rand: Var,
    d_rec: Var,
    x_real: Var,
    x_rec: Var,
    lambda2: f64,
) -> (Var, Var) {
    let adv = adversarial_generator(g, &[d_rec, d_rand]);
    let rec = recon_l1(g, x_real, x_rec);
    let w = g.scale(rec, T::from_f64(lambda2));
    (g.add(adv, w), rec)
}

/// `−Σ_f mean(fake_f)`.
pub fn adversarial_generator<T: Scalar>(g: &mut Graph<T>, fakes: &[Var]) -> Var {
    let mut loss = g.constant(Tensor::scalar(T::zero()));
    for &f in fakes {
        let m = g.mean(f);
        loss = g.sub(loss, m);
    }
    loss
}

/// `mean C(z_e) − mean C(z_r) + λ1·gp`; encoder codes are the fakes.
pub fn loss_code_discriminator<T: Scalar>(g: &mut Graph<T>, c_fake: Var, c_real: Var, gp: Var, lambda1: f64) -> Var {
    loss_critic_wasserstein(g, c_real, &[c_fake], Some(gp), lambda1)
}

/// `−mean C(z_e)`.
pub fn loss_encoder<T: Scalar>(g: &mut Graph<T>, c_fake: Var) -> Var {
    adversarial_generator(g, &[c_fake])
}

pub const PROB_EPS: f64 = 1e-7;

/// Cross-entropy pair on probability scores, clamped to `[1e-7, 1 − 1e-7]`:
/// `(−mean ln d_real − mean ln(1 − d_fake), −mean ln d_fake)`.
pub fn loss_vanilla_gan<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> (Var, Var) {
    let (lo, hi) = (T::from_f64(PROB_EPS), T::from_f64(1.0 - PROB_EPS));
    let pr = g.clamp(d_real, lo, hi);
    let pf = g.clamp(d_fake, lo, hi);
    let lr = g.ln(pr);
    let lr = g.mean(lr);
    let neg = g.scale(pf, -T::one());
    let one_minus = g.offset(neg, T::one());
    let lf = g.ln(one_minus);
    let lf = g.mean(lf);
    let sum = g.add(lr, lf);
    let d_loss = g.scale(sum, -T::one());
    (d_loss, loss_vanilla_generator(g, d_fake))
}

/// Generator half of [`loss_vanilla_gan`]: `−mean ln d_fake`.
pub fn loss_vanilla_generator<T: Scalar>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let pf = g.clamp(d_fake, T::from_f64(PROB_EPS), T::from_f64(1.0 - PROB_EPS));
    let lg = g.ln(pf);
    let lg = g.mean(lg);
    g.scale(lg, -T::one())
}

/// Scalar summary of one training step's objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_d: f64,
    pub l_g: f64,
    pub l_e: f64,
    pub l_c: f64,
    pub l_eg: f64,
    pub gp_d: f64,
    pub gp_c: f64,
    pub recon_l1: f64,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_d", self.l_d),
            ("l_g", self.l_g),
            ("l_e", self.l_e),
            ("l_c", self.l_c),
            ("l_eg", self.l_eg),
            ("gp_d", self.gp_d),
            ("gp_c", self.gp_c),
            ("recon_l1", self.recon_l1),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `critic(x)_i = Σ_j w_j x_ij`.
    struct LinearCritic {
        w: Tensor<f64>,
    }

    impl Critic<f64> for LinearCritic {
        type Trace = ();
        fn score(&mut self, g: &mut Graph<f64>, x: Var) -> (Var, ()) {
            let w = Tensor::from_fn(g.shape(x), |i| self.w.data()[i % self.w.numel()]);
            let y = g.mask_mul(x, w);
            (g.sample_sum(y), ())
        }
        fn score_tangent(&self, g: &mut Graph<f64>, _: &(), dx: Var) -> Var {
            let w = Tensor::from_fn(g.shape(dx), |i| self.w.data()[i % self.w.numel()]);
            let y = g.mask_mul(dx, w);
            g.sample_sum(y)
        }
    }

    fn scores(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn interpolation_is_per_sample() {
        let real = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let fake = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        let s = InterpolationSample::with_epsilon(&real, &fake, vec![0.25, 0.5]).unwrap();
        assert_eq!(s.x_hat.data(), &[0.25, 0.25, 1.0, 3.0]);
        assert!(InterpolationSample::with_epsilon(&real, &fake.reshape(&[4]).unwrap(), vec![0.5]).is_err());
    }

    #[test]
    fn linear_critic_penalties() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let w = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let gp = gradient_penalty_at(&mut g, &mut LinearCritic { w }, x.clone()).unwrap();
        assert!(g.value(gp).item().abs() < 1e-12);
        let ones = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let gp = gradient_penalty_at(&mut g, &mut LinearCritic { w: ones }, x).unwrap();
        assert!((g.value(gp).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_arithmetic() {
        let mut g = Graph::new();
        let c = scores(&mut g, &[0.7; 4]);
        let gp = g.constant(Tensor::scalar(1.0));
        let l = loss_discriminator(&mut g, c, c, c, gp, 10.0);
        assert!((g.value(l).item() - 10.0).abs() < 1e-12);
        let real = scores(&mut g, &[1.0, 1.0]);
        let zero = scores(&mut g, &[0.0, 0.0]);
        let gp0 = g.constant(Tensor::scalar(0.0));
        let l = loss_discriminator(&mut g, real, zero, zero, gp0, 10.0);
        assert_eq!(g.value(l).item(), -2.0);
    }

    #[test]
    fn generator_loss_arithmetic() {
        let mut g = Graph::new();
        let z = scores(&mut g, &[0.0; 3]);
        let xr = g.constant(Tensor::full(&[2, 1, 2, 2, 2], 1.0));
        let xf = g.constant(Tensor::full(&[2, 1, 2, 2, 2], -1.0));
        let (l, rec) = loss_generator(&mut g, z, z, xr, xf, 10.0);
        assert_eq!(g.value(l).item(), 20.0);
        assert_eq!(g.value(rec).item(), 2.0);
        let one = scores(&mut g, &[1.0; 3]);
        let (l, _) = loss_generator(&mut g, one, one, xr, xr, 10.0);
        assert_eq!(g.value(l).item(), -2.0);
    }

    #[test]
    fn code_and_encoder_losses() {
        let mut g = Graph::new();
        let zero = scores(&mut g, &[0.0, 0.0]);
        let one = scores(&mut g, &[1.0, 1.0]);
        let gp0 = g.constant(Tensor::scalar(0.0));
        let l = loss_code_discriminator(&mut g, zero, one, gp0, 10.0);
        assert_eq!(g.value(l).item(), -1.0);
        let three = scores(&mut g, &[2.0, 4.0]);
        let le = loss_encoder(&mut g, three);
        assert_eq!(g.value(le).item(), -3.0);
    }

    #[test]
    fn vanilla_equilibrium_and_limits() {
        let mut g = Graph::new();
        let half = scores(&mut g, &[0.5, 0.5]);
        let (d, _) = loss_vanilla_gan(&mut g, half, half);
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let hi = scores(&mut g, &[1.0]);
        let lo = scores(&mut g, &[0.0]);
        let (d, gl) = loss_vanilla_gan(&mut g, hi, lo);
        assert!(g.value(d).item() < 1e-6);
        assert!(g.value(gl).item() > 10.0);
        let (_, gl) = loss_vanilla_gan(&mut g, hi, hi);
        assert!(g.value(gl).item() >= 0.0 && g.value(gl).item() < 1e-6);
    }

    #[test]
    fn non_finite_term_is_named() {
        let b = LossBundle {
            gp_c: f64::NAN,
            ..LossBundle::default()
        };
        assert_eq!(b.non_finite_term(), Some("gp_c"));
        assert_eq!(LossBundle::default().non_finite_term(), None);
    }
}
