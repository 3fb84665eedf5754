//! The four networks: generator G, critic D, encoder E and code critic C.
//!
//! Each network is a flat list of named parameter tensors plus a small
//! layer program that interprets them on a [`Graph`]. The same program also
//! records a forward-mode tangent (Jacobian-vector product) on demand, which
//! is what the gradient penalty differentiates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use volgen_tensor::{ConvGeom, Graph, Scalar, Tensor, Var};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Result, VolgenError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    Generator,
    Discriminator,
    Encoder,
    CodeDiscriminator,
}

impl NetKind {
    pub const ALL: [NetKind; 4] = [
        NetKind::Generator,
        NetKind::Discriminator,
        NetKind::Encoder,
        NetKind::CodeDiscriminator,
    ];

    /// Position in [`NetKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Generator => "generator",
            NetKind::Discriminator => "discriminator",
            NetKind::Encoder => "encoder",
            NetKind::CodeDiscriminator => "code_discriminator",
        }
    }
}

/// Batch normalisation uses batch statistics in `Train` and the running
/// averages in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { w: usize, b: Option<usize>, geom: ConvGeom },
    Linear { w: usize, b: Option<usize> },
    /// `stats` indexes the running mean; the running variance follows it.
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    LeakyRelu,
    Relu,
    Tanh,
    Upsample,
    /// Per-sample target shape.
    Reshape(Vec<usize>),
}

/// Parameters, running statistics and layer program of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    kind: NetKind,
    slope: f64,
    layers: Vec<Layer>,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
}

/// Values a network's tangent pass needs from its forward pass.
#[derive(Debug)]
pub struct Trace<T> {
    steps: Vec<TraceStep<T>>,
}

#[derive(Debug)]
enum TraceStep<T> {
    Plain,
    /// Centred input and inverse standard deviation, both on the tape.
    BnBatch { xc: Var, r: Var },
    BnRunning { r: Var },
    Mask(Tensor<T>),
    Tanh { y: Var },
}

/// Running-statistics slot, batch mean, biased batch variance, element count.
type StatUpdate<T> = (usize, Tensor<T>, Tensor<T>, usize);

struct Builder<'r, T, R: Rng + ?Sized> {
    rng: &'r mut R,
    layers: Vec<Layer>,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
}

impl<'r, T: Scalar, R: Rng + ?Sized> Builder<'r, T, R> {
    fn new(rng: &'r mut R) -> Self {
        Self {
            rng,
            layers: Vec::new(),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn push_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(NamedTensor { name, value });
        self.params.len() - 1
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom, bias: bool) {
        let k = geom.kernel;
        let wt = self.normal(&[cout, cin, k, k, k]);
        let w = self.push_param(format!("{name}.weight"), wt);
        let b = bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        self.layers.push(Layer::Conv { w, b, geom });
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) {
        let wt = self.normal(&[fout, fin]);
        let w = self.push_param(format!("{name}.weight"), wt);
        let b = bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros(&[fout])));
        self.layers.push(Layer::Linear { w, b });
    }

    fn batch_norm(&mut self, name: &str, c: usize) {
        let gamma = self.push_param(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.push_param(format!("{name}.beta"), Tensor::zeros(&[c]));
        let stats = self.buffers.len();
        self.buffers.push(NamedTensor {
            name: format!("{name}.running_mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(NamedTensor {
            name: format!("{name}.running_var"),
            value: Tensor::full(&[c], T::one()),
        });
        self.layers.push(Layer::BatchNorm { gamma, beta, stats });
    }

    fn finish(self, kind: NetKind, slope: f64) -> Network<T> {
        Network {
            kind,
            slope,
            layers: self.layers,
            params: self.params,
            buffers: self.buffers,
        }
    }
}

fn check_volume_size(v: usize) -> Result<()> {
    if v < 16 || !v.is_power_of_two() {
        return Err(VolgenError::config("volume_size", "volume_size must be a power of two ≥ 16"));
    }
    Ok(())
}

impl<T: Scalar> Network<T> {
    /// Critic-shaped network: four stride-2 4³ convolutions halving the
    /// volume down to `V/16`, then a stride-1 convolution whose kernel spans
    /// the remaining `V/16` grid, giving `out` values per sample.
    fn critic_like<R: Rng + ?Sized>(kind: NetKind, mc: &ModelConfig, v: usize, out: usize, rng: &mut R) -> Result<Self> {
        mc.validate()?;
        check_volume_size(v)?;
        let mut b = Builder::new(rng);
        let down = ConvGeom::new(4, 2, 1);
        let c = &mc.channels;
        b.conv("conv1", 1, c[0], down, true);
        b.layers.push(Layer::LeakyRelu);
        for l in 1..4 {
            b.conv(&format!("conv{}", l + 1), c[l - 1], c[l], down, false);
            b.batch_norm(&format!("bn{}", l + 1), c[l]);
            b.layers.push(Layer::LeakyRelu);
        }
        b.conv("conv5", c[3], out, ConvGeom::new(v / 16, 1, 0), true);
        b.layers.push(Layer::Reshape(if out == 1 { vec![] } else { vec![out] }));
        Ok(b.finish(kind, mc.leaky_slope))
    }

    pub fn discriminator<R: Rng + ?Sized>(mc: &ModelConfig, volume_size: usize, rng: &mut R) -> Result<Self> {
        Self::critic_like(NetKind::Discriminator, mc, volume_size, 1, rng)
    }

    pub fn encoder<R: Rng + ?Sized>(mc: &ModelConfig, volume_size: usize, latent: usize, rng: &mut R) -> Result<Self> {
        Self::critic_like(NetKind::Encoder, mc, volume_size, latent, rng)
    }

    /// Affine projection of the code onto a `base × (V/16)³` grid, four
    /// stages of nearest-neighbour upscale, 3³ convolution, batch norm and
    /// ReLU, then a 3³ convolution to one channel and tanh.
    pub fn generator<R: Rng + ?Sized>(mc: &ModelConfig, volume_size: usize, latent: usize, rng: &mut R) -> Result<Self> {
        mc.validate()?;
        check_volume_size(volume_size)?;
        let s = volume_size / 16;
        let ch = mc.generator_channels();
        let mut b = Builder::new(rng);
        b.linear("fc", latent, ch[0] * s * s * s, true);
        b.layers.push(Layer::Reshape(vec![ch[0], s, s, s]));
        let same = ConvGeom::new(3, 1, 1);
        let mut cin = ch[0];
        for (l, &cout) in ch.iter().enumerate() {
            b.layers.push(Layer::Upsample);
            b.conv(&format!("conv{}", l + 1), cin, cout, same, false);
            b.batch_norm(&format!("bn{}", l + 1), cout);
            b.layers.push(Layer::Relu);
            cin = cout;
        }
        b.conv("conv_out", cin, 1, same, true);
        b.layers.push(Layer::Tanh);
        Ok(b.finish(NetKind::Generator, mc.leaky_slope))
    }

    /// Fully connected `L → H → H → 1`, with batch norm and LeakyReLU after
    /// each hidden layer.
    pub fn code_discriminator<R: Rng + ?Sized>(mc: &ModelConfig, latent: usize, rng: &mut R) -> Result<Self> {
        mc.validate()?;
        let h = mc.code_hidden;
        let mut b = Builder::new(rng);
        b.linear("fc1", latent, h, false);
        b.batch_norm("bn1", h);
        b.layers.push(Layer::LeakyRelu);
        b.linear("fc2", h, h, false);
        b.batch_norm("bn2", h);
        b.layers.push(Layer::LeakyRelu);
        b.linear("fc3", h, 1, true);
        b.layers.push(Layer::Reshape(vec![]));
        Ok(b.finish(NetKind::CodeDiscriminator, mc.leaky_slope))
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &[NamedTensor<T>]| {
            v.iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect()
        };
        Network {
            kind: self.kind,
            slope: self.slope,
            layers: self.layers.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Forward pass. In `Train` phase the running statistics absorb this
    /// batch.
    pub fn forward(&mut self, g: &mut Graph<T>, pv: &[Var], x: Var, phase: Phase) -> Var {
        let (y, _, updates) = self.run(g, pv, x, phase, false);
        self.absorb(updates);
        y
    }

    /// Evaluation-mode forward pass, which leaves the network untouched.
    pub fn forward_eval(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        self.run(g, pv, x, Phase::Eval, false).0
    }

    /// Forward pass that also keeps what [`Network::tangent`] needs.
    pub fn forward_traced(&mut self, g: &mut Graph<T>, pv: &[Var], x: Var, phase: Phase) -> (Var, Trace<T>) {
        let (y, trace, updates) = self.run(g, pv, x, phase, true);
        self.absorb(updates);
        (y, trace)
    }

    fn run(&self, g: &mut Graph<T>, pv: &[Var], mut x: Var, phase: Phase, keep: bool) -> (Var, Trace<T>, Vec<StatUpdate<T>>) {
        assert_eq!(pv.len(), self.params.len(), "{}: parameter count", self.kind.name());
        let slope = T::from_f64(self.slope);
        let mut steps = Vec::new();
        let mut stat_updates = Vec::new();
        for layer in &self.layers {
            let step = match layer {
                Layer::Conv { w, b, geom } => {
                    x = g.conv3d(x, pv[*w], *geom);
                    if let Some(b) = b {
                        x = g.channel_add(x, pv[*b]);
                    }
                    TraceStep::Plain
                }
                Layer::Linear { w, b } => {
                    x = g.linear(x, pv[*w]);
                    if let Some(b) = b {
                        x = g.channel_add(x, pv[*b]);
                    }
                    TraceStep::Plain
                }
                Layer::BatchNorm { gamma, beta, stats } => match phase {
                    Phase::Train => {
                        let mu = g.channel_mean(x);
                        let xc = g.channel_sub(x, mu);
                        let sq = g.square(xc);
                        let var = g.channel_mean(sq);
                        let ve = g.offset(var, T::from_f64(BN_EPS));
                        let r = g.rsqrt(ve);
                        let xn = g.channel_mul(xc, r);
                        let y = g.channel_mul(xn, pv[*gamma]);
                        let (n, _, s) = g.value(x).channel_split();
                        stat_updates.push((*stats, g.value(mu).clone(), g.value(var).clone(), n * s));
                        x = g.channel_add(y, pv[*beta]);
                        TraceStep::BnBatch { xc, r }
                    }
                    Phase::Eval => {
                        let mean = g.constant(self.buffers[*stats].value.clone());
                        let eps = T::from_f64(BN_EPS);
                        let rt = self.buffers[*stats + 1].value.map(|v| (v + eps).sqrt().recip());
                        let r = g.constant(rt);
                        let xc = g.channel_sub(x, mean);
                        let xn = g.channel_mul(xc, r);
                        let y = g.channel_mul(xn, pv[*gamma]);
                        x = g.channel_add(y, pv[*beta]);
                        TraceStep::BnRunning { r }
                    }
                },
                Layer::LeakyRelu => {
                    let mask = keep.then(|| g.value(x).map(|v| if v > T::zero() { T::one() } else { slope }));
                    x = g.leaky_relu(x, slope);
                    mask.map_or(TraceStep::Plain, TraceStep::Mask)
                }
                Layer::Relu => {
                    let mask =
                        keep.then(|| g.value(x).map(|v| if v > T::zero() { T::one() } else { T::zero() }));
                    x = g.relu(x);
                    mask.map_or(TraceStep::Plain, TraceStep::Mask)
                }
                Layer::Tanh => {
                    x = g.tanh(x);
                    let y = x;
                    // Keeps every voxel strictly inside (-1, 1) even where
                    // tanh rounds to ±1.
                    let edge = T::one() - T::epsilon() / T::from_f64(2.0);
                    x = g.clamp(x, -edge, edge);
                    TraceStep::Tanh { y }
                }
                Layer::Upsample => {
                    x = g.upsample2x(x);
                    TraceStep::Plain
                }
                Layer::Reshape(per) => {
                    let mut shape = vec![g.shape(x)[0]];
                    shape.extend(per);
                    x = g.reshape(x, &shape);
                    TraceStep::Plain
                }
            };
            if keep {
                steps.push(step);
            }
        }
        (x, Trace { steps }, stat_updates)
    }

    fn absorb(&mut self, updates: Vec<StatUpdate<T>>) {
        for (stats, mean, var, count) in updates {
            self.update_running(stats, &mean, &var, count);
        }
    }

    fn update_running(&mut self, stats: usize, mean: &Tensor<T>, var: &Tensor<T>, count: usize) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::from_f64(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for (rm, &bm) in self.buffers[stats].value.data_mut().iter_mut().zip(mean.data()) {
            *rm = keep * *rm + m * bm;
        }
        for (rv, &bv) in self.buffers[stats + 1].value.data_mut().iter_mut().zip(var.data()) {
            *rv = keep * *rv + m * bv * unbias;
        }
    }

    /// Directional derivative of the forward map at the traced point along
    /// `dx`, recorded on the tape so that it can itself be differentiated
    /// with respect to the parameters.
    pub fn tangent(&self, g: &mut Graph<T>, pv: &[Var], trace: &Trace<T>, mut dx: Var) -> Var {
        assert_eq!(trace.steps.len(), self.layers.len(), "tangent needs a traced forward pass");
        for (layer, step) in self.layers.iter().zip(&trace.steps) {
            dx = match (layer, step) {
                (Layer::Conv { w, geom, .. }, _) => g.conv3d(dx, pv[*w], *geom),
                (Layer::Linear { w, .. }, _) => g.linear(dx, pv[*w]),
                (Layer::BatchNorm { gamma, .. }, TraceStep::BnBatch { xc, r }) => {
                    let dmu = g.channel_mean(dx);
                    let dxc = g.channel_sub(dx, dmu);
                    let prod = g.mul(*xc, dxc);
                    let cov = g.channel_mean(prod);
                    let r2 = g.mul(*r, *r);
                    let r3 = g.mul(r2, *r);
                    let dr = g.mul(r3, cov);
                    let dr = g.scale(dr, -T::one());
                    let a = g.channel_mul(dxc, *r);
                    let b = g.channel_mul(*xc, dr);
                    let sum = g.add(a, b);
                    g.channel_mul(sum, pv[*gamma])
                }
                (Layer::BatchNorm { gamma, .. }, TraceStep::BnRunning { r }) => {
                    let a = g.channel_mul(dx, *r);
                    g.channel_mul(a, pv[*gamma])
                }
                (Layer::LeakyRelu | Layer::Relu, TraceStep::Mask(m)) => g.mask_mul(dx, m.clone()),
                (Layer::Tanh, TraceStep::Tanh { y }) => {
                    let y2 = g.square(*y);
                    let neg = g.scale(y2, -T::one());
                    let d = g.offset(neg, T::one());
                    g.mul(dx, d)
                }
                (Layer::Upsample, _) => g.upsample2x(dx),
                (Layer::Reshape(per), _) => {
                    let mut shape = vec![g.shape(dx)[0]];
                    shape.extend(per);
                    g.reshape(dx, &shape)
                }
                (layer, _) => panic!("trace does not match layer {layer:?}"),
            };
        }
        dx
    }
}

/// Parameters of all four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub generator: Network<T>,
    pub discriminator: Network<T>,
    pub encoder: Network<T>,
    pub code_discriminator: Network<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, kind: NetKind) -> &Network<T> {
        match kind {
            NetKind::Generator => &self.generator,
            NetKind::Discriminator => &self.discriminator,
            NetKind::Encoder => &self.encoder,
            NetKind::CodeDiscriminator => &self.code_discriminator,
        }
    }

    pub fn get_mut(&mut self, kind: NetKind) -> &mut Network<T> {
        match kind {
            NetKind::Generator => &mut self.generator,
            NetKind::Discriminator => &mut self.discriminator,
            NetKind::Encoder => &mut self.encoder,
            NetKind::CodeDiscriminator => &mut self.code_discriminator,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            encoder: self.encoder.cast(),
            code_discriminator: self.code_discriminator.cast(),
        }
    }
}

/// Draws every weight from `N(0, 0.02²)`; batch-norm scales start at 1 and
/// shifts and biases at 0. Networks are initialised in the order G, D, E, C
/// from the single stream `rng`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(mc: &ModelConfig, tc: &TrainConfig, rng: &mut R) -> Result<ModelParams<T>> {
    let (v, l) = (tc.volume_size, tc.latent_size);
    if l == 0 {
        return Err(VolgenError::config("latent_size", "must be a positive integer"));
    }
    Ok(ModelParams {
        generator: Network::generator(mc, v, l, rng)?,
        discriminator: Network::discriminator(mc, v, rng)?,
        encoder: Network::encoder(mc, v, l, rng)?,
        code_discriminator: Network::code_discriminator(mc, l, rng)?,
    })
}

/// Convenience wrapper: one forward pass in a throwaway graph.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, x: Tensor<T>, phase: Phase) -> Tensor<T> {
    let mut g = Graph::new();
    let pv = net.bind(&mut g, false);
    let xv = g.constant(x);
    let y = net.forward(&mut g, &pv, xv, phase);
    g.value(y).clone()
}

/// Evaluation-mode forward pass in a throwaway graph.
pub fn evaluate_eval<T: Scalar>(net: &Network<T>, x: Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let pv = net.bind(&mut g, false);
    let xv = g.constant(x);
    let y = net.forward_eval(&mut g, &pv, xv);
    g.value(y).clone()
}
