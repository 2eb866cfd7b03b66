//! Generator and discriminator networks.
//!
//! Parameters live in a [`ParamSet`] (ordered, named tensors). A forward pass
//! binds them onto a [`Graph`] and walks them in creation order.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::storage::Container;
use crate::tasks::TaskSpec;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.tensors()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn store(&self, c: &mut Container, prefix: &str) {
        for (n, t) in &self.entries {
            c.put(format!("{prefix}{n}"), t);
        }
    }

    /// Loads tensors named like `self` (under `prefix`) from `c`, checking shapes.
    pub fn load_like(&self, c: &Container, prefix: &str) -> Result<Self> {
        let mut out = ParamSet::default();
        for (n, t) in &self.entries {
            let stored: Tensor<T> = c.require(&format!("{prefix}{n}"))?.to_tensor_cast()?;
            if stored.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} {:?}", t.shape()),
                    found: format!("{:?}", stored.shape()),
                });
            }
            out.push(n.clone(), stored);
        }
        Ok(out)
    }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut seed::Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Batch normalisation with batch statistics over `(N, H, W)` per channel.
fn batch_norm<'g, T: Scalar>(x: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Var<'g, T> {
    let shape = x.shape();
    let m = T::of((x.value().len() / shape[1]) as f64);
    let mean = x.channel_sum().scale(T::one() / m);
    let centered = x.sub(mean.channel_expand(&shape));
    let var = centered.mul(centered).channel_sum().scale(T::one() / m);
    let inv = var.add_scalar(T::of(BN_EPS)).powf(T::of(-0.5));
    centered
        .mul(inv.mul(gamma).channel_expand(&shape))
        .add(beta.channel_expand(&shape))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    /// Channels of the 4x4 projection; halved at every upsampling stage.
    pub base_channels: usize,
    pub tile_size: usize,
    pub channels: usize,
}

impl GeneratorSpec {
    /// `(in_channels, out_channels)` of each stride-2 transposed-conv stage.
    pub fn stages(&self) -> Result<Vec<(usize, usize)>> {
        let mut size = 4;
        let mut n = 0;
        while size < self.tile_size {
            size *= 2;
            n += 1;
        }
        if size != self.tile_size || n == 0 {
            return Err(Error::ShapeInfeasible(format!(
                "tile size {} is not 4 * 2^n with n >= 1",
                self.tile_size
            )));
        }
        if self.noise_dim == 0 || self.channels == 0 || self.base_channels == 0 {
            return Err(Error::ShapeInfeasible("zero-sized generator".into()));
        }
        let mut c = self.base_channels;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 == n {
                self.channels
            } else {
                (c / 2).max(8)
            };
            out.push((c, next));
            c = next;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed_value: u64) -> Result<Generator<T>> {
    let stages = spec.stages()?;
    let mut rng = seed::stream(seed_value, "generator-init", &[]);
    let mut p = ParamSet::default();
    let c0 = spec.base_channels;
    p.push(
        "proj.w",
        normal_tensor(&[spec.noise_dim, 16 * c0], 0.02, &mut rng),
    );
    p.push("proj.b", Tensor::zeros(&[16 * c0]));
    p.push("bn0.gamma", Tensor::full(&[c0], T::one()));
    p.push("bn0.beta", Tensor::zeros(&[c0]));
    for (i, &(cin, cout)) in stages.iter().enumerate() {
        p.push(
            format!("up{i}.w"),
            normal_tensor(&[cin, cout, 4, 4], 0.02, &mut rng),
        );
        p.push(format!("up{i}.b"), Tensor::zeros(&[cout]));
        if i + 1 < stages.len() {
            p.push(
                format!("bn{}.gamma", i + 1),
                Tensor::full(&[cout], T::one()),
            );
            p.push(format!("bn{}.beta", i + 1), Tensor::zeros(&[cout]));
        }
    }
    Ok(Generator {
        spec: spec.clone(),
        params: p,
    })
}

impl<T: Scalar> Generator<T> {
    /// `z: [N, noise_dim]` to images `[N, C, H, W]` in `(-1, 1)`.
    pub fn forward<'g>(&self, params: &[Var<'g, T>], z: Var<'g, T>) -> Var<'g, T> {
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("generator parameter count");
        let n = z.shape()[0];
        let c0 = self.spec.base_channels;
        let h = z
            .matmul(next(), false, false)
            .add_bias(next())
            .reshape(&[n, c0, 4, 4]);
        let (gamma, beta) = (next(), next());
        let mut h = batch_norm(h, gamma, beta).relu();
        let stages = self.spec.stages().expect("validated at build");
        for i in 0..stages.len() {
            h = h.conv_transpose2d(next(), 2, 1).add_bias(next());
            if i + 1 < stages.len() {
                let (gamma, beta) = (next(), next());
                h = batch_norm(h, gamma, beta).relu();
            } else {
                h = h.tanh();
            }
        }
        h
    }

    pub fn sample_noise(&self, n: usize, rng: &mut seed::Rng) -> Tensor<T> {
        normal_tensor(&[n, self.spec.noise_dim], 1.0, rng)
    }

    /// Runs the generator outside any training graph.
    pub fn generate(&self, z: &Tensor<T>) -> Tensor<T> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(z.clone()));
        (*out.value()).clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    /// Output width of each residual block; the last one is the feature size.
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    /// `(task name, K)`; each head emits `K + 1` logits.
    pub heads: Vec<(String, usize)>,
}

impl DiscriminatorSpec {
    pub fn for_tasks(
        in_channels: usize,
        widths: Vec<usize>,
        leaky_slope: f64,
        tasks: &[TaskSpec],
    ) -> Self {
        DiscriminatorSpec {
            in_channels,
            widths,
            leaky_slope,
            heads: tasks
                .iter()
                .map(|t| (t.name.clone(), t.classes()))
                .collect(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Blocks that change width also halve the resolution.
    fn block_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut prev = self.widths[0];
        self.widths
            .iter()
            .map(|&w| {
                let stride = if w != prev { 2 } else { 1 };
                let b = (prev, w, stride);
                prev = w;
                b
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
}

/// Graph-level outputs of a discriminator pass.
pub struct DiscriminatorVars<'g, T: Scalar> {
    /// `[N]`
    pub critic: Var<'g, T>,
    /// Per head, `[N, K + 1]`.
    pub logits: Vec<Var<'g, T>>,
    /// `[N, feature_dim]`
    pub features: Var<'g, T>,
}

/// Plain-value outputs of a discriminator pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub critic: Vec<T>,
    pub logits: Vec<(String, Tensor<T>)>,
    pub features: Tensor<T>,
}

pub fn build_discriminator<T: Scalar>(
    spec: &DiscriminatorSpec,
    seed_value: u64,
) -> Result<Discriminator<T>> {
    if spec.widths.is_empty() || spec.in_channels == 0 {
        return Err(Error::ShapeInfeasible(
            "discriminator needs input channels and at least one block".into(),
        ));
    }
    let mut names = std::collections::HashSet::new();
    if spec
        .heads
        .iter()
        .any(|(n, k)| *k == 0 || !names.insert(n.clone()))
    {
        return Err(Error::InvalidArgument(
            "heads need unique names and K >= 1".into(),
        ));
    }
    let mut rng = seed::stream(seed_value, "discriminator-init", &[]);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut p = ParamSet::default();
    let w0 = spec.widths[0];
    p.push(
        "stem.w",
        normal_tensor(
            &[w0, spec.in_channels, 3, 3],
            he(9 * spec.in_channels),
            &mut rng,
        ),
    );
    p.push("stem.b", Tensor::zeros(&[w0]));
    for (i, (cin, cout, _)) in spec.block_plan().into_iter().enumerate() {
        p.push(
            format!("block{i}.c1.w"),
            normal_tensor(&[cout, cin, 3, 3], he(9 * cin), &mut rng),
        );
        p.push(format!("block{i}.c1.b"), Tensor::zeros(&[cout]));
        // residual branch starts small so the stack is near-identity at init
        p.push(
            format!("block{i}.c2.w"),
            normal_tensor(&[cout, cout, 3, 3], 0.25 * he(9 * cout), &mut rng),
        );
        p.push(format!("block{i}.c2.b"), Tensor::zeros(&[cout]));
        if cin != cout {
            p.push(
                format!("block{i}.skip.w"),
                normal_tensor(&[cout, cin, 1, 1], he(cin), &mut rng),
            );
        }
    }
    let f = spec.feature_dim();
    let lin = (1.0 / f as f64).sqrt();
    p.push("critic.w", normal_tensor(&[f, 1], lin, &mut rng));
    p.push("critic.b", Tensor::zeros(&[1]));
    for (name, k) in &spec.heads {
        p.push(
            format!("head.{name}.w"),
            normal_tensor(&[f, k + 1], lin, &mut rng),
        );
        p.push(format!("head.{name}.b"), Tensor::zeros(&[k + 1]));
    }
    Ok(Discriminator {
        spec: spec.clone(),
        params: p,
    })
}

impl<T: Scalar> Discriminator<T> {
    pub fn forward_vars<'g>(
        &self,
        params: &[Var<'g, T>],
        x: Var<'g, T>,
    ) -> DiscriminatorVars<'g, T> {
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("discriminator parameter count");
        let slope = T::of(self.spec.leaky_slope);
        let mut h = x.conv2d(next(), 1, 1).add_bias(next()).leaky_relu(slope);
        for (cin, cout, stride) in self.spec.block_plan() {
            let r = h
                .conv2d(next(), stride, 1)
                .add_bias(next())
                .leaky_relu(slope);
            let r = r.conv2d(next(), 1, 1).add_bias(next());
            let skip = if cin != cout {
                h.conv2d(next(), stride, 0)
            } else {
                h
            };
            h = r.add(skip).leaky_relu(slope);
        }
        let features = h.spatial_mean();
        let n = features.shape()[0];
        let critic = features
            .matmul(next(), false, false)
            .add_bias(next())
            .reshape(&[n]);
        let logits = self
            .spec
            .heads
            .iter()
            .map(|_| features.matmul(next(), false, false).add_bias(next()))
            .collect();
        DiscriminatorVars {
            critic,
            logits,
            features,
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != s[3] {
            return Err(Error::ShapeMismatch {
                expected: format!("[N, {}, S, S]", self.spec.in_channels),
                found: format!("{s:?}"),
            });
        }
        Ok(())
    }

    /// Inference pass on `[N, C, H, W]` images.
    pub fn forward(&self, images: &Tensor<T>) -> Result<DiscriminatorOutput<T>> {
        self.check_input(images)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward_vars(&p, g.constant(images.clone()));
        Ok(DiscriminatorOutput {
            critic: out.critic.value().data().to_vec(),
            logits: self
                .spec
                .heads
                .iter()
                .zip(&out.logits)
                .map(|((name, _), l)| (name.clone(), (*l.value()).clone()))
                .collect(),
            features: (*out.features.value()).clone(),
        })
    }
}

/// Pooled body features, `[N, feature_dim]`, computed in chunks.
pub fn extract_features<T: Scalar>(d: &Discriminator<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    d.check_input(images)?;
    const CHUNK: usize = 64;
    let n = images.rows();
    let mut parts = Vec::with_capacity(n.div_ceil(CHUNK));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        parts.push(d.forward(&images.select_rows(&idx))?.features);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, d.spec.feature_dim()]));
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    SameInit,
    RandomInit,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-init" => Ok(InitScheme::SameInit),
            "random-init" => Ok(InitScheme::RandomInit),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme `{other}`"
            ))),
        }
    }
}

/// Standard deviation of a unit normal truncated to `[-2, 2]`.
const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

/// Widens a `[Cout, 3, k, k]` first-layer bank to `target_channels` inputs.
///
/// The RGB slices are copied unchanged. `SameInit` fills every extra channel
/// with the per-position mean of the three RGB weights; `RandomInit` draws
/// them from a normal truncated at two standard deviations, scaled so the
/// draws have the bank's mean and standard deviation.
pub fn expand_first_layer<T: Scalar>(
    rgb: &Tensor<T>,
    target_channels: usize,
    scheme: InitScheme,
    seed_value: u64,
) -> Result<Tensor<T>> {
    let s = rgb.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::BadChannelCount(format!(
            "filter bank shape {s:?}, expected [Cout, 3, k, k]"
        )));
    }
    if target_channels < 3 {
        return Err(Error::BadChannelCount(format!(
            "target channels {target_channels} < 3"
        )));
    }
    let (cout, kk) = (s[0], s[2] * s[3]);
    let src = rgb.data();
    let n = src.len() as f64;
    let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let std = (src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt();
    let base = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::stream(seed_value, "expand-first-layer", &[]);

    let mut out = Vec::with_capacity(cout * target_channels * kk);
    for o in 0..cout {
        let filt = &src[o * 3 * kk..(o + 1) * 3 * kk];
        out.extend_from_slice(filt);
        for _ in 3..target_channels {
            for p in 0..kk {
                let v = match scheme {
                    InitScheme::SameInit => {
                        (filt[p] + filt[kk + p] + filt[2 * kk + p]) / T::of(3.0)
                    }
                    InitScheme::RandomInit => {
                        let z = loop {
                            let z: f64 = base.sample(&mut rng);
                            if z.abs() <= 2.0 {
                                break z;
                            }
                        };
                        T::of(mean + std * z / TRUNC2_STD)
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![cout, target_channels, s[2], s[3]], out)
}

/// Reads a filter bank (tensor `filters`) from a container file.
pub fn load_filter_bank<T: Scalar>(path: &std::path::Path) -> Result<Tensor<T>> {
    Container::load(path)?.require("filters")?.to_tensor_cast()
}

pub fn random_images<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
}
