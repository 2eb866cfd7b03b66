//! Alternating WGAN-GP training with the multitask semi-supervised losses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_loss, BatchBundle, LabeledBatch, LossBreakdown, LossOptions,
};
use crate::models::{
    build_discriminator, build_generator, expand_first_layer, load_filter_bank, Discriminator,
    DiscriminatorSpec, Generator, GeneratorSpec, InitScheme, ParamSet,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::storage::Container;
use crate::synthdata::Split;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "step",
    "lr",
    "ld_total",
    "ld_wgan",
    "ld_multitask",
    "lg_total",
    "lg_wgan",
    "lg_multitask",
    "task",
    "split",
    "accuracy",
];
/// Examples per split used for the logged accuracies.
const ACCURACY_SAMPLE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub critic_steps: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub semi_supervised: bool,
    pub steps_per_epoch: usize,
}

impl From<&RunConfig> for TrainingConfig {
    fn from(c: &RunConfig) -> Self {
        TrainingConfig {
            batch_size: c.batch_size,
            lr0: c.lr0,
            lr_decay_per_epoch: c.lr_decay_per_epoch,
            lr_drop_epoch: c.lr_drop_epoch,
            lr_drop_factor: c.lr_drop_factor,
            weight_decay: c.weight_decay,
            critic_steps: c.critic_steps,
            alpha: c.alpha,
            lambda: c.lambda,
            epochs: c.epochs,
            seed: c.seed,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
            adam_eps: c.adam_eps,
            semi_supervised: c.semi_supervised,
            steps_per_epoch: c.steps_per_epoch,
        }
    }
}

impl TrainingConfig {
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            alpha: self.alpha,
            lambda: self.lambda,
            semi_supervised: self.semi_supervised,
        }
    }
}

/// `lr0 * decay^epoch`, further divided by the drop factor after the drop epoch.
pub fn lr_at(epoch: usize, cfg: &TrainingConfig) -> f64 {
    let lr = cfg.lr0 * cfg.lr_decay_per_epoch.powf(epoch as f64);
    if epoch > cfg.lr_drop_epoch {
        lr / cfg.lr_drop_factor
    } else {
        lr
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// `p <- p - lr * (adam(g) + weight_decay * p)`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let (tlr, twd) = (T::of(lr), T::of(weight_decay));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        for (((p, m), v), g) in params
            .tensors_mut()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = tb1 * m[i] + (T::one() - tb1) * gi;
                v[i] = tb2 * v[i] + (T::one() - tb2) * gi * gi;
                let update = (m[i] / tc1) / ((v[i] / tc2).sqrt() + teps);
                p[i] = p[i] - tlr * (update + twd * p[i]);
            }
        }
    }

    fn store(&self, c: &mut Container, prefix: &str) {
        self.m.store(c, &format!("{prefix}m/"));
        self.v.store(c, &format!("{prefix}v/"));
        c.set_meta(format!("{prefix}t"), self.t.to_string());
    }

    fn load(&self, c: &Container, prefix: &str) -> Result<Self> {
        Ok(Adam {
            m: self.m.load_like(c, &format!("{prefix}m/"))?,
            v: self.v.load_like(c, &format!("{prefix}v/"))?,
            t: parse_meta(c, &format!("{prefix}t"))?,
            ..self.clone()
        })
    }
}

/// Everything a checkpoint captures.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed discriminator updates.
    pub step: usize,
    pub config: RunConfig,
}

pub fn generator_spec(cfg: &RunConfig, data: &Dataset) -> GeneratorSpec {
    GeneratorSpec {
        noise_dim: cfg.noise_dim,
        base_channels: cfg.gen_channels,
        tile_size: data.tile_size,
        channels: data.bands,
    }
}

pub fn discriminator_spec(cfg: &RunConfig, data: &Dataset) -> DiscriminatorSpec {
    DiscriminatorSpec::for_tasks(
        data.bands,
        cfg.disc_widths.clone(),
        cfg.leaky_slope,
        &data.tasks,
    )
}

impl<T: Scalar> TrainState<T> {
    pub fn init(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let generator = build_generator(&generator_spec(cfg, data), cfg.seed)?;
        let mut discriminator = build_discriminator(&discriminator_spec(cfg, data), cfg.seed)?;
        if cfg.init != "none" {
            let scheme: InitScheme = cfg.init.parse()?;
            if cfg.filters.is_empty() {
                return Err(Error::Config(format!(
                    "init `{}` needs a filter bank (filters)",
                    cfg.init
                )));
            }
            let bank: Tensor<T> = load_filter_bank(Path::new(&cfg.filters))?;
            let expanded = expand_first_layer(&bank, data.bands, scheme, cfg.seed)?;
            let stem = discriminator
                .params
                .get_mut("stem.w")
                .expect("stem weights");
            if expanded.shape() != stem.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("filter bank expanding to {:?}", stem.shape()),
                    found: format!("{:?}", expanded.shape()),
                });
            }
            *stem = expanded;
        }
        let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(TrainState {
            opt_g: Adam::new(&generator.params, b1, b2, eps),
            opt_d: Adam::new(&discriminator.params, b1, b2, eps),
            generator,
            discriminator,
            epoch: 0,
            step: 0,
            config: cfg.clone(),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "checkpoint");
        c.set_meta("config", self.config.to_toml());
        c.set_meta("epoch", self.epoch.to_string());
        c.set_meta("step", self.step.to_string());
        c.set_meta(
            "heads",
            self.discriminator
                .spec
                .heads
                .iter()
                .map(|(n, k)| format!("{n}:{k}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        c.set_meta("tile_size", self.generator.spec.tile_size.to_string());
        c.set_meta("bands", self.discriminator.spec.in_channels.to_string());
        self.generator.params.store(&mut c, "gen/");
        self.discriminator.params.store(&mut c, "disc/");
        self.opt_g.store(&mut c, "adam_g/");
        self.opt_d.store(&mut c, "adam_d/");
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.to_container().save(path)
    }

    /// Restores a checkpoint written for a dataset shaped like `data`.
    pub fn load(path: &Path, data: &Dataset) -> Result<Self> {
        let c = Container::load(path)?;
        if c.meta("kind") != Some("checkpoint") {
            return Err(Error::CorruptHeader(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        let config = RunConfig::from_toml(c.require_meta("config")?)?;
        let mut init_cfg = config.clone();
        init_cfg.init = "none".into();
        let fresh = TrainState::<T>::init(&init_cfg, data)?;
        Ok(TrainState {
            generator: Generator {
                params: fresh.generator.params.load_like(&c, "gen/")?,
                ..fresh.generator
            },
            discriminator: Discriminator {
                params: fresh.discriminator.params.load_like(&c, "disc/")?,
                ..fresh.discriminator
            },
            opt_g: fresh.opt_g.load(&c, "adam_g/")?,
            opt_d: fresh.opt_d.load(&c, "adam_d/")?,
            epoch: parse_meta(&c, "epoch")?,
            step: parse_meta(&c, "step")?,
            config,
        })
    }
}

/// Loads only the discriminator from a checkpoint, without the dataset.
pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<Discriminator<T>> {
    let c = Container::load(path)?;
    if c.meta("kind") != Some("checkpoint") {
        return Err(Error::CorruptHeader(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let config = RunConfig::from_toml(c.require_meta("config")?)?;
    let heads = c
        .require_meta("heads")?
        .split(',')
        .map(|h| {
            let (n, k) = h
                .split_once(':')
                .ok_or_else(|| Error::CorruptHeader("heads".into()))?;
            Ok((
                n.to_string(),
                k.parse()
                    .map_err(|_| Error::CorruptHeader("heads".into()))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = DiscriminatorSpec {
        in_channels: parse_meta(&c, "bands")?,
        widths: config.disc_widths.clone(),
        leaky_slope: config.leaky_slope,
        heads,
    };
    let template = build_discriminator::<T>(&spec, 0)?;
    Ok(Discriminator {
        params: template.params.load_like(&c, "disc/")?,
        spec,
    })
}

fn parse_meta<V: std::str::FromStr>(c: &Container, key: &str) -> Result<V> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| Error::CorruptHeader(format!("metadata `{key}`")))
}

/// Index pools the batch sampler draws from.
#[derive(Clone, Debug)]
pub struct Pools {
    pub train: Vec<usize>,
    /// Per task, training examples carrying that task's label.
    pub labeled: Vec<Vec<usize>>,
}

impl Pools {
    pub fn new(data: &Dataset) -> Self {
        Pools {
            train: data.split_ids(Split::Train),
            labeled: (0..data.tasks.len())
                .map(|t| data.labeled_ids(t, Split::Train))
                .collect(),
        }
    }
}

/// Sizes of the labelled, unlabelled and fake parts of a bundle.
pub fn bundle_sizes(batch: usize) -> (usize, usize, usize) {
    let third = batch / 3;
    (batch - 2 * third, third, third)
}

/// Cycles through a shuffled copy of the training pool.
#[derive(Clone, Debug)]
pub struct BatchCursor {
    order: Vec<usize>,
    at: usize,
}

impl BatchCursor {
    pub fn new(order: Vec<usize>) -> Self {
        assert!(!order.is_empty(), "empty pool");
        BatchCursor { order, at: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let v = self.order[self.at];
                self.at = (self.at + 1) % self.order.len();
                v
            })
            .collect()
    }
}

fn build_bundle<T: Scalar>(
    data: &Dataset,
    pools: &Pools,
    cursor: &mut BatchCursor,
    gen: &Generator<T>,
    batch: usize,
    semi_supervised: bool,
    rng: &mut seed::Rng,
) -> BatchBundle<T> {
    let (n_l, n_u, n_f) = bundle_sizes(batch);
    let n_tasks = data.tasks.len();
    let available: Vec<usize> = (0..n_tasks)
        .filter(|&t| !pools.labeled[t].is_empty())
        .collect();
    let mut per_task = vec![0usize; n_tasks];
    if !available.is_empty() {
        for j in 0..n_l {
            per_task[available[j % available.len()]] += 1;
        }
    }
    let mut labeled = Vec::new();
    for (t, &count) in per_task.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let pool = &pools.labeled[t];
        let ids: Vec<usize> = (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        labeled.push(LabeledBatch {
            task: t,
            images: data.batch(&ids).cast(),
            labels: ids
                .iter()
                .map(|&i| data.examples[i].labels[t].expect("labelled pool"))
                .collect(),
            weights: ids
                .iter()
                .map(|&i| T::of(class_balance_weight(data, t, i)))
                .collect(),
        });
    }
    let (unlabeled, fake, interp_eps) = if semi_supervised {
        let u = data.batch(&cursor.take(n_u)).cast();
        let z = gen.sample_noise(n_f, rng);
        let fake = gen.generate(&z);
        let eps = (0..n_u).map(|_| T::of(rng.gen::<f64>())).collect();
        (u, fake, eps)
    } else {
        let shape = [0, data.bands, data.tile_size, data.tile_size];
        (Tensor::zeros(&shape), Tensor::zeros(&shape), Vec::new())
    };
    BatchBundle {
        labeled,
        unlabeled,
        fake,
        interp_eps,
    }
}

/// The stored weight already includes the task importance; the multitask sum
/// applies importance once, so it is divided back out here.
fn class_balance_weight(data: &Dataset, t: usize, id: usize) -> f64 {
    let w = data.tasks[t].importance;
    let stored = data.examples[id].weights[t];
    if w > 0.0 {
        stored / w
    } else {
        0.0
    }
}

/// Losses and update counts from one [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub d_losses: Vec<LossBreakdown>,
    pub g_loss: Option<LossBreakdown>,
}

fn finite_or(state_bad: bool) -> Result<()> {
    if state_bad {
        Err(Error::NonFiniteGradient)
    } else {
        Ok(())
    }
}

/// `d_steps` discriminator updates followed by one generator update (the
/// latter only in semi-supervised mode).
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    pools: &Pools,
    cursor: &mut BatchCursor,
    d_steps: usize,
    lr: f64,
    rng: &mut seed::Rng,
) -> Result<StepOutcome> {
    let cfg = TrainingConfig::from(&state.config);
    let importance: Vec<f64> = data.tasks.iter().map(|t| t.importance).collect();
    let mut d_losses = Vec::with_capacity(d_steps);
    for _ in 0..d_steps {
        let bundle = build_bundle(
            data,
            pools,
            cursor,
            &state.generator,
            cfg.batch_size,
            cfg.semi_supervised,
            rng,
        );
        let g = Graph::new();
        let params = state.discriminator.params.bind(&g, true);
        let (loss, breakdown) = discriminator_loss(
            &g,
            &state.discriminator,
            &params,
            &bundle,
            &importance,
            cfg.loss_options(),
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLogit);
        }
        let grads = collect_grads(&g, loss, &params);
        finite_or(grads.iter().any(|t| !t.all_finite()))?;
        state.opt_d.step(
            &mut state.discriminator.params,
            &grads,
            lr,
            cfg.weight_decay,
        );
        state.step += 1;
        d_losses.push(breakdown);
    }
    if !cfg.semi_supervised {
        return Ok(StepOutcome {
            d_losses,
            g_loss: None,
        });
    }
    let g = Graph::new();
    let gp = state.generator.params.bind(&g, true);
    let dp = state.discriminator.params.bind(&g, false);
    let z = state
        .generator
        .sample_noise(bundle_sizes(cfg.batch_size).2, rng);
    let (loss, breakdown) = generator_loss(
        &g,
        &state.generator,
        &gp,
        &state.discriminator,
        &dp,
        z,
        &importance,
        cfg.alpha,
    )?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLogit);
    }
    let grads = collect_grads(&g, loss, &gp);
    finite_or(grads.iter().any(|t| !t.all_finite()))?;
    state
        .opt_g
        .step(&mut state.generator.params, &grads, lr, 0.0);
    Ok(StepOutcome {
        d_losses,
        g_loss: Some(breakdown),
    })
}

fn collect_grads<'g, T: Scalar>(
    g: &'g Graph<T>,
    loss: crate::autodiff::Var<'g, T>,
    params: &[crate::autodiff::Var<'g, T>],
) -> Vec<Tensor<T>> {
    g.grad(loss, params, false)
        .into_iter()
        .zip(params)
        .map(|(gr, p)| match gr {
            Some(v) => (*v.value()).clone(),
            None => Tensor::zeros(&p.shape()),
        })
        .collect()
}

/// Fraction of examples whose arg-max over the first `K` logits is the label.
pub fn task_accuracy<T: Scalar>(
    d: &Discriminator<T>,
    data: &Dataset,
    task: usize,
    ids: &[usize],
) -> Result<f64> {
    let preds = predict_classes(d, data, ids)?;
    Ok(accuracy_from(data, task, ids, &preds))
}

/// Arg-max over the real classes of every head, one row per id.
pub fn predict_classes<T: Scalar>(
    d: &Discriminator<T>,
    data: &Dataset,
    ids: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        let fwd = d.forward(&data.batch(chunk).cast())?;
        for r in 0..chunk.len() {
            out.push(
                d.spec
                    .heads
                    .iter()
                    .zip(&fwd.logits)
                    .map(|((_, k), (_, logits))| {
                        let row = &logits.row(r)[..*k];
                        (0..*k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn accuracy_from(data: &Dataset, task: usize, ids: &[usize], preds: &[Vec<usize>]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let correct = ids
        .iter()
        .zip(preds)
        .filter(|(&id, p)| Some(p[task]) == data.examples[id].labels[task])
        .count();
    correct as f64 / ids.len() as f64
}

/// One logged epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ld_total: f64,
    pub ld_wgan: f64,
    pub ld_multitask: f64,
    pub lg_total: f64,
    pub lg_wgan: f64,
    pub lg_multitask: f64,
    /// `(task, split, accuracy)`
    pub accuracy: Vec<(String, Split, f64)>,
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn write_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (task, split, acc) in &self.accuracy {
            w.write_record([
                self.epoch.to_string(),
                self.step.to_string(),
                self.lr.to_string(),
                self.ld_total.to_string(),
                self.ld_wgan.to_string(),
                self.ld_multitask.to_string(),
                self.lg_total.to_string(),
                self.lg_wgan.to_string(),
                self.lg_multitask.to_string(),
                task.clone(),
                split.as_str().to_string(),
                acc.to_string(),
            ])?;
        }
        Ok(())
    }
}

fn mean_of(v: &[LossBreakdown], f: impl Fn(&LossBreakdown) -> f64) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    }
}

/// Deterministic accuracy sample: the first few labelled ids of a split.
fn accuracy_ids(data: &Dataset, t: usize, split: Split) -> Vec<usize> {
    let mut ids = data.labeled_ids(t, split);
    ids.truncate(ACCURACY_SAMPLE);
    ids
}

/// Discriminator updates per epoch.
pub fn d_steps_per_epoch(cfg: &TrainingConfig, n_train: usize) -> usize {
    if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        n_train.div_ceil(cfg.batch_size).max(1)
    }
}

fn run_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    data: &Dataset,
    pools: &Pools,
) -> Result<MetricsRow> {
    let started = Instant::now();
    let cfg = TrainingConfig::from(&state.config);
    let e = state.epoch;
    let lr = lr_at(e, &cfg);
    let mut rng = seed::stream(cfg.seed, "epoch", &[e as u64]);
    let mut order = pools.train.clone();
    order.shuffle(&mut rng);
    let mut cursor = BatchCursor::new(order);
    let total = d_steps_per_epoch(&cfg, pools.train.len());
    let mut d_all = Vec::with_capacity(total);
    let mut g_all = Vec::new();
    let mut done = 0;
    while done < total {
        let k = cfg.critic_steps.min(total - done);
        let out = train_step(state, data, pools, &mut cursor, k, lr, &mut rng)?;
        done += k;
        d_all.extend(out.d_losses);
        g_all.extend(out.g_loss);
    }
    let mut accuracy = Vec::new();
    for split in [Split::Train, Split::Val] {
        let per_task: Vec<Vec<usize>> = (0..data.tasks.len())
            .map(|t| accuracy_ids(data, t, split))
            .collect();
        let mut union: Vec<usize> = per_task.concat();
        union.sort_unstable();
        union.dedup();
        let preds = predict_classes(&state.discriminator, data, &union)?;
        for (t, ids) in per_task.iter().enumerate() {
            let rows: Vec<Vec<usize>> = ids
                .iter()
                .map(|id| preds[union.binary_search(id).expect("id in union")].clone())
                .collect();
            accuracy.push((data.tasks[t].name.clone(), split, accuracy_from(data, t, ids, &rows)));
        }
    }
    accuracy.sort_by_key(|(name, split, _)| (data.task_index(name), split.index()));
    state.epoch += 1;
    Ok(MetricsRow {
        epoch: e,
        step: state.step,
        lr,
        ld_total: mean_of(&d_all, |b| b.total),
        ld_wgan: mean_of(&d_all, |b| b.wgan),
        ld_multitask: mean_of(&d_all, |b| b.multitask),
        lg_total: mean_of(&g_all, |b| b.total),
        lg_wgan: mean_of(&g_all, |b| b.wgan),
        lg_multitask: mean_of(&g_all, |b| b.multitask),
        accuracy,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch:03}.ckpt"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Keys that may differ between a checkpoint and the run resuming it.
fn comparable(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        epochs: 0,
        init: "none".into(),
        filters: String::new(),
        ..cfg.clone()
    }
}

/// Runs (or resumes) training, writing a checkpoint after every epoch, a
/// final checkpoint and the metrics CSV under `out_dir`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.snapshot"), cfg.to_toml())?;
    let pools = Pools::new(data);
    if pools.train.is_empty() {
        return Err(Error::MissingLabels("training split is empty".into()));
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut state = match resume {
        Some(path) => {
            let mut s = TrainState::<T>::load(path, data)?;
            if comparable(&s.config) != comparable(cfg) {
                return Err(Error::ResumeMismatch(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            s.config = cfg.clone();
            s
        }
        None => TrainState::<T>::init(cfg, data)?,
    };

    let mut kept = Vec::new();
    if resume.is_some() && metrics_path.exists() {
        let mut r = csv::Reader::from_path(&metrics_path)?;
        for rec in r.records() {
            let rec = rec?;
            let epoch: usize = rec[0]
                .parse()
                .map_err(|_| Error::CorruptHeader("metrics epoch".into()))?;
            if epoch < state.epoch {
                kept.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record(METRICS_HEADER)?;
    for rec in &kept {
        w.write_record(rec)?;
    }
    w.flush()?;

    if state.epoch == 0 {
        state.save(&checkpoint_path(out_dir, 0))?;
    }
    let mut rows = Vec::new();
    while state.epoch < cfg.epochs {
        let snapshot = state.clone();
        let row = match run_epoch(&mut state, data, &pools) {
            Ok(r) => r,
            Err(Error::NonFiniteLogit | Error::NonFiniteGradient) => {
                let diag = out_dir.join("checkpoints").join("diagnostic.ckpt");
                snapshot.save(&diag)?;
                return Err(Error::NonFiniteLoss {
                    epoch: snapshot.epoch,
                    step: state.step,
                    checkpoint: diag,
                });
            }
            Err(e) => return Err(e),
        };
        eprintln!(
            "epoch {} step {} lr {:.6} ld {:.4} lg {:.4} ({:.1}s)",
            row.epoch, row.step, row.lr, row.ld_total, row.lg_total, row.wall_time
        );
        row.write_csv(&mut w)?;
        w.flush()?;
        state.save(&checkpoint_path(out_dir, state.epoch))?;
        rows.push(row);
    }
    let final_checkpoint = final_checkpoint_path(out_dir);
    state.save(&final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        metrics: metrics_path,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainingConfig::from(&RunConfig::default());
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(1, &cfg), 0.0098);
        // correctly rounded 0.01 * 0.98^26 / 5
        assert_eq!(lr_at(26, &cfg), 0.001_182_790_870_366_637_5);
        assert!(lr_at(25, &cfg) > 5.0 * lr_at(26, &cfg));
    }

    #[test]
    fn bundle_split_of_default_batch() {
        assert_eq!(bundle_sizes(115), (39, 38, 38));
    }

    #[test]
    fn decoupled_decay_is_geometric() {
        let mut p = ParamSet::default();
        p.push("w", Tensor::<f64>::full(&[3], 2.0));
        let mut opt = Adam::new(&p, 0.0, 0.9, 1e-8);
        let zero = vec![Tensor::zeros(&[3])];
        for _ in 0..10 {
            opt.step(&mut p, &zero, 0.01, 0.5);
        }
        let expect = 2.0 * (1.0 - 0.01 * 0.5f64).powi(10);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-14);
    }
}
