//! Dataset assembly and the on-disk layout:
//!
//! ```text
//! <dir>/manifest.csv     id,row,col,split,task,label,continuous,weight
//! <dir>/tiles.bin        tensor container: "tiles" [N,H,W,C] f32, "edges/<task>" f64
//! <dir>/config.snapshot  the generating configuration
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::storage::Container;
use crate::synthdata::{
    derive_target_vector, generate_world, make_splits, pick_label_sites, render_tile,
    sample_locations, select_labeled, Location, MultispectralImage, Sampling, Split, BAND_NAMES,
    GENERATOR_VERSION,
};
use crate::tasks::{
    assign_bin, build_bins, compute_weights, validate_task_set, BinningScheme, TaskSpec, TASK_NAMES,
};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TILES_FILE: &str = "tiles.bin";
pub const SNAPSHOT_FILE: &str = "config.snapshot";

/// One tile with optional per-task supervision. Vectors are indexed like
/// [`Dataset::tasks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub location: Location,
    pub split: Split,
    pub image: MultispectralImage,
    pub labels: Vec<Option<usize>>,
    pub continuous: Vec<Option<f64>>,
    pub weights: Vec<f64>,
}

impl Example {
    pub fn is_unlabeled(&self) -> bool {
        self.labels.iter().all(Option::is_none)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub ids: Vec<usize>,
    pub labeled_fraction: f64,
    pub sampling: Sampling,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskSpec>,
    pub examples: Vec<Example>,
    pub tile_size: usize,
    pub bands: usize,
    pub labeled_fraction: f64,
    pub sampling: Sampling,
    pub seed: u64,
    pub config_snapshot: String,
}

impl Dataset {
    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn manifest(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            split,
            ids: self.split_ids(split),
            labeled_fraction: self.labeled_fraction,
            sampling: self.sampling,
            seed: self.seed,
        }
    }

    pub fn manifests(&self) -> [DatasetManifest; 3] {
        Split::ALL.map(|s| self.manifest(s))
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    /// Ids in `split` carrying a label for task `t`.
    pub fn labeled_ids(&self, t: usize, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .filter(|e| e.split == split && e.labels[t].is_some())
            .map(|e| e.id)
            .collect()
    }

    /// Stacks the selected images as an `[n, C, H, W]` tensor.
    pub fn batch(&self, ids: &[usize]) -> Tensor<f32> {
        images_to_nchw(
            ids.iter().map(|&i| &self.examples[i].image),
            ids.len(),
            self.bands,
            self.tile_size,
        )
    }
}

pub fn images_to_nchw<'a>(
    images: impl Iterator<Item = &'a MultispectralImage>,
    n: usize,
    c: usize,
    s: usize,
) -> Tensor<f32> {
    let plane = s * s;
    let mut data = vec![0.0f32; n * c * plane];
    for (b, img) in images.enumerate() {
        let base = b * c * plane;
        for (p, px) in img.pixels.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[base + ch * plane + p] = v;
            }
        }
    }
    Tensor::new(vec![n, c, s, s], data).expect("consistent batch shape")
}

/// Builds the full dataset described by `cfg`; a pure function of it.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sampling = cfg.sampling()?;
    let world = generate_world(cfg.grid_size, cfg.seed)?;
    let n_sites = if cfg.label_sites > 0 {
        cfg.label_sites
    } else {
        ((cfg.tiles as f64 * cfg.labeled_fraction).floor() as usize).max(1)
    };
    let sites = pick_label_sites(&world, n_sites, cfg.seed);
    let locations = sample_locations(
        &world,
        cfg.tiles,
        sampling,
        &sites,
        cfg.label_radius,
        cfg.seed,
    )?;
    let splits = make_splits(&locations, cfg.fractions(), cfg.min_separation, cfg.seed)?;
    let kept: Vec<(Location, Split)> = locations
        .iter()
        .zip(&splits)
        .filter_map(|(l, s)| s.map(|s| (*l, s)))
        .collect();
    let split_of: Vec<Split> = kept.iter().map(|(_, s)| *s).collect();
    let targets: Vec<[f64; 5]> = kept
        .iter()
        .map(|(l, _)| derive_target_vector(&world, *l))
        .collect::<Result<_>>()?;

    let coverage = cfg.coverage();
    let strategy = cfg.bin_strategy()?;
    let mut tasks = Vec::with_capacity(TASK_NAMES.len());
    let mut masks = Vec::with_capacity(TASK_NAMES.len());
    for (t, name) in TASK_NAMES.iter().enumerate() {
        let mask = select_labeled(&split_of, coverage[name], cfg.seed, name)?;
        let train_values: Vec<f64> = (0..kept.len())
            .filter(|&i| mask[i] && split_of[i] == Split::Train)
            .map(|i| targets[i][t])
            .collect();
        let scheme = build_bins(&train_values, cfg.bins()[t], strategy)?;
        tasks.push(TaskSpec::new(*name, scheme, cfg.importance()[t])?);
        masks.push(mask);
    }
    validate_task_set(&tasks)?;

    let mut examples: Vec<Example> = kept
        .iter()
        .enumerate()
        .map(|(id, &(location, split))| {
            Ok(Example {
                id,
                location,
                split,
                image: render_tile(&world, location, cfg.tile_size, cfg.bands)?,
                labels: vec![None; tasks.len()],
                continuous: vec![None; tasks.len()],
                weights: vec![0.0; tasks.len()],
            })
        })
        .collect::<Result<_>>()?;
    assign_labels(&mut examples, &targets, &masks, &tasks)?;

    Ok(Dataset {
        tasks,
        examples,
        tile_size: cfg.tile_size,
        bands: cfg.bands,
        labeled_fraction: cfg.labeled_fraction,
        sampling,
        seed: cfg.seed,
        config_snapshot: cfg.to_toml(),
    })
}

/// Attaches class labels (binned targets) to the examples selected in
/// `masks[t]` and sets each labelled example's weight from the class counts
/// of the training split.
pub fn assign_labels(
    examples: &mut [Example],
    targets: &[[f64; 5]],
    masks: &[Vec<bool>],
    tasks: &[TaskSpec],
) -> Result<()> {
    let mut counts: HashMap<String, Vec<u64>> = HashMap::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut hist = vec![0u64; task.classes()];
        for (i, ex) in examples.iter_mut().enumerate() {
            if masks[t][i] {
                let value = targets[i][t];
                let class = assign_bin(value, &task.binning)?;
                ex.labels[t] = Some(class);
                ex.continuous[t] = Some(value);
                if ex.split == Split::Train {
                    hist[class] += 1;
                }
            } else {
                ex.labels[t] = None;
                ex.continuous[t] = None;
            }
        }
        counts.insert(task.name.clone(), hist);
    }
    let table = compute_weights::<f64>(tasks, &counts)?;
    for (t, task) in tasks.iter().enumerate() {
        let w = table.task(&task.name).expect("every task weighted");
        for ex in examples.iter_mut() {
            ex.weights[t] = ex.labels[t].map_or(0.0, |k| w[k]);
        }
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut c = Container::new();
    c.set_meta("generator_version", GENERATOR_VERSION.to_string());
    c.set_meta("bands", BAND_NAMES[..ds.bands].join(","));
    c.set_meta("tile_size", ds.tile_size.to_string());
    c.set_meta("labeled_fraction", ds.labeled_fraction.to_string());
    c.set_meta("sampling", ds.sampling.as_str());
    c.set_meta("seed", ds.seed.to_string());
    c.set_meta(
        "tasks",
        ds.tasks
            .iter()
            .map(|t| t.name.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    for t in &ds.tasks {
        c.set_meta(format!("importance/{}", t.name), t.importance.to_string());
        let edges = t.binning.edges();
        c.put(
            format!("edges/{}", t.name),
            &Tensor::new(vec![edges.len()], edges.to_vec())?,
        );
    }
    let s = ds.tile_size;
    let mut pixels = Vec::with_capacity(ds.examples.len() * s * s * ds.bands);
    for ex in &ds.examples {
        pixels.extend_from_slice(&ex.image.pixels);
    }
    c.put(
        "tiles",
        &Tensor::new(vec![ds.examples.len(), s, s, ds.bands], pixels)?,
    );
    c.save(&dir.join(TILES_FILE))?;

    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    w.write_record([
        "id",
        "row",
        "col",
        "split",
        "task",
        "label",
        "continuous",
        "weight",
    ])?;
    for ex in &ds.examples {
        for (t, task) in ds.tasks.iter().enumerate() {
            w.write_record([
                ex.id.to_string(),
                ex.location.row.to_string(),
                ex.location.col.to_string(),
                ex.split.as_str().to_string(),
                task.name.clone(),
                ex.labels[t].map(|v| v.to_string()).unwrap_or_default(),
                ex.continuous[t].map(|v| v.to_string()).unwrap_or_default(),
                ex.weights[t].to_string(),
            ])?;
        }
    }
    w.flush()?;
    fs::write(dir.join(SNAPSHOT_FILE), &ds.config_snapshot)?;
    Ok(())
}

/// Reads a dataset directory. With `expected_bands`, a dataset with a
/// different channel count is rejected.
pub fn read_dataset(dir: &Path, expected_bands: Option<usize>) -> Result<Dataset> {
    let c = Container::load(&dir.join(TILES_FILE))?;
    let version: u32 = parse_meta(&c, "generator_version")?;
    if version != GENERATOR_VERSION {
        return Err(Error::VersionMismatch {
            expected: GENERATOR_VERSION,
            found: version,
        });
    }
    let tiles = c.require("tiles")?;
    let &[n, h, w, ch] = tiles.shape.as_slice() else {
        return Err(Error::CorruptHeader(format!(
            "tiles shape {:?}",
            tiles.shape
        )));
    };
    if h != w {
        return Err(Error::CorruptHeader(format!("non-square tiles {h}x{w}")));
    }
    if let Some(expect) = expected_bands {
        if expect != ch {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} bands"),
                found: format!("{ch} bands"),
            });
        }
    }
    let tiles: Tensor<f32> = tiles.to_tensor()?;
    let sampling: Sampling = c
        .require_meta("sampling")?
        .parse()
        .map_err(|_| Error::CorruptHeader("sampling".into()))?;

    let mut tasks = Vec::new();
    for name in c.require_meta("tasks")?.split(',') {
        let edges: Tensor<f64> = c.require(&format!("edges/{name}"))?.to_tensor()?;
        let importance: f64 = parse_meta(&c, &format!("importance/{name}"))?;
        tasks.push(TaskSpec::new(
            name,
            BinningScheme::from_edges(edges.into_data())?,
            importance,
        )?);
    }

    let per_image = h * w * ch;
    let mut examples: Vec<Example> = tiles
        .data()
        .chunks_exact(per_image)
        .enumerate()
        .map(|(id, px)| Example {
            id,
            location: Location::new(0, 0),
            split: Split::Train,
            image: MultispectralImage {
                height: h,
                width: w,
                channels: ch,
                pixels: px.to_vec(),
            },
            labels: vec![None; tasks.len()],
            continuous: vec![None; tasks.len()],
            weights: vec![0.0; tasks.len()],
        })
        .collect();

    let mut seen = vec![0usize; n];
    let mut r = csv::Reader::from_path(dir.join(MANIFEST_FILE))?;
    let corrupt = |msg: String| Error::CorruptHeader(format!("{MANIFEST_FILE}: {msg}"));
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(corrupt(format!("row with {} fields", rec.len())));
        }
        let num = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| corrupt(format!("bad integer `{}`", &rec[i])))
        };
        let id = num(0)?;
        if id >= n {
            return Err(corrupt(format!("id {id} >= {n} tiles")));
        }
        let t = tasks
            .iter()
            .position(|t| t.name == rec[4])
            .ok_or_else(|| corrupt(format!("unknown task `{}`", &rec[4])))?;
        let ex = &mut examples[id];
        ex.location = Location::new(num(1)?, num(2)?);
        ex.split = rec[3].parse()?;
        if !rec[5].is_empty() {
            ex.labels[t] = Some(num(5)?);
            ex.continuous[t] = Some(
                rec[6]
                    .parse()
                    .map_err(|_| corrupt(format!("bad value `{}`", &rec[6])))?,
            );
        }
        ex.weights[t] = rec[7]
            .parse()
            .map_err(|_| corrupt(format!("bad weight `{}`", &rec[7])))?;
        seen[id] += 1;
    }
    if let Some(id) = seen.iter().position(|&k| k != tasks.len()) {
        return Err(corrupt(format!("example {id} has {} task rows", seen[id])));
    }

    Ok(Dataset {
        tasks,
        examples,
        tile_size: h,
        bands: ch,
        labeled_fraction: parse_meta(&c, "labeled_fraction")?,
        sampling,
        seed: parse_meta(&c, "seed")?,
        config_snapshot: fs::read_to_string(dir.join(SNAPSHOT_FILE))?,
    })
}

fn parse_meta<V: std::str::FromStr>(c: &Container, key: &str) -> Result<V> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| Error::CorruptHeader(format!("metadata `{key}`")))
}
