//! Synthetic "continent": a latent development field with cities, roads and
//! villages, rendered into multispectral tiles with correlated targets.
//!
//! The recipe below is frozen under [`GENERATOR_VERSION`]; changing any
//! constant changes every downstream number, so bump the version with it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tasks::{AWI, LAND_COVER, NIGHTLIGHTS, POPULATION, ROAD_DISTANCE, TASK_NAMES};

pub const GENERATOR_VERSION: u32 = 1;

/// Landsat 7 band order; the RGB-only ablation keeps the first three.
pub const BAND_NAMES: [&str; 9] = [
    "blue", "green", "red", "nir", "swir1", "swir2", "thermal1", "thermal2", "pan",
];

/// Visible band whose brightness tracks built-up area, and hence lights.
pub const NIGHTLIGHT_PROXY_BAND: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub row: usize,
    pub col: usize,
}

impl Location {
    pub fn new(row: usize, col: usize) -> Self {
        Location { row, col }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// An `H x W x C` tile with values in `[-1, 1]`, stored row-major (`C` fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl MultispectralImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels}"),
                found: format!("{} values", pixels.len()),
            });
        }
        Ok(MultispectralImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn band_names(&self) -> &'static [&'static str] {
        &BAND_NAMES[..self.channels]
    }

    pub fn band_mean(&self, c: usize) -> f64 {
        let n = self.height * self.width;
        (0..n)
            .map(|p| self.pixels[p * self.channels + c] as f64)
            .sum::<f64>()
            / n as f64
    }

    /// Keeps the first `channels` bands.
    pub fn slice_bands(&self, channels: usize) -> Self {
        let pixels = self
            .pixels
            .chunks_exact(self.channels)
            .flat_map(|px| px[..channels].iter().copied())
            .collect();
        MultispectralImage {
            height: self.height,
            width: self.width,
            channels,
            pixels,
        }
    }
}

/// Latent layers over a square grid.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub size: usize,
    pub seed: u64,
    /// Development level in `[0, 1]`.
    pub development: Vec<f64>,
    /// Settlement density in `[0, 1]`.
    pub settlement: Vec<f64>,
    pub road: Vec<bool>,
    /// Euclidean distance (grid cells) to the nearest road cell.
    pub road_distance: Vec<f64>,
}

impl World {
    #[inline]
    pub fn index(&self, loc: Location) -> usize {
        loc.row * self.size + loc.col
    }

    pub fn check(&self, loc: Location) -> Result<()> {
        if loc.row >= self.size || loc.col >= self.size {
            return Err(Error::OutOfGrid {
                row: loc.row as i64,
                col: loc.col as i64,
                size: self.size,
            });
        }
        Ok(())
    }

    pub fn development_at(&self, loc: Location) -> f64 {
        self.development[self.index(loc)]
    }

    pub fn cells(&self) -> impl Iterator<Item = Location> + '_ {
        (0..self.size).flat_map(move |r| (0..self.size).map(move |c| Location::new(r, c)))
    }

    /// Bilinear sample of a layer at continuous grid coordinates.
    fn sample(&self, layer: &[f64], y: f64, x: f64) -> f64 {
        let max = (self.size - 1) as f64;
        let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.size - 1), (x0 + 1).min(self.size - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |r: usize, c: usize| layer[r * self.size + c];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

pub fn generate_world(grid_size: usize, world_seed: u64) -> Result<World> {
    if grid_size < 8 {
        return Err(Error::InvalidArgument(format!("grid size {grid_size} < 8")));
    }
    let n = grid_size;
    let mut rng = seed::stream(world_seed, "world", &[GENERATOR_VERSION as u64]);

    struct City {
        r: f64,
        c: f64,
        radius: f64,
        strength: f64,
    }
    let n_cities = (n * n / 300).max(3);
    let cities: Vec<City> = (0..n_cities)
        .map(|_| City {
            r: rng.gen_range(0.0..n as f64),
            c: rng.gen_range(0.0..n as f64),
            radius: rng.gen_range(1.5..(n as f64 / 10.0).max(2.0)),
            strength: rng.gen_range(0.4..1.0),
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / n as f64;
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                f * theta.cos(),
                f * theta.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();

    let mut dev = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64, c as f64);
            let mut v = 0.0;
            for city in &cities {
                let d2 = (y - city.r).powi(2) + (x - city.c).powi(2);
                v += city.strength * (-d2 / (2.0 * city.radius * city.radius)).exp();
            }
            for &(fy, fx, phase, amp) in &waves {
                v += amp * (fy * y + fx * x + phase).sin();
            }
            dev[r * n + c] = v;
        }
    }
    normalize_unit(&mut dev);
    dev.iter_mut().for_each(|v| *v = v.powf(1.3));

    let mut road = vec![false; n * n];
    for (i, a) in cities.iter().enumerate() {
        let nearest = cities
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .min_by(|(_, p), (_, q)| {
                let dp = (p.r - a.r).powi(2) + (p.c - a.c).powi(2);
                let dq = (q.r - a.r).powi(2) + (q.c - a.c).powi(2);
                dp.total_cmp(&dq)
            })
            .map(|(_, b)| b)
            .expect("at least three cities");
        draw_line(
            &mut road,
            n,
            (a.r as usize, a.c as usize),
            (nearest.r as usize, nearest.c as usize),
        );
    }
    let road_distance = distance_transform(&road, n);

    let n_villages = n * n / 40;
    let mut settlement: Vec<f64> = dev.iter().map(|d| 0.8 * d).collect();
    let mut placed = 0;
    while placed < n_villages {
        let (r, c) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let accept = (-road_distance[r * n + c] / 4.0).exp();
        if rng.gen::<f64>() >= accept {
            continue;
        }
        placed += 1;
        let radius: f64 = rng.gen_range(0.7..1.5);
        let amp: f64 = rng.gen_range(0.2..0.5);
        let reach = (3.0 * radius).ceil() as isize;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as f64;
                settlement[rr as usize * n + cc as usize] +=
                    amp * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    settlement.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(World {
        size: n,
        seed: world_seed,
        development: dev,
        settlement,
        road,
        road_distance,
    })
}

fn normalize_unit(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
}

fn draw_line(mask: &mut [bool], n: usize, from: (usize, usize), to: (usize, usize)) {
    let (mut r, mut c) = (from.0 as isize, from.1 as isize);
    let (r1, c1) = (to.0 as isize, to.1 as isize);
    let (dr, dc) = ((r1 - r).abs(), -(c1 - c).abs());
    let (sr, sc) = (if r < r1 { 1 } else { -1 }, if c < c1 { 1 } else { -1 });
    let mut err = dr + dc;
    loop {
        mask[r as usize * n + c as usize] = true;
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

/// Exact Euclidean distance transform (separable lower-envelope method).
fn distance_transform(mask: &[bool], n: usize) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for c in 0..n {
        for r in 0..n {
            line[r] = grid[r * n + c];
        }
        edt_1d(&line, &mut out);
        for r in 0..n {
            grid[r * n + c] = out[r];
        }
    }
    for r in 0..n {
        line.copy_from_slice(&grid[r * n..(r + 1) * n]);
        edt_1d(&line, &mut out);
        grid[r * n..(r + 1) * n].copy_from_slice(&out);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Continuous targets in canonical task order (see [`TASK_NAMES`]).
pub fn derive_targets(world: &World, loc: Location) -> Result<BTreeMap<&'static str, f64>> {
    let v = derive_target_vector(world, loc)?;
    Ok(TASK_NAMES.iter().copied().zip(v).collect())
}

/// Same as [`derive_targets`], as an array in [`TASK_NAMES`] order.
pub fn derive_target_vector(world: &World, loc: Location) -> Result<[f64; 5]> {
    world.check(loc)?;
    let i = world.index(loc);
    let d = world.development[i];
    let s = world.settlement[i];
    let mut rng = seed::stream(world.seed, "targets", &[loc.row as u64, loc.col as u64]);
    let mut e = [0.0f64; 5];
    for v in e.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let nightlights = 60.0 * d.powi(3) * (0.7 * e[0]).exp();
    let population = 800.0 * s.powf(1.5) * (0.25 * e[1]).exp();
    let road_distance = world.road_distance[i];
    let land_cover = (s + 0.1 * e[2]).clamp(0.0, 1.0);
    let awi = 2.0 * d - 1.0 + 0.08 * e[4];
    debug_assert_eq!(
        TASK_NAMES,
        [NIGHTLIGHTS, POPULATION, ROAD_DISTANCE, LAND_COVER, AWI]
    );
    Ok([nightlights, population, road_distance, land_cover, awi])
}

pub fn render_tile(
    world: &World,
    loc: Location,
    tile_size: usize,
    bands: usize,
) -> Result<MultispectralImage> {
    world.check(loc)?;
    if tile_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "tile size {tile_size} < 16"
        )));
    }
    if bands != 3 && bands != 9 {
        return Err(Error::BadChannelCount(format!(
            "{bands} bands (expected 3 or 9)"
        )));
    }
    let full = render_full(world, loc, tile_size);
    Ok(if bands == 9 {
        full
    } else {
        full.slice_bands(bands)
    })
}

fn render_full(world: &World, loc: Location, s: usize) -> MultispectralImage {
    let mut rng = seed::stream(
        world.seed,
        "tile",
        &[loc.row as u64, loc.col as u64, s as u64],
    );
    let sf = s as f64;

    // low-resolution texture upsampled over the tile
    const TEX: usize = 5;
    let tex_grid: Vec<f64> = (0..TEX * TEX).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let texture = |y: f64, x: f64| {
        let gy = (y * (TEX - 1) as f64).clamp(0.0, (TEX - 1) as f64 - 1e-9);
        let gx = (x * (TEX - 1) as f64).clamp(0.0, (TEX - 1) as f64 - 1e-9);
        let (y0, x0) = (gy as usize, gx as usize);
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |r: usize, c: usize| tex_grid[r * TEX + c];
        (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx) * (1.0 - fy)
            + (at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx) * fy
    };

    let mut built = vec![0.0f64; s * s];
    let settle = world.settlement[world.index(loc)];
    let n_buildings = (settle * sf * sf / 40.0 * rng.gen_range(0.7..1.3)).round() as usize;
    let max_side = (s / 16).max(1);
    for _ in 0..n_buildings {
        let side = rng.gen_range(1..=max_side + 1);
        let (y0, x0) = (rng.gen_range(0..s), rng.gen_range(0..s));
        let brightness = rng.gen_range(0.3..0.7);
        for y in y0..(y0 + side).min(s) {
            for x in x0..(x0 + side).min(s) {
                built[y * s + x] = f64::max(built[y * s + x], brightness);
            }
        }
    }

    if world.road[world.index(loc)] {
        let n = world.size;
        let is_road = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && r < n as isize
                && c < n as isize
                && world.road[r as usize * n + c as usize]
        };
        let (r, c) = (loc.row as isize, loc.col as isize);
        let mut dir = (0.0f64, 0.0f64);
        for (dr, dc) in [
            (-1, 0),
            (1, 0),
            (0, -1),
            (0, 1),
            (-1, -1),
            (1, 1),
            (-1, 1),
            (1, -1),
        ] {
            if is_road(r + dr, c + dc) {
                // fold opposite directions together
                let (a, b) = if dr < 0 || (dr == 0 && dc < 0) {
                    (-dr, -dc)
                } else {
                    (dr, dc)
                };
                dir.0 += a as f64;
                dir.1 += b as f64;
            }
        }
        let angle = if dir == (0.0, 0.0) {
            rng.gen_range(0.0..std::f64::consts::PI)
        } else {
            dir.0.atan2(dir.1)
        };
        let (sin, cos) = angle.sin_cos();
        let half_width = (sf / 32.0).max(1.0);
        for y in 0..s {
            for x in 0..s {
                let (py, px) = (y as f64 + 0.5 - sf / 2.0, x as f64 + 0.5 - sf / 2.0);
                if (px * sin - py * cos).abs() <= half_width {
                    built[y * s + x] = f64::max(built[y * s + x], 0.8);
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(s * s * 9);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((y as f64 + 0.5) / sf, (x as f64 + 0.5) / sf);
            let gy = loc.row as f64 + u - 0.5;
            let gx = loc.col as f64 + v - 0.5;
            let dev = world.sample(&world.development, gy, gx);
            let tex = texture(u, v);
            let b = (0.6 * dev + 0.5 * built[y * s + x]).clamp(0.0, 1.0);
            let veg = ((1.0 - dev) * (0.75 + 0.25 * tex)).clamp(0.0, 1.0);
            let blue = 0.10 + 0.30 * b + 0.04 * tex;
            let green = 0.15 + 0.25 * b + 0.12 * veg;
            let red = 0.10 + 0.45 * b + 0.02 * veg;
            let nir = 0.20 + 0.55 * veg + 0.05 * b;
            let swir1 = 0.25 + 0.30 * b + 0.10 * (1.0 - veg);
            let swir2 = 0.20 + 0.35 * b;
            let th1 = 0.35 + 0.30 * dev + 0.10 * b;
            let th2 = th1 + 0.03 + 0.02 * tex;
            let pan = (blue + green + red) / 3.0 + 0.05 * tex;
            for refl in [blue, green, red, nir, swir1, swir2, th1, th2, pan] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let val = (2.0 * (refl + 0.03 * noise) - 1.0).clamp(-1.0, 1.0);
                pixels.push(val as f32);
            }
        }
    }
    MultispectralImage {
        height: s,
        width: s,
        channels: 9,
        pixels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Uniform,
    AroundLabels,
}

impl Sampling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sampling::Uniform => "uniform",
            Sampling::AroundLabels => "around-labels",
        }
    }
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampling::Uniform),
            "around-labels" => Ok(Sampling::AroundLabels),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling `{other}`"
            ))),
        }
    }
}

/// Draws `n` label sites uniformly over the grid.
pub fn pick_label_sites(world: &World, n: usize, rng_seed: u64) -> Vec<Location> {
    let mut rng = seed::stream(rng_seed, "label-sites", &[]);
    (0..n)
        .map(|_| Location::new(rng.gen_range(0..world.size), rng.gen_range(0..world.size)))
        .collect()
}

pub fn sample_locations(
    world: &World,
    n: usize,
    strategy: Sampling,
    label_sites: &[Location],
    radius: f64,
    rng_seed: u64,
) -> Result<Vec<Location>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one location".into()));
    }
    let mut rng = seed::stream(rng_seed, "sample-locations", &[]);
    match strategy {
        Sampling::Uniform => Ok((0..n)
            .map(|_| Location::new(rng.gen_range(0..world.size), rng.gen_range(0..world.size)))
            .collect()),
        Sampling::AroundLabels => {
            if label_sites.is_empty() {
                return Err(Error::EmptyLabelSites);
            }
            if !(radius >= 0.0) {
                return Err(Error::InvalidArgument(format!("radius {radius}")));
            }
            for s in label_sites {
                world.check(*s)?;
            }
            let reach = radius.floor() as isize;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let site = label_sites[rng.gen_range(0..label_sites.len())];
                let mut chosen = site;
                for _ in 0..64 {
                    let dr = rng.gen_range(-reach..=reach);
                    let dc = rng.gen_range(-reach..=reach);
                    let (r, c) = (site.row as isize + dr, site.col as isize + dc);
                    if r < 0 || c < 0 || r >= world.size as isize || c >= world.size as isize {
                        continue;
                    }
                    if ((dr * dr + dc * dc) as f64).sqrt() <= radius {
                        chosen = Location::new(r as usize, c as usize);
                        break;
                    }
                }
                out.push(chosen);
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::CorruptHeader(format!("unknown split `{other}`"))),
        }
    }
}

/// Assigns each location to a split (or drops it, `None`) so that no
/// validation or test location lies within `min_separation` of a training
/// location, with split sizes near `fractions`.
///
/// Identical locations always land in the same split. For separations above
/// one cell, whole spatial blocks are assigned together, val/test locations
/// inside the buffer around training blocks are dropped, and the splits are
/// then trimmed back to the requested proportions.
pub fn make_splits(
    locations: &[Location],
    fractions: [f64; 3],
    min_separation: f64,
    rng_seed: u64,
) -> Result<Vec<Option<Split>>> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    if locations.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = seed::stream(rng_seed, "splits", &[]);
    let block = if min_separation <= 1.0 {
        1
    } else {
        (4.0 * min_separation).ceil() as usize
    };

    let mut units: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, l) in locations.iter().enumerate() {
        units
            .entry((l.row / block, l.col / block))
            .or_default()
            .push(i);
    }
    let mut order: Vec<Vec<usize>> = units.into_values().collect();
    order.shuffle(&mut rng);

    let total = locations.len() as f64;
    let mut assigned = [0usize; 3];
    let mut out: Vec<Option<Split>> = vec![None; locations.len()];
    for members in &order {
        let split = Split::ALL
            .into_iter()
            .max_by(|a, b| {
                let da = fractions[a.index()] * total - assigned[a.index()] as f64;
                let db = fractions[b.index()] * total - assigned[b.index()] as f64;
                da.total_cmp(&db).then(b.index().cmp(&a.index()))
            })
            .expect("three splits");
        assigned[split.index()] += members.len();
        for &i in members {
            out[i] = Some(split);
        }
    }

    if min_separation > 1.0 {
        enforce_separation(locations, &mut out, min_separation);
        trim_to_fractions(&mut out, fractions, &mut rng, min_separation)?;
    }
    for (s, f) in Split::ALL.iter().zip(fractions) {
        if f > 0.0 && !out.contains(&Some(*s)) {
            return Err(Error::InfeasibleSeparation(min_separation));
        }
    }
    Ok(out)
}

fn enforce_separation(locations: &[Location], out: &mut [Option<Split>], min_sep: f64) {
    let cell = min_sep.ceil().max(1.0) as usize;
    let mut grid: BTreeMap<(usize, usize), Vec<Location>> = BTreeMap::new();
    for (l, s) in locations.iter().zip(out.iter()) {
        if *s == Some(Split::Train) {
            grid.entry((l.row / cell, l.col / cell))
                .or_default()
                .push(*l);
        }
    }
    for (l, s) in locations.iter().zip(out.iter_mut()) {
        if matches!(s, Some(Split::Val) | Some(Split::Test)) {
            let (br, bc) = (l.row / cell, l.col / cell);
            let near = (br.saturating_sub(1)..=br + 1).any(|r| {
                (bc.saturating_sub(1)..=bc + 1).any(|c| {
                    grid.get(&(r, c))
                        .is_some_and(|pts| pts.iter().any(|p| p.distance(l) < min_sep))
                })
            });
            if near {
                *s = None;
            }
        }
    }
}

fn trim_to_fractions(
    out: &mut [Option<Split>],
    fractions: [f64; 3],
    rng: &mut seed::Rng,
    min_sep: f64,
) -> Result<()> {
    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, s) in out.iter().enumerate() {
        if let Some(s) = s {
            members[s.index()].push(i);
        }
    }
    let total = Split::ALL
        .iter()
        .filter(|s| fractions[s.index()] > 0.0)
        .map(|s| members[s.index()].len() as f64 / fractions[s.index()])
        .fold(f64::INFINITY, f64::min);
    if !total.is_finite() || total < 1.0 {
        return Err(Error::InfeasibleSeparation(min_sep));
    }
    for s in Split::ALL {
        let keep = (fractions[s.index()] * total).round() as usize;
        let m = &mut members[s.index()];
        if m.len() > keep {
            m.shuffle(rng);
            for &i in &m[keep..] {
                out[i] = None;
            }
        }
    }
    Ok(())
}

/// Chooses which examples carry a label for one task: `floor(N * coverage)`
/// in total, with validation and test receiving their own
/// `floor(N_split * coverage)` share and training the remainder.
pub fn select_labeled(
    splits: &[Split],
    coverage: f64,
    rng_seed: u64,
    task: &str,
) -> Result<Vec<bool>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label coverage {coverage} outside (0, 1]"
        )));
    }
    let mut rng = seed::stream(rng_seed, "labels", &[seed::tag(task)]);
    let total = (splits.len() as f64 * coverage).floor() as usize;
    let mut by_split: [Vec<usize>; 3] = Default::default();
    for (i, s) in splits.iter().enumerate() {
        by_split[s.index()].push(i);
    }
    let val = (by_split[1].len() as f64 * coverage).floor() as usize;
    let test = (by_split[2].len() as f64 * coverage).floor() as usize;
    let train = total.saturating_sub(val + test).min(by_split[0].len());
    let mut mask = vec![false; splits.len()];
    for (idx, take) in by_split.iter_mut().zip([train, val, test]) {
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(take) {
            mask[i] = true;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    #[test]
    fn world_is_deterministic_and_seed_sensitive() {
        let a = generate_world(32, 1).unwrap();
        let b = generate_world(32, 1).unwrap();
        let c = generate_world(32, 2).unwrap();
        assert_eq!(a, b);
        let differing = a
            .development
            .iter()
            .zip(&c.development)
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing as f64 >= 0.01 * a.development.len() as f64);
        assert_eq!(generate_world(8, 3).unwrap().development.len(), 64);
        assert!(generate_world(7, 3).is_err());
    }

    #[test]
    fn layers_stay_in_range() {
        let w = generate_world(40, 5).unwrap();
        assert!(w.development.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(w.settlement.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(w.road.iter().any(|&r| r));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let w = generate_world(24, 9).unwrap();
        let roads: Vec<Location> = w.cells().filter(|l| w.road[w.index(*l)]).collect();
        for l in w.cells() {
            let brute = roads
                .iter()
                .map(|r| r.distance(&l))
                .fold(f64::INFINITY, f64::min);
            assert!((brute - w.road_distance[w.index(l)]).abs() < 1e-9);
        }
    }

    #[test]
    fn on_road_distance_is_zero() {
        let w = generate_world(32, 4).unwrap();
        let on = w.cells().find(|l| w.road[w.index(*l)]).unwrap();
        assert_eq!(derive_targets(&w, on).unwrap()[ROAD_DISTANCE], 0.0);
    }

    #[test]
    fn targets_out_of_grid() {
        let w = generate_world(16, 4).unwrap();
        assert!(matches!(
            derive_targets(&w, Location::new(16, 0)),
            Err(Error::OutOfGrid { .. })
        ));
        assert!(matches!(
            render_tile(&w, Location::new(0, 99), 16, 9),
            Err(Error::OutOfGrid { .. })
        ));
    }

    #[test]
    fn nightlights_track_development_and_awi() {
        let w = generate_world(100, 11).unwrap();
        let (mut d, mut nl, mut awi) = (vec![], vec![], vec![]);
        for l in w.cells() {
            let t = derive_target_vector(&w, l).unwrap();
            d.push(w.development_at(l));
            nl.push(t[0]);
            awi.push(t[4]);
        }
        let rank_corr = pearson(&ranks(&d), &ranks(&nl));
        assert!(rank_corr > 0.8, "rank correlation {rank_corr}");
        let r = pearson(&nl, &awi);
        assert!((0.4..=0.7).contains(&r), "nightlight/awi r = {r}");
        assert!(pearson(&d, &awi) > 0.9);
    }

    #[test]
    fn render_contract() {
        let w = generate_world(32, 3).unwrap();
        let l = Location::new(10, 12);
        let nine = render_tile(&w, l, 16, 9).unwrap();
        let three = render_tile(&w, l, 16, 3).unwrap();
        assert_eq!(three, nine.slice_bands(3));
        assert_eq!(nine, render_tile(&w, l, 16, 9).unwrap());
        assert!(nine.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(render_tile(&w, l, 8, 9).is_err());
        assert!(matches!(
            render_tile(&w, l, 16, 4),
            Err(Error::BadChannelCount(_))
        ));
    }

    #[test]
    fn rural_tiles_are_darker_than_median() {
        let w = generate_world(48, 21).unwrap();
        let mut means: Vec<(f64, f64)> = w
            .cells()
            .step_by(3)
            .map(|l| {
                let img = render_tile(&w, l, 16, 9).unwrap();
                (w.development_at(l), img.band_mean(NIGHTLIGHT_PROXY_BAND))
            })
            .collect();
        let mut sorted: Vec<f64> = means.iter().map(|m| m.1).collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        // the least developed cells (d == 0 after normalisation is the minimum)
        for (d, m) in means.iter().take(5) {
            assert!(*m < median, "d = {d}: mean {m} >= median {median}");
        }
    }

    #[test]
    fn around_labels_stays_within_radius() {
        let w = generate_world(64, 2).unwrap();
        let sites = pick_label_sites(&w, 10, 3);
        let locs = sample_locations(&w, 2000, Sampling::AroundLabels, &sites, 3.5, 8).unwrap();
        for l in &locs {
            let nearest = sites
                .iter()
                .map(|s| s.distance(l))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 3.5);
        }
        let zero = sample_locations(&w, 100, Sampling::AroundLabels, &sites, 0.0, 8).unwrap();
        assert!(zero.iter().all(|l| sites.contains(l)));
        assert!(matches!(
            sample_locations(&w, 5, Sampling::AroundLabels, &[], 2.0, 1),
            Err(Error::EmptyLabelSites)
        ));
    }

    #[test]
    fn uniform_quadrants_within_binomial_bound() {
        let w = generate_world(100, 1).unwrap();
        let locs = sample_locations(&w, 10_000, Sampling::Uniform, &[], 0.0, 5).unwrap();
        let mut q = [0usize; 4];
        for l in &locs {
            q[(l.row >= 50) as usize * 2 + (l.col >= 50) as usize] += 1;
        }
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for c in q {
            assert!((c as f64 - 2500.0).abs() <= 4.0 * sigma, "{q:?}");
        }
    }

    #[test]
    fn around_labels_is_closer_to_sites_than_uniform() {
        let w = generate_world(64, 6).unwrap();
        let sites = pick_label_sites(&w, 12, 4);
        let mean_dist = |locs: &[Location]| {
            locs.iter()
                .map(|l| {
                    sites
                        .iter()
                        .map(|s| s.distance(l))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / locs.len() as f64
        };
        let uni = sample_locations(&w, 1000, Sampling::Uniform, &sites, 3.0, 1).unwrap();
        let near = sample_locations(&w, 1000, Sampling::AroundLabels, &sites, 3.0, 1).unwrap();
        assert!(mean_dist(&near) < mean_dist(&uni));
    }

    #[test]
    fn plain_split_counts() {
        let locs: Vec<Location> = (0..91522)
            .map(|i| Location::new(i / 400, i % 400))
            .collect();
        let s = make_splits(&locs, [0.7, 0.2, 0.1], 0.0, 1).unwrap();
        let mut counts = [0usize; 3];
        for x in s.iter().flatten() {
            counts[x.index()] += 1;
        }
        for (c, expect) in counts.iter().zip([64065.0, 18304.0, 9153.0]) {
            assert!((*c as f64 - expect).abs() <= 0.02 * 91522.0, "{counts:?}");
        }
        assert_eq!(counts.iter().sum::<usize>(), 91522);
    }

    #[test]
    fn duplicate_locations_share_a_split() {
        let mut locs: Vec<Location> = (0..200).map(|i| Location::new(i % 20, i / 20)).collect();
        locs.extend(locs.clone());
        let s = make_splits(&locs, [0.7, 0.2, 0.1], 0.0, 3).unwrap();
        for i in 0..200 {
            assert_eq!(s[i], s[i + 200]);
        }
    }

    #[test]
    fn separated_splits_respect_buffer() {
        let w = generate_world(80, 2).unwrap();
        let locs = sample_locations(&w, 3000, Sampling::Uniform, &[], 0.0, 2).unwrap();
        let s = make_splits(&locs, [0.7, 0.2, 0.1], 2.5, 7).unwrap();
        let train: Vec<Location> = locs
            .iter()
            .zip(&s)
            .filter(|(_, x)| **x == Some(Split::Train))
            .map(|(l, _)| *l)
            .collect();
        let kept = s.iter().flatten().count() as f64;
        let mut counts = [0usize; 3];
        for x in s.iter().flatten() {
            counts[x.index()] += 1;
        }
        for (c, f) in counts.iter().zip([0.7, 0.2, 0.1]) {
            assert!((*c as f64 / kept - f).abs() <= 0.02, "{counts:?}");
        }
        for (l, x) in locs.iter().zip(&s) {
            if matches!(x, Some(Split::Val) | Some(Split::Test)) {
                let nearest = train
                    .iter()
                    .map(|t| t.distance(l))
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest >= 2.5);
            }
        }
    }

    #[test]
    fn infeasible_separation_detected() {
        let locs: Vec<Location> = (0..6).map(|i| Location::new(0, i)).collect();
        assert!(matches!(
            make_splits(&locs, [0.5, 0.25, 0.25], 50.0, 1),
            Err(Error::InfeasibleSeparation(_))
        ));
    }

    #[test]
    fn label_selection_counts() {
        let splits: Vec<Split> = (0..10_000)
            .map(|i| match i % 10 {
                0..=6 => Split::Train,
                7 | 8 => Split::Val,
                _ => Split::Test,
            })
            .collect();
        let mask = select_labeled(&splits, 0.05, 1, AWI).unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), 500);
        let full = select_labeled(&splits, 1.0, 1, AWI).unwrap();
        assert!(full.iter().all(|m| *m));
        assert!(select_labeled(&splits, 0.0, 1, AWI).is_err());
        let surveyed = 4839.0 / (4839.0 + 86683.0);
        assert!((surveyed - 0.0529f64).abs() < 1e-4);
    }
}
