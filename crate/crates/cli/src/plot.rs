//! Minimal raster plots. Each function returns how many items it drew.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

use geowgan::dataset::Dataset;

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: f64 = 40.0;
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
const GREY: Rgb<u8> = Rgb([150, 150, 150]);

/// Maps data coordinates onto the plotting area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        Frame {
            x: padded(xs),
            y: padded(ys),
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W as f64 - 2.0 * MARGIN);
        let v = H as f64 - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H as f64 - 2.0 * MARGIN);
        (u, v)
    }
}

fn padded(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (l, b) = (MARGIN, H as f64 - MARGIN);
    line(&mut img, (l, b), (W as f64 - MARGIN, b), BLACK);
    line(&mut img, (l, b), (l, MARGIN), BLACK);
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

fn dot(img: &mut RgbImage, p: (f64, f64), c: Rgb<u8>) {
    let (x, y) = (p.0.round() as i64, p.1.round() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, c);
        }
    }
}

fn read_columns(path: &Path, wanted: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            header
                .iter()
                .position(|h| h == *w)
                .with_context(|| format!("{} has no `{w}` column", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(idx.iter().map(|&i| rec[i].to_string()).collect());
    }
    Ok(out)
}

/// Discriminator and generator total loss per epoch.
pub fn loss_curves(metrics: &Path, out: &Path) -> Result<usize> {
    let rows = read_columns(metrics, &["epoch", "ld_total", "lg_total"])?;
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for r in rows {
        let e: f64 = r[0].parse()?;
        if pts.last().is_some_and(|p| p.0 == e) {
            continue;
        }
        pts.push((e, r[1].parse()?, r[2].parse().unwrap_or(f64::NAN)));
    }
    if pts.is_empty() {
        bail!("{} has no rows", metrics.display());
    }
    let f = Frame::new(pts.iter().map(|p| p.0), pts.iter().flat_map(|p| [p.1, p.2]));
    let mut img = canvas();
    for (series, colour) in [(1, BLUE), (2, ORANGE)] {
        let ys: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| (p.0, if series == 1 { p.1 } else { p.2 }))
            .filter(|p| p.1.is_finite())
            .collect();
        for w in ys.windows(2) {
            line(&mut img, f.px(w[0].0, w[0].1), f.px(w[1].0, w[1].1), colour);
        }
        for p in &ys {
            dot(&mut img, f.px(p.0, p.1), colour);
        }
    }
    img.save(out)?;
    eprintln!("loss curves: {} epochs -> {}", pts.len(), out.display());
    Ok(pts.len())
}

/// Prediction against truth, with the least-squares line and the diagonal.
pub fn scatter(predictions: &Path, out: &Path) -> Result<usize> {
    let rows = read_columns(predictions, &["y_true", "y_pred"])?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| Ok((r[0].parse()?, r[1].parse()?)))
        .collect::<Result<_>>()?;
    if pts.is_empty() {
        bail!("{} has no rows", predictions.display());
    }
    let f = Frame::new(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1));
    let mut img = canvas();
    let (lo, hi) = (f.x.0, f.x.1);
    line(&mut img, f.px(lo, lo), f.px(hi, hi), GREY);
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    for p in &pts {
        dot(&mut img, f.px(p.0, p.1), BLUE);
    }
    if sxx > 0.0 {
        let slope = sxy / sxx;
        line(&mut img, f.px(lo, my + slope * (lo - mx)), f.px(hi, my + slope * (hi - mx)), ORANGE);
    }
    img.save(out)?;
    eprintln!("scatter: {} points -> {}", pts.len(), out.display());
    Ok(pts.len())
}

/// Labelled examples per class of one task.
pub fn histogram(data: &Dataset, task: &str, out: &Path) -> Result<usize> {
    let t = data.task_index(task).with_context(|| format!("dataset has no task `{task}`"))?;
    let k = data.tasks[t].classes();
    let mut counts = vec![0usize; k];
    for e in &data.examples {
        if let Some(c) = e.labels[t] {
            counts[c] += 1;
        }
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = canvas();
    let width = (W as f64 - 2.0 * MARGIN) / k as f64;
    for (i, &c) in counts.iter().enumerate() {
        let x0 = MARGIN + i as f64 * width + 1.0;
        let height = c as f64 / top * (H as f64 - 2.0 * MARGIN);
        for x in x0.round() as i64..(x0 + width - 2.0).round() as i64 {
            line(&mut img, (x as f64, H as f64 - MARGIN - 1.0), (x as f64, H as f64 - MARGIN - height), BLUE);
        }
    }
    img.save(out)?;
    eprintln!("histogram: {k} bins -> {}", out.display());
    Ok(k)
}
