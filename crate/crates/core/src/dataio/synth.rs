//! Synthetic paired-view studies with controlled cue placement.
//!
//! Each subject has two binary latents `a` and `b`. The MLO view encodes `a`
//! as the radius of a bright blob, the CC view encodes `b` as the angle of a
//! bar. Neither view alone determines the ternary label; both together do.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{write_pgm, ImageTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Binary,
    #[default]
    Ternary,
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::Binary => 2,
            LabelScheme::Ternary => 3,
        }
    }

    /// Label of a latent pair.
    pub fn label(self, a: u8, b: u8) -> usize {
        match (self, a, b) {
            (_, 0, _) => 0,
            (LabelScheme::Binary, _, _) => 1,
            (LabelScheme::Ternary, _, 0) => 1,
            (LabelScheme::Ternary, _, _) => 2,
        }
    }
}

/// Cue ranges. The blob radius and bar angle bins are disjoint so a
/// threshold recovers the latent exactly.
pub const SMALL_BLOB: (f64, f64) = (2.5, 4.0);
pub const LARGE_BLOB: (f64, f64) = (6.5, 9.0);
pub const FLAT_BAR: (f64, f64) = (-20.0, 20.0);
pub const STEEP_BAR: (f64, f64) = (70.0, 110.0);
pub const RADIUS_THRESHOLD: f64 = 5.25;
pub const ANGLE_THRESHOLD: f64 = 45.0;

/// Generative parameters of one subject; radii are in 64-pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub subject_id: String,
    pub label: usize,
    pub a: u8,
    pub b: u8,
    pub right_side: bool,
    pub blob_radius: f64,
    pub bar_angle: f64,
}

/// One manifest row; image paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub subject_id: String,
    pub mlo: String,
    pub cc: String,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub records: Vec<StudyRecord>,
    pub latents: Vec<Latent>,
}

/// Split `n` over `weights` by largest remainder; ties go to lower indices.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

pub fn subject_id(i: usize) -> String {
    format!("S{i:04}")
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draw the latents of `n` subjects with equal class proportions.
pub fn draw_latents(n: usize, scheme: LabelScheme, seed: u64) -> Vec<Latent> {
    let k = scheme.num_classes();
    let counts = largest_remainder(n, &vec![1.0; k]);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = subject_rng(seed, i);
            let (a, b) = match (scheme, label) {
                (_, 0) => (0, rng.random_range(0..2u8)),
                (LabelScheme::Binary, _) => (1, rng.random_range(0..2u8)),
                (LabelScheme::Ternary, 1) => (1, 0),
                _ => (1, 1),
            };
            let blob_radius = uniform(&mut rng, if a == 0 { SMALL_BLOB } else { LARGE_BLOB });
            let bar_angle = uniform(&mut rng, if b == 0 { FLAT_BAR } else { STEEP_BAR });
            Latent {
                subject_id: subject_id(i),
                label,
                a,
                b,
                right_side: rng.random::<bool>(),
                blob_radius,
                bar_angle,
            }
        })
        .collect()
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            px: vec![0.0; size * size],
        }
    }

    fn paint(&mut self, f: impl Fn(f64, f64) -> f64) {
        for r in 0..self.size {
            for c in 0..self.size {
                self.px[r * self.size + c] += f(r as f64, c as f64);
            }
        }
    }

    /// Breast silhouette against the left chest wall.
    fn tissue(&mut self) {
        let s = self.size as f64;
        let (rx, ry, cy) = (0.6 * s, 0.45 * s, 0.5 * s);
        self.paint(|y, x| {
            let d = (x / rx).powi(2) + ((y - cy) / ry).powi(2);
            0.3 / (1.0 + ((d - 1.0) * 12.0).exp())
        });
    }

    fn blob(&mut self, cy: f64, cx: f64, radius: f64, amp: f64) {
        self.paint(|y, x| amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius)).exp());
    }

    fn bar(&mut self, cy: f64, cx: f64, angle_deg: f64, length: f64, width: f64, amp: f64) {
        let (s, c) = (angle_deg * PI / 180.0).sin_cos();
        self.paint(|y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let along = dx * c - dy * s;
            let across = dx * s + dy * c;
            let end = ((along.abs() - length / 2.0).max(0.0) / width).powi(2);
            amp * (-(across / width).powi(2) - end).exp()
        });
    }

    fn finish(mut self, rng: &mut ChaCha8Rng, noise: f64, flip: bool) -> ImageTensor {
        let n = Normal::new(0.0, noise).expect("finite sigma");
        for v in &mut self.px {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
        let img = ImageTensor {
            height: self.size,
            width: self.size,
            data: self.px.iter().map(|&v| v as f32).collect(),
        };
        if flip {
            img.flip_horizontal()
        } else {
            img
        }
    }
}

fn nuisance(canvas: &mut Canvas, rng: &mut ChaCha8Rng, k: f64) {
    let s = canvas.size as f64;
    for _ in 0..rng.random_range(1..=3) {
        let cy = uniform(rng, (0.25 * s, 0.75 * s));
        let cx = uniform(rng, (0.05 * s, 0.4 * s));
        let r = uniform(rng, (1.5, 3.0)) * k;
        canvas.blob(cy, cx, r, 0.12);
    }
}

/// Render both views of a subject at `size × size`.
pub fn render(lat: &Latent, size: usize, seed: u64, index: usize) -> (ImageTensor, ImageTensor) {
    let mut rng = subject_rng(seed ^ 0x5EED_1A7E, index);
    let s = size as f64;
    let k = s / 64.0;

    let mut mlo = Canvas::new(size);
    mlo.tissue();
    nuisance(&mut mlo, &mut rng, k);
    let (cy, cx) = (uniform(&mut rng, (0.35 * s, 0.65 * s)), uniform(&mut rng, (0.15 * s, 0.3 * s)));
    mlo.blob(cy, cx, lat.blob_radius * k, 0.6);
    let mlo = mlo.finish(&mut rng, 0.03, lat.right_side);

    let mut cc = Canvas::new(size);
    cc.tissue();
    nuisance(&mut cc, &mut rng, k);
    let (cy, cx) = (uniform(&mut rng, (0.4 * s, 0.6 * s)), uniform(&mut rng, (0.2 * s, 0.3 * s)));
    cc.bar(cy, cx, lat.bar_angle, 0.3 * s, 1.3 * k, 0.6);
    let cc = cc.finish(&mut rng, 0.03, lat.right_side);
    (mlo, cc)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Write `n` subjects under `out`: `images/<id>_{mlo,cc}.pgm`,
/// `manifest.csv` and `latents.csv`.
pub fn synth_generate(n: usize, scheme: LabelScheme, size: usize, seed: u64, out: &Path) -> Result<SynthOutput> {
    let k = scheme.num_classes();
    if n < 10 * k || size < 8 {
        return Err(Error::Config(format!(
            "need at least 10 subjects per class and size ≥ 8, got n={n} size={size}"
        )));
    }
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let latents = draw_latents(n, scheme, seed);
    let mut records = Vec::with_capacity(n);
    for (i, lat) in latents.iter().enumerate() {
        let (mlo, cc) = render(lat, size, seed, i);
        let rel_mlo = format!("images/{}_mlo.pgm", lat.subject_id);
        let rel_cc = format!("images/{}_cc.pgm", lat.subject_id);
        write_pgm(&out.join(&rel_mlo), size, size, &mlo.to_u8())?;
        write_pgm(&out.join(&rel_cc), size, size, &cc.to_u8())?;
        records.push(StudyRecord {
            subject_id: lat.subject_id.clone(),
            mlo: rel_mlo,
            cc: rel_cc,
            label: lat.label,
        });
    }
    let manifest = out.join("manifest.csv");
    write_rows(&manifest, &records)?;
    write_rows(&out.join("latents.csv"), &latents)?;
    Ok(SynthOutput {
        manifest,
        records,
        latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_counts() {
        assert_eq!(largest_remainder(100, &[1.0; 3]), vec![34, 33, 33]);
        assert_eq!(largest_remainder(20, &[34.0, 33.0, 33.0]), vec![7, 7, 6]);
        assert_eq!(largest_remainder(7, &[1.0, 3.0]), vec![2, 5]);
    }

    #[test]
    fn class_counts_are_exact() {
        for n in [1, 2, 10, 11, 600] {
            let lat = draw_latents(n, LabelScheme::Ternary, 3);
            let mut c = [0; 3];
            for l in &lat {
                c[l.label] += 1;
                assert_eq!(LabelScheme::Ternary.label(l.a, l.b), l.label);
            }
            assert_eq!(c.to_vec(), largest_remainder(n, &[1.0; 3]));
        }
    }

    #[test]
    fn cue_ranges_separate_latents() {
        for l in draw_latents(300, LabelScheme::Binary, 9) {
            assert_eq!(l.blob_radius > RADIUS_THRESHOLD, l.a == 1);
            assert_eq!(l.bar_angle > ANGLE_THRESHOLD, l.b == 1);
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let lat = &draw_latents(4, LabelScheme::Ternary, 1)[2];
        let (a, b) = render(lat, 32, 1, 2);
        assert_eq!((a.clone(), b.clone()), render(lat, 32, 1, 2));
        assert!(a.data.iter().chain(&b.data).all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, b);
    }
}
