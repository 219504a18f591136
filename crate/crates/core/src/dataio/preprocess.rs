use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;

/// Mirror the image so the heavier half sits on the left. Ties keep the
/// input; for odd widths the centre column counts for neither side.
pub fn orient_normalize(img: &ImageTensor) -> ImageTensor {
    let half = img.width / 2;
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for r in 0..img.height {
        let row = &img.data[r * img.width..(r + 1) * img.width];
        left += row[..half].iter().map(|&v| v as f64).sum::<f64>();
        right += row[img.width - half..].iter().map(|&v| v as f64).sum::<f64>();
    }
    if right > left {
        img.flip_horizontal()
    } else {
        img.clone()
    }
}

/// Sampled augmentation; translation is a fraction of the image side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub vflip: bool,
    pub angle_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

pub const MAX_ANGLE_DEG: f64 = 10.0;
pub const MAX_SHIFT: f64 = 0.05;
pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        vflip: false,
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let vflip = u(0.0, 1.0) < 0.5;
        AugmentParams {
            vflip,
            angle_deg: u(-MAX_ANGLE_DEG, MAX_ANGLE_DEG),
            tx: u(-MAX_SHIFT, MAX_SHIFT),
            ty: u(-MAX_SHIFT, MAX_SHIFT),
            scale: u(SCALE_RANGE.0, SCALE_RANGE.1),
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.tx == 0.0 && self.ty == 0.0 && self.scale == 1.0
    }
}

/// Vertical flip, then rotate/scale about the centre and translate.
pub fn apply_augment(img: &ImageTensor, p: &AugmentParams) -> ImageTensor {
    let src = if p.vflip { img.flip_vertical() } else { img.clone() };
    if p.is_affine_identity() {
        return src;
    }
    let (h, w) = (img.height as f64, img.width as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    let mut out = ImageTensor::zeros(img.height, img.width);
    for r in 0..img.height {
        for col in 0..img.width {
            // inverse map: output -> source
            let v = r as f64 - cy - p.ty * h;
            let u = col as f64 - cx - p.tx * w;
            let xs = (c * u + s * v) / p.scale + cx;
            let ys = (-s * u + c * v) / p.scale + cy;
            out.data[r * img.width + col] = src.sample(ys, xs);
        }
    }
    out
}

pub fn augment(img: &ImageTensor, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augment(img, &AugmentParams::sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor {
            height: h,
            width: w,
            data: (0..h * w).map(|_| rng.random::<f32>()).collect(),
        }
    }

    #[test]
    fn orientation_rules() {
        let mut img = ImageTensor::zeros(2, 5);
        img.data[0] = 1.0;
        assert_eq!(orient_normalize(&img), img);
        assert_eq!(orient_normalize(&img.flip_horizontal()), img);
        let mut tie = ImageTensor::zeros(1, 4);
        tie.data = vec![0.5, 0.0, 0.25, 0.25];
        assert_eq!(orient_normalize(&tie), tie);
        for seed in 0..20 {
            let x = random(7, 9, seed);
            let once = orient_normalize(&x);
            assert_eq!(orient_normalize(&once), once);
        }
    }

    #[test]
    fn identity_and_double_flip() {
        let x = random(8, 8, 1);
        assert_eq!(apply_augment(&x, &AugmentParams::IDENTITY), x);
        let flip = AugmentParams {
            vflip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(apply_augment(&apply_augment(&x, &flip), &flip), x);
    }

    #[test]
    fn small_affine_keeps_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..100 {
            let x = random(32, 32, 1000 + seed);
            let full = AugmentParams::sample(&mut rng);
            let half = AugmentParams {
                angle_deg: full.angle_deg / 2.0,
                tx: full.tx / 2.0,
                ty: full.ty / 2.0,
                scale: 1.0 + (full.scale - 1.0) / 2.0,
                ..full
            };
            let y = apply_augment(&x, &half);
            let (a, b) = (x.mean(), y.mean());
            assert!((a - b).abs() <= 0.1 * a, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn sampled_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut flips = 0;
        for _ in 0..1000 {
            let p = AugmentParams::sample(&mut rng);
            assert!(p.angle_deg.abs() <= MAX_ANGLE_DEG);
            assert!(p.tx.abs() <= MAX_SHIFT && p.ty.abs() <= MAX_SHIFT);
            assert!((SCALE_RANGE.0..=SCALE_RANGE.1).contains(&p.scale));
            flips += p.vflip as usize;
        }
        assert!((400..600).contains(&flips));
    }
}
