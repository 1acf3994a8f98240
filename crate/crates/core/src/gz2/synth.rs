//! Procedural galaxy-like images, one family per class, for desk-scale runs.

use std::f32::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, LabeledSample, Raster, NUM_CLASSES};
use crate::error::{invalid, Error, Result};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "completely round smooth",
    "in-between smooth",
    "cigar-shaped smooth",
    "lenticular",
    "barred spiral",
    "unbarred spiral",
    "irregular",
];

/// Elliptical Gaussian in a rotated frame.
fn gauss(x: f32, y: f32, major: f32, minor: f32) -> f32 {
    (-(x * x) / (2.0 * major * major) - (y * y) / (2.0 * minor * minor)).exp()
}

/// Two logarithmic arms, one half-turn apart.
fn arms(r: f32, phi: f32, start: f32, winding: f32, width: f32, scale: f32) -> f32 {
    if r < 1e-3 {
        return 0.0;
    }
    let theta = (r / start).max(1e-3).ln() / winding;
    let mut d = (phi - theta).rem_euclid(PI);
    if d > FRAC_PI_2 {
        d -= PI;
    }
    let arc = d * r;
    let ramp = if r < start { (r / start).powi(2) } else { 1.0 };
    (-(arc * arc) / (2.0 * width * width)).exp() * (-r / (7.0 * scale)).exp() * ramp
}

/// Renders one `size × size` RGB image of the given class.
pub fn render_galaxy<R: Rng + ?Sized>(class: u8, size: usize, rng: &mut R) -> Result<Image> {
    if class as usize >= NUM_CLASSES {
        return Err(invalid!("class {class} out of range"));
    }
    if size < 8 {
        return Err(invalid!("synthetic images need at least 8 pixels per side"));
    }
    let u = size as f32 / 32.0;
    let centre = (size as f32 - 1.0) / 2.0;
    let cy = centre + rng.random_range(-1.5..=1.5) * u;
    let cx = centre + rng.random_range(-1.5..=1.5) * u;
    let (sin, cos) = rng.random_range(0.0..PI).sin_cos();
    let peak: f32 = rng.random_range(0.75..=1.0);
    let tint = [
        rng.random_range(0.85..=1.0f32),
        rng.random_range(0.85..=1.0f32),
        rng.random_range(0.85..=1.0f32),
    ];

    type Profile = Box<dyn Fn(f32, f32) -> f32>;
    let profile: Profile = match class {
        0 => {
            let s = rng.random_range(3.0..=4.5) * u;
            Box::new(move |x, y| gauss(x, y, s, s))
        }
        1 => {
            let s = rng.random_range(4.0..=5.5) * u;
            let q = rng.random_range(0.4..=0.55);
            Box::new(move |x, y| gauss(x, y, s, s * q))
        }
        2 => {
            let s = rng.random_range(5.0..=6.5) * u;
            let q = rng.random_range(0.15..=0.25);
            Box::new(move |x, y| gauss(x, y, s, s * q))
        }
        3 => {
            let s = rng.random_range(8.0..=10.0) * u;
            let t = rng.random_range(0.7..=1.0) * u;
            Box::new(move |x, y| (gauss(x, y, s, t) + 0.6 * gauss(x, y, 1.5 * u, 1.5 * u)).min(1.0))
        }
        4 | 5 => {
            let barred = class == 4;
            let winding = rng.random_range(0.28..=0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = if barred { 4.0 * u } else { 2.0 * u };
            Box::new(move |x, y| {
                let r = (x * x + y * y).sqrt();
                let phi = y.atan2(x);
                let mut v = 0.8 * arms(r, phi, start, winding, 1.0 * u, u);
                if barred {
                    v += 0.9 * gauss(x, y, 4.0 * u, 0.9 * u) + 0.5 * gauss(x, y, 1.5 * u, 1.5 * u);
                } else {
                    v += gauss(x, y, 1.8 * u, 1.8 * u);
                }
                v.min(1.0)
            })
        }
        _ => {
            let k = rng.random_range(3..=6);
            let blobs: Vec<(f32, f32, f32, f32)> = (0..k)
                .map(|_| {
                    let r = rng.random_range(0.0..=9.0) * u;
                    let a = rng.random_range(0.0..2.0 * PI);
                    (r * a.cos(), r * a.sin(), rng.random_range(1.0..=2.5) * u, rng.random_range(0.4..=1.0))
                })
                .collect();
            Box::new(move |x, y| {
                blobs
                    .iter()
                    .map(|&(bx, by, s, amp)| amp * gauss(x - bx, y - by, s, s))
                    .sum::<f32>()
                    .min(1.0)
            })
        }
    };

    let noise = Normal::new(0.0f32, 0.03).expect("valid normal");
    let mut img = Raster::filled(size, size, 3, 0.0f32);
    for py in 0..size {
        for px in 0..size {
            let (dx, dy) = (px as f32 - cx, py as f32 - cy);
            let x = cos * dx + sin * dy;
            let y = -sin * dx + cos * dy;
            let v = peak * profile(x, y);
            for (c, t) in tint.iter().enumerate() {
                img.set(py, px, c, (v * t + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// `n` images with labels cycling through the classes. Image `i` depends
/// only on `seed` and `i`.
pub fn synthetic_set(n: usize, size: usize, seed: u64) -> Result<Vec<(Image, u8)>> {
    (0..n)
        .map(|i| {
            let label = (i % NUM_CLASSES) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            Ok((render_galaxy(label, size, &mut rng)?, label))
        })
        .collect()
}

/// Writes `synth-NNNNN.png` files into `dir` and returns their labels.
pub fn write_synthetic_set(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(n);
    for (i, (img, label)) in synthetic_set(n, size, seed)?.into_iter().enumerate() {
        let id = format!("synth-{i:05}");
        let path = dir.join(format!("{id}.png"));
        let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = ::image::RgbImage::from_raw(size as u32, size as u32, bytes).expect("buffer matches dimensions");
        buf.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        out.push(LabeledSample { galaxy_id: id, label });
    }
    Ok(out)
}
