//! Raster handling: decoding, crop, rescale, resize and augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Resolutions the network family is trained at.
pub const STANDARD_SIZES: [usize; 2] = [224, 256];

/// Row-major `height × width × channels` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<P>,
}

pub type ByteImage = Raster<u8>;
/// Float pixels, normally in [0, 1].
pub type Image = Raster<f32>;

impl<P: Copy> Raster<P> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<P>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid!("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(invalid!("{height}x{width}x{channels} image needs {} values, got {}", height * width * channels, data.len()));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: P) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> P {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: P) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

pub fn load_image(path: &Path) -> Result<ByteImage> {
    let img = ::image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Raster::new(h as usize, w as usize, 3, rgb.into_raw())
}

/// Keeps the central half of each dimension: the middle 2×2 cells of a 4×4
/// grid. A 424×424 input keeps rows and columns [106, 318).
pub fn central_crop<P: Copy>(img: &Raster<P>) -> Result<Raster<P>> {
    if !img.height.is_multiple_of(2) || !img.width.is_multiple_of(2) {
        return Err(invalid!("central crop needs even dimensions, got {}x{}", img.height, img.width));
    }
    let (h, w) = (img.height / 2, img.width / 2);
    let (top, left) = (img.height / 4, img.width / 4);
    let c = img.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let start = (y * img.width + left) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    Raster::new(h, w, c, data)
}

pub fn rescale(img: &ByteImage) -> Image {
    Raster {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&b| b as f32 / 255.0).collect(),
    }
}

/// Bilinear sample at continuous pixel coordinates, `fill` outside.
fn sample_bilinear(img: &Image, y: f32, x: f32, c: usize, fill: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (dy, dx) = (y - y0, x - x0);
    let px = |yy: f32, xx: f32| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= img.height as f32 || xx >= img.width as f32 {
            fill
        } else {
            img.at(yy as usize, xx as usize, c)
        }
    };
    let top = px(y0, x0) * (1.0 - dx) + px(y0, x0 + 1.0) * dx;
    let bottom = px(y0 + 1.0, x0) * (1.0 - dx) + px(y0 + 1.0, x0 + 1.0) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f32 / height as f32;
    let sx = img.width as f32 / width as f32;
    let max_y = (img.height - 1) as f32;
    let max_x = (img.width - 1) as f32;
    let mut out = Raster::filled(height, width, img.channels, 0.0f32);
    for y in 0..height {
        let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..width {
            let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            for c in 0..img.channels {
                // Clamped coordinates never leave the image, so the fill is unused.
                out.set(y, x, c, sample_bilinear(img, src_y, src_x, c, 0.0));
            }
        }
    }
    Ok(out)
}

/// Divides by 255 and resizes to a square `target`. Sizes other than 224 and
/// 256 need `allow_any_size`.
pub fn rescale_and_resize(img: &ByteImage, target: usize, allow_any_size: bool) -> Result<Image> {
    if !allow_any_size && !STANDARD_SIZES.contains(&target) {
        return Err(invalid!("target size {target} is not one of {STANDARD_SIZES:?}"));
    }
    resize_bilinear(&rescale(img), target, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub crop: bool,
    pub target_size: usize,
    pub allow_any_size: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop: true,
            target_size: 224,
            allow_any_size: false,
        }
    }
}

impl PreprocessConfig {
    /// No crop, arbitrary size.
    pub fn plain(target_size: usize) -> Self {
        PreprocessConfig {
            crop: false,
            target_size,
            allow_any_size: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        if !self.allow_any_size && !STANDARD_SIZES.contains(&self.target_size) {
            return Err(Error::Config(format!(
                "target_size {} is not one of {STANDARD_SIZES:?} (set allow_any_size to override)",
                self.target_size
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &ByteImage) -> Result<Image> {
        if self.crop {
            rescale_and_resize(&central_crop(img)?, self.target_size, self.allow_any_size)
        } else {
            rescale_and_resize(img, self.target_size, self.allow_any_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotation_range_deg: [f32; 2],
    pub shift_fraction: f32,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub brightness_range: [f32; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_range_deg: [0.0, 90.0],
            shift_fraction: 0.1,
            horizontal_flip: true,
            vertical_flip: true,
            brightness_range: [0.9, 1.2],
        }
    }
}

impl AugmentationConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        AugmentationConfig {
            rotation_range_deg: [0.0, 0.0],
            shift_fraction: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            brightness_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.rotation_range_deg;
        let [b0, b1] = self.brightness_range;
        if !(r0.is_finite() && r1.is_finite() && r0 <= r1) {
            return Err(Error::Config(format!("rotation range [{r0}, {r1}] is not ordered")));
        }
        if !(b0.is_finite() && b1.is_finite() && 0.0 <= b0 && b0 <= b1) {
            return Err(Error::Config(format!("brightness range [{b0}, {b1}] is not ordered and nonnegative")));
        }
        if !(0.0..1.0).contains(&self.shift_fraction) {
            return Err(Error::Config(format!("shift fraction {} must be in [0, 1)", self.shift_fraction)));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn rotate(img: &Image, degrees: f32) -> Image {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let mut out = Raster::filled(img.height, img.width, img.channels, 0.0f32);
    for y in 0..img.height {
        let dy = y as f32 - cy;
        for x in 0..img.width {
            let dx = x as f32 - cx;
            // Inverse map: where in the source does this output pixel come from.
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            for c in 0..img.channels {
                out.set(y, x, c, sample_bilinear(img, sy, sx, c, 0.0));
            }
        }
    }
    out
}

fn shift(img: &Image, dy: isize, dx: isize) -> Image {
    let mut out = Raster::filled(img.height, img.width, img.channels, 0.0f32);
    for y in 0..img.height {
        let sy = y as isize - dy;
        if sy < 0 || sy >= img.height as isize {
            continue;
        }
        for x in 0..img.width {
            let sx = x as isize - dx;
            if sx < 0 || sx >= img.width as isize {
                continue;
            }
            for c in 0..img.channels {
                out.set(y, x, c, img.at(sy as usize, sx as usize, c));
            }
        }
    }
    out
}

fn flip_horizontal(img: &mut Image) {
    let c = img.channels;
    for row in img.data.chunks_mut(img.width * c) {
        for x in 0..img.width / 2 {
            for k in 0..c {
                row.swap(x * c + k, (img.width - 1 - x) * c + k);
            }
        }
    }
}

fn flip_vertical(img: &mut Image) {
    let stride = img.width * img.channels;
    for y in 0..img.height / 2 {
        let (a, b) = img.data.split_at_mut((img.height - 1 - y) * stride);
        a[y * stride..(y + 1) * stride].swap_with_slice(&mut b[..stride]);
    }
}

/// Rotate, shift, flip, then scale brightness and clamp to [0, 1].
/// Random draws happen in a fixed order whatever is enabled.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let angle = uniform(rng, cfg.rotation_range_deg[0], cfg.rotation_range_deg[1]);
    let max_dy = (cfg.shift_fraction * img.height as f32).floor() as i64;
    let max_dx = (cfg.shift_fraction * img.width as f32).floor() as i64;
    let dy = rng.random_range(-max_dy..=max_dy) as isize;
    let dx = rng.random_range(-max_dx..=max_dx) as isize;
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let brightness = uniform(rng, cfg.brightness_range[0], cfg.brightness_range[1]);

    let mut out = if angle != 0.0 { rotate(img, angle) } else { img.clone() };
    if dy != 0 || dx != 0 {
        out = shift(&out, dy, dx);
    }
    if cfg.horizontal_flip && hflip {
        flip_horizontal(&mut out);
    }
    if cfg.vertical_flip && vflip {
        flip_vertical(&mut out);
    }
    if brightness != 1.0 {
        for v in &mut out.data {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        Raster::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn crop_geometry_424() {
        let data: Vec<u16> = (0..424 * 424).map(|i| i as u16 % 60000).collect();
        let mut img = Raster::new(424, 424, 1, data).unwrap();
        img.set(106, 106, 0, 60001);
        img.set(317, 317, 0, 60002);
        img.set(105, 105, 0, 60003);
        let c = central_crop(&img).unwrap();
        assert_eq!((c.height, c.width), (212, 212));
        assert_eq!(c.at(0, 0, 0), 60001);
        assert_eq!(c.at(211, 211, 0), 60002);
        assert!(!c.data.contains(&60003));
    }

    #[test]
    fn crop_quadrant_markers() {
        // Each 1×1 cell of a 4×4 grid carries its own index.
        let img = Raster::new(4, 4, 1, (0u8..16).collect()).unwrap();
        let c = central_crop(&img).unwrap();
        assert_eq!(c.data, vec![5, 6, 9, 10]);
        let constant = Raster::filled(8, 6, 3, 7u8);
        assert!(central_crop(&constant).unwrap().data.iter().all(|&v| v == 7));
        assert!(central_crop(&Raster::filled(5, 4, 1, 0u8)).is_err());
    }

    #[test]
    fn rescale_extremes() {
        let img = Raster::new(1, 2, 1, vec![0u8, 255]).unwrap();
        assert_eq!(rescale(&img).data, vec![0.0, 1.0]);
    }

    #[test]
    fn resize_constant_and_checkerboard() {
        let c = Raster::filled(212, 212, 3, 0.25f32);
        let r = resize_bilinear(&c, 224, 224).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let board = Raster::new(2, 2, 1, vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let up3 = resize_bilinear(&board, 3, 3).unwrap();
        assert!((up3.at(1, 1, 0) - 0.5).abs() < 1e-6);
        // Output (1, 1) of a 4×4 upsample samples source (0.25, 0.25).
        let up4 = resize_bilinear(&board, 4, 4).unwrap();
        let expected = 0.75 * 0.25 + 0.25 * 0.75;
        assert!((up4.at(1, 1, 0) - expected).abs() < 1e-6);
        assert_eq!(up4.at(0, 0, 0), 0.0);
    }

    #[test]
    fn target_size_gate() {
        let img = Raster::filled(4, 4, 3, 128u8);
        assert!(rescale_and_resize(&img, 100, false).is_err());
        assert_eq!(rescale_and_resize(&img, 8, true).unwrap().height, 8);
        assert_eq!(rescale_and_resize(&img, 224, false).unwrap().width, 224);
        assert!(PreprocessConfig { target_size: 32, ..Default::default() }.validate().is_err());
        assert!(PreprocessConfig::plain(32).validate().is_ok());
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let img = ramp(9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentationConfig::identity(), &mut rng), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 6);
        let mut a = img.clone();
        flip_horizontal(&mut a);
        assert_ne!(a, img);
        flip_horizontal(&mut a);
        assert_eq!(a, img);
        flip_vertical(&mut a);
        assert_eq!(a.at(0, 2, 1), img.at(4, 2, 1));
        flip_vertical(&mut a);
        assert_eq!(a, img);
    }

    #[test]
    fn brightness_clamps() {
        let img = Raster::filled(4, 4, 3, 0.9f32);
        let cfg = AugmentationConfig {
            brightness_range: [1.2, 1.2],
            ..AugmentationConfig::identity()
        };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rotation_by_right_angle_moves_pixels() {
        let mut img = Raster::filled(5, 5, 1, 0.0f32);
        img.set(0, 2, 0, 1.0);
        let r = rotate(&img, 90.0);
        let (y, x) = (0..25).map(|i| (i / 5, i % 5)).find(|&(y, x)| r.at(y, x, 0) > 0.99).unwrap();
        assert!((y, x) == (2, 0) || (y, x) == (2, 4));
        assert!((r.data.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn seeded_augmentation_reproducible_and_bounded() {
        let img = ramp(16, 16);
        let cfg = AugmentationConfig::default();
        for seed in 0..20 {
            let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(AugmentationConfig { rotation_range_deg: [10.0, 0.0], ..Default::default() }.validate().is_err());
    }
}
