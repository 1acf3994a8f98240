use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::gz2::{Image, Raster};
use crate::scaling::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapConfig {
    /// Channels drawn per layer (fewer if the layer is narrower).
    pub channels: usize,
    pub columns: usize,
    pub seed: u64,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig {
            channels: 16,
            columns: 4,
            seed: 0,
        }
    }
}

/// Sampled channels of one layer tiled left to right, top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub layer: String,
    /// Sampled channel indices in tile order.
    pub channels: Vec<usize>,
    pub rows: usize,
    pub columns: usize,
    pub tile_height: usize,
    pub tile_width: usize,
    /// Single-channel values in [0, 1].
    pub image: Raster<f32>,
}

/// Min-max scaling to [0, 1]. A constant map becomes mid gray.
pub fn normalize_map(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Runs `image` through `net` and tiles a seeded sample of each named
/// layer's channels, each normalized on its own.
pub fn feature_maps(
    net: &Network<f32>,
    image: &Image,
    layers: &[String],
    cfg: &FeatureMapConfig,
) -> Result<Vec<FeatureGrid>> {
    if cfg.channels == 0 || cfg.columns == 0 {
        return Err(invalid!("feature map grid needs at least one channel and one column"));
    }
    if image.channels != 3 {
        return Err(invalid!("feature maps need an RGB image, got {} channels", image.channels));
    }
    let x = Tensor::new(vec![1, image.height, image.width, 3], image.data.clone())?;
    let acts = net.activations(&x, layers)?;
    acts.into_iter()
        .enumerate()
        .map(|(i, (layer, t))| {
            let &[_, h, w, c] = t.shape() else {
                return Err(invalid!("layer {layer} is not an image-shaped activation: {:?}", t.shape()));
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut channels = sample(&mut rng, c, cfg.channels.min(c)).into_vec();
            channels.sort_unstable();
            let columns = cfg.columns.min(channels.len());
            let rows = channels.len().div_ceil(columns);
            let mut grid = Raster::filled(rows * h, columns * w, 1, 0.0f32);
            for (n, &ch) in channels.iter().enumerate() {
                let map: Vec<f32> = t.data().iter().skip(ch).step_by(c).copied().collect();
                let (r0, c0) = ((n / columns) * h, (n % columns) * w);
                for (p, v) in normalize_map(&map).into_iter().enumerate() {
                    grid.set(r0 + p / w, c0 + p % w, 0, v);
                }
            }
            Ok(FeatureGrid {
                layer,
                channels,
                rows,
                columns,
                tile_height: h,
                tile_width: w,
                image: grid,
            })
        })
        .collect()
}

impl FeatureGrid {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let pixels = self.image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.image.width as u32, self.image.height as u32, pixels)
            .expect("buffer matches raster size");
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
