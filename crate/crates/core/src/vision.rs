//! Frozen toy vision transformer and multi-granularity `[cls]` features.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::{EivenError, Result};
use crate::nn::{Init, Kind, Linear, Named, TransformerBlock};

/// Square RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(EivenError::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(ImageGrid { width, height, pixels })
    }

    pub fn filled(size: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(size * size * 3).collect();
        ImageGrid {
            width: size,
            height: size,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Splits an image into non-overlapping `patch x patch` tiles in row-major
/// tile order. Each row holds one tile's pixels (row-major, RGB interleaved)
/// scaled to `[0, 1]`.
pub fn patchify<T: Scalar>(img: &ImageGrid, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || img.width % patch != 0 || img.height % patch != 0 {
        return Err(EivenError::Shape(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            img.width, img.height
        )));
    }
    let (tiles_x, tiles_y) = (img.width / patch, img.height / patch);
    let row_len = patch * patch * 3;
    let mut out = Vec::with_capacity(tiles_x * tiles_y * row_len);
    let inv = T::of(1.0 / 255.0);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            for py in 0..patch {
                let y = ty * patch + py;
                let start = (y * img.width + tx * patch) * 3;
                out.extend(
                    img.pixels[start..start + patch * 3]
                        .iter()
                        .map(|&b| T::of(b as f64) * inv),
                );
            }
        }
    }
    Tensor::constant(out, &[tiles_x * tiles_y, row_len])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// 1-based indices of the layers whose `[cls]` state is extracted.
    pub extraction_layers: Vec<usize>,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 32,
            patch: 8,
            width: 64,
            layers: 8,
            heads: 4,
            mlp_hidden: 128,
            extraction_layers: vec![2, 4, 6, 8],
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(EivenError::config(
                "vision.patch",
                format!(
                    "image size {} is not a multiple of patch {}",
                    self.image_size, self.patch
                ),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(EivenError::config("vision.heads", "width must be divisible by heads"));
        }
        if self.extraction_layers.is_empty() {
            return Err(EivenError::config(
                "vision.extraction_layers",
                "at least one layer is required",
            ));
        }
        let mut prev = 0;
        for &l in &self.extraction_layers {
            if l == 0 || l > self.layers {
                return Err(EivenError::config(
                    "vision.extraction_layers",
                    format!("layer {l} outside 1..={}", self.layers),
                ));
            }
            if l <= prev {
                return Err(EivenError::config(
                    "vision.extraction_layers",
                    "layers must be strictly increasing",
                ));
            }
            prev = l;
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

/// `K x D` matrix of `[cls]` states, one row per extraction layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MgvfEmbedding<T: Scalar = f32> {
    pub k: usize,
    pub d: usize,
    pub rows: Vec<T>,
}

impl<T: Scalar> MgvfEmbedding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::constant(self.rows.clone(), &[self.k, self.d]).expect("k x d rows")
    }

    /// Row-wise concatenation, e.g. the two images of a comparison pair.
    pub fn stack(parts: &[&MgvfEmbedding<T>]) -> Tensor<T> {
        let d = parts.first().map_or(0, |p| p.d);
        let rows: Vec<T> = parts.iter().flat_map(|p| p.rows.iter().copied()).collect();
        let k = parts.iter().map(|p| p.k).sum();
        Tensor::constant(rows, &[k, d]).expect("stacked rows share width")
    }

    pub fn cast<U: Scalar>(&self) -> MgvfEmbedding<U> {
        MgvfEmbedding {
            k: self.k,
            d: self.d,
            rows: self.rows.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// ViT with a prepended `[cls]` token and learned positions. All weights are
/// frozen after construction.
#[derive(Clone, Debug)]
pub struct VisionEncoder<T: Scalar = f32> {
    pub config: VisionConfig,
    pub patch_embed: Linear<T>,
    pub cls: Tensor<T>,
    pub positions: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn new(config: &VisionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.width;
        let patch_dim = config.patch * config.patch * 3;
        let patch_embed = Linear::new(&mut init, patch_dim, d, 1.0, true, Kind::Frozen);
        let cls = init.normal(&[1, d], 1.0, Kind::Frozen);
        let positions = init.normal(&[config.num_patches() + 1, d], 0.1, Kind::Frozen);
        let blocks = (0..config.layers)
            .map(|_| TransformerBlock::new(&mut init, d, config.heads, config.mlp_hidden, Kind::Frozen))
            .collect();
        Ok(VisionEncoder {
            config: config.clone(),
            patch_embed,
            cls,
            positions,
            blocks,
        })
    }

    /// Encodes a batch of images in one packed pass.
    pub fn encode_batch(&self, images: &[&ImageGrid]) -> Result<Vec<MgvfEmbedding<T>>> {
        let cfg = &self.config;
        let d = cfg.width;
        let tokens = cfg.num_patches() + 1;
        let mut rows = Vec::with_capacity(images.len() * tokens * d);
        {
            let (cls, pos) = (self.cls.data(), self.positions.data());
            for img in images {
                if img.width != cfg.image_size || img.height != cfg.image_size {
                    return Err(EivenError::Shape(format!(
                        "expected {0}x{0} image, got {1}x{2}",
                        cfg.image_size, img.width, img.height
                    )));
                }
                let patches = self.patch_embed.forward(&patchify::<T>(img, cfg.patch)?)?;
                rows.extend(cls.iter().zip(&pos[..d]).map(|(&c, &p)| c + p));
                rows.extend(patches.data().iter().zip(&pos[d..]).map(|(&v, &p)| v + p));
            }
        }
        let segments: Vec<_> = (0..images.len()).map(|i| i * tokens..(i + 1) * tokens).collect();
        let mut x = Tensor::constant(rows, &[images.len() * tokens, d])?;
        let mut out: Vec<MgvfEmbedding<T>> = images
            .iter()
            .map(|_| MgvfEmbedding {
                k: cfg.extraction_layers.len(),
                d,
                rows: Vec::with_capacity(cfg.extraction_layers.len() * d),
            })
            .collect();
        let last = *cfg.extraction_layers.last().expect("validated non-empty");
        for (i, block) in self.blocks.iter().enumerate().take(last) {
            x = block.forward(&x, &segments, false, None)?;
            if cfg.extraction_layers.contains(&(i + 1)) {
                let xd = x.data();
                for (img, emb) in out.iter_mut().enumerate() {
                    let cls_row = img * tokens * d;
                    emb.rows.extend_from_slice(&xd[cls_row..cls_row + d]);
                }
            }
        }
        Ok(out)
    }

    pub fn encode_multigranular(&self, img: &ImageGrid) -> Result<MgvfEmbedding<T>> {
        Ok(self
            .encode_batch(&[img])?
            .pop()
            .expect("one image in, one embedding out"))
    }

    pub fn named_tensors(&self) -> Vec<Named<T>> {
        let mut out = Vec::new();
        self.patch_embed.collect("vision.patch_embed", &mut out);
        out.push(("vision.cls".into(), self.cls.clone()));
        out.push(("vision.positions".into(), self.positions.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("vision.block{i}"), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes_and_zero_image() {
        let img = ImageGrid::filled(32, [0, 0, 0]);
        let p = patchify::<f32>(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(patchify::<f32>(&img, 5).is_err());
    }

    #[test]
    fn colored_corner_patch_only_touches_row_zero() {
        let mut img = ImageGrid::filled(32, [0, 0, 0]);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [255, 128, 3]);
            }
        }
        let p = patchify::<f64>(&img, 8).unwrap();
        let d = p.data();
        assert!(d[..192].iter().all(|&v| v > 0.0));
        assert!(d[192..].iter().all(|&v| v == 0.0));
        assert_eq!(d[0], 1.0);
    }

    #[test]
    fn patch_rows_follow_pixel_bookkeeping() {
        let mut img = ImageGrid::filled(16, [0, 0, 0]);
        // Pixel (9, 2) lives in tile (1, 0), local offset row 2 col 1.
        img.set(9, 2, [0, 255, 0]);
        let p = patchify::<f64>(&img, 8).unwrap();
        let d = p.data();
        let idx = 192 + (2 * 8 + 1) * 3 + 1;
        assert_eq!(d[idx], 1.0);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn default_encoder_yields_four_rows() {
        let enc = VisionEncoder::<f32>::new(&VisionConfig::default(), 0).unwrap();
        let e = enc.encode_multigranular(&ImageGrid::filled(32, [10, 200, 30])).unwrap();
        assert_eq!((e.k, e.d, e.rows.len()), (4, 64, 256));
    }

    #[test]
    fn last_layer_only_is_single_granularity() {
        let cfg = VisionConfig {
            extraction_layers: vec![8],
            ..VisionConfig::default()
        };
        let enc = VisionEncoder::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(
            enc.encode_multigranular(&ImageGrid::filled(32, [1, 2, 3])).unwrap().k,
            1
        );
    }

    #[test]
    fn bad_extraction_layers_are_config_errors() {
        for layers in [vec![], vec![0], vec![9], vec![4, 2], vec![3, 3]] {
            let cfg = VisionConfig {
                extraction_layers: layers,
                ..VisionConfig::default()
            };
            assert!(matches!(
                VisionEncoder::<f32>::new(&cfg, 0),
                Err(EivenError::Config { .. })
            ));
        }
    }

    #[test]
    fn different_images_give_different_embeddings() {
        let enc = VisionEncoder::<f32>::new(&VisionConfig::default(), 3).unwrap();
        let a = enc.encode_multigranular(&ImageGrid::filled(32, [255, 0, 0])).unwrap();
        let b = enc.encode_multigranular(&ImageGrid::filled(32, [0, 0, 255])).unwrap();
        let max_diff = a
            .rows
            .iter()
            .zip(&b.rows)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn batch_and_single_encoding_agree() {
        let enc = VisionEncoder::<f32>::new(&VisionConfig::default(), 5).unwrap();
        let a = ImageGrid::filled(32, [255, 0, 0]);
        let b = ImageGrid::filled(32, [0, 40, 255]);
        let batch = enc.encode_batch(&[&a, &b]).unwrap();
        assert_eq!(batch[1], enc.encode_multigranular(&b).unwrap());
    }

    #[test]
    fn encoder_weights_are_frozen() {
        let enc = VisionEncoder::<f32>::new(&VisionConfig::default(), 0).unwrap();
        assert!(enc.named_tensors().iter().all(|(_, t)| t.is_frozen()));
    }
}
