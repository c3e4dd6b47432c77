//! RGB images, the identity pixel codec, and the synthetic sprite corpus.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Grayscale rendering of a `[0, 1]` grid (values clamped).
    pub fn from_gray(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("from_gray", &[values.len()], &[height, width]));
        }
        let mut im = Self::new(width, height);
        for (i, &v) in values.iter().enumerate() {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            im.data[i * 3..i * 3 + 3].copy_from_slice(&[b, b, b]);
        }
        Ok(im)
    }

    pub fn from_mask(width: usize, height: usize, mask: &[bool]) -> Result<Self> {
        let v: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self::from_gray(width, height, &v)
    }

    /// Pixels with any channel above mid-gray.
    pub fn to_mask(&self) -> Vec<bool> {
        self.data.chunks_exact(3).map(|c| c.iter().any(|&v| v >= 128)).collect()
    }

    /// Identity codec: `[3, H, W]` latent with values in `[-1, 1]`.
    pub fn to_latent<F: Element>(&self) -> Tensor<F> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            F::of(self.data[p * 3 + c] as f64 / 127.5 - 1.0)
        })
    }

    /// Inverse codec; values are clamped to `[-1, 1]` and rounded.
    pub fn from_latent<F: Element>(z: &Tensor<F>) -> Result<Self> {
        let s = z.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("from_latent", s, &[3, 0, 0]));
        }
        if !z.all_finite() {
            return Err(Error::NonFinite("latent to decode".into()));
        }
        let (h, w) = (s[1], s[2]);
        let mut im = Self::new(w, h);
        let d = z.data();
        for c in 0..3 {
            for p in 0..h * w {
                let v = d[c * h * w + p].f64().clamp(-1.0, 1.0);
                im.data[p * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
        Ok(im)
    }
}

/// Writes an 8-bit RGB, non-interlaced PNG.
pub fn write_png(path: &Path, im: &RgbImage) -> Result<()> {
    let img_err = |e: &dyn std::fmt::Display| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), im.width as u32, im.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| img_err(&e))?;
    w.write_image_data(&im.data).map_err(|e| img_err(&e))?;
    w.finish().map_err(|e| img_err(&e))?;
    Ok(())
}

/// Reads an 8-bit PNG (RGB, RGBA, gray or gray-alpha) as RGB.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img_err = |m: String| Error::Image {
        path: path.to_path_buf(),
        message: m,
    };
    let file = std::fs::File::open(path)?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| img_err("image too large".into()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err(img_err("palette not expanded".into())),
    };
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Image list (and ground-truth masks for synthetic corpora), paths relative
/// to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    pub image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

/// A dataset manifest resolved against its directory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub masks: Option<Vec<Vec<bool>>>,
    pub image_paths: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<LoadedDataset> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.images.is_empty() {
            return Err(Error::Config {
                path: path.display().to_string(),
                message: "manifest lists no images".into(),
            });
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let image_paths: Vec<PathBuf> = manifest.images.iter().map(|p| dir.join(p)).collect();
        let images = image_paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
        for (p, im) in image_paths.iter().zip(&images) {
            if im.width != manifest.image_size || im.height != manifest.image_size {
                return Err(Error::Image {
                    path: p.clone(),
                    message: format!(
                        "expected {0}x{0}, found {1}x{2}",
                        manifest.image_size, im.width, im.height
                    ),
                });
            }
        }
        let masks = match &manifest.masks {
            None => None,
            Some(m) => {
                if m.len() != manifest.images.len() {
                    return Err(Error::Config {
                        path: path.display().to_string(),
                        message: "mask count differs from image count".into(),
                    });
                }
                Some(
                    m.iter()
                        .map(|p| Ok(read_png(&dir.join(p))?.to_mask()))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(LoadedDataset {
            manifest,
            images,
            masks,
            image_paths,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Sprite disk radius in pixels.
    pub sprite_radius: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 5,
            image_size: 32,
            seed: 0,
            sprite_radius: 7,
        }
    }
}

const SPRITE_A: [u8; 3] = [214, 40, 40];
const SPRITE_B: [u8; 3] = [250, 200, 30];

/// Fixed sprite: a disk with a two-color checker texture. Returns the color
/// at offset `(dx, dy)` from the center, or `None` outside the disk.
fn sprite_pixel(dx: i64, dy: i64, r: i64) -> Option<[u8; 3]> {
    if dx * dx + dy * dy > r * r {
        return None;
    }
    let cell = ((dx + r) / 3 + (dy + r) / 3) % 2;
    Some(if cell == 0 { SPRITE_A } else { SPRITE_B })
}

/// One composited image with its ground-truth sprite mask.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub background: RgbImage,
    pub mask: Vec<bool>,
    pub center: (usize, usize),
}

fn random_background(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut im = RgbImage::new(size, size);
    let half = (size as f64 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 - half) * ca + (y as f64 - half) * sa) / (2.0 * half.max(1.0)) + 0.5;
            let u = u.clamp(0.0, 1.0);
            let px: [u8; 3] = std::array::from_fn(|c| {
                let noise: f64 = rng.random_range(-12.0..12.0);
                (c0[c] * (1.0 - u) + c1[c] * u + noise).clamp(0.0, 255.0).round() as u8
            });
            im.put(x, y, px);
        }
    }
    im
}

/// Generates the corpus: the same sprite at random positions over random
/// gradient backgrounds.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    let (s, r) = (cfg.image_size, cfg.sprite_radius);
    if cfg.n_images == 0 || r == 0 || 2 * r + 1 > s {
        return Err(Error::invalid(format!(
            "need n_images > 0 and a sprite of radius {r} to fit a {s}x{s} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_images);
    for _ in 0..cfg.n_images {
        let background = random_background(s, &mut rng);
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let mut image = background.clone();
        let mut mask = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                if let Some(c) = sprite_pixel(x as i64 - cx as i64, y as i64 - cy as i64, r as i64) {
                    image.put(x, y, c);
                    mask[y * s + x] = true;
                }
            }
        }
        out.push(SyntheticSample {
            image,
            background,
            mask,
            center: (cx, cy),
        });
    }
    Ok(out)
}

/// Whether `mask` covers exactly the pixels where the sprite was composited:
/// every masked pixel carries a sprite color at the right texture cell and
/// every unmasked pixel is the untouched background.
pub fn verify_sample(s: &SyntheticSample, radius: usize) -> bool {
    let (cx, cy) = (s.center.0 as i64, s.center.1 as i64);
    (0..s.image.height).all(|y| {
        (0..s.image.width).all(|x| {
            let expected = sprite_pixel(x as i64 - cx, y as i64 - cy, radius as i64);
            let m = s.mask[y * s.image.width + x];
            match expected {
                Some(c) => m && s.image.get(x, y) == c,
                None => !m && s.image.get(x, y) == s.background.get(x, y),
            }
        })
    })
}

/// Generic pre-training corpus for the backbone warm-up: random-shape,
/// random-color textured sprites over random backgrounds, plus empty
/// backgrounds. The flag tells whether an object is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupCorpusConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub object_fraction: f64,
    pub min_radius: usize,
    pub max_radius: usize,
    pub seed: u64,
}

impl Default for WarmupCorpusConfig {
    fn default() -> Self {
        Self {
            n_images: 64,
            image_size: 32,
            object_fraction: 0.5,
            min_radius: 5,
            max_radius: 9,
            seed: 101,
        }
    }
}

/// Generic images for backbone warm-up, each with its object mask (`None`
/// for empty backgrounds).
pub fn generate_warmup_corpus(cfg: &WarmupCorpusConfig) -> Result<Vec<(RgbImage, Option<Vec<bool>>)>> {
    let s = cfg.image_size;
    if cfg.n_images == 0 || cfg.min_radius == 0 || cfg.min_radius > cfg.max_radius || 2 * cfg.max_radius + 1 > s {
        return Err(Error::invalid(
            "warm-up corpus radii must be positive, ordered and fit the image",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_images);
    for _ in 0..cfg.n_images {
        let mut im = random_background(s, &mut rng);
        let has = rng.random_bool(cfg.object_fraction.clamp(0.0, 1.0));
        let mut mask = vec![false; s * s];
        if has {
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius) as i64;
            let shape = rng.random_range(0..3u8);
            let cell = rng.random_range(2..=4i64);
            let colors: [[u8; 3]; 2] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0..=255u8)));
            let cx = rng.random_range(r..s as i64 - r);
            let cy = rng.random_range(r..s as i64 - r);
            for y in 0..s as i64 {
                for x in 0..s as i64 {
                    let (dx, dy) = (x - cx, y - cy);
                    let inside = match shape {
                        0 => dx * dx + dy * dy <= r * r,
                        1 => dx.abs() <= r * 3 / 4 && dy.abs() <= r * 3 / 4,
                        _ => dx.abs() + dy.abs() <= r,
                    };
                    if inside {
                        let k = (((dx + r) / cell + (dy + r) / cell) % 2) as usize;
                        im.put(x as usize, y as usize, colors[k]);
                        mask[y as usize * s + x as usize] = true;
                    }
                }
            }
        }
        out.push((im, has.then_some(mask)));
    }
    Ok(out)
}

/// Writes `image_XX.png`, `mask_XX.png` and `manifest.json` into `dir`.
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    let samples = generate_synthetic(cfg)?;
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if !verify_sample(s, cfg.sprite_radius) {
            return Err(Error::invalid(format!(
                "generated sample {i} failed its mask self-check"
            )));
        }
        let (im, mk) = (format!("image_{i:02}.png"), format!("mask_{i:02}.png"));
        write_png(&dir.join(&im), &s.image)?;
        write_png(
            &dir.join(&mk),
            &RgbImage::from_mask(cfg.image_size, cfg.image_size, &s.mask)?,
        )?;
        images.push(im);
        masks.push(mk);
    }
    let manifest = DatasetManifest {
        images,
        masks: Some(masks),
        image_size: cfg.image_size,
        synthetic: Some(cfg.clone()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_round_trips_bytes() {
        let mut im = RgbImage::new(3, 2);
        for (i, b) in im.data.iter_mut().enumerate() {
            *b = (i * 37 % 256) as u8;
        }
        let z = im.to_latent::<f32>();
        assert_eq!(z.shape(), &[3, 2, 3]);
        assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(RgbImage::from_latent(&z).unwrap(), im);
        let nan = Tensor::<f32>::full(&[3, 1, 1], f32::NAN);
        assert!(RgbImage::from_latent(&nan).is_err());
    }

    #[test]
    fn samples_pass_the_self_check() {
        let cfg = SyntheticConfig::default();
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.len(), 5);
        for x in &s {
            assert!(verify_sample(x, cfg.sprite_radius));
            let area = x.mask.iter().filter(|&&m| m).count();
            assert_eq!(area, s[0].mask.iter().filter(|&&m| m).count());
        }
        let mut bad = s[0].clone();
        bad.mask[0] = !bad.mask[0];
        assert!(!verify_sample(&bad, cfg.sprite_radius));
        assert!(generate_synthetic(&SyntheticConfig {
            sprite_radius: 16,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = &generate_synthetic(&SyntheticConfig::default()).unwrap()[0];
        let p = dir.path().join("x.png");
        write_png(&p, &s.image).unwrap();
        assert_eq!(read_png(&p).unwrap(), s.image);
    }
}
