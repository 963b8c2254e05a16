use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    /// Smooth color noise with random rectangles.
    #[default]
    Procedural,
    /// Directory of PNG/JPEG/PPM images, picked at random and resized.
    ImageDir(PathBuf),
    /// Constant gray level.
    Flat(f32),
}

pub(crate) fn render_background(src: &BackgroundSource, w: usize, h: usize, rng: &mut impl Rng) -> Result<RgbImage> {
    match src {
        BackgroundSource::Procedural => Ok(procedural_background(w, h, rng)),
        BackgroundSource::Flat(v) => {
            let mut img = RgbImage::new(w, h);
            img.data.iter_mut().for_each(|p| *p = [*v; 3]);
            Ok(img)
        }
        BackgroundSource::ImageDir(dir) => {
            let files = list_images(dir)?;
            let path = &files[rng.random_range(0..files.len())];
            load_resized(path, w, h)
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "ppm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no background images in {}", dir.display())));
    }
    Ok(files)
}

fn load_resized(path: &Path, w: usize, h: usize) -> Result<RgbImage> {
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
        let img = crate::pnm::read_ppm(path)?;
        return Ok(resize_nearest(&img, w, h));
    }
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut out = RgbImage::new(w, h);
    for (k, p) in img.pixels().enumerate() {
        out.data[k] = [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0];
    }
    Ok(out)
}

fn resize_nearest(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::new(w, h);
    for j in 0..h {
        for i in 0..w {
            let si = (i * img.width / w).min(img.width - 1);
            let sj = (j * img.height / h).min(img.height - 1);
            out.set(i, j, img.get(si, sj));
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Three octaves of smoothly interpolated lattice noise per channel,
/// overlaid with 6 to 14 random flat rectangles.
pub fn procedural_background(w: usize, h: usize, rng: &mut impl Rng) -> RgbImage {
    let mut acc = vec![[0.0f64; 3]; w * h];
    let mut amp = 0.5;
    let mut cell = 96.0;
    for _ in 0..3 {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<[f64; 3]> = (0..gw * gh)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        for j in 0..h {
            let y = j as f64 / cell;
            let (y0, ty) = (y.floor() as usize, smoothstep(y.fract()));
            for i in 0..w {
                let x = i as f64 / cell;
                let (x0, tx) = (x.floor() as usize, smoothstep(x.fract()));
                let g = |a: usize, b: usize| lattice[b * gw + a];
                let (c00, c10, c01, c11) = (g(x0, y0), g(x0 + 1, y0), g(x0, y0 + 1), g(x0 + 1, y0 + 1));
                for c in 0..3 {
                    let top = c00[c] + (c10[c] - c00[c]) * tx;
                    let bot = c01[c] + (c11[c] - c01[c]) * tx;
                    acc[j * w + i][c] += amp * (top + (bot - top) * ty);
                }
            }
        }
        amp *= 0.5;
        cell /= 2.5;
    }
    let mut img = RgbImage::new(w, h);
    for (dst, a) in img.data.iter_mut().zip(&acc) {
        // octave amplitudes sum to 0.875
        *dst = [(a[0] / 0.875) as f32, (a[1] / 0.875) as f32, (a[2] / 0.875) as f32];
    }
    let rects = rng.random_range(6..=14);
    for _ in 0..rects {
        let rw = rng.random_range(w / 20..=w / 4).max(1);
        let rh = rng.random_range(h / 20..=h / 4).max(1);
        let x0 = rng.random_range(0..w.saturating_sub(rw).max(1));
        let y0 = rng.random_range(0..h.saturating_sub(rh).max(1));
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        for j in y0..(y0 + rh).min(h) {
            for i in x0..(x0 + rw).min(w) {
                img.set(i, j, col);
            }
        }
    }
    img
}
