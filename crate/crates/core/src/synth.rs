//! Seeded synthetic scenes: textured high-contrast rectangles on a smooth, lightly
//! noisy background. Used for training smoke runs, acceptance checks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::AnnotatedBox;
use crate::imgpyr::ImagePlane;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: (usize, usize),
    pub height: (usize, usize),
    pub objects: (usize, usize),
    /// Side lengths are log-uniform in this range.
    pub side: (f64, f64),
    pub max_aspect: f64,
    pub background_noise: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: (320, 500),
            height: (256, 375),
            objects: (1, 3),
            side: (16.0, 256.0),
            max_aspect: 4.0,
            background_noise: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImagePlane,
    pub boxes: Vec<AnnotatedBox>,
}

const TEXTURES: [&str; 3] = ["stripes", "checker", "speckle"];

fn overlap_fraction(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let w = (a.0 + a.2).min(b.0 + b.2) as f64 - a.0.max(b.0) as f64;
    let h = (a.1 + a.3).min(b.1 + b.3) as f64 - a.1.max(b.1) as f64;
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    w * h / ((a.2 * a.3).min(b.2 * b.3) as f64)
}

/// Scene `index` of the stream identified by `seed`.
pub fn scene(cfg: &SceneConfig, seed: u64, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let width = rng.gen_range(cfg.width.0..=cfg.width.1);
    let height = rng.gen_range(cfg.height.0..=cfg.height.1);
    let id = format!("synth_{seed}_{index:05}.png");

    let base = rng.gen_range(60.0..190.0f64);
    let gx = rng.gen_range(-30.0..30.0f64) / width as f64;
    let gy = rng.gen_range(-30.0..30.0f64) / height as f64;
    let noise = cfg.background_noise as i32;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = base + gx * x as f64 + gy * y as f64 + rng.gen_range(-noise..=noise) as f64;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }

    let count = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let (lo, hi) = (cfg.side.0.ln(), cfg.side.1.ln());
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut boxes = Vec::new();
    let mut attempts = 0;
    while placed.len() < count && attempts < 200 {
        attempts += 1;
        let w = rng.gen_range(lo..=hi).exp().round() as usize;
        let h = rng.gen_range(lo..=hi).exp().round() as usize;
        if (w.max(h) as f64) / (w.min(h) as f64) > cfg.max_aspect || w >= width || h >= height {
            continue;
        }
        let x = rng.gen_range(0..=width - w);
        let y = rng.gen_range(0..=height - h);
        if placed.iter().any(|&p| overlap_fraction(p, (x, y, w, h)) > 0.0) {
            continue;
        }
        placed.push((x, y, w, h));

        let texture = rng.gen_range(0..TEXTURES.len());
        let background_here = data[(y + h / 2) * width + x + w / 2] as f64;
        let contrast = rng.gen_range(70.0..150.0f64);
        let fill = if background_here > 127.0 { background_here - contrast } else { background_here + contrast };
        let amp = rng.gen_range(15.0..45.0f64);
        let period = rng.gen_range(2..=6usize);
        let cells: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        for yy in 0..h {
            for xx in 0..w {
                let t = match texture {
                    0 => {
                        if (xx / period) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    1 => {
                        if ((xx / period) + (yy / period)) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    _ => cells[((yy / period) % 8) * 8 + (xx / period) % 8],
                };
                let v = fill + amp * t + rng.gen_range(-noise..=noise) as f64;
                data[(y + yy) * width + x + xx] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        boxes.push(AnnotatedBox {
            image_id: id.clone(),
            x: x as u32,
            y: y as u32,
            w: w as u32,
            h: h as u32,
            label: TEXTURES[texture].to_string(),
        });
    }

    Scene { image: ImagePlane::new(width, height, data).expect("sized buffer"), boxes }
}

/// Scenes `0..count` of stream `seed`.
pub fn corpus(cfg: &SceneConfig, seed: u64, count: usize) -> Vec<Scene> {
    (0..count as u64).map(|i| scene(cfg, seed, i)).collect()
}
