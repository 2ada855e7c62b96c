//! Horizontal high-frequency (HL) subband of one Haar-style level, quantized to bytes.
//!
//! Rows are filtered with the high-pass pair `[-1, 1] / 1.41` at stride 2, then
//! columns with the low-pass pair `[1, 1] / 1.41` at stride 2. Each output cell
//! therefore depends only on the signed sum of the 2x2 source block
//! `(b - a) + (d - c)`, which lies in `[-510, 510]`, so the quantized response is
//! read from a 1021-entry table.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::imgpyr::{ImagePlane, ScaleSpec};

/// Filter normalisation used by both taps.
pub const FILTER_NORM: f64 = 1.41;

const MAX_DIFF: i32 = 510;

/// Quantized HL responses at one pyramid scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HlFeatureMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
    scale: ScaleSpec,
}

impl HlFeatureMap {
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>, scale: ScaleSpec) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Malformed(format!(
                "feature buffer holds {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(HlFeatureMap { width, height, data, scale })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn scale(&self) -> ScaleSpec {
        self.scale
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// The 64 bytes of the 8x8 window with top-left cell `(y, x)`, row-major.
    pub fn window(&self, y: usize, x: usize) -> Result<[u8; 64]> {
        if y + 8 > self.height || x + 8 > self.width {
            return Err(Error::WindowOutOfBounds { y, x, width: self.width, height: self.height });
        }
        let mut out = [0u8; 64];
        for r in 0..8 {
            out[r * 8..r * 8 + 8].copy_from_slice(&self.row(y + r)[x..x + 8]);
        }
        Ok(out)
    }

    /// Grayscale view for debug dumps.
    pub fn to_plane(&self) -> Result<ImagePlane> {
        ImagePlane::new(self.width, self.height, self.data.clone())
    }
}

/// Quantization of a signed 2x2 difference sum: `round(|d| / 1.41 / 1.41)` clamped to a byte.
#[inline]
pub fn quantize(diff: i32) -> u8 {
    table()[(diff.clamp(-MAX_DIFF, MAX_DIFF) + MAX_DIFF) as usize]
}

fn table() -> &'static [u8; (2 * MAX_DIFF + 1) as usize] {
    static TABLE: OnceLock<[u8; (2 * MAX_DIFF + 1) as usize]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u8; (2 * MAX_DIFF + 1) as usize];
        for (i, slot) in t.iter_mut().enumerate() {
            let d = i as i32 - MAX_DIFF;
            let raw = d as f64 / (FILTER_NORM * FILTER_NORM);
            *slot = raw.abs().round().min(255.0) as u8;
        }
        t
    })
}

/// HL feature map of `img`, tagged with the scale it was computed at.
pub fn hl_map(img: &ImagePlane, scale: ScaleSpec) -> Result<HlFeatureMap> {
    if img.width() < 2 || img.height() < 2 {
        return Err(Error::TooSmall { width: img.width(), height: img.height() });
    }
    let (w, h) = (img.width() / 2, img.height() / 2);
    let t = table();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let top = &img.row(2 * y)[..2 * w];
        let bot = &img.row(2 * y + 1)[..2 * w];
        data.extend(top.chunks_exact(2).zip(bot.chunks_exact(2)).map(|(a, b)| {
            let d = a[1] as i32 - a[0] as i32 + b[1] as i32 - b[0] as i32;
            t[(d + MAX_DIFF) as usize]
        }));
    }
    Ok(HlFeatureMap { width: w, height: h, data, scale })
}
