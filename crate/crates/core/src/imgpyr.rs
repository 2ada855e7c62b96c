//! Grayscale image planes, the fixed-ratio downsampling pyramid and image I/O.

use std::fmt;
use std::io::Write;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted width or height when reading images from disk.
pub const MAX_DIMENSION: u32 = 10_000;

/// Row-major 8-bit intensity raster.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ImagePlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImagePlane({}x{})", self.width, self.height)
    }
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if data.len() != width * height {
            return Err(Error::Malformed(format!(
                "pixel buffer holds {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(ImagePlane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(width, height, data)
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn min_max(&self) -> (u8, u8) {
        self.data
            .iter()
            .fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// A pyramid level: rows are downsampled by `2^m`, columns by `2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub m: u8,
    pub n: u8,
}

impl ScaleSpec {
    pub const fn new(m: u8, n: u8) -> Self {
        ScaleSpec { m, n }
    }

    /// Membership in the pyramid's ratio set.
    pub fn is_valid(&self) -> bool {
        let (m, n) = (self.m as i32, self.n as i32);
        (m <= 3 && n <= MAX_COLUMN_LOG2 as i32 && (n - m).abs() <= 2) || (m == 4 && n == 3)
    }

    pub fn row_factor(&self) -> usize {
        1 << self.m
    }

    pub fn col_factor(&self) -> usize {
        1 << self.n
    }

    /// Height and width in original pixels covered by one 8x8 feature window.
    pub fn window_size(&self) -> (usize, usize) {
        (16 << self.m, 16 << self.n)
    }
}

impl fmt::Display for ScaleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.m, self.n)
    }
}

const MAX_COLUMN_LOG2: u8 = 4;

/// All pyramid ratios, sorted by `(m, n)`.
pub fn enumerate_scales() -> Vec<ScaleSpec> {
    let mut out = Vec::new();
    for m in 0..=4u8 {
        for n in 0..=MAX_COLUMN_LOG2 {
            let s = ScaleSpec::new(m, n);
            if s.is_valid() {
                out.push(s);
            }
        }
    }
    out
}

/// Borrowed interleaved 8-bit RGB raster.
#[derive(Debug, Clone, Copy)]
pub struct RgbRaster<'a> {
    pub width: usize,
    pub height: usize,
    pub data: &'a [u8],
}

/// Rec. 601 luma, rounded half away from zero.
pub fn to_grayscale(rgb: RgbRaster<'_>) -> Result<ImagePlane> {
    if rgb.width == 0 || rgb.height == 0 {
        return Err(Error::EmptyImage);
    }
    if rgb.data.len() != rgb.width * rgb.height * 3 {
        return Err(Error::Malformed(format!(
            "rgb buffer holds {} bytes, expected {}",
            rgb.data.len(),
            rgb.width * rgb.height * 3
        )));
    }
    let data = rgb
        .data
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    ImagePlane::new(rgb.width, rgb.height, data)
}

#[inline]
fn luma(r: u8, g: u8, b: u8) -> u8 {
    // Integer form of 0.299/0.587/0.114 scaled by 1000; exact for all inputs.
    let scaled = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((scaled + 500) / 1000).min(255) as u8
}

fn check_fits(width: usize, height: usize, s: ScaleSpec) -> Result<()> {
    if height < s.row_factor() || width < s.col_factor() {
        return Err(Error::ScaleTooLarge {
            m: s.m,
            n: s.n,
            need_w: s.col_factor(),
            need_h: s.row_factor(),
        });
    }
    Ok(())
}

#[inline]
fn rounded_mean(sum: u32, shift: u32) -> u8 {
    if shift == 0 {
        sum as u8
    } else {
        ((sum + (1 << (shift - 1))) >> shift) as u8
    }
}

/// Block-mean downsampling by `2^m` rows and `2^n` columns; partial blocks are dropped.
pub fn downsample(img: &ImagePlane, s: ScaleSpec) -> Result<ImagePlane> {
    check_fits(img.width, img.height, s)?;
    if s.m == 0 && s.n == 0 {
        return Ok(img.clone());
    }
    let (fy, fx) = (s.row_factor(), s.col_factor());
    let (ow, oh) = (img.width / fx, img.height / fy);
    let shift = (s.m + s.n) as u32;
    let mut sums = vec![0u32; ow];
    let mut data = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        sums.iter_mut().for_each(|v| *v = 0);
        for y in oy * fy..(oy + 1) * fy {
            let row = &img.row(y)[..ow * fx];
            for (acc, block) in sums.iter_mut().zip(row.chunks_exact(fx)) {
                *acc += block.iter().map(|&v| v as u32).sum::<u32>();
            }
        }
        data.extend(sums.iter().map(|&v| rounded_mean(v, shift)));
    }
    ImagePlane::new(ow, oh, data)
}

/// Summed-area table over an image, for producing many pyramid levels from one pass.
///
/// Entries wrap modulo 2^32; block sums are far below that, so differences stay exact.
pub struct Pyramid<'a> {
    image: &'a ImagePlane,
    stride: usize,
    integral: Vec<u32>,
}

impl<'a> Pyramid<'a> {
    pub fn new(image: &'a ImagePlane) -> Self {
        let stride = image.width + 1;
        let mut integral = vec![0u32; stride * (image.height + 1)];
        for y in 0..image.height {
            let mut run = 0u32;
            let row = image.row(y);
            for x in 0..image.width {
                run = run.wrapping_add(row[x] as u32);
                integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1].wrapping_add(run);
            }
        }
        Pyramid { image, stride, integral }
    }

    pub fn source(&self) -> &ImagePlane {
        self.image
    }

    /// Same contract as [`downsample`].
    pub fn level(&self, s: ScaleSpec) -> Result<ImagePlane> {
        check_fits(self.image.width, self.image.height, s)?;
        if s.m == 0 && s.n == 0 {
            return Ok(self.image.clone());
        }
        let (fy, fx) = (s.row_factor(), s.col_factor());
        let (ow, oh) = (self.image.width / fx, self.image.height / fy);
        let shift = (s.m + s.n) as u32;
        let st = self.stride;
        let ii = &self.integral;
        let mut data = Vec::with_capacity(ow * oh);
        for oy in 0..oh {
            let top = oy * fy * st;
            let bot = (oy + 1) * fy * st;
            for ox in 0..ow {
                let (l, r) = (ox * fx, (ox + 1) * fx);
                let sum = ii[bot + r]
                    .wrapping_add(ii[top + l])
                    .wrapping_sub(ii[bot + l])
                    .wrapping_sub(ii[top + r]);
                data.push(rounded_mean(sum, shift));
            }
        }
        ImagePlane::new(ow, oh, data)
    }
}

/// Reads PGM, PPM or PNG into a grayscale plane; color inputs go through [`to_grayscale`].
pub fn read_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| Error::Image { path: path.into(), source: e })?;
    if w > MAX_DIMENSION || h > MAX_DIMENSION {
        return Err(Error::ImageTooLarge { width: w, height: h, limit: MAX_DIMENSION });
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.into(), source: e })?;
    from_dynamic(&decoded)
}

/// Decodes an in-memory encoded image (any enabled format).
pub fn decode_image(bytes: &[u8]) -> Result<ImagePlane> {
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| Error::Image { path: "<memory>".into(), source: e })?;
    from_dynamic(&decoded)
}

fn from_dynamic(img: &DynamicImage) -> Result<ImagePlane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            ImagePlane::new(w, h, img.to_luma8().into_raw())
        }
        _ => {
            let rgb = img.to_rgb8();
            to_grayscale(RgbRaster { width: w, height: h, data: rgb.as_raw() })
        }
    }
}

/// Binary PGM (P5) encoding with a minimal header.
pub fn encode_pgm(img: &ImagePlane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pgm(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode_pgm(img)))
        .map_err(|e| Error::io(path, e))
}

pub fn write_png(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Writes PGM for `.pgm`/`.pnm` paths, PNG otherwise.
pub fn write_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") | Some("pnm") => write_pgm(img, path),
        _ => write_png(img, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_scales() -> Vec<ScaleSpec> {
        let mut v = Vec::new();
        for m in 0..=4i32 {
            for n in 0..=4i32 {
                let in_set = ((0..=3).contains(&m) && (n - m).abs() <= 2) || (m == 4 && n == 3);
                if in_set {
                    v.push(ScaleSpec::new(m as u8, n as u8));
                }
            }
        }
        v
    }

    #[test]
    fn scale_set_matches_enumeration() {
        let scales = enumerate_scales();
        assert_eq!(scales, brute_force_scales());
        assert!(scales.contains(&ScaleSpec::new(0, 0)));
        assert!(scales.contains(&ScaleSpec::new(4, 3)));
        assert!(!scales.contains(&ScaleSpec::new(4, 0)));
        assert!(!scales.contains(&ScaleSpec::new(0, 3)));
        assert_eq!(scales.len(), 17);
        let mut sorted = scales.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, scales);
    }

    #[test]
    fn grayscale_examples() {
        let px = |r, g, b| {
            let d = [r, g, b];
            to_grayscale(RgbRaster { width: 1, height: 1, data: &d }).unwrap().get(0, 0)
        };
        for v in [0u8, 1, 77, 128, 254, 255] {
            assert_eq!(px(v, v, v), v);
        }
        assert_eq!(px(255, 255, 255), 255);
        assert_eq!(px(255, 0, 0), 76);
        assert_eq!(px(0, 255, 0), 150);
        assert_eq!(px(0, 0, 255), 29);
        assert!(matches!(
            to_grayscale(RgbRaster { width: 0, height: 3, data: &[] }),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn grayscale_matches_float_formula() {
        for r in (0..=255u32).step_by(5) {
            for g in (0..=255u32).step_by(7) {
                for b in (0..=255u32).step_by(11) {
                    let exact = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                    if (exact.fract() - 0.5).abs() < 1e-9 {
                        continue;
                    }
                    let f = exact.round();
                    assert_eq!(luma(r as u8, g as u8, b as u8) as f64, f.min(255.0));
                }
            }
        }
    }

    #[test]
    fn downsample_checkerboard() {
        let img = ImagePlane::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let out = downsample(&img, ScaleSpec::new(1, 1)).unwrap();
        assert_eq!((out.width(), out.height()), (1, 1));
        assert_eq!(out.get(0, 0), 128);
    }

    #[test]
    fn downsample_drops_partial_blocks() {
        let img = ImagePlane::from_fn(7, 5, |y, x| (y * 7 + x) as u8).unwrap();
        let out = downsample(&img, ScaleSpec::new(1, 2)).unwrap();
        assert_eq!((out.width(), out.height()), (1, 2));
        assert!(matches!(
            downsample(&img, ScaleSpec::new(3, 0)),
            Err(Error::ScaleTooLarge { .. })
        ));
    }

    #[test]
    fn pgm_round_trip_bytes() {
        let img = ImagePlane::from_fn(13, 9, |y, x| (y * 31 + x * 7) as u8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&img, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_pgm(&back), first);
    }

    #[test]
    fn png_round_trip() {
        let img = ImagePlane::from_fn(10, 6, |y, x| (y * 40 + x) as u8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        write_png(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_is_converted_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 10, 10, 10]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.data(), &[76, 10]);
    }

    #[test]
    fn oversized_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.pgm");
        let mut bytes = b"P5\n10001 1\n255\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(10001));
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_image(&path), Err(Error::ImageTooLarge { .. })));
    }

    fn arb_image() -> impl Strategy<Value = ImagePlane> {
        (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h)
                .prop_map(move |d| ImagePlane::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_scale_is_identity(img in arb_image()) {
            prop_assert_eq!(downsample(&img, ScaleSpec::new(0, 0)).unwrap(), img);
        }

        #[test]
        fn mean_preserves_range_and_constants(img in arb_image(), c in any::<u8>()) {
            let (lo, hi) = img.min_max();
            let flat = ImagePlane::filled(img.width(), img.height(), c).unwrap();
            for s in enumerate_scales() {
                if let Ok(out) = downsample(&img, s) {
                    prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
                    prop_assert!(downsample(&flat, s).unwrap().data().iter().all(|&v| v == c));
                }
            }
        }

        #[test]
        fn integral_levels_match_direct(img in arb_image()) {
            let pyr = Pyramid::new(&img);
            for s in enumerate_scales() {
                match (downsample(&img, s), pyr.level(s)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "direct and integral paths disagree on {}", s),
                }
            }
        }
    }
}
