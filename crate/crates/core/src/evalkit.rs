//! Recall, localisation quality, repeatability under perturbations, and timing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use image::{imageops, GrayImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binmodel::BinarizedModel;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::imgpyr::{decode_image, read_image, ImagePlane};
use crate::proposer::{propose, ProposerConfig};

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    a.iou(b)
}

/// Best IoU of each ground-truth box against the first `budget` proposals.
pub fn best_overlaps(proposals: &[Rect], gt: &[Rect], budget: usize) -> Vec<f64> {
    let top = &proposals[..proposals.len().min(budget)];
    gt.iter()
        .map(|g| top.iter().map(|p| p.iou(g)).fold(0.0, f64::max))
        .collect()
}

/// Fraction of ground-truth boxes matched at `iou_thr` or better by the top `budget` proposals.
pub fn detection_rate(proposals: &[Vec<Rect>], gt: &[Vec<Rect>], iou_thr: f64, budget: usize) -> Result<f64> {
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut hit = 0usize;
    for (i, g) in gt.iter().enumerate() {
        let props = proposals.get(i).map(Vec::as_slice).unwrap_or(&[]);
        hit += best_overlaps(props, g, budget).iter().filter(|&&v| v >= iou_thr).count();
    }
    Ok(hit as f64 / total as f64)
}

/// A ground-truth box with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRect {
    pub rect: Rect,
    pub label: String,
}

/// Average best overlap per class.
pub fn abo_per_class(proposals: &[Vec<Rect>], gt: &[Vec<LabeledRect>], budget: usize) -> Result<BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        let props = proposals.get(i).map(Vec::as_slice).unwrap_or(&[]);
        let rects: Vec<Rect> = g.iter().map(|l| l.rect).collect();
        for (l, best) in g.iter().zip(best_overlaps(props, &rects, budget)) {
            let e = acc.entry(l.label.clone()).or_insert((0.0, 0));
            e.0 += best;
            e.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Unweighted mean over classes of the per-class average best overlap.
pub fn mabo(proposals: &[Vec<Rect>], gt: &[Vec<LabeledRect>], budget: usize) -> Result<f64> {
    let per = abo_per_class(proposals, gt, budget)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Scale,
    Rotate,
    Illumination,
    Jpeg,
    Blur,
    SaltPepper,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::Scale,
        PerturbKind::Rotate,
        PerturbKind::Illumination,
        PerturbKind::Jpeg,
        PerturbKind::Blur,
        PerturbKind::SaltPepper,
    ];

    /// Parameter ladder: scale factor, degrees, gamma, JPEG quality, sigma, noise fraction.
    pub fn ladder(self) -> &'static [f64] {
        match self {
            PerturbKind::Scale => &[0.5, 0.707, 1.414, 2.0],
            PerturbKind::Rotate => &[5.0, 10.0, 15.0],
            PerturbKind::Illumination => &[0.5, 0.8, 1.25, 2.0],
            PerturbKind::Jpeg => &[50.0, 20.0, 10.0, 5.0],
            PerturbKind::Blur => &[1.0, 2.0, 4.0, 8.0],
            PerturbKind::SaltPepper => &[0.01, 0.03, 0.05, 0.1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Scale => "scale",
            PerturbKind::Rotate => "rotate",
            PerturbKind::Illumination => "illumination",
            PerturbKind::Jpeg => "jpeg",
            PerturbKind::Blur => "blur",
            PerturbKind::SaltPepper => "saltpepper",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown perturbation kind {s:?}")))
    }
}

/// A perturbation kind with its parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub level: f64,
}

impl Perturbation {
    /// Blur with sigma 0: leaves the image untouched.
    pub const IDENTITY: Perturbation = Perturbation { kind: PerturbKind::Blur, level: 0.0 };

    pub fn from_ladder(kind: PerturbKind, index: usize) -> Result<Self> {
        kind.ladder()
            .get(index)
            .map(|&level| Perturbation { kind, level })
            .ok_or_else(|| Error::UnsupportedLevel(format!("{kind} has no ladder step {index}")))
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self.kind, PerturbKind::Scale | PerturbKind::Rotate)
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            PerturbKind::Scale => self.level > 0.0 && self.level <= 8.0,
            PerturbKind::Rotate => self.level.abs() <= 180.0,
            PerturbKind::Illumination => self.level > 0.0 && self.level <= 10.0,
            PerturbKind::Jpeg => self.level >= 1.0 && self.level <= 100.0 && self.level.fract() == 0.0,
            PerturbKind::Blur => (0.0..=64.0).contains(&self.level),
            PerturbKind::SaltPepper => (0.0..=1.0).contains(&self.level),
        };
        if ok && self.level.is_finite() {
            Ok(())
        } else {
            Err(Error::UnsupportedLevel(format!("{} level {}", self.kind, self.level)))
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.level)
    }
}

/// Affine map `p -> (a*x + b*y + tx, c*x + d*y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0, c: 0.0, d: 1.0, tx: 0.0, ty: 0.0 };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    pub fn inverse(&self) -> Affine {
        let det = self.a * self.d - self.b * self.c;
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Affine { a, b, c, d, tx: -(a * self.tx + b * self.ty), ty: -(c * self.tx + d * self.ty) }
    }

    /// Bounding box of the four mapped corners.
    pub fn map_rect(&self, r: &Rect) -> Rect {
        let pts = [
            self.apply(r.x, r.y),
            self.apply(r.right(), r.y),
            self.apply(r.x, r.bottom()),
            self.apply(r.right(), r.bottom()),
        ];
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (x, y) in pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Rect::from_corners(x0, y0, x1, y1)
    }
}

/// A perturbed image and the map from its coordinates back to the original frame.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub image: ImagePlane,
    pub to_original: Affine,
    /// Encoded JPEG bytes for the JPEG kind.
    pub encoded: Option<Vec<u8>>,
}

fn to_gray_image(img: &ImagePlane) -> GrayImage {
    GrayImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("sized buffer")
}

fn from_gray_image(img: GrayImage) -> Result<ImagePlane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImagePlane::new(w, h, img.into_raw())
}

fn rotate(img: &ImagePlane, degrees: f64) -> (ImagePlane, Affine) {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    // Perturbed pixel centre -> original coordinates (inverse rotation about the centre).
    let back = Affine { a: c, b: s, c: -s, d: c, tx: cx - c * cx - s * cy, ty: cy + s * cx - c * cy };
    let mut data = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = back.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (fx, fy) = (ox - 0.5, oy - 0.5);
            if fx < -0.5 || fy < -0.5 || fx > w as f64 - 0.5 || fy > h as f64 - 0.5 {
                continue;
            }
            let (x0, y0) = (fx.floor(), fy.floor());
            let (dx, dy) = (fx - x0, fy - y0);
            let sample = |yy: f64, xx: f64| -> f64 {
                let xi = (xx as isize).clamp(0, w as isize - 1) as usize;
                let yi = (yy as isize).clamp(0, h as isize - 1) as usize;
                img.get(yi, xi) as f64
            };
            let v = sample(y0, x0) * (1.0 - dx) * (1.0 - dy)
                + sample(y0, x0 + 1.0) * dx * (1.0 - dy)
                + sample(y0 + 1.0, x0) * (1.0 - dx) * dy
                + sample(y0 + 1.0, x0 + 1.0) * dx * dy;
            data[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    (ImagePlane::new(w, h, data).expect("sized buffer"), back)
}

/// Applies `p`; RNG-bearing kinds draw from `seed`.
pub fn perturb(img: &ImagePlane, p: &Perturbation, seed: u64) -> Result<Perturbed> {
    p.validate()?;
    let plain = |image: ImagePlane| Perturbed { image, to_original: Affine::IDENTITY, encoded: None };
    match p.kind {
        PerturbKind::Scale => {
            let nw = ((img.width() as f64 * p.level).round() as usize).max(1);
            let nh = ((img.height() as f64 * p.level).round() as usize).max(1);
            let out = imageops::resize(&to_gray_image(img), nw as u32, nh as u32, imageops::FilterType::Triangle);
            let to_original = Affine {
                a: img.width() as f64 / nw as f64,
                d: img.height() as f64 / nh as f64,
                ..Affine::IDENTITY
            };
            Ok(Perturbed { image: from_gray_image(out)?, to_original, encoded: None })
        }
        PerturbKind::Rotate => {
            let (image, to_original) = rotate(img, p.level);
            Ok(Perturbed { image, to_original, encoded: None })
        }
        PerturbKind::Illumination => {
            let lut: Vec<u8> = (0..256)
                .map(|v| (255.0 * (v as f64 / 255.0).powf(p.level)).round().clamp(0.0, 255.0) as u8)
                .collect();
            let data = img.data().iter().map(|&v| lut[v as usize]).collect();
            Ok(plain(ImagePlane::new(img.width(), img.height(), data)?))
        }
        PerturbKind::Jpeg => {
            let mut bytes = Vec::new();
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, p.level as u8)
                .encode(img.data(), img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
                .map_err(|e| Error::Image { path: "<jpeg>".into(), source: e })?;
            let image = decode_image(&bytes)?;
            Ok(Perturbed { image, to_original: Affine::IDENTITY, encoded: Some(bytes) })
        }
        PerturbKind::Blur => {
            if p.level == 0.0 {
                return Ok(plain(img.clone()));
            }
            Ok(plain(from_gray_image(imageops::blur(&to_gray_image(img), p.level as f32))?))
        }
        PerturbKind::SaltPepper => {
            let n = img.width() * img.height();
            let count = (p.level * n as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = img.clone();
            let data = out.data_mut();
            for i in sample(&mut rng, n, count) {
                data[i] = if rng.gen_bool(0.5) { 255 } else { 0 };
            }
            Ok(plain(out))
        }
    }
}

/// Greedy one-to-one matching by descending IoU; returns the number of pairs at `thr` or above.
pub fn greedy_matches(a: &[Rect], b: &[Rect], thr: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, ra) in a.iter().enumerate() {
        for (j, rb) in b.iter().enumerate() {
            let v = ra.iou(rb);
            if v >= thr {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut n = 0;
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            n += 1;
        }
    }
    n
}

/// Proposals considered per side when measuring repeatability.
pub const REPEAT_TOP: usize = 1000;
pub const REPEAT_IOU: f64 = 0.5;

/// Repeatability of two proposal sets already expressed in the original frame.
///
/// `visible` is the region of the original frame that the perturbed image shows;
/// boxes not inside both it and the original frame are dropped from either side.
/// The score is matched pairs over the larger side, 1 when both sides are empty.
pub fn repeatability_of(original: &[Rect], perturbed: &[Rect], frame: (f64, f64), visible: &[(f64, f64); 4]) -> f64 {
    let keep = |r: &&Rect| r.contained_in(frame.0, frame.1) && rect_in_quad(r, visible);
    let a: Vec<Rect> = original.iter().filter(keep).take(REPEAT_TOP).copied().collect();
    let b: Vec<Rect> = perturbed.iter().filter(keep).take(REPEAT_TOP).copied().collect();
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    greedy_matches(&a, &b, REPEAT_IOU) as f64 / denom as f64
}

fn rect_in_quad(r: &Rect, quad: &[(f64, f64); 4]) -> bool {
    let corners = [(r.x, r.y), (r.right(), r.y), (r.right(), r.bottom()), (r.x, r.bottom())];
    corners.iter().all(|&p| point_in_convex(p, quad))
}

fn point_in_convex(p: (f64, f64), quad: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b) = (quad[i], quad[(i + 1) % 4]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross.abs() < 1e-6 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Proposes on `img` and on its perturbation, projects back, and scores the overlap.
pub fn repeatability(
    model: &BinarizedModel,
    img: &ImagePlane,
    p: &Perturbation,
    cfg: &ProposerConfig,
    merge: bool,
    seed: u64,
) -> Result<f64> {
    let pert = perturb(img, p, seed)?;
    let original: Vec<Rect> = propose(img, model, cfg, merge).iter().map(|b| b.rect()).collect();
    let back: Vec<Rect> = propose(&pert.image, model, cfg, merge)
        .iter()
        .map(|b| pert.to_original.map_rect(&b.rect()))
        .collect();
    let (pw, ph) = (pert.image.width() as f64, pert.image.height() as f64);
    let t = &pert.to_original;
    let visible = [t.apply(0.0, 0.0), t.apply(pw, 0.0), t.apply(pw, ph), t.apply(0.0, ph)];
    Ok(repeatability_of(&original, &back, (img.width() as f64, img.height() as f64), &visible))
}

/// Per-image wall time from file read to finished proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub per_image: Vec<f64>,
    pub mean_seconds: f64,
}

/// Times reading and proposing each image in turn on the calling thread.
pub fn time_pipeline(model: &BinarizedModel, images: &[&Path], cfg: &ProposerConfig, merge: bool) -> Result<Timing> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("timing needs at least one image".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut per_image = Vec::with_capacity(images.len());
    for path in images {
        let secs = pool.install(|| -> Result<f64> {
            let start = Instant::now();
            let img = read_image(path)?;
            let boxes = propose(&img, model, cfg, merge);
            std::hint::black_box(&boxes);
            Ok(start.elapsed().as_secs_f64())
        })?;
        per_image.push(secs);
    }
    let mean_seconds = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(Timing { per_image, mean_seconds })
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truth: usize,
    pub iou_threshold: f64,
    pub budget: usize,
    pub detection_rate: f64,
    /// Recall at additional IoU thresholds.
    pub recall_at: BTreeMap<String, f64>,
    pub mabo: f64,
    pub per_class_abo: BTreeMap<String, f64>,
    pub mean_seconds: Option<f64>,
    pub proposals_mean: f64,
    pub proposals_min: usize,
    pub proposals_max: usize,
}

impl EvalReport {
    pub fn build(
        proposals: &[Vec<Rect>],
        gt: &[Vec<LabeledRect>],
        iou_threshold: f64,
        budget: usize,
        extra_thresholds: &[f64],
        mean_seconds: Option<f64>,
    ) -> Result<Self> {
        let plain: Vec<Vec<Rect>> = gt.iter().map(|g| g.iter().map(|l| l.rect).collect()).collect();
        let detection_rate = detection_rate(proposals, &plain, iou_threshold, budget)?;
        let mut recall_at = BTreeMap::new();
        for &t in extra_thresholds {
            recall_at.insert(format!("{t:.2}"), crate::evalkit::detection_rate(proposals, &plain, t, budget)?);
        }
        let per_class_abo = abo_per_class(proposals, gt, budget)?;
        let mabo = per_class_abo.values().sum::<f64>() / per_class_abo.len() as f64;
        let counts: Vec<usize> = proposals.iter().map(|p| p.len().min(budget)).collect();
        Ok(EvalReport {
            images: gt.len(),
            ground_truth: plain.iter().map(Vec::len).sum(),
            iou_threshold,
            budget,
            detection_rate,
            recall_at,
            mabo,
            per_class_abo,
            mean_seconds,
            proposals_mean: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
            proposals_min: counts.iter().copied().min().unwrap_or(0),
            proposals_max: counts.iter().copied().max().unwrap_or(0),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("images,{}\n", self.images));
        s.push_str(&format!("ground_truth,{}\n", self.ground_truth));
        s.push_str(&format!("iou_threshold,{}\n", self.iou_threshold));
        s.push_str(&format!("budget,{}\n", self.budget));
        s.push_str(&format!("detection_rate,{}\n", self.detection_rate));
        for (k, v) in &self.recall_at {
            s.push_str(&format!("recall@{k},{v}\n"));
        }
        s.push_str(&format!("mabo,{}\n", self.mabo));
        for (k, v) in &self.per_class_abo {
            s.push_str(&format!("abo:{k},{v}\n"));
        }
        if let Some(t) = self.mean_seconds {
            s.push_str(&format!("mean_seconds,{t}\n"));
        }
        s.push_str(&format!("proposals_mean,{}\n", self.proposals_mean));
        s.push_str(&format!("proposals_min,{}\n", self.proposals_min));
        s.push_str(&format!("proposals_max,{}\n", self.proposals_max));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(x: f64, y: f64, w: f64, h: f64) -> Rect {
        Rect::new(x, y, w, h)
    }

    fn lr(rect: Rect, label: &str) -> LabeledRect {
        LabeledRect { rect, label: label.into() }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&r(0.0, 0.0, 2.0, 2.0), &r(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&r(0.0, 0.0, 2.0, 2.0), &r(3.0, 3.0, 2.0, 2.0)), 0.0);
        assert!((iou(&r(0.0, 0.0, 2.0, 2.0), &r(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn detection_rate_examples() {
        let gt = vec![vec![r(0.0, 0.0, 10.0, 10.0), r(50.0, 50.0, 10.0, 10.0)]];
        assert_eq!(detection_rate(&gt, &gt, 0.5, 100).unwrap(), 1.0);
        assert_eq!(detection_rate(&[vec![r(200.0, 200.0, 5.0, 5.0)]], &gt, 0.5, 100).unwrap(), 0.0);
        // IoU 0.6 for the first box (10x10 against 10x6) and 0.4 for the second (10x4).
        let props = vec![vec![r(0.0, 0.0, 10.0, 6.0), r(50.0, 50.0, 10.0, 4.0)]];
        assert!((props[0][0].iou(&gt[0][0]) - 0.6).abs() < 1e-12);
        assert!((props[0][1].iou(&gt[0][1]) - 0.4).abs() < 1e-12);
        assert_eq!(detection_rate(&props, &gt, 0.5, 100).unwrap(), 0.5);
        assert!(matches!(detection_rate(&props, &[vec![]], 0.5, 10), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn mabo_examples() {
        let g = r(0.0, 0.0, 2.0, 2.0);
        assert_eq!(mabo(&[vec![g]], &[vec![lr(g, "a")]], 10).unwrap(), 1.0);
        let m = mabo(&[vec![r(1.0, 1.0, 2.0, 2.0)]], &[vec![lr(g, "a")]], 10).unwrap();
        assert!((m - 1.0 / 7.0).abs() < 1e-15);
        // Class a: 1.0 and 0.6 -> 0.8; class b: 0.6.
        let a1 = r(0.0, 0.0, 10.0, 10.0);
        let a2 = r(100.0, 0.0, 10.0, 10.0);
        let b1 = r(200.0, 0.0, 10.0, 10.0);
        let props = vec![vec![a1, r(100.0, 0.0, 10.0, 6.0), r(200.0, 0.0, 6.0, 10.0)]];
        let gt = vec![vec![lr(a1, "a"), lr(a2, "a"), lr(b1, "b")]];
        assert!((mabo(&props, &gt, 10).unwrap() - 0.7).abs() < 1e-12);
        assert!(mabo(&props, &[vec![]], 10).is_err());
    }

    #[test]
    fn ladders_and_parsing() {
        assert_eq!(Perturbation::from_ladder(PerturbKind::Jpeg, 3).unwrap().level, 5.0);
        assert!(Perturbation::from_ladder(PerturbKind::Rotate, 3).is_err());
        assert_eq!("saltpepper".parse::<PerturbKind>().unwrap(), PerturbKind::SaltPepper);
        assert!("warp".parse::<PerturbKind>().is_err());
        let img = ImagePlane::filled(8, 8, 3).unwrap();
        let bad = Perturbation { kind: PerturbKind::Jpeg, level: 0.0 };
        assert!(matches!(perturb(&img, &bad, 0), Err(Error::UnsupportedLevel(_))));
    }

    fn textured(w: usize, h: usize) -> ImagePlane {
        ImagePlane::from_fn(w, h, |y, x| ((x * 37 + y * 11 + (x * y) % 7) % 256) as u8).unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let img = textured(40, 30);
        let id = perturb(&img, &Perturbation::IDENTITY, 0).unwrap();
        assert_eq!(id.image, img);
        assert_eq!(id.to_original, Affine::IDENTITY);

        let up = perturb(&img, &Perturbation { kind: PerturbKind::Scale, level: 2.0 }, 0).unwrap();
        assert_eq!((up.image.width(), up.image.height()), (80, 60));
        assert_eq!(up.to_original.apply(10.0, 20.0), (5.0, 10.0));

        let sp = perturb(&img, &Perturbation { kind: PerturbKind::SaltPepper, level: 0.05 }, 9).unwrap();
        let flat = ImagePlane::filled(40, 30, 100).unwrap();
        let spf = perturb(&flat, &Perturbation { kind: PerturbKind::SaltPepper, level: 0.05 }, 9).unwrap();
        assert_eq!(spf.image.data().iter().filter(|&&v| v != 100).count(), 60);
        assert!(spf.image.data().iter().all(|&v| v == 100 || v == 0 || v == 255));
        assert_eq!(perturb(&img, &Perturbation { kind: PerturbKind::SaltPepper, level: 0.05 }, 9).unwrap().image, sp.image);

        let dark = perturb(&img, &Perturbation { kind: PerturbKind::Illumination, level: 2.0 }, 0).unwrap();
        assert!(dark.image.data().iter().zip(img.data()).all(|(a, b)| a <= b));

        let jpeg = perturb(&img, &Perturbation { kind: PerturbKind::Jpeg, level: 5.0 }, 0).unwrap();
        assert_eq!((jpeg.image.width(), jpeg.image.height()), (40, 30));
        assert!(jpeg.encoded.as_ref().unwrap().starts_with(&[0xff, 0xd8]));

        let blur = perturb(&img, &Perturbation { kind: PerturbKind::Blur, level: 2.0 }, 0).unwrap();
        assert_ne!(blur.image, img);

        let rot = perturb(&img, &Perturbation { kind: PerturbKind::Rotate, level: 10.0 }, 0).unwrap();
        assert_eq!((rot.image.width(), rot.image.height()), (40, 30));
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let img = textured(21, 17);
        let rot = perturb(&img, &Perturbation { kind: PerturbKind::Rotate, level: 0.0 }, 0).unwrap();
        assert_eq!(rot.image, img);
    }

    #[test]
    fn repeatability_of_sets() {
        let a = vec![r(0.0, 0.0, 10.0, 10.0), r(20.0, 20.0, 10.0, 10.0)];
        let frame = (100.0, 100.0);
        let all = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)];
        assert_eq!(repeatability_of(&a, &a, frame, &all), 1.0);
        assert_eq!(repeatability_of(&a, &[], frame, &all), 0.0);
        assert_eq!(repeatability_of(&a, &a[..1], frame, &all), 0.5);
        let left = [(0.0, 0.0), (15.0, 0.0), (15.0, 100.0), (0.0, 100.0)];
        assert_eq!(repeatability_of(&a, &a[..1], frame, &left), 1.0);
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let a = vec![r(0.0, 0.0, 10.0, 10.0), r(0.0, 0.0, 10.0, 10.0)];
        let b = vec![r(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(greedy_matches(&a, &b, 0.5), 1);
    }

    #[test]
    fn report_serialization() {
        let g = r(0.0, 0.0, 10.0, 10.0);
        let rep = EvalReport::build(&[vec![g]], &[vec![lr(g, "a")]], 0.5, 100, &[0.7], Some(0.001)).unwrap();
        assert_eq!(rep.detection_rate, 1.0);
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(v["mabo"], 1.0);
        assert!(rep.to_csv().contains("detection_rate,1\n"));
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0), b in (0.0f64..50.0, 0.0f64..50.0, 0.5f64..40.0, 0.5f64..40.0)) {
            let (ra, rb) = (r(a.0, a.1, a.2, a.3), r(b.0, b.1, b.2, b.3));
            let v = iou(&ra, &rb);
            prop_assert_eq!(v, iou(&rb, &ra));
            prop_assert!((0.0..=1.0).contains(&v));
            if ra == rb { prop_assert_eq!(v, 1.0); }
            if v == 1.0 { prop_assert!((ra.x - rb.x).abs() < 1e-9 && (ra.w - rb.w).abs() < 1e-9); }
        }

        #[test]
        fn metrics_monotone_in_budget(
            props in proptest::collection::vec((0.0f64..80.0, 0.0f64..80.0, 1.0f64..40.0, 1.0f64..40.0), 0..30),
            gts in proptest::collection::vec((0.0f64..80.0, 0.0f64..80.0, 1.0f64..40.0, 1.0f64..40.0, 0usize..3), 1..6),
        ) {
            let p = vec![props.iter().map(|t| r(t.0, t.1, t.2, t.3)).collect::<Vec<_>>()];
            let g: Vec<Vec<LabeledRect>> = vec![gts.iter().map(|t| lr(r(t.0, t.1, t.2, t.3), ["a", "b", "c"][t.4])).collect()];
            let plain: Vec<Vec<Rect>> = vec![g[0].iter().map(|l| l.rect).collect()];
            let mut prev = (0.0, 0.0);
            for budget in 0..=props.len() {
                let dr = detection_rate(&p, &plain, 0.5, budget).unwrap();
                let m = mabo(&p, &g, budget).unwrap();
                prop_assert!(dr >= prev.0 && m >= prev.1);
                prop_assert!((0.0..=1.0).contains(&dr) && (0.0..=1.0).contains(&m));
                prev = (dr, m);
            }
        }

        #[test]
        fn geometric_maps_round_trip(deg in -30.0f64..30.0, x in 0.0f64..60.0, y in 0.0f64..40.0) {
            let img = textured(64, 48);
            let p = Perturbation { kind: PerturbKind::Rotate, level: deg };
            let t = perturb(&img, &p, 0).unwrap().to_original;
            let (fx, fy) = t.inverse().apply(x, y);
            let (bx, by) = t.apply(fx, fy);
            prop_assert!((bx - x).abs() < 0.5 && (by - y).abs() < 0.5);
            for level in [0.5, 0.707, 1.414, 2.0] {
                let s = perturb(&img, &Perturbation { kind: PerturbKind::Scale, level }, 0).unwrap().to_original;
                let (fx, fy) = s.inverse().apply(x, y);
                let (bx, by) = s.apply(fx, fy);
                prop_assert!((bx - x).abs() < 0.5 && (by - y).abs() < 0.5);
            }
        }
    }
}
