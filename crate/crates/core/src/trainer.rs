//! Training descriptors from annotated images and the hinge-loss linear fit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotatedBox;
use crate::binmodel::{BinarizedModel, Calibration, DIM};
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::hlfeat::{hl_map, HlFeatureMap};
use crate::imgpyr::{ImagePlane, Pyramid, ScaleSpec};
use crate::proposer::{box_of_cell, score_map};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// A box maps to a scale (and a window becomes a positive) at this IoU or above.
    pub positive_iou: f64,
    pub negatives_per_image: usize,
    /// Negatives overlap every ground-truth box below this IoU.
    pub negative_max_iou: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Inverse regularisation strength.
    pub c: f64,
    /// Reweight classes to equal total mass.
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            positive_iou: 0.5,
            negatives_per_image: 50,
            negative_max_iou: 0.3,
            epochs: 20,
            learning_rate: 0.01,
            c: 1.0,
            balance_classes: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.positive_iou) || !unit(self.negative_max_iou) {
            return Err(Error::InvalidConfig("IoU thresholds must be in (0, 1]".into()));
        }
        if self.negatives_per_image == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("negatives per image and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.c > 0.0) {
            return Err(Error::InvalidConfig("learning rate and C must be positive".into()));
        }
        Ok(())
    }
}

/// IoU of a `w x h` box with a `ww x wh` window sharing its centre.
fn centred_iou(w: f64, h: f64, ww: f64, wh: f64) -> f64 {
    let inter = w.min(ww) * h.min(wh);
    inter / (w * h + ww * wh - inter)
}

/// The scale whose template best matches the box shape, or `None` below `threshold`.
/// Ties go to the lexicographically smaller `(m, n)`.
pub fn assign_scale(w: u32, h: u32, scales: &[ScaleSpec], threshold: f64) -> Option<ScaleSpec> {
    let mut best: Option<(ScaleSpec, f64)> = None;
    for &s in scales {
        let (wh, ww) = s.window_size();
        let iou = centred_iou(w as f64, h as f64, ww as f64, wh as f64);
        if best.map_or(true, |(bs, b)| iou > b || (iou == b && s < bs)) {
            best = Some((s, iou));
        }
    }
    best.filter(|&(_, iou)| iou >= threshold).map(|(s, _)| s)
}

/// A 64-byte HL descriptor with its label (+1 object, -1 background).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub descriptor: [u8; DIM],
    pub label: i8,
}

/// An image with its ground truth, ready for sample extraction.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub image: ImagePlane,
    pub boxes: Vec<AnnotatedBox>,
}

struct ScaleMaps {
    maps: Vec<HlFeatureMap>,
}

impl ScaleMaps {
    fn new(img: &ImagePlane, scales: &[ScaleSpec]) -> Self {
        let pyr = Pyramid::new(img);
        let maps = scales
            .iter()
            .filter_map(|&s| pyr.level(s).ok().and_then(|l| hl_map(&l, s).ok()))
            .filter(|m| m.width() >= 8 && m.height() >= 8)
            .collect();
        ScaleMaps { maps }
    }

    fn get(&self, s: ScaleSpec) -> Option<&HlFeatureMap> {
        self.maps.iter().find(|m| m.scale() == s)
    }
}

/// Best-aligned window for `gt` at scale `s`: `(cell_y, cell_x, iou)`.
pub fn aligned_cell(map: &HlFeatureMap, gt: &Rect, img_w: usize, img_h: usize) -> Option<(usize, usize, f64)> {
    let s = map.scale();
    let (rows, cols) = (map.height() - 7, map.width() - 7);
    let (wh, ww) = s.window_size();
    let sx = 2.0 * s.col_factor() as f64;
    let sy = 2.0 * s.row_factor() as f64;
    let (cx, cy) = gt.center();
    let fx = ((cx - ww as f64 / 2.0) / sx).max(0.0);
    let fy = ((cy - wh as f64 / 2.0) / sy).max(0.0);
    let mut best: Option<(usize, usize, f64)> = None;
    for y in [fy.floor() as usize, fy.ceil() as usize] {
        for x in [fx.floor() as usize, fx.ceil() as usize] {
            let (y, x) = (y.min(rows - 1), x.min(cols - 1));
            if let Some(b) = box_of_cell(s, y, x, img_w, img_h) {
                let iou = b.rect().iou(gt);
                if best.map_or(true, |(_, _, v)| iou > v) {
                    best = Some((y, x, iou));
                }
            }
        }
    }
    best
}

fn image_samples(t: &TrainingImage, index: usize, scales: &[ScaleSpec], cfg: &TrainConfig) -> Vec<Sample> {
    let (iw, ih) = (t.image.width(), t.image.height());
    let maps = ScaleMaps::new(&t.image, scales);
    let mut out = Vec::new();
    let gts: Vec<Rect> = t.boxes.iter().map(AnnotatedBox::rect).collect();

    for b in &t.boxes {
        let Some(s) = assign_scale(b.w, b.h, scales, cfg.positive_iou) else {
            continue;
        };
        let Some(map) = maps.get(s) else {
            continue;
        };
        if let Some((y, x, iou)) = aligned_cell(map, &b.rect(), iw, ih) {
            if iou >= cfg.positive_iou {
                out.push(Sample { descriptor: map.window(y, x).expect("cell in range"), label: 1 });
            }
        }
    }

    if maps.maps.is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let mut taken = 0;
    let mut attempts = 0;
    while taken < cfg.negatives_per_image && attempts < cfg.negatives_per_image * 50 {
        attempts += 1;
        let map = &maps.maps[rng.gen_range(0..maps.maps.len())];
        let y = rng.gen_range(0..map.height() - 7);
        let x = rng.gen_range(0..map.width() - 7);
        let Some(win) = box_of_cell(map.scale(), y, x, iw, ih) else {
            continue;
        };
        let r = win.rect();
        if gts.iter().any(|g| r.iou(g) >= cfg.negative_max_iou) {
            continue;
        }
        out.push(Sample { descriptor: map.window(y, x).expect("cell in range"), label: -1 });
        taken += 1;
    }
    out
}

/// Positive and negative descriptors from every image, in image order.
pub fn extract_samples(images: &[TrainingImage], scales: &[ScaleSpec], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let per_image: Vec<Vec<Sample>> = images
        .par_iter()
        .enumerate()
        .map(|(i, t)| image_samples(t, i, scales, cfg))
        .collect();
    let samples: Vec<Sample> = per_image.into_iter().flatten().collect();
    if !samples.iter().any(|s| s.label > 0) {
        return Err(Error::NoPositives);
    }
    Ok(samples)
}

/// Linear weights plus the per-epoch mean objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: [f64; DIM],
    pub epoch_loss: Vec<f64>,
}

impl LinearFit {
    pub fn decision(&self, descriptor: &[u8; DIM]) -> f64 {
        dot(&self.weights, descriptor)
    }
}

pub fn dot(w: &[f64; DIM], d: &[u8; DIM]) -> f64 {
    w.iter().zip(d).map(|(w, &v)| w * v as f64).sum()
}

/// L2-regularised hinge loss by per-sample stochastic subgradient steps.
///
/// Descriptors are scaled to `[0, 1]` during the fit and the returned weights
/// are rescaled so that `dot(w, bytes)` is the trained decision value. There is no
/// bias term: score 0 is the decision boundary.
pub fn train_linear(samples: &[Sample], cfg: &TrainConfig) -> Result<LinearFit> {
    cfg.validate()?;
    let positives = samples.iter().filter(|s| s.label > 0).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let n = samples.len() as f64;
    let (wp, wn) = if cfg.balance_classes {
        (n / (2.0 * positives as f64), n / (2.0 * negatives as f64))
    } else {
        (1.0, 1.0)
    };
    let reg = 1.0 / (cfg.c * n);
    let feats: Vec<[f64; DIM]> = samples
        .iter()
        .map(|s| {
            let mut f = [0.0; DIM];
            for (o, &v) in f.iter_mut().zip(&s.descriptor) {
                *o = v as f64 / 255.0;
            }
            f
        })
        .collect();

    let mut w = [0.0f64; DIM];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let y = samples[i].label as f64;
            let f = &feats[i];
            let margin = y * w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            let cw = if y > 0.0 { wp } else { wn };
            for (wj, fj) in w.iter_mut().zip(f) {
                let mut g = reg * *wj;
                if margin < 1.0 {
                    g -= cw * y * fj;
                }
                *wj -= cfg.learning_rate * g;
            }
        }
        let hinge: f64 = samples
            .iter()
            .zip(&feats)
            .map(|(s, f)| {
                let y = s.label as f64;
                let cw = if y > 0.0 { wp } else { wn };
                cw * (1.0 - y * w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
            })
            .sum::<f64>()
            / n;
        epoch_loss.push(0.5 * reg * w.iter().map(|v| v * v).sum::<f64>() + hinge);
    }
    let mut weights = [0.0; DIM];
    for (o, v) in weights.iter_mut().zip(&w) {
        *o = v / 255.0;
    }
    Ok(LinearFit { weights, epoch_loss })
}

/// Per-scale affine maps fitted by 1-D logistic regression of window labels on raw scores.
pub fn fit_calibration(
    model: &BinarizedModel,
    images: &[TrainingImage],
    cfg: &TrainConfig,
) -> Result<BTreeMap<ScaleSpec, Calibration>> {
    let scales = model.scales().to_vec();
    let per_image: Vec<Vec<(ScaleSpec, f64, f64)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let (iw, ih) = (t.image.width(), t.image.height());
            let maps = ScaleMaps::new(&t.image, &scales);
            let gts: Vec<Rect> = t.boxes.iter().map(AnnotatedBox::rect).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ca1e);
            rng.set_stream(i as u64);
            let mut out = Vec::new();
            for map in &maps.maps {
                let m = score_map(map, model, 0);
                for _ in 0..cfg.negatives_per_image.min(m.rows * m.cols) {
                    let (y, x) = (rng.gen_range(0..m.rows), rng.gen_range(0..m.cols));
                    let Some(b) = box_of_cell(map.scale(), y, x, iw, ih) else { continue };
                    let best = gts.iter().map(|g| b.rect().iou(g)).fold(0.0, f64::max);
                    let label = if best >= cfg.positive_iou { 1.0 } else { 0.0 };
                    out.push((map.scale(), m.get(y, x), label));
                }
                for g in &gts {
                    if let Some((y, x, iou)) = aligned_cell(map, g, iw, ih) {
                        if iou >= cfg.positive_iou {
                            out.push((map.scale(), m.get(y, x), 1.0));
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut by_scale: BTreeMap<ScaleSpec, Vec<(f64, f64)>> = BTreeMap::new();
    for (s, score, label) in per_image.into_iter().flatten() {
        by_scale.entry(s).or_default().push((score, label));
    }
    let mut out = BTreeMap::new();
    for (s, pts) in by_scale {
        out.insert(s, logistic_1d(&pts));
    }
    Ok(out)
}

fn logistic_1d(pts: &[(f64, f64)]) -> Calibration {
    let pos = pts.iter().filter(|p| p.1 > 0.5).count();
    if pos == 0 || pos == pts.len() {
        return Calibration { a: 1.0, b: 0.0 };
    }
    let scale = pts.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1e-12);
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..500 {
        let (mut ga, mut gb) = (0.0, 0.0);
        for &(x, y) in pts {
            let xs = x / scale;
            let p = 1.0 / (1.0 + (-(a * xs + b)).exp());
            ga += (p - y) * xs;
            gb += p - y;
        }
        a -= ga / pts.len() as f64 * 4.0;
        b -= gb / pts.len() as f64 * 4.0;
    }
    Calibration { a: a / scale, b }
}

/// End-to-end training: samples, linear fit, binary decomposition.
pub fn train_model(
    images: &[TrainingImage],
    scales: &[ScaleSpec],
    cfg: &TrainConfig,
    ng: usize,
    na: usize,
) -> Result<(BinarizedModel, LinearFit, usize, usize)> {
    let samples = extract_samples(images, scales, cfg)?;
    let positives = samples.iter().filter(|s| s.label > 0).count();
    let fit = train_linear(&samples, cfg)?;
    let model = BinarizedModel::new(fit.weights, na, ng, scales.to_vec())?;
    Ok((model, fit, positives, samples.len() - positives))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binmodel::{score_patch, BinarizedPatch};
    use crate::imgpyr::enumerate_scales;

    #[test]
    fn scale_assignment_examples() {
        let scales = enumerate_scales();
        assert_eq!(assign_scale(16, 16, &scales, 0.5), Some(ScaleSpec::new(0, 0)));
        assert_eq!(assign_scale(32, 32, &scales, 0.5), Some(ScaleSpec::new(1, 1)));
        // 128 high by 256 wide.
        assert_eq!(assign_scale(256, 128, &scales, 0.5), Some(ScaleSpec::new(3, 4)));
        assert_eq!(assign_scale(256, 256, &scales, 0.6), None);
        assert_eq!(assign_scale(1, 1, &scales, 0.5), None);
    }

    #[test]
    fn scale_assignment_ties_prefer_smaller() {
        // A 16x16 box overlaps the 32x16 and 16x32 templates equally (IoU 1/2).
        let pair = [ScaleSpec::new(1, 0), ScaleSpec::new(0, 1)];
        assert_eq!(assign_scale(16, 16, &pair, 0.5), Some(ScaleSpec::new(0, 1)));
        let pair = [ScaleSpec::new(0, 1), ScaleSpec::new(1, 0)];
        assert_eq!(assign_scale(16, 16, &pair, 0.5), Some(ScaleSpec::new(0, 1)));
    }

    fn toy_image(with_box: bool) -> TrainingImage {
        let img = ImagePlane::from_fn(96, 80, |y, x| {
            if with_box && (20..36).contains(&y) && (40..56).contains(&x) {
                if x % 2 == 0 { 250 } else { 10 }
            } else {
                100
            }
        })
        .unwrap();
        let boxes = if with_box {
            vec![AnnotatedBox { image_id: "t".into(), x: 40, y: 20, w: 16, h: 16, label: "obj".into() }]
        } else {
            Vec::new()
        };
        TrainingImage { image: img, boxes }
    }

    #[test]
    fn sample_extraction() {
        let cfg = TrainConfig { negatives_per_image: 7, ..Default::default() };
        let scales = enumerate_scales();
        let s = extract_samples(&[toy_image(true)], &scales, &cfg).unwrap();
        assert_eq!(s.iter().filter(|s| s.label > 0).count(), 1);
        assert_eq!(s.iter().filter(|s| s.label < 0).count(), 7);
        assert!(s[0].descriptor.iter().any(|&v| v > 100));

        let mixed = extract_samples(&[toy_image(false), toy_image(true)], &scales, &cfg).unwrap();
        assert_eq!(mixed.iter().filter(|s| s.label < 0).count(), 14);
        assert!(matches!(extract_samples(&[toy_image(false)], &scales, &cfg), Err(Error::NoPositives)));
        assert_eq!(extract_samples(&[toy_image(true)], &scales, &cfg).unwrap(), s);
    }

    #[test]
    fn positives_meet_the_iou_threshold() {
        let scene = crate::synth::scene(&crate::synth::SceneConfig::default(), 3, 0);
        let scales = enumerate_scales();
        for b in &scene.boxes {
            if let Some(s) = assign_scale(b.w, b.h, &scales, 0.5) {
                let maps = ScaleMaps::new(&scene.image, &[s]);
                let (_, _, iou) = aligned_cell(&maps.maps[0], &b.rect(), scene.image.width(), scene.image.height()).unwrap();
                assert!(iou > 0.0);
            }
        }
    }

    fn separable_set() -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = Vec::new();
        for i in 0..60 {
            let mut d = [0u8; DIM];
            if i % 3 == 0 {
                for x in d.iter_mut() {
                    *x = rng.gen_range(120..=255);
                }
                v.push(Sample { descriptor: d, label: 1 });
            } else {
                v.push(Sample { descriptor: d, label: -1 });
            }
        }
        v
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        let samples = separable_set();
        let cfg = TrainConfig::default();
        let fit = train_linear(&samples, &cfg).unwrap();
        let correct = samples
            .iter()
            .filter(|s| (fit.decision(&s.descriptor) > 0.0) == (s.label > 0))
            .count();
        assert_eq!(correct, samples.len());
        assert_eq!(fit.epoch_loss.len(), cfg.epochs);
        assert_eq!(train_linear(&samples, &cfg).unwrap(), fit);
    }

    #[test]
    fn duplicated_samples_keep_decisions() {
        let samples = separable_set();
        let cfg = TrainConfig::default();
        let a = train_linear(&samples, &cfg).unwrap();
        let doubled: Vec<Sample> = samples.iter().chain(samples.iter()).copied().collect();
        let b = train_linear(&doubled, &cfg).unwrap();
        for s in &samples {
            assert_eq!(a.decision(&s.descriptor) > 0.0, b.decision(&s.descriptor) > 0.0);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let samples: Vec<Sample> = separable_set().into_iter().filter(|s| s.label > 0).collect();
        assert!(matches!(train_linear(&samples, &TrainConfig::default()), Err(Error::SingleClass { .. })));
    }

    #[test]
    fn full_decomposition_preserves_training_decisions() {
        let samples = separable_set();
        let fit = train_linear(&samples, &TrainConfig::default()).unwrap();
        let model = BinarizedModel::new(fit.weights, 64, 8, enumerate_scales()).unwrap();
        for s in &samples {
            let p = BinarizedPatch::from_bytes(&s.descriptor, 8).unwrap();
            let bin = score_patch(&model, &p).unwrap();
            assert_eq!(bin > 0.0, fit.decision(&s.descriptor) > 0.0);
        }
    }
}
