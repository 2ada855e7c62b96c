//! Sliding-window scoring over every pyramid scale, background filtering, NMS and
//! the end-to-end proposal pipeline.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binmodel::{score_planes, BinarizedModel, MAX_PLANES};
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::hlfeat::{hl_map, HlFeatureMap};
use crate::imgpyr::{downsample, ImagePlane, Pyramid, ScaleSpec};
use crate::merger::{MergeConfig, Merger};

/// Classifier scores of every 8x8 window at one scale; filtered cells hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scale: ScaleSpec,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn empty(scale: ScaleSpec) -> Self {
        ScoreMatrix { scale, rows: 0, cols: 0, scores: Vec::new() }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.cols + x]
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// A proposal in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
    pub scale: ScaleSpec,
}

impl ScoredBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }

    pub fn iou(&self, other: &ScoredBox) -> f64 {
        self.rect().iou(&other.rect())
    }
}

/// Score descending; ties by scale, then `y`, then `x`.
pub fn rank_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.scale.cmp(&b.scale))
        .then_with(|| a.y.cmp(&b.y))
        .then_with(|| a.x.cmp(&b.x))
        .then_with(|| a.h.cmp(&b.h))
        .then_with(|| a.w.cmp(&b.w))
}

/// Integer key pair with the same order as `rank_order`, when every field fits.
fn packed_rank(b: &ScoredBox) -> Option<(u64, u64)> {
    const LIM: u32 = 1 << 14;
    if b.x >= LIM || b.y >= LIM || b.w >= LIM || b.h >= LIM || b.scale.m >= 8 || b.scale.n >= 8 || !b.score.is_finite() {
        return None;
    }
    let bits = (b.score + 0.0).to_bits();
    let ascending = if bits >> 63 == 1 { !bits } else { bits | 1 << 63 };
    let tie = (b.scale.m as u64) << 59
        | (b.scale.n as u64) << 56
        | (b.y as u64) << 42
        | (b.x as u64) << 28
        | (b.h as u64) << 14
        | b.w as u64;
    Some((!ascending, tie))
}

/// Sorts into `rank_order`.
pub fn sort_ranked(boxes: &mut Vec<ScoredBox>) {
    let mut keys: Vec<(u64, u64, u32)> = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        match packed_rank(b) {
            Some((a, t)) if i < u32::MAX as usize => keys.push((a, t, i as u32)),
            _ => {
                boxes.sort_by(rank_order);
                return;
            }
        }
    }
    keys.sort();
    *boxes = keys.iter().map(|k| boxes[k.2 as usize]).collect();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    /// Cells scoring below this are background (T_c).
    pub score_threshold: f64,
    /// Windows whose largest HL value is below this are skipped (T_mval).
    pub min_window_max: u8,
    /// A box is suppressed when its IoU with a kept box exceeds this.
    pub nms_threshold: f64,
    /// Most boxes kept per scale by NMS.
    pub per_scale_cap: usize,
    /// Most proposals returned per image.
    pub budget: usize,
    pub merge: MergeConfig,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            score_threshold: 0.0,
            min_window_max: 8,
            nms_threshold: 0.875,
            per_scale_cap: 1100,
            budget: 10_000,
            merge: MergeConfig::default(),
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.score_threshold.is_finite() {
            return Err(Error::InvalidConfig("score threshold must be finite".into()));
        }
        if !self.nms_threshold.is_finite() {
            return Err(Error::InvalidConfig("nms threshold must be finite".into()));
        }
        if self.per_scale_cap == 0 || self.budget == 0 {
            return Err(Error::InvalidConfig("per-scale cap and budget must be at least 1".into()));
        }
        self.merge.validate()
    }
}

/// Raw score matrix of one scale: downsample, HL map, then every window.
pub fn score_scale(img: &ImagePlane, s: ScaleSpec, model: &BinarizedModel, min_window_max: u8) -> ScoreMatrix {
    match downsample(img, s) {
        Ok(level) => score_level(&level, s, model, min_window_max),
        Err(_) => ScoreMatrix::empty(s),
    }
}

fn score_level(level: &ImagePlane, s: ScaleSpec, model: &BinarizedModel, min_window_max: u8) -> ScoreMatrix {
    match hl_map(level, s) {
        Ok(map) => score_map(&map, model, min_window_max),
        Err(_) => ScoreMatrix::empty(s),
    }
}

/// Scores every 8x8 window of `map`.
///
/// Bit planes are assembled incrementally: each plane keeps one byte per row
/// window (bit `c` = column `x + c`), and the 64-bit word for a window is shifted
/// down by one row as the window moves.
pub fn score_map(map: &HlFeatureMap, model: &BinarizedModel, min_window_max: u8) -> ScoreMatrix {
    let (w, h) = (map.width(), map.height());
    if w < 8 || h < 8 {
        return ScoreMatrix::empty(map.scale());
    }
    let (rows, cols) = (h - 7, w - 7);
    let ng = model.ng();
    let basis = model.basis();

    // Per-row sliding maxima and bit-plane bytes over 8 columns.
    let mut row_max = vec![0u8; h * cols];
    let mut row_bits = vec![0u8; ng * h * cols];
    for y in 0..h {
        let src = map.row(y);
        for x in 0..cols {
            row_max[y * cols + x] = src[x..x + 8].iter().copied().max().unwrap_or(0);
        }
        for k in 0..ng {
            let shift = 7 - k;
            let dst = &mut row_bits[(k * h + y) * cols..(k * h + y + 1) * cols];
            let mut byte = 0u8;
            for (c, &v) in src[..7].iter().enumerate() {
                byte |= ((v >> shift) & 1) << c;
            }
            for x in 0..cols {
                byte = (byte & 0x7f) | (((src[x + 7] >> shift) & 1) << 7);
                dst[x] = byte;
                byte >>= 1;
            }
        }
    }

    let mut words = vec![0u64; ng * cols];
    for k in 0..ng {
        for r in 0..7 {
            let src = &row_bits[(k * h + r) * cols..(k * h + r + 1) * cols];
            for (word, &b) in words[k * cols..(k + 1) * cols].iter_mut().zip(src) {
                *word = (*word >> 8) | ((b as u64) << 56);
            }
        }
    }

    let mut scores = vec![f64::NEG_INFINITY; rows * cols];
    let mut planes = [0u64; MAX_PLANES];
    for y in 0..rows {
        for k in 0..ng {
            let src = &row_bits[(k * h + y + 7) * cols..(k * h + y + 8) * cols];
            for (word, &b) in words[k * cols..(k + 1) * cols].iter_mut().zip(src) {
                *word = (*word >> 8) | ((b as u64) << 56);
            }
        }
        for x in 0..cols {
            let mut mx = 0u8;
            for r in 0..8 {
                mx = mx.max(row_max[(y + r) * cols + x]);
            }
            if mx < min_window_max {
                continue;
            }
            for (k, p) in planes.iter_mut().enumerate().take(ng) {
                *p = words[k * cols + x];
            }
            scores[y * cols + x] = score_planes(basis, &planes[..ng]);
        }
    }
    ScoreMatrix { scale: map.scale(), rows, cols, scores }
}

/// Original-image box of feature cell `(y, x)` at scale `s`, clipped to the image.
///
/// The cell's window covers downsampled pixels `2y..2y+16` by `2x..2x+16`.
/// Returns `None` only when the window lies entirely outside the image.
pub fn box_of_cell(s: ScaleSpec, y: usize, x: usize, img_w: usize, img_h: usize) -> Option<ScoredBox> {
    let (wh, ww) = s.window_size();
    let x0 = 2 * x * s.col_factor();
    let y0 = 2 * y * s.row_factor();
    if x0 >= img_w || y0 >= img_h {
        return None;
    }
    Some(ScoredBox {
        x: x0 as u32,
        y: y0 as u32,
        w: ((x0 + ww).min(img_w) - x0) as u32,
        h: ((y0 + wh).min(img_h) - y0) as u32,
        score: 0.0,
        scale: s,
    })
}

/// Greedy NMS with background threshold and per-scale cap; output is rank ordered.
pub fn nms(boxes: &[ScoredBox], cfg: &ProposerConfig) -> Vec<ScoredBox> {
    let mut cand: Vec<ScoredBox> = boxes
        .iter()
        .filter(|b| b.score.is_finite() && b.score >= cfg.score_threshold)
        .copied()
        .collect();
    sort_ranked(&mut cand);
    suppress_sorted(cand, cfg.nms_threshold, cfg.per_scale_cap)
}

/// NMS over candidates already gated on their raw score.
fn nms_gated(mut cand: Vec<ScoredBox>, cfg: &ProposerConfig) -> Vec<ScoredBox> {
    cand.retain(|b| b.score.is_finite());
    sort_ranked(&mut cand);
    suppress_sorted(cand, cfg.nms_threshold, cfg.per_scale_cap)
}

/// Spatial index of kept boxes, bucketed by log2 of width and height. Each bucket is a
/// lazily allocated dense grid with cells a quarter of the bucket's lower size bound,
/// coarsened when that would exceed `MAX_CELLS`.
/// Positions use doubled centres so all arithmetic stays integral.
struct SizeGrid {
    extent: (u64, u64),
    buckets: Vec<Option<Bucket>>,
}

struct Bucket {
    shift: (u32, u32),
    cols: usize,
    rows: usize,
    cells: Vec<Vec<[u32; 4]>>,
}

const BUCKETS: usize = 33;
const MAX_CELLS: u64 = 4096;

fn size_bucket(v: u32) -> usize {
    (31 - v.max(1).leading_zeros()) as usize
}

/// Doubled-coordinate cell shift for a bucket: cells of `2^(b-2)` pixels, at least 2.
fn cell_shift(b: usize) -> u32 {
    (b as u32).saturating_sub(2).max(1) + 1
}

/// Size buckets that can hold a side `v'` with `min(v, v') / max(v, v') > t`.
fn partner_buckets(v: u32, t: f64) -> (usize, usize) {
    let b = size_bucket(v);
    let lo = if b > 0 && ((1u64 << b) as f64 - 1.0) > t * v as f64 - 1e-9 { b - 1 } else { b };
    let hi = if b + 1 < BUCKETS && ((1u64 << (b + 1)) as f64) * t < v as f64 + 1e-9 { b + 1 } else { b };
    (lo, hi)
}

impl Bucket {
    fn cell_of(&self, x2: u64, y2: u64) -> (usize, usize) {
        (((x2 >> self.shift.0) as usize).min(self.cols - 1), ((y2 >> self.shift.1) as usize).min(self.rows - 1))
    }
}

fn doubled_centre(b: &ScoredBox) -> (u64, u64) {
    (2 * b.x as u64 + b.w as u64, 2 * b.y as u64 + b.h as u64)
}

impl SizeGrid {
    fn new(boxes: &[ScoredBox]) -> Self {
        let (mut w, mut h) = (1u64, 1u64);
        for b in boxes {
            let (cx, cy) = doubled_centre(b);
            w = w.max(cx);
            h = h.max(cy);
        }
        SizeGrid { extent: (w, h), buckets: (0..BUCKETS * BUCKETS).map(|_| None).collect() }
    }

    fn insert(&mut self, b: &ScoredBox) {
        let (bw, bh) = (size_bucket(b.w), size_bucket(b.h));
        let extent = self.extent;
        let bucket = self.buckets[bw * BUCKETS + bh].get_or_insert_with(|| {
            let mut shift = (cell_shift(bw), cell_shift(bh));
            while ((extent.0 >> shift.0) + 1) * ((extent.1 >> shift.1) + 1) > MAX_CELLS {
                if extent.0 >> shift.0 >= extent.1 >> shift.1 {
                    shift.0 += 1;
                } else {
                    shift.1 += 1;
                }
            }
            let cols = (extent.0 >> shift.0) as usize + 1;
            let rows = (extent.1 >> shift.1) as usize + 1;
            Bucket { shift, cols, rows, cells: vec![Vec::new(); cols * rows] }
        });
        let (cx, cy) = doubled_centre(b);
        let (gx, gy) = bucket.cell_of(cx, cy);
        bucket.cells[gy * bucket.cols + gx].push([b.x, b.y, b.w, b.h]);
    }

    /// True if a stored box overlaps `b` with IoU above `threshold`, searching `reach` times its extent.
    fn any_near(&self, b: &ScoredBox, threshold: f64, reach: f64) -> bool {
        let q = [b.x, b.y, b.w, b.h];
        let (cx, cy) = doubled_centre(b);
        let rx = (2.0 * (b.w as f64 * reach + 1.0)) as u64 + 1;
        let ry = (2.0 * (b.h as f64 * reach + 1.0)) as u64 + 1;
        let (bw0, bw1) = partner_buckets(b.w, threshold);
        let (bh0, bh1) = partner_buckets(b.h, threshold);
        for qw in bw0..=bw1 {
            for qh in bh0..=bh1 {
                let Some(bucket) = &self.buckets[qw * BUCKETS + qh] else {
                    continue;
                };
                let (gx0, gy0) = bucket.cell_of(cx.saturating_sub(rx), cy.saturating_sub(ry));
                let (gx1, gy1) = bucket.cell_of(cx + rx, cy + ry);
                for gy in gy0..=gy1 {
                    for gx in gx0..=gx1 {
                        if bucket.cells[gy * bucket.cols + gx].iter().any(|k| iou_exceeds(k, &q, threshold)) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Same value as `Rect::iou` on the two boxes, computed from integers.
fn box_iou(a: &ScoredBox, b: &ScoredBox) -> f64 {
    let iw = (a.x as u64 + a.w as u64).min(b.x as u64 + b.w as u64).saturating_sub((a.x).max(b.x) as u64);
    let ih = (a.y as u64 + a.h as u64).min(b.y as u64 + b.h as u64).saturating_sub((a.y).max(b.y) as u64);
    let inter = iw * ih;
    if inter == 0 {
        return 0.0;
    }
    let union = a.w as u64 * a.h as u64 + b.w as u64 * b.h as u64 - inter;
    inter as f64 / union as f64
}

/// `box_iou(a, b) > t` on `[x, y, w, h]` boxes, deciding most pairs without a division.
fn iou_exceeds(a: &[u32; 4], b: &[u32; 4], t: f64) -> bool {
    // IoU never exceeds the overlap along one axis over the longer side on that axis.
    let side = |p: u32, lp: u32, q: u32, lq: u32| {
        let o = (p as i64 + lp as i64).min(q as i64 + lq as i64) - (p.max(q) as i64);
        (o.max(0), lp.max(lq) as i64)
    };
    let (iw, mw) = side(a[0], a[2], b[0], b[2]);
    if (iw as f64) < t * mw as f64 * (1.0 - 1e-9) {
        return false;
    }
    let (ih, mh) = side(a[1], a[3], b[1], b[3]);
    if (ih as f64) < t * mh as f64 * (1.0 - 1e-9) {
        return false;
    }
    let inter = iw * ih;
    if inter == 0 {
        return t < 0.0;
    }
    let union = a[2] as i64 * a[3] as i64 + b[2] as i64 * b[3] as i64 - inter;
    let (i, u) = (inter as f64, union as f64 * t);
    if i < u * (1.0 - 1e-9) {
        false
    } else if i > u * (1.0 + 1e-9) {
        true
    } else {
        inter as f64 / union as f64 > t
    }
}

fn suppress_sorted(cand: Vec<ScoredBox>, threshold: f64, per_scale_cap: usize) -> Vec<ScoredBox> {
    let mut kept: Vec<ScoredBox> = Vec::new();
    let mut per_scale: Vec<(ScaleSpec, usize)> = Vec::new();
    let mut grid = SizeGrid::new(&cand);
    // IoU > t needs overlap width above t times the wider side, so the centre offset
    // stays under (1 - t) times the candidate's extent once t >= 1/2.
    let reach = if (0.5..1.0).contains(&threshold) {
        Some(1.0 - threshold)
    } else {
        None
    };
    for b in cand {
        let slot = match per_scale.iter().position(|e| e.0 == b.scale) {
            Some(i) => i,
            None => {
                per_scale.push((b.scale, 0));
                per_scale.len() - 1
            }
        };
        if per_scale[slot].1 >= per_scale_cap {
            continue;
        }
        let suppressed = if threshold >= 1.0 {
            false
        } else if let Some(reach) = reach {
            grid.any_near(&b, threshold, reach)
        } else {
            kept.iter().any(|k| box_iou(k, &b) > threshold)
        };
        if suppressed {
            continue;
        }
        per_scale[slot].1 += 1;
        grid.insert(&b);
        kept.push(b);
    }
    kept
}

/// Wall time spent in each pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub scoring: Duration,
    pub nms: Duration,
    pub merge: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.scoring + self.nms + self.merge
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRun {
    pub boxes: Vec<ScoredBox>,
    /// Length of the NMS container before merging and truncation.
    pub nms_count: usize,
    pub times: StageTimes,
}

/// Scored, background-filtered candidate boxes of every model scale.
/// The score threshold applies to the raw score; kept boxes carry the calibrated score.
pub fn score_candidates(img: &ImagePlane, model: &BinarizedModel, cfg: &ProposerConfig) -> Vec<ScoredBox> {
    let pyr = Pyramid::new(img);
    let (iw, ih) = (img.width(), img.height());
    let per_scale: Vec<Vec<ScoredBox>> = model
        .scales()
        .par_iter()
        .map(|&s| {
            let Ok(level) = pyr.level(s) else {
                return Vec::new();
            };
            let matrix = score_level(&level, s, model, cfg.min_window_max);
            let mut out = Vec::new();
            for y in 0..matrix.rows {
                for x in 0..matrix.cols {
                    let raw = matrix.get(y, x);
                    if !raw.is_finite() || raw < cfg.score_threshold {
                        continue;
                    }
                    let score = model.calibrate(s, raw);
                    if let Some(mut b) = box_of_cell(s, y, x, iw, ih) {
                        b.score = score;
                        out.push(b);
                    }
                }
            }
            out
        })
        .collect();
    per_scale.into_iter().flatten().collect()
}

/// Merges each scale's container on its own grid. The fused and surviving boxes
/// come first in rank order, followed by every container box that did not reach
/// the output unchanged (fused members, collision losses, entries past the cap).
pub fn merge_container(container: &[ScoredBox], cfg: &MergeConfig, img_w: usize, img_h: usize) -> Vec<ScoredBox> {
    let mut merged = Vec::with_capacity(container.len());
    let mut displaced = vec![false; container.len()];
    Merger::new().split_by_scale(container, cfg, img_w, img_h, &mut merged, &mut displaced);
    sort_ranked(&mut merged);
    merged.extend(container.iter().zip(&displaced).filter(|(_, &d)| d).map(|(b, _)| *b));
    merged
}

/// The pre-merge container: scored, gated and suppressed candidates, best first.
pub fn container(img: &ImagePlane, model: &BinarizedModel, cfg: &ProposerConfig) -> Vec<ScoredBox> {
    nms_gated(score_candidates(img, model, cfg), cfg)
}

/// Full pipeline with per-stage timings.
pub fn propose_detailed(
    img: &ImagePlane,
    model: &BinarizedModel,
    cfg: &ProposerConfig,
    merge: bool,
) -> ProposalRun {
    let t0 = Instant::now();
    let candidates = score_candidates(img, model, cfg);
    let t1 = Instant::now();
    let container = nms_gated(candidates, cfg);
    let t2 = Instant::now();
    let nms_count = container.len();
    let mut boxes = if merge {
        merge_container(&container, &cfg.merge, img.width(), img.height())
    } else {
        container
    };
    let t3 = Instant::now();
    boxes.truncate(cfg.budget);
    ProposalRun {
        boxes,
        nms_count,
        times: StageTimes { scoring: t1 - t0, nms: t2 - t1, merge: t3 - t2 },
    }
}

/// Proposals for `img`, best first, at most `cfg.budget` of them.
pub fn propose(img: &ImagePlane, model: &BinarizedModel, cfg: &ProposerConfig, merge: bool) -> Vec<ScoredBox> {
    propose_detailed(img, model, cfg, merge).boxes
}
