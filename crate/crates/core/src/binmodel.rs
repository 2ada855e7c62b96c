//! Bit-plane descriptors, the signed-binary approximation of a linear model and
//! popcount scoring.
//!
//! A descriptor is the 8x8 window of HL bytes. Its top `ng` bit planes are packed
//! into one `u64` each, bit `row * 8 + col`. The weight vector is approximated as
//! `sum_i lambda_i * nu_i` with `nu_i` in `{-1, +1}^64`, stored as the mask of its
//! `+1` entries. The dot product of the approximation with the reconstructed
//! descriptor then reduces to
//! `sum_i lambda_i * sum_k 2^(8-k) * (2 * popcount(mask_i & plane_k) - popcount(plane_k))`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hlfeat::HlFeatureMap;
use crate::imgpyr::ScaleSpec;

/// Descriptor dimension (an 8x8 window).
pub const DIM: usize = 64;
pub const MAX_PLANES: usize = 8;
pub const DEFAULT_NG: usize = 4;
pub const DEFAULT_NA: usize = 2;
pub const MODEL_FORMAT: &str = "bihl-model";
pub const MODEL_VERSION: u64 = 1;

pub fn check_ng(ng: usize) -> Result<()> {
    if (1..=MAX_PLANES).contains(&ng) {
        Ok(())
    } else {
        Err(Error::InvalidConfig("ng must be in 1..8".into()))
    }
}

pub fn check_na(na: usize) -> Result<()> {
    if na >= 1 {
        Ok(())
    } else {
        Err(Error::InvalidConfig("na must be at least 1".into()))
    }
}

/// Top `ng` bit planes of an 8x8 byte window; plane 0 holds the most significant bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinarizedPatch {
    planes: [u64; MAX_PLANES],
    ng: u8,
}

impl BinarizedPatch {
    pub fn from_planes(planes: &[u64]) -> Result<Self> {
        check_ng(planes.len())?;
        let mut p = [0u64; MAX_PLANES];
        p[..planes.len()].copy_from_slice(planes);
        Ok(BinarizedPatch { planes: p, ng: planes.len() as u8 })
    }

    /// Bit-plane decomposition of 64 row-major bytes.
    pub fn from_bytes(bytes: &[u8; DIM], ng: usize) -> Result<Self> {
        check_ng(ng)?;
        let mut planes = [0u64; MAX_PLANES];
        for (j, &b) in bytes.iter().enumerate() {
            for (k, plane) in planes.iter_mut().enumerate().take(ng) {
                *plane |= (((b >> (7 - k)) & 1) as u64) << j;
            }
        }
        Ok(BinarizedPatch { planes, ng: ng as u8 })
    }

    pub fn ng(&self) -> usize {
        self.ng as usize
    }

    pub fn planes(&self) -> &[u64] {
        &self.planes[..self.ng as usize]
    }

    /// Bytes rebuilt from the kept planes: each original byte with its low `8 - ng` bits cleared.
    pub fn reconstruct(&self) -> [u8; DIM] {
        let mut out = [0u8; DIM];
        for (k, &plane) in self.planes().iter().enumerate() {
            for (j, v) in out.iter_mut().enumerate() {
                if (plane >> j) & 1 == 1 {
                    *v |= 1 << (7 - k);
                }
            }
        }
        out
    }
}

/// Bit planes of the window at cell `(y, x)` of `map`.
pub fn binarize_patch(map: &HlFeatureMap, y: usize, x: usize, ng: usize) -> Result<BinarizedPatch> {
    check_ng(ng)?;
    let bytes = map.window(y, x)?;
    BinarizedPatch::from_bytes(&bytes, ng)
}

/// One term of the signed-binary expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisVector {
    pub lambda: f64,
    /// Bit `j` set iff component `j` is `+1`.
    pub positive: u64,
}

impl BasisVector {
    pub fn component(&self, j: usize) -> f64 {
        if (self.positive >> j) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Per-scale affine score correction `a * score + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Calibration {
    pub fn apply(&self, score: f64) -> f64 {
        self.a * score + self.b
    }
}

/// Linear objectness model with its binary approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedModel {
    weights: [f64; DIM],
    basis: Vec<BasisVector>,
    ng: usize,
    scales: Vec<ScaleSpec>,
    calibration: Option<BTreeMap<ScaleSpec, Calibration>>,
}

impl BinarizedModel {
    /// Greedy decomposition of `weights` into `na` basis vectors, scored with `ng` planes.
    pub fn new(weights: [f64; DIM], na: usize, ng: usize, scales: Vec<ScaleSpec>) -> Result<Self> {
        check_ng(ng)?;
        check_na(na)?;
        check_scales(&scales)?;
        Ok(BinarizedModel {
            weights,
            basis: decompose(&weights, na),
            ng,
            scales,
            calibration: None,
        })
    }

    /// Assembles a model from explicit parts without re-running the decomposition.
    pub fn from_parts(
        weights: [f64; DIM],
        basis: Vec<BasisVector>,
        ng: usize,
        scales: Vec<ScaleSpec>,
        calibration: Option<BTreeMap<ScaleSpec, Calibration>>,
    ) -> Result<Self> {
        check_ng(ng)?;
        check_na(basis.len())?;
        check_scales(&scales)?;
        let calibration = calibration.map(|c| complete_calibration(&scales, c));
        Ok(BinarizedModel { weights, basis, ng, scales, calibration })
    }

    pub fn weights(&self) -> &[f64; DIM] {
        &self.weights
    }

    pub fn basis(&self) -> &[BasisVector] {
        &self.basis
    }

    pub fn ng(&self) -> usize {
        self.ng
    }

    pub fn na(&self) -> usize {
        self.basis.len()
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    pub fn calibration(&self) -> Option<&BTreeMap<ScaleSpec, Calibration>> {
        self.calibration.as_ref()
    }

    /// Scales missing from `calibration` get the identity map.
    pub fn set_calibration(&mut self, calibration: Option<BTreeMap<ScaleSpec, Calibration>>) {
        self.calibration = calibration.map(|c| complete_calibration(&self.scales, c));
    }

    /// Copy with a different number of planes; the basis is unchanged.
    pub fn with_ng(&self, ng: usize) -> Result<Self> {
        check_ng(ng)?;
        Ok(BinarizedModel { ng, ..self.clone() })
    }

    /// Copy with the basis recomputed at `na` terms.
    pub fn with_na(&self, na: usize) -> Result<Self> {
        check_na(na)?;
        Ok(BinarizedModel { basis: decompose(&self.weights, na), ..self.clone() })
    }

    /// Calibrated score for `scale`, identity when no calibration is stored.
    pub fn calibrate(&self, scale: ScaleSpec, score: f64) -> f64 {
        match self.calibration.as_ref().and_then(|c| c.get(&scale)) {
            Some(c) => c.apply(score),
            None => score,
        }
    }

    /// The approximated weight vector `sum_i lambda_i * nu_i`.
    pub fn approximation(&self) -> [f64; DIM] {
        let mut out = [0f64; DIM];
        for b in &self.basis {
            for (j, v) in out.iter_mut().enumerate() {
                *v += b.lambda * b.component(j);
            }
        }
        out
    }
}

fn complete_calibration(
    scales: &[ScaleSpec],
    given: BTreeMap<ScaleSpec, Calibration>,
) -> BTreeMap<ScaleSpec, Calibration> {
    scales
        .iter()
        .map(|s| (*s, given.get(s).copied().unwrap_or(Calibration { a: 1.0, b: 0.0 })))
        .collect()
}

fn check_scales(scales: &[ScaleSpec]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidConfig("model needs at least one scale".into()));
    }
    if let Some(bad) = scales.iter().find(|s| !s.is_valid()) {
        return Err(Error::InvalidConfig(format!("scale {bad} is not a pyramid ratio")));
    }
    Ok(())
}

/// Greedy residual fit: each step takes the sign pattern of the residual
/// (zero components go to `-1`) and the least-squares coefficient for it.
pub fn decompose(weights: &[f64; DIM], na: usize) -> Vec<BasisVector> {
    let mut residual = *weights;
    let mut basis = Vec::with_capacity(na);
    for _ in 0..na {
        let mut positive = 0u64;
        for (j, &r) in residual.iter().enumerate() {
            if r > 0.0 {
                positive |= 1 << j;
            }
        }
        let term = BasisVector { lambda: 0.0, positive };
        let dot: f64 = residual.iter().enumerate().map(|(j, &r)| r * term.component(j)).sum();
        let lambda = dot / DIM as f64;
        for (j, r) in residual.iter_mut().enumerate() {
            *r -= lambda * term.component(j);
        }
        basis.push(BasisVector { lambda, positive });
    }
    basis
}

/// Integer part of one basis term: `sum_k 2^(8-k) (2 |mask & b_k| - |b_k|)`.
#[inline]
pub(crate) fn basis_term(positive: u64, planes: &[u64]) -> i32 {
    let mut acc = 0i32;
    for (k, &plane) in planes.iter().enumerate() {
        let both = (positive & plane).count_ones() as i32;
        let all = plane.count_ones() as i32;
        acc += (2 * both - all) << (7 - k);
    }
    acc
}

/// Bitwise score of `patch` under `model`.
pub fn score_patch(model: &BinarizedModel, patch: &BinarizedPatch) -> Result<f64> {
    if patch.ng() != model.ng {
        return Err(Error::ConfigMismatch(format!(
            "patch has {} planes, model expects {}",
            patch.ng(),
            model.ng
        )));
    }
    Ok(score_planes(&model.basis, patch.planes()))
}

#[inline]
pub(crate) fn score_planes(basis: &[BasisVector], planes: &[u64]) -> f64 {
    basis
        .iter()
        .map(|b| b.lambda * basis_term(b.positive, planes) as f64)
        .sum()
}

#[derive(Serialize, Deserialize)]
struct BasisRecord {
    lambda: f64,
    bits: String,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u64,
    ng: usize,
    na: usize,
    w: Vec<f64>,
    basis: Vec<BasisRecord>,
    scales: Vec<[u8; 2]>,
    calibration: Option<Vec<[f64; 2]>>,
}

/// JSON text of the model file.
pub fn model_to_json(model: &BinarizedModel) -> Result<String> {
    let calibration = model.calibration.as_ref().map(|c| {
        model
            .scales
            .iter()
            .map(|s| c.get(s).map(|k| [k.a, k.b]).unwrap_or([1.0, 0.0]))
            .collect()
    });
    let record = ModelRecord {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        ng: model.ng,
        na: model.na(),
        w: model.weights.to_vec(),
        basis: model
            .basis
            .iter()
            .map(|b| BasisRecord { lambda: b.lambda, bits: format!("{:016x}", b.positive) })
            .collect(),
        scales: model.scales.iter().map(|s| [s.m, s.n]).collect(),
        calibration,
    };
    serde_json::to_string_pretty(&record).map_err(|e| Error::Malformed(e.to_string()))
}

/// Parses model JSON, validating format, version and ranges.
pub fn model_from_json(text: &str) -> Result<BinarizedModel> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| Error::Malformed("expected a JSON object".into()))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(MODEL_FORMAT) => {}
        other => return Err(Error::Malformed(format!("unexpected format tag {other:?}"))),
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(MODEL_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => return Err(Error::Malformed("missing version".into())),
    }
    let record: ModelRecord =
        serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
    check_ng(record.ng)?;
    check_na(record.na)?;
    if record.basis.len() != record.na {
        return Err(Error::Malformed(format!(
            "na is {} but basis has {} entries",
            record.na,
            record.basis.len()
        )));
    }
    let weights: [f64; DIM] = record
        .w
        .as_slice()
        .try_into()
        .map_err(|_| Error::Malformed(format!("w has {} entries, expected {DIM}", record.w.len())))?;
    let basis = record
        .basis
        .iter()
        .map(|b| {
            if b.bits.len() != 16 || !b.bits.bytes().all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(&c)) {
                return Err(Error::Malformed(format!("bits {:?} is not 16 lowercase hex digits", b.bits)));
            }
            let positive = u64::from_str_radix(&b.bits, 16).map_err(|e| Error::Malformed(e.to_string()))?;
            Ok(BasisVector { lambda: b.lambda, positive })
        })
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<ScaleSpec> = record.scales.iter().map(|s| ScaleSpec::new(s[0], s[1])).collect();
    let calibration = match record.calibration {
        None => None,
        Some(pairs) => {
            if pairs.len() != scales.len() {
                return Err(Error::Malformed(format!(
                    "calibration has {} entries for {} scales",
                    pairs.len(),
                    scales.len()
                )));
            }
            Some(
                scales
                    .iter()
                    .zip(pairs)
                    .map(|(&s, [a, b])| (s, Calibration { a, b }))
                    .collect(),
            )
        }
    };
    BinarizedModel::from_parts(weights, basis, record.ng, scales, calibration)
        .map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::Malformed(msg),
            other => other,
        })
}

pub fn save_model(model: &BinarizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = model_to_json(model)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BinarizedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgpyr::enumerate_scales;
    use proptest::prelude::*;

    fn model(basis: Vec<BasisVector>, ng: usize) -> BinarizedModel {
        BinarizedModel::from_parts([0.0; DIM], basis, ng, enumerate_scales(), None).unwrap()
    }

    fn map_from(bytes: &[u8; DIM]) -> HlFeatureMap {
        HlFeatureMap::from_raw(8, 8, bytes.to_vec(), ScaleSpec::new(0, 0)).unwrap()
    }

    #[test]
    fn binarize_examples() {
        let zero = map_from(&[0; DIM]);
        for ng in 1..=8 {
            assert!(binarize_patch(&zero, 0, 0, ng).unwrap().planes().iter().all(|&p| p == 0));
        }
        let full = binarize_patch(&map_from(&[255; DIM]), 0, 0, 4).unwrap();
        assert_eq!(full.planes(), &[u64::MAX; 4]);
        let mut one = [0u8; DIM];
        one[0] = 128;
        let p = binarize_patch(&map_from(&one), 0, 0, 2).unwrap();
        assert_eq!(p.planes(), &[1, 0]);
    }

    #[test]
    fn binarize_position_and_errors() {
        let data: Vec<u8> = (0..100).map(|i| i as u8).collect();
        let map = HlFeatureMap::from_raw(10, 10, data, ScaleSpec::new(0, 0)).unwrap();
        let p = binarize_patch(&map, 1, 2, 8).unwrap();
        let bytes = p.reconstruct();
        assert_eq!(bytes[0], 12);
        assert_eq!(bytes[9], 23);
        assert!(matches!(binarize_patch(&map, 3, 0, 4), Err(Error::WindowOutOfBounds { .. })));
        assert!(matches!(binarize_patch(&map, 0, 0, 9), Err(Error::InvalidConfig(_))));
        assert!(matches!(binarize_patch(&map, 0, 0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn reconstruction_bound_is_exhaustive() {
        for ng in 1..=8 {
            for v in 0..=255u8 {
                let p = BinarizedPatch::from_bytes(&[v; DIM], ng).unwrap();
                let r = p.reconstruct()[0];
                assert!(r <= v);
                assert!(((v - r) as u32) < (1u32 << (8 - ng)));
            }
        }
    }

    #[test]
    fn decompose_examples() {
        let b = decompose(&[1.0; DIM], 1);
        assert_eq!(b[0].lambda, 1.0);
        assert_eq!(b[0].positive, u64::MAX);

        assert!(decompose(&[0.0; DIM], 3).iter().all(|t| t.lambda == 0.0 && t.positive == 0));

        let mut alt = [0.0; DIM];
        let mut mask = 0u64;
        for (j, v) in alt.iter_mut().enumerate() {
            if j % 2 == 0 {
                *v = 1.0;
                mask |= 1 << j;
            } else {
                *v = -1.0;
            }
        }
        let b = decompose(&alt, 1);
        assert_eq!(b[0].lambda, 1.0);
        assert_eq!(b[0].positive, mask);
        let m = BinarizedModel::new(alt, 1, 4, enumerate_scales()).unwrap();
        assert_eq!(m.approximation(), alt);
    }

    #[test]
    fn score_examples() {
        let m = model(vec![BasisVector { lambda: 1.0, positive: u64::MAX }], 1);
        let zero = BinarizedPatch::from_planes(&[0]).unwrap();
        assert_eq!(score_patch(&m, &zero).unwrap(), 0.0);
        let full = BinarizedPatch::from_planes(&[u64::MAX]).unwrap();
        assert_eq!(score_patch(&m, &full).unwrap(), 8192.0);
        // <1, f_s> with every reconstructed byte equal to 128.
        let rec = full.reconstruct();
        assert_eq!(rec.iter().map(|&v| v as f64).sum::<f64>(), 8192.0);
        let wrong = BinarizedPatch::from_planes(&[0, 0]).unwrap();
        assert!(matches!(score_patch(&m, &wrong), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn model_json_errors() {
        let m = BinarizedModel::new([0.5; DIM], 2, 4, enumerate_scales()).unwrap();
        let text = model_to_json(&m).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["version"] = 2.into();
        assert!(matches!(model_from_json(&v.to_string()), Err(Error::UnsupportedVersion(2))));
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("basis");
        assert!(matches!(model_from_json(&v.to_string()), Err(Error::Malformed(_))));
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["ng"] = 9.into();
        assert!(model_from_json(&v.to_string()).is_err());
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["basis"][0]["bits"] = "ABCDEF0123456789".into();
        assert!(matches!(model_from_json(&v.to_string()), Err(Error::Malformed(_))));
        assert!(matches!(model_from_json("[1,2]"), Err(Error::Malformed(_))));
    }

    #[test]
    fn model_file_layout() {
        let mut w = [0.0; DIM];
        w[3] = 2.5;
        w[9] = -1.0 / 3.0;
        let mut m = BinarizedModel::new(w, 2, 4, vec![ScaleSpec::new(0, 0), ScaleSpec::new(4, 3)]).unwrap();
        let mut cal = BTreeMap::new();
        cal.insert(ScaleSpec::new(4, 3), Calibration { a: 0.25, b: -1.5 });
        m.set_calibration(Some(cal));
        let v: Value = serde_json::from_str(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(v["format"], "bihl-model");
        assert_eq!(v["version"], 1);
        assert_eq!(v["scales"], serde_json::json!([[0, 0], [4, 3]]));
        assert_eq!(v["basis"][0]["bits"], format!("{:016x}", 1u64 << 3));
        assert_eq!(v["calibration"], serde_json::json!([[1.0, 0.0], [0.25, -1.5]]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    fn arb_weights() -> impl Strategy<Value = [f64; DIM]> {
        proptest::collection::vec(-1e3f64..1e3, DIM).prop_map(|v| v.try_into().unwrap())
    }

    proptest! {
        #[test]
        fn residual_norm_never_grows(w in arb_weights(), na in 1usize..24) {
            let basis = decompose(&w, na);
            let mut r = w;
            let mut prev: f64 = r.iter().map(|v| v * v).sum();
            for b in &basis {
                for (j, v) in r.iter_mut().enumerate() {
                    *v -= b.lambda * b.component(j);
                }
                let now: f64 = r.iter().map(|v| v * v).sum();
                prop_assert!(now <= prev * (1.0 + 1e-12) + 1e-12);
                prev = now;
            }
        }

        #[test]
        fn json_round_trip(w in arb_weights(), na in 1usize..6, ng in 1usize..=8) {
            let m = BinarizedModel::new(w, na, ng, enumerate_scales()).unwrap();
            let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn positive_rescaling_scales_scores(
            w in arb_weights(),
            bytes in proptest::collection::vec(any::<u8>(), DIM),
            c in 0.01f64..100.0,
        ) {
            let m = BinarizedModel::new(w, 2, 4, enumerate_scales()).unwrap();
            let scaled: Vec<BasisVector> = m.basis().iter().map(|b| BasisVector { lambda: b.lambda * c, ..*b }).collect();
            let ms = BinarizedModel::from_parts(w, scaled, 4, enumerate_scales(), None).unwrap();
            let p = BinarizedPatch::from_bytes(&bytes.try_into().unwrap(), 4).unwrap();
            let (a, b) = (score_patch(&m, &p).unwrap(), score_patch(&ms, &p).unwrap());
            prop_assert!((b - c * a).abs() <= 1e-9 * (1.0 + (c * a).abs()));
        }
    }
}
