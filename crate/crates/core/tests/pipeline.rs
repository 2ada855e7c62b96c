use bihl::annotations::{format_line_format, load_annotations};
use bihl::binmodel::{load_model, model_to_json, save_model, BinarizedModel};
use bihl::imgpyr::{enumerate_scales, write_png};
use bihl::merger::merge_detailed;
use bihl::proposer::{container, propose, propose_detailed, ProposerConfig};
use bihl::synth::{corpus, scene, Scene, SceneConfig};
use bihl::trainer::{train_model, TrainConfig, TrainingImage};
use proptest::prelude::*;
use std::sync::OnceLock;

fn small_scenes() -> SceneConfig {
    SceneConfig { width: (96, 160), height: (80, 128), side: (16.0, 64.0), ..SceneConfig::default() }
}

fn training(scenes: &[Scene]) -> Vec<TrainingImage> {
    scenes.iter().map(|s| TrainingImage { image: s.image.clone(), boxes: s.boxes.clone() }).collect()
}

fn model() -> &'static BinarizedModel {
    static MODEL: OnceLock<BinarizedModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let set = training(&corpus(&small_scenes(), 21, 30));
        let cfg = TrainConfig { negatives_per_image: 20, ..TrainConfig::default() };
        train_model(&set, &enumerate_scales(), &cfg, 4, 2).unwrap().0
    })
}

#[test]
fn training_is_reproducible() {
    let set = training(&corpus(&small_scenes(), 5, 6));
    let cfg = TrainConfig { seed: 9, ..TrainConfig::default() };
    let a = train_model(&set, &enumerate_scales(), &cfg, 4, 2).unwrap().0;
    let b = train_model(&set, &enumerate_scales(), &cfg, 4, 2).unwrap().0;
    assert_eq!(model_to_json(&a).unwrap(), model_to_json(&b).unwrap());
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(model(), &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(&back, model());
}

#[test]
fn line_annotations_resolve_against_the_image_directory() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = corpus(&small_scenes(), 4, 3);
    let mut text = String::new();
    for s in &scenes {
        write_png(&s.image, dir.path().join(&s.boxes[0].image_id)).unwrap();
        text.push_str(&format_line_format(&s.boxes));
    }
    let file = dir.path().join("ann.txt");
    std::fs::write(&file, text).unwrap();
    let loaded = load_annotations(&file, dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (l, s) in loaded.iter().zip(&scenes) {
        assert!(l.image.exists());
        assert_eq!(l.boxes, s.boxes);
    }
}

#[test]
fn budget_truncates_the_ranked_list() {
    let s = scene(&small_scenes(), 7, 0);
    let full = propose(&s.image, model(), &ProposerConfig::default(), true);
    let cut = propose(&s.image, model(), &ProposerConfig { budget: 10, ..ProposerConfig::default() }, true);
    assert_eq!(cut.len(), full.len().min(10));
    assert_eq!(cut[..], full[..cut.len()]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn proposals_stay_inside_the_image(index in 0u64..1000, budget in 1usize..3000, merge in any::<bool>()) {
        let s = scene(&small_scenes(), 13, index);
        let cfg = ProposerConfig { budget, ..ProposerConfig::default() };
        let boxes = propose(&s.image, model(), &cfg, merge);
        prop_assert!(boxes.len() <= budget);
        for b in &boxes {
            prop_assert!(b.w >= 1 && b.h >= 1);
            prop_assert!((b.x + b.w) as usize <= s.image.width() && (b.y + b.h) as usize <= s.image.height());
        }
    }

    #[test]
    fn unmerged_boxes_are_template_windows(index in 0u64..1000) {
        let s = scene(&small_scenes(), 17, index);
        let (iw, ih) = (s.image.width() as u32, s.image.height() as u32);
        for b in propose(&s.image, model(), &ProposerConfig::default(), false) {
            let (wh, ww) = b.scale.window_size();
            let (ww, wh) = (ww as u32, wh as u32);
            prop_assert!(b.w == ww || (b.x + b.w == iw && b.w < ww));
            prop_assert!(b.h == wh || (b.y + b.h == ih && b.h < wh));
        }
    }

    #[test]
    fn merged_boxes_enclose_their_members(index in 0u64..1000) {
        let s = scene(&small_scenes(), 19, index);
        let cfg = ProposerConfig::default();
        let v = container(&s.image, model(), &cfg);
        let out = merge_detailed(&v, &cfg.merge, s.image.width(), s.image.height());
        prop_assert!(out.boxes.len() <= v.len());
        for (b, members) in out.boxes.iter().zip(&out.members) {
            prop_assert!(!members.is_empty());
            let x0 = members.iter().map(|&r| v[r].x).min().unwrap();
            let y0 = members.iter().map(|&r| v[r].y).min().unwrap();
            let x1 = members.iter().map(|&r| v[r].x + v[r].w).max().unwrap();
            let y1 = members.iter().map(|&r| v[r].y + v[r].h).max().unwrap();
            prop_assert_eq!((b.x, b.y, b.x + b.w, b.y + b.h), (x0, y0, x1, y1));
        }
    }

    #[test]
    fn propose_is_deterministic(index in 0u64..1000) {
        let s = scene(&small_scenes(), 23, index);
        let cfg = ProposerConfig::default();
        let a = propose_detailed(&s.image, model(), &cfg, true);
        let b = propose_detailed(&s.image, model(), &cfg, true);
        prop_assert_eq!(a.boxes, b.boxes);
        prop_assert_eq!(a.nms_count, b.nms_count);
    }
}
