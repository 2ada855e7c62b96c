use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use bihl::annotations::{format_line_format, load_annotations, ImageAnnotations};
use bihl::binmodel::{check_na, check_ng, load_model, save_model, BinarizedModel};
use bihl::evalkit::{perturb as apply_perturbation, repeatability, time_pipeline, EvalReport, LabeledRect, PerturbKind, Perturbation};
use bihl::geom::Rect;
use bihl::hlfeat::hl_map;
use bihl::imgpyr::{downsample, enumerate_scales, read_image, write_image, write_pgm, ImagePlane};
use bihl::merger::{merge_detailed, MergeConfig};
use bihl::proposer::{self, container, ProposerConfig, ScoredBox};
use bihl::synth::{corpus, SceneConfig};
use bihl::trainer::{fit_calibration, train_model, TrainConfig, TrainingImage};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{image_key, list_images, read_proposals_csv, require_exists, write_proposals_csv, write_proposals_jsonl, write_text};
use crate::{EvalArgs, Failure, PerturbArgs, PipelineArgs, ProposeArgs, RepeatArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

const EXTRA_RECALL_IOUS: [f64; 3] = [0.5, 0.7, 0.9];

impl PipelineArgs {
    fn config(&self) -> Result<ProposerConfig, Failure> {
        let cfg = ProposerConfig {
            score_threshold: self.tc,
            min_window_max: self.tmval,
            nms_threshold: self.nms,
            budget: self.budget,
            merge: MergeConfig { neighbor_rank_gap: self.ts1, collision_rank_gap: self.ts2, ..MergeConfig::default() },
            ..ProposerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn merge(&self) -> bool {
        !self.no_merge
    }
}

fn open_model(path: &Path) -> Result<BinarizedModel, Failure> {
    require_exists(path, "model")?;
    load_model(path).map_err(|e| Failure::Runtime(e.into()))
}

fn load_gt(annotations: &Path, images: &Path) -> Result<Vec<ImageAnnotations>, Failure> {
    require_exists(annotations, "annotations")?;
    require_exists(images, "image directory")?;
    let gt = load_annotations(annotations, images).map_err(|e| Failure::Runtime(e.into()))?;
    if gt.is_empty() {
        return Err(Failure::Usage(format!("no annotated images in {}", annotations.display())));
    }
    Ok(gt)
}

fn read_all(paths: &[PathBuf]) -> anyhow::Result<Vec<ImagePlane>> {
    paths
        .par_iter()
        .map(|p| read_image(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn train(a: &TrainArgs) -> CmdResult {
    check_ng(a.ng)?;
    check_na(a.na)?;
    let cfg = TrainConfig { negatives_per_image: a.negatives, epochs: a.epochs, seed: a.seed, ..TrainConfig::default() };
    cfg.validate()?;
    let gt = load_gt(&a.annotations, &a.images)?;
    let paths: Vec<PathBuf> = gt.iter().map(|g| g.image.clone()).collect();
    let images = read_all(&paths)?;
    let set: Vec<TrainingImage> =
        images.into_iter().zip(&gt).map(|(image, g)| TrainingImage { image, boxes: g.boxes.clone() }).collect();

    let (mut model, fit, positives, negatives) =
        train_model(&set, &enumerate_scales(), &cfg, a.ng, a.na).map_err(|e| Failure::Runtime(e.into()))?;
    if a.calibrate {
        let cal = fit_calibration(&model, &set, &cfg).map_err(|e| Failure::Runtime(e.into()))?;
        model.set_calibration(Some(cal));
    }
    save_model(&model, &a.model).map_err(|e| Failure::Runtime(e.into()))?;

    println!("images: {}", set.len());
    println!("samples: {} positive, {} negative", positives, negatives);
    if let (Some(first), Some(last)) = (fit.epoch_loss.first(), fit.epoch_loss.last()) {
        let best = fit.epoch_loss.iter().copied().fold(f64::INFINITY, f64::min);
        println!("loss: first {first:.6}, last {last:.6}, best {best:.6} over {} epochs", fit.epoch_loss.len());
    }
    println!("model: {}", a.model.display());
    Ok(())
}

fn with_overrides(model: BinarizedModel, ng: Option<usize>, na: Option<usize>) -> Result<BinarizedModel, Failure> {
    let model = match ng {
        Some(ng) => {
            check_ng(ng)?;
            model.with_ng(ng)?
        }
        None => model,
    };
    Ok(match na {
        Some(na) => {
            check_na(na)?;
            model.with_na(na)?
        }
        None => model,
    })
}

fn dump_features(img: &ImagePlane, model: &BinarizedModel, dir: &Path, stem: &str) -> anyhow::Result<()> {
    for &s in model.scales() {
        let Ok(level) = downsample(img, s) else { continue };
        let Ok(map) = hl_map(&level, s) else { continue };
        write_pgm(&map.to_plane()?, dir.join(format!("{stem}_hl_m{}n{}.pgm", s.m, s.n)))?;
    }
    Ok(())
}

fn dump_grids(img: &ImagePlane, model: &BinarizedModel, cfg: &ProposerConfig, dir: &Path, stem: &str) -> anyhow::Result<()> {
    let boxes = container(img, model, cfg);
    for &s in model.scales() {
        let part: Vec<ScoredBox> = boxes.iter().filter(|b| b.scale == s).copied().collect();
        let outcome = merge_detailed(&part, &cfg.merge, img.width(), img.height());
        write_pgm(&outcome.grid.to_plane()?, dir.join(format!("{stem}_grid_m{}n{}.pgm", s.m, s.n)))?;
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn propose(a: &ProposeArgs) -> CmdResult {
    let cfg = a.pipeline.config()?;
    let paths = list_images(&a.images)?;
    let model = with_overrides(open_model(&a.model)?, a.ng, a.na)?;
    for dir in [&a.dump_features, &a.dump_grid].into_iter().flatten() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let rows: Vec<(String, Vec<ScoredBox>)> = paths
        .par_iter()
        .map(|p| -> anyhow::Result<(String, Vec<ScoredBox>)> {
            let img = read_image(p).with_context(|| format!("loading {}", p.display()))?;
            if let Some(dir) = &a.dump_features {
                dump_features(&img, &model, dir, &file_stem(p))?;
            }
            if let Some(dir) = &a.dump_grid {
                dump_grids(&img, &model, &cfg, dir, &file_stem(p))?;
            }
            Ok((image_key(&a.images, p), proposer::propose(&img, &model, &cfg, a.pipeline.merge())))
        })
        .collect::<anyhow::Result<_>>()?;

    write_proposals_csv(&a.out, &rows)?;
    if let Some(j) = &a.jsonl {
        write_proposals_jsonl(j, &rows)?;
    }
    Ok(())
}

fn labeled(g: &ImageAnnotations) -> Vec<LabeledRect> {
    g.boxes.iter().map(|b| LabeledRect { rect: b.rect(), label: b.label.clone() }).collect()
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::Usage("--iou must be in (0, 1]".into()));
    }
    let cfg = a.pipeline.config()?;
    let gt = load_gt(&a.annotations, &a.images)?;
    let keys: Vec<String> = gt.iter().map(|g| image_key(&a.images, &g.image)).collect();

    let (proposals, mean_seconds): (Vec<Vec<Rect>>, Option<f64>) = match (&a.proposals, &a.model) {
        (Some(csv), _) => {
            require_exists(csv, "proposal file")?;
            let mut by_image: HashMap<String, Vec<Rect>> = HashMap::new();
            for (image, [x, y, w, h]) in read_proposals_csv(csv)? {
                by_image.entry(image).or_default().push(Rect::new(x, y, w, h));
            }
            (keys.iter().map(|k| by_image.remove(k).unwrap_or_default()).collect(), None)
        }
        (None, Some(model_path)) => {
            let model = open_model(model_path)?;
            let merge = a.pipeline.merge();
            let props = gt
                .par_iter()
                .map(|g| -> anyhow::Result<Vec<Rect>> {
                    let img = read_image(&g.image).with_context(|| format!("loading {}", g.image.display()))?;
                    Ok(proposer::propose(&img, &model, &cfg, merge).iter().map(ScoredBox::rect).collect())
                })
                .collect::<anyhow::Result<_>>()?;
            let paths: Vec<&Path> = gt.iter().map(|g| g.image.as_path()).collect();
            let timing = time_pipeline(&model, &paths, &cfg, merge).map_err(|e| Failure::Runtime(e.into()))?;
            (props, Some(timing.mean_seconds))
        }
        (None, None) => return Err(Failure::Usage("one of --proposals or --model is required".into())),
    };

    let labels: Vec<Vec<LabeledRect>> = gt.iter().map(labeled).collect();
    let report = EvalReport::build(&proposals, &labels, a.iou, a.pipeline.budget, &EXTRA_RECALL_IOUS, mean_seconds)
        .map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("eval.json"), &report.to_json())?;
    write_text(&a.out.join("eval.csv"), &report.to_csv())?;
    println!(
        "DR@{}: {:.4}  MABO: {:.4}  images: {}  boxes: {}",
        a.iou, report.detection_rate, report.mabo, report.images, report.ground_truth
    );
    if let Some(t) = mean_seconds {
        println!("mean time: {:.3} ms", t * 1e3);
    }
    Ok(())
}

#[derive(Serialize)]
struct RepeatRow {
    kind: String,
    step: Option<usize>,
    level: f64,
    repeatability: f64,
}

pub fn repeat(a: &RepeatArgs) -> CmdResult {
    let cfg = a.pipeline.config()?;
    let kinds: Vec<PerturbKind> = if a.kind.is_empty() {
        PerturbKind::ALL.to_vec()
    } else {
        a.kind.iter().map(|k| k.parse()).collect::<bihl::Result<_>>()?
    };
    let mut plan: Vec<(String, Option<usize>, Perturbation)> = vec![("identity".into(), None, Perturbation::IDENTITY)];
    for k in kinds {
        let steps: Vec<usize> = if a.level.is_empty() { (0..k.ladder().len()).collect() } else { a.level.clone() };
        for step in steps {
            plan.push((k.name().into(), Some(step), Perturbation::from_ladder(k, step)?));
        }
    }
    let paths = list_images(&a.images)?;
    let model = open_model(&a.model)?;
    let images = read_all(&paths)?;
    let merge = a.pipeline.merge();

    let mut rows = Vec::with_capacity(plan.len());
    for (kind, step, p) in plan {
        let scores: Vec<f64> = images
            .par_iter()
            .enumerate()
            .map(|(i, img)| repeatability(&model, img, &p, &cfg, merge, a.seed.wrapping_add(i as u64)))
            .collect::<bihl::Result<_>>()
            .map_err(|e| Failure::Runtime(e.into()))?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("{kind:>12} {:>6} repeatability {mean:.4}", p.level);
        rows.push(RepeatRow { kind, step, level: p.level, repeatability: mean });
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("kind,step,level,repeatability\n");
    for r in &rows {
        let step = r.step.map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}\n", r.kind, step, r.level, r.repeatability));
    }
    write_text(&a.out.join("repeat.csv"), &csv)?;
    write_text(&a.out.join("repeat.json"), &serde_json::to_string_pretty(&rows).context("serializing report")?)?;
    Ok(())
}

pub fn perturb(a: &PerturbArgs) -> CmdResult {
    let kind: PerturbKind = a.kind.parse()?;
    let p = Perturbation::from_ladder(kind, a.level)?;
    let paths = list_images(&a.images)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    paths
        .par_iter()
        .enumerate()
        .try_for_each(|(i, path)| -> anyhow::Result<()> {
            let img = read_image(path).with_context(|| format!("loading {}", path.display()))?;
            let out = apply_perturbation(&img, &p, a.seed.wrapping_add(i as u64))?;
            let name = format!("{}_{}{}", file_stem(path), kind.name(), a.level);
            match &out.encoded {
                Some(bytes) => {
                    let target = a.out.join(format!("{name}.jpg"));
                    std::fs::write(&target, bytes).with_context(|| format!("writing {}", target.display()))?
                }
                None => write_image(&out.image, a.out.join(format!("{name}.png")))?,
            }
            Ok(())
        })?;
    println!("wrote {} {} images to {}", paths.len(), p, a.out.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let scenes = corpus(&SceneConfig::default(), a.seed, a.count);
    scenes.par_iter().try_for_each(|s| -> anyhow::Result<()> {
        let name = &s.boxes.first().context("scene without objects")?.image_id;
        write_image(&s.image, a.out.join(name))?;
        Ok(())
    })?;
    let lines: String = scenes.iter().map(|s| format_line_format(&s.boxes)).collect();
    write_text(&a.out.join("annotations.txt"), &lines)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}
