use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use bihl::proposer::ScoredBox;

use crate::Failure;

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "pgm", "ppm", "pnm", "jpg", "jpeg", "pbm"];

pub fn require_exists(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// `path` itself, or the images directly inside it sorted by name.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    require_exists(path, "image path")?;
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::Usage(format!("no images in {}", path.display())));
    }
    Ok(out)
}

/// Name of `path` in outputs: relative to `root` when that is a directory, else the file name.
pub fn image_key(root: &Path, path: &Path) -> String {
    let rel = if root.is_dir() { path.strip_prefix(root).unwrap_or(path) } else { path };
    let rel = if rel.as_os_str().is_empty() || !root.is_dir() {
        Path::new(path.file_name().unwrap_or(path.as_os_str()))
    } else {
        rel
    };
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

pub fn create(path: &Path) -> anyhow::Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufWriter::new(std::io::stdout().lock())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// Proposal CSV: header `image,x,y,w,h,score`, scores in shortest round-trip form.
pub fn write_proposals_csv(out: &Path, rows: &[(String, Vec<ScoredBox>)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["image", "x", "y", "w", "h", "score"])?;
    for (image, boxes) in rows {
        for b in boxes {
            w.write_record([
                image.as_str(),
                &b.x.to_string(),
                &b.y.to_string(),
                &b.w.to_string(),
                &b.h.to_string(),
                &b.score.to_string(),
            ])?;
        }
    }
    w.flush().with_context(|| format!("writing {}", out.display()))
}

pub fn write_proposals_jsonl(out: &Path, rows: &[(String, Vec<ScoredBox>)]) -> anyhow::Result<()> {
    let mut w = create(out)?;
    for (image, boxes) in rows {
        for b in boxes {
            let v = serde_json::json!({ "image": image, "x": b.x, "y": b.y, "w": b.w, "h": b.h, "score": b.score });
            writeln!(w, "{v}")?;
        }
    }
    w.flush().with_context(|| format!("writing {}", out.display()))
}

/// Reads a proposal CSV back as `(image, x, y, w, h)` rows in file order.
pub fn read_proposals_csv(path: &Path) -> anyhow::Result<Vec<(String, [f64; 4])>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: missing column {name:?}", path.display()))
    };
    let (ci, cx, cy, cw, ch) = (col("image")?, col("x")?, col("y")?, col("w")?, col("h")?);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: record {}", path.display(), line + 1))?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec[i].trim().parse::<f64>().with_context(|| format!("{}: record {}: bad number {:?}", path.display(), line + 1, &rec[i]))
        };
        out.push((rec[ci].to_string(), [num(cx)?, num(cy)?, num(cw)?, num(ch)?]));
    }
    Ok(out)
}
