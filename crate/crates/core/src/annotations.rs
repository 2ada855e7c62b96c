//! Ground-truth boxes: VOC-style XML and the `image_path,label,x,y,w,h` line format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;

/// One annotated object, 0-indexed pixel box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub label: String,
}

impl AnnotatedBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64)
    }
}

/// An image path with all of its boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAnnotations {
    pub image: PathBuf,
    pub boxes: Vec<AnnotatedBox>,
}

/// Parses one VOC XML document. Returns the `<filename>` and its objects,
/// difficult ones included. Coordinates are converted from 1-indexed inclusive.
pub fn parse_voc_xml(text: &str, source: &Path) -> Result<(String, Vec<AnnotatedBox>)> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::parse(source, e.to_string()))?;
    let root = doc.root_element();
    let child_text = |node: roxmltree::Node, name: &str| -> Option<String> {
        node.children()
            .find(|c| c.has_tag_name(name))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
    };
    let filename = child_text(root, "filename").ok_or_else(|| Error::parse(source, "missing <filename>"))?;
    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let label = child_text(obj, "name").ok_or_else(|| Error::parse(source, "<object> without <name>"))?;
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| Error::parse(source, "<object> without <bndbox>"))?;
        let coord = |name: &str| -> Result<f64> {
            let t = child_text(bb, name).ok_or_else(|| Error::parse(source, format!("<bndbox> without <{name}>")))?;
            t.parse::<f64>().map_err(|_| Error::parse(source, format!("<{name}> is not a number: {t:?}")))
        };
        let (xmin, ymin, xmax, ymax) = (coord("xmin")?, coord("ymin")?, coord("xmax")?, coord("ymax")?);
        if xmax < xmin || ymax < ymin || xmin < 1.0 || ymin < 1.0 {
            return Err(Error::parse(source, format!("degenerate box {xmin},{ymin},{xmax},{ymax}")));
        }
        boxes.push(AnnotatedBox {
            image_id: filename.clone(),
            x: xmin.round() as u32 - 1,
            y: ymin.round() as u32 - 1,
            w: (xmax - xmin).round() as u32 + 1,
            h: (ymax - ymin).round() as u32 + 1,
            label,
        });
    }
    Ok((filename, boxes))
}

/// Reads every `*.xml` in `dir` (sorted by name); image paths are resolved against `images`.
pub fn load_voc_dir(dir: &Path, images: &Path) -> Result<Vec<ImageAnnotations>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let (filename, boxes) = parse_voc_xml(&text, f)?;
            Ok(ImageAnnotations { image: images.join(filename), boxes })
        })
        .collect()
}

/// Parses `image_path,label,x,y,w,h` lines; blank lines and `#` comments are skipped.
/// Relative image paths are resolved against `base`. Images keep first-seen order.
pub fn parse_line_format(text: &str, base: &Path, source: &Path) -> Result<Vec<ImageAnnotations>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out: Vec<ImageAnnotations> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(source, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 6 {
            return Err(Error::parse(source, format!("record {}: expected 6 fields, got {}", line + 1, rec.len())));
        }
        let num = |i: usize| -> Result<u32> {
            rec[i]
                .parse::<u32>()
                .map_err(|_| Error::parse(source, format!("record {}: field {} is not a count: {:?}", line + 1, i + 1, &rec[i])))
        };
        let (x, y, w, h) = (num(2)?, num(3)?, num(4)?, num(5)?);
        if w == 0 || h == 0 {
            return Err(Error::parse(source, format!("record {}: empty box", line + 1)));
        }
        let image = base.join(&rec[0]);
        let b = AnnotatedBox { image_id: rec[0].to_string(), x, y, w, h, label: rec[1].to_string() };
        match out.iter_mut().find(|e| e.image == image) {
            Some(entry) => entry.boxes.push(b),
            None => out.push(ImageAnnotations { image, boxes: vec![b] }),
        }
    }
    Ok(out)
}

/// Line-format text for `boxes`.
pub fn format_line_format(boxes: &[AnnotatedBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!("{},{},{},{},{},{}\n", b.image_id, b.label, b.x, b.y, b.w, b.h));
    }
    s
}

/// Loads a VOC directory or a line-format file.
pub fn load_annotations(path: &Path, images: &Path) -> Result<Vec<ImageAnnotations>> {
    if path.is_dir() {
        load_voc_dir(path, images)
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_line_format(&text, images, path)
    }
}
