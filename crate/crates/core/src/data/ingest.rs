use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rayon::prelude::*;

use super::{DomainDataset, DEFECT_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Boxes with pixel area strictly below this are dropped.
    pub min_area: u64,
    /// Side length of the square output crop.
    pub out_size: u32,
    /// Raw annotation label to output class; unmapped labels are dropped.
    pub class_map: BTreeMap<String, String>,
    /// Output class list, in class-id order.
    pub classes: Vec<String>,
    pub name: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        let classes: Vec<String> = DEFECT_CLASSES.iter().map(|s| s.to_string()).collect();
        IngestOptions {
            min_area: 400,
            out_size: 64,
            class_map: classes.iter().map(|c| (c.clone(), c.clone())).collect(),
            classes,
            name: "ingested".into(),
        }
    }
}

#[derive(Debug)]
pub struct IngestReport {
    pub dataset: DomainDataset,
    pub dropped_small: usize,
    pub dropped_unmapped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
struct BoxAnn {
    class: usize,
    xmin: i64,
    ymin: i64,
    xmax: i64,
    ymax: i64,
}

struct Annotation {
    image: PathBuf,
    boxes: Vec<BoxAnn>,
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|n| n.has_tag_name(tag))
        .and_then(|n| n.text())
        .map(str::trim)
}

fn coord(bnd: roxmltree::Node, tag: &str, path: &Path) -> Result<i64> {
    let raw = child_text(bnd, tag).ok_or_else(|| Error::parse(path, format!("bndbox without {tag}")))?;
    // Some exporters write fractional pixel coordinates.
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(|v| v.round() as i64)
        .ok_or_else(|| Error::parse(path, format!("{tag} is not a number: {raw:?}")))
}

fn parse_annotation(
    path: &Path,
    images_dir: &Path,
    opts: &IngestOptions,
    dropped_unmapped: &mut usize,
) -> Result<Annotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let root = doc.root_element();
    let filename = child_text(root, "filename")
        .map(str::to_string)
        .or_else(|| {
            path.file_stem()
                .map(|s| format!("{}.jpg", s.to_string_lossy()))
        })
        .ok_or_else(|| Error::parse(path, "no filename"))?;
    let mut boxes = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let raw = child_text(obj, "name").ok_or_else(|| Error::parse(path, "object without name"))?;
        let Some(class) = opts
            .class_map
            .get(raw)
            .and_then(|mapped| opts.classes.iter().position(|c| c == mapped))
        else {
            *dropped_unmapped += 1;
            continue;
        };
        let bnd = obj
            .children()
            .find(|n| n.has_tag_name("bndbox"))
            .ok_or_else(|| Error::parse(path, "object without bndbox"))?;
        boxes.push(BoxAnn {
            class,
            xmin: coord(bnd, "xmin", path)?,
            ymin: coord(bnd, "ymin", path)?,
            xmax: coord(bnd, "xmax", path)?,
            ymax: coord(bnd, "ymax", path)?,
        });
    }
    Ok(Annotation {
        image: images_dir.join(filename),
        boxes,
    })
}

/// Crops, resizes and flattens the retained boxes of one image. Returns
/// `None` when the image cannot be decoded.
fn crop_image(ann: &Annotation, size: u32) -> Option<Vec<(usize, Vec<f64>)>> {
    let img = image::open(&ann.image).ok()?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity(ann.boxes.len());
    for b in &ann.boxes {
        let x0 = b.xmin.clamp(0, w as i64) as u32;
        let y0 = b.ymin.clamp(0, h as i64) as u32;
        let x1 = b.xmax.clamp(0, w as i64) as u32;
        let y1 = b.ymax.clamp(0, h as i64) as u32;
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let crop = imageops::crop_imm(&img, x0, y0, x1 - x0, y1 - y0).to_image();
        let resized = imageops::resize(&crop, size, size, FilterType::Triangle);
        let v = resized.as_raw().iter().map(|&p| p as f64 / 255.0).collect();
        out.push((b.class, v));
    }
    Some(out)
}

/// Builds a dataset from VOC-style XML annotations and their images.
///
/// Samples are ordered by annotation file name, then box index. Each
/// sample is the RGB crop resized to `out_size × out_size`, scaled to
/// [0, 1] and flattened row-major with interleaved channels.
pub fn ingest_crops(images_dir: &Path, annotations_dir: &Path, opts: &IngestOptions) -> Result<IngestReport> {
    if opts.out_size == 0 {
        return Err(Error::Config("output size must be positive".into()));
    }
    let mut xml_files: Vec<PathBuf> = fs::read_dir(annotations_dir)
        .map_err(|e| Error::io(annotations_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
        .collect();
    xml_files.sort();

    let mut dropped_unmapped = 0;
    let mut dropped_small = 0;
    let mut annotations = Vec::with_capacity(xml_files.len());
    for path in &xml_files {
        let mut ann = parse_annotation(path, images_dir, opts, &mut dropped_unmapped)?;
        let before = ann.boxes.len();
        ann.boxes.retain(|b| {
            let area = (b.xmax - b.xmin).max(0) as u64 * (b.ymax - b.ymin).max(0) as u64;
            area >= opts.min_area
        });
        dropped_small += before - ann.boxes.len();
        annotations.push(ann);
    }

    // Per annotation file: `None` when its image is unreadable, else (class, crop) pairs.
    #[allow(clippy::type_complexity)]
    let crops: Vec<Option<Vec<(usize, Vec<f64>)>>> = annotations
        .par_iter()
        .map(|ann| {
            if ann.boxes.is_empty() {
                Some(Vec::new())
            } else {
                crop_image(ann, opts.out_size)
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ann, result) in annotations.iter().zip(crops) {
        match result {
            Some(samples) => {
                for (class, v) in samples {
                    labels.push(class);
                    features.extend(v);
                }
            }
            None => {
                let msg = format!("skipping unreadable image {}", ann.image.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!(
            "no crops retained from {}",
            annotations_dir.display()
        )));
    }
    let dim = (opts.out_size as usize).pow(2) * 3;
    let dataset = DomainDataset::new(opts.name.clone(), opts.classes.clone(), dim, features, labels)?;
    Ok(IngestReport {
        dataset,
        dropped_small,
        dropped_unmapped,
        warnings,
    })
}

/// Per-class counts followed by the total, e.g. `764 300 129 154 1347`.
pub fn table_row(dataset: &DomainDataset) -> String {
    let counts = dataset.class_counts();
    let mut parts: Vec<String> = counts.iter().map(usize::to_string).collect();
    parts.push(counts.iter().sum::<usize>().to_string());
    parts.join(" ")
}
