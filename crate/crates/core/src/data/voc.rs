//! PascalVOC annotation XML.

use std::path::Path;

use roxmltree::{Document, Node};

use super::{normalize_box, DatasetManifest, ImageRecord, PixelBox, Source, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocObject {
    pub name: String,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub objects: Vec<VocObject>,
}

fn child<'a>(node: Node<'a, 'a>, tag: &str, context: &str) -> Result<Node<'a, 'a>> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .ok_or_else(|| Error::Parse(format!("missing <{tag}> in <{context}>")))
}

fn child_text<'a>(node: Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn coord(bndbox: Node, tag: &str) -> Result<i64> {
    let text = child(bndbox, tag, "bndbox")?
        .text()
        .map(str::trim)
        .ok_or_else(|| Error::Parse(format!("empty <{tag}> in <bndbox>")))?;
    if let Ok(v) = text.parse::<i64>() {
        return Ok(v);
    }
    // A handful of VOC files carry fractional coordinates.
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(|v| v.round() as i64)
        .ok_or_else(|| Error::Parse(format!("<{tag}> is not a number: `{text}`")))
}

/// Objects of a VOC annotation in document order, pixel coordinates as written.
pub fn parse_voc_annotation(document: &[u8]) -> Result<Vec<VocObject>> {
    parse_voc_document(document).map(|a| a.objects)
}

pub fn parse_voc_document(document: &[u8]) -> Result<VocAnnotation> {
    let text = std::str::from_utf8(document).map_err(|e| Error::Parse(format!("not UTF-8: {e}")))?;
    let doc = Document::parse(text).map_err(|e| Error::Parse(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Parse(format!(
            "missing <annotation> root, found <{}>",
            root.tag_name().name()
        )));
    }
    let size = root.children().find(|c| c.has_tag_name("size"));
    let dim = |tag: &str| size.and_then(|s| child_text(s, tag)).and_then(|t| t.parse::<u32>().ok());

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child(obj, "name", "object")?
            .text()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse("empty <name> in <object>".into()))?
            .to_string();
        let bb = child(obj, "bndbox", "object")?;
        let bbox = PixelBox::new(coord(bb, "xmin")?, coord(bb, "ymin")?, coord(bb, "xmax")?, coord(bb, "ymax")?);
        if bbox.xmin >= bbox.xmax || bbox.ymin >= bbox.ymax {
            return Err(Error::InvalidAnnotation(format!(
                "object `{name}` has empty box ({}, {}, {}, {})",
                bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax
            )));
        }
        objects.push(VocObject { name, bbox });
    }
    Ok(VocAnnotation {
        filename: child_text(root, "filename").map(str::to_string),
        width: dim("width"),
        height: dim("height"),
        objects,
    })
}

/// Reads `Annotations/*.xml` under a VOC year directory (e.g. `VOC2012/`).
///
/// Each image becomes one record carrying its first object and the object
/// count; use [`super::filter_single_object`] to keep single-object images.
/// VOC pixel indices are 1-based and inclusive, so `xmin - 1` becomes the
/// left edge in continuous coordinates. Images whose annotation lists a class
/// outside `classes` are skipped when `classes` is non-empty.
pub fn ingest_voc(root: &Path, source: Source, classes: &[&str], seed: u64) -> Result<DatasetManifest> {
    let ann_dir = root.join("Annotations");
    let mut files: Vec<_> = std::fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    files.sort();

    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for path in files {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ann = parse_voc_document(&bytes).map_err(|e| Error::Ingestion {
            locator: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let Some(first) = ann.objects.first() else { continue };
        if !classes.is_empty() && !ann.objects.iter().all(|o| classes.contains(&o.name.as_str())) {
            continue;
        }
        let (Some(w), Some(h)) = (ann.width, ann.height) else {
            return Err(Error::Ingestion {
                locator: path.display().to_string(),
                reason: "missing <size>".into(),
            });
        };
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let filename = ann.filename.clone().unwrap_or_else(|| format!("{stem}.jpg"));
        let b = first.bbox;
        let pixel = PixelBox::new((b.xmin - 1).max(0), (b.ymin - 1).max(0), b.xmax.min(w as i64), b.ymax.min(h as i64));
        let bbox = normalize_box(pixel, w, h).map_err(|e| Error::Ingestion {
            locator: path.display().to_string(),
            reason: e.to_string(),
        })?;
        seen.insert(first.name.clone());
        records.push(ImageRecord {
            image_ref: format!("JPEGImages/{filename}"),
            width: w,
            height: h,
            category: Some(first.name.clone()),
            bbox: Some(bbox),
            source,
            object_count: ann.objects.len(),
        });
    }
    let class_names = if classes.is_empty() {
        seen.into_iter().collect()
    } else {
        classes.iter().map(|c| c.to_string()).collect()
    };
    DatasetManifest::new(class_names, seed, Split::Train, records)
}
