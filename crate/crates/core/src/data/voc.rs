//! VOC-style annotation ingest joined with a precomputed feature table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use crate::error::{Error, Result};
use crate::model::{BoundingBox, DatasetStore, GivenLabel, Label, Partition, Provenance, Sample, SampleId};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub name: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub source: String,
    pub objects: Vec<GroundTruthObject>,
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str, path: &str) -> Result<roxmltree::Node<'a, 'i>> {
    node.children()
        .find(|n| n.has_tag_name(name))
        .ok_or_else(|| Error::MissingElement(format!("{path}/{name}")))
}

fn text<'a>(node: roxmltree::Node<'a, '_>, name: &str, path: &str) -> Result<&'a str> {
    let n = child(node, name, path)?;
    n.text()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::MissingElement(format!("{path}/{name}")))
}

fn number(node: roxmltree::Node<'_, '_>, name: &str, path: &str) -> Result<f64> {
    let raw = text(node, name, path)?;
    raw.parse::<f64>()
        .map_err(|_| Error::Xml(format!("{path}/{name}: `{raw}` is not a number")))
}

/// Parses one annotation document. Pixel boxes are normalized by the image
/// size into corner + size form.
pub fn parse_voc_xml(document: &str) -> Result<GroundTruthRecord> {
    let doc = roxmltree::Document::parse(document).map_err(|e| Error::Xml(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::MissingElement("annotation".into()));
    }
    let source = text(root, "filename", "annotation")?.to_string();
    let size = child(root, "size", "annotation")?;
    let width = number(size, "width", "annotation/size")?;
    let height = number(size, "height", "annotation/size")?;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid(format!("image size {width}x{height} must be positive")));
    }

    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|n| n.has_tag_name("object")).enumerate() {
        let path = format!("annotation/object[{i}]");
        let name = text(obj, "name", &path)?.to_string();
        let bb_path = format!("{path}/bndbox");
        let bb = child(obj, "bndbox", &path)?;
        let xmin = number(bb, "xmin", &bb_path)?;
        let ymin = number(bb, "ymin", &bb_path)?;
        let xmax = number(bb, "xmax", &bb_path)?;
        let ymax = number(bb, "ymax", &bb_path)?;
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::InvalidBox(format!(
                "{bb_path}: ({xmin},{ymin})-({xmax},{ymax}) has no area"
            )));
        }
        let bbox = BoundingBox::new(
            xmin / width,
            ymin / height,
            (xmax - xmin) / width,
            (ymax - ymin) / height,
        )?;
        objects.push(GroundTruthObject { name, bbox });
    }
    Ok(GroundTruthRecord { source, objects })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub name: String,
    pub features: Vec<f64>,
}

/// Reads a feature table with header `name,f0,f1,...`.
pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("name") {
        return Err(Error::invalid("feature table must start with a `name` column"));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{j}") {
            return Err(Error::invalid(format!("feature column {} should be `f{j}`, found `{h}`", j + 1)));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let name = rec.get(0).unwrap_or_default().to_string();
        let features = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("row `{name}`: `{v}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FeatureRow { name, features });
    }
    Ok(rows)
}

/// Fans each annotated object out into its own sample carrying the source's
/// feature vector. `classes` fixes the class-name to id mapping; sources not
/// named in `splits` land in the tentative partition, unlabeled. Well samples
/// receive their truth as the given label.
pub fn join_features(
    records: &[GroundTruthRecord],
    table: &[FeatureRow],
    classes: &[String],
    splits: &BTreeMap<String, Partition>,
) -> Result<DatasetStore> {
    let mut by_name: BTreeMap<&str, &[f64]> = BTreeMap::new();
    for row in table {
        if by_name.insert(&row.name, &row.features).is_some() {
            return Err(Error::Duplicate(row.name.clone()));
        }
    }
    let dim = table.first().map_or(0, |r| r.features.len());
    if let Some(r) = table.iter().find(|r| r.features.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: r.features.len(),
        });
    }

    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    for r in records {
        if !seen.insert(r.source.as_str()) {
            return Err(Error::Duplicate(r.source.clone()));
        }
        if !by_name.contains_key(r.source.as_str()) {
            missing.push(r.source.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFeatures(missing));
    }

    let class_ids: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut store = DatasetStore::new(dim);
    let mut next: SampleId = 0;
    for r in records {
        let features = by_name[r.source.as_str()];
        let partition = splits.get(&r.source).copied().unwrap_or(Partition::Tentative);
        for obj in &r.objects {
            let class = *class_ids
                .get(obj.name.as_str())
                .ok_or_else(|| Error::invalid(format!("{}: unknown class `{}`", r.source, obj.name)))?;
            let mut sample = Sample::new(next, features.to_vec(), Some(Label { class, bbox: obj.bbox }));
            if partition == Partition::Well {
                sample.given_label = Some(GivenLabel {
                    class,
                    bbox: obj.bbox,
                    provenance: Provenance::Initial,
                });
            }
            store.insert(sample, partition)?;
            next += 1;
        }
    }
    Ok(store)
}
