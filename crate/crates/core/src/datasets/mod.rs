//! Dataset manifests and item loading for BSDS500, PASCAL VOC 2012,
//! COCO-Stuff (27 coarse classes) and the synthetic block corpus.

pub mod coco;
pub mod mat;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

pub use coco::MergeTable;
pub use synthetic::{synthetic_corpus, SyntheticSpec};

use crate::error::{Error, Result};
use crate::eval::ClassSplit;
use crate::label_io::{read_image, read_label_map};
use crate::types::{ImageTensor, LabelMap};

/// Label marking void pixels in VOC and unlabeled pixels in COCO-Stuff.
pub const VOID_LABEL: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Bsd500,
    Voc2012,
    CocoStuff,
    Synthetic,
}

impl DatasetName {
    pub fn default_split(&self) -> &'static str {
        match self {
            DatasetName::Bsd500 => "test",
            DatasetName::Voc2012 => "trainval",
            DatasetName::CocoStuff => "val2017",
            DatasetName::Synthetic => "all",
        }
    }

    /// Published size of the split used for evaluation.
    pub fn expected_count(&self) -> Option<usize> {
        match self {
            DatasetName::Bsd500 => Some(200),
            DatasetName::Voc2012 => Some(2913),
            DatasetName::CocoStuff => Some(2175),
            DatasetName::Synthetic => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Bsd500 => "bsd500",
            DatasetName::Voc2012 => "voc2012",
            DatasetName::CocoStuff => "coco_stuff",
            DatasetName::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bsd500" | "bsds500" | "bsd" => Ok(DatasetName::Bsd500),
            "voc2012" | "voc" | "pascal" => Ok(DatasetName::Voc2012),
            "coco_stuff" | "coco" | "cocostuff" => Ok(DatasetName::CocoStuff),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

/// Ground-truth annotations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Several for BSDS500 (one per annotator), exactly one elsewhere.
    pub variants: Vec<LabelMap>,
    pub ignore_label: Option<u32>,
}

impl GroundTruth {
    pub fn single(map: LabelMap, ignore_label: Option<u32>) -> Self {
        Self {
            variants: vec![map],
            ignore_label,
        }
    }
}

/// Resolved directories of a dataset on disk.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    images: PathBuf,
    labels: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: DatasetName,
    pub root: PathBuf,
    pub split: String,
    /// Item ids in sorted order.
    pub ids: Vec<String>,
    pub class_table: Option<ClassSplit>,
    pub ignore_label: Option<u32>,
    layout: Option<Layout>,
    merge: Option<MergeTable>,
    synthetic: Option<SyntheticSpec>,
}

fn first_existing(candidates: &[PathBuf]) -> Option<PathBuf> {
    candidates.iter().find(|p| p.is_dir()).cloned()
}

fn stems_with_ext(dir: &Path, exts: &[&str]) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut ids: Vec<String> = text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            // accept bare ids as well as file names
            Path::new(l)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| l.to_string())
        })
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn bsd_layout(root: &Path, split: &str) -> Result<Layout> {
    let bases = [root.join("BSR/BSDS500/data"), root.join("BSDS500/data"), root.join("data"), root.to_path_buf()];
    for base in &bases {
        let images = base.join("images").join(split);
        let labels = base.join("groundTruth").join(split);
        if images.is_dir() && labels.is_dir() {
            return Ok(Layout { images, labels });
        }
    }
    Err(Error::CorruptLayout(format!(
        "{}: expected images/{split} and groundTruth/{split} (optionally under BSR/BSDS500/data)",
        root.display()
    )))
}

fn voc_base(root: &Path) -> Result<PathBuf> {
    first_existing(&[root.join("VOCdevkit/VOC2012"), root.join("VOC2012"), root.to_path_buf()])
        .filter(|b| b.join("JPEGImages").is_dir())
        .ok_or_else(|| Error::CorruptLayout(format!("{}: no JPEGImages directory", root.display())))
}

fn voc_layout(root: &Path) -> Result<Layout> {
    let base = voc_base(root)?;
    // instance masks give per-object segments; class masks are the fallback
    let labels = first_existing(&[base.join("SegmentationObject"), base.join("SegmentationClass")])
        .ok_or_else(|| Error::CorruptLayout(format!("{}: no SegmentationObject or SegmentationClass", base.display())))?;
    Ok(Layout {
        images: base.join("JPEGImages"),
        labels,
    })
}

fn coco_layout(root: &Path, split: &str) -> Result<Layout> {
    let images = first_existing(&[root.join("images").join(split), root.join(split)])
        .ok_or_else(|| Error::CorruptLayout(format!("{}: no images/{split}", root.display())))?;
    let labels = first_existing(&[
        root.join("annotations").join(split),
        root.join("stuffthingmaps_trainval2017").join(split),
        root.join("stuffthingmaps").join(split),
    ])
    .ok_or_else(|| Error::CorruptLayout(format!("{}: no annotations/{split}", root.display())))?;
    Ok(Layout { images, labels })
}

/// Options for [`load_manifest_with`].
#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// Explicit list of ids to keep (one per line).
    pub id_list: Option<PathBuf>,
    /// Replaces the shipped COCO merge table.
    pub merge_table: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

pub fn load_manifest(name: DatasetName, root: &Path, split: &str) -> Result<DatasetManifest> {
    load_manifest_with(name, root, split, &ManifestOptions::default())
}

pub fn load_manifest_with(
    name: DatasetName,
    root: &Path,
    split: &str,
    opts: &ManifestOptions,
) -> Result<DatasetManifest> {
    if name == DatasetName::Synthetic {
        let spec = opts.synthetic.unwrap_or_default();
        spec.validate()?;
        return Ok(DatasetManifest {
            name,
            root: root.to_path_buf(),
            split: split.to_string(),
            ids: spec.ids(),
            class_table: None,
            ignore_label: None,
            layout: None,
            merge: None,
            synthetic: Some(spec),
        });
    }
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let (layout, mut ids, class_table, ignore, merge) = match name {
        DatasetName::Bsd500 => {
            let layout = bsd_layout(root, split)?;
            let ids = stems_with_ext(&layout.images, &["jpg", "jpeg", "png"])?;
            (layout, ids, None, None, None)
        }
        DatasetName::Voc2012 => {
            let layout = voc_layout(root)?;
            let list = voc_base(root)?.join("ImageSets/Segmentation").join(format!("{split}.txt"));
            let ids = if list.is_file() {
                read_id_list(&list)?
            } else {
                stems_with_ext(&layout.labels, &["png"])?
            };
            (layout, ids, None, Some(VOID_LABEL), None)
        }
        DatasetName::CocoStuff => {
            let layout = coco_layout(root, split)?;
            let curated = root.join("curated").join(split).join("Coco164kFull_Stuff_Coarse_7.txt");
            let ids = if curated.is_file() {
                read_id_list(&curated)?
            } else {
                stems_with_ext(&layout.images, &["jpg", "jpeg", "png"])?
            };
            let merge = match &opts.merge_table {
                Some(p) => MergeTable::load(p)?,
                None => MergeTable::shipped(),
            };
            (layout, ids, Some(coco::class_split()), Some(VOID_LABEL), Some(merge))
        }
        DatasetName::Synthetic => unreachable!(),
    };
    if let Some(list) = &opts.id_list {
        let keep = read_id_list(list)?;
        ids.retain(|id| keep.binary_search(id).is_ok());
    }
    if ids.is_empty() {
        return Err(Error::CorruptLayout(format!("{}: no items found", root.display())));
    }
    if let Some(expected) = name.expected_count() {
        if ids.len() != expected && opts.id_list.is_none() {
            log::warn!("{name}: found {} items, the reference split has {expected}", ids.len());
        }
    }
    Ok(DatasetManifest {
        name,
        root: root.to_path_buf(),
        split: split.to_string(),
        ids,
        class_table,
        ignore_label: ignore,
        layout: Some(layout),
        merge,
        synthetic: None,
    })
}

fn find_with_ext(dir: &Path, id: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{id}.{e}"))).find(|p| p.is_file())
}

/// Densifies segment ids to `0..n` in ascending order, keeping `ignore`.
fn densify_keep(map: LabelMap, ignore: Option<u32>) -> LabelMap {
    let ids = map.distinct(ignore);
    if ids.iter().enumerate().all(|(i, &v)| i as u32 == v) {
        return map;
    }
    let relabeled = map.labels().mapv(|v| {
        if Some(v) == ignore {
            v
        } else {
            ids.binary_search(&v).unwrap() as u32
        }
    });
    LabelMap::new(relabeled)
}

fn bsd_variants(dir: &Path, id: &str) -> Result<Vec<LabelMap>> {
    let mat = dir.join(format!("{id}.mat"));
    if mat.is_file() {
        let bytes = std::fs::read(&mat)?;
        let segs = mat::bsds_segmentations(&bytes).map_err(|e| Error::decode(&mat, e))?;
        return segs
            .into_iter()
            .map(|(h, w, labels)| LabelMap::from_vec(h, w, labels))
            .collect();
    }
    // exported form: <id>_<k>.png per annotator
    let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "png")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.strip_prefix(id))
                    .and_then(|s| s.strip_prefix('_'))
                    .is_some_and(|k| k.chars().all(|c| c.is_ascii_digit()))
        })
        .collect();
    pngs.sort();
    pngs.iter().map(|p| read_label_map(p)).collect()
}

/// Resizes so the shorter side equals `short`, labels with nearest neighbour.
pub fn resize_shorter_side(image: &ImageTensor, gt: Option<&LabelMap>, short: usize) -> Result<(ImageTensor, Option<LabelMap>)> {
    let (h, w) = (image.height(), image.width());
    if short == 0 || h.min(w) == short {
        return Ok((image.clone(), gt.cloned()));
    }
    let scaled = |v: usize| ((v as f64 * short as f64 / h.min(w) as f64).round() as usize).max(1);
    let (nh, nw) = if h <= w { (short, scaled(w)) } else { (scaled(h), short) };
    let img = image::imageops::resize(&image.to_rgb8(), nw as u32, nh as u32, FilterType::Triangle);
    let resized = ImageTensor::from_rgb8(&img, image.source_id())?;
    Ok((resized, gt.map(|g| resize_labels(g, nh, nw))))
}

/// Nearest-neighbour resampling of a label map to `nh x nw`.
pub fn resize_labels(labels: &LabelMap, nh: usize, nw: usize) -> LabelMap {
    let (h, w) = labels.dims();
    if (h, w) == (nh, nw) {
        return labels.clone();
    }
    // pixel centres map back to source pixel centres
    LabelMap::new(ndarray::Array2::from_shape_fn((nh, nw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
        labels.labels()[[sy, sx]]
    }))
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn synthetic_spec(&self) -> Option<&SyntheticSpec> {
        self.synthetic.as_ref()
    }

    pub fn merge_table(&self) -> Option<&MergeTable> {
        self.merge.as_ref()
    }

    /// Image and remapped ground truth of one item.
    pub fn load_item(&self, id: &str) -> Result<(ImageTensor, GroundTruth)> {
        if let Some(spec) = &self.synthetic {
            let idx = self
                .ids
                .iter()
                .position(|i| i == id)
                .ok_or_else(|| Error::Config(format!("unknown item '{id}'")))?;
            let mut corpus = synthetic_corpus(&SyntheticSpec {
                count: idx + 1,
                ..*spec
            })?;
            return Ok(corpus.swap_remove(idx));
        }
        if self.ids.binary_search_by(|p| p.as_str().cmp(id)).is_err() {
            return Err(Error::Config(format!("'{id}' is not in the {} manifest", self.name)));
        }
        let layout = self.layout.as_ref().expect("on-disk manifest has a layout");
        let img_path = find_with_ext(&layout.images, id, &["jpg", "jpeg", "png", "JPG"])
            .ok_or_else(|| Error::decode(layout.images.join(id), "image file not found"))?;
        let image = read_image(&img_path)?;
        let gt = match self.name {
            DatasetName::Bsd500 => {
                let variants = bsd_variants(&layout.labels, id)?;
                if variants.is_empty() {
                    return Err(Error::NoGroundTruth(id.to_string()));
                }
                GroundTruth {
                    variants: variants.into_iter().map(|v| densify_keep(v, None)).collect(),
                    ignore_label: None,
                }
            }
            DatasetName::Voc2012 => {
                let path = layout.labels.join(format!("{id}.png"));
                GroundTruth::single(densify_keep(read_label_map(&path)?, Some(VOID_LABEL)), Some(VOID_LABEL))
            }
            DatasetName::CocoStuff => {
                let path = layout.labels.join(format!("{id}.png"));
                let fine = read_label_map(&path)?;
                let merge = self.merge.as_ref().expect("coco manifest has a merge table");
                let coarse = fine.labels().mapv(|v| merge.coarse(v).unwrap_or(VOID_LABEL));
                GroundTruth::single(LabelMap::new(coarse), Some(VOID_LABEL))
            }
            DatasetName::Synthetic => unreachable!(),
        };
        for v in &gt.variants {
            if v.dims() != (image.height(), image.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "{id}: image is {}x{}, ground truth is {:?}",
                    image.height(),
                    image.width(),
                    v.dims()
                )));
            }
        }
        Ok((image, gt))
    }
}

/// Result of a layout check.
#[derive(Debug, Clone, PartialEq)]
pub struct DoctorReport {
    pub name: DatasetName,
    pub items: usize,
    pub expected: Option<usize>,
    pub problems: Vec<String>,
}

impl DoctorReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Validates the on-disk layout and that every listed item has an image and
/// ground truth.
pub fn doctor(name: DatasetName, root: &Path, split: &str, opts: &ManifestOptions) -> Result<DoctorReport> {
    let manifest = load_manifest_with(name, root, split, opts)?;
    let mut problems = Vec::new();
    if let Some(layout) = &manifest.layout {
        for id in &manifest.ids {
            if find_with_ext(&layout.images, id, &["jpg", "jpeg", "png", "JPG"]).is_none() {
                problems.push(format!("{id}: image missing"));
            }
            let has_gt = match name {
                DatasetName::Bsd500 => {
                    layout.labels.join(format!("{id}.mat")).is_file()
                        || layout.labels.join(format!("{id}_0.png")).is_file()
                        || layout.labels.join(format!("{id}_1.png")).is_file()
                }
                _ => layout.labels.join(format!("{id}.png")).is_file(),
            };
            if !has_gt {
                problems.push(format!("{id}: ground truth missing"));
            }
        }
    }
    Ok(DoctorReport {
        name,
        items: manifest.len(),
        expected: name.expected_count(),
        problems,
    })
}
