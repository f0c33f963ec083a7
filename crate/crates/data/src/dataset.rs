//! Dataset directories: PNG images, IMDT tensors and an `index.json`.
//!
//! ```json
//! {"pairs": [
//!   {"id": "warp-0", "a": "warp-0-a.png", "b": "warp-0-b.png", "h": "warp-0-h.imdt", "split": "train"},
//!   {"id": "pose-0", "a": "...", "b": "...", "pose_a": {"k": [..9], "r": [..9], "t": [..3]},
//!    "pose_b": {...}, "depth_a": "pose-0-depth-a.imdt", "split": "test"},
//!   {"id": "multi-0", "a": "...", "b": "...", "mask_a": "multi-0-mask-a.imdt",
//!    "mask_b": "multi-0-mask-b.imdt", "designated": 0, "split": "test"}
//! ]}
//! ```
//!
//! Homographies are `f64 [3, 3]`, depth maps `f64 [H, W]`, and instance masks
//! `u8 [n, H, W]`. Paths are relative to the dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use imd_core::{CameraFrame, DepthMap, Image, InstanceMaskPair, Mask, NdTensor};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

pub const INDEX_FILE: &str = "index.json";

/// Ground truth carried by a record; exactly one kind per record.
#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    Homography(Matrix3<f64>),
    Posed { a: CameraFrame, b: CameraFrame },
    Masks {
        instances: Vec<InstanceMaskPair>,
        designated: usize,
        /// Optional motion annotation used for training on mask pairs.
        background: Option<Matrix3<f64>>,
        motions: Option<Vec<Matrix3<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    pub supervision: Supervision,
    pub split: String,
}

impl PairRecord {
    pub fn homography(&self) -> Option<&Matrix3<f64>> {
        match &self.supervision {
            Supervision::Homography(h) => Some(h),
            _ => None,
        }
    }

    pub fn evaluation_masks(&self) -> Option<&InstanceMaskPair> {
        match &self.supervision {
            Supervision::Masks { instances, designated, .. } => instances.get(*designated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub k: [f64; 9],
    pub r: [f64; 9],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_a: Option<PoseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_b: Option<PoseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub designated: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_h: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motions: Option<String>,
    pub split: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub pairs: Vec<IndexEntry>,
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("image buffer matches its dims");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Image::new(id, rgb.width() as usize, rgb.height() as usize, rgb.into_raw())?)
}

fn matrix_tensor(m: &Matrix3<f64>) -> NdTensor {
    let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    NdTensor::f64(vec![3, 3], rows).expect("3x3 shape")
}

fn matrix_from(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

fn masks_tensor(masks: &[&Mask]) -> NdTensor {
    let (w, h) = (masks[0].width, masks[0].height);
    let data: Vec<u8> = masks.iter().flat_map(|m| m.to_bytes()).collect();
    NdTensor::u8(vec![masks.len(), h, w], data).expect("mask stack shape")
}

fn pose_entry(f: &CameraFrame) -> PoseEntry {
    let flat = |m: &Matrix3<f64>| -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = m[(r, c)];
            }
        }
        out
    };
    PoseEntry { k: flat(&f.k), r: flat(&f.r), t: [f.t.x, f.t.y, f.t.z] }
}

/// Writes records under `root` and returns the index written.
pub fn write_dataset(root: &Path, records: &[PairRecord]) -> Result<Index> {
    fs::create_dir_all(root)?;
    let mut index = Index::default();
    for rec in records {
        let id = &rec.id;
        let mut e = IndexEntry {
            id: id.clone(),
            a: format!("{id}-a.png"),
            b: format!("{id}-b.png"),
            split: rec.split.clone(),
            ..IndexEntry::default()
        };
        write_png(&rec.image_a, &root.join(&e.a))?;
        write_png(&rec.image_b, &root.join(&e.b))?;
        match &rec.supervision {
            Supervision::Homography(h) => {
                let f = format!("{id}-h.imdt");
                matrix_tensor(h).write(root.join(&f))?;
                e.h = Some(f);
            }
            Supervision::Posed { a, b } => {
                e.pose_a = Some(pose_entry(a));
                e.pose_b = Some(pose_entry(b));
                for (frame, slot, tag) in [(a, &mut e.depth_a, "a"), (b, &mut e.depth_b, "b")] {
                    if let Some(d) = &frame.depth {
                        let f = format!("{id}-depth-{tag}.imdt");
                        NdTensor::f64(vec![d.height, d.width], d.data.clone())?.write(root.join(&f))?;
                        *slot = Some(f);
                    }
                }
            }
            Supervision::Masks { instances, designated, background, motions } => {
                let fa = format!("{id}-mask-a.imdt");
                let fb = format!("{id}-mask-b.imdt");
                masks_tensor(&instances.iter().map(|p| &p.source_mask).collect::<Vec<_>>()).write(root.join(&fa))?;
                masks_tensor(&instances.iter().map(|p| &p.target_mask).collect::<Vec<_>>()).write(root.join(&fb))?;
                e.mask_a = Some(fa);
                e.mask_b = Some(fb);
                e.designated = Some(*designated);
                if let Some(bg) = background {
                    let f = format!("{id}-background.imdt");
                    matrix_tensor(bg).write(root.join(&f))?;
                    e.background_h = Some(f);
                }
                if let Some(ms) = motions {
                    let f = format!("{id}-motions.imdt");
                    let data: Vec<f64> = ms.iter().flat_map(|m| matrix_tensor(m).to_f64_vec()).collect();
                    NdTensor::f64(vec![ms.len(), 3, 3], data)?.write(root.join(&f))?;
                    e.motions = Some(f);
                }
            }
        }
        index.pairs.push(e);
    }
    fs::write(root.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

/// Lazily loads the records listed in `root/index.json`, in file order.
pub fn load_dataset(root: &Path) -> Result<DatasetIter> {
    let path = root.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::Record { path: path.clone(), reason: e.to_string() })?;
    let index: Index =
        serde_json::from_str(&text).map_err(|e| DataError::Record { path: path.clone(), reason: e.to_string() })?;
    Ok(DatasetIter { root: root.to_path_buf(), entries: index.pairs.into_iter() })
}

pub struct DatasetIter {
    root: PathBuf,
    entries: std::vec::IntoIter<IndexEntry>,
}

impl DatasetIter {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == 0
    }
}

impl Iterator for DatasetIter {
    type Item = Result<PairRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = self.entries.next()?;
        Some(load_entry(&self.root, &e))
    }
}

fn record_err(path: &Path, reason: impl std::fmt::Display) -> DataError {
    DataError::Record { path: path.to_path_buf(), reason: reason.to_string() }
}

fn read_tensor(root: &Path, file: &str) -> Result<NdTensor> {
    let p = root.join(file);
    if !p.exists() {
        return Err(record_err(&p, "file not found"));
    }
    NdTensor::read(&p).map_err(|e| record_err(&p, e))
}

fn frame(root: &Path, id: &str, pose: &PoseEntry, depth: Option<&String>) -> Result<CameraFrame> {
    let depth = match depth {
        Some(f) => {
            let t = read_tensor(root, f)?;
            let &[h, w] = t.shape() else {
                return Err(record_err(&root.join(f), format!("depth must be rank 2, got {:?}", t.shape())));
            };
            Some(DepthMap::new(w, h, t.to_f64_vec()).map_err(|e| record_err(&root.join(f), e))?)
        }
        None => None,
    };
    CameraFrame::new(matrix_from(&pose.k), matrix_from(&pose.r), Vector3::from_row_slice(&pose.t), depth)
        .map_err(|e| record_err(&root.join(INDEX_FILE), format!("{id}: {e}")))
}

fn masks(root: &Path, file: &str) -> Result<Vec<Mask>> {
    let t = read_tensor(root, file)?;
    let p = root.join(file);
    let &[n, h, w] = t.shape() else {
        return Err(record_err(&p, format!("masks must be u8 [n, H, W], got {:?}", t.shape())));
    };
    let bytes = t.as_u8().ok_or_else(|| record_err(&p, "masks must be u8"))?;
    (0..n)
        .map(|k| Mask::from_bytes(w, h, &bytes[k * w * h..(k + 1) * w * h]).map_err(|e| record_err(&p, e)))
        .collect()
}

fn load_entry(root: &Path, e: &IndexEntry) -> Result<PairRecord> {
    let index_path = root.join(INDEX_FILE);
    let has_h = e.h.is_some();
    let has_pose = e.pose_a.is_some() || e.pose_b.is_some() || e.depth_a.is_some();
    let has_masks = e.mask_a.is_some() || e.mask_b.is_some();
    if [has_h, has_pose, has_masks].iter().filter(|b| **b).count() != 1 {
        return Err(record_err(
            &index_path,
            format!("{}: exactly one of homography, pose+depth or masks is required", e.id),
        ));
    }
    let image = |f: &str| -> Result<Image> {
        let p = root.join(f);
        if !p.exists() {
            return Err(record_err(&p, "image not found"));
        }
        read_png(&p).map_err(|err| record_err(&p, err))
    };
    let image_a = image(&e.a)?;
    let image_b = image(&e.b)?;
    let supervision = if let Some(f) = &e.h {
        let t = read_tensor(root, f)?;
        if t.shape() != [3, 3] {
            return Err(record_err(&root.join(f), "homography must be [3, 3]"));
        }
        Supervision::Homography(matrix_from(&t.to_f64_vec()))
    } else if has_pose {
        let (Some(pa), Some(pb), Some(_)) = (&e.pose_a, &e.pose_b, &e.depth_a) else {
            return Err(record_err(&index_path, format!("{}: pose supervision needs pose_a, pose_b and depth_a", e.id)));
        };
        Supervision::Posed { a: frame(root, &e.id, pa, e.depth_a.as_ref())?, b: frame(root, &e.id, pb, e.depth_b.as_ref())? }
    } else {
        let (Some(fa), Some(fb)) = (&e.mask_a, &e.mask_b) else {
            return Err(record_err(&index_path, format!("{}: mask supervision needs mask_a and mask_b", e.id)));
        };
        let (ma, mb) = (masks(root, fa)?, masks(root, fb)?);
        if ma.len() != mb.len() {
            return Err(record_err(&root.join(fb), "source and target mask counts differ"));
        }
        let instances = ma
            .into_iter()
            .zip(mb)
            .map(|(a, b)| InstanceMaskPair::new(a, b, "instance"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|err| record_err(&root.join(fa), err))?;
        let designated = e.designated.unwrap_or(0);
        if designated >= instances.len() {
            return Err(record_err(&index_path, format!("{}: designated instance {designated} missing", e.id)));
        }
        let background = match &e.background_h {
            Some(f) => Some(matrix_from(&read_tensor(root, f)?.to_f64_vec())),
            None => None,
        };
        let motions = match &e.motions {
            Some(f) => {
                let v = read_tensor(root, f)?.to_f64_vec();
                Some(v.chunks(9).map(matrix_from).collect())
            }
            None => None,
        };
        Supervision::Masks { instances, designated, background, motions }
    };
    Ok(PairRecord { id: e.id.clone(), image_a, image_b, supervision, split: e.split.clone() })
}
