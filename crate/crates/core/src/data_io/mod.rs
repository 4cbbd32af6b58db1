//! Patient volumes and source datasets: on-disk layout, ingestion with
//! preprocessing, and seeded synthetic generators.

mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::nn::Tensor;

pub use synth::{labeled_indices, synth_patients, synth_source, PatientSynthSpec, SyntheticCohort, SHAPE_FAMILIES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SOURCE_INDEX_FILE: &str = "source.json";
pub const SEALED_DIR: &str = "_sealed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One patient's ordered slice stack. Slices are `1 x 3 x H x W` with
/// values in `[0, 1]`; masks exist for the labeled positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientVolume {
    pub id: String,
    pub split: Split,
    /// Acquisition index of each slice, strictly increasing.
    pub indices: Vec<usize>,
    pub slices: Vec<Tensor>,
    /// Keyed by position in `slices`.
    pub masks: BTreeMap<usize, BinaryMask>,
}

impl PatientVolume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn labeled_positions(&self) -> Vec<usize> {
        self.masks.keys().copied().collect()
    }

    pub fn unlabeled_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|p| !self.masks.contains_key(p)).collect()
    }

    pub fn image_size(&self) -> Option<[usize; 2]> {
        self.slices.first().map(|t| [t.h(), t.w()])
    }

    /// Stacks the slices at `positions` into one batch.
    pub fn batch(&self, positions: &[usize]) -> Result<Tensor> {
        match self.image_size() {
            Some([h, w]) if positions.is_empty() => Ok(Tensor::zeros([0, 3, h, w])),
            _ => Tensor::stack(&positions.iter().map(|&p| self.slices[p].clone()).collect::<Vec<_>>()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.slices.len() {
            return Err(Error::InvalidValue(format!(
                "patient {}: {} indices for {} slices",
                self.id,
                self.indices.len(),
                self.slices.len()
            )));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidValue(format!(
                "patient {}: slice indices not strictly increasing",
                self.id
            )));
        }
        let size = self.image_size();
        for s in &self.slices {
            if s.n() != 1 || s.c() != 3 || Some([s.h(), s.w()]) != size {
                return Err(Error::shape([1, 3, s.h(), s.w()], s.shape()));
            }
            if s.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidValue(format!("patient {}: intensity outside [0, 1]", self.id)));
            }
        }
        for (&p, m) in &self.masks {
            let s = self.slices.get(p).ok_or_else(|| {
                Error::InvalidValue(format!("patient {}: mask for missing slice {p}", self.id))
            })?;
            if m.shape() != (s.h(), s.w()) {
                return Err(Error::shape((s.h(), s.w()), m.shape()));
            }
        }
        Ok(())
    }
}

/// Evaluation-only masks for every slice of held-out patients, keyed by
/// patient id and acquisition index.
pub type SealedMasks = BTreeMap<String, BTreeMap<usize, BinaryMask>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceClass {
    pub name: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub name: String,
    pub classes: Vec<SourceClass>,
}

impl SourceDataset {
    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPatient {
    pub id: String,
    pub split: Split,
    pub labeled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroppedSlice {
    pub patient: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub resize: [usize; 2],
    pub dropped: Vec<DroppedSlice>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub patients: Vec<ManifestPatient>,
    pub preprocess: Preprocess,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = read_text(&path)?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.patients {
            if p.id.is_empty() || p.id.starts_with('_') || p.id.contains(['/', '\\']) {
                return Err(Error::InvalidManifest(format!("bad patient id {:?}", p.id)));
            }
            if !seen.insert(&p.id) {
                return Err(Error::InvalidManifest(format!("patient {} listed twice", p.id)));
            }
            if p.labeled.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidManifest(format!(
                    "patient {}: labeled indices must be strictly increasing",
                    p.id
                )));
            }
        }
        if self.preprocess.resize.contains(&0) {
            return Err(Error::InvalidManifest("resize target must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    pub resize: [usize; 2],
    /// Also drop labeled slices whose mask is empty.
    pub drop_empty_masks: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            resize: [224, 224],
            drop_empty_masks: false,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Rescales all channels of a slice jointly to `[0, 1]`. An all-zero
/// slice stays zero; a constant non-zero slice becomes all ones.
pub fn min_max_normalize(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return;
    }
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

/// Reads a slice raster as a `1 x 3 x H x W` tensor. Grayscale images are
/// replicated to three channels, the image is resized bilinearly when its
/// size differs from `resize`, then min-max normalised.
pub fn read_slice(path: &Path, resize: [usize; 2]) -> Result<Tensor> {
    let (img, _) = read_slice_raw(path)?;
    Ok(preprocess_slice(img, resize))
}

fn read_slice_raw(path: &Path) -> Result<(image::Rgb32FImage, (usize, usize))> {
    let img = open_image(path)?.to_rgb32f();
    let shape = (img.height() as usize, img.width() as usize);
    Ok((img, shape))
}

fn preprocess_slice(mut img: image::Rgb32FImage, [h, w]: [usize; 2]) -> Tensor {
    if (img.height() as usize, img.width() as usize) != (h, w) {
        img = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c];
        }
    }
    min_max_normalize(&mut data);
    Tensor::from_vec([1, 3, h, w], data).expect("sized")
}

fn read_mask_raw(path: &Path) -> Result<GrayImage> {
    Ok(open_image(path)?.to_luma8())
}

fn mask_from_gray(mut img: GrayImage, [h, w]: [usize; 2]) -> BinaryMask {
    if (img.height() as usize, img.width() as usize) != (h, w) {
        img = imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
    }
    BinaryMask::from_fn(h, w, |r, c| img.get_pixel(c as u32, r as u32).0[0] >= 128)
}

/// Reads a `{0, 255}` mask raster, resized with nearest-neighbour sampling.
pub fn read_mask(path: &Path, resize: [usize; 2]) -> Result<BinaryMask> {
    Ok(mask_from_gray(read_mask_raw(path)?, resize))
}

/// Reads a mask raster at its stored size.
pub fn read_mask_native(path: &Path) -> Result<BinaryMask> {
    let img = read_mask_raw(path)?;
    let size = [img.height() as usize, img.width() as usize];
    Ok(mask_from_gray(img, size))
}

pub fn write_slice(path: &Path, slice: &Tensor) -> Result<()> {
    let (h, w) = (slice.h(), slice.w());
    let plane = h * w;
    let d = slice.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    });
    save(path, DynamicImage::ImageRgb8(img))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save(path, DynamicImage::ImageLuma8(img))
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn file_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Numbered `NNNN.png` files in `dir`, sorted by index.
fn numbered_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let idx = path
            .extension()
            .filter(|e| e.eq_ignore_ascii_case("png"))
            .and_then(|_| path.file_stem())
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(i) = idx {
            out.push((i, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Removes all-black slices and, when `drop_empty_masks` is set, labeled
/// slices with an empty mask. Returns the acquisition indices removed.
pub fn drop_empty(volume: PatientVolume, drop_empty_masks: bool) -> (PatientVolume, Vec<usize>) {
    let PatientVolume {
        id,
        split,
        indices,
        slices,
        mut masks,
    } = volume;
    let mut kept = PatientVolume {
        id,
        split,
        indices: Vec::new(),
        slices: Vec::new(),
        masks: BTreeMap::new(),
    };
    let mut dropped = Vec::new();
    for (pos, (idx, slice)) in indices.into_iter().zip(slices).enumerate() {
        let black = slice.data().iter().all(|&v| v <= 0.0);
        let mask = masks.remove(&pos);
        let empty_mask = drop_empty_masks && mask.as_ref().is_some_and(|m| m.is_empty());
        if black || empty_mask {
            dropped.push(idx);
            continue;
        }
        if let Some(m) = mask {
            kept.masks.insert(kept.slices.len(), m);
        }
        kept.indices.push(idx);
        kept.slices.push(slice);
    }
    (kept, dropped)
}

/// Loads every patient listed in the manifest under `root`, applying the
/// resize, channel replication, normalisation and empty-slice filtering.
/// The returned manifest records the dropped slices.
pub fn ingest_patients(root: &Path, manifest: &Manifest, opts: &IngestOptions) -> Result<(Vec<PatientVolume>, Manifest)> {
    manifest.validate()?;
    let mut out = Vec::with_capacity(manifest.patients.len());
    let mut record = manifest.clone();
    record.preprocess.resize = opts.resize;
    record.preprocess.dropped.clear();
    for p in &manifest.patients {
        let dir = root.join(&p.id);
        let files = numbered_files(&dir.join("slices"))?;
        let mut volume = PatientVolume {
            id: p.id.clone(),
            split: p.split,
            indices: Vec::with_capacity(files.len()),
            slices: Vec::with_capacity(files.len()),
            masks: BTreeMap::new(),
        };
        for (pos, (idx, path)) in files.iter().enumerate() {
            let (raw, shape) = read_slice_raw(path)?;
            if p.labeled.binary_search(idx).is_ok() {
                let mpath = dir.join("masks").join(file_name(*idx));
                let m = read_mask_raw(&mpath)?;
                let mshape = (m.height() as usize, m.width() as usize);
                if mshape != shape {
                    return Err(Error::MaskShapeMismatch {
                        path: mpath,
                        expected: shape,
                        actual: mshape,
                    });
                }
                volume.masks.insert(pos, mask_from_gray(m, opts.resize));
            }
            volume.indices.push(*idx);
            volume.slices.push(preprocess_slice(raw, opts.resize));
        }
        if let Some(missing) = p.labeled.iter().find(|i| files.binary_search_by_key(i, |(j, _)| j).is_err()) {
            return Err(Error::MissingFile(dir.join("slices").join(file_name(*missing))));
        }
        let (volume, dropped) = drop_empty(volume, opts.drop_empty_masks);
        record
            .preprocess
            .dropped
            .extend(dropped.into_iter().map(|index| DroppedSlice {
                patient: p.id.clone(),
                index,
            }));
        out.push(volume);
    }
    Ok((out, record))
}

/// Reads the manifest under `root` and ingests it.
pub fn ingest_dir(root: &Path, opts: &IngestOptions) -> Result<(Vec<PatientVolume>, Manifest)> {
    let manifest = Manifest::read(root)?;
    ingest_patients(root, &manifest, opts)
}

/// Writes volumes (and optional sealed masks) in the directory layout and
/// returns the manifest written alongside them.
pub fn export_patients(
    root: &Path,
    name: &str,
    volumes: &[PatientVolume],
    sealed: Option<&SealedMasks>,
) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut patients = Vec::with_capacity(volumes.len());
    let mut resize = [0, 0];
    for v in volumes {
        v.validate()?;
        if let Some(size) = v.image_size() {
            resize = size;
        }
        let dir = root.join(&v.id);
        for (pos, (idx, slice)) in v.indices.iter().zip(&v.slices).enumerate() {
            write_slice(&dir.join("slices").join(file_name(*idx)), slice)?;
            if let Some(m) = v.masks.get(&pos) {
                write_mask(&dir.join("masks").join(file_name(*idx)), m)?;
            }
        }
        patients.push(ManifestPatient {
            id: v.id.clone(),
            split: v.split,
            labeled: v.masks.keys().map(|&p| v.indices[p]).collect(),
        });
    }
    if let Some(sealed) = sealed {
        for (id, masks) in sealed {
            for (idx, m) in masks {
                write_mask(&root.join(SEALED_DIR).join(id).join("masks").join(file_name(*idx)), m)?;
            }
        }
    }
    let manifest = Manifest {
        name: name.to_string(),
        patients,
        preprocess: Preprocess {
            resize,
            dropped: Vec::new(),
        },
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// Reads sealed masks for the manifest's patients, where present.
pub fn load_sealed(root: &Path, manifest: &Manifest, resize: [usize; 2]) -> Result<SealedMasks> {
    let mut out = SealedMasks::new();
    for p in &manifest.patients {
        let dir = root.join(SEALED_DIR).join(&p.id).join("masks");
        if !dir.is_dir() {
            continue;
        }
        let masks = numbered_files(&dir)?
            .into_iter()
            .map(|(i, path)| Ok((i, read_mask(&path, resize)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        out.insert(p.id.clone(), masks);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceIndex {
    name: String,
    classes: Vec<SourceIndexClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceIndexClass {
    name: String,
    count: usize,
}

/// Writes a source dataset as `root/source.json` plus
/// `root/<class>/images/NNNN.png` and `root/<class>/masks/NNNN.png`.
pub fn export_source(root: &Path, ds: &SourceDataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for c in &ds.classes {
        for (i, s) in c.samples.iter().enumerate() {
            write_slice(&root.join(&c.name).join("images").join(file_name(i)), &s.image)?;
            write_mask(&root.join(&c.name).join("masks").join(file_name(i)), &s.mask)?;
        }
    }
    let index = SourceIndex {
        name: ds.name.clone(),
        classes: ds
            .classes
            .iter()
            .map(|c| SourceIndexClass {
                name: c.name.clone(),
                count: c.samples.len(),
            })
            .collect(),
    };
    let path = root.join(SOURCE_INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn ingest_source(root: &Path, resize: [usize; 2]) -> Result<SourceDataset> {
    let path = root.join(SOURCE_INDEX_FILE);
    let index: SourceIndex = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
    let mut classes = Vec::with_capacity(index.classes.len());
    for c in index.classes {
        let dir = root.join(&c.name);
        let mut samples = Vec::with_capacity(c.count);
        for i in 0..c.count {
            let ipath = dir.join("images").join(file_name(i));
            let mpath = dir.join("masks").join(file_name(i));
            let (raw, shape) = read_slice_raw(&ipath)?;
            let m = read_mask_raw(&mpath)?;
            let mshape = (m.height() as usize, m.width() as usize);
            if mshape != shape {
                return Err(Error::MaskShapeMismatch {
                    path: mpath,
                    expected: shape,
                    actual: mshape,
                });
            }
            samples.push(Sample {
                image: preprocess_slice(raw, resize),
                mask: mask_from_gray(m, resize),
            });
        }
        classes.push(SourceClass { name: c.name, samples });
    }
    Ok(SourceDataset {
        name: index.name,
        classes,
    })
}
