//! Datasets on disk: one tensor container per array plus a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::container::{self, IntTensor};
use super::{DenseDataset, MultiTaskDataset, Split, TaskData};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A file referenced from a manifest, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub size: usize,
    pub images: FileRef,
    /// Classification labels `[N,K]` or segmentation maps `[N,H,W]`.
    pub labels: FileRef,
    /// Regression field, dense datasets only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<FileRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetManifest {
    Classification {
        tasks: usize,
        class_counts: Vec<usize>,
        train: SplitFiles,
        test: SplitFiles,
        seed: u64,
        config_hash: String,
    },
    Dense {
        seg_classes: usize,
        train: SplitFiles,
        test: SplitFiles,
        seed: u64,
        config_hash: String,
    },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileRef> {
    container::write_new(&dir.join(name), bytes)?;
    Ok(FileRef {
        path: name.to_string(),
        sha256: sha256_hex(bytes),
    })
}

fn labels_to_i32(labels: &[usize], shape: Vec<usize>) -> IntTensor {
    IntTensor {
        shape,
        data: labels.iter().map(|&v| v as i32).collect(),
    }
}

fn i32_to_labels(t: &IntTensor) -> Result<Vec<usize>> {
    t.data
        .iter()
        .map(|&v| usize::try_from(v).map_err(|_| Error::invalid(format!("negative label {v} in container"))))
        .collect()
}

/// Reads a referenced container, checking its recorded hash.
pub(crate) fn read_ref(dir: &Path, r: &FileRef) -> Result<container::Payload> {
    let path = dir.join(&r.path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let found = sha256_hex(&bytes);
    if found != r.sha256 {
        return Err(Error::invalid(format!(
            "hash mismatch for {}: manifest says {}, file is {found}",
            path.display(),
            r.sha256
        )));
    }
    container::decode(&bytes, &path)
}

fn read_f32(dir: &Path, r: &FileRef) -> Result<Tensor<f32>> {
    match read_ref(dir, r)? {
        container::Payload::F32(t) => Ok(t),
        container::Payload::I32(_) => Err(Error::DtypeMismatch {
            expected: "f32",
            found: "i32",
        }),
    }
}

fn read_i32(dir: &Path, r: &FileRef) -> Result<IntTensor> {
    match read_ref(dir, r)? {
        container::Payload::I32(t) => Ok(t),
        container::Payload::F32(_) => Err(Error::DtypeMismatch {
            expected: "i32",
            found: "f32",
        }),
    }
}

fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m)?;
    container::write_new(&path, text.as_bytes())?;
    Ok(path)
}

fn write_cls_split(dir: &Path, ds: &MultiTaskDataset, tag: &str) -> Result<SplitFiles> {
    let k = ds.class_counts().len();
    Ok(SplitFiles {
        size: ds.len(),
        images: write_bytes(dir, &format!("{tag}_images.mtue"), &container::encode_f32(ds.images())?)?,
        labels: write_bytes(
            dir,
            &format!("{tag}_labels.mtue"),
            &container::encode_i32(&labels_to_i32(ds.labels(), vec![ds.len(), k]))?,
        )?,
        regression: None,
    })
}

/// Writes a classification train/test pair under `dir` (which must not already hold one).
pub fn save_classification(
    dir: &Path,
    train: &MultiTaskDataset,
    test: &MultiTaskDataset,
    seed: u64,
    config_hash: &str,
) -> Result<PathBuf> {
    if train.class_counts() != test.class_counts() {
        return Err(Error::invalid("train and test splits disagree on class counts"));
    }
    let m = DatasetManifest::Classification {
        tasks: train.class_counts().len(),
        class_counts: train.class_counts().to_vec(),
        train: write_cls_split(dir, train, "train")?,
        test: write_cls_split(dir, test, "test")?,
        seed,
        config_hash: config_hash.to_string(),
    };
    write_manifest(dir, &m)
}

fn write_dense_split(dir: &Path, ds: &DenseDataset, tag: &str) -> Result<SplitFiles> {
    let [_, h, w] = ds.image_dims();
    Ok(SplitFiles {
        size: ds.len(),
        images: write_bytes(dir, &format!("{tag}_images.mtue"), &container::encode_f32(ds.images())?)?,
        labels: write_bytes(
            dir,
            &format!("{tag}_seg.mtue"),
            &container::encode_i32(&labels_to_i32(ds.seg(), vec![ds.len(), h, w]))?,
        )?,
        regression: Some(write_bytes(dir, &format!("{tag}_depth.mtue"), &container::encode_f32(ds.reg())?)?),
    })
}

pub fn save_dense(dir: &Path, train: &DenseDataset, test: &DenseDataset, seed: u64, config_hash: &str) -> Result<PathBuf> {
    let m = DatasetManifest::Dense {
        seg_classes: train.seg_classes(),
        train: write_dense_split(dir, train, "train")?,
        test: write_dense_split(dir, test, "test")?,
        seed,
        config_hash: config_hash.to_string(),
    };
    write_manifest(dir, &m)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a classification dataset pair written by [`save_classification`].
pub fn load_classification(dir: &Path) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    let DatasetManifest::Classification {
        class_counts,
        train,
        test,
        ..
    } = read_manifest(dir)?
    else {
        return Err(Error::invalid(format!("{} holds a dense dataset", dir.display())));
    };
    let load = |f: &SplitFiles, split| -> Result<MultiTaskDataset> {
        let images = read_f32(dir, &f.images)?;
        let labels = i32_to_labels(&read_i32(dir, &f.labels)?)?;
        MultiTaskDataset::new(images, labels, class_counts.clone(), split)
    };
    Ok((load(&train, Split::Train)?, load(&test, Split::Test)?))
}

pub fn load_dense(dir: &Path) -> Result<(DenseDataset, DenseDataset)> {
    let DatasetManifest::Dense {
        seg_classes,
        train,
        test,
        ..
    } = read_manifest(dir)?
    else {
        return Err(Error::invalid(format!("{} holds a classification dataset", dir.display())));
    };
    let load = |f: &SplitFiles, split| -> Result<DenseDataset> {
        let images = read_f32(dir, &f.images)?;
        let seg = i32_to_labels(&read_i32(dir, &f.labels)?)?;
        let reg_ref = f
            .regression
            .as_ref()
            .ok_or_else(|| Error::invalid("dense manifest lacks a regression file"))?;
        DenseDataset::new(images, seg, seg_classes, read_f32(dir, reg_ref)?, split)
    };
    Ok((load(&train, Split::Train)?, load(&test, Split::Test)?))
}
