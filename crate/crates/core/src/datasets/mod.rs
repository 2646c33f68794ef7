//! Uniform dataset indexing over image folders, CIFAR binaries, and a
//! synthetic sampler for fast CI.

mod cifar;
mod folder;
mod synthetic;

pub use synthetic::{SyntheticSpec, make_synthetic};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type SampleId = u64;

/// Per-class sample lists for one split.
pub type SplitIndex = BTreeMap<ClassId, Vec<SampleId>>;

/// A fetched training or test sample: raw input tensor plus label.
///
/// Image sources yield `[C, H, W]` in `[0, 1]`; vector sources yield `[dim]`.
/// Any resizing or normalization is the backbone's responsibility.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: ArrayD<f64>,
    pub label: ClassId,
}

/// Built-in dataset loaders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cifar100,
    TinyImagenet,
    ImagenetR,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetName::Cifar100 => "cifar100",
            DatasetName::TinyImagenet => "tiny_imagenet",
            DatasetName::ImagenetR => "imagenet_r",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar100" => Ok(DatasetName::Cifar100),
            "tiny_imagenet" | "tiny-imagenet" => Ok(DatasetName::TinyImagenet),
            "imagenet_r" | "imagenet-r" => Ok(DatasetName::ImagenetR),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

pub(crate) enum Source {
    Synthetic(synthetic::SyntheticData),
    Cifar(cifar::CifarData),
    Folder(folder::FolderData),
}

/// A labeled dataset resolved into id lists plus an on-demand fetcher.
pub struct DatasetIndex {
    pub name: String,
    pub num_classes: usize,
    pub train: SplitIndex,
    pub test: SplitIndex,
    source: Source,
}

impl fmt::Debug for DatasetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetIndex")
            .field("name", &self.name)
            .field("num_classes", &self.num_classes)
            .field("train_len", &self.train_len())
            .field("test_len", &self.test_len())
            .finish()
    }
}


impl DatasetIndex {
    /// Raw input tensor and label for `id`. Pure: repeated calls return
    /// identical bytes.
    pub fn fetch(&self, id: SampleId) -> Result<Sample> {
        match &self.source {
            Source::Synthetic(data) => data.fetch(id),
            Source::Cifar(data) => data.fetch(id),
            Source::Folder(data) => data.fetch(id),
        }
    }

    /// Generator spec when this index is synthetic.
    pub fn synthetic_spec(&self) -> Option<&SyntheticSpec> {
        match &self.source {
            Source::Synthetic(data) => Some(&data.spec),
            _ => None,
        }
    }

    pub fn train_len(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn test_len(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.train.len() != self.num_classes || self.test.len() != self.num_classes {
            return Err(Error::Corruption(format!(
                "{}: expected {} classes, indexed {} train / {} test",
                self.name,
                self.num_classes,
                self.train.len(),
                self.test.len()
            )));
        }
        for (split, index) in [("train", &self.train), ("test", &self.test)] {
            if let Some((class, _)) = index.iter().find(|(_, ids)| ids.is_empty()) {
                return Err(Error::Corruption(format!(
                    "{}: class {class} has no {split} samples",
                    self.name
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for ids in self.train.values().chain(self.test.values()) {
            for id in ids {
                if !seen.insert(*id) {
                    return Err(Error::Corruption(format!(
                        "{}: sample id {id} appears twice",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads one of the supported datasets from local files under `root`.
/// No network access: fetch the files first (the CLI has a download helper).
pub fn load_dataset(name: DatasetName, root: &Path) -> Result<DatasetIndex> {
    if !root.exists() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            detail: "dataset root does not exist".into(),
        });
    }
    let index = match name {
        DatasetName::Cifar100 => cifar::load(root)?,
        DatasetName::TinyImagenet => folder::load_tiny_imagenet(root)?,
        DatasetName::ImagenetR => folder::load_imagenet_r(root)?,
    };
    index.validate()?;
    Ok(index)
}

/// Minimal serialized form of an index: name, class count, and id lists.
#[derive(Debug, Serialize, Deserialize)]
pub struct IndexFile {
    pub name: String,
    pub num_classes: usize,
    pub train: SplitIndex,
    pub test: SplitIndex,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetIndex {
    pub fn write_index_json(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            name: self.name.clone(),
            num_classes: self.num_classes,
            train: self.train.clone(),
            test: self.test.clone(),
            synthetic: self.synthetic_spec().cloned(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

pub(crate) fn ingestion_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        path: PathBuf::from(path),
        detail: detail.into(),
    }
}
