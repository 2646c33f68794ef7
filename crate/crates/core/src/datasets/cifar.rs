//! CIFAR-100 binary ingestion.
//!
//! Expects the `cifar-100-binary` layout: `train.bin` and `test.bin`, each a
//! sequence of 3074-byte records `<coarse u8><fine u8><3072 pixel bytes>`
//! with pixels stored channel-major (R plane, G plane, B plane) at 32x32.

use std::path::Path;

use ndarray::Array3;

use super::{ClassId, DatasetIndex, Sample, SampleId, Source, SplitIndex, ingestion_error};
use crate::error::{Error, Result};

const RECORD_LEN: usize = 2 + 3 * 32 * 32;
const NUM_CLASSES: usize = 100;

pub(crate) struct CifarData {
    train_labels: Vec<ClassId>,
    train_pixels: Vec<u8>,
    test_labels: Vec<ClassId>,
    test_pixels: Vec<u8>,
}

impl CifarData {
    pub fn fetch(&self, id: SampleId) -> Result<Sample> {
        let n_train = self.train_labels.len() as u64;
        let (pixels, labels, local) = if id < n_train {
            (&self.train_pixels, &self.train_labels, id as usize)
        } else {
            let local = (id - n_train) as usize;
            if local >= self.test_labels.len() {
                return Err(Error::Contract(format!("sample id {id} out of range")));
            }
            (&self.test_pixels, &self.test_labels, local)
        };
        let offset = local * 3072;
        let raw = &pixels[offset..offset + 3072];
        let input = Array3::from_shape_fn((3, 32, 32), |(c, h, w)| {
            f64::from(raw[c * 1024 + h * 32 + w]) / 255.0
        });
        Ok(Sample {
            input: input.into_dyn(),
            label: labels[local],
        })
    }
}

fn parse_split(path: &Path) -> Result<(Vec<ClassId>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| ingestion_error(path, e.to_string()))?;
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Corruption(format!(
            "{}: length {} is not a multiple of the {RECORD_LEN}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * 3072);
    for record in bytes.chunks_exact(RECORD_LEN) {
        let fine = record[1];
        if usize::from(fine) >= NUM_CLASSES {
            return Err(Error::Corruption(format!(
                "{}: fine label {fine} out of range",
                path.display()
            )));
        }
        labels.push(ClassId::from(fine));
        pixels.extend_from_slice(&record[2..]);
    }
    Ok((labels, pixels))
}

fn locate(root: &Path, file: &str) -> std::path::PathBuf {
    let nested = root.join("cifar-100-binary").join(file);
    if nested.exists() { nested } else { root.join(file) }
}

pub(crate) fn load(root: &Path) -> Result<DatasetIndex> {
    let train_path = locate(root, "train.bin");
    let test_path = locate(root, "test.bin");
    for path in [&train_path, &test_path] {
        if !path.exists() {
            return Err(ingestion_error(path, "file not found"));
        }
    }
    let (train_labels, train_pixels) = parse_split(&train_path)?;
    let (test_labels, test_pixels) = parse_split(&test_path)?;

    let mut train: SplitIndex = SplitIndex::new();
    let mut test: SplitIndex = SplitIndex::new();
    for (i, &label) in train_labels.iter().enumerate() {
        train.entry(label).or_default().push(i as SampleId);
    }
    let n_train = train_labels.len() as u64;
    for (i, &label) in test_labels.iter().enumerate() {
        test.entry(label).or_default().push(n_train + i as SampleId);
    }

    Ok(DatasetIndex {
        name: "cifar100".into(),
        num_classes: NUM_CLASSES,
        train,
        test,
        source: Source::Cifar(CifarData {
            train_labels,
            train_pixels,
            test_labels,
            test_pixels,
        }),
    })
}
