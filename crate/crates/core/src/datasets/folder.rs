//! Image-folder ingestion for Tiny-ImageNet and ImageNet-R.
//!
//! Tiny-ImageNet uses its official split (`train/` plus `val/` with
//! `val_annotations.txt`). ImageNet-R ships no official split, so each
//! class's files are sorted by name and the last 20% become the test split —
//! deterministic across machines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{ClassId, DatasetIndex, Sample, SampleId, Source, SplitIndex, ingestion_error};
use crate::error::{Error, Result};

pub(crate) struct FolderData {
    paths: Vec<PathBuf>,
    labels: Vec<ClassId>,
}

impl FolderData {
    pub fn fetch(&self, id: SampleId) -> Result<Sample> {
        let idx = id as usize;
        let path = self
            .paths
            .get(idx)
            .ok_or_else(|| Error::Contract(format!("sample id {id} out of range")))?;
        let img = image::open(path)
            .map_err(|e| ingestion_error(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let input = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
        });
        Ok(Sample {
            input: input.into_dyn(),
            label: self.labels[idx],
        })
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpeg" | "jpg" | "png")
    )
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ingestion_error(dir, e.to_string()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

struct Builder {
    paths: Vec<PathBuf>,
    labels: Vec<ClassId>,
    train: SplitIndex,
    test: SplitIndex,
}

impl Builder {
    fn new() -> Self {
        Builder {
            paths: Vec::new(),
            labels: Vec::new(),
            train: SplitIndex::new(),
            test: SplitIndex::new(),
        }
    }

    fn push(&mut self, path: PathBuf, class: ClassId, is_test: bool) {
        let id = self.paths.len() as SampleId;
        self.paths.push(path);
        self.labels.push(class);
        let split = if is_test { &mut self.test } else { &mut self.train };
        split.entry(class).or_default().push(id);
    }

    fn finish(self, name: &str, num_classes: usize) -> DatasetIndex {
        DatasetIndex {
            name: name.into(),
            num_classes,
            train: self.train,
            test: self.test,
            source: Source::Folder(FolderData {
                paths: self.paths,
                labels: self.labels,
            }),
        }
    }
}

/// Class directories sorted by name define the class-id order.
fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|e| ingestion_error(root, e.to_string()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| (n.to_string(), p.clone()))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub(crate) fn load_tiny_imagenet(root: &Path) -> Result<DatasetIndex> {
    let base = if root.join("tiny-imagenet-200").exists() {
        root.join("tiny-imagenet-200")
    } else {
        root.to_path_buf()
    };
    let train_dir = base.join("train");
    let val_dir = base.join("val");
    if !train_dir.exists() {
        return Err(ingestion_error(&train_dir, "train directory not found"));
    }
    let classes = class_dirs(&train_dir)?;
    if classes.is_empty() {
        return Err(Error::Corruption(format!(
            "{}: no class directories",
            train_dir.display()
        )));
    }
    let class_of: BTreeMap<&str, ClassId> = classes
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.as_str(), i as ClassId))
        .collect();

    let mut builder = Builder::new();
    for (name, dir) in &classes {
        let images_dir = dir.join("images");
        let image_dir = if images_dir.exists() { images_dir } else { dir.clone() };
        for path in sorted_images(&image_dir)? {
            builder.push(path, class_of[name.as_str()], false);
        }
    }

    let annotations = val_dir.join("val_annotations.txt");
    let text = std::fs::read_to_string(&annotations)
        .map_err(|e| ingestion_error(&annotations, e.to_string()))?;
    for line in text.lines() {
        let mut fields = line.split_whitespace();
        let (Some(file), Some(wnid)) = (fields.next(), fields.next()) else {
            continue;
        };
        let Some(&class) = class_of.get(wnid) else {
            return Err(Error::Corruption(format!(
                "val annotation references unknown class {wnid}"
            )));
        };
        builder.push(val_dir.join("images").join(file), class, true);
    }
    Ok(builder.finish("tiny_imagenet", classes.len()))
}

pub(crate) fn load_imagenet_r(root: &Path) -> Result<DatasetIndex> {
    let base = if root.join("imagenet-r").exists() {
        root.join("imagenet-r")
    } else {
        root.to_path_buf()
    };
    let classes = class_dirs(&base)?;
    if classes.is_empty() {
        return Err(Error::Corruption(format!(
            "{}: no class directories",
            base.display()
        )));
    }
    let mut builder = Builder::new();
    for (i, (_, dir)) in classes.iter().enumerate() {
        let files = sorted_images(dir)?;
        let n_test = files.len() / 5;
        let split_at = files.len() - n_test;
        for (j, path) in files.into_iter().enumerate() {
            builder.push(path, i as ClassId, j >= split_at);
        }
    }
    Ok(builder.finish("imagenet_r", classes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetName, load_dataset};
    use image::{Rgb, RgbImage};

    fn write_image(path: &Path, value: u8) {
        let img = RgbImage::from_pixel(8, 8, Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    #[test]
    fn imagenet_r_layout_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["n01", "n02"] {
            let class_dir = dir.path().join(class);
            std::fs::create_dir(&class_dir).unwrap();
            for j in 0..10 {
                write_image(&class_dir.join(format!("img_{j:02}.png")), j * 20);
            }
        }
        let index = load_dataset(DatasetName::ImagenetR, dir.path()).unwrap();
        assert_eq!(index.num_classes, 2);
        assert_eq!(index.train_len(), 16);
        assert_eq!(index.test_len(), 4);
        let sample = index.fetch(0).unwrap();
        assert_eq!(sample.input.shape(), &[3, 8, 8]);

        let again = load_dataset(DatasetName::ImagenetR, dir.path()).unwrap();
        assert_eq!(index.train, again.train);
        assert_eq!(index.test, again.test);
    }

    #[test]
    fn tiny_imagenet_layout_resolves_val_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path();
        for wnid in ["n10", "n20"] {
            let images = base.join("train").join(wnid).join("images");
            std::fs::create_dir_all(&images).unwrap();
            for j in 0..3 {
                write_image(&images.join(format!("{wnid}_{j}.png")), 100 + j);
            }
        }
        let val_images = base.join("val").join("images");
        std::fs::create_dir_all(&val_images).unwrap();
        write_image(&val_images.join("val_0.png"), 1);
        write_image(&val_images.join("val_1.png"), 2);
        std::fs::write(
            base.join("val").join("val_annotations.txt"),
            "val_0.png\tn10\t0\t0\t8\t8\nval_1.png\tn20\t0\t0\t8\t8\n",
        )
        .unwrap();

        let index = load_dataset(DatasetName::TinyImagenet, base).unwrap();
        assert_eq!(index.num_classes, 2);
        assert_eq!(index.train_len(), 6);
        assert_eq!(index.test_len(), 2);
    }
}
