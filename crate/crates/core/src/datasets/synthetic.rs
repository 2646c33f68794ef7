//! Gaussian-blob dataset: class centers on a unit sphere, samples jittered
//! around them. Deterministic per seed, linearly separable at small noise.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassId, DatasetIndex, Sample, SampleId, Source, SplitIndex};
use crate::error::{Error, Result};

/// Generator parameters; regenerating from the spec reproduces the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

pub(crate) struct SyntheticData {
    pub spec: SyntheticSpec,
    pub centers: Array2<f64>,
    train: Array2<f64>,
    test: Array2<f64>,
    per_class_test: usize,
}

impl SyntheticData {
    pub fn fetch(&self, id: SampleId) -> Result<Sample> {
        let n_train = (self.spec.num_classes * self.spec.per_class) as u64;
        let n_test = (self.spec.num_classes * self.per_class_test) as u64;
        let (row, per_class) = if id < n_train {
            (self.train.row(id as usize), self.spec.per_class)
        } else if id < n_train + n_test {
            (self.test.row((id - n_train) as usize), self.per_class_test)
        } else {
            return Err(Error::Contract(format!("sample id {id} out of range")));
        };
        let local = if id < n_train { id } else { id - n_train };
        let label = (local as usize / per_class) as ClassId;
        Ok(Sample {
            input: row.to_owned().into_dyn(),
            label,
        })
    }
}

fn gaussian_row(rng: &mut ChaCha12Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

/// Builds the synthetic dataset. The test split holds
/// `max(1, per_class / 5)` samples per class, drawn from the same blobs.
pub fn make_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetIndex> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs at least 2 classes, got {num_classes}"
        )));
    }
    if dim == 0 || per_class == 0 {
        return Err(Error::Config("dim and per_class must be positive".into()));
    }
    if noise < 0.0 {
        return Err(Error::Config(format!("noise must be nonnegative, got {noise}")));
    }
    let spec = SyntheticSpec {
        num_classes,
        dim,
        per_class,
        noise,
        seed,
    };
    let per_class_test = (per_class / 5).max(1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Centers first, then train rows class-major, then test rows: the draw
    // order is part of the determinism contract.
    let mut centers = Array2::zeros((num_classes, dim));
    for mut row in centers.rows_mut() {
        let v = gaussian_row(&mut rng, dim);
        let norm = v.dot(&v).sqrt().max(1e-12);
        row.assign(&(&v / norm));
    }
    let mut draw_split = |count: usize| -> Array2<f64> {
        let mut data = Array2::zeros((num_classes * count, dim));
        for class in 0..num_classes {
            for j in 0..count {
                let jitter = gaussian_row(&mut rng, dim);
                let row = &centers.row(class) + &(jitter * noise);
                data.row_mut(class * count + j).assign(&row);
            }
        }
        data
    };
    let train_data = draw_split(per_class);
    let test_data = draw_split(per_class_test);

    let mut train: SplitIndex = SplitIndex::new();
    let mut test: SplitIndex = SplitIndex::new();
    let n_train = (num_classes * per_class) as u64;
    for class in 0..num_classes {
        train.insert(
            class as ClassId,
            (0..per_class)
                .map(|j| (class * per_class + j) as SampleId)
                .collect(),
        );
        test.insert(
            class as ClassId,
            (0..per_class_test)
                .map(|j| n_train + (class * per_class_test + j) as SampleId)
                .collect(),
        );
    }

    let index = DatasetIndex {
        name: format!("synthetic-{num_classes}x{per_class}d{dim}"),
        num_classes,
        train,
        test,
        source: Source::Synthetic(SyntheticData {
            spec,
            centers,
            train: train_data,
            test: test_data,
            per_class_test,
        }),
    };
    index.validate()?;
    Ok(index)
}

/// Rebuild from a serialized spec.
impl SyntheticSpec {
    pub fn build(&self) -> Result<DatasetIndex> {
        make_synthetic(self.num_classes, self.dim, self.per_class, self.noise, self.seed)
    }
}
