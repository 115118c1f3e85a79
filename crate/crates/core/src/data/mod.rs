//! Datasets and batching: MNIST IDX files, synthetic spirals and byte-level
//! text corpora.

mod batch;
mod chars;
mod mnist;
mod spirals;

pub use batch::{batch_iter, Batch, Batcher};
pub use chars::{load_char_corpus, CharCorpus, CharStreams, SeqBatch};
pub use mnist::{load_mnist_idx, parse_idx_images, parse_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use spirals::{spiral_point, synth_spirals};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
enum Features {
    /// Raw bytes scaled by `1/255` on access.
    Pixels(Vec<u8>),
    Real(Vec<f64>),
}

/// Labelled fixed-size examples for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDataset {
    item_shape: Vec<usize>,
    features: Features,
    labels: Vec<usize>,
    classes: usize,
}

impl ClassDataset {
    pub fn new(item_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::build(item_shape, Features::Real(features), labels, classes)
    }

    pub(crate) fn from_pixels(item_shape: Vec<usize>, pixels: Vec<u8>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::build(item_shape, Features::Pixels(pixels), labels, classes)
    }

    fn build(item_shape: Vec<usize>, features: Features, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = item_shape.iter().product();
        let len = match &features {
            Features::Pixels(p) => p.len(),
            Features::Real(r) => r.len(),
        };
        if item_shape.contains(&0) || per * labels.len() != len {
            return Err(Error::dim(
                "dataset",
                format!("{} labels of shape {item_shape:?} need {} values, got {len}", labels.len(), per * labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(ClassDataset {
            item_shape,
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_size(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature values of example `i`.
    pub fn item(&self, i: usize) -> Vec<f64> {
        let per = self.item_size();
        match &self.features {
            Features::Pixels(p) => p[i * per..(i + 1) * per].iter().map(|&b| f64::from(b) / 255.0).collect(),
            Features::Real(r) => r[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks the given examples into a `B × item_shape` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.item_size());
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("example {i} out of range for {} items", self.len())));
            }
            data.extend(self.item(i));
            y.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.item_shape);
        Ok(Batch {
            indices: indices.to_vec(),
            x: Tensor::new(shape, data)?,
            y,
        })
    }

    /// The first `n` examples (all of them if fewer).
    pub fn head(&self, n: usize) -> ClassDataset {
        let n = n.min(self.len());
        let per = self.item_size();
        let features = match &self.features {
            Features::Pixels(p) => Features::Pixels(p[..n * per].to_vec()),
            Features::Real(r) => Features::Real(r[..n * per].to_vec()),
        };
        ClassDataset {
            item_shape: self.item_shape.clone(),
            features,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}
