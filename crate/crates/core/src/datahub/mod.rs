//! Annotation tables, feature containers, sparsification, splits and the
//! synthetic annotator world.

pub mod annotations;
pub mod features;
pub mod synthetic;

pub use annotations::{
    load_annotations, load_annotations_filtered, parse_annotations, save_annotations, sparsify,
    sparsify_per_annotator, split, AnnotationMatrix,
};
pub use features::{load_features, save_features, FeatureSet};
pub use synthetic::{gen_synthetic_world, MaskLayout, SyntheticWorld, WorldSpec};

use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

/// Model inputs paired with one optional label per annotator.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T: Scalar> {
    pub sample_ids: Vec<String>,
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> LabeledSet<U> {
        LabeledSet {
            sample_ids: self.sample_ids.clone(),
            inputs: self.inputs.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
        }
    }
}

impl LabeledSet<f32> {
    /// Pairs every annotated sample with its features, in annotation order.
    pub fn join(features: &FeatureSet, annotations: &AnnotationMatrix) -> Result<Self> {
        let index = features.index();
        let mut out = LabeledSet {
            sample_ids: Vec::with_capacity(annotations.n_samples()),
            inputs: Vec::with_capacity(annotations.n_samples()),
            labels: Vec::with_capacity(annotations.n_samples()),
        };
        for (s, id) in annotations.sample_ids().iter().enumerate() {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::Integrity(format!("sample {id} has no features")))?;
            out.sample_ids.push(id.clone());
            out.inputs.push(features.tensors[i].clone());
            out.labels.push(annotations.row(s));
        }
        Ok(out)
    }
}
