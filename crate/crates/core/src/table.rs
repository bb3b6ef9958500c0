use crate::tensor::Tensor;

/// A preprocessed binary-classification dataset: a numeric feature matrix
/// (rows × features) and a 0/1 label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
}

impl Table {
    /// # Panics
    /// If the label count differs from the row count or a label is not 0/1.
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<u8>) -> Self {
        assert_eq!(features.shape().len(), 2, "feature matrix must be 2-D");
        assert_eq!(features.rows(), labels.len(), "one label per row");
        assert!(labels.iter().all(|&l| l <= 1), "labels must be binary");
        let feature_names = (0..features.cols()).map(|c| format!("x{c}")).collect();
        Self {
            name: name.into(),
            features,
            labels,
            feature_names,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[1]
    }

    /// `[negatives, positives]`
    pub fn class_counts(&self) -> [usize; 2] {
        count_classes(&self.labels)
    }
}

pub(crate) fn count_classes(labels: &[u8]) -> [usize; 2] {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    [labels.len() - pos, pos]
}
