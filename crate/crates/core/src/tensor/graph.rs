use super::Tensor;
use crate::error::Result;

/// Spatial padding mode for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `(k - 1) / 2` zeros on every side.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// The operation set layers are written against.
///
/// Implemented by [`super::Tape`] (records for backward) and
/// [`super::Eager`] (plain evaluation). Both share the kernels in
/// [`super::kernels`], so a forward pass gives bit-identical values on
/// either.
pub trait Graph {
    type Node: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, value: Tensor) -> Self::Node;
    /// A trainable leaf.
    fn param(&mut self, value: Tensor) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn scale(&mut self, a: &Self::Node, factor: f64) -> Result<Self::Node>;
    fn relu(&mut self, a: &Self::Node) -> Result<Self::Node>;
    fn tanh(&mut self, a: &Self::Node) -> Result<Self::Node>;
    fn sigmoid(&mut self, a: &Self::Node) -> Result<Self::Node>;
    /// Columns `start..start + len` of a rank-2 node.
    fn slice_cols(&mut self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;
    fn reshape(&mut self, a: &Self::Node, shape: &[usize]) -> Result<Self::Node>;
    fn conv2d(&mut self, input: &Self::Node, kernel: &Self::Node, stride: usize, padding: Padding) -> Result<Self::Node>;
    fn max_pool2d(&mut self, input: &Self::Node, size: usize) -> Result<Self::Node>;
    /// Mean over the spatial axes of an N×C×H×W node, giving N×C.
    fn global_avg_pool(&mut self, input: &Self::Node) -> Result<Self::Node>;
    /// Per-row cross-entropy of N×K logits against class indices, giving N.
    fn softmax_cross_entropy(&mut self, logits: &Self::Node, targets: &[usize]) -> Result<Self::Node>;
    fn sum(&mut self, a: &Self::Node) -> Result<Self::Node>;
    fn mean(&mut self, a: &Self::Node) -> Result<Self::Node>;
    /// Mean absolute difference of two equally shaped nodes.
    fn l1_loss(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
}
