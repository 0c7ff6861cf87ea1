use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Fully connected tanh network acting column-wise on `[in, batch]` inputs.
///
/// Parameters are stored as `{prefix}.w{i}` (`[out, in]`) and `{prefix}.b{i}` (`[out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes` lists input width, hidden widths and output width.
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        Self {
            prefix: prefix.into(),
            sizes,
        }
    }

    pub fn with_hidden(prefix: impl Into<String>, input: usize, hidden: usize, width: usize, output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, hidden));
        sizes.push(output);
        Self::new(prefix, sizes)
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(self.weight_name(l), Tensor::matrix(fan_out, fan_in, w))?;
            store.insert(self.bias_name(l), Tensor::vector(b))?;
        }
        Ok(())
    }

    /// Sets the last layer's weights and bias to zero.
    pub fn zero_output_layer(&self, store: &mut ParameterStore) {
        let l = self.layers() - 1;
        for name in [self.weight_name(l), self.bias_name(l)] {
            if let Some(t) = store.get_mut(&name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Appends the network to `g`; `input` must be `[in, batch]`.
    pub fn build(&self, g: &mut Graph, input: NodeId) -> NodeId {
        let batch = g.shape(input).get(1).copied().unwrap_or(1);
        let mut h = input;
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = g.parameter(&self.weight_name(l), &[fan_out, fan_in]);
            let b = g.parameter(&self.bias_name(l), &[fan_out]);
            let z = g.matmul(w, h);
            let bb = g.broadcast_cols(b, batch);
            let z = g.add(z, bb);
            h = if l + 1 < self.layers() { g.tanh(z) } else { z };
        }
        h
    }
}
