use rand::Rng;

use super::{gemm, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected network with `tanh` hidden activations and a linear
/// output layer. Tensors are stored as `[W0, b0, W1, b1, ...]` with
/// `Wi: in x out` and `bi: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    tensors: Vec<Tensor>,
}

impl MlpParams {
    pub fn new(sizes: Vec<usize>, tensors: Vec<Tensor>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::shape(
                "an MLP needs at least an input and an output width",
            ));
        }
        if tensors.len() != 2 * (sizes.len() - 1) {
            return Err(Error::shape(format!(
                "{} layer widths need {} tensors, got {}",
                sizes.len(),
                2 * (sizes.len() - 1),
                tensors.len()
            )));
        }
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if tensors[2 * l].shape() != [fan_in, fan_out] {
                return Err(Error::shape(format!(
                    "layer {l} weight is {:?}, expected [{fan_in}, {fan_out}]",
                    tensors[2 * l].shape()
                )));
            }
            if tensors[2 * l + 1].shape() != [1, fan_out] {
                return Err(Error::shape(format!(
                    "layer {l} bias is {:?}, expected [1, {fan_out}]",
                    tensors[2 * l + 1].shape()
                )));
            }
        }
        Ok(Self { sizes, tensors })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let tensors = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Self {
            sizes: sizes.to_vec(),
            tensors,
        }
    }

    /// Glorot-uniform weights, zero biases; the output layer's weights are
    /// multiplied by `last_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], last_scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(sizes);
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt()
                * if l + 1 == layers { last_scale } else { 1.0 };
            for w in p.tensors[2 * l].data_mut() {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        p
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap_or(&0)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Batched forward pass. `input` is `batch x in` (a rank-1 input is one row).
pub fn mlp_forward(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let (batch, width) = input.dims2();
    if width != params.input_width() {
        return Err(Error::shape(format!(
            "MLP expects {} inputs, got {width}",
            params.input_width()
        )));
    }
    let layers = params.num_layers();
    let mut h = input.data().to_vec();
    for l in 0..layers {
        let (fan_in, fan_out) = (params.sizes[l], params.sizes[l + 1]);
        let bias = params.tensors[2 * l + 1].data();
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            &h,
            (fan_in, 1),
            params.tensors[2 * l].data(),
            (fan_out, 1),
            &mut out,
            true,
        );
        if l + 1 < layers {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = out;
    }
    Tensor::matrix(batch, params.output_width(), h)
}

/// Records the forward pass on `g`; `vars` are the network's tensors as
/// graph nodes in storage order.
pub fn mlp_graph(g: &mut Graph, sizes: &[usize], vars: &[Var], x: Var) -> Result<Var> {
    let layers = sizes.len().saturating_sub(1);
    if vars.len() != 2 * layers {
        return Err(Error::shape(format!(
            "{} vars for a {layers}-layer MLP",
            vars.len()
        )));
    }
    let mut h = x;
    for l in 0..layers {
        h = g.affine(h, vars[2 * l], vars[2 * l + 1])?;
        if l + 1 < layers {
            h = g.tanh(h);
        }
    }
    Ok(h)
}
