use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Var};

/// Fully connected stack with `tanh` between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `dims` lists the input width, any hidden widths, and the output width.
    /// Weights start in U(-1/√fan_in, 1/√fan_in), biases at zero.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) -> Result<Mlp> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::dim(format!("invalid MLP widths {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let scale = 1.0 / (pair[0] as f64).sqrt();
            let w = store.insert_uniform(format!("{prefix}.w{i}"), &[pair[0], pair[1]], scale, rng)?;
            let b = store.insert_uniform(format!("{prefix}.b{i}"), &[pair[1]], 0.0, rng)?;
            layers.push((w, b));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// Weight and bias ids of layer `i`.
    pub fn layer(&self, i: usize) -> (ParamId, ParamId) {
        self.layers[i]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `x[n×in] -> [n×out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let m = tape.matmul(h, wv)?;
            h = tape.add_bias(m, bv)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}
