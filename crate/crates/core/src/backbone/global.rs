use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::{time_major, Gru};
use super::mlp::Mlp;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruDims {
    pub d: usize,
    pub hidden: usize,
    pub layers: usize,
    pub readout_hidden: usize,
}

impl GruDims {
    pub fn new(d: usize) -> Self {
        GruDims {
            d,
            hidden: 64,
            layers: 1,
            readout_hidden: 64,
        }
    }
}

/// The global regressor `f`: GRU states averaged over days, then a
/// readout MLP. Predictions are normalised internally and returned in
/// physical units by [`GruParams::global_gru_predict`].
#[derive(Clone, Debug)]
pub struct GruParams {
    pub store: ParamStore,
    pub dims: GruDims,
    pub norm: NormStats,
    gru: Gru,
    readout: Mlp,
}

impl GruParams {
    pub fn new<R: Rng>(dims: GruDims, norm: NormStats, rng: &mut R) -> Result<GruParams> {
        if norm.feature_mean.len() != dims.d {
            return Err(Error::dim(format!(
                "normalisation covers {} features, model has {}",
                norm.feature_mean.len(),
                dims.d
            )));
        }
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", dims.d, dims.hidden, dims.layers, rng)?;
        let readout = Mlp::new(&mut store, "readout", &[dims.hidden, dims.readout_hidden, 1], rng)?;
        Ok(GruParams {
            store,
            dims,
            norm,
            gru,
            readout,
        })
    }

    pub fn gru(&self) -> &Gru {
        &self.gru
    }

    pub fn readout(&self) -> &Mlp {
        &self.readout
    }

    /// Mean of the per-step states `[B×H]`.
    pub fn mean_pool(tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let mut acc = *states.first().ok_or_else(|| Error::dim("mean of zero steps"))?;
        for &s in &states[1..] {
            acc = tape.add(acc, s)?;
        }
        tape.scale(acc, 1.0 / states.len() as f64)
    }

    /// Normalised predictions `[B×1]` for normalised sequences.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seqs: &[&Tensor]) -> Result<Var> {
        let t = seqs.first().ok_or_else(|| Error::dim("no sequences"))?.rows();
        let x = tape.constant(time_major(seqs)?);
        let states = self.gru.forward(tape, store, x, t, seqs.len())?;
        let pooled = Self::mean_pool(tape, &states)?;
        self.readout.forward(tape, store, pooled)
    }

    /// Normalised predictions, evaluated `chunk` sequences at a time.
    pub fn predict_normalized(&self, seqs: &[&Tensor], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let y = self.forward(&mut tape, &self.store, part)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    /// Prediction in physical units for one normalised `[T×d]` matrix.
    pub fn global_gru_predict(&self, x: &Tensor) -> Result<f64> {
        if x.shape().len() != 2 || x.cols() != self.dims.d {
            return Err(Error::dim(format!("expected a [T×{}] matrix, got {:?}", self.dims.d, x.shape())));
        }
        let y = self.predict_normalized(&[x], 1)?[0];
        Ok(self.norm.denormalize_label(y))
    }
}
