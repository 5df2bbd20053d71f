use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct GruLayer {
    w: ParamId,
    u: ParamId,
    bi: ParamId,
    bh: ParamId,
}

/// Stacked gated recurrent unit over daily inputs.
///
/// Gate blocks are laid out `[reset | update | candidate]` along the
/// `3H` axis of every weight and bias:
///
/// ```text
/// r  = σ(x W_r + b_ir + h U_r + b_hr)
/// z  = σ(x W_z + b_iz + h U_z + b_hz)
/// n  = tanh(x W_n + b_in + r ⊙ (h U_n + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    d: usize,
    h: usize,
    layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        h: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Gru> {
        if d == 0 || h == 0 || n_layers == 0 {
            return Err(Error::dim(format!("invalid GRU sizes d={d} H={h} layers={n_layers}")));
        }
        let scale = 1.0 / (h as f64).sqrt();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let input = if l == 0 { d } else { h };
            layers.push(GruLayer {
                w: store.insert_uniform(format!("{prefix}.l{l}.w"), &[input, 3 * h], scale, rng)?,
                u: store.insert_uniform(format!("{prefix}.l{l}.u"), &[h, 3 * h], scale, rng)?,
                bi: store.insert_uniform(format!("{prefix}.l{l}.bi"), &[3 * h], scale, rng)?,
                bh: store.insert_uniform(format!("{prefix}.l{l}.bh"), &[3 * h], scale, rng)?,
            });
        }
        Ok(Gru { d, h, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden(&self) -> usize {
        self.h
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(w, u, bi, bh)` ids of layer `l`.
    pub fn layer_ids(&self, l: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let g = &self.layers[l];
        (g.w, g.u, g.bi, g.bh)
    }

    /// Runs `b` sequences of length `t` given as one time-major matrix
    /// `[t·b × d]` (row `step·b + seq`). Returns the top-layer state
    /// `[b×H]` for every step.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, t: usize, b: usize) -> Result<Vec<Var>> {
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        if cols != self.d {
            return Err(Error::dim(format!("GRU expects {} input columns, got {cols}", self.d)));
        }
        if rows != t * b || t == 0 {
            return Err(Error::dim(format!("{rows} input rows for {t} steps of {b} sequences")));
        }
        let h = self.h;
        let mut input = x;
        let mut states = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                input = tape.concat_rows(&states)?;
            }
            let w = tape.param(store, layer.w);
            let u = tape.param(store, layer.u);
            let bi = tape.param(store, layer.bi);
            let bh = tape.param(store, layer.bh);
            let xw = tape.matmul(input, w)?;
            let xw = tape.add_bias(xw, bi)?;
            let mut state = tape.constant(Tensor::zeros(&[b, h]));
            states = Vec::with_capacity(t);
            for step in 0..t {
                let xs = tape.slice_rows(xw, step * b, b)?;
                let hu = tape.matmul(state, u)?;
                let hu = tape.add_bias(hu, bh)?;
                let xr = tape.slice_cols(xs, 0, h)?;
                let hr = tape.slice_cols(hu, 0, h)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r)?;
                let xz = tape.slice_cols(xs, h, h)?;
                let hz = tape.slice_cols(hu, h, h)?;
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z)?;
                let xn = tape.slice_cols(xs, 2 * h, h)?;
                let hn = tape.slice_cols(hu, 2 * h, h)?;
                let rn = tape.mul(r, hn)?;
                let n = tape.add(xn, rn)?;
                let n = tape.tanh(n)?;
                let diff = tape.sub(state, n)?;
                let zd = tape.mul(z, diff)?;
                state = tape.add(n, zd)?;
                states.push(state);
            }
        }
        Ok(states)
    }

    /// Hidden states `[T×H]` of one sequence `[T×d]`.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = x.rows();
        let xv = tape.constant(x.clone());
        let states = self.forward(&mut tape, store, xv, t, 1)?;
        let all = tape.concat_rows(&states)?;
        Ok(tape.value(all).clone())
    }
}

/// Stacks `[T×d]` sequences into the time-major layout of [`Gru::forward`].
pub fn time_major(seqs: &[&Tensor]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::dim("no sequences to stack"))?;
    let (t, d) = (first.rows(), first.cols());
    let b = seqs.len();
    let mut data = vec![0.0; t * b * d];
    for (j, s) in seqs.iter().enumerate() {
        if s.rows() != t || s.cols() != d {
            return Err(Error::dim(format!(
                "sequence {j} is {}x{}, expected {t}x{d}",
                s.rows(),
                s.cols()
            )));
        }
        for step in 0..t {
            let at = (step * b + j) * d;
            data[at..at + d].copy_from_slice(s.row(step));
        }
    }
    Tensor::matrix(t * b, d, data)
}
