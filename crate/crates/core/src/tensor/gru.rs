use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{ParError, Result};

/// Gate parameters of one GRU direction. Every gate weight acts on the
/// concatenation `[x; h]` (for the candidate state, `[x; r * h]`).
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruCellParams {
    /// Registers the cell's parameters under `prefix`, drawn uniformly from
    /// `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let cols = input_dim + hidden_dim;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-k..k)).collect() };
        let mut weight = |store: &mut ParamStore, name: &str| {
            let t = Tensor::matrix(hidden_dim, cols, draw(hidden_dim * cols)).unwrap();
            store.add(format!("{prefix}.{name}"), t)
        };
        let w_z = weight(store, "w_z");
        let w_r = weight(store, "w_r");
        let w_h = weight(store, "w_h");
        let b_z = store.add(format!("{prefix}.b_z"), Tensor::vector(vec![0.0; hidden_dim]));
        let b_r = store.add(format!("{prefix}.b_r"), Tensor::vector(vec![0.0; hidden_dim]));
        let b_h = store.add(format!("{prefix}.b_h"), Tensor::vector(vec![0.0; hidden_dim]));
        GruCellParams {
            input_dim,
            hidden_dim,
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        }
    }

    /// Checks parameter shapes against `(input_dim, hidden_dim)`.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let cols = self.input_dim + self.hidden_dim;
        for w in [self.w_z, self.w_r, self.w_h] {
            let shape = store.get(w).shape();
            if shape != [self.hidden_dim, cols] {
                return Err(ParError::dim("gru weight", shape, &[self.hidden_dim, cols]));
            }
        }
        for b in [self.b_z, self.b_r, self.b_h] {
            let shape = store.get(b).shape();
            if shape != [self.hidden_dim] {
                return Err(ParError::dim("gru bias", shape, &[self.hidden_dim]));
            }
        }
        Ok(())
    }

    /// One step: `z = s(W_z[x;h] + b_z)`, `r = s(W_r[x;h] + b_r)`,
    /// `c = tanh(W_h[x; r*h] + b_h)`, `h' = (1 - z) * h + z * c`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let (xd, hd) = (tape.value(x).len(), tape.value(h).len());
        if xd != self.input_dim || hd != self.hidden_dim {
            return Err(ParError::dim("gru_cell", &[self.input_dim, self.hidden_dim], &[xd, hd]));
        }
        let xh = tape.concat(&[x, h]);
        let z = tape.linear(self.w_z, xh, Some(self.b_z))?;
        let z = tape.sigmoid(z);
        let r = tape.linear(self.w_r, xh, Some(self.b_r))?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh]);
        let c = tape.linear(self.w_h, xrh, Some(self.b_h))?;
        let c = tape.tanh(c);
        // h + z * (c - h)
        let delta = tape.sub(c, h)?;
        let gated = tape.mul(z, delta)?;
        tape.add(h, gated)
    }

    /// Runs the cell over `inputs` from a zero state; returns every hidden state.
    pub fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut h = tape.constant(vec![0.0; self.hidden_dim]);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}
