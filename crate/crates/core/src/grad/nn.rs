//! Layer definitions shared by the agent network and the mixers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let (weight, bias) = store.init_linear(rng, name, fan_in, fan_out, bias)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            weight: tape.param(store, self.weight),
            bias: self.bias.map(|b| tape.param(store, b)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let b = self.bind(tape, store);
        b.forward(tape, x)
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x·W_r + b_ir + h·U_r + b_hr)
/// z  = σ(x·W_z + b_iz + h·U_z + b_hz)
/// n  = tanh(x·W_n + b_in + r ⊙ (h·U_n + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub input: BoundLinear,
    pub hidden: BoundLinear,
    pub width: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_width: usize,
        width: usize,
    ) -> Result<Self> {
        // both halves use 1/sqrt(width), as torch.nn.GRUCell does
        let bound = 1.0 / (width as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect()
        };
        let wi = draw(input_width, 3 * width);
        let bi = draw(1, 3 * width);
        let wh = draw(width, 3 * width);
        let bh = draw(1, 3 * width);
        let mk = |store: &mut ParamStore, suffix: &str, rows: usize, w: Vec<f64>, b: Vec<f64>| {
            let weight = store.insert(
                format!("{name}.{suffix}.weight"),
                super::Array::matrix(rows, 3 * width, w)?,
            )?;
            let bias = store.insert(format!("{name}.{suffix}.bias"), super::Array::vector(b))?;
            Ok::<_, LabError>(Linear {
                weight,
                bias: Some(bias),
                fan_in: rows,
                fan_out: 3 * width,
            })
        };
        let input = mk(store, "input", input_width, wi, bi)?;
        let hidden = mk(store, "hidden", width, wh, bh)?;
        Ok(GruCell {
            input,
            hidden,
            width,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundGru {
        BoundGru {
            input: self.input.bind(tape, store),
            hidden: self.hidden.bind(tape, store),
            width: self.width,
        }
    }
}

impl BoundGru {
    /// One recurrent step on a batch of rows: `x [rows, in]`, `h [rows, width]`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let w = self.width;
        if tape.value(h).cols() != w || tape.value(h).rows() != tape.value(x).rows() {
            return Err(LabError::dim(
                "gru_step",
                tape.value(x).shape(),
                tape.value(h).shape(),
            ));
        }
        let gi = self.input.forward(tape, x)?;
        let gh = self.hidden.forward(tape, h)?;
        let i_r = tape.slice_cols(gi, 0, w)?;
        let i_z = tape.slice_cols(gi, w, w)?;
        let i_n = tape.slice_cols(gi, 2 * w, w)?;
        let h_r = tape.slice_cols(gh, 0, w)?;
        let h_z = tape.slice_cols(gh, w, w)?;
        let h_n = tape.slice_cols(gh, 2 * w, w)?;
        let r = tape.add(i_r, h_r)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(i_z, h_z)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, h_n)?;
        let n = tape.add(i_n, rn)?;
        let n = tape.tanh(n)?;
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Two-layer MLP `in -> hidden (relu) -> out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Mlp2 {
            first: Linear::new(store, rng, &format!("{name}.l1"), input, hidden, true)?,
            second: Linear::new(store, rng, &format!("{name}.l2"), hidden, output, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, store, h)
    }
}
