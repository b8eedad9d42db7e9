use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden and cell rows of one LSTM layer, `[D, H]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[rows, hidden]),
            c: Tensor::zeros(&[rows, hidden]),
        }
    }
}

/// Weights `{prefix}.wx [in, 4H]`, `{prefix}.wh [H, 4H]`, `{prefix}.b [4H]`
/// with gates ordered input, forget, cell, output. Kernels are uniform in
/// `±1/sqrt(fan_in)`; the forget bias starts at 1.
pub fn lstm_params(prefix: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let mut uniform = |rows: usize| {
        let limit = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * 4 * hidden).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor::matrix(rows, 4 * hidden, data).expect("lstm kernel shape")
    };
    let wx = uniform(in_dim);
    let wh = uniform(hidden);
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
    vec![
        (format!("{prefix}.wx"), wx),
        (format!("{prefix}.wh"), wh),
        (format!("{prefix}.b"), Tensor::vector(b)),
    ]
}

/// One LSTM step over `D` independent rows: `x [D, in]`, `h, c [D, H]`.
pub fn lstm_cell(tape: &mut Tape, weights: [Var; 3], x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let [wx, wh, b] = weights;
    let hidden = tape.try_value(h)?.shape()[1];
    let zx = tape.matmul(x, wx)?;
    let zh = tape.matmul(h, wh)?;
    let z = tape.add(zx, zh)?;
    let rows = tape.value(z).shape()[0];
    let bias = tape.broadcast_row(b, rows)?;
    let z = tape.add(z, bias)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * hidden, hidden);
    let i = gate(tape, 0)?;
    let i = tape.sigmoid(i)?;
    let f = gate(tape, 1)?;
    let f = tape.sigmoid(f)?;
    let g = gate(tape, 2)?;
    let g = tape.tanh(g)?;
    let o = gate(tape, 3)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
