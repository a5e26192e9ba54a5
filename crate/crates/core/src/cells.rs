//! Vanilla RNN, peephole LSTM and GRU cells as single-step functions on a
//! [`Tape`]. All steps carry a leading batch axis: inputs are `[batch, in]`
//! and hidden states `[batch, hidden]`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autograd::sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

/// Weight initialisation: weights `~ N(0, stddev^2)`, biases constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Init {
    pub weight_stddev: f64,
    pub bias_value: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self {
            weight_stddev: 0.1,
            bias_value: 0.0,
        }
    }
}

impl Init {
    fn weight(&self, rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::gaussian(rng, shape, 0.0, self.weight_stddev).expect("positive stddev")
    }

    fn bias(&self, n: usize) -> Tensor {
        Tensor::full(&[n], self.bias_value)
    }
}

/// Named access to the tensors of a parameter record, in a fixed order.
pub trait CellParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on the tape as a differentiable leaf, in
    /// [`CellParams::named`] order.
    fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.named().into_iter().map(|(_, t)| tape.param(t)).collect()
    }
}

/// Widths of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    pub input: usize,
    pub hidden: usize,
    /// Output width; only the vanilla cell has an output projection.
    pub output: usize,
}

impl Widths {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }
}

fn expect_shape(op: &'static str, tape: &Tape, v: Var, shape: &[usize]) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(Error::dim(op, tape.shape(v), shape));
    }
    Ok(())
}

fn check_step_inputs(op: &'static str, tape: &Tape, x: Var, h: Var, w: Widths) -> Result<usize> {
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != w.input {
        return Err(Error::dim(op, xs, &[xs.first().copied().unwrap_or(0), w.input]));
    }
    let batch = xs[0];
    expect_shape(op, tape, h, &[batch, w.hidden])?;
    Ok(batch)
}

/// `x W_x + h W_h + b`.
fn affine2(tape: &mut Tape, x: Var, wx: Var, h: Var, wh: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, wx)?;
    let hw = tape.matmul(h, wh)?;
    let s = tape.add(xw, hw)?;
    tape.add_bias(s, b)
}

// ---------------------------------------------------------------------------
// Vanilla RNN

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaRnnParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub w_y: Tensor,
    pub b_h: Tensor,
    pub b_y: Tensor,
    pub act_h: Activation,
    pub act_y: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct VanillaRnnVars {
    pub w_x: Var,
    pub w_h: Var,
    pub w_y: Var,
    pub b_h: Var,
    pub b_y: Var,
    pub act_h: Activation,
    pub act_y: Activation,
    widths: Widths,
}

impl VanillaRnnParams {
    pub fn init(w: Widths, rng: &mut Rng, init: Init) -> Self {
        Self {
            w_x: init.weight(rng, &[w.input, w.hidden]),
            w_h: init.weight(rng, &[w.hidden, w.hidden]),
            w_y: init.weight(rng, &[w.hidden, w.output]),
            b_h: init.bias(w.hidden),
            b_y: init.bias(w.output),
            act_h: Activation::Tanh,
            act_y: Activation::Identity,
        }
    }

    pub fn widths(&self) -> Widths {
        Widths::new(self.w_x.shape()[0], self.w_x.shape()[1], self.w_y.shape()[1])
    }

    pub fn bind(&self, tape: &mut Tape) -> VanillaRnnVars {
        let v = self.bind_all(tape);
        self.vars_from(&v)
    }

    /// Rebuilds handles from vars laid out in [`CellParams::named`] order.
    pub fn vars_from(&self, v: &[Var]) -> VanillaRnnVars {
        VanillaRnnVars {
            w_x: v[0],
            w_h: v[1],
            w_y: v[2],
            b_h: v[3],
            b_y: v[4],
            act_h: self.act_h,
            act_y: self.act_y,
            widths: self.widths(),
        }
    }
}

impl CellParams for VanillaRnnParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("W_x", &self.w_x),
            ("W_h", &self.w_h),
            ("W_y", &self.w_y),
            ("b_h", &self.b_h),
            ("b_y", &self.b_y),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("W_x", &mut self.w_x),
            ("W_h", &mut self.w_h),
            ("W_y", &mut self.w_y),
            ("b_h", &mut self.b_h),
            ("b_y", &mut self.b_y),
        ]
    }
}

/// `h = act_h(x W_x + h_prev W_h + b_h)`, `y = act_y(h W_y + b_y)`.
pub fn vanilla_rnn_step(p: &VanillaRnnVars, tape: &mut Tape, x: Var, h_prev: Var) -> Result<(Var, Var)> {
    check_step_inputs("vanilla_rnn_step", tape, x, h_prev, p.widths)?;
    let pre = affine2(tape, x, p.w_x, h_prev, p.w_h, p.b_h)?;
    let h = p.act_h.apply(tape, pre);
    let hy = tape.matmul(h, p.w_y)?;
    let pre_y = tape.add_bias(hy, p.b_y)?;
    let y = p.act_y.apply(tape, pre_y);
    Ok((h, y))
}

// ---------------------------------------------------------------------------
// LSTM

/// Elementwise peephole weights on the cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct Peephole {
    pub w_ci: Tensor,
    pub w_cf: Tensor,
    pub w_co: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_xi: Tensor,
    pub w_xf: Tensor,
    pub w_xc: Tensor,
    pub w_xo: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_hc: Tensor,
    pub w_ho: Tensor,
    /// `None` disables the peephole terms.
    pub peephole: Option<Peephole>,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
    pub act_i: Activation,
    pub act_f: Activation,
    pub act_c: Activation,
    pub act_o: Activation,
    pub act_h: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_xi: Var,
    pub w_xf: Var,
    pub w_xc: Var,
    pub w_xo: Var,
    pub w_hi: Var,
    pub w_hf: Var,
    pub w_hc: Var,
    pub w_ho: Var,
    pub peephole: Option<[Var; 3]>,
    pub b_i: Var,
    pub b_f: Var,
    pub b_c: Var,
    pub b_o: Var,
    acts: [Activation; 5],
    widths: Widths,
}

impl LstmParams {
    pub fn init(w: Widths, rng: &mut Rng, init: Init) -> Self {
        let (i, h) = (w.input, w.hidden);
        Self {
            w_xi: init.weight(rng, &[i, h]),
            w_xf: init.weight(rng, &[i, h]),
            w_xc: init.weight(rng, &[i, h]),
            w_xo: init.weight(rng, &[i, h]),
            w_hi: init.weight(rng, &[h, h]),
            w_hf: init.weight(rng, &[h, h]),
            w_hc: init.weight(rng, &[h, h]),
            w_ho: init.weight(rng, &[h, h]),
            peephole: Some(Peephole {
                w_ci: init.weight(rng, &[h]),
                w_cf: init.weight(rng, &[h]),
                w_co: init.weight(rng, &[h]),
            }),
            b_i: init.bias(h),
            b_f: init.bias(h),
            b_c: init.bias(h),
            b_o: init.bias(h),
            act_i: Activation::Sigmoid,
            act_f: Activation::Sigmoid,
            act_c: Activation::Tanh,
            act_o: Activation::Sigmoid,
            act_h: Activation::Tanh,
        }
    }

    pub fn without_peephole(mut self) -> Self {
        self.peephole = None;
        self
    }

    pub fn widths(&self) -> Widths {
        let h = self.w_xi.shape()[1];
        Widths::new(self.w_xi.shape()[0], h, h)
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmVars {
        let v = self.bind_all(tape);
        self.vars_from(&v)
    }

    pub fn vars_from(&self, v: &[Var]) -> LstmVars {
        let (peephole, b) = if self.peephole.is_some() {
            (Some([v[8], v[9], v[10]]), 11)
        } else {
            (None, 8)
        };
        LstmVars {
            w_xi: v[0],
            w_xf: v[1],
            w_xc: v[2],
            w_xo: v[3],
            w_hi: v[4],
            w_hf: v[5],
            w_hc: v[6],
            w_ho: v[7],
            peephole,
            b_i: v[b],
            b_f: v[b + 1],
            b_c: v[b + 2],
            b_o: v[b + 3],
            acts: [self.act_i, self.act_f, self.act_c, self.act_o, self.act_h],
            widths: self.widths(),
        }
    }
}

impl CellParams for LstmParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("W_xi", &self.w_xi),
            ("W_xf", &self.w_xf),
            ("W_xc", &self.w_xc),
            ("W_xo", &self.w_xo),
            ("W_hi", &self.w_hi),
            ("W_hf", &self.w_hf),
            ("W_hc", &self.w_hc),
            ("W_ho", &self.w_ho),
        ];
        if let Some(p) = &self.peephole {
            out.extend([("w_ci", &p.w_ci), ("w_cf", &p.w_cf), ("w_co", &p.w_co)]);
        }
        out.extend([
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]);
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("W_xi", &mut self.w_xi),
            ("W_xf", &mut self.w_xf),
            ("W_xc", &mut self.w_xc),
            ("W_xo", &mut self.w_xo),
            ("W_hi", &mut self.w_hi),
            ("W_hf", &mut self.w_hf),
            ("W_hc", &mut self.w_hc),
            ("W_ho", &mut self.w_ho),
        ];
        if let Some(p) = &mut self.peephole {
            out.extend([("w_ci", &mut p.w_ci), ("w_cf", &mut p.w_cf), ("w_co", &mut p.w_co)]);
        }
        out.extend([
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_c", &mut self.b_c),
            ("b_o", &mut self.b_o),
        ]);
        out
    }
}

/// Hidden state, plus the cell state for LSTM-family cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn hidden(h: Var) -> Self {
        Self { h, c: None }
    }

    pub fn with_cell(h: Var, c: Var) -> Self {
        Self { h, c: Some(c) }
    }

    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize, with_cell: bool) -> Self {
        let h = tape.zeros(&[batch, hidden]);
        let c = with_cell.then(|| tape.zeros(&[batch, hidden]));
        Self { h, c }
    }
}

/// One peephole-LSTM step.
pub fn lstm_step(p: &LstmVars, tape: &mut Tape, x: Var, state: CellState) -> Result<CellState> {
    let c_prev = state
        .c
        .ok_or_else(|| Error::contract("lstm_step needs a cell state"))?;
    let batch = check_step_inputs("lstm_step", tape, x, state.h, p.widths)?;
    expect_shape("lstm_step", tape, c_prev, &[batch, p.widths.hidden])?;
    let [act_i, act_f, act_c, act_o, act_h] = p.acts;
    let h_prev = state.h;

    let gate = |tape: &mut Tape, wx: Var, wh: Var, peep: Option<Var>, c: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(x, wx)?;
        let hw = tape.matmul(h_prev, wh)?;
        let mut s = tape.add(xw, hw)?;
        if let Some(w) = peep {
            let pc = tape.mul_row(c, w)?;
            s = tape.add(s, pc)?;
        }
        tape.add_bias(s, b)
    };

    let peep = p.peephole;
    let pre_i = gate(tape, p.w_xi, p.w_hi, peep.map(|w| w[0]), c_prev, p.b_i)?;
    let i = act_i.apply(tape, pre_i);
    let pre_f = gate(tape, p.w_xf, p.w_hf, peep.map(|w| w[1]), c_prev, p.b_f)?;
    let f = act_f.apply(tape, pre_f);
    let pre_c = gate(tape, p.w_xc, p.w_hc, None, c_prev, p.b_c)?;
    let cand = act_c.apply(tape, pre_c);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let pre_o = gate(tape, p.w_xo, p.w_ho, peep.map(|w| w[2]), c, p.b_o)?;
    let o = act_o.apply(tape, pre_o);
    let squashed = act_h.apply(tape, c);
    let h = tape.mul(o, squashed)?;
    Ok(CellState::with_cell(h, c))
}

// ---------------------------------------------------------------------------
// GRU

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_xr: Tensor,
    pub w_xu: Tensor,
    pub w_xc: Tensor,
    pub w_hr: Tensor,
    pub w_hu: Tensor,
    pub w_hc: Tensor,
    pub b_r: Tensor,
    pub b_u: Tensor,
    pub b_c: Tensor,
    pub act_r: Activation,
    pub act_u: Activation,
    pub act_c: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_xr: Var,
    pub w_xu: Var,
    pub w_xc: Var,
    pub w_hr: Var,
    pub w_hu: Var,
    pub w_hc: Var,
    pub b_r: Var,
    pub b_u: Var,
    pub b_c: Var,
    pub act_r: Activation,
    pub act_u: Activation,
    pub act_c: Activation,
    pub widths: Widths,
}

impl GruParams {
    pub fn init(w: Widths, rng: &mut Rng, init: Init) -> Self {
        let (i, h) = (w.input, w.hidden);
        Self {
            w_xr: init.weight(rng, &[i, h]),
            w_xu: init.weight(rng, &[i, h]),
            w_xc: init.weight(rng, &[i, h]),
            w_hr: init.weight(rng, &[h, h]),
            w_hu: init.weight(rng, &[h, h]),
            w_hc: init.weight(rng, &[h, h]),
            b_r: init.bias(h),
            b_u: init.bias(h),
            b_c: init.bias(h),
            act_r: Activation::Sigmoid,
            act_u: Activation::Sigmoid,
            act_c: Activation::Tanh,
        }
    }

    pub fn widths(&self) -> Widths {
        let h = self.w_xr.shape()[1];
        Widths::new(self.w_xr.shape()[0], h, h)
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        let v = self.bind_all(tape);
        self.vars_from(&v)
    }

    pub fn vars_from(&self, v: &[Var]) -> GruVars {
        let mut g = GruVars::with_default_activations(v, self.widths());
        g.act_r = self.act_r;
        g.act_u = self.act_u;
        g.act_c = self.act_c;
        g
    }
}

impl GruVars {
    /// Handles from vars in [`CellParams::named`] order, with sigmoid gates
    /// and a tanh candidate.
    pub fn with_default_activations(v: &[Var], widths: Widths) -> GruVars {
        GruVars {
            w_xr: v[0],
            w_xu: v[1],
            w_xc: v[2],
            w_hr: v[3],
            w_hu: v[4],
            w_hc: v[5],
            b_r: v[6],
            b_u: v[7],
            b_c: v[8],
            act_r: Activation::Sigmoid,
            act_u: Activation::Sigmoid,
            act_c: Activation::Tanh,
            widths,
        }
    }
}

impl CellParams for GruParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("W_xr", &self.w_xr),
            ("W_xu", &self.w_xu),
            ("W_xc", &self.w_xc),
            ("W_hr", &self.w_hr),
            ("W_hu", &self.w_hu),
            ("W_hc", &self.w_hc),
            ("b_r", &self.b_r),
            ("b_u", &self.b_u),
            ("b_c", &self.b_c),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("W_xr", &mut self.w_xr),
            ("W_xu", &mut self.w_xu),
            ("W_xc", &mut self.w_xc),
            ("W_hr", &mut self.w_hr),
            ("W_hu", &mut self.w_hu),
            ("W_hc", &mut self.w_hc),
            ("b_r", &mut self.b_r),
            ("b_u", &mut self.b_u),
            ("b_c", &mut self.b_c),
        ]
    }
}

/// Input projections `x W_xr`, `x W_xu`, `x W_xc` of a GRU step. Computing
/// them separately lets a lattice sweep project every cell in one product.
#[derive(Clone, Copy, Debug)]
pub struct GruInputProj {
    pub r: Var,
    pub u: Var,
    pub c: Var,
}

/// Number of scalars in a GRU with the given widths.
pub fn gru_param_count(input: usize, hidden: usize) -> usize {
    3 * (input * hidden + hidden * hidden + hidden)
}

pub fn gru_input_proj(p: &GruVars, tape: &mut Tape, x: Var) -> Result<GruInputProj> {
    Ok(GruInputProj {
        r: tape.matmul(x, p.w_xr)?,
        u: tape.matmul(x, p.w_xu)?,
        c: tape.matmul(x, p.w_xc)?,
    })
}

/// GRU update from precomputed input projections and the conditioning
/// state `h_prev`.
pub fn gru_step_projected(p: &GruVars, tape: &mut Tape, xp: GruInputProj, h_prev: Var) -> Result<Var> {
    let batch = tape.shape(xp.r)[0];
    expect_shape("gru_step", tape, h_prev, &[batch, p.widths.hidden])?;
    let hr = tape.matmul(h_prev, p.w_hr)?;
    let s = tape.add(xp.r, hr)?;
    let s = tape.add_bias(s, p.b_r)?;
    let r = p.act_r.apply(tape, s);

    let hu = tape.matmul(h_prev, p.w_hu)?;
    let s = tape.add(xp.u, hu)?;
    let s = tape.add_bias(s, p.b_u)?;
    let u = p.act_u.apply(tape, s);

    let hc = tape.matmul(h_prev, p.w_hc)?;
    let gated = tape.mul(r, hc)?;
    let s = tape.add(xp.c, gated)?;
    let s = tape.add_bias(s, p.b_c)?;
    let c = p.act_c.apply(tape, s);

    let one_minus_u = tape.one_minus(u);
    let keep = tape.mul(one_minus_u, h_prev)?;
    let write = tape.mul(u, c)?;
    tape.add(keep, write)
}

/// One GRU step: reset and update gates, gated candidate, convex update.
pub fn gru_step(p: &GruVars, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
    check_step_inputs("gru_step", tape, x, h_prev, p.widths)?;
    let xp = gru_input_proj(p, tape, x)?;
    gru_step_projected(p, tape, xp, h_prev)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellFamily {
    Rnn,
    Lstm,
    Gru,
}

/// Parameters of any of the three cell families.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCellParams {
    Rnn(VanillaRnnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

/// Initialises a cell of `family`. Weights are drawn in
/// [`CellParams::named`] order, so a seed fully determines the record.
pub fn init_params(family: CellFamily, widths: Widths, rng: &mut Rng, init: Init) -> AnyCellParams {
    match family {
        CellFamily::Rnn => AnyCellParams::Rnn(VanillaRnnParams::init(widths, rng, init)),
        CellFamily::Lstm => AnyCellParams::Lstm(LstmParams::init(widths, rng, init)),
        CellFamily::Gru => AnyCellParams::Gru(GruParams::init(widths, rng, init)),
    }
}

impl CellParams for AnyCellParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            AnyCellParams::Rnn(p) => p.named(),
            AnyCellParams::Lstm(p) => p.named(),
            AnyCellParams::Gru(p) => p.named(),
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            AnyCellParams::Rnn(p) => p.named_mut(),
            AnyCellParams::Lstm(p) => p.named_mut(),
            AnyCellParams::Gru(p) => p.named_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed<P: CellParams>(mut p: P) -> P {
        for (_, t) in p.named_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    fn rand_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::uniform(rng, shape, -2.0, 2.0).unwrap()
    }

    #[test]
    fn vanilla_zero_map() {
        let mut rng = Rng::new(1);
        let p = zeroed(VanillaRnnParams::init(Widths::new(3, 4, 2), &mut rng, Init::default()));
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(rand_input(&mut rng, &[2, 3]));
        let h0 = tape.constant(rand_input(&mut rng, &[2, 4]));
        let (h, _) = vanilla_rnn_step(&v, &mut tape, x, h0).unwrap();
        assert!(tape.value(h).data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn vanilla_identity_pass_through() {
        let mut rng = Rng::new(2);
        let mut p = zeroed(VanillaRnnParams::init(Widths::new(3, 3, 3), &mut rng, Init::default()));
        p.w_x = Tensor::eye(3);
        p.act_h = Activation::Identity;
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let xt = rand_input(&mut rng, &[2, 3]);
        let x = tape.constant(xt.clone());
        let h0 = tape.constant(rand_input(&mut rng, &[2, 3]));
        let (h, _) = vanilla_rnn_step(&v, &mut tape, x, h0).unwrap();
        assert_eq!(tape.value(h).data(), xt.data());
    }

    #[test]
    fn vanilla_shape_mismatch() {
        let mut rng = Rng::new(3);
        let p = VanillaRnnParams::init(Widths::new(3, 4, 2), &mut rng, Init::default());
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(&[2, 5]);
        let h0 = tape.zeros(&[2, 4]);
        assert!(matches!(
            vanilla_rnn_step(&v, &mut tape, x, h0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstm_zero_params() {
        let mut rng = Rng::new(4);
        let p = zeroed(LstmParams::init(Widths::new(3, 4, 4), &mut rng, Init::default()));
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(rand_input(&mut rng, &[1, 3]));
        let s0 = CellState::zeros(&mut tape, 1, 4, true);
        let s = lstm_step(&v, &mut tape, x, s0).unwrap();
        assert!(tape.value(s.h).data().iter().all(|&z| z == 0.0));
        assert!(tape.value(s.c.unwrap()).data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_carry_cell() {
        let mut rng = Rng::new(5);
        let mut p = LstmParams::init(Widths::new(3, 4, 4), &mut rng, Init::default());
        p.b_f.data_mut().fill(20.0);
        p.b_i.data_mut().fill(-20.0);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(&mut rng, &[2, 3], 0.0, 1.0).unwrap());
        let h0 = tape.constant(Tensor::uniform(&mut rng, &[2, 4], -0.5, 0.5).unwrap());
        let ct = Tensor::uniform(&mut rng, &[2, 4], -1.0, 1.0).unwrap();
        let c0 = tape.constant(ct.clone());
        let s = lstm_step(&v, &mut tape, x, CellState::with_cell(h0, c0)).unwrap();
        assert!(tape.value(s.c.unwrap()).max_abs_diff(&ct) < 1e-6);
    }

    #[test]
    fn lstm_requires_cell_state() {
        let mut rng = Rng::new(6);
        let p = LstmParams::init(Widths::new(3, 4, 4), &mut rng, Init::default());
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.zeros(&[1, 3]);
        let h = tape.zeros(&[1, 4]);
        assert!(matches!(
            lstm_step(&v, &mut tape, x, CellState::hidden(h)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut rng = Rng::new(7);
        let p = zeroed(GruParams::init(Widths::new(3, 4, 4), &mut rng, Init::default()));
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(rand_input(&mut rng, &[2, 3]));
        let ht = rand_input(&mut rng, &[2, 4]);
        let h0 = tape.constant(ht.clone());
        let h = gru_step(&v, &mut tape, x, h0).unwrap();
        for (a, b) in tape.value(h).data().iter().zip(ht.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn gru_closed_update_gate_keeps_state() {
        let mut rng = Rng::new(8);
        let mut p = GruParams::init(Widths::new(3, 4, 4), &mut rng, Init::default());
        p.b_u.data_mut().fill(-20.0);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let x = tape.constant(Tensor::uniform(&mut rng, &[2, 3], 0.0, 1.0).unwrap());
        let ht = Tensor::uniform(&mut rng, &[2, 4], -1.0, 1.0).unwrap();
        let h0 = tape.constant(ht.clone());
        let h = gru_step(&v, &mut tape, x, h0).unwrap();
        assert!(tape.value(h).max_abs_diff(&ht) < 1e-6);
    }

    #[test]
    fn zero_input_zero_state_fixpoint() {
        let mut rng = Rng::new(9);
        let w = Widths::new(3, 4, 4);
        let mut tape = Tape::new();
        let x = tape.zeros(&[1, 3]);
        let h0 = tape.zeros(&[1, 4]);

        let rnn = VanillaRnnParams::init(w, &mut rng, Init::default()).bind(&mut tape);
        let (h, _) = vanilla_rnn_step(&rnn, &mut tape, x, h0).unwrap();
        assert!(tape.value(h).data().iter().all(|&z| z == 0.0));

        let gru = GruParams::init(w, &mut rng, Init::default()).bind(&mut tape);
        let h = gru_step(&gru, &mut tape, x, h0).unwrap();
        assert!(tape.value(h).data().iter().all(|&z| z == 0.0));

        let lstm = LstmParams::init(w, &mut rng, Init::default()).bind(&mut tape);
        let s0 = CellState::zeros(&mut tape, 1, 4, true);
        let s = lstm_step(&lstm, &mut tape, x, s0).unwrap();
        assert!(tape.value(s.h).data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn init_is_deterministic_with_expected_spread() {
        let w = Widths::new(100, 50, 50);
        let a = init_params(CellFamily::Gru, w, &mut Rng::new(10), Init::default());
        let b = init_params(CellFamily::Gru, w, &mut Rng::new(10), Init::default());
        assert_eq!(a, b);
        let AnyCellParams::Gru(g) = a else { unreachable!() };
        let weights: Vec<f64> = g.w_xr.data().iter().chain(g.w_xu.data()).copied().collect();
        assert!(weights.len() >= 10_000);
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        let std = (weights.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() < 0.01, "std {std}");
        assert!(g.b_r.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn peephole_toggle_changes_count() {
        let w = Widths::new(3, 4, 4);
        let p = LstmParams::init(w, &mut Rng::new(0), Init::default());
        let full = p.param_count();
        let plain = p.without_peephole().param_count();
        assert_eq!(full - plain, 12);
    }
}
