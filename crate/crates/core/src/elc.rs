//! Explicit long-range conditioning (ELC).
//!
//! An ELC cell replaces the previous hidden state by an average over
//! stride-spaced earlier states. In one dimension the aggregate is
//!
//! ```text
//! H^t = (h^{t-1} + h^{t-s} + h^{t-2s} + ... + h^{t-ks}) / (k + 1)
//! ```
//!
//! and on a lattice it is the mean of the four degree-`s` predecessors. A
//! reference that falls before the start of the sequence (or off the grid)
//! contributes a zero state but still counts in the normaliser. No weights
//! are added: an ELC cell reuses its base cell's parameter record.

use crate::autograd::{Tape, Var};
use crate::cells::{gru_step, lstm_step, vanilla_rnn_step, CellState, GruVars, LstmVars, VanillaRnnVars};
use crate::error::{Error, Result};
use crate::lattice::{degree_neighbors, Direction, LatticeSpec, NeighborMask};

/// Conditioning skip stride `s` and conditioning scale `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElcSpec {
    pub stride: usize,
    pub scale: usize,
}

impl ElcSpec {
    pub fn new(stride: usize, scale: usize) -> Result<Self> {
        if stride == 0 || scale == 0 {
            return Err(Error::contract(format!(
                "ELC stride and scale must be >= 1 (s={stride}, k={scale})"
            )));
        }
        Ok(Self { stride, scale })
    }

    /// 1-based time indices referenced at step `t`: `t-1` then `t-i*s`.
    /// Entries below 1 are out of range.
    pub fn references(&self, t: usize) -> Vec<Option<usize>> {
        std::iter::once(1)
            .chain((1..=self.scale).map(|i| i * self.stride))
            .map(|back| t.checked_sub(back).filter(|&r| r >= 1))
            .collect()
    }
}

/// Append-only record of cell states, indexed by 1-based time step.
#[derive(Clone, Debug, Default)]
pub struct HiddenHistory {
    states: Vec<CellState>,
}

impl HiddenHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, state: CellState) {
        self.states.push(state);
    }

    /// Number of steps written so far.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<CellState> {
        t.checked_sub(1).and_then(|i| self.states.get(i)).copied()
    }
}

fn aggregate_with(
    tape: &mut Tape,
    history: &HiddenHistory,
    t: usize,
    spec: ElcSpec,
    pick: impl Fn(&CellState) -> Option<Var>,
) -> Result<Var> {
    if t < 2 {
        return Err(Error::contract(format!("ELC aggregate needs t >= 2, got {t}")));
    }
    if history.len() < t - 1 {
        return Err(Error::contract(format!(
            "history has {} steps, step {} not yet written",
            history.len(),
            t - 1
        )));
    }
    let mut acc: Option<Var> = None;
    for r in spec.references(t).into_iter().flatten() {
        let state = history.get(r).expect("checked length");
        let v = pick(&state).ok_or_else(|| Error::contract(format!("step {r} lacks a cell state")))?;
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    // t >= 2 always references t-1.
    let sum = acc.expect("t-1 is in range");
    Ok(tape.scale(sum, 1.0 / (spec.scale as f64 + 1.0)))
}

/// `H^t` over hidden states.
pub fn elc_aggregate(tape: &mut Tape, history: &HiddenHistory, t: usize, spec: ElcSpec) -> Result<Var> {
    aggregate_with(tape, history, t, spec, |s| Some(s.h))
}

/// The same average taken over LSTM cell states.
pub fn elc_aggregate_cell(tape: &mut Tape, history: &HiddenHistory, t: usize, spec: ElcSpec) -> Result<Var> {
    aggregate_with(tape, history, t, spec, |s| s.c)
}

/// Vanilla RNN step conditioned on `H^t` instead of `h^{t-1}`.
pub fn rnn_elc_step(
    p: &VanillaRnnVars,
    tape: &mut Tape,
    x: Var,
    history: &HiddenHistory,
    t: usize,
    spec: ElcSpec,
) -> Result<(Var, Var)> {
    let agg = elc_aggregate(tape, history, t, spec)?;
    vanilla_rnn_step(p, tape, x, agg)
}

/// GRU step with the aggregate `agg` in every place the plain cell reads
/// `h^{t-1}`, including the convex update `h = (1-u) H + u c`.
pub fn gru_elc_step(p: &GruVars, tape: &mut Tape, x: Var, agg: Var) -> Result<Var> {
    gru_step(p, tape, x, agg)
}

/// LSTM step reading aggregated hidden (`agg_h`) and cell (`agg_c`) states.
pub fn lstm_elc_step(p: &LstmVars, tape: &mut Tape, x: Var, agg_h: Var, agg_c: Var) -> Result<CellState> {
    lstm_step(p, tape, x, CellState::with_cell(agg_h, agg_c))
}

/// Hidden states of a lattice sweep in unfold (sequence) order. Sequence
/// index `t` maps to frame coordinates `(t / width, t % width)`.
#[derive(Clone, Debug)]
pub struct LatticeHistory {
    height: usize,
    width: usize,
    state_shape: [usize; 2],
    states: Vec<Option<Var>>,
}

impl LatticeHistory {
    pub fn new(height: usize, width: usize, state_shape: [usize; 2]) -> Self {
        Self {
            height,
            width,
            state_shape,
            states: vec![None; height * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, t: usize, v: Var) -> Result<()> {
        match self.states.get_mut(t) {
            Some(slot @ None) => {
                *slot = Some(v);
                Ok(())
            }
            Some(Some(_)) => Err(Error::contract(format!("lattice cell {t} written twice"))),
            None => Err(Error::contract(format!("lattice index {t} out of range"))),
        }
    }

    pub fn get(&self, t: usize) -> Result<Var> {
        self.states
            .get(t)
            .copied()
            .flatten()
            .ok_or_else(|| Error::contract(format!("lattice cell {t} read before it was computed")))
    }
}

/// Mean of the enabled degree-`stride` predecessors of sequence index `t`.
/// Present neighbours are summed in `[t-s, t-ws-s, t-ws, t-ws+s]` order, then
/// scaled by `1 / mask.enabled()`.
pub fn aggregate_2d_masked(
    tape: &mut Tape,
    history: &LatticeHistory,
    t: usize,
    stride: usize,
    mask: NeighborMask,
) -> Result<Var> {
    let spec = LatticeSpec::new(history.height, history.width, Direction::Se, stride)?;
    if t >= spec.cells() {
        return Err(Error::contract(format!(
            "index {t} outside {}x{} lattice",
            history.height, history.width
        )));
    }
    let enabled = mask.enabled();
    if enabled == 0 {
        return Err(Error::contract("neighbour mask enables no branch"));
    }
    let mut acc: Option<Var> = None;
    for (n, on) in degree_neighbors(t, &spec).into_iter().zip(mask.0) {
        let Some(n) = n.filter(|_| on) else { continue };
        let v = history.get(n)?;
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(match acc {
        Some(sum) => tape.scale(sum, 1.0 / enabled as f64),
        None => tape.zeros(&history.state_shape),
    })
}

/// `H^t = (h^{t-s} + h^{t-ws-s} + h^{t-ws} + h^{t-ws+s}) / 4` with zero for
/// off-grid references.
pub fn elc_aggregate_2d(tape: &mut Tape, history: &LatticeHistory, t: usize, stride: usize) -> Result<Var> {
    aggregate_2d_masked(tape, history, t, stride, NeighborMask::ALL)
}
