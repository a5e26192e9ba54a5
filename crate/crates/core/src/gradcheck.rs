//! Finite-difference verification of the tape's gradients.
//!
//! Each case builds a graph from named inputs; the checked loss is
//! `sum(output * R)` for a fixed random `R`, which exercises every output
//! element. Analytic gradients come from one backward pass; numeric ones from
//! central differences. The relative error of an entry is
//! `|a - n| / max(|a|, |n|, 1e-4)`.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{OpKind, Tape, Var};
use crate::cells::{
    gru_step, lstm_step, vanilla_rnn_step, CellParams, CellState, GruParams, Init, LstmParams,
    VanillaRnnParams, Widths,
};
use crate::elc::{elc_aggregate, elc_aggregate_cell, gru_elc_step, lstm_elc_step, rnn_elc_step, ElcSpec, HiddenHistory};
use crate::error::{Error, Result};
use crate::lattice::{sweep, Context, Direction, LatticeSpec, NeighborMask};
use crate::seg::{weighted_cross_entropy, ConvStage, HeadStage, SegModel, SegModelConfig};
use crate::tensor::{Rng, Tensor};

pub const CELL_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Cells,
    Elc,
    Model,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cells" => Ok(Scope::Cells),
            "elc" => Ok(Scope::Elc),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope `{s}` (expected cells, elc, model or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    /// Entries checked per input tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
    /// Sign-flips one op's gradient rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            max_entries: None,
            fault: None,
        }
    }
}

/// Result for one input tensor of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub case: String,
    pub input: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradRow::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradRow> {
        self.rows.iter().filter(|r| !r.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub const CSV_HEADER: &'static str = "case,input,entries,max_rel_error,max_abs_error,tolerance,status";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{}\n",
                r.case,
                r.input,
                r.entries,
                r.max_rel_error,
                r.max_abs_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.case.len() + r.input.len() + 1).max().unwrap_or(0);
        for r in &self.rows {
            let label = format!("{}/{}", r.case, r.input);
            writeln!(
                f,
                "{label:<w$}  n={:<4} rel={:.2e}  {}",
                r.entries,
                r.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A differentiable function of named inputs.
pub struct Case {
    pub name: String,
    pub inputs: Vec<(String, Tensor)>,
    pub tolerance: f64,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<(String, Tensor)>,
        tolerance: f64,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            tolerance,
            build: Box::new(build),
        }
    }

    fn eval(&self, tape: &mut Tape, inputs: &[Tensor]) -> Result<Var> {
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        (self.build)(tape, &vars)
    }
}

fn projected_loss(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    let r = tape.constant(proj.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Checks one case, producing a row per input tensor.
pub fn check_case(case: &Case, opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<GradRow>> {
    let base: Vec<Tensor> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = match opts.fault {
        Some(k) => Tape::with_fault(k),
        None => Tape::new(),
    };
    let vars: Vec<Var> = base.iter().map(|t| tape.param(t)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let proj = Tensor::uniform(rng, tape.shape(out), -1.0, 1.0)?;
    let loss = projected_loss(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;

    let numeric_loss = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let o = case.eval(&mut t, inputs)?;
        let l = projected_loss(&mut t, o, &proj)?;
        Ok(t.value(l).data()[0])
    };

    let mut rows = Vec::with_capacity(base.len());
    for (k, (name, tensor)) in case.inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut idx: Vec<usize> = (0..tensor.len()).collect();
        if let Some(m) = opts.max_entries.filter(|&m| m < idx.len()) {
            rng.shuffle(&mut idx);
            idx.truncate(m);
            idx.sort_unstable();
        }
        let mut inputs = base.clone();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &idx {
            let x0 = tensor.data()[i];
            inputs[k].data_mut()[i] = x0 + opts.step;
            let plus = numeric_loss(&inputs)?;
            inputs[k].data_mut()[i] = x0 - opts.step;
            let minus = numeric_loss(&inputs)?;
            inputs[k].data_mut()[i] = x0;
            let n = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(FLOOR);
            max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
            max_abs = max_abs.max(abs);
        }
        rows.push(GradRow {
            case: case.name.clone(),
            input: name.clone(),
            entries: idx.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            tolerance: case.tolerance,
        });
    }
    Ok(rows)
}

/// Larger than the default initialisation so that gates leave their linear
/// regime.
fn check_init() -> Init {
    Init {
        weight_stddev: 0.6,
        bias_value: 0.1,
    }
}

fn named_inputs(p: &impl CellParams, extra: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    let mut v: Vec<(String, Tensor)> = p.named().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    v.extend(extra);
    v
}

fn input(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(rng, shape, -2.0, 2.0).expect("valid range")
}

const B: usize = 2;
const IN: usize = 3;
const HID: usize = 4;
const OUT: usize = 2;

/// Single steps of the three base cells w.r.t. all parameters and inputs.
pub fn cell_cases(rng: &mut Rng) -> Vec<Case> {
    let w = Widths::new(IN, HID, OUT);
    let mut cases = Vec::new();

    let rnn = VanillaRnnParams::init(w, rng, check_init());
    let n = rnn.named().len();
    let extra = vec![("x".into(), input(rng, &[B, IN])), ("h_prev".into(), input(rng, &[B, HID]))];
    let inputs = named_inputs(&rnn, extra);
    let p = rnn.clone();
    cases.push(Case::new("rnn", inputs, CELL_TOLERANCE, move |tape, v| {
        let (h, y) = vanilla_rnn_step(&p.vars_from(&v[..n]), tape, v[n], v[n + 1])?;
        tape.concat_cols(&[h, y])
    }));

    for peephole in [true, false] {
        let lstm = LstmParams::init(w, rng, check_init());
        let lstm = if peephole { lstm } else { lstm.without_peephole() };
        let n = lstm.named().len();
        let extra = vec![
            ("x".into(), input(rng, &[B, IN])),
            ("h_prev".into(), input(rng, &[B, HID])),
            ("c_prev".into(), input(rng, &[B, HID])),
        ];
        let inputs = named_inputs(&lstm, extra);
        let name = if peephole { "lstm" } else { "lstm-nopeep" };
        cases.push(Case::new(name, inputs, CELL_TOLERANCE, move |tape, v| {
            let s = lstm_step(&lstm.vars_from(&v[..n]), tape, v[n], CellState::with_cell(v[n + 1], v[n + 2]))?;
            tape.concat_cols(&[s.h, s.c.expect("lstm keeps a cell state")])
        }));
    }

    let gru = GruParams::init(w, rng, check_init());
    let n = gru.named().len();
    let extra = vec![("x".into(), input(rng, &[B, IN])), ("h_prev".into(), input(rng, &[B, HID]))];
    let inputs = named_inputs(&gru, extra);
    cases.push(Case::new("gru", inputs, CELL_TOLERANCE, move |tape, v| {
        gru_step(&gru.vars_from(&v[..n]), tape, v[n], v[n + 1])
    }));
    cases
}

const SEQ: usize = 7;

fn sequence_inputs(rng: &mut Rng) -> Vec<(String, Tensor)> {
    (1..=SEQ).map(|t| (format!("x{t}"), input(rng, &[B, IN]))).collect()
}

/// Unrolled 1-D ELC sequences (stride 2, scale 2, so early steps include
/// zero-padded references) and 2-D lattice sweeps in every direction.
pub fn elc_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let w = Widths::new(IN, HID, OUT);
    let spec = ElcSpec::new(2, 2)?;
    let mut cases = Vec::new();

    let rnn = VanillaRnnParams::init(w, rng, check_init());
    let n = rnn.named().len();
    cases.push(Case::new(
        "rnn-elc",
        named_inputs(&rnn, sequence_inputs(rng)),
        CELL_TOLERANCE,
        move |tape, v| {
            let p = rnn.vars_from(&v[..n]);
            let mut hist = HiddenHistory::new();
            let mut outs = Vec::new();
            let mut h = tape.zeros(&[B, HID]);
            for t in 1..=SEQ {
                let x = v[n + t - 1];
                let (hn, y) = if t >= 2 {
                    rnn_elc_step(&p, tape, x, &hist, t, spec)?
                } else {
                    vanilla_rnn_step(&p, tape, x, h)?
                };
                h = hn;
                hist.push(CellState::hidden(h));
                outs.push(y);
            }
            tape.concat_cols(&outs)
        },
    ));

    let lstm = LstmParams::init(w, rng, check_init());
    let n = lstm.named().len();
    cases.push(Case::new(
        "lstm-elc",
        named_inputs(&lstm, sequence_inputs(rng)),
        CELL_TOLERANCE,
        move |tape, v| {
            let p = lstm.vars_from(&v[..n]);
            let mut hist = HiddenHistory::new();
            let mut outs = Vec::new();
            let mut state = CellState::zeros(tape, B, HID, true);
            for t in 1..=SEQ {
                let x = v[n + t - 1];
                state = if t >= 2 {
                    let ah = elc_aggregate(tape, &hist, t, spec)?;
                    let ac = elc_aggregate_cell(tape, &hist, t, spec)?;
                    lstm_elc_step(&p, tape, x, ah, ac)?
                } else {
                    lstm_step(&p, tape, x, state)?
                };
                hist.push(state);
                outs.push(state.h);
            }
            tape.concat_cols(&outs)
        },
    ));

    let gru = GruParams::init(w, rng, check_init());
    let n = gru.named().len();
    let g = gru.clone();
    cases.push(Case::new(
        "gru-elc",
        named_inputs(&gru, sequence_inputs(rng)),
        CELL_TOLERANCE,
        move |tape, v| {
            let p = g.vars_from(&v[..n]);
            let mut hist = HiddenHistory::new();
            let mut outs = Vec::new();
            let mut h = tape.zeros(&[B, HID]);
            for t in 1..=SEQ {
                let x = v[n + t - 1];
                h = if t >= 2 {
                    let agg = elc_aggregate(tape, &hist, t, spec)?;
                    gru_elc_step(&p, tape, x, agg)?
                } else {
                    gru_step(&p, tape, x, h)?
                };
                hist.push(CellState::hidden(h));
                outs.push(h);
            }
            tape.concat_cols(&outs)
        },
    ));

    let contexts = [
        ("s1", Context::elc(1)),
        ("s2", Context::elc(2)),
        (
            "s1-up",
            Context::Lattice {
                stride: 1,
                mask: NeighborMask::UP_ONLY,
            },
        ),
        ("seq", Context::Sequential),
    ];
    for (tag, context) in contexts {
        for dir in Direction::ALL {
            let gru = GruParams::init(Widths::new(IN, HID, HID), rng, check_init());
            let n = gru.named().len();
            let feats = ("features".to_string(), input(rng, &[B, 4, 4, IN]));
            let stride = match context {
                Context::Lattice { stride, .. } => stride,
                Context::Sequential => 1,
            };
            let spec = LatticeSpec::new(4, 4, dir, stride)?;
            let p = gru.clone();
            cases.push(Case::new(
                format!("sweep-{tag}-{dir}"),
                named_inputs(&gru, vec![feats]),
                CELL_TOLERANCE,
                move |tape, v| {
                    let grid = sweep(tape, v[n], &p.vars_from(&v[..n]), &spec, context)?;
                    grid.to_map(tape)
                },
            ));
        }
    }
    Ok(cases)
}

/// Full scene-labeling model on an 8x8 input, loss = cross entropy.
pub fn model_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let cfg = SegModelConfig {
        in_channels: 3,
        encoder: vec![
            ConvStage {
                out_channels: 3,
                pool: false,
            },
            ConvStage {
                out_channels: 4,
                pool: true,
            },
        ],
        hidden_width: 3,
        scales: 2,
        head: vec![HeadStage::Conv1(4), HeadStage::Upsample, HeadStage::Conv3(3), HeadStage::Logits],
        num_classes: 3,
        gru_init_stddev: 0.5,
        ..Default::default()
    };
    let mut model = SegModel::new(cfg, rng)?;
    // Zero biases over dead ReLU inputs put pre-activations exactly on the
    // kink; move every bias off it.
    for t in model.params_mut().tensors_mut().filter(|t| t.shape().len() == 1) {
        t.data_mut().iter_mut().for_each(|b| *b = rng.normal(0.0, 0.1));
    }
    let mut inputs: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let n = inputs.len();
    inputs.push(("image".into(), Tensor::uniform(rng, &[2, 8, 8, 3], 0.0, 1.0)?));
    let targets: Vec<Option<usize>> = (0..128).map(|_| (!rng.bernoulli(0.1)).then(|| rng.below(3))).collect();
    let weights = [0.7, 1.0, 1.6];
    Ok(vec![Case::new("seg-model", inputs, MODEL_TOLERANCE, move |tape, v| {
        let logits = model.forward(tape, &v[..n], v[n])?;
        weighted_cross_entropy(tape, logits, &targets, &weights)
    })])
}

pub fn cases(scope: Scope, rng: &mut Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Cells | Scope::All) {
        out.extend(cell_cases(rng));
    }
    if matches!(scope, Scope::Elc | Scope::All) {
        out.extend(elc_cases(rng)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        out.extend(model_cases(rng)?);
    }
    Ok(out)
}

/// Runs every case of `scope`; all randomness derives from `opts.seed`.
pub fn run(scope: Scope, opts: &GradcheckOptions) -> Result<GradReport> {
    let mut rng = Rng::new(opts.seed);
    let mut check_rng = rng.fork(1);
    let mut rows = Vec::new();
    for case in cases(scope, &mut rng)? {
        rows.extend(check_case(&case, opts, &mut check_rng)?);
    }
    Ok(GradReport { rows })
}
