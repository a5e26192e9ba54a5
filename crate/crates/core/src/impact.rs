//! The impact-vanishing experiment: run a cell over a random sequence, redraw
//! only the first input, rerun, and record the per-step mean squared output
//! difference
//!
//! ```text
//! F^t = 1/(M N) * sum_ij (y^t_ij - yhat^t_ij)^2
//! ```
//!
//! averaged over independent trials.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::cells::{
    gru_step, init_params, lstm_step, vanilla_rnn_step, AnyCellParams, CellFamily, CellState, Init, Widths,
};
use crate::elc::{elc_aggregate, elc_aggregate_cell, gru_elc_step, lstm_elc_step, rnn_elc_step, ElcSpec, HiddenHistory};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpactFamily {
    Rnn,
    Lstm,
    Gru,
    RnnElc,
    LstmElc,
    #[serde(rename = "gru-elc-1d")]
    GruElc,
}

impl ImpactFamily {
    pub const ALL: [ImpactFamily; 6] = [
        ImpactFamily::Rnn,
        ImpactFamily::Lstm,
        ImpactFamily::Gru,
        ImpactFamily::RnnElc,
        ImpactFamily::LstmElc,
        ImpactFamily::GruElc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImpactFamily::Rnn => "rnn",
            ImpactFamily::Lstm => "lstm",
            ImpactFamily::Gru => "gru",
            ImpactFamily::RnnElc => "rnn-elc",
            ImpactFamily::LstmElc => "lstm-elc",
            ImpactFamily::GruElc => "gru-elc-1d",
        }
    }

    pub fn base(self) -> CellFamily {
        match self {
            ImpactFamily::Rnn | ImpactFamily::RnnElc => CellFamily::Rnn,
            ImpactFamily::Lstm | ImpactFamily::LstmElc => CellFamily::Lstm,
            ImpactFamily::Gru | ImpactFamily::GruElc => CellFamily::Gru,
        }
    }

    pub fn is_elc(self) -> bool {
        matches!(self, ImpactFamily::RnnElc | ImpactFamily::LstmElc | ImpactFamily::GruElc)
    }

    /// ELC variant of a plain family (identity on ELC families).
    pub fn with_elc(self) -> Self {
        match self.base() {
            CellFamily::Rnn => ImpactFamily::RnnElc,
            CellFamily::Lstm => ImpactFamily::LstmElc,
            CellFamily::Gru => ImpactFamily::GruElc,
        }
    }

    fn output_unit(self) -> &'static str {
        match self.base() {
            CellFamily::Rnn => "y (identity output activation)",
            _ => "h (hidden state)",
        }
    }
}

impl fmt::Display for ImpactFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImpactFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = if s == "gru-elc" { "gru-elc-1d".to_string() } else { s };
        ImpactFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cell family `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpactConfig {
    pub family: ImpactFamily,
    /// Sequence length `T`.
    pub steps: usize,
    /// Rows `M` of each input `x^t` (batch axis of the cell).
    pub rows: usize,
    /// Columns `N` of each input; also the hidden and output width.
    pub cols: usize,
    /// Conditioning skip stride `s` (ELC families).
    pub stride: usize,
    /// Conditioning scale `k` (ELC families).
    pub scale: usize,
    pub trials: usize,
    pub seed: u64,
    pub weight_stddev: f64,
    pub bias_value: f64,
    /// Keep every trial's curve in the output, not only the mean.
    pub keep_trials: bool,
}

impl Default for ImpactConfig {
    fn default() -> Self {
        Self {
            family: ImpactFamily::Gru,
            steps: 100,
            rows: 16,
            cols: 16,
            stride: 20,
            scale: 1,
            trials: 20,
            seed: 0,
            weight_stddev: 0.1,
            bias_value: 0.0,
            keep_trials: false,
        }
    }
}

impl ImpactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("impact.steps must be >= 2, got {}", self.steps)));
        }
        if self.trials == 0 {
            return Err(Error::Config("impact.trials must be >= 1".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("impact.rows and impact.cols must be positive".into()));
        }
        if !(self.weight_stddev > 0.0) {
            return Err(Error::Config("impact.weight_stddev must be positive".into()));
        }
        self.elc_spec()?;
        Ok(())
    }

    pub fn elc_spec(&self) -> Result<ElcSpec> {
        ElcSpec::new(self.stride, self.scale).map_err(|_| {
            Error::Config(format!(
                "impact.stride and impact.scale must be >= 1 (got {}, {})",
                self.stride, self.scale
            ))
        })
    }

    fn init(&self) -> Init {
        Init {
            weight_stddev: self.weight_stddev,
            bias_value: self.bias_value,
        }
    }
}

/// Mean squared elementwise difference of two equally shaped outputs.
pub fn fluctuation(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim("fluctuation", y.shape(), y_hat.shape()));
    }
    let sum: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / y.len() as f64)
}

/// Runs the configured cell over `inputs` (`x^1..x^T`, each `[M, N]`) from a
/// zero state, returning the per-step output.
pub fn run_sequence(cfg: &ImpactConfig, params: &AnyCellParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let elc = cfg.elc_spec()?;
    let (m, n) = (cfg.rows, cfg.cols);
    let mut tape = Tape::new();
    let mut history = HiddenHistory::new();
    let mut outputs = Vec::with_capacity(inputs.len());
    let family = cfg.family;

    match params {
        AnyCellParams::Rnn(p) => {
            let v = p.bind(&mut tape);
            let mut h = tape.zeros(&[m, n]);
            for (i, xt) in inputs.iter().enumerate() {
                let t = i + 1;
                let x = tape.constant(xt.clone());
                let (h_new, y) = if family.is_elc() && t >= 2 {
                    rnn_elc_step(&v, &mut tape, x, &history, t, elc)?
                } else {
                    vanilla_rnn_step(&v, &mut tape, x, h)?
                };
                h = h_new;
                history.push(CellState::hidden(h));
                outputs.push(tape.value(y).clone());
            }
        }
        AnyCellParams::Lstm(p) => {
            let v = p.bind(&mut tape);
            let mut state = CellState::zeros(&mut tape, m, n, true);
            for (i, xt) in inputs.iter().enumerate() {
                let t = i + 1;
                let x = tape.constant(xt.clone());
                state = if family.is_elc() && t >= 2 {
                    let ah = elc_aggregate(&mut tape, &history, t, elc)?;
                    let ac = elc_aggregate_cell(&mut tape, &history, t, elc)?;
                    lstm_elc_step(&v, &mut tape, x, ah, ac)?
                } else {
                    lstm_step(&v, &mut tape, x, state)?
                };
                history.push(state);
                outputs.push(tape.value(state.h).clone());
            }
        }
        AnyCellParams::Gru(p) => {
            let v = p.bind(&mut tape);
            let mut h = tape.zeros(&[m, n]);
            for (i, xt) in inputs.iter().enumerate() {
                let t = i + 1;
                let x = tape.constant(xt.clone());
                h = if family.is_elc() && t >= 2 {
                    let agg = elc_aggregate(&mut tape, &history, t, elc)?;
                    gru_elc_step(&v, &mut tape, x, agg)?
                } else {
                    gru_step(&v, &mut tape, x, h)?
                };
                history.push(CellState::hidden(h));
                outputs.push(tape.value(h).clone());
            }
        }
    }
    Ok(outputs)
}

/// Replacement for the first input in the perturbed run.
#[derive(Clone, Debug)]
pub enum FirstInput {
    /// Fresh draw from `U(0, 1)` on the trial's dedicated sub-stream.
    Redraw,
    Given(Tensor),
}

/// One trial with a chosen replacement for `x^1`. Parameters, `x^1..x^T`
/// and the replacement each come from their own sub-stream of
/// `trial_seed`, so both runs share everything except the first input.
pub fn run_impact_trial_with(cfg: &ImpactConfig, trial_seed: u64, first: FirstInput) -> Result<Vec<f64>> {
    cfg.validate()?;
    let root = Rng::new(trial_seed);
    let widths = Widths::new(cfg.cols, cfg.cols, cfg.cols);
    let params = init_params(cfg.family.base(), widths, &mut root.fork(0), cfg.init());

    let mut data_rng = root.fork(1);
    let inputs: Vec<Tensor> = (0..cfg.steps)
        .map(|_| Tensor::uniform(&mut data_rng, &[cfg.rows, cfg.cols], 0.0, 1.0))
        .collect::<Result<_>>()?;
    let x1_hat = match first {
        FirstInput::Redraw => Tensor::uniform(&mut root.fork(2), &[cfg.rows, cfg.cols], 0.0, 1.0)?,
        FirstInput::Given(t) => {
            if t.shape() != [cfg.rows, cfg.cols] {
                return Err(Error::dim("impact first input", t.shape(), &[cfg.rows, cfg.cols]));
            }
            t
        }
    };
    let mut perturbed = inputs.clone();
    perturbed[0] = x1_hat;

    let y = run_sequence(cfg, &params, &inputs)?;
    let y_hat = run_sequence(cfg, &params, &perturbed)?;
    y.iter().zip(&y_hat).map(|(a, b)| fluctuation(a, b)).collect()
}

/// `F^1..F^T` for a single trial.
pub fn run_impact_trial(cfg: &ImpactConfig, trial_seed: u64) -> Result<Vec<f64>> {
    run_impact_trial_with(cfg, trial_seed, FirstInput::Redraw)
}

/// Seed of trial `i` under experiment seed `seed`.
pub fn trial_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, i as u64)
}

/// Trial-mean fluctuation curve.
#[derive(Clone, Debug, PartialEq)]
pub struct FluctuationCurve {
    pub config: ImpactConfig,
    /// Mean `F^t` for `t = 1..T` (index 0 is `t = 1`).
    pub mean: Vec<f64>,
    /// Per-trial curves, when the config asks to keep them.
    pub trials: Vec<Vec<f64>>,
}

impl FluctuationCurve {
    /// `F^t / F^1`; all zeros when `F^1` is zero.
    pub fn normalized(&self) -> Vec<f64> {
        let f1 = self.mean[0];
        if f1 == 0.0 {
            return vec![0.0; self.mean.len()];
        }
        self.mean.iter().map(|f| f / f1).collect()
    }

    /// Mean `F` at 1-based step `t`.
    pub fn at(&self, t: usize) -> f64 {
        self.mean[t - 1]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "t,mean_F,normalized_F")?;
        for i in 0..self.trials.len() {
            write!(out, ",trial_{i}")?;
        }
        writeln!(out)?;
        for (i, (m, n)) in self.mean.iter().zip(self.normalized()).enumerate() {
            write!(out, "{},{},{}", i + 1, m, n)?;
            for trial in &self.trials {
                write!(out, ",{}", trial[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// `key=value` lines echoing the configuration and modelling choices.
    pub fn metadata(&self) -> String {
        let c = &self.config;
        let lines = [
            ("family", c.family.to_string()),
            ("steps", c.steps.to_string()),
            ("rows", c.rows.to_string()),
            ("cols", c.cols.to_string()),
            ("hidden_width", c.cols.to_string()),
            ("stride", c.stride.to_string()),
            ("scale", c.scale.to_string()),
            ("trials", c.trials.to_string()),
            ("seed", c.seed.to_string()),
            ("weight_stddev", c.weight_stddev.to_string()),
            ("bias_value", c.bias_value.to_string()),
            ("input_distribution", "uniform[0,1)".into()),
            ("output_unit", c.family.output_unit().into()),
            ("rnn_output_activation", "identity".into()),
            ("lstm_peephole", "true".into()),
            ("elc_boundary", "zero state, fixed 1/(k+1) normaliser".into()),
            ("trial_seeding", "splitmix64(seed, trial index)".into()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Runs every trial and averages in ascending trial order.
pub fn run_impact_experiment(cfg: &ImpactConfig) -> Result<FluctuationCurve> {
    cfg.validate()?;
    let mut sum = vec![0.0; cfg.steps];
    let mut trials = Vec::new();
    for i in 0..cfg.trials {
        let curve = run_impact_trial(cfg, trial_seed(cfg.seed, i))?;
        sum.iter_mut().zip(&curve).for_each(|(s, f)| *s += f);
        if cfg.keep_trials {
            trials.push(curve);
        }
    }
    let mean = sum.into_iter().map(|s| s / cfg.trials as f64).collect();
    Ok(FluctuationCurve {
        config: cfg.clone(),
        mean,
        trials,
    })
}
