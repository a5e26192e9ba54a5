use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cells::{gru_param_count, CellParams, GruParams, GruVars, Init, Widths};
use crate::error::{Error, Result};
use crate::lattice::{sweep, Context, Direction, LatticeSpec};
use crate::seg::params::ParamStore;
use crate::tensor::{Rng, Tensor};

/// One 3x3 convolution (+ ReLU) of the encoder, optionally followed by 2x2
/// max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub out_channels: usize,
    #[serde(default)]
    pub pool: bool,
}

/// Prediction-head stage, written as a token: `U` (2x nearest upsample),
/// `C<k>` (3x3 conv to k channels + ReLU), `P<k>` (1x1 conv + ReLU), and a
/// final `Cn` (1x1 conv to class logits).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadStage {
    Upsample,
    Conv3(usize),
    Conv1(usize),
    Logits,
}

impl fmt::Display for HeadStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadStage::Upsample => write!(f, "U"),
            HeadStage::Conv3(k) => write!(f, "C{k}"),
            HeadStage::Conv1(k) => write!(f, "P{k}"),
            HeadStage::Logits => write!(f, "Cn"),
        }
    }
}

impl FromStr for HeadStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad head stage `{s}` (expected U, C<k>, P<k> or Cn)"));
        match s {
            "U" => Ok(HeadStage::Upsample),
            "Cn" => Ok(HeadStage::Logits),
            _ if s.starts_with('C') => s[1..].parse().ok().filter(|&k| k > 0).map(HeadStage::Conv3).ok_or_else(bad),
            _ if s.starts_with('P') => s[1..].parse().ok().filter(|&k| k > 0).map(HeadStage::Conv1).ok_or_else(bad),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for HeadStage {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadStage> for String {
    fn from(h: HeadStage) -> String {
        h.to_string()
    }
}

/// How the recurrent block conditions each cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    /// `scales` branches of four GRU-ELC sweeps over degree 1..=S neighbours.
    Elc,
    /// Four conventional GRU sweeps over the row-major unfolding.
    Sequential,
    /// No recurrent block: the head reads encoder features only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub encoder: Vec<ConvStage>,
    /// Channels of every GRU unit.
    pub hidden_width: usize,
    /// Largest conditioning degree `S`.
    pub scales: usize,
    pub context: ContextKind,
    /// Concatenate encoder features next to the recurrent hidden maps.
    pub include_encoder_features: bool,
    pub head: Vec<HeadStage>,
    pub num_classes: usize,
    /// Stddev of the GRU weight initialisation.
    pub gru_init_stddev: f64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder: vec![
                ConvStage {
                    out_channels: 16,
                    pool: false,
                },
                ConvStage {
                    out_channels: 32,
                    pool: true,
                },
            ],
            hidden_width: 32,
            scales: 2,
            context: ContextKind::Elc,
            include_encoder_features: true,
            head: vec![HeadStage::Upsample, HeadStage::Conv3(16), HeadStage::Logits],
            num_classes: 2,
            gru_init_stddev: 0.1,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.num_classes < 2 {
            return err("model.in_channels must be >= 1 and model.num_classes >= 2".into());
        }
        if self.encoder.is_empty() || self.encoder.iter().any(|s| s.out_channels == 0) {
            return err("model.encoder needs at least one stage with positive channels".into());
        }
        if self.context != ContextKind::None && self.hidden_width == 0 {
            return err("model.hidden_width must be positive".into());
        }
        if self.context == ContextKind::Elc && self.scales == 0 {
            return err("model.scales must be >= 1".into());
        }
        if self.head.last() != Some(&HeadStage::Logits) {
            return err("model.head must end with Cn".into());
        }
        if self.head[..self.head.len() - 1].contains(&HeadStage::Logits) {
            return err("Cn may only appear last in model.head".into());
        }
        let ups = self.head.iter().filter(|h| **h == HeadStage::Upsample).count();
        if ups != self.pools() {
            return err(format!(
                "model.head has {ups} upsampling stages but the encoder pools {} times",
                self.pools()
            ));
        }
        if !(self.gru_init_stddev > 0.0) {
            return err("model.gru_init_stddev must be positive".into());
        }
        Ok(())
    }

    pub fn pools(&self) -> usize {
        self.encoder.iter().filter(|s| s.pool).count()
    }

    /// Input extents must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.pools()
    }

    pub fn encoder_channels(&self) -> usize {
        self.encoder.last().map_or(self.in_channels, |s| s.out_channels)
    }

    /// `(degree, direction)` of every GRU unit, in concatenation order:
    /// degree ascending, then SE, SW, NE, NW.
    pub fn units(&self) -> Vec<(usize, Direction)> {
        let degrees = match self.context {
            ContextKind::Elc => 1..=self.scales,
            ContextKind::Sequential => 1..=1,
            ContextKind::None => return Vec::new(),
        };
        degrees
            .flat_map(|s| Direction::ALL.into_iter().map(move |d| (s, d)))
            .collect()
    }

    /// Channels entering the prediction head.
    pub fn concat_channels(&self) -> usize {
        let enc = if self.include_encoder_features || self.context == ContextKind::None {
            self.encoder_channels()
        } else {
            0
        };
        enc + self.units().len() * self.hidden_width
    }

    /// Trainable scalars, counted from the configuration alone.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c = self.in_channels;
        for s in &self.encoder {
            total += 9 * c * s.out_channels + s.out_channels;
            c = s.out_channels;
        }
        total += self.units().len() * gru_param_count(self.encoder_channels(), self.hidden_width);
        let mut c = self.concat_channels();
        for h in &self.head {
            let (k, out) = match *h {
                HeadStage::Upsample => continue,
                HeadStage::Conv3(o) => (9, o),
                HeadStage::Conv1(o) => (1, o),
                HeadStage::Logits => (1, self.num_classes),
            };
            total += k * c * out + out;
            c = out;
        }
        total
    }

    /// Conventional-GRU counterpart whose hidden width brings its parameter
    /// count closest to this configuration's.
    pub fn matched_sequential(&self) -> SegModelConfig {
        let target = self.param_count() as i64;
        let candidate = |d: usize| SegModelConfig {
            context: ContextKind::Sequential,
            hidden_width: d,
            ..self.clone()
        };
        let best = (1..=8 * self.hidden_width.max(1) + 8)
            .min_by_key(|&d| (candidate(d).param_count() as i64 - target).abs())
            .expect("non-empty range");
        candidate(best)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    kernel: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
enum HeadLayer {
    Upsample,
    Conv(ConvLayer),
}

#[derive(Clone, Debug)]
struct UnitLayout {
    degree: usize,
    direction: Direction,
    first: usize,
}

/// The scene-labeling network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegModelConfig,
    params: ParamStore,
}

fn he_weight(rng: &mut Rng, fan_in: usize, out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::gaussian(rng, &[fan_in, out], 0.0, std).expect("positive stddev")
}

impl SegModel {
    /// Initialises every parameter from `rng`: He-normal convolutions with
    /// zero bias, `N(0, gru_init_stddev^2)` GRU weights with zero bias.
    pub fn new(config: SegModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut c = config.in_channels;
        for (i, s) in config.encoder.iter().enumerate() {
            params.push(format!("enc.{i}.weight"), he_weight(rng, 9 * c, s.out_channels))?;
            params.push(format!("enc.{i}.bias"), Tensor::zeros(&[s.out_channels]))?;
            c = s.out_channels;
        }
        let widths = Widths::new(config.encoder_channels(), config.hidden_width, config.hidden_width);
        let init = Init {
            weight_stddev: config.gru_init_stddev,
            bias_value: 0.0,
        };
        for (degree, dir) in config.units() {
            let gru = GruParams::init(widths, rng, init);
            let prefix = match config.context {
                ContextKind::Elc => format!("elc.s{degree}.{dir}"),
                _ => format!("gru.{dir}"),
            };
            for (name, t) in gru.named() {
                params.push(format!("{prefix}.{name}"), t.clone())?;
            }
        }
        let mut c = config.concat_channels();
        for (i, h) in config.head.iter().enumerate() {
            let (k, out) = match *h {
                HeadStage::Upsample => continue,
                HeadStage::Conv3(o) => (9, o),
                HeadStage::Conv1(o) => (1, o),
                HeadStage::Logits => (1, config.num_classes),
            };
            params.push(format!("head.{i}.weight"), he_weight(rng, k * c, out))?;
            params.push(format!("head.{i}.bias"), Tensor::zeros(&[out]))?;
            c = out;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a configuration and stored tensors, checking
    /// that every expected name is present with the right shape.
    pub fn from_parts(config: SegModelConfig, params: ParamStore) -> Result<Self> {
        let template = SegModel::new(config.clone(), &mut Rng::new(0))?;
        if template.params.len() != params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((n0, t0), (n1, t1)) in template.params.iter().zip(params.iter()) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(Error::Integrity(format!(
                    "parameter mismatch: expected {n0}{:?}, found {n1}{:?}",
                    t0.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn encoder_layers(&self) -> Vec<(ConvLayer, bool)> {
        self.config
            .encoder
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    ConvLayer {
                        weight: 2 * i,
                        bias: 2 * i + 1,
                        kernel: 3,
                        relu: true,
                    },
                    s.pool,
                )
            })
            .collect()
    }

    fn unit_layouts(&self) -> Vec<UnitLayout> {
        let first = 2 * self.config.encoder.len();
        self.config
            .units()
            .into_iter()
            .enumerate()
            .map(|(i, (degree, direction))| UnitLayout {
                degree,
                direction,
                first: first + 9 * i,
            })
            .collect()
    }

    fn head_layers(&self) -> Vec<HeadLayer> {
        let mut next = 2 * self.config.encoder.len() + 9 * self.config.units().len();
        self.config
            .head
            .iter()
            .map(|h| {
                let (kernel, relu) = match h {
                    HeadStage::Upsample => return HeadLayer::Upsample,
                    HeadStage::Conv3(_) => (3, true),
                    HeadStage::Conv1(_) => (1, true),
                    HeadStage::Logits => (1, false),
                };
                let layer = ConvLayer {
                    weight: next,
                    bias: next + 1,
                    kernel,
                    relu,
                };
                next += 2;
                HeadLayer::Conv(layer)
            })
            .collect()
    }

    fn conv(&self, tape: &mut Tape, vars: &[Var], x: Var, l: ConvLayer) -> Result<Var> {
        let y = tape.conv2d(x, vars[l.weight], vars[l.bias], l.kernel)?;
        Ok(if l.relu { tape.relu(y) } else { y })
    }

    /// Per-pixel logits `[B, H, W, n]` for an NHWC batch, with parameters
    /// bound as `vars` (from [`ParamStore::bind`]).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let f = self.config.downsample_factor();
        match shape[..] {
            [_, h, w, c] if c == self.config.in_channels && h % f == 0 && w % f == 0 => {}
            _ => {
                return Err(Error::dim(
                    "seg forward",
                    &shape,
                    &[0, f, f, self.config.in_channels],
                ))
            }
        }
        let mut x = images;
        for (layer, pool) in self.encoder_layers() {
            x = self.conv(tape, vars, x, layer)?;
            if pool {
                x = tape.maxpool2(x)?;
            }
        }
        let feats = x;
        let [_, fh, fw, _] = tape.shape(feats)[..] else { unreachable!() };

        let mut branches = Vec::new();
        if self.config.include_encoder_features || self.config.context == ContextKind::None {
            branches.push(feats);
        }
        let widths = Widths::new(self.config.encoder_channels(), self.config.hidden_width, self.config.hidden_width);
        for unit in self.unit_layouts() {
            let gru = GruVars::with_default_activations(&vars[unit.first..unit.first + 9], widths);
            let spec = LatticeSpec::new(fh, fw, unit.direction, unit.degree)?;
            let context = match self.config.context {
                ContextKind::Elc => Context::elc(unit.degree),
                _ => Context::Sequential,
            };
            let grid = sweep(tape, feats, &gru, &spec, context)?;
            branches.push(grid.to_map(tape)?);
        }
        let mut x = if branches.len() == 1 {
            branches[0]
        } else {
            tape.concat_cols(&branches)?
        };
        for layer in self.head_layers() {
            x = match layer {
                HeadLayer::Upsample => tape.upsample2(x)?,
                HeadLayer::Conv(l) => self.conv(tape, vars, x, l)?,
            };
        }
        Ok(x)
    }

    /// Forward pass on a fresh tape, returning the logits tensor.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scales: usize) -> SegModelConfig {
        SegModelConfig {
            in_channels: 3,
            encoder: vec![ConvStage {
                out_channels: 4,
                pool: true,
            }],
            hidden_width: 8,
            scales,
            head: vec![HeadStage::Upsample, HeadStage::Conv3(4), HeadStage::Logits],
            num_classes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shape() {
        let model = SegModel::new(tiny(1), &mut Rng::new(0)).unwrap();
        let img = Tensor::uniform(&mut Rng::new(1), &[1, 16, 16, 3], 0.0, 1.0).unwrap();
        let out = model.predict(&img).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16, 2]);
        assert!(out.is_finite());
    }

    #[test]
    fn branch_additivity() {
        let one = SegModel::new(tiny(1), &mut Rng::new(0)).unwrap();
        let two = SegModel::new(tiny(2), &mut Rng::new(0)).unwrap();
        let gru = gru_param_count(4, 8);
        // the head's first conv also widens by 4 GRU maps of 8 channels
        let head_growth = 9 * 4 * 8 * 4;
        assert_eq!(two.param_count(), one.param_count() + 4 * gru + head_growth);
    }

    #[test]
    fn counting_oracle_matches_store() {
        for cfg in [tiny(1), tiny(3), SegModelConfig::default(), tiny(2).matched_sequential()] {
            let m = SegModel::new(cfg.clone(), &mut Rng::new(0)).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
        assert_eq!(tiny(2).concat_channels(), 4 + 4 * 2 * 8);
    }

    #[test]
    fn rejects_bad_extents_and_configs() {
        let model = SegModel::new(tiny(1), &mut Rng::new(0)).unwrap();
        assert!(model.predict(&Tensor::zeros(&[1, 15, 16, 3])).is_err());
        assert!(model.predict(&Tensor::zeros(&[1, 16, 16, 2])).is_err());
        let mut bad = tiny(1);
        bad.head = vec![HeadStage::Conv3(4), HeadStage::Logits];
        assert!(SegModel::new(bad, &mut Rng::new(0)).is_err());
        let mut bad = tiny(1);
        bad.scales = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn head_tokens_parse() {
        for tok in ["U", "C16", "P8", "Cn"] {
            assert_eq!(tok.parse::<HeadStage>().unwrap().to_string(), tok);
        }
        assert!("C0".parse::<HeadStage>().is_err());
        assert!("X3".parse::<HeadStage>().is_err());
    }

    #[test]
    fn zero_image_gives_constant_logits() {
        let model = SegModel::new(tiny(2), &mut Rng::new(4)).unwrap();
        let out = model.predict(&Tensor::zeros(&[1, 8, 8, 3])).unwrap();
        let first = out.row(0).to_vec();
        for i in 0..out.rows() {
            assert_eq!(out.row(i), first.as_slice());
        }
    }

    #[test]
    fn matched_sequential_is_close() {
        let elc = tiny(2);
        let plain = elc.matched_sequential();
        assert_eq!(plain.context, ContextKind::Sequential);
        let diff = (plain.param_count() as f64 - elc.param_count() as f64).abs();
        assert!(diff / (elc.param_count() as f64) < 0.05);
    }
}
