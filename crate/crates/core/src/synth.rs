//! Synthetic labeling tasks whose labels depend on distant pixels.
//!
//! Images have three channels quantized to multiples of 1/255, so a dataset
//! survives a PPM/PGM round trip bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seg::{LabeledGrid, IGNORE_LABEL};
use crate::tensor::{derive_seed, Rng, Tensor};

pub const CHANNELS: usize = 3;

/// Background / plain interior colour.
const BACKGROUND: [f64; 3] = [0.25, 0.25, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BeaconParity,
    RegionFill,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beacon-parity" => Ok(TaskKind::BeaconParity),
            "region-fill" => Ok(TaskKind::RegionFill),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected beacon-parity or region-fill)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    pub height: usize,
    pub width: usize,
    /// Dependency distance `D` in pixels.
    pub distance: usize,
    pub num_classes: usize,
    /// Stddev of additive Gaussian noise before quantization.
    pub noise: f64,
    pub seed: u64,
    pub samples: usize,
    /// Beacons per beacon-parity image.
    pub beacons: usize,
    /// Rectangles per region-fill image.
    pub regions: usize,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::BeaconParity,
            height: 32,
            width: 32,
            distance: 8,
            num_classes: 2,
            noise: 0.0,
            seed: 0,
            samples: 100,
            beacons: 8,
            regions: 4,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return err("synth extents must be positive".into());
        }
        if self.distance >= self.height.min(self.width) {
            return err(format!(
                "synth.distance {} must be below min(height, width) = {}",
                self.distance,
                self.height.min(self.width)
            ));
        }
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return err("synth.num_classes must lie in 2..=254".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("synth.noise must be a finite non-negative number".into());
        }
        if self.kind == TaskKind::BeaconParity && self.beacons > self.height * self.width {
            return err("more beacons than pixels".into());
        }
        if self.kind == TaskKind::RegionFill && self.height.min(self.width) < 3 {
            return err("region-fill needs extents of at least 3".into());
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<LabeledGrid>> {
        match self.kind {
            TaskKind::BeaconParity => gen_beacon_parity(self),
            TaskKind::RegionFill => gen_region_fill(self),
        }
    }

    fn sample_rng(&self, i: usize) -> Rng {
        Rng::new(derive_seed(self.seed, i as u64))
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Marker colour: full first channel, class encoded in the second.
fn marker(class: usize, num_classes: usize) -> [f64; 3] {
    [1.0, class as f64 / (num_classes - 1) as f64, 0.0]
}

fn finish_image(pixels: Vec<[f64; 3]>, h: usize, w: usize, noise: f64, rng: &mut Rng) -> Tensor {
    let data = pixels
        .into_iter()
        .flatten()
        .map(|v| quantize(if noise > 0.0 { v + rng.normal(0.0, noise) } else { v }))
        .collect();
    Tensor::new(&[h, w, CHANNELS], data).expect("extents match")
}

/// A beacon at `(row, col)` of class `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Beacon {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

/// Label of every pixel: the class of the nearest beacon on the same row or
/// column within `distance`. Pixels with no such beacon, or whose nearest
/// beacons disagree, are [`IGNORE_LABEL`].
pub fn beacon_labels(h: usize, w: usize, distance: usize, beacons: &[Beacon]) -> Vec<u8> {
    let mut best: Vec<(usize, Option<usize>, bool)> = vec![(usize::MAX, None, false); h * w];
    let mut offer = |r: usize, c: usize, d: usize, class: usize| {
        let slot = &mut best[r * w + c];
        if d < slot.0 {
            *slot = (d, Some(class), false);
        } else if d == slot.0 && slot.1 != Some(class) {
            slot.2 = true;
        }
    };
    for b in beacons {
        for c in b.col.saturating_sub(distance)..=(b.col + distance).min(w - 1) {
            offer(b.row, c, b.col.abs_diff(c), b.class);
        }
        for r in b.row.saturating_sub(distance)..=(b.row + distance).min(h - 1) {
            offer(r, b.col, b.row.abs_diff(r), b.class);
        }
    }
    best.into_iter()
        .map(|(_, class, conflict)| match class {
            Some(c) if !conflict => c as u8,
            _ => IGNORE_LABEL,
        })
        .collect()
}

/// Renders beacons on the plain background.
pub fn render_beacons(spec: &SynthTaskSpec, beacons: &[Beacon], rng: &mut Rng) -> Result<LabeledGrid> {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![BACKGROUND; h * w];
    for b in beacons {
        if b.row >= h || b.col >= w || b.class >= spec.num_classes {
            return Err(Error::contract(format!("beacon {b:?} outside the task")));
        }
        pixels[b.row * w + b.col] = marker(b.class, spec.num_classes);
    }
    let labels = beacon_labels(h, w, spec.distance, beacons);
    LabeledGrid::new(finish_image(pixels, h, w, spec.noise, rng), labels, spec.num_classes)
}

/// Beacon-parity: `spec.beacons` distinct beacon pixels of random class per
/// image; each pixel is labeled by its nearest beacon along its row or column
/// within `D` (see [`beacon_labels`]).
pub fn gen_beacon_parity(spec: &SynthTaskSpec) -> Result<Vec<LabeledGrid>> {
    spec.validate()?;
    (0..spec.samples)
        .map(|i| {
            let mut rng = spec.sample_rng(i);
            let mut cells: Vec<usize> = (0..spec.height * spec.width).collect();
            rng.shuffle(&mut cells);
            let beacons: Vec<Beacon> = cells[..spec.beacons]
                .iter()
                .map(|&p| Beacon {
                    row: p / spec.width,
                    col: p % spec.width,
                    class: rng.below(spec.num_classes),
                })
                .collect();
            render_beacons(spec, &beacons, &mut rng)
        })
        .collect()
}

/// Recovers beacon-parity labels from a noise-free image by scanning each
/// pixel's row and column outward.
pub fn beacon_oracle(image: &Tensor, distance: usize, num_classes: usize) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let beacon_at = |r: usize, c: usize| -> Option<usize> {
        let px = &image.data()[(r * w + c) * CHANNELS..][..CHANNELS];
        (px[0] > 0.5).then(|| (px[1] * (num_classes - 1) as f64).round() as usize)
    };
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut label = IGNORE_LABEL;
            for d in 0..=distance {
                let mut found: Vec<usize> = Vec::new();
                let probes = [
                    (r.checked_sub(d), Some(c)),
                    (Some(r + d).filter(|&x| x < h), Some(c)),
                    (Some(r), c.checked_sub(d)),
                    (Some(r), Some(c + d).filter(|&x| x < w)),
                ];
                for (pr, pc) in probes {
                    if let (Some(pr), Some(pc)) = (pr, pc) {
                        found.extend(beacon_at(pr, pc));
                    }
                }
                if let Some(&first) = found.first() {
                    if found.iter().all(|&k| k == first) {
                        label = first as u8;
                    }
                    break;
                }
            }
            labels.push(label);
        }
    }
    labels
}

/// Axis-aligned rectangle with inclusive corners; its one-pixel border is
/// drawn in the class marker colour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub class: usize,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..=self.bottom).contains(&r) && (self.left..=self.right).contains(&c)
    }

    fn on_border(&self, r: usize, c: usize) -> bool {
        self.contains(r, c) && (r == self.top || r == self.bottom || c == self.left || c == self.right)
    }
}

/// Draws `rects` in order over a class-0 background; later rectangles cover
/// earlier ones. Interiors look like background and take the class shown on
/// their border.
pub fn render_regions(spec: &SynthTaskSpec, rects: &[Rect], rng: &mut Rng) -> Result<LabeledGrid> {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![BACKGROUND; h * w];
    let mut labels = vec![0u8; h * w];
    for rect in rects {
        if rect.bottom >= h || rect.right >= w || rect.top > rect.bottom || rect.left > rect.right {
            return Err(Error::contract(format!("rectangle {rect:?} outside the grid")));
        }
        if rect.class >= spec.num_classes {
            return Err(Error::contract(format!("rectangle class {} out of range", rect.class)));
        }
        for r in rect.top..=rect.bottom {
            for c in rect.left..=rect.right {
                pixels[r * w + c] = if rect.on_border(r, c) {
                    marker(rect.class, spec.num_classes)
                } else {
                    BACKGROUND
                };
                labels[r * w + c] = rect.class as u8;
            }
        }
    }
    LabeledGrid::new(finish_image(pixels, h, w, spec.noise, rng), labels, spec.num_classes)
}

/// Recovers region-fill labels from a noise-free image: marker pixels carry
/// their class; every 4-connected component of plain pixels is class 0 if it
/// reaches the image edge, otherwise the class of its bordering markers.
/// Returns `None` where the bordering markers disagree.
pub fn region_oracle(image: &Tensor, num_classes: usize) -> Vec<Option<u8>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let marker_class = |i: usize| -> Option<u8> {
        let px = &image.data()[i * CHANNELS..][..CHANNELS];
        (px[0] > 0.5).then(|| (px[1] * (num_classes - 1) as f64).round() as u8)
    };
    let mut out: Vec<Option<u8>> = (0..h * w).map(marker_class).collect();
    let mut seen: Vec<bool> = out.iter().map(Option::is_some).collect();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut component = Vec::new();
        let mut touches_edge = false;
        let mut classes: Vec<u8> = Vec::new();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (r, c) = (i / w, i % w);
            touches_edge |= r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let mut neighbors = Vec::with_capacity(4);
            if r > 0 {
                neighbors.push(i - w);
            }
            if r + 1 < h {
                neighbors.push(i + w);
            }
            if c > 0 {
                neighbors.push(i - 1);
            }
            if c + 1 < w {
                neighbors.push(i + 1);
            }
            for n in neighbors {
                if let Some(k) = marker_class(n) {
                    if !classes.contains(&k) {
                        classes.push(k);
                    }
                } else if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        let label = if touches_edge {
            Some(0)
        } else if classes.len() == 1 {
            Some(classes[0])
        } else {
            None
        };
        for i in component {
            out[i] = label;
        }
    }
    out
}

fn random_rects(spec: &SynthTaskSpec, rng: &mut Rng) -> Vec<Rect> {
    let (h, w) = (spec.height, spec.width);
    let max_extent = |limit: usize| (2 * spec.distance + 1).clamp(3, limit);
    (0..spec.regions)
        .map(|_| {
            let rh = 3 + rng.below(max_extent(h) - 2);
            let rw = 3 + rng.below(max_extent(w) - 2);
            let top = rng.below(h - rh + 1);
            let left = rng.below(w - rw + 1);
            Rect {
                top,
                left,
                bottom: top + rh - 1,
                right: left + rw - 1,
                class: 1 + rng.below(spec.num_classes - 1),
            }
        })
        .collect()
}

/// Region-fill: `spec.regions` random rectangles of extent up to `2D + 1`.
/// Layouts whose labels the border markers do not determine (a plain area
/// fenced in by several rectangles) are redrawn, so every label is
/// recoverable from context.
pub fn gen_region_fill(spec: &SynthTaskSpec) -> Result<Vec<LabeledGrid>> {
    spec.validate()?;
    let clean = SynthTaskSpec {
        noise: 0.0,
        ..spec.clone()
    };
    (0..spec.samples)
        .map(|i| {
            let mut rng = spec.sample_rng(i);
            loop {
                let rects = random_rects(spec, &mut rng);
                let probe = render_regions(&clean, &rects, &mut rng)?;
                let recovered = region_oracle(&probe.image, spec.num_classes);
                let determined = recovered
                    .iter()
                    .zip(&probe.labels)
                    .all(|(o, &l)| *o == Some(l));
                if determined {
                    return render_regions(spec, &rects, &mut rng);
                }
            }
        })
        .collect()
}

/// Accuracy of the best classifier that sees one pixel value at a time,
/// fitted by majority vote per distinct value over `data`.
pub fn pointwise_ceiling(data: &[LabeledGrid]) -> f64 {
    use std::collections::HashMap;
    let mut table: HashMap<Vec<u64>, HashMap<usize, u64>> = HashMap::new();
    let mut total = 0u64;
    for g in data {
        let c = g.channels();
        for (i, t) in g.targets().enumerate() {
            let Some(t) = t else { continue };
            let key = g.image.data()[i * c..(i + 1) * c].iter().map(|v| v.to_bits()).collect();
            *table.entry(key).or_default().entry(t).or_default() += 1;
            total += 1;
        }
    }
    let correct: u64 = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> SynthTaskSpec {
        SynthTaskSpec {
            kind,
            height: 16,
            width: 16,
            distance: 4,
            samples: 12,
            ..Default::default()
        }
    }

    #[test]
    fn beacon_oracle_round_trip() {
        for s in [spec(TaskKind::BeaconParity), SynthTaskSpec { samples: 10, ..Default::default() }] {
            for g in gen_beacon_parity(&s).unwrap() {
                assert_eq!(beacon_oracle(&g.image, s.distance, s.num_classes), g.labels);
            }
        }
    }

    #[test]
    fn beacon_labels_hand_case() {
        let b = [
            Beacon { row: 0, col: 0, class: 1 },
            Beacon { row: 0, col: 4, class: 0 },
        ];
        let l = beacon_labels(2, 5, 2, &b);
        assert_eq!(&l[..5], &[1, 1, 255, 0, 0]);
        assert_eq!(&l[5..], &[1, 255, 255, 255, 0]);
    }

    #[test]
    fn zero_distance_is_pointwise() {
        let s = SynthTaskSpec {
            distance: 0,
            noise: 0.0,
            ..spec(TaskKind::BeaconParity)
        };
        let data = gen_beacon_parity(&s).unwrap();
        assert_eq!(pointwise_ceiling(&data), 1.0);
    }

    #[test]
    fn pointwise_ceiling_bounded() {
        let data = gen_beacon_parity(&spec(TaskKind::BeaconParity)).unwrap();
        let mut counts = [0u64; 2];
        let (mut labeled, mut beacons) = (0u64, 0u64);
        for g in &data {
            for (i, t) in g.targets().enumerate() {
                if let Some(t) = t {
                    counts[t] += 1;
                    labeled += 1;
                    beacons += u64::from(g.image.data()[i * 3] > 0.5);
                }
            }
        }
        let chance = *counts.iter().max().unwrap() as f64 / labeled as f64;
        let ceiling = pointwise_ceiling(&data);
        assert!(ceiling <= chance + beacons as f64 / labeled as f64 + 1e-12);
        assert!(ceiling < 0.9, "{ceiling}");
    }

    #[test]
    fn deterministic() {
        for kind in [TaskKind::BeaconParity, TaskKind::RegionFill] {
            let s = SynthTaskSpec { noise: 0.1, ..spec(kind) };
            assert_eq!(s.generate().unwrap(), s.generate().unwrap());
        }
        let a = spec(TaskKind::BeaconParity);
        let b = SynthTaskSpec { seed: 1, ..a.clone() };
        assert_ne!(a.generate().unwrap(), b.generate().unwrap());
    }

    #[test]
    fn region_oracle_round_trip() {
        let s = SynthTaskSpec {
            num_classes: 4,
            ..spec(TaskKind::RegionFill)
        };
        for g in gen_region_fill(&s).unwrap() {
            let o: Vec<u8> = region_oracle(&g.image, 4).into_iter().map(Option::unwrap).collect();
            assert_eq!(o, g.labels);
        }
    }

    #[test]
    fn full_grid_rectangle_is_uniform() {
        let s = SynthTaskSpec {
            num_classes: 3,
            ..spec(TaskKind::RegionFill)
        };
        let r = Rect { top: 0, left: 0, bottom: 15, right: 15, class: 2 };
        let g = render_regions(&s, &[r], &mut Rng::new(0)).unwrap();
        assert!(g.labels.iter().all(|&l| l == 2));
    }

    #[test]
    fn disjoint_rectangles_independent() {
        let s = SynthTaskSpec {
            num_classes: 3,
            ..spec(TaskKind::RegionFill)
        };
        let a = Rect { top: 0, left: 0, bottom: 4, right: 4, class: 1 };
        let b = Rect { top: 8, left: 8, bottom: 13, right: 12, class: 2 };
        let b2 = Rect { class: 1, ..b };
        let g1 = render_regions(&s, &[a, b], &mut Rng::new(0)).unwrap();
        let g2 = render_regions(&s, &[a, b2], &mut Rng::new(0)).unwrap();
        for r in 0..=4 {
            for c in 0..=4 {
                assert_eq!(g1.label(r, c), g2.label(r, c));
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SynthTaskSpec { distance: 32, ..Default::default() }.validate().is_err());
        assert!(SynthTaskSpec { num_classes: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn values_are_quantized() {
        let s = SynthTaskSpec { noise: 0.2, ..spec(TaskKind::BeaconParity) };
        for g in s.generate().unwrap() {
            for &v in g.image.data() {
                assert_eq!(quantize(v), v);
            }
        }
    }
}
