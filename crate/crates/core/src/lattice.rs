//! Unfolding a 2D grid into a sequence in four directions, degree-`s`
//! neighbour algebra, and directional GRU sweeps over NHWC feature maps.
//!
//! Every direction is handled as a reflection of the row-major (SE) order:
//! the sweep works in the direction's own frame, where the sequence is
//! row-major, and maps frame coordinates back to the image with
//! [`Direction::to_image`].

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::cells::{gru_input_proj, gru_step_projected, GruInputProj, GruVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Left to right, top to bottom.
    Se,
    /// Right to left, top to bottom.
    Sw,
    /// Left to right, bottom to top.
    Ne,
    /// Right to left, bottom to top.
    Nw,
}

impl Direction {
    /// Concatenation order used by the model.
    pub const ALL: [Direction; 4] = [Direction::Se, Direction::Sw, Direction::Ne, Direction::Nw];

    fn flips(self) -> (bool, bool) {
        match self {
            Direction::Se => (false, false),
            Direction::Sw => (false, true),
            Direction::Ne => (true, false),
            Direction::Nw => (true, true),
        }
    }

    /// Maps frame coordinates to image coordinates. Reflections are
    /// involutions, so this is also the inverse map.
    pub fn to_image(self, height: usize, width: usize, row: usize, col: usize) -> (usize, usize) {
        let (flip_rows, flip_cols) = self.flips();
        let r = if flip_rows { height - 1 - row } else { row };
        let c = if flip_cols { width - 1 - col } else { col };
        (r, c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Se => "SE",
            Direction::Sw => "SW",
            Direction::Ne => "NE",
            Direction::Nw => "NW",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown direction `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeSpec {
    pub height: usize,
    pub width: usize,
    pub direction: Direction,
    pub stride: usize,
}

impl LatticeSpec {
    pub fn new(height: usize, width: usize, direction: Direction, stride: usize) -> Result<Self> {
        if height == 0 || width == 0 || stride == 0 {
            return Err(Error::contract(format!(
                "lattice extents and stride must be positive ({height}x{width}, s={stride})"
            )));
        }
        Ok(Self {
            height,
            width,
            direction,
            stride,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// True when at least one degree-`s` neighbour can exist.
    pub fn has_interior_support(&self) -> bool {
        self.stride < self.height.min(self.width)
    }
}

/// Image coordinates `(row, col)` in the order the direction visits them.
pub fn unfold_order(spec: &LatticeSpec) -> Vec<(usize, usize)> {
    (0..spec.cells())
        .map(|t| {
            spec.direction
                .to_image(spec.height, spec.width, t / spec.width, t % spec.width)
        })
        .collect()
}

/// Sequence indices of the four degree-`s` predecessors of `t`, in the
/// order `[t-s, t-ws-s, t-ws, t-ws+s]`, all in the direction's own frame.
/// Off-grid references are `None`; horizontal offsets never wrap rows.
pub fn degree_neighbors(t: usize, spec: &LatticeSpec) -> [Option<usize>; 4] {
    let (w, s) = (spec.width, spec.stride);
    if t >= spec.cells() {
        return [None; 4];
    }
    let col = t % w;
    let left_ok = col >= s;
    let right_ok = col + s < w;
    let up = t.checked_sub(w * s);
    [
        left_ok.then(|| t - s),
        up.filter(|_| left_ok).map(|u| u - s),
        up,
        up.filter(|_| right_ok).map(|u| u + s),
    ]
}

/// Which of the four degree-`s` neighbours feed the aggregate. The
/// normaliser is the number of enabled branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborMask(pub [bool; 4]);

impl NeighborMask {
    pub const ALL: NeighborMask = NeighborMask([true; 4]);
    pub const UP_ONLY: NeighborMask = NeighborMask([false, false, true, false]);

    pub fn enabled(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// How a sweep conditions each cell on earlier cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    /// Mean of the enabled degree-`stride` neighbours; absent ones are zero.
    Lattice { stride: usize, mask: NeighborMask },
    /// Previous element of the unfolded sequence (conventional RNN over the
    /// flattened grid, wrapping at row ends).
    Sequential,
}

impl Context {
    pub fn elc(stride: usize) -> Self {
        Context::Lattice {
            stride,
            mask: NeighborMask::ALL,
        }
    }
}

/// Hidden states of a sweep in image coordinates. Cells computed in the
/// same wavefront share one `[cells * batch, hidden]` value; each cell owns
/// `batch` consecutive rows of its block.
#[derive(Clone, Debug)]
pub struct HiddenGrid {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub hidden: usize,
    blocks: Vec<Var>,
    /// Image index of every cell in each block, in row-block order.
    block_cells: Vec<Vec<usize>>,
}

impl HiddenGrid {
    /// The `[batch, hidden]` state of one cell.
    pub fn get(&self, tape: &mut Tape, row: usize, col: usize) -> Result<Var> {
        let idx = row * self.width + col;
        for (block, cells) in self.blocks.iter().zip(&self.block_cells) {
            if let Some(pos) = cells.iter().position(|&c| c == idx) {
                let rows: Vec<usize> = (pos * self.batch..(pos + 1) * self.batch).collect();
                return tape.gather_rows(*block, &rows);
            }
        }
        Err(Error::contract(format!("cell ({row}, {col}) not computed")))
    }

    pub fn is_filled(&self) -> bool {
        let mut seen = vec![false; self.height * self.width];
        self.block_cells.iter().flatten().for_each(|&i| seen[i] = true);
        seen.into_iter().all(|b| b)
    }

    /// Assembles the grid into an NHWC map `[batch, height, width, hidden]`.
    pub fn to_map(&self, tape: &mut Tape) -> Result<Var> {
        if !self.is_filled() {
            return Err(Error::contract("sweep left cells uncomputed"));
        }
        let hw = self.height * self.width;
        let parts: Vec<(Var, Vec<usize>)> = self
            .blocks
            .iter()
            .zip(&self.block_cells)
            .map(|(&v, cells)| {
                let dest = cells
                    .iter()
                    .flat_map(|&idx| (0..self.batch).map(move |b| b * hw + idx))
                    .collect();
                (v, dest)
            })
            .collect();
        let flat = tape.assemble_rows(self.batch * hw, &parts)?;
        tape.reshape(flat, &[self.batch, self.height, self.width, self.hidden])
    }
}

fn map_dims(tape: &Tape, map: Var) -> Result<[usize; 4]> {
    match *tape.shape(map) {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::contract(format!("expected NHWC map, got {s:?}"))),
    }
}

/// Reflects an NHWC map into (or, equivalently, out of) `direction`'s frame.
pub fn reflect_map(tape: &mut Tape, map: Var, direction: Direction) -> Result<Var> {
    let [b, h, w, c] = map_dims(tape, map)?;
    let mut rows = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = direction.to_image(h, w, r, col);
                rows.push((bi * h + sr) * w + sc);
            }
        }
    }
    let flat = tape.gather_rows(map, &rows)?;
    tape.reshape(flat, &[b, h, w, c])
}

/// Groups frame indices into wavefronts whose cells depend only on earlier
/// wavefronts. A degree-`s` lattice neighbour of `(i, j)` has key `2i + j`
/// smaller by at least `s`, so `(2i + j) / s` orders the waves; the
/// sequential context admits no parallelism.
fn wavefronts(spec: &LatticeSpec, context: Context) -> Vec<Vec<usize>> {
    let w = spec.width;
    match context {
        Context::Sequential => (0..spec.cells()).map(|t| vec![t]).collect(),
        Context::Lattice { stride, .. } => {
            let level = |t: usize| (2 * (t / w) + t % w) / stride;
            let mut waves = vec![Vec::new(); level(spec.cells() - 1) + 1];
            for t in 0..spec.cells() {
                waves[level(t)].push(t);
            }
            waves.retain(|wave| !wave.is_empty());
            waves
        }
    }
}

/// Runs a GRU over every cell of `features` (`[batch, H, W, C]`) in the
/// unfolding order of `spec.direction`, conditioning each cell on
/// `context`. The result is in image coordinates.
///
/// Independent cells are stacked and stepped together; every row is
/// computed with the same operations as a cell-by-cell sweep.
pub fn sweep(
    tape: &mut Tape,
    features: Var,
    gru: &GruVars,
    spec: &LatticeSpec,
    context: Context,
) -> Result<HiddenGrid> {
    let [batch, height, width, channels] = map_dims(tape, features)?;
    if height != spec.height || width != spec.width {
        return Err(Error::dim(
            "sweep",
            tape.shape(features),
            &[batch, spec.height, spec.width, channels],
        ));
    }
    if channels != gru.widths.input {
        return Err(Error::dim("sweep", tape.shape(features), &[gru.widths.input]));
    }
    if let Context::Lattice { mask, .. } = context {
        if mask.enabled() == 0 {
            return Err(Error::contract("neighbour mask enables no branch"));
        }
    }
    let hidden = gru.widths.hidden;
    let hw = height * width;
    let flat = tape.reshape(features, &[batch * hw, channels])?;
    let proj = gru_input_proj(gru, tape, flat)?;

    // Frame index -> (block, position within block).
    let mut loc: Vec<Option<(usize, usize)>> = vec![None; hw];
    let mut blocks = Vec::new();
    let mut block_cells = Vec::new();
    for wave in wavefronts(spec, context) {
        let image_idx: Vec<usize> = wave
            .iter()
            .map(|&t| {
                let (r, c) = spec.direction.to_image(height, width, t / width, t % width);
                r * width + c
            })
            .collect();
        let rows: Vec<usize> = image_idx
            .iter()
            .flat_map(|&idx| (0..batch).map(move |b| b * hw + idx))
            .collect();
        let xp = GruInputProj {
            r: tape.gather_rows(proj.r, &rows)?,
            u: tape.gather_rows(proj.u, &rows)?,
            c: tape.gather_rows(proj.c, &rows)?,
        };
        let total = wave.len() * batch;
        let h_ctx = match context {
            Context::Lattice { stride, mask } => {
                let mut acc: Option<Var> = None;
                for (slot, on) in mask.0.into_iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let refs: Vec<Option<usize>> = wave
                        .iter()
                        .map(|&t| degree_neighbors(t, &LatticeSpec { stride, ..*spec })[slot])
                        .collect();
                    let Some(v) = collect_states(tape, &blocks, &loc, &refs, batch)? else { continue };
                    acc = Some(match acc {
                        None => v,
                        Some(a) => tape.add(a, v)?,
                    });
                }
                match acc {
                    Some(sum) => tape.scale(sum, 1.0 / mask.enabled() as f64),
                    None => tape.zeros(&[total, hidden]),
                }
            }
            Context::Sequential => {
                let refs: Vec<Option<usize>> = wave.iter().map(|&t| t.checked_sub(1)).collect();
                match collect_states(tape, &blocks, &loc, &refs, batch)? {
                    Some(v) => v,
                    None => tape.zeros(&[total, hidden]),
                }
            }
        };
        let h = gru_step_projected(gru, tape, xp, h_ctx)?;
        for (pos, &t) in wave.iter().enumerate() {
            loc[t] = Some((blocks.len(), pos));
        }
        blocks.push(h);
        block_cells.push(image_idx);
    }
    Ok(HiddenGrid {
        height,
        width,
        batch,
        hidden,
        blocks,
        block_cells,
    })
}

/// Stacks the states of the referenced cells (`batch` rows each) into one
/// value, with zero rows for `None`. Returns `None` when nothing is
/// referenced.
fn collect_states(
    tape: &mut Tape,
    blocks: &[Var],
    loc: &[Option<(usize, usize)>],
    refs: &[Option<usize>],
    batch: usize,
) -> Result<Option<Var>> {
    if refs.iter().all(Option::is_none) {
        return Ok(None);
    }
    // Source rows per block, with destination rows in the stacked value.
    let mut per_block: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    for (dst, r) in refs.iter().enumerate() {
        let Some(t) = *r else { continue };
        let (block, pos) = loc[t].ok_or_else(|| Error::contract(format!("lattice cell {t} read before it was computed")))?;
        let entry = match per_block.iter_mut().find(|e| e.0 == block) {
            Some(e) => e,
            None => {
                per_block.push((block, Vec::new(), Vec::new()));
                per_block.last_mut().expect("just pushed")
            }
        };
        entry.1.extend(pos * batch..(pos + 1) * batch);
        entry.2.extend(dst * batch..(dst + 1) * batch);
    }
    let full = refs.iter().all(Option::is_some);
    if per_block.len() == 1 && full {
        let (block, src, _) = &per_block[0];
        let n = tape.value(blocks[*block]).rows();
        if src.len() == n && src.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(Some(blocks[*block]));
        }
        return tape.gather_rows(blocks[*block], src).map(Some);
    }
    let mut parts = Vec::with_capacity(per_block.len());
    for (block, src, dst) in per_block {
        parts.push((tape.gather_rows(blocks[block], &src)?, dst));
    }
    tape.assemble_rows(refs.len() * batch, &parts).map(Some)
}
