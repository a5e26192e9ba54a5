//! Unfolding, neighbour algebra and directional sweeps checked against
//! coordinate-space oracles and hand enumeration.

use elc::cells::{gru_step, GruParams, GruVars, Init, Widths};
use elc::elc::{elc_aggregate_2d, LatticeHistory};
use elc::lattice::{
    degree_neighbors, reflect_map, sweep, unfold_order, Context, Direction, LatticeSpec, NeighborMask,
};
use elc::{Rng, Tape, Tensor, Var};
use proptest::prelude::*;

const IN: usize = 2;
const HID: usize = 3;
const B: usize = 2;

/// Neighbours computed in (row, col) space of the direction's frame.
fn coordinate_oracle(h: usize, w: usize, s: usize, t: usize) -> [Option<usize>; 4] {
    let (r, c) = ((t / w) as i64, (t % w) as i64);
    let s = s as i64;
    let at = |dr: i64, dc: i64| {
        let (rr, cc) = (r + dr, c + dc);
        (rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64).then(|| (rr * w as i64 + cc) as usize)
    };
    [at(0, -s), at(-s, -s), at(-s, 0), at(-s, s)]
}

fn gru(seed: u64) -> GruParams {
    let mut rng = Rng::new(seed);
    let mut p = GruParams::init(Widths::new(IN, HID, HID), &mut rng, Init { weight_stddev: 0.5, bias_value: 0.1 });
    for b in [&mut p.b_r, &mut p.b_u, &mut p.b_c] {
        *b = Tensor::gaussian(&mut rng, &[HID], 0.0, 0.3).unwrap();
    }
    p
}

fn features(seed: u64, h: usize, w: usize) -> Tensor {
    Tensor::gaussian(&mut Rng::new(seed), &[B, h, w, IN], 0.0, 1.0).unwrap()
}

fn run_sweep(p: &GruParams, x: &Tensor, dir: Direction, context: Context) -> Tensor {
    let [_, h, w, _] = x.shape().try_into().unwrap();
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let spec = LatticeSpec::new(h, w, dir, context_stride(context)).unwrap();
    let grid = sweep(&mut tape, xv, &vars, &spec, context).unwrap();
    let map = grid.to_map(&mut tape).unwrap();
    tape.value(map).clone()
}

fn context_stride(c: Context) -> usize {
    match c {
        Context::Lattice { stride, .. } => stride,
        Context::Sequential => 1,
    }
}

/// Rows of cell `(r, c)` for every batch element of an NHWC input.
fn cell_input(tape: &mut Tape, x: Var, h: usize, w: usize, r: usize, c: usize) -> Var {
    let rows: Vec<usize> = (0..B).map(|b| (b * h + r) * w + c).collect();
    let flat = tape.reshape(x, &[B * h * w, IN]).unwrap();
    tape.gather_rows(flat, &rows).unwrap()
}

fn cell_of(map: &Tensor, r: usize, c: usize) -> Vec<f64> {
    let [_, h, w, d] = map.shape().try_into().unwrap();
    (0..B)
        .flat_map(|b| map.data()[((b * h + r) * w + c) * d..][..d].to_vec())
        .collect()
}

#[test]
fn neighbour_lists_for_width_five() {
    let spec = LatticeSpec::new(4, 5, Direction::Se, 1).unwrap();
    assert_eq!(degree_neighbors(12, &spec), [Some(11), Some(6), Some(7), Some(8)]);
    let spec = LatticeSpec::new(4, 5, Direction::Se, 2).unwrap();
    assert_eq!(degree_neighbors(12, &spec), [Some(10), Some(0), Some(2), Some(4)]);
}

#[test]
fn neighbours_match_coordinate_oracle_on_random_tuples() {
    let mut rng = Rng::new(4);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let h = 1 + rng.below(12);
        let w = 1 + rng.below(12);
        let s = 1 + rng.below(6);
        let t = rng.below(h * w);
        let spec = LatticeSpec::new(h, w, Direction::Se, s).unwrap();
        if degree_neighbors(t, &spec) != coordinate_oracle(h, w, s, t) {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn edge_cells_have_no_wrapping_neighbours() {
    let spec = LatticeSpec::new(3, 3, Direction::Se, 1).unwrap();
    // First column: no left or up-left; last column: no up-right.
    assert_eq!(degree_neighbors(3, &spec), [None, None, Some(0), Some(1)]);
    assert_eq!(degree_neighbors(5, &spec), [Some(4), Some(1), Some(2), None]);
    assert_eq!(degree_neighbors(0, &spec), [None; 4]);
}

/// 4x4 SE sweep at degree 1 against a cell-by-cell evaluation whose
/// neighbour lists are written out by hand (`None` marks an off-grid slot).
#[test]
fn four_by_four_sweep_equals_hand_enumeration_bitwise() {
    #[rustfmt::skip]
    const NEIGHBOURS: [[Option<usize>; 4]; 16] = [
        [None, None, None, None],
        [Some(0), None, None, None],
        [Some(1), None, None, None],
        [Some(2), None, None, None],
        [None, None, Some(0), Some(1)],
        [Some(4), Some(0), Some(1), Some(2)],
        [Some(5), Some(1), Some(2), Some(3)],
        [Some(6), Some(2), Some(3), None],
        [None, None, Some(4), Some(5)],
        [Some(8), Some(4), Some(5), Some(6)],
        [Some(9), Some(5), Some(6), Some(7)],
        [Some(10), Some(6), Some(7), None],
        [None, None, Some(8), Some(9)],
        [Some(12), Some(8), Some(9), Some(10)],
        [Some(13), Some(9), Some(10), Some(11)],
        [Some(14), Some(10), Some(11), None],
    ];
    let p = gru(1);
    let x = features(2, 4, 4);
    let got = run_sweep(&p, &x, Direction::Se, Context::elc(1));

    let mut tape = Tape::new();
    let vars: GruVars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut states: Vec<Var> = Vec::new();
    for (t, refs) in NEIGHBOURS.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for r in refs.iter().flatten() {
            acc = Some(match acc {
                None => states[*r],
                Some(a) => tape.add(a, states[*r]).unwrap(),
            });
        }
        let agg = match acc {
            Some(a) => tape.scale(a, 0.25),
            None => tape.zeros(&[B, HID]),
        };
        let xc = cell_input(&mut tape, xv, 4, 4, t / 4, t % 4);
        states.push(gru_step(&vars, &mut tape, xc, agg).unwrap());
    }
    for (t, s) in states.iter().enumerate() {
        let expect: Vec<f64> = (0..B).flat_map(|b| tape.value(*s).row(b).to_vec()).collect();
        assert_eq!(cell_of(&got, t / 4, t % 4), expect, "cell {t}");
    }
}

/// Sweeping in direction `d` equals reflecting into its frame, sweeping
/// south-east and reflecting back.
#[test]
fn direction_equivariance_is_bitwise() {
    let p = gru(3);
    for (h, w) in [(4, 4), (3, 5), (5, 2)] {
        let x = features(4, h, w);
        for stride in [1, 2] {
            for dir in Direction::ALL {
                let direct = run_sweep(&p, &x, dir, Context::elc(stride));
                let mut tape = Tape::new();
                let vars = p.bind(&mut tape);
                let xv = tape.constant(x.clone());
                let into = reflect_map(&mut tape, xv, dir).unwrap();
                let spec = LatticeSpec::new(h, w, Direction::Se, stride).unwrap();
                let grid = sweep(&mut tape, into, &vars, &spec, Context::elc(stride)).unwrap();
                let map = grid.to_map(&mut tape).unwrap();
                let back = reflect_map(&mut tape, map, dir).unwrap();
                assert_eq!(tape.value(back).data(), direct.data(), "{dir} {h}x{w} s={stride}");
            }
        }
    }
}

/// With only the up branch enabled, every column is an independent 1-D GRU
/// running top to bottom.
#[test]
fn up_only_sweep_is_a_column_gru() {
    let p = gru(5);
    let (h, w) = (5, 3);
    let x = features(6, h, w);
    let ctx = Context::Lattice {
        stride: 1,
        mask: NeighborMask::UP_ONLY,
    };
    let got = run_sweep(&p, &x, Direction::Se, ctx);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    for c in 0..w {
        let mut state = tape.zeros(&[B, HID]);
        for r in 0..h {
            let xc = cell_input(&mut tape, xv, h, w, r, c);
            state = gru_step(&vars, &mut tape, xc, state).unwrap();
            let expect: Vec<f64> = (0..B).flat_map(|b| tape.value(state).row(b).to_vec()).collect();
            let diff = cell_of(&got, r, c)
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "({r}, {c}) differs by {diff}");
        }
    }
}

/// A sequential context visits cells in row-major frame order, so the
/// last cell of a row feeds the first cell of the next.
#[test]
fn sequential_context_wraps_rows() {
    let p = gru(7);
    let (h, w) = (3, 3);
    let x = features(8, h, w);
    let got = run_sweep(&p, &x, Direction::Se, Context::Sequential);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut state = tape.zeros(&[B, HID]);
    for t in 0..h * w {
        let xc = cell_input(&mut tape, xv, h, w, t / w, t % w);
        state = gru_step(&vars, &mut tape, xc, state).unwrap();
        let expect: Vec<f64> = (0..B).flat_map(|b| tape.value(state).row(b).to_vec()).collect();
        assert_eq!(cell_of(&got, t / w, t % w), expect);
    }
}

#[test]
fn lattice_aggregate_is_linear() {
    let mut rng = Rng::new(9);
    let (h, w) = (4, 5);
    let a: Vec<Tensor> = (0..h * w).map(|_| Tensor::gaussian(&mut rng, &[B, HID], 0.0, 1.0).unwrap()).collect();
    let b: Vec<Tensor> = (0..h * w).map(|_| Tensor::gaussian(&mut rng, &[B, HID], 0.0, 1.0).unwrap()).collect();
    let (alpha, beta) = (0.7, -1.3);
    for stride in [1, 2, 3] {
        for t in 0..h * w {
            let mut tape = Tape::new();
            let mut ha = LatticeHistory::new(h, w, [B, HID]);
            let mut hb = LatticeHistory::new(h, w, [B, HID]);
            let mut hc = LatticeHistory::new(h, w, [B, HID]);
            for i in 0..h * w {
                let va = tape.constant(a[i].clone());
                let vb = tape.constant(b[i].clone());
                let sa = tape.scale(va, alpha);
                let sb = tape.scale(vb, beta);
                let comb = tape.add(sa, sb).unwrap();
                ha.set(i, va).unwrap();
                hb.set(i, vb).unwrap();
                hc.set(i, comb).unwrap();
            }
            let ga = elc_aggregate_2d(&mut tape, &ha, t, stride).unwrap();
            let gb = elc_aggregate_2d(&mut tape, &hb, t, stride).unwrap();
            let gc = elc_aggregate_2d(&mut tape, &hc, t, stride).unwrap();
            for ((x, y), z) in tape.value(ga).data().iter().zip(tape.value(gb).data()).zip(tape.value(gc).data()) {
                assert!((alpha * x + beta * y - z).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn unfold_is_a_bijection(h in 1usize..9, w in 1usize..9, d in 0usize..4) {
        let dir = Direction::ALL[d];
        let spec = LatticeSpec::new(h, w, dir, 1).unwrap();
        let order = unfold_order(&spec);
        prop_assert_eq!(order.len(), h * w);
        let mut seen = vec![false; h * w];
        for &(r, c) in &order {
            prop_assert!(r < h && c < w);
            prop_assert!(!seen[r * w + c]);
            seen[r * w + c] = true;
            // to_image is an involution.
            prop_assert_eq!(dir.to_image(h, w, r, c).0, if matches!(dir, Direction::Ne | Direction::Nw) { h - 1 - r } else { r });
        }
        prop_assert_eq!(order[0], dir.to_image(h, w, 0, 0));
    }

    #[test]
    fn neighbours_precede_and_stay_in_grid(h in 1usize..10, w in 1usize..10, s in 1usize..5, seed in any::<u64>()) {
        let t = Rng::new(seed).below(h * w);
        let spec = LatticeSpec::new(h, w, Direction::Se, s).unwrap();
        for n in degree_neighbors(t, &spec).into_iter().flatten() {
            prop_assert!(n < t);
            prop_assert_eq!(n % w == t % w || (n % w).abs_diff(t % w) == s, true);
        }
    }

    /// Changing the input at one cell leaves every cell visited before it
    /// untouched and changes the cell itself.
    #[test]
    fn sweep_is_causal(seed in 0u64..1000, d in 0usize..4, stride in 1usize..3, cell in 0usize..16) {
        let dir = Direction::ALL[d];
        let p = gru(seed);
        let x = features(seed + 1, 4, 4);
        let (r, c) = (cell / 4, cell % 4);
        let mut y = x.clone();
        for k in 0..IN {
            let v = y.at(&[0, r, c, k]);
            y.set(&[0, r, c, k], v + 1.0);
        }
        for ctx in [Context::elc(stride), Context::Sequential] {
            let a = run_sweep(&p, &x, dir, ctx);
            let b = run_sweep(&p, &y, dir, ctx);
            let spec = LatticeSpec::new(4, 4, dir, stride).unwrap();
            let order = unfold_order(&spec);
            let pos = order.iter().position(|&q| q == (r, c)).unwrap();
            for &(rr, cc) in &order[..pos] {
                prop_assert_eq!(cell_of(&a, rr, cc), cell_of(&b, rr, cc));
            }
            prop_assert_ne!(cell_of(&a, r, c)[..HID].to_vec(), cell_of(&b, r, c)[..HID].to_vec());
        }
    }
}
