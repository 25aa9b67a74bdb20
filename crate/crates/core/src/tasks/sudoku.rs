//! Exact Sudoku oracle and unique-solution puzzle generator.

use rand::seq::SliceRandom;
use rand::Rng;

use super::TaskRecord;
use crate::error::{Error, Result};

/// Largest supported box side (grid side 25 still fits the `u32` masks).
pub const MAX_BOX: usize = 5;

/// An `N × N` grid with `N = n²`; `0` is blank, `1..=N` are digits.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SudokuGrid {
    n: usize,
    cells: Vec<usize>,
}

impl SudokuGrid {
    pub fn new(n: usize, cells: Vec<usize>) -> Result<Self> {
        if n == 0 || n > MAX_BOX {
            return Err(Error::InvalidGrid(format!("box side {n} outside 1..={MAX_BOX}")));
        }
        let side = n * n;
        if cells.len() != side * side {
            return Err(Error::InvalidGrid(format!("{} cells for a {side}×{side} grid", cells.len())));
        }
        if let Some(&v) = cells.iter().find(|&&v| v > side) {
            return Err(Error::InvalidGrid(format!("cell value {v} exceeds {side}")));
        }
        Ok(Self { n, cells })
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::new(n, vec![0; n.pow(4)])
    }

    /// Box side for a grid of `side × side` cells.
    pub fn box_side(side: usize) -> Result<usize> {
        (1..=MAX_BOX)
            .find(|b| b * b == side)
            .ok_or_else(|| Error::InvalidGrid(format!("grid side {side} is not a square number ≤ 25")))
    }

    pub fn from_side(side: usize, cells: Vec<usize>) -> Result<Self> {
        Self::new(Self::box_side(side)?, cells)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> usize {
        self.n * self.n
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<usize> {
        self.cells
    }

    pub fn holes(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 0).count()
    }

    pub fn is_complete(&self) -> bool {
        self.holes() == 0
    }

    fn box_of(&self, r: usize, c: usize) -> usize {
        (r / self.n) * self.n + c / self.n
    }

    /// No digit repeats in any row, column or box.
    pub fn is_valid(&self) -> bool {
        Masks::from_grid(self).is_some()
    }

    /// Complete and valid.
    pub fn is_solved(&self) -> bool {
        self.is_complete() && self.is_valid()
    }

    /// Every given of `self` appears unchanged in `other`.
    pub fn agrees_with(&self, other: &SudokuGrid) -> bool {
        self.n == other.n && self.cells.iter().zip(&other.cells).all(|(&a, &b)| a == 0 || a == b)
    }
}

/// Row, column and box digit masks (bit `d` set ⇔ digit `d` used).
#[derive(Clone)]
struct Masks {
    n: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    boxes: Vec<u32>,
}

impl Masks {
    fn from_grid(g: &SudokuGrid) -> Option<Self> {
        let side = g.side();
        let mut m = Masks { n: g.n, rows: vec![0; side], cols: vec![0; side], boxes: vec![0; side] };
        for (idx, &v) in g.cells.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let (r, c) = (idx / side, idx % side);
            let bit = 1u32 << v;
            let b = g.box_of(r, c);
            if (m.rows[r] | m.cols[c] | m.boxes[b]) & bit != 0 {
                return None;
            }
            m.set(r, c, b, bit);
        }
        Some(m)
    }

    fn set(&mut self, r: usize, c: usize, b: usize, bit: u32) {
        self.rows[r] |= bit;
        self.cols[c] |= bit;
        self.boxes[b] |= bit;
    }

    fn clear(&mut self, r: usize, c: usize, b: usize, bit: u32) {
        self.rows[r] &= !bit;
        self.cols[c] &= !bit;
        self.boxes[b] &= !bit;
    }

    fn candidates(&self, r: usize, c: usize) -> u32 {
        let side = self.n * self.n;
        let all = ((1u32 << side) - 1) << 1;
        all & !(self.rows[r] | self.cols[c] | self.boxes[(r / self.n) * self.n + c / self.n])
    }
}

/// Result of an exhaustive search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolveOutcome {
    /// Solutions found, capped at the requested limit.
    pub count: usize,
    /// The first solution in search order.
    pub first: Option<SudokuGrid>,
}

impl SolveOutcome {
    pub fn is_unique(&self) -> bool {
        self.count == 1
    }
}

struct Search<'a> {
    cells: Vec<usize>,
    masks: Masks,
    limit: usize,
    count: usize,
    first: Option<Vec<usize>>,
    order: &'a mut dyn FnMut(u32) -> Vec<usize>,
}

impl Search<'_> {
    fn run(&mut self) {
        let side = self.masks.n * self.masks.n;
        // Most-constrained blank cell; ties go to the lowest index.
        let mut best: Option<(usize, u32)> = None;
        for (idx, &v) in self.cells.iter().enumerate() {
            if v != 0 {
                continue;
            }
            let cand = self.masks.candidates(idx / side, idx % side);
            if best.is_none_or(|(_, b)| cand.count_ones() < b.count_ones()) {
                best = Some((idx, cand));
                if cand.count_ones() <= 1 {
                    break;
                }
            }
        }
        let Some((idx, cand)) = best else {
            self.count += 1;
            if self.first.is_none() {
                self.first = Some(self.cells.clone());
            }
            return;
        };
        let (r, c) = (idx / side, idx % side);
        let b = (r / self.masks.n) * self.masks.n + c / self.masks.n;
        for d in (self.order)(cand) {
            let bit = 1u32 << d;
            self.cells[idx] = d;
            self.masks.set(r, c, b, bit);
            self.run();
            self.masks.clear(r, c, b, bit);
            self.cells[idx] = 0;
            if self.count >= self.limit {
                return;
            }
        }
    }
}

fn ascending(mask: u32) -> Vec<usize> {
    (1..32).filter(|d| mask & (1 << d) != 0).collect()
}

fn search(grid: &SudokuGrid, limit: usize, order: &mut dyn FnMut(u32) -> Vec<usize>) -> Result<SolveOutcome> {
    let masks = Masks::from_grid(grid).ok_or_else(|| Error::InvalidGrid("a digit repeats in a unit".into()))?;
    if limit == 0 {
        return Ok(SolveOutcome { count: 0, first: None });
    }
    let mut s = Search { cells: grid.cells.clone(), masks, limit, count: 0, first: None, order };
    s.run();
    let first = s.first.map(|cells| SudokuGrid { n: grid.n, cells });
    Ok(SolveOutcome { count: s.count, first })
}

/// Exhaustive backtracking with most-constrained-cell ordering, trying digits
/// lowest first. Stops after `count_limit` solutions.
pub fn solve_sudoku(grid: &SudokuGrid, count_limit: usize) -> Result<SolveOutcome> {
    search(grid, count_limit, &mut ascending)
}

/// A uniformly shuffled complete grid.
pub fn random_solution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SudokuGrid> {
    let empty = SudokuGrid::empty(n)?;
    let mut shuffled = |mask: u32| {
        let mut ds = ascending(mask);
        ds.shuffle(rng);
        ds
    };
    search(&empty, 1, &mut shuffled)?.first.ok_or_else(|| Error::Generation("no complete grid found".into()))
}

/// A generated puzzle and how many holes were actually opened.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPuzzle {
    pub record: TaskRecord,
    pub holes: usize,
    /// Fewer holes than requested could be opened while keeping uniqueness.
    pub short: bool,
}

/// Retries with fresh grids before settling for fewer holes.
const GENERATION_ATTEMPTS: usize = 8;

/// Random complete grid, then blanks cells in random order, keeping only
/// removals that leave the solution unique.
pub fn generate_puzzle<R: Rng + ?Sized>(n: usize, holes: usize, rng: &mut R) -> Result<GeneratedPuzzle> {
    let side = n * n;
    let cells = side * side;
    if holes >= cells {
        return Err(Error::Generation(format!("{holes} holes leave no givens in a {side}×{side} grid")));
    }
    let mut best: Option<(SudokuGrid, SudokuGrid)> = None;
    for _ in 0..GENERATION_ATTEMPTS {
        let solution = random_solution(n, rng)?;
        let mut puzzle = solution.clone();
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(rng);
        let mut opened = 0;
        for idx in order {
            if opened == holes {
                break;
            }
            let keep = puzzle.cells[idx];
            puzzle.cells[idx] = 0;
            if solve_sudoku(&puzzle, 2)?.is_unique() {
                opened += 1;
            } else {
                puzzle.cells[idx] = keep;
            }
        }
        let better = best.as_ref().is_none_or(|(p, _)| puzzle.holes() > p.holes());
        if better {
            best = Some((puzzle, solution));
        }
        if opened == holes {
            break;
        }
    }
    let (puzzle, solution) = best.expect("at least one attempt");
    let got = puzzle.holes();
    Ok(GeneratedPuzzle {
        record: TaskRecord { input: puzzle.into_cells(), solution: solution.into_cells(), task_type: None, width: side },
        holes: got,
        short: got < holes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_4x4_has_288_completions() {
        let out = solve_sudoku(&SudokuGrid::empty(2).unwrap(), 300).unwrap();
        assert_eq!(out.count, 288);
        let capped = solve_sudoku(&SudokuGrid::empty(2).unwrap(), 10).unwrap();
        assert_eq!(capped.count, 10);
    }

    #[test]
    fn solved_grid_is_its_own_unique_solution() {
        let g = random_solution(2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(g.is_solved());
        let out = solve_sudoku(&g, 5).unwrap();
        assert_eq!(out.count, 1);
        assert_eq!(out.first.as_ref(), Some(&g));
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let mut cells = vec![0; 16];
        cells[0] = 1;
        cells[1] = 1;
        assert!(solve_sudoku(&SudokuGrid::new(2, cells).unwrap(), 2).is_err());
        assert!(SudokuGrid::new(2, vec![5; 16]).is_err());
        assert!(SudokuGrid::new(2, vec![0; 15]).is_err());
    }

    #[test]
    fn lowest_digit_first_on_empty_grid() {
        let first = solve_sudoku(&SudokuGrid::empty(2).unwrap(), 1).unwrap().first.unwrap();
        assert_eq!(&first.cells()[..4], &[1, 2, 3, 4]);
    }

    #[test]
    fn generated_puzzles_are_unique_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for holes in [0, 6, 10, 12] {
            let p = generate_puzzle(2, holes, &mut rng).unwrap();
            let input = SudokuGrid::new(2, p.record.input.clone()).unwrap();
            let sol = SudokuGrid::new(2, p.record.solution.clone()).unwrap();
            assert!(input.agrees_with(&sol));
            if holes == 0 {
                assert_eq!(input, sol);
            }
            let out = solve_sudoku(&input, 2).unwrap();
            assert_eq!(out.count, 1);
            assert_eq!(out.first.unwrap(), sol);
            assert_eq!(p.holes, input.holes());
            assert_eq!(p.short, p.holes < holes);
        }
        let p = generate_puzzle(3, 45, &mut rng).unwrap();
        assert_eq!(solve_sudoku(&SudokuGrid::new(3, p.record.input).unwrap(), 2).unwrap().count, 1);
    }
}
