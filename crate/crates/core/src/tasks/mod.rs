//! Puzzle substrate: Sudoku oracle and generator, augmentations, the recolor
//! task family and dataset files.

mod dataset;
mod recolor;
mod sudoku;

use crate::error::{Error, Result};

pub use dataset::{read_dataset, read_hrm81, stream_rng, write_dataset, Dataset, GenSummary, TaskKind};
pub use recolor::{make_recolor_family, recolor_rule, RECOLOR_SIDE, SQUARE_SIDE};
pub use sudoku::{generate_puzzle, random_solution, solve_sudoku, GeneratedPuzzle, SolveOutcome, SudokuGrid};

/// One input/solution pair. Cell values are symbol slots; for Sudoku `0` is
/// blank and `1..=N` are digits.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskRecord {
    pub input: Vec<usize>,
    pub solution: Vec<usize>,
    pub task_type: Option<usize>,
    /// Row length; positions are laid out row-major.
    pub width: usize,
}

impl TaskRecord {
    pub fn positions(&self) -> usize {
        self.input.len()
    }

    pub fn rows(&self) -> usize {
        self.input.len() / self.width.max(1)
    }
}

/// Checks that `rho` is a bijection of `0..len` fixing the first
/// `num_special` slots.
pub fn check_permutation(rho: &[usize], num_special: usize) -> Result<()> {
    let mut seen = vec![false; rho.len()];
    for &r in rho {
        if r >= rho.len() || std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidPermutation(format!("{rho:?} is not a bijection")));
        }
    }
    if let Some(s) = (0..num_special.min(rho.len())).find(|&s| rho[s] != s) {
        return Err(Error::InvalidPermutation(format!("special slot {s} must stay fixed")));
    }
    Ok(())
}

/// Relabels every cell `c ↦ rho[c]`.
pub fn augment_symbols(rec: &TaskRecord, rho: &[usize], num_special: usize) -> Result<TaskRecord> {
    check_permutation(rho, num_special)?;
    let map = |cells: &[usize]| -> Result<Vec<usize>> {
        cells
            .iter()
            .map(|&c| rho.get(c).copied().ok_or(Error::UnknownSymbol { symbol: c, alphabet: rho.len() }))
            .collect()
    };
    Ok(TaskRecord { input: map(&rec.input)?, solution: map(&rec.solution)?, ..rec.clone() })
}

/// Source index for every target cell of dihedral element `element` on an
/// `n × n` grid. Elements `0..4` rotate clockwise by `element` quarter turns;
/// `4..8` transpose first.
pub fn dihedral_map(n: usize, element: usize) -> Result<Vec<usize>> {
    if element >= 8 {
        return Err(Error::InvalidGrid(format!("dihedral element {element} outside 0..8")));
    }
    let mut map = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            // Undo the rotation, then the optional transpose.
            let (mut sr, mut sc) = (r, c);
            for _ in 0..element % 4 {
                (sr, sc) = (n - 1 - sc, sr);
            }
            if element >= 4 {
                (sr, sc) = (sc, sr);
            }
            map.push(sr * n + sc);
        }
    }
    Ok(map)
}

/// Applies one element of the square's symmetry group to input and solution.
pub fn augment_dihedral(rec: &TaskRecord, element: usize) -> Result<TaskRecord> {
    let n = rec.width;
    if n == 0 || rec.input.len() != n * n || rec.solution.len() != n * n {
        return Err(Error::InvalidGrid(format!("dihedral augmentation needs a square grid, got {} cells of width {n}", rec.input.len())));
    }
    let map = dihedral_map(n, element)?;
    let apply = |cells: &[usize]| map.iter().map(|&s| cells[s]).collect();
    Ok(TaskRecord { input: apply(&rec.input), solution: apply(&rec.solution), ..rec.clone() })
}

/// Applies a position permutation: output cell `p` takes input cell `perm[p]`.
pub fn permute_positions(cells: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&s| cells[s]).collect()
}
