//! Synthetic recolor family: two solid squares on a background; the answer
//! swaps the two square colors.

use rand::seq::SliceRandom;
use rand::Rng;

use super::TaskRecord;
use crate::error::{Error, Result};

pub const RECOLOR_SIDE: usize = 6;
pub const SQUARE_SIDE: usize = 2;

const PLACEMENT_ATTEMPTS: usize = 100;

fn square_cells(top: usize, left: usize) -> impl Iterator<Item = usize> {
    (top..top + SQUARE_SIDE).flat_map(move |r| (left..left + SQUARE_SIDE).map(move |c| r * RECOLOR_SIDE + c))
}

fn place<R: Rng + ?Sized>(rng: &mut R) -> Result<[(usize, usize); 2]> {
    let span = RECOLOR_SIDE - SQUARE_SIDE + 1;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let a = (rng.gen_range(0..span), rng.gen_range(0..span));
        let b = (rng.gen_range(0..span), rng.gen_range(0..span));
        let overlap = a.0.abs_diff(b.0) < SQUARE_SIDE && a.1.abs_diff(b.1) < SQUARE_SIDE;
        if !overlap {
            return Ok([a, b]);
        }
    }
    Err(Error::Generation("could not place two disjoint squares".into()))
}

/// Scene with background `bg` and squares colored `a` and `b`.
fn scene(squares: [(usize, usize); 2], bg: usize, a: usize, b: usize) -> Vec<usize> {
    let mut cells = vec![bg; RECOLOR_SIDE * RECOLOR_SIDE];
    for (&(t, l), color) in squares.iter().zip([a, b]) {
        for idx in square_cells(t, l) {
            cells[idx] = color;
        }
    }
    cells
}

/// `num_tasks × examples_per_task` records over colors drawn from `palette`.
/// Siblings share a task id and the rule but not placement or colors.
pub fn make_recolor_family<R: Rng + ?Sized>(
    rng: &mut R,
    num_tasks: usize,
    examples_per_task: usize,
    palette: &[usize],
) -> Result<Vec<TaskRecord>> {
    let mut distinct = palette.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || distinct.len() != palette.len() {
        return Err(Error::Generation(format!("palette {palette:?} needs at least 3 distinct colors")));
    }
    let mut out = Vec::with_capacity(num_tasks * examples_per_task);
    for task in 0..num_tasks {
        for _ in 0..examples_per_task {
            let squares = place(rng)?;
            let colors: Vec<usize> = palette.choose_multiple(rng, 3).copied().collect();
            let (bg, a, b) = (colors[0], colors[1], colors[2]);
            debug_assert!(a != b && a != bg && b != bg);
            out.push(TaskRecord {
                input: scene(squares, bg, a, b),
                solution: scene(squares, bg, b, a),
                task_type: Some(task),
                width: RECOLOR_SIDE,
            });
        }
    }
    Ok(out)
}

/// Reference answer for a recolor input: the most frequent color is the
/// background and the two others are exchanged.
pub fn recolor_rule(input: &[usize]) -> Result<Vec<usize>> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &c in input {
        match counts.iter_mut().find(|(col, _)| *col == c) {
            Some((_, n)) => *n += 1,
            None => counts.push((c, 1)),
        }
    }
    if counts.len() != 3 {
        return Err(Error::InvalidGrid(format!("recolor scene must use 3 colors, found {}", counts.len())));
    }
    counts.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let (a, b) = (counts[1].0, counts[2].0);
    Ok(input.iter().map(|&c| if c == a { b } else if c == b { a } else { c }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::augment_symbols;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squares_swap_and_background_stays() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fam = make_recolor_family(&mut rng, 4, 3, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(fam.len(), 12);
        for r in &fam {
            assert_eq!(recolor_rule(&r.input).unwrap(), r.solution);
            let changed = r.input.iter().zip(&r.solution).filter(|(a, b)| a != b).count();
            assert_eq!(changed, 2 * SQUARE_SIDE * SQUARE_SIDE);
        }
        assert_eq!(fam[5].task_type, Some(1));
    }

    #[test]
    fn rule_commutes_with_recoloring() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = &make_recolor_family(&mut rng, 1, 1, &[0, 1, 2]).unwrap()[0];
        let rho = vec![4, 5, 3, 0, 1, 2];
        let moved = augment_symbols(r, &rho, 0).unwrap();
        assert_eq!(recolor_rule(&moved.input).unwrap(), moved.solution);
    }

    #[test]
    fn small_palettes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_recolor_family(&mut rng, 1, 1, &[0, 1]).is_err());
        assert!(make_recolor_family(&mut rng, 1, 1, &[0, 1, 1]).is_err());
    }
}
