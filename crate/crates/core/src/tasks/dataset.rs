//! Dataset text files.
//!
//! Line 1 is `size=<rows> width=<W> alphabet=<K> [kind=sudoku|recolor]`; every
//! other non-empty line is `input_csv|solution_csv[|task=<id>]`.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::recolor::{make_recolor_family, recolor_rule, RECOLOR_SIDE};
use super::sudoku::{generate_puzzle, solve_sudoku, SudokuGrid};
use super::TaskRecord;
use crate::error::{Error, Result};
use crate::model::SymbolAlphabet;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Sudoku,
    Recolor,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Sudoku => "sudoku",
            TaskKind::Recolor => "recolor",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sudoku" => Ok(TaskKind::Sudoku),
            "recolor" => Ok(TaskKind::Recolor),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    /// Grid rows.
    pub size: usize,
    pub width: usize,
    /// Symbol slots `K`.
    pub alphabet: usize,
    pub records: Vec<TaskRecord>,
}

/// What a generation run produced.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GenSummary {
    pub count: usize,
    pub mean_holes: f64,
    /// Puzzles that ended with fewer holes than requested.
    pub short: usize,
    /// Every puzzle re-solved by the oracle to its stored unique solution.
    pub oracle_verified: bool,
}

/// Independent stream for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

impl Dataset {
    pub fn positions(&self) -> usize {
        self.size * self.width
    }

    /// The symbol alphabet the records are written in.
    pub fn symbol_alphabet(&self) -> SymbolAlphabet {
        match self.kind {
            TaskKind::Sudoku => SymbolAlphabet::sudoku(self.size),
            TaskKind::Recolor => SymbolAlphabet::colors(self.alphabet),
        }
    }

    /// One past the largest task id, or 0 without task ids.
    pub fn num_task_types(&self) -> usize {
        self.records.iter().filter_map(|r| r.task_type).max().map_or(0, |m| m + 1)
    }

    /// `count` unique-solution puzzles of side `side`, hole counts uniform in
    /// `holes_min..=holes_max`. Item `i` draws from its own stream, so the
    /// output does not depend on the worker count.
    pub fn generate_sudoku(
        side: usize,
        count: usize,
        holes_min: usize,
        holes_max: usize,
        seed: u64,
    ) -> Result<(Self, GenSummary)> {
        let n = SudokuGrid::box_side(side)?;
        if holes_min > holes_max {
            return Err(Error::Generation(format!("holes range {holes_min}..={holes_max} is empty")));
        }
        let made = par::map_range(count, |i| {
            let mut rng = stream_rng(seed, i);
            let holes = rng.gen_range(holes_min..=holes_max);
            generate_puzzle(n, holes, &mut rng)
        });
        let mut records = Vec::with_capacity(count);
        let (mut total, mut short) = (0usize, 0usize);
        for p in made {
            let p = p?;
            total += p.holes;
            short += usize::from(p.short);
            records.push(p.record);
        }
        let verified = par::map_slice(&records, |r| {
            let input = SudokuGrid::new(n, r.input.clone()).ok()?;
            let out = solve_sudoku(&input, 2).ok()?;
            Some(out.is_unique() && out.first.is_some_and(|s| s.cells() == r.solution.as_slice()))
        });
        let summary = GenSummary {
            count,
            mean_holes: if count == 0 { 0.0 } else { total as f64 / count as f64 },
            short,
            oracle_verified: verified.iter().all(|v| *v == Some(true)),
        };
        let ds = Dataset { kind: TaskKind::Sudoku, size: side, width: side, alphabet: side + 1, records };
        Ok((ds, summary))
    }

    /// Recolor scenes over `palette`, `examples_per_task` siblings per task id.
    pub fn generate_recolor(
        alphabet: usize,
        palette: &[usize],
        num_tasks: usize,
        examples_per_task: usize,
        seed: u64,
    ) -> Result<Self> {
        if let Some(&c) = palette.iter().find(|&&c| c >= alphabet) {
            return Err(Error::Generation(format!("palette color {c} outside alphabet of {alphabet}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = make_recolor_family(&mut rng, num_tasks, examples_per_task, palette)?;
        Ok(Dataset { kind: TaskKind::Recolor, size: RECOLOR_SIDE, width: RECOLOR_SIDE, alphabet, records })
    }

    fn validate_header(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset { line: 1, msg });
        if self.size == 0 || self.width == 0 || self.alphabet == 0 {
            return bad("size, width and alphabet must be positive".into());
        }
        if self.kind == TaskKind::Sudoku {
            SudokuGrid::box_side(self.size).map_err(|e| Error::Dataset { line: 1, msg: e.to_string() })?;
            if self.width != self.size || self.alphabet != self.size + 1 {
                return bad(format!(
                    "a size-{} sudoku needs width={} and alphabet={}",
                    self.size,
                    self.size,
                    self.size + 1
                ));
            }
        }
        Ok(())
    }

    /// Checks one record against the header and the task's invariants.
    pub fn validate_record(&self, rec: &TaskRecord) -> Result<()> {
        let cells = self.positions();
        if rec.input.len() != cells || rec.solution.len() != cells {
            return Err(Error::InvalidGrid(format!(
                "expected {cells} cells, got {} and {}",
                rec.input.len(),
                rec.solution.len()
            )));
        }
        if rec.width != self.width {
            return Err(Error::InvalidGrid(format!("record width {} vs dataset width {}", rec.width, self.width)));
        }
        if let Some(&c) = rec.input.iter().chain(&rec.solution).find(|&&c| c >= self.alphabet) {
            return Err(Error::UnknownSymbol { symbol: c, alphabet: self.alphabet });
        }
        match self.kind {
            TaskKind::Sudoku => {
                let input = SudokuGrid::from_side(self.size, rec.input.clone())?;
                let solution = SudokuGrid::from_side(self.size, rec.solution.clone())?;
                if !input.is_valid() {
                    return Err(Error::InvalidGrid("input repeats a digit in a unit".into()));
                }
                if !solution.is_solved() {
                    return Err(Error::InvalidGrid("solution is not a complete valid grid".into()));
                }
                if !input.agrees_with(&solution) {
                    return Err(Error::InvalidGrid("solution contradicts a given".into()));
                }
            }
            TaskKind::Recolor => {
                if recolor_rule(&rec.input)? != rec.solution {
                    return Err(Error::InvalidGrid("solution does not exchange the two square colors".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("size={} width={} alphabet={} kind={}\n", self.size, self.width, self.alphabet, self.kind);
        let csv = |cells: &[usize]| cells.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        for r in &self.records {
            s.push_str(&csv(&r.input));
            s.push('|');
            s.push_str(&csv(&r.solution));
            if let Some(t) = r.task_type {
                let _ = write!(s, "|task={t}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (_, header) = lines.next().ok_or(Error::Dataset { line: 1, msg: "empty file".into() })?;
        let mut ds = parse_header(header)?;
        ds.validate_header()?;
        for (line, l) in lines {
            if l.is_empty() {
                continue;
            }
            let rec = parse_record(l, ds.width).map_err(|msg| Error::Dataset { line, msg })?;
            ds.validate_record(&rec).map_err(|e| Error::Dataset { line, msg: e.to_string() })?;
            ds.records.push(rec);
        }
        Ok(ds)
    }
}

fn parse_header(header: &str) -> Result<Dataset> {
    let err = |msg: String| Error::Dataset { line: 1, msg };
    let (mut size, mut width, mut alphabet, mut kind) = (None, None, None, TaskKind::Sudoku);
    for field in header.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| err(format!("header field `{field}` is not key=value")))?;
        let num = || v.parse::<usize>().map_err(|_| err(format!("`{k}` must be an integer, got `{v}`")));
        match k {
            "size" => size = Some(num()?),
            "width" => width = Some(num()?),
            "alphabet" => alphabet = Some(num()?),
            "kind" => kind = v.parse().map_err(|e: Error| err(e.to_string()))?,
            other => return Err(err(format!("unknown header field `{other}`"))),
        }
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| err(format!("header lacks `{k}`")));
    Ok(Dataset {
        kind,
        size: need(size, "size")?,
        width: need(width, "width")?,
        alphabet: need(alphabet, "alphabet")?,
        records: Vec::new(),
    })
}

fn parse_cells(csv: &str) -> std::result::Result<Vec<usize>, String> {
    csv.split(',').map(|c| c.trim().parse::<usize>().map_err(|_| format!("bad cell `{c}`"))).collect()
}

fn parse_record(line: &str, width: usize) -> std::result::Result<TaskRecord, String> {
    let parts: Vec<&str> = line.split('|').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(format!("expected `input|solution[|task=id]`, found {} fields", parts.len()));
    }
    let task_type = match parts.get(2) {
        None => None,
        Some(t) => {
            let id = t.strip_prefix("task=").ok_or_else(|| format!("third field `{t}` is not task=<id>"))?;
            Some(id.parse().map_err(|_| format!("bad task id `{id}`"))?)
        }
    };
    Ok(TaskRecord { input: parse_cells(parts[0])?, solution: parse_cells(parts[1])?, task_type, width })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&fs::read_to_string(path)?)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, ds.to_text())?;
    Ok(())
}

fn digits81(field: &str) -> Option<Vec<usize>> {
    let f = field.trim();
    if f.chars().count() != 81 {
        return None;
    }
    f.chars()
        .map(|ch| match ch {
            '.' | '0' => Some(0),
            '1'..='9' => ch.to_digit(10).map(|d| d as usize),
            _ => None,
        })
        .collect()
}

/// Imports 9×9 puzzles written as 81-character digit strings (`.` or `0`
/// blank). A line may hold the puzzle alone or puzzle and solution among
/// comma-separated fields; lines without a puzzle field (e.g. CSV headers)
/// are skipped. Missing solutions are filled in by the oracle and must be
/// unique.
pub fn read_hrm81(text: &str) -> Result<Dataset> {
    let mut ds = Dataset { kind: TaskKind::Sudoku, size: 9, width: 9, alphabet: 10, records: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let grids: Vec<Vec<usize>> = line.split([',', '|', ' ', '\t']).filter_map(digits81).collect();
        let err = |msg: String| Error::Dataset { line: line_no, msg };
        let rec = match grids.as_slice() {
            [] => continue,
            [input] => {
                let g = SudokuGrid::new(3, input.clone()).map_err(|e| err(e.to_string()))?;
                let out = solve_sudoku(&g, 2).map_err(|e| err(e.to_string()))?;
                if !out.is_unique() {
                    return Err(err(format!("puzzle has {} solutions, expected exactly 1", out.count)));
                }
                let solution = out.first.expect("unique solution").into_cells();
                TaskRecord { input: input.clone(), solution, task_type: None, width: 9 }
            }
            [input, solution, ..] => {
                TaskRecord { input: input.clone(), solution: solution.clone(), task_type: None, width: 9 }
            }
        };
        ds.validate_record(&rec).map_err(|e| err(e.to_string()))?;
        ds.records.push(rec);
    }
    Ok(ds)
}
