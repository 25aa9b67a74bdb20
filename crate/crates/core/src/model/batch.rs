use crate::error::{Error, Result};
use crate::tasks::TaskRecord;

/// A stack of same-geometry problems as symbol-slot ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub positions: usize,
    /// Symbol slots `K` of the data alphabet.
    pub symbols: usize,
    /// Row length used to derive 2D coordinates for rotary encodings.
    pub grid_width: usize,
    /// `[size, positions]`
    pub inputs: Vec<usize>,
    pub targets: Option<Vec<usize>>,
    pub task_types: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(
        size: usize,
        positions: usize,
        symbols: usize,
        grid_width: usize,
        inputs: Vec<usize>,
        targets: Option<Vec<usize>>,
        task_types: Option<Vec<usize>>,
    ) -> Result<Self> {
        let cells = size * positions;
        if size == 0 || positions == 0 || symbols == 0 {
            return Err(Error::Shape("batch needs at least one problem, position and symbol".into()));
        }
        if inputs.len() != cells || targets.as_ref().is_some_and(|t| t.len() != cells) {
            return Err(Error::Shape(format!("batch of {size}×{positions} cells has mismatched arrays")));
        }
        if task_types.as_ref().is_some_and(|t| t.len() != size) {
            return Err(Error::Shape("one task type per problem".into()));
        }
        let all = inputs.iter().chain(targets.iter().flatten());
        if let Some(&bad) = all.into_iter().find(|&&c| c >= symbols) {
            return Err(Error::UnknownSymbol { symbol: bad, alphabet: symbols });
        }
        Ok(Self { size, positions, symbols, grid_width, inputs, targets, task_types })
    }

    /// Stacks records that share one geometry. Task ids are kept only if
    /// every record carries one.
    pub fn from_records(records: &[&TaskRecord], symbols: usize) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (positions, grid_width) = (first.input.len(), first.width);
        if records.iter().any(|r| r.input.len() != positions || r.solution.len() != positions || r.width != grid_width) {
            return Err(Error::Shape("records in one batch must share a geometry".into()));
        }
        let inputs = records.iter().flat_map(|r| r.input.iter().copied()).collect();
        let targets = records.iter().flat_map(|r| r.solution.iter().copied()).collect();
        let task_types = records.iter().map(|r| r.task_type).collect::<Option<Vec<_>>>();
        Self::new(records.len(), positions, symbols, grid_width, inputs, Some(targets), task_types)
    }

    pub fn cells(&self) -> usize {
        self.size * self.positions
    }
}
