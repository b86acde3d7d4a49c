use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Start,
    Frozen,
    Hole,
    Gift,
}

impl CellKind {
    fn symbol(self) -> char {
        match self {
            CellKind::Start => 'S',
            CellKind::Frozen => 'F',
            CellKind::Hole => 'H',
            CellKind::Gift => 'G',
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CellKind::Hole | CellKind::Gift)
    }
}

/// Moves in action-index order: Up = 0, Down = 1, Left = 2, Right = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Action::Up => 'U',
            Action::Down => 'D',
            Action::Left => 'L',
            Action::Right => 'R',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.letter() == c.to_ascii_uppercase())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Deterministic gridworld. Cells are indexed row-major; moving into a wall
/// leaves the agent in place and holes and the gift are absorbing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    rows: usize,
    cols: usize,
    cells: Vec<CellKind>,
    start: usize,
    gift: usize,
    suboptimal: Option<Vec<Action>>,
}

impl GridSpec {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn gift(&self) -> usize {
        self.gift
    }

    pub fn kind(&self, cell: usize) -> CellKind {
        self.cells[cell]
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.cols, cell % self.cols)
    }

    pub fn holes(&self) -> usize {
        self.cells.iter().filter(|c| **c == CellKind::Hole).count()
    }

    pub fn suboptimal(&self) -> Option<&[Action]> {
        self.suboptimal.as_deref()
    }

    pub fn with_suboptimal(mut self, path: Vec<Action>) -> Self {
        self.suboptimal = Some(path);
        self
    }

    pub fn step(&self, cell: usize, action: Action) -> usize {
        if self.cells[cell].is_terminal() {
            return cell;
        }
        let (r, c) = self.coords(cell);
        let (r, c) = match action {
            Action::Up if r > 0 => (r - 1, c),
            Action::Down if r + 1 < self.rows => (r + 1, c),
            Action::Left if c > 0 => (r, c - 1),
            Action::Right if c + 1 < self.cols => (r, c + 1),
            _ => (r, c),
        };
        r * self.cols + c
    }

    /// `next[cell][action]` for every cell.
    pub fn dynamics(&self) -> Arc<Vec<Vec<usize>>> {
        Arc::new(
            (0..self.cell_count())
                .map(|s| Action::ALL.iter().map(|&a| self.step(s, a)).collect())
                .collect(),
        )
    }

    /// Breadth-first shortest path from start to gift (cells, start included).
    /// Neighbours are expanded in action order.
    pub fn shortest_path(&self) -> Option<Vec<usize>> {
        let mut parent = vec![usize::MAX; self.cell_count()];
        parent[self.start] = self.start;
        let mut queue = VecDeque::from([self.start]);
        while let Some(s) = queue.pop_front() {
            if s == self.gift {
                let mut path = vec![s];
                let mut cur = s;
                while cur != self.start {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            if self.cells[s].is_terminal() {
                continue;
            }
            for a in Action::ALL {
                let n = self.step(s, a);
                if parent[n] == usize::MAX {
                    parent[n] = s;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Non-terminal cells reachable from the start, ascending.
    pub fn reachable_nonterminal(&self) -> Vec<usize> {
        let mut seen = vec![false; self.cell_count()];
        seen[self.start] = true;
        let mut stack = vec![self.start];
        while let Some(s) = stack.pop() {
            if self.cells[s].is_terminal() {
                continue;
            }
            for a in Action::ALL {
                let n = self.step(s, a);
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        (0..self.cell_count()).filter(|&s| seen[s] && !self.cells[s].is_terminal()).collect()
    }

    pub fn to_ascii(&self) -> String {
        self.cells
            .chunks(self.cols)
            .map(|row| row.iter().map(|c| c.symbol()).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_grid(s)
    }
}

pub fn parse_grid(ascii: &str) -> Result<GridSpec> {
    let lines: Vec<&str> = ascii.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::GridParse("empty map".into()));
    }
    let cols = lines[0].chars().count();
    let mut cells = Vec::new();
    let (mut start, mut gift) = (None, None);
    for (r, line) in lines.iter().enumerate() {
        let got = line.chars().count();
        if got != cols {
            return Err(Error::RaggedRows { row: r, got, expected: cols });
        }
        for ch in line.chars() {
            let kind = match ch {
                'S' => CellKind::Start,
                'F' => CellKind::Frozen,
                'H' => CellKind::Hole,
                'G' => CellKind::Gift,
                other => return Err(Error::GridParse(format!("unexpected character {other:?}"))),
            };
            let slot = match kind {
                CellKind::Start => Some((&mut start, Error::MultipleStart)),
                CellKind::Gift => Some((&mut gift, Error::MultipleGift)),
                _ => None,
            };
            if let Some((slot, err)) = slot {
                if slot.replace(cells.len()).is_some() {
                    return Err(err);
                }
            }
            cells.push(kind);
        }
    }
    let start = start.ok_or_else(|| Error::GridParse("no start cell".into()))?;
    let gift = gift.ok_or_else(|| Error::GridParse("no gift cell".into()))?;
    let spec = GridSpec { rows: lines.len(), cols, cells, start, gift, suboptimal: None };
    if spec.shortest_path().is_none() {
        return Err(Error::NoPath);
    }
    Ok(spec)
}

/// Sidecar path annotation: action letters (`U D L R`), whitespace ignored,
/// `#` starts a comment line.
pub fn parse_path(text: &str) -> Result<Vec<Action>> {
    let mut path = Vec::new();
    for line in text.lines().filter(|l| !l.trim_start().starts_with('#')) {
        for ch in line.chars().filter(|c| !c.is_whitespace()) {
            path.push(
                Action::from_letter(ch)
                    .ok_or_else(|| Error::GridParse(format!("unexpected path letter {ch:?}")))?,
            );
        }
    }
    if path.is_empty() {
        return Err(Error::SuboptimalPathRequired);
    }
    Ok(path)
}

pub const SHIPPED_MAP: &str = include_str!("../../assets/lake_4x5.txt");
pub const SHIPPED_PATH: &str = include_str!("../../assets/lake_4x5.path");

/// The 4x5 map with its annotated detour.
pub fn shipped_map() -> GridSpec {
    parse_grid(SHIPPED_MAP)
        .and_then(|g| Ok(g.with_suboptimal(parse_path(SHIPPED_PATH)?)))
        .expect("shipped map is valid")
}

/// Reads `<map>` and, when present, the sidecar `<map stem>.path`.
pub fn load_map(path: &std::path::Path) -> Result<GridSpec> {
    let spec = parse_grid(&std::fs::read_to_string(path)?)?;
    let sidecar = path.with_extension("path");
    if sidecar.exists() {
        return Ok(spec.with_suboptimal(parse_path(&std::fs::read_to_string(sidecar)?)?));
    }
    Ok(spec)
}
