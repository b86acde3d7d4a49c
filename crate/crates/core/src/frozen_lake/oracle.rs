use super::grid::{Action, CellKind, GridSpec};
use crate::error::{Error, Result};
use crate::mdp::{argmax, StateId, TransitionTable};

pub const DEFAULT_DISCOUNT: f64 = 0.9;
pub const CONVERGENCE_TOLERANCE: f64 = 1e-9;
/// Q-values closer than this count as tied.
const TIE_TOLERANCE: f64 = 1e-9;
const MAX_SWEEPS: usize = 100_000;

/// Reward for the transition that enters each kind of cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub gift: f64,
    pub hole: f64,
    pub step: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { gift: 1.0, hole: 0.0, step: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub values: Vec<f64>,
    /// One row per non-terminal cell; tied optimal actions share mass.
    pub table: TransitionTable,
    pub discount: f64,
    pub rewards: RewardSpec,
    pub sweeps: usize,
}

impl OraclePolicy {
    pub fn q_values(&self, spec: &GridSpec, cell: usize) -> [f64; 4] {
        q_values(spec, &self.values, cell, self.discount, &self.rewards)
    }

    pub fn row(&self, cell: usize) -> Result<&[f64]> {
        self.table.row(&StateId::Cell(cell))
    }

    pub fn greedy_action(&self, cell: usize) -> Result<Action> {
        Ok(Action::from_index(argmax(self.row(cell)?)).expect("four actions"))
    }

    /// Largest change one more sweep would make.
    pub fn fixed_point_residual(&self, spec: &GridSpec) -> f64 {
        let next = sweep(spec, &self.values, self.discount, &self.rewards);
        next.iter().zip(&self.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn q_values(spec: &GridSpec, v: &[f64], cell: usize, discount: f64, rewards: &RewardSpec) -> [f64; 4] {
    Action::ALL.map(|a| {
        let n = spec.step(cell, a);
        let r = match spec.kind(n) {
            CellKind::Gift => rewards.gift,
            CellKind::Hole => rewards.hole,
            _ => rewards.step,
        };
        r + discount * v[n]
    })
}

fn sweep(spec: &GridSpec, v: &[f64], discount: f64, rewards: &RewardSpec) -> Vec<f64> {
    (0..spec.cell_count())
        .map(|s| {
            if spec.kind(s).is_terminal() {
                0.0
            } else {
                q_values(spec, v, s, discount, rewards).into_iter().fold(f64::MIN, f64::max)
            }
        })
        .collect()
}

/// Synchronous value iteration to sup-norm change below 1e-9, then greedy
/// extraction.
pub fn value_iteration(spec: &GridSpec, discount: f64, rewards: RewardSpec) -> Result<OraclePolicy> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::Config(format!("discount={discount} not in (0, 1)")));
    }
    let mut v = vec![0.0; spec.cell_count()];
    let mut sweeps = 0;
    loop {
        let next = sweep(spec, &v, discount, &rewards);
        sweeps += 1;
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < CONVERGENCE_TOLERANCE || sweeps >= MAX_SWEEPS {
            break;
        }
    }
    let mut table = TransitionTable::new(Action::COUNT);
    for s in (0..spec.cell_count()).filter(|&s| !spec.kind(s).is_terminal()) {
        let q = q_values(spec, &v, s, discount, &rewards);
        let best = q.iter().copied().fold(f64::MIN, f64::max);
        let tied: Vec<bool> = q.iter().map(|&x| best - x <= TIE_TOLERANCE).collect();
        let k = tied.iter().filter(|&&t| t).count() as f64;
        table.insert(StateId::Cell(s), tied.iter().map(|&t| if t { 1.0 / k } else { 0.0 }).collect())?;
    }
    Ok(OraclePolicy { values: v, table, discount, rewards, sweeps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    Gift,
    Hole,
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(cell, action taken in it)`.
    pub steps: Vec<(usize, Action)>,
    pub terminal: Terminal,
}

impl Trajectory {
    /// Replays `actions` from the start, stopping early on a terminal cell.
    pub fn replay(spec: &GridSpec, actions: &[Action]) -> Self {
        let mut cell = spec.start();
        let mut steps = Vec::new();
        for &a in actions {
            steps.push((cell, a));
            cell = spec.step(cell, a);
            if spec.kind(cell).is_terminal() {
                break;
            }
        }
        Self { steps, terminal: terminal_of(spec, cell) }
    }

    /// Follows `choose` from the start for at most `truncation` steps.
    pub fn rollout(spec: &GridSpec, truncation: usize, mut choose: impl FnMut(usize) -> Result<Action>) -> Result<Self> {
        let mut cell = spec.start();
        let mut steps = Vec::new();
        for _ in 0..truncation {
            let a = choose(cell)?;
            steps.push((cell, a));
            cell = spec.step(cell, a);
            if spec.kind(cell).is_terminal() {
                break;
            }
        }
        Ok(Self { steps, terminal: terminal_of(spec, cell) })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn cells(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.0).collect()
    }

    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.1.index()).collect()
    }

    /// Every cell visited, the final one included.
    pub fn visited(&self, spec: &GridSpec) -> Vec<usize> {
        let mut cells = self.cells();
        if let Some(&(c, a)) = self.steps.last() {
            cells.push(spec.step(c, a));
        }
        cells
    }
}

fn terminal_of(spec: &GridSpec, cell: usize) -> Terminal {
    match spec.kind(cell) {
        CellKind::Gift => Terminal::Gift,
        CellKind::Hole => Terminal::Hole,
        _ => Terminal::Truncated,
    }
}

pub const DEFAULT_TRUNCATION: usize = 32;

/// The oracle's greedy rollout and the annotated detour.
pub fn make_trajectories(spec: &GridSpec, oracle: &OraclePolicy) -> Result<(Trajectory, Trajectory)> {
    let optimal = Trajectory::rollout(spec, DEFAULT_TRUNCATION, |c| oracle.greedy_action(c))?;
    let detour = spec.suboptimal().ok_or(Error::SuboptimalPathRequired)?;
    let suboptimal = Trajectory::replay(spec, detour);
    for (name, t) in [("optimal", &optimal), ("suboptimal", &suboptimal)] {
        if t.terminal != Terminal::Gift || (name == "suboptimal" && t.len() != detour.len()) {
            return Err(Error::InvalidSequence(format!("{name} trajectory does not end at the gift")));
        }
    }
    Ok((optimal, suboptimal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frozen_lake::grid::{parse_grid, shipped_map};

    #[test]
    fn chain_value_is_discount_power() {
        let g = parse_grid("SFFG").unwrap();
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        // d = 3 moves to the gift
        assert!((o.values[0] - 0.9f64.powi(2)).abs() < 1e-9);
        let g = parse_grid("SG").unwrap();
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        assert!((o.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_cells_have_zero_value_and_uniform_rows() {
        let g = parse_grid("SFH\nFGH\nHHF").unwrap();
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        assert_eq!(o.values[8], 0.0);
        assert_eq!(o.row(8).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn ties_split_uniformly() {
        let g = parse_grid("SF\nFG").unwrap();
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        assert_eq!(o.row(0).unwrap(), &[0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn shipped_oracle_converges_and_follows_bfs() {
        let g = shipped_map();
        let o = value_iteration(&g, DEFAULT_DISCOUNT, RewardSpec::default()).unwrap();
        assert!(o.sweeps < 1000);
        assert!(o.fixed_point_residual(&g) < 1e-9);
        let (opt, sub) = make_trajectories(&g, &o).unwrap();
        assert_eq!(opt.visited(&g), g.shortest_path().unwrap());
        assert!(opt.len() < sub.len());
        assert_eq!((opt.terminal, sub.terminal), (Terminal::Gift, Terminal::Gift));
        for (c, a) in &opt.steps {
            assert_eq!(o.row(*c).unwrap()[a.index()], 1.0);
        }
    }

    #[test]
    fn missing_detour_is_reported() {
        let g = parse_grid("SFFG").unwrap();
        let o = value_iteration(&g, 0.9, RewardSpec::default()).unwrap();
        assert!(matches!(make_trajectories(&g, &o), Err(Error::SuboptimalPathRequired)));
    }

    #[test]
    fn invalid_discount() {
        let g = parse_grid("SG").unwrap();
        assert!(value_iteration(&g, 1.0, RewardSpec::default()).is_err());
    }
}
