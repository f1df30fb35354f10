//! Built-in environments and scripted demonstrators.
//!
//! The counterexample is a three-state episodic MDP. From `s0` the action
//! `a_r` ends the episode and `a_l` moves to `s_l`, where both `a_1` and
//! `a_2` end it. Its target reward (0 everywhere except `-1` for `a_1` and
//! `+1` for `a_2` at `s_l`) is a reconstruction: it is the only assignment
//! with zero rewards at `s0` under which the reward-phasing optimum switches
//! from `a_r` to `a_l` exactly at `beta = 0.5` (the right branch is worth
//! `2 (1 - beta)`, the left `R_max(s_l) = 1`) and the temporal best response
//! switches there too (left worth `beta * (beta * r_2 + (1 - beta) * r_1)`,
//! zero at 0.5 only when `r_1 = -r_2`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{RewardTable, StochasticPolicy, TabularMdp};

pub const S0: usize = 0;
pub const S_LEFT: usize = 1;
pub const TERMINAL: usize = 2;
pub const A_RIGHT: usize = 0;
pub const A_LEFT: usize = 1;
pub const A_1: usize = 0;
pub const A_2: usize = 1;

/// `(mdp, target reward, dense reward, demonstrator)` of the counterexample.
pub fn build_counterexample() -> (TabularMdp, RewardTable, RewardTable, StochasticPolicy) {
    let mut transition = vec![0.0; 3 * 2 * 3];
    let mut go = |s: usize, a: usize, next: usize| transition[(s * 2 + a) * 3 + next] = 1.0;
    go(S0, A_RIGHT, TERMINAL);
    go(S0, A_LEFT, S_LEFT);
    go(S_LEFT, A_1, TERMINAL);
    go(S_LEFT, A_2, TERMINAL);
    go(TERMINAL, 0, TERMINAL);
    go(TERMINAL, 1, TERMINAL);
    let mdp = TabularMdp::new(3, 2, transition, 1.0, &[TERMINAL], vec![1.0, 0.0, 0.0]).expect("valid counterexample");
    let target = RewardTable::from_rows(vec![vec![0.0, 0.0], vec![-1.0, 1.0], vec![0.0, 0.0]]).expect("finite");
    let dense = RewardTable::from_rows(vec![vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).expect("finite");
    let demo = StochasticPolicy::deterministic(2, &[A_RIGHT, A_1, 0]).expect("valid actions");
    (mdp, target, dense, demo)
}

/// `(column, row)`, row 0 at the top.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseReward {
    /// Paid on the transition that completes the task.
    pub goal_reward: f64,
    /// Paid on every step.
    #[serde(default)]
    pub step_reward: f64,
}

impl Default for SparseReward {
    fn default() -> Self {
        Self { goal_reward: 1.0, step_reward: 0.0 }
    }
}

fn default_gamma() -> f64 {
    0.95
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<Cell>,
    /// Absorbing failure cells.
    #[serde(default)]
    pub hazards: Vec<Cell>,
    #[serde(default)]
    pub flag_cell: Option<Cell>,
    /// Start cell; also where the flag is returned.
    #[serde(default)]
    pub base_cell: Option<Cell>,
    #[serde(default)]
    pub goal_cell: Option<Cell>,
    /// Chance that a uniformly random move replaces the chosen one.
    #[serde(default)]
    pub slip_probability: f64,
    #[serde(default)]
    pub reward_structure: SparseReward,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Chance the flag-grid demonstrator acts uniformly at random.
    #[serde(default = "default_noise")]
    pub demo_noise: f64,
}

impl GridWorldSpec {
    /// 7x7 fetch-and-return grid; a wall down the middle column leaves gaps
    /// only in the top and bottom rows, and the flag sits in the far corner.
    pub fn default_flag_grid() -> Self {
        Self {
            width: 7,
            height: 7,
            walls: (1..6).map(|y| (3, y)).collect(),
            hazards: vec![],
            flag_cell: Some((6, 0)),
            base_cell: Some((0, 6)),
            goal_cell: None,
            slip_probability: 0.0,
            reward_structure: SparseReward::default(),
            gamma: default_gamma(),
            demo_noise: default_noise(),
        }
    }

    /// Two-row corridor above a strip of hazards.
    pub fn default_cliff_slide() -> Self {
        Self {
            width: 7,
            height: 2,
            walls: vec![],
            hazards: (1..6).map(|x| (x, 1)).collect(),
            flag_cell: None,
            base_cell: Some((0, 1)),
            goal_cell: Some((6, 1)),
            slip_probability: 0.0,
            reward_structure: SparseReward::default(),
            gamma: default_gamma(),
            demo_noise: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if !(0.0..1.0).contains(&self.slip_probability) {
            return bad(format!("slip_probability must lie in [0, 1), got {}", self.slip_probability));
        }
        if !(0.0..=1.0).contains(&self.demo_noise) {
            return bad(format!("demo_noise must lie in [0, 1], got {}", self.demo_noise));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        let rs = self.reward_structure;
        if !rs.goal_reward.is_finite() || !rs.step_reward.is_finite() {
            return bad("rewards must be finite".into());
        }
        let inside = |c: &Cell| c.0 < self.width && c.1 < self.height;
        for &w in &self.walls {
            if !inside(&w) {
                return bad(format!("wall {w:?} outside the grid"));
            }
        }
        let named = [("flag_cell", self.flag_cell), ("base_cell", self.base_cell), ("goal_cell", self.goal_cell)];
        for (name, cell) in named.iter().filter_map(|(n, c)| c.map(|c| (n, c))) {
            if !inside(&cell) {
                return bad(format!("{name} {cell:?} outside the grid"));
            }
            if self.walls.contains(&cell) {
                return bad(format!("{name} {cell:?} is a wall"));
            }
            if self.hazards.contains(&cell) {
                return bad(format!("{name} {cell:?} is a hazard"));
            }
        }
        for &h in &self.hazards {
            if !inside(&h) || self.walls.contains(&h) {
                return bad(format!("hazard {h:?} outside the grid or on a wall"));
            }
        }
        Ok(())
    }
}

const MOVES: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
const N_MOVES: usize = MOVES.len();

/// Free (non-wall) cells in row-major order and their lookup table.
struct Layout {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    index: Vec<Option<usize>>,
}

impl Layout {
    fn new(spec: &GridWorldSpec) -> Self {
        let mut cells = Vec::new();
        let mut index = vec![None; spec.width * spec.height];
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !spec.walls.contains(&(x, y)) {
                    index[y * spec.width + x] = Some(cells.len());
                    cells.push((x, y));
                }
            }
        }
        Self { width: spec.width, height: spec.height, cells, index }
    }

    fn id(&self, cell: Cell) -> usize {
        self.index[cell.1 * self.width + cell.0].expect("free cell")
    }

    /// Free cell reached by a move; bumping into a wall or edge stays put.
    fn step(&self, from: usize, mv: usize) -> usize {
        let (x, y) = self.cells[from];
        let (dx, dy) = MOVES[mv];
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            return from;
        }
        self.index[ny as usize * self.width + nx as usize].unwrap_or(from)
    }

    /// Distribution over moves actually executed when `chosen` is intended.
    fn executed(chosen: usize, slip: f64) -> [f64; N_MOVES] {
        let mut p = [slip / N_MOVES as f64; N_MOVES];
        p[chosen] += 1.0 - slip;
        p
    }

    fn on_edge(&self, cell: usize) -> bool {
        let (x, y) = self.cells[cell];
        x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height
    }

    /// Cheapest cost-to-go to `target`, where entering a cell costs `cost(cell)`
    /// and cells in `blocked` cannot be entered.
    fn cost_to_go(&self, target: usize, blocked: &[bool], cost: impl Fn(usize) -> f64) -> Vec<f64> {
        let n = self.cells.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[target] = 0.0;
        loop {
            let mut changed = false;
            for c in 0..n {
                if c == target || blocked[c] {
                    continue;
                }
                for mv in 0..N_MOVES {
                    let next = self.step(c, mv);
                    if next == c || blocked[next] {
                        continue;
                    }
                    let candidate = cost(next) + dist[next];
                    if candidate < dist[c] {
                        dist[c] = candidate;
                        changed = true;
                    }
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    /// Move towards `target` along `dist`, trying moves in `order`.
    fn best_move(&self, cell: usize, dist: &[f64], blocked: &[bool], cost: &impl Fn(usize) -> f64, order: &[usize]) -> usize {
        let mut best = (f64::INFINITY, order[0]);
        for &mv in order {
            let next = self.step(cell, mv);
            if next == cell || blocked[next] {
                continue;
            }
            let value = cost(next) + dist[next];
            if value < best.0 {
                best = (value, mv);
            }
        }
        best.1
    }
}

fn move_order(rng_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..N_MOVES).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    order
}

fn noisy(one_hot_moves: &[usize], noise: f64) -> Result<StochasticPolicy> {
    let mut probs = Vec::with_capacity(one_hot_moves.len() * N_MOVES);
    for &mv in one_hot_moves {
        let mut row = [noise / N_MOVES as f64; N_MOVES];
        row[mv] += 1.0 - noise;
        probs.extend(row);
    }
    StochasticPolicy::new(one_hot_moves.len(), N_MOVES, probs)
}

/// Fetch the flag and bring it back to base.
///
/// State `cell + has_flag * n_free_cells` over free cells in row-major
/// order; arriving at the base while carrying the flag ends the episode and
/// pays `goal_reward` (stored as its expectation over the slip). The
/// demonstrator hugs the grid edge (interior cells cost three times as much
/// to enter), so it completes the task on a longer-than-shortest route, and
/// acts uniformly at random with probability `demo_noise`. `rng_seed` fixes
/// the demonstrator's tie-breaking between equally good moves.
pub fn build_flag_grid(spec: &GridWorldSpec, rng_seed: u64) -> Result<(TabularMdp, RewardTable, StochasticPolicy)> {
    spec.validate()?;
    let (Some(flag), Some(base)) = (spec.flag_cell, spec.base_cell) else {
        return Err(Error::InvalidSpec("flag grid needs flag_cell and base_cell".into()));
    };
    if flag == base {
        return Err(Error::InvalidSpec("flag_cell and base_cell must differ".into()));
    }
    let layout = Layout::new(spec);
    let k = layout.cells.len();
    let n = 2 * k;
    let flag_id = layout.id(flag);
    let base_id = layout.id(base);
    let hazard: Vec<bool> = layout.cells.iter().map(|c| spec.hazards.contains(c)).collect();
    let done = k + base_id;
    let is_terminal = |s: usize| s == done || hazard[s % k];
    let mut terminal: Vec<usize> = (0..n).filter(|&s| is_terminal(s)).collect();
    terminal.sort_unstable();

    let mut transition = vec![0.0; n * N_MOVES * n];
    let mut reward = RewardTable::zeros(n, N_MOVES);
    let rs = spec.reward_structure;
    for s in 0..n {
        for a in 0..N_MOVES {
            let row = &mut transition[(s * N_MOVES + a) * n..(s * N_MOVES + a + 1) * n];
            if is_terminal(s) {
                row[s] = 1.0;
                continue;
            }
            let (cell, carrying) = (s % k, s >= k);
            for (mv, p) in Layout::executed(a, spec.slip_probability).into_iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let next_cell = layout.step(cell, mv);
                let next = if carrying || next_cell == flag_id { k + next_cell } else { next_cell };
                row[next] += p;
            }
            reward.set(s, a, rs.step_reward + rs.goal_reward * row[done]);
        }
    }
    let mut initial = vec![0.0; n];
    initial[base_id] = 1.0;
    let mdp = TabularMdp::new(n, N_MOVES, transition, spec.gamma, &terminal, initial)?;

    let cost = |c: usize| if layout.on_edge(c) { 1.0 } else { 3.0 };
    let to_flag = layout.cost_to_go(flag_id, &hazard, cost);
    let to_base = layout.cost_to_go(base_id, &hazard, cost);
    if !to_flag[base_id].is_finite() {
        return Err(Error::InvalidSpec("flag is unreachable from base".into()));
    }
    let order = move_order(rng_seed);
    let moves: Vec<usize> = (0..n)
        .map(|s| {
            let (cell, carrying) = (s % k, s >= k);
            if is_terminal(s) {
                return 0;
            }
            let dist = if carrying { &to_base } else { &to_flag };
            layout.best_move(cell, dist, &hazard, &cost, &order)
        })
        .collect();
    Ok((mdp, reward, noisy(&moves, spec.demo_noise)?))
}

/// Walk from base to goal past absorbing hazards.
///
/// State = free cell index. Hazards and the goal are terminal; entering the
/// goal pays `goal_reward`, entering a hazard ends the episode with nothing.
/// The demonstrator follows a shortest hazard-free path (ties broken by
/// `rng_seed`) and acts at random with probability `demo_noise`.
pub fn build_cliff_slide(spec: &GridWorldSpec, rng_seed: u64) -> Result<(TabularMdp, RewardTable, StochasticPolicy)> {
    spec.validate()?;
    if spec.hazards.is_empty() {
        return Err(Error::InvalidSpec("cliff slide needs at least one hazard".into()));
    }
    let (Some(goal), Some(base)) = (spec.goal_cell, spec.base_cell) else {
        return Err(Error::InvalidSpec("cliff slide needs goal_cell and base_cell".into()));
    };
    if goal == base {
        return Err(Error::InvalidSpec("goal_cell and base_cell must differ".into()));
    }
    let layout = Layout::new(spec);
    let n = layout.cells.len();
    let goal_id = layout.id(goal);
    let base_id = layout.id(base);
    let hazard: Vec<bool> = layout.cells.iter().map(|c| spec.hazards.contains(c)).collect();
    let is_terminal = |s: usize| s == goal_id || hazard[s];
    let terminal: Vec<usize> = (0..n).filter(|&s| is_terminal(s)).collect();

    let mut transition = vec![0.0; n * N_MOVES * n];
    let mut reward = RewardTable::zeros(n, N_MOVES);
    let rs = spec.reward_structure;
    for s in 0..n {
        for a in 0..N_MOVES {
            let row = &mut transition[(s * N_MOVES + a) * n..(s * N_MOVES + a + 1) * n];
            if is_terminal(s) {
                row[s] = 1.0;
                continue;
            }
            for (mv, p) in Layout::executed(a, spec.slip_probability).into_iter().enumerate() {
                row[layout.step(s, mv)] += p;
            }
            reward.set(s, a, rs.step_reward + rs.goal_reward * row[goal_id]);
        }
    }
    let mut initial = vec![0.0; n];
    initial[base_id] = 1.0;
    let mdp = TabularMdp::new(n, N_MOVES, transition, spec.gamma, &terminal, initial)?;

    let cost = |_: usize| 1.0;
    let to_goal = layout.cost_to_go(goal_id, &hazard, cost);
    if !to_goal[base_id].is_finite() {
        return Err(Error::InvalidSpec("goal is unreachable from base without crossing a hazard".into()));
    }
    let order = move_order(rng_seed);
    let moves: Vec<usize> = (0..n)
        .map(|s| if is_terminal(s) { 0 } else { layout.best_move(s, &to_goal, &hazard, &cost, &order) })
        .collect();
    Ok((mdp, reward, noisy(&moves, spec.demo_noise)?))
}

/// A built environment with everything a phasing run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub name: String,
    pub mdp: TabularMdp,
    pub target_reward: RewardTable,
    /// Hand-specified dense reward, when the environment has one.
    pub dense_reward: Option<RewardTable>,
    pub demo: StochasticPolicy,
    /// States whose entry counts as success.
    pub goal_states: Vec<usize>,
}

impl Environment {
    pub fn counterexample() -> Self {
        let (mdp, target_reward, dense, demo) = build_counterexample();
        Self {
            name: "counterexample".into(),
            mdp,
            target_reward,
            dense_reward: Some(dense),
            demo,
            goal_states: vec![TERMINAL],
        }
    }

    pub fn flag_grid(spec: &GridWorldSpec, rng_seed: u64) -> Result<Self> {
        let (mdp, target_reward, demo) = build_flag_grid(spec, rng_seed)?;
        let k = mdp.n_states() / 2;
        let base = Layout::new(spec).id(spec.base_cell.expect("validated"));
        Ok(Self { name: "flag_grid".into(), mdp, target_reward, dense_reward: None, demo, goal_states: vec![k + base] })
    }

    pub fn cliff_slide(spec: &GridWorldSpec, rng_seed: u64) -> Result<Self> {
        let (mdp, target_reward, demo) = build_cliff_slide(spec, rng_seed)?;
        let goal = Layout::new(spec).id(spec.goal_cell.expect("validated"));
        Ok(Self { name: "cliff_slide".into(), mdp, target_reward, dense_reward: None, demo, goal_states: vec![goal] })
    }

    /// Terminal states that are not goals.
    pub fn failure_states(&self) -> Vec<usize> {
        self.mdp.terminal_states().into_iter().filter(|s| !self.goal_states.contains(s)).collect()
    }
}
