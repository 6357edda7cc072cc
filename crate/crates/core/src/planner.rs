//! LQR-RRT* kinodynamic planning and LQR shortcut smoothing.
//!
//! Distances are LQR cost-to-go values from a Riccati pass linearized about the
//! query state; edges are closed-loop LQR rollouts through the nonlinear model.

use nalgebra::{DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collision::{default_resolution, trajectory_free, World};
use crate::dynamics::{state_error, InertialParams, State, STATE_DIM};
use crate::error::{Error, PlannerStats, Result};
use crate::lqr::{
    riccati_backward, rollout_policy, steering_solution, steering_solution_horizon, trajectory_cost, LqrPolicy,
    QuadraticCost, SteeringConfig, ValueFunction,
};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Near-radius constant.
    pub gamma: f64,
    pub max_iterations: usize,
    pub steering: SteeringConfig,
    /// Value-metric threshold for reaching the goal.
    pub goal_tolerance: f64,
    pub rng_seed: u64,
    /// Probability of sampling the goal itself.
    pub goal_bias: f64,
    /// Per-axis bound on sampled velocity (m/s).
    pub velocity_bound: f64,
    /// Per-axis bound on sampled body rates (rad/s).
    pub rate_bound: f64,
    /// Largest state error between an edge end and the node it connects to.
    pub connect_tolerance: f64,
    /// Collision interpolation spacing; `None` uses the world default.
    pub resolution: Option<f64>,
    /// Terminal weight multiplier for shortcut interpolation.
    pub shortcut_terminal_scale: f64,
    /// Goal-directed extensions steer over this many steering horizons.
    pub goal_horizon_factor: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            gamma: 60.0,
            max_iterations: 2000,
            steering: SteeringConfig::default(),
            goal_tolerance: 15.0,
            rng_seed: 0,
            goal_bias: 0.2,
            velocity_bound: 0.1,
            rate_bound: 0.05,
            connect_tolerance: 0.05,
            resolution: None,
            shortcut_terminal_scale: 1000.0,
            goal_horizon_factor: 5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("goal_tolerance", self.goal_tolerance),
            ("connect_tolerance", self.connect_tolerance),
            ("steering dt", self.steering.dt),
            ("shortcut_terminal_scale", self.shortcut_terminal_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 || self.steering.horizon == 0 || self.goal_horizon_factor == 0 {
            return Err(Error::InvalidArgument("iteration and horizon counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.goal_bias) {
            return Err(Error::InvalidArgument(format!("goal_bias must be in [0, 1), got {}", self.goal_bias)));
        }
        if !(self.velocity_bound >= 0.0 && self.rate_bound >= 0.0) {
            return Err(Error::InvalidArgument("sampling bounds must be non-negative".into()));
        }
        if self.steering.cost.state_dim() != STATE_DIM {
            return Err(Error::DimensionMismatch("steering cost must be 13-dimensional".into()));
        }
        Ok(())
    }

    fn resolution_for(&self, world: &World) -> f64 {
        self.resolution.unwrap_or_else(|| default_resolution(world))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub state: State,
    pub cost_to_come: f64,
    pub parent: Option<usize>,
    /// Rollout from the parent's state to `state`; a single state at the root.
    pub edge: Trajectory,
    pub edge_cost: f64,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub root: usize,
}

fn dv(x: &nalgebra::SVector<f64, STATE_DIM>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Stage-cost sum of an edge, measured against its own end state.
pub fn edge_cost(edge: &Trajectory, cost: &QuadraticCost) -> f64 {
    trajectory_cost(edge, edge.final_state(), cost)
}

impl Tree {
    pub fn new(root: State, dt: f64) -> Self {
        Self {
            nodes: vec![Node {
                state: root,
                cost_to_come: 0.0,
                parent: None,
                edge: Trajectory::single(root, dt),
                edge_cost: 0.0,
                children: Vec::new(),
            }],
            root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn add(&mut self, parent: usize, edge: Trajectory, edge_cost: f64) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            state: *edge.final_state(),
            cost_to_come: self.nodes[parent].cost_to_come + edge_cost,
            parent: Some(parent),
            edge,
            edge_cost,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn is_ancestor(&self, ancestor: usize, mut node: usize) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            match self.nodes[node].parent {
                Some(p) => node = p,
                None => return false,
            }
        }
    }

    /// Node ids of the subtree rooted at `id`, parents before children.
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.nodes[out[i]].children);
            i += 1;
        }
        out
    }

    /// Concatenated edges from the root to `id`.
    pub fn path_to(&self, id: usize) -> Trajectory {
        let mut chain = vec![id];
        while let Some(p) = self.nodes[*chain.last().unwrap()].parent {
            chain.push(p);
        }
        chain.reverse();
        let mut traj = self.nodes[chain[0]].edge.clone();
        traj.t0 = 0.0;
        for &n in &chain[1..] {
            traj.append(&self.nodes[n].edge);
        }
        traj
    }

    /// Largest gap between stored costs-to-come and costs recomputed from the
    /// edges, or `None` if the parent links are broken or cyclic.
    pub fn cost_discrepancy(&self, cost: &QuadraticCost) -> Option<f64> {
        let mut recomputed = vec![f64::NAN; self.nodes.len()];
        let mut worst: f64 = 0.0;
        let order = self.subtree(self.root);
        if order.len() != self.nodes.len() {
            return None;
        }
        for id in order {
            let node = &self.nodes[id];
            let value = match node.parent {
                None => 0.0,
                Some(p) => {
                    if recomputed[p].is_nan() || self.nodes[p].children.iter().filter(|&&c| c == id).count() != 1 {
                        return None;
                    }
                    recomputed[p] + edge_cost(&node.edge, cost)
                }
            };
            recomputed[id] = value;
            worst = worst.max((value - node.cost_to_come).abs());
        }
        Some(worst)
    }
}

/// Uniform random state: position in the workspace box, velocity and rates in
/// symmetric boxes, attitude uniform on the unit 3-sphere.
pub fn sample_state<R: Rng>(world: &World, cfg: &PlannerConfig, rng: &mut R) -> State {
    let b = &world.bounds;
    let r = Vector3::from_fn(|i, _| rng.random_range(b.min[i]..=b.max[i]));
    let v = Vector3::from_fn(|_, _| sym(rng, cfg.velocity_bound));
    let q = loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = q.norm();
        if n > 1e-9 {
            break q / n;
        }
    };
    let w = Vector3::from_fn(|_, _| sym(rng, cfg.rate_bound));
    State { r, v, q, w }
}

fn sym<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Node minimizing the value metric to `x_rand`, lowest id on ties.
pub fn nearest(tree: &Tree, x_rand: &State, vf: &ValueFunction) -> Result<usize> {
    if tree.is_empty() {
        return Err(Error::InvalidArgument("nearest query on an empty tree".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (id, node) in tree.nodes.iter().enumerate() {
        let m = vf.metric(0, &dv(&state_error(&node.state, x_rand)))?;
        if m < best.0 {
            best = (m, id);
        }
    }
    Ok(best.1)
}

fn nearest_excluding(tree: &Tree, x_rand: &State, vf: &ValueFunction, skip: &[bool]) -> Result<Option<usize>> {
    let mut best = (f64::INFINITY, None);
    for (id, node) in tree.nodes.iter().enumerate() {
        if skip.get(id).copied().unwrap_or(false) {
            continue;
        }
        let m = vf.metric(0, &dv(&state_error(&node.state, x_rand)))?;
        if m < best.0 {
            best = (m, Some(id));
        }
    }
    Ok(best.1)
}

/// Near-node radius `gamma (ln n / n)^(1/n_x)`.
pub fn near_radius(gamma: f64, n: usize) -> f64 {
    let n = n.max(1) as f64;
    // ln(1) = 0 would make the radius vanish for a single-node tree.
    let ratio = (n.ln() / n).max(f64::MIN_POSITIVE);
    gamma * ratio.powf(1.0 / STATE_DIM as f64)
}

/// All nodes within the near radius of `x_new`, by increasing id.
pub fn near_nodes(tree: &Tree, x_new: &State, vf: &ValueFunction, gamma: f64) -> Result<Vec<usize>> {
    let radius = if tree.len() == 1 {
        gamma
    } else {
        near_radius(gamma, tree.len())
    };
    let mut out = Vec::new();
    for (id, node) in tree.nodes.iter().enumerate() {
        if vf.metric(0, &dv(&state_error(&node.state, x_new)))? <= radius {
            out.push(id);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub tree: Tree,
    pub stats: PlannerStats,
}

struct Planner<'a> {
    world: &'a World,
    params: &'a InertialParams,
    cfg: &'a PlannerConfig,
    resolution: f64,
    tree: Tree,
    stats: PlannerStats,
    goal_extended: Vec<bool>,
}

impl Planner<'_> {
    fn free(&self, traj: &Trajectory) -> bool {
        trajectory_free(traj, self.world, self.resolution)
    }

    fn close(&self, a: &State, b: &State) -> bool {
        state_error(a, b).norm() <= self.cfg.connect_tolerance
    }

    fn steer_with(&self, from: &State, to: &State, policy: &LqrPolicy) -> Trajectory {
        rollout_policy(from, to, policy, self.params, &self.cfg.steering)
    }

    fn extend(&mut self, x_rand: &State, toward_goal: bool) -> Result<Option<usize>> {
        let cost = &self.cfg.steering.cost;
        let horizon = if toward_goal {
            self.cfg.steering.horizon * self.cfg.goal_horizon_factor
        } else {
            self.cfg.steering.horizon
        };
        let (vf_rand, pol_rand) = steering_solution_horizon(x_rand, self.params, &self.cfg.steering, horizon)?;
        let near_id = if toward_goal {
            // A repeated goal extension from the same node would reproduce the
            // same edge, so each node is extended toward the goal at most once.
            match nearest_excluding(&self.tree, x_rand, &vf_rand, &self.goal_extended)? {
                Some(id) => id,
                None => return Ok(None),
            }
        } else {
            nearest(&self.tree, x_rand, &vf_rand)?
        };
        if toward_goal {
            self.goal_extended[near_id] = true;
        }
        let edge = self.steer_with(&self.tree.nodes[near_id].state, x_rand, &pol_rand);
        if !self.free(&edge) {
            self.stats.collision_rejections += 1;
            return Ok(None);
        }
        let x_new = *edge.final_state();
        let (vf_new, pol_new) = steering_solution(&x_new, self.params, &self.cfg.steering)?;
        let near = near_nodes(&self.tree, &x_new, &vf_new, self.cfg.gamma)?;

        // Choose the parent with the lowest cost-to-come through it.
        let mut candidates = vec![(
            self.tree.nodes[near_id].cost_to_come + edge_cost(&edge, cost),
            near_id,
            edge,
            true,
        )];
        for &j in &near {
            if j == near_id {
                continue;
            }
            let e = self.steer_with(&self.tree.nodes[j].state, &x_new, &pol_new);
            if !self.close(e.final_state(), &x_new) {
                continue;
            }
            let c = self.tree.nodes[j].cost_to_come + edge_cost(&e, cost);
            candidates.push((c, j, e, false));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen = None;
        for (c, j, e, checked) in candidates {
            if checked || self.free(&e) {
                chosen = Some((c, j, e));
                break;
            }
            self.stats.collision_rejections += 1;
        }
        let (_, parent, edge) = chosen.expect("the nearest edge is always collision-free");
        let ec = edge_cost(&edge, cost);
        let new_id = self.tree.add(parent, edge, ec);

        for &j in &near {
            if j == parent || self.tree.is_ancestor(j, new_id) {
                continue;
            }
            self.try_rewire(new_id, j)?;
        }
        Ok(Some(new_id))
    }

    fn try_rewire(&mut self, new_id: usize, j: usize) -> Result<()> {
        let cost = &self.cfg.steering.cost;
        let target = self.tree.nodes[j].state;
        let (_, pol) = steering_solution(&target, self.params, &self.cfg.steering)?;
        let edge = self.steer_with(&self.tree.nodes[new_id].state, &target, &pol);
        if !self.close(edge.final_state(), &target) {
            return Ok(());
        }
        let ec = edge_cost(&edge, cost);
        if self.tree.nodes[new_id].cost_to_come + ec >= self.tree.nodes[j].cost_to_come {
            return Ok(());
        }
        if !self.free(&edge) {
            self.stats.collision_rejections += 1;
            return Ok(());
        }
        // Replay the subtree's stored inputs from the shifted junction.
        let subtree = self.tree.subtree(j);
        let mut new_states = vec![State::default(); subtree.len()];
        let mut new_edges = Vec::with_capacity(subtree.len());
        new_states[0] = *edge.final_state();
        new_edges.push(edge);
        for (pos, &id) in subtree.iter().enumerate().skip(1) {
            let parent = self.tree.nodes[id].parent.expect("subtree node has a parent");
            let ppos = subtree.iter().position(|&s| s == parent).expect("parent precedes child");
            let old = &self.tree.nodes[id].edge;
            let replayed = Trajectory::rollout(new_states[ppos], old.inputs.clone(), self.params, old.dt);
            if !self.free(&replayed) {
                self.stats.collision_rejections += 1;
                return Ok(());
            }
            new_states[pos] = *replayed.final_state();
            new_edges.push(replayed);
        }
        let old_parent = self.tree.nodes[j].parent.expect("rewired node is not the root");
        self.tree.nodes[old_parent].children.retain(|&c| c != j);
        self.tree.nodes[new_id].children.push(j);
        self.tree.nodes[j].parent = Some(new_id);
        for ((&id, state), edge) in subtree.iter().zip(new_states).zip(new_edges) {
            let ec = edge_cost(&edge, cost);
            let parent = self.tree.nodes[id].parent.expect("non-root");
            let base = self.tree.nodes[parent].cost_to_come;
            let node = &mut self.tree.nodes[id];
            node.state = state;
            node.edge_cost = ec;
            node.edge = edge;
            node.cost_to_come = base + ec;
        }
        self.stats.rewires += 1;
        Ok(())
    }
}

/// Plan from `start` to `goal`, stopping at the first node that reaches the goal.
pub fn plan(
    start: &State,
    goal: &State,
    world: &World,
    params: &InertialParams,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    cfg.validate()?;
    params.validate()?;
    if !start.is_finite() || !goal.is_finite() {
        return Err(Error::InvalidArgument("non-finite start or goal".into()));
    }
    for (name, s) in [("start", start), ("goal", goal)] {
        if !world.position_free(&s.r) {
            return Err(Error::Precondition(format!(
                "{name} position {:?} is outside the workspace or inside an obstacle",
                s.r.as_slice()
            )));
        }
    }
    let dt = cfg.steering.dt;
    let mut planner = Planner {
        world,
        params,
        cfg,
        resolution: cfg.resolution_for(world),
        tree: Tree::new(*start, dt),
        goal_extended: vec![false],
        stats: PlannerStats {
            iterations: 0,
            nodes: 1,
            rewires: 0,
            collision_rejections: 0,
            best_goal_metric: f64::INFINITY,
        },
    };
    if state_error(start, goal).amax() == 0.0 {
        return Ok(PlanResult {
            trajectory: Trajectory::single(*start, dt),
            tree: planner.tree,
            stats: planner.stats,
        });
    }

    let (vf_goal, pol_goal) = steering_solution(goal, params, &cfg.steering)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let try_goal = |planner: &mut Planner, id: usize| -> Result<Option<Trajectory>> {
        let x = planner.tree.nodes[id].state;
        let m = vf_goal.metric(0, &dv(&state_error(&x, goal)))?;
        planner.stats.best_goal_metric = planner.stats.best_goal_metric.min(m);
        if m > cfg.goal_tolerance {
            return Ok(None);
        }
        let last = planner.steer_with(&x, goal, &pol_goal);
        if !planner.free(&last) {
            return Ok(None);
        }
        let mut traj = planner.tree.path_to(id);
        traj.append(&last);
        Ok(Some(traj))
    };

    if let Some(traj) = try_goal(&mut planner, 0)? {
        return Ok(PlanResult {
            trajectory: traj,
            tree: planner.tree,
            stats: planner.stats,
        });
    }

    for iter in 0..cfg.max_iterations {
        planner.stats.iterations = iter + 1;
        let toward_goal = rng.random::<f64>() < cfg.goal_bias;
        let x_rand = if toward_goal {
            *goal
        } else {
            sample_state(world, cfg, &mut rng)
        };
        let extended = planner.extend(&x_rand, toward_goal)?;
        planner.goal_extended.resize(planner.tree.len(), false);
        let Some(new_id) = extended else {
            continue;
        };
        planner.stats.nodes = planner.tree.len();
        if let Some(traj) = try_goal(&mut planner, new_id)? {
            return Ok(PlanResult {
                trajectory: traj,
                tree: planner.tree,
                stats: planner.stats,
            });
        }
    }
    planner.stats.nodes = planner.tree.len();
    Err(Error::PlanningFailed(planner.stats))
}

/// Total LQR cost of a trajectory measured against its final state.
pub fn path_cost(traj: &Trajectory, cost: &QuadraticCost) -> f64 {
    trajectory_cost(traj, traj.final_state(), cost)
}

fn path_cost_to(traj: &Trajectory, target: &State, cost: &QuadraticCost) -> f64 {
    trajectory_cost(traj, target, cost)
}

/// Randomized LQR shortcutting. Each attempt replaces the stretch between two
/// random states with an LQR interpolation, replays the remaining inputs from
/// the new junction, and keeps the result only if it is collision-free, in
/// bounds, strictly cheaper, and ends within `goal_tolerance` of the original
/// final state.
pub fn shortcut_smooth<R: Rng>(
    traj: &Trajectory,
    world: &World,
    params: &InertialParams,
    cfg: &PlannerConfig,
    n_attempts: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    let cost = &cfg.steering.cost;
    let resolution = cfg.resolution_for(world);
    let goal = *traj.final_state();
    let mut current = traj.clone();
    if current.steps() < 2 || n_attempts == 0 {
        return Ok(current);
    }
    let mut current_cost = path_cost_to(&current, &goal, cost);
    let (vf_goal, _) = steering_solution(&goal, params, &cfg.steering)?;
    let mut interp_cost = cost.clone();
    interp_cost.q_terminal = &cost.q * cfg.shortcut_terminal_scale;
    let interp_cfg = SteeringConfig {
        cost: interp_cost,
        ..cfg.steering.clone()
    };

    for _ in 0..n_attempts {
        let n = current.steps();
        if n < 2 {
            break;
        }
        let a = rng.random_range(0..n - 1);
        let b = rng.random_range(a + 2..=n);
        let span = b - a;
        let horizon = rng.random_range(span.div_ceil(2)..=span);
        let x_a = current.states[a];
        let x_b = current.states[b];

        let lin = crate::dynamics::linearize_discretize(
            &x_b,
            &crate::dynamics::ControlInput::zero(),
            params,
            current.dt,
        )?;
        let model = crate::dynamics::LtvModel::time_invariant(lin.a, lin.b, lin.g, current.dt, 1)?;
        let (_, policy) = riccati_backward(&model, &interp_cfg.cost, horizon)?;
        let step_cfg = SteeringConfig {
            dt: current.dt,
            ..interp_cfg.clone()
        };
        let interp = rollout_policy(&x_a, &x_b, &policy, params, &step_cfg);
        let tail = Trajectory::rollout(*interp.final_state(), current.inputs[b..].to_vec(), params, current.dt);

        let mut candidate = current.slice(0, a);
        candidate.append(&interp);
        candidate.append(&tail);
        candidate.t0 = current.t0;

        let end_metric = vf_goal.metric(0, &dv(&state_error(candidate.final_state(), &goal)))?;
        if end_metric > cfg.goal_tolerance {
            continue;
        }
        let c = path_cost_to(&candidate, &goal, cost);
        if c >= current_cost {
            continue;
        }
        let changed = candidate.slice(a, candidate.steps());
        if !trajectory_free(&changed, world, resolution) {
            continue;
        }
        current = candidate;
        current_cost = c;
    }
    Ok(current)
}
