//! Deterministic 2D multi-agent simulator.
//!
//! Agents are discs driven by velocity commands subject to acceleration and
//! speed caps. Obstacles are axis-aligned rectangles or circles whose
//! placement may be left free in a [`Scenario`] and realized per episode as
//! an [`ObstacleLayout`]. Collisions are flagged and penalized, never
//! resolved physically.

use std::io::{BufRead, Write};

use nalgebra::Vector2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, numeric, Error, Result};
use crate::lowlevel::MpcFilter;
use crate::rng::Rng;

pub type Vec2 = Vector2<f64>;

pub fn v2(p: [f64; 2]) -> Vec2 {
    Vec2::new(p[0], p[1])
}

/// Scales `v` down so that its norm is at most `max`.
pub fn clip_norm(v: Vec2, max: f64) -> Vec2 {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn centered(width: f64, height: f64) -> Self {
        Self {
            xmin: -width / 2.0,
            xmax: width / 2.0,
            ymin: -height / 2.0,
            ymax: height / 2.0,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    pub fn shrink(&self, m: f64) -> Self {
        Self {
            xmin: self.xmin + m,
            xmax: self.xmax - m,
            ymin: self.ymin + m,
            ymax: self.ymax - m,
        }
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.xmin, self.xmax),
            p.y.clamp(self.ymin, self.ymax),
        )
    }

    fn is_valid(&self) -> bool {
        [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec2 {
        Vec2::new(
            rng.random_range(self.xmin..=self.xmax),
            rng.random_range(self.ymin..=self.ymax),
        )
    }
}

/// A scalar obstacle parameter, either pinned or reconfigurable within bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Fixed(f64),
    Free { lo: f64, hi: f64 },
}

impl Param {
    pub fn range(&self) -> (f64, f64) {
        match *self {
            Param::Fixed(v) => (v, v),
            Param::Free { lo, hi } => (lo, hi),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Param::Free { .. })
    }

    fn admits(&self, v: f64) -> bool {
        match *self {
            Param::Fixed(f) => v == f,
            Param::Free { lo, hi } => v >= lo && v <= hi,
        }
    }

    fn midpoint(&self) -> f64 {
        let (lo, hi) = self.range();
        0.5 * (lo + hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    Fixed(bool),
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect { w: f64, h: f64 },
    Circle { radius: Param },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTemplate {
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    pub x: Param,
    pub y: Param,
    #[serde(default = "always_present")]
    pub present: Presence,
}

fn always_present() -> Presence {
    Presence::Fixed(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    X,
    Y,
    Radius,
}

impl ObstacleTemplate {
    pub fn rect(w: f64, h: f64, x: Param, y: Param) -> Self {
        Self {
            name: String::new(),
            shape: Shape::Rect { w, h },
            x,
            y,
            present: Presence::Fixed(true),
        }
    }

    pub fn circle(radius: Param, x: Param, y: Param) -> Self {
        Self {
            name: String::new(),
            shape: Shape::Circle { radius },
            x,
            y,
            present: Presence::Fixed(true),
        }
    }

    /// Continuous free parameters in canonical order x, y, radius.
    pub fn free_params(&self) -> Vec<(ParamKind, f64, f64)> {
        let mut out = Vec::new();
        for (kind, p) in [(ParamKind::X, self.x), (ParamKind::Y, self.y)] {
            if let Param::Free { lo, hi } = p {
                out.push((kind, lo, hi));
            }
        }
        if let Shape::Circle {
            radius: Param::Free { lo, hi },
        } = self.shape
        {
            out.push((ParamKind::Radius, lo, hi));
        }
        out
    }

    pub fn presence_free(&self) -> bool {
        self.present == Presence::Free
    }

    fn half_extent(&self) -> (f64, f64) {
        match self.shape {
            Shape::Rect { w, h } => (w / 2.0, h / 2.0),
            Shape::Circle { radius } => {
                let r = radius.range().1;
                (r, r)
            }
        }
    }

    fn validate(&self, arena: &Bounds) -> Result<()> {
        let params = [self.x, self.y];
        for p in params {
            let (lo, hi) = p.range();
            if !lo.is_finite() || !hi.is_finite() || lo > hi || (p.is_free() && lo == hi) {
                return Err(config(format!(
                    "obstacle '{}' has an invalid interval [{lo}, {hi}]",
                    self.name
                )));
            }
        }
        match self.shape {
            Shape::Rect { w, h } => {
                if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
                    return Err(config(format!(
                        "obstacle '{}' needs positive finite size",
                        self.name
                    )));
                }
            }
            Shape::Circle { radius } => {
                let (lo, hi) = radius.range();
                if !(lo >= 0.0) || !hi.is_finite() || lo > hi || (radius.is_free() && lo == hi) {
                    return Err(config(format!(
                        "obstacle '{}' has an invalid radius interval",
                        self.name
                    )));
                }
            }
        }
        let (ex, ey) = self.half_extent();
        let (xl, xh) = self.x.range();
        let (yl, yh) = self.y.range();
        if xl - ex < arena.xmin
            || xh + ex > arena.xmax
            || yl - ey < arena.ymin
            || yh + ey > arena.ymax
        {
            return Err(config(format!(
                "obstacle '{}' can leave the arena",
                self.name
            )));
        }
        Ok(())
    }

    /// Realization with every free value at its interval midpoint.
    pub fn midpoint(&self) -> PlacedObstacle {
        PlacedObstacle {
            present: !matches!(self.present, Presence::Fixed(false)),
            x: self.x.midpoint(),
            y: self.y.midpoint(),
            radius: match self.shape {
                Shape::Circle { radius } => Some(radius.midpoint()),
                Shape::Rect { .. } => None,
            },
        }
    }
}

/// Realized values for one template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObstacle {
    pub present: bool,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

impl PlacedObstacle {
    fn absent() -> Self {
        Self {
            present: false,
            x: 0.0,
            y: 0.0,
            radius: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleLayout {
    pub obstacles: Vec<PlacedObstacle>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Rect { center: Vec2, half: Vec2 },
    Circle { center: Vec2, radius: f64 },
}

impl Geometry {
    /// Signed distance from `p` to the boundary; negative inside.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        match *self {
            Geometry::Rect { center, half } => {
                let d = (p - center).abs() - half;
                let outside = Vec2::new(d.x.max(0.0), d.y.max(0.0)).norm();
                outside + d.x.max(d.y).min(0.0)
            }
            Geometry::Circle { center, radius } => (p - center).norm() - radius,
        }
    }
}

/// Start and goal positions for one navigation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TaskDoc", into = "TaskDoc")]
pub struct Task {
    pub starts: Vec<Vec2>,
    pub goals: Vec<Vec2>,
}

#[derive(Serialize, Deserialize)]
struct TaskDoc {
    starts: Vec<[f64; 2]>,
    goals: Vec<[f64; 2]>,
}

impl From<TaskDoc> for Task {
    fn from(d: TaskDoc) -> Self {
        Task {
            starts: d.starts.into_iter().map(v2).collect(),
            goals: d.goals.into_iter().map(v2).collect(),
        }
    }
}

impl From<Task> for TaskDoc {
    fn from(t: Task) -> Self {
        TaskDoc {
            starts: t.starts.iter().map(|p| [p.x, p.y]).collect(),
            goals: t.goals.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl Task {
    pub fn n(&self) -> usize {
        self.starts.len()
    }

    /// Flattened (S, D) in metres.
    pub fn flatten(&self) -> Vec<f64> {
        self.starts
            .iter()
            .chain(&self.goals)
            .flat_map(|p| [p.x, p.y])
            .collect()
    }
}

/// How random tasks are drawn for a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskSampler {
    /// Starts and goals drawn uniformly from per-agent rectangles.
    Regions {
        starts: Vec<Bounds>,
        goals: Vec<Bounds>,
        min_start_goal: f64,
        #[serde(default)]
        min_separation: f64,
    },
    /// Agents evenly spaced on a circle with a random rotation; goals antipodal.
    Circle { radius: f64 },
    /// The fixed task with `count` randomly chosen agents travelling in reverse.
    Swap { count: usize },
}

fn default_agent_radius() -> f64 {
    0.2
}
fn default_comm_radius() -> f64 {
    2.0
}
fn default_dt() -> f64 {
    0.05
}
fn default_max_steps() -> usize {
    500
}
fn default_v_max() -> f64 {
    1.5
}
fn default_a_max() -> f64 {
    1.0
}
fn default_goal_tolerance() -> f64 {
    0.2
}
fn default_safety_margin() -> f64 {
    0.1
}
fn default_collision_penalty() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub arena: Bounds,
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    #[serde(default)]
    pub obstacle_templates: Vec<ObstacleTemplate>,
    #[serde(default = "default_agent_radius")]
    pub agent_radius: f64,
    #[serde(default = "default_comm_radius")]
    pub comm_radius: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_a_max")]
    pub a_max: f64,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default = "default_safety_margin")]
    pub safety_margin: f64,
    #[serde(default = "default_collision_penalty")]
    pub collision_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<TaskSampler>,
    /// Regular reference layout used by the hand-designed baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_designed: Option<ObstacleLayout>,
    /// Executed-action filter applied to policy commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_filter: Option<MpcFilter>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn n_agents(&self) -> usize {
        self.starts.len()
    }

    pub fn task(&self) -> Task {
        Task {
            starts: self.starts.iter().copied().map(v2).collect(),
            goals: self.goals.iter().copied().map(v2).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.arena.is_valid() {
            return Err(config("arena bounds must be finite with min < max"));
        }
        if self.starts.is_empty() || self.starts.len() != self.goals.len() {
            return Err(config(
                "starts and goals must be nonempty and of equal length",
            ));
        }
        let positive = [
            ("agent_radius", self.agent_radius),
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("goal_tolerance", self.goal_tolerance),
            ("collision_penalty", self.collision_penalty),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be positive and finite")));
            }
        }
        if !(self.comm_radius >= 0.0 && self.safety_margin >= 0.0) {
            return Err(config("comm_radius and safety_margin must be nonnegative"));
        }
        if self.max_steps == 0 {
            return Err(config("max_steps must be positive"));
        }
        let task = self.task();
        self.validate_task(&task)?;
        for t in &self.obstacle_templates {
            t.validate(&self.arena)?;
        }
        if let Some(layout) = &self.hand_designed {
            self.validate_layout(layout)
                .map_err(|e| config(format!("hand_designed layout: {e}")))?;
        }
        if let Some(TaskSampler::Swap { count }) = &self.tasks {
            if *count > self.n_agents() {
                return Err(config("swap count exceeds the agent count"));
            }
        }
        if let Some(TaskSampler::Regions {
            starts,
            goals,
            min_start_goal,
            ..
        }) = &self.tasks
        {
            if starts.len() != self.n_agents() || goals.len() != self.n_agents() {
                return Err(config(
                    "task regions must list one start and one goal rectangle per agent",
                ));
            }
            if *min_start_goal <= self.goal_tolerance {
                return Err(config("task regions need min_start_goal > goal_tolerance"));
            }
            for b in starts.iter().chain(goals) {
                if !b.is_valid() && !(b.xmin == b.xmax || b.ymin == b.ymax) {
                    return Err(config("task region bounds are invalid"));
                }
                if b.xmin < self.arena.xmin
                    || b.xmax > self.arena.xmax
                    || b.ymin < self.arena.ymin
                    || b.ymax > self.arena.ymax
                {
                    return Err(config("task region leaves the arena"));
                }
            }
        }
        Ok(())
    }

    /// Agent count and arena membership; enough to simulate.
    pub fn check_task(&self, task: &Task) -> Result<()> {
        if task.starts.len() != self.n_agents() || task.goals.len() != self.n_agents() {
            return Err(config(format!(
                "task must have {} starts and goals",
                self.n_agents()
            )));
        }
        for (s, g) in task.starts.iter().zip(&task.goals) {
            if !self.arena.contains(*s) || !self.arena.contains(*g) {
                return Err(config("starts and goals must lie in the arena"));
            }
        }
        Ok(())
    }

    pub fn validate_task(&self, task: &Task) -> Result<()> {
        self.check_task(task)?;
        for (s, g) in task.starts.iter().zip(&task.goals) {
            if (g - s).norm() <= self.goal_tolerance {
                return Err(config(
                    "each start-goal distance must exceed goal_tolerance",
                ));
            }
        }
        Ok(())
    }

    pub fn validate_layout(&self, layout: &ObstacleLayout) -> Result<()> {
        if layout.obstacles.len() != self.obstacle_templates.len() {
            return Err(domain(format!(
                "layout has {} obstacles but scenario has {} templates",
                layout.obstacles.len(),
                self.obstacle_templates.len()
            )));
        }
        for (i, (t, o)) in self
            .obstacle_templates
            .iter()
            .zip(&layout.obstacles)
            .enumerate()
        {
            if let Presence::Fixed(p) = t.present {
                if o.present != p {
                    return Err(domain(format!("obstacle {i} presence is fixed to {p}")));
                }
            }
            if !o.present {
                continue;
            }
            if !t.x.admits(o.x) || !t.y.admits(o.y) {
                return Err(domain(format!(
                    "obstacle {i} position ({}, {}) outside its bounds",
                    o.x, o.y
                )));
            }
            match (t.shape, o.radius) {
                (Shape::Circle { radius }, Some(r)) if radius.admits(r) => {}
                (Shape::Rect { .. }, None) => {}
                _ => {
                    return Err(domain(format!(
                        "obstacle {i} radius does not match its template"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Layout with all free values at their midpoints.
    pub fn midpoint_layout(&self) -> ObstacleLayout {
        ObstacleLayout {
            obstacles: self
                .obstacle_templates
                .iter()
                .map(ObstacleTemplate::midpoint)
                .collect(),
        }
    }

    /// Uniform draw from the feasible set; free presence is a fair coin.
    pub fn random_layout(&self, rng: &mut Rng) -> ObstacleLayout {
        let obstacles = self
            .obstacle_templates
            .iter()
            .map(|t| {
                let present = match t.present {
                    Presence::Fixed(p) => p,
                    Presence::Free => rng.random_bool(0.5),
                };
                if !present {
                    return PlacedObstacle::absent();
                }
                let mut draw = |p: Param| match p {
                    Param::Fixed(v) => v,
                    Param::Free { lo, hi } => rng.random_range(lo..=hi),
                };
                let x = draw(t.x);
                let y = draw(t.y);
                let radius = match t.shape {
                    Shape::Circle { radius } => Some(draw(radius)),
                    Shape::Rect { .. } => None,
                };
                PlacedObstacle {
                    present,
                    x,
                    y,
                    radius,
                }
            })
            .collect();
        ObstacleLayout { obstacles }
    }

    /// Geometry of present obstacles; zero-radius circles carry none.
    pub fn geometry(&self, layout: &ObstacleLayout) -> Vec<Geometry> {
        self.obstacle_templates
            .iter()
            .zip(&layout.obstacles)
            .filter(|(_, o)| o.present)
            .filter_map(|(t, o)| {
                let center = Vec2::new(o.x, o.y);
                match t.shape {
                    Shape::Rect { w, h } => Some(Geometry::Rect {
                        center,
                        half: Vec2::new(w / 2.0, h / 2.0),
                    }),
                    Shape::Circle { .. } => {
                        let r = o.radius.unwrap_or(0.0);
                        (r > 0.0).then_some(Geometry::Circle { center, radius: r })
                    }
                }
            })
            .collect()
    }

    pub fn sample_task(&self, rng: &mut Rng) -> Result<Task> {
        match &self.tasks {
            None => Ok(self.task()),
            Some(TaskSampler::Circle { radius }) => {
                let n = self.n_agents();
                let offset = rng.random_range(0.0..std::f64::consts::TAU);
                let starts: Vec<Vec2> = (0..n)
                    .map(|i| {
                        let a = offset + std::f64::consts::TAU * i as f64 / n as f64;
                        Vec2::new(radius * a.cos(), radius * a.sin())
                    })
                    .collect();
                let goals = starts.iter().map(|s| -s).collect();
                let task = Task { starts, goals };
                self.validate_task(&task)?;
                Ok(task)
            }
            Some(TaskSampler::Swap { count }) => {
                let mut task = self.task();
                for i in rand::seq::index::sample(rng, self.n_agents(), *count) {
                    std::mem::swap(&mut task.starts[i], &mut task.goals[i]);
                }
                Ok(task)
            }
            Some(TaskSampler::Regions {
                starts,
                goals,
                min_start_goal,
                min_separation,
            }) => {
                const ATTEMPTS: usize = 10_000;
                let mut task = Task {
                    starts: Vec::new(),
                    goals: Vec::new(),
                };
                for (sb, gb) in starts.iter().zip(goals) {
                    let mut placed = false;
                    for _ in 0..ATTEMPTS {
                        let s = sb.sample(rng);
                        let g = gb.sample(rng);
                        let clear = |p: Vec2, others: &[Vec2]| {
                            others.iter().all(|q| (p - q).norm() >= *min_separation)
                        };
                        if (g - s).norm() >= *min_start_goal
                            && clear(s, &task.starts)
                            && clear(g, &task.goals)
                        {
                            task.starts.push(s);
                            task.goals.push(g);
                            placed = true;
                            break;
                        }
                    }
                    if !placed {
                        return Err(config("task regions too tight to place every agent"));
                    }
                }
                self.validate_task(&task)?;
                Ok(task)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub t: usize,
    pub pos: Vec<Vec2>,
    pub vel: Vec<Vec2>,
    pub arrived: Vec<bool>,
}

impl WorldState {
    /// Agents at rest on their starts; those already within tolerance are arrived.
    pub fn initial(scenario: &Scenario, task: &Task) -> Self {
        let arrived = task
            .starts
            .iter()
            .zip(&task.goals)
            .map(|(s, g)| (g - s).norm() <= scenario.goal_tolerance)
            .collect();
        Self {
            t: 0,
            pos: task.starts.clone(),
            vel: vec![Vec2::zeros(); task.n()],
            arrived,
        }
    }

    pub fn n(&self) -> usize {
        self.pos.len()
    }

    pub fn all_arrived(&self) -> bool {
        self.arrived.iter().all(|&a| a)
    }
}

/// Neighbor lists of the communication graph; `i` never lists itself.
pub fn comm_graph(state: &WorldState, comm_radius: f64) -> Vec<Vec<usize>> {
    let n = state.n();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && (state.pos[i] - state.pos[j]).norm() <= comm_radius)
                .collect()
        })
        .collect()
}

pub fn step(
    state: &WorldState,
    desired: &[Vec2],
    scenario: &Scenario,
    task: &Task,
) -> Result<WorldState> {
    if desired.len() != state.n() {
        return Err(config(format!(
            "expected {} commands, got {}",
            state.n(),
            desired.len()
        )));
    }
    if desired.iter().any(|d| !d.x.is_finite() || !d.y.is_finite()) {
        return Err(numeric("non-finite velocity command"));
    }
    let box_ = scenario.arena.shrink(scenario.agent_radius);
    let mut next = state.clone();
    next.t = state.t + 1;
    for i in 0..state.n() {
        if state.arrived[i] {
            next.vel[i] = Vec2::zeros();
            continue;
        }
        let dv = clip_norm(desired[i] - state.vel[i], scenario.a_max * scenario.dt);
        let vel = clip_norm(state.vel[i] + dv, scenario.v_max);
        let pos = box_.clamp(state.pos[i] + vel * scenario.dt);
        next.pos[i] = pos;
        if (task.goals[i] - pos).norm() <= scenario.goal_tolerance {
            next.arrived[i] = true;
            next.vel[i] = Vec2::zeros();
        } else {
            next.vel[i] = vel;
        }
    }
    Ok(next)
}

pub fn collisions(state: &WorldState, geometry: &[Geometry], scenario: &Scenario) -> Vec<bool> {
    let n = state.n();
    let r = scenario.agent_radius;
    let pair = 2.0 * r + scenario.safety_margin;
    let wall = r + scenario.safety_margin;
    let mut flags = vec![false; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if (state.pos[i] - state.pos[j]).norm() < pair {
                flags[i] = true;
                flags[j] = true;
            }
        }
        flags[i] |= geometry
            .iter()
            .any(|g| g.signed_distance(state.pos[i]) < wall);
    }
    flags
}

/// Per-agent rewards and their mean for the transition `prev -> next`.
pub fn reward(
    prev: &WorldState,
    next: &WorldState,
    flags: &[bool],
    scenario: &Scenario,
    task: &Task,
) -> (Vec<f64>, f64) {
    let rewards: Vec<f64> = (0..prev.n())
        .map(|i| {
            let motion = if prev.arrived[i] {
                0.0
            } else {
                let to_goal = task.goals[i] - prev.pos[i];
                let d = to_goal.norm();
                if d > 0.0 {
                    (to_goal / d).dot(&next.vel[i])
                } else {
                    0.0
                }
            };
            motion
                - if flags[i] {
                    scenario.collision_penalty
                } else {
                    0.0
                }
        })
        .collect();
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    (rewards, mean)
}

/// Chooses velocity commands from the current state.
pub trait ActionSampler {
    /// Desired velocities and per-agent log-probabilities.
    fn act(
        &self,
        scenario: &Scenario,
        task: &Task,
        state: &WorldState,
        rng: &mut Rng,
    ) -> Result<(Vec<Vec2>, Vec<f64>)>;
}

/// Commands zero velocity for every agent.
pub struct ZeroPolicy;

impl ActionSampler for ZeroPolicy {
    fn act(
        &self,
        _: &Scenario,
        _: &Task,
        state: &WorldState,
        _: &mut Rng,
    ) -> Result<(Vec<Vec2>, Vec<f64>)> {
        Ok((vec![Vec2::zeros(); state.n()], vec![0.0; state.n()]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllArrived,
    Timeout,
    NumericAbort(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// State after the transition.
    pub state: WorldState,
    pub actions: Vec<Vec2>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub collided: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub task: Task,
    pub layout: ObstacleLayout,
    pub initial: WorldState,
    pub steps: Vec<StepRecord>,
    pub termination: Termination,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State before step `t` (0-based transition index).
    pub fn state_before(&self, t: usize) -> &WorldState {
        if t == 0 {
            &self.initial
        } else {
            &self.steps[t - 1].state
        }
    }

    pub fn team_rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.team_reward).collect()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_return(&self.team_rewards(), gamma)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            task: self.task.clone(),
            pos: std::iter::once(&self.initial)
                .chain(self.steps.iter().map(|s| &s.state))
                .map(|s| s.pos.clone())
                .collect(),
            vel: std::iter::once(&self.initial)
                .chain(self.steps.iter().map(|s| &s.state))
                .map(|s| s.vel.clone())
                .collect(),
            arrived: std::iter::once(&self.initial)
                .chain(self.steps.iter().map(|s| &s.state))
                .map(|s| s.arrived.clone())
                .collect(),
            rewards: self.steps.iter().map(|s| s.rewards.clone()).collect(),
            collided: self.steps.iter().map(|s| s.collided.clone()).collect(),
        }
    }
}

/// Running sum of `gamma^t * r_t`; the single definition of a discounted return.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut w = 1.0;
    for r in rewards {
        acc += w * r;
        w *= gamma;
    }
    acc
}

pub fn rollout(
    scenario: &Scenario,
    task: &Task,
    layout: &ObstacleLayout,
    policy: &dyn ActionSampler,
    rng: &mut Rng,
) -> Result<EpisodeLog> {
    scenario.check_task(task)?;
    scenario.validate_layout(layout)?;
    let geometry = scenario.geometry(layout);
    let initial = WorldState::initial(scenario, task);
    let mut state = initial.clone();
    let mut steps = Vec::new();
    let mut termination = Termination::Timeout;
    for _ in 0..scenario.max_steps {
        if state.all_arrived() {
            break;
        }
        let (actions, logprobs) = match policy.act(scenario, task, &state, rng) {
            Ok(out) => out,
            Err(Error::Numeric(msg)) => {
                termination = Termination::NumericAbort(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        if actions.iter().any(|a| !a.x.is_finite() || !a.y.is_finite())
            || logprobs.iter().any(|l| l.is_nan())
        {
            termination = Termination::NumericAbort("policy emitted a non-finite action".into());
            break;
        }
        let commands = match &scenario.mpc_filter {
            Some(f) => f.filter_all(&actions, scenario.dt, scenario.v_max)?,
            None => actions.clone(),
        };
        let next = step(&state, &commands, scenario, task)?;
        let collided = collisions(&next, &geometry, scenario);
        let (rewards, team_reward) = reward(&state, &next, &collided, scenario, task);
        steps.push(StepRecord {
            state: next.clone(),
            actions,
            logprobs,
            rewards,
            team_reward,
            collided,
        });
        state = next;
    }
    if state.all_arrived() {
        termination = Termination::AllArrived;
    }
    Ok(EpisodeLog {
        task: task.clone(),
        layout: layout.clone(),
        initial,
        steps,
        termination,
    })
}

/// Positions, velocities and flags of an episode, indexed by time then agent.
/// `pos`, `vel` and `arrived` include the initial state; `rewards` and
/// `collided` have one entry per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: Task,
    pub pos: Vec<Vec<Vec2>>,
    pub vel: Vec<Vec<Vec2>>,
    pub arrived: Vec<Vec<bool>>,
    pub rewards: Vec<Vec<f64>>,
    pub collided: Vec<Vec<bool>>,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.task.n()
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.collided.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collided.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "agent", "x", "y", "vx", "vy", "reward", "collided"])
            .map_err(csv_err)?;
        for t in 0..self.len() {
            for i in 0..self.n() {
                let p = self.pos[t + 1][i];
                let v = self.vel[t + 1][i];
                w.write_record([
                    (t + 1).to_string(),
                    i.to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                    v.x.to_string(),
                    v.y.to_string(),
                    self.rewards[t][i].to_string(),
                    u8::from(self.collided[t][i]).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a trajectory from exported rows; arrival is recomputed with
    /// the simulator's own tolerance test.
    pub fn read_csv<R: BufRead>(input: R, scenario: &Scenario, task: &Task) -> Result<Self> {
        let n = task.n();
        let initial = WorldState::initial(scenario, task);
        let mut traj = Trajectory {
            task: task.clone(),
            pos: vec![initial.pos.clone()],
            vel: vec![initial.vel.clone()],
            arrived: vec![initial.arrived.clone()],
            rewards: Vec::new(),
            collided: Vec::new(),
        };
        let mut r = csv::Reader::from_reader(input);
        let expected = ["t", "agent", "x", "y", "vx", "vy", "reward", "collided"];
        let header = r.headers().map_err(|e| parse_err(1, e))?;
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {}", expected.join(",")),
            });
        }
        let mut rows = 0usize;
        for (row, rec) in r.records().enumerate() {
            rows = row + 1;
            let line = row as u64 + 2;
            let rec = rec.map_err(|e| parse_err(line, e))?;
            if rec.len() != 8 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 8 fields, got {}", rec.len()),
                });
            }
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("field {}: {e}", expected[k]),
                })
            };
            let int = |k: usize| -> Result<usize> {
                rec[k].parse::<usize>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("field {}: {e}", expected[k]),
                })
            };
            let (t, agent) = (int(0)?, int(1)?);
            if t != row / n + 1 || agent != row % n || agent >= n {
                return Err(Error::Parse {
                    line,
                    msg: format!("unexpected (t, agent) = ({t}, {agent})"),
                });
            }
            if agent == 0 {
                let prev_arrived = traj.arrived.last().cloned().unwrap_or_default();
                traj.pos.push(vec![Vec2::zeros(); n]);
                traj.vel.push(vec![Vec2::zeros(); n]);
                traj.arrived.push(prev_arrived);
                traj.rewards.push(vec![0.0; n]);
                traj.collided.push(vec![false; n]);
            }
            let p = Vec2::new(num(2)?, num(3)?);
            traj.pos[t][agent] = p;
            traj.vel[t][agent] = Vec2::new(num(4)?, num(5)?);
            traj.rewards[t - 1][agent] = num(6)?;
            traj.collided[t - 1][agent] = match &rec[7] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("collided must be 0 or 1, got {other}"),
                    })
                }
            };
            traj.arrived[t][agent] |= (task.goals[agent] - p).norm() <= scenario.goal_tolerance;
        }
        if rows % n != 0 {
            return Err(Error::Parse {
                line: r.position().line(),
                msg: "incomplete final step".into(),
            });
        }
        Ok(traj)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn parse_err(line: u64, e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(line, |p| p.line()),
        msg: e.to_string(),
    }
}
