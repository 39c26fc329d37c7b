//! Navigation metrics over trajectories and a batch evaluation driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::{gen_dist, layout_sample_logprob, GenSpec};
use crate::error::{config, Result};
use crate::net::ParamBlock;
use crate::rng::substream;
use crate::world::{rollout, ActionSampler, EpisodeLog, ObstacleLayout, Scenario, Trajectory};

/// Success weighted by path length with Euclidean start-goal distances.
pub fn spl(traj: &Trajectory) -> f64 {
    let n = traj.n();
    if n == 0 {
        return 0.0;
    }
    let last = traj
        .arrived
        .last()
        .expect("trajectory holds the initial state");
    let mut total = 0.0;
    for i in 0..n {
        if !last[i] {
            continue;
        }
        let shortest = (traj.task.goals[i] - traj.task.starts[i]).norm();
        let travelled: f64 = traj
            .pos
            .windows(2)
            .map(|w| (w[1][i] - w[0][i]).norm())
            .sum();
        let denom = travelled.max(shortest);
        total += if denom > 0.0 { shortest / denom } else { 1.0 };
    }
    total / n as f64
}

/// Mean speed over logged steps as a fraction of the speed cap; 0 for an empty episode.
pub fn pctspeed(traj: &Trajectory, v_max: f64) -> f64 {
    let (n, t) = (traj.n(), traj.len());
    if n == 0 || t == 0 {
        return 0.0;
    }
    let sum: f64 = traj.vel[1..]
        .iter()
        .flat_map(|vs| vs.iter().map(|v| v.norm()))
        .sum();
    (sum / v_max / (n * t) as f64).min(1.0)
}

/// Mean over agents of collision-flagged steps.
pub fn numcoll(traj: &Trajectory) -> f64 {
    let n = traj.n();
    if n == 0 {
        return 0.0;
    }
    traj.collided.iter().flatten().filter(|&&c| c).count() as f64 / n as f64
}

/// Mean norm of the finite-difference acceleration change, with zero
/// acceleration before the first step.
pub fn diffacc(traj: &Trajectory, dt: f64) -> f64 {
    let (n, t) = (traj.n(), traj.len());
    if n == 0 || t == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut prev_acc = crate::world::Vec2::zeros();
        for w in traj.vel.windows(2) {
            let acc = (w[1][i] - w[0][i]) / dt;
            total += (acc - prev_acc).norm();
            prev_acc = acc;
        }
    }
    total / (n * t) as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub spl: f64,
    pub pctspeed: f64,
    pub numcoll: f64,
    pub diffacc: f64,
}

impl EpisodeMetrics {
    pub fn of(traj: &Trajectory, scenario: &Scenario) -> Self {
        Self {
            spl: spl(traj),
            pctspeed: pctspeed(traj, scenario.v_max),
            numcoll: numcoll(traj),
            diffacc: diffacc(traj, scenario.dt),
        }
    }

    fn fields(&self) -> [f64; 4] {
        [self.spl, self.pctspeed, self.numcoll, self.diffacc]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub spl: f64,
    pub pctspeed: f64,
    pub numcoll: f64,
    pub diffacc: f64,
    /// Population standard deviations in the same field order.
    pub std: EpisodeMetrics,
    pub n_episodes: usize,
    pub episodes: Vec<EpisodeMetrics>,
}

impl MetricReport {
    pub fn aggregate(episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len();
        if n == 0 {
            return Self::default();
        }
        let mut mean = [0.0; 4];
        for e in &episodes {
            for (m, v) in mean.iter_mut().zip(e.fields()) {
                *m += v / n as f64;
            }
        }
        let mut var = [0.0; 4];
        for e in &episodes {
            for ((s, v), m) in var.iter_mut().zip(e.fields()).zip(mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let sd = var.map(f64::sqrt);
        Self {
            spl: mean[0],
            pctspeed: mean[1],
            numcoll: mean[2],
            diffacc: mean[3],
            std: EpisodeMetrics {
                spl: sd[0],
                pctspeed: sd[1],
                numcoll: sd[2],
                diffacc: sd[3],
            },
            n_episodes: n,
            episodes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Where evaluation layouts come from.
#[derive(Clone, Copy, Debug)]
pub enum EvalMode<'a> {
    Generated {
        spec: &'a GenSpec,
        params: &'a ParamBlock,
    },
    HandDesigned,
    RandomLayout,
    Fixed(&'a ObstacleLayout),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub tasks: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            tasks: 30,
            trials: 10,
            seed: 0,
        }
    }
}

/// Runs `tasks x trials` episodes in task-major order; task `j` comes from
/// substream `[j]` and trial `r` of it from `[j, r]`.
pub fn eval_episodes(
    scenario: &Scenario,
    policy: &(dyn ActionSampler + Sync),
    mode: EvalMode<'_>,
    plan: &EvalPlan,
) -> Result<Vec<EpisodeLog>> {
    if matches!(mode, EvalMode::HandDesigned) && scenario.hand_designed.is_none() {
        return Err(config(format!(
            "scenario {} has no hand-designed layout",
            scenario.id
        )));
    }
    let tasks = (0..plan.tasks)
        .map(|j| match scenario.tasks {
            Some(_) => scenario.sample_task(&mut substream(plan.seed, &[j as u64])),
            None => Ok(scenario.task()),
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..plan.tasks)
        .flat_map(|j| (0..plan.trials).map(move |r| (j, r)))
        .collect();
    let episodes = jobs
        .par_iter()
        .map(|&(j, r)| {
            let task = &tasks[j];
            let mut rng = substream(plan.seed, &[j as u64, r as u64]);
            let layout = match mode {
                EvalMode::Generated { spec, params } => {
                    let (dist, _) = gen_dist(spec, params, scenario, task)?;
                    layout_sample_logprob(&dist, scenario, &mut rng)?.0
                }
                EvalMode::HandDesigned => scenario.hand_designed.clone().expect("checked above"),
                EvalMode::RandomLayout => scenario.random_layout(&mut rng),
                EvalMode::Fixed(l) => l.clone(),
            };
            rollout(scenario, task, &layout, policy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(episodes)
}

pub fn evaluate(
    scenario: &Scenario,
    policy: &(dyn ActionSampler + Sync),
    mode: EvalMode<'_>,
    plan: &EvalPlan,
) -> Result<MetricReport> {
    let logs = eval_episodes(scenario, policy, mode, plan)?;
    Ok(MetricReport::aggregate(
        logs.iter()
            .map(|l| EpisodeMetrics::of(&l.trajectory(), scenario))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{v2, Task, Vec2, ZeroPolicy};
    use proptest::prelude::*;

    fn traj(
        starts: Vec<Vec2>,
        goals: Vec<Vec2>,
        pos: Vec<Vec<Vec2>>,
        vel: Vec<Vec<Vec2>>,
        arrived_last: Vec<bool>,
    ) -> Trajectory {
        let t = pos.len() - 1;
        let n = starts.len();
        let mut arrived = vec![vec![false; n]; t];
        arrived.push(arrived_last);
        Trajectory {
            task: Task { starts, goals },
            pos,
            vel,
            arrived,
            rewards: vec![vec![0.0; n]; t],
            collided: vec![vec![false; n]; t],
        }
    }

    fn straight(n_steps: usize, speed: f64) -> Trajectory {
        let pos = (0..=n_steps).map(|t| vec![v2([t as f64, 0.0])]).collect();
        let vel = (0..=n_steps)
            .map(|t| vec![v2([if t == 0 { 0.0 } else { speed }, 0.0])])
            .collect();
        traj(
            vec![v2([0.0, 0.0])],
            vec![v2([n_steps as f64, 0.0])],
            pos,
            vel,
            vec![true],
        )
    }

    #[test]
    fn spl_examples() {
        assert_eq!(spl(&straight(4, 1.0)), 1.0);
        // Agent 0 fails; agent 1 reaches a goal 1 away along two unit segments.
        let h = 0.75f64.sqrt();
        let pos = vec![
            vec![v2([9.0, 9.0]), v2([0.0, 0.0])],
            vec![v2([9.0, 9.0]), v2([0.5, h])],
            vec![v2([9.0, 9.0]), v2([1.0, 0.0])],
        ];
        let vel = vec![vec![Vec2::zeros(); 2]; 3];
        let t = traj(
            vec![v2([9.0, 9.0]), v2([0.0, 0.0])],
            vec![v2([0.0, 0.0]), v2([1.0, 0.0])],
            pos,
            vel,
            vec![false, true],
        );
        assert!((spl(&t) - 0.25).abs() < 1e-12);
        let mut none = straight(4, 1.0);
        none.arrived.last_mut().unwrap()[0] = false;
        assert_eq!(spl(&none), 0.0);
    }

    #[test]
    fn pctspeed_examples() {
        assert_eq!(pctspeed(&straight(4, 1.5), 1.5), 1.0);
        assert_eq!(pctspeed(&straight(4, 0.0), 1.5), 0.0);
        let mut half = straight(4, 1.5);
        half.vel[3][0] = Vec2::zeros();
        half.vel[4][0] = Vec2::zeros();
        assert_eq!(pctspeed(&half, 1.5), 0.5);
        let empty = traj(
            vec![v2([0.0, 0.0])],
            vec![v2([0.0, 0.0])],
            vec![vec![v2([0.0, 0.0])]],
            vec![vec![Vec2::zeros()]],
            vec![true],
        );
        assert_eq!(pctspeed(&empty, 1.5), 0.0);
    }

    #[test]
    fn numcoll_examples() {
        let n = 3;
        let t = 4;
        let mut tr = traj(
            vec![Vec2::zeros(); n],
            vec![v2([1.0, 0.0]); n],
            vec![vec![Vec2::zeros(); n]; t + 1],
            vec![vec![Vec2::zeros(); n]; t + 1],
            vec![false; n],
        );
        assert_eq!(numcoll(&tr), 0.0);
        for s in 0..3 {
            tr.collided[s][1] = true;
        }
        assert_eq!(numcoll(&tr), 1.0);
        tr.collided = vec![vec![true; n]; t];
        assert_eq!(numcoll(&tr), t as f64);
    }

    #[test]
    fn diffacc_examples() {
        let dt = 0.05;
        let still = traj(
            vec![Vec2::zeros()],
            vec![v2([1.0, 0.0])],
            vec![vec![Vec2::zeros()]; 6],
            vec![vec![Vec2::zeros()]; 6],
            vec![false],
        );
        assert_eq!(diffacc(&still, dt), 0.0);
        let constant = traj(
            vec![Vec2::zeros()],
            vec![v2([1.0, 0.0])],
            vec![vec![Vec2::zeros()]; 6],
            vec![vec![v2([1.0, 0.0])]; 6],
            vec![false],
        );
        assert_eq!(diffacc(&constant, dt), 0.0);
        // One jump of 0.5 at the first step: the acceleration rises then falls back.
        let jump = straight(5, 0.5);
        assert!((diffacc(&jump, dt) - 2.0 * 0.5 / dt / 5.0).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let e = |s| EpisodeMetrics {
            spl: s,
            pctspeed: 0.5,
            numcoll: 1.0,
            diffacc: 2.0,
        };
        let r = MetricReport::aggregate(vec![e(0.0), e(1.0)]);
        assert_eq!((r.spl, r.std.spl, r.n_episodes), (0.5, 0.5, 2));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn scenario() -> Scenario {
        serde_json::from_str(r#"{"id":"m","arena":{"xmin":-3,"xmax":3,"ymin":-3,"ymax":3},"starts":[[-2,0],[2,0]],"goals":[[2,1],[-2,1]],"max_steps":20}"#).unwrap()
    }

    #[test]
    fn evaluate_counts_episodes_and_needs_hand_layout() {
        let sc = scenario();
        let plan = EvalPlan {
            tasks: 2,
            trials: 3,
            seed: 1,
        };
        let r = evaluate(&sc, &ZeroPolicy, EvalMode::RandomLayout, &plan).unwrap();
        assert_eq!(r.n_episodes, 6);
        assert_eq!(r.pctspeed, 0.0);
        assert_eq!(r.spl, 0.0);
        assert!(evaluate(&sc, &ZeroPolicy, EvalMode::HandDesigned, &plan).is_err());
    }

    fn arb_traj() -> impl Strategy<Value = Trajectory> {
        (1usize..4, 1usize..6).prop_flat_map(|(n, t)| {
            let pt = || (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y)| v2([x, y]));
            (
                prop::collection::vec(pt(), n),
                prop::collection::vec(pt(), n),
                prop::collection::vec(prop::collection::vec(pt(), n), t + 1),
                prop::collection::vec(
                    prop::collection::vec(
                        (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y)| v2([x, y])),
                        n,
                    ),
                    t + 1,
                ),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(prop::collection::vec(any::<bool>(), n), t),
            )
                .prop_map(|(s, g, p, v, a, c)| {
                    let mut tr = traj(s, g, p, v, a);
                    tr.collided = c;
                    tr
                })
        })
    }

    fn permute(tr: &Trajectory, perm: &[usize]) -> Trajectory {
        let pick = |row: &Vec<Vec2>| perm.iter().map(|&i| row[i]).collect::<Vec<_>>();
        let pickb = |row: &Vec<bool>| perm.iter().map(|&i| row[i]).collect::<Vec<_>>();
        Trajectory {
            task: Task {
                starts: pick(&tr.task.starts),
                goals: pick(&tr.task.goals),
            },
            pos: tr.pos.iter().map(pick).collect(),
            vel: tr.vel.iter().map(pick).collect(),
            arrived: tr.arrived.iter().map(pickb).collect(),
            rewards: tr
                .rewards
                .iter()
                .map(|r| perm.iter().map(|&i| r[i]).collect())
                .collect(),
            collided: tr.collided.iter().map(pickb).collect(),
        }
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(tr in arb_traj(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..tr.n()).collect();
            perm.shuffle(&mut crate::rng::seeded(seed));
            let p = permute(&tr, &perm);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
            prop_assert!(close(spl(&tr), spl(&p)));
            prop_assert!(close(pctspeed(&tr, 1.5), pctspeed(&p, 1.5)));
            prop_assert!(close(numcoll(&tr), numcoll(&p)));
            prop_assert!(close(diffacc(&tr, 0.05), diffacc(&p, 0.05)));
            prop_assert!((0.0..=1.0).contains(&spl(&tr)));
            prop_assert!((0.0..=1.0).contains(&pctspeed(&tr, 1.5)));
        }

        #[test]
        fn spl_nonincreasing_in_path_length(extra in 0.0f64..3.0) {
            let base = straight(4, 1.0);
            let mut longer = base.clone();
            // Push an interior waypoint sideways; endpoints and success stay fixed.
            longer.pos[2][0].y += extra;
            prop_assert!(spl(&longer) <= spl(&base));
        }
    }

    struct Toward;

    impl ActionSampler for Toward {
        fn act(
            &self,
            sc: &Scenario,
            task: &Task,
            state: &crate::world::WorldState,
            _: &mut crate::rng::Rng,
        ) -> Result<(Vec<Vec2>, Vec<f64>)> {
            let acts = state
                .pos
                .iter()
                .zip(&task.goals)
                .map(|(p, g)| (g - p).normalize() * sc.v_max)
                .collect();
            Ok((acts, vec![0.0; state.n()]))
        }
    }

    #[test]
    fn csv_round_trip_preserves_metrics() {
        let sc = scenario();
        let log = rollout(
            &sc,
            &sc.task(),
            &ObstacleLayout { obstacles: vec![] },
            &Toward,
            &mut crate::rng::seeded(3),
        )
        .unwrap();
        let tr = log.trajectory();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(&buf[..], &sc, &log.task).unwrap();
        assert_eq!(EpisodeMetrics::of(&tr, &sc), EpisodeMetrics::of(&back, &sc));
    }
}
