//! Static SVG drawing of a layout and agent trajectories.
//!
//! Every logged step becomes one `<circle class="step">`, coloured from blue
//! at the first step to red at the last.

use std::fmt::Write as _;

use coopt_core::world::{Geometry, ObstacleLayout, Scenario, Trajectory};

/// Pixels per metre.
pub const SCALE: f64 = 40.0;
const PAD: f64 = 20.0;

struct Frame {
    xmin: f64,
    ymax: f64,
}

impl Frame {
    fn x(&self, x: f64) -> f64 {
        PAD + (x - self.xmin) * SCALE
    }

    fn y(&self, y: f64) -> f64 {
        PAD + (self.ymax - y) * SCALE
    }
}

fn hue(t: usize, steps: usize) -> f64 {
    if steps <= 1 {
        240.0
    } else {
        240.0 * (1.0 - (t - 1) as f64 / (steps - 1) as f64)
    }
}

pub fn render(scenario: &Scenario, layout: &ObstacleLayout, traj: &Trajectory) -> String {
    let a = scenario.arena;
    let f = Frame {
        xmin: a.xmin,
        ymax: a.ymax,
    };
    let (w, h) = (
        (a.xmax - a.xmin) * SCALE + 2.0 * PAD,
        (a.ymax - a.ymin) * SCALE + 2.0 * PAD,
    );
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{} ({} steps)</title>"#,
        scenario.id,
        traj.len()
    );
    let _ = writeln!(
        s,
        r##"<rect class="arena" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#fafafa" stroke="#333"/>"##,
        f.x(a.xmin),
        f.y(a.ymax),
        (a.xmax - a.xmin) * SCALE,
        (a.ymax - a.ymin) * SCALE
    );
    for g in scenario.geometry(layout) {
        match g {
            Geometry::Rect { center, half } => {
                let _ = writeln!(
                    s,
                    r##"<rect class="obstacle" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#888"/>"##,
                    f.x(center.x - half.x),
                    f.y(center.y + half.y),
                    2.0 * half.x * SCALE,
                    2.0 * half.y * SCALE
                );
            }
            Geometry::Circle { center, radius } => {
                let _ = writeln!(
                    s,
                    r##"<circle class="obstacle" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="#888"/>"##,
                    f.x(center.x),
                    f.y(center.y),
                    radius * SCALE
                );
            }
        }
    }
    for (i, (st, gl)) in traj.task.starts.iter().zip(&traj.task.goals).enumerate() {
        let _ = writeln!(s, r##"<g class="agent" id="agent{i}">"##);
        let pts: Vec<String> = traj
            .pos
            .iter()
            .map(|p| format!("{:.3},{:.3}", f.x(p[i].x), f.y(p[i].y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r##"<polyline class="path" points="{}" fill="none" stroke="#bbb" stroke-width="1"/>"##,
                pts.join(" ")
            );
        }
        for t in 1..traj.pos.len() {
            let p = traj.pos[t][i];
            let _ = writeln!(
                s,
                r#"<circle class="step" cx="{:.3}" cy="{:.3}" r="2" fill="hsl({:.1},70%,45%)"/>"#,
                f.x(p.x),
                f.y(p.y),
                hue(t, traj.len())
            );
        }
        let _ = writeln!(
            s,
            r##"<rect class="start" x="{:.3}" y="{:.3}" width="6" height="6" fill="#1a7f37"/>"##,
            f.x(st.x) - 3.0,
            f.y(st.y) - 3.0
        );
        let _ = writeln!(
            s,
            r##"<circle class="goal" cx="{:.3}" cy="{:.3}" r="5" fill="none" stroke="#cf222e" stroke-width="2"/>"##,
            f.x(gl.x),
            f.y(gl.y)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use coopt_core::library::builtin;
    use coopt_core::world::WorldState;

    #[test]
    fn empty_episode_draws_layout_only() {
        let sc = builtin("poc").unwrap();
        let task = sc.task();
        let init = WorldState::initial(&sc, &task);
        let traj = Trajectory {
            task,
            pos: vec![init.pos],
            vel: vec![init.vel],
            arrived: vec![init.arrived],
            rewards: vec![],
            collided: vec![],
        };
        let svg = render(&sc, sc.hand_designed.as_ref().unwrap(), &traj);
        assert_eq!(svg.matches(r#"class="obstacle""#).count(), 4);
        assert_eq!(svg.matches(r#"class="step""#).count(), 0);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn hue_runs_blue_to_red() {
        assert_eq!(hue(1, 10), 240.0);
        assert_eq!(hue(10, 10), 0.0);
    }
}
