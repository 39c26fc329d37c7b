//! Low-level control: box-constrained MPC on a single integrator and
//! four-wheel omnidirectional inverse kinematics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config, numeric, Result};
use crate::world::Vec2;

pub const MPC_TOL: f64 = 1e-8;
pub const MPC_MAX_ITERS: usize = 10_000;

/// Finite-horizon problem for `x_{k+1} = x_k + dt * u_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcSpec {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub dt: f64,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
}

impl MpcSpec {
    /// Q = P = I, R = 0.1 I, horizon 10, symmetric box `[-bound, bound]`.
    pub fn default_for(dim: usize, dt: f64, bound: f64) -> Self {
        Self {
            horizon: 10,
            q: DMatrix::identity(dim, dim),
            r: DMatrix::identity(dim, dim) * 0.1,
            p: DMatrix::identity(dim, dim),
            dt,
            u_lo: DVector::from_element(dim, -bound),
            u_hi: DVector::from_element(dim, bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.horizon == 0 {
            return Err(config("mpc horizon must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config("mpc dt must be positive"));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P", &self.p)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(config(format!("{name} must be {d}x{d}")));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(config(format!("{name} must be symmetric")));
            }
            if m.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
                return Err(config(format!("{name} must be positive semidefinite")));
            }
        }
        if self.u_lo.len() != d
            || self.u_hi.len() != d
            || self
                .u_lo
                .iter()
                .zip(self.u_hi.iter())
                .any(|(l, h)| !(l <= h))
        {
            return Err(config(
                "input box must be nonempty with one bound pair per axis",
            ));
        }
        Ok(())
    }

    /// Condensed cost `u' H u + 2 f' u` (constant term dropped), with `u`
    /// stacked as `[u_0; u_1; ...]`.
    pub fn condensed(&self, x0: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let m = self.horizon;
        let mut h = DMatrix::zeros(d * m, d * m);
        let mut f = DVector::zeros(d * m);
        for k in 0..m {
            h.view_mut((k * d, k * d), (d, d)).add_assign(&self.r);
        }
        // x_k = x0 + dt * sum_{j<k} u_j, weighted by Q for 1 <= k < M and P at k = M.
        for k in 1..=m {
            let w = if k == m { &self.p } else { &self.q };
            let wdt2 = w * (self.dt * self.dt);
            let wx = w * x0 * self.dt;
            for i in 0..k {
                f.rows_mut(i * d, d).add_assign(&wx);
                for j in 0..k {
                    h.view_mut((i * d, j * d), (d, d)).add_assign(&wdt2);
                }
            }
        }
        (h, f)
    }

    fn project(&self, u: &mut DVector<f64>) {
        let d = self.dim();
        for (i, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.u_lo[i % d], self.u_hi[i % d]);
        }
    }
}

use std::ops::AddAssign;

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// Controls `u_0 .. u_{M-1}`.
    pub controls: Vec<DVector<f64>>,
    pub iterations: usize,
    /// Norm of the gradient mapping at the returned point.
    pub residual: f64,
}

pub fn mpc_solve(spec: &MpcSpec, x0: &[f64]) -> Result<MpcSolution> {
    spec.validate()?;
    let d = spec.dim();
    if x0.len() != d {
        return Err(config(format!("initial state must have dimension {d}")));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(numeric("non-finite initial state"));
    }
    let (h, f) = spec.condensed(&DVector::from_column_slice(x0));
    // Gradient 2(Hu + f) is Lipschitz with constant 2 * lambda_max(H).
    let lip = 2.0 * h.clone().symmetric_eigen().eigenvalues.max();
    let mut u = DVector::zeros(d * spec.horizon);
    spec.project(&mut u);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    if lip > 0.0 {
        while iterations < MPC_MAX_ITERS {
            let grad = (&h * &u + &f) * 2.0;
            let mut next = &u - grad / lip;
            spec.project(&mut next);
            residual = (&u - &next).norm() * lip;
            u = next;
            iterations += 1;
            if residual < MPC_TOL {
                break;
            }
        }
    } else {
        residual = 0.0;
    }
    if residual >= MPC_TOL {
        return Err(numeric(format!(
            "mpc did not converge in {iterations} iterations (residual {residual:.3e})"
        )));
    }
    let controls = (0..spec.horizon)
        .map(|k| u.rows(k * d, d).into_owned())
        .collect();
    Ok(MpcSolution {
        controls,
        iterations,
        residual,
    })
}

/// Receding-horizon filter on policy commands: the agent regulates the error
/// to the waypoint it would reach by holding the command for the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcFilter {
    pub horizon: usize,
    pub q: f64,
    pub r: f64,
}

impl Default for MpcFilter {
    fn default() -> Self {
        Self {
            horizon: 10,
            q: 1.0,
            r: 0.1,
        }
    }
}

impl MpcFilter {
    pub fn spec(&self, dt: f64, v_max: f64) -> MpcSpec {
        MpcSpec {
            horizon: self.horizon,
            q: DMatrix::identity(2, 2) * self.q,
            r: DMatrix::identity(2, 2) * self.r,
            p: DMatrix::identity(2, 2) * self.q,
            dt,
            u_lo: DVector::from_element(2, -v_max),
            u_hi: DVector::from_element(2, v_max),
        }
    }

    pub fn filter(&self, spec: &MpcSpec, desired: Vec2) -> Result<Vec2> {
        let x0 = -desired * (spec.horizon as f64 * spec.dt);
        let sol = mpc_solve(spec, &[x0.x, x0.y])?;
        Ok(Vec2::new(sol.controls[0][0], sol.controls[0][1]))
    }

    pub fn filter_all(&self, desired: &[Vec2], dt: f64, v_max: f64) -> Result<Vec<Vec2>> {
        let spec = self.spec(dt, v_max);
        desired.iter().map(|d| self.filter(&spec, *d)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelGeometry {
    /// Distance from the platform centre to its edge, in metres.
    pub l: f64,
}

impl WheelGeometry {
    pub fn new(l: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(config("wheel geometry needs l > 0"));
        }
        Ok(Self { l })
    }
}

/// Wheel velocities for planar velocity `u` and angular rate `omega`.
pub fn wheel_speeds(u: [f64; 2], omega: f64, geom: WheelGeometry) -> [f64; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows = [[s, s], [-s, s], [-s, -s], [s, -s]];
    rows.map(|[a, b]| a * u[0] + b * u[1] + geom.l * omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2 as S;

    fn unconstrained(horizon: usize, r: f64) -> MpcSpec {
        let mut s = MpcSpec::default_for(2, 0.05, f64::INFINITY);
        s.horizon = horizon;
        s.r = DMatrix::identity(2, 2) * r;
        s
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let sol = mpc_solve(&MpcSpec::default_for(2, 0.05, 1.5), &[0.0, 0.0]).unwrap();
        assert!(sol.controls.iter().all(|u| u.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_step_closed_form() {
        let sol = mpc_solve(&unconstrained(1, 1.0), &[1.0, 0.0]).unwrap();
        let expect = -0.05 / (1.0 + 0.05 * 0.05);
        assert!((sol.controls[0][0] - expect).abs() < 1e-9);
        assert!((sol.controls[0][0] + 0.049875).abs() < 1e-6);
        assert!(sol.controls[0][1].abs() < 1e-12);
    }

    #[test]
    fn binding_box_satisfies_kkt() {
        let mut spec = MpcSpec::default_for(2, 0.05, 0.01);
        spec.horizon = 3;
        let x0 = DVector::from_vec(vec![2.0, -0.001]);
        let sol = mpc_solve(&spec, x0.as_slice()).unwrap();
        let u = DVector::from_iterator(6, sol.controls.iter().flat_map(|c| c.iter().copied()));
        let (h, f) = spec.condensed(&x0);
        let g = (&h * &u + &f) * 2.0;
        for i in 0..6 {
            let (lo, hi) = (spec.u_lo[i % 2], spec.u_hi[i % 2]);
            if u[i] <= lo + 1e-12 {
                assert!(g[i] >= -1e-7, "lower bound needs nonnegative gradient");
            } else if u[i] >= hi - 1e-12 {
                assert!(g[i] <= 1e-7);
            } else {
                assert!(g[i].abs() < 1e-7);
            }
        }
        // The x-axis optimum is far outside the box, so it clamps.
        assert!(sol.controls.iter().all(|c| c[0] == -0.01));
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let mut s = MpcSpec::default_for(2, 0.05, 1.0);
        s.q[(0, 1)] = 1.0;
        assert!(mpc_solve(&s, &[1.0, 0.0]).is_err());
        let mut s = MpcSpec::default_for(2, 0.05, 1.0);
        s.r[(0, 0)] = -1.0;
        assert!(mpc_solve(&s, &[1.0, 0.0]).is_err());
        let mut s = MpcSpec::default_for(2, 0.05, 1.0);
        s.horizon = 0;
        assert!(mpc_solve(&s, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn receding_horizon_contracts() {
        let spec = MpcSpec::default_for(2, 0.05, 1.5);
        let mut x = DVector::from_vec(vec![2.0, -1.0]);
        let mut prev = x.norm();
        for _ in 0..100 {
            let sol = mpc_solve(&spec, x.as_slice()).unwrap();
            x += &sol.controls[0] * spec.dt;
            assert!(x.norm() < prev);
            prev = x.norm();
        }
    }

    #[test]
    fn wheel_columns_match_kinematic_matrix() {
        let g = WheelGeometry::new(0.1).unwrap();
        assert_eq!(wheel_speeds([0.0, 0.0], 0.0, g), [0.0; 4]);
        assert_eq!(wheel_speeds([1.0, 0.0], 0.0, g), [S, -S, -S, S]);
        assert_eq!(wheel_speeds([0.0, 1.0], 0.0, g), [S, S, -S, -S]);
        assert_eq!(wheel_speeds([0.0, 0.0], 1.0, g), [0.1; 4]);
    }

    #[test]
    fn wheel_speeds_are_linear() {
        let g = WheelGeometry::new(0.2).unwrap();
        let base = wheel_speeds([0.3, -0.7], 0.0, g);
        let scaled = wheel_speeds([0.3 * 2.5, -0.7 * 2.5], 0.0, g);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a * 2.5 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_commands_stay_in_box_and_follow_direction() {
        let f = MpcFilter::default();
        let out = f
            .filter_all(&[Vec2::new(1.0, 0.5), Vec2::new(-3.0, 0.0)], 0.05, 1.5)
            .unwrap();
        assert!(out[0].x > 0.0 && out[0].y > 0.0);
        assert!(out[1].x < 0.0 && out[1].x >= -1.5);
    }
}
