//! Time series recorded by a simulation run, and their CSV output.

use std::io::Write;

use serde::Serialize;

use crate::diagnostics::LyapunovConstants;
use crate::error::{Error, Result};
use crate::grid::{l2_norm, sup_norm};
use crate::model::RiemannMap;

/// One row per time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub u_norm: f64,
    pub v_norm: f64,
    pub e_norm: f64,
    pub eps_norm: f64,
    pub control: f64,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v4: f64,
    pub s: f64,
    /// Kernel acquisition wall time, nonzero only on refresh steps.
    pub kernel_ns: u64,
    /// L2 norm of the kernel time derivative between the last two refreshes.
    pub kt_norm: f64,
    /// Target-system boundary value `z(1, t)`.
    pub z1: f64,
    /// `||rho - rho*||` (veh/m) and `||v1 - v*||` (m/s) over the road.
    pub rho_dev: f64,
    pub vel_dev: f64,
}

impl TraceRow {
    pub const HEADER: &'static str =
        "t,u_norm,v_norm,e_norm,eps_norm,control,v1,v2,v3,v4,s,kernel_ns,kt_norm,z1,rho_dev,vel_dev";
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub c_hat: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceSummary {
    pub refreshes: usize,
    pub kernel_ns_total: u64,
    /// Largest kernel and inverse-kernel sup norms seen.
    pub k_bar: f64,
    pub l_bar: f64,
    /// `sum ||K_t||^2 dt` over the refreshes.
    pub kt_sq_integral: f64,
    /// Steps where `k1 S <= V4 <= k2 S` failed.
    pub equivalence_violations: usize,
    /// Largest `|c_hat| - c_bar` seen (<= 0 when the projection bound holds).
    pub c_hat_excess: f64,
    /// Largest per-step increase of `V3`.
    pub v3_max_increase: f64,
    pub constants: Option<LyapunovConstants>,
    pub k1: f64,
    pub k2: f64,
    pub epsilon0: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub label: String,
    pub nodes: Vec<f64>,
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
    pub summary: TraceSummary,
    pub map: RiemannMap,
}

impl SimTrace {
    pub fn first(&self) -> &TraceRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has at least one row")
    }

    /// Physical `(rho, v1)` fields of a snapshot.
    pub fn physical(&self, snap: &Snapshot) -> (Vec<f64>, Vec<f64>) {
        self.map.fields_to_physical(&self.nodes, &snap.u, &snap.v)
    }

    /// Sup norm of the density deviation `rho - rho*` in a snapshot.
    pub fn density_amplitude(&self, snap: &Snapshot) -> f64 {
        let (rho, _) = self.physical(snap);
        let dev: Vec<f64> = rho.iter().map(|r| r - self.map.rho_star()).collect();
        sup_norm(&dev)
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() < 1e-9)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, config_hash: Option<&str>) -> Result<()> {
        if let Some(h) = config_hash {
            writeln!(w, "# config_hash: {h}")?;
        }
        writeln!(w, "{}", TraceRow::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.u_norm,
                r.v_norm,
                r.e_norm,
                r.eps_norm,
                r.control,
                r.v1,
                r.v2,
                r.v3,
                r.v4,
                r.s,
                r.kernel_ns,
                r.kt_norm,
                r.z1,
                r.rho_dev,
                r.vel_dev
            )?;
        }
        Ok(())
    }

    /// Long-format field snapshots: `t,x,u,v,rho,vel,c_hat`.
    pub fn write_fields_csv<W: Write>(&self, w: &mut W, config_hash: Option<&str>) -> Result<()> {
        if let Some(h) = config_hash {
            writeln!(w, "# config_hash: {h}")?;
        }
        writeln!(w, "t,x,u,v,rho,vel,c_hat")?;
        for snap in &self.snapshots {
            let (rho, vel) = self.physical(snap);
            for (i, &x) in self.nodes.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    snap.t, x, snap.u[i], snap.v[i], rho[i], vel[i], snap.c_hat[i]
                )?;
            }
        }
        Ok(())
    }
}

/// Relative L2 gaps `||rho_a - rho_b|| / rho*` and `||v_a - v_b|| / v*` between
/// two snapshots of runs on the same grid.
pub fn physical_gap(a: &SimTrace, sa: &Snapshot, sb: &Snapshot) -> (f64, f64) {
    let (ra, va) = a.physical(sa);
    let (rb, vb) = a.physical(sb);
    let dr: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| x - y).collect();
    let dv: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
    (l2_norm(&dr) / a.map.rho_star(), l2_norm(&dv) / a.map.v_star())
}

/// Per-snapshot `(t, density gap, speed gap)` between two runs sampled at
/// the same times.
pub fn trajectory_gaps(a: &SimTrace, b: &SimTrace) -> Result<Vec<(f64, f64, f64)>> {
    if a.snapshots.len() != b.snapshots.len() || a.nodes.len() != b.nodes.len() {
        return Err(Error::Shape(format!(
            "runs hold {} and {} snapshots on {} and {} nodes",
            a.snapshots.len(),
            b.snapshots.len(),
            a.nodes.len(),
            b.nodes.len()
        )));
    }
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(sa, sb)| {
            if (sa.t - sb.t).abs() > 1e-9 {
                return Err(Error::Shape(format!("snapshot times {} and {} differ", sa.t, sb.t)));
            }
            let (dr, dv) = physical_gap(a, sa, sb);
            Ok((sa.t, dr, dv))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{run_closed_loop, run_open_loop, ControllerConfig, RunOptions, Scenario};
    use crate::grid::GridSpec;

    fn short() -> Scenario {
        let mut sc = Scenario::reference();
        sc.grid = GridSpec::new(30, 0.1, 2.0).unwrap();
        sc
    }

    #[test]
    fn gaps_between_identical_runs_vanish() {
        let sc = short();
        let a = run_open_loop(&sc, &ControllerConfig::default(), RunOptions::default()).unwrap();
        let gaps = trajectory_gaps(&a, &a).unwrap();
        assert_eq!(gaps.len(), 3);
        assert!(gaps.iter().all(|g| g.1 == 0.0 && g.2 == 0.0));
    }

    #[test]
    fn gap_matches_hand_computed_norm() {
        let sc = short();
        let cfg = ControllerConfig::default();
        let a = run_open_loop(&sc, &cfg, RunOptions::default()).unwrap();
        let b = run_closed_loop(&sc, &cfg, None, RunOptions::default()).unwrap();
        let (t, dr, _) = *trajectory_gaps(&a, &b).unwrap().last().unwrap();
        let (ra, _) = a.physical(a.snapshot_at(t).unwrap());
        let (rb, _) = b.physical(b.snapshot_at(t).unwrap());
        // trapezoid rule written out
        let n = ra.len();
        let h = 1.0 / (n - 1) as f64;
        let sq: f64 = (0..n).map(|i| (if i == 0 || i == n - 1 { 0.5 } else { 1.0 }) * h * (ra[i] - rb[i]).powi(2)).sum();
        assert!((dr - sq.sqrt() / a.map.rho_star()).abs() <= 1e-12 * dr.max(1e-300));
        assert!(dr > 0.0);
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let sc = short();
        let cfg = ControllerConfig::default();
        let a = run_open_loop(&sc, &cfg, RunOptions::default()).unwrap();
        let b = run_open_loop(&sc, &cfg, RunOptions { snapshot_every: 5, diagnostics: false }).unwrap();
        assert!(matches!(trajectory_gaps(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let sc = short();
        let a = run_open_loop(&sc, &ControllerConfig::default(), RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf, Some("abc")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: abc");
        assert_eq!(lines[1], TraceRow::HEADER);
        assert_eq!(lines.len(), 2 + 21);
        let cols = TraceRow::HEADER.split(',').count();
        assert!(lines[2..].iter().all(|l| l.split(',').count() == cols));
    }
}
