//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mpde::{IntegratorConfig, SaturationCurve, SimulationSpec, SolveMode};
use nalgebra::{Matrix2, Vector2};

pub const L_LINEAR: f64 = 1e-3;

pub fn linear_spec(fs: f64, mode: SolveMode, tol: f64) -> SimulationSpec {
    let mut spec = SimulationSpec {
        fs,
        mode,
        tolerances: IntegratorConfig::with_tolerance(tol),
        ..SimulationSpec::default()
    };
    spec.circuit.curve = SaturationCurve::constant(L_LINEAR);
    spec
}

/// Exact response of the constant-inductance buck: on every interval with
/// constant input, `x' = M x + g` is propagated with the matrix exponential.
pub fn lti_oracle(spec: &SimulationSpec, times: &[f64], averaged: bool) -> Vec<Vector2<f64>> {
    let p = &spec.circuit;
    let a = Matrix2::new(L_LINEAR, 0.0, 0.0, p.c);
    let b = Matrix2::new(0.0, 1.0, -1.0, 1.0 / p.r);
    let a_inv = a.try_inverse().unwrap();
    let m = -a_inv * b;
    let m_inv = m.try_inverse().unwrap();
    let ts = 1.0 / spec.fs;
    let input = |t_mid: f64| -> f64 {
        if averaged {
            p.d_pulse * p.vi
        } else {
            let phase = t_mid / ts - (t_mid / ts).floor();
            if phase < p.d_pulse {
                p.vi
            } else {
                0.0
            }
        }
    };
    let mut events: Vec<f64> = times.to_vec();
    let periods = (spec.t_end / ts).ceil() as usize + 1;
    for k in 0..periods {
        for f in [0.0, p.d_pulse] {
            let t = (k as f64 + f) * ts;
            if t > 0.0 && t < spec.t_end {
                events.push(t);
            }
        }
    }
    events.sort_by(f64::total_cmp);
    events.dedup();

    let mut x = Vector2::new(spec.x0[0], spec.x0[1]);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let mut next = 0;
    for &e in &events {
        if e > t {
            let g = a_inv * Vector2::new(input(0.5 * (t + e)), 0.0);
            let phi = (m * (e - t)).exp();
            x = phi * x + (phi - Matrix2::identity()) * (m_inv * g);
            t = e;
        }
        while next < times.len() && times[next] == t {
            out.push(x);
            next += 1;
        }
    }
    assert_eq!(out.len(), times.len());
    out
}
