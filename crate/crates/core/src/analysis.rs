//! Error metric, frequency sweeps and matched-accuracy speedups.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::simulation::{solve, SimulationSpec, SolutionRecord, SolveMode};

/// Relative L2 error `‖ref − sol‖ / ‖ref‖` of one state component over
/// `omega = (t_a, t_b)`, both norms by the composite trapezoidal rule.
///
/// The grid is the finer of the two sample grids restricted to `omega`; the
/// other record is resampled through its dense output unless both share the
/// same grid.
pub fn relative_l2_error(
    sol: &SolutionRecord,
    reference: &SolutionRecord,
    component: usize,
    omega: (f64, f64),
) -> Result<f64> {
    let (ta, tb) = omega;
    if !(ta < tb) {
        return Err(Error::InvalidParameter(format!(
            "error window [{ta}, {tb}] is empty"
        )));
    }
    for rec in [sol, reference] {
        if component >= rec.ns() {
            return Err(Error::IndexOutOfRange {
                index: component,
                max: rec.ns() - 1,
            });
        }
        let (start, end) = (rec.t_start(), rec.t_end());
        if ta < start || tb > end {
            let t = if ta < start { ta } else { tb };
            return Err(Error::OutsideSpan { t, start, end });
        }
    }

    let (fine, coarse) = if sol.samples.times.len() >= reference.samples.times.len() {
        (sol, reference)
    } else {
        (reference, sol)
    };
    let (grid, fine_values) = restrict(fine, component, ta, tb)?;
    let coarse_values = if coarse.samples.times == fine.samples.times {
        restrict(coarse, component, ta, tb)?.1
    } else {
        coarse.component_at(component, &grid)?
    };
    let (v_sol, v_ref) = if std::ptr::eq(fine, sol) {
        (fine_values, coarse_values)
    } else {
        (coarse_values, fine_values)
    };

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..grid.len() {
        let h = 0.5 * (grid[i] - grid[i - 1]);
        let (e0, e1) = (v_ref[i - 1] - v_sol[i - 1], v_ref[i] - v_sol[i]);
        num += h * (e0 * e0 + e1 * e1);
        den += h * (v_ref[i - 1] * v_ref[i - 1] + v_ref[i] * v_ref[i]);
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok((num / den).sqrt())
}

/// Sample times inside `[ta, tb]` (endpoints included) and the matching
/// component values, reusing stored samples where possible.
fn restrict(
    rec: &SolutionRecord,
    component: usize,
    ta: f64,
    tb: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let times = &rec.samples.times;
    let values = &rec.samples.states[component];
    let lo = times.partition_point(|&t| t < ta);
    let hi = times.partition_point(|&t| t <= tb);
    let mut grid = Vec::with_capacity(hi - lo + 2);
    let mut out = Vec::with_capacity(hi - lo + 2);
    if times.get(lo) != Some(&ta) {
        grid.push(ta);
        out.push(rec.component_at(component, &[ta])?[0]);
    }
    grid.extend_from_slice(&times[lo..hi]);
    out.extend_from_slice(&values[lo..hi]);
    if grid.last() != Some(&tb) {
        grid.push(tb);
        out.push(rec.component_at(component, &[tb])?[0]);
    }
    Ok((grid, out))
}

/// Error of one MPDE run against the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub fs: f64,
    pub epsilon: f64,
    pub mode: SolveMode,
    pub np: usize,
}

/// Error of an MPDE record against a reference over the full common span.
pub fn error_report(
    sol: &SolutionRecord,
    reference: &SolutionRecord,
    component: usize,
) -> Result<ErrorReport> {
    let end = sol.t_end().min(reference.t_end());
    Ok(ErrorReport {
        fs: 1.0 / sol.ts,
        epsilon: relative_l2_error(sol, reference, component, (0.0, end))?,
        mode: sol.mode,
        np: sol.np,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// Run frequencies one after another so timings are not skewed by
    /// concurrent solves; otherwise frequencies run in parallel.
    pub serial_timing: bool,
    /// Timed repeats after one discarded warm-up run; the median is kept.
    /// Zero times the single accuracy run.
    pub timing_repeats: usize,
    pub reference_tol: f64,
    pub mpde_tol: f64,
    /// State index the error is measured on.
    pub component: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            serial_timing: false,
            timing_repeats: 3,
            reference_tol: 1e-12,
            mpde_tol: 1e-6,
            component: 1,
        }
    }
}

/// One row of a frequency sweep; values of failed solves are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fs: f64,
    pub eps_simplified: f64,
    pub eps_original: f64,
    pub t_mpde_simplified: f64,
    pub t_mpde_original: f64,
    pub t_reference: f64,
    /// `t_reference / t_mpde_simplified`
    pub speedup: f64,
    pub steps_simplified: usize,
    pub steps_original: usize,
    pub steps_reference: usize,
    pub error: Option<String>,
}

impl SweepRow {
    fn empty(fs: f64) -> Self {
        Self {
            fs,
            eps_simplified: f64::NAN,
            eps_original: f64::NAN,
            t_mpde_simplified: f64::NAN,
            t_mpde_original: f64::NAN,
            t_reference: f64::NAN,
            speedup: f64::NAN,
            steps_simplified: 0,
            steps_original: 0,
            steps_reference: 0,
            error: None,
        }
    }
}

/// Rows sorted by ascending `fs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Solves `spec`, then repeats the solve `repeats` times and returns the
/// first record with the median repeat time.
fn timed_solve(spec: &SimulationSpec, repeats: usize) -> Result<(SolutionRecord, f64)> {
    let record = solve(spec)?;
    if repeats == 0 {
        let t = record.solve_time;
        return Ok((record, t));
    }
    let times = (0..repeats)
        .map(|_| solve(spec).map(|r| r.solve_time))
        .collect::<Result<Vec<_>>>()?;
    Ok((record, median(times)))
}

fn with_mode(base: &SimulationSpec, fs: f64, mode: SolveMode, tol: f64) -> SimulationSpec {
    SimulationSpec {
        fs,
        mode,
        tolerances: IntegratorConfig {
            rtol: tol,
            atol: tol,
            ..base.tolerances
        },
        ..base.clone()
    }
}

fn sweep_row(fs: f64, base: &SimulationSpec, opts: &SweepOptions) -> SweepRow {
    let mut row = SweepRow::empty(fs);
    let reference = match timed_solve(
        &with_mode(base, fs, SolveMode::Reference, opts.reference_tol),
        opts.timing_repeats,
    ) {
        Ok((rec, t)) => {
            row.t_reference = t;
            row.steps_reference = rec.steps;
            rec
        }
        Err(e) => {
            row.error = Some(format!("reference: {e}"));
            return row;
        }
    };
    let mut failures = Vec::new();
    for mode in [SolveMode::MpdeSimplified, SolveMode::MpdeOriginal] {
        let spec = with_mode(base, fs, mode, opts.mpde_tol);
        let outcome = timed_solve(&spec, opts.timing_repeats).and_then(|(rec, t)| {
            let eps = relative_l2_error(&rec, &reference, opts.component, (0.0, spec.t_end))?;
            Ok((eps, t, rec.steps))
        });
        match (mode, outcome) {
            (SolveMode::MpdeSimplified, Ok((eps, t, steps))) => {
                row.eps_simplified = eps;
                row.t_mpde_simplified = t;
                row.steps_simplified = steps;
                row.speedup = row.t_reference / t;
            }
            (_, Ok((eps, t, steps))) => {
                row.eps_original = eps;
                row.t_mpde_original = t;
                row.steps_original = steps;
            }
            (_, Err(e)) => failures.push(format!("{mode}: {e}")),
        }
    }
    if !failures.is_empty() {
        row.error = Some(failures.join("; "));
    }
    row
}

/// Reference, simplified and original MPDE runs at every frequency.
/// Individual failures are recorded in the row instead of aborting.
pub fn frequency_sweep(
    freqs: &[f64],
    base: &SimulationSpec,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if freqs.is_empty() {
        return Err(Error::InvalidParameter("frequency list is empty".into()));
    }
    if let Some(bad) = freqs.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "frequency {bad} must be positive"
        )));
    }
    let mut freqs = freqs.to_vec();
    freqs.sort_by(f64::total_cmp);
    let rows = if opts.serial_timing {
        freqs.iter().map(|&fs| sweep_row(fs, base, opts)).collect()
    } else {
        freqs
            .par_iter()
            .map(|&fs| sweep_row(fs, base, opts))
            .collect()
    };
    Ok(SweepReport { rows })
}

/// Reference run at the loosest tolerance decade that is at least as
/// accurate as the simplified MPDE run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedAccuracy {
    pub fs: f64,
    pub eps_mpde: f64,
    pub reference_tol: f64,
    pub eps_reference: f64,
    pub t_reference: f64,
    pub t_mpde: f64,
    pub speedup: f64,
}

/// Loosest and tightest tolerance decades searched.
const DECADES: (i32, i32) = (1, 12);

/// Bisection over reference tolerances `1e-1 … 1e-12` for the loosest one
/// whose error (against the `opts.reference_tol` oracle) does not exceed the
/// simplified MPDE error, then `t_ref / t_mpde`.
pub fn matched_accuracy_speedup(
    fs: f64,
    base: &SimulationSpec,
    opts: &SweepOptions,
) -> Result<MatchedAccuracy> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "frequency {fs} must be positive"
        )));
    }
    let oracle = solve(&with_mode(
        base,
        fs,
        SolveMode::Reference,
        opts.reference_tol,
    ))?;
    let mpde_spec = with_mode(base, fs, SolveMode::MpdeSimplified, opts.mpde_tol);
    let (mpde, t_mpde) = timed_solve(&mpde_spec, opts.timing_repeats)?;
    let window = (0.0, base.t_end);
    let eps_mpde = relative_l2_error(&mpde, &oracle, opts.component, window)?;

    let eps_at = |decade: i32| -> Result<f64> {
        let tol = 10f64.powi(-decade);
        let rec = solve(&with_mode(base, fs, SolveMode::Reference, tol))?;
        relative_l2_error(&rec, &oracle, opts.component, window)
    };
    let (mut lo, mut hi) = DECADES;
    let eps_lo = eps_at(lo)?;
    if eps_lo <= eps_mpde {
        return Err(Error::MatchedAccuracy(format!(
            "reference at rtol 1e-{lo} already reaches eps = {eps_lo:e} <= MPDE eps = {eps_mpde:e}"
        )));
    }
    // invariant: decade lo is too loose, decade hi is accurate enough
    let mut eps_hi = eps_at(hi)?;
    if eps_hi > eps_mpde {
        return Err(Error::MatchedAccuracy(format!(
            "reference at rtol 1e-{hi} has eps = {eps_hi:e} > MPDE eps = {eps_mpde:e}"
        )));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let eps = eps_at(mid)?;
        if eps <= eps_mpde {
            hi = mid;
            eps_hi = eps;
        } else {
            lo = mid;
        }
    }
    let reference_tol = 10f64.powi(-hi);
    let (_, t_reference) = timed_solve(
        &with_mode(base, fs, SolveMode::Reference, reference_tol),
        opts.timing_repeats,
    )?;
    Ok(MatchedAccuracy {
        fs,
        eps_mpde,
        reference_tol,
        eps_reference: eps_hi,
        t_reference,
        t_mpde,
        speedup: t_reference / t_mpde,
    })
}
