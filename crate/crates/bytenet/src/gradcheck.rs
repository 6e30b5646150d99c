//! Central-difference gradient checking, 64-bit only.
//!
//! Finite differences are too noisy at 32-bit precision to separate an
//! autodiff bug from roundoff, so every check in this crate runs the model
//! at f64 and compares with relative error |ag - fd| / (|fd| + 1e-8).

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over all probed slots.
    pub max_rel_err: f64,
    /// Slot index where it occurred.
    pub worst_slot: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub slots: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Probes `slots` scalar parameters held inside `state`.
///
/// `slot` must hand back a mutable reference to the i-th scalar; `eval`
/// re-runs the full forward pass and returns the loss. Each slot is
/// perturbed by +/- h, restored exactly, and compared against
/// `analytic[i]`.
pub fn fd_report<S>(
    state: &mut S,
    slots: usize,
    slot: &mut dyn FnMut(&mut S, usize) -> &mut f64,
    eval: &mut dyn FnMut(&mut S) -> f64,
    analytic: &[f64],
    h: f64,
) -> FdReport {
    assert_eq!(analytic.len(), slots, "analytic gradient length mismatch");
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_slot: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        slots,
    };
    for i in 0..slots {
        let orig = *slot(state, i);
        *slot(state, i) = orig + h;
        let up = eval(state);
        *slot(state, i) = orig - h;
        let down = eval(state);
        *slot(state, i) = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = rel_err(analytic[i], fd);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_slot = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = fd;
        }
    }
    report
}
