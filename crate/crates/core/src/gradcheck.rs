//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub mod suite;

/// Relative error between analytic `a` and numeric `n` derivatives:
/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps derivatives that are zero
/// up to round-off from dominating the report.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
    /// Combine steps `eps` and `eps/2` to cancel the second-order truncation term.
    pub richardson: bool,
    /// Multiply `floor` by the largest analytic gradient magnitude (at least 1).
    pub scale_floor: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-5,
            max_entries_per_param: None,
            richardson: true,
            scale_floor: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares the tape gradient of `f` against central differences for every
/// parameter entry of `store` and returns the worst relative error.
///
/// `f` must build a single-element output on the given tape deterministically.
pub fn gradient_check<F>(label: &str, store: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("eps must lie in [1e-7, 1e-3], got {}", opts.eps)));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::GradCheck {
                op: label.to_string(),
                msg: format!("non-finite output {v}"),
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v0 = tape.value(out).data()[0];
    if !v0.is_finite() {
        return Err(Error::GradCheck {
            op: label.to_string(),
            msg: format!("non-finite output {v0}"),
        });
    }
    let analytic = tape.backward(out)?.param_grads(&tape, store);

    let scale = analytic.iter().flat_map(|g| g.data()).fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = if opts.scale_floor { opts.floor * scale } else { opts.floor };
    let mut report = GradCheckReport::default();
    for pid in 0..store.len() {
        let n = store.get(pid).value.len();
        let step = match opts.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(step) {
            let mut central = |h: f64| -> Result<f64> {
                let orig = store.get(pid).value.data()[idx];
                store.get_mut(pid).value.data_mut()[idx] = orig + h;
                let plus = eval(store);
                store.get_mut(pid).value.data_mut()[idx] = orig - h;
                let minus = eval(store);
                store.get_mut(pid).value.data_mut()[idx] = orig;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                let coarse = central(opts.eps)?;
                let fine = central(opts.eps / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                central(opts.eps)?
            };
            let a = analytic[pid].data()[idx];
            let err = relative_error(a, numeric, floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.get(pid).name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
