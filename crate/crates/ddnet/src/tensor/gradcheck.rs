//! Central finite-difference verification of tape gradients.
//!
//! The harness evaluates a user-supplied graph builder twice per parameter
//! element (at `+h` and `-h`) and compares `(f+ - f-) / 2h` against the
//! adjoint from one backward pass. `grad_reverse` and `stop_gradient` are
//! identities in an ordinary forward pass, so a naive probe would disagree
//! with their declared Jacobians; the baseline pass therefore records each
//! such op's input, and probe passes replay those baselines, moving the
//! output along the declared Jacobian instead (`-lambda` through
//! grad_reverse, frozen through stop_gradient). Probes then measure exactly
//! what backward claims, for every op.

use std::rc::Rc;

use super::{FdMode, NodeId, Result, Tape, Tensor, TensorError};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Label for the graph under test (an op name or a model description).
    pub name: String,
    /// Largest relative error over every element checked.
    pub max_rel_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst_at: Option<(String, usize)>,
    /// Total parameter elements probed.
    pub elements: usize,
    /// Tolerance the sweep was judged against.
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>12.3e}  over {:>6} elems  tol {:>8.1e}  {}",
            self.name,
            self.max_rel_err,
            self.elements,
            self.tol,
            if self.passed { "ok" } else { "FAIL" }
        )?;
        if let (false, Some((p, i))) = (self.passed, &self.worst_at) {
            write!(f, "  (worst at {p}[{i}])")?;
        }
        Ok(())
    }
}

/// Anything holding named parameter tensors that a sweep may perturb.
pub trait ParamVisit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn param_elements(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// A loose bag of named tensors; the simplest [`ParamVisit`] implementation,
/// used to gradient-check individual ops.
#[derive(Debug, Clone)]
pub struct ParamBag {
    pub params: Vec<(String, Tensor)>,
}

impl ParamBag {
    pub fn new(params: Vec<(&str, Tensor)>) -> Self {
        ParamBag {
            params: params
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.with_grad()))
                .collect(),
        }
    }

    /// Registers every tensor on the tape, in order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.params.iter().map(|(n, t)| tape.param(n.clone(), t)).collect()
    }
}

impl ParamVisit for ParamBag {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (n, t) in &self.params {
            f(n, t);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (n, t) in &mut self.params {
            f(n, t);
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Absolute agreement floor, as a fraction of the relative tolerance. Some
/// parameters have a structurally zero gradient (e.g. a bias that shifts
/// every softmax logit in a row equally); for those, the central difference
/// measures nothing but evaluation round-off, and a purely relative
/// comparison against that noise is meaningless. Differences at least a
/// thousand times smaller than the requested tolerance are accepted
/// outright — far below anything a real Jacobian bug produces, comfortably
/// above round-off at the recommended step sizes.
const ABS_FLOOR_FACTOR: f64 = 1e-3;

/// Sweeps every parameter element of `model`, comparing the tape gradient of
/// the scalar produced by `build` against central finite differences with
/// step `h`. `build` must construct the same graph for the same parameter
/// values (it runs once per probe).
pub fn finite_diff_check<M, F>(
    name: &str,
    model: &M,
    build: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: ParamVisit + Clone,
    F: Fn(&M, &mut Tape) -> Result<NodeId>,
{
    // Baseline pass: record gradient-shaping inputs, then backprop.
    let mut tape = Tape::with_fd(FdMode::Capture { saved: Vec::new() });
    let loss = build(model, &mut tape)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::GradCheckAborted(format!(
            "{name}: build must return a scalar, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (pname, pid) in tape.param_nodes() {
        let g = tape
            .grad(*pid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(*pid).len()]);
        analytic.push((pname.clone(), g));
    }
    let declared = model.param_names();
    let bound: Vec<&String> = analytic.iter().map(|(n, _)| n).collect();
    for d in &declared {
        if !bound.iter().any(|b| *b == d) {
            return Err(TensorError::GradCheckAborted(format!(
                "{name}: parameter {d} was never bound by build"
            )));
        }
    }

    let saved = Rc::new(tape.take_fd_trace());
    let mut work = model.clone();

    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::with_fd(FdMode::Replay { saved: Rc::clone(&saved), cursor: 0 });
        let l = build(m, &mut t)?;
        Ok(t.value(l)[0])
    };

    let mut max_rel = 0.0f64;
    let mut worst_at = None;
    let mut elements = 0usize;

    for (pname, grad) in &analytic {
        for e in 0..grad.len() {
            let nudge = |m: &mut M, delta: f64| {
                m.visit_params_mut(&mut |n, t| {
                    if n == pname {
                        t.data_mut()[e] += delta;
                    }
                });
            };
            nudge(&mut work, h);
            let fp = eval(&work).map_err(|err| {
                TensorError::GradCheckAborted(format!("{name}: probe at {pname}[{e}]+h: {err}"))
            })?;
            nudge(&mut work, -2.0 * h);
            let fm = eval(&work).map_err(|err| {
                TensorError::GradCheckAborted(format!("{name}: probe at {pname}[{e}]-h: {err}"))
            })?;
            nudge(&mut work, h);

            if !fp.is_finite() || !fm.is_finite() {
                return Err(TensorError::GradCheckAborted(format!(
                    "{name}: non-finite loss while probing {pname}[{e}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let re = if (grad[e] - numeric).abs() <= tol * ABS_FLOOR_FACTOR {
                0.0
            } else {
                rel_err(grad[e], numeric)
            };
            if re > max_rel {
                max_rel = re;
                worst_at = Some((pname.clone(), e));
            }
            elements += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        worst_at,
        elements,
        tol,
        passed: max_rel < tol,
    })
}
