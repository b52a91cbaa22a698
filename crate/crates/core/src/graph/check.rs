//! Central-difference gradient checking.

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (evenly strided); `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeafCheck {
    pub input: usize,
    pub checked: usize,
    /// Coordinates whose ±step interval crosses a kink (a relu sign, a
    /// clamp boundary or a data-dependent branch); finite differences are
    /// meaningless there, so they are not compared.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error <= self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.leaves.iter().map(|l| l.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.leaves.iter().map(|l| l.skipped).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative finite-difference resolution: central differences of a value
/// of magnitude `|f|` carry roundoff of roughly `1e-16 · |f| / step`, so
/// gradients below `NOISE_FLOOR · |f|` are compared on an absolute scale.
pub const NOISE_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarOutput(v.shape().to_vec()));
    }
    Ok((v.data()[0], tape.branch_signature()))
}

/// Compares the taped gradient of the scalar built by `f` against central
/// differences for every input. `f` receives one trainable leaf per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with(f, inputs, opts, false)
}

pub(crate) fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    opts: GradCheckOptions,
    fault: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    tape.set_fault_injection(fault);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarOutput(shape));
    }
    let grads = tape.backward(out, &Tensor::full(&shape, 1.0))?;
    let floor = NOISE_FLOOR * tape.value(out).data()[0].abs().max(1.0);

    let mut leaves = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient");
        let n = inputs[i].len();
        let stride = opts.max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut check = LeafCheck {
            input: i,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: 0,
        };
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            if sig_plus != sig_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[j], numeric, floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = j;
            }
            check.checked += 1;
        }
        leaves.push(check);
    }
    Ok(GradCheckReport {
        leaves,
        tolerance: opts.tolerance,
    })
}
