//! Class-conditional Gaussian mixture appearance model.
//!
//! Four diagonal Gaussians over feature vectors: background base (0),
//! foreground base (1), hard background (2) and hard foreground (3), with a
//! uniform prior. Parameters are estimated in closed form from soft
//! assignments, blended into the previous frame's estimate with a constant
//! learning rate, and evaluated as per-component log-density scores. Every
//! step is recorded on a [`Tape`] so the segmentation loss differentiates
//! through the model's learning as well as its evaluation.
//!
//! A component is stored as one `2×D` tensor whose rows are the mean and the
//! diagonal variance.

use crate::error::{Error, Result};
use crate::graph::{softplus, softplus_inverse, NodeId, OpTag, Tape};
use crate::tensor::{self, Tensor};

pub const NUM_COMPONENTS: usize = 4;
pub const BACKGROUND: usize = 0;
pub const FOREGROUND: usize = 1;
pub const HARD_BACKGROUND: usize = 2;
pub const HARD_FOREGROUND: usize = 3;

/// Initial value of every regularizer entry.
pub const DEFAULT_REGULARIZER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    /// Blend weight of the fresh estimate, in `[0, 1]`.
    pub lambda: f64,
    /// Components whose assignment mass is below `mass_floor · H · W` are left unchanged.
    pub mass_floor: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            lambda: 0.1,
            mass_floor: 1e-6,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "learning rate {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.mass_floor > 0.0) {
            return Err(Error::invalid("mass floor must be positive"));
        }
        Ok(())
    }
}

/// Structural switches used by the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelOptions {
    /// Base components only.
    pub unimodal: bool,
    /// Cut gradients through the parameter estimation inputs (features and assignments).
    pub detach_estimation: bool,
}

impl ModelOptions {
    pub fn num_components(&self) -> usize {
        if self.unimodal {
            2
        } else {
            NUM_COMPONENTS
        }
    }
}

/// Mixture parameters living on a tape, one `2×D` node per component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureNodes {
    pub components: Vec<NodeId>,
}

/// Per-component regularizer nodes `softplus(r_raw[k])`, from a `K×D` raw parameter node.
pub fn regularizers(tape: &mut Tape, r_raw: NodeId, k: usize) -> Result<Vec<NodeId>> {
    (0..k)
        .map(|i| {
            let row = tape.record(OpTag::SelectRow(i), &[r_raw])?;
            tape.record(OpTag::Softplus, &[row])
        })
        .collect()
}

/// Raw regularizer parameters whose softplus is `value` everywhere.
pub fn initial_regularizer_raw(feature_dim: usize, value: f64) -> Tensor {
    Tensor::full(&[NUM_COMPONENTS, feature_dim], softplus_inverse(value))
}

/// Hard base assignments from a binary mask: channel 0 is `1 - y`, channel 1
/// is `y`, channels 2 and 3 are zero.
pub fn assignments_from_mask(y: &Tensor) -> Result<Tensor> {
    let (h, w, c) = y.hwc()?;
    if c != 1 {
        return Err(Error::shape("mask must be single-channel"));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask is not binary"));
    }
    let mut out = vec![0.0; h * w * NUM_COMPONENTS];
    for (p, &v) in y.data().iter().enumerate() {
        out[p * NUM_COMPONENTS + BACKGROUND] = 1.0 - v;
        out[p * NUM_COMPONENTS + FOREGROUND] = v;
    }
    Tensor::new(vec![h, w, NUM_COMPONENTS], out)
}

pub fn weighted_moments(tape: &mut Tape, x: NodeId, alpha: NodeId, r: NodeId) -> Result<NodeId> {
    tape.record(OpTag::WeightedMoments, &[x, alpha, r])
}

pub fn scores(tape: &mut Tape, x: NodeId, components: &[NodeId]) -> Result<NodeId> {
    let mut inputs = Vec::with_capacity(components.len() + 1);
    inputs.push(x);
    inputs.extend_from_slice(components);
    tape.record(OpTag::Scores, &inputs)
}

/// Posteriors of the two base components only; the uniform prior cancels.
pub fn base_posteriors(tape: &mut Tape, s: NodeId) -> Result<NodeId> {
    let base = tape.slice_channels(s, 0, 2)?;
    tape.softmax(base)
}

/// Assignments of the hard-example components: the part of each base
/// posterior that exceeds its base assignment.
pub fn residual_assignments(tape: &mut Tape, post: NodeId, alpha_base: NodeId) -> Result<NodeId> {
    let diff = tape.sub(post, alpha_base)?;
    tape.relu(diff)
}

pub fn inference(tape: &mut Tape, x: NodeId, theta: &MixtureNodes) -> Result<NodeId> {
    scores(tape, x, &theta.components)
}

fn assignment_mass(tape: &Tape, alpha: NodeId) -> f64 {
    tape.value(alpha).sum()
}

fn mass_floor(tape: &Tape, x: NodeId, cfg: &UpdateConfig) -> Result<f64> {
    let (h, w, _) = tape.value(x).hwc()?;
    Ok(cfg.mass_floor * (h * w) as f64)
}

/// Input gates for the estimation step: identity, or stop-gradient when
/// estimation is detached.
fn estimation_input(tape: &mut Tape, id: NodeId, opts: &ModelOptions) -> Result<NodeId> {
    if opts.detach_estimation {
        tape.stop_gradient(id)
    } else {
        Ok(id)
    }
}

/// Fresh hard-example estimates from base estimates `base` (used to form
/// base posteriors) and base assignments `alpha_base` (`H×W×2`). `None` marks
/// a component whose residual mass is below `floor`.
#[allow(clippy::too_many_arguments)]
fn estimate_residuals(
    tape: &mut Tape,
    x: NodeId,
    x_est: NodeId,
    base: [NodeId; 2],
    alpha_base: NodeId,
    r: &[NodeId],
    floor: f64,
    opts: &ModelOptions,
) -> Result<[Option<NodeId>; 2]> {
    let s = scores(tape, x, &base)?;
    let post = tape.softmax(s)?;
    let resid = residual_assignments(tape, post, alpha_base)?;
    let mut out = [None; 2];
    for (i, k) in [HARD_BACKGROUND, HARD_FOREGROUND].into_iter().enumerate() {
        let a = tape.slice_channels(resid, i, 1)?;
        if assignment_mass(tape, a) < floor {
            continue;
        }
        let a = estimation_input(tape, a, opts)?;
        out[i] = Some(weighted_moments(tape, x_est, a, r[k])?);
    }
    Ok(out)
}

/// First-frame model from a ground-truth binary mask `y` (`H×W`), without blending.
///
/// Empty hard-example components take the parameters of their class's base
/// component.
pub fn init_first_frame(
    tape: &mut Tape,
    x: NodeId,
    y: &Tensor,
    r: &[NodeId],
    cfg: &UpdateConfig,
    opts: &ModelOptions,
) -> Result<MixtureNodes> {
    cfg.validate()?;
    let (h, w, _) = tape.value(x).hwc()?;
    if y.len() != h * w {
        return Err(Error::shape(format!(
            "mask {:?} does not match {h}×{w} features",
            y.shape()
        )));
    }
    let y = y.clone().reshape(&[h, w, 1])?;
    let alpha = assignments_from_mask(&y)?;
    let floor = mass_floor(tape, x, cfg)?;
    let fg_mass = y.sum();
    if fg_mass < floor {
        return Err(Error::invalid("first-frame mask has no foreground pixels"));
    }
    if (h * w) as f64 - fg_mass < floor {
        return Err(Error::invalid("first-frame mask has no background pixels"));
    }
    let x_est = estimation_input(tape, x, opts)?;
    let alpha_base = tape.constant(tensor::slice_channels(&alpha, 0, 2)?);
    let mut base = [x; 2];
    for k in [BACKGROUND, FOREGROUND] {
        let a = tape.slice_channels(alpha_base, k, 1)?;
        base[k] = weighted_moments(tape, x_est, a, r[k])?;
    }
    let mut components = base.to_vec();
    if opts.num_components() == NUM_COMPONENTS {
        let resid = estimate_residuals(tape, x, x_est, base, alpha_base, r, floor, opts)?;
        for (i, est) in resid.into_iter().enumerate() {
            components.push(est.unwrap_or(base[i]));
        }
    }
    Ok(MixtureNodes { components })
}

/// One model update from the coarse soft mask `y_soft` (`H×W×1`, in `[0, 1]`).
///
/// Order: base assignments from the mask, fresh base estimates, base
/// posteriors under the fresh estimates, residual assignments, fresh
/// hard-example estimates, then blending of all components. A component with
/// too little assignment mass keeps its previous parameters; its previous
/// parameters also stand in for the fresh base estimate when forming posteriors.
pub fn update(
    tape: &mut Tape,
    x: NodeId,
    y_soft: NodeId,
    prev: &MixtureNodes,
    r: &[NodeId],
    cfg: &UpdateConfig,
    opts: &ModelOptions,
) -> Result<MixtureNodes> {
    cfg.validate()?;
    let (h, w, _) = tape.value(x).hwc()?;
    let yv = tape.value(y_soft);
    if yv.len() != h * w {
        return Err(Error::shape(format!(
            "soft mask {:?} does not match {h}×{w} features",
            yv.shape()
        )));
    }
    if yv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("soft mask outside [0, 1]"));
    }
    if prev.components.len() != opts.num_components() {
        return Err(Error::shape(format!(
            "model has {} components, expected {}",
            prev.components.len(),
            opts.num_components()
        )));
    }
    let d = tape.value(x).hwc()?.2;
    if tape.value(prev.components[0]).shape() != [2, d] {
        return Err(Error::shape("model feature dimension differs from features"));
    }
    if cfg.lambda == 0.0 {
        return Ok(prev.clone());
    }
    let floor = mass_floor(tape, x, cfg)?;
    let y_soft = tape.slice_channels(y_soft, 0, 1)?;
    let bg = tape.one_minus(y_soft)?;
    let alpha_base = tape.concat(&[bg, y_soft])?;
    let x_est = estimation_input(tape, x, opts)?;

    let mut fresh: Vec<Option<NodeId>> = vec![None; opts.num_components()];
    let mut base = [x; 2];
    for k in [BACKGROUND, FOREGROUND] {
        let a = tape.slice_channels(alpha_base, k, 1)?;
        if assignment_mass(tape, a) < floor {
            base[k] = prev.components[k];
        } else {
            let a = estimation_input(tape, a, opts)?;
            let est = weighted_moments(tape, x_est, a, r[k])?;
            fresh[k] = Some(est);
            base[k] = est;
        }
    }
    if opts.num_components() == NUM_COMPONENTS {
        let resid = estimate_residuals(tape, x, x_est, base, alpha_base, r, floor, opts)?;
        fresh[HARD_BACKGROUND] = resid[0];
        fresh[HARD_FOREGROUND] = resid[1];
    }

    let mut components = Vec::with_capacity(fresh.len());
    for (k, est) in fresh.into_iter().enumerate() {
        components.push(match est {
            Some(est) => tape.record(OpTag::EmaBlend(cfg.lambda), &[prev.components[k], est])?,
            None => prev.components[k],
        });
    }
    Ok(MixtureNodes { components })
}

/// Plain-value snapshot of a mixture: means and variances `K×D`, plus the
/// raw (pre-softplus) regularizer parameters `4×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmState {
    pub means: Tensor,
    pub variances: Tensor,
    pub r_raw: Tensor,
}

impl GmmState {
    pub fn from_nodes(tape: &Tape, theta: &MixtureNodes, r_raw: &Tensor) -> Result<Self> {
        let k = theta.components.len();
        let d = tape.value(theta.components[0]).shape()[1];
        let mut means = Vec::with_capacity(k * d);
        let mut vars = Vec::with_capacity(k * d);
        for &c in &theta.components {
            let v = tape.value(c).data();
            means.extend_from_slice(&v[..d]);
            vars.extend_from_slice(&v[d..]);
        }
        Ok(GmmState {
            means: Tensor::new(vec![k, d], means)?,
            variances: Tensor::new(vec![k, d], vars)?,
            r_raw: r_raw.clone(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// `softplus(r_raw)`, `4×D`.
    pub fn regularizer(&self) -> Tensor {
        self.r_raw.map(softplus)
    }

    /// Loads the state onto `tape` as constants.
    pub fn to_nodes(&self, tape: &mut Tape) -> Result<MixtureNodes> {
        let d = self.feature_dim();
        let components = (0..self.num_components())
            .map(|k| {
                let mut row = self.means.data()[k * d..(k + 1) * d].to_vec();
                row.extend_from_slice(&self.variances.data()[k * d..(k + 1) * d]);
                Tensor::new(vec![2, d], row).map(|t| tape.constant(t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureNodes { components })
    }

    fn constant_regularizers(&self, tape: &mut Tape, opts: &ModelOptions) -> Result<Vec<NodeId>> {
        let raw = tape.constant(self.r_raw.clone());
        regularizers(tape, raw, opts.num_components())
    }

    /// First-frame model from features `x` (`H×W×D`) and a binary mask `y` (`H×W`).
    pub fn init_first_frame(
        x: &Tensor,
        y: &Tensor,
        r_raw: &Tensor,
        cfg: &UpdateConfig,
        opts: &ModelOptions,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let raw = tape.constant(r_raw.clone());
        let r = regularizers(&mut tape, raw, opts.num_components())?;
        let theta = init_first_frame(&mut tape, xn, y, &r, cfg, opts)?;
        Self::from_nodes(&tape, &theta, r_raw)
    }

    pub fn update(
        &self,
        x: &Tensor,
        y_soft: &Tensor,
        cfg: &UpdateConfig,
        opts: &ModelOptions,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (h, w, _) = x.hwc()?;
        let y = tape.constant(y_soft.clone().reshape(&[h, w, 1])?);
        let prev = self.to_nodes(&mut tape)?;
        let r = self.constant_regularizers(&mut tape, opts)?;
        let theta = update(&mut tape, xn, y, &prev, &r, cfg, opts)?;
        Self::from_nodes(&tape, &theta, &self.r_raw)
    }

    /// Scores of every component, `H×W×K`.
    pub fn inference(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let theta = self.to_nodes(&mut tape)?;
        let s = inference(&mut tape, xn, &theta)?;
        Ok(tape.value(s).clone())
    }

    pub fn to_bundle(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gmm.mean".to_string(), self.means.clone()),
            ("gmm.var".to_string(), self.variances.clone()),
            ("gmm.r_raw".to_string(), self.r_raw.clone()),
        ]
    }

    pub fn from_bundle(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let state = GmmState {
            means: get("gmm.mean")?,
            variances: get("gmm.var")?,
            r_raw: get("gmm.r_raw")?,
        };
        if state.means.shape() != state.variances.shape() {
            return Err(Error::shape("mean and variance tables differ in shape"));
        }
        Ok(state)
    }
}
