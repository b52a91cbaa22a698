//! The trainable network around the appearance model: a small strided
//! encoder, the mask-propagation module, the fusion module with its coarse
//! predictor, and the coarse-to-fine refinement path.
//!
//! Parameters live in a [`ParamStore`] in a fixed order. A forward pass binds
//! the store to a tape (as trainable leaves or as constants) and then calls the
//! stage functions below.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{self, DEFAULT_REGULARIZER, NUM_COMPONENTS};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::{ConvGeometry, Tensor};

/// Spatial stride of the features relative to the input image.
pub const FEATURE_STRIDE: usize = 4;
/// Channels of the score map fed to the fusion module.
pub const SCORE_CHANNELS: usize = NUM_COMPONENTS;
/// Name of the raw appearance regularizer parameter (`4×D`).
pub const REGULARIZER_PARAM: &str = "appearance.r_raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegNetConfig {
    /// Feature channels `D` at stride 4.
    pub feature_dim: usize,
    /// Skip channels at stride 2.
    pub skip_dim: usize,
    /// Mask-propagation output channels.
    pub maskprop_dim: usize,
    /// Fusion output (mask encoding) channels.
    pub fusion_dim: usize,
    /// Hidden channels of the refinement path.
    pub refine_dim: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            feature_dim: 32,
            skip_dim: 16,
            maskprop_dim: 32,
            fusion_dim: 32,
            refine_dim: 16,
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.skip_dim,
            self.maskprop_dim,
            self.fusion_dim,
            self.refine_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSpec {
    name: &'static str,
    geom: ConvGeometry,
    cin: usize,
    cout: usize,
}

const fn conv(name: &'static str, kernel: usize, stride: usize, dilation: usize, cin: usize, cout: usize) -> ConvSpec {
    ConvSpec {
        name,
        geom: ConvGeometry {
            kernel,
            stride,
            dilation,
        },
        cin,
        cout,
    }
}

// Layer indices into the layout below.
const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const ENC4: usize = 3;
const MP_IN: usize = 4;
const MP_PYRAMID: [usize; 3] = [5, 6, 7];
const MP_OUT: usize = 8;
const FUSE1: usize = 9;
const FUSE2: usize = 10;
const COARSE: usize = 11;
const REFINE1: usize = 12;
const REFINE2: usize = 13;

fn layout(c: &SegNetConfig) -> Vec<ConvSpec> {
    let (d, ds, cm, cf, cr) = (c.feature_dim, c.skip_dim, c.maskprop_dim, c.fusion_dim, c.refine_dim);
    vec![
        conv("enc1", 3, 2, 1, 3, ds),
        conv("enc2", 3, 1, 1, ds, ds),
        conv("enc3", 3, 2, 1, ds, d),
        conv("enc4", 3, 1, 1, d, d),
        conv("maskprop.in", 3, 1, 1, 2 * d + 2, cm),
        conv("maskprop.d1", 3, 1, 1, cm, cm),
        conv("maskprop.d2", 3, 1, 2, cm, cm),
        conv("maskprop.d4", 3, 1, 4, cm, cm),
        conv("maskprop.out", 3, 1, 1, cm, cm),
        conv("fusion1", 3, 1, 1, SCORE_CHANNELS + cm, cf),
        conv("fusion2", 3, 1, 1, cf, cf),
        conv("coarse", 1, 1, 1, cf, 2),
        conv("refine1", 3, 1, 1, cf + ds, cr),
        conv("refine2", 3, 1, 1, cr, 2),
    ]
}

/// Named parameter tensors in a fixed order: `<layer>.w` (`k×k×Cin×Cout`) and
/// `<layer>.b` (`Cout`) for every convolution, then the appearance
/// regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    /// Fan-in scaled uniform weights, zero biases, deterministic in `config.seed`.
    pub fn init(config: &SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for spec in layout(config) {
            let k = spec.geom.kernel;
            let fan_in = (k * k * spec.cin) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = Tensor::from_fn(&[k, k, spec.cin, spec.cout], |_| rng.gen_range(-bound..bound));
            names.push(format!("{}.w", spec.name));
            tensors.push(w);
            names.push(format!("{}.b", spec.name));
            tensors.push(Tensor::zeros(&[spec.cout]));
        }
        names.push(REGULARIZER_PARAM.to_string());
        tensors.push(appearance::initial_regularizer_raw(config.feature_dim, DEFAULT_REGULARIZER));
        Ok(ParamStore { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Names and shapes in storage order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn to_bundle(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Loads values for every parameter of `self` from `entries`, checking
    /// shapes. Extra entries are ignored.
    pub fn load_bundle(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// A [`ParamStore`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<NodeId>,
    config: SegNetConfig,
    specs: Vec<ConvSpec>,
}

impl BoundParams {
    /// Registers every parameter as a trainable leaf (`trainable`) or a constant.
    pub fn bind(tape: &mut Tape, store: &ParamStore, config: &SegNetConfig, trainable: bool) -> Result<Self> {
        let specs = layout(config);
        if store.len() != 2 * specs.len() + 1 {
            return Err(Error::shape("parameter store does not match network config"));
        }
        for (spec, pair) in specs.iter().zip(store.tensors.chunks(2)) {
            let k = spec.geom.kernel;
            if pair[0].shape() != [k, k, spec.cin, spec.cout] || pair[1].shape() != [spec.cout] {
                return Err(Error::shape(format!("layer {} has unexpected shape", spec.name)));
            }
        }
        let ids = store
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Ok(BoundParams {
            ids,
            config: *config,
            specs,
        })
    }

    /// Wraps existing nodes (in store order), e.g. leaves created by a gradient check.
    pub fn from_nodes(tape: &Tape, ids: Vec<NodeId>, config: &SegNetConfig) -> Result<Self> {
        let specs = layout(config);
        if ids.len() != 2 * specs.len() + 1 {
            return Err(Error::shape("node list does not match network config"));
        }
        for (spec, pair) in specs.iter().zip(ids.chunks(2)) {
            let k = spec.geom.kernel;
            if tape.value(pair[0]).shape() != [k, k, spec.cin, spec.cout] || tape.value(pair[1]).shape() != [spec.cout] {
                return Err(Error::shape(format!("layer {} has unexpected shape", spec.name)));
            }
        }
        Ok(BoundParams {
            ids,
            config: *config,
            specs,
        })
    }

    /// Node ids in store order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn regularizer_raw(&self) -> NodeId {
        *self.ids.last().expect("bound store is never empty")
    }

    fn conv(&self, tape: &mut Tape, layer: usize, x: NodeId) -> Result<NodeId> {
        let spec = &self.specs[layer];
        tape.conv2d(x, self.ids[2 * layer], self.ids[2 * layer + 1], spec.geom)
    }

    fn conv_relu(&self, tape: &mut Tape, layer: usize, x: NodeId) -> Result<NodeId> {
        let y = self.conv(tape, layer, x)?;
        tape.relu(y)
    }
}

/// Image `H×W×3` to features `H/4×W/4×D` (linear output) and skip features
/// `H/2×W/2×Ds`.
pub fn encode(tape: &mut Tape, net: &BoundParams, image: NodeId) -> Result<(NodeId, NodeId)> {
    let (h, w, c) = tape.value(image).hwc()?;
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::shape(format!("image size {h}×{w} is not divisible by {FEATURE_STRIDE}")));
    }
    if c != 3 {
        return Err(Error::shape(format!("image has {c} channels, expected 3")));
    }
    let e1 = net.conv_relu(tape, ENC1, image)?;
    let skip = net.conv_relu(tape, ENC2, e1)?;
    let e3 = net.conv_relu(tape, ENC3, skip)?;
    let x = net.conv(tape, ENC4, e3)?;
    Ok((x, skip))
}

fn check_spatial(tape: &Tape, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    let (ha, wa, _) = tape.value(a).hwc()?;
    let (hb, wb, _) = tape.value(b).hwc()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!("{what}: {ha}×{wa} vs {hb}×{wb}")));
    }
    Ok(())
}

/// Mask encoding `h×w×Cm` from the current features, the previous coarse
/// mask (`h×w×1`) and the first frame's features and mask.
pub fn mask_propagate(
    tape: &mut Tape,
    net: &BoundParams,
    x: NodeId,
    y_prev: NodeId,
    x0: NodeId,
    y0: NodeId,
) -> Result<NodeId> {
    for (other, what) in [(y_prev, "previous mask"), (x0, "initial features"), (y0, "initial mask")] {
        check_spatial(tape, x, other, what)?;
    }
    let input = tape.concat(&[x, y_prev, x0, y0])?;
    let h = net.conv_relu(tape, MP_IN, input)?;
    let mut pyramid = net.conv(tape, MP_PYRAMID[0], h)?;
    for &layer in &MP_PYRAMID[1..] {
        let branch = net.conv(tape, layer, h)?;
        pyramid = tape.add(pyramid, branch)?;
    }
    let pyramid = tape.relu(pyramid)?;
    net.conv_relu(tape, MP_OUT, pyramid)
}

/// Coarse logits `h×w×2` and the mask encoding `h×w×Cf` from the score map
/// (`h×w×4`) and the propagated mask encoding.
pub fn fuse_and_predict(tape: &mut Tape, net: &BoundParams, scores: NodeId, mask_enc: NodeId) -> Result<(NodeId, NodeId)> {
    check_spatial(tape, scores, mask_enc, "scores and mask encoding")?;
    let input = tape.concat(&[scores, mask_enc])?;
    let f1 = net.conv_relu(tape, FUSE1, input)?;
    let encoding = net.conv_relu(tape, FUSE2, f1)?;
    let logits = net.conv(tape, COARSE, encoding)?;
    Ok((logits, encoding))
}

/// Fine logits at input resolution: upsample, join the stride-2 skip
/// features, convolve; predict two channels; upsample to full size.
pub fn refine(tape: &mut Tape, net: &BoundParams, encoding: NodeId, skip: NodeId) -> Result<NodeId> {
    let (h, w, _) = tape.value(encoding).hwc()?;
    let (hs, ws, _) = tape.value(skip).hwc()?;
    if (hs, ws) != (2 * h, 2 * w) {
        return Err(Error::shape(format!(
            "skip features {hs}×{ws} are not twice the encoding {h}×{w}"
        )));
    }
    let up = tape.upsample2x(encoding)?;
    let joined = tape.concat(&[up, skip])?;
    let r1 = net.conv_relu(tape, REFINE1, joined)?;
    let r2 = net.conv(tape, REFINE2, r1)?;
    tape.upsample2x(r2)
}

/// Foreground channel of a two-channel softmax, `h×w×1`.
pub fn foreground_probability(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let p = tape.softmax(logits)?;
    tape.slice_channels(p, 1, 1)
}

#[cfg(test)]
mod tests;
