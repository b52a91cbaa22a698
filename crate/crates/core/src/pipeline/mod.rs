//! Recurrent per-sequence processing: appearance-model initialization on the
//! annotated first frame, per-object prediction on later frames, softmax
//! aggregation across objects, and the recurrent feedback that drives the next
//! frame's mask propagation and the appearance-model update.

mod optim;
mod train;

pub use optim::Adam;
pub use train::{
    evaluate_split, predict_sequence, run_ablation, sequence_gradients, train, AblationRow, EpochLog, TrainConfig,
    TrainState,
};

use crate::appearance::{self, MixtureNodes, ModelOptions, UpdateConfig, NUM_COMPONENTS};
use crate::error::{Error, Result};
use crate::graph::{NodeId, OpTag, Tape};
use crate::io::IndexMask;
use crate::segnet::{self, BoundParams, ParamStore, SegNetConfig, FEATURE_STRIDE, SCORE_CHANNELS};
use crate::tensor::{self, Tensor};

/// Probability clamp used by softmax aggregation.
pub const AGGREGATION_EPS: f64 = 1e-5;

/// Structural switches, one per ablation variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_appearance: bool,
    pub no_maskprop: bool,
    /// Base components only.
    pub unimodal: bool,
    /// The appearance model keeps its first-frame parameters.
    pub no_update: bool,
    /// Scores pass through a channel softmax before fusion.
    pub appearance_softmax: bool,
    /// No gradient through the parameter-estimation inputs.
    pub no_end_to_end: bool,
}

impl AblationFlags {
    /// Variant names in reporting order.
    pub const VARIANTS: [&'static str; 7] = [
        "full",
        "no_appearance",
        "no_maskprop",
        "unimodal",
        "no_update",
        "appearance_softmax",
        "no_end_to_end",
    ];

    pub fn from_variant(name: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        if name != "full" {
            f.set(name, true)?;
        }
        Ok(f)
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        let slot = match flag {
            "no_appearance" => &mut self.no_appearance,
            "no_maskprop" => &mut self.no_maskprop,
            "unimodal" => &mut self.unimodal,
            "no_update" => &mut self.no_update,
            "appearance_softmax" => &mut self.appearance_softmax,
            "no_end_to_end" => &mut self.no_end_to_end,
            other => return Err(Error::invalid(format!("unknown ablation `{other}`"))),
        };
        *slot = on;
        Ok(())
    }

    /// `(name, value)` for every flag.
    pub fn entries(&self) -> [(&'static str, bool); 6] {
        [
            ("no_appearance", self.no_appearance),
            ("no_maskprop", self.no_maskprop),
            ("unimodal", self.unimodal),
            ("no_update", self.no_update),
            ("appearance_softmax", self.appearance_softmax),
            ("no_end_to_end", self.no_end_to_end),
        ]
    }

    /// `full`, or the `+`-joined names of the active flags.
    pub fn name(&self) -> String {
        let on: Vec<&str> = self.entries().iter().filter(|e| e.1).map(|e| e.0).collect();
        if on.is_empty() {
            "full".to_string()
        } else {
            on.join("+")
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            unimodal: self.unimodal,
            detach_estimation: self.no_end_to_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub net: SegNetConfig,
    pub update: UpdateConfig,
    pub flags: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            net: SegNetConfig::default(),
            update: UpdateConfig::default(),
            flags: AblationFlags::default(),
        }
    }
}

/// Per-object recurrent state. All node ids refer to the tape the track was
/// created on (or moved to with [`ObjectTrack::transplant`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: u8,
    /// Appearance model; `None` when the appearance module is ablated.
    pub theta: Option<MixtureNodes>,
    /// First-frame features and soft mask at feature stride.
    pub x0: NodeId,
    pub y0: NodeId,
    /// Previous coarse mask at feature stride, `h×w×1`.
    pub y_prev: NodeId,
}

impl ObjectTrack {
    /// Copies the track's values onto `to` as constants.
    pub fn transplant(&self, from: &Tape, to: &mut Tape) -> ObjectTrack {
        let mut copy = |id: NodeId| to.constant(from.value(id).clone());
        ObjectTrack {
            id: self.id,
            theta: self.theta.as_ref().map(|t| MixtureNodes {
                components: t.components.iter().map(|&c| copy(c)).collect(),
            }),
            x0: copy(self.x0),
            y0: copy(self.y0),
            y_prev: copy(self.y_prev),
        }
    }

    /// Plain-value snapshot of the appearance model.
    pub fn gmm_state(&self, tape: &Tape, r_raw: &Tensor) -> Option<Result<appearance::GmmState>> {
        self.theta
            .as_ref()
            .map(|t| appearance::GmmState::from_nodes(tape, t, r_raw))
    }
}

/// Pre-aggregation outputs of one object on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectOutput {
    pub id: u8,
    /// Score map fed to fusion, `h×w×4`.
    pub scores: NodeId,
    pub coarse_logits: NodeId,
    pub fine_logits: NodeId,
    /// Foreground probabilities, `h×w×1` and `H×W×1`.
    pub coarse_prob: NodeId,
    pub fine_prob: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub objects: Vec<ObjectOutput>,
    /// Distributions over background and objects, `h×w×(M+1)` and `H×W×(M+1)`.
    pub aggregated_coarse: NodeId,
    pub aggregated_fine: NodeId,
    /// Argmax of the fine distribution, as object ids.
    pub labels: IndexMask,
}

/// Soft (area-averaged) and binary versions of an object's mask at feature stride.
/// The binary mask keeps cells at least half covered, or every touched cell
/// when no cell is half covered.
pub fn feature_masks(mask: &IndexMask, id: u8) -> Result<(Tensor, Tensor)> {
    let full = mask.binary(id).reshape(&[mask.height, mask.width, 1])?;
    let soft = tensor::area_downsample(&full, FEATURE_STRIDE)?;
    let (h, w, _) = soft.hwc()?;
    let threshold = if soft.data().iter().any(|&v| v >= 0.5) { 0.5 } else { f64::MIN_POSITIVE };
    let binary = Tensor::new(
        vec![h, w],
        soft.data().iter().map(|&v| f64::from(v >= threshold)).collect(),
    )?;
    Ok((soft, binary))
}

/// Per-pixel argmax over channels (first maximum wins), mapped through `ids`
/// (`ids[0]` is background).
pub fn argmax_labels(dist: &Tensor, ids: &[u8]) -> Result<IndexMask> {
    let (h, w, c) = dist.hwc()?;
    if c != ids.len() {
        return Err(Error::shape(format!("{c} channels for {} labels", ids.len())));
    }
    let labels = dist
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for (j, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = j;
                }
            }
            ids[best]
        })
        .collect();
    IndexMask::new(h, w, labels)
}

/// Softmax aggregation of per-object foreground probabilities (`h×w×1` each)
/// into `h×w×(M+1)`, channel 0 being background.
pub fn aggregate(tape: &mut Tape, probs: &[NodeId]) -> Result<NodeId> {
    if probs.is_empty() {
        return Err(Error::invalid("aggregation needs at least one object"));
    }
    tape.record(OpTag::Aggregate { eps: AGGREGATION_EPS }, probs)
}

/// Value-level softmax aggregation.
pub fn aggregate_values(probs: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = probs.iter().map(|p| tape.constant(p.clone())).collect();
    let out = aggregate(&mut tape, &ids)?;
    Ok(tape.value(out).clone())
}

/// The network and appearance regularizers bound to one tape.
#[derive(Debug, Clone)]
pub struct Runner {
    pub net: BoundParams,
    regularizers: Vec<NodeId>,
    cfg: ModelConfig,
}

impl Runner {
    pub fn new(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, trainable: bool) -> Result<Self> {
        let net = BoundParams::bind(tape, store, &cfg.net, trainable)?;
        Self::with_net(tape, net, cfg)
    }

    pub fn with_net(tape: &mut Tape, net: BoundParams, cfg: &ModelConfig) -> Result<Self> {
        cfg.update.validate()?;
        let regularizers = if cfg.flags.no_appearance {
            Vec::new()
        } else {
            appearance::regularizers(tape, net.regularizer_raw(), cfg.flags.model_options().num_components())?
        };
        Ok(Runner {
            net,
            regularizers,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// One track per object id `1..=M` of the first-frame annotation.
    pub fn init_sequence(&self, tape: &mut Tape, frame0: &Tensor, gt0: &IndexMask) -> Result<Vec<ObjectTrack>> {
        let (h, w, _) = frame0.hwc()?;
        if (h, w) != (gt0.height, gt0.width) {
            return Err(Error::shape(format!(
                "frame {h}×{w} with a {}×{} annotation",
                gt0.height, gt0.width
            )));
        }
        let m = gt0.max_id();
        if m == 0 {
            return Err(Error::invalid("first-frame annotation contains no objects"));
        }
        let image = tape.constant(frame0.clone());
        let (x0, _) = segnet::encode(tape, &self.net, image)?;
        let opts = self.cfg.flags.model_options();
        let mut tracks = Vec::with_capacity(m as usize);
        for id in 1..=m {
            if gt0.count(id) == 0 {
                return Err(Error::invalid(format!("object {id} is absent from the first frame")));
            }
            let (soft, binary) = feature_masks(gt0, id)?;
            let y0 = tape.constant(soft);
            let theta = if self.cfg.flags.no_appearance {
                None
            } else {
                Some(appearance::init_first_frame(
                    tape,
                    x0,
                    &binary,
                    &self.regularizers,
                    &self.cfg.update,
                    &opts,
                )?)
            };
            tracks.push(ObjectTrack {
                id,
                theta,
                x0,
                y0,
                y_prev: y0,
            });
        }
        Ok(tracks)
    }

    fn score_map(&self, tape: &mut Tape, x: NodeId, track: &ObjectTrack) -> Result<NodeId> {
        let (h, w, _) = tape.value(x).hwc()?;
        let Some(theta) = &track.theta else {
            return Ok(tape.constant(Tensor::zeros(&[h, w, SCORE_CHANNELS])));
        };
        let mut s = appearance::inference(tape, x, theta)?;
        if self.cfg.flags.appearance_softmax {
            s = tape.softmax(s)?;
        }
        let k = theta.components.len();
        if k < NUM_COMPONENTS {
            let pad = tape.constant(Tensor::zeros(&[h, w, NUM_COMPONENTS - k]));
            s = tape.concat(&[s, pad])?;
        }
        Ok(s)
    }

    /// Processes one frame for every track, aggregates, and advances the
    /// tracks' recurrent masks and appearance models.
    pub fn step(&self, tape: &mut Tape, frame: &Tensor, tracks: &mut [ObjectTrack]) -> Result<StepOutput> {
        let first = tracks
            .first()
            .ok_or_else(|| Error::invalid("no initialized tracks"))?;
        let (h0, w0, _) = tape.value(first.x0).hwc()?;
        let (h, w, _) = frame.hwc()?;
        if (h, w) != (h0 * FEATURE_STRIDE, w0 * FEATURE_STRIDE) {
            return Err(Error::shape(format!("frame {h}×{w} differs from the first frame")));
        }
        let image = tape.constant(frame.clone());
        let (x, skip) = segnet::encode(tape, &self.net, image)?;
        let flags = self.cfg.flags;
        let mut objects = Vec::with_capacity(tracks.len());
        for track in tracks.iter() {
            let scores = self.score_map(tape, x, track)?;
            let mask_enc = if flags.no_maskprop {
                tape.constant(Tensor::zeros(&[h0, w0, self.cfg.net.maskprop_dim]))
            } else {
                segnet::mask_propagate(tape, &self.net, x, track.y_prev, track.x0, track.y0)?
            };
            let (coarse_logits, encoding) = segnet::fuse_and_predict(tape, &self.net, scores, mask_enc)?;
            let fine_logits = segnet::refine(tape, &self.net, encoding, skip)?;
            let coarse_prob = segnet::foreground_probability(tape, coarse_logits)?;
            let fine_prob = segnet::foreground_probability(tape, fine_logits)?;
            objects.push(ObjectOutput {
                id: track.id,
                scores,
                coarse_logits,
                fine_logits,
                coarse_prob,
                fine_prob,
            });
        }

        let coarse: Vec<NodeId> = objects.iter().map(|o| o.coarse_prob).collect();
        let aggregated_coarse = aggregate(tape, &coarse)?;
        let opts = flags.model_options();
        for (m, track) in tracks.iter_mut().enumerate() {
            let y = tape.slice_channels(aggregated_coarse, m + 1, 1)?;
            if let (Some(theta), false) = (&track.theta, flags.no_update) {
                track.theta = Some(appearance::update(
                    tape,
                    x,
                    y,
                    theta,
                    &self.regularizers,
                    &self.cfg.update,
                    &opts,
                )?);
            }
            track.y_prev = y;
        }

        let fine: Vec<NodeId> = objects.iter().map(|o| o.fine_prob).collect();
        let aggregated_fine = aggregate(tape, &fine)?;
        let mut ids = vec![0u8];
        ids.extend(tracks.iter().map(|t| t.id));
        let labels = argmax_labels(tape.value(aggregated_fine), &ids)?;
        Ok(StepOutput {
            objects,
            aggregated_coarse,
            aggregated_fine,
            labels,
        })
    }

    /// Initializes on `frames[0]` with `gt0` and steps through the remaining frames.
    pub fn run(&self, tape: &mut Tape, frames: &[Tensor], gt0: &IndexMask) -> Result<(Vec<ObjectTrack>, Vec<StepOutput>)> {
        let first = frames.first().ok_or_else(|| Error::invalid("empty sequence"))?;
        let mut tracks = self.init_sequence(tape, first, gt0)?;
        let mut steps = Vec::with_capacity(frames.len().saturating_sub(1));
        for frame in &frames[1..] {
            steps.push(self.step(tape, frame, &mut tracks)?);
        }
        Ok((tracks, steps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLoss {
    pub fine: f64,
    pub coarse: f64,
}

/// Losses summed over supervised frames and objects.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub fine: f64,
    pub coarse: f64,
    pub total: f64,
    pub per_frame: Vec<FrameLoss>,
    /// Number of (frame, object) terms in each sum.
    pub terms: usize,
}

/// Cross-entropy of every object's fine and coarse predictions against the
/// ground truth of frames `1..`. `gts[i]` supervises `steps[i]`; coarse targets
/// are the nearest-neighbour downsampled masks.
pub fn sequence_loss(tape: &mut Tape, steps: &[StepOutput], gts: &[IndexMask]) -> Result<(NodeId, LossReport)> {
    if gts.len() != steps.len() {
        return Err(Error::invalid(format!(
            "{} supervised frames but {} ground-truth masks",
            steps.len(),
            gts.len()
        )));
    }
    if steps.is_empty() {
        return Err(Error::invalid("no supervised frames"));
    }
    let mut fine_sum: Option<NodeId> = None;
    let mut coarse_sum: Option<NodeId> = None;
    let mut per_frame = Vec::with_capacity(steps.len());
    let mut terms = 0;
    let accumulate = |tape: &mut Tape, acc: &mut Option<NodeId>, v: NodeId| -> Result<()> {
        *acc = Some(match *acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };
    for (step, gt) in steps.iter().zip(gts) {
        let coarse_gt = gt.downsample_nearest(FEATURE_STRIDE)?;
        let mut frame = FrameLoss { fine: 0.0, coarse: 0.0 };
        for o in &step.objects {
            let fine_target = gt.binary(o.id);
            if tape.value(o.fine_logits).len() != 2 * fine_target.len() {
                return Err(Error::shape("fine prediction does not match the ground truth size"));
            }
            let fine = tape.record(OpTag::CrossEntropy(fine_target), &[o.fine_logits])?;
            let coarse = tape.record(OpTag::CrossEntropy(coarse_gt.binary(o.id)), &[o.coarse_logits])?;
            frame.fine += tape.scalar_value(fine);
            frame.coarse += tape.scalar_value(coarse);
            accumulate(tape, &mut fine_sum, fine)?;
            accumulate(tape, &mut coarse_sum, coarse)?;
            terms += 1;
        }
        per_frame.push(frame);
    }
    let (fine, coarse) = (fine_sum.expect("nonempty"), coarse_sum.expect("nonempty"));
    let total = tape.add(fine, coarse)?;
    let report = LossReport {
        fine: tape.scalar_value(fine),
        coarse: tape.scalar_value(coarse),
        total: tape.scalar_value(total),
        per_frame,
        terms,
    };
    Ok((total, report))
}

/// Keeps the objects visible in the first mask, renumbered `1..=M'` in
/// increasing id order; other objects become background. Returns the new
/// masks and the kept original ids.
pub fn relabel_visible(masks: &[IndexMask]) -> (Vec<IndexMask>, Vec<u8>) {
    let Some(first) = masks.first() else {
        return (Vec::new(), Vec::new());
    };
    let kept: Vec<u8> = (1..=first.max_id()).filter(|&id| first.count(id) > 0).collect();
    let mut map = [0u8; 256];
    for (i, &id) in kept.iter().enumerate() {
        map[id as usize] = (i + 1) as u8;
    }
    let out = masks
        .iter()
        .map(|m| IndexMask {
            height: m.height,
            width: m.width,
            labels: m.labels.iter().map(|&l| map[l as usize]).collect(),
        })
        .collect();
    (out, kept)
}

#[cfg(test)]
mod tests;
