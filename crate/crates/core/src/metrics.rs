//! Region similarity J (IoU), boundary F-measure, and their seen/unseen
//! aggregation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::IndexMask;
use crate::synthvos::{NamedSequence, ShapeClass};

/// Contour matching tolerance used for evaluation, in pixels.
pub const CONTOUR_RADIUS: usize = 1;

/// A binary mask as a row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask with {} pixels",
                pixels.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            pixels,
        })
    }

    pub fn from_index(mask: &IndexMask, id: u8) -> Self {
        BinaryMask {
            height: mask.height,
            width: mask.width,
            pixels: mask.labels.iter().map(|&l| l == id).collect(),
        }
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.pixels[y as usize * self.width + x as usize]
    }

    /// Foreground pixels with a 4-neighbour outside the mask; pixels beyond
    /// the image border count as outside.
    pub fn boundary(&self) -> BinaryMask {
        let mut out = vec![false; self.pixels.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if self.at(y, x) {
                    let inner = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .all(|&(dy, dx)| self.at(y + dy, x + dx));
                    out[y as usize * self.width + x as usize] = !inner;
                }
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            pixels: out,
        }
    }

    /// Dilation by the disk of the given radius.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    offsets.push((dy, dx));
                }
            }
        }
        let mut out = vec![false; self.pixels.len()];
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                out[y as usize * self.width + x as usize] =
                    offsets.iter().any(|&(dy, dx)| self.at(y + dy, x + dx));
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            pixels: out,
        }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "masks {}×{} and {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Boundary F-measure: precision and recall of boundary pixels matched within
/// `radius` of the other mask's boundary. Two empty boundaries score 1.
pub fn contour_f(pred: &BinaryMask, gt: &BinaryMask, radius: usize) -> Result<f64> {
    same_shape(pred, gt)?;
    let bp = pred.boundary();
    let bg = gt.boundary();
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let dp = bp.dilate(radius);
    let dg = bg.dilate(radius);
    let matched = |b: &BinaryMask, d: &BinaryMask| {
        b.pixels.iter().zip(&d.pixels).filter(|(&x, &y)| x && y).count()
    };
    let precision = matched(&bp, &dg) as f64 / np as f64;
    let recall = matched(&bg, &dp) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScore {
    pub seq_id: String,
    pub object_id: u8,
    pub class: ShapeClass,
    pub j: f64,
    pub f: f64,
}

impl ObjectScore {
    pub fn seen(&self) -> bool {
        self.class.is_seen()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub objects: Vec<ObjectScore>,
    /// Means over objects of seen / unseen classes; `None` when the group is empty.
    pub j_seen: Option<f64>,
    pub j_unseen: Option<f64>,
    pub f_seen: Option<f64>,
    pub f_unseen: Option<f64>,
    /// Mean of the available aggregates.
    pub g: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl EvalResult {
    pub fn from_objects(objects: Vec<ObjectScore>) -> Self {
        let group = |seen: bool, pick: fn(&ObjectScore) -> f64| {
            mean(objects.iter().filter(|o| o.seen() == seen).map(pick))
        };
        let j_seen = group(true, |o| o.j);
        let j_unseen = group(false, |o| o.j);
        let f_seen = group(true, |o| o.f);
        let f_unseen = group(false, |o| o.f);
        let g = mean([j_seen, j_unseen, f_seen, f_unseen].into_iter().flatten()).unwrap_or(0.0);
        EvalResult {
            objects,
            j_seen,
            j_unseen,
            f_seen,
            f_unseen,
            g,
        }
    }

    /// Mean J over all objects.
    pub fn j_mean(&self) -> f64 {
        mean(self.objects.iter().map(|o| o.j)).unwrap_or(0.0)
    }

    /// Per-object rows, a blank line, then the aggregate block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seq_id,object_id,class,seen,J,F\n");
        for o in &self.objects {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                o.seq_id,
                o.object_id,
                o.class,
                u8::from(o.seen()),
                o.j,
                o.f
            );
        }
        s.push_str("\nmetric,value\n");
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "J_seen,{}", fmt(self.j_seen));
        let _ = writeln!(s, "J_unseen,{}", fmt(self.j_unseen));
        let _ = writeln!(s, "F_seen,{}", fmt(self.f_seen));
        let _ = writeln!(s, "F_unseen,{}", fmt(self.f_unseen));
        let _ = writeln!(s, "G,{:.6}", self.g);
        s
    }
}

/// Scores predicted index masks against a sequence's ground truth. Each
/// object's J and F are averaged over frames `1..n`; frame 0 is the given
/// annotation.
pub fn score_sequence(seq: &NamedSequence, predicted: &[IndexMask]) -> Result<Vec<ObjectScore>> {
    let gt = &seq.sample.masks;
    if predicted.len() != gt.len() || gt.len() < 2 {
        return Err(Error::shape(format!(
            "{}: {} predicted frames for {} ground-truth frames",
            seq.id,
            predicted.len(),
            gt.len()
        )));
    }
    let mut out = Vec::with_capacity(seq.sample.num_objects());
    for (m, &class) in seq.sample.classes.iter().enumerate() {
        let id = (m + 1) as u8;
        let (mut j, mut f) = (0.0, 0.0);
        for (p, g) in predicted[1..].iter().zip(&gt[1..]) {
            let (p, g) = (BinaryMask::from_index(p, id), BinaryMask::from_index(g, id));
            j += jaccard(&p, &g)?;
            f += contour_f(&p, &g, CONTOUR_RADIUS)?;
        }
        let n = (gt.len() - 1) as f64;
        out.push(ObjectScore {
            seq_id: seq.id.clone(),
            object_id: id,
            class,
            j: j / n,
            f: f / n,
        });
    }
    Ok(out)
}
