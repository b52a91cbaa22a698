use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit label image; 0 is background, `1..=M` are object ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl IndexMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask with {} labels",
                labels.len()
            )));
        }
        Ok(IndexMask {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        IndexMask {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn max_id(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary `H×W` tensor of the pixels labelled `id`.
    pub fn binary(&self, id: u8) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| f64::from(l == id)).collect(),
        )
        .expect("mask dimensions are consistent")
    }

    pub fn count(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    /// Nearest-neighbour downsampling by an integer factor (samples the pixel
    /// nearest each output cell centre).
    pub fn downsample_nearest(&self, factor: usize) -> Result<IndexMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::shape(format!(
                "{}×{} mask is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let labels = (0..oh * ow)
            .map(|i| {
                let (y, x) = (i / ow, i % ow);
                self.labels[(y * factor + off) * self.width + x * factor + off]
            })
            .collect();
        IndexMask::new(oh, ow, labels)
    }
}

pub fn write_pgm(path: &Path, mask: &IndexMask) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend_from_slice(&mask.labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_pgm(bytes: &[u8]) -> Result<IndexMask> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[pos + 1..];
    if raster.len() != w * h {
        return Err(bad("raster size"));
    }
    IndexMask::new(h, w, raster.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<IndexMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}
