use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "impervious_surfaces",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
];

/// RGB legend, indexed by class id.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 255, 255], // impervious surfaces: white
    [0, 0, 255],     // building: blue
    [0, 255, 255],   // low vegetation: cyan
    [0, 255, 0],     // tree: green
    [255, 255, 0],   // car: yellow
    [255, 0, 0],     // clutter: red
];

pub const IMPERVIOUS: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEGETATION: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;
pub const CLUTTER: u8 = 5;

/// Dense `height x width` map of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "label map of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({y0}, {x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMap::new(h, w, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for (dst, src) in out
            .data
            .chunks_exact_mut(self.width)
            .zip(self.data.chunks_exact(self.width))
        {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            let src = (self.height - 1 - y) * self.width;
            out.data[y * self.width..(y + 1) * self.width].copy_from_slice(&self.data[src..src + self.width]);
        }
        out
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &v in &self.data {
            if (v as usize) < classes {
                h[v as usize] += 1;
            }
        }
        h
    }

    /// Per-pixel argmax over the channel axis of one sample (`1 x K x h x w`).
    /// Ties resolve to the lowest class id.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let s = logits.shape();
        if s.n != 1 {
            return Err(Error::shape("argmax", format!("expected one sample, got {s}")));
        }
        let plane = s.plane();
        let d = logits.data();
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..s.c {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(s.h, s.w, data)
    }
}

/// Stacks label maps of equal size into one `n x h x w` buffer.
pub fn stack_labels(maps: &[LabelMap]) -> Result<Vec<u8>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no label maps".into()))?;
    let mut out = Vec::with_capacity(maps.len() * first.data.len());
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::InvalidArgument(format!(
                "label maps {}x{} and {}x{} differ",
                first.height, first.width, m.height, m.width
            )));
        }
        out.extend_from_slice(&m.data);
    }
    Ok(out)
}
