//! Whole-image and overlap-tiled prediction.
//!
//! Tile starts are multiples of the model's input quantum, so every tile's
//! attention patch grid lines up with the grid of a whole-image pass. The
//! overlap between neighbours is split at its midpoint; each output pixel is
//! owned by exactly one tile.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::network::{model_forward, ArchConfig, ModelParams, HIGH_STRIDE};
use crate::tensor::{reflect_index, Scalar, Tensor};

fn align_up(v: usize, q: usize) -> usize {
    v.div_ceil(q) * q
}

fn check_bands<T: Scalar>(arch: &ArchConfig, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::InvalidArgument(format!("prediction expects one image, got {s}")));
    }
    if s.c != arch.in_channels {
        return Err(Error::InvalidArgument(format!(
            "image has {} bands, checkpoint expects {}",
            s.c, arch.in_channels
        )));
    }
    Ok(())
}

/// Window `[y0, y0 + h) x [x0, x0 + w)` of `image`, reflecting outside it.
pub fn extract_reflect<T: Scalar>(image: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let s = image.shape();
    let rows: Vec<usize> = (y0..y0 + h).map(|y| reflect_index(y, s.h)).collect();
    let cols: Vec<usize> = (x0..x0 + w).map(|x| reflect_index(x, s.w)).collect();
    Tensor::from_fn([s.n, s.c, h, w], |n, c, y, x| image.at(n, c, rows[y], cols[x]))
}

/// Predicts the whole image in one pass, reflect-padding up to the input
/// quantum and cropping the result back.
pub fn predict_whole<T: Scalar>(arch: &ArchConfig, params: &ModelParams<T>, image: &Tensor<T>) -> Result<LabelMap> {
    check_bands(arch, image)?;
    let (qh, qw) = arch.input_quantum(params.variant);
    let s = image.shape();
    let padded = extract_reflect(image, 0, 0, align_up(s.h, qh), align_up(s.w, qw));
    let (fused, _, _) = model_forward(&padded, arch, params)?;
    LabelMap::argmax(&fused)?.crop(0, 0, s.h, s.w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileOptions {
    pub tile: usize,
    pub overlap: usize,
    /// Run tiles on the rayon pool. The stitched map is the same either way.
    pub parallel: bool,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            tile: 512,
            overlap: 64,
            parallel: false,
        }
    }
}

/// One axis of the tiling: `(start, own_lo, own_hi)` per tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisPlan {
    pub tiles: Vec<(usize, usize, usize)>,
}

/// Tile placement along an axis of length `len`.
pub fn plan_axis(len: usize, tile: usize, overlap: usize, quantum: usize) -> Result<AxisPlan> {
    if tile == 0 || !tile.is_multiple_of(quantum) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} must be a positive multiple of the input quantum {quantum}"
        )));
    }
    if overlap < 2 * HIGH_STRIDE || overlap >= tile {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} must be at least {} and below the tile size {tile}",
            2 * HIGH_STRIDE
        )));
    }
    if len <= tile {
        return Ok(AxisPlan {
            tiles: vec![(0, 0, len)],
        });
    }
    let stride = (tile - overlap) / quantum * quantum;
    if stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} with overlap {overlap} leaves no quantum-aligned step ({quantum})"
        )));
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + tile < len {
        starts.push(s);
        s += stride;
    }
    let last = align_up(len - tile, quantum);
    if starts.last().is_some_and(|&p| p >= last) {
        starts.pop();
    }
    starts.push(last);
    let mut tiles = Vec::with_capacity(starts.len());
    for (i, &s) in starts.iter().enumerate() {
        let lo = if i == 0 { 0 } else { (s + starts[i - 1] + tile) / 2 };
        let hi = match starts.get(i + 1) {
            Some(&next) => (next + s + tile) / 2,
            None => len,
        };
        tiles.push((s, lo, hi));
    }
    Ok(AxisPlan { tiles })
}

/// Overlap-tiled prediction. Tiles overhanging the raster are reflect-padded
/// to the full tile size.
pub fn predict_tiled<T: Scalar>(
    arch: &ArchConfig,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    opts: TileOptions,
) -> Result<LabelMap> {
    check_bands(arch, image)?;
    let (qh, qw) = arch.input_quantum(params.variant);
    let s = image.shape();
    let rows = plan_axis(s.h, opts.tile, opts.overlap, qh)?;
    let cols = plan_axis(s.w, opts.tile, opts.overlap, qw)?;
    let jobs: Vec<((usize, usize, usize), (usize, usize, usize))> = rows
        .tiles
        .iter()
        .flat_map(|&r| cols.tiles.iter().map(move |&c| (r, c)))
        .collect();
    let run = |&((ys, ylo, yhi), (xs, xlo, xhi)): &((usize, usize, usize), (usize, usize, usize))| -> Result<_> {
        let window = extract_reflect(image, ys, xs, opts.tile, opts.tile);
        let (fused, _, _) = model_forward(&window, arch, params)?;
        let labels = LabelMap::argmax(&fused)?;
        Ok((
            ys,
            xs,
            ylo,
            yhi,
            xlo,
            xhi,
            labels.crop(ylo - ys, xlo - xs, yhi - ylo, xhi - xlo)?,
        ))
    };
    let pieces: Vec<_> = if opts.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut out = LabelMap::filled(s.h, s.w, 0);
    for (_, _, ylo, yhi, xlo, xhi, piece) in pieces {
        for y in ylo..yhi {
            for x in xlo..xhi {
                out.set(y, x, piece.get(y - ylo, x - xlo));
            }
        }
    }
    Ok(out)
}

/// Fraction of pixels on which two maps agree.
pub fn agreement(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::InvalidArgument("maps differ in size".into()));
    }
    let same = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covers_once(plan: &AxisPlan, len: usize, tile: usize) {
        let mut hits = vec![0; len];
        for &(s, lo, hi) in &plan.tiles {
            assert!(s <= lo && hi <= s + tile, "{plan:?}");
            for h in &mut hits[lo..hi] {
                *h += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "{plan:?}");
    }

    #[test]
    fn axis_plans_partition_the_raster() {
        for len in [64, 200, 512, 513, 1000, 1024, 1500] {
            let p = plan_axis(len, 512, 64, 64).unwrap();
            covers_once(&p, len, 512);
            assert!(p.tiles.iter().all(|t| t.0 % 64 == 0));
        }
        let p = plan_axis(1024, 512, 64, 64).unwrap();
        assert_eq!(p.tiles.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 448, 512]);
    }

    #[test]
    fn bad_tiling_is_rejected() {
        assert!(plan_axis(1024, 500, 64, 64).is_err());
        assert!(plan_axis(1024, 512, 16, 64).is_err());
        assert!(plan_axis(1024, 512, 512, 64).is_err());
        assert!(plan_axis(1024, 64, 32, 64).is_err());
    }

    #[test]
    fn reflect_window() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(extract_reflect(&t, 0, 1, 1, 4).data(), &[2.0, 3.0, 2.0, 1.0]);
    }
}
