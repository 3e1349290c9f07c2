//! Non-overlapping tile partition/regroup and pyramid object-presence labels.

use crate::image::ImagePlane;
use crate::{Error, Result, Scalar};
use ndarray::{Array2, Array3};

/// Tiles cut from an image on a g×g grid. Tile pixels are stored as one
/// (g²·t²) × C matrix with each tile's rows contiguous in row-major tile
/// order, which is the layout the refinement network consumes directly.
#[derive(Debug, Clone)]
pub struct TileBatch<T: Scalar> {
    /// Tiles-per-edge.
    pub grid: usize,
    /// Tile edge in pixels.
    pub tile: usize,
    pub channels: usize,
    /// Per-tile (row, col) in the grid, row-major.
    pub origin_index: Vec<(usize, usize)>,
    /// (g²·t²) × C pixel matrix.
    pub pixels: Array2<T>,
}

impl<T: Scalar> TileBatch<T> {
    pub fn n_tiles(&self) -> usize {
        self.grid * self.grid
    }

    /// Rows of tile `i` within [`pixels`](Self::pixels).
    pub fn tile_rows(&self, i: usize) -> std::ops::Range<usize> {
        let per = self.tile * self.tile;
        i * per..(i + 1) * per
    }

    pub fn tile_view(&self, i: usize) -> ndarray::ArrayView2<'_, T> {
        let r = self.tile_rows(i);
        self.pixels.slice(ndarray::s![r, ..])
    }
}

/// Split an image into g×g non-overlapping tiles, row-major.
pub fn partition_tiles<T: Scalar>(img: &ImagePlane<T>, g: usize) -> Result<TileBatch<T>> {
    let (h, w, c) = img.data.dim();
    if g == 0 || h % g != 0 || w % g != 0 || h != w {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible into {g}x{g} square tiles"
        )));
    }
    let t = h / g;
    let mut pixels = Array2::zeros((g * g * t * t, c));
    let mut origin_index = Vec::with_capacity(g * g);
    for tr in 0..g {
        for tc in 0..g {
            origin_index.push((tr, tc));
            let base = (tr * g + tc) * t * t;
            for y in 0..t {
                for x in 0..t {
                    for ch in 0..c {
                        pixels[[base + y * t + x, ch]] = img.data[[tr * t + y, tc * t + x, ch]];
                    }
                }
            }
        }
    }
    Ok(TileBatch {
        grid: g,
        tile: t,
        channels: c,
        origin_index,
        pixels,
    })
}

/// Reassemble tiles into an image; the exact inverse of [`partition_tiles`]
/// at equal resolution, and the g·t′ composition for refined tiles of edge t′.
pub fn regroup_tiles<T: Scalar>(batch: &TileBatch<T>) -> Result<ImagePlane<T>> {
    let g = batch.grid;
    let t = batch.tile;
    let c = batch.channels;
    if batch.origin_index.len() != g * g {
        return Err(Error::shape(format!(
            "expected {} tiles, have {}",
            g * g,
            batch.origin_index.len()
        )));
    }
    if batch.pixels.shape() != [g * g * t * t, c] {
        return Err(Error::shape("tile pixel matrix shape mismatch".to_string()));
    }
    let edge = g * t;
    let mut data = Array3::zeros((edge, edge, c));
    for (i, &(tr, tc)) in batch.origin_index.iter().enumerate() {
        if tr >= g || tc >= g {
            return Err(Error::shape(format!("tile origin ({tr},{tc}) outside grid")));
        }
        let base = i * t * t;
        for y in 0..t {
            for x in 0..t {
                for ch in 0..c {
                    data[[tr * t + y, tc * t + x, ch]] = batch.pixels[[base + y * t + x, ch]];
                }
            }
        }
    }
    Ok(ImagePlane { data })
}

/// Binary object-presence grids at three scales; `grids[0]` is the finest.
/// A cell is 1 iff any mask pixel inside it is 1, so a coarse cell is 1 iff
/// any of its children is.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLabels {
    pub grids: [usize; 3],
    pub levels: [Array2<u8>; 3],
}

impl PyramidLabels {
    /// The coarsest level, which drives tile routing.
    pub fn routing(&self) -> &Array2<u8> {
        &self.levels[2]
    }
}

/// Max-pool a binary LR mask into presence labels at three grids
/// (finest first, e.g. [16, 8, 4]).
pub fn make_pyramid_labels<T: Scalar>(mask: &ImagePlane<T>, grids: [usize; 3]) -> Result<PyramidLabels> {
    let (h, w, c) = mask.data.dim();
    if c != 1 {
        return Err(Error::shape("mask must be single-channel".to_string()));
    }
    if !mask.is_binary() {
        return Err(Error::numeric("mask must be binary".to_string()));
    }
    let mut levels: Vec<Array2<u8>> = Vec::with_capacity(3);
    for &g in &grids {
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::shape(format!("mask {h}x{w} not divisible by grid {g}")));
        }
        let (ch, cw) = (h / g, w / g);
        let mut lvl = Array2::zeros((g, g));
        for gy in 0..g {
            for gx in 0..g {
                let mut any = 0u8;
                'cell: for y in gy * ch..(gy + 1) * ch {
                    for x in gx * cw..(gx + 1) * cw {
                        if mask.data[[y, x, 0]] == T::one() {
                            any = 1;
                            break 'cell;
                        }
                    }
                }
                lvl[[gy, gx]] = any;
            }
        }
        levels.push(lvl);
    }
    let levels: [Array2<u8>; 3] = levels.try_into().expect("three levels");
    Ok(PyramidLabels { grids, levels })
}
