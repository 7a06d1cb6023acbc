//! 2-D convolution via im2col over blocks of whole samples.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::Act;
use crate::{par, Real};

/// Minimum number of output columns gathered into one im2col block.
const BLOCK_COLUMNS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Saved im2col matrices of a forward call, one per sample block.
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    blocks: Vec<Range<usize>>,
    cols: Vec<Array2<F>>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
pub struct ConvGrads<F> {
    pub dx: Option<Act<F>>,
    pub dw: Option<Array2<F>>,
    pub db: Option<Array1<F>>,
}

fn sample_blocks(n: usize, out_plane: usize) -> Vec<Range<usize>> {
    let per_block = BLOCK_COLUMNS.div_ceil(out_plane.max(1));
    par::chunks(n, per_block)
}

fn im2col<F: Real>(x: &Act<F>, g: &ConvGeom, oh: usize, ow: usize, samples: Range<usize>) -> Array2<F> {
    let k = g.kernel;
    let out_plane = oh * ow;
    let mut cols = Array2::<F>::zeros((g.patch_len(), samples.len() * out_plane));
    let src = x.data.as_slice().expect("standard layout");
    let plane = x.plane();
    let row_len = x.n * plane;
    let (h, w) = (x.h as isize, x.w as isize);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let xrow = &src[c * row_len..(c + 1) * row_len];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let mut dst_row = cols.row_mut(r);
                let dst = dst_row.as_slice_mut().expect("standard layout");
                for (si, ni) in samples.clone().enumerate() {
                    let img = &xrow[ni * plane..(ni + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = si * out_plane + oy * ow;
                        let src_row = &img[(iy as usize) * x.w..(iy as usize + 1) * x.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters column gradients back onto a `[cin, samples*h*w]` block.
fn col2im<F: Real>(dcols: &Array2<F>, g: &ConvGeom, h: usize, w: usize, oh: usize, ow: usize, count: usize) -> Array2<F> {
    let k = g.kernel;
    let plane = h * w;
    let out_plane = oh * ow;
    let mut dx = Array2::<F>::zeros((g.cin, count * plane));
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let mut dst_row = dx.row_mut(c);
        let dst = dst_row.as_slice_mut().expect("standard layout");
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src_row = dcols.row(r);
                let src = src_row.as_slice().expect("standard layout");
                for si in 0..count {
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = si * out_plane + oy * ow;
                        let drow = si * plane + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[drow + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `weight` is `[cout, cin*k*k]` in (c, ky, kx) order.
pub fn conv_forward<F: Real>(
    x: &Act<F>,
    weight: ArrayView2<F>,
    bias: Option<&[F]>,
    g: &ConvGeom,
) -> (Act<F>, ConvCache<F>) {
    debug_assert_eq!(x.channels(), g.cin);
    debug_assert_eq!(weight.dim(), (g.cout, g.patch_len()));
    let (oh, ow) = g.out_hw(x.h, x.w);
    let out_plane = oh * ow;
    let blocks = sample_blocks(x.n, out_plane);
    let parts = par::map_slice(&blocks, |range| {
        let cols = im2col(x, g, oh, ow, range.clone());
        let mut y = weight.dot(&cols);
        if let Some(b) = bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        (y, cols)
    });
    let mut out = Act::zeros(g.cout, x.n, oh, ow);
    let mut cols = Vec::with_capacity(parts.len());
    for (range, (y, c)) in blocks.iter().zip(parts) {
        out.data
            .slice_mut(s![.., range.start * out_plane..range.end * out_plane])
            .assign(&y);
        cols.push(c);
    }
    let cache = ConvCache {
        blocks,
        cols,
        in_h: x.h,
        in_w: x.w,
        out_h: oh,
        out_w: ow,
    };
    (out, cache)
}

pub fn conv_backward<F: Real>(
    dy: &Act<F>,
    cache: &ConvCache<F>,
    weight: ArrayView2<F>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<F> {
    let out_plane = cache.out_h * cache.out_w;
    let in_plane = cache.in_h * cache.in_w;
    let idx: Vec<usize> = (0..cache.blocks.len()).collect();
    let parts = par::map_slice(&idx, |&b| {
        let range = &cache.blocks[b];
        let dy_b = dy.data.slice(s![.., range.start * out_plane..range.end * out_plane]);
        let dw = need_dw.then(|| dy_b.dot(&cache.cols[b].t()));
        let db = need_dw.then(|| dy_b.sum_axis(Axis(1)));
        let dx = need_dx.then(|| {
            let dcols = weight.t().dot(&dy_b);
            col2im(&dcols, g, cache.in_h, cache.in_w, cache.out_h, cache.out_w, range.len())
        });
        (dw, db, dx)
    });
    let mut dw_total: Option<Array2<F>> = None;
    let mut db_total: Option<Array1<F>> = None;
    let mut dx_total = need_dx.then(|| Act::zeros(g.cin, dy.n, cache.in_h, cache.in_w));
    for (range, (dw, db, dx)) in cache.blocks.iter().zip(parts) {
        if let Some(dw) = dw {
            match dw_total.as_mut() {
                Some(t) => *t += &dw,
                None => dw_total = Some(dw),
            }
        }
        if let Some(db) = db {
            match db_total.as_mut() {
                Some(t) => *t += &db,
                None => db_total = Some(db),
            }
        }
        if let (Some(total), Some(dx)) = (dx_total.as_mut(), dx) {
            total
                .data
                .slice_mut(s![.., range.start * in_plane..range.end * in_plane])
                .assign(&dx);
        }
    }
    ConvGrads {
        dx: dx_total,
        dw: dw_total,
        db: db_total,
    }
}
