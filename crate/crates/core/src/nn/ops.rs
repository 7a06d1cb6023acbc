use ndarray::Zip;

use super::Act;
use crate::Real;

pub fn relu<F: Real>(mut x: Act<F>) -> Act<F> {
    x.data.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<F: Real>(mut dy: Act<F>, out: &Act<F>) -> Act<F> {
    Zip::from(&mut dy.data).and(&out.data).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
    dy
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Act<F>) -> Act<F> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.channels(), x.n, h2, w2);
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    let (plane, plane2) = (x.plane(), h2 * w2);
    for img in 0..x.channels() * x.n {
        let s = &src[img * plane..(img + 1) * plane];
        let d = &mut dst[img * plane2..(img + 1) * plane2];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[y * w2 + xx] = s[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dy: &Act<F>) -> Act<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Act::zeros(dy.channels(), dy.n, h, w);
    let src = dy.data.as_slice().expect("standard layout");
    let dst = out.data.as_slice_mut().expect("standard layout");
    let (plane, plane2) = (h * w, dy.plane());
    for img in 0..dy.channels() * dy.n {
        let s = &src[img * plane2..(img + 1) * plane2];
        let d = &mut dst[img * plane..(img + 1) * plane];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                d[(y / 2) * w + xx / 2] += s[y * dy.w + xx];
            }
        }
    }
    out
}
