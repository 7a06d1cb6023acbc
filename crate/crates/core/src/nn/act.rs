use ndarray::{Array2, Array4, ArrayView4};

use crate::Real;

/// Channel-major activation: row `c` holds channel `c` of every sample,
/// laid out sample by sample, row-major within each plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<F> {
    pub data: Array2<F>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> Act<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            data: Array2::zeros((c, n * h * w)),
            n,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn from_nchw(x: ArrayView4<F>) -> Self {
        let (n, c, h, w) = x.dim();
        let plane = h * w;
        let mut data = Array2::zeros((c, n * plane));
        for ni in 0..n {
            for ci in 0..c {
                let mut dst = data.row_mut(ci);
                let dst = dst.as_slice_mut().expect("standard layout");
                for (k, v) in x.slice(ndarray::s![ni, ci, .., ..]).iter().enumerate() {
                    dst[ni * plane + k] = *v;
                }
            }
        }
        Act { data, n, h, w }
    }

    pub fn to_nchw(&self) -> Array4<F> {
        let c = self.channels();
        let plane = self.plane();
        let src = self.data.as_slice().expect("standard layout");
        let row = self.n * plane;
        Array4::from_shape_fn((self.n, c, self.h, self.w), |(ni, ci, y, x)| {
            src[ci * row + ni * plane + y * self.w + x]
        })
    }

    pub fn add_assign(&mut self, other: &Act<F>) {
        debug_assert_eq!(self.data.dim(), other.data.dim());
        self.data += &other.data;
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}
