//! Raw numeric kernels shared by forward and backward passes. Nothing here
//! knows about the graph.

use std::cmp::Ordering;

use super::Scalar;
use crate::error::{Error, Result};

/// Maps each flat index of `out_shape` to a flat index of `b_shape` under
/// trailing-axis broadcasting. `None` means the shapes are identical.
pub(crate) fn broadcast_map(op: &'static str, out_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if out_shape == b_shape {
        return Ok(None);
    }
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: out_shape.to_vec(),
        rhs: b_shape.to_vec(),
    };
    if b_shape.len() > out_shape.len() {
        return Err(mismatch());
    }
    let offset = out_shape.len() - b_shape.len();
    // stride of b for each output axis (0 where b is stretched or absent)
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for (i, &bd) in b_shape.iter().enumerate().rev() {
        let od = out_shape[offset + i];
        if bd == od {
            strides[offset + i] = acc;
        } else if bd != 1 {
            return Err(mismatch());
        }
        acc *= bd;
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for axis in (0..out_shape.len()).rev() {
            counter[axis] += 1;
            pos += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            pos -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    Ok(Some(map))
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum = sum + e;
            }
            if log {
                let log_sum = sum.ln();
                for a in 0..len {
                    let idx = base + a * inner;
                    out[idx] = x[idx] - max - log_sum;
                }
            } else {
                for a in 0..len {
                    out[base + a * inner] = out[base + a * inner] / sum;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if
    /// inside the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => image[(c * g.height + y) * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let idx = (c * g.height + y) * g.width + x;
                            image[idx] = image[idx] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Indices of the `k` largest values, ordered by value descending and then
/// by index ascending. NaN compares below every number.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::invalid(
            "topk_indices",
            format!("k = {k} outside 1..={}", values.len()),
        ));
    }
    let key = |i: usize| {
        let v = values[i];
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v.as_f64()
        }
    };
    let cmp = |&a: &usize, &b: &usize| match key(b).total_cmp(&key(a)) {
        Ordering::Equal => a.cmp(&b),
        ord => ord,
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_bias_over_channels() {
        let map = broadcast_map("t", &[2, 3, 2], &[3, 1]).unwrap().unwrap();
        assert_eq!(map, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
        assert!(broadcast_map("t", &[2, 3], &[2, 3]).unwrap().is_none());
        assert!(broadcast_map("t", &[2, 3], &[2]).is_err());
        assert!(broadcast_map("t", &[3], &[2, 3]).is_err());
    }

    #[test]
    fn topk_tie_rule() {
        assert_eq!(topk_indices(&[0.1f64, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[1.0f64; 4], 2).unwrap(), vec![0, 1]);
        assert!(topk_indices(&[1.0f64; 4], 0).is_err());
        assert!(topk_indices(&[1.0f64; 4], 5).is_err());
    }
}
