//! Forward and input-gradient kernels for 3×3 same-padded convolution,
//! rectification and 2×2 max pooling.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

/// A frozen 3×3 convolution with unit stride and zero padding of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// Kernel flattened to `out × (in·9)`, row-major over `(in, ky, kx)`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Conv3x3 {
    /// `weight` has shape `out × in × 3 × 3` flattened row-major.
    pub fn new(out_channels: usize, in_channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), out_channels * in_channels * 9);
        assert_eq!(bias.len(), out_channels);
        Self {
            weight: Array2::from_shape_vec((out_channels, in_channels * 9), weight).unwrap(),
            bias: Array1::from(bias),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (3, 3)
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels());
        let cols = im2col(x);
        let mut out = Array2::<f64>::zeros((self.out_channels(), h * w));
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut out);
        out.into_shape_with_order((self.out_channels(), h, w)).unwrap()
    }

    /// Gradient with respect to the input given the gradient at the output.
    pub fn backward_input(&self, grad_out: ArrayView3<f64>) -> Array3<f64> {
        let (o, h, w) = grad_out.dim();
        assert_eq!(o, self.out_channels());
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, h * w))
            .unwrap();
        let mut cols = Array2::<f64>::zeros((self.weight.ncols(), h * w));
        general_mat_mul(1.0, &self.weight.t(), &g, 0.0, &mut cols);
        col2im(&cols, self.in_channels(), h, w)
    }
}

fn im2col(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let mut cols = vec![0.0; c * 9 * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                let dst = &mut cols[row..row + h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * 9, h * w), cols).unwrap()
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let src = cols.as_slice().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                let col = &src[row..row + h * w];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &col[y * w..(y + 1) * w];
                    let (dst, s) = match kx {
                        0 => (&mut prow[..w - 1], &crow[1..]),
                        1 => (&mut prow[..], crow),
                        _ => (&mut prow[1..], &crow[..w - 1]),
                    };
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).unwrap()
}

pub fn relu(x: ArrayView3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `out` is the rectified output of the forward pass.
pub fn relu_backward(out: ArrayView3<f64>, grad_out: ArrayView3<f64>) -> Array3<f64> {
    let mut g = grad_out.to_owned();
    g.zip_mut_with(&out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// Output extent of a 2×2 stride-2 pool in ceil mode.
pub fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2×2 stride-2 max pooling in ceil mode; border windows are clipped.
pub fn max_pool(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let mut m = f64::NEG_INFINITY;
        for sy in 2 * y..(2 * y + 2).min(h) {
            for sx in 2 * xx..(2 * xx + 2).min(w) {
                m = m.max(x[[ch, sy, sx]]);
            }
        }
        m
    })
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool_backward(input: ArrayView3<f64>, grad_out: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let (_, oh, ow) = grad_out.dim();
    let mut g = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                let mut m = f64::NEG_INFINITY;
                for sy in 2 * y..(2 * y + 2).min(h) {
                    for sx in 2 * xx..(2 * xx + 2).min(w) {
                        if input[[ch, sy, sx]] > m {
                            m = input[[ch, sy, sx]];
                            best = (sy, sx);
                        }
                    }
                }
                g[[ch, best.0, best.1]] += grad_out[[ch, y, xx]];
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(conv: &Conv3x3, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let o = conv.out_channels();
        Array3::from_shape_fn((o, h, w), |(oc, y, xx)| {
            let mut s = conv.bias[oc];
            for ic in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            s += conv.weight[[oc, ic * 9 + ky * 3 + kx]] * x[[ic, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    fn sample_conv(o: usize, i: usize) -> Conv3x3 {
        let w = (0..o * i * 9).map(|k| ((k * 37 % 17) as f64 - 8.0) / 10.0).collect();
        let b = (0..o).map(|k| k as f64 * 0.1).collect();
        Conv3x3::new(o, i, w, b)
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let conv = sample_conv(4, 3);
        let x = Array::from_shape_fn((3, 5, 7), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 11) as f64 - 5.0);
        let a = conv.forward(x.view());
        let b = naive_conv(&conv, &x);
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x) - bias, g> == <x, conv^T(g)>
        let conv = sample_conv(2, 3);
        let x = Array::from_shape_fn((3, 4, 6), |(c, y, x)| {
            (c as f64 - 1.0) * 0.3 + y as f64 * 0.1 - x as f64 * 0.05
        });
        let g = Array::from_shape_fn((2, 4, 6), |(c, y, x)| ((c + 2 * y + 3 * x) % 5) as f64 - 2.0);
        let mut y = conv.forward(x.view());
        for (mut plane, &b) in y.axis_iter_mut(Axis(0)).zip(conv.bias.iter()) {
            plane.mapv_inplace(|v| v - b);
        }
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &conv.backward_input(g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn pool_uses_ceil_mode() {
        let x = Array::from_shape_fn((1, 5, 3), |(_, y, x)| (y * 3 + x) as f64);
        let p = max_pool(x.view());
        assert_eq!(p.dim(), (1, 3, 2));
        assert_eq!(p[[0, 0, 0]], 4.0);
        assert_eq!(p[[0, 0, 1]], 5.0);
        assert_eq!(p[[0, 2, 0]], 13.0);
        assert_eq!(p[[0, 2, 1]], 14.0);
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let x = Array::from_shape_vec((1, 2, 2), vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let g = max_pool_backward(x.view(), Array::from_elem((1, 1, 1), 5.0).view());
        assert_eq!(g.into_raw_vec_and_offset().0, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_backward_masks_inactive_units() {
        let out = Array::from_shape_vec((1, 1, 3), vec![0.0, 2.0, 0.5]).unwrap();
        let g = Array::from_elem((1, 1, 3), 1.5);
        let r = relu_backward(out.view(), g.view());
        assert_eq!(r.into_raw_vec_and_offset().0, vec![0.0, 1.5, 1.5]);
    }
}
