//! Convolution kernels (im2col + gemm) used by the autodiff ops.
//!
//! All three kernels are bilinear slices of the same trilinear form
//! `<conv(x, w), u>`, so each one's adjoint is another one of the three.

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution mapping `x: [N, cin, h_in, w_in]` to
/// `y: [N, cout, h_out, w_out]` with a square `k x k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an input of the given size.
    pub fn forward(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            h_in: h,
            w_in: w,
            h_out,
            w_out,
        }
    }

    /// Geometry of a transposed convolution taking `cin_t` channels at
    /// `h x w` to `cout_t` channels at the upsampled size. The returned
    /// geometry is that of the adjoint forward convolution, which maps the
    /// large image back down.
    pub fn transposed(
        cin_t: usize,
        cout_t: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let h_big = (h - 1) * stride + k - 2 * pad;
        let w_big = (w - 1) * stride + k - 2 * pad;
        ConvGeom {
            cin: cout_t,
            cout: cin_t,
            k,
            stride,
            pad,
            h_in: h_big,
            w_in: w_big,
            h_out: h,
            w_out: w,
        }
    }

    #[inline]
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    #[inline]
    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn x_len(&self) -> usize {
        self.cin * self.h_in * self.w_in
    }

    pub fn y_len(&self) -> usize {
        self.cout * self.h_out * self.w_out
    }

    pub fn w_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn x_shape(&self, n: usize) -> Vec<usize> {
        vec![n, self.cin, self.h_in, self.w_in]
    }

    pub fn y_shape(&self, n: usize) -> Vec<usize> {
        vec![n, self.cout, self.h_out, self.w_out]
    }

    pub fn w_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.k, self.k]
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h_in as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w_in as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h_in * g.w_in..(c + 1) * g.h_in * g.w_in];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w_in as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)`, no bias.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (r, p) = (g.col_rows(), g.positions());
    let mut cols = vec![T::zero(); r * p];
    let mut y = vec![T::zero(); n * g.y_len()];
    for b in 0..n {
        im2col(g, &x[b * g.x_len()..(b + 1) * g.x_len()], &mut cols);
        let out = &mut y[b * g.y_len()..(b + 1) * g.y_len()];
        T::gemm(
            g.cout,
            r,
            p,
            T::one(),
            w,
            r as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            out,
            p as isize,
            1,
        );
    }
    y
}

/// Adjoint of [`conv_forward`] in `x`: maps a `y`-shaped tensor back to `x` space.
pub fn conv_transpose<T: Scalar>(g: &ConvGeom, n: usize, u: &[T], w: &[T]) -> Vec<T> {
    let (r, p) = (g.col_rows(), g.positions());
    let mut cols = vec![T::zero(); r * p];
    let mut x = vec![T::zero(); n * g.x_len()];
    for b in 0..n {
        let ub = &u[b * g.y_len()..(b + 1) * g.y_len()];
        T::gemm(
            r,
            g.cout,
            p,
            T::one(),
            w,
            1,
            r as isize,
            ub,
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        col2im_add(g, &cols, &mut x[b * g.x_len()..(b + 1) * g.x_len()]);
    }
    x
}

/// Adjoint of [`conv_forward`] in `w`: `sum_b u_b * im2col(x_b)^T`.
pub fn conv_weight<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], u: &[T]) -> Vec<T> {
    let (r, p) = (g.col_rows(), g.positions());
    let mut cols = vec![T::zero(); r * p];
    let mut dw = vec![T::zero(); g.w_len()];
    for b in 0..n {
        im2col(g, &x[b * g.x_len()..(b + 1) * g.x_len()], &mut cols);
        let ub = &u[b * g.y_len()..(b + 1) * g.y_len()];
        T::gemm(
            g.cout,
            p,
            r,
            T::one(),
            ub,
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            &mut dw,
            r as isize,
            1,
        );
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.y_len()];
        for co in 0..g.cout {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.h_in as isize
                                    || ix >= g.w_in as isize
                                {
                                    continue;
                                }
                                acc += x[(ci * g.h_in + iy as usize) * g.w_in + ix as usize]
                                    * w[((co * g.cin + ci) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    y[(co * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i as f64 * 0.731 + salt).sin() * 1.7).fract())
            .collect()
    }

    #[test]
    fn forward_matches_direct_sum() {
        let g = ConvGeom::forward(2, 3, 3, 2, 1, 5, 6);
        let x = pseudo(g.x_len(), 0.3);
        let w = pseudo(g.w_len(), 1.1);
        let y = conv_forward(&g, 1, &x, &w);
        let d = direct_conv(&g, &x, &w);
        for (a, b) in y.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_share_one_trilinear_form() {
        let g = ConvGeom::forward(3, 2, 3, 2, 1, 6, 6);
        let n = 2;
        let x = pseudo(n * g.x_len(), 0.1);
        let w = pseudo(g.w_len(), 0.7);
        let u = pseudo(n * g.y_len(), 2.3);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let f1 = dot(&conv_forward(&g, n, &x, &w), &u);
        let f2 = dot(&conv_transpose(&g, n, &u, &w), &x);
        let f3 = dot(&conv_weight(&g, n, &x, &u), &w);
        assert!((f1 - f2).abs() < 1e-10, "{f1} vs {f2}");
        assert!((f1 - f3).abs() < 1e-10, "{f1} vs {f3}");
    }

    #[test]
    fn transposed_geometry_doubles() {
        let g = ConvGeom::transposed(8, 4, 4, 2, 1, 4, 4);
        assert_eq!((g.h_in, g.w_in, g.cin, g.cout), (8, 8, 4, 8));
        assert_eq!(ConvGeom::forward(4, 8, 4, 2, 1, 8, 8).h_out, 4);
    }
}
