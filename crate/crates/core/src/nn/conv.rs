//! 3-D convolution (as im2col + GEMM) and max pooling kernels on raw
//! `[B, C, D, H, W]` buffers.

use rayon::prelude::*;

use super::gemm::gemm;
use super::NnError;

/// Shapes of one convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_dims: [usize; 3],
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub pad: usize,
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        out_ch: usize,
        kernel: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self, NnError> {
        if x_shape.len() != 5 {
            return Err(NnError::ShapeMismatch(format!(
                "expected [B, C, D, H, W], got {x_shape:?}"
            )));
        }
        if stride == 0 || kernel.contains(&0) {
            return Err(NnError::ShapeMismatch(
                "stride and kernel must be positive".into(),
            ));
        }
        let in_dims = [x_shape[2], x_shape[3], x_shape[4]];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            let padded = in_dims[i] + 2 * pad;
            if padded < kernel[i] {
                return Err(NnError::EmptyOutput(format!(
                    "axis {i}: input {} with pad {pad} is smaller than kernel {}",
                    in_dims[i], kernel[i]
                )));
            }
            out_dims[i] = (padded - kernel[i]) / stride + 1;
        }
        Ok(Self {
            batch: x_shape[0],
            in_ch: x_shape[1],
            in_dims,
            out_ch,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    pub fn in_spatial(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Rows of the im2col matrix: `C · kd · kh · kw`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_ch,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

/// One sample `[C, D, H, W]` to a `[C·kd·kh·kw, D'·H'·W']` patch matrix.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let p = g.out_spatial();
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * d * h * w..][..d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..][..p];
                    let mut q = 0;
                    for z in 0..od {
                        let iz = g.src(z, a, d);
                        for y in 0..oh {
                            let iy = g.src(y, b, h);
                            for xo in 0..ow {
                                dst[q] = match (iz, iy, g.src(xo, e, w)) {
                                    (Some(iz), Some(iy), Some(ix)) => xc[(iz * h + iy) * w + ix],
                                    _ => 0.0,
                                };
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `dx`.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let p = g.out_spatial();
    let mut row = 0;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * d * h * w..][..d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..][..p];
                    let mut q = 0;
                    for z in 0..od {
                        let iz = g.src(z, a, d);
                        for y in 0..oh {
                            let iy = g.src(y, b, h);
                            for xo in 0..ow {
                                if let (Some(iz), Some(iy), Some(ix)) = (iz, iy, g.src(xo, e, w)) {
                                    dxc[(iz * h + iy) * w + ix] += src[q];
                                }
                                q += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b`.
pub fn conv3d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ck, p) = (g.patch_len(), g.out_spatial());
    let in_len = g.in_ch * g.in_spatial();
    let out_len = g.out_ch * p;
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each_init(
            || {
                if g.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; ck * p]
                }
            },
            |col, (y, xs)| {
                let cols: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, col);
                    col
                };
                gemm(g.out_ch, ck, p, weight, false, cols, false, y, 0.0);
                if let Some(b) = bias {
                    for (f, row) in y.chunks_mut(p).enumerate() {
                        for v in row {
                            *v += b[f];
                        }
                    }
                }
            },
        );
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let (ck, p) = (g.patch_len(), g.out_spatial());
    let in_len = g.in_ch * g.in_spatial();
    let out_len = g.out_ch * p;

    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; g.batch * in_len];
        dx.par_chunks_mut(in_len)
            .zip(dy.par_chunks(out_len))
            .for_each_init(
                || vec![0.0; ck * p],
                |dcol, (dxs, dys)| {
                    gemm(ck, g.out_ch, p, weight, true, dys, false, dcol, 0.0);
                    if g.is_pointwise() {
                        dxs.copy_from_slice(dcol);
                    } else {
                        col2im(g, dcol, dxs);
                    }
                },
            );
        dx
    });

    // Weight gradient is summed over the batch in sample order.
    let dweight = want_dw.then(|| {
        let mut dw = vec![0.0; g.out_ch * ck];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; ck * p]
        };
        for n in 0..g.batch {
            let xs = &x[n * in_len..][..in_len];
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(
                g.out_ch,
                p,
                ck,
                &dy[n * out_len..][..out_len],
                false,
                cols,
                true,
                &mut dw,
                1.0,
            );
        }
        dw
    });

    let dbias = want_db.then(|| {
        let mut db = vec![0.0; g.out_ch];
        for n in 0..g.batch {
            for (f, row) in dy[n * out_len..][..out_len].chunks(p).enumerate() {
                db[f] += row.iter().sum::<f64>();
            }
        }
        db
    });

    ConvGrads { dx, dweight, dbias }
}

/// Max pooling with implicit `-inf` padding; returns values and, per output,
/// the flat input index that won.
pub fn max_pool3d_forward(g: &ConvGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let planes = g.batch * g.in_ch;
    let (sin, sout) = (d * h * w, od * oh * ow);
    let mut out = vec![f64::NEG_INFINITY; planes * sout];
    let mut arg = vec![0usize; planes * sout];
    for pl in 0..planes {
        let xs = &x[pl * sin..][..sin];
        let mut q = pl * sout;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..kd {
                        let Some(iz) = g.src(z, a, d) else { continue };
                        for b in 0..kh {
                            let Some(iy) = g.src(y, b, h) else { continue };
                            for e in 0..kw {
                                let Some(ix) = g.src(xo, e, w) else { continue };
                                let i = (iz * h + iy) * w + ix;
                                if best_i == usize::MAX || xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out[q] = best;
                    arg[q] = pl * sin + best_i;
                    q += 1;
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_floor_formula() {
        let g = ConvGeom::new(&[1, 2, 8, 8, 8], 3, [3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out_dims, [4, 4, 4]);
        let g = ConvGeom::new(&[1, 1, 3, 3, 3], 1, [2, 2, 2], 1, 0).unwrap();
        assert_eq!(g.out_dims, [2, 2, 2]);
        assert!(matches!(
            ConvGeom::new(&[1, 1, 2, 8, 8], 1, [3, 3, 3], 1, 0),
            Err(NnError::EmptyOutput(_))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c
        let g = ConvGeom::new(&[1, 2, 5, 4, 3], 1, [3, 2, 3], 2, 1).unwrap();
        let n_in = 2 * 5 * 4 * 3;
        let n_col = g.patch_len() * g.out_spatial();
        let x: Vec<f64> = (0..n_in).map(|i| (i as f64 * 0.7).sin()).collect();
        let c: Vec<f64> = (0..n_col).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; n_col];
        im2col(&g, &x, &mut col);
        let mut back = vec![0.0; n_in];
        col2im(&g, &c, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let g = ConvGeom::new(&[1, 1, 4, 4, 4], 1, [3, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..64).map(f64::from).collect();
        let (y, arg) = max_pool3d_forward(&g, &x);
        assert_eq!(g.out_dims, [2, 2, 2]);
        // last window covers z,y,x in 1..=3 → max at (3,3,3) = 63
        assert_eq!(y[7], 63.0);
        assert_eq!(arg[7], 63);
        // first window covers 0..=1 on every axis
        assert_eq!(y[0], 21.0);
    }
}
