//! 2-D cross-correlation with zero padding, stride and channel groups.
//!
//! Two execution paths share the same summation order per output element
//! (input channel, kernel row, kernel column, then bias):
//! depthwise convolutions run a direct loop, everything else goes through
//! im2col + GEMM.

use crate::error::{Error, Result};
use crate::ops::gemm::gemm;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], opts: Conv2dOptions) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, w]: [usize; 4] = input
            .try_into()
            .map_err(|_| Error::dim(OP, format!("input must be [N,C,H,W], got {input:?}")))?;
        let [cout, cin_g, kh, kw]: [usize; 4] = weight
            .try_into()
            .map_err(|_| Error::dim(OP, format!("weight must be [Cout,Cin/g,Kh,Kw], got {weight:?}")))?;
        let g = opts.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::config(
                "groups",
                format!("{g} groups must divide Cin={cin} and Cout={cout}"),
            ));
        }
        if opts.stride.0 == 0 || opts.stride.1 == 0 {
            return Err(Error::config("stride", "stride must be at least 1"));
        }
        if cin_g != cin / g {
            return Err(Error::dim_axis(
                OP,
                1,
                format!("weight expects {cin_g} channels per group, input has {}", cin / g),
            ));
        }
        let (ph, pw) = opts.padding;
        if kh > h + 2 * ph {
            return Err(Error::dim_axis(
                OP,
                2,
                format!("kernel {kh} exceeds padded height {}", h + 2 * ph),
            ));
        }
        if kw > w + 2 * pw {
            return Err(Error::dim_axis(
                OP,
                3,
                format!("kernel {kw} exceeds padded width {}", w + 2 * pw),
            ));
        }
        let ho = (h + 2 * ph - kh) / opts.stride.0 + 1;
        let wo = (w + 2 * pw - kw) / opts.stride.1 + 1;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            opts,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.opts.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.opts.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == (1, 1) && self.opts.padding == (0, 0)
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Multiply-accumulates of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.kh * self.kw * self.cin_g() * self.cout * self.ho * self.wo * self.n) as u64
    }

    /// Input coordinate read by output position `o` at kernel offset `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim_axis(
                "conv2d",
                0,
                format!("bias must be [{cout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Unfolds one group of one sample into a `[cin_g·kh·kw, ho·wo]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, c0: usize, cols: &mut [T]) {
    let p = g.ho * g.wo;
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    for ci in 0..g.cin_g() {
        let plane = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let iy = ConvGeometry::source(oy, ky, sh, ph, g.h);
                    for ox in 0..g.wo {
                        row[oy * g.wo + ox] = match (iy, ConvGeometry::source(ox, kx, sw, pw, g.w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into image space.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, c0: usize, dx: &mut [T]) {
    let p = g.ho * g.wo;
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) {
                            plane[iy * g.w + ix] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), opts)?;
    check_bias(bias, g.cout)?;
    let x = input.data();
    let w = weight.data();
    let p = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * p];

    if g.is_depthwise() {
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        for n in 0..g.n {
            for c in 0..g.cout {
                let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                let kernel = &w[c * g.kh * g.kw..][..g.kh * g.kw];
                let dst = &mut out[(n * g.cout + c) * p..][..p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = T::zero();
                        for ky in 0..g.kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                if let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) {
                                    acc += plane[iy * g.w + ix] * kernel[ky * g.kw + kx];
                                }
                            }
                        }
                        dst[oy * g.wo + ox] = acc;
                    }
                }
            }
        }
    } else {
        let k = g.cin_g() * g.kh * g.kw;
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
        for n in 0..g.n {
            let xn = &x[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
            for grp in 0..opts.groups {
                let c0 = grp * g.cin_g();
                let b: &[T] = if g.is_pointwise() {
                    &xn[c0 * p..(c0 + g.cin_g()) * p]
                } else {
                    im2col(xn, &g, c0, &mut cols);
                    &cols
                };
                let co0 = grp * g.cout_g();
                let wg = &w[co0 * k..(co0 + g.cout_g()) * k];
                let dst = &mut out[(n * g.cout + co0) * p..][..g.cout_g() * p];
                gemm(g.cout_g(), k, p, wg, false, b, false, dst);
            }
        }
    }

    if let Some(b) = bias {
        for (plane, &bc) in out.chunks_mut(p).zip(b.data().iter().cycle()) {
            for v in plane {
                *v += bc;
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

/// Input, weight and optional bias gradients.
pub type ConvGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

/// Gradients of [`conv2d`] with respect to input, weight and (when present) bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    opts: Conv2dOptions,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), opts)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "grad shape {:?} != output shape {:?}",
                grad_out.shape(),
                g.output_shape()
            ),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let p = g.ho * g.wo;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];

    if g.is_depthwise() {
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        for n in 0..g.n {
            for c in 0..g.cout {
                let base = (n * g.cin + c) * g.h * g.w;
                let gplane = &gy[(n * g.cout + c) * p..][..p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let go = gplane[oy * g.wo + ox];
                        for ky in 0..g.kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                if let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) {
                                    let widx = (c * g.kh + ky) * g.kw + kx;
                                    dx[base + iy * g.w + ix] += go * w[widx];
                                    dw[widx] += go * x[base + iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let k = g.cin_g() * g.kh * g.kw;
        let mut cols = vec![T::zero(); k * p];
        let mut dcols = vec![T::zero(); k * p];
        for n in 0..g.n {
            let xn = &x[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
            for grp in 0..opts.groups {
                let c0 = grp * g.cin_g();
                let co0 = grp * g.cout_g();
                let gyg = &gy[(n * g.cout + co0) * p..][..g.cout_g() * p];
                let wg = &w[co0 * k..(co0 + g.cout_g()) * k];

                im2col(xn, &g, c0, &mut cols);
                gemm(
                    g.cout_g(),
                    p,
                    k,
                    gyg,
                    false,
                    &cols,
                    true,
                    &mut dw[co0 * k..(co0 + g.cout_g()) * k],
                );

                dcols.fill(T::zero());
                gemm(k, g.cout_g(), p, wg, true, gyg, false, &mut dcols);
                col2im(&dcols, &g, c0, &mut dx[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w]);
            }
        }
    }

    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for (i, plane) in gy.chunks(p).enumerate() {
            db[i % g.cout] += plane.iter().fold(T::zero(), |a, &v| a + v);
        }
        Tensor::from_parts(vec![g.cout], db)
    });
    Ok((
        Tensor::from_parts(input.shape().to_vec(), dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        db,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Explicit nested-loop cross-correlation (groups = 1), bias added last.
    fn loop_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims::<4>("oracle").unwrap();
        let [cout, _, kh, kw] = w.dims::<4>("oracle").unwrap();
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (wd + 2 * pw - kw) / sw + 1;
        let mut out = Vec::new();
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * sh + ky) as isize - ph as isize;
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        0.0
                                    } else {
                                        x.get(&[ni, ci, iy as usize, ix as usize]).unwrap()
                                    };
                                    acc += v * w.get(&[co, ci, ky, kx]).unwrap();
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b.data()[co];
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn hand_cross_correlation() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::ones(vec![1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor::ones(vec![3, 1, 1, 1]);
        let b = Tensor::zeros(vec![3]);
        let y = conv2d(&x, &w, Some(&b), Conv2dOptions::default().groups(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn no_kernel_flip() {
        // A kernel with a single 1 in the top-left picks x[i, j], not x[i+1, j+1].
        let x = Tensor::<f64>::from_fn(vec![1, 1, 3, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn matches_loop_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, k) in &[
            ((1, 1), (0, 0), (3, 3)),
            ((2, 1), (1, 2), (3, 2)),
            ((1, 1), (0, 0), (1, 1)),
            ((2, 2), (1, 1), (5, 5)),
        ] {
            let x = Tensor::<f64>::randn(vec![2, 3, 5, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![4, 3, k.0, k.1], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);
            let opts = Conv2dOptions::default()
                .stride(stride.0, stride.1)
                .padding(pad.0, pad.1);
            let y = conv2d(&x, &w, Some(&b), opts).unwrap();
            assert_eq!(y, loop_oracle(&x, &w, Some(&b), stride, pad));
        }
    }

    #[test]
    fn depthwise_equals_per_channel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let x = Tensor::<f64>::randn(vec![2, c, 6, 7], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![c, 1, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![c], 1.0, &mut rng);
        let opts = Conv2dOptions::default().stride(2, 2).padding(1, 1);
        let y = conv2d(&x, &w, Some(&b), opts.groups(c)).unwrap();

        let [_, _, ho, wo] = y.dims::<4>("t").unwrap();
        for n in 0..2 {
            for ch in 0..c {
                let xc = Tensor::from_fn(vec![1, 1, 6, 7], |i| x.data()[(n * c + ch) * 42 + i]);
                let wc = Tensor::from_fn(vec![1, 1, 3, 3], |i| w.data()[ch * 9 + i]);
                let bc = Tensor::new(vec![1], vec![b.data()[ch]]).unwrap();
                let yc = conv2d(&xc, &wc, Some(&bc), opts).unwrap();
                let got = &y.data()[(n * c + ch) * ho * wo..][..ho * wo];
                assert_eq!(got, yc.data());
            }
        }
    }

    #[test]
    fn grouped_matches_split_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![1, 4, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![6, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &w, None, Conv2dOptions::default().groups(2)).unwrap();
        for grp in 0..2 {
            let xg = Tensor::from_fn(vec![1, 2, 5, 5], |i| x.data()[grp * 50 + i]);
            let wg = Tensor::from_fn(vec![3, 2, 3, 3], |i| w.data()[grp * 54 + i]);
            let yg = conv2d(&xg, &wg, None, Conv2dOptions::default()).unwrap();
            assert_eq!(&y.data()[grp * 27..][..27], yg.data());
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![2, 3, 5, 5]);
        match conv2d(&x, &w, None, Conv2dOptions::default()) {
            Err(Error::Dimension { axis: Some(2), .. }) => {}
            other => panic!("expected height error, got {other:?}"),
        }
        let w = Tensor::<f64>::zeros(vec![2, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dOptions::default().groups(2)),
            Err(Error::Config { .. })
        ));
    }
}
