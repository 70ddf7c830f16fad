use super::tape::Var;
use super::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kx - pad` is in range.
fn valid_span(kx: usize, g: &Geometry) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
    (lo, hi.max(lo))
}

/// Unfolds `x [N, C, H, W]` into `[C*kh*kw, N*Ho*Wo]`.
fn im2col<E: Element>(x: &[E], g: &Geometry) -> Vec<E> {
    let plane = g.ho * g.wo;
    let cols = g.cols();
    let mut col = vec![E::zero(); g.rows() * cols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g);
                            if lo < hi {
                                let off = lo + kx - g.pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `[C*kh*kw, N*Ho*Wo]` back onto `dx`.
fn col2im<E: Element>(col: &[E], g: &Geometry, dx: &mut [E]) {
    let plane = g.ho * g.wo;
    let cols = g.cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let (lo, hi) = valid_span(kx, g);
                            if lo < hi {
                                let off = lo + kx - g.pad;
                                let src_row = &src[oy * g.wo + lo..oy * g.wo + hi];
                                for (d, &v) in dst_row[off..off + hi - lo].iter_mut().zip(src_row) {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N, P]` <-> `[N, O, P]`.
fn swap_outer<E: Element>(src: &[E], a: usize, b: usize, p: usize) -> Vec<E> {
    let mut dst = vec![E::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            dst[(j * a + i) * p..(j * a + i + 1) * p]
                .copy_from_slice(&src[(i * b + j) * p..(i * b + j + 1) * p]);
        }
    }
    dst
}

impl<'t, E: Element> Var<'t, E> {
    /// 2-D cross-correlation of `x [N, C, H, W]` with `weight [O, C, kh, kw]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&self, weight: &Var<'t, E>, stride: usize, pad: usize) -> Var<'t, E> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch {xs:?} vs {ws:?}");
        assert!(stride >= 1);
        let (h, w) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let g = Geometry {
            n: xs[0],
            c: xs[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let o = ws[0];
        let x = self.value_rc();
        let wt = weight.value_rc();
        let col = im2col(x.data(), &g);
        let (rows, cols) = (g.rows(), g.cols());
        let mut y = vec![E::zero(); o * cols];
        E::gemm(false, false, o, cols, rows, E::one(), wt.data(), &col, E::zero(), &mut y);
        let plane = g.ho * g.wo;
        let out = Tensor::from_parts(vec![g.n, o, g.ho, g.wo], swap_outer(&y, o, g.n, plane));
        drop(col);
        let (sx, sw) = (self.slot(), weight.slot());
        self.tape().record(out, &[self, weight], move |grad, sink| {
            let gy = swap_outer(grad.data(), g.n, o, plane);
            if sw.tracked() {
                let col = im2col(x.data(), &g);
                sink.accumulate(sw, o * rows, |gw| {
                    E::gemm(false, true, o, rows, cols, E::one(), &gy, &col, E::one(), gw);
                });
            }
            if sx.tracked() {
                let mut dcol = vec![E::zero(); rows * cols];
                E::gemm(true, false, rows, cols, o, E::one(), wt.data(), &gy, E::zero(), &mut dcol);
                sink.accumulate(sx, x.len(), |gx| col2im(&dcol, &g, gx));
            }
        })
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<'t, E> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample expects NCHW");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value();
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let out = Tensor::from_parts(vec![s[0], s[1], ho, wo], out);
        let slot = self.slot();
        self.tape().record(out, &[self], move |g, sink| {
            sink.accumulate(slot, planes * h * w, |gx| {
                for p in 0..planes {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            gx[p * h * w + (oy / factor) * w + ox / factor] += src[oy * wo + ox];
                        }
                    }
                }
            });
        })
    }

    /// Average over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&self) -> Var<'t, E> {
        let s = self.shape().to_vec();
        assert!(s.len() >= 2);
        let inner: usize = s[2..].iter().product();
        let inv = E::one() / E::from_usize(inner.max(1)).unwrap();
        let data: Vec<E> = self
            .value()
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<E>() * inv)
            .collect();
        let out = Tensor::from_parts(vec![s[0], s[1]], data);
        let slot = self.slot();
        let total = self.value().len();
        self.tape().record(out, &[self], move |g, sink| {
            sink.accumulate(slot, total, |gx| {
                for (chunk, &gv) in gx.chunks_mut(inner).zip(g.data()) {
                    chunk.iter_mut().for_each(|v| *v += gv * inv);
                }
            });
        })
    }
}
