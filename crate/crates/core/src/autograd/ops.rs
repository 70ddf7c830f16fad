//! Differentiable operations on [`Var`].
//!
//! Shape mismatches inside the graph are programming errors and panic; the
//! public model APIs validate user-facing shapes before building a graph.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{Element, Tensor};

fn same_shape<E: Element>(op: &str, a: &Var<'_, E>, b: &Var<'_, E>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'t, E: Element> Var<'t, E> {
    /// Element-wise map with a derivative expressed through input `x` and output `y`.
    fn unary(&self, f: impl Fn(E) -> E, df: impl Fn(E, E) -> E + 'static) -> Var<'t, E> {
        let x = self.value_rc();
        let out = x.map(f);
        let y = Rc::new(out.clone());
        let slot = self.slot();
        let n = x.len();
        self.tape().record(out, &[self], move |g, sink| {
            sink.accumulate(slot, n, |gx| {
                for i in 0..n {
                    gx[i] += g.data()[i] * df(x.data()[i], y.data()[i]);
                }
            });
        })
    }

    pub fn relu(&self) -> Var<'t, E> {
        self.unary(
            |x| x.max(E::zero()),
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, E> {
        let s = E::lit(slope);
        self.unary(
            move |x| if x > E::zero() { x } else { x * s },
            move |x, _| if x > E::zero() { E::one() } else { s },
        )
    }

    pub fn tanh(&self) -> Var<'t, E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t, E> {
        self.unary(
            |x| {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            },
            |_, y| y * (E::one() - y),
        )
    }

    pub fn exp(&self) -> Var<'t, E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Var<'t, E> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn sqr(&self) -> Var<'t, E> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn neg(&self) -> Var<'t, E> {
        self.unary(|x| -x, |_, _| -E::one())
    }

    pub fn scale(&self, s: E) -> Var<'t, E> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: E) -> Var<'t, E> {
        self.unary(move |x| x + s, |_, _| E::one())
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log_clamped(&self, floor: f64) -> Var<'t, E> {
        let lo = E::lit(floor);
        self.unary(
            move |x| x.max(lo).ln(),
            move |x, _| if x > lo { E::one() / x } else { E::zero() },
        )
    }

    fn binary(
        &self,
        other: &Var<'t, E>,
        op: &str,
        f: impl Fn(E, E) -> E,
        grads: impl Fn(E, E) -> (E, E) + 'static,
    ) -> Var<'t, E> {
        same_shape(op, self, other);
        let a = self.value_rc();
        let b = other.value_rc();
        let out = Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
        let (sa, sb) = (self.slot(), other.slot());
        let n = out.len();
        self.tape().record(out, &[self, other], move |g, sink| {
            sink.accumulate(sa, n, |ga| {
                for i in 0..n {
                    ga[i] += g.data()[i] * grads(a.data()[i], b.data()[i]).0;
                }
            });
            sink.accumulate(sb, n, |gb| {
                for i in 0..n {
                    gb[i] += g.data()[i] * grads(a.data()[i], b.data()[i]).1;
                }
            });
        })
    }

    pub fn add(&self, other: &Var<'t, E>) -> Var<'t, E> {
        self.binary(other, "add", |a, b| a + b, |_, _| (E::one(), E::one()))
    }

    pub fn sub(&self, other: &Var<'t, E>) -> Var<'t, E> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (E::one(), -E::one()))
    }

    pub fn mul(&self, other: &Var<'t, E>) -> Var<'t, E> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    /// Adds `bias[c]` to every element of channel `c`, where channels are axis 1.
    pub fn add_bias(&self, bias: &Var<'t, E>) -> Var<'t, E> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "add_bias needs at least 2 axes");
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(bias.shape(), &[c], "add_bias: bias must have {c} entries");
        let inner: usize = shape[2..].iter().product();
        let mut out = self.value().clone();
        let b = bias.value().data().to_vec();
        for (chunk, idx) in out.data_mut().chunks_mut(inner).zip(0..n * c) {
            let bv = b[idx % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let (sx, sb) = (self.slot(), bias.slot());
        let len = out.len();
        self.tape().record(out, &[self, bias], move |g, sink| {
            sink.add(sx, g.data());
            sink.accumulate(sb, c, |gb| {
                for (chunk, idx) in g.data().chunks(inner).zip(0..n * c) {
                    gb[idx % c] += chunk.iter().copied().sum::<E>();
                }
            });
            debug_assert_eq!(g.len(), len);
        })
    }

    /// `mask * a + (1 - mask) * b` with `mask` of shape `[N, 1, ...]`
    /// broadcast over the channel axis of `a` and `b` (`[N, C, ...]`).
    pub fn blend(mask: &Var<'t, E>, a: &Var<'t, E>, b: &Var<'t, E>) -> Var<'t, E> {
        same_shape("blend", a, b);
        let shape = a.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut mshape = shape.clone();
        mshape[1] = 1;
        assert_eq!(mask.shape(), &mshape[..], "blend: mask shape");
        let (m, av, bv) = (mask.value_rc(), a.value_rc(), b.value_rc());
        let mut out = Vec::with_capacity(av.len());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for p in 0..inner {
                    let w = m.data()[i * inner + p];
                    out.push(w * av.data()[base + p] + (E::one() - w) * bv.data()[base + p]);
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let (sm, sa, sb) = (mask.slot(), a.slot(), b.slot());
        let total = out.len();
        mask.tape().record(out, &[mask, a, b], move |g, sink| {
            let g = g.data();
            sink.accumulate(sm, n * inner, |gm| {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for p in 0..inner {
                            gm[i * inner + p] +=
                                g[base + p] * (av.data()[base + p] - bv.data()[base + p]);
                        }
                    }
                }
            });
            sink.accumulate(sa, total, |ga| {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for p in 0..inner {
                            ga[base + p] += g[base + p] * m.data()[i * inner + p];
                        }
                    }
                }
            });
            sink.accumulate(sb, total, |gb| {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for p in 0..inner {
                            gb[base + p] += g[base + p] * (E::one() - m.data()[i * inner + p]);
                        }
                    }
                }
            });
        })
    }

    pub fn sum_all(&self) -> Var<'t, E> {
        let out = Tensor::scalar(self.value().sum());
        let slot = self.slot();
        let n = self.value().len();
        self.tape().record(out, &[self], move |g, sink| {
            let gv = g.data()[0];
            sink.accumulate(slot, n, |gx| gx.iter_mut().for_each(|v| *v += gv));
        })
    }

    pub fn mean_all(&self) -> Var<'t, E> {
        let n = self.value().len().max(1);
        self.sum_all().scale(E::one() / E::from_usize(n).unwrap())
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, E> {
        let out = self
            .value()
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape: element count must match");
        let slot = self.slot();
        self.tape()
            .record(out, &[self], move |g, sink| sink.add(slot, g.data()))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<'t, E>], axis: usize) -> Var<'t, E> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), first.len(), "concat: rank mismatch");
                assert!(
                    s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                    "concat: extents differ off-axis: {s:?} vs {first:?}"
                );
                s[axis] * inner
            })
            .collect();
        let total_width: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value().data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total_width / inner;
        let out = Tensor::from_parts(shape, data);
        let slots: Vec<_> = parts.iter().map(|p| p.slot()).collect();
        parts[0].tape().record(out, parts, move |g, sink| {
            let mut offset = 0;
            for (slot, &w) in slots.iter().zip(&widths) {
                sink.accumulate(*slot, outer * w, |gp| {
                    for o in 0..outer {
                        let src = &g.data()[o * total_width + offset..o * total_width + offset + w];
                        for (d, &s) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += w;
            }
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t, E> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_w = shape[axis] * inner;
        let w = len * inner;
        let off = start * inner;
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&self.value().data()[o * src_w + off..o * src_w + off + w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        let slot = self.slot();
        let total = self.value().len();
        self.tape().record(out, &[self], move |g, sink| {
            sink.accumulate(slot, total, |gx| {
                for o in 0..outer {
                    let dst = &mut gx[o * src_w + off..o * src_w + off + w];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[o * w..(o + 1) * w]) {
                        *d += s;
                    }
                }
            });
        })
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&self, rhs: &Var<'t, E>) -> Var<'t, E> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        assert_eq!(b.shape()[0], k, "matmul: inner dimensions differ");
        let mut out = vec![E::zero(); m * n];
        E::gemm(false, false, m, n, k, E::one(), a.data(), b.data(), E::zero(), &mut out);
        let (sa, sb) = (self.slot(), rhs.slot());
        self.tape()
            .record(Tensor::from_parts(vec![m, n], out), &[self, rhs], move |g, sink| {
                sink.accumulate(sa, m * k, |ga| {
                    E::gemm(false, true, m, k, n, E::one(), g.data(), b.data(), E::one(), ga);
                });
                sink.accumulate(sb, k * n, |gb| {
                    E::gemm(true, false, k, n, m, E::one(), a.data(), g.data(), E::one(), gb);
                });
            })
    }

    /// Fully connected layer: `x [N, I]`, `weight [O, I]`, `bias [O]`.
    pub fn linear(&self, weight: &Var<'t, E>, bias: Option<&Var<'t, E>>) -> Var<'t, E> {
        let (x, w) = (self.value_rc(), weight.value_rc());
        assert_eq!(x.rank(), 2, "linear expects [N, I] input");
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        assert_eq!(w.shape(), &[o, i], "linear: weight shape");
        let mut out = vec![E::zero(); n * o];
        E::gemm(false, true, n, o, i, E::one(), x.data(), w.data(), E::zero(), &mut out);
        let (sx, sw) = (self.slot(), weight.slot());
        let y = self
            .tape()
            .record(Tensor::from_parts(vec![n, o], out), &[self, weight], move |g, sink| {
                sink.accumulate(sx, n * i, |gx| {
                    E::gemm(false, false, n, i, o, E::one(), g.data(), w.data(), E::one(), gx);
                });
                sink.accumulate(sw, o * i, |gw| {
                    E::gemm(true, false, o, i, n, E::one(), g.data(), x.data(), E::one(), gw);
                });
            });
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, E> {
        let shape = self.shape().to_vec();
        let width = *shape.last().expect("softmax of a scalar");
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(width) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let y = Rc::new(out.clone());
        let slot = self.slot();
        let n = out.len();
        self.tape().record(out, &[self], move |g, sink| {
            sink.accumulate(slot, n, |gx| {
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(width)
                    .zip(y.data().chunks(width))
                    .zip(gx.chunks_mut(width))
                {
                    let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..width {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_gradients;
    use super::super::Tape;
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| {
            let x = ((i as u64 + 1) * 2654435761 + seed * 97) % 1000;
            x as f64 / 500.0 - 1.0
        })
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x = t(&[3, 4], 1);
        for which in 0..7 {
            check_gradients(&[x.clone()], 1e-6, |vars| {
                let v = &vars[0];
                let y = match which {
                    0 => v.tanh(),
                    1 => v.sigmoid(),
                    2 => v.exp(),
                    3 => v.sqr(),
                    4 => v.leaky_relu(0.2),
                    5 => v.add_scalar(3.0).log_clamped(1e-7),
                    _ => v.scale(-2.5).add_scalar(1.0),
                };
                y.mul(&y).sum_all()
            })
            .assert_close(1e-6);
        }
    }

    #[test]
    fn binary_and_broadcast_ops_match_finite_differences() {
        let a = t(&[2, 3, 2, 2], 2);
        let b = t(&[2, 3, 2, 2], 3);
        let bias = t(&[3], 4);
        let mask = t(&[2, 1, 2, 2], 5).map(|v| 0.5 + 0.4 * v);
        check_gradients(&[a, b, bias, mask], 1e-6, |v| {
            let s = v[0].mul(&v[1]).sub(&v[1]).add(&v[0]).add_bias(&v[2]);
            Var::blend(&v[3], &s, &v[1]).sqr().mean_all()
        })
        .assert_close(1e-6);
    }

    #[test]
    fn shape_ops_match_finite_differences() {
        let a = t(&[2, 3, 4], 6);
        let b = t(&[2, 2, 4], 7);
        check_gradients(&[a, b], 1e-6, |v| {
            let c = Var::concat(&[&v[0], &v[1]], 1);
            let n = c.narrow(1, 1, 3).reshape(&[6, 4]);
            n.sqr().sum_all()
        })
        .assert_close(1e-6);
    }

    #[test]
    fn matmul_linear_softmax_match_finite_differences() {
        let x = t(&[3, 4], 8);
        let w = t(&[5, 4], 9);
        let bias = t(&[5], 10);
        let m = t(&[5, 2], 11);
        check_gradients(&[x, w, bias, m], 1e-6, |v| {
            let h = v[0].linear(&v[1], Some(&v[2])).softmax_last();
            h.matmul(&v[3]).sqr().sum_all()
        })
        .assert_close(1e-6);
    }

    #[test]
    fn untracked_inputs_record_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2, 2], 1));
        let l = tape.leaf(t(&[2, 2], 2));
        let y = c.mul(&l).sum_all();
        let g = tape.backward(&y);
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&l).unwrap(), t(&[2, 2], 1));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn([2, 2, 3], |i| 100.0 + i as f32));
        let c = Var::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 1).value(), a.value());
        assert_eq!(c.narrow(1, 1, 2).value(), b.value());
    }
}
