//! Forward operators and their vector-Jacobian products.
//!
//! Shape preconditions are checked up front and reported with both shapes in
//! the diagnostic. Every differentiable op here is covered by the finite
//! difference suite in `tests/gradients.rs`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geom::BitMask2D;
use crate::nn::graph::{BackwardFn, GradStore, Tensor};
use crate::nn::{fmt_shape, Scalar};

fn add_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    for (b, gv) in buf.iter_mut().zip(g) {
        *b += *gv;
    }
}

impl<'g, S: Scalar> Tensor<'g, S> {
    fn check_same_shape(&self, other: &Tensor<'g, S>, op: &'static str) -> Result<()> {
        assert!(self.same_graph(other), "{op}: tensors from different graphs");
        if self.shape != other.shape {
            return Err(Error::shape(op, fmt_shape(&self.shape), fmt_shape(&other.shape)));
        }
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor<'g, S>) -> Result<Tensor<'g, S>> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a + *b)
            .collect();
        let (pa, pb) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if na {
                store.accumulate(pa, len, |buf| add_into(buf, g));
            }
            if nb {
                store.accumulate(pb, len, |buf| add_into(buf, g));
            }
        });
        Ok(self.op_result(self.shape.clone(), data, na || nb, Some(backward)))
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Tensor<'g, S>) -> Result<Tensor<'g, S>> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a - *b)
            .collect();
        let (pa, pb) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if na {
                store.accumulate(pa, len, |buf| add_into(buf, g));
            }
            if nb {
                store.accumulate(pb, len, |buf| {
                    for (b, gv) in buf.iter_mut().zip(g) {
                        *b -= *gv;
                    }
                });
            }
        });
        Ok(self.op_result(self.shape.clone(), data, na || nb, Some(backward)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<'g, S>) -> Result<Tensor<'g, S>> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| *a * *b)
            .collect();
        let (pa, pb) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let (da, db) = (Rc::clone(&self.data), Rc::clone(&other.data));
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if na {
                store.accumulate(pa, len, |buf| {
                    for i in 0..len {
                        buf[i] += g[i] * db[i];
                    }
                });
            }
            if nb {
                store.accumulate(pb, len, |buf| {
                    for i in 0..len {
                        buf[i] += g[i] * da[i];
                    }
                });
            }
        });
        Ok(self.op_result(self.shape.clone(), data, na || nb, Some(backward)))
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor<'g, S> {
        let cs = S::from_f64(c);
        let data = self.data.iter().map(|v| *v * cs).collect();
        let pid = self.id;
        let needs = self.needs_grad();
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for i in 0..len {
                    buf[i] += g[i] * cs;
                }
            });
        });
        self.op_result(self.shape.clone(), data, needs, Some(backward))
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<'g, S> {
        let data: Vec<S> = self
            .data
            .iter()
            .map(|v| if *v > S::zero() { *v } else { S::zero() })
            .collect();
        let pid = self.id;
        let needs = self.needs_grad();
        let input = Rc::clone(&self.data);
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for i in 0..len {
                    if input[i] > S::zero() {
                        buf[i] += g[i];
                    }
                }
            });
        });
        self.op_result(self.shape.clone(), data, needs, Some(backward))
    }

    /// Logistic function, numerically stable in both tails.
    pub fn sigmoid(&self) -> Tensor<'g, S> {
        let data: Vec<S> = self.data.iter().map(|v| stable_sigmoid(*v)).collect();
        let pid = self.id;
        let needs = self.needs_grad();
        let out = Rc::new(data.clone());
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for i in 0..len {
                    let y = out[i];
                    buf[i] += g[i] * y * (S::one() - y);
                }
            });
        });
        self.op_result(self.shape.clone(), data, needs, Some(backward))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<'g, S> {
        let total = self.data.iter().fold(S::zero(), |acc, v| acc + *v);
        let pid = self.id;
        let needs = self.needs_grad();
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            let g0 = g[0];
            store.accumulate(pid, len, |buf| {
                for b in buf.iter_mut() {
                    *b += g0;
                }
            });
        });
        self.op_result(vec![1], vec![total], needs, Some(backward))
    }

    /// Concatenate two tensors along `axis`; all other dims must agree.
    pub fn concat_axis(&self, other: &Tensor<'g, S>, axis: usize) -> Result<Tensor<'g, S>> {
        assert!(self.same_graph(other), "concat_axis: different graphs");
        if axis >= self.shape.len()
            || self.shape.len() != other.shape.len()
            || self
                .shape
                .iter()
                .zip(&other.shape)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape(
                "concat_axis",
                fmt_shape(&self.shape),
                fmt_shape(&other.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let (da, db) = (self.shape[axis], other.shape[axis]);
        let (block_a, block_b) = (da * inner, db * inner);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * block_a..(o + 1) * block_a]);
            data.extend_from_slice(&other.data[o * block_b..(o + 1) * block_b]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = da + db;
        let (pa, pb) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let (la, lb) = (self.data.len(), other.data.len());
        let block_out = block_a + block_b;
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if na {
                store.accumulate(pa, la, |buf| {
                    for o in 0..outer {
                        add_into(
                            &mut buf[o * block_a..(o + 1) * block_a],
                            &g[o * block_out..o * block_out + block_a],
                        );
                    }
                });
            }
            if nb {
                store.accumulate(pb, lb, |buf| {
                    for o in 0..outer {
                        add_into(
                            &mut buf[o * block_b..(o + 1) * block_b],
                            &g[o * block_out + block_a..(o + 1) * block_out],
                        );
                    }
                });
            }
        });
        Ok(self.op_result(shape, data, na || nb, Some(backward)))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'g, S>> {
        if axis >= self.shape.len() || start + len > self.shape[axis] || len == 0 {
            return Err(Error::op(
                "slice_axis",
                format!(
                    "range {start}..{} out of bounds for axis {axis} of {}",
                    start + len,
                    fmt_shape(&self.shape)
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let pid = self.id;
        let needs = self.needs_grad();
        let full_len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, full_len, |buf| {
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * d + start) * inner;
                    add_into(&mut buf[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            });
        });
        Ok(self.op_result(shape, data, needs, Some(backward)))
    }

    /// Exp-normalize along `axis` with max subtraction; slices sum to 1.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<'g, S>> {
        if axis >= self.shape.len() {
            return Err(Error::op(
                "softmax_axis",
                format!("axis {axis} out of range for {}", fmt_shape(&self.shape)),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut data = vec![S::zero(); self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| (o * d + r) * inner + i;
                let mut m = self.data[at(0)];
                for r in 1..d {
                    m = m.max(self.data[at(r)]);
                }
                let mut sum = S::zero();
                for r in 0..d {
                    let e = (self.data[at(r)] - m).exp();
                    data[at(r)] = e;
                    sum += e;
                }
                for r in 0..d {
                    data[at(r)] = data[at(r)] / sum;
                }
            }
        }
        let pid = self.id;
        let needs = self.needs_grad();
        let out = Rc::new(data.clone());
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |r: usize| (o * d + r) * inner + i;
                        let mut dot = S::zero();
                        for r in 0..d {
                            dot += g[at(r)] * out[at(r)];
                        }
                        for r in 0..d {
                            buf[at(r)] += out[at(r)] * (g[at(r)] - dot);
                        }
                    }
                }
            });
        });
        Ok(self.op_result(self.shape.clone(), data, needs, Some(backward)))
    }

    /// Maximum over the trailing `k` axes. On exact ties the gradient routes
    /// to the first maximal element.
    pub fn max_last_axes(&self, k: usize) -> Result<Tensor<'g, S>> {
        if k == 0 || k > self.shape.len() {
            return Err(Error::op(
                "max_last_axes",
                format!("cannot reduce {k} axes of {}", fmt_shape(&self.shape)),
            ));
        }
        let keep = self.shape.len() - k;
        let rows: usize = self.shape[..keep].iter().product();
        let r: usize = self.shape[keep..].iter().product();
        let mut data = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for row in 0..rows {
            let s = &self.data[row * r..(row + 1) * r];
            let mut best = 0usize;
            for (i, v) in s.iter().enumerate() {
                if *v > s[best] {
                    best = i;
                }
            }
            data.push(s[best]);
            argmax.push(row * r + best);
        }
        let shape: Vec<usize> = if keep == 0 {
            vec![1]
        } else {
            self.shape[..keep].to_vec()
        };
        let pid = self.id;
        let needs = self.needs_grad();
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            store.accumulate(pid, len, |buf| {
                for (row, &flat) in argmax.iter().enumerate() {
                    buf[flat] += g[row];
                }
            });
        });
        Ok(self.op_result(shape, data, needs, Some(backward)))
    }

    /// Multiply a `[H, W, ...]` tensor by a `[H, W]` field, broadcasting the
    /// field over all trailing axes.
    pub fn spatial_mul(&self, field: &Tensor<'g, S>) -> Result<Tensor<'g, S>> {
        assert!(self.same_graph(field), "spatial_mul: different graphs");
        if self.shape.len() < 2 || field.shape != self.shape[..2] {
            return Err(Error::shape(
                "spatial_mul",
                format!("{} leading dims", fmt_shape(&field.shape)),
                fmt_shape(&self.shape),
            ));
        }
        let hw = field.data.len();
        let block = self.data.len() / hw;
        let mut data = Vec::with_capacity(self.data.len());
        for p in 0..hw {
            let s = field.data[p];
            for t in 0..block {
                data.push(self.data[p * block + t] * s);
            }
        }
        let (px, pf) = (self.id, field.id);
        let (nx, nf) = (self.needs_grad(), field.needs_grad());
        let (dx, df) = (Rc::clone(&self.data), Rc::clone(&field.data));
        let (lx, lf) = (self.data.len(), field.data.len());
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if nx {
                store.accumulate(px, lx, |buf| {
                    for p in 0..hw {
                        let s = df[p];
                        for t in 0..block {
                            buf[p * block + t] += g[p * block + t] * s;
                        }
                    }
                });
            }
            if nf {
                store.accumulate(pf, lf, |buf| {
                    for p in 0..hw {
                        let mut acc = S::zero();
                        for t in 0..block {
                            acc += g[p * block + t] * dx[p * block + t];
                        }
                        buf[p] += acc;
                    }
                });
            }
        });
        Ok(self.op_result(self.shape.clone(), data, nx || nf, Some(backward)))
    }

    /// 2D cross-correlation with zero "same" padding.
    ///
    /// `self` is `[H, W, C_in]`, `kernel` is `[k, k, C_in, C_out]` with odd
    /// `k`, `bias` is `[C_out]`, `stride` is 1 or 2. Output spatial dims are
    /// `ceil(H / stride) x ceil(W / stride)`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<'g, S>,
        bias: &Tensor<'g, S>,
        stride: usize,
    ) -> Result<Tensor<'g, S>> {
        assert!(
            self.same_graph(kernel) && self.same_graph(bias),
            "conv2d: different graphs"
        );
        if self.shape.len() != 3 {
            return Err(Error::shape("conv2d", "[HxWxC]", fmt_shape(&self.shape)));
        }
        let (h, w, cin) = (self.shape[0], self.shape[1], self.shape[2]);
        if kernel.shape.len() != 4
            || kernel.shape[0] != kernel.shape[1]
            || kernel.shape[0] % 2 == 0
            || kernel.shape[2] != cin
        {
            return Err(Error::shape(
                "conv2d",
                format!("[kxkx{cin}xC_out] with odd k"),
                fmt_shape(&kernel.shape),
            ));
        }
        let k = kernel.shape[0];
        let cout = kernel.shape[3];
        if bias.shape != [cout] {
            return Err(Error::shape("conv2d", format!("[{cout}]"), fmt_shape(&bias.shape)));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::op("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad = k / 2;

        let data = conv_forward(
            &self.data,
            h,
            w,
            cin,
            &kernel.data,
            k,
            cout,
            &bias.data,
            stride,
        );

        let (pi, pk, pb) = (self.id, kernel.id, bias.id);
        let (ni, nk, nb) = (self.needs_grad(), kernel.needs_grad(), bias.needs_grad());
        let (din, dk) = (Rc::clone(&self.data), Rc::clone(&kernel.data));
        let (li, lk, lb) = (self.data.len(), kernel.data.len(), bias.data.len());
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if ni {
                store.accumulate(pi, li, |buf| {
                    conv_grad_input(buf, g, h, w, cin, &dk, k, cout, stride, ho, wo, pad);
                });
            }
            if nk {
                store.accumulate(pk, lk, |buf| {
                    conv_grad_kernel(buf, g, &din, h, w, cin, k, cout, stride, ho, wo, pad);
                });
            }
            if nb {
                store.accumulate(pb, lb, |buf| {
                    for cell in g.chunks_exact(cout) {
                        add_into(buf, cell);
                    }
                });
            }
        });
        Ok(self.op_result(
            vec![ho, wo, cout],
            data,
            ni || nk || nb,
            Some(backward),
        ))
    }

    /// Sample `self` (`[H, W, C]`) at `(p + offsets(p))` with bilinear
    /// interpolation; `offsets` is `[H, W, 2]` in cell units. Coordinates
    /// outside the grid clamp to the border. Differentiable in both the
    /// feature values and the offsets.
    pub fn bilinear_sample(&self, offsets: &Tensor<'g, S>) -> Result<Tensor<'g, S>> {
        assert!(self.same_graph(offsets), "bilinear_sample: different graphs");
        if self.shape.len() != 3 {
            return Err(Error::shape("bilinear_sample", "[HxWxC]", fmt_shape(&self.shape)));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if offsets.shape != [h, w, 2] {
            return Err(Error::shape(
                "bilinear_sample",
                format!("[{h}x{w}x2]"),
                fmt_shape(&offsets.shape),
            ));
        }
        let feat = Rc::clone(&self.data);
        let offs = Rc::clone(&offsets.data);
        let mut data = vec![S::zero(); h * w * c];
        let mut taps: Vec<Tap> = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let p = (i * w + j) * 2;
                let tap = resolve_tap(
                    offs[p].as_f64() + i as f64,
                    offs[p + 1].as_f64() + j as f64,
                    h,
                    w,
                );
                let out_base = (i * w + j) * c;
                let (w00, w01, w10, w11) = tap.weights::<S>();
                let (b00, b01, b10, b11) = tap.bases(w, c);
                for ch in 0..c {
                    data[out_base + ch] = w00 * feat[b00 + ch]
                        + w01 * feat[b01 + ch]
                        + w10 * feat[b10 + ch]
                        + w11 * feat[b11 + ch];
                }
                taps.push(tap);
            }
        }
        let (pf, po) = (self.id, offsets.id);
        let (nf, no) = (self.needs_grad(), offsets.needs_grad());
        let (lf, lo) = (self.data.len(), offsets.data.len());
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            if nf {
                store.accumulate(pf, lf, |buf| {
                    for (cell, tap) in taps.iter().enumerate() {
                        let out_base = cell * c;
                        let (w00, w01, w10, w11) = tap.weights::<S>();
                        let (b00, b01, b10, b11) = tap.bases(w, c);
                        for ch in 0..c {
                            let gv = g[out_base + ch];
                            buf[b00 + ch] += w00 * gv;
                            buf[b01 + ch] += w01 * gv;
                            buf[b10 + ch] += w10 * gv;
                            buf[b11 + ch] += w11 * gv;
                        }
                    }
                });
            }
            if no {
                store.accumulate(po, lo, |buf| {
                    for (cell, tap) in taps.iter().enumerate() {
                        let out_base = cell * c;
                        let (b00, b01, b10, b11) = tap.bases(w, c);
                        let fx = S::from_f64(tap.fx);
                        let fy = S::from_f64(tap.fy);
                        let one = S::one();
                        let mut gx = S::zero();
                        let mut gy = S::zero();
                        for ch in 0..c {
                            let gv = g[out_base + ch];
                            // d/dx: difference along rows, blended over columns
                            gx += gv
                                * ((feat[b10 + ch] - feat[b00 + ch]) * (one - fy)
                                    + (feat[b11 + ch] - feat[b01 + ch]) * fy);
                            gy += gv
                                * ((feat[b01 + ch] - feat[b00 + ch]) * (one - fx)
                                    + (feat[b11 + ch] - feat[b10 + ch]) * fx);
                        }
                        if tap.x_active {
                            buf[cell * 2] += gx;
                        }
                        if tap.y_active {
                            buf[cell * 2 + 1] += gy;
                        }
                    }
                });
            }
        });
        Ok(self.op_result(self.shape.clone(), data, nf || no, Some(backward)))
    }

    /// Mean-over-grid masked L1: `(1 / (H W)) * sum_{i,j,c} |a - b| * m(i, j)`
    /// with the mask broadcast over channels. The normalizer is the full cell
    /// count regardless of how many mask bits are set.
    pub fn masked_l1(&self, other: &Tensor<'g, S>, mask: &BitMask2D) -> Result<Tensor<'g, S>> {
        self.check_same_shape(other, "masked_l1")?;
        if self.shape.len() != 3
            || self.shape[0] != mask.height
            || self.shape[1] != mask.width
        {
            return Err(Error::shape(
                "masked_l1",
                format!("[{}x{}xC]", mask.height, mask.width),
                fmt_shape(&self.shape),
            ));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let norm = S::from_f64(1.0 / (h as f64 * w as f64));
        let mask_bits: Rc<Vec<bool>> = Rc::new(
            (0..h * w)
                .map(|p| mask.get(p / w, p % w))
                .collect(),
        );
        let mut total = S::zero();
        for p in 0..h * w {
            if !mask_bits[p] {
                continue;
            }
            for ch in 0..c {
                total += (self.data[p * c + ch] - other.data[p * c + ch]).abs();
            }
        }
        total *= norm;
        let (pa, pb) = (self.id, other.id);
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let (da, db) = (Rc::clone(&self.data), Rc::clone(&other.data));
        let len = self.data.len();
        let bits = Rc::clone(&mask_bits);
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            let g0 = g[0] * norm;
            let scatter = |id: usize, flip: bool, store: &mut GradStore<S>| {
                store.accumulate(id, len, |buf| {
                    for p in 0..h * w {
                        if !bits[p] {
                            continue;
                        }
                        for ch in 0..c {
                            let idx = p * c + ch;
                            let d = da[idx] - db[idx];
                            let s = if d > S::zero() {
                                S::one()
                            } else if d < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            };
                            buf[idx] += if flip { -(g0 * s) } else { g0 * s };
                        }
                    }
                });
            };
            if na {
                scatter(pa, false, store);
            }
            if nb {
                scatter(pb, true, store);
            }
        });
        Ok(self.op_result(vec![1], vec![total], na || nb, Some(backward)))
    }

    /// Focal binary cross-entropy on logits against a constant 0/1 target
    /// field, summed and scaled by `inv_norm`. Stable at saturated logits.
    pub fn sigmoid_focal(
        &self,
        targets: &[f64],
        alpha: f64,
        gamma: f64,
        inv_norm: f64,
    ) -> Result<Tensor<'g, S>> {
        if targets.len() != self.data.len() {
            return Err(Error::shape(
                "sigmoid_focal",
                self.data.len(),
                targets.len(),
            ));
        }
        let a = S::from_f64(alpha);
        let ga = S::from_f64(gamma);
        let scale = S::from_f64(inv_norm);
        let t: Rc<Vec<bool>> = Rc::new(targets.iter().map(|v| *v > 0.5).collect());
        let mut total = S::zero();
        for (i, x) in self.data.iter().enumerate() {
            let p = stable_sigmoid(*x);
            if t[i] {
                // -alpha (1-p)^gamma ln p
                total += a * (S::one() - p).powf(ga) * softplus(-*x);
            } else {
                total += (S::one() - a) * p.powf(ga) * softplus(*x);
            }
        }
        total *= scale;
        let pid = self.id;
        let needs = self.needs_grad();
        let input = Rc::clone(&self.data);
        let len = self.data.len();
        let backward: BackwardFn<S> = Box::new(move |g, store| {
            let g0 = g[0] * scale;
            store.accumulate(pid, len, |buf| {
                for i in 0..len {
                    let x = input[i];
                    let p = stable_sigmoid(x);
                    let d = if t[i] {
                        // alpha (1-p)^gamma (gamma p ln p - (1 - p))
                        a * (S::one() - p).powf(ga)
                            * (-(ga * p * softplus(-x)) - (S::one() - p))
                    } else {
                        (S::one() - a) * p.powf(ga) * (p + ga * (S::one() - p) * softplus(x))
                    };
                    buf[i] += g0 * d;
                }
            });
        });
        Ok(self.op_result(vec![1], vec![total], needs, Some(backward)))
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// One bilinear tap: resolved corner indices and interpolation fractions.
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// False when the x coordinate clamped to the border (zero gradient).
    x_active: bool,
    y_active: bool,
}

impl Tap {
    fn weights<S: Scalar>(&self) -> (S, S, S, S) {
        let fx = S::from_f64(self.fx);
        let fy = S::from_f64(self.fy);
        let one = S::one();
        (
            (one - fx) * (one - fy),
            (one - fx) * fy,
            fx * (one - fy),
            fx * fy,
        )
    }

    /// Flat base offsets of the four corners (00, 01, 10, 11) in a row-major
    /// `[H, W, C]` buffer.
    fn bases(&self, w: usize, c: usize) -> (usize, usize, usize, usize) {
        (
            (self.x0 * w + self.y0) * c,
            (self.x0 * w + self.y1) * c,
            (self.x1 * w + self.y0) * c,
            (self.x1 * w + self.y1) * c,
        )
    }
}

fn resolve_tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let xm = (h - 1) as f64;
    let ym = (w - 1) as f64;
    let x_active = x > 0.0 && x < xm;
    let y_active = y > 0.0 && y < ym;
    let xc = x.clamp(0.0, xm);
    let yc = y.clamp(0.0, ym);
    let x0 = xc.floor();
    let y0 = yc.floor();
    let x1 = (x0 + 1.0).min(xm);
    let y1 = (y0 + 1.0).min(ym);
    Tap {
        x0: x0 as usize,
        x1: x1 as usize,
        y0: y0 as usize,
        y1: y1 as usize,
        fx: xc - x0,
        fy: yc - y0,
        x_active,
        y_active,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    input: &[S],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[S],
    k: usize,
    cout: usize,
    bias: &[S],
    stride: usize,
) -> Vec<S> {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let pad = (k / 2) as isize;
    let mut out = vec![S::zero(); ho * wo * cout];
    for cell in out.chunks_exact_mut(cout) {
        cell.copy_from_slice(bias);
    }
    for oy in 0..ho {
        let iy0 = (oy * stride) as isize - pad;
        for ky in 0..k {
            let iy = iy0 + ky as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad;
                let out_base = (oy * wo + ox) * cout;
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy * w + ix as usize) * cin;
                    let k_base = ((ky * k + kx) * cin) * cout;
                    for ci in 0..cin {
                        let iv = input[in_base + ci];
                        let krow = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let orow = &mut out[out_base..out_base + cout];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += iv * *kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_input<S: Scalar>(
    dinput: &mut [S],
    g: &[S],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[S],
    k: usize,
    cout: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pad: usize,
) {
    let pad = pad as isize;
    for oy in 0..ho {
        let iy0 = (oy * stride) as isize - pad;
        for ky in 0..k {
            let iy = iy0 + ky as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad;
                let g_base = (oy * wo + ox) * cout;
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy * w + ix as usize) * cin;
                    let k_base = ((ky * k + kx) * cin) * cout;
                    let grow = &g[g_base..g_base + cout];
                    for ci in 0..cin {
                        let krow = &kernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        let mut acc = S::zero();
                        for (gv, kv) in grow.iter().zip(krow) {
                            acc += *gv * *kv;
                        }
                        dinput[in_base + ci] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_grad_kernel<S: Scalar>(
    dkernel: &mut [S],
    g: &[S],
    input: &[S],
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pad: usize,
) {
    let pad = pad as isize;
    for oy in 0..ho {
        let iy0 = (oy * stride) as isize - pad;
        for ky in 0..k {
            let iy = iy0 + ky as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..wo {
                let ix0 = (ox * stride) as isize - pad;
                let g_base = (oy * wo + ox) * cout;
                for kx in 0..k {
                    let ix = ix0 + kx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = (iy * w + ix as usize) * cin;
                    let k_base = ((ky * k + kx) * cin) * cout;
                    let grow = &g[g_base..g_base + cout];
                    for ci in 0..cin {
                        let iv = input[in_base + ci];
                        let krow = &mut dkernel[k_base + ci * cout..k_base + (ci + 1) * cout];
                        for (kv, gv) in krow.iter_mut().zip(grow) {
                            *kv += iv * *gv;
                        }
                    }
                }
            }
        }
    }
}
