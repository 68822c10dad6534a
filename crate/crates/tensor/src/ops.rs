//! Differentiable ops. Shape violations are programming errors and panic with
//! the offending shapes; callers validate user-supplied shapes upstream.

use std::rc::Rc;

use crate::kernels::{self, ConvGeom, RoiBox, RoiPlan};
use crate::{Graph, Scalar, Tensor, Var};

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &str) {
    assert_eq!(g.shape(a), g.shape(b), "{op}: shape mismatch");
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("shape");
        self.push(v, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.clone())])
    }

    /// Sum of equally shaped inputs.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), v.shape(), "add_n: shape mismatch");
            v.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push(v, xs, move |_, _, g| (0..n).map(|_| Some(g.clone())).collect())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("shape");
        self.push(v, &[a, b], |inp, _, g| {
            vec![
                Some(g.zip_map(inp[1], |gv, y| gv * y).expect("shape")),
                Some(g.zip_map(inp[0], |gv, x| gv * x).expect("shape")),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], move |_, _, g| vec![Some(g.map(|x| x * s))])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(v, &[a], move |_, _, g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.note_relu(a);
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, &[a], |_, out, g| {
            vec![Some(
                g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() })
                    .expect("shape"),
            )]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, &[a], |_, out, g| {
            vec![Some(g.zip_map(out, |gv, y| gv * y * (T::one() - y)).expect("shape"))]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape");
        let orig = self.shape(a).to_vec();
        self.push(v, &[a], move |_, _, g| vec![Some(g.clone().reshape(&orig).expect("shape"))])
    }

    /// Concatenation along axis 1 of rank-4 tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let (n, _, h, w) = self.value(xs[0]).dims4().expect("concat expects rank 4");
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (nn, c, hh, ww) = self.value(x).dims4().expect("concat expects rank 4");
            assert_eq!((nn, hh, ww), (n, h, w), "concat_channels: incompatible shapes");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut out = vec![T::zero(); n * total * plane];
        for s in 0..n {
            let mut off = 0;
            for (&x, &c) in xs.iter().zip(&widths) {
                let src = &self.value(x).data()[s * c * plane..(s + 1) * c * plane];
                out[(s * total + off) * plane..(s * total + off + c) * plane].copy_from_slice(src);
                off += c;
            }
        }
        let v = Tensor::from_vec(&[n, total, h, w], out).expect("shape");
        self.push(v, xs, move |_, _, g| {
            let mut grads = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &c in &widths {
                let mut d = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    d[s * c * plane..(s + 1) * c * plane]
                        .copy_from_slice(&g.data()[(s * total + off) * plane..(s * total + off + c) * plane]);
                }
                grads.push(Some(Tensor::from_vec(&[n, c, h, w], d).expect("shape")));
                off += c;
            }
            grads
        })
    }

    /// 2-D convolution: `x [n, ci, h, w]`, `w [co, ci, k, k]`, optional `b [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4().expect("conv2d input rank 4");
        let (co, wci, k, k2) = self.value(w).dims4().expect("conv2d weight rank 4");
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co], "conv2d: bias shape");
        }
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let geom = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::from_vec(&[n, co, ho, wo], out).expect("shape");
        let x_needs = self.requires_grad(x);
        let wshape = self.shape(w).to_vec();
        let xshape = self.shape(x).to_vec();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(v, &parents, move |inp, _, g| {
            let (dx, dw, db) = kernels::conv2d_backward(&geom, inp[0].data(), inp[1].data(), g.data(), x_needs);
            let mut grads = vec![
                x_needs.then(|| Tensor::from_vec(&xshape, dx).expect("shape")),
                Some(Tensor::from_vec(&wshape, dw).expect("shape")),
            ];
            if inp.len() == 3 {
                grads.push(Some(Tensor::from_vec(&[geom.co], db).expect("shape")));
            }
            grads
        })
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact x2
    /// upsampling): `x [n, ci, h, w]`, `w [ci, co, 2, 2]`, `b [co]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4().expect("rank 4");
        let (wci, co, k1, k2) = self.value(w).dims4().expect("rank 4");
        assert_eq!((wci, k1, k2), (ci, 2, 2), "conv_transpose2x2: weight shape");
        assert_eq!(self.shape(b), &[co], "conv_transpose2x2: bias shape");
        let (oh, ow) = (2 * h, 2 * wd);
        let plane = h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * co * oh * ow];
        let mut tmp = vec![T::zero(); co * plane];
        for s in 0..n {
            let xs = &xv[s * ci * plane..(s + 1) * ci * plane];
            for a in 0..2 {
                for bb in 0..2 {
                    // tmp[co, p] = sum_ci w[ci, co, a, bb] * x[ci, p]
                    T::gemm(co, ci, plane, T::one(), &wv[a * 2 + bb..], 4, co * 4, xs, plane, 1, T::zero(), &mut tmp, plane, 1);
                    for c in 0..co {
                        for y in 0..h {
                            for xx in 0..wd {
                                out[((s * co + c) * oh + 2 * y + a) * ow + 2 * xx + bb] = tmp[c * plane + y * wd + xx] + bv[c];
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[n, co, oh, ow], out).expect("shape");
        let xshape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        self.push(v, &[x, w, b], move |inp, _, g| {
            let xv = inp[0].data();
            let wv = inp[1].data();
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            let mut db = vec![T::zero(); co];
            let mut gsub = vec![T::zero(); co * plane];
            for s in 0..n {
                let xs = &xv[s * ci * plane..(s + 1) * ci * plane];
                for a in 0..2 {
                    for bb in 0..2 {
                        for c in 0..co {
                            for y in 0..h {
                                for xx in 0..wd {
                                    let gv = g.data()[((s * co + c) * oh + 2 * y + a) * ow + 2 * xx + bb];
                                    gsub[c * plane + y * wd + xx] = gv;
                                    db[c] += gv;
                                }
                            }
                        }
                        // dw[ci, co, a, bb] += sum_p x[ci, p] * gsub[co, p]
                        T::gemm(ci, plane, co, T::one(), xs, plane, 1, &gsub, 1, plane, T::one(), &mut dw[a * 2 + bb..], co * 4, 4);
                        // dx[ci, p] += sum_co w[ci, co, a, bb] * gsub[co, p]
                        T::gemm(ci, co, plane, T::one(), &wv[a * 2 + bb..], co * 4, 4, &gsub, plane, 1, T::one(), &mut dx[s * ci * plane..(s + 1) * ci * plane], plane, 1);
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(&xshape, dx).expect("shape")),
                Some(Tensor::from_vec(&wshape, dw).expect("shape")),
                Some(Tensor::from_vec(&[co], db).expect("shape")),
            ]
        })
    }

    /// Affine map `x [n, d] -> [n, o]` with `w [o, d]`, `b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, d) = self.value(x).dims2().expect("linear input rank 2");
        let (o, wd) = self.value(w).dims2().expect("linear weight rank 2");
        assert_eq!(d, wd, "linear: input width {d}, weight expects {wd}");
        assert_eq!(self.shape(b), &[o], "linear: bias shape");
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(n, d, o, T::one(), self.value(x).data(), d, 1, self.value(w).data(), 1, d, T::one(), &mut out, o, 1);
        let v = Tensor::from_vec(&[n, o], out).expect("shape");
        let x_needs = self.requires_grad(x);
        self.push(v, &[x, w, b], move |inp, _, g| {
            let mut dw = vec![T::zero(); o * d];
            T::gemm(o, n, d, T::one(), g.data(), 1, o, inp[0].data(), d, 1, T::zero(), &mut dw, d, 1);
            let mut db = vec![T::zero(); o];
            for row in g.data().chunks(o) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let dx = x_needs.then(|| {
                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, o, d, T::one(), g.data(), o, 1, inp[1].data(), d, 1, T::zero(), &mut dx, d, 1);
                Tensor::from_vec(&[n, d], dx).expect("shape")
            });
            vec![
                dx,
                Some(Tensor::from_vec(&[o, d], dw).expect("shape")),
                Some(Tensor::from_vec(&[o], db).expect("shape")),
            ]
        })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4().expect("rank 4");
        if (h, w) == (oh, ow) {
            return x;
        }
        let v = kernels::resize_bilinear(self.value(x), oh, ow);
        self.push(v, &[x], move |_, _, g| vec![Some(kernels::resize_bilinear_backward(g, h, w))])
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let v = kernels::avg_pool(self.value(x), k);
        self.push(v, &[x], move |_, _, g| vec![Some(kernels::avg_pool_backward(g, k))])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        let (oh, ow) = (h * factor, w * factor);
        let idx: Vec<usize> = (0..n * c)
            .flat_map(|p| (0..oh * ow).map(move |o| p * h * w + (o / ow / factor) * w + (o % ow) / factor))
            .collect();
        self.gather(x, idx, &[n, c, oh, ow])
    }

    /// Keeps every `step`-th row and column, starting at 0.
    pub fn subsample(&mut self, x: Var, step: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        let (oh, ow) = (h.div_ceil(step), w.div_ceil(step));
        let idx: Vec<usize> = (0..n * c)
            .flat_map(|p| (0..oh * ow).map(move |o| p * h * w + (o / ow) * step * w + (o % ow) * step))
            .collect();
        self.gather(x, idx, &[n, c, oh, ow])
    }

    /// `out[i] = x.flat[indices[i]]`; the adjoint scatter-adds.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data: Vec<T> = indices.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_vec(shape, data).expect("gather shape");
        let xshape = self.shape(x).to_vec();
        let indices = Rc::new(indices);
        self.push(v, &[x], move |_, _, g| {
            let mut dx = Tensor::zeros(&xshape);
            let d = dx.data_mut();
            for (&i, &gv) in indices.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![Some(dx)]
        })
    }

    /// RoI-Align of `x [1, c, h, w]` at the given feature stride.
    pub fn roi_align(&mut self, x: Var, boxes: &[RoiBox], stride: f64, out: usize, sampling: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        assert_eq!(n, 1, "roi_align: single-image feature map expected");
        let plan = RoiPlan::new(boxes, h, w, stride, out, sampling);
        let v = plan.forward(self.value(x));
        self.push(v, &[x], move |_, _, g| vec![Some(plan.backward(g, c))])
    }

    /// Mean softmax cross-entropy over axis 1 of `[n, k, ...]` logits; one
    /// label per `(n, position)` in row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let shape = self.shape(logits).to_vec();
        let (n, k) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert_eq!(labels.len(), n * inner, "softmax_cross_entropy: label count");
        assert!(labels.iter().all(|&l| l < k), "softmax_cross_entropy: label out of range");
        let probs = kernels::softmax_axis1(self.value(logits));
        let count = T::lit((n * inner) as f64);
        let mut loss = T::zero();
        for s in 0..n {
            for p in 0..inner {
                let pr = probs.data()[(s * k + labels[s * inner + p]) * inner + p];
                loss -= pr.max(T::min_positive_value()).ln();
            }
        }
        let v = Tensor::scalar(loss / count);
        let labels = labels.to_vec();
        self.push(v, &[logits], move |_, _, g| {
            let scale = g.item() / count;
            let mut d = probs.clone();
            for s in 0..n {
                for p in 0..inner {
                    d.data_mut()[(s * k + labels[s * inner + p]) * inner + p] -= T::one();
                }
            }
            d.scale_inplace(scale);
            vec![Some(d)]
        })
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Var {
        assert_eq!(self.shape(logits), targets.shape(), "bce_with_logits: shape mismatch");
        let x = self.value(logits);
        let count = T::lit(x.numel() as f64);
        let loss: T = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let v = Tensor::scalar(loss / count);
        let targets = targets.clone();
        self.push(v, &[logits], move |inp, _, g| {
            let scale = g.item() / count;
            vec![Some(
                inp[0]
                    .zip_map(&targets, |z, t| (kernels::sigmoid(z) - t) * scale)
                    .expect("shape"),
            )]
        })
    }

    /// Summed smooth-L1 (Huber with transition `beta`) between `x` and `target`.
    pub fn smooth_l1(&mut self, x: Var, target: &Tensor<T>, beta: T) -> Var {
        assert_eq!(self.shape(x), target.shape(), "smooth_l1: shape mismatch");
        let half = T::lit(0.5);
        let loss: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let target = target.clone();
        self.push(Tensor::scalar(loss), &[x], move |inp, _, g| {
            let gv = g.item();
            vec![Some(
                inp[0]
                    .zip_map(&target, |a, b| {
                        let d = a - b;
                        let s = if d.abs() < beta { d / beta } else { d.signum() };
                        s * gv
                    })
                    .expect("shape"),
            )]
        })
    }
}
