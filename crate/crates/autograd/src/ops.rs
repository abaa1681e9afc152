//! Differentiable operations on [`Var`].

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::tape::Var;
use crate::{cast, Float, GATHER_ZERO};

/// Sums `g` down to `shape`, undoing row/column broadcasting.
fn sum_to<F: Float>(g: &Array2<F>, shape: (usize, usize)) -> Array2<F> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(out.dim(), shape);
    out
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn expand<F: Float>(x: &Array2<F>, shape: (usize, usize)) -> Array2<F> {
    x.broadcast(shape)
        .expect("broadcastable gradient")
        .to_owned()
}

impl<'t, F: Float> Var<'t, F> {
    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(
        self,
        value: Array2<F>,
        back: impl Fn(&Array2<F>) -> Array2<F> + 'static,
    ) -> Var<'t, F> {
        self.tape.push(
            value,
            vec![self.id],
            Box::new(move |g, _| vec![Some(back(g))]),
        )
    }

    /// Elementwise sum with row, column or scalar broadcasting on either side.
    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.dim(), b.dim());
        broadcast_shape(sa, sb);
        let value = &*a + &*b;
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| sum_to(g, sa)),
                    m[1].then(|| sum_to(g, sb)),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.dim(), b.dim());
        broadcast_shape(sa, sb);
        let value = &*a - &*b;
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| sum_to(g, sa)),
                    m[1].then(|| sum_to(&g.mapv(|x| -x), sb)),
                ]
            }),
        )
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.dim(), b.dim());
        broadcast_shape(sa, sb);
        let value = &*a * &*b;
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| sum_to(&(g * &*b), sa)),
                    m[1].then(|| sum_to(&(g * &*a), sb)),
                ]
            }),
        )
    }

    /// Elementwise quotient with broadcasting.
    pub fn div(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.dim(), b.dim());
        broadcast_shape(sa, sb);
        let value = &*a / &*b;
        let out = Rc::new(value.clone());
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| sum_to(&(g / &*b), sa)),
                    m[1].then(|| {
                        // d(a/b)/db = -(a/b)/b
                        let gb = -(g * &*out) / &*b;
                        sum_to(&gb, sb)
                    }),
                ]
            }),
        )
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let value = self.value().mapv(|x| x * c);
        self.unary(value, move |g| g.mapv(|x| x * c))
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        let value = self.value().mapv(|x| x + c);
        self.unary(value, |g| g.clone())
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions");
        let value = a.dot(&*b);
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![
                    m[0].then(|| g.dot(&b.t())),
                    m[1].then(|| a.t().dot(g)),
                ]
            }),
        )
    }

    /// Matrix product with the transpose of `other`: `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), b.ncols(), "matmul_t inner dimensions");
        let value = a.dot(&b.t());
        self.tape.push(
            value,
            vec![self.id, other.id],
            Box::new(move |g, m| {
                vec![m[0].then(|| g.dot(&*b)), m[1].then(|| g.t().dot(&*a))]
            }),
        )
    }

    pub fn t(self) -> Var<'t, F> {
        let value = self.value().t().as_standard_layout().into_owned();
        self.unary(value, |g| g.t().as_standard_layout().into_owned())
    }

    pub fn relu(self) -> Var<'t, F> {
        self.clamp_min(F::zero())
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: F) -> Var<'t, F> {
        let x = self.value();
        let value = x.mapv(|v| if v > floor { v } else { floor });
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&*x).for_each(|o, &v| {
                if v <= floor {
                    *o = F::zero();
                }
            });
            out
        })
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        let value = self.value().mapv(|v| F::one() / (F::one() + (-v).exp()));
        let y = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(&*y)
                .for_each(|o, &s| *o *= s * (F::one() - s));
            out
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t, F> {
        let x = self.value();
        let value = x.mapv(|v| v / (F::one() + (-v).exp()));
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&*x).for_each(|o, &v| {
                let s = F::one() / (F::one() + (-v).exp());
                *o *= s + v * s * (F::one() - s);
            });
            out
        })
    }

    pub fn tanh(self) -> Var<'t, F> {
        let value = self.value().mapv(|v| v.tanh());
        let y = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(&*y)
                .for_each(|o, &t| *o *= F::one() - t * t);
            out
        })
    }

    pub fn exp(self) -> Var<'t, F> {
        let value = self.value().mapv(|v| v.exp());
        let y = Rc::new(value.clone());
        self.unary(value, move |g| g * &*y)
    }

    pub fn ln(self) -> Var<'t, F> {
        let x = self.value();
        let value = x.mapv(|v| v.ln());
        self.unary(value, move |g| g / &*x)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        let value = self.value().mapv(|v| v.sqrt());
        let y = Rc::new(value.clone());
        let half: F = cast(0.5);
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&*y).for_each(|o, &r| *o *= half / r);
            out
        })
    }

    pub fn square(self) -> Var<'t, F> {
        let x = self.value();
        let value = x.mapv(|v| v * v);
        let two: F = cast(2.0);
        self.unary(value, move |g| {
            let mut out = g.clone();
            Zip::from(&mut out).and(&*x).for_each(|o, &v| *o *= two * v);
            out
        })
    }

    /// Sum of every entry, as `1 × 1`.
    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.dim();
        let value = Array2::from_elem((1, 1), x.sum());
        self.unary(value, move |g| Array2::from_elem(shape, g[[0, 0]]))
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum().scale(F::one() / cast(n as f64))
    }

    /// Column sums, `m × n → 1 × n`.
    pub fn sum_rows(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.dim();
        let value = x.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(value, move |g| expand(g, shape))
    }

    /// Row sums, `m × n → m × 1`.
    pub fn sum_cols(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.dim();
        let value = x.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(value, move |g| expand(g, shape))
    }

    /// Column means, `m × n → 1 × n`.
    pub fn mean_rows(self) -> Var<'t, F> {
        let m = self.value().nrows();
        self.sum_rows().scale(F::one() / cast(m as f64))
    }

    /// Row means, `m × n → m × 1`.
    pub fn mean_cols(self) -> Var<'t, F> {
        let n = self.value().ncols();
        self.sum_cols().scale(F::one() / cast(n as f64))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'t, F> {
        let x = self.value();
        let mut value = x.as_ref().clone();
        for mut row in value.rows_mut() {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let y = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = g * &*y;
            let dots = out.sum_axis(Axis(1));
            Zip::from(out.rows_mut())
                .and(y.rows())
                .and(&dots)
                .for_each(|mut o, yr, &d| {
                    Zip::from(&mut o).and(&yr).for_each(|o, &yv| *o -= yv * d);
                });
            out
        })
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn layer_norm_rows(self, eps: F) -> Var<'t, F> {
        let x = self.value();
        let (rows, cols) = x.dim();
        let n: F = cast(cols as f64);
        let mut value = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (xr, mut vr) in x.rows().into_iter().zip(value.rows_mut()) {
            let mean = xr.sum() / n;
            let var = xr.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = F::one() / (var + eps).sqrt();
            Zip::from(&mut vr).and(&xr).for_each(|o, &v| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = Rc::new(value.clone());
        self.unary(value, move |g| {
            let mut out = Array2::zeros(g.dim());
            for (r, mut orow) in out.rows_mut().into_iter().enumerate() {
                let gr = g.row(r);
                let yr = y.row(r);
                let mean_g = gr.sum() / n;
                let mean_gy = gr.dot(&yr) / n;
                let inv = inv_std[r];
                Zip::from(&mut orow)
                    .and(&gr)
                    .and(&yr)
                    .for_each(|o, &gv, &yv| *o = inv * (gv - mean_g - yv * mean_gy));
            }
            out
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        let shape = x.dim();
        assert!(start <= end && end <= shape.1, "column slice out of range");
        let value = x.slice(s![.., start..end]).to_owned();
        self.unary(value, move |g| {
            let mut out = Array2::zeros(shape);
            out.slice_mut(s![.., start..end]).assign(g);
            out
        })
    }

    /// Rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t, F> {
        let x = self.value();
        let shape = x.dim();
        assert!(start <= end && end <= shape.0, "row slice out of range");
        let value = x.slice(s![start..end, ..]).to_owned();
        self.unary(value, move |g| {
            let mut out = Array2::zeros(shape);
            out.slice_mut(s![start..end, ..]).assign(g);
            out
        })
    }

    /// Horizontal concatenation.
    pub fn concat_cols(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].nrows();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        let mut value = Array2::zeros((rows, widths.iter().sum()));
        let mut at = 0;
        for v in &values {
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        let ids = parts
            .iter()
            .map(|p| {
                assert!(std::ptr::eq(p.tape, tape), "concat across tapes");
                p.id
            })
            .collect();
        tape.push(
            value,
            ids,
            Box::new(move |g, m| {
                let mut at = 0;
                widths
                    .iter()
                    .zip(m)
                    .map(|(&w, &need)| {
                        let part = need.then(|| g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Vertical concatenation.
    pub fn concat_rows(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].ncols();
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        let mut value = Array2::zeros((heights.iter().sum(), cols));
        let mut at = 0;
        for v in &values {
            assert_eq!(v.ncols(), cols, "concat_rows column mismatch");
            value.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        let ids = parts
            .iter()
            .map(|p| {
                assert!(std::ptr::eq(p.tape, tape), "concat across tapes");
                p.id
            })
            .collect();
        tape.push(
            value,
            ids,
            Box::new(move |g, m| {
                let mut at = 0;
                heights
                    .iter()
                    .zip(m)
                    .map(|(&h, &need)| {
                        let part = need.then(|| g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                        part
                    })
                    .collect()
            }),
        )
    }

    /// Builds a `rows × cols` matrix whose entries are read from the
    /// row-major flattening of `self` at `index`; [`GATHER_ZERO`] yields 0.
    /// Repeated indices accumulate in the backward pass.
    pub fn gather(self, rows: usize, cols: usize, index: Rc<Vec<usize>>) -> Var<'t, F> {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let x = self.value();
        let shape = x.dim();
        let flat: Vec<F> = x.iter().copied().collect();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { F::zero() } else { flat[i] })
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        self.unary(value, move |g| {
            let mut acc = vec![F::zero(); shape.0 * shape.1];
            for (&i, &gv) in index.iter().zip(g.iter()) {
                if i != GATHER_ZERO {
                    acc[i] += gv;
                }
            }
            Array2::from_shape_vec(shape, acc).expect("gather grad shape")
        })
    }

    /// Depthwise 1-D convolution along rows (time) with "same" zero padding.
    ///
    /// `self` is `T × C`, `kernel` is `K × C` with odd `K`; output row `t`
    /// channel `c` is `Σ_k x[t + k - K/2, c] · kernel[k, c]`.
    pub fn depthwise_conv_rows(self, kernel: Var<'t, F>) -> Var<'t, F> {
        self.same_tape(&kernel);
        let (x, w) = (self.value(), kernel.value());
        let (t_len, ch) = x.dim();
        let k_len = w.nrows();
        assert_eq!(w.ncols(), ch, "depthwise kernel channels");
        assert!(k_len % 2 == 1, "depthwise kernel must be odd");
        let half = k_len / 2;
        let mut value = Array2::zeros((t_len, ch));
        for t in 0..t_len {
            let mut out = value.row_mut(t);
            for k in 0..k_len {
                let src = t as isize + k as isize - half as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xr = x.row(src as usize);
                let wr = w.row(k);
                Zip::from(&mut out)
                    .and(&xr)
                    .and(&wr)
                    .for_each(|o, &a, &b| *o += a * b);
            }
        }
        self.tape.push(
            value,
            vec![self.id, kernel.id],
            Box::new(move |g, m| {
                let mut gx = m[0].then(|| Array2::zeros((t_len, ch)));
                let mut gw = m[1].then(|| Array2::zeros((k_len, ch)));
                for t in 0..t_len {
                    let gr = g.row(t);
                    for k in 0..k_len {
                        let src = t as isize + k as isize - half as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        if let Some(gx) = gx.as_mut() {
                            let mut row = gx.row_mut(src);
                            Zip::from(&mut row)
                                .and(&gr)
                                .and(&w.row(k))
                                .for_each(|o, &a, &b| *o += a * b);
                        }
                        if let Some(gw) = gw.as_mut() {
                            let mut row = gw.row_mut(k);
                            Zip::from(&mut row)
                                .and(&gr)
                                .and(&x.row(src))
                                .for_each(|o, &a, &b| *o += a * b);
                        }
                    }
                }
                vec![gx, gw]
            }),
        )
    }

    /// Mean softmax cross-entropy of row logits against class indices, `1 × 1`.
    pub fn cross_entropy(self, labels: Rc<Vec<usize>>) -> Var<'t, F> {
        let x = self.value();
        let (rows, cols) = x.dim();
        assert_eq!(labels.len(), rows, "one label per row");
        let mut probs = Array2::zeros((rows, cols));
        let mut total = F::zero();
        for (r, (xr, mut pr)) in x.rows().into_iter().zip(probs.rows_mut()).enumerate() {
            let y = labels[r];
            assert!(y < cols, "label out of range");
            let max = xr.fold(F::neg_infinity(), |m, &v| m.max(v));
            Zip::from(&mut pr).and(&xr).for_each(|p, &v| *p = (v - max).exp());
            let z = pr.sum();
            pr.mapv_inplace(|p| p / z);
            total += z.ln() + max - xr[y];
        }
        let n: F = cast(rows as f64);
        let value = Array2::from_elem((1, 1), total / n);
        self.unary(value, move |g| {
            let mut out = probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                out[[r, y]] -= F::one();
            }
            let scale = g[[0, 0]] / n;
            out.mapv_inplace(|v| v * scale);
            out
        })
    }
}
