//! Reverse-mode differentiation tape.
//!
//! Operations are recorded eagerly; `backward` replays them in reverse,
//! accumulating gradients. The op set is exactly what the fusion pipeline
//! needs; it is not a general autodiff framework.

use crate::error::{DynafuseError, Result};
use crate::tensor::{bilinear_scatter, bilinear_with_derivs, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MaxAll(usize),
    MulConst(usize, Tensor),
    DivByScalarNode(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    Concat2(usize, usize),
    Gap(usize),
    MatVec {
        w: usize,
        x: usize,
    },
    SoftmaxVec(usize),
    MulSpatial {
        grid: usize,
        map: usize,
    },
    MulChannel {
        grid: usize,
        weights: usize,
    },
    GatherCell {
        grid: usize,
        row: usize,
        col: usize,
    },
    BilinearSample {
        grid: usize,
        x: usize,
        y: usize,
    },
    DeformAttn {
        query: usize,
        value: usize,
        w_off: usize,
        b_off: usize,
        w_attn: usize,
        b_attn: usize,
        w_val: usize,
        w_out: usize,
        heads: usize,
        points: usize,
    },
    LocalAttn {
        query: usize,
        value: usize,
        b_attn: usize,
        w_val: usize,
        w_out: usize,
    },
    GlobalAttn {
        query: usize,
        value: usize,
        w_attn: usize,
        w_val: usize,
        w_out: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zero tensor if the node is
    /// unreachable from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&tape.nodes[v.0].value.shape),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape, vb.shape, "elementwise op shape mismatch");
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.nodes[a.0].value.map(f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0]
            .value
            .data
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        self.push(Tensor::scalar(m), Op::MaxAll(a.0))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape, c.shape);
        let data = va
            .data
            .iter()
            .zip(c.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, Op::MulConst(a.0, c.clone()))
    }

    /// Elementwise division of `a` by the scalar-valued node `s`.
    pub fn div_by_scalar_node(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let t = self.nodes[a.0].value.map(|x| x / sv);
        self.push(t, Op::DivByScalarNode(a.0, s.0))
    }

    /// Same-padded stride-1 convolution; input [C,H,W], kernel [O,C,kh,kw]
    /// (kh, kw odd), bias [O].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let out = conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
        )
    }

    /// Channel-axis concatenation of two [C,H,W] tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.shape[1..], vb.shape[1..]);
        let shape = vec![va.shape[0] + vb.shape[0], va.shape[1], va.shape[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        self.push(Tensor { shape, data }, Op::Concat2(a.0, b.0))
    }

    /// Global average pool [C,H,W] -> [C].
    pub fn gap(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let n = (h * w) as f64;
        let mut out = vec![0.0; c];
        for ci in 0..c {
            out[ci] = v.data[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / n;
        }
        self.push(Tensor::from_vec(&[c], out).unwrap(), Op::Gap(a.0))
    }

    /// Matrix-vector product; w [O,I], x [I] -> [O].
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let (o, i) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.numel(), i);
        let mut out = vec![0.0; o];
        for oi in 0..o {
            out[oi] = (0..i).map(|ii| wv.data[oi * i + ii] * xv.data[ii]).sum();
        }
        self.push(Tensor::from_vec(&[o], out).unwrap(), Op::MatVec { w: w.0, x: x.0 })
    }

    pub fn softmax_vec(&mut self, a: Var) -> Var {
        let t = softmax(&self.nodes[a.0].value.data);
        let shape = self.nodes[a.0].value.shape.clone();
        self.push(Tensor { shape, data: t }, Op::SoftmaxVec(a.0))
    }

    /// Broadcast-multiply a [C,H,W] grid by a spatial map with H*W entries.
    pub fn mul_spatial(&mut self, grid: Var, map: Var) -> Var {
        let g = &self.nodes[grid.0].value;
        let m = &self.nodes[map.0].value;
        let (c, h, w) = (g.shape[0], g.shape[1], g.shape[2]);
        assert_eq!(m.numel(), h * w);
        let mut out = g.clone();
        for ci in 0..c {
            for p in 0..h * w {
                out.data[ci * h * w + p] *= m.data[p];
            }
        }
        self.push(
            out,
            Op::MulSpatial {
                grid: grid.0,
                map: map.0,
            },
        )
    }

    /// Multiply each channel of a [C,H,W] grid by a per-channel weight [C].
    pub fn mul_channel(&mut self, grid: Var, weights: Var) -> Var {
        let g = &self.nodes[grid.0].value;
        let wv = &self.nodes[weights.0].value;
        let (c, h, w) = (g.shape[0], g.shape[1], g.shape[2]);
        assert_eq!(wv.numel(), c);
        let mut out = g.clone();
        for ci in 0..c {
            for p in 0..h * w {
                out.data[ci * h * w + p] *= wv.data[ci];
            }
        }
        self.push(
            out,
            Op::MulChannel {
                grid: grid.0,
                weights: weights.0,
            },
        )
    }

    /// Extract the channel vector at cell (row, col) of a [C,H,W] grid.
    pub fn gather_cell(&mut self, grid: Var, row: usize, col: usize) -> Var {
        let g = &self.nodes[grid.0].value;
        let c = g.shape[0];
        let out: Vec<f64> = (0..c).map(|ci| g.at3(ci, row, col)).collect();
        self.push(
            Tensor::from_vec(&[c], out).unwrap(),
            Op::GatherCell {
                grid: grid.0,
                row,
                col,
            },
        )
    }

    /// Bilinear sample of a [C,H,W] grid at scalar-node coordinates;
    /// differentiable in the grid and in both coordinates.
    pub fn bilinear_sample(&mut self, grid: Var, x: Var, y: Var) -> Var {
        let g = &self.nodes[grid.0].value;
        let xv = self.nodes[x.0].value.item();
        let yv = self.nodes[y.0].value.item();
        let (out, _, _) = bilinear_with_derivs(g, xv, yv);
        let c = g.shape[0];
        self.push(
            Tensor::from_vec(&[c], out).unwrap(),
            Op::BilinearSample {
                grid: grid.0,
                x: x.0,
                y: y.0,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform_attn(
        &mut self,
        query: Var,
        value: Var,
        w_off: Var,
        b_off: Var,
        w_attn: Var,
        b_attn: Var,
        w_val: Var,
        w_out: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        if heads == 0 || points == 0 {
            return Err(DynafuseError::invalid("deformable attention needs M >= 1 and K >= 1"));
        }
        let out = deform_attn_forward(
            &self.nodes[query.0].value,
            &self.nodes[value.0].value,
            &self.nodes[w_off.0].value,
            &self.nodes[b_off.0].value,
            &self.nodes[w_attn.0].value,
            &self.nodes[b_attn.0].value,
            &self.nodes[w_val.0].value,
            &self.nodes[w_out.0].value,
            heads,
            points,
        );
        Ok(self.push(
            out,
            Op::DeformAttn {
                query: query.0,
                value: value.0,
                w_off: w_off.0,
                b_off: b_off.0,
                w_attn: w_attn.0,
                b_attn: b_attn.0,
                w_val: w_val.0,
                w_out: w_out.0,
                heads,
                points,
            },
        ))
    }

    /// Fixed 3x3-neighborhood attention with learnable per-point logits.
    pub fn local_attn(&mut self, query: Var, value: Var, b_attn: Var, w_val: Var, w_out: Var) -> Var {
        let out = local_attn_forward(
            &self.nodes[query.0].value,
            &self.nodes[value.0].value,
            &self.nodes[b_attn.0].value,
            &self.nodes[w_val.0].value,
            &self.nodes[w_out.0].value,
        );
        self.push(
            out,
            Op::LocalAttn {
                query: query.0,
                value: value.0,
                b_attn: b_attn.0,
                w_val: w_val.0,
                w_out: w_out.0,
            },
        )
    }

    /// Dense attention of each query cell over every value cell.
    pub fn global_attn(&mut self, query: Var, value: Var, w_attn: Var, w_val: Var, w_out: Var) -> Var {
        let out = global_attn_forward(
            &self.nodes[query.0].value,
            &self.nodes[value.0].value,
            &self.nodes[w_attn.0].value,
            &self.nodes[w_val.0].value,
            &self.nodes[w_out.0].value,
        );
        self.push(
            out,
            Op::GlobalAttn {
                query: query.0,
                value: value.0,
                w_attn: w_attn.0,
                w_val: w_val.0,
                w_out: w_out.0,
            },
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(DynafuseError::invalid(
                "backward requires a scalar-valued loss node",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, val(*b), |x, y| x * y);
                let db = zip_map(g, val(*a), |x, y| x * y);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                let da = zip_map(g, vb, |x, y| x / y);
                let va = val(*a);
                let mut db = g.clone();
                for i in 0..db.data.len() {
                    db.data[i] = -g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Neg(a) => self.acc(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| c * x))
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Exp(a) => self.acc(grads, *a, zip_map(g, out, |x, y| x * y)),
            Op::Ln(a) => self.acc(grads, *a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Square(a) => self.acc(grads, *a, zip_map(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Abs(a) => self.acc(grads, *a, zip_map(g, val(*a), |x, y| x * y.signum())),
            Op::Relu(a) => self.acc(
                grads,
                *a,
                zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, out, |x, y| x * (1.0 - y * y))),
            Op::Softplus(a) => self.acc(grads, *a, zip_map(g, val(*a), |x, y| x * sigmoid(y))),
            Op::Recip(a) => self.acc(grads, *a, zip_map(g, val(*a), |x, y| -x / (y * y))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.acc(
                    grads,
                    *a,
                    zip_map(g, val(*a), |x, y| if y > lo && y < hi { x } else { 0.0 }),
                )
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(&val(*a).shape, gv));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                self.acc(grads, *a, Tensor::full(&val(*a).shape, g.item() / n));
            }
            Op::MaxAll(a) => {
                let va = val(*a);
                let argmax = va
                    .data
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let mut da = Tensor::zeros(&va.shape);
                da.data[argmax] = g.item();
                self.acc(grads, *a, da);
            }
            Op::MulConst(a, c) => self.acc(grads, *a, zip_map(g, c, |x, y| x * y)),
            Op::DivByScalarNode(a, s) => {
                let sv = val(*s).item();
                self.acc(grads, *a, g.map(|x| x / sv));
                let va = val(*a);
                let ds: f64 = g
                    .data
                    .iter()
                    .zip(va.data.iter())
                    .map(|(&gx, &ax)| -gx * ax / (sv * sv))
                    .sum();
                self.acc(grads, *s, Tensor::scalar(ds));
            }
            Op::Conv2d { input, kernel, bias } => {
                let (di, dk, db) = conv2d_backward(val(*input), val(*kernel), g);
                self.acc(grads, *input, di);
                self.acc(grads, *kernel, dk);
                self.acc(grads, *bias, db);
            }
            Op::Concat2(a, b) => {
                let na = val(*a).numel();
                let va_shape = val(*a).shape.clone();
                let vb_shape = val(*b).shape.clone();
                let da = Tensor::from_vec(&va_shape, g.data[..na].to_vec()).unwrap();
                let db = Tensor::from_vec(&vb_shape, g.data[na..].to_vec()).unwrap();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Gap(a) => {
                let va = val(*a);
                let (c, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
                let n = (h * w) as f64;
                let mut da = Tensor::zeros(&va.shape);
                for ci in 0..c {
                    let gv = g.data[ci] / n;
                    for p in 0..h * w {
                        da.data[ci * h * w + p] = gv;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::MatVec { w, x } => {
                let wv = val(*w);
                let xv = val(*x);
                let (o, i) = (wv.shape[0], wv.shape[1]);
                let mut dw = Tensor::zeros(&wv.shape);
                let mut dx = Tensor::zeros(&xv.shape);
                for oi in 0..o {
                    for ii in 0..i {
                        dw.data[oi * i + ii] += g.data[oi] * xv.data[ii];
                        dx.data[ii] += g.data[oi] * wv.data[oi * i + ii];
                    }
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxVec(a) => {
                let s = &out.data;
                let dot: f64 = g.data.iter().zip(s.iter()).map(|(&x, &y)| x * y).sum();
                let da: Vec<f64> = g
                    .data
                    .iter()
                    .zip(s.iter())
                    .map(|(&gx, &sx)| sx * (gx - dot))
                    .collect();
                let shape = val(*a).shape.clone();
                self.acc(grads, *a, Tensor { shape, data: da });
            }
            Op::MulSpatial { grid, map } => {
                let gv = val(*grid);
                let mv = val(*map);
                let (c, h, w) = (gv.shape[0], gv.shape[1], gv.shape[2]);
                let mut dgrid = Tensor::zeros(&gv.shape);
                let mut dmap = Tensor::zeros(&mv.shape);
                for ci in 0..c {
                    for p in 0..h * w {
                        dgrid.data[ci * h * w + p] = g.data[ci * h * w + p] * mv.data[p];
                        dmap.data[p] += g.data[ci * h * w + p] * gv.data[ci * h * w + p];
                    }
                }
                self.acc(grads, *grid, dgrid);
                self.acc(grads, *map, dmap);
            }
            Op::MulChannel { grid, weights } => {
                let gv = val(*grid);
                let wv = val(*weights);
                let (c, h, w) = (gv.shape[0], gv.shape[1], gv.shape[2]);
                let mut dgrid = Tensor::zeros(&gv.shape);
                let mut dw = Tensor::zeros(&wv.shape);
                for ci in 0..c {
                    for p in 0..h * w {
                        dgrid.data[ci * h * w + p] = g.data[ci * h * w + p] * wv.data[ci];
                        dw.data[ci] += g.data[ci * h * w + p] * gv.data[ci * h * w + p];
                    }
                }
                self.acc(grads, *grid, dgrid);
                self.acc(grads, *weights, dw);
            }
            Op::GatherCell { grid, row, col } => {
                let gv = val(*grid);
                let c = gv.shape[0];
                let mut dgrid = Tensor::zeros(&gv.shape);
                for ci in 0..c {
                    *dgrid.at3_mut(ci, *row, *col) = g.data[ci];
                }
                self.acc(grads, *grid, dgrid);
            }
            Op::BilinearSample { grid, x, y } => {
                let gv = val(*grid);
                let xv = val(*x).item();
                let yv = val(*y).item();
                let (_, dx, dy) = bilinear_with_derivs(gv, xv, yv);
                let mut dgrid = Tensor::zeros(&gv.shape);
                bilinear_scatter(&mut dgrid, xv, yv, &g.data);
                let gx: f64 = g.data.iter().zip(dx.iter()).map(|(&a, &b)| a * b).sum();
                let gy: f64 = g.data.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
                self.acc(grads, *grid, dgrid);
                self.acc(grads, *x, Tensor::scalar(gx));
                self.acc(grads, *y, Tensor::scalar(gy));
            }
            Op::DeformAttn {
                query,
                value,
                w_off,
                b_off,
                w_attn,
                b_attn,
                w_val,
                w_out,
                heads,
                points,
            } => {
                let d = deform_attn_backward(
                    val(*query),
                    val(*value),
                    val(*w_off),
                    val(*b_off),
                    val(*w_attn),
                    val(*b_attn),
                    val(*w_val),
                    val(*w_out),
                    *heads,
                    *points,
                    g,
                );
                self.acc(grads, *query, d.query);
                self.acc(grads, *value, d.value);
                self.acc(grads, *w_off, d.w_off);
                self.acc(grads, *b_off, d.b_off);
                self.acc(grads, *w_attn, d.w_attn);
                self.acc(grads, *b_attn, d.b_attn);
                self.acc(grads, *w_val, d.w_val);
                self.acc(grads, *w_out, d.w_out);
            }
            Op::LocalAttn {
                query,
                value,
                b_attn,
                w_val,
                w_out,
            } => {
                let (dv, db, dwv, dwo) =
                    local_attn_backward(val(*value), val(*b_attn), val(*w_val), val(*w_out), g);
                // query only provides reference points; no gradient flows to it
                self.acc(grads, *query, Tensor::zeros(&val(*query).shape));
                self.acc(grads, *value, dv);
                self.acc(grads, *b_attn, db);
                self.acc(grads, *w_val, dwv);
                self.acc(grads, *w_out, dwo);
            }
            Op::GlobalAttn {
                query,
                value,
                w_attn,
                w_val,
                w_out,
            } => {
                let (dq, dv, dwa, dwv, dwo) = global_attn_backward(
                    val(*query),
                    val(*value),
                    val(*w_attn),
                    val(*w_val),
                    val(*w_out),
                    g,
                );
                self.acc(grads, *query, dq);
                self.acc(grads, *value, dv);
                self.acc(grads, *w_attn, dwa);
                self.acc(grads, *w_val, dwv);
                self.acc(grads, *w_out, dwo);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (co, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    assert_eq!(ci, kc, "conv2d channel mismatch");
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = Tensor::zeros(&[co, h, w]);
    for oc in 0..co {
        for ic in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = kernel.data[((oc * kc + ic) * kh + ky) * kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let dy = ky as i64 - ph;
                    let dx = kx as i64 - pw;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as i64 - dy).min(h as i64)) as usize;
                    for y in y_lo..y_hi {
                        let iy = (y as i64 + dy) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((w as i64 - dx).min(w as i64)) as usize;
                        let orow = (oc * h + y) * w;
                        let irow = (ic * h + iy) * w;
                        for x in x_lo..x_hi {
                            let ix = (x as i64 + dx) as usize;
                            out.data[orow + x] += kv * input.data[irow + ix];
                        }
                    }
                }
            }
        }
        let b = bias.data[oc];
        for p in 0..h * w {
            out.data[(oc * h) * w + p] += b;
        }
    }
    out
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (co, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    let mut din = Tensor::zeros(&input.shape);
    let mut dk = Tensor::zeros(&kernel.shape);
    let mut db = Tensor::zeros(&[co]);
    for oc in 0..co {
        db.data[oc] = gout.data[oc * h * w..(oc + 1) * h * w].iter().sum();
        for ic in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dy = ky as i64 - ph;
                    let dx = kx as i64 - pw;
                    let kv = kernel.data[((oc * kc + ic) * kh + ky) * kw + kx];
                    let mut kg = 0.0;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as i64 - dy).min(h as i64)) as usize;
                    for y in y_lo..y_hi {
                        let iy = (y as i64 + dy) as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((w as i64 - dx).min(w as i64)) as usize;
                        let orow = (oc * h + y) * w;
                        let irow = (ic * h + iy) * w;
                        for x in x_lo..x_hi {
                            let ix = (x as i64 + dx) as usize;
                            let gv = gout.data[orow + x];
                            kg += gv * input.data[irow + ix];
                            din.data[irow + ix] += gv * kv;
                        }
                    }
                    dk.data[((oc * kc + ic) * kh + ky) * kw + kx] = kg;
                }
            }
        }
    }
    (din, dk, db)
}

// --- deformable attention kernels ---
//
// Shapes, with d = channels of query/value and (M, K) = (heads, points):
//   w_off [2MK, d], b_off [2MK], w_attn [MK, d], b_attn [MK],
//   w_val [M, d, d], w_out [M, d, d].
// Per query cell at integer reference point (x, y) with query vector q:
//   offsets = w_off q + b_off, logits = w_attn q + b_attn,
//   A_m = softmax over the K logits of head m,
//   s_m = sum_k A_mk * value(x + dx_mk, y + dy_mk)   (bilinear, zero pad),
//   out  = sum_m w_out_m (w_val_m s_m).

#[allow(clippy::too_many_arguments)]
fn deform_attn_forward(
    query: &Tensor,
    value: &Tensor,
    w_off: &Tensor,
    b_off: &Tensor,
    w_attn: &Tensor,
    b_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
    heads: usize,
    points: usize,
) -> Tensor {
    let (d, h, w) = (query.shape[0], query.shape[1], query.shape[2]);
    let mut out = Tensor::zeros(&[d, h, w]);
    let mut q = vec![0.0; d];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..d {
                q[ci] = query.at3(ci, y, x);
            }
            let offsets = affine(w_off, b_off, &q);
            let logits = affine(w_attn, b_attn, &q);
            for m in 0..heads {
                let a = softmax(&logits[m * points..(m + 1) * points]);
                let mut s = vec![0.0; d];
                for k in 0..points {
                    let idx = 2 * (m * points + k);
                    let sx = x as f64 + offsets[idx];
                    let sy = y as f64 + offsets[idx + 1];
                    let v = crate::tensor::bilinear_at(value, sx, sy);
                    for ci in 0..d {
                        s[ci] += a[k] * v[ci];
                    }
                }
                let t = matmul_vec(w_val, m, d, &s);
                let o = matmul_vec(w_out, m, d, &t);
                for ci in 0..d {
                    *out.at3_mut(ci, y, x) += o[ci];
                }
            }
        }
    }
    out
}

struct DeformGrads {
    query: Tensor,
    value: Tensor,
    w_off: Tensor,
    b_off: Tensor,
    w_attn: Tensor,
    b_attn: Tensor,
    w_val: Tensor,
    w_out: Tensor,
}

#[allow(clippy::too_many_arguments)]
fn deform_attn_backward(
    query: &Tensor,
    value: &Tensor,
    w_off: &Tensor,
    b_off: &Tensor,
    w_attn: &Tensor,
    b_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
    heads: usize,
    points: usize,
    gout: &Tensor,
) -> DeformGrads {
    let (d, h, w) = (query.shape[0], query.shape[1], query.shape[2]);
    let mut g = DeformGrads {
        query: Tensor::zeros(&query.shape),
        value: Tensor::zeros(&value.shape),
        w_off: Tensor::zeros(&w_off.shape),
        b_off: Tensor::zeros(&b_off.shape),
        w_attn: Tensor::zeros(&w_attn.shape),
        b_attn: Tensor::zeros(&b_attn.shape),
        w_val: Tensor::zeros(&w_val.shape),
        w_out: Tensor::zeros(&w_out.shape),
    };
    let mut q = vec![0.0; d];
    let mut gcell = vec![0.0; d];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..d {
                q[ci] = query.at3(ci, y, x);
                gcell[ci] = gout.at3(ci, y, x);
            }
            let offsets = affine(w_off, b_off, &q);
            let logits = affine(w_attn, b_attn, &q);
            let mut g_off = vec![0.0; offsets.len()];
            let mut g_logits = vec![0.0; logits.len()];
            for m in 0..heads {
                let a = softmax(&logits[m * points..(m + 1) * points]);
                // recompute forward intermediates for this head
                let mut s = vec![0.0; d];
                let mut samples = Vec::with_capacity(points);
                let mut sample_derivs = Vec::with_capacity(points);
                for k in 0..points {
                    let idx = 2 * (m * points + k);
                    let sx = x as f64 + offsets[idx];
                    let sy = y as f64 + offsets[idx + 1];
                    let (v, dvx, dvy) = bilinear_with_derivs(value, sx, sy);
                    for ci in 0..d {
                        s[ci] += a[k] * v[ci];
                    }
                    samples.push((sx, sy, v));
                    sample_derivs.push((dvx, dvy));
                }
                let t = matmul_vec(w_val, m, d, &s);
                // out = w_out_m t; g_t = w_out_m^T gcell, g_wout += gcell x t^T
                let mut g_t = vec![0.0; d];
                for r in 0..d {
                    for c in 0..d {
                        g.w_out.data[(m * d + r) * d + c] += gcell[r] * t[c];
                        g_t[c] += w_out.data[(m * d + r) * d + c] * gcell[r];
                    }
                }
                let mut g_s = vec![0.0; d];
                for r in 0..d {
                    for c in 0..d {
                        g.w_val.data[(m * d + r) * d + c] += g_t[r] * s[c];
                        g_s[c] += w_val.data[(m * d + r) * d + c] * g_t[r];
                    }
                }
                let mut g_a = vec![0.0; points];
                for (k, (sx, sy, v)) in samples.iter().enumerate() {
                    g_a[k] = g_s.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
                    let gv: Vec<f64> = g_s.iter().map(|&gc| a[k] * gc).collect();
                    bilinear_scatter(&mut g.value, *sx, *sy, &gv);
                    let (dvx, dvy) = &sample_derivs[k];
                    let idx = 2 * (m * points + k);
                    g_off[idx] += a[k]
                        * g_s.iter().zip(dvx.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                    g_off[idx + 1] += a[k]
                        * g_s.iter().zip(dvy.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                }
                // softmax backward within the head
                let dot: f64 = g_a.iter().zip(a.iter()).map(|(&x, &y)| x * y).sum();
                for k in 0..points {
                    g_logits[m * points + k] = a[k] * (g_a[k] - dot);
                }
            }
            // logits = w_attn q + b_attn; offsets = w_off q + b_off
            for r in 0..g_logits.len() {
                g.b_attn.data[r] += g_logits[r];
                for c in 0..d {
                    g.w_attn.data[r * d + c] += g_logits[r] * q[c];
                    *g.query.at3_mut(c, y, x) += w_attn.data[r * d + c] * g_logits[r];
                }
            }
            for r in 0..g_off.len() {
                g.b_off.data[r] += g_off[r];
                for c in 0..d {
                    g.w_off.data[r * d + c] += g_off[r] * q[c];
                    *g.query.at3_mut(c, y, x) += w_off.data[r * d + c] * g_off[r];
                }
            }
        }
    }
    g
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape[0], w.shape[1]);
    let mut out = b.data.clone();
    for r in 0..o {
        for c in 0..i {
            out[r] += w.data[r * i + c] * x[c];
        }
    }
    out
}

/// y = W_m x for a stacked [M, d, d] weight tensor.
fn matmul_vec(w: &Tensor, m: usize, d: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..d {
        for c in 0..d {
            out[r] += w.data[(m * d + r) * d + c] * x[c];
        }
    }
    out
}

const LOCAL_OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn local_attn_forward(
    query: &Tensor,
    value: &Tensor,
    b_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
) -> Tensor {
    let (d, h, w) = (query.shape[0], query.shape[1], query.shape[2]);
    let a = softmax(&b_attn.data);
    let mut out = Tensor::zeros(&[d, h, w]);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = vec![0.0; d];
            for (k, (dx, dy)) in LOCAL_OFFSETS.iter().enumerate() {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                for ci in 0..d {
                    s[ci] += a[k] * value.at3(ci, sy as usize, sx as usize);
                }
            }
            let t = matmul_vec(w_val, 0, d, &s);
            let o = matmul_vec(w_out, 0, d, &t);
            for ci in 0..d {
                *out.at3_mut(ci, y as usize, x as usize) = o[ci];
            }
        }
    }
    out
}

fn local_attn_backward(
    value: &Tensor,
    b_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (d, h, w) = (value.shape[0], value.shape[1], value.shape[2]);
    let a = softmax(&b_attn.data);
    let mut dv = Tensor::zeros(&value.shape);
    let mut g_a = vec![0.0; 9];
    let mut dwv = Tensor::zeros(&w_val.shape);
    let mut dwo = Tensor::zeros(&w_out.shape);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = vec![0.0; d];
            for (k, (dx, dy)) in LOCAL_OFFSETS.iter().enumerate() {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                for ci in 0..d {
                    s[ci] += a[k] * value.at3(ci, sy as usize, sx as usize);
                }
            }
            let t = matmul_vec(w_val, 0, d, &s);
            let mut gcell = vec![0.0; d];
            for ci in 0..d {
                gcell[ci] = gout.at3(ci, y as usize, x as usize);
            }
            let mut g_t = vec![0.0; d];
            for r in 0..d {
                for c in 0..d {
                    dwo.data[r * d + c] += gcell[r] * t[c];
                    g_t[c] += w_out.data[r * d + c] * gcell[r];
                }
            }
            let mut g_s = vec![0.0; d];
            for r in 0..d {
                for c in 0..d {
                    dwv.data[r * d + c] += g_t[r] * s[c];
                    g_s[c] += w_val.data[r * d + c] * g_t[r];
                }
            }
            for (k, (dx, dy)) in LOCAL_OFFSETS.iter().enumerate() {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                    continue;
                }
                for ci in 0..d {
                    let vv = value.at3(ci, sy as usize, sx as usize);
                    g_a[k] += g_s[ci] * vv;
                    *dv.at3_mut(ci, sy as usize, sx as usize) += a[k] * g_s[ci];
                }
            }
        }
    }
    let dot: f64 = g_a.iter().zip(a.iter()).map(|(&x, &y)| x * y).sum();
    let db: Vec<f64> = (0..9).map(|k| a[k] * (g_a[k] - dot)).collect();
    (dv, Tensor::from_vec(&[9], db).unwrap(), dwv, dwo)
}

fn global_attn_forward(
    query: &Tensor,
    value: &Tensor,
    w_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
) -> Tensor {
    let (d, h, w) = (query.shape[0], query.shape[1], query.shape[2]);
    let n = h * w;
    let mut out = Tensor::zeros(&[d, h, w]);
    for i in 0..n {
        let q: Vec<f64> = (0..d).map(|ci| query.data[ci * n + i]).collect();
        let u = matmul_vec(w_attn, 0, d, &q);
        let mut logits = vec![0.0; n];
        for j in 0..n {
            logits[j] = (0..d).map(|ci| u[ci] * value.data[ci * n + j]).sum();
        }
        let a = softmax(&logits);
        let mut s = vec![0.0; d];
        for j in 0..n {
            for ci in 0..d {
                s[ci] += a[j] * value.data[ci * n + j];
            }
        }
        let t = matmul_vec(w_val, 0, d, &s);
        let o = matmul_vec(w_out, 0, d, &t);
        for ci in 0..d {
            out.data[ci * n + i] = o[ci];
        }
    }
    out
}

fn global_attn_backward(
    query: &Tensor,
    value: &Tensor,
    w_attn: &Tensor,
    w_val: &Tensor,
    w_out: &Tensor,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
    let (d, h, w) = (query.shape[0], query.shape[1], query.shape[2]);
    let n = h * w;
    let mut dq = Tensor::zeros(&query.shape);
    let mut dv = Tensor::zeros(&value.shape);
    let mut dwa = Tensor::zeros(&w_attn.shape);
    let mut dwv = Tensor::zeros(&w_val.shape);
    let mut dwo = Tensor::zeros(&w_out.shape);
    for i in 0..n {
        let q: Vec<f64> = (0..d).map(|ci| query.data[ci * n + i]).collect();
        let u = matmul_vec(w_attn, 0, d, &q);
        let mut logits = vec![0.0; n];
        for j in 0..n {
            logits[j] = (0..d).map(|ci| u[ci] * value.data[ci * n + j]).sum();
        }
        let a = softmax(&logits);
        let mut s = vec![0.0; d];
        for j in 0..n {
            for ci in 0..d {
                s[ci] += a[j] * value.data[ci * n + j];
            }
        }
        let t = matmul_vec(w_val, 0, d, &s);
        let gcell: Vec<f64> = (0..d).map(|ci| gout.data[ci * n + i]).collect();
        let mut g_t = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                dwo.data[r * d + c] += gcell[r] * t[c];
                g_t[c] += w_out.data[r * d + c] * gcell[r];
            }
        }
        let mut g_s = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                dwv.data[r * d + c] += g_t[r] * s[c];
                g_s[c] += w_val.data[r * d + c] * g_t[r];
            }
        }
        let mut g_a = vec![0.0; n];
        for j in 0..n {
            g_a[j] = (0..d).map(|ci| g_s[ci] * value.data[ci * n + j]).sum();
        }
        let dot: f64 = g_a.iter().zip(a.iter()).map(|(&x, &y)| x * y).sum();
        let mut g_u = vec![0.0; d];
        for j in 0..n {
            let gl = a[j] * (g_a[j] - dot);
            for ci in 0..d {
                g_u[ci] += gl * value.data[ci * n + j];
                dv.data[ci * n + j] += gl * u[ci] + a[j] * g_s[ci];
            }
        }
        for r in 0..d {
            for c in 0..d {
                dwa.data[r * d + c] += g_u[r] * q[c];
                dq.data[c * n + i] += w_attn.data[r * d + c] * g_u[r];
            }
        }
    }
    (dq, dv, dwa, dwv, dwo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.scalar(5.0);
        let f = t.mul(x, y);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(&t, x).item(), 5.0);
        assert_eq!(g.wrt(&t, y).item(), 2.0);
    }

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let f = t.mul(x, x);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(&t, x).item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.scalar(3.0);
        let c = t.scalar(7.0);
        let f = t.add_scalar(c, 1.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(&t, x).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_matches_path_enumeration_on_three_node_tape() {
        // f = (x + y) * x at (x, y) = (3, 4):
        // paths to x: via the add node (d = 1 * x-side product partial)
        // and directly as the mul's right operand.
        let (x0, y0) = (3.0, 4.0);
        let mut t = Tape::new();
        let x = t.scalar(x0);
        let y = t.scalar(y0);
        let s = t.add(x, y);
        let f = t.mul(s, x);
        let g = t.backward(f).unwrap();
        // path products: through s: 1 * x0; direct: (x0 + y0) * 1
        assert_eq!(g.wrt(&t, x).item(), x0 + (x0 + y0));
        assert_eq!(g.wrt(&t, y).item(), x0);
    }
}
