//! Gradient tape.
//!
//! Every op appends one record holding its output value and whatever it needs for the
//! backward pass. Records are only ever appended, so the tape order is a topological
//! order and [`Graph::backward`] visits each record once, in reverse.

use std::collections::HashMap;

use crate::compute::{zip_same, Compute};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvOpts, LstmCache, NormCache, NormKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Glu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: ConvOpts,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        kind: NormKind,
        cache: NormCache,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
        cache: LstmCache,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    L1Rows {
        x: Var,
        target: Tensor,
    },
    NegSiSnrRows {
        x: Var,
        grads: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients indexed by [`Var`]; absent entries are zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Trainable leaf not tied to a [`ParamStore`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Per-row mean absolute error against a constant target, `[batch, channels]`.
    pub fn l1_rows(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let value = kernels::l1_rows(self.value(x), target)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::L1Rows {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Per-row negated, clamped SI-SNR in dB against a constant target, `[batch, channels]`.
    pub fn neg_si_snr_rows(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, l) = xv.dims3("neg_si_snr_rows")?;
        if xv.shape() != target.shape() {
            return shape_err(
                "neg_si_snr_rows",
                format!("estimate {:?} vs target {:?}", xv.shape(), target.shape()),
            );
        }
        let mut values = Vec::with_capacity(b * c);
        let mut grads = Vec::with_capacity(xv.len());
        for r in 0..b * c {
            let (v, g) =
                kernels::neg_si_snr_row(&xv.data()[r * l..][..l], &target.data()[r * l..][..l]);
            values.push(v);
            grads.extend(g);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, c], values)?,
            Op::NegSiSnrRows { x, grads },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter of `store`, zero where the loss does not depend on it.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&id)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = zip_same("mul", g, val(*b), |x, y| x * y).unwrap();
                let gb = zip_same("mul", g, val(*a), |x, y| x * y).unwrap();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Relu(a) => {
                let d =
                    zip_same("relu", g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_same("sigmoid", g, &node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_same("tanh", g, &node.value, |gv, y| gv * (1.0 - y * y)).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Prelu { x, slope } => {
                let (dx, ds) = kernels::prelu_backward(val(*x), val(*slope), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, ds);
            }
            Op::Glu(x) => self.accumulate(grads, *x, kernels::glu_backward(val(*x), g)),
            Op::Conv1d { x, w, b, opts } => {
                let (dx, dw, db) =
                    kernels::conv1d_backward(val(*x), val(*w), b.is_some(), *opts, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = kernels::conv_transpose1d_backward(
                    val(*x),
                    val(*w),
                    b.is_some(),
                    *stride,
                    *padding,
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                kind,
                cache,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, val(*gain), *kind, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                reverse,
                cache,
            } => {
                let lg =
                    kernels::lstm_backward(val(*x), val(*w_ih), val(*w_hh), *reverse, cache, g);
                self.accumulate(grads, *x, lg.dx);
                self.accumulate(grads, *w_ih, lg.dw_ih);
                self.accumulate(grads, *w_hh, lg.dw_hh);
                self.accumulate(grads, *b_ih, lg.db_ih);
                self.accumulate(grads, *b_hh, lg.db_hh);
            }
            Op::Narrow { x, axis, start } => {
                let dx = kernels::narrow_backward(val(*x).shape(), *axis, *start, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for x in xs {
                    let n = val(*x).shape()[*axis];
                    let part = kernels::narrow(g, *axis, start, n).unwrap();
                    self.accumulate(grads, *x, part);
                    start += n;
                }
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(val(*x).shape()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::L1Rows { x, target } => {
                self.accumulate(grads, *x, kernels::l1_rows_backward(val(*x), target, g));
            }
            Op::NegSiSnrRows { x, grads: local } => {
                let xv = val(*x);
                let l = xv.shape()[2];
                let data = local
                    .iter()
                    .enumerate()
                    .map(|(i, d)| d * g.data()[i / l])
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
        }
    }
}

impl Compute for Graph {
    type Value = Var;

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = zip_same("add", self.value(*a), self.value(*b), |x, y| x + y)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::Add(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = zip_same("mul", self.value(*a), self.value(*b), |x, y| x * y)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::Mul(*a, *b), rg))
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let value = self.value(*a).map(|v| v * factor);
        let rg = self.rg(&[*a]);
        self.push(value, Op::Scale(*a, factor), rg)
    }

    fn relu(&mut self, a: &Var) -> Var {
        let value = self.value(*a).map(|v| v.max(0.0));
        let rg = self.rg(&[*a]);
        self.push(value, Op::Relu(*a), rg)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let value = self.value(*a).map(kernels::sigmoid);
        let rg = self.rg(&[*a]);
        self.push(value, Op::Sigmoid(*a), rg)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let value = self.value(*a).map(f64::tanh);
        let rg = self.rg(&[*a]);
        self.push(value, Op::Tanh(*a), rg)
    }

    fn prelu(&mut self, x: &Var, slope: &Var) -> Result<Var> {
        let value = kernels::prelu(self.value(*x), self.value(*slope))?;
        let rg = self.rg(&[*x, *slope]);
        Ok(self.push(
            value,
            Op::Prelu {
                x: *x,
                slope: *slope,
            },
            rg,
        ))
    }

    fn glu(&mut self, x: &Var) -> Result<Var> {
        let value = kernels::glu(self.value(*x))?;
        let rg = self.rg(&[*x]);
        Ok(self.push(value, Op::Glu(*x), rg))
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: Option<&Var>, opts: ConvOpts) -> Result<Var> {
        let value = kernels::conv1d(
            self.value(*x),
            self.value(*w),
            b.map(|b| self.value(*b)),
            opts,
        )?;
        let mut deps = vec![*x, *w];
        deps.extend(b.copied());
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv1d {
                x: *x,
                w: *w,
                b: b.copied(),
                opts,
            },
            rg,
        ))
    }

    fn conv_transpose1d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = kernels::conv_transpose1d(
            self.value(*x),
            self.value(*w),
            b.map(|b| self.value(*b)),
            stride,
            padding,
        )?;
        let mut deps = vec![*x, *w];
        deps.extend(b.copied());
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose1d {
                x: *x,
                w: *w,
                b: b.copied(),
                stride,
                padding,
            },
            rg,
        ))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, kind: NormKind) -> Result<Var> {
        let (value, cache) =
            kernels::layer_norm(self.value(*x), self.value(*gain), self.value(*bias), kind)?;
        let rg = self.rg(&[*x, *gain, *bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                kind,
                cache,
            },
            rg,
        ))
    }

    fn lstm(
        &mut self,
        x: &Var,
        w_ih: &Var,
        w_hh: &Var,
        b_ih: &Var,
        b_hh: &Var,
        reverse: bool,
    ) -> Result<Var> {
        let (value, cache) = kernels::lstm(
            self.value(*x),
            self.value(*w_ih),
            self.value(*w_hh),
            self.value(*b_ih),
            self.value(*b_hh),
            reverse,
        )?;
        let rg = self.rg(&[*x, *w_ih, *w_hh, *b_ih, *b_hh]);
        Ok(self.push(
            value,
            Op::Lstm {
                x: *x,
                w_ih: *w_ih,
                w_hh: *w_hh,
                b_ih: *b_ih,
                b_hh: *b_hh,
                reverse,
                cache,
            },
            rg,
        ))
    }

    fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow(self.value(*x), axis, start, len)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(value, Op::Narrow { x: *x, axis, start }, rg))
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let value = kernels::concat(&refs, axis)?;
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(*x).clone().reshape(shape)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(value, Op::Reshape(*x), rg))
    }
}
