//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] owns every node created during one forward evaluation. Nodes
//! are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use quadembed::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
pub(crate) mod conv;
mod jacobian;

pub use conv::{conv_out_len, conv_transpose_out_len};
pub use jacobian::encoder_jacobian;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Two-dimensional tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag for [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpTag {
    MatMul,
    Add,
    Sub,
    Scale(f64),
    Mul,
    Silu,
    SiluDeriv,
    KronSelf,
    Conv1d { stride: usize, pad: usize },
    ConvTranspose1d { stride: usize, pad: usize },
    Concat,
    Sum,
    Mean,
    SumLast,
    Abs,
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SiluDeriv(Var),
    KronSelf(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Tensor>,
}

/// Computation graph for one forward/backward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

/// `b` may equal `a` in shape or drop `a`'s leading (batch) axis.
fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    a == b || (a.len() == b.len() + 1 && &a[1..] == b)
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.push(value, op, tracked)
    }

    /// Differentiable input; receives a gradient slot on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Dispatches a forward operation by tag.
    pub fn apply(&mut self, tag: OpTag, inputs: &[Var]) -> Result<Var> {
        let arity = match tag {
            OpTag::MatMul | OpTag::Add | OpTag::Sub | OpTag::Mul | OpTag::Concat => 2,
            OpTag::Conv1d { .. } | OpTag::ConvTranspose1d { .. } => {
                if inputs.len() == 2 || inputs.len() == 3 {
                    inputs.len()
                } else {
                    0
                }
            }
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(dim_err(
                "apply",
                format!("{:?} got {} inputs", tag, inputs.len()),
            ));
        }
        match tag {
            OpTag::MatMul => self.matmul(inputs[0], inputs[1]),
            OpTag::Add => self.add(inputs[0], inputs[1]),
            OpTag::Sub => self.sub(inputs[0], inputs[1]),
            OpTag::Mul => self.mul(inputs[0], inputs[1]),
            OpTag::Scale(c) => Ok(self.scale(inputs[0], c)),
            OpTag::Silu => Ok(self.silu(inputs[0])),
            OpTag::SiluDeriv => Ok(self.silu_deriv(inputs[0])),
            OpTag::KronSelf => self.kron_self(inputs[0]),
            OpTag::Conv1d { stride, pad } => {
                self.conv1d(inputs[0], inputs[1], inputs.get(2).copied(), stride, pad)
            }
            OpTag::ConvTranspose1d { stride, pad } => {
                self.conv_transpose1d(inputs[0], inputs[1], inputs.get(2).copied(), stride, pad)
            }
            OpTag::Concat => self.concat(inputs[0], inputs[1]),
            OpTag::Sum => Ok(self.sum(inputs[0])),
            OpTag::Mean => Ok(self.mean(inputs[0])),
            OpTag::SumLast => self.sum_last(inputs[0]),
            OpTag::Abs => Ok(self.abs(inputs[0])),
            OpTag::Square => Ok(self.square(inputs[0])),
            OpTag::Sqrt => self.sqrt(inputs[0]),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_compatible(sa, sb) {
            return Err(dim_err(name, format!("{:?} with {:?}", sa, sb)));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % period]))
            .collect();
        Ok(Tensor {
            shape: av.shape.clone(),
            data,
        })
    }

    /// Elementwise sum; `b` may broadcast over the leading axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        self.derived(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), silu)
    }

    /// Derivative of silu, itself differentiable. Used for tangent propagation.
    pub fn silu_deriv(&mut self, a: Var) -> Var {
        self.unary(a, Op::SiluDeriv(a), silu_d1)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data.iter().find(|&&x| x < 0.0) {
            return Err(Error::Contract(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Row-wise Kronecker square: `[n] -> [n*n]` or `[B, n] -> [B, n*n]`.
    pub fn kron_self(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, n) = match shape.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            _ => return Err(dim_err("kron_self", format!("{:?}", shape))),
        };
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * n * n);
        for r in 0..rows {
            let z = &src[r * n..(r + 1) * n];
            for &zi in z {
                data.extend(z.iter().map(|&zj| zi * zj));
            }
        }
        let out_shape = if shape.len() == 1 {
            vec![n * n]
        } else {
            vec![rows, n * n]
        };
        let value = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.derived(value, Op::KronSelf(a), &[a]))
    }

    /// 1-D convolution. `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv::ConvGeom::forward(&sx, &sw, stride, pad)
            .ok_or_else(|| dim_err("conv1d", format!("x {:?}, w {:?}, s {stride}, p {pad}", sx, sw)))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(dim_err("conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let data = conv::conv1d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.lout],
            data,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.derived(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// 1-D transposed convolution. `x: [B, Cin, L]`, `w: [Cin, Cout, K]`, `b: [Cout]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = conv::ConvGeom::transposed(&sx, &sw, stride, pad).ok_or_else(|| {
            dim_err(
                "conv_transpose1d",
                format!("x {:?}, w {:?}, s {stride}, p {pad}", sx, sw),
            )
        })?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(dim_err(
                    "conv_transpose1d",
                    format!("bias {:?}", self.shape(b)),
                ));
            }
        }
        let data = conv::conv_transpose1d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.lout],
            data,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.derived(
            value,
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat", format!("{:?} with {:?}", sa, sb)));
        }
        let (m, n) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).numel() / m.max(1);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            data.extend_from_slice(&da[r * m..(r + 1) * m]);
            data.extend_from_slice(&db[r * n..(r + 1) * n]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = m + n;
        let value = Tensor { shape, data };
        Ok(self.derived(value, Op::Concat(a, b), &[a, b]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.numel().max(1) as f64;
        self.derived(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(dim_err("sum_last", "scalar input"));
        };
        let data = if n == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.value(a)
                .data
                .chunks(n)
                .map(|c| c.iter().sum())
                .collect()
        };
        let value = Tensor {
            shape: lead.to_vec(),
            data,
        };
        Ok(self.derived(value, Op::SumLast(a), &[a]))
    }

    /// `out[k] = x[indices[k]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if indices.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != indices.len() {
            return Err(dim_err(
                "gather",
                format!("{} indices into {} values as {:?}", indices.len(), n, shape),
            ));
        }
        let src = self.value(x).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor { shape, data };
        Ok(self.derived(value, Op::Gather(x, indices), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [r, c] = s[..] else {
            return Err(dim_err("transpose", format!("{:?}", s)));
        };
        let idx = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, idx, vec![c, r])
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather(x, vec![i], Vec::new())
    }

    /// Backpropagates from a scalar root, filling the gradient slot of every
    /// tracked leaf. Previous gradients are overwritten.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        backward::run(self, root);
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 20.0]));
        let y = g.silu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        let expected = 20.0 / (1.0 + (-20.0f64).exp());
        assert!((v[1] - expected).abs() < 1e-12);
        // 20 * e^-20 ~ 4.1e-8 below saturation.
        assert!((v[1] - 20.0).abs() < 5e-8);
    }

    #[test]
    fn matmul_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn broadcast_only_leading_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(&g.value(c).data()[3..6], &[1.0, 2.0, 3.0]);
        let bad = g.constant(Tensor::zeros(&[4, 1]));
        assert!(g.add(a, bad).is_err());
        assert!(g.add(b, a).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let root = g.sum(sq);
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_leaf_grads() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn kron_self_rows() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, -1.0]).unwrap());
        let k = g.kron_self(z).unwrap();
        assert_eq!(
            g.value(k).data(),
            &[1.0, 2.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn conv_output_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 256]));
        let w = g.constant(Tensor::zeros(&[8, 1, 4]));
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 128]);
        let wt = g.constant(Tensor::zeros(&[8, 1, 4]));
        let back = g.conv_transpose1d(y, wt, None, 2, 1).unwrap();
        assert_eq!(g.shape(back), &[1, 1, 256]);
    }

    #[test]
    fn transpose_and_concat() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.transpose(a).unwrap();
        assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
        let b = g.constant(Tensor::matrix(2, 1, vec![7., 8.]).unwrap());
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 7., 4., 5., 6., 8.]);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![-1.0]));
        assert!(g.sqrt(a).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap());
        let x = g.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let s = g.silu(h);
        let root = g.mean(s);
        g.backward(root).unwrap();
        let first = g.grad(w).unwrap().clone();
        g.backward(root).unwrap();
        assert_eq!(&first, g.grad(w).unwrap());
    }
}
