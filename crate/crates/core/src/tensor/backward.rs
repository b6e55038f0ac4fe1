use super::{conv, matmul_raw, silu_d1, silu_d2, Graph, Op, Tensor, Var};

/// Sums a gradient over the leading axis when the parent was broadcast.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

struct Accum<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    tracked: &'a [bool],
}

impl Accum<'_> {
    fn add(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.tracked[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.tracked[v.0]
    }
}

pub(super) fn run(graph: &mut Graph, root: Var) {
    let n = root.0 + 1;
    let tracked: Vec<bool> = graph.nodes[..n].iter().map(|nd| nd.tracked).collect();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[root.0] = Some(vec![1.0]);

    for node in graph.nodes.iter_mut() {
        if matches!(node.op, Op::Leaf) && node.tracked {
            node.grad = Some(Tensor::zeros(&node.value.shape));
        }
    }

    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else { continue };
        if !tracked[i] {
            continue;
        }
        let nodes = &graph.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let mut acc = Accum {
            grads: &mut grads,
            tracked: &tracked,
        };
        match &nodes[i].op {
            Op::Leaf => {
                let shape = nodes[i].value.shape.clone();
                graph.nodes[i].grad = Some(Tensor { shape, data: g });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let nn = shp(*b)[1];
                if acc.wants(*a) {
                    let bt = transpose(val(*b), k, nn);
                    acc.add(*a, matmul_raw(&g, &bt, m, nn, k));
                }
                if acc.wants(*b) {
                    let at = transpose(val(*a), m, k);
                    acc.add(*b, matmul_raw(&at, &g, k, m, nn));
                }
            }
            Op::Add(a, b) => {
                let lb = val(*b).len();
                acc.add(*b, reduce_to(&g, lb));
                acc.add(*a, g);
            }
            Op::Sub(a, b) => {
                let lb = val(*b).len();
                let neg: Vec<f64> = reduce_to(&g, lb).into_iter().map(|x| -x).collect();
                acc.add(*b, neg);
                acc.add(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let lb = bv.len();
                if acc.wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, gk)| gk * bv[k % lb]).collect();
                    acc.add(*a, ga);
                }
                if acc.wants(*b) {
                    let full: Vec<f64> = g.iter().zip(av).map(|(gk, ak)| gk * ak).collect();
                    acc.add(*b, reduce_to(&full, lb));
                }
            }
            Op::Scale(a, c) => acc.add(*a, g.iter().map(|x| x * c).collect()),
            Op::Silu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(gk, &x)| gk * silu_d1(x)).collect();
                acc.add(*a, ga);
            }
            Op::SiluDeriv(a) => {
                let ga = g.iter().zip(val(*a)).map(|(gk, &x)| gk * silu_d2(x)).collect();
                acc.add(*a, ga);
            }
            Op::KronSelf(a) => {
                let av = val(*a);
                let nz = *shp(*a).last().unwrap();
                let mut ga = vec![0.0; av.len()];
                for (r, z) in av.chunks(nz).enumerate() {
                    let gr = &g[r * nz * nz..(r + 1) * nz * nz];
                    let out = &mut ga[r * nz..(r + 1) * nz];
                    for i in 0..nz {
                        for j in 0..nz {
                            let gij = gr[i * nz + j];
                            out[i] += gij * z[j];
                            out[j] += gij * z[i];
                        }
                    }
                }
                acc.add(*a, ga);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = conv::ConvGeom::forward(shp(*x), shp(*w), *stride, *pad).unwrap();
                let (dx, dw, db) = conv::conv1d_backward(&geom, val(*x), val(*w), &g);
                acc.add(*x, dx);
                acc.add(*w, dw);
                if let Some(b) = b {
                    acc.add(*b, db);
                }
            }
            Op::ConvT1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = conv::ConvGeom::transposed(shp(*x), shp(*w), *stride, *pad).unwrap();
                let (dx, dw, db) = conv::conv_transpose1d_backward(&geom, val(*x), val(*w), &g);
                acc.add(*x, dx);
                acc.add(*w, dw);
                if let Some(b) = b {
                    acc.add(*b, db);
                }
            }
            Op::Concat(a, b) => {
                let m = *shp(*a).last().unwrap();
                let k = *shp(*b).last().unwrap();
                let rows = val(*a).len() / m.max(1);
                let mut ga = Vec::with_capacity(rows * m);
                let mut gb = Vec::with_capacity(rows * k);
                for r in 0..rows {
                    let row = &g[r * (m + k)..(r + 1) * (m + k)];
                    ga.extend_from_slice(&row[..m]);
                    gb.extend_from_slice(&row[m..]);
                }
                acc.add(*a, ga);
                acc.add(*b, gb);
            }
            Op::Sum(a) => {
                let len = val(*a).len();
                acc.add(*a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = val(*a).len();
                acc.add(*a, vec![g[0] / len.max(1) as f64; len]);
            }
            Op::SumLast(a) => {
                let nz = *shp(*a).last().unwrap();
                let ga = g
                    .iter()
                    .flat_map(|&gk| std::iter::repeat_n(gk, nz))
                    .collect();
                acc.add(*a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gk, &x)| if x == 0.0 { 0.0 } else { gk * x.signum() })
                    .collect();
                acc.add(*a, ga);
            }
            Op::Square(a) => {
                let ga = g.iter().zip(val(*a)).map(|(gk, &x)| 2.0 * x * gk).collect();
                acc.add(*a, ga);
            }
            Op::Sqrt(a) => {
                // Zero subgradient at the origin.
                let out = nodes[i].value.data();
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(gk, &s)| if s == 0.0 { 0.0 } else { gk / (2.0 * s) })
                    .collect();
                acc.add(*a, ga);
            }
            Op::Gather(x, idx) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gk, &k) in g.iter().zip(idx) {
                    gx[k] += gk;
                }
                acc.add(*x, gx);
            }
            Op::Reshape(x) => acc.add(*x, g),
        }
    }
}
