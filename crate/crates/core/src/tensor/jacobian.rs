use super::{Graph, Tensor, Var};
use crate::error::{dim_err, Result};

/// Jacobian of a batch-style map `[1, d] -> [1, n]` at `x`, one reverse pass
/// per output row. Returns an `n x d` matrix.
pub fn encoder_jacobian<F>(encoder: F, x: &[f64]) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let d = x.len();
    let mut g = Graph::new();
    let xv = g.leaf(Tensor::new(vec![1, d], x.to_vec())?);
    let z = encoder(&mut g, xv)?;
    let n = match g.shape(z) {
        [1, n] | [n] => *n,
        other => {
            return Err(dim_err(
                "encoder_jacobian",
                format!("encoder output {:?} for a single input", other),
            ))
        }
    };
    let mut jac = Vec::with_capacity(n * d);
    for i in 0..n {
        let zi = g.select(z, i)?;
        g.backward(zi)?;
        jac.extend_from_slice(g.grad(xv).expect("input is a leaf").data());
    }
    Tensor::matrix(n, d, jac)
}
