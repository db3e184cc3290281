//! Brute-force reference for the full-graph loss.
//!
//! Plain nested loops over scalars. Nothing here touches the autodiff graph
//! or the vectorised loss path.

use crate::error::{CmcError, Result};
use crate::loss::EmbeddingSet;

pub const MAX_ORACLE_ROWS: usize = 64;

fn cos(z: &[f64], dim: usize, a: usize, b: usize) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..dim {
        let x = z[a * dim + k];
        let y = z[b * dim + k];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub fn loss_oracle(e: &EmbeddingSet) -> Result<f64> {
    let (batch, views, dim) = (e.batch(), e.views(), e.dim());
    if batch * views > MAX_ORACLE_ROWS {
        return Err(CmcError::OracleScope(format!(
            "{batch}×{views} views exceeds {MAX_ORACLE_ROWS}"
        )));
    }
    if batch < 2 {
        return Err(CmcError::InsufficientNegatives(batch));
    }
    let z = e.z().data();
    let tau = e.temperature();
    let row = |t: usize, v: usize| t * views + v;
    let mut total = 0.0;
    for t in 0..batch {
        for v in 0..views {
            for w in 0..views {
                if w == v {
                    continue;
                }
                let numerator = (cos(z, dim, row(t, v), row(t, w)) / tau).exp();
                let mut denominator = 0.0;
                for i in 0..batch {
                    denominator += (cos(z, dim, row(t, v), row(i, w)) / tau).exp();
                }
                total += -(numerator / denominator).ln();
            }
        }
    }
    Ok(total)
}
