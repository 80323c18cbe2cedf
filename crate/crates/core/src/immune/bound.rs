//! The feasibility bound λ on inner products of consecutive trajectory
//! directions under vanilla gradient training:
//! `λ = η² max_k ‖(L Z Zᵀ L (O − Y))_{k,·}‖²` with `O` the row-softmax of
//! `L Z W`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::Laplacian;
use crate::model::softmax_rows;

/// The bound value with the context it was computed in.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GammaBound {
    pub lambda: f64,
    pub epoch: usize,
    pub layer: usize,
}

/// Evaluates the closed-form bound for a GCN layer.
///
/// `z_prev` is the layer input `Z_{ℓ-1}`, `w` the layer's weights, `y`
/// the one-hot labels. The softmax output is validated to be
/// row-stochastic; anything else (NaNs from divergent weights) is an
/// error rather than a silent zero.
pub fn gamma_bound(
    z_prev: &Array2<f64>,
    w: &Array2<f64>,
    lap: &Laplacian,
    y: &Array2<f64>,
    eta: f64,
    epoch: usize,
    layer: usize,
) -> Result<GammaBound> {
    let n = z_prev.nrows();
    if lap.matrix().nrows() != n || y.nrows() != n {
        return Err(Error::Dimension(format!(
            "gamma_bound shapes disagree: Z has {n} rows, L {}, Y {}",
            lap.matrix().nrows(),
            y.nrows()
        )));
    }
    if z_prev.ncols() != w.nrows() {
        return Err(Error::Dimension(format!(
            "Z has {} columns but W has {} rows",
            z_prev.ncols(),
            w.nrows()
        )));
    }
    if w.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "W has {} columns but Y has {}",
            w.ncols(),
            y.ncols()
        )));
    }

    let logits = lap.matmul_dense(&z_prev.view()).dot(w);
    let output = softmax_rows(&logits);
    for (i, row) in output.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if !(sum.is_finite() && (sum - 1.0).abs() <= 1e-8) {
            return Err(Error::Config(format!(
                "output row {i} is not stochastic (sum {sum})"
            )));
        }
    }

    // P = L Z Zᵀ L, then row norms of P (O - Y)
    let zzt = z_prev.dot(&z_prev.t());
    let left = lap.matmul_dense(&zzt.view());
    // right-multiplication by L via (Lᵀ · leftᵀ)ᵀ
    let mp = lap.t_matmul_dense(&left.t().to_owned().view()).t().to_owned();
    let diff = &output - y;
    let rows = mp.dot(&diff);
    let max_sq = rows
        .rows()
        .into_iter()
        .map(|r| r.dot(&r))
        .fold(0.0f64, f64::max);
    Ok(GammaBound {
        lambda: eta * eta * max_sq,
        epoch,
        layer,
    })
}
