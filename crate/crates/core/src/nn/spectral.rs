use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};

use super::Mode;
use crate::error::{Error, Result};

/// Floor applied to vector norms and to the singular-value estimate.
pub const SN_EPS: f64 = 1e-12;

/// Power-iteration rounds per training forward.
pub const TRAIN_POWER_ITERATIONS: usize = 1;

/// Removes the components of `w` along each (orthonormal) vector in `basis`.
fn orthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for q in basis {
        let c = q.dot(w);
        w.axpy(-c, q, 1.0);
    }
}

/// Top singular pair of `mat` estimated by `iterations` rounds of power
/// iteration started from `u0`, accelerated with Golub-Kahan-Lanczos
/// bidiagonalization. Each round costs one product with `W` and one with `Wᵀ`.
/// With a single round this is the usual `v = Wᵀu/‖·‖, u = Wv/‖·‖` step; more
/// rounds converge much faster than plain power iteration when the top two
/// singular values are close.
fn top_singular_pair(
    mat: &DMatrix<f64>,
    u0: &DVector<f64>,
    iterations: usize,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let u0_norm = u0.norm();
    if u0_norm < SN_EPS {
        return None;
    }
    let mut left = vec![u0 / u0_norm];
    let mut right: Vec<DVector<f64>> = Vec::new();
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    for _ in 0..iterations.max(1) {
        let mut v = mat.tr_mul(left.last().expect("nonempty"));
        orthogonalize(&mut v, &right);
        let alpha = v.norm();
        if alpha < SN_EPS {
            break;
        }
        right.push(v / alpha);
        alphas.push(alpha);
        let mut w = mat * right.last().expect("just pushed");
        orthogonalize(&mut w, &left);
        let beta = w.norm();
        betas.push(beta);
        if beta < SN_EPS {
            break;
        }
        left.push(w / beta);
    }
    let k = alphas.len();
    if k == 0 {
        return None;
    }
    // W V_k = U_{k+1} B_k with B_k lower bidiagonal, (k+1) x k
    let mut bidiag = DMatrix::<f64>::zeros(k + 1, k);
    for i in 0..k {
        bidiag[(i, i)] = alphas[i];
        bidiag[(i + 1, i)] = betas[i];
    }
    let svd = bidiag.svd(true, true);
    let top = svd.singular_values.imax();
    let p = svd.u.as_ref()?.column(top).into_owned();
    let q = svd.v_t.as_ref()?.row(top).transpose();
    let mut u_hat = DVector::<f64>::zeros(mat.nrows());
    for (i, ui) in left.iter().enumerate() {
        u_hat.axpy(p[i], ui, 1.0);
    }
    let mut v_hat = DVector::<f64>::zeros(mat.ncols());
    for (i, vi) in right.iter().enumerate() {
        v_hat.axpy(q[i], vi, 1.0);
    }
    // the singular vectors are defined up to a joint sign; keep uᵀWv >= 0
    if u_hat.dot(&(mat * &v_hat)) < 0.0 {
        v_hat = -v_hat;
    }
    Some((u_hat.normalize(), v_hat.normalize()))
}

/// Divides `weight` by an estimate of its largest singular value.
///
/// The kernel is viewed as a `[out, rest]` matrix. `u` (length `out`) is the
/// running left singular vector estimate and is replaced by the refined
/// estimate. With `iterations == 0` the stored `u` is used as is (one
/// `v = Wᵀu` projection, no update). The returned tensor stays attached to
/// `weight`: gradients flow through both the numerator and `σ = uᵀ W v`
/// with `u`, `v` held fixed. A zero weight is returned unchanged.
pub fn spectral_normalize(weight: &Tensor, u: &mut Tensor, iterations: usize) -> Result<Tensor> {
    let rows = *weight
        .dims()
        .first()
        .ok_or_else(|| Error::domain("spectral norm of a scalar"))?;
    if weight.rank() < 2 || u.dims() != [rows] {
        return Err(Error::domain(format!(
            "power-iteration vector of shape {:?} does not fit weight {:?}",
            u.dims(),
            weight.dims()
        )));
    }
    let mat = weight.reshape((rows, ()))?;
    let cols = mat.dim(1)?;
    let host = DMatrix::from_row_slice(
        rows,
        cols,
        &mat.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
    );
    let u_host = DVector::from_vec(u.to_dtype(DType::F64)?.to_vec1::<f64>()?);

    let (u_hat, v_hat) = if iterations == 0 {
        let v = host.tr_mul(&u_host);
        let norm = v.norm().max(SN_EPS);
        (u_host.clone(), v / norm)
    } else {
        match top_singular_pair(&host, &u_host, iterations) {
            Some(pair) => pair,
            None => return Ok(weight.clone()),
        }
    };
    let device = weight.device();
    let dtype = weight.dtype();
    let u_t = Tensor::from_slice(u_hat.as_slice(), (rows, 1), device)?.to_dtype(dtype)?;
    let v_t = Tensor::from_slice(v_hat.as_slice(), (cols, 1), device)?.to_dtype(dtype)?;
    if iterations > 0 {
        *u = u_t.reshape(rows)?;
    }
    let sigma = u_t.t()?.matmul(&mat.matmul(&v_t)?)?.reshape(())?;
    let sigma = sigma.maximum(SN_EPS)?;
    Ok(weight.broadcast_div(&sigma)?)
}

/// Spectral-norm wrapper state for one layer.
#[derive(Debug)]
pub struct SpectralNorm {
    u: Arc<Mutex<Tensor>>,
}

impl SpectralNorm {
    pub fn new(u: Tensor) -> Self {
        Self {
            u: Arc::new(Mutex::new(u)),
        }
    }

    pub(crate) fn state(&self) -> Arc<Mutex<Tensor>> {
        self.u.clone()
    }

    pub fn normalized(&self, weight: &Tensor, mode: Mode) -> Result<Tensor> {
        let iterations = match mode {
            Mode::Train => TRAIN_POWER_ITERATIONS,
            Mode::Eval | Mode::Frozen => 0,
        };
        let mut u = self.u.lock().expect("sn buffer lock");
        let mut next = u.clone();
        let out = spectral_normalize(weight, &mut next, iterations)?;
        if iterations > 0 {
            *u = next.detach();
        }
        Ok(out)
    }
}
