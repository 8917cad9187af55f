//! Row-major dense kernels used by the hand-written networks.
//!
//! Shapes are passed explicitly; `a` is `n×k`, `b` is `k×m`, results `n×m`.

/// `out = a · b (+ bias)`.
pub fn matmul_bias(a: &[f64], b: &[f64], bias: Option<&[f64]>, out: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for r in 0..n {
        let row = &mut out[r * m..(r + 1) * m];
        match bias {
            Some(bias) => row.copy_from_slice(bias),
            None => row.fill(0.0),
        }
        let ar = &a[r * k..(r + 1) * k];
        for (j, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[j * m..(j + 1) * m];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

/// `grad += aᵀ · d` where `a` is `n×k` and `d` is `n×m`; `grad` is `k×m`.
pub fn acc_at_b(a: &[f64], d: &[f64], grad: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let ar = &a[r * k..(r + 1) * k];
        let dr = &d[r * m..(r + 1) * m];
        for (j, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let g = &mut grad[j * m..(j + 1) * m];
            for (gv, &dv) in g.iter_mut().zip(dr) {
                *gv += av * dv;
            }
        }
    }
}

/// `out += d · bᵀ` where `d` is `n×m` and `b` is `k×m`; `out` is `n×k`.
pub fn acc_a_bt(d: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let dr = &d[r * m..(r + 1) * m];
        let o = &mut out[r * k..(r + 1) * k];
        for (j, ov) in o.iter_mut().enumerate() {
            let br = &b[j * m..(j + 1) * m];
            *ov += dr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Column sums of an `n×m` matrix accumulated into `out`.
pub fn acc_col_sum(d: &[f64], out: &mut [f64], n: usize, m: usize) {
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(&d[r * m..(r + 1) * m]) {
            *o += v;
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Layer normalization over rows of width `d`. Returns normalized rows
/// (before gain/bias) and the reciprocal standard deviations.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], xhat: &mut [f64], rstd: &mut [f64], d: usize) {
    const EPS: f64 = 1e-5;
    for (r, rs) in rstd.iter_mut().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        *rs = 1.0 / (var + EPS).sqrt();
        for j in 0..d {
            let xh = (row[j] - mean) * *rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
}

/// Backward of [`layer_norm`]: accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in rstd.iter().enumerate() {
        let go = &dout[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += go[j] * xh[j];
            dbias[j] += go[j];
            dxhat[j] = go[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}
