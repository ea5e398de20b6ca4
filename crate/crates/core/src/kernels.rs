//! Hot numeric kernels behind the graph ops.
//!
//! Layout conventions: matrices are row-major `[rows, cols]`; feature maps are
//! channels-last `[H, W, C]`; convolution kernels are `[kh, kw, Cin/groups, Cout]`.
//! Inner loops run over the contiguous trailing dimension so the compiler can
//! vectorize them.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// dA[m,k] += dC[m,n] * B^T, i.e. dA[i,p] = sum_j dC[i,j] * B[p,j]
pub fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dc_row[j] * b_row[j];
            }
            da_row[p] += acc;
        }
    }
}

/// dB[k,n] += A^T * dC, i.e. dB[p,j] = sum_i A[i,p] * dC[i,j]
pub fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for p in 0..k {
            let av = a_row[p];
            if av == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                db_row[j] += av * dc_row[j];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Cross-correlation with zero padding. `x` is [H,W,Cin], `k` is
/// [kh,kw,Cin/groups,Cout], output is [oh,ow,Cout].
pub fn conv2d(x: &[f64], kern: &[f64], d: &ConvDims, out: &mut [f64]) {
    let cin_g = d.cin_g();
    let cout_g = d.cout_g();
    let depthwise = d.groups == d.cin && d.cout == d.cin;
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let out_px = &mut out[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let x_px = &x[(iy as usize * d.w + ix as usize) * d.cin..];
                    let k_base = (ky * d.kw + kx) * cin_g * d.cout;
                    if depthwise {
                        let k_px = &kern[k_base..k_base + d.cout];
                        for c in 0..d.cout {
                            out_px[c] += x_px[c] * k_px[c];
                        }
                    } else {
                        for g in 0..d.groups {
                            let co0 = g * cout_g;
                            for cl in 0..cin_g {
                                let xv = x_px[g * cin_g + cl];
                                if xv == 0.0 {
                                    continue;
                                }
                                let k_row = &kern[k_base + cl * d.cout + co0..];
                                let o_row = &mut out_px[co0..co0 + cout_g];
                                for co in 0..cout_g {
                                    o_row[co] += xv * k_row[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and kernel gradients for [`conv2d`]. Either output slice
/// may be empty to skip that side.
pub fn conv2d_grad(
    x: &[f64],
    kern: &[f64],
    d: &ConvDims,
    dout: &[f64],
    dx: &mut [f64],
    dk: &mut [f64],
) {
    let cin_g = d.cin_g();
    let cout_g = d.cout_g();
    let want_dx = !dx.is_empty();
    let want_dk = !dk.is_empty();
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let g_px = &dout[(oy * d.ow + ox) * d.cout..(oy * d.ow + ox + 1) * d.cout];
            for ky in 0..d.kh {
                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let px = (iy as usize * d.w + ix as usize) * d.cin;
                    let k_base = (ky * d.kw + kx) * cin_g * d.cout;
                    for g in 0..d.groups {
                        let co0 = g * cout_g;
                        let g_row = &g_px[co0..co0 + cout_g];
                        for cl in 0..cin_g {
                            let ci = g * cin_g + cl;
                            if want_dk {
                                let xv = x[px + ci];
                                if xv != 0.0 {
                                    let dk_row = &mut dk[k_base + cl * d.cout + co0
                                        ..k_base + cl * d.cout + co0 + cout_g];
                                    for co in 0..cout_g {
                                        dk_row[co] += xv * g_row[co];
                                    }
                                }
                            }
                            if want_dx {
                                let k_row = &kern
                                    [k_base + cl * d.cout + co0..k_base + cl * d.cout + co0 + cout_g];
                                let mut acc = 0.0;
                                for co in 0..cout_g {
                                    acc += k_row[co] * g_row[co];
                                }
                                dx[px + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact Gaussian-CDF GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x)
pub fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx swish(x) = s(x) * (1 + x * (1 - s(x)))
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}
