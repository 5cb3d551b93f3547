//! Raw numeric kernels behind the tape operations.

/// `c ← a·b + beta·c` for an `m×k` by `k×n` product. Strides are given as
/// `(row, col)` in elements; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(max_a < a.len() && max_b < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv1d_forward(
    x: &[f64],
    rows: usize,
    t: usize,
    kernel: &[f64],
    filters: usize,
    s: usize,
    dilation: usize,
) -> Vec<f64> {
    let out_len = t - dilation * (s - 1);
    let mut out = vec![0.0; rows * filters * out_len];
    for r in 0..rows {
        let xr = &x[r * t..(r + 1) * t];
        for f in 0..filters {
            let kf = &kernel[f * s..(f + 1) * s];
            let o = &mut out[(r * filters + f) * out_len..(r * filters + f + 1) * out_len];
            for (i, &w) in kf.iter().enumerate() {
                let xs = &xr[i * dilation..i * dilation + out_len];
                for (oj, xj) in o.iter_mut().zip(xs) {
                    *oj += w * xj;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_input(
    gy: &[f64],
    kernel: &[f64],
    rows: usize,
    t: usize,
    filters: usize,
    s: usize,
    dilation: usize,
    gx: &mut [f64],
) {
    let out_len = t - dilation * (s - 1);
    for r in 0..rows {
        let gxr = &mut gx[r * t..(r + 1) * t];
        for f in 0..filters {
            let g = &gy[(r * filters + f) * out_len..(r * filters + f + 1) * out_len];
            for i in 0..s {
                let w = kernel[f * s + i];
                for (gxj, gj) in gxr[i * dilation..i * dilation + out_len].iter_mut().zip(g) {
                    *gxj += w * gj;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_kernel(
    gy: &[f64],
    x: &[f64],
    rows: usize,
    t: usize,
    filters: usize,
    s: usize,
    dilation: usize,
    gk: &mut [f64],
) {
    let out_len = t - dilation * (s - 1);
    for r in 0..rows {
        let xr = &x[r * t..(r + 1) * t];
        for f in 0..filters {
            let g = &gy[(r * filters + f) * out_len..(r * filters + f + 1) * out_len];
            for i in 0..s {
                let xs = &xr[i * dilation..i * dilation + out_len];
                gk[f * s + i] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Half-open `(start, end)` segments of `0..len` for adaptive pooling to
/// `pool` outputs: segment `i` is `floor(i·len/pool) .. floor((i+1)·len/pool)`.
pub fn pool_segments(len: usize, pool: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..pool).map(move |i| (i * len / pool, (i + 1) * len / pool))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
