// Plain-slice numeric kernels. All accumulate into `out`.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let blocked = n / 4 * 4;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        // four rows of b per pass so each element of a_row is loaded once
        for j in (0..blocked).step_by(4) {
            let s = dot4(a_row, &b[j * k..(j + 4) * k], k);
            for (o, v) in o_row[j..j + 4].iter_mut().zip(s) {
                *o += v;
            }
        }
        for j in blocked..n {
            o_row[j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot products of `a` with four consecutive length-`k` rows of `b`.
fn dot4(a: &[f64], b: &[f64], k: usize) -> [f64; 4] {
    let (b0, rest) = b.split_at(k);
    let (b1, rest) = rest.split_at(k);
    let (b2, b3) = rest.split_at(k);
    let (a, b3) = (&a[..k], &b3[..k]);
    let mut s = [[0.0f64; 2]; 4];
    let pairs = k / 2 * 2;
    for p in (0..pairs).step_by(2) {
        for l in 0..2 {
            let x = a[p + l];
            s[0][l] += x * b0[p + l];
            s[1][l] += x * b1[p + l];
            s[2][l] += x * b2[p + l];
            s[3][l] += x * b3[p + l];
        }
    }
    let mut t = s.map(|v| v[0] + v[1]);
    for p in pairs..k {
        let x = a[p];
        t[0] += x * b0[p];
        t[1] += x * b1[p];
        t[2] += x * b2[p];
        t[3] += x * b3[p];
    }
    t
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent accumulators let the compiler keep the FPU busy.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
