//! Brute-force reference implementations shared by the integration tests.
//! Each one takes a different route from the library code: subset
//! enumeration instead of sorting, path enumeration instead of the
//! recursion, explicit loops instead of matrix products.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};

/// Sparsemax by trying every nonempty support set and keeping the one whose
/// threshold is self-consistent.
pub fn sparsemax_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!((1..=16).contains(&n));
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|j| mask >> j & 1 == 1).collect();
        let tau = (members.iter().map(|&j| z[j]).sum::<f64>() - 1.0) / members.len() as f64;
        let consistent = (0..n).all(|j| {
            let inside = mask >> j & 1 == 1;
            if inside {
                z[j] > tau
            } else {
                z[j] <= tau
            }
        });
        if consistent {
            return z.iter().map(|&x| (x - tau).max(0.0)).collect();
        }
    }
    panic!("no consistent support for {z:?}");
}

/// 1.5-entmax by support enumeration: on support `S`, `Σ (z_j/2 − τ)² = 1`
/// is a quadratic in τ whose smaller root is the threshold.
pub fn entmax15_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    assert!((1..=16).contains(&n));
    let a: Vec<f64> = z.iter().map(|x| x / 2.0).collect();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|j| mask >> j & 1 == 1).collect();
        let k = members.len() as f64;
        let s1: f64 = members.iter().map(|&j| a[j]).sum();
        let s2: f64 = members.iter().map(|&j| a[j] * a[j]).sum();
        let disc = s1 * s1 - k * (s2 - 1.0);
        if disc < 0.0 {
            continue;
        }
        let tau = (s1 - disc.sqrt()) / k;
        let consistent = (0..n).all(|j| if mask >> j & 1 == 1 { a[j] > tau } else { a[j] <= tau });
        if consistent {
            return a.iter().map(|&x| (x - tau).max(0.0).powi(2)).collect();
        }
    }
    panic!("no consistent support for {z:?}");
}

/// Textbook softmax with max subtraction.
pub fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Marginal alignment probabilities by enumerating every scan outcome.
///
/// Step `i` scans frames from where step `i − 1` stopped (frame 0 for the
/// first step) and stops at the first frame whose coin fires. A step that
/// runs past the last frame ends the scan for all later steps. Returns
/// `Pr(t_i = j)` and the probability that step `i` found nothing.
pub fn alignment_by_enumeration(p: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (u, s) = p.dim();
    let mut a = Array2::zeros((u, s));
    let mut none = vec![0.0; u];
    fn walk(p: ArrayView2<f64>, i: usize, start: usize, mass: f64, a: &mut Array2<f64>, none: &mut [f64]) {
        let (u, s) = p.dim();
        if i == u {
            return;
        }
        let mut pass = 1.0;
        for j in start..s {
            let stop = mass * pass * p[[i, j]];
            a[[i, j]] += stop;
            walk(p, i + 1, j, stop, a, none);
            pass *= 1.0 - p[[i, j]];
        }
        // nothing fired: this and every later step are exhausted
        for slot in none.iter_mut().skip(i) {
            *slot += mass * pass;
        }
    }
    walk(p, 0, 0, 1.0, &mut a, &mut none);
    (a, none)
}

/// Dense multi-head softmax attention evaluated entry by entry:
/// `concat_h softmax(x Wq_h (x Wk_h)ᵀ / √d_k) x Wv_h`, then `· Wo`.
pub fn dense_attention_oracle(
    x: ArrayView2<f64>,
    wq: &[Array2<f64>],
    wk: &[Array2<f64>],
    wv: &[Array2<f64>],
    wo: ArrayView2<f64>,
) -> Array2<f64> {
    let t = x.nrows();
    let heads = wq.len();
    let matmul = |a: ArrayView2<f64>, b: ArrayView2<f64>| {
        let mut out = Array2::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = 0.0;
                for k in 0..a.ncols() {
                    acc += a[[i, k]] * b[[k, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };
    let dv = wv[0].ncols();
    let mut concat = Array2::zeros((t, heads * dv));
    for h in 0..heads {
        let q = matmul(x, wq[h].view());
        let k = matmul(x, wk[h].view());
        let v = matmul(x, wv[h].view());
        let dk = q.ncols() as f64;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..q.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / dk.sqrt())
                .collect();
            let w = softmax_oracle(&scores);
            for c in 0..dv {
                concat[[i, h * dv + c]] = (0..t).map(|j| w[j] * v[[j, c]]).sum();
            }
        }
    }
    matmul(concat.view(), wo)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn support_of(p: &[f64]) -> Vec<usize> {
    (0..p.len()).filter(|&j| p[j] > 0.0).collect()
}
