//! Row-major `f64` matrix multiply.
//!
//! Every output element is accumulated as `madd(a[i,k-1], b[k-1,j], ... madd(a[i,0], b[0,j], c))`
//! with the inner index strictly ascending, so results are bit-identical to the textbook
//! triple loop written with [`madd`], regardless of the blocking used here.

const MR: usize = 6;
const NR: usize = 16;
const KC: usize = 256;
const NC: usize = 2048;

/// `c + a * b`, fused (single rounding) when the target has FMA instructions.
#[inline(always)]
pub fn madd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        c + a * b
    }
}

/// `c = a * b` (or `c += a * b` when `accumulate`), with `a: m x k`, `b: k x n`, `c: m x n`.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm_ex(false, false, m, n, k, a, b, c, accumulate);
}

/// [`gemm`] with optionally transposed operands: `a` is stored `k x m` when `trans_a` and `b`
/// is stored `n x k` when `trans_b`. The accumulation order is the same as for [`gemm`].
#[allow(clippy::too_many_arguments)]
pub fn gemm_ex(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    let mut bpack = vec![0.0f64; KC * NC.min(n.div_ceil(NR) * NR)];
    let mut apack = vec![0.0f64; KC * MR];
    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        for jc in (0..n).step_by(NC) {
            let nc = NC.min(n - jc);
            let nblocks = nc.div_ceil(NR);
            pack_b(b, trans_b, n, k, pc, kc, jc, nc, &mut bpack);
            for ic in (0..m).step_by(MR) {
                let mr = MR.min(m - ic);
                pack_a(a, trans_a, m, k, ic, mr, pc, kc, &mut apack);
                for jb in 0..nblocks {
                    let j0 = jc + jb * NR;
                    let nr = NR.min(n - j0);
                    let panel = &bpack[jb * kc * NR..(jb + 1) * kc * NR];
                    let mut acc = [[0.0f64; NR]; MR];
                    for (ii, row) in acc.iter_mut().enumerate().take(mr) {
                        row[..nr].copy_from_slice(&c[(ic + ii) * n + j0..(ic + ii) * n + j0 + nr]);
                    }
                    kernel(&apack[..kc * MR], panel, &mut acc);
                    for (ii, row) in acc.iter().enumerate().take(mr) {
                        c[(ic + ii) * n + j0..(ic + ii) * n + j0 + nr].copy_from_slice(&row[..nr]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pack_b(
    b: &[f64],
    trans: bool,
    n: usize,
    k: usize,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
    out: &mut [f64],
) {
    let nblocks = nc.div_ceil(NR);
    for jb in 0..nblocks {
        let j0 = jc + jb * NR;
        let nr = NR.min(jc + nc - j0);
        let dst = &mut out[jb * kc * NR..(jb + 1) * kc * NR];
        if trans {
            for jj in 0..NR {
                if jj < nr {
                    let col = &b[(j0 + jj) * k + pc..(j0 + jj) * k + pc + kc];
                    for (p, &v) in col.iter().enumerate() {
                        dst[p * NR + jj] = v;
                    }
                } else {
                    for p in 0..kc {
                        dst[p * NR + jj] = 0.0;
                    }
                }
            }
        } else {
            for p in 0..kc {
                let row = &b[(pc + p) * n + j0..(pc + p) * n + j0 + nr];
                let d = &mut dst[p * NR..(p + 1) * NR];
                d[..nr].copy_from_slice(row);
                d[nr..].fill(0.0);
            }
        }
    }
}

/// Interleaves `mr` rows of `a` so that column `p` of the block is contiguous; missing rows
/// are zero.
#[allow(clippy::too_many_arguments)]
fn pack_a(
    a: &[f64],
    trans: bool,
    m: usize,
    k: usize,
    i0: usize,
    mr: usize,
    pc: usize,
    kc: usize,
    out: &mut [f64],
) {
    if trans {
        for p in 0..kc {
            let src = &a[(pc + p) * m + i0..(pc + p) * m + i0 + mr];
            let d = &mut out[p * MR..(p + 1) * MR];
            d[..mr].copy_from_slice(src);
            d[mr..].fill(0.0);
        }
        return;
    }
    for ii in 0..MR {
        if ii < mr {
            let row = &a[(i0 + ii) * k + pc..(i0 + ii) * k + pc + kc];
            for (p, &v) in row.iter().enumerate() {
                out[p * MR + ii] = v;
            }
        } else {
            for p in 0..kc {
                out[p * MR + ii] = 0.0;
            }
        }
    }
}

#[inline(always)]
fn kernel(apanel: &[f64], bpanel: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in apanel.chunks_exact(MR).zip(bpanel.chunks_exact(NR)) {
        let av: &[f64; MR] = av.try_into().unwrap();
        let bv: &[f64; NR] = bv.try_into().unwrap();
        for ii in 0..MR {
            for jj in 0..NR {
                acc[ii][jj] = madd(av[ii], bv[jj], acc[ii][jj]);
            }
        }
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s = madd(a[i * k + p], b[p * n + j], s);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut x = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                x = x
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn bit_identical_to_triple_loop_across_block_edges() {
        for &(m, n, k) in &[
            (1, 1, 1),
            (3, 17, 5),
            (4, 16, 256),
            (7, 33, 300),
            (13, 2050, 9),
            (16, 100, 513),
            (9, 15, 2),
        ] {
            let a = pseudo(m * k, 1);
            let b = pseudo(k * n, 2);
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, &a, &b, &mut c, false);
            assert_eq!(c, naive(m, n, k, &a, &b), "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn transposed_operands_match_plain() {
        for &(m, n, k) in &[(3, 17, 5), (7, 33, 300), (20, 5, 9)] {
            let a = pseudo(m * k, 4);
            let b = pseudo(k * n, 5);
            let (mut at, mut bt) = (vec![0.0; m * k], vec![0.0; k * n]);
            transpose(m, k, &a, &mut at);
            transpose(k, n, &b, &mut bt);
            let expect = naive(m, n, k, &a, &b);
            for (ta, tb) in [(true, false), (false, true), (true, true)] {
                let mut c = vec![0.0; m * n];
                let lhs = if ta { &at } else { &a };
                let rhs = if tb { &bt } else { &b };
                gemm_ex(ta, tb, m, n, k, lhs, rhs, &mut c, false);
                assert_eq!(c, expect, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn accumulate_adds_to_existing() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [1.0; 4];
        gemm(2, 2, 2, &a, &b, &mut c, true);
        assert_eq!(c, [2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let src = pseudo(35 * 70, 3);
        let mut t = vec![0.0; src.len()];
        let mut back = vec![0.0; src.len()];
        transpose(35, 70, &src, &mut t);
        transpose(70, 35, &t, &mut back);
        assert_eq!(src, back);
        assert_eq!(t[1 * 35 + 2], src[2 * 70 + 1]);
    }
}
