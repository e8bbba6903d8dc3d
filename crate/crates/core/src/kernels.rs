//! Dense matrix-product kernels.
//!
//! Every kernel partitions work by output row and accumulates each output
//! element in the same fixed order, so the parallel and sequential paths give
//! bit-identical results. The parallel path is compiled in with the
//! `parallel` feature and only engaged above [`PAR_MIN_WORK`] multiply-adds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Multiply-add count below which the parallel path is not worth its overhead.
pub const PAR_MIN_WORK: usize = 1 << 15;

/// Execution strategy for a kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// The strategy picked for a kernel of `work` multiply-adds.
    pub fn auto(work: usize) -> Self {
        if cfg!(feature = "parallel") && work >= PAR_MIN_WORK {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Dimensions of a (possibly batched) product `[batch, p, q] x [batch?, q, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmDims {
    pub batch: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// Right operand is a single `[q, r]` matrix shared by every batch entry.
    pub shared_rhs: bool,
}

impl GemmDims {
    fn rhs_offset(&self, bt: usize) -> usize {
        if self.shared_rhs {
            0
        } else {
            bt * self.q * self.r
        }
    }

    pub fn work(&self) -> usize {
        self.batch * self.p * self.q * self.r
    }
}

fn for_each_row<F>(out: &mut [f64], row_len: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(row, chunk)| f(row, chunk)),
        _ => out
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(row, chunk)| f(row, chunk)),
    }
}

/// `out[b,i,j] = sum_k a[b,i,k] * rhs[b,k,j]`.
pub fn gemm_nn(a: &[f64], rhs: &[f64], dims: GemmDims, exec: Exec) -> Vec<f64> {
    let GemmDims { p, q, r, .. } = dims;
    let mut out = vec![0.0; dims.batch * p * r];
    for_each_row(&mut out, r, exec, |row, out_row| {
        let bt = row / p;
        let a_row = &a[row * q..(row + 1) * q];
        let rhs = &rhs[dims.rhs_offset(bt)..dims.rhs_offset(bt) + q * r];
        // Four k terms per pass; each element still accumulates in k order.
        let mut k = 0;
        while k + 4 <= q {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let r0 = &rhs[k * r..(k + 1) * r];
            let r1 = &rhs[(k + 1) * r..(k + 2) * r];
            let r2 = &rhs[(k + 2) * r..(k + 3) * r];
            let r3 = &rhs[(k + 3) * r..(k + 4) * r];
            for j in 0..r {
                let mut o = out_row[j];
                o += a0 * r0[j];
                o += a1 * r1[j];
                o += a2 * r2[j];
                o += a3 * r3[j];
                out_row[j] = o;
            }
            k += 4;
        }
        for k in k..q {
            let av = a_row[k];
            for (o, &bv) in out_row.iter_mut().zip(&rhs[k * r..(k + 1) * r]) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[b,i,k] = sum_j g[b,i,j] * rhs[b,k,j]` (gradient w.r.t. the left operand).
pub fn gemm_nt(g: &[f64], rhs: &[f64], dims: GemmDims, exec: Exec) -> Vec<f64> {
    let GemmDims { p, q, r, .. } = dims;
    let mut out = vec![0.0; dims.batch * p * q];
    for_each_row(&mut out, q, exec, |row, out_row| {
        let bt = row / p;
        let g_row = &g[row * r..(row + 1) * r];
        let rhs = &rhs[dims.rhs_offset(bt)..dims.rhs_offset(bt) + q * r];
        // Four independent dot products per pass, each summed in j order.
        let mut k = 0;
        while k + 4 <= q {
            let r0 = &rhs[k * r..(k + 1) * r];
            let r1 = &rhs[(k + 1) * r..(k + 2) * r];
            let r2 = &rhs[(k + 2) * r..(k + 3) * r];
            let r3 = &rhs[(k + 3) * r..(k + 4) * r];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..r {
                let gv = g_row[j];
                s0 += gv * r0[j];
                s1 += gv * r1[j];
                s2 += gv * r2[j];
                s3 += gv * r3[j];
            }
            out_row[k] = s0;
            out_row[k + 1] = s1;
            out_row[k + 2] = s2;
            out_row[k + 3] = s3;
            k += 4;
        }
        for k in k..q {
            let mut acc = 0.0;
            for (&gv, &bv) in g_row.iter().zip(&rhs[k * r..(k + 1) * r]) {
                acc += gv * bv;
            }
            out_row[k] = acc;
        }
    });
    out
}

/// `out[b?,k,j] = sum_i a[b,i,k] * g[b,i,j]` (gradient w.r.t. the right operand).
/// With a shared right operand the result is summed over the batch.
pub fn gemm_tn(a: &[f64], g: &[f64], dims: GemmDims, exec: Exec) -> Vec<f64> {
    let GemmDims { batch, p, q, r, .. } = dims;
    let out_batches = if dims.shared_rhs { 1 } else { batch };
    let mut out = vec![0.0; out_batches * q * r];
    for_each_row(&mut out, r, exec, |row, out_row| {
        let (ob, k) = (row / q, row % q);
        let batches = if dims.shared_rhs { 0..batch } else { ob..ob + 1 };
        // Rows i of every batch entry form one sequence; take them four at a
        // time, accumulating each element in sequence order.
        let n = batches.len() * p;
        let first = batches.start * p;
        let mut t = 0;
        while t + 4 <= n {
            let base = first + t;
            let (a0, a1, a2, a3) = (
                a[base * q + k],
                a[(base + 1) * q + k],
                a[(base + 2) * q + k],
                a[(base + 3) * q + k],
            );
            let g0 = &g[base * r..(base + 1) * r];
            let g1 = &g[(base + 1) * r..(base + 2) * r];
            let g2 = &g[(base + 2) * r..(base + 3) * r];
            let g3 = &g[(base + 3) * r..(base + 4) * r];
            for j in 0..r {
                let mut o = out_row[j];
                o += a0 * g0[j];
                o += a1 * g1[j];
                o += a2 * g2[j];
                o += a3 * g3[j];
                out_row[j] = o;
            }
            t += 4;
        }
        for t in t..n {
            let i = first + t;
            let av = a[i * q + k];
            for (o, &gv) in out_row.iter_mut().zip(&g[i * r..(i + 1) * r]) {
                *o += av * gv;
            }
        }
    });
    out
}
