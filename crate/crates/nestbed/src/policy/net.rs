//! Dense and GRU primitives over flat parameter buffers, with hand-written
//! backward passes.
//!
//! Everything here is deliberately plain: row-major matrix-vector products,
//! explicit caches, and accumulate-into gradient buffers. The backward
//! functions each consume the cache their forward produced and add into a
//! gradient buffer laid out identically to the parameter buffer, so a whole
//! network backward pass is a sequence of these calls in reverse order.
//! Correctness is pinned by finite-difference tests at the policy level.

use super::arch::{DenseSpan, GruSpan};

/// `y = W x + b`; `w` row-major with `y.len()` rows.
pub(crate) fn dense_forward(span: &DenseSpan, params: &[f64], x: &[f64], y: &mut [f64]) {
    let w = span.w.slice(params);
    let b = span.b.slice(params);
    debug_assert_eq!(x.len(), span.nin);
    debug_assert_eq!(y.len(), span.nout);
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &w[i * span.nin..(i + 1) * span.nin];
        let mut acc = b[i];
        for (wj, xj) in row.iter().zip(x.iter()) {
            acc += wj * xj;
        }
        *yi = acc;
    }
}

/// Backward through `y = W x + b`: accumulates `dW += dy x^T`, `db += dy`,
/// and (when `dx` is given) `dx += W^T dy`.
pub(crate) fn dense_backward(
    span: &DenseSpan,
    params: &[f64],
    grads: &mut [f64],
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    {
        let dw = span.w.slice_mut(grads);
        for (i, dyi) in dy.iter().enumerate() {
            let drow = &mut dw[i * span.nin..(i + 1) * span.nin];
            for (dwj, xj) in drow.iter_mut().zip(x.iter()) {
                *dwj += dyi * xj;
            }
        }
    }
    {
        let db = span.b.slice_mut(grads);
        for (dbi, dyi) in db.iter_mut().zip(dy.iter()) {
            *dbi += dyi;
        }
    }
    if let Some(dx) = dx {
        let w = span.w.slice(params);
        for (i, dyi) in dy.iter().enumerate() {
            let row = &w[i * span.nin..(i + 1) * span.nin];
            for (dxj, wj) in dx.iter_mut().zip(row.iter()) {
                *dxj += wj * dyi;
            }
        }
    }
}

pub(crate) fn relu_inplace(y: &mut [f64]) {
    for v in y {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward through ReLU given the post-activation values.
pub(crate) fn relu_backward(post: &[f64], dy: &mut [f64]) {
    for (d, &p) in dy.iter_mut().zip(post.iter()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediates of one GRU step, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    pub rh: Vec<f64>,
}

fn gate(
    w: &[f64],
    u: &[f64],
    b: &[f64],
    nin: usize,
    nh: usize,
    x: &[f64],
    h: &[f64],
    out: &mut [f64],
) {
    for i in 0..nh {
        let wrow = &w[i * nin..(i + 1) * nin];
        let urow = &u[i * nh..(i + 1) * nh];
        let mut acc = b[i];
        for (wj, xj) in wrow.iter().zip(x.iter()) {
            acc += wj * xj;
        }
        for (uj, hj) in urow.iter().zip(h.iter()) {
            acc += uj * hj;
        }
        out[i] = acc;
    }
}

/// One GRU step:
///
/// ```text
/// r  = sigmoid(Wr x + Ur h + br)
/// u  = sigmoid(Wu x + Uu h + bu)
/// c  = tanh(Wc x + Uc (r . h) + bc)
/// h' = (1 - u) . h + u . c
/// ```
///
/// Returns `h'`; fills `cache` when the caller intends to run backward.
pub(crate) fn gru_forward(
    span: &GruSpan,
    params: &[f64],
    x: &[f64],
    h: &[f64],
    cache: Option<&mut Vec<GruCache>>,
) -> Vec<f64> {
    let nh = span.nh;
    let mut r = vec![0.0; nh];
    let mut u = vec![0.0; nh];
    let mut c = vec![0.0; nh];
    gate(
        span.wr.slice(params),
        span.ur.slice(params),
        span.br.slice(params),
        span.nin,
        nh,
        x,
        h,
        &mut r,
    );
    gate(
        span.wu.slice(params),
        span.uu.slice(params),
        span.bu.slice(params),
        span.nin,
        nh,
        x,
        h,
        &mut u,
    );
    for v in r.iter_mut().chain(u.iter_mut()) {
        *v = sigmoid(*v);
    }
    let rh: Vec<f64> = r.iter().zip(h.iter()).map(|(ri, hi)| ri * hi).collect();
    gate(
        span.wc.slice(params),
        span.uc.slice(params),
        span.bc.slice(params),
        span.nin,
        nh,
        x,
        &rh,
        &mut c,
    );
    for v in c.iter_mut() {
        *v = v.tanh();
    }
    let h_next: Vec<f64> = (0..nh).map(|i| (1.0 - u[i]) * h[i] + u[i] * c[i]).collect();
    if let Some(caches) = cache {
        caches.push(GruCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            r,
            u,
            c,
            rh,
        });
    }
    h_next
}

fn gate_backward(
    w: &(super::arch::Span, super::arch::Span, super::arch::Span),
    params: &[f64],
    grads: &mut [f64],
    nin: usize,
    nh: usize,
    x: &[f64],
    h: &[f64],
    da: &[f64],
    dx: &mut [f64],
    dh: &mut [f64],
) {
    let (ws, us, bs) = *w;
    {
        let dw = ws.slice_mut(grads);
        for (i, dai) in da.iter().enumerate() {
            let drow = &mut dw[i * nin..(i + 1) * nin];
            for (dwj, xj) in drow.iter_mut().zip(x.iter()) {
                *dwj += dai * xj;
            }
        }
    }
    {
        let du = us.slice_mut(grads);
        for (i, dai) in da.iter().enumerate() {
            let drow = &mut du[i * nh..(i + 1) * nh];
            for (duj, hj) in drow.iter_mut().zip(h.iter()) {
                *duj += dai * hj;
            }
        }
    }
    {
        let db = bs.slice_mut(grads);
        for (dbi, dai) in db.iter_mut().zip(da.iter()) {
            *dbi += dai;
        }
    }
    let wmat = ws.slice(params);
    for (i, dai) in da.iter().enumerate() {
        let row = &wmat[i * nin..(i + 1) * nin];
        for (dxj, wj) in dx.iter_mut().zip(row.iter()) {
            *dxj += wj * dai;
        }
    }
    let umat = us.slice(params);
    for (i, dai) in da.iter().enumerate() {
        let row = &umat[i * nh..(i + 1) * nh];
        for (dhj, uj) in dh.iter_mut().zip(row.iter()) {
            *dhj += uj * dai;
        }
    }
}

/// Backward through one GRU step. `dh_next` is the gradient flowing into
/// `h'`; returns `(dx, dh)` for the step's input and previous hidden state.
pub(crate) fn gru_backward(
    span: &GruSpan,
    params: &[f64],
    grads: &mut [f64],
    cache: &GruCache,
    dh_next: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nh = span.nh;
    let nin = span.nin;
    let mut dx = vec![0.0; nin];
    let mut dh = vec![0.0; nh];
    let mut dr = vec![0.0; nh];

    // h' = (1-u) h + u c
    let dc: Vec<f64> = (0..nh).map(|i| dh_next[i] * cache.u[i]).collect();
    let du: Vec<f64> = (0..nh)
        .map(|i| dh_next[i] * (cache.c[i] - cache.h_prev[i]))
        .collect();
    for i in 0..nh {
        dh[i] += dh_next[i] * (1.0 - cache.u[i]);
    }

    // Candidate gate; its hidden input is r . h.
    let da_c: Vec<f64> = (0..nh).map(|i| dc[i] * (1.0 - cache.c[i] * cache.c[i])).collect();
    let mut drh = vec![0.0; nh];
    gate_backward(
        &(span.wc, span.uc, span.bc),
        params,
        grads,
        nin,
        nh,
        &cache.x,
        &cache.rh,
        &da_c,
        &mut dx,
        &mut drh,
    );
    for i in 0..nh {
        dr[i] += drh[i] * cache.h_prev[i];
        dh[i] += drh[i] * cache.r[i];
    }

    // Update gate.
    let da_u: Vec<f64> = (0..nh)
        .map(|i| du[i] * cache.u[i] * (1.0 - cache.u[i]))
        .collect();
    gate_backward(
        &(span.wu, span.uu, span.bu),
        params,
        grads,
        nin,
        nh,
        &cache.x,
        &cache.h_prev,
        &da_u,
        &mut dx,
        &mut dh,
    );

    // Reset gate.
    let da_r: Vec<f64> = (0..nh)
        .map(|i| dr[i] * cache.r[i] * (1.0 - cache.r[i]))
        .collect();
    gate_backward(
        &(span.wr, span.ur, span.br),
        params,
        grads,
        nin,
        nh,
        &cache.x,
        &cache.h_prev,
        &da_r,
        &mut dx,
        &mut dh,
    );

    (dx, dh)
}
