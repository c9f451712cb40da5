//! Softmax along the middle axis of an `[outer, len, inner]` block. Loops run
//! over `inner` innermost so every pass is a contiguous sweep.

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut m = vec![0.0; inner];
    let mut z = vec![0.0; inner];
    for o in 0..outer {
        let xs = &x[o * len * inner..(o + 1) * len * inner];
        let ys = &mut out[o * len * inner..(o + 1) * len * inner];
        m.fill(f64::NEG_INFINITY);
        for row in xs.chunks_exact(inner) {
            m.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
        }
        z.fill(0.0);
        for (yr, xr) in ys.chunks_exact_mut(inner).zip(xs.chunks_exact(inner)) {
            for ((y, &v), (&mi, zi)) in yr.iter_mut().zip(xr).zip(m.iter().zip(z.iter_mut())) {
                *y = (v - mi).exp();
                *zi += *y;
            }
        }
        z.iter_mut().for_each(|v| *v = 1.0 / *v);
        for yr in ys.chunks_exact_mut(inner) {
            yr.iter_mut().zip(&z).for_each(|(y, r)| *y *= r);
        }
    }
    out
}

/// `dx = y ⊙ (dy − Σ_k dy ⊙ y)` given the forward output `y`.
pub fn softmax_backward(y: &[f64], dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let mut dot = vec![0.0; inner];
    for o in 0..outer {
        let span = o * len * inner..(o + 1) * len * inner;
        let (ys, gs) = (&y[span.clone()], &dy[span.clone()]);
        dot.fill(0.0);
        for (yr, gr) in ys.chunks_exact(inner).zip(gs.chunks_exact(inner)) {
            for ((d, a), b) in dot.iter_mut().zip(yr).zip(gr) {
                *d += a * b;
            }
        }
        for ((xr, yr), gr) in dx[span].chunks_exact_mut(inner).zip(ys.chunks_exact(inner)).zip(gs.chunks_exact(inner)) {
            for (((x, a), b), d) in xr.iter_mut().zip(yr).zip(gr).zip(&dot) {
                *x = a * (b - d);
            }
        }
    }
    dx
}
