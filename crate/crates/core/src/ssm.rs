//! Scalar-decay state space models in three equivalent forms.
//!
//! * the linear-time recurrence `h_t = A_t h_{t-1} + B_t x_t`, `y_t = C_tᵀ h_t`
//!   with `h_{-1} = 0` ([`ssm_scan`]);
//! * the quadratic semiseparable matrix `M = L ∘ (C Bᵀ)` with
//!   `L_{t,s} = A_t A_{t-1} ⋯ A_{s+1}` for `t ≥ s` ([`materialize_m`]);
//! * causal linear attention `Y = (tril(1) ∘ Q Kᵀ) V` ([`masked_linear_attention`]),
//!   which the first two reduce to when every `A_t = 1`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest sequence length for which the `T × T` matrix is materialized.
pub const MAX_MATERIALIZE_T: usize = 4096;

/// One single-channel selective-scan invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmSequence {
    /// Per-step scalar decay, length `T`.
    pub a: Vec<f64>,
    /// Input projections, `[T, N]`.
    pub b: Tensor,
    /// Output projections, `[T, N]`.
    pub c: Tensor,
    /// Inputs, length `T`.
    pub x: Vec<f64>,
}

impl SsmSequence {
    pub fn new(a: Vec<f64>, b: Tensor, c: Tensor, x: Vec<f64>) -> Result<Self> {
        let seq = Self { a, b, c, x };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.a.len();
        if t == 0 {
            return Err(Error::invalid("ssm sequence must have T >= 1"));
        }
        if self.b.ndim() != 2 || self.b.shape()[0] != t {
            return Err(Error::shape("ssm B", &[t], self.b.shape()));
        }
        if self.c.shape() != self.b.shape() {
            return Err(Error::shape("ssm C", self.b.shape(), self.c.shape()));
        }
        if self.x.len() != t {
            return Err(Error::shape("ssm x", &[t], &[self.x.len()]));
        }
        let finite = self.a.iter().chain(&self.x).all(|v| v.is_finite())
            && self.b.is_finite()
            && self.c.is_finite();
        if !finite {
            return Err(Error::NonFinite("ssm sequence"));
        }
        Ok(())
    }
}

/// `M` and its decay mask `L`, both `T × T` and lower triangular.
#[derive(Clone, Debug)]
pub struct SemiseparableMatrix {
    pub m: Tensor,
    pub l: Tensor,
}

impl SemiseparableMatrix {
    /// `M · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let t = self.m.shape()[0];
        assert_eq!(x.len(), t, "matvec length mismatch");
        self.m
            .data()
            .chunks(t)
            .enumerate()
            .map(|(row, m)| m[..=row].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Causal linear-attention operands.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTriple {
    /// Queries, `[T, N]`.
    pub q: Tensor,
    /// Keys, `[T, N]`.
    pub k: Tensor,
    /// Values, length `T`.
    pub v: Vec<f64>,
}

impl AttentionTriple {
    pub fn new(q: Tensor, k: Tensor, v: Vec<f64>) -> Result<Self> {
        if q.ndim() != 2 || q.shape() != k.shape() || q.shape()[0] != v.len() {
            return Err(Error::shape("attention", q.shape(), k.shape()));
        }
        if !(q.is_finite() && k.is_finite() && v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("attention triple"));
        }
        Ok(Self { q, k, v })
    }
}

/// Extents of a batched scan: `T` steps, state size `N`, `P` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub t: usize,
    pub n: usize,
    pub p: usize,
}

impl ScanDims {
    /// Checks `a[T]`, `b[T, N]`, `c[T, N]`, `x[T, P]`.
    pub fn infer(a: &[usize], b: &[usize], c: &[usize], x: &[usize]) -> Result<Self> {
        let t = a.iter().product::<usize>();
        if a.len() != 1 || b.len() != 2 || b[0] != t || b != c || x.len() != 2 || x[0] != t {
            return Err(Error::invalid(format!(
                "ssm_scan shapes a{a:?} b{b:?} c{c:?} x{x:?} are inconsistent"
            )));
        }
        Ok(Self { t, n: b[1], p: x[1] })
    }
}

/// Recurrence over `P` channels. Returns `(y[T, P], h[T, P, N])`.
pub fn scan_forward(a: &[f64], b: &[f64], c: &[f64], x: &[f64], d: ScanDims) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { t, n, p } = d;
    let mut states = vec![0.0; t * p * n];
    let mut y = vec![0.0; t * p];
    let mut h = vec![0.0; p * n];
    for step in 0..t {
        let at = a[step];
        let bt = &b[step * n..(step + 1) * n];
        let ct = &c[step * n..(step + 1) * n];
        for ch in 0..p {
            let xv = x[step * p + ch];
            let hc = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                hc[j] = at * hc[j] + bt[j] * xv;
                acc += ct[j] * hc[j];
            }
            y[step * p + ch] = acc;
        }
        states[step * p * n..(step + 1) * p * n].copy_from_slice(&h);
    }
    (y, states)
}

/// Adjoints of [`scan_forward`].
pub struct ScanGrads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
}

/// Reverse sweep: the state adjoint obeys `g_t = C_t dy_t + A_{t+1} g_{t+1}`.
pub fn scan_backward(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    states: &[f64],
    dy: &[f64],
    d: ScanDims,
) -> ScanGrads {
    let ScanDims { t, n, p } = d;
    let mut ga = vec![0.0; t];
    let mut gb = vec![0.0; t * n];
    let mut gc = vec![0.0; t * n];
    let mut gx = vec![0.0; t * p];
    let mut g = vec![0.0; p * n];
    for step in (0..t).rev() {
        if step + 1 < t {
            let next_a = a[step + 1];
            g.iter_mut().for_each(|v| *v *= next_a);
        }
        let ct = &c[step * n..(step + 1) * n];
        let bt = &b[step * n..(step + 1) * n];
        let h = &states[step * p * n..(step + 1) * p * n];
        for ch in 0..p {
            let dyv = dy[step * p + ch];
            let gcb = &mut g[ch * n..(ch + 1) * n];
            let hc = &h[ch * n..(ch + 1) * n];
            for j in 0..n {
                gcb[j] += dyv * ct[j];
                gc[step * n + j] += dyv * hc[j];
            }
        }
        let mut da = 0.0;
        if step > 0 {
            let prev = &states[(step - 1) * p * n..step * p * n];
            da = g.iter().zip(prev).map(|(u, v)| u * v).sum();
        }
        ga[step] = da;
        for ch in 0..p {
            let xv = x[step * p + ch];
            let gcb = &g[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                gb[step * n + j] += gcb[j] * xv;
                acc += gcb[j] * bt[j];
            }
            gx[step * p + ch] = acc;
        }
    }
    ScanGrads {
        a: ga,
        b: gb,
        c: gc,
        x: gx,
    }
}

/// Linear-time selective scan of one sequence.
pub fn ssm_scan(seq: &SsmSequence) -> Result<Vec<f64>> {
    seq.validate()?;
    let dims = ScanDims {
        t: seq.len(),
        n: seq.state_dim(),
        p: 1,
    };
    Ok(scan_forward(&seq.a, seq.b.data(), seq.c.data(), &seq.x, dims).0)
}

/// Builds `M_{t,s} = C_tᵀ A×_{t:s} B_s` and `L`, and checks `M = L ∘ (C Bᵀ)`.
pub fn materialize_m(seq: &SsmSequence) -> Result<SemiseparableMatrix> {
    seq.validate()?;
    let t = seq.len();
    if t > MAX_MATERIALIZE_T {
        return Err(Error::invalid(format!(
            "T = {t} exceeds the materialization limit {MAX_MATERIALIZE_T}"
        )));
    }
    let n = seq.state_dim();
    let (b, c) = (seq.b.data(), seq.c.data());
    let mut m = vec![0.0; t * t];
    let mut l = vec![0.0; t * t];
    let mut decayed = vec![0.0; n];
    for row in 0..t {
        let ct = &c[row * n..(row + 1) * n];
        let mut prod = 1.0;
        for col in (0..=row).rev() {
            if col < row {
                prod *= seq.a[col + 1];
            }
            l[row * t + col] = prod;
            let bs = &b[col * n..(col + 1) * n];
            decayed.iter_mut().zip(bs).for_each(|(d, bv)| *d = prod * bv);
            m[row * t + col] = ct.iter().zip(&decayed).map(|(u, v)| u * v).sum();
        }
    }
    for row in 0..t {
        let ct = &c[row * n..(row + 1) * n];
        for col in 0..=row {
            let cb: f64 = ct.iter().zip(&b[col * n..(col + 1) * n]).map(|(u, v)| u * v).sum();
            let factored = l[row * t + col] * cb;
            let direct = m[row * t + col];
            if (factored - direct).abs() > 1e-12 * direct.abs().max(1.0) {
                return Err(Error::Graph(format!(
                    "semiseparable factorization mismatch at ({row}, {col}): {direct} vs {factored}"
                )));
            }
        }
    }
    Ok(SemiseparableMatrix {
        m: Tensor::from_parts(vec![t, t], m),
        l: Tensor::from_parts(vec![t, t], l),
    })
}

/// `Y = (tril(1) ∘ Q Kᵀ) V`, evaluated directly in `O(T² N)`.
pub fn masked_linear_attention(att: &AttentionTriple) -> Vec<f64> {
    let t = att.v.len();
    let n = att.q.shape()[1];
    let (q, k) = (att.q.data(), att.k.data());
    (0..t)
        .map(|row| {
            let qt = &q[row * n..(row + 1) * n];
            (0..=row)
                .map(|col| {
                    let score: f64 = qt.iter().zip(&k[col * n..(col + 1) * n]).map(|(a, b)| a * b).sum();
                    score * att.v[col]
                })
                .sum()
        })
        .collect()
}

/// Reads a linear-attention triple as the unit-decay scan `C := Q, B := K, x := V`.
pub fn attention_as_sequence(att: &AttentionTriple) -> SsmSequence {
    SsmSequence {
        a: vec![1.0; att.v.len()],
        b: att.k.clone(),
        c: att.q.clone(),
        x: att.v.clone(),
    }
}

/// Random sequence for checks and benchmarks: decays in `(0, 1]`, other
/// entries standard normal.
pub fn random_sequence<R: rand::Rng>(t: usize, n: usize, rng: &mut R) -> SsmSequence {
    let a = (0..t).map(|_| rng.gen_range(0.5..=1.0)).collect();
    let b = Tensor::randn(&[t, n], rng);
    let c = Tensor::randn(&[t, n], rng);
    let x = Tensor::randn(&[t], rng).into_data();
    SsmSequence { a, b, c, x }
}

/// Worst-case discrepancies observed by [`duality_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct DualitySummary {
    pub cases: usize,
    pub max_scan_vs_matrix: f64,
    pub max_scan_vs_attention: f64,
}

/// Random `(A, B, C, x)` with `T <= max_t`, `N <= max_n`: compares the scan
/// with `M·x`, and with unit decay against masked linear attention.
pub fn duality_suite(cases: usize, max_t: usize, max_n: usize, seed: u64) -> Result<DualitySummary> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = DualitySummary {
        cases,
        max_scan_vs_matrix: 0.0,
        max_scan_vs_attention: 0.0,
    };
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    for _ in 0..cases {
        let t = rng.gen_range(1..=max_t);
        let n = rng.gen_range(1..=max_n);
        let seq = random_sequence(t, n, &mut rng);
        let y = ssm_scan(&seq)?;
        let ym = materialize_m(&seq)?.matvec(&seq.x);
        out.max_scan_vs_matrix = out.max_scan_vs_matrix.max(max_diff(&y, &ym));
        let att = AttentionTriple::new(seq.c.clone(), seq.b.clone(), seq.x.clone())?;
        let ya = masked_linear_attention(&att);
        let ys = ssm_scan(&attention_as_sequence(&att))?;
        out.max_scan_vs_attention = out.max_scan_vs_attention.max(max_diff(&ys, &ya));
    }
    Ok(out)
}
