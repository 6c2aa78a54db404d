//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a define-by-run computation graph; every constructor
//! computes its forward value immediately and [`Tape::backward`] replays the
//! graph in reverse, accumulating gradients. The op set is exactly what the
//! predictor and its regularized loss need: elementwise arithmetic, matrix
//! products, causal dilated convolution, per-row batch normalization, the
//! fading-variance diagonal and the Gram-matrix log-determinant.
//!
//! Scalars are 1x1 matrices; vectors are (n,1) or (1,n) matrices.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Result, StricError};
use crate::linalg;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Abs(usize),
    Recip(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    /// Sum of all entries -> 1x1.
    Sum(usize),
    /// x (m,n) + c (m,1), c broadcast across columns.
    AddCol(usize, usize),
    /// x (m,n) * c (m,1), c broadcast across columns.
    MulCol(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    StackRows(Vec<usize>),
    /// input (c_in,T) * weight (c_out, c_in*ksize), zero-padded causally.
    DilatedConv {
        input: usize,
        weight: usize,
        ksize: usize,
        dilation: usize,
    },
    /// Normalize each row to mean 0 / var 1 across columns.
    BatchNormRows {
        input: usize,
        xhat: Array2<f64>,
        invstd: Array1<f64>,
    },
    /// diag_m = kappa * lambda^(n-1-m): largest variance at the last index.
    FadingDiag {
        lambda: usize,
        kappa: usize,
        n: usize,
    },
    /// log det(F diag(d) F^T + eta2 I), with the inverse saved for backward.
    LogdetGram {
        f: usize,
        diag: usize,
        eta2: usize,
        sigma_inv: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of a node, zeros if the node did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.0[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a.0))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn add_col(&mut self, x: Var, c: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[c.0].value;
        debug_assert_eq!(cv.ncols(), 1);
        debug_assert_eq!(cv.nrows(), xv.nrows());
        let mut v = xv.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|e| e + cv[[i, 0]]);
        }
        self.push(v, Op::AddCol(x.0, c.0))
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[c.0].value;
        debug_assert_eq!(cv.ncols(), 1);
        debug_assert_eq!(cv.nrows(), xv.nrows());
        let mut v = xv.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|e| e * cv[[i, 0]]);
        }
        self.push(v, Op::MulCol(x.0, c.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Array2::zeros((m, total));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            debug_assert_eq!(pv.nrows(), m);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a.0, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, start, len))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut v = Array2::zeros((total, n));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            debug_assert_eq!(pv.ncols(), n);
            v.slice_mut(s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(v, Op::StackRows(parts.iter().map(|p| p.0).collect()))
    }

    /// Causal dilated 1-D convolution: out[o,t] = sum_{c,i} w[o,c*k+i] * x[c,t-i*d],
    /// with x treated as zero for negative time indices.
    pub fn dilated_causal_conv(&mut self, input: Var, weight: Var, ksize: usize, dilation: usize) -> Var {
        let v = dilated_conv_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            ksize,
            dilation,
        );
        self.push(
            v,
            Op::DilatedConv {
                input: input.0,
                weight: weight.0,
                ksize,
                dilation,
            },
        )
    }

    /// Normalize each row of `input` to mean 0 / variance 1 across columns.
    /// Returns the normalized matrix plus the per-row (mean, var) used.
    pub fn batch_norm_rows(&mut self, input: Var, eps: f64) -> (Var, Array1<f64>, Array1<f64>) {
        let x = &self.nodes[input.0].value;
        let (m, n) = x.dim();
        let mut means = Array1::zeros(m);
        let mut vars = Array1::zeros(m);
        let mut invstd = Array1::zeros(m);
        let mut xhat = Array2::zeros((m, n));
        for i in 0..m {
            let row = x.row(i);
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            means[i] = mu;
            vars[i] = var;
            invstd[i] = is;
            for j in 0..n {
                xhat[[i, j]] = (x[[i, j]] - mu) * is;
            }
        }
        let var = self.push(
            xhat.clone(),
            Op::BatchNormRows {
                input: input.0,
                xhat,
                invstd,
            },
        );
        (var, means, vars)
    }

    /// Fading-variance diagonal: entry m is kappa * lambda^(n-1-m), so the
    /// largest variance sits at the most recent (last) index.
    pub fn fading_diag(&mut self, lambda: Var, kappa: Var, n: usize) -> Var {
        let lam = self.scalar_value(lambda);
        let kap = self.scalar_value(kappa);
        let log_lam = lam.ln();
        let log_kap = kap.ln();
        let mut v = Array2::zeros((n, 1));
        for m in 0..n {
            v[[m, 0]] = (log_kap + (n - 1 - m) as f64 * log_lam).exp();
        }
        self.push(
            v,
            Op::FadingDiag {
                lambda: lambda.0,
                kappa: kappa.0,
                n,
            },
        )
    }

    /// log det(F diag(d) F^T + eta2 I) for F (n_f, n_p), d (n_p, 1), eta2 (1,1).
    ///
    /// The factorization retries once with a jitter of 1e-8 * trace / n_f on
    /// the diagonal before reporting a numeric error.
    pub fn logdet_gram(&mut self, f: Var, diag: Var, eta2: Var) -> Result<Var> {
        let fv = &self.nodes[f.0].value;
        let dv = &self.nodes[diag.0].value;
        let e2 = self.scalar_value(eta2);
        let (logdet, sigma_inv) = logdet_gram_forward(fv, dv, e2)?;
        Ok(self.push(
            Array2::from_elem((1, 1), logdet),
            Op::LogdetGram {
                f: f.0,
                diag: diag.0,
                eta2: eta2.0,
                sigma_inv,
            },
        ))
    }

    /// Reverse pass from a 1x1 root node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for the caller
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.mapv(|x| x * c)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::Abs(a) => {
                    let sign = self.nodes[*a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, &g * &sign);
                }
                Op::Recip(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, &g * &av.mapv(|x| -1.0 / (x * x)));
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, &g * &av.mapv(|x| 1.0 / x));
                }
                Op::Sigmoid(a) => {
                    let ds = node.value.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, &g * &ds);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::AddCol(x, c) => {
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *c, gc);
                }
                Op::MulCol(x, c) => {
                    let xv = &self.nodes[*x].value;
                    let cv = &self.nodes[*c].value;
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|e| e * cv[[i, 0]]);
                    }
                    let gc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *c, gc);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        acc(&mut grads, *p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    ga.slice_mut(s![.., *start..start + len]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    ga.slice_mut(s![*start..start + len, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = self.nodes[*p].value.nrows();
                        acc(&mut grads, *p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::DilatedConv {
                    input,
                    weight,
                    ksize,
                    dilation,
                } => {
                    let xv = &self.nodes[*input].value;
                    let wv = &self.nodes[*weight].value;
                    let (gx, gw) = dilated_conv_backward(xv, wv, &g, *ksize, *dilation);
                    acc(&mut grads, *input, gx);
                    acc(&mut grads, *weight, gw);
                }
                Op::BatchNormRows { input, xhat, invstd } => {
                    let (m, n) = g.dim();
                    let nf = n as f64;
                    let mut gx = Array2::zeros((m, n));
                    for r in 0..m {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..n {
                            sum_g += g[[r, j]];
                            sum_gx += g[[r, j]] * xhat[[r, j]];
                        }
                        for j in 0..n {
                            gx[[r, j]] = invstd[r] / nf
                                * (nf * g[[r, j]] - sum_g - xhat[[r, j]] * sum_gx);
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::FadingDiag { lambda, kappa, n } => {
                    let lam = self.nodes[*lambda].value[[0, 0]];
                    let kap = self.nodes[*kappa].value[[0, 0]];
                    let mut dlam = 0.0;
                    let mut dkap = 0.0;
                    for m in 0..*n {
                        let d = node.value[[m, 0]];
                        let j = (*n - 1 - m) as f64;
                        dlam += g[[m, 0]] * d * j / lam;
                        dkap += g[[m, 0]] * d / kap;
                    }
                    acc(&mut grads, *lambda, Array2::from_elem((1, 1), dlam));
                    acc(&mut grads, *kappa, Array2::from_elem((1, 1), dkap));
                }
                Op::LogdetGram {
                    f,
                    diag,
                    eta2,
                    sigma_inv,
                } => {
                    let gs = g[[0, 0]];
                    let fv = &self.nodes[*f].value;
                    let dv = &self.nodes[*diag].value;
                    let (n_f, n_p) = fv.dim();
                    // S = Sigma^{-1} F
                    let sf = sigma_inv.dot(fv);
                    let mut gf = Array2::zeros((n_f, n_p));
                    let mut gd = Array2::zeros((n_p, 1));
                    for m in 0..n_p {
                        let mut quad = 0.0;
                        for r in 0..n_f {
                            gf[[r, m]] = gs * 2.0 * sf[[r, m]] * dv[[m, 0]];
                            quad += fv[[r, m]] * sf[[r, m]];
                        }
                        gd[[m, 0]] = gs * quad;
                    }
                    let trace: f64 = sigma_inv.diag().sum();
                    acc(&mut grads, *f, gf);
                    acc(&mut grads, *diag, gd);
                    acc(&mut grads, *eta2, Array2::from_elem((1, 1), gs * trace));
                }
            }
        }
        Gradients(grads)
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, delta: Array2<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn dilated_conv_forward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    ksize: usize,
    dilation: usize,
) -> Array2<f64> {
    let (c_in, t_len) = x.dim();
    let c_out = w.nrows();
    debug_assert_eq!(w.ncols(), c_in * ksize);
    let mut out = Array2::zeros((c_out, t_len));
    for o in 0..c_out {
        for c in 0..c_in {
            let xr = x.row(c);
            for i in 0..ksize {
                let wv = w[[o, c * ksize + i]];
                if wv == 0.0 {
                    continue;
                }
                let off = i * dilation;
                if off >= t_len {
                    continue;
                }
                let mut or = out.row_mut(o);
                for t in off..t_len {
                    or[t] += wv * xr[t - off];
                }
            }
        }
    }
    out
}

fn dilated_conv_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    g: &Array2<f64>,
    ksize: usize,
    dilation: usize,
) -> (Array2<f64>, Array2<f64>) {
    let (c_in, t_len) = x.dim();
    let c_out = w.nrows();
    let mut gx = Array2::zeros((c_in, t_len));
    let mut gw = Array2::zeros((c_out, c_in * ksize));
    for o in 0..c_out {
        let gr = g.row(o);
        for c in 0..c_in {
            let xr = x.row(c);
            let mut gxr_row = gx.row_mut(c);
            for i in 0..ksize {
                let off = i * dilation;
                if off >= t_len {
                    continue;
                }
                let wv = w[[o, c * ksize + i]];
                let mut acc_w = 0.0;
                for t in off..t_len {
                    let gt = gr[t];
                    acc_w += gt * xr[t - off];
                    gxr_row[t - off] += gt * wv;
                }
                gw[[o, c * ksize + i]] += acc_w;
            }
        }
    }
    (gx, gw)
}

pub(crate) fn logdet_gram_forward(
    f: &Array2<f64>,
    diag: &Array2<f64>,
    eta2: f64,
) -> Result<(f64, Array2<f64>)> {
    let (n_f, n_p) = f.dim();
    debug_assert_eq!(diag.dim(), (n_p, 1));
    let mut sigma = Array2::zeros((n_f, n_f));
    for r in 0..n_f {
        for c in 0..=r {
            let mut sgm = 0.0;
            for m in 0..n_p {
                sgm += f[[r, m]] * diag[[m, 0]] * f[[c, m]];
            }
            sigma[[r, c]] = sgm;
            sigma[[c, r]] = sgm;
        }
    }
    for r in 0..n_f {
        sigma[[r, r]] += eta2;
    }
    let factor = match linalg::cholesky(&sigma) {
        Ok(l) => l,
        Err(_) => {
            let jitter = 1e-8 * sigma.diag().sum() / n_f as f64;
            for r in 0..n_f {
                sigma[[r, r]] += jitter;
            }
            linalg::cholesky(&sigma).map_err(|_| {
                StricError::numeric("log-det factorization failed even with jitter")
            })?
        }
    };
    let logdet = linalg::logdet_from_factor(&factor);
    let sigma_inv = linalg::spd_inverse_from_factor(&factor);
    Ok((logdet, sigma_inv))
}
