//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Nodes are appended to a [`Tape`] in evaluation order, so the tape itself is
//! a topological order of the graph and the backward pass is a single reverse
//! sweep. Column vectors are `n x 1` tensors and scalars are `1 x 1`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stable_dist::ps_log_density_fixed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(r: RawTensor) -> Result<Self> {
        Tensor::new(r.rows, r.cols, r.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "tensor data has {} entries, expected {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// The single entry of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// scalar times tensor
    Scale(usize, usize),
    AddConst(usize),
    MulConst(usize, f64),
    PowConst(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    ClampMin(usize, f64),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    /// `y_j = Σ_k w_jk^{1/α} z_k`
    Mix {
        w: usize,
        alpha: usize,
        z: usize,
        wpow: Vec<f64>,
        d_alpha: Vec<f64>,
    },
    /// Scalar-valued op with precomputed partials for each parent.
    Fused { parents: Vec<usize>, grads: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation graph. Single-threaded by design; build one tape
/// per independent computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn need_scalar(a: &Tensor, what: &str) -> Result<()> {
    if a.shape() != (1, 1) {
        return Err(Error::shape(format!("{what} expects a scalar, got {:?}", a.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.with_value(v, Tensor::clone)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with_value(v, |t| t.data[0])
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.with_value(v, Tensor::shape)
    }

    /// Input node. Gradients are reported for every leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn vector(&self, v: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(v))
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        same_shape(x, y, what)?;
        Ok(x.zip(y, f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.with_value(b, |t| t.data.iter().any(|&v| v == 0.0)) {
            return Err(Error::domain("division by zero"));
        }
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a.0, b.0)))
    }

    /// Scalar `s` times tensor `x`.
    pub fn scale(&self, s: Var, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            need_scalar(&nodes[s.0].value, "scale")?;
            let c = nodes[s.0].value.data[0];
            nodes[x.0].value.map(|v| c * v)
        };
        Ok(self.push(v, Op::Scale(s.0, x.0)))
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |t| t.map(|x| x + c));
        self.push(v, Op::AddConst(a.0))
    }

    pub fn mul_const(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |t| t.map(|x| x * c));
        self.push(v, Op::MulConst(a.0, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_const(a, -1.0)
    }

    pub fn pow_const(&self, a: Var, p: f64) -> Result<Var> {
        if self.with_value(a, |t| t.data.iter().any(|&v| !(v > 0.0))) {
            return Err(Error::domain("pow of a non-positive value"));
        }
        let v = self.with_value(a, |t| t.map(|x| x.powf(p)));
        Ok(self.push(v, Op::PowConst(a.0, p)))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with_value(a, |t| t.map(f64::exp));
        self.push(v, Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if self.with_value(a, |t| t.data.iter().any(|&v| !(v > 0.0))) {
            return Err(Error::domain("log of a non-positive value"));
        }
        let v = self.with_value(a, |t| t.map(f64::ln));
        Ok(self.push(v, Op::Log(a.0)))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with_value(a, |t| t.map(|x| if x > 0.0 { x } else { 0.0 }));
        self.push(v, Op::Relu(a.0))
    }

    /// `max(a, c)`; the gradient is passed only where `a > c`.
    pub fn clamp_min(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |t| t.map(|x| x.max(c)));
        self.push(v, Op::ClampMin(a.0, c))
    }

    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (m, v) = (&nodes[w.0].value, &nodes[x.0].value);
            if v.cols != 1 || m.cols != v.rows {
                return Err(Error::shape(format!(
                    "matvec: {:?} times {:?}",
                    m.shape(),
                    v.shape()
                )));
            }
            let out = m.data.chunks(m.cols).map(|row| row.iter().zip(&v.data).map(|(a, b)| a * b).sum()).collect();
            Tensor::vector(out)
        };
        Ok(self.push(v, Op::MatVec(w.0, x.0)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.cols != y.rows {
                return Err(Error::shape(format!("matmul: {:?} times {:?}", x.shape(), y.shape())));
            }
            matmul(x, y, false, false)
        };
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = self.with_value(a, |t| t.data.iter().sum());
        self.push(Tensor::scalar(v), Op::Sum(a.0))
    }

    /// Basis mixing `y_j = Σ_k w_jk^{1/α} z_k` for a `n x K` weight matrix with
    /// nonnegative entries, scalar `α` and `K`-vector `z`.
    pub fn mix(&self, w: Var, alpha: Var, z: Var) -> Result<Var> {
        let (value, wpow, d_alpha) = {
            let nodes = self.nodes.borrow();
            let (wm, a, zv) = (&nodes[w.0].value, &nodes[alpha.0].value, &nodes[z.0].value);
            need_scalar(a, "mix")?;
            if zv.cols != 1 || wm.cols != zv.rows {
                return Err(Error::shape(format!("mix: {:?} with {:?}", wm.shape(), zv.shape())));
            }
            if wm.data.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::domain("mixing weights must be nonnegative"));
            }
            let a = a.data[0];
            if !(a > 0.0) {
                return Err(Error::domain("mixing exponent must be positive"));
            }
            let k = wm.cols;
            let wpow: Vec<f64> = wm.data.iter().map(|&v| if v > 0.0 { (v.ln() / a).exp() } else { 0.0 }).collect();
            let mut y = vec![0.0; wm.rows];
            let mut da = vec![0.0; wm.rows];
            for j in 0..wm.rows {
                for kk in 0..k {
                    let p = wpow[j * k + kk];
                    if p > 0.0 {
                        let t = p * zv.data[kk];
                        y[j] += t;
                        da[j] -= t * wm.data[j * k + kk].ln() / (a * a);
                    }
                }
            }
            (Tensor::vector(y), wpow, da)
        };
        Ok(self.push(
            value,
            Op::Mix {
                w: w.0,
                alpha: alpha.0,
                z: z.0,
                wpow,
                d_alpha,
            },
        ))
    }

    /// Scalar node whose value and partials were computed outside the tape.
    pub fn fused(&self, value: f64, parents: &[Var], grads: Vec<Tensor>) -> Result<Var> {
        if parents.len() != grads.len() {
            return Err(Error::shape("fused op needs one gradient per parent"));
        }
        for (p, g) in parents.iter().zip(&grads) {
            if self.shape(*p) != g.shape() {
                return Err(Error::shape("fused op gradient shape differs from its parent"));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                parents: parents.iter().map(|p| p.0).collect(),
                grads,
            },
        ))
    }

    /// `Σ_k log H(z_k; α, α, θ_k)` for the exponentially tilted positive-stable
    /// density, with `z`, `θ` vectors and `α` scalar. The density integral uses
    /// a fixed node layout so the result differentiates as a finite sum.
    ///
    /// At `θ_k = 0` the `θ^α` term is not differentiable; its partial is taken
    /// as zero there.
    pub fn log_tilted_ps(&self, z: Var, alpha: Var, theta: Var) -> Result<Var> {
        let (zv, a, th) = (self.value(z), self.value(alpha), self.value(theta));
        need_scalar(&a, "log_tilted_ps")?;
        same_shape(&zv, &th, "log_tilted_ps")?;
        let a = a.data[0];
        let mut total = 0.0;
        let mut gz = vec![0.0; zv.len()];
        let mut gt = vec![0.0; zv.len()];
        let mut ga = 0.0;
        for k in 0..zv.len() {
            let (zk, tk) = (zv.data[k], th.data[k]);
            if !(tk >= 0.0) {
                return Err(Error::domain("tilting parameter must be nonnegative"));
            }
            let d = ps_log_density_fixed(zk, a)?;
            if !(d.value.is_finite() && d.d_x.is_finite() && d.d_alpha.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite latent prior at z={zk}, alpha={a}"
                )));
            }
            total += d.value - tk * zk;
            gz[k] = d.d_x - tk;
            ga += d.d_alpha;
            gt[k] = -zk;
            if tk > 0.0 {
                let ta = tk.powf(a);
                total += ta;
                gt[k] += a * ta / tk;
                ga += ta * tk.ln();
            }
        }
        if !total.is_finite() {
            return Err(Error::numerical("non-finite latent prior"));
        }
        let shape = zv.shape();
        self.fused(
            total,
            &[z, alpha, theta],
            vec![
                Tensor::new(shape.0, shape.1, gz)?,
                Tensor::scalar(ga),
                Tensor::new(shape.0, shape.1, gt)?,
            ],
        )
    }

    /// Fréchet log likelihood `Σ_j log f(x_j)` where `x_j` has shape `1/α₀`
    /// and scale `τ y_j^{α₀}`; `y` is a vector node, `ln τ` and `ln α₀` scalars.
    pub fn frechet_loglik(&self, x: &[f64], y: Var, ln_tau: Var, ln_alpha0: Var) -> Result<Var> {
        let (yv, lt, la) = (self.value(y), self.value(ln_tau), self.value(ln_alpha0));
        need_scalar(&lt, "frechet_loglik")?;
        need_scalar(&la, "frechet_loglik")?;
        if yv.cols != 1 || yv.rows != x.len() {
            return Err(Error::shape(format!(
                "frechet_loglik: {} observations for y of shape {:?}",
                x.len(),
                yv.shape()
            )));
        }
        let (lt, la) = (lt.data[0], la.data[0]);
        let a0 = la.exp();
        let mut total = 0.0;
        let mut gy = vec![0.0; x.len()];
        let mut g_lt = 0.0;
        let mut g_la = 0.0;
        for (j, (&xj, &yj)) in x.iter().zip(&yv.data).enumerate() {
            if !(yj > 0.0) {
                return Err(Error::numerical(format!("site {j} receives no mass from the latent mixture")));
            }
            if !(xj > 0.0) {
                return Err(Error::domain(format!("observation at site {j} must be positive")));
            }
            let ly = yj.ln();
            let l = xj.ln() - lt - a0 * ly;
            let e = (-l / a0).exp();
            total += -la - xj.ln() - l / a0 - e;
            let dl = (e - 1.0) / a0;
            gy[j] = -dl * a0 / yj;
            g_lt -= dl;
            let direct = -1.0 / a0 + l / (a0 * a0) * (1.0 - e);
            g_la += a0 * (direct - dl * ly);
        }
        if !total.is_finite() {
            return Err(Error::numerical("non-finite decoder likelihood"));
        }
        self.fused(
            total,
            &[y, ln_tau, ln_alpha0],
            vec![Tensor::vector(gy), Tensor::scalar(g_lt), Tensor::scalar(g_la)],
        )
    }

    /// Reverse sweep from a scalar `root`. Each call starts from zero
    /// gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip(val(*b), |g, y| g * y));
                    acc(&mut grads, *b, g.zip(val(*a), |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(&mut grads, *a, g.zip(y, |g, y| g / y));
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: (0..g.len()).map(|i| -g.data[i] * x.data[i] / (y.data[i] * y.data[i])).collect(),
                    };
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(s, x) => {
                    let c = val(*s).data[0];
                    let gs: f64 = g.data.iter().zip(&val(*x).data).map(|(g, v)| g * v).sum();
                    acc(&mut grads, *s, Tensor::scalar(gs));
                    acc(&mut grads, *x, g.map(|v| c * v));
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => acc(&mut grads, *a, g.map(|v| c * v)),
                Op::PowConst(a, p) => acc(&mut grads, *a, g.zip(val(*a), |g, x| g * p * x.powf(p - 1.0))),
                Op::Exp(a) => acc(&mut grads, *a, g.zip(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(&mut grads, *a, g.zip(val(*a), |g, x| g / x)),
                Op::Relu(a) => acc(&mut grads, *a, g.zip(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::ClampMin(a, c) => acc(&mut grads, *a, g.zip(val(*a), |g, x| if x > *c { g } else { 0.0 })),
                Op::MatVec(w, x) => {
                    let (m, v) = (val(*w), val(*x));
                    let gw = Tensor::from_fn(m.rows, m.cols, |i, j| g.data[i] * v.data[j]);
                    let mut gx = vec![0.0; m.cols];
                    for (i, row) in m.data.chunks(m.cols).enumerate() {
                        let gi = g.data[i];
                        if gi != 0.0 {
                            gx.iter_mut().zip(row).for_each(|(o, w)| *o += gi * w);
                        }
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *x, Tensor::vector(gx));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(&mut grads, *a, matmul(&g, y, false, true));
                    acc(&mut grads, *b, matmul(x, &g, true, false));
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, Tensor::from_fn(x.rows, x.cols, |_, _| g.data[0]));
                }
                Op::Mix {
                    w,
                    alpha,
                    z,
                    wpow,
                    d_alpha,
                } => {
                    let (wm, zv) = (val(*w), val(*z));
                    let a = val(*alpha).data[0];
                    let k = wm.cols;
                    let mut gz = vec![0.0; k];
                    let mut gw = vec![0.0; wm.data.len()];
                    let mut ga = 0.0;
                    for j in 0..wm.rows {
                        let gj = g.data[j];
                        ga += gj * d_alpha[j];
                        for kk in 0..k {
                            let p = wpow[j * k + kk];
                            if p > 0.0 {
                                gz[kk] += gj * p;
                                gw[j * k + kk] = gj * p * zv.data[kk] / (a * wm.data[j * k + kk]);
                            }
                        }
                    }
                    acc(&mut grads, *w, Tensor::new(wm.rows, k, gw)?);
                    acc(&mut grads, *alpha, Tensor::scalar(ga));
                    acc(&mut grads, *z, Tensor::vector(gz));
                }
                Op::Fused { parents, grads: local } => {
                    let s = g.data[0];
                    for (p, lg) in parents.iter().zip(local) {
                        acc(&mut grads, *p, lg.map(|v| s * v));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, n) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let p = if tb { b.rows } else { b.cols };
    let ga = |i: usize, k: usize| if ta { a.get(k, i) } else { a.get(i, k) };
    let gb = |k: usize, j: usize| if tb { b.get(j, k) } else { b.get(k, j) };
    Tensor::from_fn(m, p, |i, j| (0..n).map(|k| ga(i, k) * gb(k, j)).sum())
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf. A leaf that does not feed
    /// the root has gradient zero; pass `shape` to size it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

/// Largest discrepancy between tape gradients and central differences of `f`
/// over all entries of all `inputs`, measured as `|a - n| / max(|a|, |n|, 1)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&t, &vs)?;
        Ok(t.scalar_value(r))
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt_or_zeros(*v, inputs[i].shape());
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data[e];
            work[i].data[e] = x0 + h;
            let up = eval(&work)?;
            work[i].data[e] = x0 - h;
            let dn = eval(&work)?;
            work[i].data[e] = x0;
            let num = (up - dn) / (2.0 * h);
            let a = g.data[e];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng as _;

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    fn rand_tensor(rng: &mut crate::seed::Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    /// Away from relu kinks.
    fn away_from_zero(rng: &mut crate::seed::Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| {
            let v: f64 = rng.random_range(1e-3..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
    }

    #[test]
    fn relu_examples() {
        let t = Tape::new();
        let x = t.scalar(-3.0);
        let y = t.relu(x);
        assert_eq!(t.scalar_value(y), 0.0);
        assert_eq!(t.backward(y).unwrap().wrt(x).unwrap().item(), 0.0);
        let z = t.scalar(0.0);
        let r = t.relu(z);
        assert_eq!(t.backward(r).unwrap().wrt(z).unwrap().item(), 0.0);
    }

    #[test]
    fn log_and_composite_examples() {
        let t = Tape::new();
        let x = t.scalar(2.0);
        let y = t.log(x).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x).unwrap().item(), 0.5);

        let t = Tape::new();
        let x = t.scalar(3.0);
        let lx = t.log(x).unwrap();
        let e = t.exp(t.mul_const(lx, 2.0));
        let g = t.backward(e).unwrap().wrt(x).unwrap().item();
        assert!((g - 6.0).abs() < 1e-12);
    }

    #[test]
    fn domain_and_shape_errors() {
        let t = Tape::new();
        let a = t.scalar(-1.0);
        assert!(matches!(t.log(a), Err(Error::Domain(_))));
        assert!(matches!(t.pow_const(a, 0.5), Err(Error::Domain(_))));
        let v = t.vector(vec![1.0, 2.0]);
        assert!(matches!(t.add(a, v), Err(Error::Shape(_))));
        let m = t.leaf(Tensor::zeros(3, 3));
        assert!(matches!(t.matvec(m, v), Err(Error::Shape(_))));
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_leaf_and_sum() {
        let t = Tape::new();
        let leaves: Vec<Var> = (0..5).map(|i| t.scalar(i as f64)).collect();
        let lonely = t.scalar(9.0);
        let mut acc = leaves[0];
        for l in &leaves[1..] {
            acc = t.add(acc, *l).unwrap();
        }
        let g = t.backward(acc).unwrap();
        for l in &leaves {
            assert_eq!(g.wrt(*l).unwrap().item(), 1.0);
        }
        assert!(g.wrt(lonely).is_none());
        assert_eq!(g.wrt_or_zeros(lonely, (1, 1)).item(), 0.0);
    }

    #[test]
    fn backward_is_idempotent() {
        let t = Tape::new();
        let x = t.vector(vec![1.0, 2.0, 3.0]);
        let y = t.sum(t.mul(x, x).unwrap());
        let a = t.backward(y).unwrap().wrt(x).unwrap().clone();
        let b = t.backward(y).unwrap().wrt(x).unwrap().clone();
        assert_eq!(a, b);
        assert_eq!(a.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mlp_gradcheck() {
        // 2 -> 2 -> 1 network: 4 + 2 + 2 + 1 = 9 weights plus one input scale
        let mut rng = rng_from_seed(3);
        let inputs = vec![
            away_from_zero(&mut rng, 2, 2),
            away_from_zero(&mut rng, 2, 1),
            away_from_zero(&mut rng, 1, 2),
            away_from_zero(&mut rng, 1, 1),
            Tensor::vector(vec![0.7, -1.3]),
        ];
        let err = gradcheck(
            |t, v| {
                let h = t.relu(t.add(t.matvec(v[0], v[4])?, v[1])?);
                let o = t.add(t.matvec(v[2], h)?, v[3])?;
                let d = t.add_const(o, -0.5);
                Ok(t.sum(t.mul(d, d)?))
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_and_div_gradcheck() {
        let mut rng = rng_from_seed(5);
        let inputs = vec![
            rand_tensor(&mut rng, 3, 2, -1.0, 1.0),
            rand_tensor(&mut rng, 2, 4, -1.0, 1.0),
            rand_tensor(&mut rng, 3, 4, 0.5, 2.0),
        ];
        let err = gradcheck(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let q = t.div(p, v[2])?;
                let r = t.pow_const(t.add_const(t.exp(q), 0.1), 1.7)?;
                Ok(t.sum(t.sub(r, q)?))
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn mix_gradcheck() {
        let mut rng = rng_from_seed(7);
        let w = rand_tensor(&mut rng, 4, 3, 0.05, 1.0);
        let inputs = vec![w.clone(), Tensor::scalar(0.6), rand_tensor(&mut rng, 3, 1, 0.2, 3.0)];
        let err = gradcheck(
            |t, v| {
                let y = t.mix(v[0], v[1], v[2])?;
                Ok(t.sum(t.log(y)?))
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{err}");

        // a zero weight contributes nothing and receives no gradient
        let mut w0 = w;
        w0.data_mut()[5] = 0.0;
        let t = Tape::new();
        let (wv, a, z) = (t.leaf(w0), t.scalar(0.6), t.vector(vec![1.0, 2.0, 3.0]));
        let y = t.mix(wv, a, z).unwrap();
        let g = t.backward(t.sum(y)).unwrap();
        assert_eq!(g.wrt(wv).unwrap().data()[5], 0.0);
        assert!(t.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_tilted_ps_gradcheck() {
        let inputs = vec![
            Tensor::vector(vec![0.3, 1.7, 12.0]),
            Tensor::scalar(0.45),
            Tensor::vector(vec![0.2, 0.05, 1.3]),
        ];
        let err = gradcheck(|t, v| t.log_tilted_ps(v[0], v[1], v[2]), &inputs, H).unwrap();
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn frechet_loglik_examples() {
        // unit Fréchet at x = 1
        let t = Tape::new();
        let y = t.vector(vec![1.0]);
        let (lt, la) = (t.scalar(0.0), t.scalar(0.0));
        let l = t.frechet_loglik(&[1.0], y, lt, la).unwrap();
        assert!((t.scalar_value(l) + 1.0).abs() < 1e-15);

        let t = Tape::new();
        let y = t.vector(vec![0.0]);
        let (lt, la) = (t.scalar(0.0), t.scalar(0.0));
        assert!(matches!(t.frechet_loglik(&[1.0], y, lt, la), Err(Error::Numerical(_))));

        let inputs = vec![
            Tensor::vector(vec![0.4, 2.0, 9.0]),
            Tensor::scalar(0.3),
            Tensor::scalar((0.25f64).ln()),
        ];
        let x = [0.5, 30.0, 2.0];
        let err = gradcheck(|t, v| t.frechet_loglik(&x, v[0], v[1], v[2]), &inputs, H).unwrap();
        assert!(err < TOL, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn elementwise_ops_gradcheck(seed in 0u64..10_000) {
            let mut rng = rng_from_seed(seed);
            let inputs = vec![
                away_from_zero(&mut rng, 3, 1),
                rand_tensor(&mut rng, 3, 1, 0.2, 2.0),
                Tensor::scalar(rng.random_range(-1.0..1.0)),
            ];
            let err = gradcheck(
                |t, v| {
                    let a = t.relu(v[0]);
                    let b = t.scale(v[2], v[1])?;
                    let c = t.log(t.add_const(t.mul(a, v[1])?, 1.0))?;
                    let d = t.clamp_min(t.sub(b, c)?, -5.0);
                    Ok(t.sum(t.add(t.exp(t.neg(d)), t.pow_const(v[1], -0.5)?)?))
                },
                &inputs,
                H,
            ).unwrap();
            prop_assert!(err < TOL, "{}", err);
        }

        #[test]
        fn matvec_gradcheck(seed in 0u64..10_000) {
            let mut rng = rng_from_seed(seed);
            let inputs = vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0), rand_tensor(&mut rng, 4, 1, -1.0, 1.0)];
            let err = gradcheck(|t, v| {
                let y = t.matvec(v[0], v[1])?;
                Ok(t.sum(t.mul(y, y)?))
            }, &inputs, H).unwrap();
            prop_assert!(err < TOL);
        }
    }
}
