//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value and the handles of its
//! inputs; `backward` walks the nodes in exact reverse order and accumulates
//! gradients into every node that requires them.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherCols { x: Var, index: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Bilinear { map: Var, x: Var, y: Var },
    GroupWeightedSum { w: Var, v: Var },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::shape(op, format!("incompatible shapes {shapes:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if the node takes one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of `v`'s value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in av[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aik * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, &[sa, sb]));
        }
        let shape = sa.to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let cols = self.nodes[a.0].value.cols();
        if self.nodes[row.0].value.numel() != cols {
            return Err(shape_err(name, &[sa, sr]));
        }
        let shape = sa.to_vec();
        let rv = self.nodes[row.0].value.data();
        let data = self.nodes[a.0]
            .value
            .data()
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// `a + row`, broadcasting `row` over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a * row`, broadcasting `row` over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    // ----- row-wise normalisations ---------------------------------------

    /// Softmax over the last axis, stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let cols = v.cols().max(1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - max).exp();
                sum += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let cols = v.cols().max(1);
        let mut out = Vec::with_capacity(v.numel());
        let mut rstds = Vec::with_capacity(v.rows());
        for row in v.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            out.extend(row.iter().map(|x| (x - mean) * rstd));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNorm { x: a, rstd: rstds }, rg)
    }

    // ----- structural -----------------------------------------------------

    fn as_matrix(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Concatenates 2-D operands along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.as_matrix(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.as_matrix(p).0 != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat_cols", &shapes));
        }
        let total: usize = parts.iter().map(|&p| self.as_matrix(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Concatenates 2-D operands along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.as_matrix(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.as_matrix(p).1 != cols) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat_rows", &shapes));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
            rows += self.as_matrix(p).0;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a);
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {cols} columns", start + len),
            ));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x: a, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a);
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) of {rows} rows", start + len),
            ));
        }
        let out = self.nodes[a.0].value.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![len, cols], out)?,
            Op::SliceRows { x: a, start },
            rg,
        ))
    }

    /// Selects (and possibly repeats) columns by index.
    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a);
        if let Some(bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::shape(
                "gather_cols",
                format!("index {bad} of {cols} columns"),
            ));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = v.row(r);
            out.extend(index.iter().map(|&i| row[i]));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows, index.len()], out)?,
            Op::GatherCols {
                x: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.as_matrix(a);
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} of {rows} rows"),
            ));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(cols * index.len());
        for &i in index {
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], out)?,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ----- sampling -------------------------------------------------------

    /// Bilinear interpolation of a `[H, W, C]` map at normalised coordinates.
    ///
    /// `x`, `y` hold `n` coordinates each in `[0, 1]` image units; pixel `(i, j)`
    /// has its center at `((j + 0.5) / W, (i + 0.5) / H)`. Reads outside the map
    /// are zero. Output is `[n, C]`; gradients flow to the map and to both
    /// coordinate tensors.
    pub fn bilinear_sample(&mut self, map: Var, x: Var, y: Var) -> Result<Var> {
        let sm = self.shape(map);
        let (n, ny) = (self.nodes[x.0].value.numel(), self.nodes[y.0].value.numel());
        if sm.len() != 3 || n != ny {
            return Err(shape_err(
                "bilinear_sample",
                &[sm, self.shape(x), self.shape(y)],
            ));
        }
        let (h, w, c) = (sm[0], sm[1], sm[2]);
        let mv = self.nodes[map.0].value.data();
        let xs = self.nodes[x.0].value.data();
        let ys = self.nodes[y.0].value.data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let taps = bilinear_taps(xs[s], ys[s], h, w);
            let dst = &mut out[s * c..(s + 1) * c];
            for (idx, weight) in taps.iter().flatten() {
                let src = &mv[idx * c..(idx + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += weight * v;
                }
            }
        }
        let rg = self.rg(&[map, x, y]);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::Bilinear { map, x, y },
            rg,
        ))
    }

    /// Per-group weighted sum: `w` is `[G, M]`, `v` is `[G*M, C]`, output
    /// `[G, C]` with row `g` equal to `sum_m w[g, m] * v[g*M + m]`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (g, m) = self.as_matrix(w);
        let (vr, c) = self.as_matrix(v);
        if vr != g * m {
            return Err(shape_err(
                "group_weighted_sum",
                &[self.shape(w), self.shape(v)],
            ));
        }
        let wv = self.nodes[w.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            let dst = &mut out[gi * c..(gi + 1) * c];
            for mi in 0..m {
                let weight = wv[gi * m + mi];
                let src = &vv[(gi * m + mi) * c..(gi * m + mi + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
        let rg = self.rg(&[w, v]);
        Ok(self.push(
            Tensor::new(vec![g, c], out)?,
            Op::GroupWeightedSum { w, v },
            rg,
        ))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.data();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse pass seeded with explicit output gradients, one per node.
    /// Seeds for the same node add up.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.numel() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed of length {} for node of shape {:?}",
                        g.len(),
                        self.shape(*v)
                    ),
                ));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            accumulate(&mut grads[v.0], g, self.nodes[v.0].value.numel());
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // Leaves needing gradients but never reached still get a zero accumulator.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        // Accumulate (+=) across repeated backward calls.
        if self.grads.len() < n {
            self.grads.resize(n, None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                accumulate(&mut self.grads[i], &g, g.len());
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv.data()[kk * n..(kk + 1) * n];
                            ga[r * k + kk] += dot(grow, brow);
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let a_rk = av.data()[r * k + kk];
                            if a_rk == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *d += a_rk * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, wants(*a));
                add_into(grads, *b, g, wants(*b));
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, wants(*a));
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for (d, &x) in gb.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g, wants(*a));
                if wants(*row) {
                    let cols = val(*row).numel();
                    let gr = slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        for (d, &x) in gr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let cols = val(*row).numel();
                if wants(*a) {
                    let rv = val(*row).data();
                    let ga = slot(grads, *a, g.len());
                    for (dchunk, gchunk) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, &x), &r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += x * r;
                        }
                    }
                }
                if wants(*row) {
                    let av = val(*a).data();
                    let gr = slot(grads, *row, cols);
                    for (gchunk, achunk) in g.chunks(cols).zip(av.chunks(cols)) {
                        for ((d, &x), &y) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += s * x;
                    }
                }
            }
            Op::Relu(a) => unary(grads, *a, g, wants(*a), |k| {
                if val(*a).data()[k] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                unary(grads, *a, g, wants(*a), |k| y[k] * (1.0 - y[k]))
            }
            Op::Sin(a) => unary(grads, *a, g, wants(*a), |k| val(*a).data()[k].cos()),
            Op::Cos(a) => unary(grads, *a, g, wants(*a), |k| -val(*a).data()[k].sin()),
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols().max(1);
                    let ga = slot(grads, *a, g.len());
                    for ((dchunk, gchunk), ychunk) in
                        ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let s = dot(gchunk, ychunk);
                        for ((d, &gv), &yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if wants(*x) {
                    let y = node.value.data();
                    let cols = node.value.cols().max(1);
                    let inv = 1.0 / cols as f64;
                    let gx = slot(grads, *x, g.len());
                    for (r, ((dchunk, gchunk), ychunk)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                        .enumerate()
                    {
                        let gmean = gchunk.iter().sum::<f64>() * inv;
                        let gymean = dot(gchunk, ychunk) * inv;
                        for ((d, &gv), &yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += rstd[r] * (gv - gmean - yv * gymean);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.as_matrix(p);
                    if wants(p) {
                        let gp = slot(grads, p, rows * cols);
                        for r in 0..rows {
                            for (d, &x) in gp[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + cols])
                            {
                                *d += x;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    add_into(grads, p, &g[offset..offset + len], wants(p));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (rows, cols) = self.as_matrix(*x);
                    let len = node.value.cols();
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for (d, &v) in gx[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let (rows, cols) = self.as_matrix(*x);
                    let gx = slot(grads, *x, rows * cols);
                    for (d, &v) in gx[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::GatherCols { x, index } => {
                if wants(*x) {
                    let (rows, cols) = self.as_matrix(*x);
                    let n = index.len();
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for (k, &i) in index.iter().enumerate() {
                            gx[r * cols + i] += g[r * n + k];
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if wants(*x) {
                    let (rows, cols) = self.as_matrix(*x);
                    let gx = slot(grads, *x, rows * cols);
                    for (k, &i) in index.iter().enumerate() {
                        for (d, &v) in gx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = self.as_matrix(*a);
                    let ga = slot(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(grads, *a, g, wants(*a)),
            Op::Bilinear { map, x, y } => {
                let sm = val(*map).shape();
                let (h, w, c) = (sm[0], sm[1], sm[2]);
                let xs = val(*x).data();
                let ys = val(*y).data();
                let mv = val(*map).data();
                let n = xs.len();
                if wants(*map) {
                    let gm = slot(grads, *map, h * w * c);
                    for s in 0..n {
                        let gs = &g[s * c..(s + 1) * c];
                        for (idx, weight) in bilinear_taps(xs[s], ys[s], h, w).iter().flatten() {
                            for (d, &gv) in gm[idx * c..(idx + 1) * c].iter_mut().zip(gs) {
                                *d += weight * gv;
                            }
                        }
                    }
                }
                if wants(*x) || wants(*y) {
                    let mut dxs = vec![0.0; n];
                    let mut dys = vec![0.0; n];
                    for s in 0..n {
                        let gs = &g[s * c..(s + 1) * c];
                        let (dx, dy) = bilinear_coord_grad(mv, xs[s], ys[s], h, w, c, gs);
                        dxs[s] = dx;
                        dys[s] = dy;
                    }
                    add_into(grads, *x, &dxs, wants(*x));
                    add_into(grads, *y, &dys, wants(*y));
                }
            }
            Op::GroupWeightedSum { w, v } => {
                let (gcount, m) = self.as_matrix(*w);
                let c = val(*v).cols();
                if wants(*w) {
                    let vv = val(*v).data();
                    let gw = slot(grads, *w, gcount * m);
                    for gi in 0..gcount {
                        let gout = &g[gi * c..(gi + 1) * c];
                        for mi in 0..m {
                            let row = gi * m + mi;
                            gw[row] += dot(gout, &vv[row * c..(row + 1) * c]);
                        }
                    }
                }
                if wants(*v) {
                    let wv = val(*w).data();
                    let gv = slot(grads, *v, gcount * m * c);
                    for gi in 0..gcount {
                        let gout = &g[gi * c..(gi + 1) * c];
                        for mi in 0..m {
                            let row = gi * m + mi;
                            let weight = wv[row];
                            for (d, &x) in gv[row * c..(row + 1) * c].iter_mut().zip(gout) {
                                *d += weight * x;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let len = val(*a).numel();
                    let ga = slot(grads, *a, len);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let len = val(*a).numel();
                    let ga = slot(grads, *a, len);
                    let share = g[0] / len.max(1) as f64;
                    for d in ga.iter_mut() {
                        *d += share;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of `p`, with `p` clamped away from 0 and 1.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64], len: usize) {
    let dst = slot.get_or_insert_with(|| vec![0.0; len]);
    for (d, &x) in dst.iter_mut().zip(g) {
        *d += x;
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], wants: bool) {
    if wants {
        accumulate(&mut grads[v.0], g, g.len());
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
    wants: bool,
    deriv: impl Fn(usize) -> f64,
) {
    if wants {
        let ga = slot(grads, a, g.len());
        for (k, (d, &x)) in ga.iter_mut().zip(g).enumerate() {
            *d += x * deriv(k);
        }
    }
}

/// The four `(flat index, weight)` taps of a bilinear read; out-of-range
/// taps are `None`.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let tap = |xi: f64, yi: f64, weight: f64| {
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h && weight != 0.0 {
            Some((yi as usize * w + xi as usize, weight))
        } else {
            None
        }
    };
    [
        tap(x0, y0, (1.0 - fx) * (1.0 - fy)),
        tap(x0 + 1.0, y0, fx * (1.0 - fy)),
        tap(x0, y0 + 1.0, (1.0 - fx) * fy),
        tap(x0 + 1.0, y0 + 1.0, fx * fy),
    ]
}

fn bilinear_coord_grad(
    map: &[f64],
    x: f64,
    y: f64,
    h: usize,
    w: usize,
    c: usize,
    g: &[f64],
) -> (f64, f64) {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let read = |xi: f64, yi: f64| -> Option<&[f64]> {
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
            let idx = yi as usize * w + xi as usize;
            Some(&map[idx * c..(idx + 1) * c])
        } else {
            None
        }
    };
    let gdot = |v: Option<&[f64]>| v.map_or(0.0, |v| dot(g, v));
    let v00 = gdot(read(x0, y0));
    let v10 = gdot(read(x0 + 1.0, y0));
    let v01 = gdot(read(x0, y0 + 1.0));
    let v11 = gdot(read(x0 + 1.0, y0 + 1.0));
    let d_px = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let d_py = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    (d_px * w as f64, d_py * h as f64)
}
