use super::kernels::{self, gemm, ConvGeom, View};
use super::tensor::axis_split;
use super::{DiffError, Gradients, ParamId, ParamStore, Result, Tensor};
use crate::par::Exec;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddAlong {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Relu(Var),
    Tanh(Var),
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Expand {
        x: Var,
        reps: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Dynamic reverse-mode tape. Parameters are read from a borrowed
/// [`ParamStore`]; gradients are written into a separate [`Gradients`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track: bool,
    exec: Exec,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Graph<'p> {
    /// Graph whose parameter leaves receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track: true,
            exec: Exec::default(),
        }
    }

    /// Graph for forward evaluation only; `backward` yields no gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of 2-d operands, optionally transposing either one.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        gemm(
            self.exec,
            m,
            k,
            n,
            View::select(self.data(a), sa[1], ta),
            View::select(self.data(b), sb[1], tb),
            &mut out,
            false,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[G, m, k]` and `[G, k, n]` operands.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let groups = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let k = ka;
        let (ad, bd) = (self.data(a), self.data(b));
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                Exec::Sequential,
                m,
                k,
                n,
                View::select(&ad[g * asz..(g + 1) * asz], sa[2], ta),
                View::select(&bd[g * bsz..(g + 1) * bsz], sb[2], tb),
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(&[groups, m, n], out)?;
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                groups,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_t(a, b, false, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data).expect("shapes checked")
    }

    fn unary_map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary_map(a, |x| c * x);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Adds a 1-d `bias` along `axis` of `x` (row bias, channel bias, ...).
    pub fn add_along(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        self.check_axis(&sx, axis)?;
        let sb = self.shape(bias);
        if sb.len() != 1 || sb[0] != sx[axis] {
            return Err(shape_err("add_along", &sx, sb));
        }
        let (outer, len, inner) = axis_split(&sx, axis);
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for (a, &bv) in b.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(&sx, data)?;
        Ok(self.push(t, Op::AddAlong { x, bias, axis }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary_map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary_map(x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    /// `c * tanh(x / c)`: smooth clipping to `(-c, c)`.
    pub fn soft_clip(&mut self, x: Var, c: f64) -> Var {
        let s = self.scale(x, 1.0 / c);
        let t = self.tanh(s);
        self.scale(t, c)
    }

    fn check_axis(&self, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(DiffError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        Ok(())
    }

    fn log_softmax_values(&self, x: Var, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        self.check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|a| (src[at(a)] - max).exp()).sum::<f64>().ln();
                for a in 0..len {
                    out[at(a)] = src[at(a)] - lse;
                }
            }
        }
        Tensor::new(&shape, out)
    }

    /// Max-shifted log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.log_softmax_values(x, axis)?;
        Ok(self.push(t, Op::LogSoftmax { x, axis }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut t = self.log_softmax_values(x, axis)?;
        t.data_mut().iter_mut().for_each(|v| *v = v.exp());
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::Shape(format!("permute: {perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = kernels::permute(self.data(x), &shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        self.check_axis(&first, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Picks `x[b, index[b], ...]` from a `[B, A, ...]` tensor.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index.len() != shape[0] || index.iter().any(|&i| i >= shape[1]) {
            return Err(DiffError::Shape(format!(
                "gather: {} indices into {shape:?}",
                index.len()
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(shape[0] * inner);
        for (b, &i) in index.iter().enumerate() {
            let base = (b * shape[1] + i) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(&shape[2..]);
        if out_shape.len() == 1 {
            out_shape.push(1);
        }
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Appends trailing axes `extra`, repeating each element across them.
    pub fn expand_trailing(&mut self, x: Var, extra: &[usize]) -> Result<Var> {
        let reps: usize = extra.iter().product();
        let mut shape = self.shape(x).to_vec();
        shape.extend_from_slice(extra);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, reps))
            .collect();
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Expand { x, reps }, &[x]))
    }

    /// Valid cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(DiffError::Shape("conv2d: stride must be at least 1".into()));
        }
        if sw[2] > sx[2] || sw[3] > sx[3] {
            return Err(DiffError::Shape(format!(
                "conv2d: kernel {:?} larger than input {:?}",
                &sw[2..],
                &sx[2..]
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            ho: (sx[2] - sw[2]) / stride + 1,
            wo: (sx[3] - sw[3]) / stride + 1,
        };
        let c_out = sw[0];
        let cols = kernels::im2col(self.exec, self.data(x), geom);
        let (plen, locs) = (geom.patch_len(), geom.locs());
        let mut out = vec![0.0; geom.batch * c_out * locs];
        let wd = self.data(w);
        self.exec.for_each_chunk_mut(&mut out, c_out * locs, |b, ob| {
            gemm(
                Exec::Sequential,
                c_out,
                plen,
                locs,
                View::rows(wd, plen),
                View::transposed(&cols[b * locs * plen..(b + 1) * locs * plen], plen),
                ob,
                false,
            );
        });
        let t = Tensor::new(&[geom.batch, c_out, geom.ho, geom.wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                geom,
                c_out,
                cols,
            },
            &[x, w],
        ))
    }

    /// Accumulates `d loss / d param` for every parameter reachable from
    /// `loss` into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Value::Param(id) = node.value {
                grads.accumulate(id, self.params.get(id).shape(), &g);
                continue;
            }
            self.propagate(&node.op, Var(i), &g, &mut adj);
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (sa, sb) = (self.shape(a)[1], self.shape(b)[1]);
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(adj, a) {
                    // op(b) as stored: rows(b, sb) or its transpose
                    if !ta {
                        gemm(self.exec, m, n, k, View::rows(g, n), View::select(bd, sb, !tb), da, true);
                    } else {
                        gemm(self.exec, k, n, m, View::select(bd, sb, tb), View::transposed(g, n), da, true);
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    if !tb {
                        gemm(self.exec, k, m, n, View::select(ad, sa, !ta), View::rows(g, n), db, true);
                    } else {
                        gemm(self.exec, n, m, k, View::transposed(g, n), View::select(ad, sa, ta), db, true);
                    }
                }
            }
            &Op::Bmm { a, b, ta, tb, groups, m, k, n } => {
                let (sa, sb) = (self.shape(a)[2], self.shape(b)[2]);
                let (asz, bsz) = (self.value(a).len() / groups, self.value(b).len() / groups);
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(adj, a) {
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let bq = &bd[q * bsz..(q + 1) * bsz];
                        let dq = &mut da[q * asz..(q + 1) * asz];
                        if !ta {
                            gemm(Exec::Sequential, m, n, k, View::rows(gq, n), View::select(bq, sb, !tb), dq, true);
                        } else {
                            gemm(Exec::Sequential, k, n, m, View::select(bq, sb, tb), View::transposed(gq, n), dq, true);
                        }
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let aq = &ad[q * asz..(q + 1) * asz];
                        let dq = &mut db[q * bsz..(q + 1) * bsz];
                        if !tb {
                            gemm(Exec::Sequential, k, m, n, View::select(aq, sa, !ta), View::rows(gq, n), dq, true);
                        } else {
                            gemm(Exec::Sequential, n, m, k, View::transposed(gq, n), View::select(aq, sa, ta), dq, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, b) {
                    db.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(da) = self.slot(adj, a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bd) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(ad) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            &Op::AddAlong { x, bias, axis } => {
                if let Some(dx) = self.slot(adj, x) {
                    add_into(dx, g);
                }
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                if let Some(db) = self.slot(adj, bias) {
                    for o in 0..outer {
                        for (a, d) in db.iter_mut().enumerate().take(len) {
                            let base = (o * len + a) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                if let Some(dx) = self.slot(adj, x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                let y = self.data(out);
                if let Some(dx) = self.slot(adj, x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                let y = self.data(out);
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                if let Some(dx) = self.slot(adj, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let gs: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                dx[at(a)] += g[at(a)] - y[at(a)].exp() * gs;
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = self.data(out);
                let (outer, len, inner) = axis_split(self.shape(x), axis);
                if let Some(dx) = self.slot(adj, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(adj, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                if let Some(dx) = self.slot(adj, x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot(adj, x) {
                    add_into(dx, g);
                }
            }
            Op::Permute { x, perm } => {
                let out_shape = self.shape(out);
                let (back, _) = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, &back);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.shape(out);
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(dv) = self.slot(adj, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut dv[o * len..(o + 1) * len], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x);
                let inner: usize = shape[2..].iter().product();
                let a_dim = shape[1];
                if let Some(dx) = self.slot(adj, *x) {
                    for (b, &i) in index.iter().enumerate() {
                        let base = (b * a_dim + i) * inner;
                        add_into(&mut dx[base..base + inner], &g[b * inner..(b + 1) * inner]);
                    }
                }
            }
            &Op::Expand { x, reps } => {
                if let Some(dx) = self.slot(adj, x) {
                    for (d, chunk) in dx.iter_mut().zip(g.chunks(reps)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d { x, w, geom, c_out, cols } => {
                let (plen, locs, c_out) = (geom.patch_len(), geom.locs(), *c_out);
                if let Some(dw) = self.slot(adj, *w) {
                    for b in 0..geom.batch {
                        gemm(
                            self.exec,
                            c_out,
                            locs,
                            plen,
                            View::rows(&g[b * c_out * locs..(b + 1) * c_out * locs], locs),
                            View::rows(&cols[b * locs * plen..(b + 1) * locs * plen], plen),
                            dw,
                            true,
                        );
                    }
                }
                if self.needs(*x) {
                    let wd = self.data(*w);
                    let mut dcols = vec![0.0; geom.batch * locs * plen];
                    self.exec.for_each_chunk_mut(&mut dcols, locs * plen, |b, dc| {
                        gemm(
                            Exec::Sequential,
                            locs,
                            c_out,
                            plen,
                            View::transposed(&g[b * c_out * locs..(b + 1) * c_out * locs], locs),
                            View::rows(wd, plen),
                            dc,
                            false,
                        );
                    });
                    let dxv = kernels::col2im(self.exec, &dcols, *geom);
                    if let Some(dx) = self.slot(adj, *x) {
                        add_into(dx, &dxv);
                    }
                }
            }
        }
    }
}
