//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Every operation appends a node holding its result; `backward` walks the
//! node list in reverse and accumulates gradients. Tensors are 2D row-major
//! throughout: feature maps are laid out as `[cells, channels]`, vectors as
//! `[1, d]`, and convolution kernels carry their spatial geometry in the op.

use crate::tensor::Tensor;

pub type VarId = usize;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Matmul(VarId, VarId),
    /// a @ b^T
    MatmulNT(VarId, VarId),
    /// x [m,n] + row [1,n], broadcast over rows
    AddRow(VarId, VarId),
    /// x [m,n] * row [1,n], broadcast over rows
    MulRow(VarId, VarId),
    /// x [m,n] * constant column mask [m], broadcast over columns
    MulMaskCol(VarId, Vec<f64>),
    Sigmoid(VarId),
    Tanh(VarId),
    Silu(VarId),
    Softplus(VarId),
    SoftmaxRows(VarId),
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    SliceRows(VarId, usize),
    SliceCols(VarId, usize),
    Gather(VarId, Vec<usize>),
    SumAll(VarId),
    Reshape(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
    },
    GroupNorm {
        x: VarId,
        groups: usize,
    },
    LayerNormRows(VarId),
    L2NormRows {
        x: VarId,
        eps: f64,
    },
    Max(VarId, VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.g[id].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (data, noise, masks as values).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.nodes[a].value.map(|x| x * c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        let ad = va.data();
        let bd = vb.data();
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), value, ng)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; m * n];
        let ad = va.data();
        let bd = vb.data();
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatmulNT(a, b), value, ng)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        let n = va.cols();
        assert_eq!(vr.numel(), n, "add_row width mismatch");
        let rd = vr.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rd[i % n])
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), value, ng)
    }

    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        let n = va.cols();
        assert_eq!(vr.numel(), n, "mul_row width mismatch");
        let rd = vr.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * rd[i % n])
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::MulRow(a, row), value, ng)
    }

    /// Multiply every column of row i by `mask[i]`. The mask is constant.
    pub fn mul_mask_col(&mut self, a: VarId, mask: &[f64]) -> VarId {
        let va = &self.nodes[a].value;
        assert_eq!(va.rows(), mask.len(), "mask length mismatch");
        let n = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * mask[i / n])
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a);
        self.push(Op::MulMaskCol(a, mask.to_vec()), value, ng)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(f64::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), value, ng)
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(|x| x / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(Op::Silu(a), value, ng)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: VarId) -> VarId {
        let value = self.nodes[a].value.map(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        });
        let ng = self.ng(a);
        self.push(Op::Softplus(a), value, ng)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let value = Tensor::from_vec(&[m, n], data);
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), value, ng)
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols(), vb.cols(), "concat_rows width mismatch");
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let value = Tensor::from_vec(&[va.rows() + vb.rows(), va.cols()], data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::ConcatRows(a, b), value, ng)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.rows(), vb.rows(), "concat_cols height mismatch");
        let (m, na, nb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * na..(i + 1) * na]);
            data.extend_from_slice(&vb.data()[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::from_vec(&[m, na + nb], data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::ConcatCols(a, b), value, ng)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = &self.nodes[a].value;
        let n = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::from_vec(&[len, n], data);
        let ng = self.ng(a);
        self.push(Op::SliceRows(a, start), value, ng)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = &self.nodes[a].value;
        let (m, n) = (va.rows(), va.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::from_vec(&[m, len], data);
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start), value, ng)
    }

    /// out.flat[i] = a.flat[indices[i]], reshaped to `shape`.
    pub fn gather(&mut self, a: VarId, indices: &[usize], shape: &[usize]) -> VarId {
        let va = &self.nodes[a].value;
        assert_eq!(shape.iter().product::<usize>(), indices.len());
        let src = va.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(shape, data);
        let ng = self.ng(a);
        self.push(Op::Gather(a, indices.to_vec()), value, ng)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let value = self.nodes[a].value.clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(Op::Reshape(a), value, ng)
    }

    /// Same-padded 2D convolution. `x` is [height*width, cin] with cell
    /// index r*width + c; `w` is [cout, cin*kh*kw]; `b` is [1, cout].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
    ) -> VarId {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        let cin = vx.cols();
        assert_eq!(vx.rows(), height * width);
        assert_eq!(vw.cols(), cin * kh * kw, "conv2d kernel width mismatch");
        let cout = vw.rows();
        assert_eq!(vb.numel(), cout);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel must be odd");
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = vx.data();
        let wd = vw.data();
        let bd = vb.data();
        let mut out = vec![0.0; height * width * cout];
        for r in 0..height {
            for c in 0..width {
                let orow = &mut out[(r * width + c) * cout..(r * width + c + 1) * cout];
                orow.copy_from_slice(bd);
                for kr in 0..kh {
                    let rr = r as isize + kr as isize - ph as isize;
                    if rr < 0 || rr >= height as isize {
                        continue;
                    }
                    for kc in 0..kw {
                        let cc = c as isize + kc as isize - pw as isize;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        let cell = (rr as usize) * width + cc as usize;
                        let xrow = &xd[cell * cin..(cell + 1) * cin];
                        for co in 0..cout {
                            let wrow = &wd[co * cin * kh * kw..];
                            let mut s = 0.0;
                            for ci in 0..cin {
                                s += xrow[ci] * wrow[ci * kh * kw + kr * kw + kc];
                            }
                            orow[co] += s;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[height * width, cout], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                kh,
                kw,
            },
            value,
            ng,
        )
    }

    /// Group normalization over `[cells, channels]`: statistics are computed
    /// per channel group across all cells. No affine part; the stylization
    /// block supplies scale and shift.
    pub fn group_norm(&mut self, x: VarId, groups: usize) -> VarId {
        let vx = &self.nodes[x].value;
        let (m, c) = (vx.rows(), vx.cols());
        assert!(c % groups == 0, "channels not divisible by groups");
        let gc = c / groups;
        let xd = vx.data();
        let mut out = vec![0.0; m * c];
        for g in 0..groups {
            let mut mean = 0.0;
            for i in 0..m {
                for j in g * gc..(g + 1) * gc {
                    mean += xd[i * c + j];
                }
            }
            let cnt = (m * gc) as f64;
            mean /= cnt;
            let mut var = 0.0;
            for i in 0..m {
                for j in g * gc..(g + 1) * gc {
                    let d = xd[i * c + j] - mean;
                    var += d * d;
                }
            }
            var /= cnt;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in 0..m {
                for j in g * gc..(g + 1) * gc {
                    out[i * c + j] = (xd[i * c + j] - mean) * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[m, c], out);
        let ng = self.ng(x);
        self.push(Op::GroupNorm { x, groups }, value, ng)
    }

    /// Layer normalization per row (over the channel axis), no affine part.
    pub fn layer_norm_rows(&mut self, x: VarId) -> VarId {
        let vx = &self.nodes[x].value;
        let (m, n) = (vx.rows(), vx.cols());
        let xd = vx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.ng(x);
        self.push(Op::LayerNormRows(x), value, ng)
    }

    /// L2-normalize each row with a floor on the norm: y = x / max(|x|, eps).
    pub fn l2_normalize_rows(&mut self, x: VarId, eps: f64) -> VarId {
        let vx = &self.nodes[x].value;
        let (m, n) = (vx.rows(), vx.cols());
        let xd = vx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let value = Tensor::from_vec(&[m, n], out);
        let ng = self.ng(x);
        self.push(Op::L2NormRows { x, eps }, value, ng)
    }

    pub fn max(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "max shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Max(a, b), value, ng)
    }

    /// Mean of the entries selected by `mask` (1.0 = keep). Mask is constant.
    pub fn masked_mean(&mut self, a: VarId, mask: &[f64]) -> VarId {
        let masked = self.mul_mask_col(a, mask);
        let total = self.sum_all(masked);
        let count: f64 = mask.iter().sum::<f64>() * self.nodes[a].value.cols() as f64;
        self.scale(total, 1.0 / count)
    }

    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(self.nodes[root].value.numel(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let dy = match g[id].take() {
                Some(t) => t,
                None => continue,
            };
            self.accumulate(id, &dy, &mut g);
            g[id] = Some(dy);
        }
        Grads { g }
    }

    fn acc(&self, g: &mut Vec<Option<Tensor>>, id: VarId, delta: &Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut g[id] {
            Some(t) => {
                assert_eq!(t.shape(), delta.shape());
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta.clone()),
        }
    }

    fn accumulate(&self, id: VarId, dy: &Tensor, g: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(g, *a, dy);
                self.acc(g, *b, dy);
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, dy);
                let neg = dy.map(|x| -x);
                self.acc(g, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data().iter().zip(vb.data()).map(|(d, y)| d * y).collect(),
                );
                let db = Tensor::from_vec(
                    dy.shape(),
                    dy.data().iter().zip(va.data()).map(|(d, x)| d * x).collect(),
                );
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
            Op::Scale(a, c) => {
                let da = dy.map(|x| x * c);
                self.acc(g, *a, &da);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.ng(*a) {
                    // da = dy @ b^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy.data()[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += d * vb.data()[p * n + j];
                            }
                        }
                    }
                    self.acc(g, *a, &Tensor::from_vec(&[m, k], da));
                }
                if self.ng(*b) {
                    // db = a^T @ dy
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = va.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * dy.data()[i * n + j];
                            }
                        }
                    }
                    self.acc(g, *b, &Tensor::from_vec(&[k, n], db));
                }
            }
            Op::MatmulNT(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.rows();
                if self.ng(*a) {
                    // da = dy @ b
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy.data()[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += d * vb.data()[j * k + p];
                            }
                        }
                    }
                    self.acc(g, *a, &Tensor::from_vec(&[m, k], da));
                }
                if self.ng(*b) {
                    // db = dy^T @ a
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy.data()[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += d * va.data()[i * k + p];
                            }
                        }
                    }
                    self.acc(g, *b, &Tensor::from_vec(&[n, k], db));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(g, *a, dy);
                if self.ng(*row) {
                    let n = self.nodes[*row].value.numel();
                    let mut dr = vec![0.0; n];
                    for (i, d) in dy.data().iter().enumerate() {
                        dr[i % n] += d;
                    }
                    self.acc(
                        g,
                        *row,
                        &Tensor::from_vec(self.nodes[*row].value.shape(), dr),
                    );
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (&self.nodes[*a].value, &self.nodes[*row].value);
                let n = vr.numel();
                if self.ng(*a) {
                    let rd = vr.data();
                    let da = Tensor::from_vec(
                        dy.shape(),
                        dy.data()
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d * rd[i % n])
                            .collect(),
                    );
                    self.acc(g, *a, &da);
                }
                if self.ng(*row) {
                    let mut dr = vec![0.0; n];
                    for (i, d) in dy.data().iter().enumerate() {
                        dr[i % n] += d * va.data()[i];
                    }
                    self.acc(g, *row, &Tensor::from_vec(vr.shape(), dr));
                }
            }
            Op::MulMaskCol(a, mask) => {
                let n = dy.cols();
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * mask[i / n])
                        .collect(),
                );
                self.acc(g, *a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, s)| d * s * (1.0 - s))
                        .collect(),
                );
                self.acc(g, *a, &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, t)| d * (1.0 - t * t))
                        .collect(),
                );
                self.acc(g, *a, &da);
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(x.data())
                        .map(|(d, &xv)| {
                            let s = 1.0 / (1.0 + (-xv).exp());
                            d * (s + xv * s * (1.0 - s))
                        })
                        .collect(),
                );
                self.acc(g, *a, &da);
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(x.data())
                        .map(|(d, &xv)| d / (1.0 + (-xv).exp()))
                        .collect(),
                );
                self.acc(g, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let dr = &dy.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for j in 0..n {
                        da[i * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.acc(g, *a, &Tensor::from_vec(&[m, n], da));
            }
            Op::ConcatRows(a, b) => {
                let ra = self.nodes[*a].value.rows();
                let rb = self.nodes[*b].value.rows();
                let n = dy.cols();
                let da = Tensor::from_vec(&[ra, n], dy.data()[..ra * n].to_vec());
                let db = Tensor::from_vec(&[rb, n], dy.data()[ra * n..].to_vec());
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
            Op::ConcatCols(a, b) => {
                let na = self.nodes[*a].value.cols();
                let nb = self.nodes[*b].value.cols();
                let m = dy.rows();
                let mut da = Vec::with_capacity(m * na);
                let mut db = Vec::with_capacity(m * nb);
                for i in 0..m {
                    let row = &dy.data()[i * (na + nb)..(i + 1) * (na + nb)];
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                self.acc(g, *a, &Tensor::from_vec(&[m, na], da));
                self.acc(g, *b, &Tensor::from_vec(&[m, nb], db));
            }
            Op::SliceRows(a, start) => {
                let va = &self.nodes[*a].value;
                let mut da = Tensor::zeros(va.shape());
                let n = va.cols();
                da.data_mut()[start * n..start * n + dy.numel()].copy_from_slice(dy.data());
                self.acc(g, *a, &da);
            }
            Op::SliceCols(a, start) => {
                let va = &self.nodes[*a].value;
                let (m, n) = (va.rows(), va.cols());
                let len = dy.cols();
                let mut da = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..len {
                        da.data_mut()[i * n + start + j] = dy.data()[i * len + j];
                    }
                }
                self.acc(g, *a, &da);
            }
            Op::Gather(a, indices) => {
                let va = &self.nodes[*a].value;
                let mut da = Tensor::zeros(va.shape());
                for (o, &src) in indices.iter().enumerate() {
                    da.data_mut()[src] += dy.data()[o];
                }
                self.acc(g, *a, &da);
            }
            Op::SumAll(a) => {
                let va = &self.nodes[*a].value;
                let d = dy.item();
                self.acc(g, *a, &Tensor::filled(va.shape(), d));
            }
            Op::Reshape(a) => {
                let va = &self.nodes[*a].value;
                let da = dy.clone().reshaped(va.shape());
                self.acc(g, *a, &da);
            }
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                kh,
                kw,
            } => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let cin = vx.cols();
                let cout = vw.rows();
                let (ph, pw) = (kh / 2, kw / 2);
                let mut dx = vec![0.0; vx.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; cout];
                let xd = vx.data();
                let wd = vw.data();
                for r in 0..*height {
                    for c in 0..*width {
                        let drow = &dy.data()[(r * width + c) * cout..(r * width + c + 1) * cout];
                        for co in 0..cout {
                            db[co] += drow[co];
                        }
                        for kr in 0..*kh {
                            let rr = r as isize + kr as isize - ph as isize;
                            if rr < 0 || rr >= *height as isize {
                                continue;
                            }
                            for kc in 0..*kw {
                                let cc = c as isize + kc as isize - pw as isize;
                                if cc < 0 || cc >= *width as isize {
                                    continue;
                                }
                                let cell = (rr as usize) * width + cc as usize;
                                for co in 0..cout {
                                    let d = drow[co];
                                    if d == 0.0 {
                                        continue;
                                    }
                                    let wrow = &wd[co * cin * kh * kw..];
                                    for ci in 0..cin {
                                        let widx = ci * kh * kw + kr * kw + kc;
                                        dx[cell * cin + ci] += d * wrow[widx];
                                        dw[co * cin * kh * kw + widx] += d * xd[cell * cin + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(g, *x, &Tensor::from_vec(vx.shape(), dx));
                self.acc(g, *w, &Tensor::from_vec(vw.shape(), dw));
                self.acc(
                    g,
                    *b,
                    &Tensor::from_vec(self.nodes[*b].value.shape(), db),
                );
            }
            Op::GroupNorm { x, groups } => {
                let vx = &self.nodes[*x].value;
                let y = &self.nodes[id].value;
                let (m, c) = (vx.rows(), vx.cols());
                let gc = c / groups;
                let cnt = (m * gc) as f64;
                let mut dx = vec![0.0; m * c];
                for gi in 0..*groups {
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    for i in 0..m {
                        for j in gi * gc..(gi + 1) * gc {
                            mean_dy += dy.data()[i * c + j];
                            mean_dy_xhat += dy.data()[i * c + j] * y.data()[i * c + j];
                        }
                    }
                    mean_dy /= cnt;
                    mean_dy_xhat /= cnt;
                    // Recover 1/std from xhat and x at any non-degenerate point:
                    // recompute from x for robustness.
                    let mut mean = 0.0;
                    for i in 0..m {
                        for j in gi * gc..(gi + 1) * gc {
                            mean += vx.data()[i * c + j];
                        }
                    }
                    mean /= cnt;
                    let mut var = 0.0;
                    for i in 0..m {
                        for j in gi * gc..(gi + 1) * gc {
                            let d = vx.data()[i * c + j] - mean;
                            var += d * d;
                        }
                    }
                    var /= cnt;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    for i in 0..m {
                        for j in gi * gc..(gi + 1) * gc {
                            let idx = i * c + j;
                            dx[idx] =
                                inv * (dy.data()[idx] - mean_dy - y.data()[idx] * mean_dy_xhat);
                        }
                    }
                }
                self.acc(g, *x, &Tensor::from_vec(&[m, c], dx));
            }
            Op::LayerNormRows(x) => {
                let vx = &self.nodes[*x].value;
                let y = &self.nodes[id].value;
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &vx.data()[i * n..(i + 1) * n];
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let dr = &dy.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let mean_dy = dr.iter().sum::<f64>() / n as f64;
                    let mean_dy_xhat = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = inv * (dr[j] - mean_dy - yr[j] * mean_dy_xhat);
                    }
                }
                self.acc(g, *x, &Tensor::from_vec(&[m, n], dx));
            }
            Op::L2NormRows { x, eps } => {
                let vx = &self.nodes[*x].value;
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &vx.data()[i * n..(i + 1) * n];
                    let dr = &dy.data()[i * n..(i + 1) * n];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = row.iter().zip(dr).map(|(x, d)| x * d).sum();
                        let n3 = norm * norm * norm;
                        for j in 0..n {
                            dx[i * n + j] = dr[j] / norm - row[j] * dot / n3;
                        }
                    } else {
                        for j in 0..n {
                            dx[i * n + j] = dr[j] / eps;
                        }
                    }
                }
                self.acc(g, *x, &Tensor::from_vec(&[m, n], dx));
            }
            Op::Max(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for (i, d) in dy.data().iter().enumerate() {
                    if va.data()[i] >= vb.data()[i] {
                        da.data_mut()[i] = *d;
                    } else {
                        db.data_mut()[i] = *d;
                    }
                }
                self.acc(g, *a, &da);
                self.acc(g, *b, &db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of a scalar-valued tape program against its
    /// analytic gradient for every leaf.
    fn check_grads(
        build: impl Fn(&mut Tape, &[VarId]) -> VarId,
        leaves: &[Tensor],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]).cloned().unwrap_or(Tensor::zeros(leaf.shape()));
            for e in 0..leaf.numel() {
                let eval = |v: f64| {
                    let mut t2 = Tape::new();
                    let ids2: Vec<VarId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[e] = v;
                            }
                            t2.leaf(t)
                        })
                        .collect();
                    let r = build(&mut t2, &ids2);
                    t2.value(r).item()
                };
                let x = leaf.data()[e];
                let num = (eval(x + h) - eval(x - h)) / (2.0 * h);
                let ana = analytic.data()[e];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "leaf {li} elem {e}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[1, 2]);
        check_grads(
            |t, ids| {
                let h = t.matmul(ids[0], ids[1]);
                let h = t.add_row(h, ids[2]);
                let h = t.tanh(h);
                let h = t.softplus(h);
                t.sum_all(h)
            },
            &[a, b, c],
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_nt_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, &[3, 4]);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let v = rand_tensor(&mut rng, &[5, 4]);
        check_grads(
            |t, ids| {
                let s = t.matmul_nt(ids[0], ids[1]);
                let a = t.softmax_rows(s);
                let o = t.matmul(a, ids[2]);
                let o = t.silu(o);
                t.sum_all(o)
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[12, 2]); // 3x4 map, 2 channels
        let w = rand_tensor(&mut rng, &[3, 2 * 9]);
        let b = rand_tensor(&mut rng, &[1, 3]);
        check_grads(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 3, 4, 3, 3);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            &[x, w, b],
            1e-5,
        );
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        check_grads(
            |t, ids| {
                let a = t.group_norm(ids[0], 2);
                let b = t.layer_norm_rows(a);
                let c = t.l2_normalize_rows(b, 1e-8);
                let d = t.mul(c, ids[1]);
                let d = t.silu(d);
                t.sum_all(d)
            },
            &[x, w],
            1e-4,
        );
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4, 3]);
        check_grads(
            |t, ids| {
                let c = t.concat_cols(ids[0], ids[1]);
                let c = t.concat_rows(c, c);
                let s = t.slice_rows(c, 1, 3);
                let s = t.slice_cols(s, 1, 4);
                let idx: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
                let gshape = [idx.len(), 1];
                let gd = t.gather(s, &idx, &gshape);
                let m = t.max(ids[0], ids[1]);
                let ms = t.sum_all(m);
                let gs = t.sum_all(gd);
                let tot = t.add(ms, gs);
                t.reshape(tot, &[1, 1])
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn grad_mask_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[4, 2]);
        let mask = [1.0, 0.0, 1.0, 1.0];
        check_grads(
            |t, ids| {
                let y = t.mul(ids[0], ids[0]);
                t.masked_mean(y, &mask)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn masked_cells_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]));
        let y = tape.mul_mask_col(x, &[1.0, 0.0, 1.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0]);
    }
}
