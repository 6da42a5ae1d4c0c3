//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops are evaluated eagerly; each op pushes a closure that knows how
//! to propagate the output gradient to its inputs. Gradients only flow into
//! subgraphs that contain a trainable leaf, so constant branches (teacher
//! outputs, raw pixels) cost nothing at backward time.
//!
//! Shape misuse inside the tape is a programming error and panics; the
//! fallible contracts live on the public module surfaces that feed it.

use super::linalg::{axpy, mm, mm_nt, mm_tn};
use super::tensor::{r, Real, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn<T> = Box<dyn Fn(&[Tensor<T>], &[T], &mut GradStore<T>)>;

/// Per-node gradient buffers, indexed by tape id.
pub struct GradStore<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradStore<T> {
    fn new(n: usize) -> Self {
        GradStore {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    fn buf(&mut self, id: usize, len: usize) -> &mut [T] {
        self.slots[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.id].as_deref()
    }
}

pub struct Tape<T: Real> {
    vals: Vec<Tensor<T>>,
    backs: Vec<Option<BackFn<T>>>,
    needs: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.id]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.id].shape()
    }

    fn push(&mut self, value: Tensor<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.backs.push(if needs { back } else { None });
        self.needs.push(needs);
        Var { id }
    }

    /// Trainable leaf: gradients accumulate here during backward.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), true, None)
    }

    /// Constant leaf: no gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, None)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn need(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs[v.id])
    }

    /// Run reverse-mode accumulation from the given seeds. Multiple seeds are
    /// summed, which lets a caller inject externally computed gradients at
    /// interior nodes.
    pub fn backward(&self, seeds: &[(Var, Vec<T>)]) -> GradStore<T> {
        let mut gs = GradStore::new(self.vals.len());
        for (v, seed) in seeds {
            let n = self.vals[v.id].numel();
            assert_eq!(seed.len(), n, "seed length must match node shape");
            axpy(gs.buf(v.id, n), T::one(), seed);
        }
        for id in (0..self.vals.len()).rev() {
            if gs.slots[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                let g = gs.slots[id].take().unwrap();
                back(&self.vals, &g, &mut gs);
            }
        }
        gs
    }

    /// Backward from a scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> GradStore<T> {
        assert_eq!(self.vals[loss.id].numel(), 1, "backward_scalar needs a scalar");
        self.backward(&[(loss, vec![T::one()])])
    }

    // ---- matrix ops -------------------------------------------------------

    /// x[.., K] @ w[K, N] (+ b[N]); all leading axes of x are batch rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (k, n) = self.vals[w.id].dims2().expect("linear weight must be 2-d");
        let xv = &self.vals[x.id];
        assert_eq!(xv.last_dim(), k, "linear: inner dims disagree");
        let m = xv.rows();
        let mut out = vec![T::zero(); m * n];
        mm(&mut out, xv.data(), self.vals[w.id].data(), m, k, n);
        if let Some(bv) = b {
            let bias = self.vals[bv.id].data();
            assert_eq!(bias.len(), n);
            for row in out.chunks_mut(n) {
                axpy(row, T::one(), bias);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out).unwrap();

        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let needs = self.need(&inputs);
        let (nx, nw) = (self.needs[x.id], self.needs[w.id]);
        let nb = b.map(|bv| self.needs[bv.id]).unwrap_or(false);
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            if nx {
                let dx = gs.buf(x.id, m * k);
                mm_nt(dx, g, vals[w.id].data(), m, n, k);
            }
            if nw {
                let dw = gs.buf(w.id, k * n);
                mm_tn(dw, vals[x.id].data(), g, m, k, n);
            }
            if nb {
                let bv = b.unwrap();
                let db = gs.buf(bv.id, n);
                for row in g.chunks(n) {
                    axpy(db, T::one(), row);
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// x[M, K] @ w[N, K]^T -> [M, N]
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let (m, k) = self.vals[x.id].dims2().expect("matmul_nt lhs must be 2-d");
        let (n, k2) = self.vals[w.id].dims2().expect("matmul_nt rhs must be 2-d");
        assert_eq!(k, k2, "matmul_nt: inner dims disagree");
        let mut out = vec![T::zero(); m * n];
        mm_nt(&mut out, self.vals[x.id].data(), self.vals[w.id].data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], out).unwrap();

        let needs = self.need(&[x, w]);
        let (nx, nw) = (self.needs[x.id], self.needs[w.id]);
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            if nx {
                let dx = gs.buf(x.id, m * k);
                mm(dx, g, vals[w.id].data(), m, n, k);
            }
            if nw {
                let dw = gs.buf(w.id, n * k);
                mm_tn(dw, g, vals[x.id].data(), m, n, k);
            }
        });
        self.push(value, needs, Some(back))
    }

    /// a[G, M, K] @ b[G, K, N] -> [G, M, N]
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ga, m, k) = self.vals[a.id].dims3().expect("bmm lhs must be 3-d");
        let (gb, k2, n) = self.vals[b.id].dims3().expect("bmm rhs must be 3-d");
        assert_eq!(ga, gb, "bmm: batch dims disagree");
        assert_eq!(k, k2, "bmm: inner dims disagree");
        let mut out = vec![T::zero(); ga * m * n];
        for gi in 0..ga {
            mm(
                &mut out[gi * m * n..(gi + 1) * m * n],
                &self.vals[a.id].data()[gi * m * k..(gi + 1) * m * k],
                &self.vals[b.id].data()[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_vec(&[ga, m, n], out).unwrap();

        let needs = self.need(&[a, b]);
        let (na, nb) = (self.needs[a.id], self.needs[b.id]);
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            if na {
                let da = gs.buf(a.id, ga * m * k);
                for gi in 0..ga {
                    mm_nt(
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        &g[gi * m * n..(gi + 1) * m * n],
                        &vals[b.id].data()[gi * k * n..(gi + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                }
            }
            if nb {
                let db = gs.buf(b.id, ga * k * n);
                for gi in 0..ga {
                    mm_tn(
                        &mut db[gi * k * n..(gi + 1) * k * n],
                        &vals[a.id].data()[gi * m * k..(gi + 1) * m * k],
                        &g[gi * m * n..(gi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// a[G, M, K] @ b[G, N, K]^T -> [G, M, N]  (attention q @ k^T)
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (ga, m, k) = self.vals[a.id].dims3().expect("bmm_nt lhs must be 3-d");
        let (gb, n, k2) = self.vals[b.id].dims3().expect("bmm_nt rhs must be 3-d");
        assert_eq!(ga, gb, "bmm_nt: batch dims disagree");
        assert_eq!(k, k2, "bmm_nt: inner dims disagree");
        let mut out = vec![T::zero(); ga * m * n];
        for gi in 0..ga {
            mm_nt(
                &mut out[gi * m * n..(gi + 1) * m * n],
                &self.vals[a.id].data()[gi * m * k..(gi + 1) * m * k],
                &self.vals[b.id].data()[gi * n * k..(gi + 1) * n * k],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_vec(&[ga, m, n], out).unwrap();

        let needs = self.need(&[a, b]);
        let (na, nb) = (self.needs[a.id], self.needs[b.id]);
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            if na {
                let da = gs.buf(a.id, ga * m * k);
                for gi in 0..ga {
                    mm(
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        &g[gi * m * n..(gi + 1) * m * n],
                        &vals[b.id].data()[gi * n * k..(gi + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if nb {
                let db = gs.buf(b.id, ga * n * k);
                for gi in 0..ga {
                    // d b[n,k] = sum_m g[m,n] a[m,k]
                    mm_tn(
                        &mut db[gi * n * k..(gi + 1) * n * k],
                        &g[gi * m * n..(gi + 1) * m * n],
                        &vals[a.id].data()[gi * m * k..(gi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    // ---- elementwise and shape ops ----------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.id].shape(), self.vals[b.id].shape(), "add: shape mismatch");
        let mut out = self.vals[a.id].clone();
        axpy(out.data_mut(), T::one(), self.vals[b.id].data());
        let needs = self.need(&[a, b]);
        let (na, nb) = (self.needs[a.id], self.needs[b.id]);
        let n = out.numel();
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            if na {
                axpy(gs.buf(a.id, n), T::one(), g);
            }
            if nb {
                axpy(gs.buf(b.id, n), T::one(), g);
            }
        });
        self.push(out, needs, Some(back))
    }

    /// x + y where y's shape is a suffix of x's shape (y is tiled over the
    /// leading axes of x).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let ny = self.vals[y.id].numel();
        let nx = self.vals[x.id].numel();
        assert!(ny > 0 && nx % ny == 0, "add_broadcast: incompatible sizes");
        let suffix = self.vals[y.id].shape();
        let xs = self.vals[x.id].shape();
        assert!(
            xs.ends_with(suffix),
            "add_broadcast: {suffix:?} is not a suffix of {xs:?}"
        );
        let mut out = self.vals[x.id].clone();
        for chunk in out.data_mut().chunks_mut(ny) {
            axpy(chunk, T::one(), self.vals[y.id].data());
        }
        let needs = self.need(&[x, y]);
        let (nxf, nyf) = (self.needs[x.id], self.needs[y.id]);
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            if nxf {
                axpy(gs.buf(x.id, nx), T::one(), g);
            }
            if nyf {
                let dy = gs.buf(y.id, ny);
                for chunk in g.chunks(ny) {
                    axpy(dy, T::one(), chunk);
                }
            }
        });
        self.push(out, needs, Some(back))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.vals[a.id].shape(),
            self.vals[b.id].shape(),
            "mul_elem: shape mismatch"
        );
        let mut out = self.vals[a.id].clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.vals[b.id].data()) {
            *o *= bv;
        }
        let needs = self.need(&[a, b]);
        let (na, nb) = (self.needs[a.id], self.needs[b.id]);
        let n = out.numel();
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            if na {
                let bv = vals[b.id].data();
                let da = gs.buf(a.id, n);
                for i in 0..n {
                    da[i] += g[i] * bv[i];
                }
            }
            if nb {
                let av = vals[a.id].data();
                let db = gs.buf(b.id, n);
                for i in 0..n {
                    db[i] += g[i] * av[i];
                }
            }
        });
        self.push(out, needs, Some(back))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.vals[x.id].clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs[x.id];
        let n = out.numel();
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            axpy(gs.buf(x.id, n), c, g);
        });
        self.push(out, needs, Some(back))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.vals[x.id].clone().reshaped(shape).expect("reshape: numel mismatch");
        let needs = self.needs[x.id];
        let n = out.numel();
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            axpy(gs.buf(x.id, n), T::one(), g);
        });
        self.push(out, needs, Some(back))
    }

    /// Layer normalization over the last axis with affine scale/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let d = self.vals[x.id].last_dim();
        assert_eq!(self.vals[gamma.id].numel(), d);
        assert_eq!(self.vals[beta.id].numel(), d);
        let rows = self.vals[x.id].rows();
        let mut out = vec![T::zero(); rows * d];
        {
            let xd = self.vals[x.id].data();
            let gd = self.vals[gamma.id].data();
            let bd = self.vals[beta.id].data();
            for rix in 0..rows {
                let xr = &xd[rix * d..(rix + 1) * d];
                let (mu, var) = row_moments(xr);
                let inv = (var + eps).sqrt().recip();
                let orow = &mut out[rix * d..(rix + 1) * d];
                for i in 0..d {
                    orow[i] = gd[i] * ((xr[i] - mu) * inv) + bd[i];
                }
            }
        }
        let value = Tensor::from_vec(self.vals[x.id].shape(), out).unwrap();
        let needs = self.need(&[x, gamma, beta]);
        let (nx, ng, nb) = (self.needs[x.id], self.needs[gamma.id], self.needs[beta.id]);
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let xd = vals[x.id].data();
            let gd = vals[gamma.id].data();
            let inv_d = r::<T>(1.0) / r::<T>(d as f64);
            // accumulate into local buffers first, then flush once
            let mut dgamma = vec![T::zero(); if ng { d } else { 0 }];
            let mut dbeta = vec![T::zero(); if nb { d } else { 0 }];
            if nx {
                let dx = gs.buf(x.id, rows * d);
                for rix in 0..rows {
                    let xr = &xd[rix * d..(rix + 1) * d];
                    let gr = &g[rix * d..(rix + 1) * d];
                    let (mu, var) = row_moments(xr);
                    let inv = (var + eps).sqrt().recip();
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for i in 0..d {
                        let xh = (xr[i] - mu) * inv;
                        let dxh = gr[i] * gd[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        if ng {
                            dgamma[i] += gr[i] * xh;
                        }
                        if nb {
                            dbeta[i] += gr[i];
                        }
                    }
                    let m1 = sum_dxh * inv_d;
                    let m2 = sum_dxh_xh * inv_d;
                    let drow = &mut dx[rix * d..(rix + 1) * d];
                    for i in 0..d {
                        let xh = (xr[i] - mu) * inv;
                        drow[i] += inv * (gr[i] * gd[i] - m1 - xh * m2);
                    }
                }
            } else {
                for rix in 0..rows {
                    let xr = &xd[rix * d..(rix + 1) * d];
                    let gr = &g[rix * d..(rix + 1) * d];
                    let (mu, var) = row_moments(xr);
                    let inv = (var + eps).sqrt().recip();
                    for i in 0..d {
                        if ng {
                            dgamma[i] += gr[i] * (xr[i] - mu) * inv;
                        }
                        if nb {
                            dbeta[i] += gr[i];
                        }
                    }
                }
            }
            if ng {
                axpy(gs.buf(gamma.id, d), T::one(), &dgamma);
            }
            if nb {
                axpy(gs.buf(beta.id, d), T::one(), &dbeta);
            }
        });
        self.push(value, needs, Some(back))
    }

    /// GELU by the tanh approximation (documented constants, see `gelu_tanh`).
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.vals[x.id].clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_tanh(*v));
        let needs = self.needs[x.id];
        let n = out.numel();
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let xd = vals[x.id].data();
            let dx = gs.buf(x.id, n);
            for i in 0..n {
                dx[i] += g[i] * gelu_tanh_deriv(xd[i]);
            }
        });
        self.push(out, needs, Some(back))
    }

    /// Row softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let d = self.vals[x.id].last_dim();
        let rows = self.vals[x.id].rows();
        let mut out = self.vals[x.id].data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(self.vals[x.id].shape(), out).unwrap();
        let needs = self.needs[x.id];
        let out_id = self.vals.len(); // id this node will get
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let p = vals[out_id].data();
            let dx = gs.buf(x.id, rows * d);
            for rix in 0..rows {
                let pr = &p[rix * d..(rix + 1) * d];
                let gr = &g[rix * d..(rix + 1) * d];
                let mut dotpg = T::zero();
                for i in 0..d {
                    dotpg += pr[i] * gr[i];
                }
                let drow = &mut dx[rix * d..(rix + 1) * d];
                for i in 0..d {
                    drow[i] += pr[i] * (gr[i] - dotpg);
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Rows scaled to unit Euclidean norm; rows shorter than `eps` divide by
    /// `eps` instead (zero-vector guard).
    pub fn l2norm_rows(&mut self, x: Var, eps: T) -> Var {
        let d = self.vals[x.id].last_dim();
        let rows = self.vals[x.id].rows();
        let mut out = self.vals[x.id].data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b).sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        let value = Tensor::from_vec(self.vals[x.id].shape(), out).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let xd = vals[x.id].data();
            let dx = gs.buf(x.id, rows * d);
            for rix in 0..rows {
                let xr = &xd[rix * d..(rix + 1) * d];
                let gr = &g[rix * d..(rix + 1) * d];
                let norm = xr.iter().map(|v| *v * *v).fold(T::zero(), |a, b| a + b).sqrt();
                let drow = &mut dx[rix * d..(rix + 1) * d];
                if norm >= eps {
                    let mut gy = T::zero();
                    for i in 0..d {
                        gy += gr[i] * xr[i];
                    }
                    gy /= norm * norm;
                    for i in 0..d {
                        drow[i] += (gr[i] - xr[i] * gy) / norm;
                    }
                } else {
                    for i in 0..d {
                        drow[i] += gr[i] / eps;
                    }
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Columns [lo, hi) of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let (m, c) = self.vals[x.id].dims2().expect("slice_cols needs 2-d");
        assert!(lo < hi && hi <= c);
        let w = hi - lo;
        let mut out = vec![T::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&self.vals[x.id].data()[i * c + lo..i * c + hi]);
        }
        let value = Tensor::from_vec(&[m, w], out).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let dx = gs.buf(x.id, m * c);
            for i in 0..m {
                axpy(&mut dx[i * c + lo..i * c + hi], T::one(), &g[i * w..(i + 1) * w]);
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Slice [lo, hi) along axis 1 of a 3-d tensor.
    pub fn slice_axis1(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let (a, b, c) = self.vals[x.id].dims3().expect("slice_axis1 needs 3-d");
        assert!(lo < hi && hi <= b);
        let w = hi - lo;
        let mut out = vec![T::zero(); a * w * c];
        for ai in 0..a {
            let src = &self.vals[x.id].data()[(ai * b + lo) * c..(ai * b + hi) * c];
            out[ai * w * c..(ai + 1) * w * c].copy_from_slice(src);
        }
        let value = Tensor::from_vec(&[a, w, c], out).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let dx = gs.buf(x.id, a * b * c);
            for ai in 0..a {
                axpy(
                    &mut dx[(ai * b + lo) * c..(ai * b + hi) * c],
                    T::one(),
                    &g[ai * w * c..(ai + 1) * w * c],
                );
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Gather rows of a 2-d tensor (duplicates allowed; backward scatter-adds).
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (m, d) = self.vals[x.id].dims2().expect("select_rows needs 2-d");
        let n = idx.len();
        let mut out = vec![T::zero(); n * d];
        for (row, &src) in idx.iter().enumerate() {
            assert!(src < m, "select_rows: index out of range");
            out[row * d..(row + 1) * d].copy_from_slice(&self.vals[x.id].data()[src * d..(src + 1) * d]);
        }
        let value = Tensor::from_vec(&[n, d], out).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let dx = gs.buf(x.id, m * d);
            for (row, &src) in idx.iter().enumerate() {
                axpy(&mut dx[src * d..(src + 1) * d], T::one(), &g[row * d..(row + 1) * d]);
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Stack along axis 0; all inputs must share trailing shape.
    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail: Vec<usize> = self.vals[xs[0].id].shape()[1..].to_vec();
        let mut rows = 0usize;
        for v in xs {
            assert_eq!(&self.vals[v.id].shape()[1..], tail.as_slice(), "concat0: tail mismatch");
            rows += self.vals[v.id].shape()[0];
        }
        let tail_n: usize = tail.iter().product();
        let mut out = Vec::with_capacity(rows * tail_n);
        for v in xs {
            out.extend_from_slice(self.vals[v.id].data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::from_vec(&shape, out).unwrap();
        let needs = self.need(xs);
        let parts: Vec<(Var, usize, bool)> = xs
            .iter()
            .map(|v| (*v, self.vals[v.id].numel(), self.needs[v.id]))
            .collect();
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let mut off = 0usize;
            for (v, n, needed) in &parts {
                if *needed {
                    axpy(gs.buf(v.id, *n), T::one(), &g[off..off + n]);
                }
                off += n;
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Concatenate two 3-d tensors along axis 1.
    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Var {
        let (aa, ab, ac) = self.vals[a.id].dims3().expect("concat_axis1 needs 3-d");
        let (ba, bb, bc) = self.vals[b.id].dims3().expect("concat_axis1 needs 3-d");
        assert_eq!(aa, ba);
        assert_eq!(ac, bc);
        let nb = ab + bb;
        let mut out = vec![T::zero(); aa * nb * ac];
        for ai in 0..aa {
            out[ai * nb * ac..(ai * nb + ab) * ac]
                .copy_from_slice(&self.vals[a.id].data()[ai * ab * ac..(ai + 1) * ab * ac]);
            out[(ai * nb + ab) * ac..(ai + 1) * nb * ac]
                .copy_from_slice(&self.vals[b.id].data()[ai * bb * ac..(ai + 1) * bb * ac]);
        }
        let value = Tensor::from_vec(&[aa, nb, ac], out).unwrap();
        let needs = self.need(&[a, b]);
        let (na, nbf) = (self.needs[a.id], self.needs[b.id]);
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            if na {
                let da = gs.buf(a.id, aa * ab * ac);
                for ai in 0..aa {
                    axpy(
                        &mut da[ai * ab * ac..(ai + 1) * ab * ac],
                        T::one(),
                        &g[ai * nb * ac..(ai * nb + ab) * ac],
                    );
                }
            }
            if nbf {
                let db = gs.buf(b.id, ba * bb * ac);
                for ai in 0..aa {
                    axpy(
                        &mut db[ai * bb * ac..(ai + 1) * bb * ac],
                        T::one(),
                        &g[(ai * nb + ab) * ac..(ai + 1) * nb * ac],
                    );
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Tile a vector into `count` identical rows.
    pub fn repeat_row(&mut self, v: Var, count: usize) -> Var {
        let d = self.vals[v.id].numel();
        let mut out = Vec::with_capacity(count * d);
        for _ in 0..count {
            out.extend_from_slice(self.vals[v.id].data());
        }
        let value = Tensor::from_vec(&[count, d], out).unwrap();
        let needs = self.needs[v.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let dv = gs.buf(v.id, d);
            for row in g.chunks(d) {
                axpy(dv, T::one(), row);
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Replace masked rows of x[M, D] by a learned token vector.
    pub fn mask_blend(&mut self, x: Var, mask: Vec<bool>, tok: Var) -> Var {
        let (m, d) = self.vals[x.id].dims2().expect("mask_blend needs 2-d");
        assert_eq!(mask.len(), m, "mask_blend: mask length mismatch");
        assert_eq!(self.vals[tok.id].numel(), d);
        let mut out = self.vals[x.id].data().to_vec();
        for (row, &masked) in mask.iter().enumerate() {
            if masked {
                out[row * d..(row + 1) * d].copy_from_slice(self.vals[tok.id].data());
            }
        }
        let value = Tensor::from_vec(&[m, d], out).unwrap();
        let needs = self.need(&[x, tok]);
        let (nx, nt) = (self.needs[x.id], self.needs[tok.id]);
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            if nx {
                let dx = gs.buf(x.id, m * d);
                for (row, &masked) in mask.iter().enumerate() {
                    if !masked {
                        axpy(&mut dx[row * d..(row + 1) * d], T::one(), &g[row * d..(row + 1) * d]);
                    }
                }
            }
            if nt {
                let dt = gs.buf(tok.id, d);
                for (row, &masked) in mask.iter().enumerate() {
                    if masked {
                        axpy(dt, T::one(), &g[row * d..(row + 1) * d]);
                    }
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Swap axes 1 and 2 of a 4-d tensor: [A, B, C, D] -> [A, C, B, D].
    pub fn permute_12(&mut self, x: Var) -> Var {
        let s = self.vals[x.id].shape().to_vec();
        assert_eq!(s.len(), 4, "permute_12 needs 4-d");
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let value = Tensor::from_vec(&[a, c, b, d], permute_abcd(self.vals[x.id].data(), a, b, c, d)).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            // inverse of (a,b,c,d)->(a,c,b,d) is the same swap on the permuted dims
            let ginv = permute_abcd(g, a, c, b, d);
            axpy(gs.buf(x.id, a * b * c * d), T::one(), &ginv);
        });
        self.push(value, needs, Some(back))
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.vals[x.id].numel();
        assert!(n > 0);
        let mut s = T::zero();
        for v in self.vals[x.id].data() {
            s += *v;
        }
        let value = Tensor::scalar(s / r::<T>(n as f64));
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let coef = g[0] / r::<T>(n as f64);
            let dx = gs.buf(x.id, n);
            dx.iter_mut().for_each(|v| *v += coef);
        });
        self.push(value, needs, Some(back))
    }

    /// Weighted sum of scalar nodes -> scalar.
    pub fn affine_combine(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for (v, w) in terms {
            assert_eq!(self.vals[v.id].numel(), 1, "affine_combine needs scalars");
            s += self.vals[v.id].item() * *w;
        }
        let value = Tensor::scalar(s);
        let needs = self.need(&terms.iter().map(|(v, _)| *v).collect::<Vec<_>>());
        let terms = terms.to_vec();
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            for (v, w) in &terms {
                gs.buf(v.id, 1)[0] += g[0] * *w;
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Mean over rows of the cross-entropy between constant target rows `p`
    /// and the tempered softmax of variable logit rows `z`:
    ///   (1/M) sum_m  -sum_k p[m,k] * log softmax(z[m]/tau)[k]
    pub fn soft_ce(&mut self, p: &Tensor<T>, z: Var, tau: T) -> Var {
        let (m, k) = self.vals[z.id].dims2().expect("soft_ce logits must be 2-d");
        assert_eq!(p.shape(), &[m, k], "soft_ce: target/logit shape mismatch");
        assert!(m > 0, "soft_ce: empty batch");
        let mut total = T::zero();
        {
            let zd = self.vals[z.id].data();
            let pd = p.data();
            let mut logq = vec![T::zero(); k];
            for row in 0..m {
                let zr = &zd[row * k..(row + 1) * k];
                log_softmax_tempered(zr, tau, &mut logq);
                let pr = &pd[row * k..(row + 1) * k];
                for i in 0..k {
                    total -= pr[i] * logq[i];
                }
            }
        }
        let value = Tensor::scalar(total / r::<T>(m as f64));
        let needs = self.needs[z.id];
        let p = p.clone();
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let zd = vals[z.id].data();
            let pd = p.data();
            let dz = gs.buf(z.id, m * k);
            let coef = g[0] / (tau * r::<T>(m as f64));
            let mut q = vec![T::zero(); k];
            for row in 0..m {
                let zr = &zd[row * k..(row + 1) * k];
                q.copy_from_slice(zr);
                q.iter_mut().for_each(|v| *v /= tau);
                softmax_in_place(&mut q);
                let pr = &pd[row * k..(row + 1) * k];
                let psum = pr.iter().fold(T::zero(), |a, b| a + *b);
                let drow = &mut dz[row * k..(row + 1) * k];
                for i in 0..k {
                    drow[i] += coef * (q[i] * psum - pr[i]);
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Differential-entropy regularizer from nearest-neighbor distances:
    ///   -(1/n) sum_i ln(max(d_i, eps)),  d_i = min_{j != i} |x_i - x_j|.
    pub fn koleo(&mut self, x: Var, eps: T) -> Var {
        let (n, d) = self.vals[x.id].dims2().expect("koleo needs 2-d");
        assert!(n >= 2, "koleo needs at least two rows");
        let (value, nn) = {
            let xd = self.vals[x.id].data();
            let (dists, nn) = nearest_neighbors(xd, n, d);
            let mut s = T::zero();
            for &di in &dists {
                s -= di.max(eps).ln();
            }
            (Tensor::scalar(s / r::<T>(n as f64)), nn)
        };
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |vals, g, gs| {
            let xd = vals[x.id].data();
            let dx = gs.buf(x.id, n * d);
            let inv_n = r::<T>(1.0) / r::<T>(n as f64);
            for i in 0..n {
                let j = nn[i];
                let mut dist2 = T::zero();
                for c in 0..d {
                    let diff = xd[i * d + c] - xd[j * d + c];
                    dist2 += diff * diff;
                }
                let dist = dist2.sqrt();
                if dist <= eps {
                    continue; // clamped: flat in x
                }
                let coef = -g[0] * inv_n / dist2;
                for c in 0..d {
                    let diff = xd[i * d + c] - xd[j * d + c];
                    dx[i * d + c] += coef * diff;
                    dx[j * d + c] -= coef * diff;
                }
            }
        });
        self.push(value, needs, Some(back))
    }

    /// Bilinear resample of a g x g grid of D-vectors to h x h (align-corners).
    pub fn bilinear_grid(&mut self, x: Var, g_side: usize, h_side: usize) -> Var {
        let (rows, d) = self.vals[x.id].dims2().expect("bilinear_grid needs 2-d");
        assert_eq!(rows, g_side * g_side, "bilinear_grid: row count != g^2");
        if g_side == h_side {
            return x; // bit-identical by contract
        }
        let taps = bilinear_taps(g_side, h_side);
        let mut out = vec![T::zero(); h_side * h_side * d];
        {
            let xd = self.vals[x.id].data();
            for (row, tap) in taps.iter().enumerate() {
                let orow = &mut out[row * d..(row + 1) * d];
                for &(src, w) in tap.iter().take_while(|(_, w)| *w > 0.0) {
                    axpy(orow, r::<T>(w), &xd[src * d..(src + 1) * d]);
                }
            }
        }
        let value = Tensor::from_vec(&[h_side * h_side, d], out).unwrap();
        let needs = self.needs[x.id];
        let back: BackFn<T> = Box::new(move |_, g, gs| {
            let dx = gs.buf(x.id, rows * d);
            for (row, tap) in taps.iter().enumerate() {
                let grow = &g[row * d..(row + 1) * d];
                for &(src, w) in tap.iter().take_while(|(_, w)| *w > 0.0) {
                    axpy(&mut dx[src * d..(src + 1) * d], r::<T>(w), grow);
                }
            }
        });
        self.push(value, needs, Some(back))
    }
}

// ---- shared math helpers (also used by plain, non-tape code paths) --------

pub(crate) fn row_moments<T: Real>(row: &[T]) -> (T, T) {
    let n = r::<T>(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = T::zero();
    for &v in row {
        let c = v - mu;
        var += c * c;
    }
    (mu, var / n)
}

/// In-place max-subtracted softmax.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log softmax(z / tau) into `out`, max-subtracted.
pub(crate) fn log_softmax_tempered<T: Real>(z: &[T], tau: T, out: &mut [T]) {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - mx) / tau;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// GELU tanh approximation: 0.5 x (1 + tanh(c (x + a x^3))) with
/// c = sqrt(2/pi) = 0.7978845608028654, a = 0.044715.
pub fn gelu_tanh<T: Real>(x: T) -> T {
    let c = r::<T>(0.797_884_560_802_865_4);
    let a = r::<T>(0.044_715);
    let u = c * (x + a * x * x * x);
    r::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_tanh_deriv<T: Real>(x: T) -> T {
    let c = r::<T>(0.797_884_560_802_865_4);
    let a = r::<T>(0.044_715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    r::<T>(0.5) * (T::one() + t) + r::<T>(0.5) * x * sech2 * c * (T::one() + r::<T>(3.0) * a * x * x)
}

fn permute_abcd<T: Real>(x: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a * b * c * d];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * d;
                let dst = ((ai * c + ci) * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn nearest_neighbors<T: Real>(x: &[T], n: usize, d: usize) -> (Vec<T>, Vec<usize>) {
    let mut dists = vec![T::infinity(); n];
    let mut nn = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = T::zero();
            for c in 0..d {
                let diff = x[i * d + c] - x[j * d + c];
                d2 += diff * diff;
            }
            let dist = d2.sqrt();
            if dist < dists[i] {
                dists[i] = dist;
                nn[i] = j;
            }
        }
    }
    (dists, nn)
}

/// Up to four (source cell, weight) taps per target cell for an
/// align-corners bilinear resample between square grids. Taps with zero
/// weight are padded at the end.
pub(crate) fn bilinear_taps(g: usize, h: usize) -> Vec<[(usize, f64); 4]> {
    let axis = |t: usize| -> (usize, usize, f64) {
        if h == 1 {
            let pos = (g - 1) as f64 / 2.0;
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, pos - i0 as f64)
        } else {
            let pos = t as f64 * (g - 1) as f64 / (h - 1) as f64;
            let i0 = (pos.floor() as usize).min(g - 1);
            let i1 = (i0 + 1).min(g - 1);
            (i0, i1, pos - i0 as f64)
        }
    };
    let mut taps = Vec::with_capacity(h * h);
    for ty in 0..h {
        let (y0, y1, wy) = axis(ty);
        for tx in 0..h {
            let (x0, x1, wx) = axis(tx);
            let mut tap = [(0usize, 0.0f64); 4];
            let cells = [
                (y0 * g + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * g + x1, (1.0 - wy) * wx),
                (y1 * g + x0, wy * (1.0 - wx)),
                (y1 * g + x1, wy * wx),
            ];
            let mut k = 0;
            for (src, w) in cells {
                if w > 0.0 {
                    // merge duplicate cells (i0 == i1 at the border)
                    if let Some(slot) = tap[..k].iter_mut().find(|(s, _)| *s == src) {
                        slot.1 += w;
                    } else {
                        tap[k] = (src, w);
                        k += 1;
                    }
                }
            }
            taps.push(tap);
        }
    }
    taps
}
