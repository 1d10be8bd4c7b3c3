//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Each op evaluates eagerly and, when any input participates in
//! gradients, records a backward closure. Insertion order is a valid
//! topological order, so [`Graph::backward`] replays the tape in reverse
//! exactly once. A graph is built per forward pass and discarded after
//! backward.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn()>;

/// Tape of recorded operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<BackwardFn>>,
}

/// Decompose `shape` around `axis` into (outer, lane length, inner stride).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, f: BackwardFn) {
        self.nodes.borrow_mut().push(f);
    }

    fn output(&self, shape: Vec<usize>, values: Vec<f64>, traced: bool) -> Tensor {
        if traced {
            Tensor::traced(shape, values)
        } else {
            Tensor::from_vec(&shape, values).unwrap()
        }
    }

    /// `x[B,K] @ w[K,M] + b[M]`.
    pub fn affine(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: ws,
                rhs: bs,
            });
        }
        let (rows, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; rows * m];
        {
            let xv = x.values();
            let wv = w.values();
            let bv = b.values();
            for i in 0..rows {
                let xrow = &xv[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                orow.copy_from_slice(&bv);
                for (kk, &xik) in xrow.iter().enumerate() {
                    let wrow = &wv[kk * m..(kk + 1) * m];
                    for j in 0..m {
                        orow[j] += xik * wrow[j];
                    }
                }
            }
        }
        let traced = x.requires_grad() || w.requires_grad() || b.requires_grad();
        let out = self.output(vec![rows, m], out, traced);
        if traced {
            let (x, w, b, o) = (x.clone(), w.clone(), b.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let xv = x.to_vec();
                let wv = w.to_vec();
                if x.requires_grad() {
                    let mut dx = vec![0.0; rows * k];
                    for i in 0..rows {
                        for kk in 0..k {
                            let wrow = &wv[kk * m..(kk + 1) * m];
                            let grow = &g[i * m..(i + 1) * m];
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += grow[j] * wrow[j];
                            }
                            dx[i * k + kk] = acc;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; k * m];
                    for i in 0..rows {
                        let xrow = &xv[i * k..(i + 1) * k];
                        let grow = &g[i * m..(i + 1) * m];
                        for (kk, &xik) in xrow.iter().enumerate() {
                            let drow = &mut dw[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                drow[j] += xik * grow[j];
                            }
                        }
                    }
                    w.accumulate_grad(&dw);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; m];
                    for i in 0..rows {
                        let grow = &g[i * m..(i + 1) * m];
                        for j in 0..m {
                            db[j] += grow[j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise max(0, x); subgradient at 0 is 0.
    pub fn relu(&self, x: &Tensor) -> Tensor {
        let values: Vec<f64> = x.values().iter().map(|&v| v.max(0.0)).collect();
        let traced = x.requires_grad();
        let out = self.output(x.shape(), values, traced);
        if traced {
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let xv = x.values();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                drop(xv);
                x.accumulate_grad(&dx);
            }));
        }
        out
    }

    /// Temperature-scaled softmax along `axis`, max-shifted for stability.
    pub fn softmax_tau(&self, z: &Tensor, tau: f64, axis: usize) -> Result<Tensor> {
        self.softmax_impl(z, tau, axis, false)
    }

    /// Temperature-scaled log-softmax along `axis` in log-sum-exp form.
    pub fn log_softmax_tau(&self, z: &Tensor, tau: f64, axis: usize) -> Result<Tensor> {
        self.softmax_impl(z, tau, axis, true)
    }

    fn softmax_impl(&self, z: &Tensor, tau: f64, axis: usize, log: bool) -> Result<Tensor> {
        if !(tau > 0.0) {
            return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
        }
        let shape = z.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = z.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = f64::NEG_INFINITY;
                for kk in 0..n {
                    max = max.max(out[base + kk * inner]);
                }
                let mut sum = 0.0;
                for kk in 0..n {
                    let idx = base + kk * inner;
                    let e = ((out[idx] - max) / tau).exp();
                    out[idx] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for kk in 0..n {
                        let idx = base + kk * inner;
                        out[idx] = out[idx].ln() - lse;
                    }
                } else {
                    for kk in 0..n {
                        out[base + kk * inner] /= sum;
                    }
                }
            }
        }
        let traced = z.requires_grad();
        let out = self.output(shape.clone(), out, traced);
        if traced {
            let (z, o) = (z.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let ov = o.to_vec();
                let mut dz = vec![0.0; ov.len()];
                for oi in 0..outer {
                    for i in 0..inner {
                        let base = oi * n * inner + i;
                        let mut dot = 0.0;
                        for kk in 0..n {
                            let idx = base + kk * inner;
                            let p = if log { ov[idx].exp() } else { ov[idx] };
                            dot += if log { g[idx] } else { g[idx] * p };
                        }
                        for kk in 0..n {
                            let idx = base + kk * inner;
                            dz[idx] = if log {
                                (g[idx] - ov[idx].exp() * dot) / tau
                            } else {
                                ov[idx] * (g[idx] - dot) / tau
                            };
                        }
                    }
                }
                z.accumulate_grad(&dz);
            }));
        }
        Ok(out)
    }

    /// ln(max(x, eps)); the clamp guards the log only, gradient is zero in
    /// the clamped region.
    pub fn ln_clamped(&self, x: &Tensor, eps: f64) -> Tensor {
        let values: Vec<f64> = x.values().iter().map(|&v| v.max(eps).ln()).collect();
        let traced = x.requires_grad();
        let out = self.output(x.shape(), values, traced);
        if traced {
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let xv = x.values();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gi, &xi)| if xi >= eps { gi / xi } else { 0.0 })
                    .collect();
                drop(xv);
                x.accumulate_grad(&dx);
            }));
        }
        out
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, (1.0, 1.0))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, (1.0, -1.0))
    }

    fn binary(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: fn(f64, f64) -> f64,
        coeff: (f64, f64),
    ) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let values: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let traced = a.requires_grad() || b.requires_grad();
        let out = self.output(sa, values, traced);
        if traced {
            let (ca, cb) = coeff;
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * ca).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> = g.iter().map(|&gi| gi * cb).collect();
                    b.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let values: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let traced = a.requires_grad() || b.requires_grad();
        let out = self.output(sa, values, traced);
        if traced {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    let bv = b.values();
                    let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(&gi, &y)| gi * y).collect();
                    drop(bv);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.values();
                    let db: Vec<f64> = g.iter().zip(av.iter()).map(|(&gi, &x)| gi * x).collect();
                    drop(av);
                    b.accumulate_grad(&db);
                }
            }));
        }
        Ok(out)
    }

    /// Multiply by a constant scalar.
    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let values: Vec<f64> = x.values().iter().map(|&v| v * c).collect();
        let traced = x.requires_grad();
        let out = self.output(x.shape(), values, traced);
        if traced {
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let dx: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                x.accumulate_grad(&dx);
            }));
        }
        out
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.values().iter().sum();
        let traced = x.requires_grad();
        let out = self.output(vec![1], vec![s], traced);
        if traced {
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let dx = vec![g[0]; x.len()];
                x.accumulate_grad(&dx);
            }));
        }
        out
    }

    /// Mean negative log-likelihood over rows of `logp[B,C]` at `labels`.
    pub fn nll(&self, logp: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let shape = logp.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (rows, classes) = (shape[0], shape[1]);
        for &y in labels {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
        }
        let lv = logp.values();
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            acc -= lv[i * classes + y];
        }
        drop(lv);
        let traced = logp.requires_grad();
        let out = self.output(vec![1], vec![acc / rows as f64], traced);
        if traced {
            let labels = labels.to_vec();
            let (logp, o) = (logp.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let mut dl = vec![0.0; rows * classes];
                let c = g[0] / rows as f64;
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * classes + y] = -c;
                }
                logp.accumulate_grad(&dl);
            }));
        }
        Ok(out)
    }

    /// Gather: out[i] = x[indices[i]], reshaped to `out_shape`. Backward
    /// scatter-adds. Used for layout permutations in dense prediction.
    pub fn select(&self, x: &Tensor, indices: &[usize], out_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::Contract(format!(
                "select: {} indices for shape {:?}",
                indices.len(),
                out_shape
            )));
        }
        let xv = x.values();
        let n_in = xv.len();
        let mut values = Vec::with_capacity(indices.len());
        for &idx in indices {
            if idx >= n_in {
                return Err(Error::Contract(format!(
                    "select: index {idx} out of range for {n_in} elements"
                )));
            }
            values.push(xv[idx]);
        }
        drop(xv);
        let traced = x.requires_grad();
        let out = self.output(out_shape.to_vec(), values, traced);
        if traced {
            let indices = indices.to_vec();
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                let mut dx = vec![0.0; n_in];
                for (i, &idx) in indices.iter().enumerate() {
                    dx[idx] += g[i];
                }
                x.accumulate_grad(&dx);
            }));
        }
        Ok(out)
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape(),
                rhs: new_shape.to_vec(),
            });
        }
        let traced = x.requires_grad();
        let out = self.output(new_shape.to_vec(), x.to_vec(), traced);
        if traced {
            let (x, o) = (x.clone(), out.clone());
            self.push(Box::new(move || {
                let Some(g) = o.grad() else { return };
                x.accumulate_grad(&g);
            }));
        }
        Ok(out)
    }

    /// Reverse-accumulate gradients from a scalar loss through the tape.
    /// Consumes the recorded nodes; the graph is single-shot.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad(1.0);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        for node in nodes.iter().rev() {
            node();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn affine_identity_weights() {
        let g = Graph::new();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        let y = g.affine(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn affine_zero_weights_pass_bias() {
        let g = Graph::new();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::param(&[2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        let y = g.affine(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn affine_hand_product() {
        let g = Graph::new();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::param(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::param(&[2], vec![0.0, 1.0]).unwrap();
        let y = g.affine(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let g = Graph::new();
        let x = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        let w = Tensor::param(&[2, 2], vec![0.0; 4]).unwrap();
        let b = Tensor::param(&[2], vec![0.0; 2]).unwrap();
        let err = g.affine(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let g = Graph::new();
        let x = Tensor::param(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.relu(&x);
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
        let s = g.sum_all(&y);
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_negative_fraction() {
        let g = Graph::new();
        let x = Tensor::from_vec(&[2], vec![-5.5, 3.25]).unwrap();
        assert_eq!(g.relu(&x).to_vec(), vec![0.0, 3.25]);
    }

    #[test]
    fn softmax_symmetry_and_direct_values() {
        let g = Graph::new();
        let z = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let p = g.softmax_tau(&z, 1.0, 0).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);

        let z = Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap();
        let p = g.softmax_tau(&z, 1.0, 0).unwrap().to_vec();
        // e^2 / (e^2 + 1)
        let e2 = 2.0f64.exp();
        assert_relative_eq!(p[0], e2 / (e2 + 1.0), max_relative = 1e-12);
        assert_relative_eq!(p[0], 0.880797, max_relative = 1e-6);
        assert_relative_eq!(p[1], 0.119203, max_relative = 1e-5);

        let p = g.softmax_tau(&z, 2.0, 0).unwrap().to_vec();
        let e1 = 1.0f64.exp();
        assert_relative_eq!(p[0], e1 / (e1 + 1.0), max_relative = 1e-12);
        assert_relative_eq!(p[0], 0.731059, max_relative = 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let g = Graph::new();
        let z = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(g.softmax_tau(&z, 0.0, 0).is_err());
        assert!(g.softmax_tau(&z, -1.0, 0).is_err());
    }

    #[test]
    fn softmax_no_overflow_for_huge_logits() {
        let g = Graph::new();
        let z = Tensor::from_vec(&[2], vec![700.0, -700.0]).unwrap();
        let p = g.softmax_tau(&z, 1.0, 0).unwrap().to_vec();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[0] + p[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.sum_all(&x);
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square() {
        let g = Graph::new();
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = g.mul(&x, &x).unwrap();
        let s = g.sum_all(&y);
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = g.relu(&x);
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let g = Graph::new();
        let teacher = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let student = Tensor::param(&[2], vec![0.5, 0.5]).unwrap();
        let y = g.mul(&teacher, &student).unwrap();
        let s = g.sum_all(&y);
        g.backward(&s).unwrap();
        assert!(teacher.grad().is_none());
        assert_eq!(student.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let g = Graph::new();
        let lp = Tensor::from_vec(&[1, 2], vec![-0.5, -0.9]).unwrap();
        assert!(g.nll(&lp, &[2]).is_err());
    }

    #[test]
    fn select_scatter_backward() {
        let g = Graph::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.select(&x, &[2, 2, 0], &[3]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 3.0, 1.0]);
        let s = g.sum_all(&y);
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
