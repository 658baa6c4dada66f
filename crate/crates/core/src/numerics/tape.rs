//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation applied to its variables in
//! evaluation order. [`Tape::backward`] then walks the record once, last node
//! first, accumulating adjoints. The primitive set is deliberately closed;
//! losses and heads are composed from these operations only.

use super::tensor::{gemm, Tensor};
use super::NORM_EPS;
use crate::{Error, Result};

/// Smallest probability fed to a logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, bool),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    L2NormalizeRows(Var),
    PairwiseDistance(Var, Var),
    SoftmaxRows(Var, f64),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    RowMax(Var),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    log_clamps: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when the
    /// variable received no adjoint.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("expected rank 1 or 2, got {s:?}"))),
    }
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

    /// Number of logarithm inputs clamped to [`LOG_FLOOR`] so far.
    pub fn log_clamps(&self) -> usize {
        self.log_clamps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Frozen leaf (inputs, targets, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let shape = out.shape().to_vec();
        self.push(shape, out.into_data(), Op::MatMul(a, b))
    }

    /// `a + b`, where `b` may match `a`, be a single element, a row
    /// (`[1, C]` or `[C]`) broadcast over rows, or a column `[R, 1]`
    /// broadcast over columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = if av.shape() == bv.shape() {
            Broadcast::Same
        } else if bv.len() == 1 {
            Broadcast::Scalar
        } else {
            let (r, c) = av.dims2()?;
            match bv.shape() {
                [1, bc] | [bc] if *bc == c => Broadcast::Row,
                [br, 1] if *br == r => Broadcast::Col,
                s => {
                    return Err(Error::shape(format!(
                        "cannot broadcast {s:?} onto {:?}",
                        av.shape()
                    )))
                }
            }
        };
        let cols = *av.shape().last().unwrap();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match mode {
            Broadcast::Same => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            Broadcast::Scalar => ad.iter().map(|x| x + bd[0]).collect(),
            Broadcast::Row => ad
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i % cols])
                .collect(),
            Broadcast::Col => ad
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i / cols])
                .collect(),
        };
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::Add(a, b, mode))
    }

    /// Elementwise product; `b` may also be a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let scalar = if av.shape() == bv.shape() {
            false
        } else if bv.len() == 1 {
            true
        } else {
            return Err(Error::shape(format!(
                "mul {:?} by {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        let data: Vec<f64> = if scalar {
            let s = bv.data()[0];
            av.data().iter().map(|x| x * s).collect()
        } else {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x * y)
                .collect()
        };
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::Mul(a, b, scalar))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.max(0.0)).collect();
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.abs()).collect();
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::Abs(a))
    }

    /// Divides every row by its 2-norm plus [`NORM_EPS`]. Rank-1 inputs are
    /// treated as a single row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = rows_cols(av)?;
        let mut data = av.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let s = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::L2NormalizeRows(a))
    }

    /// Euclidean distances between rows: `out[i, j] = ‖a_i − b_j‖`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = rows_cols(av)?;
        let (rb, cb) = rows_cols(bv)?;
        if ca != cb {
            return Err(Error::shape(format!(
                "pairwise distance between {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(ra * rb);
        for i in 0..ra {
            let x = &av.data()[i * ca..(i + 1) * ca];
            for j in 0..rb {
                let y = &bv.data()[j * cb..(j + 1) * cb];
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                data.push(d2.sqrt());
            }
        }
        self.push(vec![ra, rb], data, Op::PairwiseDistance(a, b))
    }

    /// Row-wise softmax of `scale · a`, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = rows_cols(av)?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(super::softmax_slice(&av.data()[i * c..(i + 1) * c], scale));
        }
        let shape = av.shape().to_vec();
        self.push(shape, data, Op::SoftmaxRows(a, scale))
    }

    /// Natural logarithm with inputs clamped below at [`LOG_FLOOR`]. Each
    /// clamped element bumps [`log_clamps`](Self::log_clamps).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut clamps = 0;
        let data = av
            .data()
            .iter()
            .map(|&x| {
                if x < LOG_FLOOR {
                    clamps += 1;
                    LOG_FLOOR.ln()
                } else {
                    x.ln()
                }
            })
            .collect();
        let shape = av.shape().to_vec();
        self.log_clamps += clamps;
        self.push(shape, data, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let m = av.sum() / av.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(a))
    }

    /// Per-row mean, shape `[R, 1]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = rows_cols(av)?;
        let data = (0..r)
            .map(|i| av.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        self.push(vec![r, 1], data, Op::RowMean(a))
    }

    /// Per-row maximum, shape `[R, 1]`. The adjoint flows to the first
    /// maximal entry.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = rows_cols(av)?;
        let data = (0..r)
            .map(|i| {
                av.data()[i * c..(i + 1) * c]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        self.push(vec![r, 1], data, Op::RowMax(a))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let n = bv.dims2()?.1;
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db);
                    accumulate(&mut grads, *a, av.shape(), &da);
                    accumulate(&mut grads, *b, bv.shape(), &db);
                }
                Op::Add(a, b, mode) => {
                    let bv = self.value(*b);
                    let cols = *g.shape().last().unwrap();
                    let mut db = vec![0.0; bv.len()];
                    for (i, gi) in g.data().iter().enumerate() {
                        let j = match mode {
                            Broadcast::Same => i,
                            Broadcast::Scalar => 0,
                            Broadcast::Row => i % cols,
                            Broadcast::Col => i / cols,
                        };
                        db[j] += gi;
                    }
                    accumulate(&mut grads, *a, g.shape(), g.data());
                    accumulate(&mut grads, *b, bv.shape(), &db);
                }
                Op::Mul(a, b, scalar) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if *scalar {
                        let s = bv.data()[0];
                        let da: Vec<f64> = g.data().iter().map(|x| x * s).collect();
                        let db: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                        accumulate(&mut grads, *a, av.shape(), &da);
                        accumulate(&mut grads, *b, bv.shape(), &[db]);
                    } else {
                        let da: Vec<f64> =
                            g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                        let db: Vec<f64> =
                            g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, av.shape(), &da);
                        accumulate(&mut grads, *b, bv.shape(), &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data().iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, g.shape(), &da);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), &da);
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(x, y)| {
                            if *y > 0.0 {
                                *x
                            } else if *y < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), &da);
                }
                Op::L2NormalizeRows(a) => {
                    let av = self.value(*a);
                    let (r, c) = rows_cols(av)?;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let v = &av.data()[i * c..(i + 1) * c];
                        let gi = &g.data()[i * c..(i + 1) * c];
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let s = n + NORM_EPS;
                        let gv: f64 = gi.iter().zip(v).map(|(x, y)| x * y).sum();
                        let coupling = if n > 0.0 { gv / (s * s * n) } else { 0.0 };
                        for j in 0..c {
                            da[i * c + j] = gi[j] / s - coupling * v[j];
                        }
                    }
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
                Op::PairwiseDistance(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ra, c) = rows_cols(av)?;
                    let (rb, _) = rows_cols(bv)?;
                    let mut da = vec![0.0; ra * c];
                    let mut db = vec![0.0; rb * c];
                    for i in 0..ra {
                        let x = &av.data()[i * c..(i + 1) * c];
                        for j in 0..rb {
                            let d = node.value.data()[i * rb + j];
                            if d <= 0.0 {
                                continue;
                            }
                            let w = g.data()[i * rb + j] / d;
                            let y = &bv.data()[j * c..(j + 1) * c];
                            for t in 0..c {
                                let diff = w * (x[t] - y[t]);
                                da[i * c + t] += diff;
                                db[j * c + t] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, av.shape(), &da);
                    accumulate(&mut grads, *b, bv.shape(), &db);
                }
                Op::SoftmaxRows(a, scale) => {
                    let p = &node.value;
                    let (r, c) = rows_cols(p)?;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let pi = &p.data()[i * c..(i + 1) * c];
                        let gi = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = pi.iter().zip(gi).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            da[i * c + j] = scale * pi[j] * (gi[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, p.shape(), &da);
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(x, y)| if *y < LOG_FLOOR { 0.0 } else { x / y })
                        .collect();
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let da = vec![g.data()[0]; av.len()];
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let da = vec![g.data()[0] / av.len() as f64; av.len()];
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
                Op::RowMean(a) => {
                    let av = self.value(*a);
                    let (r, c) = rows_cols(av)?;
                    let da: Vec<f64> = (0..r * c).map(|i| g.data()[i / c] / c as f64).collect();
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
                Op::RowMax(a) => {
                    let av = self.value(*a);
                    let (r, c) = rows_cols(av)?;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let row = &av.data()[i * c..(i + 1) * c];
                        let m = node.value.data()[i];
                        let j = row.iter().position(|&x| x == m).unwrap_or(0);
                        da[i * c + j] = g.data()[i];
                    }
                    accumulate(&mut grads, *a, av.shape(), &da);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(x, d)| *x += d),
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(1.0)
    }

    /// Checks the tape gradient of `build(x)` with respect to leaf `x`.
    fn check<F>(x: &Tensor, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var + Sync,
    {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get_or_zeros(xv, x);
        let numeric = finite_diff_gradient(
            |t| {
                let mut tape = Tape::new();
                let v = tape.param(t.clone());
                let l = build(&mut tape, v);
                tape.value(l).data()[0]
            },
            x,
            1e-6,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(rel_err(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[3, 4]);
            let w = random(&mut rng, &[4, 5]);
            let row = random(&mut rng, &[1, 5]);
            let col = random(&mut rng, &[3, 1]);
            let other = random(&mut rng, &[2, 4]);
            check(&x, |t, v| {
                let wv = t.constant(w.clone());
                let h = t.matmul(v, wv).unwrap();
                let r = t.constant(row.clone());
                let h = t.add(h, r).unwrap();
                let c = t.constant(col.clone());
                let h = t.add(h, c).unwrap();
                let h = t.relu(h).unwrap();
                let h = t.scale(h, 0.7).unwrap();
                let m = t.row_mean(h).unwrap();
                let h = t.add(h, m).unwrap();
                let p = t.softmax_rows(h, 3.0).unwrap();
                let lp = t.log(p).unwrap();
                let s = t.sum(lp).unwrap();
                let mx = t.row_max(h).unwrap();
                let mx = t.mean(mx).unwrap();
                t.add(s, mx).unwrap()
            });
            check(&x, |t, v| {
                let n = t.l2_normalize_rows(v).unwrap();
                let o = t.constant(other.clone());
                let d = t.pairwise_distance(n, o).unwrap();
                let a = t.abs(v).unwrap();
                let sa = t.sum(a).unwrap();
                let prod = t.mul(d, d).unwrap();
                let sd = t.mean(prod).unwrap();
                let scaled = t.mul(sd, sa).unwrap();
                t.sum(scaled).unwrap()
            });
            // the second operand of a product/distance also receives adjoints
            check(&other, |t, v| {
                let xv = t.constant(x.clone());
                let d = t.pairwise_distance(xv, v).unwrap();
                let s = t.sum(v).unwrap();
                let d = t.mul(d, s).unwrap();
                t.sum(d).unwrap()
            });
        }
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0).unwrap());
        let b = tape.param(Tensor::scalar(5.0).unwrap());
        let sq = tape.mul(a, a).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn log_clamps_are_counted() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.0, 0.5]).unwrap());
        let l = tape.log(p).unwrap();
        assert_eq!(tape.log_clamps(), 1);
        assert_eq!(tape.value(l).data()[0], LOG_FLOOR.ln());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_mismatch_is_a_shape_error() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
    }
}
