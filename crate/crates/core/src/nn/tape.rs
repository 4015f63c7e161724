//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! insertion order, which is also a valid topological order. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//!
//! Two operations shape gradient flow without changing values:
//!
//! - [`Tape::stop_gradient`] severs the graph. Everything strictly upstream
//!   of a stop point receives an exactly-zero gradient through that path.
//! - [`Tape::straight_through`] substitutes a new forward value (for example
//!   a dequantized tensor) while passing the adjoint through unchanged.
//!
//! Tapes are single-use and rebuilt for every forward pass.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{NnError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu(usize),
    Add(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    StopGradient,
    StraightThrough(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Csa {
        a: usize,
        b: usize,
        indicator: Vec<bool>,
        margin: f64,
    },
    HalfSquaredError {
        pred: usize,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    stop_points: BTreeSet<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            stop_points: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices where gradient flow is severed.
    pub fn stop_points(&self) -> &BTreeSet<usize> {
        &self.stop_points
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize, NnError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.node(v)
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xv, wv, bv) = (self.node(x), self.node(w), self.node(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(NnError::Shape {
                context: "affine input".into(),
                expected: wv.shape().first().copied().unwrap_or(0),
                found: xv.shape().last().copied().unwrap_or(0),
            });
        }
        if bv.shape() != [wv.cols()] {
            return Err(NnError::Shape {
                context: "affine bias".into(),
                expected: wv.cols(),
                found: bv.len(),
            });
        }
        let mut out = xv.matmul(wv);
        let cols = out.cols();
        let bias = bv.data().to_vec();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (o, b) in row.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(
            out,
            Op::Affine {
                x: x.idx,
                w: w.idx,
                b: b.idx,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.node(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.node(a), self.node(b));
        if av.shape() != bv.shape() {
            return Err(NnError::Shape {
                context: "add".into(),
                expected: av.len(),
                found: bv.len(),
            });
        }
        let out = av.add(bv);
        Ok(self.push(out, Op::Add(a.idx, b.idx)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.node(a).scale(s);
        self.push(out, Op::Scale(a.idx, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.node(a).sum());
        self.push(out, Op::Sum(a.idx))
    }

    /// Identity in the forward pass, zero adjoint in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.node(a).clone();
        let v = self.push(out, Op::StopGradient);
        self.stop_points.insert(v.idx);
        v
    }

    /// Replaces the forward value of `a` with `value` and passes adjoints
    /// through unchanged.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var, NnError> {
        if self.node(a).shape() != value.shape() {
            return Err(NnError::Shape {
                context: "straight-through value".into(),
                expected: self.node(a).len(),
                found: value.len(),
            });
        }
        Ok(self.push(value, Op::StraightThrough(a.idx)))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let lv = self.node(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() || labels.is_empty() {
            return Err(NnError::Shape {
                context: "cross-entropy labels".into(),
                expected: lv.shape().first().copied().unwrap_or(0),
                found: labels.len(),
            });
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(NnError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.idx,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean contrastive alignment loss over row pairs of `a` and `b`.
    ///
    /// Positive pairs cost `½‖a−b‖²`, negative pairs `½·max(0, m−‖a−b‖)²`.
    pub fn csa(&mut self, a: Var, b: Var, indicator: &[bool], margin: f64) -> Result<Var, NnError> {
        let (av, bv) = (self.node(a), self.node(b));
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(NnError::Shape {
                context: "csa feature pair".into(),
                expected: av.len(),
                found: bv.len(),
            });
        }
        if av.rows() != indicator.len() || indicator.is_empty() {
            return Err(NnError::Shape {
                context: "csa indicator".into(),
                expected: av.rows(),
                found: indicator.len(),
            });
        }
        let loss = csa_value(av, bv, indicator, margin);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Csa {
                a: a.idx,
                b: b.idx,
                indicator: indicator.to_vec(),
                margin,
            },
        ))
    }

    /// `½ Σ (pred − target)²`.
    pub fn half_squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var, NnError> {
        let pv = self.node(pred);
        if pv.shape() != target.shape() {
            return Err(NnError::Shape {
                context: "squared-error target".into(),
                expected: pv.len(),
                found: target.len(),
            });
        }
        let loss = 0.5 * pv.sub(target).norm_sq();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::HalfSquaredError {
                pred: pred.idx,
                target: target.clone(),
            },
        ))
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let idx = self.check(loss)?;
        if self.nodes[idx].value.len() != 1 {
            return Err(NnError::NotScalar {
                shape: self.nodes[idx].value.shape().to_vec(),
            });
        }
        let seed = Tensor::filled(self.nodes[idx].value.shape().to_vec(), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse pass starting from arbitrary adjoint seeds. Seeds on the same
    /// node accumulate.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, NnError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, seed) in seeds {
            let i = self.check(*v)?;
            if seed.shape() != self.nodes[i].value.shape() {
                return Err(NnError::Shape {
                    context: "backward seed".into(),
                    expected: self.nodes[i].value.len(),
                    found: seed.len(),
                });
            }
            accumulate(&mut grads[i], seed.clone());
            start = start.max(i + 1);
        }

        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    accumulate(&mut grads[*w], xv.t_matmul(&g));
                    accumulate(&mut grads[*b], g.sum_rows());
                    accumulate(&mut grads[*x], g.matmul_t(wv));
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    for (gi, &x) in d.data_mut().iter_mut().zip(av.data()) {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut grads[*a], d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads[*a], g.scale(*s)),
                Op::Sum(a) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads[*a], Tensor::filled(shape, g.item()));
                }
                Op::StopGradient => {}
                Op::StraightThrough(a) => accumulate(&mut grads[*a], g.clone()),
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len() as f64;
                    let c = probs.cols();
                    let mut d = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        d.data_mut()[i * c + y] -= 1.0;
                    }
                    accumulate(&mut grads[*logits], d.scale(g.item() / n));
                }
                Op::Csa {
                    a,
                    b,
                    indicator,
                    margin,
                } => {
                    let (ga, gb) = csa_grad(
                        &self.nodes[*a].value,
                        &self.nodes[*b].value,
                        indicator,
                        *margin,
                        g.item(),
                    );
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::HalfSquaredError { pred, target } => {
                    let d = self.nodes[*pred].value.sub(target).scale(g.item());
                    accumulate(&mut grads[*pred], d);
                }
            }
            // Only leaves keep their adjoint; intermediates are freed above.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}

/// Adjoints of the leaves of one tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf, zero-filled when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.idx].clone()))
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        data.extend(softmax(row));
    }
    Tensor::matrix(logits.rows(), c, data)
}

pub(crate) fn csa_value(a: &Tensor, b: &Tensor, indicator: &[bool], margin: f64) -> f64 {
    let mut total = 0.0;
    for (i, &same) in indicator.iter().enumerate() {
        let d2: f64 = a
            .row(i)
            .iter()
            .zip(b.row(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += if same {
            0.5 * d2
        } else {
            let gap = (margin - d2.sqrt()).max(0.0);
            0.5 * gap * gap
        };
    }
    total / indicator.len() as f64
}

fn csa_grad(
    a: &Tensor,
    b: &Tensor,
    indicator: &[bool],
    margin: f64,
    upstream: f64,
) -> (Tensor, Tensor) {
    let n = indicator.len() as f64;
    let cols = a.cols();
    let mut ga = Tensor::zeros(a.shape().to_vec());
    for (i, &same) in indicator.iter().enumerate() {
        let (ar, br) = (a.row(i), b.row(i));
        let coef = if same {
            1.0
        } else {
            let d = ar
                .iter()
                .zip(br)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            // The hinge is flat beyond the margin; at d == 0 the direction is
            // undefined and the zero subgradient is taken.
            if d >= margin || d == 0.0 {
                0.0
            } else {
                -(margin - d) / d
            }
        };
        let out = &mut ga.data_mut()[i * cols..(i + 1) * cols];
        for ((o, x), y) in out.iter_mut().zip(ar).zip(br) {
            *o = upstream * coef * (x - y) / n;
        }
    }
    let gb = ga.scale(-1.0);
    (ga, gb)
}
