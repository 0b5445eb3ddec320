use super::{
    check_dim, dot, matvec_backward_kernel, matvec_kernel, norm, normalize_backward_kernel,
    Matrix, NumError, Vector,
};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatVec { w: Var, x: Var },
    Relu { x: Var },
    Mask { x: Var, mask: Vec<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, c: T },
    Shift { x: Var },
    L2Normalize { x: Var, norm: T },
    NormalizeRows { w: Var, norms: Vec<T> },
    Dot { a: Var, b: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Mean { xs: Vec<Var> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

/// Reverse-mode recorder. Values are appended in forward order; [`Tape::backward`]
/// replays backward rules in exact reverse order and accumulates gradients
/// additively wherever a value feeds more than one consumer.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar root with respect to every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the value does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` is disconnected.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Records an input vector (data or parameter).
    pub fn leaf(&mut self, values: Vec<T>) -> Var {
        let n = values.len();
        self.push(values, n, 1, Op::Leaf)
    }

    pub fn vector(&mut self, v: &Vector<T>) -> Var {
        self.leaf(v.as_slice().to_vec())
    }

    pub fn matrix(&mut self, m: &Matrix<T>) -> Var {
        self.push(m.as_slice().to_vec(), m.rows(), m.cols(), Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let (rows, cols) = (self.node(w).rows, self.node(w).cols);
        check_dim("affine (W.cols vs x)", cols, self.node(x).value.len())?;
        check_dim("affine (b vs W.rows)", rows, self.node(b).value.len())?;
        let mut out = vec![T::zero(); rows];
        matvec_kernel(&self.node(w).value, rows, cols, &self.node(x).value, &mut out);
        for (o, &bi) in out.iter_mut().zip(&self.node(b).value) {
            *o += bi;
        }
        Ok(self.push(out, rows, 1, Op::Affine { x, w, b }))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NumError> {
        let (rows, cols) = (self.node(w).rows, self.node(w).cols);
        check_dim("matvec", cols, self.node(x).value.len())?;
        let mut out = vec![T::zero(); rows];
        matvec_kernel(&self.node(w).value, rows, cols, &self.node(x).value, &mut out);
        Ok(self.push(out, rows, 1, Op::MatVec { w, x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Relu { x })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var, NumError> {
        check_dim("mask", self.value(x).len(), mask.len())?;
        let out: Vec<T> = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let n = out.len();
        Ok(self.push(out, n, 1, Op::Mask { x, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_dim("add", self.value(a).len(), self.value(b).len())?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let n = out.len();
        Ok(self.push(out, n, 1, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_dim("sub", self.value(a).len(), self.value(b).len())?;
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let n = out.len();
        Ok(self.push(out, n, 1, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Scale { x, c })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v + c).collect();
        let n = out.len();
        self.push(out, n, 1, Op::Shift { x })
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NumError> {
        let n = norm(self.value(x));
        if !(n > T::eps_norm()) {
            return Err(NumError::Degenerate {
                op: "l2_normalize",
                norm: n.to_f64_lossy(),
            });
        }
        let out: Vec<T> = self.value(x).iter().map(|&v| v / n).collect();
        let len = out.len();
        Ok(self.push(out, len, 1, Op::L2Normalize { x, norm: n }))
    }

    /// Normalizes every row of a matrix value to unit length.
    pub fn normalize_rows(&mut self, w: Var) -> Result<Var, NumError> {
        let (rows, cols) = (self.node(w).rows, self.node(w).cols);
        let src = &self.node(w).value;
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(rows);
        for row in src.chunks(cols) {
            let n = norm(row);
            if !(n > T::eps_norm()) {
                return Err(NumError::Degenerate {
                    op: "normalize_rows",
                    norm: n.to_f64_lossy(),
                });
            }
            out.extend(row.iter().map(|&v| v / n));
            norms.push(n);
        }
        Ok(self.push(out, rows, cols, Op::NormalizeRows { w, norms }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        check_dim("dot", self.value(a).len(), self.value(b).len())?;
        let d = dot(self.value(a), self.value(b));
        Ok(self.push(vec![d], 1, 1, Op::Dot { a, b }))
    }

    /// `−log softmax(logits)[label]`, evaluated with max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumError> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(NumError::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let (loss, probs) = softmax_xent(z, label);
        Ok(self.push(vec![loss], 1, 1, Op::CrossEntropy { logits, label, probs }))
    }

    /// Arithmetic mean of one-element values.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        if xs.is_empty() {
            return Err(NumError::Empty("mean"));
        }
        let mut acc = T::zero();
        for &x in xs {
            check_dim("mean", 1, self.value(x).len())?;
            acc += self.scalar(x);
        }
        let m = acc / T::of(xs.len() as f64);
        Ok(self.push(vec![m], 1, 1, Op::Mean { xs: xs.to_vec() }))
    }

    /// Reverse sweep from a one-element `root`, seeded with dL/droot = 1.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (wn, xn) = (self.node(*w), self.node(*x));
                let mut dx = take_or_zeros(grads, *x, xn.value.len());
                let mut dw = take_or_zeros(grads, *w, wn.value.len());
                matvec_backward_kernel(&wn.value, wn.cols, &xn.value, g, Some(&mut dx), Some(&mut dw));
                grads[x.0] = Some(dx);
                grads[w.0] = Some(dw);
                accumulate(grads, *b, g);
            }
            Op::MatVec { w, x } => {
                let (wn, xn) = (self.node(*w), self.node(*x));
                let mut dx = take_or_zeros(grads, *x, xn.value.len());
                let mut dw = take_or_zeros(grads, *w, wn.value.len());
                matvec_backward_kernel(&wn.value, wn.cols, &xn.value, g, Some(&mut dx), Some(&mut dw));
                grads[x.0] = Some(dx);
                grads[w.0] = Some(dw);
            }
            Op::Relu { x } => {
                let xs = &self.node(*x).value;
                let local: Vec<T> = xs
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *x, &local);
            }
            Op::Mask { x, mask } => {
                let local: Vec<T> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                accumulate(grads, *x, &local);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Scale { x, c } => {
                let local: Vec<T> = g.iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, &local);
            }
            Op::Shift { x } => accumulate(grads, *x, g),
            Op::L2Normalize { x, norm } => {
                let mut dx = take_or_zeros(grads, *x, node.value.len());
                normalize_backward_kernel(&node.value, *norm, g, &mut dx);
                grads[x.0] = Some(dx);
            }
            Op::NormalizeRows { w, norms } => {
                let cols = node.cols;
                let mut dw = take_or_zeros(grads, *w, node.value.len());
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    normalize_backward_kernel(&node.value[span.clone()], n, &g[span.clone()], &mut dw[span]);
                }
                grads[w.0] = Some(dw);
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let da: Vec<T> = self.value(*b).iter().map(|&v| v * g0).collect();
                let db: Vec<T> = self.value(*a).iter().map(|&v| v * g0).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let g0 = g[0];
                let local: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let target = if k == *label { T::one() } else { T::zero() };
                        (p - target) * g0
                    })
                    .collect();
                accumulate(grads, *logits, &local);
            }
            Op::Mean { xs } => {
                let share = g[0] / T::of(xs.len() as f64);
                for &x in xs {
                    accumulate(grads, x, &[share]);
                }
            }
        }
    }
}

fn take_or_zeros<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Returns the loss and the softmax probabilities.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[label] - max);
    let probs = exps.into_iter().map(|e| e / total).collect();
    (loss, probs)
}
