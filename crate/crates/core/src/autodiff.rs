//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every node holds a dense row-major matrix. Point batches are `n × d`
//! matrices, so one network layer applied to a whole cloud is a single node.
//! Nodes are appended in evaluation order, which makes the node list a valid
//! topological order; [`Tape::backward`] walks it once in reverse.

use std::cell::OnceCell;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::Activation;

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x · w + b`, with `b` a `1 × cols` row broadcast over rows.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Activate {
        x: NodeId,
        act: Activation,
    },
    /// `act(x · w + b)`; only recorded with single-precision products.
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Activation,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    RowSquaredNorm(NodeId),
    RowNorm(NodeId),
    /// `Σ_i weights[i] · x[i, 0]` for an `n × 1` input.
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// Left empty for `Dense` nodes until first read; derived from `single`.
    value: OnceCell<Matrix>,
    requires_grad: bool,
    /// Single-precision copy, kept when the node feeds a single-precision product.
    single: Option<Array2<f32>>,
    /// Pre-activation of a `Dense` node. Exact, since the product is rounded to `f32`.
    pre_activation: Option<Array2<f32>>,
}

/// Arithmetic used for matrix products. Everything else is always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatmulPrecision {
    #[default]
    Double,
    /// Operands are rounded to `f32`, multiplied, and the product widened
    /// back; roughly twice the throughput of `Double`.
    Single,
}

impl MatmulPrecision {
    pub fn name(self) -> &'static str {
        match self {
            Self::Double => "f64",
            Self::Single => "f32",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "f64" => Ok(Self::Double),
            "f32" => Ok(Self::Single),
            other => Err(Error::InvalidArgument(format!("unknown matmul precision `{other}`"))),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: MatmulPrecision,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: MatmulPrecision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> MatmulPrecision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: OnceCell::from(value),
            requires_grad,
            single: None,
            pre_activation: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        node.value.get_or_init(|| {
            node.single
                .as_ref()
                .expect("nodes without a value keep a single-precision copy")
                .mapv(f64::from)
        })
    }

    fn dim(&self, id: NodeId) -> (usize, usize) {
        let node = &self.nodes[id.0];
        match (node.value.get(), &node.single) {
            (Some(v), _) => v.dim(),
            (None, Some(s)) => s.dim(),
            (None, None) => unreachable!("node has neither value nor single copy"),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node {} is not a scalar", id.0);
        v[[0, 0]]
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let out = match self.precision {
            MatmulPrecision::Double => {
                let (xv, wv, bv) = self.check_affine(x, w, b);
                let mut out = bv.broadcast((xv.nrows(), wv.ncols())).expect("bias broadcast").to_owned();
                general_mat_mul(1.0, xv, wv, 1.0, &mut out);
                out
            }
            MatmulPrecision::Single => self.single_product(x, w, b).mapv(f64::from),
        };
        self.push(Op::Affine { x, w, b }, out, rg)
    }

    /// `act(x · w + b)`. Equivalent to [`Tape::affine`] then [`Tape::activate`];
    /// with single-precision products it is one node that keeps less memory.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId, act: Activation) -> NodeId {
        if self.precision == MatmulPrecision::Double {
            let z = self.affine(x, w, b);
            return self.activate(z, act);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let pre = self.single_product(x, w, b);
        let single = pre.mapv(|p| act.apply(f64::from(p)) as f32);
        let id = self.push(Op::Dense { x, w, b, act }, Array2::zeros((0, 0)), rg);
        let node = &mut self.nodes[id.0];
        node.value = OnceCell::new();
        node.single = Some(single);
        node.pre_activation = Some(pre);
        id
    }

    fn check_affine(&self, x: NodeId, w: NodeId, b: NodeId) -> (&Matrix, &Matrix, &Matrix) {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ncols(), wv.nrows(), "affine: x cols vs w rows");
        assert_eq!(bv.dim(), (1, wv.ncols()), "affine: bias shape");
        (xv, wv, bv)
    }

    /// `x · w + b` in `f32`, caching the rounded input for the backward pass.
    fn single_product(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Array2<f32> {
        let (wv, bv) = (self.value(w), self.value(b));
        let rows = self.dim(x).0;
        assert_eq!(self.dim(x).1, wv.nrows(), "affine: x cols vs w rows");
        assert_eq!(bv.dim(), (1, wv.ncols()), "affine: bias shape");
        let mut prod = to_single(bv)
            .broadcast((rows, wv.ncols()))
            .expect("bias broadcast")
            .to_owned();
        let ws = to_single(wv);
        match &self.nodes[x.0].single {
            Some(xs) => general_mat_mul(1.0, xs, &ws, 1.0, &mut prod),
            None => {
                let xs = to_single(self.value(x));
                general_mat_mul(1.0, &xs, &ws, 1.0, &mut prod);
                if self.rg(w) {
                    self.nodes[x.0].single = Some(xs);
                }
            }
        }
        prod
    }

    pub fn activate(&mut self, x: NodeId, act: Activation) -> NodeId {
        let out = self.value(x).mapv(|v| act.apply(v));
        let rg = self.rg(x);
        self.push(Op::Activate { x, act }, out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shapes");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shapes");
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat: row counts");
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat");
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols(a, b), out, rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let out = self.value(x).select(Axis(0), &rows);
        let rg = self.rg(x);
        self.push(Op::GatherRows { x, rows }, out, rg)
    }

    /// `n × d → n × 1` squared Euclidean row norms.
    pub fn row_squared_norm(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r))
            .insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(Op::RowSquaredNorm(x), out, rg)
    }

    /// `n × d → n × 1` Euclidean row norms. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(Op::RowNorm(x), out, rg)
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (weights.len(), 1), "weighted_sum: expects n × 1");
        let total: f64 = xv.column(0).iter().zip(&weights).map(|(v, w)| v * w).sum();
        let rg = self.rg(x);
        self.push(
            Op::WeightedSum { x, weights },
            Array2::from_elem((1, 1), total),
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Array2::from_elem((1, 1), total), rg)
    }

    /// Sum of scalar nodes; a `0.0` constant when `terms` is empty.
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        match terms.split_first() {
            None => self.constant(Array2::zeros((1, 1))),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>]) {
        let out = || node.value.get().expect("value recorded at construction");
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => match self.precision {
                MatmulPrecision::Single => self.affine_backward_single(*x, *w, *b, g, grads),
                MatmulPrecision::Double => {
                    if self.rg(*b) {
                        accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*w) {
                        let slot = slot(grads, *w, self.value(*w).dim());
                        general_mat_mul(1.0, &self.value(*x).t(), &g, 1.0, slot);
                    }
                    if self.rg(*x) {
                        let slot = slot(grads, *x, self.dim(*x));
                        general_mat_mul(1.0, &g, &self.value(*w).t(), 1.0, slot);
                    }
                }
            },
            Op::Dense { x, w, b, act } => {
                let pre = node.pre_activation.as_ref().expect("dense nodes keep their pre-activation");
                let act = *act;
                let mut bias = Array2::<f64>::zeros((1, g.ncols()));
                let mut gs = Array2::<f32>::zeros(g.dim());
                for ((g_row, p_row), mut s_row) in g.rows().into_iter().zip(pre.rows()).zip(gs.rows_mut()) {
                    Zip::from(&mut s_row)
                        .and(&g_row)
                        .and(&p_row)
                        .and(bias.row_mut(0))
                        .for_each(|s, &g, &p, acc| {
                            let p = f64::from(p);
                            let d = g * act.derivative(p, act.apply(p));
                            *acc += d;
                            *s = d as f32;
                        });
                }
                drop(g);
                if self.rg(*b) {
                    accumulate(grads, *b, bias);
                }
                self.single_weight_input_grads(*x, *w, &gs, grads);
            }
            Op::Activate { x, act } => {
                let mut g = g;
                let act = *act;
                Zip::from(&mut g)
                    .and(self.value(*x))
                    .and(out())
                    .for_each(|g, &pre, &post| *g *= act.derivative(pre, post));
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                    accumulate(grads, *a, g);
                } else if self.rg(*a) {
                    accumulate(grads, *a, g);
                } else {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    accumulate(grads, *b, -&g);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::ConcatCols(a, b) => {
                let split = self.dim(*a).1;
                if self.rg(*a) {
                    accumulate(grads, *a, g.slice(s![.., ..split]).to_owned());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.slice(s![.., split..]).to_owned());
                }
            }
            Op::GatherRows { x, rows } => {
                let slot = slot(grads, *x, self.dim(*x));
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = slot.row_mut(src);
                    dst += &g.row(r);
                }
            }
            Op::RowSquaredNorm(x) => {
                let xv = self.value(*x);
                let mut d = xv * 2.0;
                d *= &g.broadcast(xv.dim()).expect("row broadcast");
                accumulate(grads, *x, d);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let mut d = xv.clone();
                for ((mut row, norm), gi) in d
                    .rows_mut()
                    .into_iter()
                    .zip(out().column(0))
                    .zip(g.column(0))
                {
                    if *norm > 0.0 {
                        row *= gi / norm;
                    } else {
                        row.fill(0.0);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[[0, 0]];
                let d = Array2::from_shape_fn((weights.len(), 1), |(i, _)| weights[i] * g0);
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let d = Array2::from_elem(self.dim(*x), g[[0, 0]]);
                accumulate(grads, *x, d);
            }
        }
    }
}

impl Tape {
    fn affine_backward_single(&self, x: NodeId, w: NodeId, b: NodeId, g: Matrix, grads: &mut [Option<Matrix>]) {
        if self.rg(b) {
            accumulate(grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        let gs = to_single(&g);
        drop(g);
        self.single_weight_input_grads(x, w, &gs, grads);
    }

    fn single_weight_input_grads(&self, x: NodeId, w: NodeId, gs: &Array2<f32>, grads: &mut [Option<Matrix>]) {
        if self.rg(w) {
            let converted;
            let xs = match &self.nodes[x.0].single {
                Some(xs) => xs,
                None => {
                    converted = to_single(self.value(x));
                    &converted
                }
            };
            let mut prod = Array2::<f32>::zeros(self.dim(w));
            general_mat_mul(1.0, &xs.t(), gs, 0.0, &mut prod);
            accumulate_single(grads, w, prod);
        }
        if self.rg(x) {
            let mut prod = Array2::<f32>::zeros(self.dim(x));
            general_mat_mul(1.0, gs, &to_single(self.value(w)).t(), 0.0, &mut prod);
            accumulate_single(grads, x, prod);
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], id: NodeId, dim: (usize, usize)) -> &mut Matrix {
    grads[id.0].get_or_insert_with(|| Array2::zeros(dim))
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        empty => *empty = Some(g),
    }
}

fn accumulate_single(grads: &mut [Option<Matrix>], id: NodeId, g: Array2<f32>) {
    match &mut grads[id.0] {
        Some(existing) => Zip::from(existing).and(&g).for_each(|e, &v| *e += f64::from(v)),
        empty => *empty = Some(g.mapv(f64::from)),
    }
}

fn to_single(m: &Matrix) -> Array2<f32> {
    m.mapv(|v| v as f32)
}
