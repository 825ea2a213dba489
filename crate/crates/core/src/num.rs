//! Dense `f64` arrays, a reverse-mode tape over array kernels, and a
//! central-difference gradient checker.
//!
//! All reductions run in a fixed left-to-right order, so every kernel is
//! bitwise deterministic for identical inputs. Non-finite values are rejected
//! at every kernel boundary.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Checkpoint format version written by [`ParamStore::save`].
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("objective failed: {0}")]
    Objective(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NumError::Shape(msg.into()))
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero-sized dimension in {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Array::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => shape_err(format!("expected a matrix, got shape {other:?}")),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, what: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(NumError::NonFinite(what.to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// Pure kernels

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Max-subtracted softmax of a rank-1 array.
pub fn softmax(v: &Array) -> Result<Array> {
    if v.shape.len() != 1 {
        return shape_err(format!("softmax expects rank 1, got {:?}", v.shape));
    }
    if !v.all_finite() {
        return Err(NumError::NonFinite("softmax input".into()));
    }
    let mut out = v.clone();
    softmax_in_place(&mut out.data);
    Ok(out)
}

pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu(v: &Array, slope: f64) -> Array {
    Array {
        shape: v.shape.clone(),
        data: v.data.iter().map(|&x| leaky_relu_scalar(x, slope)).collect(),
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &Array) -> Array {
    Array {
        shape: v.shape.clone(),
        data: v.data.iter().map(|&x| sigmoid_scalar(x)).collect(),
    }
}

pub fn sq_l2(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

/// Squared Euclidean distance `Σ (uᵢ − vᵢ)²`.
pub fn sq_l2_distance(u: &Array, v: &Array) -> Result<f64> {
    if u.shape != v.shape {
        return shape_err(format!(
            "sq_l2_distance shapes differ: {:?} vs {:?}",
            u.shape, v.shape
        ));
    }
    Ok(sq_l2(&u.data, &v.data))
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Array,
    grad: Array,
}

/// Named trainable arrays, each paired with a same-shaped gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct PersistedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersistedStore {
    version: u32,
    seed: u64,
    params: Vec<PersistedParam>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        if !value.all_finite() {
            return Err(NumError::NonFinite(format!("initial value of `{name}`")));
        }
        let grad = Array::zeros(&value.shape);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter drawn uniformly from `[-1/√dim, 1/√dim]`, where `dim`
    /// is the trailing axis length.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<ParamId> {
        let dim = *shape
            .last()
            .ok_or_else(|| NumError::Shape(format!("`{name}` needs at least one axis")))?;
        let bound = 1.0 / (dim as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Plain gradient descent step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (v, g) in p.value.data.iter_mut().zip(&p.grad.data) {
                *v -= lr * g;
            }
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let persisted = PersistedStore {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| PersistedParam {
                    name: p.name.clone(),
                    shape: p.value.shape.clone(),
                    values: p.value.data.clone(),
                })
                .collect(),
        };
        serde_json::to_value(&persisted).expect("parameters serialize")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let found = value.get("version").and_then(|v| v.as_u64());
        if found != Some(CHECKPOINT_VERSION as u64) {
            return Err(NumError::Format(format!(
                "expected checkpoint version {CHECKPOINT_VERSION}, found {}",
                found.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        let persisted: PersistedStore =
            serde_json::from_value(value).map_err(|e| NumError::Format(e.to_string()))?;
        let mut store = ParamStore::new(persisted.seed);
        for p in persisted.params {
            store.add(&p.name, Array::new(p.shape, p.values)?)?;
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_json_value()).map_err(|e| NumError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| NumError::Format(e.to_string()))?;
        ParamStore::from_json_value(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParamStore::from_json(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Segment boundaries over a flat axis: segment `s` covers
/// `offsets[s]..offsets[s + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return shape_err("segment offsets must start at 0");
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return shape_err("segment offsets must be non-decreasing");
        }
        Ok(Segments { offsets })
    }

    /// Builds segments from per-segment lengths.
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Segments { offsets }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.offsets[self.offsets.len() - 1]
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    RowDot(Var, Var),
    RowSqDist(Var, Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Records array operations for a single forward pass and replays them in
/// reverse to accumulate parameter gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v);
        if a.len() != 1 {
            return shape_err(format!("expected a scalar, got shape {:?}", a.shape));
        }
        Ok(a.data[0])
    }

    fn push(&mut self, value: Array, op: Op, what: &str) -> Result<Var> {
        let value = value.check_finite(what)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        let what = format!("parameter `{}`", store.name(id));
        self.push(value, Op::Param(id), &what)
    }

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!("matmul inner dims differ: {m}x{k} · {k2}x{n}"));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Array::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        if rows.is_empty() {
            return shape_err("gather_rows needs at least one index");
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return shape_err(format!("row index {i} out of range for {r} rows"));
            }
            out.extend_from_slice(src.row(i));
        }
        let value = Array::matrix(rows.len(), c, out)?;
        self.push(value, Op::GatherRows(table, rows.to_vec()), "gather_rows")
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start >= end || end > r {
            return shape_err(format!("row slice {start}..{end} invalid for {r} rows"));
        }
        let data = self.value(a).data[start * c..end * c].to_vec();
        self.push(Array::matrix(end - start, c, data)?, Op::SliceRows(a, start), "slice_rows")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return shape_err(format!(
                "{what} shapes differ: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (x, y) = (self.value(a), self.value(b));
        Array {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        let x = self.value(a);
        Array {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds a single row (any array with `cols` elements) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        if self.value(row).len() != c {
            return shape_err(format!(
                "add_row needs {c} values, got {}",
                self.value(row).len()
            ));
        }
        let r = self.value(row).data.clone();
        let mut v = self.value(a).clone();
        for chunk in v.data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row), "add_row")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |p| p + c);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |p| p * c);
        self.push(v, Op::Scale(a, c), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid_scalar);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(NumError::Input(format!("leaky slope {slope} outside (0, 1)")));
        }
        let v = self.map(a, |p| leaky_relu_scalar(p, slope));
        self.push(v, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    /// `max(0, x)` elementwise.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |p| p.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    /// Independent softmax over each segment of the flattened input.
    pub fn segment_softmax(&mut self, a: Var, segments: &Segments) -> Result<Var> {
        let x = self.value(a);
        if segments.total() != x.len() {
            return shape_err(format!(
                "segments cover {} values, input has {}",
                segments.total(),
                x.len()
            ));
        }
        let mut v = x.clone();
        for s in 0..segments.count() {
            let r = segments.range(s);
            if r.is_empty() {
                return shape_err(format!("softmax over empty segment {s}"));
            }
            softmax_in_place(&mut v.data[r]);
        }
        self.push(v, Op::SegmentSoftmax(a, segments.clone()), "segment_softmax")
    }

    /// Softmax of a whole array treated as one flat vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.segment_softmax(a, &Segments::from_lengths([n]))
    }

    /// `out[s] = Σ_{k∈s} weights[k] · values[k]`, one output row per segment.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, segments: &Segments) -> Result<Var> {
        let (e, c) = self.value(values).dims2()?;
        let w = &self.value(weights).data;
        if w.len() != e || segments.total() != e {
            return shape_err(format!(
                "segment_weighted_sum: {} weights, {e} value rows, segments cover {}",
                w.len(),
                segments.total()
            ));
        }
        if segments.count() == 0 {
            return shape_err("segment_weighted_sum needs at least one segment");
        }
        let vals = self.value(values);
        let mut out = vec![0.0; segments.count() * c];
        for s in 0..segments.count() {
            let orow = &mut out[s * c..(s + 1) * c];
            for k in segments.range(s) {
                let wk = w[k];
                for (o, &x) in orow.iter_mut().zip(vals.row(k)) {
                    *o += wk * x;
                }
            }
        }
        let value = Array::matrix(segments.count(), c, out)?;
        self.push(
            value,
            Op::SegmentWeightedSum(weights, values, segments.clone()),
            "segment_weighted_sum",
        )
    }

    /// Row-wise dot products of two equally shaped matrices (`m×1` result).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (m, _) = self.value(a).dims2()?;
        let (x, y) = (self.value(a), self.value(b));
        let out = (0..m)
            .map(|i| x.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).fold(0.0, |s, t| s + t))
            .collect();
        self.push(Array::matrix(m, 1, out)?, Op::RowDot(a, b), "row_dot")
    }

    /// Row-wise squared Euclidean distances (`m×1` result).
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_sq_dist")?;
        let (m, _) = self.value(a).dims2()?;
        let (x, y) = (self.value(a), self.value(b));
        let out = (0..m).map(|i| sq_l2(x.row(i), y.row(i))).collect();
        self.push(Array::matrix(m, 1, out)?, Op::RowSqDist(a, b), "row_sq_dist")
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols needs at least one input");
        };
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return shape_err(format!("concat_cols row counts differ: {rows} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Array::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data.iter().fold(0.0, |s, &x| s + x);
        self.push(Array::scalar(total), Op::Sum(a), "sum")
    }

    /// Propagates `∂output/∂·` back through the tape and adds the result into
    /// the gradient slots of `store`. Gradients accumulate across calls.
    pub fn backward(&self, output: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(output).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array {
            shape: self.value(output).shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = store.grad_mut(*id);
                    if slot.shape != g.shape {
                        return shape_err(format!(
                            "gradient shape {:?} does not match parameter `{}`",
                            g.shape,
                            store.name(*id)
                        ));
                    }
                    for (s, d) in slot.data.iter_mut().zip(&g.data) {
                        *s += d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).fold(0.0, |s, (x, y)| s + x * y);
                            let x = av[i * k + p];
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Array::matrix(m, k, ga)?);
                    accumulate(&mut grads, *b, Array::matrix(k, n, gb)?);
                }
                Op::GatherRows(t, rows) => {
                    let mut gt = Array::zeros(&self.value(*t).shape);
                    for (r, &i) in rows.iter().enumerate() {
                        for (o, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *t, gt);
                }
                Op::SliceRows(a, start) => {
                    let (_, c) = self.value(*a).dims2()?;
                    let mut ga = Array::zeros(&self.value(*a).shape);
                    ga.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Array {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|x| -x).collect(),
                    };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Array {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&y.data).map(|(d, q)| d * q).collect(),
                    };
                    let gb = Array {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&x.data).map(|(d, p)| d * p).collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let c = self.value(*row).len();
                    let mut gr = Array::zeros(&self.value(*row).shape);
                    for chunk in g.data.chunks(c) {
                        for (o, &x) in gr.data.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Scale(a, c) => {
                    let ga = Array {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|x| x * c).collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Array {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&y.data).map(|(d, s)| d * s * (1.0 - s)).collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let ga = Array {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(d, &p)| if p >= 0.0 { *d } else { d * slope })
                            .collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Array {
                        shape: g.shape.clone(),
                        data: g
                            .data
                            .iter()
                            .zip(&x.data)
                            .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = &node.value.data;
                    let mut ga = Array::zeros(&node.value.shape);
                    for s in 0..segments.count() {
                        let r = segments.range(s);
                        let dot = r.clone().fold(0.0, |acc, k| acc + y[k] * g.data[k]);
                        for k in r {
                            ga.data[k] = y[k] * (g.data[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentWeightedSum(w, v, segments) => {
                    let vals = self.value(*v);
                    let wts = self.value(*w);
                    let mut gw = Array::zeros(&wts.shape);
                    let mut gv = Array::zeros(&vals.shape);
                    for s in 0..segments.count() {
                        let grow = g.row(s);
                        for k in segments.range(s) {
                            gw.data[k] = grow.iter().zip(vals.row(k)).fold(0.0, |acc, (x, y)| acc + x * y);
                            let wk = wts.data[k];
                            for (o, &x) in gv.row_mut(k).iter_mut().zip(grow) {
                                *o = wk * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *v, gv);
                }
                Op::RowDot(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, _) = x.dims2()?;
                    let mut ga = Array::zeros(&x.shape);
                    let mut gb = Array::zeros(&y.shape);
                    for i in 0..m {
                        let d = g.data[i];
                        for ((oa, ob), (&p, &q)) in ga
                            .row_mut(i)
                            .iter_mut()
                            .zip(gb.row_mut(i).iter_mut())
                            .zip(x.row(i).iter().zip(y.row(i)))
                        {
                            *oa = d * q;
                            *ob = d * p;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::RowSqDist(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, _) = x.dims2()?;
                    let mut ga = Array::zeros(&x.shape);
                    for i in 0..m {
                        let d = 2.0 * g.data[i];
                        for (o, (&p, &q)) in ga.row_mut(i).iter_mut().zip(x.row(i).iter().zip(y.row(i))) {
                            *o = d * (p - q);
                        }
                    }
                    let gb = Array {
                        shape: ga.shape.clone(),
                        data: ga.data.iter().map(|v| -v).collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = self.value(p).dims2()?;
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.data[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(&mut grads, p, Array::matrix(rows, c, gp)?);
                        offset += c;
                    }
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let ga = Array {
                        shape: x.shape.clone(),
                        data: vec![g.data[0]; x.len()],
                    };
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            if !store.grad(id).all_finite() {
                return Err(NumError::NonFinite(format!("gradient of `{}`", store.name(id))));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

/// A scalar function of the parameters in a store, with an analytic gradient.
pub trait Objective {
    fn value(&self, store: &ParamStore) -> Result<f64>;
    /// One array per parameter, in store order.
    fn gradient(&self, store: &ParamStore) -> Result<Vec<Array>>;
}

/// Adapts a closure that records a scalar on a tape into an [`Objective`].
pub struct TapeObjective<F>(pub F);

impl<F, E> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
    E: fmt::Display,
{
    fn value(&self, store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let out = (self.0)(&mut tape, store).map_err(|e| NumError::Objective(e.to_string()))?;
        tape.scalar(out)
    }

    fn gradient(&self, store: &ParamStore) -> Result<Vec<Array>> {
        let mut tape = Tape::new();
        let out = (self.0)(&mut tape, store).map_err(|e| NumError::Objective(e.to_string()))?;
        let mut scratch = store.clone();
        scratch.zero_grads();
        tape.backward(out, &mut scratch)?;
        Ok(scratch.ids().map(|id| scratch.grad(id).clone()).collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Max relative error per parameter name.
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `objective` against central differences
/// for every entry of every parameter.
pub fn grad_check<O: Objective>(objective: &O, store: &ParamStore, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(NumError::Input(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    let analytic = objective.gradient(store)?;
    if analytic.len() != store.len() {
        return shape_err(format!(
            "objective returned {} gradients for {} parameters",
            analytic.len(),
            store.len()
        ));
    }
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::new(),
        entries_checked: 0,
        passed: true,
    };
    for id in store.ids() {
        let name = store.name(id).to_string();
        let grad = &analytic[id.0];
        if grad.shape != store.value(id).shape {
            return shape_err(format!("gradient for `{name}` has shape {:?}", grad.shape));
        }
        let mut worst = 0.0_f64;
        for k in 0..grad.len() {
            let original = store.value(id).data[k];
            probe.value_mut(id).data[k] = original + cfg.step;
            let plus = objective.value(&probe)?;
            probe.value_mut(id).data[k] = original - cfg.step;
            let minus = objective.value(&probe)?;
            probe.value_mut(id).data[k] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumError::NonFinite(format!("objective while probing `{name}`[{k}]")));
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = k;
            }
            worst = worst.max(rel);
            report.entries_checked += 1;
        }
        report.per_param.push((name, worst));
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, shape: &[usize], seed: u64) -> (ParamStore, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let id = store.add_uniform(name, shape, &mut rng).unwrap();
        (store, id)
    }

    #[test]
    fn softmax_examples() {
        let out = softmax(&Array::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let out = softmax(&Array::vector(vec![-1234.5]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0]);
        assert!(matches!(
            softmax(&Array::zeros(&[2, 2])),
            Err(NumError::Shape(_))
        ));
        assert!(Array::vector(vec![]).is_err());
    }

    #[test]
    fn softmax_matches_direct_normalisation() {
        // exp(1), exp(2), exp(3) normalised, evaluated independently.
        let e: Vec<f64> = [1.0_f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let out = softmax(&Array::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for (o, x) in out.data().iter().zip(&e) {
            assert!((o - x / z).abs() < 1e-12);
        }
        // Frozen reference values for softmax([1,2,3]).
        let frozen = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (o, f) in out.data().iter().zip(frozen) {
            assert!((o - f).abs() < 1e-12);
        }
    }

    #[test]
    fn leaky_relu_and_sigmoid_examples() {
        let v = Array::vector(vec![1.0, -1.0, 0.0]).unwrap();
        assert_eq!(leaky_relu(&v, 0.2).data(), &[1.0, -0.2, 0.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(25.0) >= 1.0 - 1e-9);
        for x in [-30.0, -3.5, 0.1, 7.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sq_l2_examples() {
        let u = Array::vector(vec![1.0, 0.0]).unwrap();
        let v = Array::vector(vec![0.0, 1.0]).unwrap();
        assert_eq!(sq_l2_distance(&u, &v).unwrap(), 2.0);
        assert_eq!(sq_l2_distance(&u, &u).unwrap(), 0.0);
        let w = Array::vector(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(sq_l2_distance(&u, &w), Err(NumError::Shape(_))));
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_p() {
        let (mut store, id) = store_with("p", &[3, 2], 1);
        let mut tape = Tape::new();
        let p = tape.param(&store, id).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let out = tape.sum(sq).unwrap();
        tape.backward(out, &mut store).unwrap();
        for (g, v) in store.grad(id).data().iter().zip(store.value(id).data()) {
            assert_eq!(*g, 2.0 * v);
        }
        // accumulation without zeroing
        tape.backward(out, &mut store).unwrap();
        for (g, v) in store.grad(id).data().iter().zip(store.value(id).data()) {
            assert_eq!(*g, 4.0 * v);
        }
        store.zero_grads();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let (mut store, id) = store_with("p", &[2, 2], 2);
        let mut tape = Tape::new();
        let _p = tape.param(&store, id).unwrap();
        let c = tape.constant(Array::scalar(3.0)).unwrap();
        tape.backward(c, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut store, id) = store_with("p", &[2, 2], 3);
        let mut tape = Tape::new();
        let p = tape.param(&store, id).unwrap();
        assert!(matches!(tape.backward(p, &mut store), Err(NumError::Shape(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(Array::scalar(700.0)).unwrap();
        let big = tape.scale(c, 1e308).unwrap_err();
        assert!(matches!(big, NumError::NonFinite(_)));
        let mut store = ParamStore::new(0);
        assert!(store
            .add("bad", Array::vector(vec![f64::NAN]).unwrap())
            .is_err());
    }

    #[test]
    fn duplicate_and_unknown_params() {
        let mut store = ParamStore::new(0);
        store.add("a", Array::scalar(1.0)).unwrap();
        assert!(matches!(
            store.add("a", Array::scalar(2.0)),
            Err(NumError::DuplicateParam(_))
        ));
        assert!(matches!(store.id("b"), Err(NumError::UnknownParam(_))));
    }

    #[test]
    fn uniform_init_respects_bounds() {
        let (store, id) = store_with("emb", &[10, 16], 9);
        let bound = 0.25;
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn quadratic_passes_grad_check() {
        let (store, id) = store_with("p", &[4], 5);
        let obj = TapeObjective(|tape: &mut Tape, s: &ParamStore| -> Result<Var> {
            let p = tape.param(s, id)?;
            let sq = tape.mul(p, p)?;
            let scaled = tape.scale(sq, 1.5)?;
            tape.sum(scaled)
        });
        let report = grad_check(&obj, &store, GradCheckConfig::with_tol(1e-6)).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    struct WrongGradient(ParamId);

    impl Objective for WrongGradient {
        fn value(&self, store: &ParamStore) -> Result<f64> {
            Ok(store.value(self.0).data().iter().map(|x| x * x).sum())
        }
        fn gradient(&self, store: &ParamStore) -> Result<Vec<Array>> {
            // d/dx x² deliberately mis-stated as x
            Ok(vec![store.value(self.0).clone()])
        }
    }

    #[test]
    fn corrupted_gradient_fails_grad_check() {
        let (store, id) = store_with("p", &[5], 6);
        let report = grad_check(&WrongGradient(id), &store, GradCheckConfig::with_tol(1e-4)).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param, "p");
    }

    #[test]
    fn grad_check_rejects_bad_tolerance() {
        let (store, id) = store_with("p", &[2], 6);
        assert!(grad_check(&WrongGradient(id), &store, GradCheckConfig::with_tol(0.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(11);
        store.add_uniform("a", &[3, 4], &mut rng).unwrap();
        store.add_uniform("b", &[7], &mut rng).unwrap();
        store
            .add("tricky", Array::vector(vec![0.1 + 0.2, 1e-300, -5e-324, 1.0 / 3.0]).unwrap())
            .unwrap();
        let back = ParamStore::from_json(&store.to_json().unwrap()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let text = r#"{"version": 99, "seed": 0, "params": []}"#;
        let err = ParamStore::from_json(text).unwrap_err();
        assert!(err.to_string().contains("expected checkpoint version 1, found 99"));
    }
}
