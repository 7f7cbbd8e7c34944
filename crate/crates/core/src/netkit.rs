//! Small deterministic differentiable kernels with hand-written reverse-mode
//! gradients, a named parameter store and a central-difference gradient
//! checker.
//!
//! Every layer keeps only [`ParamId`]s; values and gradient accumulators live
//! in the [`ParamStore`]. Backward passes add into the accumulators and the
//! caller zeroes them between steps.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor2 {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out += self · x`
    fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · dy`
    fn t_matvec_acc(&self, dy: &[f64], out: &mut [f64]) {
        for (&g, row) in dy.iter().zip(self.data.chunks_exact(self.cols)) {
            if g != 0.0 {
                axpy(g, row, out);
            }
        }
    }

    /// `self += dy · xᵀ`
    fn add_outer(&mut self, dy: &[f64], x: &[f64]) {
        for (&g, row) in dy.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if g != 0.0 {
                axpy(g, x, row);
            }
        }
    }

    fn add_vec(&mut self, v: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(v) {
            *a += b;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ensure_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Named parameters, kept in insertion order, each with a gradient
/// accumulator of the same shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor2) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        let (r, c) = value.shape();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter initialised uniformly in `±scale`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor2::from_vec(rows, cols, data)?)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        let mut t = Tensor2::zeros(rows, cols);
        t.fill(v);
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Looks up a parameter and checks its shape.
    pub fn bind(&self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::shape("bind", format!("missing parameter {name}")))?;
        let shape = self.value(id).shape();
        if shape != (rows, cols) {
            return Err(Error::shape(
                "bind",
                format!("parameter {name} is {}x{}, expected {rows}x{cols}", shape.0, shape.1),
            ));
        }
        Ok(id)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
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

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Squared L2 norm of the gradients of every parameter whose name starts
    /// with `prefix`.
    pub fn grad_norm_sq(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.grad.data.iter().map(|g| g * g).sum::<f64>())
            .sum()
    }

    /// Copies every parameter of `other` into this store, failing on name
    /// collisions.
    pub fn merge(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            self.add(&p.name, p.value.clone())?;
        }
        Ok(())
    }

    /// Bit-exact equality of all values, ignoring gradients.
    pub fn values_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data.iter().zip(&b.value.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rows as u64).to_le_bytes());
            h.update((p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub const PARAMS_FORMAT: &str = "jointep-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format: String,
    version: u32,
    meta: serde_json::Value,
    checksum: String,
    params: Vec<ParamEntry>,
}

/// Writes a versioned JSON parameter file. `meta` is stored verbatim and
/// holds the model-config block.
pub fn write_params<M: Serialize>(path: &Path, store: &ParamStore, meta: &M) -> Result<()> {
    let file = ParamFile {
        format: PARAMS_FORMAT.to_string(),
        version: PARAMS_VERSION,
        meta: serde_json::to_value(meta)?,
        checksum: store.checksum(),
        params: store
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
                data: p.value.data.clone(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ParamFile =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("malformed parameter file: {e}")))?;
    if file.format != PARAMS_FORMAT {
        return Err(Error::Integrity(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != PARAMS_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: PARAMS_VERSION,
        });
    }
    let mut store = ParamStore::new();
    for e in file.params {
        let t = Tensor2::from_vec(e.rows, e.cols, e.data)
            .map_err(|err| Error::Integrity(format!("parameter {}: {err}", e.name)))?;
        store
            .add(&e.name, t)
            .map_err(|err| Error::Integrity(err.to_string()))?;
    }
    if store.checksum() != file.checksum {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    Ok((store, file.meta))
}

/// `y = W·x + b`
pub fn dense_forward(x: &[f64], w: &Tensor2, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::shape(
            "dense",
            format!("W is {}x{}, x has {}, b has {}", w.rows, w.cols, x.len(), b.len()),
        ));
    }
    let mut y = b.to_vec();
    w.matvec_acc(x, &mut y);
    ensure_finite("dense output", &y)?;
    Ok(y)
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

/// Fully-connected layer.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), d_out, d_in, scale, rng)?;
        let b = store.add_const(&format!("{name}.b"), d_out, 1, 0.0)?;
        Ok(Dense { w, b, d_in, d_out })
    }

    pub fn bind(store: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Dense {
            w: store.bind(&format!("{name}.w"), d_out, d_in)?,
            b: store.bind(&format!("{name}.b"), d_out, 1)?,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        dense_forward(x, store.value(self.w), store.value(self.b).data())
    }

    /// Accumulates parameter gradients and, when `dx` is given, adds the
    /// input gradient to it.
    pub fn backward(&self, store: &mut ParamStore, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        store.grad_mut(self.w).add_outer(dy, x);
        store.grad_mut(self.b).add_vec(dy);
        if let Some(dx) = dx {
            store.value(self.w).t_matvec_acc(dy, dx);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Raw weights of one LSTM cell. Gate rows are packed as input, forget,
/// candidate, output.
pub struct LstmWeights<'a> {
    pub wx: &'a Tensor2,
    pub wh: &'a Tensor2,
    pub b: &'a Tensor2,
}

/// Intermediate values of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// activated gates, packed like the weights
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One LSTM step: sigmoid input/forget/output gates, tanh candidate and
/// output squashing. Returns `y = h'`.
pub fn lstm_cell_step(x: &[f64], st: &LstmState, w: &LstmWeights) -> Result<(Vec<f64>, LstmState)> {
    let (y, st, _) = lstm_step_cached(x, st, w)?;
    Ok((y, st))
}

fn lstm_step_cached(x: &[f64], st: &LstmState, w: &LstmWeights) -> Result<(Vec<f64>, LstmState, LstmCache)> {
    let hidden = st.h.len();
    if w.wx.rows != 4 * hidden
        || w.wx.cols != x.len()
        || w.wh.shape() != (4 * hidden, hidden)
        || w.b.shape() != (4 * hidden, 1)
        || st.c.len() != hidden
    {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x {} h {} c {} wx {:?} wh {:?} b {:?}",
                x.len(),
                hidden,
                st.c.len(),
                w.wx.shape(),
                w.wh.shape(),
                w.b.shape()
            ),
        ));
    }
    let mut gates = w.b.data.clone();
    w.wx.matvec_acc(x, &mut gates);
    w.wh.matvec_acc(&st.h, &mut gates);
    for (k, g) in gates.iter_mut().enumerate() {
        *g = if (2 * hidden..3 * hidden).contains(&k) { g.tanh() } else { sigmoid(*g) };
    }
    let (i, rest) = gates.split_at(hidden);
    let (f, rest) = rest.split_at(hidden);
    let (g, o) = rest.split_at(hidden);
    let c: Vec<f64> = (0..hidden).map(|k| f[k] * st.c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
    ensure_finite("lstm state", &c)?;
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: st.h.clone(),
        c_prev: st.c.clone(),
        gates,
        tanh_c,
    };
    Ok((h.clone(), LstmState { h, c }, cache))
}

/// LSTM layer bound to a parameter store.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let scale = 1.0 / (hidden as f64).sqrt();
        let wx = store.add_uniform(&format!("{name}.wx"), 4 * hidden, d_in, scale, rng)?;
        let wh = store.add_uniform(&format!("{name}.wh"), 4 * hidden, hidden, scale, rng)?;
        let mut bias = Tensor2::zeros(4 * hidden, 1);
        for k in hidden..2 * hidden {
            bias.data[k] = 1.0;
        }
        let b = store.add(&format!("{name}.b"), bias)?;
        Ok(Lstm { wx, wh, b, d_in, hidden })
    }

    pub fn bind(store: &ParamStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            wx: store.bind(&format!("{name}.wx"), 4 * hidden, d_in)?,
            wh: store.bind(&format!("{name}.wh"), 4 * hidden, hidden)?,
            b: store.bind(&format!("{name}.b"), 4 * hidden, 1)?,
            d_in,
            hidden,
        })
    }

    fn weights<'a>(&self, store: &'a ParamStore) -> LstmWeights<'a> {
        LstmWeights {
            wx: store.value(self.wx),
            wh: store.value(self.wh),
            b: store.value(self.b),
        }
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], st: &LstmState) -> Result<(LstmState, LstmCache)> {
        let (_, st, cache) = lstm_step_cached(x, st, &self.weights(store))?;
        Ok((st, cache))
    }

    /// Backward through one step. `dh` and `dc` are the gradients flowing into
    /// this step's outputs; returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        store: &mut ParamStore,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let gates = &cache.gates;
        let mut dpre = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            let tc = cache.tanh_c[k];
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dpre[k] = dct * g * i * (1.0 - i);
            dpre[hd + k] = dct * cache.c_prev[k] * f * (1.0 - f);
            dpre[2 * hd + k] = dct * i * (1.0 - g * g);
            dpre[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dct * f;
        }
        store.grad_mut(self.wx).add_outer(&dpre, &cache.x);
        store.grad_mut(self.wh).add_outer(&dpre, &cache.h_prev);
        store.grad_mut(self.b).add_vec(&dpre);
        let mut dx = vec![0.0; self.d_in];
        store.value(self.wx).t_matvec_acc(&dpre, &mut dx);
        let mut dh_prev = vec![0.0; hd];
        store.value(self.wh).t_matvec_acc(&dpre, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }
}

/// Pointwise dense → causal depthwise convolution over the last `kernel`
/// frames → tanh → residual add.
#[derive(Debug, Clone, Copy)]
pub struct CausalBlock {
    pub pw: Dense,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dim: usize,
    pub kernel: usize,
}

/// Cache of a sequence forward pass: pointwise outputs and tanh activations.
#[derive(Debug, Clone)]
pub struct CausalBlockCache {
    a: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

/// Streaming state: the last `kernel − 1` pointwise outputs, newest first.
#[derive(Debug, Clone, Default)]
pub struct CausalBlockState {
    history: VecDeque<Vec<f64>>,
}

impl CausalBlock {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let pw = Dense::init(store, &format!("{name}.pw"), dim, dim, rng)?;
        let conv_w = store.add_uniform(&format!("{name}.conv.w"), dim, kernel, 1.0 / (kernel as f64).sqrt(), rng)?;
        let conv_b = store.add_const(&format!("{name}.conv.b"), dim, 1, 0.0)?;
        Ok(CausalBlock {
            pw,
            conv_w,
            conv_b,
            dim,
            kernel,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        Ok(CausalBlock {
            pw: Dense::bind(store, &format!("{name}.pw"), dim, dim)?,
            conv_w: store.bind(&format!("{name}.conv.w"), dim, kernel)?,
            conv_b: store.bind(&format!("{name}.conv.b"), dim, 1)?,
            dim,
            kernel,
        })
    }

    /// Streaming step. Returns the output frame and the pointwise/tanh values
    /// used by [`CausalBlock::backward`].
    fn step_inner(&self, store: &ParamStore, x: &[f64], st: &mut CausalBlockState) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if x.len() != self.dim {
            return Err(Error::shape(
                "causal_block",
                format!("input has {} features, block dim is {}", x.len(), self.dim),
            ));
        }
        let a = self.pw.forward(store, x)?;
        let kw = store.value(self.conv_w);
        let mut z = store.value(self.conv_b).data.clone();
        for (c, zc) in z.iter_mut().enumerate() {
            let taps = kw.row(c);
            *zc += taps[0] * a[c];
            for (j, past) in st.history.iter().enumerate().take(self.kernel - 1) {
                *zc += taps[j + 1] * past[c];
            }
        }
        let s: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let y: Vec<f64> = x.iter().zip(&s).map(|(xi, si)| xi + si).collect();
        if self.kernel > 1 {
            st.history.push_front(a.clone());
            st.history.truncate(self.kernel - 1);
        }
        Ok((y, a, s))
    }

    pub fn step(&self, store: &ParamStore, x: &[f64], st: &mut CausalBlockState) -> Result<Vec<f64>> {
        Ok(self.step_inner(store, x, st)?.0)
    }

    pub fn forward(&self, store: &ParamStore, xs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, CausalBlockCache)> {
        let mut st = CausalBlockState::default();
        let mut ys = Vec::with_capacity(xs.len());
        let mut cache = CausalBlockCache {
            a: Vec::with_capacity(xs.len()),
            s: Vec::with_capacity(xs.len()),
        };
        for x in xs {
            let (y, a, s) = self.step_inner(store, x, &mut st)?;
            ys.push(y);
            cache.a.push(a);
            cache.s.push(s);
        }
        Ok((ys, cache))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        xs: &[Vec<f64>],
        cache: &CausalBlockCache,
        dys: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let n = xs.len();
        let d = self.dim;
        let mut da = vec![vec![0.0; d]; n];
        {
            let kw = store.value(self.conv_w).clone();
            let mut dkw = Tensor2::zeros(d, self.kernel);
            let mut dcb = vec![0.0; d];
            for t in 0..n {
                for c in 0..d {
                    let s = cache.s[t][c];
                    let dz = dys[t][c] * (1.0 - s * s);
                    if dz == 0.0 {
                        continue;
                    }
                    dcb[c] += dz;
                    for j in 0..self.kernel.min(t + 1) {
                        dkw.data[c * self.kernel + j] += dz * cache.a[t - j][c];
                        da[t - j][c] += kw.data[c * self.kernel + j] * dz;
                    }
                }
            }
            store.grad_mut(self.conv_w).add_vec(&dkw.data);
            store.grad_mut(self.conv_b).add_vec(&dcb);
        }
        let mut dxs = dys.to_vec();
        for t in 0..n {
            self.pw.backward(store, &xs[t], &da[t], Some(&mut dxs[t]));
        }
        dxs
    }
}

/// Result of a central-difference check for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.max_rel_err.is_nan() || c.max_rel_err >= self.tol)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Denominator floor for relative errors, so that gradients which are zero
/// up to finite-difference noise are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients accumulated by `loss_and_grad` with central
/// differences of the loss it returns.
///
/// `loss_and_grad` must compute the loss for the current parameter values and
/// add its analytic gradient into the store's accumulators.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_and_grad: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grads();
    let base = loss_and_grad(store)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let analytic: Vec<Tensor2> = store.params.iter().map(|p| p.grad.clone()).collect();
    let mut checks = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let mut check = ParamCheck {
            name: store.params[pi].name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..store.params[pi].value.data.len() {
            let orig = store.params[pi].value.data[k];
            store.params[pi].value.data[k] = orig + eps;
            let plus = loss_and_grad(store)?;
            store.params[pi].value.data[k] = orig - eps;
            let minus = loss_and_grad(store)?;
            store.params[pi].value.data[k] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!("grad_check loss near {}", check.name)));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data[k];
            let err = rel_err(a, numeric);
            if err > check.max_rel_err || k == 0 {
                check.max_rel_err = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    for (p, g) in store.params.iter_mut().zip(analytic) {
        p.grad = g;
    }
    let passed = checks.iter().all(|c| c.max_rel_err < tol);
    Ok(GradCheckReport { checks, tol, passed })
}
