//! Fixed-topology feedforward network with hand-written reverse-mode gradients.
//!
//! The network is `input -> ReLU hidden layers -> linear output`. Weights are
//! stored row-major (`n_out x n_in`), followed by the bias vector, layer by
//! layer. That same flat order is used by [`FeedforwardNet::params`],
//! [`NetGradients::as_flat`] and the checkpoint format.
//!
//! Forward passes return a [`Tape`] holding the activations needed by
//! [`FeedforwardNet::backward`]. A tape remembers which network (and which
//! parameter version) produced it, so gradients are never computed against
//! parameters that changed after the forward pass.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Layer sizes of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl NetArch {
    pub const DEFAULT_HIDDEN: [usize; 2] = [100, 100];

    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArch(format!(
                "input and output dimensions must be positive (got {input_dim} -> {output_dim})"
            )));
        }
        if hidden_dims.is_empty() {
            return Err(Error::InvalidArch(
                "at least one hidden layer is required".into(),
            ));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::InvalidArch(format!(
                "zero-width hidden layer in {hidden_dims:?}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            output_dim,
        })
    }

    /// Two hidden layers of 100 units.
    pub fn two_hidden(input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::new(input_dim, Self::DEFAULT_HIDDEN.to_vec(), output_dim)
    }

    /// `(n_in, n_out)` for each affine layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Closed-form parameter count:
/// `(I+1)H_1 + sum_{i<l} (H_i+1)H_{i+1} + (H_l+1)*output_dim`.
pub fn count_params(arch: &NetArch) -> usize {
    let h = &arch.hidden_dims;
    let first = (arch.input_dim + 1) * h[0];
    let middle: usize = h.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    let last = (h[h.len() - 1] + 1) * arch.output_dim;
    first + middle + last
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.n_in + inp]
    }
}

/// Activation record of one (batched) forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    net_id: u64,
    version: u64,
    batch: usize,
    /// `inputs[l]` is the (batch x n_in) input of layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer, (batch x n_out).
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

/// Gradient of a scalar with respect to every parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    layers: Vec<Layer>,
}

impl NetGradients {
    pub fn zeros(arch: &NetArch) -> Self {
        Self {
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
        }
    }

    pub fn from_flat(arch: &NetArch, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros(arch);
        write_flat(&mut g.layers, flat)?;
        Ok(g)
    }

    pub fn as_flat(&self) -> Vec<f64> {
        read_flat(&self.layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug)]
pub struct FeedforwardNet {
    arch: NetArch,
    layers: Vec<Layer>,
    id: u64,
    version: u64,
}

impl Clone for FeedforwardNet {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl FeedforwardNet {
    /// All parameters zero.
    pub fn zeros(arch: NetArch) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer::zeros(i, o))
            .collect();
        Self {
            arch,
            layers,
            id: fresh_id(),
            version: 0,
        }
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(arch: NetArch, rng: &mut R) -> Self {
        let mut net = Self::zeros(arch);
        for l in &mut net.layers {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of scalars actually allocated.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        read_flat(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        write_flat(&mut self.layers, flat)?;
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.forward_batch(x, 1)
    }

    /// Forward pass over `batch` row-major inputs. Returns the `batch x output_dim` outputs.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<(Vec<f64>, Tape)> {
        self.check_input(xs, batch)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut current = xs.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &current, batch);
            let next = if idx + 1 < n_layers {
                z.iter().map(|&v| relu(v)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        let tape = Tape {
            net_id: self.id,
            version: self.version,
            batch,
            inputs,
            pre,
        };
        Ok((current, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(x, 1)
    }

    pub fn predict_batch(&self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(xs, batch)?;
        let n_layers = self.layers.len();
        let mut current = xs.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &current, batch);
            if idx + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = relu(*v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Gradient of `sum(dy . y)` over the taped batch with respect to every parameter.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<NetGradients> {
        if tape.net_id != self.id || tape.version != self.version {
            return Err(Error::StaleTape);
        }
        let batch = tape.batch;
        let expected = batch * self.arch.output_dim;
        if dy.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "backward dy",
                expected,
                got: dy.len(),
            });
        }
        let mut grads = NetGradients::zeros(&self.arch);
        let mut delta = dy.to_vec();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let (n_in, n_out) = (layer.n_in, layer.n_out);
            let x = &tape.inputs[idx];
            let g = &mut grads.layers[idx];
            // dW = delta^T . x
            gemm(
                n_out,
                batch,
                n_in,
                1.0,
                &delta,
                1,
                n_out as isize,
                x,
                n_in as isize,
                1,
                0.0,
                &mut g.weights,
                n_in as isize,
                1,
            );
            for row in delta.chunks_exact(n_out) {
                for (b, d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if idx == 0 {
                break;
            }
            // dx = delta . W, then gate by the previous layer's ReLU.
            let mut dx = vec![0.0; batch * n_in];
            gemm(
                batch,
                n_out,
                n_in,
                1.0,
                &delta,
                n_out as isize,
                1,
                &layer.weights,
                n_in as isize,
                1,
                0.0,
                &mut dx,
                n_in as isize,
                1,
            );
            for (d, &z) in dx.iter_mut().zip(&tape.pre[idx - 1]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = dx;
        }
        Ok(grads)
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &NetGradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.check_grad_shape(grads)?;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Overwrite this network's parameters with `src`'s.
    pub fn copy_params_from(&mut self, src: &FeedforwardNet) -> Result<()> {
        if self.arch != src.arch {
            return Err(Error::ArchMismatch(format!(
                "cannot copy {:?} into {:?}",
                src.arch, self.arch
            )));
        }
        if self.id == src.id {
            return Ok(());
        }
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            d.weights.copy_from_slice(&s.weights);
            d.bias.copy_from_slice(&s.bias);
        }
        self.version += 1;
        Ok(())
    }

    /// Writes the binary checkpoint described in the crate README.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let mut dims = vec![self.arch.input_dim];
        dims.extend_from_slice(&self.arch.hidden_dims);
        dims.push(self.arch.output_dim);
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for p in self.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut cursor = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| bad("missing checkpoint magic"))?;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        let n_dims = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if n_dims < 3 {
            return Err(bad(
                "checkpoint needs at least input, one hidden and output dimension",
            ));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let arch = NetArch::new(dims[0], dims[1..n_dims - 1].to_vec(), dims[n_dims - 1])?;
        let n = count_params(&arch);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if !cursor.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let mut net = Self::zeros(arch);
        net.set_params(&params)?;
        Ok(net)
    }

    fn check_input(&self, xs: &[f64], batch: usize) -> Result<()> {
        let expected = batch * self.arch.input_dim;
        if batch == 0 || xs.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "forward input",
                expected,
                got: xs.len(),
            });
        }
        Ok(())
    }

    fn check_grad_shape(&self, grads: &NetGradients) -> Result<()> {
        let congruent = grads.layers.len() == self.layers.len()
            && grads
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(g, l)| g.n_in == l.n_in && g.n_out == l.n_out);
        if congruent {
            Ok(())
        } else {
            Err(Error::ArchMismatch(
                "gradient shape differs from network".into(),
            ))
        }
    }
}

/// Deep-copies `src`'s parameters into `dst`.
pub fn copy_params(src: &FeedforwardNet, dst: &mut FeedforwardNet) -> Result<()> {
    dst.copy_params_from(src)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FFNET\x00\x00\x01";

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `x . W^T + b` for a row-major batch.
fn affine(layer: &Layer, x: &[f64], batch: usize) -> Vec<f64> {
    let (n_in, n_out) = (layer.n_in, layer.n_out);
    let mut z = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        z.extend_from_slice(&layer.bias);
    }
    gemm(
        batch,
        n_in,
        n_out,
        1.0,
        x,
        n_in as isize,
        1,
        &layer.weights,
        1,
        n_in as isize,
        1.0,
        &mut z,
        n_out as isize,
        1,
    );
    z
}

/// `C <- alpha * A . B + beta * C` with explicit strides.
#[rustfmt::skip]
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    alpha: f64,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    beta: f64,
    c: &mut [f64], rsc: isize, csc: isize,
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa));
    assert!(b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

fn read_flat(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn write_flat(layers: &mut [Layer], flat: &[f64]) -> Result<()> {
    let expected: usize = layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
    if flat.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "flat parameter vector",
            expected,
            got: flat.len(),
        });
    }
    let mut rest = flat;
    for l in layers {
        let (w, tail) = rest.split_at(l.weights.len());
        l.weights.copy_from_slice(w);
        let (b, tail) = tail.split_at(l.bias.len());
        l.bias.copy_from_slice(b);
        rest = tail;
    }
    Ok(())
}
