//! Dense networks over flat parameter vectors.
//!
//! Shapes are separate from parameters so that optimizers, target-network
//! averaging and checkpoints all operate on plain `Vec<f64>`s.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `C = A B + beta C` for row/column-strided views. `a` is `m x k`, `b` is
/// `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(k == 0 || a.len() >= extent(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, csc));
    // SAFETY: the extents above bound every index touched by dgemm, and `c`
    // is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub sizes: Vec<usize>,
}

/// Activations kept from a forward pass: `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has an input")
    }
}

impl MlpShape {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        MlpShape { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weights (row-major `out x in`), followed by its
    /// biases.
    pub fn offset(&self, l: usize) -> usize {
        (0..l).map(|i| (self.sizes[i] + 1) * self.sizes[i + 1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.offset(self.layers())
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in 0..self.layers() {
            let bound = 1.0 / (self.sizes[l] as f64).sqrt();
            for _ in 0..(self.sizes[l] + 1) * self.sizes[l + 1] {
                p.push(rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn forward(&self, params: &[f64], input: &[f64], batch: usize) -> MlpTape {
        assert_eq!(input.len(), batch * self.input_dim());
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        let mut tape = MlpTape { batch, acts };
        self.forward_from(params, &mut tape, 0);
        tape
    }

    /// Recomputes layers `from..` in place, reusing `tape.acts[..=from]`.
    pub fn forward_from(&self, params: &[f64], tape: &mut MlpTape, from: usize) {
        tape.acts.truncate(from + 1);
        let batch = tape.batch;
        for l in from..self.layers() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &params[off..off + din * dout];
            let b = &params[off + din * dout..off + (din + 1) * dout];
            let mut y = Vec::with_capacity(batch * dout);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            gemm(batch, din, dout, &tape.acts[l], (din, 1), w, (1, din), 1.0, &mut y, (dout, 1));
            if l + 1 < self.layers() {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            tape.acts.push(y);
        }
    }

    /// Accumulates parameter gradients of `sum(d_out * output)` into
    /// `grads` and returns the gradient with respect to the input when
    /// `input_grad` is set.
    pub fn backward(&self, params: &[f64], tape: &MlpTape, d_out: &[f64], grads: &mut [f64], input_grad: bool) -> Option<Vec<f64>> {
        let batch = tape.batch;
        assert_eq!(d_out.len(), batch * self.output_dim());
        assert_eq!(grads.len(), self.param_count());
        let mut delta = d_out.to_vec();
        for l in (0..self.layers()).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.layers() {
                for (d, a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = self.offset(l);
            let (gw, gb) = grads[off..off + (din + 1) * dout].split_at_mut(din * dout);
            gemm(dout, batch, din, &delta, (1, dout), &tape.acts[l], (din, 1), 1.0, gw, (din, 1));
            for row in delta.chunks_exact(dout) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 && !input_grad {
                return None;
            }
            let w = &params[off..off + din * dout];
            let mut dx = vec![0.0; batch * din];
            gemm(batch, dout, din, &delta, (dout, 1), w, (din, 1), 0.0, &mut dx, (din, 1));
            delta = dx;
        }
        Some(delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// `target <- tau * source + (1 - tau) * target`
pub fn polyak(target: &mut [f64], source: &[f64], tau: f64) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = tau * s + (1.0 - tau) * *t;
    }
}
