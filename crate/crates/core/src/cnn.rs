//! Optional convolutional encoder for the occupancy grid: three 3x3
//! convolutions (each followed by ReLU and 2x2 max-pooling) and two fully
//! connected layers down to 64 features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{OccupancyGrid, GRID_SIZE};
use crate::nn::{gemm, MlpShape, MlpTape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub channels: [usize; 3],
    pub hidden: usize,
    pub output: usize,
}

impl Default for CnnShape {
    fn default() -> Self {
        CnnShape {
            channels: [4, 8, 8],
            hidden: 128,
            output: 64,
        }
    }
}

struct ConvTape {
    side: usize,
    cols: Vec<f64>,
    /// Post-ReLU map before pooling.
    activ: Vec<f64>,
    /// Flat index into `activ` of each pooled maximum.
    argmax: Vec<usize>,
}

pub struct CnnTape {
    batch: usize,
    convs: Vec<Vec<ConvTape>>,
    fc: MlpTape,
}

impl CnnTape {
    pub fn output(&self) -> &[f64] {
        self.fc.output()
    }
}

pub fn grid_pixels(grid: &OccupancyGrid) -> Vec<f64> {
    let mut px = Vec::with_capacity(GRID_SIZE * GRID_SIZE);
    for i in 0..GRID_SIZE {
        for j in 0..GRID_SIZE {
            px.push(if grid.get(i, j) { 1.0 } else { 0.0 });
        }
    }
    px
}

fn im2col(input: &[f64], cin: usize, side: usize) -> Vec<f64> {
    let hw = side * side;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            cols[row + y * side + x] = input[c * hw + sy as usize * side + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, side: usize) -> Vec<f64> {
    let hw = side * side;
    let mut out = vec![0.0; cin * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            out[c * hw + sy as usize * side + sx as usize] += cols[row + y * side + x];
                        }
                    }
                }
            }
        }
    }
    out
}

impl CnnShape {
    fn conv_in(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.channels[l - 1]
        }
    }

    fn conv_offset(&self, l: usize) -> usize {
        (0..l).map(|i| self.channels[i] * (self.conv_in(i) * 9 + 1)).sum()
    }

    pub fn flat_dim(&self) -> usize {
        let side = GRID_SIZE >> 3;
        self.channels[2] * side * side
    }

    pub fn fc(&self) -> MlpShape {
        MlpShape::new(vec![self.flat_dim(), self.hidden, self.output])
    }

    pub fn param_count(&self) -> usize {
        self.conv_offset(3) + self.fc().param_count()
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in 0..3 {
            let fan_in = self.conv_in(l) * 9;
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..self.channels[l] * (fan_in + 1) {
                p.push(rng.random_range(-bound..bound));
            }
        }
        p.extend(self.fc().init(rng));
        p
    }

    /// `pixels` holds `batch` row-major 64x64 maps.
    pub fn forward(&self, params: &[f64], pixels: &[f64], batch: usize) -> CnnTape {
        let fc_shape = self.fc();
        let conv_end = self.conv_offset(3);
        let mut convs = Vec::with_capacity(batch);
        let mut flat = Vec::with_capacity(batch * self.flat_dim());
        for s in 0..batch {
            let mut x = pixels[s * GRID_SIZE * GRID_SIZE..(s + 1) * GRID_SIZE * GRID_SIZE].to_vec();
            let mut side = GRID_SIZE;
            let mut tapes = Vec::with_capacity(3);
            for l in 0..3 {
                let (cin, cout) = (self.conv_in(l), self.channels[l]);
                let hw = side * side;
                let off = self.conv_offset(l);
                let w = &params[off..off + cout * cin * 9];
                let b = &params[off + cout * cin * 9..off + cout * (cin * 9 + 1)];
                let cols = im2col(&x, cin, side);
                let mut activ = Vec::with_capacity(cout * hw);
                for bias in b {
                    activ.extend(std::iter::repeat_n(*bias, hw));
                }
                gemm(cout, cin * 9, hw, w, (cin * 9, 1), &cols, (hw, 1), 1.0, &mut activ, (hw, 1));
                for v in &mut activ {
                    *v = v.max(0.0);
                }
                let half = side / 2;
                let mut pooled = Vec::with_capacity(cout * half * half);
                let mut argmax = Vec::with_capacity(cout * half * half);
                for c in 0..cout {
                    for y in 0..half {
                        for xx in 0..half {
                            let mut best = c * hw + 2 * y * side + 2 * xx;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let k = c * hw + (2 * y + dy) * side + 2 * xx + dx;
                                if activ[k] > activ[best] {
                                    best = k;
                                }
                            }
                            pooled.push(activ[best]);
                            argmax.push(best);
                        }
                    }
                }
                tapes.push(ConvTape { side, cols, activ, argmax });
                x = pooled;
                side = half;
            }
            flat.extend_from_slice(&x);
            convs.push(tapes);
        }
        let mut fc = fc_shape.forward(&params[conv_end..], &flat, batch);
        // features leave the encoder rectified
        let last = fc.acts.last_mut().expect("fc output");
        for v in last.iter_mut() {
            *v = v.max(0.0);
        }
        CnnTape { batch, convs, fc }
    }

    /// Accumulates gradients of `sum(d_out * output)`.
    pub fn backward(&self, params: &[f64], tape: &CnnTape, d_out: &[f64], grads: &mut [f64]) {
        let fc_shape = self.fc();
        let conv_end = self.conv_offset(3);
        let mut d = d_out.to_vec();
        for (g, a) in d.iter_mut().zip(tape.fc.output()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let (gconv, gfc) = grads.split_at_mut(conv_end);
        let d_flat = fc_shape
            .backward(&params[conv_end..], &tape.fc, &d, gfc, true)
            .expect("input gradient requested");
        let flat_dim = self.flat_dim();
        for s in 0..tape.batch {
            let mut delta = d_flat[s * flat_dim..(s + 1) * flat_dim].to_vec();
            for l in (0..3).rev() {
                let ct = &tape.convs[s][l];
                let (cin, cout) = (self.conv_in(l), self.channels[l]);
                let hw = ct.side * ct.side;
                let mut d_act = vec![0.0; cout * hw];
                for (k, &idx) in ct.argmax.iter().enumerate() {
                    if ct.activ[idx] > 0.0 {
                        d_act[idx] += delta[k];
                    }
                }
                let off = self.conv_offset(l);
                let (gw, gb) = gconv[off..off + cout * (cin * 9 + 1)].split_at_mut(cout * cin * 9);
                gemm(cout, hw, cin * 9, &d_act, (hw, 1), &ct.cols, (1, hw), 1.0, gw, (cin * 9, 1));
                for c in 0..cout {
                    gb[c] += d_act[c * hw..(c + 1) * hw].iter().sum::<f64>();
                }
                if l == 0 {
                    break;
                }
                let w = &params[off..off + cout * cin * 9];
                let mut d_cols = vec![0.0; cin * 9 * hw];
                gemm(cin * 9, cout, hw, w, (1, cin * 9), &d_act, (hw, 1), 0.0, &mut d_cols, (hw, 1));
                delta = col2im(&d_cols, cin, ct.side);
            }
        }
    }
}
