//! Dense building blocks with explicit reverse-mode gradients.
//!
//! All parameters of a network live in one flat buffer; layers hold offsets
//! into it. Activations are row-major `rows x width` slices.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Named view into the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter buffer plus its tensor index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub specs: Vec<TensorSpec>,
}

impl ParamStore {
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.values.len();
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset };
        self.values.resize(offset + spec.len(), 0.0);
        self.specs.push(spec);
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn fill_normal(&mut self, range: std::ops::Range<usize>, std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut self.values[range] {
            *v = dist.sample(rng);
        }
    }
}

/// Affine map `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn alloc(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.alloc(format!("{name}.weight"), &[inputs, outputs]);
        let bias = store.alloc(format!("{name}.bias"), &[outputs]);
        Self { weight, bias, inputs, outputs }
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight..self.weight + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias..self.bias + self.outputs
    }

    /// Scaled normal init for weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = (1.0 / self.inputs as f64).sqrt();
        store.fill_normal(self.weight_range(), std, rng);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let (n_in, n_out) = (self.inputs, self.outputs);
        let w = &p[self.weight_range()];
        let b = &p[self.bias_range()];
        let mut y = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            y.extend_from_slice(b);
            let yr = &mut y[r * n_out..(r + 1) * n_out];
            for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * n_out..(i + 1) * n_out];
                for (yo, wo) in yr.iter_mut().zip(wi) {
                    *yo += xi * wo;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `g`; returns `dL/dx` when
    /// `need_input_grad`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        need_input_grad: bool,
    ) -> Vec<f64> {
        let (n_in, n_out) = (self.inputs, self.outputs);
        {
            let gb = &mut g[self.bias..self.bias + n_out];
            for r in 0..rows {
                for (gbo, d) in gb.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
                    *gbo += d;
                }
            }
        }
        {
            let gw = &mut g[self.weight..self.weight + n_in * n_out];
            for r in 0..rows {
                let dyr = &dy[r * n_out..(r + 1) * n_out];
                for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (gwo, d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(dyr) {
                        *gwo += xi * d;
                    }
                }
            }
        }
        if !need_input_grad {
            return Vec::new();
        }
        let w = &p[self.weight_range()];
        let mut dx = vec![0.0; rows * n_in];
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            for (i, dxi) in dx[r * n_in..(r + 1) * n_in].iter_mut().enumerate() {
                *dxi = w[i * n_out..(i + 1) * n_out].iter().zip(dyr).map(|(a, b)| a * b).sum();
            }
        }
        dx
    }
}

const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalization without affine parameters. Returns the
/// normalized rows and each row's inverse standard deviation.
pub fn layer_norm(x: &[f64], rows: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * width];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

pub fn layer_norm_backward(normed: &[f64], inv_std: &[f64], dn: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dn.len()];
    for (r, &is) in inv_std.iter().enumerate() {
        let n = &normed[r * width..(r + 1) * width];
        let d = &dn[r * width..(r + 1) * width];
        let mean_d = d.iter().sum::<f64>() / width as f64;
        let mean_dn = d.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        for ((o, dv), nv) in dx[r * width..(r + 1) * width].iter_mut().zip(d).zip(n) {
            *o = is * (dv - mean_d - nv * mean_dn);
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Gelu => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                0.5 * z * (1.0 + u.tanh())
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du
            }
        }
    }

    pub fn forward(self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn backward(self, z: &[f64], da: &[f64]) -> Vec<f64> {
        z.iter().zip(da).map(|(&v, &d)| d * self.derivative(v)).collect()
    }
}

/// Multi-head self attention over `rows` tokens given packed `[q | k | v]`
/// rows of width `3 * width`. Returns the head-concatenated output and the
/// attention probabilities (`heads x rows x rows`).
pub fn attention(qkv: &[f64], rows: usize, width: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut out = vec![0.0; rows * width];
    let mut probs = vec![0.0; heads * rows * rows];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
        for i in 0..rows {
            let q = &qkv[i * stride + qo..i * stride + qo + hd];
            let p = &mut probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let k = &qkv[j * stride + ko..j * stride + ko + hd];
                *pj = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*pj);
            }
            let mut total = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                total += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= total;
            }
            let o = &mut out[i * width + qo..i * width + qo + hd];
            for (j, &pj) in p.iter().enumerate() {
                let v = &qkv[j * stride + vo..j * stride + vo + hd];
                for (oc, vc) in o.iter_mut().zip(v) {
                    *oc += pj * vc;
                }
            }
        }
    }
    (out, probs)
}

pub fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    rows: usize,
    width: usize,
    heads: usize,
) -> Vec<f64> {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * width;
    let mut dqkv = vec![0.0; rows * stride];
    let mut dp = vec![0.0; rows];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, width + h * hd, 2 * width + h * hd);
        for i in 0..rows {
            let p = &probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            let d_o = &dout[i * width + qo..i * width + qo + hd];
            for j in 0..rows {
                let v = &qkv[j * stride + vo..j * stride + vo + hd];
                dp[j] = d_o.iter().zip(v).map(|(a, b)| a * b).sum();
                // dV_j += p_ij * dO_i
                for (dv, d) in dqkv[j * stride + vo..j * stride + vo + hd].iter_mut().zip(d_o) {
                    *dv += p[j] * d;
                }
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..rows {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    let qi = qkv[i * stride + qo + c];
                    let kj = qkv[j * stride + ko + c];
                    dqkv[i * stride + qo + c] += ds * kj;
                    dqkv[j * stride + ko + c] += ds * qi;
                }
            }
        }
    }
    dqkv
}
