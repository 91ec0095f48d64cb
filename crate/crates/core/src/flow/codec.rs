/// Sinusoidal scalar encoding: `[sin(w_0 v), cos(w_0 v), sin(w_1 v), ...]`
/// with `w_m = base^(-m / pairs)`.
///
/// An odd `dim` is served by encoding `dim + 1` values and dropping the last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidalCodec {
    dim: usize,
    base: f64,
}

impl SinusoidalCodec {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(dim: usize) -> Self {
        Self::with_base(dim, Self::DEFAULT_BASE)
    }

    pub fn with_base(dim: usize, base: f64) -> Self {
        assert!(dim >= 1, "codec dimension must be positive");
        Self { dim, base }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn pairs(&self) -> usize {
        self.dim.div_ceil(2)
    }

    pub fn frequency(&self, m: usize) -> f64 {
        self.base.powf(-(m as f64) / self.pairs() as f64)
    }

    pub fn encode(&self, v: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        self.encode_into(v, &mut out);
        out
    }

    pub fn encode_into(&self, v: f64, out: &mut Vec<f64>) {
        let start = out.len();
        for m in 0..self.pairs() {
            let (s, c) = (self.frequency(m) * v).sin_cos();
            out.push(s);
            out.push(c);
        }
        out.truncate(start + self.dim);
    }
}
