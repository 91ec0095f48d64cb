//! AdaLN transformer velocity network.
//!
//! Tokens are encoded (sinusoidal box coordinates and opacity, raw reduced
//! embedding), lifted to the model width, passed through AdaLN blocks whose
//! shift/scale/gate come from the timestep and prompt conditioning, and
//! projected back to the flattened token width. There is no positional
//! encoding over the token axis, so the map is permutation-equivariant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::SinusoidalCodec;
use super::nn::{attention, attention_backward, layer_norm, layer_norm_backward, Activation, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::layout::{token_width, TokenMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNetConfig {
    pub blocks: usize,
    pub heads: usize,
    pub model_width: usize,
    /// Reduced embedding dimension.
    pub d: usize,
    /// Tokens per layout.
    pub j: usize,
    /// Full prompt-embedding dimension fed to the prompt projection.
    pub prompt_dim: usize,
    pub prompt_proj_dim: usize,
    /// Odd values drop the final cosine of the next even width.
    pub t_enc_dim: usize,
    pub box_enc_dim_per_coord: usize,
    pub alpha_enc_dim: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub codec_base: f64,
    pub seed: u64,
}

impl VelocityNetConfig {
    /// Small CPU-friendly network.
    pub fn desk(d: usize, j: usize, prompt_dim: usize) -> Self {
        Self {
            blocks: 4,
            heads: 4,
            model_width: 64,
            d,
            j,
            prompt_dim,
            prompt_proj_dim: 17,
            t_enc_dim: 10,
            box_enc_dim_per_coord: 18,
            alpha_enc_dim: 18,
            mlp_ratio: 4,
            activation: Activation::Silu,
            codec_base: SinusoidalCodec::DEFAULT_BASE,
            seed: 0,
        }
    }

    /// Full-size network: 20 blocks, 12 heads, d = 30, J = 30.
    pub fn full(prompt_dim: usize) -> Self {
        Self { blocks: 20, heads: 12, model_width: 144, d: 30, j: 30, t_enc_dim: 9, ..Self::desk(30, 30, prompt_dim) }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("model_width", self.model_width),
            ("j", self.j),
            ("prompt_dim", self.prompt_dim),
            ("prompt_proj_dim", self.prompt_proj_dim),
            ("t_enc_dim", self.t_enc_dim),
            ("box_enc_dim_per_coord", self.box_enc_dim_per_coord),
            ("alpha_enc_dim", self.alpha_enc_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.model_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_width {} is not divisible by heads {}",
                self.model_width, self.heads
            )));
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        token_width(self.d)
    }

    pub fn token_encoding_dim(&self) -> usize {
        4 * self.box_enc_dim_per_coord + self.d + self.alpha_enc_dim
    }

    pub fn conditioning_dim(&self) -> usize {
        self.t_enc_dim + self.prompt_proj_dim
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layers {
    prompt_proj: Linear,
    cond_in: Linear,
    token_in: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
}

impl Layers {
    fn alloc(cfg: &VelocityNetConfig, store: &mut ParamStore) -> Self {
        let w = cfg.model_width;
        let prompt_proj = Linear::alloc(store, "prompt_proj", cfg.prompt_dim, cfg.prompt_proj_dim);
        let cond_in = Linear::alloc(store, "cond_in", cfg.conditioning_dim(), w);
        let token_in = Linear::alloc(store, "token_in", cfg.token_encoding_dim(), w);
        let blocks = (0..cfg.blocks)
            .map(|b| Block {
                modulation: Linear::alloc(store, &format!("blocks.{b}.modulation"), w, 6 * w),
                qkv: Linear::alloc(store, &format!("blocks.{b}.attn.qkv"), w, 3 * w),
                proj: Linear::alloc(store, &format!("blocks.{b}.attn.proj"), w, w),
                fc1: Linear::alloc(store, &format!("blocks.{b}.mlp.fc1"), w, cfg.mlp_ratio * w),
                fc2: Linear::alloc(store, &format!("blocks.{b}.mlp.fc2"), cfg.mlp_ratio * w, w),
            })
            .collect();
        let final_modulation = Linear::alloc(store, "final.modulation", w, 2 * w);
        let head = Linear::alloc(store, "final.head", w, cfg.token_width());
        Self { prompt_proj, cond_in, token_in, blocks, final_modulation, head }
    }
}

/// Intermediate activations of one block, kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockCache {
    modulation: Vec<f64>,
    n1: Vec<f64>,
    inv1: Vec<f64>,
    u1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    att: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
    u2: Vec<f64>,
    z: Vec<f64>,
    gz: Vec<f64>,
    y: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    prompt: Vec<f64>,
    cond: Vec<f64>,
    cond_pre: Vec<f64>,
    cond_hidden: Vec<f64>,
    encoded: Vec<f64>,
    blocks: Vec<BlockCache>,
    final_modulation: Vec<f64>,
    nf: Vec<f64>,
    invf: Vec<f64>,
    uf: Vec<f64>,
}

/// `n * (1 + scale) + shift`, broadcasting the per-channel vectors over rows.
fn modulate(n: &[f64], shift: &[f64], scale: &[f64], width: usize) -> Vec<f64> {
    n.chunks(width).flat_map(|row| row.iter().zip(shift).zip(scale).map(|((v, sh), sc)| v * (1.0 + sc) + sh)).collect()
}

/// Backward of [`modulate`]: returns `dn` and accumulates into `dshift`/`dscale`.
fn modulate_backward(
    n: &[f64],
    scale: &[f64],
    du: &[f64],
    dshift: &mut [f64],
    dscale: &mut [f64],
    width: usize,
) -> Vec<f64> {
    let mut dn = vec![0.0; du.len()];
    for (r, row) in du.chunks(width).enumerate() {
        for c in 0..width {
            let d = row[c];
            dn[r * width + c] = d * (1.0 + scale[c]);
            dshift[c] += d;
            dscale[c] += d * n[r * width + c];
        }
    }
    dn
}

/// `h + gate * x` over rows.
fn gated_residual(h: &[f64], gate: &[f64], x: &[f64], width: usize) -> Vec<f64> {
    h.iter().zip(x).enumerate().map(|(i, (hv, xv))| hv + gate[i % width] * xv).collect()
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    config: VelocityNetConfig,
    params: ParamStore,
    layers: Layers,
    box_codec: SinusoidalCodec,
    alpha_codec: SinusoidalCodec,
    t_codec: SinusoidalCodec,
}

impl VelocityNet {
    /// Randomly initialized network; AdaLN modulation layers start at zero so
    /// each block is the identity map.
    pub fn new(config: VelocityNetConfig) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(net.config.seed);
        let l = net.layers.clone();
        let mut init = vec![l.prompt_proj, l.cond_in, l.token_in];
        for b in &l.blocks {
            init.extend([b.qkv, b.proj, b.fc1, b.fc2]);
        }
        init.push(l.head);
        for lin in init {
            lin.init(&mut net.params, &mut rng);
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(config: VelocityNetConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layers = Layers::alloc(&config, &mut params);
        Ok(Self {
            box_codec: SinusoidalCodec::with_base(config.box_enc_dim_per_coord, config.codec_base),
            alpha_codec: SinusoidalCodec::with_base(config.alpha_enc_dim, config.codec_base),
            t_codec: SinusoidalCodec::with_base(config.t_enc_dim, config.codec_base),
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &VelocityNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Per-token encodings (`J x token_encoding_dim`) and the conditioning
    /// vector (`t_enc_dim + prompt_proj_dim`).
    pub fn encode_inputs(&self, tokens: &TokenMatrix, t: f64, prompt: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_shapes(tokens, prompt)?;
        Ok((self.encode_tokens(tokens), self.conditioning(t, prompt)))
    }

    fn check_shapes(&self, tokens: &TokenMatrix, prompt: &[f64]) -> Result<()> {
        let cfg = &self.config;
        if tokens.cols != cfg.token_width() || tokens.rows == 0 {
            return Err(Error::ShapeMismatch(format!(
                "tokens are {}x{}, expected Jx{}",
                tokens.rows,
                tokens.cols,
                cfg.token_width()
            )));
        }
        if prompt.len() != cfg.prompt_dim {
            return Err(Error::ShapeMismatch(format!(
                "prompt embedding has {} entries, expected {}",
                prompt.len(),
                cfg.prompt_dim
            )));
        }
        Ok(())
    }

    fn encode_tokens(&self, tokens: &TokenMatrix) -> Vec<f64> {
        let d = self.config.d;
        let mut out = Vec::with_capacity(tokens.rows * self.config.token_encoding_dim());
        for r in 0..tokens.rows {
            let row = tokens.row(r);
            for &v in &row[..4] {
                self.box_codec.encode_into(v, &mut out);
            }
            out.extend_from_slice(&row[4..4 + d]);
            self.alpha_codec.encode_into(row[4 + d], &mut out);
        }
        out
    }

    fn conditioning(&self, t: f64, prompt: &[f64]) -> Vec<f64> {
        let mut cond = self.t_codec.encode(t);
        cond.extend(self.layers.prompt_proj.forward(&self.params.values, prompt, 1));
        cond
    }

    /// Velocity for every token.
    pub fn forward(&self, tokens: &TokenMatrix, t: f64, prompt: &[f64]) -> Result<TokenMatrix> {
        Ok(self.forward_cached(tokens, t, prompt)?.0)
    }

    pub fn forward_cached(&self, tokens: &TokenMatrix, t: f64, prompt: &[f64]) -> Result<(TokenMatrix, ForwardCache)> {
        self.check_shapes(tokens, prompt)?;
        let p = &self.params.values;
        let cfg = &self.config;
        let (rows, w) = (tokens.rows, cfg.model_width);
        let silu = Activation::Silu;

        let cond = self.conditioning(t, prompt);
        let cond_pre = self.layers.cond_in.forward(p, &cond, 1);
        let cond_hidden = silu.forward(&cond_pre);

        let encoded = self.encode_tokens(tokens);
        let mut h = self.layers.token_in.forward(p, &encoded, rows);
        let mut block_caches = Vec::with_capacity(cfg.blocks);
        for b in &self.layers.blocks {
            let m = b.modulation.forward(p, &cond_hidden, 1);
            let (shift1, scale1, gate1) = (&m[0..w], &m[w..2 * w], &m[2 * w..3 * w]);
            let (shift2, scale2, gate2) = (&m[3 * w..4 * w], &m[4 * w..5 * w], &m[5 * w..6 * w]);

            let (n1, inv1) = layer_norm(&h, rows, w);
            let u1 = modulate(&n1, shift1, scale1, w);
            let qkv = b.qkv.forward(p, &u1, rows);
            let (attn, probs) = attention(&qkv, rows, w, cfg.heads);
            let att = b.proj.forward(p, &attn, rows);
            let h_mid = gated_residual(&h, gate1, &att, w);

            let (n2, inv2) = layer_norm(&h_mid, rows, w);
            let u2 = modulate(&n2, shift2, scale2, w);
            let z = b.fc1.forward(p, &u2, rows);
            let gz = cfg.activation.forward(&z);
            let y = b.fc2.forward(p, &gz, rows);
            let h_out = gated_residual(&h_mid, gate2, &y, w);

            h = h_out;
            block_caches.push(BlockCache {
                modulation: m,
                n1,
                inv1,
                u1,
                qkv,
                probs,
                attn,
                att,
                n2,
                inv2,
                u2,
                z,
                gz,
                y,
            });
        }
        let fm = self.layers.final_modulation.forward(p, &cond_hidden, 1);
        let (nf, invf) = layer_norm(&h, rows, w);
        let uf = modulate(&nf, &fm[..w], &fm[w..], w);
        let out = self.layers.head.forward(p, &uf, rows);
        let cache = ForwardCache {
            prompt: prompt.to_vec(),
            cond,
            cond_pre,
            cond_hidden,
            encoded,
            blocks: block_caches,
            final_modulation: fm,
            nf,
            invf,
            uf,
        };
        Ok((TokenMatrix::from_vec(rows, cfg.token_width(), out), cache))
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, dout: &TokenMatrix, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let p = &self.params.values;
        let cfg = &self.config;
        let (rows, w) = (dout.rows, cfg.model_width);
        let l = &self.layers;
        let mut d_hidden = vec![0.0; w];

        let d_uf = l.head.backward(p, grads, &cache.uf, &dout.data, rows, true);
        let mut d_fm = vec![0.0; 2 * w];
        let d_nf = {
            let (ds, dc) = d_fm.split_at_mut(w);
            modulate_backward(&cache.nf, &cache.final_modulation[w..], &d_uf, ds, dc, w)
        };
        let mut d_h = layer_norm_backward(&cache.nf, &cache.invf, &d_nf, w);
        accumulate(&mut d_hidden, &l.final_modulation.backward(p, grads, &cache.cond_hidden, &d_fm, 1, true));

        for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            let m = &bc.modulation;
            let mut d_m = vec![0.0; 6 * w];
            // h_out = h_mid + gate2 * y
            let gate2 = &m[5 * w..6 * w];
            let mut d_y = vec![0.0; rows * w];
            for (i, (dy, dh)) in d_y.iter_mut().zip(&d_h).enumerate() {
                *dy = dh * gate2[i % w];
                d_m[5 * w + i % w] += dh * bc.y[i];
            }
            let d_gz = b.fc2.backward(p, grads, &bc.gz, &d_y, rows, true);
            let d_z = cfg.activation.backward(&bc.z, &d_gz);
            let d_u2 = b.fc1.backward(p, grads, &bc.u2, &d_z, rows, true);
            let d_n2 = {
                let (lo, hi) = d_m.split_at_mut(4 * w);
                modulate_backward(&bc.n2, &m[4 * w..5 * w], &d_u2, &mut lo[3 * w..], &mut hi[..w], w)
            };
            let mut d_hmid = d_h;
            accumulate(&mut d_hmid, &layer_norm_backward(&bc.n2, &bc.inv2, &d_n2, w));

            // h_mid = h_in + gate1 * att
            let gate1 = &m[2 * w..3 * w];
            let mut d_att = vec![0.0; rows * w];
            for (i, (da, dh)) in d_att.iter_mut().zip(&d_hmid).enumerate() {
                *da = dh * gate1[i % w];
                d_m[2 * w + i % w] += dh * bc.att[i];
            }
            let d_attn = b.proj.backward(p, grads, &bc.attn, &d_att, rows, true);
            let d_qkv = attention_backward(&bc.qkv, &bc.probs, &d_attn, rows, w, cfg.heads);
            let d_u1 = b.qkv.backward(p, grads, &bc.u1, &d_qkv, rows, true);
            let d_n1 = {
                let (lo, hi) = d_m.split_at_mut(w);
                modulate_backward(&bc.n1, &m[w..2 * w], &d_u1, lo, &mut hi[..w], w)
            };
            let mut d_hin = d_hmid;
            accumulate(&mut d_hin, &layer_norm_backward(&bc.n1, &bc.inv1, &d_n1, w));

            accumulate(&mut d_hidden, &b.modulation.backward(p, grads, &cache.cond_hidden, &d_m, 1, true));
            d_h = d_hin;
        }
        l.token_in.backward(p, grads, &cache.encoded, &d_h, rows, false);

        let d_pre = Activation::Silu.backward(&cache.cond_pre, &d_hidden);
        let d_cond = l.cond_in.backward(p, grads, &cache.cond, &d_pre, 1, true);
        l.prompt_proj.backward(p, grads, &cache.prompt, &d_cond[cfg.t_enc_dim..], 1, false);
    }
}

fn accumulate(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn small_config() -> VelocityNetConfig {
        VelocityNetConfig {
            blocks: 2,
            heads: 2,
            model_width: 16,
            mlp_ratio: 2,
            box_enc_dim_per_coord: 6,
            alpha_enc_dim: 4,
            t_enc_dim: 4,
            prompt_proj_dim: 5,
            ..VelocityNetConfig::desk(3, 4, 7)
        }
    }

    fn random_inputs(cfg: &VelocityNetConfig, seed: u64) -> (TokenMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = TokenMatrix::from_vec(
            cfg.j,
            cfg.token_width(),
            (0..cfg.j * cfg.token_width()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let prompt = (0..cfg.prompt_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, prompt)
    }

    #[test]
    fn encoding_lengths_for_full_config() {
        let cfg = VelocityNetConfig::full(512);
        assert_eq!(cfg.token_encoding_dim(), 120);
        assert_eq!(cfg.conditioning_dim(), 26);
        let desk = VelocityNetConfig::desk(30, 30, 512);
        assert_eq!(desk.conditioning_dim(), 27);
    }

    #[test]
    fn encode_inputs_shapes() {
        let cfg = small_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let (x, prompt) = random_inputs(&cfg, 1);
        let (enc, cond) = net.encode_inputs(&x, 0.3, &prompt).unwrap();
        assert_eq!(enc.len(), cfg.j * cfg.token_encoding_dim());
        assert_eq!(cond.len(), cfg.conditioning_dim());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.heads = 3;
        assert!(VelocityNet::new(cfg).is_err());
        let mut cfg = small_config();
        cfg.blocks = 0;
        assert!(VelocityNet::new(cfg).is_err());
    }

    #[test]
    fn shape_errors() {
        let cfg = small_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let (x, prompt) = random_inputs(&cfg, 2);
        let bad = TokenMatrix::zeros(cfg.j, cfg.token_width() + 1);
        assert!(matches!(net.forward(&bad, 0.5, &prompt), Err(Error::ShapeMismatch(_))));
        assert!(matches!(net.forward(&x, 0.5, &prompt[1..]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn output_has_token_width() {
        let cfg = small_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let (x, prompt) = random_inputs(&cfg, 3);
        let v = net.forward(&x, 0.5, &prompt).unwrap();
        assert_eq!((v.rows, v.cols), (cfg.j, cfg.d + 5));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let again = VelocityNet::new(cfg.clone()).unwrap();
        let (x, prompt) = random_inputs(&cfg, 4);
        let a = net.forward(&x, 0.25, &prompt).unwrap();
        let b = again.forward(&x, 0.25, &prompt).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_modulation_blocks_are_identity() {
        // Freshly initialized nets have zero gates: output depends only on
        // the token embedding path and the final layer.
        let cfg = small_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let (x, prompt) = random_inputs(&cfg, 5);
        let v = net.forward(&x, 0.5, &prompt).unwrap();
        assert!(v.data.iter().all(|x| x.is_finite()));
        let mods: f64 = net
            .params()
            .specs
            .iter()
            .filter(|s| s.name.contains("modulation"))
            .flat_map(|s| net.params().values[s.range()].iter())
            .map(|v| v.abs())
            .sum();
        assert_eq!(mods, 0.0);
    }
}
