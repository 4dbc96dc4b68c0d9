//! Shared frozen transformer pipeline: scaled dot-product attention,
//! multi-head attention with output projection, and the standard block
//! (post-sublayer LayerNorm, then residual).
//!
//! The same block code also runs the frozen mini text encoder under a
//! different parameter prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DtkError, Result};
use crate::store::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Transformer layer count L.
    pub n_layers: usize,
    /// Number of topmost fusion layers M, 1 <= M <= L.
    pub n_fusion: usize,
    /// Hidden dimension D.
    pub dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// MLP hidden expansion factor.
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.dim == 0 || self.n_heads == 0 || self.vocab_size == 0
            || self.max_seq_len == 0 || self.mlp_ratio == 0
        {
            return Err(DtkError::Config("backbone dimensions must be positive".into()));
        }
        if self.n_fusion == 0 || self.n_fusion > self.n_layers {
            return Err(DtkError::Config(format!(
                "fusion layer count must satisfy 1 <= M <= L, got M={} L={}",
                self.n_fusion, self.n_layers
            )));
        }
        if self.dim % self.n_heads != 0 {
            return Err(DtkError::Config(format!(
                "hidden dim {} not divisible by head count {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Absolute indices (0-based) of the fusion layers: the topmost M.
    pub fn fusion_layers(&self) -> std::ops::Range<usize> {
        (self.n_layers - self.n_fusion)..self.n_layers
    }

    pub fn is_fusion_layer(&self, layer: usize) -> bool {
        self.fusion_layers().contains(&layer)
    }
}

/// Register the frozen backbone weights under `prefix` ("backbone" for the
/// shared pipeline, "textenc" for the frozen text encoder).
pub fn register_transformer<F: Scalar, R: Rng>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    store.insert(
        format!("{prefix}.embed.token"),
        Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, rng),
        true,
    )?;
    store.insert(
        format!("{prefix}.embed.pos"),
        Tensor::randn(vec![cfg.max_seq_len, d], INIT_STD, rng),
        true,
    )?;
    let hidden = d * cfg.mlp_ratio;
    for l in 0..cfg.n_layers {
        for part in ["wq", "wk", "wv", "wo"] {
            store.insert(
                format!("{prefix}.layer.{l}.attn.{part}"),
                Tensor::randn(vec![d, d], INIT_STD, rng),
                true,
            )?;
        }
        for ln in ["ln1", "ln2"] {
            store.insert(
                format!("{prefix}.layer.{l}.{ln}.gamma"),
                Tensor::from_vec(vec![1, d], vec![F::one(); d])?,
                true,
            )?;
            store.insert(
                format!("{prefix}.layer.{l}.{ln}.beta"),
                Tensor::zeros(vec![1, d]),
                true,
            )?;
        }
        store.insert(
            format!("{prefix}.layer.{l}.mlp.w1"),
            Tensor::randn(vec![d, hidden], INIT_STD, rng),
            true,
        )?;
        store.insert(format!("{prefix}.layer.{l}.mlp.b1"), Tensor::zeros(vec![1, hidden]), true)?;
        store.insert(
            format!("{prefix}.layer.{l}.mlp.w2"),
            Tensor::randn(vec![hidden, d], INIT_STD, rng),
            true,
        )?;
        store.insert(format!("{prefix}.layer.{l}.mlp.b2"), Tensor::zeros(vec![1, d]), true)?;
    }
    Ok(())
}

/// Scaled dot-product attention per head: softmax(QKᵀ/√d_k)·V.
/// No causal mask; this is a classification/representation stack.
pub fn attention<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dq = tape.shape(q).to_vec();
    let dk = tape.shape(k).to_vec();
    let dv = tape.shape(v).to_vec();
    if dq.len() != 2 || dk.len() != 2 || dv.len() != 2 || dq[1] != dk[1] {
        return Err(DtkError::shape(
            "attention",
            format!("Q {dq:?} / K {dk:?} key widths disagree"),
        ));
    }
    if dk[0] != dv[0] {
        return Err(DtkError::shape(
            "attention",
            format!("K rows {} vs V rows {}", dk[0], dv[0]),
        ));
    }
    let scale = F::from_f64(1.0 / (dq[1] as f64).sqrt());
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, scale);
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}

/// Linear layer `x·W + b` with `b` broadcast over rows.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_broadcast(xw, b)
}

/// Multi-head attention: queries projected from `query_src`, keys/values from
/// `kv_src`, heads concatenated, then the shared output projection.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    layer: usize,
    n_heads: usize,
    query_src: Var,
    kv_src: Var,
) -> Result<Var> {
    let d = tape.shape(query_src)[1];
    if d % n_heads != 0 {
        return Err(DtkError::shape(
            "multi_head_attention",
            format!("width {d} not divisible by {n_heads} heads"),
        ));
    }
    let head_dim = d / n_heads;
    let wq = tape.bind(
        &format!("{prefix}.layer.{layer}.attn.wq"),
        &store.get(&format!("{prefix}.layer.{layer}.attn.wq"))?.tensor,
    );
    let wk = tape.bind(
        &format!("{prefix}.layer.{layer}.attn.wk"),
        &store.get(&format!("{prefix}.layer.{layer}.attn.wk"))?.tensor,
    );
    let wv = tape.bind(
        &format!("{prefix}.layer.{layer}.attn.wv"),
        &store.get(&format!("{prefix}.layer.{layer}.attn.wv"))?.tensor,
    );
    let wo = tape.bind(
        &format!("{prefix}.layer.{layer}.attn.wo"),
        &store.get(&format!("{prefix}.layer.{layer}.attn.wo"))?.tensor,
    );
    let q = tape.matmul(query_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        heads.push(attention(tape, qh, kh, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, wo)
}

fn bind_ln<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    name: &str,
) -> Result<(Var, Var)> {
    let gamma = tape.bind(&format!("{name}.gamma"), &store.get(&format!("{name}.gamma"))?.tensor);
    let beta = tape.bind(&format!("{name}.beta"), &store.get(&format!("{name}.beta"))?.tensor);
    Ok((gamma, beta))
}

/// Attention sublayer: LN(MHA(queries from `h`, keys/values from `kv_src`)) + `residual`.
pub fn attn_sublayer<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    layer: usize,
    n_heads: usize,
    h: Var,
    kv_src: Var,
    residual: Var,
) -> Result<Var> {
    let mha = multi_head_attention(tape, store, prefix, layer, n_heads, h, kv_src)?;
    let (gamma, beta) = bind_ln(tape, store, &format!("{prefix}.layer.{layer}.ln1"))?;
    let normed = tape.layer_norm(mha, gamma, beta, F::from_f64(LN_EPS))?;
    tape.add(normed, residual)
}

/// Feed-forward sublayer: LN(MLP(h)) + h.
pub fn mlp_sublayer<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    layer: usize,
    h: Var,
) -> Result<Var> {
    let w1 = tape.bind(
        &format!("{prefix}.layer.{layer}.mlp.w1"),
        &store.get(&format!("{prefix}.layer.{layer}.mlp.w1"))?.tensor,
    );
    let b1 = tape.bind(
        &format!("{prefix}.layer.{layer}.mlp.b1"),
        &store.get(&format!("{prefix}.layer.{layer}.mlp.b1"))?.tensor,
    );
    let w2 = tape.bind(
        &format!("{prefix}.layer.{layer}.mlp.w2"),
        &store.get(&format!("{prefix}.layer.{layer}.mlp.w2"))?.tensor,
    );
    let b2 = tape.bind(
        &format!("{prefix}.layer.{layer}.mlp.b2"),
        &store.get(&format!("{prefix}.layer.{layer}.mlp.b2"))?.tensor,
    );
    let h1 = linear(tape, h, w1, b1)?;
    let act = tape.gelu(h1);
    let h2 = linear(tape, act, w2, b2)?;
    let (gamma, beta) = bind_ln(tape, store, &format!("{prefix}.layer.{layer}.ln2"))?;
    let normed = tape.layer_norm(h2, gamma, beta, F::from_f64(LN_EPS))?;
    tape.add(normed, h)
}

/// One standard transformer layer:
/// H̃ = LN(MHA(H,H,H)) + H; out = LN(MLP(H̃)) + H̃.
pub fn standard_block_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    layer: usize,
    n_heads: usize,
    h: Var,
) -> Result<Var> {
    let h_tilde = attn_sublayer(tape, store, prefix, layer, n_heads, h, h, h)?;
    mlp_sublayer(tape, store, prefix, layer, h_tilde)
}

/// Token embedding plus learned absolute positions.
pub fn embed_tokens<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    ids: &[usize],
) -> Result<Var> {
    let table = tape.bind(
        &format!("{prefix}.embed.token"),
        &store.get(&format!("{prefix}.embed.token"))?.tensor,
    );
    let pos = tape.bind(
        &format!("{prefix}.embed.pos"),
        &store.get(&format!("{prefix}.embed.pos"))?.tensor,
    );
    let tok = tape.gather_rows(table, ids)?;
    let pos_slice = tape.slice_rows(pos, 0, ids.len())?;
    tape.add(tok, pos_slice)
}

/// Add the learned position table to an externally built embedding matrix.
pub fn add_positions<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    embeddings: Var,
) -> Result<Var> {
    let n = tape.shape(embeddings)[0];
    let pos = tape.bind(
        &format!("{prefix}.embed.pos"),
        &store.get(&format!("{prefix}.embed.pos"))?.tensor,
    );
    let pos_slice = tape.slice_rows(pos, 0, n)?;
    tape.add(embeddings, pos_slice)
}

/// Run the whole stack with standard layers only (no fusion); used by the
/// frozen text encoder and as the reference path for the zero-init identity.
pub fn plain_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    cfg: &BackboneConfig,
    mut h: Var,
) -> Result<Var> {
    for l in 0..cfg.n_layers {
        h = standard_block_forward(tape, store, prefix, l, cfg.n_heads, h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            n_fusion: 1,
            dim: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            mlp_ratio: 4,
        }
    }

    fn store_with_backbone(seed: u64) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        register_transformer(&mut store, "backbone", &small_cfg(), &mut rng).unwrap();
        store
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.n_fusion = 3;
        assert!(cfg.validate().is_err());
        cfg.n_fusion = 0;
        assert!(cfg.validate().is_err());
        cfg = small_cfg();
        cfg.dim = 9;
        assert!(cfg.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(vec![3, 4], vec![0.3; 12]).unwrap();
        let k = tape.constant(vec![1, 4], vec![2.0, -1.0, 0.5, 0.0]).unwrap();
        let v = tape.constant(vec![1, 4], vec![7.0, 8.0, 9.0, 10.0]).unwrap();
        let y = attention(&mut tape, q, k, v).unwrap();
        for row in 0..3 {
            assert_eq!(&tape.value(y)[row * 4..(row + 1) * 4], &[7.0, 8.0, 9.0, 10.0]);
        }
    }

    #[test]
    fn attention_orthogonal_query_averages_values() {
        let mut tape = Tape::<f64>::new();
        // q ⊥ both k rows -> logits equal -> uniform weights
        let q = tape.constant(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let k = tape.constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let v = tape.constant(vec![2, 3], vec![2.0, 4.0, 6.0, 4.0, 8.0, 10.0]).unwrap();
        let y = attention(&mut tape, q, k, v).unwrap();
        assert!((tape.value(y)[0] - 3.0).abs() < 1e-12);
        assert!((tape.value(y)[1] - 6.0).abs() < 1e-12);
        assert!((tape.value(y)[2] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Tensor::<f64>::randn(vec![2, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let qv = tape.constant_tensor(&q);
        let kv = tape.constant_tensor(&k);
        let vv = tape.constant_tensor(&v);
        let y = attention(&mut tape, qv, kv, vv).unwrap();

        // brute-force double loop
        let dk = 4.0f64.sqrt();
        for i in 0..2 {
            let mut weights = [0.0; 3];
            for (j, w) in weights.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += q.data()[i * 4 + c] * k.data()[j * 4 + c];
                }
                *w = (dot / dk).exp();
            }
            let z: f64 = weights.iter().sum();
            for c in 0..4 {
                let mut expect = 0.0;
                for j in 0..3 {
                    expect += weights[j] / z * v.data()[j * 4 + c];
                }
                assert!((tape.value(y)[i * 4 + c] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let q = Tensor::<f64>::randn(vec![5, 6], 2.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![4, 6], 2.0, &mut rng);
        let mut tape = Tape::new();
        let qv = tape.constant_tensor(&q);
        let kv = tape.constant_tensor(&k);
        let kt = tape.transpose(kv).unwrap();
        let scores = tape.matmul(qv, kt).unwrap();
        let scaled = tape.scale(scores, 1.0 / 6.0f64.sqrt());
        let w = tape.softmax_rows(scaled).unwrap();
        for i in 0..5 {
            let row = &tape.value(w)[i * 4..(i + 1) * 4];
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_block_matches_hand_expansion() {
        // with one token the attention weights collapse to 1, so the branch
        // is LN((h·Wv)·Wo) + h exactly
        let store = store_with_backbone(7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut rng);

        let mut tape = Tape::new();
        let hv = tape.constant_tensor(&h);
        let out = attn_sublayer(&mut tape, &store, "backbone", 0, 2, hv, hv, hv).unwrap();

        let mut oracle = Tape::<f64>::new();
        let hv2 = oracle.constant_tensor(&h);
        let wv = oracle.constant_tensor(&store.get("backbone.layer.0.attn.wv").unwrap().tensor);
        let wo = oracle.constant_tensor(&store.get("backbone.layer.0.attn.wo").unwrap().tensor);
        let g = oracle.constant_tensor(&store.get("backbone.layer.0.ln1.gamma").unwrap().tensor);
        let b = oracle.constant_tensor(&store.get("backbone.layer.0.ln1.beta").unwrap().tensor);
        let v = oracle.matmul(hv2, wv).unwrap();
        let proj = oracle.matmul(v, wo).unwrap();
        let ln = oracle.layer_norm(proj, g, b, LN_EPS).unwrap();
        let expect = oracle.add(ln, hv2).unwrap();

        for (a, e) in tape.value(out).iter().zip(oracle.value(expect)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn block_preserves_shape() {
        let store = store_with_backbone(8);
        for n in [1usize, 3, 16] {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let h = Tensor::<f64>::randn(vec![n, 8], 1.0, &mut rng);
            let mut tape = Tape::new();
            let hv = tape.constant_tensor(&h);
            let out = standard_block_forward(&mut tape, &store, "backbone", 1, 2, hv).unwrap();
            assert_eq!(tape.shape(out), &[n, 8]);
        }
    }

    /// Independent straight-line recoding of the standard layer, no tape.
    fn naive_block(store: &ParameterStore<f64>, l: usize, n_heads: usize, h: &[f64], n: usize, d: usize) -> Vec<f64> {
        let get = |name: &str| store.get(name).unwrap().tensor.data().to_vec();
        let wq = get(&format!("backbone.layer.{l}.attn.wq"));
        let wk = get(&format!("backbone.layer.{l}.attn.wk"));
        let wv = get(&format!("backbone.layer.{l}.attn.wv"));
        let wo = get(&format!("backbone.layer.{l}.attn.wo"));
        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| {
            let mut c = vec![0.0; m * nn];
            for i in 0..m {
                for j in 0..nn {
                    for p in 0..k {
                        c[i * nn + j] += a[i * k + p] * b[p * nn + j];
                    }
                }
            }
            c
        };
        let q = matmul(h, &wq, n, d, d);
        let k = matmul(h, &wk, n, d, d);
        let v = matmul(h, &wv, n, d, d);
        let hd = d / n_heads;
        let mut cat = vec![0.0; n * d];
        for head in 0..n_heads {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, lg) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q[i * d + head * hd + c] * k[j * d + head * hd + c];
                    }
                    *lg = dot / (hd as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j * d + head * hd + c];
                    }
                    cat[i * d + head * hd + c] = acc;
                }
            }
        }
        let mha = matmul(&cat, &wo, n, d, d);
        let ln = |x: &[f64], gamma: &[f64], beta: &[f64]| {
            let mut out = vec![0.0; x.len()];
            for i in 0..x.len() / d {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..d {
                    out[i * d + j] = gamma[j] * (row[j] - mean) * inv + beta[j];
                }
            }
            out
        };
        let g1 = get(&format!("backbone.layer.{l}.ln1.gamma"));
        let b1 = get(&format!("backbone.layer.{l}.ln1.beta"));
        let mut h_tilde = ln(&mha, &g1, &b1);
        for i in 0..h.len() {
            h_tilde[i] += h[i];
        }
        let w1 = get(&format!("backbone.layer.{l}.mlp.w1"));
        let bb1 = get(&format!("backbone.layer.{l}.mlp.b1"));
        let w2 = get(&format!("backbone.layer.{l}.mlp.w2"));
        let bb2 = get(&format!("backbone.layer.{l}.mlp.b2"));
        let hidden = w1.len() / d;
        let mut m1 = matmul(&h_tilde, &w1, n, d, hidden);
        for i in 0..n {
            for j in 0..hidden {
                m1[i * hidden + j] += bb1[j];
                let x = m1[i * hidden + j];
                let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
                m1[i * hidden + j] = 0.5 * x * (1.0 + u.tanh());
            }
        }
        let mut m2 = matmul(&m1, &w2, n, hidden, d);
        for i in 0..n {
            for j in 0..d {
                m2[i * d + j] += bb2[j];
            }
        }
        let g2 = get(&format!("backbone.layer.{l}.ln2.gamma"));
        let b2v = get(&format!("backbone.layer.{l}.ln2.beta"));
        let mut out = ln(&m2, &g2, &b2v);
        for i in 0..out.len() {
            out[i] += h_tilde[i];
        }
        out
    }

    #[test]
    fn block_matches_independent_recoding() {
        let store = store_with_backbone(13);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let h = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant_tensor(&h);
        let out = standard_block_forward(&mut tape, &store, "backbone", 0, 2, hv).unwrap();
        let expect = naive_block(&store, 0, 2, h.data(), 4, 8);
        for (a, e) in tape.value(out).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn backbone_registration_is_fully_frozen() {
        let store = store_with_backbone(3);
        assert!(store.iter().all(|(_, p)| p.frozen));
        assert_eq!(store.count_elements(false), 0);
    }
}
