//! Pre-norm transformer encoder over two integer tokens.
//!
//! Token embedding plus learned positional embedding, `n_layers` pre-norm
//! blocks (LayerNorm → attention → residual, LayerNorm → GELU FFN →
//! residual), final LayerNorm and a linear head read at position 0.
//! Parameter names follow the usual fused-projection convention
//! (`in_proj_weight` holds W_Q, W_K, W_V as consecutive row blocks).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{value_and_grad, Layout, ParamVector, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub p: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p: 97,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            seq_len: 2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::HeadsDoNotDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.p < 2 || self.n_layers == 0 || self.d_ff == 0 || self.seq_len != 2 {
            return Err(Error::InvalidConfig(format!("unsupported model config {self:?}")));
        }
        Ok(())
    }
}

/// Which attention matrix a view refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttnMatrix {
    #[serde(rename = "WQ")]
    Wq,
    #[serde(rename = "WK")]
    Wk,
    #[serde(rename = "WV")]
    Wv,
    #[serde(rename = "WO")]
    Wo,
}

impl AttnMatrix {
    pub const ALL: [AttnMatrix; 4] = [AttnMatrix::Wq, AttnMatrix::Wk, AttnMatrix::Wv, AttnMatrix::Wo];

    pub fn name(self) -> &'static str {
        match self {
            AttnMatrix::Wq => "WQ",
            AttnMatrix::Wk => "WK",
            AttnMatrix::Wv => "WV",
            AttnMatrix::Wo => "WO",
        }
    }
}

impl std::fmt::Display for AttnMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttnMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttnMatrix::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attention matrix `{s}`")))
    }
}

/// A `d_model × d_model` attention weight matrix inside the flat vector.
/// Every view is a contiguous range of the parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionView {
    pub layer: usize,
    pub matrix: AttnMatrix,
    pub offset: usize,
    pub dim: usize,
}

impl AttentionView {
    pub fn len(&self) -> usize {
        self.dim * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn read<'a>(&self, theta: &'a ParamVector) -> &'a [f64] {
        &theta.values()[self.range()]
    }

    pub fn write(&self, theta: &mut ParamVector, matrix: &[f64]) -> Result<()> {
        if matrix.len() != self.len() {
            return Err(Error::Shape(format!(
                "view {}.{} holds {} values, got {}",
                self.layer,
                self.matrix,
                self.len(),
                matrix.len()
            )));
        }
        theta.values_mut()[self.range()].copy_from_slice(matrix);
        Ok(())
    }

    pub fn key(&self) -> (usize, AttnMatrix) {
        (self.layer, self.matrix)
    }
}

#[derive(Clone, Debug)]
struct BlockIndex {
    ln1_g: usize,
    ln1_b: usize,
    in_w: usize,
    in_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

/// Model definition: configuration plus parameter layout.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: ModelConfig,
    layout: Arc<Layout>,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIndex>,
    ln_f_g: usize,
    ln_f_b: usize,
    head_w: usize,
    head_b: usize,
}

impl Transformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, p) = (cfg.d_model, cfg.d_ff, cfg.p);
        let mut l = Layout::new();
        let tok_emb = l.push("tok_emb.weight", vec![p, d]);
        let pos_emb = l.push("pos_emb.weight", vec![cfg.seq_len, d]);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let n = |s: &str| format!("layers.{i}.{s}");
                BlockIndex {
                    ln1_g: l.push(n("norm1.weight"), vec![d]),
                    ln1_b: l.push(n("norm1.bias"), vec![d]),
                    in_w: l.push(n("self_attn.in_proj_weight"), vec![3 * d, d]),
                    in_b: l.push(n("self_attn.in_proj_bias"), vec![3 * d]),
                    out_w: l.push(n("self_attn.out_proj.weight"), vec![d, d]),
                    out_b: l.push(n("self_attn.out_proj.bias"), vec![d]),
                    ln2_g: l.push(n("norm2.weight"), vec![d]),
                    ln2_b: l.push(n("norm2.bias"), vec![d]),
                    ff1_w: l.push(n("linear1.weight"), vec![f, d]),
                    ff1_b: l.push(n("linear1.bias"), vec![f]),
                    ff2_w: l.push(n("linear2.weight"), vec![d, f]),
                    ff2_b: l.push(n("linear2.bias"), vec![d]),
                }
            })
            .collect();
        let ln_f_g = l.push("norm_f.weight", vec![d]);
        let ln_f_b = l.push("norm_f.bias", vec![d]);
        let head_w = l.push("head.weight", vec![p, d]);
        let head_b = l.push("head.bias", vec![p]);
        Ok(Self {
            cfg,
            layout: Arc::new(l),
            tok_emb,
            pos_emb,
            blocks,
            ln_f_g,
            ln_f_b,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    /// Uniform(±1/√fan_in) weights, zero biases, unit LayerNorm gains and
    /// N(0, 1) token and position embeddings, all from the init stream of
    /// `seed`.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = stream(seed, Stream::Init);
        let mut theta = ParamVector::zeros(self.layout.clone());
        for (idx, entry) in self.layout.entries().iter().enumerate() {
            let name = entry.name.as_str();
            let block = theta.block_mut(idx);
            if name.ends_with("emb.weight") {
                for v in block.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            } else if name.contains("norm") {
                let fill = if name.ends_with("weight") { 1.0 } else { 0.0 };
                block.iter_mut().for_each(|v| *v = fill);
            } else if name.ends_with("bias") {
                block.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let bound = 1.0 / (entry.shape[1] as f64).sqrt();
                for v in block.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        theta
    }

    fn check_tokens(&self, batch: &[Example]) -> Result<()> {
        let p = self.cfg.p;
        for e in batch {
            for t in [e.a, e.b] {
                if t >= p {
                    return Err(Error::TokenOutOfRange { token: t, p });
                }
            }
        }
        Ok(())
    }

    /// Records the forward pass for `batch` and returns the `(batch, p)` logits.
    ///
    /// The last block only evaluates its post-attention path at position
    /// 0, which is the only position the head reads.
    pub fn forward(&self, tape: &mut Tape, theta: &ParamVector, batch: &[Example]) -> Result<Var> {
        self.check_tokens(batch)?;
        let s = self.cfg.seq_len;
        let tokens: Vec<usize> = batch.iter().flat_map(|e| [e.a, e.b]).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..s).collect();
        let tok = tape.param(theta, self.tok_emb);
        let pos = tape.param(theta, self.pos_emb);
        let te = tape.gather(tok, &tokens)?;
        let pe = tape.gather(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let eps = self.cfg.ln_eps;
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (g1, b1) = (tape.param(theta, blk.ln1_g), tape.param(theta, blk.ln1_b));
            let h = tape.layer_norm(x, g1, b1, eps)?;
            let (iw, ib) = (tape.param(theta, blk.in_w), tape.param(theta, blk.in_b));
            let qkv = tape.linear(h, iw, Some(ib))?;
            let mut a = tape.attention(qkv, self.cfg.n_heads, s)?;
            if i == last {
                a = tape.select_rows(a, s, 0)?;
                x = tape.select_rows(x, s, 0)?;
            }
            let (ow, ob) = (tape.param(theta, blk.out_w), tape.param(theta, blk.out_b));
            let o = tape.linear(a, ow, Some(ob))?;
            x = tape.add(x, o)?;
            let (g2, b2) = (tape.param(theta, blk.ln2_g), tape.param(theta, blk.ln2_b));
            let h = tape.layer_norm(x, g2, b2, eps)?;
            let (w1, c1) = (tape.param(theta, blk.ff1_w), tape.param(theta, blk.ff1_b));
            let u = tape.linear(h, w1, Some(c1))?;
            let u = tape.gelu(u)?;
            let (w2, c2) = (tape.param(theta, blk.ff2_w), tape.param(theta, blk.ff2_b));
            let f = tape.linear(u, w2, Some(c2))?;
            x = tape.add(x, f)?;
        }
        let (gf, bf) = (tape.param(theta, self.ln_f_g), tape.param(theta, self.ln_f_b));
        let h = tape.layer_norm(x, gf, bf, eps)?;
        let (hw, hb) = (tape.param(theta, self.head_w), tape.param(theta, self.head_b));
        tape.linear(h, hw, Some(hb))
    }

    pub fn logits(&self, theta: &ParamVector, batch: &[Example]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, theta, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross-entropy on `batch` and its full flat gradient.
    pub fn loss_and_grad(&self, theta: &ParamVector, batch: &[Example]) -> Result<(f64, ParamVector)> {
        let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
        value_and_grad(theta, |tape, th| {
            let logits = self.forward(tape, th, batch)?;
            tape.cross_entropy_mean(logits, &targets)
        })
    }

    pub fn loss(&self, theta: &ParamVector, batch: &[Example]) -> Result<f64> {
        let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, theta, batch)?;
        let l = tape.cross_entropy_mean(logits, &targets)?;
        Ok(tape.value(l).item())
    }

    /// The `n_layers × 4` attention weight matrices, layer-major, in
    /// W_Q, W_K, W_V, W_O order.
    pub fn attention_views(&self) -> Vec<AttentionView> {
        let d = self.cfg.d_model;
        let mut views = Vec::with_capacity(self.blocks.len() * 4);
        for (layer, blk) in self.blocks.iter().enumerate() {
            let in_off = self.layout.entry(blk.in_w).offset;
            for (k, m) in [AttnMatrix::Wq, AttnMatrix::Wk, AttnMatrix::Wv].into_iter().enumerate() {
                views.push(AttentionView {
                    layer,
                    matrix: m,
                    offset: in_off + k * d * d,
                    dim: d,
                });
            }
            views.push(AttentionView {
                layer,
                matrix: AttnMatrix::Wo,
                offset: self.layout.entry(blk.out_w).offset,
                dim: d,
            });
        }
        views
    }
}

/// Writes `<stem>.json` (layout manifest) and `<stem>.bin` (little-endian f64).
pub fn save_checkpoint(theta: &ParamVector, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_vec_pretty(&**theta.layout())?;
    crate::io::write_atomic(&dir.join(format!("{stem}.json")), &manifest)?;
    crate::io::write_atomic(&dir.join(format!("{stem}.bin")), &crate::io::f64s_to_le(theta.values()))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamVector> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let bytes = fs::read(&manifest_path).map_err(|e| Error::MissingArtifact {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let mut layout: Layout = serde_json::from_slice(&bytes)?;
    layout.reindex();
    layout.validate()?;
    let values = crate::io::le_to_f64s(&fs::read(dir.join(format!("{stem}.bin")))?)?;
    ParamVector::from_values(Arc::new(layout), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, Operation};

    fn small() -> Transformer {
        Transformer::new(ModelConfig {
            d_model: 16,
            n_heads: 4,
            d_ff: 24,
            p: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    /// Independent count: embeddings + per-layer blocks + final norm + head.
    fn count_params(cfg: &ModelConfig) -> usize {
        let (d, f, p, s) = (cfg.d_model, cfg.d_ff, cfg.p, cfg.seq_len);
        let per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (f * d + f) + (d * f + d);
        p * d + s * d + cfg.n_layers * per_layer + 2 * d + p * d + p
    }

    #[test]
    fn parameter_count_matches_independent_count() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        m.layout().validate().unwrap();
        assert_eq!(m.n_params(), count_params(m.config()));
        assert_eq!(m.n_params(), 290_401);
        assert!(m.n_params() > 250_000 && m.n_params() < 330_000);
        let three = Transformer::new(ModelConfig {
            n_layers: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(three.n_params(), count_params(three.config()));
    }

    #[test]
    fn init_is_seeded() {
        let m = small();
        assert_eq!(m.init(4), m.init(4));
        assert_ne!(m.init(4), m.init(5));
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(Transformer::new(cfg), Err(Error::HeadsDoNotDivide { .. })));
    }

    #[test]
    fn logits_shape_and_token_check() {
        let m = small();
        let theta = m.init(0);
        let batch: Vec<Example> = (0..5)
            .map(|i| Example {
                a: i,
                b: 10 - i,
                label: 0,
            })
            .collect();
        let out = m.logits(&theta, &batch).unwrap();
        assert_eq!(out.shape(), &[5, 11]);
        let bad = [Example { a: 11, b: 0, label: 0 }];
        assert!(matches!(
            m.logits(&theta, &bad),
            Err(Error::TokenOutOfRange { token: 11, p: 11 })
        ));
    }

    #[test]
    fn batch_permutation_equivariance() {
        let m = small();
        let theta = m.init(1);
        let ds = build_dataset(Operation::Add, 11, 0.5, 0).unwrap();
        let batch: Vec<Example> = ds.train[..7].to_vec();
        let mut rev = batch.clone();
        rev.reverse();
        let a = m.logits(&theta, &batch).unwrap();
        let b = m.logits(&theta, &rev).unwrap();
        let c = a.cols();
        for i in 0..7 {
            assert_eq!(&a.data()[i * c..(i + 1) * c], &b.data()[(6 - i) * c..(7 - i) * c]);
        }
    }

    #[test]
    fn views_alias_fused_rows() {
        let m = small();
        let mut theta = m.init(2);
        let views = m.attention_views();
        assert_eq!(views.len(), 8);
        let d = 16;
        let in_idx = m.layout().index_of("layers.1.self_attn.in_proj_weight").unwrap();
        let fused = theta.block(in_idx).to_vec();
        let wk = views
            .iter()
            .find(|v| v.layer == 1 && v.matrix == AttnMatrix::Wk)
            .unwrap();
        assert_eq!(wk.read(&theta), &fused[d * d..2 * d * d]);

        let before = theta.clone();
        let mut bumped = wk.read(&theta).to_vec();
        bumped[3] += 1.0;
        wk.write(&mut theta, &bumped).unwrap();
        let changed: Vec<usize> = (0..theta.len())
            .filter(|&i| theta.values()[i] != before.values()[i])
            .collect();
        assert_eq!(changed, vec![wk.offset + 3]);
        wk.write(&mut theta, &before.values()[wk.range()]).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let theta = m.init(3);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&theta, dir.path(), "ckpt").unwrap();
        let back = load_checkpoint(dir.path(), "ckpt").unwrap();
        assert_eq!(back.values(), theta.values());
        assert_eq!(back.layout().entries(), theta.layout().entries());
    }
}
