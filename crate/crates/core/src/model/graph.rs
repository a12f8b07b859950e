//! Forward passes recorded on a tape, with parameters bound lazily as leaves.

use std::collections::HashMap;

use super::params::{FreezeMask, Group, ModelParams, PREFIX_NAME};
use super::ModelConfig;
use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::text::TokenId;

/// Per-group gradients aligned with each group's tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    groups: [Vec<Vec<f64>>; 4],
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        let groups = Group::ALL.map(|g| {
            let pg = params.group(g);
            (0..pg.len()).map(|i| vec![0.0; pg.tensor(i).len()]).collect()
        });
        Gradients { groups }
    }

    pub fn group(&self, g: Group) -> &[Vec<f64>] {
        &self.groups[g as usize]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [Vec<f64>] {
        &mut self.groups[g as usize]
    }

    /// True when every entry of the group is exactly zero.
    pub fn is_zero(&self, g: Group) -> bool {
        self.group(g).iter().flatten().all(|v| *v == 0.0)
    }

    pub fn max_abs(&self, g: Group) -> f64 {
        self.group(g).iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += q;
                }
            }
        }
    }
}

pub struct DecoderPass {
    /// `(|tokens| + 1) × V`: row `i` predicts `tokens[i]`, the last row
    /// predicts what follows the final token.
    pub logits: Var,
    /// Self-attention probabilities, `[layer][head]`, each `L × L`.
    pub self_attn: Vec<Vec<Var>>,
    pub prefix_len: usize,
    pub ctx_len: usize,
}

pub struct Graph<'a> {
    pub tape: Tape,
    cfg: &'a ModelConfig,
    params: &'a ModelParams,
    mask: FreezeMask,
    bound: HashMap<(Group, usize), Var>,
}

pub fn sinusoid(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = (i / d, i % d);
        let rate = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl<'a> Graph<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams, mask: FreezeMask) -> Self {
        Graph {
            tape: Tape::new(),
            cfg,
            params,
            mask,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, g: Group, name: &str) -> Result<Var> {
        let group = self.params.group(g);
        let i = group
            .position(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {g}.{name}")))?;
        if let Some(v) = self.bound.get(&(g, i)) {
            return Ok(*v);
        }
        let v = self.tape.leaf(group.tensor(i).clone(), self.mask.trainable(g));
        self.bound.insert((g, i), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn gradients(&self) -> Gradients {
        let mut out = Gradients::zeros(self.params);
        for (&(g, i), &v) in &self.bound {
            if let Some(gr) = self.tape.grad(v) {
                out.group_mut(g)[i].copy_from_slice(gr);
            }
        }
        out
    }

    fn linear(&mut self, g: Group, p: &str, x: Var) -> Result<Var> {
        let w = self.param(g, &format!("{p}.w"))?;
        let b = self.param(g, &format!("{p}.b"))?;
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, g: Group, p: &str, x: Var) -> Result<Var> {
        let gain = self.param(g, &format!("{p}.g"))?;
        let bias = self.param(g, &format!("{p}.b"))?;
        self.tape.layer_norm(x, gain, bias)
    }

    fn ffn(&mut self, g: Group, p: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, &format!("{p}.ff1"), x)?;
        let h = self.tape.gelu(h);
        self.linear(g, &format!("{p}.ff2"), h)
    }

    fn project_kv(&mut self, g: Group, p: &str, x: Var) -> Result<(Var, Var)> {
        let k = self.linear(g, &format!("{p}.k"), x)?;
        let v = self.linear(g, &format!("{p}.v"), x)?;
        Ok((k, v))
    }

    /// Multi-head attention of `x` over precomputed keys/values.
    fn attend(&mut self, g: Group, p: &str, x: Var, (k, v): (Var, Var), causal: bool) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(g, &format!("{p}.q"), x)?;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let s = self.tape.matmul_bt(qh, kh)?;
            let s = self.tape.scale(s, scale);
            let a = if causal {
                self.tape.softmax_causal(s)
            } else {
                self.tape.softmax(s)
            };
            probs.push(a);
            outs.push(self.tape.matmul(a, vh)?);
        }
        let o = self.tape.concat_cols(&outs)?;
        Ok((self.linear(g, &format!("{p}.o"), o)?, probs))
    }

    /// `u = f_φ(x)`: two kernel-3 convolutions (the second with stride 2),
    /// sinusoidal positions, pre-norm self-attention layers.
    pub fn encode(&mut self, x: &FeatureSequence) -> Result<Var> {
        let (t, f) = (x.n_frames(), x.n_mels());
        if f != self.cfg.n_mels {
            return Err(Error::Model(format!("expected {} mel channels, got {f}", self.cfg.n_mels)));
        }
        if t == 0 || t > self.cfg.max_src_frames {
            return Err(Error::Model(format!(
                "input has {t} frames, allowed 1..={}",
                self.cfg.max_src_frames
            )));
        }
        let d = self.cfg.d_model;
        let xs = self.tape.constant(x.frames().clone());

        let conv = |g: &mut Self, input: Var, len: usize, stride: usize, name: &str| -> Result<Var> {
            let width = g.tape.value(input).cols();
            let out_len = len.div_ceil(stride);
            let idx: Vec<Option<usize>> = (0..out_len)
                .flat_map(|s| {
                    let c = (s * stride) as isize;
                    (-1..=1).map(move |o| {
                        let r = c + o;
                        (r >= 0 && (r as usize) < len).then_some(r as usize)
                    })
                })
                .collect();
            let cols = g.tape.gather_rows(input, &idx)?;
            let cols = g.tape.reshape(cols, &[out_len, 3 * width])?;
            let h = g.linear(Group::Encoder, name, cols)?;
            Ok(g.tape.gelu(h))
        };
        let h = conv(self, xs, t, 1, "conv1")?;
        let h = conv(self, h, t, 2, "conv2")?;
        let t2 = t.div_ceil(2);
        let pe = self.tape.constant(sinusoid(t2, d));
        let mut h = self.tape.add(h, pe)?;
        for l in 0..self.cfg.n_enc_layers {
            let p = format!("layer{l}");
            let n = self.norm(Group::Encoder, &format!("{p}.ln1"), h)?;
            let kv = self.project_kv(Group::Encoder, &format!("{p}.attn"), n)?;
            let (a, _) = self.attend(Group::Encoder, &format!("{p}.attn"), n, kv, false)?;
            h = self.tape.add(h, a)?;
            let n = self.norm(Group::Encoder, &format!("{p}.ln2"), h)?;
            let m = self.ffn(Group::Encoder, &p, n)?;
            h = self.tape.add(h, m)?;
        }
        self.norm(Group::Encoder, "ln_post", h)
    }

    /// Cross-attention keys/values of `u` for every decoder layer.
    pub fn cross_kv(&mut self, u: Var) -> Result<Vec<(Var, Var)>> {
        (0..self.cfg.n_dec_layers)
            .map(|l| self.project_kv(Group::Decoder, &format!("layer{l}.cross"), u))
            .collect()
    }

    /// Teacher-forced decoder over `[q][ctx][tokens]`, where `ctx` is either
    /// `[SOT]` or a full `SOP … SOT` prompt.
    pub fn decode(&mut self, cross: &[(Var, Var)], ctx: &[TokenId], tokens: &[TokenId], with_prefix: bool) -> Result<DecoderPass> {
        let d = self.cfg.d_model;
        let prefix_len = if with_prefix {
            self.params
                .prefix()
                .map(|q| q.shape()[0])
                .ok_or_else(|| Error::Model("prefix requested but none is initialized".into()))?
        } else {
            0
        };
        let total = prefix_len + ctx.len() + tokens.len();
        if total > self.cfg.max_tgt_len {
            return Err(Error::Model(format!(
                "conditioning length {total} exceeds max_tgt_len {}",
                self.cfg.max_tgt_len
            )));
        }
        if ctx.is_empty() {
            return Err(Error::Model("decoder context must end with SOT".into()));
        }
        let vocab = self.cfg.vocab_size;
        let ids: Vec<Option<usize>> = ctx
            .iter()
            .chain(tokens)
            .map(|&t| {
                if (t as usize) < vocab {
                    Ok(Some(t as usize))
                } else {
                    Err(Error::Model(format!("token id {t} outside vocabulary of {vocab}")))
                }
            })
            .collect::<Result<_>>()?;
        let emb = self.param(Group::Decoder, "tok_emb")?;
        let mut x = self.tape.gather_rows(emb, &ids)?;
        if with_prefix {
            let q = self.param(Group::Prefix, PREFIX_NAME)?;
            x = self.tape.concat_rows(&[q, x])?;
        }
        let pe = self.tape.constant(sinusoid(total, d));
        let mut h = self.tape.add(x, pe)?;
        let mut self_attn = Vec::with_capacity(self.cfg.n_dec_layers);
        for (l, &kv) in cross.iter().enumerate() {
            let p = format!("layer{l}");
            let n = self.norm(Group::Decoder, &format!("{p}.ln1"), h)?;
            let skv = self.project_kv(Group::Decoder, &format!("{p}.self"), n)?;
            let (a, probs) = self.attend(Group::Decoder, &format!("{p}.self"), n, skv, true)?;
            self_attn.push(probs);
            h = self.tape.add(h, a)?;
            let n = self.norm(Group::Decoder, &format!("{p}.ln2"), h)?;
            let (c, _) = self.attend(Group::Decoder, &format!("{p}.cross"), n, kv, false)?;
            h = self.tape.add(h, c)?;
            let n = self.norm(Group::Decoder, &format!("{p}.ln3"), h)?;
            let m = self.ffn(Group::Decoder, &p, n)?;
            h = self.tape.add(h, m)?;
        }
        let first = prefix_len + ctx.len() - 1;
        let tail = self.tape.slice_rows(h, first, tokens.len() + 1)?;
        let tail = self.norm(Group::Decoder, "ln_f", tail)?;
        let logits = self.linear(Group::Decoder, "out", tail)?;
        Ok(DecoderPass {
            logits,
            self_attn,
            prefix_len,
            ctx_len: ctx.len(),
        })
    }

    /// One logit per keyword: pooled keyword embeddings query the encoder
    /// output, and the attended summary is scored.
    pub fn kws_logits(&mut self, u: Var, keywords: &[Vec<TokenId>]) -> Result<Var> {
        let d = self.cfg.d_model;
        let total: usize = keywords.iter().map(Vec::len).sum();
        let mut ids = Vec::with_capacity(total);
        let mut pool = vec![0.0; keywords.len() * total];
        for (k, kw) in keywords.iter().enumerate() {
            if kw.is_empty() || kw.len() > 4 {
                return Err(Error::Keywords(format!(
                    "keyword {k} has {} tokens, expected 1..=4",
                    kw.len()
                )));
            }
            for &t in kw {
                if t as usize >= self.cfg.vocab_size {
                    return Err(Error::Model(format!("token id {t} outside vocabulary")));
                }
                pool[k * total + ids.len()] = 1.0 / kw.len() as f64;
                ids.push(Some(t as usize));
            }
        }
        let emb = self.param(Group::Decoder, "tok_emb")?;
        let e = self.tape.gather_rows(emb, &ids)?;
        let pool = self.tape.constant(Tensor::matrix(keywords.len(), total, pool)?);
        let pooled = self.tape.matmul(pool, e)?;
        let pooled = self.norm(Group::Kws, "kw_ln", pooled)?;
        let q = self.linear(Group::Kws, "q", pooled)?;
        let k = self.linear(Group::Kws, "k", u)?;
        let v = self.linear(Group::Kws, "v", u)?;
        let s = self.tape.matmul_bt(q, k)?;
        let s = self.tape.scale(s, 1.0 / (d as f64).sqrt());
        let a = self.tape.softmax(s);
        let att = self.tape.matmul(a, v)?;
        let inter = self.tape.mul(att, q)?;
        let feat = self.tape.concat_cols(&[att, q, inter])?;
        let h = self.linear(Group::Kws, "h", feat)?;
        let h = self.tape.gelu(h);
        self.linear(Group::Kws, "score", h)
    }
}
