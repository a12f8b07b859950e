use std::collections::HashMap;
use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::Rng;

/// The four independently freezable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// φ
    Encoder,
    /// ψ, including the token embedding table
    Decoder,
    /// θ
    Kws,
    /// q
    Prefix,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Decoder, Group::Kws, Group::Prefix];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Kws => "kws",
            Group::Prefix => "prefix",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which groups receive gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub encoder: bool,
    pub decoder: bool,
    pub kws: bool,
    pub prefix: bool,
}

impl FreezeMask {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn trainable(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Decoder => self.decoder,
            Group::Kws => self.kws,
            Group::Prefix => self.prefix,
        }
    }
}

/// Named tensors of one group, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: ParamGroup,
    pub decoder: ParamGroup,
    pub kws: ParamGroup,
    /// Empty until a prefix is initialized.
    pub prefix: ParamGroup,
}

pub const PREFIX_NAME: &str = "q";

impl ModelParams {
    pub fn group(&self, g: Group) -> &ParamGroup {
        match g {
            Group::Encoder => &self.encoder,
            Group::Decoder => &self.decoder,
            Group::Kws => &self.kws,
            Group::Prefix => &self.prefix,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Decoder => &mut self.decoder,
            Group::Kws => &mut self.kws,
            Group::Prefix => &mut self.prefix,
        }
    }

    pub fn prefix(&self) -> Option<&Tensor> {
        self.prefix.get(PREFIX_NAME)
    }

    pub fn set_prefix(&mut self, q: Tensor) {
        let mut g = ParamGroup::new();
        g.push(PREFIX_NAME, q);
        self.prefix = g;
    }

    pub fn clear_prefix(&mut self) {
        self.prefix = ParamGroup::new();
    }

    pub fn hash(&self, g: Group) -> String {
        self.group(g).hash()
    }

    pub fn trainable_count(&self, mask: FreezeMask) -> usize {
        Group::ALL
            .iter()
            .filter(|g| mask.trainable(**g))
            .map(|g| self.group(*g).num_params())
            .sum()
    }

    /// Fresh parameters: `N(0, 1/fan_in)` weights, zero biases, unit norms.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut normal = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let mut enc = ParamGroup::new();
        enc.push("conv1.w", normal(&[3 * cfg.n_mels, d], fan(3 * cfg.n_mels)));
        enc.push("conv1.b", Tensor::zeros(&[d]));
        enc.push("conv2.w", normal(&[3 * d, d], fan(3 * d)));
        enc.push("conv2.b", Tensor::zeros(&[d]));
        for l in 0..cfg.n_enc_layers {
            let p = format!("layer{l}");
            push_norm(&mut enc, &format!("{p}.ln1"), d);
            push_attention(&mut enc, &format!("{p}.attn"), d, &mut normal);
            push_norm(&mut enc, &format!("{p}.ln2"), d);
            push_ffn(&mut enc, &p, d, cfg.d_ff, &mut normal);
        }
        push_norm(&mut enc, "ln_post", d);

        let mut dec = ParamGroup::new();
        dec.push("tok_emb", normal(&[cfg.vocab_size, d], 1.0));
        for l in 0..cfg.n_dec_layers {
            let p = format!("layer{l}");
            push_norm(&mut dec, &format!("{p}.ln1"), d);
            push_attention(&mut dec, &format!("{p}.self"), d, &mut normal);
            push_norm(&mut dec, &format!("{p}.ln2"), d);
            push_attention(&mut dec, &format!("{p}.cross"), d, &mut normal);
            push_norm(&mut dec, &format!("{p}.ln3"), d);
            push_ffn(&mut dec, &p, d, cfg.d_ff, &mut normal);
        }
        push_norm(&mut dec, "ln_f", d);
        // Small output weights keep the initial distribution near uniform.
        dec.push("out.w", normal(&[d, cfg.vocab_size], 0.02));
        dec.push("out.b", Tensor::zeros(&[cfg.vocab_size]));

        let mut kws = ParamGroup::new();
        push_norm(&mut kws, "kw_ln", d);
        for name in ["q", "k", "v"] {
            kws.push(format!("{name}.w"), normal(&[d, d], fan(d)));
            kws.push(format!("{name}.b"), Tensor::zeros(&[d]));
        }
        kws.push("h.w", normal(&[3 * d, d], fan(3 * d)));
        kws.push("h.b", Tensor::zeros(&[d]));
        kws.push("score.w", normal(&[d, 1], 0.02));
        kws.push("score.b", Tensor::zeros(&[1]));

        Ok(ModelParams {
            encoder: enc,
            decoder: dec,
            kws,
            prefix: ParamGroup::new(),
        })
    }

    /// Check every tensor shape against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(cfg, &mut crate::rng::stream(0, "shape-check"))?;
        for g in [Group::Encoder, Group::Decoder, Group::Kws] {
            let (a, b) = (self.group(g), reference.group(g));
            if a.names() != b.names() {
                return Err(Error::Mismatch(format!("{g} parameter names differ from config")));
            }
            for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
                if x.shape() != y.shape() {
                    return Err(Error::Mismatch(format!(
                        "{g}.{name}: shape {:?}, config expects {:?}",
                        x.shape(),
                        y.shape()
                    )));
                }
            }
        }
        if let Some(q) = self.prefix() {
            if q.shape().len() != 2 || q.shape()[1] != cfg.d_model {
                return Err(Error::Mismatch(format!("prefix shape {:?}", q.shape())));
            }
        }
        Ok(())
    }
}

fn push_norm(g: &mut ParamGroup, p: &str, d: usize) {
    g.push(format!("{p}.g"), Tensor::ones(&[d]));
    g.push(format!("{p}.b"), Tensor::zeros(&[d]));
}

fn push_attention(g: &mut ParamGroup, p: &str, d: usize, normal: &mut impl FnMut(&[usize], f64) -> Tensor) {
    let std = 1.0 / (d as f64).sqrt();
    for name in ["q", "k", "v", "o"] {
        g.push(format!("{p}.{name}.w"), normal(&[d, d], std));
        g.push(format!("{p}.{name}.b"), Tensor::zeros(&[d]));
    }
}

fn push_ffn(g: &mut ParamGroup, p: &str, d: usize, d_ff: usize, normal: &mut impl FnMut(&[usize], f64) -> Tensor) {
    g.push(format!("{p}.ff1.w"), normal(&[d, d_ff], 1.0 / (d as f64).sqrt()));
    g.push(format!("{p}.ff1.b"), Tensor::zeros(&[d_ff]));
    g.push(format!("{p}.ff2.w"), normal(&[d_ff, d], 1.0 / (d_ff as f64).sqrt()));
    g.push(format!("{p}.ff2.b"), Tensor::zeros(&[d]));
}
