//! The four training regimes: base recognizer, keyword spotter, decoder
//! fine-tuning and prefix tuning.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{FreezeMask, Gradients, Graph, Group, Model, DEFAULT_PREFIX_LEN};
use crate::numcore::{Tensor, Var};
use crate::promptgen::{self, PromptTokens};
use crate::rng::{self, Rng, RngState};
use crate::synth::Dataset;
use crate::text::{self, TokenId, Vocab, EOT, SOT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BaseAsr,
    Kws,
    Ft,
    Pt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BaseAsr, Mode::Kws, Mode::Ft, Mode::Pt];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaseAsr => "base-asr",
            Mode::Kws => "kws",
            Mode::Ft => "ft",
            Mode::Pt => "pt",
        }
    }

    pub fn mask(self) -> FreezeMask {
        match self {
            Mode::BaseAsr => FreezeMask {
                encoder: true,
                decoder: true,
                ..FreezeMask::frozen()
            },
            Mode::Kws => FreezeMask {
                kws: true,
                ..FreezeMask::frozen()
            },
            Mode::Ft => FreezeMask {
                decoder: true,
                ..FreezeMask::frozen()
            },
            Mode::Pt => FreezeMask {
                prefix: true,
                ..FreezeMask::frozen()
            },
        }
    }

    /// Modes that must already have been applied to the initial model.
    pub fn requires(self) -> &'static [Mode] {
        match self {
            Mode::BaseAsr => &[],
            Mode::Kws => &[Mode::BaseAsr],
            Mode::Ft | Mode::Pt => &[Mode::BaseAsr, Mode::Kws],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Train(format!("unknown mode {s:?}")))
    }
}

/// Settings used at full model scale; desk runs default to larger rates and fewer steps.
pub const FULL_SCALE_FT_LR: f64 = 1e-7;
pub const FULL_SCALE_STEPS: usize = 30_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub prefix_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base mode: probability that an example carries a previous-text prompt.
    pub context_prob: f64,
    /// Base mode: probability of keeping each transcript word in that prompt.
    pub context_keep: f64,
    /// Base mode: probability that the prompt words are DELIM-separated.
    pub context_delim: f64,
    /// Base mode: most words from other utterances mixed into the prompt.
    pub context_distractors: usize,
    /// Base mode: probability that a prompted example is preceded by random
    /// vocabulary tokens, so the decoder tolerates a learned prefix later.
    pub lead_prob: f64,
    /// Base mode: most such leading tokens.
    pub lead_max: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for `mode`.
    pub fn preset(mode: Mode) -> Self {
        let (steps, lr) = match mode {
            Mode::BaseAsr => (16_000, 1e-3),
            Mode::Kws => (30_000, 1e-3),
            Mode::Ft => (1500, 1e-4),
            Mode::Pt => (3000, 5e-4),
        };
        TrainConfig {
            mode,
            steps,
            batch_size: 4,
            learning_rate: lr,
            seed: 0,
            prefix_len: DEFAULT_PREFIX_LEN,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            context_prob: 0.9,
            context_keep: 0.8,
            context_delim: 0.5,
            context_distractors: 4,
            lead_prob: 0.5,
            lead_max: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Train(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(Error::Train("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Train("batch_size must be at least 1".into()));
        }
        if self.batch_size < 2 && self.mode != Mode::BaseAsr {
            return Err(Error::Train(format!(
                "{} mode needs batch_size >= 2 to draw negative keywords",
                self.mode
            )));
        }
        if self.mode == Mode::Pt && self.prefix_len == 0 {
            return Err(Error::Train("prefix_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Model input for one example: raw features, or cached encoder states when
/// the encoder is frozen.
#[derive(Clone, Copy, Debug)]
pub enum Input<'d> {
    Frames(&'d FeatureSequence),
    States(&'d Tensor),
}

#[derive(Clone, Debug)]
pub struct AsrItem<'d> {
    pub input: Input<'d>,
    /// Decoder context ending in SOT.
    pub ctx: Vec<TokenId>,
    /// Transcript tokens without EOT; the targets are these plus EOT.
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct KwsItem<'d> {
    pub input: Input<'d>,
    pub keywords: Vec<Vec<TokenId>>,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum Batch<'d> {
    Asr { items: Vec<AsrItem<'d>>, prefix: bool },
    Kws(Vec<KwsItem<'d>>),
}

fn input_var(g: &mut Graph<'_>, input: Input<'_>) -> Result<Var> {
    match input {
        Input::Frames(x) => g.encode(x),
        Input::States(u) => Ok(g.tape.constant(u.clone())),
    }
}

/// Mean token cross-entropy over every target of the batch; prompt and
/// prefix positions carry no loss.
pub fn loss_asr(g: &mut Graph<'_>, items: &[AsrItem<'_>], prefix: bool) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let mut logits = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    for it in items {
        let u = input_var(g, it.input)?;
        let cross = g.cross_kv(u)?;
        let pass = g.decode(&cross, &it.ctx, &it.tokens, prefix)?;
        logits.push(pass.logits);
        targets.extend(it.tokens.iter().map(|t| *t as usize));
        targets.push(EOT as usize);
    }
    let all = g.tape.concat_rows(&logits)?;
    let ignore = vec![false; targets.len()];
    g.tape.cross_entropy(all, &targets, &ignore)
}

/// Mean binary cross-entropy over every keyword of the batch.
pub fn loss_kws(g: &mut Graph<'_>, items: &[KwsItem<'_>]) -> Result<Var> {
    let mut logits = Vec::with_capacity(items.len());
    let mut labels = Vec::new();
    for it in items {
        if it.keywords.is_empty() {
            continue;
        }
        let u = input_var(g, it.input)?;
        logits.push(g.kws_logits(u, &it.keywords)?);
        labels.extend_from_slice(&it.labels);
    }
    if logits.is_empty() {
        return Err(Error::Train("batch has no keywords".into()));
    }
    let all = g.tape.concat_rows(&logits)?;
    g.tape.bce_with_logits(all, &labels)
}

fn record(g: &mut Graph<'_>, batch: &Batch<'_>) -> Result<Var> {
    match batch {
        Batch::Asr { items, prefix } => loss_asr(g, items, *prefix),
        Batch::Kws(items) => loss_kws(g, items),
    }
}

/// Loss value only.
pub fn batch_loss(model: &Model, batch: &Batch<'_>) -> Result<f64> {
    let mut g = model.graph(FreezeMask::frozen());
    let loss = record(&mut g, batch)?;
    Ok(g.tape.value(loss).data()[0])
}

/// Loss and its gradient with respect to every group trainable under `mask`.
pub fn batch_loss_and_grad(model: &Model, mask: FreezeMask, batch: &Batch<'_>) -> Result<(f64, Gradients)> {
    let mut g = model.graph(mask);
    let loss = record(&mut g, batch)?;
    let value = g.tape.value(loss).data()[0];
    g.tape.backward(loss)?;
    Ok((value, g.gradients()))
}

/// Adam over the groups trainable under `mask`.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
    mask: FreezeMask,
}

impl Adam {
    pub fn new(model: &Model, mask: FreezeMask, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = Gradients::zeros(&model.params);
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            mask,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for g in Group::ALL {
            if !self.mask.trainable(g) {
                continue;
            }
            let group = model.params.group_mut(g);
            for i in 0..group.len() {
                let p = group.tensor_mut(i).data_mut();
                let gr = &grads.group(g)[i];
                let m = &mut self.m.group_mut(g)[i];
                let v = &mut self.v.group_mut(g)[i];
                for j in 0..p.len() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr[j] * gr[j];
                    p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// A dataset with tokenized transcripts and, for frozen-encoder modes,
/// encoder states computed once.
pub struct Prepared<'d> {
    pub dataset: &'d Dataset,
    pub tokens: Vec<Vec<TokenId>>,
    pub states: Option<Vec<Tensor>>,
}

impl<'d> Prepared<'d> {
    pub fn new(dataset: &'d Dataset, vocab: &Vocab, model: &Model, cache_states: bool) -> Result<Self> {
        let tokens = dataset
            .utterances
            .iter()
            .map(|u| vocab.tokenize(&u.transcript))
            .collect::<Result<Vec<_>>>()?;
        let states = if cache_states {
            Some(
                dataset
                    .utterances
                    .iter()
                    .map(|u| Ok(model.encode(&u.features)?.states))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Prepared {
            dataset,
            tokens,
            states,
        })
    }

    fn input(&self, i: usize) -> Input<'_> {
        match &self.states {
            Some(s) => Input::States(&s[i]),
            None => Input::Frames(&self.dataset.utterances[i].features),
        }
    }

    /// Batch for `mode` over the utterances `idx`, with prompts or keywords
    /// drawn from `rng`.
    pub fn batch(&self, mode: Mode, cfg: &TrainConfig, idx: &[usize], vocab: &Vocab, rng: &mut Rng) -> Result<Batch<'_>> {
        let texts: Vec<Vec<TokenId>> = idx.iter().map(|&i| self.tokens[i].clone()).collect();
        match mode {
            Mode::BaseAsr => {
                let mut items = Vec::with_capacity(idx.len());
                for (b, &i) in idx.iter().enumerate() {
                    let ctx = if rng.gen_bool(cfg.context_prob) {
                        let delimited = rng.gen_bool(cfg.context_delim);
                        let prompt = promptgen::sample_context_prompt(
                            &texts,
                            b,
                            cfg.context_keep,
                            cfg.context_distractors,
                            delimited,
                            vocab,
                            rng,
                        );
                        let mut ctx = Vec::new();
                        if cfg.lead_max > 0 && rng.gen_bool(cfg.lead_prob) {
                            let n = rng.gen_range(1..=cfg.lead_max);
                            let lo = text::reserved_count() as TokenId;
                            ctx.extend((0..n).map(|_| rng.gen_range(lo..vocab.len() as TokenId)));
                        }
                        ctx.extend_from_slice(prompt.ids());
                        ctx
                    } else {
                        vec![SOT]
                    };
                    items.push(AsrItem {
                        input: self.input(i),
                        ctx,
                        tokens: texts[b].clone(),
                    });
                }
                Ok(Batch::Asr { items, prefix: false })
            }
            Mode::Kws => {
                let mut items = Vec::with_capacity(idx.len());
                for (b, &i) in idx.iter().enumerate() {
                    let set = promptgen::sample_training_keywords(&texts, b, vocab, rng)?;
                    items.push(KwsItem {
                        input: self.input(i),
                        keywords: set.token_lists(),
                        labels: set
                            .keywords()
                            .iter()
                            .map(|k| if k.is_positive() { 1.0 } else { 0.0 })
                            .collect(),
                    });
                }
                Ok(Batch::Kws(items))
            }
            Mode::Ft | Mode::Pt => {
                let mut items = Vec::with_capacity(idx.len());
                for (b, &i) in idx.iter().enumerate() {
                    let set = promptgen::sample_training_keywords(&texts, b, vocab, rng)?;
                    let prompt: PromptTokens = promptgen::assemble_prompt(&set);
                    items.push(AsrItem {
                        input: self.input(i),
                        ctx: prompt.ids().to_vec(),
                        tokens: texts[b].clone(),
                    });
                }
                Ok(Batch::Asr {
                    items,
                    prefix: mode == Mode::Pt,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// `(step, loss)` for every step, starting at 1.
    pub losses: Vec<(usize, f64)>,
    pub trainable_params: usize,
    /// Batch stream position after the last step.
    pub rng: RngState,
}

impl TrainOutcome {
    /// `step<TAB>loss` lines.
    pub fn metrics_log(&self) -> String {
        let mut s = String::new();
        for (step, loss) in &self.losses {
            let _ = writeln!(s, "{step}\t{loss}");
        }
        s
    }
}

/// Runs `cfg.steps` Adam updates of the groups trainable in `cfg.mode`.
/// Frozen groups are checked bit-identical afterwards.
pub fn train_run(cfg: &TrainConfig, data: &Dataset, vocab: &Vocab, init: Model) -> Result<TrainOutcome> {
    train_run_with(cfg, data, vocab, init, |_, _| {})
}

/// As [`train_run`], calling `on_step(step, loss)` after every update.
pub fn train_run_with(
    cfg: &TrainConfig,
    data: &Dataset,
    vocab: &Vocab,
    init: Model,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.mode;
    let mut model = init;
    for need in mode.requires() {
        if !model.lineage.iter().any(|m| m == need.name()) {
            return Err(Error::Train(format!(
                "{mode} training needs a model already trained in {need} mode (lineage: [{}])",
                model.lineage.join(", ")
            )));
        }
    }
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Mismatch(format!(
            "model vocabulary size {} differs from tokenizer size {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::Train(format!(
            "dataset has {} utterances, batch_size is {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if mode == Mode::Pt {
        match model.params.prefix() {
            Some(q) if q.rows() == cfg.prefix_len => {}
            _ => {
                let q = model.init_prefix(cfg.prefix_len, &mut rng::stream(cfg.seed, "train/prefix"))?;
                model.params.set_prefix(q);
            }
        }
    }
    let mask = mode.mask();
    let frozen: Vec<(Group, String)> = Group::ALL
        .iter()
        .filter(|g| !mask.trainable(**g))
        .map(|g| (*g, model.params.hash(*g)))
        .collect();

    let prepared = Prepared::new(data, vocab, &model, mode != Mode::BaseAsr)?;
    let mut rng = rng::stream(cfg.seed, &format!("train/{mode}"));
    let mut adam = Adam::new(&model, mask, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let idx = index::sample(&mut rng, data.len(), cfg.batch_size).into_vec();
        let batch = prepared.batch(mode, cfg, &idx, vocab, &mut rng)?;
        let (loss, grads) = batch_loss_and_grad(&model, mask, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.step(&mut model, &grads);
        losses.push((step, loss));
        on_step(step, loss);
    }
    for (g, before) in frozen {
        if model.params.hash(g) != before {
            return Err(Error::Train(format!("frozen group {g} changed during {mode} training")));
        }
    }
    model.lineage.push(mode.name().to_string());
    let trainable_params = model.params.trainable_count(mask);
    Ok(TrainOutcome {
        model,
        losses,
        trainable_params,
        rng: RngState::capture(&rng),
    })
}

/// Exponential moving average of a loss curve.
pub fn ema(losses: &[(usize, f64)], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for (_, l) in losses {
        let next = match acc {
            None => *l,
            Some(a) => alpha * l + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_corpus, Corpus, SynthSpec};

    fn corpus() -> Corpus {
        generate_corpus(&SynthSpec {
            n_common: 30,
            n_jargon: 6,
            n_mels: 8,
            n_train: 50,
            n_dev: 4,
            n_test: 8,
            vocab_size: 80,
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn model(c: &Corpus) -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: c.vocab.len(),
            n_mels: 8,
            ..ModelConfig::default()
        };
        Model::new(cfg, &mut rng::stream(2, "model")).unwrap()
    }

    fn quick(mode: Mode, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..TrainConfig::preset(mode)
        }
    }

    #[test]
    fn masks_follow_modes() {
        assert!(Mode::Pt.mask().trainable(Group::Prefix));
        assert!(!Mode::Pt.mask().trainable(Group::Decoder));
        assert!(Mode::Ft.mask().trainable(Group::Decoder));
        assert!(!Mode::Ft.mask().trainable(Group::Encoder));
        assert!(Mode::Kws.mask().trainable(Group::Kws));
        assert!(Mode::BaseAsr.mask().trainable(Group::Encoder));
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..quick(Mode::Ft, 1) }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..quick(Mode::Ft, 1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..quick(Mode::Pt, 1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..quick(Mode::BaseAsr, 1) }.validate().is_ok());
    }

    #[test]
    fn initial_losses_are_at_chance() {
        let c = corpus();
        let m = model(&c);
        let prep = Prepared::new(&c.train, &c.vocab, &m, false).unwrap();
        let cfg = quick(Mode::BaseAsr, 1);
        let mut rng = rng::stream(0, "b");
        let batch = prep.batch(Mode::BaseAsr, &cfg, &[0, 1, 2, 3], &c.vocab, &mut rng).unwrap();
        let l = batch_loss(&m, &batch).unwrap();
        assert!((l - (c.vocab.len() as f64).ln()).abs() < 0.3, "{l}");

        let batch = prep.batch(Mode::Kws, &cfg, &[0, 1, 2, 3], &c.vocab, &mut rng).unwrap();
        let l = batch_loss(&m, &batch).unwrap();
        assert!((l - 2f64.ln()).abs() < 0.1, "{l}");
    }

    #[test]
    fn identical_examples_average_to_single_loss() {
        let c = corpus();
        let m = model(&c);
        let x = &c.train.utterances[0].features;
        let item = AsrItem {
            input: Input::Frames(x),
            ctx: vec![SOT],
            tokens: c.vocab.tokenize(&c.train.utterances[0].transcript).unwrap(),
        };
        let one = batch_loss(&m, &Batch::Asr { items: vec![item.clone()], prefix: false }).unwrap();
        let three = batch_loss(&m, &Batch::Asr { items: vec![item; 3], prefix: false }).unwrap();
        assert!((one - three).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let c = corpus();
        let m = model(&c);
        assert!(batch_loss(&m, &Batch::Asr { items: vec![], prefix: false }).is_err());
        assert!(batch_loss(&m, &Batch::Kws(vec![])).is_err());
    }

    #[test]
    fn perfect_scorer_has_vanishing_bce() {
        let mut t = crate::numcore::Tape::new();
        let z = t.leaf(Tensor::matrix(3, 1, vec![40.0, -40.0, 40.0]).unwrap(), false);
        let l = t.bce_with_logits(z, &[1.0, 0.0, 1.0]).unwrap();
        assert!(t.value(l).data()[0] < 1e-15);
    }

    #[test]
    fn lineage_is_enforced() {
        let c = corpus();
        let err = train_run(&quick(Mode::Pt, 1), &c.train, &c.vocab, model(&c)).unwrap_err();
        assert!(err.to_string().contains("base-asr"));
        let err = train_run(&quick(Mode::Kws, 1), &c.train, &c.vocab, model(&c)).unwrap_err();
        assert_eq!(err.class(), "train");
    }

    #[test]
    fn full_pipeline_freezes_and_is_deterministic() {
        let c = corpus();
        let base = train_run(&quick(Mode::BaseAsr, 30), &c.train, &c.vocab, model(&c)).unwrap();
        let base2 = train_run(&quick(Mode::BaseAsr, 30), &c.train, &c.vocab, model(&c)).unwrap();
        assert_eq!(base, base2);
        assert_eq!(base.model.params.hash(Group::Kws), model(&c).params.hash(Group::Kws));

        let kws = train_run(&quick(Mode::Kws, 20), &c.train, &c.vocab, base.model.clone()).unwrap();
        for g in [Group::Encoder, Group::Decoder] {
            assert_eq!(kws.model.params.hash(g), base.model.params.hash(g));
        }
        assert_ne!(kws.model.params.hash(Group::Kws), base.model.params.hash(Group::Kws));

        let pt = train_run(&quick(Mode::Pt, 10), &c.train, &c.vocab, kws.model.clone()).unwrap();
        for g in [Group::Encoder, Group::Decoder, Group::Kws] {
            assert_eq!(pt.model.params.hash(g), kws.model.params.hash(g));
        }
        assert_eq!(pt.trainable_params, 12 * 16);
        let q0 = kws.model.init_prefix(12, &mut rng::stream(0, "train/prefix")).unwrap();
        assert_ne!(pt.model.params.prefix().unwrap(), &q0);

        let ft = train_run(&quick(Mode::Ft, 10), &c.train, &c.vocab, kws.model.clone()).unwrap();
        assert_ne!(ft.model.params.hash(Group::Decoder), kws.model.params.hash(Group::Decoder));
        for g in [Group::Encoder, Group::Kws, Group::Prefix] {
            assert_eq!(ft.model.params.hash(g), kws.model.params.hash(g));
        }
        assert_eq!(pt.model.lineage, ["base-asr", "kws", "pt"]);
        assert_eq!(pt.metrics_log().lines().count(), 10);
    }

    #[test]
    fn loss_falls_over_two_hundred_steps() {
        let c = corpus();
        let base = train_run(&quick(Mode::BaseAsr, 200), &c.train, &c.vocab, model(&c)).unwrap();
        let mean = |s: &[(usize, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&base.losses[..20]), mean(&base.losses[180..]));
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let c = corpus();
        let mut m = model(&c);
        let i = m.params.decoder.position("out.b").unwrap();
        m.params.decoder.tensor_mut(i).data_mut()[7] = f64::NAN;
        let err = train_run(&quick(Mode::BaseAsr, 3), &c.train, &c.vocab, m).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1 }), "{err}");
    }

    #[test]
    fn ema_smooths() {
        let e = ema(&[(1, 4.0), (2, 2.0), (3, 2.0)], 0.5);
        assert_eq!(e, vec![4.0, 3.0, 2.5]);
    }
}
