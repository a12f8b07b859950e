//! Word error rate, keyword F1, evaluation conditions and the prefix-length
//! ablation.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Model, DEFAULT_KWS_THRESHOLD};
use crate::promptgen::{self, assemble_prompt, KeywordSet, PromptTokens};
use crate::rng;
use crate::synth::Dataset;
use crate::text::{self, TfidfTable, TokenId, Vocab};
use crate::train::{train_run, Mode, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// NaN when no reference words were scored.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }

    pub fn insertion_rate(&self) -> f64 {
        self.insertions as f64 / self.ref_words as f64
    }

    pub fn add(&mut self, o: &WerBreakdown) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Minimal word alignment counts; among equal-cost alignments the one with
/// the most substitutions wins.
pub fn edit_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> WerBreakdown {
    #[derive(Clone, Copy)]
    struct Cell {
        cost: usize,
        s: usize,
        d: usize,
        i: usize,
    }
    let better = |a: Cell, b: Cell| a.cost < b.cost || (a.cost == b.cost && a.s > b.s);
    let (n, m) = (reference.len(), hypothesis.len());
    let mut prev: Vec<Cell> = (0..=m).map(|j| Cell { cost: j, s: 0, d: 0, i: j }).collect();
    let mut cur = prev.clone();
    for r in 1..=n {
        cur[0] = Cell {
            cost: r,
            s: 0,
            d: r,
            i: 0,
        };
        for h in 1..=m {
            let same = reference[r - 1].as_ref() == hypothesis[h - 1].as_ref();
            let diag = prev[h - 1];
            let mut best = Cell {
                cost: diag.cost + usize::from(!same),
                s: diag.s + usize::from(!same),
                ..diag
            };
            let up = prev[h];
            let del = Cell {
                cost: up.cost + 1,
                d: up.d + 1,
                ..up
            };
            if better(del, best) {
                best = del;
            }
            let left = cur[h - 1];
            let ins = Cell {
                cost: left.cost + 1,
                i: left.i + 1,
                ..left
            };
            if better(ins, best) {
                best = ins;
            }
            cur[h] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let c = prev[m];
    WerBreakdown {
        substitutions: c.s,
        deletions: c.d,
        insertions: c.i,
        ref_words: n,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EditOp {
    Match { word: String },
    Sub { reference: String, hypothesis: String },
    Del { reference: String },
    Ins { hypothesis: String },
}

/// One minimal alignment, with the tie-breaking of [`edit_counts`]. Keeps the
/// full cost table, so use `edit_counts` when only the totals matter.
pub fn align_words<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, -substitutions) so the lexicographic minimum matches `edit_counts`.
    let mut t = vec![vec![(0usize, 0isize); m + 1]; n + 1];
    for (j, c) in t[0].iter_mut().enumerate() {
        *c = (j, 0);
    }
    for r in 1..=n {
        t[r][0] = (r, 0);
        for h in 1..=m {
            let same = reference[r - 1].as_ref() == hypothesis[h - 1].as_ref();
            let (dc, ds) = t[r - 1][h - 1];
            let diag = (dc + usize::from(!same), ds - isize::from(!same));
            let del = (t[r - 1][h].0 + 1, t[r - 1][h].1);
            let ins = (t[r][h - 1].0 + 1, t[r][h - 1].1);
            t[r][h] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut r, mut h) = (n, m);
    while r > 0 || h > 0 {
        if r > 0 && h > 0 {
            let same = reference[r - 1].as_ref() == hypothesis[h - 1].as_ref();
            let (dc, ds) = t[r - 1][h - 1];
            if t[r][h] == (dc + usize::from(!same), ds - isize::from(!same)) {
                ops.push(if same {
                    EditOp::Match { word: reference[r - 1].as_ref().to_string() }
                } else {
                    EditOp::Sub {
                        reference: reference[r - 1].as_ref().to_string(),
                        hypothesis: hypothesis[h - 1].as_ref().to_string(),
                    }
                });
                r -= 1;
                h -= 1;
                continue;
            }
        }
        if r > 0 && t[r][h] == (t[r - 1][h].0 + 1, t[r - 1][h].1) {
            ops.push(EditOp::Del { reference: reference[r - 1].as_ref().to_string() });
            r -= 1;
        } else {
            ops.push(EditOp::Ins { hypothesis: hypothesis[h - 1].as_ref().to_string() });
            h -= 1;
        }
    }
    ops.reverse();
    ops
}

/// WER of one normalized hypothesis against one reference.
pub fn compute_wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r = text::words(reference);
    if r.is_empty() {
        return Err(Error::Eval("reference is empty, WER is undefined".into()));
    }
    Ok(edit_counts(&r, &text::words(hypothesis)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordF1 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl KeywordF1 {
    /// `2TP / (2TP + FP + FN)`; 1 when there was nothing to find or flag.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, o: &KeywordF1) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Whole-word sequence containment on normalized text.
pub fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

fn utterance_f1(reference: &str, hypothesis: &str, set: &KeywordSet) -> KeywordF1 {
    let (r, h) = (text::words(reference), text::words(hypothesis));
    let mut out = KeywordF1::default();
    for k in set.keywords() {
        let kw = text::words(&k.surface);
        let in_hyp = contains_phrase(&h, &kw);
        if k.is_positive() {
            if in_hyp {
                out.tp += 1;
            } else {
                out.fn_ += 1;
            }
        } else if in_hyp && !contains_phrase(&r, &kw) {
            out.fp += 1;
        }
    }
    out
}

/// Per keyword type per utterance: a positive found in the hypothesis is a
/// TP (else FN); a negative found in the hypothesis but not the reference
/// is a FP.
pub fn keyword_f1<S: AsRef<str>>(references: &[S], hypotheses: &[S], sets: &[KeywordSet]) -> Result<KeywordF1> {
    if references.len() != hypotheses.len() || references.len() != sets.len() {
        return Err(Error::Eval(format!(
            "{} references, {} hypotheses, {} keyword sets",
            references.len(),
            hypotheses.len(),
            sets.len()
        )));
    }
    let mut total = KeywordF1::default();
    for ((r, h), k) in references.iter().zip(hypotheses).zip(sets) {
        total.add(&utterance_f1(r.as_ref(), h.as_ref(), k));
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Baseline,
    BaselinePrompt,
    Ft,
    Pt,
    FtOracle,
    PtOracle,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Baseline,
        Condition::BaselinePrompt,
        Condition::Ft,
        Condition::Pt,
        Condition::FtOracle,
        Condition::PtOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::BaselinePrompt => "baseline+prompt",
            Condition::Ft => "ft",
            Condition::Pt => "pt",
            Condition::FtOracle => "ft-oracle",
            Condition::PtOracle => "pt-oracle",
        }
    }

    /// Which trained model the condition decodes with.
    pub fn model_mode(self) -> Mode {
        match self {
            Condition::Baseline | Condition::BaselinePrompt => Mode::BaseAsr,
            Condition::Ft | Condition::FtOracle => Mode::Ft,
            Condition::Pt | Condition::PtOracle => Mode::Pt,
        }
    }

    pub fn uses_kws(self) -> bool {
        matches!(self, Condition::BaselinePrompt | Condition::Ft | Condition::Pt)
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, Condition::FtOracle | Condition::PtOracle)
    }

    pub fn uses_prefix(self) -> bool {
        self.model_mode() == Mode::Pt
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Eval(format!("unknown condition {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub kws_threshold: f64,
    pub max_len: usize,
    /// Per-utterance output cap in tokens per input frame; bounds runaway
    /// repetition without truncating any transcript the corpus can produce.
    pub tokens_per_frame: f64,
}

impl EvalConfig {
    pub fn length_cap(&self, frames: usize) -> usize {
        self.max_len.min((self.tokens_per_frame * frames as f64).ceil() as usize)
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            n_positive: 3,
            n_negative: 17,
            kws_threshold: DEFAULT_KWS_THRESHOLD,
            max_len: 64,
            tokens_per_frame: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub condition: Condition,
    pub wer: WerBreakdown,
    pub f1: KeywordF1,
    pub params: usize,
    pub hypotheses: Vec<String>,
    /// Fraction of spotter decisions that match keyword polarity; `None`
    /// when the condition bypasses the spotter.
    pub kws_accuracy: Option<f64>,
}

/// Evaluation keywords for every utterance of `data`, identical across
/// conditions for a given seed.
pub fn eval_keyword_sets(data: &Dataset, vocab: &Vocab, cfg: &EvalConfig) -> Result<Vec<KeywordSet>> {
    let transcripts = data.transcripts();
    let tfidf: TfidfTable = text::tfidf_scores(&transcripts);
    transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = rng::stream(rng::child_seed(cfg.seed, "eval/keywords", i as u64), "eval");
            promptgen::select_eval_keywords(t, &tfidf, &transcripts, vocab, cfg.n_positive, cfg.n_negative, &mut r)
        })
        .collect()
}

/// Transcribes `data` under `condition`. `asr` is the model the condition
/// decodes with; `kws` supplies the spotter.
pub fn evaluate_condition(
    asr: &Model,
    kws: &Model,
    data: &Dataset,
    vocab: &Vocab,
    condition: Condition,
    sets: &[KeywordSet],
    cfg: &EvalConfig,
) -> Result<ConditionReport> {
    if asr.config.vocab_size != vocab.len() || kws.config.vocab_size != vocab.len() {
        return Err(Error::Mismatch("checkpoint vocabulary size differs from the tokenizer".into()));
    }
    if asr.config.d_model != kws.config.d_model {
        return Err(Error::Mismatch("recognizer and spotter widths differ".into()));
    }
    if sets.len() != data.len() {
        return Err(Error::Eval(format!("{} keyword sets for {} utterances", sets.len(), data.len())));
    }
    let need = condition.model_mode().name();
    if asr.lineage.last().map(String::as_str) != Some(need) {
        return Err(Error::Mismatch(format!(
            "{condition} needs a model last trained in {need} mode, got lineage [{}]",
            asr.lineage.join(", ")
        )));
    }
    if condition.uses_kws() && !kws.lineage.iter().any(|m| m == "kws") {
        return Err(Error::Mismatch("spotter checkpoint was never trained in kws mode".into()));
    }
    let mut wer = WerBreakdown::default();
    let mut f1 = KeywordF1::default();
    let mut hypotheses = Vec::with_capacity(data.len());
    let (mut agree, mut decided) = (0usize, 0usize);
    for (u, set) in data.utterances.iter().zip(sets) {
        let prompt: Option<PromptTokens> = if condition == Condition::Baseline {
            None
        } else if condition.is_oracle() {
            Some(assemble_prompt(&set.positives()))
        } else {
            let ks = kws.encode(&u.features)?;
            let pred = kws.kws_detect(&ks, set, cfg.kws_threshold)?;
            for (k, d) in set.keywords().iter().zip(&pred.decisions) {
                agree += usize::from(k.is_positive() == *d);
                decided += 1;
            }
            Some(promptgen::kws_to_prompt(&pred, set)?)
        };
        let enc = asr.encode(&u.features)?;
        let ids = asr.transcribe_greedy(&enc, prompt.as_ref(), condition.uses_prefix(), cfg.length_cap(u.features.n_frames()))?;
        let hyp = vocab.detokenize(&ids);
        wer.add(&edit_counts(&text::words(&u.transcript), &text::words(&hyp)));
        f1.add(&utterance_f1(&u.transcript, &hyp, set));
        hypotheses.push(hyp);
    }
    let params = match condition.model_mode() {
        Mode::Pt => asr.params.prefix.num_params(),
        Mode::Ft => asr.params.decoder.num_params(),
        _ => 0,
    };
    Ok(ConditionReport {
        condition,
        wer,
        f1,
        params,
        hypotheses,
        kws_accuracy: (decided > 0).then(|| agree as f64 / decided as f64),
    })
}

fn find_span(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Whether, at every output position emitting `keyword`'s tokens in
/// `target`, the most-attended prompt row falls inside the keyword's block of
/// `prompt`. `None` when the keyword is missing from either side.
pub fn keyword_attention_aligned(
    rec: &AttentionRecord,
    prompt: &PromptTokens,
    target: &[TokenId],
    keyword: &[TokenId],
) -> Option<bool> {
    let block = find_span(prompt.ids(), keyword)?;
    let emit = find_span(target, keyword)?;
    let rows = block..block + keyword.len();
    Some((emit..emit + keyword.len()).all(|c| rec.argmax_row(c).is_some_and(|r| rows.contains(&r))))
}

pub const CSV_HEADER: &str = "condition,wer,S,D,I,f1,tp,fp,fn,params";

pub fn report_csv(rows: &[ConditionReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{},{:.6},{},{},{},{}",
            r.condition,
            r.wer.wer(),
            r.wer.substitutions,
            r.wer.deletions,
            r.wer.insertions,
            r.f1.f1(),
            r.f1.tp,
            r.f1.fp,
            r.f1.fn_,
            r.params
        );
    }
    s
}

pub fn report_text(rows: &[ConditionReport]) -> String {
    let mut s = format!(
        "{:<16} {:>8} {:>8} {:>10} {:>9}\n",
        "condition", "WER %", "F1 %", "params", "KWS acc"
    );
    for r in rows {
        let acc = r.kws_accuracy.map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a));
        let _ = writeln!(
            s,
            "{:<16} {:>8.2} {:>8.2} {:>10} {:>9}",
            r.condition.name(),
            100.0 * r.wer.wer(),
            100.0 * r.f1.f1(),
            r.params,
            acc
        );
    }
    let find = |c: Condition| rows.iter().find(|r| r.condition == c);
    if let (Some(b), Some(p)) = (find(Condition::Baseline), find(Condition::BaselinePrompt)) {
        let _ = writeln!(
            s,
            "insertion-rate delta (baseline+prompt - baseline): {:+.4}",
            p.wer.insertion_rate() - b.wer.insertion_rate()
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub prefix_len: usize,
    pub wer: f64,
    pub f1: f64,
    pub report: ConditionReport,
}

/// One prefix-tuning run and evaluation per length, each with its own seed
/// derived from `train.seed` and the length. Rows come back in ascending
/// length order.
pub fn ablate_prefix_length(
    kws_model: &Model,
    train_data: &Dataset,
    test_data: &Dataset,
    vocab: &Vocab,
    lengths: &[usize],
    train: &TrainConfig,
    eval: &EvalConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if lengths.is_empty() {
        return Err(Error::Eval("no prefix lengths to ablate".into()));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let sets = eval_keyword_sets(test_data, vocab, eval)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for n in sorted {
        let cfg = TrainConfig {
            mode: Mode::Pt,
            prefix_len: n,
            seed: ablation_seed(train.seed, n),
            ..train.clone()
        };
        let mut init = kws_model.clone();
        init.params.clear_prefix();
        let out = train_run(&cfg, train_data, vocab, init)?;
        let report = evaluate_condition(&out.model, kws_model, test_data, vocab, Condition::Pt, &sets, eval)?;
        let row = AblationRow {
            prefix_len: n,
            wer: report.wer.wer(),
            f1: report.f1.f1(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_seed(seed: u64, prefix_len: usize) -> u64 {
    rng::child_seed(seed, "ablate", prefix_len as u64)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("prefix_len,wer,f1\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.prefix_len, r.wer, r.f1);
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!("{:>10} {:>8} {:>8}\n", "# tokens", "WER %", "F1 %");
    for r in rows {
        let _ = writeln!(s, "{:>10} {:>8.2} {:>8.2}", r.prefix_len, 100.0 * r.wer, 100.0 * r.f1);
    }
    s
}
