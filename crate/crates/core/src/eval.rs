//! Linear probes over frozen embeddings and ablation comparison reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem, NEUTRAL};
use crate::error::{Error, Result};
use crate::pipeline::{embed_items, teacher_forced_errors, Ablation, CspcModel};
use crate::sdm::EmbeddingRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    EmotionLabel,
    SpeakerLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub heldout_fraction: f64,
    pub seed: u64,
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.3,
            seed: 13,
            l2: 1e-3,
            iterations: 300,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub embedding_role: EmbeddingRole,
    pub target: ProbeTarget,
    pub accuracy: f64,
    pub chance_level: f64,
    pub n_eval: usize,
    /// Per input row: whether it was held out, and the predicted class.
    pub heldout: Vec<bool>,
    pub predicted: Vec<usize>,
}

impl ProbeResult {
    /// Correctness of each held-out row, in input order.
    pub fn heldout_correct(&self, labels: &[usize]) -> Vec<bool> {
        self.heldout
            .iter()
            .zip(&self.predicted)
            .zip(labels)
            .filter(|((h, _), _)| **h)
            .map(|((_, p), l)| p == l)
            .collect()
    }
}

/// Rows with identical features and label share one group, so duplicated
/// data neither changes the split nor the fit.
fn group_rows(x: &[Vec<f32>], labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut index: HashMap<(Vec<u32>, usize), usize> = HashMap::new();
    let mut first = Vec::new();
    let mut group_of = Vec::with_capacity(x.len());
    for (i, (row, &label)) in x.iter().zip(labels).enumerate() {
        let key = (row.iter().map(|v| v.to_bits()).collect(), label);
        let next = first.len();
        let g = *index.entry(key).or_insert(next);
        if g == next {
            first.push(i);
        }
        group_of.push(g);
    }
    (first, group_of)
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardized features, with per-row weights.
struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    fn fit(x: &[&[f32]], y: &[usize], w: &[f64], n_classes: usize, opts: &ProbeOptions) -> Self {
        let d = x[0].len();
        let total: f64 = w.iter().sum();
        let mut mean = vec![0f64; d];
        for (row, wi) in x.iter().zip(w) {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += wi * *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut scale = vec![0f64; d];
        for (row, wi) in x.iter().zip(w) {
            for ((s, v), m) in scale.iter_mut().zip(*row).zip(&mean) {
                *s += wi * (*v as f64 - m).powi(2);
            }
        }
        scale.iter_mut().for_each(|s| {
            *s = if *s > 0.0 {
                1.0 / (*s / total).sqrt()
            } else {
                0.0
            }
        });
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (*v as f64 - m) * s)
                    .collect()
            })
            .collect();
        let mut weights = vec![vec![0f64; d]; n_classes];
        let mut bias = vec![0f64; n_classes];
        for _ in 0..opts.iterations {
            let mut gw = vec![vec![0f64; d]; n_classes];
            let mut gb = vec![0f64; n_classes];
            for ((row, &label), wi) in z.iter().zip(y).zip(w) {
                let p = softmax(&logits(&weights, &bias, row));
                for k in 0..n_classes {
                    let err = wi * (p[k] - if k == label { 1.0 } else { 0.0 }) / total;
                    gb[k] += err;
                    for (g, v) in gw[k].iter_mut().zip(row) {
                        *g += err * v;
                    }
                }
            }
            for k in 0..n_classes {
                bias[k] -= opts.learning_rate * gb[k];
                for (wk, g) in weights[k].iter_mut().zip(&gw[k]) {
                    *wk -= opts.learning_rate * (g + opts.l2 * *wk);
                }
            }
        }
        Self {
            mean,
            scale,
            weights,
            bias,
        }
    }

    fn predict(&self, row: &[f32]) -> usize {
        let z: Vec<f64> = row
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (*v as f64 - m) * s)
            .collect();
        let l = logits(&self.weights, &self.bias, &z);
        // first maximum wins
        let mut best = 0;
        for k in 1..l.len() {
            if l[k] > l[best] {
                best = k;
            }
        }
        best
    }
}

fn logits(weights: &[Vec<f64>], bias: &[f64], row: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(bias)
        .map(|(w, b)| b + w.iter().zip(row).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Fits a linear classifier on a stratified train split and reports
/// held-out accuracy. Label values index classes `0..n_classes`.
pub fn train_probe(
    embeddings: &[Vec<f32>],
    labels: &[usize],
    n_classes: usize,
    role: EmbeddingRole,
    target: ProbeTarget,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::DegenerateProbe(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|r| r.len() != dim) {
        return Err(Error::DegenerateProbe("ragged embedding rows".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidClassLabel {
            label: bad,
            n_classes,
        });
    }
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::DegenerateProbe(
            "labels contain a single class".into(),
        ));
    }
    if embeddings.len() < 4 * n_classes {
        return Err(Error::DegenerateProbe(format!(
            "{} rows for {n_classes} classes, need at least {}",
            embeddings.len(),
            4 * n_classes
        )));
    }
    if !(opts.heldout_fraction > 0.0 && opts.heldout_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "heldout_fraction must be in (0, 1)".into(),
        ));
    }

    let (first, group_of) = group_rows(embeddings, labels);
    let mut multiplicity = vec![0f64; first.len()];
    group_of.iter().for_each(|&g| multiplicity[g] += 1.0);

    // stratified split over groups, seeded per class
    let mut heldout_group = vec![false; first.len()];
    for &class in &present {
        let mut groups: Vec<usize> = (0..first.len())
            .filter(|&g| labels[first[g]] == class)
            .collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ (class as u64).wrapping_mul(0x9E37_79B9));
        groups.shuffle(&mut rng);
        // a class seen once stays in training
        let n_out = if groups.len() < 2 {
            0
        } else {
            ((groups.len() as f64 * opts.heldout_fraction).round() as usize)
                .clamp(1, groups.len() - 1)
        };
        for &g in groups.iter().take(n_out) {
            heldout_group[g] = true;
        }
    }

    let train: Vec<usize> = (0..first.len()).filter(|&g| !heldout_group[g]).collect();
    if train.is_empty() {
        return Err(Error::DegenerateProbe("empty training split".into()));
    }
    let x: Vec<&[f32]> = train
        .iter()
        .map(|&g| embeddings[first[g]].as_slice())
        .collect();
    let y: Vec<usize> = train.iter().map(|&g| labels[first[g]]).collect();
    let w: Vec<f64> = train.iter().map(|&g| multiplicity[g]).collect();
    let probe = LinearProbe::fit(&x, &y, &w, n_classes, opts);

    let group_pred: Vec<usize> = first
        .iter()
        .map(|&i| probe.predict(&embeddings[i]))
        .collect();
    let predicted: Vec<usize> = group_of.iter().map(|&g| group_pred[g]).collect();
    let heldout: Vec<bool> = group_of.iter().map(|&g| heldout_group[g]).collect();
    let n_eval = heldout.iter().filter(|&&h| h).count();
    let correct = heldout
        .iter()
        .zip(&predicted)
        .zip(labels)
        .filter(|((h, p), l)| **h && p == l)
        .count();
    Ok(ProbeResult {
        embedding_role: role,
        target,
        accuracy: correct as f64 / n_eval as f64,
        chance_level: 1.0 / n_classes as f64,
        n_eval,
        heldout,
        predicted,
    })
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// One-sided binomial tail `P(X >= successes)` for `X ~ Bin(trials, p)`.
pub fn binomial_upper_tail(successes: usize, trials: usize, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let ln_n = ln_factorial(trials);
    let tail: f64 = (successes..=trials)
        .map(|k| {
            let ln_c = ln_n - ln_factorial(k) - ln_factorial(trials - k);
            (ln_c + k as f64 * p.ln() + (trials - k) as f64 * (1.0 - p).ln()).exp()
        })
        .sum();
    tail.min(1.0)
}

/// Sign test of per-item outcomes against a success rate `chance`.
pub fn sign_test(outcomes: &[bool], chance: f64) -> f64 {
    let k = outcomes.iter().filter(|&&o| o).count();
    binomial_upper_tail(k, outcomes.len(), chance)
}

/// Paired comparison: p-value that `better` wins more often than not.
/// Ties are dropped.
pub fn paired_sign_test(better: &[f64], worse: &[f64]) -> f64 {
    let wins: Vec<bool> = better
        .iter()
        .zip(worse)
        .filter(|(a, b)| a != b)
        .map(|(a, b)| a < b)
        .collect();
    sign_test(&wins, 0.5)
}

/// A model variant entering a report.
pub struct Variant<'a> {
    pub label: String,
    pub ablation: Ablation,
    pub model: &'a CspcModel,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub probe: ProbeOptions,
    /// Speaker whose emotional items measure reconstruction error.
    pub source_speaker: usize,
    pub batch_size: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            probe: ProbeOptions::default(),
            source_speaker: 0,
            batch_size: 16,
        }
    }
}

pub const PROBE_COLUMNS: [(&str, EmbeddingRole, ProbeTarget); 4] = [
    (
        "emo_from_e",
        EmbeddingRole::Emotion,
        ProbeTarget::EmotionLabel,
    ),
    (
        "spk_from_e",
        EmbeddingRole::Emotion,
        ProbeTarget::SpeakerLabel,
    ),
    (
        "emo_from_pc",
        EmbeddingRole::ProsodyCompensation,
        ProbeTarget::EmotionLabel,
    ),
    (
        "spk_from_pc",
        EmbeddingRole::ProsodyCompensation,
        ProbeTarget::SpeakerLabel,
    ),
];

pub const TABLE_HEADER: &str = "variant\temo_from_e\tspk_from_e\temo_from_pc\tspk_from_pc\temo_from_pc_sign_p\tmel_error_source\tmel_error_target\tmel_delta_vs_full\tmel_delta_sign_p\tn_probe_eval\tn_mel_items";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub probes: BTreeMap<String, ProbeResult>,
    pub emo_from_pc_sign_p: Option<f64>,
    pub mel_error_source: f64,
    pub mel_error_target: Option<f64>,
    pub mel_delta_vs_full: Option<f64>,
    pub mel_delta_sign_p: Option<f64>,
    pub n_mel_items: usize,
    pub source_item_errors: Vec<f64>,
    pub target_item_errors: Vec<f64>,
}

impl VariantRow {
    pub fn accuracy(&self, column: &str) -> Option<f64> {
        self.probes.get(column).map(|p| p.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<VariantRow>,
    pub item_ids: Vec<String>,
    pub emotion_labels: Vec<usize>,
    pub speaker_labels: Vec<usize>,
    pub source_item_ids: Vec<String>,
    pub target_item_ids: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Probes every embedding of every variant and compares reconstruction
/// error on held-out emotional items. Variants must share a training
/// corpus.
pub fn ablation_report(
    variants: &[Variant<'_>],
    corpus: &Corpus,
    opts: &ReportOptions,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::MismatchedEvaluation("no variants given".into()));
    }
    let fp = &variants[0].corpus_fingerprint;
    if let Some(v) = variants.iter().find(|v| &v.corpus_fingerprint != fp) {
        return Err(Error::MismatchedEvaluation(format!(
            "variant {} was trained on corpus {}, {} on {}",
            v.label, v.corpus_fingerprint, variants[0].label, fp
        )));
    }
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let emotion_labels: Vec<usize> = items.iter().map(|i| i.emotion).collect();
    let speaker_labels: Vec<usize> = items.iter().map(|i| i.speaker).collect();
    let source: Vec<&CorpusItem> = items
        .iter()
        .copied()
        .filter(|i| i.speaker == opts.source_speaker && i.emotion != NEUTRAL)
        .collect();
    let target: Vec<&CorpusItem> = items
        .iter()
        .copied()
        .filter(|i| i.speaker != opts.source_speaker && i.emotion != NEUTRAL)
        .collect();
    if source.is_empty() {
        return Err(Error::MismatchedEvaluation(format!(
            "evaluation corpus has no emotional items for speaker {}",
            opts.source_speaker
        )));
    }

    let mut rows = Vec::new();
    for v in variants {
        let emb = embed_items(v.model, &items, v.ablation, opts.batch_size)?;
        let mut probes = BTreeMap::new();
        for (column, role, target_kind) in PROBE_COLUMNS {
            let matrix = match role {
                EmbeddingRole::Emotion => emb.emotion.as_ref(),
                _ => emb.compensation.as_ref(),
            };
            let Some(matrix) = matrix else { continue };
            let (labels, n_classes) = match target_kind {
                ProbeTarget::EmotionLabel => (&emotion_labels, corpus.n_emotions()),
                ProbeTarget::SpeakerLabel => (&speaker_labels, corpus.n_speakers),
            };
            let result = train_probe(matrix, labels, n_classes, role, target_kind, &opts.probe)?;
            probes.insert(column.to_string(), result);
        }
        let emo_from_pc_sign_p = probes
            .get("emo_from_pc")
            .map(|p| sign_test(&p.heldout_correct(&emotion_labels), p.chance_level));
        let source_item_errors =
            teacher_forced_errors(v.model, &source, v.ablation, opts.batch_size)?;
        let target_item_errors = if target.is_empty() {
            Vec::new()
        } else {
            teacher_forced_errors(v.model, &target, v.ablation, opts.batch_size)?
        };
        rows.push(VariantRow {
            variant: v.label.clone(),
            probes,
            emo_from_pc_sign_p,
            mel_error_source: mean(&source_item_errors),
            mel_error_target: (!target_item_errors.is_empty()).then(|| mean(&target_item_errors)),
            mel_delta_vs_full: None,
            mel_delta_sign_p: None,
            n_mel_items: source_item_errors.len(),
            source_item_errors,
            target_item_errors,
        });
    }
    if let Some(full) = rows.iter().position(|r| r.variant == "full") {
        let base = rows[full].clone();
        for row in rows.iter_mut().filter(|r| r.variant != "full") {
            row.mel_delta_vs_full = Some(row.mel_error_source - base.mel_error_source);
            row.mel_delta_sign_p = Some(paired_sign_test(
                &base.source_item_errors,
                &row.source_item_errors,
            ));
        }
    }
    Ok(AblationReport {
        rows,
        item_ids: items.iter().map(|i| i.id.clone()).collect(),
        emotion_labels,
        speaker_labels,
        source_item_ids: source.iter().map(|i| i.id.clone()).collect(),
        target_item_ids: target.iter().map(|i| i.id.clone()).collect(),
    })
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table_tsv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let n_probe = r.probes.values().map(|p| p.n_eval).next();
            let cols: Vec<String> = vec![
                r.variant.clone(),
                fmt_opt(r.accuracy("emo_from_e")),
                fmt_opt(r.accuracy("spk_from_e")),
                fmt_opt(r.accuracy("emo_from_pc")),
                fmt_opt(r.accuracy("spk_from_pc")),
                fmt_opt(r.emo_from_pc_sign_p),
                fmt_opt(Some(r.mel_error_source)),
                fmt_opt(r.mel_error_target),
                fmt_opt(r.mel_delta_vs_full),
                fmt_opt(r.mel_delta_sign_p),
                n_probe.map_or("NA".into(), |n| n.to_string()),
                r.n_mel_items.to_string(),
            ];
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        out
    }

    /// One line per probe prediction and per item reconstruction error.
    pub fn predictions_tsv(&self) -> String {
        let mut out = String::from("variant\tmeasure\titem_id\tsplit\tlabel\tvalue\n");
        for r in &self.rows {
            for (column, p) in &r.probes {
                let labels = match p.target {
                    ProbeTarget::EmotionLabel => &self.emotion_labels,
                    ProbeTarget::SpeakerLabel => &self.speaker_labels,
                };
                for (i, id) in self.item_ids.iter().enumerate() {
                    let split = if p.heldout[i] { "heldout" } else { "train" };
                    let _ = writeln!(
                        out,
                        "{}\t{column}\t{id}\t{split}\t{}\t{}",
                        r.variant, labels[i], p.predicted[i]
                    );
                }
            }
            for (ids, errors, measure) in [
                (
                    &self.source_item_ids,
                    &r.source_item_errors,
                    "mel_error_source",
                ),
                (
                    &self.target_item_ids,
                    &r.target_item_errors,
                    "mel_error_target",
                ),
            ] {
                for (id, e) in ids.iter().zip(errors) {
                    let _ = writeln!(out, "{}\t{measure}\t{id}\theldout\tNA\t{e:?}", r.variant);
                }
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.tsv", self.table_tsv()),
            ("predictions.tsv", self.predictions_tsv()),
            ("probes.svg", self.probe_plot()),
            ("mel_error.svg", self.mel_plot()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn probe_plot(&self) -> String {
        let series: Vec<(String, Vec<Option<f64>>)> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.variant.clone(),
                    PROBE_COLUMNS
                        .iter()
                        .map(|(c, _, _)| r.accuracy(c))
                        .collect(),
                )
            })
            .collect();
        let groups: Vec<&str> = PROBE_COLUMNS.iter().map(|(c, _, _)| *c).collect();
        bar_chart("probe accuracy (held-out)", &groups, &series, Some(1.0))
    }

    pub fn mel_plot(&self) -> String {
        let series: Vec<(String, Vec<Option<f64>>)> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.variant.clone(),
                    vec![Some(r.mel_error_source), r.mel_error_target],
                )
            })
            .collect();
        bar_chart(
            "teacher-forced mel error (emotional items)",
            &["source speaker", "target speaker"],
            &series,
            None,
        )
    }
}

/// Recomputes the table numbers from a predictions file.
pub fn rederive_from_predictions(predictions: &str) -> Result<BTreeMap<(String, String), f64>> {
    let mut counts: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    let mut sums: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for line in predictions.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::InvalidManifest(format!(
                "bad predictions line {line:?}"
            )));
        }
        let key = (f[0].to_string(), f[1].to_string());
        if f[1].starts_with("mel_error") {
            let v: f64 = f[5]
                .parse()
                .map_err(|_| Error::InvalidManifest(format!("bad value {:?}", f[5])))?;
            sums.entry(key).or_default().push(v);
        } else if f[3] == "heldout" {
            let c = counts.entry(key).or_insert((0, 0));
            c.0 += (f[4] == f[5]) as usize;
            c.1 += 1;
        }
    }
    let mut out: BTreeMap<(String, String), f64> = counts
        .into_iter()
        .map(|(k, (c, n))| (k, c as f64 / n as f64))
        .collect();
    out.extend(sums.into_iter().map(|(k, v)| (k, mean(&v))));
    Ok(out)
}

const PALETTE: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

fn bar_chart(
    title: &str,
    groups: &[&str],
    series: &[(String, Vec<Option<f64>>)],
    y_max: Option<f64>,
) -> String {
    let (w, h, left, bottom, top) = (720.0, 360.0, 60.0, 60.0, 40.0);
    let plot_h = h - bottom - top;
    let max = y_max.unwrap_or_else(|| {
        series
            .iter()
            .flat_map(|(_, v)| v.iter().flatten())
            .cloned()
            .fold(0.0, f64::max)
            * 1.1
    });
    let max = if max > 0.0 { max } else { 1.0 };
    let group_w = (w - left - 20.0) / groups.len() as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        w / 2.0,
        h - bottom,
        h - bottom,
        w - 20.0,
        h - bottom
    );
    for tick in 0..=4 {
        let v = max * tick as f64 / 4.0;
        let y = h - bottom - plot_h * tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\">{v:.3}</text>",
            left - 5.0
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            if let Some(Some(v)) = values.get(gi) {
                let bh = plot_h * (v / max).clamp(0.0, 1.0);
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
                    gx + si as f64 * bar_w,
                    h - bottom - bh,
                    PALETTE[si % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{g}</text>",
            gx + group_w * 0.4,
            h - bottom + 15.0
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x = left + si as f64 * 110.0;
        let _ = writeln!(
            svg,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{name}</text>",
            h - 25.0,
            PALETTE[si % PALETTE.len()],
            x + 14.0,
            h - 16.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
