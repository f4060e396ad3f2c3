//! Exact-match accuracy, token-level match, the gold-position sweep with the
//! shuffled protocol, logit-level invariance checks, and report files.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{format_baseline_prompt, format_target, QAInstance, Tokenizer};
use crate::error::Error;
use crate::fusion::{
    baseline_generate, fused_forward, generate_greedy_fused, prefill, res_fuse, GenerationResult,
    PassageBatch,
};
use crate::model::Model;
use crate::rng::{derive_seed, Rng};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Prefill + fused cache decoding (order-invariant path).
    Fusion,
    /// Concatenated prompt at global positions (no invariance contract).
    Baseline,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(EvalMode::Fusion),
            "baseline" => Ok(EvalMode::Baseline),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?} (fusion|baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Gold positions to sweep (each must fit every evaluated instance).
    pub positions: Vec<usize>,
    pub shuffle_seed: u64,
    pub max_new: usize,
    /// Evaluate only the first `limit` instances when set.
    pub limit: Option<usize>,
    /// Fixed passage block length for the fusion path.
    pub n: usize,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new < 1 {
            return Err(Error::Config("max_new must be >= 1".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("passage block length n must be >= 2".into()));
        }
        Ok(())
    }
}

/// One evaluated instance under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub prediction: String,
    pub gold_answers: Vec<String>,
    pub em: bool,
    /// Greedy steps under the near-tie threshold during this generation.
    pub near_ties: usize,
    pub hit_max_new: bool,
}

/// Results for one arrangement of the passages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    /// `pos{p}`, `shuffled`, or `stored`.
    pub setting: String,
    pub gold_position: Option<usize>,
    pub evaluated: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub records: Vec<InstanceRecord>,
}

impl SettingResult {
    fn from_records(setting: String, gold_position: Option<usize>, records: Vec<InstanceRecord>) -> Self {
        let evaluated = records.len();
        let correct = records.iter().filter(|r| r.em).count();
        SettingResult {
            setting,
            gold_position,
            evaluated,
            correct,
            accuracy: if evaluated == 0 {
                0.0
            } else {
                correct as f64 / evaluated as f64
            },
            records,
        }
    }
}

/// Full evaluation report. Wall time is kept out of the serialized form so
/// same-seed runs write byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub settings: Vec<SettingResult>,
    /// Fraction of byte-identical predictions between the first-position and
    /// shuffled settings, over instances without near-ties.
    pub tlm: Option<f64>,
    /// Instances excluded from TLM/invariance because a generation logged a
    /// near-tie.
    pub tie_excluded: usize,
    /// Instances skipped (no gold passage, or a swept position that does not
    /// fit).
    pub skipped: usize,
    /// In fusion mode: predictions byte-identical across all swept positions
    /// (near-tie instances excluded). Always true in baseline mode.
    pub invariance_ok: bool,
    pub config: EvalConfig,
    #[serde(skip)]
    pub wall_s: f64,
}

// ---------------------------------------------------------------------------
// Exact match
// ---------------------------------------------------------------------------

/// Normalization for exact match: lowercase, map punctuation to spaces, drop
/// the articles a/an/the, collapse whitespace. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mapped: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Containment-style exact match on the span before the `[RESULT]` marker:
/// true when any normalized answer is a substring of the normalized span.
pub fn em(prediction: &str, answers: &[String]) -> bool {
    let span = prediction
        .split("[RESULT]")
        .next()
        .unwrap_or(prediction);
    let normalized = normalize_answer(span);
    answers.iter().any(|a| {
        let na = normalize_answer(a);
        !na.is_empty() && normalized.contains(&na)
    })
}

/// Fraction of indices with byte-identical predictions.
pub fn tlm(pos1_preds: &[String], shuffled_preds: &[String]) -> Result<f64> {
    if pos1_preds.len() != shuffled_preds.len() {
        return Err(Error::Contract(format!(
            "tlm got {} vs {} predictions",
            pos1_preds.len(),
            shuffled_preds.len()
        )));
    }
    if pos1_preds.is_empty() {
        return Ok(1.0);
    }
    let same = pos1_preds
        .iter()
        .zip(shuffled_preds)
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / pos1_preds.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweep machinery
// ---------------------------------------------------------------------------

/// Block order that realizes "gold at position p" on caches prefilled in
/// gold-first order.
fn order_for_gold_position(p: usize, n_passages: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n_passages);
    order.extend(1..=p);
    order.push(0);
    order.extend(p + 1..n_passages);
    order
}

struct InstanceOutcome {
    records: Vec<InstanceRecord>, // one per setting, settings order
    near_tie: bool,
}

fn record_from_generation(
    inst: &QAInstance,
    gen: &GenerationResult,
    tokenizer: &Tokenizer,
) -> InstanceRecord {
    let prediction = tokenizer.decode(&gen.tokens);
    let answers = vec![inst.answer.clone()];
    InstanceRecord {
        id: inst.id.clone(),
        em: em(&prediction, &answers),
        prediction,
        gold_answers: answers,
        near_ties: gen.near_tie_steps.len(),
        hit_max_new: gen.hit_max_new,
    }
}

fn eval_instance_fusion(
    d_p: &Model,
    d_t: &Model,
    inst: &QAInstance,
    config: &EvalConfig,
    tokenizer: &Tokenizer,
) -> Result<InstanceOutcome> {
    // One prefill serves every arrangement: per-passage caches do not depend
    // on block order.
    let batch = PassageBatch::from_passages(&inst.gold_first(), tokenizer, config.n)?;
    let caches = prefill(d_p, &batch)?;
    let (q_tokens, _) = format_target(&inst.question, &inst.answer, None, tokenizer);
    let n_passages = batch.n_passages;
    let mut records = Vec::with_capacity(config.positions.len() + 1);
    let mut near_tie = false;
    for &p in &config.positions {
        let order = order_for_gold_position(p, n_passages);
        let fused = res_fuse(&caches, &order)?;
        let gen = generate_greedy_fused(d_t, &fused, &q_tokens, config.max_new, Tokenizer::EOS)?;
        near_tie |= gen.had_near_tie();
        records.push(record_from_generation(inst, &gen, tokenizer));
    }
    let mut rng = Rng::new(derive_seed(config.shuffle_seed, &inst.id));
    let order = rng.permutation(n_passages);
    let fused = res_fuse(&caches, &order)?;
    let gen = generate_greedy_fused(d_t, &fused, &q_tokens, config.max_new, Tokenizer::EOS)?;
    near_tie |= gen.had_near_tie();
    records.push(record_from_generation(inst, &gen, tokenizer));
    Ok(InstanceOutcome { records, near_tie })
}

fn eval_instance_baseline(
    d_t: &Model,
    inst: &QAInstance,
    config: &EvalConfig,
    tokenizer: &Tokenizer,
) -> Result<InstanceOutcome> {
    let mut records = Vec::with_capacity(config.positions.len() + 1);
    let mut near_tie = false;
    for &p in &config.positions {
        let ordered = inst.with_gold_at(p)?;
        let prompt = format_baseline_prompt(&ordered, &inst.question, tokenizer);
        let gen = baseline_generate(d_t, &prompt, config.max_new, Tokenizer::EOS)?;
        near_tie |= gen.had_near_tie();
        records.push(record_from_generation(inst, &gen, tokenizer));
    }
    let mut rng = Rng::new(derive_seed(config.shuffle_seed, &inst.id));
    let base = inst.gold_first();
    let order = rng.permutation(base.len());
    let shuffled: Vec<&crate::data::Passage> = order.iter().map(|&i| base[i]).collect();
    let prompt = format_baseline_prompt(&shuffled, &inst.question, tokenizer);
    let gen = baseline_generate(d_t, &prompt, config.max_new, Tokenizer::EOS)?;
    near_tie |= gen.had_near_tie();
    records.push(record_from_generation(inst, &gen, tokenizer));
    Ok(InstanceOutcome { records, near_tie })
}

/// The position sweep: for every requested gold position, place the gold
/// there (negatives keep relative order), generate, and score EM; run the
/// seeded shuffled arrangement as well; compute TLM between the first swept
/// position and the shuffled setting over near-tie-free instances.
/// Instances without a gold passage or too few passages are skipped and
/// counted. Instances may be evaluated on several threads; aggregation is
/// in dataset order.
pub fn position_sweep(
    d_p: &Model,
    d_t: &Model,
    dataset: &[QAInstance],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if config.positions.is_empty() {
        return Err(Error::Config("position sweep needs at least one position".into()));
    }
    let start = Instant::now();
    let tokenizer = Tokenizer::new();
    let take = config.limit.unwrap_or(dataset.len()).min(dataset.len());
    let subset = &dataset[..take];

    let eligible = |inst: &QAInstance| -> bool {
        inst.gold.is_some()
            && config
                .positions
                .iter()
                .all(|&p| p <= inst.negatives.len())
    };

    let run_one = |inst: &QAInstance| -> Result<Option<InstanceOutcome>> {
        if !eligible(inst) {
            return Ok(None);
        }
        match config.mode {
            EvalMode::Fusion => {
                eval_instance_fusion(d_p, d_t, inst, config, &tokenizer).map(Some)
            }
            EvalMode::Baseline => {
                eval_instance_baseline(d_t, inst, config, &tokenizer).map(Some)
            }
        }
    };

    let outcomes = run_parallel(subset, run_one)?;

    let n_settings = config.positions.len() + 1;
    let mut per_setting: Vec<Vec<InstanceRecord>> = vec![Vec::new(); n_settings];
    let mut skipped = 0usize;
    let mut tie_excluded = 0usize;
    let mut pos1_preds = Vec::new();
    let mut shuffled_preds = Vec::new();
    let mut invariance_ok = true;
    for outcome in outcomes {
        match outcome {
            None => skipped += 1,
            Some(o) => {
                if o.near_tie {
                    tie_excluded += 1;
                } else {
                    pos1_preds.push(o.records[0].prediction.clone());
                    shuffled_preds.push(o.records[n_settings - 1].prediction.clone());
                    if config.mode == EvalMode::Fusion {
                        let first = &o.records[0].prediction;
                        if !o.records[..n_settings - 1]
                            .iter()
                            .all(|r| &r.prediction == first)
                        {
                            invariance_ok = false;
                        }
                    }
                }
                for (slot, rec) in per_setting.iter_mut().zip(o.records) {
                    slot.push(rec);
                }
            }
        }
    }

    let mut settings = Vec::with_capacity(n_settings);
    for (i, &p) in config.positions.iter().enumerate() {
        settings.push(SettingResult::from_records(
            format!("pos{p}"),
            Some(p),
            std::mem::take(&mut per_setting[i]),
        ));
    }
    settings.push(SettingResult::from_records(
        "shuffled".into(),
        None,
        std::mem::take(&mut per_setting[n_settings - 1]),
    ));

    let tlm_value = tlm(&pos1_preds, &shuffled_preds)?;
    Ok(EvalReport {
        mode: config.mode,
        settings,
        tlm: Some(tlm_value),
        tie_excluded,
        skipped,
        invariance_ok,
        config: config.clone(),
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Plain EM evaluation in stored passage order (gold first as saved).
/// Includes unanswerable instances, whose expected answer is the
/// `Unanswerable` string.
pub fn evaluate(
    d_p: &Model,
    d_t: &Model,
    dataset: &[QAInstance],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let start = Instant::now();
    let tokenizer = Tokenizer::new();
    let take = config.limit.unwrap_or(dataset.len()).min(dataset.len());
    let subset = &dataset[..take];

    let run_one = |inst: &QAInstance| -> Result<Option<InstanceRecord>> {
        let gen = match config.mode {
            EvalMode::Fusion => {
                let batch =
                    PassageBatch::from_passages(&inst.gold_first(), &tokenizer, config.n)?;
                let caches = prefill(d_p, &batch)?;
                let order: Vec<usize> = (0..batch.n_passages).collect();
                let fused = res_fuse(&caches, &order)?;
                let (q_tokens, _) =
                    format_target(&inst.question, &inst.answer, None, &tokenizer);
                generate_greedy_fused(d_t, &fused, &q_tokens, config.max_new, Tokenizer::EOS)?
            }
            EvalMode::Baseline => {
                let prompt =
                    format_baseline_prompt(&inst.gold_first(), &inst.question, &tokenizer);
                baseline_generate(d_t, &prompt, config.max_new, Tokenizer::EOS)?
            }
        };
        Ok(Some(record_from_generation(inst, &gen, &tokenizer)))
    };

    let outcomes = run_parallel(subset, run_one)?;
    let records: Vec<InstanceRecord> = outcomes.into_iter().flatten().collect();
    let tie_excluded = records.iter().filter(|r| r.near_ties > 0).count();
    let setting = SettingResult::from_records("stored".into(), None, records);
    Ok(EvalReport {
        mode: config.mode,
        settings: vec![setting],
        tlm: None,
        tie_excluded,
        skipped: 0,
        invariance_ok: true,
        config: config.clone(),
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Chunked fork-join over instances with deterministic, index-ordered
/// aggregation.
fn run_parallel<T, F, R>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = crate::max_threads().min(items.len()).max(1);
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|slice| scope.spawn(move || slice.iter().map(f).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Logit-level invariance check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub permutations: usize,
    pub max_abs_diff: f32,
    pub threshold: f32,
    pub ok: bool,
}

/// Compare fused-forward logits across random block permutations against the
/// identity order; architectural, so it holds for untrained models.
pub fn logit_invariance(
    d_p: &Model,
    d_t: &Model,
    inst: &QAInstance,
    n: usize,
    permutations: usize,
    seed: u64,
    threshold: f32,
) -> Result<InvarianceReport> {
    let tokenizer = Tokenizer::new();
    let batch = PassageBatch::from_passages(&inst.gold_first(), &tokenizer, n)?;
    let caches = prefill(d_p, &batch)?;
    let (q_tokens, _) = format_target(&inst.question, &inst.answer, None, &tokenizer);
    let identity: Vec<usize> = (0..batch.n_passages).collect();
    let base = fused_forward(d_t, &res_fuse(&caches, &identity)?, &q_tokens)?;
    let mut rng = Rng::new(derive_seed(seed, "invariance"));
    let mut max_abs_diff = 0.0f32;
    for _ in 0..permutations {
        let order = rng.permutation(batch.n_passages);
        let other = fused_forward(d_t, &res_fuse(&caches, &order)?, &q_tokens)?;
        max_abs_diff = max_abs_diff.max(base.max_abs_diff(&other));
    }
    Ok(InvarianceReport {
        permutations,
        max_abs_diff,
        threshold,
        ok: max_abs_diff < threshold,
    })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (json|csv)"
            ))),
        }
    }
}

/// Render the report deterministically. CSV holds one data row per setting
/// with columns `setting,gold_position,evaluated,correct,accuracy`; the JSON
/// form carries the full per-instance records.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serialization");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out = String::from("setting,gold_position,evaluated,correct,accuracy\n");
            for s in &report.settings {
                let pos = s
                    .gold_position
                    .map(|p| p.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{:.6}\n",
                    s.setting, pos, s.evaluated, s.correct, s.accuracy
                ));
            }
            out
        }
    }
}

pub fn write_report<P: AsRef<Path>>(
    report: &EvalReport,
    path: P,
    format: ReportFormat,
) -> Result<()> {
    std::fs::write(path, render_report(report, format))?;
    Ok(())
}
