//! Byte-level tokenizer, input templates, synthetic key-fact QA data, and
//! JSONL persistence.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::rng::Rng;
use crate::Result;

/// 256 byte tokens plus the six specials below.
pub const VOCAB_SIZE: usize = 262;

/// Stateless byte-level tokenizer. Ids 0..=255 are raw bytes; specials map
/// to reserved ids >= 256 and are never produced by byte encoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    /// Sequence start / attention sink.
    pub const BOS: u32 = 256;
    /// Stop token appended after `[END]`; generation halts on it.
    pub const EOS: u32 = 257;
    /// `<|question_answering|>` signal token that opens the target template.
    pub const SIGNAL: u32 = 258;
    /// `[RESULT]` marker between answer and evidence.
    pub const RESULT: u32 = 259;
    /// `[END]` marker closing the evidence.
    pub const END: u32 = 260;
    /// Filler for masked padding slots.
    pub const PAD: u32 = 261;

    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= 256
    }

    /// Marker string a special id renders to in [`Tokenizer::decode`].
    pub fn special_marker(&self, id: u32) -> Option<&'static str> {
        match id {
            Self::BOS => Some("<|bos|>"),
            Self::EOS => Some("<|eos|>"),
            Self::SIGNAL => Some("<|question_answering|>"),
            Self::RESULT => Some("[RESULT]"),
            Self::END => Some("[END]"),
            Self::PAD => Some("<|pad|>"),
            _ => None,
        }
    }

    /// UTF-8 bytes of `s`, one token per byte. Never emits specials.
    pub fn encode(&self, s: &str) -> Vec<u32> {
        s.bytes().map(u32::from).collect()
    }

    /// Byte tokens decode back to text; specials render as their markers.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &t in tokens {
            if t < 256 {
                bytes.push(t as u8);
            } else {
                flush(&mut bytes, &mut out);
                out.push_str(self.special_marker(t).unwrap_or("<|unk|>"));
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}

/// A retrieved (here: synthesized) passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub title: String,
    pub text: String,
}

/// One QA instance. `gold` is absent for unanswerable instances, whose
/// answer is the literal string `Unanswerable`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub evidence: String,
    pub gold: Option<Passage>,
    pub negatives: Vec<Passage>,
}

impl QAInstance {
    /// Total number of passages.
    pub fn passage_count(&self) -> usize {
        self.negatives.len() + usize::from(self.gold.is_some())
    }

    /// Passages in storage order: gold first (when present), then negatives.
    pub fn gold_first(&self) -> Vec<&Passage> {
        self.gold.iter().chain(self.negatives.iter()).collect()
    }

    /// Passages with the gold inserted at `position`; negatives keep their
    /// relative order. Errors when there is no gold or the position does not
    /// fit.
    pub fn with_gold_at(&self, position: usize) -> Result<Vec<&Passage>> {
        let gold = self
            .gold
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("instance {} has no gold passage", self.id)))?;
        if position > self.negatives.len() {
            return Err(Error::Contract(format!(
                "gold position {position} does not fit {} negatives",
                self.negatives.len()
            )));
        }
        let mut out: Vec<&Passage> = Vec::with_capacity(self.passage_count());
        out.extend(self.negatives[..position].iter());
        out.push(gold);
        out.extend(self.negatives[position..].iter());
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Instruction line of the target template.
pub const TARGET_INSTRUCTION: &str = "Using the provided titles and contexts, answer the given \
question briefly and provide the supporting sentences as evidence.";

/// Instruction tail of the baseline template.
pub const BASELINE_INSTRUCTION: &str = "Strictly based on listed documents (titles and contexts) \
above, answer the given question clearly and concisely in a single sentence. If none of the \
documents provide a valid answer, respond with \"Unanswerable\".";

/// Fallback answer for unanswerable questions.
pub const UNANSWERABLE: &str = "Unanswerable";

/// A passage rendered to its fixed-width token block.
#[derive(Debug, Clone)]
pub struct FormattedPassage {
    /// Exactly `n` ids: BOS at slot 0, padding, then right-aligned content.
    pub tokens: Vec<u32>,
    /// False exactly at padding slots.
    pub valid: Vec<bool>,
    /// True when the rendered text had to be left-truncated.
    pub truncated: bool,
}

/// Render `Title: {title} Context: {text}` plus the `====` boundary into a
/// block of exactly `n` slots: BOS at position 0, left padding, content
/// right-aligned, truncated from the left when it exceeds `n - 1` slots.
pub fn format_passage(p: &Passage, tokenizer: &Tokenizer, n: usize) -> Result<FormattedPassage> {
    if n < 2 {
        return Err(Error::Contract(format!(
            "passage block length {n} cannot hold BOS plus content"
        )));
    }
    let rendered = format!("Title: {} Context: {}\n====", p.title, p.text);
    let mut content = tokenizer.encode(&rendered);
    let budget = n - 1;
    let truncated = content.len() > budget;
    if truncated {
        content.drain(..content.len() - budget);
    }
    let pad = budget - content.len();
    let mut tokens = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    tokens.push(Tokenizer::BOS);
    valid.push(true);
    tokens.extend(std::iter::repeat(Tokenizer::PAD).take(pad));
    valid.extend(std::iter::repeat(false).take(pad));
    tokens.extend_from_slice(&content);
    valid.extend(std::iter::repeat(true).take(content.len()));
    Ok(FormattedPassage {
        tokens,
        valid,
        truncated,
    })
}

/// Build the target-template tokens: the query part (signal token,
/// instruction, question, answer cue) and the supervised part (answer,
/// `[RESULT]`, optional evidence, `[END]`, stop token).
pub fn format_target(
    question: &str,
    answer: &str,
    evidence: Option<&str>,
    tokenizer: &Tokenizer,
) -> (Vec<u32>, Vec<u32>) {
    let mut q_tokens = vec![Tokenizer::SIGNAL];
    q_tokens.extend(tokenizer.encode(&format!(
        " {TARGET_INSTRUCTION}\nQuestion: {question}?\nAnswer:"
    )));
    let mut y_tokens = tokenizer.encode(&format!(" {answer} "));
    y_tokens.push(Tokenizer::RESULT);
    if let Some(ev) = evidence {
        y_tokens.extend(tokenizer.encode(&format!("\nEvidence: {ev} ")));
    }
    y_tokens.push(Tokenizer::END);
    y_tokens.push(Tokenizer::EOS);
    (q_tokens, y_tokens)
}

/// Concatenated-prompt baseline: every passage followed by a `=====`
/// separator line, then the instruction and the question.
pub fn format_baseline_prompt(
    passages: &[&Passage],
    question: &str,
    tokenizer: &Tokenizer,
) -> Vec<u32> {
    let mut rendered = String::new();
    for p in passages {
        rendered.push_str(&format!("Title: {} Context: {}\n=====\n", p.title, p.text));
    }
    rendered.push_str(&format!(
        "{BASELINE_INSTRUCTION} Question: {question}? ANSWER:"
    ));
    let mut tokens = vec![Tokenizer::BOS];
    tokens.extend(tokenizer.encode(&rendered));
    tokens
}

// ---------------------------------------------------------------------------
// Synthetic key-fact QA
// ---------------------------------------------------------------------------

/// How negative passages relate to the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorStyle {
    /// Negatives state the same attribute for other entities, so answering
    /// requires matching the entity.
    Confusable,
    /// Negatives state unrelated attributes of other entities.
    Unrelated,
}

impl std::str::FromStr for DistractorStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confusable" => Ok(DistractorStyle::Confusable),
            "unrelated" => Ok(DistractorStyle::Unrelated),
            other => Err(Error::Config(format!(
                "unknown distractor style {other:?} (confusable|unrelated)"
            ))),
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "de", "fi", "go", "ku", "la", "me", "no", "pu", "ra", "si", "tu", "ve", "wo", "zy",
    "he",
];

const ATTRIBUTES: [&str; 6] = [
    "access code",
    "serial code",
    "vault key",
    "entry code",
    "lock code",
    "pass number",
];

/// Entities come from a fixed pool rather than being freshly coined per
/// instance, so retrieval keys recur across the dataset while the digit
/// values stay fresh per instance (answers can only come from the context).
const ENTITY_POOL_SIZE: usize = 24;

/// Digits per value string.
const VALUE_LEN: usize = 4;

fn entity_pool() -> Vec<String> {
    // Deterministic enumeration of distinct syllable pairs.
    let n = SYLLABLES.len();
    (0..ENTITY_POOL_SIZE)
        .map(|i| {
            let a = SYLLABLES[i % n];
            let b = SYLLABLES[(3 * i + i / n) % n];
            format!("{a}{b}")
        })
        .collect()
}

fn make_value(rng: &mut Rng) -> String {
    (0..VALUE_LEN)
        .map(|_| char::from(b'0' + rng.gen_range(10) as u8))
        .collect()
}

fn fact_sentence(attribute: &str, entity: &str, value: &str) -> String {
    format!("The {attribute} of {entity} is {value}.")
}

/// Generate `count` instances deterministically from `seed`. Each instance
/// asks for one entity's attribute value; the gold passage states the fact,
/// negatives state other entities' facts. Entity names are letter strings
/// and values are digit strings, so an answer can never hide inside a
/// negative. A fraction `unanswerable_rate` of instances query an entity
/// absent from every passage and carry the `Unanswerable` answer.
pub fn synth_generate(
    seed: u64,
    count: usize,
    n_passages: usize,
    style: DistractorStyle,
    unanswerable_rate: f64,
) -> Result<Vec<QAInstance>> {
    if count < 1 {
        return Err(Error::Contract("synth_generate needs count >= 1".into()));
    }
    if n_passages < 2 {
        return Err(Error::Contract("synth_generate needs N >= 2".into()));
    }
    if !(0.0..=1.0).contains(&unanswerable_rate) {
        return Err(Error::Contract(format!(
            "unanswerable_rate {unanswerable_rate} outside [0, 1]"
        )));
    }
    let pool = entity_pool();
    if n_passages + 1 > pool.len() {
        return Err(Error::Contract(format!(
            "N = {n_passages} exceeds the entity pool ({})",
            pool.len()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let unanswerable = rng.next_f64() < unanswerable_rate;
        let attribute = ATTRIBUTES[rng.gen_range(ATTRIBUTES.len())];
        // One distinct pool entity per passage, plus the absent query entity
        // for unanswerable instances.
        let needed = n_passages + usize::from(unanswerable);
        let mut entities: Vec<String> = Vec::with_capacity(needed);
        while entities.len() < needed {
            let e = pool[rng.gen_range(pool.len())].clone();
            if !entities.contains(&e) {
                entities.push(e);
            }
        }
        let mut values: Vec<String> = Vec::with_capacity(n_passages);
        while values.len() < n_passages {
            let v = make_value(&mut rng);
            if !values.contains(&v) {
                values.push(v);
            }
        }
        let mut passages = Vec::with_capacity(n_passages);
        for idx in 0..n_passages {
            let attr = match style {
                DistractorStyle::Confusable => attribute,
                DistractorStyle::Unrelated => {
                    if idx == 0 && !unanswerable {
                        attribute
                    } else {
                        ATTRIBUTES[rng.gen_range(ATTRIBUTES.len())]
                    }
                }
            };
            passages.push(Passage {
                title: entities[idx].clone(),
                text: fact_sentence(attr, &entities[idx], &values[idx]),
            });
        }
        let instance = if unanswerable {
            let query_entity = entities[n_passages].clone();
            QAInstance {
                id: format!("synth-{i:06}"),
                question: format!("What is the {attribute} of {query_entity}"),
                answer: UNANSWERABLE.to_string(),
                evidence: String::new(),
                gold: None,
                negatives: passages,
            }
        } else {
            let gold = passages.remove(0);
            QAInstance {
                id: format!("synth-{i:06}"),
                question: format!("What is the {attribute} of {}", entities[0]),
                answer: values[0].clone(),
                evidence: gold.text.clone(),
                gold: Some(gold),
                negatives: passages,
            }
        };
        debug_assert!(instance
            .gold
            .as_ref()
            .map_or(true, |g| g.text.contains(&instance.answer)));
        debug_assert!(instance
            .negatives
            .iter()
            .all(|p| !p.text.contains(&instance.answer)));
        out.push(instance);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WirePassage {
    title: String,
    text: String,
    is_gold: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireInstance {
    id: String,
    question: String,
    answer: String,
    evidence: String,
    passages: Vec<WirePassage>,
}

impl From<&QAInstance> for WireInstance {
    fn from(inst: &QAInstance) -> Self {
        let mut passages = Vec::with_capacity(inst.passage_count());
        if let Some(g) = &inst.gold {
            passages.push(WirePassage {
                title: g.title.clone(),
                text: g.text.clone(),
                is_gold: true,
            });
        }
        passages.extend(inst.negatives.iter().map(|p| WirePassage {
            title: p.title.clone(),
            text: p.text.clone(),
            is_gold: false,
        }));
        WireInstance {
            id: inst.id.clone(),
            question: inst.question.clone(),
            answer: inst.answer.clone(),
            evidence: inst.evidence.clone(),
            passages,
        }
    }
}

fn instance_from_wire(wire: WireInstance, line: usize) -> Result<QAInstance> {
    let mut gold = None;
    let mut negatives = Vec::new();
    for p in wire.passages {
        let passage = Passage {
            title: p.title,
            text: p.text,
        };
        if passage.title.is_empty() || passage.text.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("passage with empty title or text in {}", wire.id),
            });
        }
        if p.is_gold {
            if gold.is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("more than one gold passage in {}", wire.id),
                });
            }
            gold = Some(passage);
        } else {
            negatives.push(passage);
        }
    }
    if let Some(g) = &gold {
        if !g.text.contains(&wire.answer) {
            return Err(Error::Parse {
                line,
                message: format!("gold passage of {} does not contain the answer", wire.id),
            });
        }
    }
    if negatives.iter().any(|p| p.text.contains(&wire.answer)) {
        return Err(Error::Parse {
            line,
            message: format!("a negative passage of {} contains the answer", wire.id),
        });
    }
    Ok(QAInstance {
        id: wire.id,
        question: wire.question,
        answer: wire.answer,
        evidence: wire.evidence,
        gold,
        negatives,
    })
}

/// One JSON object per line, UTF-8, LF-terminated.
pub fn save_jsonl<P: AsRef<Path>>(instances: &[QAInstance], path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, &WireInstance::from(inst))
            .map_err(|e| Error::Contract(format!("serialize {}: {e}", inst.id)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<QAInstance>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(instance_from_wire(wire, line_no)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_decode_identity() {
        let tok = Tokenizer::new();
        for s in ["hello", "Tütensuppe 超级", "", "a\nb\tc"] {
            assert_eq!(tok.decode(&tok.encode(s)), s);
        }
    }

    #[test]
    fn byte_encoding_never_emits_specials() {
        let tok = Tokenizer::new();
        let ids = tok.encode("Title: [RESULT] <|bos|>");
        assert!(ids.iter().all(|&t| t < 256));
    }

    #[test]
    fn special_ids_are_stable() {
        assert_eq!(Tokenizer::BOS, 256);
        assert_eq!(Tokenizer::EOS, 257);
        assert_eq!(Tokenizer::SIGNAL, 258);
        assert_eq!(Tokenizer::RESULT, 259);
        assert_eq!(Tokenizer::END, 260);
        assert_eq!(Tokenizer::PAD, 261);
        assert_eq!(VOCAB_SIZE, 262);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrips_any_string(s in ".*") {
            let tok = Tokenizer::new();
            prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }
    }

    fn sample_passage() -> Passage {
        Passage {
            title: "bade".into(),
            text: "The access code of bade is 123456.".into(),
        }
    }

    #[test]
    fn format_passage_pads_left_content_right() {
        let tok = Tokenizer::new();
        let f = format_passage(&sample_passage(), &tok, 64).unwrap();
        assert_eq!(f.tokens.len(), 64);
        assert_eq!(f.valid.len(), 64);
        assert!(!f.truncated);
        assert_eq!(f.tokens[0], Tokenizer::BOS);
        assert!(f.valid[0]);
        // Padding sits between BOS and the right-aligned content.
        let pad_count = f.valid.iter().filter(|&&v| !v).count();
        assert!(pad_count > 0);
        for (i, &v) in f.valid.iter().enumerate().skip(1) {
            if i <= pad_count {
                assert!(!v, "slot {i} should be padding");
                assert_eq!(f.tokens[i], Tokenizer::PAD);
            } else {
                assert!(v, "slot {i} should be content");
            }
        }
        // Content slots round-trip the rendered template.
        let content: Vec<u32> = f
            .tokens
            .iter()
            .zip(&f.valid)
            .skip(1)
            .filter(|(_, &v)| v)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(
            tok.decode(&content),
            "Title: bade Context: The access code of bade is 123456.\n===="
        );
    }

    #[test]
    fn format_passage_truncates_from_the_left() {
        let tok = Tokenizer::new();
        let long = Passage {
            title: "t".into(),
            text: "x".repeat(100),
        };
        let f = format_passage(&long, &tok, 16).unwrap();
        assert!(f.truncated);
        assert_eq!(f.tokens.len(), 16);
        assert!(f.valid.iter().skip(1).all(|&v| v), "no padding when full");
        let content: Vec<u32> = f.tokens[1..].to_vec();
        // The kept suffix ends with the boundary; the head was dropped.
        assert_eq!(tok.decode(&content), "xxxxxxxxxx\n====");
    }

    #[test]
    fn format_target_matches_template() {
        let tok = Tokenizer::new();
        let (q, y) = format_target(
            "who sings does he love me with reba",
            "Linda Davis",
            Some("\"Does He Love You\" is a song."),
            &tok,
        );
        assert_eq!(q[0], Tokenizer::SIGNAL);
        assert_eq!(
            tok.decode(&q),
            "<|question_answering|> Using the provided titles and contexts, answer the given \
             question briefly and provide the supporting sentences as evidence.\n\
             Question: who sings does he love me with reba?\nAnswer:"
        );
        assert_eq!(
            tok.decode(&y),
            " Linda Davis [RESULT]\nEvidence: \"Does He Love You\" is a song. [END]<|eos|>"
        );
        assert_eq!(y[y.len() - 2], Tokenizer::END);
        assert_eq!(y[y.len() - 1], Tokenizer::EOS);
    }

    #[test]
    fn format_target_without_evidence() {
        let tok = Tokenizer::new();
        let (_, y) = format_target("q", "42", None, &tok);
        assert_eq!(tok.decode(&y), " 42 [RESULT][END]<|eos|>");
    }

    #[test]
    fn baseline_prompt_has_separator_per_passage() {
        let tok = Tokenizer::new();
        let p1 = sample_passage();
        let p2 = Passage {
            title: "kula".into(),
            text: "The vault key of kula is 999999.".into(),
        };
        let prompt = format_baseline_prompt(&[&p1, &p2], "what is it", &tok);
        assert_eq!(prompt[0], Tokenizer::BOS);
        let text = tok.decode(&prompt[1..]);
        assert_eq!(text.matches("=====").count(), 2);
        assert!(text.ends_with("Question: what is it? ANSWER:"));
        // Permuting the passages permutes the corresponding spans only.
        let swapped = tok.decode(&format_baseline_prompt(&[&p2, &p1], "what is it", &tok)[1..]);
        assert_ne!(text, swapped);
        assert_eq!(text.len(), swapped.len());
        let tail = text.rfind("Strictly").unwrap();
        assert_eq!(
            &text[tail..],
            &swapped[swapped.rfind("Strictly").unwrap()..]
        );
    }

    #[test]
    fn synth_generator_invariants() {
        let data = synth_generate(11, 200, 5, DistractorStyle::Confusable, 0.1).unwrap();
        assert_eq!(data.len(), 200);
        let mut unanswerable = 0;
        for inst in &data {
            assert_eq!(inst.passage_count(), 5);
            match &inst.gold {
                Some(g) => {
                    assert!(g.text.contains(&inst.answer));
                    assert_eq!(inst.evidence, g.text);
                }
                None => {
                    unanswerable += 1;
                    assert_eq!(inst.answer, UNANSWERABLE);
                }
            }
            for neg in &inst.negatives {
                assert!(!neg.text.contains(&inst.answer));
            }
        }
        assert!((5..50).contains(&unanswerable), "{unanswerable}");
    }

    #[test]
    fn entity_pool_is_distinct() {
        let pool = entity_pool();
        let mut sorted = pool.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), pool.len(), "pool has duplicate entities");
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(5, 50, 4, DistractorStyle::Confusable, 0.1).unwrap();
        let b = synth_generate(5, 50, 4, DistractorStyle::Confusable, 0.1).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(6, 50, 4, DistractorStyle::Confusable, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_passages_fit_desk_scale_block() {
        let tok = Tokenizer::new();
        let data = synth_generate(3, 100, 5, DistractorStyle::Confusable, 0.0).unwrap();
        for inst in &data {
            for p in inst.gold_first() {
                let f = format_passage(p, &tok, 64).unwrap();
                assert!(!f.truncated, "passage overflows block: {:?}", p.text);
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let data = synth_generate(7, 30, 3, DistractorStyle::Unrelated, 0.2).unwrap();
        save_jsonl(&data, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(data, loaded);
    }

    #[test]
    fn jsonl_missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"x\", \"question\": \"q\"}\n").unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("answer"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.jsonl");
        let good = serde_json::to_string(&WireInstance::from(
            &synth_generate(1, 1, 2, DistractorStyle::Confusable, 0.0).unwrap()[0],
        ))
        .unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn jsonl_survives_unicode_answers(answer in "[\\PC&&[^\\x00-\\x1f]]{1,20}") {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("u.jsonl");
            let inst = QAInstance {
                id: "u-1".into(),
                question: "q".into(),
                answer: answer.clone(),
                evidence: format!("fact: {answer}"),
                gold: Some(Passage { title: "t".into(), text: format!("fact: {answer}") }),
                negatives: vec![],
            };
            save_jsonl(&[inst.clone()], &path).unwrap();
            let loaded = load_jsonl(&path).unwrap();
            prop_assert_eq!(loaded, vec![inst]);
        }
    }

    #[test]
    fn with_gold_at_positions() {
        let data = synth_generate(9, 5, 4, DistractorStyle::Confusable, 0.0).unwrap();
        let inst = &data[0];
        for pos in 0..4 {
            let ordered = inst.with_gold_at(pos).unwrap();
            assert_eq!(ordered.len(), 4);
            assert_eq!(ordered[pos], inst.gold.as_ref().unwrap());
        }
        assert!(inst.with_gold_at(4).is_err());
    }
}
