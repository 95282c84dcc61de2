//! Conversation ingestion, prompt-context windows, hashed prompt features,
//! and a synthetic conversation generator with tunable class confusability.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::Matrix;
use crate::error::{Error, Result};
use crate::seed;

/// Emotion label with a dense 0-based id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub id: usize,
    pub text: String,
}

/// Ordered, duplicate-free list of label words. Position is the label id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    texts: Vec<String>,
}

impl LabelSet {
    pub fn new(texts: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &texts {
            if t.trim().is_empty() {
                return Err(Error::Schema("label text must be non-empty".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Schema(format!("duplicate label {t:?}")));
            }
        }
        Ok(LabelSet { texts })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        self.texts.iter().position(|t| t == text)
    }

    pub fn text(&self, id: usize) -> Option<&str> {
        self.texts.get(id).map(String::as_str)
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> Vec<EmotionLabel> {
        self.texts
            .iter()
            .enumerate()
            .map(|(id, text)| EmotionLabel {
                id,
                text: text.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// Optional split tag carried by the input file.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub labels: LabelSet,
    pub conversations: Vec<Conversation>,
}

impl Corpus {
    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(|c| c.utterances.len()).sum()
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::compute(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub class_counts: Vec<usize>,
}

/// Per-split dialogue, utterance and class counts. Untagged conversations
/// are reported under `"untagged"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub splits: BTreeMap<String, SplitStats>,
    pub classes: Vec<String>,
}

impl CorpusStats {
    pub fn compute(corpus: &Corpus) -> Self {
        let s = corpus.labels.len();
        let mut splits: BTreeMap<String, SplitStats> = BTreeMap::new();
        for conv in &corpus.conversations {
            let key = conv.split.map_or("untagged", Split::name).to_string();
            let entry = splits.entry(key).or_insert_with(|| SplitStats {
                class_counts: vec![0; s],
                ..SplitStats::default()
            });
            entry.dialogues += 1;
            entry.utterances += conv.utterances.len();
            for u in &conv.utterances {
                entry.class_counts[u.label] += 1;
            }
        }
        CorpusStats {
            splits,
            classes: corpus.labels.texts().to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    speaker: String,
    text: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    turns: Vec<TurnRecord>,
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

/// Parses conversation JSONL. The first record declares the label order.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut labels: Option<LabelSet> = None;
    let mut conversations = Vec::new();
    let mut first = true;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        match (first, record.labels.as_ref()) {
            (true, Some(declared)) => {
                labels = Some(LabelSet::new(declared.clone()).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?)
            }
            (true, None) => {
                return Err(Error::Schema(format!(
                    "line {line_no}: first record must declare \"labels\""
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Schema(format!(
                    "line {line_no}: \"labels\" may only appear on the first record"
                )))
            }
            (false, None) => {}
        }
        first = false;
        let label_set = labels.as_ref().expect("declared on first record");
        if record.turns.is_empty() {
            return Err(Error::Schema(format!(
                "line {line_no}: conversation {:?} has no turns",
                record.id
            )));
        }
        let mut utterances = Vec::with_capacity(record.turns.len());
        for turn in record.turns {
            let label = label_set.id_of(&turn.label).ok_or_else(|| {
                Error::Schema(format!(
                    "line {line_no}: unknown label {:?} (not in declared labels)",
                    turn.label
                ))
            })?;
            if turn.text.trim().is_empty() {
                return Err(Error::Schema(format!(
                    "line {line_no}: empty utterance text in conversation {:?}",
                    record.id
                )));
            }
            utterances.push(Utterance {
                speaker: turn.speaker,
                text: turn.text,
                label,
            });
        }
        conversations.push(Conversation {
            id: record.id,
            utterances,
            split: record.split,
        });
    }
    if conversations.is_empty() {
        log::warn!("corpus is empty");
    }
    Ok(Corpus {
        labels: labels.unwrap_or_default(),
        conversations,
    })
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<corpus writer>", e);
    for (idx, conv) in corpus.conversations.iter().enumerate() {
        let record = ConversationRecord {
            id: conv.id.clone(),
            labels: (idx == 0).then(|| corpus.labels.texts().to_vec()),
            split: conv.split,
            turns: conv
                .utterances
                .iter()
                .map(|u| TurnRecord {
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                    label: corpus.labels.texts()[u.label].clone(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(writer, "{line}").map_err(io)?;
    }
    writer.flush().map_err(io)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, BufWriter::new(file))
}

/// Builds the prompt-context window for turn `t`: up to `k` preceding turns
/// plus turn `t` as `Speaker: text`, followed by the prompt tail.
pub fn compose_prompt(conv: &Conversation, t: usize, k: usize) -> Result<String> {
    let turns = &conv.utterances;
    if t >= turns.len() {
        return Err(Error::Index {
            context: format!("conversation {:?}", conv.id),
            index: t,
            len: turns.len(),
        });
    }
    let start = t.saturating_sub(k);
    let mut parts: Vec<String> = turns[start..=t]
        .iter()
        .map(|u| format!("{}: {}", u.speaker, u.text))
        .collect();
    let current = &turns[t];
    parts.push(format!(
        "For utterance \"{}\", speaker {} feels <mask>",
        current.text, current.speaker
    ));
    Ok(parts.join(" "))
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded FNV-1a with a splitmix finalizer. Stable across platforms and
/// toolchains, unlike `std`'s `DefaultHasher`.
fn hash_term(term: &str, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(seed);
    for b in term.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn accumulate(out: &mut [f64], term: &str, seed: u64) {
    let h = hash_term(term, seed);
    let bucket = (h % out.len() as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    out[bucket] += sign;
}

/// Signed feature hashing over unigrams and bigrams, L2-normalized.
pub fn featurize_tokens(tokens: &[String], dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::Config(format!("feature dimension must be >= 8, got {dim}")));
    }
    if tokens.is_empty() {
        return Err(Error::Empty("prompt has no tokens".into()));
    }
    let mut out = vec![0.0; dim];
    for t in tokens {
        accumulate(&mut out, t, seed);
    }
    for pair in tokens.windows(2) {
        accumulate(&mut out, &format!("{} {}", pair[0], pair[1]), seed);
    }
    let n = crate::diffmath::norm(&out);
    if n == 0.0 {
        return Err(Error::Numeric("hashed features cancelled to a zero vector".into()));
    }
    out.iter_mut().for_each(|x| *x /= n);
    Ok(out)
}

pub fn featurize(prompt: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    featurize_tokens(&tokenize(prompt), dim, seed)
}

/// Everything needed to turn text into model inputs. Stored inside
/// checkpoints so evaluation featurizes exactly like training did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub dim: usize,
    pub seed: u64,
    pub context_turns: usize,
    /// Keep at most this many trailing tokens of a prompt.
    pub max_tokens: usize,
}

impl FeatureConfig {
    pub fn featurize(&self, prompt: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(prompt);
        let keep = tokens.len().min(self.max_tokens);
        featurize_tokens(&tokens[tokens.len() - keep..], self.dim, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub conversation_id: String,
    pub turn_index: usize,
}

/// One sample per utterance, in conversation order then turn order.
pub fn make_samples<'a, I>(conversations: I, cfg: &FeatureConfig) -> Result<Vec<EncodedSample>>
where
    I: IntoIterator<Item = &'a Conversation>,
{
    let mut samples = Vec::new();
    for conv in conversations {
        for t in 0..conv.utterances.len() {
            let prompt = compose_prompt(conv, t, cfg.context_turns)?;
            samples.push(EncodedSample {
                features: cfg.featurize(&prompt)?,
                label: conv.utterances[t].label,
                conversation_id: conv.id.clone(),
                turn_index: t,
            });
        }
    }
    Ok(samples)
}

/// Featurized label words, one row per label.
pub fn label_features(labels: &LabelSet, cfg: &FeatureConfig) -> Result<Matrix> {
    let rows = labels
        .texts()
        .iter()
        .map(|t| cfg.featurize(t))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cfg.dim));
    }
    Matrix::from_rows(&rows)
}

/// Parameters of the synthetic conversation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Training utterances per class.
    pub per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    pub similar_pairs: Vec<(usize, usize)>,
    /// Fraction of a similar pair's vocabulary that is NOT shared.
    pub noise: f64,
    pub seed: u64,
    pub vocab_per_class: usize,
    pub words_per_utterance: usize,
    pub filler_words: usize,
    pub filler_per_utterance: usize,
    pub turns_per_dialogue: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, similar_pairs: Vec<(usize, usize)>, noise: f64, seed: u64) -> Self {
        SynthConfig {
            classes,
            per_class,
            dev_per_class: 0,
            test_per_class: 0,
            similar_pairs,
            noise,
            seed,
            vocab_per_class: 12,
            words_per_utterance: 6,
            filler_words: 8,
            filler_per_utterance: 2,
            turns_per_dialogue: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must be in [0, 1), got {}", self.noise)));
        }
        for &(a, b) in &self.similar_pairs {
            if a >= self.classes || b >= self.classes || a == b {
                return Err(Error::Config(format!("invalid similar pair ({a}, {b})")));
            }
        }
        if self.vocab_per_class == 0 || self.words_per_utterance == 0 || self.turns_per_dialogue == 0 {
            return Err(Error::Config("vocabulary, utterance and dialogue sizes must be positive".into()));
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SPEAKERS: &[&str] = &["Ana", "Ben", "Cleo", "Dev", "Eli", "Faye"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn fresh_words<R: Rng>(rng: &mut R, n: usize, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Generates balanced dialogues whose utterances draw on per-class word
/// lists. The second class of every similar pair takes over a `1 - noise`
/// share of the first class's words, and its label text contains the first
/// class's label word.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::rng_for(cfg.seed, seed::SYNTH);
    let mut used = HashSet::new();

    let base_labels = fresh_words(&mut rng, cfg.classes, &mut used);
    let mut label_texts = base_labels.clone();
    let mut vocab: Vec<Vec<String>> = (0..cfg.classes)
        .map(|_| fresh_words(&mut rng, cfg.vocab_per_class, &mut used))
        .collect();
    let filler = fresh_words(&mut rng, cfg.filler_words, &mut used);

    let shared = ((1.0 - cfg.noise) * cfg.vocab_per_class as f64).round() as usize;
    for &(a, b) in &cfg.similar_pairs {
        let donor: Vec<String> = vocab[a][..shared].to_vec();
        vocab[b][..shared].clone_from_slice(&donor);
        label_texts[b] = format!("{} {}", base_labels[a], base_labels[b]);
    }
    let labels = LabelSet::new(label_texts)?;

    let mut conversations = Vec::new();
    for (split, n) in [
        (Split::Train, cfg.per_class),
        (Split::Dev, cfg.dev_per_class),
        (Split::Test, cfg.test_per_class),
    ] {
        if n == 0 {
            continue;
        }
        let mut sequence: Vec<usize> = (0..cfg.classes)
            .flat_map(|c| std::iter::repeat_n(c, n))
            .collect();
        sequence.shuffle(&mut rng);
        for (d, chunk) in sequence.chunks(cfg.turns_per_dialogue).enumerate() {
            let first = rng.gen_range(0..SPEAKERS.len());
            let second = (first + rng.gen_range(1..SPEAKERS.len())) % SPEAKERS.len();
            let utterances = chunk
                .iter()
                .enumerate()
                .map(|(t, &label)| {
                    let mut words: Vec<&str> = (0..cfg.words_per_utterance)
                        .map(|_| vocab[label][rng.gen_range(0..vocab[label].len())].as_str())
                        .collect();
                    if !filler.is_empty() {
                        for _ in 0..cfg.filler_per_utterance {
                            let pos = rng.gen_range(0..=words.len());
                            words.insert(pos, filler[rng.gen_range(0..filler.len())].as_str());
                        }
                    }
                    Utterance {
                        speaker: SPEAKERS[if t % 2 == 0 { first } else { second }].to_string(),
                        text: format!("{}.", words.join(" ")),
                        label,
                    }
                })
                .collect();
            conversations.push(Conversation {
                id: format!("synth-{}-{d:04}", split.name()),
                utterances,
                split: Some(split),
            });
        }
    }
    Ok(Corpus {
        labels,
        conversations,
    })
}

/// Per-class utterance counts, for quick checks against [`CorpusStats`].
pub fn class_counts(corpus: &Corpus) -> HashMap<usize, usize> {
    let mut counts = HashMap::new();
    for u in corpus.conversations.iter().flat_map(|c| &c.utterances) {
        *counts.entry(u.label).or_insert(0) += 1;
    }
    counts
}
