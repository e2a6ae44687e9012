//! Synthetic task suite: six sequence tasks over a shared factor world, with
//! deterministic data generation, target rendering, few-shot subsetting,
//! layer probes, and dataset files.

pub mod probe;
pub mod world;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::PromptTemplate;
use crate::model::{ModelError, Vocabulary, BOS, EOS};
use crate::numerics::{NumericsError, Tensor};
use crate::rng::{label_part, rng_for, shuffled_indices};

pub use probe::{probe_layers, probe_task_factor, ProbeConfig};
pub use world::{
    speaker_label, slot_type_of_word, slot_value_range, Factor, FactorDraw, World,
    WorldConfig, ACTIONS, CONTENT_WORDS, EMOTIONS, FILLER_RANGE, KEYWORD_COUNT,
    LOCATIONS, MAX_TRANSCRIPT_LEN, MIN_TRANSCRIPT_LEN, OBJECTS, SILENCE_LABEL,
    SLOT_TYPES, SLOT_VALUES_PER_TYPE, SPEAKER_COUNT, UNKNOWN_LABEL,
};

#[derive(Debug, Error)]
pub enum TasksError {
    #[error("factor '{0}' is not bound to any input band")]
    UnboundFactor(String),
    #[error("band {band} is bound to both '{first}' and '{second}'")]
    BandCollision { band: usize, first: String, second: String },
    #[error("factor '{factor}' bound to band {band}, but only {bands} bands exist")]
    BandOutOfRange { factor: String, band: usize, bands: usize },
    #[error("factor '{factor}' has no value {value} (cardinality {cardinality})")]
    FactorValueOutOfRange { factor: String, value: usize, cardinality: usize },
    #[error("a sample must span at least one frame")]
    EmptyTranscript,
    #[error("subset fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("subset of fraction {fraction} over {split_len} samples is empty")]
    SubsetEmpty { split_len: usize, fraction: f64 },
    #[error("probe needs at least {need} samples, got {have}")]
    ProbeDatasetTooSmall { have: usize, need: usize },
    #[error("probe labels are degenerate: {0}")]
    DegenerateProbe(String),
    #[error("dataset file malformed: {0}")]
    DatasetFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TasksError>;

/// File format version for dataset files.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// The six task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    KeywordSpotting,
    SpeakerId,
    EmotionRecognition,
    IntentClassification,
    SlotFilling,
    Asr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generation,
}

/// Which score a task reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    Accuracy,
    SlotTypeF1,
    Wer,
}

impl MetricId {
    /// Whether larger values are better (false only for error rates).
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, MetricId::Wer)
    }

    /// Short stable identifier used in tables and CSV output.
    pub fn id(&self) -> &'static str {
        match self {
            MetricId::Accuracy => "acc",
            MetricId::SlotTypeF1 => "stf1",
            MetricId::Wer => "wer",
        }
    }
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::KeywordSpotting,
        TaskFamily::SpeakerId,
        TaskFamily::EmotionRecognition,
        TaskFamily::IntentClassification,
        TaskFamily::SlotFilling,
        TaskFamily::Asr,
    ];

    pub fn default_id(&self) -> &'static str {
        match self {
            TaskFamily::KeywordSpotting => "KS",
            TaskFamily::SpeakerId => "SID",
            TaskFamily::EmotionRecognition => "ER",
            TaskFamily::IntentClassification => "IC",
            TaskFamily::SlotFilling => "SF",
            TaskFamily::Asr => "ASR",
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFamily::SlotFilling | TaskFamily::Asr => TaskKind::Generation,
            _ => TaskKind::Classification,
        }
    }

    pub fn metric(&self) -> MetricId {
        match self {
            TaskFamily::SlotFilling => MetricId::SlotTypeF1,
            TaskFamily::Asr => MetricId::Wer,
            _ => MetricId::Accuracy,
        }
    }

    /// Training epoch budget before any global scaling.
    pub fn base_epochs(&self) -> usize {
        match self {
            TaskFamily::SpeakerId => 40,
            TaskFamily::EmotionRecognition => 60,
            _ => 20,
        }
    }

    /// Subject word used by the prompt templates, for prompted tasks.
    pub fn prompt_subject(&self) -> Option<&'static str> {
        match self {
            TaskFamily::KeywordSpotting => Some("Keyword"),
            TaskFamily::SpeakerId => Some("Speaker"),
            TaskFamily::EmotionRecognition => Some("Emotion"),
            TaskFamily::IntentClassification => Some("Intent"),
            TaskFamily::SlotFilling | TaskFamily::Asr => None,
        }
    }

    /// Factors whose band binding the family's targets depend on.
    pub fn required_factors(&self) -> &'static [Factor] {
        match self {
            TaskFamily::KeywordSpotting | TaskFamily::SlotFilling | TaskFamily::Asr => {
                &[Factor::Content]
            }
            TaskFamily::SpeakerId => &[Factor::Speaker],
            TaskFamily::EmotionRecognition => &[Factor::Emotion],
            TaskFamily::IntentClassification => {
                &[Factor::IntentAction, Factor::IntentObject, Factor::IntentLocation]
            }
        }
    }
}

/// Sample counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 800, validation: 200, test: 200 }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One task instance: a family plus identity, prompt wording, and split sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub family: TaskFamily,
    pub prompt: PromptTemplate,
    pub splits: SplitSizes,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, prompt: PromptTemplate, splits: SplitSizes) -> Self {
        TaskSpec { id: family.default_id().to_string(), family, prompt, splits }
    }

    /// Task tag token, e.g. `<|ER|>`.
    pub fn tag(&self) -> String {
        format!("<|{}|>", self.id)
    }

    pub fn kind(&self) -> TaskKind {
        self.family.kind()
    }

    pub fn metric(&self) -> MetricId {
        self.family.metric()
    }

    pub fn base_epochs(&self) -> usize {
        self.family.base_epochs()
    }

    /// The finite label list of a classification task (token sequences, in a
    /// fixed enumeration order). Generation tasks have none.
    pub fn enumerate_labels(&self) -> Option<Vec<Vec<String>>> {
        match self.family {
            TaskFamily::KeywordSpotting => Some(
                (0..KEYWORD_COUNT)
                    .map(|c| vec![CONTENT_WORDS[c].to_string()])
                    .chain([
                        vec![SILENCE_LABEL.to_string()],
                        vec![UNKNOWN_LABEL.to_string()],
                    ])
                    .collect(),
            ),
            TaskFamily::SpeakerId => {
                Some((0..SPEAKER_COUNT).map(|s| vec![speaker_label(s)]).collect())
            }
            TaskFamily::EmotionRecognition => {
                Some(EMOTIONS.iter().map(|e| vec![e.to_string()]).collect())
            }
            TaskFamily::IntentClassification => {
                let mut labels = Vec::new();
                for a in ACTIONS {
                    for o in OBJECTS {
                        for l in LOCATIONS {
                            labels.push(vec![
                                a.to_string(),
                                o.to_string(),
                                l.to_string(),
                            ]);
                        }
                    }
                }
                Some(labels)
            }
            TaskFamily::SlotFilling | TaskFamily::Asr => None,
        }
    }

    /// Stratification key used for label-balanced subsetting.
    pub fn stratum_of(&self, sample: &Sample) -> String {
        match self.kind() {
            TaskKind::Classification => sample.reference.join(" "),
            TaskKind::Generation => format!("len-{}", sample.reference.len()),
        }
    }
}

/// Assemble the full decoder target sequence for a payload: task tag, begin
/// token, prompt wording (classification only), payload, closing period for
/// templated prompts, end token.
pub fn render_target(
    spec: &TaskSpec,
    payload: &[String],
    template: PromptTemplate,
) -> Vec<String> {
    let mut target = vec![spec.tag(), BOS.to_string()];
    if let Some(subject) = spec.family.prompt_subject() {
        target.extend(template.prefix(subject));
        target.extend(payload.iter().cloned());
        target.extend(template.suffix());
    } else {
        target.extend(payload.iter().cloned());
    }
    target.push(EOS.to_string());
    target
}

/// One generated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// Index within the task's generation stream; unique across splits.
    pub id: u64,
    pub split: Split,
    /// Factor values (by factor name). `content` is only present where a
    /// single class describes the content band (keyword task).
    pub factors: BTreeMap<String, usize>,
    /// Surface words, one per frame (empty for silence).
    pub transcript: Vec<String>,
    /// Metric reference: the label tokens (classification), the slot-marked
    /// transcript (slot filling), or the plain transcript.
    pub reference: Vec<String>,
    /// Full decoder target sequence, `[tag, begin, ..., end]`.
    pub target: Vec<String>,
    /// `[frames, input_width]` feature matrix.
    pub features: Tensor,
}

/// A generated task dataset, split into train/validation/test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// The standard six-task suite in its canonical order.
pub fn standard_suite(splits: SplitSizes, prompt: PromptTemplate) -> Vec<TaskSpec> {
    TaskFamily::ALL
        .iter()
        .map(|&family| TaskSpec::new(family, prompt, splits))
        .collect()
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}

/// First `k` of a seeded partial shuffle of `0..n` (distinct draws).
fn choose_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Keyword-task class count: ten keywords plus silence and unknown.
pub const KEYWORD_CLASSES: usize = KEYWORD_COUNT + 2;
const SILENCE_CLASS: usize = KEYWORD_COUNT;
const UNKNOWN_CLASS: usize = KEYWORD_COUNT + 1;

struct DrawnSample {
    draw: FactorDraw,
    transcript: Vec<String>,
    reference: Vec<String>,
    content_class: Option<usize>,
}

fn draw_sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> DrawnSample {
    let speaker = below(rng, SPEAKER_COUNT);
    let emotion = below(rng, EMOTIONS.len());
    let action = below(rng, ACTIONS.len());
    let object = below(rng, OBJECTS.len());
    let location = below(rng, LOCATIONS.len());
    let frames =
        MIN_TRANSCRIPT_LEN + below(rng, MAX_TRANSCRIPT_LEN - MIN_TRANSCRIPT_LEN + 1);

    let words = |rng: &mut ChaCha8Rng, range: std::ops::Range<usize>| -> Vec<usize> {
        (0..frames).map(|_| range.start + below(rng, range.len())).collect()
    };
    let to_tokens = |ws: &[usize]| -> Vec<String> {
        ws.iter().map(|&w| CONTENT_WORDS[w].to_string()).collect()
    };

    let (content_words, transcript, reference, content_class) = match spec.family {
        TaskFamily::KeywordSpotting => {
            let class = below(rng, KEYWORD_CLASSES);
            match class {
                SILENCE_CLASS => (
                    vec![None; frames],
                    vec![],
                    vec![SILENCE_LABEL.to_string()],
                    Some(class),
                ),
                UNKNOWN_CLASS => {
                    let ws = words(rng, KEYWORD_COUNT..CONTENT_WORDS.len());
                    let transcript = to_tokens(&ws);
                    (
                        ws.into_iter().map(Some).collect(),
                        transcript,
                        vec![UNKNOWN_LABEL.to_string()],
                        Some(class),
                    )
                }
                keyword => (
                    vec![Some(keyword); frames],
                    vec![CONTENT_WORDS[keyword].to_string(); frames],
                    vec![CONTENT_WORDS[keyword].to_string()],
                    Some(class),
                ),
            }
        }
        TaskFamily::SpeakerId => {
            let ws = words(rng, 0..CONTENT_WORDS.len());
            let transcript = to_tokens(&ws);
            (
                ws.into_iter().map(Some).collect(),
                transcript,
                vec![speaker_label(speaker)],
                None,
            )
        }
        TaskFamily::EmotionRecognition => {
            let ws = words(rng, 0..CONTENT_WORDS.len());
            let transcript = to_tokens(&ws);
            (
                ws.into_iter().map(Some).collect(),
                transcript,
                vec![EMOTIONS[emotion].to_string()],
                None,
            )
        }
        TaskFamily::IntentClassification => {
            let ws = words(rng, 0..CONTENT_WORDS.len());
            let transcript = to_tokens(&ws);
            (
                ws.into_iter().map(Some).collect(),
                transcript,
                vec![
                    ACTIONS[action].to_string(),
                    OBJECTS[object].to_string(),
                    LOCATIONS[location].to_string(),
                ],
                None,
            )
        }
        TaskFamily::SlotFilling => {
            let slot_count = 1 + below(rng, 2);
            let types = choose_distinct(rng, SLOT_TYPES.len(), slot_count);
            let values: Vec<usize> = types
                .iter()
                .map(|&t| {
                    let range = slot_value_range(t);
                    range.start + below(rng, range.len())
                })
                .collect();
            let positions = choose_distinct(rng, frames, slot_count);
            let mut ws = words(rng, FILLER_RANGE);
            let mut slot_at: BTreeMap<usize, usize> = BTreeMap::new();
            for (slot, &pos) in positions.iter().enumerate() {
                ws[pos] = values[slot];
                slot_at.insert(pos, types[slot]);
            }
            let transcript = to_tokens(&ws);
            let mut marked = Vec::new();
            for (t, word) in transcript.iter().enumerate() {
                if let Some(&slot_type) = slot_at.get(&t) {
                    marked.push(format!("B-{}", SLOT_TYPES[slot_type]));
                    marked.push(word.clone());
                    marked.push(format!("E-{}", SLOT_TYPES[slot_type]));
                } else {
                    marked.push(word.clone());
                }
            }
            (ws.into_iter().map(Some).collect(), transcript, marked, None)
        }
        TaskFamily::Asr => {
            let ws = words(rng, 0..CONTENT_WORDS.len());
            let transcript = to_tokens(&ws);
            (ws.clone().into_iter().map(Some).collect(), transcript.clone(), transcript, None)
        }
    };

    DrawnSample {
        draw: FactorDraw {
            speaker,
            emotion,
            action,
            object,
            location,
            content_words,
        },
        transcript,
        reference,
        content_class,
    }
}

/// Generate a task dataset. A pure function of `(spec, world, run_seed)`:
/// sample `s` of task `id` is derived from the stream
/// `rng_for(run_seed, [label_part(id), s])`, so datasets regenerate bitwise
/// and splits stay disjoint by construction.
pub fn generate_task_data(
    spec: &TaskSpec,
    world: &World,
    run_seed: u64,
) -> Result<TaskData> {
    for &factor in spec.family.required_factors() {
        world.band_of(factor)?;
    }
    let mut data = TaskData {
        spec: spec.clone(),
        train: Vec::with_capacity(spec.splits.train),
        validation: Vec::with_capacity(spec.splits.validation),
        test: Vec::with_capacity(spec.splits.test),
    };
    let task_part = label_part(&spec.id);
    for s in 0..spec.splits.total() {
        let mut rng = rng_for(run_seed, &[task_part, s as u64]);
        let drawn = draw_sample(spec, &mut rng);
        let features = world.features(&drawn.draw, &mut rng)?;
        let mut factors = BTreeMap::new();
        for factor in [
            Factor::Speaker,
            Factor::Emotion,
            Factor::IntentAction,
            Factor::IntentObject,
            Factor::IntentLocation,
        ] {
            let value = drawn.draw.value_of(factor).expect("single-valued factor");
            factors.insert(factor.name().to_string(), value);
        }
        if let Some(class) = drawn.content_class {
            factors.insert(Factor::Content.name().to_string(), class);
        }
        let split = if s < spec.splits.train {
            Split::Train
        } else if s < spec.splits.train + spec.splits.validation {
            Split::Validation
        } else {
            Split::Test
        };
        let target = render_target(spec, &drawn.reference, spec.prompt);
        let sample = Sample {
            id: s as u64,
            split,
            factors,
            transcript: drawn.transcript,
            reference: drawn.reference,
            target,
            features,
        };
        match split {
            Split::Train => data.train.push(sample),
            Split::Validation => data.validation.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok(data)
}

/// Label-stratified subset of a split: takes `round(fraction * n)` samples,
/// apportioned per stratum by largest remainder, picked by a seeded shuffle
/// within each stratum. `fraction = 1.0` returns the whole split.
pub fn few_shot_subset(
    spec: &TaskSpec,
    split: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TasksError::FractionOutOfRange(fraction));
    }
    let target = (fraction * split.len() as f64).round() as usize;
    if target == 0 {
        return Err(TasksError::SubsetEmpty { split_len: split.len(), fraction });
    }
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, sample) in split.iter().enumerate() {
        strata.entry(spec.stratum_of(sample)).or_default().push(i);
    }
    // Largest-remainder apportionment of `target` across strata.
    let mut quotas: Vec<(String, usize, f64)> = strata
        .iter()
        .map(|(key, members)| {
            let exact = fraction * members.len() as f64;
            (key.clone(), exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|(_, q, _)| *q).sum();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        quotas[b].2.partial_cmp(&quotas[a].2).unwrap().then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if assigned >= target {
            break;
        }
        if quotas[i].1 < strata[&quotas[i].0].len() {
            quotas[i].1 += 1;
            assigned += 1;
        }
    }
    let mut picked = Vec::with_capacity(target);
    for (key, quota, _) in &quotas {
        let members = &strata[key];
        let mut rng = rng_for(seed, &[label_part(key)]);
        let order = shuffled_indices(&mut rng, members.len());
        for &slot in order.iter().take(*quota) {
            picked.push(members[slot]);
        }
    }
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| split[i].clone()).collect())
}

/// Token inventory covering every target the suite can render, independent of
/// the prompt template in use (prompt words are always included so the
/// vocabulary is stable across prompt settings).
pub fn vocabulary_for(specs: &[TaskSpec]) -> Result<Vocabulary> {
    let tags: Vec<String> = specs.iter().map(|s| s.tag()).collect();
    let mut specials: Vec<String> =
        (0..SPEAKER_COUNT).map(speaker_label).collect();
    for slot in SLOT_TYPES {
        specials.push(format!("B-{slot}"));
        specials.push(format!("E-{slot}"));
    }
    let mut words: Vec<String> =
        CONTENT_WORDS.iter().map(|w| w.to_string()).collect();
    words.extend([SILENCE_LABEL.to_string(), UNKNOWN_LABEL.to_string()]);
    words.extend(EMOTIONS.iter().map(|w| w.to_string()));
    words.extend(ACTIONS.iter().map(|w| w.to_string()));
    words.extend(OBJECTS.iter().map(|w| w.to_string()));
    words.extend(LOCATIONS.iter().map(|w| w.to_string()));
    for subject in ["Keyword", "Speaker", "Emotion", "Intent"] {
        words.push(subject.to_string());
    }
    words.extend(["The".to_string(), "is".to_string(), ".".to_string()]);
    Ok(Vocabulary::build(&tags, &specials, &words)?)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    spec: TaskSpec,
    counts: [usize; 3],
}

/// Write a dataset as line-delimited records: one header line, then one line
/// per sample in train, validation, test order.
pub fn write_dataset(path: &Path, data: &TaskData) -> Result<()> {
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        spec: data.spec.clone(),
        counts: [data.train.len(), data.validation.len(), data.test.len()],
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for split in Split::ALL {
        for sample in data.split(split) {
            serde_json::to_writer(&mut out, sample)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset file written by [`write_dataset`], validating the format
/// version and the per-split counts.
pub fn read_dataset(path: &Path) -> Result<TaskData> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| TasksError::DatasetFormat("empty file".to_string()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| TasksError::DatasetFormat(format!("bad header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(TasksError::DatasetFormat(format!(
            "format version {} (supported: {DATASET_FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut data = TaskData {
        spec: header.spec,
        train: vec![],
        validation: vec![],
        test: vec![],
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)?;
        match sample.split {
            Split::Train => data.train.push(sample),
            Split::Validation => data.validation.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    let counts = [data.train.len(), data.validation.len(), data.test.len()];
    if counts != header.counts {
        return Err(TasksError::DatasetFormat(format!(
            "header promises {:?} samples, file holds {:?}",
            header.counts, counts
        )));
    }
    Ok(data)
}
