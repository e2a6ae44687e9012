//! The synthetic factor world: which latent factor lives in which input band,
//! the value pattern each factor level emits, and feature-matrix synthesis.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TasksError};
use crate::model::EncoderConfig;
use crate::numerics::Tensor;
use crate::rng::{fill_normal, normal, rng_for};

/// Content vocabulary. The first [`KEYWORD_COUNT`] entries are the keyword
/// classes, the next four blocks of five are slot values (city, time, artist,
/// playlist), and the final ten are filler words.
pub const CONTENT_WORDS: [&str; 40] = [
    // keywords (classes of the keyword-spotting task)
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
    // city slot values
    "paris", "tokyo", "oslo", "cairo", "lima",
    // time slot values
    "dawn", "noon", "dusk", "midnight", "evening",
    // artist slot values
    "miles", "nina", "elvis", "aretha", "dylan",
    // playlist slot values
    "jazz", "focus", "workout", "chill", "roadtrip",
    // fillers
    "please", "kindly", "now", "today", "again", "maybe", "just", "really", "soon", "later",
];

pub const KEYWORD_COUNT: usize = 10;
/// Extra keyword-task classes beyond the ten keywords.
pub const SILENCE_LABEL: &str = "silence";
pub const UNKNOWN_LABEL: &str = "unknown";

pub const SLOT_TYPES: [&str; 4] = ["city", "time", "artist", "playlist"];
pub const SLOT_VALUES_PER_TYPE: usize = 5;

/// Content-word index range holding the values of a slot type.
pub fn slot_value_range(slot_type: usize) -> std::ops::Range<usize> {
    let start = KEYWORD_COUNT + slot_type * SLOT_VALUES_PER_TYPE;
    start..start + SLOT_VALUES_PER_TYPE
}

/// Content-word index range holding filler words.
pub const FILLER_RANGE: std::ops::Range<usize> =
    KEYWORD_COUNT + SLOT_TYPES.len() * SLOT_VALUES_PER_TYPE..CONTENT_WORDS.len();

/// Slot type owning a content-word index, if any.
pub fn slot_type_of_word(word: usize) -> Option<usize> {
    (0..SLOT_TYPES.len()).find(|&t| slot_value_range(t).contains(&word))
}

pub const EMOTIONS: [&str; 4] = ["happy", "sad", "neutral", "angry"];
pub const ACTIONS: [&str; 6] =
    ["activate", "deactivate", "increase", "decrease", "bring", "change"];
pub const OBJECTS: [&str; 8] =
    ["lights", "music", "heat", "lamp", "door", "volume", "shoes", "juice"];
pub const LOCATIONS: [&str; 4] = ["kitchen", "bedroom", "washroom", "none"];

pub const SPEAKER_COUNT: usize = 10;

pub fn speaker_label(speaker: usize) -> String {
    format!("<|speaker{}|>", speaker + 1)
}

/// Latent factors of variation. Each factor may be bound to one input band
/// (and therefore first surfaces at one encoder layer).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Speaker,
    Emotion,
    IntentAction,
    IntentObject,
    IntentLocation,
    Content,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::Speaker,
        Factor::Emotion,
        Factor::IntentAction,
        Factor::IntentObject,
        Factor::IntentLocation,
        Factor::Content,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Factor::Speaker => "speaker",
            Factor::Emotion => "emotion",
            Factor::IntentAction => "intent-action",
            Factor::IntentObject => "intent-object",
            Factor::IntentLocation => "intent-location",
            Factor::Content => "content",
        }
    }

    pub fn from_name(name: &str) -> Option<Factor> {
        Factor::ALL.iter().copied().find(|f| f.name() == name)
    }

    /// Number of distinct values the factor takes.
    pub fn cardinality(&self) -> usize {
        match self {
            Factor::Speaker => SPEAKER_COUNT,
            Factor::Emotion => EMOTIONS.len(),
            Factor::IntentAction => ACTIONS.len(),
            Factor::IntentObject => OBJECTS.len(),
            Factor::IntentLocation => LOCATIONS.len(),
            Factor::Content => CONTENT_WORDS.len(),
        }
    }

    fn pattern_tag(&self) -> u64 {
        match self {
            Factor::Speaker => 1,
            Factor::Emotion => 2,
            Factor::IntentAction => 3,
            Factor::IntentObject => 4,
            Factor::IntentLocation => 5,
            Factor::Content => 6,
        }
    }
}

/// World construction knobs: factor-to-band bindings, frame noise, and the
/// seed the per-value band patterns are drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Factor -> input band index (equivalently, the encoder layer where the
    /// factor first surfaces). Unbound factors are never injected.
    pub bindings: BTreeMap<Factor, usize>,
    /// Standard deviation of the Gaussian noise added to every feature cell.
    pub noise_std: f64,
    /// Band-pattern scale of the content factor. Content changes per frame,
    /// so it must stand clearly above the frame noise for transcription.
    pub content_pattern_std: f64,
    /// Band-pattern scale of the single-valued factors. Kept close to the
    /// frame noise so their linear recoverability degrades measurably with
    /// every mixing hop above the bound layer instead of saturating.
    pub nuisance_pattern_std: f64,
    /// Seed for the per-value band patterns.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let bindings = Factor::ALL
            .iter()
            .enumerate()
            .map(|(band, &factor)| (factor, band))
            .collect();
        WorldConfig {
            bindings,
            noise_std: 0.1,
            content_pattern_std: 0.7,
            nuisance_pattern_std: 0.12,
            seed: 0x0f_ac_70_85,
        }
    }
}

impl WorldConfig {
    fn pattern_std_for(&self, factor: Factor) -> f64 {
        match factor {
            Factor::Content => self.content_pattern_std,
            _ => self.nuisance_pattern_std,
        }
    }
}

/// Per-frame duration bounds of a transcript, inclusive.
pub const MIN_TRANSCRIPT_LEN: usize = 4;
pub const MAX_TRANSCRIPT_LEN: usize = 8;

/// One concrete draw of every factor for a single sample. `content_words`
/// holds one entry per frame; `None` leaves the content band silent.
#[derive(Debug, Clone)]
pub struct FactorDraw {
    pub speaker: usize,
    pub emotion: usize,
    pub action: usize,
    pub object: usize,
    pub location: usize,
    pub content_words: Vec<Option<usize>>,
}

impl FactorDraw {
    /// Value of a single-valued (non-content) factor.
    pub fn value_of(&self, factor: Factor) -> Option<usize> {
        match factor {
            Factor::Speaker => Some(self.speaker),
            Factor::Emotion => Some(self.emotion),
            Factor::IntentAction => Some(self.action),
            Factor::IntentObject => Some(self.object),
            Factor::IntentLocation => Some(self.location),
            Factor::Content => None,
        }
    }
}

/// Factor world with frozen per-value band patterns.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    band_width: usize,
    bands: usize,
    patterns: BTreeMap<Factor, Vec<Vec<f64>>>,
}

impl World {
    pub fn new(config: WorldConfig, encoder: &EncoderConfig) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (&factor, &band) in &config.bindings {
            if band >= encoder.layers {
                return Err(TasksError::BandOutOfRange {
                    factor: factor.name().to_string(),
                    band,
                    bands: encoder.layers,
                });
            }
            if let Some(prev) = seen.insert(band, factor) {
                return Err(TasksError::BandCollision {
                    band,
                    first: prev.name().to_string(),
                    second: factor.name().to_string(),
                });
            }
        }
        let patterns = config
            .bindings
            .keys()
            .map(|&factor| {
                let per_value = (0..factor.cardinality())
                    .map(|value| {
                        let mut rng = rng_for(
                            config.seed,
                            &[factor.pattern_tag(), value as u64],
                        );
                        let mut pattern = vec![0.0; encoder.band_width];
                        fill_normal(&mut rng, config.pattern_std_for(factor), &mut pattern);
                        pattern
                    })
                    .collect();
                (factor, per_value)
            })
            .collect();
        Ok(World {
            config,
            band_width: encoder.band_width,
            bands: encoder.layers,
            patterns,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn is_bound(&self, factor: Factor) -> bool {
        self.config.bindings.contains_key(&factor)
    }

    /// Band (== first surfacing encoder layer) a factor is bound to.
    pub fn band_of(&self, factor: Factor) -> Result<usize> {
        self.config.bindings.get(&factor).copied().ok_or_else(|| {
            TasksError::UnboundFactor(factor.name().to_string())
        })
    }

    /// The frozen band pattern a factor value emits.
    pub fn pattern(&self, factor: Factor, value: usize) -> Result<&[f64]> {
        let per_value = self
            .patterns
            .get(&factor)
            .ok_or_else(|| TasksError::UnboundFactor(factor.name().to_string()))?;
        per_value
            .get(value)
            .map(Vec::as_slice)
            .ok_or(TasksError::FactorValueOutOfRange {
                factor: factor.name().to_string(),
                value,
                cardinality: factor.cardinality(),
            })
    }

    /// Synthesize the `[frames, bands * band_width]` feature matrix for one
    /// sample: each bound factor writes its value pattern into its band on
    /// every frame (content varies per frame), then i.i.d. Gaussian noise is
    /// added to every cell.
    pub fn features(&self, draw: &FactorDraw, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let frames = draw.content_words.len();
        if frames == 0 {
            return Err(TasksError::EmptyTranscript);
        }
        let width = self.bands * self.band_width;
        let mut values = vec![0.0; frames * width];
        for (&factor, &band) in &self.config.bindings {
            let col0 = band * self.band_width;
            match factor {
                Factor::Content => {
                    for (t, word) in draw.content_words.iter().enumerate() {
                        if let Some(word) = *word {
                            let pattern = self.pattern(Factor::Content, word)?;
                            let row = t * width + col0;
                            values[row..row + self.band_width]
                                .copy_from_slice(pattern);
                        }
                    }
                }
                _ => {
                    let value = draw.value_of(factor).expect("non-content factor");
                    let pattern = self.pattern(factor, value)?;
                    for t in 0..frames {
                        let row = t * width + col0;
                        values[row..row + self.band_width].copy_from_slice(pattern);
                    }
                }
            }
        }
        for cell in values.iter_mut() {
            *cell += normal(rng) * self.config.noise_std;
        }
        Ok(Tensor::new(vec![frames, width], values).expect("finite features"))
    }
}
