//! Prompted target layout, constrained greedy decoding, and label parsing.
//!
//! Classification tasks decode against a [`ConstraintTrie`] whose
//! root-to-leaf paths are exactly the legal rendered targets (task tag,
//! begin token, prompt wording, label, end token), so a constrained decode
//! parses successfully with probability 1 no matter how the model is
//! initialized. Generation tasks (slot filling, transcription) always
//! decode unconstrained.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, NormalizedStack, SpeechModel, Vocabulary};
use crate::tasks::{render_target, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum DecodingError {
    #[error("unknown prompt template id '{0}' (expected none | short | long)")]
    UnknownTemplate(String),
    #[error("task '{task}' cannot be trie-constrained: {reason}")]
    UnsupportedTask { task: String, reason: &'static str },
    #[error("malformed constraint paths: {0}")]
    TrieShape(String),
    #[error("decode budget {max} is shorter than the longest legal path {longest}")]
    MaxLengthTooSmall { longest: usize, max: usize },
    #[error("non-finite logit among candidates at step {step}")]
    NonFiniteLogit { step: usize },
    #[error("no legal continuation at step {step}")]
    DeadEnd { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DecodingError>;

/// Prompt wording placed between the begin-of-sequence token and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    /// Bare label.
    #[default]
    None,
    /// "<subject> is <label> ."
    Short,
    /// "The <subject> is <label> ."
    Long,
}

impl PromptTemplate {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "none" => Ok(PromptTemplate::None),
            "short" => Ok(PromptTemplate::Short),
            "long" => Ok(PromptTemplate::Long),
            other => Err(DecodingError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            PromptTemplate::None => "none",
            PromptTemplate::Short => "short",
            PromptTemplate::Long => "long",
        }
    }

    /// Prompt tokens preceding the label for a given subject word.
    pub fn prefix(&self, subject: &str) -> Vec<String> {
        match self {
            PromptTemplate::None => vec![],
            PromptTemplate::Short => vec![subject.to_string(), "is".to_string()],
            PromptTemplate::Long => {
                vec!["The".to_string(), subject.to_string(), "is".to_string()]
            }
        }
    }

    /// Templated prompts close with a period; the bare layout does not.
    pub fn suffix(&self) -> Vec<String> {
        match self {
            PromptTemplate::None => vec![],
            _ => vec![".".to_string()],
        }
    }
}

/// How a task's outputs are generated at evaluation time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Mask logits to the constraint trie (classification tasks only).
    pub constrained: bool,
    /// Hard cap on the emitted sequence length, end token included.
    pub max_len: usize,
    pub template: PromptTemplate,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            constrained: true,
            max_len: 32,
            template: PromptTemplate::default(),
        }
    }
}

/// A decoded token sequence. `truncated` marks an unconstrained decode that
/// hit the length cap before emitting the end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    edges: BTreeMap<usize, usize>,
    terminal: bool,
}

/// Immutable token trie over every legal output of one classification task.
/// Each root-to-leaf path is one complete rendered target.
#[derive(Debug, Clone)]
pub struct ConstraintTrie {
    nodes: Vec<TrieNode>,
    leaf_count: usize,
    depth: usize,
}

impl ConstraintTrie {
    /// Build a trie from explicit token-id paths. Paths must be non-empty,
    /// duplicate-free, and prefix-free (every generated target ends with the
    /// unique end token, which guarantees both).
    pub fn from_paths(paths: &[Vec<usize>]) -> Result<Self> {
        if paths.is_empty() {
            return Err(DecodingError::TrieShape("no paths".into()));
        }
        let mut nodes = vec![TrieNode::default()];
        let mut leaf_count = 0;
        let mut depth = 0;
        for path in paths {
            if path.is_empty() {
                return Err(DecodingError::TrieShape("empty path".into()));
            }
            depth = depth.max(path.len());
            let mut at = 0;
            for &token in path {
                if nodes[at].terminal {
                    return Err(DecodingError::TrieShape(
                        "a path runs through another path's leaf".into(),
                    ));
                }
                at = match nodes[at].edges.get(&token) {
                    Some(&child) => child,
                    None => {
                        let child = nodes.len();
                        nodes.push(TrieNode::default());
                        nodes[at].edges.insert(token, child);
                        child
                    }
                };
            }
            if nodes[at].terminal {
                return Err(DecodingError::TrieShape("duplicate path".into()));
            }
            if !nodes[at].edges.is_empty() {
                return Err(DecodingError::TrieShape(
                    "a path is a prefix of another path".into(),
                ));
            }
            nodes[at].terminal = true;
            leaf_count += 1;
        }
        Ok(ConstraintTrie { nodes, leaf_count, depth })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Length in tokens of the longest legal path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Legal next tokens after following `prefix` from the root; `None` if
    /// the prefix leaves the trie.
    pub fn legal_after(&self, prefix: &[usize]) -> Option<Vec<usize>> {
        let mut at = 0;
        for token in prefix {
            at = *self.nodes[at].edges.get(token)?;
        }
        Some(self.nodes[at].edges.keys().copied().collect())
    }

    /// Every root-to-leaf path, in depth-first token order.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.leaf_count);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((at, path)) = stack.pop() {
            let node = &self.nodes[at];
            if node.terminal {
                out.push(path.clone());
            }
            for (&token, &child) in node.edges.iter().rev() {
                let mut next = path.clone();
                next.push(token);
                stack.push((child, next));
            }
        }
        out.sort();
        out
    }
}

/// Build the constraint trie of a classification task: one path per label,
/// each the full rendered target under `template`.
pub fn build_trie(
    spec: &TaskSpec,
    template: PromptTemplate,
    vocab: &Vocabulary,
) -> Result<ConstraintTrie> {
    if spec.kind() != TaskKind::Classification {
        return Err(DecodingError::UnsupportedTask {
            task: spec.id.clone(),
            reason: "generation tasks decode unconstrained",
        });
    }
    let labels = spec.enumerate_labels().ok_or(DecodingError::UnsupportedTask {
        task: spec.id.clone(),
        reason: "task enumerates no labels",
    })?;
    let paths = labels
        .iter()
        .map(|payload| {
            let rendered = render_target(spec, payload, template);
            vocab.encode(&rendered).map_err(DecodingError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    ConstraintTrie::from_paths(&paths)
}

fn best_candidate(
    logits: &[f64],
    candidates: &[usize],
    step: usize,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &token in candidates {
        let score = logits[token];
        if !score.is_finite() {
            return Err(DecodingError::NonFiniteLogit { step });
        }
        // Strict comparison: ties resolve to the lowest token id.
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((token, score));
        }
    }
    best.map(|(t, _)| t).ok_or(DecodingError::DeadEnd { step })
}

/// Greedy walk through the trie. `next_logits` maps the tokens emitted so
/// far to the logits of the next position; at every step the argmax is
/// taken over the current node's legal continuations only, so the result is
/// always a complete root-to-leaf path.
pub fn constrained_walk(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    trie: &ConstraintTrie,
    tag_id: usize,
) -> Result<Vec<usize>> {
    let mut tokens = vec![tag_id];
    if trie.legal_after(&tokens).is_none() {
        return Err(DecodingError::UnsupportedTask {
            task: format!("tag id {tag_id}"),
            reason: "trie was built for a different task tag",
        });
    }
    loop {
        let legal = trie
            .legal_after(&tokens)
            .expect("walk stays inside the trie");
        if legal.is_empty() {
            return Ok(tokens); // terminal leaf reached
        }
        let logits = next_logits(&tokens)?;
        let chosen = best_candidate(&logits, &legal, tokens.len())?;
        tokens.push(chosen);
    }
}

/// Plain greedy decode: full-vocabulary argmax until the end token or the
/// length cap.
pub fn unconstrained_walk(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    tag_id: usize,
    eos_id: usize,
    vocab_size: usize,
    max_len: usize,
) -> Result<Decoded> {
    let all: Vec<usize> = (0..vocab_size).collect();
    let mut tokens = vec![tag_id];
    while tokens.len() < max_len {
        let logits = next_logits(&tokens)?;
        let chosen = best_candidate(&logits, &all, tokens.len())?;
        tokens.push(chosen);
        if chosen == eos_id {
            return Ok(Decoded { tokens, truncated: false });
        }
    }
    Ok(Decoded { tokens, truncated: true })
}

fn model_step<'a>(
    model: &'a SpeechModel,
    memory: &'a [f64],
    frames: usize,
) -> impl FnMut(&[usize]) -> Result<Vec<f64>> + 'a {
    let vocab = model.vocab.len();
    move |tokens: &[usize]| {
        let logits = model
            .decoder
            .forward_eval(&model.params, memory, frames, tokens)?;
        Ok(logits[(tokens.len() - 1) * vocab..].to_vec())
    }
}

/// Trie-constrained greedy decode of one sample. The output is always a
/// complete legal path of `trie`.
pub fn constrained_greedy_decode(
    model: &SpeechModel,
    stack: &NormalizedStack,
    task_id: &str,
    trie: &ConstraintTrie,
    config: &DecodeConfig,
) -> Result<Decoded> {
    if config.max_len < trie.depth() {
        return Err(DecodingError::MaxLengthTooSmall {
            longest: trie.depth(),
            max: config.max_len,
        });
    }
    let memory = model.memory_eval(stack, task_id)?;
    let tag_id = model.tag_id(task_id)?;
    let tokens = constrained_walk(
        model_step(model, &memory, stack.frames),
        trie,
        tag_id,
    )?;
    Ok(Decoded { tokens, truncated: false })
}

/// Unconstrained greedy decode of one sample. The emitted sequence may be
/// an invalid label string; accuracy counts those as wrong.
pub fn unconstrained_decode(
    model: &SpeechModel,
    stack: &NormalizedStack,
    task_id: &str,
    config: &DecodeConfig,
) -> Result<Decoded> {
    let memory = model.memory_eval(stack, task_id)?;
    let tag_id = model.tag_id(task_id)?;
    let max_len = config.max_len.min(model.decoder.config().max_positions);
    unconstrained_walk(
        model_step(model, &memory, stack.frames),
        tag_id,
        model.vocab.eos_id(),
        model.vocab.len(),
        max_len,
    )
}

/// Match a decoded token string against the task's legal rendered targets.
/// Returns the label payload on an exact match and `None` otherwise
/// (parse failure is a value, scored as incorrect, never an error).
pub fn parse_label(
    tokens: &[String],
    spec: &TaskSpec,
    template: PromptTemplate,
) -> Option<Vec<String>> {
    spec.enumerate_labels()?
        .into_iter()
        .find(|payload| render_target(spec, payload, template) == tokens)
}

/// Transcript of a generation-task output: the tokens with the task tag,
/// begin, and end tokens stripped. Lenient about missing frame tokens so
/// truncated unconstrained decodes still score (badly) under WER/F1.
pub fn transcript_of(tokens: &[String], spec: &TaskSpec) -> Vec<String> {
    let mut slice: &[String] = tokens;
    if slice.first().is_some_and(|t| *t == spec.tag()) {
        slice = &slice[1..];
    }
    if slice.first().is_some_and(|t| t == crate::model::BOS) {
        slice = &slice[1..];
    }
    if slice.last().is_some_and(|t| t == crate::model::EOS) {
        slice = &slice[..slice.len() - 1];
    }
    slice.to_vec()
}
