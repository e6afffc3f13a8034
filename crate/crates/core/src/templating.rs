//! Cloze templates, verbalizers, and assembly of prompt + demonstrations into
//! a single token sequence with exact position bookkeeping.
//!
//! Layout of an assembled input:
//!
//! ```text
//! [prompt] [SEP] [demo_1 with label word at its mask slot] [SEP] ... [demo_K ...] [SEP]
//! ```
//!
//! The prompt span covers the rendered prompt minus its mask token. Each
//! demonstration context span covers the rendered demonstration minus its
//! label word. Both are contiguous ranges with one excluded position.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, TaskSpec};
use crate::error::{Error, Result};
use crate::retrieval::DemonstrationSet;
use crate::tokenizer::{split_words, TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplatePart {
    Literal(String),
    TextA,
    TextB,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    parts: Vec<TemplatePart>,
}

impl Template {
    pub fn new(parts: Vec<TemplatePart>) -> Result<Self> {
        let masks = parts.iter().filter(|p| **p == TemplatePart::Mask).count();
        if masks != 1 {
            return Err(Error::Template(format!(
                "template needs exactly one mask slot, found {masks}"
            )));
        }
        if !parts.contains(&TemplatePart::TextA) {
            return Err(Error::Template("template has no {a} slot".into()));
        }
        Ok(Self { parts })
    }

    /// Parses `{a}`, `{b}` and `{mask}` placeholders; everything else is literal.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut rest = text.trim();
        while let Some(open) = rest.find('{') {
            let literal = &rest[..open];
            if !literal.trim().is_empty() {
                parts.push(TemplatePart::Literal(literal.trim().to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Template("unclosed `{`".into()))?
                + open;
            parts.push(match &rest[open + 1..close] {
                "a" => TemplatePart::TextA,
                "b" => TemplatePart::TextB,
                "mask" => TemplatePart::Mask,
                other => {
                    return Err(Error::Template(format!(
                        "unknown placeholder `{{{other}}}`"
                    )))
                }
            });
            rest = &rest[close + 1..];
        }
        if !rest.trim().is_empty() {
            parts.push(TemplatePart::Literal(rest.trim().to_string()));
        }
        Self::new(parts)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parts(&self) -> &[TemplatePart] {
        &self.parts
    }

    pub fn validate_for(&self, spec: &TaskSpec) -> Result<()> {
        let has_b = self.parts.contains(&TemplatePart::TextB);
        if has_b != (spec.input_arity == 2) {
            return Err(Error::Template(format!(
                "template {} a {{b}} slot but task `{}` has arity {}",
                if has_b { "has" } else { "lacks" },
                spec.name,
                spec.input_arity
            )));
        }
        Ok(())
    }

    /// Every literal word, for vocabulary construction.
    pub fn literal_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                TemplatePart::Literal(s) => Some(s.as_str()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verbalizer {
    words: Vec<String>,
    token_ids: Vec<TokenId>,
}

impl Verbalizer {
    pub fn new(words: Vec<String>, tokenizer: &Tokenizer) -> Result<Self> {
        let mut token_ids = Vec::with_capacity(words.len());
        for w in &words {
            let pieces = split_words(w);
            if pieces.len() != 1 {
                return Err(Error::Verbalizer(format!(
                    "label word `{w}` is {} tokens, must be exactly one",
                    pieces.len()
                )));
            }
            let id = tokenizer.token_id(&pieces[0]).ok_or_else(|| {
                Error::Verbalizer(format!("label word `{w}` is not in the vocabulary"))
            })?;
            if token_ids.contains(&id) {
                return Err(Error::Verbalizer(format!("label word `{w}` used twice")));
            }
            token_ids.push(id);
        }
        Ok(Self { words, token_ids })
    }

    /// Reads `class_name<TAB>word` lines, ordered by the task's classes.
    pub fn parse_words(text: &str, spec: &TaskSpec) -> Result<Vec<String>> {
        let mut words: Vec<Option<String>> = vec![None; spec.num_classes()];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (class, word) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: Default::default(),
                line: i + 1,
                message: "expected `class_name<TAB>word`".into(),
            })?;
            let k = spec
                .class_index(class.trim())
                .ok_or_else(|| Error::UnknownLabel {
                    label: class.trim().to_string(),
                    line: i + 1,
                })?;
            words[k] = Some(word.trim().to_string());
        }
        words
            .into_iter()
            .enumerate()
            .map(|(k, w)| {
                w.ok_or_else(|| {
                    Error::Verbalizer(format!("no word for class `{}`", spec.class_names[k]))
                })
            })
            .collect()
    }

    pub fn load_words(path: &Path, spec: &TaskSpec) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_words(&text, spec)
    }

    pub fn num_classes(&self) -> usize {
        self.words.len()
    }

    pub fn word_of(&self, class: usize) -> &str {
        &self.words[class]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token_of(&self, class: usize) -> TokenId {
        self.token_ids[class]
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    /// Example text substituted at a slot; the only truncatable kind.
    Text,
    Literal,
    Mask,
    Label,
    Separator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Prompt,
    Demo(usize),
    Structure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub kind: PieceKind,
    pub owner: Owner,
    pub tokens: Vec<TokenId>,
}

impl Piece {
    fn protected(&self) -> bool {
        self.kind != PieceKind::Text
    }

    /// Demonstration text is trimmed before prompt text.
    fn tier(&self) -> u8 {
        match self.owner {
            Owner::Demo(_) => 0,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub example_id: String,
    pub gold_label: usize,
    pub pieces: Vec<Piece>,
}

impl RenderedPrompt {
    pub fn token_ids(&self) -> Vec<TokenId> {
        self.pieces
            .iter()
            .flat_map(|p| p.tokens.iter().copied())
            .collect()
    }
}

fn render(
    example: &LabeledExample,
    template: &Template,
    tokenizer: &Tokenizer,
    owner: Owner,
    label_token: Option<TokenId>,
) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    for part in &template.parts {
        let (kind, tokens) = match part {
            TemplatePart::Literal(s) => (PieceKind::Literal, tokenizer.encode(s)),
            TemplatePart::TextA => (PieceKind::Text, tokenizer.encode(&example.text_a)),
            TemplatePart::TextB => {
                let b = example.text_b.as_deref().ok_or_else(|| {
                    Error::Template(format!("example {} has no text_b", example.id))
                })?;
                (PieceKind::Text, tokenizer.encode(b))
            }
            TemplatePart::Mask => match label_token {
                Some(t) => (PieceKind::Label, vec![t]),
                None => (PieceKind::Mask, vec![tokenizer.mask_id()]),
            },
        };
        if !tokens.is_empty() {
            pieces.push(Piece {
                kind,
                owner,
                tokens,
            });
        }
    }
    Ok(pieces)
}

pub fn render_prompt(
    example: &LabeledExample,
    template: &Template,
    tokenizer: &Tokenizer,
) -> Result<RenderedPrompt> {
    Ok(RenderedPrompt {
        example_id: example.id.clone(),
        gold_label: example.label,
        pieces: render(example, template, tokenizer, Owner::Prompt, None)?,
    })
}

/// Renders a demonstration with its label word substituted at the mask slot.
pub fn render_demonstration(
    example: &LabeledExample,
    demo_index: usize,
    template: &Template,
    verbalizer: &Verbalizer,
    tokenizer: &Tokenizer,
) -> Result<Vec<Piece>> {
    render(
        example,
        template,
        tokenizer,
        Owner::Demo(demo_index),
        Some(verbalizer.token_of(example.label)),
    )
}

/// Trims unprotected (text) pieces until the total length fits `max_length`.
///
/// Demonstration text goes first, then prompt text. Within a tier the longest
/// piece loses its last token; equal lengths trim the later piece. Every text
/// piece keeps at least one token.
pub fn truncate(pieces: &[Piece], max_length: usize) -> Result<Vec<Piece>> {
    let mut out = pieces.to_vec();
    let mut total: usize = out.iter().map(|p| p.tokens.len()).sum();
    while total > max_length {
        let victim = [0u8, 1]
            .iter()
            .find_map(|&tier| {
                out.iter()
                    .enumerate()
                    .filter(|(_, p)| !p.protected() && p.tier() == tier && p.tokens.len() > 1)
                    .max_by(|(i, a), (j, b)| a.tokens.len().cmp(&b.tokens.len()).then(i.cmp(j)))
                    .map(|(i, _)| i)
            })
            .ok_or_else(|| {
                Error::Length(format!(
                    "{total} tokens cannot be reduced to {max_length} without touching protected positions"
                ))
            })?;
        out[victim].tokens.pop();
        total -= 1;
    }
    Ok(out)
}

/// A half-open token range with at most one excluded position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub excluded: Option<usize>,
}

impl Span {
    pub fn new(range: Range<usize>, excluded: Option<usize>) -> Self {
        Self {
            start: range.start,
            end: range.end,
            excluded,
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.start..self.end)
            .filter(|p| Some(*p) != self.excluded)
            .collect()
    }

    pub fn len(&self) -> usize {
        let hole = self
            .excluded
            .is_some_and(|e| (self.start..self.end).contains(&e));
        (self.end - self.start) - usize::from(hole)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub example_id: String,
    pub gold_label: usize,
    pub token_ids: Vec<TokenId>,
    pub mask_position: usize,
    pub prompt_span: Span,
    /// Label-word position of demonstration `k`.
    pub demo_label_positions: Vec<usize>,
    /// Class displayed at each demonstration's label position.
    pub demo_labels: Vec<usize>,
    pub demo_context_spans: Vec<Span>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_demos(&self) -> usize {
        self.demo_label_positions.len()
    }

    /// Checks every layout invariant against the tokenizer and verbalizer.
    pub fn check(&self, tokenizer: &Tokenizer, verbalizer: &Verbalizer) -> Result<()> {
        let fail = |m: String| Err(Error::Span(format!("{}: {m}", self.example_id)));
        let masks = self
            .token_ids
            .iter()
            .filter(|&&t| t == tokenizer.mask_id())
            .count();
        if masks != 1 || self.token_ids.get(self.mask_position) != Some(&tokenizer.mask_id()) {
            return fail(format!("expected one mask at {}", self.mask_position));
        }
        for (k, (&pos, &label)) in self
            .demo_label_positions
            .iter()
            .zip(&self.demo_labels)
            .enumerate()
        {
            let got = self.token_ids.get(pos).map(|&t| tokenizer.decode_token(t));
            if got != Some(verbalizer.word_of(label)) {
                return fail(format!("demo {k} label position decodes to {got:?}"));
            }
        }
        let mut spans = vec![&self.prompt_span];
        spans.extend(&self.demo_context_spans);
        let mut prev_end = 0;
        for s in spans {
            if s.start < prev_end || s.end > self.len() || s.is_empty() {
                return fail(format!("span {:?} out of order, out of bounds or empty", s));
            }
            if s.positions()
                .iter()
                .any(|&p| self.token_ids[p] == tokenizer.sep_id())
            {
                return fail(format!("span {:?} covers a separator", s));
            }
            prev_end = s.end;
        }
        if !self.prompt_span.range().contains(&self.mask_position)
            || self.prompt_span.positions().contains(&self.mask_position)
        {
            return fail("mask must sit inside the prompt range but outside its span".into());
        }
        for (span, &pos) in self
            .demo_context_spans
            .iter()
            .zip(&self.demo_label_positions)
        {
            if span.positions().contains(&pos) {
                return fail("label word inside its context span".into());
            }
        }
        Ok(())
    }
}

pub fn assemble_input(
    prompt: &RenderedPrompt,
    demos: &DemonstrationSet,
    verbalizer: &Verbalizer,
    template: &Template,
    tokenizer: &Tokenizer,
    max_length: usize,
) -> Result<EncodedInput> {
    let sep = Piece {
        kind: PieceKind::Separator,
        owner: Owner::Structure,
        tokens: vec![tokenizer.sep_id()],
    };
    let mut pieces = prompt.pieces.clone();
    pieces.push(sep.clone());
    let mut demo_labels = Vec::with_capacity(demos.len());
    for (k, demo) in demos.examples().iter().enumerate() {
        if demo.label >= verbalizer.num_classes() {
            return Err(Error::Verbalizer(format!(
                "demonstration {} has label {} without a word",
                demo.id, demo.label
            )));
        }
        pieces.extend(render_demonstration(
            demo, k, template, verbalizer, tokenizer,
        )?);
        pieces.push(sep.clone());
        demo_labels.push(demo.label);
    }
    let pieces = truncate(&pieces, max_length)?;

    let k = demos.len();
    let mut token_ids = Vec::new();
    let mut mask_position = None;
    let mut prompt_end = 0;
    let mut demo_ranges: Vec<Option<(usize, usize)>> = vec![None; k];
    let mut demo_label_positions = vec![usize::MAX; k];
    for piece in &pieces {
        let start = token_ids.len();
        token_ids.extend_from_slice(&piece.tokens);
        let end = token_ids.len();
        match (piece.owner, piece.kind) {
            (Owner::Prompt, kind) => {
                if kind == PieceKind::Mask {
                    mask_position = Some(start);
                }
                prompt_end = end;
            }
            (Owner::Demo(d), kind) => {
                if kind == PieceKind::Label {
                    demo_label_positions[d] = start;
                }
                let r = demo_ranges[d].get_or_insert((start, end));
                r.1 = end;
            }
            (Owner::Structure, _) => {}
        }
    }
    let mask_position =
        mask_position.ok_or_else(|| Error::Template("rendered prompt has no mask".into()))?;
    let demo_context_spans = demo_ranges
        .iter()
        .zip(&demo_label_positions)
        .map(|(r, &label)| {
            let (s, e) = r.expect("every demonstration renders at least its label word");
            Span::new(s..e, Some(label))
        })
        .collect();
    Ok(EncodedInput {
        example_id: prompt.example_id.clone(),
        gold_label: prompt.gold_label,
        token_ids,
        mask_position,
        prompt_span: Span::new(0..prompt_end, Some(mask_position)),
        demo_label_positions,
        demo_labels,
        demo_context_spans,
    })
}
