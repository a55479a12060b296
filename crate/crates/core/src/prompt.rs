//! Natural-language rendering of acquisition metadata, hashed tokenization
//! and clause-level text dropout.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::MetadataRecord;

pub const DEFAULT_VOCAB_SIZE: usize = 8192;
/// Bumped whenever the sentence template changes; stored in label-space files.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub include_series_description: bool,
    /// Keep only the flip angle, TE, TR and TI clauses.
    pub numerical_only: bool,
    pub dropout_prob: f64,
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB_SIZE
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            include_series_description: false,
            numerical_only: false,
            dropout_prob: 0.0,
            seed: 0,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

/// Clauses of the template, in rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptField {
    Scanner,
    FieldStrength,
    Plane,
    Sequence,
    FlipAngle,
    EchoTime,
    RepetitionTime,
    Inversion,
    SeriesDescription,
}

impl PromptField {
    fn numerical(self) -> bool {
        matches!(
            self,
            PromptField::FlipAngle
                | PromptField::EchoTime
                | PromptField::RepetitionTime
                | PromptField::Inversion
        )
    }

    /// TE, TR and flip angle are always kept.
    pub fn droppable(self) -> bool {
        !matches!(
            self,
            PromptField::FlipAngle | PromptField::EchoTime | PromptField::RepetitionTime
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub fields_included: BTreeSet<PromptField>,
}

/// Clauses that the record can populate under `config`, before dropout.
pub fn candidate_fields(record: &MetadataRecord, config: &PromptConfig) -> Vec<PromptField> {
    use PromptField::*;
    let mut out = vec![Scanner, FieldStrength];
    if record.plane().is_some() {
        out.push(Plane);
    }
    out.extend([Sequence, FlipAngle, EchoTime, RepetitionTime, Inversion]);
    if config.include_series_description && record.series_description.is_some() {
        out.push(SeriesDescription);
    }
    if config.numerical_only {
        out.retain(|f| f.numerical());
    }
    out
}

fn clause(record: &MetadataRecord, field: PromptField) -> String {
    match field {
        PromptField::Scanner => format!(
            "acquired on a {} {}",
            record.manufacturer, record.scanner_model
        ),
        PromptField::FieldStrength => format!("at {} tesla", record.field_strength_tesla),
        PromptField::Plane => format!(
            "{} plane",
            record.plane().map(|p| p.as_str()).unwrap_or("UNKNOWN")
        ),
        PromptField::Sequence => format!(
            "sequence {} variant {}",
            record.sequence_type, record.sequence_variant
        ),
        PromptField::FlipAngle => format!("flip angle {} degrees", record.flip_angle_deg),
        PromptField::EchoTime => format!("echo time {} ms", record.te_ms),
        PromptField::RepetitionTime => format!("repetition time {} ms", record.tr_ms),
        PromptField::Inversion => match record.ti_ms {
            Some(ti) => format!("inversion time {ti} ms"),
            None => "no inversion pulse".to_string(),
        },
        PromptField::SeriesDescription => format!(
            "series description: {}",
            record.series_description.as_deref().unwrap_or("")
        ),
    }
}

/// Renders the fixed sentence template, removing each droppable clause with
/// probability `dropout_prob` using a generator seeded from `config.seed`.
pub fn render_prompt(record: &MetadataRecord, config: &PromptConfig) -> Prompt {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fields: BTreeSet<PromptField> = candidate_fields(record, config)
        .into_iter()
        .filter(|f| {
            // draw for every droppable clause so the stream does not depend on p
            let u: f64 = if f.droppable() { rng.random() } else { 1.0 };
            !(f.droppable() && u < config.dropout_prob)
        })
        .collect();

    let mut text = String::from("MRI scan");
    for head in [PromptField::Scanner, PromptField::FieldStrength] {
        if fields.contains(&head) {
            text.push(' ');
            text.push_str(&clause(record, head));
        }
    }
    for f in fields
        .iter()
        .filter(|f| !matches!(f, PromptField::Scanner | PromptField::FieldStrength))
    {
        text.push_str(", ");
        text.push_str(&clause(record, *f));
    }
    text.push('.');

    Prompt {
        token_ids: tokenize(&text, config.vocab_size),
        text,
        fields_included: fields,
    }
}

/// Lowercased word and number pieces. Numbers keep an inner decimal point and
/// are split from adjacent letters; everything else separates tokens.
pub fn token_strings(text: &str) -> Vec<String> {
    #[derive(PartialEq, Clone, Copy)]
    enum Run {
        Word,
        Number,
    }
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut run: Option<Run> = None;
    let flush = |current: &mut String, out: &mut Vec<String>| {
        if !current.is_empty() {
            out.push(std::mem::take(current));
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && run == Some(Run::Number)
            && !current.contains('.')
            && chars.get(i + 1).is_some_and(char::is_ascii_digit);
        let kind = if c.is_ascii_digit() || decimal_point {
            Some(Run::Number)
        } else if c.is_alphabetic() {
            Some(Run::Word)
        } else {
            None
        };
        if kind != run {
            flush(&mut current, &mut out);
        }
        if kind.is_some() {
            current.extend(c.to_lowercase());
        }
        run = kind;
    }
    flush(&mut current, &mut out);
    out
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    token_strings(text)
        .iter()
        .map(|t| (stable_hash(t.as_bytes()) % vocab_size as u64) as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::record::sample_record;
    use proptest::prelude::*;

    #[test]
    fn full_template_in_order() {
        let cfg = PromptConfig {
            include_series_description: true,
            ..PromptConfig::default()
        };
        let p = render_prompt(&sample_record(), &cfg);
        assert_eq!(
            p.text,
            "MRI scan acquired on a SIEMENS PRISMA at 3 tesla, AXIAL plane, sequence SE variant SK, \
             flip angle 90 degrees, echo time 25 ms, repetition time 1145 ms, no inversion pulse, \
             series description: T1 AX."
        );
        assert_eq!(p.fields_included.len(), 9);
        assert_eq!(p.token_ids, tokenize(&p.text, DEFAULT_VOCAB_SIZE));
    }

    #[test]
    fn inversion_clause() {
        let mut r = sample_record();
        r.ti_ms = Some(2500.0);
        let p = render_prompt(&r, &PromptConfig::default());
        assert!(p.text.contains("inversion time 2500 ms"));
        assert!(!p.text.contains("series description"));
    }

    #[test]
    fn numerical_only() {
        let mut r = sample_record();
        r.ti_ms = Some(150.0);
        let cfg = PromptConfig {
            numerical_only: true,
            include_series_description: true,
            ..PromptConfig::default()
        };
        let p = render_prompt(&r, &cfg);
        assert_eq!(
            p.text,
            "MRI scan, flip angle 90 degrees, echo time 25 ms, repetition time 1145 ms, inversion time 150 ms."
        );
        assert!(p.fields_included.iter().all(|f| f.numerical()));
    }

    #[test]
    fn full_dropout_keeps_te_tr_fa() {
        let cfg = PromptConfig {
            dropout_prob: 1.0,
            ..PromptConfig::default()
        };
        let p = render_prompt(&sample_record(), &cfg);
        assert_eq!(
            p.text,
            "MRI scan, flip angle 90 degrees, echo time 25 ms, repetition time 1145 ms."
        );
    }

    #[test]
    fn missing_spacing_omits_plane() {
        let mut r = sample_record();
        r.voxel_spacing_mm = None;
        let p = render_prompt(&r, &PromptConfig::default());
        assert!(!p.fields_included.contains(&PromptField::Plane));
        assert!(!p.text.contains("plane"));
    }

    #[test]
    fn dropout_rate_matches_expectation() {
        let r = sample_record();
        let p = 0.2;
        let trials = 4000;
        let mut dropped = 0usize;
        let mut optional = 0usize;
        for seed in 0..trials {
            let cfg = PromptConfig {
                dropout_prob: p,
                seed,
                include_series_description: true,
                ..PromptConfig::default()
            };
            let cands = candidate_fields(&r, &cfg);
            let n = cands.iter().filter(|f| f.droppable()).count();
            optional += n;
            dropped += cands.len() - render_prompt(&r, &cfg).fields_included.len();
        }
        let expected = p * optional as f64;
        let sigma = (optional as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (dropped as f64 - expected).abs() <= 3.0 * sigma,
            "dropped {dropped}, expected {expected} ± {sigma}"
        );
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize("Echo time 25 ms", 8192),
            tokenize("echo TIME 25 ms", 8192)
        );
        assert!(tokenize("", 8192).is_empty());
        assert_eq!(
            token_strings("at 1.5 tesla, 25ms."),
            ["at", "1.5", "tesla", "25", "ms"]
        );
        assert_eq!(token_strings("SE\\IR T1"), ["se", "ir", "t", "1"]);
        assert_eq!(token_strings("1.2.3"), ["1.2", "3"]);
    }

    proptest! {
        #[test]
        fn token_ids_in_vocab(s in ".{0,80}", v in 1usize..10_000) {
            let ids = tokenize(&s, v);
            prop_assert!(ids.iter().all(|&id| (id as usize) < v));
            prop_assert_eq!(ids, tokenize(&s, v));
        }

        #[test]
        fn rendering_is_injective(te1 in 0u32..3000, te2 in 0u32..3000, tr in 1u32..100_000, m1 in "[A-Z]{1,6}", m2 in "[A-Z]{1,6}") {
            let mut a = sample_record();
            a.te_ms = f64::from(te1) / 10.0;
            a.tr_ms = f64::from(tr) / 10.0;
            a.manufacturer = m1.clone();
            let mut b = a.clone();
            b.te_ms = f64::from(te2) / 10.0;
            b.manufacturer = m2.clone();
            let cfg = PromptConfig::default();
            let same = te1 == te2 && m1 == m2;
            prop_assert_eq!(render_prompt(&a, &cfg).text == render_prompt(&b, &cfg).text, same);
        }
    }
}
