//! Synthetic syntax corpora.
//!
//! Sentences are generated from non-recursive CFG templates with
//! grammatical-number feature propagation, then annotated with the
//! subject-verb dependency, the intervening nouns split into attractors
//! (number opposite to the subject) and non-attractors, and the
//! subject-verb distance.

mod generate;
mod grammar;
mod lexicon;

pub use generate::{enumerate_exhaustive, generate, generate_minimal_pairs};
pub use grammar::{load_grammar, GrammarTemplate, Production, SlotFeatures, Symbol};
pub use lexicon::{LexEntry, Lexicon, PosTag};

use std::collections::BTreeMap;
use thiserror::Error;

/// Shipped lexicon (~200 lemmas) and template set.
pub const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.tsv");
pub const DEFAULT_GRAMMAR: &str = include_str!("../../data/grammar.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("template {template}: recursion through {symbol}")]
    Recursive { template: String, symbol: String },
    #[error("template {template}: {msg}")]
    BadTemplate { template: String, msg: String },
    #[error("lexicon has no entry for {0}")]
    MissingCategory(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("annotation indices out of range or unordered: subject {subject}, verb {verb}, length {len}")]
    BadIndices {
        subject: usize,
        verb: usize,
        len: usize,
    },
    #[error("split fractions invalid: train {train}, valid {valid}")]
    BadFractions { train: f64, valid: f64 },
    #[error("stored annotation disagrees with recomputation for {0:?}")]
    InconsistentAnnotation(Vec<String>),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Number {
    Sg,
    Pl,
}

impl Number {
    pub fn flip(self) -> Number {
        match self {
            Number::Sg => Number::Pl,
            Number::Pl => Number::Sg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Number::Sg => "sg",
            Number::Pl => "pl",
        }
    }

    pub fn parse(s: &str) -> Option<Number> {
        match s {
            "sg" => Some(Number::Sg),
            "pl" => Some(Number::Pl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phenomenon {
    SvAgreement,
    Reflexive,
    Npi,
}

impl Phenomenon {
    pub fn name(self) -> &'static str {
        match self {
            Phenomenon::SvAgreement => "sv_agreement",
            Phenomenon::Reflexive => "reflexive",
            Phenomenon::Npi => "npi",
        }
    }

    pub fn parse(s: &str) -> Option<Phenomenon> {
        match s {
            "sv_agreement" => Some(Phenomenon::SvAgreement),
            "reflexive" => Some(Phenomenon::Reflexive),
            "npi" => Some(Phenomenon::Npi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RangeTag {
    Short,
    Long,
}

impl RangeTag {
    pub fn name(self) -> &'static str {
        match self {
            RangeTag::Short => "short",
            RangeTag::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Option<RangeTag> {
        match s {
            "short" => Some(RangeTag::Short),
            "long" => Some(RangeTag::Long),
            _ => None,
        }
    }
}

/// A token sequence with its agreement annotation. `verb_index` points at
/// the agreement target, which is a verb, auxiliary, or reflexive depending
/// on the template.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub subject_index: usize,
    pub verb_index: usize,
    pub subject_number: Number,
    pub verb_number: Number,
    /// (index, number) of every noun strictly between subject and verb.
    pub intervening_nouns: Vec<(usize, Number)>,
    pub attractor_count: usize,
    pub non_attractor_count: usize,
    pub distance: usize,
    pub grammatical: bool,
    pub template: String,
    pub phenomenon: Phenomenon,
}

/// Which contrast a minimal pair realizes. For NPI items all three of the
/// pairwise contrasts are emitted; in the `IntrusiveVsUngrammatical` case
/// the `grammatical` field of the pair holds the intrusive (preferred)
/// member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContrastKind {
    Ungrammatical,
    Intrusive,
    IntrusiveVsUngrammatical,
}

impl ContrastKind {
    pub fn label(self) -> &'static str {
        match self {
            ContrastKind::Ungrammatical => "grammatical vs. ungrammatical",
            ContrastKind::Intrusive => "grammatical vs. intrusive",
            ContrastKind::IntrusiveVsUngrammatical => "intrusive vs. ungrammatical",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContrastKind::Ungrammatical => "ungrammatical",
            ContrastKind::Intrusive => "intrusive",
            ContrastKind::IntrusiveVsUngrammatical => "intrusive_vs_ungrammatical",
        }
    }

    pub fn parse(s: &str) -> Option<ContrastKind> {
        match s {
            "ungrammatical" => Some(ContrastKind::Ungrammatical),
            "intrusive" => Some(ContrastKind::Intrusive),
            "intrusive_vs_ungrammatical" => Some(ContrastKind::IntrusiveVsUngrammatical),
            _ => None,
        }
    }
}

/// Two sentences differing in exactly one token: the preferred member and
/// its contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimalPair {
    pub grammatical: Vec<String>,
    pub contrast: Vec<String>,
    pub kind: ContrastKind,
    pub phenomenon: Phenomenon,
    pub range: RangeTag,
    pub template: String,
}

impl MinimalPair {
    /// Index of the single differing token; errors if the members do not
    /// differ in exactly one position.
    pub fn differing_position(&self) -> Result<usize> {
        if self.grammatical.len() != self.contrast.len() {
            return Err(CorpusError::InconsistentAnnotation(self.grammatical.clone()));
        }
        let diffs: Vec<usize> = self
            .grammatical
            .iter()
            .zip(&self.contrast)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        if diffs.len() == 1 {
            Ok(diffs[0])
        } else {
            Err(CorpusError::InconsistentAnnotation(self.grammatical.clone()))
        }
    }
}

/// Annotate a token sequence given the subject and agreement-target
/// positions. Counts attractors and non-attractors strictly between the
/// two; pronoun-like nouns ("someone") count as intervening nouns.
pub fn annotate(
    tokens: &[String],
    subject_index: usize,
    verb_index: usize,
    lexicon: &Lexicon,
) -> Result<AnnotatedSentence> {
    if subject_index >= verb_index || verb_index >= tokens.len() {
        return Err(CorpusError::BadIndices {
            subject: subject_index,
            verb: verb_index,
            len: tokens.len(),
        });
    }
    let subject_number = lexicon
        .noun_number(&tokens[subject_index])
        .ok_or_else(|| CorpusError::UnknownToken(tokens[subject_index].clone()))?;
    let verb_number = lexicon
        .agreement_number(&tokens[verb_index])
        .ok_or_else(|| CorpusError::UnknownToken(tokens[verb_index].clone()))?;

    let mut intervening = Vec::new();
    for i in subject_index + 1..verb_index {
        if let Some(n) = lexicon.noun_number(&tokens[i]) {
            intervening.push((i, n));
        }
    }
    let attractor_count = intervening.iter().filter(|(_, n)| *n != subject_number).count();
    let non_attractor_count = intervening.len() - attractor_count;

    Ok(AnnotatedSentence {
        tokens: tokens.to_vec(),
        subject_index,
        verb_index,
        subject_number,
        verb_number,
        intervening_nouns: intervening,
        attractor_count,
        non_attractor_count,
        distance: verb_index - subject_index,
        grammatical: verb_number == subject_number,
        template: String::new(),
        phenomenon: Phenomenon::SvAgreement,
    })
}

/// Deterministic shuffle-and-cut split. Sizes are the rounded fractions of
/// the corpus; the remainder is the test set. The three parts are disjoint
/// and exhaustive.
pub fn split(
    corpus: &[AnnotatedSentence],
    train_fraction: f64,
    valid_fraction: f64,
    seed: u64,
) -> Result<(
    Vec<AnnotatedSentence>,
    Vec<AnnotatedSentence>,
    Vec<AnnotatedSentence>,
)> {
    if !(0.0..=1.0).contains(&train_fraction)
        || !(0.0..=1.0).contains(&valid_fraction)
        || train_fraction + valid_fraction > 1.0
    {
        return Err(CorpusError::BadFractions {
            train: train_fraction,
            valid: valid_fraction,
        });
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n = corpus.len();
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let n_valid = ((valid_fraction * n as f64).round() as usize).min(n - n_train);
    let pick = |r: std::ops::Range<usize>| r.map(|i| corpus[idx[i]].clone()).collect::<Vec<_>>();
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_valid),
        pick(n_train + n_valid..n),
    ))
}

const CORPUS_HEADER: &str = "tokens\tsubject_index\tverb_index\tsubject_number\tverb_number\tattractors\tnon_attractors\tdistance\tgrammatical\ttemplate\tphenomenon";

/// UTF-8 TSV serialization, one sentence per row.
pub fn write_corpus_tsv(corpus: &[AnnotatedSentence]) -> String {
    let mut out = String::from(CORPUS_HEADER);
    out.push('\n');
    for s in corpus {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.tokens.join(" "),
            s.subject_index,
            s.verb_index,
            s.subject_number.name(),
            s.verb_number.name(),
            s.attractor_count,
            s.non_attractor_count,
            s.distance,
            s.grammatical,
            s.template,
            s.phenomenon.name(),
        ));
    }
    out
}

/// Parse the corpus TSV. Every row is re-annotated through the lexicon and
/// checked against its stored counts, so a corrupted file cannot smuggle in
/// inconsistent annotations.
pub fn read_corpus_tsv(text: &str, lexicon: &Lexicon) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != CORPUS_HEADER {
                return Err(CorpusError::Parse {
                    line: 1,
                    msg: "unexpected corpus header".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 11 {
            return Err(CorpusError::Parse {
                line: lineno + 1,
                msg: format!("expected 11 columns, got {}", cols.len()),
            });
        }
        let tokens: Vec<String> = cols[0].split(' ').map(str::to_string).collect();
        let parse_usize = |s: &str| {
            s.parse::<usize>().map_err(|_| CorpusError::Parse {
                line: lineno + 1,
                msg: format!("bad integer {s:?}"),
            })
        };
        let subject_index = parse_usize(cols[1])?;
        let verb_index = parse_usize(cols[2])?;
        let mut s = annotate(&tokens, subject_index, verb_index, lexicon)?;
        let check = |ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(CorpusError::InconsistentAnnotation(tokens.clone()))
            }
        };
        check(Some(s.subject_number) == Number::parse(cols[3]))?;
        check(Some(s.verb_number) == Number::parse(cols[4]))?;
        check(s.attractor_count == parse_usize(cols[5])?)?;
        check(s.non_attractor_count == parse_usize(cols[6])?)?;
        check(s.distance == parse_usize(cols[7])?)?;
        check(s.grammatical == (cols[8] == "true"))?;
        s.template = cols[9].to_string();
        s.phenomenon = Phenomenon::parse(cols[10]).ok_or_else(|| CorpusError::Parse {
            line: lineno + 1,
            msg: format!("bad phenomenon {:?}", cols[10]),
        })?;
        out.push(s);
    }
    Ok(out)
}

const PAIRS_HEADER: &str = "grammatical\tcontrast\tkind\tphenomenon\trange\ttemplate";

pub fn write_pairs_tsv(pairs: &[MinimalPair]) -> String {
    let mut out = String::from(PAIRS_HEADER);
    out.push('\n');
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.grammatical.join(" "),
            p.contrast.join(" "),
            p.kind.name(),
            p.phenomenon.name(),
            p.range.name(),
            p.template,
        ));
    }
    out
}

pub fn read_pairs_tsv(text: &str) -> Result<Vec<MinimalPair>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != PAIRS_HEADER {
                return Err(CorpusError::Parse {
                    line: 1,
                    msg: "unexpected pairs header".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(CorpusError::Parse {
                line: lineno + 1,
                msg: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let bad = |what: &str| CorpusError::Parse {
            line: lineno + 1,
            msg: format!("bad {what}"),
        };
        let pair = MinimalPair {
            grammatical: cols[0].split(' ').map(str::to_string).collect(),
            contrast: cols[1].split(' ').map(str::to_string).collect(),
            kind: ContrastKind::parse(cols[2]).ok_or_else(|| bad("kind"))?,
            phenomenon: Phenomenon::parse(cols[3]).ok_or_else(|| bad("phenomenon"))?,
            range: RangeTag::parse(cols[4]).ok_or_else(|| bad("range"))?,
            template: cols[5].to_string(),
        };
        pair.differing_position()?;
        out.push(pair);
    }
    Ok(out)
}

/// Vocabulary of a corpus: sorted unique tokens.
pub fn vocabulary(corpus: &[AnnotatedSentence]) -> Vec<String> {
    let mut set: BTreeMap<&str, ()> = BTreeMap::new();
    for s in corpus {
        for t in &s.tokens {
            set.insert(t, ());
        }
    }
    set.into_keys().map(str::to_string).collect()
}
