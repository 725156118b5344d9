//! Lexicon: lemma -> (part of speech, singular form, plural form, animacy).
//!
//! File format is TSV, one entry per line:
//!
//! ```text
//! lemma<TAB>pos<TAB>singular<TAB>plural<TAB>animacy(yes|no)
//! ```
//!
//! `#` starts a comment. Nouns, verbs, auxiliaries, and reflexives must have
//! distinct singular/plural forms; noun surface forms may not collide with
//! agreement-target forms, so annotation lookups stay unambiguous.

use super::{CorpusError, Number, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Aux,
    Det,
    Prep,
    Adj,
    Adv,
    Refl,
}

impl PosTag {
    pub fn name(self) -> &'static str {
        match self {
            PosTag::Noun => "noun",
            PosTag::Verb => "verb",
            PosTag::Aux => "aux",
            PosTag::Det => "det",
            PosTag::Prep => "prep",
            PosTag::Adj => "adj",
            PosTag::Adv => "adv",
            PosTag::Refl => "refl",
        }
    }

    pub fn parse(s: &str) -> Option<PosTag> {
        match s {
            "noun" => Some(PosTag::Noun),
            "verb" => Some(PosTag::Verb),
            "aux" => Some(PosTag::Aux),
            "det" => Some(PosTag::Det),
            "prep" => Some(PosTag::Prep),
            "adj" => Some(PosTag::Adj),
            "adv" => Some(PosTag::Adv),
            "refl" => Some(PosTag::Refl),
        _ => None,
        }
    }

    /// POS whose surface form marks grammatical number and can serve as an
    /// agreement target.
    fn is_agreement_target(self) -> bool {
        matches!(self, PosTag::Verb | PosTag::Aux | PosTag::Refl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    pub lemma: String,
    pub pos: PosTag,
    pub sg: String,
    pub pl: String,
    pub animate: bool,
}

impl LexEntry {
    pub fn realize(&self, number: Number) -> &str {
        match number {
            Number::Sg => &self.sg,
            Number::Pl => &self.pl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    noun_forms: HashMap<String, Number>,
    agreement_forms: HashMap<String, Number>,
}

impl Lexicon {
    pub fn from_tsv(text: &str) -> Result<Lexicon> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(CorpusError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 5 columns, got {}", cols.len()),
                });
            }
            let pos = PosTag::parse(cols[1]).ok_or_else(|| CorpusError::Parse {
                line: lineno + 1,
                msg: format!("unknown part of speech {:?}", cols[1]),
            })?;
            let animate = match cols[4] {
                "yes" => true,
                "no" => false,
                other => {
                    return Err(CorpusError::Parse {
                        line: lineno + 1,
                        msg: format!("animacy must be yes or no, got {other:?}"),
                    })
                }
            };
            let entry = LexEntry {
                lemma: cols[0].to_string(),
                pos,
                sg: cols[2].to_string(),
                pl: cols[3].to_string(),
                animate,
            };
            if matches!(pos, PosTag::Noun) || pos.is_agreement_target() {
                if entry.sg == entry.pl {
                    return Err(CorpusError::Parse {
                        line: lineno + 1,
                        msg: format!(
                            "{} {:?} must have distinct singular and plural forms",
                            pos.name(),
                            entry.lemma
                        ),
                    });
                }
            }
            entries.push(entry);
        }
        Lexicon::build(entries)
    }

    fn build(entries: Vec<LexEntry>) -> Result<Lexicon> {
        let mut noun_forms: HashMap<String, Number> = HashMap::new();
        let mut agreement_forms: HashMap<String, Number> = HashMap::new();
        let insert = |map: &mut HashMap<String, Number>,
                          form: &str,
                          number: Number,
                          lemma: &str|
         -> Result<()> {
            if let Some(prev) = map.get(form) {
                if *prev != number {
                    return Err(CorpusError::Parse {
                        line: 0,
                        msg: format!("form {form:?} of {lemma:?} has conflicting numbers"),
                    });
                }
            }
            map.insert(form.to_string(), number);
            Ok(())
        };
        for e in &entries {
            if e.pos == PosTag::Noun {
                insert(&mut noun_forms, &e.sg, Number::Sg, &e.lemma)?;
                insert(&mut noun_forms, &e.pl, Number::Pl, &e.lemma)?;
            } else if e.pos.is_agreement_target() {
                insert(&mut agreement_forms, &e.sg, Number::Sg, &e.lemma)?;
                insert(&mut agreement_forms, &e.pl, Number::Pl, &e.lemma)?;
            }
        }
        for form in noun_forms.keys() {
            if agreement_forms.contains_key(form) {
                return Err(CorpusError::Parse {
                    line: 0,
                    msg: format!("form {form:?} is both a noun and an agreement target"),
                });
            }
        }
        Ok(Lexicon {
            entries,
            noun_forms,
            agreement_forms,
        })
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    /// Entries matching a POS, an optional animacy restriction, and an
    /// optional fixed lemma, in file order.
    pub fn select(&self, pos: PosTag, animate: Option<bool>, lemma: Option<&str>) -> Vec<&LexEntry> {
        self.entries
            .iter()
            .filter(|e| e.pos == pos)
            .filter(|e| animate.is_none_or(|a| e.animate == a))
            .filter(|e| lemma.is_none_or(|l| e.lemma == l))
            .collect()
    }

    /// Number of a noun surface form, if the token is a known noun.
    pub fn noun_number(&self, token: &str) -> Option<Number> {
        self.noun_forms.get(token).copied()
    }

    /// Number of a verb/auxiliary/reflexive surface form.
    pub fn agreement_number(&self, token: &str) -> Option<Number> {
        self.agreement_forms.get(token).copied()
    }
}
