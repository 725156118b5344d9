//! Template grammar format.
//!
//! Plain text, one declaration per line:
//!
//! ```text
//! template agreement_across_pp
//! phenomenon sv_agreement
//! range long
//! S -> NP PP @verb[slot=v]
//! NP -> @det[lemma=the] @noun[slot=subj]
//! PP -> @prep @det[lemma=the] @noun[num=opp]
//! link subj v
//! ```
//!
//! Rules are `LHS -> RHS...` with uppercase nonterminals, `@category[...]`
//! lexical slots, and anything else a literal token. Repeated LHS lines are
//! alternatives. Slot features: `slot=NAME` binds the position for links,
//! `num=sg|pl|subj|opp` pins its number (absolute, or relative to the
//! subject), `anim=yes|no` filters the lexicon, `lemma=WORD` fixes the
//! lemma. `link NOUN VERB` declares number agreement; the first link of a
//! template is the designated subject-verb dependency. Grammars must be
//! non-recursive so the language is finite.

use super::lexicon::PosTag;
use super::{CorpusError, Number, Phenomenon, RangeTag, Result};
use std::collections::{BTreeMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberSpec {
    Free,
    Fixed(Number),
    SameAsSubject,
    OppositeOfSubject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotFeatures {
    pub slot: Option<String>,
    pub number: NumberSpec,
    pub animate: Option<bool>,
    pub lemma: Option<String>,
}

impl Default for SlotFeatures {
    fn default() -> Self {
        SlotFeatures {
            slot: None,
            number: NumberSpec::Free,
            animate: None,
            lemma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Symbol {
    NonTerminal(String),
    Slot { pos: PosTag, features: SlotFeatures },
    Literal(String),
}

pub type Production = Vec<Symbol>;

/// One non-recursive template with its agreement links. The first link is
/// the designated subject-verb dependency.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarTemplate {
    pub name: String,
    pub phenomenon: Phenomenon,
    pub range: RangeTag,
    pub rules: BTreeMap<String, Vec<Production>>,
    pub links: Vec<(String, String)>,
}

pub const START_SYMBOL: &str = "S";

impl GrammarTemplate {
    pub fn main_link(&self) -> (&str, &str) {
        let (a, b) = &self.links[0];
        (a, b)
    }

    fn slot_names(&self) -> HashSet<&str> {
        let mut names = HashSet::new();
        for prods in self.rules.values() {
            for prod in prods {
                for sym in prod {
                    if let Symbol::Slot { features, .. } = sym {
                        if let Some(s) = &features.slot {
                            names.insert(s.as_str());
                        }
                    }
                }
            }
        }
        names
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| CorpusError::BadTemplate {
            template: self.name.clone(),
            msg,
        };
        if !self.rules.contains_key(START_SYMBOL) {
            return Err(bad(format!("no production for start symbol {START_SYMBOL}")));
        }
        // Every referenced nonterminal must be defined.
        for prods in self.rules.values() {
            for prod in prods {
                for sym in prod {
                    if let Symbol::NonTerminal(nt) = sym {
                        if !self.rules.contains_key(nt) {
                            return Err(bad(format!("undefined nonterminal {nt}")));
                        }
                    }
                }
            }
        }
        // Non-recursion: depth-first search for a cycle in the nonterminal
        // reference graph.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut marks: BTreeMap<&str, Mark> =
            self.rules.keys().map(|k| (k.as_str(), Mark::New)).collect();
        fn visit<'a>(
            nt: &'a str,
            rules: &'a BTreeMap<String, Vec<Production>>,
            marks: &mut BTreeMap<&'a str, Mark>,
        ) -> Option<String> {
            marks.insert(nt, Mark::Active);
            for prod in &rules[nt] {
                for sym in prod {
                    if let Symbol::NonTerminal(next) = sym {
                        match marks[next.as_str()] {
                            Mark::Active => return Some(next.clone()),
                            Mark::New => {
                                if let Some(c) = visit(next, rules, marks) {
                                    return Some(c);
                                }
                            }
                            Mark::Done => {}
                        }
                    }
                }
            }
            marks.insert(nt, Mark::Done);
            None
        }
        for nt in self.rules.keys() {
            if marks[nt.as_str()] == Mark::New {
                if let Some(symbol) = visit(nt, &self.rules, &mut marks) {
                    return Err(CorpusError::Recursive {
                        template: self.name.clone(),
                        symbol,
                    });
                }
            }
        }
        // Links refer to declared slots; exactly one designated dependency.
        if self.links.is_empty() {
            return Err(bad("no agreement link declared".into()));
        }
        let slots = self.slot_names();
        for (a, b) in &self.links {
            for s in [a, b] {
                if !slots.contains(s.as_str()) {
                    return Err(bad(format!("link references unknown slot {s}")));
                }
            }
        }
        if self.phenomenon == Phenomenon::Npi && !slots.contains("lic") {
            return Err(bad("npi template needs a licensor slot named lic".into()));
        }
        Ok(())
    }
}

fn parse_symbol(tok: &str, line: usize) -> Result<Symbol> {
    if let Some(rest) = tok.strip_prefix('@') {
        let (cat, feats) = match rest.find('[') {
            Some(i) => {
                if !rest.ends_with(']') {
                    return Err(CorpusError::Parse {
                        line,
                        msg: format!("unterminated feature list in {tok}"),
                    });
                }
                (&rest[..i], Some(&rest[i + 1..rest.len() - 1]))
            }
            None => (rest, None),
        };
        let pos = PosTag::parse(cat).ok_or_else(|| CorpusError::Parse {
            line,
            msg: format!("unknown terminal category @{cat}"),
        })?;
        let mut features = SlotFeatures::default();
        if let Some(feats) = feats {
            for kv in feats.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(|| CorpusError::Parse {
                    line,
                    msg: format!("feature {kv:?} is not key=value"),
                })?;
                match k {
                    "slot" => features.slot = Some(v.to_string()),
                    "num" => {
                        features.number = match v {
                            "sg" => NumberSpec::Fixed(Number::Sg),
                            "pl" => NumberSpec::Fixed(Number::Pl),
                            "subj" => NumberSpec::SameAsSubject,
                            "opp" => NumberSpec::OppositeOfSubject,
                            other => {
                                return Err(CorpusError::Parse {
                                    line,
                                    msg: format!("bad num feature {other:?}"),
                                })
                            }
                        }
                    }
                    "anim" => {
                        features.animate = match v {
                            "yes" => Some(true),
                            "no" => Some(false),
                            other => {
                                return Err(CorpusError::Parse {
                                    line,
                                    msg: format!("bad anim feature {other:?}"),
                                })
                            }
                        }
                    }
                    "lemma" => features.lemma = Some(v.to_string()),
                    other => {
                        return Err(CorpusError::Parse {
                            line,
                            msg: format!("unknown feature {other:?}"),
                        })
                    }
                }
            }
        }
        Ok(Symbol::Slot { pos, features })
    } else if tok.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
        Ok(Symbol::NonTerminal(tok.to_string()))
    } else {
        Ok(Symbol::Literal(tok.to_string()))
    }
}

/// Parse and validate a template file. An empty file is an empty list.
pub fn load_grammar(text: &str) -> Result<Vec<GrammarTemplate>> {
    struct Partial {
        name: String,
        phenomenon: Option<Phenomenon>,
        range: Option<RangeTag>,
        rules: BTreeMap<String, Vec<Production>>,
        links: Vec<(String, String)>,
        line: usize,
    }

    let mut templates: Vec<GrammarTemplate> = Vec::new();
    let mut current: Option<Partial> = None;
    let mut seen: HashSet<String> = HashSet::new();

    let finish = |p: Partial, templates: &mut Vec<GrammarTemplate>| -> Result<()> {
        let t = GrammarTemplate {
            phenomenon: p.phenomenon.ok_or_else(|| CorpusError::BadTemplate {
                template: p.name.clone(),
                msg: "missing phenomenon declaration".into(),
            })?,
            range: p.range.ok_or_else(|| CorpusError::BadTemplate {
                template: p.name.clone(),
                msg: "missing range declaration".into(),
            })?,
            name: p.name,
            rules: p.rules,
            links: p.links,
        };
        t.validate()?;
        templates.push(t);
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = match raw.find('#') {
            Some(i) => raw[..i].trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap();
        match head {
            "template" => {
                if let Some(p) = current.take() {
                    finish(p, &mut templates)?;
                }
                let name = words.next().ok_or(CorpusError::Parse {
                    line: line_no,
                    msg: "template needs a name".into(),
                })?;
                if !seen.insert(name.to_string()) {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        msg: format!("duplicate template name {name}"),
                    });
                }
                current = Some(Partial {
                    name: name.to_string(),
                    phenomenon: None,
                    range: None,
                    rules: BTreeMap::new(),
                    links: Vec::new(),
                    line: line_no,
                });
            }
            "phenomenon" | "range" | "link" => {
                let p = current.as_mut().ok_or(CorpusError::Parse {
                    line: line_no,
                    msg: format!("{head} outside a template block"),
                })?;
                match head {
                    "phenomenon" => {
                        let v = words.next().unwrap_or("");
                        p.phenomenon = Some(Phenomenon::parse(v).ok_or_else(|| {
                            CorpusError::Parse {
                                line: line_no,
                                msg: format!("unknown phenomenon {v:?}"),
                            }
                        })?);
                    }
                    "range" => {
                        let v = words.next().unwrap_or("");
                        p.range = Some(RangeTag::parse(v).ok_or_else(|| CorpusError::Parse {
                            line: line_no,
                            msg: format!("unknown range {v:?}"),
                        })?);
                    }
                    _ => {
                        let a = words.next();
                        let b = words.next();
                        match (a, b) {
                            (Some(a), Some(b)) => p.links.push((a.to_string(), b.to_string())),
                            _ => {
                                return Err(CorpusError::Parse {
                                    line: line_no,
                                    msg: "link needs two slot names".into(),
                                })
                            }
                        }
                    }
                }
            }
            _ => {
                // A production rule: LHS -> RHS...
                let p = current.as_mut().ok_or(CorpusError::Parse {
                    line: line_no,
                    msg: "rule outside a template block".into(),
                })?;
                let arrow = words.next();
                if arrow != Some("->") {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        msg: format!("expected '{head} -> ...'"),
                    });
                }
                if !head.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        msg: format!("rule head {head:?} must be a nonterminal"),
                    });
                }
                let mut prod = Vec::new();
                for tok in words {
                    prod.push(parse_symbol(tok, line_no)?);
                }
                if prod.is_empty() {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        msg: "empty right-hand side".into(),
                    });
                }
                p.rules.entry(head.to_string()).or_default().push(prod);
            }
        }
        // Silence the unused-field lint on Partial::line; it anchors error
        // messages when finish() fails late.
        if let Some(p) = &current {
            let _ = p.line;
        }
    }
    if let Some(p) = current.take() {
        finish(p, &mut templates)?;
    }
    Ok(templates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_empty_list() {
        assert!(load_grammar("").unwrap().is_empty());
        assert!(load_grammar("# only comments\n\n").unwrap().is_empty());
    }

    #[test]
    fn self_referencing_rule_is_a_recursion_error() {
        let text = "template loop\nphenomenon sv_agreement\nrange short\n\
                    S -> @noun[slot=subj] S @verb[slot=v]\nlink subj v\n";
        assert!(matches!(
            load_grammar(text),
            Err(CorpusError::Recursive { .. })
        ));
    }

    #[test]
    fn indirect_recursion_is_caught() {
        let text = "template loop2\nphenomenon sv_agreement\nrange short\n\
                    S -> A @verb[slot=v] @noun[slot=subj]\nA -> B\nB -> A\nlink subj v\n";
        assert!(matches!(
            load_grammar(text),
            Err(CorpusError::Recursive { .. })
        ));
    }

    #[test]
    fn unknown_terminal_category_errors_with_line() {
        let text = "template bad\nphenomenon sv_agreement\nrange short\nS -> @pronoun\n";
        match load_grammar(text) {
            Err(CorpusError::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("pronoun"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_link_is_rejected() {
        let text =
            "template nolink\nphenomenon sv_agreement\nrange short\nS -> @noun[slot=subj] @verb\n";
        assert!(matches!(
            load_grammar(text),
            Err(CorpusError::BadTemplate { .. })
        ));
    }

    #[test]
    fn link_to_unknown_slot_is_rejected() {
        let text = "template badlink\nphenomenon sv_agreement\nrange short\n\
                    S -> @noun[slot=subj] @verb[slot=v]\nlink subj nothere\n";
        assert!(matches!(
            load_grammar(text),
            Err(CorpusError::BadTemplate { .. })
        ));
    }

    #[test]
    fn shipped_grammar_parses_and_has_simple_agreement() {
        let templates = load_grammar(super::super::DEFAULT_GRAMMAR).unwrap();
        let simple: Vec<_> = templates
            .iter()
            .filter(|t| t.name == "sv_simple")
            .collect();
        assert_eq!(simple.len(), 1);
        assert_eq!(simple[0].phenomenon, Phenomenon::SvAgreement);
        assert_eq!(simple[0].range, RangeTag::Short);
        assert_eq!(simple[0].main_link(), ("subj", "v"));
    }

    #[test]
    fn alternatives_accumulate_under_one_head() {
        let text = "template alts\nphenomenon sv_agreement\nrange short\n\
                    S -> NP @verb[slot=v]\nNP -> @det[lemma=the] @noun[slot=subj]\n\
                    NP -> @det[lemma=a] @noun[slot=subj]\nlink subj v\n";
        let ts = load_grammar(text).unwrap();
        assert_eq!(ts[0].rules["NP"].len(), 2);
    }
}
