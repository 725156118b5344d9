//! Sentence generation from templates.
//!
//! Generation is a pure function of (templates, lexicon, seed, count,
//! ratio): alternatives, free numbers, and lexeme choices are drawn from a
//! seeded stream in a fixed order. Ungrammatical items flip the number of
//! the designated agreement target only; every other slot keeps its value,
//! so a minimal pair differs in exactly one token.

use super::grammar::{GrammarTemplate, NumberSpec, Symbol};
use super::lexicon::{LexEntry, Lexicon, PosTag};
use super::{
    annotate, AnnotatedSentence, ContrastKind, CorpusError, MinimalPair, Number, Phenomenon,
    Result,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap, HashSet};

#[derive(Debug, Clone)]
enum Piece {
    Slot {
        pos: PosTag,
        slot: Option<String>,
        number: NumberSpec,
        animate: Option<bool>,
        lemma: Option<String>,
    },
    Literal(String),
}

/// Expand the start symbol into a flat piece sequence, resolving
/// nonterminal alternatives through the chooser.
fn expand(t: &GrammarTemplate, chooser: &mut dyn FnMut(usize) -> usize) -> Vec<Piece> {
    fn walk(
        t: &GrammarTemplate,
        nt: &str,
        out: &mut Vec<Piece>,
        chooser: &mut dyn FnMut(usize) -> usize,
    ) {
        let prods = &t.rules[nt];
        let prod = &prods[if prods.len() > 1 { chooser(prods.len()) } else { 0 }];
        for sym in prod {
            match sym {
                Symbol::NonTerminal(next) => walk(t, next, out, chooser),
                Symbol::Literal(w) => out.push(Piece::Literal(w.clone())),
                Symbol::Slot { pos, features } => out.push(Piece::Slot {
                    pos: *pos,
                    slot: features.slot.clone(),
                    number: features.number,
                    animate: features.animate,
                    lemma: features.lemma.clone(),
                }),
            }
        }
    }
    let mut out = Vec::new();
    walk(t, super::grammar::START_SYMBOL, &mut out, chooser);
    out
}

struct Realization {
    tokens: Vec<String>,
    /// Position of each named slot in the token sequence.
    positions: HashMap<String, usize>,
    /// Lexeme chosen for each named slot.
    entries: HashMap<String, LexEntry>,
    /// Final number assigned to each named slot.
    numbers: HashMap<String, Number>,
}

fn needs_number(pos: PosTag) -> bool {
    matches!(pos, PosTag::Noun | PosTag::Verb | PosTag::Aux | PosTag::Refl)
}

/// Assign numbers, pick lexemes, and emit surface tokens for one expanded
/// piece sequence. `flip_main` flips the designated agreement target
/// (ungrammatical variant). Determiners with number-marked forms agree with
/// the next noun to their right.
fn realize(
    t: &GrammarTemplate,
    pieces: &[Piece],
    lexicon: &Lexicon,
    chooser: &mut dyn FnMut(usize) -> usize,
    flip_main: bool,
) -> Result<Realization> {
    let (subj_slot, main_target) = t.main_link();
    let targets: HashSet<&str> = t.links.iter().map(|(_, v)| v.as_str()).collect();

    // Subject number first: pinned by the subject slot's spec if any.
    let subj_spec = pieces.iter().find_map(|p| match p {
        Piece::Slot { slot: Some(s), number, .. } if s == subj_slot => Some(*number),
        _ => None,
    });
    let subject_number = match subj_spec {
        Some(NumberSpec::Fixed(n)) => n,
        _ => {
            if chooser(2) == 0 {
                Number::Sg
            } else {
                Number::Pl
            }
        }
    };

    // Per-slot numbers.
    let mut numbers: Vec<Option<Number>> = Vec::with_capacity(pieces.len());
    for p in pieces {
        let n = match p {
            Piece::Literal(_) => None,
            Piece::Slot { pos, slot, number, .. } => {
                let is_subject = slot.as_deref() == Some(subj_slot);
                let is_target = slot.as_deref().is_some_and(|s| targets.contains(s));
                match number {
                    NumberSpec::Fixed(n) => Some(*n),
                    NumberSpec::SameAsSubject => Some(subject_number),
                    NumberSpec::OppositeOfSubject => Some(subject_number.flip()),
                    NumberSpec::Free => {
                        if is_subject {
                            Some(subject_number)
                        } else if is_target || !needs_number(*pos) {
                            None
                        } else if chooser(2) == 0 {
                            Some(Number::Sg)
                        } else {
                            Some(Number::Pl)
                        }
                    }
                }
            }
        };
        numbers.push(n);
    }

    // Agreement links, declared order; the first is the designated one.
    let slot_index: HashMap<&str, usize> = pieces
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p {
            Piece::Slot { slot: Some(s), .. } => Some((s.as_str(), i)),
            _ => None,
        })
        .collect();
    for (k, (controller, target)) in t.links.iter().enumerate() {
        let c = *slot_index
            .get(controller.as_str())
            .ok_or_else(|| CorpusError::BadTemplate {
                template: t.name.clone(),
                msg: format!("link controller {controller} not derived"),
            })?;
        let v = *slot_index
            .get(target.as_str())
            .ok_or_else(|| CorpusError::BadTemplate {
                template: t.name.clone(),
                msg: format!("link target {target} not derived"),
            })?;
        let mut n = numbers[c].ok_or_else(|| CorpusError::BadTemplate {
            template: t.name.clone(),
            msg: format!("link controller {controller} has no number"),
        })?;
        if k == 0 {
            debug_assert_eq!(target, main_target);
            if flip_main {
                n = n.flip();
            }
        }
        numbers[v] = Some(n);
    }

    // Lexeme choices.
    let mut entries: Vec<Option<LexEntry>> = Vec::with_capacity(pieces.len());
    for p in pieces {
        match p {
            Piece::Literal(_) => entries.push(None),
            Piece::Slot { pos, animate, lemma, .. } => {
                let candidates = lexicon.select(*pos, *animate, lemma.as_deref());
                if candidates.is_empty() {
                    return Err(CorpusError::MissingCategory(format!(
                        "@{}{}{}",
                        pos.name(),
                        animate.map(|a| if a { "[anim=yes]" } else { "[anim=no]" }).unwrap_or(""),
                        lemma.as_deref().map(|l| format!("[lemma={l}]")).unwrap_or_default(),
                    )));
                }
                let idx = if candidates.len() > 1 { chooser(candidates.len()) } else { 0 };
                entries.push(Some(candidates[idx].clone()));
            }
        }
    }

    // Surface tokens; determiners agree with the next noun to their right.
    let mut tokens: Vec<String> = Vec::with_capacity(pieces.len());
    for (i, p) in pieces.iter().enumerate() {
        let tok = match p {
            Piece::Literal(w) => w.clone(),
            Piece::Slot { pos, .. } => {
                let entry = entries[i].as_ref().unwrap();
                let n = match numbers[i] {
                    Some(n) => n,
                    None if *pos == PosTag::Det => pieces[i + 1..]
                        .iter()
                        .zip(&numbers[i + 1..])
                        .find_map(|(q, n)| match q {
                            Piece::Slot { pos: PosTag::Noun, .. } => *n,
                            _ => None,
                        })
                        .unwrap_or(Number::Sg),
                    None => Number::Sg,
                };
                entry.realize(n).to_string()
            }
        };
        tokens.push(tok);
    }

    let mut positions = HashMap::new();
    let mut named_entries = HashMap::new();
    let mut named_numbers = HashMap::new();
    for (i, p) in pieces.iter().enumerate() {
        if let Piece::Slot { slot: Some(s), .. } = p {
            positions.insert(s.clone(), i);
            if let Some(e) = &entries[i] {
                named_entries.insert(s.clone(), e.clone());
            }
            if let Some(n) = numbers[i] {
                named_numbers.insert(s.clone(), n);
            }
        }
    }
    Ok(Realization {
        tokens,
        positions,
        entries: named_entries,
        numbers: named_numbers,
    })
}

fn annotate_realization(
    t: &GrammarTemplate,
    r: &Realization,
    lexicon: &Lexicon,
) -> Result<AnnotatedSentence> {
    let (subj, verb) = t.main_link();
    let mut s = annotate(&r.tokens, r.positions[subj], r.positions[verb], lexicon)?;
    s.template = t.name.clone();
    s.phenomenon = t.phenomenon;
    Ok(s)
}

/// Generate `count` annotated sentences, distributed round-robin over the
/// templates. A draw against `grammatical_ratio` decides per item whether
/// the designated verb keeps or flips the subject's number.
pub fn generate(
    templates: &[GrammarTemplate],
    lexicon: &Lexicon,
    seed: u64,
    count: usize,
    grammatical_ratio: f64,
) -> Result<Vec<AnnotatedSentence>> {
    if templates.is_empty() || count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = &templates[i % templates.len()];
        let grammatical = rng.random::<f64>() < grammatical_ratio;
        let mut chooser = |n: usize| rng.random_range(0..n);
        let pieces = expand(t, &mut chooser);
        let r = realize(t, &pieces, lexicon, &mut chooser, !grammatical)?;
        out.push(annotate_realization(t, &r, lexicon)?);
    }
    Ok(out)
}

/// Exhaustively enumerate the distinct grammatical sentences of one
/// template: every production alternative, every free number, every lexeme.
/// Meant for small template-and-lexicon combinations (generalization sets,
/// confidence-profile corpora).
pub fn enumerate_exhaustive(
    t: &GrammarTemplate,
    lexicon: &Lexicon,
) -> Result<Vec<AnnotatedSentence>> {
    // Odometer over choice points: run the expansion/realization with a
    // chooser that replays a recorded index vector, incrementing it like a
    // mixed-radix counter discovered on the fly.
    let mut out = Vec::new();
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut counters: Vec<(usize, usize)> = Vec::new(); // (value, radix)
    loop {
        let mut pos = 0usize;
        let mut counters_now = counters.clone();
        let mut chooser = |n: usize| -> usize {
            if pos == counters_now.len() {
                counters_now.push((0, n));
            }
            let (v, _) = counters_now[pos];
            counters_now[pos].1 = n;
            pos += 1;
            v
        };
        let pieces = expand(t, &mut chooser);
        let r = realize(t, &pieces, lexicon, &mut chooser, false)?;
        counters = counters_now;
        if seen.insert(r.tokens.clone()) {
            out.push(annotate_realization(t, &r, lexicon)?);
        }
        // Increment the odometer.
        let mut i = counters.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            counters[i].0 += 1;
            if counters[i].0 < counters[i].1 {
                counters.truncate(i + 1);
                break;
            }
            counters[i].0 = 0;
        }
    }
}

/// Substitute the determiner filling a licensor slot.
fn with_licensor(
    base: &Realization,
    slot: &str,
    lemma: &str,
    lexicon: &Lexicon,
) -> Result<Vec<String>> {
    let entry = lexicon
        .select(PosTag::Det, None, Some(lemma))
        .first()
        .cloned()
        .cloned()
        .ok_or_else(|| CorpusError::MissingCategory(format!("@det[lemma={lemma}]")))?;
    let pos = *base
        .positions
        .get(slot)
        .ok_or_else(|| CorpusError::MissingCategory(format!("slot {slot}")))?;
    let mut tokens = base.tokens.clone();
    // Licensor determiners are number-neutral; the singular form is the form.
    tokens[pos] = entry.sg.clone();
    Ok(tokens)
}

/// Generate minimal pairs: one contrast per item for agreement and
/// reflexive templates, the three Table-style contrasts per item for NPI
/// templates. Every pair differs in exactly one token.
pub fn generate_minimal_pairs(
    templates: &[GrammarTemplate],
    lexicon: &Lexicon,
    seed: u64,
    count: usize,
) -> Result<Vec<MinimalPair>> {
    if templates.is_empty() || count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..count {
        let t = &templates[i % templates.len()];
        let mut chooser = |n: usize| rng.random_range(0..n);
        let pieces = expand(t, &mut chooser);
        let base = realize(t, &pieces, lexicon, &mut chooser, false)?;

        match t.phenomenon {
            Phenomenon::SvAgreement | Phenomenon::Reflexive => {
                let (_, target) = t.main_link();
                let vpos = base.positions[target];
                let entry = &base.entries[target];
                let flipped = base.numbers[target].flip();
                let mut contrast = base.tokens.clone();
                contrast[vpos] = entry.realize(flipped).to_string();
                out.push(MinimalPair {
                    grammatical: base.tokens.clone(),
                    contrast,
                    kind: ContrastKind::Ungrammatical,
                    phenomenon: t.phenomenon,
                    range: t.range,
                    template: t.name.clone(),
                });
            }
            Phenomenon::Npi => {
                // Licensor grid over the matrix slot `lic` and, when the
                // template embeds a clause, the embedded slot `emblic`.
                // Each of the three emitted contrasts differs in exactly
                // one licensor position.
                let has_embedded = base.positions.contains_key("emblic");
                let mk = |g: Vec<String>, c: Vec<String>, kind: ContrastKind| MinimalPair {
                    grammatical: g,
                    contrast: c,
                    kind,
                    phenomenon: t.phenomenon,
                    range: t.range,
                    template: t.name.clone(),
                };
                if has_embedded {
                    let both = {
                        let step = with_licensor(&base, "lic", "no", lexicon)?;
                        let tmp = Realization {
                            tokens: step,
                            ..clone_positions(&base)
                        };
                        with_licensor(&tmp, "emblic", "no", lexicon)?
                    };
                    let gram = {
                        let step = with_licensor(&base, "lic", "no", lexicon)?;
                        let tmp = Realization {
                            tokens: step,
                            ..clone_positions(&base)
                        };
                        with_licensor(&tmp, "emblic", "the", lexicon)?
                    };
                    let intrusive = {
                        let step = with_licensor(&base, "lic", "the", lexicon)?;
                        let tmp = Realization {
                            tokens: step,
                            ..clone_positions(&base)
                        };
                        with_licensor(&tmp, "emblic", "no", lexicon)?
                    };
                    let ungram = {
                        let step = with_licensor(&base, "lic", "the", lexicon)?;
                        let tmp = Realization {
                            tokens: step,
                            ..clone_positions(&base)
                        };
                        with_licensor(&tmp, "emblic", "the", lexicon)?
                    };
                    out.push(mk(both, intrusive.clone(), ContrastKind::Intrusive));
                    out.push(mk(
                        intrusive,
                        ungram.clone(),
                        ContrastKind::IntrusiveVsUngrammatical,
                    ));
                    out.push(mk(gram, ungram, ContrastKind::Ungrammatical));
                } else {
                    let gram = with_licensor(&base, "lic", "no", lexicon)?;
                    let intrusive = with_licensor(&base, "lic", "most", lexicon)?;
                    let ungram = with_licensor(&base, "lic", "the", lexicon)?;
                    out.push(mk(gram.clone(), intrusive.clone(), ContrastKind::Intrusive));
                    out.push(mk(
                        intrusive,
                        ungram.clone(),
                        ContrastKind::IntrusiveVsUngrammatical,
                    ));
                    out.push(mk(gram, ungram, ContrastKind::Ungrammatical));
                }
            }
        }
    }
    for p in &out {
        p.differing_position()?;
    }
    Ok(out)
}

fn clone_positions(r: &Realization) -> Realization {
    Realization {
        tokens: Vec::new(),
        positions: r.positions.clone(),
        entries: r.entries.clone(),
        numbers: r.numbers.clone(),
    }
}
