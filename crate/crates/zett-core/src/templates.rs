//! Relation templates and the infilling grammar.
//!
//! A template is a sentence with exactly one `<head>` and one `<tail>`
//! placeholder, e.g. `<tail> wrote the script for <head>.`. For extraction
//! the placeholders are replaced, in text order, by the sentinels `<X>` and
//! `<Y>`; the model then generates `<X> span1 <Y> span2 <Z>` and the slot map
//! remembers which sentinel carries the head and which the tail. `<X>` always
//! precedes `<Y>` in both prompt and output, regardless of placeholder order.

use crate::error::ZettError;
use crate::tokenizer::{self, Vocabulary, END, EOS, MASK1, MASK2, UNK};
use crate::Result;

pub const HEAD_PLACEHOLDER: &str = "<head>";
pub const TAIL_PLACEHOLDER: &str = "<tail>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Head,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceholderOrder {
    HeadFirst,
    TailFirst,
}

/// Which entity role each sentinel carries for a given template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMap {
    pub mask1: Role,
    pub mask2: Role,
}

impl SlotMap {
    fn for_order(order: PlaceholderOrder) -> SlotMap {
        match order {
            PlaceholderOrder::HeadFirst => SlotMap { mask1: Role::Head, mask2: Role::Tail },
            PlaceholderOrder::TailFirst => SlotMap { mask1: Role::Tail, mask2: Role::Head },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    relation: String,
    pattern: String,
    order: PlaceholderOrder,
}

/// Checks the placeholder contract and reports the text order of the
/// placeholders. Everything else about the pattern, including trailing
/// punctuation, is kept verbatim.
pub fn validate_pattern(pattern: &str) -> Result<PlaceholderOrder> {
    let heads: Vec<usize> = pattern.match_indices(HEAD_PLACEHOLDER).map(|(i, _)| i).collect();
    let tails: Vec<usize> = pattern.match_indices(TAIL_PLACEHOLDER).map(|(i, _)| i).collect();
    if heads.len() != 1 || tails.len() != 1 {
        return Err(ZettError::validation(format!(
            "template {pattern:?} must contain exactly one {HEAD_PLACEHOLDER} and one {TAIL_PLACEHOLDER} (found {} and {})",
            heads.len(),
            tails.len()
        )));
    }
    Ok(if heads[0] < tails[0] { PlaceholderOrder::HeadFirst } else { PlaceholderOrder::TailFirst })
}

impl Template {
    pub fn new(relation: impl Into<String>, pattern: impl Into<String>) -> Result<Template> {
        let pattern = pattern.into();
        let order = validate_pattern(&pattern)?;
        Ok(Template { relation: relation.into(), pattern, order })
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn order(&self) -> PlaceholderOrder {
        self.order
    }

    pub fn slot_map(&self) -> SlotMap {
        SlotMap::for_order(self.order)
    }

    /// Replaces the first placeholder in text order with `<X>` and the second
    /// with `<Y>`.
    pub fn masked(&self) -> String {
        self.pattern.replace(HEAD_PLACEHOLDER, mask_for(self.slot_map(), Role::Head)).replace(
            TAIL_PLACEHOLDER,
            mask_for(self.slot_map(), Role::Tail),
        )
    }

    /// Substitutes concrete entities into the pattern.
    pub fn fill(&self, head: &str, tail: &str) -> String {
        self.pattern.replace(HEAD_PLACEHOLDER, head).replace(TAIL_PLACEHOLDER, tail)
    }

    /// Builds the model input: context, one space, masked template. The
    /// context itself is never altered.
    pub fn mask(&self, context: &str) -> MaskedPrompt {
        let masked_template = self.masked();
        let prompt_text = format!("{} {}", context, masked_template);
        MaskedPrompt {
            context: context.to_string(),
            masked_template,
            prompt_text,
            slot_map: self.slot_map(),
        }
    }

    /// Canonical training target for a gold `(head, tail)` pair:
    /// `<X> span1 <Y> span2 <Z>` with spans ordered by the slot map.
    pub fn build_target(&self, head: &str, tail: &str) -> String {
        let slots = self.slot_map();
        let (s1, s2) = match slots.mask1 {
            Role::Head => (head, tail),
            Role::Tail => (tail, head),
        };
        format!("<X> {s1} <Y> {s2} <Z>")
    }
}

fn mask_for(slots: SlotMap, role: Role) -> &'static str {
    if slots.mask1 == role {
        "<X>"
    } else {
        "<Y>"
    }
}

/// A context paired with one masked template, ready for encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPrompt {
    pub context: String,
    pub masked_template: String,
    pub prompt_text: String,
    pub slot_map: SlotMap,
}

/// How a parsed output ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    /// The `<Z>` sentinel, the canonical target terminator.
    End,
    /// The model's end-of-sequence token.
    Eos,
    /// A second `<Y>`, produced by models that close spans with sentinels.
    RepeatedMask2,
    /// The token stream ran out; accepted when parsing truncated outputs.
    Exhausted,
}

/// A structurally valid infilling output at the token-id level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfilledOutput {
    pub span1: Vec<u32>,
    pub span2: Vec<u32>,
    pub terminator: Terminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseIssue {
    MissingMask1,
    MissingMask2,
    EmptySpan1,
    EmptySpan2,
    /// A structural id where a span token was expected.
    Malformed,
}

impl std::fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParseIssue::MissingMask1 => "output does not start with <X>",
            ParseIssue::MissingMask2 => "output has no <Y>",
            ParseIssue::EmptySpan1 => "empty span after <X>",
            ParseIssue::EmptySpan2 => "empty span after <Y>",
            ParseIssue::Malformed => "structural token inside a span",
        };
        f.write_str(s)
    }
}

/// Splits a generated id sequence into the two entity spans. The sequence
/// must start with MASK1; span2 ends at END, EOS, a repeated MASK2 or the end
/// of the ids. Tokens after the terminator are ignored. Both spans must be
/// non-empty.
pub fn parse_infill(ids: &[u32]) -> std::result::Result<InfilledOutput, ParseIssue> {
    use crate::tokenizer::PAD;
    if ids.first() != Some(&MASK1) {
        return Err(ParseIssue::MissingMask1);
    }
    let rest = &ids[1..];
    let mask2_at = rest
        .iter()
        .position(|&id| id == MASK2)
        .ok_or(ParseIssue::MissingMask2)?;
    let span1 = rest[..mask2_at].to_vec();
    if span1.is_empty() {
        return Err(ParseIssue::EmptySpan1);
    }
    if span1.iter().any(|&id| id == MASK1 || id == END || id == EOS || id == PAD) {
        // END/EOS before MASK2 means the spans never closed properly.
        return Err(if span1.contains(&END) || span1.contains(&EOS) {
            ParseIssue::MissingMask2
        } else {
            ParseIssue::Malformed
        });
    }
    let tail = &rest[mask2_at + 1..];
    let mut span2 = Vec::new();
    let mut terminator = Terminator::Exhausted;
    for &id in tail {
        match id {
            END => {
                terminator = Terminator::End;
                break;
            }
            EOS => {
                terminator = Terminator::Eos;
                break;
            }
            MASK2 => {
                terminator = Terminator::RepeatedMask2;
                break;
            }
            MASK1 | PAD => return Err(ParseIssue::Malformed),
            _ => span2.push(id),
        }
    }
    if span2.is_empty() {
        return Err(ParseIssue::EmptySpan2);
    }
    Ok(InfilledOutput { span1, span2, terminator })
}

/// Renders a span back to text; UNK renders as its literal marker.
pub fn detokenize(span: &[u32], vocab: &Vocabulary) -> Result<String> {
    debug_assert!(span.iter().all(|&id| id == UNK || id >= tokenizer::RESERVED));
    vocab.decode(span)
}

/// Maps a parsed output to `(head, tail)` surface strings via the slot map.
pub fn assign_roles(
    infill: &InfilledOutput,
    slot_map: SlotMap,
    vocab: &Vocabulary,
) -> Result<(String, String)> {
    let s1 = detokenize(&infill.span1, vocab)?;
    let s2 = detokenize(&infill.span2, vocab)?;
    Ok(match slot_map.mask1 {
        Role::Head => (s1, s2),
        Role::Tail => (s2, s1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_one_head_and_one_tail() {
        assert_eq!(validate_pattern("<head> is a participant in <tail>.").unwrap(), PlaceholderOrder::HeadFirst);
        assert_eq!(validate_pattern("<tail> wrote the script for <head>.").unwrap(), PlaceholderOrder::TailFirst);
        assert!(validate_pattern("<head> likes <head>").is_err());
        assert!(validate_pattern("no placeholders here").is_err());
        assert!(validate_pattern("<head> only").is_err());
    }

    #[test]
    fn masking_follows_text_order() {
        let t = Template::new("publisher", "<head> is published by <tail>.").unwrap();
        assert_eq!(t.masked(), "<X> is published by <Y>.");
        assert_eq!(t.slot_map(), SlotMap { mask1: Role::Head, mask2: Role::Tail });

        let t = Template::new("father", "<tail> is a father of <head>.").unwrap();
        assert_eq!(t.masked(), "<X> is a father of <Y>.");
        assert_eq!(t.slot_map(), SlotMap { mask1: Role::Tail, mask2: Role::Head });
    }

    #[test]
    fn mask_keeps_context_verbatim() {
        let t = Template::new("part_of", "<head> is a participant in <tail>.").unwrap();
        let p = t.mask("Kaikoura is part of New Zealand .");
        assert_eq!(p.context, "Kaikoura is part of New Zealand .");
        assert_eq!(p.prompt_text, "Kaikoura is part of New Zealand . <X> is a participant in <Y>.");
    }

    #[test]
    fn fill_substitutes_entities() {
        let t = Template::new("actor", "<tail> is an actor in <head>.").unwrap();
        assert_eq!(t.fill("The Trial", "Orson Welles"), "Orson Welles is an actor in The Trial.");
    }

    #[test]
    fn target_orders_spans_by_slot_map() {
        let hf = Template::new("employer", "<head> works for <tail>.").unwrap();
        assert_eq!(hf.build_target("Alice", "Acme"), "<X> Alice <Y> Acme <Z>");
        let tf = Template::new("father", "<tail> is a father of <head>.").unwrap();
        assert_eq!(tf.build_target("Jimmy Jam", "Cornbread Harris"), "<X> Cornbread Harris <Y> Jimmy Jam <Z>");
    }

    #[test]
    fn parse_accepts_all_terminators() {
        use crate::tokenizer::{END, EOS, MASK1, MASK2};
        let a = parse_infill(&[MASK1, 7, MASK2, 8, END]).unwrap();
        assert_eq!(a.terminator, Terminator::End);
        let b = parse_infill(&[MASK1, 7, MASK2, 8, EOS]).unwrap();
        assert_eq!(b.terminator, Terminator::Eos);
        let c = parse_infill(&[MASK1, 7, 9, MASK2, 8, MASK2]).unwrap();
        assert_eq!(c.terminator, Terminator::RepeatedMask2);
        assert_eq!(c.span1, vec![7, 9]);
        let d = parse_infill(&[MASK1, 7, MASK2, 8]).unwrap();
        assert_eq!(d.terminator, Terminator::Exhausted);
    }

    #[test]
    fn parse_rejects_malformed_outputs() {
        use crate::tokenizer::{END, MASK1, MASK2};
        assert_eq!(parse_infill(&[7, MASK2, 8]), Err(ParseIssue::MissingMask1));
        assert_eq!(parse_infill(&[MASK1, 7, END]), Err(ParseIssue::MissingMask2));
        assert_eq!(parse_infill(&[MASK1, MASK2, 8, END]), Err(ParseIssue::EmptySpan1));
        assert_eq!(parse_infill(&[MASK1, 7, MASK2, END]), Err(ParseIssue::EmptySpan2));
        assert_eq!(parse_infill(&[MASK1, 7, MASK2, MASK1, END]), Err(ParseIssue::Malformed));
    }

    #[test]
    fn role_assignment_follows_slot_map() {
        let vocab = Vocabulary::build(&["Jimmy Jam Cornbread Harris"], 1);
        let t = Template::new("father", "<tail> is a father of <head>.").unwrap();
        let target = t.build_target("Jimmy Jam", "Cornbread Harris");
        let ids = vocab.encode(&target);
        let infill = parse_infill(&ids).unwrap();
        let (head, tail) = assign_roles(&infill, t.slot_map(), &vocab).unwrap();
        assert_eq!(head, "Jimmy Jam");
        assert_eq!(tail, "Cornbread Harris");
    }

    #[test]
    fn fill_then_remask_recovers_skeleton() {
        let t = Template::new("employer", "<head> works for <tail>.").unwrap();
        let filled = t.fill("HEADX", "TAILX");
        let remasked = filled.replace("HEADX", HEAD_PLACEHOLDER).replace("TAILX", TAIL_PLACEHOLDER);
        assert_eq!(remasked, t.pattern());
    }
}
