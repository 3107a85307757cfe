//! Captions built from scene graphs, and the token-to-relation map.
//!
//! The structured recipe lists every object as `[attributes] class` in input
//! order, then every relation as `class_s predicate class_o`. Only the tokens of
//! relation spans are mapped; object descriptions stay unmapped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CaptionError;
use crate::graph::SceneGraph;
use crate::vocab::Vocab;

/// Token budget of the text encoder.
pub const MAX_TOKENS: usize = 77;

/// Whitespace split with lowercasing. Never yields empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub max_len: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<String>, max_len: usize) -> Result<Self, CaptionError> {
        if tokens.len() > max_len {
            return Err(CaptionError::CaptionTooLong {
                len: tokens.len(),
                max_len,
            });
        }
        Ok(Self { tokens, max_len })
    }

    pub fn from_text(text: &str, max_len: usize) -> Result<Self, CaptionError> {
        Self::new(tokenize(text), max_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Caption tokens plus the partial map token index -> relation index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionMapping {
    pub caption: TokenSeq,
    /// One entry per token; `None` for tokens outside every relation span.
    pub tau: Vec<Option<usize>>,
    pub relation_count: usize,
    /// (subject id, object id) of each relation, in relation order.
    pub endpoints: Vec<(u32, u32)>,
}

impl CaptionMapping {
    /// A caption with no relation map (free-form text).
    pub fn unmapped(caption: TokenSeq) -> Self {
        let n = caption.len();
        Self {
            caption,
            tau: vec![None; n],
            relation_count: 0,
            endpoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.caption.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption.is_empty()
    }

    /// Token indices mapped to relation `k`.
    pub fn span(&self, k: usize) -> Vec<usize> {
        self.tau
            .iter()
            .enumerate()
            .filter_map(|(i, t)| (*t == Some(k)).then_some(i))
            .collect()
    }

    /// Structural checks: τ in range, lengths consistent, no orphan relation.
    pub fn check(&self) -> Result<(), String> {
        if self.tau.len() != self.caption.len() {
            return Err(format!(
                "tau has {} entries for {} tokens",
                self.tau.len(),
                self.caption.len()
            ));
        }
        if self.endpoints.len() != self.relation_count {
            return Err("endpoint list does not match relation count".into());
        }
        let mut hit = vec![false; self.relation_count];
        for (i, t) in self.tau.iter().enumerate() {
            if let Some(k) = *t {
                if k >= self.relation_count {
                    return Err(format!("token {i} maps to relation {k} >= {}", self.relation_count));
                }
                hit[k] = true;
            }
        }
        match hit.iter().position(|h| !h) {
            Some(k) => Err(format!("relation {k} has no tokens")),
            None => Ok(()),
        }
    }
}

fn object_description(g: &SceneGraph, v: &Vocab, idx: usize) -> Result<String, CaptionError> {
    let obj = &g.objects[idx];
    let class = v
        .objects
        .name(obj.class_id)
        .ok_or_else(|| CaptionError::VocabMismatch(format!("object class {}", obj.class_id)))?;
    let mut words = Vec::with_capacity(obj.attributes.len() + 1);
    for &a in &obj.attributes {
        words.push(
            v.attributes
                .name(a)
                .ok_or_else(|| CaptionError::VocabMismatch(format!("attribute {a}")))?,
        );
    }
    words.push(class);
    Ok(words.join(" "))
}

fn class_name<'a>(g: &SceneGraph, v: &'a Vocab, id: u32) -> Result<&'a str, CaptionError> {
    let class = g
        .class_of(id)
        .ok_or_else(|| CaptionError::VocabMismatch(format!("relation references missing object {id}")))?;
    v.objects
        .name(class)
        .ok_or_else(|| CaptionError::VocabMismatch(format!("object class {class}")))
}

pub fn build_caption(g: &SceneGraph, v: &Vocab) -> Result<CaptionMapping, CaptionError> {
    build_caption_with(g, v, MAX_TOKENS)
}

pub fn build_caption_with(g: &SceneGraph, v: &Vocab, max_len: usize) -> Result<CaptionMapping, CaptionError> {
    let mut tokens = Vec::new();
    let mut tau = Vec::new();
    for idx in 0..g.objects.len() {
        for tok in tokenize(&object_description(g, v, idx)?) {
            tokens.push(tok);
            tau.push(None);
        }
    }
    let mut endpoints = Vec::with_capacity(g.relations.len());
    for (k, rel) in g.relations.iter().enumerate() {
        let predicate = v
            .predicates
            .name(rel.predicate_id)
            .ok_or_else(|| CaptionError::VocabMismatch(format!("predicate {}", rel.predicate_id)))?;
        let phrase = format!(
            "{} {} {}",
            class_name(g, v, rel.subject_id)?,
            predicate,
            class_name(g, v, rel.object_id)?
        );
        for tok in tokenize(&phrase) {
            tokens.push(tok);
            tau.push(Some(k));
        }
        endpoints.push((rel.subject_id, rel.object_id));
    }
    let caption = TokenSeq::new(tokens, max_len)?;
    Ok(CaptionMapping {
        caption,
        tau,
        relation_count: g.relations.len(),
        endpoints,
    })
}

const OPENERS: [&str; 3] = ["a scene with", "an image showing", "a picture of"];
const JOINERS: [&str; 2] = ["and", "while"];

/// Surface phrase for a predicate in free-form text.
fn predicate_phrase(predicate: &str) -> String {
    match predicate {
        "left of" => "to the left of".into(),
        "right of" => "to the right of".into(),
        "overlapping" => "overlapping with".into(),
        other => other.to_string(),
    }
}

/// Every token a structured or free-form caption over `v` can contain, sorted.
pub fn caption_words(v: &Vocab) -> Vec<String> {
    let mut words: Vec<String> = v
        .objects
        .names()
        .iter()
        .chain(v.attributes.names())
        .map(String::as_str)
        .chain(v.predicates.names().iter().map(|p| p.as_str()))
        .chain(OPENERS)
        .chain(JOINERS)
        .chain(["a", "the"])
        .flat_map(tokenize)
        .chain(v.predicates.names().iter().flat_map(|p| tokenize(&predicate_phrase(p))))
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Natural-language style caption without a relation map.
///
/// The first mention of an object carries its attributes ("a red circle"),
/// later mentions use "the circle". Seed 0 always opens with "a scene with".
pub fn freeform_caption(g: &SceneGraph, v: &Vocab, template_seed: u64) -> Result<TokenSeq, CaptionError> {
    freeform_caption_with(g, v, template_seed, MAX_TOKENS)
}

pub fn freeform_caption_with(
    g: &SceneGraph,
    v: &Vocab,
    template_seed: u64,
    max_len: usize,
) -> Result<TokenSeq, CaptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(template_seed);
    let opener = if template_seed == 0 {
        OPENERS[0]
    } else {
        OPENERS[rng.random_range(0..OPENERS.len())]
    };
    let mut mentioned = vec![false; g.objects.len()];
    let mention = |id: u32, mentioned: &mut Vec<bool>| -> Result<String, CaptionError> {
        let idx = g
            .objects
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| CaptionError::VocabMismatch(format!("relation references missing object {id}")))?;
        if mentioned[idx] {
            Ok(format!("the {}", class_name(g, v, id)?))
        } else {
            mentioned[idx] = true;
            Ok(format!("a {}", object_description(g, v, idx)?))
        }
    };
    let mut clauses = Vec::new();
    for rel in &g.relations {
        let predicate = v
            .predicates
            .name(rel.predicate_id)
            .ok_or_else(|| CaptionError::VocabMismatch(format!("predicate {}", rel.predicate_id)))?;
        let s = mention(rel.subject_id, &mut mentioned)?;
        let o = mention(rel.object_id, &mut mentioned)?;
        clauses.push(format!("{s} {} {o}", predicate_phrase(predicate)));
    }
    for idx in 0..g.objects.len() {
        if !mentioned[idx] {
            let id = g.objects[idx].id;
            clauses.push(mention(id, &mut mentioned)?);
        }
    }
    let mut text = opener.to_string();
    for (i, clause) in clauses.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            text.push_str(JOINERS[rng.random_range(0..JOINERS.len())]);
        }
        text.push(' ');
        text.push_str(clause);
    }
    TokenSeq::from_text(&text, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ObjectNode, RelationTriple};

    fn vocab() -> Vocab {
        Vocab::from_strs(
            &["circle", "square", "star"],
            &["left of", "above", "near"],
            &["red", "blue", "green"],
        )
        .unwrap()
    }

    fn node(id: u32, class_id: usize, attrs: &[usize]) -> ObjectNode {
        ObjectNode {
            id,
            class_id,
            attributes: attrs.to_vec(),
            bbox: None,
        }
    }

    fn rel(s: u32, p: usize, o: u32) -> RelationTriple {
        RelationTriple {
            subject_id: s,
            predicate_id: p,
            object_id: o,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Red Circle"), vec!["red", "circle"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b"), vec!["a", "b"]);
    }

    #[test]
    fn hand_traced_caption() {
        let g = SceneGraph {
            objects: vec![node(0, 0, &[0]), node(1, 1, &[1])],
            relations: vec![rel(0, 0, 1)],
            image_size: None,
        };
        let m = build_caption(&g, &vocab()).unwrap();
        assert_eq!(m.caption.text(), "red circle blue square circle left of square");
        assert_eq!(
            m.tau,
            vec![None, None, None, None, Some(0), Some(0), Some(0), Some(0)]
        );
        assert_eq!(m.span(0), vec![4, 5, 6, 7]);
        assert_eq!(m.endpoints, vec![(0, 1)]);
        m.check().unwrap();
    }

    #[test]
    fn object_only_caption_has_empty_tau() {
        let g = SceneGraph {
            objects: vec![node(0, 2, &[2])],
            relations: vec![],
            image_size: None,
        };
        let m = build_caption(&g, &vocab()).unwrap();
        assert_eq!(m.caption.tokens, vec!["green", "star"]);
        assert!(m.tau.iter().all(Option::is_none));
        assert_eq!(m.relation_count, 0);
    }

    #[test]
    fn caption_of_78_tokens_is_too_long() {
        // 39 objects with one attribute each -> 78 tokens
        let objects = (0..39).map(|i| node(i, 0, &[0])).collect();
        let g = SceneGraph {
            objects,
            relations: vec![],
            image_size: None,
        };
        assert_eq!(
            build_caption(&g, &vocab()).unwrap_err(),
            CaptionError::CaptionTooLong { len: 78, max_len: 77 }
        );
        let g77 = SceneGraph {
            objects: (0..38).map(|i| node(i, 0, &[0])).chain([node(38, 0, &[])]).collect(),
            relations: vec![],
            image_size: None,
        };
        assert_eq!(build_caption(&g77, &vocab()).unwrap().len(), 77);
    }

    #[test]
    fn freeform_single_object_seed_zero() {
        let g = SceneGraph {
            objects: vec![node(0, 0, &[0])],
            relations: vec![],
            image_size: None,
        };
        let t = freeform_caption(&g, &vocab(), 0).unwrap();
        assert_eq!(t.text(), "a scene with a red circle");
        assert_eq!(t, freeform_caption(&g, &vocab(), 0).unwrap());
    }

    #[test]
    fn freeform_mentions_every_predicate() {
        let g = SceneGraph {
            objects: vec![node(0, 0, &[0]), node(1, 1, &[1]), node(2, 2, &[2])],
            relations: vec![rel(0, 0, 1), rel(1, 1, 2), rel(2, 2, 0)],
            image_size: None,
        };
        for seed in 0..5 {
            let text = freeform_caption(&g, &vocab(), seed).unwrap().text();
            assert!(text.contains("to the left of"), "{text}");
            assert!(text.contains(" above "), "{text}");
            assert!(text.contains(" near "), "{text}");
        }
        assert_eq!(
            freeform_caption(&g, &vocab(), 0).unwrap().text(),
            freeform_caption(&g, &vocab(), 0).unwrap().text()
        );
    }
}
