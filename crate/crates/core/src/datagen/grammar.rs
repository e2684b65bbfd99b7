//! The toy caption grammar: a closed lexicon, latent scenes, and surface
//! realizations with their derivation trees.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::scenegraph::{Attribute, Relation, Role, RoleLexicon, SceneGraph, Span};
use crate::text::{TokenSeq, Vocabulary};

const NOUNS: [&str; 60] = [
    "man", "woman", "boy", "girl", "dog", "cat", "horse", "bird", "cow", "sheep",
    "elephant", "zebra", "giraffe", "bear", "ball", "kite", "frisbee", "bicycle", "car", "bus",
    "truck", "train", "boat", "umbrella", "bench", "chair", "table", "cup", "bottle", "plate",
    "pizza", "cake", "apple", "banana", "sandwich", "laptop", "phone", "book", "clock", "vase",
    "hat", "shirt", "bag", "skateboard", "surfboard", "tree", "flower", "fence", "sign", "lamp",
    "bed", "couch", "door", "window", "bowl", "box", "rock", "tent", "guitar", "camera",
];

const ADJECTIVES: [&str; 25] = [
    "red", "blue", "green", "yellow", "black", "white", "brown", "orange", "pink", "purple",
    "gray", "small", "large", "tall", "short", "old", "young", "wooden", "metal", "striped",
    "shiny", "dirty", "wet", "empty", "tiny",
];

const DETERMINERS: [&str; 2] = ["a", "the"];

const PREFIXES: [&str; 7] = ["", "there is", "here is", "we see", "you can see", "this shows", "this is"];

/// A relation concept with its surface forms. Symmetric relations reuse the
/// forward forms when the caption is read right to left.
struct RelationForms {
    forward: &'static [&'static str],
    inverse: Option<&'static [&'static str]>,
    symmetric: bool,
}

const RELATIONS: [RelationForms; 15] = [
    RelationForms { forward: &["near", "beside", "next to"], inverse: None, symmetric: true },
    RelationForms { forward: &["behind"], inverse: Some(&["in front of"]), symmetric: false },
    RelationForms { forward: &["on", "on top of"], inverse: Some(&["under", "below"]), symmetric: false },
    RelationForms { forward: &["carrying"], inverse: Some(&["carried by"]), symmetric: false },
    RelationForms { forward: &["holding"], inverse: Some(&["held by"]), symmetric: false },
    RelationForms { forward: &["riding"], inverse: Some(&["ridden by"]), symmetric: false },
    RelationForms { forward: &["watching", "looking at"], inverse: Some(&["watched by"]), symmetric: false },
    RelationForms { forward: &["chasing"], inverse: Some(&["chased by"]), symmetric: false },
    RelationForms { forward: &["pulling"], inverse: Some(&["pulled by"]), symmetric: false },
    RelationForms { forward: &["pushing"], inverse: Some(&["pushed by"]), symmetric: false },
    RelationForms { forward: &["sitting on"], inverse: None, symmetric: false },
    RelationForms { forward: &["wearing"], inverse: None, symmetric: false },
    RelationForms { forward: &["eating"], inverse: Some(&["eaten by"]), symmetric: false },
    RelationForms { forward: &["inside", "in"], inverse: Some(&["around"]), symmetric: false },
    RelationForms { forward: &["leaning on", "leaning against"], inverse: None, symmetric: false },
];

const VERB_WORDS: [&str; 20] = [
    "carrying", "carried", "holding", "held", "riding", "ridden", "watching", "looking",
    "watched", "chasing", "chased", "pulling", "pulled", "pushing", "pushed", "sitting",
    "wearing", "eating", "eaten", "leaning",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub noun: usize,
    pub adjectives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneRelation {
    pub relation: usize,
    pub subject: usize,
    pub object: usize,
}

/// Ground-truth content of one image: 1-3 entities linked in a chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentScene {
    pub entities: Vec<Entity>,
    pub relations: Vec<SceneRelation>,
}

/// Order-free description of a scene, used to compare realizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalScene {
    pub entities: BTreeSet<(usize, BTreeSet<usize>)>,
    pub relations: BTreeSet<(usize, usize, usize)>,
}

/// One realized caption with the scene graph it was derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub text: String,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    lexicon: RoleLexicon,
    relation_phrases: HashMap<String, (usize, bool)>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::new()
    }
}

impl Grammar {
    pub fn new() -> Self {
        let mut lexicon = RoleLexicon::new();
        for w in DETERMINERS {
            lexicon.insert(w, Role::Det);
        }
        for prefix in PREFIXES {
            for w in prefix.split_whitespace() {
                lexicon.insert(w, Role::Stop);
            }
        }
        for w in NOUNS {
            lexicon.insert(w, Role::Noun);
        }
        for w in ADJECTIVES {
            lexicon.insert(w, Role::Adj);
        }
        let mut relation_phrases = HashMap::new();
        for (i, forms) in RELATIONS.iter().enumerate() {
            for phrase in forms.forward {
                relation_phrases.insert(phrase.to_string(), (i, false));
            }
            for phrase in forms.inverse.unwrap_or(&[]) {
                relation_phrases.insert(phrase.to_string(), (i, true));
            }
        }
        let mut phrases: Vec<_> = relation_phrases.keys().cloned().collect();
        phrases.sort();
        for phrase in phrases {
            for w in phrase.split_whitespace() {
                let role = if VERB_WORDS.contains(&w) { Role::Verb } else { Role::Prep };
                lexicon.insert(w, role);
            }
        }
        Self {
            lexicon,
            relation_phrases,
        }
    }

    pub fn lexicon(&self) -> &RoleLexicon {
        &self.lexicon
    }

    /// Vocabulary over every grammar terminal, in lexicon order.
    pub fn vocabulary(&self) -> Vocabulary {
        let words: Vec<&str> = self.lexicon.entries().iter().map(|(w, _)| w.as_str()).collect();
        Vocabulary::build(&words).expect("grammar lexicon is non-empty")
    }

    pub fn num_nouns(&self) -> usize {
        NOUNS.len()
    }

    pub fn num_adjectives(&self) -> usize {
        ADJECTIVES.len()
    }

    pub fn num_relations(&self) -> usize {
        RELATIONS.len()
    }

    pub fn noun(&self, i: usize) -> &'static str {
        NOUNS[i]
    }

    pub fn adjective(&self, i: usize) -> &'static str {
        ADJECTIVES[i]
    }

    pub fn sample_scene<R: Rng>(&self, rng: &mut R) -> LatentScene {
        let n_entities = match rng.random_range(0..10) {
            0..=2 => 1,
            3..=6 => 2,
            _ => 3,
        };
        let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
        nouns.shuffle(rng);
        let entities = nouns[..n_entities]
            .iter()
            .map(|&noun| {
                let n_adj = match rng.random_range(0..10) {
                    0..=2 => 0,
                    3..=7 => 1,
                    _ => 2,
                };
                let mut adjs: Vec<usize> = (0..ADJECTIVES.len()).collect();
                adjs.shuffle(rng);
                adjs.truncate(n_adj);
                Entity {
                    noun,
                    adjectives: adjs,
                }
            })
            .collect();
        let relations = (0..n_entities.saturating_sub(1))
            .map(|i| SceneRelation {
                relation: rng.random_range(0..RELATIONS.len()),
                subject: i,
                object: i + 1,
            })
            .collect();
        LatentScene {
            entities,
            relations,
        }
    }

    /// Samples one surface realization of `scene` together with its
    /// derivation. Captions may be read in either direction when every
    /// relation has an inverse form.
    pub fn realize<R: Rng>(&self, scene: &LatentScene, rng: &mut R) -> Derivation {
        let invertible = scene
            .relations
            .iter()
            .all(|r| RELATIONS[r.relation].symmetric || RELATIONS[r.relation].inverse.is_some());
        let reversed = invertible && scene.entities.len() > 1 && rng.random_bool(0.5);

        let mut order: Vec<usize> = (0..scene.entities.len()).collect();
        if reversed {
            order.reverse();
        }

        let mut words: Vec<String> = Vec::new();
        let mut graph = SceneGraph::default();
        let prefix = PREFIXES.choose(rng).expect("non-empty");
        words.extend(prefix.split_whitespace().map(str::to_string));

        for (slot, &entity_idx) in order.iter().enumerate() {
            if slot > 0 {
                // Chain link between the previous entity and this one.
                let (a, b) = (order[slot - 1], entity_idx);
                let rel = scene
                    .relations
                    .iter()
                    .find(|r| (r.subject == a && r.object == b) || (r.subject == b && r.object == a))
                    .expect("chain relation");
                let forms = &RELATIONS[rel.relation];
                let inverse = rel.subject != a;
                let choices = match (inverse, forms.symmetric) {
                    (false, _) | (true, true) => forms.forward,
                    (true, false) => forms.inverse.expect("checked invertible"),
                };
                let phrase = choices.choose(rng).expect("non-empty");
                let start = words.len();
                words.extend(phrase.split_whitespace().map(str::to_string));
                graph.relations.push(Relation {
                    span: Span::new(start, words.len()),
                    subject: slot - 1,
                    object: slot,
                });
            }
            let entity = &scene.entities[entity_idx];
            words.push(DETERMINERS.choose(rng).expect("non-empty").to_string());
            let mut adjs = entity.adjectives.clone();
            adjs.shuffle(rng);
            for adj in adjs {
                graph.attributes.push(Attribute {
                    span: Span::single(words.len()),
                    object: slot,
                });
                words.push(ADJECTIVES[adj].to_string());
            }
            graph.objects.push(Span::single(words.len()));
            words.push(NOUNS[entity.noun].to_string());
        }
        Derivation {
            text: words.join(" "),
            graph,
        }
    }

    /// Concept-level view of a latent scene.
    pub fn canonical_scene(&self, scene: &LatentScene) -> CanonicalScene {
        let entities = scene
            .entities
            .iter()
            .map(|e| (e.noun, e.adjectives.iter().copied().collect()))
            .collect();
        let relations = scene
            .relations
            .iter()
            .map(|r| {
                let (s, o) = (scene.entities[r.subject].noun, scene.entities[r.object].noun);
                self.canonical_relation(r.relation, s, o)
            })
            .collect();
        CanonicalScene {
            entities,
            relations,
        }
    }

    fn canonical_relation(&self, relation: usize, subject: usize, object: usize) -> (usize, usize, usize) {
        if RELATIONS[relation].symmetric {
            (relation, subject.min(object), subject.max(object))
        } else {
            (relation, subject, object)
        }
    }

    /// Maps a parsed caption back to concepts. `None` when the graph uses a
    /// word or phrase outside the grammar.
    pub fn canonicalize(&self, caption: &TokenSeq, graph: &SceneGraph) -> Option<CanonicalScene> {
        let surfaces = caption.surfaces();
        let word = |span: Span| surfaces[span.positions()].join(" ");
        let nouns: Vec<usize> = graph
            .objects
            .iter()
            .map(|&s| NOUNS.iter().position(|&n| n == word(s)))
            .collect::<Option<_>>()?;
        let mut adjs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nouns.len()];
        for a in &graph.attributes {
            let adj = ADJECTIVES.iter().position(|&x| x == word(a.span))?;
            adjs[a.object].insert(adj);
        }
        let mut relations = BTreeSet::new();
        for r in &graph.relations {
            let &(concept, inverse) = self.relation_phrases.get(&word(r.span))?;
            let (s, o) = (nouns[r.subject], nouns[r.object]);
            let (s, o) = if inverse { (o, s) } else { (s, o) };
            relations.insert(self.canonical_relation(concept, s, o));
        }
        Some(CanonicalScene {
            entities: nouns.into_iter().zip(adjs).collect(),
            relations,
        })
    }
}
