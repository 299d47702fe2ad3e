//! Hierarchical tag taxonomy: tags arranged in trees, one layer per level of
//! abstraction. Tags in the same layer of a tree are mutually exclusive per
//! scenario; queries use subtree semantics (a parent tag matches itself and
//! all of its descendants).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("tag tree contains a cycle involving tag '{0}'")]
    CyclicTree(String),
    #[error("a tree named '{0}' is already registered")]
    DuplicateTreeName(String),
    #[error("tag '{0}' is not reachable from the tree root")]
    OrphanTag(String),
    #[error("duplicate tag id '{0}' within one tree")]
    DuplicateTagId(String),
    #[error("tag '{tag}' has layer {layer}, expected {expected}")]
    InvalidLayer {
        tag: String,
        layer: u32,
        expected: u32,
    },
    #[error("unknown tag '{0}'")]
    UnknownTag(String),
    #[error("mutual exclusion violated: two tags in layer {layer} of tree '{tree}'")]
    MutualExclusionViolation { tree: String, layer: u32 },
    #[error("cannot parse tag query: {0}")]
    QueryParse(String),
}

/// A single node in a tag tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub id: String,
    pub label: String,
    pub layer: u32,
    pub parent: Option<String>,
}

/// Reference to a tag, qualified by its tree name. Serialized as "tree:tag".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TagRef {
    pub tree: String,
    pub tag: String,
}

impl TagRef {
    pub fn new(tree: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            tree: tree.into(),
            tag: tag.into(),
        }
    }
}

impl fmt::Display for TagRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tree, self.tag)
    }
}

impl FromStr for TagRef {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tree, tag) = s
            .split_once(':')
            .ok_or_else(|| TagError::UnknownTag(s.to_string()))?;
        if tree.is_empty() || tag.is_empty() {
            return Err(TagError::UnknownTag(s.to_string()));
        }
        Ok(TagRef::new(tree, tag))
    }
}

impl Serialize for TagRef {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TagRef {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A rooted tree of tags. The root sits at layer 0 and has no parent; every
/// other tag's layer is its parent's layer plus one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagTree {
    pub name: String,
    pub nodes: Vec<Tag>,
}

impl TagTree {
    pub fn new(name: impl Into<String>, nodes: Vec<Tag>) -> Self {
        Self {
            name: name.into(),
            nodes,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Tag> {
        self.nodes.iter().find(|t| t.id == id)
    }

    /// Checks uniqueness of ids, single-root structure, acyclicity,
    /// reachability and the layer rule.
    pub fn validate(&self) -> Result<(), TagError> {
        let mut by_id: HashMap<&str, &Tag> = HashMap::new();
        for tag in &self.nodes {
            if by_id.insert(tag.id.as_str(), tag).is_some() {
                return Err(TagError::DuplicateTagId(tag.id.clone()));
            }
        }
        let roots: Vec<&Tag> = self.nodes.iter().filter(|t| t.parent.is_none()).collect();
        if roots.len() != 1 {
            // Zero roots means every node claims a parent, i.e. a cycle.
            return match self.nodes.first() {
                Some(t) if roots.is_empty() => Err(TagError::CyclicTree(t.id.clone())),
                Some(_) => Err(TagError::OrphanTag(roots[1].id.clone())),
                None => Err(TagError::OrphanTag(self.name.clone())),
            };
        }
        let root = roots[0];
        if root.layer != 0 {
            return Err(TagError::InvalidLayer {
                tag: root.id.clone(),
                layer: root.layer,
                expected: 0,
            });
        }
        for tag in &self.nodes {
            if let Some(parent_id) = &tag.parent {
                if parent_id == &tag.id {
                    return Err(TagError::CyclicTree(tag.id.clone()));
                }
                let parent = by_id
                    .get(parent_id.as_str())
                    .ok_or_else(|| TagError::OrphanTag(tag.id.clone()))?;
                if tag.layer != parent.layer + 1 {
                    return Err(TagError::InvalidLayer {
                        tag: tag.id.clone(),
                        layer: tag.layer,
                        expected: parent.layer + 1,
                    });
                }
            }
        }
        // Reachability doubles as the cycle check: a parent chain that never
        // reaches the root revisits some node.
        for tag in &self.nodes {
            let mut seen: HashSet<&str> = HashSet::new();
            let mut cur = tag;
            while let Some(parent_id) = &cur.parent {
                if !seen.insert(cur.id.as_str()) {
                    return Err(TagError::CyclicTree(cur.id.clone()));
                }
                cur = by_id
                    .get(parent_id.as_str())
                    .ok_or_else(|| TagError::OrphanTag(tag.id.clone()))?;
            }
            if cur.id != root.id {
                return Err(TagError::OrphanTag(tag.id.clone()));
            }
        }
        Ok(())
    }

    /// True iff `desc` equals `anc` or lies in the subtree rooted at `anc`.
    pub fn is_self_or_descendant(&self, anc: &str, desc: &str) -> bool {
        let mut cur = desc;
        loop {
            if cur == anc {
                return true;
            }
            match self.get(cur).and_then(|t| t.parent.as_deref()) {
                Some(parent) => cur = parent,
                None => return false,
            }
        }
    }
}

/// The set of registered tag trees.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub trees: BTreeMap<String, TagTree>,
}

impl Taxonomy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tree after validating it. Returns the tree id (its name).
    pub fn register_tree(&mut self, tree: TagTree) -> Result<String, TagError> {
        tree.validate()?;
        if self.trees.contains_key(&tree.name) {
            return Err(TagError::DuplicateTreeName(tree.name.clone()));
        }
        let name = tree.name.clone();
        self.trees.insert(name.clone(), tree);
        Ok(name)
    }

    pub fn tree(&self, name: &str) -> Option<&TagTree> {
        self.trees.get(name)
    }

    pub fn resolve(&self, tag: &TagRef) -> Result<&Tag, TagError> {
        self.trees
            .get(&tag.tree)
            .and_then(|tree| tree.get(&tag.tag))
            .ok_or_else(|| TagError::UnknownTag(tag.to_string()))
    }

    /// Enforces the assignment rule: at most one tag per layer per tree.
    pub fn check_mutual_exclusion(&self, tags: &BTreeSet<TagRef>) -> Result<(), TagError> {
        let mut seen: HashSet<(String, u32)> = HashSet::new();
        for tag_ref in tags {
            let tag = self.resolve(tag_ref)?;
            if !seen.insert((tag_ref.tree.clone(), tag.layer)) {
                return Err(TagError::MutualExclusionViolation {
                    tree: tag_ref.tree.clone(),
                    layer: tag.layer,
                });
            }
        }
        Ok(())
    }

    /// Subtree match: does an assigned tag set satisfy a single query tag?
    pub fn tag_matches(&self, query: &TagRef, assigned: &BTreeSet<TagRef>) -> Result<bool, TagError> {
        self.resolve(query)?;
        let tree = self.trees.get(&query.tree).expect("resolved above");
        Ok(assigned
            .iter()
            .filter(|a| a.tree == query.tree)
            .any(|a| tree.is_self_or_descendant(&query.tag, &a.tag)))
    }
}

/// Boolean query over tag references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagQuery {
    Tag(TagRef),
    And(Vec<TagQuery>),
    Or(Vec<TagQuery>),
    Not(Box<TagQuery>),
}

impl TagQuery {
    pub fn tag(tree: &str, tag: &str) -> Self {
        TagQuery::Tag(TagRef::new(tree, tag))
    }

    /// Evaluates the query against an assigned tag set under subtree semantics.
    pub fn eval(&self, taxonomy: &Taxonomy, assigned: &BTreeSet<TagRef>) -> Result<bool, TagError> {
        match self {
            TagQuery::Tag(t) => taxonomy.tag_matches(t, assigned),
            TagQuery::And(parts) => {
                for p in parts {
                    if !p.eval(taxonomy, assigned)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            TagQuery::Or(parts) => {
                for p in parts {
                    if p.eval(taxonomy, assigned)? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
            TagQuery::Not(inner) => Ok(!inner.eval(taxonomy, assigned)?),
        }
    }

    /// Parses the textual query syntax, e.g.
    /// `road:urban AND (weather:rain OR NOT weather:fog)`.
    pub fn parse(input: &str) -> Result<Self, TagError> {
        let tokens = tokenize(input)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.parse_or()?;
        if parser.pos != parser.tokens.len() {
            return Err(TagError::QueryParse(format!(
                "trailing input after position {}",
                parser.pos
            )));
        }
        Ok(expr)
    }
}

#[derive(Debug, PartialEq)]
enum Token {
    And,
    Or,
    Not,
    LParen,
    RParen,
    Ref(TagRef),
}

fn tokenize(input: &str) -> Result<Vec<Token>, TagError> {
    let mut tokens = Vec::new();
    for raw in input
        .replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
    {
        let token = match raw {
            "AND" | "and" => Token::And,
            "OR" | "or" => Token::Or,
            "NOT" | "not" => Token::Not,
            "(" => Token::LParen,
            ")" => Token::RParen,
            other => Token::Ref(
                other
                    .parse()
                    .map_err(|_| TagError::QueryParse(format!("bad tag reference '{other}'")))?,
            ),
        };
        tokens.push(token);
    }
    if tokens.is_empty() {
        return Err(TagError::QueryParse("empty query".to_string()));
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn parse_or(&mut self) -> Result<TagQuery, TagError> {
        let mut parts = vec![self.parse_and()?];
        while matches!(self.tokens.get(self.pos), Some(Token::Or)) {
            self.pos += 1;
            parts.push(self.parse_and()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().expect("non-empty")
        } else {
            TagQuery::Or(parts)
        })
    }

    fn parse_and(&mut self) -> Result<TagQuery, TagError> {
        let mut parts = vec![self.parse_unary()?];
        while matches!(self.tokens.get(self.pos), Some(Token::And)) {
            self.pos += 1;
            parts.push(self.parse_unary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().expect("non-empty")
        } else {
            TagQuery::And(parts)
        })
    }

    fn parse_unary(&mut self) -> Result<TagQuery, TagError> {
        match self.tokens.get(self.pos) {
            Some(Token::Not) => {
                self.pos += 1;
                Ok(TagQuery::Not(Box::new(self.parse_unary()?)))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.parse_or()?;
                match self.tokens.get(self.pos) {
                    Some(Token::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(TagError::QueryParse("missing ')'".to_string())),
                }
            }
            Some(Token::Ref(_)) => {
                if let Some(Token::Ref(r)) = self.tokens.get(self.pos) {
                    let q = TagQuery::Tag(r.clone());
                    self.pos += 1;
                    Ok(q)
                } else {
                    unreachable!()
                }
            }
            _ => Err(TagError::QueryParse("unexpected end of query".to_string())),
        }
    }
}

fn tag(id: &str, label: &str, layer: u32, parent: Option<&str>) -> Tag {
    Tag {
        id: id.to_string(),
        label: label.to_string(),
        layer,
        parent: parent.map(str::to_string),
    }
}

/// The three trees shipped by default: weather condition, road type, and
/// target maneuvers. Node sets are configurable; these are starting points.
pub fn default_taxonomy() -> Taxonomy {
    let mut taxonomy = Taxonomy::new();
    taxonomy
        .register_tree(TagTree::new(
            "weather",
            vec![
                tag("weather", "Weather condition", 0, None),
                tag("clear", "Clear", 1, Some("weather")),
                tag("rain", "Rain", 1, Some("weather")),
                tag("heavy-rain", "Heavy rain", 2, Some("rain")),
                tag("fog", "Fog", 1, Some("weather")),
            ],
        ))
        .expect("default weather tree is valid");
    taxonomy
        .register_tree(TagTree::new(
            "road",
            vec![
                tag("road", "Road type", 0, None),
                tag("urban", "Urban", 1, Some("road")),
                tag("rural", "Rural", 1, Some("road")),
                tag("motorway", "Motorway", 1, Some("road")),
                tag("motorway-2lane", "Two-lane motorway", 2, Some("motorway")),
                tag("motorway-3lane", "Three-lane motorway", 2, Some("motorway")),
                tag("t-junction", "T-junction", 2, Some("urban")),
            ],
        ))
        .expect("default road tree is valid");
    taxonomy
        .register_tree(TagTree::new(
            "target-maneuver",
            vec![
                tag("target-maneuver", "Target maneuver", 0, None),
                tag("overtaking", "Overtaking", 1, Some("target-maneuver")),
                tag("cut-in", "Cut-in", 1, Some("target-maneuver")),
                tag("deceleration", "Deceleration", 1, Some("target-maneuver")),
            ],
        ))
        .expect("default maneuver tree is valid");
    taxonomy
}
