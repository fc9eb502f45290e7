//! The evolving knowledge system and visual tool set.
//!
//! Both sets only ever grow. New elements pass through greedy cosine gating
//! against everything already present (and everything accepted earlier in
//! the same batch), in the order they were predicted.

mod embed;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{canonical_json, sha256_hex};
pub use embed::{cosine, tokens, EmbedError, Embedder, HashingEmbedder};
pub use store::{load_concept_seeds, load_tool_seeds, read_snapshot, write_snapshot, Snapshot};

pub const DEFAULT_THRESHOLD: f32 = 0.85;
/// Minimum similarity for a new concept to hang under an existing one.
pub const DEFAULT_ATTACH_THRESHOLD: f32 = 0.2;
pub const DEFAULT_DOMAIN: &str = "general";

#[derive(Debug, thiserror::Error)]
pub enum ForestError {
    #[error("arity must be at least 1")]
    ZeroArity,
    #[error("cannot draw {arity}-element combos from a set of {size}")]
    ArityTooLarge { arity: usize, size: usize },
    #[error("the set is empty")]
    EmptySet,
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("seed element {0:?} appears twice after normalization")]
    DuplicateSeed(String),
    #[error("seed concept {child:?} names unknown parent {parent:?}")]
    UnknownParent { child: String, parent: String },
    #[error("hierarchy is inconsistent at {id}: {reason}")]
    Hierarchy { id: String, reason: String },
    #[error("snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
    #[error("snapshot digest mismatch: header says {expected}, content hashes to {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("seed file is invalid: {0}")]
    Seeds(String),
}

impl ForestError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ForestError::Embedding(_))
    }
}

/// Trim, case-fold, collapse internal whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn concept_id(normalized: &str) -> String {
    format!("k-{}", &sha256_hex(normalized)[..16])
}

pub fn tool_id(normalized: &str) -> String {
    format!("t-{}", &sha256_hex(normalized)[..16])
}

/// A concept as predicted by the generator or listed in a seed file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptProposal {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub domain: Option<String>,
    /// Name of the intended parent concept, if the proposer gave one.
    #[serde(default)]
    pub parent: Option<String>,
}

impl ConceptProposal {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            domain: None,
            parent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolProposal {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub signature: String,
    #[serde(default)]
    pub example: Option<String>,
}

impl ToolProposal {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            signature: String::new(),
            example: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeConcept {
    pub id: String,
    pub name: String,
    pub description: String,
    pub parent: Option<String>,
    pub domain: String,
    pub depth: u32,
    /// Round that added the concept; 0 for seeds.
    pub round: u32,
}

impl KnowledgeConcept {
    fn embed_text(&self) -> String {
        format!("{} {}", self.name, self.description)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    pub name: String,
    pub description: String,
    pub signature: String,
    pub example_invocation: Option<String>,
    pub round: u32,
}

impl ToolSpec {
    fn embed_text(&self) -> String {
        format!("{} {}", self.name, self.description)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundAdditions {
    pub round: u32,
    pub added: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestStats {
    pub node_count: usize,
    pub max_depth: u32,
    pub domain_count: usize,
    pub per_round: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandParams {
    pub threshold: f32,
    pub attach_threshold: f32,
}

impl Default for ExpandParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            attach_threshold: DEFAULT_ATTACH_THRESHOLD,
        }
    }
}

#[derive(Debug, Default, Clone)]
struct EmbeddingCache {
    embedder: String,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingCache {
    fn ensure<'a>(
        &mut self,
        embedder: &dyn Embedder,
        items: impl Iterator<Item = (&'a String, String)>,
    ) -> Result<(), EmbedError> {
        if self.embedder != embedder.id() {
            self.vectors.clear();
            self.embedder = embedder.id().to_string();
        }
        for (id, text) in items {
            if !self.vectors.contains_key(id) {
                let v = embedder.embed(&text)?;
                self.vectors.insert(id.clone(), v);
            }
        }
        Ok(())
    }
}

/// Greedy gate shared by both sets. Returns indices of accepted candidates
/// and their vectors, in candidate order.
fn gate(
    candidates: &[(String, String)],
    existing: &BTreeMap<String, Vec<f32>>,
    embedder: &dyn Embedder,
    threshold: f32,
) -> Result<Vec<(usize, Vec<f32>)>, EmbedError> {
    let mut vectors = Vec::with_capacity(candidates.len());
    for (_, text) in candidates {
        vectors.push(embedder.embed(text)?);
    }
    let mut accepted: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for (i, ((id, _), v)) in candidates.iter().zip(vectors).enumerate() {
        if existing.contains_key(id) || !seen.insert(id.as_str()) {
            continue;
        }
        let max_sim = existing
            .values()
            .chain(accepted.iter().map(|(_, v)| v))
            .map(|e| cosine(e, &v))
            .fold(f32::NEG_INFINITY, f32::max);
        if max_sim < threshold {
            accepted.push((i, v));
        }
    }
    Ok(accepted)
}

/// Draws `count` tuples of distinct ids, each sorted by position in `ids`.
///
/// With `arity = None` every tuple gets its own arity, uniform over
/// `{1, 2, 3}` capped at the set size.
pub fn combos<R: Rng + ?Sized>(
    ids: &[String],
    arity: Option<usize>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<String>>, ForestError> {
    if ids.is_empty() {
        return Err(ForestError::EmptySet);
    }
    match arity {
        Some(0) => return Err(ForestError::ZeroArity),
        Some(a) if a > ids.len() => {
            return Err(ForestError::ArityTooLarge {
                arity: a,
                size: ids.len(),
            })
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let a = arity.unwrap_or_else(|| rng.random_range(1..=ids.len().min(3)));
        let mut picked = index::sample(rng, ids.len(), a).into_vec();
        picked.sort_unstable();
        out.push(picked.into_iter().map(|i| ids[i].clone()).collect());
    }
    Ok(out)
}

/// The knowledge system K.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeForest {
    concepts: BTreeMap<String, KnowledgeConcept>,
    round_log: Vec<RoundAdditions>,
    #[serde(skip)]
    cache: EmbeddingCache,
}

impl PartialEq for KnowledgeForest {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts && self.round_log == other.round_log
    }
}

impl KnowledgeForest {
    /// Builds K0. Parents must be listed before their children.
    pub fn from_seeds(seeds: &[ConceptProposal]) -> Result<Self, ForestError> {
        let mut forest = Self::default();
        let mut by_name: HashMap<String, String> = HashMap::new();
        for seed in seeds {
            let name = normalize_name(&seed.name);
            let id = concept_id(&name);
            if name.is_empty() || forest.concepts.contains_key(&id) {
                return Err(ForestError::DuplicateSeed(seed.name.clone()));
            }
            let parent = match &seed.parent {
                Some(p) => {
                    let pid = by_name.get(&normalize_name(p)).cloned().ok_or_else(|| {
                        ForestError::UnknownParent {
                            child: seed.name.clone(),
                            parent: p.clone(),
                        }
                    })?;
                    Some(pid)
                }
                None => None,
            };
            let (depth, inherited) = match &parent {
                Some(pid) => {
                    let p = &forest.concepts[pid];
                    (p.depth + 1, Some(p.domain.clone()))
                }
                None => (0, None),
            };
            let domain = seed
                .domain
                .clone()
                .or(inherited)
                .unwrap_or_else(|| DEFAULT_DOMAIN.to_string());
            by_name.insert(name.clone(), id.clone());
            forest.concepts.insert(
                id.clone(),
                KnowledgeConcept {
                    id,
                    name,
                    description: seed.description.trim().to_string(),
                    parent,
                    domain,
                    depth,
                    round: 0,
                },
            );
        }
        Ok(forest)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeConcept> {
        self.concepts.get(id)
    }

    pub fn find_by_name(&self, name: &str) -> Option<&KnowledgeConcept> {
        self.concepts.get(&concept_id(&normalize_name(name)))
    }

    pub fn concepts(&self) -> impl Iterator<Item = &KnowledgeConcept> {
        self.concepts.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.concepts.keys().cloned().collect()
    }

    pub fn round_log(&self) -> &[RoundAdditions] {
        &self.round_log
    }

    /// Concept ids grouped by domain label.
    pub fn domain_index(&self) -> BTreeMap<String, Vec<String>> {
        let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in self.concepts.values() {
            index.entry(c.domain.clone()).or_default().push(c.id.clone());
        }
        index
    }

    pub fn combos<R: Rng + ?Sized>(
        &self,
        arity: Option<usize>,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<String>>, ForestError> {
        combos(&self.ids(), arity, count, rng)
    }

    /// Applies the knowledge-side expansion for `round` and returns ΔK.
    ///
    /// The forest is left untouched when the embedder fails.
    pub fn expand(
        &mut self,
        predicted: &[ConceptProposal],
        embedder: &dyn Embedder,
        params: ExpandParams,
        round: u32,
    ) -> Result<Vec<KnowledgeConcept>, ForestError> {
        self.cache.ensure(
            embedder,
            self.concepts.values().map(|c| (&c.id, c.embed_text())),
        )?;
        let candidates: Vec<(String, String)> = predicted
            .iter()
            .filter_map(|p| {
                let name = normalize_name(&p.name);
                (!name.is_empty())
                    .then(|| (concept_id(&name), format!("{name} {}", p.description.trim())))
            })
            .collect();
        let proposals: Vec<&ConceptProposal> = predicted
            .iter()
            .filter(|p| !normalize_name(&p.name).is_empty())
            .collect();
        let existing: BTreeMap<String, Vec<f32>> = self
            .concepts
            .keys()
            .map(|id| (id.clone(), self.cache.vectors[id].clone()))
            .collect();
        let accepted = gate(&candidates, &existing, embedder, params.threshold)?;

        let mut added = Vec::with_capacity(accepted.len());
        for (i, vector) in accepted {
            let proposal = proposals[i];
            let name = normalize_name(&proposal.name);
            let id = candidates[i].0.clone();
            let hinted = proposal
                .parent
                .as_ref()
                .map(|p| concept_id(&normalize_name(p)))
                .filter(|pid| self.concepts.contains_key(pid));
            let parent = hinted.or_else(|| {
                let mut best: Option<(f32, &String)> = None;
                for (cid, v) in &self.cache.vectors {
                    if !self.concepts.contains_key(cid) {
                        continue;
                    }
                    let sim = cosine(v, &vector);
                    let better = match best {
                        None => true,
                        Some((s, b)) => sim > s || (sim == s && cid < b),
                    };
                    if sim >= params.attach_threshold && better {
                        best = Some((sim, cid));
                    }
                }
                best.map(|(_, cid)| cid.clone())
            });
            let (depth, inherited) = match &parent {
                Some(pid) => {
                    let p = &self.concepts[pid];
                    (p.depth + 1, Some(p.domain.clone()))
                }
                None => (0, None),
            };
            let concept = KnowledgeConcept {
                id: id.clone(),
                name,
                description: proposal.description.trim().to_string(),
                parent,
                domain: proposal
                    .domain
                    .clone()
                    .filter(|d| !d.trim().is_empty())
                    .or(inherited)
                    .unwrap_or_else(|| DEFAULT_DOMAIN.to_string()),
                depth,
                round,
            };
            self.cache.vectors.insert(id.clone(), vector);
            self.concepts.insert(id, concept.clone());
            added.push(concept);
        }
        self.round_log.push(RoundAdditions {
            round,
            added: added.iter().map(|c| c.id.clone()).collect(),
        });
        Ok(added)
    }

    pub fn stats(&self) -> ForestStats {
        ForestStats {
            node_count: self.concepts.len(),
            max_depth: self.concepts.values().map(|c| c.depth).max().unwrap_or(0),
            domain_count: self
                .concepts
                .values()
                .map(|c| c.domain.as_str())
                .collect::<BTreeSet<_>>()
                .len(),
            per_round: self.round_log.iter().map(|r| r.added.len()).collect(),
        }
    }

    /// Re-walks every parent chain, checking depths and acyclicity.
    pub fn check_hierarchy(&self) -> Result<(), ForestError> {
        for c in self.concepts.values() {
            let err = |reason: String| ForestError::Hierarchy {
                id: c.id.clone(),
                reason,
            };
            match &c.parent {
                None if c.depth != 0 => return Err(err(format!("root with depth {}", c.depth))),
                None => {}
                Some(pid) => {
                    let p = self
                        .concepts
                        .get(pid)
                        .ok_or_else(|| err(format!("missing parent {pid}")))?;
                    if c.depth != p.depth + 1 {
                        return Err(err(format!("depth {} under parent depth {}", c.depth, p.depth)));
                    }
                }
            }
            let mut cursor = c.parent.as_deref();
            let mut steps = 0;
            while let Some(pid) = cursor {
                steps += 1;
                if steps > self.concepts.len() {
                    return Err(err("parent cycle".into()));
                }
                cursor = self.concepts.get(pid).and_then(|p| p.parent.as_deref());
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let concepts: Vec<&KnowledgeConcept> = self.concepts.values().collect();
        let body = canonical_json(&(concepts, &self.round_log)).expect("forest serializes");
        sha256_hex(body)
    }

    pub(crate) fn from_parts(concepts: Vec<KnowledgeConcept>, round_log: Vec<RoundAdditions>) -> Self {
        Self {
            concepts: concepts.into_iter().map(|c| (c.id.clone(), c)).collect(),
            round_log,
            cache: EmbeddingCache::default(),
        }
    }
}

/// The visual tool set T.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToolSet {
    tools: BTreeMap<String, ToolSpec>,
    round_log: Vec<RoundAdditions>,
    #[serde(skip)]
    cache: EmbeddingCache,
}

impl PartialEq for ToolSet {
    fn eq(&self, other: &Self) -> bool {
        self.tools == other.tools && self.round_log == other.round_log
    }
}

impl ToolSet {
    pub fn from_seeds(seeds: &[ToolProposal]) -> Result<Self, ForestError> {
        let mut set = Self::default();
        for seed in seeds {
            let name = normalize_name(&seed.name);
            let id = tool_id(&name);
            if name.is_empty() || set.tools.contains_key(&id) {
                return Err(ForestError::DuplicateSeed(seed.name.clone()));
            }
            set.tools.insert(id.clone(), Self::spec(id, name, seed, 0));
        }
        Ok(set)
    }

    fn spec(id: String, name: String, p: &ToolProposal, round: u32) -> ToolSpec {
        ToolSpec {
            id,
            name,
            description: p.description.trim().to_string(),
            signature: p.signature.trim().to_string(),
            example_invocation: p.example.clone().filter(|e| !e.trim().is_empty()),
            round,
        }
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ToolSpec> {
        self.tools.get(id)
    }

    pub fn find_by_name(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(&tool_id(&normalize_name(name)))
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn round_log(&self) -> &[RoundAdditions] {
        &self.round_log
    }

    pub fn combos<R: Rng + ?Sized>(
        &self,
        arity: Option<usize>,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<String>>, ForestError> {
        combos(&self.ids(), arity, count, rng)
    }

    /// Applies the tool-side expansion for `round` and returns ΔT.
    pub fn expand(
        &mut self,
        predicted: &[ToolProposal],
        embedder: &dyn Embedder,
        threshold: f32,
        round: u32,
    ) -> Result<Vec<ToolSpec>, ForestError> {
        self.cache
            .ensure(embedder, self.tools.values().map(|t| (&t.id, t.embed_text())))?;
        let proposals: Vec<&ToolProposal> = predicted
            .iter()
            .filter(|p| !normalize_name(&p.name).is_empty())
            .collect();
        let candidates: Vec<(String, String)> = proposals
            .iter()
            .map(|p| {
                let name = normalize_name(&p.name);
                (tool_id(&name), format!("{name} {}", p.description.trim()))
            })
            .collect();
        let existing: BTreeMap<String, Vec<f32>> = self
            .tools
            .keys()
            .map(|id| (id.clone(), self.cache.vectors[id].clone()))
            .collect();
        let accepted = gate(&candidates, &existing, embedder, threshold)?;
        let mut added = Vec::with_capacity(accepted.len());
        for (i, vector) in accepted {
            let id = candidates[i].0.clone();
            let spec = Self::spec(id.clone(), normalize_name(&proposals[i].name), proposals[i], round);
            self.cache.vectors.insert(id.clone(), vector);
            self.tools.insert(id, spec.clone());
            added.push(spec);
        }
        self.round_log.push(RoundAdditions {
            round,
            added: added.iter().map(|t| t.id.clone()).collect(),
        });
        Ok(added)
    }

    pub(crate) fn from_parts(tools: Vec<ToolSpec>, round_log: Vec<RoundAdditions>) -> Self {
        Self {
            tools: tools.into_iter().map(|t| (t.id.clone(), t)).collect(),
            round_log,
            cache: EmbeddingCache::default(),
        }
    }

    pub fn per_round(&self) -> Vec<usize> {
        self.round_log.iter().map(|r| r.added.len()).collect()
    }

    pub fn digest(&self) -> String {
        let tools: Vec<&ToolSpec> = self.tools.values().collect();
        let body = canonical_json(&(tools, &self.round_log)).expect("tool set serializes");
        sha256_hex(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain() -> KnowledgeForest {
        let mut b = ConceptProposal::new("Triangle", "three sided polygon");
        b.domain = Some("Geometry".into());
        let mut m = ConceptProposal::new("Median", "segment to a side midpoint");
        m.parent = Some("triangle".into());
        let mut c = ConceptProposal::new("Centroid", "intersection of medians");
        c.parent = Some("MEDIAN".into());
        KnowledgeForest::from_seeds(&[b, m, c]).unwrap()
    }

    #[test]
    fn chained_stats() {
        let f = chain();
        let s = f.stats();
        assert_eq!((s.node_count, s.max_depth, s.domain_count), (3, 2, 1));
        f.check_hierarchy().unwrap();
    }

    #[test]
    fn normalization_folds_surface_form() {
        assert_eq!(normalize_name("  Right   Angle\t"), "right angle");
        assert_eq!(concept_id("right angle"), concept_id(&normalize_name("RIGHT angle")));
    }

    #[test]
    fn identical_prediction_is_dropped() {
        let mut f = chain();
        let e = HashingEmbedder::default();
        let added = f
            .expand(&[ConceptProposal::new("  triangle ", "three sided polygon")], &e, ExpandParams::default(), 1)
            .unwrap();
        assert!(added.is_empty());
        assert_eq!(f.len(), 3);
        assert!(f.expand(&[], &e, ExpandParams::default(), 2).unwrap().is_empty());
        assert_eq!(f.stats().per_round, vec![0, 0]);
    }

    #[test]
    fn combos_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = vec!["a".to_string()];
        assert_eq!(combos(&one, Some(1), 1, &mut rng).unwrap(), vec![vec!["a".to_string()]]);
        let three: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            combos(&three, Some(5), 1, &mut rng),
            Err(ForestError::ArityTooLarge { arity: 5, size: 3 })
        ));
        assert!(matches!(combos(&[], None, 1, &mut rng), Err(ForestError::EmptySet)));
        for t in combos(&three, None, 50, &mut rng).unwrap() {
            assert!((1..=3).contains(&t.len()));
        }
    }

    #[test]
    fn failing_embedder_leaves_forest_untouched() {
        struct Broken;
        impl Embedder for Broken {
            fn id(&self) -> &str {
                "broken"
            }
            fn embed(&self, _: &str) -> Result<Vec<f32>, EmbedError> {
                Err(EmbedError("offline".into()))
            }
        }
        let mut f = chain();
        let before = f.digest();
        let err = f
            .expand(&[ConceptProposal::new("chord", "")], &Broken, ExpandParams::default(), 1)
            .unwrap_err();
        assert!(err.is_retryable());
        assert_eq!(f.digest(), before);
    }
}
