//! Snapshot files and declarative seed sets.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ConceptProposal, ForestError, KnowledgeConcept, KnowledgeForest, RoundAdditions,
    ToolProposal, ToolSet, ToolSpec,
};
use crate::datamodel::canonical_json;

const SNAPSHOT_KIND: &str = "vthinker-forest/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: u32,
    pub forest: KnowledgeForest,
    pub tools: ToolSet,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    round: u32,
    concepts: usize,
    tools: usize,
    forest_digest: String,
    tools_digest: String,
    concept_log: Vec<RoundAdditions>,
    tool_log: Vec<RoundAdditions>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Concept(KnowledgeConcept),
    Tool(ToolSpec),
}

/// Header line, then one concept or tool record per line.
pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<(), ForestError> {
    let header = Header {
        kind: SNAPSHOT_KIND.into(),
        round: snapshot.round,
        concepts: snapshot.forest.len(),
        tools: snapshot.tools.len(),
        forest_digest: snapshot.forest.digest(),
        tools_digest: snapshot.tools.digest(),
        concept_log: snapshot.forest.round_log().to_vec(),
        tool_log: snapshot.tools.round_log().to_vec(),
    };
    let ser = |e: crate::datamodel::DataError| ForestError::Snapshot {
        line: 0,
        message: e.to_string(),
    };
    let mut out = String::new();
    out.push_str(&canonical_json(&header).map_err(ser)?);
    out.push('\n');
    for c in snapshot.forest.concepts() {
        out.push_str(&canonical_json(&Line::Concept(c.clone())).map_err(ser)?);
        out.push('\n');
    }
    for t in snapshot.tools.tools() {
        out.push_str(&canonical_json(&Line::Tool(t.clone())).map_err(ser)?);
        out.push('\n');
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(out.as_bytes())?;
    tmp.persist(path).map_err(|e| ForestError::Io(e.error))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, ForestError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let bad = |line: usize, message: String| ForestError::Snapshot { line, message };
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| bad(1, e.to_string()))?,
        None => return Err(bad(1, "missing header".into())),
    };
    if header.kind != SNAPSHOT_KIND {
        return Err(bad(1, format!("unknown snapshot kind {:?}", header.kind)));
    }
    let mut concepts = Vec::new();
    let mut tools = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line).map_err(|e| bad(i + 2, e.to_string()))? {
            Line::Concept(c) => concepts.push(c),
            Line::Tool(t) => tools.push(t),
        }
    }
    if concepts.len() != header.concepts || tools.len() != header.tools {
        return Err(bad(
            0,
            format!(
                "header declares {} concepts and {} tools, found {} and {}",
                header.concepts,
                header.tools,
                concepts.len(),
                tools.len()
            ),
        ));
    }
    let forest = KnowledgeForest::from_parts(concepts, header.concept_log);
    let tools = ToolSet::from_parts(tools, header.tool_log);
    for (expected, found) in [
        (header.forest_digest, forest.digest()),
        (header.tools_digest, tools.digest()),
    ] {
        if expected != found {
            return Err(ForestError::DigestMismatch { expected, found });
        }
    }
    forest.check_hierarchy()?;
    Ok(Snapshot {
        round: header.round,
        forest,
        tools,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptSeedFile {
    #[serde(default)]
    concept: Vec<ConceptProposal>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolSeedFile {
    #[serde(default)]
    tool: Vec<ToolProposal>,
}

/// Reads `[[concept]]` tables from a TOML seed file.
pub fn load_concept_seeds(path: &Path) -> Result<KnowledgeForest, ForestError> {
    let text = std::fs::read_to_string(path)?;
    let file: ConceptSeedFile = toml::from_str(&text).map_err(|e| ForestError::Seeds(e.to_string()))?;
    if file.concept.is_empty() {
        return Err(ForestError::Seeds(format!("{} lists no concepts", path.display())));
    }
    KnowledgeForest::from_seeds(&file.concept)
}

/// Reads `[[tool]]` tables from a TOML seed file.
pub fn load_tool_seeds(path: &Path) -> Result<ToolSet, ForestError> {
    let text = std::fs::read_to_string(path)?;
    let file: ToolSeedFile = toml::from_str(&text).map_err(|e| ForestError::Seeds(e.to_string()))?;
    if file.tool.is_empty() {
        return Err(ForestError::Seeds(format!("{} lists no tools", path.display())));
    }
    ToolSet::from_seeds(&file.tool)
}
