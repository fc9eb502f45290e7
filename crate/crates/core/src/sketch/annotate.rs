//! Comment annotations carried by drawing code.
//!
//! `# entity: <label> [@ <numbers>]` declares a labeled figure element, with
//! optional pixel geometry. `# ref: <label>` names an element the code builds
//! on. `# value: <text>` records the quantity the accompanying question asks
//! for.

#[derive(Debug, Clone, PartialEq)]
pub struct EntityMark {
    pub label: String,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub entities: Vec<EntityMark>,
    pub refs: Vec<String>,
    pub value: Option<String>,
}

impl Annotations {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.label.as_str())
    }

    pub fn entity(&self, label: &str) -> Option<&EntityMark> {
        self.entities.iter().find(|e| e.label == label)
    }
}

pub fn annotations(code: &str) -> Annotations {
    let mut out = Annotations::default();
    for line in code.lines() {
        let Some(comment) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        let comment = comment.trim();
        if let Some(rest) = comment.strip_prefix("entity:") {
            let (label, geometry) = match rest.split_once('@') {
                Some((l, g)) => (l.trim(), g),
                None => (rest.trim(), ""),
            };
            let Some(label) = label.split_whitespace().next() else {
                continue;
            };
            let coords = geometry
                .split_whitespace()
                .filter_map(|t| t.parse::<f64>().ok())
                .collect();
            out.entities.push(EntityMark {
                label: label.to_string(),
                coords,
            });
        } else if let Some(rest) = comment.strip_prefix("ref:") {
            out.refs.extend(rest.split([',', ' ']).filter(|s| !s.is_empty()).map(str::to_string));
        } else if let Some(rest) = comment.strip_prefix("value:") {
            out.value = Some(rest.trim().to_string());
        }
    }
    out
}
