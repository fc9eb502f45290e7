//! Offline policy for `mock:<seed>` rollouts.
//!
//! The mock knows each sample's reference construction and gold answer.
//! Per turn it either replays the next reference step or answers, and it
//! answers correctly more often once it sees an edited image.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vthinker_core::datamodel::{DataError, ImageStore, Sample};
use vthinker_core::gateway::{ContentPart, Message};
use vthinker_core::render::data_url;
use vthinker_core::rollout::ScriptedPolicy;
use vthinker_core::util::derive_seed;

/// Chance of a correct answer with only the original image in view.
pub const P_CORRECT_ORIGINAL: f64 = 0.35;
/// Chance of a correct answer once an edited image is in view.
pub const P_CORRECT_EDITED: f64 = 0.8;
pub const P_DRAW: f64 = 0.6;
pub const P_MALFORMED: f64 = 0.05;

struct Entry {
    gold: String,
    codes: Vec<String>,
    original: String,
}

pub fn mock_policy(samples: &[Sample], seed: u64, store: &ImageStore) -> Result<ScriptedPolicy, DataError> {
    let mut table = HashMap::new();
    for s in samples {
        let Some(original) = s.original_image.as_ref() else {
            continue;
        };
        table.insert(
            s.question.clone(),
            Entry {
                gold: s.answer.clone(),
                codes: s.trajectory.steps.iter().filter_map(|st| st.code.clone()).collect(),
                original: data_url(store, original)?,
            },
        );
    }
    Ok(ScriptedPolicy::from_fn(move |ctx: &[Message], turn_seed| {
        let Some(prompt) = ctx.iter().find(|m| m.role == "user") else {
            return Ok("<answer></answer>".into());
        };
        let question = prompt.text_content();
        let Some(entry) = table.get(&question) else {
            return Ok("I do not recognize this problem.\n<answer>unknown</answer>".into());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&question, &turn_seed.to_string()]));
        let drawn = ctx.iter().filter(|m| m.role == "assistant").count();
        if rng.random_bool(P_MALFORMED) {
            return Ok("Let me try.\n```python\nimg = load(\"current\")\n".into());
        }
        if drawn < entry.codes.len() && rng.random_bool(P_DRAW) {
            return Ok(format!("Construct the next aid.\n```python\n{}\n```", entry.codes[drawn].trim_end()));
        }
        let images: Vec<&String> = ctx
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter_map(|p| match p {
                ContentPart::ImageUrl(u) => Some(u),
                ContentPart::Text(_) => None,
            })
            .collect();
        let edited = images.iter().any(|u| **u != entry.original);
        let p = if edited { P_CORRECT_EDITED } else { P_CORRECT_ORIGINAL };
        let answer = if rng.random_bool(p) { entry.gold.clone() } else { "0".into() };
        Ok(format!("Reading the figure.\n<answer>{answer}</answer>"))
    }))
}
