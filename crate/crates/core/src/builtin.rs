//! Registry of built-in spaces.

use crate::error::{Error, Result};
use crate::structure::{load_structure, CCStructure};

const HEISENBERG: &str = r#"{
  "name": "heisenberg",
  "dimension": 3,
  "filtration": [2, 3],
  "fields": [
    ["1", "0", "-0.5*x2"],
    ["0", "1", "0.5*x1"],
    ["0", "0", "1"]
  ],
  "chart_radius": 8
}"#;

const ENGEL: &str = r#"{
  "name": "engel",
  "dimension": 4,
  "filtration": [2, 3, 4],
  "fields": [
    ["1", "0", "0", "0"],
    ["0", "1", "x1", "0.5*x1^2"],
    ["0", "0", "1", "x1"],
    ["0", "0", "0", "1"]
  ],
  "chart_radius": 8
}"#;

// Heisenberg fields plus cubic terms of homogeneous order at least three above
// the field degree, so the nilpotent approximation at 0 is the Heisenberg group.
const HEISENBERG_PERTURBED: &str = r#"{
  "name": "heisenberg_perturbed",
  "dimension": 3,
  "filtration": [2, 3],
  "fields": [
    ["1", "0.05*x1^2*x2", "-0.5*x2 + 0.1*x1^2*x3"],
    ["0.05*x2^3", "1", "0.5*x1 + 0.1*x2^2*x3"],
    ["0", "0", "1 + 0.02*x1^3"]
  ],
  "chart_radius": 3
}"#;

/// Names accepted by [`space`], with `abelian<N>` standing for `abelian1`, `abelian2`, ...
pub const NAMES: [&str; 4] = ["heisenberg", "engel", "abelian<N>", "heisenberg_perturbed"];

fn abelian(n: usize) -> Result<CCStructure> {
    let fields: Vec<Vec<String>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|k| if i == k { "1".to_string() } else { "0".to_string() })
                .collect()
        })
        .collect();
    let text = serde_json::json!({
        "name": format!("abelian{n}"),
        "dimension": n,
        "filtration": [n],
        "fields": fields,
        "chart_radius": 8.0,
    });
    load_structure(&text.to_string())
}

/// Looks up a built-in space by name.
pub fn space(name: &str) -> Result<CCStructure> {
    match name {
        "heisenberg" => load_structure(HEISENBERG),
        "engel" => load_structure(ENGEL),
        "heisenberg_perturbed" => load_structure(HEISENBERG_PERTURBED),
        _ => {
            if let Some(n) = name.strip_prefix("abelian") {
                if let Ok(n) = n.parse::<usize>() {
                    if (1..=16).contains(&n) {
                        return abelian(n);
                    }
                }
            }
            Err(Error::InvalidArgument(format!(
                "unknown space {name:?}; available: {}",
                NAMES.join(", ")
            )))
        }
    }
}
