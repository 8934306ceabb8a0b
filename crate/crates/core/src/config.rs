//! Run configuration files.
//!
//! A config is TOML: a top-level `scenario = "<catalog name>"` selects the
//! base instance, and the sections `[grid]`, `[time]`, `[model]`, `[mu]`,
//! `[phi]`, `[mc]` and `[check]` override its fields key by key.
//!
//! ```toml
//! scenario = "state-invariant-ref"
//!
//! [grid]
//! n_points = 401
//!
//! [mu]
//! density = "0.3*normal(-1,0.4) + 0.7*normal(1,0.8)"
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::scenario::{catalog, ScenarioSpec};

const SECTIONS: [&str; 7] = ["grid", "time", "model", "mu", "phi", "mc", "check"];

/// Parses config text into a full scenario spec.
pub fn parse_config(text: &str) -> Result<ScenarioSpec> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    let name = match table.get("scenario") {
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::Config("'scenario' must be a string".into())),
        None => return Err(Error::Config("missing top-level key 'scenario'".into())),
    };
    let base = toml::Value::try_from(catalog(&name)?).map_err(|e| Error::Config(format!("{e}")))?;
    let toml::Value::Table(mut merged) = base else {
        unreachable!("a scenario spec serializes to a table")
    };
    for (key, value) in table {
        match (key.as_str(), value) {
            ("scenario", _) => {}
            ("name", v @ toml::Value::String(_)) => {
                merged.insert(key, v);
            }
            (section, toml::Value::Table(fields)) if SECTIONS.contains(&section) => {
                let Some(toml::Value::Table(target)) = merged.get_mut(section) else {
                    unreachable!("catalog specs have every section")
                };
                target.extend(fields);
            }
            (other, _) => {
                return Err(Error::Config(format!(
                    "unexpected top-level entry '{other}' (sections: {})",
                    SECTIONS.join(", ")
                )))
            }
        }
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{e}")))
}

pub fn load_config(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_merge_into_catalog_entry() {
        let spec = parse_config(
            r#"
scenario = "pure-diffusion"
[grid]
n_points = 401
[mc]
seed = 5
[check]
h_values = [0.4, 0.2, 0.1, 0.05]
"#,
        )
        .unwrap();
        let base = catalog("pure-diffusion").unwrap();
        assert_eq!(spec.grid.n_points, 401);
        assert_eq!(spec.grid.x_min, base.grid.x_min);
        assert_eq!(spec.mc.seed, 5);
        assert_eq!(spec.mc.n_paths, base.mc.n_paths);
        assert_eq!(spec.check.h_values, vec![0.4, 0.2, 0.1, 0.05]);
        assert_eq!(spec.model, base.model);
    }

    #[test]
    fn integers_are_accepted_for_reals() {
        let spec = parse_config("scenario = \"pure-diffusion\"\n[grid]\nx_min = -6\nx_max = 6\n").unwrap();
        assert_eq!((spec.grid.x_min, spec.grid.x_max), (-6.0, 6.0));
    }

    #[test]
    fn errors_are_config_errors() {
        for text in [
            "",
            "scenario = 3",
            "scenario = \"nope\"",
            "scenario = \"pure-diffusion\"\n[grid]\nspacing = 0.1\n",
            "scenario = \"pure-diffusion\"\n[solver]\nx = 1\n",
            "scenario = \"pure-diffusion\"\n[grid]\nn_points = \"many\"\n",
            "scenario = ",
        ] {
            assert!(matches!(parse_config(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(load_config(Path::new("/nonexistent/cfg.toml")), Err(Error::Config(_))));
    }
}
