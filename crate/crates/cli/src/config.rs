//! Merging a JSON config file into the command line.
//!
//! The file holds one object per subcommand, keyed by subcommand name, whose
//! keys are long flag names (with `-` or `_`). Values become flags inserted
//! right after the subcommand; a flag already given on the command line wins.

use std::fs;

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Global flags that take a value, so their values are not mistaken for the subcommand.
const GLOBAL_VALUED: &[&str] = &["--config", "--log-level"];

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
        if !a.starts_with('-') {
            break;
        }
    }
    None
}

fn subcommand_index(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if GLOBAL_VALUED.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn flag_given(args: &[String], flag: &str) -> bool {
    args.iter()
        .any(|a| a == flag || a.strip_prefix(flag).is_some_and(|rest| rest.starts_with('=')))
}

fn scalar_arg(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => bail!("config key {key:?}: unsupported value {other}"),
    })
}

/// Returns `argv` with config-file flags spliced in. Errors are usage errors.
pub fn merge(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {path}"))?;
    let root: Value = serde_json::from_str(&text).with_context(|| format!("config file {path} is not valid JSON"))?;
    let Value::Object(sections) = root else {
        bail!("config file {path} must hold a JSON object");
    };
    let Some(sub_at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let Some(section) = sections.get(&argv[sub_at]) else {
        return Ok(argv);
    };
    let Value::Object(section) = section else {
        bail!("config section {:?} must be an object", argv[sub_at]);
    };
    let given = &argv[sub_at + 1..];
    let mut injected = Vec::new();
    for (key, value) in section {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag_given(given, &flag) {
            continue;
        }
        match value {
            Value::Bool(true) => injected.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                for item in items {
                    injected.push(flag.clone());
                    injected.push(scalar_arg(key, item)?);
                }
            }
            other => {
                injected.push(flag);
                injected.push(scalar_arg(key, other)?);
            }
        }
    }
    let mut out = argv[..=sub_at].to_vec();
    out.extend(injected);
    out.extend_from_slice(given);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"generate": {"seed": 3, "n": 10, "empty_prob": 0.5, "out": "x"}, "bench": {"batch_size": [1, 8]}}"#,
        )
        .unwrap();
        let p = path.display().to_string();
        let out = merge(v(&["bin", "--config", &p, "generate", "--seed", "7"])).unwrap();
        assert_eq!(out[..4], v(&["bin", "--config", &p, "generate"])[..]);
        assert!(out.windows(2).any(|w| w == ["--n", "10"]));
        assert!(out.windows(2).any(|w| w == ["--empty-prob", "0.5"]));
        assert!(out.windows(2).any(|w| w == ["--seed", "7"]));
        assert!(!out.windows(2).any(|w| w == ["--seed", "3"]));

        let out = merge(v(&["bin", &format!("--config={p}"), "bench"])).unwrap();
        assert_eq!(out.iter().filter(|a| *a == "--batch-size").count(), 2);
    }

    #[test]
    fn no_config_is_identity() {
        let a = v(&["bin", "lint", "--data", "d.json"]);
        assert_eq!(merge(a.clone()).unwrap(), a);
    }
}
