//! `--config <file.json>`: a flat object of flag values sitting between the
//! built-in defaults and the command line.

use serde_json::Value;

use crate::{usage, CliResult};

/// Replace `--config <path>` with the flags it holds. They are inserted
/// ahead of the user's own flags, which therefore win.
pub(crate) fn expand(argv: &[String]) -> CliResult<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it.next().ok_or_else(|| usage("--config needs a file"))?;
            path = Some(p.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path)?;
    let flags = flags_from(&serde_json::from_str(&text)?)?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| a.starts_with('-'))
        .map_or(rest.len(), |i| i + 1);
    rest.splice(at..at, flags);
    Ok(rest)
}

fn scalar(v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(usage(format!("config values must be scalars, got {other}"))),
    }
}

fn flags_from(doc: &Value) -> CliResult<Vec<String>> {
    let obj = doc
        .as_object()
        .ok_or_else(|| usage("config file must hold a JSON object"))?;
    let mut out = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar).collect::<CliResult<_>>()?;
                out.push(flag);
                out.push(parts.join(","));
            }
            v => {
                out.push(flag);
                out.push(scalar(v)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn no_config_is_identity() {
        let a = argv(&["stab", "train", "--arch", "mlp"]);
        assert_eq!(expand(&a).unwrap(), a);
    }

    #[test]
    fn flags_from_object() {
        let doc: Value = serde_json::from_str(
            r#"{"epochs": 3, "hidden": [8, 4], "grid_from_paper": true, "x": false}"#,
        )
        .unwrap();
        assert_eq!(
            flags_from(&doc).unwrap(),
            argv(&["--epochs", "3", "--grid-from-paper", "--hidden", "8,4"])
        );
        assert!(flags_from(&Value::from(3)).is_err());
    }

    #[test]
    fn config_flags_precede_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"k": 5}"#).unwrap();
        let a = argv(&[
            "stab",
            "attack",
            "pixels",
            "--config",
            p.to_str().unwrap(),
            "--k",
            "7",
        ]);
        assert_eq!(
            expand(&a).unwrap(),
            argv(&["stab", "attack", "pixels", "--k", "5", "--k", "7"])
        );
    }
}
