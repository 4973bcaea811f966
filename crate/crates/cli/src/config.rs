//! Flat `key = value` configuration text: the config-file format and the
//! checkpoint config snapshot share this parser.

use std::collections::BTreeMap;

pub type ConfigMap = BTreeMap<String, String>;

/// Parse `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse(text: &str) -> Result<ConfigMap, String> {
    let mut map = ConfigMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            ));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Deterministic rendering (sorted keys).
pub fn render(map: &ConfigMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_roundtrip() {
        let text = "# a comment\nalpha = 1\nbeta = two words  # trailing\n\n";
        let map = parse(text).unwrap();
        assert_eq!(map.get("alpha").unwrap(), "1");
        assert_eq!(map.get("beta").unwrap(), "two words");
        let rendered = render(&map);
        assert_eq!(parse(&rendered).unwrap(), map);
    }

    #[test]
    fn bad_lines_rejected() {
        assert!(parse("just a token").is_err());
    }
}
