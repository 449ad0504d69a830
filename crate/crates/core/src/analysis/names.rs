//! Extraction of (layer index, weight role) from tensor names.
//!
//! The default parser understands the `...layers.<k>.<block>.<role>.weight`
//! scheme used by the Llama family; the toy trainer names its parameters the
//! same way so one parser serves both. A custom regex with two capture
//! groups (layer, role) can replace it. Names that do not parse fall into
//! role "other" with layer -1.

use regex::Regex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRole {
    pub layer: i64,
    pub role: String,
}

impl LayerRole {
    pub fn other() -> Self {
        LayerRole {
            layer: -1,
            role: "other".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub enum NamePattern {
    /// `layers.<k>` segment followed by dotted blocks; role is the last
    /// segment before a trailing `weight`/`bias`.
    #[default]
    LayerDotRole,
    /// Custom regex whose first capture is the layer index and second the
    /// role.
    Custom(Regex),
}

impl NamePattern {
    pub fn from_regex(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::Recipe(format!("invalid name pattern '{pattern}': {e}")))?;
        if re.captures_len() < 3 {
            return Err(Error::Recipe(format!(
                "name pattern '{pattern}' needs two capture groups (layer, role)"
            )));
        }
        Ok(NamePattern::Custom(re))
    }

    pub fn parse(&self, name: &str) -> LayerRole {
        match self {
            NamePattern::LayerDotRole => parse_layer_dot_role(name),
            NamePattern::Custom(re) => {
                let Some(caps) = re.captures(name) else {
                    return LayerRole::other();
                };
                let layer = caps.get(1).and_then(|m| m.as_str().parse::<i64>().ok());
                let role = caps.get(2).map(|m| m.as_str().to_string());
                match (layer, role) {
                    (Some(layer), Some(role)) => LayerRole { layer, role },
                    _ => LayerRole::other(),
                }
            }
        }
    }
}

fn parse_layer_dot_role(name: &str) -> LayerRole {
    let segs: Vec<&str> = name.split('.').collect();
    let Some(pos) = segs
        .iter()
        .position(|&s| s == "layers")
        .filter(|&p| p + 1 < segs.len())
    else {
        return LayerRole::other();
    };
    let Ok(layer) = segs[pos + 1].parse::<i64>() else {
        return LayerRole::other();
    };
    let mut rest = &segs[pos + 2..];
    if let Some((&last, head)) = rest.split_last()
        && (last == "weight" || last == "bias")
    {
        rest = head;
    }
    match rest.last() {
        Some(&role) => LayerRole {
            layer,
            role: role.to_string(),
        },
        None => LayerRole {
            layer,
            role: "other".to_string(),
        },
    }
}
