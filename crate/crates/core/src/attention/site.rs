use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which U-Net stage an attention layer lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

/// Self-attention (image to image) or cross-attention (image to prompt tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

impl AttnKind {
    pub const ALL: [AttnKind; 2] = [AttnKind::SelfAttn, AttnKind::Cross];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
        }
    }
}

impl fmt::Display for AttnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self" => Ok(AttnKind::SelfAttn),
            "cross" => Ok(AttnKind::Cross),
            other => Err(Error::validation(format!(
                "unknown attention kind `{other}` (expected self or cross)"
            ))),
        }
    }
}

/// Key addressing one attention layer: kind plus its 1-based execution-order index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub kind: AttnKind,
    pub index: usize,
}

impl SiteKey {
    pub fn new(kind: AttnKind, index: usize) -> Self {
        Self { kind, index }
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:02}", self.kind, self.index)
    }
}

impl FromStr for SiteKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| Error::validation(format!("bad site key `{s}`")))?;
        let kind = s[..split].trim_end_matches(['@', '_', '-']).parse()?;
        let index = s[split..]
            .parse()
            .map_err(|_| Error::validation(format!("bad site index in `{s}`")))?;
        Ok(SiteKey { kind, index })
    }
}

/// Address and geometry of one attention layer instance.
///
/// Indices run 1..=N in execution order (down blocks, mid block, up blocks),
/// separately for each kind. Each transformer block contributes exactly one
/// self and one cross site with the same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionSite {
    pub index: usize,
    pub block: BlockKind,
    pub kind: AttnKind,
    /// Query length, `grid_h * grid_w`.
    pub spatial_len: usize,
    /// Key length; equals `spatial_len` for self-attention.
    pub context_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub heads: usize,
}

impl AttentionSite {
    pub fn key(&self) -> SiteKey {
        SiteKey::new(self.kind, self.index)
    }
}

impl fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_key_roundtrip_and_order() {
        let k = SiteKey::new(AttnKind::Cross, 7);
        assert_eq!(k.to_string(), "cross07");
        assert_eq!("cross07".parse::<SiteKey>().unwrap(), k);
        assert_eq!("self@4".parse::<SiteKey>().unwrap(), SiteKey::new(AttnKind::SelfAttn, 4));
        assert!("bogus".parse::<SiteKey>().is_err());
    }

    #[test]
    fn kind_serde_names() {
        assert_eq!(serde_json::to_string(&AttnKind::SelfAttn).unwrap(), "\"self\"");
        let k: AttnKind = serde_json::from_str("\"cross\"").unwrap();
        assert_eq!(k, AttnKind::Cross);
    }
}
