use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{IngestError, Result};

/// Matches the names written by [`format_filename`], e.g.
/// `Insight_n01855672_1234_s01_g0007.csv`.
pub const DEFAULT_FILENAME_PATTERN: &str =
    r"^(?P<headset>[A-Za-z0-9]+)_(?P<synset>n\d{8})_(?P<image>\d+)_s(?P<session>\d+)_g(?P<global>\d+)\.csv$";

const GROUPS: [&str; 5] = ["headset", "synset", "image", "session", "global"];

/// Metadata carried by a trial's filename.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub headset: String,
    pub synset_id: String,
    pub image_index: u64,
    pub session: u32,
    pub global_session: u32,
}

/// A compiled filename grammar. All five named groups are checked when the
/// pattern is built, so a bad pattern fails at configuration time.
#[derive(Debug, Clone)]
pub struct FilenamePattern {
    regex: Regex,
}

impl Default for FilenamePattern {
    fn default() -> Self {
        FilenamePattern::new(DEFAULT_FILENAME_PATTERN).expect("default pattern is valid")
    }
}

impl FilenamePattern {
    pub fn new(pattern: &str) -> Result<FilenamePattern> {
        let regex = Regex::new(pattern).map_err(|e| IngestError::InvalidPattern(e.to_string()))?;
        let names: Vec<&str> = regex.capture_names().flatten().collect();
        if let Some(missing) = GROUPS.iter().find(|g| !names.contains(g)) {
            return Err(IngestError::MissingGroup(missing));
        }
        Ok(FilenamePattern { regex })
    }

    pub fn as_str(&self) -> &str {
        self.regex.as_str()
    }

    pub fn parse(&self, name: &str) -> Result<TrialMeta> {
        let caps = self
            .regex
            .captures(name)
            .ok_or_else(|| IngestError::NoMatch(name.to_string()))?;
        let text = |g: &'static str| caps.name(g).map(|m| m.as_str()).unwrap_or_default();
        let int = |g: &'static str| {
            text(g).parse::<u64>().map_err(|_| IngestError::BadInteger {
                name: name.to_string(),
                field: g,
                value: text(g).to_string(),
            })
        };
        let small = |g: &'static str| {
            int(g).and_then(|v| {
                u32::try_from(v).map_err(|_| IngestError::BadInteger {
                    name: name.to_string(),
                    field: g,
                    value: text(g).to_string(),
                })
            })
        };
        Ok(TrialMeta {
            headset: text("headset").to_string(),
            synset_id: text("synset").to_string(),
            image_index: int("image")?,
            session: small("session")?,
            global_session: small("global")?,
        })
    }
}

/// Writes the name the default pattern parses back.
pub fn format_filename(meta: &TrialMeta) -> String {
    format!(
        "{}_{}_{}_s{:02}_g{:04}.csv",
        meta.headset, meta.synset_id, meta.image_index, meta.session, meta.global_session
    )
}
