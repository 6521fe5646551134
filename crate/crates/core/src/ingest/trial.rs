use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::{IngestError, Result, TrialMeta};

/// Emotiv Insight electrodes, in tensor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    AF3,
    AF4,
    T7,
    T8,
    Pz,
}

pub const CHANNELS: [Channel; 5] = [Channel::AF3, Channel::AF4, Channel::T7, Channel::T8, Channel::Pz];

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::AF3 => "AF3",
            Channel::AF4 => "AF4",
            Channel::T7 => "T7",
            Channel::T8 => "T8",
            Channel::Pz => "Pz",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Channel> {
        CHANNELS
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| IngestError::UnknownChannel(s.to_string()))
    }
}

/// One recording: the five waveforms in file order plus whatever metadata
/// is known about it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTrial {
    pub channels: Vec<(Channel, Vec<f64>)>,
    pub meta: Option<TrialMeta>,
    pub label: Option<usize>,
    /// File the trial was read from, for error messages.
    pub path: Option<PathBuf>,
}

impl RawTrial {
    pub fn channel(&self, ch: Channel) -> Option<&[f64]> {
        self.channels.iter().find(|(c, _)| *c == ch).map(|(_, w)| w.as_slice())
    }
}

/// Parses `NAME,v1,v2,...` lines. Blank lines are ignored; both LF and CRLF
/// endings are accepted.
pub fn parse_trial_csv(text: &str) -> Result<RawTrial> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let mut channels: Vec<(Channel, Vec<f64>)> = Vec::with_capacity(5);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().trim();
        let channel: Channel = name.parse()?;
        if channels.iter().any(|(c, _)| *c == channel) {
            return Err(IngestError::DuplicateChannel(name.to_string()));
        }
        let wave = fields
            .enumerate()
            .map(|(i, v)| {
                let v = v.trim();
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| IngestError::NonNumeric {
                        line: lineno + 1,
                        column: i + 2,
                        value: v.to_string(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if wave.is_empty() {
            return Err(IngestError::EmptyWaveform(name.to_string()));
        }
        channels.push((channel, wave));
    }
    let missing: Vec<String> = CHANNELS
        .iter()
        .filter(|c| !channels.iter().any(|(have, _)| have == *c))
        .map(|c| c.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingChannels(missing));
    }
    Ok(RawTrial {
        channels,
        ..RawTrial::default()
    })
}

/// Inverse of [`parse_trial_csv`]. Values use Rust's shortest round-trip
/// formatting, so parsing the output reproduces every sample exactly.
pub fn serialize_trial(trial: &RawTrial) -> String {
    let mut out = String::new();
    for (ch, wave) in &trial.channels {
        out.push_str(ch.name());
        for v in wave {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
