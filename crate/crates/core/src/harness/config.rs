use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::simnet::LinkConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, line: usize, reason: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    /// The key the error is about, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. } | ConfigError::InvalidValue { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sim,
    Sockets,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Mode::Sim),
            "sockets" => Ok(Mode::Sockets),
            _ => Err(format!("`{s}` is neither `sim` nor `sockets`")),
        }
    }
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Sim => "sim",
            Mode::Sockets => "sockets",
        }
    }
}

pub const DEFAULT_LEVELS: [usize; 5] = [1, 2, 4, 8, 16];

/// One experiment: a sweep over parallelism levels, each repeated, with a
/// targeted striped transfer competing against background single-connection
/// flows.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Strictly ascending, all at least 1.
    pub levels: Vec<usize>,
    pub background_flows: usize,
    pub payload_size: u64,
    pub repetitions: u32,
    pub link: LinkConfig,
    /// Simulated seconds per run (sim mode).
    pub duration: f64,
    /// How long the background flows run before the targeted transfer starts.
    pub background_lead: f64,
    /// Receiver address for socket mode.
    pub listen: String,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Sim,
            levels: DEFAULT_LEVELS.to_vec(),
            background_flows: 1,
            payload_size: 1 << 30,
            repetitions: 1,
            link: LinkConfig { loss_probability: 0.01, ..LinkConfig::default() },
            duration: 60.0,
            background_lead: 1.0,
            listen: "127.0.0.1:0".into(),
            output_dir: PathBuf::from("results"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, line: usize, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue { key: key.into(), line, reason: e.to_string() })
}

fn parse_levels(value: &str) -> Result<Vec<usize>, String> {
    let levels = value
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if levels.is_empty() || levels.contains(&0) {
        return Err("parallelism levels must be at least 1".into());
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err("parallelism levels must be distinct and ascending".into());
    }
    Ok(levels)
}

fn parse_flows(value: &str) -> Result<(usize, usize), String> {
    let (n, b) = value.split_once('+').ok_or_else(|| format!("`{value}` is not <parallel>+<background>"))?;
    let n: usize = n.trim().parse().map_err(|e| format!("`{n}`: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
    if n == 0 {
        return Err("at least one parallel flow is required".into());
    }
    Ok((n, b))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        let mut levels = None;
        let mut flows = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) =
                trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax { line, text: trimmed.into() })?;
            let (key, value) = (key.trim(), value.trim());
            let invalid = |reason: String| ConfigError::InvalidValue { key: key.into(), line, reason };
            match key {
                "capacity_bps" => c.link.capacity_bps = parse_value(key, line, value)?,
                "one_way_delay_s" => c.link.one_way_delay = parse_value(key, line, value)?,
                "queue_limit_pkts" => c.link.queue_limit = parse_value(key, line, value)?,
                "loss_prob" => c.link.loss_probability = parse_value(key, line, value)?,
                "mss_bytes" => c.link.mss = parse_value(key, line, value)?,
                "seed" => c.link.seed = parse_value(key, line, value)?,
                "duration_s" => {
                    c.duration = parse_value(key, line, value)?;
                    if !(c.duration > 0.0 && c.duration.is_finite()) {
                        return Err(invalid("duration must be positive".into()));
                    }
                }
                "flows" => flows = Some(parse_flows(value).map_err(invalid)?),
                "mode" => c.mode = value.parse().map_err(invalid)?,
                "parallelism" => levels = Some(parse_levels(value).map_err(invalid)?),
                "payload_bytes" => c.payload_size = parse_value(key, line, value)?,
                "repetitions" => {
                    c.repetitions = parse_value(key, line, value)?;
                    if c.repetitions == 0 {
                        return Err(invalid("at least one repetition is required".into()));
                    }
                }
                "background_lead_s" => {
                    c.background_lead = parse_value(key, line, value)?;
                    if !(c.background_lead >= 0.0 && c.background_lead.is_finite()) {
                        return Err(invalid("lead must be nonnegative".into()));
                    }
                }
                "listen_addr" => c.listen = value.into(),
                "output_dir" => c.output_dir = PathBuf::from(value),
                _ => return Err(ConfigError::UnknownKey { key: key.into(), line }),
            }
            if matches!(key, "capacity_bps" | "one_way_delay_s" | "queue_limit_pkts" | "loss_prob" | "mss_bytes") {
                c.link.validate().map_err(|e| invalid(e.to_string()))?;
            }
        }
        if let Some((n, b)) = flows {
            c.background_flows = b;
            c.levels = vec![n];
        }
        if let Some(levels) = levels {
            c.levels = levels;
        }
        Ok(c)
    }

    /// The configuration as `key=value` text that [`ExperimentConfig::parse`]
    /// reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let levels: Vec<String> = self.levels.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "mode={}", self.mode.as_str());
        let _ = writeln!(s, "parallelism={}", levels.join(","));
        let _ = writeln!(s, "payload_bytes={}", self.payload_size);
        let _ = writeln!(s, "repetitions={}", self.repetitions);
        let _ = writeln!(s, "capacity_bps={}", self.link.capacity_bps);
        let _ = writeln!(s, "one_way_delay_s={}", self.link.one_way_delay);
        let _ = writeln!(s, "queue_limit_pkts={}", self.link.queue_limit);
        let _ = writeln!(s, "loss_prob={}", self.link.loss_probability);
        let _ = writeln!(s, "mss_bytes={}", self.link.mss);
        let _ = writeln!(s, "seed={}", self.link.seed);
        let _ = writeln!(s, "duration_s={}", self.duration);
        let _ = writeln!(s, "background_lead_s={}", self.background_lead);
        let _ = writeln!(s, "listen_addr={}", self.listen);
        let _ = writeln!(s, "output_dir={}", self.output_dir.display());
        // Written last so it does not override `parallelism` on reload.
        let _ = writeln!(s, "flows={}+{}", self.levels[0], self.background_flows);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.levels, vec![1, 2, 4, 8, 16]);
        assert_eq!(c.link.capacity_bps, 10e6);
        assert_eq!(c.link.queue_limit, 50);
    }

    #[test]
    fn keys_override_defaults() {
        let text = "# sweep\ncapacity_bps = 1e8\none_way_delay_s=0.02\nqueue_limit_pkts=10\nloss_prob=0.001\n\
                    mss_bytes=1000\nseed=9\nduration_s=30\nparallelism=1,3,5\nrepetitions=2\nmode=sockets\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.link.capacity_bps, 1e8);
        assert_eq!(c.link.one_way_delay, 0.02);
        assert_eq!(c.link.queue_limit, 10);
        assert_eq!(c.link.loss_probability, 0.001);
        assert_eq!(c.link.mss, 1000);
        assert_eq!(c.link.seed, 9);
        assert_eq!(c.duration, 30.0);
        assert_eq!(c.levels, vec![1, 3, 5]);
        assert_eq!(c.repetitions, 2);
        assert_eq!(c.mode, Mode::Sockets);
    }

    #[test]
    fn flows_sets_level_and_background() {
        let c = ExperimentConfig::parse("flows=4+2").unwrap();
        assert_eq!(c.levels, vec![4]);
        assert_eq!(c.background_flows, 2);
        let c = ExperimentConfig::parse("flows=4+2\nparallelism=1,2").unwrap();
        assert_eq!(c.levels, vec![1, 2]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("seed=1\nbandwidth=5").unwrap_err();
        assert_eq!(err.key(), Some("bandwidth"));
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("loss_prob=2", "loss_prob"),
            ("capacity_bps=-1", "capacity_bps"),
            ("parallelism=4,2", "parallelism"),
            ("parallelism=0,1", "parallelism"),
            ("parallelism=1,1", "parallelism"),
            ("flows=3", "flows"),
            ("repetitions=0", "repetitions"),
            ("mode=testbed", "mode"),
            ("seed=abc", "seed"),
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.key(), Some(key), "{text}");
        }
        assert!(matches!(ExperimentConfig::parse("novalue").unwrap_err(), ConfigError::Syntax { .. }));
    }

    #[test]
    fn text_round_trips() {
        let c = ExperimentConfig::parse("parallelism=2,8\nflows=2+3\nloss_prob=0.02\nseed=77").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
