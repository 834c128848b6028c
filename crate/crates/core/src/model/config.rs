//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Unknown keys are an error. Later assignments override earlier
//! ones, which is how command-line overrides are layered over a file.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{ModelSpec, TrainConfig};
use crate::error::{config, Result};

/// Model architecture plus training hyperparameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "height",
    "width",
    "patch",
    "channels",
    "dim",
    "heads",
    "layers",
    "top_k",
    "num_classes",
    "aggregation",
    "hcs",
    "seed",
    "steps",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "w_importance",
    "w_load",
    "eval_every",
    "eval_size",
    "signal_channels",
    "amplitude",
    "noise",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .or_else(|_| config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => config(format!("invalid value {value:?} for {key} (expected true/false)")),
    }
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("line {}: expected key = value, got {line:?}", n + 1));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, t) = (&mut self.spec, &mut self.train);
        match key {
            "height" => s.height = parse(key, value)?,
            "width" => s.width = parse(key, value)?,
            "patch" => s.patch = parse(key, value)?,
            "channels" => s.channels = parse(key, value)?,
            "dim" => s.dim = parse(key, value)?,
            "heads" => s.heads = parse(key, value)?,
            "layers" => s.layers = parse(key, value)?,
            "top_k" => s.top_k = parse(key, value)?,
            "num_classes" => s.num_classes = parse(key, value)?,
            "aggregation" => s.aggregation = value.parse()?,
            "hcs" => s.hcs = parse_bool(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "w_importance" => t.balance.importance = parse(key, value)?,
            "w_load" => t.balance.load = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "eval_size" => t.eval_size = parse(key, value)?,
            "signal_channels" => {
                t.signal_channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "amplitude" => t.amplitude = parse(key, value)?,
            "noise" => t.noise = parse(key, value)?,
            _ => return config(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        match pair.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v.trim()),
            None => config(format!("override {pair:?} is not key=value")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate(&self.spec)
    }

    /// Canonical text form; parsing it yields `self` back.
    pub fn to_text(&self) -> String {
        let (s, t) = (&self.spec, &self.train);
        let signal: Vec<String> = t.signal_channels.iter().map(usize::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
        kv("height", s.height.to_string());
        kv("width", s.width.to_string());
        kv("patch", s.patch.to_string());
        kv("channels", s.channels.to_string());
        kv("dim", s.dim.to_string());
        kv("heads", s.heads.to_string());
        kv("layers", s.layers.to_string());
        kv("top_k", s.top_k.to_string());
        kv("num_classes", s.num_classes.to_string());
        kv("aggregation", s.aggregation.to_string());
        kv("hcs", s.hcs.to_string());
        kv("seed", t.seed.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("beta1", format!("{:?}", t.beta1));
        kv("beta2", format!("{:?}", t.beta2));
        kv("eps", format!("{:?}", t.eps));
        kv("w_importance", format!("{:?}", t.balance.importance));
        kv("w_load", format!("{:?}", t.balance.load));
        kv("eval_every", t.eval_every.to_string());
        kv("eval_size", t.eval_size.to_string());
        kv("signal_channels", signal.join(","));
        kv("amplitude", format!("{:?}", t.amplitude));
        kv("noise", format!("{:?}", t.noise));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Aggregation;
    use crate::error::Error;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse("# desk run\ntop_k = 1  # sparse\n\nlr=0.5\nhcs = on\naggregation = uniform\n").unwrap();
        assert_eq!(cfg.spec.top_k, 1);
        assert_eq!(cfg.train.lr, 0.5);
        assert!(cfg.spec.hcs);
        assert_eq!(cfg.spec.aggregation, Aggregation::Uniform);
        let mut cfg = cfg;
        cfg.set_pair("top_k=3").unwrap();
        assert_eq!(cfg.spec.top_k, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(matches!(RunConfig::parse("topk = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr = fast"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("hcs = maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn text_form_round_trips_and_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.1 + 0.2;
        cfg.train.signal_channels = vec![0, 3, 5];
        cfg.spec.aggregation = Aggregation::Renormalized;
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
    }

    #[test]
    fn validation_checks_geometry() {
        let mut cfg = RunConfig::default();
        cfg.spec.patch = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.spec.top_k = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.signal_channels = vec![8];
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
