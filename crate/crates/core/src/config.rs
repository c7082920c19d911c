//! Run configuration: profiles, flat `key = value` files and validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "MIRRORSEG_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected toy or full)"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub input_size: usize,
    pub c_low: usize,
    pub c_high: usize,
    /// Decoder width `D`.
    pub decoder_dim: usize,
    /// Memory width `d`.
    pub memory_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stops training after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,
    pub num_prompts: usize,
    pub min_distance: f64,
    pub heads: usize,
    pub rounds: usize,
    pub num_mask_tokens: usize,
    pub radius_low: usize,
    pub radius_high: usize,
    pub contrast_window: usize,
    pub checkpoint_every: usize,
    pub ablate_depth_warping: bool,
    pub ablate_fdaf: bool,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            input_size: 64,
            c_low: 32,
            c_high: 64,
            decoder_dim: 128,
            memory_dim: 128,
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 30,
            max_steps: None,
            seed: 0,
            dataset_root: None,
            num_prompts: 10,
            min_distance: 8.0,
            heads: 4,
            rounds: 2,
            num_mask_tokens: 3,
            radius_low: 3,
            radius_high: 1,
            contrast_window: 3,
            checkpoint_every: 100,
            ablate_depth_warping: false,
            ablate_fdaf: false,
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            input_size: 1024,
            c_low: 256,
            c_high: 256,
            decoder_dim: 256,
            memory_dim: 256,
            lr: 1e-5,
            weight_decay: 5e-4,
            epochs: 30,
            checkpoint_every: 1000,
            ..Self::toy()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "profile" => self.profile = value.parse()?,
            "input_size" => self.input_size = parse(key, value)?,
            "c_low" => self.c_low = parse(key, value)?,
            "c_high" => self.c_high = parse(key, value)?,
            "decoder_dim" => self.decoder_dim = parse(key, value)?,
            "memory_dim" => self.memory_dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "dataset_root" => {
                self.dataset_root = match value {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "num_prompts" => self.num_prompts = parse(key, value)?,
            "min_distance" => self.min_distance = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "num_mask_tokens" => self.num_mask_tokens = parse(key, value)?,
            "radius_low" => self.radius_low = parse(key, value)?,
            "radius_high" => self.radius_high = parse(key, value)?,
            "contrast_window" => self.contrast_window = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "ablate_depth_warping" => self.ablate_depth_warping = parse(key, value)?,
            "ablate_fdaf" => self.ablate_fdaf = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // the profile line selects the base bundle, so it is applied first
        let mut lines = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", no + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k == "profile" {
                *self = Self::for_profile(v.parse()?);
            } else {
                lines.push((k.to_string(), v.to_string()));
            }
        }
        for (k, v) in lines {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Overrides the seed from the environment when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return fail(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, v) in [
            ("c_low", self.c_low),
            ("c_high", self.c_high),
            ("decoder_dim", self.decoder_dim),
            ("memory_dim", self.memory_dim),
            ("num_prompts", self.num_prompts),
            ("heads", self.heads),
            ("radius_low", self.radius_low),
            ("radius_high", self.radius_high),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.c_low < 2 {
            return fail("c_low must be at least 2".into());
        }
        if self.memory_dim != self.decoder_dim {
            return fail(format!(
                "memory_dim {} must equal decoder_dim {}",
                self.memory_dim, self.decoder_dim
            ));
        }
        if self.decoder_dim % self.heads != 0 || self.decoder_dim % 4 != 0 {
            return fail(format!(
                "decoder_dim {} must be divisible by 4 and by heads {}",
                self.decoder_dim, self.heads
            ));
        }
        if self.contrast_window % 2 == 0 {
            return fail(format!("contrast_window {} must be odd", self.contrast_window));
        }
        if !(self.min_distance.is_finite() && self.min_distance >= 0.0) {
            return fail(format!("min_distance must be non-negative, got {}", self.min_distance));
        }
        Ok(())
    }

    /// Serializes every field as `key = value` lines, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("profile", self.profile.to_string()),
            ("input_size", self.input_size.to_string()),
            ("c_low", self.c_low.to_string()),
            ("c_high", self.c_high.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("memory_dim", self.memory_dim.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |v| v.to_string())),
            ("seed", self.seed.to_string()),
            (
                "dataset_root",
                self.dataset_root
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("num_prompts", self.num_prompts.to_string()),
            ("min_distance", self.min_distance.to_string()),
            ("heads", self.heads.to_string()),
            ("rounds", self.rounds.to_string()),
            ("num_mask_tokens", self.num_mask_tokens.to_string()),
            ("radius_low", self.radius_low.to_string()),
            ("radius_high", self.radius_high.to_string()),
            ("contrast_window", self.contrast_window.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ablate_depth_warping", self.ablate_depth_warping.to_string()),
            ("ablate_fdaf", self.ablate_fdaf.to_string()),
        ]
    }

    /// Fields that fix the parameter layout; a checkpoint must agree on all of them.
    pub fn architecture(&self) -> Vec<(&'static str, String)> {
        const KEYS: [&str; 12] = [
            "c_low",
            "c_high",
            "decoder_dim",
            "memory_dim",
            "heads",
            "rounds",
            "num_mask_tokens",
            "radius_low",
            "radius_high",
            "contrast_window",
            "ablate_depth_warping",
            "ablate_fdaf",
        ];
        self.entries().into_iter().filter(|(k, _)| KEYS.contains(k)).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        let f = RunConfig::full();
        assert_eq!((f.lr, f.weight_decay, f.epochs, f.input_size), (1e-5, 5e-4, 30, 1024));
        let t = RunConfig::toy();
        assert_eq!((t.input_size, t.c_low, t.c_high, t.decoder_dim, t.memory_dim), (64, 32, 64, 128, 128));
        f.validate().unwrap();
        t.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy();
        c.seed = 99;
        c.max_steps = Some(12);
        c.dataset_root = Some("/tmp/data".into());
        let mut back = RunConfig::full();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn profile_line_applies_first() {
        let mut c = RunConfig::toy();
        c.apply_text("lr = 0.5\n# comment\nprofile = full\n").unwrap();
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.input_size, 1024);
    }

    #[test]
    fn bad_inputs() {
        let mut c = RunConfig::toy();
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.apply_text("unknown_key = 3").is_err());
        assert!(c.apply_text("c_low = many").is_err());
        let mut c = RunConfig::toy();
        c.input_size = 40;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::toy();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.c_high = 0;
        assert!(c.validate().is_err());
    }
}
