//! `key=value` run configuration. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::generators::HeadMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorKind {
    #[default]
    Procedural,
    Neural,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procedural" => Ok(Self::Procedural),
            "neural" => Ok(Self::Neural),
            _ => Err(Error::Config(format!("unknown generator {s:?}"))),
        }
    }
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Procedural => "procedural",
            Self::Neural => "neural",
        })
    }
}

/// Parses `1/64`, `0.25` or `1`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad fraction {s:?}")))?;
            let b: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad fraction {s:?}")))?;
            a / b
        }
        None => s.parse().map_err(|_| Error::Config(format!("bad fraction {s:?}")))?,
    };
    if !(v > 0.0 && v <= 1.0) {
        return Err(Error::Config(format!("fraction {s} outside (0, 1]")));
    }
    Ok(v)
}

/// Settings shared by every command. Step counts, batch size and learning
/// rate are `None` until a command resolves them to its own defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorKind,
    pub head: HeadMode,
    /// Weights of a trained neural generator; required for `generator=neural`
    /// unless the command trains one.
    pub generator_path: Option<PathBuf>,
    /// Main trainer of single-stage commands.
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    /// Per-stage step counts used by the multi-stage pipelines.
    pub projection_steps: Option<usize>,
    pub pretrain_steps: Option<usize>,
    pub distill_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub fractions: Vec<String>,
    pub method: String,
    pub methods: Vec<String>,
    pub seeds: usize,
    pub sizes: Vec<usize>,
    pub n_annotated: usize,
    pub distill_samples: usize,
    pub pool: usize,
    pub real_test: usize,
    pub synthetic_test: usize,
    pub tau: f64,
    pub rounds: usize,
    pub purity_images: usize,
    pub purity_pixels: usize,
    pub match_weight: f64,
    pub rec_weight: f64,
    pub per_sample_stage: bool,
    pub normalize_losses: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorKind::Procedural,
            head: HeadMode::Linear,
            generator_path: None,
            steps: None,
            batch: None,
            lr: None,
            projection_steps: None,
            pretrain_steps: None,
            distill_steps: None,
            finetune_steps: None,
            fractions: ["1/64", "1/16", "1/4", "1"].map(String::from).to_vec(),
            method: "scratch".into(),
            methods: ["scratch", "pseudo", "layermatch"].map(String::from).to_vec(),
            seeds: 3,
            sizes: vec![1, 2, 5, 10, 15, 20],
            n_annotated: 20,
            distill_samples: 2000,
            pool: 512,
            real_test: 128,
            synthetic_test: 30,
            tau: 0.9,
            rounds: 2,
            purity_images: 10,
            purity_pixels: 200,
            match_weight: 1.0,
            rec_weight: 1.0,
            per_sample_stage: false,
            normalize_losses: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: repeated key {key}", no + 1)));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingPrerequisite(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "generator" => self.generator = v.parse()?,
            "head" => self.head = v.parse()?,
            "generator_path" => self.generator_path = Some(PathBuf::from(v)),
            "steps" => self.steps = Some(parse(key, v)?),
            "batch" => self.batch = Some(parse(key, v)?),
            "lr" => self.lr = Some(parse(key, v)?),
            "projection_steps" => self.projection_steps = Some(parse(key, v)?),
            "pretrain_steps" => self.pretrain_steps = Some(parse(key, v)?),
            "distill_steps" => self.distill_steps = Some(parse(key, v)?),
            "finetune_steps" => self.finetune_steps = Some(parse(key, v)?),
            "fractions" => self.fractions = list(v),
            "method" => self.method = v.to_owned(),
            "methods" => self.methods = list(v),
            "seeds" => self.seeds = parse(key, v)?,
            "sizes" => self.sizes = list(v).iter().map(|s| parse(key, s)).collect::<Result<_>>()?,
            "n_annotated" => self.n_annotated = parse(key, v)?,
            "distill_samples" => self.distill_samples = parse(key, v)?,
            "pool" => self.pool = parse(key, v)?,
            "real_test" => self.real_test = parse(key, v)?,
            "synthetic_test" => self.synthetic_test = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "purity_images" => self.purity_images = parse(key, v)?,
            "purity_pixels" => self.purity_pixels = parse(key, v)?,
            "match_weight" => self.match_weight = parse(key, v)?,
            "rec_weight" => self.rec_weight = parse(key, v)?,
            "per_sample_stage" => self.per_sample_stage = parse(key, v)?,
            "normalize_losses" => self.normalize_losses = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.fractions {
            parse_fraction(f)?;
        }
        if self.fractions.is_empty() || self.methods.is_empty() || self.sizes.is_empty() {
            return Err(Error::Config("fractions, methods and sizes must be nonempty".into()));
        }
        if self.seeds == 0 || self.pool == 0 || self.real_test == 0 || self.synthetic_test == 0 {
            return Err(Error::Config("seeds and dataset sizes must be positive".into()));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("batch must be positive".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lr {lr} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(self.match_weight >= 0.0 && self.rec_weight >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn fraction_values(&self) -> Result<Vec<f64>> {
        self.fractions.iter().map(|f| parse_fraction(f)).collect()
    }

    /// Every key with its value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("generator", self.generator.to_string());
        kv(
            "head",
            match self.head {
                HeadMode::Linear => "linear".into(),
                HeadMode::Nonlinear => "nonlinear".into(),
            },
        );
        if let Some(p) = &self.generator_path {
            kv("generator_path", p.display().to_string());
        }
        if let Some(v) = self.steps {
            kv("steps", v.to_string());
        }
        if let Some(v) = self.batch {
            kv("batch", v.to_string());
        }
        if let Some(v) = self.lr {
            kv("lr", v.to_string());
        }
        for (k, v) in [
            ("projection_steps", self.projection_steps),
            ("pretrain_steps", self.pretrain_steps),
            ("distill_steps", self.distill_steps),
            ("finetune_steps", self.finetune_steps),
        ] {
            if let Some(v) = v {
                kv(k, v.to_string());
            }
        }
        kv("fractions", self.fractions.join(","));
        kv("method", self.method.clone());
        kv("methods", self.methods.join(","));
        kv("seeds", self.seeds.to_string());
        kv("sizes", self.sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        kv("n_annotated", self.n_annotated.to_string());
        kv("distill_samples", self.distill_samples.to_string());
        kv("pool", self.pool.to_string());
        kv("real_test", self.real_test.to_string());
        kv("synthetic_test", self.synthetic_test.to_string());
        kv("tau", self.tau.to_string());
        kv("rounds", self.rounds.to_string());
        kv("purity_images", self.purity_images.to_string());
        kv("purity_pixels", self.purity_pixels.to_string());
        kv("match_weight", self.match_weight.to_string());
        kv("rec_weight", self.rec_weight.to_string());
        kv("per_sample_stage", self.per_sample_stage.to_string());
        kv("normalize_losses", self.normalize_losses.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = RunConfig::parse("# run\nseed = 7\ngenerator=neural\nfractions=1/64, 1/4\nsteps=300\nlr=0.001\n\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.generator, GeneratorKind::Neural);
        assert_eq!(cfg.fraction_values().unwrap(), vec![1.0 / 64.0, 0.25]);
        assert_eq!(cfg.steps, Some(300));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_documentation() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fraction_values().unwrap(), vec![1.0 / 64.0, 1.0 / 16.0, 0.25, 1.0]);
        assert_eq!((cfg.pool, cfg.real_test, cfg.synthetic_test), (512, 128, 30));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["colour=red", "seed=x", "seed=1\nseed=2", "novalue", "fractions=0", "fractions=3/2", "tau=0", "batch=0"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
