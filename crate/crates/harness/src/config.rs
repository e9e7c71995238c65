//! Experiment configuration: flat `key = value` text with dotted section
//! prefixes (`train.epochs = 30`), overridable from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sparse_at_core::attacks::AttackConfig;
use sparse_at_core::models::{ModelSpec, WidthScope};
use sparse_at_core::sparsity::Allocator;
use sparse_at_core::train::{FbConfig, LrSchedule, RbConfig, Regime, TrainConfig};

use crate::error::{HarnessError, Result};

/// Training procedure of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DenseAt,
    SmallDense,
    RandomPrune,
    Omp,
    Snip,
    IgqStatic,
    RobustBird,
    FlyingBird,
    FlyingBirdPlus,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::DenseAt,
        Method::SmallDense,
        Method::RandomPrune,
        Method::Omp,
        Method::Snip,
        Method::IgqStatic,
        Method::RobustBird,
        Method::FlyingBird,
        Method::FlyingBirdPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DenseAt => "dense-AT",
            Method::SmallDense => "small-dense",
            Method::RandomPrune => "random-prune",
            Method::Omp => "OMP",
            Method::Snip => "SNIP",
            Method::IgqStatic => "IGQ-static",
            Method::RobustBird => "robust-bird",
            Method::FlyingBird => "flying-bird",
            Method::FlyingBirdPlus => "flying-bird+",
        }
    }

    /// Whether the method trains a masked model.
    pub fn is_sparse(self) -> bool {
        !matches!(self, Method::DenseAt | Method::SmallDense)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Idx,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub path: PathBuf,
    /// Training samples kept after the validation hold-out; 0 keeps all.
    pub train_size: usize,
    pub val_size: usize,
    /// Test samples kept; 0 keeps all.
    pub test_size: usize,
    pub split_seed: u64,
    /// Size of the fixed training subset used for train robust accuracy.
    pub train_eval_size: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_shape: Vec<usize>,
    pub synthetic_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    ConvNet,
    ResNet,
    Vgg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Stage widths (ConvNet) or hidden sizes (MLP).
    pub widths: Vec<usize>,
    pub base_width: usize,
    pub blocks: usize,
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let image = || -> Result<[usize; 3]> {
            <[usize; 3]>::try_from(input_shape)
                .map_err(|_| HarnessError::Config(format!("{:?} needs [C,H,W] inputs, got {input_shape:?}", self.arch)))
        };
        let flat: usize = input_shape.iter().product();
        let spec = match self.arch {
            Arch::Mlp => {
                let mut s = ModelSpec::mlp(flat, &self.widths, classes);
                if input_shape.len() > 1 {
                    s.input_shape = input_shape.to_vec();
                    s.layers.insert(0, sparse_at_core::models::LayerKind::Flatten);
                }
                s
            }
            Arch::ConvNet => ModelSpec::convnet(image()?, &self.widths, classes),
            Arch::ResNet => ModelSpec::resnet(image()?, self.blocks, self.base_width, classes),
            Arch::Vgg => ModelSpec::mini_vgg(image()?, self.base_width, classes),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceConfig {
    pub enabled: bool,
    pub points: usize,
    pub radius: f64,
    pub samples: usize,
    pub adversarial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub dtype: Dtype,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sparsity: f64,
    /// Allocator for random-mask methods.
    pub allocator: Allocator,
    pub rb: RbConfig,
    /// Training regime of the ticket search.
    pub rb_regime: Regime,
    pub fb: FbConfig,
    pub omp_pretrain_epochs: usize,
    pub small_dense_scope: WidthScope,
    pub surface: SurfaceConfig,
    /// Record measured per-epoch wall time in metrics.csv (otherwise 0, so
    /// reruns produce identical files).
    pub record_wall_time: bool,
}

/// Default settings, as config text.
pub const DEFAULTS: &str = "\
method = flying-bird+
seed = 0
dtype = f64

data.name = cifar10
data.path = data/cifar-10-batches-bin
data.train_size = 5000
data.val_size = 1000
data.test_size = 1000
data.split_seed = 0
data.train_eval_size = 1000
data.synthetic.classes = 10
data.synthetic.per_class = 100
data.synthetic.test_per_class = 20
data.synthetic.shape = 3x8x8
data.synthetic.noise = 0.1

model.arch = convnet
model.widths = 32,64,128
model.base_width = 16
model.blocks = 1

train.epochs = 30
train.batch_size = 128
train.schedule = multistep
train.lr = 0.1
train.milestones = 15,22
train.cyclic_max = 0.2
train.momentum = 0.9
train.weight_decay = 0.0005
train.regime = pgd
train.augment = true
train.eval_batch_size = 250

attack.eps = 8/255
attack.alpha = 2/255
attack.train_steps = 4
attack.eval_steps = 10
attack.random_start = true
attack.fast_alpha = 10/255

sparsity.target = 0.8
sparsity.allocator = uniform

rb.tau = 0.1
rb.queue_len = 5
rb.max_epochs = 30
rb.regime = standard

fb.allocator = igq
fb.update_interval = 30
fb.k0 = 0.5
fb.queue_len = 5
fb.freq_threshold = 0.6
fb.prune_boost = 0.004
fb.grow_boost = 0.0005
fb.adapt_start = 8

omp.pretrain_epochs = 30
small_dense.scope = hidden

surface.enabled = false
surface.points = 11
surface.radius = 1.0
surface.samples = 200
surface.adversarial = true

output.wall_time = false
";

/// Raw key/value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment; blank lines are
    /// ignored; a line `[section]` prefixes following keys with `section.`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    /// `self` layered over `base`.
    pub fn over(&self, base: &RawConfig) -> RawConfig {
        let mut values = base.values.clone();
        values.extend(self.values.clone());
        RawConfig { values }
    }
}

/// Typed reader that rejects unknown keys.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn str(&self, key: &str) -> Result<&'a str> {
        self.used.borrow_mut().insert(key.to_string());
        self.raw
            .values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| HarnessError::Config(format!("missing key {key}")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
    }

    fn float(&self, key: &str) -> Result<f64> {
        let v = self.str(key)?;
        parse_number(v).ok_or_else(|| HarnessError::Config(format!("{key}: cannot parse {v:?} as a number")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)?.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            v => Err(HarnessError::Config(format!("{key}: expected a boolean, got {v:?}"))),
        }
    }

    fn list(&self, key: &str, sep: char) -> Result<Vec<usize>> {
        let v = self.str(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(sep)
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?} as a list")))
            })
            .collect()
    }

    fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.raw.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

/// Number, optionally written as a fraction `a/b` (`8/255`).
pub fn parse_number(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?),
        None => s.trim().parse().ok(),
    }
}

fn regime(name: &str, attack: AttackConfig, fast_alpha: f64) -> Result<Regime> {
    match name.to_ascii_lowercase().as_str() {
        "standard" => Ok(Regime::Standard),
        "pgd" => Ok(Regime::Pgd(attack)),
        "fast-at" | "fast" | "fgsm" => Ok(Regime::FastAt {
            eps: attack.eps,
            alpha: fast_alpha,
        }),
        other => Err(HarnessError::Config(format!("unknown regime {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Resolves `raw` layered over [`DEFAULTS`].
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let merged = raw.over(&RawConfig::parse(DEFAULTS)?);
        let r = Reader {
            raw: &merged,
            used: Default::default(),
        };
        let kind = match r.str("data.name")?.to_ascii_lowercase().as_str() {
            "cifar10" => DatasetKind::Cifar10,
            "cifar100" => DatasetKind::Cifar100,
            "idx" => DatasetKind::Idx,
            "synthetic" => DatasetKind::Synthetic,
            other => return Err(HarnessError::Config(format!("unknown dataset {other:?}"))),
        };
        let data = DataConfig {
            kind,
            path: PathBuf::from(r.str("data.path")?),
            train_size: r.parse("data.train_size")?,
            val_size: r.parse("data.val_size")?,
            test_size: r.parse("data.test_size")?,
            split_seed: r.parse("data.split_seed")?,
            train_eval_size: r.parse("data.train_eval_size")?,
            synthetic_classes: r.parse("data.synthetic.classes")?,
            synthetic_per_class: r.parse("data.synthetic.per_class")?,
            synthetic_test_per_class: r.parse("data.synthetic.test_per_class")?,
            synthetic_shape: r.list("data.synthetic.shape", 'x')?,
            synthetic_noise: r.float("data.synthetic.noise")?,
        };
        let arch = match r.str("model.arch")?.to_ascii_lowercase().as_str() {
            "mlp" => Arch::Mlp,
            "convnet" => Arch::ConvNet,
            "resnet" => Arch::ResNet,
            "vgg" => Arch::Vgg,
            other => return Err(HarnessError::Config(format!("unknown architecture {other:?}"))),
        };
        let model = ModelConfig {
            arch,
            widths: r.list("model.widths", ',')?,
            base_width: r.parse("model.base_width")?,
            blocks: r.parse("model.blocks")?,
        };

        let eps = r.float("attack.eps")?;
        let alpha = r.float("attack.alpha")?;
        let random_start = r.bool("attack.random_start")?;
        let fast_alpha = r.float("attack.fast_alpha")?;
        let train_attack = AttackConfig {
            eps,
            alpha,
            steps: r.parse("attack.train_steps")?,
            random_start,
        };
        let eval_attack = AttackConfig {
            eps,
            alpha,
            steps: r.parse("attack.eval_steps")?,
            random_start,
        };
        let epochs: usize = r.parse("train.epochs")?;
        let schedule = match r.str("train.schedule")?.to_ascii_lowercase().as_str() {
            "multistep" => LrSchedule::multistep(r.float("train.lr")?, &r.list("train.milestones", ',')?),
            "cyclic" => LrSchedule::Cyclic {
                max: r.float("train.cyclic_max")?,
            },
            other => return Err(HarnessError::Config(format!("unknown schedule {other:?}"))),
        };
        let train = TrainConfig {
            epochs,
            batch_size: r.parse("train.batch_size")?,
            schedule,
            momentum: r.float("train.momentum")?,
            weight_decay: r.float("train.weight_decay")?,
            regime: regime(r.str("train.regime")?, train_attack, fast_alpha)?,
            eval_attack,
            augment: r.bool("train.augment")?,
            eval_batch_size: r.parse("train.eval_batch_size")?,
        };
        // Keys read only by some schedules still count as known.
        for k in ["train.lr", "train.milestones", "train.cyclic_max"] {
            r.used.borrow_mut().insert(k.into());
        }
        train.validate()?;

        let sparsity = r.float("sparsity.target")?;
        let allocator: Allocator = r.str("sparsity.allocator")?.parse()?;
        let rb = RbConfig {
            sparsity,
            tau: r.float("rb.tau")?,
            queue_len: r.parse("rb.queue_len")?,
            max_epochs: r.parse("rb.max_epochs")?,
        };
        let rb_regime = regime(r.str("rb.regime")?, train_attack, fast_alpha)?;
        let method: Method = r.str("method")?.parse()?;
        let fb = FbConfig {
            sparsity,
            allocator: r.str("fb.allocator")?.parse()?,
            update_interval: r.parse("fb.update_interval")?,
            k0: r.float("fb.k0")?,
            adaptive: method == Method::FlyingBirdPlus,
            queue_len: r.parse("fb.queue_len")?,
            freq_threshold: r.float("fb.freq_threshold")?,
            prune_boost: r.float("fb.prune_boost")?,
            grow_boost: r.float("fb.grow_boost")?,
            adapt_start: r.parse("fb.adapt_start")?,
        };
        let small_dense_scope = match r.str("small_dense.scope")?.to_ascii_lowercase().as_str() {
            "hidden" => WidthScope::Hidden,
            "all" => WidthScope::All,
            other => return Err(HarnessError::Config(format!("unknown width scope {other:?}"))),
        };
        let dtype = match r.str("dtype")? {
            "f64" => Dtype::F64,
            "f32" => Dtype::F32,
            other => return Err(HarnessError::Config(format!("unknown dtype {other:?}"))),
        };
        let cfg = ExperimentConfig {
            method,
            seed: r.parse("seed")?,
            dtype,
            data,
            model,
            train,
            sparsity,
            allocator,
            rb,
            rb_regime,
            fb,
            omp_pretrain_epochs: r.parse("omp.pretrain_epochs")?,
            small_dense_scope,
            surface: SurfaceConfig {
                enabled: r.bool("surface.enabled")?,
                points: r.parse("surface.points")?,
                radius: r.float("surface.radius")?,
                samples: r.parse("surface.samples")?,
                adversarial: r.bool("surface.adversarial")?,
            },
            record_wall_time: r.bool("output.wall_time")?,
        };
        let unknown = r.unused();
        if !unknown.is_empty() {
            return Err(HarnessError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        if !(0.0..1.0).contains(&cfg.sparsity) {
            return Err(HarnessError::Config(format!("sparsity.target {} outside [0, 1)", cfg.sparsity)));
        }
        if cfg.method == Method::RobustBird {
            cfg.rb.validate()?;
        }
        if matches!(cfg.method, Method::FlyingBird | Method::FlyingBirdPlus) {
            cfg.fb.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }
}
