//! Training configuration and the line-oriented `key = value` config format.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::Variant;
use crate::kernel::Activation;
use crate::scalar::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rating,
    Ranking,
}

impl Task {
    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "rating" => Some(Task::Rating),
            "ranking" => Some(Task::Ranking),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Rating => "rating",
            Task::Ranking => "ranking",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub d_user: usize,
    pub d_gru: usize,
    pub d_dict: usize,
    pub d_embed: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
    pub p_drop: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sliding-window length for session-parallel batching.
    pub window: usize,
    pub n_neg: usize,
    pub w_pos: f64,
    pub w_neg: f64,
    pub task: Task,
    #[serde(rename = "activation")]
    pub activation: Activation,
    pub variant: Variant,
    pub seed: u64,
    pub precision: Precision,
    pub clip_predictions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_user: 300,
            d_gru: 256,
            d_dict: 1024,
            d_embed: 256,
            lr: 0.001,
            lr_decay: 0.9,
            decay_every_epochs: 5,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            l2: 0.001,
            p_drop: 0.02,
            batch_size: 16,
            epochs: 20,
            window: 64,
            n_neg: 4,
            w_pos: 1.0,
            w_neg: 0.2,
            task: Task::Rating,
            activation: Activation::Relu,
            variant: Variant::Full,
            seed: 42,
            precision: Precision::F64,
            clip_predictions: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_dims = [
            ("d_user", self.d_user),
            ("d_gru", self.d_gru),
            ("d_dict", self.d_dict),
            ("d_embed", self.d_embed),
            ("batch_size", self.batch_size),
            ("window", self.window),
        ];
        for (name, v) in positive_dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::Config(
                "decay_every_epochs must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!(
                "p_drop must lie in [0, 1), got {}",
                self.p_drop
            )));
        }
        if self.task == Task::Ranking {
            if self.n_neg == 0 {
                return Err(Error::Config("n_neg must be at least 1 for ranking".into()));
            }
            if self.w_pos.is_nan() || self.w_pos <= 0.0 {
                return Err(Error::Config("w_pos must be positive".into()));
            }
            if self.w_neg < 0.0 {
                return Err(Error::Config("w_neg must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Parse the `key = value` config format: one assignment per line, `#`
/// comments, keys exactly matching the TrainConfig field names. Unknown and
/// duplicated keys are hard errors.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    let mut d_embed_set = false;
    let mut d_gru_set = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {} is not `key = value`: `{raw}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(Error::Config(format!("duplicate config key `{key}`")));
        }
        seen.push(key.to_string());
        set_key(&mut cfg, key, value, &mut d_embed_set, &mut d_gru_set)?;
    }
    if d_gru_set && !d_embed_set {
        // The embedding width follows the GRU width unless pinned explicitly.
        cfg.d_embed = cfg.d_gru;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_key(
    cfg: &mut TrainConfig,
    key: &str,
    value: &str,
    d_embed_set: &mut bool,
    d_gru_set: &mut bool,
) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("bad value `{value}` for `{key}` ({what})"));
    macro_rules! num {
        ($t:ty, $what:expr) => {
            value.parse::<$t>().map_err(|_| bad($what))?
        };
    }
    match key {
        "d_user" => cfg.d_user = num!(usize, "positive integer"),
        "d_gru" => {
            cfg.d_gru = num!(usize, "positive integer");
            *d_gru_set = true;
        }
        "d_dict" => cfg.d_dict = num!(usize, "positive integer"),
        "d_embed" => {
            cfg.d_embed = num!(usize, "positive integer");
            *d_embed_set = true;
        }
        "lr" => cfg.lr = num!(f64, "real"),
        "lr_decay" => cfg.lr_decay = num!(f64, "real"),
        "decay_every_epochs" => cfg.decay_every_epochs = num!(usize, "positive integer"),
        "beta1" => cfg.beta1 = num!(f64, "real"),
        "beta2" => cfg.beta2 = num!(f64, "real"),
        "epsilon" => cfg.epsilon = num!(f64, "real"),
        "l2" => cfg.l2 = num!(f64, "real"),
        "p_drop" => cfg.p_drop = num!(f64, "real"),
        "batch_size" => cfg.batch_size = num!(usize, "positive integer"),
        "epochs" => cfg.epochs = num!(usize, "integer"),
        "window" => cfg.window = num!(usize, "positive integer"),
        "n_neg" => cfg.n_neg = num!(usize, "integer"),
        "w_pos" => cfg.w_pos = num!(f64, "real"),
        "w_neg" => cfg.w_neg = num!(f64, "real"),
        "task" => cfg.task = Task::parse(value).ok_or_else(|| bad("rating|ranking"))?,
        "activation" => {
            cfg.activation = Activation::parse(value).ok_or_else(|| bad("relu|sigmoid|tanh"))?
        }
        "variant" => {
            cfg.variant =
                Variant::parse(value).ok_or_else(|| bad("full|dynamic_only|static_only"))?
        }
        "seed" => cfg.seed = num!(u64, "integer"),
        "precision" => cfg.precision = Precision::parse(value).ok_or_else(|| bad("f32|f64"))?,
        "clip_predictions" => {
            cfg.clip_predictions = match value {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(bad("true|false")),
            }
        }
        other => {
            return Err(Error::Config(format!("unknown config key `{other}`")));
        }
    }
    Ok(())
}
