//! Flat `key = value` run configuration with CLI overrides.
//!
//! Keys are namespaced `data.*`, `train.*`, `loss.*`, `fagnet.*`,
//! `fgcnet.*`. Unknown keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fagnet::{FagNetConfig, Head};
use crate::fgcnet::{EpsVariant, FgcNetConfig, OutputActivation};
use crate::losses::{ClfParams, KlVariant};
use crate::trainer::TrainConfig;

/// Raw parsed key/value pairs, insertion-independent (sorted map).
#[derive(Clone, Debug, Default)]
pub struct FlatConfig {
    map: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_checked(&text, &path.display().to_string())
    }

    pub fn from_str_checked(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected `key = value`", i + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { map })
    }

    /// Applies `key=value` override strings on top of the file values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("override `{item}` is not of the form key=value"))
            })?;
            self.map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub manifest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub clf: ClfParams,
    pub kl_variant: KlVariant,
}

/// Fully-typed effective configuration of one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub fagnet: FagNetConfig,
    pub fgcnet: FgcNetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig { manifest: None },
            train: TrainConfig::default(),
            loss: LossConfig {
                clf: ClfParams::default(),
                kl_variant: KlVariant::Standard,
            },
            fagnet: FagNetConfig::default(),
            fgcnet: FgcNetConfig::default(),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "data.manifest",
    "data.folds",
    "data.val_fraction",
    "train.initial_lr",
    "train.beta1",
    "train.beta2",
    "train.lr_decay_factor",
    "train.lr_decay_every",
    "train.batch_size",
    "train.max_epochs",
    "train.early_stop_patience",
    "train.weight_decay",
    "train.seed",
    "train.checkpoint_every",
    "loss.psi",
    "loss.varphi",
    "loss.J",
    "loss.kl_variant",
    "fagnet.input_size",
    "fagnet.base_filters",
    "fagnet.attention_kernel",
    "fagnet.head",
    "fagnet.dropout_rates",
    "fagnet.fc_sizes",
    "fgcnet.input_size",
    "fgcnet.stem_filters",
    "fgcnet.latent_dim",
    "fgcnet.eps_variant",
    "fgcnet.kl_variant",
    "fgcnet.skips",
    "fgcnet.output_activation",
    "model.kind",
];

impl RunConfig {
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        for key in flat.keys() {
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
            }
        }
        let mut cfg = RunConfig::default();

        cfg.data.manifest = flat.get("data.manifest").map(|s| s.to_string());
        parse_into(flat, "data.folds", &mut cfg.train.folds)?;
        parse_into(flat, "data.val_fraction", &mut cfg.train.val_fraction)?;

        parse_into(flat, "train.initial_lr", &mut cfg.train.initial_lr)?;
        parse_into(flat, "train.beta1", &mut cfg.train.beta1)?;
        parse_into(flat, "train.beta2", &mut cfg.train.beta2)?;
        parse_into(flat, "train.lr_decay_factor", &mut cfg.train.lr_decay_factor)?;
        parse_into(flat, "train.lr_decay_every", &mut cfg.train.lr_decay_every)?;
        parse_into(flat, "train.batch_size", &mut cfg.train.batch_size)?;
        parse_into(flat, "train.max_epochs", &mut cfg.train.max_epochs)?;
        parse_into(flat, "train.early_stop_patience", &mut cfg.train.early_stop_patience)?;
        parse_into(flat, "train.weight_decay", &mut cfg.train.weight_decay)?;
        parse_into(flat, "train.seed", &mut cfg.train.seed)?;
        parse_into(flat, "train.checkpoint_every", &mut cfg.train.checkpoint_every)?;

        parse_into(flat, "loss.psi", &mut cfg.loss.clf.psi)?;
        parse_into(flat, "loss.varphi", &mut cfg.loss.clf.varphi)?;
        parse_into(flat, "loss.J", &mut cfg.loss.clf.window)?;
        parse_into(flat, "loss.kl_variant", &mut cfg.loss.kl_variant)?;

        parse_into(flat, "fagnet.input_size", &mut cfg.fagnet.input_size)?;
        parse_into(flat, "fagnet.base_filters", &mut cfg.fagnet.base_filters)?;
        parse_into(flat, "fagnet.attention_kernel", &mut cfg.fagnet.attention_kernel)?;
        parse_into(flat, "fagnet.head", &mut cfg.fagnet.head)?;
        if let Some(v) = flat.get("fagnet.dropout_rates") {
            cfg.fagnet.dropout_rates = parse_triple(v, "fagnet.dropout_rates")?;
        }
        if let Some(v) = flat.get("fagnet.fc_sizes") {
            cfg.fagnet.fc_sizes = parse_triple(v, "fagnet.fc_sizes")?;
        }

        parse_into(flat, "fgcnet.input_size", &mut cfg.fgcnet.input_size)?;
        parse_into(flat, "fgcnet.stem_filters", &mut cfg.fgcnet.stem_filters)?;
        parse_into(flat, "fgcnet.latent_dim", &mut cfg.fgcnet.latent_dim)?;
        parse_into(flat, "fgcnet.eps_variant", &mut cfg.fgcnet.eps_variant)?;
        // the generator's KL follows loss.kl_variant unless pinned explicitly
        cfg.fgcnet.kl_variant = cfg.loss.kl_variant;
        parse_into(flat, "fgcnet.kl_variant", &mut cfg.fgcnet.kl_variant)?;
        parse_into(flat, "fgcnet.skips", &mut cfg.fgcnet.skips_enabled)?;
        if let Some(v) = flat.get("fgcnet.output_activation") {
            if v.trim().to_ascii_lowercase() != "sigmoid" {
                return Err(Error::InvalidConfig(format!(
                    "fgcnet.output_activation `{v}` unsupported (only `sigmoid`)"
                )));
            }
            cfg.fgcnet.output_activation = OutputActivation::Sigmoid;
        }

        cfg.train.validate()?;
        cfg.loss.clf.validate()?;
        cfg.fagnet.validate()?;
        cfg.fgcnet.validate()?;
        Ok(cfg)
    }

    /// Effective configuration as flat text (round-trips through
    /// [`RunConfig::from_flat`]).
    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::default();
        if let Some(m) = &self.data.manifest {
            f.set("data.manifest", m);
        }
        f.set("data.folds", self.train.folds);
        f.set("data.val_fraction", self.train.val_fraction);
        f.set("train.initial_lr", self.train.initial_lr);
        f.set("train.beta1", self.train.beta1);
        f.set("train.beta2", self.train.beta2);
        f.set("train.lr_decay_factor", self.train.lr_decay_factor);
        f.set("train.lr_decay_every", self.train.lr_decay_every);
        f.set("train.batch_size", self.train.batch_size);
        f.set("train.max_epochs", self.train.max_epochs);
        f.set("train.early_stop_patience", self.train.early_stop_patience);
        f.set("train.weight_decay", self.train.weight_decay);
        f.set("train.seed", self.train.seed);
        f.set("train.checkpoint_every", self.train.checkpoint_every);
        f.set("loss.psi", self.loss.clf.psi);
        f.set("loss.varphi", self.loss.clf.varphi);
        f.set("loss.J", self.loss.clf.window);
        f.set("loss.kl_variant", variant_name(self.loss.kl_variant));
        f.set("fagnet.input_size", self.fagnet.input_size);
        f.set("fagnet.base_filters", self.fagnet.base_filters);
        f.set("fagnet.attention_kernel", self.fagnet.attention_kernel);
        f.set(
            "fagnet.head",
            match self.fagnet.head {
                Head::Age => "age",
                Head::Gender => "gender",
            },
        );
        f.set(
            "fagnet.dropout_rates",
            format!(
                "{},{},{}",
                self.fagnet.dropout_rates[0], self.fagnet.dropout_rates[1], self.fagnet.dropout_rates[2]
            ),
        );
        f.set(
            "fagnet.fc_sizes",
            format!("{},{},{}", self.fagnet.fc_sizes[0], self.fagnet.fc_sizes[1], self.fagnet.fc_sizes[2]),
        );
        f.set("fgcnet.input_size", self.fgcnet.input_size);
        f.set("fgcnet.stem_filters", self.fgcnet.stem_filters);
        f.set("fgcnet.latent_dim", self.fgcnet.latent_dim);
        f.set(
            "fgcnet.eps_variant",
            match self.fgcnet.eps_variant {
                EpsVariant::Standard => "standard",
                EpsVariant::Paper => "paper",
            },
        );
        f.set("fgcnet.kl_variant", variant_name(self.fgcnet.kl_variant));
        f.set("fgcnet.skips", self.fgcnet.skips_enabled);
        f.set("fgcnet.output_activation", "sigmoid");
        f
    }
}

fn variant_name(v: KlVariant) -> &'static str {
    match v {
        KlVariant::Standard => "standard",
        KlVariant::Paper => "paper",
    }
}

fn parse_into<T>(flat: &FlatConfig, key: &str, slot: &mut T) -> Result<()>
where
    T: std::str::FromStr,
{
    if let Some(v) = flat.get(key) {
        *slot = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("cannot parse `{key} = {v}`")))?;
    }
    Ok(())
}

fn parse_triple<T: std::str::FromStr + Copy>(v: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split(',').map(|p| p.trim()).collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!("`{key}` needs three comma-separated values")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse `{key}` entry `{p}`")))?,
        );
    }
    Ok([out[0], out[1], out[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_apply_roundtrip() {
        let text = "\n# comment\ntrain.max_epochs = 5\nloss.varphi = 0.2\nfagnet.head = gender\n";
        let mut flat = FlatConfig::from_str_checked(text, "test").unwrap();
        flat.apply_overrides(&["train.max_epochs=7".to_string()]).unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.loss.clf.varphi, 0.2);
        assert_eq!(cfg.fagnet.head, Head::Gender);

        // effective text parses back to the same values
        let text = cfg.to_flat().to_text();
        let again = RunConfig::from_flat(&FlatConfig::from_str_checked(&text, "rt").unwrap()).unwrap();
        assert_eq!(again.train.max_epochs, 7);
        assert_eq!(again.loss.clf.varphi, 0.2);
    }

    #[test]
    fn unknown_key_rejected() {
        let flat = FlatConfig::from_str_checked("train.typo = 1\n", "test").unwrap();
        assert!(RunConfig::from_flat(&flat).is_err());
    }

    #[test]
    fn bad_override_shape() {
        let mut flat = FlatConfig::default();
        assert!(flat.apply_overrides(&["no-equals-sign".to_string()]).is_err());
    }

    #[test]
    fn fgcnet_kl_inherits_loss_variant() {
        let flat = FlatConfig::from_str_checked("loss.kl_variant = paper\n", "t").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.fgcnet.kl_variant, KlVariant::Paper);

        let flat =
            FlatConfig::from_str_checked("loss.kl_variant = paper\nfgcnet.kl_variant = standard\n", "t")
                .unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.fgcnet.kl_variant, KlVariant::Standard);
        assert_eq!(cfg.loss.kl_variant, KlVariant::Paper);
    }

    #[test]
    fn triple_parsing() {
        let flat = FlatConfig::from_str_checked("fagnet.dropout_rates = 0.1, 0.2, 0.3\n", "t").unwrap();
        let cfg = RunConfig::from_flat(&flat).unwrap();
        assert_eq!(cfg.fagnet.dropout_rates, [0.1, 0.2, 0.3]);
        let flat = FlatConfig::from_str_checked("fagnet.fc_sizes = 8,4\n", "t").unwrap();
        assert!(RunConfig::from_flat(&flat).is_err());
    }
}
