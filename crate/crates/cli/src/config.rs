use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use peghole::adaptation::AdaptConfig;
use peghole::assembly::SuiteConfig;
use peghole::contact::{Domain, DomainConfig};
use peghole::dataset::{DatasetConfig, PairedConfig, SimConfig};
use peghole::estimator::{TrainConfig, DEFAULT_WIDTH};
use peghole::geometry::ShapeSetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width: DEFAULT_WIDTH }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssembleSection {
    /// Domain the suite runs in.
    pub domain: Domain,
    #[serde(flatten)]
    pub suite: SuiteConfig,
}

impl Default for AssembleSection {
    fn default() -> Self {
        Self {
            domain: Domain::Sim,
            suite: SuiteConfig::default(),
        }
    }
}

/// Fully resolved configuration. A snapshot is written into every run
/// directory and its hash names the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: ShapeSetConfig,
    pub sim: SimConfig,
    pub dataset: DatasetConfig,
    pub paired: PairedConfig,
    /// Target domain of the paired dataset and of adaptation.
    pub real_domain: DomainConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub adaptation: AdaptConfig,
    pub assemble: AssembleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            geometry: ShapeSetConfig::default(),
            sim: SimConfig::default(),
            dataset: DatasetConfig::default(),
            paired: PairedConfig::default(),
            real_domain: DomainConfig::pseudo_real(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            adaptation: AdaptConfig::default(),
            assemble: AssembleSection::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::default(),
            Scale::Paper => Self {
                geometry: ShapeSetConfig::paper_scale(),
                dataset: DatasetConfig::paper_scale(),
                ..Self::default()
            },
        }
    }

    /// Preset, then the TOML file, then `key.path=json` overrides, then the
    /// seed flag. Later layers win.
    pub fn resolve(scale: Scale, toml_text: Option<&str>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let mut tree = serde_json::to_value(Self::preset(scale))?;
        if let Some(text) = toml_text {
            let file: toml::Table = toml::from_str(text).context("parsing config TOML")?;
            merge(&mut tree, serde_json::to_value(file)?);
        }
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not of the form key.path=<json>"))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        let mut cfg: Self = serde_json::from_value(tree.clone()).context("invalid configuration")?;
        // Nested sections ignore unknown keys on their own, so compare with
        // the canonical form to catch typos anywhere.
        let mut unknown = Vec::new();
        unknown_keys(&tree, &serde_json::to_value(&cfg)?, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    /// Derived per-stage seeds so stages never share a stream.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        peghole::seed::mix(&[self.seed, stage])
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (name, v) in g {
            let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
            match k.get(name) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            bail!("override path `{path}` descends into a non-table value");
        };
        if i + 1 == parts.len() {
            map.insert(p.to_string(), value);
            return Ok(());
        }
        cur = map.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    bail!("empty override path")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let toml = "seed = 3\n[dataset]\ntrain_per_shape = 10\n";
        let cfg = RunConfig::resolve(
            Scale::Desk,
            Some(toml),
            &["dataset.val_per_shape=4".into(), "training.epochs=2".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.dataset.train_per_shape, 10);
        assert_eq!(cfg.dataset.val_per_shape, 4);
        assert_eq!(cfg.dataset.test_per_shape, 100);
        assert_eq!(cfg.training.epochs, 2);
        let cfg = RunConfig::resolve(Scale::Desk, Some(toml), &[], Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn paper_preset_scales_dataset() {
        let cfg = RunConfig::resolve(Scale::Paper, None, &[], None).unwrap();
        assert_eq!(cfg.dataset.train_per_shape, 1200);
        assert_eq!(cfg.geometry.seen_per_class, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(Scale::Desk, Some("bogus = 1\n"), &[], None).is_err());
        assert!(RunConfig::resolve(Scale::Desk, None, &["seed".into()], None).is_err());
        assert!(RunConfig::resolve(Scale::Desk, Some("[training]\nepoch = 3\n"), &[], None).is_err());
        assert!(RunConfig::resolve(Scale::Desk, None, &["assemble.assembly.spiral.pich=2".into()], None).is_err());
    }

    #[test]
    fn domain_parses_from_toml() {
        let cfg = RunConfig::resolve(Scale::Desk, Some("[assemble]\ndomain = \"PSEUDO_REAL\"\nscenarios_per_class = 3\n"), &[], None).unwrap();
        assert_eq!(cfg.assemble.domain, Domain::PseudoReal);
        assert_eq!(cfg.assemble.suite.scenarios_per_class, 3);
    }
}
