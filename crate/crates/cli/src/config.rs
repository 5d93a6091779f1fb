//! Flat INI-style run configuration: sections of key=value lines,
//! comments with '#'. Unknown sections or keys are rejected with the
//! offending line number, and every cross-reference (client ids, label
//! names) must resolve against one registry.

use crate::error::{CliError, Result};
use funavg_core::infer::UAgg;
use funavg_core::nn::{validate_chain, LayerSpec};
use funavg_core::registry::{ClientId, LabelRegistry};
use funavg_core::scalar::Dtype;
use funavg_core::uq::UNorm;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub image_size: usize,
    pub labels: Vec<String>,
    pub clients: Vec<String>,
    pub client_labels: BTreeMap<String, Vec<String>>,
    pub n_per_client: Vec<usize>,
    pub seed: u64,
    pub split_fraction: f64,
    pub label_jitter: bool,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: String,
    pub dropout_p: f64,
    pub dtype: Dtype,
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct UqConfig {
    pub t: usize,
    pub ece_bins: usize,
    pub u_norm: UNorm,
    pub u_agg: UAgg,
}

/// How the Others row scopes its (test client, label) pairs:
/// `SiteLabels` evaluates every label annotated at the test site (a
/// visiting model scores 0 on labels it cannot predict), `ModelLabels`
/// restricts to labels the visiting model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OthersScope {
    SiteLabels,
    ModelLabels,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub others_scope: OthersScope,
    pub dice_both_empty_one: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub uq: UqConfig,
    pub eval: EvalConfig,
}

// ---------------------------------------------------------------------------
// Raw INI parsing
// ---------------------------------------------------------------------------

struct RawConfig {
    /// (section, key) -> (value, line number)
    entries: BTreeMap<(String, String), (String, usize)>,
    path: String,
}

fn parse_ini(text: &str, path: &str) -> Result<RawConfig> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| {
                CliError::Config(format!("{path}:{}: unterminated section header", no + 1))
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{path}:{}: expected key = value", no + 1))
        })?;
        let key = key.trim().to_string();
        if section.is_empty() {
            return Err(CliError::Config(format!(
                "{path}:{}: key '{key}' outside any [section]",
                no + 1
            )));
        }
        if entries
            .insert((section.clone(), key.clone()), (value.trim().to_string(), no + 1))
            .is_some()
        {
            return Err(CliError::Config(format!(
                "{path}:{}: duplicate key '{key}' in [{section}]",
                no + 1
            )));
        }
    }
    Ok(RawConfig { entries, path: path.to_string() })
}

impl RawConfig {
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn require(&mut self, section: &str, key: &str) -> Result<(String, usize)> {
        self.take(section, key).ok_or_else(|| {
            CliError::Config(format!(
                "{}: missing required key '{key}' in [{section}]",
                self.path
            ))
        })
    }

    fn finish(self) -> Result<()> {
        if let Some(((section, key), (_, line))) = self.entries.into_iter().next() {
            return Err(CliError::Config(format!(
                "{}:{line}: unknown key '{key}' in [{section}]",
                self.path
            )));
        }
        Ok(())
    }
}

fn parse_as<T: std::str::FromStr>(raw: (String, usize), path: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.0.parse::<T>().map_err(|e| {
        CliError::Config(format!("{path}:{}: invalid {what} '{}': {e}", raw.1, raw.0))
    })
}

fn parse_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_bool(raw: (String, usize), path: &str) -> Result<bool> {
    match raw.0.as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(CliError::Config(format!(
            "{path}:{}: invalid flag '{other}' (expected on/off)",
            raw.1
        ))),
    }
}

// ---------------------------------------------------------------------------
// Typed config
// ---------------------------------------------------------------------------

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, path: &str) -> Result<RunConfig> {
        let mut raw = parse_ini(text, path)?;

        // [data]
        let image_size: usize = parse_as(raw.require("data", "image_size")?, path, "integer")?;
        let labels = parse_list(&raw.require("data", "labels")?.0);
        let clients = parse_list(&raw.require("data", "clients")?.0);
        let mut client_labels = BTreeMap::new();
        for c in &clients {
            let entry = raw.require("data", &format!("labels.{c}"))?;
            client_labels.insert(c.clone(), parse_list(&entry.0));
        }
        let n_raw = raw.require("data", "n_per_client")?;
        let n_line = n_raw.1;
        let n_per_client: Vec<usize> = parse_list(&n_raw.0)
            .iter()
            .map(|s| {
                s.parse::<usize>().map_err(|e| {
                    CliError::Config(format!("{path}:{n_line}: invalid n_per_client entry '{s}': {e}"))
                })
            })
            .collect::<Result<_>>()?;
        if n_per_client.len() != clients.len() {
            return Err(CliError::Config(format!(
                "{path}:{n_line}: n_per_client has {} entries but {} clients are declared",
                n_per_client.len(),
                clients.len()
            )));
        }
        let seed: u64 = parse_as(raw.require("data", "seed")?, path, "seed")?;
        let split_fraction: f64 = parse_as(raw.require("data", "split_fraction")?, path, "fraction")?;
        let label_jitter = match raw.take("data", "label_jitter") {
            Some(v) => parse_bool(v, path)?,
            None => false,
        };

        // [model]
        let layers = match raw.take("model", "layers") {
            Some(v) => v.0,
            None => default_layer_string(),
        };
        let dropout_p: f64 = parse_as(raw.require("model", "dropout_p")?, path, "probability")?;
        let dtype: Dtype = parse_as(raw.require("model", "dtype")?, path, "dtype")?;

        // [federation]
        let rounds: usize = parse_as(raw.require("federation", "rounds")?, path, "integer")?;
        let epochs: usize = parse_as(raw.require("federation", "epochs")?, path, "integer")?;
        let lr: f64 = parse_as(raw.require("federation", "lr")?, path, "learning rate")?;
        let batch: usize = parse_as(raw.require("federation", "batch")?, path, "integer")?;

        // [uq]
        let t: usize = parse_as(raw.require("uq", "T")?, path, "integer")?;
        let ece_bins: usize = parse_as(raw.require("uq", "ece_bins")?, path, "integer")?;
        let u_norm: UNorm = match raw.take("uq", "u_norm") {
            Some(v) => parse_as(v, path, "u_norm")?,
            None => UNorm::TraceNorm,
        };
        let u_agg: UAgg = match raw.take("uq", "u_agg") {
            Some(v) => parse_as(v, path, "u_agg")?,
            None => UAgg::Mean,
        };

        // [eval]
        let seeds_raw = raw.require("eval", "seeds")?;
        let seeds_line = seeds_raw.1;
        let seeds: Vec<u64> = parse_list(&seeds_raw.0)
            .iter()
            .map(|s| {
                s.parse::<u64>().map_err(|e| {
                    CliError::Config(format!("{path}:{seeds_line}: invalid seed '{s}': {e}"))
                })
            })
            .collect::<Result<_>>()?;
        let output_dir = PathBuf::from(raw.require("eval", "output_dir")?.0);
        let others_scope = match raw.take("eval", "others_scope") {
            Some(v) => match v.0.as_str() {
                "site_labels" => OthersScope::SiteLabels,
                "model_labels" => OthersScope::ModelLabels,
                other => {
                    return Err(CliError::Config(format!(
                        "{path}:{}: unknown others_scope '{other}'",
                        v.1
                    )))
                }
            },
            None => OthersScope::SiteLabels,
        };
        let dice_both_empty_one = match raw.take("eval", "dice_both_empty") {
            Some(v) => match v.0.as_str() {
                "one" => true,
                "skip" => false,
                other => {
                    return Err(CliError::Config(format!(
                        "{path}:{}: unknown dice_both_empty '{other}' (expected one/skip)",
                        v.1
                    )))
                }
            },
            None => true,
        };

        raw.finish()?;

        let cfg = RunConfig {
            data: DataConfig {
                image_size,
                labels,
                clients,
                client_labels,
                n_per_client,
                seed,
                split_fraction,
                label_jitter,
            },
            model: ModelConfig { layers, dropout_p, dtype },
            federation: FederationConfig { rounds, epochs, lr, batch },
            uq: UqConfig { t, ece_bins, u_norm, u_agg },
            eval: EvalConfig { seeds, output_dir, others_scope, dice_both_empty_one },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.registry()?;
        if self.data.image_size < 32 {
            return Err(CliError::Config("image_size must be at least 32".into()));
        }
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0) {
            return Err(CliError::Config("split_fraction must lie in (0,1)".into()));
        }
        for (c, n) in self.data.clients.iter().zip(&self.data.n_per_client) {
            if *n < 2 {
                return Err(CliError::Config(format!(
                    "client '{c}' needs at least 2 images to split, got {n}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout_p) {
            return Err(CliError::Config("dropout_p must lie in [0,1)".into()));
        }
        self.backbone_spec()?;
        if self.federation.rounds < 1 || self.federation.epochs < 1 {
            return Err(CliError::Config("rounds and epochs must be >= 1".into()));
        }
        if !(self.federation.lr > 0.0) {
            return Err(CliError::Config("lr must be positive".into()));
        }
        if self.federation.batch < 1 {
            return Err(CliError::Config("batch must be >= 1".into()));
        }
        if self.uq.t < 1 {
            return Err(CliError::Config("T must be >= 1".into()));
        }
        if self.uq.ece_bins < 1 {
            return Err(CliError::Config("ece_bins must be >= 1".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(CliError::Config("seeds list must not be empty".into()));
        }
        Ok(())
    }

    /// One registry resolves every client/label reference in the run.
    pub fn registry(&self) -> Result<LabelRegistry> {
        let sets: BTreeMap<ClientId, Vec<String>> = self
            .data
            .client_labels
            .iter()
            .map(|(c, l)| (ClientId(c.clone()), l.clone()))
            .collect();
        LabelRegistry::new(self.data.labels.clone(), sets)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.data.clients.iter().map(|c| ClientId(c.clone())).collect()
    }

    /// Parses the layer grammar into a validated backbone stack.
    pub fn backbone_spec(&self) -> Result<Vec<LayerSpec>> {
        parse_layers(&self.model.layers, self.model.dropout_p)
            .map_err(CliError::Config)
            .and_then(|spec| {
                validate_chain(&spec, 1).map_err(|e| CliError::Config(e.to_string()))?;
                Ok(spec)
            })
    }

    /// Canonical echo of the configuration, used for manifests and
    /// stage hashing: re-running with the same effective config must
    /// reproduce the same echo.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str("[data]\n");
        s.push_str(&format!("image_size={}\n", self.data.image_size));
        s.push_str(&format!("labels={}\n", self.data.labels.join(",")));
        s.push_str(&format!("clients={}\n", self.data.clients.join(",")));
        for c in &self.data.clients {
            s.push_str(&format!("labels.{c}={}\n", self.data.client_labels[c].join(",")));
        }
        s.push_str(&format!(
            "n_per_client={}\n",
            self.data
                .n_per_client
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("seed={}\n", self.data.seed));
        s.push_str(&format!("split_fraction={}\n", self.data.split_fraction));
        s.push_str(&format!(
            "label_jitter={}\n",
            if self.data.label_jitter { "on" } else { "off" }
        ));
        s.push_str("[model]\n");
        s.push_str(&format!("layers={}\n", self.model.layers));
        s.push_str(&format!("dropout_p={}\n", self.model.dropout_p));
        s.push_str(&format!("dtype={}\n", self.model.dtype));
        s.push_str("[federation]\n");
        s.push_str(&format!("rounds={}\n", self.federation.rounds));
        s.push_str(&format!("epochs={}\n", self.federation.epochs));
        s.push_str(&format!("lr={}\n", self.federation.lr));
        s.push_str(&format!("batch={}\n", self.federation.batch));
        s.push_str("[uq]\n");
        s.push_str(&format!("T={}\n", self.uq.t));
        s.push_str(&format!("ece_bins={}\n", self.uq.ece_bins));
        s.push_str(&format!(
            "u_norm={}\n",
            match self.uq.u_norm {
                UNorm::TraceNorm => "trace_norm",
                UNorm::PerImageMinmax => "per_image_minmax",
            }
        ));
        s.push_str(&format!(
            "u_agg={}\n",
            match self.uq.u_agg {
                UAgg::Mean => "mean",
                UAgg::Max => "max",
            }
        ));
        s.push_str("[eval]\n");
        s.push_str(&format!(
            "seeds={}\n",
            self.eval
                .seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("output_dir={}\n", self.eval.output_dir.display()));
        s.push_str(&format!(
            "others_scope={}\n",
            match self.eval.others_scope {
                OthersScope::SiteLabels => "site_labels",
                OthersScope::ModelLabels => "model_labels",
            }
        ));
        s.push_str(&format!(
            "dice_both_empty={}\n",
            if self.eval.dice_both_empty_one { "one" } else { "skip" }
        ));
        s
    }
}

pub fn default_layer_string() -> String {
    "conv3x3:1:16,relu,dropout,conv3x3:16:32,relu,dropout,conv3x3:32:32,relu".to_string()
}

/// Grammar: comma list of `conv3x3:IN:OUT`, `conv1x1:IN:OUT`, `relu`,
/// `dropout`. Channel counts of relu/dropout follow the running count.
pub fn parse_layers(text: &str, dropout_p: f64) -> std::result::Result<Vec<LayerSpec>, String> {
    let mut out = Vec::new();
    let mut channels = 1usize;
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts[0] {
            "conv3x3" | "conv1x1" => {
                if parts.len() != 3 {
                    return Err(format!("layer '{item}': expected {}:IN:OUT", parts[0]));
                }
                let cin: usize = parts[1].parse().map_err(|e| format!("layer '{item}': {e}"))?;
                let cout: usize = parts[2].parse().map_err(|e| format!("layer '{item}': {e}"))?;
                if cin == 0 || cout == 0 {
                    return Err(format!("layer '{item}': zero channel count"));
                }
                out.push(if parts[0] == "conv3x3" {
                    LayerSpec::conv3x3(cin, cout)
                } else {
                    LayerSpec::conv1x1(cin, cout)
                });
                channels = cout;
            }
            "relu" => out.push(LayerSpec::relu(channels)),
            "dropout" => out.push(LayerSpec::dropout(channels, dropout_p)),
            other => return Err(format!("unknown layer kind '{other}'")),
        }
    }
    if out.is_empty() {
        return Err("empty layer list".into());
    }
    Ok(out)
}
