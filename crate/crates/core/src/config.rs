//! The run configuration: one TOML document covering data, models, training,
//! adaptation and benchmarking, with every default spelled out.

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::backbone::BackboneConfig;
use crate::data::CorruptionKind;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::io_util::sha256_hex;
use crate::train::{Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the source family (class means and every sample stream).
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 20,
            n_train: 10000,
            n_test: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    /// Ablation presets for the flow-loss weight.
    pub betas: Vec<f64>,
    pub corruption: CorruptionKind,
    pub severity: u8,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.01, 0.001],
            corruption: CorruptionKind::GaussianNoise,
            severity: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Adaptation step counts evaluated; 0 is the unadapted baseline.
    pub iterations: Vec<usize>,
    /// Evaluation seeds; each draws its own test set and corruption noise.
    pub seeds: Vec<u64>,
    pub include_clean: bool,
    pub include_natural: bool,
    pub curve_max_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 3, 5],
            iterations: vec![0, 1, 3, 10, 20, 50],
            seeds: vec![0, 1, 2, 3, 4],
            include_clean: false,
            include_natural: false,
            curve_max_iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub flow_train: TrainConfig,
    pub joint: JointConfig,
    pub adapt: AdaptConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut flow_train = TrainConfig::flow();
        flow_train.lr0 = 0.01;
        Self {
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::classifier(),
            flow_train,
            joint: JointConfig::default(),
            adapt: AdaptConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn to_table<T: Serialize>(v: &T) -> toml::Table {
    match toml::Value::try_from(v).expect("config serializes") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

/// Every key a config may contain: the defaults plus the alternative
/// schedule fields.
fn schema() -> toml::Table {
    let mut s = to_table(&RunConfig::default());
    let step = toml::Value::try_from(Schedule::Step {
        milestones: vec![],
        factor: 1.0,
    })
    .expect("schedule serializes");
    for section in ["train", "flow_train"] {
        if let Some(toml::Value::Table(t)) = s.get_mut(section) {
            t.insert("schedule".into(), step.clone());
        }
    }
    s
}

fn unknown_keys(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (known.get(k), v) {
            (None, _) => out.push(format!("unknown key `{path}`")),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => unknown_keys(ut, kt, &path, out),
            _ => {}
        }
    }
}

/// Deep merge; `top` wins. A changed schedule `kind` replaces the whole schedule.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(tt)) => {
                let kind_changed = k == "schedule" && tt.get("kind").is_some_and(|kind| bt.get("kind") != Some(kind));
                if kind_changed {
                    *bt = tt;
                } else {
                    merge(bt, tt);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override(assignment: &str) -> std::result::Result<(Vec<String>, toml::Value), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("override key `{key}` is malformed"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.clone(), value);
}

impl RunConfig {
    /// Resolves `text` (may be empty) plus `key=value` overrides against the
    /// defaults. All unknown keys and constraint violations are reported together.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("config is not valid TOML: {e}")]))?;
        let mut problems = Vec::new();
        for o in overrides {
            match parse_override(o) {
                Ok((path, value)) => set_path(&mut user, &path, value),
                Err(e) => problems.push(e),
            }
        }
        unknown_keys(&user, &schema(), "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut full = to_table(&RunConfig::default());
        merge(&mut full, user);
        let cfg: RunConfig = toml::Value::Table(full)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string().trim().replace('\n', " ")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", p.display())]))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let d = &self.data;
        if d.classes < 2 {
            p.push("data.classes must be at least 2".into());
        }
        if d.input_dim + 1 < d.classes {
            p.push("data.input_dim must be at least data.classes - 1".into());
        }
        if d.n_train < d.classes || d.n_test < d.classes {
            p.push("data.n_train and data.n_test must be at least data.classes".into());
        }
        if let Err(e) = self.backbone.validate() {
            p.push(format!("backbone: {e}"));
        }
        if self.backbone.input_dim != d.input_dim {
            p.push("backbone.input_dim must equal data.input_dim".into());
        }
        if self.backbone.classes != d.classes {
            p.push("backbone.classes must equal data.classes".into());
        }
        if let Err(e) = self.flow.validate() {
            p.push(format!("flow: {e}"));
        }
        if (1..=3).contains(&self.backbone.split_stage) && self.flow.dim != self.backbone.feature_dim() {
            p.push("flow.dim must equal the backbone width at split_stage".into());
        }
        p.extend(self.train.problems("train"));
        p.extend(self.flow_train.problems("flow_train"));
        p.extend(self.adapt.problems("adapt"));
        if self.adapt.adapt_scope > self.backbone.split_stage {
            p.push("adapt.adapt_scope must not exceed backbone.split_stage".into());
        }
        if self.joint.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            p.push("joint.betas must be non-negative".into());
        }
        if !(1..=5).contains(&self.joint.severity) {
            p.push("joint.severity must be in 1..=5".into());
        }
        let b = &self.bench;
        if b.severities.iter().any(|s| !(1..=5).contains(s)) {
            p.push("bench.severities must lie in 1..=5".into());
        }
        if b.iterations.is_empty() {
            p.push("bench.iterations must not be empty".into());
        }
        if b.seeds.is_empty() {
            p.push("bench.seeds must not be empty".into());
        }
        if b.curve_max_iters == 0 {
            p.push("bench.curve_max_iters must be at least 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::resolve(&cfg.to_toml(), &[]).unwrap(), cfg);
        assert_eq!(RunConfig::resolve("", &[]).unwrap(), cfg);
        let text = cfg.to_toml();
        for key in ["lr0", "milestones", "adapt_scope", "bn_mode_during_adapt", "scale_clamp", "seeds"] {
            assert!(text.contains(key), "{key} missing from printed config");
        }
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let text = "[train]\nepochz = 3\n[bench]\nfoo = 1\n[nonsense]\nx = 1\n";
        match RunConfig::resolve(text, &["adapt.lrr=0.1".into()]) {
            Err(Error::Config(p)) => {
                assert_eq!(p.len(), 4, "{p:?}");
                assert!(p.iter().any(|m| m.contains("train.epochz")));
                assert!(p.iter().any(|m| m.contains("adapt.lrr")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win_over_the_file() {
        let cfg = RunConfig::resolve(
            "[adapt]\niterations = 3\n",
            &[
                "adapt.iterations=7".into(),
                "bench.corruptions=[\"rotation\"]".into(),
                "adapt.bn_mode_during_adapt=eval".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.adapt.iterations, 7);
        assert_eq!(cfg.bench.corruptions, vec![CorruptionKind::Rotation]);
        assert_eq!(cfg.adapt.bn_mode_during_adapt, crate::backbone::BnMode::Eval);
    }

    #[test]
    fn schedule_kind_can_be_switched() {
        let cfg = RunConfig::resolve(
            "[flow_train.schedule]\nkind = \"step\"\nmilestones = [10]\nfactor = 2.0\n",
            &["train.schedule.kind=cosine".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.schedule, Schedule::Cosine);
        assert_eq!(
            cfg.flow_train.schedule,
            Schedule::Step {
                milestones: vec![10],
                factor: 2.0
            }
        );
    }

    #[test]
    fn constraint_violations_are_collected() {
        match RunConfig::resolve("", &["flow.dim=5".into(), "adapt.lr=-1".into(), "bench.seeds=[]".into()]) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.adapt.lr = 0.002;
        assert_ne!(a.hash(), b.hash());
    }
}
