//! Experiment configuration: TOML schema, validation, and the derived run
//! identifier.

use crate::CliError;
use oclab_core::data::{ShiftKind, TaskParams};
use oclab_core::model::{ModelConfig, FIRST_SYMBOL};
use oclab_core::ocl::PlSourceModel;
use oclab_core::selftrain::{PlFilter, PlRoute};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stream: StreamSection,
    pub method: MethodSection,
    #[serde(default)]
    pub hyper: HyperSection,
    pub pretrain: PretrainSection,
}

fn default_out_dir() -> String {
    "runs".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub pretrain_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Per-task pool the stream draws from.
    pub stream_utterances: usize,
    pub params: TaskParams,
    pub tasks: Vec<TaskDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    /// Absent on the first (base) task, required on the rest.
    #[serde(default)]
    pub shift: Option<ShiftKind>,
    #[serde(default)]
    pub magnitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub batch_size: usize,
    pub batches_per_task: usize,
    pub seed: u64,
    /// Task visit order; defaults to the task declaration order.
    #[serde(default)]
    pub order: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Ft,
    Er,
    Aos,
    AosU,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Ft => "ft",
            MethodName::Er => "er",
            MethodName::Aos => "aos",
            MethodName::AosU => "aos-u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: MethodName,
    pub mode: Mode,
    /// Self-training setup; required in unsupervised mode, ignored in
    /// supervised mode.
    #[serde(default)]
    pub st: Option<StSection>,
    /// Distillation override; defaults on for supervised aos, off otherwise.
    #[serde(default)]
    pub kd: Option<bool>,
    /// Pseudo-label source override; defaults to final for aos, adapted for
    /// aos-u.
    #[serde(default)]
    pub pl_from: Option<PlSourceModel>,
    /// Pass-count override; defaults to 1 for aos, hyper.k_passes for aos-u.
    #[serde(default)]
    pub passes: Option<usize>,
    /// Ablation-only: turn the averaged passes into separate optimizer
    /// steps, breaking the one-step-per-batch protocol.
    #[serde(default)]
    pub sequential_passes: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StSection {
    pub route: PlRoute,
    #[serde(default)]
    pub lm: Option<LmSection>,
    #[serde(default)]
    pub filter: Option<PlFilter>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub order: usize,
    pub k: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub lr: f64,
    /// Replay memory capacity, in utterances.
    pub memory: usize,
    /// Utterances replayed per step; defaults to the stream batch size.
    pub replay: Option<usize>,
    pub tau: f64,
    pub tau2: f64,
    pub k_passes: usize,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    /// Evaluation decoding.
    pub beam: usize,
    pub max_len: usize,
    /// Pseudo-label decoding.
    pub pl_beam: usize,
    pub pl_max_len: usize,
}

impl Default for HyperSection {
    fn default() -> Self {
        HyperSection {
            lr: 0.01,
            memory: 60,
            replay: None,
            tau: 1.0,
            tau2: 1.0,
            k_passes: 2,
            kd_weight: 1.0,
            kd_temperature: 1.0,
            beam: 2,
            max_len: 10,
            pl_beam: 2,
            pl_max_len: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once greedy dev WER falls to this value or below.
    #[serde(default)]
    pub early_stop_wer: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.params.feature_dim != self.model.feature_dim {
            return bad(format!(
                "data.params.feature_dim {} != model.feature_dim {}",
                self.data.params.feature_dim, self.model.feature_dim
            ));
        }
        if FIRST_SYMBOL + self.data.params.n_symbols != self.model.vocab_size {
            return bad(format!(
                "model.vocab_size must be n_symbols + {FIRST_SYMBOL} = {}, got {}",
                FIRST_SYMBOL + self.data.params.n_symbols,
                self.model.vocab_size
            ));
        }

        if self.data.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for (i, t) in self.data.tasks.iter().enumerate() {
            if t.name.is_empty() {
                return bad(format!("task {i} has an empty name"));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name {}", t.name));
            }
            if i == 0 && t.shift.is_some() {
                return bad("the first task is the base task and takes no shift".into());
            }
            if i > 0 && t.shift.is_none() {
                return bad(format!("task {} needs a shift kind", t.name));
            }
            if !(0.0..=1.0).contains(&t.magnitude) {
                return bad(format!("task {} magnitude must be in [0, 1]", t.name));
            }
        }
        if let Some(order) = &self.stream.order {
            if order.is_empty() {
                return bad("stream.order must not be empty when given".into());
            }
            for name in order {
                if !names.contains(name.as_str()) {
                    return bad(format!("stream.order references unknown task {name}"));
                }
            }
        }

        if self.stream.batch_size == 0 {
            return bad("stream.batch_size must be positive".into());
        }
        let mut visits: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        match &self.stream.order {
            Some(order) => {
                for name in order {
                    *visits.entry(name.as_str()).or_default() += 1;
                }
            }
            None => {
                for t in &self.data.tasks {
                    visits.insert(t.name.as_str(), 1);
                }
            }
        }
        for (name, count) in visits {
            let need = count * self.stream.batches_per_task * self.stream.batch_size;
            if need > self.data.stream_utterances {
                return bad(format!(
                    "stream needs {need} utterances from {name} but its pool holds {}",
                    self.data.stream_utterances
                ));
            }
        }
        if self.data.pretrain_utterances == 0
            || self.data.dev_utterances == 0
            || self.data.test_utterances == 0
        {
            return bad("pretrain, dev, and test splits must be nonempty".into());
        }

        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return bad(format!("duplicate seed {s}"));
            }
        }

        match self.method.mode {
            Mode::Unsupervised => {
                let Some(st) = &self.method.st else {
                    return bad("unsupervised mode requires [method.st]".into());
                };
                if st.route == PlRoute::LmFusion && st.lm.is_none() {
                    return bad("lm-fusion route requires [method.st.lm]".into());
                }
                if let Some(lm) = &st.lm {
                    if lm.order == 0 || lm.k <= 0.0 || lm.lambda < 0.0 {
                        return bad("language model needs order >= 1, k > 0, lambda >= 0".into());
                    }
                }
                if let Some(f) = &st.filter {
                    if f.min_ratio < 0.0 || f.max_ratio < f.min_ratio {
                        return bad("pl filter needs 0 <= min_ratio <= max_ratio".into());
                    }
                }
            }
            Mode::Supervised => {
                if self.method.name == MethodName::AosU {
                    return bad("aos-u is the unsupervised variant; use aos for supervised".into());
                }
            }
        }
        if let Some(k) = self.method.passes {
            if k == 0 {
                return bad("method.passes must be at least 1".into());
            }
        }

        let h = &self.hyper;
        if h.lr <= 0.0 || self.pretrain.lr <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if h.tau < 0.0 || h.tau2 < 0.0 {
            return bad("tau and tau2 must be nonnegative".into());
        }
        if h.k_passes == 0 {
            return bad("hyper.k_passes must be at least 1".into());
        }
        if h.kd_weight < 0.0 || h.kd_temperature <= 0.0 {
            return bad("kd weight must be nonnegative and temperature positive".into());
        }
        if h.beam == 0 || h.pl_beam == 0 || h.max_len == 0 || h.pl_max_len == 0 {
            return bad("beams and length budgets must be positive".into());
        }
        if self.pretrain.batch_size == 0 {
            return bad("pretrain.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Short content hash identifying this exact configuration.
    pub fn run_id(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Output root: flag beats environment beats config.
    pub fn out_root(&self, flag: Option<&Path>) -> std::path::PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Ok(env) = std::env::var("OCLAB_OUT") {
            if !env.is_empty() {
                return env.into();
            }
        }
        self.out_dir.clone().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_toml() -> String {
        r#"
seeds = [1, 2]

[model]
feature_dim = 4
enc_hidden = 6
enc_blocks = 1
dec_hidden = 6
vocab_size = 8
dropout = 0.1
ctc_weight = 0.3

[data]
seed = 11
pretrain_utterances = 12
dev_utterances = 6
test_utterances = 6
stream_utterances = 12

[data.params]
n_symbols = 5
feature_dim = 4
noise_sigma = 0.15
frames_per_token = 3
frame_jitter = 1
min_tokens = 2
max_tokens = 4

[[data.tasks]]
name = "t0"
seed = 1

[[data.tasks]]
name = "t1"
shift = "channel"
magnitude = 0.5
seed = 2

[stream]
batch_size = 3
batches_per_task = 4
seed = 101

[method]
name = "ft"
mode = "supervised"

[pretrain]
epochs = 2
lr = 0.02
batch_size = 4
seed = 501
"#
        .to_string()
    }

    fn parse(s: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn sample_config_parses_and_validates() {
        let cfg = parse(&sample_toml()).unwrap();
        assert_eq!(cfg.method.name, MethodName::Ft);
        assert_eq!(cfg.hyper.lr, 0.01);
        assert_eq!(cfg.out_dir, "runs");
    }

    #[test]
    fn run_id_is_stable_and_content_sensitive() {
        let a = parse(&sample_toml()).unwrap();
        let b = parse(&sample_toml()).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 12);

        let mut c = parse(&sample_toml()).unwrap();
        c.hyper.lr = 0.02;
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn vocabulary_mismatch_is_a_config_error() {
        let toml = sample_toml().replace("vocab_size = 8", "vocab_size = 9");
        assert!(matches!(parse(&toml), Err(CliError::Config(_))));
    }

    #[test]
    fn unsupervised_mode_requires_self_training() {
        let toml = sample_toml().replace("mode = \"supervised\"", "mode = \"unsupervised\"");
        let err = parse(&toml).unwrap_err();
        assert!(err.to_string().contains("method.st"));
    }

    #[test]
    fn supervised_aos_u_is_rejected() {
        let toml = sample_toml().replace("name = \"ft\"", "name = \"aos-u\"");
        assert!(matches!(parse(&toml), Err(CliError::Config(_))));
    }

    #[test]
    fn shifted_tasks_need_a_shift_kind() {
        let toml = sample_toml().replace("shift = \"channel\"\nmagnitude = 0.5\n", "");
        assert!(matches!(parse(&toml), Err(CliError::Config(_))));
    }

    #[test]
    fn stream_pool_shortfall_is_rejected() {
        let toml = sample_toml().replace("batches_per_task = 4", "batches_per_task = 40");
        let err = parse(&toml).unwrap_err();
        assert!(err.to_string().contains("utterances"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let toml = sample_toml() + "\n[hyper]\nnot_a_knob = 1\n";
        assert!(matches!(parse(&toml), Err(CliError::Config(_))));
    }

    #[test]
    fn zero_batch_schedules_are_allowed() {
        let toml = sample_toml().replace("batches_per_task = 4", "batches_per_task = 0");
        assert!(parse(&toml).is_ok());
    }
}
