//! Experiment configuration: a flat TOML file of dotted `section.key`
//! entries.
//!
//! Every key has a default, unknown keys are rejected, and all problems are
//! reported together. [`ExperimentConfig::to_toml`] writes the fully resolved
//! configuration back out; loading that snapshot yields an equal config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::AttackConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::nn::Arch;
use crate::trainer::TrainConfig;
use crate::transforms::InputTransform;

/// Subcommands, each with its own required keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TrainStandard,
    TrainAt,
    FinetuneTeacher,
    TrainIgam,
    Evaluate,
    ExportGradients,
    Landscape,
    Report,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::TrainStandard => "train-standard",
            Mode::TrainAt => "train-at",
            Mode::FinetuneTeacher => "finetune-teacher",
            Mode::TrainIgam => "train-igam",
            Mode::Evaluate => "evaluate",
            Mode::ExportGradients => "export-gradients",
            Mode::Landscape => "landscape",
            Mode::Report => "report",
        }
    }

    /// Row name used in evaluation reports when `eval.name` is unset.
    pub fn default_row(&self) -> &'static str {
        match self {
            Mode::TrainStandard => "standard",
            Mode::TrainAt => "adversarial",
            Mode::FinetuneTeacher => "finetuned",
            Mode::TrainIgam => "igam",
            _ => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image shape `[h, w, c]`; IDX files must match it.
    pub shape: [usize; 3],
    /// Sample counts; for IDX files these cap the loaded sets (0 keeps all).
    pub n_train: usize,
    pub n_test: usize,
    /// Keep only these classes, relabelled `0..len` (empty keeps all).
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model_arch: String,
    pub model_checkpoint: Option<PathBuf>,
    pub teacher_arch: String,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Teacher input `[h, w, c]`; defaults to the data shape.
    pub teacher_shape: [usize; 3],
    pub teacher_classes: usize,
    pub disc_arch: String,
    pub transform: String,
    pub train: TrainConfig<f64>,
    pub attack: AttackConfig<f64>,
    pub eval: EvalConfig<f64>,
    pub eval_name: Option<String>,
    pub eval_alignment: bool,
    pub export_count: usize,
    pub landscape_index: usize,
    pub landscape_extent: f64,
    pub landscape_resolution: usize,
    pub report_inputs: Vec<PathBuf>,
}

/// Flattened `section.key -> value` view of a TOML document.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Consumes keys from the flat map, recording every type error.
struct Reader {
    map: BTreeMap<String, toml::Value>,
    base: PathBuf,
    errs: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn bad(&mut self, key: &str, want: &str, v: &toml::Value) {
        self.errs.push(format!("{key} must be {want}, got {v}"));
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        match self.take(key) {
            None => default,
            Some(toml::Value::Float(f)) => f,
            Some(toml::Value::Integer(i)) => i as f64,
            Some(v) => {
                self.bad(key, "a number", &v);
                default
            }
        }
    }

    /// `None` when the key is absent.
    fn opt_f64(&mut self, key: &str) -> Option<f64> {
        self.map.contains_key(key).then(|| self.f64(key, f64::NAN))
    }

    fn usize(&mut self, key: &str, default: usize) -> usize {
        match self.take(key) {
            None => default,
            Some(toml::Value::Integer(i)) if i >= 0 => i as usize,
            Some(v) => {
                self.bad(key, "a non-negative integer", &v);
                default
            }
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> bool {
        match self.take(key) {
            None => default,
            Some(toml::Value::Boolean(b)) => b,
            Some(v) => {
                self.bad(key, "true or false", &v);
                default
            }
        }
    }

    fn opt_string(&mut self, key: &str) -> Option<String> {
        match self.take(key) {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(v) => {
                self.bad(key, "a string", &v);
                None
            }
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.opt_string(key).unwrap_or_else(|| default.to_string())
    }

    /// Relative paths are taken relative to the config file.
    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.opt_string(key).map(|s| self.base.join(s))
    }

    fn usize_list(&mut self, key: &str, default: &[usize]) -> Vec<usize> {
        match self.take(key) {
            None => default.to_vec(),
            Some(toml::Value::Array(items)) => {
                let parsed: Option<Vec<usize>> = items
                    .iter()
                    .map(|v| v.as_integer().filter(|&i| i >= 0).map(|i| i as usize))
                    .collect();
                parsed.unwrap_or_else(|| {
                    self.errs.push(format!("{key} must be a list of non-negative integers"));
                    default.to_vec()
                })
            }
            Some(v) => {
                self.bad(key, "a list", &v);
                default.to_vec()
            }
        }
    }

    fn path_list(&mut self, key: &str) -> Vec<PathBuf> {
        match self.take(key) {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => {
                let parsed: Option<Vec<PathBuf>> =
                    items.iter().map(|v| v.as_str().map(|s| self.base.join(s))).collect();
                parsed.unwrap_or_else(|| {
                    self.errs.push(format!("{key} must be a list of paths"));
                    Vec::new()
                })
            }
            Some(v) => {
                self.bad(key, "a list of paths", &v);
                Vec::new()
            }
        }
    }

    fn shape(&mut self, prefix: &str, default: [usize; 3]) -> [usize; 3] {
        [
            self.usize(&format!("{prefix}.height"), default[0]),
            self.usize(&format!("{prefix}.width"), default[1]),
            self.usize(&format!("{prefix}.channels"), default[2]),
        ]
    }
}

/// Messages of a validation error, or the error itself as one message.
fn messages(r: Result<()>) -> Vec<String> {
    match r {
        Ok(()) => Vec::new(),
        Err(Error::Config(m)) => m,
        Err(e) => vec![e.to_string()],
    }
}

impl ExperimentConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        let mut r = Reader {
            map,
            base: base.to_path_buf(),
            errs: Vec::new(),
        };

        let seed = match r.take("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if i >= 0 => i as u64,
            Some(v) => {
                r.bad("seed", "a non-negative integer", &v);
                0
            }
        };

        let source = r.string("data.source", "synthetic");
        let shape = r.shape("data", [14, 14, 1]);
        let mut spec = SynthSpec::new(&r.string("data.generator", "raster-moons"), 0, shape);
        spec.extent = r.f64("data.extent", 1.0);
        spec.texture = r.f64("data.texture", 0.05);
        spec.noise = r.f64("data.noise", 0.05);
        spec.blob_sigma = r.f64("data.blob_sigma", 0.15);
        spec.jitter = r.f64("data.jitter", 0.25);
        let idx_paths = [
            r.path("data.train_images"),
            r.path("data.train_labels"),
            r.path("data.test_images"),
            r.path("data.test_labels"),
        ];
        let data_source = match source.as_str() {
            "synthetic" => DataSource::Synthetic(spec),
            "idx" => match idx_paths {
                [Some(a), Some(b), Some(c), Some(d)] => DataSource::Idx {
                    train_images: a,
                    train_labels: b,
                    test_images: c,
                    test_labels: d,
                },
                _ => {
                    r.errs.push(
                        "data.source = \"idx\" needs data.train_images, data.train_labels, \
                         data.test_images and data.test_labels"
                            .into(),
                    );
                    DataSource::Synthetic(spec)
                }
            },
            other => {
                r.errs.push(format!("data.source must be \"synthetic\" or \"idx\", got \"{other}\""));
                DataSource::Synthetic(spec)
            }
        };
        let data = DataConfig {
            source: data_source,
            shape,
            n_train: r.usize("data.n_train", 800),
            n_test: r.usize("data.n_test", 300),
            classes: r.usize_list("data.classes", &[]),
        };

        let model_arch = r.string("model.arch", "small-cnn");
        let model_checkpoint = r.path("model.checkpoint");
        let teacher_arch = r.string("teacher.arch", "small-cnn");
        let teacher_checkpoint = r.path("teacher.checkpoint");
        let teacher_shape = r.shape("teacher", shape);
        let default_classes = data.default_classes();
        let teacher_classes = r.usize("teacher.num_classes", default_classes);
        let disc_arch = r.string("disc.arch", "disc-cnn-3");
        let transform = r.string("transform.kind", "identity");

        let d = TrainConfig::<f64>::default();
        let train = TrainConfig {
            lr_teacher: r.f64("train.lr_teacher", 0.02),
            lr_student: r.f64("train.lr_student", 0.02),
            lr_disc: r.f64("train.lr_disc", d.lr_disc),
            momentum: r.f64("train.momentum", d.momentum),
            epochs: r.usize("train.epochs", 16),
            batch_size: r.usize("train.batch_size", d.batch_size),
            lambda_adv: r.f64("igam.lambda_adv", 0.5),
            lambda_diff: r.f64("igam.lambda_diff", 20.0),
            disc_update_period: r.usize("igam.disc_update_period", d.disc_update_period),
            finetune_epochs: r.usize("igam.finetune_epochs", 2),
            igam_epochs: r.usize("igam.epochs", 24),
            non_saturating: r.bool("igam.non_saturating", d.non_saturating),
            standardize_j: r.bool("igam.standardize_j", d.standardize_j),
            divergence_limit: r.f64("igam.divergence_limit", d.divergence_limit),
            // 0 switches clipping off
            grad_clip: Some(r.f64("igam.grad_clip", 1.0)).filter(|&c| c != 0.0),
            epsilon_warmup: r.usize("attack.warmup_epochs", 4),
            seed,
        };

        let epsilon = r.f64("attack.epsilon", 0.1);
        let attack = AttackConfig {
            epsilon,
            steps: r.usize("attack.steps", 7),
            eta: r.f64("attack.eta", epsilon / 4.0),
            random_start: r.bool("attack.random_start", true),
        };

        let mut eval = EvalConfig::new(r.f64("eval.epsilon", epsilon));
        eval.pgd_steps = r.usize_list("eval.pgd_steps", &[5, 10, 20]);
        eval.eta = r.opt_f64("eval.eta");
        eval.random_start = r.bool("eval.random_start", false);
        eval.batch_size = r.usize("eval.batch_size", 100);
        eval.seed = seed;
        let eval_name = r.opt_string("eval.name");
        let eval_alignment = r.bool("eval.alignment", true);

        let export_count = r.usize("export.count", 8);
        let landscape_index = r.usize("landscape.index", 0);
        let landscape_extent = r.f64("landscape.extent", 2.0 * eval.epsilon);
        let landscape_resolution = r.usize("landscape.resolution", 21);
        let report_inputs = r.path_list("report.inputs");

        let mut errs = std::mem::take(&mut r.errs);
        errs.extend(r.map.keys().map(|k| format!("unknown key `{k}`")));
        let cfg = ExperimentConfig {
            seed,
            data,
            model_arch,
            model_checkpoint,
            teacher_arch,
            teacher_checkpoint,
            teacher_shape,
            teacher_classes,
            disc_arch,
            transform,
            train,
            attack,
            eval,
            eval_name,
            eval_alignment,
            export_count,
            landscape_index,
            landscape_extent,
            landscape_resolution,
            report_inputs,
        };
        errs.extend(cfg.problems());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Self::parse(&text, &std::fs::canonicalize(&base).unwrap_or(base))
    }

    /// Overrides the root seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// Student input shape.
    pub fn data_shape(&self) -> [usize; 3] {
        self.data.shape
    }

    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let DataSource::Synthetic(s) = &self.data.source {
            if let Err(e) = s.num_classes() {
                errs.push(format!("data.generator: {e}"));
            }
            if !(s.extent > 0.0 && s.extent <= 1.0) {
                errs.push(format!("data.extent must be in (0, 1], got {}", s.extent));
            }
            for (k, v) in [("texture", s.texture), ("noise", s.noise), ("blob_sigma", s.blob_sigma), ("jitter", s.jitter)] {
                if !(v >= 0.0 && v.is_finite()) {
                    errs.push(format!("data.{k} must be >= 0, got {v}"));
                }
            }
            if self.data.n_train == 0 || self.data.n_test == 0 {
                errs.push("data.n_train and data.n_test must be >= 1 for synthetic data".into());
            }
        }
        if self.data.shape.contains(&0) {
            errs.push(format!("data.height/width/channels must be >= 1, got {:?}", self.data.shape));
        }
        if self.data.classes.len() == 1 {
            errs.push("data.classes must keep at least two classes".into());
        }
        for (key, arch) in [
            ("model.arch", &self.model_arch),
            ("teacher.arch", &self.teacher_arch),
            ("disc.arch", &self.disc_arch),
        ] {
            match Arch::parse(arch) {
                Err(e) => errs.push(format!("{key}: {e}")),
                Ok(a) if a.is_discriminator() != (key == "disc.arch") => {
                    errs.push(format!("{key}: `{arch}` is not usable here"));
                }
                Ok(_) => {}
            }
        }
        if self.teacher_shape.contains(&0) || self.teacher_classes < 2 {
            errs.push(format!(
                "teacher input {:?} with {} classes is invalid",
                self.teacher_shape, self.teacher_classes
            ));
        } else if let Err(e) = InputTransform::<f64>::build(&self.transform, self.data_shape(), self.teacher_shape) {
            errs.push(format!("transform.kind: {e}"));
        }
        errs.extend(messages(self.train.validate()));
        if self.train.epochs == 0 {
            errs.push("train.epochs must be >= 1".into());
        }
        errs.extend(messages(self.attack.validate()).into_iter().map(|m| format!("attack.{m}")));
        if !(self.eval.epsilon >= 0.0 && self.eval.epsilon.is_finite()) {
            errs.push(format!("eval.epsilon must be >= 0, got {}", self.eval.epsilon));
        }
        if self.eval.pgd_steps.is_empty() || self.eval.pgd_steps.contains(&0) {
            errs.push("eval.pgd_steps must list step counts >= 1".into());
        }
        if let Some(eta) = self.eval.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                errs.push(format!("eval.eta must be > 0, got {eta}"));
            }
        }
        if self.eval.batch_size == 0 {
            errs.push("eval.batch_size must be >= 1".into());
        }
        if !(self.landscape_extent > 0.0 && self.landscape_extent.is_finite()) {
            errs.push(format!("landscape.extent must be > 0, got {}", self.landscape_extent));
        }
        if self.landscape_resolution < 2 {
            errs.push("landscape.resolution must be >= 2".into());
        }
        errs
    }

    /// Mode-specific requirements, all reported together.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        let mut errs = Vec::new();
        let need = |ok: bool, key: &str, errs: &mut Vec<String>| {
            if !ok {
                errs.push(format!("{} requires {key}", mode.name()));
            }
        };
        match mode {
            Mode::FinetuneTeacher | Mode::TrainIgam => {
                need(self.teacher_checkpoint.is_some(), "teacher.checkpoint", &mut errs);
                if mode == Mode::FinetuneTeacher && self.train.finetune_epochs == 0 {
                    errs.push("finetune-teacher requires igam.finetune_epochs >= 1".into());
                }
                if mode == Mode::TrainIgam && self.train.igam_epochs == 0 {
                    errs.push("train-igam requires igam.epochs >= 1".into());
                }
            }
            Mode::Evaluate | Mode::ExportGradients | Mode::Landscape => {
                need(self.model_checkpoint.is_some(), "model.checkpoint", &mut errs);
            }
            Mode::Report => need(!self.report_inputs.is_empty(), "report.inputs", &mut errs),
            Mode::TrainStandard | Mode::TrainAt => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The fully resolved configuration as flat dotted keys, one per line,
    /// sorted. Unset optional keys are omitted.
    pub fn to_toml(&self) -> String {
        use toml::Value as V;
        let mut kv: BTreeMap<&str, V> = BTreeMap::new();
        let path = |p: &Path| V::String(p.to_string_lossy().into_owned());
        let int = |n: usize| V::Integer(n as i64);
        let list = |xs: &[usize]| V::Array(xs.iter().map(|&x| V::Integer(x as i64)).collect());
        kv.insert("seed", V::Integer(self.seed as i64));
        match &self.data.source {
            DataSource::Synthetic(s) => {
                kv.insert("data.source", V::String("synthetic".into()));
                kv.insert("data.generator", V::String(s.generator.clone()));
                kv.insert("data.extent", V::Float(s.extent));
                kv.insert("data.texture", V::Float(s.texture));
                kv.insert("data.noise", V::Float(s.noise));
                kv.insert("data.blob_sigma", V::Float(s.blob_sigma));
                kv.insert("data.jitter", V::Float(s.jitter));
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv.insert("data.source", V::String("idx".into()));
                kv.insert("data.train_images", path(train_images));
                kv.insert("data.train_labels", path(train_labels));
                kv.insert("data.test_images", path(test_images));
                kv.insert("data.test_labels", path(test_labels));
            }
        }
        kv.insert("data.height", int(self.data.shape[0]));
        kv.insert("data.width", int(self.data.shape[1]));
        kv.insert("data.channels", int(self.data.shape[2]));
        kv.insert("data.n_train", int(self.data.n_train));
        kv.insert("data.n_test", int(self.data.n_test));
        kv.insert("data.classes", list(&self.data.classes));
        kv.insert("model.arch", V::String(self.model_arch.clone()));
        if let Some(p) = &self.model_checkpoint {
            kv.insert("model.checkpoint", path(p));
        }
        kv.insert("teacher.arch", V::String(self.teacher_arch.clone()));
        if let Some(p) = &self.teacher_checkpoint {
            kv.insert("teacher.checkpoint", path(p));
        }
        kv.insert("teacher.height", int(self.teacher_shape[0]));
        kv.insert("teacher.width", int(self.teacher_shape[1]));
        kv.insert("teacher.channels", int(self.teacher_shape[2]));
        kv.insert("teacher.num_classes", int(self.teacher_classes));
        kv.insert("disc.arch", V::String(self.disc_arch.clone()));
        kv.insert("transform.kind", V::String(self.transform.clone()));
        let t = &self.train;
        kv.insert("train.lr_teacher", V::Float(t.lr_teacher));
        kv.insert("train.lr_student", V::Float(t.lr_student));
        kv.insert("train.lr_disc", V::Float(t.lr_disc));
        kv.insert("train.momentum", V::Float(t.momentum));
        kv.insert("train.epochs", int(t.epochs));
        kv.insert("train.batch_size", int(t.batch_size));
        kv.insert("igam.lambda_adv", V::Float(t.lambda_adv));
        kv.insert("igam.lambda_diff", V::Float(t.lambda_diff));
        kv.insert("igam.disc_update_period", int(t.disc_update_period));
        kv.insert("igam.finetune_epochs", int(t.finetune_epochs));
        kv.insert("igam.epochs", int(t.igam_epochs));
        kv.insert("igam.non_saturating", V::Boolean(t.non_saturating));
        kv.insert("igam.standardize_j", V::Boolean(t.standardize_j));
        kv.insert("igam.divergence_limit", V::Float(t.divergence_limit));
        kv.insert("igam.grad_clip", V::Float(t.grad_clip.unwrap_or(0.0)));
        kv.insert("attack.epsilon", V::Float(self.attack.epsilon));
        kv.insert("attack.steps", int(self.attack.steps));
        kv.insert("attack.eta", V::Float(self.attack.eta));
        kv.insert("attack.random_start", V::Boolean(self.attack.random_start));
        kv.insert("attack.warmup_epochs", int(t.epsilon_warmup));
        kv.insert("eval.epsilon", V::Float(self.eval.epsilon));
        kv.insert("eval.pgd_steps", list(&self.eval.pgd_steps));
        if let Some(eta) = self.eval.eta {
            kv.insert("eval.eta", V::Float(eta));
        }
        kv.insert("eval.random_start", V::Boolean(self.eval.random_start));
        kv.insert("eval.batch_size", int(self.eval.batch_size));
        if let Some(n) = &self.eval_name {
            kv.insert("eval.name", V::String(n.clone()));
        }
        kv.insert("eval.alignment", V::Boolean(self.eval_alignment));
        kv.insert("export.count", int(self.export_count));
        kv.insert("landscape.index", int(self.landscape_index));
        kv.insert("landscape.extent", V::Float(self.landscape_extent));
        kv.insert("landscape.resolution", int(self.landscape_resolution));
        if !self.report_inputs.is_empty() {
            kv.insert(
                "report.inputs",
                V::Array(self.report_inputs.iter().map(|p| path(p)).collect()),
            );
        }
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl DataConfig {
    fn default_classes(&self) -> usize {
        if !self.classes.is_empty() {
            return self.classes.len();
        }
        match &self.source {
            DataSource::Synthetic(s) => s.num_classes().unwrap_or(2),
            DataSource::Idx { .. } => 10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.train.lambda_adv, 0.5);
        assert_eq!(cfg.eval.pgd_steps, vec![5, 10, 20]);
        assert_eq!(cfg.teacher_shape, [14, 14, 1]);
        assert_eq!(cfg.teacher_classes, 2);
    }

    #[test]
    fn dotted_keys_and_sections_agree() {
        let a = parse("igam.lambda_adv = 2\ntrain.epochs = 3").unwrap();
        let b = parse("[igam]\nlambda_adv = 2.0\n[train]\nepochs = 3").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.lambda_adv, 2.0);
    }

    #[test]
    fn every_problem_is_reported() {
        let err = parse("igam.lambda_adv = -1\ntrain.lr_student = 0\nbogus.key = 1\nmodel.arch = 3").unwrap_err();
        let Error::Config(msgs) = err else { panic!("{err:?}") };
        let joined = msgs.join("\n");
        for needle in ["lambda_adv", "lr_student", "unknown key `bogus.key`", "model.arch must be a string"] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let cfg = parse("teacher.checkpoint = \"t.ckpt\"").unwrap();
        assert_eq!(cfg.teacher_checkpoint, Some(PathBuf::from("/base/t.ckpt")));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = parse(
            "seed = 9\ndata.classes = [0, 1]\nigam.grad_clip = 1\neval.eta = 0.03\n\
             teacher.checkpoint = \"t.ckpt\"\ntransform.kind = \"identity\"\nreport.inputs = [\"a.csv\"]",
        )
        .unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), cfg.to_toml());
    }

    #[test]
    fn mode_requirements() {
        let cfg = parse("").unwrap();
        assert!(cfg.check_mode(Mode::TrainStandard).is_ok());
        let Err(Error::Config(m)) = cfg.check_mode(Mode::TrainIgam) else { panic!() };
        assert_eq!(m, vec!["train-igam requires teacher.checkpoint".to_string()]);
        assert!(cfg.check_mode(Mode::Evaluate).is_err());
        assert!(cfg.check_mode(Mode::Report).is_err());
    }

    #[test]
    fn bad_transform_geometry_is_a_config_error() {
        let err = parse("transform.kind = \"avgpool_resize\"\nteacher.height = 5\nteacher.width = 5").unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.iter().any(|s| s.starts_with("transform.kind"))));
    }
}
