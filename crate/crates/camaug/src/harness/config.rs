//! Experiment configuration: one structured file that pins every knob of a
//! run — data source, model, held-out centre, masking policy, optimizer,
//! epoch budgets, and the root seed — plus a content fingerprint that names
//! the run's artifact directory.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::augmentation::MaskingMode;
use crate::classifier::BackboneKind;
use crate::data::synth::SynthConfig;
use crate::segmodels::{SegConfig, SegModelKind};
use crate::{Error, Result};

/// Patient-level split ratios (train, val, test_in). Fixed for every run so
/// that baseline and augmented experiments can never diverge here.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Procedurally generated multi-centre data, seeded by the experiment's
    /// root seed. Self-contained; nothing to download.
    Synthetic(SynthConfig),
    /// A directory tree of real images in the `centreN/images|masks` layout.
    Real { path: PathBuf },
}

/// The interpretability-masking knobs of a run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    /// Off reproduces the baseline pipeline; on draws a Bernoulli(p) per
    /// (sample, epoch) and multiplies by the keep-mask when it lands.
    pub enabled: bool,
    /// Masking probability.
    pub p: f64,
    /// Saliency binarization threshold; a pixel at or above it is blocked.
    pub threshold: f64,
    /// Where the multiplication happens; tied to the model family (see
    /// [`ExperimentConfig::validate`]).
    pub mode: MaskingMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { enabled: false, p: 0.5, threshold: 0.5, mode: MaskingMode::InputLevel }
    }
}

/// Optimizer hyperparameters, shared by the classifier and the
/// segmentation model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-5, batch: 4 }
    }
}

/// Epoch budgets for the two training stages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EpochsConfig {
    pub classifier: usize,
    pub segmentation: usize,
}

impl Default for EpochsConfig {
    fn default() -> Self {
        EpochsConfig { classifier: 10, segmentation: 300 }
    }
}

/// Size of the centre classifier. Its input size is not a free knob: the
/// harness sets it from the dataset when pretraining.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ClassifierOpts {
    pub kind: BackboneKind,
    pub width: usize,
}

impl Default for ClassifierOpts {
    fn default() -> Self {
        ClassifierOpts { kind: BackboneKind::Small, width: 16 }
    }
}

fn default_true() -> bool {
    true
}

/// Everything one experiment needs, resolvable to a stable fingerprint.
///
/// Serialized as a single TOML file; every CLI flag overrides one key.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: SegConfig,
    /// Centre whose samples form `test_out` and nothing else.
    pub held_out_centre: u32,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub epochs: EpochsConfig,
    #[serde(default)]
    pub classifier: ClassifierOpts,
    /// Train the centre classifier on the fly when its checkpoint is
    /// missing (a missing checkpoint is otherwise a configuration error).
    #[serde(default = "default_true")]
    pub auto_pretrain: bool,
    /// Root seed; all randomness derives from it via named sub-streams.
    #[serde(default)]
    pub seed: u64,
    /// Root for checkpoints, caches, and run records.
    pub output_dir: PathBuf,
}

/// The masking mode a model family requires: anatomy-level for the
/// disentangled model, input-level for the plain encoder-decoders.
pub fn mode_for(kind: SegModelKind) -> MaskingMode {
    match kind {
        SegModelKind::Sdnet => MaskingMode::AnatomyLevel,
        SegModelKind::Unet | SegModelKind::Deeplab => MaskingMode::InputLevel,
    }
}

impl ExperimentConfig {
    /// A configuration that runs the whole pipeline in seconds on a laptop:
    /// small synthetic data, a narrow model, a handful of epochs, and a
    /// learning rate matched to that budget. [`Self::apply_paper_scale`]
    /// restores the full-scale training hyperparameters.
    pub fn desk(output_dir: &Path) -> Self {
        ExperimentConfig {
            data: DataConfig::Synthetic(SynthConfig::for_centres(3, 24, 6, 32)),
            model: SegConfig::Unet(crate::segmodels::UnetConfig { depth: 3, width: 8 }),
            held_out_centre: 1,
            masking: MaskingConfig::default(),
            optimizer: OptimConfig { lr: 1e-3, batch: 4 },
            epochs: EpochsConfig { classifier: 4, segmentation: 6 },
            classifier: ClassifierOpts { kind: BackboneKind::Small, width: 8 },
            auto_pretrain: true,
            seed: 0,
            output_dir: output_dir.to_path_buf(),
        }
    }

    /// Switches the training hyperparameters to the full-scale protocol:
    /// learning rate 1e-5, batch 4, 10 classifier epochs, 300 segmentation
    /// epochs. Data and model sizes are left as configured.
    pub fn apply_paper_scale(&mut self) {
        self.optimizer = OptimConfig::default();
        self.epochs = EpochsConfig::default();
    }

    /// Checks every cross-field invariant. Fails with [`Error::Config`] so
    /// a bad file is reported before any work starts.
    pub fn validate(&self) -> Result<()> {
        let kind = self.model.kind();
        let required = mode_for(kind);
        if self.masking.mode != required {
            return Err(Error::Config(format!(
                "model {kind} requires {required} masking, config says {}",
                self.masking.mode
            )));
        }
        if !(0.0..=1.0).contains(&self.masking.p) {
            return Err(Error::Config(format!(
                "masking probability must be in [0,1], got {}",
                self.masking.p
            )));
        }
        if !(self.masking.threshold > 0.0 && self.masking.threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarization threshold must lie strictly in (0,1), got {}",
                self.masking.threshold
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.optimizer.lr)));
        }
        if self.optimizer.batch < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs.segmentation < 1 {
            return Err(Error::Config("segmentation epochs must be >= 1".into()));
        }
        if self.classifier.width < 1 {
            return Err(Error::Config("classifier width must be >= 1".into()));
        }
        if self.held_out_centre < 1 {
            return Err(Error::Config("centre ids start at 1, held_out_centre 0 is invalid".into()));
        }
        if let DataConfig::Synthetic(sc) = &self.data {
            if self.held_out_centre > sc.centres {
                return Err(Error::Config(format!(
                    "held_out_centre {} exceeds the {} synthetic centres",
                    self.held_out_centre, sc.centres
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash of the resolved configuration plus the crate
    /// version: any change to either names a different run directory.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        format!("{:x}", h.finalize())
    }

    /// The per-run artifact directory, named by the fingerprint prefix.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(&self.fingerprint()[..12])
    }

    /// Directory of the centre-classifier checkpoint for this split.
    pub fn classifier_dir(&self) -> PathBuf {
        self.output_dir.join(format!("classifier-centre{}", self.held_out_centre))
    }

    /// Path of the saliency cache for this split.
    pub fn cam_cache_path(&self) -> PathBuf {
        self.output_dir.join(format!("cams-centre{}.bin", self.held_out_centre))
    }

    /// Parses a TOML config file. Validation is separate so that CLI flag
    /// overrides can be applied in between.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Writes the resolved configuration as TOML.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodels::SdnetConfig;

    fn synth_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Synthetic(SynthConfig::for_centres(3, 12, 4, 32)),
            model: SegConfig::default(),
            held_out_centre: 2,
            masking: MaskingConfig { enabled: true, ..MaskingConfig::default() },
            optimizer: OptimConfig::default(),
            epochs: EpochsConfig::default(),
            classifier: ClassifierOpts::default(),
            auto_pretrain: true,
            seed: 7,
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn round_trips_through_a_toml_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth_cfg(dir.path());
        let path = dir.path().join("exp.toml");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg, "TOML round trip must preserve every field");
    }

    #[test]
    fn parses_a_hand_written_file_and_fills_defaults() {
        let text = r#"
held_out_centre = 1
output_dir = "out"

[data]
source = "synthetic"
centres = 3
samples_per_centre = 12
patients_per_centre = 4
size = 32
styles = ["corner_text", "instrument_widget", "border"]

[model]
kind = "unet"
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.held_out_centre, 1);
        assert!(!cfg.masking.enabled, "masking defaults to off (baseline)");
        assert_eq!(cfg.masking.p, 0.5);
        assert_eq!(cfg.masking.threshold, 0.5);
        assert_eq!(cfg.optimizer.lr, 1e-5, "default learning rate");
        assert_eq!(cfg.optimizer.batch, 4, "default batch size");
        assert_eq!(cfg.epochs.classifier, 10, "default classifier epochs");
        assert_eq!(cfg.epochs.segmentation, 300, "default segmentation epochs");
        assert_eq!(cfg.seed, 0);
        assert!(cfg.auto_pretrain, "auto-pretrain defaults on");
        match &cfg.data {
            DataConfig::Synthetic(sc) => assert_eq!(sc.centres, 3),
            other => panic!("expected synthetic data, got {other:?}"),
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn real_data_source_round_trips_with_its_tag() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synth_cfg(dir.path());
        cfg.data = DataConfig::Real { path: PathBuf::from("/data/polyps") };
        let text = toml::to_string_pretty(&cfg).unwrap();
        assert!(text.contains("source = \"real\""), "tagged source key, got:\n{text}");
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data, cfg.data);
    }

    #[test]
    fn masking_mode_must_match_the_model_family() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synth_cfg(dir.path());
        cfg.model = SegConfig::Sdnet(SdnetConfig::default());
        let err = cfg.validate().unwrap_err();
        assert!(
            err.to_string().contains("anatomy_level"),
            "sdnet with input-level masking must name the required mode, got: {err}"
        );
        cfg.masking.mode = MaskingMode::AnatomyLevel;
        cfg.validate().unwrap();

        cfg.model = SegConfig::default();
        let err = cfg.validate().unwrap_err();
        assert!(
            matches!(err, Error::Config(_)),
            "unet with anatomy-level masking is a config error"
        );
    }

    #[test]
    fn mode_is_checked_even_for_baselines() {
        // The mode/model pairing is a type invariant, not a behaviour of the
        // masking step, so a disabled policy must still be coherent.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synth_cfg(dir.path());
        cfg.masking.enabled = false;
        cfg.masking.mode = MaskingMode::AnatomyLevel;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_out_of_range_probability_threshold_and_centre() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = synth_cfg(dir.path());
        cfg.masking.p = 1.5;
        assert!(cfg.validate().is_err(), "p > 1 must be rejected");

        let mut cfg = synth_cfg(dir.path());
        cfg.masking.threshold = 1.0;
        assert!(cfg.validate().is_err(), "threshold 1.0 blocks nothing and is rejected");

        let mut cfg = synth_cfg(dir.path());
        cfg.held_out_centre = 9;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("exceeds"), "got: {err}");
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth_cfg(dir.path());
        let fp = cfg.fingerprint();
        assert_eq!(fp.len(), 64);
        assert_eq!(fp, cfg.clone().fingerprint(), "same config, same fingerprint");

        let mut seed_changed = cfg.clone();
        seed_changed.seed += 1;
        assert_ne!(fp, seed_changed.fingerprint(), "seed is part of the identity");

        let mut p_changed = cfg.clone();
        p_changed.masking.p = 0.4;
        assert_ne!(fp, p_changed.fingerprint(), "masking p is part of the identity");
    }

    #[test]
    fn desk_config_is_valid_and_paper_scale_restores_protocol_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::desk(dir.path());
        cfg.validate().unwrap();
        assert!(cfg.epochs.segmentation <= 20, "desk scale stays in the seconds range");
        cfg.apply_paper_scale();
        assert_eq!(cfg.optimizer.lr, 1e-5);
        assert_eq!(cfg.optimizer.batch, 4);
        assert_eq!(cfg.epochs.classifier, 10);
        assert_eq!(cfg.epochs.segmentation, 300);
    }

    #[test]
    fn required_masking_mode_follows_the_model_kind() {
        assert_eq!(mode_for(SegModelKind::Unet), MaskingMode::InputLevel);
        assert_eq!(mode_for(SegModelKind::Deeplab), MaskingMode::InputLevel);
        assert_eq!(mode_for(SegModelKind::Sdnet), MaskingMode::AnatomyLevel);
    }
}
