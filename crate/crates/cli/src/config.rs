//! Run configuration files.

use std::path::{Path, PathBuf};

use augmarglik::curvature::CurvatureKind;
use augmarglik::data::{apply_transform, gen_image_fixture, gen_toy_with, load_idx, subset, to_polar, Dataset, ToyLayout, TransformKind, TransformSpec};
use augmarglik::model::{Activation, MlpModel};
use augmarglik::train::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Toy,
    Mnist,
    /// Synthetic images for gradient checks.
    ImageFixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: DatasetName,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
    #[serde(default)]
    pub subset_n: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Option<IdxPaths>,
    /// Training points of the generated datasets.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default)]
    pub toy_layout: ToyLayout,
    /// Polar features for the toy problem.
    #[serde(default)]
    pub polar: bool,
    /// Side length of the image fixture.
    #[serde(default)]
    pub side: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_transform() -> TransformKind {
    TransformKind::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodType {
    Baseline,
    DataAug,
    Augerino,
    Marglik,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    #[serde(rename = "type")]
    pub kind: MethodType,
    pub curvature: CurvatureKind,
    #[serde(default)]
    pub fixed_eta: Option<Vec<f64>>,
    /// Fixed augmentation through the averaged predictor.
    #[serde(default)]
    pub averaged: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub samples_train: usize,
    pub samples_test: usize,
    pub lr_theta: f64,
    pub lr_theta_floor: f64,
    pub lr_hyper: f64,
    pub lr_hyper_floor: f64,
    pub lr_prior: f64,
    pub prior_precision: f64,
    pub burnin_epochs: usize,
    pub hyper_every: usize,
    #[serde(default)]
    pub hyper_subsample: Option<usize>,
    pub antithetic: bool,
    #[serde(default)]
    pub eta_init: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub include_dlambda: bool,
    #[serde(default)]
    pub final_full_marglik: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub method: MethodSection,
    pub train: TrainSection,
    pub output_dir: PathBuf,
}

/// Train and test split of a configured dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    /// Parses and validates a configuration file. Relative IDX paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(p), Some(dir)) = (cfg.dataset.paths.as_mut(), path.parent()) {
            for f in [&mut p.train_images, &mut p.train_labels, &mut p.test_images, &mut p.test_labels] {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the run seed; the dataset seed follows it.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.dataset.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        match self.dataset.name {
            DatasetName::Mnist if self.dataset.paths.is_none() => return bad("dataset.paths: required for mnist"),
            DatasetName::Toy | DatasetName::ImageFixture if self.dataset.paths.is_some() => {
                return bad("dataset.paths: only mnist reads files")
            }
            _ => {}
        }
        if self.dataset.polar && self.dataset.name != DatasetName::Toy {
            return bad("dataset.polar: only the toy problem has polar features");
        }
        if self.dataset.transform != TransformKind::None && self.dataset.name == DatasetName::Toy {
            return bad("dataset.transform: transforms apply to images only");
        }
        if self.model.hidden_sizes.contains(&0) {
            return bad("model.hidden_sizes: layer widths must be positive");
        }
        match (self.method.kind, &self.method.fixed_eta) {
            (MethodType::DataAug, None) => return bad("method.fixed_eta: required for data_aug"),
            (MethodType::DataAug, Some(_)) => {}
            (_, Some(_)) => return bad("method.fixed_eta: only data_aug uses a fixed eta"),
            _ => {}
        }
        if self.method.averaged && self.method.kind != MethodType::DataAug {
            return bad("method.averaged: only data_aug has this option");
        }
        if self.dataset.polar && self.method.kind != MethodType::Baseline {
            return bad("method.type: polar features support the baseline only");
        }
        let k = match self.dataset.name {
            DatasetName::Toy => 1,
            _ => 6,
        };
        for (field, eta) in [("method.fixed_eta", &self.method.fixed_eta), ("train.eta_init", &self.train.eta_init)] {
            if let Some(e) = eta {
                if e.len() != k {
                    return Err(CliError::Config(format!("{field}: expected {k} components, got {}", e.len())));
                }
            }
        }
        self.train_config().validate().map_err(|e| CliError::Config(format!("train: {e}")))
    }

    pub fn method(&self) -> Method {
        match self.method.kind {
            MethodType::Baseline => Method::Baseline,
            MethodType::DataAug => Method::DataAug {
                eta: self.method.fixed_eta.clone().unwrap_or_default(),
                averaged: self.method.averaged,
            },
            MethodType::Augerino => Method::Augerino,
            MethodType::Marglik => Method::Marglik,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            samples_train: t.samples_train,
            samples_test: t.samples_test,
            lr_theta: t.lr_theta,
            lr_theta_floor: t.lr_theta_floor,
            lr_hyper: t.lr_hyper,
            lr_hyper_floor: t.lr_hyper_floor,
            lr_prior: t.lr_prior,
            prior_precision: t.prior_precision,
            burnin_epochs: t.burnin_epochs,
            hyper_every: t.hyper_every,
            hyper_subsample: t.hyper_subsample,
            curvature: self.method.curvature,
            method: self.method(),
            antithetic: t.antithetic,
            eta_init: t.eta_init.clone(),
            include_dlambda: t.include_dlambda,
            final_full_marglik: t.final_full_marglik,
            seed: t.seed,
        }
    }

    /// Builds the train and test data.
    pub fn datasets(&self) -> Result<Splits, CliError> {
        let d = &self.dataset;
        let seed = d.seed;
        let (mut train, mut test) = match d.name {
            DatasetName::Toy => (
                gen_toy_with(seed, d.n_train.unwrap_or(200), d.toy_layout)?,
                gen_toy_with(seed.wrapping_add(1 << 32), d.n_test.unwrap_or(1000), d.toy_layout)?,
            ),
            DatasetName::ImageFixture => {
                let (side, classes) = (d.side.unwrap_or(8), d.classes.unwrap_or(3));
                (
                    gen_image_fixture(seed, d.n_train.unwrap_or(30), side, classes)?,
                    gen_image_fixture(seed.wrapping_add(1 << 32), d.n_test.unwrap_or(30), side, classes)?,
                )
            }
            DatasetName::Mnist => {
                let p = d.paths.as_ref().expect("validated");
                for (field, f) in [
                    ("train_images", &p.train_images),
                    ("train_labels", &p.train_labels),
                    ("test_images", &p.test_images),
                    ("test_labels", &p.test_labels),
                ] {
                    if !f.is_file() {
                        return Err(CliError::Config(format!("dataset.paths.{field}: {} is not a file", f.display())));
                    }
                }
                (load_idx(&p.train_images, &p.train_labels)?, load_idx(&p.test_images, &p.test_labels)?)
            }
        };
        if let Some(n) = d.subset_n {
            if n > train.len() {
                return Err(CliError::Config(format!("dataset.subset_n: {n} exceeds the {} training data", train.len())));
            }
            train = subset(&train, n, seed)?;
        }
        if d.transform != TransformKind::None {
            train = apply_transform(&train, TransformSpec { kind: d.transform, seed })?;
            test = apply_transform(&test, TransformSpec { kind: d.transform, seed: seed.wrapping_add(1 << 32) })?;
        }
        if d.polar {
            train = to_polar(&train)?;
            test = to_polar(&test)?;
        }
        Ok(Splits { train, test })
    }

    pub fn build_model(&self, train: &Dataset) -> Result<MlpModel, CliError> {
        let mut sizes = vec![train.inputs.cols()];
        sizes.extend(&self.model.hidden_sizes);
        sizes.push(train.classes);
        Ok(MlpModel::new(&sizes, self.model.activation, self.train.seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"{
        "dataset": {"name": "toy", "seed": 0, "n_train": 20, "n_test": 20},
        "model": {"hidden_sizes": [8], "activation": "tanh"},
        "method": {"type": "marglik", "curvature": "kfac"},
        "train": {"epochs": 2, "samples_train": 4, "samples_test": 4, "lr_theta": 0.01,
                  "lr_theta_floor": 0.001, "lr_hyper": 0.01, "lr_hyper_floor": 0.001, "lr_prior": 0.1,
                  "prior_precision": 1.0, "burnin_epochs": 0, "hyper_every": 1, "antithetic": true, "seed": 0},
        "output_dir": "out"
    }"#;

    fn parse(s: &str) -> Result<RunConfig, CliError> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn toy_config_parses() {
        let c = parse(TOY).unwrap();
        assert_eq!(c.train_config().method, Method::Marglik);
        let s = c.datasets().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (20, 20));
        assert_eq!(c.build_model(&s.train).unwrap().layer_sizes(), vec![2, 8, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(&TOY.replace("\"n_test\"", "\"n_tset\"")).is_err());
        assert!(parse(&TOY.replace("\"output_dir\"", "\"outdir\"")).is_err());
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let msg = |s: String| parse(&s).unwrap_err().to_string();
        assert!(msg(TOY.replace("\"marglik\"", "\"data_aug\"")).contains("method.fixed_eta"));
        assert!(msg(TOY.replace("\"hyper_every\": 1", "\"hyper_every\": 0")).contains("hyper_every"));
        assert!(msg(TOY.replace("\"name\": \"toy\"", "\"name\": \"mnist\"")).contains("dataset.paths"));
        assert!(msg(TOY.replace("\"kfac\"}", "\"kfac\", \"fixed_eta\": [1.0, 2.0]}").replace("marglik", "data_aug"))
            .contains("expected 1 components"));
    }
}
