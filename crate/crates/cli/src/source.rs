use std::path::PathBuf;

use mci::data::{generate, load_features, FeatureFileOptions, Scenario, SyntheticKind, SyntheticSpec};
use serde::Serialize;

use crate::args::{DataArgs, SyntheticChoice};
use crate::UsageError;

/// Where the samples came from, recorded in every report.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    File { path: PathBuf, delimiter: char, classes: Option<usize> },
    Synthetic { spec: SyntheticSpec },
}

impl DataSource {
    pub fn from_args(args: &DataArgs, seed: u64) -> anyhow::Result<Self> {
        if let Some(path) = &args.input {
            if !args.delimiter.is_ascii() {
                return Err(UsageError(format!("delimiter must be a single ASCII character, got {:?}", args.delimiter)).into());
            }
            return Ok(DataSource::File { path: path.clone(), delimiter: args.delimiter, classes: args.classes });
        }
        let choice = args.synthetic.expect("clap requires --input or --synthetic");
        let sd = args.noise_sd;
        let (kind, default_classes) = match choice {
            SyntheticChoice::ShiftedBlobs => {
                let mut shift = vec![0.0; args.dim.max(1)];
                shift[0] = args.shift * sd;
                (SyntheticKind::ShiftedBlobs { shift, separation: args.separation }, 4)
            }
            SyntheticChoice::RotatedMoons => (SyntheticKind::RotatedMoons { angle: args.angle }, 2),
            SyntheticChoice::ChainCi | SyntheticChoice::ChainDep => (
                SyntheticKind::ConditionalChain {
                    dependent: choice == SyntheticChoice::ChainDep,
                    offset: args.offset * sd,
                    separation: args.separation,
                    dim: args.dim,
                },
                3,
            ),
        };
        let spec = SyntheticSpec {
            kind,
            classes: args.classes.unwrap_or(default_classes),
            samples_per_class_per_domain: args.samples_per_class,
            noise_sd: sd,
            num_sources: args.num_sources,
            seed,
        };
        Ok(DataSource::Synthetic { spec })
    }

    /// Same source with a different synthetic seed; files are unaffected.
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            DataSource::Synthetic { spec } => DataSource::Synthetic { spec: SyntheticSpec { seed, ..spec.clone() } },
            other => other.clone(),
        }
    }

    pub fn load(&self) -> mci::Result<Scenario<f64>> {
        match self {
            DataSource::File { path, delimiter, classes } => {
                load_features(path, FeatureFileOptions { delimiter: *delimiter as u8, classes: *classes })
            }
            DataSource::Synthetic { spec } => generate(spec),
        }
    }
}
