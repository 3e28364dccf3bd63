//! Per-subcommand options, shared by the command line and flat TOML config
//! files. Every field is optional so the two sources can be layered:
//! flags over file over built-in defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use gplar_core::kernels::MixtureComponent;
use gplar_core::{KernelFamily, KernelSpec, TimeGrid};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

/// Declares an options struct whose fields are all `Option`, usable both as
/// clap arguments and as a `deny_unknown_fields` serde record, with a
/// field-wise `or` for layering.
macro_rules! options {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
        #[command(allow_negative_numbers = true)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            /// Flat key-value config file; command-line flags take precedence.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $(
                $(#[$fmeta])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl Layered for $name {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn or(self, lower: Self) -> Self {
                $name {
                    config: self.config.or(lower.config),
                    $( $field: self.$field.or(lower.$field), )*
                }
            }
        }
    };
}

pub trait Layered: Sized + Default + DeserializeOwned + Serialize {
    fn config_path(&self) -> Option<&Path>;
    /// Field-wise: `self` where set, else `lower`.
    fn or(self, lower: Self) -> Self;
}

/// Parses a flat TOML document; unknown keys are rejected.
pub fn parse_config<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {}", e.message())))
}

pub fn serialize_config<T: Serialize>(cfg: &T) -> String {
    toml::to_string(cfg).expect("flat options serialize")
}

fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// Flags over the `--config` file (if any).
pub fn layered<T: Layered>(flags: T) -> Result<(T, T), CliError> {
    let file: T = match flags.config_path() {
        Some(p) => load_file(p)?,
        None => T::default(),
    };
    Ok((flags, file))
}

/// Kernel keys shared by several subcommands; also the format of a kernel
/// file passed as `--kernel <path>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nugget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm_means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm_scales: Option<Vec<f64>>,
}

impl KernelOptions {
    pub fn or(self, lower: Self) -> Self {
        KernelOptions {
            kernel: self.kernel.or(lower.kernel),
            lengthscale: self.lengthscale.or(lower.lengthscale),
            variance: self.variance.or(lower.variance),
            nugget: self.nugget.or(lower.nugget),
            jitter: self.jitter.or(lower.jitter),
            sm_weights: self.sm_weights.or(lower.sm_weights),
            sm_means: self.sm_means.or(lower.sm_means),
            sm_scales: self.sm_scales.or(lower.sm_scales),
        }
    }
}

pub const FAMILIES: [&str; 6] = ["rbf", "matern12", "matern32", "matern52", "spectral_mixture", "white"];

pub const DEFAULT_LENGTHSCALE: f64 = 0.2;
pub const DEFAULT_VARIANCE: f64 = 1.0;

/// Resolves `--kernel` (a family name or a kernel file) and builds the spec.
/// Precedence: explicit flags, then the kernel file, then the `--config`
/// file, then defaults (RBF, `ℓ = 0.2`, `σ² = 1`, no nugget, jitter
/// `1e-6 σ²`).
pub fn resolve_kernel(flags: KernelOptions, file: KernelOptions) -> Result<KernelSpec<f64>, CliError> {
    let name = flags.kernel.clone().or_else(|| file.kernel.clone());
    let from_kernel_file = match &name {
        Some(n) if !FAMILIES.contains(&n.as_str()) => {
            let k: KernelOptions = load_file(Path::new(n))?;
            if k.kernel.as_deref().is_some_and(|f| !FAMILIES.contains(&f)) {
                return Err(CliError::Usage(format!("{n}: unknown kernel family {:?}", k.kernel.unwrap())));
            }
            Some(k)
        }
        _ => None,
    };
    let merged = match from_kernel_file {
        Some(k) => {
            let mut flags = flags;
            flags.kernel = None;
            let mut lower = file;
            lower.kernel = None;
            flags.or(k).or(lower)
        }
        None => flags.or(file),
    };
    build_kernel(&merged)
}

fn build_kernel(k: &KernelOptions) -> Result<KernelSpec<f64>, CliError> {
    let family = match k.kernel.as_deref().unwrap_or("rbf") {
        "rbf" => KernelFamily::Rbf,
        "matern12" => KernelFamily::Matern12,
        "matern32" => KernelFamily::Matern32,
        "matern52" => KernelFamily::Matern52,
        "white" => KernelFamily::White,
        "spectral_mixture" => {
            let (w, m, s) = match (&k.sm_weights, &k.sm_means, &k.sm_scales) {
                (Some(w), Some(m), Some(s)) if w.len() == m.len() && m.len() == s.len() => (w, m, s),
                _ => {
                    return Err(CliError::Usage(
                        "spectral_mixture needs sm_weights, sm_means and sm_scales of equal length".into(),
                    ))
                }
            };
            KernelFamily::SpectralMixture(
                w.iter()
                    .zip(m)
                    .zip(s)
                    .map(|((&weight, &mean), &scale)| MixtureComponent { weight, mean, scale })
                    .collect(),
            )
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown kernel `{other}` (expected one of {} or a kernel file)",
                FAMILIES.join(", ")
            )))
        }
    };
    let variance = k.variance.unwrap_or(DEFAULT_VARIANCE);
    let mut spec = KernelSpec::new(family, k.lengthscale.unwrap_or(DEFAULT_LENGTHSCALE), variance)?
        .with_nugget(k.nugget.unwrap_or(0.0));
    if let Some(j) = k.jitter {
        spec = spec.with_jitter(j);
    }
    spec.validate()?;
    Ok(spec)
}

pub fn build_grid(len: Option<usize>, grid: Option<&str>) -> Result<TimeGrid<f64>, CliError> {
    let len = len.ok_or_else(|| CliError::Usage("--T is required".into()))?;
    match grid.unwrap_or("open") {
        "open" => Ok(TimeGrid::linspace_open(len)?),
        "unit" => Ok(TimeGrid::linspace_unit(len)?),
        other => Err(CliError::Usage(format!("unknown grid `{other}` (expected open or unit)"))),
    }
}

options! {
    pub struct GramOptions {
        /// Kernel family or kernel config file.
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        variance: f64,
        /// Relative nugget (model variance inflation).
        #[arg(long)]
        nugget: f64,
        /// Absolute jitter; defaults to 1e-6 * variance.
        #[arg(long)]
        jitter: f64,
        #[arg(long = "T")]
        #[serde(rename = "T")]
        len: usize,
        /// `open` = i/L for i = 1..L; `unit` = linspace(0, 1, L).
        #[arg(long)]
        grid: String,
        /// Export the factored matrix (kernel + nugget + jitter).
        #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
        with_jitter: bool,
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct SampleOptions {
        /// seq, para or cond.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        variance: f64,
        #[arg(long)]
        nugget: f64,
        #[arg(long)]
        jitter: f64,
        #[arg(long = "T")]
        #[serde(rename = "T")]
        len: usize,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        dz: usize,
        /// Number of trajectories.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// CSV of the first T0 rows (cond mode).
        #[arg(long)]
        prefix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct LogdensityOptions {
        /// Trajectory CSV, L rows by d_z columns.
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        variance: f64,
        #[arg(long)]
        nugget: f64,
        #[arg(long)]
        jitter: f64,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct KlOptions {
        /// Gram matrix CSV.
        #[arg(long)]
        gram: PathBuf,
        /// `mu.csv,logvar.csv`.
        #[arg(long)]
        posterior: String,
        /// Also report the closed form against sigma2 * I.
        #[arg(long)]
        isotropic: f64,
        /// Monte-Carlo samples for an independent estimate.
        #[arg(long)]
        mc: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct BenchOptions {
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        variance: f64,
        #[arg(long)]
        nugget: f64,
        #[arg(long)]
        jitter: f64,
        /// Comma-separated, ascending.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        tol: f64,
        #[arg(long)]
        trials: usize,
        /// Defaults to 10 * (largest L).
        #[arg(long)]
        max_iters: usize,
        /// none or jacobi.
        #[arg(long)]
        preconditioner: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    }
}

options! {
    pub struct TrainOptions {
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        batch_size: usize,
        #[arg(long)]
        learning_rate: f64,
        #[arg(long)]
        seed: u64,
        /// Number of synthetic training sequences.
        #[arg(long)]
        n_seqs: usize,
        #[arg(long)]
        seq_len: usize,
        #[arg(long)]
        d_z: usize,
        #[arg(long)]
        d_x: usize,
        /// gp or isotropic.
        #[arg(long)]
        prior: String,
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        variance: f64,
        #[arg(long)]
        nugget: f64,
        #[arg(long)]
        jitter: f64,
        #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
        train_kernel: bool,
        #[arg(long)]
        beta_max: f64,
        #[arg(long)]
        warmup_steps: usize,
        #[arg(long)]
        kl_target: f64,
        #[arg(long)]
        adapt_rate: f64,
        #[arg(long)]
        beta_min: f64,
        /// Per-token KL cap; `inf` disables it.
        #[arg(long)]
        kl_cap: f64,
        #[arg(long)]
        data_lengthscale: f64,
        #[arg(long)]
        data_variance: f64,
        #[arg(long)]
        data_nugget: f64,
        #[arg(long)]
        out_metrics: PathBuf,
        #[arg(long)]
        out_params: PathBuf,
    }
}

options! {
    pub struct CheckOptions {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    }
}

macro_rules! kernel_options {
    ($o:expr) => {
        KernelOptions {
            kernel: $o.kernel.clone(),
            lengthscale: $o.lengthscale,
            variance: $o.variance,
            nugget: $o.nugget,
            jitter: $o.jitter,
            sm_weights: None,
            sm_means: None,
            sm_scales: None,
        }
    };
}
pub(crate) use kernel_options;
