//! `lensmtf` command-line frontend.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "lensmtf", version, about = "Lens MTF charts from photographs")]
pub struct Cli {
    /// JSON file with default option values; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Measure PSFs from pinhole-panel images and write a PSF dataset.
    Panel(PanelArgs),
    /// Train the MTF regressor on synthetically blurred patches.
    Train(TrainArgs),
    /// Estimate MTF charts from photographs with a trained model.
    Estimate(EstimateArgs),
    /// Run the numerical self-checks.
    Oracle(OracleArgs),
    /// Write a printable test pattern.
    Pattern(PatternArgs),
    /// Write sample training examples with their labels.
    Examples(ExamplesArgs),
}

#[derive(Args, Debug)]
pub struct PanelArgs {
    /// Directory of PGM images. Subdirectories, sorted by name, are
    /// exposure levels from shortest to longest; otherwise all images form
    /// one level.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub pitch_um: Option<f64>,
    #[arg(long, default_value_t = 111)]
    pub psf_size: usize,
    /// Distance between neighbouring spots on the sensor, pixels.
    #[arg(long)]
    pub spacing_px: Option<usize>,
    #[arg(long)]
    pub columns: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long, default_value = "")]
    pub lens_id: String,
    #[arg(long, default_value_t = 0.0)]
    pub f_number: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Pattern,
    Natural,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Checkpoint path; the log is written next to it as `<stem>.log.csv`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// CPU-sized network and schedule.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    /// Directory of sharp natural photographs (PGM) for `--source natural`.
    #[arg(long)]
    pub natural_dir: Option<PathBuf>,
    /// Measured PSF dataset; artificial PSFs are used when absent.
    #[arg(long)]
    pub psf_dataset: Option<PathBuf>,
    /// Share of artificial PSFs mixed into a measured dataset.
    #[arg(long)]
    pub artificial_fraction: Option<f64>,
    /// Kernel-regression resamples drawn from the dataset; 0 uses the
    /// measured kernels directly.
    #[arg(long)]
    pub kr_samples: Option<usize>,
    /// Total steps; without `--multi-steps` all are single-patch steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub multi_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_groups: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ray,
    Azimuthal,
    Both,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for chart CSV, JSON and SVG files.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub pitch_um: Option<f64>,
    /// Patch grid as radii x angles, e.g. `12x16`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Write raw values without compensation factors.
    #[arg(long)]
    pub no_compensation: bool,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    #[arg(long, default_value = "")]
    pub lens_id: String,
    #[arg(long)]
    pub f_number: Option<f64>,
    /// Photographs (PGM) of the test pattern or of natural scenes.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    FftNormalization,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Skip the timed kernel-regression comparison.
    #[arg(long)]
    pub skip_timing: bool,
    /// Negative control: inject a known defect.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Args, Debug)]
pub struct PatternArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Print width and height, millimetres; the default is A1 landscape.
    #[arg(long, default_value_t = 841.0)]
    pub width_mm: f64,
    #[arg(long, default_value_t = 594.0)]
    pub height_mm: f64,
    #[arg(long, default_value_t = 150.0)]
    pub dpi: f64,
    /// Length of two checker cells, e.g. `25mm` or `295px`.
    #[arg(long, default_value = "25mm")]
    pub period: String,
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], default_values_t = [0.0, 1.0])]
    pub contrast: Vec<f64>,
    /// Rotation, degrees counter-clockwise.
    #[arg(long, default_value_t = 0.0)]
    pub rotation_deg: f64,
}

#[derive(Args, Debug)]
pub struct ExamplesArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, value_enum)]
    pub source: Option<SourceArg>,
    #[arg(long)]
    pub natural_dir: Option<PathBuf>,
    #[arg(long)]
    pub desk_scale: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}
