//! `mxscale` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::formats::{format_table_csv, FormatSpec};
use crate::scaling::{ScaleKind, ScaleStrategy};
use crate::study::{
    histogram_csv, region_exemplars, run_histograms, run_sweep, sigma_grid, sweep_csv,
    validate_regions, Region, RegionExemplars, StudyConfig, SWEEP_HEADER,
};
use crate::tensorio::{
    load_tensor, mask_ablation, mask_csv, report_tensor_error, threshold_grid, TENSOR_REGION,
};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "MXSCALE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "mxscale",
    version,
    about = "FP4 microscaling quantization toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Print the value table of a format as CSV.
    Formats(FormatsArgs),
    /// Sweep MSE over a log-spaced sigma grid.
    Sweep(SweepArgs),
    /// Entry and scale histograms for the three scale regimes.
    Hist(HistArgs),
    /// Quantize an NPY tensor and report its error.
    Quantize(QuantizeArgs),
    /// Zero a magnitude band before quantizing, over a grid of bands.
    Mask(MaskArgs),
    /// Validate and print the regime exemplar sigmas.
    Regions(RegionsArgs),
}

#[derive(Debug, Args)]
pub struct FormatsArgs {
    #[arg(long, value_parser = parse_format)]
    pub spec: FormatSpec,
    /// Include every code instead of non-negative magnitudes only.
    #[arg(long)]
    pub all: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
    /// Render the written CSVs with `python3 -m plotviz`.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub strategies: Option<Vec<ScaleKind>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_scale_format, default_value = "e4m3")]
    pub scales: Vec<FormatSpec>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub bs: Vec<usize>,
    #[arg(long, default_value_t = 1 << 16)]
    pub samples: usize,
    #[arg(long)]
    pub hierarchical: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl StudyArgs {
    fn config(&self, sigmas: Vec<f64>, default_strategies: &[ScaleKind]) -> StudyConfig {
        StudyConfig {
            sigmas,
            block_sizes: self.bs.clone(),
            strategies: self
                .strategies
                .clone()
                .unwrap_or_else(|| default_strategies.to_vec()),
            scale_formats: self.scales.clone(),
            hierarchical: self.hierarchical,
            samples_per_sigma: self.samples,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    #[arg(long, default_value_t = -24, allow_hyphen_values = true)]
    pub sigma_min_log2: i32,
    #[arg(long, default_value_t = 4, allow_hyphen_values = true)]
    pub sigma_max_log2: i32,
    #[arg(long, default_value_t = 8)]
    pub points_per_octave: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    /// Override the region A exemplar sigma.
    #[arg(long)]
    pub sigma_a: Option<f64>,
    #[arg(long)]
    pub sigma_b: Option<f64>,
    #[arg(long)]
    pub sigma_c: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    #[arg(long, default_value_t = 16)]
    pub bs: usize,
    #[arg(long, value_parser = parse_kind, default_value = "absmax")]
    pub strategy: ScaleKind,
    #[arg(long, value_parser = parse_scale_format, default_value = "e4m3")]
    pub scale: FormatSpec,
    #[arg(long)]
    pub hierarchical: bool,
    /// Recipe label such as `ue5m3+4o6+H`; replaces --strategy, --scale and --hierarchical.
    #[arg(long, value_parser = parse_recipe, conflicts_with_all = ["strategy", "scale", "hierarchical"])]
    pub recipe: Option<ScaleStrategy>,
}

impl RecipeArgs {
    fn strategy(&self) -> ScaleStrategy {
        self.recipe.unwrap_or_else(|| {
            ScaleStrategy::new(self.strategy, self.scale).with_hierarchical(self.hierarchical)
        })
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    pub file: PathBuf,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    pub file: PathBuf,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long, default_value_t = 0.0)]
    pub grid_start: f64,
    #[arg(long, default_value_t = 0.035)]
    pub grid_stop: f64,
    #[arg(long, default_value_t = 0.005)]
    pub grid_step: f64,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegionsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1 << 16)]
    pub samples: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub bs: Vec<usize>,
}

fn parse_format(s: &str) -> std::result::Result<FormatSpec, String> {
    FormatSpec::parse(s).map_err(|e| e.to_string())
}

fn parse_scale_format(s: &str) -> std::result::Result<FormatSpec, String> {
    let f = parse_format(s)?;
    if [FormatSpec::E4M3, FormatSpec::UE5M3, FormatSpec::E8M0].contains(&f) {
        Ok(f)
    } else {
        Err(format!("{s} is not a scale format (e4m3, ue5m3, e8m0)"))
    }
}

fn parse_kind(s: &str) -> std::result::Result<ScaleKind, String> {
    ScaleKind::parse(s).map_err(|e| e.to_string())
}

fn parse_recipe(s: &str) -> std::result::Result<ScaleStrategy, String> {
    let r = ScaleStrategy::from_label(s).map_err(|e| e.to_string())?;
    parse_scale_format(r.scale_format.name)?;
    Ok(r)
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mxscale: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Formats(a) => formats(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Hist(a) => hist(a),
        Cmd::Quantize(a) => quantize(a),
        Cmd::Mask(a) => mask(a),
        Cmd::Regions(a) => regions(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn plot(kind: &str, csv: &Path) -> Result<()> {
    let status = Command::new("python3")
        .args(["-m", "plotviz", kind])
        .arg(csv)
        .status()
        .map_err(|e| Error::Plot {
            csv: csv.to_path_buf(),
            reason: e.to_string(),
        })?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Plot {
            csv: csv.to_path_buf(),
            reason: format!("plotviz exited with {status}"),
        })
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tensor".into())
}

fn formats(a: FormatsArgs) -> Result<()> {
    let csv = format!(
        "# format={} magnitudes_only={}\n{}",
        a.spec.name,
        !a.all,
        format_table_csv(&a.spec, !a.all)
    );
    match a.out {
        Some(path) => write_file(&path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

const SWEEP_STRATEGIES: [ScaleKind; 5] = [
    ScaleKind::AbsMax,
    ScaleKind::PreventZero,
    ScaleKind::FourOverSix,
    ScaleKind::FourOverSixPreventZero,
    ScaleKind::BruteForce,
];

fn sweep(a: SweepArgs) -> Result<()> {
    if a.points_per_octave == 0 || a.sigma_max_log2 < a.sigma_min_log2 {
        return Err(Error::Config("empty sigma grid".into()));
    }
    let sigmas = sigma_grid(a.sigma_min_log2, a.sigma_max_log2, a.points_per_octave);
    let config = a.study.config(sigmas, &SWEEP_STRATEGIES);
    let rows = with_threads(a.study.threads, || run_sweep(&config))??;
    ensure_dir(&a.out.out_dir)?;
    let path = a.out.out_dir.join(format!("sweep_{}.csv", config.seed));
    write_file(&path, &sweep_csv(&config, &rows))?;
    println!("{}", path.display());
    if a.out.plot {
        plot("sweep", &path)?;
    }
    Ok(())
}

fn hist(a: HistArgs) -> Result<()> {
    let defaults = region_exemplars();
    let exemplars = RegionExemplars {
        a: a.sigma_a.unwrap_or(defaults.a),
        b: a.sigma_b.unwrap_or(defaults.b),
        c: a.sigma_c.unwrap_or(defaults.c),
    };
    let config = a.study.config(
        Region::ALL.iter().map(|&r| exemplars.sigma(r)).collect(),
        &[ScaleKind::AbsMax, ScaleKind::FourOverSix],
    );
    let rows = with_threads(a.study.threads, || {
        validate_regions(
            &exemplars,
            &config.block_sizes,
            config.samples_per_sigma,
            config.seed,
        )?;
        run_histograms(&config, &exemplars)
    })??;
    ensure_dir(&a.out.out_dir)?;
    let config_line = format!(
        "{} region_sigmas=A:{};B:{};C:{}",
        config.describe(),
        exemplars.a,
        exemplars.b,
        exemplars.c
    );
    for region in Region::ALL {
        let label = region.to_string();
        let path = a
            .out
            .out_dir
            .join(format!("hist_{label}_{}.csv", config.seed));
        write_file(&path, &histogram_csv(&config_line, &rows, &label))?;
        println!("{}", path.display());
        if a.out.plot {
            plot("hist", &path)?;
        }
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let strategy = a.recipe.strategy();
    strategy.validate()?;
    let tensor = load_tensor(&a.file)?;
    let report = report_tensor_error(&tensor, a.recipe.bs, &strategy)?;
    let stem = file_stem(&a.file);
    let config_line = format!(
        "# file={} shape={:?} block_size={} recipe={}",
        a.file.display(),
        tensor.shape,
        a.recipe.bs,
        strategy.label()
    );
    ensure_dir(&a.out.out_dir)?;
    let sweep_path = a.out.out_dir.join(format!("sweep_{stem}.csv"));
    write_file(
        &sweep_path,
        &format!("{config_line}\n{SWEEP_HEADER}\n{}\n", report.row),
    )?;
    let hist_path = a
        .out
        .out_dir
        .join(format!("hist_{TENSOR_REGION}_{stem}.csv"));
    write_file(
        &hist_path,
        &histogram_csv(&config_line, &report.histogram, TENSOR_REGION),
    )?;
    println!(
        "{} mse={} clip_mse={} round_mse={} zero_scale_fraction={}",
        strategy.label(),
        report.row.mse,
        report.row.clip_mse,
        report.row.round_mse,
        report.row.zero_scale_fraction
    );
    println!("{}", sweep_path.display());
    println!("{}", hist_path.display());
    if a.out.plot {
        plot("sweep", &sweep_path)?;
        plot("hist", &hist_path)?;
    }
    Ok(())
}

fn mask(a: MaskArgs) -> Result<()> {
    let strategy = a.recipe.strategy();
    strategy.validate()?;
    let grid = threshold_grid(a.grid_start, a.grid_stop, a.grid_step)?;
    let tensor = load_tensor(&a.file)?;
    let rows = mask_ablation(&tensor, &grid, a.recipe.bs, &strategy)?;
    let config_line = format!(
        "# file={} shape={:?} block_size={} recipe={} grid={}:{}:{}",
        a.file.display(),
        tensor.shape,
        a.recipe.bs,
        strategy.label(),
        a.grid_start,
        a.grid_stop,
        a.grid_step
    );
    ensure_dir(&a.out_dir)?;
    let path = a.out_dir.join(format!("mask_{}.csv", file_stem(&a.file)));
    write_file(&path, &mask_csv(&config_line, &rows))?;
    for row in &rows {
        println!(
            "[{}, {}) masked_fraction={} mse={}",
            row.lower, row.upper, row.masked_fraction, row.row.mse
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn regions(a: RegionsArgs) -> Result<()> {
    let ex = validate_regions(&region_exemplars(), &a.bs, a.samples, a.seed)?;
    println!("region,sigma,log2_sigma");
    for r in Region::ALL {
        println!("{r},{},{}", ex.sigma(r), ex.sigma(r).log2());
    }
    Ok(())
}
