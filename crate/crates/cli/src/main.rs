//! `ged`: distances between WAV files, training experiments and gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectral_ged::experiments::{
    self, AudioOptions, ToyOptions, ABLATION_OVERSAMPLING, ABLATION_STEPS, DESK_WINDOWS,
};
use spectral_ged::spectral::{DistanceConfig, MultiScaleDistance, STANDARD_WINDOWS};
use spectral_ged::wav::wav_read;
use spectral_ged::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_INTERNAL: u8 = 1;

#[derive(Parser)]
#[command(name = "ged", version, about = "Spectral energy distance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-scale spectral distance between two WAV files.
    Distance(DistanceArgs),
    /// Train an MLP generator on a three-component 2-D Gaussian mixture.
    TrainGmm(ToyArgs),
    /// Train an MLP generator on a 100-dimensional standard Gaussian.
    TrainHighdim(ToyArgs),
    /// Fit y = μ + σ·z to N(2, 0.5²) with the absolute-difference energy score.
    TrainLocationScale(ToyArgs),
    /// Compare the minibatch loss against exact enumeration on discrete data.
    CheckUnbiased(UnbiasedArgs),
    /// Train the chunked inverse-STFT generator on synthetic harmonic tones.
    TrainAudio(AudioArgs),
    /// Retrain the audio model for each single window and oversampling factor.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and the full distance pipeline.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DistanceArgs {
    file_a: PathBuf,
    file_b: PathBuf,
    /// Comma-separated window lengths.
    #[arg(long, value_delimiter = ',', default_values_t = STANDARD_WINDOWS.to_vec())]
    windows: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    oversample: usize,
    /// Project magnitudes onto a mel filterbank first.
    #[arg(long)]
    mel: bool,
    #[arg(long, default_value_t = 1e-5)]
    log_eps: f64,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Drop the repulsive term from the loss.
    #[arg(long)]
    no_repulsive: bool,
    /// Evaluate an EMA copy of the parameters with this decay.
    #[arg(long)]
    ema: Option<f64>,
    /// Decay the learning rate to zero with a cosine schedule.
    #[arg(long)]
    cosine: bool,
    /// Comma-separated hidden layer widths of the MLP generator.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

impl ToyArgs {
    fn options(&self, base: ToyOptions) -> ToyOptions {
        ToyOptions {
            steps: self.steps.unwrap_or(base.steps),
            batch: self.batch.unwrap_or(base.batch),
            lr: self.lr.unwrap_or(base.lr),
            repulsive: !self.no_repulsive,
            ema_decay: self.ema.or(base.ema_decay),
            cosine_decay: self.cosine || base.cosine_decay,
            hidden: self.hidden.clone().or(base.hidden.clone()),
            ..base
        }
    }
}

#[derive(Args)]
struct UnbiasedArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Number of 2-D support points.
    #[arg(long, default_value_t = 6)]
    support: usize,
}

#[derive(Args)]
struct AudioArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    no_repulsive: bool,
    #[arg(long)]
    ema: Option<f64>,
    /// Comma-separated loss window lengths.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    #[arg(long)]
    oversample: Option<usize>,
    /// Condition on log f0 only, without the per-chunk phase features.
    #[arg(long)]
    no_phase_features: bool,
    /// Number of held-out f0 values evaluated after training.
    #[arg(long)]
    heldout: Option<usize>,
}

impl AudioArgs {
    fn options(&self) -> AudioOptions {
        let base = AudioOptions::new(self.seed);
        AudioOptions {
            steps: self.steps.unwrap_or(base.steps),
            batch: self.batch.unwrap_or(base.batch),
            lr: self.lr.unwrap_or(base.lr),
            chunk: self.chunk.unwrap_or(base.chunk),
            blocks: self.blocks.unwrap_or(base.blocks),
            repulsive: !self.no_repulsive,
            ema_decay: self.ema.or(base.ema_decay),
            windows: self.windows.clone().unwrap_or(base.windows.clone()),
            oversample: self.oversample.unwrap_or(base.oversample),
            phase_features: base.phase_features && !self.no_phase_features,
            heldout: self.heldout.unwrap_or(base.heldout),
            ..base
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    audio: AudioArgs,
    /// Window lengths trained one at a time.
    #[arg(long, value_delimiter = ',', default_values_t = DESK_WINDOWS.to_vec())]
    windows_singletons: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ABLATION_OVERSAMPLING.to_vec())]
    oversample_list: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random evaluation points per check.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Also write the table to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a command that ran without an error but may still fail a check.
enum Status {
    Ok,
    Failed,
}

fn run(cli: Cli) -> Result<Status, Error> {
    match cli.command {
        Command::Distance(a) => distance(a),
        Command::TrainGmm(a) => {
            let run = experiments::train_gmm(&a.options(experiments::gmm_options(a.seed)), Some(&a.out))?;
            let c = &run.coverage;
            println!(
                "fraction_within={:.4} per_mode_share={:?} median_nearest_dist={:.4}",
                c.fraction_within, c.per_mode_share, c.median_nearest_dist
            );
            Ok(Status::Ok)
        }
        Command::TrainHighdim(a) => {
            let run = experiments::train_highdim(&a.options(experiments::highdim_options(a.seed)), Some(&a.out))?;
            let s = &run.stats;
            println!(
                "mean_l2_norm={:.4} target={:.4} mean_coord_avg={:.5}",
                s.mean_l2_norm,
                spectral_ged::eval::chi_mean(experiments::HIGHDIM_DIM),
                s.mean_coord_avg
            );
            Ok(Status::Ok)
        }
        Command::TrainLocationScale(a) => {
            let opts = a.options(experiments::location_scale_options(a.seed));
            let run = experiments::train_location_scale(&opts, Some(&a.out))?;
            println!("mu={:.5} sigma={:.5}", run.mu, run.sigma);
            Ok(Status::Ok)
        }
        Command::CheckUnbiased(a) => {
            let check = experiments::check_unbiased(a.seed, a.support, a.batch, a.draws)?;
            experiments::write_unbiased(&check, &a.out)?;
            println!(
                "exact={:.6} mc_mean={:.6} standard_error={:.6} z={:.3}",
                check.exact, check.mc_mean, check.standard_error, check.z_score
            );
            Ok(if check.passed() { Status::Ok } else { Status::Failed })
        }
        Command::TrainAudio(a) => {
            let run = experiments::train_audio(&a.options(), Some(&a.out))?;
            println!(
                "pitch_accuracy={:.3} distance_ratio={:.4} frechet_proxy={:.4}",
                run.pitch_accuracy,
                run.distance_ratio(),
                run.frechet_proxy
            );
            Ok(Status::Ok)
        }
        Command::Ablate(a) => {
            let mut base = a.audio.options();
            if a.audio.steps.is_none() {
                base.steps = ABLATION_STEPS;
            }
            let grid = experiments::ablate(&base, &a.windows_singletons, &a.oversample_list, Some(&a.audio.out))?;
            print!("{}", grid.csv());
            Ok(Status::Ok)
        }
        Command::Gradcheck(a) => {
            let rows = experiments::gradcheck_suite(a.seed, a.points)?;
            let csv = experiments::gradcheck_csv(&rows);
            print!("{csv}");
            if let Some(path) = &a.out {
                std::fs::write(path, &csv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            Ok(if rows.iter().all(|r| r.passed) {
                Status::Ok
            } else {
                Status::Failed
            })
        }
    }
}

fn distance(a: DistanceArgs) -> Result<Status, Error> {
    let wa = wav_read(&a.file_a)?;
    let wb = wav_read(&a.file_b)?;
    if wa.sample_rate_hz() != wb.sample_rate_hz() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} Hz vs {} Hz",
            wa.sample_rate_hz(),
            wb.sample_rate_hz()
        )));
    }
    let len = wa.len().min(wb.len());
    let cfg = DistanceConfig::with_windows(a.windows)
        .with_oversample(a.oversample)
        .with_mel(a.mel)
        .with_log_eps(a.log_eps);
    let dist = MultiScaleDistance::new(cfg, wa.sample_rate_hz())?;
    let terms = dist.breakdown(&wa.samples()[..len], &wb.samples()[..len])?;
    println!("{}", terms.iter().map(|t| t.total()).sum::<f64>());
    println!("window_len,alpha,l1,log_l2,contribution");
    for t in &terms {
        println!("{},{},{},{},{}", t.window_len, t.alpha, t.l1, t.log_l2, t.total());
    }
    Ok(Status::Ok)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_INVALID,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Domain(_) | Error::InvalidState(_) => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(EXIT_INTERNAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
