//! `idsqs` command-line tool: study configuration, simulation, the analysis
//! stages (standalone or from a manifest) and the live study service.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use idsqs_core::alignment::{self, Grouping, JndTable};
use idsqs_core::distfit::{self, FitOptions};
use idsqs_core::domain::{self, Codec, Composition, GenerateOptions, RatingTable, StudyConfig};
use idsqs_core::numerics::DEFAULT_OTSU_BINS;
use idsqs_core::pipeline::{self, PipelineManifest};
use idsqs_core::reconstruction::{self, BootstrapOptions, ReconstructOptions};
use idsqs_core::screening::{self, MosReference};
use idsqs_core::simulator::{self, GroundTruth, Population};
use idsqs_service::{StudyService, SystemClock};

#[derive(Parser)]
#[command(
    name = "idsqs",
    version,
    about = "In-place double-stimulus quality study toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated study configuration.
    InitConfig(InitConfig),
    /// Check a study configuration and list every violation.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Produce synthetic ratings (and their ground truth) for a configuration.
    Simulate(Simulate),
    /// Load a rating file, check it and print a summary.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        /// Study configuration used to flag incomplete batch instances.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trap-question cleansing with an Otsu threshold.
    Clean {
        #[command(flatten)]
        io: StageIo,
        #[arg(long, default_value_t = DEFAULT_OTSU_BINS)]
        bins: usize,
    },
    /// Correlation-based removal of outlying batch instances.
    Outliers {
        #[command(flatten)]
        io: StageIo,
        /// Compare each instance with the MOS of the other instances only.
        #[arg(long)]
        leave_one_out: bool,
    },
    /// MOS and DMOS reconstruction.
    Reconstruct {
        #[command(flatten)]
        io: StageIo,
        /// Optional MOS / bias report next to the DMOS table.
        #[arg(long)]
        mos_out: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
    },
    /// Percentile bootstrap intervals of DMOS.
    Bootstrap {
        #[command(flatten)]
        io: StageIo,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Beta fits and chi-square goodness of fit per question.
    FitBeta {
        #[command(flatten)]
        io: StageIo,
        #[arg(long, default_value_t = 0.05)]
        significance: f64,
    },
    /// Cubic alignment of DMOS with a JND table.
    Align {
        /// DMOS table written by `reconstruct`.
        #[arg(long)]
        dmos: PathBuf,
        #[arg(long)]
        jnd: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scatter_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GroupingArg::PerSource)]
        grouping: GroupingArg,
    },
    /// Run every stage listed in a manifest and write the report bundle.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print the summary of a report bundle written by `run`.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Serve the study over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Event log; created when missing, replayed otherwise.
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Args)]
struct StageIo {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cleansing or outlier report whose kept instances restrict the input.
    #[arg(long)]
    keep: Option<PathBuf>,
}

#[derive(Args)]
struct InitConfig {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "idsqs")]
    study_id: String,
    #[arg(long, value_delimiter = ',', default_value = "2,6,7,9,10")]
    sources: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "JPEG,JPEG2000,AVIF,VVC_INTRA,JPEGXL"
    )]
    codecs: Vec<String>,
    #[arg(long, default_value_t = 4)]
    batches: usize,
    #[arg(long, default_value_t = 79)]
    study_per_batch: usize,
    #[arg(long, default_value_t = 5)]
    trap_i_per_batch: usize,
    #[arg(long, default_value_t = 5)]
    trap_ii_per_batch: usize,
    #[arg(long)]
    asset_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Simulate {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth_out: Option<PathBuf>,
    #[arg(long, default_value_t = 45)]
    diligent: usize,
    #[arg(long, default_value_t = 0)]
    clickers: usize,
    #[arg(long, default_value_t = 5.0)]
    bias_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    PerSource,
    Pooled,
    PerSourceMappedPooled,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::PerSource => Grouping::PerSource,
            GroupingArg::Pooled => Grouping::Pooled,
            GroupingArg::PerSourceMappedPooled => Grouping::PerSourceMappedPooled,
        }
    }
}

fn load_input(io: &StageIo) -> Result<(RatingTable, BTreeSet<String>)> {
    let table = domain::load_ratings(&io.input)
        .with_context(|| format!("reading {}", io.input.display()))?;
    let kept = match &io.keep {
        Some(path) => pipeline::read_kept(path)?,
        None => table.instance_ids(),
    };
    Ok((table, kept))
}

fn write_out(
    path: &Path,
    body: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    pipeline::write_file(path, body)?;
    Ok(())
}

fn init_config(args: InitConfig) -> Result<()> {
    let codecs = args
        .codecs
        .iter()
        .map(|c| c.parse::<Codec>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    let config = StudyConfig::generate(&GenerateOptions {
        study_id: args.study_id,
        sources: args.sources,
        codecs,
        batches: args.batches,
        composition: Composition {
            study_per_batch: args.study_per_batch,
            trap_i_per_batch: args.trap_i_per_batch,
            trap_ii_per_batch: args.trap_ii_per_batch,
        },
        asset_dir: args.asset_dir,
        seed: args.seed,
        ..GenerateOptions::default()
    });
    config.save(&args.out)?;
    println!(
        "wrote {} ({} questions, {} batches)",
        args.out.display(),
        config.questions.len(),
        config.batches.len()
    );
    Ok(())
}

fn validate_config(path: &Path) -> Result<()> {
    let config = StudyConfig::load(path)?;
    let violations = domain::validate_study_config(&config);
    if violations.is_empty() {
        println!("{}: ok", path.display());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    bail!("{} violation(s)", violations.len())
}

fn simulate(args: Simulate) -> Result<()> {
    let config = StudyConfig::load(&args.config)?;
    let truth = GroundTruth::generate(
        &config,
        &Population {
            diligent: args.diligent,
            clickers: args.clickers,
            bias_sd: args.bias_sd,
            ..Population::default()
        },
        args.seed,
    );
    let table = simulator::simulate(&config, &truth, args.seed)?;
    domain::save_ratings(&table, &args.out)?;
    if let Some(path) = &args.truth_out {
        truth.save(path)?;
    }
    println!(
        "wrote {} ratings from {} batch instances to {}",
        table.ratings().len(),
        table.instances().len(),
        args.out.display()
    );
    Ok(())
}

fn ingest(input: &Path, config: Option<&Path>) -> Result<()> {
    let table = domain::load_ratings(input)?;
    let subjects: BTreeSet<&str> = table
        .instances()
        .values()
        .map(|i| i.subject_id.as_str())
        .collect();
    println!(
        "{} questions, {} ratings, {} batch instances, {} subjects",
        table.questions().len(),
        table.ratings().len(),
        table.instances().len(),
        subjects.len()
    );
    if let Some(path) = config {
        let config = StudyConfig::load(path)?;
        for id in table.incomplete_instances(&config) {
            println!("incomplete batch instance {id}");
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::InitConfig(args) => init_config(args),
        Command::ValidateConfig { config } => validate_config(&config),
        Command::Simulate(args) => simulate(args),
        Command::Ingest { input, config } => ingest(&input, config.as_deref()),
        Command::Clean { io, bins } => {
            let (table, kept) = load_input(&io)?;
            let report = screening::cleanse(&table.restrict(&kept), bins)?;
            write_out(&io.out, |w| pipeline::write_cleansing(&report, w))?;
            println!(
                "otsu threshold {:.2}: {} kept, {} discarded",
                report.threshold,
                report.kept.len(),
                report.discarded.len()
            );
            Ok(())
        }
        Command::Outliers { io, leave_one_out } => {
            let (table, kept) = load_input(&io)?;
            let reference = if leave_one_out {
                MosReference::LeaveOneOut
            } else {
                MosReference::IncludeSelf
            };
            let report = screening::remove_outliers_with(&table, &kept, reference)?;
            write_out(&io.out, |w| pipeline::write_outliers(&report, w))?;
            println!(
                "cutoff {:.4} (mu {:.4}, sigma {:.4}): {} removed, {} kept",
                report.cutoff,
                report.mu,
                report.sigma,
                report.removed.len(),
                report.kept.len()
            );
            Ok(())
        }
        Command::Reconstruct {
            io,
            mos_out,
            epsilon,
            max_iter,
        } => {
            let (table, kept) = load_input(&io)?;
            let table = table.restrict(&kept);
            let options = ReconstructOptions {
                epsilon,
                max_iter,
                ..ReconstructOptions::default()
            };
            let result = reconstruction::reconstruct(&table, &options)?;
            let dmos = reconstruction::compute_dmos(&result, table.questions())?;
            write_out(&io.out, |w| pipeline::write_dmos(&dmos, w))?;
            if let Some(path) = &mos_out {
                write_out(path, |w| pipeline::write_mos(&result, w))?;
            }
            println!(
                "{} iterations, converged = {}, {} stimuli",
                result.iterations,
                result.converged,
                dmos.dmos.len()
            );
            Ok(())
        }
        Command::Bootstrap {
            io,
            replicates,
            level,
            seed,
        } => {
            let (table, kept) = load_input(&io)?;
            let ci = reconstruction::bootstrap_ci(
                &table.restrict(&kept),
                &BootstrapOptions {
                    replicates,
                    level,
                    seed,
                    reconstruct: ReconstructOptions::default(),
                },
            )?;
            write_out(&io.out, |w| pipeline::write_ci(&ci, w))?;
            println!(
                "{} replicates, {} without convergence, {} intervals",
                ci.replicates,
                ci.nonconverged,
                ci.intervals.len()
            );
            Ok(())
        }
        Command::FitBeta { io, significance } => {
            let (table, kept) = load_input(&io)?;
            let fits = distfit::fit_all_questions(
                &table,
                &kept,
                &FitOptions {
                    significance,
                    ..FitOptions::default()
                },
            );
            write_out(&io.out, |w| pipeline::write_fits(&fits, w))?;
            match distfit::pass_rate(&fits) {
                Some(rate) => println!("{} fits, pass rate {:.1}%", fits.len(), 100.0 * rate),
                None => println!("{} fits, no completed goodness-of-fit test", fits.len()),
            }
            Ok(())
        }
        Command::Align {
            dmos,
            jnd,
            out,
            scatter_out,
            grouping,
        } => {
            let dmos = pipeline::read_dmos(&dmos)?;
            let jnd = JndTable::load(&jnd)?;
            let report = alignment::align(&dmos, &jnd, grouping.into())?;
            write_out(&out, |w| pipeline::write_alignment(&report, w))?;
            if let Some(path) = &scatter_out {
                write_out(path, |w| pipeline::write_scatter(&report, w))?;
            }
            for g in &report.groups {
                println!(
                    "{}: PLCC {:.3}  SROCC {:.3}  Kendall {:.3}  (n = {})",
                    g.group,
                    g.correlations.plcc,
                    g.correlations.srocc,
                    g.correlations.kendall_tau,
                    g.correlations.n
                );
            }
            Ok(())
        }
        Command::Run { manifest } => {
            let manifest = PipelineManifest::load(&manifest)?;
            let summary = pipeline::run_pipeline(&manifest)?;
            print!("{}", summary.to_text());
            println!("report bundle in {}", manifest.out_dir.display());
            Ok(())
        }
        Command::Report { bundle, format } => {
            let summary = pipeline::read_summary(&bundle)?;
            match format {
                ReportFormat::Text => print!("{}", summary.to_text()),
                ReportFormat::Json => {
                    let path = bundle.join(pipeline::SUMMARY_JSON);
                    print!("{}", std::fs::read_to_string(&path)?);
                }
            }
            Ok(())
        }
        Command::Serve {
            config,
            listen,
            log,
        } => {
            let config = StudyConfig::load(&config)?;
            let service = Arc::new(StudyService::open(config, &log, Arc::new(SystemClock))?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&listen)
                    .await
                    .with_context(|| format!("binding {listen}"))?;
                println!(
                    "serving study {} on {}",
                    service.config().study_id,
                    listener.local_addr()?
                );
                idsqs_service::http::serve(service, listener).await?;
                Ok(())
            })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        let mut message = e.to_string();
        for cause in e.chain().skip(1) {
            let text = cause.to_string();
            if !message.contains(&text) {
                message = format!("{message}: {text}");
            }
        }
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}
