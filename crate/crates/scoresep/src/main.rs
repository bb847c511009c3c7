//! Command-line front end for the separation pipeline.

use clap::{Args, Parser, Subcommand, ValueEnum};
use scoresep::{autoencoder, checkpoint, evaluation, nmf, score, separation, signal};
use scoresep::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "scoresep", version, about = "Score-informed source separation")]
struct Cli {
    /// Master seed; every random draw (init, synthesis timbre) derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads; 0 picks the machine default, 1 forces single-threaded.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a note list to a mixture WAV plus per-group ground-truth stems.
    Synthesize {
        /// Note list CSV: instrument,pitch,onset,offset[,group].
        #[arg(long)]
        notes: PathBuf,
        /// Output directory: mixture.wav plus stems/<group>.wav.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = signal::DEFAULT_SAMPLE_RATE)]
        sample_rate: u32,
    },
    /// Train an autoencoder (methods B, C, D) on one mixture and its notes.
    Train {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        notes: PathBuf,
        /// B: plain; C: non-negative decoder; D: C plus multi-frame input.
        #[arg(long)]
        method: MethodArg,
        /// Output model file.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        labels: LabelArgs,
        /// Comma-separated encoder hidden layer widths.
        #[arg(long, default_value = "64,64")]
        encoder_hidden: String,
        /// Comma-separated decoder hidden layer widths; empty for a single
        /// output layer.
        #[arg(long, default_value = "")]
        decoder_hidden: String,
        /// Context frames on each side for method D.
        #[arg(long, default_value_t = 2)]
        context: usize,
        #[arg(long, default_value_t = autoencoder::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = autoencoder::DEFAULT_STAGE1_ITERS)]
        stage1_iters: usize,
        #[arg(long, default_value_t = autoencoder::DEFAULT_STAGE2_ITERS)]
        stage2_iters: usize,
        #[arg(long, default_value_t = autoencoder::DEFAULT_STEP_SIZE)]
        step_size: f64,
        /// Stage-2 ADAM step; defaults to a tenth of --step-size.
        #[arg(long)]
        stage2_step_size: Option<f64>,
        /// KL smoothing used in the training objectives.
        #[arg(long, default_value_t = autoencoder::DEFAULT_TRAINING_EPS_KL)]
        eps_kl: f64,
    },
    /// Train the zero-constrained NMF baseline (method A).
    TrainNmf {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        notes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        labels: LabelArgs,
        #[arg(long, default_value_t = nmf::DEFAULT_ITERS)]
        iters: usize,
    },
    /// Separate a mixture into per-group stems with a trained model.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        notes: PathBuf,
        /// Output directory for <group>.wav and residual.wav.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        labels: LabelArgs,
        #[arg(long, value_enum, default_value_t = DenominatorArg::Sum)]
        denominator: DenominatorArg,
        #[arg(long, default_value_t = separation::DEFAULT_EPS_MASK)]
        eps_mask: f64,
    },
    /// Score estimated stems against references: SDR and NSDR per stem.
    Evaluate {
        /// Directory of reference stem WAVs.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of estimated stems; filenames must match the references.
        #[arg(long = "est")]
        estimate: PathBuf,
        /// The unprocessed mixture, the NSDR baseline.
        #[arg(long)]
        mix: PathBuf,
        /// Optional CSV report path; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a multi-piece, multi-method comparison from a JSON config.
    Experiment {
        /// JSON file: {"pieces": [...], "methods": [...], "config": {...}}.
        /// A piece is "toy1".."toy3" or a note CSV path; config keys follow
        /// the documented experiment schema and default when omitted.
        #[arg(long)]
        config: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AnalysisArgs {
    /// STFT window length (power of two).
    #[arg(long, default_value_t = signal::DEFAULT_WINDOW_LEN)]
    window_len: usize,
    /// STFT hop in samples.
    #[arg(long, default_value_t = signal::DEFAULT_HOP)]
    hop: usize,
}

#[derive(Args)]
struct LabelArgs {
    /// Representation units per (instrument, pitch) class, onset unit included.
    #[arg(long, default_value_t = 2)]
    units_per_class: usize,
    /// Unlabeled units that stay active in training and feed the residual.
    #[arg(long, default_value_t = 2)]
    free_units: usize,
    /// Seconds around each onset where the onset unit may be active.
    #[arg(long, default_value_t = score::DEFAULT_ONSET_TOLERANCE)]
    onset_tolerance: f64,
    /// Seconds of slack around the sustain interval.
    #[arg(long, default_value_t = score::DEFAULT_SUSTAIN_TOLERANCE)]
    sustain_tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    B,
    C,
    D,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    /// Sum of group magnitudes; stems partition the mixture.
    Sum,
    /// Full-label forward-pass output.
    Full,
}

fn parse_widths(spec: &str, flag: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("{flag}: bad layer width '{s}'")))
        })
        .collect()
}

fn load_analysis(
    audio: &Path,
    notes_path: &Path,
    analysis: &AnalysisArgs,
    labels: &LabelArgs,
) -> Result<(
    signal::ComplexSpectrogram,
    scoresep::numerics::Matrix,
    Vec<score::NoteEvent>,
    score::LabelMatrix,
)> {
    let clip = signal::read_wav(audio)?;
    let x = signal::stft(&clip, analysis.window_len, analysis.hop)?;
    let v = signal::magnitude(&x);
    let notes = score::load_notes(notes_path)?;
    let assignment = score::build_assignment(&notes, labels.units_per_class, labels.free_units)?;
    let label_matrix = score::build_label_matrix(
        &notes,
        &assignment,
        x.frames(),
        x.hop_seconds(),
        labels.onset_tolerance,
        labels.sustain_tolerance,
    )?;
    Ok((x, v, notes, label_matrix))
}

fn write_stems(out: &Path, stems: &[separation::Stem]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for stem in stems {
        let path = out.join(format!("{}.wav", stem.name));
        let clipped = signal::write_wav(&path, &stem.clip)?;
        if clipped > 0 {
            eprintln!("warning: {} samples clipped in {}", clipped, path.display());
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ExperimentFile {
    pieces: Vec<String>,
    methods: Vec<String>,
    #[serde(default)]
    config: evaluation::ExperimentConfig,
}

fn load_piece(spec: &str) -> Result<evaluation::Piece> {
    if let Some(idx) = spec
        .strip_prefix("toy")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| (1..=3).contains(&i))
    {
        return Ok(evaluation::Piece {
            name: spec.to_string(),
            notes: evaluation::toy_piece(idx),
        });
    }
    let path = Path::new(spec);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok(evaluation::Piece {
        name,
        notes: score::load_notes(path)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize {
            notes,
            out,
            sample_rate,
        } => {
            let notes = score::load_notes(&notes)?;
            let groups = score::group_by_tag(&notes);
            let config = evaluation::SynthConfig {
                sample_rate,
                timbre_seed: cli.seed,
                ..Default::default()
            };
            let rendered = evaluation::synthesize(&notes, &groups, &config)?;
            let stems_dir = out.join("stems");
            std::fs::create_dir_all(&stems_dir).map_err(|e| Error::io(&stems_dir, e))?;
            let mix_path = out.join("mixture.wav");
            signal::write_wav(&mix_path, &rendered.mixture)?;
            println!("wrote {}", mix_path.display());
            for (name, clip) in &rendered.stems {
                let path = stems_dir.join(format!("{name}.wav"));
                signal::write_wav(&path, clip)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Train {
            audio,
            notes,
            method,
            model,
            analysis,
            labels,
            encoder_hidden,
            decoder_hidden,
            context,
            lambda,
            stage1_iters,
            stage2_iters,
            step_size,
            stage2_step_size,
            eps_kl,
        } => {
            let (_, v, _, label_matrix) = load_analysis(&audio, &notes, &analysis, &labels)?;
            let encoder_hidden = parse_widths(&encoder_hidden, "--encoder-hidden")?;
            let decoder_hidden = parse_widths(&decoder_hidden, "--decoder-hidden")?;
            let context = match method {
                MethodArg::D => context,
                _ => 0,
            };
            let nonneg = matches!(method, MethodArg::C | MethodArg::D);
            let mut net = autoencoder::init_model(
                v.rows(),
                label_matrix.units(),
                context,
                &encoder_hidden,
                &decoder_hidden,
                nonneg,
                eps_kl,
                cli.seed,
            )?;
            autoencoder::revive_dead_units(&mut net, &v, 0.1)?;
            let config = autoencoder::TrainConfig {
                stage1_iters,
                stage2_iters,
                lambda,
                step_size,
                stage2_step_size: Some(stage2_step_size.unwrap_or(step_size / 10.0)),
                loss_tolerance: autoencoder::DEFAULT_LOSS_TOLERANCE,
                seed: cli.seed,
            };
            let trace = autoencoder::train(&mut net, &v, &label_matrix.matrix, &config)?;
            let final_loss = trace
                .stage2
                .last()
                .or_else(|| trace.stage1.last())
                .copied()
                .unwrap_or(f64::NAN);
            checkpoint::save(&model, &checkpoint::Checkpoint::Autoencoder(net))?;
            println!(
                "trained {} iterations, final loss {final_loss:.6e}, wrote {}",
                trace.stage1.len() + trace.stage2.len(),
                model.display()
            );
        }
        Command::TrainNmf {
            audio,
            notes,
            model,
            analysis,
            labels,
            iters,
        } => {
            let (_, v, _, label_matrix) = load_analysis(&audio, &notes, &analysis, &labels)?;
            let mut net = nmf::nmf_init(&v, &label_matrix, cli.seed)?;
            let trace = nmf::nmf_train(&mut net, &v, iters, nmf::DEFAULT_TOLERANCE)?;
            let final_div = trace.last().copied().unwrap_or(f64::NAN);
            checkpoint::save(&model, &checkpoint::Checkpoint::Nmf(net))?;
            println!(
                "trained {} updates, final divergence {final_div:.6e}, wrote {}",
                trace.len(),
                model.display()
            );
        }
        Command::Separate {
            model,
            audio,
            notes,
            out,
            analysis,
            labels,
            denominator,
            eps_mask,
        } => {
            let (x, v, note_list, label_matrix) = load_analysis(&audio, &notes, &analysis, &labels)?;
            let request = separation::SeparationRequest {
                groups: score::group_by_tag(&note_list),
                mask_denominator: match denominator {
                    DenominatorArg::Sum => separation::MaskDenominator::SumOfGroups,
                    DenominatorArg::Full => separation::MaskDenominator::FullLabelOutput,
                },
                eps_mask,
                onset_tolerance: labels.onset_tolerance,
                sustain_tolerance: labels.sustain_tolerance,
            };
            let stems = match checkpoint::load(&model)? {
                checkpoint::Checkpoint::Autoencoder(net) => {
                    if net.k != label_matrix.units() {
                        return Err(Error::ShapeMismatch {
                            context: "separate: model representation size vs label rows".into(),
                            expected: format!("{} units", net.k),
                            got: format!("{} units", label_matrix.units()),
                        });
                    }
                    separation::separate(&net, &v, &x, &label_matrix, &note_list, &request)?
                }
                checkpoint::Checkpoint::Nmf(net) => {
                    if net.h.rows() != label_matrix.units() {
                        return Err(Error::ShapeMismatch {
                            context: "separate: model component count vs label rows".into(),
                            expected: format!("{} components", net.h.rows()),
                            got: format!("{} units", label_matrix.units()),
                        });
                    }
                    nmf::nmf_separate(&net, &label_matrix, &note_list, &x, &request)?
                }
            };
            write_stems(&out, &stems)?;
        }
        Command::Evaluate {
            reference,
            estimate,
            mix,
            out,
        } => {
            let mixture = signal::read_wav(&mix)?;
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&reference)
                .map_err(|e| Error::io(&reference, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "wav"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no reference stems (*.wav) in {}",
                    reference.display()
                )));
            }
            let mut csv = String::from("stem,sdr_db,nsdr_db\n");
            println!("{:<16} {:>10} {:>10}", "stem", "SDR dB", "NSDR dB");
            for ref_path in entries {
                let name = ref_path.file_name().unwrap().to_string_lossy().into_owned();
                let est_path = estimate.join(&name);
                let ref_clip = signal::read_wav(&ref_path)?;
                let est_clip = signal::read_wav(&est_path)?;
                let sdr_db = evaluation::sdr(&ref_clip, &est_clip)?;
                let nsdr_db = evaluation::nsdr(&ref_clip, &est_clip, &mixture)?;
                println!("{:<16} {:>10.2} {:>10.2}", name, sdr_db, nsdr_db);
                csv.push_str(&format!("{name},{sdr_db:.6},{nsdr_db:.6}\n"));
            }
            if let Some(out) = out {
                std::fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
                println!("wrote {}", out.display());
            }
        }
        Command::Experiment { config, out_csv } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let file: ExperimentFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: config.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            let pieces: Vec<evaluation::Piece> = file
                .pieces
                .iter()
                .map(|s| load_piece(s))
                .collect::<Result<_>>()?;
            let methods: Vec<evaluation::Method> = file
                .methods
                .iter()
                .map(|s| evaluation::Method::parse(s))
                .collect::<Result<_>>()?;
            let mut exp_config = file.config;
            exp_config.seed = cli.seed;
            let reports = evaluation::run_experiment(&pieces, &methods, &exp_config);
            print!("{}", evaluation::reports_to_table(&reports));
            if let Some(out) = out_csv {
                std::fs::write(&out, evaluation::reports_to_csv(&reports))
                    .map_err(|e| Error::io(&out, e))?;
                println!("wrote {}", out.display());
            }
            if reports.iter().any(|r| r.failed) {
                return Err(Error::InvalidArgument("one or more runs failed".into()));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore the error when a pool already exists (tests set one up).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
