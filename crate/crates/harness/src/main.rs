use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use clipseg_core::io::Checkpoint;
use clipseg_core::tracker::stitch_sequence;
use clipseg_harness::attndump::dump_attention;
use clipseg_harness::dataset::{list_sequences, load_sequence, load_truth, save_sequence, TRUTH_JSON};
use clipseg_harness::eval::{aggregate, evaluate_sequence, EvalTrack};
use clipseg_harness::gradsuite::{run_suite, SUITES};
use clipseg_harness::infer::infer_sequence;
use clipseg_harness::manifest::{load_clips, save_clips};
use clipseg_harness::synth::{generate_dataset, SyntheticSequence};
use clipseg_harness::trackfile::{load_tracks, save_tracks};
use clipseg_harness::train::Trainer;
use clipseg_harness::RunConfig;

#[derive(Parser)]
#[command(name = "clipseg", version, about = "Clip-level video instance segmentation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        Ok(RunConfig::load(text.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate synthetic sequences into `<out>/seqNNNN`.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences; defaults to `data.sequences`.
        #[arg(long)]
        count: Option<usize>,
        /// Index of the first sequence (sequences are seeded by index).
        #[arg(long, default_value_t = 0)]
        first: usize,
    },
    /// Train a model and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sequence directory or a directory of them; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss log file; defaults to `<out>/loss.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint (its configuration is used; `--set` still applies).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed iterations.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Run a checkpoint over sequences, writing clip manifests and tracks.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides of inference keys (`clip.stride`, `infer.top_k`, `stitch.*`).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Stitch clips from a clip manifest into a track file.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Path to a clip manifest.
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tracks against ground truth and write metrics JSON.
    Eval {
        /// A track file, or a directory holding `<sequence>/tracks.txt`.
        #[arg(long)]
        tracks: PathBuf,
        /// Sequence directory or a directory of them.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// Suites to run (default: all).
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// Write sampling locations and weights of one clip.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// First frame of the clip.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `(name, dir)` of one sequence directory or every sequence under a root.
fn sequence_dirs(data: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let dirs = if data.join(TRUTH_JSON).is_file() {
        vec![data.to_path_buf()]
    } else {
        list_sequences(data).with_context(|| format!("listing {}", data.display()))?
    };
    if dirs.is_empty() {
        bail!("no sequences under {}", data.display());
    }
    Ok(dirs
        .into_iter()
        .map(|d| {
            let name = d.file_name().map_or("sequence".into(), |n| n.to_string_lossy().into_owned());
            (name, d)
        })
        .collect())
}

fn load_checkpoint(path: &Path, overrides: &[String]) -> anyhow::Result<Trainer> {
    let mut ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    for o in overrides {
        let e = clipseg_harness::config::parse_override(o)?;
        ck.hyperparameters.insert(e.key, e.value);
    }
    Ok(Trainer::from_checkpoint(&ck)?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Config { cfg } => print!("{}", cfg.load()?.to_text()),
        Command::Gen { cfg, out, count, first } => {
            let cfg = cfg.load()?;
            let count = count.unwrap_or(cfg.data.sequences);
            for (i, seq) in generate_dataset(&cfg, first, count)?.iter().enumerate() {
                let dir = out.join(format!("seq{:04}", first + i));
                save_sequence(&dir, seq)?;
                println!("{} objects={}", dir.display(), seq.objects.len());
            }
        }
        Command::Train {
            cfg,
            data,
            out,
            log,
            resume,
            until,
        } => {
            let mut trainer = match &resume {
                Some(ck) => load_checkpoint(ck, &cfg.overrides)?,
                None => Trainer::new(cfg.load()?)?,
            };
            trainer.dump_dir = Some(out.clone());
            let sequences: Vec<SyntheticSequence> = match &data {
                Some(d) => sequence_dirs(d)?
                    .iter()
                    .map(|(_, p)| load_sequence(p))
                    .collect::<Result<_, _>>()?,
                None => generate_dataset(&trainer.cfg, 0, trainer.cfg.data.sequences)?,
            };
            std::fs::create_dir_all(&out)?;
            let log_path = log.unwrap_or_else(|| out.join("loss.log"));
            let mut lines = Vec::new();
            if resume.is_some() && log_path.is_file() {
                let text = std::fs::read_to_string(&log_path)?;
                lines.extend(text.lines().map(str::to_string));
            }
            let stop = until.unwrap_or(trainer.cfg.train.iterations);
            let result = trainer.run(&sequences, stop, |r| {
                println!("{r}");
                lines.push(r.to_string());
            });
            clipseg_harness::train::write_log(&log_path, &lines)?;
            result?;
            trainer.checkpoint().save(&out)?;
            println!("checkpoint {} at iteration {}", out.display(), trainer.iteration);
        }
        Command::Infer {
            checkpoint,
            data,
            out,
            overrides,
        } => {
            let trainer = load_checkpoint(&checkpoint, &overrides)?;
            for (name, dir) in sequence_dirs(&data)? {
                let seq = load_sequence(&dir)?;
                let res = infer_sequence(&trainer.model, &trainer.params, &seq, &trainer.cfg)?;
                let dest = out.join(&name);
                save_clips(&dest, &res.clips, seq.frames())?;
                let side = seq.truth.height;
                let tracks = save_tracks(&dest, &res.store, seq.frames(), side, seq.truth.width)?;
                println!("{name} clips={} tracks={}", res.clips.len(), tracks.tracks.len());
            }
        }
        Command::Track { cfg, clips, out } => {
            let cfg = cfg.load()?;
            let (manifest, results) = load_clips(&clips)?;
            let store = stitch_sequence(&results, &cfg.stitch)?;
            let file = save_tracks(&out, &store, manifest.frames, manifest.height, manifest.width)?;
            println!("tracks={}", file.tracks.len());
        }
        Command::Eval { tracks, data, out } => {
            let mut per = Vec::new();
            let seqs = sequence_dirs(&data)?;
            let single = seqs.len() == 1 && tracks.is_file();
            for (name, dir) in seqs {
                let path = if single { tracks.clone() } else { tracks.join(&name).join("tracks.txt") };
                let (file, masks) = load_tracks(&path).with_context(|| format!("reading {}", path.display()))?;
                let (_, gt) = load_truth(&dir)?;
                per.push(evaluate_sequence(&name, &EvalTrack::from_file(&file, &masks)?, &gt)?);
            }
            let metrics = aggregate(per);
            let json = serde_json::to_string_pretty(&metrics)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            eprintln!(
                "mean_iou={} association={} ap={}",
                metrics.mean_iou, metrics.association, metrics.ap
            );
        }
        Command::Gradcheck { suites } => {
            let names: Vec<String> = if suites.is_empty() {
                SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                suites
            };
            let mut failed = 0;
            for name in &names {
                let Some(res) = run_suite(name) else {
                    bail!("unknown suite {name:?}; known: {}", SUITES.join(", "));
                };
                let res = res?;
                failed += !res.passed as usize;
                println!("{res}");
            }
            if failed > 0 {
                bail!("{failed} gradient suite(s) failed");
            }
        }
        Command::AttnDump {
            checkpoint,
            data,
            start,
            out,
        } => {
            let trainer = load_checkpoint(&checkpoint, &[])?;
            let seq = load_sequence(&data)?;
            let input = seq.clip(start, trainer.cfg.model.frames)?;
            let (enc, dec) = dump_attention(&trainer.model, &trainer.params, &input, &out)?;
            println!("{} encoder and {} decoder layers written to {}", enc.len(), dec.len(), out.display());
        }
    }
    Ok(())
}
