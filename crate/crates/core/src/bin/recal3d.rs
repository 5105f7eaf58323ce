use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recal3d_core::blocks::BlockKind;
use recal3d_core::experiments::{compare, complexity_table, render_comparison, render_complexity};
use recal3d_core::metrics::write_csv;
use recal3d_core::suite::gradient_suite;
use recal3d_core::synth::{generate, PhantomSpec};
use recal3d_core::train::{evaluate_weights, train, write_outputs, TrainConfig};
use recal3d_core::volume_io::{save_volume, Volume};
use recal3d_core::{Error, Result};

#[derive(Parser)]
#[command(name = "recal3d", version, about = "Train and verify 3D feature-recalibration networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on synthetic phantoms and write its reports.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score saved weights on the test split of a config.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-class rows here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op, loss and block.
    Gradcheck {
        #[arg(long)]
        json: bool,
    },
    /// Parameter overhead of every block kind at every placement.
    Complexity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Generate one phantom as VOL3 image and label files.
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every block kind over several seeds and tabulate Dice.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// Comma-separated list from none, cse, sse, scse, cbam, pe.
        #[arg(long, value_delimiter = ',', default_value = "none,cse,sse,scse,cbam,pe", value_parser = parse_kind)]
        kinds: Vec<Kind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default training config as JSON.
    Defaults,
}

#[derive(Clone, Copy)]
struct Kind(Option<BlockKind>);

fn parse_kind(s: &str) -> std::result::Result<Kind, String> {
    if s == "none" {
        return Ok(Kind(None));
    }
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map(|k| Kind(Some(k)))
        .map_err(|_| format!("unknown block kind `{s}`"))
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, seed, epochs } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            let outcome = train(&cfg, |e| {
                println!("epoch {:3}  train {:.5}  val {:.5}  lr {:.0e}", e.epoch, e.train_loss, e.val_loss, e.lr)
            })?;
            write_outputs(&outcome, &dir)?;
            let r = &outcome.report;
            println!(
                "best epoch {}  foreground vol Dice {:.4}  surf Dice {:.4}  params {}  {:.1}s",
                r.best_epoch, r.mean_foreground_vol_dice, r.mean_foreground_surf_dice, r.params.total, r.wall_clock_seconds
            );
            println!("wrote {}", dir.display());
        }
        Command::Eval { weights, config, out } => {
            let cfg = load_config(config.as_ref())?;
            let report = evaluate_weights(&weights, &cfg)?;
            match out {
                Some(p) => write_csv(&report.rows, fs::File::create(p)?)?,
                None => write_csv(&report.rows, std::io::stdout().lock())?,
            }
            eprintln!(
                "foreground vol Dice {:.4}  surf Dice {:.4}",
                report.mean_foreground_vol_dice, report.mean_foreground_surf_dice
            );
        }
        Command::Gradcheck { json } => {
            let results = gradient_suite()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    let tag = if r.passed { "ok  " } else { "FAIL" };
                    println!("{tag} {:<24} {:.2e} (tol {:.0e})", r.name, r.max_rel_error, r.tol);
                }
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed for: {}", failed.join(", "));
                return Ok(false);
            }
        }
        Command::Complexity { config, json } => {
            let cfg = load_config(config.as_ref())?;
            let rows = complexity_table(&cfg.net)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", render_complexity(&rows));
            }
        }
        Command::Gen { spec, seed, out } => {
            let spec: PhantomSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => PhantomSpec::default(),
            };
            let p = generate(&spec, seed)?;
            fs::create_dir_all(&out)?;
            save_volume(out.join("image.vol3"), &Volume::Real(p.intensity.clone()))?;
            save_volume(out.join("labels.vol3"), &Volume::Labels(p.labels.clone()))?;
            let meta = serde_json::json!({
                "seed": seed,
                "class_counts": p.class_counts,
                "imbalance_ratio": p.imbalance_ratio(),
                "structures": p.structures,
                "spec": spec,
            });
            fs::write(out.join("phantom.json"), serde_json::to_string_pretty(&meta)?)?;
            println!("class counts {:?}  wrote {}", p.class_counts, out.display());
        }
        Command::Compare { config, seeds, kinds, out } => {
            let cfg = load_config(config.as_ref())?;
            let kinds: Vec<Option<BlockKind>> = kinds.into_iter().map(|k| k.0).collect();
            let rows = compare(&cfg, &kinds, &seeds, |kind, seed, e| {
                if e.epoch == cfg.epochs {
                    eprintln!("{} seed {seed}: done", kind.map_or("none", BlockKind::label));
                }
            })?;
            let table = render_comparison(&rows);
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&rows)?)?;
                fs::write(dir.join("comparison.md"), table)?;
            }
        }
        Command::Defaults => println!("{}", serde_json::to_string_pretty(&TrainConfig::default())?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Json(_) => 2,
                _ => 1,
            })
        }
    }
}
