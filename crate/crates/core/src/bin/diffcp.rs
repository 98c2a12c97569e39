use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffcp::checkpoint::Checkpoint;
use diffcp::config::{RunConfig, Seeds};
use diffcp::container;
use diffcp::dataset;
use diffcp::denoiser::distill_init;
use diffcp::downstream::{self, DetectorConfig, DownstreamOptions, Regime};
use diffcp::eval::{self, GridReport};
use diffcp::recon::{self, Codec, ReconOptions};
use diffcp::train::{self, TrainEvent};
use diffcp::wire;

/// Environment variable capping the worker-thread count.
const THREADS_ENV: &str = "DIFFCP_THREADS";

#[derive(Parser)]
#[command(name = "diffcp", version, about = "Semantic-vector BEV feature reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (key=value lines); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of scene pairs.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train a model, or fine-tune a shorter semantic vector from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint's weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// With --init: re-initialize the bottleneck for this length and
        /// fine-tune for eval.finetune_fraction of the step budget.
        #[arg(long = "semantic-len")]
        semantic_len: Option<usize>,
    },
    /// Reconstruct one stored pair and dump the payload.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Attach this many top-K elements to the payload.
        #[arg(long)]
        topk: Option<usize>,
        /// Use these payload bytes instead of transmitting from the pair.
        #[arg(long)]
        payload: Option<PathBuf>,
    },
    /// MSE grid over semantic lengths and sampling steps.
    EvalGrid {
        #[command(flatten)]
        common: Common,
        /// `L=path` per semantic length.
        #[arg(long = "checkpoint", value_parser = parse_len_path, required = true)]
        checkpoints: Vec<(usize, PathBuf)>,
    },
    /// Toy detection under different collaboration regimes.
    EvalDownstream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "no-collab,recon,recon+topk,topk-only,oracle")]
        regimes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Print the data rate of semantic sections.
    Rates {
        #[command(flatten)]
        common: Common,
        #[arg(long = "L", value_delimiter = ',', default_value = "512,256,128,64,32,16")]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 10.0)]
        hz: f64,
        /// Also print the rate of a top-K section with this many entries.
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Render plots from CSV reports in the output directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_len_path(s: &str) -> Result<(usize, PathBuf), String> {
    let (l, p) = s.split_once('=').ok_or_else(|| format!("expected L=path, got {s:?}"))?;
    Ok((l.parse().map_err(|_| format!("bad length {l:?}"))?, PathBuf::from(p)))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_codec(path: &Path) -> Result<Codec> {
    let ck = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(Codec::from_checkpoint(&ck)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, count } => {
            let cfg = load_config(&common)?;
            dataset::write_dataset(&common.out, &cfg.generator, cfg.seeds.data, count)?;
            println!("wrote {count} pairs to {}", common.out.display());
        }
        Command::Train { common, init, semantic_len } => {
            let mut cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let start = match (init, semantic_len) {
                (Some(p), Some(l)) => {
                    let source = Checkpoint::load(&p).with_context(|| format!("checkpoint {}", p.display()))?;
                    let model = distill_init(&source.model, l, &mut ChaCha8Rng::seed_from_u64(cfg.seeds.init))?;
                    cfg.model = model.config.clone();
                    cfg.eval.semantic_lens.retain(|&x| x <= l);
                    cfg.optim.steps = (cfg.optim.steps as f64 * cfg.eval.finetune_fraction).round() as usize;
                    Some(model)
                }
                (Some(p), None) => Some(Checkpoint::load(&p).with_context(|| format!("checkpoint {}", p.display()))?.model),
                (None, Some(_)) => bail!("--semantic-len requires --init"),
                (None, None) => None,
            };
            std::fs::write(common.out.join("run.conf"), cfg.to_kv())?;
            let out = common.out.clone();
            let schedule = cfg.schedule;
            let mut save_err = None;
            let (ck, log) = train::train(&cfg, start, &mut |e| match e {
                TrainEvent::Step(r) if r.step % 50 == 0 => {
                    eprintln!("step {:>6} loss {:.5} simple {:.5} vlb {:.5}", r.step, r.loss.total, r.loss.simple, r.loss.vlb)
                }
                TrainEvent::Validation(v, model) => {
                    eprintln!("validation step {} simple {:.5} mse {:.6}", v.step, v.simple, v.mse);
                    let ck = Checkpoint::new(model.clone(), schedule, v.step as u64);
                    if let Err(e) = ck.save(out.join(format!("checkpoint_{:06}.ckpt", v.step))) {
                        save_err = Some(e);
                    }
                }
                _ => {}
            })?;
            if let Some(e) = save_err {
                return Err(e.into());
            }
            ck.save(common.out.join("model.ckpt"))?;
            std::fs::write(common.out.join("train_log.csv"), log.steps_csv())?;
            std::fs::write(common.out.join("val_log.csv"), log.val_csv())?;
            println!("trained {} steps; checkpoint {}", ck.step, common.out.join("model.ckpt").display());
        }
        Command::Reconstruct { common, checkpoint, data, index, steps, topk, payload } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let codec = load_codec(&checkpoint)?;
            let pair = dataset::read_pair(&data, index)?;
            let bytes = match payload {
                Some(p) => std::fs::read(&p).with_context(|| format!("payload {}", p.display()))?,
                None => recon::transmit(&codec, &pair.co, pair.delta, topk)?,
            };
            std::fs::write(common.out.join("payload.bin"), &bytes)?;
            std::fs::write(common.out.join("payload.hex"), wire::hex_dump(&bytes))?;
            let opts = ReconOptions::new(steps, cfg.seeds.eval).with_clip(cfg.eval.x0_clip);
            let out = recon::reconstruct(&codec, &pair.ego, &bytes, &opts)?;
            container::write_tensor(common.out.join("recon.bev"), &out.data)?;
            println!(
                "payload {} bytes; mse {:.6} (ego copy {:.6})",
                bytes.len(),
                eval::mse(&out.data, &pair.co.data),
                eval::mse(&pair.ego.data, &pair.co.data)
            );
        }
        Command::EvalGrid { common, checkpoints } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let mut codecs = BTreeMap::new();
            let mut lens = Vec::new();
            for (l, p) in checkpoints {
                let codec = load_codec(&p)?;
                if codec.model.config.semantic_len != l {
                    bail!("{} holds L={}, not {l}", p.display(), codec.model.config.semantic_len);
                }
                codecs.insert(l, codec);
                lens.push(l);
            }
            let pairs = eval::held_out_pairs(&cfg.generator, cfg.seeds.eval, cfg.eval.eval_pairs)?;
            let grid = eval::eval_grid(&codecs, &lens, &cfg.eval.steps_list, &pairs, cfg.eval.hz, cfg.eval.x0_clip, cfg.seeds.eval)?;
            std::fs::write(common.out.join("grid.csv"), grid.to_csv())?;
            grid.plot_svg(&common.out.join("grid.svg"))?;
            print!("{}", grid.to_csv());
        }
        Command::EvalDownstream { common, checkpoint, regimes, steps } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let regimes = regimes.iter().map(|r| r.parse::<Regime>()).collect::<Result<Vec<_>, _>>()?;
            let codec = load_codec(&checkpoint)?;
            let pairs = eval::held_out_pairs(&cfg.generator, cfg.seeds.eval, cfg.eval.downstream_scenes)?;
            let opts = DownstreamOptions {
                detector: DetectorConfig { threshold: cfg.eval.detect_threshold, match_radius: cfg.eval.match_radius },
                topk: cfg.eval.topk,
                steps,
                clip: cfg.eval.x0_clip,
                seed: cfg.seeds.eval,
            };
            let rep = downstream::eval_downstream(&codec, &pairs, &regimes, &opts)?;
            std::fs::write(common.out.join("downstream.csv"), rep.to_csv())?;
            print!("{}", rep.to_csv());
        }
        Command::Rates { common, lens, hz, topk } => {
            if common.config.is_some() {
                load_config(&common)?;
            }
            let mut csv = String::from("section,bytes,kibps\n");
            for l in lens {
                let bytes = wire::semantic_section_len(l);
                let r = wire::compute_rate(bytes, hz)?;
                println!("L={l}\t{r}");
                csv += &format!("semantic_L{l},{bytes},{r}\n");
            }
            if let Some(k) = topk {
                let bytes = wire::topk_entries_len(k);
                let r = wire::compute_rate(bytes, hz)?;
                println!("topk={k}\t{r}");
                csv += &format!("topk_{k},{bytes},{r}\n");
            }
            if common.out != Path::new("out") || common.out.exists() {
                prepare_out(&common.out)?;
                std::fs::write(common.out.join("rates.csv"), csv)?;
            }
        }
        Command::Report { common } => {
            let dir = &common.out;
            let mut rendered = 0;
            let grid_csv = dir.join("grid.csv");
            if grid_csv.exists() {
                GridReport::from_csv(&std::fs::read_to_string(&grid_csv)?)?.plot_svg(&dir.join("grid.svg"))?;
                rendered += 1;
            }
            let train_csv = dir.join("train_log.csv");
            if train_csv.exists() {
                let mut series = vec![("train simple".to_string(), read_xy(&train_csv, 2)?)];
                let val_csv = dir.join("val_log.csv");
                if val_csv.exists() {
                    series.push(("validation simple".to_string(), read_xy(&val_csv, 1)?));
                    series.push(("validation mse".to_string(), read_xy(&val_csv, 2)?));
                }
                eval::plot_curves(&dir.join("loss.svg"), "training curves", "step", &series)?;
                rendered += 1;
            }
            if rendered == 0 {
                bail!("no grid.csv or train_log.csv in {}", dir.display());
            }
            println!("rendered {rendered} plot(s) in {}", dir.display());
        }
    }
    Ok(())
}

/// Column `col` against column 0 of a numeric CSV with a header row.
fn read_xy(path: &Path, col: usize) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let x = f.first().and_then(|v| v.parse().ok());
            let y = f.get(col).and_then(|v| v.parse().ok());
            x.zip(y).with_context(|| format!("{}: malformed row {l:?}", path.display()))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
