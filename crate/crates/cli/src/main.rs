//! Command-line front end for circuit-targeted fine-tuning experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ctsft::circuit::{control_selection, discover, topology, Circuit, DiscoveryConfig};
use ctsft::corpus::{read_dataset, Phase};
use ctsft::faithfulness::faithfulness_report;
use ctsft::harness::{
    analysis_pool, forgetting_report, iteration0_stability, means_and_inputs, prepare, read_rows, run_experiment,
    seed_mean, theta1, write_data, ExperimentConfig,
};
use ctsft::model::{load_checkpoint, save_checkpoint};
use ctsft::scoring::ScoringRule;
use ctsft::tuning::{ct_sft, evaluate, HeadMask, Scope, TrainConfig};

#[derive(Parser)]
#[command(name = "ctsft", version, about = "Circuit-targeted supervised fine-tuning on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the built-in hard-transfer config as TOML.
    Preset,
    /// Generate every language and write its pools as TSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Competence-tune a fresh model on the source language.
    CompetenceTune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover a circuit on the competence-tuned model.
    Discover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "directional")]
        rule: ScoringRule,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = ctsft::circuit::DEFAULT_MAX_DEPTH)]
        max_depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the competence checkpoint on one target language.
    CtSft {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Target language id.
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "circuit")]
        scope: Scope,
        /// Circuit file; required unless the scope is `full`.
        #[arg(long)]
        circuit: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and mean margin of a checkpoint on a TSV dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Mean-ablation faithfulness of a circuit on the source validation pool.
    Faithfulness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        circuit: PathBuf,
        /// Truncate the circuit to this depth first.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole grid and write results.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the iteration-0 stability comparison instead of the grid.
        #[arg(long)]
        stability: bool,
    },
    /// Summarise a results.csv.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Preset => print!("{}", ExperimentConfig::hard_transfer().to_toml()),
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            for p in write_data(&prepared, &out)? {
                println!("{}", p.display());
            }
        }
        Command::CompetenceTune { config, seed, out } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            let params = theta1(&cfg, &prepared, seed, &out)?;
            let src = evaluate(&params, prepared.source.1.test(Phase::Evaluation)?)?;
            println!("checkpoint {}", out.join("theta1.manifest").display());
            println!("hash {}", params.hash());
            println!("source_accuracy {:.4}", src.accuracy);
            for (lc, _, pools) in &prepared.targets {
                let r = evaluate(&params, pools.test(Phase::Evaluation)?)?;
                println!("target_accuracy[{}] {:.4}", lc.id, r.accuracy);
            }
        }
        Command::Discover { config, seed, rule, p, max_depth, out } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            let params = theta1(&cfg, &prepared, seed, &out)?;
            let pool = analysis_pool(&cfg, &prepared.source.1, cfg.discovery_pool);
            let (means, inputs) = means_and_inputs(&cfg, &params, pool, seed, &out)?;
            let dc = DiscoveryConfig::new(rule, p, max_depth);
            let circuit = discover(&params, &means, &inputs, &dc)?;
            let path = out.join(format!("circuit-{rule}-p{p}.circuit"));
            circuit.save(&path)?;
            circuit.relevance_table().dump(&out.join(format!("relevance-{rule}-p{p}")))?;
            for d in &circuit.depths {
                let heads: Vec<String> = d.heads.iter().map(|(h, s)| format!("{h}={s:.4}")).collect();
                println!("depth {}: {}", d.depth, heads.join(" "));
            }
            println!("stop: {}", circuit.stop_reason.as_deref().unwrap_or("max depth reached"));
            let topo = topology(&circuit, prepared.model.n_layers);
            println!("layers: {:?}", topo.union());
            println!("circuit {}", path.display());
        }
        Command::CtSft { config, seed, target, scope, circuit, n, out } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            let Some((_, _, pools)) = prepared.targets.iter().find(|(lc, _, _)| lc.id == target) else {
                bail!("unknown target language `{target}`");
            };
            let start = theta1(&cfg, &prepared, seed, &out)?;
            let tc = TrainConfig { seed, ..cfg.tuning.clone() };
            let (mask, prov) = match (scope, circuit) {
                (Scope::Full, _) => (HeadMask::full(&start), None),
                (_, None) => bail!("scope `{scope}` needs --circuit"),
                (scope, Some(path)) => {
                    let c = Circuit::load(&path)?;
                    if c.provenance.checkpoint_hash != start.hash() {
                        bail!("circuit {} was discovered on a different checkpoint", path.display());
                    }
                    let heads = match scope.control() {
                        None => c.heads(),
                        Some(kind) => control_selection(kind, &c.relevance_table(), c.len(), seed)?,
                    };
                    (HeadMask::surgical(&start, scope, &heads, tc.include_final_norm)?, Some(c.provenance.clone()))
                }
            };
            if n > pools.heldout_tuning().len() {
                bail!("n = {n} exceeds the held-out tuning pool");
            }
            let (after, record) = ct_sft(&start, &mask, &pools.heldout_tuning()[..n], prov, &tc)?;
            let dir = out.join(format!("{target}-{scope}-n{n}"));
            std::fs::create_dir_all(&dir)?;
            save_checkpoint(&after, &dir.join("checkpoint.manifest"))?;
            record.save(&dir.join("record.run"))?;
            let tgt = evaluate(&after, pools.test(Phase::Evaluation)?)?;
            let src = evaluate(&after, prepared.source.1.test(Phase::Evaluation)?)?;
            let before = evaluate(&start, prepared.source.1.test(Phase::Evaluation)?)?;
            println!("trainable_fraction {:.6}", record.trainable_fraction());
            println!("target_accuracy {:.4}", tgt.accuracy);
            println!("source_accuracy {:.4}", src.accuracy);
            println!("source_delta {:+.4}", src.accuracy - before.accuracy);
            println!("checkpoint {}", dir.join("checkpoint.manifest").display());
        }
        Command::Evaluate { checkpoint, data } => {
            let params = load_checkpoint(&checkpoint)?;
            let examples = read_dataset(&data)?;
            let r = evaluate(&params, &examples)?;
            println!("n {}", r.n);
            println!("accuracy {:.4}", r.accuracy);
            println!("mean_margin {:.4}", r.mean_margin);
            for (c, m) in r.per_class.iter().enumerate() {
                println!("class {c}: support {} correct {} predicted {}", m.support, m.correct, m.predicted);
            }
        }
        Command::Faithfulness { config, seed, circuit, depth, out } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            let params = theta1(&cfg, &prepared, seed, &out)?;
            let mut c = Circuit::load(&circuit)?;
            if let Some(d) = depth {
                c = c.truncated(d);
            }
            let pool = analysis_pool(&cfg, &prepared.source.1, cfg.discovery_pool);
            let (means, _) = means_and_inputs(&cfg, &params, pool, seed, &out)?;
            if means.set_hash != c.provenance.means_hash {
                log::warn!("circuit was discovered with a different mean set");
            }
            let r = faithfulness_report(&params, &means, &c.heads(), prepared.source.1.validation())?;
            println!("circuit_size {}", r.circuit_size);
            println!("accuracy_faithfulness {:.4}", r.accuracy);
            println!("margin_faithfulness {:.4} (skipped {})", r.margin.value, r.margin.skipped);
            if let Some(g) = r.gold_accuracy_ratio {
                println!("gold_accuracy_ratio {g:.4}");
            }
        }
        Command::Sweep { config, out, stability } => {
            let cfg = load_config(&config)?;
            if stability {
                let rep = iteration0_stability(&cfg, &out)?;
                for r in &rep.rows {
                    println!("seed {} {}: L{}H{} score {:.4}", r.seed, r.mode.as_str(), r.layer, r.head, r.score);
                }
                for s in &rep.summary {
                    println!(
                        "{}: layers {}..={} mean score {:.4}",
                        s.mode.as_str(),
                        s.min_layer,
                        s.max_layer,
                        s.mean_score
                    );
                }
                return Ok(ExitCode::SUCCESS);
            }
            let summary = run_experiment(&cfg, &out)?;
            println!("{} rows -> {}", summary.rows.len(), summary.csv.display());
            if summary.failed_cells > 0 {
                eprintln!("{} cell(s) failed", summary.failed_cells);
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { results } => {
            let rows = read_rows(&results)?;
            if let Some(a) = seed_mean(&rows, "source_accuracy", |r| r.phase == "competence") {
                println!("competence source accuracy {a:.4}");
            }
            println!("target\tscope\trule\tp\tdepth\tn\tseeds\ttarget_acc\tsource_acc\tsource_delta");
            for r in forgetting_report(&rows)? {
                let tgt = seed_mean(&rows, "target_accuracy", |x| {
                    x.phase == "transfer"
                        && x.target_lang.as_deref() == Some(&r.target_lang)
                        && x.scope.as_deref() == Some(&r.scope)
                        && x.rule == r.rule
                        && x.p == r.p
                        && x.depth == r.depth
                        && x.n == Some(r.n)
                });
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:+.4}",
                    r.target_lang,
                    r.scope,
                    r.rule.as_deref().unwrap_or("-"),
                    r.p.map_or("-".into(), |p| p.to_string()),
                    r.depth.map_or("-".into(), |d| d.to_string()),
                    r.n,
                    r.seeds,
                    tgt.unwrap_or(f64::NAN),
                    r.mean_source_accuracy,
                    r.mean_delta
                );
            }
            let failed = rows.iter().filter(|r| r.metric == "failed").count();
            if failed > 0 {
                println!("failed cells: {failed}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
