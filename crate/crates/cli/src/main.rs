mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use log::info;
use unlearn_core::config::RunConfig;
use unlearn_core::eval::{render_scores, run_id, sweep_csv, write_report, EditPlan, Pipeline, Scenario};
use unlearn_core::persistence::{load_model, save_discriminated, save_model, save_subspace};
use unlearn_core::subspace::similarity;
use unlearn_core::tasks::TaskKind;
use unlearn_core::Error;

use settings::{PathOverrides, SettingsError};

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Task-subspace editing for small transformers")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.k=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Where cached checkpoints and subspaces live.
    #[arg(long, global = true, env = "UNLEARN_ARTIFACT_DIR", value_name = "DIR")]
    artifact_dir: Option<PathBuf>,
    /// Parent directory of per-run output directories.
    #[arg(long, global = true, env = "UNLEARN_RUN_DIR", value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Fail instead of training when a cached artifact is missing.
    #[arg(long, global = true)]
    cached_only: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the base model.
    Pretrain {
        /// Leave this task out of the pretraining mixture.
        #[arg(long, value_parser = parse_task)]
        holdout: Option<TaskKind>,
    },
    /// Identify a task's subspace on the base model.
    Identify {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_task)]
        holdout: Option<TaskKind>,
    },
    /// Remove other tasks' directions from a target subspace.
    Discriminate {
        #[arg(long, value_parser = parse_task)]
        target: TaskKind,
        /// Comma-separated. Defaults to every other suite task.
        #[arg(long, value_parser = parse_task, value_delimiter = ',')]
        others: Option<Vec<TaskKind>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_task)]
        holdout: Option<TaskKind>,
    },
    /// Subtract a target task's subspace from the base model.
    Unlearn {
        /// Defaults to the configured similar-pair target.
        #[arg(long, value_parser = parse_task)]
        target: Option<TaskKind>,
        /// Comma-separated. Defaults to the configured similar tasks for the
        /// similar-pair target and to every other task otherwise.
        #[arg(long, value_parser = parse_task, value_delimiter = ',')]
        others: Option<Vec<TaskKind>>,
        #[arg(long)]
        no_discrimination: bool,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Add a held-out task's subspace to a base model trained without it.
    Learn {
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        no_discrimination: bool,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Gradient-ascent unlearning baseline.
    GaBaseline {
        #[arg(long, value_parser = parse_task)]
        target: Option<TaskKind>,
    },
    /// Run scenarios, or score a saved checkpoint against the base model.
    Eval {
        /// Comma-separated scenario names. Defaults to all.
        #[arg(long, value_parser = parse_scenario, value_delimiter = ',', conflicts_with = "model")]
        scenario: Vec<Scenario>,
        /// Checkpoint to score, e.g. the `model.usub` of an unlearn run.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Similar-pair unlearning at several ranks.
    Sweep {
        /// Comma-separated ranks. Defaults to `scenario.sweep_ranks`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Subspace similarity of two tasks, in [0, 1].
    Similarity {
        #[arg(long, value_parser = parse_task)]
        a: TaskKind,
        #[arg(long, value_parser = parse_task)]
        b: TaskKind,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Identify { .. } => "identify",
            Command::Discriminate { .. } => "discriminate",
            Command::Unlearn { .. } => "unlearn",
            Command::Learn { .. } => "learn",
            Command::GaBaseline { .. } => "ga-baseline",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Similarity { .. } => "similarity",
        }
    }
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Stage(&'static str, Error),
}

impl From<SettingsError> for Failure {
    fn from(e: SettingsError) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// Config errors raised by the core are usage errors, anything else is a
/// failure of the named stage.
fn stage(name: &'static str) -> impl Fn(Error) -> Failure {
    move |e| match e {
        Error::Config(m) => Failure::Usage(m),
        Error::InvalidInput(m) => Failure::Usage(m),
        other => Failure::Stage(name, other),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(name, e)) => {
            eprintln!("error: {name} failed: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overrides = PathOverrides {
        artifact_dir: cli.artifact_dir.clone(),
        run_dir: cli.run_dir.clone(),
    };
    let config = settings::load(cli.config.as_deref(), &cli.sets, &overrides)?;
    let name = cli.command.name();
    let mut pipe = Pipeline::new(config.clone()).map_err(stage("setup"))?;
    pipe.build_missing = !cli.cached_only;
    let k_or = |k: Option<usize>| k.unwrap_or(config.train.k);
    let run = RunDir::create(name, &config)?;

    match cli.command {
        Command::Pretrain { holdout } => {
            let model = pipe.base_model(holdout).map_err(stage("pretrain"))?;
            let tasks: Vec<TaskKind> = pipe.tasks().into_iter().filter(|&t| Some(t) != holdout).collect();
            let acc = pipe.evaluate(&model, &tasks).map_err(stage("eval"))?;
            save_model(&run.path("model.usub"), &model).map_err(stage("pretrain"))?;
            println!("checkpoint {}", pipe.base_path(holdout).display());
            for (t, a) in &acc {
                println!("{:<8} {:.3}", t.name(), a);
            }
            let scores: serde_json::Map<String, serde_json::Value> =
                acc.iter().map(|(t, a)| (t.name().to_string(), (*a).into())).collect();
            run.write("accuracy.json", &serde_json::to_string_pretty(&scores).expect("json"))?;
        }
        Command::Identify { task, k, holdout } => {
            let sub = pipe.subspace(holdout, task, k_or(k)).map_err(stage("identify"))?;
            save_subspace(&run.path("subspace.usub"), &sub).map_err(stage("identify"))?;
            println!("task {} k {} layers {}", sub.task, sub.k, sub.n_layers());
            for (l, (before, after)) in sub.meta.initial_val_losses.iter().zip(&sub.meta.best_val_losses).enumerate() {
                println!("layer {l} val loss {before:.4} -> {after:.4}");
            }
            for w in &sub.meta.warnings {
                println!("warning: {w}");
            }
        }
        Command::Discriminate { target, others, k, holdout } => {
            let others = others.unwrap_or_else(|| {
                pipe.tasks()
                    .into_iter()
                    .filter(|&t| t != target && Some(t) != holdout)
                    .collect()
            });
            let plan = EditPlan {
                target,
                others,
                discriminate: true,
                k: k_or(k),
            };
            let delta = pipe.edit_delta(holdout, &plan).map_err(stage("discriminate"))?;
            save_discriminated(&run.path("discriminated.usub"), &delta).map_err(stage("discriminate"))?;
            for (l, layer) in delta.layers.iter().enumerate() {
                for (role, m) in layer {
                    println!(
                        "layer {l} {role}: rank {} -> {} (others rank {})",
                        m.rank_before,
                        m.rank_after(),
                        m.others_rank
                    );
                }
            }
        }
        Command::Unlearn {
            target,
            others,
            no_discrimination,
            k,
        } => {
            let s = &config.scenario;
            let target = target.unwrap_or(s.similar_target);
            let others = others.unwrap_or_else(|| {
                if target == s.similar_target {
                    s.similar_others.clone()
                } else {
                    pipe.tasks().into_iter().filter(|&t| t != target).collect()
                }
            });
            let scenario = if no_discrimination {
                Scenario::UnlearnNoDiscrimination
            } else if target == s.dissimilar_target {
                Scenario::UnlearnDissimilar
            } else {
                Scenario::UnlearnSimilar
            };
            let plan = EditPlan {
                target,
                others,
                discriminate: !no_discrimination,
                k: k_or(k),
            };
            edit_run(&mut pipe, &run, scenario, plan, "unlearn")?;
        }
        Command::Learn { task, no_discrimination, k } => {
            let mut plan = pipe.plan(Scenario::Learn);
            if let Some(task) = task {
                plan.target = task;
                plan.others = pipe.tasks().into_iter().filter(|&t| t != task).collect();
            }
            if no_discrimination {
                plan.discriminate = false;
                plan.others.clear();
            }
            plan.k = k_or(k);
            edit_run(&mut pipe, &run, Scenario::Learn, plan, "learn")?;
        }
        Command::GaBaseline { target } => {
            let mut plan = pipe.plan(Scenario::GradientAscentBaseline);
            if let Some(t) = target {
                plan.target = t;
                plan.others.retain(|&o| o != t);
            }
            edit_run(&mut pipe, &run, Scenario::GradientAscentBaseline, plan, "ga-baseline")?;
        }
        Command::Eval { scenario, model } => {
            if let Some(path) = model {
                let model = load_model(&path).map_err(stage("eval"))?;
                let scores = pipe.compare(&model).map_err(stage("eval"))?;
                let table = render_scores(&scores);
                print!("{table}");
                run.write("scores.txt", &table)?;
                run.write("scores.json", &serde_json::to_string_pretty(&scores).expect("json"))?;
            } else {
                let list = if scenario.is_empty() { Scenario::ALL.to_vec() } else { scenario };
                for sc in list {
                    let report = pipe.run_scenario(sc).map_err(stage("eval"))?;
                    print!("{}", report.render_table());
                    write_report(&run.path(sc.name()), &report).map_err(stage("eval"))?;
                }
            }
        }
        Command::Sweep { ks } => {
            let ks = ks.unwrap_or_else(|| config.scenario.sweep_ranks.clone());
            let reports = pipe.rank_sweep(&ks).map_err(stage("sweep"))?;
            for r in &reports {
                write_report(&run.path(&format!("k{}", r.plan.k)), r).map_err(stage("sweep"))?;
            }
            let csv = sweep_csv(&reports);
            print!("{csv}");
            run.write("sweep.csv", &csv)?;
        }
        Command::Similarity { a, b, k } => {
            let k = k_or(k);
            let sa = pipe.subspace(None, a, k).map_err(stage("identify"))?;
            let sb = pipe.subspace(None, b, k).map_err(stage("identify"))?;
            let score = similarity(&sa, &sb, config.discrimination.tol).map_err(stage("similarity"))?;
            println!("{score:.6}");
            run.write("similarity.txt", &format!("{a} {b} {score}\n"))?;
        }
    }
    let log_path = run.path("training_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| storage_failure(&log_path, e))?;
    pipe.log
        .write_jsonl(std::io::BufWriter::new(file))
        .map_err(|e| storage_failure(&log_path, e))?;
    info!("outputs in {}", run.dir.display());
    eprintln!("run directory: {}", run.dir.display());
    Ok(())
}

fn edit_run(pipe: &mut Pipeline, run: &RunDir, scenario: Scenario, plan: EditPlan, name: &'static str) -> Result<(), Failure> {
    let out = pipe.run_plan_detailed(scenario, plan).map_err(stage(name))?;
    save_model(&run.path("model.usub"), &out.edited).map_err(stage(name))?;
    if let Some(delta) = &out.delta {
        save_discriminated(&run.path("delta.usub"), delta).map_err(stage(name))?;
    }
    write_report(&run.dir, &out.report).map_err(stage(name))?;
    print!("{}", out.report.render_table());
    Ok(())
}

/// One output directory per invocation, holding the effective config.
struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn create(command: &str, config: &RunConfig) -> Result<Self, Failure> {
        let base = run_id(command, config);
        let mut dir = config.paths.run_dir.join(&base);
        let mut n = 1;
        while dir.exists() {
            dir = config.paths.run_dir.join(format!("{base}-{n}"));
            n += 1;
        }
        let run = Self { dir };
        fs::create_dir_all(&run.dir).map_err(|e| storage_failure(&run.dir, e))?;
        run.write("config.toml", &settings::to_toml(config))?;
        run.write("seed.txt", &format!("{}\n", config.seed))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| storage_failure(&path, e))
    }
}

fn storage_failure(path: &Path, source: std::io::Error) -> Failure {
    Failure::Stage(
        "output",
        Error::Storage {
            path: path.to_path_buf(),
            source,
        },
    )
}
