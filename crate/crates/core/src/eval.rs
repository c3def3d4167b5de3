//! Experiment orchestration: cached stage artifacts, scenarios, rank sweeps
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::model::ModelWeights;
use crate::persistence::{load_model, load_subspace, save_model, save_subspace};
use crate::subspace::{discriminate_against, similarity, DiscriminatedSubspace};
use crate::tasks::{accuracy, generate, TaskDataset, TaskKind};
use crate::training::{
    fine_tune_adapters, gradient_ascent_unlearn, identify_subspace, merge_adapters, pretrain, TaskSubspace,
    TrainConfig, TrainingLog,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    UnlearnDissimilar,
    UnlearnSimilar,
    UnlearnNoDiscrimination,
    Learn,
    GradientAscentBaseline,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::UnlearnDissimilar,
        Scenario::UnlearnSimilar,
        Scenario::UnlearnNoDiscrimination,
        Scenario::Learn,
        Scenario::GradientAscentBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::UnlearnDissimilar => "unlearn_dissimilar",
            Scenario::UnlearnSimilar => "unlearn_similar",
            Scenario::UnlearnNoDiscrimination => "unlearn_no_discrimination",
            Scenario::Learn => "learn",
            Scenario::GradientAscentBaseline => "gradient_ascent_baseline",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown scenario `{s}`")))
    }
}

/// Which task is edited and which tasks it is discriminated against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub target: TaskKind,
    pub others: Vec<TaskKind>,
    pub discriminate: bool,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: TaskKind,
    pub base: f64,
    pub edited: f64,
    /// `edited / base`; absent when the base accuracy is zero.
    pub retention: Option<f64>,
}

impl TaskScore {
    pub fn new(task: TaskKind, base: f64, edited: f64) -> Self {
        Self {
            task,
            base,
            edited,
            retention: (base > 0.0).then(|| edited / base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub name: String,
    pub scores: Vec<TaskScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub scenario: Scenario,
    pub plan: EditPlan,
    /// `-1` removes, `+1` adds.
    pub sign: f64,
    pub seed: u64,
    pub config: RunConfig,
    pub scores: Vec<TaskScore>,
    pub baseline: Option<BaselineScores>,
    /// Pairwise subspace similarity among the tasks involved, row task's
    /// subspace measured against the column task's.
    pub similarity: BTreeMap<TaskKind, BTreeMap<TaskKind, f64>>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn score(&self, task: TaskKind) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column table of base, edited and retention per task.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let others: Vec<&str> = self.plan.others.iter().map(|t| t.name()).collect();
        let _ = writeln!(
            out,
            "scenario {}  target {}  others [{}]  k {}  discrimination {}",
            self.scenario,
            self.plan.target,
            others.join(","),
            self.plan.k,
            if self.plan.discriminate { "on" } else { "off" }
        );
        let mut header = format!("{:<8} {:>8} {:>8} {:>10}", "task", "base", "edited", "retention");
        if let Some(b) = &self.baseline {
            let _ = write!(header, " {:>10}", b.name);
        }
        let _ = writeln!(out, "{header}");
        for s in &self.scores {
            let ret = s.retention.map_or("-".to_string(), |r| format!("{:.3}", r));
            let mut line = format!("{:<8} {:>8.3} {:>8.3} {:>10}", s.task.name(), s.base, s.edited, ret);
            if let Some(b) = self.baseline.as_ref().and_then(|b| b.scores.iter().find(|x| x.task == s.task)) {
                let _ = write!(line, " {:>10.3}", b.edited);
            }
            let _ = writeln!(out, "{line}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Long-format CSV over a sweep: one row per report and task.
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("k,scenario,target,task,base,edited,retention\n");
    for r in reports {
        for s in &r.scores {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.plan.k,
                r.scenario,
                r.plan.target,
                s.task,
                s.base,
                s.edited,
                s.retention.map_or(String::new(), |x| x.to_string())
            );
        }
    }
    out
}

/// A scenario's report with the artifacts it produced.
pub struct ScenarioOutcome {
    pub report: EvalReport,
    pub edited: ModelWeights,
    /// Absent for gradient ascent.
    pub delta: Option<DiscriminatedSubspace>,
}

/// Aligned-column table of task scores.
pub fn render_scores(scores: &[TaskScore]) -> String {
    let mut out = format!("{:<8} {:>8} {:>8} {:>10}\n", "task", "base", "edited", "retention");
    for s in scores {
        let ret = s.retention.map_or("-".to_string(), |r| format!("{:.3}", r));
        let _ = writeln!(out, "{:<8} {:>8.3} {:>8.3} {:>10}", s.task.name(), s.base, s.edited, ret);
    }
    out
}

#[derive(Serialize)]
struct BaseKey<'a> {
    model: &'a crate::model::ModelConfig,
    data: &'a crate::config::DataConfig,
    tasks: Vec<TaskKind>,
    step_size: f64,
    batch_size: usize,
    patience: usize,
    max_epochs: usize,
    seed: u64,
}

#[derive(Serialize)]
struct SubspaceKey<'a> {
    base: &'a str,
    task: TaskKind,
    train: &'a TrainConfig,
}

/// Stage artifacts are cached on disk under the artifact directory, keyed
/// by the hash of the configuration that produced them.
pub struct Pipeline {
    config: RunConfig,
    datasets: BTreeMap<TaskKind, TaskDataset>,
    /// Train missing artifacts instead of failing.
    pub build_missing: bool,
    pub log: TrainingLog,
    models: BTreeMap<String, ModelWeights>,
    subspaces: BTreeMap<String, TaskSubspace>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        let config = config.resolved()?;
        let mut datasets = BTreeMap::new();
        for &t in &config.scenario.tasks {
            datasets.insert(t, generate(&config.data.spec(t, config.seed))?);
        }
        Ok(Self {
            config,
            datasets,
            build_missing: true,
            log: TrainingLog::default(),
            models: BTreeMap::new(),
            subspaces: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self, task: TaskKind) -> Result<&TaskDataset> {
        self.datasets
            .get(&task)
            .ok_or_else(|| invalid(format!("task `{task}` is not in the suite")))
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.config.scenario.tasks.clone()
    }

    fn pretrained_tasks(&self, holdout: Option<TaskKind>) -> Vec<TaskKind> {
        self.tasks().into_iter().filter(|&t| Some(t) != holdout).collect()
    }

    pub fn base_key(&self, holdout: Option<TaskKind>) -> String {
        let t = &self.config.train;
        config_hash(&BaseKey {
            model: &self.config.model,
            data: &self.config.data,
            tasks: self.pretrained_tasks(holdout),
            step_size: t.pretrain_step_size,
            batch_size: t.batch_size,
            patience: t.patience,
            max_epochs: t.pretrain_max_epochs,
            seed: self.config.seed,
        })
    }

    pub fn base_path(&self, holdout: Option<TaskKind>) -> PathBuf {
        let tag = holdout.map_or(String::new(), |h| format!("-without-{h}"));
        self.config
            .paths
            .artifact_dir
            .join(format!("base{tag}-{}.usub", self.base_key(holdout)))
    }

    fn subspace_key(&self, holdout: Option<TaskKind>, task: TaskKind, k: usize) -> String {
        let base = self.base_key(holdout);
        let mut train = self.config.train.clone();
        train.k = k;
        train.pretrain_step_size = 0.0;
        train.pretrain_max_epochs = 0;
        config_hash(&SubspaceKey {
            base: &base,
            task,
            train: &train,
        })
    }

    pub fn subspace_path(&self, holdout: Option<TaskKind>, task: TaskKind, k: usize) -> PathBuf {
        self.config
            .paths
            .artifact_dir
            .join(format!("subspace-{task}-k{k}-{}.usub", self.subspace_key(holdout, task, k)))
    }

    /// Base model trained on every suite task except `holdout`.
    pub fn base_model(&mut self, holdout: Option<TaskKind>) -> Result<ModelWeights> {
        let key = self.base_key(holdout);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let path = self.base_path(holdout);
        let model = if path.exists() {
            load_model(&path)?
        } else if self.build_missing {
            let mixture: Vec<TaskDataset> = self
                .pretrained_tasks(holdout)
                .iter()
                .map(|t| self.datasets[t].clone())
                .collect();
            log::info!("pretraining base model {key}");
            let started = Instant::now();
            let m = pretrain(&self.config.train, &mixture, &self.config.model, &mut self.log)?;
            save_model(&path, &m)?;
            record_build_time(&path, started.elapsed().as_secs_f64())?;
            m
        } else {
            return Err(Error::Orchestration {
                stage: "pretrain".into(),
                message: format!("no base checkpoint at {}", path.display()),
            });
        };
        self.models.insert(key, model.clone());
        Ok(model)
    }

    pub fn subspace(&mut self, holdout: Option<TaskKind>, task: TaskKind, k: usize) -> Result<TaskSubspace> {
        let key = self.subspace_key(holdout, task, k);
        if let Some(s) = self.subspaces.get(&key) {
            return Ok(s.clone());
        }
        let path = self.subspace_path(holdout, task, k);
        let sub = if path.exists() {
            load_subspace(&path)?
        } else if self.build_missing {
            let base = self.base_model(holdout)?;
            let mut train = self.config.train.clone();
            train.k = k;
            log::info!("identifying subspace of {task} (k = {k})");
            let data = self.dataset(task)?.clone();
            let started = Instant::now();
            let s = identify_subspace(&base, &data, &train, &mut self.log)?;
            save_subspace(&path, &s)?;
            record_build_time(&path, started.elapsed().as_secs_f64())?;
            s
        } else {
            return Err(Error::Orchestration {
                stage: "identify".into(),
                message: format!("no {task} subspace at {}", path.display()),
            });
        };
        self.subspaces.insert(key, sub.clone());
        Ok(sub)
    }

    /// Test accuracy of `model` on each task.
    pub fn evaluate(&self, model: &ModelWeights, tasks: &[TaskKind]) -> Result<Vec<(TaskKind, f64)>> {
        tasks
            .iter()
            .map(|&t| Ok((t, accuracy(model, &self.dataset(t)?.test)?)))
            .collect()
    }

    /// Default plan for a scenario.
    pub fn plan(&self, scenario: Scenario) -> EditPlan {
        let s = &self.config.scenario;
        let k = self.config.train.k;
        match scenario {
            Scenario::UnlearnDissimilar => EditPlan {
                target: s.dissimilar_target,
                others: self.tasks().into_iter().filter(|&t| t != s.dissimilar_target).collect(),
                discriminate: true,
                k,
            },
            Scenario::UnlearnSimilar | Scenario::GradientAscentBaseline => EditPlan {
                target: s.similar_target,
                others: s.similar_others.clone(),
                discriminate: scenario == Scenario::UnlearnSimilar,
                k,
            },
            Scenario::UnlearnNoDiscrimination => EditPlan {
                target: s.similar_target,
                others: s.similar_others.clone(),
                discriminate: false,
                k,
            },
            Scenario::Learn => EditPlan {
                target: s.learn_task,
                others: if s.learn_discriminate {
                    self.pretrained_tasks(Some(s.learn_task))
                } else {
                    Vec::new()
                },
                discriminate: s.learn_discriminate,
                k,
            },
        }
    }

    /// Builds the delta for `plan` on the base model without `holdout`.
    pub fn edit_delta(&mut self, holdout: Option<TaskKind>, plan: &EditPlan) -> Result<DiscriminatedSubspace> {
        let target = self.subspace(holdout, plan.target, plan.k)?;
        if !plan.discriminate {
            return DiscriminatedSubspace::undiscriminated(&target, &self.config.discrimination);
        }
        let others = plan
            .others
            .iter()
            .map(|&t| self.subspace(holdout, t, plan.k))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TaskSubspace> = others.iter().collect();
        discriminate_against(&target, &refs, &self.config.discrimination)
    }

    fn similarity_matrix(
        &mut self,
        holdout: Option<TaskKind>,
        tasks: &[TaskKind],
        k: usize,
    ) -> Result<BTreeMap<TaskKind, BTreeMap<TaskKind, f64>>> {
        let subs = tasks
            .iter()
            .map(|&t| Ok((t, self.subspace(holdout, t, k)?)))
            .collect::<Result<Vec<_>>>()?;
        let tol = self.config.discrimination.tol;
        let mut out = BTreeMap::new();
        for (ta, a) in &subs {
            let row: &mut BTreeMap<TaskKind, f64> = out.entry(*ta).or_default();
            for (tb, b) in &subs {
                row.insert(*tb, similarity(a, b, tol)?);
            }
        }
        Ok(out)
    }

    pub fn run_scenario(&mut self, scenario: Scenario) -> Result<EvalReport> {
        let plan = self.plan(scenario);
        self.run_plan(scenario, plan)
    }

    /// Runs `scenario` with an explicit target, other-task set and rank.
    pub fn run_plan(&mut self, scenario: Scenario, plan: EditPlan) -> Result<EvalReport> {
        Ok(self.run_plan_detailed(scenario, plan)?.report)
    }

    /// Like [`Pipeline::run_plan`], also returning the edited weights and
    /// the applied delta.
    pub fn run_plan_detailed(&mut self, scenario: Scenario, plan: EditPlan) -> Result<ScenarioOutcome> {
        let started = Instant::now();
        if !self.datasets.contains_key(&plan.target) {
            return Err(invalid(format!("target `{}` is not in the suite", plan.target)));
        }
        if plan.others.contains(&plan.target) {
            return Err(invalid("the target cannot be among the other tasks"));
        }
        let holdout = (scenario == Scenario::Learn).then_some(plan.target);
        let base = self.base_model(holdout)?;
        let tasks = self.tasks();
        let base_acc = self.evaluate(&base, &tasks)?;
        let mut notes = Vec::new();
        let mut baseline = None;
        let mut applied = None;
        let (edited, sign) = match scenario {
            Scenario::GradientAscentBaseline => {
                let target = self.dataset(plan.target)?.clone();
                let base_val = accuracy(&base, &target.validation)?;
                let stop = self.config.scenario.ga_stop_fraction * base_val;
                let out = gradient_ascent_unlearn(
                    &base,
                    &target,
                    stop,
                    self.config.scenario.ga_max_steps,
                    &self.config.train,
                )?;
                notes.push(format!(
                    "gradient ascent: {} steps, converged {}, target validation accuracy {:.3} (stop at {:.3})",
                    out.steps, out.converged, out.final_val_accuracy, stop
                ));
                (out.weights, -1.0)
            }
            Scenario::Learn => {
                let delta = self.edit_delta(holdout, &plan)?;
                let edited = delta.apply(&base, 1.0)?;
                applied = Some(delta);
                let mut train = self.config.train.clone();
                train.k = plan.k;
                let data = self.dataset(plan.target)?.clone();
                let tuned = fine_tune_adapters(&base, &data, &train, &mut self.log)?;
                let tuned = merge_adapters(&tuned);
                let tuned_acc = self.evaluate(&tuned, &tasks)?;
                baseline = Some(BaselineScores {
                    name: "finetune".into(),
                    scores: base_acc
                        .iter()
                        .zip(&tuned_acc)
                        .map(|(&(t, b), &(_, e))| TaskScore::new(t, b, e))
                        .collect(),
                });
                (edited, 1.0)
            }
            _ => {
                let delta = self.edit_delta(holdout, &plan)?;
                for (l, layer) in delta.layers.iter().enumerate() {
                    let kept: Vec<String> = layer
                        .iter()
                        .map(|(r, d)| format!("{r}:{}/{}", d.rank_after(), d.rank_before))
                        .collect();
                    if plan.discriminate {
                        notes.push(format!("layer {l} directions kept {}", kept.join(" ")));
                    }
                }
                let edited = delta.apply(&base, -1.0)?;
                applied = Some(delta);
                (edited, -1.0)
            }
        };
        let edited_acc = self.evaluate(&edited, &tasks)?;
        let scores = base_acc
            .iter()
            .zip(&edited_acc)
            .map(|(&(t, b), &(_, e))| TaskScore::new(t, b, e))
            .collect();
        let mut involved = vec![plan.target];
        involved.extend(plan.others.iter().copied());
        let similarity = if scenario == Scenario::GradientAscentBaseline {
            BTreeMap::new()
        } else {
            self.similarity_matrix(holdout, &involved, plan.k)?
        };
        let mut config = self.config.clone();
        config.train.k = plan.k;
        let report = EvalReport {
            run_id: run_id(scenario.name(), &config),
            scenario,
            plan,
            sign,
            seed: config.seed,
            config,
            scores,
            baseline,
            similarity,
            notes,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        Ok(ScenarioOutcome {
            report,
            edited,
            delta: applied,
        })
    }

    /// Scores an arbitrary checkpoint against the full-suite base model.
    pub fn compare(&mut self, model: &ModelWeights) -> Result<Vec<TaskScore>> {
        let base = self.base_model(None)?;
        let tasks = self.tasks();
        let b = self.evaluate(&base, &tasks)?;
        let e = self.evaluate(model, &tasks)?;
        Ok(b.iter().zip(&e).map(|(&(t, x), &(_, y))| TaskScore::new(t, x, y)).collect())
    }

    /// The similar-pair scenario repeated for each rank.
    pub fn rank_sweep(&mut self, ks: &[usize]) -> Result<Vec<EvalReport>> {
        if ks.is_empty() {
            return Err(invalid("rank sweep needs at least one k"));
        }
        let d = self.config.model.d_model;
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > d) {
            return Err(invalid(format!("rank {k} outside 1..={d}")));
        }
        ks.iter()
            .map(|&k| {
                let mut plan = self.plan(Scenario::UnlearnSimilar);
                plan.k = k;
                self.run_plan(Scenario::UnlearnSimilar, plan)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct BuildTime {
    seconds: f64,
}

fn build_time_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".time.json");
    PathBuf::from(name)
}

fn record_build_time(artifact: &Path, seconds: f64) -> Result<()> {
    let path = build_time_path(artifact);
    let json = serde_json::to_string(&BuildTime { seconds }).expect("build time serializes");
    fs::write(&path, json).map_err(|source| Error::Storage { path, source })
}

/// Wall-clock seconds it took to build a cached artifact, if recorded.
pub fn build_seconds(artifact: &Path) -> Option<f64> {
    let text = fs::read_to_string(build_time_path(artifact)).ok()?;
    serde_json::from_str::<BuildTime>(&text).ok().map(|b| b.seconds)
}

pub fn run_id(prefix: &str, config: &RunConfig) -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("{prefix}-{}-{secs}", &config_hash(config)[..8])
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let storage = |path: PathBuf| move |source| Error::Storage { path, source };
    fs::create_dir_all(dir).map_err(storage(dir.to_path_buf()))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()).map_err(storage(json.clone()))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.render_table()).map_err(storage(txt.clone()))?;
    Ok(())
}
