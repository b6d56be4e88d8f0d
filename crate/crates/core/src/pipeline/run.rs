//! Stage functions and the two experiment arms.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::artifacts::{dataset_file, persist, write_text};
use super::report::SearchSummary;
use super::{
    derive_seed, emit_report, save_family, BaselineEntry, DevScores, EvaluatorMode, ExpertEntry,
    Failure, FamilySplits, PipelineError, RunConfig, RunReport, RunStatus, Stage, StageError,
    StopRule, TaskResult, TrainedArtifact,
};
use crate::checkpoint::{check_compatible_labeled, save, sha256_hex, Checkpoint};
use crate::evaluation::{
    evaluate_builtin, EvalError, EvalRequest, ExternalEvaluator, LabeledDataset, MetricKind, Split,
};
use crate::simplex::{optimize_mixture, MixtureError, MixtureSearchResult};
use crate::toybench::{gen_task_family, s_star, train, TrainOutcome};
use crate::weight_space::interpolate;

/// Scores checkpoints on one split, in-process or through an external
/// evaluator.
pub enum DevEvaluator {
    Builtin {
        data: LabeledDataset,
        metric: MetricKind,
    },
    External {
        evaluator: ExternalEvaluator,
        dataset_path: PathBuf,
        split: Split,
        metric: MetricKind,
        /// Where candidate checkpoints are written for the evaluator.
        scratch: PathBuf,
    },
}

impl DevEvaluator {
    pub fn score(&self, c: &Checkpoint) -> Result<f64, EvalError> {
        match self {
            DevEvaluator::Builtin { data, metric } => evaluate_builtin(c, data, metric),
            DevEvaluator::External {
                evaluator,
                dataset_path,
                split,
                metric,
                scratch,
            } => {
                save(c, scratch)?;
                evaluator.score(&EvalRequest {
                    checkpoint_path: scratch.clone(),
                    dataset_path: dataset_path.clone(),
                    split: *split,
                    metric: metric.clone(),
                })
            }
        }
    }

    fn for_split(
        cfg: &RunConfig,
        data: &LabeledDataset,
        dataset_path: PathBuf,
        scratch: PathBuf,
    ) -> Self {
        match &cfg.evaluator {
            EvaluatorMode::Builtin => DevEvaluator::Builtin {
                data: data.clone(),
                metric: cfg.metric.clone(),
            },
            EvaluatorMode::External { .. } => DevEvaluator::External {
                evaluator: cfg.evaluator.external().expect("external mode"),
                dataset_path,
                split: data.split(),
                metric: cfg.metric.clone(),
                scratch,
            },
        }
    }
}

/// The shared initialization: a seeded random network, optionally warmed up
/// on a generic task whose labels come from a random linear map of the
/// pooled training inputs.
pub fn base_checkpoint(cfg: &RunConfig, family: &FamilySplits) -> Result<Checkpoint, StageError> {
    let arch = cfg
        .architecture()
        .map_err(|e| crate::toybench::ToyError::Config(e.to_string()))?;
    let mut base = arch
        .init(derive_seed(cfg.seed, "base/init"))
        .to_checkpoint();
    base.set_meta("base.seed", cfg.seed.to_string());
    if cfg.base.pretrain_epochs == 0 {
        return Ok(base);
    }

    let (d, c) = (arch.input_dim, arch.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "base/head"));
    let head: Vec<f64> = (0..c * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut inputs = Vec::new();
    for t in &family.tasks {
        inputs.extend_from_slice(t.train.inputs());
    }
    inputs.truncate(cfg.base.pretrain_rows.min(inputs.len() / d) * d);
    let labels: Vec<u32> = inputs
        .chunks_exact(d)
        .map(|x| {
            let scores: Vec<f64> = (0..c)
                .map(|k| {
                    head[k * d..(k + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * f64::from(*v))
                        .sum()
                })
                .collect();
            crate::toybench::argmax(&scores)
        })
        .collect();
    let generic = LabeledDataset::new("generic", Split::Train, d, c, inputs, labels)?;
    let mut tc = cfg.train_config("base/pretrain");
    tc.epochs = cfg.base.pretrain_epochs;
    tc.patience = usize::MAX;
    let out = train(&base, &[&generic], &tc, &generic)?;
    let mut warmed = out.checkpoint;
    warmed.set_meta("base.seed", cfg.seed.to_string());
    warmed.set_meta("base.pretrain_epochs", cfg.base.pretrain_epochs.to_string());
    Ok(warmed)
}

/// A stage-1 expert: the label of its training set, the task ids pooled into
/// it, and the training result.
pub struct ExpertJob {
    pub label: String,
    pub tasks: Vec<String>,
    pub outcome: TrainOutcome,
}

/// Trains the `n + 2` stage-1 experts from `base` in parallel. Results come
/// back in S* order whatever the scheduling.
pub fn train_experts(
    cfg: &RunConfig,
    family: &FamilySplits,
    base: &Checkpoint,
) -> Result<Vec<ExpertJob>, StageError> {
    let specs = s_star(family.sources().len());
    specs
        .par_iter()
        .map(|spec| {
            let data: Vec<&LabeledDataset> =
                spec.tasks.iter().map(|&i| &family.tasks[i].train).collect();
            let stop = match cfg.stop_rule {
                StopRule::Target => family.target().dev.clone(),
                StopRule::OwnTasks => {
                    let devs: Vec<&LabeledDataset> =
                        spec.tasks.iter().map(|&i| &family.tasks[i].dev).collect();
                    concat(&spec.label, &devs)?
                }
            };
            let tc = cfg.train_config(&format!("stage1/{}", spec.label));
            let outcome = train(base, &data, &tc, &stop)?;
            Ok(ExpertJob {
                label: spec.label.clone(),
                tasks: spec
                    .tasks
                    .iter()
                    .map(|&i| family.tasks[i].id.clone())
                    .collect(),
                outcome,
            })
        })
        .collect()
}

/// Finetunes each expert on the target task, in parallel, keeping order.
pub fn finetune_experts(
    cfg: &RunConfig,
    family: &FamilySplits,
    experts: &[(String, Checkpoint)],
) -> Result<Vec<TrainOutcome>, StageError> {
    let target = family.target();
    experts
        .par_iter()
        .map(|(label, c)| {
            let tc = cfg.train_config(&format!("stage2/{label}"));
            Ok(train(c, &[&target.train], &tc, &target.dev)?)
        })
        .collect()
}

fn finetune_baseline(
    cfg: &RunConfig,
    family: &FamilySplits,
    base: &Checkpoint,
) -> Result<TrainOutcome, StageError> {
    let target = family.target();
    let tc = cfg.train_config("baseline");
    Ok(train(base, &[&target.train], &tc, &target.dev)?)
}

fn concat(id: &str, parts: &[&LabeledDataset]) -> Result<LabeledDataset, StageError> {
    let first = parts[0];
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        inputs.extend_from_slice(p.inputs());
        labels.extend_from_slice(p.labels());
    }
    Ok(LabeledDataset::new(
        id,
        first.split(),
        first.dim(),
        first.num_classes(),
        inputs,
        labels,
    )?)
}

/// The family a run works on, with the configured caps applied.
fn family_for(cfg: &RunConfig) -> Result<FamilySplits, StageError> {
    let fam = gen_task_family(&cfg.family_config())?;
    let mut splits = FamilySplits::from(&fam);
    let target = &mut splits.tasks[0];
    if let Some(cap) = cfg.train_cap {
        target.train = target.train.truncated(cap)?;
    }
    if let Some(cap) = cfg.dev_cap {
        target.dev = target.dev.truncated(cap)?;
    }
    Ok(splits)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    root: PathBuf,
    report: RunReport,
}

impl<'a> Runner<'a> {
    fn start(cfg: &'a RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        cfg.prepare_output_dir()?;
        let root = cfg.output_dir.clone();
        let toml = cfg.to_toml();
        std::fs::write(root.join("config.toml"), &toml).map_err(|source| PipelineError::Io {
            path: root.join("config.toml"),
            source,
        })?;
        let canon = RunConfig {
            output_dir: PathBuf::new(),
            ..cfg.clone()
        };
        let report = RunReport {
            seed: Some(cfg.seed),
            config_sha256: Some(sha256_hex(canon.to_toml().as_bytes())),
            ..Default::default()
        };
        Ok(Self { cfg, root, report })
    }

    fn stage<T>(
        &mut self,
        stage: Stage,
        f: impl FnOnce(&mut Self) -> Result<T, StageError>,
    ) -> Result<T, PipelineError> {
        let t0 = Instant::now();
        let r = f(self);
        self.report
            .wall_clock_secs
            .insert(stage.to_string(), t0.elapsed().as_secs_f64());
        r.map_err(|e| self.fail(stage, e))
    }

    /// Marks the report partial, writes it next to the artifacts, and wraps
    /// it into the error.
    fn fail(&mut self, stage: Stage, source: StageError) -> PipelineError {
        self.report.status = RunStatus::Partial;
        self.report.failure = Some(Failure {
            stage,
            cause: source.to_string(),
        });
        // The stage error is the one worth reporting.
        let _ = emit_report(&self.report, &self.root);
        PipelineError::Stage {
            stage,
            source,
            report: Box::new(self.report.clone()),
        }
    }

    fn persist_trained(
        &mut self,
        dir: &str,
        role: &str,
        label: &str,
        out: &TrainOutcome,
    ) -> Result<TrainedArtifact, StageError> {
        let entry = persist(
            &self.root,
            &format!("{dir}/{label}.ckpt"),
            role,
            label,
            &out.checkpoint,
        )?;
        let log_path = format!("{dir}/{label}.log.jsonl");
        let mut log = Vec::new();
        out.write_log(&mut log).expect("in-memory write");
        write_text(&self.root, &log_path, &log)?;
        self.report.manifest.push(entry.clone());
        Ok(TrainedArtifact {
            checkpoint: entry,
            log_path,
            best_epoch: out.best_epoch,
            stop_score: out.best_score,
        })
    }

    fn scorer(&self, family: &FamilySplits, split: Split) -> Result<DevEvaluator, StageError> {
        let data = family.target().split(split);
        let rel = format!("family/{}", dataset_file(&family.target().id, split));
        let scratch = self.root.join(format!("scratch/{split}-candidate.ckpt"));
        if matches!(self.cfg.evaluator, EvaluatorMode::External { .. }) {
            let parent = self.root.join("scratch");
            std::fs::create_dir_all(&parent).map_err(|e| StageError::io(parent, e))?;
        }
        Ok(DevEvaluator::for_split(
            self.cfg,
            data,
            self.root.join(rel),
            scratch,
        ))
    }
}

/// Finetunes the shared base on the target task alone and scores it on the
/// target test split. Artifacts go under `cfg.output_dir`.
pub fn run_baseline(cfg: &RunConfig) -> Result<(Checkpoint, f64), PipelineError> {
    let mut r = Runner::start(cfg)?;
    let family = r.stage(Stage::Gen, |r| {
        let f = family_for(r.cfg)?;
        save_family(&f, Some(&r.cfg.family_config()), &r.root.join("family"))?;
        Ok(f)
    })?;
    let base = r.stage(Stage::Base, |r| {
        let base = base_checkpoint(r.cfg, &family)?;
        let entry = persist(&r.root, "base/base.ckpt", "base", "base", &base)?;
        r.report.manifest.push(entry);
        Ok(base)
    })?;
    let out = r.stage(Stage::Baseline, |r| {
        let out = finetune_baseline(r.cfg, &family, &base)?;
        r.persist_trained("baseline", "baseline", "baseline", &out)?;
        Ok(out)
    })?;
    let score = r.stage(Stage::Evaluate, |r| {
        Ok(r.scorer(&family, Split::Test)?.score(&out.checkpoint)?)
    })?;
    Ok((out.checkpoint, score))
}

/// The full experiment: stage-1 experts on S*, stage-2 finetuning on the
/// target, mixture search on target dev, then a single test evaluation of
/// the merged model and of the baseline. Reports are written to
/// `cfg.output_dir` on success and on failure.
pub fn run_dfwe(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    let mut r = Runner::start(cfg)?;

    let family = r.stage(Stage::Gen, |r| {
        let f = family_for(r.cfg)?;
        save_family(&f, Some(&r.cfg.family_config()), &r.root.join("family"))?;
        Ok(f)
    })?;

    let base = r.stage(Stage::Base, |r| {
        let base = base_checkpoint(r.cfg, &family)?;
        let entry = persist(&r.root, "base/base.ckpt", "base", "base", &base)?;
        r.report.manifest.push(entry);
        Ok(base)
    })?;

    let stage1 = r.stage(Stage::TrainExperts, |r| {
        let jobs = train_experts(r.cfg, &family, &base)?;
        for job in &jobs {
            let art = r.persist_trained("stage1", "stage1", &job.label, &job.outcome)?;
            r.report.experts.push(ExpertEntry {
                label: job.label.clone(),
                tasks: job.tasks.clone(),
                stage1: art,
                stage2: None,
            });
        }
        Ok(jobs)
    })?;
    let labels: Vec<String> = stage1.iter().map(|j| j.label.clone()).collect();

    let stage2 = r.stage(Stage::Finetune, |r| {
        let inputs: Vec<(String, Checkpoint)> = stage1
            .into_iter()
            .map(|j| (j.label, j.outcome.checkpoint))
            .collect();
        let outs = finetune_experts(r.cfg, &family, &inputs)?;
        for (i, out) in outs.iter().enumerate() {
            let art = r.persist_trained("stage2", "stage2", &labels[i], out)?;
            r.report.experts[i].stage2 = Some(art);
        }
        Ok(outs)
    })?;

    let baseline = r.stage(Stage::Baseline, |r| {
        let out = finetune_baseline(r.cfg, &family, &base)?;
        let art = r.persist_trained("baseline", "baseline", "baseline", &out)?;
        Ok((out, art))
    })?;

    let (dev, search, merged) = r.stage(Stage::Optimize, |r| {
        let dev = r.scorer(&family, Split::Dev)?;
        let members: Vec<Checkpoint> = stage2.into_iter().map(|o| o.checkpoint).collect();
        let theta = check_compatible_labeled(members, labels.clone())?;
        let search = match optimize_mixture(&theta, |c| dev.score(c), &r.cfg.optimizer) {
            Ok(s) => s,
            Err(MixtureError::Setup(e)) => return Err(e.into()),
            Err(MixtureError::Evaluator { source, trace }) => {
                let mut buf = Vec::new();
                trace.write_jsonl(&mut buf).expect("in-memory write");
                write_text(&r.root, "optimize/trace.jsonl", &buf)?;
                return Err(source.into());
            }
        };
        let mut buf = Vec::new();
        search.trace.write_jsonl(&mut buf).expect("in-memory write");
        write_text(&r.root, "optimize/trace.jsonl", &buf)?;
        let json = serde_json::to_vec_pretty(&search).expect("search result serializes");
        write_text(&r.root, "optimize/search.json", &json)?;

        let merged = interpolate(&theta, &search.best_weights)?;
        let entry = persist(&r.root, "merged/dfwe.ckpt", "dfwe", "dfwe", &merged)?;
        r.report.manifest.push(entry);
        Ok((dev, search, merged))
    })?;

    let (dfwe_test, baseline_dev, baseline_test) = r.stage(Stage::Evaluate, |r| {
        let test = r.scorer(&family, Split::Test)?;
        let dfwe_test = test.score(&merged)?;
        let baseline_test = test.score(&baseline.0.checkpoint)?;
        let baseline_dev = dev.score(&baseline.0.checkpoint)?;
        Ok((dfwe_test, baseline_dev, baseline_test))
    })?;

    r.stage(Stage::Report, |r| {
        r.report.baseline = Some(BaselineEntry {
            artifact: baseline.1.clone(),
            dev_score: baseline_dev,
            test_score: baseline_test,
        });
        r.report.tasks.push(task_result(
            r.cfg,
            &family,
            &labels,
            &search,
            baseline_test,
            dfwe_test,
        ));
        r.report.status = RunStatus::Complete;
        emit_report(&r.report, &r.root).map_err(|e| match e {
            PipelineError::Io { path, source } => StageError::io(path, source),
            other => StageError::io(&r.root, std::io::Error::other(other.to_string())),
        })?;
        Ok(())
    })?;
    Ok(r.report)
}

fn task_result(
    cfg: &RunConfig,
    family: &FamilySplits,
    labels: &[String],
    search: &MixtureSearchResult,
    baseline_test: f64,
    dfwe_test: f64,
) -> TaskResult {
    let mut t = TaskResult::new(
        family.target().id.clone(),
        cfg.metric.to_string(),
        baseline_test,
        dfwe_test,
        labels.to_vec(),
        search.best_weights.clone(),
    );
    t.dev = Some(DevScores {
        uniform: search.initial_vertices[0].dev_score,
        initial_vertices: search.initial_vertices.clone(),
        members: search.member_scores.clone(),
        dfwe: search.best_dev_score,
    });
    t.search = Some(SearchSummary {
        trace_path: "optimize/trace.jsonl".into(),
        iterations: search.trace.iterations(),
        optimizer_evaluations: search.trace.evaluations,
        dev_evaluations: search.dev_evaluations,
        termination: search.trace.termination,
    });
    t
}

/// Path of a manifest entry inside a run directory.
pub fn artifact_path(root: &Path, rel: &str) -> PathBuf {
    rel.split('/')
        .fold(root.to_path_buf(), |p, part| p.join(part))
}
