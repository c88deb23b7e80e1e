//! Generate, train, estimate and evaluate steps, and the files they share.
//!
//! Output layout under the output directory, for replication `k`:
//!
//! - `data/replication_k.csv`: the generated sample
//! - `models/replication_k/stage1.json`, `regressor_<name>.json`
//! - `estimates/replication_k.csv`: one [`EstimateRow`] per query
//! - `replication_k.csv`: [`ReportRow`]s against ground truth
//! - `aggregate.csv` and `run_manifest.json`
//!
//! Every step is a pure function of the config and the replication seed,
//! and files round-trip exactly, so running the steps separately gives the
//! same estimates as `evaluate`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ColumnarDataset, Role};
use crate::dgp::discrete::{exact_regression, identification};
use crate::dgp::{
    gen_backdoor_dsprite, gen_discrete_toy, gen_frontdoor_dsprite, position_grid, render_clean,
    BackdoorSpriteTruth, DiscreteScm, FrontdoorSpriteTruth, ToyGraph, Var,
};
use crate::error::{Error, Result};
use crate::estimators::{Adjustment, CausalQuery, Estimator, Parameter, Regressors};
use crate::stage1::StageOneModel;
use crate::stage2::{fit_conditional_embedding, EmbeddingRegressor};

use super::config::{ExperimentConfig, ExperimentKind};
use super::report::{aggregate, read_csv_rows, write_csv_rows, AggregateRow, EstimateRow, ReportRow};

/// A query together with the labels it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPoint {
    pub query: CausalQuery,
    pub label: String,
    pub conditioning: String,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/")
}

/// The query set of an experiment, in report order.
pub fn query_points(cfg: &ExperimentConfig) -> Result<Vec<QueryPoint>> {
    let adj = cfg.adjustment();
    let mut out = Vec::new();
    let mut push = |query: CausalQuery, label: String, conditioning: String| {
        out.push(QueryPoint {
            query,
            label,
            conditioning,
        })
    };
    match cfg.kind {
        ExperimentKind::BackdoorDsprite | ExperimentKind::FrontdoorDsprite => {
            let (xs, ys) = cfg.positions();
            let [px, py] = cfg.query.a_prime;
            let a_prime = render_clean(&cfg.sprite, px, py).to_vec();
            for p in cfg.parameters() {
                for (x, y) in position_grid(&xs, &ys) {
                    let a = render_clean(&cfg.sprite, x, y).to_vec();
                    let label = format!("pos={x}/{y}");
                    match p {
                        Parameter::Ate => push(CausalQuery::ate(adj, a), label, String::new()),
                        Parameter::Att => {
                            push(CausalQuery::att(adj, a, a_prime.clone()), label, format!("pos={px}/{py}"))
                        }
                        Parameter::Cate => unreachable!("rejected by validation"),
                    }
                }
            }
        }
        ExperimentKind::DiscreteToy => {
            let scm = cfg.toy.model();
            let supports = scm.supports();
            let treat: Vec<usize> = (0..supports[&Var::Treatment]).collect();
            let conf: Vec<usize> = (0..supports.get(&Var::Confounder).copied().unwrap_or(0)).collect();
            for p in cfg.parameters() {
                for &a in &treat {
                    let av = vec![a as f64];
                    let label = format!("a={a}");
                    match p {
                        Parameter::Ate => push(CausalQuery::ate(adj, av), label, String::new()),
                        Parameter::Att => {
                            for &ap in &treat {
                                push(CausalQuery::att(adj, av.clone(), vec![ap as f64]), label.clone(), format!("a'={ap}"));
                            }
                        }
                        Parameter::Cate => {
                            for &o in &conf {
                                push(CausalQuery::cate(adj, av.clone(), vec![o as f64]), label.clone(), format!("o={o}"));
                            }
                        }
                    }
                }
            }
        }
        ExperimentKind::CsvBackdoor => {
            let q = &cfg.query;
            for p in cfg.parameters() {
                for a in &q.treatments {
                    let label = format!("a={}", join(a));
                    match p {
                        Parameter::Ate => push(CausalQuery::ate(adj, a.clone()), label, String::new()),
                        Parameter::Att => {
                            for ap in &q.conditioning_treatments {
                                push(CausalQuery::att(adj, a.clone(), ap.clone()), label.clone(), format!("a'={}", join(ap)));
                            }
                        }
                        Parameter::Cate => {
                            for o in &q.confounders {
                                push(CausalQuery::cate(adj, a.clone(), o.clone()), label.clone(), format!("o={}", join(o)));
                            }
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("the query grid is empty".into()));
    }
    Ok(out)
}

/// The data generating model behind an experiment, when it is known.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    BackdoorSprite(BackdoorSpriteTruth),
    FrontdoorSprite(FrontdoorSpriteTruth),
    Toy(DiscreteScm),
    Unknown,
}

impl GroundTruth {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        match cfg.kind {
            ExperimentKind::BackdoorDsprite => GroundTruth::BackdoorSprite(BackdoorSpriteTruth { sprite: cfg.sprite }),
            ExperimentKind::FrontdoorDsprite => GroundTruth::FrontdoorSprite(FrontdoorSpriteTruth {
                sprite: cfg.sprite,
                model: cfg.frontdoor,
            }),
            ExperimentKind::DiscreteToy => GroundTruth::Toy(cfg.toy.model()),
            ExperimentKind::CsvBackdoor => GroundTruth::Unknown,
        }
    }
}

/// Ground truth of every query. Sprite ATT values are Monte-Carlo
/// estimates, one stream per query. Toy values evaluate the identification
/// sums with the exact regression and the exact observed law.
pub fn ground_truths(cfg: &ExperimentConfig, points: &[QueryPoint]) -> Result<Vec<Option<f64>>> {
    let truth = GroundTruth::from_config(cfg);
    let toy = match &truth {
        GroundTruth::Toy(scm) => Some((scm.observed_law(), exact_regression(scm))),
        _ => None,
    };
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = &p.query;
            Ok(match &truth {
                GroundTruth::BackdoorSprite(t) => Some(t.ate(&q.treatment)?),
                GroundTruth::FrontdoorSprite(t) => match q.parameter {
                    Parameter::Ate => Some(t.ate(&q.treatment)?),
                    _ => {
                        let [px, py] = cfg.query.a_prime;
                        let seed = cfg.ground_truth.seed.wrapping_add(i as u64);
                        let mc = t.att_mc(&q.treatment, (px, py), cfg.ground_truth.mc_samples, seed)?;
                        log::debug!("truth {}: {} (se {})", p.label, mc.value, mc.std_error);
                        Some(mc.value)
                    }
                },
                GroundTruth::Toy(scm) => {
                    let (law, g) = toy.as_ref().expect("toy law");
                    Some(toy_truth(scm.graph, law, g, q))
                }
                GroundTruth::Unknown => None,
            })
        })
        .collect()
}

fn toy_truth(
    graph: ToyGraph,
    law: &crate::dgp::ObservedLaw,
    g: &dyn Fn(usize, usize, usize) -> f64,
    q: &CausalQuery,
) -> f64 {
    use identification as id;
    let a = q.treatment[0] as usize;
    let ap = q.conditioning_treatment.as_ref().map_or(0, |v| v[0] as usize);
    let o = q.confounder.as_ref().map_or(0, |v| v[0] as usize);
    match (graph, q.parameter) {
        (ToyGraph::Backdoor, Parameter::Ate) => id::backdoor_ate(law, g, a),
        (ToyGraph::Backdoor, _) => id::backdoor_att(law, g, a, ap),
        (ToyGraph::Frontdoor, Parameter::Ate) => id::frontdoor_ate(law, g, a),
        (ToyGraph::Frontdoor, _) => id::frontdoor_att(law, g, a, ap),
        (ToyGraph::BackdoorObserved, Parameter::Ate) => id::backdoor_obs_ate(law, g, a),
        (ToyGraph::BackdoorObserved, Parameter::Att) => id::backdoor_obs_att(law, g, a, ap),
        (ToyGraph::BackdoorObserved, Parameter::Cate) => id::backdoor_obs_cate(law, g, a, o),
        (ToyGraph::FrontdoorObserved, Parameter::Ate) => id::frontdoor_obs_ate(law, g, a),
        (ToyGraph::FrontdoorObserved, Parameter::Att) => id::frontdoor_obs_att(law, g, a, ap),
        (ToyGraph::FrontdoorObserved, Parameter::Cate) => id::frontdoor_obs_cate(law, g, a, o),
    }
}

/// The sample of one replication.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<ColumnarDataset> {
    let data = match cfg.kind {
        ExperimentKind::BackdoorDsprite => gen_backdoor_dsprite(&cfg.sprite, &cfg.backdoor, cfg.n, seed)?.0,
        ExperimentKind::FrontdoorDsprite => gen_frontdoor_dsprite(&cfg.sprite, &cfg.frontdoor, cfg.n, seed)?.0,
        ExperimentKind::DiscreteToy => gen_discrete_toy(&cfg.toy.model(), cfg.n, seed)?,
        ExperimentKind::CsvBackdoor => {
            let path = cfg.csv_path().expect("validated");
            ColumnarDataset::read_csv_file(&path)?
        }
    };
    data.require(&cfg.factor_roles())?;
    Ok(data)
}

/// A conditional embedding the estimators of an experiment need.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorPlan {
    pub name: &'static str,
    /// Keeps the random streams of different regressors apart.
    pub tag: u64,
    pub conditioning: Vec<Role>,
    pub targets: Vec<Role>,
}

pub fn regressor_plan(cfg: &ExperimentConfig) -> Vec<RegressorPlan> {
    let confounded = cfg.factor_roles().contains(&Role::ObservedConfounder);
    let params = cfg.parameters();
    let wants = |p| params.contains(&p);
    let plan = |name, tag, conditioning: &[Role], targets: &[Role]| RegressorPlan {
        name,
        tag,
        conditioning: conditioning.to_vec(),
        targets: targets.to_vec(),
    };
    use Role::*;
    let mut out = Vec::new();
    match (cfg.adjustment(), confounded) {
        (Adjustment::BackDoor, false) => {
            if wants(Parameter::Att) {
                out.push(plan("backdoor_given_treatment", 1, &[Treatment], &[BackDoor]));
            }
        }
        (Adjustment::FrontDoor, false) => {
            out.push(plan("frontdoor_given_treatment", 2, &[Treatment], &[FrontDoor]));
        }
        (Adjustment::BackDoor, true) => {
            if wants(Parameter::Att) {
                out.push(plan(
                    "confounder_backdoor_given_treatment",
                    3,
                    &[Treatment],
                    &[ObservedConfounder, BackDoor],
                ));
            }
            if wants(Parameter::Cate) {
                out.push(plan("backdoor_given_confounder", 4, &[ObservedConfounder], &[BackDoor]));
            }
        }
        (Adjustment::FrontDoor, true) => {
            out.push(plan(
                "frontdoor_given_confounder_treatment",
                5,
                &[ObservedConfounder, Treatment],
                &[FrontDoor],
            ));
        }
    }
    out
}

/// The fitted models of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub stage1: StageOneModel,
    pub regressors: BTreeMap<String, EmbeddingRegressor>,
}

impl TrainedModels {
    pub fn regressors(&self) -> Regressors<'_> {
        let get = |name: &str| {
            self.regressors
                .get(name)
                .map(|r| r as &dyn crate::stage2::ConditionalEmbedding)
        };
        Regressors {
            backdoor_given_treatment: get("backdoor_given_treatment"),
            frontdoor_given_treatment: get("frontdoor_given_treatment"),
            confounder_backdoor_given_treatment: get("confounder_backdoor_given_treatment"),
            backdoor_given_confounder: get("backdoor_given_confounder"),
            frontdoor_given_confounder_treatment: get("frontdoor_given_confounder_treatment"),
        }
    }

    pub fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("stage1".to_string(), self.stage1.fingerprint());
        for (name, r) in &self.regressors {
            out.insert(format!("regressor_{name}"), r.fingerprint());
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_text(&dir.join("stage1.json"), &self.stage1.to_json())?;
        for (name, r) in &self.regressors {
            write_text(&dir.join(format!("regressor_{name}.json")), &r.to_json())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let stage1 = StageOneModel::from_json(&read_text(&dir.join("stage1.json"))?)?;
        let mut regressors = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            if let Some(name) = name.strip_prefix("regressor_").and_then(|s| s.strip_suffix(".json")) {
                regressors.insert(name.to_string(), EmbeddingRegressor::from_json(&read_text(&path)?)?);
            }
        }
        Ok(TrainedModels { stage1, regressors })
    }
}

/// Final training losses, for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub stage1_loss: f64,
    pub ridge_lambda: f64,
    pub regressor_losses: BTreeMap<String, f64>,
}

/// Fits stage one, then every regressor in [`regressor_plan`].
pub fn train(cfg: &ExperimentConfig, data: &ColumnarDataset, seed: u64) -> Result<(TrainedModels, TrainSummary)> {
    let (stage1, report) = crate::stage1::train_stage1(data, &cfg.factor_specs(), &cfg.stage1_config(seed))?;
    log::info!("seed {seed}: stage 1 loss {:.6}", report.final_loss);
    let mut regressors = BTreeMap::new();
    let mut regressor_losses = BTreeMap::new();
    for plan in regressor_plan(cfg) {
        let (reg, rep) = fit_conditional_embedding(
            &stage1,
            data,
            &plan.conditioning,
            &plan.targets,
            &cfg.stage2_config(seed),
            plan.tag,
        )?;
        log::info!("seed {seed}: {} loss {:.6}", plan.name, rep.final_loss);
        regressors.insert(plan.name.to_string(), reg);
        regressor_losses.insert(plan.name.to_string(), rep.final_loss);
    }
    Ok((
        TrainedModels { stage1, regressors },
        TrainSummary {
            stage1_loss: report.final_loss,
            ridge_lambda: report.ridge_lambda,
            regressor_losses,
        },
    ))
}

/// Evaluates every query; marginal embeddings use `data`.
pub fn estimate(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    data: &ColumnarDataset,
    points: &[QueryPoint],
) -> Result<Vec<EstimateRow>> {
    let est = Estimator::new(&models.stage1, data)?;
    let regs = models.regressors();
    let adj = cfg.adjustment();
    points
        .iter()
        .map(|p| {
            let e = est.estimate(&p.query, &regs)?;
            Ok(EstimateRow {
                parameter: p.query.parameter,
                adjustment: adj,
                query: p.label.clone(),
                conditioning: p.conditioning.clone(),
                value: e.value,
                n: e.n_used,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub n: usize,
    pub fingerprints: BTreeMap<String, String>,
    pub training: TrainSummary,
}

/// Everything `evaluate` produced, in replication order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
    pub replications: Vec<ReplicationRecord>,
}

impl RunSummary {
    /// Mean over replications of the per-replication mean squared error of
    /// `parameter`, or `None` without ground truth.
    pub fn mean_squared_error(&self, parameter: Parameter) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| r.parameter == parameter && r.query == super::report::ALL_QUERIES)
            .and_then(|r| r.squared_error_mean)
    }
}

pub fn data_path(out: &Path, k: usize) -> PathBuf {
    out.join("data").join(format!("replication_{k}.csv"))
}

pub fn models_dir(out: &Path, k: usize) -> PathBuf {
    out.join("models").join(format!("replication_{k}"))
}

pub fn estimates_path(out: &Path, k: usize) -> PathBuf {
    out.join("estimates").join(format!("replication_{k}.csv"))
}

pub fn report_path(out: &Path, k: usize) -> PathBuf {
    out.join(format!("replication_{k}.csv"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) => create_dir(p),
        None => Ok(()),
    }
}

/// Runs `f` for every replication on a pool of `cfg.workers` threads and
/// returns the results in replication order.
fn per_replication<T: Send>(cfg: &ExperimentConfig, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|k| {
                f(k).map_err(|e| Error::Replication {
                    replication: k,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Writes each replication's sample.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    per_replication(cfg, |k| {
        let data = generate(cfg, cfg.replication_seed(k))?;
        let path = data_path(out, k);
        ensure_parent(&path)?;
        data.write_csv_file(&path)
    })?;
    Ok(())
}

/// Trains on each saved sample and writes the models.
pub fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    per_replication(cfg, |k| {
        let data = ColumnarDataset::read_csv_file(&data_path(out, k))?;
        let (models, _) = train(cfg, &data, cfg.replication_seed(k))?;
        models.save(&models_dir(out, k))
    })?;
    Ok(())
}

/// Evaluates the queries against each saved sample and model set.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let points = query_points(cfg)?;
    per_replication(cfg, |k| {
        let data = ColumnarDataset::read_csv_file(&data_path(out, k))?;
        let models = TrainedModels::load(&models_dir(out, k))?;
        let rows = estimate(cfg, &models, &data, &points)?;
        let path = estimates_path(out, k);
        ensure_parent(&path)?;
        write_csv_rows(&path, &rows)
    })?;
    Ok(())
}

/// Recomputes `aggregate.csv` from the per-replication reports.
pub fn run_report(cfg: &ExperimentConfig) -> Result<Vec<AggregateRow>> {
    let out = &cfg.output_dir;
    let mut rows = Vec::new();
    for k in 0..cfg.replications {
        rows.extend(read_csv_rows::<ReportRow>(&report_path(out, k))?);
    }
    let agg = aggregate(&rows);
    write_csv_rows(&out.join("aggregate.csv"), &agg)?;
    Ok(agg)
}

/// The full pipeline with ground truth. With `out` set, every intermediate
/// file, the reports and the manifest are written there.
pub fn evaluate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let points = query_points(cfg)?;
    let truths = ground_truths(cfg, &points)?;
    let results = per_replication(cfg, |k| {
        let seed = cfg.replication_seed(k);
        let data = generate(cfg, seed)?;
        let (models, training) = train(cfg, &data, seed)?;
        let estimates = estimate(cfg, &models, &data, &points)?;
        let rows: Vec<ReportRow> = estimates
            .iter()
            .zip(&truths)
            .map(|(e, &t)| ReportRow::new(k, e, t))
            .collect();
        if let Some(out) = out {
            let path = data_path(out, k);
            ensure_parent(&path)?;
            data.write_csv_file(&path)?;
            models.save(&models_dir(out, k))?;
            let path = estimates_path(out, k);
            ensure_parent(&path)?;
            write_csv_rows(&path, &estimates)?;
            write_csv_rows(&report_path(out, k), &rows)?;
        }
        log::info!("replication {k} done");
        let record = ReplicationRecord {
            replication: k,
            seed,
            n: data.len(),
            fingerprints: models.fingerprints(),
            training,
        };
        Ok((record, rows))
    })?;
    let mut rows = Vec::new();
    let mut replications = Vec::new();
    for (rec, r) in results {
        replications.push(rec);
        rows.extend(r);
    }
    let agg = aggregate(&rows);
    if let Some(out) = out {
        write_csv_rows(&out.join("aggregate.csv"), &agg)?;
        write_manifest(cfg, &replications, &out.join("run_manifest.json"))?;
    }
    Ok(RunSummary {
        rows,
        aggregate: agg,
        replications,
    })
}

/// [`evaluate`] writing into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    create_dir(&cfg.output_dir)?;
    evaluate(cfg, Some(&cfg.output_dir))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    model_formats: [&'static str; 2],
    config: &'a ExperimentConfig,
    replications: &'a [ReplicationRecord],
}

fn write_manifest(cfg: &ExperimentConfig, replications: &[ReplicationRecord], path: &Path) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        model_formats: ["causal-embed/stage1", "causal-embed/regressor"],
        config: cfg,
        replications,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}
