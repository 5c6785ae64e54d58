//! World construction, pretraining, stream runs, and the artifact files the
//! command-line surface writes.

use crate::config::{ExperimentConfig, MethodName, Mode};
use crate::CliError;
use oclab_core::autodiff::Tape;
use oclab_core::data::{base_task, shifted_task, synth_dataset, Dataset, Split, Utterance};
use oclab_core::metrics::{
    evaluate_model, mean, pooled_error_rate, significance_stars, std_dev, wilcoxon_signed_rank,
    EvalReport,
};
use oclab_core::model::{
    bind, greedy_decode, hybrid_loss_on, sgd_step, Checkpoint, KdConfig, ModelConfig,
    RandomEffects, TrainItem,
};
use oclab_core::ocl::{AosConfig, AosMethod, ErMethod, FtMethod, Labeler, Method, PlSourceModel};
use oclab_core::selftrain::{NgramLm, PlConfig};
use oclab_core::stream::{StreamSchedule, StreamSegment, TaskStream};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Everything a run needs that is derived from the data section: task
/// specs, splits, and an optional n-gram model fit on the base task's
/// pretraining transcripts.
pub struct World {
    pub pretrain: Dataset,
    pub dev: Dataset,
    /// Stream pools, one per configured task, in declaration order.
    pub pools: Vec<Dataset>,
    /// Test splits aligned with `pools`.
    pub tests: Vec<Dataset>,
    pub lm: Option<NgramLm>,
}

impl World {
    pub fn sources(&self) -> HashMap<String, &Dataset> {
        self.pools.iter().map(|d| (d.spec.id.clone(), d)).collect()
    }

    pub fn test_sets(&self) -> Vec<(&str, &Dataset)> {
        self.tests.iter().map(|d| (d.spec.id.as_str(), d)).collect()
    }
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World, CliError> {
    let defs = &cfg.data.tasks;
    let base = base_task(&defs[0].name, &cfg.data.params, defs[0].seed);
    let mut specs = vec![base.clone()];
    for def in &defs[1..] {
        let kind = def.shift.expect("validated: shifted tasks carry a kind");
        specs.push(shifted_task(&base, &def.name, kind, def.magnitude, def.seed));
    }

    let d = &cfg.data;
    let pretrain = synth_dataset(&specs[0], Split::Pretrain, d.pretrain_utterances, d.seed)?;
    let dev = synth_dataset(&specs[0], Split::Dev, d.dev_utterances, d.seed)?;
    let mut pools = Vec::with_capacity(specs.len());
    let mut tests = Vec::with_capacity(specs.len());
    for spec in &specs {
        pools.push(synth_dataset(spec, Split::Stream, d.stream_utterances, d.seed)?);
        tests.push(synth_dataset(spec, Split::Test, d.test_utterances, d.seed)?);
    }

    let lm = if cfg.method.mode == Mode::Unsupervised {
        match cfg.method.st.as_ref().and_then(|st| st.lm.as_ref()) {
            Some(lmcfg) => {
                let corpus: Vec<Vec<usize>> =
                    pretrain.utterances.iter().map(|u| u.tokens.clone()).collect();
                Some(NgramLm::train(
                    lmcfg.order,
                    lmcfg.k,
                    &cfg.model.symbols(),
                    &corpus,
                )?)
            }
            None => None,
        }
    } else {
        None
    };

    Ok(World {
        pretrain,
        dev,
        pools,
        tests,
        lm,
    })
}

/// Same recipe, disjoint worlds: task and data seeds are displaced so tuning
/// never touches the tasks the main runs use.
pub fn held_out_config(cfg: &ExperimentConfig, seed_limit: usize) -> ExperimentConfig {
    const OFFSET: u64 = 7777;
    let mut held = cfg.clone();
    held.data.seed = held.data.seed.wrapping_add(OFFSET);
    for t in &mut held.data.tasks {
        t.seed = t.seed.wrapping_add(OFFSET);
    }
    held.seeds.truncate(seed_limit.max(1));
    held
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_wer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub initial_dev_wer: f64,
    pub final_dev_wer: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochStat>,
}

pub struct PretrainOutcome {
    pub ckpt: Checkpoint,
    pub summary: PretrainSummary,
}

fn supervised_item(u: &Utterance) -> TrainItem {
    TrainItem {
        features: u.features.clone(),
        ctc_tokens: u.tokens.clone(),
        dec_tokens: u.tokens.clone(),
    }
}

/// Pooled greedy-decode error rate, the cheap metric the pretraining loop
/// watches between epochs.
pub fn greedy_wer(mcfg: &ModelConfig, ckpt: &Checkpoint, ds: &Dataset) -> Result<f64, CliError> {
    let mut pairs = Vec::with_capacity(ds.utterances.len());
    for u in &ds.utterances {
        let hyp = greedy_decode(mcfg, ckpt, &u.features)?;
        pairs.push((u.tokens.clone(), hyp));
    }
    Ok(pooled_error_rate(&pairs))
}

/// Supervised epochs on the base task. Zero epochs returns the seeded random
/// initialization untouched.
pub fn pretrain(cfg: &ExperimentConfig, world: &World) -> Result<PretrainOutcome, CliError> {
    let p = &cfg.pretrain;
    let mut ckpt = Checkpoint::random(&cfg.model, p.seed)?;
    let mut fx = RandomEffects::training(p.seed ^ 0xEFFE_C755);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5875_FF1E);

    let items: Vec<TrainItem> = world.pretrain.utterances.iter().map(supervised_item).collect();
    let initial_dev_wer = greedy_wer(&cfg.model, &ckpt, &world.dev)?;
    let mut history = Vec::new();
    let mut final_dev_wer = initial_dev_wer;

    for epoch in 0..p.epochs {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in idx.chunks(p.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &ckpt);
            let loss = hybrid_loss_on(&mut tape, &cfg.model, &bound, &batch, &mut fx)?;
            tape.backward(loss)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(CliError::Divergence(format!(
                    "pretraining loss became {v} in epoch {epoch}"
                )));
            }
            sgd_step(&mut ckpt, tape, &bound, p.lr)?;
            losses.push(v);
        }
        let dev_wer = greedy_wer(&cfg.model, &ckpt, &world.dev)?;
        final_dev_wer = dev_wer;
        history.push(EpochStat {
            epoch,
            mean_loss: mean(&losses),
            dev_wer,
        });
        if p.early_stop_wer.is_some_and(|t| dev_wer <= t) {
            break;
        }
    }

    let epochs_run = history.len();
    Ok(PretrainOutcome {
        ckpt,
        summary: PretrainSummary {
            initial_dev_wer,
            final_dev_wer,
            epochs_run,
            history,
        },
    })
}

/// Pass count an adapted update makes on each batch, after per-method
/// defaulting.
fn effective_passes(cfg: &ExperimentConfig) -> usize {
    cfg.method.passes.unwrap_or(match cfg.method.name {
        MethodName::AosU => cfg.hyper.k_passes,
        _ => 1,
    })
}

pub fn build_method(
    cfg: &ExperimentConfig,
    world: &World,
    theta0: Checkpoint,
    run_seed: u64,
) -> Result<Method, CliError> {
    let labeler = match cfg.method.mode {
        Mode::Supervised => Labeler::supervised(),
        Mode::Unsupervised => {
            let st = cfg.method.st.as_ref().expect("validated: st present");
            let pl = PlConfig {
                route: st.route,
                beam: cfg.hyper.pl_beam,
                max_len: cfg.hyper.pl_max_len,
                lm_lambda: st.lm.as_ref().map_or(0.0, |l| l.lambda),
                filter: st.filter.clone(),
            };
            Labeler::self_training(pl, world.lm.clone())?
        }
    };

    let h = &cfg.hyper;
    let m = &cfg.method;
    Ok(match m.name {
        MethodName::Ft => Method::Ft(FtMethod::new(
            cfg.model.clone(),
            theta0,
            labeler,
            h.lr,
            run_seed,
        )),
        MethodName::Er => Method::Er(ErMethod::new(
            cfg.model.clone(),
            theta0,
            labeler,
            h.lr,
            h.memory,
            h.replay.unwrap_or(cfg.stream.batch_size),
            run_seed,
        )),
        MethodName::Aos | MethodName::AosU => {
            let kd_default = m.name == MethodName::Aos && m.mode == Mode::Supervised;
            let kd = m.kd.unwrap_or(kd_default).then_some(KdConfig {
                weight: h.kd_weight,
                temperature: h.kd_temperature,
            });
            let pl_source = m.pl_from.unwrap_or(match m.name {
                MethodName::AosU => PlSourceModel::Adapted,
                _ => PlSourceModel::Final,
            });
            let acfg = AosConfig {
                lr: h.lr,
                tau: h.tau,
                tau2: h.tau2,
                kd,
                pl_source,
                k_passes: effective_passes(cfg),
                sequential_passes: m.sequential_passes,
            };
            Method::Aos(AosMethod::new(
                cfg.model.clone(),
                theta0,
                labeler,
                acfg,
                run_seed,
            )?)
        }
    })
}

pub fn make_schedule(cfg: &ExperimentConfig, run_seed: u64) -> StreamSchedule {
    let order: Vec<String> = match &cfg.stream.order {
        Some(o) => o.clone(),
        None => cfg.data.tasks.iter().map(|t| t.name.clone()).collect(),
    };
    StreamSchedule {
        segments: order
            .into_iter()
            .map(|task| StreamSegment {
                task,
                batches: cfg.stream.batches_per_task,
            })
            .collect(),
        batch_size: cfg.stream.batch_size,
        seed: cfg.stream.seed ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        supervised: cfg.method.mode == Mode::Supervised,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditSummary {
    pub batches: usize,
    pub optimizer_steps: usize,
    pub skipped_batches: usize,
    pub utterances: usize,
    pub unique_utterances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub avg_wer: f64,
    pub report: EvalReport,
    /// Pre-averaging model, recorded as a diagnostic.
    pub adapted_report: Option<EvalReport>,
    pub audit: AuditSummary,
    pub mean_step_loss: f64,
    pub dropped: usize,
}

/// One full pass over the scheduled stream, then evaluation on every task's
/// test split.
pub fn run_once(
    cfg: &ExperimentConfig,
    world: &World,
    theta0: &Checkpoint,
    run_seed: u64,
) -> Result<SeedRun, CliError> {
    let schedule = make_schedule(cfg, run_seed);
    let sources = world.sources();
    let stream = TaskStream::new(&schedule, &sources)?;
    let mut method = build_method(cfg, world, theta0.clone(), run_seed)?;

    let steps_per_batch = if cfg.method.sequential_passes
        && matches!(cfg.method.name, MethodName::Aos | MethodName::AosU)
    {
        effective_passes(cfg)
    } else {
        1
    };

    let mut audit = AuditSummary {
        batches: 0,
        optimizer_steps: 0,
        skipped_batches: 0,
        utterances: 0,
        unique_utterances: 0,
    };
    let mut ids: HashSet<String> = HashSet::new();
    let mut losses = Vec::new();
    let mut dropped = 0usize;
    for batch in stream {
        audit.batches += 1;
        for u in &batch.utterances {
            audit.utterances += 1;
            ids.insert(u.id.clone());
        }
        let stats = method.step(&batch)?;
        dropped += stats.dropped;
        if stats.stepped {
            if !stats.loss.is_finite() {
                return Err(CliError::Divergence(format!(
                    "non-finite loss {} at batch {} with seed {run_seed}",
                    stats.loss, batch.index
                )));
            }
            audit.optimizer_steps += steps_per_batch;
            losses.push(stats.loss);
        } else {
            audit.skipped_batches += 1;
        }
    }
    audit.unique_utterances = ids.len();

    let sets = world.test_sets();
    let report = evaluate_model(
        &cfg.model,
        method.model(),
        &sets,
        cfg.hyper.beam,
        cfg.hyper.max_len,
    )?;
    let adapted_report = match &method {
        Method::Aos(m) => Some(evaluate_model(
            &cfg.model,
            &m.state.adapted,
            &sets,
            cfg.hyper.beam,
            cfg.hyper.max_len,
        )?),
        _ => None,
    };

    Ok(SeedRun {
        seed: run_seed,
        avg_wer: report.avg_wer,
        report,
        adapted_report,
        audit,
        mean_step_loss: mean(&losses),
        dropped,
    })
}

pub fn run_seeds(
    cfg: &ExperimentConfig,
    world: &World,
    theta0: &Checkpoint,
) -> Result<Vec<SeedRun>, CliError> {
    cfg.seeds
        .par_iter()
        .map(|&s| run_once(cfg, world, theta0, s))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifact {
    pub run_id: String,
    pub method: String,
    pub mode: String,
    pub config: ExperimentConfig,
    /// Evaluation of the starting checkpoint, before any adaptation.
    pub initial: EvalReport,
    pub runs: Vec<SeedRun>,
    pub mean_avg_wer: f64,
    pub std_avg_wer: f64,
    pub timing_seconds: f64,
}

pub fn run_all(
    cfg: &ExperimentConfig,
    world: &World,
    theta0: &Checkpoint,
) -> Result<RunArtifact, CliError> {
    let started = Instant::now();
    let sets = world.test_sets();
    let initial = evaluate_model(&cfg.model, theta0, &sets, cfg.hyper.beam, cfg.hyper.max_len)?;
    let runs = run_seeds(cfg, world, theta0)?;
    let wers: Vec<f64> = runs.iter().map(|r| r.avg_wer).collect();
    Ok(RunArtifact {
        run_id: cfg.run_id(),
        method: cfg.method.name.as_str().to_string(),
        mode: cfg.method.mode.as_str().to_string(),
        config: cfg.clone(),
        initial,
        runs,
        mean_avg_wer: mean(&wers),
        std_avg_wer: std_dev(&wers),
        timing_seconds: started.elapsed().as_secs_f64(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run_csv(art: &RunArtifact) -> String {
    let mut s = String::from("seed,avg_wer,batches,steps,skipped,dropped,mean_loss\n");
    for r in &art.runs {
        s.push_str(&format!(
            "{},{:.4},{},{},{},{},{:.6}\n",
            r.seed,
            r.avg_wer,
            r.audit.batches,
            r.audit.optimizer_steps,
            r.audit.skipped_batches,
            r.dropped,
            r.mean_step_loss
        ));
    }
    s.push_str(&format!("mean,{:.4},,,,,\n", art.mean_avg_wer));
    s.push_str(&format!("std,{:.4},,,,,\n", art.std_avg_wer));
    s.push_str(&format!("initial,{:.4},,,,,\n", art.initial.avg_wer));
    s
}

pub fn write_run_artifact(dir: &Path, art: &RunArtifact) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("artifact.json"), art)?;
    write_text(&dir.join("artifact.csv"), &run_csv(art))?;
    for run in &art.runs {
        let sdir = dir.join(format!("seed_{}", run.seed));
        std::fs::create_dir_all(&sdir)?;
        write_json(&sdir.join("report.json"), &run.report)?;
        write_text(&sdir.join("report.csv"), &run.report.to_csv())?;
        if let Some(a) = &run.adapted_report {
            write_json(&sdir.join("adapted_report.json"), a)?;
        }
    }
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<RunArtifact, CliError> {
    let file = if path.is_dir() {
        path.join("artifact.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", file.display())))
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let reference = Checkpoint::zeros(&cfg.model)?;
    ckpt.compatible(&reference).map_err(|e| {
        CliError::Config(format!("checkpoint does not match the configured model: {e}"))
    })?;
    Ok(ckpt)
}

pub fn cmd_pretrain(config_path: &Path, out_flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let world = build_world(&cfg)?;
    let outcome = pretrain(&cfg, &world)?;

    let dir = cfg.out_root(out_flag).join(cfg.run_id());
    std::fs::create_dir_all(&dir)?;
    outcome.ckpt.save(&dir.join("theta0.ckpt"))?;

    #[derive(Serialize)]
    struct PretrainArtifact<'a> {
        run_id: String,
        config: &'a ExperimentConfig,
        summary: &'a PretrainSummary,
    }
    write_json(
        &dir.join("pretrain.json"),
        &PretrainArtifact {
            run_id: cfg.run_id(),
            config: &cfg,
            summary: &outcome.summary,
        },
    )?;

    println!(
        "pretrain {}  epochs_run={}  dev WER {:.2} -> {:.2}",
        cfg.run_id(),
        outcome.summary.epochs_run,
        outcome.summary.initial_dev_wer,
        outcome.summary.final_dev_wer
    );
    println!("  wrote {}", dir.display());
    Ok(dir)
}

pub fn cmd_run(
    config_path: &Path,
    checkpoint: Option<&Path>,
    out_flag: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let world = build_world(&cfg)?;
    let theta0 = match checkpoint {
        Some(p) => load_checkpoint(&cfg, p)?,
        None => pretrain(&cfg, &world)?.ckpt,
    };
    let art = run_all(&cfg, &world, &theta0)?;

    let dir = cfg.out_root(out_flag).join(&art.run_id);
    write_run_artifact(&dir, &art)?;
    theta0.save(&dir.join("theta0.ckpt"))?;

    println!(
        "run {}  {}/{}  seeds={}",
        art.run_id,
        art.method,
        art.mode,
        art.runs.len()
    );
    println!("  initial avg WER {:.2}", art.initial.avg_wer);
    println!(
        "  final   avg WER {:.2} +- {:.2}",
        art.mean_avg_wer, art.std_avg_wer
    );
    println!("  wrote {}", dir.display());
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSummary {
    pub p: f64,
    pub stars: String,
    /// Mean change against the compared variant; negative is better.
    pub delta: f64,
}

fn paired_test(base: &[f64], cand: &[f64]) -> Result<TestSummary, CliError> {
    let w = wilcoxon_signed_rank(cand, base)?;
    Ok(TestSummary {
        p: w.p,
        stars: significance_stars(w.p).to_string(),
        delta: mean(cand) - mean(base),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub pl_source: String,
    pub kd: bool,
    pub passes: usize,
    pub per_seed: Vec<f64>,
    pub mean_avg_wer: f64,
    pub std_avg_wer: f64,
    pub vs_first: Option<TestSummary>,
    pub vs_previous: Option<TestSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateArtifact {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
    pub timing_seconds: f64,
}

fn ablate_csv(art: &AblateArtifact) -> String {
    let mut s =
        String::from("label,pl_source,kd,passes,mean_avg_wer,std_avg_wer,p_vs_first,p_vs_previous\n");
    for v in &art.variants {
        let pf = v
            .vs_first
            .as_ref()
            .map_or(String::new(), |t| format!("{:.6}", t.p));
        let pp = v
            .vs_previous
            .as_ref()
            .map_or(String::new(), |t| format!("{:.6}", t.p));
        s.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{},{}\n",
            v.label, v.pl_source, v.kd, v.passes, v.mean_avg_wer, v.std_avg_wer, pf, pp
        ));
    }
    s
}

/// Component study around the unsupervised averaging method: pseudo-label
/// source, pass count, and distillation are toggled while the world, the
/// starting checkpoint, and the seed list stay fixed.
pub fn cmd_ablate(config_path: &Path, out_flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    if cfg.method.name != MethodName::AosU || cfg.method.mode != Mode::Unsupervised {
        return Err(CliError::Config(
            "ablate expects method.name = \"aos-u\" with mode = \"unsupervised\"".into(),
        ));
    }
    let started = Instant::now();
    let world = build_world(&cfg)?;
    let theta0 = pretrain(&cfg, &world)?.ckpt;

    let k = cfg.hyper.k_passes;
    let plans: [(&str, PlSourceModel, bool, usize); 4] = [
        ("pl-final", PlSourceModel::Final, false, 1),
        ("pl-adapted", PlSourceModel::Adapted, false, 1),
        ("pl-adapted-multipass", PlSourceModel::Adapted, false, k),
        ("pl-adapted-multipass-kd", PlSourceModel::Adapted, true, k),
    ];

    let mut variants = Vec::new();
    let mut first: Option<Vec<f64>> = None;
    let mut previous: Option<Vec<f64>> = None;
    for (label, src, kd, passes) in plans {
        let mut vcfg = cfg.clone();
        vcfg.method.pl_from = Some(src);
        vcfg.method.kd = Some(kd);
        vcfg.method.passes = Some(passes);
        let runs = run_seeds(&vcfg, &world, &theta0)?;
        let wers: Vec<f64> = runs.iter().map(|r| r.avg_wer).collect();

        let vs_first = first.as_deref().map(|b| paired_test(b, &wers)).transpose()?;
        let vs_previous = previous
            .as_deref()
            .map(|b| paired_test(b, &wers))
            .transpose()?;
        variants.push(VariantResult {
            label: label.to_string(),
            pl_source: match src {
                PlSourceModel::Final => "final".to_string(),
                PlSourceModel::Adapted => "adapted".to_string(),
            },
            kd,
            passes,
            per_seed: wers.clone(),
            mean_avg_wer: mean(&wers),
            std_avg_wer: std_dev(&wers),
            vs_first,
            vs_previous,
        });
        if first.is_none() {
            first = Some(wers.clone());
        }
        previous = Some(wers);
    }

    let art = AblateArtifact {
        run_id: cfg.run_id(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        variants,
        timing_seconds: started.elapsed().as_secs_f64(),
    };

    let dir = cfg.out_root(out_flag).join(format!("{}-ablate", art.run_id));
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("ablate.json"), &art)?;
    write_text(&dir.join("ablate.csv"), &ablate_csv(&art))?;

    println!("ablate {}  seeds={}", art.run_id, art.seeds.len());
    println!(
        "  {:<26} {:>14}  {:<18} {:<18}",
        "variant", "avg WER", "vs first", "vs previous"
    );
    for v in &art.variants {
        let fmt = |t: &Option<TestSummary>| {
            t.as_ref()
                .map_or("-".to_string(), |t| format!("p={:.4} {}", t.p, t.stars))
        };
        println!(
            "  {:<26} {:>6.2} +- {:<5.2}  {:<18} {:<18}",
            v.label,
            v.mean_avg_wer,
            v.std_avg_wer,
            fmt(&v.vs_first),
            fmt(&v.vs_previous)
        );
    }
    println!("  wrote {}", dir.display());
    Ok(dir)
}

type Combo = BTreeMap<String, f64>;

fn combo(pairs: &[(&str, f64)]) -> Combo {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn hyper_grid(name: MethodName) -> Vec<Combo> {
    let lrs = [0.005, 0.01, 0.02];
    match name {
        MethodName::Ft => lrs.iter().map(|&lr| combo(&[("lr", lr)])).collect(),
        MethodName::Er => {
            let mut grid = Vec::new();
            for &lr in &lrs {
                for &m in &[30.0, 60.0, 120.0] {
                    grid.push(combo(&[("lr", lr), ("memory", m)]));
                }
            }
            grid
        }
        MethodName::Aos | MethodName::AosU => {
            let taus = [0.5, 1.0, 2.0];
            let mut grid = Vec::new();
            for &a in &taus {
                for &b in &taus {
                    grid.push(combo(&[("tau", a), ("tau2", b)]));
                }
            }
            grid
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, values: &Combo) {
    for (key, &v) in values {
        match key.as_str() {
            "lr" => cfg.hyper.lr = v,
            "memory" => cfg.hyper.memory = v as usize,
            "tau" => cfg.hyper.tau = v,
            "tau2" => cfg.hyper.tau2 = v,
            other => unreachable!("unknown grid key {other}"),
        }
    }
}

fn combo_label(values: &Combo) -> String {
    values
        .iter()
        .map(|(k, v)| {
            if *v == v.trunc() && v.abs() < 1e6 {
                format!("{k}={v:.0}")
            } else {
                format!("{k}={v}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneEntry {
    pub params: Combo,
    pub per_seed: Vec<f64>,
    pub mean_avg_wer: f64,
    pub std_avg_wer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneArtifact {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub held_out_config: ExperimentConfig,
    /// Ranked best first.
    pub entries: Vec<TuneEntry>,
    pub best: Combo,
    pub timing_seconds: f64,
}

/// Grid search on a displaced copy of the world so the selected values are
/// never fit to the tasks the main runs report on.
pub fn cmd_tune(
    config_path: &Path,
    out_flag: Option<&Path>,
    seed_limit: usize,
) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let started = Instant::now();
    let held = held_out_config(&cfg, seed_limit);
    let world = build_world(&held)?;
    let theta0 = pretrain(&held, &world)?.ckpt;

    let mut entries = Vec::new();
    for values in hyper_grid(held.method.name) {
        let mut vcfg = held.clone();
        apply_overrides(&mut vcfg, &values);
        let runs = run_seeds(&vcfg, &world, &theta0)?;
        let wers: Vec<f64> = runs.iter().map(|r| r.avg_wer).collect();
        entries.push(TuneEntry {
            params: values,
            per_seed: wers.clone(),
            mean_avg_wer: mean(&wers),
            std_avg_wer: std_dev(&wers),
        });
    }
    entries.sort_by(|a, b| a.mean_avg_wer.total_cmp(&b.mean_avg_wer));

    let art = TuneArtifact {
        run_id: cfg.run_id(),
        seeds: held.seeds.clone(),
        best: entries[0].params.clone(),
        held_out_config: held,
        entries,
        timing_seconds: started.elapsed().as_secs_f64(),
    };

    let dir = cfg.out_root(out_flag).join(format!("{}-tune", art.run_id));
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("tune.json"), &art)?;
    let mut csv = String::from("rank,params,mean_avg_wer,std_avg_wer\n");
    for (i, e) in art.entries.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4}\n",
            i + 1,
            combo_label(&e.params),
            e.mean_avg_wer,
            e.std_avg_wer
        ));
    }
    write_text(&dir.join("tune.csv"), &csv)?;

    println!(
        "tune {}  method={}  seeds={}",
        art.run_id,
        cfg.method.name.as_str(),
        art.seeds.len()
    );
    for (i, e) in art.entries.iter().enumerate() {
        println!(
            "  {:>2}. {:<24} {:>6.2} +- {:.2}",
            i + 1,
            combo_label(&e.params),
            e.mean_avg_wer,
            e.std_avg_wer
        );
    }
    println!("  best: {}", combo_label(&art.best));
    println!("  wrote {}", dir.display());
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareEntry {
    pub label: String,
    pub run_id: String,
    pub method: String,
    pub mode: String,
    pub mean_avg_wer: f64,
    pub std_avg_wer: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareCell {
    pub a: String,
    pub b: String,
    pub p: f64,
    pub stars: String,
    /// Label of the lower-error run, or "tie".
    pub better: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareArtifact {
    pub seeds: Vec<u64>,
    pub entries: Vec<CompareEntry>,
    pub cells: Vec<CompareCell>,
}

/// Pairwise significance over run artifacts that share a seed list. WERs are
/// paired by seed before testing.
pub fn cmd_compare(paths: &[PathBuf], out_flag: Option<&Path>) -> Result<PathBuf, CliError> {
    if paths.len() < 2 {
        return Err(CliError::Config("compare needs at least two artifacts".into()));
    }
    let arts: Vec<RunArtifact> = paths
        .iter()
        .map(|p| load_artifact(p))
        .collect::<Result<_, _>>()?;

    let mut seeds: Vec<u64> = arts[0].runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    for a in &arts[1..] {
        let mut s: Vec<u64> = a.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        if s != seeds {
            return Err(CliError::Config(
                "artifacts ran different seed lists; comparison must pair by seed".into(),
            ));
        }
    }

    let entries: Vec<CompareEntry> = arts
        .iter()
        .map(|a| {
            let by_seed: HashMap<u64, f64> = a.runs.iter().map(|r| (r.seed, r.avg_wer)).collect();
            let per_seed: Vec<f64> = seeds.iter().map(|s| by_seed[s]).collect();
            CompareEntry {
                label: format!("{}:{}", a.method, &a.run_id[..6.min(a.run_id.len())]),
                run_id: a.run_id.clone(),
                method: a.method.clone(),
                mode: a.mode.clone(),
                mean_avg_wer: mean(&per_seed),
                std_avg_wer: std_dev(&per_seed),
                per_seed,
            }
        })
        .collect();

    let mut cells = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let t = paired_test(&entries[j].per_seed, &entries[i].per_seed)?;
            let better = if t.delta < 0.0 {
                entries[i].label.clone()
            } else if t.delta > 0.0 {
                entries[j].label.clone()
            } else {
                "tie".to_string()
            };
            cells.push(CompareCell {
                a: entries[i].label.clone(),
                b: entries[j].label.clone(),
                p: t.p,
                stars: t.stars,
                better,
            });
        }
    }

    let art = CompareArtifact {
        seeds,
        entries,
        cells,
    };

    let dir = match out_flag {
        Some(p) => p.to_path_buf(),
        None => {
            let first = &paths[0];
            if first.is_dir() {
                first.clone()
            } else {
                first.parent().map(Path::to_path_buf).unwrap_or_default()
            }
        }
    };
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("compare.json"), &art)?;

    let mut csv = String::from("a,b,p,stars,better\n");
    for c in &art.cells {
        csv.push_str(&format!("{},{},{:.6},{},{}\n", c.a, c.b, c.p, c.stars, c.better));
    }
    write_text(&dir.join("compare.csv"), &csv)?;

    println!("compare  seeds={}", art.seeds.len());
    for e in &art.entries {
        println!(
            "  {:<20} avg WER {:>6.2} +- {:.2}",
            e.label, e.mean_avg_wer, e.std_avg_wer
        );
    }
    for c in &art.cells {
        println!(
            "  {:<20} vs {:<20} p={:.4} {:<3} better: {}",
            c.a, c.b, c.p, c.stars, c.better
        );
    }
    println!("  wrote {}", dir.display());
    Ok(dir)
}

/// Evaluate a saved checkpoint on the configured test splits.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    out_flag: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let world = build_world(&cfg)?;
    let ckpt = load_checkpoint(&cfg, checkpoint_path)?;
    let report = evaluate_model(
        &cfg.model,
        &ckpt,
        &world.test_sets(),
        cfg.hyper.beam,
        cfg.hyper.max_len,
    )?;

    #[derive(Serialize)]
    struct EvalArtifact<'a> {
        run_id: String,
        checkpoint: String,
        config: &'a ExperimentConfig,
        report: &'a EvalReport,
    }
    let dir = cfg.out_root(out_flag).join(format!("{}-eval", cfg.run_id()));
    std::fs::create_dir_all(&dir)?;
    write_json(
        &dir.join("eval.json"),
        &EvalArtifact {
            run_id: cfg.run_id(),
            checkpoint: checkpoint_path.display().to_string(),
            config: &cfg,
            report: &report,
        },
    )?;
    write_text(&dir.join("eval.csv"), &report.to_csv())?;

    println!("eval  avg WER {:.2}", report.avg_wer);
    for t in &report.tasks {
        println!("  {:<12} WER {:>6.2}  ({} utterances)", t.task, t.wer, t.utterances);
    }
    println!("  wrote {}", dir.display());
    Ok(dir)
}
