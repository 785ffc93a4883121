use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use super::config::*;
use super::report::{comparison_table, RunSummary, REPORT_FILE, SUMMARY_FILE};
use super::{config_hash, Artifacts, ExperimentError};
use crate::arch::{build_default_arch, count_flops_params, instantiate_toy, ArchSpec};
use crate::datagen::{gen_glyph_images, gen_pair_protocol, gen_sphere_samples, PairProtocol, SphereDatasetSpec};
use crate::distill::DistillSpec;
use crate::eval::{rank1_identification, roc_table, roc_to_csv, tar_at_far, tenfold_verification, IdentificationSet, ScoredPairs};
use crate::format::shortest;
use crate::losses::{curve_to_csv, logit_curve_table, overlap_map, LossVariant, MarginLossSpec};
use crate::nn::{
    dense_net, embed, evaluate_accuracy, train, train_with, ClassHead, Dataset, Distillation, Sequential, TrainConfig,
    TrainHooks,
};
use crate::rng::SplitMix64;

const INIT_STREAM: u64 = 11;
const TEACHER_STREAM: u64 = 12;
const PAIR_STREAM: u64 = 13;
const DISTRACTOR_STREAM: u64 = 14;

/// Files written and training summaries produced by one experiment.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub summaries: Vec<RunSummary>,
}

struct Ctx<'a> {
    seed: u64,
    base: &'a Path,
}

impl Ctx<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn load_arch(&self, path: Option<&PathBuf>) -> Result<ArchSpec, ExperimentError> {
        let Some(p) = path else {
            return Ok(build_default_arch());
        };
        let p = self.resolve(p);
        let text = std::fs::read_to_string(&p).map_err(ExperimentError::io(&p))?;
        serde_json::from_str(&text).map_err(|source| ExperimentError::ConfigParse { path: p, source })
    }

    fn pair_seed(&self) -> u64 {
        SplitMix64::new(self.seed).derive(&[PAIR_STREAM]).next_u64()
    }
}

/// Runs `config`, writing artifacts under `out`. Relative paths inside the
/// config resolve against `base`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, base: &Path) -> Result<RunOutput, ExperimentError> {
    let ctx = Ctx {
        seed: config.seed,
        base,
    };
    let mut art = Artifacts::new(out, config_hash(config), config.seed)?;
    let mut summaries = Vec::new();
    match &config.experiment {
        Experiment::LogitCurves(c) => logit_curves(c, &mut art)?,
        Experiment::OverlapMap(c) => overlap_maps(c, &mut art)?,
        Experiment::Flops(c) => flops(&ctx, c, &mut art)?,
        Experiment::Train(c) => {
            let stages = [StageConfig {
                loss: c.loss,
                steps: c.steps,
            }];
            summaries.push(training(&ctx, &mut art, "train", c, &stages, None)?);
        }
        Experiment::MarginSweep(c) => summaries = margin_sweep(&ctx, c, &mut art)?,
        Experiment::TwoStage(c) => {
            let base = TrainExperiment {
                data: c.data,
                model: c.model.clone(),
                loss: c.finetune.loss,
                steps: c.pretrain.steps + c.finetune.steps,
                optim: c.optim.clone(),
                verify: c.verify,
            };
            summaries.push(training(&ctx, &mut art, "two-stage", &base, &[c.pretrain, c.finetune], None)?);
        }
        Experiment::Distill(c) => {
            let stages = [StageConfig {
                loss: c.student.loss,
                steps: c.student.steps,
            }];
            summaries.push(training(
                &ctx,
                &mut art,
                "distill",
                &c.student,
                &stages,
                Some((&c.distill, &c.teacher)),
            )?);
        }
        Experiment::Eval(c) => evaluate(&ctx, c, &mut art)?,
    }
    Ok(RunOutput {
        files: art.into_written(),
        summaries,
    })
}

/// File-name fragment identifying a loss setting.
fn slug(spec: &MarginLossSpec) -> String {
    let s = shortest(spec.s);
    match spec.variant {
        LossVariant::Softmax => "softmax".into(),
        LossVariant::NSoftmax => format!("n-softmax_s{s}"),
        LossVariant::CombinedMargin => format!(
            "combined_m1{}_m2{}_m3{}_s{s}",
            shortest(spec.m1),
            shortest(spec.m2),
            shortest(spec.m3)
        ),
        LossVariant::ArcFace if spec.arcface_clip => format!("arcface-clipped_m{}_s{s}", shortest(spec.m)),
        v => format!("{v}_m{}_s{s}", shortest(spec.m)),
    }
}

fn unique_slugs(losses: &[MarginLossSpec]) -> Result<Vec<String>, ExperimentError> {
    if losses.is_empty() {
        return Err(ExperimentError::Invalid("no losses configured".into()));
    }
    let slugs: Vec<String> = losses.iter().map(slug).collect();
    for (i, s) in slugs.iter().enumerate() {
        if slugs[..i].contains(s) {
            return Err(ExperimentError::Invalid(format!("loss {s} listed twice")));
        }
    }
    Ok(slugs)
}

fn logit_curves(c: &LogitCurvesConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    for (spec, name) in c.losses.iter().zip(unique_slugs(&c.losses)?) {
        let rows = logit_curve_table(spec, c.points)?;
        art.csv(&format!("logit_{name}.csv"), &curve_to_csv(&rows))?;
    }
    Ok(())
}

fn overlap_maps(c: &OverlapMapConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    for (spec, name) in c.losses.iter().zip(unique_slugs(&c.losses)?) {
        let map = overlap_map(spec, c.grid)?;
        art.csv(&format!("overlap_{name}.csv"), &map.to_csv())?;
        art.json(
            &format!("overlap_{name}.json"),
            &json!({
                "loss": spec,
                "grid_n": map.grid_n,
                "overlap_fraction": map.overlap_fraction,
                "overlap_cells": map.overlap_count(),
            }),
        )?;
    }
    Ok(())
}

fn flops(ctx: &Ctx, c: &FlopsConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let arch = ctx.load_arch(c.arch.as_ref())?;
    let report = count_flops_params(&arch)?;
    art.csv("flops.csv", &report.to_csv())?;
    art.json("flops.json", &report.totals)?;
    art.json("arch.json", &arch)?;
    Ok(())
}

struct Prepared {
    train: Dataset,
    held: Dataset,
    protocol: PairProtocol,
}

/// Row indices whose within-class position lies in `range`, for class-major
/// data with `per_class` rows per class.
fn rows_within(len: usize, per_class: usize, range: std::ops::Range<usize>) -> Vec<usize> {
    (0..len).filter(|i| range.contains(&(i % per_class))).collect()
}

/// Training samples plus held-out samples of the same classes and a pair
/// protocol over the held-out ones.
fn prepare(ctx: &Ctx, data: &DataConfig, verify: &VerifyConfig, channels: usize) -> Result<Prepared, ExperimentError> {
    if verify.held_out_per_class < 2 {
        return Err(ExperimentError::Invalid("verify.held_out_per_class must be ≥ 2".into()));
    }
    let (train, held) = match *data {
        DataConfig::Sphere(d) => {
            let spec = SphereDatasetSpec {
                classes: d.classes,
                dim: d.dim,
                samples_per_class: d.samples_per_class,
                noise_sigma: d.noise_sigma,
                seed: ctx.seed,
            };
            (
                gen_sphere_samples(&spec, 0, d.samples_per_class)?.to_dataset()?,
                gen_sphere_samples(&spec, d.samples_per_class, verify.held_out_per_class)?.to_dataset()?,
            )
        }
        DataConfig::Glyphs(g) => {
            let per_class = g.samples_per_class + verify.held_out_per_class;
            let all = gen_glyph_images(g.classes, g.size, per_class, g.noise_sigma, ctx.seed)?.to_dataset(channels)?;
            let pick = |rows: Vec<usize>| {
                let (x, y) = all.batch(&rows);
                Dataset::new(x, y, g.classes)
            };
            (
                pick(rows_within(all.len(), per_class, 0..g.samples_per_class))?,
                pick(rows_within(all.len(), per_class, g.samples_per_class..per_class))?,
            )
        }
    };
    let protocol = gen_pair_protocol(&held.labels, verify.pairs, verify.pairs, verify.folds, ctx.pair_seed())?;
    Ok(Prepared { train, held, protocol })
}

/// Model, embedding width, and the input channel count it expects.
fn build_model(
    ctx: &Ctx,
    model: &ModelConfig,
    data: &DataConfig,
    rng: &mut SplitMix64,
) -> Result<(Sequential, usize, usize), ExperimentError> {
    match (model, data) {
        (ModelConfig::Dense { hidden, embedding }, DataConfig::Sphere(d)) => {
            Ok((dense_net(d.dim, *hidden, *embedding, rng)?, *embedding, 0))
        }
        (
            ModelConfig::Arch {
                arch,
                width_mult,
                batch_norm,
            },
            DataConfig::Glyphs(g),
        ) => {
            let mut arch = ctx.load_arch(arch.as_ref())?;
            arch.batch_norm = *batch_norm;
            let net = instantiate_toy(&arch, *width_mult, g.size, rng)?;
            let emb = arch.scaled(*width_mult, g.size)?.embedding_dim().expect("validated");
            Ok((net, emb, arch.input_shape.c))
        }
        (ModelConfig::Dense { .. }, _) => Err(ExperimentError::Invalid("dense models need sphere data".into())),
        (ModelConfig::Arch { .. }, _) => Err(ExperimentError::Invalid("architecture models need glyph data".into())),
    }
}

fn train_config(optim: &OptimConfig, stages: &[StageConfig], seed: u64) -> TrainConfig {
    let stage_list: Vec<(MarginLossSpec, usize)> = stages.iter().map(|s| (s.loss, s.steps)).collect();
    let mut cfg = TrainConfig::single_stage(stages[0].loss, 0, seed).with_stages(&stage_list);
    cfg.lr_schedule = optim.lr_schedule.clone();
    cfg.momentum = optim.momentum;
    cfg.weight_decay = optim.weight_decay;
    cfg.wd_mult = optim.wd_mult.clone();
    cfg.batch_size = optim.batch_size;
    cfg
}

fn verification_accuracy(model: &Sequential, p: &Prepared) -> Option<f64> {
    let emb = embed(model, &p.held.inputs).ok()?;
    let pairs = ScoredPairs::from_embeddings(emb.view(), &p.protocol).ok()?;
    tenfold_verification(&pairs).ok().map(|r| r.accuracy)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn training(
    ctx: &Ctx,
    art: &mut Artifacts,
    kind: &str,
    exp: &TrainExperiment,
    stages: &[StageConfig],
    teacher: Option<(&DistillSpec, &TeacherConfig)>,
) -> Result<RunSummary, ExperimentError> {
    let root = SplitMix64::new(ctx.seed);
    let mut rng = root.derive(&[INIT_STREAM]);
    let (mut model, emb_dim, channels) = build_model(ctx, &exp.model, &exp.data, &mut rng)?;
    let classes = match exp.data {
        DataConfig::Sphere(d) => d.classes,
        DataConfig::Glyphs(g) => g.classes,
    };
    let mut head = ClassHead::new(emb_dim, classes, &mut rng)?;
    let prepared = prepare(ctx, &exp.data, &exp.verify, channels)?;
    let config = train_config(&exp.optim, stages, ctx.seed);
    config.validate()?;

    let teacher_emb = match teacher {
        Some((spec, t)) => {
            let mut trng = root.derive(&[TEACHER_STREAM]);
            let (mut tm, t_dim, _) = build_model(ctx, &t.model, &exp.data, &mut trng)?;
            if t_dim != emb_dim {
                return Err(ExperimentError::Invalid(format!(
                    "teacher embeds to {t_dim} dimensions, student to {emb_dim}"
                )));
            }
            spec.validate()?;
            let mut th = ClassHead::new(t_dim, classes, &mut trng)?;
            let tstage = [StageConfig {
                loss: t.loss,
                steps: t.steps,
            }];
            let tcfg = train_config(&exp.optim, &tstage, ctx.seed);
            let thist = train(&mut tm, &mut th, &prepared.train, &tcfg)?;
            art.csv("teacher_history.csv", &thist.to_csv())?;
            Some((*spec, embed(&tm, &prepared.train.inputs)?))
        }
        None => None,
    };

    let switch_step = (stages.len() > 1).then(|| stages[0].steps);
    let first_variant = stages[0].loss.variant;
    let every = exp.verify.every;
    let mut curve: Vec<(usize, Option<f64>)> = Vec::new();
    let mut switch_accuracy = None;
    let mut observer = |step: usize, m: &Sequential, h: &ClassHead| {
        if switch_step == Some(step) {
            switch_accuracy = evaluate_accuracy(m, h, &prepared.train, first_variant).ok();
        }
        let due = step == config.max_steps || (every > 0 && step % every == 0);
        if due && curve.last().is_none_or(|(s, _)| *s != step) {
            curve.push((step, verification_accuracy(m, &prepared)));
        }
    };
    let hooks = TrainHooks {
        distill: teacher_emb.as_ref().map(|(spec, t)| Distillation {
            spec: *spec,
            teacher: t.view(),
        }),
        observer: Some(&mut observer),
    };
    let history = train_with(&mut model, &mut head, &prepared.train, &config, hooks)?;
    if history.diverged() {
        let done = history.records.len() - 1;
        if curve.last().is_none_or(|(s, _)| *s != done) {
            curve.push((done, verification_accuracy(&model, &prepared)));
        }
    }

    let last = stages.last().expect("at least one stage").loss;
    let train_accuracy = evaluate_accuracy(&model, &head, &prepared.train, last.variant)
        .ok()
        .and_then(finite);
    let mut verification = String::from("step,accuracy\n");
    for (step, acc) in &curve {
        verification.push_str(&format!("{step},{}\n", acc.map(shortest).unwrap_or_default()));
    }
    art.csv("history.csv", &history.to_csv())?;
    art.csv("verification.csv", &verification)?;
    art.csv("pairs.csv", &prepared.protocol.to_csv())?;
    let s = history.summary();
    let summary = RunSummary {
        run_id: RunSummary::run_id(last.variant, last.m, last.s, ctx.seed),
        kind: kind.to_string(),
        variant: last.variant,
        m: last.m,
        s: last.s,
        seed: ctx.seed,
        steps: s.steps,
        diverged: s.diverged,
        divergence_step: s.divergence_step,
        final_loss: s.final_loss,
        train_accuracy,
        verification_accuracy: curve.last().and_then(|(_, a)| a.and_then(finite)),
        switch_accuracy: switch_accuracy.and_then(finite),
    };
    art.json(SUMMARY_FILE, &summary)?;
    Ok(summary)
}

fn margin_sweep(ctx: &Ctx, c: &MarginSweepConfig, art: &mut Artifacts) -> Result<Vec<RunSummary>, ExperimentError> {
    if c.margins.is_empty() {
        return Err(ExperimentError::Invalid("margin grid is empty".into()));
    }
    if !matches!(
        c.base.loss.variant,
        LossVariant::ArcFace | LossVariant::LiArcFace | LossVariant::CosFace
    ) {
        return Err(ExperimentError::Invalid(format!(
            "{} has no single additive margin to sweep",
            c.base.loss.variant
        )));
    }
    let mut summaries = Vec::with_capacity(c.margins.len());
    for &m in &c.margins {
        let loss = MarginLossSpec { m, ..c.base.loss };
        loss.validate()?;
        let run = TrainExperiment {
            loss,
            ..c.base.clone()
        };
        let mut child = art.child(&format!("m{}", shortest(m)))?;
        let stages = [StageConfig { loss, steps: run.steps }];
        summaries.push(training(ctx, &mut child, "margin-sweep", &run, &stages, None)?);
        art.absorb(child);
    }
    let mut rows = summaries.clone();
    art.csv(REPORT_FILE, &comparison_table(&mut rows)?)?;
    Ok(summaries)
}

fn read_embeddings(path: &Path) -> Result<(Array2<f64>, Vec<usize>), ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(ExperimentError::io(path))?;
    let bad = |line: usize, what: &str| ExperimentError::Invalid(format!("{}:{line}: {what}", path.display()));
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("label") {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(|| bad(n + 1, "bad label"))?;
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(n + 1, "bad feature value"))?;
        if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(bad(n + 1, "inconsistent feature count"));
        }
        labels.push(label);
        values.extend(row);
    }
    let d = width.ok_or_else(|| bad(0, "no rows"))?;
    let m = Array2::from_shape_vec((labels.len(), d), values).expect("rows checked");
    Ok((m, labels))
}

#[derive(Serialize)]
struct IdentificationOutput {
    rank1: f64,
    probes: usize,
    gallery: usize,
    distractors: usize,
}

fn evaluate(ctx: &Ctx, c: &EvalConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let (emb, labels) = match &c.source {
        EmbeddingSource::Sphere(d) => {
            let spec = SphereDatasetSpec {
                classes: d.classes,
                dim: d.dim,
                samples_per_class: d.samples_per_class,
                noise_sigma: d.noise_sigma,
                seed: ctx.seed,
            };
            let set = gen_sphere_samples(&spec, 0, d.samples_per_class)?;
            (set.features, set.labels)
        }
        EmbeddingSource::Csv { path } => read_embeddings(&ctx.resolve(path))?,
    };
    let protocol = gen_pair_protocol(&labels, c.pairs.n_pos, c.pairs.n_neg, c.pairs.folds, ctx.pair_seed())?;
    art.csv("pairs.csv", &protocol.to_csv())?;
    let pairs = ScoredPairs::from_embeddings(emb.view(), &protocol)?;
    art.json("verification.json", &tenfold_verification(&pairs)?)?;
    let tars = c
        .fars
        .iter()
        .map(|&far| tar_at_far(&pairs.scores, &pairs.same, far))
        .collect::<Result<Vec<_>, _>>()?;
    art.json("tar_at_far.json", &json!({ "results": tars }))?;
    art.csv("roc.csv", &roc_to_csv(&roc_table(&pairs.scores, &pairs.same)?))?;

    if let Some(id) = c.identify {
        let mut seen = std::collections::BTreeMap::<usize, usize>::new();
        let (mut gallery, mut probes) = (Vec::new(), Vec::new());
        for (i, &l) in labels.iter().enumerate() {
            let count = seen.entry(l).or_default();
            if *count < id.gallery_per_class {
                gallery.push(i);
            } else {
                probes.push(i);
            }
            *count += 1;
        }
        let mut rng = SplitMix64::new(ctx.seed).derive(&[DISTRACTOR_STREAM]);
        let d = emb.ncols();
        let distractors = Array2::from_shape_fn((id.distractors, d), |_| rng.gaussian());
        let first_free = labels.iter().max().map_or(0, |m| m + 1);
        let distractor_labels: Vec<usize> = (0..id.distractors).map(|k| first_free + k).collect();
        let probe_labels: Vec<usize> = probes.iter().map(|&i| labels[i]).collect();
        let gallery_labels: Vec<usize> = gallery.iter().map(|&i| labels[i]).collect();
        let probe_emb = emb.select(Axis(0), &probes);
        let gallery_emb = emb.select(Axis(0), &gallery);
        let rank1 = rank1_identification(&IdentificationSet {
            probes: probe_emb.view(),
            probe_labels: &probe_labels,
            gallery: gallery_emb.view(),
            gallery_labels: &gallery_labels,
            distractors: distractors.view(),
            distractor_labels: &distractor_labels,
        })?;
        art.json(
            "identification.json",
            &IdentificationOutput {
                rank1,
                probes: probes.len(),
                gallery: gallery.len(),
                distractors: id.distractors,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(exp: Experiment, seed: u64) -> (tempfile::TempDir, RunOutput) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            seed,
            out: None,
            experiment: exp,
        };
        let out = run_experiment(&cfg, dir.path(), Path::new(".")).unwrap();
        (dir, out)
    }

    fn small_train() -> TrainExperiment {
        TrainExperiment {
            data: DataConfig::Sphere(SphereData {
                classes: 6,
                dim: 4,
                samples_per_class: 10,
                noise_sigma: 0.1,
            }),
            model: ModelConfig::Dense {
                hidden: 8,
                embedding: 8,
            },
            steps: 30,
            optim: OptimConfig {
                batch_size: 16,
                ..OptimConfig::default()
            },
            verify: VerifyConfig {
                every: 10,
                held_out_per_class: 4,
                pairs: 20,
                folds: 4,
            },
            ..TrainExperiment::default()
        }
    }

    #[test]
    fn logit_curve_files() {
        let (dir, out) = run(
            Experiment::LogitCurves(LogitCurvesConfig {
                losses: vec![MarginLossSpec::li_arcface(64.0, 0.0)],
                points: 3,
            }),
            1,
        );
        assert_eq!(out.files.len(), 1);
        let text = std::fs::read_to_string(dir.path().join("logit_li-arcface_m0_s64.csv")).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body, ["theta,target_logit", "0,64", "1.57079633,0", "3.14159265,-64"]);
    }

    #[test]
    fn train_writes_all_artifacts() {
        let (dir, out) = run(Experiment::Train(small_train()), 2);
        for f in ["history.csv", "verification.csv", "pairs.csv", SUMMARY_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let s = &out.summaries[0];
        assert_eq!(s.steps, 30);
        assert!(!s.diverged);
        let ver = std::fs::read_to_string(dir.path().join("verification.csv")).unwrap();
        let steps: Vec<&str> = ver.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(steps, ["0", "10", "20", "30"]);
    }

    #[test]
    fn two_stage_reports_switch_accuracy() {
        let t = small_train();
        let (_, out) = run(
            Experiment::TwoStage(TwoStageConfig {
                data: t.data,
                model: t.model,
                pretrain: StageConfig {
                    loss: MarginLossSpec::n_softmax(64.0),
                    steps: 10,
                },
                finetune: StageConfig {
                    loss: MarginLossSpec::arcface(64.0, 0.5),
                    steps: 10,
                },
                optim: t.optim,
                verify: t.verify,
            }),
            3,
        );
        let s = &out.summaries[0];
        assert!(s.switch_accuracy.is_some());
        assert_eq!(s.variant, LossVariant::ArcFace);
        assert_eq!(s.steps, 20);
    }

    #[test]
    fn distill_trains_teacher_first() {
        let t = small_train();
        let (dir, _) = run(
            Experiment::Distill(DistillExperiment {
                student: t,
                teacher: TeacherConfig {
                    model: ModelConfig::Dense {
                        hidden: 16,
                        embedding: 8,
                    },
                    loss: MarginLossSpec::li_arcface(64.0, 0.4),
                    steps: 20,
                },
                distill: DistillSpec {
                    mode: crate::distill::DistillMode::CosineGap,
                    weight: 0.5,
                },
            }),
            4,
        );
        assert!(dir.path().join("teacher_history.csv").exists());
    }

    #[test]
    fn eval_outputs() {
        let (dir, _) = run(
            Experiment::Eval(EvalConfig {
                pairs: PairsConfig {
                    n_pos: 100,
                    n_neg: 100,
                    folds: 10,
                },
                ..EvalConfig::default()
            }),
            5,
        );
        for f in ["pairs.csv", "verification.json", "tar_at_far.json", "roc.csv", "identification.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("verification.json")).unwrap()).unwrap();
        assert!(v["accuracy"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn eval_reads_embedding_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("emb.csv");
        let spec = SphereDatasetSpec {
            classes: 4,
            dim: 3,
            samples_per_class: 6,
            noise_sigma: 0.2,
            seed: 1,
        };
        std::fs::write(&csv, format!("# from a run\n{}", gen_sphere_samples(&spec, 0, 6).unwrap().to_csv())).unwrap();
        let cfg = ExperimentConfig {
            seed: 1,
            out: None,
            experiment: Experiment::Eval(EvalConfig {
                source: EmbeddingSource::Csv { path: "emb.csv".into() },
                pairs: PairsConfig {
                    n_pos: 20,
                    n_neg: 20,
                    folds: 2,
                },
                fars: vec![0.1],
                identify: None,
            }),
        };
        let out = dir.path().join("out");
        run_experiment(&cfg, &out, dir.path()).unwrap();
        assert!(out.join("verification.json").exists());
    }

    #[test]
    fn glyph_architecture_trains() {
        let (_, out) = run(
            Experiment::Train(TrainExperiment {
                data: DataConfig::Glyphs(GlyphData {
                    classes: 3,
                    size: 28,
                    samples_per_class: 2,
                    noise_sigma: 0.1,
                }),
                model: ModelConfig::Arch {
                    arch: None,
                    width_mult: 0.125,
                    batch_norm: true,
                },
                steps: 2,
                optim: OptimConfig {
                    batch_size: 4,
                    ..OptimConfig::default()
                },
                verify: VerifyConfig {
                    every: 0,
                    held_out_per_class: 2,
                    pairs: 2,
                    folds: 2,
                },
                ..TrainExperiment::default()
            }),
            6,
        );
        assert_eq!(out.summaries[0].steps, 2);
        assert!(!out.summaries[0].diverged);
    }

    #[test]
    fn mismatched_model_and_data_rejected() {
        let mut t = small_train();
        t.model = ModelConfig::Arch {
            arch: None,
            width_mult: 0.125,
            batch_norm: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            seed: 1,
            out: None,
            experiment: Experiment::Train(t),
        };
        assert!(matches!(
            run_experiment(&cfg, dir.path(), Path::new(".")),
            Err(ExperimentError::Invalid(_))
        ));
    }
}
