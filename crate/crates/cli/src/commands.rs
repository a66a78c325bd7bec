use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use stabfi::fi::{mean_stability_map, stability_map, Measure, TargetFamily};
use stabfi::harness::{
    continuations, evaluate, mask_pixels, random_ranking, rank_units, sparsify, to_ppm, write_csv,
    EvalReport, Metric, RankedUnits, ReportRow, SparsifyStrategy,
};
use stabfi::reference::{
    attacked_accuracy, blob_spec, masked_accuracy, random_stream, reference_config, reference_data,
    task_a, task_b, VISION_CLASSES,
};
use stabfi::seq::{fi_seq, SeqFiEstimate, SeqMode};
use stabfi::zoo::{
    fine_tune, shapes, train_toy, unit_count, Dataset, Grammar, InputSpec, PerturbationTarget,
    TargetKind, ZooModel,
};

use crate::args::*;
use crate::manifest::{digest_file, manifest_path, write_atomic, Run, RunManifest};
use crate::{merge, report, usage, CliError, CliResult};

pub(crate) fn dispatch(cli: &Cli, argv: &[String], threads: usize) -> CliResult<()> {
    if let Command::Replay(a) = &cli.command {
        return replay(&a.manifest);
    }
    let (out, run) = run_command(&cli.command)?;
    let params = serde_json::to_value(&cli.command)?;
    let manifest = run.manifest(cli.command.name(), argv, params, threads);
    write_atomic(
        &manifest_path(&out),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

/// Run a command; returns its primary output path and what it touched.
fn run_command(cmd: &Command) -> CliResult<(PathBuf, Run)> {
    let mut run = Run::new();
    let out = match cmd {
        Command::GenData(a) => gen_data(a, &mut run)?,
        Command::Train(a) => train(a, &mut run)?,
        Command::FiMap(a) => fi_map(a, &mut run)?,
        Command::Attack(AttackCommand::Pixels(a)) => attack_pixels(a, &mut run)?,
        Command::Attack(AttackCommand::Embed(a)) => attack_embed(a, &mut run)?,
        Command::Sparsify(a) => sparsify_sweep(a, &mut run)?,
        Command::SeqFi(a) => seq_fi(a, &mut run)?,
        Command::Merge(a) => merge::run(a, &mut run)?,
        Command::Report(a) => report::run(a, &mut run)?,
        Command::Replay(_) => return Err(usage("a manifest cannot replay a replay")),
    };
    Ok((out, run))
}

/// Rerun the recorded command from the recorded working directory and
/// compare every output digest. Outputs are rewritten in place.
fn replay(path: &Path) -> CliResult<()> {
    let m = RunManifest::load(path)?;
    for d in &m.inputs {
        if digest_file(&d.path)?.sha256 != d.sha256 {
            return Err(usage(format!(
                "input {} changed since the recorded run",
                d.path.display()
            )));
        }
    }
    let mut argv = vec!["stab".to_string()];
    argv.extend(m.argv.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(&argv)
        .map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    let (_, run) = run_command(&cli.command)?;
    let mut differing = Vec::new();
    for want in &m.outputs {
        let same = run
            .outputs
            .iter()
            .any(|got| got.path == want.path && got.sha256 == want.sha256);
        if !same {
            differing.push(want.path.display().to_string());
        }
    }
    if !differing.is_empty() {
        return Err(CliError::Failure(format!(
            "replay differs from the recorded run: {}",
            differing.join(", ")
        )));
    }
    println!(
        "replayed '{}': {} output(s) byte-identical",
        m.command,
        m.outputs.len()
    );
    Ok(())
}

pub(crate) fn load_model(run: &mut Run, path: &Path) -> CliResult<ZooModel> {
    run.input(path)?;
    Ok(ZooModel::load(path)?)
}

pub(crate) fn load_data(run: &mut Run, path: &Path) -> CliResult<Dataset> {
    run.input(path)?;
    let d = Dataset::load(path)?;
    if d.is_empty() {
        return Err(usage(format!("{} holds no examples", path.display())));
    }
    Ok(d)
}

fn limited(data: Dataset, limit: Option<usize>) -> CliResult<Dataset> {
    match limit {
        Some(0) => Err(usage("--limit must be positive")),
        Some(n) => Ok(data.take(n)),
        None => Ok(data),
    }
}

pub(crate) fn write_rows(run: &mut Run, path: &Path, rows: &[ReportRow]) -> CliResult<()> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    run.write(path, &buf)?;
    for r in rows {
        if r.std > 0.0 || r.seeds.len() > 1 {
            println!(
                "{:<24} {} {:.4} ± {:.4}",
                r.condition, r.metric, r.value, r.std
            );
        } else {
            println!("{:<24} {} {:.4}", r.condition, r.metric, r.value);
        }
    }
    Ok(())
}

fn seed_range(first: u64, count: u64) -> CliResult<Vec<u64>> {
    if count == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    Ok((first..first + count).collect())
}

fn accuracy_report(value: f64, samples: usize, seed: u64, condition: &str) -> EvalReport {
    EvalReport {
        metric: "accuracy".into(),
        value,
        samples,
        seeds: vec![seed],
        condition: condition.into(),
        ties: 0,
    }
}

fn single_row(condition: String, value: f64) -> ReportRow {
    ReportRow {
        condition,
        metric: "accuracy".into(),
        value,
        std: 0.0,
        seeds: Vec::new(),
    }
}

fn gen_data(a: &GenDataArgs, run: &mut Run) -> CliResult<PathBuf> {
    run.seed(a.seed);
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let data = match a.kind {
        DataKind::Shapes => shapes(a.n, a.classes.unwrap_or(VISION_CLASSES), a.seed)?,
        DataKind::Blobs => {
            let mut spec = blob_spec();
            if let Some(c) = a.classes {
                if c < 2 {
                    return Err(usage("blobs need at least 2 classes"));
                }
                spec.classes = c;
            }
            spec.sample(a.n, a.seed)
        }
        DataKind::Grammar => {
            if a.vocab < 4 {
                return Err(usage("a grammar needs a vocabulary of at least 4"));
            }
            Grammar::new(a.vocab, a.grammar_seed).sample(a.n, a.len, a.seed)
        }
        DataKind::Cycle => {
            if a.vocab < 2 {
                return Err(usage("a cycle needs a vocabulary of at least 2"));
            }
            Grammar::cycle(a.vocab).sample(a.n, a.len, a.seed)
        }
        DataKind::TaskA => task_a(a.n, a.seed),
        DataKind::TaskB => task_b(a.n, a.seed),
    };
    run.write(&a.out, data.to_jsonl_string()?.as_bytes())?;
    println!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(a.out.clone())
}

fn train(a: &TrainArgs, run: &mut Run) -> CliResult<PathBuf> {
    run.seed(a.seed);
    let data = match &a.data {
        Some(p) => load_data(run, p)?,
        None => reference_data(a.arch)?.0,
    };
    let mut cfg = reference_config(a.arch);
    if a.data.is_some() {
        cfg.context = stabfi::zoo::TrainConfig::for_arch(a.arch).context;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = &a.hidden {
        cfg.hidden = v.clone();
    }
    if let Some(v) = a.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.context {
        cfg.context = v;
    }
    if a.classes.is_some() {
        cfg.classes = a.classes;
    }
    if a.clip_norm.is_some() {
        cfg.clip_norm = a.clip_norm;
    }
    if let Some(v) = a.label_smoothing {
        cfg.label_smoothing = v;
    }
    let trained = match &a.init {
        Some(p) => {
            let init = load_model(run, p)?;
            if init.arch() != a.arch {
                return Err(usage(format!(
                    "--init holds a {} model, --arch is {}",
                    init.arch(),
                    a.arch
                )));
            }
            fine_tune(&init, &data, &cfg, a.seed)?
        }
        None => train_toy(a.arch, &data, &cfg, a.seed)?,
    };
    run.write(&a.out, trained.model.to_json()?.as_bytes())?;
    println!(
        "{}: train accuracy {:.4}, final loss {:.4}",
        a.arch, trained.train_accuracy, trained.final_loss
    );
    Ok(a.out.clone())
}

fn fi_map(a: &FiMapArgs, run: &mut Run) -> CliResult<PathBuf> {
    let model = load_model(run, &a.model)?;
    let data = load_data(run, &a.data)?;
    let family: TargetFamily = a.target.parse()?;
    let grid = match (&a.emit_pgm, model.input_spec()) {
        (None, _) => None,
        (Some(_), InputSpec::Pixels { width, height }) if family.kind() == TargetKind::Pixel => {
            Some((width, height))
        }
        (Some(_), _) => return Err(usage("--emit-pgm needs a pixel map of a vision model")),
    };
    let map = match a.calibration {
        Some(0) => return Err(usage("--calibration must be positive")),
        Some(n) => mean_stability_map(&model, &data.take(n).samples(), &family, a.measure)?,
        None => {
            let e = data
                .examples
                .get(a.index)
                .ok_or_else(|| usage(format!("--index {} outside 0..{}", a.index, data.len())))?;
            stability_map(&model, &e.sample, &family, a.measure)?
        }
    };
    run.write(&a.out, map.to_json()?.as_bytes())?;
    if let (Some(path), Some((w, h))) = (&a.emit_pgm, grid) {
        run.write(path, map.to_pgm(w, h)?.as_bytes())?;
    }
    let values = map.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "{} {} map: {} units, range [{min:.4e}, {max:.4e}]",
        a.measure,
        family.kind().name(),
        map.len()
    );
    Ok(a.out.clone())
}

enum Ranker {
    Measure(Measure),
    Random,
}

fn parse_rankers(names: &[String]) -> CliResult<Vec<Ranker>> {
    if names.is_empty() {
        return Err(usage("--measures is empty"));
    }
    names
        .iter()
        .map(|n| match n.as_str() {
            "random" => Ok(Ranker::Random),
            m => Ok(Ranker::Measure(m.parse()?)),
        })
        .collect()
}

const PPM_IMAGES: usize = 3;

fn attack_pixels(a: &PixelAttackArgs, run: &mut Run) -> CliResult<PathBuf> {
    let model = load_model(run, &a.model)?;
    let data = limited(load_data(run, &a.data)?, a.limit)?;
    let InputSpec::Pixels { width, height } = model.input_spec() else {
        return Err(usage("pixel attacks need a vision model"));
    };
    let ids: Vec<usize> = (0..unit_count(&model, TargetKind::Pixel)?).collect();
    let rankers = parse_rankers(&a.measures)?;
    let seeds = seed_range(a.seed, a.seeds)?;
    let mut rows = vec![evaluate(&model, &data, &Metric::Accuracy, "original")?.row()];
    let rank_by = |m: Measure| {
        let model = &model;
        move |_: usize, e: &stabfi::zoo::Example| -> stabfi::Result<RankedUnits> {
            rank_units(&stability_map(
                model,
                &e.sample,
                &TargetFamily::AllPixels,
                m,
            )?)
        }
    };
    for r in &rankers {
        match r {
            Ranker::Measure(m) => {
                let acc = masked_accuracy(&model, &data, a.k, a.mask_value, rank_by(*m))?;
                rows.push(single_row(m.name().into(), acc));
            }
            Ranker::Random => {
                let mut reports = Vec::new();
                for &s in &seeds {
                    run.seed(s);
                    let acc = masked_accuracy(&model, &data, a.k, a.mask_value, |i, _| {
                        Ok(random_ranking(&ids, random_stream(s, i)))
                    })?;
                    reports.push(accuracy_report(acc, data.len(), s, "random"));
                }
                rows.push(ReportRow::aggregate("random", &reports)?);
            }
        }
    }
    if let Some(dir) = &a.ppm_dir {
        std::fs::create_dir_all(dir)?;
        for (i, e) in data.examples.iter().take(PPM_IMAGES).enumerate() {
            let image = e.sample.features().expect("vision sample");
            run.write(
                &dir.join(format!("original-{i}.ppm")),
                to_ppm(image, width, height)?.as_bytes(),
            )?;
            for r in &rankers {
                let (name, ranked) = match r {
                    Ranker::Measure(m) => (m.name(), rank_by(*m)(i, e)?),
                    Ranker::Random => ("random", random_ranking(&ids, random_stream(seeds[0], i))),
                };
                let masked = mask_pixels(image, &ranked, a.k, a.mask_value)?;
                run.write(
                    &dir.join(format!("{name}-{i}.ppm")),
                    to_ppm(&masked, width, height)?.as_bytes(),
                )?;
            }
        }
    }
    write_rows(run, &a.out, &rows)?;
    Ok(a.out.clone())
}

fn attack_embed(a: &EmbedAttackArgs, run: &mut Run) -> CliResult<PathBuf> {
    let model = load_model(run, &a.model)?;
    let data = limited(load_data(run, &a.data)?, a.limit)?;
    let dims = model
        .embedding_dim()
        .ok_or_else(|| usage("embedding attacks need a tiny-transformer"))?;
    let ids: Vec<usize> = (0..dims).collect();
    let rankers = parse_rankers(&a.measures)?;
    let seeds = seed_range(a.seed, a.seeds)?;
    if a.epsilons.is_empty() {
        return Err(usage("--epsilons is empty"));
    }
    let mut rows = vec![evaluate(&model, &data, &Metric::Accuracy, "original")?.row()];
    let mut warnings = Vec::new();
    // rankings do not depend on ε
    let mut ranked: Vec<(String, Vec<RankedUnits>)> = Vec::new();
    for r in &rankers {
        if let Ranker::Measure(m) = r {
            let per: Vec<RankedUnits> = data
                .examples
                .par_iter()
                .map(|e| {
                    rank_units(&stability_map(
                        &model,
                        &e.sample,
                        &TargetFamily::AllEmbedDims,
                        *m,
                    )?)
                })
                .collect::<stabfi::Result<_>>()?;
            ranked.push((m.name().to_string(), per));
        }
    }
    for &eps in &a.epsilons {
        let mut measured = ranked.iter();
        for r in &rankers {
            match r {
                Ranker::Measure(_) => {
                    let (name, per) = measured.next().expect("one ranking per measure");
                    let out = attacked_accuracy(&model, &data, a.fraction, eps, |i, _| {
                        Ok(per[i].clone())
                    })?;
                    let condition = format!("{name}@eps={eps}");
                    if out.degenerate > 0 {
                        warnings.push((condition.clone(), out.degenerate));
                    }
                    rows.push(single_row(condition, out.accuracy));
                }
                Ranker::Random => {
                    let condition = format!("random@eps={eps}");
                    let mut reports = Vec::new();
                    let mut degenerate = 0;
                    for &s in &seeds {
                        run.seed(s);
                        let out = attacked_accuracy(&model, &data, a.fraction, eps, |i, _| {
                            Ok(random_ranking(&ids, random_stream(s, i)))
                        })?;
                        degenerate += out.degenerate;
                        reports.push(accuracy_report(out.accuracy, data.len(), s, &condition));
                    }
                    if degenerate > 0 {
                        warnings.push((condition.clone(), degenerate));
                    }
                    rows.push(ReportRow::aggregate(&condition, &reports)?);
                }
            }
        }
    }
    for (condition, n) in warnings {
        eprintln!("warning: {n} degenerate attack(s) under {condition}, left unperturbed");
        rows.push(ReportRow {
            condition: format!("warning:degenerate:{condition}"),
            metric: "count".into(),
            value: n as f64,
            std: 0.0,
            seeds: Vec::new(),
        });
    }
    write_rows(run, &a.out, &rows)?;
    Ok(a.out.clone())
}

fn sparsify_sweep(a: &SparsifyArgs, run: &mut Run) -> CliResult<PathBuf> {
    let model = load_model(run, &a.model)?;
    let data = load_data(run, &a.data)?;
    let calib = match &a.calibration_data {
        Some(p) => load_data(run, p)?,
        None => data.clone(),
    };
    if a.calibration == 0 {
        return Err(usage("--calibration must be positive"));
    }
    if a.fractions.is_empty() || a.strategies.is_empty() {
        return Err(usage("--fractions and --strategies must be non-empty"));
    }
    let seeds = seed_range(a.seed, a.seeds)?;
    let metric = match a.metric {
        MetricKind::Accuracy => Metric::Accuracy,
        MetricKind::Rouge1 => {
            run.seed(a.seed);
            Metric::Rouge1 {
                references: continuations(&model, &data, a.gen_length, a.seed)?,
                length: a.gen_length,
                seed: a.seed,
            }
        }
    };
    let map = if a.strategies.contains(&SparsifyStrategy::FiHigh) {
        Some(mean_stability_map(
            &model,
            &calib.take(a.calibration).samples(),
            &TargetFamily::AllParams,
            a.measure,
        )?)
    } else {
        None
    };
    let score = |ckpt, condition: &str| -> CliResult<EvalReport> {
        Ok(evaluate(
            &model.with_checkpoint(ckpt)?,
            &data,
            &metric,
            condition,
        )?)
    };
    let mut rows = vec![evaluate(&model, &data, &metric, "original")?.row()];
    for &f in &a.fractions {
        for &strategy in &a.strategies {
            match strategy {
                SparsifyStrategy::FiHigh => {
                    let c = sparsify(model.checkpoint(), f, strategy, map.as_ref(), 0)?;
                    let condition = format!("{}-high@{f}", a.measure.name());
                    rows.push(score(c, &condition)?.row());
                }
                SparsifyStrategy::Random => {
                    let condition = format!("random@{f}");
                    let mut reports = Vec::new();
                    for &s in &seeds {
                        run.seed(s);
                        let c = sparsify(model.checkpoint(), f, strategy, None, s)?;
                        let mut r = score(c, &condition)?;
                        r.seeds = vec![s];
                        reports.push(r);
                    }
                    rows.push(ReportRow::aggregate(&condition, &reports)?);
                }
            }
        }
    }
    write_rows(run, &a.out, &rows)?;
    Ok(a.out.clone())
}

#[derive(Serialize)]
struct PromptEstimate {
    prompt: Vec<usize>,
    estimate: SeqFiEstimate,
}

#[derive(Serialize)]
struct SeqFiReport {
    mode: SeqMode,
    samples: usize,
    seed: u64,
    dims: Vec<usize>,
    /// Requested discounted horizon before clamping to the context.
    l_max_requested: Option<usize>,
    mean: f64,
    prompts: Vec<PromptEstimate>,
}

fn seq_fi(a: &SeqFiArgs, run: &mut Run) -> CliResult<PathBuf> {
    let model = load_model(run, &a.model)?;
    let data = load_data(run, &a.data)?;
    let shape = model
        .transformer_shape()
        .ok_or_else(|| usage("sequence FI needs a tiny-transformer"))?;
    if a.prompts == 0 || a.samples == 0 {
        return Err(usage("--prompts and --samples must be positive"));
    }
    let prompts: Vec<Vec<usize>> = data
        .take(a.prompts)
        .examples
        .iter()
        .map(|e| {
            e.sample
                .token_ids()
                .map(<[usize]>::to_vec)
                .ok_or_else(|| usage("sequence FI needs token prompts"))
        })
        .collect::<CliResult<_>>()?;
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    if longest > shape.context {
        return Err(usage(format!(
            "a {longest}-token prompt exceeds the {}-token context",
            shape.context
        )));
    }
    let dims = a
        .dims
        .clone()
        .unwrap_or_else(|| (0..shape.d_model).collect());
    let target = PerturbationTarget::new(TargetKind::EmbeddingDim, dims.clone());
    target.validate(&model)?;
    let mode = match a.gamma {
        Some(gamma) => {
            // FI_l reads a context of prompt + (l − 1) tokens
            let room = shape.context - longest + 1;
            let l_max = a.l_max.min(room);
            if l_max < a.l_max {
                eprintln!(
                    "note: l_max clamped from {} to {l_max} by the {}-token context",
                    a.l_max, shape.context
                );
            }
            SeqMode::Discounted { gamma, l_max }
        }
        None => SeqMode::Fixed {
            horizon: a.horizon_or_default(),
        },
    };
    run.seed(a.seed);
    let estimates: Vec<SeqFiEstimate> = prompts
        .par_iter()
        .map(|p| fi_seq(&model, p, mode, &target, a.samples, a.seed))
        .collect::<stabfi::Result<_>>()?;
    let mean = estimates.iter().map(|e| e.aggregate).sum::<f64>() / estimates.len() as f64;
    let report = SeqFiReport {
        mode,
        samples: a.samples,
        seed: a.seed,
        dims,
        l_max_requested: a.gamma.map(|_| a.l_max),
        mean,
        prompts: prompts
            .into_iter()
            .zip(estimates)
            .map(|(prompt, estimate)| PromptEstimate { prompt, estimate })
            .collect(),
    };
    run.write(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "sequence FI over {} prompts: mean {mean:.6}",
        report.prompts.len()
    );
    Ok(a.out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(seed_range(4, 3).unwrap(), vec![4, 5, 6]);
        assert!(seed_range(0, 0).is_err());
    }

    #[test]
    fn ranker_names() {
        let r = parse_rankers(&["fi".into(), "random".into(), "snip".into()]).unwrap();
        assert!(matches!(r[0], Ranker::Measure(Measure::Fi)));
        assert!(matches!(r[1], Ranker::Random));
        assert!(parse_rankers(&["nope".into()]).is_err());
        assert!(parse_rankers(&[]).is_err());
    }

    #[test]
    fn limit_zero_is_usage() {
        assert!(limited(Dataset::new(Vec::new()), Some(0)).is_err());
    }
}
