use std::path::PathBuf;

use stabfi::fi::{mean_stability_map, Measure, StabilityMap, TargetFamily};
use stabfi::merge::{hyper_search, merge, standard_grid, MergeConfig, MergeMethod, TiesStage};
use stabfi::zoo::{accuracy, Checkpoint, Dataset, ZooModel};

use crate::args::MergeArgs;
use crate::commands::{load_data, load_model};
use crate::manifest::Run;
use crate::{usage, CliResult};

fn maps(
    a: &MergeArgs,
    run: &mut Run,
    model_a: &ZooModel,
    model_b: &ZooModel,
) -> CliResult<(StabilityMap, StabilityMap)> {
    if let (Some(pa), Some(pb)) = (&a.map_a, &a.map_b) {
        run.input(pa)?;
        run.input(pb)?;
        let ma = StabilityMap::from_json(&std::fs::read_to_string(pa)?)?;
        let mb = StabilityMap::from_json(&std::fs::read_to_string(pb)?)?;
        return Ok((ma, mb));
    }
    let (Some(ca), Some(cb)) = (&a.calib_a, &a.calib_b) else {
        return Err(usage(
            "protection needs --map-a/--map-b or --calib-a/--calib-b",
        ));
    };
    if a.calibration == 0 {
        return Err(usage("--calibration must be positive"));
    }
    let da = load_data(run, ca)?;
    let db = load_data(run, cb)?;
    let map = |m: &ZooModel, d: &Dataset| {
        mean_stability_map(
            m,
            &d.take(a.calibration).samples(),
            &TargetFamily::AllParams,
            Measure::Fi,
        )
    };
    Ok((map(model_a, &da)?, map(model_b, &db)?))
}

fn uses_protection_grid(a: &MergeArgs) -> bool {
    let ties = matches!(a.method, MergeMethod::Ties | MergeMethod::DareTies);
    a.k != Some(0.0) && !(ties && a.protect_stage == TiesStage::None)
}

pub(crate) fn run(a: &MergeArgs, run: &mut Run) -> CliResult<PathBuf> {
    let base = load_model(run, &a.base)?;
    let model_a = load_model(run, &a.a)?;
    let model_b = load_model(run, &a.b)?;
    run.seed(a.seed);
    let config = MergeConfig {
        gamma: a.gamma,
        k: a.k,
        ties_density: a.ties_density,
        dare_drop: a.dare_drop,
        stage: a.protect_stage,
        seed: a.seed,
        ..MergeConfig::new(a.method)
    };
    config.validate()?;
    let protect = if a.grid_from_paper {
        uses_protection_grid(a)
    } else {
        config.protected()
    };
    let maps = if protect {
        Some(maps(a, run, &model_a, &model_b)?)
    } else {
        None
    };
    let maps_ref = maps.as_ref().map(|(x, y)| (x, y));
    let vals = match (&a.val_a, &a.val_b) {
        (Some(x), Some(y)) => Some((load_data(run, x)?, load_data(run, y)?)),
        _ => None,
    };
    let score = |vals: &(Dataset, Dataset), c: &Checkpoint| -> stabfi::Result<(f64, f64)> {
        let m = base.with_checkpoint(c.clone())?;
        Ok((accuracy(&m, &vals.0)?, accuracy(&m, &vals.1)?))
    };
    let (a_ckpt, b_ckpt, base_ckpt) = (
        model_a.checkpoint(),
        model_b.checkpoint(),
        base.checkpoint(),
    );
    if a.grid_from_paper {
        let vals = vals.ok_or_else(|| usage("--grid-from-paper needs --val-a and --val-b"))?;
        let mut grid = standard_grid(a.method, a.protect_stage);
        grid.base = MergeConfig {
            k: None,
            gamma: 1.0,
            ..config
        };
        if !protect {
            grid.ks = vec![None];
        }
        let result = hyper_search(&grid, a_ckpt, b_ckpt, base_ckpt, maps_ref, |c| {
            score(&vals, c)
        })?;
        let mut buf = Vec::new();
        result.write_csv(&mut buf)?;
        run.write(&a.out, &buf)?;
        let best = &result.best;
        println!(
            "{} configurations; best {} {} γ={} k={}: A {:.4}, B {:.4}, mean {:.4}",
            result.table.len(),
            best.config.method,
            best.config.protection_label(),
            best.config.gamma,
            best.config.k.unwrap_or(0.0),
            best.acc_a,
            best.acc_b,
            best.mean
        );
        if let Some(path) = &a.best_out {
            let merged = merge(&best.config, a_ckpt, b_ckpt, base_ckpt, maps_ref)?;
            run.write(
                path,
                base.with_checkpoint(merged.checkpoint)?
                    .to_json()?
                    .as_bytes(),
            )?;
        }
    } else {
        let outcome = merge(&config, a_ckpt, b_ckpt, base_ckpt, maps_ref)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        if let Some(vals) = &vals {
            let (x, y) = score(vals, &outcome.checkpoint)?;
            println!(
                "{} {}: A {x:.4}, B {y:.4}, mean {:.4}",
                config.method,
                config.protection_label(),
                (x + y) / 2.0
            );
        }
        let merged = base.with_checkpoint(outcome.checkpoint)?;
        run.write(&a.out, merged.to_json()?.as_bytes())?;
    }
    Ok(a.out.clone())
}
