use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hgcnet::blocks::Variant;
use hgcnet::data::{Checkpoint, Dataset};
use hgcnet::diagnostics::{format_table, full_suite};
use hgcnet::hgc::compression_ratio;
use hgcnet::net::{analyze, analyze_layer, compare_variants, comparison_csv, Network, VariantRow};
use hgcnet::train::{evaluate_top1, network_from_checkpoint, EpochRecord, Metrics, Normalizer, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Relative error bound for `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Write to a sibling temp file, then rename over the target.
fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn analyze_cmd(cfg: &RunConfig, sweep: Option<&[usize]>, out: Option<&Path>) -> CliResult<()> {
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    if let Some((layer, size)) = cfg.layer {
        let rec = analyze_layer(layer, cfg.net.variant, size, size);
        let ratio = rec.dense_ratio().unwrap_or_else(|| compression_ratio(layer).exact);
        println!(
            "{} {layer} on {size}x{size}: params {}, flops {}, ratio vs dense {ratio} ({:.4})",
            cfg.net.variant,
            rec.params,
            rec.flops,
            ratio.to_f64()
        );
        if let Some(dir) = out {
            write(
                &dir.join("analysis.csv"),
                &format!("layer,params,flops\n{},{},{}\n", rec.name, rec.params, rec.flops),
            )?;
        }
        return Ok(());
    }
    let report = analyze(&cfg.net)?;
    print!("{}", report.to_table());
    if let Some(dir) = out {
        write(&dir.join("analysis.txt"), &report.to_table())?;
        write(&dir.join("analysis.csv"), &report.to_csv())?;
    }
    if let Some(groups) = sweep {
        let rows = compare_variants(&cfg.net, groups)?;
        println!();
        print!("{}", sweep_table(&rows));
        if let Some(dir) = out {
            write(&dir.join("sweep.csv"), &comparison_csv(&rows))?;
        }
    }
    Ok(())
}

fn sweep_table(rows: &[VariantRow]) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>10} {:>10} {:>12}\n",
        "variant", "groups", "params(M)", "flops(M)", "1x1 ratio"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>10.3} {:>10.2} {:>12.4}",
            r.variant.to_string(),
            r.groups,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e6,
            r.report.reduce_ratio().to_f64()
        );
    }
    out
}

fn print_epoch(tag: &str, r: &EpochRecord) {
    let val = r.val_top1.map(|v| format!(" val_err {v:.2}%")).unwrap_or_default();
    println!(
        "{tag}epoch {:>3}  lr {:.5}  loss {:.4}  train_err {:.2}%{val}  ({:.1}s)",
        r.epoch, r.lr, r.train_loss, r.train_top1, r.seconds
    );
}

/// Run every remaining epoch, writing metrics and a checkpoint after each.
fn run_training(trainer: &mut Trainer, train: &Dataset, val: &Dataset, dir: &Path, tag: &str) -> CliResult<()> {
    ensure_dir(dir)?;
    let metrics = dir.join(METRICS_FILE);
    let ck_path = dir.join(CHECKPOINT_FILE);
    while !trainer.is_done() {
        let next = trainer.epoch() + 1;
        trainer.fit_until(next, train, Some(val), Some(&metrics))?;
        save_checkpoint(&trainer.checkpoint(), &ck_path)?;
        print_epoch(tag, trainer.metrics().records.last().expect("epoch record"));
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    ensure_dir(out)?;
    let (train, val) = cfg.datasets()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let t = Trainer::from_checkpoint(&ck, cfg.train.clone(), Some(&cfg.net))?;
            eprintln!("resuming {} at epoch {}", path.display(), t.epoch());
            t
        }
        None => Trainer::new(cfg.net.clone(), cfg.train.clone(), &train)?,
    };
    write(&out.join("config.txt"), &cfg.to_text())?;
    eprintln!(
        "{} ({} params), {} train / {} val samples",
        cfg.net,
        trainer.net.param_count(),
        train.len(),
        val.len()
    );
    run_training(&mut trainer, &train, &val, out, "")?;
    let r = trainer.evaluate(&val)?;
    println!("final val loss {:.4} top1_error {:.2}", r.loss, r.top1_error);
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let (train, val) = cfg.datasets()?;
    let (net, norm) = match checkpoint {
        Some(path) => network_from_checkpoint(&Checkpoint::load(path)?)?,
        None => (Network::new(cfg.net.clone(), cfg.train.seed)?, Normalizer::fit(&train)),
    };
    if net.spec().num_classes != val.classes {
        return Err(CliError::Config(format!(
            "network has {} classes, data has {}",
            net.spec().num_classes,
            val.classes
        )));
    }
    let r = evaluate_top1(&net, &val, &norm, cfg.train.batch_size)?;
    let line = format!("loss {:.6} top1_error {:.2}", r.loss, r.top1_error);
    println!("{line}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("eval.txt"), &format!("{line}\n"))?;
    }
    Ok(())
}

pub fn gradcheck_cmd(seed: u64, out: Option<&Path>) -> CliResult<()> {
    let checks = full_suite(seed, GRADCHECK_TOLERANCE)?;
    let table = format_table(&checks);
    print!("{table}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("gradcheck.txt"), &table)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {GRADCHECK_TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn paired_csv(hgc: &Metrics, sgc: &Metrics) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut out = String::from(
        "epoch,hgc_train_loss,hgc_train_top1,hgc_val_loss,hgc_val_top1,sgc_train_loss,sgc_train_top1,sgc_val_loss,sgc_val_top1\n",
    );
    for (a, b) in hgc.records.iter().zip(&sgc.records) {
        let _ = writeln!(
            out,
            "{},{:.6},{:.4},{},{},{:.6},{:.4},{},{}",
            a.epoch,
            a.train_loss,
            a.train_top1,
            opt(a.val_loss),
            opt(a.val_top1),
            b.train_loss,
            b.train_top1,
            opt(b.val_loss),
            opt(b.val_top1)
        );
    }
    out
}

pub fn ablate_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let (train, val) = cfg.datasets()?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    let mut results = Vec::new();
    for variant in [Variant::Hgc, Variant::Sgc] {
        let spec = cfg.net.with_variant(variant);
        let mut trainer = Trainer::new(spec, cfg.train.clone(), &train)?;
        let dir: PathBuf = out.join(variant.to_string());
        let params = trainer.net.param_count();
        eprintln!("{variant}: {params} params");
        run_training(&mut trainer, &train, &val, &dir, &format!("[{variant}] "))?;
        let final_eval = trainer.evaluate(&val)?;
        results.push((variant, params, trainer.metrics().clone(), final_eval));
    }
    let (hgc, sgc) = (&results[0], &results[1]);
    write(&out.join("ablate.csv"), &paired_csv(&hgc.2, &sgc.2))?;
    for (variant, params, _, r) in &results {
        println!(
            "{variant}: params {params}, val loss {:.4}, top1_error {:.2}",
            r.loss, r.top1_error
        );
    }
    Ok(())
}
