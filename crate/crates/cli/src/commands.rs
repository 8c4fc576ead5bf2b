use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mfu_core::config::RunConfig;
use mfu_core::data::{generate_phantom, read_dataset, write_dataset, Dataset, PhantomConfig, Sampler, SamplerConfig};
use mfu_core::metrics::{EvalReport, REPORT_COLUMNS};
use mfu_core::model::{checkpoint, MfuNet, ModelConfig};
use mfu_core::tensor::io;
use mfu_core::train::{evaluate, predict_record, Trainer};
use mfu_core::verify;
use mfu_core::{Error, Result};

use crate::{ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, Profile, SampleStatsArgs, TrainArgs};

pub fn gen_data(a: &GenDataArgs) -> Result<u8> {
    let ds = generate_phantom(&PhantomConfig {
        size: a.size,
        n_cases: a.cases,
        slices_per_case: a.slices_per_case,
        seed: a.seed,
        ..PhantomConfig::default()
    })?;
    write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} slices over {} cases to {} (anatomy {:.1}% of pixels, pathology {:.2}%)",
        ds.len(),
        ds.case_ids().len(),
        a.out.display(),
        100.0 * ds.foreground_fraction(),
        100.0 * ds.pathology_fraction()
    );
    Ok(0)
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Profile defaults, overlaid by the configuration file, overlaid by `--seed`.
fn run_config(a: &ConfigArgs) -> Result<RunConfig> {
    let base = match a.profile {
        Profile::Paper => RunConfig::default(),
        Profile::Desk => RunConfig::desk(),
    };
    let mut cfg = match &a.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let file: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut merged = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut merged, file);
            let text = toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?;
            RunConfig::parse(&text, path).map_err(|e| Error::Config(e.to_string()))?
        }
    };
    if let Some(seed) = a.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn required(flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("no {what} directory: pass --{what} or set paths.{what}")))
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let mut cfg = run_config(&a.config)?;
    if let Some(b) = a.backbone {
        cfg.model.backbone = b.into();
    }
    if a.no_max_fusion {
        cfg.model.max_fusion_enabled = false;
    }
    if a.no_attention {
        cfg.model.attention_enabled = false;
    }
    if a.no_resample {
        cfg.train.resample = false;
    }
    if let Some(n) = a.epoch_iterations {
        cfg.train.epoch_iterations = n;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.train.checkpoint_every = k;
    }
    let data = required(&a.data, &cfg.paths.data, "data")?;
    let out = required(&a.out, &cfg.paths.out, "out")?;
    cfg.paths.data = Some(data.clone());
    cfg.paths.out = Some(out.clone());
    let ds = read_dataset(&data)?;
    let trainer = Trainer::new(cfg, &ds, Some(&out))?;
    let report = if a.resume {
        trainer.resume(&out.join("state"))?.1
    } else {
        let mut model = MfuNet::new(trainer.config.model.clone())?;
        trainer.run(&mut model)?
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    io::write_bytes(&out.join("report.json"), json.as_bytes())?;
    for p in &report.phases {
        println!(
            "phase {} {:?}: {} epochs{}, best validation dice loss {}",
            p.index,
            p.kind,
            p.epochs_run,
            if p.early_stopped { " (early stop)" } else { "" },
            p.best_val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("{} iterations; final checkpoint in {}", report.iterations, out.join("final").display());
    Ok(0)
}

fn split_cases(path: &Path, ds: &Dataset) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cases: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    let known = ds.case_ids();
    if let Some(bad) = cases.iter().find(|c| !known.contains(c)) {
        return Err(Error::Config(format!("split file names unknown case {bad}")));
    }
    Ok(cases)
}

fn print_summary(report: &EvalReport) {
    println!("{} slices", report.slices.len());
    for c in REPORT_COLUMNS {
        let m = report.summary(c);
        println!("{c:>14}  {:5.1} ± {:4.1}", 100.0 * m.mean, 100.0 * m.std);
    }
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let model: MfuNet<f32> = checkpoint::load(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let records = match &a.split {
        Some(path) => ds.indices_of(&split_cases(path, &ds)?),
        None => (0..ds.len()).collect(),
    };
    let report = evaluate(&model, &ds, &records)?;
    print_summary(&report);
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
        io::write_bytes(&out.join("eval.tsv"), report.to_tsv().as_bytes())?;
        io::write_bytes(&out.join("eval.jsonl"), report.to_jsonl().as_bytes())?;
    }
    Ok(0)
}

pub fn predict(a: &PredictArgs) -> Result<u8> {
    let model: MfuNet<f32> = checkpoint::load(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    let mut attention_maps = 0;
    for r in &ds.records {
        let (ana, pat, attention) = predict_record(&model, r)?;
        let shape = [r.height, r.width];
        io::write_bytes(&a.out.join(format!("{}_ana.ndt", r.key())), &io::encode_u8(&shape, &ana)?)?;
        io::write_bytes(&a.out.join(format!("{}_pat.ndt", r.key())), &io::encode_u8(&shape, &pat)?)?;
        if a.dump_attention {
            if let Some(map) = attention {
                io::write_tensor(&a.out.join(format!("{}_attention.ndt", r.key())), &map)?;
                attention_maps += 1;
            }
        }
    }
    println!(
        "wrote label maps for {} slices{} to {}",
        ds.len(),
        if a.dump_attention { format!(" and {attention_maps} attention maps") } else { String::new() },
        a.out.display()
    );
    if a.dump_attention && attention_maps == 0 {
        log::warn!("the model has no attention block; no attention maps written");
    }
    Ok(0)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let mut outcomes = verify::primitive_checks(a.seed, a.tolerance)?;
    if a.with_faulty_fixture {
        outcomes.push(verify::wrong_backward_check(a.tolerance)?);
    }
    if !a.skip_model {
        let model = match &a.config {
            Some(path) => RunConfig::load(path)?.model,
            None => ModelConfig::tiny(),
        };
        outcomes.extend(verify::model_check(&model, a.seed, a.model_tolerance)?);
    }
    let mut failed = 0;
    for o in &outcomes {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed());
        println!(
            "{verdict} {:<20} max relative error {:.3e} (tolerance {:.0e}, {} coordinates)",
            o.name, o.report.max_rel_error, o.tolerance, o.report.coordinates
        );
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { 0 } else { 3 })
}

/// Summed-area table of the pathology indicator, `(n + 1) x (n + 1)`.
fn pathology_table(labels: &[u8], n: usize) -> Vec<u64> {
    let mut t = vec![0u64; (n + 1) * (n + 1)];
    for r in 0..n {
        for c in 0..n {
            let v = u64::from(labels[r * n + c] != 0);
            t[(r + 1) * (n + 1) + c + 1] = v + t[r * (n + 1) + c + 1] + t[(r + 1) * (n + 1) + c] - t[r * (n + 1) + c];
        }
    }
    t
}

struct Stats {
    items: usize,
    centered: usize,
    sizes: BTreeMap<usize, usize>,
    max_pixels: usize,
    tight: bool,
    pathology_fraction: f64,
}

fn sampler_stats(ds: &Dataset, config: SamplerConfig, draws: u64, tables: &[Vec<u64>]) -> Result<Stats> {
    let sampler = Sampler::new(ds, (0..ds.len()).collect(), config.clone())?;
    let n = ds.image_size;
    let mut s = Stats {
        items: 0,
        centered: 0,
        sizes: BTreeMap::new(),
        max_pixels: 0,
        tight: true,
        pathology_fraction: 0.0,
    };
    for t in 0..draws {
        let draw = sampler.draw(t);
        let d = draw.d_t;
        let pixels = d * d * draw.n_t;
        s.max_pixels = s.max_pixels.max(pixels);
        s.tight &= pixels <= config.pixel_budget() && d * d * (draw.n_t + 1) > config.pixel_budget();
        *s.sizes.entry(d).or_default() += 1;
        let mut hits = 0u64;
        for item in &draw.items {
            s.items += 1;
            s.centered += usize::from(item.pathology_centered);
            let tab = &tables[item.record];
            let (r0, c0, r1, c1) = (item.top, item.left, item.top + d, item.left + d);
            hits += tab[r1 * (n + 1) + c1] + tab[r0 * (n + 1) + c0] - tab[r0 * (n + 1) + c1] - tab[r1 * (n + 1) + c0];
        }
        s.pathology_fraction += hits as f64 / pixels as f64;
    }
    s.pathology_fraction /= draws.max(1) as f64;
    Ok(s)
}

pub fn sample_stats(a: &SampleStatsArgs) -> Result<u8> {
    let cfg = run_config(&a.config)?.resolved();
    let ds = read_dataset(&a.data)?;
    let tables: Vec<Vec<u64>> = ds.records.iter().map(|r| pathology_table(&r.y_pat, ds.image_size)).collect();
    let s = sampler_stats(&ds, cfg.sampler.clone(), a.draws, &tables)?;
    let uniform = sampler_stats(
        &ds,
        SamplerConfig {
            rho_c: 0.0,
            ..cfg.sampler.clone()
        },
        a.draws,
        &tables,
    )?;
    println!("draws {}", a.draws);
    println!("items {}", s.items);
    println!("rho_hat {:.4} (rho_c {})", s.centered as f64 / s.items.max(1) as f64, cfg.sampler.rho_c);
    for (d, count) in &s.sizes {
        println!("size {d} {count} ({:.2}%)", 100.0 * *count as f64 / a.draws.max(1) as f64);
    }
    println!("max_pixels {} (budget {})", s.max_pixels, cfg.sampler.pixel_budget());
    println!("tight_floor {}", s.tight);
    println!("pathology_fraction {:.5} (uniform crops {:.5})", s.pathology_fraction, uniform.pathology_fraction);
    Ok(0)
}
