//! Implementations behind the CLI subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rgcl::dataset::{binarize, kcore_filter, load_interactions, split, ImplicitDataset, Schema};
use rgcl::eval::{evaluate as rank_eval, group_eval as grouped, measure_margins, EvalSplit, RankReport};
use rgcl::graph::build_adjacency;
use rgcl::linalg::Mat;
use rgcl::model::{aggregate, export_embeddings as write_embeddings, forward};
use rgcl::trainer::{
    fit_with_options, load_checkpoint, save_checkpoint, AuditStats, TrainConfig,
};

use crate::manifest::{file_fingerprint, RunManifest};
use crate::CliError;

const REPORT_KS: [usize; 3] = [10, 20, 50];

pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if !sets.is_empty() {
        let mut value = serde_json::to_value(&cfg).expect("config serializes");
        let map = value.as_object_mut().unwrap();
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{set}` must be KEY=VALUE")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(key.to_string(), parsed);
        }
        cfg = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("config override: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("bad integer `{t}` in list")))
        })
        .collect()
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad integer `{t}` in list")))
        })
        .collect()
}

fn dataset_cache_path(dir: &Path) -> PathBuf {
    dir.join("dataset.txt")
}

#[allow(clippy::too_many_arguments)]
pub fn prepare(
    input: &Path,
    output: &Path,
    schema: &str,
    delimiter: Option<&str>,
    threshold: f64,
    min_count: usize,
    ratios: &str,
    seed: u64,
) -> Result<(), CliError> {
    let mut schema = Schema::parse(schema)?;
    if let Some(d) = delimiter {
        schema = schema.with_delimiter(d);
    }
    let ratio_parts = parse_u64_list(ratios)?;
    if ratio_parts.len() != 3 {
        return Err(CliError::Usage("ratios must be three integers".into()));
    }
    if min_count < 1 {
        return Err(CliError::Usage("min-count must be at least 1".into()));
    }
    let raw = load_interactions(input, &schema)?;
    let pairs = binarize(&raw, threshold);
    let pairs = if min_count > 1 {
        kcore_filter(pairs, min_count)
    } else {
        pairs
    };
    let ds = split(
        &pairs,
        (
            ratio_parts[0] as u32,
            ratio_parts[1] as u32,
            ratio_parts[2] as u32,
        ),
        seed,
    )?;
    std::fs::create_dir_all(output)?;
    let cache = dataset_cache_path(output);
    ds.write_cache(&cache)?;
    let fingerprint = file_fingerprint(&cache)?;
    println!("dataset        users    items    interactions  sparsity");
    println!(
        "{:<14} {:<8} {:<8} {:<13} {:.4}%",
        input.file_stem().and_then(|s| s.to_str()).unwrap_or("data"),
        ds.num_users,
        ds.num_items,
        ds.num_interactions(),
        100.0 * ds.sparsity()
    );
    println!(
        "splits: train={} valid={} test={}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    println!("cache: {} (sha256 {fingerprint})", cache.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub manifest: String,
    pub label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_metric: f64,
    pub valid: RankReport2,
    pub test: RankReport2,
}

/// Serializable mirror of the library report (owned copies so results
/// round-trip through result.json).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport2 {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl From<RankReport> for RankReport2 {
    fn from(r: RankReport) -> Self {
        RankReport2 {
            ks: r.ks,
            recall: r.recall,
            ndcg: r.ndcg,
            users_evaluated: r.users_evaluated,
        }
    }
}

impl RankReport2 {
    fn metric(&self, k: usize, ndcg: bool) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        Some(if ndcg { self.ndcg[pos] } else { self.recall[pos] })
    }
}

fn label_for(cfg: &TrainConfig, ablate: Option<&str>) -> String {
    if let Some(flag) = ablate {
        return format!("ablate-{flag}");
    }
    if cfg.alpha == 0.0 && cfg.mu == 0.0 {
        "lightgcn-baseline".to_string()
    } else {
        "rgcl".to_string()
    }
}

fn apply_ablation(cfg: &mut TrainConfig, flag: &str) -> Result<(), CliError> {
    match flag {
        "no_cons" => cfg.no_cons = true,
        "no_rand" => cfg.no_rand = true,
        "no_ac" => cfg.no_ac = true,
        "no_adv" => cfg.no_adv = true,
        other => {
            return Err(CliError::Usage(format!(
                "unknown ablation `{other}`; expected no_cons, no_rand, no_ac, or no_adv"
            )))
        }
    }
    Ok(())
}

fn write_records(path: &Path, result: &RunResult) -> Result<(), CliError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (split, report) in [("valid", &result.valid), ("test", &result.test)] {
        for (idx, &k) in report.ks.iter().enumerate() {
            for (metric, value) in [("recall", report.recall[idx]), ("ndcg", report.ndcg[idx])] {
                let line = serde_json::json!({
                    "manifest": result.manifest,
                    "label": result.label,
                    "seed": result.seed,
                    "split": split,
                    "metric": metric,
                    "k": k,
                    "value": value,
                });
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Train one seed into its own run directory; reuses an existing
/// checkpoint when `resume` is set.
#[allow(clippy::too_many_arguments)]
fn run_one_seed(
    ds: &ImplicitDataset,
    fingerprint: &str,
    base_cfg: &TrainConfig,
    label: &str,
    seed: u64,
    dir: &Path,
    resume: bool,
    export: bool,
    audit: Option<&mut AuditStats>,
) -> Result<RunResult, CliError> {
    let cfg = TrainConfig {
        seed,
        ..base_cfg.clone()
    };
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(fingerprint.to_string(), label, vec![seed], cfg.clone(), dir);
    manifest.write(&dir.join("manifest.json"))?;
    let ckpt_path = dir.join("checkpoint.bin");
    let resume_state = if resume && ckpt_path.exists() {
        Some(load_checkpoint(&ckpt_path, &cfg)?)
    } else {
        None
    };
    let result = fit_with_options(&cfg, ds, resume_state, audit)?;
    save_checkpoint(&ckpt_path, &result.final_state, &cfg)?;

    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?);
    for record in &result.log {
        writeln!(log, "{}", serde_json::to_string(record).unwrap())?;
    }
    drop(log);

    let adj = build_adjacency(ds);
    let z = aggregate(&forward(&adj, &result.embeddings, cfg.num_layers), None);
    let valid = rank_eval(&z, ds, EvalSplit::Valid, &REPORT_KS);
    let test = rank_eval(&z, ds, EvalSplit::Test, &REPORT_KS);
    let run = RunResult {
        manifest: manifest.id(),
        label: label.to_string(),
        seed,
        best_epoch: result.best_epoch,
        epochs_run: result.epochs_run,
        best_val_metric: result.best_metric,
        valid: valid.into(),
        test: test.into(),
    };
    std::fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&run).unwrap(),
    )?;
    write_records(&dir.join("records.jsonl"), &run)?;
    if export {
        write_embeddings(&dir.join("embeddings"), ds, &z, &result.embeddings)?;
    }
    Ok(run)
}

fn print_result_row(run: &RunResult) {
    println!(
        "{:<22} seed={:<4} epochs={:<4} best@{:<3} R@20={:.4} N@20={:.4} (test)",
        run.label,
        run.seed,
        run.epochs_run,
        run.best_epoch,
        run.test.metric(20, false).unwrap_or(f64::NAN),
        run.test.metric(20, true).unwrap_or(f64::NAN),
    );
}

#[derive(Serialize)]
struct SeedSummary {
    label: String,
    seeds: Vec<u64>,
    test_recall20_mean: f64,
    test_recall20_std: f64,
    test_ndcg20_mean: f64,
    test_ndcg20_std: f64,
    runs: Vec<RunResult>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    seeds: &str,
    ablate: Option<&str>,
    resume: bool,
    export: bool,
    audit: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(config, sets)?;
    if let Some(flag) = ablate {
        apply_ablation(&mut cfg, flag)?;
    }
    let label = label_for(&cfg, ablate);
    let seeds = parse_u64_list(seeds)?;
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed required".into()));
    }
    let ds = ImplicitDataset::read_cache(data)?;
    let fingerprint = file_fingerprint(data)?;
    std::fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    let mut audit_stats = audit.then(|| AuditStats::new(1000));
    for &seed in &seeds {
        let dir = out.join(format!("{label}-seed{seed}"));
        let run = run_one_seed(
            &ds,
            &fingerprint,
            &cfg,
            &label,
            seed,
            &dir,
            resume,
            export,
            audit_stats.as_mut(),
        )?;
        print_result_row(&run);
        runs.push(run);
    }
    if let Some(stats) = &audit_stats {
        println!(
            "audit: {} projection, {} eta, {} signed-step checks, {} violations",
            stats.projection_checks,
            stats.eta_checks,
            stats.fgsm_checks,
            stats.total_violations()
        );
        if stats.total_violations() > 0 {
            return Err(CliError::Numerical(format!(
                "{} perturbation-constraint violations",
                stats.total_violations()
            )));
        }
    }
    if runs.len() > 1 {
        let recalls: Vec<f64> = runs
            .iter()
            .map(|r| r.test.metric(20, false).unwrap_or(f64::NAN))
            .collect();
        let ndcgs: Vec<f64> = runs
            .iter()
            .map(|r| r.test.metric(20, true).unwrap_or(f64::NAN))
            .collect();
        let (rm, rs) = mean_std(&recalls);
        let (nm, ns) = mean_std(&ndcgs);
        println!("summary {label}: R@20 = {rm:.4} ± {rs:.4}, N@20 = {nm:.4} ± {ns:.4}");
        let summary = SeedSummary {
            label,
            seeds,
            test_recall20_mean: rm,
            test_recall20_std: rs,
            test_ndcg20_mean: nm,
            test_ndcg20_std: ns,
            runs,
        };
        std::fs::write(
            out.join("summary.json"),
            serde_json::to_string_pretty(&summary).unwrap(),
        )?;
    }
    Ok(())
}

fn load_best_embeddings(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
) -> Result<(ImplicitDataset, TrainConfig, Mat), CliError> {
    let cfg = load_config(config, sets)?;
    let ds = ImplicitDataset::read_cache(data)?;
    let state = load_checkpoint(checkpoint, &cfg)?;
    Ok((ds, cfg, state.best_emb))
}

pub fn evaluate(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
    ks: &str,
    split_name: &str,
) -> Result<(), CliError> {
    let ks = parse_usize_list(ks)?;
    let split = match split_name {
        "valid" => EvalSplit::Valid,
        "test" => EvalSplit::Test,
        other => return Err(CliError::Usage(format!("unknown split `{other}`"))),
    };
    let (ds, cfg, emb) = load_best_embeddings(data, checkpoint, config, sets)?;
    let adj = build_adjacency(&ds);
    let z = aggregate(&forward(&adj, &emb, cfg.num_layers), None);
    let report = rank_eval(&z, &ds, split, &ks);
    println!("split={split_name} users={}", report.users_evaluated);
    println!("{:<6} {:<10} {:<10}", "K", "Recall", "NDCG");
    for (i, &k) in report.ks.iter().enumerate() {
        println!("{:<6} {:<10.4} {:<10.4}", k, report.recall[i], report.ndcg[i]);
    }
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}

pub fn group_eval(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
    k: usize,
) -> Result<(), CliError> {
    let (ds, cfg, emb) = load_best_embeddings(data, checkpoint, config, sets)?;
    let adj = build_adjacency(&ds);
    let z = aggregate(&forward(&adj, &emb, cfg.num_layers), None);
    let report = grouped(&z, &ds, k);
    println!("user groups (ascending train degree), K={k}");
    println!("{:<8} {:<6} {:<10} {:<10} {:<10}", "group", "size", "eval", "Recall", "NDCG");
    for (g, m) in report.user_groups.iter().enumerate() {
        println!(
            "G{:<7} {:<6} {:<10} {:<10.4} {:<10.4}",
            g, m.size, m.evaluated, m.recall, m.ndcg
        );
    }
    println!("item groups (ascending popularity), decomposed metrics");
    for (g, m) in report.item_groups.iter().enumerate() {
        println!("G{:<7} {:<6} {:<10} {:<10.4} {:<10.4}", g, m.size, "-", m.recall, m.ndcg);
    }
    println!(
        "decomposed overall: recall={:.6} ndcg={:.6}",
        report.overall_decomposed_recall, report.overall_decomposed_ndcg
    );
    // machine-readable line records
    for (kind, groups) in [("user", &report.user_groups), ("item", &report.item_groups)] {
        for (g, m) in groups.iter().enumerate() {
            for (metric, value) in [("recall", m.recall), ("ndcg", m.ndcg)] {
                println!(
                    "{}",
                    serde_json::json!({
                        "metric": metric,
                        "k": k,
                        "group": format!("{kind}-G{g}"),
                        "value": value,
                        "seed": cfg.seed,
                    })
                );
            }
        }
    }
    Ok(())
}

pub fn margins(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
    sample: usize,
    pairs: usize,
    seed: u64,
) -> Result<(), CliError> {
    use rand::SeedableRng;
    let (ds, cfg, emb) = load_best_embeddings(data, checkpoint, config, sets)?;
    let adj = build_adjacency(&ds);
    let z = aggregate(&forward(&adj, &emb, cfg.num_layers), None);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let summary = measure_margins(&z, &ds, cfg.num_layers, sample, pairs, &mut rng);
    println!(
        "margins over {} users ({} degenerate): mean={:.6} median={:.6} p10={:.6} p90={:.6}",
        summary.count, summary.degenerate, summary.mean, summary.median, summary.p10, summary.p90
    );
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(())
}

pub fn export_embeddings(
    data: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
) -> Result<(), CliError> {
    let (ds, cfg, emb) = load_best_embeddings(data, checkpoint, config, sets)?;
    let adj = build_adjacency(&ds);
    let z = aggregate(&forward(&adj, &emb, cfg.num_layers), None);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_embeddings(out, &ds, &z, &emb)?;
    println!(
        "wrote {} and {}",
        out.with_extension("final.tsv").display(),
        out.with_extension("raw.tsv").display()
    );
    Ok(())
}

pub fn ablate(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    sets: &[String],
    seeds: &str,
) -> Result<(), CliError> {
    let cfg = load_config(config, sets)?;
    if cfg.alpha == 0.0 && cfg.mu == 0.0 {
        return Err(CliError::Usage(
            "ablation study needs a full model config (alpha or mu nonzero)".into(),
        ));
    }
    let seeds = parse_u64_list(seeds)?;
    let ds = ImplicitDataset::read_cache(data)?;
    let fingerprint = file_fingerprint(data)?;
    std::fs::create_dir_all(out)?;
    let variants: [(&str, Option<&str>); 5] = [
        ("rgcl", None),
        ("ablate-no_cons", Some("no_cons")),
        ("ablate-no_rand", Some("no_rand")),
        ("ablate-no_ac", Some("no_ac")),
        ("ablate-no_adv", Some("no_adv")),
    ];
    println!(
        "{:<22} {:<18} {:<10}",
        "variant", "R@20 (mean test)", "N@20"
    );
    let mut table = Vec::new();
    for (label, flag) in variants {
        let mut variant_cfg = cfg.clone();
        if let Some(f) = flag {
            apply_ablation(&mut variant_cfg, f)?;
        }
        let mut recalls = Vec::new();
        let mut ndcgs = Vec::new();
        let mut runs = Vec::new();
        for &seed in &seeds {
            let dir = out.join(format!("{label}-seed{seed}"));
            let run =
                run_one_seed(&ds, &fingerprint, &variant_cfg, label, seed, &dir, false, false, None)?;
            recalls.push(run.test.metric(20, false).unwrap_or(f64::NAN));
            ndcgs.push(run.test.metric(20, true).unwrap_or(f64::NAN));
            runs.push(run);
        }
        let (rm, _) = mean_std(&recalls);
        let (nm, _) = mean_std(&ndcgs);
        println!("{label:<22} {rm:<18.4} {nm:<10.4}");
        table.push(serde_json::json!({
            "label": label,
            "recall20_mean": rm,
            "ndcg20_mean": nm,
            "runs": runs,
        }));
    }
    std::fs::write(
        out.join("ablation_summary.json"),
        serde_json::to_string_pretty(&table).unwrap(),
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct GridFile {
    grid: std::collections::BTreeMap<String, Vec<toml::Value>>,
}

pub fn sweep(
    data: &Path,
    out: &Path,
    grid: &Path,
    config: Option<&Path>,
    sets: &[String],
) -> Result<(), CliError> {
    let base = load_config(config, sets)?;
    let text = std::fs::read_to_string(grid)
        .map_err(|e| CliError::Data(format!("cannot read grid {}: {e}", grid.display())))?;
    let grid_file: GridFile =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("grid file: {e}")))?;
    if grid_file.grid.is_empty() || grid_file.grid.values().any(|v| v.is_empty()) {
        return Err(CliError::Usage("grid must list at least one value per key".into()));
    }
    let keys: Vec<&String> = grid_file.grid.keys().collect();
    let lists: Vec<&Vec<toml::Value>> = grid_file.grid.values().collect();
    let total: usize = lists.iter().map(|l| l.len()).product();

    let ds = ImplicitDataset::read_cache(data)?;
    let fingerprint = file_fingerprint(data)?;
    std::fs::create_dir_all(out)?;

    let mut outcomes: Vec<(String, RunResult)> = Vec::new();
    let mut odometer = vec![0usize; keys.len()];
    for _ in 0..total {
        // materialize this combination as config overrides
        let mut value = serde_json::to_value(&base).expect("config serializes");
        let map = value.as_object_mut().unwrap();
        let mut desc = Vec::new();
        for (slot, key) in keys.iter().enumerate() {
            let v = &lists[slot][odometer[slot]];
            let json = serde_json::to_value(v)
                .map_err(|e| CliError::Usage(format!("grid value for {key}: {e}")))?;
            desc.push(format!("{key}={json}"));
            map.insert((*key).clone(), json);
        }
        let cfg: TrainConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("grid key rejected: {e}")))?;
        cfg.validate()?;
        let manifest = RunManifest::new(
            fingerprint.clone(),
            "sweep",
            vec![cfg.seed],
            cfg.clone(),
            out,
        );
        let dir = out.join(format!("sweep-{}", manifest.id()));
        let result_path = dir.join("result.json");
        let run: RunResult = if result_path.exists() {
            // completed in an earlier invocation; reuse
            let text = std::fs::read_to_string(&result_path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("corrupt {}: {e}", result_path.display())))?
        } else {
            run_one_seed(&ds, &fingerprint, &cfg, "sweep", cfg.seed, &dir, false, false, None)?
        };
        println!(
            "sweep {} [{}]: val {:.4}, test R@20 {:.4}",
            manifest.id(),
            desc.join(", "),
            run.best_val_metric,
            run.test.metric(20, false).unwrap_or(f64::NAN)
        );
        outcomes.push((desc.join(", "), run));

        // advance odometer
        for slot in (0..odometer.len()).rev() {
            odometer[slot] += 1;
            if odometer[slot] < lists[slot].len() {
                break;
            }
            odometer[slot] = 0;
        }
    }
    outcomes.sort_by(|a, b| b.1.best_val_metric.total_cmp(&a.1.best_val_metric));
    println!("{:<44} {:<12} {:<12}", "combination", "val metric", "test R@20");
    for (desc, run) in &outcomes {
        println!(
            "{:<44} {:<12.4} {:<12.4}",
            desc,
            run.best_val_metric,
            run.test.metric(20, false).unwrap_or(f64::NAN)
        );
    }
    let summary: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|(desc, run)| {
            serde_json::json!({
                "combination": desc,
                "manifest": run.manifest,
                "best_val_metric": run.best_val_metric,
                "result": run,
            })
        })
        .collect();
    std::fs::write(
        out.join("sweep_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(())
}
