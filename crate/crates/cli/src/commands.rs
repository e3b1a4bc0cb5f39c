use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use dtgi_core::arcade::{make_split, GameSpec};
use dtgi_core::bench::{
    build_conditioning, default_provider, embedding_cache, evaluate_games, grad_suite, load_model, oracle, parse_methods,
    prepare, report_csv, summary_text, train, Experiment, GameResult, Method, RunConfig, RunRecord, TrainLog,
    TrainOptions, GRAD_TOL, MODEL_FILE, RESUME_FILE,
};
use dtgi_core::mgi::FileProvider;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::setup::{
    echo_config, effective_config, ensure_fresh_dir, load_data, parse_seeds, run_dir, sha256_file, EMBEDDING_FILE,
    MANIFEST_FILE,
};
use crate::{svg, Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { games, budget } => gen_data(cli, *games, *budget),
        Command::Train { methods, seeds, resume, stop_after_epochs } => {
            train_cmd(cli, methods.as_deref(), seeds.as_deref(), *resume, *stop_after_epochs)
        }
        Command::Eval { methods, seeds } => eval_cmd(cli, methods.as_deref(), seeds.as_deref()),
        Command::Report { fixtures: true, .. } => oracle_cmd(),
        Command::Report { methods, seeds, .. } => report_cmd(cli, methods.as_deref(), seeds.as_deref()),
        Command::ImportanceDump { method } => importance_dump(cli, method),
        Command::GradCheck => grad_check_cmd(cli),
        Command::Oracle => oracle_cmd(),
    }
}

fn seed_flag(cli: &Cli, key: &'static str) -> Vec<(&'static str, String)> {
    cli.seed.map(|s| (key, s.to_string())).into_iter().collect()
}

/// Run config plus the methods and seeds a command works on.
fn run_setup(cli: &Cli, methods: Option<&str>, seeds: Option<&str>) -> Result<(RunConfig, Vec<Method>, Vec<u64>)> {
    let mut cfg = effective_config(cli, &seed_flag(cli, "train.seed"))?;
    if let Some(m) = methods {
        cfg.train.methods = parse_methods(m)?;
    }
    cfg.validate()?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.train.seed],
    };
    Ok((cfg.clone(), cfg.train.methods, seeds))
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c
}

fn gen_data(cli: &Cli, games: Option<usize>, budget: Option<usize>) -> Result<()> {
    let mut flags = seed_flag(cli, "split.master_seed");
    if let Some(b) = budget {
        flags.push(("split.budget", b.to_string()));
    }
    let mut cfg = effective_config(cli, &flags)?;
    if let Some(g) = games {
        if g <= cfg.split.n_test {
            bail!("--games {g} leaves no training games beside {} unseen ones", cfg.split.n_test);
        }
        cfg.split.n_train = g - cfg.split.n_test;
    }
    cfg.validate()?;
    let out = &cli.out;
    ensure_fresh_dir(out, cli.force)?;
    let started = Instant::now();

    let split = make_split(&cfg.split)?;
    let mut files = split.write_dir(out)?;
    let obs_len = split.specs().next().map(GameSpec::obs_len).context("split has no games")?;
    embedding_cache(&split, &default_provider(&cfg, obs_len)?)?.write(&out.join(EMBEDDING_FILE))?;
    files.push(EMBEDDING_FILE.into());
    let data = prepare(&split, &cfg, &FileProvider::read(&out.join(EMBEDDING_FILE))?)?;
    files.push(echo_config(out, "gen-data", &cfg)?.strip_prefix(out)?.to_path_buf());

    let mut hashes = BTreeMap::new();
    for f in &files {
        hashes.insert(f.to_string_lossy().replace('\\', "/"), sha256_file(&out.join(f))?);
    }
    let embeddings: BTreeMap<String, String> = data
        .train
        .iter()
        .chain(&data.test)
        .filter_map(|g| g.embedding.as_ref().map(|e| (g.spec.game_id.clone(), e.hash())))
        .collect();
    let content = json!({
        "train_games": split.train.iter().map(|t| &t.spec.game_id).collect::<Vec<_>>(),
        "test_games": split.test.iter().map(|t| &t.spec.game_id).collect::<Vec<_>>(),
        "transitions": split.train.iter().map(|t| (t.spec.game_id.clone(), t.dataset.len())).collect::<BTreeMap<_, _>>(),
        "files": hashes,
        "embedding_hashes": embeddings,
    });
    let content_hash = hex::encode(Sha256::digest(serde_json::to_vec(&content)?));
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({ "content": content, "content_hash": content_hash, "created_unix_secs": created });
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;

    eprintln!(
        "wrote {} training datasets and {} instruction sets to {} in {:.1}s",
        split.train.len(),
        split.train.len() + split.test.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    println!("{content_hash}");
    Ok(())
}

fn train_cmd(
    cli: &Cli,
    methods: Option<&str>,
    seeds: Option<&str>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let (cfg, methods, seeds) = run_setup(cli, methods, seeds)?;
    let data = load_data(&cli.out, &cfg)?;
    let frozen = data.embedding_hashes();
    echo_config(&cli.out, "train", &cfg)?;
    for &method in &methods {
        for &seed in &seeds {
            let dir = run_dir(&cli.out, method, seed);
            if dir.join(MODEL_FILE).exists() && !cli.force && !resume {
                bail!("{method} seed {seed} is already trained in {}; pass --force to retrain", dir.display());
            }
            if cli.force && !resume && dir.join(RESUME_FILE).exists() {
                fs::remove_file(dir.join(RESUME_FILE))?;
            }
            let started = Instant::now();
            let mut progress = |s: &dtgi_core::bench::EpochSummary| {
                eprintln!("{method} seed {seed} epoch {} ({} steps) mean loss {:.4}", s.epoch, s.steps, s.mean_loss);
            };
            let opts = TrainOptions {
                run_dir: Some(dir.clone()),
                resume,
                stop_after,
                on_epoch: Some(&mut progress),
            };
            let out = train(&data, &with_seed(&cfg, seed), method, opts)?;
            if !out.completed {
                eprintln!("{method} seed {seed} stopped after {} steps; rerun with --resume", out.log.rows.len());
                continue;
            }
            let hash = out.checkpoint_hash();
            let summary = json!({
                "method": method.name(),
                "seed": seed,
                "checkpoint_hash": hash,
                "steps": out.log.rows.len(),
                "epoch_mean_loss": out.log.epoch_means(),
                "embedding_hashes": data.embedding_hashes(),
                "seconds": started.elapsed().as_secs_f64(),
            });
            fs::write(dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{method} seed {seed} {hash}");
        }
    }
    if data.embedding_hashes() != frozen {
        bail!("instruction embeddings changed during training");
    }
    Ok(())
}

/// Loads each (method, seed) checkpoint and plays it on every game.
fn evaluate_runs(cli: &Cli, cfg: &RunConfig, methods: &[Method], seeds: &[u64]) -> Result<Experiment> {
    let data = load_data(&cli.out, cfg)?;
    let id: Vec<_> = data.train.iter().collect();
    let ood: Vec<_> = data.test.iter().collect();
    let mut exp = Experiment::default();
    for &method in methods {
        for &seed in seeds {
            let c = with_seed(cfg, seed);
            let dir = run_dir(&cli.out, method, seed);
            let (model, store) = load_model(&dir, &c, method, data.obs_len)?;
            eprintln!("evaluating {method} seed {seed}");
            exp.records.push(RunRecord {
                method,
                seed,
                checkpoint_hash: sha256_file(&dir.join(MODEL_FILE))?,
                params: model.param_report(&store),
                log: TrainLog::default(),
                id: evaluate_games(&model, &store, &id, &c)?,
                ood: evaluate_games(&model, &store, &ood, &c)?,
            });
        }
    }
    Ok(exp)
}

fn eval_cmd(cli: &Cli, methods: Option<&str>, seeds: Option<&str>) -> Result<()> {
    let (cfg, methods, seeds) = run_setup(cli, methods, seeds)?;
    let exp = evaluate_runs(cli, &cfg, &methods, &seeds)?;
    let mut csv = String::from("split,game_id,method,seed,target_rtg,raw_mean,raw_std,returns\n");
    for r in &exp.records {
        for (split, games) in [("ID", &r.id), ("OOD", &r.ood)] {
            for g in games.iter() {
                let returns: Vec<String> = g.returns.iter().map(|x| format!("{x}")).collect();
                let GameResult { game_id, target_rtg, .. } = g;
                let _ = writeln!(
                    csv,
                    "{split},{game_id},{},{},{target_rtg:.4},{:.4},{:.4},{}",
                    r.method,
                    r.seed,
                    g.mean(),
                    g.std(),
                    returns.join(" ")
                );
            }
        }
    }
    echo_config(&cli.out, "eval", &cfg)?;
    fs::write(cli.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn report_cmd(cli: &Cli, methods: Option<&str>, seeds: Option<&str>) -> Result<()> {
    let (cfg, methods, seeds) = run_setup(cli, methods, seeds)?;
    let exp = evaluate_runs(cli, &cfg, &methods, &seeds)?;
    let sections = exp.sections()?;
    let csv = report_csv(&sections);
    let summary = summary_text(&sections);
    echo_config(&cli.out, "report", &cfg)?;
    fs::write(cli.out.join("report.csv"), &csv)?;
    fs::write(cli.out.join("summary.txt"), &summary)?;
    let params: Vec<Value> = exp.records.iter().filter(|r| r.seed == seeds[0]).map(|r| json!(r.params)).collect();
    fs::write(cli.out.join("params.json"), serde_json::to_string_pretty(&params)?)?;
    print!("{summary}");
    Ok(())
}

fn importance_dump(cli: &Cli, method: &str) -> Result<()> {
    let method: Method = method.parse()?;
    match method {
        Method::Dt => bail!("DT has no instruction conditioning, so there are no importance scores to dump"),
        Method::Dtl | Method::Dtv => {
            bail!("{method} conditions on a single pseudo-instruction; its importance is fixed at [1]")
        }
        Method::DtgiA | Method::Dtgi => {}
    }
    let cfg = effective_config(cli, &seed_flag(cli, "train.seed"))?;
    cfg.validate()?;
    let data = load_data(&cli.out, &cfg)?;
    let (model, store) = load_model(&run_dir(&cli.out, method, cfg.train.seed), &cfg, method, data.obs_len)?;
    let mut rows = Vec::new();
    let mut csv = String::from("game_id,instruction_index,score\n");
    for g in data.train.iter().chain(&data.test) {
        let cond = build_conditioning(method, &g.spec.game_id, g.embedding.as_ref())?
            .with_context(|| format!("{method} has no conditioning for `{}`", g.spec.game_id))?;
        let (_, scores) = model.instruction_scores(&store, &cond)?;
        for (i, s) in scores.s.iter().enumerate() {
            let _ = writeln!(csv, "{},{i},{s:.8}", g.spec.game_id);
        }
        rows.push((g.spec.game_id.clone(), scores.s));
    }
    let stem = format!("importance-{method}");
    fs::write(cli.out.join(format!("{stem}.csv")), &csv)?;
    fs::write(cli.out.join(format!("{stem}.svg")), svg::heatmap(&rows, &format!("{method} instruction importance")))?;
    eprintln!("wrote {stem}.csv and {stem}.svg to {}", cli.out.display());
    Ok(())
}

fn grad_check_cmd(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let cases = grad_suite(cli.seed.unwrap_or(0))?;
    let mut worst = 0.0f64;
    for c in &cases {
        worst = worst.max(c.report.max_rel_error);
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<30} max rel error {:.3e} over {} coordinates", c.name, c.report.max_rel_error, c.report.coordinates);
    }
    println!("max relative error {worst:.3e} (bound {GRAD_TOL:.0e}) in {:.1}s", started.elapsed().as_secs_f64());
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn oracle_cmd() -> Result<()> {
    let report = oracle::run_fixture_oracle()?;
    print!("{}", report.render());
    if !report.passed() {
        bail!("normalisation oracle failed");
    }
    Ok(())
}

