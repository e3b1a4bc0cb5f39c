//! Config layering, output-directory rules and the on-disk data layout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dtgi_core::arcade::TaskSplit;
use dtgi_core::bench::{prepare, run_name, BenchData, Method, RunConfig};
use dtgi_core::config::{render, Layered};
use dtgi_core::mgi::FileProvider;
use sha2::{Digest, Sha256};

use crate::Cli;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDING_FILE: &str = "embeddings.ckpt";

/// Defaults, then `--config`, then `--set`, then the command's own flags.
pub fn effective_config(cli: &Cli, flags: &[(&str, String)]) -> Result<RunConfig> {
    let mut layers = Layered::new(&RunConfig::default())?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        layers.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for s in &cli.set {
        layers.set_str(s)?;
    }
    for (key, value) in flags {
        layers.set_str(&format!("{key}={value}"))?;
    }
    Ok(layers.build()?)
}

/// Writes the config a command actually ran with as `<command>.config.toml`.
pub fn echo_config(out: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join(format!("{command}.config.toml"));
    fs::write(&path, render(cfg)?)?;
    Ok(path)
}

pub fn ensure_fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if !dir.exists() || force {
        return Ok(());
    }
    if !dir.is_dir() {
        bail!("{} exists and is not a directory", dir.display());
    }
    if fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
    }
    Ok(())
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let seeds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("seed `{s}` is not a non-negative integer")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("runs").join(run_name(method, seed))
}

/// The split written by gen-data with its frozen embeddings.
pub fn load_data(out: &Path, cfg: &RunConfig) -> Result<BenchData> {
    if !out.join(MANIFEST_FILE).exists() {
        bail!("no {MANIFEST_FILE} in {}; run gen-data first", out.display());
    }
    let split = TaskSplit::read_dir(out)?;
    let cache = out.join(EMBEDDING_FILE);
    let provider = FileProvider::read(&cache).with_context(|| format!("loading embedding cache {}", cache.display()))?;
    let data = prepare(&split, cfg, &provider)?;
    if let Some(e) = data.train.iter().chain(&data.test).find_map(|g| g.embedding.as_ref()) {
        if e.m != cfg.split.segment_len {
            bail!("instructions on disk have {} steps but split.segment_len is {}", e.m, cfg.split.segment_len);
        }
        if e.dim() != cfg.embedding.dim {
            bail!("embeddings on disk have width {} but embedding.dim is {}", e.dim(), cfg.embedding.dim);
        }
    }
    Ok(data)
}
