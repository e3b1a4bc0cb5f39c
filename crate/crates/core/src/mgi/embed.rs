//! Frozen embedding providers standing in for pretrained image/text encoders.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{GuidanceStep, Instruction, InstructionSet};
use crate::arcade::Action;
use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{AnyTensor, Checkpoint, Tensor};

/// Deterministic map from frames and text to fixed-width vectors.
///
/// Implementations never change their outputs during the process lifetime.
pub trait EmbeddingProvider: Send + Sync {
    fn image_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn embed_frame(&self, frame: &[f32]) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

fn unit(v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.into_iter().map(|x| x as f32).collect();
    }
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Seeded random projection of frames and hash-bag projection of text.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    dim: usize,
    seed: u64,
    frame_len: usize,
    proj: Vec<f64>,
    bias: Vec<f64>,
}

impl SyntheticProvider {
    pub fn new(dim: usize, frame_len: usize, seed: u64) -> Result<SyntheticProvider> {
        if dim == 0 || frame_len == 0 {
            return Err(config_err!("embedding dim and frame length must be positive"));
        }
        let scale = 1.0 / (frame_len as f64).sqrt();
        let proj = gaussian(seed ^ 0x5eed_f4a3, frame_len * dim).into_iter().map(|x| x * scale).collect();
        let bias = gaussian(seed ^ 0xb1a5, dim).into_iter().map(|x| x * 0.1).collect();
        Ok(SyntheticProvider { dim, seed, frame_len, proj, bias })
    }

    fn token_vec(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        gaussian(u64::from_le_bytes(digest[..8].try_into().unwrap()), self.dim)
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

impl EmbeddingProvider for SyntheticProvider {
    fn image_dim(&self) -> usize {
        self.dim
    }

    fn text_dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, frame: &[f32]) -> Result<Vec<f32>> {
        if frame.len() != self.frame_len {
            return Err(shape_err!("frame has {} values, provider expects {}", frame.len(), self.frame_len));
        }
        let mut out = self.bias.clone();
        for (i, &v) in frame.iter().enumerate() {
            if v != 0.0 {
                let row = &self.proj[i * self.dim..(i + 1) * self.dim];
                for (o, p) in out.iter_mut().zip(row) {
                    *o += v as f64 * p;
                }
            }
        }
        Ok(unit(out))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let toks = tokens(text);
        let mut feats: Vec<String> = toks.clone();
        feats.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        if feats.is_empty() {
            feats.push(String::new());
        }
        let mut out = vec![0.0; self.dim];
        for f in &feats {
            for (o, v) in out.iter_mut().zip(self.token_vec(f)) {
                *o += v;
            }
        }
        Ok(unit(out))
    }
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn frame_key(frame: &[f32]) -> String {
    let bytes: Vec<u8> = frame.iter().flat_map(|v| v.to_le_bytes()).collect();
    format!("img:{}", hash_hex(&bytes))
}

pub fn text_key(text: &str) -> String {
    format!("txt:{}", hash_hex(text.as_bytes()))
}

/// Embeddings looked up by content hash from a cache file.
#[derive(Clone, Debug)]
pub struct FileProvider {
    image_dim: usize,
    text_dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl FileProvider {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<FileProvider> {
        let mut table = HashMap::new();
        let (mut image_dim, mut text_dim) = (None, None);
        for (k, t) in &ck.entries {
            let v = t.to::<f32>().into_data();
            let slot = if k.starts_with("img:") {
                &mut image_dim
            } else if k.starts_with("txt:") {
                &mut text_dim
            } else {
                return Err(Error::Format(format!("cache key `{k}` lacks an img:/txt: prefix")));
            };
            if *slot.get_or_insert(v.len()) != v.len() {
                return Err(shape_err!("cache entry `{k}` has width {}, expected {}", v.len(), slot.unwrap()));
            }
            table.insert(k.clone(), v);
        }
        let image_dim = image_dim.or(text_dim).unwrap_or(0);
        let text_dim = text_dim.unwrap_or(image_dim);
        Ok(FileProvider { image_dim, text_dim, table })
    }

    pub fn read(path: &Path) -> Result<FileProvider> {
        FileProvider::from_checkpoint(&Checkpoint::read(path)?)
    }

    fn lookup(&self, key: String) -> Result<Vec<f32>> {
        self.table.get(&key).cloned().ok_or(Error::Lookup(key))
    }
}

impl EmbeddingProvider for FileProvider {
    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn embed_frame(&self, frame: &[f32]) -> Result<Vec<f32>> {
        self.lookup(frame_key(frame))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        self.lookup(text_key(text))
    }
}

/// Collects provider outputs into a cache file readable by [`FileProvider`].
#[derive(Default)]
pub struct EmbeddingCache {
    ck: Checkpoint,
    seen: std::collections::HashSet<String>,
}

impl EmbeddingCache {
    pub fn add_set(&mut self, set: &InstructionSet, p: &dyn EmbeddingProvider) -> Result<()> {
        for ins in &set.instructions {
            self.add_text(&ins.description, p)?;
            for f in &ins.frames {
                self.add_frame(&f.flatten()?, p)?;
            }
            for g in &ins.guidance {
                self.add_text(&render_guidance(g), p)?;
            }
        }
        Ok(())
    }

    fn add(&mut self, key: String, v: Vec<f32>) -> Result<()> {
        if self.seen.insert(key.clone()) {
            let n = v.len();
            self.ck.push(key, Tensor::new(vec![n], v)?);
        }
        Ok(())
    }

    pub fn add_frame(&mut self, frame: &[f32], p: &dyn EmbeddingProvider) -> Result<()> {
        self.add(frame_key(frame), p.embed_frame(frame)?)
    }

    pub fn add_text(&mut self, text: &str, p: &dyn EmbeddingProvider) -> Result<()> {
        self.add(text_key(text), p.embed_text(text)?)
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ck
    }
}

/// Text fed to the text encoder for one guidance step.
pub fn render_guidance(g: &GuidanceStep) -> String {
    let action = Action::from_id(g.action_id).map_or_else(|| format!("action {}", g.action_id), |a| a.name().to_string());
    let mut s = format!("{}. action {action}.", g.text);
    for b in &g.boxes {
        s.push_str(&format!(" {} spans columns {} to {} rows {} to {}.", b.label, b.a, b.c, b.b, b.d));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding {
    pub desc: Vec<f32>,
    pub frames: Vec<Vec<f32>>,
    pub guidance: Vec<Vec<f32>>,
}

pub fn embed_instruction(ins: &Instruction, p: &dyn EmbeddingProvider) -> Result<InstructionEmbedding> {
    if p.image_dim() != p.text_dim() {
        return Err(shape_err!("image dim {} differs from text dim {}", p.image_dim(), p.text_dim()));
    }
    let frames = ins.frames.iter().map(|f| p.embed_frame(&f.flatten()?)).collect::<Result<Vec<_>>>()?;
    let guidance = ins.guidance.iter().map(|g| p.embed_text(&render_guidance(g))).collect::<Result<Vec<_>>>()?;
    Ok(InstructionEmbedding { desc: p.embed_text(&ins.description)?, frames, guidance })
}

/// Whole-set embeddings stacked row-wise: `desc` is `n x e`, the others `n*m x e`.
#[derive(Clone, Debug, PartialEq)]
pub struct SetEmbedding {
    pub n: usize,
    pub m: usize,
    pub desc: Tensor<f32>,
    pub frames: Tensor<f32>,
    pub guidance: Tensor<f32>,
}

impl SetEmbedding {
    pub fn dim(&self) -> usize {
        self.desc.shape()[1]
    }

    /// SHA-256 over every stored value, used to confirm embeddings stay frozen.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.desc, &self.frames, &self.guidance] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Reorders instructions; used by permutation checks.
    pub fn permuted(&self, perm: &[usize]) -> SetEmbedding {
        self.select(perm)
    }

    /// The listed instructions, in the listed order.
    pub fn select(&self, idx: &[usize]) -> SetEmbedding {
        let e = self.dim();
        let rows = |t: &Tensor<f32>, block: usize| {
            let mut out = Vec::with_capacity(idx.len() * block * e);
            for &p in idx {
                out.extend_from_slice(&t.data()[p * block * e..(p + 1) * block * e]);
            }
            Tensor::new(vec![idx.len() * block, e], out).unwrap()
        };
        SetEmbedding {
            n: idx.len(),
            m: self.m,
            desc: rows(&self.desc, 1),
            frames: rows(&self.frames, self.m),
            guidance: rows(&self.guidance, self.m),
        }
    }
}

pub fn embed_set(set: &InstructionSet, p: &dyn EmbeddingProvider) -> Result<SetEmbedding> {
    let n = set.len();
    let m = set.segment_len();
    if n == 0 || m == 0 {
        return Err(config_err!("instruction set `{}` is empty", set.game_id));
    }
    let e = p.text_dim();
    let (mut desc, mut frames, mut guidance) = (Vec::new(), Vec::new(), Vec::new());
    let mut desc_memo: HashMap<&str, Vec<f32>> = HashMap::new();
    for (i, ins) in set.instructions.iter().enumerate() {
        if ins.len() != m || ins.guidance.len() != m {
            return Err(shape_err!("instruction {i} of `{}` has {} steps, expected {m}", set.game_id, ins.len()));
        }
        if !desc_memo.contains_key(ins.description.as_str()) {
            desc_memo.insert(&ins.description, p.embed_text(&ins.description)?);
        }
        desc.extend_from_slice(&desc_memo[ins.description.as_str()]);
        for f in &ins.frames {
            frames.extend(p.embed_frame(&f.flatten()?)?);
        }
        for g in &ins.guidance {
            guidance.extend(p.embed_text(&render_guidance(g))?);
        }
    }
    Ok(SetEmbedding {
        n,
        m,
        desc: Tensor::new(vec![n, e], desc)?,
        frames: Tensor::new(vec![n * m, e], frames)?,
        guidance: Tensor::new(vec![n * m, e], guidance)?,
    })
}

impl From<&SetEmbedding> for Checkpoint {
    fn from(s: &SetEmbedding) -> Checkpoint {
        Checkpoint {
            entries: vec![
                ("desc".into(), AnyTensor::F32(s.desc.clone())),
                ("frames".into(), AnyTensor::F32(s.frames.clone())),
                ("guidance".into(), AnyTensor::F32(s.guidance.clone())),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::arcade::{DynamicsFlags, GameSpec, GemColor};
    use crate::mgi::synth_instructions;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn synthetic_outputs_are_unit_and_frozen() {
        let p = SyntheticProvider::new(64, 392, 1).unwrap();
        let frame: Vec<f32> = (0..392).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let a = p.embed_frame(&frame).unwrap();
        assert_eq!(a, p.embed_frame(&frame).unwrap());
        let n = cosine(&a, &a).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let t = p.embed_text("move up toward the red gem").unwrap();
        assert!((cosine(&t, &t).sqrt() - 1.0).abs() < 1e-6);
        assert!(p.embed_frame(&frame[..10]).is_err());
    }

    #[test]
    fn distinct_guidance_strings_do_not_collide() {
        let p = SyntheticProvider::new(512, 392, 0).unwrap();
        let mut texts = BTreeSet::new();
        for (bits, good) in [(0u8, GemColor::Red), (7, GemColor::Blue), (5, GemColor::Red)] {
            let flags = DynamicsFlags { collect: true, avoid: bits & 1 != 0, chase: bits & 2 != 0, push: bits & 4 != 0 };
            let set = synth_instructions(&GameSpec::new(flags, good, 4, 7, 64), 10, 20, 3).unwrap();
            texts.extend(set.instructions.iter().flat_map(|i| i.guidance.iter().map(render_guidance)));
        }
        let vecs: Vec<Vec<f32>> = texts.iter().map(|t| p.embed_text(t).unwrap()).collect();
        assert!(vecs.len() > 50);
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let c = cosine(&vecs[i], &vecs[j]);
                assert!(c < 0.999, "{:?} vs {:?}: {c}", texts.iter().nth(i), texts.iter().nth(j));
            }
        }
    }

    #[test]
    fn file_provider_matches_cache_and_names_missing_keys() {
        let flags = DynamicsFlags { collect: true, avoid: false, chase: false, push: false };
        let set = synth_instructions(&GameSpec::new(flags, GemColor::Red, 0, 7, 64), 2, 4, 1).unwrap();
        let p = SyntheticProvider::new(16, 392, 9).unwrap();
        let mut cache = EmbeddingCache::default();
        cache.add_set(&set, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        cache.into_checkpoint().write(&path).unwrap();
        let fp = FileProvider::read(&path).unwrap();
        assert_eq!(embed_set(&set, &fp).unwrap(), embed_set(&set, &p).unwrap());
        match fp.embed_text("never seen") {
            Err(Error::Lookup(k)) => assert_eq!(k, text_key("never seen")),
            other => panic!("{other:?}"),
        }
    }
}
