//! Multimodal game instructions: a description, `m` observation frames and a
//! guidance step per frame naming the action and the key elements on the board.

mod embed;
mod synth;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{Checkpoint, Tensor};

pub use embed::{
    embed_instruction, embed_set, frame_key, text_key, EmbeddingCache, EmbeddingProvider, FileProvider,
    InstructionEmbedding, SetEmbedding, SyntheticProvider,
};
pub use synth::{describe_game, synth_instructions};

/// Axis-aligned cell box; `(a, b)` is the minimum corner and `(c, d)` the maximum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyElementBox {
    pub a: u32,
    pub b: u32,
    pub c: u32,
    pub d: u32,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceStep {
    pub action_id: usize,
    pub text: String,
    pub boxes: Vec<KeyElementBox>,
}

/// Inline `[channels][height][width]` values, or a path to a raw tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Frame {
    Inline(Vec<Vec<Vec<f32>>>),
    Path(String),
}

impl Frame {
    pub fn from_planes(data: &[f32], shape: [usize; 3]) -> Frame {
        let [c, h, w] = shape;
        Frame::Inline((0..c).map(|ci| (0..h).map(|y| data[(ci * h + y) * w..(ci * h + y + 1) * w].to_vec()).collect()).collect())
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        match self {
            Frame::Inline(p) => Some([p.len(), p.first()?.len(), p.first()?.first()?.len()]),
            Frame::Path(_) => None,
        }
    }

    pub fn flatten(&self) -> Result<Vec<f32>> {
        match self {
            Frame::Inline(p) => Ok(p.iter().flatten().flatten().copied().collect()),
            Frame::Path(path) => Err(Error::Format(format!("frame `{path}` is not loaded; resolve frame paths first"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub description: String,
    pub frames: Vec<Frame>,
    pub guidance: Vec<GuidanceStep>,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub game_id: String,
    pub instructions: Vec<Instruction>,
}

impl InstructionSet {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Steps per instruction, taken from the first one.
    pub fn segment_len(&self) -> usize {
        self.instructions.first().map_or(0, Instruction::len)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<InstructionSet> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<InstructionSet> {
        InstructionSet::from_json(&std::fs::read_to_string(path)?)
    }

    /// Replaces path frames with inline data loaded relative to `base`.
    ///
    /// A raw tensor file uses the checkpoint layout; its first entry must have
    /// rank 3 (`channels x height x width`).
    pub fn resolve_frames(&self, base: &Path) -> Result<InstructionSet> {
        let mut out = self.clone();
        for ins in &mut out.instructions {
            for f in &mut ins.frames {
                if let Frame::Path(rel) = f {
                    let ck = Checkpoint::read(&base.join(&*rel))?;
                    let (_, t) = ck.entries.first().ok_or_else(|| Error::Format(format!("`{rel}` holds no tensor")))?;
                    let t: Tensor<f32> = t.to();
                    let shape: [usize; 3] = t
                        .shape()
                        .try_into()
                        .map_err(|_| Error::Format(format!("`{rel}` must hold a rank-3 tensor, got {:?}", t.shape())))?;
                    *f = Frame::from_planes(t.data(), shape);
                }
            }
        }
        Ok(out)
    }
}

/// Non-overlapping windows of `segment_len`; the remainder is dropped.
pub fn segment_video<T: Clone>(frames: &[T], segment_len: usize) -> Result<Vec<Vec<T>>> {
    if segment_len == 0 {
        return Err(config_err!("segment length must be at least 1"));
    }
    Ok(frames.chunks_exact(segment_len).map(<[T]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchemaBounds {
    pub frame_shape: [usize; 3],
    pub action_space: usize,
    /// Required steps per instruction, if fixed.
    pub segment_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Structural checks; an empty result means the set is usable downstream.
pub fn validate(set: &InstructionSet, bounds: &SchemaBounds) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |path: String, message: String| out.push(Diagnostic { path, message });
    if set.game_id.is_empty() {
        diag("game_id".into(), "empty game id".into());
    }
    if set.instructions.is_empty() {
        diag("instructions".into(), "set holds no instructions".into());
    }
    let m = bounds.segment_len.unwrap_or_else(|| set.segment_len());
    let [_, h, w] = bounds.frame_shape;
    for (i, ins) in set.instructions.iter().enumerate() {
        let p = format!("instructions[{i}]");
        if ins.description.trim().is_empty() {
            diag(format!("{p}.description"), "empty description".into());
        }
        if ins.frames.len() != ins.guidance.len() {
            diag(p.clone(), format!("{} frames but {} guidance steps", ins.frames.len(), ins.guidance.len()));
        }
        if ins.frames.is_empty() || ins.frames.len() != m {
            diag(format!("{p}.frames"), format!("expected {m} frames, found {}", ins.frames.len()));
        }
        for (t, f) in ins.frames.iter().enumerate() {
            if let Frame::Inline(planes) = f {
                let ragged = planes.iter().any(|pl| pl.len() != h || pl.iter().any(|r| r.len() != w));
                if planes.len() != bounds.frame_shape[0] || ragged {
                    diag(format!("{p}.frames[{t}]"), format!("shape differs from {:?}", bounds.frame_shape));
                }
                if planes.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    diag(format!("{p}.frames[{t}]"), "non-finite value".into());
                }
            }
        }
        for (t, g) in ins.guidance.iter().enumerate() {
            let gp = format!("{p}.guidance[{t}]");
            if g.action_id >= bounds.action_space {
                diag(gp.clone(), format!("action {} outside [0, {})", g.action_id, bounds.action_space));
            }
            if g.text.trim().is_empty() {
                diag(gp.clone(), "empty guidance text".into());
            }
            for (k, bx) in g.boxes.iter().enumerate() {
                if bx.a > bx.c || bx.b > bx.d {
                    diag(format!("{gp}.boxes[{k}]"), "corners out of order".into());
                }
                if bx.c as usize >= w || bx.d as usize >= h {
                    diag(format!("{gp}.boxes[{k}]"), format!("box exceeds the {w}x{h} frame"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_floor_rule() {
        let v: Vec<u32> = (0..105).collect();
        assert_eq!(segment_video(&v[..100], 20).unwrap().len(), 5);
        let segs = segment_video(&v, 20).unwrap();
        assert_eq!(segs.len(), 5);
        assert_eq!(segs[4].last(), Some(&99));
        assert!(segment_video(&v[..19], 20).unwrap().is_empty());
        assert!(segment_video::<u32>(&[], 20).unwrap().is_empty());
        assert!(segment_video(&v, 0).is_err());
    }

    #[test]
    fn validator_flags_bad_boxes_and_actions() {
        let ins = Instruction {
            description: "d".into(),
            frames: vec![Frame::from_planes(&[0.0; 4], [1, 2, 2])],
            guidance: vec![GuidanceStep {
                action_id: 9,
                text: "go".into(),
                boxes: vec![KeyElementBox { a: 1, b: 0, c: 0, d: 5, label: "x".into() }],
            }],
        };
        let set = InstructionSet { game_id: "g".into(), instructions: vec![ins] };
        let bounds = SchemaBounds { frame_shape: [1, 2, 2], action_space: 6, segment_len: Some(1) };
        let d = validate(&set, &bounds);
        assert_eq!(d.len(), 3, "{d:?}");
    }

    #[test]
    fn path_frames_resolve_from_raw_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut ck = Checkpoint::default();
        ck.push("frame", Tensor::new(vec![3, 2, 2], data.clone()).unwrap());
        ck.write(&dir.path().join("f0.bin")).unwrap();
        let set = InstructionSet {
            game_id: "ext".into(),
            instructions: vec![Instruction {
                description: "d".into(),
                frames: vec![Frame::Path("f0.bin".into())],
                guidance: vec![GuidanceStep { action_id: 0, text: "t".into(), boxes: vec![] }],
            }],
        };
        assert!(set.instructions[0].frames[0].flatten().is_err());
        let resolved = set.resolve_frames(dir.path()).unwrap();
        assert_eq!(resolved.instructions[0].frames[0].flatten().unwrap(), data);
        let back = InstructionSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
