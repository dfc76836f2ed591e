//! On-disk formats: the clip binary, per-clip JSON sidecars, the dataset
//! manifest, and atomic file replacement.
//!
//! Clip binary layout (little-endian):
//!
//! ```text
//! "CTPC" | version: u16 | T: u32 | H: u32 | W: u32 | C: u32 | T·H·W·C bytes, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositor::{PatchSource, SyntheticClip};
use crate::error::{CtpError, Result};
use crate::trajsynth::Trajectory;

pub const CLIP_MAGIC: &[u8; 4] = b"CTPC";
pub const CLIP_VERSION: u16 = 1;
const CLIP_HEADER_LEN: usize = 4 + 2 + 16;

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CtpError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CtpError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CtpError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CtpError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CtpError::io(path, e.error))?;
    Ok(())
}

pub fn encode_clip(dims: [usize; 4], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLIP_HEADER_LEN + pixels.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Parse a clip binary into `(dims, pixels)`.
pub fn decode_clip(bytes: &[u8]) -> Result<([usize; 4], Vec<u8>)> {
    if bytes.len() < CLIP_HEADER_LEN || &bytes[0..4] != CLIP_MAGIC {
        return Err(CtpError::data("not a clip file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLIP_VERSION {
        return Err(CtpError::data(format!("unsupported clip version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != CLIP_HEADER_LEN + n {
        return Err(CtpError::data(format!(
            "clip payload has {} bytes, header says {n}",
            bytes.len() - CLIP_HEADER_LEN
        )));
    }
    Ok((dims, bytes[CLIP_HEADER_LEN..].to_vec()))
}

pub fn read_clip(path: &Path) -> Result<([usize; 4], Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| CtpError::io(path, e))?;
    decode_clip(&bytes)
}

/// Per-clip sidecar: ground-truth trajectories plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub source_id: String,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub patch_sources: Vec<PatchSource>,
}

impl Sidecar {
    pub fn from_clip(id: &str, clip: &SyntheticClip) -> Self {
        Self {
            id: id.to_string(),
            source_id: clip.source_id.clone(),
            seed: clip.seed,
            trajectories: clip.trajectories.clone(),
            patch_sources: clip.patch_sources.clone(),
        }
    }
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let bytes = fs::read(path).map_err(|e| CtpError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CtpError::data(format!("malformed sidecar {}: {e}", path.display())))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub clip_path: String,
    pub sidecar_path: String,
    pub source_id: String,
}

/// Write a clip binary and its sidecar next to each other under `dir`.
pub fn write_synthetic_clip(dir: &Path, id: &str, clip: &SyntheticClip) -> Result<ManifestRecord> {
    let clip_name = format!("{id}.ctpc");
    let sidecar_name = format!("{id}.json");
    write_atomic(&dir.join(&clip_name), &encode_clip(clip.dims(), &clip.frames))?;
    let json = serde_json::to_vec_pretty(&Sidecar::from_clip(id, clip)).expect("sidecar serializes");
    write_atomic(&dir.join(&sidecar_name), &json)?;
    Ok(ManifestRecord {
        id: id.to_string(),
        clip_path: clip_name,
        sidecar_path: sidecar_name,
        source_id: clip.source_id.clone(),
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| CtpError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CtpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| CtpError::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Resolve a manifest-relative path.
pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Load every clip listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<SyntheticClip>> {
    read_manifest(manifest)?
        .iter()
        .map(|rec| {
            let (dims, frames) = read_clip(&resolve(manifest, &rec.clip_path))?;
            let side = read_sidecar(&resolve(manifest, &rec.sidecar_path))?;
            if dims[3] != 3 {
                return Err(CtpError::data(format!("clip {} is not RGB", rec.id)));
            }
            if side.trajectories.iter().any(|t| t.boxes.len() != dims[0]) {
                return Err(CtpError::data(format!("sidecar for {} disagrees with clip length", rec.id)));
            }
            Ok(SyntheticClip {
                t: dims[0],
                h: dims[1],
                w: dims[2],
                frames,
                trajectories: side.trajectories,
                patch_sources: side.patch_sources,
                seed: side.seed,
                source_id: side.source_id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::{procedural_raw_clip, synthesize_training_clip};
    use crate::trajsynth::TrajectoryConstraints;

    #[test]
    fn clip_header_layout() {
        let bytes = encode_clip([2, 3, 4, 3], &[7u8; 72]);
        assert_eq!(&bytes[0..4], b"CTPC");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 22 + 72);
        assert_eq!(decode_clip(&bytes).unwrap(), ([2, 3, 4, 3], vec![7u8; 72]));
    }

    #[test]
    fn corrupt_clips_rejected() {
        let mut bytes = encode_clip([2, 3, 4, 3], &[7u8; 72]);
        assert!(decode_clip(&bytes[..30]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_clip(&bytes), Err(CtpError::Data(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrajectoryConstraints::default();
        let mut recs = Vec::new();
        let mut clips = Vec::new();
        for i in 0..2 {
            let raw = procedural_raw_clip(1, i, 8, 32, 32, [1, 5]).unwrap();
            let clip = synthesize_training_clip(5 + i, &raw, 2, &c, 0.2).unwrap();
            recs.push(write_synthetic_clip(dir.path(), &format!("clip-{i:05}"), &clip).unwrap());
            clips.push(clip);
        }
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &recs).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), recs);
        let loaded = load_dataset(&manifest).unwrap();
        for (a, b) in loaded.iter().zip(&clips) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.seed, b.seed);
            for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
                assert_eq!(ta.visible, tb.visible);
                for (ba, bb) in ta.boxes.iter().zip(&tb.boxes) {
                    assert!((ba.cx - bb.cx).abs() <= 5e-7);
                }
            }
        }
    }

    #[test]
    fn atomic_write_leaves_old_content_on_abort() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_atomic(&path, b"old").unwrap();
        // a writer that dies before persisting only leaves a temp file behind
        {
            let mut tmp = tempfile::NamedTempFile::new_in(dir.path()).unwrap();
            tmp.write_all(b"partial").unwrap();
        }
        assert_eq!(fs::read(&path).unwrap(), b"old");
        write_atomic(&path, b"new").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"new");
    }
}
