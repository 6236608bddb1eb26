//! Binary clip container plus a JSON sidecar manifest.
//!
//! The container is a flat little-endian stream: features and targets are
//! stored as f32 (they arrive from 16-bit audio and a noisy force sensor;
//! f32 keeps files half the size and loses nothing real), everything else
//! is sized integers. Strings are u32-length-prefixed UTF-8.
//!
//! ```text
//! magic  b"PCLP"
//! u32    version (1)
//! u64    clip count
//! clip*  source, container, f64 start, snr (u8 tag, f64 db),
//!        u32 rows, u32 cols, f32[rows*cols] column-major, f32[cols] targets
//! ```
//!
//! The manifest rides next to the container as `<stem>.manifest.json` and
//! records how the set was built, so a reader never has to guess.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::SnrLevel;
use crate::{Error, Result};

use super::{ClipMeta, FeatureMatrix, LabeledClip};

const MAGIC: [u8; 4] = *b"PCLP";
const VERSION: u32 = 1;

/// Build provenance for a clip set, stored as the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSetManifest {
    pub version: u32,
    pub clip_count: usize,
    /// Augmentation levels, e.g. `["clean", "-10", "5"]`.
    pub grid: Vec<String>,
    pub seed: u64,
    pub clips_per_second: f64,
    /// Distinct source recording ids, sorted.
    pub sources: Vec<String>,
    /// Distinct container ids, sorted.
    pub containers: Vec<String>,
}

impl ClipSetManifest {
    /// Summarizes a clip set; `grid` should mirror the augmentation request.
    pub fn describe(clips: &[LabeledClip], grid: &[SnrLevel], seed: u64, cps: f64) -> Self {
        let mut sources: Vec<String> = clips.iter().map(|c| c.meta.source.clone()).collect();
        sources.sort();
        sources.dedup();
        let mut containers: Vec<String> = clips.iter().map(|c| c.meta.container.clone()).collect();
        containers.sort();
        containers.dedup();
        Self {
            version: VERSION,
            clip_count: clips.len(),
            grid: grid.iter().map(|g| g.to_string()).collect(),
            seed,
            clips_per_second: cps,
            sources,
            containers,
        }
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Corrupt { path: path.to_path_buf(), detail: detail.into() }
}

struct ClipWriter<'a, W: Write> {
    out: W,
    path: &'a Path,
}

impl<W: Write> ClipWriter<'_, W> {
    fn string(&mut self, s: &str) -> Result<()> {
        self.out.write_all(&(s.len() as u32).to_le_bytes())?;
        self.out.write_all(s.as_bytes())?;
        Ok(())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn f32s(&mut self, vs: impl Iterator<Item = f64>) -> Result<()> {
        for v in vs {
            self.out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    fn clip(&mut self, clip: &LabeledClip) -> Result<()> {
        let m = &clip.meta;
        self.string(&m.source)?;
        self.string(&m.container)?;
        self.f64(m.start)?;
        match m.snr {
            SnrLevel::Clean => {
                self.out.write_all(&[0])?;
                self.f64(0.0)?;
            }
            SnrLevel::Db(db) => {
                self.out.write_all(&[1])?;
                self.f64(db)?;
            }
        }
        let f = &clip.features;
        if clip.targets.len() != f.cols() {
            return Err(corrupt(
                self.path,
                format!("{} targets for {} time steps", clip.targets.len(), f.cols()),
            ));
        }
        self.out.write_all(&(f.rows() as u32).to_le_bytes())?;
        self.out.write_all(&(f.cols() as u32).to_le_bytes())?;
        self.f32s(f.data().iter().copied())?;
        self.f32s(clip.targets.iter().copied())?;
        Ok(())
    }
}

/// Writes clips and the sidecar manifest next to `path`.
pub fn write_clips(
    path: impl AsRef<Path>,
    clips: &[LabeledClip],
    manifest: &ClipSetManifest,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = ClipWriter { out: BufWriter::new(std::fs::File::create(path)?), path };
    w.out.write_all(&MAGIC)?;
    w.out.write_all(&VERSION.to_le_bytes())?;
    w.out.write_all(&(clips.len() as u64).to_le_bytes())?;
    for clip in clips {
        w.clip(clip)?;
    }
    w.out.flush()?;
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(manifest_path(path), json)?;
    Ok(())
}

struct ClipReader<'a, R: Read> {
    inp: R,
    path: &'a Path,
}

impl<R: Read> ClipReader<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inp
            .read_exact(&mut buf)
            .map_err(|_| corrupt(self.path, format!("unexpected end of file in {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        if len > 1 << 20 {
            return Err(corrupt(self.path, format!("{what} length {len} is implausible")));
        }
        let mut buf = vec![0u8; len];
        self.inp
            .read_exact(&mut buf)
            .map_err(|_| corrupt(self.path, format!("unexpected end of file in {what}")))?;
        String::from_utf8(buf).map_err(|_| corrupt(self.path, format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.inp
            .read_exact(&mut buf)
            .map_err(|_| corrupt(self.path, format!("unexpected end of file in {what}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn clip(&mut self) -> Result<LabeledClip> {
        let source = self.string("source id")?;
        let container = self.string("container id")?;
        let start = self.f64("clip start")?;
        let snr = match self.bytes::<1>("augmentation tag")?[0] {
            0 => {
                self.f64("augmentation level")?;
                SnrLevel::Clean
            }
            1 => SnrLevel::Db(self.f64("augmentation level")?),
            tag => return Err(corrupt(self.path, format!("unknown augmentation tag {tag}"))),
        };
        let rows = self.u32("feature rows")? as usize;
        let cols = self.u32("feature columns")? as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 28 {
            return Err(corrupt(self.path, format!("feature shape {rows}x{cols} is implausible")));
        }
        let data = self.f32s(rows * cols, "features")?;
        let targets = self.f32s(cols, "targets")?;
        Ok(LabeledClip {
            features: FeatureMatrix::from_columns(rows, cols, data),
            targets,
            meta: ClipMeta { source, container, start, snr },
        })
    }
}

/// Reads a clip container written by [`write_clips`].
pub fn read_clips(path: impl AsRef<Path>) -> Result<Vec<LabeledClip>> {
    let path = path.as_ref();
    let mut r = ClipReader { inp: BufReader::new(std::fs::File::open(path)?), path };
    let magic: [u8; 4] = r.bytes("magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected: MAGIC });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::BadVersion { path: path.to_path_buf(), found: version, supported: VERSION });
    }
    let count = u64::from_le_bytes(r.bytes("clip count")?) as usize;
    let mut clips = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        clips.push(r.clip()?);
    }
    let mut trailing = [0u8; 1];
    if r.inp.read(&mut trailing)? != 0 {
        return Err(corrupt(path, "trailing bytes after last clip"));
    }
    Ok(clips)
}

/// Reads the sidecar manifest for a clip container path.
pub fn read_clip_manifest(path: impl AsRef<Path>) -> Result<ClipSetManifest> {
    let text = std::fs::read_to_string(manifest_path(path.as_ref()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_clips() -> Vec<LabeledClip> {
        let mut clips = Vec::new();
        for (i, snr) in [SnrLevel::Clean, SnrLevel::Db(-7.5), SnrLevel::Db(20.0)]
            .into_iter()
            .enumerate()
        {
            let rows = 5;
            let cols = 4;
            let data: Vec<f64> = (0..rows * cols).map(|k| (k as f64 - 7.0) * 0.25).collect();
            clips.push(LabeledClip {
                features: FeatureMatrix::from_columns(rows, cols, data),
                targets: (0..cols).map(|k| 100.0 - (i * cols + k) as f64).collect(),
                meta: ClipMeta {
                    source: format!("rec_{i}"),
                    container: "glass_a".into(),
                    start: i as f64 * 0.016,
                    snr,
                },
            });
        }
        clips
    }

    #[test]
    fn clips_round_trip_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.clips");
        let clips = sample_clips();
        let grid = [SnrLevel::Clean, SnrLevel::Db(-7.5), SnrLevel::Db(20.0)];
        let manifest = ClipSetManifest::describe(&clips, &grid, 42, 0.25);
        write_clips(&path, &clips, &manifest).unwrap();

        let back = read_clips(&path).unwrap();
        assert_eq!(back.len(), clips.len());
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.meta, b.meta);
            assert_eq!(a.features, b.features);
            assert_eq!(a.targets, b.targets);
        }

        let m = read_clip_manifest(&path).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(m.grid, vec!["clean", "-7.5", "20"]);
        assert_eq!(m.sources, vec!["rec_0", "rec_1", "rec_2"]);
        assert_eq!(m.containers, vec!["glass_a"]);
    }

    #[test]
    fn values_survive_f32_exactly_when_representable() {
        // Quarter steps are exact in f32; the container must not perturb them.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clips");
        let clips = sample_clips();
        let manifest = ClipSetManifest::describe(&clips, &[SnrLevel::Clean], 1, 0.25);
        write_clips(&path, &clips, &manifest).unwrap();
        let back = read_clips(&path).unwrap();
        assert_eq!(back[0].features.at(3, 2), clips[0].features.at(3, 2));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clips");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_clips(&path), Err(Error::BadMagic { found: m, .. }) if &m == b"NOPE"));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clips");
        let mut bytes = MAGIC.to_vec();
        bytes.extend(9u32.to_le_bytes());
        bytes.extend(0u64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_clips(&path),
            Err(Error::BadVersion { found: 9, supported: 1, .. })
        ));
    }

    #[test]
    fn truncation_is_reported_not_panicked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clips");
        let clips = sample_clips();
        let manifest = ClipSetManifest::describe(&clips, &[SnrLevel::Clean], 1, 0.25);
        write_clips(&path, &clips, &manifest).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [5, 17, 40, full.len() - 3] {
            std::fs::write(&path, &full[..cut]).unwrap();
            match read_clips(&path) {
                Err(Error::Corrupt { .. }) => {}
                other => panic!("cut at {cut}: expected corrupt error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clips");
        let clips = sample_clips();
        let manifest = ClipSetManifest::describe(&clips, &[SnrLevel::Clean], 1, 0.25);
        write_clips(&path, &clips, &manifest).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_clips(&path), Err(Error::Corrupt { .. })));
    }
}
