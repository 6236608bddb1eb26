//! Recording bundle I/O: a directory with WAV audio, CSV sensor streams,
//! and a flat key=value meta file.
//!
//! ```text
//! <bundle>/
//!   audio.wav       mono, 16-bit int or 32-bit float PCM
//!   ft.csv          t,fx,fy,fz,tx,ty,tz   (500 Hz)
//!   scale.csv       t,weight_kg           (~1 Hz)
//!   meta.txt        key=value per line
//!   truth_ha.csv    t,ha_mm               (optional, simulator ground truth)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::dsp::{read_wav, write_wav, FtSeries, Waveform, FT_CHANNELS, FT_RATE};
use crate::{Error, Result};

use super::calibration::ScaleTrace;

/// One recording on disk, before labeling.
#[derive(Debug, Clone)]
pub struct RecordingBundle {
    pub id: String,
    pub container_id: String,
    /// Audio at its native rate; labeling resamples to 16 kHz.
    pub audio: Waveform,
    pub ft: FtSeries,
    pub scale: ScaleTrace,
    /// Free-form metadata (container geometry hints, densities, ...).
    pub meta: BTreeMap<String, String>,
    /// Simulator ground truth `(t, ha_mm)`, when the bundle is synthetic.
    pub truth_ha: Option<Vec<(f64, f64)>>,
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, detail: detail.into() }
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("not a number: {field:?}")))
}

/// Reads a force/torque CSV. Validates the header, column count, monotone
/// time stamps, and that the cadence is the dataset's 500 Hz within 1%.
pub fn read_ft_csv(path: impl AsRef<Path>) -> Result<FtSeries> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let expected = format!("t,{}", FT_CHANNELS.join(","));
    if header.trim() != expected {
        return Err(parse_err(path, 1, format!("header {header:?}, expected {expected:?}")));
    }
    let mut times: Vec<f64> = Vec::new();
    let mut channels: [Vec<f64>; 6] = Default::default();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(path, i + 1, format!("{} columns, expected 7", fields.len())));
        }
        let t = parse_f64(path, i + 1, fields[0])?;
        if let Some(&prev) = times.last() {
            if t < prev {
                return Err(parse_err(path, i + 1, "time stamps must be monotone non-decreasing"));
            }
        }
        times.push(t);
        for (c, field) in fields[1..].iter().enumerate() {
            channels[c].push(parse_f64(path, i + 1, field)?);
        }
    }
    if times.len() < 2 {
        return Err(parse_err(path, times.len() + 1, "need at least two samples"));
    }
    let span = times[times.len() - 1] - times[0];
    let rate = (times.len() - 1) as f64 / span;
    if (rate - FT_RATE as f64).abs() > 0.01 * FT_RATE as f64 {
        return Err(parse_err(
            path,
            1,
            format!("cadence {rate:.1} Hz, dataset format requires {FT_RATE} Hz"),
        ));
    }
    Ok(FtSeries { channels, sample_rate: FT_RATE, start_time: times[0] })
}

/// Writes a force/torque CSV with the standard header.
pub fn write_ft_csv(path: impl AsRef<Path>, ft: &FtSeries) -> Result<()> {
    let len = ft.len()?;
    let mut out = String::new();
    writeln!(out, "t,{}", FT_CHANNELS.join(",")).unwrap();
    for i in 0..len {
        let t = ft.start_time + i as f64 / ft.sample_rate as f64;
        write!(out, "{t}").unwrap();
        for channel in &ft.channels {
            write!(out, ",{}", channel[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a scale CSV (`t,weight_kg`), validating monotone time stamps.
pub fn read_scale_csv(path: impl AsRef<Path>) -> Result<ScaleTrace> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, line)) => {
            let header = line?;
            if header.trim() != "t,weight_kg" {
                return Err(parse_err(path, 1, format!("header {header:?}, expected \"t,weight_kg\"")));
            }
        }
        None => return Err(parse_err(path, 1, "empty file")),
    }
    let mut times = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, i + 1, format!("{} columns, expected 2", fields.len())));
        }
        let t = parse_f64(path, i + 1, fields[0])?;
        if let Some(&prev) = times.last() {
            if t < prev {
                return Err(Error::ScaleNotMonotone { index: times.len() });
            }
        }
        times.push(t);
        weights.push(parse_f64(path, i + 1, fields[1])?);
    }
    Ok(ScaleTrace::new(times, weights))
}

/// Writes a scale CSV.
pub fn write_scale_csv(path: impl AsRef<Path>, scale: &ScaleTrace) -> Result<()> {
    let mut out = String::from("t,weight_kg\n");
    for (t, w) in scale.times.iter().zip(&scale.weights) {
        writeln!(out, "{t},{w}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    let reader = BufReader::new(std::fs::File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match trimmed.split_once('=') {
            Some((k, v)) => meta.insert(k.trim().to_string(), v.trim().to_string()),
            None => return Err(parse_err(path, i + 1, "expected key=value")),
        };
    }
    Ok(meta)
}

fn write_meta(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        writeln!(out, "{k}={v}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_truth_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "t,ha_mm" {
                return Err(parse_err(path, 1, format!("header {line:?}, expected \"t,ha_mm\"")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (t, ha) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, i + 1, "expected 2 columns"))?;
        rows.push((parse_f64(path, i + 1, t)?, parse_f64(path, i + 1, ha)?));
    }
    Ok(rows)
}

/// Writes a bundle directory, creating it if needed.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &RecordingBundle) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_wav(dir.join("audio.wav"), &bundle.audio)?;
    write_ft_csv(dir.join("ft.csv"), &bundle.ft)?;
    write_scale_csv(dir.join("scale.csv"), &bundle.scale)?;
    let mut meta = bundle.meta.clone();
    meta.insert("id".into(), bundle.id.clone());
    meta.insert("container_id".into(), bundle.container_id.clone());
    write_meta(&dir.join("meta.txt"), &meta)?;
    if let Some(truth) = &bundle.truth_ha {
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("truth_ha.csv"))?);
        writeln!(file, "t,ha_mm")?;
        for (t, ha) in truth {
            writeln!(file, "{t},{ha}")?;
        }
    }
    Ok(())
}

/// Reads a bundle directory written by [`write_bundle`] (or laid out by hand).
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<RecordingBundle> {
    let dir = dir.as_ref();
    let meta = read_meta(&dir.join("meta.txt"))?;
    let fallback_id = || {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "recording".to_string())
    };
    let truth_path = dir.join("truth_ha.csv");
    Ok(RecordingBundle {
        id: meta.get("id").cloned().unwrap_or_else(fallback_id),
        container_id: meta.get("container_id").cloned().unwrap_or_else(|| "unknown".into()),
        audio: read_wav(dir.join("audio.wav"))?,
        ft: read_ft_csv(dir.join("ft.csv"))?,
        scale: read_scale_csv(dir.join("scale.csv"))?,
        meta,
        truth_ha: if truth_path.exists() { Some(read_truth_csv(&truth_path)?) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::AUDIO_RATE;

    fn sample_bundle() -> RecordingBundle {
        let audio = Waveform::new(
            (0..8000).map(|i| (i as f64 * 0.01).sin() * 0.2).collect(),
            AUDIO_RATE,
        );
        let mut ft = FtSeries::zeros(250);
        for (c, channel) in ft.channels.iter_mut().enumerate() {
            for (i, v) in channel.iter_mut().enumerate() {
                *v = c as f64 * 0.5 + i as f64 * 1e-3;
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("liquid_density_kg_m3".into(), "997".into());
        RecordingBundle {
            id: "take_03".into(),
            container_id: "glass_a".into(),
            audio,
            ft,
            scale: ScaleTrace::new(vec![0.0, 1.0], vec![0.0, 0.05]),
            meta,
            truth_ha: Some(vec![(0.0, 120.0), (0.016, 119.9)]),
        }
    }

    #[test]
    fn bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle();
        write_bundle(dir.path(), &bundle).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.id, "take_03");
        assert_eq!(back.container_id, "glass_a");
        assert_eq!(back.scale, bundle.scale);
        assert_eq!(back.ft.channels[3], bundle.ft.channels[3]);
        assert_eq!(back.meta.get("liquid_density_kg_m3").unwrap(), "997");
        assert_eq!(back.truth_ha.unwrap(), bundle.truth_ha.unwrap());
        // Audio went through f32; values match at f32 precision.
        for (a, b) in bundle.audio.samples.iter().zip(&back.audio.samples) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn ft_csv_rejects_wrong_header_and_bad_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ft.csv");
        std::fs::write(&p, "time,fx,fy,fz,tx,ty,tz\n").unwrap();
        assert!(matches!(read_ft_csv(&p), Err(Error::Parse { line: 1, .. })));

        // 100 Hz cadence is not the dataset format.
        let mut s = String::from("t,fx,fy,fz,tx,ty,tz\n");
        for i in 0..50 {
            s.push_str(&format!("{},0,0,0,0,0,0\n", i as f64 * 0.01));
        }
        std::fs::write(&p, s).unwrap();
        assert!(matches!(read_ft_csv(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn ft_csv_rejects_non_monotone_time() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ft.csv");
        let mut s = String::from("t,fx,fy,fz,tx,ty,tz\n");
        s.push_str("0.000,0,0,0,0,0,0\n");
        s.push_str("0.002,0,0,0,0,0,0\n");
        s.push_str("0.001,0,0,0,0,0,0\n");
        std::fs::write(&p, s).unwrap();
        assert!(matches!(read_ft_csv(&p), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn scale_csv_rejects_non_monotone_time() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scale.csv");
        std::fs::write(&p, "t,weight_kg\n0,0\n2,0.1\n1,0.2\n").unwrap();
        assert!(matches!(read_scale_csv(&p), Err(Error::ScaleNotMonotone { index: 2 })));
    }

    #[test]
    fn meta_values_may_contain_equals_signs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.txt");
        std::fs::write(&p, "note=a=b\n# comment\nid=x\n").unwrap();
        let meta = read_meta(&p).unwrap();
        assert_eq!(meta.get("note").unwrap(), "a=b");
        assert_eq!(meta.len(), 2);
    }
}
