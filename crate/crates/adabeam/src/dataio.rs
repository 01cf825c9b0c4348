//! On-disk formats: scenes, datasets, and diagnostic exports.
//!
//! A dataset is a directory with a `manifest.txt` naming each scene and its
//! split, one subdirectory per scene. A scene directory holds one PCM16 WAV
//! per channel, a labels CSV, a delays CSV, and a small key=value meta file.
//! Everything is written deterministically so re-running a generation
//! command overwrites files with identical bytes.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::scenesim::{Condition, LabeledScene};
use crate::signal::Waveform;
use crate::{Error, Result};

const WAV_SCALE: f64 = 32767.0;

/// Write a mono 16-bit PCM WAV.
pub fn write_wav_pcm16(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for &s in &w.samples {
        let q = (s * WAV_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

/// Read a mono 16-bit PCM WAV written by [`write_wav_pcm16`].
pub fn read_wav_pcm16(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Invalid(format!(
            "{}: expected mono 16-bit PCM",
            path.display()
        )));
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / WAV_SCALE))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Waveform::new(samples, spec.sample_rate)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("malformed line '{line}'")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Persist one scene into `dir` (created if needed).
pub fn save_scene(dir: &Path, scene: &LabeledScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (m, w) in scene.waveforms.iter().enumerate() {
        write_wav_pcm16(&dir.join(format!("ch{m}.wav")), w)?;
    }
    let mut labels = String::from("frame,class\n");
    for (t, &l) in scene.frame_labels.iter().enumerate() {
        labels.push_str(&format!("{t},{l}\n"));
    }
    write_atomic(&dir.join("labels.csv"), labels.as_bytes())?;

    let mut delays = String::from("frame,mic,seconds\n");
    for t in 0..scene.n_frames() {
        for m in 0..scene.n_channels() {
            delays.push_str(&format!("{t},{m},{}\n", scene.true_delays[[t, m]]));
        }
    }
    write_atomic(&dir.join("delays.csv"), delays.as_bytes())?;

    let meta = format!(
        "condition={}\nsnr_db={}\nn_mics={}\nn_frames={}\nsample_rate={}\n",
        scene.condition.name(),
        scene.snr_db,
        scene.n_channels(),
        scene.n_frames(),
        scene.waveforms[0].sample_rate,
    );
    write_atomic(&dir.join("scene.meta"), meta.as_bytes())
}

/// Load a scene previously written by [`save_scene`].
pub fn load_scene(dir: &Path) -> Result<LabeledScene> {
    let meta_text = fs::read_to_string(dir.join("scene.meta"))
        .map_err(|e| Error::Invalid(format!("{}: {e}", dir.join("scene.meta").display())))?;
    let mut condition = None;
    let mut snr_db = None;
    let mut n_mics = None;
    let mut n_frames = None;
    for (k, v) in parse_kv(&meta_text)? {
        match k.as_str() {
            "condition" => {
                condition = Some(match v.as_str() {
                    "static" => Condition::Static,
                    "moving" => Condition::Moving,
                    other => return Err(Error::Invalid(format!("unknown condition '{other}'"))),
                })
            }
            "snr_db" => snr_db = Some(parse_f64(&v)?),
            "n_mics" => n_mics = Some(parse_usize(&v)?),
            "n_frames" => n_frames = Some(parse_usize(&v)?),
            "sample_rate" => {}
            other => return Err(Error::Invalid(format!("unknown meta key '{other}'"))),
        }
    }
    let condition = condition.ok_or_else(|| Error::Invalid("meta missing condition".into()))?;
    let snr_db = snr_db.ok_or_else(|| Error::Invalid("meta missing snr_db".into()))?;
    let n_mics = n_mics.ok_or_else(|| Error::Invalid("meta missing n_mics".into()))?;
    let n_frames = n_frames.ok_or_else(|| Error::Invalid("meta missing n_frames".into()))?;

    let mut waveforms = Vec::with_capacity(n_mics);
    for m in 0..n_mics {
        waveforms.push(read_wav_pcm16(&dir.join(format!("ch{m}.wav")))?);
    }

    let labels_text = fs::read_to_string(dir.join("labels.csv"))?;
    let mut frame_labels = vec![0usize; n_frames];
    for (i, line) in labels_text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let mut parts = line.split(',');
        let t = parse_usize(parts.next().unwrap_or(""))?;
        let c = parse_usize(parts.next().unwrap_or(""))?;
        if t >= n_frames {
            return Err(Error::Invalid(format!("labels.csv frame {t} out of range")));
        }
        frame_labels[t] = c;
    }

    let delays_text = fs::read_to_string(dir.join("delays.csv"))?;
    let mut true_delays = Array2::<f64>::zeros((n_frames, n_mics));
    for (i, line) in delays_text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let mut parts = line.split(',');
        let t = parse_usize(parts.next().unwrap_or(""))?;
        let m = parse_usize(parts.next().unwrap_or(""))?;
        let s = parse_f64(parts.next().unwrap_or(""))?;
        if t >= n_frames || m >= n_mics {
            return Err(Error::Invalid(format!("delays.csv index ({t},{m}) out of range")));
        }
        true_delays[[t, m]] = s;
    }

    Ok(LabeledScene {
        waveforms,
        frame_labels,
        true_delays,
        condition,
        snr_db,
    })
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("expected integer, got '{s}'")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("expected number, got '{s}'")))
}

/// Write a dataset: one directory per scene under `root/<split>/scene_NNNN`,
/// plus a manifest listing `<split> <relative path>` per line.
pub fn save_dataset(root: &Path, dataset: &crate::scenesim::Dataset) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = String::new();
    for (split, scenes) in [
        ("train", &dataset.train),
        ("dev", &dataset.dev),
        ("test", &dataset.test),
    ] {
        for (i, scene) in scenes.iter().enumerate() {
            let rel = format!("{split}/scene_{i:04}");
            save_scene(&root.join(&rel), scene)?;
            manifest.push_str(&format!("{split} {rel}\n"));
        }
    }
    write_atomic(&root.join("manifest.txt"), manifest.as_bytes())
}

/// Scene directories of one split, in manifest order.
pub fn split_dirs(root: &Path, split: &str) -> Result<Vec<std::path::PathBuf>> {
    let manifest_path = root.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|_| {
        Error::Config(format!(
            "missing dataset manifest {} (run gen-data first)",
            manifest_path.display()
        ))
    })?;
    let mut dirs = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let (Some(s), Some(rel)) = (parts.next(), parts.next()) else {
            return Err(Error::Invalid(format!("malformed manifest line '{line}'")));
        };
        if s == split {
            dirs.push(root.join(rel));
        }
    }
    if dirs.is_empty() {
        return Err(Error::Usage(format!("unknown or empty split '{split}'")));
    }
    Ok(dirs)
}

/// Load every scene of a split.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<LabeledScene>> {
    split_dirs(root, split)?.iter().map(|d| load_scene(d)).collect()
}

/// Write a matrix as an 8-bit binary PGM, min-max scaled. Rows of the matrix
/// become image rows top to bottom.
pub fn write_pgm(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w);
    for r in 0..h {
        for c in 0..w {
            bytes.push(((img[[r, c]] - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_atomic(path, &bytes)
}

/// Write a numeric matrix as CSV, one row per line, optional header line.
pub fn write_csv_matrix(path: &Path, header: Option<&str>, rows: &Array2<f64>) -> Result<()> {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(h);
        text.push('\n');
    }
    for r in 0..rows.shape()[0] {
        let mut first = true;
        for c in 0..rows.shape()[1] {
            if !first {
                text.push(',');
            }
            first = false;
            text.push_str(&format!("{}", rows[[r, c]]));
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Map indices 0..n over a bounded worker pool, preserving index order in
/// the result. `threads` = 1 degenerates to a plain loop. Results are placed
/// by index, so the output is identical for any thread count.
pub fn par_map_indexed<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<R>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                **slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.unwrap()).collect()
}

/// Worker count from the ADABEAM_THREADS env var, defaulting to the
/// available parallelism capped at 8.
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("ADABEAM_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}
