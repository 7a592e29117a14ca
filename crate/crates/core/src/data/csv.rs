//! Record CSV layout.
//!
//! Signal file `<subject>.csv`: header `t,ppg,ax,ay,az`, one row per sample,
//! `t` is the integer sample index starting at 0. Label file
//! `<subject>.labels.csv`: header `t_index,bpm`.

use super::{DataError, Label, SignalRecord, N_CHANNELS};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const SIGNAL_HEADER: &str = "t,ppg,ax,ay,az";
const LABEL_HEADER: &str = "t_index,bpm";

/// Companion label file for a signal file: `a/b.csv` -> `a/b.labels.csv`.
pub fn label_path_for(signal: &Path) -> PathBuf {
    let stem = signal.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
    signal.with_file_name(format!("{stem}.labels.csv"))
}

/// Load `<path>` and its companion label file. The subject id is the file stem.
pub fn load_record(path: &Path) -> Result<SignalRecord, DataError> {
    load_record_pair(path, &label_path_for(path))
}

pub fn load_record_pair(signal: &Path, labels: &Path) -> Result<SignalRecord, DataError> {
    let subject = signal
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string();
    let channels = load_signal(signal)?;
    let labels = read_labels(labels)?;
    SignalRecord::new(subject, channels, labels)
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Signal channels only, for inference on unlabeled recordings.
pub fn load_signal(path: &Path) -> Result<[Vec<f32>; N_CHANNELS], DataError> {
    let text = read(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::Schema(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != N_CHANNELS + 1 {
        return Err(DataError::Schema(format!(
            "{}: expected 4 signal channels, header has {}",
            path.display(),
            cols.len().saturating_sub(1)
        )));
    }
    if cols.join(",") != SIGNAL_HEADER {
        return Err(DataError::Schema(format!("{}: header must be `{SIGNAL_HEADER}`", path.display())));
    }
    let mut channels: [Vec<f32>; N_CHANNELS] = Default::default();
    for (row, line) in lines.enumerate() {
        let lineno = row + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != N_CHANNELS + 1 {
            return Err(parse_err(path, lineno, format!("expected 5 fields, found {}", fields.len())));
        }
        let t: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad sample index `{}`", fields[0])))?;
        if t != channels[0].len() {
            return Err(parse_err(path, lineno, format!("sample index {t} out of sequence")));
        }
        for (c, f) in fields[1..].iter().enumerate() {
            let v: f32 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad value `{f}`")))?;
            channels[c].push(v);
        }
    }
    Ok(channels)
}

fn read_labels(path: &Path) -> Result<Vec<Label>, DataError> {
    let text = read(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LABEL_HEADER => {}
        _ => return Err(DataError::Schema(format!("{}: header must be `{LABEL_HEADER}`", path.display()))),
    }
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        let lineno = row + 2;
        if line.is_empty() {
            continue;
        }
        let (idx, bpm) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, lineno, "expected 2 fields"))?;
        let index = idx
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad index `{idx}`")))?;
        let bpm = bpm
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad bpm `{bpm}`")))?;
        labels.push(Label { index, bpm });
    }
    Ok(labels)
}

/// Write `<dir>/<subject>.csv` and `<dir>/<subject>.labels.csv`; returns the signal path.
pub fn write_record(rec: &SignalRecord, dir: &Path) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let signal = dir.join(format!("{}.csv", rec.subject_id));
    let mut s = String::with_capacity(rec.len() * 40);
    s.push_str(SIGNAL_HEADER);
    s.push('\n');
    for t in 0..rec.len() {
        let [p, x, y, z] = &rec.channels;
        let _ = writeln!(s, "{t},{},{},{},{}", p[t], x[t], y[t], z[t]);
    }
    fs::write(&signal, s).map_err(io(&signal))?;

    let labels = label_path_for(&signal);
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for l in &rec.labels {
        let _ = writeln!(s, "{},{}", l.index, l.bpm);
    }
    fs::write(&labels, s).map_err(io(&labels))?;
    Ok(signal)
}
