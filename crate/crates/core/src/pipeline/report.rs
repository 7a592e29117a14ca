//! Stage persistence, the merged Pareto report and run manifest.

use super::stages::{front_of, Artifact, StageOutput};
use super::{io_err, FlowConfig, PipelineError};
use crate::data::Normalizer;
use crate::deploy::{CandidateModel, CostAxis, LayerCost, Provenance};
use crate::runtime::{export_model, import_model};
use crate::tcn::Network;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CSV_HEADER: &str = "id,stage,lambda,mae_bpm,bytes,macs,bits";
const STAGE_ORDER: [&str; 4] = ["seed", "channels", "dilation", "quant"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub candidate: CandidateModel,
    pub params: usize,
    /// Fake-quant MAE of quantized candidates (their `mae_bpm` comes from
    /// the integer runtime).
    pub float_mae: Option<f64>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub lambda: f64,
    pub parent: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub entries: Vec<ManifestEntry>,
    pub failures: Vec<Failure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub candidates: Vec<ManifestEntry>,
    pub failures: Vec<Failure>,
    pub front_bytes: Vec<String>,
    pub front_macs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub front_bytes: Vec<CandidateModel>,
    pub front_macs: Vec<CandidateModel>,
    pub manifest: RunManifest,
    /// sha256 of the serialized manifest.
    pub manifest_hash: String,
    pub csv: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn config_hash(cfg: &FlowConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

fn artifact_paths(id: &str, quantized: bool) -> Vec<String> {
    let mut v = vec![format!("nets/{id}.json")];
    if quantized {
        v.push(format!("models/{id}.qppg"));
        v.push(format!("models/{id}.qppg.norm.json"));
    }
    v
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json { path: path.to_path_buf(), msg: e.to_string() })
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("serializable")
}

/// Write a stage's networks, integer models (with their normalization
/// sidecar) and `stages/<name>.json`.
pub fn save_stage(dir: &Path, name: &str, stage: &StageOutput, norm: &Normalizer) -> Result<(), PipelineError> {
    let mut record = StageRecord { entries: vec![], failures: stage.failures.clone() };
    for a in &stage.artifacts {
        let mut entry = a.entry.clone();
        entry.artifacts = artifact_paths(a.id(), a.qmodel.is_some());
        write(&dir.join(&entry.artifacts[0]), &to_json(&a.net))?;
        if let Some(q) = &a.qmodel {
            write(&dir.join(&entry.artifacts[1]), &export_model(q)?)?;
            write(&dir.join(&entry.artifacts[2]), &to_json(norm))?;
        }
        record.entries.push(entry);
    }
    write(&dir.join(format!("stages/{name}.json")), &to_json(&record))?;
    write(&dir.join("norm.json"), &to_json(norm))
}

pub fn load_stage(dir: &Path, name: &str) -> Result<StageOutput, PipelineError> {
    let record: StageRecord = read_json(&dir.join(format!("stages/{name}.json")))?;
    let mut out = StageOutput { artifacts: vec![], failures: record.failures };
    for entry in record.entries {
        let net: Network = read_json(&dir.join(format!("nets/{}.json", entry.candidate.id)))?;
        let qmodel = match entry.artifacts.get(1) {
            Some(p) => {
                let path = dir.join(p);
                Some(import_model(&fs::read(&path).map_err(io_err(&path))?)?)
            }
            None => None,
        };
        out.artifacts.push(Artifact { entry, net, qmodel });
    }
    Ok(out)
}

/// Load every stage present under `dir`, in flow order.
pub fn load_stages(dir: &Path) -> Result<Vec<StageOutput>, PipelineError> {
    STAGE_ORDER
        .iter()
        .filter(|n| dir.join(format!("stages/{n}.json")).exists())
        .map(|n| load_stage(dir, n))
        .collect()
}

fn bits_field(c: &CandidateModel) -> String {
    if c.layers.is_empty() {
        return "float".into();
    }
    c.layers.iter().map(|l| format!("{}x{}@{}", l.weight_bits, l.act_bits, l.macs)).collect::<Vec<_>>().join(";")
}

/// `bits` holds `float` or `;`-separated `<w>x<a>@<macs>` per compute layer.
pub fn write_front_csv(front: &[CandidateModel]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in front {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", c.id, c.provenance.stage, c.provenance.lambda, c.mae_bpm, c.bytes, c.macs, bits_field(c));
    }
    s
}

pub fn read_front_csv(text: &str) -> Result<Vec<CandidateModel>, PipelineError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(PipelineError::Input(format!("frontier CSV must start with `{CSV_HEADER}`")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| PipelineError::Input(format!("frontier CSV line {}: bad {what}", n + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad("field count"));
        }
        let layers = if f[6] == "float" {
            vec![]
        } else {
            f[6].split(';')
                .map(|l| {
                    let (wa, macs) = l.split_once('@')?;
                    let (w, a) = wa.split_once('x')?;
                    Some(LayerCost { macs: macs.parse().ok()?, weight_bits: w.parse().ok()?, act_bits: a.parse().ok()? })
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("bits"))?
        };
        out.push(CandidateModel {
            id: f[0].into(),
            mae_bpm: f[3].parse().map_err(|_| bad("mae_bpm"))?,
            bytes: f[4].parse().map_err(|_| bad("bytes"))?,
            macs: f[5].parse().map_err(|_| bad("macs"))?,
            layers,
            provenance: Provenance { stage: f[1].into(), lambda: f[2].parse().map_err(|_| bad("lambda"))?, parent: None },
        });
    }
    Ok(out)
}

/// Scatter of every candidate (log10 bytes vs MAE); front members filled.
pub fn svg_scatter(all: &[CandidateModel], front: &[CandidateModel]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let xs: Vec<f64> = all.iter().map(|c| (c.bytes.max(1) as f64).log10()).collect();
    let ys: Vec<f64> = all.iter().map(|c| c.mae_bpm).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) }
    };
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - M, W - M, H - M);
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>", H - M);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">log10(bytes)</text>", W / 2.0, H - 12.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">MAE [BPM]</text>", H / 2.0, H / 2.0);
    for (c, (x, y)) in all.iter().zip(xs.iter().zip(&ys)) {
        if !y.is_finite() {
            continue;
        }
        let on = front.iter().any(|f| f.id == c.id);
        let fill = if on { "black" } else { "none" };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" stroke=\"black\" fill=\"{fill}\"><title>{}</title></circle>",
            px(*x),
            py(*y),
            c.id
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Global fronts over bytes and MACs, CSV/SVG artifacts and the manifest.
pub fn merge_and_report(stages: &[StageOutput], cfg: &FlowConfig, out: Option<&Path>) -> Result<Report, PipelineError> {
    let all: Vec<Artifact> = stages.iter().flat_map(|s| s.artifacts.iter().cloned()).collect();
    let front_bytes: Vec<CandidateModel> = front_of(&all, CostAxis::Bytes).into_iter().map(|a| a.entry.candidate).collect();
    let front_macs: Vec<CandidateModel> = front_of(&all, CostAxis::Macs).into_iter().map(|a| a.entry.candidate).collect();
    let candidates: Vec<ManifestEntry> = all
        .iter()
        .map(|a| ManifestEntry { artifacts: artifact_paths(a.id(), a.qmodel.is_some()), ..a.entry.clone() })
        .collect();
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        candidates,
        failures: stages.iter().flat_map(|s| s.failures.iter().cloned()).collect(),
        front_bytes: front_bytes.iter().map(|c| c.id.clone()).collect(),
        front_macs: front_macs.iter().map(|c| c.id.clone()).collect(),
    };
    let manifest_json = to_json(&manifest);
    let manifest_hash = sha256_hex(&manifest_json);
    let csv = write_front_csv(&front_bytes);
    if let Some(dir) = out {
        write(&dir.join("pareto.csv"), csv.as_bytes())?;
        write(&dir.join("pareto_macs.csv"), write_front_csv(&front_macs).as_bytes())?;
        let everything: Vec<CandidateModel> = all.iter().map(|a| a.entry.candidate.clone()).collect();
        write(&dir.join("pareto_points.svg"), svg_scatter(&everything, &front_bytes).as_bytes())?;
        write(&dir.join("manifest.json"), &manifest_json)?;
        write(&dir.join("manifest.sha256"), format!("{manifest_hash}\n").as_bytes())?;
    }
    Ok(Report { front_bytes, front_macs, manifest, manifest_hash, csv })
}
