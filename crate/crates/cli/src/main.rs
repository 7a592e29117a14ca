use clap::{Parser, Subcommand};
use qppg::data::{load_signal, signal_windows, synth_generate, write_record, Normalizer, SynthConfig, WindowSet};
use qppg::deploy::{estimate_energy, select_for_device, PlatformProfile, Selection};
use qppg::pipeline::{
    front_of, load_stage, load_stages, merge_and_report, postprocess_all, prepare_data, qmodel_mae, read_front_csv, run_flow,
    run_stage_channels, run_stage_dilation, run_stage_quant, run_stage_seed, save_stage, write_front_csv, Artifact, DataSource,
    FlowConfig, PipelineError,
};
use qppg::runtime::{import_model, run_inference};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "qppg", version, about = "Design-space exploration of quantized TCNs for PPG heart-rate estimation")]
struct Cli {
    /// Flow configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for stages, models and reports.
    #[arg(long, global = true, default_value = "qppg-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset (signal + label CSVs) to <out>/data.
    Synth,
    /// Train the seed network.
    Train,
    /// Channel search on the trained seed.
    SearchChannels,
    /// Dilation search on the current architecture front.
    SearchDilation,
    /// Uniform and mixed-precision quantization of the architecture front.
    SearchPrecision,
    /// Merge all saved stages into the Pareto report.
    Pareto,
    /// Pick the most accurate frontier model that fits a device.
    Select {
        /// Bundled profile name or path to a profile JSON.
        #[arg(long)]
        profile: String,
        /// Frontier CSV; defaults to <out>/pareto.csv.
        #[arg(long)]
        frontier: Option<PathBuf>,
    },
    /// Run an integer model over a signal CSV, one estimate per window.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Clip each estimate to the band around the trailing mean.
        #[arg(long)]
        postprocess: bool,
    },
    /// MAE of an integer model on the configured test subject.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// The whole flow: train, both searches, quantization and report.
    Run,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<FlowConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Json { path: path.clone(), msg: e.to_string() })?
        }
        None => FlowConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn arch_front(out: &Path, stages: &[&str]) -> Result<Vec<Artifact>, PipelineError> {
    let mut arts = Vec::new();
    for name in stages {
        arts.extend(load_stage(out, name)?.artifacts);
    }
    Ok(front_of(&arts, qppg::deploy::CostAxis::Bytes))
}

fn report_stage(name: &str, arts: &[Artifact], failures: usize) {
    for a in arts {
        let c = &a.entry.candidate;
        println!("{name}\t{}\tparams={}\tmae={:.3}\tbytes={}\tmacs={}", c.id, a.entry.params, c.mae_bpm, c.bytes, c.macs);
    }
    if failures > 0 {
        eprintln!("{name}: {failures} sweep point(s) failed; see stages/{name}.json");
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let out = cli.out.clone();
    match &cli.cmd {
        Cmd::Synth => {
            let cfg = load_config(&cli)?;
            let synth = match &cfg.data {
                DataSource::Synthetic(s) => s.clone(),
                DataSource::Files { .. } => SynthConfig::default(),
            };
            let records = synth_generate(&SynthConfig { seed: synth.seed ^ cfg.seed, ..synth })?;
            for rec in &records {
                println!("{}", write_record(rec, &out.join("data"))?.display());
            }
        }
        Cmd::Train => {
            let cfg = load_config(&cli)?;
            let ws = prepare_data(&cfg)?;
            let seed = run_stage_seed(&cfg, &ws)?;
            let stage = qppg::pipeline::StageOutput { artifacts: vec![seed], failures: vec![] };
            save_stage(&out, "seed", &stage, &ws.norm)?;
            report_stage("seed", &stage.artifacts, 0);
        }
        Cmd::SearchChannels => {
            let cfg = load_config(&cli)?;
            let seed = load_stage(&out, "seed")?
                .artifacts
                .into_iter()
                .next()
                .ok_or_else(|| PipelineError::Input("no trained seed; run `train` first".into()))?;
            let ws = prepare_data(&cfg)?;
            let stage = run_stage_channels(&cfg, &ws, &seed);
            save_stage(&out, "channels", &stage, &ws.norm)?;
            report_stage("channels", &stage.artifacts, stage.failures.len());
        }
        Cmd::SearchDilation => {
            let cfg = load_config(&cli)?;
            let front = arch_front(&out, &["seed", "channels"])?;
            let ws = prepare_data(&cfg)?;
            let stage = run_stage_dilation(&cfg, &ws, &front);
            save_stage(&out, "dilation", &stage, &ws.norm)?;
            report_stage("dilation", &stage.artifacts, stage.failures.len());
        }
        Cmd::SearchPrecision => {
            let cfg = load_config(&cli)?;
            let mut names = vec!["seed", "channels"];
            if out.join("stages/dilation.json").exists() {
                names.push("dilation");
            }
            let front = arch_front(&out, &names)?;
            let ws = prepare_data(&cfg)?;
            let stage = run_stage_quant(&cfg, &ws, &front);
            save_stage(&out, "quant", &stage, &ws.norm)?;
            report_stage("quant", &stage.artifacts, stage.failures.len());
        }
        Cmd::Pareto => {
            let cfg = load_config(&cli)?;
            let stages = load_stages(&out)?;
            if stages.is_empty() {
                return Err(PipelineError::Input(format!("no saved stages under {}", out.display())));
            }
            let report = merge_and_report(&stages, &cfg, Some(&out))?;
            print!("{}", report.csv);
        }
        Cmd::Select { profile, frontier } => select(&out, profile, frontier.as_deref())?,
        Cmd::Infer { model, input, postprocess } => infer(model, input, *postprocess)?,
        Cmd::Eval { model } => {
            let cfg = load_config(&cli)?;
            let qm = read_model(model)?;
            let ws = prepare_data(&cfg)?;
            println!("subject={}\twindows={}\tmae={:.4}", ws.test_subject, ws.test.len(), qmodel_mae(&qm, &ws.test)?);
        }
        Cmd::Run => {
            let cfg = load_config(&cli)?;
            let report = run_flow(&cfg, Some(&out))?;
            print!("{}", report.csv);
            eprintln!("manifest sha256 {}", report.manifest_hash);
        }
    }
    Ok(())
}

fn read_model(path: &Path) -> Result<qppg::runtime::QModel, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    Ok(import_model(&bytes)?)
}

fn select(out: &Path, profile: &str, frontier: Option<&Path>) -> Result<(), PipelineError> {
    let prof = if Path::new(profile).is_file() {
        let text = fs::read_to_string(profile).map_err(|source| PipelineError::Io { path: profile.into(), source })?;
        PlatformProfile::from_json(&text)?
    } else {
        PlatformProfile::bundled(profile)?
    };
    let path = frontier.map_or_else(|| out.join("pareto.csv"), Path::to_path_buf);
    let text = fs::read_to_string(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
    let front = read_front_csv(&text)?;
    match select_for_device(&front, &prof) {
        Selection::Fit(c) => {
            print!("{}", write_front_csv(std::slice::from_ref(&c)));
            let e = estimate_energy(&c, &prof)?;
            println!(
                "# {}: {:.1} kB flash, latency {:.1} ms, inference {:.3} mJ, window {:.3} mJ",
                prof.name,
                c.bytes as f64 / 1000.0,
                e.latency_s * 1000.0,
                e.inference_mj,
                e.window_mj()
            );
        }
        Selection::NoFit => println!("# {}: no frontier model fits {:.0} bytes of flash in real time", prof.name, prof.flash_budget()),
    }
    Ok(())
}

fn infer(model: &Path, input: &Path, postprocess: bool) -> Result<(), PipelineError> {
    let qm = read_model(model)?;
    let sidecar = PathBuf::from(format!("{}.norm.json", model.display()));
    let norm: Option<Normalizer> = match fs::read_to_string(&sidecar) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| PipelineError::Json { path: sidecar.clone(), msg: e.to_string() })?),
        Err(_) => {
            eprintln!("warning: {} not found; feeding raw signals", sidecar.display());
            None
        }
    };
    let windows = signal_windows(&load_signal(input)?);
    if windows.is_empty() {
        return Err(PipelineError::Input(format!("{}: shorter than one window", input.display())));
    }
    let mut buf = vec![0.0; WindowSet::WINDOW_SIZE];
    let mut hr = Vec::new();
    for w in windows.chunks_exact(WindowSet::WINDOW_SIZE) {
        match &norm {
            Some(n) => n.apply_window(w, &mut buf),
            None => buf.iter_mut().zip(w).for_each(|(d, s)| *d = *s as f64),
        }
        hr.push(run_inference(&qm, &buf)?);
    }
    if postprocess {
        hr = postprocess_all(&hr)?;
    }
    for (i, v) in hr.iter().enumerate() {
        println!("{i},{v:.3}");
    }
    Ok(())
}
