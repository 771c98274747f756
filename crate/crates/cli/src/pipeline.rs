//! Sequential multi-stage runs from a plain-text config, with a manifest
//! of parameters, file hashes and timings.
//!
//! ```text
//! seed = 7
//! manifest = run/manifest.txt
//!
//! [phantom]
//! out_dir = run/phantom
//!
//! [attenuation fit]
//! published = true
//! out = run/model.txt
//! ```
//!
//! Each `[section]` names a subcommand; `key = value` becomes
//! `--key value` (underscores turn into dashes, `true` into a bare flag,
//! `false` drops the flag). Sections may repeat.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::commands::Command;
use crate::files;

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    /// Subcommand words, e.g. `["attenuation", "fit"]`.
    pub words: Vec<String>,
    pub params: Vec<(String, String)>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub stages: Vec<StageSpec>,
}

#[derive(Debug)]
pub enum PipelineError {
    Config(String),
    MissingInput { stage: String, path: PathBuf },
    Stage { stage: String, error: anyhow::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput { .. } => 2,
            PipelineError::Stage { .. } => 3,
            PipelineError::Config(_) => 4,
        }
    }
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "config error: {m}"),
            PipelineError::MissingInput { stage, path } => {
                write!(f, "stage {stage}: missing input {}", path.display())
            }
            PipelineError::Stage { stage, error } => write!(f, "stage {stage} failed: {error:#}"),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| PipelineError::Config(format!("line {}: {m}", n + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?;
                let words: Vec<String> = name.split_whitespace().map(str::to_string).collect();
                if words.is_empty() {
                    return Err(err("empty section name"));
                }
                cfg.stages.push(StageSpec {
                    words,
                    params: Vec::new(),
                    line: n + 1,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key"));
            }
            match cfg.stages.last_mut() {
                Some(stage) => stage.params.push((k.to_string(), v.to_string())),
                None => match k {
                    "seed" => cfg.seed = Some(v.parse().map_err(|_| err("seed must be an integer"))?),
                    "manifest" => cfg.manifest = Some(PathBuf::from(v)),
                    other => return Err(err(&format!("unknown global key '{other}'"))),
                },
            }
        }
        Ok(cfg)
    }
}

impl StageSpec {
    pub fn label(&self, index: usize) -> String {
        format!("{} ({})", index + 1, self.words.join(" "))
    }

    /// Command-line arguments after the program name.
    pub fn argv(&self, seed: Option<u64>) -> Vec<String> {
        let mut argv = self.words.clone();
        let mut has_seed = false;
        for (k, v) in &self.params {
            let flag = format!("--{}", k.replace('_', "-"));
            has_seed |= k == "seed";
            match v.as_str() {
                "true" => argv.push(flag),
                "false" => {}
                _ => {
                    argv.push(flag);
                    argv.push(v.clone());
                }
            }
        }
        let seeded = matches!(self.words.first().map(String::as_str), Some("phantom" | "train-merge"));
        if let (Some(s), false, true) = (seed, has_seed, seeded) {
            argv.push("--seed".into());
            argv.push(s.to_string());
        }
        argv
    }
}

/// Record of one executed stage.
#[derive(Clone, Debug, Default)]
pub struct StageRecord {
    pub label: String,
    pub command_line: String,
    pub params: String,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
    pub seconds: f64,
    pub report: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub threads: usize,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub status: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# tomoseg run manifest\n");
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "threads = {}", self.threads);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "config_sha256 = {}", self.config_sha256);
        let _ = writeln!(s, "status = {}", self.status);
        for r in &self.stages {
            let _ = writeln!(s, "\n[stage {}]", r.label);
            let _ = writeln!(s, "command = {}", r.command_line);
            let _ = writeln!(s, "params = {}", r.params);
            for (p, h) in &r.inputs {
                let _ = writeln!(s, "input {} = {h}", p.display());
            }
            for (p, h) in &r.outputs {
                let _ = writeln!(s, "output {} = {h}", p.display());
            }
            let _ = writeln!(s, "wall_seconds = {:.3}", r.seconds);
            let _ = writeln!(s, "result = {}", r.report);
        }
        s
    }
}

fn quote(arg: &str) -> String {
    if arg.is_empty() || arg.contains(|c: char| c.is_whitespace() || c == '\'' || c == '"') {
        format!("'{}'", arg.replace('\'', "'\\''"))
    } else {
        arg.to_string()
    }
}

/// Whether `path` is written by `cmd`.
fn produces(cmd: &Command, path: &Path) -> bool {
    match cmd {
        Command::Phantom(a) => path.starts_with(&a.out_dir),
        _ => cmd.outputs().iter().any(|p| p == path),
    }
}

/// Parses every stage and checks that no stage reads a file that only a
/// later stage produces.
pub fn plan(
    cfg: &PipelineConfig,
    parse: impl Fn(&[String]) -> Result<Command, String>,
) -> Result<Vec<(String, Vec<String>, Command)>, PipelineError> {
    let mut out = Vec::new();
    for (i, st) in cfg.stages.iter().enumerate() {
        if st.params.iter().any(|(k, _)| k == "threads") {
            return Err(PipelineError::Config(format!(
                "line {}: threads is a global option, not a stage parameter",
                st.line
            )));
        }
        let argv = st.argv(cfg.seed);
        let cmd = parse(&argv).map_err(|e| PipelineError::Config(format!("stage {} (line {}): {e}", st.label(i), st.line)))?;
        out.push((st.label(i), argv, cmd));
    }
    for (i, (label, _, cmd)) in out.iter().enumerate() {
        for p in cmd.inputs() {
            let earlier = out[..i].iter().any(|(_, _, c)| produces(c, &p));
            if let Some((later, _, _)) = out[i + 1..].iter().find(|(_, _, c)| produces(c, &p)) {
                if !earlier && !p.exists() {
                    return Err(PipelineError::Config(format!(
                        "stage {label} reads {} which stage {later} writes later",
                        p.display()
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Executes the planned stages in order; the manifest covers every stage
/// started, including a failing one.
pub fn execute(stages: &[(String, Vec<String>, Command)], manifest: &mut Manifest) -> Result<(), PipelineError> {
    for (label, argv, cmd) in stages {
        let mut rec = StageRecord {
            label: label.clone(),
            command_line: std::iter::once("tomoseg".to_string())
                .chain(argv.iter().map(|a| quote(a)))
                .collect::<Vec<_>>()
                .join(" "),
            params: format!("{cmd:?}"),
            ..StageRecord::default()
        };
        let mut seen = BTreeSet::new();
        for p in cmd.inputs() {
            if !p.exists() {
                manifest.status = format!("missing input {} in stage {label}", p.display());
                return Err(PipelineError::MissingInput {
                    stage: label.clone(),
                    path: p,
                });
            }
            if seen.insert(p.clone()) {
                let h = files::sha256(&p).map_err(|e| PipelineError::Stage {
                    stage: label.clone(),
                    error: e,
                })?;
                rec.inputs.push((p, h));
            }
        }
        let t = Instant::now();
        let result = cmd.run();
        rec.seconds = t.elapsed().as_secs_f64();
        match result {
            Ok(report) => {
                rec.report = report;
                for p in cmd.outputs() {
                    let h = files::sha256(&p).map_err(|e| PipelineError::Stage {
                        stage: label.clone(),
                        error: e,
                    })?;
                    rec.outputs.push((p, h));
                }
                manifest.stages.push(rec);
            }
            Err(error) => {
                rec.report = format!("failed: {error:#}");
                manifest.stages.push(rec);
                manifest.status = format!("failed in stage {label}");
                return Err(PipelineError::Stage {
                    stage: label.clone(),
                    error,
                });
            }
        }
    }
    manifest.status = "ok".into();
    Ok(())
}
