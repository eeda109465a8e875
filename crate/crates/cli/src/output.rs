//! Output directories, run manifests and replay.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliResult, Failure};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce the files in one output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub library_version: String,
    pub seed: Option<u64>,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: serde_json::Value) -> Self {
        RunManifest {
            schema_version: "1".into(),
            command: command.into(),
            args,
            config,
            inputs: Vec::new(),
            library_version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            wall_time_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = fs::File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = file.read(&mut buf)?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects files for an output directory and writes them with the
/// manifest last.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl OutputDir {
    pub fn new(dir: &Path) -> Self {
        OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    pub fn write(self, mut manifest: RunManifest, elapsed: Duration) -> CliResult<()> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", self.dir.display())))?;
        manifest.outputs = self.files.iter().map(|(n, _)| n.clone()).collect();
        manifest.wall_time_seconds = elapsed.as_secs_f64();
        for (name, contents) in &self.files {
            fs::write(self.dir.join(name), contents)?;
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST), text)?;
        log::info!("wrote {} files to {}", self.files.len() + 1, self.dir.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
    /// Output directory for the rerun.
    #[arg(long)]
    pub out: PathBuf,
}

/// Reruns the recorded command with a new output directory. Inputs whose
/// hash changed are reported but do not stop the run.
pub fn replay(args: ReplayArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.manifest.display())))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid manifest: {e}")))?;
    for input in &manifest.inputs {
        match sha256_file(Path::new(&input.path)) {
            Ok(h) if h == input.sha256 => {}
            Ok(_) => log::warn!("{} changed since the recorded run", input.path),
            Err(f) => return Err(f),
        }
    }
    let mut argv = vec!["zee".to_string()];
    let mut it = manifest.args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            argv.push(a.clone());
        }
    }
    argv.push("--out".into());
    argv.push(args.out.display().to_string());
    crate::run(argv)
}

/// Writes to stdout; a closed pipe (`zee ... | head`) is not an error.
pub fn emit(text: &str) -> CliResult<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
