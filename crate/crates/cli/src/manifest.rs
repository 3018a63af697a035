//! Run manifests: one `manifest.txt` per command invocation recording the
//! command, resolved configuration, seed, input/output paths, artifact
//! checksums and wall time. Re-running the recorded command reproduces the
//! outputs byte for byte (the manifest's wall-time line aside).

use roidet::fnv1a64;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct Manifest {
    command: String,
    lines: Vec<(String, String)>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            lines: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Record a resolved config blob under a key prefix, one line per entry.
    pub fn set_config(&mut self, prefix: &str, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("{prefix}.{}", k.trim()), v.trim());
            }
        }
    }

    /// Register an output artifact; its checksum is computed at write time.
    pub fn artifact(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(mut self, dir: &Path) -> std::io::Result<()> {
        let outputs = std::mem::take(&mut self.outputs);
        for path in outputs {
            let sum = fs::read(&path).map(|b| fnv1a64(&b)).unwrap_or(0);
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            self.set(&format!("checksum.{name}"), format!("{sum:016x}"));
        }
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!(
            "wall_time_s = {:.3}\n",
            self.started.elapsed().as_secs_f64()
        ));
        fs::write(dir.join("manifest.txt"), out)
    }
}
