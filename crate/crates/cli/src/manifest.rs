use std::path::Path;
use std::time::Instant;

use mmvq::data::{Manifest, MANIFEST_FILE};
use mmvq::Result;

pub fn build_id() -> String {
    option_env!("MMVQ_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Provenance of one command invocation.
pub struct RunManifest {
    started: Instant,
    pub entries: Manifest,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        let mut entries = Manifest::default();
        entries.set("command", command);
        entries.set("command_line", std::env::args().collect::<Vec<_>>().join(" "));
        entries.set("build", build_id());
        Self {
            started: Instant::now(),
            entries,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.set(key, value);
    }

    pub fn path(&mut self, key: &str, p: &Path) {
        self.entries.set(key, p.display());
    }

    /// Entries with the elapsed wall time stamped in.
    pub fn finish(&mut self) -> &Manifest {
        self.entries.set("wall_time_s", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        &self.entries
    }

    pub fn write_into(&mut self, dir: &Path) -> Result<()> {
        self.finish().write(&dir.join(MANIFEST_FILE))
    }

    /// For single-file outputs: `<file>.manifest.txt`.
    pub fn write_beside(&mut self, file: &Path) -> Result<()> {
        let mut name = file.as_os_str().to_owned();
        name.push(".manifest.txt");
        self.finish().write(Path::new(&name))
    }
}
