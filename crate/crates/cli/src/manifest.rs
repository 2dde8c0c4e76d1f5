//! Provenance record written beside every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsn_core::model::DsnModel;
use dsn_core::trainer::TrainConfig;
use toml::{Table, Value};

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Manifest {
    table: Table,
}

impl Manifest {
    pub fn new(command: &str, threads: usize) -> Self {
        let mut table = Table::new();
        table.insert("tool".into(), "dsn".into());
        table.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        table.insert("command".into(), command.into());
        let args: Vec<Value> = std::env::args().skip(1).map(Value::from).collect();
        table.insert("args".into(), Value::Array(args));
        table.insert("threads".into(), Value::Integer(threads as i64));
        Manifest { table }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.table.insert(key.into(), value.into());
        self
    }

    pub fn model(&mut self, key: &str, model: &DsnModel) -> &mut Self {
        let mut m = Table::new();
        m.insert("hash".into(), hex(&model.hash()).into());
        m.insert("config_hash".into(), hex(&model.config_hash()).into());
        m.insert("scale".into(), Value::Integer(model.scale() as i64));
        m.insert("parameters".into(), Value::Integer(model.param_count() as i64));
        if let Ok(Value::Table(cfg)) = Value::try_from(model.config()) {
            m.insert("config".into(), Value::Table(cfg));
        }
        self.table.insert(key.into(), Value::Table(m));
        self
    }

    pub fn train_config(&mut self, cfg: &TrainConfig) -> &mut Self {
        let t: Table = toml::from_str(&cfg.to_text()).expect("config text is valid toml");
        self.table.insert("train_config".into(), Value::Table(t));
        self
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.table).expect("manifest serializes")
    }

    /// `dir/manifest.toml` for directory outputs, `<file>.manifest.toml`
    /// otherwise.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join(MANIFEST_FILE)
        } else {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.toml");
            output.with_file_name(name)
        }
    }

    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = Manifest::path_for(output);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
