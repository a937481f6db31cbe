//! Buffered CSV artifacts; every row is prefixed with the config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

#[derive(Default)]
pub struct Outputs {
    files: BTreeMap<String, (String, String)>,
}

impl Outputs {
    /// Appends header-less CSV rows to `name`, creating it with `header`.
    pub fn append(&mut self, name: &str, header: &str, rows: &[u8]) {
        let entry = self.files.entry(name.to_string()).or_insert_with(|| (header.to_string(), String::new()));
        entry.1.push_str(&String::from_utf8_lossy(rows));
    }

    /// Like [`Outputs::append`] but drops the first line of `csv`.
    pub fn append_with_header(&mut self, name: &str, csv: &[u8]) {
        let text = String::from_utf8_lossy(csv);
        let mut lines = text.splitn(2, '\n');
        let header = lines.next().unwrap_or_default().to_string();
        let body = lines.next().unwrap_or_default().to_string();
        self.append(name, &header, body.as_bytes());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn write_all(&self, dir: &Path, hash: &str) -> Result<()> {
        for (name, (header, body)) in &self.files {
            let mut out = format!("config_hash,{header}\n");
            for line in body.lines().filter(|l| !l.is_empty()) {
                out.push_str(hash);
                out.push(',');
                out.push_str(line);
                out.push('\n');
            }
            fs::write(dir.join(name), out).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }
}
