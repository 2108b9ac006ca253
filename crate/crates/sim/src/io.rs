//! Files: JSON-lines corpora, checkpoints, frames and reports.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use m4sc_core::semantic::TaskInstruction;
use m4sc_core::sharing::Frame;
use m4sc_core::training::M4scSystem;
use serde::Serialize;

pub fn write_corpus(path: &Path, corpus: &[TaskInstruction]) -> Result<()> {
    let mut out = Vec::new();
    for s in corpus {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<TaskInstruction>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TaskInstruction =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?;
        s.validate()
            .and_then(|_| s.answer_token())
            .and_then(|_| s.text_tokens())
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, sys: &M4scSystem) -> Result<()> {
    write_file(path, &sys.to_checkpoint())
}

pub fn load_checkpoint(path: &Path) -> Result<M4scSystem> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    M4scSystem::from_checkpoint(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    write_file(path, &frame.to_bytes())
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).with_context(|| format!("reading frame {}", path.display()))?;
    Frame::from_bytes(&bytes).with_context(|| format!("decoding frame {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.write_all(b"\n")?;
    write_file(path, &out)
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
