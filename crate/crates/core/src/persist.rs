//! On-disk model bank: a directory holding `manifest.json` plus one binary
//! file per task.
//!
//! Task file layout (all integers and floats little-endian):
//!
//! ```text
//! "GKDT" u32:version u32:task_id u8:activation u32:extractor_layers u32:classes
//! per layer (extractor layers, then projection):
//!     section "WGHT"   section "BIAS"
//! per class:
//!     "CLAS" u32:label f64:prior f64:bandwidth
//!     section "ANCH"   section "MEAN"   section "VARI"
//! "END!"
//! ```
//!
//! A section is a 4-byte tag, `u64 rows`, `u64 cols`, then `rows·cols`
//! `f64` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{ModelBank, TaskEntry, TaskId};
use crate::error::{Error, Result};
use crate::kde::KernelSpec;
use crate::network::{Activation, Linear, NetworkParams};
use crate::pdf::{ClassPdf, FeatureStats, Label};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_NAME: &str = "gkde-model-bank";
const TASK_MAGIC: &[u8; 4] = b"GKDT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub dim: usize,
    pub bandwidth: f64,
    pub clip_threshold: f64,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: TaskId,
    pub file: String,
    pub labels: Vec<Label>,
}

fn task_file_name(task_id: TaskId) -> String {
    format!("task_{task_id:06}.bin")
}

impl ModelBank {
    /// Writes the bank into `dir`, creating it if needed. The encoding is
    /// canonical: saving a loaded bank reproduces the same bytes.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tasks = Vec::with_capacity(self.len());
        for entry in self.entries() {
            let file = task_file_name(entry.task_id());
            fs::write(dir.join(&file), encode_task(entry))?;
            tasks.push(ManifestTask {
                task_id: entry.task_id(),
                file,
                labels: entry.labels(),
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.to_string(),
            format_version: FORMAT_VERSION,
            dim: self.kernel().dim(),
            bandwidth: self.kernel().bandwidth(),
            clip_threshold: self.clip(),
            tasks,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: line_col_offset(&text, e.line(), e.column()),
            message: format!("{MANIFEST_FILE}: {e}"),
        })?;
        if manifest.format != FORMAT_NAME {
            return Err(Error::Parse {
                offset: 0,
                message: format!("{MANIFEST_FILE}: unexpected format `{}`", manifest.format),
            });
        }
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let kernel = KernelSpec::new(manifest.dim, manifest.bandwidth)?;
        let mut bank = ModelBank::new(kernel, manifest.clip_threshold)?;
        for task in &manifest.tasks {
            let bytes = fs::read(dir.join(&task.file))?;
            let entry = decode_task(&bytes).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse {
                    offset,
                    message: format!("{}: {message}", task.file),
                },
                other => other,
            })?;
            if entry.task_id() != task.task_id || entry.labels() != task.labels {
                return Err(Error::contract(format!(
                    "{} does not match its manifest record (task {})",
                    task.file, task.task_id
                )));
            }
            bank.add_task(entry)?;
        }
        Ok(bank)
    }
}

fn line_col_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

struct Writer(Vec<u8>);

impl Writer {
    fn tag(&mut self, tag: &[u8; 4]) {
        self.0.extend_from_slice(tag);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn section(&mut self, tag: &[u8; 4], rows: usize, cols: usize, data: &[f64]) {
        self.tag(tag);
        self.0.extend_from_slice(&(rows as u64).to_le_bytes());
        self.0.extend_from_slice(&(cols as u64).to_le_bytes());
        for &v in data {
            self.f64(v);
        }
    }

    fn matrix(&mut self, tag: &[u8; 4], t: &Tensor) {
        self.section(tag, t.rows(), t.cols(), t.data());
    }
}

pub(crate) fn encode_task(entry: &TaskEntry) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let params = entry.params();
    w.tag(TASK_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(entry.task_id());
    w.0.push(params.activation().code());
    w.u32(params.extractor().len() as u32);
    w.u32(entry.class_pdfs().len() as u32);
    for layer in params.extractor().iter().chain(std::iter::once(params.projection())) {
        w.matrix(b"WGHT", &layer.weight);
        w.matrix(b"BIAS", &layer.bias);
    }
    for pdf in entry.class_pdfs() {
        w.tag(b"CLAS");
        w.u32(pdf.label());
        w.f64(pdf.prior());
        w.f64(pdf.bandwidth());
        w.matrix(b"ANCH", pdf.anchors());
        let stats = pdf.stats();
        w.section(b"MEAN", 1, stats.mean.len(), &stats.mean);
        w.section(b"VARI", 1, stats.variance.len(), &stats.variance);
    }
    w.tag(b"END!");
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: needed {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_tag(&mut self, tag: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != tag {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!(
                    "expected tag {:?}, found {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Tensor> {
        self.expect_tag(tag)?;
        let at = self.pos;
        let rows = self.u64()?;
        let cols = self.u64()?;
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c > 0 && c.saturating_mul(8) <= (self.bytes.len() - self.pos) as u64)
            .ok_or_else(|| Error::Parse {
                offset: at as u64,
                message: format!("section {rows}x{cols} is empty or exceeds the file"),
            })?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::matrix(rows as usize, cols as usize, data)
    }
}

pub(crate) fn decode_task(bytes: &[u8]) -> Result<TaskEntry> {
    let mut r = Reader { bytes, pos: 0 };
    r.expect_tag(TASK_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let task_id = r.u32()?;
    let act_at = r.pos;
    let activation = Activation::from_code(r.u8()?).ok_or_else(|| Error::Parse {
        offset: act_at as u64,
        message: "unknown activation code".into(),
    })?;
    let layers = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let mut linear = Vec::with_capacity(layers + 1);
    for _ in 0..=layers {
        let at = r.pos;
        let weight = r.section(b"WGHT")?;
        let bias = r.section(b"BIAS")?;
        linear.push(Linear::new(weight, bias).map_err(|e| Error::Parse {
            offset: at as u64,
            message: e.to_string(),
        })?);
    }
    let projection = linear.pop().expect("at least the projection layer");
    let params = NetworkParams::new(linear, projection, activation)?;
    let mut pdfs = Vec::with_capacity(classes);
    for _ in 0..classes {
        r.expect_tag(b"CLAS")?;
        let label = r.u32()?;
        let prior = r.f64()?;
        let bandwidth = r.f64()?;
        let anchors = r.section(b"ANCH")?;
        let mean = r.section(b"MEAN")?.into_data();
        let variance = r.section(b"VARI")?.into_data();
        pdfs.push(ClassPdf::new(
            label,
            anchors,
            bandwidth,
            prior,
            FeatureStats { mean, variance },
        )?);
    }
    r.expect_tag(b"END!")?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after end tag"));
    }
    TaskEntry::new(task_id, params, pdfs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::DEFAULT_CLIP;
    use crate::network::NetworkConfig;
    use crate::pdf::{build_task_pdfs, AnchorConfig};

    fn sample_bank(tasks: u32) -> ModelBank {
        let kernel = KernelSpec::new(3, 0.5).unwrap();
        let mut bank = ModelBank::new(kernel, DEFAULT_CLIP).unwrap();
        for t in 0..tasks {
            let cfg = NetworkConfig {
                input_dim: 4,
                hidden: vec![5],
                embed_dim: 3,
                activation: if t % 2 == 0 { Activation::Tanh } else { Activation::Relu },
            };
            let net = NetworkParams::init(&cfg, t as u64).unwrap();
            let x = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37 + t as f64).sin()).collect()).unwrap();
            let labels = [2 * t, 2 * t, 2 * t, 2 * t + 1, 2 * t + 1, 2 * t + 1];
            let pdfs = build_task_pdfs(&net.embed(&x).unwrap(), &labels, kernel, &AnchorConfig::new(7), t as u64).unwrap();
            bank.add_task(TaskEntry::new(t + 1, net, pdfs).unwrap()).unwrap();
        }
        bank
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn round_trip_is_lossless_and_canonical() {
        let bank = sample_bank(5);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        bank.save(a.path()).unwrap();
        let loaded = ModelBank::load(a.path()).unwrap();
        assert_eq!(loaded, bank);
        loaded.save(b.path()).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn empty_bank_round_trip() {
        let bank = sample_bank(0);
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        assert_eq!(ModelBank::load(dir.path()).unwrap(), bank);
    }

    #[test]
    fn corrupted_magic_is_a_parse_error() {
        let bank = sample_bank(2);
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let path = dir.path().join(task_file_name(2));
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        match ModelBank::load(dir.path()) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("task_000002.bin"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_bytes() {
        let entry = sample_bank(1).entries()[0].clone();
        let bytes = encode_task(&entry);
        assert_eq!(decode_task(&bytes).unwrap(), entry);
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_task(cut), Err(Error::Parse { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_task(&long), Err(Error::Parse { offset, .. }) if offset as usize == bytes.len()));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let entry = sample_bank(1).entries()[0].clone();
        let mut bytes = encode_task(&entry);
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_task(&bytes), Err(Error::Version { found: 7, expected: 1 })));

        let dir = tempfile::tempdir().unwrap();
        sample_bank(1).save(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&p, text).unwrap();
        assert!(matches!(ModelBank::load(dir.path()), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn malformed_manifest_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\n  \"format\": oops\n}").unwrap();
        match ModelBank::load(dir.path()) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
