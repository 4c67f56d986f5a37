//! Compression ratio, bits per event, and the external-anchor harness.

use std::path::Path;
use std::process::{Command, Stdio};

use serde::Serialize;

use crate::container::SizeBreakdown;
use crate::error::{Error, Result};

/// `input_bits / compressed_bits`.
pub fn compute_cr(input_bits: u64, compressed_bits: u64) -> Result<f64> {
    if compressed_bits == 0 {
        return Err(Error::InvalidArgument("compressed size is zero".into()));
    }
    Ok(input_bits as f64 / compressed_bits as f64)
}

/// Bits per event.
pub fn compute_s(compressed_bits: u64, event_count: u64) -> Result<f64> {
    if event_count == 0 {
        return Err(Error::InvalidArgument("event count is zero".into()));
    }
    Ok(compressed_bits as f64 / event_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Skipped,
}

/// One row of a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub sequence: String,
    pub codec: String,
    pub status: RowStatus,
    /// Tool version string, or the reason a row was skipped.
    pub note: String,
    pub input_bits: u64,
    pub compressed_bits: u64,
    pub event_count: u64,
    pub cr: f64,
    pub s: f64,
    pub breakdown: Option<SizeBreakdown>,
}

impl CompressionReport {
    pub fn new(
        sequence: &str,
        codec: &str,
        note: &str,
        input_bits: u64,
        compressed_bits: u64,
        event_count: u64,
    ) -> Result<Self> {
        Ok(Self {
            sequence: sequence.to_owned(),
            codec: codec.to_owned(),
            status: RowStatus::Ok,
            note: note.to_owned(),
            input_bits,
            compressed_bits,
            event_count,
            cr: compute_cr(input_bits, compressed_bits)?,
            s: compute_s(compressed_bits, event_count)?,
            breakdown: None,
        })
    }

    pub fn skipped(sequence: &str, codec: &str, reason: &str, input_bits: u64, event_count: u64) -> Self {
        Self {
            sequence: sequence.to_owned(),
            codec: codec.to_owned(),
            status: RowStatus::Skipped,
            note: reason.to_owned(),
            input_bits,
            compressed_bits: 0,
            event_count,
            cr: f64::NAN,
            s: f64::NAN,
            breakdown: None,
        }
    }

    /// Report for an llec container; the whole file counts, header and latents included.
    pub fn for_container(sequence: &str, input_bits: u64, event_count: u64, breakdown: SizeBreakdown) -> Result<Self> {
        let mut r =
            Self::new(sequence, "llec", env!("CARGO_PKG_VERSION"), input_bits, breakdown.total_bits(), event_count)?;
        r.breakdown = Some(breakdown);
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Anchor {
    Lz4,
    Bzip2,
    SevenZip,
}

impl Anchor {
    pub const ALL: [Anchor; 3] = [Anchor::Lz4, Anchor::Bzip2, Anchor::SevenZip];

    pub fn name(self) -> &'static str {
        match self {
            Anchor::Lz4 => "lz4",
            Anchor::Bzip2 => "bzip2",
            Anchor::SevenZip => "7z",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown anchor {s:?} (expected lz4, bzip2 or 7z)")))
    }

    fn candidates(self) -> &'static [&'static str] {
        match self {
            Anchor::Lz4 => &["lz4"],
            Anchor::Bzip2 => &["bzip2"],
            Anchor::SevenZip => &["7z", "7za", "7zz"],
        }
    }
}

fn on_path(bin: &str) -> bool {
    std::env::var_os("PATH").is_some_and(|paths| std::env::split_paths(&paths).any(|dir| dir.join(bin).is_file()))
}

/// First executable name for `anchor` found on `PATH`.
pub fn locate_anchor(anchor: Anchor) -> Option<&'static str> {
    anchor.candidates().iter().copied().find(|b| on_path(b))
}

fn tool_version(anchor: Anchor, bin: &str) -> String {
    let args: &[&str] = match anchor {
        Anchor::Lz4 => &["--version"],
        Anchor::Bzip2 => &["--help"],
        Anchor::SevenZip => &[],
    };
    let out = match Command::new(bin).args(args).stdin(Stdio::null()).output() {
        Ok(o) => o,
        Err(_) => return bin.to_owned(),
    };
    let text = [out.stdout, out.stderr].concat();
    String::from_utf8_lossy(&text)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map_or_else(|| bin.to_owned(), str::to_owned)
}

/// Compressed size in bytes produced by `bin` with default settings.
fn run_anchor(anchor: Anchor, bin: &str, data: &[u8]) -> std::result::Result<u64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("input.raw");
    std::fs::write(&input, data).map_err(|e| e.to_string())?;
    let output = match anchor {
        Anchor::Lz4 => {
            let out = dir.path().join("input.raw.lz4");
            invoke(Command::new(bin).arg("-q").arg(&input).arg(&out))?;
            out
        }
        Anchor::Bzip2 => {
            invoke(Command::new(bin).arg("-k").arg(&input))?;
            dir.path().join("input.raw.bz2")
        }
        Anchor::SevenZip => {
            let out = dir.path().join("input.7z");
            invoke(Command::new(bin).arg("a").arg("-bd").arg(&out).arg(&input))?;
            out
        }
    };
    std::fs::metadata(&output).map(|m| m.len()).map_err(|e| format!("no output: {e}"))
}

fn invoke(cmd: &mut Command) -> std::result::Result<(), String> {
    let out = cmd.stdin(Stdio::null()).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Runs each anchor tool on the raw EVT2 bytes. Missing or failing tools give skipped rows.
pub fn bench_anchors(sequence: &str, raw: &[u8], event_count: u64, anchors: &[Anchor]) -> Vec<CompressionReport> {
    let input_bits = 8 * raw.len() as u64;
    anchors
        .iter()
        .map(|&anchor| {
            let Some(bin) = locate_anchor(anchor) else {
                log::warn!("{} not found on PATH, skipping", anchor.name());
                return CompressionReport::skipped(sequence, anchor.name(), "not installed", input_bits, event_count);
            };
            let version = tool_version(anchor, bin);
            match run_anchor(anchor, bin, raw).and_then(|bytes| {
                CompressionReport::new(sequence, anchor.name(), &version, input_bits, 8 * bytes, event_count)
                    .map_err(|e| e.to_string())
            }) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{} failed: {e}", anchor.name());
                    CompressionReport::skipped(
                        sequence,
                        anchor.name(),
                        &format!("failed: {e}"),
                        input_bits,
                        event_count,
                    )
                }
            }
        })
        .collect()
}

/// Benchmarks the raw file from disk.
pub fn bench_anchors_file(path: &Path, event_count: u64, anchors: &[Anchor]) -> Result<Vec<CompressionReport>> {
    let raw = std::fs::read(path)?;
    let name = path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
    Ok(bench_anchors(&name, &raw, event_count, anchors))
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[CompressionReport], mut w: W) -> Result<()> {
    writeln!(w, "sequence,codec,status,input_bits,compressed_bits,event_count,cr,s,header_bits,metadata_bits,latent_bits,payload_bits,note")?;
    for r in rows {
        let b = r.breakdown.map_or_else(
            || ",,,".to_owned(),
            |b| format!("{},{},{},{}", b.header_bits, b.metadata_bits, b.latent_bits, b.payload_bits),
        );
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},\"{}\"",
            r.sequence,
            r.codec,
            if r.status == RowStatus::Ok { "ok" } else { "skipped" },
            r.input_bits,
            r.compressed_bits,
            r.event_count,
            fmt_num(r.cr),
            fmt_num(r.s),
            b,
            r.note.replace('"', "'"),
        )?;
    }
    Ok(())
}

pub fn to_json(rows: &[CompressionReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}

/// Plain-text table for terminals.
pub fn format_table(rows: &[CompressionReport]) -> String {
    let mut out = format!(
        "{:<20} {:<8} {:>14} {:>14} {:>8} {:>10}  note\n",
        "sequence", "codec", "input_bits", "compressed", "CR", "S"
    );
    for r in rows {
        let (c, cr, s) = match r.status {
            RowStatus::Ok => (r.compressed_bits.to_string(), format!("{:.3}", r.cr), format!("{:.3}", r.s)),
            RowStatus::Skipped => ("-".into(), "-".into(), "-".into()),
        };
        out += &format!(
            "{:<20} {:<8} {:>14} {:>14} {:>8} {:>10}  {}\n",
            r.sequence, r.codec, r.input_bits, c, cr, s, r.note
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios() {
        assert_eq!(compute_cr(1000, 500).unwrap(), 2.0);
        assert_eq!(compute_cr(1000, 1000).unwrap(), 1.0);
        assert!(compute_cr(1000, 0).is_err());
        assert_eq!(compute_s(8000, 500).unwrap(), 16.0);
        assert_eq!(compute_s(77, 77).unwrap(), 1.0);
        assert!(compute_s(10, 0).is_err());
    }

    #[test]
    fn report_arithmetic() {
        let r = CompressionReport::new("a", "x", "", 12_345, 4096, 512).unwrap();
        assert_eq!(r.cr * 4096.0, 12_345.0);
        assert_eq!(r.s * 512.0, 4096.0);
    }

    #[test]
    fn anchors_deterministic_or_skipped() {
        let data: Vec<u8> = (0..20_000u32).flat_map(|i| (i * 7 % 251).to_le_bytes()).collect();
        let a = bench_anchors("seq", &data, 20_000, &Anchor::ALL);
        let b = bench_anchors("seq", &data, 20_000, &Anchor::ALL);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.status, y.status);
            assert_eq!(x.compressed_bits, y.compressed_bits);
            if x.status == RowStatus::Skipped {
                assert!(x.cr.is_nan());
            }
        }
    }

    #[test]
    fn csv_and_json() {
        let rows = vec![
            CompressionReport::new("a", "bzip2", "v1", 800, 400, 25).unwrap(),
            CompressionReport::skipped("a", "lz4", "not installed", 800, 25),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("a,bzip2,ok,800,400,25,2.0000,16.0000"));
        assert!(to_json(&rows).unwrap().contains("\"skipped\""));
        assert!(format_table(&rows).contains("not installed"));
    }
}
