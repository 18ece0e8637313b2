//! Checkpoint container: named f64 arrays in one binary file.
//!
//! Layout is a UTF-8 text manifest followed by a raw little-endian data
//! section:
//!
//! ```text
//! votebox-tensors v1
//! count <k>
//! <name> <d0>[x<d1>...] <byte-offset>     (one line per array)
//! data <total-bytes>
//! <raw little-endian f64 bytes>
//! ```
//!
//! Offsets are relative to the start of the data section. Values are
//! written with `f64::to_le_bytes`, so save → load round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;

const MAGIC: &str = "votebox-tensors v1";

/// Errors reading or writing checkpoint containers.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("tensor name {0:?} contains whitespace")]
    BadName(String),
}

/// Writes named tensors to `path`. Order is preserved.
pub fn save_named(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    for (name, _) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(CheckpointError::BadName(name.clone()));
        }
    }
    let mut writer = BufWriter::new(File::create(path)?);
    writeln!(writer, "{MAGIC}")?;
    writeln!(writer, "count {}", entries.len())?;
    let mut offset = 0usize;
    for (name, tensor) in entries {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(writer, "{name} {} {offset}", dims.join("x"))?;
        offset += tensor.len() * 8;
    }
    writeln!(writer, "data {offset}")?;
    for (_, tensor) in entries {
        for v in tensor.data() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads every named tensor from `path`, in stored order.
pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line_no = 0usize;
    let mut read_line = |reader: &mut BufReader<File>| -> Result<String, CheckpointError> {
        line_no += 1;
        let mut buf = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            let n = reader.read(&mut byte)?;
            if n == 0 {
                return Err(CheckpointError::Parse {
                    line: line_no,
                    msg: "unexpected end of file".into(),
                });
            }
            if byte[0] == b'\n' {
                break;
            }
            buf.push(byte[0]);
        }
        String::from_utf8(buf).map_err(|_| CheckpointError::Parse {
            line: line_no,
            msg: "manifest is not UTF-8".into(),
        })
    };

    let magic = read_line(&mut reader)?;
    if magic != MAGIC {
        return Err(CheckpointError::Parse {
            line: 1,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let count_line = read_line(&mut reader)?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Parse {
            line: 2,
            msg: format!("expected `count <k>`, got {count_line:?}"),
        })?;

    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count);
    for i in 0..count {
        let line = read_line(&mut reader)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| CheckpointError::Parse {
            line: 3 + i,
            msg,
        };
        if parts.len() != 3 {
            return Err(bad(format!(
                "expected `<name> <shape> <offset>`, got {line:?}"
            )));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(format!("bad shape {:?}", parts[1])))?;
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| bad(format!("bad offset {:?}", parts[2])))?;
        manifest.push((parts[0].to_string(), shape, offset));
    }

    let data_line = read_line(&mut reader)?;
    let total: usize = data_line
        .strip_prefix("data ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Parse {
            line: 3 + count,
            msg: format!("expected `data <bytes>`, got {data_line:?}"),
        })?;
    let mut bytes = vec![0u8; total];
    reader.read_exact(&mut bytes).map_err(|_| CheckpointError::Parse {
        line: 4 + count,
        msg: format!("data section shorter than declared {total} bytes"),
    })?;

    let mut out = Vec::with_capacity(count);
    for (i, (name, shape, offset)) in manifest.into_iter().enumerate() {
        let len: usize = shape.iter().product();
        let end = offset + len * 8;
        if end > bytes.len() {
            return Err(CheckpointError::Parse {
                line: 3 + i,
                msg: format!(
                    "tensor {name:?} needs bytes {offset}..{end} but data section has {}",
                    bytes.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(len);
        for chunk in bytes[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        // from_raw: checkpoints may legitimately hold any stored bits.
        out.push((name, Tensor::from_raw(shape, data)));
    }
    Ok(out)
}
