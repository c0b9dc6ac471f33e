//! CIFAR-10/100 binary format.
//!
//! CIFAR-10 records are 1 label byte + 3072 pixel bytes; CIFAR-100 records
//! carry a coarse and a fine label byte (the fine one is used). Pixels are
//! stored as the R, G and B planes in row-major order.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use super::{Dataset, Split, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const PIXELS_PER_IMAGE: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    C10,
    C100,
}

impl CifarKind {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarKind::C10 => 1,
            CifarKind::C100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS_PER_IMAGE
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::C10 => 10,
            CifarKind::C100 => 100,
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            CifarKind::C10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            CifarKind::C100 => (vec!["train.bin"], "test.bin"),
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarKind::C10 => "cifar-10-batches-bin",
            CifarKind::C100 => "cifar-100-binary",
        }
    }
}

impl std::str::FromStr for CifarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c10" | "cifar10" | "cifar-10" => Ok(CifarKind::C10),
            "c100" | "cifar100" | "cifar-100" => Ok(CifarKind::C100),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

struct Decoder {
    kind: CifarKind,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Decoder {
    fn new(kind: CifarKind) -> Self {
        Self {
            kind,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn record(&mut self, rec: &[u8], offset: usize) -> Result<()> {
        let label = rec[self.kind.label_bytes() - 1] as usize;
        if label >= self.kind.classes() {
            return Err(Error::Format(format!(
                "label {label} at byte offset {} exceeds {} classes",
                offset + self.kind.label_bytes() - 1,
                self.kind.classes()
            )));
        }
        self.labels.push(label);
        self.pixels
            .extend(rec[self.kind.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
        Ok(())
    }

    fn finish(self, split: Split) -> Result<Dataset> {
        if self.labels.is_empty() {
            return Err(Error::Format("no records".into()));
        }
        let shape = Shape4::new(self.labels.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
        Dataset::new(
            Tensor::new(shape, self.pixels)?,
            self.labels,
            self.kind.classes(),
            split,
        )
    }
}

fn truncated(kind: CifarKind, offset: usize, total: usize) -> Error {
    Error::Format(format!(
        "truncated record at byte offset {offset}: {} trailing bytes, record length {}",
        total - offset,
        kind.record_len()
    ))
}

/// Decode an in-memory file.
pub fn parse_cifar(bytes: &[u8], kind: CifarKind, split: Split) -> Result<Dataset> {
    let rl = kind.record_len();
    if !bytes.len().is_multiple_of(rl) {
        return Err(truncated(kind, bytes.len() / rl * rl, bytes.len()));
    }
    let mut dec = Decoder::new(kind);
    for (i, rec) in bytes.chunks_exact(rl).enumerate() {
        dec.record(rec, i * rl)?;
    }
    dec.finish(split)
}

/// Decode from a reader, pulling at most `chunk` bytes per read call.
pub fn read_cifar<R: Read>(mut reader: R, kind: CifarKind, split: Split, chunk: usize) -> Result<Dataset> {
    let rl = kind.record_len();
    let mut dec = Decoder::new(kind);
    let mut pending = Vec::with_capacity(rl);
    let mut buf = vec![0u8; chunk.max(1)];
    let mut offset = 0usize;
    loop {
        let got = reader.read(&mut buf)?;
        if got == 0 {
            break;
        }
        for &b in &buf[..got] {
            pending.push(b);
            if pending.len() == rl {
                dec.record(&pending, offset)?;
                offset += rl;
                pending.clear();
            }
        }
    }
    if !pending.is_empty() {
        return Err(truncated(kind, offset, offset + pending.len()));
    }
    dec.finish(split)
}

fn read_file(path: &Path, kind: CifarKind, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    read_cifar(BufReader::new(file), kind, split, 1 << 16)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = &parts[0];
    let (classes, split) = (first.classes, first.split);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_data());
    }
    let shape = Shape4::new(labels.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
    Dataset::new(Tensor::new(shape, pixels)?, labels, classes, split)
}

/// Load the standard train/test files from `dir` (or its usual subdirectory).
pub fn load_cifar(dir: &Path, kind: CifarKind) -> Result<(Dataset, Dataset)> {
    let (train_files, test_file) = kind.files();
    let root: PathBuf = if dir.join(test_file).exists() {
        dir.to_path_buf()
    } else {
        dir.join(kind.subdir())
    };
    let train = train_files
        .iter()
        .map(|f| read_file(&root.join(f), kind, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let test = read_file(&root.join(test_file), kind, Split::Test)?;
    Ok((concat(train)?, test))
}
