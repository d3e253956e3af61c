//! Dataset types and the on-disk format.
//!
//! A dataset file is UTF-8, line-delimited JSON. The first line is a header
//! carrying the schema version, the split tag, the full vocabulary, and its
//! hash; every following line is one sample. Image components are written
//! with exactly nine significant digits, and the generator quantizes to the
//! same precision, so save/load round trips are identities in both
//! directions: values survive field-for-field and files survive
//! byte-for-byte.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::VocabSpec;

pub const SCHEMA_VERSION: u32 = 1;
const FILE_KIND: &str = "cibi-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub question: Vec<String>,
    pub qtype: String,
    /// Index into the vocabulary's answer list.
    pub answer: usize,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: VocabSpec,
    pub split: Split,
}

/// Round to nine significant decimal digits (the file precision). `-0.0` is
/// normalized so formatting is unambiguous.
pub fn quantize9(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format_f64(x).parse().expect("9-digit format round-trips")
}

/// Fixed-precision decimal form: nine significant digits, scientific.
pub fn format_f64(x: f64) -> String {
    format!("{:.8e}", x)
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
    split: Split,
    vocab_hash: String,
    vocab: VocabSpec,
}

#[derive(Deserialize)]
struct SampleLine {
    question: String,
    qtype: String,
    answer: String,
    image: Vec<f64>,
}

fn render_sample(s: &Sample, vocab: &VocabSpec) -> Result<String> {
    let answer = vocab.answers.get(s.answer).ok_or(Error::AnswerOutOfRange {
        index: s.answer,
        count: vocab.answers.len(),
    })?;
    let mut image = String::from("[");
    for (i, x) in s.image.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::state(format!("non-finite image component {x}")));
        }
        if i > 0 {
            image.push(',');
        }
        image.push_str(&format_f64(*x));
    }
    image.push(']');
    Ok(format!(
        "{{\"question\":{},\"qtype\":{},\"answer\":{},\"image\":{}}}",
        serde_json::to_string(&s.question.join(" ")).unwrap(),
        serde_json::to_string(&s.qtype).unwrap(),
        serde_json::to_string(answer).unwrap(),
        image
    ))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_dataset(dataset, &mut out)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, out: &mut impl Write) -> Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: FILE_KIND.to_string(),
        split: dataset.split,
        vocab_hash: dataset.vocab.hash_hex(),
        vocab: dataset.vocab.clone(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    out.write_all(line.as_bytes())?;
    for s in &dataset.samples {
        let mut line = render_sample(s, &dataset.vocab)?;
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header_line = lines.next().transpose()?.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: header.schema_version.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    if header.kind != FILE_KIND {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected file kind `{}`", header.kind),
        });
    }
    header.vocab.validate()?;
    if header.vocab_hash != header.vocab.hash_hex() {
        return Err(Error::Compatibility {
            message: format!(
                "header vocab hash {} does not match vocabulary ({})",
                header.vocab_hash,
                header.vocab.hash_hex()
            ),
        });
    }

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let raw: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let answer = header
            .vocab
            .answer_index(&raw.answer)
            .ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("answer `{}` not in vocabulary", raw.answer),
            })?;
        samples.push(Sample {
            question: raw.question.split(' ').map(String::from).collect(),
            qtype: raw.qtype,
            answer,
            image: raw.image,
        });
    }
    Ok(Dataset {
        samples,
        vocab: header.vocab,
        split: header.split,
    })
}
