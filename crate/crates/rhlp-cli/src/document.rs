//! Self-describing model documents: JSON with a schema version and every
//! float rendered at 17 significant digits, so `parse(render(doc)) == doc`
//! bit-exactly.

use std::io;

use serde::{Deserialize, Serialize};

/// Serialized form of a fitted model plus its fit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub method: String,
    pub k: usize,
    pub p: usize,
    pub parameters: ModelParameters,
    pub loglik: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub converged: bool,
}

/// Method-specific parameter payload; the field sets are disjoint, so the
/// untagged representation is unambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelParameters {
    Rhlp {
        w: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        sigma2: f64,
    },
    Hmm {
        initial: Vec<f64>,
        trans: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        sigma2: f64,
    },
    Piecewise {
        boundaries: Vec<usize>,
        beta: Vec<Vec<f64>>,
        sse: f64,
    },
}

/// JSON formatter printing every f64 with 17 significant digits, enough to
/// reproduce the bit pattern on parse.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub fn render(doc: &ModelDocument) -> String {
    let mut out = Vec::new();
    let mut serializer = serde_json::Serializer::with_formatter(&mut out, SeventeenDigits);
    doc.serialize(&mut serializer).expect("document serializes");
    String::from_utf8(out).expect("JSON is UTF-8")
}

// The binary only writes documents; reading them back is exercised by the
// round-trip tests and offered for downstream tooling.
#[cfg_attr(not(test), allow(dead_code))]
pub fn parse(text: &str) -> Result<ModelDocument, serde_json::Error> {
    serde_json::from_str(text)
}
