//! Token-level feature records and the HFJ interchange format.
//!
//! An HFJ v1 file is one JSON header line followed by one JSON object per
//! record:
//!
//! ```text
//! {"format":"hfj","version":1,"l_max":50,"d_emb":32}
//! {"id":"q1","context_present":true,"true_len":2,"label":0,"ll":[-0.1,-0.2],"ent":[0.5,0.7],"emb":[[...],[...]]}
//! ```
//!
//! Only the first `true_len` tokens are written; padding is rebuilt on load.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_L_MAX: usize = 50;
pub const HFJ_FORMAT: &str = "hfj";
pub const HFJ_VERSION: u32 = 1;

/// One answered question: per-token log-likelihoods, entropies and hidden states.
///
/// Sequences are always stored at full length `l_max`; positions at or past
/// `true_len` are zero in a valid record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub context_present: bool,
    pub true_len: usize,
    pub log_likelihoods: Vec<f32>,
    pub entropies: Vec<f32>,
    /// Row-major `[l_max, d_emb]`.
    pub embeddings: Vec<f32>,
    pub label: u8,
}

/// Sequences brought to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub log_likelihoods: Vec<f32>,
    pub entropies: Vec<f32>,
    pub embeddings: Vec<f32>,
}

/// Zero-pads (or truncates to the first `l_max` tokens) a token sequence.
///
/// `emb` is row-major `[n, d_emb]`. Returns the padded triple and the number
/// of real tokens kept.
pub fn truncate_or_pad(ll: &[f32], ent: &[f32], emb: &[f32], d_emb: usize, l_max: usize) -> Result<(Padded, usize)> {
    let n = ll.len();
    if n == 0 {
        return Err(Error::Data("cannot pad an empty token sequence".into()));
    }
    if ent.len() != n || emb.len() != n * d_emb {
        return Err(Error::Shape(format!(
            "token sequences disagree: {} log-likelihoods, {} entropies, {} embedding values for d_emb {d_emb}",
            n,
            ent.len(),
            emb.len()
        )));
    }
    let kept = n.min(l_max);
    let mut padded = Padded {
        log_likelihoods: vec![0.0; l_max],
        entropies: vec![0.0; l_max],
        embeddings: vec![0.0; l_max * d_emb],
    };
    padded.log_likelihoods[..kept].copy_from_slice(&ll[..kept]);
    padded.entropies[..kept].copy_from_slice(&ent[..kept]);
    padded.embeddings[..kept * d_emb].copy_from_slice(&emb[..kept * d_emb]);
    Ok((padded, kept))
}

impl FeatureRecord {
    /// Builds a validated record from unpadded per-token features.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tokens(
        id: impl Into<String>,
        context_present: bool,
        label: u8,
        ll: &[f32],
        ent: &[f32],
        emb: &[f32],
        d_emb: usize,
        l_max: usize,
    ) -> Result<Self> {
        let (padded, true_len) = truncate_or_pad(ll, ent, emb, d_emb, l_max)?;
        let record = Self {
            id: id.into(),
            context_present,
            true_len,
            log_likelihoods: padded.log_likelihoods,
            entropies: padded.entropies,
            embeddings: padded.embeddings,
            label,
        };
        record.validate(l_max, d_emb)?;
        Ok(record)
    }

    pub fn l_max(&self) -> usize {
        self.log_likelihoods.len()
    }

    pub fn d_emb(&self) -> usize {
        self.embeddings.len().checked_div(self.l_max()).unwrap_or(0)
    }

    pub fn ll(&self) -> &[f32] {
        &self.log_likelihoods[..self.true_len]
    }

    pub fn ent(&self) -> &[f32] {
        &self.entropies[..self.true_len]
    }

    /// Embedding rows of the real tokens, row-major `[true_len, d_emb]`.
    pub fn emb(&self) -> &[f32] {
        &self.embeddings[..self.true_len * self.d_emb()]
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.l_max()).map(|t| t < self.true_len).collect()
    }

    pub fn validate(&self, l_max: usize, d_emb: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.label > 1 {
            return Err(bad(format!("label {} is not 0 or 1", self.label)));
        }
        if self.true_len == 0 || self.true_len > l_max {
            return Err(bad(format!("true_len {} outside 1..={l_max}", self.true_len)));
        }
        if self.log_likelihoods.len() != l_max
            || self.entropies.len() != l_max
            || self.embeddings.len() != l_max * d_emb
        {
            return Err(bad(format!("expected sequences of length {l_max} with d_emb {d_emb}")));
        }
        let all = self
            .log_likelihoods
            .iter()
            .chain(&self.entropies)
            .chain(&self.embeddings);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        if let Some(t) = self.ll().iter().position(|&v| v > 0.0) {
            return Err(bad(format!("positive log-likelihood at token {t}")));
        }
        if let Some(t) = self.ent().iter().position(|&v| v < 0.0) {
            return Err(bad(format!("negative entropy at token {t}")));
        }
        let tl = self.true_len;
        let padding_clean = self.log_likelihoods[tl..].iter().all(|&v| v == 0.0)
            && self.entropies[tl..].iter().all(|&v| v == 0.0)
            && self.embeddings[tl * d_emb..].iter().all(|&v| v == 0.0);
        if !padding_clean {
            return Err(bad("nonzero value in padded positions".into()));
        }
        Ok(())
    }
}

/// An ordered collection of records sharing `l_max` and `d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FeatureRecord>,
    pub d_emb: usize,
    pub l_max: usize,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>, d_emb: usize, l_max: usize) -> Result<Self> {
        let ds = Self { records, d_emb, l_max };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(d_emb: usize, l_max: usize) -> Self {
        Self {
            records: Vec::new(),
            d_emb,
            l_max,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_max == 0 {
            return Err(Error::Data("l_max must be positive".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate(self.l_max, self.d_emb)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }

    /// Same dimensions, chosen records (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            d_emb: self.d_emb,
            l_max: self.l_max,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    l_max: usize,
    d_emb: usize,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    id: &'a str,
    context_present: bool,
    true_len: usize,
    label: u8,
    ll: &'a [f32],
    ent: &'a [f32],
    emb: Vec<&'a [f32]>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_dataset(reader: impl Read) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<input>", e))?,
        None => return Err(Error::Format("missing HFJ header line".into())),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if header.format != HFJ_FORMAT {
        return Err(Error::Format(format!(
            "expected format `hfj`, found `{}`",
            header.format
        )));
    }
    if header.version != HFJ_VERSION {
        return Err(Error::Format(format!(
            "HFJ version {} is not supported (expected {HFJ_VERSION})",
            header.version
        )));
    }
    if header.l_max == 0 {
        return Err(Error::Parse {
            line: 1,
            field: "l_max".into(),
            message: "must be positive".into(),
        });
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, line_no, header.l_max, header.d_emb)?;
        record.validate(header.l_max, header.d_emb)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::InvalidRecord {
                id: record.id,
                reason: "duplicate id".into(),
            });
        }
        records.push(record);
    }
    Ok(Dataset {
        records,
        d_emb: header.d_emb,
        l_max: header.l_max,
    })
}

fn parse_record(line: &str, line_no: usize, l_max: usize, d_emb: usize) -> Result<FeatureRecord> {
    let err = |field: &str, message: String| Error::Parse {
        line: line_no,
        field: field.into(),
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err("record", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record", "expected a JSON object".into()))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| err(name, "missing".into()));

    let id = field("id")?
        .as_str()
        .ok_or_else(|| err("id", "expected a string".into()))?
        .to_owned();
    let context_present = field("context_present")?
        .as_bool()
        .ok_or_else(|| err("context_present", "expected a boolean".into()))?;
    let true_len = field("true_len")?
        .as_u64()
        .ok_or_else(|| err("true_len", "expected a non-negative integer".into()))? as usize;
    if true_len == 0 || true_len > l_max {
        return Err(err("true_len", format!("{true_len} outside 1..={l_max}")));
    }
    let label = match field("label")?.as_u64() {
        Some(0) => 0,
        Some(1) => 1,
        _ => return Err(err("label", "expected 0 or 1".into())),
    };

    let ll = float_array(field("ll")?, "ll", true_len, &err)?;
    let ent = float_array(field("ent")?, "ent", true_len, &err)?;
    let rows = field("emb")?
        .as_array()
        .ok_or_else(|| err("emb", "expected an array of rows".into()))?;
    if rows.len() != true_len {
        return Err(err("emb", format!("expected {true_len} rows, found {}", rows.len())));
    }
    let mut emb = Vec::with_capacity(true_len * d_emb);
    for (t, row) in rows.iter().enumerate() {
        let name = format!("emb[{t}]");
        emb.extend(float_array(row, &name, d_emb, &err)?);
    }
    check_unknown_fields(obj, &err)?;

    let (padded, kept) = truncate_or_pad(&ll, &ent, &emb, d_emb, l_max)?;
    Ok(FeatureRecord {
        id,
        context_present,
        true_len: kept,
        log_likelihoods: padded.log_likelihoods,
        entropies: padded.entropies,
        embeddings: padded.embeddings,
        label,
    })
}

fn check_unknown_fields(obj: &Map<String, Value>, err: &dyn Fn(&str, String) -> Error) -> Result<()> {
    const KNOWN: [&str; 7] = ["id", "context_present", "true_len", "label", "ll", "ent", "emb"];
    match obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        Some(k) => Err(err(k, "unknown field".into())),
        None => Ok(()),
    }
}

fn float_array(value: &Value, name: &str, expected: usize, err: &dyn Fn(&str, String) -> Error) -> Result<Vec<f32>> {
    let items = value
        .as_array()
        .ok_or_else(|| err(name, "expected an array of numbers".into()))?;
    if items.len() != expected {
        return Err(err(name, format!("expected {expected} values, found {}", items.len())));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let number = v
                .as_number()
                .ok_or_else(|| err(name, format!("element {i} is not a number")))?;
            // Parse the literal text directly to f32 so shortest-form output round-trips exactly.
            let parsed: f32 = number
                .to_string()
                .parse()
                .map_err(|e| err(name, format!("element {i}: {e}")))?;
            if !parsed.is_finite() {
                return Err(err(name, format!("element {i} is out of f32 range")));
            }
            Ok(parsed)
        })
        .collect()
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, mut out: impl Write) -> Result<()> {
    ds.validate()?;
    let io = |e: std::io::Error| Error::io("<output>", e);
    let header = Header {
        format: HFJ_FORMAT.into(),
        version: HFJ_VERSION,
        l_max: ds.l_max,
        d_emb: ds.d_emb,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::io("<output>", e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for r in &ds.records {
        write_record(r, ds.d_emb, &mut out)?;
    }
    Ok(())
}

pub fn write_record(r: &FeatureRecord, d_emb: usize, mut out: impl Write) -> Result<()> {
    let emb = if d_emb == 0 {
        vec![&[][..]; r.true_len]
    } else {
        r.emb().chunks_exact(d_emb).collect()
    };
    let line = RecordLine {
        id: &r.id,
        context_present: r.context_present,
        true_len: r.true_len,
        label: r.label,
        ll: r.ll(),
        ent: r.ent(),
        emb,
    };
    serde_json::to_writer(&mut out, &line).map_err(|e| Error::io("<output>", e.into()))?;
    out.write_all(b"\n").map_err(|e| Error::io("<output>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, n: usize, d_emb: usize, l_max: usize) -> FeatureRecord {
        let ll: Vec<f32> = (0..n).map(|t| -0.1 * (t as f32 + 1.0)).collect();
        let ent: Vec<f32> = (0..n).map(|t| 0.3 + t as f32 * 0.01).collect();
        let emb: Vec<f32> = (0..n * d_emb).map(|i| (i as f32 * 0.37).sin()).collect();
        FeatureRecord::from_tokens(id, true, (n % 2) as u8, &ll, &ent, &emb, d_emb, l_max).unwrap()
    }

    fn roundtrip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        read_dataset(buf.as_slice()).unwrap()
    }

    #[test]
    fn pad_short_sequence() {
        let (p, n) = truncate_or_pad(&[-0.5, -0.2], &[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], 2, 50).unwrap();
        assert_eq!(n, 2);
        assert!(p.log_likelihoods[2..].iter().all(|&v| v == 0.0));
        assert!(p.entropies[2..].iter().all(|&v| v == 0.0));
        assert!(p.embeddings[4..].iter().all(|&v| v == 0.0));
        assert_eq!(p.embeddings.len(), 100);
    }

    #[test]
    fn pad_exact_and_truncate() {
        let ll = vec![-0.1f32; 50];
        let ent = vec![0.2f32; 50];
        let (p, n) = truncate_or_pad(&ll, &ent, &[], 0, 50).unwrap();
        assert_eq!((n, &p.log_likelihoods[..], &p.entropies[..]), (50, &ll[..], &ent[..]));

        let ll: Vec<f32> = (0..60).map(|t| -(t as f32)).collect();
        let ent = vec![0.2f32; 60];
        let (p, n) = truncate_or_pad(&ll, &ent, &[], 0, 50).unwrap();
        assert_eq!(n, 50);
        assert_eq!(p.log_likelihoods, ll[..50].to_vec());
    }

    #[test]
    fn pad_rejects_empty_and_ragged() {
        assert!(truncate_or_pad(&[], &[], &[], 3, 50).is_err());
        assert!(truncate_or_pad(&[-0.1], &[0.1, 0.2], &[0.0; 3], 3, 50).is_err());
    }

    #[test]
    fn empty_file_takes_header_dims() {
        let text = "{\"format\":\"hfj\",\"version\":1,\"l_max\":50,\"d_emb\":7}\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.d_emb, ds.l_max), (7, 50));
    }

    #[test]
    fn single_record_is_padded() {
        let text = "{\"format\":\"hfj\",\"version\":1,\"l_max\":50,\"d_emb\":2}\n\
            {\"id\":\"a\",\"context_present\":false,\"true_len\":3,\"label\":1,\"ll\":[-0.1,-0.2,-0.3],\"ent\":[0.1,0.2,0.3],\"emb\":[[1,2],[3,4],[5,6]]}\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        let r = &ds.records[0];
        assert_eq!(r.true_len, 3);
        assert!(r.log_likelihoods[3..].iter().all(|&v| v == 0.0));
        assert!(r.entropies[3..].iter().all(|&v| v == 0.0));
        assert!(r.embeddings[6..].iter().all(|&v| v == 0.0));
        assert_eq!(r.mask().iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn negative_entropy_rejected() {
        let text = "{\"format\":\"hfj\",\"version\":1,\"l_max\":50,\"d_emb\":0}\n\
            {\"id\":\"bad\",\"context_present\":false,\"true_len\":2,\"label\":0,\"ll\":[-0.1,-0.2],\"ent\":[0.5,-0.1],\"emb\":[[],[]]}\n";
        let err = read_dataset(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("negative entropy") && msg.contains("bad"), "{msg}");
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let text = "{\"format\":\"hfj\",\"version\":1,\"l_max\":50,\"d_emb\":0}\n\
            {\"id\":\"a\",\"context_present\":false,\"true_len\":1,\"label\":0,\"ll\":[-0.1],\"ent\":[0.1],\"emb\":[[]]}\n\
            {\"id\":\"b\",\"context_present\":false,\"true_len\":1,\"label\":0,\"ll\":[\"x\"],\"ent\":[0.1],\"emb\":[[]]}\n";
        match read_dataset(text.as_bytes()).unwrap_err() {
            Error::Parse { line, field, .. } => assert_eq!((line, field.as_str()), (3, "ll")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mixed_d_emb_rejected() {
        let text = "{\"format\":\"hfj\",\"version\":1,\"l_max\":50,\"d_emb\":2}\n\
            {\"id\":\"a\",\"context_present\":false,\"true_len\":1,\"label\":0,\"ll\":[-0.1],\"ent\":[0.1],\"emb\":[[1,2,3]]}\n";
        match read_dataset(text.as_bytes()).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "emb[0]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn version_and_format_checked() {
        let v2 = "{\"format\":\"hfj\",\"version\":2,\"l_max\":50,\"d_emb\":2}\n";
        assert!(matches!(read_dataset(v2.as_bytes()), Err(Error::Format(_))));
        let other = "{\"format\":\"csv\",\"version\":1,\"l_max\":50,\"d_emb\":2}\n";
        assert!(matches!(read_dataset(other.as_bytes()), Err(Error::Format(_))));
        assert!(read_dataset("".as_bytes()).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut r = record("x", 4, 3, 10);
        r.log_likelihoods[1] = 0.5;
        assert!(r
            .validate(10, 3)
            .unwrap_err()
            .to_string()
            .contains("positive log-likelihood"));
        let mut r = record("x", 4, 3, 10);
        r.embeddings[2] = f32::NAN;
        assert!(r.validate(10, 3).is_err());
        let mut r = record("x", 4, 3, 10);
        r.entropies[7] = 1.0;
        assert!(r.validate(10, 3).unwrap_err().to_string().contains("padded"));
        let dup = Dataset::new(vec![record("x", 4, 3, 10), record("x", 5, 3, 10)], 3, 10);
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn roundtrip_preserves_order_and_full_length() {
        let ds = Dataset::new(
            vec![record("z", 3, 4, 8), record("a", 8, 4, 8), record("m", 1, 4, 8)],
            4,
            8,
        )
        .unwrap();
        let back = roundtrip(&ds);
        assert_eq!(back, ds);
        let ids: Vec<_> = back.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "m"]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.hfj");
        let ds = Dataset::new(vec![record("q", 5, 2, 50)], 2, 50).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert!(save_dataset(&ds, dir.path().join("missing/dir/x.hfj")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            bits in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO, 12),
            true_len in 1usize..=4,
        ) {
            let d_emb = 2;
            let l_max = 4;
            let n = true_len;
            let ll: Vec<f32> = bits[..n].iter().map(|v| -v.abs()).collect();
            let ent: Vec<f32> = bits[4..4 + n].iter().map(|v| v.abs()).collect();
            let emb: Vec<f32> = bits[8..8 + n * d_emb.min(1)].iter().cycle().take(n * d_emb).copied().collect();
            let r = FeatureRecord::from_tokens("p", false, 1, &ll, &ent, &emb, d_emb, l_max).unwrap();
            let ds = Dataset::new(vec![r], d_emb, l_max).unwrap();
            let back = roundtrip(&ds);
            let a = &ds.records[0];
            let b = &back.records[0];
            for (x, y) in a.log_likelihoods.iter().chain(&a.entropies).chain(&a.embeddings)
                .zip(b.log_likelihoods.iter().chain(&b.entropies).chain(&b.embeddings)) {
                proptest::prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
