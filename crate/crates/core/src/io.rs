//! Plain-text artifacts: fields and tables as CSV, configurations and model
//! states as JSON, and run manifests carrying content hashes.
//!
//! A field file is long format, one row per replicate and site:
//!
//! ```text
//! t,site_id,x,y,value
//! 0,0,3.1,7.2,1.84
//! ```
//!
//! Replicates are numbered from 0 and every replicate lists the same sites.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::marginal_models::{GevParams, GofResult};
use crate::spatial_basis::{Point, SiteSet};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Parses JSON, rejecting trailing content; serde attributes on `T` decide
/// whether unknown keys are errors.
pub fn from_json_str<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json_str(path, &read_string(path)?)
}

pub fn to_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_pretty(path, value)?.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    t: usize,
    site_id: usize,
    x: f64,
    y: f64,
    value: f64,
}

/// Serializes a field in the long CSV layout; site ids are positions.
pub fn field_to_csv(field: &Field) -> String {
    let mut out = String::with_capacity(field.values().len() * 32);
    out.push_str("t,site_id,x,y,value\n");
    let c = field.sites().coords();
    for t in 0..field.n_t() {
        for (j, p) in c.iter().enumerate() {
            out.push_str(&format!("{t},{j},{},{},{}\n", p[0], p[1], field.get(t, j)));
        }
    }
    out
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_bytes(path, field_to_csv(field).as_bytes())
}

/// Reads a long-format field. Sites are ordered as in replicate 0; every
/// later replicate must list exactly the same site ids with the same
/// coordinates.
pub fn read_field(path: &Path, scale: Scale) -> Result<Field> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let want = ["t", "site_id", "x", "y", "value"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(parse_err(path, 1, format!("expected header {}", want.join(","))));
    }
    let mut ids: Vec<usize> = Vec::new();
    let mut coords: Vec<Point> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let r: FieldRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        if !r.value.is_finite() || !r.x.is_finite() || !r.y.is_finite() {
            return Err(parse_err(path, line, "non-finite number"));
        }
        if r.t == 0 && rows.len() <= 1 {
            if rows.is_empty() {
                rows.push(Vec::new());
            }
            if index.insert(r.site_id, ids.len()).is_some() {
                return Err(parse_err(path, line, format!("site {} repeated in replicate 0", r.site_id)));
            }
            ids.push(r.site_id);
            coords.push([r.x, r.y]);
            rows[0].push(Some(r.value));
            continue;
        }
        if r.t != rows.len() - 1 && r.t != rows.len() {
            return Err(parse_err(
                path,
                line,
                format!("replicate {} out of order (expected {} or {})", r.t, rows.len() - 1, rows.len()),
            ));
        }
        if r.t == rows.len() {
            rows.push(vec![None; ids.len()]);
        }
        let j = *index
            .get(&r.site_id)
            .ok_or_else(|| parse_err(path, line, format!("site {} absent from replicate 0", r.site_id)))?;
        if coords[j] != [r.x, r.y] {
            return Err(parse_err(path, line, format!("site {} moved", r.site_id)));
        }
        let slot = &mut rows[r.t][j];
        if slot.is_some() {
            return Err(parse_err(path, line, format!("site {} repeated in replicate {}", r.site_id, r.t)));
        }
        *slot = Some(r.value);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let n_t = rows.len();
    let mut values = Vec::with_capacity(n_t * ids.len());
    for (t, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            values.push(v.ok_or_else(|| parse_err(path, 0, format!("replicate {t} lacks site {}", ids[j])))?);
        }
    }
    let sites = SiteSet::new(coords).map_err(|e| parse_err(path, 0, e.to_string()))?;
    Field::new(values, n_t, sites, scale)
}

/// One row of the fitted-margins table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub site_id: usize,
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub beta: f64,
    pub gof_stat: f64,
    pub p_value: f64,
}

impl MarginRow {
    pub fn new(site_id: usize, p: &GevParams, gof: &GofResult) -> Self {
        Self {
            site_id,
            mu: p.mu,
            sigma: p.sigma,
            xi: p.xi,
            beta: p.beta(),
            gof_stat: gof.stat,
            p_value: gof.p_value,
        }
    }

    pub fn params(&self) -> Result<GevParams> {
        GevParams::new(self.mu, self.sigma, self.xi)
    }
}

/// Writes any serializable rows as CSV with a header from the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_bytes(path, &bytes)
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// A file the stage read or wrote, with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Provenance of one stage: the resolved configuration, its hash, the seed
/// and the digests of every input and output. No timestamps, so identical
/// runs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Stage-specific facts such as generating parameters.
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(stage: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_string(&config).unwrap_or_default();
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            seed,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }
}

/// Appends text lines to an in-memory buffer; used for logs that become
/// files only once a stage succeeds.
#[derive(Debug, Default)]
pub struct Buffer(pub Vec<u8>);

impl Write for Buffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Field {
        let sites = SiteSet::new(vec![[0.5, 1.0], [2.0, 3.25]]).unwrap();
        Field::new(vec![1.0, 2.5, 0.125, 1e-300], 2, sites, Scale::Raw).unwrap()
    }

    #[test]
    fn field_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let f = tiny();
        write_field(&p, &f).unwrap();
        let g = read_field(&p, Scale::Raw).unwrap();
        assert_eq!(f, g);
        assert_eq!(field_to_csv(&g), read_string(&p).unwrap());
    }

    #[test]
    fn rows_may_come_in_any_site_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        write_bytes(&p, b"t,site_id,x,y,value\n0,7,0,0,1\n0,3,1,1,2\n1,3,1,1,4\n1,7,0,0,3\n").unwrap();
        let f = read_field(&p, Scale::Raw).unwrap();
        assert_eq!(f.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn field_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let cases: [(&[u8], usize); 4] = [
            (b"t,site,x,y,value\n0,0,0,0,1\n", 1),
            (b"t,site_id,x,y,value\n0,0,0,0,1\n0,1,1,1,oops\n", 3),
            (b"t,site_id,x,y,value\n0,0,0,0,1\n1,5,0,0,1\n", 3),
            (b"t,site_id,x,y,value\n0,0,0,0,1\n2,0,0,0,1\n", 3),
        ];
        for (body, line) in cases {
            write_bytes(&p, body).unwrap();
            match read_field(&p, Scale::Raw) {
                Err(Error::Parse { line: l, path, .. }) => {
                    assert_eq!(l, line, "{}", String::from_utf8_lossy(body));
                    assert_eq!(path, p);
                }
                other => panic!("{other:?}"),
            }
        }
        write_bytes(&p, b"t,site_id,x,y,value\n0,0,0,0,1\n0,1,1,1,1\n1,0,0,0,1\n").unwrap();
        assert!(matches!(read_field(&p, Scale::Raw), Err(Error::Parse { .. })));
        assert!(matches!(read_field(&dir.path().join("missing.csv"), Scale::Raw), Err(Error::Io { .. })));
    }

    #[test]
    fn json_unknown_keys_report_line() {
        #[derive(Debug, Deserialize)]
        #[serde(deny_unknown_fields)]
        #[allow(dead_code)]
        struct C {
            a: u32,
        }
        let p = Path::new("c.json");
        assert_eq!(from_json_str::<C>(p, "{\"a\": 1}").unwrap().a, 1);
        match from_json_str::<C>(p, "{\n\"a\": 1,\n\"b\": 2}") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("unknown field"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_hash_follows_config() {
        let a = Manifest::new("x", Some(1), serde_json::json!({"k": 1}));
        let b = Manifest::new("x", Some(1), serde_json::json!({"k": 2}));
        assert_ne!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256, Manifest::new("x", Some(1), serde_json::json!({"k": 1})).config_sha256);
    }

    #[test]
    fn margin_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MarginRow {
            site_id: 0,
            mu: 0.1,
            sigma: 1.2,
            xi: -0.2,
            beta: 6.1,
            gof_stat: 14.0,
            p_value: 0.6,
        }];
        write_rows(&p, &rows).unwrap();
        assert!(read_string(&p).unwrap().starts_with("site_id,mu,sigma,xi,beta,gof_stat,p_value\n"));
        assert_eq!(read_rows::<MarginRow>(&p).unwrap(), rows);
    }
}
