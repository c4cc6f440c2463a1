use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use admissions_core::{Error, MarketParams, Result};
use serde::Serialize;

/// Outputs staged in memory and written only once the whole command has
/// succeeded, so a failing run leaves no partial files behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.files.push((name.to_string(), buf));
        Ok(())
    }

    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Which column of the market file holds the preferability parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightColumn {
    Gamma,
    Delta,
}

/// A market file: `school,gamma,q`, `school,delta,q`, or
/// `school,gamma_or_delta,q` where the flag decides the reading.
pub struct MarketFile {
    pub names: Vec<String>,
    pub params: MarketParams,
}

pub fn read_market(path: &Path, delta_flag: bool) -> Result<MarketFile> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let missing = |what: &str| Error::Data {
        line: 1,
        message: format!("market file needs a {what} column"),
    };
    let school = find("school").ok_or_else(|| missing("school"))?;
    let q = find("q").ok_or_else(|| missing("q"))?;
    let (weight, column) = match (find("gamma"), find("delta"), find("gamma_or_delta")) {
        (Some(i), None, None) if !delta_flag => (i, WeightColumn::Gamma),
        (None, Some(i), None) => (i, WeightColumn::Delta),
        (None, None, Some(i)) if delta_flag => (i, WeightColumn::Delta),
        (None, None, Some(i)) => (i, WeightColumn::Gamma),
        (Some(_), None, None) => {
            return Err(Error::Config(
                "--delta given but the market file has a gamma column".into(),
            ))
        }
        _ => return Err(missing("single gamma, delta or gamma_or_delta")),
    };

    let mut names = Vec::new();
    let mut weights = Vec::new();
    let mut caps = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize, what: &str| -> Result<f64> {
            let field = row.get(i).unwrap_or("");
            field.parse().map_err(|_| Error::Data {
                line,
                message: format!("{what}: cannot parse {field:?}"),
            })
        };
        names.push(row.get(school).unwrap_or("").to_string());
        weights.push(num(weight, "weight")?);
        caps.push(num(q, "q")?);
    }
    let params = match column {
        WeightColumn::Gamma => MarketParams::new(weights, caps)?,
        WeightColumn::Delta => MarketParams::from_delta(&weights, caps)?,
    };
    Ok(MarketFile { names, params })
}
