//! Small CSV helpers: fixed headers, numeric fields, line-accurate errors.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) fn write(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    w.write_record(header).map_err(Error::csv(path))?;
    for row in rows {
        w.write_record(&row).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// All records of `path`, whose header must equal `header`.
pub(crate) fn read(path: &Path, header: &[String]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let found = r.headers().map_err(Error::csv(path))?;
    if found.iter().ne(header.iter().map(String::as_str)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{}`", header.join(",")),
        });
    }
    r.records().map(|rec| rec.map_err(Error::csv(path))).collect()
}

pub(crate) fn field<T: FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line() as usize);
    let raw = rec.get(i).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        line,
        msg: format!("missing column {}", i + 1),
    })?;
    raw.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse `{raw}`"),
    })
}

pub(crate) fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `x1..xd,v1..vd`
pub(crate) fn state_columns(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).chain((1..=d).map(|i| format!("v{i}"))).collect()
}

pub(crate) fn num(v: f64) -> String {
    v.to_string()
}
