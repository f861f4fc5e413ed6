//! CSV and manifest files.
//!
//! Schedules: `pid,act,start,end` with integer minutes, one row per episode.
//! Labels: `pid,<var1>,<var2>,...` with category names. Either file may open
//! with a `# config_hash=<hex>` comment line.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Episode, LabelSchema, LabelVar, LabelVector, RawSchedule};
use crate::error::{Error, Result};

const HASH_PREFIX: &str = "# config_hash=";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Config hash from the leading comment line, if any.
pub fn read_hash(path: &Path) -> Result<Option<String>> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(HASH_PREFIX))
        .map(|h| h.trim().to_string()))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

/// CSV writer that stamps the optional config hash first.
pub fn csv_writer(path: &Path, hash: Option<&str>) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(h) = hash {
        writeln!(file, "{HASH_PREFIX}{h}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

pub fn read_schedules(path: &Path) -> Result<Vec<RawSchedule>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let expected = ["pid", "act", "start", "end"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(path, "schedule header must be `pid,act,start,end`"));
    }
    let mut out: Vec<RawSchedule> = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let minutes = |i: usize| -> Result<u32> {
            field(i)
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: bad minute value `{}`", line + 1, field(i))))
        };
        let pid = field(0);
        let ep = Episode::new(field(1), minutes(2)?, minutes(3)?);
        match out.last_mut() {
            Some(s) if s.pid == pid => s.episodes.push(ep),
            _ => {
                if !seen.insert(pid.to_string()) {
                    return Err(Error::parse(path, format!("episodes of `{pid}` are not contiguous")));
                }
                out.push(RawSchedule::new(pid, vec![ep]));
            }
        }
    }
    Ok(out)
}

pub fn write_schedules(path: &Path, schedules: &[RawSchedule], hash: Option<&str>) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    let err = |e| Error::csv(path, e);
    w.write_record(["pid", "act", "start", "end"]).map_err(err)?;
    for s in schedules {
        for ep in &s.episodes {
            w.write_record([s.pid.as_str(), ep.act.as_str(), &ep.start.to_string(), &ep.end.to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads labels. Without a schema, variables come from the header and
/// categories are sorted by name.
pub fn read_labels(
    path: &Path,
    schema: Option<&LabelSchema>,
) -> Result<(LabelSchema, Vec<(String, LabelVector)>)> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.get(0) != Some("pid") || headers.len() < 2 {
        return Err(Error::parse(path, "label header must be `pid,<var1>,...`"));
    }
    let cols: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let rows: Vec<(String, Vec<String>)> = rdr
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::csv(path, e))?;
            Ok((
                r.get(0).unwrap_or_default().to_string(),
                r.iter().skip(1).map(str::to_string).collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let schema = match schema {
        Some(s) => s.clone(),
        None => LabelSchema::new(
            cols.iter()
                .enumerate()
                .map(|(j, name)| {
                    let cats: BTreeSet<&str> = rows.iter().map(|(_, v)| v[j].as_str()).collect();
                    LabelVar::new(name.clone(), cats)
                })
                .collect(),
        )?,
    };
    // column position for each schema variable
    let pos = schema
        .vars
        .iter()
        .map(|v| {
            cols.iter().position(|c| *c == v.name).ok_or_else(|| {
                Error::SchemaMismatch(format!("{}: missing label column `{}`", path.display(), v.name))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = rows
        .into_iter()
        .map(|(pid, vals)| {
            let names: Vec<&str> = pos.iter().map(|&p| vals[p].as_str()).collect();
            Ok((pid, schema.vector_from_names(&names)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((schema, out))
}

pub fn write_labels(
    path: &Path,
    schema: &LabelSchema,
    labels: &[(String, LabelVector)],
    hash: Option<&str>,
) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    let err = |e| Error::csv(path, e);
    let mut header = vec!["pid"];
    header.extend(schema.vars.iter().map(|v| v.name.as_str()));
    w.write_record(&header).map_err(err)?;
    for (pid, v) in labels {
        let mut rec = vec![pid.as_str()];
        rec.extend(schema.names_of(v));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairs schedules with labels by pid, keeping schedule order. Schedules
/// without labels are an error; unused label rows are ignored.
pub fn join_by_pid(
    schedules: Vec<RawSchedule>,
    labels: Vec<(String, LabelVector)>,
) -> Result<Vec<(RawSchedule, LabelVector)>> {
    let mut by_pid: HashMap<String, LabelVector> = labels.into_iter().collect();
    schedules
        .into_iter()
        .map(|s| {
            let l = by_pid
                .remove(&s.pid)
                .ok_or_else(|| Error::SchemaMismatch(format!("no labels for pid `{}`", s.pid)))?;
            Ok((s, l))
        })
        .collect()
}
