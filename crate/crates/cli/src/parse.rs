//! Parsers for the compact flag values: `PATH[:W]`, block lists and cells.

use std::collections::BTreeSet;
use std::path::PathBuf;

use bwla_core::eval::BlockGroup;
use bwla_core::{BlockId, Error, Result};

/// Splits `PATH:W` into a path and strength; a suffix that is not a number
/// stays part of the path.
pub fn adapter_ref(s: &str) -> Result<(PathBuf, f64)> {
    if s.is_empty() {
        return Err(Error::Config("empty adapter reference".into()));
    }
    match s.rsplit_once(':') {
        Some((path, w)) if !path.is_empty() => match w.parse::<f64>() {
            Ok(w) if w.is_finite() => Ok((PathBuf::from(path), w)),
            Ok(_) => Err(Error::Config(format!("adapter strength in '{s}' is not finite"))),
            Err(_) => Ok((PathBuf::from(s), 1.0)),
        },
        _ => Ok((PathBuf::from(s), 1.0)),
    }
}

/// `IN0,OUT3` or `upper,MID`: block ids and standard group names.
pub fn block_list(s: &str) -> Result<BTreeSet<BlockId>> {
    let mut out = BTreeSet::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        match item.parse::<BlockId>() {
            Ok(b) => {
                out.insert(b);
            }
            Err(_) => out.extend(BlockGroup::named(item)?.blocks),
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no blocks in '{s}'")));
    }
    Ok(out)
}

pub fn groups(s: &str) -> Result<Vec<BlockGroup>> {
    let groups = s
        .split(',')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(BlockGroup::parse)
        .collect::<Result<Vec<_>>>()?;
    if groups.is_empty() {
        return Err(Error::Config("no block groups given".into()));
    }
    Ok(groups)
}

/// `NAME=PATH[:W]+PATH[:W]`; `NAME=` is a cell without adapters.
pub fn cell(s: &str) -> Result<(String, Vec<(PathBuf, f64)>)> {
    let (name, rest) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("cell '{s}' must look like NAME=PATH[:W]+PATH[:W]")))?;
    if name.trim().is_empty() {
        return Err(Error::Config(format!("cell '{s}' has no name")));
    }
    let adapters = rest
        .split('+')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(adapter_ref)
        .collect::<Result<Vec<_>>>()?;
    Ok((name.trim().to_string(), adapters))
}
