//! CSV and JSON interchange.
//!
//! Comparisons: `comparison_id,rank,object_id,x1..xd`, one row per object.
//! Object ids are 1-based. `rank` is 1 for the winner; it may be left empty
//! for every row of a comparison whose outcome is unknown. Graphs:
//! `edge_id,object_id`. Parameters: `{"u": [..], "v": [..], "meta": {..}}`.
//!
//! Row numbers in errors are file line numbers, header included.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::model::{Comparison, Dataset, Params};

fn data_err<T>(row: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Data { row, msg: msg.into() })
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn parse_id(s: &str, row: usize, what: &str) -> Result<usize> {
    match s.trim().parse::<usize>() {
        Ok(0) => data_err(row, format!("{what} must be 1-based, got 0")),
        Ok(v) => Ok(v),
        Err(_) => data_err(row, format!("{what} '{s}' is not a positive integer")),
    }
}

struct PendingRow {
    line: usize,
    rank: Option<usize>,
    object: usize,
    x: Vec<f64>,
}

/// Reads comparisons. `n` defaults to the largest object id; `expect_d`
/// checks the number of covariate columns.
pub fn read_comparisons<R: Read>(reader: R, n: Option<usize>, expect_d: Option<usize>) -> Result<Dataset> {
    read_comparisons_with_ids(reader, n, expect_d).map(|(data, _)| data)
}

/// As [`read_comparisons`], also returning each comparison's id in file order.
pub fn read_comparisons_with_ids<R: Read>(
    reader: R,
    n: Option<usize>,
    expect_d: Option<usize>,
) -> Result<(Dataset, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[..3] != ["comparison_id", "rank", "object_id"] {
        return data_err(1, "header must start with comparison_id,rank,object_id");
    }
    let d = names.len() - 3;
    for (k, name) in names[3..].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return data_err(1, format!("covariate column {} must be named x{}, found '{name}'", k + 1, k + 1));
        }
    }
    if let Some(want) = expect_d {
        if want != d {
            return data_err(1, format!("expected {want} covariate columns, header has {d}"));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<PendingRow>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec[0].to_string();
        if id.is_empty() {
            return data_err(line, "empty comparison_id");
        }
        let rank = if rec[1].is_empty() { None } else { Some(parse_id(&rec[1], line, "rank")?) };
        let object = parse_id(&rec[2], line, "object_id")?;
        let mut x = Vec::with_capacity(d);
        for k in 0..d {
            let v: f64 = rec[3 + k]
                .parse()
                .map_err(|_| Error::Data { row: line, msg: format!("x{} '{}' is not a number", k + 1, &rec[3 + k]) })?;
            if !v.is_finite() {
                return data_err(line, format!("x{} is not finite", k + 1));
            }
            x.push(v);
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Vec::new()
        });
        entry.push(PendingRow { line, rank, object, x });
    }
    if order.is_empty() {
        return data_err(2, "no comparison rows");
    }

    let max_id = groups.values().flatten().map(|r| r.object).max().unwrap_or(0);
    let n = match n {
        Some(n) if n < max_id => return data_err(1, format!("object id {max_id} exceeds n = {n}")),
        Some(n) => n,
        None => max_id,
    };

    let mut comps = Vec::with_capacity(order.len());
    for id in &order {
        let rows = &groups[id];
        let first = rows[0].line;
        let m = rows.len();
        if m < 2 {
            return data_err(first, format!("comparison '{id}' has a single object; need at least 2"));
        }
        let mut seen = vec![false; n];
        for r in rows {
            if std::mem::replace(&mut seen[r.object - 1], true) {
                return data_err(r.line, format!("object {} appears twice in comparison '{id}'", r.object));
            }
        }
        let ranked = rows.iter().filter(|r| r.rank.is_some()).count();
        if ranked != 0 && ranked != m {
            return data_err(first, format!("comparison '{id}' mixes ranked and unranked rows"));
        }
        let objects: Vec<usize> = rows.iter().map(|r| r.object - 1).collect();
        let x = DMatrix::from_fn(m, d, |j, k| rows[j].x[k]);
        let ranking = if ranked == m {
            let mut slot: Vec<Option<usize>> = vec![None; m];
            for r in rows {
                let k = r.rank.expect("all ranked");
                if k > m {
                    return data_err(r.line, format!("rank {k} exceeds comparison size {m}"));
                }
                if slot[k - 1].replace(r.object - 1).is_some() {
                    return data_err(r.line, format!("rank {k} repeated in comparison '{id}' (ties are not supported)"));
                }
            }
            Some(slot.into_iter().map(|s| s.expect("ranks form a permutation")).collect())
        } else {
            None
        };
        let c = Comparison::new(objects, x, ranking).map_err(|e| Error::Data { row: first, msg: e.to_string() })?;
        comps.push(c);
    }
    Ok((Dataset::new(n, d, comps)?, order))
}

/// Writes comparisons with ids `1..=N`; unranked comparisons get empty ranks.
pub fn write_comparisons<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["comparison_id".to_string(), "rank".into(), "object_id".into()];
    header.extend((1..=data.d()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (i, c) in data.comparisons().iter().enumerate() {
        let ranks = c.rank_of_position();
        for (j, &obj) in c.edge().iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.push(ranks.as_ref().map_or(String::new(), |r| (r[j] + 1).to_string()));
            rec.push((obj + 1).to_string());
            rec.extend((0..data.d()).map(|k| c.covariates()[(j, k)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph<R: Read>(reader: R, n: Option<usize>) -> Result<Hypergraph> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["edge_id", "object_id"] {
        return data_err(1, "header must be edge_id,object_id");
    }
    let mut order: Vec<String> = Vec::new();
    let mut edges: HashMap<String, Vec<usize>> = HashMap::new();
    let mut max_id = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let obj = parse_id(&rec[1], line, "object_id")?;
        max_id = max_id.max(obj);
        let e = edges.entry(rec[0].to_string()).or_insert_with(|| {
            order.push(rec[0].to_string());
            Vec::new()
        });
        if e.contains(&(obj - 1)) {
            return data_err(line, format!("object {obj} repeated in edge '{}'", &rec[0]));
        }
        e.push(obj - 1);
    }
    let n = n.unwrap_or(max_id);
    if max_id > n {
        return data_err(1, format!("object id {max_id} exceeds n = {n}"));
    }
    Hypergraph::new(n, order.iter().map(|id| edges[id].clone()).collect())
}

pub fn write_graph<W: Write>(writer: W, g: &Hypergraph) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["edge_id", "object_id"])?;
    for (i, e) in g.edges().iter().enumerate() {
        for &v in e {
            w.write_record([(i + 1).to_string(), (v + 1).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl ParamsFile {
    pub fn params(&self) -> Params {
        Params::new(self.u.clone(), self.v.clone())
    }
}

pub fn read_params<R: Read>(reader: R) -> Result<ParamsFile> {
    let p: ParamsFile = serde_json::from_reader(reader)?;
    if p.u.iter().chain(&p.v).any(|x| !x.is_finite()) {
        return Err(Error::Input("parameter file holds non-finite values".into()));
    }
    Ok(p)
}

pub fn write_params<W: Write>(writer: W, theta: &Params, meta: serde_json::Value) -> Result<()> {
    let file = ParamsFile { u: theta.u.iter().copied().collect(), v: theta.v.iter().copied().collect(), meta };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "comparison_id,rank,object_id,x1\n\
                       a,2,1,0.5\n\
                       a,1,2,-1\n\
                       b,1,1,0\n\
                       b,3,3,1\n\
                       b,2,2,2\n";

    #[test]
    fn reads_rankings_and_covariates() {
        let data = read_comparisons(TOY.as_bytes(), None, Some(1)).unwrap();
        assert_eq!((data.n(), data.d(), data.len()), (3, 1, 2));
        assert_eq!(data.comparisons()[0].ranking().unwrap(), vec![1, 0]);
        assert_eq!(data.comparisons()[1].ranking().unwrap(), vec![0, 1, 2]);
        let c = &data.comparisons()[1];
        let pos = c.edge().iter().position(|&o| o == 2).unwrap();
        assert_eq!(c.covariates()[(pos, 0)], 1.0);
    }

    #[test]
    fn round_trip() {
        let data = read_comparisons(TOY.as_bytes(), None, None).unwrap();
        let mut buf = Vec::new();
        write_comparisons(&mut buf, &data).unwrap();
        let again = read_comparisons(buf.as_slice(), None, None).unwrap();
        for (a, b) in data.comparisons().iter().zip(again.comparisons()) {
            assert_eq!(a.edge(), b.edge());
            assert_eq!(a.ranking(), b.ranking());
            assert_eq!(a.covariates(), b.covariates());
        }
    }

    fn row_of(csv: &str) -> usize {
        match read_comparisons(csv.as_bytes(), None, None) {
            Err(Error::Data { row, .. }) => row,
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_rows() {
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,1\na,1,2\n"), 3);
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,1\nb,1,2\nb,2,3\n"), 2);
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,0\na,2,2\n"), 2);
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,1\na,2,1\n"), 3);
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,1\na,3,2\n"), 3);
        assert_eq!(row_of("comparison_id,rank,object_id\na,1,1\na,,2\n"), 2);
        assert_eq!(row_of("comparison_id,rank,object_id,x1\na,1,1,zz\na,2,2,1\n"), 2);
        assert_eq!(row_of("id,rank,object_id\na,1,1\n"), 1);
        assert_eq!(row_of("comparison_id,rank,object_id,x2\na,1,1,0\n"), 1);
    }

    #[test]
    fn unranked_comparisons() {
        let data = read_comparisons("comparison_id,rank,object_id\na,,1\na,,2\n".as_bytes(), Some(4), None).unwrap();
        assert_eq!(data.n(), 4);
        assert!(!data.has_outcomes());
    }

    #[test]
    fn graph_and_params_round_trip() {
        let g = Hypergraph::new(4, vec![vec![0, 1, 2], vec![2, 3]]).unwrap();
        let mut buf = Vec::new();
        write_graph(&mut buf, &g).unwrap();
        assert_eq!(read_graph(buf.as_slice(), None).unwrap(), g);

        let theta = Params::new(vec![0.5, -0.5], vec![1.25]);
        let mut buf = Vec::new();
        write_params(&mut buf, &theta, serde_json::json!({"converged": true})).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.params(), theta);
        assert_eq!(back.meta["converged"], true);
    }
}
