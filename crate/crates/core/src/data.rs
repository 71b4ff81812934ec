//! Grouped space-time observations and the row-deleted basis matrix.

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::sparse::CsrMatrix;
use faer::Mat;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::ops::Range;

/// One observation as read from a file, before canonical ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub loc: usize,
    pub time: usize,
    pub group: String,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// A validated observation; `group` is a 0-based index into the group list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub loc: usize,
    pub time: usize,
    pub group: usize,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    locations: Vec<Point>,
    times: Vec<f64>,
    records: Vec<Record>,
    group_labels: Vec<String>,
    group_ranges: Vec<Range<usize>>,
    q: usize,
    p: usize,
}

impl ObservationSet {
    /// Validates the records and puts them in canonical order.
    ///
    /// Groups are numbered by first appearance when records are scanned in
    /// (time, location) order; records are then sorted by (group, time,
    /// location). Both steps depend only on the set of records, never on
    /// the input order.
    pub fn new(locations: Vec<Point>, times: Vec<f64>, raw: Vec<RawRecord>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidObservations("no records".into()));
        }
        if locations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidObservations("non-finite location coordinate".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidObservations("non-finite time".into()));
        }
        let q = raw[0].x.len();
        let p = raw[0].z.len();
        let mut seen = HashSet::with_capacity(raw.len());
        for r in &raw {
            if r.loc >= locations.len() {
                return Err(Error::InvalidObservations(format!("unknown location index {}", r.loc)));
            }
            if r.time >= times.len() {
                return Err(Error::InvalidObservations(format!("unknown time index {}", r.time)));
            }
            if r.x.len() != q || r.z.len() != p {
                return Err(Error::InvalidObservations("records disagree on the number of covariates".into()));
            }
            if !r.y.is_finite() || r.x.iter().chain(&r.z).any(|v| !v.is_finite()) {
                return Err(Error::InvalidObservations(format!(
                    "non-finite value at location {}, time {}",
                    r.loc, r.time
                )));
            }
            if !seen.insert((r.loc, r.time)) {
                return Err(Error::DuplicateObservation { loc: r.loc, time: r.time });
            }
        }

        let mut by_site: Vec<&RawRecord> = raw.iter().collect();
        by_site.sort_by_key(|r| (r.time, r.loc));
        let mut label_index: HashMap<&str, usize> = HashMap::new();
        let mut group_labels = Vec::new();
        for r in &by_site {
            if !label_index.contains_key(r.group.as_str()) {
                label_index.insert(r.group.as_str(), group_labels.len());
                group_labels.push(r.group.clone());
            }
        }
        let mut records: Vec<Record> = by_site
            .iter()
            .map(|r| Record {
                loc: r.loc,
                time: r.time,
                group: label_index[r.group.as_str()],
                y: r.y,
                x: r.x.clone(),
                z: r.z.clone(),
            })
            .collect();
        records.sort_by_key(|r| (r.group, r.time, r.loc));

        let mut group_ranges = Vec::with_capacity(group_labels.len());
        let mut start = 0;
        for k in 0..group_labels.len() {
            let end = start + records[start..].iter().take_while(|r| r.group == k).count();
            group_ranges.push(start..end);
            start = end;
        }

        let set = Self {
            locations,
            times,
            records,
            group_labels,
            group_ranges,
            q,
            p,
        };
        set.check_fixed_design()?;
        Ok(set)
    }

    fn check_fixed_design(&self) -> Result<()> {
        let q = self.q;
        if q == 0 {
            return Ok(());
        }
        for j in 0..q {
            let first = self.records[0].x[j];
            if self.records.iter().all(|r| r.x[j] == first) {
                return Err(Error::InvalidObservations(format!(
                    "covariate x{} is constant; the intercept belongs to the field",
                    j + 1
                )));
            }
        }
        let rank = numerical_rank(&self.x_matrix());
        if rank < q {
            return Err(Error::RankDeficientDesign { rank, q });
        }
        Ok(())
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn n_obs(&self) -> usize {
        self.records.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.q
    }

    pub fn n_random(&self) -> usize {
        self.p
    }

    /// Record indices belonging to group `k`.
    pub fn group_range(&self, k: usize) -> Range<usize> {
        self.group_ranges[k].clone()
    }

    pub fn y(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Stacked fixed-effects design, `|O| x q`.
    pub fn x_matrix(&self) -> Mat<f64> {
        Mat::from_fn(self.n_obs(), self.q, |i, j| self.records[i].x[j])
    }

    /// Random-effects design of group `k`, `|O_k| x p`.
    pub fn z_block(&self, k: usize) -> Mat<f64> {
        let range = self.group_range(k);
        Mat::from_fn(range.len(), self.p, |i, j| self.records[range.start + i].z[j])
    }

    pub fn to_raw(&self) -> Vec<RawRecord> {
        self.records
            .iter()
            .map(|r| RawRecord {
                loc: r.loc,
                time: r.time,
                group: self.group_labels[r.group].clone(),
                y: r.y,
                x: r.x.clone(),
                z: r.z.clone(),
            })
            .collect()
    }

    /// Builds a fresh set without the records for which `drop` is true.
    pub fn remove_records<F: Fn(&Record) -> bool>(&self, drop: F) -> Result<Self> {
        let kept: Vec<RawRecord> = self
            .records
            .iter()
            .zip(self.to_raw())
            .filter(|(r, _)| !drop(r))
            .map(|(_, raw)| raw)
            .collect();
        Self::new(self.locations.clone(), self.times.clone(), kept)
    }

    /// Same records with responses replaced (in canonical order).
    pub fn with_response(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::Dimension(format!("{} responses for {} records", y.len(), self.n_obs())));
        }
        let mut out = self.clone();
        for (r, &v) in out.records.iter_mut().zip(y) {
            r.y = v;
        }
        Ok(out)
    }

    /// Reads the three CSV files: observations
    /// (`loc_id,time_id,group,y,x1..xq,z1..zp`), locations (`loc_id,x,y`)
    /// and times (`time_id,t`).
    pub fn from_csv<R1: Read, R2: Read, R3: Read>(observations: R1, locations: R2, times: R3) -> Result<Self> {
        let locations = read_indexed(locations, "loc_id", &["x", "y"])?
            .into_iter()
            .map(|v| [v[0], v[1]])
            .collect();
        let times = read_indexed(times, "time_id", &["t"])?.into_iter().map(|v| v[0]).collect();

        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(observations);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidObservations(format!("missing column {name}")))
        };
        let (c_loc, c_time, c_group, c_y) = (col("loc_id")?, col("time_id")?, col("group")?, col("y")?);
        let x_cols = numbered_columns(&headers, 'x')?;
        let z_cols = numbered_columns(&headers, 'z')?;

        let mut raw = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let int = |c: usize| {
                field(c).parse::<usize>().map_err(|_| {
                    Error::InvalidObservations(format!("row {}: bad index {:?}", line + 2, field(c)))
                })
            };
            let num = |c: usize| {
                field(c).parse::<f64>().map_err(|_| {
                    Error::InvalidObservations(format!("row {}: bad number {:?}", line + 2, field(c)))
                })
            };
            raw.push(RawRecord {
                loc: int(c_loc)?,
                time: int(c_time)?,
                group: field(c_group).to_string(),
                y: num(c_y)?,
                x: x_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
                z: z_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            });
        }
        Self::new(locations, times, raw)
    }

    /// Writes the three CSV files read by [`from_csv`](Self::from_csv).
    pub fn write_csv<W1: Write, W2: Write, W3: Write>(&self, observations: W1, locations: W2, times: W3) -> Result<()> {
        let mut w = csv::Writer::from_writer(locations);
        w.write_record(["loc_id", "x", "y"])?;
        for (i, p) in self.locations.iter().enumerate() {
            w.write_record([i.to_string(), fmt(p[0]), fmt(p[1])])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(times);
        w.write_record(["time_id", "t"])?;
        for (j, t) in self.times.iter().enumerate() {
            w.write_record([j.to_string(), fmt(*t)])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(observations);
        let mut header: Vec<String> = ["loc_id", "time_id", "group", "y"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=self.q).map(|j| format!("x{j}")));
        header.extend((1..=self.p).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.loc.to_string(), r.time.to_string(), self.group_labels[r.group].clone(), fmt(r.y)];
            row.extend(r.x.iter().chain(&r.z).map(|v| fmt(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn numbered_columns(headers: &csv::StringRecord, prefix: char) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            let rest = h.strip_prefix(prefix)?;
            rest.parse::<usize>().ok().map(|k| (k, c))
        })
        .collect();
    found.sort();
    for (expect, &(k, _)) in (1..).zip(&found) {
        if k != expect {
            return Err(Error::InvalidObservations(format!("covariate columns {prefix}1..{prefix}n are not contiguous")));
        }
    }
    Ok(found.into_iter().map(|(_, c)| c).collect())
}

/// Reads `id,v1,..` rows and returns values indexed by id, which must cover
/// `0..n` exactly once.
fn read_indexed<R: Read>(reader: R, id: &str, cols: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidObservations(format!("missing column {name}")))
    };
    let c_id = pos(id)?;
    let c_vals: Vec<usize> = cols.iter().map(|c| pos(c)).collect::<Result<_>>()?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |s: &str| Error::InvalidObservations(format!("bad value {s:?} in {id} file"));
        let i: usize = rec.get(c_id).unwrap_or("").parse().map_err(|_| bad(rec.get(c_id).unwrap_or("")))?;
        let vals = c_vals
            .iter()
            .map(|&c| {
                let s = rec.get(c).unwrap_or("");
                s.parse::<f64>().map_err(|_| bad(s))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((i, vals));
    }
    rows.sort_by_key(|r| r.0);
    for (expect, (i, _)) in rows.iter().enumerate() {
        if *i != expect {
            return Err(Error::InvalidObservations(format!("{id} values must be 0..n without gaps or repeats")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

fn numerical_rank(x: &Mat<f64>) -> usize {
    if x.ncols() == 0 {
        return 0;
    }
    let sv = x.singular_values().expect("singular values of a finite matrix");
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let tol = top * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// `B` with the row of record `(i, j)` equal to `Φ_j ⊗ Ψ_i`, so column
/// `l + N r` carries `ψ_l(p_i) φ_r(t_j)`.
pub fn build_basis_matrix(obs: &ObservationSet, psi: &CsrMatrix, phi: &CsrMatrix) -> Result<CsrMatrix> {
    if psi.nrows() != obs.locations().len() || phi.nrows() != obs.times().len() {
        return Err(Error::Dimension(format!(
            "Psi has {} rows for {} locations, Phi has {} rows for {} times",
            psi.nrows(),
            obs.locations().len(),
            phi.nrows(),
            obs.times().len()
        )));
    }
    let n = psi.ncols();
    let mut trip = Vec::with_capacity(obs.n_obs() * 12);
    for (row, r) in obs.records().iter().enumerate() {
        let (s_cols, s_vals) = psi.row(r.loc);
        let (t_cols, t_vals) = phi.row(r.time);
        for (&tc, &tv) in t_cols.iter().zip(t_vals) {
            for (&sc, &sv) in s_cols.iter().zip(s_vals) {
                trip.push((row, sc + n * tc, sv * tv));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(obs.n_obs(), n * phi.ncols(), &trip))
}
