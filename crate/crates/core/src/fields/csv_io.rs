//! Flat CSV form of a field pair.
//!
//! ```text
//! # fbsde-field horizon=1 time_steps=64 m=1 d=1 out_of_box=clamp axes=-2:2:64
//! t_index,x_index_0,u_0,v_0_0
//! 0,0,-2,0
//! ...
//! ```

use std::io::{BufRead, Write};

use super::{Axis, DecouplingFieldPair, Lattice, OutOfBox};
use crate::error::{FbsdeError, Result};

const MAGIC: &str = "# fbsde-field";

/// Shortest round-trip decimal, switching to exponent form for extreme magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| FbsdeError::Format(format!("cannot parse {what} from `{s}`")))
}

impl Lattice {
    pub(crate) fn metadata(&self) -> String {
        let axes: Vec<String> = self
            .axes()
            .iter()
            .map(|a| format!("{}:{}:{}", fmt_f64(a.min), fmt_f64(a.max), a.nodes))
            .collect();
        format!(
            "horizon={} time_steps={} out_of_box={} axes={}",
            fmt_f64(self.horizon()),
            self.time_steps(),
            self.out_of_box().as_str(),
            axes.join(";")
        )
    }
}

pub(crate) fn metadata_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| FbsdeError::Format(format!("metadata line lacks `{key}`")))
}

pub(crate) fn parse_lattice(line: &str) -> Result<Lattice> {
    let horizon = parse_f64(metadata_value(line, "horizon")?, "horizon")?;
    let time_steps: usize = metadata_value(line, "time_steps")?
        .parse()
        .map_err(|_| FbsdeError::Format("bad time_steps".into()))?;
    let rule = metadata_value(line, "out_of_box")?;
    let rule = OutOfBox::parse(rule)
        .ok_or_else(|| FbsdeError::Format(format!("unknown out_of_box rule `{rule}`")))?;
    let axes = metadata_value(line, "axes")?
        .split(';')
        .map(|spec| {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(FbsdeError::Format(format!("bad axis `{spec}`")));
            }
            Ok(Axis {
                min: parse_f64(parts[0], "axis min")?,
                max: parse_f64(parts[1], "axis max")?,
                nodes: parts[2]
                    .parse()
                    .map_err(|_| FbsdeError::Format(format!("bad node count in `{spec}`")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Lattice::new(horizon, time_steps, axes)?.with_out_of_box(rule))
}

impl DecouplingFieldPair {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let lat = self.lattice();
        let (m, d) = (self.m(), self.d());
        writeln!(w, "{MAGIC} {} m={m} d={d}", lat.metadata())?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t_index".to_string()];
        header.extend((0..lat.dim()).map(|a| format!("x_index_{a}")));
        header.extend((0..m).map(|r| format!("u_{r}")));
        header.extend((0..m).flat_map(|r| (0..d).map(move |c| format!("v_{r}_{c}"))));
        out.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..=lat.time_steps() {
            for j in 0..lat.space_len() {
                row.clear();
                row.push(i.to_string());
                row.extend(lat.multi_index(j).iter().map(|k| k.to_string()));
                row.extend(self.u_node(i, j).iter().map(|v| fmt_f64(*v)));
                row.extend(self.v_node(i, j).iter().map(|v| fmt_f64(*v)));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let meta = first
            .trim_end()
            .strip_prefix(MAGIC)
            .ok_or_else(|| FbsdeError::Format("missing field metadata line".into()))?;
        let lattice = parse_lattice(meta)?;
        let m: usize = metadata_value(meta, "m")?
            .parse()
            .map_err(|_| FbsdeError::Format("bad m".into()))?;
        let d: usize = metadata_value(meta, "d")?
            .parse()
            .map_err(|_| FbsdeError::Format("bad d".into()))?;
        let l = lattice.dim();
        let s = lattice.space_len();
        let slots = (lattice.time_steps() + 1) * s;
        let mut u = vec![f64::NAN; slots * m];
        let mut v = vec![f64::NAN; slots * m * d];
        let mut seen = vec![false; slots];
        let mut reader = csv::Reader::from_reader(r);
        let width = 1 + l + m + m * d;
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(FbsdeError::Format(format!(
                    "row has {} fields, expected {width}",
                    rec.len()
                )));
            }
            let idx = |k: usize| -> Result<usize> {
                rec[k]
                    .parse()
                    .map_err(|_| FbsdeError::Format(format!("bad index `{}`", &rec[k])))
            };
            let i = idx(0)?;
            let mut j = 0;
            for a in 0..l {
                let k = idx(1 + a)?;
                if k >= lattice.axes()[a].nodes {
                    return Err(FbsdeError::Format(format!("x_index_{a} = {k} out of range")));
                }
                j += k * lattice.strides()[a];
            }
            if i > lattice.time_steps() {
                return Err(FbsdeError::Format(format!("t_index {i} out of range")));
            }
            let slot = i * s + j;
            seen[slot] = true;
            for c in 0..m {
                u[slot * m + c] = parse_f64(&rec[1 + l + c], "u")?;
            }
            for c in 0..m * d {
                v[slot * m * d + c] = parse_f64(&rec[1 + l + m + c], "v")?;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(FbsdeError::Format(format!("node slot {k} missing from file")));
        }
        DecouplingFieldPair::new(lattice, m, d, u, v)
    }
}
