//! UCR text format: one instance per line, class label first, then the
//! values. Fields are tab, comma or whitespace separated (detected per line).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use privshape_core::eval::Dataset;
use privshape_core::TimeSeries;

use crate::error::{Error, Result};

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Labels may be written as floats (`1.0000000e+00`) as long as they are
/// non-negative integers.
fn parse_label(field: &str, line: usize) -> Result<u32> {
    let bad = || Error::Parse {
        line,
        msg: format!("label {field:?} is not a non-negative integer"),
    };
    if let Ok(v) = field.parse::<u32>() {
        return Ok(v);
    }
    let v: f64 = field.parse().map_err(|_| bad())?;
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(bad());
    }
    Ok(v as u32)
}

pub fn parse_ucr<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields = split_fields(line);
        let label = parse_label(fields[0], line_no)?;
        let values = fields[1..]
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("value {f:?} is not a number"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse {
                        line: line_no,
                        msg: format!("value {f:?} is not finite"),
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "instance has no values".into(),
            });
        }
        instances.push(TimeSeries::labelled(values, label));
    }
    if instances.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no instances in input".into(),
        });
    }
    Ok(Dataset::new(instances, None)?)
}

pub fn load_ucr(path: &Path) -> Result<Dataset> {
    parse_ucr(BufReader::new(File::open(path)?))
}

/// Tab-separated; values use the shortest round-tripping float form.
pub fn write_ucr<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for series in dataset.instances() {
        write!(out, "{}", series.label.unwrap_or(0))?;
        for v in &series.values {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
