//! Trajectory CSV: `traj_id, t, s, x_0..x_{d-1}, a, y, r`, one row per epoch.

use std::io::{Read, Write};

use super::{Action, Dataset, Step, Trajectory};
use crate::error::{invalid, Result};

pub const TRAJECTORY_ID_COLUMN: &str = "traj_id";

pub fn header(dim: usize) -> Vec<String> {
    let mut cols = vec![TRAJECTORY_ID_COLUMN.to_string(), "t".into(), "s".into()];
    cols.extend((0..dim).map(|j| format!("x_{j}")));
    cols.extend(["a".into(), "y".into(), "r".into()]);
    cols
}

pub fn write_trajectories<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(data.dim))?;
    for (i, tr) in data.trajectories.iter().enumerate() {
        for (t, st) in tr.steps.iter().enumerate() {
            let mut row = vec![i.to_string(), t.to_string(), st.s.to_string()];
            row.extend(st.x.iter().map(f64::to_string));
            row.push(st.a.index().to_string());
            row.push((st.y as u8).to_string());
            row.push(st.r.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field.trim().parse().map_err(|_| invalid(format!("line {line}: cannot parse {field:?}")))
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(reader);
    let cols = r.headers()?.clone();
    let dim = cols.len().checked_sub(6).ok_or_else(|| invalid("too few columns"))?;
    if cols.iter().collect::<Vec<_>>() != header(dim) {
        return Err(invalid(format!("unexpected header {cols:?}")));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let id: usize = parse(&rec[0], line)?;
        let t: usize = parse(&rec[1], line)?;
        if id != trajectories.len() && id + 1 != trajectories.len() {
            return Err(invalid(format!("line {line}: trajectory ids must be consecutive")));
        }
        if id == trajectories.len() {
            trajectories.push(Trajectory::default());
        }
        let steps = &mut trajectories[id].steps;
        if t != steps.len() {
            return Err(invalid(format!("line {line}: expected t = {}", steps.len())));
        }
        let x = (0..dim).map(|j| parse(&rec[3 + j], line)).collect::<Result<Vec<f64>>>()?;
        let y: u8 = parse(&rec[4 + dim], line)?;
        if y > 1 {
            return Err(invalid(format!("line {line}: outcome must be 0 or 1")));
        }
        steps.push(Step {
            s: parse(&rec[2], line)?,
            x,
            a: Action::from_index(parse(&rec[3 + dim], line)?)?,
            y: y == 1,
            r: parse(&rec[5 + dim], line)?,
        });
    }
    Dataset::new(trajectories)
}
