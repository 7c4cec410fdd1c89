//! CSV and JSON formats, and track reconstruction from step/turn series.
//!
//! Track files have the header `id,x,y` with an optional `t_sec` column;
//! series files have `id,t,step,turn`; state files have `track_id,t,value`.
//! Residual files carry both variables in long form,
//! `track_id,t,variable,value`, with `NA` for the conditioning prefix.
//! Floats are written with 17 significant digits so values round-trip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::decode::{ResidualSeries, StateSequence};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, StepTurnSeries, Track};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Fixed 17-significant-digit formatting.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(field: &str, line: u64, name: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{name} '{field}' is not a number"),
    })
}

fn parse_usize(field: &str, line: u64, name: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        line,
        msg: format!("{name} '{field}' is not a non-negative integer"),
    })
}

/// Reads a CSV with the given leading columns; `optional` columns may follow.
/// Returns `(line, fields)` per data row.
fn read_rows<R: Read>(reader: R, required: &[&str], optional: &[&str]) -> Result<(Vec<String>, Vec<(u64, Vec<String>)>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() == 1 && header[0].is_empty() || header.is_empty() {
        return Err(Error::Structure("empty file".into()));
    }
    let ok_prefix = header.len() >= required.len()
        && header.iter().zip(required).all(|(h, r)| h == r)
        && header[required.len()..]
            .iter()
            .zip(optional)
            .all(|(h, o)| h == o)
        && header.len() <= required.len() + optional.len();
    if !ok_prefix {
        let mut want = required.join(",");
        if !optional.is_empty() {
            want.push_str(&format!("[,{}]", optional.join(",")));
        }
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header '{want}', found '{}'", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Structure("file has a header but no rows".into()));
    }
    Ok((header, rows))
}

/// Groups rows by their first field, in order of first appearance.
fn group_by_id<T>(rows: Vec<(String, T)>) -> Vec<(String, Vec<T>)> {
    let mut groups: Vec<(String, Vec<T>)> = Vec::new();
    for (id, v) in rows {
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, vs)) => vs.push(v),
            None => groups.push((id, vec![v])),
        }
    }
    groups
}

pub fn read_tracks_from<R: Read>(reader: R) -> Result<Vec<Track>> {
    let (header, rows) = read_rows(reader, &["id", "x", "y"], &["t_sec"])?;
    let timed = header.len() == 4;
    let mut parsed = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        let x = parse_f64(&f[1], line, "x")?;
        let y = parse_f64(&f[2], line, "y")?;
        let t = if timed { Some(parse_f64(&f[3], line, "t_sec")?) } else { None };
        parsed.push((f[0].clone(), (line, x, y, t)));
    }
    let mut tracks = Vec::new();
    for (id, pts) in group_by_id(parsed) {
        let mut rate = 1.0;
        if timed {
            for w in pts.windows(2) {
                if !(w[1].3 > w[0].3) {
                    return Err(Error::Parse {
                        line: w[1].0,
                        msg: format!("t_sec of track '{id}' is not increasing"),
                    });
                }
            }
            if pts.len() >= 2 {
                let span = pts[pts.len() - 1].3.unwrap_or(0.0) - pts[0].3.unwrap_or(0.0);
                rate = (pts.len() - 1) as f64 / span;
            }
        }
        tracks.push(Track::new(id, pts.iter().map(|p| (p.1, p.2)).collect(), rate));
    }
    Ok(tracks)
}

/// One track per distinct id, rows kept in file order.
pub fn read_tracks(path: impl AsRef<Path>) -> Result<Vec<Track>> {
    read_tracks_from(open(path.as_ref())?)
}

pub fn write_tracks_to<W: Write>(mut w: W, tracks: &[Track]) -> Result<()> {
    writeln!(w, "id,x,y")?;
    for t in tracks {
        for (x, y) in &t.locations {
            writeln!(w, "{},{},{}", t.id, fmt_f64(*x), fmt_f64(*y))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &[Track]) -> Result<()> {
    write_tracks_to(create(path.as_ref())?, tracks)
}

pub fn read_series_from<R: Read>(reader: R) -> Result<Vec<StepTurnSeries>> {
    let (_, rows) = read_rows(reader, &["id", "t", "step", "turn"], &[])?;
    let mut parsed = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        parse_usize(&f[1], line, "t")?;
        let step = parse_f64(&f[2], line, "step")?;
        let turn = parse_f64(&f[3], line, "turn")?;
        parsed.push((f[0].clone(), (line, step, turn)));
    }
    group_by_id(parsed)
        .into_iter()
        .map(|(id, v)| {
            let first_line = v[0].0;
            StepTurnSeries::new(id, v.iter().map(|r| r.1).collect(), v.iter().map(|r| r.2).collect())
                .map_err(|e| Error::Parse {
                    line: first_line,
                    msg: e.to_string(),
                })
        })
        .collect()
}

pub fn read_series(path: impl AsRef<Path>) -> Result<Vec<StepTurnSeries>> {
    read_series_from(open(path.as_ref())?)
}

pub fn write_series_to<W: Write>(mut w: W, series: &[StepTurnSeries]) -> Result<()> {
    writeln!(w, "id,t,step,turn")?;
    for s in series {
        for (i, (a, b)) in s.steps.iter().zip(&s.turns).enumerate() {
            writeln!(w, "{},{},{},{}", s.track_id, i + 1, fmt_f64(*a), fmt_f64(*b))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_series(path: impl AsRef<Path>, series: &[StepTurnSeries]) -> Result<()> {
    write_series_to(create(path.as_ref())?, series)
}

pub fn read_states_from<R: Read>(reader: R) -> Result<Vec<StateSequence>> {
    let (_, rows) = read_rows(reader, &["track_id", "t", "value"], &[])?;
    let mut parsed = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        parse_usize(&f[1], line, "t")?;
        let v = parse_usize(&f[2], line, "value")?;
        if v == 0 {
            return Err(Error::Parse {
                line,
                msg: "state labels start at 1".into(),
            });
        }
        parsed.push((f[0].clone(), v));
    }
    Ok(group_by_id(parsed)
        .into_iter()
        .map(|(track_id, states)| StateSequence { track_id, states })
        .collect())
}

pub fn read_states(path: impl AsRef<Path>) -> Result<Vec<StateSequence>> {
    read_states_from(open(path.as_ref())?)
}

pub fn write_states_to<W: Write>(mut w: W, seqs: &[StateSequence]) -> Result<()> {
    writeln!(w, "track_id,t,value")?;
    for s in seqs {
        for (i, v) in s.states.iter().enumerate() {
            writeln!(w, "{},{},{}", s.track_id, i + 1, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_states(path: impl AsRef<Path>, seqs: &[StateSequence]) -> Result<()> {
    write_states_to(create(path.as_ref())?, seqs)
}

pub fn write_residuals_to<W: Write>(mut w: W, res: &[ResidualSeries]) -> Result<()> {
    writeln!(w, "track_id,t,variable,value")?;
    let cell = |v: &Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_f64);
    for r in res {
        for (name, col) in [("step", &r.r_step), ("turn", &r.r_turn)] {
            for (i, v) in col.iter().enumerate() {
                writeln!(w, "{},{},{},{}", r.track_id, i + 1, name, cell(v))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_residuals(path: impl AsRef<Path>, res: &[ResidualSeries]) -> Result<()> {
    write_residuals_to(create(path.as_ref())?, res)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Rebuilds a track from a series. The first two locations are
/// `origin - (cos h, sin h)` and `origin`; afterwards each turn is added to
/// the heading and the walker advances by the matching step. Applying
/// [`steps_and_turns`](crate::geometry::steps_and_turns) recovers the series.
pub fn integrate_track(series: &StepTurnSeries, origin: (f64, f64), initial_heading: f64) -> Track {
    let mut heading = initial_heading;
    let mut pos = origin;
    let mut locations = Vec::with_capacity(series.len() + 2);
    locations.push((origin.0 - heading.cos(), origin.1 - heading.sin()));
    locations.push(origin);
    for (step, turn) in series.steps.iter().zip(&series.turns) {
        heading = wrap_angle(heading + turn);
        pos = (pos.0 + step * heading.cos(), pos.1 + step * heading.sin());
        locations.push(pos);
    }
    Track::new(series.track_id.clone(), locations, 1.0)
}
