//! Binary frame formats and CSV exports.
//!
//! Trajectory files: a 40-byte little-endian header `d: u64, N: u64, K: u64,
//! dt: f64, seed: u64` followed by `K + 1` frames of `N·d` `f64` values.
//!
//! Field files: `d: u64, components: u64, cells: d × u64, lo: d × f64,
//! hi: d × f64, frames: u64`, then per frame a time `f64` followed by
//! `components·Π cells` values. Values are in axis-0-fastest order.

use std::io::Write;

use crate::dynamics::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::fields::{GridField, GridSpec};

/// Upper bound on the number of `f64` values a decoder will allocate.
pub const MAX_DECODED_VALUES: u64 = 1 << 28;

pub const TRAJECTORY_HEADER_LEN: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFrames {
    pub dim: usize,
    pub count: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub states: Vec<f64>,
}

impl From<&TrajectoryEnsemble> for TrajectoryFrames {
    fn from(t: &TrajectoryEnsemble) -> Self {
        TrajectoryFrames {
            dim: t.dim,
            count: t.count,
            steps: t.steps,
            dt: t.dt,
            seed: t.seed,
            states: t.states.clone(),
        }
    }
}

pub fn encode_trajectory(t: &TrajectoryEnsemble) -> Vec<u8> {
    let mut out = Vec::with_capacity(TRAJECTORY_HEADER_LEN + 8 * t.states.len());
    out.extend_from_slice(&(t.dim as u64).to_le_bytes());
    out.extend_from_slice(&(t.count as u64).to_le_bytes());
    out.extend_from_slice(&(t.steps as u64).to_le_bytes());
    out.extend_from_slice(&t.dt.to_le_bytes());
    out.extend_from_slice(&t.seed.to_le_bytes());
    for v in &t.states {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "truncated input while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Decode("length overflow".into()))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn checked_product(parts: &[u64]) -> Result<u64> {
    parts
        .iter()
        .try_fold(1u64, |acc, &p| acc.checked_mul(p))
        .filter(|&n| n <= MAX_DECODED_VALUES)
        .ok_or_else(|| Error::Decode("declared payload is too large".into()))
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<TrajectoryFrames> {
    let mut r = Reader::new(bytes);
    let dim = r.u64("dimension")?;
    let count = r.u64("particle count")?;
    let steps = r.u64("step count")?;
    let dt = r.f64("dt")?;
    let seed = r.u64("seed")?;
    if dim == 0 || dim > 8 {
        return Err(Error::Decode(format!("unsupported dimension {dim}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Decode(format!("invalid dt {dt}")));
    }
    let frames = steps
        .checked_add(1)
        .ok_or_else(|| Error::Decode("step count overflow".into()))?;
    let n = checked_product(&[frames, count, dim])?;
    let states = r.f64s(n as usize, "frames")?;
    r.finish()?;
    Ok(TrajectoryFrames {
        dim: dim as usize,
        count: count as usize,
        steps: steps as usize,
        dt,
        seed,
        states,
    })
}

/// One row per particle and step: `step,time,particle,x_0,…`.
pub fn write_trajectory_csv<W: Write>(t: &TrajectoryEnsemble, mut w: W) -> Result<()> {
    write!(w, "step,time,particle")?;
    for k in 0..t.dim {
        write!(w, ",x_{k}")?;
    }
    writeln!(w)?;
    for s in 0..=t.steps {
        let frame = t.frame(s);
        for i in 0..t.count {
            write!(w, "{s},{:.17e},{i}", t.time(s))?;
            for v in &frame[i * t.dim..(i + 1) * t.dim] {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Encodes a series of frames sharing one grid and component count.
pub fn encode_fields(frames: &[GridField]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Structural("no frames to encode".into()))?;
    let grid = &first.grid;
    let mut out = Vec::new();
    out.extend_from_slice(&(grid.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(first.components as u64).to_le_bytes());
    for &n in &grid.cells {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for v in grid.lo.iter().chain(&grid.hi) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for f in frames {
        if f.grid != *grid || f.components != first.components {
            return Err(Error::Structural("frames do not share a grid".into()));
        }
        out.extend_from_slice(&f.time.to_le_bytes());
        for v in &f.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_fields(bytes: &[u8]) -> Result<Vec<GridField>> {
    let mut r = Reader::new(bytes);
    let dim = r.u64("dimension")?;
    if dim == 0 || dim > 8 {
        return Err(Error::Decode(format!("unsupported dimension {dim}")));
    }
    let components = r.u64("components")?;
    if components != 1 && components != dim {
        return Err(Error::Decode(format!(
            "component count {components} must be 1 or {dim}"
        )));
    }
    let mut cells = Vec::with_capacity(dim as usize);
    for _ in 0..dim {
        cells.push(r.u64("cells")?);
    }
    let lo = r.f64s(dim as usize, "lower bounds")?;
    let hi = r.f64s(dim as usize, "upper bounds")?;
    let frames = r.u64("frame count")?;
    let mut parts = cells.clone();
    parts.push(components);
    let per_frame = checked_product(&parts)?;
    checked_product(&[per_frame + 1, frames])?;
    let grid = GridSpec::new(lo, hi, cells.iter().map(|&n| n as usize).collect())
        .map_err(|e| Error::Decode(format!("invalid grid: {e}")))?;
    let mut out = Vec::with_capacity(frames as usize);
    for _ in 0..frames {
        let time = r.f64("frame time")?;
        let values = r.f64s(per_frame as usize, "frame values")?;
        out.push(GridField {
            grid: grid.clone(),
            components: components as usize,
            values,
            time,
        });
    }
    r.finish()?;
    Ok(out)
}

/// One row per cell: `time,x_0,…,v_0,…` in axis-0-fastest order.
pub fn write_fields_csv<W: Write>(frames: &[GridField], mut w: W) -> Result<()> {
    let Some(first) = frames.first() else {
        return Ok(());
    };
    let d = first.grid.dim();
    write!(w, "time")?;
    for k in 0..d {
        write!(w, ",x_{k}")?;
    }
    if first.components == 1 {
        write!(w, ",value")?;
    } else {
        for k in 0..first.components {
            write!(w, ",v_{k}")?;
        }
    }
    writeln!(w)?;
    let mut x = vec![0.0; d];
    for f in frames {
        for c in 0..f.grid.len() {
            f.grid.center(c, &mut x);
            write!(w, "{:.17e}", f.time)?;
            for v in &x {
                write!(w, ",{v:.17e}")?;
            }
            for v in &f.values[c * f.components..(c + 1) * f.components] {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SystemTag;

    fn ensemble() -> TrajectoryEnsemble {
        TrajectoryEnsemble {
            dim: 2,
            count: 3,
            h: 0.5,
            dt: 0.25,
            steps: 1,
            seed: 42,
            system: SystemTag::Interacting,
            states: (0..12).map(|i| i as f64 * 0.5 - 1.0).collect(),
            out_of_grid: 0,
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let t = ensemble();
        let bytes = encode_trajectory(&t);
        assert_eq!(bytes.len(), TRAJECTORY_HEADER_LEN + 12 * 8);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        let back = decode_trajectory(&bytes).unwrap();
        assert_eq!(back, TrajectoryFrames::from(&t));
    }

    #[test]
    fn trajectory_decode_rejects_bad_input() {
        let bytes = encode_trajectory(&ensemble());
        assert!(decode_trajectory(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_trajectory(&extra).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_trajectory(&huge).is_err());
        assert!(decode_trajectory(&[]).is_err());
    }

    #[test]
    fn field_round_trip() {
        let g = GridSpec::new(vec![0.0, -1.0], vec![1.0, 1.0], vec![3, 4]).unwrap();
        let a = GridField::from_fn(&g, 0.0, |x| x[0] + x[1]);
        let mut b = GridField::from_fn(&g, 0.5, |x| x[0] * x[1]);
        b.time = 0.5;
        let bytes = encode_fields(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(decode_fields(&bytes).unwrap(), vec![a, b]);
        assert!(decode_fields(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        write_trajectory_csv(&ensemble(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,time,particle,x_0,x_1\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);

        let g = GridSpec::new(vec![0.0], vec![1.0], vec![4]).unwrap();
        let mut buf = Vec::new();
        write_fields_csv(&[GridField::from_fn(&g, 0.0, |x| x[0])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,x_0,value\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
