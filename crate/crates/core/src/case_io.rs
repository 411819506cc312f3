//! On-disk case container: a directory holding `manifest.txt` plus one
//! binary file per frame.
//!
//! Frame file layout (little endian): `CFRC`, version u16, height u16,
//! width u16, channel count u8, then for each channel a u8 name length and
//! the UTF-8 name, then each channel's row-major f32 values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::fields::{Channel, DeformationSequence, FieldFrame, Grid};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFRC";
pub const VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.txt";

/// Encodes named grids of equal shape into the frame binary format.
pub fn encode_frame(channels: &[(&str, &Grid)]) -> Result<Vec<u8>> {
    let (h, w) = channels
        .first()
        .map(|(_, g)| g.dim())
        .ok_or_else(|| Error::InvalidArgument("frame file needs at least one channel".into()))?;
    if h > u16::MAX as usize || w > u16::MAX as usize || channels.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument("frame too large for the container".into()));
    }
    let mut out = Vec::with_capacity(16 + channels.len() * (h * w * 4 + 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(channels.len() as u8);
    for (name, grid) in channels {
        if name.len() > u8::MAX as usize || name.is_empty() {
            return Err(Error::InvalidArgument(format!("bad channel name {name:?}")));
        }
        if grid.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![grid.nrows(), grid.ncols()],
            });
        }
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
    }
    for (_, grid) in channels {
        for &v in grid.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Decodes a frame file into named grids, checking every length.
pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<Vec<(String, Grid)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.to_path_buf(),
    };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let count = r.u8()? as usize;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u8()? as usize;
        let start = r.pos;
        let raw = r.take(len)?.to_vec();
        let name = String::from_utf8(raw).map_err(|_| {
            r.pos = start;
            r.fail("channel name is not UTF-8")
        })?;
        names.push(name);
    }
    let mut out = Vec::with_capacity(count);
    for name in names {
        let raw = r.take(h * w * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Array2::from_shape_vec((h, w), values).expect("length checked")));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn read_frame_file(path: &Path) -> Result<Vec<(String, Grid)>> {
    decode_frame(&std::fs::read(path)?, path)
}

fn frame_file_name(k: usize) -> String {
    format!("frame_{k:04}.bin")
}

/// Writes `sequence` into directory `dir`, creating it if needed.
pub fn write_case(sequence: &DeformationSequence, dir: &Path) -> Result<()> {
    sequence.validate()?;
    std::fs::create_dir_all(dir)?;
    let names: Vec<&str> = Channel::FRAME.iter().map(|c| c.name()).collect();
    let mut manifest = String::new();
    writeln!(manifest, "case_id {}", sequence.case_id).unwrap();
    writeln!(manifest, "seed {}", sequence.seed).unwrap();
    writeln!(manifest, "grid {}", sequence.size()).unwrap();
    writeln!(manifest, "uts_index {}", sequence.uts_index).unwrap();
    writeln!(manifest, "channels {}", names.join(" ")).unwrap();
    writeln!(manifest, "frames {}", sequence.frames.len()).unwrap();
    for (k, f) in sequence.frames.iter().enumerate() {
        let file = frame_file_name(k);
        writeln!(manifest, "frame {k} {:?} {file}", f.strain).unwrap();
        let grids: Vec<(&str, &Grid)> = Channel::FRAME
            .iter()
            .map(|&c| (c.name(), f.channel(c).expect("frame channel")))
            .collect();
        std::fs::write(dir.join(file), encode_frame(&grids)?)?;
    }
    writeln!(manifest, "final_damage Df final_damage.bin").unwrap();
    std::fs::write(dir.join("final_damage.bin"), encode_frame(&[("Df", &sequence.final_damage)])?)?;
    writeln!(manifest, "microstructure M microstructure.bin").unwrap();
    std::fs::write(dir.join("microstructure.bin"), encode_frame(&[("M", &sequence.microstructure)])?)?;
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn manifest_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Validation(format!("{}:{}: {}", path.display(), line + 1, reason.into()))
}

fn single_channel(dir: &Path, file: &str, name: &str, n: usize) -> Result<Grid> {
    let path = dir.join(file);
    let mut grids = read_frame_file(&path)?;
    let pos = grids
        .iter()
        .position(|(k, _)| k == name)
        .ok_or_else(|| Error::MissingChannel(format!("{name} in {}", path.display())))?;
    let grid = grids.swap_remove(pos).1;
    if grid.dim() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: vec![n, n],
            got: vec![grid.nrows(), grid.ncols()],
        });
    }
    Ok(grid)
}

/// Reads a case directory written by [`write_case`].
pub fn read_case(dir: &Path) -> Result<DeformationSequence> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath)?;
    let mut case_id = None;
    let mut seed = None;
    let mut grid = None;
    let mut uts = None;
    let mut expected_frames = None;
    let mut frame_entries: Vec<(f64, String)> = Vec::new();
    let mut final_file = None;
    let mut micro_file = None;
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        let parse_usize = |s: Option<&&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| manifest_error(&mpath, ln, format!("bad {key} entry")))
        };
        match key {
            "case_id" => case_id = Some(rest.join(" ")),
            "seed" => {
                seed = Some(
                    rest.first()
                        .and_then(|v| v.parse::<u64>().ok())
                        .ok_or_else(|| manifest_error(&mpath, ln, "bad seed"))?,
                )
            }
            "grid" => grid = Some(parse_usize(rest.first())?),
            "uts_index" => uts = Some(parse_usize(rest.first())?),
            "frames" => expected_frames = Some(parse_usize(rest.first())?),
            "channels" => {
                for c in Channel::FRAME {
                    if !rest.contains(&c.name()) {
                        return Err(Error::MissingChannel(c.name().into()));
                    }
                }
            }
            "frame" => {
                let idx = parse_usize(rest.first())?;
                if idx != frame_entries.len() {
                    return Err(manifest_error(&mpath, ln, format!("frame {idx} out of order")));
                }
                let strain: f64 = rest
                    .get(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| manifest_error(&mpath, ln, "bad strain"))?;
                let file = rest.get(2).ok_or_else(|| manifest_error(&mpath, ln, "missing file"))?;
                if let Some((prev, _)) = frame_entries.last() {
                    if !(strain > *prev) {
                        return Err(manifest_error(
                            &mpath,
                            ln,
                            format!("strain {strain} does not increase past {prev}"),
                        ));
                    }
                }
                frame_entries.push((strain, file.to_string()));
            }
            "final_damage" => final_file = rest.get(1).map(|s| s.to_string()),
            "microstructure" => micro_file = rest.get(1).map(|s| s.to_string()),
            other => return Err(manifest_error(&mpath, ln, format!("unknown key {other}"))),
        }
    }
    let missing = |what: &str| Error::Validation(format!("{}: missing {what}", mpath.display()));
    let n = grid.ok_or_else(|| missing("grid"))?;
    if expected_frames != Some(frame_entries.len()) {
        return Err(missing("consistent frame count"));
    }
    let mut frames = Vec::with_capacity(frame_entries.len());
    for (strain, file) in &frame_entries {
        let path = dir.join(file);
        let grids = read_frame_file(&path)?;
        let mut frame = FieldFrame::zeros(*strain, n);
        for c in Channel::FRAME {
            let (_, g) = grids
                .iter()
                .find(|(k, _)| k == c.name())
                .ok_or_else(|| Error::MissingChannel(format!("{} in {}", c.name(), path.display())))?;
            if g.dim() != (n, n) {
                return Err(Error::ShapeMismatch {
                    expected: vec![n, n],
                    got: vec![g.nrows(), g.ncols()],
                });
            }
            *frame.channel_mut(c).expect("frame channel") = g.clone();
        }
        frames.push(frame);
    }
    let seq = DeformationSequence {
        case_id: case_id.ok_or_else(|| missing("case_id"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        microstructure: single_channel(dir, &micro_file.ok_or_else(|| missing("microstructure"))?, "M", n)?,
        frames,
        uts_index: uts.ok_or_else(|| missing("uts_index"))?,
        final_damage: single_channel(dir, &final_file.ok_or_else(|| missing("final_damage"))?, "Df", n)?,
    };
    seq.validate()?;
    Ok(seq)
}
