//! Little-endian helpers shared by the binary artifact formats.
//!
//! Every artifact starts with a 4-byte magic and a `u16` format version.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u16) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LE>(version)?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u16) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.read_u16::<LE>()?;
    if v != version {
        return Err(Error::Format(format!(
            "unsupported format version {v} (expected {version})"
        )));
    }
    Ok(())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8 string: {e}")))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a partially written file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
