//! Binary file formats: parameter checkpoints and single-tensor files.
//!
//! Checkpoint layout: the magic string `LFCKPT1`, then one record per
//! parameter — name length (u32 LE), name bytes, rank (u32 LE), shape
//! extents (u32 LE each), then the values as little-endian 32-bit
//! floats. Tensor files use the magic `LFTNSR1` followed by a single
//! anonymous record without the name fields.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};

const CKPT_MAGIC: &[u8; 7] = b"LFCKPT1";
const TNSR_MAGIC: &[u8; 7] = b"LFTNSR1";

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_shape_and_data(&mut w, tensor)?;
    }
    w.flush()
}

pub fn read_checkpoint(path: &Path) -> io::Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, CKPT_MAGIC, path)?;
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let tensor = read_shape_and_data(&mut r)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TNSR_MAGIC)?;
    write_shape_and_data(&mut w, tensor)?;
    w.flush()
}

pub fn read_tensor_file(path: &Path) -> io::Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, TNSR_MAGIC, path)?;
    read_shape_and_data(&mut r)
}

fn write_shape_and_data<W: Write>(w: &mut W, tensor: &Tensor) -> io::Result<()> {
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &dim in tensor.shape() {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_shape_and_data<R: Read>(r: &mut R) -> io::Result<Tensor> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    let rank = u32::from_le_bytes(buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as Real);
    }
    Tensor::from_vec(&shape, data)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 7], path: &Path) -> io::Result<()> {
    let mut got = [0u8; 7];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{} is not a {} file", path.display(), String::from_utf8_lossy(magic)),
        ));
    }
    Ok(())
}
