//! Model file format.
//!
//! Layout (all little-endian): magic `GMTC`, format version, every
//! config field, the normalization vectors, then the flat parameter
//! vector. Floats are stored as raw IEEE-754 bits, so save → load
//! reproduces the model bit-exactly and checkpoints hash identically
//! across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::tcn::net::TcnModel;
use crate::tcn::TcnConfig;

const MAGIC: &[u8; 4] = b"GMTC";
const VERSION: u32 = 1;

/// Writes a model checkpoint.
pub fn save_checkpoint(model: &TcnModel, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    binio::write_u32(&mut w, VERSION)?;
    write_config(&mut w, model.config())?;
    let (mean, std) = model.normalization();
    binio::write_f64_slice(&mut w, mean)?;
    binio::write_f64_slice(&mut w, std)?;
    binio::write_f64_slice(&mut w, model.params())?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back, validating magic, version, shape
/// consistency, and parameter finiteness.
pub fn load_checkpoint(path: &Path) -> Result<TcnModel> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    binio::expect_magic(&mut r, MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::ModelFile(format!(
            "unsupported model file version {version}, expected {VERSION}"
        )));
    }
    let config = read_config(&mut r)?;
    config
        .validate()
        .map_err(|e| Error::ModelFile(format!("stored config invalid: {e}")))?;
    let mean = binio::read_f64_vec(&mut r, config.input_channels)?;
    let std = binio::read_f64_vec(&mut r, config.input_channels)?;
    let params_len = binio::read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(params_len.min(1 << 24));
    for _ in 0..params_len {
        params.push(binio::read_f64(&mut r)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::ModelFile("trailing bytes after parameters".into()));
    }
    TcnModel::from_parts(config, mean, std, params)
}

fn write_config<W: Write>(w: &mut W, c: &TcnConfig) -> Result<()> {
    binio::write_u64(w, c.input_channels as u64)?;
    binio::write_u64(w, c.n_blocks as u64)?;
    binio::write_u64(w, c.convs_per_block as u64)?;
    binio::write_u64(w, c.kernel_size as u64)?;
    binio::write_u64(w, c.dilations.len() as u64)?;
    for &d in &c.dilations {
        binio::write_u64(w, d as u64)?;
    }
    binio::write_u64(w, c.channels.len() as u64)?;
    for &ch in &c.channels {
        binio::write_u64(w, ch as u64)?;
    }
    binio::write_u64(w, c.target_half_width as u64)?;
    binio::write_f64(w, c.learning_rate)?;
    binio::write_u64(w, c.batch_size as u64)?;
    binio::write_u64(w, c.epochs as u64)?;
    binio::write_f64(w, c.l2_weight)?;
    binio::write_f64(w, c.dropout)?;
    binio::write_u32(w, c.class_balanced as u32)?;
    binio::write_f64(w, c.val_fraction)?;
    binio::write_u64(w, c.seed)?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<TcnConfig> {
    let input_channels = binio::read_u64(r)? as usize;
    let n_blocks = binio::read_u64(r)? as usize;
    let convs_per_block = binio::read_u64(r)? as usize;
    let kernel_size = binio::read_u64(r)? as usize;
    let n_dil = binio::read_u64(r)? as usize;
    if n_dil > 1 << 16 {
        return Err(Error::ModelFile(format!("implausible dilation count {n_dil}")));
    }
    let mut dilations = Vec::with_capacity(n_dil);
    for _ in 0..n_dil {
        dilations.push(binio::read_u64(r)? as usize);
    }
    let n_ch = binio::read_u64(r)? as usize;
    if n_ch > 1 << 16 {
        return Err(Error::ModelFile(format!("implausible channel count {n_ch}")));
    }
    let mut channels = Vec::with_capacity(n_ch);
    for _ in 0..n_ch {
        channels.push(binio::read_u64(r)? as usize);
    }
    let target_half_width = binio::read_u64(r)? as usize;
    let learning_rate = binio::read_f64(r)?;
    let batch_size = binio::read_u64(r)? as usize;
    let epochs = binio::read_u64(r)? as usize;
    let l2_weight = binio::read_f64(r)?;
    let dropout = binio::read_f64(r)?;
    let class_balanced = binio::read_u32(r)? != 0;
    let val_fraction = binio::read_f64(r)?;
    let seed = binio::read_u64(r)?;
    Ok(TcnConfig {
        input_channels,
        n_blocks,
        convs_per_block,
        kernel_size,
        dilations,
        channels,
        target_half_width,
        learning_rate,
        batch_size,
        epochs,
        l2_weight,
        dropout,
        class_balanced,
        val_fraction,
        seed,
    })
}
