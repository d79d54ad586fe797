//! Binary CSI container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | magic `CSIR`                              |
//! | 4..8             | version, u32 (= 1)                        |
//! | 8..12            | header length `L`, u32                    |
//! | 12..12+L         | UTF-8 JSON header                         |
//! | then, per frame  | f64 timestamp, then `N_r * N_f` pairs of  |
//! |                  | (re, im) f32, antenna-major               |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::csi::CsiFrame;
use crate::error::CsiIoError;
use crate::geometry::{AntennaArray, Point3};

pub const MAGIC: &[u8; 4] = b"CSIR";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiHeader {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub sample_rate_hz: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub tx_position: Point3,
    pub antenna_positions: Vec<Point3>,
    pub ue_id: u32,
}

impl CsiHeader {
    pub fn from_array(array: &AntennaArray, ue_id: u32) -> Self {
        Self {
            n_antennas: array.n_antennas(),
            n_subcarriers: array.n_subcarriers(),
            sample_rate_hz: array.sample_rate_hz(),
            carrier_hz: array.carrier_hz(),
            bandwidth_hz: array.bandwidth_hz(),
            tx_position: array.tx_position(),
            antenna_positions: array.positions().to_vec(),
            ue_id,
        }
    }

    fn frame_bytes(&self) -> usize {
        8 + self.n_antennas * self.n_subcarriers * 8
    }
}

/// Streaming writer.
pub struct CsiWriter<W: Write> {
    inner: W,
    header: CsiHeader,
    offset: u64,
    buf: Vec<u8>,
}

impl CsiWriter<BufWriter<File>> {
    pub fn create(
        path: impl AsRef<Path>,
        array: &AntennaArray,
        ue_id: u32,
    ) -> Result<Self, CsiIoError> {
        let file = File::create(path)?;
        Self::new(BufWriter::new(file), array, ue_id)
    }
}

impl<W: Write> CsiWriter<W> {
    pub fn new(mut inner: W, array: &AntennaArray, ue_id: u32) -> Result<Self, CsiIoError> {
        let header = CsiHeader::from_array(array, ue_id);
        let json = serde_json::to_vec(&header).map_err(|e| CsiIoError::MalformedHeader {
            offset: PREAMBLE_LEN,
            reason: e.to_string(),
        })?;
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&(json.len() as u32).to_le_bytes())?;
        inner.write_all(&json)?;
        let buf = Vec::with_capacity(header.frame_bytes());
        Ok(Self {
            inner,
            offset: PREAMBLE_LEN + json.len() as u64,
            header,
            buf,
        })
    }

    pub fn write_frame(&mut self, frame: &CsiFrame) -> Result<(), CsiIoError> {
        if frame.n_antennas() != self.header.n_antennas
            || frame.n_subcarriers() != self.header.n_subcarriers
        {
            return Err(CsiIoError::DimensionMismatch {
                offset: self.offset,
                reason: format!(
                    "frame is {}x{}, container expects {}x{}",
                    frame.n_antennas(),
                    frame.n_subcarriers(),
                    self.header.n_antennas,
                    self.header.n_subcarriers
                ),
            });
        }
        self.buf.clear();
        self.buf.extend_from_slice(&frame.timestamp.to_le_bytes());
        for c in frame.data() {
            self.buf.extend_from_slice(&(c.re as f32).to_le_bytes());
            self.buf.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
        self.inner.write_all(&self.buf)?;
        self.offset += self.buf.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, CsiIoError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader; iterate to obtain frames.
pub struct CsiReader<R: Read> {
    inner: R,
    header: CsiHeader,
    array: AntennaArray,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
}

impl CsiReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CsiIoError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

impl<R: Read> CsiReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CsiIoError> {
        let mut pre = [0u8; 12];
        let n = read_full(&mut inner, &mut pre)?;
        if n < 4 || &pre[0..4] != MAGIC {
            if n < 4 {
                return Err(CsiIoError::Truncated {
                    offset: 0,
                    needed: 12,
                    found: n,
                });
            }
            return Err(CsiIoError::BadMagic { offset: 0 });
        }
        if n < 12 {
            return Err(CsiIoError::Truncated {
                offset: 0,
                needed: 12,
                found: n,
            });
        }
        let version = u32::from_le_bytes(pre[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CsiIoError::UnsupportedVersion { offset: 4, version });
        }
        let header_len = u32::from_le_bytes(pre[8..12].try_into().unwrap()) as usize;
        let mut json = vec![0u8; header_len];
        let got = read_full(&mut inner, &mut json)?;
        if got < header_len {
            return Err(CsiIoError::Truncated {
                offset: PREAMBLE_LEN,
                needed: header_len,
                found: got,
            });
        }
        let header: CsiHeader =
            serde_json::from_slice(&json).map_err(|e| CsiIoError::MalformedHeader {
                offset: PREAMBLE_LEN,
                reason: e.to_string(),
            })?;
        if header.antenna_positions.len() != header.n_antennas {
            return Err(CsiIoError::DimensionMismatch {
                offset: PREAMBLE_LEN,
                reason: format!(
                    "n_antennas = {} but {} antenna positions",
                    header.n_antennas,
                    header.antenna_positions.len()
                ),
            });
        }
        let array = AntennaArray::new(
            header.antenna_positions.clone(),
            header.tx_position,
            header.carrier_hz,
            header.bandwidth_hz,
            header.n_subcarriers,
            header.sample_rate_hz,
        )
        .map_err(|e| CsiIoError::DimensionMismatch {
            offset: PREAMBLE_LEN,
            reason: e.to_string(),
        })?;
        let buf = vec![0u8; header.frame_bytes()];
        Ok(Self {
            inner,
            offset: PREAMBLE_LEN + header_len as u64,
            header,
            array,
            buf,
            done: false,
        })
    }

    pub fn header(&self) -> &CsiHeader {
        &self.header
    }

    pub fn array(&self) -> &AntennaArray {
        &self.array
    }

    pub fn ue_id(&self) -> u32 {
        self.header.ue_id
    }

    fn read_frame(&mut self) -> Result<Option<CsiFrame>, CsiIoError> {
        let n = read_full(&mut self.inner, &mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        if n < self.buf.len() {
            return Err(CsiIoError::Truncated {
                offset: self.offset,
                needed: self.buf.len(),
                found: n,
            });
        }
        let timestamp = f64::from_le_bytes(self.buf[0..8].try_into().unwrap());
        let h: Vec<Complex64> = self.buf[8..]
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        let frame = CsiFrame::new(
            timestamp,
            self.header.ue_id,
            self.header.n_antennas,
            self.header.n_subcarriers,
            h,
        )
        .map_err(|e| CsiIoError::MalformedHeader {
            offset: self.offset,
            reason: e.to_string(),
        })?;
        self.offset += self.buf.len() as u64;
        Ok(Some(frame))
    }
}

impl<R: Read> Iterator for CsiReader<R> {
    type Item = Result<CsiFrame, CsiIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Writes a whole container at once.
pub fn save_csi(
    path: impl AsRef<Path>,
    array: &AntennaArray,
    ue_id: u32,
    frames: &[CsiFrame],
) -> Result<(), CsiIoError> {
    let mut w = CsiWriter::create(path, array, ue_id)?;
    for f in frames {
        w.write_frame(f)?;
    }
    w.finish()?;
    Ok(())
}

/// Reads a whole container into memory.
pub fn load_csi(path: impl AsRef<Path>) -> Result<(AntennaArray, Vec<CsiFrame>), CsiIoError> {
    let reader = CsiReader::open(path)?;
    let array = reader.array().clone();
    let frames = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((array, frames))
}
