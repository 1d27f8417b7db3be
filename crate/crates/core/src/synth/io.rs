//! `CFTD` binary dataset format, little-endian:
//!
//! ```text
//! magic "CFTD" | version u16 | n u32 | H u32 | W u32 | C u32 | k u16
//! n × ( label u8 | cfp H·W·C × f32 | ifp H·W·C × f32 )
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, PairedSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_MAGIC: [u8; 4] = *b"CFTD";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4 + 2;

pub fn write_dataset<W: Write>(out: &mut W, ds: &Dataset) -> Result<()> {
    let too_big = |what: &str| {
        Error::config(
            format!("dataset.{what}"),
            "does not fit the format's field width",
        )
    };
    let mut buf =
        Vec::with_capacity(HEADER_LEN + ds.len() * (1 + 8 * ds.height * ds.width * ds.channels));
    buf.extend_from_slice(&FORMAT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, v) in [
        ("n", ds.len()),
        ("height", ds.height),
        ("width", ds.width),
        ("channels", ds.channels),
    ] {
        let v = u32::try_from(v).map_err(|_| too_big(name))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let k = u16::try_from(ds.k).map_err(|_| too_big("k"))?;
    buf.extend_from_slice(&k.to_le_bytes());
    let px = ds.height * ds.width * ds.channels;
    for s in &ds.samples {
        let label = u8::try_from(s.label).map_err(|_| too_big("label"))?;
        if s.cfp.len() != px || s.ifp.len() != px {
            return Err(Error::shape(
                "write_dataset",
                s.cfp.shape(),
                &[ds.height, ds.width, ds.channels],
            ));
        }
        buf.push(label);
        for v in s.cfp.data().iter().chain(s.ifp.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != FORMAT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let k = r.u16()? as usize;
    let px = h * w * c;
    let mut samples = Vec::with_capacity(n.min(bytes.len()));
    let image = |r: &mut Reader| -> Result<Tensor<f32>> {
        let raw = r.take(px * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(vec![h, w, c], data)
    };
    for _ in 0..n {
        let label = r.take(1)?[0] as usize;
        if label >= k {
            return Err(Error::ClassOutOfRange { class: label, k });
        }
        let cfp = image(&mut r)?;
        let ifp = image(&mut r)?;
        samples.push(PairedSample { cfp, ifp, label });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "dataset has {} trailing bytes after {n} samples",
            bytes.len() - r.pos
        )));
    }
    Ok(Dataset {
        height: h,
        width: w,
        channels: c,
        k,
        samples,
        config: None,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn ds(n: usize) -> Dataset {
        let mut d = generate_dataset(&SynthConfig {
            n_samples: n,
            height: 16,
            width: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        d.config = None;
        d
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let d = ds(12);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 12 * (1 + 2 * 16 * 16 * 4));
        assert_eq!(read_dataset(&buf).unwrap(), d);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let d = ds(0);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let back = read_dataset(&buf).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back, d);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds(2)).unwrap();
        assert_eq!(&buf[..4], b"CFTD");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 16);
        assert_eq!(u16::from_le_bytes([buf[22], buf[23]]), 5);
    }

    #[test]
    fn distinct_errors() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds(3)).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&bad), Err(Error::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_dataset(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(
            read_dataset(&buf[..buf.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            read_dataset(&buf[..2]),
            Err(Error::Truncated { .. })
        ));
    }
}
