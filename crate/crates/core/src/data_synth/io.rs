//! Binary dataset container.
//!
//! Layout, little-endian: magic, `u32` version, `u32` K, N, C, H, W, `u8`
//! labels-present flag, `u8` domain (0 source, 1 target), `N*C*H*W` f32
//! pixels, `N` u32 labels if present, `u32` provenance length, UTF-8 JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DomainDataset, DomainTag};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CINDATA\0";
pub const DATASET_VERSION: u32 = 1;

const MAX_ELEMENTS: usize = 1 << 31;

impl DomainDataset {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let s = self.images().shape();
        w.write_all(DATASET_MAGIC)?;
        for v in [
            DATASET_VERSION,
            self.num_classes as u32,
            s[0] as u32,
            s[1] as u32,
            s[2] as u32,
            s[3] as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.labels.is_some() as u8, (self.domain == DomainTag::Target) as u8])?;
        for &p in self.images().data() {
            w.write_all(&p.to_le_bytes())?;
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                w.write_all(&(y as u32).to_le_bytes())?;
            }
        }
        w.write_all(&(self.provenance.len() as u32).to_le_bytes())?;
        w.write_all(self.provenance.as_bytes())?;
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<DomainDataset> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, origin, "header")?;
        if &magic != DATASET_MAGIC {
            return Err(bad(format!("bad magic {magic:?}, not a dataset file")));
        }
        let mut u = || read_u32(&mut r, origin);
        let version = u()?;
        if version != DATASET_VERSION {
            return Err(bad(format!(
                "unsupported version {version}, expected {DATASET_VERSION}"
            )));
        }
        let (k, n, c, h, w) = (
            u()? as usize,
            u()? as usize,
            u()? as usize,
            u()? as usize,
            u()? as usize,
        );
        let numel = n
            .checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .filter(|&x| x <= MAX_ELEMENTS)
            .ok_or_else(|| bad(format!("implausible shape [{n},{c},{h},{w}]")))?;
        let mut flags = [0u8; 2];
        read_exact(&mut r, &mut flags, origin, "flags")?;
        let domain = match flags[1] {
            0 => DomainTag::Source,
            1 => DomainTag::Target,
            d => return Err(bad(format!("unknown domain tag {d}"))),
        };
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw, origin, "pixels")?;
        let pixels: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = match flags[0] {
            0 => None,
            1 => {
                let mut raw = vec![0u8; n * 4];
                read_exact(&mut r, &mut raw, origin, "labels")?;
                Some(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                        .collect(),
                )
            }
            f => return Err(bad(format!("bad labels flag {f}"))),
        };
        let plen = read_u32(&mut r, origin)? as usize;
        let mut prov = vec![0u8; plen];
        read_exact(&mut r, &mut prov, origin, "provenance")?;
        let provenance = String::from_utf8(prov).map_err(|_| bad("provenance is not UTF-8".into()))?;
        let images = Tensor::new([n, c, h, w], pixels)?;
        DomainDataset::new(images, labels, domain, k, provenance).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<DomainDataset> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f), path)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], origin: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(origin, format!("truncated file while reading {what}")),
        _ => Error::io(origin, e),
    })
}

fn read_u32<R: Read>(r: &mut R, origin: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, origin, "header")?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::super::{generate_domain_pair, GeneratorConfig, ShiftConfig};
    use super::*;

    fn pair() -> (DomainDataset, DomainDataset) {
        let cfg = GeneratorConfig {
            num_classes: 3,
            n_source: 12,
            n_target: 9,
            height: 8,
            width: 8,
            shift: ShiftConfig::benchmark(),
            seed: 2,
        };
        generate_domain_pair(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (s, t) = pair();
        for d in [s, t] {
            let mut buf = Vec::new();
            d.write_to(&mut buf).unwrap();
            let back = DomainDataset::read_from(&buf[..], Path::new("mem")).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.labels_hidden(), d.domain == DomainTag::Target);
        }
    }

    #[test]
    fn corrupted_inputs_error() {
        let (s, _) = pair();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let p = Path::new("x.bin");

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(DomainDataset::read_from(&bad[..], p)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(DomainDataset::read_from(&bad[..], p)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let short = &buf[..buf.len() - 7];
        assert!(DomainDataset::read_from(short, p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let mut bad = buf.clone();
        let off = 8 + 24 + 2 + s.images().numel() * 4;
        bad[off] = 200;
        assert!(DomainDataset::read_from(&bad[..], p).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let (s, _) = pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        s.save(&path).unwrap();
        assert_eq!(DomainDataset::load(&path).unwrap(), s);
        assert!(DomainDataset::load(&dir.path().join("missing.bin")).is_err());
    }
}
