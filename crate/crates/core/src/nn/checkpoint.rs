//! Parameter checkpoints.
//!
//! Layout: a UTF-8 text header followed by raw little-endian `f64` values.
//!
//! ```text
//! dfc-checkpoint 1
//! <name> <dim,dim,...> <param_count>
//! ...
//! end
//! <param_count * 8 bytes per network, in header order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Mlp;

const MAGIC: &str = "dfc-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub nets: Vec<(String, Mlp)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, net: &Mlp) {
        self.nets.push((name.to_string(), net.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Mlp> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (name, net) in &self.nets {
            let dims: Vec<String> = net.dims().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name} {} {}\n", dims.join(","), net.param_count()).as_bytes());
        }
        out.extend_from_slice(b"end\n");
        for (_, net) in &self.nets {
            for v in net.params() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            r.read_line(line).map_err(|e| Error::io(path, e))?;
            Ok(lineno)
        };

        let n = next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::parse(path, n, "missing checkpoint magic"));
        }
        let mut manifest = Vec::new();
        loop {
            let n = next_line(&mut r, &mut line)?;
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            if l.is_empty() {
                return Err(Error::parse(path, n, "unterminated header"));
            }
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::parse(path, n, format!("expected `name dims count`, got `{l}`")));
            }
            let dims = parts[1]
                .split(',')
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, n, e.to_string()))?;
            let count: usize = parts[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::parse(path, n, e.to_string()))?;
            manifest.push((parts[0].to_string(), dims, count, n));
        }
        let mut nets = Vec::new();
        for (name, dims, count, n) in manifest {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            let params = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let net = Mlp::from_params(&dims, params).map_err(|e| Error::parse(path, n, e.to_string()))?;
            nets.push((name, net));
        }
        Ok(Self { nets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ck = Checkpoint::new();
        ck.push("policy", &Mlp::new(&[4, 8, 2], &mut rng).unwrap());
        ck.push("critic", &Mlp::new(&[5, 8, 8, 1], &mut rng).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        let text = std::fs::read(&path).unwrap();
        assert!(text.starts_with(b"dfc-checkpoint 1\npolicy 4,8,2 58\n"));
    }

    #[test]
    fn bad_magic_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, "nope\n").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Parse { line: 1, .. })));
    }
}
