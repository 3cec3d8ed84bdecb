//! Checkpoint container: a text header followed by a little-endian f64 payload.
//!
//! ```text
//! losa-ckpt-v1
//! seed <u64>
//! config <json>
//! entries <n>
//! <path> <dim>x<dim>... <offset> <len>
//! ...
//! payload
//! <n·8 bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamSet, Parameterized};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "losa-ckpt-v1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Self {
        Self {
            seed,
            config: model.config().clone(),
            params: ParamSet::snapshot(model),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!(
            "{CHECKPOINT_VERSION}\nseed {}\nconfig {}\nentries {}\n",
            self.seed,
            serde_json::to_string(&self.config)?,
            self.params.entries.len()
        );
        let mut offset = 0;
        for (path, t) in &self.params.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("{path} {} {offset} {}\n", dims.join("x"), t.numel()));
            offset += t.numel();
        }
        header.push_str("payload\n");
        let mut bytes = header.into_bytes();
        for (_, t) in &self.params.entries {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("unterminated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not UTF-8"))
        };
        let version = line()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.into(),
                found: version.chars().take(40).collect(),
            });
        }
        let field = |l: &str, key: &str| -> Result<String> {
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| malformed(format!("expected `{key}` line")))
        };
        let seed = field(line()?, "seed")?.parse().map_err(|_| malformed("bad seed"))?;
        let config: ModelConfig =
            serde_json::from_str(&field(line()?, "config")?).map_err(|e| malformed(format!("config: {e}")))?;
        let n: usize = field(line()?, "entries")?.parse().map_err(|_| malformed("bad entry count"))?;
        let mut table = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let l = line()?;
            let parts: Vec<&str> = l.split(' ').collect();
            let [path, dims, offset, len] = parts[..] else {
                return Err(malformed(format!("bad entry `{l}`")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| malformed(format!("bad shape in `{l}`"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| malformed(format!("bad offset in `{l}`")))?;
            let len: usize = len.parse().map_err(|_| malformed(format!("bad length in `{l}`")))?;
            if shape.iter().product::<usize>() != len {
                return Err(malformed(format!("shape and length disagree in `{l}`")));
            }
            table.push((path.to_owned(), shape, offset, len));
        }
        if line()? != "payload" {
            return Err(malformed("missing payload marker"));
        }
        let payload = &bytes[pos..];
        let total: usize = table.iter().map(|e| e.3).sum();
        if payload.len() != total * 8 {
            return Err(malformed(format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                total * 8
            )));
        }
        let mut entries = Vec::with_capacity(table.len());
        for (path, shape, offset, len) in table {
            if offset + len > total {
                return Err(malformed(format!("entry `{path}` overruns the payload")));
            }
            let data = payload[offset * 8..(offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((path, Tensor::new(shape, data)?));
        }
        Ok(Self {
            seed,
            config,
            params: ParamSet { entries },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and overwrites every parameter from the payload.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.seed)?;
        let mut expected = vec![];
        model.visit(&mut |p, t| expected.push((p.to_owned(), t.shape().to_vec())));
        let found: Vec<(String, Vec<usize>)> = self
            .params
            .entries
            .iter()
            .map(|(p, t)| (p.clone(), t.shape().to_vec()))
            .collect();
        if expected != found {
            let diff = expected
                .iter()
                .zip(&found)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("model has {} {:?}, checkpoint has {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} vs {} entries", expected.len(), found.len()));
            return Err(Error::Mismatch(diff));
        }
        let mut it = self.params.entries.into_iter();
        model.visit_mut(&mut |_, t| {
            let (_, src) = it.next().expect("lengths checked");
            t.data_mut().copy_from_slice(src.data());
        });
        Ok(model)
    }
}
