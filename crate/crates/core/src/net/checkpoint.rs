use std::path::Path;

use super::{Layer, MlpModel, NetError, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const MAGIC: &str = "optshift-checkpoint";

/// A model snapshot plus the run metadata needed to resume or audit it.
///
/// The text layout is
///
/// ```text
/// optshift-checkpoint
/// schema_version 1
/// layer_dims 4 8 3
/// seed 7
/// epoch 12
/// layer 0 weight
/// <matrix text: "rows cols" then rows of values>
/// layer 0 bias
/// <matrix text, one row>
/// ...
/// ```
///
/// All values are written at 17 significant digits so reading a file back
/// reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.model.dims().iter().map(|d| d.to_string()).collect();
        let mut out = format!(
            "{MAGIC}\nschema_version {CHECKPOINT_SCHEMA_VERSION}\nlayer_dims {}\nseed {}\nepoch {}\n",
            dims.join(" "),
            self.seed,
            self.epoch
        );
        for (i, layer) in self.model.layers().iter().enumerate() {
            out.push_str(&format!("layer {i} weight\n"));
            out.push_str(&layer.weight.to_text());
            out.push_str(&format!("layer {i} bias\n"));
            let bias = Matrix::from_vec(1, layer.bias.len(), layer.bias.clone())
                .expect("model biases are finite");
            out.push_str(&bias.to_text());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut cursor = Cursor { lines: &lines, pos: 0 };

        let magic = cursor.next()?;
        if magic.trim() != MAGIC {
            return Err(cursor.error(format!("expected {MAGIC:?} header")));
        }
        let version: u32 = cursor.field("schema_version")?;
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(cursor.error(format!("unsupported schema_version {version}")));
        }
        let dims_line = cursor.keyed("layer_dims")?;
        let dims = dims_line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| cursor.error(format!("bad layer_dims: {e}")))?;
        if dims.len() < 2 {
            return Err(cursor.error("layer_dims needs at least two entries".into()));
        }
        let seed: u64 = cursor.field("seed")?;
        let epoch: usize = cursor.field("epoch")?;

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            cursor.expect(&format!("layer {i} weight"))?;
            let weight = cursor.matrix()?;
            if weight.shape() != (w[0], w[1]) {
                return Err(cursor.error(format!(
                    "layer {i} weight is {:?}, layer_dims say {:?}",
                    weight.shape(),
                    (w[0], w[1])
                )));
            }
            cursor.expect(&format!("layer {i} bias"))?;
            let bias = cursor.matrix()?;
            if bias.shape() != (1, w[1]) {
                return Err(cursor.error(format!("layer {i} bias has shape {:?}", bias.shape())));
            }
            layers.push(Layer {
                weight,
                bias: bias.into_vec(),
            });
        }
        Ok(Checkpoint {
            model: MlpModel::from_layers(layers)?,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Cursor<'a> {
    lines: &'a [&'a str],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn error(&self, reason: String) -> NetError {
        NetError::Checkpoint {
            line: self.pos.max(1),
            reason,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| NetError::Checkpoint {
                line: self.pos + 1,
                reason: "unexpected end of file".into(),
            })?;
        self.pos += 1;
        Ok(line)
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            _ => Err(self.error(format!("expected `{key} ...`, found {line:?}"))),
        }
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.keyed(key)?;
        raw.parse().map_err(|e| self.error(format!("bad {key}: {e}")))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let line = self.next()?;
        if line.trim() != want {
            return Err(self.error(format!("expected {want:?}, found {line:?}")));
        }
        Ok(())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let start = self.pos;
        let header = self.next()?;
        let rows: usize = header
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.error(format!("bad matrix header {header:?}")))?;
        let end = (start + 1 + rows).min(self.lines.len());
        let block = self.lines[start..end].join("\n");
        self.pos = end;
        Matrix::from_text(&block).map_err(|e| NetError::Checkpoint {
            line: start + 1,
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::test_util::random_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = Checkpoint {
            model: random_model(&[5, 7, 3], 3),
            seed: 99,
            epoch: 4,
        };
        let back = Checkpoint::from_text(&ckpt.to_text()).unwrap();
        assert_eq!(back, ckpt);
        let a: Vec<u64> = ckpt.model.params_flat().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.model.params_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            model: random_model(&[2, 3], 1),
            seed: 1,
            epoch: 0,
        };
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn malformed_files_report_lines() {
        let ckpt = Checkpoint {
            model: random_model(&[2, 3], 1),
            seed: 1,
            epoch: 0,
        };
        let text = ckpt.to_text();
        let bad_version = text.replace("schema_version 1", "schema_version 9");
        assert!(matches!(
            Checkpoint::from_text(&bad_version),
            Err(NetError::Checkpoint { line: 2, .. })
        ));
        let truncated: String = text.lines().take(7).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
        let wrong_dims = text.replace("layer_dims 2 3", "layer_dims 2 4");
        assert!(Checkpoint::from_text(&wrong_dims).is_err());
    }
}
