//! JSON interchange format for matrices and block vectors.
//!
//! ```text
//! {"version": 1, "M": 3, "n_g": 2, "stage_sizes": [2, 2, 2],
//!  "blocks": [{"name": "diag", "index": 0, "rows": 2, "cols": 2, "data": [...]}, ...]}
//! ```
//!
//! Matrix block names are `diag`, `sub` (index `i` couples stage `i` to
//! `i + 1`, stored as rows of stage `i + 1`), `arrow` and `corner`. Vectors use
//! `stage` and `global`. Indices are 0-based, `data` is column-major and
//! every float is written with 17 significant digits.

use std::fs;
use std::path::Path;

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::btam::{BlockTridiagArrowMatrix, BlockVector};
use crate::error::{Error, Result};
use crate::kernels::DenseBlock;

pub const FORMAT_VERSION: u32 = 1;

/// Formats a float with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct Floats<'a>(&'a [f64]);

impl Serialize for Floats<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &x in self.0 {
            if !x.is_finite() {
                return Err(S::Error::custom(format!("non-finite value {x}")));
            }
            let raw = RawValue::from_string(format_f64(x)).map_err(S::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct BlockOut<'a> {
    name: &'static str,
    index: usize,
    rows: usize,
    cols: usize,
    data: Floats<'a>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    version: u32,
    #[serde(rename = "M")]
    m: usize,
    n_g: usize,
    stage_sizes: Vec<usize>,
    blocks: Vec<BlockOut<'a>>,
}

#[derive(Deserialize)]
struct BlockIn {
    name: String,
    index: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct FileIn {
    version: u32,
    #[serde(rename = "M")]
    m: usize,
    n_g: usize,
    stage_sizes: Vec<usize>,
    blocks: Vec<BlockIn>,
}

fn block_out<'a>(name: &'static str, index: usize, b: &'a DenseBlock) -> BlockOut<'a> {
    BlockOut {
        name,
        index,
        rows: b.rows(),
        cols: b.cols(),
        data: Floats(b.data()),
    }
}

pub fn matrix_to_json(m: &BlockTridiagArrowMatrix) -> Result<String> {
    let mut blocks = Vec::new();
    blocks.extend(m.diag.iter().enumerate().map(|(i, b)| block_out("diag", i, b)));
    blocks.extend(m.sub.iter().enumerate().map(|(i, b)| block_out("sub", i, b)));
    blocks.extend(m.arrow.iter().enumerate().map(|(i, b)| block_out("arrow", i, b)));
    if let Some(c) = m.corner.as_ref() {
        blocks.push(block_out("corner", 0, c));
    }
    let file = FileOut {
        version: FORMAT_VERSION,
        m: m.num_stages(),
        n_g: m.global_size(),
        stage_sizes: m.stage_sizes(),
        blocks,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn vector_to_json(v: &BlockVector) -> Result<String> {
    let mut blocks: Vec<BlockOut> = v
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| BlockOut {
            name: "stage",
            index: i,
            rows: s.len(),
            cols: 1,
            data: Floats(s),
        })
        .collect();
    if !v.global.is_empty() {
        blocks.push(BlockOut {
            name: "global",
            index: 0,
            rows: v.global.len(),
            cols: 1,
            data: Floats(&v.global),
        });
    }
    let file = FileOut {
        version: FORMAT_VERSION,
        m: v.stages.len(),
        n_g: v.global.len(),
        stage_sizes: v.stages.iter().map(Vec::len).collect(),
        blocks,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

fn parse_header(text: &str) -> Result<FileIn> {
    let file: FileIn = serde_json::from_str(text)?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            file.version
        )));
    }
    if file.stage_sizes.len() != file.m {
        return Err(Error::Format(format!(
            "stage_sizes has {} entries but M = {}",
            file.stage_sizes.len(),
            file.m
        )));
    }
    Ok(file)
}

fn place(
    slots: &mut [Option<DenseBlock>],
    blk: BlockIn,
    expected: (usize, usize),
) -> Result<()> {
    let what = format!("{} block {}", blk.name, blk.index);
    let slot = slots
        .get_mut(blk.index)
        .ok_or_else(|| Error::Format(format!("{what}: index out of range")))?;
    if slot.is_some() {
        return Err(Error::Format(format!("{what}: duplicate")));
    }
    if (blk.rows, blk.cols) != expected {
        return Err(Error::Format(format!(
            "{what}: shape {}x{}, expected {}x{}",
            blk.rows, blk.cols, expected.0, expected.1
        )));
    }
    let b = DenseBlock::from_col_major(blk.rows, blk.cols, blk.data)
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    *slot = Some(b);
    Ok(())
}

fn collect(slots: Vec<Option<DenseBlock>>, name: &str) -> Result<Vec<DenseBlock>> {
    slots
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::Format(format!("missing {name} block {i}"))))
        .collect()
}

pub fn matrix_from_json(text: &str) -> Result<BlockTridiagArrowMatrix> {
    let file = parse_header(text)?;
    let (m, ng, sizes) = (file.m, file.n_g, file.stage_sizes);
    if m == 0 {
        return Err(Error::Format("matrix has no stages".into()));
    }
    let mut diag = vec![None; m];
    let mut sub = vec![None; m - 1];
    let mut arrow = vec![None; if ng > 0 { m } else { 0 }];
    let mut corner = vec![None; usize::from(ng > 0)];
    for blk in file.blocks {
        let i = blk.index;
        match blk.name.as_str() {
            "diag" => {
                let n = sizes.get(i).copied().unwrap_or(0);
                place(&mut diag, blk, (n, n))?
            }
            "sub" => {
                let shape = (
                    sizes.get(i + 1).copied().unwrap_or(0),
                    sizes.get(i).copied().unwrap_or(0),
                );
                place(&mut sub, blk, shape)?
            }
            "arrow" => {
                let n = sizes.get(i).copied().unwrap_or(0);
                place(&mut arrow, blk, (ng, n))?
            }
            "corner" => place(&mut corner, blk, (ng, ng))?,
            other => return Err(Error::Format(format!("unknown block name {other:?}"))),
        }
    }
    let matrix = BlockTridiagArrowMatrix {
        diag: collect(diag, "diag")?,
        sub: collect(sub, "sub")?,
        arrow: collect(arrow, "arrow")?,
        corner: collect(corner, "corner")?.pop(),
    };
    matrix.validate()?;
    Ok(matrix)
}

pub fn vector_from_json(text: &str) -> Result<BlockVector> {
    let file = parse_header(text)?;
    let mut stages = vec![None; file.m];
    let mut global = vec![None; usize::from(file.n_g > 0)];
    for blk in file.blocks {
        match blk.name.as_str() {
            "stage" => {
                let n = file.stage_sizes.get(blk.index).copied().unwrap_or(0);
                place(&mut stages, blk, (n, 1))?
            }
            "global" => place(&mut global, blk, (file.n_g, 1))?,
            other => return Err(Error::Format(format!("unknown block name {other:?}"))),
        }
    }
    let stages = collect(stages, "stage")?
        .into_iter()
        .map(DenseBlock::into_data)
        .collect();
    let global = collect(global, "global")?
        .pop()
        .map(DenseBlock::into_data)
        .unwrap_or_default();
    let v = BlockVector::new(stages, global);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("vector contains non-finite values".into()));
    }
    Ok(v)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<BlockTridiagArrowMatrix> {
    matrix_from_json(&fs::read_to_string(path)?)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &BlockTridiagArrowMatrix) -> Result<()> {
    fs::write(path, matrix_to_json(m)?)?;
    Ok(())
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<BlockVector> {
    vector_from_json(&fs::read_to_string(path)?)
}

pub fn write_vector(path: impl AsRef<Path>, v: &BlockVector) -> Result<()> {
    fs::write(path, vector_to_json(v)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BlockTridiagArrowMatrix {
        let mut m = BlockTridiagArrowMatrix::identity(3, 2, 1);
        m.sub[1] = DenseBlock::from_rows(&[&[0.1, 1.0 / 3.0], &[-0.25, 1e-300]]);
        m.arrow[2] = DenseBlock::from_rows(&[&[std::f64::consts::PI, -2.0]]);
        m
    }

    #[test]
    fn matrix_round_trip_is_lossless() {
        let m = sample();
        let back = matrix_from_json(&matrix_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn vector_round_trip_is_lossless() {
        let v = BlockVector::new(vec![vec![0.1, 2.0 / 3.0], vec![-1e-17, 5.0]], vec![1e300]);
        assert_eq!(vector_from_json(&vector_to_json(&v).unwrap()).unwrap(), v);
        let v = BlockVector::new(vec![vec![1.0]], vec![]);
        assert_eq!(vector_from_json(&vector_to_json(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_f64(0.1), "1.0000000000000001e-1");
        let json = vector_to_json(&BlockVector::new(vec![vec![1.0 / 3.0]], vec![])).unwrap();
        assert!(json.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn rejects_bad_files() {
        let good = matrix_to_json(&sample()).unwrap();
        let bad_version = good.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(matrix_from_json(&bad_version), Err(Error::Format(_))));
        let bad_shape = good.replacen("\"rows\": 2", "\"rows\": 3", 1);
        assert!(matches!(matrix_from_json(&bad_shape), Err(Error::Format(_))));
        assert!(matches!(matrix_from_json("{"), Err(Error::Json(_))));
        let mut asym = sample();
        asym.diag[0][(1, 0)] = 5.0;
        let err = matrix_from_json(&matrix_to_json(&asym).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }
}
