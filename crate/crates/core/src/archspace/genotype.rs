use std::fmt::{self, Write as _};

use rand::Rng;
use serde::Serialize;
use serde_json::{Map, Value};

use super::ops::{CellType, OpKind, SearchSpace};
use crate::error::{Error, Result};

pub const GENOTYPE_VERSION: &str = "1";

/// One block of a discrete cell: two (input, operation) pairs whose results
/// are summed. Inputs 0 and 1 are the two previous cells' outputs; input
/// `2 + k` is block `k` of the same cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub input1: usize,
    pub input2: usize,
    pub op1: OpKind,
    pub op2: OpKind,
}

impl BlockSpec {
    pub fn new(input1: usize, input2: usize, op1: OpKind, op2: OpKind) -> Self {
        BlockSpec {
            input1,
            input2,
            op1,
            op2,
        }
    }

    pub fn edges(&self) -> [(usize, OpKind); 2] {
        [(self.input1, self.op1), (self.input2, self.op2)]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub space: SearchSpace,
    pub normal: Vec<BlockSpec>,
    pub reduction: Vec<BlockSpec>,
}

impl Genotype {
    pub fn blocks(&self) -> usize {
        self.normal.len()
    }

    pub fn cell(&self, kind: CellType) -> &[BlockSpec] {
        match kind {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn uses(&self, op: OpKind) -> bool {
        self.normal
            .iter()
            .chain(&self.reduction)
            .any(|b| b.op1 == op || b.op2 == op)
    }

    /// Uniformly random valid genotype; inputs and operations may repeat.
    pub fn random<R: Rng + ?Sized>(space: SearchSpace, blocks: usize, rng: &mut R) -> Genotype {
        let ops = space.ops();
        let mut cell = || {
            (0..blocks)
                .map(|i| {
                    BlockSpec::new(
                        rng.random_range(0..2 + i),
                        rng.random_range(0..2 + i),
                        ops[rng.random_range(0..ops.len())],
                        ops[rng.random_range(0..ops.len())],
                    )
                })
                .collect::<Vec<_>>()
        };
        let normal = cell();
        let reduction = cell();
        Genotype {
            space,
            normal,
            reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.normal.len();
        if b == 0 {
            return Err(Error::invalid("genotype needs at least one block"));
        }
        if self.reduction.len() != b {
            return Err(Error::invalid(format!(
                "normal cell has {b} blocks but reduction cell has {}",
                self.reduction.len()
            )));
        }
        for kind in [CellType::Normal, CellType::Reduction] {
            for (pos, block) in self.cell(kind).iter().enumerate() {
                for (input, op) in block.edges() {
                    if input >= 2 + pos {
                        return Err(Error::invalid(format!(
                            "{} block {pos}: input {input} is not addressable",
                            kind.name()
                        )));
                    }
                    if !self.space.contains(op) {
                        return Err(Error::invalid(format!(
                            "{} block {pos}: {op} is outside the {} space",
                            kind.name(),
                            self.space.tag()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct BlockDoc {
            i1: usize,
            i2: usize,
            o1: &'static str,
            o2: &'static str,
        }
        #[derive(Serialize)]
        struct Doc {
            version: &'static str,
            space: &'static str,
            #[serde(rename = "B")]
            b: usize,
            normal: Vec<BlockDoc>,
            reduction: Vec<BlockDoc>,
        }
        let blocks = |cell: &[BlockSpec]| {
            cell.iter()
                .map(|b| BlockDoc {
                    i1: b.input1,
                    i2: b.input2,
                    o1: b.op1.name(),
                    o2: b.op2.name(),
                })
                .collect()
        };
        let doc = Doc {
            version: GENOTYPE_VERSION,
            space: self.space.tag(),
            b: self.blocks(),
            normal: blocks(&self.normal),
            reduction: blocks(&self.reduction),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("genotype serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Genotype> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| Error::parse("$", format!("malformed JSON: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::parse("$", "expected an object"))?;
        check_keys(obj, "$", &["version", "space", "B", "normal", "reduction"])?;

        let version = field(obj, "$", "version")?
            .as_str()
            .ok_or_else(|| Error::parse("$.version", "expected a string"))?;
        if version != GENOTYPE_VERSION {
            return Err(Error::parse(
                "$.version",
                format!("unsupported version {version:?}, expected {GENOTYPE_VERSION:?}"),
            ));
        }
        let space: SearchSpace = field(obj, "$", "space")?
            .as_str()
            .ok_or_else(|| Error::parse("$.space", "expected a string"))?
            .parse()
            .map_err(|_| Error::parse("$.space", "expected \"reid\" or \"classic\""))?;
        let b = field(obj, "$", "B")?
            .as_u64()
            .filter(|&b| b >= 1)
            .ok_or_else(|| Error::parse("$.B", "expected a positive integer"))? as usize;

        let normal = parse_cell(field(obj, "$", "normal")?, "$.normal", b, space)?;
        let reduction = parse_cell(field(obj, "$", "reduction")?, "$.reduction", b, space)?;
        Ok(Genotype {
            space,
            normal,
            reduction,
        })
    }

    /// Plain-text dump of both cells.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for kind in [CellType::Normal, CellType::Reduction] {
            let _ = writeln!(out, "{} cell ({} blocks)", kind.name(), self.blocks());
            for (pos, b) in self.cell(kind).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  b{pos} = {}({}) + {}({})",
                    b.op1,
                    input_label(b.input1),
                    b.op2,
                    input_label(b.input2)
                );
            }
            let outs: Vec<String> = (0..self.blocks()).map(|i| format!("b{i}")).collect();
            let _ = writeln!(out, "  out = proj(concat[{}])", outs.join(", "));
        }
        out
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn input_label(i: usize) -> String {
    match i {
        0 => "c[k-2]".into(),
        1 => "c[k-1]".into(),
        j => format!("b{}", j - 2),
    }
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::parse(format!("{path}.{key}"), "unknown field"));
        }
    }
    Ok(())
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(format!("{path}.{key}"), "missing field"))
}

fn parse_cell(v: &Value, path: &str, b: usize, space: SearchSpace) -> Result<Vec<BlockSpec>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(path, "expected an array"))?;
    if arr.len() != b {
        return Err(Error::parse(
            path,
            format!("B={b} declared but {} blocks present", arr.len()),
        ));
    }
    arr.iter()
        .enumerate()
        .map(|(pos, item)| {
            let bpath = format!("{path}[{pos}]");
            let obj = item
                .as_object()
                .ok_or_else(|| Error::parse(&bpath, "expected an object"))?;
            check_keys(obj, &bpath, &["i1", "i2", "o1", "o2"])?;
            let input = |key: &str| -> Result<usize> {
                let p = format!("{bpath}.{key}");
                let i = field(obj, &bpath, key)?
                    .as_u64()
                    .ok_or_else(|| Error::parse(&p, "expected a non-negative integer"))?
                    as usize;
                if i >= 2 + pos {
                    return Err(Error::parse(
                        &p,
                        format!("input {i} not addressable from block {pos}"),
                    ));
                }
                Ok(i)
            };
            let op = |key: &str| -> Result<OpKind> {
                let p = format!("{bpath}.{key}");
                let name = field(obj, &bpath, key)?
                    .as_str()
                    .ok_or_else(|| Error::parse(&p, "expected a string"))?;
                let op: OpKind = name
                    .parse()
                    .map_err(|_| Error::parse(&p, format!("unknown operation {name:?}")))?;
                if !space.contains(op) {
                    return Err(Error::parse(
                        &p,
                        format!("{name} is not in the {} space", space.tag()),
                    ));
                }
                Ok(op)
            };
            Ok(BlockSpec {
                input1: input("i1")?,
                input2: input("i2")?,
                op1: op("o1")?,
                op2: op("o2")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Genotype {
        Genotype {
            space: SearchSpace::Reid,
            normal: vec![
                BlockSpec::new(0, 1, OpKind::SepConv3x3, OpKind::PartAware),
                BlockSpec::new(2, 0, OpKind::Identity, OpKind::MaxPool3x3),
            ],
            reduction: vec![
                BlockSpec::new(1, 0, OpKind::DilConv3x3, OpKind::AvgPool3x3),
                BlockSpec::new(2, 1, OpKind::SepConv3x3, OpKind::Identity),
            ],
        }
    }

    fn err_path(text: &str) -> String {
        match Genotype::from_json(text) {
            Err(Error::Parse { path, .. }) => path,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let g = sample();
        let text = g.to_json();
        assert_eq!(Genotype::from_json(&text).unwrap(), g);
        assert!(text.starts_with("{\n  \"version\": \"1\",\n  \"space\": \"reid\",\n  \"B\": 2,"));
    }

    #[test]
    fn missing_reduction_names_path() {
        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("reduction");
        assert_eq!(err_path(&v.to_string()), "$.reduction");
    }

    #[test]
    fn block_count_must_match_b() {
        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["B"] = Value::from(3);
        assert_eq!(err_path(&v.to_string()), "$.normal");
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["extra"] = Value::from(1);
        assert_eq!(err_path(&v.to_string()), "$.extra");

        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["normal"][1]["colour"] = Value::from("red");
        assert_eq!(err_path(&v.to_string()), "$.normal[1].colour");

        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["version"] = Value::from("0");
        assert_eq!(err_path(&v.to_string()), "$.version");
    }

    #[test]
    fn bad_inputs_and_ops_rejected() {
        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["normal"][0]["i2"] = Value::from(2);
        assert_eq!(err_path(&v.to_string()), "$.normal[0].i2");

        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["reduction"][1]["o1"] = Value::from("conv_7x7");
        assert_eq!(err_path(&v.to_string()), "$.reduction[1].o1");

        let mut v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["space"] = Value::from("classic");
        assert_eq!(err_path(&v.to_string()), "$.normal[0].o2");
    }

    #[test]
    fn render_mentions_every_block() {
        let text = sample().render();
        assert!(text.contains("b1 = identity(b0) + max_pool_3x3(c[k-2])"));
        assert!(text.contains("reduction cell (2 blocks)"));
    }
}
