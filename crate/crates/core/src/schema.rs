//! Block-partitioned field vectors.
//!
//! A [`BlockSchema`] is an ordered list of named blocks, each with a fixed
//! vocabulary. A [`FieldVector`] is a dense vector laid out block after block
//! in schema order. Users, jobs, and learned user latents all share this
//! layout, which is what lets a learned vector stand in for a profile vector
//! without changing the scoring model.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDef {
    pub name: String,
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    blocks: Vec<BlockDef>,
}

#[derive(Debug, Clone)]
struct Block {
    def: BlockDef,
    offset: usize,
    index: HashMap<String, usize>,
}

/// Ordered set of term blocks with fixed vocabularies.
#[derive(Debug, Clone)]
pub struct BlockSchema {
    blocks: Vec<Block>,
    dim: usize,
}

impl PartialEq for BlockSchema {
    fn eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.def == b.def)
    }
}

impl BlockSchema {
    /// Builds a schema, case-folding vocabulary terms.
    pub fn new(blocks: Vec<BlockDef>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Validation("schema has no blocks".into()));
        }
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (i, def) in blocks.into_iter().enumerate() {
            if def.name.is_empty() {
                return Err(Error::Validation(format!("block {i} has an empty name")));
            }
            if seen.insert(def.name.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate block name `{}`",
                    def.name
                )));
            }
            if def.vocabulary.is_empty() {
                return Err(Error::Validation(format!(
                    "block `{}` has an empty vocabulary",
                    def.name
                )));
            }
            let vocabulary: Vec<String> = def.vocabulary.iter().map(|t| fold_term(t)).collect();
            let mut index = HashMap::with_capacity(vocabulary.len());
            for (j, term) in vocabulary.iter().enumerate() {
                if index.insert(term.clone(), j).is_some() {
                    return Err(Error::Validation(format!(
                        "duplicate term `{term}` in block `{}`",
                        def.name
                    )));
                }
            }
            let len = vocabulary.len();
            out.push(Block {
                def: BlockDef {
                    name: def.name,
                    vocabulary,
                },
                offset,
                index,
            });
            offset += len;
        }
        Ok(Self {
            blocks: out,
            dim: offset,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("schema: {e}")))?;
        Self::new(file.blocks)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SchemaFile {
            blocks: self.blocks.iter().map(|b| b.def.clone()).collect(),
        })
        .expect("schema serializes")
    }

    /// Total dimension across all blocks.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.def.name.as_str())
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.def.name == name)
    }

    pub fn block_name(&self, block: usize) -> &str {
        &self.blocks[block].def.name
    }

    pub fn vocabulary(&self, block: usize) -> &[String] {
        &self.blocks[block].def.vocabulary
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let b = &self.blocks[block];
        b.offset..b.offset + b.def.vocabulary.len()
    }

    /// Position of a (case-folded) term inside its block.
    pub fn term_index(&self, block: usize, term: &str) -> Option<usize> {
        self.blocks[block].index.get(&fold_term(term)).copied()
    }

    /// Hex digest of the canonical schema serialization.
    pub fn hash(&self) -> String {
        crate::hash::digest_str(&self.to_json())
    }

    /// Serializes a vector as `{block_name: [values...]}`.
    pub fn vector_to_json(&self, v: &FieldVector) -> Value {
        let mut map = Map::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let values = v.values[self.block_range(i)].to_vec();
            map.insert(b.def.name.clone(), Value::from(values));
        }
        Value::Object(map)
    }

    pub fn vector_from_json(&self, value: &Value) -> Result<FieldVector> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Validation("field vector must be a JSON object".into()))?;
        if let Some(k) = obj.keys().find(|k| self.block_index(k).is_none()) {
            return Err(Error::Validation(format!("unknown block `{k}`")));
        }
        let mut values = vec![0.0; self.dim];
        for (i, b) in self.blocks.iter().enumerate() {
            let arr = obj
                .get(&b.def.name)
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Validation(format!("missing block `{}`", b.def.name)))?;
            let range = self.block_range(i);
            if arr.len() != range.len() {
                return Err(Error::DimensionMismatch {
                    expected: range.len(),
                    found: arr.len(),
                });
            }
            for (slot, x) in values[range].iter_mut().zip(arr) {
                *slot = x
                    .as_f64()
                    .ok_or_else(|| Error::Validation(format!("non-numeric entry in `{}`", b.def.name)))?;
            }
        }
        FieldVector::new(self, values)
    }
}

/// Case folding used for every term comparison.
pub fn fold_term(term: &str) -> String {
    term.trim().to_lowercase()
}

/// Dense vector laid out according to a [`BlockSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldVector {
    values: Vec<f64>,
}

impl FieldVector {
    pub fn new(schema: &BlockSchema, values: Vec<f64>) -> Result<Self> {
        if values.len() != schema.dim() {
            return Err(Error::DimensionMismatch {
                expected: schema.dim(),
                found: values.len(),
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("field vector".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(schema: &BlockSchema) -> Self {
        Self {
            values: vec![0.0; schema.dim()],
        }
    }

    /// Wraps raw values without schema validation. Callers own the layout.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block<'a>(&'a self, schema: &BlockSchema, block: usize) -> &'a [f64] {
        &self.values[schema.block_range(block)]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Infinity-norm distance.
    pub fn max_abs_diff(&self, other: &FieldVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn squared_distance(&self, other: &FieldVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Per-block term lists, in schema block order.
pub type BlockTerms = Vec<Vec<String>>;

/// Term counts per block, each block then scaled to unit L2 norm.
///
/// A block with no in-vocabulary terms is left at zero. Out-of-vocabulary
/// terms are ignored here; loaders drop and count them earlier.
pub fn vectorize_terms(terms: &BlockTerms, schema: &BlockSchema) -> FieldVector {
    let mut values = vec![0.0; schema.dim()];
    for (block, block_terms) in terms.iter().enumerate().take(schema.num_blocks()) {
        let range = schema.block_range(block);
        for term in block_terms {
            if let Some(i) = schema.term_index(block, term) {
                values[range.start + i] += 1.0;
            }
        }
        let slice = &mut values[range];
        let norm = slice.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            slice.iter_mut().for_each(|x| *x /= norm);
        }
    }
    FieldVector { values }
}
