//! Parameter containers.
//!
//! A model's parameters are a set of named blocks laid out contiguously in
//! declaration order. Each block is viewed as a matrix of rows: a block of
//! shape `[r, c1, c2, ..]` has `r` rows of `c1 * c2 * ..` values, a 1-D block
//! of shape `[n]` is a single row. Gradients and client deltas are row-sparse
//! ([`RowSparse`]) and are applied through a copy-on-write [`Overlay`], so a
//! client touching five item rows never copies the whole item matrix.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        validate_shape(&name, &shape)?;
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "block `{name}` has shape {shape:?} ({expected} values) but {} values",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn validate_shape(name: &str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "block `{name}` needs a non-empty shape of positive dimensions, got {shape:?}"
        )));
    }
    Ok(())
}

/// Global blocks `g` and local blocks `l` of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedParams {
    pub global: Vec<ParamBlock>,
    pub local: Vec<ParamBlock>,
}

impl PartitionedParams {
    pub fn new(global: Vec<ParamBlock>, local: Vec<ParamBlock>) -> Result<Self> {
        let mut seen = HashSet::new();
        for block in global.iter().chain(&local) {
            if !seen.insert(block.name.as_str()) {
                return Err(Error::Shape(format!(
                    "duplicate block name `{}`",
                    block.name
                )));
            }
        }
        Ok(Self { global, local })
    }

    pub fn global_len(&self) -> usize {
        self.global.iter().map(ParamBlock::len).sum()
    }

    pub fn local_len(&self) -> usize {
        self.local.iter().map(ParamBlock::len).sum()
    }

    /// Inverse of [`concat_params`]: refills a copy of `self` from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let total = self.global_len() + self.local_len();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "flat vector has {} values, partition needs {total}",
                flat.len()
            )));
        }
        let mut rest = flat;
        let mut refill = |blocks: &[ParamBlock]| {
            blocks
                .iter()
                .map(|b| {
                    let (head, tail) = rest.split_at(b.len());
                    rest = tail;
                    ParamBlock {
                        name: b.name.clone(),
                        shape: b.shape.clone(),
                        values: head.to_vec(),
                    }
                })
                .collect::<Vec<_>>()
        };
        let global = refill(&self.global);
        let local = refill(&self.local);
        Ok(Self { global, local })
    }
}

/// `g ∥ l`: global blocks then local blocks, each flattened in declaration order.
pub fn concat_params(p: &PartitionedParams) -> Vec<f64> {
    p.global
        .iter()
        .chain(&p.local)
        .flat_map(|b| b.values.iter().copied())
        .collect()
}

/// `dst + scale * src`, block by block.
pub fn axpy_blocks(dst: &[ParamBlock], scale: f64, src: &[ParamBlock]) -> Result<Vec<ParamBlock>> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!(
            "block count mismatch: {} vs {}",
            dst.len(),
            src.len()
        )));
    }
    dst.iter()
        .zip(src)
        .map(|(d, s)| {
            if d.shape != s.shape {
                return Err(Error::Shape(format!(
                    "block `{}` shape {:?} vs `{}` shape {:?}",
                    d.name, d.shape, s.name, s.shape
                )));
            }
            let values = d
                .values
                .iter()
                .zip(&s.values)
                .map(|(a, b)| a + scale * b)
                .collect();
            Ok(ParamBlock {
                name: d.name.clone(),
                shape: d.shape.clone(),
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    offset: usize,
    rows: usize,
    row_len: usize,
    row_base: usize,
}

impl BlockSpec {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.rows * self.row_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }
}

/// Names, shapes and offsets of a contiguous block list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<BlockSpec>,
    len: usize,
    total_rows: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut specs = Vec::new();
        let mut names = HashSet::new();
        let (mut offset, mut row_base) = (0, 0);
        for (name, shape) in blocks {
            let name = name.into();
            validate_shape(&name, &shape)?;
            if !names.insert(name.clone()) {
                return Err(Error::Shape(format!("duplicate block name `{name}`")));
            }
            let (rows, row_len) = if shape.len() == 1 {
                (1, shape[0])
            } else {
                (shape[0], shape[1..].iter().product())
            };
            specs.push(BlockSpec {
                name,
                shape,
                offset,
                rows,
                row_len,
                row_base,
            });
            offset += rows * row_len;
            row_base += rows;
        }
        Ok(Self {
            blocks: specs,
            len: offset,
            total_rows: row_base,
        })
    }

    pub fn empty() -> Self {
        Self {
            blocks: Vec::new(),
            len: 0,
            total_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &BlockSpec {
        &self.blocks[index]
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    pub fn row_offset(&self, block: usize, row: usize) -> usize {
        let b = &self.blocks[block];
        debug_assert!(row < b.rows, "row {row} out of range for `{}`", b.name);
        b.offset + row * b.row_len
    }

    fn row_id(&self, block: usize, row: usize) -> usize {
        self.blocks[block].row_base + row
    }
}

/// Read access to parameter rows, implemented by dense [`Params`] and by [`Overlay`].
pub trait ParamSource {
    fn layout(&self) -> &Layout;
    fn row(&self, block: usize, row: usize) -> &[f64];
}

/// Dense parameter vector with a shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "layout needs {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout_arc(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, index: usize) -> &[f64] {
        let b = self.layout.block(index);
        &self.values[b.offset..b.offset + b.len()]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let b = self.layout.block(index);
        let (start, len) = (b.offset, b.len());
        &mut self.values[start..start + len]
    }

    pub fn row_mut(&mut self, block: usize, row: usize) -> &mut [f64] {
        let start = self.layout.row_offset(block, row);
        let len = self.layout.block(block).row_len;
        &mut self.values[start..start + len]
    }

    /// `self += scale * other` for a dense vector of matching length.
    pub fn axpy(&mut self, scale: f64, other: &[f64]) -> Result<()> {
        if other.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "axpy length mismatch: {} vs {}",
                self.values.len(),
                other.len()
            )));
        }
        for (v, o) in self.values.iter_mut().zip(other) {
            *v += scale * o;
        }
        Ok(())
    }

    /// `self += scale * grad` for a row-sparse vector.
    pub fn axpy_sparse(&mut self, scale: f64, grad: &RowSparse) {
        for r in grad.rows() {
            for (v, g) in self.row_mut(r.block, r.row).iter_mut().zip(&r.values) {
                *v += scale * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_blocks(&self) -> Vec<ParamBlock> {
        self.layout
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| ParamBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                values: self.block(i).to_vec(),
            })
            .collect()
    }

    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        let layout = Layout::new(blocks.iter().map(|b| (b.name.clone(), b.shape.clone())))?;
        let values = blocks
            .iter()
            .flat_map(|b| b.values.iter().copied())
            .collect();
        Self::from_values(Arc::new(layout), values)
    }
}

impl ParamSource for Params {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn row(&self, block: usize, row: usize) -> &[f64] {
        let start = self.layout.row_offset(block, row);
        &self.values[start..start + self.layout.block(block).row_len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowEntry {
    pub block: usize,
    pub row: usize,
    pub values: Vec<f64>,
}

/// A vector over a layout that is non-zero only on the listed rows.
///
/// Rows appear at most once, in first-touched order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowSparse {
    rows: Vec<RowEntry>,
    index: HashMap<(usize, usize), usize>,
}

impl RowSparse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[RowEntry] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mutable access to a row, inserting zeros of length `len` on first touch.
    pub fn row_mut(&mut self, block: usize, row: usize, len: usize) -> &mut [f64] {
        let pos = *self.index.entry((block, row)).or_insert_with(|| {
            self.rows.push(RowEntry {
                block,
                row,
                values: vec![0.0; len],
            });
            self.rows.len() - 1
        });
        &mut self.rows[pos].values
    }

    pub fn scale(&mut self, factor: f64) {
        for r in &mut self.rows {
            r.values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.values.iter().all(|v| v.is_finite()))
    }

    pub fn to_dense(&self, layout: &Layout) -> Vec<f64> {
        let mut out = vec![0.0; layout.len()];
        self.add_into(layout, 1.0, &mut out);
        out
    }

    /// `out += scale * self`.
    pub fn add_into(&self, layout: &Layout, scale: f64, out: &mut [f64]) {
        for r in &self.rows {
            let start = layout.row_offset(r.block, r.row);
            for (o, v) in out[start..start + r.values.len()].iter_mut().zip(&r.values) {
                *o += scale * v;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

const UNTOUCHED: u32 = u32::MAX;

/// Copy-on-write view over a base parameter vector.
///
/// Reads fall through to the base until a row is written; written rows live
/// in a private arena. [`Overlay::into_delta`] returns `current - base` on the
/// touched rows only.
pub struct Overlay<'a> {
    base: &'a Params,
    slots: Vec<u32>,
    arena: Vec<f64>,
    touched: Vec<(usize, usize, usize)>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a Params) -> Self {
        Self {
            base,
            slots: vec![UNTOUCHED; base.layout.total_rows()],
            arena: Vec::new(),
            touched: Vec::new(),
        }
    }

    pub fn base(&self) -> &Params {
        self.base
    }

    pub fn row_mut(&mut self, block: usize, row: usize) -> &mut [f64] {
        let layout = &self.base.layout;
        let id = layout.row_id(block, row);
        let len = layout.block(block).row_len;
        if self.slots[id] == UNTOUCHED {
            let start = self.arena.len();
            self.arena.extend_from_slice(self.base.row(block, row));
            self.slots[id] = u32::try_from(self.touched.len()).expect("too many touched rows");
            self.touched.push((block, row, start));
        }
        let start = self.touched[self.slots[id] as usize].2;
        &mut self.arena[start..start + len]
    }

    pub fn apply(&mut self, scale: f64, grad: &RowSparse) {
        for r in grad.rows() {
            for (v, g) in self.row_mut(r.block, r.row).iter_mut().zip(&r.values) {
                *v += scale * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arena.iter().all(|v| v.is_finite())
    }

    pub fn into_delta(self) -> RowSparse {
        let mut delta = RowSparse::new();
        for &(block, row, start) in &self.touched {
            let base = self.base.row(block, row);
            let len = base.len();
            let current = &self.arena[start..start + len];
            let out = delta.row_mut(block, row, len);
            for ((o, c), b) in out.iter_mut().zip(current).zip(base) {
                *o = c - b;
            }
        }
        delta
    }

    pub fn materialize(&self) -> Params {
        let mut out = self.base.clone();
        for &(block, row, start) in &self.touched {
            let len = self.base.layout.block(block).row_len;
            out.row_mut(block, row)
                .copy_from_slice(&self.arena[start..start + len]);
        }
        out
    }
}

impl ParamSource for Overlay<'_> {
    fn layout(&self) -> &Layout {
        &self.base.layout
    }

    fn row(&self, block: usize, row: usize) -> &[f64] {
        let id = self.base.layout.row_id(block, row);
        match self.slots[id] {
            UNTOUCHED => self.base.row(block, row),
            slot => {
                let start = self.touched[slot as usize].2;
                &self.arena[start..start + self.base.layout.block(block).row_len]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(name: &str, values: Vec<f64>) -> ParamBlock {
        let n = values.len();
        ParamBlock::new(name, vec![n], values).unwrap()
    }

    #[test]
    fn concat_orders_global_then_local() {
        let p = PartitionedParams::new(
            vec![block("g", vec![1.0, 2.0])],
            vec![block("l", vec![3.0])],
        )
        .unwrap();
        assert_eq!(concat_params(&p), vec![1.0, 2.0, 3.0]);

        let p = PartitionedParams::new(vec![], vec![block("l", vec![5.0, 6.0])]).unwrap();
        assert_eq!(concat_params(&p), vec![5.0, 6.0]);
    }

    #[test]
    fn matfac_sized_concat() {
        let q = ParamBlock::new("items", vec![3, 2], vec![0.0; 6]).unwrap();
        let p = ParamBlock::new("user", vec![2], vec![0.0; 2]).unwrap();
        let parts = PartitionedParams::new(vec![q], vec![p]).unwrap();
        assert_eq!(concat_params(&parts).len(), 8);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = PartitionedParams::new(vec![block("a", vec![1.0])], vec![block("a", vec![2.0])]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn shape_must_match_values() {
        assert!(ParamBlock::new("x", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(ParamBlock::new("x", vec![0], vec![]).is_err());
    }

    #[test]
    fn axpy_examples() {
        let dst = [block("a", vec![1.0, 1.0])];
        let src = [block("a", vec![2.0, 4.0])];
        assert_eq!(
            axpy_blocks(&dst, 0.5, &src).unwrap()[0].values,
            vec![2.0, 3.0]
        );
        assert_eq!(
            axpy_blocks(&dst, 0.0, &src).unwrap()[0].values,
            vec![1.0, 1.0]
        );
        let out = axpy_blocks(&[block("a", vec![0.0])], -1.0, &[block("a", vec![7.0])]).unwrap();
        assert_eq!(out[0].values, vec![-7.0]);
    }

    #[test]
    fn axpy_shape_mismatch() {
        let err = axpy_blocks(&[block("a", vec![1.0])], 1.0, &[block("a", vec![1.0, 2.0])]);
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = axpy_blocks(&[block("a", vec![1.0])], 1.0, &[]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn layout_rows() {
        let layout = Layout::new([("q", vec![3, 2]), ("b", vec![4])]).unwrap();
        assert_eq!(layout.len(), 10);
        assert_eq!(layout.total_rows(), 4);
        assert_eq!(layout.row_offset(0, 2), 4);
        assert_eq!(layout.row_offset(1, 0), 6);
        assert_eq!(layout.block(1).row_len(), 4);
    }

    #[test]
    fn overlay_copy_on_write_and_delta() {
        let layout = Arc::new(Layout::new([("q", vec![3, 2])]).unwrap());
        let base = Params::from_values(layout, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut ov = Overlay::new(&base);
        let mut grad = RowSparse::new();
        grad.row_mut(0, 1, 2).copy_from_slice(&[1.0, -1.0]);
        ov.apply(0.5, &grad);
        assert_eq!(ov.row(0, 1), &[3.5, 3.5]);
        assert_eq!(ov.row(0, 0), &[1.0, 2.0]);
        assert_eq!(ov.materialize().values(), &[1.0, 2.0, 3.5, 3.5, 5.0, 6.0]);
        let delta = ov.into_delta();
        assert_eq!(delta.rows().len(), 1);
        assert_eq!(
            delta.to_dense(base.layout()),
            vec![0.0, 0.0, 0.5, -0.5, 0.0, 0.0]
        );
        assert_eq!(base.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_sparse_merges_repeated_rows() {
        let mut g = RowSparse::new();
        g.row_mut(0, 2, 1)[0] += 1.0;
        g.row_mut(0, 2, 1)[0] += 2.0;
        assert_eq!(g.rows().len(), 1);
        assert_eq!(g.rows()[0].values, vec![3.0]);
    }

    proptest! {
        #[test]
        fn unflatten_inverts_concat(
            g in proptest::collection::vec(proptest::collection::vec(-1e3..1e3f64, 1..6), 0..4),
            l in proptest::collection::vec(proptest::collection::vec(-1e3..1e3f64, 1..6), 0..4),
        ) {
            let mk = |prefix: &str, vs: &Vec<Vec<f64>>| vs.iter().enumerate()
                .map(|(i, v)| block(&format!("{prefix}{i}"), v.clone()))
                .collect::<Vec<_>>();
            let p = PartitionedParams::new(mk("g", &g), mk("l", &l)).unwrap();
            let flat = concat_params(&p);
            prop_assert_eq!(flat.len(), p.global_len() + p.local_len());
            prop_assert_eq!(p.unflatten(&flat).unwrap(), p);
        }

        #[test]
        fn dense_and_sparse_axpy_agree(
            vals in proptest::collection::vec(-10.0..10.0f64, 12),
            rows in proptest::collection::vec((0usize..4, -5.0..5.0f64), 0..8),
            scale in -2.0..2.0f64,
        ) {
            let layout = Arc::new(Layout::new([("m", vec![4, 3])]).unwrap());
            let base = Params::from_values(layout.clone(), vals).unwrap();
            let mut grad = RowSparse::new();
            for (r, v) in rows {
                grad.row_mut(0, r, 3).iter_mut().for_each(|x| *x += v);
            }
            let mut sparse = base.clone();
            sparse.axpy_sparse(scale, &grad);
            let mut dense = base.clone();
            dense.axpy(scale, &grad.to_dense(&layout)).unwrap();
            prop_assert_eq!(sparse.values(), dense.values());
        }
    }
}
