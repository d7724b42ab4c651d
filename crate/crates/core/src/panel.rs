//! Shared data model: daily records, the monthly panel grid, feature
//! matrices, and date-block split descriptors.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type ShopId = u32;
pub type ItemId = u32;
pub type CategoryId = u32;

/// Sentinel for feature values that are undefined (e.g. a lag reaching
/// before the start of history). Distinct from 0, which is a real value
/// in the zero-filled grid.
pub const MISSING: f64 = f64::NAN;

/// Target clipping bounds used throughout: predictions are scored on
/// counts clipped to [0, 20].
pub const CLIP_LO: f64 = 0.0;
pub const CLIP_HI: f64 = 20.0;

/// One daily transaction row from the raw sales table.
#[derive(Debug, Clone, PartialEq)]
pub struct SalesRecord {
    pub date: NaiveDate,
    pub date_block: usize,
    pub shop_id: ShopId,
    pub item_id: ItemId,
    pub item_price: f64,
    /// Units sold that day; negative values are returns.
    pub item_cnt_day: f64,
}

/// Joined reference tables: item -> category plus the known shop and
/// category id sets.
#[derive(Debug, Clone, Default)]
pub struct CatalogTables {
    pub items: BTreeMap<ItemId, CategoryId>,
    pub categories: Vec<CategoryId>,
    pub shops: Vec<ShopId>,
}

impl CatalogTables {
    pub fn category_of(&self, item: ItemId) -> Option<CategoryId> {
        self.items.get(&item).copied()
    }
}

/// One month x shop x item cell of the panel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelCell {
    pub date_block: usize,
    pub shop_id: ShopId,
    pub item_id: ItemId,
    pub item_cnt_month: f64,
    pub revenue: f64,
}

/// Per-block dense universe: the cross product of shops and items that
/// each appear in at least one transaction of the block. Unsold pairs
/// carry a zero count.
#[derive(Debug, Clone, Default)]
pub struct BlockCells {
    pub shops: Vec<ShopId>,
    pub items: Vec<ItemId>,
    cnt: Vec<f64>,
    revenue: Vec<f64>,
}

impl BlockCells {
    pub fn new(mut shops: Vec<ShopId>, mut items: Vec<ItemId>) -> Self {
        shops.sort_unstable();
        shops.dedup();
        items.sort_unstable();
        items.dedup();
        let n = shops.len() * items.len();
        BlockCells { shops, items, cnt: vec![0.0; n], revenue: vec![0.0; n] }
    }

    fn index(&self, shop: ShopId, item: ItemId) -> Option<usize> {
        let s = self.shops.binary_search(&shop).ok()?;
        let i = self.items.binary_search(&item).ok()?;
        Some(s * self.items.len() + i)
    }

    pub fn add(&mut self, shop: ShopId, item: ItemId, cnt: f64, revenue: f64) {
        let idx = self
            .index(shop, item)
            .expect("(shop, item) outside the block universe");
        self.cnt[idx] += cnt;
        self.revenue[idx] += revenue;
    }

    pub fn get(&self, shop: ShopId, item: ItemId) -> Option<(f64, f64)> {
        self.index(shop, item).map(|i| (self.cnt[i], self.revenue[i]))
    }

    pub fn len(&self) -> usize {
        self.shops.len() * self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense month x (shop, item) grid of monthly targets and revenue.
/// Immutable after construction apart from the explicit target-zeroing
/// hook used by leakage audits.
#[derive(Debug, Clone, Default)]
pub struct PanelGrid {
    blocks: Vec<BlockCells>,
}

impl PanelGrid {
    pub fn new(blocks: Vec<BlockCells>) -> Self {
        PanelGrid { blocks }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, b: usize) -> Option<&BlockCells> {
        self.blocks.get(b)
    }

    pub fn block_mut(&mut self, b: usize) -> Option<&mut BlockCells> {
        self.blocks.get_mut(b)
    }

    /// Clipped monthly count for a cell, if the pair is in the block
    /// universe.
    pub fn target(&self, b: usize, shop: ShopId, item: ItemId) -> Option<f64> {
        self.blocks.get(b).and_then(|blk| blk.get(shop, item)).map(|(c, _)| c)
    }

    /// Iterate all cells in (date_block, shop_id, item_id) order.
    pub fn iter_cells(&self) -> impl Iterator<Item = PanelCell> + '_ {
        self.blocks.iter().enumerate().flat_map(|(b, blk)| {
            blk.shops.iter().flat_map(move |&shop| {
                blk.items.iter().map(move |&item| {
                    let (cnt, rev) = blk.get(shop, item).unwrap();
                    PanelCell {
                        date_block: b,
                        shop_id: shop,
                        item_id: item,
                        item_cnt_month: cnt,
                        revenue: rev,
                    }
                })
            })
        })
    }

    /// Overwrite every monthly count in `block` with zero. Used by the
    /// leakage audit to verify that same-block features never read
    /// same-block targets.
    pub fn zero_block_targets(&mut self, block: usize) {
        if let Some(blk) = self.blocks.get_mut(block) {
            for c in &mut blk.cnt {
                *c = 0.0;
            }
        }
    }
}

/// Clip `x` into [lo, hi]. Total; NaN passes through.
pub fn clip_target(x: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    x.max(lo).min(hi)
}

/// Row-aligned numeric feature columns plus target, block, and key
/// metadata. Missing values are `MISSING` (NaN).
#[derive(Debug, Clone, Default)]
pub struct FeatureMatrix {
    feature_names: Vec<String>,
    values: Vec<f64>, // row-major, n_rows * n_features
    pub target: Vec<f64>,
    pub date_block: Vec<usize>,
    pub row_keys: Vec<(ShopId, ItemId)>,
}

impl FeatureMatrix {
    pub fn new(
        feature_names: Vec<String>,
        values: Vec<f64>,
        target: Vec<f64>,
        date_block: Vec<usize>,
        row_keys: Vec<(ShopId, ItemId)>,
    ) -> Result<Self> {
        let n_rows = target.len();
        let n_feat = feature_names.len();
        if values.len() != n_rows * n_feat {
            return Err(Error::Validation(format!(
                "value buffer has {} entries, expected {} rows x {} features",
                values.len(),
                n_rows,
                n_feat
            )));
        }
        if date_block.len() != n_rows || row_keys.len() != n_rows {
            return Err(Error::Validation("row metadata length mismatch".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(FeatureMatrix { feature_names, values, target, date_block, row_keys })
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.feature_names.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let w = self.feature_names.len();
        &self.values[row * w..(row + 1) * w]
    }

    /// Copy of one feature column.
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.value(r, col)).collect()
    }

    fn take_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let w = self.feature_names.len();
        let mut values = Vec::with_capacity(rows.len() * w);
        let mut target = Vec::with_capacity(rows.len());
        let mut date_block = Vec::with_capacity(rows.len());
        let mut row_keys = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.row(r));
            target.push(self.target[r]);
            date_block.push(self.date_block[r]);
            row_keys.push(self.row_keys[r]);
        }
        FeatureMatrix {
            feature_names: self.feature_names.clone(),
            values,
            target,
            date_block,
            row_keys,
        }
    }
}

/// Date-block split: train on early blocks, hold out one validation and
/// one test month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Last training block, inclusive. Training covers every matrix row
    /// with `date_block <= train_end`.
    pub train_end: usize,
    pub validation_block: usize,
    pub test_block: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, validation_block: usize, test_block: usize) -> Result<Self> {
        if !(train_end < validation_block && validation_block < test_block) {
            return Err(Error::InvalidSplit(format!(
                "need train_end < validation_block < test_block, got {train_end}, {validation_block}, {test_block}"
            )));
        }
        Ok(SplitSpec { train_end, validation_block, test_block })
    }
}

impl Default for SplitSpec {
    /// The dataset's canonical split: months 0..=32 train, 33
    /// validation, 34 (November 2015) test.
    fn default() -> Self {
        SplitSpec { train_end: 32, validation_block: 33, test_block: 34 }
    }
}

/// Partition matrix rows by date block. Rows in blocks that fall in no
/// partition (gaps after `train_end`) are dropped.
pub fn split_rows(
    m: &FeatureMatrix,
    s: &SplitSpec,
) -> Result<(FeatureMatrix, FeatureMatrix, FeatureMatrix)> {
    SplitSpec::new(s.train_end, s.validation_block, s.test_block)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (r, &b) in m.date_block.iter().enumerate() {
        if b <= s.train_end {
            train.push(r);
        } else if b == s.validation_block {
            val.push(r);
        } else if b == s.test_block {
            test.push(r);
        }
    }
    for (name, rows) in [("train", &train), ("validation", &val), ("test", &test)] {
        if rows.is_empty() {
            return Err(Error::EmptyPartition(format!(
                "no rows fall in the {name} partition of {s:?}"
            )));
        }
    }
    Ok((m.take_rows(&train), m.take_rows(&val), m.take_rows(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_matrix(blocks: &[usize]) -> FeatureMatrix {
        let n = blocks.len();
        FeatureMatrix::new(
            vec!["f0".into()],
            (0..n).map(|i| i as f64).collect(),
            vec![1.0; n],
            blocks.to_vec(),
            vec![(0, 0); n],
        )
        .unwrap()
    }

    #[test]
    fn clip_target_bounds() {
        assert_eq!(clip_target(25.0, 0.0, 20.0), 20.0);
        assert_eq!(clip_target(-3.0, 0.0, 20.0), 0.0);
        assert_eq!(clip_target(7.5, 0.0, 20.0), 7.5);
    }

    #[test]
    fn split_partitions_by_block() {
        let m = toy_matrix(&[30, 31, 32, 33, 34]);
        let s = SplitSpec::new(32, 33, 34).unwrap();
        let (train, val, test) = split_rows(&m, &s).unwrap();
        assert_eq!(train.date_block, vec![30, 31, 32]);
        assert_eq!(val.date_block, vec![33]);
        assert_eq!(test.date_block, vec![34]);
        // ordering preserved
        assert_eq!(train.column(0), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn split_rejects_bad_spec() {
        assert!(SplitSpec::new(33, 33, 34).is_err());
        let m = toy_matrix(&[30, 33, 34]);
        let bad = SplitSpec { train_end: 33, validation_block: 33, test_block: 34 };
        assert!(split_rows(&m, &bad).is_err());
    }

    #[test]
    fn split_empty_partition_is_error() {
        let m = toy_matrix(&[30, 31, 33]); // no block-34 rows
        let s = SplitSpec::new(32, 33, 34).unwrap();
        match split_rows(&m, &s) {
            Err(Error::EmptyPartition(_)) => {}
            other => panic!("expected empty-partition error, got {other:?}"),
        }
    }

    #[test]
    fn grid_universe_zero_fill() {
        let mut blk = BlockCells::new(vec![1], vec![10, 11]);
        blk.add(1, 10, 3.0, 30.0);
        assert_eq!(blk.get(1, 10), Some((3.0, 30.0)));
        assert_eq!(blk.get(1, 11), Some((0.0, 0.0)));
        assert_eq!(blk.get(2, 10), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipping_idempotent(x in -1e6f64..1e6, lo in -50.0f64..0.0, hi in 0.0f64..50.0) {
                let once = clip_target(x, lo, hi);
                prop_assert_eq!(clip_target(once, lo, hi), once);
            }

            #[test]
            fn rows_land_in_at_most_one_partition(blocks in proptest::collection::vec(0usize..40, 1..60)) {
                let m = toy_matrix(&blocks);
                let s = SplitSpec::new(32, 33, 34).unwrap();
                if let Ok((train, val, test)) = split_rows(&m, &s) {
                    let total = train.n_rows() + val.n_rows() + test.n_rows();
                    prop_assert!(total <= m.n_rows());
                    let dropped = blocks.iter().filter(|&&b| b > 34).count();
                    prop_assert_eq!(total + dropped, m.n_rows());
                }
            }
        }
    }
}
