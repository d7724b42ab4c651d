//! Feature engineering: aggregates over the panel grid, lag and trend
//! columns, new-item flags, price features, one-hot and target-mean
//! encodings, assembled into a [`FeatureMatrix`].
//!
//! Same-block aggregate values are never emitted directly; only their
//! lags are, so no feature of a row can read that row's own month.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::TestRow;
use crate::panel::{
    CatalogTables, CategoryId, FeatureMatrix, ItemId, PanelGrid, SalesRecord, ShopId, SplitSpec,
    MISSING,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneHotField {
    Month,
    Year,
    ItemCategoryId,
    ShopId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKey {
    ShopId,
    ShopIdCategory,
}

/// Configuration of the derived feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub lag_offsets: Vec<usize>,
    pub trend_pairs: Vec<(usize, usize)>,
    pub onehot_fields: Vec<OneHotField>,
    pub encodings: Vec<EncodingKey>,
    pub burn_in_blocks: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            lag_offsets: vec![1, 2, 3, 12],
            trend_pairs: vec![(1, 2), (2, 3), (1, 12)],
            onehot_fields: vec![
                OneHotField::Month,
                OneHotField::Year,
                OneHotField::ItemCategoryId,
                OneHotField::ShopId,
            ],
            encodings: vec![EncodingKey::ShopId, EncodingKey::ShopIdCategory],
            burn_in_blocks: 12,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lag_offsets.iter().any(|&k| k == 0) {
            return Err(Error::Config("lag offsets must be >= 1".into()));
        }
        for &(j, k) in &self.trend_pairs {
            if !self.lag_offsets.contains(&j) || !self.lag_offsets.contains(&k) {
                return Err(Error::Config(format!(
                    "trend pair ({j},{k}) references a lag offset outside {:?}",
                    self.lag_offsets
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: FeatureSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Value used for a key absent from an aggregate table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    /// Absence means no transactions, i.e. a real zero.
    Zero,
    /// Absence means undefined (prices of unsold items).
    Missing,
}

/// Per-key, per-block table of one aggregate quantity.
#[derive(Debug, Clone)]
pub struct AggregateTable<K> {
    pub name: String,
    pub n_blocks: usize,
    pub fill: Fill,
    values: HashMap<K, Vec<f64>>,
    /// Per-block fallback for unseen keys (used by mean encodings,
    /// where the fallback is the expanding global mean).
    default_per_block: Option<Vec<f64>>,
}

impl<K: Hash + Eq + Copy> AggregateTable<K> {
    pub fn new(name: impl Into<String>, n_blocks: usize, fill: Fill) -> Self {
        AggregateTable {
            name: name.into(),
            n_blocks,
            fill,
            values: HashMap::new(),
            default_per_block: None,
        }
    }

    fn fill_value(&self, block: usize) -> f64 {
        if let Some(defaults) = &self.default_per_block {
            return defaults[block];
        }
        match self.fill {
            Fill::Zero => 0.0,
            Fill::Missing => MISSING,
        }
    }

    pub fn entry(&mut self, key: K) -> &mut Vec<f64> {
        let init = match self.fill {
            Fill::Zero => 0.0,
            Fill::Missing => MISSING,
        };
        let n = self.n_blocks;
        self.values.entry(key).or_insert_with(|| vec![init; n])
    }

    pub fn set(&mut self, key: K, block: usize, value: f64) {
        self.entry(key)[block] = value;
    }

    pub fn set_defaults(&mut self, defaults: Vec<f64>) {
        assert_eq!(defaults.len(), self.n_blocks);
        self.default_per_block = Some(defaults);
    }

    /// Value at (key, block); out-of-range blocks yield the missing
    /// sentinel, unknown keys the table's fill value.
    pub fn value(&self, key: K, block: isize) -> f64 {
        if block < 0 || block as usize >= self.n_blocks {
            return MISSING;
        }
        let block = block as usize;
        match self.values.get(&key) {
            Some(v) => v[block],
            None => self.fill_value(block),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.values.keys()
    }
}

/// Monthly revenue summed by shop.
pub fn agg_revenue_by_shop(grid: &PanelGrid) -> AggregateTable<ShopId> {
    let mut table = AggregateTable::new("revenue_shop", grid.n_blocks(), Fill::Zero);
    for cell in grid.iter_cells() {
        *table.entry(cell.shop_id).get_mut(cell.date_block).unwrap() += cell.revenue;
    }
    table
}

/// Monthly revenue summed by (shop, item category).
pub fn agg_revenue_by_shop_category(
    grid: &PanelGrid,
    catalog: &CatalogTables,
) -> AggregateTable<(ShopId, CategoryId)> {
    let mut table = AggregateTable::new("revenue_shop_category", grid.n_blocks(), Fill::Zero);
    for cell in grid.iter_cells() {
        if let Some(cat) = catalog.category_of(cell.item_id) {
            *table.entry((cell.shop_id, cat)).get_mut(cell.date_block).unwrap() += cell.revenue;
        }
    }
    table
}

/// Monthly count aggregates over the clipped grid targets.
#[derive(Debug, Clone)]
pub struct CountAggregates {
    pub by_shop: AggregateTable<ShopId>,
    pub by_shop_category: AggregateTable<(ShopId, CategoryId)>,
    pub by_item: AggregateTable<ItemId>,
    pub cumulative_by_item: AggregateTable<ItemId>,
}

pub fn agg_counts(grid: &PanelGrid, catalog: &CatalogTables) -> CountAggregates {
    let n = grid.n_blocks();
    let mut by_shop = AggregateTable::new("target_shop", n, Fill::Zero);
    let mut by_shop_category = AggregateTable::new("target_category", n, Fill::Zero);
    let mut by_item = AggregateTable::new("item_month_cnt", n, Fill::Zero);
    for cell in grid.iter_cells() {
        *by_shop.entry(cell.shop_id).get_mut(cell.date_block).unwrap() += cell.item_cnt_month;
        *by_item.entry(cell.item_id).get_mut(cell.date_block).unwrap() += cell.item_cnt_month;
        if let Some(cat) = catalog.category_of(cell.item_id) {
            *by_shop_category.entry((cell.shop_id, cat)).get_mut(cell.date_block).unwrap() +=
                cell.item_cnt_month;
        }
    }

    let mut cumulative_by_item = AggregateTable::new("item_cum_cnt", n, Fill::Zero);
    let items: Vec<ItemId> = by_item.keys().copied().collect();
    for item in items {
        let mut running = 0.0;
        let row = cumulative_by_item.entry(item);
        for b in 0..n {
            running += by_item.value(item, b as isize);
            row[b] = running;
        }
    }
    CountAggregates { by_shop, by_shop_category, by_item, cumulative_by_item }
}

/// 0/1 flag: item had zero cumulative sales through the previous month
/// but sold more than one unit in the current month.
pub fn flag_new_items(cumulative_by_item: &AggregateTable<ItemId>) -> AggregateTable<ItemId> {
    let n = cumulative_by_item.n_blocks;
    let mut flags = AggregateTable::new("item_new_flag", n, Fill::Zero);
    let items: Vec<ItemId> = cumulative_by_item.keys().copied().collect();
    for item in items {
        let row = flags.entry(item);
        for b in 0..n {
            let prev_cum =
                if b == 0 { 0.0 } else { cumulative_by_item.value(item, b as isize - 1) };
            let monthly = cumulative_by_item.value(item, b as isize) - prev_cum;
            row[b] = if prev_cum == 0.0 && monthly > 1.0 { 1.0 } else { 0.0 };
        }
    }
    flags
}

/// Monthly price aggregates, computed from the cleaned daily records.
/// Absence is the missing sentinel: an unsold item has no price.
#[derive(Debug, Clone)]
pub struct PriceAggregates {
    pub weighted_mean_by_item: AggregateTable<ItemId>,
    pub mean_by_item: AggregateTable<ItemId>,
    pub mean_by_item_shop: AggregateTable<(ItemId, ShopId)>,
}

pub fn price_features(records: &[SalesRecord], grid: &PanelGrid) -> PriceAggregates {
    let n = grid.n_blocks();
    let mut weighted_mean_by_item = AggregateTable::new("target_price_weighted", n, Fill::Missing);
    let mut mean_by_item = AggregateTable::new("target_price_mean", n, Fill::Missing);
    let mut mean_by_item_shop = AggregateTable::new("target_price_shop", n, Fill::Missing);

    // (weighted price sum, weight sum, plain price sum, row count)
    let mut item_acc: HashMap<(ItemId, usize), (f64, f64, f64, usize)> = HashMap::new();
    let mut item_shop_acc: HashMap<(ItemId, ShopId, usize), (f64, usize)> = HashMap::new();
    for r in records {
        let w = r.item_cnt_day.max(0.0);
        let acc = item_acc.entry((r.item_id, r.date_block)).or_default();
        acc.0 += r.item_price * w;
        acc.1 += w;
        acc.2 += r.item_price;
        acc.3 += 1;
        let acc = item_shop_acc.entry((r.item_id, r.shop_id, r.date_block)).or_default();
        acc.0 += r.item_price;
        acc.1 += 1;
    }

    for ((item, block), (wsum, w, psum, cnt)) in item_acc {
        let mean = psum / cnt as f64;
        mean_by_item.set(item, block, mean);
        // Zero total quantity: fall back to the unweighted mean.
        let weighted = if w > 0.0 { wsum / w } else { mean };
        weighted_mean_by_item.set(item, block, weighted);
    }
    for ((item, shop, block), (psum, cnt)) in item_shop_acc {
        mean_by_item_shop.set((item, shop), block, psum / cnt as f64);
    }
    PriceAggregates { weighted_mean_by_item, mean_by_item, mean_by_item_shop }
}

/// Target-mean encoding with an expanding window: the value at block b
/// is the mean clipped target over training blocks strictly before b
/// (capped at the training range), so no row's encoding can read its
/// own month. Validation and test blocks see the full training mean.
/// Unseen key levels fall back to the expanding global mean.
fn mean_encode_generic<K: Hash + Eq + Copy>(
    grid: &PanelGrid,
    name: &str,
    split: &SplitSpec,
    key_of: impl Fn(ShopId, ItemId) -> Option<K>,
) -> Result<AggregateTable<K>> {
    if grid.n_blocks() == 0 {
        return Err(Error::EmptyPartition("mean encoding needs training rows".into()));
    }
    // Size the table through the test block so request rows for a
    // not-yet-observed month still resolve.
    let n = grid.n_blocks().max(split.test_block + 1);
    let mut table = AggregateTable::new(name, n, Fill::Missing);
    let mut sums: HashMap<K, (f64, usize)> = HashMap::new();
    let mut global = (0.0, 0usize);
    let mut defaults = vec![MISSING; n];
    let mut snapshots: Vec<HashMap<K, f64>> = Vec::with_capacity(n);

    for b in 0..n {
        // Snapshot the accumulators before block b is added.
        defaults[b] = if global.1 > 0 { global.0 / global.1 as f64 } else { MISSING };
        let snap: HashMap<K, f64> =
            sums.iter().map(|(&k, &(s, c))| (k, s / c as f64)).collect();
        snapshots.push(snap);

        if b <= split.train_end {
            if let Some(blk) = grid.block(b) {
                for &shop in &blk.shops {
                    for &item in &blk.items {
                        if let Some(key) = key_of(shop, item) {
                            let t = blk.get(shop, item).unwrap().0;
                            let e = sums.entry(key).or_insert((0.0, 0));
                            e.0 += t;
                            e.1 += 1;
                            global.0 += t;
                            global.1 += 1;
                        }
                    }
                }
            }
        }
    }
    if global.1 == 0 {
        return Err(Error::EmptyPartition("mean encoding saw no training rows".into()));
    }
    for (b, snap) in snapshots.into_iter().enumerate() {
        for (key, mean) in snap {
            table.set(key, b, mean);
        }
    }
    table.set_defaults(defaults);
    Ok(table)
}

pub fn mean_encode_shop(grid: &PanelGrid, split: &SplitSpec) -> Result<AggregateTable<ShopId>> {
    mean_encode_generic(grid, "enc_shop_id", split, |shop, _| Some(shop))
}

pub fn mean_encode_shop_category(
    grid: &PanelGrid,
    catalog: &CatalogTables,
    split: &SplitSpec,
) -> Result<AggregateTable<(ShopId, CategoryId)>> {
    mean_encode_generic(grid, "enc_shop_id_category", split, |shop, item| {
        catalog.category_of(item).map(|c| (shop, c))
    })
}

/// All aggregate tables the matrix (and the sequence dataset) draw on.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub revenue_shop: AggregateTable<ShopId>,
    pub revenue_shop_category: AggregateTable<(ShopId, CategoryId)>,
    pub counts: CountAggregates,
    pub new_flag: AggregateTable<ItemId>,
    pub prices: PriceAggregates,
    pub enc_shop: AggregateTable<ShopId>,
    pub enc_shop_category: AggregateTable<(ShopId, CategoryId)>,
}

pub fn build_tables(
    grid: &PanelGrid,
    catalog: &CatalogTables,
    records: &[SalesRecord],
    split: &SplitSpec,
) -> Result<FeatureTables> {
    let counts = agg_counts(grid, catalog);
    let new_flag = flag_new_items(&counts.cumulative_by_item);
    Ok(FeatureTables {
        revenue_shop: agg_revenue_by_shop(grid),
        revenue_shop_category: agg_revenue_by_shop_category(grid, catalog),
        counts,
        new_flag,
        prices: price_features(records, grid),
        enc_shop: mean_encode_shop(grid, split)?,
        enc_shop_category: mean_encode_shop_category(grid, catalog, split)?,
    })
}

/// Column-at-a-time matrix assembly over a fixed row universe.
pub struct MatrixBuilder {
    rows: Vec<(usize, ShopId, ItemId)>,
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

impl MatrixBuilder {
    pub fn new(rows: Vec<(usize, ShopId, ItemId)>) -> Self {
        MatrixBuilder { rows, names: Vec::new(), cols: Vec::new() }
    }

    pub fn rows(&self) -> &[(usize, ShopId, ItemId)] {
        &self.rows
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.rows.len());
        self.names.push(name.into());
        self.cols.push(values);
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[f64]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.cols[i])
    }

    pub fn finish(self, target: Vec<f64>) -> Result<FeatureMatrix> {
        let n_rows = self.rows.len();
        let n_feat = self.names.len();
        let mut values = vec![0.0; n_rows * n_feat];
        for (c, col) in self.cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                values[r * n_feat + c] = v;
            }
        }
        let date_block = self.rows.iter().map(|r| r.0).collect();
        let row_keys = self.rows.iter().map(|r| (r.1, r.2)).collect();
        FeatureMatrix::new(self.names, values, target, date_block, row_keys)
    }
}

/// Append `<name>_lag_<k>` columns: the table value `k` months before
/// each row's block.
pub fn lag_join<K: Hash + Eq + Copy>(
    builder: &mut MatrixBuilder,
    table: &AggregateTable<K>,
    key_of: impl Fn(ShopId, ItemId) -> Option<K>,
    offsets: &[usize],
) {
    for &k in offsets {
        let values: Vec<f64> = builder
            .rows()
            .iter()
            .map(|&(b, shop, item)| match key_of(shop, item) {
                Some(key) => table.value(key, b as isize - k as isize),
                None => MISSING,
            })
            .collect();
        builder.push_column(format!("{}_lag_{}", table.name, k), values);
    }
}

/// Append `<base>_trend_<j>_<k>` = lag_j - lag_k columns. Missing
/// operands propagate.
pub fn trend_features(builder: &mut MatrixBuilder, base: &str, pairs: &[(usize, usize)]) {
    for &(j, k) in pairs {
        let a = builder
            .column_by_name(&format!("{base}_lag_{j}"))
            .unwrap_or_else(|| panic!("missing column {base}_lag_{j}"))
            .to_vec();
        let b = builder
            .column_by_name(&format!("{base}_lag_{k}"))
            .unwrap_or_else(|| panic!("missing column {base}_lag_{k}"))
            .to_vec();
        let values = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        builder.push_column(format!("{base}_trend_{j}_{k}"), values);
    }
}

/// Append indicator columns for one categorical field. Levels come from
/// the catalog (ids) or the training blocks (year); unseen levels at
/// transform time produce all-zero rows.
pub fn onehot(
    builder: &mut MatrixBuilder,
    field: OneHotField,
    catalog: &CatalogTables,
    split: &SplitSpec,
) {
    let levels: Vec<u32> = match field {
        OneHotField::Month => (0..12).collect(),
        OneHotField::Year => (0..=(split.train_end / 12) as u32).collect(),
        OneHotField::ItemCategoryId => catalog.categories.clone(),
        OneHotField::ShopId => catalog.shops.clone(),
    };
    let prefix = match field {
        OneHotField::Month => "month",
        OneHotField::Year => "year",
        OneHotField::ItemCategoryId => "item_category_id",
        OneHotField::ShopId => "shop_id",
    };
    for level in levels {
        let values: Vec<f64> = builder
            .rows()
            .iter()
            .map(|&(b, shop, item)| {
                let actual = match field {
                    OneHotField::Month => (b % 12) as u32,
                    OneHotField::Year => (b / 12) as u32,
                    OneHotField::ItemCategoryId => match catalog.category_of(item) {
                        Some(c) => c,
                        None => return 0.0,
                    },
                    OneHotField::ShopId => shop,
                };
                if actual == level {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        builder.push_column(format!("{prefix}_{level}"), values);
    }
}

/// The lagged base quantities, in assembly order.
fn lagged_bases<'a>(
    grid: &'a PanelGrid,
    catalog: &'a CatalogTables,
    tables: &'a FeatureTables,
    builder: &mut MatrixBuilder,
    spec: &FeatureSpec,
) {
    let offsets = &spec.lag_offsets;

    // The row's own clipped monthly target. A pair outside a past
    // block's universe genuinely sold nothing, hence 0 rather than
    // missing.
    for &k in offsets {
        let values: Vec<f64> = builder
            .rows()
            .iter()
            .map(|&(b, shop, item)| {
                let past = b as isize - k as isize;
                if past < 0 {
                    MISSING
                } else {
                    grid.target(past as usize, shop, item).unwrap_or(0.0)
                }
            })
            .collect();
        builder.push_column(format!("target_item_lag_{k}"), values);
    }

    lag_join(builder, &tables.counts.by_shop, |s, _| Some(s), offsets);
    lag_join(
        builder,
        &tables.counts.by_shop_category,
        |s, i| catalog.category_of(i).map(|c| (s, c)),
        offsets,
    );
    lag_join(builder, &tables.counts.by_item, |_, i| Some(i), offsets);
    lag_join(builder, &tables.counts.cumulative_by_item, |_, i| Some(i), offsets);
    lag_join(builder, &tables.new_flag, |_, i| Some(i), offsets);
    lag_join(builder, &tables.revenue_shop, |s, _| Some(s), offsets);
    lag_join(
        builder,
        &tables.revenue_shop_category,
        |s, i| catalog.category_of(i).map(|c| (s, c)),
        offsets,
    );
    lag_join(builder, &tables.prices.mean_by_item, |_, i| Some(i), offsets);
    lag_join(builder, &tables.prices.weighted_mean_by_item, |_, i| Some(i), offsets);
    lag_join(builder, &tables.prices.mean_by_item_shop, |s, i| Some((i, s)), offsets);
}

pub const LAGGED_BASE_NAMES: [&str; 11] = [
    "target_item",
    "target_shop",
    "target_category",
    "item_month_cnt",
    "item_cum_cnt",
    "item_new_flag",
    "revenue_shop",
    "revenue_shop_category",
    "target_price_mean",
    "target_price_weighted",
    "target_price_shop",
];

/// Assemble the full feature matrix: one row per grid cell with
/// `date_block >= burn_in_blocks`, plus optional request rows for a
/// test block the grid does not cover (their targets are the missing
/// sentinel).
pub fn assemble(
    grid: &PanelGrid,
    catalog: &CatalogTables,
    records: &[SalesRecord],
    spec: &FeatureSpec,
    split: &SplitSpec,
    test_request: Option<&[TestRow]>,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let tables = build_tables(grid, catalog, records, split)?;

    let mut rows: Vec<(usize, ShopId, ItemId)> = Vec::new();
    let mut target: Vec<f64> = Vec::new();
    for b in spec.burn_in_blocks..grid.n_blocks() {
        let blk = grid.block(b).unwrap();
        for &shop in &blk.shops {
            for &item in &blk.items {
                rows.push((b, shop, item));
                target.push(blk.get(shop, item).unwrap().0);
            }
        }
    }
    if let Some(request) = test_request {
        if split.test_block >= grid.n_blocks() {
            for row in request {
                rows.push((split.test_block, row.shop_id, row.item_id));
                target.push(MISSING);
            }
        }
    }

    let mut builder = MatrixBuilder::new(rows);

    // Raw id columns.
    let raw: Vec<(&str, Box<dyn Fn(usize, ShopId, ItemId) -> f64>)> = vec![
        ("item_id", Box::new(|_, _, i| i as f64)),
        ("shop_id", Box::new(|_, s, _| s as f64)),
        (
            "item_category",
            Box::new(|_, _, i| catalog.category_of(i).map_or(MISSING, |c| c as f64)),
        ),
        ("date_block_num", Box::new(|b, _, _| b as f64)),
        ("month", Box::new(|b, _, _| (b % 12) as f64)),
        ("year", Box::new(|b, _, _| (b / 12) as f64)),
    ];
    for (name, f) in raw {
        let values = builder.rows().iter().map(|&(b, s, i)| f(b, s, i)).collect();
        builder.push_column(name, values);
    }

    lagged_bases(grid, catalog, &tables, &mut builder, spec);
    for base in LAGGED_BASE_NAMES {
        trend_features(&mut builder, base, &spec.trend_pairs);
    }
    for &field in &spec.onehot_fields {
        onehot(&mut builder, field, catalog, split);
    }
    for &enc in &spec.encodings {
        match enc {
            EncodingKey::ShopId => {
                let values: Vec<f64> = builder
                    .rows()
                    .iter()
                    .map(|&(b, s, _)| tables.enc_shop.value(s, b as isize))
                    .collect();
                builder.push_column("enc_shop_id", values);
            }
            EncodingKey::ShopIdCategory => {
                let values: Vec<f64> = builder
                    .rows()
                    .iter()
                    .map(|&(b, s, i)| match catalog.category_of(i) {
                        Some(c) => tables.enc_shop_category.value((s, c), b as isize),
                        None => tables.enc_shop_category.value((u32::MAX, u32::MAX), b as isize),
                    })
                    .collect();
                builder.push_column("enc_shop_id_category", values);
            }
        }
    }

    builder.finish(target)
}

/// Write the matrix cache: feature columns then
/// `target,date_block,shop_id,item_id`. Missing values serialize as
/// empty fields.
pub fn write_matrix_csv(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = m.feature_names().join(",");
    header.push_str(",target,date_block,shop_id,item_id");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
    for r in 0..m.n_rows() {
        let mut line = String::new();
        for &v in m.row(r) {
            line.push_str(&fmt(v));
            line.push(',');
        }
        let (shop, item) = m.row_keys[r];
        line.push_str(&format!("{},{},{},{}", fmt(m.target[r]), m.date_block[r], shop, item));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a matrix cache written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let all: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    for required in ["target", "date_block", "shop_id", "item_id"] {
        if !all.contains(&required.to_string()) {
            return Err(Error::Schema { path: path.into(), column: required.into() });
        }
    }
    let n_meta = 4;
    let feature_names: Vec<String> = all[..all.len() - n_meta].to_vec();
    let parse_cell = |s: &str| -> f64 {
        let s = s.trim();
        if s.is_empty() {
            MISSING
        } else {
            s.parse().unwrap_or(MISSING)
        }
    };

    let mut values = Vec::new();
    let mut target = Vec::new();
    let mut date_block = Vec::new();
    let mut row_keys = Vec::new();
    let w = feature_names.len();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        if record.len() != all.len() {
            return Err(Error::Validation(format!("ragged row in {path:?}")));
        }
        for i in 0..w {
            values.push(parse_cell(&record[i]));
        }
        target.push(parse_cell(&record[w]));
        date_block.push(
            record[w + 1]
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad date_block in {path:?}")))?,
        );
        let shop = record[w + 2]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad shop_id in {path:?}")))?;
        let item = record[w + 3]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad item_id in {path:?}")))?;
        row_keys.push((shop, item));
    }
    FeatureMatrix::new(feature_names, values, target, date_block, row_keys)
}
