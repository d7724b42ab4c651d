//! Raw CSV parsing, cleaning, and aggregation of daily transactions
//! into the monthly panel grid.
//!
//! Input files follow the competition layout: `sales_train.csv`,
//! `items.csv`, `item_categories.csv`, `shops.csv`, `test.csv`.

use chrono::NaiveDate;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::panel::{
    clip_target, BlockCells, CatalogTables, ItemId, PanelGrid, SalesRecord, ShopId,
};

/// Audit trail of the cleaning pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleaningReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    pub values_imputed: usize,
    /// Monthly targets altered by clipping (filled in by `build_grid`).
    pub clip_events: usize,
}

/// One row of the prediction request file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestRow {
    pub id: u64,
    pub shop_id: ShopId,
    pub item_id: ItemId,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn header_index(
    rdr: &mut csv::Reader<std::fs::File>,
    path: &Path,
    columns: &[&str],
) -> Result<Vec<usize>> {
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    columns
        .iter()
        .map(|col| {
            headers
                .iter()
                .position(|h| h.trim() == *col)
                .ok_or_else(|| Error::Schema { path: path.into(), column: col.to_string() })
        })
        .collect()
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%d.%m.%Y")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d"))
        .ok()
}

/// Parse and clean the daily sales table.
///
/// Rows with a negative price get the median price of the same
/// (shop, item) when at least one other observation exists; otherwise
/// the row is dropped. Malformed rows are dropped and counted.
pub fn load_sales(path: impl AsRef<Path>) -> Result<(Vec<SalesRecord>, CleaningReport)> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let idx = header_index(
        &mut rdr,
        path,
        &["date", "date_block_num", "shop_id", "item_id", "item_price", "item_cnt_day"],
    )?;

    let mut report = CleaningReport::default();
    let mut raw: Vec<SalesRecord> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        report.rows_read += 1;
        let parsed = (|| {
            let date = parse_date(record.get(idx[0])?)?;
            let date_block = record.get(idx[1])?.trim().parse::<usize>().ok()?;
            let shop_id = record.get(idx[2])?.trim().parse::<ShopId>().ok()?;
            let item_id = record.get(idx[3])?.trim().parse::<ItemId>().ok()?;
            let item_price = record.get(idx[4])?.trim().parse::<f64>().ok()?;
            let item_cnt_day = record.get(idx[5])?.trim().parse::<f64>().ok()?;
            if !item_price.is_finite() || !item_cnt_day.is_finite() {
                return None;
            }
            Some(SalesRecord { date, date_block, shop_id, item_id, item_price, item_cnt_day })
        })();
        match parsed {
            Some(r) => raw.push(r),
            None => report.rows_dropped += 1,
        }
    }

    // Median imputation for negative prices, per (shop, item).
    let mut sibling_prices: HashMap<(ShopId, ItemId), Vec<f64>> = HashMap::new();
    for r in &raw {
        if r.item_price >= 0.0 {
            sibling_prices.entry((r.shop_id, r.item_id)).or_default().push(r.item_price);
        }
    }
    for prices in sibling_prices.values_mut() {
        prices.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    let mut records = Vec::with_capacity(raw.len());
    for mut r in raw {
        if r.item_price < 0.0 {
            match sibling_prices.get(&(r.shop_id, r.item_id)) {
                Some(prices) if !prices.is_empty() => {
                    r.item_price = median_of_sorted(prices);
                    report.values_imputed += 1;
                }
                _ => {
                    report.rows_dropped += 1;
                    continue;
                }
            }
        }
        records.push(r);
    }
    report.rows_kept = records.len();
    Ok((records, report))
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Load and join the three reference tables.
pub fn load_catalog(
    items_path: impl AsRef<Path>,
    categories_path: impl AsRef<Path>,
    shops_path: impl AsRef<Path>,
) -> Result<CatalogTables> {
    let items_path = items_path.as_ref();
    let categories_path = categories_path.as_ref();
    let shops_path = shops_path.as_ref();

    let mut rdr = open_reader(categories_path)?;
    let idx = header_index(&mut rdr, categories_path, &["item_category_id"])?;
    let mut categories = BTreeSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(categories_path, e))?;
        let id = record
            .get(idx[0])
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Validation(format!("bad category row in {categories_path:?}")))?;
        categories.insert(id);
    }

    let mut rdr = open_reader(items_path)?;
    let idx = header_index(&mut rdr, items_path, &["item_id", "item_category_id"])?;
    let mut items = BTreeMap::new();
    let mut dangling = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(items_path, e))?;
        let item = record
            .get(idx[0])
            .and_then(|s| s.trim().parse::<ItemId>().ok())
            .ok_or_else(|| Error::Validation(format!("bad item row in {items_path:?}")))?;
        let cat = record
            .get(idx[1])
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Validation(format!("bad item row in {items_path:?}")))?;
        if !categories.contains(&cat) {
            dangling.push(item);
        }
        items.insert(item, cat);
    }
    if !dangling.is_empty() {
        dangling.sort_unstable();
        return Err(Error::DanglingCategory { item_ids: dangling });
    }

    let mut rdr = open_reader(shops_path)?;
    let idx = header_index(&mut rdr, shops_path, &["shop_id"])?;
    let mut shops = BTreeSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(shops_path, e))?;
        let id = record
            .get(idx[0])
            .and_then(|s| s.trim().parse::<ShopId>().ok())
            .ok_or_else(|| Error::Validation(format!("bad shop row in {shops_path:?}")))?;
        shops.insert(id);
    }

    Ok(CatalogTables {
        items,
        categories: categories.into_iter().collect(),
        shops: shops.into_iter().collect(),
    })
}

/// Load the prediction request file (`ID,shop_id,item_id`), in file
/// order.
pub fn load_test(path: impl AsRef<Path>) -> Result<Vec<TestRow>> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let idx = header_index(&mut rdr, path, &["ID", "shop_id", "item_id"])?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let parse = |i: usize| record.get(idx[i]).and_then(|s| s.trim().parse::<u64>().ok());
        match (parse(0), parse(1), parse(2)) {
            (Some(id), Some(shop), Some(item)) => rows.push(TestRow {
                id,
                shop_id: shop as ShopId,
                item_id: item as ItemId,
            }),
            _ => return Err(Error::Validation(format!("bad test row in {path:?}"))),
        }
    }
    Ok(rows)
}

/// Aggregate cleaned daily records into the monthly grid. Returns the
/// grid and the number of monthly targets altered by clipping.
pub fn build_grid(
    records: &[SalesRecord],
    _catalog: &CatalogTables,
    clip: (f64, f64),
) -> (PanelGrid, usize) {
    let n_blocks = records.iter().map(|r| r.date_block + 1).max().unwrap_or(0);

    let mut shops_per_block = vec![Vec::new(); n_blocks];
    let mut items_per_block = vec![Vec::new(); n_blocks];
    for r in records {
        shops_per_block[r.date_block].push(r.shop_id);
        items_per_block[r.date_block].push(r.item_id);
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for (shops, items) in shops_per_block.into_iter().zip(items_per_block) {
        blocks.push(BlockCells::new(shops, items));
    }
    for r in records {
        blocks[r.date_block].add(r.shop_id, r.item_id, r.item_cnt_day, r.item_price * r.item_cnt_day);
    }

    // Clip monthly sums in place.
    let mut clip_events = 0;
    let mut grid = PanelGrid::new(blocks);
    for b in 0..n_blocks {
        let blk = grid.block_mut(b).unwrap();
        let (shops, items) = (blk.shops.clone(), blk.items.clone());
        for shop in &shops {
            for item in &items {
                let (cnt, rev) = blk.get(*shop, *item).unwrap();
                let clipped = clip_target(cnt, clip.0, clip.1);
                if clipped != cnt {
                    clip_events += 1;
                    blk.add(*shop, *item, clipped - cnt, 0.0);
                    let _ = rev;
                }
            }
        }
    }
    (grid, clip_events)
}

/// Write the grid cache: `date_block,shop_id,item_id,item_cnt_month,revenue`,
/// sorted by (date_block, shop_id, item_id).
pub fn write_grid_csv(grid: &PanelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "date_block,shop_id,item_id,item_cnt_month,revenue")
        .map_err(|e| Error::io(path, e))?;
    for cell in grid.iter_cells() {
        writeln!(
            w,
            "{},{},{},{},{}",
            cell.date_block, cell.shop_id, cell.item_id, cell.item_cnt_month, cell.revenue
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a grid cache written by [`write_grid_csv`].
pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<PanelGrid> {
    let path = path.as_ref();
    let mut rdr = open_reader(path)?;
    let idx = header_index(
        &mut rdr,
        path,
        &["date_block", "shop_id", "item_id", "item_cnt_month", "revenue"],
    )?;

    let mut cells: Vec<(usize, ShopId, ItemId, f64, f64)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let get = |i: usize| record.get(idx[i]).map(|s| s.trim());
        let parsed = (|| {
            Some((
                get(0)?.parse::<usize>().ok()?,
                get(1)?.parse::<ShopId>().ok()?,
                get(2)?.parse::<ItemId>().ok()?,
                get(3)?.parse::<f64>().ok()?,
                get(4)?.parse::<f64>().ok()?,
            ))
        })();
        match parsed {
            Some(c) => cells.push(c),
            None => return Err(Error::Validation(format!("bad grid cache row in {path:?}"))),
        }
    }

    let n_blocks = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let mut shops_per_block = vec![Vec::new(); n_blocks];
    let mut items_per_block = vec![Vec::new(); n_blocks];
    for c in &cells {
        shops_per_block[c.0].push(c.1);
        items_per_block[c.0].push(c.2);
    }
    let mut blocks: Vec<BlockCells> = shops_per_block
        .into_iter()
        .zip(items_per_block)
        .map(|(shops, items)| BlockCells::new(shops, items))
        .collect();
    for (b, shop, item, cnt, rev) in cells {
        blocks[b].add(shop, item, cnt, rev);
    }
    Ok(PanelGrid::new(blocks))
}
