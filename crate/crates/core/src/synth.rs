//! Seeded synthetic retail dataset in the same file layout as the real
//! competition data. Monthly sales follow an autoregressive recipe —
//! a function of the previous month's sales, a per-shop effect, and a
//! month-of-year seasonal term, plus noise — so lag features carry
//! real signal.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::TestRow;
use crate::panel::{CatalogTables, SalesRecord};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_months: usize,
    pub n_shops: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_months: 24, n_shops: 20, n_items: 50, n_categories: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub records: Vec<SalesRecord>,
    pub catalog: CatalogTables,
    /// One row per (shop, item) pair for the month right after the
    /// last sales month.
    pub test_rows: Vec<TestRow>,
}

fn month_date(block: usize, day: u32) -> NaiveDate {
    let year = 2013 + (block / 12) as i32;
    let month = (block % 12) as u32 + 1;
    NaiveDate::from_ymd_opt(year, month, day).expect("valid synthetic date")
}

/// Deterministic generation for a given config.
pub fn generate(cfg: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shop_effect: Vec<f64> = (0..cfg.n_shops).map(|_| rng.gen_range(-0.8..2.0)).collect();
    let item_effect: Vec<f64> = (0..cfg.n_items).map(|_| rng.gen_range(-0.5..1.5)).collect();
    let season: Vec<f64> = (0..12)
        .map(|m| 1.4 * (2.0 * std::f64::consts::PI * m as f64 / 12.0).sin())
        .collect();
    let price: Vec<f64> = (0..cfg.n_items).map(|_| rng.gen_range(99.0..2500.0)).collect();

    let mut items = BTreeMap::new();
    for item in 0..cfg.n_items {
        items.insert(item as u32, (item % cfg.n_categories) as u32);
    }
    let catalog = CatalogTables {
        items,
        categories: (0..cfg.n_categories as u32).collect(),
        shops: (0..cfg.n_shops as u32).collect(),
    };

    let mut records = Vec::new();
    let mut prev = vec![vec![0.0f64; cfg.n_items]; cfg.n_shops];
    for block in 0..cfg.n_months {
        for shop in 0..cfg.n_shops {
            for item in 0..cfg.n_items {
                let noise = rng.gen_range(-0.6..0.6);
                let level = 0.4
                    + 0.65 * prev[shop][item]
                    + shop_effect[shop]
                    + item_effect[item]
                    + season[block % 12]
                    + noise;
                let cnt = level.round().clamp(0.0, 19.0);
                prev[shop][item] = cnt;
                if cnt == 0.0 {
                    continue;
                }
                // Split larger months across two transaction days.
                let splits: Vec<f64> = if cnt >= 2.0 {
                    let first = (cnt / 2.0).floor();
                    vec![first, cnt - first]
                } else {
                    vec![cnt]
                };
                for part in splits {
                    let day = rng.gen_range(1..=28);
                    records.push(SalesRecord {
                        date: month_date(block, day),
                        date_block: block,
                        shop_id: shop as u32,
                        item_id: item as u32,
                        item_price: price[item] * rng.gen_range(0.95..1.05),
                        item_cnt_day: part,
                    });
                }
            }
        }
    }

    let mut test_rows = Vec::new();
    let mut id = 0u64;
    for shop in 0..cfg.n_shops {
        for item in 0..cfg.n_items {
            test_rows.push(TestRow { id, shop_id: shop as u32, item_id: item as u32 });
            id += 1;
        }
    }
    SynthData { records, catalog, test_rows }
}

/// Writes the five competition-format CSVs into `dir`.
pub fn write_dataset(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };

    let mut sales = String::from("date,date_block_num,shop_id,item_id,item_price,item_cnt_day\n");
    for r in &data.records {
        let _ = writeln!(
            sales,
            "{},{},{},{},{},{}",
            r.date.format("%d.%m.%Y"),
            r.date_block,
            r.shop_id,
            r.item_id,
            r.item_price,
            r.item_cnt_day
        );
    }
    write("sales_train.csv", sales)?;

    let mut items = String::from("item_name,item_id,item_category_id\n");
    for (&item, &cat) in &data.catalog.items {
        let _ = writeln!(items, "Item {item},{item},{cat}");
    }
    write("items.csv", items)?;

    let mut cats = String::from("item_category_name,item_category_id\n");
    for &c in &data.catalog.categories {
        let _ = writeln!(cats, "Category {c},{c}");
    }
    write("item_categories.csv", cats)?;

    let mut shops = String::from("shop_name,shop_id\n");
    for &s in &data.catalog.shops {
        let _ = writeln!(shops, "Shop {s},{s}");
    }
    write("shops.csv", shops)?;

    let mut test = String::from("ID,shop_id,item_id\n");
    for r in &data.test_rows {
        let _ = writeln!(test, "{},{},{}", r.id, r.shop_id, r.item_id);
    }
    write("test.csv", test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.records, b.records);
        assert_eq!(a.test_rows.len(), cfg.n_shops * cfg.n_items);
    }

    #[test]
    fn different_seed_changes_data() {
        let a = generate(&SynthConfig::default());
        let b = generate(&SynthConfig { seed: 1, ..SynthConfig::default() });
        assert_ne!(a.records, b.records);
    }

    #[test]
    fn blocks_and_counts_in_range() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg);
        assert!(data.records.iter().all(|r| r.date_block < cfg.n_months));
        assert!(data.records.iter().all(|r| r.item_cnt_day > 0.0 && r.item_price > 0.0));
        // A meaningful share of pairs sells each month.
        assert!(data.records.len() > cfg.n_months * 100);
    }

    #[test]
    fn lag_signal_present() {
        // Consecutive monthly totals per pair correlate strongly.
        let cfg = SynthConfig::default();
        let data = generate(&cfg);
        let (grid, _) = ingest::build_grid(
            &data.records,
            &data.catalog,
            (crate::panel::CLIP_LO, crate::panel::CLIP_HI),
        );
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for b in 1..grid.n_blocks() {
            for cell in grid.block(b).unwrap().shops.clone() {
                for &item in &grid.block(b).unwrap().items {
                    let now = grid.target(b, cell, item).unwrap_or(0.0);
                    let before = grid.target(b - 1, cell, item).unwrap_or(0.0);
                    xs.push(before);
                    ys.push(now);
                }
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr > 0.6, "lag-1 correlation too weak: {corr}");
    }

    #[test]
    fn files_roundtrip_through_ingest() {
        let cfg = SynthConfig { n_months: 6, n_shops: 4, n_items: 8, ..SynthConfig::default() };
        let data = generate(&cfg);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();

        let (records, report) =
            ingest::load_sales(dir.path().join("sales_train.csv")).unwrap();
        assert_eq!(report.rows_read, data.records.len());
        assert_eq!(records.len(), data.records.len());
        let catalog = ingest::load_catalog(
            dir.path().join("items.csv"),
            dir.path().join("item_categories.csv"),
            dir.path().join("shops.csv"),
        )
        .unwrap();
        assert_eq!(catalog.items, data.catalog.items);
        let test_rows = ingest::load_test(dir.path().join("test.csv")).unwrap();
        assert_eq!(test_rows, data.test_rows);
    }
}
