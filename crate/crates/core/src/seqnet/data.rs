//! Sample construction for the sequence model: per-cell dynamic
//! windows read from the panel grid and aggregate tables, static
//! feature vectors from calendar/identity/encoding columns, and a
//! train-fitted standardizer.

use serde::{Deserialize, Serialize};

use super::SeqSample;
use crate::featuregen::FeatureTables;
use crate::panel::{CatalogTables, ItemId, PanelGrid, ShopId};

/// Default look-back window length in months.
pub const WINDOW: usize = 12;

pub const DYNAMIC_CHANNELS: [&str; 6] = [
    "target_item",
    "target_shop",
    "target_category",
    "item_month_cnt",
    "revenue_shop",
    "target_price_mean",
];

/// Samples plus the `(block, shop, item)` key of each row, in order.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<SeqSample>,
    pub keys: Vec<(usize, ShopId, ItemId)>,
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// Builds one sample per key. The dynamic window covers the `window`
/// months strictly before the key's block, oldest first; months before
/// the grid start contribute zeros. Targets for blocks outside the
/// grid are NaN (prediction-only rows).
pub fn build_samples(
    grid: &PanelGrid,
    catalog: &CatalogTables,
    tables: &FeatureTables,
    keys: &[(usize, ShopId, ItemId)],
    window: usize,
) -> SampleSet {
    let n_shops = catalog.shops.len();
    let n_categories = catalog.categories.len();
    let mut samples = Vec::with_capacity(keys.len());
    for &(block, shop, item) in keys {
        let category = catalog.category_of(item).unwrap_or(0);
        let mut dynamic = Vec::with_capacity(window);
        for back in (1..=window).rev() {
            let m = block as isize - back as isize;
            let own = if m < 0 {
                0.0
            } else {
                grid.target(m as usize, shop, item).unwrap_or(0.0)
            };
            dynamic.push(vec![
                finite_or_zero(own),
                finite_or_zero(tables.counts.by_shop.value(shop, m)),
                finite_or_zero(tables.counts.by_shop_category.value((shop, category), m)),
                finite_or_zero(tables.counts.by_item.value(item, m)),
                finite_or_zero(tables.revenue_shop.value(shop, m)),
                finite_or_zero(tables.prices.mean_by_item.value(item, m)),
            ]);
        }

        let mut static_feats = Vec::with_capacity(12 + 1 + n_shops + n_categories + 2);
        let month = block % 12;
        for i in 0..12 {
            static_feats.push(if i == month { 1.0 } else { 0.0 });
        }
        static_feats.push((block / 12) as f64);
        let shop_pos = catalog.shops.binary_search(&shop).ok();
        for s in 0..n_shops {
            static_feats.push(if Some(s) == shop_pos { 1.0 } else { 0.0 });
        }
        let cat_pos = catalog.categories.binary_search(&category).ok();
        for c in 0..n_categories {
            static_feats.push(if Some(c) == cat_pos { 1.0 } else { 0.0 });
        }
        static_feats.push(finite_or_zero(tables.enc_shop.value(shop, block as isize)));
        static_feats.push(finite_or_zero(
            tables.enc_shop_category.value((shop, category), block as isize),
        ));

        let target = grid.target(block, shop, item).unwrap_or(f64::NAN);
        samples.push(SeqSample { dynamic, static_feats, target });
    }
    SampleSet { samples, keys: keys.to_vec() }
}

/// Per-channel standardization statistics fitted on training samples
/// and reapplied verbatim to validation/test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub dyn_mean: Vec<f64>,
    pub dyn_std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

impl Scaler {
    pub fn fit(samples: &[SeqSample]) -> Self {
        let d_dyn = samples
            .first()
            .and_then(|s| s.dynamic.first())
            .map_or(0, |x| x.len());
        let d_static = samples.first().map_or(0, |s| s.static_feats.len());
        let mut dyn_sum = vec![0.0; d_dyn];
        let mut dyn_sq = vec![0.0; d_dyn];
        let mut dyn_n = 0.0;
        let mut st_sum = vec![0.0; d_static];
        let mut st_sq = vec![0.0; d_static];
        for s in samples {
            for step in &s.dynamic {
                for (c, &v) in step.iter().enumerate() {
                    dyn_sum[c] += v;
                    dyn_sq[c] += v * v;
                }
                dyn_n += 1.0;
            }
            for (c, &v) in s.static_feats.iter().enumerate() {
                st_sum[c] += v;
                st_sq[c] += v * v;
            }
        }
        let st_n = samples.len() as f64;
        let stats = |sum: &[f64], sq: &[f64], n: f64| -> (Vec<f64>, Vec<f64>) {
            let mean: Vec<f64> = sum.iter().map(|&s| if n > 0.0 { s / n } else { 0.0 }).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(&q, &m)| {
                    let var = if n > 0.0 { (q / n - m * m).max(0.0) } else { 0.0 };
                    let sd = var.sqrt();
                    if sd > 1e-12 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, std)
        };
        let (dyn_mean, dyn_std) = stats(&dyn_sum, &dyn_sq, dyn_n);
        let (static_mean, static_std) = stats(&st_sum, &st_sq, st_n);
        Scaler { dyn_mean, dyn_std, static_mean, static_std }
    }

    pub fn transform(&self, samples: &mut [SeqSample]) {
        for s in samples {
            for step in &mut s.dynamic {
                for (c, v) in step.iter_mut().enumerate() {
                    *v = (*v - self.dyn_mean[c]) / self.dyn_std[c];
                }
            }
            for (c, v) in s.static_feats.iter_mut().enumerate() {
                *v = (*v - self.static_mean[c]) / self.static_std[c];
            }
        }
    }
}

/// All cells of one block, as sample keys.
pub fn block_keys(grid: &PanelGrid, block: usize) -> Vec<(usize, ShopId, ItemId)> {
    let mut keys = Vec::new();
    if let Some(cells) = grid.block(block) {
        for &shop in &cells.shops {
            for &item in &cells.items {
                keys.push((block, shop, item));
            }
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featuregen::build_tables;
    use crate::panel::{BlockCells, SplitSpec};
    use std::collections::BTreeMap;

    fn toy() -> (PanelGrid, CatalogTables, FeatureTables, SplitSpec) {
        let mut blocks = Vec::new();
        for b in 0..6 {
            let mut cells = BlockCells::new(vec![0, 1], vec![10, 11]);
            cells.add(0, 10, b as f64, b as f64 * 2.0);
            cells.add(1, 11, 1.0, 3.0);
            blocks.push(cells);
        }
        let grid = PanelGrid::new(blocks);
        let catalog = CatalogTables {
            items: BTreeMap::from([(10, 0), (11, 1)]),
            categories: vec![0, 1],
            shops: vec![0, 1],
        };
        let split = SplitSpec::new(3, 4, 5).unwrap();
        let tables = build_tables(&grid, &catalog, &[], &split).unwrap();
        (grid, catalog, tables, split)
    }

    #[test]
    fn window_is_history_only_oldest_first() {
        let (grid, catalog, tables, _) = toy();
        let set = build_samples(&grid, &catalog, &tables, &[(4, 0, 10)], 3);
        let s = &set.samples[0];
        assert_eq!(s.dynamic.len(), 3);
        // Own-target channel for months 1, 2, 3.
        assert_eq!(s.dynamic[0][0], 1.0);
        assert_eq!(s.dynamic[1][0], 2.0);
        assert_eq!(s.dynamic[2][0], 3.0);
        assert_eq!(s.target, 4.0);
    }

    #[test]
    fn pre_history_months_are_zero() {
        let (grid, catalog, tables, _) = toy();
        let set = build_samples(&grid, &catalog, &tables, &[(1, 0, 10)], 3);
        let s = &set.samples[0];
        assert!(s.dynamic[0].iter().all(|&v| v == 0.0));
        assert!(s.dynamic[1].iter().all(|&v| v == 0.0));
        assert_eq!(s.dynamic[2][0], 0.0); // month 0 target is 0
    }

    #[test]
    fn static_vector_encodes_month_shop_category() {
        let (grid, catalog, tables, _) = toy();
        let set = build_samples(&grid, &catalog, &tables, &[(4, 1, 11)], 3);
        let st = &set.samples[0].static_feats;
        // month one-hot (12), year, shops (2), categories (2), 2 encodings
        assert_eq!(st.len(), 12 + 1 + 2 + 2 + 2);
        assert_eq!(st[4], 1.0); // month 4
        assert_eq!(st[12], 0.0); // year 0
        assert_eq!(st[13 + 1], 1.0); // shop 1
        assert_eq!(st[15 + 1], 1.0); // category 1
    }

    #[test]
    fn out_of_grid_target_is_nan() {
        let (grid, catalog, tables, _) = toy();
        let set = build_samples(&grid, &catalog, &tables, &[(7, 0, 10)], 3);
        assert!(set.samples[0].target.is_nan());
        // but the window still resolves from the grid
        assert_eq!(set.samples[0].dynamic[0][0], 4.0);
    }

    #[test]
    fn scaler_standardizes_train_and_keeps_stats_for_others() {
        let (grid, catalog, tables, _) = toy();
        let keys: Vec<_> = (2..5).flat_map(|b| block_keys(&grid, b)).collect();
        let mut set = build_samples(&grid, &catalog, &tables, &keys, 3);
        let scaler = Scaler::fit(&set.samples);
        scaler.transform(&mut set.samples);
        // Transformed own-target channel has near-zero mean.
        let mut sum = 0.0;
        let mut n = 0.0;
        for s in &set.samples {
            for step in &s.dynamic {
                sum += step[0];
                n += 1.0;
            }
        }
        assert!((sum / n).abs() < 1e-9);
        // Constant channels get unit std and pass through unchanged shape.
        assert!(set.samples.iter().all(|s| s
            .static_feats
            .iter()
            .all(|v| v.is_finite())));
    }

    #[test]
    fn block_keys_cover_cross_product() {
        let (grid, _, _, _) = toy();
        let keys = block_keys(&grid, 2);
        assert_eq!(keys.len(), 4);
        assert!(keys.contains(&(2, 0, 11)));
        assert!(block_keys(&grid, 99).is_empty());
    }
}
