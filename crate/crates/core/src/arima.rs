//! Per-series ARIMA(p,d,q): Hannan-Rissanen two-stage least-squares
//! estimation and one-step-ahead forecasting, fitted independently for
//! every (shop, item) monthly series. Short or singular series degrade
//! to a naive last-value model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::panel::{clip_target, ItemId, PanelGrid, ShopId, SplitSpec, CLIP_HI, CLIP_LO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        ArimaOrder { p: 1, d: 1, q: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaFit {
    pub order: ArimaOrder,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
    pub fallback_used: bool,
}

impl ArimaFit {
    fn naive(order: ArimaOrder) -> Self {
        ArimaFit {
            order,
            phi: Vec::new(),
            theta: Vec::new(),
            intercept: 0.0,
            sigma2: 0.0,
            fallback_used: true,
        }
    }
}

/// d-fold first differences; output shrinks by d.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::Validation(format!(
            "series of length {} cannot be differenced {d} times",
            series.len()
        )));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// Solve ordinary least squares via the normal equations. Returns None
/// when the system is singular.
fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = rows.first()?.len();
    let mut ata = vec![vec![0.0; k]; k];
    let mut atb = vec![0.0; k];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..k {
            atb[i] += row[i] * yi;
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..k {
        let pivot = (col..k).max_by(|&a, &b| {
            ata[a][col].abs().partial_cmp(&ata[b][col].abs()).unwrap()
        })?;
        if ata[pivot][col].abs() < 1e-10 {
            return None;
        }
        ata.swap(col, pivot);
        atb.swap(col, pivot);
        for r in col + 1..k {
            let f = ata[r][col] / ata[col][col];
            for c in col..k {
                ata[r][c] -= f * ata[col][c];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let mut v = atb[i];
        for j in i + 1..k {
            v -= ata[i][j] * beta[j];
        }
        beta[i] = v / ata[i][i];
    }
    beta.iter().all(|b| b.is_finite()).then_some(beta)
}

fn min_length(order: ArimaOrder) -> usize {
    8usize.max(order.p + order.q + order.d + 4)
}

/// Recursively compute model residuals over a differenced series,
/// treating pre-sample values as zero.
fn residuals(w: &[f64], fit: &ArimaFit) -> Vec<f64> {
    let mut e = vec![0.0; w.len()];
    for t in 0..w.len() {
        let mut pred = fit.intercept;
        for (i, &phi) in fit.phi.iter().enumerate() {
            if t > i {
                pred += phi * w[t - 1 - i];
            }
        }
        for (j, &theta) in fit.theta.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        e[t] = w[t] - pred;
    }
    e
}

/// Hannan-Rissanen estimation. Stage 1 fits a long autoregression by
/// least squares to obtain residual proxies; stage 2 regresses the
/// differenced series on its own lags and lagged residual proxies.
pub fn fit_arima(series: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in series".into()));
    }
    if series.len() < min_length(order) {
        return Ok(ArimaFit::naive(order));
    }
    let w = difference(series, order.d)?;
    let n = w.len();
    let (p, q) = (order.p, order.q);

    if p == 0 && q == 0 {
        // Pure drift model: w_t = c + e_t.
        let c = w.iter().sum::<f64>() / n as f64;
        let sigma2 = w.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / n as f64;
        return Ok(ArimaFit {
            order,
            phi: Vec::new(),
            theta: Vec::new(),
            intercept: c,
            sigma2,
            fallback_used: false,
        });
    }

    // Stage 1: long AR for residual proxies.
    let m = (p + q + 3).min(n / 2);
    if m == 0 || n <= m + 2 {
        return Ok(ArimaFit::naive(order));
    }
    let rows: Vec<Vec<f64>> = (m..n)
        .map(|t| {
            let mut row = Vec::with_capacity(m + 1);
            row.push(1.0);
            row.extend((1..=m).map(|i| w[t - i]));
            row
        })
        .collect();
    let ys: Vec<f64> = (m..n).map(|t| w[t]).collect();
    let Some(ar) = lstsq(&rows, &ys) else {
        return Ok(ArimaFit::naive(order));
    };
    let mut proxies = vec![0.0; n];
    for t in m..n {
        let mut pred = ar[0];
        for i in 1..=m {
            pred += ar[i] * w[t - i];
        }
        proxies[t] = w[t] - pred;
    }

    // Stage 2: regress on p own lags and q lagged residual proxies.
    let t0 = p.max(q).max(m);
    if n <= t0 + p + q + 1 {
        return Ok(ArimaFit::naive(order));
    }
    let rows: Vec<Vec<f64>> = (t0..n)
        .map(|t| {
            let mut row = Vec::with_capacity(1 + p + q);
            row.push(1.0);
            row.extend((1..=p).map(|i| w[t - i]));
            row.extend((1..=q).map(|j| proxies[t - j]));
            row
        })
        .collect();
    let ys: Vec<f64> = (t0..n).map(|t| w[t]).collect();
    let Some(beta) = lstsq(&rows, &ys) else {
        return Ok(ArimaFit::naive(order));
    };

    let fit = ArimaFit {
        order,
        intercept: beta[0],
        phi: beta[1..=p].to_vec(),
        theta: beta[1 + p..].to_vec(),
        sigma2: 0.0,
        fallback_used: false,
    };
    let e = residuals(&w, &fit);
    let sigma2 = e[t0..].iter().map(|v| v * v).sum::<f64>() / (n - t0) as f64;
    if !sigma2.is_finite() {
        return Ok(ArimaFit::naive(order));
    }
    Ok(ArimaFit { sigma2, ..fit })
}

/// One-step-ahead forecast on the original (undifferenced) scale.
pub fn forecast_one(fit: &ArimaFit, series: &[f64]) -> f64 {
    if fit.fallback_used || series.is_empty() {
        return series.last().copied().unwrap_or(0.0);
    }
    let d = fit.order.d;
    if series.len() <= d {
        return series.last().copied().unwrap_or(0.0);
    }
    let w = difference(series, d).expect("length checked above");
    let e = residuals(&w, fit);
    let n = w.len();
    let mut pred = fit.intercept;
    for (i, &phi) in fit.phi.iter().enumerate() {
        if n > i {
            pred += phi * w[n - 1 - i];
        }
    }
    for (j, &theta) in fit.theta.iter().enumerate() {
        if n > j {
            pred += theta * e[n - 1 - j];
        }
    }
    // Undifference: add back the last value of each difference level.
    let mut levels = vec![series.to_vec()];
    for k in 0..d {
        let next = difference(&levels[k], 1).expect("length checked above");
        levels.push(next);
    }
    let mut forecast = pred;
    for k in (0..d).rev() {
        forecast += levels[k].last().unwrap();
    }
    forecast
}

#[derive(Debug, Clone)]
pub struct SeriesDiagnostic {
    pub shop_id: ShopId,
    pub item_id: ItemId,
    pub fit: ArimaFit,
}

///// Panel-wide result: clipped one-step forecasts for the validation and
/// test blocks, per (shop, item).
#[derive(Debug, Clone, Default)]
pub struct ArimaPanel {
    pub predictions: HashMap<(ShopId, ItemId), (f64, f64)>,
    pub diagnostics: Vec<SeriesDiagnostic>,
    pub fallback_count: usize,
}

impl ArimaPanel {
    /// Validation-block prediction; unseen pairs forecast 0.
    pub fn val_prediction(&self, shop: ShopId, item: ItemId) -> f64 {
        self.predictions.get(&(shop, item)).map_or(0.0, |p| p.0)
    }

    pub fn test_prediction(&self, shop: ShopId, item: ItemId) -> f64 {
        self.predictions.get(&(shop, item)).map_or(0.0, |p| p.1)
    }
}

/// Fit one model per (shop, item) series over the training blocks and
/// forecast the validation and test blocks. The test forecast extends
/// the history with the validation forecast and steps once more.
pub fn fit_all(grid: &PanelGrid, order: ArimaOrder, split: &SplitSpec) -> Result<ArimaPanel> {
    let mut pairs: Vec<(ShopId, ItemId)> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for b in 0..=split.train_end.min(grid.n_blocks().saturating_sub(1)) {
            let blk = grid.block(b).unwrap();
            for &shop in &blk.shops {
                for &item in &blk.items {
                    if seen.insert((shop, item)) {
                        pairs.push((shop, item));
                    }
                }
            }
        }
    }
    pairs.sort_unstable();

    let n_train_blocks = split.train_end + 1;
    let results: Vec<(ShopId, ItemId, ArimaFit, f64, f64)> = pairs
        .par_iter()
        .map(|&(shop, item)| {
            let series: Vec<f64> = (0..n_train_blocks)
                .map(|b| grid.target(b, shop, item).unwrap_or(0.0))
                .collect();
            let fit = fit_arima(&series, order).unwrap_or_else(|_| ArimaFit::naive(order));
            let val = forecast_one(&fit, &series);
            let mut extended = series;
            extended.push(val);
            let test = forecast_one(&fit, &extended);
            (
                shop,
                item,
                fit,
                clip_target(val, CLIP_LO, CLIP_HI),
                clip_target(test, CLIP_LO, CLIP_HI),
            )
        })
        .collect();

    let mut panel = ArimaPanel::default();
    for (shop, item, fit, val, test) in results {
        if fit.fallback_used {
            panel.fallback_count += 1;
        }
        panel.predictions.insert((shop, item), (val, test));
        panel.diagnostics.push(SeriesDiagnostic { shop_id: shop, item_id: item, fit });
    }
    Ok(panel)
}

/// Per-series diagnostics CSV:
/// `shop_id,item_id,p,d,q,phi_1..,theta_1..,fallback_used,sigma2`.
pub fn write_diagnostics_csv(
    panel: &ArimaPanel,
    order: ArimaOrder,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("shop_id,item_id,p,d,q");
    for i in 1..=order.p {
        header.push_str(&format!(",phi_{i}"));
    }
    for j in 1..=order.q {
        header.push_str(&format!(",theta_{j}"));
    }
    header.push_str(",fallback_used,sigma2");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for diag in &panel.diagnostics {
        let f = &diag.fit;
        let mut line = format!(
            "{},{},{},{},{}",
            diag.shop_id, diag.item_id, f.order.p, f.order.d, f.order.q
        );
        for i in 0..order.p {
            line.push_str(&format!(",{}", f.phi.get(i).copied().unwrap_or(0.0)));
        }
        for j in 0..order.q {
            line.push_str(&format!(",{}", f.theta.get(j).copied().unwrap_or(0.0)));
        }
        line.push_str(&format!(",{},{}", f.fallback_used, f.sigma2));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
