//! IoU, mean boundary accuracy, and corpus evaluation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::data::{read_image_png, read_mask_png, BinaryMask, CorpusManifest};
use crate::decoder::{CrmModel, RefineMode};
use crate::error::{CrmError, Result};
use crate::inference::{binarize, refine_multires_traced, RefinementSchedule};

/// Intersection over union of two equally sized binary masks.
///
/// Two empty masks agree perfectly by convention: 1.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(CrmError::shape(format!(
            "iou: mask shapes {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        inter += (x & y) as u64;
        union += (x | y) as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary pixels: mask value differs from a 4-neighbor.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (h, w) = (mask.h, mask.w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(y, x);
            let differs = (x + 1 < w && mask.get(y, x + 1) != v)
                || (x > 0 && mask.get(y, x - 1) != v)
                || (y + 1 < h && mask.get(y + 1, x) != v)
                || (y > 0 && mask.get(y - 1, x) != v);
            out[y * w + x] = differs;
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if f[v[0]] == f64::INFINITY {
            // First finite parabola seen so far.
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_edt(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(seeds.len(), h * w);
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    // Columns then rows.
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = dist[y * w + x];
        }
        edt_1d(&col_in, &mut col_out);
        for y in 0..h {
            dist[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        edt_1d(&dist[y * w..(y + 1) * w], &mut row_out);
        dist[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    dist
}

/// Band radii for mean boundary accuracy: 5 radii uniformly spaced from
/// 3 px to 2% of the image diagonal (at least 3), rounded and deduplicated.
pub fn mba_band_radii(h: usize, w: usize) -> Vec<usize> {
    let diag = ((h * h + w * w) as f64).sqrt();
    let r_max = (0.02 * diag).max(3.0);
    let mut radii = Vec::new();
    for i in 0..5 {
        let r = (3.0 + (r_max - 3.0) * i as f64 / 4.0).round() as usize;
        if radii.last() != Some(&r) {
            radii.push(r);
        }
    }
    radii
}

/// Pixel accuracy within distance `d` of the ground-truth boundary, for the
/// precomputed squared distance field.
fn band_accuracy(pred: &BinaryMask, gt: &BinaryMask, sq_dist: &[f64], d: usize) -> f64 {
    let d2 = (d * d) as f64;
    let mut in_band = 0u64;
    let mut correct = 0u64;
    for i in 0..sq_dist.len() {
        if sq_dist[i] <= d2 {
            in_band += 1;
            correct += (pred.data[i] == gt.data[i]) as u64;
        }
    }
    // Bands are seeded at boundary pixels, so they are never empty.
    correct as f64 / in_band as f64
}

/// Mean boundary accuracy over the standard radii, given a precomputed
/// squared distance field for the ground truth.
pub fn mba_with_distances(pred: &BinaryMask, gt: &BinaryMask, sq_dist: &[f64]) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(CrmError::shape(format!(
            "mba: mask shapes {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let radii = mba_band_radii(gt.h, gt.w);
    let sum: f64 = radii
        .iter()
        .map(|&d| band_accuracy(pred, gt, sq_dist, d))
        .sum();
    Ok(sum / radii.len() as f64)
}

/// Mean boundary accuracy: pixel accuracy restricted to bands of increasing
/// radius around the ground-truth boundary (exact Euclidean distances),
/// averaged over the radii of [`mba_band_radii`].
pub fn mba(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let b = boundary(gt);
    if b.iter().all(|&v| !v) {
        return Err(CrmError::invalid(
            "mba: ground truth has no boundary (single-valued mask)",
        ));
    }
    let sq_dist = squared_edt(&b, gt.h, gt.w);
    mba_with_distances(pred, gt, &sq_dist)
}

/// Metrics of one evaluated corpus item.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub stem: String,
    pub iou_coarse: f64,
    pub iou_refined: f64,
    pub mba_coarse: f64,
    pub mba_refined: f64,
    pub wall_ms: f64,
}

/// Corpus-level evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<(String, String)>,
    pub schedule: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(&f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_iou_coarse(&self) -> f64 {
        self.mean(|r| r.iou_coarse)
    }

    pub fn mean_iou_refined(&self) -> f64 {
        self.mean(|r| r.iou_refined)
    }

    pub fn mean_mba_coarse(&self) -> f64 {
        self.mean(|r| r.mba_coarse)
    }

    pub fn mean_mba_refined(&self) -> f64 {
        self.mean(|r| r.mba_refined)
    }

    /// Tab-separated report with a comment header recording the schedule,
    /// the metric constants, and the checkpoint identity.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# schedule: {}", self.schedule)?;
        writeln!(f, "# checkpoint: {}", self.checkpoint_id)?;
        writeln!(
            f,
            "# mba bands: 5 radii, 3 px to max(3, 2% of diagonal), exact euclidean distances"
        )?;
        writeln!(f, "# binarize threshold: 0.5")?;
        writeln!(
            f,
            "stem\tiou_coarse\tiou_refined\tmba_coarse\tmba_refined\twall_ms"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.1}",
                r.stem, r.iou_coarse, r.iou_refined, r.mba_coarse, r.mba_refined, r.wall_ms
            )?;
        }
        for (stem, reason) in &self.skipped {
            writeln!(f, "# skipped\t{stem}\t{reason}")?;
        }
        writeln!(
            f,
            "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t",
            self.mean_iou_coarse(),
            self.mean_iou_refined(),
            self.mean_mba_coarse(),
            self.mean_mba_refined()
        )?;
        Ok(())
    }
}

/// Refine every corpus item and report refined vs coarse-baseline metrics.
///
/// Items that cannot be read (or lack a coarse mask) are recorded as skipped
/// rather than failing the run.
pub fn evaluate(
    corpus: &CorpusManifest,
    model: &CrmModel<f32>,
    schedule: &RefinementSchedule,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(CrmError::Corpus("evaluate: empty corpus".into()));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for item in &corpus.items {
        let loaded = (|| -> Result<(crate::diffcore::Tensor<f32>, BinaryMask, BinaryMask)> {
            let coarse_path = item.coarse.as_ref().ok_or_else(|| {
                CrmError::Corpus(format!("item '{}' has no coarse mask", item.stem))
            })?;
            let image = read_image_png(&item.image)?;
            let gt = BinaryMask::from_tensor(&read_mask_png(&item.gt)?, 0.5)?;
            let coarse = BinaryMask::from_tensor(&read_mask_png(coarse_path)?, 0.5)?;
            Ok((image, gt, coarse))
        })();
        let (image, gt, coarse) = match loaded {
            Ok(v) => v,
            Err(e) => {
                skipped.push((item.stem.clone(), e.to_string()));
                continue;
            }
        };
        let start = Instant::now();
        let refined = refine_multires_traced(
            model,
            &image,
            &coarse.to_tensor(),
            schedule,
            RefineMode::Full,
            |_, _, _| Ok(()),
        )?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let refined_mask = binarize(&refined, 0.5)?;
        let b = boundary(&gt);
        let sq = squared_edt(&b, gt.h, gt.w);
        rows.push(EvalRow {
            stem: item.stem.clone(),
            iou_coarse: iou(&coarse, &gt)?,
            iou_refined: iou(&refined_mask, &gt)?,
            mba_coarse: mba_with_distances(&coarse, &gt, &sq)?,
            mba_refined: mba_with_distances(&refined_mask, &gt, &sq)?,
            wall_ms,
        });
    }
    Ok(EvalReport {
        rows,
        skipped,
        schedule: schedule.describe(),
        checkpoint_id: checkpoint_id.to_string(),
    })
}
