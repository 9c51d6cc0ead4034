//! Image and mask agreement metrics.
//!
//! Every reduction is order-free: floating sums go through [`ordered_sum`]
//! and SSIM window statistics are accumulated in fixed point, so permuting
//! voxels (axis-aligned rotations in particular) leaves each value
//! bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Prediction;
use crate::volume::{Sample, Stage, Unit, Volume};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_FIXED_SCALE: f64 = (1u64 << 24) as f64;

/// Sum that does not depend on the order of `terms`.
pub fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_normalized(a: &Volume, b: &Volume) -> Result<()> {
    check_pair(a, b)?;
    if a.unit() != Unit::Normalized || b.unit() != Unit::Normalized {
        return Err(Error::InvalidArgument("image metrics need normalized volumes".into()));
    }
    Ok(())
}

/// Mean absolute error on window-normalized intensities.
pub fn nmae(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_normalized(pred, gt)?;
    let terms = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .collect();
    Ok(ordered_sum(terms) / pred.len() as f64)
}

pub fn mse(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_pair(pred, gt)?;
    let terms = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .collect();
    Ok(ordered_sum(terms) / pred.len() as f64)
}

/// `10 log10(1 / MSE)`; identical inputs give `+inf`.
pub fn psnr(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_normalized(pred, gt)?;
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// 3D prefix sums with a zero border, `(nx+1)(ny+1)(nz+1)` entries.
fn prefix(values: &[i128], d: [usize; 3]) -> Vec<i128> {
    let (px, py) = (d[0] + 1, d[1] + 1);
    let mut s = vec![0i128; px * py * (d[2] + 1)];
    let at = |x: usize, y: usize, z: usize| x + px * (y + py * z);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let v = values[x + d[0] * (y + d[1] * z)];
                s[at(x + 1, y + 1, z + 1)] = v + s[at(x, y + 1, z + 1)] + s[at(x + 1, y, z + 1)]
                    + s[at(x + 1, y + 1, z)]
                    - s[at(x, y, z + 1)]
                    - s[at(x, y + 1, z)]
                    - s[at(x + 1, y, z)]
                    + s[at(x, y, z)];
            }
        }
    }
    s
}

fn box_sum(s: &[i128], d: [usize; 3], o: [usize; 3], w: usize) -> i128 {
    let (px, py) = (d[0] + 1, d[1] + 1);
    let at = |x: usize, y: usize, z: usize| x + px * (y + py * z);
    let [x0, y0, z0] = o;
    let [x1, y1, z1] = [x0 + w, y0 + w, z0 + w];
    s[at(x1, y1, z1)] - s[at(x0, y1, z1)] - s[at(x1, y0, z1)] - s[at(x1, y1, z0)]
        + s[at(x0, y0, z1)]
        + s[at(x0, y1, z0)]
        + s[at(x1, y0, z0)]
        - s[at(x0, y0, z0)]
}

/// Mean local SSIM over every fully contained 7³ uniform window, with
/// population statistics and `L = 1`.
///
/// Intensities are quantized to multiples of 2⁻²⁴ before the window sums.
pub fn ssim3d(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_normalized(pred, gt)?;
    let d = pred.dims();
    let w = SSIM_WINDOW;
    if d.iter().any(|&n| n < w) {
        return Err(Error::InvalidArgument(format!("volume {d:?} smaller than the {w}³ SSIM window")));
    }
    let q = |v: &Volume| -> Vec<i128> { v.data().iter().map(|&x| (x as f64 * SSIM_FIXED_SCALE).round() as i128).collect() };
    let (a, b) = (q(pred), q(gt));
    let sa = prefix(&a, d);
    let sb = prefix(&b, d);
    let saa = prefix(&a.iter().map(|v| v * v).collect::<Vec<_>>(), d);
    let sbb = prefix(&b.iter().map(|v| v * v).collect::<Vec<_>>(), d);
    let sab = prefix(&a.iter().zip(&b).map(|(u, v)| u * v).collect::<Vec<_>>(), d);

    let n = (w * w * w) as i128;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let unit = SSIM_FIXED_SCALE;
    let mean_scale = 1.0 / (n as f64 * unit);
    let var_scale = 1.0 / ((n * n) as f64 * unit * unit);
    let mut terms = Vec::with_capacity((d[0] - w + 1) * (d[1] - w + 1) * (d[2] - w + 1));
    for z in 0..=d[2] - w {
        for y in 0..=d[1] - w {
            for x in 0..=d[0] - w {
                let o = [x, y, z];
                let (ta, tb) = (box_sum(&sa, d, o, w), box_sum(&sb, d, o, w));
                let ma = ta as f64 * mean_scale;
                let mb = tb as f64 * mean_scale;
                let va = (n * box_sum(&saa, d, o, w) - ta * ta) as f64 * var_scale;
                let vb = (n * box_sum(&sbb, d, o, w) - tb * tb) as f64 * var_scale;
                let cov = (n * box_sum(&sab, d, o, w) - ta * tb) as f64 * var_scale;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                terms.push(num / den);
            }
        }
    }
    let count = terms.len() as f64;
    Ok(ordered_sum(terms) / count)
}

fn mask_counts(a: &Volume, b: &Volume) -> Result<(u64, u64, u64)> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let binary = |v: f32| v == 0.0 || v == 1.0;
        if !binary(x) || !binary(y) {
            return Err(Error::InvalidArgument(format!("mask is not binary at voxel {i}")));
        }
        let (x, y) = (x == 1.0, y == 1.0);
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    Ok((na, nb, both))
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    let (a, b, both) = mask_counts(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// `|A∩B| / |A∪B|`, 1 when both masks are empty.
pub fn iou(pred: &Volume, gt: &Volume) -> Result<f64> {
    let (a, b, both) = mask_counts(pred, gt)?;
    let union = a + b - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// Absolute mask volume difference in millilitres.
pub fn volume_difference_ml(pred: &Volume, gt: &Volume) -> Result<f64> {
    if pred.spacing() != gt.spacing() {
        return Err(Error::InvalidArgument(format!(
            "spacing {:?} vs {:?}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    let (a, b, _) = mask_counts(pred, gt)?;
    Ok(a.abs_diff(b) as f64 * pred.voxel_volume_mm3() / 1000.0)
}

/// One CSV row: a single (case, Δt) evaluation of one model arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub arm: String,
    pub delta_t: f32,
    pub stage: Stage,
    pub nmae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub dice: f64,
    pub iou: f64,
    pub vol_diff_ml: f64,
}

/// Scores a prediction against the ground-truth frame.
pub fn evaluate_case(
    case_id: &str,
    arm: &str,
    delta_t: f32,
    pred: &Prediction,
    gt: &Sample,
) -> Result<MetricsRecord> {
    if pred.ct.dims() != gt.dims() || pred.mask_bin.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.ct.dims(),
            gt.dims()
        )));
    }
    if pred.ct.spacing() != gt.spacing() {
        return Err(Error::Shape("prediction and ground truth spacing differ".into()));
    }
    let d = dice(&pred.mask_bin, &gt.mask)?;
    let j = iou(&pred.mask_bin, &gt.mask)?;
    if (d - 2.0 * j / (1.0 + j)).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("dice {d} inconsistent with iou {j}")));
    }
    Ok(MetricsRecord {
        case_id: case_id.to_string(),
        arm: arm.to_string(),
        delta_t,
        stage: gt.stage,
        nmae: nmae(&pred.ct, &gt.ct)?,
        psnr_db: psnr(&pred.ct, &gt.ct)?,
        ssim: ssim3d(&pred.ct, &gt.ct)?,
        dice: d,
        iou: j,
        vol_diff_ml: volume_difference_ml(&pred.mask_bin, &gt.mask)?,
    })
}

pub fn write_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("metrics csv: {e}")))
}
