//! Volumetric grids and the geometric preprocessing applied to them.
//!
//! Every grid in the crate uses the same memory layout: dims are
//! `[nx, ny, nz]` and the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`,
//! so `x` varies fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

pub type Dims = [usize; 3];

/// Voxel count of a grid.
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// What the scalars of a [`Volume`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    /// Hounsfield units.
    Hu,
    /// Window-normalized intensity in `[0, 1]`.
    Normalized,
    /// Mask probability in `[0, 1]`; binary for training masks.
    Prob,
}

impl Unit {
    pub fn tag(self) -> u8 {
        match self {
            Unit::Hu => 0,
            Unit::Normalized => 1,
            Unit::Prob => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Unit> {
        match tag {
            0 => Some(Unit::Hu),
            1 => Some(Unit::Normalized),
            2 => Some(Unit::Prob),
            _ => None,
        }
    }

    /// Fill value for voxels that fall outside a volume when cropping.
    pub fn pad_value(self) -> f32 {
        match self {
            Unit::Hu => HuWindow::DEFAULT.lo,
            Unit::Normalized | Unit::Prob => 0.0,
        }
    }
}

/// Display window used to map HU to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f32,
    pub hi: f32,
}

impl HuWindow {
    pub const DEFAULT: HuWindow = HuWindow {
        lo: -150.0,
        hi: 350.0,
    };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "window must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(HuWindow { lo, hi })
    }

    #[inline]
    pub fn normalize(&self, hu: f32) -> f32 {
        ((hu - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    #[inline]
    pub fn denormalize(&self, v: f32) -> f32 {
        v * (self.hi - self.lo) + self.lo
    }
}

impl Default for HuWindow {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// A dense 3D scalar grid with physical spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    unit: Unit,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], unit: Unit, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if unit != Unit::Hu {
            if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "{unit:?} volume has value {} outside [0, 1] at voxel {index}",
                    data[index]
                )));
            }
        }
        Ok(Volume {
            dims,
            spacing,
            unit,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: [f32; 3], unit: Unit, value: f32) -> Result<Self> {
        Self::new(dims, spacing, unit, vec![value; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// Rebuilds the volume with a different unit tag, re-validating the range.
    pub fn with_unit(self, unit: Unit) -> Result<Self> {
        Volume::new(self.dims, self.spacing, unit, self.data)
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// Freeze-thaw cycle index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    First,
    Second,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::First => 1,
            Stage::Second => 2,
        }
    }

    /// Conditioning value: 0 for the first cycle, 1 for the second.
    pub fn flag(self) -> f32 {
        match self {
            Stage::First => 0.0,
            Stage::Second => 1.0,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            1 => Ok(Stage::First),
            2 => Ok(Stage::Second),
            other => Err(Error::InvalidArgument(format!(
                "stage must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(stage: Stage) -> u8 {
        stage.index()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// One timed acquisition: normalized CT plus iceball mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ct: Volume,
    pub mask: Volume,
    pub time_min: f32,
    pub stage: Stage,
}

impl Sample {
    pub fn new(ct: Volume, mask: Volume, time_min: f32, stage: Stage) -> Result<Self> {
        if ct.unit() != Unit::Normalized {
            return Err(Error::InvalidArgument("sample CT must be normalized".into()));
        }
        if mask.unit() != Unit::Prob {
            return Err(Error::InvalidArgument("sample mask must be a PROB volume".into()));
        }
        if !ct.same_geometry(&mask) {
            return Err(Error::Shape(format!(
                "ct {:?}/{:?} vs mask {:?}/{:?}",
                ct.dims(),
                ct.spacing(),
                mask.dims(),
                mask.spacing()
            )));
        }
        if !(time_min >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "acquisition time must be >= 0, got {time_min}"
            )));
        }
        Ok(Sample {
            ct,
            mask,
            time_min,
            stage,
        })
    }

    pub fn dims(&self) -> Dims {
        self.ct.dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.ct.spacing()
    }

    /// CT and mask stacked as a 2-channel field.
    pub fn to_field(&self) -> Field {
        let mut data = Vec::with_capacity(self.ct.len() * 2);
        data.extend_from_slice(self.ct.data());
        data.extend_from_slice(self.mask.data());
        Field::from_vec(2, self.dims(), data).expect("sample channels share geometry")
    }
}

/// A cubic window cut from a [`Sample`], CT and mask as channels 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub edge: usize,
    pub channels: Field,
}

pub fn normalize_window(v: &Volume, window: HuWindow) -> Result<Volume> {
    if v.unit() != Unit::Hu {
        return Err(Error::InvalidArgument(format!(
            "normalize_window expects HU input, got {:?}",
            v.unit()
        )));
    }
    if let Some(index) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let data = v.data().iter().map(|&hu| window.normalize(hu)).collect();
    Volume::new(v.dims(), v.spacing(), Unit::Normalized, data)
}

pub fn denormalize_window(v: &Volume, window: HuWindow) -> Result<Volume> {
    if v.unit() != Unit::Normalized {
        return Err(Error::InvalidArgument(format!(
            "denormalize_window expects normalized input, got {:?}",
            v.unit()
        )));
    }
    let data = v.data().iter().map(|&x| window.denormalize(x)).collect();
    Volume::new(v.dims(), v.spacing(), Unit::Hu, data)
}

/// Trilinear resampling onto an isotropic grid of `target` mm.
///
/// Output dims are `round(n * spacing / target)`. Voxel centres are aligned
/// at `(i + 0.5) * spacing`. PROB volumes are treated as masks and
/// re-binarized at 0.5.
pub fn resample_isotropic(v: &Volume, target: f32) -> Result<Volume> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target}"
        )));
    }
    if v.spacing().iter().all(|&s| s == target) {
        return Ok(v.clone());
    }
    let in_dims = v.dims();
    let in_spacing = v.spacing();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let n = (in_dims[a] as f64 * in_spacing[a] as f64 / target as f64).round();
        if n < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "target spacing {target} collapses axis {a} to zero voxels"
            )));
        }
        out_dims[a] = n as usize;
    }

    // Per-axis lookup: lower index and fractional weight.
    let axis_taps = |a: usize| -> Vec<(usize, usize, f32)> {
        (0..out_dims[a])
            .map(|i| {
                let pos = (i as f64 + 0.5) * target as f64 / in_spacing[a] as f64 - 0.5;
                let max = (in_dims[a] - 1) as f64;
                let pos = pos.clamp(0.0, max);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_dims[a] - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let tx = axis_taps(0);
    let ty = axis_taps(1);
    let tz = axis_taps(2);

    let binarize = v.unit() == Unit::Prob;
    let mut out = Vec::with_capacity(voxel_count(out_dims));
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let lerp = |a: f32, b: f32, w: f32| a + (b - a) * w;
                let c00 = lerp(v.get(x0, y0, z0), v.get(x1, y0, z0), wx);
                let c10 = lerp(v.get(x0, y1, z0), v.get(x1, y1, z0), wx);
                let c01 = lerp(v.get(x0, y0, z1), v.get(x1, y0, z1), wx);
                let c11 = lerp(v.get(x0, y1, z1), v.get(x1, y1, z1), wx);
                let val = lerp(lerp(c00, c10, wy), lerp(c01, c11, wy), wz);
                out.push(if binarize {
                    if val >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    val
                });
            }
        }
    }
    Volume::new(out_dims, [target; 3], v.unit(), out)
}

/// Rotation axis for quarter-turn augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// The two axes spanning the rotation plane, ordered so that one quarter
    /// turn sends the first onto the second.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (2, 0),
            Axis::Z => (0, 1),
        }
    }
}

/// One of the ten augmentation rotations: identity or `k` quarter turns
/// about an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rotation {
    pub axis: Axis,
    pub quarter_turns: u8,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        axis: Axis::Z,
        quarter_turns: 0,
    };

    /// Identity followed by the nine non-identity axis-aligned rotations.
    pub fn augmentation_set() -> Vec<Rotation> {
        let mut set = vec![Rotation::IDENTITY];
        for axis in Axis::ALL {
            for k in 1..=3 {
                set.push(Rotation {
                    axis,
                    quarter_turns: k,
                });
            }
        }
        set
    }

    pub fn is_identity(&self) -> bool {
        self.quarter_turns.is_multiple_of(4)
    }

    /// Where voxel `p` of a grid with `dims` lands after the rotation.
    pub fn map_index(&self, dims: Dims, p: [usize; 3]) -> [usize; 3] {
        let (a, b) = self.axis.plane();
        let mut q = p;
        for _ in 0..self.quarter_turns % 4 {
            // (a, b) -> (n - 1 - b, a)
            let (pa, pb) = (q[a], q[b]);
            q[a] = dims[b] - 1 - pb;
            q[b] = pa;
        }
        q
    }
}

/// Quarter-turn rotation of a channel-major grid.
///
/// Convention: one quarter turn about `z` sends `(x, y, z)` to
/// `(ny - 1 - y, x, z)`; about `x` it sends `(y, z)` to `(nz - 1 - z, y)`,
/// and about `y` it sends `(z, x)` to `(nx - 1 - x, z)`.
pub(crate) fn rotate_grid(
    data: &[f32],
    channels: usize,
    dims: Dims,
    rotation: Rotation,
) -> Result<Vec<f32>> {
    let (a, b) = rotation.axis.plane();
    if dims[a] != dims[b] {
        return Err(Error::Shape(format!(
            "rotation about {:?} needs a square plane, got dims {dims:?}",
            rotation.axis
        )));
    }
    if rotation.is_identity() {
        return Ok(data.to_vec());
    }
    let n = voxel_count(dims);
    let mut out = vec![0.0f32; data.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let src = linear_index(dims, x, y, z);
                let [qx, qy, qz] = rotation.map_index(dims, [x, y, z]);
                let dst = linear_index(dims, qx, qy, qz);
                for c in 0..channels {
                    out[c * n + dst] = data[c * n + src];
                }
            }
        }
    }
    Ok(out)
}

pub fn rotate_axis_aligned(v: &Volume, axis: Axis, k: u8) -> Result<Volume> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "quarter turns must be 1, 2 or 3, got {k}"
        )));
    }
    let rotation = Rotation {
        axis,
        quarter_turns: k,
    };
    let data = rotate_grid(v.data(), 1, v.dims(), rotation)?;
    Volume::new(v.dims(), v.spacing(), v.unit(), data)
}

/// Cubic crop of edge `edge` with `center` at index `edge / 2` of the output.
/// Out-of-range voxels take the unit's pad value.
pub fn crop_centered(v: &Volume, center: [usize; 3], edge: usize) -> Result<Volume> {
    if edge == 0 {
        return Err(Error::InvalidArgument("crop edge must be >= 1".into()));
    }
    let dims = v.dims();
    let start: [i64; 3] = std::array::from_fn(|a| center[a] as i64 - (edge / 2) as i64);
    let pad = v.unit().pad_value();
    let mut out = Vec::with_capacity(edge * edge * edge);
    for k in 0..edge as i64 {
        let z = start[2] + k;
        for j in 0..edge as i64 {
            let y = start[1] + j;
            for i in 0..edge as i64 {
                let x = start[0] + i;
                let inside = (0..dims[0] as i64).contains(&x)
                    && (0..dims[1] as i64).contains(&y)
                    && (0..dims[2] as i64).contains(&z);
                out.push(if inside {
                    v.get(x as usize, y as usize, z as usize)
                } else {
                    pad
                });
            }
        }
    }
    Volume::new([edge; 3], v.spacing(), v.unit(), out)
}

pub fn extract_patch(s: &Sample, origin: [usize; 3], edge: usize) -> Result<Patch> {
    let field = s.to_field();
    let channels = field.window(origin, [edge; 3])?;
    Ok(Patch {
        origin,
        edge,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims, unit: Unit) -> Volume {
        let n = voxel_count(dims);
        let data = (0..n).map(|i| i as f32 / n as f32).collect();
        Volume::new(dims, [1.0; 3], unit, data).unwrap()
    }

    #[test]
    fn window_examples() {
        let w = HuWindow::DEFAULT;
        let v = Volume::new([4, 1, 1], [1.0; 3], Unit::Hu, vec![-150.0, 350.0, 100.0, 1000.0])
            .unwrap();
        let n = normalize_window(&v, w).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 1.0]);
        assert_eq!(n.unit(), Unit::Normalized);

        let back = denormalize_window(
            &Volume::new([3, 1, 1], [1.0; 3], Unit::Normalized, vec![0.5, 0.0, 1.0]).unwrap(),
            w,
        )
        .unwrap();
        assert_eq!(back.data(), &[100.0, -150.0, 350.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let err = Volume::new([2, 1, 1], [1.0; 3], Unit::Hu, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
        assert!(HuWindow::new(10.0, 10.0).is_err());
        assert!(denormalize_window(&ramp([2, 2, 2], Unit::Prob), HuWindow::DEFAULT).is_err());
    }

    #[test]
    fn resample_anisotropic_dims() {
        let v = Volume::filled([64, 64, 32], [1.0, 1.0, 2.0], Unit::Normalized, 0.25).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [64, 64, 64]);
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!(r.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([5, 6, 7], Unit::Normalized);
        assert_eq!(resample_isotropic(&v, 1.0).unwrap(), v);
    }

    #[test]
    fn resample_rebinarizes_masks() {
        let mut data = vec![0.0; 8 * 8 * 4];
        for (i, d) in data.iter_mut().enumerate() {
            if i % 3 == 0 {
                *d = 1.0;
            }
        }
        let v = Volume::new([8, 8, 4], [1.0, 1.0, 2.0], Unit::Prob, data).unwrap();
        let r = resample_isotropic(&v, 0.7).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(resample_isotropic(&v, 100.0).is_err());
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn rotation_marker_follows_convention() {
        // Explicit table for a quarter turn about z in a 3x3 plane:
        // (x, y) -> (2 - y, x).
        let table = [
            ((0, 0), (2, 0)),
            ((1, 0), (2, 1)),
            ((2, 0), (2, 2)),
            ((0, 1), (1, 0)),
            ((1, 1), (1, 1)),
            ((2, 1), (1, 2)),
            ((0, 2), (0, 0)),
            ((1, 2), (0, 1)),
            ((2, 2), (0, 2)),
        ];
        for ((x, y), (ex, ey)) in table {
            let mut data = vec![0.0; 27];
            data[linear_index([3; 3], x, y, 0)] = 1.0;
            let v = Volume::new([3; 3], [1.0; 3], Unit::Prob, data).unwrap();
            let r = rotate_axis_aligned(&v, Axis::Z, 1).unwrap();
            assert_eq!(r.get(ex, ey, 0), 1.0, "({x},{y})");
            let mut back = v.clone();
            for _ in 0..4 {
                back = rotate_axis_aligned(&back, Axis::Z, 1).unwrap();
            }
            assert_eq!(back, v);
        }
    }

    #[test]
    fn rotation_half_turn_twice_is_identity() {
        let v = ramp([4, 4, 4], Unit::Normalized);
        for axis in Axis::ALL {
            let r = rotate_axis_aligned(&rotate_axis_aligned(&v, axis, 2).unwrap(), axis, 2)
                .unwrap();
            assert_eq!(r, v);
        }
    }

    #[test]
    fn rotation_rejects_non_square_plane() {
        let v = ramp([4, 3, 4], Unit::Normalized);
        assert!(matches!(
            rotate_axis_aligned(&v, Axis::Z, 1),
            Err(Error::Shape(_))
        ));
        // Rotating about y only needs nz == nx.
        assert!(rotate_axis_aligned(&v, Axis::Y, 1).is_ok());
    }

    #[test]
    fn crop_identity_and_shape() {
        let v = ramp([6, 6, 6], Unit::Normalized);
        assert_eq!(crop_centered(&v, [3, 3, 3], 6).unwrap(), v);

        let big = Volume::filled([128; 3], [0.8; 3], Unit::Normalized, 0.3).unwrap();
        let c = crop_centered(&big, [64; 3], 64).unwrap();
        assert_eq!(c.dims(), [64; 3]);
        assert_eq!(c.spacing(), [0.8; 3]);
    }

    #[test]
    fn crop_corner_padding_matches_brute_force() {
        let dims = [10, 10, 10];
        let v = Volume::filled(dims, [1.0; 3], Unit::Normalized, 1.0).unwrap();
        let edge = 8usize;
        let c = crop_centered(&v, [0, 0, 0], edge).unwrap();
        let padded = c.data().iter().filter(|&&x| x == 0.0).count();

        let mut inside = 0;
        let start = -(edge as i64 / 2);
        for k in 0..edge as i64 {
            for j in 0..edge as i64 {
                for i in 0..edge as i64 {
                    let p = [start + i, start + j, start + k];
                    if p.iter().zip(dims).all(|(&c, d)| c >= 0 && c < d as i64) {
                        inside += 1;
                    }
                }
            }
        }
        assert_eq!(padded, edge.pow(3) - inside);
        assert_eq!(padded, 448);
    }

    #[test]
    fn patches_share_windows() {
        let ct = ramp([8, 8, 8], Unit::Normalized);
        let mask = Volume::new(
            [8; 3],
            [1.0; 3],
            Unit::Prob,
            (0..512).map(|i| (i % 2) as f32).collect(),
        )
        .unwrap();
        let s = Sample::new(ct, mask, 3.0, Stage::First).unwrap();
        let whole = extract_patch(&s, [0; 3], 8).unwrap();
        assert_eq!(whole.channels, s.to_field());

        let a = extract_patch(&s, [0, 0, 0], 5).unwrap();
        let b = extract_patch(&s, [2, 3, 1], 5).unwrap();
        for z in 1..5 {
            for y in 3..5 {
                for x in 2..5 {
                    for c in 0..2 {
                        assert_eq!(
                            a.channels.at(c, x, y, z),
                            b.channels.at(c, x - 2, y - 3, z - 1)
                        );
                    }
                }
            }
        }
        assert!(matches!(
            extract_patch(&s, [4, 0, 0], 5),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn sample_rejects_mismatched_geometry() {
        let ct = ramp([4, 4, 4], Unit::Normalized);
        let mask = Volume::filled([4, 4, 3], [1.0; 3], Unit::Prob, 0.0).unwrap();
        assert!(Sample::new(ct, mask, 0.0, Stage::First).is_err());
    }
}
