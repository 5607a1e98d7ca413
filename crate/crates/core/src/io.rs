//! On-disk formats: tensor container files, run configs, dataset manifests
//! and model files.
//!
//! Tensor container: one JSON header line, `\n`, the row-major little-endian
//! f64 payload, then (optionally) one mask byte per entry (1 regular, 0 gap).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::BURGERS_TEST_PARAMS;
use crate::error::{dim_err, val_err, KgpError, Result};
use crate::gappy::{lift_mask, CgSettings, GappyMask};
use crate::grid::{Axis, AxisRole, ProductGrid};
use crate::kernels::{Activation, KernelFamily, ProductKernelSpec};
use crate::kronalg::FieldTensor;
use crate::linalg::DenseMatrix;
use crate::training::{Problem, TrainConfig};

pub const MAGIC: &str = "KGP1";
pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub magic: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub axis_roles: Vec<AxisRole>,
    pub mask_present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub tensor: FieldTensor,
    pub axis_roles: Vec<AxisRole>,
    /// One flag per entry, true = regular.
    pub mask: Option<Vec<bool>>,
}

impl TensorFile {
    pub fn new(tensor: FieldTensor, axis_roles: Vec<AxisRole>, mask: Option<Vec<bool>>) -> Result<Self> {
        if axis_roles.len() != tensor.shape().len() {
            return dim_err(format!("{} axis roles for a rank-{} tensor", axis_roles.len(), tensor.shape().len()));
        }
        if let Some(m) = &mask {
            if m.len() != tensor.len() {
                return dim_err(format!("mask has {} entries, tensor {}", m.len(), tensor.len()));
            }
        }
        Ok(Self { tensor, axis_roles, mask })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TensorHeader {
            magic: MAGIC.into(),
            dtype: DTYPE.into(),
            shape: self.tensor.shape().to_vec(),
            axis_roles: self.axis_roles.clone(),
            mask_present: self.mask.is_some(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.tensor.len() * 9);
        for v in self.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(m) = &self.mask {
            out.extend(m.iter().map(|&b| b as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| KgpError::Validation("tensor file has no header line".into()))?;
        let header: TensorHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| KgpError::Validation(format!("bad tensor header: {e}")))?;
        if header.magic != MAGIC {
            return val_err(format!("bad magic {:?}, expected {MAGIC}", header.magic));
        }
        if header.dtype != DTYPE {
            return val_err(format!("unsupported dtype {:?}, expected {DTYPE}", header.dtype));
        }
        let n: usize = header.shape.iter().product();
        let payload = &bytes[nl + 1..];
        let want = 8 * n + if header.mask_present { n } else { 0 };
        if payload.len() != want {
            return val_err(format!("payload is {} bytes, header implies {want}", payload.len()));
        }
        let values: Vec<f64> = payload[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mask = if header.mask_present {
            let m = &payload[8 * n..];
            if m.iter().any(|&b| b > 1) {
                return val_err("mask bytes must be 0 or 1");
            }
            Some(m.iter().map(|&b| b == 1).collect())
        } else {
            None
        };
        Self::new(FieldTensor::new(header.shape, values)?, header.axis_roles, mask)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| KgpError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| KgpError::Validation(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- run config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Burgers {
        n: usize,
        m: usize,
        nt: usize,
        #[serde(default = "default_t_final")]
        t_final: f64,
        #[serde(default = "default_burgers_test")]
        test_params: Vec<[f64; 2]>,
        /// Explicit training parameters; overrides the Sobol design.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Vec<[f64; 2]>>,
    },
    HoledSquare {
        n: usize,
        /// Lattice points per side.
        lattice: usize,
        #[serde(default = "default_samples")]
        samples_per_side: usize,
        #[serde(default = "default_hole")]
        hole_radius: f64,
        /// IDW stencil radius.
        radius: f64,
        #[serde(default = "default_synth_test")]
        test_params: Vec<[f64; 2]>,
    },
}

fn default_t_final() -> f64 {
    35.0
}
fn default_burgers_test() -> Vec<[f64; 2]> {
    BURGERS_TEST_PARAMS.to_vec()
}
fn default_samples() -> usize {
    61
}
fn default_hole() -> f64 {
    0.4
}
fn default_synth_test() -> Vec<[f64; 2]> {
    vec![[2.2, 1.3]]
}

/// Parameter box of the synthetic holed-square family.
pub const SYNTH_BOX: [(f64, f64); 2] = [(1.0, 4.0), (0.5, 2.0)];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Dataset manifest the model is trained on.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSection {
    #[serde(default)]
    pub family: Option<KernelFamily>,
    /// Hidden widths; empty with no `latent` means the identity map.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub latent: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    /// One entry per grid axis, or empty for stationary factors everywhere.
    #[serde(default)]
    pub factors: Vec<FactorSection>,
}

fn default_family() -> KernelFamily {
    KernelFamily::Matern52
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { family: default_family(), factors: Vec::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Use the mask stored with the snapshots (if any).
    #[default]
    FromData,
    /// Ignore stored masks; every lattice point must be observed.
    AllRegular,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GappySection {
    #[serde(default)]
    pub mask: MaskSource,
    #[serde(default)]
    pub cg: CgSettings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub gappy: GappySection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Parses and resolves relative paths against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.grid.manifest {
            if m.is_relative() {
                cfg.grid.manifest = Some(base.join(m));
            }
        }
        if let Some(d) = &cfg.output.dir {
            if d.is_relative() {
                cfg.output.dir = Some(base.join(d));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        match &self.dataset {
            Some(DatasetSection::Burgers { n, m, nt, .. }) if *n == 0 || *m < 3 || *nt < 1 => {
                val_err("burgers dataset needs n ≥ 1, m ≥ 3, nt ≥ 1")
            }
            Some(DatasetSection::HoledSquare { n, lattice, radius, .. }) if *n == 0 || *lattice < 2 || !(*radius > 0.0) => {
                val_err("holed_square dataset needs n ≥ 1, lattice ≥ 2 and a positive radius")
            }
            _ => Ok(()),
        }
    }
}

// ------------------------------------------------------------------ manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotEntry {
    pub params: Vec<f64>,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub preset: String,
    pub seed: u64,
    /// Spatial and temporal axes shared by every snapshot.
    pub axes: Vec<Axis>,
    pub train: Vec<SnapshotEntry>,
    pub test: Vec<SnapshotEntry>,
    #[serde(default)]
    pub info: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A dataset split assembled on its product grid.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub grid: ProductGrid,
    /// Full lattice; gap entries are NaN.
    pub values: FieldTensor,
    pub mask: Option<GappyMask>,
}

impl LoadedSplit {
    /// Training problem; gappy when a mask with gaps is present.
    pub fn problem(&self) -> Problem {
        match &self.mask {
            Some(mask) if !mask.gaps().is_empty() => {
                let lifted = lift_mask(mask, self.grid.n_params(), self.grid.time_size());
                let y_r = lifted.regular.iter().map(|&i| self.values.values()[i]).collect();
                Problem::Gappy { grid: self.grid.clone(), mask: mask.clone(), y_r }
            }
            _ => Problem::Grid { grid: self.grid.clone(), y: self.values.clone() },
        }
    }
}

pub fn load_split(manifest_path: &Path, split: Split, mask_source: MaskSource) -> Result<LoadedSplit> {
    let man: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = match split {
        Split::Train => &man.train,
        Split::Test => &man.test,
    };
    if entries.is_empty() {
        return val_err("manifest split has no snapshots");
    }
    let q = entries[0].params.len();
    let snap_shape: Vec<usize> = man.axes.iter().map(|a| a.len()).collect();
    let mut values = Vec::new();
    let mut mask: Option<Vec<bool>> = None;
    for e in entries {
        if e.params.len() != q {
            return dim_err("snapshots disagree on parameter dimension");
        }
        let tf = TensorFile::read(&base.join(&e.file))?;
        if tf.tensor.shape() != snap_shape.as_slice() {
            return dim_err(format!("{} has shape {:?}, manifest axes imply {:?}", e.file, tf.tensor.shape(), snap_shape));
        }
        values.extend_from_slice(tf.tensor.values());
        if mask_source == MaskSource::FromData {
            if let Some(m) = tf.mask {
                match &mask {
                    None => mask = Some(m),
                    Some(prev) if *prev != m => return val_err(format!("{} has a different gap pattern", e.file)),
                    Some(_) => {}
                }
            }
        }
    }
    let params = DenseMatrix::new(entries.len(), q, entries.iter().flat_map(|e| e.params.iter().copied()).collect())?;
    let mut axes = vec![Axis::new(AxisRole::Parameter, params)];
    axes.extend(man.axes.iter().cloned());
    let grid = ProductGrid::new(axes)?;
    let mut shape = vec![entries.len()];
    shape.extend(&snap_shape);
    let values = FieldTensor::new(shape, values)?;
    let mask = match mask {
        Some(m) => Some(spatial_mask(&grid, &m)?),
        None => {
            if values.values().iter().any(|v| !v.is_finite()) {
                return val_err("snapshots contain non-finite values but no mask");
            }
            None
        }
    };
    Ok(LoadedSplit { grid, values, mask })
}

/// Collapses a per-entry snapshot mask (spatial…, [time]) to a spatial mask;
/// the pattern must not change over time.
fn spatial_mask(grid: &ProductGrid, entry_mask: &[bool]) -> Result<GappyMask> {
    let nt = grid.time_size();
    let m = grid.spatial_size();
    let mut flags = Vec::with_capacity(m);
    for s in 0..m {
        let f = entry_mask[s * nt];
        if entry_mask[s * nt..(s + 1) * nt].iter().any(|&g| g != f) {
            return val_err(format!("gap pattern changes over time at spatial point {s}"));
        }
        flags.push(f);
    }
    GappyMask::from_flags(grid.spatial_shape(), &flags)
}

// --------------------------------------------------------------------- model

/// Everything needed to rebuild a trained model; eigendecompositions are
/// recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub spec: ProductKernelSpec,
    pub sigma2: f64,
    pub offset: f64,
    pub jitter: f64,
    pub grid: ProductGrid,
    pub mask: Option<GappyMask>,
    pub cg: CgSettings,
    /// Training targets, relative to the model file.
    pub targets: String,
    pub manifest: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let t = FieldTensor::new(vec![2, 3], vec![1.0, -2.5, f64::NAN, 0.0, 1e-300, 7.0]).unwrap();
        TensorFile::new(t, vec![AxisRole::Spatial, AxisRole::Temporal], Some(vec![true, true, false, true, true, true])).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let f = sample();
        let g = TensorFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(g.axis_roles, f.axis_roles);
        assert_eq!(g.mask, f.mask);
        for (a, b) in g.tensor.values().iter().zip(f.tensor.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_one_json_line() {
        let b = sample().to_bytes();
        let nl = b.iter().position(|&c| c == b'\n').unwrap();
        let h: serde_json::Value = serde_json::from_slice(&b[..nl]).unwrap();
        assert_eq!(h["magic"], "KGP1");
        assert_eq!(h["dtype"], "f64le");
        assert_eq!(h["mask_present"], true);
        assert_eq!(b.len(), nl + 1 + 6 * 8 + 6);
    }

    #[test]
    fn rejects_bad_magic_dtype_and_length() {
        let b = sample().to_bytes();
        let s = String::from_utf8_lossy(&b).to_string();
        let bad = s.replacen("KGP1", "KGP2", 1).into_bytes();
        assert!(TensorFile::from_bytes(&bad).is_err());
        let bad = String::from_utf8_lossy(&b).replacen("f64le", "f32le", 1).into_bytes();
        assert!(TensorFile::from_bytes(&bad).is_err());
        assert!(TensorFile::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed":1,"extra":true}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training":{"max_iters":1,"lr":2}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"dataset":{"preset":"burgers","n":2,"m":16,"nt":8,"typo":1}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"dataset":{"preset":"burgers","n":2,"m":16,"nt":8}}"#).unwrap();
        match c.dataset.unwrap() {
            DatasetSection::Burgers { t_final, test_params, .. } => {
                assert_eq!(t_final, 35.0);
                assert_eq!(test_params.len(), 2);
            }
            _ => panic!("wrong preset"),
        }
    }
}
