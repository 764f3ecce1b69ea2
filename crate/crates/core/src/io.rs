//! Binary snapshots and CSV monitor series.
//!
//! Snapshot layout, all little-endian:
//!
//! ```text
//! "SGTV1\0" | u8 model | u64 n | f64 t
//! | field[n²] | flow_w1[n²] | flow_w2[n²] | det_check[n²]
//! | monitors[5] | u64 FNV-1a of every preceding byte
//! ```
//!
//! Arrays are row-major over the grid. `det_check` is `det Dφ` minus its
//! target, so its sup norm is the `det_err` monitor.

use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::error::{Result, SgError};
use crate::field::{GridSpec, PeriodicField};
use crate::ma_step::Model;
use crate::map::PeriodicMap;
use crate::stepper::{Monitors, StepRecord, StepState};

pub const MAGIC: &[u8; 6] = b"SGTV1\0";

pub const CSV_HEADER: &str = "step,t,det_err,convexity_min,nu_sup,increment,mass";

/// Contents of one snapshot file.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub model: Model,
    pub t: f64,
    pub field: PeriodicField,
    pub flow: PeriodicMap,
    pub det_check: PeriodicField,
    pub monitors: Monitors,
}

impl Snapshot {
    /// Snapshot of `state`; `initial` is the run's initial field (used by the
    /// SGSW determinant target).
    pub fn from_state(state: &StepState, initial: &PeriodicField) -> Result<Self> {
        let det = state.flow.det_jacobian()?;
        Ok(Snapshot {
            model: state.model,
            t: state.t,
            field: state.field.clone(),
            flow: state.flow.clone(),
            det_check: det.sub(&state.det_target(initial)),
            monitors: state.monitors,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.field.grid()
    }

    /// Named arrays in file order.
    pub fn arrays(&self) -> [(&'static str, &[f64]); 4] {
        let [w1, w2] = self.flow.displacement();
        [
            ("field", self.field.samples()),
            ("flow_w1", w1.samples()),
            ("flow_w2", w2.samples()),
            ("det_check", self.det_check.samples()),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.grid().n();
        let mut out = Vec::with_capacity(6 + 1 + 16 + 4 * 8 * n * n + 48);
        out.extend_from_slice(MAGIC);
        out.push(match self.model {
            Model::Sg => 0,
            Model::Sgsw => 1,
        });
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        for (_, a) in self.arrays() {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.monitors.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(SgError::VersionMismatch {
                path: path.to_path_buf(),
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        let bad = || SgError::ChecksumMismatch(path.to_path_buf());
        if bytes.len() < MAGIC.len() + 1 + 16 + 8 {
            return Err(bad());
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(payload) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(bad());
        }
        let mut rd = &payload[MAGIC.len()..];
        let mut take = |k: usize| -> Result<&[u8]> {
            if rd.len() < k {
                return Err(bad());
            }
            let (a, b) = rd.split_at(k);
            rd = b;
            Ok(a)
        };
        let model = match take(1)?[0] {
            0 => Model::Sg,
            1 => Model::Sgsw,
            _ => return Err(bad()),
        };
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let t = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let grid = GridSpec::new(n).map_err(|_| bad())?;
        let mut arrays = Vec::with_capacity(4);
        for _ in 0..4 {
            let raw = take(8 * n * n)?;
            let v: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(v);
        }
        let mut mon = [0.0; 5];
        for m in &mut mon {
            *m = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        if !rd.is_empty() {
            return Err(bad());
        }
        let field_of = |v: Vec<f64>| PeriodicField::new(grid, v);
        let mut it = arrays.into_iter();
        let field = field_of(it.next().expect("four arrays"))?;
        let w1 = field_of(it.next().expect("four arrays"))?;
        let w2 = field_of(it.next().expect("four arrays"))?;
        let det_check = field_of(it.next().expect("four arrays"))?;
        Ok(Snapshot {
            model,
            t,
            field,
            flow: PeriodicMap::from_displacement(w1, w2)?,
            det_check,
            monitors: Monitors::from_array(mon),
        })
    }
}

/// 64-bit FNV-1a.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| SgError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SgError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| SgError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| SgError::io(path, e))?;
    tmp.persist(path).map_err(|e| SgError::io(path, e.error))?;
    Ok(())
}

pub fn write_snapshot(snap: &Snapshot, path: &Path) -> Result<()> {
    write_atomic(path, &snap.to_bytes())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).map_err(|e| SgError::io(path, e))?;
    Snapshot::from_bytes(&bytes, path)
}

/// Decimal with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_row(rec: &StepRecord) -> String {
    let m = &rec.monitors;
    format!(
        "{},{},{},{},{},{},{}",
        rec.step,
        fmt17(rec.t),
        fmt17(m.det_err),
        fmt17(m.convexity_min),
        fmt17(m.nu_sup),
        fmt17(m.step_increment),
        fmt17(m.mass)
    )
}

pub fn monitors_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("snap_{step:06}.sgt"))
}

/// Per-array `(name, sup|a − b|, |mean a − mean b|)`.
pub fn diff(a: &Snapshot, b: &Snapshot) -> Result<Vec<(String, f64, f64)>> {
    a.grid().check_same(&b.grid())?;
    let mut out = Vec::new();
    for ((name, x), (_, y)) in a.arrays().into_iter().zip(b.arrays()) {
        let sup = x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push((name.to_string(), sup, (mean(x) - mean(y)).abs()));
    }
    let (ma, mb) = (a.monitors.to_array(), b.monitors.to_array());
    let sup = ma.iter().zip(&mb).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    let mean = (ma.iter().sum::<f64>() - mb.iter().sum::<f64>()).abs() / 5.0;
    out.push(("monitors".to_string(), sup, mean));
    out.push(("t".to_string(), (a.t - b.t).abs(), (a.t - b.t).abs()));
    Ok(out)
}
