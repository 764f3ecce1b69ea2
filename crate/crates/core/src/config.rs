//! Run configuration: a flat INI document, parsed and validated in one pass
//! so every violation is reported together.
//!
//! ```text
//! [model]
//! name = sg
//! jacobian = linearized
//! [grid]
//! n = 32
//! dt = 0.01
//! T = 0.2
//! [coriolis]
//! f0 = 1.0
//! mode = 0 1 0.0 0.1
//! [init]
//! constant = 0.0
//! mode = 1 0 0.01 0.0
//! [tolerances]
//! map_tol = 1e-12
//! newton_tol = 1e-11
//! elliptic_tol = 1e-10
//! convexity_slack = 0.0
//! lip_cap = 1000
//! [output]
//! dir = out
//! snapshot_every = 10
//! ```
//!
//! `name` is `sg` or `sgsw`; `jacobian` is `linearized`, `chord` or `fd`.
//! Each `mode` line is `k1 k2 cos_coef sin_coef` and may repeat.

use std::path::{Path, PathBuf};

use ini::Ini;

use crate::coriolis::{CoriolisContext, TrigPoly};
use crate::error::{Result, SgError};
use crate::field::{GridSpec, PeriodicField};
use crate::ma_step::{convexity, stability_matrix, JacobianMode, MAStepParams, Model};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub map_tol: f64,
    pub newton_tol: f64,
    pub elliptic_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            map_tol: 1e-12,
            newton_tol: 1e-11,
            elliptic_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Model,
    pub jacobian: JacobianMode,
    pub n: usize,
    pub dt: f64,
    pub t_end: f64,
    pub f_spec: TrigPoly,
    /// `p₀` for SG; `h₀ − 1` for SGSW.
    pub init_spec: TrigPoly,
    pub tolerances: Tolerances,
    pub convexity_slack: f64,
    /// Bound on `step_increment / dt`.
    pub lip_cap: f64,
    pub snapshot_every: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// The smallest valid SG configuration with zero initial data.
    pub fn minimal(model: Model, n: usize, dt: f64, t_end: f64) -> Self {
        RunConfig {
            model,
            jacobian: JacobianMode::default(),
            n,
            dt,
            t_end,
            f_spec: TrigPoly::constant(1.0),
            init_spec: TrigPoly::constant(0.0),
            tolerances: Tolerances::default(),
            convexity_slack: 0.0,
            lip_cap: 1e3,
            snapshot_every: 1,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.n)
    }

    pub fn coriolis(&self) -> Result<CoriolisContext> {
        CoriolisContext::from_poly(self.grid()?, &self.f_spec)
    }

    /// Sampled initial field: mean-projected `p₀` or `1 + init`.
    pub fn initial_field(&self) -> Result<PeriodicField> {
        let raw = self.init_spec.sample(self.grid()?);
        Ok(match self.model {
            Model::Sg => raw.mean_project(),
            Model::Sgsw => raw.map(|v| 1.0 + v),
        })
    }

    /// Number of whole steps that fit in `[0, T]`.
    pub fn steps(&self) -> usize {
        if self.dt <= 0.0 {
            return 0;
        }
        (self.t_end / self.dt * (1.0 + 1e-12)).floor() as usize
    }

    /// Step parameters scaled by `c₀ = λ_min(S(p₀)) − slack`.
    pub fn step_params(&self, c0: f64) -> MAStepParams {
        let mut params = MAStepParams::from_c0(c0);
        params.newton_tol = self.tolerances.newton_tol;
        params.elliptic_tol = self.tolerances.elliptic_tol;
        params.map.tol = self.tolerances.map_tol;
        params.jacobian = self.jacobian;
        params
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SgError::io(path, e))?;
        parse_and_validate(&text)
    }

    /// The INI document that parses back to this configuration.
    pub fn to_ini(&self) -> String {
        let modes = |p: &TrigPoly| {
            p.modes
                .iter()
                .map(|m| format!("mode = {} {} {:e} {:e}\n", m.k[0], m.k[1], m.cos_coef, m.sin_coef))
                .collect::<String>()
        };
        let jac = match self.jacobian {
            JacobianMode::PerIterate => "linearized",
            JacobianMode::Chord => "chord",
            JacobianMode::FiniteDifference => "fd",
        };
        format!(
            "[model]\nname = {}\njacobian = {jac}\n\n[grid]\nn = {}\ndt = {:e}\nT = {:e}\n\n\
             [coriolis]\nf0 = {:e}\n{}\n[init]\nconstant = {:e}\n{}\n\
             [tolerances]\nmap_tol = {:e}\nnewton_tol = {:e}\nelliptic_tol = {:e}\n\
             convexity_slack = {:e}\nlip_cap = {:e}\n\n[output]\ndir = {}\nsnapshot_every = {}\n",
            self.model.name(),
            self.n,
            self.dt,
            self.t_end,
            self.f_spec.constant,
            modes(&self.f_spec),
            self.init_spec.constant,
            modes(&self.init_spec),
            self.tolerances.map_tol,
            self.tolerances.newton_tol,
            self.tolerances.elliptic_tol,
            self.convexity_slack,
            self.lip_cap,
            self.out_dir.display(),
            self.snapshot_every,
        )
    }
}

/// Initial certificates reported by `check`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialCertificate {
    pub lambda_min: f64,
    pub lambda_point: [f64; 2],
    pub c0: f64,
    pub f_min: f64,
    pub init_min: f64,
    pub init_mean: f64,
}

/// Certificates of the initial data, or every hypothesis they violate.
pub fn initial_certificate(cfg: &RunConfig) -> Result<InitialCertificate> {
    let grid = cfg.grid()?;
    let cor = cfg.coriolis()?;
    let field = cfg.initial_field()?;
    field.check_finite("init")?;
    let (lambda_min, at) = convexity(&stability_matrix(&field, &cor)?);
    let c0 = lambda_min - cfg.convexity_slack;
    let cert = InitialCertificate {
        lambda_min,
        lambda_point: grid.point(grid.index(at[0], at[1])),
        c0,
        f_min: cor.f_min,
        init_min: field.min(),
        init_mean: field.mean(),
    };
    let mut errs = Vec::new();
    if !(c0 > 0.0) {
        errs.push(format!(
            "convexity floor violated: λ_min={lambda_min} at ({}, {}), slack {}",
            cert.lambda_point[0], cert.lambda_point[1], cfg.convexity_slack
        ));
    }
    if cfg.model == Model::Sgsw {
        if (cert.init_mean - 1.0).abs() > 1e-10 {
            errs.push(format!("SGSW initial height must have mean 1, got {}", cert.init_mean));
        }
        if !(cert.init_min > 0.0) {
            let (_, p) = field.min_with_location();
            let x = grid.point(grid.index(p[0], p[1]));
            errs.push(format!(
                "SGSW initial height not positive: min={} at ({}, {})",
                cert.init_min, x[0], x[1]
            ));
        }
    }
    if errs.is_empty() {
        Ok(cert)
    } else {
        Err(SgError::ConfigInvalid(errs))
    }
}

const KNOWN: &[(&str, &[&str])] = &[
    ("model", &["name", "jacobian"]),
    ("grid", &["n", "dt", "T"]),
    ("coriolis", &["f0", "mode"]),
    ("init", &["constant", "mode"]),
    (
        "tolerances",
        &["map_tol", "newton_tol", "elliptic_tol", "convexity_slack", "lip_cap"],
    ),
    ("output", &["dir", "snapshot_every"]),
];

struct Reader<'a> {
    ini: &'a Ini,
    errs: Vec<String>,
}

impl<'a> Reader<'a> {
    fn raw(&self, section: &str, key: &str) -> Option<&'a str> {
        let ini: &'a Ini = self.ini;
        ini.section(Some(section)).and_then(|s| s.get(key)).map(str::trim)
    }

    fn value<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: Option<T>) -> Option<T> {
        match self.raw(section, key) {
            Some(text) => match text.parse::<T>() {
                Ok(v) => Some(v),
                Err(_) => {
                    self.errs.push(format!("[{section}] {key}: cannot parse {text:?}"));
                    None
                }
            },
            None if default.is_some() => default,
            None => {
                self.errs.push(format!("[{section}] {key}: missing"));
                None
            }
        }
    }

    fn poly(&mut self, section: &str, constant_key: &str, default: Option<f64>) -> TrigPoly {
        let constant = self.value(section, constant_key, default).unwrap_or(0.0);
        let mut poly = TrigPoly::constant(constant);
        let modes: Vec<String> = self
            .ini
            .section(Some(section))
            .map(|s| s.get_all("mode").map(str::to_string).collect())
            .unwrap_or_default();
        for text in modes {
            let parts: Vec<&str> = text.split_whitespace().collect();
            let parsed = (parts.len() == 4)
                .then(|| {
                    Some((
                        parts[0].parse::<i64>().ok()?,
                        parts[1].parse::<i64>().ok()?,
                        parts[2].parse::<f64>().ok()?,
                        parts[3].parse::<f64>().ok()?,
                    ))
                })
                .flatten();
            match parsed {
                Some((k1, k2, c, s)) if c.is_finite() && s.is_finite() => {
                    poly = poly.with_mode(k1, k2, c, s);
                }
                _ => self.errs.push(format!(
                    "[{section}] mode: expected `k1 k2 cos_coef sin_coef`, got {text:?}"
                )),
            }
        }
        poly
    }
}

/// Parses a configuration document and checks every hypothesis on the data.
pub fn parse_and_validate(text: &str) -> Result<RunConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| SgError::ConfigInvalid(vec![format!("syntax: {e}")]))?;
    let mut rd = Reader { ini: &ini, errs: Vec::new() };
    for (section, props) in &ini {
        let name = section.unwrap_or("");
        match KNOWN.iter().find(|(s, _)| *s == name) {
            None if section.is_none() && props.is_empty() => {}
            None => rd.errs.push(format!("unknown section [{name}]")),
            Some((_, keys)) => {
                for (key, _) in props.iter() {
                    if !keys.contains(&key) {
                        rd.errs.push(format!("[{name}] unknown key {key:?}"));
                    }
                }
            }
        }
    }

    let model = match rd.raw("model", "name") {
        Some("sg") => Some(Model::Sg),
        Some("sgsw") => Some(Model::Sgsw),
        Some(other) => {
            rd.errs.push(format!("[model] name: expected sg or sgsw, got {other:?}"));
            None
        }
        None => {
            rd.errs.push("[model] name: missing".to_string());
            None
        }
    };
    let jacobian = match rd.raw("model", "jacobian") {
        None | Some("linearized") => JacobianMode::PerIterate,
        Some("chord") => JacobianMode::Chord,
        Some("fd") => JacobianMode::FiniteDifference,
        Some(other) => {
            rd.errs.push(format!("[model] jacobian: expected linearized, chord or fd, got {other:?}"));
            JacobianMode::PerIterate
        }
    };
    let n = rd.value::<usize>("grid", "n", None);
    let dt = rd.value::<f64>("grid", "dt", None);
    let t_end = rd.value::<f64>("grid", "T", None);
    let f_spec = rd.poly("coriolis", "f0", None);
    let init_spec = rd.poly("init", "constant", Some(0.0));
    let defaults = Tolerances::default();
    let tolerances = Tolerances {
        map_tol: rd.value("tolerances", "map_tol", Some(defaults.map_tol)).unwrap_or(f64::NAN),
        newton_tol: rd.value("tolerances", "newton_tol", Some(defaults.newton_tol)).unwrap_or(f64::NAN),
        elliptic_tol: rd
            .value("tolerances", "elliptic_tol", Some(defaults.elliptic_tol))
            .unwrap_or(f64::NAN),
    };
    let convexity_slack = rd.value("tolerances", "convexity_slack", Some(0.0)).unwrap_or(f64::NAN);
    let lip_cap = rd.value("tolerances", "lip_cap", Some(1e3)).unwrap_or(f64::NAN);
    let snapshot_every = rd.value::<usize>("output", "snapshot_every", Some(1)).unwrap_or(1);
    let out_dir = PathBuf::from(rd.raw("output", "dir").unwrap_or("out"));
    let mut errs = rd.errs;

    for (name, v) in [
        ("map_tol", tolerances.map_tol),
        ("newton_tol", tolerances.newton_tol),
        ("elliptic_tol", tolerances.elliptic_tol),
        ("lip_cap", lip_cap),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            errs.push(format!("[tolerances] {name} must be positive and finite, got {v}"));
        }
    }
    if !(convexity_slack >= 0.0) {
        errs.push(format!("[tolerances] convexity_slack must be >= 0, got {convexity_slack}"));
    }
    if snapshot_every == 0 {
        errs.push("[output] snapshot_every must be >= 1".to_string());
    }
    if let Some(dt) = dt {
        if !(dt > 0.0 && dt.is_finite()) {
            errs.push(format!("[grid] dt must be positive, got {dt}"));
        }
    }
    if let Some(t) = t_end {
        if !(t >= 0.0 && t.is_finite()) {
            errs.push(format!("[grid] T must be >= 0, got {t}"));
        }
    }
    let grid = n.and_then(|n| match GridSpec::new(n) {
        Ok(g) => Some(g),
        Err(e) => {
            errs.push(format!("[grid] n: {e}"));
            None
        }
    });
    if let Some(g) = grid {
        for (name, poly) in [("coriolis", &f_spec), ("init", &init_spec)] {
            let k = poly.max_mode();
            if k as usize > g.n() / 4 {
                errs.push(format!("[{name}] highest mode {k} exceeds n/4 = {}", g.n() / 4));
            }
        }
        if let Err(SgError::ConfigInvalid(e)) = CoriolisContext::from_poly(g, &f_spec) {
            errs.extend(e.into_iter().map(|m| format!("[coriolis] {m}")));
        }
    }
    if model == Some(Model::Sgsw) && init_spec.mean() != 0.0 {
        errs.push(format!(
            "[init] SGSW perturbation must have zero mean so that mean(h₀) = 1, got {}",
            init_spec.mean()
        ));
    }
    let (Some(model), Some(n), Some(dt), Some(t_end)) = (model, n, dt, t_end) else {
        return Err(SgError::ConfigInvalid(errs));
    };
    let cfg = RunConfig {
        model,
        jacobian,
        n,
        dt,
        t_end,
        f_spec,
        init_spec,
        tolerances,
        convexity_slack,
        lip_cap,
        snapshot_every,
        out_dir,
    };
    if !errs.is_empty() {
        return Err(SgError::ConfigInvalid(errs));
    }
    initial_certificate(&cfg)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nname = sg\n[grid]\nn = 16\ndt = 0.01\nT = 0.1\n[coriolis]\nf0 = 1\n";

    fn messages(text: &str) -> Vec<String> {
        match parse_and_validate(text) {
            Err(SgError::ConfigInvalid(m)) => m,
            other => panic!("expected ConfigInvalid, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_accepted() {
        let cfg = parse_and_validate(MINIMAL).unwrap();
        assert_eq!(cfg.model, Model::Sg);
        assert_eq!(cfg.n, 16);
        assert_eq!(cfg.steps(), 10);
        assert_eq!(cfg.init_spec, TrigPoly::constant(0.0));
        assert_eq!(cfg.tolerances, Tolerances::default());
    }

    #[test]
    fn zero_f_rejected() {
        let m = messages(&MINIMAL.replace("f0 = 1", "f0 = 0"));
        assert!(m.iter().any(|s| s.contains("f not positive")), "{m:?}");
    }

    #[test]
    fn non_convex_init_rejected_with_location() {
        // λ_min(S) = 1 − 4π²·0.05 < 0 at x₁ = 0
        let m = messages(&format!("{MINIMAL}[init]\nmode = 1 0 0.05 0\n"));
        let hit = m.iter().find(|s| s.contains("convexity floor violated")).expect("convexity message");
        assert!(hit.contains("at (0, "), "{hit}");
    }

    #[test]
    fn all_violations_reported() {
        let text = "[model]\nname = qg\n[grid]\nn = 16\ndt = -1\nT = x\n[coriolis]\nf0 = 1\nmode = 5 0 0.1 0\n[bogus]\n";
        let m = messages(text);
        for needle in ["name", "dt must be positive", "T: cannot parse", "exceeds n/4", "unknown section"] {
            assert!(m.iter().any(|s| s.contains(needle)), "{needle}: {m:?}");
        }
    }

    #[test]
    fn sgsw_requires_mean_one() {
        let text = MINIMAL.replace("name = sg", "name = sgsw") + "[init]\nconstant = 0.5\n";
        let m = messages(&text);
        assert!(m.iter().any(|s| s.contains("zero mean")), "{m:?}");
    }

    #[test]
    fn round_trips_through_ini() {
        let text = format!(
            "{MINIMAL}[init]\nmode = 1 0 0.01 0\nmode = 0 1 0 0.01\n[tolerances]\nconvexity_slack = 0.05\n[output]\ndir = runs/a\nsnapshot_every = 5\n"
        );
        let cfg = parse_and_validate(&text).unwrap();
        assert_eq!(parse_and_validate(&cfg.to_ini()).unwrap(), cfg);
        let cert = initial_certificate(&cfg).unwrap();
        assert!((cert.c0 - (cert.lambda_min - 0.05)).abs() < 1e-15);
    }
}
