use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ServerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub anatomy_mesh: Option<PathBuf>,
    pub collecting_system_mesh: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    /// CT fiducial positions: `label,x,y,z` rows.
    pub ct_fiducials: Option<PathBuf>,
    pub bind: String,
    pub igtl_port: u16,
    pub viewer_port: u16,
    pub decimation_mm: f64,
    pub trail_capacity: usize,
    pub threshold: f64,
    pub metrics_interval_ms: u64,
    pub capture_window_ms: u64,
    /// Each session writes into `<session_root>/<session id>/`.
    pub session_root: PathBuf,
    pub window: f64,
    pub level: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            anatomy_mesh: None,
            collecting_system_mesh: None,
            volume: None,
            ct_fiducials: None,
            bind: "127.0.0.1".into(),
            igtl_port: scopenav_core::igtl::DEFAULT_PORT,
            viewer_port: 8080,
            decimation_mm: 0.5,
            trail_capacity: 100_000,
            threshold: scopenav_core::geometry::DEFAULT_THRESHOLD,
            metrics_interval_ms: 1000,
            capture_window_ms: 1000,
            session_root: PathBuf::from("sessions"),
            window: 400.0,
            level: 40.0,
        }
    }
}

impl SessionConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: SessionConfig =
            toml::from_str(&text).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.anatomy_mesh,
            &mut cfg.collecting_system_mesh,
            &mut cfg.volume,
            &mut cfg.ct_fiducials,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.session_root.is_relative() {
            cfg.session_root = base.join(&cfg.session_root);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::Config(m));
        if !(self.decimation_mm >= 0.0 && self.decimation_mm.is_finite()) {
            return bad(format!("decimation_mm {} must be >= 0", self.decimation_mm));
        }
        if self.trail_capacity == 0 {
            return bad("trail_capacity must be positive".into());
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return bad(format!("threshold {} must be positive", self.threshold));
        }
        if self.metrics_interval_ms == 0 {
            return bad("metrics_interval_ms must be positive".into());
        }
        if self.window.is_nan() || self.window <= 0.0 {
            return bad(format!("window {} must be positive", self.window));
        }
        Ok(())
    }
}
