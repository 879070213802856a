//! Run configuration: defaults, config file and flags, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use qtraj::adaptive::{tomographic_inputs, PhaseController};
use qtraj::detection::COMPLETION_TIME;
use qtraj::fock::coherent_state;
use qtraj::trajectories::{SamplingStrategy, Scheme};
use qtraj::{FockSpace, StateVector, C64};

use crate::error::CliError;

pub const SEED_ENV: &str = "QTRAJ_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Simulate,
    MasterCheck,
    Povm,
    Wigner,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Method {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "C", alias = "c")]
    C,
}

impl Method {
    pub fn strategy(self) -> SamplingStrategy {
        match self {
            Method::A => SamplingStrategy::PhysicalA,
            Method::C => SamplingStrategy::OstensibleC { lambda1: None },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PovmKind {
    Ideal,
    Standard,
    Homodyne,
    Heterodyne,
}

/// The effective configuration of one run. Echoed at the top of every output
/// so that the run can be repeated with `--config <output file>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    /// "vacuum", "fock:n", "coherent:re,im", "qubit:c0,c1", or for
    /// `adaptive` also "tomographic".
    pub state: String,
    pub nmax: usize,
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub method: Method,
    /// `|gamma|` of the local oscillator for jump schemes.
    pub lo_amplitude: f64,
    pub controller: String,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: Option<usize>,
    pub nbins: usize,
    pub kind: Option<PovmKind>,
    pub reconstruct: Vec<PathBuf>,
    /// Sample completed measurements (`A`, `B`) instead of full records.
    pub completed: bool,
    /// Extra times at which `master-check` compares; `t_final` is always included.
    pub times: Vec<f64>,
    pub r: Option<String>,
    pub s: Option<String>,
    pub record: Option<PathBuf>,
    pub record_index: usize,
    pub npoints: usize,
    /// Half-width of the homodyne and heterodyne POVM grids; chosen from
    /// `nmax` when unset.
    pub xmax: Option<f64>,
    pub corrupt_weights: bool,
}

impl RunConfig {
    pub fn defaults(command: CommandKind) -> Self {
        let mut c = RunConfig {
            command,
            state: "vacuum".into(),
            nmax: 12,
            dt: 1e-3,
            t_final: 1.0,
            n_traj: 1000,
            seed: 0,
            scheme: Scheme::Jump,
            method: Method::A,
            lo_amplitude: 0.0,
            controller: "constant:0".into(),
            model: None,
            out: None,
            format: Format::Jsonl,
            threads: None,
            nbins: 16,
            kind: None,
            reconstruct: Vec::new(),
            completed: false,
            times: Vec::new(),
            r: None,
            s: None,
            record: None,
            record_index: 0,
            npoints: 200,
            xmax: None,
            corrupt_weights: false,
        };
        match command {
            CommandKind::Povm => c.format = Format::Json,
            CommandKind::Wigner => {
                c.format = Format::Csv;
                c.t_final = COMPLETION_TIME;
            }
            CommandKind::Adaptive => {
                c.state = "tomographic".into();
                c.nmax = 1;
                c.t_final = COMPLETION_TIME;
                c.controller = "adaptive-single".into();
                c.scheme = Scheme::Diffusive;
                c.method = Method::C;
            }
            _ => {}
        }
        c
    }

    /// Merges `defaults < file < flags`. The seed falls back to `QTRAJ_SEED`
    /// when neither the file nor the flags set it; the method defaults to C
    /// for the diffusive scheme.
    pub fn resolve(
        command: CommandKind,
        file: Option<&Path>,
        flags: Value,
        env_seed: Option<String>,
    ) -> Result<Self, CliError> {
        let Value::Object(mut merged) = to_value(&Self::defaults(command))? else {
            unreachable!("config serializes to an object")
        };
        let mut seed_given = false;
        let mut method_given = false;
        if let Some(path) = file {
            let layer = load_layer(path)?;
            seed_given |= layer.contains_key("seed");
            method_given |= layer.contains_key("method");
            overlay(&mut merged, layer);
        }
        let Value::Object(flags) = flags else {
            return Err(CliError::Config(
                "flags did not serialize to an object".into(),
            ));
        };
        seed_given |= flags.contains_key("seed");
        method_given |= flags.contains_key("method");
        overlay(&mut merged, flags);
        // the diffusive unraveling is only available in its linear form
        if !method_given && merged.get("scheme") == Some(&Value::from("diffusive")) {
            merged.insert("method".into(), to_value(&Method::C)?);
        }
        if !seed_given {
            if let Some(raw) = env_seed {
                let seed: u64 = raw.trim().parse().map_err(|_| {
                    CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer"))
                })?;
                merged.insert("seed".into(), seed.into());
            }
        }
        merged.insert("command".into(), to_value(&command)?);
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.nmax == 0 {
            return bad("nmax must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if self.n_traj < 2 {
            return bad(format!("n_traj must be at least 2, got {}", self.n_traj));
        }
        if self.nbins < 2 {
            return bad(format!("nbins must be at least 2, got {}", self.nbins));
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if !(self.lo_amplitude >= 0.0 && self.lo_amplitude.is_finite()) {
            return bad(format!(
                "lo_amplitude must be non-negative, got {}",
                self.lo_amplitude
            ));
        }
        if let Some(x) = self.xmax.filter(|x| !(*x > 0.0 && x.is_finite())) {
            return bad(format!("xmax must be positive, got {x}"));
        }
        if self.npoints < 8 {
            return bad(format!("npoints must be at least 8, got {}", self.npoints));
        }
        if let Some(t) = self
            .times
            .iter()
            .find(|t| !(**t > 0.0 && **t <= self.t_final))
        {
            return bad(format!("comparison time {t} outside (0, t_final]"));
        }
        self.controller()?;
        let allowed: &[Format] = match self.command {
            CommandKind::Simulate => &[Format::Jsonl, Format::Csv],
            CommandKind::MasterCheck => &[Format::Jsonl, Format::Csv, Format::Json],
            CommandKind::Povm => &[Format::Json],
            CommandKind::Wigner => &[Format::Csv],
            CommandKind::Adaptive => &[Format::Jsonl],
        };
        if !allowed.contains(&self.format) {
            return bad(format!(
                "format {:?} is not available for this command",
                self.format
            ));
        }
        Ok(())
    }

    pub fn controller(&self) -> Result<PhaseController, CliError> {
        self.controller
            .parse()
            .map_err(|e: qtraj::Error| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// The config as echoed into outputs. The output path and thread count
    /// do not affect the data, so they are left out and reruns elsewhere or
    /// on other machines produce identical bytes.
    pub fn echo(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.threads = None;
        c.to_json()
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>) {
    for (k, v) in layer {
        base.insert(k, v);
    }
}

/// Reads a config layer from a JSON config file or from the config header of
/// an output file (`{"config": ...}` first line, optionally behind `# `).
fn load_layer(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed = serde_json::from_str::<Value>(&text).or_else(|_| {
        let first = text.lines().next().unwrap_or("");
        serde_json::from_str::<Value>(first.trim_start_matches('#').trim())
    });
    let value = parsed
        .map_err(|e| CliError::Config(format!("{}: not a config file: {e}", path.display())))?;
    let value = match value {
        Value::Object(mut m) if m.contains_key("config") => {
            m.remove("config").unwrap_or(Value::Null)
        }
        v => v,
    };
    match value {
        Value::Object(mut m) => {
            m.remove("command");
            Ok(m)
        }
        _ => Err(CliError::Config(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
    }
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("{what} `{s}` is not `re,im`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn parse_complex(s: &str, what: &str) -> Result<C64, CliError> {
    parse_pair(s, what).map(|(re, im)| C64::new(re, im))
}

/// Builds a named initial state on `space`.
pub fn parse_state(text: &str, space: FockSpace) -> Result<StateVector, CliError> {
    let bad = |m: String| CliError::Config(format!("state `{text}`: {m}"));
    let (kind, arg) = match text.split_once(':') {
        Some((k, a)) => (k.trim(), Some(a.trim())),
        None => (text.trim(), None),
    };
    match (kind, arg) {
        ("vacuum", None) => Ok(StateVector::vacuum(space)),
        ("fock", Some(n)) => {
            let n: usize = n
                .parse()
                .map_err(|_| bad("photon number must be an integer".into()))?;
            Ok(StateVector::fock(space, n)?)
        }
        ("coherent", Some(a)) => Ok(coherent_state(space, parse_complex(a, "amplitude")?)?),
        ("qubit", Some(a)) => {
            let (c0, c1) = parse_pair(a, "amplitudes")?;
            let mut amps = vec![C64::new(0.0, 0.0); space.dim()];
            amps[0] = C64::new(c0, 0.0);
            amps[1] = C64::new(c1, 0.0);
            Ok(StateVector::from_amps(space, amps)?.normalize()?)
        }
        _ => Err(bad(
            "expected vacuum, fock:n, coherent:re,im or qubit:c0,c1".into(),
        )),
    }
}

/// Phase-measurement inputs as `(id, state)` on the qubit space.
pub fn phase_inputs(text: &str) -> Result<Vec<(String, StateVector)>, CliError> {
    if text == "tomographic" {
        return Ok(tomographic_inputs()
            .into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect());
    }
    Ok(vec![(text.to_string(), phase_input(text)?)])
}

/// Resolves a state id found in a phase-sample file.
pub fn phase_input(id: &str) -> Result<StateVector, CliError> {
    if let Some((_, s)) = tomographic_inputs()
        .into_iter()
        .find(|(name, _)| *name == id)
    {
        return Ok(s);
    }
    parse_state(id, FockSpace::qubit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trips_losslessly() {
        let mut c = RunConfig::defaults(CommandKind::Simulate);
        c.dt = 0.1 + 0.2;
        c.seed = u64::MAX;
        c.times = vec![1.0 / 3.0];
        c.r = Some("0.5,-0.25".into());
        c.out = Some("a b.jsonl".into());
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"dt": 0.002, "n_traj": 50, "seed": 9}"#).unwrap();
        let flags = json!({"n_traj": 20});
        let c = RunConfig::resolve(CommandKind::Simulate, Some(&path), flags, Some("4".into()))
            .unwrap();
        assert_eq!((c.dt, c.n_traj, c.seed, c.t_final), (0.002, 20, 9, 1.0));
    }

    #[test]
    fn env_seed_is_a_fallback() {
        let c =
            RunConfig::resolve(CommandKind::Simulate, None, json!({}), Some("17".into())).unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.method, Method::A);
        let c = RunConfig::resolve(
            CommandKind::Simulate,
            None,
            json!({"scheme": "diffusive"}),
            None,
        )
        .unwrap();
        assert_eq!(c.method, Method::C);
        let c = RunConfig::resolve(
            CommandKind::Simulate,
            None,
            json!({"seed": 3}),
            Some("17".into()),
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert!(
            RunConfig::resolve(CommandKind::Simulate, None, json!({}), Some("x".into())).is_err()
        );
    }

    #[test]
    fn reads_echoed_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::defaults(CommandKind::Wigner);
        c.t_final = 3.5;
        let jsonl = dir.path().join("o.jsonl");
        fs::write(
            &jsonl,
            format!("{{\"config\":{}}}\n{{\"x\":1}}\n", c.to_json()),
        )
        .unwrap();
        let csv = dir.path().join("o.csv");
        fs::write(&csv, format!("# {{\"config\":{}}}\nq,p\n", c.to_json())).unwrap();
        for p in [&jsonl, &csv] {
            let back = RunConfig::resolve(CommandKind::Wigner, Some(p), json!({}), None).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn rejects_bad_values() {
        for flags in [
            json!({"nmax": 0}),
            json!({"dt": -1.0}),
            json!({"controller": "sideways"}),
            json!({"format": "csv", "nbins": 1}),
            json!({"bogus": 1}),
        ] {
            assert!(matches!(
                RunConfig::resolve(CommandKind::Simulate, None, flags, None),
                Err(CliError::Config(_))
            ));
        }
        assert!(
            RunConfig::resolve(CommandKind::Povm, None, json!({"format": "csv"}), None).is_err()
        );
    }

    #[test]
    fn state_specs() {
        let space = FockSpace::new(6).unwrap();
        assert_eq!(
            parse_state("fock:2", space).unwrap().amp(2),
            C64::new(1.0, 0.0)
        );
        let q = parse_state("qubit:1,1", space).unwrap();
        assert!((q.amp(1).re - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(
            (parse_state("coherent:0.5,0", space).unwrap().amp(0).re - (-0.125f64).exp()).abs()
                < 1e-8
        );
        for bad in ["fock:x", "squeezed:1", "fock:9", "coherent:1"] {
            assert!(parse_state(bad, space).is_err(), "{bad}");
        }
        assert_eq!(phase_inputs("tomographic").unwrap().len(), 4);
        assert!(phase_input("plus-i").is_ok());
    }
}
