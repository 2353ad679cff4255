use std::fmt;
use std::str::FromStr;

use super::mesh::Refinement;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommMode {
    /// Every ghost transfer is a parcel, even between sub-grids on the same
    /// locality.
    RemoteAction,
    /// Same-locality neighbours are read directly once their boundaries are
    /// published; only cross-locality transfers use parcels.
    DirectLocal,
}

impl CommMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CommMode::RemoteAction => "remote_action",
            CommMode::DirectLocal => "direct_local",
        }
    }
}

impl FromStr for CommMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "remote_action" => Ok(CommMode::RemoteAction),
            "direct_local" => Ok(CommMode::DirectLocal),
            _ => Err(format!("unknown comm_mode {s:?} (expected remote_action or direct_local)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub levels: u8,
    pub refinement: Refinement,
    /// Cells per sub-grid edge.
    pub n: usize,
    pub num_steps: u32,
    pub hydro_iterations: u32,
    pub gravity_iterations: u32,
    pub kernel_min_ns: u64,
    pub kernel_max_ns: u64,
    pub comm_mode: CommMode,
    pub seed: u64,
    pub stream_count: u32,
    pub workers: usize,
    /// CPU time spent by each of the once-per-run regrid tasks.
    pub regrid_task_ns: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            levels: 2,
            refinement: Refinement::Full,
            n: 8,
            num_steps: 40,
            hydro_iterations: 3,
            gravity_iterations: 6,
            kernel_min_ns: 100_000,
            kernel_max_ns: 2_000_000,
            comm_mode: CommMode::DirectLocal,
            seed: 1,
            stream_count: 128,
            workers: 1,
            regrid_task_ns: 50_000,
        }
    }
}

impl WorkloadConfig {
    /// Strong-scaling setup: a 73-grid mesh on a narrow device so each
    /// locality's stream pool, not the mesh, limits throughput.
    pub fn scaling() -> Self {
        WorkloadConfig {
            levels: 3,
            num_steps: 4,
            kernel_min_ns: 100_000,
            kernel_max_ns: 300_000,
            stream_count: 4,
            ..WorkloadConfig::default()
        }
    }
}

/// `line` is 1-based; 0 marks a problem with the configuration as a whole.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            0 => f.write_str(&self.message),
            n => write!(f, "line {n}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid workload configuration: {0}")]
pub struct InvalidConfig(pub String);

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let bad = |m: &str| Err(InvalidConfig(m.to_string()));
        if self.levels == 0 || self.levels > 8 {
            return bad("levels must be in 1..=8");
        }
        if self.n == 0 {
            return bad("N must be positive");
        }
        if self.num_steps == 0 {
            return bad("steps must be positive");
        }
        if self.hydro_iterations == 0 || self.gravity_iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.kernel_min_ns == 0 || self.kernel_min_ns > self.kernel_max_ns {
            return bad("kernel range must satisfy 0 < min <= max");
        }
        if self.stream_count == 0 {
            return bad("stream_count must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        if let Refinement::Random(p) = self.refinement {
            if !(0.0..=1.0).contains(&p) {
                return bad("refine fraction must be in [0, 1]");
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigParseError> {
        Self::parse_over(WorkloadConfig::default(), text)
    }

    /// Like [`WorkloadConfig::parse`], with `base` supplying unset keys.
    pub fn parse_over(base: WorkloadConfig, text: &str) -> Result<Self, ConfigParseError> {
        let mut c = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigParseError { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            c.set(k.trim(), v.trim()).map_err(err)?;
        }
        c.validate().map_err(|e| ConfigParseError { line: 0, message: e.0 })?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "levels" => self.levels = parse_num(key, v)?,
            "refine" => {
                self.refinement = if v == "full" { Refinement::Full } else { Refinement::Random(parse_num(key, v)?) }
            }
            "N" => self.n = parse_num(key, v)?,
            "steps" => self.num_steps = parse_num(key, v)?,
            "hydro_iterations" => self.hydro_iterations = parse_num(key, v)?,
            "gravity_iterations" => self.gravity_iterations = parse_num(key, v)?,
            "kernel_min_ns" => self.kernel_min_ns = parse_num(key, v)?,
            "kernel_max_ns" => self.kernel_max_ns = parse_num(key, v)?,
            "comm_mode" => self.comm_mode = v.parse()?,
            "seed" => self.seed = parse_num(key, v)?,
            "stream_count" => self.stream_count = parse_num(key, v)?,
            "workers" => self.workers = parse_num(key, v)?,
            "regrid_task_ns" => self.regrid_task_ns = parse_num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            (
                "refine",
                match self.refinement {
                    Refinement::Full => "full".to_string(),
                    Refinement::Random(p) => p.to_string(),
                },
            ),
            ("N", self.n.to_string()),
            ("steps", self.num_steps.to_string()),
            ("hydro_iterations", self.hydro_iterations.to_string()),
            ("gravity_iterations", self.gravity_iterations.to_string()),
            ("kernel_min_ns", self.kernel_min_ns.to_string()),
            ("kernel_max_ns", self.kernel_max_ns.to_string()),
            ("comm_mode", self.comm_mode.as_str().to_string()),
            ("seed", self.seed.to_string()),
            ("stream_count", self.stream_count.to_string()),
            ("workers", self.workers.to_string()),
            ("regrid_task_ns", self.regrid_task_ns.to_string()),
        ]
    }
}

impl fmt::Display for WorkloadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = WorkloadConfig::default();
        c.validate().unwrap();
        assert_eq!((c.num_steps, c.gravity_iterations, c.hydro_iterations), (40, 6, 3));
        assert_eq!((c.kernel_min_ns, c.kernel_max_ns, c.n), (100_000, 2_000_000, 8));
    }

    #[test]
    fn display_roundtrips_through_parse() {
        let c = WorkloadConfig {
            refinement: Refinement::Random(0.25),
            comm_mode: CommMode::RemoteAction,
            num_steps: 3,
            ..Default::default()
        };
        assert_eq!(WorkloadConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = WorkloadConfig::parse("# c\nsteps = 4\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(WorkloadConfig::parse("steps 4").is_err());
        assert!(WorkloadConfig::parse("steps = 0").is_err());
        assert!(WorkloadConfig::parse("comm_mode = carrier_pigeon").is_err());
        assert!(WorkloadConfig::parse("kernel_min_ns = 5\nkernel_max_ns = 4").is_err());
    }
}
