//! Config parsing, artifact I/O and the stage pipeline behind the binary.
//!
//! Stages run in the fixed order library → solve → fuse → plan → curriculum
//! and each writes under its own subdirectory of the output directory.
//! Every JSON artifact is wrapped in an [`Envelope`] carrying the config hash
//! and seed; CSV files start with a `# config_hash=…` comment line. A stage
//! whose artifact already exists with the same hash is skipped; a hash
//! mismatch is refused unless `force` is set.
//!
//! Per-stage randomness: `seed::derive(config.seed, "<stage>", &[])`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch_cost::{CostModel, ParentArch, Precision};
use crate::block_library::{
    self, Activation, CalibrationConfig, Catalog, FfnInit, FfnWeights, LibrarySettings, RmsNorm,
};
use crate::ffn_fusion::{self, FusionError};
use crate::pipeline_planner::{self, ArchProfile, ClusterShape, PlanError, SearchOptions, SearchOutcome};
use crate::rl_curriculum::{self, CurriculumConfig, CurriculumPlan};
use crate::search::{self, CachedTokenConstraint, ConstraintSet, ParetoPoint, PuzzleSolution, SearchError, SpeedupReport};
use crate::seed;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error("config hash mismatch for {path}: artifact has {found}, current config is {expected}")]
    HashMismatch { path: String, expected: String, found: String },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingArtifact(_) | CliError::HashMismatch { .. } => 2,
            CliError::Infeasible(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::HashMismatch { .. } => "hash_mismatch",
            CliError::Infeasible(_) => "infeasible",
            CliError::Internal(_) => "internal",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::HashMismatch { expected, found, path } = self {
            v["expected_hash"] = expected.clone().into();
            v["found_hash"] = found.clone().into();
            v["path"] = path.clone().into();
        }
        v
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Infeasible(_) => CliError::Infeasible(e.to_string()),
            SearchError::InvalidConstraints(_) | SearchError::InvalidCatalog(_) => CliError::Config(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::NoFeasiblePlan { .. } | PlanError::OutOfMemory { .. } => CliError::Infeasible(e.to_string()),
            PlanError::InvalidArgument(_) | PlanError::TooManyStages { .. } => CliError::Config(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Library,
    Solve,
    Fuse,
    Plan,
    Curriculum,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Library, Stage::Solve, Stage::Fuse, Stage::Plan, Stage::Curriculum];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Library => "library",
            Stage::Solve => "solve",
            Stage::Fuse => "fuse",
            Stage::Plan => "plan",
            Stage::Curriculum => "curriculum",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub compute_rate: f64,
    pub bandwidth: f64,
    pub ffn_alignment: usize,
    pub precision: Precision,
}

impl Default for CostSection {
    fn default() -> Self {
        let m = CostModel::default();
        Self { compute_rate: m.compute_rate, bandwidth: m.bandwidth, ffn_alignment: m.ffn_alignment, precision: Precision::Bf16 }
    }
}

impl CostSection {
    pub fn model(&self) -> CostModel {
        CostModel { compute_rate: self.compute_rate, bandwidth: self.bandwidth, ffn_alignment: self.ffn_alignment }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibrarySection {
    pub ratio_grid: Vec<f64>,
    pub calibration: CalibrationConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub init: FfnInit,
    pub activation: Activation,
    /// Use this catalog instead of building one (relative to the config file).
    pub catalog_path: Option<PathBuf>,
}

impl Default for LibrarySection {
    fn default() -> Self {
        Self {
            ratio_grid: vec![1.0, 0.87, 0.75, 0.5, 0.1],
            calibration: CalibrationConfig::default(),
            steps: block_library::DistillHyper::default().steps,
            learning_rate: block_library::DistillHyper::default().learning_rate,
            init: FfnInit::ParentTruncate,
            activation: Activation::Silu,
            catalog_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_weight_bytes: Option<u64>,
    pub max_latency: Option<f64>,
    /// Latency bound expressed as a required speedup over the parent.
    pub min_latency_reduction: Option<f64>,
    pub min_cached_tokens: Option<CachedTokenConstraint>,
    /// Explicit latency budgets for the Pareto sweep.
    pub latency_grid: Option<Vec<f64>>,
    /// Evenly spaced budgets between the fastest assignment and the parent;
    /// 0 disables the sweep when no explicit grid is given.
    pub pareto_points: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            max_weight_bytes: None,
            max_latency: None,
            min_latency_reduction: Some(1.5),
            min_cached_tokens: None,
            latency_grid: None,
            pareto_points: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub enabled: bool,
    /// Random inputs per fused run for the equivalence check.
    pub equivalence_samples: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { enabled: true, equivalence_samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelismSection {
    pub options: SearchOptions,
    /// Used when the profile is derived from the solution.
    pub activation_bytes_per_layer: u64,
    /// Explicit profile; otherwise taken from the fused or solved model.
    pub profile: Option<ArchProfile>,
}

impl Default for ParallelismSection {
    fn default() -> Self {
        Self { options: SearchOptions::default(), activation_bytes_per_layer: 1 << 20, profile: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPool {
    pub count: usize,
    pub attempts: u32,
}

impl Default for SyntheticPool {
    fn default() -> Self {
        Self { count: 2000, attempts: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    /// `prompt_id, k, n` lines; a synthetic pool is generated when absent.
    pub records_path: Option<PathBuf>,
    pub synthetic: SyntheticPool,
    pub threshold: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub sigma: f64,
    pub start_level: Option<f64>,
    pub end_level: Option<f64>,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let c = CurriculumConfig::default();
        Self {
            records_path: None,
            synthetic: SyntheticPool::default(),
            threshold: 0.75,
            batch_size: c.batch_size,
            n_batches: c.n_batches,
            sigma: c.sigma,
            start_level: None,
            end_level: None,
        }
    }
}

impl CurriculumSection {
    pub fn config(&self) -> CurriculumConfig {
        CurriculumConfig {
            batch_size: self.batch_size,
            n_batches: self.n_batches,
            sigma: self.sigma,
            start_level: self.start_level,
            end_level: self.end_level,
        }
    }
}

pub fn default_arch() -> ParentArch {
    ParentArch { n_layers: 8, d_model: 16, n_heads: 4, n_kv_heads: 2, head_dim: 4, d_ffn: 64, vocab_size: 256 }
}

pub fn default_cluster() -> ClusterShape {
    ClusterShape { n_nodes: 1, gpus_per_node: 8, gpu_memory: 80_000_000_000, cpu_memory_per_node: 2_000_000_000_000 }
}

/// Full run configuration. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "all_stages")]
    pub stages: Vec<Stage>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_arch")]
    pub arch: ParentArch,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub library: LibrarySection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default = "default_cluster")]
    pub cluster: ClusterShape,
    #[serde(default)]
    pub parallelism: ParallelismSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
}

fn all_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.arch.validate().map_err(|e| cfg(e.to_string()))?;
        self.cost.model().validate().map_err(|e| cfg(e.to_string()))?;
        if self.library.ratio_grid.is_empty()
            || self.library.ratio_grid.iter().any(|r| !(r.is_finite() && (0.0..=1.0).contains(r)))
        {
            return Err(cfg("library.ratio_grid must be non-empty with values in [0, 1]".into()));
        }
        if self.stages.is_empty() {
            return Err(cfg("no stages requested".into()));
        }
        self.cluster.validate().map_err(|e| cfg(e.to_string()))?;
        Ok(())
    }
}

/// Wrapper around every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifact {
    /// Objective as formulated here: minimize summed per-layer held-out MSE.
    pub objective: String,
    pub constraints: ConstraintSet,
    pub solution: PuzzleSolution,
    pub parent: Option<PuzzleSolution>,
    pub speedup: Option<SpeedupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArtifact {
    pub fixed: ConstraintSet,
    pub points: Vec<ParetoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseArtifact {
    pub runs_found: Vec<ffn_fusion::FusableRun>,
    pub solution: PuzzleSolution,
    pub speedup: Option<SpeedupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub profile_source: String,
    pub optimizer_layout_note: String,
    pub outcome: SearchOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumArtifact {
    pub total_records: usize,
    pub retained_records: usize,
    pub threshold: f64,
    pub plan: CurriculumPlan,
    pub difficulty_slope: f64,
}

pub mod paths {
    pub const RESOLVED_CONFIG: &str = "config.resolved.json";
    pub const CATALOG: &str = "library/catalog.json";
    pub const WEIGHTS: &str = "library/weights.bin";
    pub const SOLUTION: &str = "solve/solution.json";
    pub const PARETO: &str = "solve/pareto.json";
    pub const PARETO_CSV: &str = "solve/pareto.csv";
    pub const FUSED: &str = "fuse/solution.json";
    pub const PLAN: &str = "plan/plan.json";
    pub const CURRICULUM: &str = "curriculum/plan.json";
}

/// Writes through a temporary file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Internal(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

/// A loaded config plus where relative paths resolve from.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub force: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub stages: Option<Vec<Stage>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub force: bool,
}

impl Run {
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(config_path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
        let mut config = RunConfig::from_json(&text)?;
        if let Some(s) = &overrides.stages {
            config.stages = s.clone();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        let base_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out_dir = match &overrides.out {
            Some(o) => o.clone(),
            None if config.output_dir.is_absolute() => config.output_dir.clone(),
            None => base_dir.join(&config.output_dir),
        };
        Run::new(config, base_dir, out_dir, overrides.force)
    }

    pub fn new(config: RunConfig, base_dir: PathBuf, out_dir: PathBuf, force: bool) -> Result<Self, CliError> {
        config.validate()?;
        let mut run = Run { config, base_dir, out_dir, config_hash: String::new(), force };
        run.config_hash = run.compute_hash()?;
        Ok(run)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    /// SHA-256 over the resolved config (minus stage selection and output
    /// location) and the bytes of every input file it references.
    fn compute_hash(&self) -> Result<String, CliError> {
        let mut v = serde_json::to_value(&self.config).map_err(|e| CliError::Internal(e.to_string()))?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        obj.remove("stages");
        obj.remove("output_dir");
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&v).map_err(|e| CliError::Internal(e.to_string()))?);
        for p in [&self.config.library.catalog_path, &self.config.curriculum.records_path].into_iter().flatten() {
            let bytes = fs::read(self.resolve(p))
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        seed::derive(self.config.seed, stage.name(), &[])
    }

    fn artifact(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn write_envelope<T: Serialize>(&self, rel: &str, stage: Stage, data: &T) -> Result<(), CliError> {
        let env = Envelope { config_hash: self.config_hash.clone(), seed: self.config.seed, stage: stage.name().into(), data };
        write_atomic(&self.artifact(rel), &to_json(&env)?)
    }

    fn csv_header(&self) -> String {
        format!("# config_hash={},seed={}\n", self.config_hash, self.config.seed)
    }

    /// Reads an artifact, insisting it was produced under the current config.
    fn read_envelope<T: DeserializeOwned>(&self, rel: &str) -> Result<T, CliError> {
        let path = self.artifact(rel);
        if !path.exists() {
            return Err(CliError::MissingArtifact(rel.to_string()));
        }
        let env: Envelope<T> = read_json(&path)?;
        if env.config_hash != self.config_hash {
            return Err(CliError::HashMismatch { path: rel.into(), expected: self.config_hash.clone(), found: env.config_hash });
        }
        Ok(env.data)
    }

    /// `Ok(true)` when the stage's primary artifact is already present for
    /// this config; refuses a stale one unless forced.
    fn already_done(&self, rel: &str) -> Result<bool, CliError> {
        let path = self.artifact(rel);
        if !path.exists() {
            return Ok(false);
        }
        #[derive(Deserialize)]
        struct Head {
            config_hash: String,
        }
        let head: Head = read_json(&path)?;
        if head.config_hash == self.config_hash {
            Ok(true)
        } else if self.force {
            Ok(false)
        } else {
            Err(CliError::HashMismatch { path: rel.into(), expected: self.config_hash.clone(), found: head.config_hash })
        }
    }

    /// Runs the requested stages in canonical order.
    pub fn run_pipeline(&self) -> Result<Vec<StageStatus>, CliError> {
        let mut stages = self.config.stages.clone();
        stages.sort();
        stages.dedup();
        // Refuse before touching anything if a stale artifact is in the way.
        for &s in &stages {
            self.already_done(primary_artifact(s))?;
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&self.artifact(paths::RESOLVED_CONFIG), &to_json(&Envelope {
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            stage: "config".into(),
            data: &self.config,
        })?)?;
        let mut out = Vec::new();
        for s in stages {
            if self.already_done(primary_artifact(s))? {
                out.push(StageStatus { stage: s, reused: true });
                continue;
            }
            match s {
                Stage::Library => self.stage_library()?,
                Stage::Solve => self.stage_solve()?,
                Stage::Fuse => self.stage_fuse()?,
                Stage::Plan => self.stage_plan()?,
                Stage::Curriculum => self.stage_curriculum()?,
            }
            out.push(StageStatus { stage: s, reused: false });
        }
        Ok(out)
    }

    fn stage_library(&self) -> Result<(), CliError> {
        let c = &self.config;
        let seed = self.stage_seed(Stage::Library);
        let settings = LibrarySettings {
            arch: c.arch.clone(),
            cost_model: c.cost.model(),
            precision: c.cost.precision,
            calibration: c.library.calibration,
            steps: c.library.steps,
            learning_rate: c.library.learning_rate,
            init: c.library.init,
            seed,
        };
        let parents = block_library::random_parents(&c.arch, c.library.activation, seed);
        let lib = block_library::build_library(&settings, &parents, &c.library.ratio_grid)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let mut bin = Vec::new();
        block_library::write_weights(&mut bin, &lib).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&self.artifact(paths::WEIGHTS), &bin)?;
        self.write_envelope(paths::CATALOG, Stage::Library, &lib.catalog)
    }

    fn load_catalog(&self) -> Result<Catalog, CliError> {
        match &self.config.library.catalog_path {
            Some(p) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
                if let Ok(env) = serde_json::from_str::<Envelope<Catalog>>(&text) {
                    return Ok(env.data);
                }
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            None => self.read_envelope(paths::CATALOG),
        }
    }

    fn constraints(&self, catalog: &Catalog, parent: Option<&PuzzleSolution>) -> Result<ConstraintSet, CliError> {
        let s = &self.config.solver;
        let mut max_latency = s.max_latency;
        if let Some(r) = s.min_latency_reduction {
            let p = parent.ok_or_else(|| {
                CliError::Config("min_latency_reduction needs the parent block in every layer".into())
            })?;
            let bound = p.cost.latency_per_token / r;
            max_latency = Some(max_latency.map_or(bound, |m| m.min(bound)));
        }
        let c = ConstraintSet {
            max_weight_bytes: s.max_weight_bytes,
            max_latency,
            min_cached_tokens: s.min_cached_tokens,
            precision: catalog.precision,
        };
        c.validate()?;
        Ok(c)
    }

    fn stage_solve(&self) -> Result<(), CliError> {
        let catalog = self.load_catalog()?;
        let parent = search::parent_solution(&catalog).ok();
        let constraints = self.constraints(&catalog, parent.as_ref())?;
        let solution = search::solve(&catalog, &constraints)?;
        let speedup = parent.as_ref().map(|p| search::speedup_report(&solution, p)).transpose()?;

        let grid = match &self.config.solver.latency_grid {
            Some(g) => g.clone(),
            None if self.config.solver.pareto_points > 0 => latency_grid(&catalog, self.config.solver.pareto_points),
            None => Vec::new(),
        };
        if !grid.is_empty() {
            let fixed = ConstraintSet { max_latency: None, ..constraints.clone() };
            // The sweep replaces the latency bound, so validate with a placeholder.
            let fixed_ok = ConstraintSet { max_latency: Some(f64::MAX), ..fixed.clone() };
            let points = search::pareto_frontier(&catalog, &grid, &fixed_ok)?;
            let mut csv = self.csv_header();
            csv.push_str("budget,loss,latency,weight_bytes,feasible,dominated\n");
            for p in &points {
                match &p.solution {
                    Some(s) => writeln!(
                        csv,
                        "{},{},{},{},true,{}",
                        p.budget, s.total_quality_loss, s.cost.latency_per_token, s.cost.weight_bytes, p.dominated
                    ),
                    None => writeln!(csv, "{},,,,false,false", p.budget),
                }
                .expect("write to string");
            }
            self.write_envelope(paths::PARETO, Stage::Solve, &ParetoArtifact { fixed, points })?;
            write_atomic(&self.artifact(paths::PARETO_CSV), csv.as_bytes())?;
        }
        self.write_envelope(
            paths::SOLUTION,
            Stage::Solve,
            &SolveArtifact {
                objective: "minimize the sum of per-layer held-out MSE (local distillation stand-in for model quality)".into(),
                constraints,
                solution,
                parent,
                speedup,
            },
        )
    }

    fn stage_fuse(&self) -> Result<(), CliError> {
        let solved: SolveArtifact = self.read_envelope(paths::SOLUTION)?;
        let sol = &solved.solution;
        let runs = if self.config.fusion.enabled { ffn_fusion::find_fusable_runs(sol) } else { Vec::new() };
        let mut fused = ffn_fusion::apply_fusion(sol, &runs)?;

        // Equivalence residuals: trained weights when the library ran here,
        // otherwise random weights of the right widths.
        let weights = fs::read(self.artifact(paths::WEIGHTS))
            .ok()
            .and_then(|b| block_library::read_weights(b.as_slice()).ok());
        let d_model = self.config.arch.d_model;
        let mut rng = seed::rng(self.stage_seed(Stage::Fuse));
        let mut residuals = Vec::new();
        for run in &runs {
            let mut members = Vec::new();
            for l in run.layers() {
                let b = &sol.blocks[l];
                let found = weights.as_ref().and_then(|ws| {
                    ws.iter()
                        .find(|w| w.layer as usize == l && w.variant as usize == b.variant_id)
                        .map(|w| FfnWeights { w1: w.w1.clone(), w2: w.w2.clone() })
                });
                let w = match found {
                    Some(w) if 2 * (w.d_model() * w.hidden()) as u64 == b.cost.params => w,
                    _ => {
                        let hidden = (b.cost.params / (2 * d_model as u64)).max(1) as usize;
                        FfnWeights::random(d_model, hidden, &mut rng)
                    }
                };
                members.push(w);
            }
            let d = members[0].d_model();
            let run_for_shapes = ffn_fusion::FusableRun {
                member_params: members.iter().map(|m| 2 * (m.d_model() * m.hidden()) as u64).collect(),
                ..run.clone()
            };
            let block = ffn_fusion::fuse_run(&run_for_shapes, &members)?;
            let inputs: Vec<Vec<f64>> = (0..self.config.fusion.equivalence_samples)
                .map(|_| {
                    use rand::Rng;
                    use rand_distr::StandardNormal;
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                })
                .collect();
            residuals.push(ffn_fusion::equivalence_residual(
                &block,
                &members,
                &RmsNorm::ones(d),
                self.config.library.activation,
                &inputs,
            ));
        }
        if let Some(r) = fused.fusion.as_mut() {
            r.equivalence_residuals = residuals;
        }
        let speedup = solved.parent.as_ref().map(|p| search::speedup_report(&fused, p)).transpose()?;
        self.write_envelope(paths::FUSED, Stage::Fuse, &FuseArtifact { runs_found: runs, solution: fused, speedup })
    }

    fn stage_plan(&self) -> Result<(), CliError> {
        let p = &self.config.parallelism;
        let (profile, source) = match &p.profile {
            Some(pr) => (pr.clone(), "config".to_string()),
            None => {
                let (sol, source) = match self.read_envelope::<FuseArtifact>(paths::FUSED) {
                    Ok(f) => (f.solution, paths::FUSED),
                    Err(CliError::MissingArtifact(_)) => (self.read_envelope::<SolveArtifact>(paths::SOLUTION)?.solution, paths::SOLUTION),
                    Err(e) => return Err(e),
                };
                (profile_from_solution(&sol, &self.config.arch, p.activation_bytes_per_layer), source.to_string())
            }
        };
        let outcome = pipeline_planner::search_parallelism(&profile, &self.config.cluster, &p.options)?;
        let opt = p.options.optimizer;
        self.write_envelope(
            paths::PLAN,
            Stage::Plan,
            &PlanArtifact {
                profile_source: source,
                optimizer_layout_note: format!(
                    "assumed optimizer storage: {} x {} bytes per parameter",
                    opt.state_multiplier,
                    opt.precision.bytes_per_element()
                ),
                outcome,
            },
        )
    }

    fn stage_curriculum(&self) -> Result<(), CliError> {
        let c = &self.config.curriculum;
        let seed = self.stage_seed(Stage::Curriculum);
        let records = match &c.records_path {
            Some(p) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
                rl_curriculum::parse_records(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => rl_curriculum::synthetic_records(c.synthetic.count, c.synthetic.attempts, seed::derive(seed, "pool", &[])),
        };
        let retained = rl_curriculum::filter_prompts(&records, c.threshold);
        let plan = rl_curriculum::build_curriculum(&retained, &c.config(), seed).map_err(|e| match e {
            rl_curriculum::CurriculumError::Insufficient { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Config(other.to_string()),
        })?;
        self.write_envelope(
            paths::CURRICULUM,
            Stage::Curriculum,
            &CurriculumArtifact {
                total_records: records.len(),
                retained_records: retained.len(),
                threshold: c.threshold,
                difficulty_slope: plan.difficulty_slope(),
                plan,
            },
        )
    }
}

fn primary_artifact(s: Stage) -> &'static str {
    match s {
        Stage::Library => paths::CATALOG,
        Stage::Solve => paths::SOLUTION,
        Stage::Fuse => paths::FUSED,
        Stage::Plan => paths::PLAN,
        Stage::Curriculum => paths::CURRICULUM,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageStatus {
    pub stage: Stage,
    pub reused: bool,
}

/// Evenly spaced budgets from the fastest assignment to the parent's latency.
pub fn latency_grid(catalog: &Catalog, points: usize) -> Vec<f64> {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for es in &catalog.layers {
        lo += es.iter().map(|e| e.cost.latency_per_token).fold(f64::INFINITY, f64::min);
        hi += es.iter().map(|e| e.cost.latency_per_token).fold(0.0, f64::max);
    }
    if points == 1 || hi <= lo {
        return vec![hi];
    }
    let mut g: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    g.dedup();
    g
}

/// Pipeline profile of a (possibly fused) model: one entry per sequential block.
pub fn profile_from_solution(sol: &PuzzleSolution, arch: &ParentArch, activation_bytes_per_layer: u64) -> ArchProfile {
    let mut layer_params = Vec::new();
    let mut layer_costs = Vec::new();
    let spans = sol.fusion.as_ref().map(|f| f.spans.clone()).unwrap_or_default();
    let mut l = 0;
    while l < sol.n_layers {
        let span = spans.iter().find(|s| s.start_layer == l);
        let len = span.map_or(1, |s| s.length);
        let blocks = &sol.blocks[l..l + len];
        layer_params.push(blocks.iter().map(|b| b.cost.params).sum());
        let mut c = 0.0;
        for b in blocks {
            c += b.cost.latency_per_token;
        }
        layer_costs.push(c);
        l += len;
    }
    ArchProfile { layer_params, layer_costs, extra_params: arch.embedding_params(), activation_bytes_per_layer }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    #[default]
    Text,
}

/// Summary of an artifact directory, plus CSV tables written to `report/`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub present: Vec<String>,
    pub missing: Vec<String>,
    pub objective: Option<f64>,
    pub choices: Vec<String>,
    pub speedup: Option<SpeedupReport>,
    pub fused_speedup: Option<SpeedupReport>,
    pub depth_before: Option<usize>,
    pub depth_after: Option<usize>,
    pub plan: Option<(usize, usize, usize, usize)>,
    pub curriculum_slope: Option<f64>,
    pub tables: Vec<(String, String)>,
}

fn read_any<T: DeserializeOwned>(dir: &Path, rel: &str) -> Option<Envelope<T>> {
    let p = dir.join(rel);
    p.exists().then(|| read_json(&p)).and_then(Result::ok)
}

pub fn report(dir: &Path) -> Result<Report, CliError> {
    let solve: Option<Envelope<SolveArtifact>> = read_any(dir, paths::SOLUTION);
    let pareto: Option<Envelope<ParetoArtifact>> = read_any(dir, paths::PARETO);
    let fuse: Option<Envelope<FuseArtifact>> = read_any(dir, paths::FUSED);
    let plan: Option<Envelope<PlanArtifact>> = read_any(dir, paths::PLAN);
    let cur: Option<Envelope<CurriculumArtifact>> = read_any(dir, paths::CURRICULUM);
    let catalog_present = dir.join(paths::CATALOG).exists();

    let mut present = Vec::new();
    let mut missing = Vec::new();
    for (name, ok) in [
        (paths::CATALOG, catalog_present),
        (paths::SOLUTION, solve.is_some()),
        (paths::PARETO, pareto.is_some()),
        (paths::FUSED, fuse.is_some()),
        (paths::PLAN, plan.is_some()),
        (paths::CURRICULUM, cur.is_some()),
    ] {
        if ok { present.push(name.to_string()) } else { missing.push(name.to_string()) }
    }
    if present.is_empty() {
        return Err(CliError::MissingArtifact(missing.join(", ")));
    }
    let hash = [
        solve.as_ref().map(|e| (&e.config_hash, e.seed)),
        fuse.as_ref().map(|e| (&e.config_hash, e.seed)),
        plan.as_ref().map(|e| (&e.config_hash, e.seed)),
        cur.as_ref().map(|e| (&e.config_hash, e.seed)),
    ]
    .into_iter()
    .flatten()
    .next();
    let header = hash.map(|(h, s)| format!("# config_hash={h},seed={s}\n")).unwrap_or_default();

    let mut rep = Report {
        present,
        missing,
        objective: None,
        choices: Vec::new(),
        speedup: None,
        fused_speedup: None,
        depth_before: None,
        depth_after: None,
        plan: None,
        curriculum_slope: None,
        tables: Vec::new(),
    };
    if let Some(s) = &solve {
        let sol = &s.data.solution;
        rep.objective = Some(sol.total_quality_loss);
        rep.speedup = s.data.speedup;
        let mut csv = header.clone();
        csv.push_str("layer,variant_id,has_attention,ffn_ratio,quality_loss,latency,weight_bytes\n");
        for (l, b) in sol.blocks.iter().enumerate() {
            rep.choices.push(b.spec.label());
            writeln!(csv, "{l},{},{},{},{},{},{}", b.variant_id, b.spec.has_attention, b.spec.ffn_ratio, b.quality_loss, b.cost.latency_per_token, b.cost.weight_bytes).unwrap();
        }
        rep.tables.push(("choices.csv".into(), csv));
    }
    if let Some(p) = &pareto {
        let mut csv = header.clone();
        csv.push_str("budget,loss,latency,weight_bytes,feasible,dominated\n");
        for pt in &p.data.points {
            match &pt.solution {
                Some(s) => writeln!(csv, "{},{},{},{},true,{}", pt.budget, s.total_quality_loss, s.cost.latency_per_token, s.cost.weight_bytes, pt.dominated).unwrap(),
                None => writeln!(csv, "{},,,,false,false", pt.budget).unwrap(),
            }
        }
        rep.tables.push(("pareto.csv".into(), csv));
    }
    if let Some(f) = &fuse {
        rep.fused_speedup = f.data.speedup;
        if let Some(r) = &f.data.solution.fusion {
            rep.depth_before = Some(r.depth_before);
            rep.depth_after = Some(r.depth_after);
        } else {
            rep.depth_before = Some(f.data.solution.depth);
            rep.depth_after = Some(f.data.solution.depth);
        }
    }
    if let Some(p) = &plan {
        let b = &p.data.outcome.best;
        rep.plan = Some((b.tp, b.pp, b.cp, b.dp));
        let mut csv = header.clone();
        csv.push_str("tp,pp,cp,dp,weights,optimizer,activations,total,headroom\n");
        for q in &p.data.outcome.feasible {
            let m = &q.per_gpu_memory;
            writeln!(csv, "{},{},{},{},{},{},{},{},{}", q.tp, q.pp, q.cp, q.dp, m.weights, m.optimizer, m.activations, m.total, q.headroom).unwrap();
        }
        rep.tables.push(("plan_memory.csv".into(), csv));
    }
    if let Some(c) = &cur {
        rep.curriculum_slope = Some(c.data.plan.difficulty_slope());
        let mut csv = header.clone();
        csv.push_str("batch_index,mean_pass_rate,target_mean\n");
        for (i, b) in c.data.plan.batches.iter().enumerate() {
            writeln!(csv, "{i},{},{}", b.mean_pass_rate, b.target.mean).unwrap();
        }
        rep.tables.push(("curriculum_curve.csv".into(), csv));
    }
    for (name, body) in &rep.tables {
        write_atomic(&dir.join("report").join(name), body.as_bytes())?;
    }
    Ok(rep)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "artifacts: {}", self.present.join(", ")).unwrap();
        if !self.missing.is_empty() {
            writeln!(s, "missing: {}", self.missing.join(", ")).unwrap();
        }
        if let Some(o) = self.objective {
            writeln!(s, "objective (total quality loss): {o}").unwrap();
            for (l, c) in self.choices.iter().enumerate() {
                writeln!(s, "  layer {l:>3}: {c}").unwrap();
            }
        }
        if let Some(sp) = &self.speedup {
            writeln!(s, "speedup vs parent: latency {:.4}x, throughput proxy {:.4}x, kv {}", sp.latency_ratio, sp.throughput_proxy_ratio, fmt_ratio(sp.kv_ratio)).unwrap();
        }
        if let (Some(a), Some(b)) = (self.depth_before, self.depth_after) {
            writeln!(s, "fusion: depth {a} -> {b} ({} sequential blocks saved)", a - b).unwrap();
        }
        if let Some(sp) = &self.fused_speedup {
            writeln!(s, "speedup after fusion: latency {:.4}x", sp.latency_ratio).unwrap();
        }
        if let Some((tp, pp, cp, dp)) = self.plan {
            writeln!(s, "parallelism: tp={tp} pp={pp} cp={cp} dp={dp}").unwrap();
        }
        if let Some(sl) = self.curriculum_slope {
            writeln!(s, "curriculum: mean pass-rate slope per batch {sl:.6}").unwrap();
        }
        s
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or("n/a (no KV cache)".into(), |v| format!("{v:.4}x"))
}
