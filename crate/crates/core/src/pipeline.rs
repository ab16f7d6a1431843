//! The active reconstruction loop, checkpoints, and the comparison and
//! ablation drivers.
//!
//! Every random draw comes from a named sub-stream of the master seed, so
//! adding or removing consumers of one stream never shifts another.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{Field, FieldError, HashGridConfig};
use crate::geometry::{exp_se3, CameraIntrinsics, GeometryError, Pose, SphericalView, Vec3};
use crate::meshing::{export_ply, marching_cubes, MeshError, ISO_LEVEL};
use crate::metrics::{
    accumulate_recon_points, floater_volume, map_entropy, surface_coverage, MetricsError,
};
use crate::nbv::{plan, NbvConfig, NbvError, NbvResult, PlannerMethod};
use crate::sensor_sim::{
    gt_surface_points, render_view, SceneError, SdfScene, SensorConfig, ViewCapture,
};
use crate::supervision::{train_round, LossReport, SupervisionError, TrainConfig, TrainView};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("cannot parse TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot write checkpoint state: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Nbv(#[from] NbvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

/// Loop, sensor and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Builtin scene name or path to a scene TOML file.
    pub scene: String,
    pub method: PlannerMethod,
    pub max_views: usize,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub fov_deg: f64,
    /// Initial view in degrees.
    pub initial_azimuth_deg: f64,
    pub initial_elevation_deg: f64,
    pub random_initial_view: bool,
    pub sensor_noise: f64,
    pub pose_noise: bool,
    pub pose_noise_rotation: f64,
    pub pose_noise_translation: f64,
    pub coverage_points: usize,
    pub coverage_threshold: f64,
    pub entropy_resolution: usize,
    pub floater_resolution: usize,
    pub floater_margin: f64,
    /// Lattice size for the mesh coverage column; 0 disables it.
    pub mesh_metric_resolution: usize,
    pub mesh_resolution: usize,
    pub round_meshes: bool,
    pub checkpoints: bool,
    /// Single worker thread.
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            scene: "blob".into(),
            method: PlannerMethod::Optimized,
            max_views: 10,
            seed: 0,
            image_width: 64,
            image_height: 64,
            fov_deg: 24.0,
            initial_azimuth_deg: 0.0,
            initial_elevation_deg: 20.0,
            random_initial_view: false,
            sensor_noise: 0.0,
            pose_noise: false,
            pose_noise_rotation: 0.05,
            pose_noise_translation: 0.05,
            coverage_points: 20_000,
            coverage_threshold: 0.005,
            entropy_resolution: 128,
            floater_resolution: 64,
            floater_margin: 0.02,
            mesh_metric_resolution: 64,
            mesh_resolution: 128,
            round_meshes: false,
            checkpoints: true,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub train: TrainConfig,
    pub nbv: NbvConfig,
    pub field: HashGridConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Small images and ray budgets for quick end-to-end checks.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.run.image_width = 32;
        cfg.run.image_height = 32;
        cfg.run.max_views = 3;
        cfg.run.entropy_resolution = 32;
        cfg.run.floater_resolution = 32;
        cfg.run.mesh_metric_resolution = 32;
        cfg.run.mesh_resolution = 32;
        cfg.run.coverage_points = 2000;
        cfg.train.rays_per_iteration = 256;
        cfg.train.iterations = 20;
        cfg.nbv.eval_rays = 256;
        cfg.nbv.iterations = 10;
        cfg.nbv.init_samples = 8;
        cfg
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let r = &self.run;
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if r.max_views == 0 {
            return bad("max_views must be at least 1");
        }
        if r.coverage_points == 0 || r.entropy_resolution == 0 || r.floater_resolution == 0 {
            return bad("evaluation sizes must be positive");
        }
        if r.mesh_resolution < 2 {
            return bad("mesh_resolution must be at least 2");
        }
        if !(r.coverage_threshold > 0.0) {
            return bad("coverage_threshold must be positive");
        }
        if r.sensor_noise < 0.0 || r.pose_noise_rotation < 0.0 || r.pose_noise_translation < 0.0 {
            return bad("noise magnitudes must be non-negative");
        }
        self.intrinsics()?;
        self.train.validate()?;
        self.nbv.validate()?;
        self.field.validate()?;
        let el = r.initial_elevation_deg.to_radians();
        if !r.random_initial_view
            && !(el >= self.nbv.manifold.elevation_min && el <= self.nbv.manifold.elevation_max)
        {
            return bad("initial elevation lies outside the view manifold");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::from_fov(self.run.image_width, self.run.image_height, self.run.fov_deg)
    }

    pub fn scene(&self) -> Result<SdfScene, RunError> {
        match SdfScene::builtin(&self.run.scene) {
            Ok(s) => Ok(s),
            Err(builtin_err) => {
                let path = Path::new(&self.run.scene);
                if path.exists() {
                    Ok(SdfScene::load(path)?)
                } else {
                    Err(builtin_err.into())
                }
            }
        }
    }
}

/// Deterministic seed for the sub-stream `(seed, name, index)`.
pub fn substream_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(index);
    rng.gen()
}

pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name, index))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub views: usize,
    pub coverage: f64,
    pub entropy_bits: f64,
    pub floater_fraction: f64,
    pub mesh_coverage: f64,
    pub rotation_error: f64,
    pub translation_error: f64,
    pub loss: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl MetricsRow {
    pub const COLUMNS: [(&'static str, &'static str); 11] = [
        ("round", "round index, from 0"),
        ("views", "views captured when the round was evaluated"),
        ("coverage", "fraction of ground-truth surface points within the threshold of an accumulated depth point"),
        ("entropy_bits", "mean binary occupancy entropy over the evaluation grid, bits"),
        ("floater_fraction", "fraction of probe cells occupied but farther than the margin from the surface"),
        ("mesh_coverage", "coverage using extracted mesh vertices instead of depth points (NaN when disabled)"),
        ("rotation_error", "mean rotation error of estimated poses of views after the first, radians"),
        ("translation_error", "mean translation error of estimated poses of views after the first, meters"),
        ("loss", "total loss of the final training iteration (NaN in round 0)"),
        ("azimuth", "azimuth of the newest view, radians"),
        ("elevation", "elevation of the newest view, radians"),
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LossRow {
    round: usize,
    iteration: usize,
    color: f64,
    depth: f64,
    free: f64,
    total: f64,
    valid_rays: usize,
    free_points: usize,
}

const LOSS_COLUMNS: [(&str, &str); 8] = [
    ("round", "round index"),
    ("iteration", "training iteration within the round"),
    ("color", "mean squared color error over valid rays"),
    ("depth", "mean absolute depth error over valid rays"),
    ("free", "mean free-space log loss over free sample points"),
    ("total", "weighted total"),
    ("valid_rays", "valid rays in the batch"),
    ("free_points", "free sample points in the batch"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceCsvRow {
    round: usize,
    iteration: usize,
    azimuth: f64,
    elevation: f64,
    information: f64,
    cost: f64,
    utility: f64,
    method: PlannerMethod,
}

const TRACE_COLUMNS: [(&str, &str); 8] = [
    ("round", "round whose field was used for planning"),
    ("iteration", "optimizer iteration or candidate index"),
    ("azimuth", "radians"),
    ("elevation", "radians"),
    ("information", "top-N_t view information, nats per sample"),
    ("cost", "movement cost"),
    ("utility", "information minus cost"),
    ("method", "planner"),
];

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub train: f64,
    pub evaluate: f64,
    pub plan: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub metrics: MetricsRow,
    pub view: SphericalView,
    pub pose: Pose,
    pub loss: LossReport,
    pub nbv: Option<NbvResult>,
    pub timings: Timings,
}

/// Serialized loop state; the field lives next to it in `field.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionState {
    config: RunConfig,
    next_round: usize,
    gt_views: Vec<SphericalView>,
    estimated_poses: Vec<Pose>,
    rows: Vec<MetricsRow>,
}

/// A run in progress.
pub struct Session {
    pub cfg: RunConfig,
    pub scene: SdfScene,
    pub intr: CameraIntrinsics,
    pub gt_points: Vec<Vec3>,
    pub field: Field,
    pub views: Vec<TrainView>,
    pub gt_views: Vec<SphericalView>,
    pub rows: Vec<MetricsRow>,
    pub next_round: usize,
}

fn pose_noise(cfg: &RunSection, view: usize) -> ([f64; 3], [f64; 3]) {
    let mut rng = substream(cfg.seed, "pose-noise", view as u64);
    let r = cfg.pose_noise_rotation;
    let t = cfg.pose_noise_translation;
    let mut draw = |m: f64| if m > 0.0 { rng.gen_range(-m..m) } else { 0.0 };
    let w = [draw(r), draw(r), draw(r)];
    let d = [draw(t), draw(t), draw(t)];
    (w, d)
}

/// Rotates the camera about its own center by `w` (axis-angle, world
/// frame) and shifts it by `d`.
pub fn perturb_pose(pose: &Pose, w: [f64; 3], d: [f64; 3]) -> Pose {
    let rot = exp_se3(&[w[0], w[1], w[2], 0.0, 0.0, 0.0]);
    let rotated = rot.compose(&Pose {
        rotation: pose.rotation,
        translation: Vec3::ZERO,
    });
    Pose {
        rotation: rotated.rotation,
        translation: pose.translation + Vec3::from_array(d),
    }
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let scene = cfg.scene()?;
        let intr = cfg.intrinsics()?;
        let r = &cfg.run;
        let gt_points = gt_surface_points(
            &scene,
            r.coverage_points,
            substream_seed(r.seed, "scene", 0),
        );
        let field = Field::new(cfg.field, scene.aabb(), substream_seed(r.seed, "field", 0))?;
        let m = cfg.nbv.manifold;
        let first = if r.random_initial_view {
            crate::nbv::sample_manifold(&m, 1, &mut substream(r.seed, "initial-view", 0))[0]
        } else {
            m.project(r.initial_azimuth_deg.to_radians(), r.initial_elevation_deg.to_radians())
        };
        let mut s = Self {
            cfg,
            scene,
            intr,
            gt_points,
            field,
            views: Vec::new(),
            gt_views: Vec::new(),
            rows: Vec::new(),
            next_round: 0,
        };
        s.capture(first, None)?;
        Ok(s)
    }

    fn sensor(&self) -> SensorConfig {
        SensorConfig {
            noise_sigma: self.cfg.run.sensor_noise,
            ..Default::default()
        }
    }

    fn render(&self, view: &SphericalView, index: usize) -> Result<ViewCapture, RunError> {
        let seed = substream_seed(self.cfg.run.seed, "sensor", index as u64);
        Ok(render_view(&self.scene, &view.pose()?, &self.intr, &self.sensor(), seed)?)
    }

    /// Captures `view`; the reconstructor receives `estimate`, or a noisy
    /// copy of the true pose when pose noise is on (never for view 0).
    fn capture(&mut self, view: SphericalView, estimate: Option<Pose>) -> Result<(), RunError> {
        let index = self.views.len();
        let capture = self.render(&view, index)?;
        let pose = match estimate {
            Some(p) => p,
            None if self.cfg.run.pose_noise && index > 0 => {
                let (w, d) = pose_noise(&self.cfg.run, index);
                perturb_pose(&capture.pose, w, d)
            }
            None => capture.pose,
        };
        self.views.push(TrainView { capture, pose });
        self.gt_views.push(view);
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.next_round > self.cfg.run.max_views
    }

    /// Mean rotation and translation error of views after the first.
    pub fn pose_errors(&self) -> (f64, f64) {
        let n = self.views.len().saturating_sub(1);
        if n == 0 {
            return (0.0, 0.0);
        }
        let (mut r, mut t) = (0.0, 0.0);
        for v in &self.views[1..] {
            r += v.pose.rotation_angle_to(&v.capture.pose);
            t += v.pose.translation.distance(v.capture.pose.translation);
        }
        (r / n as f64, t / n as f64)
    }

    /// Metrics of the current field and captures.
    pub fn evaluate(&self) -> Result<MetricsRow, RunError> {
        let r = &self.cfg.run;
        let aabb = self.scene.aabb();
        let caps: Vec<&ViewCapture> = self.views.iter().map(|v| &v.capture).collect();
        let cloud = accumulate_recon_points(&caps, &aabb)?;
        let coverage = surface_coverage(&cloud, &self.gt_points, r.coverage_threshold)?.coverage;
        let entropy = map_entropy(&self.field, r.entropy_resolution)?.bits;
        let floaters = floater_volume(&self.field, &self.scene, r.floater_resolution, r.floater_margin)?;
        let mesh_coverage = if r.mesh_metric_resolution >= 2 {
            let mesh = marching_cubes(&self.field, r.mesh_metric_resolution, ISO_LEVEL, false)?;
            surface_coverage(&mesh.vertices, &self.gt_points, r.coverage_threshold)?.coverage
        } else {
            f64::NAN
        };
        let (rot, trans) = self.pose_errors();
        let newest = self.gt_views.last().expect("at least one view");
        Ok(MetricsRow {
            round: self.next_round,
            views: self.views.len(),
            coverage,
            entropy_bits: entropy,
            floater_fraction: floaters,
            mesh_coverage,
            rotation_error: rot,
            translation_error: trans,
            loss: 0.0,
            azimuth: newest.azimuth,
            elevation: newest.elevation,
        })
    }

    /// Runs one round. Round 0 evaluates the untrained map with the
    /// initial capture; round `k >= 1` trains on the captured views,
    /// evaluates, and plans and captures the next view while fewer than
    /// `max_views` exist.
    pub fn step(&mut self, out: Option<&Outputs>) -> Result<StepReport, RunError> {
        let round = self.next_round;
        let seed = self.cfg.run.seed;
        let t0 = Instant::now();
        let losses = if round == 0 {
            Vec::new()
        } else {
            train_round(
                &mut self.field,
                &mut self.views,
                &self.cfg.train,
                &mut substream(seed, "rays", round as u64),
            )?
        };
        let t1 = Instant::now();
        let mut row = self.evaluate()?;
        let last_loss = losses.last().copied().unwrap_or_default();
        row.loss = losses.last().map_or(f64::NAN, |l| l.total);
        let t2 = Instant::now();
        if let Some(out) = out {
            out.append_losses(round, &losses)?;
            if self.cfg.run.round_meshes {
                let mesh = marching_cubes(&self.field, self.cfg.run.mesh_resolution, ISO_LEVEL, true)?;
                export_ply(&mesh, &out.dir.join(format!("round_{round:03}.ply")))?;
            }
        }
        let current = *self.gt_views.last().expect("at least one view");
        let current_pose = self.views.last().expect("at least one view").pose;
        let nbv = if round > 0 && self.views.len() < self.cfg.run.max_views {
            let result = plan(
                self.cfg.run.method,
                &self.field,
                &current,
                self.views.len(),
                &self.intr,
                &self.cfg.nbv,
                &mut substream(seed, "plan", round as u64),
            )?;
            if let Some(out) = out {
                out.append_trace(round, &result)?;
            }
            self.capture(result.view, None)?;
            Some(result)
        } else {
            None
        };
        let t3 = Instant::now();
        self.rows.push(row);
        self.next_round += 1;
        let timings = Timings {
            train: (t1 - t0).as_secs_f64(),
            evaluate: (t2 - t1).as_secs_f64(),
            plan: (t3 - t2).as_secs_f64(),
        };
        if let Some(out) = out {
            out.write_metrics(&self.rows)?;
            out.append_timings(round, &timings)?;
            if self.cfg.run.checkpoints {
                self.save_checkpoint(&out.checkpoint_dir(round))?;
            }
        }
        Ok(StepReport {
            metrics: row,
            view: current,
            pose: current_pose,
            loss: last_loss,
            nbv,
            timings,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), RunError> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        self.field.save(&dir.join("field.bin"), true)?;
        let state = SessionState {
            config: self.cfg.clone(),
            next_round: self.next_round,
            gt_views: self.gt_views.clone(),
            estimated_poses: self.views.iter().map(|v| v.pose).collect(),
            rows: self.rows.clone(),
        };
        let path = dir.join("state.toml");
        fs::write(&path, toml::to_string(&state)?)
            .map_err(io_err(format!("writing {}", path.display())))
    }

    /// Restores a session from a checkpoint directory. Captures are
    /// re-rendered from the recorded true views.
    pub fn resume(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join("state.toml");
        let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
        let state: SessionState = toml::from_str(&text)?;
        let cfg = state.config;
        cfg.validate()?;
        let scene = cfg.scene()?;
        let intr = cfg.intrinsics()?;
        let gt_points = gt_surface_points(
            &scene,
            cfg.run.coverage_points,
            substream_seed(cfg.run.seed, "scene", 0),
        );
        let field = Field::load(&dir.join("field.bin"))?;
        if field.config() != &cfg.field {
            return Err(RunError::Config("checkpoint field does not match its configuration".into()));
        }
        let mut s = Self {
            cfg,
            scene,
            intr,
            gt_points,
            field,
            views: Vec::new(),
            gt_views: Vec::new(),
            rows: state.rows,
            next_round: state.next_round,
        };
        if state.gt_views.len() != state.estimated_poses.len() {
            return Err(RunError::Config("checkpoint view lists differ in length".into()));
        }
        for (v, p) in state.gt_views.into_iter().zip(state.estimated_poses) {
            s.capture(v, Some(p))?;
        }
        Ok(s)
    }

    pub fn final_mesh(&self, out: &Outputs) -> Result<(), RunError> {
        let mesh = marching_cubes(&self.field, self.cfg.run.mesh_resolution, ISO_LEVEL, true)?;
        export_ply(&mesh, &out.dir.join("final.ply"))?;
        Ok(())
    }
}

/// Output directory and its CSV files.
pub struct Outputs {
    pub dir: PathBuf,
}

fn write_header(w: &mut impl Write, title: &str, cols: &[(&str, &str)]) -> std::io::Result<()> {
    writeln!(w, "# {title}")?;
    for (name, doc) in cols {
        writeln!(w, "# {name}: {doc}")?;
    }
    Ok(())
}

impl Outputs {
    /// Creates the directory and writes the effective configuration.
    pub fn create(dir: &Path, cfg: &RunConfig) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let path = dir.join("effective_config.txt");
        fs::write(&path, cfg.to_toml()).map_err(io_err(format!("writing {}", path.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn checkpoint_dir(&self, round: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("round_{round:03}"))
    }

    fn append_rows<T: Serialize>(
        &self,
        file: &str,
        title: &str,
        cols: &[(&str, &str)],
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), RunError> {
        let path = self.dir.join(file);
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(format!("opening {}", path.display())))?;
        if fresh {
            write_header(&mut f, title, cols).map_err(io_err(format!("writing {}", path.display())))?;
        }
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err(format!("writing {}", path.display())))?;
        Ok(())
    }

    fn append_losses(&self, round: usize, losses: &[LossReport]) -> Result<(), RunError> {
        let rows = losses.iter().enumerate().map(|(i, l)| LossRow {
            round,
            iteration: i,
            color: l.color,
            depth: l.depth,
            free: l.free,
            total: l.total,
            valid_rays: l.class_counts[crate::supervision::RayClass::Valid.index()],
            free_points: l.free_points,
        });
        self.append_rows("losses.csv", "training losses per iteration", &LOSS_COLUMNS, rows)
    }

    fn append_trace(&self, round: usize, r: &NbvResult) -> Result<(), RunError> {
        let rows = r.trace.iter().map(|t| TraceCsvRow {
            round,
            iteration: t.iteration,
            azimuth: t.azimuth,
            elevation: t.elevation,
            information: t.information,
            cost: t.cost,
            utility: t.utility,
            method: r.method,
        });
        self.append_rows("nbv_trace.csv", "planner trace", &TRACE_COLUMNS, rows)
    }

    fn append_timings(&self, round: usize, t: &Timings) -> Result<(), RunError> {
        #[derive(Serialize)]
        struct Row {
            round: usize,
            train: f64,
            evaluate: f64,
            plan: f64,
        }
        let cols = [
            ("round", "round index"),
            ("train", "seconds"),
            ("evaluate", "seconds"),
            ("plan", "seconds, including the capture"),
        ];
        let row = Row {
            round,
            train: t.train,
            evaluate: t.evaluate,
            plan: t.plan,
        };
        self.append_rows("timings.csv", "wall-clock time per phase", &cols, [row])
    }

    fn write_metrics(&self, rows: &[MetricsRow]) -> Result<(), RunError> {
        let path = self.dir.join("metrics.csv");
        let _ = fs::remove_file(&path);
        self.append_rows("metrics.csv", "per-round metrics", &MetricsRow::COLUMNS, rows.iter().copied())
    }

    /// Drops rows of rounds `>= round` from the append-only logs.
    pub fn truncate_logs(&self, round: usize) -> Result<(), RunError> {
        for file in ["losses.csv", "nbv_trace.csv", "timings.csv"] {
            let path = self.dir.join(file);
            if !path.exists() {
                continue;
            }
            let f = fs::File::open(&path).map_err(io_err(format!("reading {}", path.display())))?;
            let mut kept = Vec::new();
            let mut seen_header = false;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_err(format!("reading {}", path.display())))?;
                let keep = if line.starts_with('#') {
                    true
                } else if !seen_header {
                    seen_header = true;
                    true
                } else {
                    line.split(',')
                        .next()
                        .and_then(|r| r.parse::<usize>().ok())
                        .is_some_and(|r| r < round)
                };
                if keep {
                    kept.push(line);
                }
            }
            let mut text = kept.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(io_err(format!("writing {}", path.display())))?;
        }
        Ok(())
    }
}

/// Reads a metrics CSV written by a run.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn with_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("thread pool")
            .install(f)
    } else {
        f()
    }
}

fn drive(mut s: Session, out: Option<&Outputs>) -> Result<Vec<StepReport>, RunError> {
    let mut reports = Vec::new();
    while !s.finished() {
        reports.push(s.step(out)?);
    }
    if let Some(out) = out {
        s.final_mesh(out)?;
    }
    Ok(reports)
}

/// Runs the whole loop, writing artifacts to `out_dir` when given.
pub fn run_active_loop(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<StepReport>, RunError> {
    with_pool(cfg.run.deterministic, || {
        let out = out_dir.map(|d| Outputs::create(d, cfg)).transpose()?;
        drive(Session::new(cfg.clone())?, out.as_ref())
    })
}

/// Continues a run from a checkpoint directory.
pub fn resume_active_loop(checkpoint: &Path, out_dir: Option<&Path>) -> Result<Vec<StepReport>, RunError> {
    let s = Session::resume(checkpoint)?;
    let deterministic = s.cfg.run.deterministic;
    with_pool(deterministic, move || {
        let out = out_dir.map(|d| Outputs::create(d, &s.cfg)).transpose()?;
        if let Some(out) = &out {
            out.truncate_logs(s.next_round)?;
            out.write_metrics(&s.rows)?;
        }
        drive(s, out.as_ref())
    })
}

/// One (method, seed) run's metric rows.
#[derive(Debug, Clone)]
pub struct RunCurve {
    pub label: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

fn label_dir(root: Option<&Path>, label: &str, seed: u64) -> Option<PathBuf> {
    root.map(|r| r.join(label).join(format!("seed_{seed}")))
}

/// Runs every (label, config) pair for each seed. Seeds replace the
/// configured master seed.
pub fn run_variants(
    variants: &[(String, RunConfig)],
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<Vec<RunCurve>, RunError> {
    let mut curves = Vec::new();
    for (label, cfg) in variants {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.run.seed = seed;
            let dir = label_dir(out_root, label, seed);
            let reports = run_active_loop(&cfg, dir.as_deref())?;
            curves.push(RunCurve {
                label: label.clone(),
                seed,
                rows: reports.into_iter().map(|r| r.metrics).collect(),
            });
        }
    }
    Ok(curves)
}

pub fn write_curves(path: &Path, label_column: &str, curves: &[RunCurve]) -> Result<(), RunError> {
    let mut f = fs::File::create(path).map_err(io_err(format!("writing {}", path.display())))?;
    let cols = [
        (label_column, "variant"),
        ("seed", "master seed"),
        ("round", "round index, from 1; equals the number of captured views"),
        ("coverage", "surface coverage"),
        ("entropy_bits", "map entropy, bits"),
        ("floater_fraction", "floater fraction"),
        ("rotation_error", "mean rotation error, radians"),
        ("translation_error", "mean translation error, meters"),
    ];
    write_header(&mut f, "per-round metrics of each run", &cols).map_err(io_err("writing header"))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(cols.iter().map(|c| c.0))?;
    for c in curves {
        // One row per captured view; the untrained round 0 is left out.
        for r in c.rows.iter().filter(|r| r.round > 0) {
            w.write_record([
                c.label.clone(),
                c.seed.to_string(),
                r.round.to_string(),
                r.coverage.to_string(),
                r.entropy_bits.to_string(),
                r.floater_fraction.to_string(),
                r.rotation_error.to_string(),
                r.translation_error.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))?;
    Ok(())
}

/// Runs each planner on every seed and writes `comparison.csv`.
pub fn run_comparison(
    base: &RunConfig,
    methods: &[PlannerMethod],
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<Vec<RunCurve>, RunError> {
    if methods.len() < 2 {
        return Err(RunError::Config("a comparison needs at least two methods".into()));
    }
    let variants: Vec<(String, RunConfig)> = methods
        .iter()
        .map(|&m| {
            let mut c = base.clone();
            c.run.method = m;
            (m.to_string(), c)
        })
        .collect();
    let curves = run_variants(&variants, seeds, out_root)?;
    if let Some(root) = out_root {
        write_curves(&root.join("comparison.csv"), "method", &curves)?;
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    FreeRay,
    PoseRefinement,
    TopntVsSum,
    InitStrategy,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::FreeRay,
        AblationKind::PoseRefinement,
        AblationKind::TopntVsSum,
        AblationKind::InitStrategy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::FreeRay => "free-ray",
            AblationKind::PoseRefinement => "pose-refinement",
            AblationKind::TopntVsSum => "topnt-vs-sum",
            AblationKind::InitStrategy => "init-strategy",
        }
    }

    /// The (with, without) configurations.
    pub fn variants(self, base: &RunConfig) -> [(String, RunConfig); 2] {
        let mut on = base.clone();
        let mut off = base.clone();
        match self {
            AblationKind::FreeRay => {
                on.train.free_supervision = true;
                off.train.free_supervision = false;
            }
            AblationKind::PoseRefinement => {
                on.run.pose_noise = true;
                off.run.pose_noise = true;
                on.train.pose_refinement = true;
                off.train.pose_refinement = false;
            }
            AblationKind::TopntVsSum => {
                on.run.method = PlannerMethod::Optimized;
                off.run.method = PlannerMethod::SumMetric;
            }
            AblationKind::InitStrategy => {
                on.nbv.init = crate::nbv::InitStrategy::Sampling;
                off.nbv.init = crate::nbv::InitStrategy::Current;
            }
        }
        [("with".into(), on), ("without".into(), off)]
    }
}

impl std::str::FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

/// Paired runs with and without one feature; writes `ablation.csv`.
pub fn run_ablation(
    kind: AblationKind,
    base: &RunConfig,
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<Vec<RunCurve>, RunError> {
    let variants = kind.variants(base);
    let curves = run_variants(&variants, seeds, out_root)?;
    if let Some(root) = out_root {
        write_curves(&root.join("ablation.csv"), "variant", &curves)?;
    }
    Ok(curves)
}

/// Loads a field from a checkpoint directory or a `field.bin` path.
pub fn load_field(path: &Path) -> Result<Field, RunError> {
    let file = if path.is_dir() { path.join("field.bin") } else { path.to_path_buf() };
    Ok(Field::load(&file)?)
}

/// Renders the field from `view` and writes `color.ppm` and `depth.bin`.
pub fn render_checkpoint(
    field: &Field,
    view: &SphericalView,
    intr: &CameraIntrinsics,
    samples: usize,
    out_dir: &Path,
) -> Result<ViewCapture, RunError> {
    let pose = view.pose()?;
    let (color, depth) = crate::supervision::render_field_view(field, &pose, intr, samples)?;
    let cap = ViewCapture {
        intrinsics: *intr,
        pose,
        color,
        depth,
    };
    fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    cap.write_ppm(&out_dir.join("color.ppm"))
        .map_err(io_err("writing color.ppm"))?;
    cap.write_depth(&out_dir.join("depth.bin"))
        .map_err(io_err("writing depth.bin"))?;
    Ok(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_independent_and_stable() {
        assert_eq!(substream_seed(1, "rays", 0), substream_seed(1, "rays", 0));
        assert_ne!(substream_seed(1, "rays", 0), substream_seed(1, "rays", 1));
        assert_ne!(substream_seed(1, "rays", 0), substream_seed(1, "plan", 0));
        assert_ne!(substream_seed(1, "rays", 0), substream_seed(2, "rays", 0));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::smoke();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        let partial = RunConfig::from_toml("[run]\nscene = \"sphere\"\nmax_views = 4\n").unwrap();
        assert_eq!(partial.run.max_views, 4);
        assert_eq!(partial.train, TrainConfig::default());
        assert!(RunConfig::from_toml("[run]\nbogus = 1\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.run.max_views = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.run.initial_elevation_deg = 85.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.run.scene = "no-such-scene".into();
        assert!(Session::new(cfg).is_err());
    }

    #[test]
    fn pose_noise_rotates_about_camera_center() {
        let pose = SphericalView {
            azimuth: 0.3,
            elevation: 0.2,
            radius: 1.0,
            center: Vec3::ZERO,
        }
        .pose()
        .unwrap();
        let noisy = perturb_pose(&pose, [0.03, 0.0, 0.04], [0.0; 3]);
        assert!((noisy.rotation_angle_to(&pose) - 0.05).abs() < 1e-12);
        assert_eq!(noisy.translation, pose.translation);
        assert!(noisy.orthonormality_error() < 1e-12);
    }
}
