//! Synthetic advection data, node subsampling, normalization and dataset files.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dynamics::MeshArtifacts;
use crate::error::{FenError, Result};
use crate::mesh::{delaunay_triangulate, filter_sliver_cells, Mesh, Point, PointCloud, DEFAULT_SLIVER_THRESHOLD};
use crate::odeint::{dopri5_solve, SolverConfig};

const MAGIC: &[u8; 8] = b"FENDATA1";
/// Gaussians are cut off at this many standard deviations.
pub const TRUNCATION: f64 = 4.0;
/// Coarsest dense grid accepted by [`generate_dense`].
pub const MIN_DENSE_RESOLUTION: usize = 31;
/// Tolerance of the reference integrator.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

/// `-M^-1 sum_cells sum_j Y[j,k] (v_k . <grad phi_j, phi_i>)`, the lumped
/// Galerkin discretization of `du/dt = -v . grad u`.
///
/// `velocities[c * m + k]` is the velocity of feature `k` in cell `c`.
pub fn oracle_fem_rhs(y: &Tensor, artifacts: &MeshArtifacts, velocities: &[Point]) -> Result<Tensor> {
    let (n, m) = (y.rows(), y.cols());
    if n != artifacts.n_nodes() || velocities.len() != artifacts.n_cells() * m {
        return Err(FenError::ShapeMismatch(format!(
            "state {n}x{m} and {} velocities for a mesh with {} nodes and {} cells",
            velocities.len(),
            artifacts.n_nodes(),
            artifacts.n_cells()
        )));
    }
    let mut out = Tensor::zeros(n, m);
    for (c, g) in artifacts.geometry.iter().enumerate() {
        for k in 0..m {
            let v = velocities[c * m + k];
            for i in 0..3 {
                let mut acc = 0.0;
                for j in 0..3 {
                    let cji = g.conv[j][i];
                    acc += y.get(g.vertices[j], k) * (v[0] * cji[0] + v[1] * cji[1]);
                }
                out.data_mut()[g.vertices[i] * m + k] -= acc;
            }
        }
    }
    for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
        let inv = 1.0 / artifacts.lumped.diag[i];
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

fn truncated_gaussian(p: Point, center: Point, sigma: f64) -> f64 {
    let r2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
    if r2 >= (TRUNCATION * sigma).powi(2) {
        0.0
    } else {
        (-r2 / (2.0 * sigma * sigma)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VelocityField {
    Constant { v: Point },
    /// Rigid rotation about the domain center with angular speed `omega`.
    Rotation { omega: f64 },
}

pub const DOMAIN_CENTER: Point = [0.5, 0.5];

impl VelocityField {
    pub fn at(&self, p: Point) -> Point {
        match *self {
            VelocityField::Constant { v } => v,
            VelocityField::Rotation { omega } => {
                [-omega * (p[1] - DOMAIN_CENTER[1]), omega * (p[0] - DOMAIN_CENTER[0])]
            }
        }
    }

    /// The field at every cell center, repeated for `m` features.
    pub fn cell_velocities(&self, artifacts: &MeshArtifacts, m: usize) -> Vec<Point> {
        artifacts.geometry.iter().flat_map(|g| std::iter::repeat(self.at(g.center)).take(m)).collect()
    }
}

/// A fixed inflow `rate * exp(-|x - c|^2 / 2 sigma^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSource {
    pub center: Point,
    pub sigma: f64,
    pub rate: f64,
}

impl GaussianSource {
    pub fn at(&self, p: Point) -> f64 {
        self.rate * truncated_gaussian(p, self.center, self.sigma)
    }
}

/// Random initial conditions: `count` bumps with widths and amplitudes drawn
/// uniformly from the given ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub count: usize,
    pub sigma: [f64; 2],
    pub amplitude: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Dense grid points per side of the unit square.
    pub n_dense: usize,
    /// Nodes kept by subsampling.
    pub n_nodes: usize,
    pub velocity: VelocityField,
    pub bumps: BumpSpec,
    #[serde(default)]
    pub source: Option<GaussianSource>,
    pub dt: f64,
    pub n_steps: usize,
    pub split: SplitSpec,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn n_sequences(&self) -> usize {
        self.split.train + self.split.val + self.split.test
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FenError::InvalidSpec(msg));
        if self.n_dense < MIN_DENSE_RESOLUTION {
            return fail(format!("n_dense must be at least {MIN_DENSE_RESOLUTION}, got {}", self.n_dense));
        }
        if self.n_nodes > self.n_dense * self.n_dense {
            return Err(FenError::KTooLarge { k: self.n_nodes, n: self.n_dense * self.n_dense });
        }
        if self.n_nodes < 3 {
            return fail(format!("n_nodes must be at least 3, got {}", self.n_nodes));
        }
        if !(self.dt > 0.0) || self.n_steps == 0 || self.n_sequences() == 0 {
            return fail("dt, n_steps and the number of sequences must be positive".into());
        }
        let [lo, hi] = self.bumps.sigma;
        if self.bumps.count == 0 || !(lo > 0.0) || hi < lo || self.bumps.amplitude[1] < self.bumps.amplitude[0] {
            return fail(format!("invalid bump spec {:?}", self.bumps));
        }
        if let Some(s) = &self.source {
            if !(s.sigma > 0.0) {
                return fail(format!("source sigma must be positive, got {}", s.sigma));
            }
        }
        let values = match self.velocity {
            VelocityField::Constant { v } => v.to_vec(),
            VelocityField::Rotation { omega } => vec![omega],
        };
        if values.iter().any(|v| !v.is_finite()) {
            return fail("velocity must be finite".into());
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Whether states follow from translating the initial condition.
    pub fn is_analytic(&self) -> bool {
        matches!(self.velocity, VelocityField::Constant { .. }) && self.source.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Point,
    pub sigma: f64,
    pub amplitude: f64,
}

fn sample_bumps(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Bump>> {
    let horizon = spec.horizon();
    (0..spec.bumps.count)
        .map(|_| {
            let [slo, shi] = spec.bumps.sigma;
            let sigma = if shi > slo { rng.gen_range(slo..=shi) } else { slo };
            let [alo, ahi] = spec.bumps.amplitude;
            let amplitude = if ahi > alo { rng.gen_range(alo..=ahi) } else { alo };
            let margin = TRUNCATION * sigma;
            // the support stays inside the unit square over the whole horizon
            let center = match spec.velocity {
                VelocityField::Constant { v } => {
                    let mut c = [0.0; 2];
                    for d in 0..2 {
                        let lo = margin - (v[d] * horizon).min(0.0);
                        let hi = 1.0 - margin - (v[d] * horizon).max(0.0);
                        if lo > hi {
                            return Err(FenError::InvalidSpec(format!(
                                "bumps of width {sigma} leave the domain within the horizon"
                            )));
                        }
                        c[d] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                    }
                    c
                }
                VelocityField::Rotation { .. } => {
                    let radius = 0.5 - margin;
                    if radius < 0.0 {
                        return Err(FenError::InvalidSpec(format!("bumps of width {sigma} do not fit the domain")));
                    }
                    let r = radius * rng.gen::<f64>().sqrt();
                    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                    [DOMAIN_CENTER[0] + r * phi.cos(), DOMAIN_CENTER[1] + r * phi.sin()]
                }
            };
            Ok(Bump { center, sigma, amplitude })
        })
        .collect()
}

fn bump_field(bumps: &[Bump], p: Point) -> f64 {
    bumps.iter().map(|b| b.amplitude * truncated_gaussian(p, b.center, b.sigma)).sum()
}

/// Time stamps and `N x m` states of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Sequence {
    pub fn new(times: Vec<f64>, states: Vec<Tensor>) -> Result<Self> {
        if times.len() != states.len() || times.is_empty() {
            return Err(FenError::ShapeMismatch(format!("{} times for {} states", times.len(), states.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FenError::InvalidSpec("sequence times must be strictly increasing".into()));
        }
        let shape = states[0].shape();
        if states.iter().any(|s| s.shape() != shape) {
            return Err(FenError::ShapeMismatch("sequence states differ in shape".into()));
        }
        Ok(Self { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Rows `nodes` of every state.
    pub fn restrict(&self, nodes: &[usize]) -> Sequence {
        let m = self.states[0].cols();
        let states = self
            .states
            .iter()
            .map(|s| {
                let data = nodes.iter().flat_map(|&i| s.row(i).iter().copied()).collect();
                Tensor::new(nodes.len(), m, data).expect("restricted shape")
            })
            .collect();
        Sequence { times: self.times.clone(), states }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let [n, m] = self.states[0].shape();
        out.write_all(MAGIC)?;
        for v in [n, m, self.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for (t, s) in self.times.iter().zip(&self.states) {
            out.write_all(&t.to_le_bytes())?;
            for v in s.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FenError::Format("not a sequence file".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = usize::try_from(u64::from_le_bytes(word)).map_err(|_| FenError::Format("header overflow".into()))?;
        }
        let [n, m, t] = header;
        if n == 0 || m == 0 || t == 0 {
            return Err(FenError::Format(format!("empty sequence header {header:?}")));
        }
        let mut buf = vec![0u8; 8 * (1 + n * m)];
        let (mut times, mut states) = (Vec::with_capacity(t), Vec::with_capacity(t));
        for _ in 0..t {
            input.read_exact(&mut buf)?;
            let mut vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            times.push(vals.next().expect("time stamp"));
            states.push(Tensor::new(n, m, vals.collect())?);
        }
        if input.read(&mut [0u8; 1])? != 0 {
            return Err(FenError::Format("trailing bytes after sequence".into()));
        }
        Sequence::new(times, states)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Sequence::read_from(std::fs::read(path)?.as_slice())
    }
}

fn grid_mesh(n: usize) -> Result<Mesh> {
    let h = 1.0 / (n - 1) as f64;
    let points = (0..n).flat_map(|j| (0..n).map(move |i| [i as f64 * h, j as f64 * h])).collect();
    let id = |i: usize, j: usize| j * n + i;
    let mut cells = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            cells.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            cells.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    Mesh::new(PointCloud::new(points)?, cells)
}

/// Sequences on the dense grid before subsampling.
#[derive(Clone, Debug)]
pub struct DenseData {
    pub spec: SyntheticSpec,
    pub mesh: Mesh,
    pub bumps: Vec<Vec<Bump>>,
    pub sequences: Vec<Sequence>,
}

/// Runs the generator on the dense grid.
pub fn generate_dense(spec: &SyntheticSpec) -> Result<DenseData> {
    spec.validate()?;
    let mesh = grid_mesh(spec.n_dense)?;
    let times: Vec<f64> = (0..=spec.n_steps).map(|k| k as f64 * spec.dt).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let artifacts = if spec.is_analytic() { None } else { Some(MeshArtifacts::new(mesh.clone())?) };
    let n = mesh.n_nodes();
    let coords = mesh.points().coords();
    let mut all_bumps = Vec::with_capacity(spec.n_sequences());
    let mut sequences = Vec::with_capacity(spec.n_sequences());
    for _ in 0..spec.n_sequences() {
        let bumps = sample_bumps(spec, &mut rng)?;
        let states = match (&artifacts, spec.velocity.clone()) {
            (None, VelocityField::Constant { v }) => times
                .iter()
                .map(|&t| {
                    let data = coords.iter().map(|p| bump_field(&bumps, [p[0] - v[0] * t, p[1] - v[1] * t])).collect();
                    Tensor::new(n, 1, data)
                })
                .collect::<Result<Vec<_>>>()?,
            (Some(art), velocity) => {
                let cell_v = velocity.cell_velocities(art, 1);
                let source: Option<Vec<f64>> = spec.source.as_ref().map(|s| coords.iter().map(|&p| s.at(p)).collect());
                let y0 = Tensor::new(n, 1, coords.iter().map(|&p| bump_field(&bumps, p)).collect())?;
                let rhs = |_: f64, y: &Tensor| {
                    let mut d = oracle_fem_rhs(y, art, &cell_v)?;
                    if let Some(s) = &source {
                        d.data_mut().iter_mut().zip(s).for_each(|(a, b)| *a += b);
                    }
                    Ok(d)
                };
                let config = SolverConfig { max_nfe: 1_000_000, ..SolverConfig::with_tolerance(ORACLE_TOLERANCE) };
                dopri5_solve(rhs, &y0, &times, &config)?.states
            }
            (None, VelocityField::Rotation { .. }) => unreachable!("rotation is never analytic"),
        };
        sequences.push(Sequence::new(times.clone(), states)?);
        all_bumps.push(bumps);
    }
    Ok(DenseData { spec: spec.clone(), mesh, bumps: all_bumps, sequences })
}

impl DenseData {
    /// Keeps `k` nodes chosen by k-medoids and meshes them.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<Dataset> {
        let nodes = kmedoids_subsample(self.mesh.points(), k, seed)?;
        let points = PointCloud::new(nodes.iter().map(|&i| self.mesh.points().get(i)).collect())?;
        let mesh = filter_sliver_cells(&delaunay_triangulate(&points)?, DEFAULT_SLIVER_THRESHOLD)?;
        let s = self.spec.split;
        Ok(Dataset {
            mesh,
            m: 1,
            sequences: self.sequences.iter().map(|q| q.restrict(&nodes)).collect(),
            normalization: None,
            split: Split {
                train: (0..s.train).collect(),
                val: (s.train..s.train + s.val).collect(),
                test: (s.train + s.val..s.train + s.val + s.test).collect(),
            },
            seed,
            spec: Some(self.spec.clone()),
            subsampling: Some(KMEDOIDS_VARIANT.to_string()),
            metadata: serde_json::Value::Null,
        })
    }
}

/// Dense generation followed by subsampling to `spec.n_nodes` nodes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_dense(spec)?.subsample(spec.n_nodes, spec.seed)
}

pub const KMEDOIDS_VARIANT: &str = "alternating k-medoids";

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Indices of `k` medoids, sorted ascending.
pub fn kmedoids_subsample(points: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(FenError::KTooLarge { k, n });
    }
    if k == 0 {
        return Err(FenError::InvalidSpec("k must be positive".into()));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let pts = points.coords();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // farthest-first traversal from a random start
    let mut medoids = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = pts.iter().map(|&p| dist(p, pts[medoids[0]])).collect();
    while medoids.len() < k {
        let next = (0..n).fold(0, |best, i| if nearest[i] > nearest[best] { i } else { best });
        medoids.push(next);
        for (d, &p) in nearest.iter_mut().zip(pts) {
            *d = d.min(dist(p, pts[next]));
        }
    }
    medoids.sort_unstable();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, &med) in medoids.iter().enumerate() {
                let d = dist(*p, pts[med]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assignment[i] != best.1 {
                assignment[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut clusters = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            clusters[c].push(i);
        }
        for (c, members) in clusters.iter().enumerate() {
            let cost = |cand: usize| members.iter().map(|&j| dist(pts[cand], pts[j])).sum::<f64>();
            let mut best = (cost(medoids[c]), medoids[c]);
            for &cand in members {
                let v = cost(cand);
                if v < best.0 || (v == best.0 && cand < best.1) {
                    best = (v, cand);
                }
            }
            medoids[c] = best.1;
        }
    }
    medoids.sort_unstable();
    Ok(medoids)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = FenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(FenError::InvalidSpec(format!("unknown split {other:?}"))),
        }
    }
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Per-feature shift and scale plus an isotropic coordinate transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub coord_mean: Point,
    pub coord_std: f64,
}

impl NormStats {
    pub fn point(&self, p: Point) -> Point {
        [(p[0] - self.coord_mean[0]) / self.coord_std, (p[1] - self.coord_mean[1]) / self.coord_std]
    }

    pub fn unpoint(&self, p: Point) -> Point {
        [p[0] * self.coord_std + self.coord_mean[0], p[1] * self.coord_std + self.coord_mean[1]]
    }

    fn map_states(&self, seq: &Sequence, f: impl Fn(f64, f64, f64) -> f64) -> Sequence {
        let states = seq
            .states
            .iter()
            .map(|s| {
                let mut out = s.clone();
                let m = s.cols();
                for (idx, v) in out.data_mut().iter_mut().enumerate() {
                    let k = idx % m;
                    *v = f(*v, self.feature_mean[k], self.feature_std[k]);
                }
                out
            })
            .collect();
        Sequence { times: seq.times.clone(), states }
    }
}

/// Node features and coordinates mapped back to physical units.
pub fn denormalize(seq: &Sequence, stats: &NormStats) -> Sequence {
    stats.map_states(seq, |v, mean, std| v * std + mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mesh: Mesh,
    pub m: usize,
    pub sequences: Vec<Sequence>,
    pub normalization: Option<NormStats>,
    pub split: Split,
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub subsampling: Option<String>,
    pub metadata: serde_json::Value,
}

/// Shifts and scales by training-split statistics.
pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    let stats = dataset.train_stats()?;
    dataset.normalized_with(&stats)
}

impl Dataset {
    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn split_sequences(&self, name: SplitName) -> impl Iterator<Item = &Sequence> {
        self.split.get(name).iter().map(|&i| &self.sequences[i])
    }

    /// Feature statistics over the training split; coordinate statistics
    /// over the nodes.
    pub fn train_stats(&self) -> Result<NormStats> {
        if self.split.train.is_empty() {
            return Err(FenError::InvalidSpec("empty training split".into()));
        }
        let m = self.m;
        let mut sum = vec![0.0; m];
        let mut count = 0usize;
        for seq in self.split_sequences(SplitName::Train) {
            for s in &seq.states {
                for row in s.data().chunks(m) {
                    row.iter().zip(sum.iter_mut()).for_each(|(v, acc)| *acc += v);
                }
                count += s.rows();
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; m];
        for seq in self.split_sequences(SplitName::Train) {
            for s in &seq.states {
                for row in s.data().chunks(m) {
                    for k in 0..m {
                        var[k] += (row[k] - mean[k]).powi(2);
                    }
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(FenError::ZeroVariance(k));
        }
        let coords = self.mesh.points().coords();
        let n = coords.len() as f64;
        let coord_mean = [0, 1].map(|d| coords.iter().map(|p| p[d]).sum::<f64>() / n);
        let coord_var = coords
            .iter()
            .map(|p| (p[0] - coord_mean[0]).powi(2) + (p[1] - coord_mean[1]).powi(2))
            .sum::<f64>()
            / (2.0 * n);
        Ok(NormStats { feature_mean: mean, feature_std: std, coord_mean, coord_std: coord_var.sqrt() })
    }

    /// Applies `stats`, which may come from another dataset.
    pub fn normalized_with(&self, stats: &NormStats) -> Result<Dataset> {
        if self.normalization.is_some() {
            return Err(FenError::InvalidSpec("dataset is already normalized".into()));
        }
        if stats.feature_mean.len() != self.m || stats.feature_std.len() != self.m {
            return Err(FenError::ShapeMismatch("statistics and feature count differ".into()));
        }
        let points = PointCloud::new(self.mesh.points().coords().iter().map(|&p| stats.point(p)).collect())?;
        Ok(Dataset {
            mesh: self.mesh.with_points(points)?,
            sequences: self.sequences.iter().map(|s| stats.map_states(s, |v, mean, std| (v - mean) / std)).collect(),
            normalization: Some(stats.clone()),
            ..self.clone()
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.mesh.save(&dir.join("mesh.json"))?;
        let mut entries = Vec::with_capacity(self.sequences.len());
        for (i, seq) in self.sequences.iter().enumerate() {
            let file = format!("seq_{i:04}.bin");
            seq.save(&dir.join(&file))?;
            entries.push(SequenceEntry { file, n_frames: seq.len() });
        }
        let manifest = DatasetManifest {
            format: "femnet-dataset-1".into(),
            mesh_file: "mesh.json".into(),
            n_nodes: self.n_nodes(),
            m: self.m,
            sequences: entries,
            normalization: self.normalization.clone(),
            split: self.split.clone(),
            seed: self.seed,
            spec: self.spec.clone(),
            subsampling: self.subsampling.clone(),
            metadata: self.metadata.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mesh = Mesh::load(&dir.join(&manifest.mesh_file))?;
        if mesh.n_nodes() != manifest.n_nodes {
            return Err(FenError::Format("manifest node count does not match the mesh".into()));
        }
        let sequences = manifest
            .sequences
            .iter()
            .map(|e| {
                let seq = Sequence::load(&dir.join(&e.file))?;
                if seq.len() != e.n_frames || seq.states[0].shape() != [manifest.n_nodes, manifest.m] {
                    return Err(FenError::Format(format!("{} does not match the manifest", e.file)));
                }
                Ok(seq)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_seq = sequences.len();
        let split = manifest.split;
        if [&split.train, &split.val, &split.test].iter().any(|s| s.iter().any(|&i| i >= n_seq)) {
            return Err(FenError::Format("split refers to a missing sequence".into()));
        }
        Ok(Dataset {
            mesh,
            m: manifest.m,
            sequences,
            normalization: manifest.normalization,
            split,
            seed: manifest.seed,
            spec: manifest.spec,
            subsampling: manifest.subsampling,
            metadata: manifest.metadata,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub file: String,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub mesh_file: String,
    pub n_nodes: usize,
    pub m: usize,
    pub sequences: Vec<SequenceEntry>,
    pub normalization: Option<NormStats>,
    pub split: Split,
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub subsampling: Option<String>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FenModel, ModelConfig, Variant};
    use crate::fem::quadrature_integrate;
    use crate::mesh::PointCloud;

    fn random_artifacts(n: usize, seed: u64) -> MeshArtifacts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        MeshArtifacts::new(delaunay_triangulate(&PointCloud::new(pts).unwrap()).unwrap()).unwrap()
    }

    fn random_state(n: usize, m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    pub(crate) fn advection_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_dense: MIN_DENSE_RESOLUTION,
            n_nodes: 60,
            velocity: VelocityField::Constant { v: [0.3, 0.1] },
            bumps: BumpSpec { count: 1, sigma: [0.06, 0.08], amplitude: [0.5, 1.0] },
            source: None,
            dt: 0.05,
            n_steps: 8,
            split: SplitSpec { train: 2, val: 1, test: 1 },
            seed: 7,
        }
    }

    #[test]
    fn oracle_of_constant_field_is_zero() {
        let art = random_artifacts(40, 0);
        let y = Tensor::new(40, 2, vec![1.3; 80]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<Point> = (0..art.n_cells() * 2).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let d = oracle_fem_rhs(&y, &art, &v).unwrap();
        assert!(d.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn oracle_matches_transport_messages() {
        let art = random_artifacts(50, 2);
        let m = 2;
        let mut cfg = ModelConfig::new(Variant::Tfen, m);
        cfg.hidden_width = 8;
        let model = FenModel::new(cfg, 0).unwrap();
        let y = random_state(50, m, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<Point> = (0..art.n_cells() * m).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let mut vel = Tensor::zeros(art.n_cells(), 2 * m);
        for c in 0..art.n_cells() {
            for k in 0..m {
                vel.data_mut()[c * 2 * m + k] = v[c * m + k][0];
                vel.data_mut()[c * 2 * m + m + k] = v[c * m + k][1];
            }
        }
        let mut g = crate::autodiff::Graph::new();
        let bound = model.bind(&mut g, &art, false).unwrap();
        let yv = g.constant(y.clone()).unwrap();
        let vv = g.constant(vel).unwrap();
        let msg = bound.transport_messages_with(&mut g, 0.0, yv, vv).unwrap();
        let oracle = oracle_fem_rhs(&y, &art, &v).unwrap();
        for (i, row) in g.value(msg).data().chunks(m).enumerate() {
            for k in 0..m {
                let a = row[k] / art.lumped.diag[i];
                assert!((a - oracle.get(i, k)).abs() < 1e-12, "{a} vs {}", oracle.get(i, k));
            }
        }
    }

    #[test]
    fn oracle_matches_quadrature_on_linear_field() {
        let pts = vec![[0.2, 0.1], [1.1, 0.3], [0.5, 0.8]];
        let art = MeshArtifacts::new(delaunay_triangulate(&PointCloud::new(pts.clone()).unwrap()).unwrap()).unwrap();
        let (a, v) = ([1.5, -0.4], [0.7, 0.2]);
        let y = Tensor::new(3, 1, pts.iter().map(|p| a[0] * p[0] + a[1] * p[1]).collect()).unwrap();
        let d = oracle_fem_rhs(&y, &art, &[v]).unwrap();
        let cell = art.mesh.cell_points(0);
        for i in 0..3 {
            let node = art.mesh.cells()[0][i];
            let bary = |p: Point| crate::fem::tests::barycentric(p, cell)[i];
            let integral = quadrature_integrate(|p| -(v[0] * a[0] + v[1] * a[1]) * bary(p), cell, 7).unwrap();
            assert!((d.get(node, 0) - integral / art.lumped.diag[node]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_velocity_gives_constant_sequences() {
        let spec = SyntheticSpec { velocity: VelocityField::Constant { v: [0.0, 0.0] }, ..advection_spec() };
        let data = generate_synthetic(&spec).unwrap();
        for seq in &data.sequences {
            assert!(seq.states.iter().all(|s| *s == seq.states[0]));
        }
    }

    #[test]
    fn argmax_follows_translation() {
        let spec = SyntheticSpec { n_dense: 41, ..advection_spec() };
        let dense = generate_dense(&spec).unwrap();
        let coords = dense.mesh.points().coords();
        let v = [0.3, 0.1];
        for (seq, bumps) in dense.sequences.iter().zip(&dense.bumps) {
            for (t, s) in seq.times.iter().zip(&seq.states) {
                let target = [bumps[0].center[0] + v[0] * t, bumps[0].center[1] + v[1] * t];
                let argmax = (0..s.rows()).max_by(|&a, &b| s.get(a, 0).total_cmp(&s.get(b, 0))).unwrap();
                let nearest = (0..coords.len()).min_by(|&a, &b| dist(coords[a], target).total_cmp(&dist(coords[b], target))).unwrap();
                assert_eq!(argmax, nearest);
            }
        }
    }

    #[test]
    fn rotation_conserves_lumped_mass() {
        let spec = SyntheticSpec {
            velocity: VelocityField::Rotation { omega: 1.0 },
            split: SplitSpec { train: 1, val: 0, test: 0 },
            n_steps: 10,
            dt: 0.1,
            ..advection_spec()
        };
        let dense = generate_dense(&spec).unwrap();
        let art = MeshArtifacts::new(dense.mesh.clone()).unwrap();
        let total = |s: &Tensor| s.data().iter().zip(&art.lumped.diag).map(|(y, a)| y * a).sum::<f64>();
        let seq = &dense.sequences[0];
        let m0 = total(&seq.states[0]);
        for s in &seq.states {
            assert!((total(s) - m0).abs() < 0.01 * m0.abs());
        }
    }

    #[test]
    fn oracle_converges_to_analytic_translation() {
        let mut errors = Vec::new();
        for n_dense in [MIN_DENSE_RESOLUTION, 41, 61] {
            let analytic = SyntheticSpec {
                n_dense,
                bumps: BumpSpec { count: 1, sigma: [0.1, 0.1], amplitude: [1.0, 1.0] },
                velocity: VelocityField::Constant { v: [0.2, 0.1] },
                split: SplitSpec { train: 1, val: 0, test: 0 },
                n_steps: 4,
                dt: 0.1,
                ..advection_spec()
            };
            let exact = generate_dense(&analytic).unwrap();
            // a vanishing source forces the integrator path
            let integrated = SyntheticSpec {
                source: Some(GaussianSource { center: [0.5, 0.5], sigma: 0.1, rate: 0.0 }),
                ..analytic
            };
            let fem = generate_dense(&integrated).unwrap();
            assert_eq!(exact.bumps, fem.bumps);
            let err = exact.sequences[0]
                .states
                .iter()
                .zip(&fem.sequences[0].states)
                .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            errors.push(err);
        }
        assert!(errors[0] < 5e-2, "{errors:?}");
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            generate_synthetic(&SyntheticSpec { n_nodes: 1000, ..advection_spec() }),
            Err(FenError::KTooLarge { k: 1000, n: 961 })
        ));
        assert!(generate_synthetic(&SyntheticSpec { dt: 0.0, ..advection_spec() }).is_err());
        let wide = BumpSpec { count: 1, sigma: [0.2, 0.2], amplitude: [1.0, 1.0] };
        assert!(generate_synthetic(&SyntheticSpec { bumps: wide, ..advection_spec() }).is_err());
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen()]).collect()).unwrap()
    }

    #[test]
    fn kmedoids_trivial_cases() {
        let pts = cloud(0, 30);
        assert_eq!(kmedoids_subsample(&pts, 30, 1).unwrap(), (0..30).collect::<Vec<_>>());
        assert!(matches!(kmedoids_subsample(&pts, 31, 1), Err(FenError::KTooLarge { k: 31, n: 30 })));
        let one = kmedoids_subsample(&pts, 1, 3).unwrap();
        let cost = |c: usize| pts.coords().iter().map(|&p| dist(p, pts.get(c))).sum::<f64>();
        let best = (0..30).min_by(|&a, &b| cost(a).total_cmp(&cost(b))).unwrap();
        assert_eq!(one, vec![best]);
    }

    #[test]
    fn kmedoids_finds_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let pts: Vec<Point> = centers
            .iter()
            .flat_map(|c| (0..25).map(|_| [c[0] + rng.gen_range(-1.0..1.0), c[1] + rng.gen_range(-1.0..1.0)]).collect::<Vec<_>>())
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        for seed in 0..5 {
            let meds = kmedoids_subsample(&cloud, 4, seed).unwrap();
            let mut clusters: Vec<usize> = meds.iter().map(|i| i / 25).collect();
            clusters.sort_unstable();
            assert_eq!(clusters, vec![0, 1, 2, 3], "seed {seed}");
        }
    }

    #[test]
    fn kmedoids_is_deterministic() {
        let pts = cloud(9, 200);
        assert_eq!(kmedoids_subsample(&pts, 20, 4).unwrap(), kmedoids_subsample(&pts, 20, 4).unwrap());
    }

    #[test]
    fn normalization_roundtrip_uses_train_stats() {
        let data = generate_synthetic(&advection_spec()).unwrap();
        let norm = normalize(&data).unwrap();
        let stats = norm.normalization.clone().unwrap();
        for (a, b) in data.sequences.iter().zip(&norm.sequences) {
            let back = denormalize(b, &stats);
            for (x, y) in a.states.iter().zip(&back.states) {
                for (u, v) in x.data().iter().zip(y.data()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        for (p, q) in data.mesh.points().coords().iter().zip(norm.mesh.points().coords()) {
            let back = stats.unpoint(*q);
            assert!((p[0] - back[0]).abs() < 1e-12 && (p[1] - back[1]).abs() < 1e-12);
        }
        let train = norm.train_stats().unwrap();
        assert!(train.feature_mean[0].abs() < 1e-12 && (train.feature_std[0] - 1.0).abs() < 1e-12);
        assert!((train.coord_std - 1.0).abs() < 1e-12);
        let test_only = Dataset { split: Split { train: norm.split.test.clone(), ..Split::default() }, ..norm.clone() };
        let t = test_only.train_stats().unwrap();
        assert!(t.feature_mean[0].abs() > 1e-6 || (t.feature_std[0] - 1.0).abs() > 1e-6);
        assert!(normalize(&norm).is_err());
    }

    #[test]
    fn standardized_data_has_unit_stats() {
        let mut data = generate_synthetic(&advection_spec()).unwrap();
        let stats = data.train_stats().unwrap();
        data.sequences = data
            .sequences
            .iter()
            .map(|s| stats.map_states(s, |v, mean, std| (v - mean) / std))
            .collect();
        let again = data.train_stats().unwrap();
        assert!(again.feature_mean[0].abs() < 1e-12 && (again.feature_std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_have_zero_variance() {
        let spec = SyntheticSpec { velocity: VelocityField::Constant { v: [0.0, 0.0] }, ..advection_spec() };
        let mut data = generate_synthetic(&spec).unwrap();
        for s in &mut data.sequences {
            for st in &mut s.states {
                st.data_mut().iter_mut().for_each(|v| *v = 2.0);
            }
        }
        assert!(matches!(data.train_stats(), Err(FenError::ZeroVariance(0))));
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = normalize(&generate_synthetic(&advection_spec()).unwrap()).unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    }

    #[test]
    fn sequence_rejects_corrupt_files() {
        let seq = Sequence::new(vec![0.0, 1.0], vec![Tensor::zeros(2, 1), Tensor::zeros(2, 1)]).unwrap();
        let mut buf = Vec::new();
        seq.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 2 * 3 * 8);
        assert_eq!(Sequence::read_from(buf.as_slice()).unwrap(), seq);
        assert!(Sequence::read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Sequence::read_from(extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(Sequence::read_from(buf.as_slice()).is_err());
    }
}
