//! The learned time derivative of a finite element network.
//!
//! Every cell of the mesh is a hyperedge. One evaluation runs a single
//! message-passing step:
//!
//! 1. per cell, the MLP input is `[time] ++ [cell center] ++` the local
//!    coordinate and feature vector of each vertex in angle-sorted order;
//! 2. the free-form MLP predicts one coefficient per vertex and feature,
//!    which is weighted by `<1, phi_i>` of that vertex;
//! 3. the optional transport MLP predicts one velocity per cell and feature,
//!    shared by all vertices, giving `-sum_j y_j (v . <grad phi_j, phi_i>)`;
//! 4. messages are summed per node and divided by the lumped mass.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{FenError, Result};
use crate::fem::{lumped_mass, LumpedMass};
use crate::mesh::{compute_geometry, CellGeometry, Mesh};
use crate::nn::{self, mlp_forward, MlpParams, MlpVars};

/// Spatial dimension.
pub const DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Free-form term only.
    Fen,
    /// Free-form plus transport term.
    Tfen,
}

impl Variant {
    /// Hidden width used when none is configured.
    pub fn default_hidden_width(self) -> usize {
        match self {
            Variant::Fen => 128,
            Variant::Tfen => 96,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = FenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fen" => Ok(Variant::Fen),
            "tfen" => Ok(Variant::Tfen),
            other => Err(FenError::InvalidSpec(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Features per node.
    pub m: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub autonomous: bool,
    pub stationary: bool,
    /// Period of the cyclic time embedding; raw time when absent.
    pub time_period: Option<f64>,
}

impl ModelConfig {
    pub fn new(variant: Variant, m: usize) -> Self {
        Self {
            variant,
            m,
            hidden_width: variant.default_hidden_width(),
            hidden_layers: 4,
            autonomous: true,
            stationary: true,
            time_period: None,
        }
    }

    pub fn time_features(&self) -> usize {
        match (self.autonomous, self.time_period) {
            (true, _) => 0,
            (false, Some(_)) => 2,
            (false, None) => 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.time_features()
            + if self.stationary { 0 } else { DIM }
            + (DIM + 1) * (self.m + DIM)
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.hidden_width == 0 {
            return Err(FenError::InvalidSpec("m and hidden_width must be positive".into()));
        }
        if let Some(p) = self.time_period {
            if !(p > 0.0) {
                return Err(FenError::InvalidSpec(format!("time period must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

/// `(t)` without a period, `(sin 2 pi t / P, cos 2 pi t / P)` with period `P`.
pub fn time_embed(t: f64, period: Option<f64>) -> Vec<f64> {
    match period {
        None => vec![t],
        Some(p) => {
            let phase = 2.0 * std::f64::consts::PI * t / p;
            vec![phase.sin(), phase.cos()]
        }
    }
}

/// Parameters and structural flags of a FEN or T-FEN.
#[derive(Clone, Debug, PartialEq)]
pub struct FenModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub freeform: MlpParams,
    pub transport: Option<MlpParams>,
}

impl FenModel {
    /// A freshly initialized model whose output layers are all zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = config.input_dim();
        let freeform = MlpParams::new(in_dim, config.hidden_width, config.hidden_layers, (DIM + 1) * config.m, &mut rng);
        let transport = match config.variant {
            Variant::Fen => None,
            Variant::Tfen => Some(MlpParams::new(in_dim, config.hidden_width, config.hidden_layers, config.m * DIM, &mut rng)),
        };
        Ok(Self { config, seed, freeform, transport })
    }

    pub fn n_params(&self) -> usize {
        self.freeform.n_params() + self.transport.as_ref().map_or(0, |t| t.n_params())
    }

    /// All parameter tensors, free-form first.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.freeform.tensors().chain(self.transport.iter().flat_map(|t| t.tensors()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.freeform.tensors_mut().chain(self.transport.iter_mut().flat_map(|t| t.tensors_mut()))
    }

    /// Registers parameters and the mesh constants on `graph`.
    pub fn bind<'a>(&'a self, graph: &mut Graph, artifacts: &'a MeshArtifacts, trainable: bool) -> Result<BoundModel<'a>> {
        let freeform = self.freeform.register(graph, trainable)?;
        let transport = self.transport.as_ref().map(|t| t.register(graph, trainable)).transpose()?;
        let centers = (!self.config.stationary).then(|| graph.constant(artifacts.centers.clone())).transpose()?;
        let local = artifacts
            .local_coords
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { model: self, artifacts, freeform, transport, centers, local })
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let shapes = |mlp: &MlpParams| mlp.tensors().map(|t| t.shape()).collect();
        CheckpointManifest {
            format: "femnet-checkpoint-1".into(),
            config: self.config.clone(),
            seed: self.seed,
            n_params: self.n_params(),
            freeform_shapes: shapes(&self.freeform),
            transport_shapes: self.transport.as_ref().map(shapes),
            blob: String::new(),
            extra: serde_json::Value::Null,
        }
    }

    /// Writes `<path>.json` and `<path>.bin`.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let blob_path = path.with_extension("bin");
        let mut manifest = self.manifest();
        manifest.blob = blob_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        manifest.extra = extra;
        let mut blob = Vec::with_capacity(8 * self.n_params());
        nn::write_blob(&mut blob, self.tensors())?;
        std::fs::write(&blob_path, blob)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`FenModel::save`]; `path` may name
    /// either file or the shared stem.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = path.with_extension("json");
        let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let mut model = FenModel::new(manifest.config.clone(), manifest.seed)?;
        let expected = model.manifest();
        if expected.freeform_shapes != manifest.freeform_shapes || expected.transport_shapes != manifest.transport_shapes {
            return Err(FenError::Format("checkpoint layer shapes do not match its config".into()));
        }
        let blob_path: PathBuf = manifest_path.with_file_name(&manifest.blob);
        let bytes = std::fs::read(blob_path)?;
        nn::read_blob(bytes.as_slice(), model.tensors_mut())?;
        Ok(model)
    }
}

/// JSON side of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub n_params: usize,
    pub freeform_shapes: Vec<[usize; 2]>,
    pub transport_shapes: Option<Vec<[usize; 2]>>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Per-node Dirichlet constraints: masked entries keep their fixed value.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletMask {
    /// `N x m`, true where the value is fixed.
    pub mask: Vec<bool>,
    pub fixed_values: Tensor,
}

impl DirichletMask {
    pub fn new(mask: Vec<bool>, fixed_values: Tensor) -> Result<Self> {
        if mask.len() != fixed_values.data().len() {
            return Err(FenError::ShapeMismatch(format!(
                "{} mask entries for {} fixed values",
                mask.len(),
                fixed_values.data().len()
            )));
        }
        Ok(Self { mask, fixed_values })
    }

    /// Overwrites the masked entries of `state` with their fixed values.
    pub fn apply(&self, state: &mut Tensor) -> Result<()> {
        if state.shape() != self.fixed_values.shape() {
            return Err(FenError::ShapeMismatch("mask and state shapes differ".into()));
        }
        for ((s, &m), f) in state.data_mut().iter_mut().zip(&self.mask).zip(self.fixed_values.data()) {
            if m {
                *s = *f;
            }
        }
        Ok(())
    }

    fn free_indicator(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        Tensor::new(self.fixed_values.rows(), self.fixed_values.cols(), data).expect("mask shape")
    }
}

/// Everything about a mesh that the dynamics need, computed once.
#[derive(Clone, Debug)]
pub struct MeshArtifacts {
    pub mesh: Mesh,
    pub geometry: Vec<CellGeometry>,
    pub lumped: LumpedMass,
    /// Node index of each cell's `s`-th vertex in angle-sorted order.
    slot_nodes: [Rc<[usize]>; 3],
    /// Local coordinates of the `s`-th sorted vertex, `C x 2`.
    local_coords: [Tensor; 3],
    /// Cell centers, `C x 2`.
    centers: Tensor,
    /// `<1, phi>` per cell (equal for all three vertices).
    load: Rc<[f64]>,
    neg_load: Rc<[f64]>,
    /// Component `d` of `grad phi` of the `s`-th sorted vertex per cell.
    grads: [[Rc<[f64]>; DIM]; 3],
    inv_mass: Rc<[f64]>,
}

impl MeshArtifacts {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let geometry = compute_geometry(&mesh);
        let lumped = lumped_mass(&mesh, &geometry)?;
        let n_cells = geometry.len();
        let slot_nodes = std::array::from_fn(|s| geometry.iter().map(|g| g.vertices[g.sorted_order[s]]).collect());
        let local_coords = std::array::from_fn(|s| {
            let data = geometry.iter().flat_map(|g| g.local_coords[g.sorted_order[s]]).collect();
            Tensor::new(n_cells, DIM, data).expect("local coordinate shape")
        });
        let centers = Tensor::new(n_cells, DIM, geometry.iter().flat_map(|g| g.center).collect()).expect("center shape");
        let load: Rc<[f64]> = geometry.iter().map(|g| g.load[0]).collect();
        let neg_load = load.iter().map(|b| -b).collect();
        let grads = std::array::from_fn(|s| {
            std::array::from_fn(|d| geometry.iter().map(|g| g.basis_grads[g.sorted_order[s]][d]).collect())
        });
        let inv_mass = lumped.diag.iter().map(|a| 1.0 / a).collect();
        Ok(Self { mesh, geometry, lumped, slot_nodes, local_coords, centers, load, neg_load, grads, inv_mass })
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }
}

/// A model whose parameters and mesh constants live on a particular graph.
pub struct BoundModel<'a> {
    model: &'a FenModel,
    artifacts: &'a MeshArtifacts,
    freeform: MlpVars,
    transport: Option<MlpVars>,
    centers: Option<Var>,
    local: Vec<Var>,
}

/// Per-cell quantities shared by both terms in one evaluation.
struct CellInputs {
    input: Var,
    /// Features of the `s`-th sorted vertex, `C x m`.
    vertex_features: [Var; 3],
}

impl<'a> BoundModel<'a> {
    pub fn model(&self) -> &FenModel {
        self.model
    }

    pub fn artifacts(&self) -> &MeshArtifacts {
        self.artifacts
    }

    /// Parameter handles, in the order of [`FenModel::tensors`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.freeform.vars().chain(self.transport.iter().flat_map(|t| t.vars())).collect()
    }

    fn check_state(&self, graph: &Graph, y: Var) -> Result<()> {
        let expected = [self.artifacts.n_nodes(), self.model.config.m];
        if graph.value(y).shape() != expected {
            let [r, c] = graph.value(y).shape();
            return Err(FenError::ShapeMismatch(format!(
                "state is {r}x{c}, expected {}x{}",
                expected[0], expected[1]
            )));
        }
        Ok(())
    }

    fn cell_inputs(&self, graph: &mut Graph, t: f64, y: Var) -> Result<CellInputs> {
        self.check_state(graph, y)?;
        let cfg = &self.model.config;
        let n_cells = self.artifacts.n_cells();
        let mut parts = Vec::with_capacity(8);
        if !cfg.autonomous {
            let emb = time_embed(t, cfg.time_period);
            let data = (0..n_cells).flat_map(|_| emb.iter().copied()).collect();
            parts.push(graph.constant(Tensor::new(n_cells, emb.len(), data)?)?);
        }
        if let Some(c) = self.centers {
            parts.push(c);
        }
        let mut vertex_features = [y; 3];
        for (s, feats) in vertex_features.iter_mut().enumerate() {
            *feats = graph.gather_rows(y, self.artifacts.slot_nodes[s].clone())?;
            parts.push(self.local[s]);
            parts.push(*feats);
        }
        let input = graph.concat_cols(&parts)?;
        Ok(CellInputs { input, vertex_features })
    }

    /// The per-cell MLP input, `C x input_dim`.
    pub fn assemble_cell_input(&self, graph: &mut Graph, t: f64, y: Var) -> Result<Var> {
        Ok(self.cell_inputs(graph, t, y)?.input)
    }

    fn freeform_from(&self, graph: &mut Graph, cells: &CellInputs) -> Result<Var> {
        let m = self.model.config.m;
        let coeffs = mlp_forward(graph, &self.freeform, cells.input)?;
        let mut total = None;
        for s in 0..3 {
            let c = graph.slice_cols(coeffs, s * m, m)?;
            let msg = graph.scale_rows(c, self.artifacts.load.clone())?;
            let node = graph.scatter_add_rows(msg, self.artifacts.slot_nodes[s].clone(), self.artifacts.n_nodes())?;
            total = Some(match total {
                None => node,
                Some(acc) => graph.add(acc, node)?,
            });
        }
        Ok(total.expect("three slots"))
    }

    /// Velocities `C x 2m`: columns `0..m` are x-components, `m..2m` are
    /// y-components of each feature's velocity.
    fn velocities_from(&self, graph: &mut Graph, cells: &CellInputs) -> Result<Var> {
        let transport = self.transport.as_ref().ok_or(FenError::TransportAbsent)?;
        mlp_forward(graph, transport, cells.input)
    }

    fn transport_from(&self, graph: &mut Graph, cells: &CellInputs, velocities: Var) -> Result<Var> {
        let m = self.model.config.m;
        let art = self.artifacts;
        // v . grad u per cell and feature, with u the P1 interpolant
        let mut advection = None;
        for d in 0..DIM {
            let mut grad_d = None;
            for s in 0..3 {
                let term = graph.scale_rows(cells.vertex_features[s], art.grads[s][d].clone())?;
                grad_d = Some(match grad_d {
                    None => term,
                    Some(acc) => graph.add(acc, term)?,
                });
            }
            let v_d = graph.slice_cols(velocities, d * m, m)?;
            let prod = graph.mul(v_d, grad_d.expect("three slots"))?;
            advection = Some(match advection {
                None => prod,
                Some(acc) => graph.add(acc, prod)?,
            });
        }
        // <grad phi_j, phi_i> = grad phi_j <1, phi_i> is the same for every i
        let msg = graph.scale_rows(advection.expect("two dims"), art.neg_load.clone())?;
        let mut total = None;
        for s in 0..3 {
            let node = graph.scatter_add_rows(msg, art.slot_nodes[s].clone(), art.n_nodes())?;
            total = Some(match total {
                None => node,
                Some(acc) => graph.add(acc, node)?,
            });
        }
        Ok(total.expect("three slots"))
    }

    /// Aggregated free-form messages per node, `N x m`.
    pub fn freeform_messages(&self, graph: &mut Graph, t: f64, y: Var) -> Result<Var> {
        let cells = self.cell_inputs(graph, t, y)?;
        self.freeform_from(graph, &cells)
    }

    /// Aggregated transport messages per node, `N x m`.
    pub fn transport_messages(&self, graph: &mut Graph, t: f64, y: Var) -> Result<Var> {
        let cells = self.cell_inputs(graph, t, y)?;
        let v = self.velocities_from(graph, &cells)?;
        self.transport_from(graph, &cells, v)
    }

    /// Transport messages for externally supplied velocities (`C x 2m`, see
    /// the layout of the transport output).
    pub fn transport_messages_with(&self, graph: &mut Graph, t: f64, y: Var, velocities: Var) -> Result<Var> {
        let cells = self.cell_inputs(graph, t, y)?;
        self.transport_from(graph, &cells, velocities)
    }

    fn finish(&self, graph: &mut Graph, messages: Var, mask: Option<&DirichletMask>) -> Result<Var> {
        let ydot = graph.scale_rows(messages, self.artifacts.inv_mass.clone())?;
        match mask {
            None => Ok(ydot),
            Some(mask) => {
                let free = graph.constant(mask.free_indicator())?;
                graph.mul(ydot, free)
            }
        }
    }

    /// `dY/dt`, `N x m`. Masked entries are zero.
    pub fn time_derivative(&self, graph: &mut Graph, t: f64, y: Var, mask: Option<&DirichletMask>) -> Result<Var> {
        let cells = self.cell_inputs(graph, t, y)?;
        let mut messages = self.freeform_from(graph, &cells)?;
        if self.transport.is_some() {
            let v = self.velocities_from(graph, &cells)?;
            let transport = self.transport_from(graph, &cells, v)?;
            messages = graph.add(messages, transport)?;
        }
        self.finish(graph, messages, mask)
    }

    /// The two contributions to `dY/dt` and the predicted velocities.
    pub fn terms(&self, graph: &mut Graph, t: f64, y: Var, mask: Option<&DirichletMask>) -> Result<DerivativeTerms> {
        let mark = graph.len();
        let cells = self.cell_inputs(graph, t, y)?;
        let free = self.freeform_from(graph, &cells)?;
        let free = self.finish(graph, free, mask)?;
        let freeform = graph.value(free).clone();
        let (transport, velocities) = if self.transport.is_some() {
            let v = self.velocities_from(graph, &cells)?;
            let msg = self.transport_from(graph, &cells, v)?;
            let tr = self.finish(graph, msg, mask)?;
            (Some(graph.value(tr).clone()), Some(graph.value(v).clone()))
        } else {
            (None, None)
        };
        graph.truncate(mark);
        let mut total = freeform.clone();
        if let Some(tr) = &transport {
            for (a, b) in total.data_mut().iter_mut().zip(tr.data()) {
                *a += b;
            }
        }
        Ok(DerivativeTerms { freeform, transport, total, velocities })
    }
}

/// Separate contributions to the time derivative at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeTerms {
    pub freeform: Tensor,
    pub transport: Option<Tensor>,
    pub total: Tensor,
    /// `C x 2m` velocities, see [`BoundModel::transport_messages`].
    pub velocities: Option<Tensor>,
}

/// Convenience: `dY/dt` as a plain tensor, without recording gradients.
pub fn time_derivative(model: &FenModel, artifacts: &MeshArtifacts, t: f64, y: &Tensor, mask: Option<&DirichletMask>) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph, artifacts, false)?;
    let yv = graph.constant(y.clone())?;
    let out = bound.time_derivative(&mut graph, t, yv, mask)?;
    Ok(graph.value(out).clone())
}
