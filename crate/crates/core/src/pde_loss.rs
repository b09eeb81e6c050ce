//! Stencil derivative operators, the inviscid Burgers' residual and the
//! data-free training objective `L = L_p + lambda * L_b`.
//!
//! Fields are `[B,1,N,N]` with axis 2 = t (rows) and axis 3 = x (columns),
//! covering the physical window `[0,1] x [0,0.2]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchReducer, Graph, LocalReducer, NodeId, Padding, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const X_EXTENT: f64 = 1.0;
pub const T_EXTENT: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalDomain {
    pub n: usize,
}

impl PhysicalDomain {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "resolution must be at least 3, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn dx(&self) -> f64 {
        X_EXTENT / (self.n - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        T_EXTENT / (self.n - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Also penalize `u(0,t)` and `u(1,t)` against zero.
    #[serde(default)]
    pub x_boundary: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            x_boundary: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `u0(x) = (1 - cos(2 pi c x)) / 2` at the `n` grid points of `[0,1]`.
pub fn initial_condition(c: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let dx = X_EXTENT / (n - 1) as f64;
    (0..n)
        .map(|j| 0.5 * (1.0 - (2.0 * PI * c * (j as f64 * dx)).cos()))
        .collect()
}

/// Row-major `[N,N]` IC row replicated along t, as the `[1,1,N,N]` field.
pub fn tiled_initial_condition<S: Scalar>(c: f64, n: usize) -> Tensor<S> {
    let ic = initial_condition(c, n);
    Tensor::from_fn(&[1, 1, n, n], |i| S::from_f64(ic[i % n]))
}

pub fn sobel_x_kernel(domain: &PhysicalDomain) -> [f64; 9] {
    let k = 1.0 / (8.0 * domain.dx());
    [-k, 0.0, k, -2.0 * k, 0.0, 2.0 * k, -k, 0.0, k]
}

pub fn sobel_t_kernel(domain: &PhysicalDomain) -> [f64; 9] {
    let k = 1.0 / (8.0 * domain.dt());
    [-k, -2.0 * k, -k, 0.0, 0.0, 0.0, k, 2.0 * k, k]
}

/// Five-point Laplacian scaled by `1/dx^2`, assuming `dt == dx`-spaced rows.
pub fn laplacian_kernel(domain: &PhysicalDomain) -> [f64; 9] {
    let k = 1.0 / (domain.dx() * domain.dx());
    [0.0, k, 0.0, k, -4.0 * k, k, 0.0, k, 0.0]
}

fn stencil<S: Scalar>(g: &mut Graph<S>, field: NodeId, kernel: [f64; 9]) -> Result<NodeId> {
    let k = g.input(Tensor::from_f64(&[1, 1, 3, 3], &kernel)?);
    g.conv2d(field, k, Padding::Valid)
}

fn check_field<S: Scalar>(g: &Graph<S>, field: NodeId, domain: &PhysicalDomain) -> Result<()> {
    let (_, c, h, w) = g.value(field).dims4("pde_loss")?;
    if c != 1 || h != domain.n || w != domain.n {
        return Err(Error::shape(
            "pde_loss",
            format!("field must be [B,1,{n},{n}], got [_, {c}, {h}, {w}]", n = domain.n),
        ));
    }
    Ok(())
}

pub fn ddx_node<S: Scalar>(g: &mut Graph<S>, field: NodeId, domain: &PhysicalDomain) -> Result<NodeId> {
    stencil(g, field, sobel_x_kernel(domain))
}

pub fn ddt_node<S: Scalar>(g: &mut Graph<S>, field: NodeId, domain: &PhysicalDomain) -> Result<NodeId> {
    stencil(g, field, sobel_t_kernel(domain))
}

pub fn laplacian_node<S: Scalar>(
    g: &mut Graph<S>,
    field: NodeId,
    domain: &PhysicalDomain,
) -> Result<NodeId> {
    stencil(g, field, laplacian_kernel(domain))
}

/// `u_t + u * u_x` on the interior `(N-2) x (N-2)` points.
pub fn burgers_residual_node<S: Scalar>(
    g: &mut Graph<S>,
    field: NodeId,
    domain: &PhysicalDomain,
) -> Result<NodeId> {
    check_field(g, field, domain)?;
    let ut = ddt_node(g, field, domain)?;
    let ux = ddx_node(g, field, domain)?;
    let u = g.crop_interior(field)?;
    let adv = g.mul(u, ux)?;
    g.add(ut, adv)
}

/// Nodes making up the training objective for one (local) batch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Per-sample residual mean square `[B]`.
    pub physics: NodeId,
    /// Per-sample boundary mean square `[B]`.
    pub boundary: NodeId,
    /// `batch_mean(physics + lambda * boundary)` over the global batch.
    pub total: NodeId,
}

fn tag_component(e: Error, component: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{component} loss ({what})")),
        other => other,
    }
}

/// Builds the loss over a local batch of `field` `[B,1,N,N]` and `ic` `[B,N]`,
/// normalized by `global_batch` samples.
pub fn loss_nodes<S: Scalar>(
    g: &mut Graph<S>,
    field: NodeId,
    ic: NodeId,
    cfg: &LossConfig,
    domain: &PhysicalDomain,
    global_batch: usize,
) -> Result<LossNodes> {
    cfg.validate()?;
    check_field(g, field, domain)?;
    let b = g.value(field).batch();
    if g.value(ic).shape() != [b, domain.n] {
        return Err(Error::shape(
            "total_loss",
            format!(
                "initial conditions must be [{b},{}], got {:?}",
                domain.n,
                g.value(ic).shape()
            ),
        ));
    }
    let res = burgers_residual_node(g, field, domain)?;
    let physics = g.sample_mean_square(res).map_err(|e| tag_component(e, "physics"))?;

    let row0 = g.first_row(field)?;
    let diff = g.sub(row0, ic)?;
    let mut boundary = g
        .sample_mean_square(diff)
        .map_err(|e| tag_component(e, "boundary"))?;
    if cfg.x_boundary {
        let n = domain.n;
        let mask = Tensor::from_fn(&[b, 1, n, n], |i| {
            let j = i % n;
            if j == 0 || j == n - 1 {
                S::one()
            } else {
                S::zero()
            }
        });
        let m = g.input(mask);
        let edges = g.mul(field, m)?;
        let ms = g.sample_mean_square(edges)?;
        // sample_mean_square averaged over N*N entries; rescale to the 2N edge points
        let ms = g.scale(ms, (n * n) as f64 / (2 * n) as f64)?;
        boundary = g.add(boundary, ms).map_err(|e| tag_component(e, "boundary"))?;
    }
    let weighted = g.scale(boundary, cfg.lambda)?;
    let per_sample = g.add(physics, weighted)?;
    let total = g
        .batch_mean(per_sample, global_batch)
        .map_err(|e| tag_component(e, "total"))?;
    Ok(LossNodes {
        physics,
        boundary,
        total,
    })
}

/// Evaluated loss components (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub physics: f64,
    pub boundary: f64,
    pub total: f64,
}

fn single_op<S: Scalar>(
    field: &Tensor<S>,
    domain: &PhysicalDomain,
    op: fn(&mut Graph<S>, NodeId, &PhysicalDomain) -> Result<NodeId>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let f = g.input(field.clone());
    check_field(&g, f, domain)?;
    let out = op(&mut g, f, domain)?;
    Ok(g.value(out).clone())
}

pub fn ddx<S: Scalar>(field: &Tensor<S>, domain: &PhysicalDomain) -> Result<Tensor<S>> {
    single_op(field, domain, ddx_node)
}

pub fn ddt<S: Scalar>(field: &Tensor<S>, domain: &PhysicalDomain) -> Result<Tensor<S>> {
    single_op(field, domain, ddt_node)
}

pub fn laplacian<S: Scalar>(field: &Tensor<S>, domain: &PhysicalDomain) -> Result<Tensor<S>> {
    single_op(field, domain, laplacian_node)
}

pub fn burgers_residual<S: Scalar>(field: &Tensor<S>, domain: &PhysicalDomain) -> Result<Tensor<S>> {
    single_op(field, domain, burgers_residual_node)
}

/// Loss of a batch of generated fields against their initial conditions.
pub fn total_loss<S: Scalar>(
    output: &Tensor<S>,
    ic_batch: &Tensor<S>,
    cfg: &LossConfig,
    domain: &PhysicalDomain,
) -> Result<LossValue> {
    let mut g = Graph::new();
    let f = g.input(output.clone());
    let ic = g.input(ic_batch.clone());
    let b = output.batch();
    let nodes = loss_nodes(&mut g, f, ic, cfg, domain, b)?;
    let mean = |id: NodeId| {
        let v = g.value(id).to_f64_vec();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(LossValue {
        physics: mean(nodes.physics),
        boundary: mean(nodes.boundary),
        total: g.value(nodes.total).item().as_f64(),
    })
}

/// Gradient of [`total_loss`] with respect to the generated fields.
pub fn total_loss_grad<S: Scalar>(
    output: &Tensor<S>,
    ic_batch: &Tensor<S>,
    cfg: &LossConfig,
    domain: &PhysicalDomain,
) -> Result<(LossValue, Tensor<S>)> {
    let mut g = Graph::new();
    let f = g.input(output.clone());
    let ic = g.input(ic_batch.clone());
    let nodes = loss_nodes(&mut g, f, ic, cfg, domain, output.batch())?;
    let reducer: &mut dyn BatchReducer = &mut LocalReducer;
    g.backward(nodes.total, reducer)?;
    let mean = |id: NodeId| {
        let v = g.value(id).to_f64_vec();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let value = LossValue {
        physics: mean(nodes.physics),
        boundary: mean(nodes.boundary),
        total: g.value(nodes.total).item().as_f64(),
    };
    let grad = g
        .grad(f)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(output.shape()));
    Ok((value, grad))
}
