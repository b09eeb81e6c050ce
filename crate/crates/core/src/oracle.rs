//! Reference solutions for `u_t + (u^2/2)_x = 0` on `[0,1] x [0,0.2]`:
//! a first-order Godunov finite-volume solver, the pre-shock solution by
//! characteristics, and discrete L2 norm reports.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Cursor;
use crate::pde_loss::{T_EXTENT, X_EXTENT};

pub const DEFAULT_CFL: f64 = 0.45;
pub const MIN_NX: usize = 2048;
pub const FIELD_MAGIC: &[u8; 8] = b"PDGNFELD";
pub const FIELD_VERSION: u32 = 1;
pub const NORMS_HEADER: &str = "N,c,norm_g,norm_fd,norm_delta";
pub const NORM_FORMULA: &str =
    "# format=1; norm(u) = sqrt(dx*dt*sum_ij u_ij^2), dx = 1/(N-1), dt = 0.2/(N-1)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdmConfig {
    /// Finite-volume cells; `None` picks `max(2048, 2N)`.
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    DEFAULT_CFL
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            nx: None,
            cfl: DEFAULT_CFL,
        }
    }
}

impl FdmConfig {
    pub fn cells_for(&self, n: usize) -> usize {
        self.nx.unwrap_or(MIN_NX.max(2 * n))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl < 1.0) {
            return Err(Error::Config(format!("cfl must lie in (0,1), got {}", self.cfl)));
        }
        let nx = self.cells_for(n);
        if nx < 16 {
            return Err(Error::Config(format!("nx must be at least 16, got {nx}")));
        }
        if nx < 2 * n {
            return Err(Error::Config(format!(
                "nx = {nx} must be at least twice the output resolution {n}"
            )));
        }
        Ok(())
    }
}

fn flux(u: f64) -> f64 {
    0.5 * u * u
}

fn godunov(ul: f64, ur: f64) -> f64 {
    flux(ul.max(0.0)).max(flux(ur.min(0.0)))
}

/// Exact cell averages of the initial condition on `nx` cells.
pub fn initial_cell_averages(c: f64, nx: usize) -> Vec<f64> {
    let h = X_EXTENT / nx as f64;
    (0..nx)
        .map(|i| {
            if c == 0.0 {
                return 0.0;
            }
            let k = 2.0 * PI * c;
            let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
            0.5 - ((k * b).sin() - (k * a).sin()) / (2.0 * k * h)
        })
        .collect()
}

/// Cell averages at each requested time (ascending, within `[0, 0.2]`).
/// The boundary values `u(0,t) = u(1,t) = 0` enter through ghost cells; for
/// `u >= 0` the left flux vanishes and the right end is an outflow.
pub fn solve_cells(c: f64, nx: usize, cfl: f64, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    if nx < 16 {
        return Err(Error::InvalidArgument(format!("nx must be at least 16, got {nx}")));
    }
    if !(cfl > 0.0 && cfl < 1.0) {
        return Err(Error::InvalidArgument(format!("cfl must lie in (0,1), got {cfl}")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| !(0.0..=T_EXTENT).contains(&t)) {
        return Err(Error::InvalidArgument(
            "output times must be ascending within [0, 0.2]".into(),
        ));
    }
    let h = X_EXTENT / nx as f64;
    let mut u = initial_cell_averages(c, nx);
    let mut fluxes = vec![0.0; nx + 1];
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut dt = target - t;
            if umax > 0.0 {
                dt = dt.min(cfl * h / umax);
            }
            if umax * dt > h {
                return Err(Error::Numerical(format!(
                    "CFL violated: |u|max * dt / dx = {}",
                    umax * dt / h
                )));
            }
            fluxes[0] = godunov(0.0, u[0]);
            for i in 1..nx {
                fluxes[i] = godunov(u[i - 1], u[i]);
            }
            fluxes[nx] = godunov(u[nx - 1], 0.0);
            let r = dt / h;
            for (i, v) in u.iter_mut().enumerate() {
                *v -= r * (fluxes[i + 1] - fluxes[i]);
            }
            t = if target - t <= dt { target } else { t + dt };
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// A sampled space-time field, row-major with rows at `t_i = 0.2 i/(N-1)`
/// and columns at `x_j = j/(N-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub n: usize,
    pub c: f64,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(n: usize, c: f64, data: Vec<f64>) -> Result<Self> {
        if n < 2 || data.len() != n * n {
            return Err(Error::shape(
                "field",
                format!("expected {n}x{n} values, got {}", data.len()),
            ));
        }
        Ok(Self { n, c, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.data.len());
        buf.extend_from_slice(FIELD_MAGIC);
        buf.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        for v in [self.c, 0.0, X_EXTENT, 0.0, T_EXTENT] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != FIELD_MAGIC {
            return Err(Error::Format("not a field file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != FIELD_VERSION {
            return Err(Error::Format(format!("unsupported field version {version}")));
        }
        let n = cur.usize()?;
        let c = cur.f64()?;
        let extents = [cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?];
        if extents != [0.0, X_EXTENT, 0.0, T_EXTENT] {
            return Err(Error::Format(format!("unexpected physical extents {extents:?}")));
        }
        let count = n
            .checked_mul(n)
            .ok_or_else(|| Error::Format("field size overflows".into()))?;
        if bytes.len() - cur.pos != 8 * count {
            return Err(Error::Format(format!(
                "field payload holds {} bytes, expected {}",
                bytes.len() - cur.pos,
                8 * count
            )));
        }
        let data = (0..count).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        Field::new(n, c, data)
    }
}

/// Godunov solution sampled onto the `N x N` output grid (nearest cell).
pub fn solve_fdm(c: f64, cfg: &FdmConfig, n: usize) -> Result<Field> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("resolution must be at least 2, got {n}")));
    }
    cfg.validate(n)?;
    let nx = cfg.cells_for(n);
    let times: Vec<f64> = (0..n).map(|i| T_EXTENT * i as f64 / (n - 1) as f64).collect();
    let snaps = solve_cells(c, nx, cfg.cfl, &times)?;
    let cols: Vec<usize> = (0..n)
        .map(|j| {
            let x = X_EXTENT * j as f64 / (n - 1) as f64;
            ((x * nx as f64).floor() as usize).min(nx - 1)
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for snap in &snaps {
        data.extend(cols.iter().map(|&i| snap[i]));
    }
    Field::new(n, c, data)
}

fn u0(c: f64, x: f64) -> f64 {
    0.5 * (1.0 - (2.0 * PI * c * x).cos())
}

/// First time characteristics cross: `1/(pi c)`.
pub fn shock_time(c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("shock time needs c > 0, got {c}")));
    }
    Ok(1.0 / (PI * c))
}

/// Smooth solution `u = u0(x - u t)`, valid before the shock time.
pub fn characteristics_solution(c: f64, x: f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
    }
    if c > 0.0 && t >= shock_time(c)? {
        return Err(Error::InvalidArgument(format!(
            "t = {t} is past the shock time {} for c = {c}",
            shock_time(c)?
        )));
    }
    if t == 0.0 {
        return Ok(u0(c, x));
    }
    // foot of the characteristic lies in [x - t, x] since 0 <= u <= 1
    let (mut lo, mut hi) = (x - t, x);
    let resid = |xi: f64| xi + u0(c, xi) * t - x;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if resid(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(u0(c, 0.5 * (lo + hi)))
}

/// Largest one-sided difference quotient of cell values.
pub fn max_gradient(cells: &[f64]) -> f64 {
    let h = X_EXTENT / cells.len() as f64;
    cells
        .windows(2)
        .map(|w| (w[1] - w[0]).abs() / h)
        .fold(0.0, f64::max)
}

/// Shock formation time estimated from a numerical solution: `1/max|u_x|`
/// is fitted by a line over the early samples (gradient at most four times
/// its initial value) and extrapolated to zero.
pub fn steepening_time(c: f64, nx: usize, cfl: f64, samples: usize) -> Result<f64> {
    if samples < 3 {
        return Err(Error::InvalidArgument("need at least 3 samples".into()));
    }
    let times: Vec<f64> = (0..samples)
        .map(|k| T_EXTENT * k as f64 / (samples - 1) as f64)
        .collect();
    let snaps = solve_cells(c, nx, cfl, &times)?;
    let g0 = max_gradient(&snaps[0]);
    if g0 == 0.0 {
        return Err(Error::Numerical("flat initial condition never steepens".into()));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(&snaps)
        .map(|(&t, s)| (t, max_gradient(s)))
        .take_while(|&(_, g)| g <= 4.0 * g0)
        .map(|(t, g)| (t, 1.0 / g))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Numerical("too few early samples for the fit".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Numerical("gradient is not growing".into()));
    }
    Ok(mt - my / slope)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub n: usize,
    pub c: f64,
    pub norm_g: f64,
    pub norm_fd: f64,
    pub norm_delta: f64,
}

impl NormReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e}",
            self.n, self.c, self.norm_g, self.norm_fd, self.norm_delta
        )
    }

    /// Formula comment, header and one row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{NORM_FORMULA}");
        let _ = writeln!(s, "{NORMS_HEADER}");
        let _ = writeln!(s, "{}", self.csv_row());
        s
    }
}

/// Discrete space-time L2 norm `sqrt(dx dt sum u^2)` of an `N x N` field.
pub fn field_norm(n: usize, values: impl Iterator<Item = f64>) -> f64 {
    let dx = X_EXTENT / (n - 1) as f64;
    let dt = T_EXTENT / (n - 1) as f64;
    let s: f64 = values.map(|v| v * v).sum();
    (dx * dt * s).sqrt()
}

pub fn compute_norms(u_g: &Field, u_fd: &Field) -> Result<NormReport> {
    if u_g.n != u_fd.n || u_g.data.len() != u_fd.data.len() {
        return Err(Error::shape(
            "compute_norms",
            format!("fields are {0}x{0} and {1}x{1}", u_g.n, u_fd.n),
        ));
    }
    let n = u_g.n;
    Ok(NormReport {
        n,
        c: u_fd.c,
        norm_g: field_norm(n, u_g.data.iter().copied()),
        norm_fd: field_norm(n, u_fd.data.iter().copied()),
        norm_delta: field_norm(n, u_g.data.iter().zip(&u_fd.data).map(|(a, b)| a - b)),
    })
}
