use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{check_finite, dot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default = "default_max_line_search")]
    pub max_line_search: usize,
    #[serde(default = "default_curvature_eps")]
    pub curvature_eps: f64,
    #[serde(default = "default_fallback_step")]
    pub fallback_step: f64,
    /// After a strong-Wolfe point is found, spend one more evaluation on the
    /// interpolated minimizer along the line and keep it if it is better.
    #[serde(default = "default_refine")]
    pub refine: bool,
}

fn default_history() -> usize {
    10
}
fn default_c1() -> f64 {
    1e-4
}
fn default_c2() -> f64 {
    0.9
}
fn default_max_line_search() -> usize {
    20
}
fn default_curvature_eps() -> f64 {
    1e-10
}
fn default_fallback_step() -> f64 {
    1e-2
}
fn default_refine() -> bool {
    true
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: default_history(),
            c1: default_c1(),
            c2: default_c2(),
            max_line_search: default_max_line_search(),
            curvature_eps: default_curvature_eps(),
            fallback_step: default_fallback_step(),
            refine: default_refine(),
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::Config("history must be at least 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.max_line_search == 0 {
            return Err(Error::Config("max_line_search must be at least 1".into()));
        }
        if !(self.fallback_step > 0.0) {
            return Err(Error::Config("fallback_step must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one L-BFGS iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Step length along the search direction (0 at a stationary point).
    pub step: f64,
    pub evaluations: usize,
    /// The line search failed and the fixed fallback step was taken.
    pub fallback: bool,
    pub pair_stored: bool,
}

/// Limited-memory BFGS with a strong-Wolfe line search.
#[derive(Debug, Clone, PartialEq)]
pub struct Lbfgs {
    pub config: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
}

struct Probe {
    alpha: f64,
    f: f64,
    dg: f64,
    g: Vec<f64>,
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            s: VecDeque::new(),
            y: VecDeque::new(),
        })
    }

    pub fn stored_pairs(&self) -> usize {
        self.s.len()
    }

    /// `(s, y)` pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.s.iter().zip(&self.y).map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    /// Restores history saved with [`Lbfgs::pairs`].
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> Result<()> {
        if s.len() != y.len() {
            return Err(Error::shape("lbfgs", "s and y lengths differ"));
        }
        if self.s.len() == self.config.history {
            self.s.pop_front();
            self.y.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        Ok(())
    }

    /// `-H g` by the two-loop recursion with `H0 = gamma I`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = match (self.s.back(), self.y.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0,
        };
        for v in &mut q {
            *v *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            let beta = rho * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        for v in &mut q {
            *v = -*v;
        }
        q
    }

    /// One iteration from `x`, evaluating the objective there first.
    pub fn step<F>(&mut self, x: &mut [f64], mut eval: F) -> Result<StepReport>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (f0, g0) = eval(x)?;
        let mut r = self.step_from(x, f0, &g0, eval)?;
        r.evaluations += 1;
        Ok(r)
    }

    /// One iteration from `x` where `f0`, `g0` are the objective and gradient at `x`.
    pub fn step_from<F>(&mut self, x: &mut [f64], f0: f64, g0: &[f64], mut eval: F) -> Result<StepReport>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if x.len() != g0.len() {
            return Err(Error::shape(
                "lbfgs_step",
                format!("params {}, grad {}", x.len(), g0.len()),
            ));
        }
        if !f0.is_finite() {
            return Err(Error::NonFinite(format!("objective = {f0}")));
        }
        check_finite("gradient", g0)?;
        let mut report = StepReport {
            loss_before: f0,
            loss_after: f0,
            step: 0.0,
            evaluations: 0,
            fallback: false,
            pair_stored: false,
        };
        if g0.iter().all(|&v| v == 0.0) {
            return Ok(report);
        }

        let mut d = self.direction(g0);
        let mut dg0 = dot(&d, g0);
        if !(dg0 < 0.0) {
            // not a descent direction: drop the history
            self.reset();
            d = g0.iter().map(|v| -v).collect();
            dg0 = dot(&d, g0);
        }

        let x0 = x.to_vec();
        let mut evals = 0usize;
        let mut probe = |alpha: f64, evals: &mut usize| -> Result<Probe> {
            let xt: Vec<f64> = x0.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            *evals += 1;
            let (f, g) = eval(&xt)?;
            let dg = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
                dot(&g, &d)
            } else {
                f64::NAN
            };
            Ok(Probe { alpha, f, dg, g })
        };

        // without curvature pairs the direction is unscaled; keep the first trial step short
        let alpha0 = if self.s.is_empty() {
            (1.0 / g0.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };
        let mut found = self.line_search(f0, dg0, alpha0, &mut probe, &mut evals)?;
        if let Some(p) = found.take() {
            found = Some(self.refine(f0, dg0, p, &mut probe, &mut evals)?);
        }
        let accepted = match found {
            Some(p) => {
                let c = &self.config;
                assert!(
                    p.f <= f0 + c.c1 * p.alpha * dg0 && p.dg.abs() <= c.c2 * dg0.abs(),
                    "accepted step violates the strong Wolfe conditions"
                );
                p
            }
            None => {
                report.fallback = true;
                let step = self.config.fallback_step;
                let xt: Vec<f64> = x0.iter().zip(g0).map(|(a, g)| a - step * g).collect();
                evals += 1;
                let (f, g) = eval(&xt)?;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("objective after fallback step = {f}")));
                }
                check_finite("gradient after fallback step", &g)?;
                for (xi, v) in x.iter_mut().zip(&xt) {
                    *xi = *v;
                }
                let s: Vec<f64> = xt.iter().zip(&x0).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(g0).map(|(a, b)| a - b).collect();
                report.pair_stored = self.maybe_store(s, y);
                report.loss_after = f;
                report.step = step;
                report.evaluations = evals;
                return Ok(report);
            }
        };

        for ((xi, a), di) in x.iter_mut().zip(&x0).zip(&d) {
            *xi = a + accepted.alpha * di;
        }
        let s: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = accepted.g.iter().zip(g0).map(|(a, b)| a - b).collect();
        report.pair_stored = self.maybe_store(s, y);
        report.loss_after = accepted.f;
        report.step = accepted.alpha;
        report.evaluations = evals;
        Ok(report)
    }

    fn maybe_store(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) > self.config.curvature_eps {
            if self.s.len() == self.config.history {
                self.s.pop_front();
                self.y.pop_front();
            }
            self.s.push_back(s);
            self.y.push_back(y);
            true
        } else {
            false
        }
    }

    fn refine(
        &self,
        f0: f64,
        dg0: f64,
        p: Probe,
        probe: &mut dyn FnMut(f64, &mut usize) -> Result<Probe>,
        evals: &mut usize,
    ) -> Result<Probe> {
        let LbfgsConfig { c1, c2, .. } = self.config;
        if !self.config.refine || p.dg.abs() <= 1e-4 * dg0.abs() {
            return Ok(p);
        }
        let origin = Probe {
            alpha: 0.0,
            f: f0,
            dg: dg0,
            g: Vec::new(),
        };
        let Some(a) = cubic_minimizer(&origin, &p) else {
            return Ok(p);
        };
        if !(a > 0.0) || (a - p.alpha).abs() <= 1e-12 * p.alpha {
            return Ok(p);
        }
        let q = probe(a, evals)?;
        let wolfe = q.f.is_finite()
            && q.dg.is_finite()
            && q.f <= f0 + c1 * q.alpha * dg0
            && q.dg.abs() <= c2 * dg0.abs();
        Ok(if wolfe && q.f <= p.f { q } else { p })
    }

    /// Bracketing phase followed by zoom; `None` when no strong-Wolfe point
    /// is found within the evaluation budget.
    fn line_search(
        &self,
        f0: f64,
        dg0: f64,
        alpha0: f64,
        probe: &mut dyn FnMut(f64, &mut usize) -> Result<Probe>,
        evals: &mut usize,
    ) -> Result<Option<Probe>> {
        let LbfgsConfig {
            c1,
            c2,
            max_line_search,
            ..
        } = self.config;
        let armijo = |p: &Probe| p.f <= f0 + c1 * p.alpha * dg0;
        let curvature = |p: &Probe| p.dg.abs() <= c2 * dg0.abs();
        let finite = |p: &Probe| p.f.is_finite() && p.dg.is_finite();

        let mut prev = Probe {
            alpha: 0.0,
            f: f0,
            dg: dg0,
            g: Vec::new(),
        };
        let mut alpha = alpha0;
        let (mut lo, mut hi);
        loop {
            if *evals >= max_line_search {
                return Ok(None);
            }
            let cur = probe(alpha, evals)?;
            if !finite(&cur) {
                // overshoot into a non-finite region: shrink
                lo = prev;
                hi = Probe { f: f64::INFINITY, dg: f64::NAN, ..cur };
                break;
            }
            if !armijo(&cur) || (prev.alpha > 0.0 && cur.f >= prev.f) {
                lo = prev;
                hi = cur;
                break;
            }
            if curvature(&cur) {
                return Ok(Some(cur));
            }
            if cur.dg >= 0.0 {
                hi = prev;
                lo = cur;
                break;
            }
            alpha *= 2.0;
            prev = cur;
        }

        // zoom: lo satisfies Armijo with the lowest value seen so far
        loop {
            if *evals >= max_line_search {
                return Ok(None);
            }
            let a = interpolate(&lo, &hi);
            let cur = probe(a, evals)?;
            if !finite(&cur) || !armijo(&cur) || cur.f >= lo.f {
                hi = cur;
                if !hi.f.is_finite() {
                    hi.f = f64::INFINITY;
                }
            } else {
                if curvature(&cur) {
                    return Ok(Some(cur));
                }
                if cur.dg * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = std::mem::replace(&mut lo, cur);
                } else {
                    lo = cur;
                }
            }
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                return Ok(None);
            }
        }
    }
}

fn cubic_minimizer(lo: &Probe, hi: &Probe) -> Option<f64> {
    let (a, b) = (lo.alpha, hi.alpha);
    let d1 = lo.dg + hi.dg - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dg * hi.dg;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let m = b - (b - a) * (hi.dg + d2 - d1) / (hi.dg - lo.dg + 2.0 * d2);
    m.is_finite().then_some(m)
}

/// Cubic (or quadratic) interpolation minimizer between two probes,
/// safeguarded to the interior of the interval.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let (left, right) = (a.min(b), a.max(b));
    let width = right - left;
    let fallback = 0.5 * (a + b);
    let candidate = if hi.f.is_finite() && hi.dg.is_finite() {
        cubic_minimizer(lo, hi).unwrap_or(fallback)
    } else if hi.f.is_finite() {
        // quadratic through f(a), f'(a), f(b)
        let h = b - a;
        let denom = 2.0 * (hi.f - lo.f - lo.dg * h);
        if denom > 0.0 {
            a - lo.dg * h * h / denom
        } else {
            fallback
        }
    } else {
        fallback
    };
    if candidate.is_finite() {
        candidate.clamp(left + 0.1 * width, right - 0.1 * width)
    } else {
        fallback
    }
}
