use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::manifest::RunManifest;

use super::objective::{Evaluation, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Noise,
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StepRule {
    /// Limited-memory BFGS directions with backtracking line search.
    Lbfgs { memory: usize },
    /// Gradient steps of a fixed length; a step that raises the loss is
    /// retried at half the length.
    Fixed { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub init: InitMode,
    pub seed: u64,
    /// Standard deviation of noise initialisation, in preprocessed units.
    pub noise_sigma: f64,
    /// Stop once the relative loss change over `window` iterations is
    /// below this.
    pub tolerance: f64,
    pub window: usize,
    /// Project pixels onto the valid 8-bit range after every step.
    pub clamp_pixels: bool,
    /// Largest per-pixel change of a steepest-descent trial step, in
    /// preprocessed units. Used for the first step and after L-BFGS resets.
    pub initial_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            step_rule: StepRule::Lbfgs { memory: 10 },
            init: InitMode::Noise,
            seed: 0,
            noise_sigma: 10.0,
            tolerance: 1e-5,
            window: 10,
            clamp_pixels: true,
            initial_step: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.window < 1 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidConfig("initial_step must be positive".into()));
        }
        match self.step_rule {
            StepRule::Lbfgs { memory } if memory < 1 => {
                Err(Error::InvalidConfig("L-BFGS memory must be at least 1".into()))
            }
            StepRule::Fixed { step } if !(step > 0.0) => Err(Error::InvalidConfig("step must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub total: f64,
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub image: ImageBuffer,
    pub trace: Vec<TraceEntry>,
    pub term_labels: Vec<String>,
    pub converged: bool,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |t| t.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.total)
    }

    /// CSV with columns `iteration,total,<term labels...>`.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iteration".to_string(), "total".to_string()];
        header.extend(self.term_labels.iter().cloned());
        w.write_record(&header)?;
        for e in &self.trace {
            let mut row = vec![e.iteration.to_string(), format!("{:e}", e.total)];
            row.extend(e.terms.iter().map(|t| format!("{t:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Starting image: Gaussian noise in preprocessed space or a copy of
/// `content`.
pub fn init_image(
    mode: InitMode,
    height: usize,
    width: usize,
    seed: u64,
    noise_sigma: f64,
    content: Option<&ImageBuffer>,
) -> Result<ImageBuffer> {
    match mode {
        InitMode::Noise => {
            if !(noise_sigma >= 0.0) {
                return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, noise_sigma).unwrap();
            let pixels = Array3::from_shape_simple_fn((3, height, width), || normal.sample(&mut rng));
            ImageBuffer::from_pixels(pixels)
        }
        InitMode::Content => {
            let content =
                content.ok_or_else(|| Error::InvalidConfig("content initialisation needs an image".into()))?;
            if (content.height(), content.width()) != (height, width) {
                return Err(Error::ShapeMismatch {
                    what: "content image".into(),
                    expected: vec![height, width],
                    actual: vec![content.height(), content.width()],
                });
            }
            Ok(content.clone())
        }
    }
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Losses this far below the starting loss are at rounding level; failing
/// to decrease them further counts as convergence.
const NUMERICAL_FLOOR: f64 = 1e-12;

struct State {
    x: Array3<f64>,
    eval: Evaluation,
}

struct Run<'a> {
    b: &'a Backbone,
    obj: &'a Objective,
    bounds: Option<[(f64, f64); 3]>,
}

impl Run<'_> {
    fn project(&self, x: &mut Array3<f64>) {
        if let Some(bounds) = self.bounds {
            for (mut plane, (lo, hi)) in x.outer_iter_mut().zip(bounds) {
                plane.mapv_inplace(|v| v.clamp(lo, hi));
            }
        }
    }

    fn eval(&self, x: &Array3<f64>) -> Result<Evaluation> {
        self.obj.evaluate(self.b, x.view())
    }

    /// Backtracks from `step` along `dir` until the projected point satisfies
    /// the Armijo condition. `None` when no decreasing step is found.
    fn line_search(&self, cur: &State, dir: &Array3<f64>, mut step: f64) -> Result<Option<State>> {
        for _ in 0..MAX_BACKTRACKS {
            let mut x = cur.x.clone();
            x.scaled_add(step, dir);
            self.project(&mut x);
            let decrease = Zip::from(&x)
                .and(&cur.x)
                .and(&cur.eval.grad)
                .fold(0.0, |acc, a, b, g| acc + g * (a - b));
            if decrease >= 0.0 {
                // projection removed the whole step or the direction is not downhill
                if x == cur.x {
                    return Ok(None);
                }
                step *= 0.5;
                continue;
            }
            let eval = self.eval(&x)?;
            if eval.total <= cur.eval.total + ARMIJO_C1 * decrease {
                return Ok(Some(State { x, eval }));
            }
            step *= 0.5;
        }
        Ok(None)
    }
}

fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y)
}

fn max_abs(a: &Array3<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// L-BFGS two-loop recursion: returns `-H g`.
fn lbfgs_direction(g: &Array3<f64>, pairs: &VecDeque<(Array3<f64>, Array3<f64>, f64)>) -> Array3<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q *= gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        q.scaled_add(a - beta, s);
    }
    q.mapv_inplace(|v| -v);
    q
}

/// Minimises `obj` over image pixels.
///
/// On a non-finite loss or when no decreasing step exists, returns
/// [`Error::Optimization`] carrying the partial result.
pub fn optimize(b: &Backbone, obj: &Objective, cfg: &OptimizerConfig) -> Result<RunResult> {
    cfg.validate()?;
    obj.validate(b)?;
    let started = Instant::now();
    let (h, w) = obj.size();
    let init = init_image(cfg.init, h, w, cfg.seed, cfg.noise_sigma, obj.reference())?;
    let bounds = cfg.clamp_pixels.then(|| init.pixel_bounds());
    let run = Run { b, obj, bounds };

    let mut x = init.into_pixels();
    run.project(&mut x);
    let eval = run.eval(&x)?;
    let mut cur = State { x, eval };
    let mut trace = vec![TraceEntry {
        iteration: 0,
        total: cur.eval.total,
        terms: cur.eval.terms.clone(),
    }];

    let finish = |cur: State, trace: Vec<TraceEntry>, converged: bool| -> RunResult {
        let labels = obj.labels();
        let mut final_losses: BTreeMap<String, f64> =
            labels.iter().cloned().zip(cur.eval.terms.iter().copied()).collect();
        final_losses.insert("total".into(), cur.eval.total);
        let manifest = RunManifest {
            seeds: vec![cfg.seed],
            weights_checksum: b.checksum().map(str::to_string),
            objective: obj.describe(),
            optimizer: serde_json::to_value(cfg).unwrap(),
            initial_loss: trace[0].total,
            final_losses,
            iterations: trace.len() - 1,
            converged,
            wall_time_secs: started.elapsed().as_secs_f64(),
            ..RunManifest::default()
        };
        RunResult {
            image: ImageBuffer::from_pixels(cur.x).expect("optimised image keeps its shape"),
            trace,
            term_labels: labels,
            converged,
            manifest,
        }
    };

    if cur.eval.total == 0.0 || max_abs(&cur.eval.grad) == 0.0 {
        return Ok(finish(cur, trace, true));
    }

    let mut pairs: VecDeque<(Array3<f64>, Array3<f64>, f64)> = VecDeque::new();
    let mut fixed_step = match cfg.step_rule {
        StepRule::Fixed { step } => step,
        _ => 0.0,
    };
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let next = match cfg.step_rule {
            StepRule::Lbfgs { memory } => {
                let mut dir = lbfgs_direction(&cur.eval.grad, &pairs);
                let mut step = 1.0;
                if pairs.is_empty() || dot(&dir, &cur.eval.grad) >= 0.0 {
                    pairs.clear();
                    dir = cur.eval.grad.mapv(|v| -v);
                    step = cfg.initial_step / max_abs(&cur.eval.grad);
                }
                let mut found = run.line_search(&cur, &dir, step);
                if matches!(found, Ok(None)) && !pairs.is_empty() {
                    pairs.clear();
                    dir = cur.eval.grad.mapv(|v| -v);
                    found = run.line_search(&cur, &dir, cfg.initial_step / max_abs(&cur.eval.grad));
                }
                match found {
                    Ok(Some(next)) => {
                        let s = &next.x - &cur.x;
                        let y = &next.eval.grad - &cur.eval.grad;
                        let sy = dot(&s, &y);
                        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                            pairs.push_back((s, y, 1.0 / sy));
                            if pairs.len() > memory {
                                pairs.pop_front();
                            }
                        }
                        Ok(Some(next))
                    }
                    other => other,
                }
            }
            StepRule::Fixed { .. } => {
                let dir = cur.eval.grad.mapv(|v| -v);
                let mut result = Ok(None);
                for _ in 0..MAX_BACKTRACKS {
                    let mut x = cur.x.clone();
                    x.scaled_add(fixed_step, &dir);
                    run.project(&mut x);
                    match run.eval(&x) {
                        Ok(eval) if eval.total <= cur.eval.total => {
                            result = Ok(Some(State { x, eval }));
                            break;
                        }
                        Ok(_) => fixed_step *= 0.5,
                        Err(e) => {
                            result = Err(e);
                            break;
                        }
                    }
                }
                result
            }
        };

        let next = match next {
            Ok(Some(n)) => n,
            Ok(None) if cur.eval.total <= NUMERICAL_FLOOR * trace[0].total => {
                converged = true;
                break;
            }
            Ok(None) => {
                let partial = finish(cur, trace, false);
                return Err(Error::Optimization {
                    reason: format!("no decreasing step at iteration {iter}"),
                    partial: Box::new(partial),
                });
            }
            Err(e) => {
                let partial = finish(cur, trace, false);
                return Err(Error::Optimization {
                    reason: e.to_string(),
                    partial: Box::new(partial),
                });
            }
        };
        cur = next;
        trace.push(TraceEntry {
            iteration: iter,
            total: cur.eval.total,
            terms: cur.eval.terms.clone(),
        });
        if cur.eval.total == 0.0 || max_abs(&cur.eval.grad) == 0.0 {
            converged = true;
            break;
        }
        if iter >= cfg.window {
            let before = trace[iter - cfg.window].total;
            let change = (before - cur.eval.total).abs() / before.abs().max(f64::MIN_POSITIVE);
            if change < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    Ok(finish(cur, trace, converged))
}
