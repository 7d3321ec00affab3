//! Finite-difference verification of every traced block.
//!
//! Each check draws a small random configuration (non-square widths,
//! Xavier weights, Gaussian inputs), differentiates a scalar function of the
//! block's inputs and parameters, and compares against fourth-order central
//! differences. Configurations whose ReLU or clamp inputs sit within
//! `min_kink_margin` of the kink, or whose stencil crosses one, are redrawn,
//! since the difference quotient does not estimate a derivative there.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{FdCheck, FdOutcome, NodeId, OpKind, Stencil, Tape};
use crate::data::{generate_scene, build_vocabulary, GroupSpec, SceneParams};
use crate::error::{Error, Result};
use crate::layers::{
    CAParams, ClassifierParams, FusionParams, LinearParams, Neighborhood, Parameters,
    ResCAGCNDims, ResCAGCNParams,
};
use crate::loss::{
    cross_entropy_traced, draw_noise, entropy_margin_traced, relation_loss_traced, uncertainty_ce_traced, LossConfig,
};
use crate::pum::{entropy_traced, reparameterize_traced, PumHeadParams};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{ModelDims, RelationModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Step of the fourth-order central stencil.
    pub eps: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    pub min_kink_margin: f64,
    /// Negates one derivative rule; used to confirm the suite can fail.
    #[serde(skip)]
    pub sign_flip: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            eps: 3e-4,
            tolerance: 1e-4,
            min_kink_margin: 1e-2,
            sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    /// Configurations redrawn because they sat near a kink.
    pub redrawn: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_error).fold(0.0, f64::max)
    }

    /// One line per check followed by an overall verdict.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<24} {} trials={} redrawn={} max_rel_err={:.3e}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.trials,
                r.redrawn,
                r.max_error
            );
        }
        let _ = writeln!(
            out,
            "overall {} (tolerance {:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        );
        out
    }
}

type TracedFn = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// One random configuration: the differentiated tensors and the function.
struct Trial {
    xs: Vec<Tensor>,
    f: TracedFn,
}

type TrialBuilder = fn(&mut RngState) -> Trial;

/// Names of the checks, in the order they run.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

const CHECKS: [(&str, TrialBuilder); 14] = [
    ("linear", linear_trial),
    ("fusion", fusion_trial),
    ("cross_attention", cross_attention_trial),
    ("contextual_coefficient", coefficient_trial),
    ("rescagcn_update", rescagcn_trial),
    ("classifier", classifier_trial),
    ("gaussian_head", head_trial),
    ("reparameterize", reparameterize_trial),
    ("predict_averaged", averaged_trial),
    ("cross_entropy", cross_entropy_trial),
    ("uncertainty_ce", uncertainty_ce_trial),
    ("entropy_margin", entropy_margin_trial),
    ("relation_loss", relation_loss_trial),
    ("model_scene_loss", model_trial),
];

/// Runs every check for `cfg.trials` configurations.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    run_checks(cfg, &check_names())
}

/// Runs the named checks only.
pub fn run_checks(cfg: &GradCheckConfig, names: &[&str]) -> Result<GradCheckReport> {
    let table: BTreeMap<&str, TrialBuilder> = CHECKS.iter().copied().collect();
    let fd = FdCheck::new(cfg.eps)
        .with_stencil(Stencil::FourPoint)
        .with_sign_flip(cfg.sign_flip);
    let mut results = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let build = table
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown gradient check '{name}'")))?;
        let mut rng = RngState::stream(cfg.seed, idx as u64);
        let (mut max_error, mut redrawn) = (0.0f64, 0usize);
        let mut done = 0;
        while done < cfg.trials {
            let trial = draw_trial(*build, &mut rng, cfg.min_kink_margin, &mut redrawn)?;
            let err = match fd.run_outcome(&trial.f, &trial.xs) {
                FdOutcome::Checked(err) => err,
                FdOutcome::KinkCrossed => {
                    redrawn += 1;
                    if redrawn > MAX_DRAWS {
                        return Err(Error::Contract(format!("{name}: too many configurations near kinks")));
                    }
                    continue;
                }
                FdOutcome::Failed => f64::INFINITY,
            };
            max_error = max_error.max(err);
            done += 1;
        }
        results.push(CheckResult {
            name: name.to_string(),
            trials: cfg.trials,
            redrawn,
            max_error,
            passed: max_error < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        results,
    })
}

const MAX_DRAWS: usize = 1000;

fn draw_trial(build: TrialBuilder, rng: &mut RngState, min_margin: f64, redrawn: &mut usize) -> Result<Trial> {
    for _ in 0..MAX_DRAWS {
        let trial = build(rng);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = trial.xs.iter().map(|x| tape.leaf(x.clone())).collect();
        if (trial.f)(&mut tape, &ids).is_ok() && tape.kink_margin() >= min_margin {
            return Ok(trial);
        }
        *redrawn += 1;
    }
    Err(Error::Contract(format!(
        "no configuration away from kinks after {MAX_DRAWS} draws"
    )))
}

fn dim(rng: &mut RngState) -> usize {
    2 + rng.below(3)
}

fn randn(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normals(n))
}

/// Fills every parameter (biases included) with `N(0, s^2)` noise so that no
/// gradient is trivially zero.
/// Standard deviation of redrawn weights. Larger weights push the stacked
/// products in the graph layers into ranges where the stencil's truncation
/// error dominates.
const PARAM_SCALE: f64 = 0.3;

fn jitter<P: Parameters>(p: &mut P, rng: &mut RngState, s: f64) {
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = s * rng.normal());
    }
}

fn params_of<P: Parameters>(p: &P) -> Vec<Tensor> {
    p.tensors().into_iter().cloned().collect()
}

/// Scale applied to every checked output. Some coordinates have a gradient
/// that is exactly zero (a shift ahead of a layer norm), and their numeric
/// estimate is pure roundoff proportional to the output magnitude, judged
/// against an absolute floor of 1e-8.
const OUTPUT_SCALE: f64 = 0.1;

/// `Σ out ⊙ w` for a fixed random `w`, turning a vector output into a scalar.
fn project(tape: &mut Tape, out: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = tape.leaf(Tensor::from_parts(w.shape().to_vec(), w.data().iter().map(|v| OUTPUT_SCALE * v).collect()));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Positive variances in `(0.2, 2)`.
fn variances(rng: &mut RngState, d: usize) -> Tensor {
    Tensor::from_parts(vec![d], (0..d).map(|_| rng.uniform_range(0.2, 2.0)).collect())
}

fn linear_trial(rng: &mut RngState) -> Trial {
    let (i, o) = (dim(rng), dim(rng) + 1);
    let mut p = LinearParams::zeros(i, o, true);
    jitter(&mut p, rng, 0.7);
    let w = randn(rng, &[o]);
    let mut xs = vec![randn(rng, &[i])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[1..])?;
            let y = vars.forward(tape, ids[0])?;
            project(tape, y, &w)
        }),
    }
}

fn fusion_trial(rng: &mut RngState) -> Trial {
    let (dx, dy, o) = (dim(rng), dim(rng) + 1, dim(rng));
    let mut p = FusionParams::init(dx, dy, o, rng);
    jitter(&mut p, rng, 0.7);
    let w = randn(rng, &[o]);
    let mut xs = vec![randn(rng, &[dx]), randn(rng, &[dy])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[2..])?;
            let y = vars.forward(tape, ids[0], ids[1])?;
            project(tape, y, &w)
        }),
    }
}

fn cross_attention_trial(rng: &mut RngState) -> Trial {
    let (di, dj, o) = (dim(rng), dim(rng) + 1, dim(rng));
    let mut p = CAParams::init(di, dj, o, rng);
    jitter(&mut p, rng, 0.7);
    let w = randn(rng, &[o]);
    let mut xs = vec![randn(rng, &[di]), randn(rng, &[dj])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[2..])?;
            let y = vars.forward(tape, ids[0], ids[1])?;
            project(tape, y, &w)
        }),
    }
}

fn gcn_params(rng: &mut RngState) -> ResCAGCNParams {
    let dims = ResCAGCNDims {
        feature: dim(rng),
        union: dim(rng) + 1,
        ca: dim(rng),
        message: dim(rng),
        // Layer norm over two entries is nearly constant, which starves
        // every upstream gradient.
        hidden: dim(rng) + 1,
    };
    let mut p = ResCAGCNParams::init(dims, rng);
    jitter(&mut p, rng, PARAM_SCALE);
    p
}

fn coefficient_trial(rng: &mut RngState) -> Trial {
    let p = gcn_params(rng);
    let d = p.dims();
    let mut xs = vec![randn(rng, &[d.feature]), randn(rng, &[d.feature]), randn(rng, &[d.union])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[3..])?;
            vars.contextual_coefficient(tape, ids[0], ids[1], ids[2])
        }),
    }
}

fn rescagcn_trial(rng: &mut RngState) -> Trial {
    let p = gcn_params(rng);
    let d = p.dims();
    let n = 3;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut xs: Vec<Tensor> = (0..n).map(|_| randn(rng, &[d.feature])).collect();
    xs.extend(pairs.iter().map(|_| randn(rng, &[d.union])));
    let n_inputs = xs.len();
    xs.extend(params_of(&p));
    let ws: Vec<Tensor> = (0..n).map(|_| randn(rng, &[d.feature])).collect();
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[n_inputs..])?;
            let unions = pairs.iter().copied().zip(ids[n..n_inputs].iter().copied()).collect();
            let out = vars.update(tape, &ids[..n], &unions, &Neighborhood::Full)?;
            let mut total = project(tape, out[0], &ws[0])?;
            for (o, w) in out.iter().zip(&ws).skip(1) {
                let t = project(tape, *o, w)?;
                total = tape.add(total, t)?;
            }
            Ok(total)
        }),
    }
}

fn classifier_params(rng: &mut RngState, z: usize) -> ClassifierParams {
    let mut p = ClassifierParams::init(z, dim(rng) + 1, rng);
    jitter(&mut p, rng, 0.7);
    p
}

fn classifier_trial(rng: &mut RngState) -> Trial {
    let z = dim(rng);
    let p = classifier_params(rng, z);
    let w = randn(rng, &[p.num_classes()]);
    let mut xs = vec![randn(rng, &[z])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[1..])?;
            let probs = vars.forward(tape, ids[0])?;
            project(tape, probs, &w)
        }),
    }
}

fn head_trial(rng: &mut RngState) -> Trial {
    let (i, z) = (dim(rng) + 1, dim(rng));
    let mut p = PumHeadParams::init(i, z, 1e-6, rng);
    jitter(&mut p, rng, 0.7);
    let (wm, ws) = (randn(rng, &[z]), randn(rng, &[z]));
    let mut xs = vec![randn(rng, &[i])];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[1..])?;
            let (mu, sigma2) = vars.forward(tape, ids[0])?;
            let a = project(tape, mu, &wm)?;
            let b = project(tape, sigma2, &ws)?;
            tape.add(a, b)
        }),
    }
}

fn reparameterize_trial(rng: &mut RngState) -> Trial {
    let z = dim(rng);
    let eps = randn(rng, &[z]);
    let w = randn(rng, &[z]);
    Trial {
        xs: vec![randn(rng, &[z]), variances(rng, z)],
        f: Box::new(move |tape, ids| {
            let s = reparameterize_traced(tape, ids[0], ids[1], eps.clone())?;
            project(tape, s, &w)
        }),
    }
}

fn averaged_trial(rng: &mut RngState) -> Trial {
    let z = dim(rng);
    let p = classifier_params(rng, z);
    let k = 1 + rng.below(4);
    let noise = draw_noise(rng, k, z);
    let w = randn(rng, &[p.num_classes()]);
    let mut xs = vec![randn(rng, &[z]), variances(rng, z)];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[2..])?;
            let mut acc: Option<NodeId> = None;
            for eps in &noise {
                let s = reparameterize_traced(tape, ids[0], ids[1], eps.clone())?;
                let probs = vars.forward(tape, s)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, probs)?,
                    None => probs,
                });
            }
            let mean = tape.scale_by(1.0 / noise.len() as f64, acc.expect("k >= 1"))?;
            project(tape, mean, &w)
        }),
    }
}

fn cross_entropy_trial(rng: &mut RngState) -> Trial {
    let c = dim(rng) + 1;
    let label = rng.below(c);
    Trial {
        xs: vec![randn(rng, &[c])],
        f: Box::new(move |tape, ids| {
            let probs = tape.softmax(ids[0])?;
            cross_entropy_traced(tape, probs, label)
        }),
    }
}

fn uncertainty_ce_trial(rng: &mut RngState) -> Trial {
    let z = dim(rng);
    let p = classifier_params(rng, z);
    let label = rng.below(p.num_classes());
    let lambda = rng.uniform();
    let n = 1 + rng.below(3);
    let noise = draw_noise(rng, n, z);
    let mut xs = vec![randn(rng, &[z]), variances(rng, z)];
    xs.extend(params_of(&p));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let vars = p.attach(tape, &ids[2..])?;
            uncertainty_ce_traced(tape, ids[0], ids[1], &vars, label, lambda, &noise)
        }),
    }
}

fn entropy_margin_trial(rng: &mut RngState) -> Trial {
    let z = dim(rng);
    let s2 = variances(rng, z);
    // Margins on both sides of the current entropy.
    let gamma = {
        let mut t = Tape::new();
        let id = t.leaf(s2.clone());
        let h = entropy_traced(&mut t, id).map(|h| t.value(h).data()[0]).unwrap_or(0.0);
        h + rng.uniform_range(-1.0, 2.0)
    };
    Trial {
        xs: vec![s2],
        f: Box::new(move |tape, ids| entropy_margin_traced(tape, ids[0], gamma).map(|(reg, _)| reg)),
    }
}

fn relation_loss_trial(rng: &mut RngState) -> Trial {
    let (i, z) = (dim(rng) + 1, dim(rng));
    let mut head = PumHeadParams::init(i, z, 1e-6, rng);
    jitter(&mut head, rng, 0.5);
    let cls = classifier_params(rng, z);
    let label = rng.below(cls.num_classes());
    let cfg = LossConfig {
        lambda: rng.uniform(),
        gamma: z as f64 * rng.uniform_range(0.5, 2.0),
        alpha: rng.uniform_range(0.01, 1.0),
        n_train_samples: 1 + rng.below(3),
    };
    let noise = draw_noise(rng, cfg.n_train_samples, z);
    let mut xs = vec![randn(rng, &[i])];
    xs.extend(params_of(&head));
    let n_head = head.tensors().len();
    xs.extend(params_of(&cls));
    Trial {
        xs,
        f: Box::new(move |tape, ids| {
            let hv = head.attach(tape, &ids[1..1 + n_head])?;
            let cv = cls.attach(tape, &ids[1 + n_head..])?;
            let (mu, sigma2) = hv.forward(tape, ids[0])?;
            relation_loss_traced(tape, mu, sigma2, &cv, label, &cfg, &noise).map(|l| l.total)
        }),
    }
}

fn model_trial(rng: &mut RngState) -> Trial {
    let d = dim(rng) + 1;
    let classes = 3;
    let vocab = build_vocabulary(classes, 1.0, GroupSpec::default(), rng).expect("valid vocabulary");
    let scene = generate_scene(
        &vocab,
        &SceneParams {
            n_objects: 2,
            relations: 2,
            feature_dim: d,
            noise_scale: 0.5,
        },
        rng,
    )
    .expect("valid scene");
    let dims = ModelDims {
        feature: d,
        union: d,
        ca: 2,
        message: 2,
        hidden: 3,
        fused: 3,
        latent: 2,
        num_classes: classes,
    };
    let mut model = RelationModel::init(&dims, true, 1e-6, rng);
    jitter(&mut model, rng, PARAM_SCALE);
    let loss = LossConfig {
        lambda: 0.5,
        gamma: 5.0,
        alpha: 0.1,
        n_train_samples: 2,
    };
    let noise_seed = rng.next_u64();
    Trial {
        xs: params_of(&model),
        f: Box::new(move |tape, ids| {
            let l = model.scene_loss_at(tape, ids, &scene, &loss, noise_seed)?;
            tape.scale_by(OUTPUT_SCALE, l)
        }),
    }
}
