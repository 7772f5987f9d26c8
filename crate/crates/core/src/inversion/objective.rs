use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::code::Code;
use crate::codeops::{self, GramDescriptor, RealloVector, StyleDescriptor};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::layer::LayerId;

use super::priors::{l2_prior, l2_prior_grad, tv_prior, tv_prior_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    CodeMatch,
    StyleSum,
    GramMatch,
    TvPrior,
    L2Prior,
}

/// One weighted term of an objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `w ‖Φ_l(X) − target‖²_F`.
    CodeMatch {
        target: Code,
        weight: f64,
        /// Reallocation vector the target was built with, if any.
        realloc: Option<RealloVector>,
        /// Filter index the target was built for, if any.
        filter: Option<usize>,
    },
    /// `w ‖Φ_l(X)·1 − s‖²`, optionally with both sides divided by their
    /// spatial sizes.
    StyleSum {
        target: StyleDescriptor,
        weight: f64,
        normalize: bool,
    },
    /// `w ‖Φ_l(X) Φ_l(X)ᵀ − G‖²_F`, optionally with both Gram matrices
    /// divided by their spatial sizes.
    GramMatch {
        target: GramDescriptor,
        weight: f64,
        normalize: bool,
    },
    TvPrior {
        weight: f64,
    },
    L2Prior {
        weight: f64,
    },
}

impl Term {
    pub fn kind(&self) -> TermKind {
        match self {
            Term::CodeMatch { .. } => TermKind::CodeMatch,
            Term::StyleSum { .. } => TermKind::StyleSum,
            Term::GramMatch { .. } => TermKind::GramMatch,
            Term::TvPrior { .. } => TermKind::TvPrior,
            Term::L2Prior { .. } => TermKind::L2Prior,
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            Term::CodeMatch { weight, .. }
            | Term::StyleSum { weight, .. }
            | Term::GramMatch { weight, .. }
            | Term::TvPrior { weight }
            | Term::L2Prior { weight } => *weight,
        }
    }

    pub fn layer(&self) -> Option<LayerId> {
        match self {
            Term::CodeMatch { target, .. } => Some(target.layer()),
            Term::StyleSum { target, .. } => Some(target.layer),
            Term::GramMatch { target, .. } => Some(target.layer),
            _ => None,
        }
    }

    pub fn is_prior(&self) -> bool {
        matches!(self, Term::TvPrior { .. } | Term::L2Prior { .. })
    }

    /// Column label used in loss traces, e.g. `style_sum@relu3_1`.
    pub fn label(&self) -> String {
        let kind = match self.kind() {
            TermKind::CodeMatch => "code_match",
            TermKind::StyleSum => "style_sum",
            TermKind::GramMatch => "gram_match",
            TermKind::TvPrior => "tv_prior",
            TermKind::L2Prior => "l2_prior",
        };
        match self.layer() {
            Some(l) => format!("{kind}@{l}"),
            None => kind.to_string(),
        }
    }

    /// Value and gradient with respect to the layer code.
    fn code_loss(&self, code: ArrayView3<f64>) -> (f64, Array3<f64>) {
        match self {
            Term::CodeMatch { target, weight, .. } => {
                let diff = &code - target.values();
                let loss = weight * diff.iter().map(|d| d * d).sum::<f64>();
                (loss, diff * (2.0 * weight))
            }
            Term::StyleSum {
                target,
                weight,
                normalize,
            } => {
                let (_, m, n) = code.dim();
                let scale = if *normalize { 1.0 / (m * n) as f64 } else { 1.0 };
                let goal = if *normalize {
                    target.normalized()
                } else {
                    target.sums.clone()
                };
                let resid: Vec<f64> = code
                    .outer_iter()
                    .zip(&goal)
                    .map(|(ch, g)| ch.sum() * scale - g)
                    .collect();
                let loss = weight * resid.iter().map(|r| r * r).sum::<f64>();
                let mut grad = Array3::zeros(code.dim());
                for (mut ch, r) in grad.outer_iter_mut().zip(&resid) {
                    ch.fill(2.0 * weight * r * scale);
                }
                (loss, grad)
            }
            Term::GramMatch {
                target,
                weight,
                normalize,
            } => {
                let (c, m, n) = code.dim();
                let scale = if *normalize { 1.0 / (m * n) as f64 } else { 1.0 };
                let target_scale = if *normalize {
                    1.0 / target.spatial_size.max(1) as f64
                } else {
                    1.0
                };
                let flat = code
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c, m * n))
                    .unwrap();
                let mut diff = flat.dot(&flat.t()) * scale;
                diff.scaled_add(-target_scale, &target.matrix);
                let loss = weight * diff.iter().map(|d| d * d).sum::<f64>();
                let grad = diff.dot(&flat) * (4.0 * weight * scale);
                (loss, grad.into_shape_with_order((c, m, n)).unwrap())
            }
            Term::TvPrior { .. } | Term::L2Prior { .. } => unreachable!("priors act on pixels"),
        }
    }

    fn expected_channels(&self) -> Option<usize> {
        match self {
            Term::CodeMatch { target, .. } => Some(target.channels()),
            Term::StyleSum { target, .. } => Some(target.sums.len()),
            Term::GramMatch { target, .. } => Some(target.matrix.nrows()),
            _ => None,
        }
    }
}

/// Natural-image prior weights appended to every objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub tv: f64,
    pub l2: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self { tv: 1e-4, l2: 0.0 }
    }
}

impl Priors {
    pub fn none() -> Self {
        Self { tv: 0.0, l2: 0.0 }
    }

    fn terms(&self) -> Vec<Term> {
        let mut out = Vec::new();
        if self.tv > 0.0 {
            out.push(Term::TvPrior { weight: self.tv });
        }
        if self.l2 > 0.0 {
            out.push(Term::L2Prior { weight: self.l2 });
        }
        out
    }
}

/// Loss value, per-term breakdown and pixel gradient at one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub terms: Vec<f64>,
    pub grad: Array3<f64>,
}

/// A weighted sum of code-matching terms and image priors over an image of
/// fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    terms: Vec<Term>,
    height: usize,
    width: usize,
    reference: Option<ImageBuffer>,
}

impl Objective {
    /// `reference` is the image used for content initialisation, if any.
    pub fn new(terms: Vec<Term>, height: usize, width: usize, reference: Option<ImageBuffer>) -> Result<Self> {
        if !terms.iter().any(|t| !t.is_prior()) {
            return Err(Error::InvalidObjective("needs at least one non-prior term".into()));
        }
        if let Some(t) = terms.iter().find(|t| !(t.weight().is_finite() && t.weight() >= 0.0)) {
            return Err(Error::InvalidObjective(format!(
                "{} has invalid weight {}",
                t.label(),
                t.weight()
            )));
        }
        if let Some(r) = &reference {
            if (r.height(), r.width()) != (height, width) {
                return Err(Error::ShapeMismatch {
                    what: "reference image".into(),
                    expected: vec![height, width],
                    actual: vec![r.height(), r.width()],
                });
            }
        }
        Ok(Self {
            terms,
            height,
            width,
            reference,
        })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(Term::label).collect()
    }

    /// `(height, width)` of the image being optimised.
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn reference(&self) -> Option<&ImageBuffer> {
        self.reference.as_ref()
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.terms
            .iter()
            .filter_map(Term::layer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks every target against the backbone's shapes for this size.
    pub fn validate(&self, b: &Backbone) -> Result<()> {
        for term in &self.terms {
            let Some(layer) = term.layer() else { continue };
            let (c, m, n) = b.output_shape(layer, self.height, self.width)?;
            if term.expected_channels() != Some(c) {
                return Err(Error::ShapeMismatch {
                    what: format!("{} target channels", term.label()),
                    expected: vec![c],
                    actual: vec![term.expected_channels().unwrap_or(0)],
                });
            }
            if let Term::CodeMatch { target, .. } = term {
                if target.shape() != (c, m, n) {
                    let (tc, tm, tn) = target.shape();
                    return Err(Error::ShapeMismatch {
                        what: format!("{} target", term.label()),
                        expected: vec![c, m, n],
                        actual: vec![tc, tm, tn],
                    });
                }
            }
        }
        Ok(())
    }

    /// Total loss, per-term losses and gradient with respect to `x`.
    pub fn evaluate(&self, b: &Backbone, x: ArrayView3<f64>) -> Result<Evaluation> {
        let (_, h, w) = x.dim();
        if (h, w) != (self.height, self.width) {
            return Err(Error::ShapeMismatch {
                what: "image for objective".into(),
                expected: vec![self.height, self.width],
                actual: vec![h, w],
            });
        }
        let mut per_term = vec![0.0; self.terms.len()];
        let layers = self.layers();
        let (data_loss, mut grad) = b.value_and_grad(x.view(), &layers, |codes| {
            let mut total = 0.0;
            let mut grads: BTreeMap<LayerId, Array3<f64>> = BTreeMap::new();
            for (i, term) in self.terms.iter().enumerate() {
                let Some(layer) = term.layer() else { continue };
                let (loss, g) = term.code_loss(codes[&layer].view());
                per_term[i] = loss;
                total += loss;
                match grads.get_mut(&layer) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(layer, g);
                    }
                }
            }
            Ok((total, grads))
        })?;
        let mut total = data_loss;
        for (i, term) in self.terms.iter().enumerate() {
            match term {
                Term::TvPrior { weight } => {
                    per_term[i] = weight * tv_prior(x.view());
                    grad.scaled_add(*weight, &tv_prior_grad(x.view()));
                }
                Term::L2Prior { weight } => {
                    per_term[i] = weight * l2_prior(x.view());
                    grad.scaled_add(*weight, &l2_prior_grad(x.view()));
                }
                _ => continue,
            }
            total += per_term[i];
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(Evaluation {
            total,
            terms: per_term,
            grad,
        })
    }

    /// Loss only; shares the evaluation path with [`Objective::evaluate`].
    pub fn value(&self, b: &Backbone, x: ArrayView3<f64>) -> Result<f64> {
        Ok(self.evaluate(b, x)?.total)
    }

    /// JSON summary of the terms and their payloads, for manifests.
    pub fn describe(&self) -> serde_json::Value {
        let terms: Vec<serde_json::Value> = self
            .terms
            .iter()
            .map(|t| {
                let mut v = serde_json::json!({
                    "kind": t.kind(),
                    "label": t.label(),
                    "weight": t.weight(),
                });
                match t {
                    Term::CodeMatch {
                        target,
                        realloc,
                        filter,
                        ..
                    } => {
                        v["layer"] = serde_json::json!(target.layer());
                        v["target_source"] = serde_json::json!(target.source());
                        if let Some(f) = filter {
                            v["filter"] = serde_json::json!(f);
                        }
                        if let Some(r) = realloc {
                            v["realloc"] = serde_json::to_value(r).unwrap();
                        }
                    }
                    Term::StyleSum { target, normalize, .. } => {
                        v["descriptor"] = serde_json::to_value(target).unwrap();
                        v["normalize"] = serde_json::json!(normalize);
                    }
                    Term::GramMatch { target, normalize, .. } => {
                        v["descriptor"] = serde_json::to_value(target).unwrap();
                        v["normalize"] = serde_json::json!(normalize);
                    }
                    _ => {}
                }
                v
            })
            .collect();
        serde_json::json!({ "height": self.height, "width": self.width, "terms": terms })
    }
}

/// Loss and gradient of `obj` at `img`.
pub fn objective_gradient(b: &Backbone, img: &ImageBuffer, obj: &Objective) -> Result<(f64, Array3<f64>)> {
    let e = obj.evaluate(b, img.pixels().view())?;
    Ok((e.total, e.grad))
}

fn require_relu(layer: LayerId) -> Result<()> {
    if !layer.is_relu() {
        return Err(Error::NotRelu {
            layer: layer.to_string(),
        });
    }
    Ok(())
}

fn single_code(b: &Backbone, img: &ImageBuffer, layer: LayerId, source: &str) -> Result<Code> {
    let mut codes = b.extract_codes_tagged(img, &[layer], source)?;
    Ok(codes.remove(&layer).unwrap())
}

/// Code inversion towards the FMI-modified code of filter `l` at `layer`.
pub fn build_fmi_objective(
    b: &Backbone,
    img: &ImageBuffer,
    layer: LayerId,
    l: usize,
    priors: Priors,
) -> Result<Objective> {
    require_relu(layer)?;
    let code = single_code(b, img, layer, "image")?;
    let target = codeops::fmi_modify(&code, l)?;
    let mut terms = vec![Term::CodeMatch {
        target,
        weight: 1.0,
        realloc: None,
        filter: Some(l),
    }];
    terms.extend(priors.terms());
    Objective::new(terms, img.height(), img.width(), Some(img.clone()))
}

/// Code inversion towards the code reallocated with `v`.
pub fn build_random_objective(
    b: &Backbone,
    img: &ImageBuffer,
    layer: LayerId,
    v: &RealloVector,
    priors: Priors,
) -> Result<Objective> {
    require_relu(layer)?;
    let code = single_code(b, img, layer, "image")?;
    let realloc = codeops::random_reallocate(&code, v)?;
    let mut terms = vec![Term::CodeMatch {
        target: realloc.code,
        weight: 1.0,
        realloc: Some(v.clone()),
        filter: None,
    }];
    terms.extend(priors.terms());
    Objective::new(terms, img.height(), img.width(), Some(img.clone()))
}

/// Layers and weights of a content + style objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSetup {
    pub content_layer: LayerId,
    pub style_layers: Vec<LayerId>,
    pub alpha: f64,
    pub beta: f64,
    /// Divide style statistics by the spatial size they were taken over.
    pub normalize: bool,
}

impl Default for StyleSetup {
    /// Content at `relu2_2`, style at `relu1_1`…`relu5_1`, α = 10, β = 1.
    fn default() -> Self {
        Self {
            content_layer: LayerId::relu(2, 2).unwrap(),
            style_layers: (1..=5).map(|b| LayerId::relu(b, 1).unwrap()).collect(),
            alpha: 10.0,
            beta: 1.0,
            normalize: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum StyleStat {
    ChannelSum,
    Gram,
}

fn build_style_objective(
    b: &Backbone,
    content: &ImageBuffer,
    style: &ImageBuffer,
    setup: &StyleSetup,
    priors: Priors,
    stat: StyleStat,
) -> Result<Objective> {
    if !(setup.alpha >= 0.0 && setup.beta >= 0.0) {
        return Err(Error::InvalidObjective("alpha and beta must be non-negative".into()));
    }
    if setup.style_layers.is_empty() {
        return Err(Error::InvalidObjective("no style layers".into()));
    }
    let mut terms = Vec::new();
    if setup.alpha > 0.0 {
        let target = single_code(b, content, setup.content_layer, "content")?;
        terms.push(Term::CodeMatch {
            target,
            weight: setup.alpha,
            realloc: None,
            filter: None,
        });
    }
    if setup.beta > 0.0 {
        let codes = b.extract_codes_tagged(style, &setup.style_layers, "style")?;
        let per_layer = setup.beta / setup.style_layers.len() as f64;
        for layer in &setup.style_layers {
            let code = &codes[layer];
            terms.push(match stat {
                StyleStat::ChannelSum => Term::StyleSum {
                    target: codeops::style_descriptor(code),
                    weight: per_layer,
                    normalize: setup.normalize,
                },
                StyleStat::Gram => Term::GramMatch {
                    target: codeops::gram_descriptor(code),
                    weight: per_layer,
                    normalize: setup.normalize,
                },
            });
        }
    } else {
        // still reject a style image the style layers cannot take
        for layer in &setup.style_layers {
            let min = b.min_input_side(*layer)?;
            if style.height() < min || style.width() < min {
                return Err(Error::ImageTooSmall {
                    layer: layer.to_string(),
                    height: style.height(),
                    width: style.width(),
                    min,
                });
            }
        }
    }
    terms.extend(priors.terms());
    let obj = Objective::new(terms, content.height(), content.width(), Some(content.clone()))?;
    obj.validate(b)?;
    Ok(obj)
}

/// Content code match plus channel-sum style match.
pub fn build_pmci_objective(
    b: &Backbone,
    content: &ImageBuffer,
    style: &ImageBuffer,
    setup: &StyleSetup,
    priors: Priors,
) -> Result<Objective> {
    build_style_objective(b, content, style, setup, priors, StyleStat::ChannelSum)
}

/// Content code match plus Gram matrix style match (the baseline).
pub fn build_gram_objective(
    b: &Backbone,
    content: &ImageBuffer,
    style: &ImageBuffer,
    setup: &StyleSetup,
    priors: Priors,
) -> Result<Objective> {
    build_style_objective(b, content, style, setup, priors, StyleStat::Gram)
}

/// Squared distance between the channel sums of `x` at `layer` and `target`.
pub fn style_distance(b: &Backbone, x: &ImageBuffer, target: &StyleDescriptor) -> Result<f64> {
    let code = single_code(b, x, target.layer, "probe")?;
    let sums = codeops::style_descriptor(&code).sums;
    Ok(sums.iter().zip(&target.sums).map(|(a, t)| (a - t) * (a - t)).sum())
}
