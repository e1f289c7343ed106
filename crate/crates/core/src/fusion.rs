//! The query-side model and entity-side encoding.
//!
//! Every modality embedding is first projected into the shared space with
//! `tanh(x W + b)`. The mention then attends over the sentence (text unit)
//! and over object rows, face-prompt rows and identity-prompt rows (one shared
//! visual unit). The unit outputs are combined as
//!
//! ```text
//! g_m = m + m_t + m_v
//! g   = [ (1 - eps) g_m , eps (m_f + m_s) ] W_g + b_g,   eps = sigmoid(gate_logit)
//! ```
//!
//! where `[a, b]` is column concatenation, so `W_g` is `2d x d_m`. With
//! `W_g = [I; I]` this is the scalar mix `(1 - eps) g_m + eps (m_f + m_s)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mention,
    Text,
    Image,
    Object,
    Face,
    Identity,
    Entity,
}

impl Modality {
    pub const ALL: [Modality; 7] =
        [Modality::Mention, Modality::Text, Modality::Image, Modality::Object, Modality::Face, Modality::Identity, Modality::Entity];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Mention => "mention",
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Object => "object",
            Modality::Face => "face",
            Modality::Identity => "identity",
            Modality::Entity => "entity",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitTag {
    SharedVisual,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of the encoder outputs in the feature store.
    pub d_in: usize,
    /// Shared space width; also the width of the joint query.
    pub d: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::Config("dimensions and head count must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub modality: Modality,
    /// `d_in x d`.
    pub weight: Matrix,
    /// `1 x d`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub unit: UnitTag,
    pub heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `2d x d`.
    pub w_g: Matrix,
    /// `1 x d`.
    pub b_g: Matrix,
    /// `1 x 1`; the mixing weight is `sigmoid(gate_logit)`.
    pub gate_logit: Matrix,
}

impl GateParams {
    pub fn epsilon(&self) -> f64 {
        crate::autograd::sigmoid(self.gate_logit.get(0, 0))
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Indexed by [`Modality`] declaration order.
    pub projections: Vec<ProjectionParams>,
    pub visual: AttentionParams,
    pub text: AttentionParams,
    pub gate: GateParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of the perturbation added to the identity-like
    /// starting point of every weight matrix, scaled by `1/sqrt(fan_in)`.
    pub noise: f64,
    pub gate_logit: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { noise: 0.02, gate_logit: -2.0 }
    }
}

/// `rows x cols` with ones on the main diagonal.
fn rect_identity(rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows.min(cols) {
        m.set(i, i, 1.0);
    }
    m
}

fn perturbed(base: Matrix, noise: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if noise == 0.0 {
        return base;
    }
    let normal = Normal::new(0.0, noise / (base.rows() as f64).sqrt()).expect("finite std");
    let mut m = base;
    for v in m.data_mut() {
        *v += normal.sample(rng);
    }
    m
}

impl ModelParams {
    pub fn init(dims: ModelDims, init: InitConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d) = (dims.d_in, dims.d);
        let projections = Modality::ALL
            .iter()
            .map(|&modality| ProjectionParams {
                modality,
                weight: perturbed(rect_identity(d_in, d), init.noise, &mut rng),
                bias: Matrix::zeros(1, d),
            })
            .collect();
        let mut unit = |tag| AttentionParams {
            unit: tag,
            heads: dims.heads,
            w_q: perturbed(Matrix::identity(d), init.noise, &mut rng),
            w_k: perturbed(Matrix::identity(d), init.noise, &mut rng),
            w_v: perturbed(Matrix::identity(d), init.noise, &mut rng),
            w_o: perturbed(Matrix::identity(d), init.noise, &mut rng),
        };
        let visual = unit(UnitTag::SharedVisual);
        let text = unit(UnitTag::Text);
        let mut stacked = Matrix::zeros(2 * d, d);
        for i in 0..d {
            stacked.set(i, i, 1.0);
            stacked.set(d + i, i, 1.0);
        }
        let gate = GateParams {
            w_g: perturbed(stacked, init.noise, &mut rng),
            b_g: Matrix::zeros(1, d),
            gate_logit: Matrix::filled(1, 1, init.gate_logit),
        };
        Ok(Self { dims, projections, visual, text, gate })
    }

    pub fn projection(&self, m: Modality) -> &ProjectionParams {
        &self.projections[m.index()]
    }

    /// Stable names and references for every tensor, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for p in &self.projections {
            out.push((format!("proj.{}.weight", p.modality.name()), &p.weight));
            out.push((format!("proj.{}.bias", p.modality.name()), &p.bias));
        }
        for (tag, u) in [("shared_visual", &self.visual), ("text", &self.text)] {
            out.push((format!("att.{tag}.w_q"), &u.w_q));
            out.push((format!("att.{tag}.w_k"), &u.w_k));
            out.push((format!("att.{tag}.w_v"), &u.w_v));
            out.push((format!("att.{tag}.w_o"), &u.w_o));
        }
        out.push(("gate.w_g".into(), &self.gate.w_g));
        out.push(("gate.b_g".into(), &self.gate.b_g));
        out.push(("gate.logit".into(), &self.gate.gate_logit));
        out
    }

    /// Mutable references in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for p in &mut self.projections {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        for u in [&mut self.visual, &mut self.text] {
            out.push(&mut u.w_q);
            out.push(&mut u.w_k);
            out.push(&mut u.w_v);
            out.push(&mut u.w_o);
        }
        out.push(&mut self.gate.w_g);
        out.push(&mut self.gate.b_g);
        out.push(&mut self.gate.gate_logit);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> ModelVars {
        let projections = self.projections.iter().map(|p| ProjectionVars { weight: g.param(&p.weight), bias: g.param(&p.bias) }).collect();
        let mut unit = |u: &'a AttentionParams| AttentionVars {
            heads: u.heads,
            w_q: g.param(&u.w_q),
            w_k: g.param(&u.w_k),
            w_v: g.param(&u.w_v),
            w_o: g.param(&u.w_o),
        };
        let visual = unit(&self.visual);
        let text = unit(&self.text);
        let gate = GateVars { w_g: g.param(&self.gate.w_g), b_g: g.param(&self.gate.b_g), logit: g.param(&self.gate.gate_logit) };
        ModelVars { projections, visual, text, gate }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_g: Var,
    pub b_g: Var,
    pub logit: Var,
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    projections: Vec<ProjectionVars>,
    pub visual: AttentionVars,
    pub text: AttentionVars,
    pub gate: GateVars,
}

impl ModelVars {
    pub fn projection(&self, m: Modality) -> ProjectionVars {
        self.projections[m.index()]
    }

    /// Handles in [`ModelParams::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.projections {
            out.push(p.weight);
            out.push(p.bias);
        }
        for u in [&self.visual, &self.text] {
            out.extend([u.w_q, u.w_k, u.w_v, u.w_o]);
        }
        out.extend([self.gate.w_g, self.gate.b_g, self.gate.logit]);
        out
    }
}

/// `tanh(x W + b)` applied to every row of `x`.
pub fn project_var(g: &mut Graph, x: Var, p: ProjectionVars) -> Result<Var> {
    let xw = g.matmul(x, p.weight)?;
    let z = g.add_row(xw, p.bias)?;
    Ok(g.tanh(z))
}

/// Multi-head scaled dot-product attention of a single query row over `x`.
///
/// Per head `softmax(q W_Q (x W_K)^T / sqrt(d/h)) x W_V`; heads are
/// concatenated and multiplied by `W_O`. No residual, no normalization.
pub fn cross_att_var(g: &mut Graph, q: Var, x: Var, unit: AttentionVars) -> Result<Var> {
    let (qr, d) = g.shape(q);
    let (n, dx) = g.shape(x);
    if qr != 1 || dx != d {
        return Err(Error::Shape(format!("cross-attention query {qr}x{d} over keys {n}x{dx}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("cross-attention over zero rows".into()));
    }
    let h = unit.heads;
    if d % h != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    let qp = g.matmul(q, unit.w_q)?;
    let kp = g.matmul(x, unit.w_k)?;
    let vp = g.matmul(x, unit.w_v)?;
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let (s, e) = (i * dh, (i + 1) * dh);
        let qh = g.slice_cols(qp, s, e)?;
        let kh = g.slice_cols(kp, s, e)?;
        let vh = g.slice_cols(vp, s, e)?;
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_rows(logits);
        heads.push(g.matmul(att, vh)?);
    }
    let cat = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, unit.w_o)
}

/// Joint query from the mention and the four unit outputs.
pub fn gated_fuse_var(g: &mut Graph, m: Var, m_t: Var, m_v: Var, m_f: Var, m_s: Var, gate: GateVars) -> Result<(Var, Var)> {
    let mt = g.add(m, m_t)?;
    let g_m = g.add(mt, m_v)?;
    let attr = g.add(m_f, m_s)?;
    let eps = g.sigmoid(gate.logit);
    let keep = g.affine(eps, -1.0, 1.0);
    let left = g.scale_by(g_m, keep)?;
    let right = g.scale_by(attr, eps)?;
    let cat = g.concat_cols(&[left, right])?;
    let lin = g.matmul(cat, gate.w_g)?;
    let out = g.add_row(lin, gate.b_g)?;
    Ok((g_m, out))
}

/// Raw (pre-projection) embeddings of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub mention: Vec<f64>,
    pub text: Vec<f64>,
    /// Whole-image embedding; used only when there are no object rows.
    pub image: Option<Vec<f64>>,
    /// `l x d_in` object rows.
    pub objects: Matrix,
    /// Object index of every face row.
    pub face_objects: Vec<usize>,
    /// Encoded face prompts, aligned with `face_objects`.
    pub faces: Matrix,
    /// Encoded identity prompts.
    pub identities: Matrix,
}

impl FeatureBundle {
    /// A bundle with only the text side present.
    pub fn text_only(mention: Vec<f64>, text: Vec<f64>) -> Self {
        let d = mention.len();
        Self {
            mention,
            text,
            image: None,
            objects: Matrix::zeros(0, d),
            face_objects: Vec::new(),
            faces: Matrix::zeros(0, d),
            identities: Matrix::zeros(0, d),
        }
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        let bad = |what: &str, w: usize| Err(Error::Shape(format!("{what} width {w}, expected {d_in}")));
        if self.mention.len() != d_in {
            return bad("mention", self.mention.len());
        }
        if self.text.len() != d_in {
            return bad("text", self.text.len());
        }
        if let Some(v) = &self.image {
            if v.len() != d_in {
                return bad("image", v.len());
            }
        }
        for (what, m) in [("objects", &self.objects), ("faces", &self.faces), ("identities", &self.identities)] {
            if m.cols() != d_in {
                return bad(what, m.cols());
            }
        }
        if self.faces.rows() != self.face_objects.len() {
            return Err(Error::Shape("face rows and face object indices differ in length".into()));
        }
        let l = self.objects.rows();
        let mut seen = std::collections::HashSet::new();
        for &i in &self.face_objects {
            if i >= l || !seen.insert(i) {
                return Err(Error::InvalidInput(format!("face row for object {i} with {l} objects")));
            }
        }
        Ok(())
    }

    /// Drops every visual and attribute input.
    pub fn strip_visual(&mut self) {
        let d = self.mention.len();
        self.image = None;
        self.objects = Matrix::zeros(0, d);
        self.face_objects.clear();
        self.faces = Matrix::zeros(0, d);
        self.identities = Matrix::zeros(0, d);
    }
}

/// Train-mode dropout on the four unit outputs. Masks are a pure function of
/// `(seed, sample, unit)` so a forward pass can be replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
}

impl Dropout {
    fn mask(&self, sample: u64, unit: u64, width: usize) -> Matrix {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ sample.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ unit.wrapping_mul(0xd1b5_4a32_d192_ed03));
        let keep = 1.0 / (1.0 - self.p);
        let data = (0..width).map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep }).collect();
        Matrix::from_vec(1, width, data).expect("mask shape")
    }
}

/// Graph handles produced by one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleVars {
    pub m: Var,
    pub m_t: Var,
    pub m_v: Var,
    pub m_f: Var,
    pub m_s: Var,
    pub g_m: Var,
    pub g: Var,
    /// Projected face rows and the projected object rows they belong to.
    pub face_object_pairs: Option<(Var, Var)>,
}

pub struct ForwardOptions {
    pub dropout: Option<Dropout>,
    /// Identifies the sample for dropout masks.
    pub sample_key: u64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self { dropout: None, sample_key: 0 }
    }
}

fn constant_rows(g: &mut Graph, rows: &[f64]) -> Var {
    g.constant(Matrix::row_vector(rows))
}

/// Query-side forward pass for one sample.
pub fn forward_sample(g: &mut Graph, vars: &ModelVars, bundle: &FeatureBundle, opts: &ForwardOptions) -> Result<SampleVars> {
    let d = g.shape(vars.gate.b_g).1;
    let m_raw = constant_rows(g, &bundle.mention);
    let m = project_var(g, m_raw, vars.projection(Modality::Mention))?;
    let t_raw = constant_rows(g, &bundle.text);
    let t = project_var(g, t_raw, vars.projection(Modality::Text))?;
    let m_t = cross_att_var(g, m, t, vars.text)?;

    let objects = if bundle.objects.rows() > 0 {
        let raw = g.constant(bundle.objects.clone());
        Some(project_var(g, raw, vars.projection(Modality::Object))?)
    } else {
        None
    };
    let m_v = match (objects, &bundle.image) {
        (Some(o), _) => cross_att_var(g, m, o, vars.visual)?,
        (None, Some(v)) => {
            let raw = constant_rows(g, v);
            let pv = project_var(g, raw, vars.projection(Modality::Image))?;
            cross_att_var(g, m, pv, vars.visual)?
        }
        (None, None) => g.constant(Matrix::zeros(1, d)),
    };

    let faces = if bundle.faces.rows() > 0 {
        let raw = g.constant(bundle.faces.clone());
        Some(project_var(g, raw, vars.projection(Modality::Face))?)
    } else {
        None
    };
    let m_f = match faces {
        Some(f) => cross_att_var(g, m, f, vars.visual)?,
        None => g.constant(Matrix::zeros(1, d)),
    };
    let m_s = if bundle.identities.rows() > 0 {
        let raw = g.constant(bundle.identities.clone());
        let s = project_var(g, raw, vars.projection(Modality::Identity))?;
        cross_att_var(g, m, s, vars.visual)?
    } else {
        g.constant(Matrix::zeros(1, d))
    };

    let (m_t, m_v, m_f, m_s) = match opts.dropout {
        Some(dp) if dp.p > 0.0 => {
            let mut apply = |v: Var, unit: u64| g.mul_const(v, dp.mask(opts.sample_key, unit, d));
            (apply(m_t, 0)?, apply(m_v, 1)?, apply(m_f, 2)?, apply(m_s, 3)?)
        }
        _ => (m_t, m_v, m_f, m_s),
    };

    let (g_m, joint) = gated_fuse_var(g, m, m_t, m_v, m_f, m_s, vars.gate)?;
    let face_object_pairs = match (faces, objects) {
        (Some(f), Some(o)) => Some((f, g.gather_rows(o, &bundle.face_objects)?)),
        _ => None,
    };
    Ok(SampleVars { m, m_t, m_v, m_f, m_s, g_m, g: joint, face_object_pairs })
}

/// Plain-value outputs of the enhancer units and the fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub m_t: Vec<f64>,
    pub m_v: Vec<f64>,
    pub m_f: Vec<f64>,
    pub m_s: Vec<f64>,
    pub g_m: Vec<f64>,
    pub g: Vec<f64>,
}

/// Eval-mode forward pass.
pub fn enhance_all(bundle: &FeatureBundle, params: &ModelParams) -> Result<FusionOutput> {
    bundle.validate(params.dims.d_in)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_sample(&mut g, &vars, bundle, &ForwardOptions::eval())?;
    let row = |v: Var| g.value(v).row(0).to_vec();
    Ok(FusionOutput { m_t: row(out.m_t), m_v: row(out.m_v), m_f: row(out.m_f), m_s: row(out.m_s), g_m: row(out.g_m), g: row(out.g) })
}

/// Joint query embedding only.
pub fn query_embedding(bundle: &FeatureBundle, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(enhance_all(bundle, params)?.g)
}

pub fn project(x: &[f64], params: &ProjectionParams) -> Result<Vec<f64>> {
    if x.len() != params.weight.rows() {
        return Err(Error::Shape(format!("input width {} for a {}x{} projection", x.len(), params.weight.rows(), params.weight.cols())));
    }
    let mut g = Graph::new();
    let pv = ProjectionVars { weight: g.param(&params.weight), bias: g.param(&params.bias) };
    let xv = g.constant(Matrix::row_vector(x));
    let y = project_var(&mut g, xv, pv)?;
    Ok(g.value(y).row(0).to_vec())
}

pub fn cross_att(q: &[f64], x: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let unit = AttentionVars {
        heads: params.heads,
        w_q: g.param(&params.w_q),
        w_k: g.param(&params.w_k),
        w_v: g.param(&params.w_v),
        w_o: g.param(&params.w_o),
    };
    let qv = g.constant(Matrix::row_vector(q));
    let xv = g.constant(x.clone());
    let out = cross_att_var(&mut g, qv, xv, unit)?;
    Ok(g.value(out).row(0).to_vec())
}

pub fn gated_fuse(m: &[f64], m_t: &[f64], m_v: &[f64], m_f: &[f64], m_s: &[f64], gate: &GateParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = GateVars { w_g: g.param(&gate.w_g), b_g: g.param(&gate.b_g), logit: g.param(&gate.gate_logit) };
    let ins: Vec<Var> = [m, m_t, m_v, m_f, m_s].iter().map(|r| g.constant(Matrix::row_vector(r))).collect();
    let (_, out) = gated_fuse_var(&mut g, ins[0], ins[1], ins[2], ins[3], ins[4], vars)?;
    Ok(g.value(out).row(0).to_vec())
}

/// Projects raw entity embeddings (one per row) and L2-normalizes them.
pub fn encode_entities_var(g: &mut Graph, raw: Var, vars: &ModelVars) -> Result<Var> {
    let p = project_var(g, raw, vars.projection(Modality::Entity))?;
    Ok(g.row_normalize(p))
}

/// Entity-side embedding for one raw entity-representation vector.
pub fn encode_entity_vector(raw: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let p = project(raw, params.projection(Modality::Entity))?;
    tensor::normalized(&p).ok_or_else(|| Error::InvalidInput("entity projection is the zero vector".into()))
}

/// Batch version of [`encode_entity_vector`].
pub fn encode_entity_matrix(raw: &Matrix, params: &ModelParams) -> Result<Matrix> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant_ref(raw);
    let out = encode_entities_var(&mut g, x, &vars)?;
    Ok(g.value(out).clone())
}

/// Cosine similarity. Returns `(0, true)` when either input has zero norm.
pub fn score(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (na, nb) = (tensor::l2_norm(a), tensor::l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    ((tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0), false)
}

/// Index of the highest score; ties go to the earliest candidate.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
            Some((_, b)) if b >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_unit(d: usize, heads: usize, tag: UnitTag) -> AttentionParams {
        AttentionParams {
            unit: tag,
            heads,
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            w_o: Matrix::identity(d),
        }
    }

    #[test]
    fn single_key_attention_returns_the_value() {
        let unit = identity_unit(3, 1, UnitTag::SharedVisual);
        let v = [0.3, -0.2, 0.9];
        let out = cross_att(&[1.0, 0.0, 0.0], &Matrix::row_vector(&v), &unit).unwrap();
        assert_eq!(out, v);
        let two = Matrix::from_rows(&[v.to_vec(), v.to_vec()], 3).unwrap();
        let out = cross_att(&[0.5, 0.5, 0.0], &two, &unit).unwrap();
        for (a, b) in out.iter().zip(v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_key_attention_matches_formula() {
        let unit = identity_unit(2, 1, UnitTag::SharedVisual);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let out = cross_att(&[1.0, 0.0], &x, &unit).unwrap();
        // Weights softmax(1/sqrt(2), 0), evaluated independently.
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = a / (a + 1.0);
        assert!((out[0] - w0).abs() < 1e-15);
        assert!((out[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((out[0] - 0.66976).abs() < 1e-5);
    }

    #[test]
    fn attention_rejects_empty_keys_and_bad_shapes() {
        let unit = identity_unit(2, 1, UnitTag::Text);
        assert!(cross_att(&[1.0, 0.0], &Matrix::zeros(0, 2), &unit).is_err());
        assert!(cross_att(&[1.0, 0.0, 0.0], &Matrix::identity(2), &unit).is_err());
    }

    #[test]
    fn projection_cases() {
        let zero = ProjectionParams { modality: Modality::Text, weight: Matrix::zeros(3, 2), bias: Matrix::zeros(1, 2) };
        assert_eq!(project(&[1.0, 2.0, 3.0], &zero).unwrap(), vec![0.0, 0.0]);
        let scaled = ProjectionParams { modality: Modality::Text, weight: Matrix::identity(3).scale(0.1), bias: Matrix::zeros(1, 3) };
        let y = project(&[1.0, 0.0, 0.0], &scaled).unwrap();
        assert!((y[0] - 0.1f64.tanh()).abs() < 1e-15);
        assert!((y[0] - 0.09967).abs() < 1e-5);
        assert_eq!(&y[1..], &[0.0, 0.0]);
        assert!(project(&[1.0], &scaled).is_err());
    }

    #[test]
    fn stacked_identity_gate_is_a_scalar_mix() {
        let d = 3;
        let mut w_g = Matrix::zeros(2 * d, d);
        for i in 0..d {
            w_g.set(i, i, 1.0);
            w_g.set(d + i, i, 1.0);
        }
        let gate = GateParams { w_g, b_g: Matrix::zeros(1, d), gate_logit: Matrix::filled(1, 1, 0.3) };
        let eps = gate.epsilon();
        let (m, mt, mv, mf, ms) = ([1.0, 0.0, 2.0], [0.5, 0.5, 0.5], [-1.0, 1.0, 0.0], [0.2, 0.1, 0.0], [0.0, 0.3, -0.4]);
        let out = gated_fuse(&m, &mt, &mv, &mf, &ms, &gate).unwrap();
        for i in 0..d {
            let want = (1.0 - eps) * (m[i] + mt[i] + mv[i]) + eps * (mf[i] + ms[i]);
            assert!((out[i] - want).abs() < 1e-14);
        }
        let closed = GateParams { gate_logit: Matrix::filled(1, 1, -60.0), ..gate };
        let out = gated_fuse(&m, &mt, &mv, &mf, &ms, &closed).unwrap();
        for i in 0..d {
            assert!((out[i] - (m[i] + mt[i] + mv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_bundle_zeroes_attribute_units() {
        let dims = ModelDims { d_in: 4, d: 4, heads: 2 };
        let params = ModelParams::init(dims, InitConfig::default(), 1).unwrap();
        let b = FeatureBundle::text_only(vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]);
        let out = enhance_all(&b, &params).unwrap();
        assert_eq!(out.m_f, vec![0.0; 4]);
        assert_eq!(out.m_s, vec![0.0; 4]);
        assert_eq!(out.m_v, vec![0.0; 4]);
        assert!(out.g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_object_with_identity_weights_passes_the_row_through() {
        let dims = ModelDims { d_in: 3, d: 3, heads: 1 };
        let mut params = ModelParams::init(dims, InitConfig { noise: 0.0, gate_logit: -2.0 }, 0).unwrap();
        params.visual = identity_unit(3, 1, UnitTag::SharedVisual);
        let mut b = FeatureBundle::text_only(vec![0.1, 0.2, 0.3], vec![0.0, 0.5, 0.1]);
        b.objects = Matrix::row_vector(&[0.7, -0.1, 0.2]);
        let out = enhance_all(&b, &params).unwrap();
        let projected = project(&[0.7, -0.1, 0.2], params.projection(Modality::Object)).unwrap();
        for (a, p) in out.m_v.iter().zip(&projected) {
            assert!((a - p).abs() < 1e-15);
        }
    }

    #[test]
    fn image_is_the_fallback_when_there_are_no_objects() {
        let dims = ModelDims { d_in: 3, d: 3, heads: 1 };
        let params = ModelParams::init(dims, InitConfig::default(), 3).unwrap();
        let mut b = FeatureBundle::text_only(vec![0.1, 0.2, 0.3], vec![0.0, 0.5, 0.1]);
        b.image = Some(vec![0.3, 0.3, -0.3]);
        let with_image = enhance_all(&b, &params).unwrap();
        assert!(with_image.m_v.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn score_properties() {
        let u = [0.6, 0.8];
        assert!((score(&u, &u).0 - 1.0).abs() < 1e-15);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), (0.0, false));
        assert_eq!(score(&[0.0, 0.0], &u), (0.0, true));
        let (a, _) = score(&[2.0, 1.0], &[0.3, -0.7]);
        let (b, _) = score(&[6.0, 3.0], &[0.03, -0.07]);
        assert!((a - b).abs() < 1e-15);
        assert_eq!(argmax(&[0.47, 0.81, 0.13]), Some(1));
    }

    #[test]
    fn entity_encoding_is_unit_and_deterministic() {
        let dims = ModelDims { d_in: 5, d: 4, heads: 2 };
        let params = ModelParams::init(dims, InitConfig::default(), 9).unwrap();
        let raw = [0.1, -0.3, 0.5, 0.2, 0.0];
        let a = encode_entity_vector(&raw, &params).unwrap();
        assert_eq!(a, encode_entity_vector(&raw, &params).unwrap());
        assert!((tensor::l2_norm(&a) - 1.0).abs() < 1e-12);
        let m = encode_entity_matrix(&Matrix::row_vector(&raw), &params).unwrap();
        assert_eq!(m.row(0), a.as_slice());
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims { d_in: 4, d: 6, heads: 4 }.validate().is_err());
        assert!(ModelDims { d_in: 4, d: 8, heads: 4 }.validate().is_ok());
    }
}
