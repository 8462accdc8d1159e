//! MLP feature extractor plus linear classifier heads, and the parameter
//! snapshot plumbing exchanged between clients and the server.
//!
//! Weights are stored `[out, in]`, so a layer computes `x · Wᵀ + b`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Desk-scale extractor widths.
pub const DEFAULT_HIDDEN_DIMS: [usize; 2] = [32, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "hidden_dims must hold at least one positive layer width".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated config")
    }

    /// Extractor plus one head.
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &h in &self.hidden_dims {
            total += fan_in * h + h;
            fan_in = h;
        }
        total + self.head_param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.feature_dim() * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("param shape invariant")
    }
}

/// Ordered named parameters of one model part.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub params: Vec<Param>,
}

impl ParamBlock {
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamBlock {
        ParamBlock {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: vec![0.0; p.values.len()],
                })
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamBlock, op: &'static str) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(
                op,
                format!("{} vs {} parameters", self.params.len(), other.params.len()),
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(
                    op,
                    format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape),
                ));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.tensor(), requires_grad)).collect()
    }

    /// Elementwise `self - other`.
    pub fn difference(&self, other: &ParamBlock) -> Result<ParamBlock> {
        self.check_compatible(other, "difference")?;
        let mut out = self.clone();
        for (p, q) in out.params.iter_mut().zip(&other.params) {
            p.values.iter_mut().zip(&q.values).for_each(|(a, b)| *a -= b);
        }
        Ok(out)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.params.iter().flat_map(|p| p.values.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Shared model: feature extractor `f_u` and federated head `g_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: ParamBlock,
    pub head: ParamBlock,
}

/// `after - before` for the shared blocks, so aggregation adds it.
///
/// `extractor`/`head` hold the rounded differences; the private residuals
/// hold what rounding dropped, so `value + residual` is the exact
/// difference and aggregation can reproduce client parameters bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDelta {
    pub extractor: ParamBlock,
    pub head: ParamBlock,
    extractor_residual: ParamBlock,
    head_residual: ParamBlock,
}

impl ModelParams {
    pub fn num_values(&self) -> usize {
        self.extractor.num_values() + self.head.num_values()
    }

    pub fn check_compatible(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        self.extractor.check_compatible(&other.extractor, op)?;
        self.head.check_compatible(&other.head, op)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_blocks(&[("extractor", &self.extractor), ("head", &self.head)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut blocks = decode_blocks(bytes)?;
        match blocks.as_slice() {
            [(a, _), (b, _)] if a == "extractor" && b == "head" => {
                let head = blocks.pop().unwrap().1;
                let extractor = blocks.pop().unwrap().1;
                Ok(ModelParams { extractor, head })
            }
            _ => Err(Error::Format("expected blocks [extractor, head]".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_bytes(&std::fs::read(path)?)
    }
}

impl ParamDelta {
    /// Delta with no rounding residual.
    pub fn from_blocks(extractor: ParamBlock, head: ParamBlock) -> ParamDelta {
        ParamDelta {
            extractor_residual: extractor.zeros_like(),
            head_residual: head.zeros_like(),
            extractor,
            head,
        }
    }

    pub fn between(before: &ModelParams, after: &ModelParams) -> Result<ParamDelta> {
        before.check_compatible(after, "delta")?;
        let (extractor, extractor_residual) = exact_difference(&after.extractor, &before.extractor);
        let (head, head_residual) = exact_difference(&after.head, &before.head);
        Ok(ParamDelta {
            extractor,
            head,
            extractor_residual,
            head_residual,
        })
    }

    pub fn zeros_like(params: &ModelParams) -> ParamDelta {
        ParamDelta::from_blocks(params.extractor.zeros_like(), params.head.zeros_like())
    }

    fn check(&self, base: &ModelParams) -> Result<()> {
        base.extractor.check_compatible(&self.extractor, "apply_delta")?;
        base.head.check_compatible(&self.head, "apply_delta")?;
        self.extractor.check_compatible(&self.extractor_residual, "apply_delta")?;
        self.head.check_compatible(&self.head_residual, "apply_delta")
    }

    /// Wire form of a client upload: the extractor and federated head only
    /// (each parameter followed by its `.residual`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let interleave = |a: &ParamBlock, r: &ParamBlock| ParamBlock {
            params: a
                .params
                .iter()
                .zip(&r.params)
                .flat_map(|(p, q)| {
                    let mut q = q.clone();
                    q.name = format!("{}.residual", p.name);
                    [p.clone(), q]
                })
                .collect(),
        };
        encode_blocks(&[
            ("extractor", &interleave(&self.extractor, &self.extractor_residual)),
            ("head", &interleave(&self.head, &self.head_residual)),
        ])
    }
}

fn exact_difference(after: &ParamBlock, before: &ParamBlock) -> (ParamBlock, ParamBlock) {
    let mut hi = after.clone();
    let mut lo = after.zeros_like();
    for ((h, l), b) in hi.params.iter_mut().zip(lo.params.iter_mut()).zip(&before.params) {
        for ((hv, lv), bv) in h.values.iter_mut().zip(l.values.iter_mut()).zip(&b.values) {
            let (s, e) = two_sum(*hv, -bv);
            *hv = s;
            *lv = e;
        }
    }
    (hi, lo)
}

pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut extractor = Vec::new();
    let mut fan_in = cfg.input_dim;
    for (i, &width) in cfg.hidden_dims.iter().enumerate() {
        let (w, b) = init_linear(&mut rng, &format!("extractor.{}", i), width, fan_in);
        extractor.push(w);
        extractor.push(b);
        fan_in = width;
    }
    let (w, b) = init_linear(&mut rng, "head", cfg.num_classes, fan_in);
    Ok(ModelParams {
        extractor: ParamBlock { params: extractor },
        head: ParamBlock { params: vec![w, b] },
    })
}

fn init_linear(rng: &mut ChaCha8Rng, prefix: &str, out: usize, fan_in: usize) -> (Param, Param) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = Param {
        name: format!("{}.weight", prefix),
        shape: vec![out, fan_in],
        values: (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
    };
    let bias = Param {
        name: format!("{}.bias", prefix),
        shape: vec![out],
        values: vec![0.0; out],
    };
    (weight, bias)
}

fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let wt = g.transpose(weight)?;
    let xw = g.matmul(x, wt)?;
    g.add(xw, bias)
}

/// `relu` MLP over the registered extractor leaves; the last hidden layer's
/// activations are the features.
pub fn forward_features(g: &mut Graph, extractor: &[Var], x: Var) -> Result<Var> {
    if extractor.is_empty() || extractor.len() % 2 != 0 {
        return Err(Error::shape("forward_features", "extractor must hold weight/bias pairs"));
    }
    let mut h = x;
    for pair in extractor.chunks(2) {
        let expected = g.value(pair[0]).shape()[1];
        let got = g.value(h).shape().get(1).copied().unwrap_or(0);
        if expected != got {
            return Err(Error::shape(
                "forward_features",
                format!("layer expects {} inputs, got {}", expected, got),
            ));
        }
        let z = linear(g, h, pair[0], pair[1])?;
        h = g.relu(z);
    }
    Ok(h)
}

/// Affine map from features to class logits.
pub fn forward_head(g: &mut Graph, head: &[Var], features: Var) -> Result<Var> {
    let [weight, bias] = head else {
        return Err(Error::shape("forward_head", "head must be [weight, bias]"));
    };
    let expected = g.value(*weight).shape()[1];
    let got = g.value(features).shape().get(1).copied().unwrap_or(0);
    if expected != got {
        return Err(Error::shape(
            "forward_head",
            format!("head expects {} features, got {}", expected, got),
        ));
    }
    linear(g, features, *weight, *bias)
}

/// `base + Σ wᵢ·deltaᵢ`, evaluated in double-double arithmetic and rounded
/// once, so identical deltas under weights summing to one reproduce a
/// single application exactly.
pub fn apply_delta(base: &ModelParams, deltas: &[(f64, &ParamDelta)]) -> Result<ModelParams> {
    let weights: Vec<DoubleDouble> = deltas.iter().map(|(w, _)| DoubleDouble::from(*w)).collect();
    let refs: Vec<&ParamDelta> = deltas.iter().map(|(_, d)| *d).collect();
    apply_weighted(base, &weights, &refs)
}

/// Aggregation with weights `countᵢ / Σ counts` kept as exact-as-possible
/// ratios rather than pre-rounded floats.
pub fn apply_delta_by_counts(base: &ModelParams, deltas: &[(u64, &ParamDelta)]) -> Result<ModelParams> {
    let total: u64 = deltas.iter().map(|(n, _)| n).sum();
    if total == 0 && !deltas.is_empty() {
        return Err(Error::Contract("aggregation counts sum to zero".into()));
    }
    let weights: Vec<DoubleDouble> = deltas
        .iter()
        .map(|(n, _)| DoubleDouble::ratio(*n as f64, total as f64))
        .collect();
    let refs: Vec<&ParamDelta> = deltas.iter().map(|(_, d)| *d).collect();
    apply_weighted(base, &weights, &refs)
}

fn apply_weighted(base: &ModelParams, weights: &[DoubleDouble], deltas: &[&ParamDelta]) -> Result<ModelParams> {
    for (w, d) in weights.iter().zip(deltas) {
        if !w.hi.is_finite() {
            return Err(Error::Contract(format!("aggregation weight {} is not finite", w.hi)));
        }
        d.check(base)?;
    }
    let mut out = base.clone();
    if deltas.is_empty() {
        return Ok(out);
    }
    type Pick = fn(&ParamDelta) -> (&ParamBlock, &ParamBlock);
    let combine = |block: &mut ParamBlock, pick: Pick| {
        for (pi, param) in block.params.iter_mut().enumerate() {
            for (j, value) in param.values.iter_mut().enumerate() {
                let mut step = DoubleDouble::from(0.0);
                for (w, d) in weights.iter().zip(deltas) {
                    let (hi, lo) = pick(d);
                    let delta = DoubleDouble::new(hi.params[pi].values[j], lo.params[pi].values[j]);
                    step = step.add(w.mul(delta));
                }
                *value = DoubleDouble::from(*value).add(step).hi;
            }
        }
    };
    combine(&mut out.extractor, |d| (&d.extractor, &d.extractor_residual));
    combine(&mut out.head, |d| (&d.head, &d.head_residual));
    Ok(out)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl From<f64> for DoubleDouble {
    fn from(hi: f64) -> Self {
        DoubleDouble { hi, lo: 0.0 }
    }
}

impl DoubleDouble {
    fn new(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        DoubleDouble { hi, lo }
    }

    fn ratio(n: f64, d: f64) -> Self {
        let q = n / d;
        let r = (-q).mul_add(d, n);
        let (hi, lo) = fast_two_sum(q, r / d);
        DoubleDouble { hi, lo }
    }

    fn add(self, other: DoubleDouble) -> DoubleDouble {
        let (s, e) = two_sum(self.hi, other.hi);
        let (t, f) = two_sum(self.lo, other.lo);
        let (s, e) = fast_two_sum(s, e + t);
        let (hi, lo) = fast_two_sum(s, e + f);
        DoubleDouble { hi, lo }
    }

    fn mul(self, other: DoubleDouble) -> DoubleDouble {
        let p = self.hi * other.hi;
        let e = self.hi.mul_add(other.hi, -p) + (self.hi * other.lo + self.lo * other.hi);
        let (hi, lo) = fast_two_sum(p, e);
        DoubleDouble { hi, lo }
    }
}

/// Softmax class probabilities (row-major `n x C`) for the given rows.
pub fn predict_proba(extractor: &ParamBlock, head: &ParamBlock, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let ev = extractor.register(&mut g, false);
    let hv = head.register(&mut g, false);
    let xv = g.constant(x.clone());
    let f = forward_features(&mut g, &ev, xv)?;
    let logits = forward_head(&mut g, &hv, f)?;
    let classes = g.value(logits).shape()[1];
    Ok(softmax_rows(g.value(logits).data(), classes))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blocks: Vec<BlockManifest>,
}

#[derive(Serialize, Deserialize)]
struct BlockManifest {
    name: String,
    params: Vec<ParamManifest>,
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    name: String,
    shape: Vec<usize>,
}

const FORMAT_TAG: &str = "fca-params";

/// One JSON manifest line naming every block/parameter and its shape,
/// followed by all values as little-endian `f64` in manifest order.
pub fn encode_blocks(blocks: &[(&str, &ParamBlock)]) -> Vec<u8> {
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: 1,
        blocks: blocks
            .iter()
            .map(|(name, block)| BlockManifest {
                name: (*name).into(),
                params: block
                    .params
                    .iter()
                    .map(|p| ParamManifest {
                        name: p.name.clone(),
                        shape: p.shape.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    for (_, block) in blocks {
        for v in block.values() {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
    }
    out
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<(String, ParamBlock)>> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])?;
    if manifest.format != FORMAT_TAG || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut body = &bytes[newline + 1..];
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    for bm in manifest.blocks {
        let mut params = Vec::with_capacity(bm.params.len());
        for pm in bm.params {
            let n: usize = pm.shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                body.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated values for {}", pm.name)))?;
                values.push(f64::from_le_bytes(buf));
            }
            params.push(Param {
                name: pm.name,
                shape: pm.shape,
                values,
            });
        }
        blocks.push((bm.name, ParamBlock { params }));
    }
    if !body.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", body.len())));
    }
    Ok(blocks)
}
