//! A small pre-norm transformer encoder with conditioned multi-head attention
//! and hand-written reverse-mode gradients.
//!
//! Per layer:
//!
//! ```text
//! U = LN₁(X)
//! H = [A₁(U) … A_h(U)]·W_O + b_O        A_i uses W_i + C_i (frozen C_i)
//! Y = X + H
//! Z = Y + GELU(LN₂(Y)·W₁ + b₁)·W₂ + b₂
//! ```
//!
//! followed by a final layer norm, mean pooling over tokens and a linear
//! classifier. Only the head projections see corrections; the output
//! projection, feed-forward block and norms are ordinary parameters.

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_rows, AttentionParams};
use crate::conditioning::{build_correction_set, Conditioning, CorrectionSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derived, gaussian_matrix};

use super::task::{Example, CLASSES, VOCAB};

const LN_EPS: f64 = 1e-5;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub seq_len: usize,
    pub ffn_width: usize,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    /// Disabling drops the feed-forward sub-block; only meant for reduction tests.
    #[serde(default = "default_true")]
    pub feedforward: bool,
    pub conditioning: Conditioning,
    pub seed: u64,
}

impl TransformerConfig {
    /// The two-layer, two-head reference configuration.
    pub fn reference() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_head: 16,
            seq_len: 16,
            ffn_width: 64,
            layer_norm: true,
            feedforward: true,
            conditioning: Conditioning::DiagonalShift { lambda: 10.0 },
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("seq_len", self.seq_len),
            ("ffn_width", self.ffn_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal heads ({}) x d_head ({})",
                self.d_model, self.heads, self.d_head
            )));
        }
        if let Conditioning::DiagonalShift { lambda } = self.conditioning {
            Conditioning::from_name("diag-shift", lambda)?;
        }
        Ok(())
    }

    fn options(&self) -> LayerOptions {
        LayerOptions {
            layer_norm: self.layer_norm,
            feedforward: self.feedforward,
        }
    }
}

/// Structural switches for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOptions {
    pub layer_norm: bool,
    pub feedforward: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            layer_norm: true,
            feedforward: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<AttentionParams>,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl LayerParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.heads.iter().flat_map(|h| [&h.w_q, &h.w_k, &h.w_v]).collect();
        v.extend([
            &self.w_o,
            &self.b_o,
            &self.ln1_g,
            &self.ln1_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self
            .heads
            .iter_mut()
            .flat_map(|h| [&mut h.w_q, &mut h.w_k, &mut h.w_v])
            .collect();
        v.extend([
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
        v
    }

    fn names(&self, layer: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..self.heads.len())
            .flat_map(|h| ["w_q", "w_k", "w_v"].map(|n| format!("layer{layer}.head{h}.{n}")))
            .collect();
        v.extend(
            ["w_o", "b_o", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"]
                .map(|n| format!("layer{layer}.{n}")),
        );
        v
    }

    /// Effective head projections, `W + C` per head when corrections are given.
    pub fn effective_heads(&self, corrections: Option<&[CorrectionSet]>) -> Result<Vec<AttentionParams>> {
        match corrections {
            None => Ok(self.heads.clone()),
            Some(cs) => {
                if cs.len() != self.heads.len() {
                    return Err(Error::dim(format!(
                        "{} correction sets for {} heads",
                        cs.len(),
                        self.heads.len()
                    )));
                }
                self.heads.iter().zip(cs).map(|(h, c)| h.corrected(c)).collect()
            }
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub w_cls: Matrix,
    pub b_cls: Matrix,
}

impl ModelParams {
    /// Gaussian init: embeddings std 1, weight matrices std `1/√fan_in`,
    /// biases zero, norm gains one.
    pub fn init(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived(cfg.seed, 0);
        let (dm, dh, f) = (cfg.d_model, cfg.d_head, cfg.ffn_width);
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        let token_emb = gaussian_matrix(&mut rng, VOCAB, dm, 1.0)?;
        let pos_emb = gaussian_matrix(&mut rng, cfg.seq_len, dm, 1.0)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut heads = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                let w_q = gaussian_matrix(&mut rng, dm, dh, inv(dm))?;
                let w_k = gaussian_matrix(&mut rng, dm, dh, inv(dm))?;
                let w_v = gaussian_matrix(&mut rng, dm, dh, inv(dm))?;
                heads.push(AttentionParams::new(w_q, w_k, w_v)?);
            }
            layers.push(LayerParams {
                heads,
                w_o: gaussian_matrix(&mut rng, dm, dm, inv(dm))?,
                b_o: Matrix::zeros(1, dm)?,
                ln1_g: ones(dm)?,
                ln1_b: Matrix::zeros(1, dm)?,
                ln2_g: ones(dm)?,
                ln2_b: Matrix::zeros(1, dm)?,
                w1: gaussian_matrix(&mut rng, dm, f, inv(dm))?,
                b1: Matrix::zeros(1, f)?,
                w2: gaussian_matrix(&mut rng, f, dm, inv(f))?,
                b2: Matrix::zeros(1, dm)?,
            });
        }
        Ok(Self {
            token_emb,
            pos_emb,
            layers,
            lnf_g: ones(dm)?,
            lnf_b: Matrix::zeros(1, dm)?,
            w_cls: gaussian_matrix(&mut rng, dm, CLASSES, inv(dm))?,
            b_cls: Matrix::zeros(1, CLASSES)?,
        })
    }

    /// All tensors in a fixed order (the optimizer's parameter order).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.token_emb, &self.pos_emb];
        self.layers.iter().for_each(|l| v.extend(l.tensors()));
        v.extend([&self.lnf_g, &self.lnf_b, &self.w_cls, &self.b_cls]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.token_emb, &mut self.pos_emb];
        self.layers.iter_mut().for_each(|l| v.extend(l.tensors_mut()));
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_cls, &mut self.b_cls]);
        v
    }

    /// Names matching [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["token_emb".to_string(), "pos_emb".to_string()];
        self.layers.iter().enumerate().for_each(|(i, l)| v.extend(l.names(i)));
        v.extend(["lnf_g", "lnf_b", "w_cls", "b_cls"].map(String::from));
        v
    }

    pub fn zeros_like(&self) -> Result<Self> {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        Ok(z)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn ones(n: usize) -> Result<Matrix> {
    Matrix::new(1, n, vec![1.0; n])
}

fn add_assign(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!(dst.shape(), src.shape());
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, s)| *d += s);
}

fn add_row(m: &Matrix, b: &Matrix) -> Matrix {
    let c = m.cols();
    let data = m
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b.as_slice()[i % c])
        .collect();
    Matrix::from_raw(m.rows(), c, data)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += v);
    }
    Matrix::from_raw(1, m.cols(), out)
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (n, c) = x.shape();
    let mut xhat = Vec::with_capacity(n * c);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|v| (v - mu) * r));
    }
    let xhat = Matrix::from_raw(n, c, xhat);
    let y = xhat
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v * g.as_slice()[i % c] + b.as_slice()[i % c])
        .collect();
    (Matrix::from_raw(n, c, y), LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Matrix, g: &Matrix, cache: &LnCache, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let (n, c) = dy.shape();
    let mut dx = Vec::with_capacity(n * c);
    for i in 0..n {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        let dxhat: Vec<f64> = dyr.iter().zip(g.as_slice()).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / c as f64;
        for j in 0..c {
            dg.as_mut_slice()[j] += dyr[j] * xh[j];
            db.as_mut_slice()[j] += dyr[j];
            dx.push(cache.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx));
        }
    }
    Matrix::from_raw(n, c, dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    s: Matrix,
}

struct FfnCache {
    input: Matrix,
    ln2: Option<LnCache>,
    hpre: Matrix,
    act: Matrix,
}

struct LayerCache {
    u: Matrix,
    ln1: Option<LnCache>,
    heads: Vec<HeadCache>,
    hcat: Matrix,
    ffn: Option<FfnCache>,
}

fn layer_forward(
    x: &Matrix,
    layer: &LayerParams,
    eff: &[AttentionParams],
    opts: LayerOptions,
) -> Result<(Matrix, LayerCache)> {
    let dm = layer.w_o.rows();
    if x.cols() != dm {
        return Err(Error::dim(format!(
            "layer input has {} columns, expected {dm}",
            x.cols()
        )));
    }
    let (u, ln1) = if opts.layer_norm {
        let (u, c) = layer_norm(x, &layer.ln1_g, &layer.ln1_b);
        (u, Some(c))
    } else {
        (x.clone(), None)
    };
    let mut heads = Vec::with_capacity(eff.len());
    let mut outs = Vec::with_capacity(eff.len());
    for p in eff {
        let q = u.matmul(&p.w_q)?;
        let k = u.matmul(&p.w_k)?;
        let v = u.matmul(&p.w_v)?;
        let s = softmax_rows(&q.matmul_t(&k)?);
        outs.push(s.matmul(&v)?);
        heads.push(HeadCache { q, k, v, s });
    }
    let hcat = Matrix::hstack(&outs.iter().collect::<Vec<_>>())?;
    let y = x.add(&add_row(&hcat.matmul(&layer.w_o)?, &layer.b_o))?;
    if !opts.feedforward {
        return Ok((
            y,
            LayerCache {
                u,
                ln1,
                heads,
                hcat,
                ffn: None,
            },
        ));
    }
    let (input, ln2) = if opts.layer_norm {
        let (v, c) = layer_norm(&y, &layer.ln2_g, &layer.ln2_b);
        (v, Some(c))
    } else {
        (y.clone(), None)
    };
    let hpre = add_row(&input.matmul(&layer.w1)?, &layer.b1);
    let act = Matrix::from_computed(
        hpre.rows(),
        hpre.cols(),
        hpre.as_slice().iter().map(|&v| gelu(v)).collect(),
        "GELU",
    )?;
    let z = y.add(&add_row(&act.matmul(&layer.w2)?, &layer.b2))?;
    Ok((
        z,
        LayerCache {
            u,
            ln1,
            heads,
            hcat,
            ffn: Some(FfnCache { input, ln2, hpre, act }),
        },
    ))
}

fn layer_backward(
    dz: Matrix,
    layer: &LayerParams,
    eff: &[AttentionParams],
    cache: &LayerCache,
    grad: &mut LayerParams,
) -> Result<Matrix> {
    let mut dy = dz;
    if let Some(f) = &cache.ffn {
        add_assign(&mut grad.w2, &f.act.t_matmul(&dy)?);
        add_assign(&mut grad.b2, &col_sums(&dy));
        let dact = dy.matmul_t(&layer.w2)?;
        let dh: Vec<f64> = dact
            .as_slice()
            .iter()
            .zip(f.hpre.as_slice())
            .map(|(d, h)| d * gelu_grad(*h))
            .collect();
        let dh = Matrix::from_raw(dact.rows(), dact.cols(), dh);
        add_assign(&mut grad.w1, &f.input.t_matmul(&dh)?);
        add_assign(&mut grad.b1, &col_sums(&dh));
        let dinput = dh.matmul_t(&layer.w1)?;
        let dres = match &f.ln2 {
            Some(c) => layer_norm_backward(&dinput, &layer.ln2_g, c, &mut grad.ln2_g, &mut grad.ln2_b),
            None => dinput,
        };
        add_assign(&mut dy, &dres);
    }
    add_assign(&mut grad.w_o, &cache.hcat.t_matmul(&dy)?);
    add_assign(&mut grad.b_o, &col_sums(&dy));
    let dhcat = dy.matmul_t(&layer.w_o)?;
    let (n, dm) = cache.u.shape();
    let mut du = Matrix::zeros(n, dm)?;
    for (h, (hc, p)) in cache.heads.iter().zip(eff).enumerate() {
        let dh = p.d_head();
        let dout = dhcat.col_slice(h * dh, dh)?;
        let ds = dout.matmul_t(&hc.v)?;
        let dv = hc.s.t_matmul(&dout)?;
        let mut dm_scores = Vec::with_capacity(n * n);
        for i in 0..n {
            let (sr, dr) = (hc.s.row(i), ds.row(i));
            let inner: f64 = sr.iter().zip(dr).map(|(s, d)| s * d).sum();
            dm_scores.extend(sr.iter().zip(dr).map(|(s, d)| s * (d - inner)));
        }
        let dm_scores = Matrix::from_raw(n, n, dm_scores);
        let dq = dm_scores.matmul(&hc.k)?;
        let dk = dm_scores.t_matmul(&hc.q)?;
        let g = &mut grad.heads[h];
        add_assign(&mut g.w_q, &cache.u.t_matmul(&dq)?);
        add_assign(&mut g.w_k, &cache.u.t_matmul(&dk)?);
        add_assign(&mut g.w_v, &cache.u.t_matmul(&dv)?);
        add_assign(&mut du, &dq.matmul_t(&p.w_q)?);
        add_assign(&mut du, &dk.matmul_t(&p.w_k)?);
        add_assign(&mut du, &dv.matmul_t(&p.w_v)?);
    }
    let dx_attn = match &cache.ln1 {
        Some(c) => layer_norm_backward(&du, &layer.ln1_g, c, &mut grad.ln1_g, &mut grad.ln1_b),
        None => du,
    };
    add_assign(&mut dy, &dx_attn);
    Ok(dy)
}

/// One encoder layer: conditioned multi-head attention with residual, then
/// (optionally) the feed-forward block with residual; layer norms per `opts`.
pub fn forward_layer(
    x: &Matrix,
    layer: &LayerParams,
    corrections: Option<&[CorrectionSet]>,
    opts: LayerOptions,
) -> Result<Matrix> {
    let eff = layer.effective_heads(corrections)?;
    Ok(layer_forward(x, layer, &eff, opts)?.0)
}

/// Parameters plus the frozen per-layer, per-head corrections.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TransformerConfig,
    pub params: ModelParams,
    corrections: Option<Vec<Vec<CorrectionSet>>>,
}

struct Forward {
    caches: Vec<LayerCache>,
    lnf: Option<LnCache>,
    pooled: Matrix,
    logits: Matrix,
}

impl Model {
    /// Initializes parameters and builds corrections from the initial head weights.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: TransformerConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let corrections = match config.conditioning.correction_mode() {
            None => None,
            Some(mode) => Some(
                params
                    .layers
                    .iter()
                    .map(|l| {
                        l.heads
                            .iter()
                            .map(|h| build_correction_set(h, mode))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Self {
            config,
            params,
            corrections,
        })
    }

    /// Replaces the corrections wholesale; used to compare against hand-made sets.
    pub fn with_corrections(mut self, corrections: Option<Vec<Vec<CorrectionSet>>>) -> Self {
        self.corrections = corrections;
        self
    }

    pub fn corrections(&self, layer: usize) -> Option<&[CorrectionSet]> {
        self.corrections.as_ref().map(|c| c[layer].as_slice())
    }

    /// Bit patterns of every correction entry, layer by layer, head by head.
    pub fn correction_fingerprint(&self) -> Vec<u64> {
        self.corrections
            .iter()
            .flatten()
            .flatten()
            .flat_map(|c| c.fingerprint())
            .collect()
    }

    fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let p = &self.params;
        if tokens.len() != p.pos_emb.rows() {
            return Err(Error::dim(format!(
                "sequence of {} tokens, model expects {}",
                tokens.len(),
                p.pos_emb.rows()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= p.token_emb.rows()) {
            return Err(Error::dim(format!(
                "token {t} outside vocabulary of {}",
                p.token_emb.rows()
            )));
        }
        let dm = p.token_emb.cols();
        Matrix::from_fn(tokens.len(), dm, |i, j| p.token_emb[(tokens[i], j)] + p.pos_emb[(i, j)])
    }

    fn effective(&self) -> Result<Vec<Vec<AttentionParams>>> {
        self.params
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.effective_heads(self.corrections(i)))
            .collect()
    }

    fn forward(&self, tokens: &[usize], eff: &[Vec<AttentionParams>]) -> Result<Forward> {
        let opts = self.config.options();
        let mut x = self.embed(tokens)?;
        let mut caches = Vec::with_capacity(eff.len());
        for (layer, heads) in self.params.layers.iter().zip(eff) {
            let (z, c) = layer_forward(&x, layer, heads, opts)?;
            caches.push(c);
            x = z;
        }
        let (h, lnf) = if opts.layer_norm {
            let (h, c) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
            (h, Some(c))
        } else {
            (x, None)
        };
        let pooled = col_sums(&h).scale(1.0 / h.rows() as f64)?;
        let logits = add_row(&pooled.matmul(&self.params.w_cls)?, &self.params.b_cls);
        Ok(Forward {
            caches,
            lnf,
            pooled,
            logits,
        })
    }

    /// Class logits for one sequence (`1 × classes`).
    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward(tokens, &self.effective()?)?.logits)
    }

    /// The matrices each layer's attention consumes (post-norm inputs), one per layer.
    pub fn attention_inputs(&self, tokens: &[usize]) -> Result<Vec<Matrix>> {
        Ok(self
            .forward(tokens, &self.effective()?)?
            .caches
            .into_iter()
            .map(|c| c.u)
            .collect())
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let eff = self.effective()?;
        let mut total = 0.0;
        for ex in batch {
            total += cross_entropy(&self.forward(&ex.tokens, &eff)?.logits, ex.label)?.0;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, ModelParams)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient of an empty batch".into()));
        }
        let eff = self.effective()?;
        let mut grad = self.params.zeros_like()?;
        let inv_b = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for ex in batch {
            let fw = self.forward(&ex.tokens, &eff)?;
            let (loss, probs) = cross_entropy(&fw.logits, ex.label)?;
            total += loss;
            let mut dlogits = probs;
            dlogits[ex.label] -= 1.0;
            dlogits.iter_mut().for_each(|v| *v *= inv_b);
            let dlogits = Matrix::from_raw(1, dlogits.len(), dlogits);
            add_assign(&mut grad.w_cls, &fw.pooled.t_matmul(&dlogits)?);
            add_assign(&mut grad.b_cls, &dlogits);
            let dpooled = dlogits.matmul_t(&self.params.w_cls)?;
            let n = ex.tokens.len();
            let dm = dpooled.cols();
            let dh = Matrix::from_fn(n, dm, |_, j| dpooled[(0, j)] / n as f64)?;
            let mut dx = match &fw.lnf {
                Some(c) => layer_norm_backward(&dh, &self.params.lnf_g, c, &mut grad.lnf_g, &mut grad.lnf_b),
                None => dh,
            };
            for (i, cache) in fw.caches.iter().enumerate().rev() {
                dx = layer_backward(dx, &self.params.layers[i], &eff[i], cache, &mut grad.layers[i])?;
            }
            for (i, &t) in ex.tokens.iter().enumerate() {
                let row = dx.row(i);
                for (j, &r) in row.iter().enumerate().take(dm) {
                    grad.token_emb[(t, j)] += r;
                    grad.pos_emb[(i, j)] += r;
                }
            }
        }
        Ok((total * inv_b, grad))
    }

    /// Mean loss and accuracy (argmax, first index on ties).
    pub fn evaluate(&self, examples: &[Example]) -> Result<(f64, f64)> {
        if examples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let eff = self.effective()?;
        let (mut loss, mut hits) = (0.0, 0usize);
        for ex in examples {
            let logits = self.forward(&ex.tokens, &eff)?.logits;
            loss += cross_entropy(&logits, ex.label)?.0;
            if argmax(logits.as_slice()) == ex.label {
                hits += 1;
            }
        }
        let n = examples.len() as f64;
        Ok((loss / n, hits as f64 / n))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(−log softmax(logits)[label], softmax(logits))`.
fn cross_entropy(logits: &Matrix, label: usize) -> Result<(f64, Vec<f64>)> {
    let z = logits.as_slice();
    if label >= z.len() {
        return Err(Error::dim(format!("label {label} outside {} classes", z.len())));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = z.iter().map(|v| (v - lse).exp()).collect();
    Ok((lse - z[label], probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_forward;
    use crate::conditioning::CorrectionMode;
    use crate::harness::task::synth_task_with_len;

    fn micro(conditioning: Conditioning) -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            heads: 2,
            d_model: 4,
            d_head: 2,
            seq_len: 5,
            ffn_width: 6,
            layer_norm: true,
            feedforward: true,
            conditioning,
            seed: 21,
        }
    }

    fn gradient_check(cfg: TransformerConfig) {
        let model = Model::new(cfg.clone()).unwrap();
        let batch = synth_task_with_len(5, 3, 0, cfg.seq_len).unwrap().train;
        let (_, grad) = model.loss_and_grad(&batch).unwrap();
        let names = model.params.names();
        let h = 1e-4;
        for (t, g) in grad.tensors().into_iter().enumerate() {
            let mut fd = vec![0.0; g.len()];
            for (e, slot) in fd.iter_mut().enumerate() {
                let mut probe = model.clone();
                let base = probe.params.tensors()[t].as_slice()[e];
                probe.params.tensors_mut()[t].as_mut_slice()[e] = base + h;
                let plus = probe.loss(&batch).unwrap();
                probe.params.tensors_mut()[t].as_mut_slice()[e] = base - h;
                let minus = probe.loss(&batch).unwrap();
                *slot = (plus - minus) / (2.0 * h);
            }
            let fd = Matrix::new(g.rows(), g.cols(), fd).unwrap();
            let rel = g.rel_frobenius_diff(&fd, 1e-9).unwrap();
            assert!(rel <= 1e-4, "{}: relative error {rel:e}", names[t]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(micro(Conditioning::DiagonalShift { lambda: 2.0 }));
        gradient_check(micro(Conditioning::Off));
    }

    #[test]
    fn gradients_without_norms() {
        let mut cfg = micro(Conditioning::SvdCap);
        cfg.layer_norm = false;
        gradient_check(cfg);
    }

    #[test]
    fn off_equals_zeroed_corrections() {
        let off = Model::new(micro(Conditioning::Off)).unwrap();
        let mode = CorrectionMode::DiagonalShift { lambda: 10.0 };
        let zeroed = (0..2)
            .map(|_| (0..2).map(|_| CorrectionSet::zeroed(4, 2, mode)).collect())
            .collect();
        let shifted = Model::from_params(micro(Conditioning::DiagonalShift { lambda: 10.0 }), off.params.clone())
            .unwrap()
            .with_corrections(Some(zeroed));
        let tokens = [1, 9, 30, 0, 12];
        assert_eq!(off.logits(&tokens).unwrap(), shifted.logits(&tokens).unwrap());
        let layer = &off.params.layers[0];
        let x = Matrix::from_fn(5, 4, |i, j| (i as f64 - j as f64) * 0.3).unwrap();
        let zs: Vec<_> = (0..2).map(|_| CorrectionSet::zeroed(4, 2, mode)).collect();
        assert_eq!(
            forward_layer(&x, layer, None, LayerOptions::default()).unwrap(),
            forward_layer(&x, layer, Some(&zs), LayerOptions::default()).unwrap()
        );
    }

    #[test]
    fn single_head_reduces_to_attention_plus_residual() {
        let mut cfg = micro(Conditioning::SvdCap);
        cfg.heads = 1;
        cfg.d_head = 4;
        let model = Model::new(cfg).unwrap();
        let mut layer = model.params.layers[0].clone();
        layer.w_o = Matrix::identity(4).unwrap();
        let x = Matrix::from_fn(5, 4, |i, j| ((i * 4 + j) as f64 * 0.41).sin()).unwrap();
        let opts = LayerOptions {
            layer_norm: false,
            feedforward: false,
        };
        let cs = model.corrections(0).unwrap();
        let got = forward_layer(&x, &layer, Some(cs), opts).unwrap();
        let want = attention_forward(&x, &layer.heads[0], Some(&cs[0]))
            .unwrap()
            .add(&x)
            .unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TransformerConfig::reference();
        assert!(cfg.validate().is_ok());
        cfg.d_head = 15;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TransformerConfig::reference();
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TransformerConfig::reference();
        cfg.conditioning = Conditioning::DiagonalShift { lambda: 1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn names_align_with_tensors() {
        let p = ModelParams::init(&micro(Conditioning::Off)).unwrap();
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.names()[2], "layer0.head0.w_q");
    }

    #[test]
    fn wrong_sequence_length_rejected() {
        let model = Model::new(micro(Conditioning::Off)).unwrap();
        assert!(model.logits(&[1, 2, 3]).is_err());
        assert!(model.logits(&[1, 2, 3, 4, 99]).is_err());
    }
}
