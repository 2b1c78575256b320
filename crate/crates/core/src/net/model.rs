use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::RegressionHead;
use super::lora::{dropout_mask, LoraAdapter};
use super::nf4::{dequantize_nf4, quantize_nf4, QuantizedWeight};
use super::ops::{
    all_finite, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, normal_matrix, softmax_prefix, LnCache,
};
use super::{ModelConfig, NetError};
use crate::ingest::N_MELS;
use crate::scalar::Scalar;
use crate::windowing::{vocab, WindowExample};

/// Positions available to the text index embedding; longer inputs reuse the
/// last slot.
pub const MAX_TEXT_POS: usize = 512;

const TYPE_AUDIO: usize = 0;
const TYPE_TRANSCRIPT: usize = 1;
const TYPE_PROMPT: usize = 2;

/// One pre-LN transformer block. Projection weights are `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer<S> {
    pub ln1_g: Array1<S>,
    pub ln1_b: Array1<S>,
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub ln2_g: Array1<S>,
    pub ln2_b: Array1<S>,
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

impl<S: Scalar> BaseLayer<S> {
    pub(crate) const QUANTIZED: [&'static str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

    pub(crate) fn matrix(&self, name: &str) -> &Array2<S> {
        match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w1" => &self.w1,
            "w2" => &self.w2,
            _ => unreachable!("unknown matrix {name}"),
        }
    }

    pub(crate) fn matrix_mut(&mut self, name: &str) -> &mut Array2<S> {
        match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w1" => &mut self.w1,
            "w2" => &mut self.w2,
            _ => unreachable!("unknown matrix {name}"),
        }
    }

    pub(crate) fn vector_mut(&mut self, name: &str) -> Option<&mut Array1<S>> {
        Some(match name {
            "ln1_g" => &mut self.ln1_g,
            "ln1_b" => &mut self.ln1_b,
            "ln2_g" => &mut self.ln2_g,
            "ln2_b" => &mut self.ln2_b,
            "b1" => &mut self.b1,
            "b2" => &mut self.b2,
            _ => return None,
        })
    }

    fn cast<T: Scalar>(&self) -> BaseLayer<T> {
        let m = |a: &Array2<S>| a.mapv(|v| T::lit(v.as_f64()));
        let v = |a: &Array1<S>| a.mapv(|v| T::lit(v.as_f64()));
        BaseLayer {
            ln1_g: v(&self.ln1_g),
            ln1_b: v(&self.ln1_b),
            wq: m(&self.wq),
            wk: m(&self.wk),
            wv: m(&self.wv),
            wo: m(&self.wo),
            ln2_g: v(&self.ln2_g),
            ln2_b: v(&self.ln2_b),
            w1: m(&self.w1),
            b1: v(&self.b1),
            w2: m(&self.w2),
            b2: v(&self.b2),
        }
    }
}

/// Frozen embeddings and transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<S> {
    pub tok_emb: Array2<S>,
    pub type_emb: Array2<S>,
    pub pos_emb: Array2<S>,
    /// `d_model × N_MELS`
    pub audio_proj: Array2<S>,
    pub audio_bias: Array1<S>,
    pub layers: Vec<BaseLayer<S>>,
    /// NF4 codes of each layer's projection matrices when the base is
    /// quantized; the dense matrices then hold their dequantized values.
    pub quantized: Option<Vec<Vec<QuantizedWeight>>>,
}

impl BaseModel<f32> {
    /// Deterministic random base for `cfg.base_seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
        let d = cfg.d_model;
        let f = cfg.ffn_mult * d;
        let tok_emb = normal_matrix(&mut rng, cfg.vocab_size, d, 1.0);
        let type_emb = normal_matrix(&mut rng, 3, d, 1.0);
        let pos_emb = normal_matrix(&mut rng, MAX_TEXT_POS, d, 0.5);
        let audio_proj = normal_matrix(&mut rng, d, N_MELS, 1.0 / (N_MELS as f64).sqrt());
        let audio_bias = Array1::zeros(d);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| BaseLayer {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: normal_matrix(&mut rng, d, d, inv(d)),
                wk: normal_matrix(&mut rng, d, d, inv(d)),
                wv: normal_matrix(&mut rng, d, d, inv(d)),
                wo: normal_matrix(&mut rng, d, d, inv(d)),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: normal_matrix(&mut rng, f, d, inv(d)),
                b1: Array1::zeros(f),
                w2: normal_matrix(&mut rng, d, f, inv(f)),
                b2: Array1::zeros(d),
            })
            .collect();
        let mut base = Self { tok_emb, type_emb, pos_emb, audio_proj, audio_bias, layers, quantized: None };
        if cfg.quantize_base {
            base.quantize();
        }
        base
    }

    /// Replaces every projection matrix by its NF4 round-trip.
    pub fn quantize(&mut self) {
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let mut qs = Vec::with_capacity(6);
            for name in BaseLayer::<f32>::QUANTIZED {
                let q = quantize_nf4(layer.matrix(name));
                *layer.matrix_mut(name) = dequantize_nf4(&q);
                qs.push(q);
            }
            all.push(qs);
        }
        self.quantized = Some(all);
    }
}

impl<S: Scalar> BaseModel<S> {
    pub fn cast<T: Scalar>(&self) -> BaseModel<T> {
        let m = |a: &Array2<S>| a.mapv(|v| T::lit(v.as_f64()));
        BaseModel {
            tok_emb: m(&self.tok_emb),
            type_emb: m(&self.type_emb),
            pos_emb: m(&self.pos_emb),
            audio_proj: m(&self.audio_proj),
            audio_bias: self.audio_bias.mapv(|v| T::lit(v.as_f64())),
            layers: self.layers.iter().map(BaseLayer::cast).collect(),
            quantized: self.quantized.clone(),
        }
    }
}

/// The query and value adapters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters<S> {
    pub q: LoraAdapter<S>,
    pub v: LoraAdapter<S>,
}

/// Everything the optimizer updates: the head and, with LoRA, every
/// adapter. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams<S> {
    pub head: RegressionHead<S>,
    pub adapters: Vec<LayerAdapters<S>>,
}

impl<S: Scalar> TrainableParams<S> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = RegressionHead::init(&mut rng, cfg.d_model, cfg.head_hidden);
        let adapters = if cfg.has_adapters() {
            let d = cfg.d_model;
            (0..cfg.n_layers)
                .map(|_| LayerAdapters {
                    q: LoraAdapter::init(&mut rng, cfg.lora_rank, d, d, cfg.lora_alpha),
                    v: LoraAdapter::init(&mut rng, cfg.lora_rank, d, d, cfg.lora_alpha),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { head, adapters }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            head: self.head.zeros_like(),
            adapters: self
                .adapters
                .iter()
                .map(|a| LayerAdapters { q: a.q.zeros_like(), v: a.v.zeros_like() })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.head.n_params() + self.adapters.iter().map(|a| a.q.n_params() + a.v.n_params()).sum::<usize>()
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        let h = &self.head;
        let mut out = vec![
            ("head.ln_g".to_string(), h.ln_g.view().into_dyn()),
            ("head.ln_b".to_string(), h.ln_b.view().into_dyn()),
            ("head.w1".to_string(), h.w1.view().into_dyn()),
            ("head.b1".to_string(), h.b1.view().into_dyn()),
            ("head.w2".to_string(), h.w2.view().into_dyn()),
            ("head.b2".to_string(), h.b2.view().into_dyn()),
        ];
        for (i, a) in self.adapters.iter().enumerate() {
            out.push((format!("layers.{i}.q.lora_a"), a.q.a.view().into_dyn()));
            out.push((format!("layers.{i}.q.lora_b"), a.q.b.view().into_dyn()));
            out.push((format!("layers.{i}.v.lora_a"), a.v.a.view().into_dyn()));
            out.push((format!("layers.{i}.v.lora_b"), a.v.b.view().into_dyn()));
        }
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, S>> {
        let h = &mut self.head;
        let mut out = vec![
            h.ln_g.view_mut().into_dyn(),
            h.ln_b.view_mut().into_dyn(),
            h.w1.view_mut().into_dyn(),
            h.b1.view_mut().into_dyn(),
            h.w2.view_mut().into_dyn(),
            h.b2.view_mut().into_dyn(),
        ];
        for a in &mut self.adapters {
            out.push(a.q.a.view_mut().into_dyn());
            out.push(a.q.b.view_mut().into_dyn());
            out.push(a.v.a.view_mut().into_dyn());
            out.push(a.v.b.view_mut().into_dyn());
        }
        out
    }

    pub fn scale(&mut self, k: S) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn cast<T: Scalar>(&self) -> TrainableParams<T> {
        let m = |a: &Array2<S>| a.mapv(|v| T::lit(v.as_f64()));
        let v = |a: &Array1<S>| a.mapv(|v| T::lit(v.as_f64()));
        let ad = |a: &LoraAdapter<S>| LoraAdapter { a: m(&a.a), b: m(&a.b), scale: T::lit(a.scale.as_f64()) };
        let h = &self.head;
        TrainableParams {
            head: RegressionHead {
                ln_g: v(&h.ln_g),
                ln_b: v(&h.ln_b),
                w1: m(&h.w1),
                b1: v(&h.b1),
                w2: m(&h.w2),
                b2: v(&h.b2),
            },
            adapters: self.adapters.iter().map(|a| LayerAdapters { q: ad(&a.q), v: ad(&a.v) }).collect(),
        }
    }
}

/// Layer-0 input rows for one example: audio tokens, transcript tokens and
/// prompt tokens, with padding removed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput<S> {
    pub x0: Array2<S>,
    pub n_audio: usize,
    pub n_transcript: usize,
}

impl<S> EncodedInput<S> {
    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Adapter dropout active, masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

struct LayerMasks<S> {
    q: Array2<S>,
    v: Array2<S>,
}

struct LayerCache<S> {
    row0: usize,
    ln1: LnCache<S>,
    h: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    uq: Option<Array2<S>>,
    uv: Option<Array2<S>>,
    probs: Vec<Array2<S>>,
    ln2: LnCache<S>,
    f1: Array2<S>,
}

/// Sinusoidal code of a window-relative time in [0, 1].
fn time_embedding<S: Scalar>(tau: f64, d: usize, n_steps: usize) -> Array1<S> {
    let p = tau * n_steps as f64;
    Array1::from_shape_fn(d, |i| {
        let k = (i / 2) as f64;
        let angle = p / 10_000f64.powf(2.0 * k / d as f64);
        S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub base: BaseModel<S>,
    pub params: TrainableParams<S>,
}

impl<S: Scalar> Model<S> {
    /// Base from `cfg.base_seed`, head and adapters from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let base = BaseModel::init(&cfg).cast();
        let params = TrainableParams::init(&cfg, seed);
        Ok(Self { cfg, base, params })
    }

    pub fn from_parts(cfg: ModelConfig, base: BaseModel<S>, params: TrainableParams<S>) -> Result<Self, NetError> {
        cfg.validate()?;
        if params.adapters.len() != if cfg.has_adapters() { cfg.n_layers } else { 0 }
            || base.layers.len() != cfg.n_layers
        {
            return Err(NetError::Config("parameters do not match the config".into()));
        }
        Ok(Self { cfg, base, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { cfg: self.cfg.clone(), base: self.base.cast(), params: self.params.cast() }
    }

    /// Builds the layer-0 input. Padding tokens are dropped, so the last row
    /// is the last non-padding token.
    pub fn encode(&self, ex: &WindowExample) -> Result<EncodedInput<S>, NetError> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        for (position, &token) in ex.transcript_tokens.iter().chain(&ex.prompt_tokens).enumerate() {
            if token as usize >= cfg.vocab_size {
                return Err(NetError::Vocab { token, position });
            }
        }
        let mel = &ex.audio.data;
        if mel.nrows() == 0 || mel.ncols() != N_MELS || !mel.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite { stage: "audio features".into() });
        }
        let n = mel.len() as f64;
        let mean = mel.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = mel.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };

        let na = cfg.n_audio_tokens;
        let frames = mel.nrows();
        let mut pooled = Array2::<S>::zeros((na, N_MELS));
        for g in 0..na {
            let lo = (g * frames / na).min(frames - 1);
            let hi = ((g + 1) * frames / na).max(lo + 1);
            let group = mel.slice(s![lo..hi, ..]);
            let m = group.mean_axis(Axis(0)).expect("non-empty group");
            pooled.row_mut(g).assign(&m.mapv(|v| S::lit((v as f64 - mean) / std)));
        }
        let audio = pooled.dot(&self.base.audio_proj.t()) + &self.base.audio_bias + &self.base.type_emb.row(TYPE_AUDIO);

        let pos = |k: usize| self.base.pos_emb.row(k.min(MAX_TEXT_POS - 1));
        let mut rows: Vec<Array1<S>> = Vec::new();
        for (k, (&t, &tau)) in ex.transcript_tokens.iter().zip(&ex.transcript_times).enumerate() {
            if t == vocab::PAD {
                continue;
            }
            let e = &self.base.tok_emb.row(t as usize)
                + &self.base.type_emb.row(TYPE_TRANSCRIPT)
                + &pos(k)
                + &time_embedding::<S>(tau as f64, d, na);
            rows.push(e);
        }
        let n_transcript = rows.len();
        for (k, &t) in ex.prompt_tokens.iter().enumerate() {
            if t == vocab::PAD {
                continue;
            }
            rows.push(&self.base.tok_emb.row(t as usize) + &self.base.type_emb.row(TYPE_PROMPT) + &pos(k));
        }

        let mut x0 = Array2::zeros((na + rows.len(), d));
        for g in 0..na {
            let te = time_embedding::<S>((g as f64 + 0.5) / na as f64, d, na);
            x0.row_mut(g).assign(&(&audio.row(g) + &te));
        }
        for (i, r) in rows.iter().enumerate() {
            x0.row_mut(na + i).assign(r);
        }
        Ok(EncodedInput { x0, n_audio: na, n_transcript })
    }

    fn adapters(&self, li: usize) -> Option<&LayerAdapters<S>> {
        self.params.adapters.get(li)
    }

    fn masks(&self, len: usize, mode: Mode) -> Option<Vec<LayerMasks<S>>> {
        let Mode::Train { dropout_seed } = mode else { return None };
        if !self.cfg.has_adapters() || self.cfg.lora_dropout == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let d = self.cfg.d_model;
        let p = self.cfg.lora_dropout;
        Some(
            (0..self.cfg.n_layers)
                .map(|li| {
                    let nq = if li + 1 == self.cfg.n_layers { 1 } else { len };
                    LayerMasks { q: dropout_mask(&mut rng, nq, d, p), v: dropout_mask(&mut rng, len, d, p) }
                })
                .collect(),
        )
    }

    /// One block. With `last_only` only the final row is queried and
    /// returned.
    fn layer_forward(
        &self,
        li: usize,
        x: &Array2<S>,
        last_only: bool,
        masks: Option<&LayerMasks<S>>,
    ) -> (Array2<S>, LayerCache<S>) {
        let layer = &self.base.layers[li];
        let len = x.nrows();
        let row0 = if last_only { len - 1 } else { 0 };
        let (h, ln1) = layer_norm(&x.view(), &layer.ln1_g, &layer.ln1_b);
        let hq = h.slice(s![row0.., ..]);
        let mut q = linear(&hq, &layer.wq);
        let k = linear(&h.view(), &layer.wk);
        let mut v = linear(&h.view(), &layer.wv);
        let (mut uq, mut uv) = (None, None);
        if let Some(ad) = self.adapters(li) {
            let (u, dq) = ad.q.delta_rows(&hq, masks.map(|m| &m.q));
            q += &dq;
            uq = Some(u);
            let (u, dv) = ad.v.delta_rows(&h.view(), masks.map(|m| &m.v));
            v += &dv;
            uv = Some(u);
        }

        let dh = self.cfg.head_dim();
        let inv_sqrt = S::one() / S::from_usize(dh).unwrap().sqrt();
        let nr = len - row0;
        let mut o = Array2::zeros((nr, self.cfg.d_model));
        let mut probs = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t());
            sc.mapv_inplace(|v| v * inv_sqrt);
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                softmax_prefix(row.as_slice_mut().expect("contiguous row"), row0 + i + 1);
            }
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let z = x.slice(s![row0.., ..]).to_owned() + linear(&o.view(), &layer.wo);
        let (h2, ln2) = layer_norm(&z.view(), &layer.ln2_g, &layer.ln2_b);
        let f1 = linear(&h2.view(), &layer.w1) + &layer.b1;
        let g = f1.mapv(gelu);
        let y = z + linear(&g.view(), &layer.w2) + &layer.b2;
        (y, LayerCache { row0, ln1, h, q, k, v, uq, uv, probs, ln2, f1 })
    }

    /// Backpropagates `dy` (rows `row0..`) through one block, accumulating
    /// adapter gradients. Returns the input gradient when `need_dx`.
    fn layer_backward(
        &self,
        li: usize,
        c: &LayerCache<S>,
        dy: &Array2<S>,
        masks: Option<&LayerMasks<S>>,
        need_dx: bool,
        grads: Option<&mut LayerAdapters<S>>,
    ) -> Option<Array2<S>> {
        let layer = &self.base.layers[li];
        let dg = dy.dot(&layer.w2);
        let df1 = dg * &c.f1.mapv(gelu_grad);
        let dh2 = df1.dot(&layer.w1);
        let dz = dy + &layer_norm_backward(&dh2.view(), &c.ln2, &layer.ln2_g, None);
        let d_o = dz.dot(&layer.wo);

        let dh = self.cfg.head_dim();
        let inv_sqrt = S::one() / S::from_usize(dh).unwrap().sqrt();
        let len = c.k.nrows();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let mut dk = if need_dx { Some(Array2::zeros(c.k.raw_dim())) } else { None };
        for (hd, p) in c.probs.iter().enumerate() {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let doh = d_o.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = doh.dot(&c.v.slice(cols).t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow).fold(S::zero(), |a, (&x, &y)| a + x * y);
                drow.zip_mut_with(&prow, |x, &y| *x = y * (*x - dot) * inv_sqrt);
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            if let Some(dk) = dk.as_mut() {
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
        }

        let hq = c.h.slice(s![c.row0.., ..]);
        let mut duq_duv = None;
        if let (Some(ad), Some(g)) = (self.adapters(li), grads) {
            let masked = |x: &ArrayView2<S>, m: Option<&Array2<S>>| match m {
                Some(m) => x * m,
                None => x.to_owned(),
            };
            let (uq, uv) = (c.uq.as_ref().unwrap(), c.uv.as_ref().unwrap());
            g.q.b.scaled_add(ad.q.scale, &dq.t().dot(uq));
            let duq = dq.dot(&ad.q.b) * ad.q.scale;
            g.q.a += &duq.t().dot(&masked(&hq, masks.map(|m| &m.q)));
            g.v.b.scaled_add(ad.v.scale, &dv.t().dot(uv));
            let duv = dv.dot(&ad.v.b) * ad.v.scale;
            g.v.a += &duv.t().dot(&masked(&c.h.view(), masks.map(|m| &m.v)));
            duq_duv = Some((duq, duv));
        }
        if !need_dx {
            return None;
        }

        let mut dhq = dq.dot(&layer.wq);
        let mut dh_all = dv.dot(&layer.wv) + dk.expect("computed when dx is needed").dot(&layer.wk);
        if let (Some((duq, duv)), Some(ad)) = (duq_duv, self.adapters(li)) {
            let mut a = duq.dot(&ad.q.a);
            if let Some(m) = masks {
                a *= &m.q;
            }
            dhq += &a;
            let mut b = duv.dot(&ad.v.a);
            if let Some(m) = masks {
                b *= &m.v;
            }
            dh_all += &b;
        }
        dh_all.slice_mut(s![c.row0.., ..]).zip_mut_with(&dhq, |a, &b| *a += b);
        let mut dx = layer_norm_backward(&dh_all.view(), &c.ln1, &layer.ln1_g, None);
        debug_assert_eq!(dx.nrows(), len);
        dx.slice_mut(s![c.row0.., ..]).zip_mut_with(&dz, |a, &b| *a += b);
        Some(dx)
    }

    fn run(&self, x: &EncodedInput<S>, masks: Option<&[LayerMasks<S>]>) -> Result<(Array1<S>, Vec<LayerCache<S>>), NetError> {
        let n = self.cfg.n_layers;
        let mut h = x.x0.clone();
        let mut caches = Vec::with_capacity(n);
        for li in 0..n {
            let (y, cache) = self.layer_forward(li, &h, li + 1 == n, masks.map(|m| &m[li]));
            if !all_finite(&y) {
                return Err(NetError::NonFinite { stage: format!("layer {li}") });
            }
            caches.push(cache);
            h = y;
        }
        Ok((h.row(h.nrows() - 1).to_owned(), caches))
    }

    /// Final hidden state of the last token.
    pub fn features(&self, x: &EncodedInput<S>) -> Result<Array1<S>, NetError> {
        Ok(self.run(x, None)?.0)
    }

    pub fn forward(&self, x: &EncodedInput<S>, mode: Mode) -> Result<S, NetError> {
        let masks = self.masks(x.len(), mode);
        let (h, _) = self.run(x, masks.as_deref())?;
        self.head_output(&h)
    }

    fn head_output(&self, h: &Array1<S>) -> Result<S, NetError> {
        let o = self.params.head.forward(h);
        if o.is_finite() {
            Ok(o)
        } else {
            Err(NetError::NonFinite { stage: "head".into() })
        }
    }

    /// Prediction plus gradients of the loss whose derivative with respect
    /// to the prediction is `dloss(prediction)`.
    pub fn forward_backward(
        &self,
        x: &EncodedInput<S>,
        mode: Mode,
        dloss: impl FnOnce(S) -> S,
    ) -> Result<(S, TrainableParams<S>), NetError> {
        let masks = self.masks(x.len(), mode);
        let (h, caches) = self.run(x, masks.as_deref())?;
        let hc = self.params.head.forward_cached(&h);
        let o = hc.out;
        if !o.is_finite() {
            return Err(NetError::NonFinite { stage: "head".into() });
        }
        let mut grads = self.params.zeros_like();
        let dh = self.params.head.backward(&hc, dloss(o), &mut grads.head);
        if self.cfg.has_adapters() {
            let mut dy = dh.insert_axis(Axis(0));
            for li in (0..self.cfg.n_layers).rev() {
                let m = masks.as_ref().map(|m| &m[li]);
                match self.layer_backward(li, &caches[li], &dy, m, li > 0, grads.adapters.get_mut(li)) {
                    Some(dx) => {
                        if !all_finite(&dx) {
                            return Err(NetError::NonFinite { stage: format!("layer {li} backward") });
                        }
                        dy = dx;
                    }
                    None => break,
                }
            }
        }
        Ok((o, grads))
    }

    /// Head-only step on precomputed features.
    pub fn head_forward_backward(&self, feat: &Array1<S>, dloss: impl FnOnce(S) -> S) -> (S, TrainableParams<S>) {
        let hc = self.params.head.forward_cached(feat);
        let o = hc.out;
        let mut grads = self.params.zeros_like();
        self.params.head.backward(&hc, dloss(o), &mut grads.head);
        (o, grads)
    }
}
