//! A small post-norm transformer encoder (BERT layout) with hand-written
//! backpropagation, used for desk-scale pretraining and fine-tuning runs.
//!
//! All parameters live in one flat `f64` buffer so that optimizers,
//! checkpoints and finite-difference checks can treat them uniformly.

use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{LayoutBuilder, Slot};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state of the leading `[CLS]` position.
    First,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub pooling: Pooling,
    pub init_std: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// 2 layers, 4 heads, hidden size 128.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 128,
            layers: 2,
            heads: 4,
            intermediate: 512,
            max_positions: 128,
            pooling: Pooling::First,
            init_std: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.intermediate == 0 || self.max_positions < 2 {
            return Err(Error::Config("intermediate size and max_positions too small".into()));
        }
        Ok(())
    }
}

/// Contract every trainable encoder satisfies.
pub trait EncoderModel {
    fn vocab_size(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    /// Per-parameter weight-decay flags, aligned with [`Self::parameters`].
    fn decay_mask(&self) -> Vec<bool>;

    fn hidden_states(&self, ids: &[u32]) -> Array2<f64>;
    fn mlm_logits(&self, ids: &[u32]) -> Array2<f64>;
    fn pooled(&self, ids: &[u32]) -> Array1<f64>;

    /// Summed cross-entropy over supervised positions and their count.
    /// Gradients of `scale * loss` are added into `grads` when given.
    fn mlm_loss(
        &self,
        ids: &[u32],
        labels: &[i64],
        ignore_label: i64,
        scale: f64,
        grads: Option<&mut [f64]>,
    ) -> (f64, usize);

    fn attach_classifier(&mut self, num_labels: usize, seed: u64);
    fn num_labels(&self) -> Option<usize>;
    fn classifier_logits(&self, ids: &[u32]) -> Vec<f64>;
    /// Cross-entropy for one labeled sequence, gradients of `scale * loss`
    /// added into `grads` when given.
    fn classifier_loss(&self, ids: &[u32], label: usize, scale: f64, grads: Option<&mut [f64]>) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln1_g: Slot,
    ln1_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderSlots {
    tok_emb: Slot,
    pos_emb: Slot,
    emb_ln_g: Slot,
    emb_ln_b: Slot,
    layers: Vec<LayerSlots>,
    mlm_w: Slot,
    mlm_b: Slot,
    mlm_ln_g: Slot,
    mlm_ln_b: Slot,
    mlm_bias: Slot,
    pool_w: Slot,
    pool_b: Slot,
}

#[derive(Debug, Clone, PartialEq)]
struct ClassifierSlots {
    w: Slot,
    b: Slot,
    num_labels: usize,
}

impl EncoderSlots {
    fn build(c: &EncoderConfig, b: &mut LayoutBuilder) -> Self {
        let d = c.hidden;
        let tok_emb = b.matrix(c.vocab_size, d);
        let pos_emb = b.matrix(c.max_positions, d);
        let emb_ln_g = b.vector(d);
        let emb_ln_b = b.vector(d);
        let layers = (0..c.layers)
            .map(|_| LayerSlots {
                wq: b.matrix(d, d),
                bq: b.vector(d),
                wk: b.matrix(d, d),
                bk: b.vector(d),
                wv: b.matrix(d, d),
                bv: b.vector(d),
                wo: b.matrix(d, d),
                bo: b.vector(d),
                ln1_g: b.vector(d),
                ln1_b: b.vector(d),
                w1: b.matrix(d, c.intermediate),
                b1: b.vector(c.intermediate),
                w2: b.matrix(c.intermediate, d),
                b2: b.vector(d),
                ln2_g: b.vector(d),
                ln2_b: b.vector(d),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            mlm_w: b.matrix(d, d),
            mlm_b: b.vector(d),
            mlm_ln_g: b.vector(d),
            mlm_ln_b: b.vector(d),
            mlm_bias: b.vector(c.vocab_size),
            pool_w: b.matrix(d, d),
            pool_b: b.vector(d),
        }
    }

    fn layer_norm_gains(&self) -> Vec<Slot> {
        let mut out = vec![self.emb_ln_g, self.mlm_ln_g];
        for l in &self.layers {
            out.push(l.ln1_g);
            out.push(l.ln2_g);
        }
        out
    }

    fn all(&self) -> Vec<Slot> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g,
                l.ln2_b,
            ]);
        }
        out.extend([self.mlm_w, self.mlm_b, self.mlm_ln_g, self.mlm_ln_b, self.mlm_bias, self.pool_w, self.pool_b]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    config: EncoderConfig,
    slots: EncoderSlots,
    head: Option<ClassifierSlots>,
    params: Vec<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LnCache,
}

struct ForwardCache {
    emb_ln: LnCache,
    layers: Vec<LayerCache>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn linear(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let mean_d = dxhat.mean_axis(Axis(1)).expect("non-empty rows");
    let mean_dx = (&dxhat * &cache.xhat).mean_axis(Axis(1)).expect("non-empty rows");
    let dx = (dxhat - &mean_d.insert_axis(Axis(1)) - &cache.xhat * &mean_dx.insert_axis(Axis(1)))
        * cache.inv_std.view().insert_axis(Axis(1));
    (dx, dg, db)
}

fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    m
}

/// Accumulates local gradients into the flat gradient buffer.
struct Grads<'a> {
    buf: &'a mut [f64],
}

impl Grads<'_> {
    /// Adds `a^T b` in place.
    fn add_at_b(&mut self, slot: Slot, a: &Array2<f64>, b: &Array2<f64>) {
        general_mat_mul(1.0, &a.t(), b, 1.0, &mut slot.view_mut(self.buf));
    }

    fn add_vec(&mut self, slot: Slot, g: &Array1<f64>) {
        let mut view = slot.view_mut(self.buf);
        view.row_mut(0).scaled_add(1.0, g);
    }
}

impl TinyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut builder = LayoutBuilder::default();
        let slots = EncoderSlots::build(&config, &mut builder);
        let mut params = vec![0.0; builder.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        for slot in slots.all() {
            if slot.decay {
                params[slot.range()].iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            }
        }
        for slot in slots.layer_norm_gains() {
            params[slot.range()].fill(1.0);
        }
        Ok(Self { config, slots, head: None, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let p = &self.params;
        let tok = self.slots.tok_emb.view(p);
        let pos = self.slots.pos_emb.view(p);
        let mut x = Array2::zeros((ids.len(), self.config.hidden));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(i);
        }
        x
    }

    fn check_ids(&self, ids: &[u32]) {
        assert!(!ids.is_empty(), "empty sequence");
        assert!(ids.len() <= self.config.max_positions, "sequence longer than max_positions");
        assert!(ids.iter().all(|&i| (i as usize) < self.config.vocab_size), "token id outside vocabulary");
    }

    fn forward(&self, ids: &[u32]) -> (Array2<f64>, ForwardCache) {
        self.check_ids(ids);
        let p = &self.params;
        let s = &self.slots;
        let (mut h, emb_ln) = layer_norm(&self.embed(ids), s.emb_ln_g.vector(p), s.emb_ln_b.vector(p));
        let dh = self.config.hidden / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(s.layers.len());
        for ls in &s.layers {
            let hv = h.view();
            let q = linear(&hv, ls.wq.view(p), ls.bq.vector(p));
            let k = linear(&hv, ls.wk.view(p), ls.bk.vector(p));
            let v = linear(&hv, ls.wv.view(p), ls.bv.vector(p));
            let mut ctx = Array2::zeros(h.raw_dim());
            let mut attn = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let a = softmax_rows(scores);
                ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
                attn.push(a);
            }
            let o = linear(&ctx.view(), ls.wo.view(p), ls.bo.vector(p));
            let (a, ln1) = layer_norm(&(&h + &o), ls.ln1_g.vector(p), ls.ln1_b.vector(p));
            let f1 = linear(&a.view(), ls.w1.view(p), ls.b1.vector(p));
            let g = f1.mapv(gelu);
            let f2 = linear(&g.view(), ls.w2.view(p), ls.b2.vector(p));
            let (out, ln2) = layer_norm(&(&a + &f2), ls.ln2_g.vector(p), ls.ln2_b.vector(p));
            layers.push(LayerCache { input: h, q, k, v, attn, ctx, ln1, a, f1, g, ln2 });
            h = out;
        }
        (h, ForwardCache { emb_ln, layers })
    }

    fn backward(&self, ids: &[u32], cache: &ForwardCache, mut dh: Array2<f64>, grads: &mut Grads) {
        let p = &self.params;
        let s = &self.slots;
        let heads = self.config.heads;
        let dhd = self.config.hidden / heads;
        let scale = 1.0 / (dhd as f64).sqrt();
        for (ls, lc) in s.layers.iter().zip(&cache.layers).rev() {
            let (dz2, dg2, db2) = layer_norm_backward(&dh, &lc.ln2, ls.ln2_g.vector(p));
            grads.add_vec(ls.ln2_g, &dg2);
            grads.add_vec(ls.ln2_b, &db2);

            grads.add_at_b(ls.w2, &lc.g, &dz2);
            grads.add_vec(ls.b2, &dz2.sum_axis(Axis(0)));
            let dg = dz2.dot(&ls.w2.view(p).t());
            let df1 = dg * &lc.f1.mapv(gelu_grad);
            grads.add_at_b(ls.w1, &lc.a, &df1);
            grads.add_vec(ls.b1, &df1.sum_axis(Axis(0)));
            let da = dz2 + df1.dot(&ls.w1.view(p).t());

            let (dz1, dg1, db1) = layer_norm_backward(&da, &lc.ln1, ls.ln1_g.vector(p));
            grads.add_vec(ls.ln1_g, &dg1);
            grads.add_vec(ls.ln1_b, &db1);

            grads.add_at_b(ls.wo, &lc.ctx, &dz1);
            grads.add_vec(ls.bo, &dz1.sum_axis(Axis(0)));
            let dctx = dz1.dot(&ls.wo.view(p).t());

            let mut dq = Array2::zeros(dctx.raw_dim());
            let mut dk = Array2::zeros(dctx.raw_dim());
            let mut dv = Array2::zeros(dctx.raw_dim());
            for (head, a) in lc.attn.iter().enumerate() {
                let cols = s![.., head * dhd..(head + 1) * dhd];
                let dctx_h = dctx.slice(cols);
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
                let da_h = dctx_h.dot(&lc.v.slice(cols).t());
                let row_dot = (&da_h * a).sum_axis(Axis(1));
                let ds = a * &(da_h - &row_dot.insert_axis(Axis(1)));
                dq.slice_mut(cols).assign(&(ds.dot(&lc.k.slice(cols)) * scale));
                dk.slice_mut(cols).assign(&(ds.t().dot(&lc.q.slice(cols)) * scale));
            }

            let mut dinput = dz1;
            for (w, b, d) in [(ls.wq, ls.bq, &dq), (ls.wk, ls.bk, &dk), (ls.wv, ls.bv, &dv)] {
                grads.add_at_b(w, &lc.input, d);
                grads.add_vec(b, &d.sum_axis(Axis(0)));
                dinput += &d.dot(&w.view(p).t());
            }
            dh = dinput;
        }

        let (dx, dg, db) = layer_norm_backward(&dh, &cache.emb_ln, s.emb_ln_g.vector(p));
        grads.add_vec(s.emb_ln_g, &dg);
        grads.add_vec(s.emb_ln_b, &db);
        let mut tok = s.tok_emb.view_mut(grads.buf);
        for (i, &id) in ids.iter().enumerate() {
            let mut row = tok.row_mut(id as usize);
            row += &dx.row(i);
        }
        let mut pos = s.pos_emb.view_mut(grads.buf);
        for i in 0..ids.len() {
            let mut row = pos.row_mut(i);
            row += &dx.row(i);
        }
    }

    fn mlm_head(&self, hidden: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>, LnCache) {
        let p = &self.params;
        let s = &self.slots;
        let t_pre = linear(&hidden.view(), s.mlm_w.view(p), s.mlm_b.vector(p));
        let (u, ln) = layer_norm(&t_pre.mapv(gelu), s.mlm_ln_g.vector(p), s.mlm_ln_b.vector(p));
        let logits = u.dot(&s.tok_emb.view(p).t()) + s.mlm_bias.vector(p);
        (logits, t_pre, u, ln)
    }

    fn pool(&self, hidden: &Array2<f64>) -> Array1<f64> {
        match self.config.pooling {
            Pooling::First => hidden.row(0).to_owned(),
            Pooling::Mean => hidden.mean_axis(Axis(0)).expect("non-empty sequence"),
        }
    }

    /// Pooler output `tanh(pooled W + b)` as a 1 x hidden matrix.
    fn pooler(&self, hidden: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let pooled = self.pool(hidden).insert_axis(Axis(0));
        let z = linear(&pooled.view(), self.slots.pool_w.view(p), self.slots.pool_b.vector(p)).mapv(f64::tanh);
        (pooled, z)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            num_labels: self.head.as_ref().map(|h| h.num_labels),
            num_parameters: self.params.len(),
        };
        let header_path = dir.join("model.json");
        fs::write(&header_path, serde_json::to_string_pretty(&header).expect("header serializes"))
            .map_err(|e| Error::io(&header_path, e))?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bin = dir.join("model.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header_path = dir.join("model.json");
        let raw = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&raw).map_err(|e| Error::parse(header_path.display().to_string(), e.to_string()))?;
        let mut model = TinyEncoder::new(header.config)?;
        if let Some(n) = header.num_labels {
            model.attach_classifier(n, 0);
        }
        let bin = dir.join("model.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != model.params.len() * 8 || header.num_parameters != model.params.len() {
            return Err(Error::Integrity(format!("checkpoint {} has the wrong size", bin.display())));
        }
        for (p, chunk) in model.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    num_labels: Option<usize>,
    num_parameters: usize,
}

impl EncoderModel for TinyEncoder {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        let mut slots = self.slots.all();
        if let Some(h) = &self.head {
            slots.extend([h.w, h.b]);
        }
        for slot in slots {
            mask[slot.range()].fill(slot.decay);
        }
        mask
    }

    fn hidden_states(&self, ids: &[u32]) -> Array2<f64> {
        self.forward(ids).0
    }

    fn mlm_logits(&self, ids: &[u32]) -> Array2<f64> {
        self.mlm_head(&self.forward(ids).0).0
    }

    fn pooled(&self, ids: &[u32]) -> Array1<f64> {
        self.pooler(&self.forward(ids).0).1.row(0).to_owned()
    }

    fn mlm_loss(
        &self,
        ids: &[u32],
        labels: &[i64],
        ignore_label: i64,
        scale: f64,
        grads: Option<&mut [f64]>,
    ) -> (f64, usize) {
        assert_eq!(ids.len(), labels.len(), "labels must align with ids");
        let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore_label).collect();
        if positions.is_empty() {
            return (0.0, 0);
        }
        let (hidden, cache) = self.forward(ids);
        let selected = hidden.select(Axis(0), &positions);
        let (logits, t_pre, u, ln) = self.mlm_head(&selected);

        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (r, &pos) in positions.iter().enumerate() {
            let row = logits.row(r);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.mapv(|v| (v - max).exp()).sum().ln() + max;
            let target = labels[pos] as usize;
            loss += lse - row[target];
            let mut drow = dlogits.row_mut(r);
            drow.assign(&row.mapv(|v| (v - lse).exp() * scale));
            drow[target] -= scale;
        }

        if let Some(buf) = grads {
            let p = &self.params;
            let s = &self.slots;
            let mut grads = Grads { buf };
            grads.add_at_b(s.tok_emb, &dlogits, &u);
            grads.add_vec(s.mlm_bias, &dlogits.sum_axis(Axis(0)));
            let du = dlogits.dot(&s.tok_emb.view(p));
            let (dt, dg, db) = layer_norm_backward(&du, &ln, s.mlm_ln_g.vector(p));
            grads.add_vec(s.mlm_ln_g, &dg);
            grads.add_vec(s.mlm_ln_b, &db);
            let dt_pre = dt * &t_pre.mapv(gelu_grad);
            grads.add_at_b(s.mlm_w, &selected, &dt_pre);
            grads.add_vec(s.mlm_b, &dt_pre.sum_axis(Axis(0)));
            let dsel = dt_pre.dot(&s.mlm_w.view(p).t());
            let mut dh = Array2::zeros(hidden.raw_dim());
            for (r, &pos) in positions.iter().enumerate() {
                dh.row_mut(pos).assign(&dsel.row(r));
            }
            self.backward(ids, &cache, dh, &mut grads);
        }
        (loss, positions.len())
    }

    fn attach_classifier(&mut self, num_labels: usize, seed: u64) {
        assert!(num_labels >= 2, "a classifier needs at least two labels");
        let start = self.slots.pool_b.range().end;
        self.params.truncate(start);
        let mut builder = LayoutBuilder::starting_at(start);
        let w = builder.matrix(self.config.hidden, num_labels);
        let b = builder.vector(num_labels);
        self.params.resize(builder.total(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.config.init_std).expect("valid std");
        self.params[w.range()].iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        self.head = Some(ClassifierSlots { w, b, num_labels });
    }

    fn num_labels(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.num_labels)
    }

    fn classifier_logits(&self, ids: &[u32]) -> Vec<f64> {
        let head = self.head.as_ref().expect("classifier attached");
        let (hidden, _) = self.forward(ids);
        let (_, z) = self.pooler(&hidden);
        let p = &self.params;
        linear(&z.view(), head.w.view(p), head.b.vector(p)).row(0).to_vec()
    }

    fn classifier_loss(&self, ids: &[u32], label: usize, scale: f64, grads: Option<&mut [f64]>) -> f64 {
        let head = self.head.as_ref().expect("classifier attached");
        assert!(label < head.num_labels, "label outside classifier range");
        let p = &self.params;
        let (hidden, cache) = self.forward(ids);
        let (pooled, z) = self.pooler(&hidden);
        let logits = linear(&z.view(), head.w.view(p), head.b.vector(p));
        let row = logits.row(0);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.mapv(|v| (v - max).exp()).sum().ln() + max;
        let loss = lse - row[label];

        if let Some(buf) = grads {
            let s = &self.slots;
            let mut grads = Grads { buf };
            let mut dlogits = logits.mapv(|v| (v - lse).exp() * scale);
            dlogits[[0, label]] -= scale;
            grads.add_at_b(head.w, &z, &dlogits);
            grads.add_vec(head.b, &dlogits.sum_axis(Axis(0)));
            let dz = dlogits.dot(&head.w.view(p).t());
            let dzpre = dz * &z.mapv(|t| 1.0 - t * t);
            grads.add_at_b(s.pool_w, &pooled, &dzpre);
            grads.add_vec(s.pool_b, &dzpre.sum_axis(Axis(0)));
            let dpooled = dzpre.dot(&s.pool_w.view(p).t()).row(0).to_owned();
            let mut dh = Array2::zeros(hidden.raw_dim());
            match self.config.pooling {
                Pooling::First => dh.row_mut(0).assign(&dpooled),
                Pooling::Mean => {
                    let share = dpooled / ids.len() as f64;
                    for mut row in dh.rows_mut() {
                        row.assign(&share);
                    }
                }
            }
            self.backward(ids, &cache, dh, &mut grads);
        }
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyEncoder {
        TinyEncoder::new(EncoderConfig {
            hidden: 8,
            heads: 2,
            intermediate: 16,
            max_positions: 8,
            layers: 2,
            ..EncoderConfig::tiny(11)
        })
        .unwrap()
    }

    #[test]
    fn tiny_shapes() {
        let m = TinyEncoder::new(EncoderConfig::tiny(50)).unwrap();
        assert_eq!(m.hidden_states(&[1, 2, 3]).dim(), (3, 128));
        assert_eq!(m.mlm_logits(&[1, 2, 3]).dim(), (3, 50));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(&x, g.view(), b.view());
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn all_ignore_labels_contribute_nothing() {
        let m = small();
        let mut grads = vec![0.0; m.num_parameters()];
        let (loss, n) = m.mlm_loss(&[1, 2, 3], &[-100, -100, -100], -100, 1.0, Some(&mut grads));
        assert_eq!((loss, n), (0.0, 0));
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn classifier_head_attaches_after_encoder() {
        let mut m = small();
        let before = m.num_parameters();
        m.attach_classifier(3, 1);
        assert_eq!(m.num_parameters(), before + 8 * 3 + 3);
        assert_eq!(m.classifier_logits(&[1, 2]).len(), 3);
        m.attach_classifier(2, 1);
        assert_eq!(m.num_parameters(), before + 8 * 2 + 2);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = small();
        m.attach_classifier(2, 5);
        m.save(dir.path()).unwrap();
        assert_eq!(TinyEncoder::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn decay_mask_excludes_norms_and_biases() {
        let m = small();
        let mask = m.decay_mask();
        assert!(mask[m.slots.tok_emb.range()].iter().all(|&d| d));
        assert!(mask[m.slots.emb_ln_g.range()].iter().all(|&d| !d));
        assert!(mask[m.slots.mlm_bias.range()].iter().all(|&d| !d));
    }

    fn fd_check(m: &mut TinyEncoder, f: impl Fn(&TinyEncoder, Option<&mut [f64]>) -> f64) {
        let mut analytic = vec![0.0; m.num_parameters()];
        f(m, Some(&mut analytic));
        let h = 1e-5;
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for i in (0..m.num_parameters()).step_by(7) {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = f(m, None);
            m.params[i] = orig - h;
            let down = f(m, None);
            m.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (numeric - analytic[i]).powi(2);
            norm_a += analytic[i].powi(2);
            norm_n += numeric.powi(2);
        }
        let worst = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt());
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let mut m = small();
        let ids = [2u32, 5, 4, 7, 9, 3];
        let labels = [-100i64, 5, -100, 7, 1, -100];
        fd_check(&mut m, |m, g| m.mlm_loss(&ids, &labels, -100, 1.0, g).0);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        for pooling in [Pooling::First, Pooling::Mean] {
            let mut m = small();
            m.config.pooling = pooling;
            m.attach_classifier(3, 2);
            let ids = [2u32, 5, 4, 7, 3];
            fd_check(&mut m, |m, g| m.classifier_loss(&ids, 1, 1.0, g));
        }
    }
}
