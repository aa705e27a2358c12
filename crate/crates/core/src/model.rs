//! Pre-norm transformer classifier over patch-to-anchor FC representations,
//! with learnable Top-K patch pooling and swappable feed-forward blocks, plus
//! the training loop and stratified cross-validation driver.

use thiserror::Error;

use crate::eval::{auc, Confusion, EvalError, MetricSet};
use crate::kan::{BasisConfig, Block, BlockKind, BlockRole, KanError};
use crate::rng::Rng;
use crate::sampling::Representation;
use crate::tensor::{AdamW, CosineRestarts, Graph, NodeId, Tensor, TensorError, UnaryKind};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("block error: {0}")]
    Kan(#[from] KanError),
    #[error("eval error: {0}")]
    Eval(#[from] EvalError),
    #[error("d_model {d} must be divisible by n_heads {heads}")]
    HeadSplit { d: usize, heads: usize },
    #[error("representation feature width {got} does not match model input {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error("sample is missing a label")]
    MissingLabel,
    #[error("fold has a single class; cannot stratify or score")]
    SingleClassFold,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Anchors per patch row (input feature width).
    pub n_anchors: usize,
    /// Positional feature width (3 per sampling iteration).
    pub pos_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub keep_ratio: f64,
    pub n_classes: usize,
    pub encoder_block: BlockKind,
    pub head_block: BlockKind,
    pub basis: BasisConfig,
}

impl ModelConfig {
    pub fn desk(n_anchors: usize, pos_dim: usize, encoder: BlockKind, head: BlockKind) -> Self {
        ModelConfig {
            n_anchors,
            pos_dim,
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            keep_ratio: 0.8,
            n_classes: 2,
            encoder_block: encoder,
            head_block: head,
            basis: BasisConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    ffn: Block,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    input_w: Tensor,
    input_b: Tensor,
    pos_w: Tensor,
    pos_b: Tensor,
    score_w: Tensor,
    score_b: Tensor,
    layers: Vec<EncoderLayer>,
    head_ln_gamma: Tensor,
    head_ln_beta: Tensor,
    head: Block,
}

/// Number of patches kept by Top-K pooling.
pub fn top_k_count(n: usize, keep_ratio: f64) -> usize {
    ((n as f64 * keep_ratio).floor() as usize).clamp(1, n)
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(ModelError::HeadSplit {
                d: cfg.d_model,
                heads: cfg.n_heads,
            });
        }
        let d = cfg.d_model;
        let scale_in = 1.0 / (cfg.n_anchors as f64).sqrt();
        let scale_d = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayer {
                ln1_gamma: Tensor::filled(&[1, d], 1.0),
                ln1_beta: Tensor::zeros(&[1, d]),
                wq: Tensor::rand_uniform(&[d, d], scale_d, rng),
                bq: Tensor::zeros(&[1, d]),
                wk: Tensor::rand_uniform(&[d, d], scale_d, rng),
                bk: Tensor::zeros(&[1, d]),
                wv: Tensor::rand_uniform(&[d, d], scale_d, rng),
                bv: Tensor::zeros(&[1, d]),
                wo: Tensor::rand_uniform(&[d, d], scale_d, rng),
                bo: Tensor::zeros(&[1, d]),
                ln2_gamma: Tensor::filled(&[1, d], 1.0),
                ln2_beta: Tensor::zeros(&[1, d]),
                ffn: Block::new(cfg.encoder_block, BlockRole::FeedForward, d, d, &cfg.basis, rng),
            })
            .collect();
        Ok(Model {
            input_w: Tensor::rand_uniform(&[cfg.n_anchors, d], scale_in, rng),
            input_b: Tensor::zeros(&[1, d]),
            pos_w: Tensor::rand_uniform(&[cfg.pos_dim, d], 1.0 / (cfg.pos_dim as f64).sqrt(), rng),
            pos_b: Tensor::zeros(&[1, d]),
            score_w: Tensor::rand_uniform(&[d, 1], scale_d, rng),
            score_b: Tensor::zeros(&[1, 1]),
            layers,
            head_ln_gamma: Tensor::filled(&[1, d], 1.0),
            head_ln_beta: Tensor::zeros(&[1, d]),
            head: Block::new(cfg.head_block, BlockRole::Head, d, cfg.n_classes, &cfg.basis, rng),
            cfg: cfg.clone(),
        })
    }

    /// Canonical parameter walk; forward consumes node ids in this order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        let mut p = |name: String, t: &Tensor| out.push((name, t.clone()));
        p("input_w".into(), &self.input_w);
        p("input_b".into(), &self.input_b);
        p("pos_w".into(), &self.pos_w);
        p("pos_b".into(), &self.pos_b);
        p("score_w".into(), &self.score_w);
        p("score_b".into(), &self.score_b);
        for (i, l) in self.layers.iter().enumerate() {
            p(format!("layer{i}.ln1_gamma"), &l.ln1_gamma);
            p(format!("layer{i}.ln1_beta"), &l.ln1_beta);
            p(format!("layer{i}.wq"), &l.wq);
            p(format!("layer{i}.bq"), &l.bq);
            p(format!("layer{i}.wk"), &l.wk);
            p(format!("layer{i}.bk"), &l.bk);
            p(format!("layer{i}.wv"), &l.wv);
            p(format!("layer{i}.bv"), &l.bv);
            p(format!("layer{i}.wo"), &l.wo);
            p(format!("layer{i}.bo"), &l.bo);
            p(format!("layer{i}.ln2_gamma"), &l.ln2_gamma);
            p(format!("layer{i}.ln2_beta"), &l.ln2_beta);
            for (name, t) in l.ffn.params() {
                p(format!("layer{i}.ffn.{name}"), t);
            }
        }
        p("head_ln_gamma".into(), &self.head_ln_gamma);
        p("head_ln_beta".into(), &self.head_ln_beta);
        for (name, t) in self.head.params() {
            p(format!("head.{name}"), t);
        }
        out
    }

    fn param_slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.input_w,
            &mut self.input_b,
            &mut self.pos_w,
            &mut self.pos_b,
            &mut self.score_w,
            &mut self.score_b,
        ];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.push(&mut l.wq);
            out.push(&mut l.bq);
            out.push(&mut l.wk);
            out.push(&mut l.bk);
            out.push(&mut l.wv);
            out.push(&mut l.bv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
            for (_, t) in l.ffn.params_mut() {
                out.push(t);
            }
        }
        out.push(&mut self.head_ln_gamma);
        out.push(&mut self.head_ln_beta);
        for (_, t) in self.head.params_mut() {
            out.push(t);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Load parameters from a checkpoint-style list (walk order and shapes
    /// must match).
    pub fn load_params(&mut self, entries: &[(String, Tensor)]) -> Result<(), ModelError> {
        let expected = self.named_params();
        if entries.len() != expected.len() {
            return Err(ModelError::Tensor(TensorError::Dimension(format!(
                "checkpoint has {} entries, model needs {}",
                entries.len(),
                expected.len()
            ))));
        }
        for ((name_e, t_e), (name, t)) in expected.iter().zip(entries) {
            if name != name_e || t.shape() != t_e.shape() {
                return Err(ModelError::Tensor(TensorError::Dimension(format!(
                    "checkpoint entry {name} {:?} does not match {name_e} {:?}",
                    t.shape(),
                    t_e.shape()
                ))));
            }
        }
        for (slot, (_, t)) in self.param_slots_mut().into_iter().zip(entries) {
            *slot = t.clone();
        }
        Ok(())
    }

    fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| g.input(t, requires_grad))
            .collect()
    }

    /// Forward one subject. Returns the logits node ([1, n_classes]) and the
    /// registered parameter nodes in walk order.
    pub fn forward(
        &self,
        g: &mut Graph,
        rep: &Representation,
        train: bool,
    ) -> Result<(NodeId, Vec<NodeId>), ModelError> {
        if rep.f_bar.cols() != self.cfg.n_anchors || rep.positions.cols() != self.cfg.pos_dim {
            return Err(ModelError::InputWidth {
                got: rep.f_bar.cols(),
                expected: self.cfg.n_anchors,
            });
        }
        let ids = self.register(g, train);
        let mut cursor = 0usize;
        let mut next = |k: usize| {
            let s = &ids[cursor..cursor + k];
            cursor += k;
            s.to_vec()
        };

        let fc = g.input(rep.f_bar.clone(), false);
        let pos = g.input(rep.positions.clone(), false);
        let io = next(6);
        let x0 = g.matmul(fc, io[0])?;
        let x0 = g.add(x0, io[1])?;
        let pe = g.matmul(pos, io[2])?;
        let pe = g.add(pe, io[3])?;
        let mut x = g.add(x0, pe)?;

        // learnable Top-K pooling with score gating
        let raw = g.matmul(x, io[4])?;
        let raw = g.add(raw, io[5])?;
        let scores = g.unary(raw, UnaryKind::Tanh);
        let n = rep.f_bar.rows();
        let k = top_k_count(n, self.cfg.keep_ratio);
        let score_vals = g.value(scores).data().to_vec();
        let mut order: Vec<usize> = (0..n).collect();
        // highest score first; ties broken toward the lower index
        order.sort_by(|&a, &b| {
            score_vals[b]
                .partial_cmp(&score_vals[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = order[..k].to_vec();
        kept.sort_unstable();
        x = g.gather_rows(x, &kept)?;
        let kept_scores = g.gather_rows(scores, &kept)?;
        x = g.col_scale(x, kept_scores)?;

        // pre-norm encoder stack
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        for layer in &self.layers {
            let lp = next(12 + layer.ffn.params().len());
            let ln1 = g.layer_norm(x, lp[0], lp[1], 1e-5)?;
            let q = g.matmul(ln1, lp[2])?;
            let q = g.add(q, lp[3])?;
            let kk = g.matmul(ln1, lp[4])?;
            let kk = g.add(kk, lp[5])?;
            let v = g.matmul(ln1, lp[6])?;
            let v = g.add(v, lp[7])?;
            let mut heads = Vec::with_capacity(nh);
            for h in 0..nh {
                let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
                let kh = g.slice_cols(kk, h * dh, (h + 1) * dh)?;
                let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
                let kt = g.transpose(kh)?;
                let logits = g.matmul(qh, kt)?;
                let scaled = g.scale(logits, 1.0 / (dh as f64).sqrt());
                let attn = g.softmax_rows(scaled);
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let proj = g.matmul(cat, lp[8])?;
            let proj = g.add(proj, lp[9])?;
            x = g.add(x, proj)?;
            let ln2 = g.layer_norm(x, lp[10], lp[11], 1e-5)?;
            let ff = layer.ffn.forward(g, ln2, &lp[12..])?;
            x = g.add(x, ff)?;
        }

        let pooled = g.mean_rows(x);
        let hp = next(2 + self.head.params().len());
        let ln = g.layer_norm(pooled, hp[0], hp[1], 1e-5)?;
        let logits = self.head.forward(g, ln, &hp[2..])?;
        debug_assert_eq!(cursor, ids.len());
        Ok((logits, ids))
    }

    /// Predicted class and softmax probability of class 1.
    pub fn predict(&self, rep: &Representation) -> Result<(u8, f64), ModelError> {
        let mut g = Graph::new();
        let (logits, _) = self.forward(&mut g, rep, false)?;
        let probs = g.softmax_rows(logits);
        let pv = g.value(probs);
        let mut best = 0usize;
        for c in 1..pv.cols() {
            if pv.at(0, c) > pv.at(0, best) {
                best = c;
            }
        }
        Ok((best as u8, pv.at(0, 1)))
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub t_0: u64,
    pub t_mult: u64,
    pub eta_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 0.001,
            weight_decay: 0.0001,
            t_0: 10,
            t_mult: 2,
            eta_min: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Debug)]
pub struct FoldResult {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub metrics: MetricSet,
    pub val_auc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_acc,val_auc\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_acc, r.val_auc
        ));
    }
    out
}

fn evaluate(model: &Model, samples: &[&Representation]) -> Result<(MetricSet, f64), ModelError> {
    let mut labels = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    for rep in samples {
        let label = rep.label.ok_or(ModelError::MissingLabel)?;
        let (pred, score) = model.predict(rep)?;
        labels.push(label);
        preds.push(pred);
        scores.push(score);
    }
    let metrics = MetricSet::from_confusion(&Confusion::tally(&labels, &preds)?);
    let val_auc = auc(&labels, &scores).unwrap_or(0.5);
    Ok((metrics, val_auc))
}

/// Train on one fold. All randomness (init, shuffling) comes from `seed`.
pub fn train_fold(
    train: &[&Representation],
    val: &[&Representation],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<FoldResult, ModelError> {
    let mut init_rng = Rng::stream(seed, 0);
    let mut model = Model::new(cfg, &mut init_rng)?;
    let shapes: Vec<Vec<usize>> = model
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AdamW::new(&shape_refs, tc.lr, tc.weight_decay);
    let schedule = CosineRestarts::new(tc.lr, tc.t_0, tc.t_mult, tc.eta_min);
    let mut shuffle_rng = Rng::stream(seed, 1);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        opt.lr = schedule.lr_at(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut grad_sum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let rep = train[idx];
                let label = rep.label.ok_or(ModelError::MissingLabel)? as usize;
                let mut g = Graph::new();
                let (logits, ids) = model.forward(&mut g, rep, true)?;
                let loss = g.cross_entropy(logits, &[label])?;
                batch_loss += g.value(loss).item();
                g.backward(loss)?;
                for (acc, &id) in grad_sum.iter_mut().zip(&ids) {
                    if let Some(grad) = g.grad(id) {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for t in &mut grad_sum {
                for v in t.data_mut() {
                    *v *= inv;
                }
            }
            let mut slots = model.param_slots_mut();
            let mut params: Vec<Tensor> = slots.iter().map(|t| (**t).clone()).collect();
            opt.step(&mut params, &grad_sum);
            for (slot, p) in slots.iter_mut().zip(params) {
                **slot = p;
            }
            epoch_loss += batch_loss;
        }
        let (metrics, val_auc) = evaluate(&model, val)?;
        history.push(EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: epoch_loss / train.len() as f64,
            val_acc: metrics.accuracy,
            val_auc,
        });
    }
    let (metrics, val_auc) = evaluate(&model, val)?;
    Ok(FoldResult {
        model,
        history,
        metrics,
        val_auc,
    })
}

/// Stratified k-fold assignment: per-class shuffle, dealt round-robin.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::stream(seed, 2);
    let mut assignment = vec![0usize; labels.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        rng.shuffle(&mut idx);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    assignment
}

#[derive(Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
}

/// k-fold stratified cross-validation; fold f trains with seed mixed from
/// (seed, fold index) so folds are independent but reproducible.
pub fn run_cv(
    samples: &[Representation],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<CvResult, ModelError> {
    let labels: Vec<u8> = samples
        .iter()
        .map(|r| r.label.ok_or(ModelError::MissingLabel))
        .collect::<Result<_, _>>()?;
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(ModelError::SingleClassFold);
    }
    let assignment = stratified_folds(&labels, k, seed);
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<&Representation> = samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a != f)
            .map(|(r, _)| r)
            .collect();
        let val: Vec<&Representation> = samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == f)
            .map(|(r, _)| r)
            .collect();
        folds.push(train_fold(&train, &val, cfg, tc, seed.wrapping_add(f as u64 + 1))?);
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let aucs: Vec<f64> = folds.iter().map(|f| f.val_auc).collect();
    let (mean_acc, std_acc) = crate::eval::mean_std(&accs);
    let (mean_auc, std_auc) = crate::eval::mean_std(&aucs);
    Ok(CvResult {
        folds,
        mean_acc,
        std_acc,
        mean_auc,
        std_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(encoder: BlockKind, head: BlockKind) -> ModelConfig {
        ModelConfig {
            n_anchors: 6,
            pos_dim: 9,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            keep_ratio: 0.8,
            n_classes: 2,
            encoder_block: encoder,
            head_block: head,
            basis: BasisConfig::default(),
        }
    }

    fn synth_rep(rng: &mut Rng, n: usize, class: u8, strength: f64) -> Representation {
        // class-dependent mean shift on the first feature column
        let mut f = Tensor::rand_uniform(&[n, 6], 0.5, rng);
        for i in 0..n {
            f.data_mut()[i * 6] += strength * (class as f64 * 2.0 - 1.0);
        }
        Representation {
            f_bar: f,
            positions: Tensor::rand_uniform(&[n, 9], 0.5, rng),
            label: Some(class),
        }
    }

    #[test]
    fn top_k_counts() {
        assert_eq!(top_k_count(10, 0.8), 8);
        assert_eq!(top_k_count(256, 0.8), 204);
        assert_eq!(top_k_count(1, 0.8), 1);
        assert_eq!(top_k_count(4, 0.1), 1);
    }

    #[test]
    fn forward_shapes_all_block_combos_smoke() {
        let mut rng = Rng::new(1);
        let rep = synth_rep(&mut rng, 10, 1, 0.0);
        for encoder in BlockKind::ALL {
            let cfg = tiny_cfg(encoder, BlockKind::Mlp);
            let model = Model::new(&cfg, &mut rng).unwrap();
            let mut g = Graph::new();
            let (logits, _) = model.forward(&mut g, &rep, false).unwrap();
            assert_eq!(g.value(logits).shape(), &[1, 2], "{encoder:?}");
        }
    }

    #[test]
    fn head_split_validated() {
        let mut cfg = tiny_cfg(BlockKind::Mlp, BlockKind::Mlp);
        cfg.n_heads = 3;
        assert!(Model::new(&cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn zeroed_layer_is_identity_on_residual_stream() {
        let mut rng = Rng::new(2);
        let cfg = tiny_cfg(BlockKind::Mlp, BlockKind::Mlp);
        let mut model = Model::new(&cfg, &mut rng).unwrap();
        // zero the attention output projection and the FFN's second linear:
        // both residual branches then contribute nothing
        let mut entries = model.named_params();
        for (name, t) in entries.iter_mut() {
            if name.ends_with(".wo")
                || name.ends_with(".bo")
                || name.ends_with(".ffn.w2")
                || name.ends_with(".ffn.b2")
            {
                *t = Tensor::zeros(t.shape());
            }
        }
        model.load_params(&entries).unwrap();
        let rep = synth_rep(&mut rng, 10, 0, 0.0);
        // compare against a 0-layer model with identical embedding params
        let mut cfg0 = cfg.clone();
        cfg0.n_layers = 0;
        let mut model0 = Model::new(&cfg0, &mut Rng::new(2)).unwrap();
        let entries0: Vec<(String, Tensor)> = entries
            .iter()
            .filter(|(n, _)| !n.starts_with("layer"))
            .cloned()
            .collect();
        model0.load_params(&entries0).unwrap();
        let (p_full, s_full) = model.predict(&rep).unwrap();
        let (p_zero, s_zero) = model0.predict(&rep).unwrap();
        assert_eq!(p_full, p_zero);
        assert!((s_full - s_zero).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance_of_logits() {
        let mut rng = Rng::new(3);
        let cfg = tiny_cfg(BlockKind::FastKan, BlockKind::Mlp);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let rep = synth_rep(&mut rng, 10, 1, 0.2);
        let (_, s0) = model.predict(&rep).unwrap();
        // reverse the patch order in both feature tensors
        let n = 10;
        let mut f = Tensor::zeros(&[n, 6]);
        let mut p = Tensor::zeros(&[n, 9]);
        for i in 0..n {
            for c in 0..6 {
                f.data_mut()[i * 6 + c] = rep.f_bar.at(n - 1 - i, c);
            }
            for c in 0..9 {
                p.data_mut()[i * 9 + c] = rep.positions.at(n - 1 - i, c);
            }
        }
        let perm = Representation {
            f_bar: f,
            positions: p,
            label: rep.label,
        };
        let (_, s1) = model.predict(&perm).unwrap();
        assert!((s0 - s1).abs() < 1e-9, "{s0} vs {s1}");
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        // check a few parameters end-to-end through the full forward pass
        let mut rng = Rng::new(4);
        let cfg = tiny_cfg(BlockKind::Mlp, BlockKind::Mlp);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let rep = synth_rep(&mut rng, 8, 1, 0.3);
        let mut g = Graph::new();
        let (logits, ids) = model.forward(&mut g, &rep, true).unwrap();
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        g.backward(loss).unwrap();
        let entries = model.named_params();
        let h = 1e-5;
        // probe selected parameters with central differences
        for probe in [0usize, 2, 4, 6, 8] {
            let (ref name, ref tensor) = entries[probe];
            let coord = tensor.numel() / 2;
            let analytic = g
                .grad(ids[probe])
                .map(|t| t.data()[coord])
                .unwrap_or(0.0);
            let eval_at = |delta: f64| -> f64 {
                let mut m = model.clone();
                let mut es = entries.clone();
                es[probe].1.data_mut()[coord] += delta;
                m.load_params(&es).unwrap();
                let mut g = Graph::new();
                let (lg, _) = m.forward(&mut g, &rep, false).unwrap();
                let l = g.cross_entropy(lg, &[1]).unwrap();
                g.value(l).item()
            };
            let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                ((analytic - numeric).abs() / denom) < 1e-4,
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn training_separates_easy_classes() {
        let mut rng = Rng::new(5);
        let reps: Vec<Representation> = (0..24)
            .map(|i| synth_rep(&mut rng, 10, (i % 2) as u8, 1.5))
            .collect();
        let refs: Vec<&Representation> = reps.iter().collect();
        let cfg = tiny_cfg(BlockKind::Mlp, BlockKind::Mlp);
        let tc = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let result = train_fold(&refs[..16], &refs[16..], &cfg, &tc, 7).unwrap();
        assert!(
            result.metrics.accuracy >= 0.9,
            "val acc {}",
            result.metrics.accuracy
        );
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let mut rng = Rng::new(6);
        let mut reps: Vec<Representation> = (0..24)
            .map(|i| synth_rep(&mut rng, 10, (i % 2) as u8, 1.5))
            .collect();
        // detach labels from features
        let mut labels: Vec<u8> = reps.iter().map(|r| r.label.unwrap()).collect();
        rng.shuffle(&mut labels);
        for (r, l) in reps.iter_mut().zip(labels) {
            r.label = Some(l);
        }
        let refs: Vec<&Representation> = reps.iter().collect();
        let cfg = tiny_cfg(BlockKind::Mlp, BlockKind::Mlp);
        let tc = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let result = train_fold(&refs[..16], &refs[16..], &cfg, &tc, 8).unwrap();
        assert!(
            (0.15..=0.85).contains(&result.val_auc),
            "auc {}",
            result.val_auc
        );
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let assign = stratified_folds(&labels, 5, 9);
        for f in 0..5 {
            let in_fold: Vec<u8> = labels
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == f)
                .map(|(&l, _)| l)
                .collect();
            assert_eq!(in_fold.len(), 8);
            assert_eq!(in_fold.iter().filter(|&&l| l == 1).count(), 4);
        }
    }

    #[test]
    fn train_fold_deterministic() {
        let mut rng = Rng::new(10);
        let reps: Vec<Representation> = (0..12)
            .map(|i| synth_rep(&mut rng, 8, (i % 2) as u8, 1.0))
            .collect();
        let refs: Vec<&Representation> = reps.iter().collect();
        let cfg = tiny_cfg(BlockKind::FasterKan, BlockKind::Mlp);
        let tc = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train_fold(&refs[..8], &refs[8..], &cfg, &tc, 11).unwrap();
        let b = train_fold(&refs[..8], &refs[8..], &cfg, &tc, 11).unwrap();
        for ((_, ta), (_, tb)) in a.model.named_params().iter().zip(b.model.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
    }

    #[test]
    fn checkpoint_round_trip_through_files() {
        let mut rng = Rng::new(12);
        let cfg = tiny_cfg(BlockKind::WavKan, BlockKind::ChebyKan);
        let model = Model::new(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.abfk");
        crate::checkpoint::save(&model.named_params(), &path).unwrap();
        let entries = crate::checkpoint::load(&path).unwrap();
        let mut restored = Model::new(&cfg, &mut Rng::new(999)).unwrap();
        restored.load_params(&entries).unwrap();
        let rep = synth_rep(&mut rng, 8, 0, 0.1);
        let (p0, s0) = model.predict(&rep).unwrap();
        let (p1, s1) = restored.predict(&rep).unwrap();
        assert_eq!(p0, p1);
        assert_eq!(s0.to_bits(), s1.to_bits());
    }
}
