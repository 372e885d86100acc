//! One learner type assembled from optional parts: replay, consolidation,
//! distillation, update projection and post-hoc rebalancing. Each built-in
//! training-from-scratch method is a fixed combination of parts.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::ewc::{estimate_fisher_diag, ewc_penalty, ewc_penalty_grad, EwcState, FisherMode};
use super::lifecycle::{masked_argmax, Learner, ObserveOutput, TaskInfo};
use super::losses::{cross_entropy_per_sample, distill_loss, erace_masked_loss, replay_loss, Origin};
use super::optim::Optimizer;
use super::projection::{
    gpm_project_gradient, gpm_update_subspace, trgp_mix_rows, trgp_trust_region, CovarianceCache,
    LowRankProjector, SubspaceState,
};
use super::rebalance::{bic_apply, bic_fit, nme_from_means, wa_align, BiasCorrectionState};
use crate::batch::Batch;
use crate::buffer::{BufferManifest, ExemplarBuffer};
use crate::config::{BufferStrategy, ExperimentConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::memorybudget::StateDescriptor;
use crate::model::{Backbone, Grads, Model};
use crate::util::{seeded_rng, Rng};

#[derive(Debug, Clone)]
pub struct Replay {
    pub buffer: ExemplarBuffer,
    /// Memory samples drawn per stream batch.
    pub batch: usize,
    pub beta: f64,
    /// Asymmetric masking of stream samples.
    pub ace: bool,
}

#[derive(Debug, Clone)]
pub struct Consolidation {
    pub state: EwcState,
    pub mode: FisherMode,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct Distillation {
    pub snapshot: Option<Model>,
    pub tau: f64,
    pub lambda: f64,
    /// Stream samples compete only among the current task's classes.
    pub current_only: bool,
}

#[derive(Debug, Clone)]
pub struct TrustRegion {
    pub union: SubspaceState,
    /// `task_bases[j][l]`: columns added to group `l` by task `j`.
    pub task_bases: Vec<Vec<DMatrix<f64>>>,
    pub epsilon: f64,
    /// Unscaled encoder weights `W`; the model holds `W A`.
    base: Vec<DMatrix<f64>>,
    selected: Vec<Vec<usize>>,
    scales: Vec<Vec<DMatrix<f64>>>,
    pending: bool,
}

#[derive(Debug, Clone)]
pub enum Projector {
    Gpm(SubspaceState),
    Nscl { caches: Vec<CovarianceCache>, a: f64, active: Vec<LowRankProjector> },
    Adabop { caches: Vec<CovarianceCache>, lambda: f64, active: Vec<LowRankProjector> },
    Trgp(TrustRegion),
}

#[derive(Debug, Clone)]
pub struct ComposedLearner {
    method: String,
    model: Model,
    optimizer: Optimizer,
    pub replay: Option<Replay>,
    pub ewc: Option<Consolidation>,
    pub distill: Option<Distillation>,
    pub projector: Option<Projector>,
    rep_samples: usize,
    bic: Option<Vec<BiasCorrectionState>>,
    wa: bool,
    nme: Option<BTreeMap<usize, DVector<f64>>>,
    use_nme: bool,
    task_index: usize,
    current: Vec<usize>,
    old: Vec<usize>,
    seen: Vec<usize>,
    rng: Rng,
}

/// Buffer capacity from `buffer.capacity`, or `budget_bytes` at one byte per
/// stored input value.
pub fn resolve_capacity(cfg: &ExperimentConfig, input_shape: &[usize]) -> Option<usize> {
    let per: u64 = input_shape.iter().product::<usize>() as u64;
    cfg.buffer
        .capacity
        .or_else(|| cfg.buffer.budget_bytes.map(|b| (b / per.max(1)) as usize))
}

impl ComposedLearner {
    /// A learner with no parts: plain fine-tuning.
    pub fn plain(method: &str, model: Model, cfg: &ExperimentConfig) -> Self {
        Self {
            method: method.to_string(),
            model,
            optimizer: Optimizer::new(&cfg.optimizer),
            replay: None,
            ewc: None,
            distill: None,
            projector: None,
            rep_samples: cfg.param_usize("rep_samples", 300),
            bic: None,
            wa: false,
            nme: None,
            use_nme: false,
            task_index: 0,
            current: Vec::new(),
            old: Vec::new(),
            seen: Vec::new(),
            rng: seeded_rng(cfg.seed, &[0x2e91]),
        }
    }

    pub fn from_config(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<Self> {
        let bb = Backbone::build(
            cfg.backbone.arch,
            input_shape,
            &cfg.backbone.hidden,
            cfg.backbone.feature_dim,
            cfg.seed,
        )?;
        let model = Model::new(bb, cfg.seed);
        let widths: Vec<usize> = model.param_groups().iter().map(|w| w.ncols()).collect();
        let mut l = Self::plain(&cfg.method, model, cfg);
        let replay = |default: BufferStrategy, ace: bool| -> Result<Replay> {
            let cap = resolve_capacity(cfg, input_shape).ok_or_else(|| {
                Error::schema("buffer.capacity", format!("method `{}` needs a replay buffer", cfg.method))
            })?;
            let strategy = cfg.buffer.strategy.unwrap_or(default);
            Ok(Replay {
                buffer: ExemplarBuffer::new(cap, strategy, input_shape.to_vec(), cfg.seed)?,
                batch: cfg.param_usize("replay_batch", cfg.batch_size),
                beta: cfg.param_f64("replay_beta", 1.0),
                ace,
            })
        };
        let distill = |current_only: bool| Distillation {
            snapshot: None,
            tau: cfg.param_f64("tau", 2.0),
            lambda: cfg.param_f64("kd_lambda", 1.0),
            current_only,
        };
        let max_cols = cfg.method_params.get("max_basis_cols").and_then(|v| v.as_u64()).map(|v| v as usize);
        let subspace = |threshold: f64| {
            let mut s = SubspaceState::new(&widths, threshold);
            s.max_cols = max_cols;
            s
        };
        let max_rank = cfg.param_usize("max_rank", 256);
        match cfg.method.as_str() {
            "finetune" => {}
            "ewc" => {
                l.ewc = Some(Consolidation {
                    state: EwcState::new(cfg.param_f64("ewc_lambda", 100.0)),
                    mode: FisherMode::parse(cfg.param_str("fisher_mode", "sampled"))?,
                    samples: cfg.param_usize("fisher_samples", 1024),
                });
            }
            "lwf" => l.distill = Some(distill(true)),
            "er" => l.replay = Some(replay(BufferStrategy::Reservoir, false)?),
            "er_ace" => l.replay = Some(replay(BufferStrategy::Reservoir, true)?),
            "icarl" => {
                l.replay = Some(replay(BufferStrategy::Herding, false)?);
                l.distill = Some(distill(false));
                l.use_nme = cfg.param_str("classifier", "nme") == "nme";
            }
            "bic" => {
                l.replay = Some(replay(BufferStrategy::Herding, false)?);
                l.bic = Some(Vec::new());
            }
            "wa" => {
                l.replay = Some(replay(BufferStrategy::Herding, false)?);
                l.wa = true;
            }
            "gpm" => l.projector = Some(Projector::Gpm(subspace(cfg.param_f64("energy_threshold", 0.965)))),
            "adam_nscl" => {
                let mut ocfg = cfg.optimizer.clone();
                ocfg.name = OptimizerKind::Adam;
                ocfg.learning_rate = cfg.param_f64("adam_lr", 1e-3);
                l.optimizer = Optimizer::new(&ocfg);
                l.projector = Some(Projector::Nscl {
                    caches: widths.iter().map(|&w| CovarianceCache::with_rank(w, max_rank)).collect(),
                    a: cfg.param_f64("nscl_a", 10.0),
                    active: Vec::new(),
                });
            }
            "adabop" => {
                l.projector = Some(Projector::Adabop {
                    caches: widths.iter().map(|&w| CovarianceCache::with_rank(w, max_rank)).collect(),
                    lambda: cfg.param_f64("bop_lambda", 100.0),
                    active: Vec::new(),
                });
            }
            "trgp" => {
                l.projector = Some(Projector::Trgp(TrustRegion {
                    union: subspace(cfg.param_f64("energy_threshold", 0.965)),
                    task_bases: Vec::new(),
                    epsilon: cfg.param_f64("trust_threshold", 0.5),
                    base: Vec::new(),
                    selected: Vec::new(),
                    scales: Vec::new(),
                    pending: false,
                }));
            }
            other => return Err(Error::UnknownMethod(other.to_string())),
        }
        Ok(l)
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    /// Up to `rep_samples` rows of `data`, chosen with the learner's rng.
    fn subsample(&mut self, data: &Batch, n: usize) -> Batch {
        if data.len() <= n {
            return data.clone();
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(n);
        idx.sort_unstable();
        data.select(&idx)
    }

    /// Group representations with at most `4 * rep_samples` rows each.
    fn representations(&mut self, data: &Batch) -> Vec<DMatrix<f64>> {
        let sample = self.subsample(data, self.rep_samples);
        let cap = 4 * self.rep_samples.max(1);
        self.model
            .representations(&sample.inputs)
            .into_iter()
            .map(|r| {
                if r.nrows() <= cap {
                    r
                } else {
                    let stride = r.nrows().div_ceil(cap);
                    let idx: Vec<usize> = (0..r.nrows()).step_by(stride).collect();
                    r.select_rows(&idx)
                }
            })
            .collect()
    }

    /// Loss and logit gradient for stream rows `0..ns` followed by memory rows.
    fn objective(&self, x: &DMatrix<f64>, logits: &DMatrix<f64>, labels: &[usize], ns: usize) -> Result<(f64, DMatrix<f64>)> {
        let n = labels.len();
        let nm = n - ns;
        let mut dlogits = DMatrix::zeros(logits.nrows(), logits.ncols());
        let stream_logits = logits.rows(0, ns).into_owned();
        let current_only = self.distill.as_ref().is_some_and(|d| d.current_only);
        let ace = self.replay.as_ref().is_some_and(|r| r.ace);
        let (ls, gs) = if ace {
            let origins = vec![Origin::Stream; ns];
            erace_masked_loss(&stream_logits, &labels[..ns], &self.current, &self.seen, &origins)?
        } else {
            let mask: &[usize] = if current_only { &self.current } else { &self.seen };
            cross_entropy_per_sample(&stream_logits, &labels[..ns], &vec![mask; ns])?
        };
        dlogits.rows_mut(0, ns).copy_from(&gs);
        let mut loss = ls;
        if nm > 0 {
            let beta = self.replay.as_ref().map_or(1.0, |r| r.beta);
            let mem_logits = logits.rows(ns, nm).into_owned();
            let (lm, gm) = cross_entropy_per_sample(&mem_logits, &labels[ns..], &vec![self.seen.as_slice(); nm])?;
            loss = replay_loss(ls, lm, beta);
            dlogits.rows_mut(ns, nm).copy_from(&(gm * beta));
        }
        if let Some(d) = &self.distill {
            if let (Some(snap), false) = (&d.snapshot, self.old.is_empty()) {
                let old_logits = snap.logits(x).select_columns(&self.old);
                let new_logits = logits.select_columns(&self.old);
                let (lk, gk) = distill_loss(&new_logits, &old_logits, d.tau)?;
                loss += d.lambda * lk;
                for (k, &c) in self.old.iter().enumerate() {
                    let mut col = dlogits.column_mut(c);
                    col += gk.column(k) * d.lambda;
                }
            }
        }
        Ok((loss, dlogits))
    }

    /// Constrains an update delta in place.
    fn project(&self, delta: &mut Grads) -> Result<()> {
        let head = self.model.encoder_groups();
        let old_rows = &self.old;
        let apply = |g: usize, d: &mut DMatrix<f64>, f: &dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>| -> Result<()> {
            if g == head {
                if old_rows.is_empty() {
                    return Ok(());
                }
                let sub = d.select_rows(old_rows);
                let p = f(&sub)?;
                for (k, &r) in old_rows.iter().enumerate() {
                    d.row_mut(r).copy_from(&p.row(k));
                }
            } else {
                *d = f(d)?;
            }
            Ok(())
        };
        match &self.projector {
            None => {}
            Some(Projector::Gpm(s)) => {
                for (g, d) in delta.groups.iter_mut().enumerate() {
                    apply(g, d, &|m| gpm_project_gradient(m, &s.bases[g]))?;
                }
            }
            Some(Projector::Trgp(tr)) => {
                for (g, d) in delta.groups.iter_mut().enumerate() {
                    apply(g, d, &|m| gpm_project_gradient(m, &tr.union.bases[g]))?;
                }
            }
            Some(Projector::Nscl { active, .. }) | Some(Projector::Adabop { active, .. }) => {
                for (g, d) in delta.groups.iter_mut().enumerate() {
                    if let Some(p) = active.get(g) {
                        apply(g, d, &|m| Ok(p.apply(m)))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn trgp_select(&mut self, grads: &Grads) {
        let Some(Projector::Trgp(tr)) = &mut self.projector else { return };
        if !tr.pending {
            return;
        }
        tr.pending = false;
        let groups = tr.base.len();
        tr.selected = (0..groups)
            .map(|l| {
                let past: Vec<DMatrix<f64>> = tr.task_bases.iter().map(|b| b[l].clone()).collect();
                trgp_trust_region(&grads.groups[l], &past, tr.epsilon)
            })
            .collect();
        tr.scales = (0..groups)
            .map(|l| {
                tr.task_bases
                    .iter()
                    .map(|b| DMatrix::identity(b[l].ncols(), b[l].ncols()))
                    .collect()
            })
            .collect();
    }

    /// For TRGP, turns gradients with respect to the effective weights into
    /// gradients with respect to `W`, and returns the scale gradients.
    fn trgp_chain(&self, grads: &mut Grads) -> Vec<Vec<(usize, DMatrix<f64>)>> {
        let Some(Projector::Trgp(tr)) = &self.projector else { return Vec::new() };
        let mut dq = Vec::new();
        for l in 0..tr.base.len() {
            let bases: Vec<DMatrix<f64>> = tr.task_bases.iter().map(|b| b[l].clone()).collect();
            let g = grads.groups[l].clone();
            let mut per = Vec::new();
            for &j in &tr.selected[l] {
                let s = &bases[j];
                per.push((j, s.transpose() * tr.base[l].transpose() * &g * s));
            }
            dq.push(per);
            grads.groups[l] = trgp_mix_rows(&g, &tr.selected[l], &bases, &tr.scales[l], true);
        }
        dq
    }

    fn trgp_apply(&mut self, delta: &Grads, dq: Vec<Vec<(usize, DMatrix<f64>)>>) {
        let lr = self.optimizer.learning_rate();
        let Some(Projector::Trgp(tr)) = &mut self.projector else { return };
        let head = tr.base.len();
        for l in 0..head {
            tr.base[l] += &delta.groups[l];
            for (j, g) in &dq[l] {
                tr.scales[l][*j] -= g * lr;
            }
        }
        let mut effective = Vec::with_capacity(head);
        for l in 0..head {
            let bases: Vec<DMatrix<f64>> = tr.task_bases.iter().map(|b| b[l].clone()).collect();
            effective.push(trgp_mix_rows(&tr.base[l], &tr.selected[l], &bases, &tr.scales[l], false));
        }
        let mut groups = self.model.param_groups_mut();
        for (l, w) in effective.into_iter().enumerate() {
            *groups[l] = w;
        }
        *groups[head] += &delta.groups[head];
    }

    /// Exact minimizer of `|theta - theta'|^2 / (2 lr) + penalty(theta)` for
    /// the diagonal quadratic penalty; stable for any strength.
    fn ewc_proximal(&mut self, lr: f64) -> Result<()> {
        let Some(c) = &self.ewc else { return Ok(()) };
        if !c.state.is_consolidated() {
            return Ok(());
        }
        let mut params = self.model.flat_params();
        let s = &c.state;
        for ((p, a), f) in params.iter_mut().zip(&s.anchor).zip(&s.fisher) {
            let w = 2.0 * lr * s.lambda * f;
            *p = (*p + w * a) / (1.0 + w);
        }
        self.model.set_flat_params(&params)
    }

    fn is_trgp(&self) -> bool {
        matches!(self.projector, Some(Projector::Trgp(_)))
    }

    fn update_projector(&mut self, data: &Batch) -> Result<()> {
        if self.projector.is_none() {
            return Ok(());
        }
        let reps = self.representations(data);
        match self.projector.as_mut().expect("checked") {
            Projector::Gpm(s) => {
                for (g, r) in reps.iter().enumerate() {
                    let (b, _) = gpm_update_subspace(&s.bases[g], &r.transpose(), s.threshold, s.max_cols)?;
                    s.bases[g] = b;
                }
            }
            Projector::Trgp(tr) => {
                let mut added = Vec::new();
                for (g, r) in reps.iter().enumerate() {
                    let old = tr.union.bases[g].ncols();
                    let (b, _) = gpm_update_subspace(&tr.union.bases[g], &r.transpose(), tr.union.threshold, tr.union.max_cols)?;
                    added.push(b.columns(old, b.ncols() - old).into_owned());
                    tr.union.bases[g] = b;
                }
                tr.task_bases.push(added);
            }
            Projector::Nscl { caches, .. } | Projector::Adabop { caches, .. } => {
                for (c, r) in caches.iter_mut().zip(&reps) {
                    c.accumulate(r);
                }
            }
        }
        Ok(())
    }

    fn refresh_projectors(&mut self) -> Result<()> {
        match &mut self.projector {
            Some(Projector::Nscl { caches, a, active }) => {
                *active = caches.iter().map(|c| LowRankProjector::nscl(c, *a)).collect::<Result<_>>()?;
            }
            Some(Projector::Adabop { caches, lambda, active }) => {
                *active = caches.iter().map(|c| LowRankProjector::adabop(c, *lambda)).collect::<Result<_>>()?;
            }
            Some(Projector::Trgp(tr)) => {
                let head = self.model.encoder_groups();
                tr.base = self.model.param_groups().into_iter().take(head).cloned().collect();
                tr.selected = vec![Vec::new(); head];
                tr.scales = vec![Vec::new(); head];
                tr.pending = !tr.task_bases.is_empty();
            }
            _ => {}
        }
        Ok(())
    }

    /// Bias-correction fit on a 10% stratified slice of the task data plus a
    /// 10% stratified slice of the buffer.
    fn fit_bias_correction(&mut self, task_data: &Batch) -> Result<()> {
        let Some(buffer) = self.replay.as_ref().map(|r| r.buffer.all()) else { return Ok(()) };
        let pick = |b: &Batch, rng: &mut Rng| -> Batch {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &y) in b.labels.iter().enumerate() {
                by_class.entry(y).or_default().push(i);
            }
            let mut idx = Vec::new();
            for rows in by_class.values_mut() {
                rows.shuffle(rng);
                idx.extend_from_slice(&rows[..rows.len().div_ceil(10)]);
            }
            idx.sort_unstable();
            b.select(&idx)
        };
        let mut rng = seeded_rng(0xb1c, &[self.task_index as u64]);
        let val = pick(task_data, &mut rng).concat(&pick(&buffer, &mut rng));
        let val = val.select(&(0..val.len()).filter(|&i| self.seen.contains(&val.labels[i])).collect::<Vec<_>>());
        let mut logits = self.model.logits(&val.inputs);
        for s in self.bic.as_ref().expect("bic enabled") {
            logits = bic_apply(&logits, s);
        }
        match bic_fit(&logits, &val.labels, &self.seen, &self.current) {
            Ok(state) => self.bic.as_mut().expect("bic enabled").push(state),
            Err(e) => warn!("bias correction skipped for task {}: {e}", self.task_index),
        }
        Ok(())
    }

    fn refresh_class_means(&mut self) -> Result<()> {
        let Some(replay) = &self.replay else { return Ok(()) };
        let all = replay.buffer.all();
        if all.is_empty() {
            self.nme = None;
            return Ok(());
        }
        let feats = self.model.features(&all.inputs);
        let mut sums: BTreeMap<usize, (DVector<f64>, usize)> = BTreeMap::new();
        for (i, &y) in all.labels.iter().enumerate() {
            let f = feats.row(i).transpose();
            let n = f.norm();
            let f = if n > 0.0 { f / n } else { f };
            let e = sums.entry(y).or_insert_with(|| (DVector::zeros(f.len()), 0));
            e.0 += f;
            e.1 += 1;
        }
        self.nme = Some(sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect());
        Ok(())
    }
}

impl Learner for ComposedLearner {
    fn method(&self) -> &str {
        &self.method
    }

    fn before_task(&mut self, info: &TaskInfo) -> Result<()> {
        let needed = info.classes.iter().max().map_or(0, |m| m + 1);
        if needed > self.model.num_classes() {
            self.model.expand_head(needed - self.model.num_classes())?;
        }
        self.optimizer.begin_task();
        self.task_index = info.task_index;
        self.old = self.seen.clone();
        self.current = info.classes.clone();
        self.current.sort_unstable();
        self.seen = info.seen_classes.clone();
        if let Some(d) = &mut self.distill {
            d.snapshot = (!self.old.is_empty()).then(|| self.model.clone());
        }
        self.refresh_projectors()
    }

    fn observe(&mut self, batch: &Batch) -> Result<ObserveOutput> {
        let ns = batch.len();
        if ns == 0 {
            return Err(Error::InvalidArgument("observe on an empty batch".into()));
        }
        let memory = match &self.replay {
            Some(r) => r.buffer.sample_with(r.batch, &mut self.rng),
            None => Batch::empty(batch.dim()),
        };
        let train = batch.concat(&memory);
        let trace = self.model.forward(&train.inputs);
        let predictions = masked_argmax(&trace.logits.rows(0, ns).into_owned(), &self.seen)?;
        let (mut loss, dlogits) = self.objective(&train.inputs, &trace.logits, &train.labels, ns)?;
        let mut grads = self.model.backward(&trace, &dlogits);
        let proximal = self.optimizer.kind() == OptimizerKind::Sgd;
        if let Some(c) = &self.ewc {
            if c.state.is_consolidated() {
                let params = self.model.flat_params();
                let k = c.state.anchor.len();
                loss += ewc_penalty(&params[..k], &c.state)?;
            }
            if c.state.is_consolidated() && !proximal {
                let params = self.model.flat_params();
                let k = c.state.anchor.len();
                let mut flat = grads.to_flat();
                for (g, p) in flat.iter_mut().zip(ewc_penalty_grad(&params[..k], &c.state)?) {
                    *g += p;
                }
                grads = Grads::from_flat(&self.model, &flat);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss in task {}", self.task_index)));
        }
        if self.is_trgp() {
            self.trgp_select(&grads);
            let dq = self.trgp_chain(&mut grads);
            let mut delta = self.optimizer.delta(&grads);
            self.project(&mut delta)?;
            self.trgp_apply(&delta, dq);
        } else {
            let lr = self.optimizer.learning_rate();
            let mut delta = self.optimizer.delta(&grads);
            self.project(&mut delta)?;
            self.model.apply_update(&delta);
            if proximal {
                self.ewc_proximal(lr)?;
            }
        }
        if let Some(r) = &mut self.replay {
            if r.buffer.strategy() == BufferStrategy::Reservoir {
                r.buffer.observe_stream(batch);
            }
        }
        Ok(ObserveOutput::new(predictions, &batch.labels, loss))
    }

    fn after_task(&mut self, task_data: &Batch) -> Result<()> {
        if let Some(c) = &self.ewc {
            let (mode, samples) = (c.mode, c.samples);
            let sample = self.subsample(task_data, samples);
            let fisher = estimate_fisher_diag(
                &self.model,
                &sample.inputs,
                Some(&sample.labels),
                &self.seen,
                samples,
                mode,
                &mut self.rng,
            )?;
            let anchor = self.model.flat_params();
            self.ewc.as_mut().expect("checked").state.consolidate(fisher, anchor);
        }
        if let Some(r) = &mut self.replay {
            let model = &self.model;
            let f = |x: &DMatrix<f64>| model.features(x);
            r.buffer.update_after_task(task_data, Some(&f))?;
        }
        self.update_projector(task_data)?;
        if !self.old.is_empty() {
            if self.wa {
                wa_align(&mut self.model.head, &self.old, &self.current)?;
            }
            if self.bic.is_some() {
                self.fit_bias_correction(task_data)?;
            }
        }
        if self.use_nme {
            self.refresh_class_means()?;
        }
        Ok(())
    }

    fn inference(&self, inputs: &DMatrix<f64>, classes: &[usize]) -> Result<Vec<usize>> {
        if let (true, Some(means)) = (self.use_nme, &self.nme) {
            let subset: BTreeMap<usize, DVector<f64>> =
                classes.iter().filter_map(|c| means.get(c).map(|m| (*c, m.clone()))).collect();
            if subset.len() == classes.len() {
                let feats = self.model.features(inputs);
                return (0..feats.nrows()).map(|i| nme_from_means(&feats.row(i).transpose(), &subset)).collect();
            }
            warn!("class means missing for some classes; falling back to the linear head");
        }
        let mut logits = self.model.logits(inputs);
        for s in self.bic.iter().flatten() {
            logits = bic_apply(&logits, s);
        }
        masked_argmax(&logits, classes)
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn buffer_manifest(&self) -> Option<BufferManifest> {
        self.replay.as_ref().map(|r| r.buffer.manifest())
    }

    fn state_descriptors(&self) -> Vec<StateDescriptor> {
        let mut out = Vec::new();
        if let Some(c) = &self.ewc {
            out.push(StateDescriptor::new("fisher", c.state.fisher.len() as u64));
            out.push(StateDescriptor::new("snapshot", c.state.anchor.len() as u64));
        }
        if self.distill.is_some() && self.task_index > 0 {
            out.push(StateDescriptor::new("snapshot", self.model.num_params() as u64));
        }
        match &self.projector {
            Some(Projector::Gpm(s)) => out.push(StateDescriptor::new("basis", s.total_elements())),
            Some(Projector::Trgp(tr)) => out.push(StateDescriptor::new("basis", tr.union.total_elements())),
            Some(Projector::Nscl { caches, .. }) | Some(Projector::Adabop { caches, .. }) => {
                out.push(StateDescriptor::new("covariance", caches.iter().map(|c| c.factor.len() as u64).sum()));
            }
            None => {}
        }
        if let Some(stages) = &self.bic {
            out.push(StateDescriptor::new("bias_correction", 2 * stages.len() as u64));
        }
        if let Some(means) = &self.nme {
            out.push(StateDescriptor::new("feature", means.values().map(|m| m.len() as u64).sum()));
        }
        out
    }
}
