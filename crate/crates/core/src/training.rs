//! Training loop with the full set of robustness mechanisms: adversarial
//! training, input/Jacobian/evidence regularization, SAM, the four data
//! augmentations, and LGV-style snapshot collection.

use rand::seq::SliceRandom;

use crate::attacks::NormKind;
use crate::autodiff::{grad, softmax_cross_entropy, Tape, Var};
use crate::data::{self, augment_batch, AugmentConfig, AugmentMechanism, Dataset, SoftLabels};
use crate::error::TrainError;
use crate::model::{self, ArchId, ParamSet, INPUT_DIM, NUM_CLASSES};
use crate::tensor::Tensor;

/// Robustness mechanism applied during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Plain cross-entropy training.
    St,
    /// Adversarial training: inner PGD maximization of the loss.
    At,
    Mu,
    Cm,
    Co,
    Ls,
    /// Input-gradient norm penalty.
    Ir,
    /// Jacobian Frobenius-norm penalty (exact, per-logit backward passes).
    Jr,
    /// Parameter-gradient norm penalty.
    Er,
    Sam,
    SamIr,
    SamJr,
}

impl Mechanism {
    pub const ALL: [Mechanism; 12] = [
        Mechanism::St,
        Mechanism::At,
        Mechanism::Mu,
        Mechanism::Cm,
        Mechanism::Co,
        Mechanism::Ls,
        Mechanism::Ir,
        Mechanism::Jr,
        Mechanism::Er,
        Mechanism::Sam,
        Mechanism::SamIr,
        Mechanism::SamJr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::St => "st",
            Mechanism::At => "at",
            Mechanism::Mu => "mu",
            Mechanism::Cm => "cm",
            Mechanism::Co => "co",
            Mechanism::Ls => "ls",
            Mechanism::Ir => "ir",
            Mechanism::Jr => "jr",
            Mechanism::Er => "er",
            Mechanism::Sam => "sam",
            Mechanism::SamIr => "sam_ir",
            Mechanism::SamJr => "sam_jr",
        }
    }

    pub fn from_name(s: &str) -> Option<Mechanism> {
        Mechanism::ALL.iter().copied().find(|m| m.name() == s)
    }

    fn augmentation(&self) -> Option<AugmentMechanism> {
        match self {
            Mechanism::Mu => Some(AugmentMechanism::Mu),
            Mechanism::Cm => Some(AugmentMechanism::Cm),
            Mechanism::Co => Some(AugmentMechanism::Co),
            Mechanism::Ls => Some(AugmentMechanism::Ls),
            _ => None,
        }
    }

    fn is_sam(&self) -> bool {
        matches!(self, Mechanism::Sam | Mechanism::SamIr | Mechanism::SamJr)
    }

    /// Differentiable loss evaluated inside each backward pass.
    fn loss_kind(&self) -> LossKind {
        match self {
            Mechanism::Ir | Mechanism::SamIr => LossKind::Ir,
            Mechanism::Jr | Mechanism::SamJr => LossKind::Jr,
            Mechanism::Er => LossKind::Er,
            _ => LossKind::Plain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Plain,
    Ir,
    Jr,
    Er,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub arch: ArchId,
    pub mechanism: Mechanism,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    /// Augmentation magnitude level in [1, 5]; ignored for non-augmentation
    /// mechanisms.
    pub tau: u32,
    pub eps_adv: f64,
    pub at_steps: usize,
    /// Inner-max step size as a fraction of eps_adv.
    pub at_step_frac: f64,
    pub at_norm: NormKind,
    pub lambda_ir: f64,
    pub lambda_jr: f64,
    pub lambda_er: f64,
    pub rho: f64,
}

impl TrainConfig {
    pub fn new(arch: ArchId, mechanism: Mechanism, seed: u64) -> TrainConfig {
        TrainConfig {
            arch,
            mechanism,
            seed,
            epochs: 30,
            batch_size: 64,
            peak_lr: 0.05,
            momentum: 0.9,
            warmup_epochs: 3,
            tau: 1,
            eps_adv: 0.1,
            at_steps: 7,
            at_step_frac: 0.25,
            at_norm: NormKind::L2,
            lambda_ir: 0.3,
            lambda_jr: 0.01,
            lambda_er: 0.01,
            rho: 0.05,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.peak_lr <= 0.0 || !self.peak_lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "peak_lr {} must be positive and finite",
                self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::InvalidConfig(
                "warmup must be shorter than the run".into(),
            ));
        }
        if self.mechanism == Mechanism::At && (self.eps_adv <= 0.0 || self.at_steps == 0) {
            return Err(TrainError::InvalidConfig(
                "adversarial training needs eps_adv > 0 and at_steps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

/// Parameter snapshots collected along an SGD trajectory (LGV).
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub snapshots: Vec<ParamSet>,
}

/// Learning rate at `step`: linear warmup to `peak`, then cosine decay to 0.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    if step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps).max(1) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

/// Heavy-ball SGD: v <- momentum v + g; theta <- theta - lr v.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) {
    for ((t, g), v) in params.tensors_mut().zip(grads).zip(velocity.iter_mut()) {
        let vd = v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            vd[k] = momentum * vd[k] + gk;
        }
        let td = t.data_mut();
        for (k, &vk) in v.data().iter().enumerate() {
            td[k] -= lr * vk;
        }
    }
}

/// Inner maximization for adversarial training: PGD ascent on the
/// cross-entropy from a zero start, projected onto the eps-ball and [0, 1].
pub fn at_inner_max(
    params: &ParamSet,
    x: &Tensor,
    targets: &SoftLabels,
    norm: NormKind,
    eps: f64,
    steps: usize,
    step_size: f64,
) -> Result<Tensor, TrainError> {
    let n = x.shape()[0];
    let clean = x.data().to_vec();
    let mut adv = clean.clone();
    for _ in 0..steps {
        let tape = Tape::new();
        let pv = params.leaf_vars(&tape, false);
        let xv = tape.leaf(
            Tensor::from_parts(x.shape().to_vec(), adv.clone()),
            true,
        );
        let logits = model::forward_graph(params.arch, &pv, &xv)?;
        let loss = softmax_cross_entropy(&logits, &targets.probs)?;
        let g = grad(&loss, &[&xv], false)?[0].tensor();
        let gd = g.data();
        for i in 0..n {
            let row = i * INPUT_DIM..(i + 1) * INPUT_DIM;
            match norm {
                NormKind::L2 => {
                    let gn = gd[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gn < 1e-14 {
                        continue;
                    }
                    for k in row.clone() {
                        adv[k] += step_size * gd[k] / gn;
                    }
                }
                NormKind::Linf => {
                    for k in row.clone() {
                        adv[k] += step_size * gd[k].signum();
                    }
                }
            }
            project_row(&mut adv[i * INPUT_DIM..(i + 1) * INPUT_DIM], &clean[i * INPUT_DIM..(i + 1) * INPUT_DIM], norm, eps);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), adv))
}

/// Projects one sample onto the eps-ball around `clean`, then clips to [0, 1].
pub(crate) fn project_row(adv: &mut [f64], clean: &[f64], norm: NormKind, eps: f64) {
    match norm {
        NormKind::Linf => {
            for (a, &c) in adv.iter_mut().zip(clean) {
                *a = (*a).clamp(c - eps, c + eps).clamp(0.0, 1.0);
            }
        }
        NormKind::L2 => {
            let dn = adv
                .iter()
                .zip(clean)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            if dn > eps {
                let s = eps / dn;
                for (a, &c) in adv.iter_mut().zip(clean) {
                    *a = c + (*a - c) * s;
                }
            }
            for v in adv.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// One backward pass: loss value and parameter gradients for `kind` on the
/// (already augmented / perturbed) batch.
fn loss_and_grads(
    params: &ParamSet,
    kind: LossKind,
    cfg: &TrainConfig,
    x: &Tensor,
    targets: &SoftLabels,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let n = x.shape()[0];
    let tape = Tape::new();
    let pv = params.leaf_vars(&tape, true);
    let needs_x_grad = matches!(kind, LossKind::Ir | LossKind::Jr);
    let xv = tape.leaf(x.clone(), needs_x_grad);
    let logits = model::forward_graph(params.arch, &pv, &xv)?;
    let ce = softmax_cross_entropy(&logits, &targets.probs)?;
    let loss = match kind {
        LossKind::Plain => ce,
        LossKind::Ir => {
            // per-sample input-gradient rows: grad of the mean scaled by n
            let gx = grad(&ce, &[&xv], true)?.remove(0).scalar_mul(n as f64)?;
            let sq = gx.reshape(vec![n, INPUT_DIM])?.square()?.row_sum()?;
            let eps_t = tape.constant(Tensor::filled(vec![n], 1e-12));
            let penalty = sq.add(&eps_t)?.powf(0.5)?.mean()?;
            ce.add(&penalty.scalar_mul(cfg.lambda_ir)?)?
        }
        LossKind::Jr => {
            // exact Frobenius norm of the input Jacobian via one backward
            // pass per logit
            let mut sq_sum: Option<Var> = None;
            for c in 0..NUM_CLASSES {
                let mut mask = vec![0.0; n * NUM_CLASSES];
                for i in 0..n {
                    mask[i * NUM_CLASSES + c] = 1.0;
                }
                let mv = tape.constant(Tensor::from_parts(vec![n, NUM_CLASSES], mask));
                let sc = logits.mul(&mv)?.sum_all()?;
                let gc = grad(&sc, &[&xv], true)?.remove(0);
                let sq = gc.reshape(vec![n, INPUT_DIM])?.square()?.row_sum()?;
                sq_sum = Some(match sq_sum {
                    None => sq,
                    Some(acc) => acc.add(&sq)?,
                });
            }
            let eps_t = tape.constant(Tensor::filled(vec![n], 1e-12));
            let penalty = sq_sum.unwrap().add(&eps_t)?.powf(0.5)?.mean()?;
            ce.add(&penalty.scalar_mul(cfg.lambda_jr)?)?
        }
        LossKind::Er => {
            let refs: Vec<&Var> = pv.iter().collect();
            let gs = grad(&ce, &refs, true)?;
            let mut ssq: Option<Var> = None;
            for g in &gs {
                let s = g.square()?.sum_all()?;
                ssq = Some(match ssq {
                    None => s,
                    Some(acc) => acc.add(&s)?,
                });
            }
            ce.add(&ssq.unwrap().scalar_mul(cfg.lambda_er / 2.0)?)?
        }
    };
    let refs: Vec<&Var> = pv.iter().collect();
    let gs = grad(&loss, &refs, false)?;
    Ok((loss.item(), gs.into_iter().map(|v| v.tensor()).collect()))
}

/// Loss value and parameter gradients for the mechanism's differentiable
/// objective on an already prepared batch. Exposed so verification suites
/// can compare the gradients against finite differences.
pub fn mechanism_loss_and_grads(
    params: &ParamSet,
    cfg: &TrainConfig,
    x: &Tensor,
    targets: &SoftLabels,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    loss_and_grads(params, cfg.mechanism.loss_kind(), cfg, x, targets)
}

fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// SAM update: ascend to theta + rho g1/|g1|, take the gradient there, restore
/// theta and step with that gradient. A vanishing g1 falls back to plain SGD.
pub fn sam_step(
    params: &mut ParamSet,
    kind_cfg: (&TrainConfig, LossKindArg),
    x: &Tensor,
    targets: &SoftLabels,
    velocity: &mut [Tensor],
    lr: f64,
) -> Result<f64, TrainError> {
    let (cfg, kind) = kind_cfg;
    let (loss, g1) = loss_and_grads(params, kind.0, cfg, x, targets)?;
    let norm = global_grad_norm(&g1);
    if norm < 1e-12 {
        sgd_step(params, &g1, velocity, lr, cfg.momentum);
        return Ok(loss);
    }
    let scale = cfg.rho / norm;
    let mut perturbed = params.clone();
    for (t, g) in perturbed.tensors_mut().zip(&g1) {
        let d = t.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            d[k] += scale * gk;
        }
    }
    let (_, g2) = loss_and_grads(&perturbed, kind.0, cfg, x, targets)?;
    sgd_step(params, &g2, velocity, lr, cfg.momentum);
    Ok(loss)
}

/// Newtype so the private loss kind can cross the public [`sam_step`] surface.
pub struct LossKindArg(LossKind);

/// Fraction of test samples classified correctly.
pub fn accuracy(params: &ParamSet, ds: &Dataset) -> Result<f64, TrainError> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + 256).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (x, y) = ds.batch(&idx);
        let pred = model::predict(params, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Full deterministic training run. Returns the final parameters and one log
/// entry per epoch; NaN loss aborts with [`TrainError::Diverged`].
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(ParamSet, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    let mut params = model::init(cfg.arch, cfg.seed);
    let mut velocity: Vec<Tensor> = params
        .tensors()
        .map(|t| Tensor::filled(t.shape().to_vec(), 0.0))
        .collect();
    let n = train_set.len();
    let bpe = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * bpe;
    let warmup_steps = cfg.warmup_epochs * bpe;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = data::sample_rng(cfg.seed, 0x7368_7566, epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, warmup_steps, cfg.peak_lr);
            last_lr = lr;
            let (x0, y0) = train_set.batch(chunk);
            let (x, targets) = prepare_batch(cfg, &x0, &y0, &mut rng, &params)?;
            let loss = if cfg.mechanism.is_sam() {
                sam_step(
                    &mut params,
                    (cfg, LossKindArg(cfg.mechanism.loss_kind())),
                    &x,
                    &targets,
                    &mut velocity,
                    lr,
                )?
            } else {
                let (loss, g) = loss_and_grads(&params, cfg.mechanism.loss_kind(), cfg, &x, &targets)?;
                sgd_step(&mut params, &g, &mut velocity, lr, cfg.momentum);
                loss
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / n as f64,
            test_acc: accuracy(&params, test_set)?,
            lr: last_lr,
        });
    }
    Ok((params, logs))
}

/// Applies the mechanism's data-side transformation to one raw batch.
fn prepare_batch(
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
    params: &ParamSet,
) -> Result<(Tensor, SoftLabels), TrainError> {
    if let Some(mech) = cfg.mechanism.augmentation() {
        let (xa, ya) = augment_batch(
            AugmentConfig {
                mechanism: mech,
                tau: cfg.tau,
            },
            x,
            y,
            rng,
        )?;
        return Ok((xa, ya));
    }
    let hard = SoftLabels::from_hard(y);
    if cfg.mechanism == Mechanism::At {
        let adv = at_inner_max(
            params,
            x,
            &hard,
            cfg.at_norm,
            cfg.eps_adv,
            cfg.at_steps,
            cfg.at_step_frac * cfg.eps_adv,
        )?;
        return Ok((adv, hard));
    }
    Ok((x.clone(), hard))
}

/// Fine-tunes from `start` at a constant learning rate, recording evenly
/// spaced parameter snapshots (`per_epoch` per epoch).
pub fn lgv_collect(
    start: &ParamSet,
    train_set: &Dataset,
    seed: u64,
    lr_const: f64,
    momentum: f64,
    epochs: usize,
    per_epoch: usize,
    batch_size: usize,
) -> Result<SnapshotSet, TrainError> {
    if epochs == 0 || per_epoch == 0 || batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "lgv needs positive epochs, snapshots per epoch and batch size".into(),
        ));
    }
    let cfg = TrainConfig::new(start.arch, Mechanism::St, seed);
    let mut params = start.clone();
    let mut velocity: Vec<Tensor> = params
        .tensors()
        .map(|t| Tensor::filled(t.shape().to_vec(), 0.0))
        .collect();
    let n = train_set.len();
    let bpe = n.div_ceil(batch_size);
    let every = (bpe / per_epoch).max(1);
    let mut snapshots = Vec::with_capacity(epochs * per_epoch);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = data::sample_rng(seed, 0x6c67_76, epoch as u64);
        order.shuffle(&mut rng);
        let mut taken = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk);
            let targets = SoftLabels::from_hard(&y);
            let (loss, g) = loss_and_grads(&params, LossKind::Plain, &cfg, &x, &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step: b });
            }
            sgd_step(&mut params, &g, &mut velocity, lr_const, momentum);
            if (b + 1) % every == 0 && taken < per_epoch {
                snapshots.push(params.clone());
                taken += 1;
            }
        }
        while taken < per_epoch {
            snapshots.push(params.clone());
            taken += 1;
        }
    }
    Ok(SnapshotSet { snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::glyphset_generate;
    use rand::{Rng, SeedableRng};

    fn quad_params() -> ParamSet {
        // tiny mlp_s with deterministic weights for oracle checks
        model::init(ArchId::MlpS, 7)
    }

    fn tiny_batch(n: usize) -> (Tensor, Vec<usize>) {
        let (train, _) = glyphset_generate(3, 100, 10).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        train.batch(&idx)
    }

    #[test]
    fn cosine_schedule_shape() {
        let total = 100;
        let warmup = 10;
        assert!((cosine_lr(0, total, warmup, 1.0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(9, total, warmup, 1.0) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(10, total, warmup, 1.0) - 1.0).abs() < 1e-12);
        // monotone decay after warmup
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = cosine_lr(s, total, warmup, 1.0);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        assert!(cosine_lr(99, total, warmup, 1.0) < 0.01);
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let mut params = quad_params();
        let before: Vec<Tensor> = params.tensors().cloned().collect();
        let grads: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::filled(t.shape().to_vec(), 1.0))
            .collect();
        let mut vel: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::filled(t.shape().to_vec(), 0.0))
            .collect();
        sgd_step(&mut params, &grads, &mut vel, 0.1, 0.9);
        sgd_step(&mut params, &grads, &mut vel, 0.1, 0.9);
        // v1 = 1, v2 = 1.9 -> theta = theta0 - 0.1 (1 + 1.9)
        for (t, b) in params.tensors().zip(&before) {
            for (a, x0) in t.data().iter().zip(b.data()) {
                assert!((a - (x0 - 0.29)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_max_respects_budget_and_increases_loss() {
        let params = quad_params();
        let (x, y) = tiny_batch(8);
        let targets = SoftLabels::from_hard(&y);
        for norm in [NormKind::L2, NormKind::Linf] {
            let eps = 0.5;
            let adv = at_inner_max(&params, &x, &targets, norm, eps, 7, 0.25 * eps).unwrap();
            for i in 0..8 {
                let d: Vec<f64> = (0..INPUT_DIM)
                    .map(|k| adv.data()[i * INPUT_DIM + k] - x.data()[i * INPUT_DIM + k])
                    .collect();
                match norm {
                    NormKind::L2 => {
                        let n2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                        assert!(n2 <= eps + 1e-9, "l2 {n2} > {eps}");
                    }
                    NormKind::Linf => {
                        assert!(d.iter().all(|v| v.abs() <= eps + 1e-12));
                    }
                }
            }
            assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 0);
            let (l0, _) = loss_and_grads(&params, LossKind::Plain, &cfg, &x, &targets).unwrap();
            let (l1, _) = loss_and_grads(&params, LossKind::Plain, &cfg, &adv, &targets).unwrap();
            assert!(l1 >= l0, "{norm:?}: adversarial loss {l1} < clean {l0}");
        }
    }

    #[test]
    fn ir_penalty_matches_finite_differences() {
        // compare the IR objective's parameter gradient with central
        // differences of the objective itself
        let params = quad_params();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::Ir, 0);
        cfg.lambda_ir = 0.5;
        let (x, y) = tiny_batch(4);
        let targets = SoftLabels::from_hard(&y);
        let (_, grads) = loss_and_grads(&params, LossKind::Ir, &cfg, &x, &targets).unwrap();
        let eval = |p: &ParamSet| loss_and_grads(p, LossKind::Ir, &cfg, &x, &targets).unwrap().0;
        let h = 1e-5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..6 {
            let pi = rng.gen_range(0..params.params().len());
            let ti = rng.gen_range(0..params.params()[pi].1.len());
            let mut plus = params.clone();
            plus.tensors_mut().nth(pi).unwrap().data_mut()[ti] += h;
            let mut minus = params.clone();
            minus.tensors_mut().nth(pi).unwrap().data_mut()[ti] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads[pi].data()[ti];
            assert!(
                (fd - ad).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {pi}[{ti}]: fd {fd} vs ad {ad}"
            );
        }
    }

    #[test]
    fn jr_penalty_matches_jacobian_oracle() {
        // Frobenius norm from explicit per-logit finite differences of the
        // network outputs wrt the input
        let params = quad_params();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::Jr, 0);
        cfg.lambda_jr = 1.0;
        let (x, y) = tiny_batch(2);
        let targets = SoftLabels::from_hard(&y);
        let (loss_jr, _) = loss_and_grads(&params, LossKind::Jr, &cfg, &x, &targets).unwrap();
        let (loss_ce, _) = loss_and_grads(&params, LossKind::Plain, &cfg, &x, &targets).unwrap();
        let penalty = loss_jr - loss_ce;

        let h = 1e-6;
        let mut fro_mean = 0.0;
        for i in 0..2 {
            let mut sq = 0.0;
            for k in 0..INPUT_DIM {
                let mut xp = x.clone();
                xp.data_mut()[i * INPUT_DIM + k] += h;
                let mut xm = x.clone();
                xm.data_mut()[i * INPUT_DIM + k] -= h;
                let lp = model::forward(&params, &xp).unwrap();
                let lm = model::forward(&params, &xm).unwrap();
                for c in 0..NUM_CLASSES {
                    let d = (lp.data()[i * NUM_CLASSES + c] - lm.data()[i * NUM_CLASSES + c]) / (2.0 * h);
                    sq += d * d;
                }
            }
            fro_mean += sq.sqrt() / 2.0;
        }
        assert!(
            (penalty - fro_mean).abs() <= 1e-4 * (1.0 + fro_mean),
            "penalty {penalty} vs oracle {fro_mean}"
        );
    }

    #[test]
    fn er_gradient_matches_finite_differences() {
        let params = quad_params();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::Er, 0);
        cfg.lambda_er = 0.1;
        let (x, y) = tiny_batch(4);
        let targets = SoftLabels::from_hard(&y);
        let (_, grads) = loss_and_grads(&params, LossKind::Er, &cfg, &x, &targets).unwrap();
        let eval = |p: &ParamSet| loss_and_grads(p, LossKind::Er, &cfg, &x, &targets).unwrap().0;
        let h = 1e-5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..6 {
            let pi = rng.gen_range(0..params.params().len());
            let ti = rng.gen_range(0..params.params()[pi].1.len());
            let mut plus = params.clone();
            plus.tensors_mut().nth(pi).unwrap().data_mut()[ti] += h;
            let mut minus = params.clone();
            minus.tensors_mut().nth(pi).unwrap().data_mut()[ti] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads[pi].data()[ti];
            assert!(
                (fd - ad).abs() <= 2e-5 * (1.0 + fd.abs()),
                "param {pi}[{ti}]: fd {fd} vs ad {ad}"
            );
        }
    }

    #[test]
    fn sam_restores_parameters_before_stepping() {
        // with lr = 0 SAM must leave parameters exactly unchanged
        let mut params = quad_params();
        let before: Vec<Tensor> = params.tensors().cloned().collect();
        let cfg = TrainConfig::new(ArchId::MlpS, Mechanism::Sam, 0);
        let (x, y) = tiny_batch(4);
        let targets = SoftLabels::from_hard(&y);
        let mut vel: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::filled(t.shape().to_vec(), 0.0))
            .collect();
        sam_step(
            &mut params,
            (&cfg, LossKindArg(LossKind::Plain)),
            &x,
            &targets,
            &mut vel,
            0.0,
        )
        .unwrap();
        for (t, b) in params.tensors().zip(&before) {
            assert_eq!(t.data(), b.data());
        }
    }

    #[test]
    fn sam_zero_gradient_falls_back_to_sgd() {
        // zero weights give exactly zero parameter gradient for a uniform
        // target distribution... not quite; instead check against identical
        // plain SGD behaviour when rho scaling is unreachable.
        let mut params = model::init(ArchId::MlpS, 1);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // uniform logits + uniform soft targets -> zero CE gradient
        let (x, _) = tiny_batch(4);
        let targets = SoftLabels {
            probs: Tensor::filled(vec![4, NUM_CLASSES], 0.1),
        };
        let cfg = TrainConfig::new(ArchId::MlpS, Mechanism::Sam, 0);
        let mut vel: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::filled(t.shape().to_vec(), 0.0))
            .collect();
        let before: Vec<Tensor> = params.tensors().cloned().collect();
        sam_step(
            &mut params,
            (&cfg, LossKindArg(LossKind::Plain)),
            &x,
            &targets,
            &mut vel,
            0.1,
        )
        .unwrap();
        for (t, b) in params.tensors().zip(&before) {
            for (a, x0) in t.data().iter().zip(b.data()) {
                assert!((a - x0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_deterministic_across_runs() {
        let (train_set, test_set) = glyphset_generate(11, 100, 50).unwrap();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 42);
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        let (a, la) = train(&cfg, &train_set, &test_set).unwrap();
        let (b, lb) = train(&cfg, &train_set, &test_set).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(la.len(), 2);
        assert_eq!(la[0].train_loss, lb[0].train_loss);
        cfg.seed = 43;
        let (c, _) = train(&cfg, &train_set, &test_set).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn short_run_learns_something() {
        let (train_set, test_set) = glyphset_generate(11, 600, 100).unwrap();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 0);
        cfg.epochs = 10;
        cfg.warmup_epochs = 1;
        let (_, logs) = train(&cfg, &train_set, &test_set).unwrap();
        let last = logs.last().unwrap();
        assert!(
            last.test_acc > 0.6,
            "10-epoch mlp_s accuracy only {}",
            last.test_acc
        );
        assert!(last.train_loss < logs[0].train_loss);
    }

    #[test]
    fn lgv_snapshots_count_and_zero_lr_identity() {
        let (train_set, _) = glyphset_generate(2, 100, 10).unwrap();
        let start = quad_params();
        let set = lgv_collect(&start, &train_set, 0, 0.0, 0.9, 2, 3, 32).unwrap();
        assert_eq!(set.snapshots.len(), 6);
        for s in &set.snapshots {
            assert_eq!(s.checksum(), start.checksum());
        }
        let moving = lgv_collect(&start, &train_set, 0, 0.05, 0.9, 1, 2, 32).unwrap();
        assert_ne!(moving.snapshots[0].checksum(), start.checksum());
    }

    #[test]
    fn invalid_configs_rejected() {
        let (train_set, test_set) = glyphset_generate(2, 100, 10).unwrap();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 0);
        cfg.peak_lr = -1.0;
        assert!(train(&cfg, &train_set, &test_set).is_err());
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::At, 0);
        cfg.eps_adv = 0.0;
        assert!(train(&cfg, &train_set, &test_set).is_err());
    }

    #[test]
    fn huge_lr_diverges_cleanly() {
        let (train_set, test_set) = glyphset_generate(2, 100, 10).unwrap();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 0);
        cfg.peak_lr = 1e200;
        cfg.epochs = 3;
        cfg.warmup_epochs = 1;
        match train(&cfg, &train_set, &test_set) {
            Err(TrainError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
