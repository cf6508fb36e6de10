//! Transfer attack construction: PGD, momentum (MI) and input-diversity (DIM)
//! variants under L-inf and L2 budgets, with optional targeting, random
//! starts, multi-restart, and snapshot-ensemble surrogates.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, softmax_cross_entropy, Tape};
use crate::data::{self, SoftLabels};
use crate::error::AttackError;
use crate::model::{self, ParamSet, INPUT_DIM, INPUT_H, INPUT_W, NUM_CLASSES};
use crate::tensor::Tensor;

/// Perturbation budget norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
        }
    }

    pub fn from_name(s: &str) -> Option<NormKind> {
        match s {
            "linf" => Some(NormKind::Linf),
            "l2" => Some(NormKind::L2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Mi,
    Dim,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Mi => "mi",
            AttackKind::Dim => "dim",
        }
    }

    pub fn from_name(s: &str) -> Option<AttackKind> {
        match s {
            "pgd" => Some(AttackKind::Pgd),
            "mi" => Some(AttackKind::Mi),
            "dim" => Some(AttackKind::Dim),
            _ => None,
        }
    }
}

/// How the target class is chosen for targeted attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// y_target = (y + offset) mod 10.
    FixedOffset(usize),
    /// Least-likely class under the surrogate on the clean input.
    LeastLikely,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub norm: NormKind,
    pub eps: f64,
    pub steps: usize,
    /// Defaults to 2.5 eps / steps when unset.
    pub step_size: Option<f64>,
    pub targeted: bool,
    pub target_rule: TargetRule,
    /// MI momentum decay.
    pub mu_decay: f64,
    /// DIM per-sample transform probability.
    pub di_prob: f64,
    pub random_start: bool,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, norm: NormKind, eps: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            kind,
            norm,
            eps,
            steps: 40,
            step_size: None,
            targeted: false,
            target_rule: TargetRule::FixedOffset(1),
            mu_decay: 1.0,
            di_prob: 0.5,
            random_start: true,
            restarts: 1,
            seed,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.eps / self.steps.max(1) as f64)
    }

    fn validate(&self) -> Result<(), AttackError> {
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(AttackError::InvalidConfig(format!(
                "eps {} must be positive and finite",
                self.eps
            )));
        }
        if self.restarts == 0 {
            return Err(AttackError::InvalidConfig("restarts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.di_prob) {
            return Err(AttackError::InvalidConfig(format!(
                "di_prob {} outside [0, 1]",
                self.di_prob
            )));
        }
        if self.mu_decay < 0.0 {
            return Err(AttackError::InvalidConfig("mu_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Clean/adversarial pair set produced by one attack run.
#[derive(Debug, Clone)]
pub struct AdvSet {
    pub clean: Tensor,
    pub adv: Tensor,
    pub labels: Vec<usize>,
    /// Target classes when the attack was targeted.
    pub targets: Option<Vec<usize>>,
    /// Surrogate fooled flags: prediction on the adversarial input differs
    /// from the true label.
    pub fooled: Vec<bool>,
    pub norm: NormKind,
    pub eps: f64,
    /// Steps skipped because every surrogate gradient vanished.
    pub zero_grad_steps: usize,
}

/// Per-sample DIM transform: nearest-neighbor shrink to s x s, random-placed
/// zero padding back to 16 x 16. Stored as an output-to-input index map so
/// the (linear) adjoint is a scatter-add.
struct DiMap {
    map: Vec<i32>,
}

fn di_map(rng: &mut ChaCha8Rng) -> DiMap {
    let s = rng.gen_range(12..=INPUT_H);
    let oy = rng.gen_range(0..=(INPUT_H - s));
    let ox = rng.gen_range(0..=(INPUT_W - s));
    let mut map = vec![-1i32; INPUT_DIM];
    for i in 0..s {
        let si = i * INPUT_H / s;
        for j in 0..s {
            let sj = j * INPUT_W / s;
            map[(oy + i) * INPUT_W + (ox + j)] = (si * INPUT_W + sj) as i32;
        }
    }
    DiMap { map }
}

fn ensemble_grad(
    models: &[&ParamSet],
    x: &Tensor,
    targets: &SoftLabels,
) -> Result<(f64, Tensor), AttackError> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let mut loss: Option<crate::autodiff::Var> = None;
    for m in models {
        let pv = m.leaf_vars(&tape, false);
        let logits = model::forward_graph(m.arch, &pv, &xv)?;
        let ce = softmax_cross_entropy(&logits, &targets.probs)?;
        loss = Some(match loss {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    let loss = loss
        .ok_or_else(|| AttackError::InvalidConfig("empty surrogate ensemble".into()))?
        .scalar_mul(1.0 / models.len() as f64)?;
    let g = grad(&loss, &[&xv], false)?.remove(0).tensor();
    Ok((loss.item(), g))
}

fn choose_targets(
    rule: TargetRule,
    surrogate: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<usize>, AttackError> {
    Ok(match rule {
        TargetRule::FixedOffset(off) => labels.iter().map(|&y| (y + off) % NUM_CLASSES).collect(),
        TargetRule::LeastLikely => {
            let logits = model::forward(surrogate, x)?;
            let d = logits.data();
            labels
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let row = &d[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
                    row.iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect()
        }
    })
}

/// Runs the configured attack against a surrogate ensemble. The first model
/// defines the target-selection logits and the fooled flags.
pub fn attack(
    models: &[&ParamSet],
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvSet, AttackError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(AttackError::InvalidConfig("empty surrogate ensemble".into()));
    }
    let n = x.shape()[0];
    if labels.len() != n {
        return Err(AttackError::InvalidConfig(format!(
            "{} labels for {} samples",
            labels.len(),
            n
        )));
    }
    let targets = if cfg.targeted {
        Some(choose_targets(cfg.target_rule, models[0], x, labels)?)
    } else {
        None
    };
    let loss_labels = targets.as_deref().unwrap_or(labels);
    let soft = SoftLabels::from_hard(loss_labels);
    // ascend on the true-label loss, descend on the target-label loss
    let sign = if cfg.targeted { -1.0 } else { 1.0 };
    let alpha = cfg.step_size();

    let clean = x.data().to_vec();
    let mut best: Option<(Vec<f64>, Vec<f64>)> = None; // (adv, per-sample score)
    let mut zero_grad_steps = 0usize;
    for restart in 0..cfg.restarts {
        let mut adv = clean.clone();
        if cfg.random_start {
            for i in 0..n {
                let mut rng = data::sample_rng(cfg.seed, 0x7273 + restart as u64, i as u64);
                random_start_row(
                    &mut adv[i * INPUT_DIM..(i + 1) * INPUT_DIM],
                    cfg.norm,
                    cfg.eps,
                    &mut rng,
                );
            }
            for i in 0..n {
                crate::training::project_row(
                    &mut adv[i * INPUT_DIM..(i + 1) * INPUT_DIM],
                    &clean[i * INPUT_DIM..(i + 1) * INPUT_DIM],
                    cfg.norm,
                    cfg.eps,
                );
            }
        }
        let mut momentum = vec![0.0; n * INPUT_DIM];
        for step in 0..cfg.steps {
            let xt = Tensor::from_parts(x.shape().to_vec(), adv.clone());
            // DIM: transform a copy of the iterate, pull the gradient back
            // through the per-sample linear map
            let maps: Vec<Option<DiMap>> = if cfg.kind == AttackKind::Dim {
                (0..n)
                    .map(|i| {
                        let mut rng = data::sample_rng(
                            cfg.seed,
                            0x6469_0000 + ((restart as u64) << 16) + step as u64,
                            i as u64,
                        );
                        if rng.gen::<f64>() < cfg.di_prob {
                            Some(di_map(&mut rng))
                        } else {
                            None
                        }
                    })
                    .collect()
            } else {
                vec![]
            };
            let g = if cfg.kind == AttackKind::Dim {
                let mut tdata = adv.clone();
                for (i, m) in maps.iter().enumerate() {
                    if let Some(m) = m {
                        let base = i * INPUT_DIM;
                        let src: Vec<f64> = adv[base..base + INPUT_DIM].to_vec();
                        for (o, &mi) in m.map.iter().enumerate() {
                            tdata[base + o] = if mi >= 0 { src[mi as usize] } else { 0.0 };
                        }
                    }
                }
                let xt = Tensor::from_parts(x.shape().to_vec(), tdata);
                let (_, gt) = ensemble_grad(models, &xt, &soft)?;
                let mut g = gt.data().to_vec();
                for (i, m) in maps.iter().enumerate() {
                    if let Some(m) = m {
                        let base = i * INPUT_DIM;
                        let gout: Vec<f64> = g[base..base + INPUT_DIM].to_vec();
                        for v in &mut g[base..base + INPUT_DIM] {
                            *v = 0.0;
                        }
                        for (o, &mi) in m.map.iter().enumerate() {
                            if mi >= 0 {
                                g[base + mi as usize] += gout[o];
                            }
                        }
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), g)
            } else {
                ensemble_grad(models, &xt, &soft)?.1
            };
            let gd = g.data();
            let mut any_moved = false;
            for i in 0..n {
                let base = i * INPUT_DIM;
                let row = base..base + INPUT_DIM;
                let dir: Vec<f64> = if cfg.kind == AttackKind::Mi {
                    let l1: f64 = gd[row.clone()].iter().map(|v| v.abs()).sum();
                    if l1 >= 1e-14 {
                        for k in 0..INPUT_DIM {
                            momentum[base + k] =
                                cfg.mu_decay * momentum[base + k] + gd[base + k] / l1;
                        }
                    } else {
                        for k in 0..INPUT_DIM {
                            momentum[base + k] *= cfg.mu_decay;
                        }
                    }
                    momentum[row.clone()].to_vec()
                } else {
                    gd[row.clone()].to_vec()
                };
                match cfg.norm {
                    NormKind::Linf => {
                        let mut moved = false;
                        for k in 0..INPUT_DIM {
                            let s = dir[k].signum();
                            if s != 0.0 {
                                moved = true;
                            }
                            adv[base + k] += sign * alpha * s;
                        }
                        any_moved |= moved;
                    }
                    NormKind::L2 => {
                        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if dn >= 1e-14 {
                            any_moved = true;
                            for k in 0..INPUT_DIM {
                                adv[base + k] += sign * alpha * dir[k] / dn;
                            }
                        }
                    }
                }
                crate::training::project_row(
                    &mut adv[base..base + INPUT_DIM],
                    &clean[base..base + INPUT_DIM],
                    cfg.norm,
                    cfg.eps,
                );
            }
            if !any_moved {
                zero_grad_steps += 1;
            }
        }
        // per-sample restart selection: higher loss is better for untargeted,
        // lower for targeted (sign folds both into "maximize score")
        let xa = Tensor::from_parts(x.shape().to_vec(), adv.clone());
        let scores = per_sample_score(models, &xa, &soft, sign)?;
        match &mut best {
            None => best = Some((adv, scores)),
            Some((badv, bscores)) => {
                for i in 0..n {
                    if scores[i] > bscores[i] {
                        bscores[i] = scores[i];
                        badv[i * INPUT_DIM..(i + 1) * INPUT_DIM]
                            .copy_from_slice(&adv[i * INPUT_DIM..(i + 1) * INPUT_DIM]);
                    }
                }
            }
        }
    }
    let adv = Tensor::from_parts(x.shape().to_vec(), best.unwrap().0);
    let preds = model::predict(models[0], &adv)?;
    let fooled = preds.iter().zip(labels).map(|(p, y)| p != y).collect();
    Ok(AdvSet {
        clean: x.clone(),
        adv,
        labels: labels.to_vec(),
        targets,
        fooled,
        norm: cfg.norm,
        eps: cfg.eps,
        zero_grad_steps,
    })
}

fn per_sample_score(
    models: &[&ParamSet],
    x: &Tensor,
    soft: &SoftLabels,
    sign: f64,
) -> Result<Vec<f64>, AttackError> {
    let n = x.shape()[0];
    let mut scores = vec![0.0; n];
    for m in models {
        let logits = model::forward(m, x)?;
        let d = logits.data();
        let t = soft.probs.data();
        for i in 0..n {
            let row = &d[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            let dot: f64 = row
                .iter()
                .zip(&t[i * NUM_CLASSES..(i + 1) * NUM_CLASSES])
                .map(|(z, p)| z * p)
                .sum();
            scores[i] += sign * (lse - dot) / models.len() as f64;
        }
    }
    Ok(scores)
}

fn random_start_row(adv: &mut [f64], norm: NormKind, eps: f64, rng: &mut ChaCha8Rng) {
    match norm {
        NormKind::Linf => {
            for v in adv.iter_mut() {
                *v += rng.gen_range(-eps..eps);
            }
        }
        NormKind::L2 => {
            // uniform in the ball: gaussian direction, radius eps u^(1/d)
            let dir: Vec<f64> = (0..adv.len())
                .map(|_| {
                    let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let r = eps * rng.gen::<f64>().powf(1.0 / adv.len() as f64);
            for (a, d) in adv.iter_mut().zip(&dir) {
                *a += r * d / dn;
            }
        }
    }
}

const SHAPE_HEADER_DIMS: usize = 4;

fn write_bin(path: &Path, t: &Tensor) -> Result<(), AttackError> {
    let mut buf = Vec::with_capacity(8 + t.len() * 8);
    let mut dims = [1u16; SHAPE_HEADER_DIMS];
    let shape = t.shape();
    if shape.len() > SHAPE_HEADER_DIMS || shape.iter().any(|&d| d > u16::MAX as usize) {
        return Err(AttackError::Format(format!("unencodable shape {shape:?}")));
    }
    for (slot, &d) in dims.iter_mut().zip(shape) {
        *slot = d as u16;
    }
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)?;
    Ok(())
}

/// Writes via a temp file + rename so readers never observe a partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn read_bin(path: &Path) -> Result<Tensor, AttackError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(AttackError::Format("truncated shape header".into()));
    }
    let mut shape = Vec::new();
    for i in 0..SHAPE_HEADER_DIMS {
        shape.push(u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 8 + n * 8 {
        return Err(AttackError::Format(format!(
            "expected {} data bytes, found {}",
            n * 8,
            bytes.len() - 8
        )));
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AttackError::Format("non-finite sample values".into()));
    }
    Ok(Tensor::from_parts(shape, data))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AdvMeta {
    norm: NormKind,
    eps: f64,
    labels: Vec<usize>,
    targets: Option<Vec<usize>>,
    fooled: Vec<bool>,
    zero_grad_steps: usize,
}

impl AdvSet {
    /// Serializes to `dir/{clean.bin, adv.bin, meta.json}`.
    pub fn save(&self, dir: &Path) -> Result<(), AttackError> {
        std::fs::create_dir_all(dir)?;
        write_bin(&dir.join("clean.bin"), &self.clean)?;
        write_bin(&dir.join("adv.bin"), &self.adv)?;
        let meta = AdvMeta {
            norm: self.norm,
            eps: self.eps,
            labels: self.labels.clone(),
            targets: self.targets.clone(),
            fooled: self.fooled.clone(),
            zero_grad_steps: self.zero_grad_steps,
        };
        let json = serde_json::to_vec_pretty(&meta)
            .map_err(|e| AttackError::Format(e.to_string()))?;
        atomic_write(&dir.join("meta.json"), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<AdvSet, AttackError> {
        let clean = read_bin(&dir.join("clean.bin"))?;
        let adv = read_bin(&dir.join("adv.bin"))?;
        if clean.shape() != adv.shape() {
            return Err(AttackError::Format(format!(
                "clean shape {:?} != adv shape {:?}",
                clean.shape(),
                adv.shape()
            )));
        }
        let meta: AdvMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)
            .map_err(|e| AttackError::Format(e.to_string()))?;
        let n = clean.shape()[0];
        if meta.labels.len() != n || meta.fooled.len() != n {
            return Err(AttackError::Format("metadata length mismatch".into()));
        }
        Ok(AdvSet {
            clean,
            adv,
            labels: meta.labels,
            targets: meta.targets,
            fooled: meta.fooled,
            norm: meta.norm,
            eps: meta.eps,
            zero_grad_steps: meta.zero_grad_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest actual per-sample perturbation norm (the effective L2 radius
    /// used when an L-inf budget was attacked).
    pub fn max_l2_radius(&self) -> f64 {
        let c = self.clean.data();
        let a = self.adv.data();
        (0..self.len())
            .map(|i| {
                (0..INPUT_DIM)
                    .map(|k| {
                        let d = a[i * INPUT_DIM + k] - c[i * INPUT_DIM + k];
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::glyphset_generate;
    use crate::model::ArchId;
    use crate::training::{train, Mechanism, TrainConfig};

    fn trained() -> (ParamSet, Tensor, Vec<usize>) {
        let (tr, te) = glyphset_generate(4, 200, 50).unwrap();
        let mut cfg = TrainConfig::new(ArchId::MlpS, Mechanism::St, 0);
        cfg.epochs = 4;
        cfg.warmup_epochs = 1;
        let (params, _) = train(&cfg, &tr, &te).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let (x, y) = te.batch(&idx);
        (params, x, y)
    }

    fn budget_ok(set: &AdvSet) {
        let c = set.clean.data();
        let a = set.adv.data();
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..set.len() {
            let d: Vec<f64> = (0..INPUT_DIM)
                .map(|k| a[i * INPUT_DIM + k] - c[i * INPUT_DIM + k])
                .collect();
            match set.norm {
                NormKind::Linf => assert!(d.iter().all(|v| v.abs() <= set.eps + 1e-9)),
                NormKind::L2 => {
                    assert!(d.iter().map(|v| v * v).sum::<f64>().sqrt() <= set.eps + 1e-9)
                }
            }
        }
    }

    #[test]
    fn budget_soundness_all_kinds_and_norms() {
        let (params, x, y) = trained();
        for kind in [AttackKind::Pgd, AttackKind::Mi, AttackKind::Dim] {
            for norm in [NormKind::Linf, NormKind::L2] {
                let eps = match norm {
                    NormKind::Linf => 8.0 / 255.0,
                    NormKind::L2 => 0.5,
                };
                let mut cfg = AttackConfig::new(kind, norm, eps, 9);
                cfg.steps = 10;
                let set = attack(&[&params], &x, &y, &cfg).unwrap();
                budget_ok(&set);
            }
        }
    }

    #[test]
    fn attack_fools_trained_surrogate() {
        let (params, x, y) = trained();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 16.0 / 255.0, 1);
        cfg.steps = 20;
        let set = attack(&[&params], &x, &y, &cfg).unwrap();
        let rate = set.fooled.iter().filter(|&&f| f).count() as f64 / set.len() as f64;
        assert!(rate > 0.2, "white-box fooling rate only {rate}");
    }

    #[test]
    fn dim_with_zero_prob_reduces_to_pgd() {
        let (params, x, y) = trained();
        let mut a = AttackConfig::new(AttackKind::Dim, NormKind::Linf, 8.0 / 255.0, 3);
        a.di_prob = 0.0;
        a.steps = 5;
        let mut b = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 8.0 / 255.0, 3);
        b.steps = 5;
        let sa = attack(&[&params], &x, &y, &a).unwrap();
        let sb = attack(&[&params], &x, &y, &b).unwrap();
        assert_eq!(sa.adv.data(), sb.adv.data());
    }

    #[test]
    fn mi_with_zero_decay_reduces_to_sign_pgd_on_linf() {
        let (params, x, y) = trained();
        let mut a = AttackConfig::new(AttackKind::Mi, NormKind::Linf, 8.0 / 255.0, 3);
        a.mu_decay = 0.0;
        a.steps = 5;
        let mut b = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 8.0 / 255.0, 3);
        b.steps = 5;
        let sa = attack(&[&params], &x, &y, &a).unwrap();
        let sb = attack(&[&params], &x, &y, &b).unwrap();
        assert_eq!(sa.adv.data(), sb.adv.data());
    }

    #[test]
    fn deterministic_given_seed() {
        let (params, x, y) = trained();
        let mut cfg = AttackConfig::new(AttackKind::Dim, NormKind::L2, 0.5, 7);
        cfg.steps = 5;
        let a = attack(&[&params], &x, &y, &cfg).unwrap();
        let b = attack(&[&params], &x, &y, &cfg).unwrap();
        assert_eq!(a.adv.data(), b.adv.data());
        cfg.seed = 8;
        let c = attack(&[&params], &x, &y, &cfg).unwrap();
        assert_ne!(a.adv.data(), c.adv.data());
    }

    #[test]
    fn zero_steps_without_random_start_is_identity() {
        let (params, x, y) = trained();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 0.1, 0);
        cfg.steps = 0;
        cfg.random_start = false;
        let set = attack(&[&params], &x, &y, &cfg).unwrap();
        assert_eq!(set.adv.data(), set.clean.data());
    }

    #[test]
    fn targeted_rules() {
        let (params, x, y) = trained();
        let t = choose_targets(TargetRule::FixedOffset(1), &params, &x, &y).unwrap();
        for (yt, yy) in t.iter().zip(&y) {
            assert_eq!(*yt, (yy + 1) % NUM_CLASSES);
        }
        let ll = choose_targets(TargetRule::LeastLikely, &params, &x, &y).unwrap();
        let logits = model::forward(&params, &x).unwrap();
        for (i, &c) in ll.iter().enumerate() {
            let row = &logits.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            assert!(row.iter().all(|&v| v >= row[c]));
        }
        // targeted attacks must push toward the target class
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 16.0 / 255.0, 0);
        cfg.targeted = true;
        cfg.steps = 20;
        let set = attack(&[&params], &x, &y, &cfg).unwrap();
        assert!(set.targets.is_some());
        let preds = model::predict(&params, &set.adv).unwrap();
        let hits = preds
            .iter()
            .zip(set.targets.as_ref().unwrap())
            .filter(|(p, t)| p == t)
            .count();
        assert!(hits > 0, "targeted attack never reached its target class");
    }

    #[test]
    fn ensemble_changes_result_and_is_budget_sound() {
        let (pa, x, y) = trained();
        let pb = model::init(ArchId::MlpS, 77);
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::L2, 0.5, 5);
        cfg.steps = 5;
        let single = attack(&[&pa], &x, &y, &cfg).unwrap();
        let ens = attack(&[&pa, &pb], &x, &y, &cfg).unwrap();
        budget_ok(&ens);
        assert_ne!(single.adv.data(), ens.adv.data());
    }

    #[test]
    fn advset_roundtrip_and_corruption() {
        let (params, x, y) = trained();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, 0.05, 2);
        cfg.steps = 3;
        let set = attack(&[&params], &x, &y, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = AdvSet::load(dir.path()).unwrap();
        assert_eq!(back.adv.data(), set.adv.data());
        assert_eq!(back.clean.data(), set.clean.data());
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.fooled, set.fooled);
        assert_eq!(back.norm, set.norm);

        // truncate adv.bin -> Format error
        let adv_path = dir.path().join("adv.bin");
        let bytes = std::fs::read(&adv_path).unwrap();
        std::fs::write(&adv_path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(AdvSet::load(dir.path()), Err(AttackError::Format(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let (params, x, y) = trained();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, NormKind::Linf, -0.1, 0);
        assert!(attack(&[&params], &x, &y, &cfg).is_err());
        cfg.eps = 0.1;
        cfg.restarts = 0;
        assert!(attack(&[&params], &x, &y, &cfg).is_err());
        cfg.restarts = 1;
        assert!(attack(&[], &x, &y, &cfg).is_err());
    }
}
