//! Adversarial feature-vector generation. Four search strategies produce a
//! sparse integer delta over the raw feature columns, searching in the
//! correlation-merged space so that correlated features move together, and
//! a two-step post-process shrinks the delta afterwards. Every candidate is
//! validated against the target classifier before it is returned, so a
//! returned delta is a verified evasion rather than a substitute-only one.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::FeaturePartition;
use crate::features::{FeatureTable, FeatureVector, Group};
use crate::learners::{Classifier, MlpModel};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VecModError {
    #[error("attack budget exhausted without fooling the target")]
    BudgetExhausted,
    #[error("strategy does not support this attack mode")]
    ModeUnsupported,
    #[error("bad attack spec: {0}")]
    BadSpec(String),
    #[error("length {got} does not match expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Learn(#[from] crate::learners::LearnError),
    #[error(transparent)]
    Correlation(#[from] crate::correlation::CorrelationError),
}

pub type Result<T> = std::result::Result<T, VecModError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Any label other than the true one counts as success.
    Untargeted,
    /// Success only when the target model emits this exact label.
    Targeted(usize),
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub mode: AttackMode,
    /// Feature groups the attack may touch; columns outside stay frozen.
    pub groups: BTreeSet<Group>,
    /// Target-query budget for the CW outer loop.
    pub max_candidates: usize,
    /// Inclusive range of column counts per random attempt.
    pub rand_features: (usize, usize),
    pub rand_attempts: usize,
    pub pgd_alpha: f64,
    pub pgd_iters: usize,
    pub cw_lr: f64,
    pub cw_iters: usize,
    pub cw_search_steps: usize,
    pub cw_kappa: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(mode: AttackMode, seed: u64) -> Self {
        AttackSpec {
            mode,
            groups: [Group::LinearInstr, Group::CodeInstr, Group::CodeAnnot]
                .into_iter()
                .collect(),
            max_candidates: 200,
            rand_features: (2, 20),
            rand_attempts: 5000,
            pgd_alpha: 0.1,
            pgd_iters: 100,
            cw_lr: 0.01,
            cw_iters: 1000,
            cw_search_steps: 9,
            cw_kappa: 0.0,
            seed,
        }
    }
}

/// Per-attack immutable surroundings: the feature table the vector is
/// expressed in, the per-column value caps observed in training, the
/// sample's true label, and the model the attack must actually fool.
pub struct AttackContext<'a> {
    pub table: &'a FeatureTable,
    pub value_caps: &'a [u64],
    pub true_label: usize,
    pub target: &'a dyn Classifier,
}

/// Column-wise maximum over a training set; random values and box
/// projections stay within [0, cap] to keep candidates binary-plausible.
pub fn value_caps(training: &[FeatureVector]) -> Vec<u64> {
    let width = training.first().map_or(0, |v| v.counts.len());
    let mut caps = vec![0u64; width];
    for v in training {
        assert_eq!(v.counts.len(), width, "ragged training vectors");
        for (cap, &c) in caps.iter_mut().zip(&v.counts) {
            *cap = (*cap).max(c);
        }
    }
    caps
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delta {
    /// Sparse column -> integer change; zero entries are never stored.
    pub changes: BTreeMap<usize, i64>,
    pub strategy: &'static str,
    /// Candidates the producing strategy tested before this one stuck.
    pub iterations: usize,
}

impl Delta {
    pub fn from_dense(dense: &[i64], strategy: &'static str, iterations: usize) -> Delta {
        Delta {
            changes: dense
                .iter()
                .enumerate()
                .filter(|(_, &d)| d != 0)
                .map(|(i, &d)| (i, d))
                .collect(),
            strategy,
            iterations,
        }
    }

    pub fn support(&self) -> usize {
        self.changes.len()
    }

    pub fn apply(&self, x: &FeatureVector) -> Vec<u64> {
        apply_changes(x, &self.changes)
    }
}

fn apply_changes(x: &FeatureVector, changes: &BTreeMap<usize, i64>) -> Vec<u64> {
    let mut out = x.counts.clone();
    for (&col, &d) in changes {
        let v = out[col] as i64 + d;
        assert!(v >= 0, "delta drives column {col} below zero");
        out[col] = v as u64;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attempt {
    pub strategy: &'static str,
    pub iteration: usize,
    pub fooled: bool,
}

/// One record per candidate vector shown to the misprediction predicate.
#[derive(Debug, Clone, Default)]
pub struct AttemptLog {
    pub records: Vec<Attempt>,
}

impl AttemptLog {
    fn push(&mut self, strategy: &'static str, iteration: usize, fooled: bool) {
        self.records.push(Attempt {
            strategy,
            iteration,
            fooled,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\n", r.strategy, r.iteration, r.fooled));
        }
        out
    }
}

fn validate(spec: &AttackSpec, ctx: &AttackContext, x: &FeatureVector) -> Result<()> {
    if spec.groups.is_empty() {
        return Err(VecModError::BadSpec("empty group mask".into()));
    }
    let (lo, hi) = spec.rand_features;
    if lo == 0 || lo > hi {
        return Err(VecModError::BadSpec(format!(
            "bad random feature-count range {lo}..={hi}"
        )));
    }
    if ctx.value_caps.len() != ctx.table.len() {
        return Err(VecModError::DimensionMismatch {
            got: ctx.value_caps.len(),
            want: ctx.table.len(),
        });
    }
    if x.counts.len() != ctx.table.len() {
        return Err(VecModError::DimensionMismatch {
            got: x.counts.len(),
            want: ctx.table.len(),
        });
    }
    if let AttackMode::Targeted(t) = spec.mode {
        if t == ctx.true_label {
            return Err(VecModError::BadSpec(
                "target class equals the true label".into(),
            ));
        }
        if t >= ctx.target.n_classes() {
            return Err(VecModError::BadSpec("target class out of range".into()));
        }
    }
    Ok(())
}

fn fooled(spec: &AttackSpec, ctx: &AttackContext, label: usize) -> bool {
    match spec.mode {
        AttackMode::Untargeted => label != ctx.true_label,
        AttackMode::Targeted(t) => label == t,
    }
}

fn test_candidate(
    spec: &AttackSpec,
    ctx: &AttackContext,
    log: &mut AttemptLog,
    strategy: &'static str,
    iteration: usize,
    candidate: &[u64],
) -> Result<bool> {
    let xf: Vec<f64> = candidate.iter().map(|&c| c as f64).collect();
    let label = ctx.target.predict_label(&xf)?;
    let ok = fooled(spec, ctx, label);
    log.push(strategy, iteration, ok);
    Ok(ok)
}

fn allowed_columns(spec: &AttackSpec, table: &FeatureTable) -> Vec<usize> {
    (0..table.len())
        .filter(|&c| spec.groups.contains(&table.key_of(c).group))
        .collect()
}

/// Partitions the attack may move: representative must vary in training
/// (frozen otherwise) and every member must be in an unmasked group, since
/// expanding a merged move touches all of them.
fn allowed_partitions(
    spec: &AttackSpec,
    ctx: &AttackContext,
    part: &FeaturePartition,
) -> Vec<usize> {
    part.partitions
        .iter()
        .enumerate()
        .filter(|(p, members)| {
            part.std[part.representative[*p]] > 0.0
                && members
                    .iter()
                    .all(|&c| spec.groups.contains(&ctx.table.key_of(c).group))
        })
        .map(|(p, _)| p)
        .collect()
}

/// Per-partition bounds in merged space: the z-scores of count 0 and of the
/// training cap of the representative column. Frozen partitions get [0, 0].
fn merged_box(ctx: &AttackContext, part: &FeaturePartition) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(part.partitions.len());
    let mut hi = Vec::with_capacity(part.partitions.len());
    for p in 0..part.partitions.len() {
        let rep = part.representative[p];
        let sd = part.std[rep];
        if sd == 0.0 {
            lo.push(0.0);
            hi.push(0.0);
        } else {
            lo.push((0.0 - part.mean[rep]) / sd);
            hi.push((ctx.value_caps[rep] as f64 - part.mean[rep]) / sd);
        }
    }
    (lo, hi)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Draw `k` distinct items from `pool` (first `k` after a partial shuffle).
fn sample_distinct(pool: &mut [usize], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    k
}

/// Random search directly over raw columns: each attempt redraws a handful
/// of columns uniformly within their training caps.
pub fn attack_rand(
    x: &FeatureVector,
    spec: &AttackSpec,
    ctx: &AttackContext,
    log: &mut AttemptLog,
) -> Result<Delta> {
    validate(spec, ctx, x)?;
    let allowed = allowed_columns(spec, ctx.table);
    if allowed.is_empty() {
        return Err(VecModError::BudgetExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.rand_features;
    let mut pool = allowed;
    for attempt in 0..spec.rand_attempts {
        let k = sample_distinct(&mut pool, rng.gen_range(lo..=hi), &mut rng);
        let mut changes = BTreeMap::new();
        for &col in &pool[..k] {
            let new = rng.gen_range(0..=ctx.value_caps[col]);
            let d = new as i64 - x.counts[col] as i64;
            if d != 0 {
                changes.insert(col, d);
            }
        }
        let delta = Delta {
            changes,
            strategy: "rand",
            iterations: attempt + 1,
        };
        if test_candidate(spec, ctx, log, "rand", attempt, &delta.apply(x))? {
            return Ok(delta);
        }
    }
    Err(VecModError::BudgetExhausted)
}

/// Random search in merged space: redraws whole partitions, so correlated
/// columns keep their fitted linear relation after expansion.
pub fn attack_rand_cor(
    x: &FeatureVector,
    spec: &AttackSpec,
    ctx: &AttackContext,
    part: &FeaturePartition,
    log: &mut AttemptLog,
) -> Result<Delta> {
    validate(spec, ctx, x)?;
    let cur = part.merge(x)?;
    let allowed = allowed_partitions(spec, ctx, part);
    if allowed.is_empty() {
        return Err(VecModError::BudgetExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.rand_features;
    let mut pool = allowed;
    for attempt in 0..spec.rand_attempts {
        let k = sample_distinct(&mut pool, rng.gen_range(lo..=hi), &mut rng);
        let mut merged_delta = vec![0.0; part.partitions.len()];
        for &p in &pool[..k] {
            let rep = part.representative[p];
            let new = rng.gen_range(0..=ctx.value_caps[rep]) as f64;
            let z = (new - part.mean[rep]) / part.std[rep];
            merged_delta[p] = z - cur[p];
        }
        let dense = part.expand(&merged_delta, x)?;
        let delta = Delta::from_dense(&dense, "rand-cor", attempt + 1);
        if test_candidate(spec, ctx, log, "rand-cor", attempt, &delta.apply(x))? {
            return Ok(delta);
        }
    }
    Err(VecModError::BudgetExhausted)
}

/// Projected gradient ascent on the substitute's loss of the true class,
/// testing the expanded integer candidate against the target after every
/// step. Untargeted only.
pub fn attack_pgd(
    x: &FeatureVector,
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    part: &FeaturePartition,
    log: &mut AttemptLog,
) -> Result<Delta> {
    validate(spec, ctx, x)?;
    if matches!(spec.mode, AttackMode::Targeted(_)) {
        return Err(VecModError::ModeUnsupported);
    }
    let cur = part.merge(x)?;
    if substitute.input_width() != cur.len() {
        return Err(VecModError::DimensionMismatch {
            got: substitute.input_width(),
            want: cur.len(),
        });
    }
    let allowed = allowed_partitions(spec, ctx, part);
    if allowed.is_empty() {
        return Err(VecModError::BudgetExhausted);
    }
    let (box_lo, box_hi) = merged_box(ctx, part);
    let mut z = cur.clone();
    for iter in 0..spec.pgd_iters {
        let g = substitute.loss_gradient(&z, ctx.true_label)?;
        let mut moved = false;
        for &p in &allowed {
            let next = (z[p] + spec.pgd_alpha * sign(g[p])).clamp(box_lo[p], box_hi[p]);
            if next != z[p] {
                z[p] = next;
                moved = true;
            }
        }
        if !moved {
            // Zero gradient or a saturated box; further steps are no-ops.
            return Err(VecModError::BudgetExhausted);
        }
        let merged_delta: Vec<f64> = z.iter().zip(&cur).map(|(a, b)| a - b).collect();
        let dense = part.expand(&merged_delta, x)?;
        let delta = Delta::from_dense(&dense, "pgd", iter + 1);
        if test_candidate(spec, ctx, log, "pgd", iter, &delta.apply(x))? {
            return Ok(delta);
        }
    }
    Err(VecModError::BudgetExhausted)
}

/// Margin the CW objective penalizes, plus the runner-up class defining it.
/// Positive margin means the substitute still predicts the wrong thing
/// (from the attacker's point of view).
fn cw_margin(spec: &AttackSpec, ctx: &AttackContext, logits: &[f64]) -> (f64, usize) {
    let argmax_excluding = |skip: usize| {
        logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != skip)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap()
    };
    match spec.mode {
        AttackMode::Untargeted => {
            let j = argmax_excluding(ctx.true_label);
            (logits[ctx.true_label] - logits[j], j)
        }
        AttackMode::Targeted(t) => {
            let j = argmax_excluding(t);
            (logits[j] - logits[t], j)
        }
    }
}

fn cw_margin_gradient(
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    z: &[f64],
    runner_up: usize,
) -> Vec<f64> {
    let r = match spec.mode {
        AttackMode::Untargeted => substitute.logit_diff_gradient(z, ctx.true_label, runner_up),
        AttackMode::Targeted(t) => substitute.logit_diff_gradient(z, runner_up, t),
    };
    r.expect("substitute width was validated")
}

/// One Adam run of the CW objective |delta|^2 + c * margin at a fixed trade
/// off constant. Returns the best substitute-fooling point found, with the
/// margin gradient there for the coordinate-removal heuristic.
#[allow(clippy::too_many_arguments)]
fn cw_once(
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    cur: &[f64],
    allowed: &BTreeSet<usize>,
    box_lo: &[f64],
    box_hi: &[f64],
    c: f64,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n = cur.len();
    let mut delta = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut plateau = f64::INFINITY;
    for it in 0..spec.cw_iters {
        let z: Vec<f64> = cur.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let logits = substitute.logits(&z).expect("substitute width was validated");
        let (margin, runner_up) = cw_margin(spec, ctx, &logits);
        let dist: f64 = delta.iter().map(|d| d * d).sum();
        let gf = cw_margin_gradient(spec, ctx, substitute, &z, runner_up);
        if margin < 0.0 && best.as_ref().is_none_or(|b| dist < b.0) {
            best = Some((dist, delta.clone(), gf.clone()));
        }
        let obj = dist + c * margin.max(-spec.cw_kappa);
        if it % 50 == 49 {
            if obj > plateau - 1e-6 {
                break;
            }
            plateau = obj;
        }
        let t = it as i32 + 1;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for &p in allowed {
            // The margin term only pulls while it is above the -kappa floor.
            let gm = if margin > -spec.cw_kappa { gf[p] } else { 0.0 };
            let g = 2.0 * delta[p] + c * gm;
            m[p] = B1 * m[p] + (1.0 - B1) * g;
            v[p] = B2 * v[p] + (1.0 - B2) * g * g;
            delta[p] -= spec.cw_lr * (m[p] / c1) / ((v[p] / c2).sqrt() + EPS);
            delta[p] = delta[p].clamp(box_lo[p] - cur[p], box_hi[p] - cur[p]);
        }
    }
    best
}

/// Binary search over the CW trade-off constant, keeping the smallest
/// successful perturbation across the ladder.
fn cw_inner(
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    cur: &[f64],
    allowed: &BTreeSet<usize>,
    box_lo: &[f64],
    box_hi: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut c = 1.0f64;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..spec.cw_search_steps {
        match cw_once(spec, ctx, substitute, cur, allowed, box_lo, box_hi, c) {
            Some((dist, dm, gf)) => {
                if best.as_ref().is_none_or(|b| dist < b.0) {
                    best = Some((dist, dm, gf));
                }
                hi = c;
                c = (lo + hi) / 2.0;
            }
            None => {
                lo = c;
                c = if hi.is_infinite() { c * 10.0 } else { (lo + hi) / 2.0 };
            }
        }
    }
    best.map(|(_, dm, gf)| (dm, gf))
}

/// Carlini-Wagner L0: repeatedly solve the L2-style inner problem, test the
/// expanded candidate against the target, then remove the allowed
/// coordinate contributing least (smallest |gradient * delta|) and try
/// again with a smaller support. Returns the last candidate that fooled
/// the target.
pub fn attack_cw_l0(
    x: &FeatureVector,
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    part: &FeaturePartition,
    log: &mut AttemptLog,
) -> Result<Delta> {
    validate(spec, ctx, x)?;
    let cur = part.merge(x)?;
    if substitute.input_width() != cur.len() {
        return Err(VecModError::DimensionMismatch {
            got: substitute.input_width(),
            want: cur.len(),
        });
    }
    let mut allowed: BTreeSet<usize> = allowed_partitions(spec, ctx, part).into_iter().collect();
    if allowed.is_empty() {
        return Err(VecModError::BudgetExhausted);
    }
    let (box_lo, box_hi) = merged_box(ctx, part);
    let mut best: Option<Delta> = None;
    let mut outer = 0;
    while !allowed.is_empty() && outer < spec.max_candidates {
        let Some((dm, gf)) = cw_inner(spec, ctx, substitute, &cur, &allowed, &box_lo, &box_hi)
        else {
            break;
        };
        outer += 1;
        let dense = part.expand(&dm, x)?;
        let delta = Delta::from_dense(&dense, "cw", outer);
        if test_candidate(spec, ctx, log, "cw", outer - 1, &delta.apply(x))? {
            best = Some(delta);
        }
        let drop = allowed
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let ka = (gf[a] * dm[a]).abs();
                let kb = (gf[b] * dm[b]).abs();
                ka.partial_cmp(&kb).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        allowed.remove(&drop);
    }
    best.ok_or(VecModError::BudgetExhausted)
}

/// The combined strategy: most effective first, first success wins.
/// Strategies that cannot run in this mode or that exhaust their budget
/// fall through to the next one.
pub fn attack_combined(
    x: &FeatureVector,
    spec: &AttackSpec,
    ctx: &AttackContext,
    substitute: &MlpModel,
    part: &FeaturePartition,
    log: &mut AttemptLog,
) -> Result<Delta> {
    let mut last = VecModError::BudgetExhausted;
    for strat in ["cw", "pgd", "rand-cor", "rand"] {
        let r = match strat {
            "cw" => attack_cw_l0(x, spec, ctx, substitute, part, log),
            "pgd" => attack_pgd(x, spec, ctx, substitute, part, log),
            "rand-cor" => attack_rand_cor(x, spec, ctx, part, log),
            _ => attack_rand(x, spec, ctx, log),
        };
        match r {
            Ok(delta) => return Ok(delta),
            Err(e @ (VecModError::BudgetExhausted | VecModError::ModeUnsupported)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Two-step support reduction. Step one tries to undo whole columns,
/// biggest change first; step two walks each surviving column from the
/// original value toward the new one and keeps the first (closest to
/// original) value that still fools. The predicate must hold for the input
/// delta and keeps holding for the output.
pub fn postprocess(
    x: &FeatureVector,
    delta: &Delta,
    predicate: &mut dyn FnMut(&[u64]) -> bool,
    log: &mut AttemptLog,
) -> Delta {
    let mut counter = 0usize;
    let mut test = |changes: &BTreeMap<usize, i64>, log: &mut AttemptLog| {
        let ok = predicate(&apply_changes(x, changes));
        log.push("post", counter, ok);
        counter += 1;
        ok
    };

    let mut changes = delta.changes.clone();
    assert!(
        test(&changes, log),
        "postprocess requires a delta that already fools the predicate"
    );

    let mut order: Vec<usize> = changes.keys().copied().collect();
    order.sort_by(|&a, &b| changes[&b].abs().cmp(&changes[&a].abs()).then(a.cmp(&b)));
    for col in order {
        let saved = changes.remove(&col).unwrap();
        if !test(&changes, log) {
            changes.insert(col, saved);
        }
    }

    let cols: Vec<usize> = changes.keys().copied().collect();
    for col in cols {
        let full = changes[&col];
        let step = full.signum();
        let mut d = 0i64;
        loop {
            if d == full {
                // Nothing closer passed; the full change is already known
                // to work.
                changes.insert(col, full);
                break;
            }
            if d == 0 {
                changes.remove(&col);
            } else {
                changes.insert(col, d);
            }
            if test(&changes, log) {
                break;
            }
            d += step;
        }
    }

    Delta {
        changes,
        strategy: delta.strategy,
        iterations: delta.iterations,
    }
}
