"""Training loop, optimizer, and the four evaluation protocols.

AdamW with a cosine learning-rate schedule and validation-accuracy early
stopping trains the matching model (or the classifier ablation arm) on a
SplitPlan.  Protocol builders produce leave-one-subject-out folds per
session, cross-time session-pair plans, and seeded N-shot adaptation
splits; runners featurize once, normalize per fold from train∪adapt
statistics only, verify the frozen-bank and split-hygiene contracts on
every fold, and aggregate fold accuracies into mean ± sample std.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from eegmatch import autodiff as ad
from eegmatch.autodiff import Tensor
from eegmatch.errors import ConfigError, ValidationError
from eegmatch.featurize import (BandStats, FeaturizeConfig, Sample4D,
                                assemble_samples, compute_band_stats,
                                normalize_samples)
from eegmatch.matching import matching_loss, model_logits, predict, similarity_logits
from eegmatch.model import (EegClassifier, EegEncoder, ModelConfig,
                            batch_from_samples)
from eegmatch.recordings import RecordingSet
from eegmatch.text_bank import TextBank, content_hash, default_templates, resolve_bank

__all__ = [
    "RunConfig", "SplitPlan", "Metrics", "AdamW", "adamw_step", "cosine_lr",
    "train", "evaluate", "loso_folds", "cross_time_folds", "nshot_sample",
    "run_loso", "run_crosstime", "run_nshot", "run_ablation", "NSHOT_DEFAULT_GRID",
]

NSHOT_DEFAULT_GRID = (0, 1, 2, 4, 8, 16, 32)


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    lr0: float = 1e-4
    weight_decay: float = 0.003
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_min: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0
    n_shot: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    featurize: FeaturizeConfig = field(default_factory=FeaturizeConfig)

    def validate(self) -> "RunConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [1, max_epochs]")
        if self.lr0 <= 0 or self.lr_min < 0 or self.lr_min > self.lr0:
            raise ConfigError("learning rates must satisfy 0 <= lr_min <= lr0, lr0 > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.n_shot < 0:
            raise ConfigError("n_shot must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid adam moments configuration")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        self.model.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["featurize"] = self.featurize.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "model" in kwargs:
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "featurize" in kwargs:
            kwargs["featurize"] = FeaturizeConfig.from_dict(kwargs["featurize"])
        return cls(**kwargs).validate()


def check_model_featurize_compat(model_cfg: ModelConfig,
                                 feat_cfg: FeaturizeConfig) -> None:
    if (model_cfg.in_h, model_cfg.in_w) != (feat_cfg.out_h, feat_cfg.out_w):
        raise ConfigError(
            f"model input {model_cfg.in_h}x{model_cfg.in_w} != featurize output "
            f"{feat_cfg.out_h}x{feat_cfg.out_w}")
    if model_cfg.n_bands != len(feat_cfg.band_set.bands):
        raise ConfigError(
            f"model expects {model_cfg.n_bands} bands; featurize produces "
            f"{len(feat_cfg.band_set.bands)}")
    if model_cfg.n_frames != feat_cfg.frames_per_sample:
        raise ConfigError(
            f"model expects {model_cfg.n_frames} frames; featurize produces "
            f"{feat_cfg.frames_per_sample}")


# -- splits and metrics ------------------------------------------------------------

def sample_key(s: Sample4D) -> Tuple[int, int, int, int]:
    return (s.subject_id, s.session_id, s.trial_id, s.block)


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint train / adapt / test sample sets plus a fold descriptor."""

    train: Tuple[Sample4D, ...]
    adapt: Tuple[Sample4D, ...]
    test: Tuple[Sample4D, ...]
    descriptor: str

    def validate(self, loso: bool = False, disjoint_sessions: bool = False) -> "SplitPlan":
        train_keys = {sample_key(s) for s in self.train}
        adapt_keys = {sample_key(s) for s in self.adapt}
        test_keys = {sample_key(s) for s in self.test}
        if train_keys & test_keys or adapt_keys & test_keys or train_keys & adapt_keys:
            raise ValidationError(f"overlapping split sets in fold {self.descriptor!r}")
        if loso:
            train_subjects = {s.subject_id for s in self.train}
            test_subjects = {s.subject_id for s in self.test}
            if train_subjects & test_subjects:
                raise ValidationError(
                    f"subject leakage in LOSO fold {self.descriptor!r}: "
                    f"{sorted(train_subjects & test_subjects)}")
        if disjoint_sessions:
            train_sessions = {s.session_id for s in self.train}
            test_sessions = {s.session_id for s in self.test}
            if train_sessions & test_sessions:
                raise ValidationError(
                    f"session leakage in cross-time fold {self.descriptor!r}")
        return self


@dataclass(frozen=True)
class Metrics:
    """Accuracy aggregate: overall acc plus per-fold mean ± sample std."""

    acc: float
    per_fold: Tuple[float, ...]
    mean: float
    std: float

    @classmethod
    def single(cls, acc: float) -> "Metrics":
        return cls(acc=acc, per_fold=(acc,), mean=acc, std=0.0)

    @classmethod
    def from_folds(cls, accs: Sequence[float]) -> "Metrics":
        accs = tuple(float(a) for a in accs)
        if not accs:
            raise ValidationError("metrics need at least one fold")
        mean = float(np.mean(accs))
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        return cls(acc=mean, per_fold=accs, mean=mean, std=std)

    def to_dict(self) -> dict:
        return {"acc": self.acc, "per_fold": list(self.per_fold),
                "mean": self.mean, "std": self.std}


# -- optimizer and schedule ----------------------------------------------------------

def adamw_step(params: List[np.ndarray], grads: List[np.ndarray], state: dict,
               t: int, lr_t: float, *, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> List[np.ndarray]:
    """One decoupled-weight-decay Adam step; mutates and returns params.

    param ← param − lr_t·( m̂/(√v̂+ε) + weight_decay·param )
    """
    if t < 1:
        raise ValidationError(f"adamw step count must be >= 1, got {t}")
    if len(params) != len(grads):
        raise ValidationError("params/grads length mismatch")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValidationError(
                f"gradient shape {g.shape} != parameter shape {p.shape}")
        state["m"][i] = beta1 * state["m"][i] + (1.0 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1.0 - beta2) * (g * g)
        m_hat = state["m"][i] / (1.0 - beta1 ** t)
        v_hat = state["v"][i] / (1.0 - beta2 ** t)
        p -= lr_t * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return params


class AdamW:
    """Stateful wrapper binding adamw_step to a named parameter set."""

    def __init__(self, params: Dict[str, Tensor], *, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict = {}
        self.t = 0

    def step(self, lr_t: float) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state, self.t,
                   lr_t, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                   weight_decay=self.weight_decay)


def cosine_lr(t: int, cfg: RunConfig) -> float:
    """lr_t = lr_min + ½(lr0 − lr_min)(1 + cos(π t / max_epochs))."""
    if not 0 <= t <= cfg.max_epochs:
        raise ValidationError(f"epoch {t} outside [0, {cfg.max_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (
        1.0 + math.cos(math.pi * t / cfg.max_epochs))


# -- training loop ---------------------------------------------------------------------

def _split_validation(pool: List[Sample4D], seed: int,
                      fraction: float) -> Tuple[List[Sample4D], List[Sample4D]]:
    if len(pool) < 2:
        raise ValidationError(
            "training pool too small to hold out a validation subset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    order = rng.permutation(len(pool))
    n_val = int(round(fraction * len(pool)))
    n_val = max(1, min(n_val, len(pool) - 1))
    val_idx = set(order[:n_val].tolist())
    train = [pool[i] for i in range(len(pool)) if i not in val_idx]
    val = [pool[i] for i in sorted(val_idx)]
    return train, val


def _forward_logits(model, de: np.ndarray, psd: np.ndarray, bank: Optional[TextBank],
                    train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    de_t, psd_t = Tensor(de), Tensor(psd)
    if isinstance(model, EegClassifier):
        return model.forward(de_t, psd_t, train=train_mode, rng=rng)
    emb = model.forward(de_t, psd_t, train=train_mode, rng=rng)
    return model_logits(emb, bank, model.log_tau)


def train(plan: SplitPlan, cfg: RunConfig, bank: Optional[TextBank],
          label_set: Sequence[str], *, arm: str = "matching"):
    """Train on plan.train ∪ plan.adapt; return (best-val model, history)."""
    cfg.validate()
    if arm not in ("matching", "classifier"):
        raise ConfigError(f"unknown training arm {arm!r}")
    if arm == "matching" and bank is None:
        raise ConfigError("matching arm requires a text bank")
    label_set = tuple(label_set)
    pool = list(plan.train) + list(plan.adapt)
    if not pool:
        raise ValidationError(f"empty train set in fold {plan.descriptor!r}")
    if arm == "matching" and cfg.model.proj_dim != bank.dim:
        raise ConfigError(
            f"proj_dim {cfg.model.proj_dim} != bank dim {bank.dim}")

    if arm == "matching":
        model = EegEncoder.build(cfg.model, cfg.seed)
    else:
        model = EegClassifier.build(cfg.model, len(label_set), cfg.seed)
    train_samples, val_samples = _split_validation(pool, cfg.seed, cfg.val_fraction)
    params = model.named_parameters()
    optimizer = AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)

    best_state = model.state_arrays()
    best_acc = -1.0
    best_epoch = 0
    stale = 0
    history: List[dict] = []
    for epoch in range(1, cfg.max_epochs + 1):
        lr_t = cosine_lr(epoch - 1, cfg)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 4, epoch])).permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            de, psd, labels = batch_from_samples(batch)
            targets = [label_set.index(lab) for lab in labels]
            drop_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 5, epoch, start]))
            logits = _forward_logits(model, de, psd, bank, True, drop_rng)
            loss = matching_loss(logits, targets)
            ad.zero_grad(params.values())
            loss.backward()
            optimizer.step(lr_t)
            losses.append(loss.item())
        val_metrics = evaluate(model, bank, val_samples, label_set)
        history.append({"epoch": epoch, "lr": lr_t,
                        "train_loss": float(np.mean(losses)),
                        "val_acc": val_metrics.acc})
        if val_metrics.acc > best_acc:
            best_acc = val_metrics.acc
            best_state = model.state_arrays()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    return model, {"epochs": history, "best_epoch": best_epoch,
                   "best_val_acc": best_acc,
                   "stopped_epoch": history[-1]["epoch"] if history else 0}


def evaluate(model, bank: Optional[TextBank], samples: Sequence[Sample4D],
             label_set: Sequence[str], chunk: int = 64) -> Metrics:
    """Accuracy of matching (or classifier) predictions over samples."""
    if not samples:
        raise ValidationError("evaluate on an empty sample set")
    label_list = list(label_set)
    correct = 0
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        de, psd, labels = batch_from_samples(batch)
        if isinstance(model, EegClassifier):
            logits = model.forward(Tensor(de), Tensor(psd)).data
            preds = predict(logits, label_list)
        else:
            emb = model.forward(Tensor(de), Tensor(psd))
            logits = similarity_logits(emb.data, bank, model.tau())
            preds = predict(logits, list(bank.labels))
        correct += sum(p == lab for p, lab in zip(preds, labels))
    return Metrics.single(correct / len(samples))


# -- protocol builders ---------------------------------------------------------------

def _group(samples: Sequence[Sample4D]):
    by_session: Dict[int, Dict[int, List[Sample4D]]] = {}
    for s in samples:
        by_session.setdefault(s.session_id, {}).setdefault(s.subject_id, []).append(s)
    return by_session


def loso_folds(samples: Sequence[Sample4D],
               n_subjects: Optional[int] = None) -> List[SplitPlan]:
    """Per session, one fold per subject: that subject tests, the rest train."""
    by_session = _group(samples)
    subjects = sorted({s.subject_id for s in samples})
    if n_subjects is not None and len(subjects) != n_subjects:
        raise ValidationError(
            f"expected {n_subjects} subjects, found {len(subjects)}")
    plans: List[SplitPlan] = []
    for session in sorted(by_session):
        cell = by_session[session]
        for subject in subjects:
            if not cell.get(subject):
                raise ValidationError(
                    f"subject {subject} has zero samples in session {session}")
        for subject in subjects:
            test = tuple(sorted(cell[subject], key=sample_key))
            train = tuple(s for other in subjects if other != subject
                          for s in sorted(cell[other], key=sample_key))
            plan = SplitPlan(train=train, adapt=(), test=test,
                             descriptor=f"loso/session{session}/subject{subject}")
            plans.append(plan.validate(loso=True))
    return plans


CROSS_TIME_PAIRS = ((1, 2), (1, 3), (2, 3))


def cross_time_folds(samples: Sequence[Sample4D]) -> List[SplitPlan]:
    """Per subject: train/test session pairs (1→2), (1→3), (2→3)."""
    by_subject: Dict[int, Dict[int, List[Sample4D]]] = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, {}).setdefault(s.session_id, []).append(s)
    needed = {sess for pair in CROSS_TIME_PAIRS for sess in pair}
    plans: List[SplitPlan] = []
    for subject in sorted(by_subject):
        sessions = by_subject[subject]
        missing = sorted(needed - set(sessions))
        if missing:
            raise ValidationError(
                f"subject {subject} is missing sessions {missing} "
                "required for cross-time evaluation")
        for k, (train_sess, test_sess) in enumerate(CROSS_TIME_PAIRS, start=1):
            plan = SplitPlan(
                train=tuple(sorted(sessions[train_sess], key=sample_key)),
                adapt=(),
                test=tuple(sorted(sessions[test_sess], key=sample_key)),
                descriptor=(f"crosstime/subject{subject}/ex{k}"
                            f"/train{train_sess}-test{test_sess}"),
            )
            plans.append(plan.validate(disjoint_sessions=True))
    return plans


def nshot_sample(test_samples: Sequence[Sample4D], n: int,
                 seed: int) -> Tuple[Tuple[Sample4D, ...], Tuple[Sample4D, ...]]:
    """Draw exactly n samples per class (seeded, without replacement)."""
    if n < 0:
        raise ValidationError("n_shot must be >= 0")
    ordered = sorted(test_samples, key=sample_key)
    if n == 0:
        return (), tuple(ordered)
    by_label: Dict[str, List[int]] = {}
    for i, s in enumerate(ordered):
        by_label.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    chosen: set = set()
    for label in sorted(by_label):
        pool = by_label[label]
        if len(pool) < n:
            raise ValidationError(
                f"class {label!r} has only {len(pool)} samples in the test "
                f"domain; cannot draw {n} shots")
        picks = rng.choice(len(pool), size=n, replace=False)
        chosen.update(pool[i] for i in picks)
    adapt = tuple(ordered[i] for i in sorted(chosen))
    remaining = tuple(ordered[i] for i in range(len(ordered)) if i not in chosen)
    return adapt, remaining


# -- protocol runners ---------------------------------------------------------------

def _identity_stats(n_bands: int) -> BandStats:
    zero = np.zeros(n_bands)
    one = np.ones(n_bands)
    return BandStats(de_mean=zero, de_std=one, psd_mean=zero, psd_std=one)


def _normalized_plan(plan: SplitPlan, n_bands: int) -> SplitPlan:
    """Apply per-band z-normalization fitted on train ∪ adapt only."""
    fit_pool = list(plan.train) + list(plan.adapt)
    stats = compute_band_stats(fit_pool) if fit_pool else _identity_stats(n_bands)
    return SplitPlan(
        train=tuple(normalize_samples(list(plan.train), stats)),
        adapt=tuple(normalize_samples(list(plan.adapt), stats)),
        test=tuple(normalize_samples(list(plan.test), stats)),
        descriptor=plan.descriptor,
    )


def _fold_seed(base_seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, 7, fold_index]).generate_state(1)[0])


def _run_fold(payload: dict) -> dict:
    """Worker for one fold; pure function of its payload (process-safe)."""
    plan: SplitPlan = payload["plan"]
    cfg: RunConfig = payload["cfg"]
    label_set = tuple(payload["label_set"])
    arm = payload.get("arm", "matching")
    bank = resolve_bank(payload["bank_spec"], label_set, default_templates(),
                        payload["bank_dim"], payload["bank_seed"])
    plan = _normalized_plan(plan, len(cfg.featurize.band_set.bands))
    hash_before = content_hash(bank)
    if plan.train or plan.adapt:
        model, history = train(plan, cfg, bank if arm == "matching" else None,
                               label_set, arm=arm)
    else:
        # zero-shot: pure matching with an untrained encoder
        model = EegEncoder.build(cfg.model, cfg.seed)
        history = {"epochs": [], "best_epoch": 0, "best_val_acc": float("nan"),
                   "stopped_epoch": 0}
    metrics = evaluate(model, bank if arm == "matching" else None,
                       plan.test, label_set)
    hash_after = content_hash(bank)
    if hash_before != hash_after:
        raise ValidationError(
            f"frozen-bank violation in fold {plan.descriptor!r}")
    return {
        "descriptor": plan.descriptor,
        "accuracy": metrics.acc,
        "n_train": len(plan.train),
        "n_adapt": len(plan.adapt),
        "n_test": len(plan.test),
        "best_epoch": history["best_epoch"],
        "epochs_run": history["stopped_epoch"],
        "best_val_acc": history["best_val_acc"],
        "bank_hash": hash_before,
        "arm": arm,
    }


def _run_folds(payloads: List[dict], jobs: int) -> List[dict]:
    if jobs <= 1 or len(payloads) <= 1:
        return [_run_fold(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_fold, payloads))


def _prepare_samples(rec: RecordingSet, cfg: RunConfig) -> List[Sample4D]:
    cfg.validate()
    check_model_featurize_compat(cfg.model, cfg.featurize)
    rec.validate(band_ceiling_hz=cfg.featurize.band_set.ceiling_hz,
                 expected_channels=len(cfg.featurize.layout.placements))
    return assemble_samples(rec, cfg.featurize)


def _base_payload(cfg: RunConfig, label_set, bank_spec, bank_seed) -> dict:
    return {
        "cfg": cfg,
        "label_set": tuple(label_set),
        "bank_spec": bank_spec,
        "bank_dim": cfg.model.proj_dim,
        "bank_seed": bank_seed,
    }


def run_loso(rec: RecordingSet, cfg: RunConfig, bank_spec: str = "stub",
             *, jobs: int = 1, bank_seed: int = 0,
             n_shot: Optional[int] = None) -> dict:
    """LOSO per session; optional N-shot adaptation from the held-out subject."""
    samples = _prepare_samples(rec, cfg)
    plans = loso_folds(samples)
    shots = cfg.n_shot if n_shot is None else n_shot
    payloads = []
    for i, plan in enumerate(plans):
        if shots:
            adapt, remaining = nshot_sample(plan.test, shots, _fold_seed(cfg.seed, i))
            plan = SplitPlan(train=plan.train, adapt=adapt, test=remaining,
                             descriptor=plan.descriptor).validate()
        fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, i))
        payloads.append({**_base_payload(fold_cfg, rec.label_set, bank_spec, bank_seed),
                         "plan": plan})
    rows = _run_folds(payloads, jobs)
    for i, row in enumerate(rows):
        row["fold"] = i
    metrics = Metrics.from_folds([r["accuracy"] for r in rows])
    return {
        "protocol": "loso",
        "rows": rows,
        "metrics": metrics.to_dict(),
        "n_shot": shots,
    }


def run_crosstime(rec: RecordingSet, cfg: RunConfig, bank_spec: str = "stub",
                  *, jobs: int = 1, bank_seed: int = 0) -> dict:
    """Cross-time session pairs per subject; aggregates per experiment."""
    samples = _prepare_samples(rec, cfg)
    plans = cross_time_folds(samples)
    payloads = []
    for i, plan in enumerate(plans):
        fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, i))
        payloads.append({**_base_payload(fold_cfg, rec.label_set, bank_spec, bank_seed),
                         "plan": plan})
    rows = _run_folds(payloads, jobs)
    per_experiment: Dict[str, List[float]] = {}
    for i, row in enumerate(rows):
        row["fold"] = i
        experiment = row["descriptor"].split("/")[2]  # "ex1" | "ex2" | "ex3"
        row["experiment"] = experiment
        per_experiment.setdefault(experiment, []).append(row["accuracy"])
    metrics = Metrics.from_folds([r["accuracy"] for r in rows])
    return {
        "protocol": "crosstime",
        "rows": rows,
        "metrics": metrics.to_dict(),
        "per_experiment": {
            name: Metrics.from_folds(accs).to_dict()
            for name, accs in sorted(per_experiment.items())
        },
    }


def run_nshot(rec: RecordingSet, cfg: RunConfig, bank_spec: str = "stub",
              *, shots: Sequence[int] = NSHOT_DEFAULT_GRID, jobs: int = 1,
              bank_seed: int = 0) -> dict:
    """N-shot curve: per (session, subject) target domain, train on N shots
    per class drawn from that domain and evaluate on the remainder.

    N=0 evaluates an untrained encoder (pure matching, no adaptation).
    """
    samples = _prepare_samples(rec, cfg)
    base_plans = loso_folds(samples)
    payloads = []
    meta = []
    for n in shots:
        if n < 0:
            raise ValidationError("shot counts must be >= 0")
        for i, base in enumerate(base_plans):
            adapt, remaining = nshot_sample(base.test, n, _fold_seed(cfg.seed, i))
            plan = SplitPlan(
                train=(), adapt=adapt, test=remaining,
                descriptor=f"nshot{n}/{base.descriptor.split('/', 1)[1]}",
            ).validate()
            fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, i), n_shot=n)
            payloads.append({**_base_payload(fold_cfg, rec.label_set, bank_spec,
                                             bank_seed), "plan": plan})
            meta.append({"n_shot": n, "fold": i})
    rows = _run_folds(payloads, jobs)
    for row, m in zip(rows, meta):
        row.update(m)
    curve = {}
    for n in shots:
        accs = [r["accuracy"] for r in rows if r["n_shot"] == n]
        curve[str(n)] = Metrics.from_folds(accs).to_dict()
    return {
        "protocol": "nshot",
        "rows": rows,
        "shots": list(shots),
        "curve": curve,
    }


def run_ablation(rec: RecordingSet, cfg: RunConfig, bank_spec: str = "stub",
                 *, jobs: int = 1, bank_seed: int = 0) -> dict:
    """Paired arms on identical LOSO folds: classifier head vs full matching."""
    samples = _prepare_samples(rec, cfg)
    plans = loso_folds(samples)
    payloads = []
    for arm in ("classifier", "matching"):
        for i, plan in enumerate(plans):
            fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, i))
            payloads.append({**_base_payload(fold_cfg, rec.label_set, bank_spec,
                                             bank_seed), "plan": plan, "arm": arm})
    results = _run_folds(payloads, jobs)
    n = len(plans)
    classifier_rows, matching_rows = results[:n], results[n:]
    rows = []
    for i, (a, b) in enumerate(zip(classifier_rows, matching_rows)):
        if a["descriptor"] != b["descriptor"]:
            raise ValidationError("ablation arms diverged on fold definitions")
        rows.append({
            "fold": i,
            "descriptor": a["descriptor"],
            "n_train": a["n_train"],
            "n_test": a["n_test"],
            "acc_classifier": a["accuracy"],
            "acc_matching": b["accuracy"],
            "delta": b["accuracy"] - a["accuracy"],
            "bank_hash": b["bank_hash"],
        })
    cls_metrics = Metrics.from_folds([r["acc_classifier"] for r in rows])
    match_metrics = Metrics.from_folds([r["acc_matching"] for r in rows])
    return {
        "protocol": "ablation",
        "rows": rows,
        "arms": {
            "classifier": cls_metrics.to_dict(),
            "matching": match_metrics.to_dict(),
        },
        "delta_mean": match_metrics.mean - cls_metrics.mean,
    }


def run_train(rec: RecordingSet, cfg: RunConfig, bank_spec: str = "stub",
              *, bank_seed: int = 0) -> dict:
    """Train a single matching model on the whole recording set.

    Normalization statistics come from the full training population and are
    returned for reuse at inference time.
    """
    samples = _prepare_samples(rec, cfg)
    stats = compute_band_stats(samples)
    plan = SplitPlan(train=tuple(normalize_samples(samples, stats)),
                     adapt=(), test=(), descriptor="train/full").validate()
    bank = resolve_bank(bank_spec, rec.label_set, default_templates(),
                        cfg.model.proj_dim, bank_seed)
    hash_before = content_hash(bank)
    model, history = train(plan, cfg, bank, rec.label_set)
    if content_hash(bank) != hash_before:
        raise ValidationError("frozen-bank violation during full training run")
    return {
        "protocol": "train",
        "model": model,
        "history": history,
        "bank": bank,
        "bank_hash": hash_before,
        "stats": stats,
        "n_train": len(plan.train),
    }
