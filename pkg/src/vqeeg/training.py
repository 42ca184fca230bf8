"""Pretraining objective, optimizer, training regimes, and evaluation.

The pretraining objective is

    mean squared reconstruction error
    + mean over patches of ||sg[h] - v_z||^2
    + beta * mean over patches of ||h - sg[v_z]||^2

with sg the stop-gradient operator (identity forward, zero backward). The
`paper_sign` flag flips the commitment term's sign to the literal printed
form of the source objective, which is unbounded below and kept only for
inspection. Reductions are means so learning rates are batch-size-robust.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import special

from .errors import (
    ConfigError,
    GradientError,
    TrainingDiverged,
    UndefinedMetricError,
    VqeegError,
)
from .features import FeatureTensor, stack_features
from .model import Checkpoint, ForwardState, ModelConfig, VQTransformer, head_forward
from .numerics import (
    Parameter,
    Rng,
    SgTape,
    Tensor,
    backward,
    check_finite_grad,
    log_softmax,
    mean,
    mul,
    neg,
    softplus,
    square,
    stop_gradient,
    sub,
    sum_,
)

REGIMES = ("pretrain", "supervised", "linear_probe", "finetune")


@dataclass
class PretrainLossParts:
    """The three objective terms and their weighted total."""

    recon: float
    codebook_term: float
    commitment_term: float
    beta: float
    total: float


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 500
    seed: int = 0
    regime: str = "pretrain"
    beta_commit: float = 0.25
    aux_weight: float = 0.1          # lambda on the pretrain term in finetune
    eval_interval: int = 50
    paper_sign: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.aux_weight < 0:
            raise ConfigError("aux weight must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch size and step count must be positive")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")


def _sg(x: Tensor, sg_tape) -> Tensor:
    if sg_tape is None:
        return stop_gradient(x)
    return Tensor(sg_tape.pass_through(x.data), validate=False)


def pretrain_objective(features: np.ndarray, model: VQTransformer,
                       beta: float = 0.25, paper_sign: bool = False,
                       sg_tape: SgTape | None = None
                       ) -> tuple[Tensor, PretrainLossParts, ForwardState]:
    """Loss graph, detached part values, and the forward state."""
    state = model.forward(features, sg_tape)
    target = Tensor(np.asarray(features, dtype=np.float64))
    diff = sub(state.reconstruction, target)
    recon = mean(square(diff))
    code_diff = sub(_sg(state.hidden, sg_tape), state.rows)
    codebook_term = mean(sum_(square(code_diff), axis=-1), axis=None)
    commit_diff = sub(state.hidden, _sg(state.rows, sg_tape))
    commitment_term = mean(sum_(square(commit_diff), axis=-1), axis=None)
    weighted = mul(commitment_term, beta)
    if paper_sign:
        total = recon + codebook_term + neg(weighted)
    else:
        total = recon + codebook_term + weighted
    parts = PretrainLossParts(recon.item(), codebook_term.item(),
                              commitment_term.item(), beta, total.item())
    return total, parts, state


def pretrain_loss(features, model: VQTransformer, beta: float = 0.25,
                  paper_sign: bool = False) -> PretrainLossParts:
    if isinstance(features, list):
        features = stack_features(features)
    elif isinstance(features, FeatureTensor):
        features = features.values.data[None]
    _, parts, _ = pretrain_objective(features, model, beta, paper_sign)
    return parts


def codebook_perplexity(indices: np.ndarray, codebook_size: int) -> float:
    """exp(entropy) of the empirical code-usage distribution."""
    counts = np.bincount(indices.reshape(-1), minlength=codebook_size)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            check_finite_grad(p)
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def reconstruction_mse(model: VQTransformer, features: np.ndarray) -> float:
    """Eval-mode mean squared reconstruction error over a feature batch."""
    was_training = model.training
    model.eval_mode()
    try:
        state = model.forward(features)
    finally:
        model.training = was_training
    return float(((state.reconstruction.data - features) ** 2).mean())


def _batches(n: int, batch_size: int, steps: int, rng: Rng):
    """Seeded shuffled batch index stream covering `steps` batches."""
    produced = 0
    while produced < steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced >= steps:
                return
            yield order[start:start + batch_size]
            produced += 1


def pretrain(features, model: VQTransformer, cfg: TrainConfig,
             val_features: np.ndarray | None = None
             ) -> tuple[Checkpoint, list[dict]]:
    """Optimize the pretraining objective; returns (checkpoint, loss curve).

    The curve holds one row per eval interval (plus the final step) with the
    batch loss parts and codebook perplexity. Divergence aborts with the
    last good checkpoint attached to the exception.
    """
    if isinstance(features, list):
        features = stack_features(features)
    if features.shape[0] == 0:
        raise ConfigError("pretraining needs a nonempty dataset")
    root = Rng(cfg.seed)
    shuffle_rng = root.child("train.shuffle")
    dropout_rng = root.child("train.dropout")
    optimizer = Adam.from_config(model.parameters(), cfg)
    curve: list[dict] = []
    last_good = model.to_checkpoint(step=0, seed=cfg.seed)

    step = 0
    for batch_idx in _batches(features.shape[0], cfg.batch_size,
                              cfg.max_steps, shuffle_rng):
        step += 1
        model.train_mode(dropout_rng)
        total, parts, state = pretrain_objective(
            features[batch_idx], model, cfg.beta_commit, cfg.paper_sign)
        if not np.isfinite(parts.total):
            raise TrainingDiverged(
                f"loss became non-finite at step {step}", last_good)
        optimizer.zero_grad()
        backward(total)
        optimizer.step()
        if step % cfg.eval_interval == 0 or step == cfg.max_steps or step == 1:
            row = {"step": step, "recon": parts.recon,
                   "codebook": parts.codebook_term,
                   "commitment": parts.commitment_term, "total": parts.total,
                   "perplexity": codebook_perplexity(
                       state.indices, model.config.codebook_size)}
            if val_features is not None:
                row["val_recon"] = reconstruction_mse(model, val_features)
            curve.append(row)
            last_good = model.to_checkpoint(step=step, seed=cfg.seed)
    model.eval_mode()
    return model.to_checkpoint(step=step, seed=cfg.seed), curve


def binary_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """BCE with logits; labels in {0, 1}; logits shape (B, 1)."""
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    pos = mul(y, softplus(neg(logits)))
    negt = mul(Tensor(1.0 - y.data), softplus(logits))
    return mean(pos + negt)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    picked = sum_(mul(log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1)
    return neg(mean(picked))


def task_loss(logits: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    if n_classes == 2:
        return binary_cross_entropy(logits, labels)
    return softmax_cross_entropy(logits, labels)


def classifier_scores(model: VQTransformer, features: np.ndarray) -> np.ndarray:
    """Eval-mode class scores: (B,) sigmoid for binary, (B, K) softmax else."""
    was_training = model.training
    model.eval_mode()
    try:
        logits, _ = model.logits(features)
    finally:
        model.training = was_training
    z = logits.data
    if model.config.n_classes == 2:
        return special.expit(z[:, 0])
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's mean rank."""
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative); ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes; got {n_pos} positives, {n_neg} negatives")
    ranks = _average_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision; descending-score ties broken by original index."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = 0
    acc = 0.0
    for rank0, idx in enumerate(order):
        if y[idx] == 1:
            hits += 1
            acc += hits / (rank0 + 1.0)
    return acc / n_pos


@dataclass
class EvalReport:
    """Detection metrics plus a threshold-0.5 confusion summary."""

    auroc: float
    auprc: float
    sample_count: int
    per_class: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"samples: {self.sample_count}",
                 f"AUROC: {self.auroc:.6f}",
                 f"AUPRC: {self.auprc:.6f}"]
        for cls, vals in sorted(self.per_class.items()):
            lines.append(f"class {cls}: AUROC {vals['auroc']:.6f} "
                         f"AUPRC {vals['auprc']:.6f}")
        if self.confusion:
            pairs = ", ".join(f"{k}={v}" for k, v in sorted(self.confusion.items()))
            lines.append(f"confusion@0.5: {pairs}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[dict]:
        rows = [{"class": "all", "auroc": self.auroc, "auprc": self.auprc,
                 "samples": self.sample_count}]
        for cls, vals in sorted(self.per_class.items()):
            rows.append({"class": cls, "auroc": vals["auroc"],
                         "auprc": vals["auprc"], "samples": self.sample_count})
        return rows


def binary_report(scores, labels) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pred = s >= 0.5
    confusion = {"tp": int((pred & (y == 1)).sum()),
                 "fp": int((pred & (y == 0)).sum()),
                 "fn": int((~pred & (y == 1)).sum()),
                 "tn": int((~pred & (y == 0)).sum())}
    return EvalReport(auroc(s, y), auprc(s, y), len(y),
                      per_class={1: {"auroc": auroc(s, y), "auprc": auprc(s, y)}},
                      confusion=confusion)


def macro_metrics(scores: np.ndarray, labels) -> EvalReport:
    """One-vs-rest AUROC/AUPRC per class, unweighted macro means.

    scores is (B, K); classes absent from labels are skipped with a warning
    recorded in the report.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape[1] < 2:
        raise ConfigError("macro metrics need per-class score columns")
    per_class = {}
    warnings = []
    for cls in range(s.shape[1]):
        mask = (y == cls).astype(int)
        if mask.sum() == 0 or mask.sum() == len(y):
            warnings.append(f"class {cls} absent from labels; skipped")
            continue
        per_class[cls] = {"auroc": auroc(s[:, cls], mask),
                          "auprc": auprc(s[:, cls], mask)}
    if not per_class:
        raise UndefinedMetricError("no class had both positives and negatives")
    macro_roc = float(np.mean([v["auroc"] for v in per_class.values()]))
    macro_prc = float(np.mean([v["auprc"] for v in per_class.values()]))
    pred = s.argmax(axis=1)
    confusion = {}
    for cls in range(s.shape[1]):
        confusion[f"pred{cls}"] = int((pred == cls).sum())
    return EvalReport(macro_roc, macro_prc, len(y), per_class=per_class,
                      confusion=confusion, warnings=warnings)


def evaluate_classifier(model: VQTransformer, features: np.ndarray,
                        labels) -> EvalReport:
    scores = classifier_scores(model, features)
    if model.config.n_classes == 2:
        return binary_report(scores, labels)
    return macro_metrics(scores, labels)


# ---------------------------------------------------------------------------
# Fine-tuning regimes
# ---------------------------------------------------------------------------

def _build_finetune_model(cfg: TrainConfig, n_classes: int,
                          base: Checkpoint | None,
                          model_config: ModelConfig | None) -> VQTransformer:
    root = Rng(cfg.seed).child("model")
    if cfg.regime == "supervised":
        if model_config is None:
            raise ConfigError("supervised regime needs a model config")
        from dataclasses import replace
        return VQTransformer(replace(model_config, n_classes=n_classes), root)
    if base is None:
        raise ConfigError(f"{cfg.regime} requires a pretrained checkpoint")
    model = base.build_model()
    model.add_head(n_classes, root)
    return model


def finetune(train_features, train_labels, eval_features, eval_labels,
             cfg: TrainConfig, base: Checkpoint | None = None,
             model_config: ModelConfig | None = None, n_classes: int = 2
             ) -> tuple[Checkpoint, EvalReport, list[dict]]:
    """Train a classifier under one of the supervised/LP/FT regimes.

    supervised: fresh random init, task loss only.
    linear_probe: load checkpoint, train only the head; every other
        parameter is asserted bitwise unchanged afterwards.
    finetune: load checkpoint, train everything (codebook included) with
        task loss + aux_weight * pretraining loss.
    """
    if cfg.regime not in ("supervised", "linear_probe", "finetune"):
        raise ConfigError(f"finetune cannot run regime {cfg.regime!r}")
    if isinstance(train_features, list):
        train_features = stack_features(train_features)
    if isinstance(eval_features, list):
        eval_features = stack_features(eval_features)
    train_labels = np.asarray(train_labels)
    eval_labels = np.asarray(eval_labels)
    if train_features.shape[0] != len(train_labels):
        raise ConfigError("feature/label counts disagree")
    if len(train_labels) == 0:
        raise ConfigError("fine-tuning needs labeled data")

    model = _build_finetune_model(cfg, n_classes, base, model_config)
    frozen_reference = None
    if cfg.regime == "linear_probe":
        frozen_reference = {p.name: p.data.copy()
                            for p in model.backbone_parameters()}
        trained = model.head_parameters()
    else:
        trained = model.parameters()

    root = Rng(cfg.seed)
    shuffle_rng = root.child("train.shuffle")
    dropout_rng = root.child("train.dropout")
    optimizer = Adam.from_config(trained, cfg)
    curve: list[dict] = []
    step = 0
    for batch_idx in _batches(train_features.shape[0], cfg.batch_size,
                              cfg.max_steps, shuffle_rng):
        step += 1
        if cfg.regime == "linear_probe":
            model.eval_mode()  # frozen backbone sees no dropout
        else:
            model.train_mode(dropout_rng)
        logits, state = model.logits(train_features[batch_idx])
        loss = task_loss(logits, train_labels[batch_idx], n_classes)
        parts = None
        if cfg.regime == "finetune" and cfg.aux_weight > 0:
            target = Tensor(train_features[batch_idx])
            recon = mean(square(sub(state.reconstruction, target)))
            code = mean(sum_(square(sub(_sg(state.hidden, None), state.rows)),
                             axis=-1), axis=None)
            commit = mean(sum_(square(sub(state.hidden, _sg(state.rows, None))),
                               axis=-1), axis=None)
            aux = recon + code + mul(commit, cfg.beta_commit)
            parts = PretrainLossParts(recon.item(), code.item(), commit.item(),
                                      cfg.beta_commit, aux.item())
            loss = loss + mul(aux, cfg.aux_weight)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"task loss became non-finite at step {step}",
                                   model.to_checkpoint(step=step, seed=cfg.seed))
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        if step % cfg.eval_interval == 0 or step == cfg.max_steps or step == 1:
            row = {"step": step, "task_loss": loss.item()}
            if parts is not None:
                row["aux_total"] = parts.total
            curve.append(row)

    if cfg.regime == "linear_probe":
        for name, value in frozen_reference.items():
            if not np.array_equal(model.parameter(name).data, value):
                raise VqeegError(
                    f"linear probe moved non-head parameter {name!r}")

    model.eval_mode()
    if eval_features.shape[0] == 0:
        raise ConfigError("fine-tuning needs a nonempty evaluation split")
    report = evaluate_classifier(model, eval_features, eval_labels)
    return model.to_checkpoint(step=step, seed=cfg.seed), report, curve
