"""SR-FCN pretraining, joint fine-tuning, max-mix training and the comparison variants."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import LabeledSequence, Pairs, concat_pairs, make_pairs, split_sequences
from .imageops import FACTORS, check_factor, normalize
from .metrics import concat_eval
from .nn import SGD, SGDConfig, mse_loss

log = logging.getLogger(__name__)

FULL_PRETRAIN_ITERS = 30000
PLATEAU_MIN_DELTA = 1e-4


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = FULL_PRETRAIN_ITERS
    lr: float = 0.01
    s_pretrain: int = 16
    batch_size: int = 128
    patch: int | None = None  # random square crops; None trains on whole frames

    def scaled(self, factor: float) -> "PretrainConfig":
        return replace(self, iterations=max(1, int(round(self.iterations * factor))))


@dataclass(frozen=True)
class FinetuneConfig:
    lr_new: float = 0.01
    lr_pretrained: float = 0.001
    plateau_patience: int = 3
    lr_drop_factor: float = 10.0
    max_drops: int = 2
    s_mix: tuple = (3, 4, 6)
    batch_size: int = 128
    max_epochs: int = 60

    def __post_init__(self):
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be positive")
        for s in self.s_mix:
            check_factor(s)

    def scaled(self, factor: float) -> "FinetuneConfig":
        return replace(self, max_epochs=max(1, int(round(self.max_epochs * factor))))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs: the full-size widths by default, narrower for desk runs."""

    widths: tuple = models.FULL_WIDTHS
    hidden: int = models.FULL_HIDDEN
    sr_residual: bool = True
    init_std: float | None = None  # None: fan-in scaled
    dtype: str = "float64"


@dataclass(frozen=True)
class TrainVariant:
    tag: str  # HR | LR | NonJoint | Joint | Joint-OA
    s: int | None = None

    @classmethod
    def parse(cls, text: str) -> "TrainVariant":
        text = text.strip()
        if text == "HR":
            return cls("HR")
        if text in ("Joint-OA", "JointOA", "OA"):
            return cls("Joint-OA")
        m = re.fullmatch(r"(LR|NonJoint|Non-Joint|Joint)-(\d+)", text)
        if not m:
            raise ValueError(f"unknown variant tag {text!r}")
        tag = "NonJoint" if m.group(1) == "Non-Joint" else m.group(1)
        return cls(tag, check_factor(int(m.group(2))))

    @property
    def name(self) -> str:
        return self.tag if self.s is None else f"{self.tag}-{self.s}"


@dataclass
class History:
    """Per-epoch fine-tuning log plus bookkeeping for audits."""

    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, val_rmse, val_cc, val_ccc, lr_fresh, lr_pretrained
    drops: list = field(default_factory=list)  # epochs at which learning rates were divided
    best_epoch: int = -1
    steps: int = 0

    def csv_lines(self) -> list[str]:
        cols = ["epoch", "train_loss", "val_rmse", "val_cc", "val_ccc", "lr_fresh", "lr_pretrained"]
        out = [",".join(cols)]
        for r in self.rows:
            out.append(",".join(str(r[c]) if isinstance(r[c], int) else f"{r[c]:.10g}" for c in cols))
        return out


class Recognizer:
    """Frames in, valence out; optionally an SR front-end whose output is renormalised."""

    def __init__(self, cnn: models.EmoCNN, sr: models.SRFCN | None = None, batch: int = 64):
        self.cnn = cnn
        self.sr = sr
        self.batch = batch

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        x = inputs
        if self.sr is not None:
            x = sr_reconstruct(self.sr, x, self.batch)
        return models.predict(self.cnn, x, self.batch)


def sr_reconstruct(sr: models.SRFCN, inputs: np.ndarray, batch: int = 32) -> np.ndarray:
    return normalize(models.predict(sr, inputs, batch))


# ---------------------------------------------------------------------------
# SR-FCN pretraining


def pretrain_srfcn(pairs: Pairs, cfg: PretrainConfig, seed: int, mcfg: ModelConfig = ModelConfig(),
                   model: models.SRFCN | None = None):
    """Fit SR-FCN to map upscaled LR inputs to HR frames under MSE.

    Returns the model and the per-iteration training-loss curve.
    """
    if len(pairs.inputs) == 0:
        raise ValueError("empty SR pretraining set")
    dtype = np.dtype(mcfg.dtype)
    if model is None:
        model = models.build_srfcn(seed, mcfg.widths, mcfg.sr_residual, dtype, mcfg.init_std)
    rng = np.random.default_rng([seed, 1])
    opt = SGD(model.params(), SGDConfig(base_lr=cfg.lr, batch_size=cfg.batch_size))
    x_all = pairs.inputs.astype(dtype)
    y_all = pairs.targets.astype(dtype)
    n, h, w = x_all.shape
    bs = min(cfg.batch_size, n)
    curve = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        idx = rng.choice(n, bs, replace=False)
        if cfg.patch:
            p = cfg.patch
            r0 = rng.integers(0, h - p + 1, bs)
            c0 = rng.integers(0, w - p + 1, bs)
            rows = r0[:, None] + np.arange(p)
            cols = c0[:, None] + np.arange(p)
            sel = (idx[:, None, None], rows[:, :, None], cols[:, None, :])
            xb, yb = x_all[sel], y_all[sel]
        else:
            xb, yb = x_all[idx], y_all[idx]
        out = model.forward(xb[:, None])
        loss, dy = mse_loss(out, yb[:, None])
        model.backward(dy)
        opt.step(model.grads(), cfg.lr)
        curve[it] = loss
    return model, curve


# ---------------------------------------------------------------------------
# recognition training


def _val_score(model, val_views: list[Pairs], val_seqs: list[int]):
    """Mean over views of the concatenated-sequence metrics."""
    reps = []
    rec = Recognizer(model)
    for view in val_views:
        pred = rec.predict(view.inputs)
        pairs = []
        start = 0
        for n in val_seqs:
            pairs.append((pred[start:start + n], view.targets[start:start + n]))
            start += n
        reps.append(concat_eval(pairs, degenerate_ok=True))
    return (float(np.mean([r.rmse for r in reps])), float(np.mean([r.cc for r in reps])),
            float(np.mean([r.ccc for r in reps])))


def finetune_joint(model: models.EmoCNN, train_views: list[Pairs], val_views: list[Pairs], val_seqs: list[int],
                   cfg: FinetuneConfig, seed: int, view_log: list | None = None):
    """Train a recognition CNN with per-layer learning rates and a plateau schedule.

    ``train_views`` holds one Pairs per downsampling factor over the same
    frames; every minibatch slot draws its factor uniformly (a single view
    means no mixing). Layers with ``learn_rate_scale`` 0.1 (transplanted) run
    at ``lr_pretrained`` while the rest run at ``lr_new``. After each epoch
    the validation CCC is checked; ``plateau_patience`` epochs without an
    improvement of more than 1e-4 divide every rate by ``lr_drop_factor``,
    and training stops at the ``max_drops``-th drop. The best-validation
    parameters are restored at the end.
    """
    if not train_views or len(train_views[0].inputs) == 0:
        raise ValueError("empty training set")
    if not val_views or len(val_views[0].inputs) == 0:
        raise ValueError("empty validation set")
    n = len(train_views[0].inputs)
    if any(len(v.inputs) != n for v in train_views):
        raise ValueError("training views must cover the same frames")
    dtype = model.params()[0].weights.dtype
    stack = np.stack([v.inputs for v in train_views]).astype(dtype)
    targets = train_views[0].targets.astype(dtype)
    rng = np.random.default_rng([seed, 2])
    sgd_cfg = SGDConfig(base_lr=cfg.lr_new, batch_size=cfg.batch_size)
    opt = SGD(model.params(), sgd_cfg)
    scale_of_pretrained = cfg.lr_pretrained / cfg.lr_new
    for p in model.params():
        if p.learn_rate_scale != 1.0 and not np.isclose(p.learn_rate_scale, scale_of_pretrained):
            raise ValueError("transplanted layer scale disagrees with lr_pretrained / lr_new")

    phase_lr = cfg.lr_new
    hist = History()
    best, best_params, wait = -np.inf, None, 0
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            view = rng.integers(0, len(train_views), bs)
            if view_log is not None:
                view_log.extend(int(v) for v in view)
            xb = stack[view, idx][:, None]
            out = model.forward(xb, train=True, rng=rng)
            loss, dy = mse_loss(out[:, 0], targets[idx])
            model.backward(dy[:, None])
            opt.step(model.grads(), phase_lr)
            losses.append(loss)
        v_rmse, v_cc, v_ccc = _val_score(model, val_views, val_seqs)
        hist.rows.append(dict(epoch=epoch, train_loss=float(np.mean(losses)), val_rmse=v_rmse, val_cc=v_cc,
                              val_ccc=v_ccc, lr_fresh=phase_lr, lr_pretrained=phase_lr * scale_of_pretrained))
        log.debug("epoch %d loss %.5f val ccc %.4f lr %.2g", epoch, hist.rows[-1]["train_loss"], v_ccc, phase_lr)
        if v_ccc > best + PLATEAU_MIN_DELTA:
            best, wait, hist.best_epoch = v_ccc, 0, epoch
            best_params = [(p.weights.copy(), p.biases.copy()) for p in model.params()]
        else:
            wait += 1
            if wait >= cfg.plateau_patience:
                hist.drops.append(epoch)
                wait = 0
                if len(hist.drops) >= cfg.max_drops:
                    break
                phase_lr /= cfg.lr_drop_factor
    hist.steps = opt.steps
    if best_params is not None:
        for p, (w, b) in zip(model.params(), best_params):
            p.weights[...] = w
            p.biases[...] = b
    return model, hist


def train_regressor(model, pairs: Pairs, iterations: int, lr: float, seed: int, batch_size: int = 10,
                    stop_below: float | None = None, check_every: int = 50):
    """Plain fixed-rate SGD on one set of pairs, no validation; returns the loss curve.

    With ``stop_below`` set, the eval-mode (dropout off) MSE over all pairs is
    checked every ``check_every`` iterations and training ends once it drops
    below the threshold; the curve is truncated accordingly.
    """
    dtype = model.params()[0].weights.dtype
    x = pairs.inputs.astype(dtype)
    y = pairs.targets.astype(dtype)
    rng = np.random.default_rng([seed, 3])
    opt = SGD(model.params(), SGDConfig(base_lr=lr, batch_size=batch_size))
    curve = np.empty(iterations)
    bs = min(batch_size, len(x))
    for it in range(iterations):
        idx = rng.choice(len(x), bs, replace=False)
        out = model.forward(x[idx][:, None], train=True, rng=rng)
        loss, dy = mse_loss(out[:, 0], y[idx])
        model.backward(dy[:, None])
        opt.step(model.grads(), lr)
        curve[it] = loss
        if stop_below is not None and (it + 1) % check_every == 0:
            if float(np.mean((models.predict(model, x) - y) ** 2)) < stop_below:
                return curve[:it + 1]
    return curve


# ---------------------------------------------------------------------------
# variants


@dataclass
class TrainResult:
    variant: TrainVariant
    recognizer: Recognizer
    history: History
    sr: models.SRFCN | None = None
    sr_curve: np.ndarray | None = None
    pipeline_log: list = field(default_factory=list)  # (phase, s, qp) per consumed sample kind
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Budget:
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    model: ModelConfig = ModelConfig()
    val_fraction: float = 0.1


def _pairs(seqs: list[LabeledSequence], s, target) -> Pairs:
    return concat_pairs([make_pairs(q, s, target=target) for q in seqs])


def _sr_pretrain(train: list[LabeledSequence], s: int, budget: Budget, seed: int, audit: list):
    pairs = _pairs(train, s, "hr")
    audit.extend(("pretrain",) + tuple(e[2:4]) for e in pairs.log)
    cfg = replace(budget.pretrain, s_pretrain=s)
    return pretrain_srfcn(pairs, cfg, seed, budget.model)


def _new_cnn(seed: int, budget: Budget) -> models.EmoCNN:
    m = budget.model
    return models.build_emocnn(seed, m.widths, m.hidden, dtype=np.dtype(m.dtype), init_std=m.init_std)


def train_variant(variant: TrainVariant | str, corpus: list[LabeledSequence], budget: Budget = Budget(),
                  seed: int = 0) -> TrainResult:
    """Train one comparison model on ``corpus`` (already excluding the test split)."""
    if isinstance(variant, str):
        variant = TrainVariant.parse(variant)
    if variant.tag not in ("HR", "LR", "NonJoint", "Joint", "Joint-OA"):
        raise ValueError(f"unknown variant tag {variant.tag!r}")
    train, val, _ = split_sequences(corpus, budget.val_fraction, 0.0, seed)
    val_lens = [len(q) for q in val]
    audit: list = []
    ft = budget.finetune
    cnn = _new_cnn(seed, budget)
    sr = curve = None
    prov: dict = {"seed": seed, "variant": variant.name}

    if variant.tag == "Joint-OA":
        return train_maxmix(corpus, budget=budget, seed=seed)

    s = variant.s
    if variant.tag in ("Joint", "NonJoint"):
        sr, curve = _sr_pretrain(train, s, budget, seed, audit)
        prov["pretrain_s"] = s
    if variant.tag == "Joint":
        models.transplant(sr, cnn, ft.lr_pretrained / ft.lr_new)

    s_in = None if variant.tag == "HR" else s
    tr = _pairs(train, s_in, "valence")
    va = _pairs(val, s_in, "valence")
    audit.extend(("finetune",) + tuple(e[2:4]) for e in tr.log)
    if variant.tag == "NonJoint":
        tr = Pairs(sr_reconstruct(sr, tr.inputs), tr.targets, tr.log)
        va = Pairs(sr_reconstruct(sr, va.inputs), va.targets, va.log)
    cnn, hist = finetune_joint(cnn, [tr], [va], val_lens, ft, seed)
    prov["finetune_s"] = [s_in]
    rec = Recognizer(cnn, sr if variant.tag == "NonJoint" else None)
    return TrainResult(variant, rec, hist, sr, curve, audit, prov)


def train_maxmix(corpus: list[LabeledSequence], s_range=FACTORS, budget: Budget = Budget(), seed: int = 0,
                 s_pretrain: int | None = None) -> TrainResult:
    """One-for-All recipe: SR pretraining at the largest factor, then fine-tuning on a factor mixture."""
    s_range = tuple(check_factor(s) for s in s_range)
    s_pre = max(s_range) if s_pretrain is None else check_factor(s_pretrain)
    ft = budget.finetune
    train, val, _ = split_sequences(corpus, budget.val_fraction, 0.0, seed)
    audit: list = []
    sr, curve = _sr_pretrain(train, s_pre, budget, seed, audit)
    cnn = models.transplant(sr, _new_cnn(seed, budget), ft.lr_pretrained / ft.lr_new)
    tr_views = [_pairs(train, s, "valence") for s in ft.s_mix]
    va_views = [_pairs(val, s, "valence") for s in ft.s_mix]
    view_log: list = []
    cnn, hist = finetune_joint(cnn, tr_views, va_views, [len(q) for q in val], ft, seed, view_log)
    audit.extend(("finetune", ft.s_mix[v], None) for v in view_log)
    prov = {"seed": seed, "variant": "Joint-OA", "pretrain_s": s_pre, "finetune_s": list(ft.s_mix)}
    return TrainResult(TrainVariant("Joint-OA"), Recognizer(cnn), hist, sr, curve, audit, prov)
