"""Losses, optimizer and the alternating two-modality training loop.

Each iteration takes one step on the low-resolution hyperspectral branch
(updating encoder, critic and decoder) and one on the multispectral
branch (decoder frozen: its spectra come from the hyperspectral data
only). Training stops when the summed reconstruction error stops
improving, returning the best-seen parameters.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng
from . import mdnnet
from .errors import DimensionError, TrainingAbort
from .hsicube import unfold, zero_mean
from .numgrad import Tensor, backward


@dataclass
class TrainConfig:
    lambda_mi: float = 1e-5
    mu_decay: float = 1e-4
    learning_rate: float = 1e-3
    max_steps: int = 20000
    patience: int = 200
    l21_epsilon: float = 1e-8
    seed: int = 0
    stick_mode: str = "paper"
    kumaraswamy_mode: str = "standard"
    optimizer: str = "adam"  # or "sgd"
    improvement_rtol: float = 1e-6
    batch_pixels: int = 0  # 0 = full batch

    def __post_init__(self):
        if self.lambda_mi < 0 or self.mu_decay < 0:
            raise DimensionError("lambda_mi and mu_decay must be nonnegative")
        if self.patience < 1:
            raise DimensionError("patience must be >= 1")


@dataclass
class StepRecord:
    step: int
    l21_hsi: float
    l21_msi: float
    mi_hsi: float
    mi_msi: float
    total: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    stop_reason: str = ""

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("step,l21_hsi,l21_msi,mi_hsi,mi_msi,total\n")
            for r in self.records:
                f.write(
                    f"{r.step},{r.l21_hsi:.9g},{r.l21_msi:.9g},"
                    f"{r.mi_hsi:.9g},{r.mi_msi:.9g},{r.total:.9g}\n"
                )


def loss_l21(pred, target, eps=1e-8):
    """Smoothed sum of per-row residual norms.

    sum_i sqrt(||row_i||^2 + eps) - n*sqrt(eps): finite gradient at zero
    residual, and exactly 0 when pred equals target.
    """
    if eps <= 0:
        raise DimensionError("l21 epsilon must be > 0")
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, float)
    if p.shape != t.shape:
        raise DimensionError(f"l21 shape mismatch: {p.shape} vs {t.shape}")
    r = p - Tensor(t)
    row = ng.sum_rows(r * r)
    return ng.sum_all(ng.sqrt(row + eps)) - p.rows * np.sqrt(eps)


def loss_mi(y_h, s_h, y_m, s_m, model):
    """Mean critic score per modality, summed (shared critic weights)."""
    return ng.mean_all(mdnnet.mi_score(y_h, s_h, model)) + ng.mean_all(
        mdnnet.mi_score(y_m, s_m, model)
    )


def decoder_weight_norm(model):
    """Squared Frobenius norm of the decoder factor matrices."""
    w1, w2 = model.params["dec.W1"], model.params["dec.W2"]
    return ng.sum_all(w1 * w1) + ng.sum_all(w2 * w2)


def total_loss(l21_hsi, l21_msi, mi, psi_sq, config):
    """L = L21(hsi) + L21(msi) - lambda * MI + mu * ||psi||_F^2.

    Works on plain floats or on Tensors inside a tape.
    """
    return l21_hsi + l21_msi - config.lambda_mi * mi + config.mu_decay * psi_sq


class Optimizer:
    """Adam (default) or plain gradient descent, per-parameter state."""

    def __init__(self, kind="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise DimensionError(f"unknown optimizer '{kind}'")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def update(self, params, names):
        for name in names:
            p = params[name]
            g = p.grad
            if g is None:
                continue
            if self.kind == "sgd":
                p.data = p.data - self.lr * g
                continue
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            mhat = st["m"] / (1 - self.beta1 ** st["t"])
            vhat = st["v"] / (1 - self.beta2 ** st["t"])
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def optimizer_update(params, names, optimizer):
    """Apply one optimizer step to the named parameters in-place."""
    optimizer.update(params, names)


@dataclass
class _Batches:
    """Preprocessed training inputs (centered, projected)."""

    y_h_tilde: np.ndarray  # LR HSI projected to l bands, centered
    target_h: np.ndarray  # centered LR HSI, L bands
    y_m: np.ndarray  # centered HR MSI, l bands (input and target)
    srf: object


def _forward_branch(model, kind, data, config, rows=None):
    if kind == "hsi":
        inp = data.y_h_tilde
        target = data.target_h
    elif kind == "msi":
        inp = data.y_m
        target = data.y_m
    else:
        raise DimensionError(f"unknown batch kind '{kind}'")
    if rows is not None:
        inp = inp[rows]
        target = target[rows]
    x = Tensor(inp)
    s = mdnnet.encode(x, model)
    dec = mdnnet.decode(s, model)
    pred = dec if kind == "hsi" else mdnnet.msi_tail(dec, data.srf)
    l21 = loss_l21(pred, Tensor(target), config.l21_epsilon)
    mi = ng.mean_all(mdnnet.mi_score(x, s, model))
    return l21, mi


def train_step(model, kind, data, optimizer, config, rows=None):
    """One gradient step on a single modality.

    Decoder weights move only on hsi steps; the critic and encoder move
    on every step. Returns (l21, mi, psi_sq) as plain floats.
    """
    l21, mi = _forward_branch(model, kind, data, config, rows)
    psi_sq = decoder_weight_norm(model)
    loss = total_loss(l21, 0.0, mi, psi_sq, config)
    if not np.isfinite(loss.item()):
        raise TrainingAbort(
            f"non-finite loss on {kind} step",
            last_record=(kind, l21.item(), mi.item()),
        )
    model.zero_grad()
    backward(loss)
    names = list(model.params)
    if kind == "msi":
        names = [n for n in names if not n.startswith("dec.")]
    optimizer.update(model.params, names)
    return l21.item(), mi.item(), psi_sq.item()


def prepare_inputs(y_h, y_m, srf):
    """Zero-mean both modalities and project the HSI through the response.

    Returns the batch bundle plus the per-band means needed to restore
    raw-scale outputs later.
    """
    if y_h.bands != srf.hsi_bands:
        raise DimensionError(
            f"LR HSI has {y_h.bands} bands, response expects {srf.hsi_bands}"
        )
    if y_m.bands != srf.msi_bands:
        raise DimensionError(
            f"HR MSI has {y_m.bands} bands, response expects {srf.msi_bands}"
        )
    ch, mean_h = zero_mean(unfold(y_h))
    cm, mean_m = zero_mean(unfold(y_m))
    data = _Batches(
        y_h_tilde=ch.values @ srf.matrix,
        target_h=ch.values,
        y_m=cm.values,
        srf=srf,
    )
    return data, mean_h, mean_m


def build_gradcheck_problem(seed=0, pixels=4, msi_bands=3, hsi_bands=31, sticks=15,
                            stick_mode="paper", kumaraswamy_mode="standard",
                            config=None, corrupt=False):
    """A tiny random instance of the full objective for finite-difference
    verification. Returns (fn, params) ready for numgrad.grad_check.

    With `corrupt=True` one decoder weight is routed through an op whose
    backward rule is deliberately wrong (scaled by 1.1), so the check must
    fail; this is the CLI's self-test hook.

    The instance is conditioned so central differences at step 1e-5 can
    actually resolve every coordinate: targets sit close to the initial
    prediction (small objective value limits float64 cancellation noise),
    the sigmoid head is biased low so all stick lengths are of comparable
    size (late sticks otherwise decay geometrically and their gradients
    drown in noise), and the mutual-information weight defaults to 0.01 so
    that path is exercised at a measurable scale. The compute graph is the
    real training objective.
    """
    if config is None:
        config = TrainConfig(lambda_mi=0.01)
    rng = np.random.default_rng(seed)
    model = mdnnet.Model(
        msi_bands=msi_bands,
        hsi_bands=hsi_bands,
        sticks=sticks,
        seed=seed,
        stick_mode=stick_mode,
        kumaraswamy_mode=kumaraswamy_mode,
    )
    model.params["enc.uhead.b"].data[:] = -3.0  # u ~ 0.05: comparable sticks
    y_h = rng.uniform(0.1, 1.0, size=(pixels, hsi_bands))
    y_m_raw = rng.uniform(0.1, 1.0, size=(pixels, msi_bands))
    from .hsicube import make_gaussian_srf

    srf = make_gaussian_srf(hsi_bands, msi_bands)
    y_h_tilde = (y_h - y_h.mean(axis=0)) @ srf.matrix
    y_m = y_m_raw - y_m_raw.mean(axis=0)
    # targets = initial prediction + small noise: near-zero residuals keep
    # the loss value tiny while the l21 row normalization keeps gradients
    # at full scale
    s_h0 = mdnnet.encode(Tensor(y_h_tilde), model)
    s_m0 = mdnnet.encode(Tensor(y_m), model)
    target_h = mdnnet.decode(s_h0, model).data + 0.002 * rng.standard_normal(
        (pixels, hsi_bands)
    )
    target_m = mdnnet.msi_tail(mdnnet.decode(s_m0, model), srf).data + (
        0.002 * rng.standard_normal((pixels, msi_bands))
    )

    def fn(params):
        xh = Tensor(y_h_tilde)
        xm = Tensor(y_m)
        if corrupt:
            w1 = _bad_identity(model.params["dec.W1"])
        else:
            w1 = model.params["dec.W1"]
        s_h = mdnnet.encode(xh, model)
        s_m = mdnnet.encode(xm, model)
        pred_h = s_h @ w1 @ model.params["dec.W2"]
        pred_m = mdnnet.msi_tail(s_m @ w1 @ model.params["dec.W2"], srf)
        l21_h = loss_l21(pred_h, Tensor(target_h), config.l21_epsilon)
        l21_m = loss_l21(pred_m, Tensor(target_m), config.l21_epsilon)
        mi = loss_mi(xh, s_h, xm, s_m, model)
        psi_sq = ng.sum_all(w1 * w1) + ng.sum_all(
            model.params["dec.W2"] * model.params["dec.W2"]
        )
        return total_loss(l21_h, l21_m, mi, psi_sq, config)

    return fn, model.params


def _bad_identity(x):
    """Identity forward with a wrong backward (gradient scaled by 1.1)."""
    out = Tensor(x.data.copy())
    out._parents = (x,)
    out._backward = lambda g: (1.1 * g,)
    return out


def train(y_h, y_m, srf, config):
    """Fit the fusion model on one LR-HSI / HR-MSI pair.

    Alternates one hsi step and one msi step per iteration and stops when
    the summed reconstruction error has not improved relatively by
    `improvement_rtol` for `patience` iterations (or at max_steps).
    Returns the model at the best observed reconstruction error.
    """
    data, mean_h, mean_m = prepare_inputs(y_h, y_m, srf)
    model = mdnnet.Model(
        msi_bands=srf.msi_bands,
        hsi_bands=srf.hsi_bands,
        seed=config.seed,
        stick_mode=config.stick_mode,
        kumaraswamy_mode=config.kumaraswamy_mode,
    )
    model.hsi_mean = mean_h
    model.msi_mean = mean_m
    optimizer = Optimizer(config.optimizer, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    trace = TrainTrace()
    start = time.perf_counter()
    best_recon = np.inf
    best_snap = model.snapshot()
    stall = 0
    trace.stop_reason = "max-steps"
    for step in range(1, config.max_steps + 1):
        rows_h = rows_m = None
        if config.batch_pixels:
            rows_h = rng.permutation(len(data.y_h_tilde))[: config.batch_pixels]
            rows_m = rng.permutation(len(data.y_m))[: config.batch_pixels]
        l21_h, mi_h, psi_sq = train_step(model, "hsi", data, optimizer, config, rows_h)
        l21_m, mi_m, _ = train_step(model, "msi", data, optimizer, config, rows_m)
        total = total_loss(l21_h, l21_m, mi_h + mi_m, psi_sq, config)
        trace.records.append(StepRecord(step, l21_h, l21_m, mi_h, mi_m, total))
        # per-row normalization keeps the many-pixel modality from drowning
        # out the other in the stopping / model-selection metric
        n_h = len(rows_h) if rows_h is not None else len(data.target_h)
        n_m = len(rows_m) if rows_m is not None else len(data.y_m)
        recon = l21_h / n_h + l21_m / n_m
        if np.isfinite(best_recon):
            threshold = best_recon - config.improvement_rtol * abs(best_recon)
        else:
            threshold = np.inf
        if recon < threshold:
            best_recon = recon
            best_snap = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                trace.stop_reason = "patience-exhausted"
                break
    trace.wall_time = time.perf_counter() - start
    model.restore(best_snap)
    return model, trace
