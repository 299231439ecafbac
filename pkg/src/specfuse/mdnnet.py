"""Shared encoder-decoder network with stick-breaking representations.

The encoder maps l-band pixels to c stick lengths through a densely
connected trunk (every layer sees the raw input plus all previous layer
outputs), a sigmoid head for the break fractions' base variable and a
softplus head for the per-pixel concentration. The decoder is a product
of two bias-free linear layers whose product is the spectral basis. A
small critic network scores (input, representation) pairs for the
mutual-information objective.
"""

import struct

import numpy as np

from . import numgrad as ng
from .errors import DimensionError, ParseError
from .numgrad import Tensor

MDNW_MAGIC = b"MDNW"
MDNW_VERSION = 1

U_CLAMP = 1e-7  # keep fractional powers away from 0 and 1
BETA_FLOOR = 1e-4

STICK_MODES = ("paper", "remainder")
KUMARASWAMY_MODES = ("standard", "as-printed")


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Model:
    """All learnable parameters plus the preprocessing state needed at
    inference time (per-band means of each modality)."""

    def __init__(self, msi_bands, hsi_bands, sticks=15, seed=0,
                 stick_mode="paper", kumaraswamy_mode="standard",
                 u_layers=4, beta_layers=2, hidden=None):
        if stick_mode not in STICK_MODES:
            raise DimensionError(f"unknown stick mode '{stick_mode}'")
        if kumaraswamy_mode not in KUMARASWAMY_MODES:
            raise DimensionError(f"unknown kumaraswamy mode '{kumaraswamy_mode}'")
        self.msi_bands = msi_bands
        self.hsi_bands = hsi_bands
        self.sticks = sticks
        self.stick_mode = stick_mode
        self.kumaraswamy_mode = kumaraswamy_mode
        self.u_layers = u_layers
        self.beta_layers = beta_layers
        # trunk width follows the input dimension (3 for RGB-like MSI)
        self.hidden = msi_bands if hidden is None else hidden
        self.hsi_mean = np.zeros(hsi_bands)
        self.msi_mean = np.zeros(msi_bands)
        self.params = {}
        self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        l, c, h = self.msi_bands, self.sticks, self.hidden
        p = {}
        # densely connected trunk: layer k consumes input + all prior outputs
        fan = l
        for k in range(self.u_layers):
            p[f"enc.u{k}.W"] = _glorot(rng, fan, h)
            p[f"enc.u{k}.b"] = np.zeros((1, h))
            fan += h
        p["enc.uhead.W"] = _glorot(rng, fan, c)
        p["enc.uhead.b"] = np.zeros((1, c))
        fan = l
        for k in range(self.beta_layers):
            p[f"enc.b{k}.W"] = _glorot(rng, fan, h)
            p[f"enc.b{k}.b"] = np.zeros((1, h))
            fan += h
        p["enc.bhead.W"] = _glorot(rng, fan, 1)
        p["enc.bhead.b"] = np.full((1, 1), 1.0)  # start with a comfortably positive beta
        p["dec.W1"] = _glorot(rng, c, c)
        p["dec.W2"] = _glorot(rng, c, self.hsi_bands)
        d = l + c
        p["mi.Wh"] = _glorot(rng, d, d)
        p["mi.bh"] = np.zeros((1, d))
        p["mi.Wo"] = _glorot(rng, d, 1)
        p["mi.bo"] = np.zeros((1, 1))
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def encoder_names(self):
        return [k for k in self.params if k.startswith("enc.")]

    def decoder_names(self):
        return [k for k in self.params if k.startswith("dec.")]

    def critic_names(self):
        return [k for k in self.params if k.startswith("mi.")]

    def snapshot(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap):
        for k, t in self.params.items():
            t.data = snap[k].copy()

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def kumaraswamy_sample(u, beta, mode="standard"):
    """Differentiable inverse-CDF transform of the break fractions.

    standard:   v = 1 - (1 - u)^(1/beta)
    as-printed: v = u^(1/beta)

    `u` is clamped into [1e-7, 1 - 1e-7] and beta floored at 1e-4 before
    the fractional power; the result is clamped the same way so the
    downstream stick products stay away from singular values.
    """
    if mode not in KUMARASWAMY_MODES:
        raise DimensionError(f"unknown kumaraswamy mode '{mode}'")
    u = ng.clamp(u, U_CLAMP, 1.0 - U_CLAMP)
    beta = ng.clamp(beta, BETA_FLOOR, np.inf)
    if mode == "standard":
        v = 1.0 - ng.exp(ng.log(1.0 - u) / beta)
    else:
        v = ng.exp(ng.log(u) / beta)
    return ng.clamp(v, U_CLAMP, 1.0 - U_CLAMP)


def stick_break(v, mode="paper"):
    """Break a unit stick: s_1 = v_1, s_j = v_j * prod_{k<j} (1 - v_k).

    In remainder mode the last piece is replaced by the leftover
    prod_{k<c} (1 - v_k) so rows sum to one exactly.
    """
    if mode not in STICK_MODES:
        raise DimensionError(f"unknown stick mode '{mode}'")
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    n, c = vd.shape
    # Q[:, j] = prod_{k<j} (1 - v_k), Q[:, 0] = 1
    one_minus = 1.0 - vd
    Q = np.empty((n, c))
    Q[:, 0] = 1.0
    if c > 1:
        Q[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    s = vd * Q
    if mode == "remainder":
        s = s.copy()
        s[:, -1] = Q[:, -1]  # leftover prod_{k<c}(1 - v_k): rows sum to one
    if not isinstance(v, Tensor):
        return Tensor(s)

    def bwd(g):
        # ds_j/dv_j = Q_j ; ds_j/dv_k (k<j) = -v_j Q_j / (1 - v_k)
        gv = g * Q
        weighted = g * s  # g_j * v_j * Q_j
        if mode == "remainder":
            gv = gv.copy()
            gv[:, -1] = 0.0
            weighted = weighted.copy()
            weighted[:, -1] = g[:, -1] * Q[:, -1]
        # suffix sums: for column k, sum over j>k of weighted_j
        suffix = np.zeros((n, c))
        if c > 1:
            suffix[:, :-1] = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1][:, 1:]
        gv = gv - suffix / one_minus
        return (gv,)

    out = Tensor(s)
    if v.requires_grad or v._parents:
        out._parents = (v,)
        out._backward = bwd
    return out


def _dense_trunk(x, model, prefix, n_layers):
    feats = [x]
    for k in range(n_layers):
        inp = feats[0] if len(feats) == 1 else ng.concat_cols(feats)
        h = inp @ model.params[f"{prefix}{k}.W"] + model.params[f"{prefix}{k}.b"]
        feats.append(h)  # linear trunk activations
    return ng.concat_cols(feats)


def encode(y, model, return_parts=False):
    """Map an l-band pixel matrix (Tensor or ndarray) to stick lengths."""
    x = y if isinstance(y, Tensor) else Tensor(y)
    if x.cols != model.msi_bands:
        raise DimensionError(
            f"encoder expects {model.msi_bands} bands, got {x.cols}"
        )
    u_feats = _dense_trunk(x, model, "enc.u", model.u_layers)
    u = ng.sigmoid(u_feats @ model.params["enc.uhead.W"] + model.params["enc.uhead.b"])
    b_feats = _dense_trunk(x, model, "enc.b", model.beta_layers)
    beta = ng.softplus(
        b_feats @ model.params["enc.bhead.W"] + model.params["enc.bhead.b"]
    )
    v = kumaraswamy_sample(u, beta, model.kumaraswamy_mode)
    s = stick_break(v, model.stick_mode)
    if return_parts:
        return s, u, beta, v
    return s


def decode(s, model):
    """Representation -> L-band spectra: s @ W1 @ W2 (exactly linear)."""
    x = s if isinstance(s, Tensor) else Tensor(s)
    if x.cols != model.sticks:
        raise DimensionError(f"decoder expects {model.sticks} sticks, got {x.cols}")
    return x @ model.params["dec.W1"] @ model.params["dec.W2"]


def extract_basis(model):
    """The effective spectral basis W1 @ W2, shape c x L."""
    return model.params["dec.W1"].data @ model.params["dec.W2"].data


def msi_tail(x_hat, srf):
    """Project decoded spectra through the fixed sensor response."""
    R = srf.matrix if hasattr(srf, "matrix") else np.asarray(srf, dtype=np.float64)
    xt = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if xt.cols != R.shape[0]:
        raise DimensionError(
            f"decoded spectra have {xt.cols} bands, response expects {R.shape[0]}"
        )
    return xt @ Tensor(R)  # R is a constant: no gradient is ever produced for it


def mi_score(y, s, model):
    """Per-pixel critic term -softplus(-t), t = critic(concat(y, s)) in (0,1)."""
    yt = y if isinstance(y, Tensor) else Tensor(y)
    st = s if isinstance(s, Tensor) else Tensor(s)
    if yt.rows != st.rows:
        raise DimensionError(
            f"pixel count mismatch: input {yt.rows} vs representation {st.rows}"
        )
    x = ng.concat_cols([yt, st])
    h = ng.sigmoid(x @ model.params["mi.Wh"] + model.params["mi.bh"])
    t = ng.sigmoid(h @ model.params["mi.Wo"] + model.params["mi.bo"])
    return -1.0 * ng.softplus(-1.0 * t)


def fuse(y_m_centered, model):
    """Centered l-band pixels -> centered L-band spectra (no mean re-added)."""
    return decode(encode(y_m_centered, model), model).data


def save_checkpoint(model, path, extra_meta=True):
    """Write all parameters (plus stored band means) as named float64 tensors."""
    entries = [(k, t.data) for k, t in sorted(model.params.items())]
    if extra_meta:
        entries.append(("meta.hsi_mean", model.hsi_mean.reshape(1, -1)))
        entries.append(("meta.msi_mean", model.msi_mean.reshape(1, -1)))
    with open(path, "wb") as f:
        f.write(MDNW_MAGIC)
        f.write(struct.pack("<BI", MDNW_VERSION, len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint_tensors(path):
    """Read an MDNW file back as an ordered {name: ndarray} dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MDNW_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {MDNW_MAGIC!r}", offset=0)
        header = f.read(5)
        if len(header) != 5:
            raise ParseError("truncated header", offset=4)
        version, count = struct.unpack("<BI", header)
        if version != MDNW_VERSION:
            raise ParseError(f"unsupported version {version}", offset=4)
        tensors = {}
        for _ in range(count):
            raw = f.read(2)
            if len(raw) != 2:
                raise ParseError("truncated name length", offset=f.tell())
            (nlen,) = struct.unpack("<H", raw)
            name = f.read(nlen).decode("utf-8")
            raw = f.read(8)
            if len(raw) != 8:
                raise ParseError(f"truncated shape for '{name}'", offset=f.tell())
            rows, cols = struct.unpack("<II", raw)
            payload = f.read(8 * rows * cols)
            if len(payload) != 8 * rows * cols:
                raise ParseError(f"truncated payload for '{name}'", offset=f.tell())
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    return tensors


def load_checkpoint(model, path):
    """Restore parameters and stored means into an existing model."""
    tensors = load_checkpoint_tensors(path)
    for k, t in model.params.items():
        if k not in tensors:
            raise ParseError(f"checkpoint missing tensor '{k}'")
        if tensors[k].shape != t.data.shape:
            raise DimensionError(
                f"checkpoint tensor '{k}' has shape {tensors[k].shape}, "
                f"model expects {t.data.shape}"
            )
        t.data = tensors[k]
    if "meta.hsi_mean" in tensors:
        model.hsi_mean = tensors["meta.hsi_mean"].ravel()
    if "meta.msi_mean" in tensors:
        model.msi_mean = tensors["meta.msi_mean"].ravel()
    return model
