"""Retinex decomposition and illumination enhancement at desk scale.

Decom-Net splits an image S into reflectance R (3 channels) and
illumination I (1 channel) with S ~ R * I. Enhance-Net is an
encoder-decoder that re-lights I_low from (R_low, I_low). Both nets and all
losses run on the :mod:`birddet.autodiff` tape, so they train with the same
code that the gradient checks exercise.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .rng import make_rng

log = logging.getLogger(__name__)


ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- config

@dataclass
class LossCoefficients:
    lam_ll: float = 1.0     # R_low  * I_low  vs S_low
    lam_ln: float = 0.001   # R_low  * I_normal vs S_normal
    lam_nl: float = 0.001   # R_normal * I_low vs S_low
    lam_nn: float = 1.0     # R_normal * I_normal vs S_normal
    lam_ir: float = 0.01
    lam_is: float = 0.1
    lam_g: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss coefficient {k} must be finite and non-negative, got {v}")
        if self.lam_ll <= 0 or self.lam_nn <= 0:
            raise ValueError("self-reconstruction weights lam_ll and lam_nn must be positive")


@dataclass
class TrainConfig:
    lr0: float = 0.0032
    lrf: float = 0.12
    batch: int = 16
    epochs: int = 100
    warmup_epochs: float = 2.0
    warmup_bias_lr: float = 0.05
    momentum: float = 0.937
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr0 < 0 or self.warmup_bias_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.lrf <= 1:
            raise ValueError("lrf must lie in (0, 1]")
        if self.batch < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch must be >= 1, epochs and warmup_epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


# ---------------------------------------------------------------- parameters

def _conv_params(rng, name, c_in, c_out, k):
    # He-uniform kernels keep activations O(1) through the ReLU stacks
    fan_in = c_in * k * k
    return {f"{name}.kernel": rng.uniform(-1, 1, size=(c_out, c_in, k, k)) * math.sqrt(6.0 / fan_in),
            f"{name}.bias": rng.uniform(-1, 1, size=c_out) / math.sqrt(fan_in)}


class _Params:
    """Named-tensor parameter set. ``tensors`` maps full names to arrays."""
    prefix = ""

    def __init__(self, tensors, **arch):
        self.tensors = dict(tensors)
        self.arch = arch

    def bind(self, graph):
        return {k: graph.param(v, k) for k, v in self.tensors.items()}

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.tensors.items()}, **self.arch)

    def zeros_like(self):
        return type(self)({k: np.zeros_like(v) for k, v in self.tensors.items()}, **self.arch)

    def __eq__(self, other):
        return (type(self) is type(other) and self.arch == other.arch
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()))


class DecomNetParams(_Params):
    """Feature conv, ``depth`` hidden 3x3 conv+ReLU layers, 4-channel output conv."""
    prefix = "decom"

    def __init__(self, tensors, channels=16, depth=5):
        super().__init__(tensors, channels=channels, depth=depth)

    @classmethod
    def init(cls, rng=0, channels=16, depth=5):
        rng = make_rng(rng)
        t = _conv_params(rng, "decom.feat", 3, channels, 3)
        for i in range(depth):
            t.update(_conv_params(rng, f"decom.hidden.{i}", channels, channels, 3))
        t.update(_conv_params(rng, "decom.out", channels, 4, 3))
        return cls(t, channels, depth)


class EnhanceNetParams(_Params):
    """Encoder-decoder with ``scales`` stride-2 blocks and multi-scale fusion."""
    prefix = "enhance"

    def __init__(self, tensors, channels=16, scales=3):
        super().__init__(tensors, channels=channels, scales=scales)

    @classmethod
    def init(cls, rng=0, channels=16, scales=3):
        rng = make_rng(rng)
        t = _conv_params(rng, "enhance.in", 4, channels, 3)
        for i in range(scales):
            t.update(_conv_params(rng, f"enhance.down.{i}", channels, channels, 3))
        for i in range(scales):
            t.update(_conv_params(rng, f"enhance.up.{i}", channels, channels, 3))
        t.update(_conv_params(rng, "enhance.fuse", channels * scales, channels, 1))
        t.update(_conv_params(rng, "enhance.out", channels, 1, 3))
        return cls(t, channels, scales)


def _conv(x, p, name, stride=1):
    k = p[f"{name}.kernel"]
    pad = (k.shape[-1] - 1) // 2
    return ad.conv2d(x, k, p[f"{name}.bias"], stride=stride, padding=pad)


# ---------------------------------------------------------------- networks

def _check_image(s, what="image"):
    v = s.value if isinstance(s, ad.Node) else np.asarray(s)
    if v.ndim not in (3, 4) or v.shape[-3] != 3:
        raise ValueError(f"{what} must be (3,H,W) or (N,3,H,W), got shape {v.shape}")
    if v.size and (v.min() < 0 or v.max() > 1 or not np.all(np.isfinite(v))):
        raise ValueError(f"{what} values must lie in [0, 1]")


def decom_forward(image, params, bound=None):
    """Decompose ``image`` into (R, I). ``bound`` is a dict of parameter Nodes."""
    _check_image(image)
    if bound is None:
        image, = ad.bind(image)
        bound = params.tensors
    x = _conv(image, bound, "decom.feat")
    for i in range(params.arch["depth"]):
        x = ad.relu(_conv(x, bound, f"decom.hidden.{i}"))
    out = ad.sigmoid(_conv(x, bound, "decom.out"))
    return ad.channel_slice(out, 0, 3), ad.channel_slice(out, 3, 4)


def required_multiple(params):
    return 2 ** params.arch["scales"]


def check_divisible(shape, params):
    m = required_multiple(params)
    h, w = shape[-2], shape[-1]
    if h % m or w % m:
        ph, pw = (-h) % m, (-w) % m
        raise ValueError(f"spatial size {h}x{w} is not divisible by {m}; "
                         f"pad by {ph} rows and {pw} columns (to {h + ph}x{w + pw})")


def enhance_forward(reflectance, illumination, params, bound=None):
    """Adjusted illumination, shape (..., 1, H, W), values in [0, 1]."""
    reflectance, illumination = ad.bind(reflectance, illumination)
    check_divisible(illumination.shape, params)
    p = params.tensors if bound is None else bound
    scales = params.arch["scales"]
    x = _conv(ad.concat([reflectance, illumination]), p, "enhance.in")
    skips = [x]
    for i in range(scales):
        x = ad.relu(_conv(x, p, f"enhance.down.{i}", stride=2))
        skips.append(x)
    feats = []
    for i in range(scales):
        x = ad.nearest_upsample(x, 2) + skips[scales - 1 - i]
        x = ad.relu(_conv(x, p, f"enhance.up.{i}"))
        feats.append(ad.nearest_upsample(x, 2 ** (scales - 1 - i)))
    x = _conv(ad.concat(feats), p, "enhance.fuse")
    return ad.sigmoid(_conv(x, p, "enhance.out"))


# ---------------------------------------------------------------- losses

def _l1(x):
    return ad.mean(ad.absolute(x))


def _same_shape(*xs):
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _check_pair(r, i, s=None):
    if r.shape[-3] != 3 or i.shape[-3] != 1 or r.shape[:-3] != i.shape[:-3] or r.shape[-2:] != i.shape[-2:]:
        raise ValueError(f"reflectance {r.shape} / illumination {i.shape} shapes are inconsistent")
    if s is not None and s.shape != r.shape:
        raise ValueError(f"image shape {s.shape} does not match reflectance {r.shape}")


def loss_recon(r_low, r_normal, i_low, i_normal, s_low, s_normal, coeffs=None):
    """Weighted sum of mean |R_i * I_j - S_j| over i, j in {low, normal}."""
    coeffs = coeffs or LossCoefficients()
    r_low, r_normal, i_low, i_normal, s_low, s_normal = ad.bind(
        r_low, r_normal, i_low, i_normal, s_low, s_normal)
    _check_pair(r_low, i_low, s_low)
    _check_pair(r_normal, i_normal, s_normal)
    _same_shape(r_low, r_normal)
    r = {"l": r_low, "n": r_normal}
    i = {"l": i_low, "n": i_normal}
    s = {"l": s_low, "n": s_normal}
    total = None
    for a, b in ("ll", "ln", "nl", "nn"):
        lam = getattr(coeffs, f"lam_{a}{b}")
        if lam == 0:
            continue
        term = ad.scale(_l1(r[a] * i[b] - s[b]), lam)
        total = term if total is None else total + term
    return total


def loss_ir(r_low, r_normal):
    """Reflectance consistency: mean |R_low - R_normal|."""
    r_low, r_normal = ad.bind(r_low, r_normal)
    _same_shape(r_low, r_normal)
    return _l1(r_low - r_normal)


def smoothness(illum, reflect, lam_g):
    """Structure-aware TV of one illumination map.

    mean(|dI| * exp(-lam_g * g)) summed over both directions, where ``g`` is
    the channel mean of the reflectance gradient magnitude.
    """
    illum, reflect = ad.bind(illum, reflect)
    _check_pair(reflect, illum)
    ih, iv = ad.spatial_gradient(illum)
    rh, rv = ad.spatial_gradient(reflect)
    total = None
    for di, dr in ((ih, rh), (iv, rv)):
        weight = ad.exp(ad.scale(ad.channelwise_pool(ad.absolute(dr), "avg"), -lam_g))
        term = ad.mean(ad.absolute(di) * weight)
        total = term if total is None else total + term
    return total


def loss_is(i_low, i_normal, r_low, r_normal, lam_g=10.0):
    i_low, i_normal, r_low, r_normal = ad.bind(i_low, i_normal, r_low, r_normal)
    return smoothness(i_low, r_low, lam_g) + smoothness(i_normal, r_normal, lam_g)


def decom_loss_terms(r_low, i_low, r_normal, i_normal, s_low, s_normal, coeffs):
    c = coeffs
    r_low, i_low, r_normal, i_normal, s_low, s_normal = ad.bind(
        r_low, i_low, r_normal, i_normal, s_low, s_normal)
    total = loss_recon(r_low, r_normal, i_low, i_normal, s_low, s_normal, c)
    if c.lam_ir:
        total = total + ad.scale(loss_ir(r_low, r_normal), c.lam_ir)
    if c.lam_is:
        total = total + ad.scale(loss_is(i_low, i_normal, r_low, r_normal, c.lam_g), c.lam_is)
    return total


def decom_total_loss(s_low, s_normal, params, coeffs=None, graph=None):
    """Recon + lam_ir * consistency + lam_is * smoothness on both images.

    Returns the loss Node; pass ``graph`` to get parameter gradients from it.
    """
    coeffs = coeffs or LossCoefficients()
    g = graph or ad.Graph()
    bound = params.bind(g)
    s_low, s_normal = g.lift(s_low), g.lift(s_normal)
    _same_shape(s_low, s_normal)
    r_low, i_low = decom_forward(s_low, params, bound)
    r_normal, i_normal = decom_forward(s_normal, params, bound)
    return decom_loss_terms(r_low, i_low, r_normal, i_normal, s_low, s_normal, coeffs)


def enhance_total_loss(r_low, i_hat, s_normal, coeffs=None):
    """mean |R_low * I_hat - S_normal| + smoothness(I_hat guided by R_low)."""
    coeffs = coeffs or LossCoefficients()
    r_low, i_hat, s_normal = ad.bind(r_low, i_hat, s_normal)
    _check_pair(r_low, i_hat, s_normal)
    return _l1(r_low * i_hat - s_normal) + smoothness(i_hat, r_low, coeffs.lam_g)


def enhance_loss(s_low, s_normal, decom, enhance, coeffs=None, graph=None):
    """Enhancement loss with Decom-Net frozen (its outputs enter as constants)."""
    g = graph or ad.Graph()
    r_low, i_low = decom_forward(s_low, decom)
    bound = enhance.bind(g)
    r = g.const(r_low.value)
    i_hat = enhance_forward(r, g.const(i_low.value), enhance, bound)
    return enhance_total_loss(r, i_hat, s_normal, coeffs)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: _Params
    step_losses: list
    epoch_losses: list


def lr_at(config, step, steps_per_epoch, is_bias):
    """Learning rate for optimizer step ``step`` (0-based).

    Linear decay from ``lr0`` to ``lr0 * lrf`` across epochs; during warm-up
    weights ramp up from 0 and biases ramp down from ``warmup_bias_lr``.
    """
    epoch = step // steps_per_epoch
    span = max(config.epochs - 1, 1)
    base = config.lr0 * ((1 - epoch / span) * (1 - config.lrf) + config.lrf)
    n_warm = config.warmup_epochs * steps_per_epoch
    if step < n_warm:
        t = step / n_warm
        start = config.warmup_bias_lr if is_bias else 0.0
        return start + t * (base - start)
    return base


def _train(params, loss_fn, pairs, config, seed, what):
    if len(pairs) == 0:
        raise ValueError("training set is empty")
    rng = make_rng(seed)
    params = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    second = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    lows = np.stack([p[0] for p in pairs])
    normals = np.stack([p[1] for p in pairs])
    n = len(pairs)
    steps_per_epoch = math.ceil(n / config.batch)
    step_losses, epoch_losses = [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch:(b + 1) * config.batch]
            g = ad.Graph()
            loss = loss_fn(lows[idx], normals[idx], params, g)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(f"{what}: non-finite loss at epoch {epoch}, step {step}")
            # the minibatch objective sums per-image losses; histories keep the per-image mean
            grads = ad.backward(g, ad.scale(loss, len(idx)))
            g.release()
            for name, grad in grads.items():
                lr = lr_at(config, step, steps_per_epoch, name.endswith(".bias"))
                v = velocity[name]
                if config.optimizer == "sgd":
                    v *= config.momentum
                    v += grad
                    update = v
                else:
                    b1, b2 = config.momentum, ADAM_BETA2
                    m2 = second[name]
                    v *= b1
                    v += (1 - b1) * grad
                    m2 *= b2
                    m2 += (1 - b2) * grad * grad
                    t = step + 1
                    update = (v / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + ADAM_EPS)
                params.tensors[name] = params.tensors[name] - lr * update
            batch_losses.append(value)
            step_losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
        log.debug("%s epoch %d loss %.6f", what, epoch, epoch_losses[-1])
    return TrainResult(params, step_losses, epoch_losses)


def train_decom(pairs, config=None, seed=0, coeffs=None, params=None):
    """Minibatch descent on the decomposition loss. ``pairs`` holds (S_low, S_normal)."""
    config = config or TrainConfig()
    coeffs = coeffs or LossCoefficients()
    rng = make_rng(seed)
    init = params if params is not None else DecomNetParams.init(rng)

    def loss_fn(low, normal, p, g):
        return decom_total_loss(low, normal, p, coeffs, graph=g)

    return _train(init, loss_fn, pairs, config, rng, "decom")


def train_enhance(pairs, decom, config=None, seed=0, coeffs=None, params=None):
    """Train Enhance-Net against S_normal with ``decom`` frozen."""
    config = config or TrainConfig()
    coeffs = coeffs or LossCoefficients()
    rng = make_rng(seed)
    init = params if params is not None else EnhanceNetParams.init(rng)
    if len(pairs):
        check_divisible(np.shape(pairs[0][0]), init)

    def loss_fn(low, normal, p, g):
        return enhance_loss(low, normal, decom, p, coeffs, graph=g)

    return _train(init, loss_fn, pairs, config, rng, "enhance")


def enhance_image(s_low, decom, enhance, unit_illumination=False):
    """Low-light image -> clamp(R_low * I_hat) in [0, 1]."""
    s_low = np.asarray(s_low, dtype=np.float64)
    _check_image(s_low, "low-light image")
    if not unit_illumination:
        check_divisible(s_low.shape, enhance)
    r, i = decom_forward(s_low, decom)
    if unit_illumination:
        i_hat = np.ones_like(i.value)
    else:
        i_hat = enhance_forward(r.value, i.value, enhance).value
    return np.clip(r.value * i_hat, 0.0, 1.0)


# ---------------------------------------------------------------- files

def save_model(path, params, **meta):
    from .tensorio import save_tensors
    info = {"kind": params.prefix, **params.arch, **meta}
    save_tensors(path, params.tensors, info)


def load_model(path):
    from .tensorio import load_tensors
    tensors, meta = load_tensors(path)
    kind = meta.get("kind")
    if kind == "decom":
        return DecomNetParams(tensors, meta["channels"], meta["depth"]), meta
    if kind == "enhance":
        return EnhanceNetParams(tensors, meta["channels"], meta["scales"]), meta
    raise ValueError(f"{path}: unknown model kind {kind!r}")


def write_history(path, epoch_losses):
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(epoch_losses):
            fh.write(f"{i},{v:.17g}\n")
