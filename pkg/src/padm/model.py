"""Physics-aware denoiser family: conditioner, U-Net trunk, physics head.

Two roles share one trunk definition:

* teacher: conditioner C = cross-modality attention between the NAC slice
  and the attenuation slice (privileged input available only in training).
* student: conditioner C = the NAC slice lifted through its own stem so the
  feature shapes match the teacher's exactly; no attention.

The trunk maps concat(x_t, C) plus a sinusoidal timestep embedding to
(s_fields, mu, x0_aux).  s_fields are per-angle path-length maps and mu an
attenuation map, both softplus-positive; they parameterize a correction
factor image ACF = 1 / mean_m exp(-mu * s_m) >= 1, and the physics module
applies x_bar = y * ACF.  The final clean-image estimate blends the physics
path with the auxiliary channel: alpha * x_bar + (1 - alpha) * x0_aux.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from padm import gradkit as gk
from padm.gradkit import Tensor, ParamStore

AT_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class PadmConfig:
    """Desk-scale model configuration.

    Attributes:
        n_proj: number of per-angle path-length output channels N.
        alpha: blend weight between the physics estimate and the auxiliary
            channel, in [0, 1].
        channels: trunk width per resolution level, finest first.
        d_attn: conditioner feature/attention dimension.
        levels: U-Net depth; must equal len(channels).
        t_embed_dim: sinusoidal timestep embedding width (even).
        ffn_ratio: conditioner feed-forward expansion factor.
        phys_iters: physics-module correction iterations K.
    """

    n_proj: int = 16
    alpha: float = 0.5
    channels: tuple = (16, 32)
    d_attn: int = 16
    levels: int = 2
    t_embed_dim: int = 32
    ffn_ratio: int = 2
    phys_iters: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_proj < 1:
            raise ValueError("need n_proj >= 1")
        if self.levels != len(self.channels) or self.levels < 1:
            raise ValueError("levels must match the channel tuple")
        if any(c < 1 for c in self.channels) or self.d_attn < 1:
            raise ValueError("widths must be >= 1")
        if self.t_embed_dim < 2 or self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be even and >= 2")
        if self.ffn_ratio < 1 or self.phys_iters < 1:
            raise ValueError("ffn_ratio and phys_iters must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PadmConfig":
        return cls(**{k: tuple(v) if k == "channels" else v for k, v in d.items()})


@dataclass
class CondFeatures:
    """Conditioner output: features plus which branch produced them."""

    features: Tensor
    kind: str  # "teacher" | "student"


@dataclass
class PhysOut:
    """Denoiser outputs: path-length fields, attenuation map, auxiliary image."""

    s_fields: Tensor
    mu: Tensor
    x0_aux: Tensor


def sinusoidal_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Transformer-style sin/cos embedding of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(dtype)


def _glorot(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    fan_out = shape[0] * (int(np.prod(shape[2:])) if len(shape) > 2 else 1)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(config: PadmConfig, role: str, seed: int, dtype=np.float32) -> ParamStore:
    """Freshly initialized parameters for one role; names are stable so
    checkpoints reload positionally by name."""
    if role not in ("teacher", "student"):
        raise ValueError(f"unknown role {role!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = config.d_attn

    def conv(name, cin, cout, k=3):
        store.add(f"{name}/w", _glorot(rng, (cout, cin, k, k), dtype), dtype=dtype)
        store.add(f"{name}/b", np.zeros(cout, dtype=dtype), dtype=dtype)

    def lin(name, nin, nout):
        store.add(f"{name}/w", _glorot(rng, (nin, nout), dtype), dtype=dtype)
        store.add(f"{name}/b", np.zeros(nout, dtype=dtype), dtype=dtype)

    conv("cond/stem_nac", 1, d)
    if role == "teacher":
        conv("cond/stem_a", 1, d)
        store.add("cond/ln1/g", np.ones(d, dtype=dtype), dtype=dtype)
        store.add("cond/ln1/b", np.zeros(d, dtype=dtype), dtype=dtype)
        lin("cond/ffn/l1", d, config.ffn_ratio * d)
        lin("cond/ffn/l2", config.ffn_ratio * d, d)
        store.add("cond/ln2/g", np.ones(d, dtype=dtype), dtype=dtype)
        store.add("cond/ln2/b", np.zeros(d, dtype=dtype), dtype=dtype)
    conv("cond/post", d, d)

    chans = config.channels
    conv("unet/enc0/c1", 1 + d, chans[0])
    conv("unet/enc0/c2", chans[0], chans[0])
    lin("temb/enc0", config.t_embed_dim, chans[0])
    for i in range(1, config.levels):
        conv(f"unet/down{i - 1}", chans[i - 1], chans[i], k=3)
        conv(f"unet/enc{i}/c1", chans[i], chans[i])
        conv(f"unet/enc{i}/c2", chans[i], chans[i])
        lin(f"temb/enc{i}", config.t_embed_dim, chans[i])
    for i in range(config.levels - 2, -1, -1):
        conv(f"unet/up{i}", chans[i + 1], chans[i])
        conv(f"unet/dec{i}/c1", 2 * chans[i], chans[i])
        conv(f"unet/dec{i}/c2", chans[i], chans[i])
        lin(f"temb/dec{i}", config.t_embed_dim, chans[i])
    conv("unet/head_s", chans[0], config.n_proj)
    conv("unet/head_mu", chans[0], 1)
    conv("unet/head_aux", chans[0], 1)
    return store


def _as_image_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"expected an image batch, got shape {arr.shape}")
    return Tensor(arr, requires_grad=False)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over token axes (B, T, d)."""
    d = q.data.shape[-1]
    scores = gk.matmul(q, gk.transpose(k, (0, 2, 1)))
    scores = gk.mul(scores, 1.0 / math.sqrt(d))
    return gk.matmul(gk.softmax(scores, axis=-1), v)


class Padm:
    """One denoiser instance (teacher or student) over a ParamStore."""

    def __init__(self, config: PadmConfig, role: str, store: ParamStore):
        if role not in ("teacher", "student"):
            raise ValueError(f"unknown role {role!r}")
        self.config = config
        self.role = role
        self.store = store
        self.dtype = store.params["cond/stem_nac/w"].data.dtype

    @classmethod
    def create(cls, config: PadmConfig, role: str, seed: int, dtype=np.float32) -> "Padm":
        return cls(config, role, init_params(config, role, seed, dtype=dtype))

    def _p(self, name: str) -> Tensor:
        return self.store.params[name]

    def _conv(self, name, x, stride=1):
        return gk.conv2d(x, self._p(f"{name}/w"), self._p(f"{name}/b"), stride=stride)

    def _lin(self, name, x):
        return gk.linear(x, self._p(f"{name}/w"), self._p(f"{name}/b"))

    # conditioner -----------------------------------------------------------

    def _tokens(self, feat: Tensor):
        b, c, h, w = feat.data.shape
        return gk.reshape(gk.transpose(feat, (0, 2, 3, 1)), (b, h * w, c)), (b, h, w, c)

    def _untokens(self, tok: Tensor, dims):
        b, h, w, c = dims
        return gk.transpose(gk.reshape(tok, (b, h, w, c)), (0, 3, 1, 2))

    def _post(self, feat: Tensor) -> Tensor:
        return self._conv("cond/post", gk.upsample_nearest(feat, 2))

    def cross_attn(self, y, a) -> CondFeatures:
        """Teacher conditioner: NAC features attend over attenuation features."""
        if self.role != "teacher":
            raise ValueError("cross_attn is a teacher operation")
        y = _as_image_tensor(y, self.dtype)
        a = _as_image_tensor(a, self.dtype)
        if y.data.shape != a.data.shape:
            raise ValueError("NAC and attenuation slices must be aligned")
        x_nac = self._conv("cond/stem_nac", y, stride=2)
        x_a = self._conv("cond/stem_a", a, stride=2)
        q, dims = self._tokens(x_nac)
        kv, _ = self._tokens(x_a)
        att = attention(q, kv, kv)
        xt = gk.layer_norm(gk.add(q, att), self._p("cond/ln1/g"), self._p("cond/ln1/b"))
        ffn = self._lin("cond/ffn/l2", gk.gelu(self._lin("cond/ffn/l1", xt)))
        out = gk.layer_norm(gk.add(xt, ffn), self._p("cond/ln2/g"), self._p("cond/ln2/b"))
        return CondFeatures(self._post(self._untokens(out, dims)), "teacher")

    def student_cond(self, y) -> CondFeatures:
        """Student conditioner: the NAC slice lifted through its own stem."""
        y = _as_image_tensor(y, self.dtype)
        return CondFeatures(self._post(self._conv("cond/stem_nac", y, stride=2)), "student")

    def cond(self, y, a=None) -> CondFeatures:
        if self.role == "teacher":
            if a is None:
                raise ValueError("teacher conditioning needs the attenuation slice")
            return self.cross_attn(y, a)
        return self.student_cond(y)

    # trunk -----------------------------------------------------------------

    def _inject_t(self, h: Tensor, name: str, temb: Tensor) -> Tensor:
        bias = self._lin(name, temb)
        b, c = bias.data.shape
        return gk.add(h, gk.reshape(bias, (b, c, 1, 1)))

    def denoise(self, x_t, cond: CondFeatures, t) -> PhysOut:
        """Trunk forward pass; t is an integer timestep (or one per item)."""
        x_t = _as_image_tensor(x_t, self.dtype)
        feats = cond.features
        if np.ndim(t) == 0:
            t = np.full(x_t.data.shape[0], int(t))
        temb = Tensor(
            sinusoidal_embedding(t, self.config.t_embed_dim, dtype=self.dtype),
            requires_grad=False,
        )
        h = gk.concat([x_t, feats], axis=1)
        skips = []
        for i in range(self.config.levels):
            if i > 0:
                h = self._conv(f"unet/down{i - 1}", h, stride=2)
            h = self._inject_t(self._conv(f"unet/enc{i}/c1", h), f"temb/enc{i}", temb)
            h = gk.gelu(h)
            h = gk.gelu(self._conv(f"unet/enc{i}/c2", h))
            skips.append(h)
        for i in range(self.config.levels - 2, -1, -1):
            h = self._conv(f"unet/up{i}", gk.upsample_nearest(h, 2))
            h = gk.concat([h, skips[i]], axis=1)
            h = self._inject_t(self._conv(f"unet/dec{i}/c1", h), f"temb/dec{i}", temb)
            h = gk.gelu(h)
            h = gk.gelu(self._conv(f"unet/dec{i}/c2", h))
        return PhysOut(
            s_fields=gk.softplus(self._conv("unet/head_s", h)),
            mu=gk.softplus(self._conv("unet/head_mu", h)),
            x0_aux=self._conv("unet/head_aux", h),
        )

    def predict_x0(self, x_t, cond: CondFeatures, y, t) -> Tensor:
        """Blended clean-image estimate fed to the bridge objective/sampler."""
        phys = self.denoise(x_t, cond, t)
        y = _as_image_tensor(y, self.dtype)
        x_bar = physics_module(phys, y)
        a = self.config.alpha
        if a == 1.0:
            return x_bar
        if a == 0.0:
            return phys.x0_aux
        return gk.add(gk.mul(x_bar, a), gk.mul(phys.x0_aux, 1.0 - a))


def acf_theta(phys: PhysOut) -> Tensor:
    """Correction-factor image from predicted mu and path-length fields:
    1 / mean_m exp(-mu * s_m), always >= 1."""
    survival = gk.exp(gk.neg(gk.mul(phys.mu, phys.s_fields)))
    return gk.reciprocal(gk.reduce_mean(survival, axis=1, keepdims=True))


def physics_module(phys: PhysOut, y, geom=None, iters: int = 1, offset: float = 1.0) -> Tensor:
    """Multiplicative first-order correction of y by the predicted ACF.

    The correction acts in the nonnegative intensity domain: normalized
    slices live in [-1, 1] under an affine map whose scale cancels in a
    ratio, so x_bar = (y + offset) * ACF - offset with offset 1.  Callers
    working in raw nonnegative units pass offset 0 for the plain product.
    ACF == 1 gives x_bar = y exactly for any offset.

    iters > 1 refines toward projection consistency: x_bar is re-projected
    with the predicted mu and a multiplicative residual against the
    unattenuated re-projection of y is backprojected; the correction image
    is detached from the graph.  Requires a geometry and raw nonnegative
    image units (offset 0), so the default training path keeps iters = 1.
    """
    if not isinstance(y, Tensor):
        y = _as_image_tensor(y, phys.mu.data.dtype)
    acf = acf_theta(phys)
    if offset:
        x_bar = gk.sub(gk.mul(gk.add(y, offset), acf), offset)
    else:
        x_bar = gk.mul(y, acf)
    if iters <= 1:
        return x_bar
    if geom is None:
        raise ValueError("iterated correction needs a projection geometry")
    from padm import projector

    for _ in range(iters - 1):
        corr = np.ones_like(x_bar.data)
        for b in range(x_bar.data.shape[0]):
            img = np.maximum(x_bar.data[b, 0].astype(np.float64), 0.0)
            mu_b = phys.mu.data[b, 0].astype(np.float64)
            ref = projector.forward_project(np.maximum(np.asarray(y.data[b, 0], np.float64), 0.0), None, geom)
            got = projector.forward_project(img, mu_b, geom)
            ratio = np.where(got > 0.0, ref / np.where(got > 0.0, got, 1.0), 1.0)
            num = projector.back_project(ratio, None, geom)
            den = projector.back_project(np.ones_like(ratio), None, geom)
            corr[b, 0] = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 1.0)
        x_bar = gk.mul(x_bar, Tensor(corr.astype(x_bar.data.dtype), requires_grad=False))
    return x_bar


def agg(cond: CondFeatures) -> Tensor:
    """Spatial energy map of conditioner features: channel mean of squares."""
    c = cond.features if isinstance(cond, CondFeatures) else cond
    return gk.reduce_mean(gk.mul(c, c), axis=1)


def at_loss(q_t, q_s) -> Tensor:
    """Attention-transfer distance between L2-normalized energy maps.

    Maps are flattened per item; a map with norm <= 1e-12 normalizes to the
    zero vector so two empty maps give 0.  Result is the batch mean, in
    [0, 2].
    """
    if not isinstance(q_t, Tensor):
        q_t = Tensor(np.asarray(q_t), requires_grad=False)
    if not isinstance(q_s, Tensor):
        q_s = Tensor(np.asarray(q_s), requires_grad=False)
    if q_t.data.shape != q_s.data.shape:
        raise ValueError("attention maps must share a shape")
    b = q_t.data.shape[0]
    flat_t = gk.reshape(q_t, (b, -1))
    flat_s = gk.reshape(q_s, (b, -1))

    def normalized(q: Tensor) -> Tensor:
        norm = gk.sqrt(gk.reduce_sum(gk.mul(q, q), axis=1, keepdims=True))
        alive = (norm.data > AT_NORM_FLOOR).astype(q.data.dtype)
        safe = gk.add(norm, Tensor(np.asarray(1.0 - alive, q.data.dtype), requires_grad=False))
        unit = gk.mul(q, gk.reciprocal(safe))
        return gk.mul(unit, Tensor(alive, requires_grad=False))

    diff = gk.sub(normalized(flat_t), normalized(flat_s))
    sq = gk.reduce_sum(gk.mul(diff, diff), axis=1, keepdims=True)
    # sqrt has an infinite slope at 0; route identical maps through sqrt(1) * 0
    # instead so the loss is exactly 0 there with finite gradients
    alive = (sq.data > 0.0).astype(sq.data.dtype)
    shifted = gk.add(sq, Tensor(np.asarray(1.0 - alive, sq.data.dtype), requires_grad=False))
    per_item = gk.mul(gk.sqrt(shifted), Tensor(alive, requires_grad=False))
    return gk.reduce_mean(per_item)


# checkpointing -------------------------------------------------------------


def save_checkpoint(path, model: Padm, schedule_meta: dict, extra: dict | None = None):
    """Single-file checkpoint: parameters + optimizer state + config +
    schedule descriptor."""
    from padm.harness import io

    meta = {
        "kind": "padm-checkpoint",
        "role": model.role,
        "config": model.config.to_dict(),
        "schedule": dict(schedule_meta),
        "step_count": model.store.step_count,
        "dtype": np.dtype(model.dtype).name,
    }
    if extra:
        meta.update(extra)
    io.write_archive(path, model.store.state_tensors(), meta)


def load_checkpoint(path):
    """Rebuild a model (with optimizer state) bitwise from a checkpoint."""
    from padm.harness import io

    tensors, meta = io.read_archive(path)
    if meta.get("kind") != "padm-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    config = PadmConfig.from_dict(meta["config"])
    dtype = np.dtype(meta.get("dtype", "float32"))
    store = init_params(config, meta["role"], seed=0, dtype=dtype)
    store.load_state_tensors(tensors, step_count=int(meta.get("step_count", 0)))
    return Padm(config, meta["role"], store), meta
