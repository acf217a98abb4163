"""Training loops: teacher regression on the bridge objective, student
distillation against a frozen teacher, deterministic batching, CSV logs.

All randomness in a run flows from one seeded generator consumed in a fixed
order, so (dataset, config, seed) determines every logged number bitwise in
single-threaded mode.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from padm import ConfigMismatch, PadmError, bridge, gradkit as gk, model as mdl, phantom
from padm.gradkit import Tensor, adam_step, no_grad
from padm.harness import io as hio
from padm.harness import metrics as hmetrics
from padm.harness.preprocess import normalize

LOG_COLUMNS = ("epoch", "split", "loss_elbo", "loss_at", "rmse", "ssim", "psnr")
LOSS_WEIGHTINGS = ("algorithm1_unweighted", "elbo_ceps_weighted")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the model configuration is embedded.

    lam is the distillation weight (ignored when training a teacher).
    loss_weighting selects the plain objective from the training algorithm or
    the variant weighted by the per-step noise coefficient.
    """

    model: mdl.PadmConfig = field(default_factory=mdl.PadmConfig)
    timesteps: int = 50
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 40
    lam: float = 0.1
    seed: int = 0
    loss_weighting: str = "algorithm1_unweighted"
    val_steps: int = 8
    val_subset: int = 8
    patience: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.timesteps < 2:
            raise ValueError("need timesteps >= 2")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"unknown loss_weighting {self.loss_weighting!r}")
        if not 2 <= self.val_steps <= self.timesteps:
            raise ValueError("val_steps must lie in [2, timesteps]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = mdl.PadmConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class SlicePair:
    """One training example in normalized units."""

    item_id: str
    y: np.ndarray  # NAC slice, [-1, 1]
    x0: np.ndarray  # AC slice, [-1, 1]
    mu: np.ndarray  # attenuation slice, [0, 1]
    split: str


@dataclass
class Dataset:
    items: list
    manifest: dict
    ac_max: float
    mu_max: float

    def split(self, name: str) -> list:
        return [it for it in self.items if it.split == name]


def load_dataset(data_dir) -> Dataset:
    """Load a generated phantom study and normalize it for training.

    Emission slices map through 2 v / ac_max - 1 with the dataset-global AC
    maximum; attenuation slices map to [0, 1] by their global maximum.
    """
    manifest = phantom.load_manifest(data_dir)
    ac_max = float(manifest["normalization"]["ac_max"])
    mu_max = float(manifest["normalization"]["mu_max"])
    if ac_max <= 0 or mu_max <= 0:
        raise PadmError("degenerate dataset: nonpositive normalization maxima")
    items = []
    for entry in manifest["items"]:
        nac = hio.read_tensor(os.path.join(data_dir, entry["paths"]["nac"]))
        ac = hio.read_tensor(os.path.join(data_dir, entry["paths"]["ac"]))
        mu = hio.read_tensor(os.path.join(data_dir, entry["paths"]["mu"]))
        items.append(
            SlicePair(
                item_id=entry["id"],
                y=normalize(nac, ac_max).astype(np.float32),
                x0=normalize(ac, ac_max).astype(np.float32),
                mu=(mu / mu_max).astype(np.float32),
                split=entry["split"],
            )
        )
    return Dataset(items=items, manifest=manifest, ac_max=ac_max, mu_max=mu_max)


def _stack(items: list, attr: str) -> np.ndarray:
    return np.stack([getattr(it, attr) for it in items])[:, None]


def elbo_loss(m: mdl.Padm, cond, y, x0, t, eps, sched: bridge.Schedule,
              weighting: str = "algorithm1_unweighted"):
    """Bridge regression objective for one batch.

    Literal form of the training algorithm: the L1 distance between
    m_t (y - x0) + sqrt(delta_t) eps and x_t - X_theta(x_t, C, t), averaged
    elementwise.  In unweighted mode this equals mean |X_theta - x0| exactly.
    The weighted variant scales each item by its step's noise coefficient
    c_eps(t).
    """
    m_t = sched.m[t].astype(np.float32)[:, None, None, None]
    root_d = np.sqrt(sched.delta[t]).astype(np.float32)[:, None, None, None]
    x_t = (1.0 - m_t) * x0 + m_t * y + root_d * eps
    target = m_t * (y - x0) + root_d * eps
    pred = m.predict_x0(x_t, cond, y, t)
    resid = gk.sub(Tensor(x_t, requires_grad=False), pred)
    err = gk.absolute(gk.sub(Tensor(target.astype(np.float32), requires_grad=False), resid))
    if weighting == "elbo_ceps_weighted":
        w = sched.c_eps[t].astype(np.float32)[:, None, None, None]
        err = gk.mul(err, Tensor(w, requires_grad=False))
    return gk.reduce_mean(err)


def _lr_at(config: TrainConfig, epoch: int) -> float:
    # step decay: halve every third of the run
    third = max(1, config.epochs // 3)
    return config.lr * (0.5 ** (epoch // third))


def _batches(n: int, batch: int, perm: np.ndarray):
    for start in range(0, n, batch):
        yield perm[start:start + batch]


def _param_checksum(store) -> str:
    h = hashlib.sha256()
    for name in store.names():
        h.update(name.encode())
        h.update(store.params[name].data.tobytes())
    return h.hexdigest()


def ddim_validate(m: mdl.Padm, items: list, sched: bridge.Schedule, steps: int):
    """Deterministic sub-sequenced sampling on a fixed subset; returns mean
    (rmse, ssim, psnr) of the sampled estimates against the clean slices."""
    if not items:
        raise PadmError("empty validation subset")
    y = _stack(items, "y")
    x0 = _stack(items, "x0")
    mu = _stack(items, "mu")
    with no_grad():
        cond = m.cond(y, mu) if m.role == "teacher" else m.cond(y)

        def denoiser(x_t, c, t):
            return m.predict_x0(x_t.astype(np.float32), c, y, np.full(len(items), t)).data

        est, _ = bridge.sample(denoiser, y, cond, sched, steps=steps)
    rows = [
        (hmetrics.rmse(e[0], g[0]), hmetrics.ssim(e[0], g[0]), hmetrics.psnr(e[0], g[0]))
        for e, g in zip(est, x0)
    ]
    arr = np.array(rows, dtype=np.float64)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean())


class _RunLog:
    """CSV trace writer with full-precision floats."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    def add(self, epoch, split, loss_elbo="", loss_at="", rmse="", ssim="", psnr=""):
        fmt = lambda v: v if isinstance(v, str) else f"{v:.17g}"
        row = (epoch, split, fmt(loss_elbo), fmt(loss_at), fmt(rmse), fmt(ssim), fmt(psnr))
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def _snapshot(store) -> dict:
    return {name: p.data.copy() for name, p in store.params.items()}


def _restore(store, snap: dict):
    for name, arr in snap.items():
        store.params[name].data[:] = arr


def _train_loop(m: mdl.Padm, config: TrainConfig, dataset: Dataset, out_dir,
                teacher_q=None):
    """Shared optimization loop.  teacher_q is None for teacher training;
    for distillation it maps item index -> precomputed teacher energy map."""
    os.makedirs(out_dir, exist_ok=True)
    sched = bridge.build_schedule(config.timesteps)
    train_items = dataset.split("train")
    val_items = dataset.split("val")[: config.val_subset]
    if not train_items or not val_items:
        raise PadmError("dataset must provide train and val splits")
    rng = np.random.default_rng(config.seed)
    log = _RunLog(os.path.join(out_dir, "trace.csv"))
    ckpt_path = os.path.join(out_dir, "checkpoint.padc")
    sched_meta = {"T": config.timesteps, "s_max": 1.0}
    best = (math.inf, -1)
    best_params = None
    distilling = teacher_q is not None
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        perm = rng.permutation(len(train_items))
        elbo_sum = at_sum = 0.0
        n_batches = 0
        for idx in _batches(len(train_items), config.batch, perm):
            batch = [train_items[i] for i in idx]
            y = _stack(batch, "y")
            x0 = _stack(batch, "x0")
            t = rng.integers(1, config.timesteps + 1, size=len(batch))
            eps = rng.standard_normal(y.shape).astype(np.float32)
            cond = m.cond(y, _stack(batch, "mu")) if m.role == "teacher" else m.cond(y)
            loss = elbo_loss(m, cond, y, x0, t, eps, sched, config.loss_weighting)
            elbo_sum += loss.item()
            if distilling and config.lam > 0.0:
                q_t = np.stack([teacher_q[i] for i in idx])
                l_at = mdl.at_loss(Tensor(q_t, requires_grad=False), mdl.agg(cond))
                at_sum += l_at.item()
                loss = gk.add(loss, gk.mul(l_at, config.lam))
            elif distilling:
                with no_grad():
                    q_t = np.stack([teacher_q[i] for i in idx])
                    at_sum += mdl.at_loss(Tensor(q_t, requires_grad=False), mdl.agg(cond)).item()
            if not np.isfinite(loss.item()):
                raise PadmError("non-finite training loss")
            m.store.zero_grad()
            loss.backward()
            adam_step(m.store, lr)
            n_batches += 1
        tr_kwargs = {"loss_elbo": elbo_sum / n_batches}
        if distilling:
            tr_kwargs["loss_at"] = at_sum / n_batches
        log.add(epoch, "train", **tr_kwargs)
        v_rmse, v_ssim, v_psnr = ddim_validate(m, val_items, sched, config.val_steps)
        log.add(epoch, "val", rmse=v_rmse, ssim=v_ssim, psnr=v_psnr)
        mdl.save_checkpoint(ckpt_path, m, sched_meta, extra={"epoch": epoch, "seed": config.seed})
        if v_rmse < best[0]:
            best = (v_rmse, epoch)
            best_params = _snapshot(m.store)
        elif epoch - best[1] >= config.patience:
            break
    if best_params is not None:
        _restore(m.store, best_params)
    mdl.save_checkpoint(ckpt_path, m, sched_meta, extra={"epoch": best[1], "best_val_rmse": best[0], "seed": config.seed})
    return m, log.rows


def train_teacher(dataset: Dataset, config: TrainConfig, out_dir):
    """Fit the attenuation-conditioned model from scratch; returns the model
    with best-validation parameters and the logged trace rows."""
    m = mdl.Padm.create(config.model, "teacher", seed=config.seed)
    return _train_loop(m, config, dataset, out_dir)


def _teacher_energy_maps(teacher: mdl.Padm, items: list, batch: int) -> list:
    """Frozen-teacher conditioner energies, precomputed once per slice."""
    maps = [None] * len(items)
    with no_grad():
        for start in range(0, len(items), batch):
            chunk = items[start:start + batch]
            cond = teacher.cond(_stack(chunk, "y"), _stack(chunk, "mu"))
            q = mdl.agg(cond).data
            for k in range(len(chunk)):
                maps[start + k] = q[k]
    return maps


def distill_student(teacher: mdl.Padm, teacher_sched: dict, dataset: Dataset,
                    config: TrainConfig, out_dir):
    """Optimize a NAC-only student against the frozen teacher.

    The loss is the bridge objective plus lam times the attention-transfer
    distance between conditioner energy maps.  The teacher is never touched:
    its energies are precomputed outside the graph and its parameters carry
    no optimizer state here.
    """
    if teacher.role != "teacher":
        raise ConfigMismatch("distillation needs a teacher checkpoint")
    if teacher.config != config.model:
        raise ConfigMismatch(
            f"teacher config {teacher.config} does not match distillation config {config.model}"
        )
    if int(teacher_sched.get("T", -1)) != config.timesteps:
        raise ConfigMismatch(
            f"teacher trained at T={teacher_sched.get('T')} but distillation uses T={config.timesteps}"
        )
    before = _param_checksum(teacher.store)
    q_maps = _teacher_energy_maps(teacher, dataset.split("train"), config.batch)
    student = mdl.Padm.create(config.model, "student", seed=config.seed + 1)
    student, rows = _train_loop(student, config, dataset, out_dir, teacher_q=q_maps)
    if _param_checksum(teacher.store) != before:
        raise PadmError("frozen-teacher contract violated")
    return student, rows


def evaluate_model(m: mdl.Padm, items: list, timesteps: int, steps: int):
    """Sub-sequenced sampling over a split; returns a MetricsReport."""
    sched = bridge.build_schedule(timesteps)
    preds = predict_slices(m, items, sched, steps)
    return hmetrics.MetricsReport.compute(
        [p[0] for p in preds], [it.x0 for it in items], ids=[it.item_id for it in items]
    )


def predict_slices(m: mdl.Padm, items: list, sched: bridge.Schedule, steps: int) -> np.ndarray:
    """Deterministic sampled estimates for a list of slices, (n, 1, H, W)."""
    y = _stack(items, "y")
    mu = _stack(items, "mu")
    with no_grad():
        cond = m.cond(y, mu) if m.role == "teacher" else m.cond(y)

        def denoiser(x_t, c, t):
            return m.predict_x0(x_t.astype(np.float32), c, y, np.full(len(items), t)).data

        est, _ = bridge.sample(denoiser, y, cond, sched, steps=steps)
    return est
