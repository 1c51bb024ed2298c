"""Convolutional variational autoencoder for fixed-length waveform windows."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .nn import (
    AdamState,
    Dense,
    GradCheckReport,
    LayerSpec,
    Sequential,
    ShapeError,
    adam_step,
    build_sequential,
    grad_check,
)

log = logging.getLogger(__name__)

LATENT_SWEEP = (2, 3, 4, 5, 10, 20, 50, 100)
POOL = 5


class NumericalError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeArchitecture:
    input_length: int
    latent_dim: int
    encoder_layers: tuple[LayerSpec, ...]
    decoder_layers: tuple[LayerSpec, ...]
    encoder_parameters: int
    decoder_parameters: int

    @property
    def parameter_count(self) -> int:
        return self.encoder_parameters + self.decoder_parameters

    def to_dict(self) -> dict:
        return {"input_length": self.input_length, "latent_dim": self.latent_dim}


@dataclass
class LatentGaussian:
    mu: np.ndarray
    log_var: np.ndarray


@dataclass
class TrainHyper:
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3


def layer_tables(latent_dim: int, input_length: int) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Encoder trunk (up to the flattened features) and decoder layer lists."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    if input_length < POOL * POOL:
        raise ShapeError(f"input_length {input_length} too short for two pool-{POOL} stages")
    l1 = -(-input_length // POOL)
    l2 = -(-l1 // POOL)
    encoder = [
        LayerSpec("conv1d", filters=16, kernel_size=5, activation="relu"),
        LayerSpec("maxpool1d", pool_size=POOL),
        LayerSpec("conv1d", filters=32, kernel_size=5, activation="relu"),
        LayerSpec("maxpool1d", pool_size=POOL),
        LayerSpec("conv1d", filters=32, kernel_size=3, activation="relu"),
        LayerSpec("dropout", rate=0.1),
        LayerSpec("reshape", target_shape=(l2 * 32,)),
    ]
    decoder = [
        LayerSpec("dense", units=l2 * 32, activation="relu"),
        LayerSpec("reshape", target_shape=(l2, 32)),
        LayerSpec("conv1d", filters=32, kernel_size=3, activation="relu"),
        LayerSpec("upsample1d_crop", pool_size=POOL, target_shape=(l1,)),
        LayerSpec("conv1d", filters=16, kernel_size=5, activation="relu"),
        LayerSpec("upsample1d_crop", pool_size=POOL, target_shape=(input_length,)),
        LayerSpec("conv1d", filters=1, kernel_size=5, activation="linear"),
    ]
    return encoder, decoder


class VaeModel:
    """Encoder trunk + (mu, log-variance) heads + decoder, all float64."""

    def __init__(self, latent_dim: int, input_length: int = 1250):
        enc_specs, dec_specs = layer_tables(latent_dim, input_length)
        self.encoder, feat_shape = build_sequential(enc_specs, (input_length, 1))
        self.encoder.layers[0].input_grad = False  # the data needs no gradient
        (n_feat,) = feat_shape
        self.mu_head = Dense(n_feat, latent_dim)
        self.logvar_head = Dense(n_feat, latent_dim)
        self.decoder, out_shape = build_sequential(dec_specs, (latent_dim,))
        if out_shape != (input_length, 1):
            raise ShapeError(f"decoder output {out_shape} does not match input length {input_length}")
        enc_count = self.encoder.parameter_count() + sum(
            p.size for h in (self.mu_head, self.logvar_head) for p in h.params.values())
        self.arch = VaeArchitecture(input_length, latent_dim, tuple(enc_specs), tuple(dec_specs),
                                    enc_count, self.decoder.parameter_count())
        self.training_meta: dict = {}
        self.standardizer: tuple[float, float] | None = None
        self.thresholds: dict | None = None

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    @property
    def input_length(self) -> int:
        return self.arch.input_length

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_params().items()}
        out.update({f"mu.{k}": v for k, v in self.mu_head.params.items()})
        out.update({f"logvar.{k}": v for k, v in self.logvar_head.params.items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_params().items()})
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_grads().items()}
        out.update({f"mu.{k}": v for k, v in self.mu_head.grads.items()})
        out.update({f"logvar.{k}": v for k, v in self.logvar_head.grads.items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_grads().items()})
        return out

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        groups: dict[str, dict[str, np.ndarray]] = {"encoder": {}, "mu": {}, "logvar": {}, "decoder": {}}
        for name, value in params.items():
            head, rest = name.split(".", 1)
            if head not in groups:
                raise ShapeError(f"unknown parameter {name!r}")
            groups[head][rest] = np.asarray(value, dtype=np.float64)
        expected = self.parameters()
        if set(expected) != set(params):
            raise ShapeError("parameter names do not match the architecture")
        for name, value in params.items():
            if expected[name].shape != np.shape(value):
                raise ShapeError(f"{name}: expected shape {expected[name].shape}, got {np.shape(value)}")
        self.encoder.set_params(groups["encoder"])
        self.decoder.set_params(groups["decoder"])
        for head, layer in (("mu", self.mu_head), ("logvar", self.logvar_head)):
            layer.params = dict(groups[head])

    def pattern(self) -> bytes:
        return self.encoder.pattern() + b"#" + self.decoder.pattern()

    # -- passes -------------------------------------------------------------

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_length:
            raise ShapeError(f"expected windows of length {self.input_length}, got {x.shape[-1]}")
        return x

    def _encode(self, x2d: np.ndarray, training: bool, rng) -> tuple[np.ndarray, np.ndarray]:
        h = self.encoder.forward(x2d[:, :, None], training=training, rng=rng)
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def _decode(self, z2d: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        return self.decoder.forward(z2d, training=training, rng=rng)[:, :, 0]

    def loss_and_backward(self, x2d: np.ndarray, eps: np.ndarray, training: bool = False, rng=None,
                          backward: bool = True) -> tuple[float, float, float]:
        """Mean per-sample ELBO loss over a batch with fixed noise ``eps``; fills gradients."""
        h = self.encoder.forward(x2d[:, :, None], training=training, rng=rng)
        return self._loss_from_features(h, x2d, eps, training, rng, backward)

    def _loss_from_features(self, h: np.ndarray, x2d: np.ndarray, eps: np.ndarray, training: bool = False,
                            rng=None, backward: bool = False) -> tuple[float, float, float]:
        """The loss downstream of the encoder trunk output ``h``."""
        batch = x2d.shape[0]
        mu, lv = self.mu_head.forward(h), self.logvar_head.forward(h)
        sd = np.exp(0.5 * lv)
        z = mu + sd * eps
        xr = self._decode(z, training, rng)
        resid = xr - x2d
        recon = 0.5 * float(np.sum(resid * resid)) / batch
        kl = 0.5 * float(np.sum(mu * mu + np.exp(lv) - 1.0 - lv)) / batch
        if backward:
            gz = self.decoder.backward((resid / batch)[:, :, None])
            gmu = gz + mu / batch
            glv = gz * 0.5 * sd * eps + 0.5 * (np.exp(lv) - 1.0) / batch
            gh = self.mu_head.backward(gmu) + self.logvar_head.backward(glv)
            self.encoder.backward(gh)
        return recon + kl, recon, kl

    def _loss_terms(self, h: np.ndarray, x2d: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Per-element summands of the inference-mode loss (they add up to it)."""
        batch = x2d.shape[0]
        mu, lv = self.mu_head.forward(h), self.logvar_head.forward(h)
        xr = self._decode(mu + np.exp(0.5 * lv) * eps)
        resid = xr - x2d
        kl = mu * mu + np.exp(lv) - 1.0 - lv
        return np.concatenate([(0.5 / batch) * (resid * resid).ravel(), (0.5 / batch) * kl.ravel()])

    def reconstruct(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """decode(encode(x).mu) for one window or a stack of windows."""
        x = self._check_x(x)
        single = x.ndim == 1
        x2d = x[None] if single else x
        out = np.empty_like(x2d)
        for i in range(0, len(x2d), batch_size):
            mu, _ = self._encode(x2d[i:i + batch_size], False, None)
            out[i:i + batch_size] = self._decode(mu)
        return out[0] if single else out

    __call__ = reconstruct


# ---------------------------------------------------------------------------
# public operations


def build_model(latent_dim: int, input_length: int = 1250, seed: int = 0) -> VaeModel:
    """Fixed architecture, Glorot-uniform weights and zero biases, deterministic per seed."""
    model = VaeModel(latent_dim, input_length)
    rng = np.random.default_rng(seed)
    model.encoder.init(rng)
    model.mu_head.init(rng)
    model.logvar_head.init(rng)
    model.decoder.init(rng)
    return model


def encode(model: VaeModel, x: np.ndarray) -> LatentGaussian:
    x = model._check_x(x)
    single = x.ndim == 1
    mu, lv = model._encode(x[None] if single else x, False, None)
    return LatentGaussian(mu[0], lv[0]) if single else LatentGaussian(mu, lv)


def reparameterize(g: LatentGaussian, seed=None, eps: np.ndarray | None = None) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) unless supplied."""
    if eps is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        eps = rng.standard_normal(np.shape(g.mu))
    return g.mu + np.exp(0.5 * g.log_var) * eps


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise ShapeError(f"expected latent vectors of length {model.latent_dim}, got {z.shape[-1]}")
    single = z.ndim == 1
    out = model._decode(z[None] if single else z)
    return out[0] if single else out


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    return 0.5 * float(np.sum(mu * mu + np.exp(log_var) - 1.0 - log_var))


def elbo_loss(model: VaeModel, x: np.ndarray, seed=None, eps: np.ndarray | None = None) -> tuple[float, float, float]:
    """Single-sample negative ELBO for one window: (loss, recon_term, kl_term)."""
    x = model._check_x(x)
    x2d = x[None] if x.ndim == 1 else x
    if eps is None:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((x2d.shape[0], model.latent_dim))
    eps = np.asarray(eps, dtype=np.float64).reshape(x2d.shape[0], model.latent_dim)
    loss, recon, kl = model.loss_and_backward(x2d, eps, backward=False)
    if not math.isfinite(loss):
        mu, lv = model._encode(x2d, False, None)
        raise NumericalError(
            f"non-finite ELBO (recon={recon}, kl={kl}, max|mu|={np.max(np.abs(mu)):.3g}, "
            f"log_var range=[{np.min(lv):.3g}, {np.max(lv):.3g}])")
    return loss, recon, kl


def validation_loss(model: VaeModel, x2d: np.ndarray, batch_size: int = 256) -> float:
    """Mean noise-free loss (eps = 0, dropout off)."""
    total = 0.0
    for i in range(0, len(x2d), batch_size):
        xb = x2d[i:i + batch_size]
        loss, _, _ = model.loss_and_backward(xb, np.zeros((len(xb), model.latent_dim)), backward=False)
        total += loss * len(xb)
    return total / len(x2d)


def vae_grad_check(model: VaeModel, x: np.ndarray, eps: np.ndarray | None = None, tolerance: float = 1e-4,
                   h: float = 1e-4, max_coords: int | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Finite-difference check of the full ELBO gradient (dropout off, eps fixed)."""
    x2d = np.atleast_2d(model._check_x(x))
    if eps is None:
        eps = np.random.default_rng(0).standard_normal((x2d.shape[0], model.latent_dim))
    model.loss_and_backward(x2d, eps)
    analytic = {k: v.copy() for k, v in model.gradients().items()}
    params = model.parameters()
    trunk = {k: v for k, v in params.items() if k.startswith("encoder.")}
    rest = {k: v for k, v in params.items() if not k.startswith("encoder.")}
    n_trunk = sum(v.size for v in trunk.values())
    n_rest = sum(v.size for v in rest.values())
    quota_trunk = quota_rest = None
    if max_coords is not None:
        quota_trunk = max(1, round(max_coords * n_trunk / (n_trunk + n_rest)))
        quota_rest = max(1, max_coords - quota_trunk)

    # loss terms rather than the scalar total, see grad_check
    def full_loss() -> np.ndarray:
        return model._loss_terms(model.encoder.forward(x2d[:, :, None]), x2d, eps)

    first = grad_check(full_loss, trunk, analytic, tolerance=tolerance, h=h,
                       pattern=model.pattern, max_coords=quota_trunk, floor=floor)
    # heads and decoder do not touch the trunk, so its output is computed once
    features = model.encoder.forward(x2d[:, :, None])

    def head_loss() -> np.ndarray:
        return model._loss_terms(features, x2d, eps)

    second = grad_check(head_loss, rest, analytic, tolerance=tolerance, h=h,
                        pattern=model.decoder.pattern, max_coords=quota_rest, floor=floor)
    return GradCheckReport.merge(first, second)


def _train_restart(x_train, x_val, latent_dim, hyper: TrainHyper, seed: int):
    model = build_model(latent_dim, x_train.shape[1], seed)
    rng = np.random.default_rng([seed, 1])
    state = AdamState(lr=hyper.lr)
    init_val = validation_loss(model, x_val)
    best_val, best_params, best_epoch = init_val, {k: v.copy() for k, v in model.parameters().items()}, 0
    train_loss = float("nan")
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(x_train))
        total = 0.0
        for i in range(0, len(order), hyper.batch_size):
            xb = x_train[order[i:i + hyper.batch_size]]
            eps = rng.standard_normal((len(xb), latent_dim))
            loss, _, _ = model.loss_and_backward(xb, eps, training=True, rng=rng)
            if not math.isfinite(loss):
                return None, {"seed": seed, "diverged_epoch": epoch, "initial_val_loss": init_val}
            new, state = adam_step(model.parameters(), model.gradients(), state)
            model.set_parameters(new)
            total += loss * len(xb)
        train_loss = total / len(order)
        val = validation_loss(model, x_val)
        if not math.isfinite(val):
            return None, {"seed": seed, "diverged_epoch": epoch, "initial_val_loss": init_val}
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_params = {k: v.copy() for k, v in model.parameters().items()}
        log.debug("seed %d epoch %d train %.4f val %.4f", seed, epoch, train_loss, val)
    model.set_parameters(best_params)
    return model, {"seed": seed, "best_epoch": best_epoch, "val_loss": best_val,
                   "final_train_loss": train_loss, "initial_val_loss": init_val}


def _as_matrix(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return np.asarray(windows, dtype=np.float64)
    return np.stack([np.asarray(getattr(w, "values", w), dtype=np.float64) for w in windows])


def train(bundle, latent_dim: int, hyper: TrainHyper | None = None, seeds=(0, 1, 2, 3, 4)) -> VaeModel:
    """Train one model per seed and keep the one with the lowest validation loss."""
    hyper = hyper or TrainHyper()
    x_train = _as_matrix(bundle.train)
    x_val = _as_matrix(bundle.validation) if len(bundle.validation) else x_train
    if len(x_train) == 0:
        raise ValueError("empty training set")
    restarts = []
    best = None
    for index, seed in enumerate(seeds):
        t0 = time.perf_counter()
        model, meta = _train_restart(x_train, x_val, latent_dim, hyper, int(seed))
        meta["restart"] = index
        meta["seconds"] = round(time.perf_counter() - t0, 3)
        restarts.append(meta)
        if model is None:
            log.warning("restart %d (seed %d) diverged", index, seed)
            continue
        log.info("Ld=%d restart %d: val loss %.4f (epoch %d)", latent_dim, index, meta["val_loss"], meta["best_epoch"])
        if best is None or meta["val_loss"] < best[1]["val_loss"]:
            best = (model, meta)
    if best is None:
        raise TrainingError("all training restarts diverged")
    model, meta = best
    model.training_meta = {
        "seed": meta["seed"],
        "restart": meta["restart"],
        "epochs": hyper.epochs,
        "hyper": asdict(hyper),
        "val_loss": meta["val_loss"],
        "final_train_loss": meta["final_train_loss"],
        "restarts": restarts,
    }
    standardizer = getattr(bundle, "standardizer", None)
    if standardizer is not None:
        model.standardizer = tuple(float(v) for v in standardizer)
    return model


def generate(model: VaeModel, count: int, seed=None) -> np.ndarray:
    """Sample z ~ N(0, I) and decode; returns ``[count, input_length]``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, model.latent_dim))
    return decode(model, z) if count else np.empty((0, model.input_length))


def save_model(model: VaeModel, path) -> None:
    meta = {
        "architecture": model.arch.to_dict(),
        "standardizer": list(model.standardizer) if model.standardizer is not None else None,
        "training_meta": model.training_meta,
        "thresholds": model.thresholds,
    }
    container.save(path, "vae", meta, model.parameters())


def load_model(path) -> VaeModel:
    kind, meta, tensors = container.load(path)
    if kind != "vae":
        raise container.LoadError(f"expected a vae container, found {kind!r}")
    arch = meta["architecture"]
    model = VaeModel(int(arch["latent_dim"]), int(arch["input_length"]))
    try:
        model.set_parameters(tensors)
    except ShapeError as exc:
        raise container.ShapeConsistencyError(str(exc)) from exc
    model.training_meta = meta.get("training_meta") or {}
    if meta.get("standardizer") is not None:
        model.standardizer = tuple(meta["standardizer"])
    model.thresholds = meta.get("thresholds")
    return model
