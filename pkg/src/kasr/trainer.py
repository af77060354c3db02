"""Alternating degradation/SR training with iterative supervision.

Per minibatch the current SR estimate starts at the ground-truth HR batch.
For each of the N supervision rounds the degradation net is stepped against
its adversarial objective (after a single critic update), then the SR net is
stepped against the reconstruction objective on the freshly degraded batch.
Every round is supervised by the same real LR/HR pair.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import image_ops, nets, objectives
from . import tensor as T
from .dataio import extract_patches
from .image_ops import DegradationSpec, gaussian_kernel
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 1.0

METRICS_HEADER = "epoch,lr,loss_sr,loss_kans,psnr,ssim"


@dataclass
class Toggles:
    """Component switches for ablations."""

    kans: bool = True
    hfso: bool = True
    iterative: bool = True


@dataclass
class TrainConfig:
    scale: int = 2
    omega: float = 0.5
    beta: float = 1.0
    gamma: float = 0.5
    n_modules: int = 2
    lr: float = 1e-4
    batch: int = 8
    epochs: int = 50
    milestones: list | None = None
    lr_decay: float = 0.5
    p: int = 1
    seed: int = 0
    patch_size: int = 48  # HR-side patch; the LR crop is patch_size // scale
    toggles: Toggles = field(default_factory=Toggles)

    def __post_init__(self):
        if self.n_modules < 1:
            raise ContractError(f"n_modules must be >= 1, got {self.n_modules}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.patch_size % self.scale:
            raise ContractError(
                f"patch_size {self.patch_size} not divisible by scale {self.scale}"
            )
        if self.milestones is not None:
            ms = list(self.milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ContractError(f"milestones must be strictly increasing: {ms}")

    def resolved_milestones(self):
        """Explicit milestones, or the default halfway / three-quarter marks."""
        if self.milestones is not None:
            return list(self.milestones)
        ms = sorted({self.epochs // 2, (3 * self.epochs) // 4})
        return [m for m in ms if m > 0]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        toggles = d.pop("toggles", {})
        if isinstance(toggles, dict):
            toggles = Toggles(**toggles)
        return cls(toggles=toggles, **d)


def lr_at(epoch, cfg):
    """Multi-step schedule: decay once per milestone at or before the epoch."""
    passed = sum(1 for m in cfg.resolved_milestones() if m <= epoch)
    return cfg.lr * cfg.lr_decay**passed


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction; skips entirely on non-finite grads.

    Returns True when the parameters were updated.
    """
    if len(params) != len(grads):
        raise ContractError("adam_step: params and grads length mismatch")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}"
            )
    if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
        log.warning("adam_step: non-finite gradient, skipping update")
        return False
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return True


class Adam:
    """Optimizer bound to one network's parameter list."""

    def __init__(self, params):
        self.params = list(params)
        self.state = AdamState.for_params(self.params)
        self.skipped = 0

    def step(self, lr):
        grads = [p.grad for p in self.params]
        if not adam_step(self.params, grads, self.state, lr):
            self.skipped += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# the two alternating steps
# ---------------------------------------------------------------------------

def default_fallback_spec(scale):
    """Classical degradation used in place of the learned net when disabled."""
    sigma = 0.5 * scale
    size = 2 * math.ceil(2 * sigma) + 1
    return DegradationSpec(gaussian_kernel(size, sigma), scale, noise_sigma=0.0)


def kans_step(phi, eta, d, i_input, i_lr, i_hr, cfg, opt_phi=None, opt_d=None,
              fallback_spec=None):
    """One degradation-net update on a minibatch.

    Updates the critic once on the current batch, evaluates the adversarial
    degradation loss with the SR net frozen, and steps only the degradation
    parameters. Returns the loss value and the generated LR batch (detached)
    for the paired SR step. With the component toggled off the parameters are
    untouched and the classical pipeline supplies the LR batch.
    """
    if not cfg.toggles.kans:
        spec = fallback_spec or default_fallback_spec(cfg.scale)
        fake = Tensor(image_ops.degrade_classical(i_input.data, spec).astype(i_input.dtype))
        return 0.0, fake

    fake = phi(i_input)

    # Critic update precedes the degradation step; the generator term below
    # is then evaluated against the freshly updated critic.
    gen_term = None
    if cfg.gamma != 0:
        critic, _ = objectives.loss_disc(d, i_lr, fake)
        d.zero_grad()
        critic.backward()
        if opt_d is not None:
            opt_d.step(cfg.lr)
        gen_term = objectives.generator_term(d, fake)

    sr = eta(fake)
    loss = objectives.loss_kans(fake, i_lr, sr, i_hr, gen_term, cfg)
    value = loss.item()
    if math.isfinite(value):
        phi.zero_grad()
        eta.zero_grad()
        d.zero_grad()
        loss.backward()
        clip_grad_norm(phi.param_tensors(), GRAD_CLIP_NORM)
        if opt_phi is not None:
            opt_phi.step(cfg.lr)
        eta.zero_grad()
        d.zero_grad()
    else:
        log.warning("kans_step: non-finite loss %r, step skipped", value)
    return value, fake.detach()


def sr_step(eta, fake_lr, i_hr, cfg, opt_eta=None):
    """One SR-net update on a degraded batch (treated as constant input).

    Returns the loss value and the SR batch re-evaluated after the update,
    which seeds the next supervision round.
    """
    fake_lr = fake_lr.detach()
    i_sr = eta(fake_lr)
    if cfg.toggles.hfso:
        loss = objectives.loss_sr(i_sr, i_hr, cfg)
    else:
        loss = objectives.loss_rec(i_sr, i_hr, cfg)
    value = loss.item()
    if math.isfinite(value):
        eta.zero_grad()
        loss.backward()
        clip_grad_norm(eta.param_tensors(), GRAD_CLIP_NORM)
        if opt_eta is not None:
            opt_eta.step(cfg.lr)
        eta.zero_grad()
    else:
        log.warning("sr_step: non-finite loss %r, step skipped", value)
    with T.no_grad():
        i_sr_next = eta(fake_lr)
    return value, i_sr_next


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainedArtifacts:
    phi: nets.Network
    eta: nets.Network
    disc: nets.Network
    config: TrainConfig
    metric_rows: list
    step_losses: list = field(default_factory=list)  # (loss_kans, loss_sr) per step
    checkpoint_path: str | None = None
    metrics_path: str | None = None


def _batched(order, batch):
    for start in range(0, len(order), batch):
        yield order[start : start + batch]


def evaluate_sr(eta, pairs, use_ensemble=False):
    """Mean PSNR/SSIM of the SR net over (lr, hr) full-image pairs."""
    def run(lr_arr):
        with T.no_grad():
            return eta(Tensor(lr_arr.astype(np.float32))).data

    psnrs, ssims = [], []
    for lr_img, hr_img in pairs:
        if use_ensemble:
            out = image_ops.self_ensemble(run, lr_img[None])
        else:
            out = run(lr_img[None])
        out = np.clip(out[0], 0.0, 1.0)
        psnrs.append(image_ops.psnr(out, hr_img))
        ssims.append(image_ops.ssim(out, hr_img))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def train(dataset, cfg, out_dir=None, checkpoint_every=0, step_hook=None):
    """Run the full alternating schedule over the dataset.

    The last tenth of the dataset (fixed order) is held out for per-epoch
    PSNR/SSIM evaluation; everything is deterministic given ``cfg.seed``.
    ``step_hook``, when given, is called after every degradation / SR step
    with a payload dict (used by the verification suites).
    """
    n_total = len(dataset)
    if n_total == 0:
        raise ContractError("train: dataset is empty")
    n_hold = max(1, n_total // 10) if n_total > 1 else 0
    train_items = [dataset[i] for i in range(n_total - n_hold)]
    hold_items = [dataset[i] for i in range(n_total - n_hold, n_total)]
    if not train_items:
        raise ContractError("train: no training pairs left after the held-out split")

    phi = nets.build_kans_net(cfg.scale)
    eta = nets.build_sr_net(cfg.scale)
    disc = nets.build_discriminator()
    nets.init_params(phi, cfg.seed + 11)
    nets.init_params(eta, cfg.seed + 22)
    nets.init_params(disc, cfg.seed + 33)
    opt_phi = Adam(phi.param_tensors())
    opt_eta = Adam(eta.param_tensors())
    opt_d = Adam(disc.param_tensors())

    fallback = None
    if not cfg.toggles.kans:
        spec = getattr(dataset, "degradation_spec", None)
        fallback = replace(spec, noise_sigma=0.0) if spec is not None else None

    lr_patch = cfg.patch_size // cfg.scale
    n_rounds = cfg.n_modules if cfg.toggles.iterative else 1

    metric_rows = []
    step_losses = []
    checkpoint_path = metrics_path = None
    all_nets = [phi, eta, disc]

    def write_outputs(final):
        nonlocal checkpoint_path, metrics_path
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        name = "ckpt_final.kasr" if final else f"ckpt_epoch{epoch:04d}.kasr"
        path = os.path.join(out_dir, name)
        nets.save_checkpoint(all_nets, cfg, path)
        if final:
            checkpoint_path = path
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in metric_rows:
                fh.write(row + "\n")

    epoch = 0
    if cfg.epochs == 0:
        write_outputs(final=True)
        return TrainedArtifacts(phi, eta, disc, cfg, metric_rows, step_losses,
                                checkpoint_path, metrics_path)

    for epoch in range(cfg.epochs):
        lr_now = lr_at(epoch, cfg)
        cfg_epoch = replace(cfg, lr=lr_now, milestones=cfg.resolved_milestones())
        rng = np.random.default_rng([cfg.seed, 1000003, epoch])
        order = rng.permutation(len(train_items))
        loss_sr_hist, loss_kans_hist = [], []
        steps = skipped = 0
        for chunk in _batched(order, cfg.batch):
            lr_batch, hr_batch = [], []
            for idx in chunk:
                lr_img, hr_img = train_items[idx]
                lrp, hrp = extract_patches(
                    lr_img[None], hr_img[None], lr_patch, cfg.scale, rng
                )
                lrp, hrp = image_ops.augment_pair(lrp, hrp, rng)
                lr_batch.append(lrp[0])
                hr_batch.append(hrp[0])
            i_lr = Tensor(np.stack(lr_batch).astype(np.float32))
            i_hr = Tensor(np.stack(hr_batch).astype(np.float32))

            i_sr = i_hr
            step_lk, step_ls = [], []
            for n in range(1, n_rounds + 1):
                lk, fake = kans_step(
                    phi, eta, disc, i_sr, i_lr, i_hr, cfg_epoch,
                    opt_phi, opt_d, fallback_spec=fallback,
                )
                if step_hook is not None:
                    step_hook({"phase": "kans", "epoch": epoch, "n": n,
                               "i_input_shape": i_sr.shape,
                               "fake_lr_shape": fake.shape,
                               "phi": phi, "eta": eta, "disc": disc})
                ls, i_sr = sr_step(eta, fake, i_hr, cfg_epoch, opt_eta)
                if step_hook is not None:
                    step_hook({"phase": "sr", "epoch": epoch, "n": n,
                               "i_input_shape": i_sr.shape,
                               "fake_lr_shape": fake.shape,
                               "phi": phi, "eta": eta, "disc": disc})
                loss_kans_hist.append(lk)
                loss_sr_hist.append(ls)
                step_lk.append(lk)
                step_ls.append(ls)
                steps += 1
                if not (math.isfinite(lk) and math.isfinite(ls)):
                    skipped += 1
            step_losses.append(
                (float(np.mean(step_lk)), float(np.mean(step_ls)))
            )

        if skipped > 0.1 * steps:
            raise RuntimeError(
                f"train: {skipped}/{steps} steps skipped with non-finite losses "
                f"in epoch {epoch}; aborting"
            )

        hold_psnr, hold_ssim = evaluate_sr(eta, hold_items) if hold_items else (0.0, 0.0)
        metric_rows.append(
            f"{epoch},{lr_now:.10g},{float(np.mean(loss_sr_hist)):.10g},"
            f"{float(np.mean(loss_kans_hist)):.10g},{hold_psnr:.6f},{hold_ssim:.6f}"
        )
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            write_outputs(final=False)

    write_outputs(final=True)
    return TrainedArtifacts(phi, eta, disc, cfg, metric_rows, step_losses,
                            checkpoint_path, metrics_path)
