"""Pixel-space diffusion stack hosting the adapter.

Standard eps-prediction objective: L = || eps - eps_theta(z_t, t, c_c, c_t) ||^2
with z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Sampling is a
deterministic DDIM walk over an evenly spaced timestep subsequence.
"""

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .adapter import AdapterAssembly, project_fusion_weights, trainable_parameters


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.T,):
            raise ValueError(f"betas must have shape ({self.T},)")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0,1)")
        self.alphas_bar = np.cumprod(1.0 - self.betas)

    @classmethod
    def linear(cls, T=200, beta_start=1e-4, beta_end=8e-2):
        # beta_end is sized so alphas_bar[-1] ~ 3e-4: sampling starts from
        # N(0,1), so the forward process must actually end near zero SNR
        return cls(T=T, betas=np.linspace(beta_start, beta_end, T))


def add_noise(z0, eps, t, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps; t may be int or [B] tensor."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 0) or torch.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0,{sched.T}): {t}")
    abar = torch.from_numpy(sched.alphas_bar).to(z0.dtype)[t]
    while abar.ndim < z0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


class HashTextEmbedder:
    """Deterministic bag-of-hashed-tokens embedding; stands in for a learned
    text encoder. Same string -> same vector, token order irrelevant."""

    def __init__(self, dim=64, vocab_size=4096, seed=9):
        self.dim = dim
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        self.table = (rng.standard_normal((vocab_size, dim)) / np.sqrt(dim)).astype(np.float32)

    def token_index(self, token):
        digest = hashlib.sha1(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % self.vocab_size

    def embed(self, text):
        tokens = [t for t in "".join(
            c if c.isalnum() else " " for c in text.lower()).split() if t]
        if not tokens:
            warnings.warn("embedding empty instruction -> zero vector")
            return np.zeros(self.dim, dtype=np.float32)
        rows = self.table[[self.token_index(t) for t in tokens]]
        return rows.mean(axis=0)

    def embed_batch(self, texts):
        return np.stack([self.embed(t) for t in texts])


@dataclass
class TrainBatch:
    z0: torch.Tensor          # targets in [-1,1], [B,C,H,W]
    control: torch.Tensor     # conditioning images, [B,C,H,W]
    text_cond: torch.Tensor   # [B,D]
    t: torch.Tensor           # [B] int64 in [0,T)
    eps: torch.Tensor         # [B,C,H,W] unit Gaussian

    def __post_init__(self):
        if self.z0.shape != self.eps.shape:
            raise ValueError("z0/eps shapes differ")
        if self.t.shape[0] != self.z0.shape[0]:
            raise ValueError("t batch dim mismatch")


def training_step(asm: AdapterAssembly, batch: TrainBatch, sched: NoiseSchedule,
                  optimizer) -> float:
    """One objective evaluation + update of the trainable parameters only."""
    z_t = add_noise(batch.z0, batch.eps, batch.t, sched)
    eps_pred = asm(z_t, batch.t, batch.control, batch.text_cond)
    loss = torch.nn.functional.mse_loss(eps_pred, batch.eps)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at t={batch.t.tolist()}; check lr/schedule")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    project_fusion_weights(asm)
    return float(loss.detach())


def make_optimizer(asm, lr=1e-3, fusion_weight_lr_scale=10.0):
    """Adam over the trainable set; fusion scalars get a higher lr so the
    zero-initialized gates engage within a short desk-scale budget."""
    wparams = [blk.w_raw for blk in asm.fusion if blk.mode == "volterra"]
    wids = {id(p) for p in wparams}
    rest = [p for p in trainable_parameters(asm) if id(p) not in wids]
    groups = [{"params": rest, "lr": lr}]
    if wparams:
        groups.append({"params": wparams, "lr": lr * fusion_weight_lr_scale})
    return torch.optim.Adam(groups)


def train_adapter(asm, sources, targets, text_embs, sched, steps, batch_size=8,
                  lr=1e-3, seed=0, log_path=None):
    """Seeded training loop over in-memory tensors; logs `step,loss` CSV."""
    gen = torch.Generator().manual_seed(seed)
    opt = make_optimizer(asm, lr=lr)
    n = sources.shape[0]
    losses = []
    log = open(log_path, "w") if log_path else None
    try:
        if log:
            log.write("step,loss\n")
        for step in range(steps):
            idx = torch.randint(0, n, (batch_size,), generator=gen)
            t = torch.randint(0, sched.T, (batch_size,), generator=gen)
            eps = torch.randn(
                (batch_size, *targets.shape[1:]), generator=gen, dtype=targets.dtype)
            batch = TrainBatch(z0=targets[idx], control=sources[idx],
                               text_cond=text_embs[idx], t=t, eps=eps)
            loss = training_step(asm, batch, sched, opt)
            losses.append(loss)
            if log:
                log.write(f"{step},{loss:.6f}\n")
    finally:
        if log:
            log.close()
    return losses


def pretrain_base(base, targets, sched, steps, batch_size=8, lr=1e-3, seed=0,
                  text_embs=None):
    """Denoising pretraining of the base model (text-conditioned when
    embeddings are given, control-free always); the assembly constructor
    freezes it afterwards."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(base.parameters(), lr=lr)
    n = targets.shape[0]
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        t = torch.randint(0, sched.T, (batch_size,), generator=gen)
        eps = torch.randn((batch_size, *targets.shape[1:]), generator=gen,
                          dtype=targets.dtype)
        z_t = add_noise(targets[idx], eps, t, sched)
        text = text_embs[idx] if text_embs is not None else None
        loss = torch.nn.functional.mse_loss(base(z_t, t, text), eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite loss during base pretraining")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


@torch.no_grad()
def ddim_sample(model_fn, shape, sched: NoiseSchedule, steps, seed):
    """Deterministic (eta=0) DDIM sampler; output clamped to [-1,1]."""
    if steps > sched.T:
        raise ValueError(f"steps={steps} exceeds schedule T={sched.T}")
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen)
    ts = np.linspace(sched.T - 1, 0, steps).round().astype(int)
    abar = sched.alphas_bar
    for i, t in enumerate(ts):
        tb = torch.full((shape[0],), int(t), dtype=torch.long)
        eps = model_fn(x, tb)
        a_t = float(abar[t])
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        x0 = x0.clamp(-1.0, 1.0)
        a_prev = float(abar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
    return x.clamp(-1.0, 1.0)


def sample(asm, control, text_emb, sched, steps, seed):
    """Adapter-conditioned deterministic sampling."""
    def fn(x, tb):
        return asm(x, tb, control, text_emb)
    shape = (control.shape[0], asm.base.in_ch, *control.shape[-2:])
    return ddim_sample(fn, shape, sched, steps, seed)


def sample_base(base, shape, sched, steps, seed):
    """Unconditioned sampling from the frozen base model."""
    return ddim_sample(lambda x, tb: base(x, tb), shape, sched, steps, seed)
