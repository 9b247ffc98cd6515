"""Bidirectional base<->control feature exchange around a frozen U-Net.

Two fusion modes per exchange point:

  linear:   x_b = F_b + Z_bc(F_c)            x_c = F_c + Z_cb(F_b)
  volterra: x_b = (1-w) F_b + w V_bc([F_b,F_c])
            x_c = (1-w) F_c + w V_cb([F_c,F_b])

Z_* are zero-initialized 1x1 convolutions, V_* zero-initialized Volterra
bridges, w a learnable per-block scalar clamped to [0,1] (0 at init). Both
modes are exact identities on the frozen base at construction. Fusions of a
block consume the pre-fusion outputs of both streams of that same block.
"""

import hashlib
import io
import json

import numpy as np
import torch
import torch.nn as nn

from .unet import EncoderStage, ToyUNet, stage_channels
from .volterra import VolterraLayer

CHECKPOINT_SCHEMA = 1


class ZeroConv(nn.Module):
    """1x1 convolution with an exactly-zero kernel at construction."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.kernel = nn.Parameter(torch.zeros(c_out, c_in, 1, 1))

    def forward(self, x):
        if x.shape[1] != self.kernel.shape[1]:
            raise ValueError(
                f"zero-conv expects {self.kernel.shape[1]} channels, got {x.shape[1]}")
        return nn.functional.conv2d(x, self.kernel)


def _volterra_bridge(c_in, c_out, rank_q, kernel_size, cascade):
    """Cascade of Volterra layers; only the last is zero-initialized so the
    bridge output is zero at construction while gradients still reach it."""
    layers = []
    for i in range(cascade):
        last = i == cascade - 1
        layers.append(VolterraLayer(
            c_in if i == 0 else c_out, c_out, kernel_size, rank_q, zero_init=last))
    return layers[0] if cascade == 1 else nn.Sequential(*layers)


class FusionBlock(nn.Module):
    def __init__(self, c_base, c_control, mode, rank_q=2, kernel_size=3, cascade=1):
        super().__init__()
        if mode not in ("linear", "volterra"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.c_base = c_base
        self.c_control = c_control
        if mode == "volterra":
            self.bridge_bc = _volterra_bridge(
                c_base + c_control, c_base, rank_q, kernel_size, cascade)
            self.bridge_cb = _volterra_bridge(
                c_control + c_base, c_control, rank_q, kernel_size, cascade)
            self.w_raw = nn.Parameter(torch.zeros(()))
        else:
            self.bridge_bc = ZeroConv(c_control, c_base)
            self.bridge_cb = ZeroConv(c_base, c_control)

    @property
    def fusion_weight(self):
        return self.w_raw.clamp(0.0, 1.0)

    def forward(self, fb_out, fc_out):
        return fuse_into_base(fb_out, fc_out, self), fuse_into_control(fc_out, fb_out, self)


def _check_pair(dst, src, blk, dst_c, src_c, what):
    if dst.shape[1] != dst_c:
        raise ValueError(f"{what}: stream has {dst.shape[1]} channels, block expects {dst_c}")
    if src.shape[1] != src_c:
        raise ValueError(f"{what}: opposite stream has {src.shape[1]} channels, expects {src_c}")
    if dst.shape[2:] != src.shape[2:]:
        raise ValueError(f"{what}: spatial dims differ, {tuple(dst.shape[2:])} vs "
                         f"{tuple(src.shape[2:])}")


def fuse_into_base(fb_out, fc_out, blk):
    _check_pair(fb_out, fc_out, blk, blk.c_base, blk.c_control, "fuse_into_base")
    if blk.mode == "volterra":
        w = blk.fusion_weight
        return (1.0 - w) * fb_out + w * blk.bridge_bc(torch.cat([fb_out, fc_out], dim=1))
    return fb_out + blk.bridge_bc(fc_out)


def fuse_into_control(fc_out, fb_out, blk):
    _check_pair(fc_out, fb_out, blk, blk.c_control, blk.c_base, "fuse_into_control")
    if blk.mode == "volterra":
        w = blk.fusion_weight
        return (1.0 - w) * fc_out + w * blk.bridge_cb(torch.cat([fc_out, fb_out], dim=1))
    return fc_out + blk.bridge_cb(fb_out)


class ControlEmbedder(nn.Module):
    """Maps the control image (source image or canny map) to the control
    stream input; two convolutions, stride 1 at pixel-space desk scale.
    The noisy latent is added through its own projection so the control
    stream can form noise-prediction features from the control content."""

    def __init__(self, in_ch, c_out, latent_ch=None, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1)
        self.latent = nn.Conv2d(latent_ch or in_ch, c_out, 3, stride=stride, padding=1)

    def forward(self, x, z_t=None):
        h = self.conv2(nn.functional.silu(self.conv1(x)))
        if z_t is not None:
            h = h + self.latent(z_t)
        return h


class AdapterAssembly(nn.Module):
    """Frozen base U-Net + trainable control encoder + fusion blocks."""

    def __init__(self, base: ToyUNet, mode="volterra", control_widths=(8, 12, 16),
                 rank_q=2, bridge_kernel=3, cascade=1, control_in_ch=3):
        super().__init__()
        self.mode = mode
        self.rank_q = rank_q
        self.bridge_kernel = bridge_kernel
        self.cascade = cascade
        self.control_widths = tuple(control_widths)
        self.control_in_ch = control_in_ch

        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)

        base_plan = stage_channels(base.widths)
        ctrl_plan = stage_channels(control_widths)
        if len(base_plan) != len(ctrl_plan):
            raise ValueError("stream block counts differ")
        self.embed = ControlEmbedder(control_in_ch, control_widths[0],
                                     latent_ch=base.in_ch)
        self.control = nn.ModuleList(
            EncoderStage(ci, co, base.cond_dim, down) for ci, co, down in ctrl_plan)
        self.fusion = nn.ModuleList(
            FusionBlock(b_out, c_out, mode, rank_q, bridge_kernel, cascade)
            for (_, b_out, _), (_, c_out, _) in zip(base_plan, ctrl_plan))

    def forward(self, z_t, t, control, text_emb=None):
        """Joint forward: both encoders in lockstep, fusing control-side
        first, both fusions reading the pre-fusion block outputs."""
        if control.shape[-2:] != z_t.shape[-2:]:
            raise ValueError(
                f"control spatial size {tuple(control.shape[-2:])} does not match "
                f"input {tuple(z_t.shape[-2:])}")
        state = {"x_c": self.embed(control, z_t)}

        def exchange(i, fb_raw, cond):
            fc_raw = self.control[i](state["x_c"], cond)
            state["x_c"] = fuse_into_control(fc_raw, fb_raw, self.fusion[i])
            return fuse_into_base(fb_raw, fc_raw, self.fusion[i])

        return self.base(z_t, t, text_emb, exchange=exchange)

    def base_forward(self, z_t, t, text_emb=None):
        return self.base(z_t, t, text_emb)


def trainable_parameters(asm, named=False):
    """Theta_c + bridges + fusion weights + control embedder; excludes the
    frozen base entirely."""
    pairs = [(n, p) for n, p in asm.named_parameters()
             if not n.startswith("base.") and p.requires_grad]
    base_ids = {id(p) for p in asm.base.parameters()}
    assert not any(id(p) in base_ids for _, p in pairs)
    return pairs if named else [p for _, p in pairs]


def fusion_weight_parameters(asm):
    return [blk.w_raw for blk in asm.fusion if blk.mode == "volterra"]


def project_fusion_weights(asm):
    """Clamp raw fusion weights back into [0,1] after an optimizer step so
    the boundary never becomes a dead zone for gradients."""
    with torch.no_grad():
        for w in fusion_weight_parameters(asm):
            w.clamp_(0.0, 1.0)


def base_param_hash(module_or_asm):
    """SHA-256 over the frozen base parameters (order-stable)."""
    base = module_or_asm.base if isinstance(module_or_asm, AdapterAssembly) else module_or_asm
    h = hashlib.sha256()
    state = base.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(asm: AdapterAssembly, path):
    """Flat npz archive: every parameter as a named array plus a manifest."""
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "mode": asm.mode,
        "rank_q": asm.rank_q,
        "bridge_kernel": asm.bridge_kernel,
        "cascade": asm.cascade,
        "in_ch": asm.base.in_ch,
        "control_in_ch": asm.control_in_ch,
        "widths": list(asm.base.widths),
        "control_widths": list(asm.control_widths),
        "cond_dim": asm.base.cond_dim,
        "text_dim": asm.base.text_dim,
        "fusion_weights": [float(b.fusion_weight.detach()) for b in asm.fusion
                           if b.mode == "volterra"],
    }
    arrays = {name: tensor.detach().numpy()
              for name, tensor in asm.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __manifest__=np.bytes_(json.dumps(manifest).encode()), **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with np.load(path) as zf:
        manifest = json.loads(bytes(zf["__manifest__"]).decode())
        arrays = {k: zf[k] for k in zf.files if k != "__manifest__"}
    if manifest["schema"] != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest['schema']}")
    base = ToyUNet(in_ch=manifest["in_ch"], widths=tuple(manifest["widths"]),
                   cond_dim=manifest["cond_dim"], text_dim=manifest["text_dim"])
    asm = AdapterAssembly(
        base, mode=manifest["mode"], control_widths=tuple(manifest["control_widths"]),
        rank_q=manifest["rank_q"], bridge_kernel=manifest["bridge_kernel"],
        cascade=manifest["cascade"], control_in_ch=manifest["control_in_ch"])
    asm.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    for p in asm.base.parameters():
        p.requires_grad_(False)
    return asm, manifest
