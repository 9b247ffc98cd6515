import numpy as np
import pytest
import torch

from volterra_edit.adapter import (
    AdapterAssembly,
    FusionBlock,
    ZeroConv,
    base_param_hash,
    fuse_into_base,
    fuse_into_control,
    load_checkpoint,
    save_checkpoint,
    trainable_parameters,
)
from volterra_edit.diffusion import (
    NoiseSchedule, TrainBatch, make_optimizer, training_step)
from volterra_edit.unet import ToyUNet
from volterra_edit.volterra import gradient_check


def small_base():
    return ToyUNet(widths=(8, 12, 16), cond_dim=32, text_dim=16)


def small_assembly(mode="volterra"):
    return AdapterAssembly(small_base(), mode=mode, control_widths=(4, 8, 8),
                           rank_q=1, bridge_kernel=1)


class TestFusionOps:
    def test_volterra_w0_identity(self):
        blk = FusionBlock(4, 2, "volterra", rank_q=2, kernel_size=3)
        fb, fc = torch.randn(1, 4, 8, 8), torch.randn(1, 2, 8, 8)
        assert torch.equal(fuse_into_base(fb, fc, blk), fb)
        assert torch.equal(fuse_into_control(fc, fb, blk), fc)

    def test_volterra_half_weight_zero_bridge(self):
        blk = FusionBlock(3, 3, "volterra", rank_q=1)
        with torch.no_grad():
            blk.w_raw.fill_(0.5)
        fb, fc = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        torch.testing.assert_close(fuse_into_base(fb, fc, blk), 0.5 * fb)

    def test_linear_zero_conv_identity(self):
        blk = FusionBlock(4, 2, "linear")
        fb, fc = torch.randn(1, 4, 8, 8), torch.randn(1, 2, 8, 8)
        assert torch.equal(fuse_into_base(fb, fc, blk), fb)
        assert torch.equal(fuse_into_control(fc, fb, blk), fc)

    def test_volterra_scalar_hand_evaluation(self):
        # 1x1 single-channel toy: x_c = (1-w) fc + w * V([fc,fb])
        blk = FusionBlock(1, 1, "volterra", rank_q=1, kernel_size=1)
        with torch.no_grad():
            blk.w_raw.fill_(0.5)
            blk.bridge_cb.w1.copy_(torch.tensor([[[[2.0]], [[3.0]]]]))  # [1,2,1,1]
        fc = torch.tensor([[[[1.0]]]])
        fb = torch.tensor([[[[4.0]]]])
        # V = 2*1 + 3*4 = 14 (quadratic kernels zero); out = 0.5*1 + 0.5*14 = 7.5
        out = fuse_into_control(fc, fb, blk)
        assert out.item() == pytest.approx(7.5)

    def test_channel_mismatch_rejected(self):
        blk = FusionBlock(4, 2, "volterra")
        with pytest.raises(ValueError, match="channels"):
            fuse_into_base(torch.randn(1, 3, 8, 8), torch.randn(1, 2, 8, 8), blk)
        with pytest.raises(ValueError, match="spatial"):
            fuse_into_base(torch.randn(1, 4, 8, 8), torch.randn(1, 2, 4, 4), blk)

    def test_mode_parity_at_init(self):
        vb = FusionBlock(3, 2, "volterra")
        lb = FusionBlock(3, 2, "linear")
        fb, fc = torch.randn(1, 3, 8, 8), torch.randn(1, 2, 8, 8)
        assert torch.equal(fuse_into_base(fb, fc, vb), fuse_into_base(fb, fc, lb))

    def test_clamp_keeps_weight_in_unit_interval(self):
        blk = FusionBlock(1, 1, "volterra")
        with torch.no_grad():
            blk.w_raw.fill_(3.0)
        assert blk.fusion_weight.item() == 1.0
        with torch.no_grad():
            blk.w_raw.fill_(-2.0)
        assert blk.fusion_weight.item() == 0.0


class TestAssembly:
    @pytest.mark.parametrize("mode", ["volterra", "linear"])
    def test_init_identity(self, mode):
        asm = small_assembly(mode)
        for i in range(10):
            z = torch.randn(1, 3, 32, 32)
            t = torch.randint(0, 100, (1,))
            ctrl = torch.randn(1, 3, 32, 32)
            text = torch.randn(1, 16)
            joint = asm(z, t, ctrl, text)
            base = asm.base_forward(z, t, text)
            rel = (joint - base).abs().max() / base.abs().max().clamp_min(1e-12)
            assert rel < 1e-6

    def test_trainable_excludes_base(self):
        asm = small_assembly()
        base_ids = {id(p) for p in asm.base.parameters()}
        params = trainable_parameters(asm)
        assert params and all(id(p) not in base_ids for p in params)
        assert all(not p.requires_grad for p in asm.base.parameters())

    def test_volterra_count_exceeds_linear(self):
        v = sum(p.numel() for p in trainable_parameters(small_assembly("volterra")))
        l = sum(p.numel() for p in trainable_parameters(small_assembly("linear")))
        assert v > l

    def test_linear_count_formula(self):
        asm = small_assembly("linear")
        ctrl = sum(p.numel() for n, p in asm.named_parameters()
                   if n.startswith(("control.", "embed.")))
        zc = sum(b.bridge_bc.kernel.numel() + b.bridge_cb.kernel.numel()
                 for b in asm.fusion)
        assert sum(p.numel() for p in trainable_parameters(asm)) == ctrl + zc

    def test_frozen_base_hash_stable_across_training(self):
        asm = small_assembly()
        sched = NoiseSchedule.linear(T=50)
        opt = make_optimizer(asm)
        h0 = base_param_hash(asm)
        gen = torch.Generator().manual_seed(3)
        changed_before = {n: p.detach().clone() for n, p in trainable_parameters(asm, named=True)}
        for _ in range(3):
            z0 = torch.randn(4, 3, 32, 32, generator=gen)
            batch = TrainBatch(
                z0=z0, control=torch.randn(4, 3, 32, 32, generator=gen),
                text_cond=torch.randn(4, 16, generator=gen),
                t=torch.randint(0, 50, (4,), generator=gen),
                eps=torch.randn(4, 3, 32, 32, generator=gen))
            training_step(asm, batch, sched, opt)
        assert base_param_hash(asm) == h0
        moved = any(not torch.equal(p.detach(), changed_before[n])
                    for n, p in trainable_parameters(asm, named=True))
        assert moved

    @pytest.mark.parametrize("mode", ["volterra", "linear"])
    def test_gradient_reaches_control_stream_after_one_step(self, mode):
        # at construction the bridges are exactly zero, so Theta_c sees no
        # gradient; one optimizer step moves the bridge kernels and opens
        # the exchange path
        asm = small_assembly(mode)
        sched = NoiseSchedule.linear(T=50)
        opt = make_optimizer(asm)
        if mode == "volterra":
            with torch.no_grad():
                for blk in asm.fusion:
                    blk.w_raw.fill_(0.25)
        gen = torch.Generator().manual_seed(13)
        batch = TrainBatch(
            z0=torch.randn(2, 3, 32, 32, generator=gen),
            control=torch.randn(2, 3, 32, 32, generator=gen),
            text_cond=torch.randn(2, 16, generator=gen), t=torch.tensor([4, 30]),
            eps=torch.randn(2, 3, 32, 32, generator=gen))
        training_step(asm, batch, sched, opt)
        z_t = torch.randn(2, 3, 32, 32, generator=gen)
        out = asm(z_t, batch.t, batch.control, batch.text_cond)
        asm.zero_grad(set_to_none=True)
        out.pow(2).mean().backward()
        gnorm = sum(p.grad.norm() for n, p in asm.named_parameters()
                    if n.startswith("control.") and p.grad is not None)
        assert float(gnorm) > 0

    def test_fusion_block_gradients_in_assembly_context(self):
        # <=200-parameter fusion config checked against finite differences
        blk = FusionBlock(2, 2, "volterra", rank_q=1, kernel_size=1)
        with torch.no_grad():
            blk.w_raw.fill_(0.3)
            for p in blk.parameters():
                if p.ndim > 0:
                    p.normal_(0, 0.3)
        n_params = sum(p.numel() for p in blk.parameters())
        assert n_params <= 200
        err = gradient_check(
            blk, (torch.randn(1, 2, 4, 4, dtype=torch.float64),
                  torch.randn(1, 2, 4, 4, dtype=torch.float64)))
        assert err < 1e-4

    def test_block_count_mismatch_rejected(self):
        base = small_base()
        with pytest.raises(ValueError):
            AdapterAssembly(base, control_widths=(4, 8))  # malformed width plan


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        asm = small_assembly()
        with torch.no_grad():
            asm.fusion[0].w_raw.fill_(0.7)
        path = tmp_path / "adapter.npz"
        save_checkpoint(asm, path)
        loaded, manifest = load_checkpoint(path)
        assert manifest["mode"] == "volterra"
        assert manifest["fusion_weights"][0] == pytest.approx(0.7)
        for (na, a), (nb, b) in zip(asm.state_dict().items(), loaded.state_dict().items()):
            assert na == nb and torch.equal(a, b)

    def test_param_names_follow_stream_block_layout(self, tmp_path):
        asm = small_assembly()
        path = tmp_path / "adapter.npz"
        save_checkpoint(asm, path)
        with np.load(path) as zf:
            names = [n for n in zf.files if n != "__manifest__"]
        streams = {n.split(".")[0] for n in names}
        assert streams == {"base", "control", "fusion", "embed"}
        assert any(n.startswith("fusion.0.") for n in names)
        assert any(n.startswith("control.3.") for n in names)
