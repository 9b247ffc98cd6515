"""Second-order Volterra layer with a rank-Q factored quadratic kernel.

The layer computes

    y = W1 * x + sum_q (W2a_q * x) . (W2b_q * x)

where * is 2-D convolution and . the elementwise product. The Q factor
pairs are a lossy low-rank approximation of the full second-order kernel:
for 1x1 kernels the quadratic term equals x^T W2 x per pixel with
W2[o,i,j] = sum_q w2a_q[o,i] * w2b_q[o,j].
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


class GradientCheckError(RuntimeError):
    pass


class VolterraLayer(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, rank_q, stride=1, padding=None,
                 zero_init=False):
        super().__init__()
        for name, v in [("c_in", c_in), ("c_out", c_out),
                        ("kernel_size", kernel_size), ("rank_q", rank_q)]:
            if int(v) < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.kernel_size = int(kernel_size)
        self.rank_q = int(rank_q)
        self.stride = int(stride)
        # default keeps spatial dims ("same" for odd k, stride 1)
        self.padding = self.kernel_size // 2 if padding is None else int(padding)
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding ({self.stride}, {self.padding})")

        shape = (self.c_out, self.c_in, self.kernel_size, self.kernel_size)
        if zero_init:
            make = lambda: nn.Parameter(torch.zeros(shape))
        else:
            make = lambda: nn.Parameter(
                torch.randn(shape) * (self.c_in * self.kernel_size**2) ** -0.5)
        self.w1 = make()
        self.w2a = nn.ParameterList([make() for _ in range(self.rank_q)])
        self.w2b = nn.ParameterList([make() for _ in range(self.rank_q)])

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"expected [B,C,H,W] input, got {tuple(x.shape)}")
        if x.shape[1] != self.c_in:
            raise ValueError(
                f"input channel dim is {x.shape[1]}, layer expects c_in={self.c_in}")
        # one conv evaluates w1 and all 2Q factor kernels (stacked on the
        # output-channel axis), then the factor pairs multiply pointwise
        stacked = torch.cat([self.w1, *self.w2a, *self.w2b], dim=0)
        f = F.conv2d(x, stacked, stride=self.stride, padding=self.padding)
        b, _, h, w = f.shape
        out = f[:, :self.c_out]
        fa = f[:, self.c_out:self.c_out * (1 + self.rank_q)]
        fb = f[:, self.c_out * (1 + self.rank_q):]
        quad = (fa.reshape(b, self.rank_q, self.c_out, h, w)
                * fb.reshape(b, self.rank_q, self.c_out, h, w)).sum(dim=1)
        return out + quad

    def param_count(self):
        return param_count(self)

    def extra_repr(self):
        return (f"c_in={self.c_in}, c_out={self.c_out}, k={self.kernel_size}, "
                f"rank_q={self.rank_q}")


def init_zero(c_in, c_out, kernel_size, rank_q, stride=1, padding=None):
    """All-zero layer: forward is identically zero for any input."""
    return VolterraLayer(c_in, c_out, kernel_size, rank_q, stride=stride,
                         padding=padding, zero_init=True)


def param_count(layer):
    """C_out * C_in * k^2 * (1 + 2Q); shape-only, independent of values."""
    return layer.c_out * layer.c_in * layer.kernel_size**2 * (1 + 2 * layer.rank_q)


def quadratic_form_oracle(x, layer):
    """Brute-force per-pixel evaluation for 1x1 kernels, explicit loops.

    Materializes W2[o,i,j] = sum_q w2a_q[o,i]*w2b_q[o,j] and evaluates
    linear + full quadratic form in float64. Test oracle only; O(B*H*W*C^2).
    """
    assert layer.kernel_size == 1 and layer.stride == 1
    import numpy as np

    xv = x.detach().to(torch.float64).numpy()
    w1 = layer.w1.detach().to(torch.float64).numpy()[:, :, 0, 0]
    w2a = [w.detach().to(torch.float64).numpy()[:, :, 0, 0] for w in layer.w2a]
    w2b = [w.detach().to(torch.float64).numpy()[:, :, 0, 0] for w in layer.w2b]
    b, c_in, h, w = xv.shape
    c_out = w1.shape[0]
    w2 = np.zeros((c_out, c_in, c_in))
    for o in range(c_out):
        for i in range(c_in):
            for j in range(c_in):
                for q in range(layer.rank_q):
                    w2[o, i, j] += w2a[q][o, i] * w2b[q][o, j]
    out = np.zeros((b, c_out, h, w))
    for n in range(b):
        for o in range(c_out):
            for yy in range(h):
                for xx in range(w):
                    v = 0.0
                    for i in range(c_in):
                        v += w1[o, i] * xv[n, i, yy, xx]
                    for i in range(c_in):
                        for j in range(c_in):
                            v += w2[o, i, j] * xv[n, i, yy, xx] * xv[n, j, yy, xx]
                    out[n, o, yy, xx] = v
    return out


def gradient_check(module, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Loss is the sum of all module outputs. Runs on float64 copies of the
    parameters; `inputs` is a tensor or tuple of tensors. Raises
    GradientCheckError naming the parameter if any gradient is non-finite.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if isinstance(inputs, torch.Tensor):
        inputs = (inputs,)
    module = module.double()
    inputs = tuple(t.detach().to(torch.float64) for t in inputs)

    def loss():
        out = module(*inputs)
        if isinstance(out, tuple):
            return sum(o.sum() for o in out)
        return out.sum()

    module.zero_grad(set_to_none=True)
    loss().backward()

    max_rel = 0.0
    with torch.no_grad():
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            if not torch.isfinite(grad).all():
                raise GradientCheckError(f"non-finite analytic gradient in {name}")
            flat = p.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss().item()
                flat[idx] = orig - eps
                down = loss().item()
                flat[idx] = orig
                num = (up - down) / (2.0 * eps)
                if not torch.isfinite(torch.tensor(num)):
                    raise GradientCheckError(
                        f"non-finite numeric gradient in {name}[{idx}]")
                ana = grad.view(-1)[idx].item()
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                max_rel = max(max_rel, rel)
    return max_rel
