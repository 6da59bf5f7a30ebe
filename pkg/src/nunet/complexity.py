"""Analytic parameter and FLOP accounting.

FLOPs follow the multiply-accumulate convention: one MAC per kernel tap
of convolutional and transposed-convolutional layers. Pooling,
normalization, and activations are excluded.
"""

from __future__ import annotations

import copy
import io

import torch
from torch import nn

from .arch import NUNet, VARIANT_NAMES, variant_config
from .errors import ShapeError

# Published complexity figures for the canonical family, used to report
# calibration deltas: params in M / FLOP multiple relative to "unet".
REFERENCE_PARAMS_M = {
    "unet": 7.85,
    "deeper": 46.88,
    "deeper_mou": 76.67,
    "deeper_mou_mdsc": 77.05,
}
REFERENCE_FLOP_MULTIPLE = {
    "unet": 1.0,
    "deeper": 2.24,
    "deeper_mou": 2.85,
    "deeper_mou_mdsc": 2.87,
}


def count_params(model: nn.Module) -> int:
    """Exact count of trainable scalar parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _normalize_shape(model: nn.Module, input_shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 2:
        in_ch = model.cfg.backbone.in_channels if isinstance(model, NUNet) else 1
        shape = (1, in_ch, *shape)
    elif len(shape) == 3:
        shape = (1, *shape)
    elif len(shape) != 4:
        raise ShapeError(f"input_shape must have 2..4 dims, got {input_shape!r}")
    return shape


def count_flops(model: nn.Module, input_shape) -> int:
    """MACs of one forward pass of `model` on `input_shape`.

    Accepts (H, W), (C, H, W) or (B, C, H, W); the batch dimension
    defaults to 1. Conv layers count out_H * out_W * k_h * k_w * C_in *
    C_out / groups MACs; transposed convs count the same quantity at
    their *input* resolution. The pass runs on meta tensors, so no real
    compute happens.
    """
    shape = _normalize_shape(model, input_shape)
    total = 0

    def conv_hook(mod, inputs, output):
        nonlocal total
        kh, kw = mod.kernel_size
        _, c_in, _, _ = inputs[0].shape
        b, c_out, h, w = output.shape
        total += b * h * w * kh * kw * (c_in // mod.groups) * c_out

    def deconv_hook(mod, inputs, output):
        nonlocal total
        kh, kw = mod.kernel_size
        b, c_in, h, w = inputs[0].shape
        c_out = output.shape[1]
        total += b * h * w * kh * kw * c_in * (c_out // mod.groups)

    if isinstance(model, NUNet):
        # rebuild structurally on the meta device; avoids copying weights
        with torch.device("meta"):
            probe = NUNet(model.cfg)
    else:
        probe = copy.deepcopy(model).to("meta")
    probe.eval()
    handles = []
    for mod in probe.modules():
        if isinstance(mod, nn.ConvTranspose2d):
            handles.append(mod.register_forward_hook(deconv_hook))
        elif isinstance(mod, nn.Conv2d):
            handles.append(mod.register_forward_hook(conv_hook))
    try:
        probe(torch.zeros(shape, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return total


def complexity_table(variants=VARIANT_NAMES, input_size: int = 256, base_width: int = 32,
                     cap: int = 512, seed: int = 0) -> list[dict]:
    """Per-variant params, FLOPs, and multiples relative to the first variant."""
    rows = []
    for name in variants:
        cfg = variant_config(name, base_width=base_width, cap=cap,
                             input_size=input_size, seed=seed)
        with torch.device("meta"):
            model = NUNet(cfg)
        params = count_params(model)
        flops = count_flops(model, (input_size, input_size))
        rows.append({"variant": name, "params": params, "flops": flops})
    base = rows[0]
    for row in rows:
        row["param_multiple"] = row["params"] / base["params"]
        row["flop_multiple"] = row["flops"] / base["flops"]
    return rows


def calibration_report(rows: list[dict], input_size: int = 256) -> str:
    """Plain-text calibration report with deltas against the reference budgets."""
    out = io.StringIO()
    out.write("CALIBRATION REPORT\n")
    out.write(f"input size: {input_size}x{input_size}\n\n")
    header = (f"{'variant':<18}{'params (M)':>12}{'x params':>10}{'GMACs':>10}"
              f"{'x flops':>9}{'ref M':>8}{'dP%':>8}{'ref xF':>8}{'dF%':>8}\n")
    out.write(header)
    out.write("-" * (len(header) - 1) + "\n")
    for row in rows:
        name = row["variant"]
        pm = row["params"] / 1e6
        gm = row["flops"] / 1e9
        ref_p = REFERENCE_PARAMS_M.get(name)
        ref_f = REFERENCE_FLOP_MULTIPLE.get(name)
        dp = f"{100 * (pm / ref_p - 1):+.2f}" if ref_p else "-"
        df = f"{100 * (row['flop_multiple'] / ref_f - 1):+.2f}" if ref_f else "-"
        pmul = "-" if row["param_multiple"] == 1.0 else f"{row['param_multiple']:.2f}"
        fmul = "-" if row["flop_multiple"] == 1.0 else f"{row['flop_multiple']:.2f}"
        out.write(f"{name:<18}{pm:>12.2f}{pmul:>10}{gm:>10.2f}{fmul:>9}"
                  f"{ref_p if ref_p else '-':>8}{dp:>8}{ref_f if ref_f else '-':>8}{df:>8}\n")
    out.write(
        "\nnotes: params count conv weights + biases and affine normalization;\n"
        "FLOPs are MACs of conv and transposed-conv layers only, so multiples\n"
        "are invariant to the input resolution.\n"
    )
    return out.getvalue()
