"""Token budget and self-attention cost of region vs patch inputs.

FLOP model (2 FLOPs per multiply-add, per transformer layer, T tokens, width d):

    attention scores + weighted sum   4 * T^2 * d
    q/k/v/output projections          8 * T * d^2
    MLP with 4x expansion            16 * T * d^2
"""
from __future__ import annotations

FLOP_MODEL = (
    "per layer, 2 FLOPs per multiply-add: attention 4*T^2*d, "
    "projections 8*T*d^2, MLP 16*T*d^2; T includes one CLS token"
)


def _costs(tokens: int, d: int, layers: int) -> dict:
    attention = 4 * tokens**2 * d * layers
    projection = 8 * tokens * d**2 * layers
    mlp = 16 * tokens * d**2 * layers
    return {
        "tokens": tokens,
        "attention_flops": attention,
        "projection_flops": projection,
        "mlp_flops": mlp,
        "total_flops": attention + projection + mlp,
    }


def estimate_cost(
    frames: int,
    regions_per_frame: int = 30,
    patches_per_frame: int = 196,
    d: int = 768,
    layers: int = 12,
) -> dict:
    """Compare M*N+1 region tokens against M*patches+1 patch tokens."""
    for name, value in (
        ("frames", frames),
        ("regions_per_frame", regions_per_frame),
        ("patches_per_frame", patches_per_frame),
        ("d", d),
        ("layers", layers),
    ):
        if int(value) < 1:
            raise ValueError(f"{name} must be a positive integer")
    region = _costs(frames * regions_per_frame + 1, d, layers)
    patch = _costs(frames * patches_per_frame + 1, d, layers)
    return {
        "model": FLOP_MODEL,
        "frames": frames,
        "d": d,
        "layers": layers,
        "region": region,
        "patch": patch,
        "token_ratio": patch["tokens"] / region["tokens"],
        "attention_ratio": patch["attention_flops"] / region["attention_flops"],
        "total_ratio": patch["total_flops"] / region["total_flops"],
    }


def format_report(report: dict) -> str:
    lines = [
        f"# {report['model']}",
        f"frames={report['frames']} d={report['d']} layers={report['layers']}",
        f"{'input':<8}{'tokens':>8}{'attention':>16}{'projection':>16}{'mlp':>16}{'total':>16}",
    ]
    for name in ("region", "patch"):
        c = report[name]
        lines.append(
            f"{name:<8}{c['tokens']:>8}{c['attention_flops']:>16.4g}{c['projection_flops']:>16.4g}"
            f"{c['mlp_flops']:>16.4g}{c['total_flops']:>16.4g}"
        )
    lines.append(
        f"patch/region: tokens {report['token_ratio']:.2f}x, attention {report['attention_ratio']:.1f}x, "
        f"total {report['total_ratio']:.1f}x"
    )
    return "\n".join(lines)
