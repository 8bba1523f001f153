"""Combined IAP loss: lambda * sum of per-head cross-entropy + eta * sum of per-head MSE."""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..exceptions import ModelError
from .schema import IapSchema

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted total plus the unweighted term of every head, keyed by IAP name in schema order."""

    total: torch.Tensor
    terms: dict[str, torch.Tensor]

    def as_floats(self) -> dict[str, float]:
        return {"total": float(self.total.detach()), **{k: float(v.detach()) for k, v in self.terms.items()}}


def compute_loss(
    outputs: torch.Tensor,
    categorical_targets: torch.Tensor,
    continuous_targets: torch.Tensor,
    schema: IapSchema,
    lam: float = 1.0,
    eta: float = 1.0,
) -> LossBreakdown:
    """Compute the multi-head loss for a batch.

    Each cross-entropy term applies softmax over its own head's logits and is
    averaged over the batch; each MSE term is averaged over the batch in the
    target's native units.

    Args:
        outputs: Raw model outputs [N, output_width]
        categorical_targets: Class indices [N, K]
        continuous_targets: Native values [N, M]
        schema: Layout of the output vector
        lam: Weight of the categorical terms
        eta: Weight of the continuous terms

    Returns:
        LossBreakdown with K + M terms

    Raises:
        ModelError: On negative weights or mismatched shapes
    """
    if lam < 0 or eta < 0:
        raise ModelError(f"Loss weights must be non-negative, got lambda={lam}, eta={eta}")
    n = outputs.shape[0]
    if outputs.dim() != 2 or outputs.shape[1] != schema.output_width:
        raise ModelError(f"Outputs shaped {tuple(outputs.shape)} do not match schema width {schema.output_width}")
    if tuple(categorical_targets.shape) != (n, schema.K) or tuple(continuous_targets.shape) != (n, schema.M):
        raise ModelError(
            f"Target shapes {tuple(categorical_targets.shape)}, {tuple(continuous_targets.shape)} "
            f"do not match batch {n} with K={schema.K}, M={schema.M}"
        )

    terms: dict[str, torch.Tensor] = {}
    categorical_sum = outputs.new_zeros(())
    continuous_sum = outputs.new_zeros(())
    for k, descriptor in enumerate(schema.categorical):
        logits = outputs[:, schema.head_slice(descriptor.name)]
        term = F.cross_entropy(logits, categorical_targets[:, k].long(), reduction="mean")
        terms[descriptor.name] = term
        categorical_sum = categorical_sum + term
    for m, descriptor in enumerate(schema.continuous):
        prediction = outputs[:, schema.head_slice(descriptor.name)].squeeze(1)
        term = F.mse_loss(prediction, continuous_targets[:, m].to(outputs.dtype), reduction="mean")
        terms[descriptor.name] = term
        continuous_sum = continuous_sum + term

    ordered = {name: terms[name] for name in schema.names}
    return LossBreakdown(total=lam * categorical_sum + eta * continuous_sum, terms=ordered)
