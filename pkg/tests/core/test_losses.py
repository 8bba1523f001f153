"""Tests for the combined cross-entropy / MSE loss."""
import math

import numpy as np
import pytest
import torch

from iap_recovery.core.losses import compute_loss
from iap_recovery.exceptions import ModelError


def random_batch(schema, n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    outputs = torch.randn(n, schema.output_width, generator=g, dtype=torch.float64)
    categorical = torch.stack(
        [torch.randint(len(d.categories), (n,), generator=g) for d in schema.categorical], dim=1
    )
    continuous = torch.rand(n, schema.M, generator=g, dtype=torch.float64) * 5
    return outputs, categorical, continuous


def reference_terms(outputs, categorical, continuous, schema):
    """Per-head CE and MSE computed with numpy."""
    out = outputs.detach().numpy()
    terms = {}
    for k, d in enumerate(schema.categorical):
        logits = out[:, schema.head_slice(d.name)]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        terms[d.name] = -np.mean(log_probs[np.arange(len(out)), categorical[:, k].numpy()])
    for m, d in enumerate(schema.continuous):
        terms[d.name] = np.mean((out[:, schema.head_slice(d.name).start] - continuous[:, m].numpy()) ** 2)
    return terms


class TestComputeLoss:
    """Tests for compute_loss."""

    def test_total_is_sum_of_terms(self, desk_schema):
        """With unit weights the total equals the sum of the breakdown."""
        outputs, categorical, continuous = random_batch(desk_schema, n=16)
        breakdown = compute_loss(outputs, categorical, continuous, desk_schema)
        assert list(breakdown.terms) == list(desk_schema.names)
        assert float(breakdown.total) == pytest.approx(sum(float(t) for t in breakdown.terms.values()), abs=1e-6)

    def test_matches_independent_reference(self, desk_schema):
        """Each term equals a numpy log-softmax / squared-error computation."""
        for seed in range(5):
            outputs, categorical, continuous = random_batch(desk_schema, n=8, seed=seed)
            breakdown = compute_loss(outputs, categorical, continuous, desk_schema)
            reference = reference_terms(outputs, categorical, continuous, desk_schema)
            for name, value in reference.items():
                assert float(breakdown.terms[name]) == pytest.approx(value, abs=1e-6)
            assert float(breakdown.total) == pytest.approx(sum(reference.values()), abs=1e-6)

    def test_uniform_logits(self, small_schema):
        """Uniform logits give ln C per head; eta=0 drops the continuous term."""
        outputs = torch.zeros(3, small_schema.output_width, dtype=torch.float64)
        categorical = torch.tensor([[0, 1], [1, 3], [0, 0]])
        continuous = torch.tensor([[1.5], [2.0], [2.5]], dtype=torch.float64)
        breakdown = compute_loss(outputs, categorical, continuous, small_schema, lam=1.0, eta=0.0)
        assert float(breakdown.terms["flip_angle"]) == pytest.approx(math.log(4))
        assert float(breakdown.total) == pytest.approx(math.log(2) + math.log(4))

    def test_constant_regression_error(self, small_schema):
        """An error of exactly 2.0 on every sample gives a term of 4.0."""
        outputs = torch.zeros(5, small_schema.output_width, dtype=torch.float64)
        outputs[:, small_schema.head_slice("te").start] = torch.arange(5, dtype=torch.float64) + 2.0
        categorical = torch.zeros(5, 2, dtype=torch.long)
        continuous = torch.arange(5, dtype=torch.float64).unsqueeze(1)
        breakdown = compute_loss(outputs, categorical, continuous, small_schema, lam=0.0, eta=1.0)
        assert float(breakdown.terms["te"]) == 4.0
        assert float(breakdown.total) == 4.0

    def test_lambda_linearity(self, desk_schema):
        """Doubling lambda with eta=0 doubles the total."""
        outputs, categorical, continuous = random_batch(desk_schema, n=6, seed=3)
        single = compute_loss(outputs, categorical, continuous, desk_schema, lam=1.0, eta=0.0).total
        double = compute_loss(outputs, categorical, continuous, desk_schema, lam=2.0, eta=0.0).total
        assert abs(float(double) - 2 * float(single)) <= 1e-9

    def test_gradient_matches_finite_differences(self, small_schema):
        """Analytic gradients agree with central differences on a 4-sample batch."""
        outputs, categorical, continuous = random_batch(small_schema, n=4, seed=7)
        outputs.requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda out: compute_loss(out, categorical, continuous, small_schema, lam=1.0, eta=1.0).total,
            (outputs,),
            eps=1e-6,
            atol=1e-6,
            rtol=1e-4,
        )

    def test_negative_weights_rejected(self, small_schema):
        outputs, categorical, continuous = random_batch(small_schema)
        with pytest.raises(ModelError):
            compute_loss(outputs, categorical, continuous, small_schema, lam=-1.0)
        with pytest.raises(ModelError):
            compute_loss(outputs, categorical, continuous, small_schema, eta=-0.5)

    def test_shape_mismatch_rejected(self, small_schema):
        """Outputs narrower than the schema are refused."""
        outputs, categorical, continuous = random_batch(small_schema)
        with pytest.raises(ModelError, match="schema width"):
            compute_loss(outputs[:, :-1], categorical, continuous, small_schema)
        with pytest.raises(ModelError, match="Target shapes"):
            compute_loss(outputs, categorical[:2], continuous, small_schema)
