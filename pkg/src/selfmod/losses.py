"""Adversarial objectives in minimization form.

The discriminator losses are the negated value functions the discriminator
maximizes, so every loss here is something to drive down.
"""

from __future__ import annotations

from . import tensor as T


def _flat(logits) -> T.Tensor:
    logits = T.as_tensor(logits)
    return T.reshape(logits, (-1,))


def ns_loss_d(real_logits, fake_logits) -> T.Tensor:
    # -log sigmoid(x) = softplus(-x);  -log(1 - sigmoid(x)) = softplus(x)
    real, fake = _flat(real_logits), _flat(fake_logits)
    return T.add(T.mean(T.softplus(T.neg(real))), T.mean(T.softplus(fake)))


def ns_loss_g(fake_logits) -> T.Tensor:
    return T.mean(T.softplus(T.neg(_flat(fake_logits))))


def hinge_loss_d(real_logits, fake_logits) -> T.Tensor:
    real, fake = _flat(real_logits), _flat(fake_logits)
    return T.add(T.mean(T.relu(T.sub(1.0, real))), T.mean(T.relu(T.add(1.0, fake))))


def hinge_loss_g(fake_logits) -> T.Tensor:
    return T.neg(T.mean(_flat(fake_logits)))


LOSSES = {
    "ns": (ns_loss_d, ns_loss_g),
    "hinge": (hinge_loss_d, hinge_loss_g),
}


def get_loss(name: str):
    """(discriminator_loss, generator_loss) pair for a config key."""
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {name!r}") from None
