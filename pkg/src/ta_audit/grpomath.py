"""Group-relative policy objective, in exact scalar form.

Pure math over Python floats: group-normalized advantages, the clipped
per-token surrogate, the token-averaged objective with a KL penalty, and its
exact gradient with respect to the probability ratios. No tensors; summation
uses math.fsum so results are reproducible to the last bit.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_BETA = 0.04
DEFAULT_EPS_LOW = 0.2
DEFAULT_EPS_HIGH = 0.2
DEFAULT_GROUP_SIZE = 8
DEFAULT_STD_FLOOR = 1e-8


class GrpoError(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    beta: float = DEFAULT_BETA
    eps_low: float = DEFAULT_EPS_LOW
    eps_high: float = DEFAULT_EPS_HIGH
    group_size: int = DEFAULT_GROUP_SIZE
    std_floor: float = DEFAULT_STD_FLOOR

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise GrpoError("beta must be >= 0")
        if not 0 < self.eps_low < 1:
            raise GrpoError("eps_low must be in (0, 1)")
        if self.eps_high <= 0:
            raise GrpoError("eps_high must be > 0")
        if self.group_size < 1:
            raise GrpoError("group_size must be >= 1")
        if self.std_floor < 0:
            raise GrpoError("std_floor must be >= 0")


@dataclass
class GrpoGroup:
    """One prompt's group: a reward per response, ratios and per-token KL."""

    rewards: list[float]
    ratios: list[list[float]]
    kl: list[list[float]]

    def __post_init__(self) -> None:
        g = len(self.rewards)
        if g < 1:
            raise GrpoError("group must contain at least one response")
        if len(self.ratios) != g or len(self.kl) != g:
            raise GrpoError("rewards, ratios and kl must have equal group size")
        for i, (r, k) in enumerate(zip(self.ratios, self.kl)):
            if len(r) != len(k):
                raise GrpoError(f"response {i}: ratios and kl lengths differ")
            if not r:
                raise GrpoError(f"response {i}: empty token sequence")

    @property
    def total_tokens(self) -> int:
        return sum(len(r) for r in self.ratios)


def advantages(rewards: Sequence[float], std_floor: float = DEFAULT_STD_FLOOR) -> list[float]:
    """Group-normalized rewards: (r - mean) / population std.

    A group whose reward spread is below std_floor carries no learning
    signal, so every advantage collapses to exactly zero rather than
    dividing by a vanishing std.
    """
    g = len(rewards)
    if g < 1:
        raise GrpoError("need at least one reward")
    mean = math.fsum(rewards) / g
    variance = math.fsum((r - mean) ** 2 for r in rewards) / g
    std = math.sqrt(variance)
    if std < std_floor:
        return [0.0] * g
    return [(r - mean) / std for r in rewards]


def clipped_token_loss(
    rho: float,
    advantage: float,
    eps_low: float = DEFAULT_EPS_LOW,
    eps_high: float = DEFAULT_EPS_HIGH,
) -> float:
    """min(rho*A, clip(rho, 1-eps_low, 1+eps_high)*A), the pessimistic bound."""
    clipped = min(max(rho, 1.0 - eps_low), 1.0 + eps_high)
    return min(rho * advantage, clipped * advantage)


@dataclass
class GrpoObjective:
    loss_term: float
    kl_term: float

    @property
    def total(self) -> float:
        return self.loss_term - self.kl_term


def objective(group: GrpoGroup, config: GrpoConfig = GrpoConfig()) -> GrpoObjective:
    """Token-averaged clipped surrogate minus the beta-weighted mean KL."""
    adv = advantages(group.rewards, config.std_floor)
    total_tokens = group.total_tokens
    loss = math.fsum(
        clipped_token_loss(rho, adv[i], config.eps_low, config.eps_high)
        for i, token_ratios in enumerate(group.ratios)
        for rho in token_ratios
    ) / total_tokens
    kl_mean = math.fsum(k for row in group.kl for k in row) / total_tokens
    return GrpoObjective(loss_term=loss, kl_term=config.beta * kl_mean)


def objective_gradient_wrt_rho(
    group: GrpoGroup, config: GrpoConfig = GrpoConfig()
) -> list[list[float]]:
    """d(objective.total)/d(rho_it), exact.

    The surrogate is piecewise linear in each ratio: slope A_i/total_tokens
    where the unclipped branch is active, zero where the clipped branch has
    flattened it. At a kink the unclipped side wins (the min ties there).
    """
    adv = advantages(group.rewards, config.std_floor)
    total_tokens = group.total_tokens
    grads = []
    for i, token_ratios in enumerate(group.ratios):
        a = adv[i]
        row = []
        for rho in token_ratios:
            clipped = min(max(rho, 1.0 - config.eps_low), 1.0 + config.eps_high)
            if rho * a <= clipped * a:
                row.append(a / total_tokens)
            else:
                row.append(0.0)
        grads.append(row)
    return grads


# --- bundled numerical self-checks ------------------------------------------


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _random_group(rng: random.Random, max_tokens: int = 6) -> GrpoGroup:
    g = rng.randint(2, 8)
    rewards = [rng.uniform(-2.0, 2.0) for _ in range(g)]
    lengths = [rng.randint(1, max_tokens) for _ in range(g)]
    ratios = [[math.exp(rng.uniform(-0.7, 0.7)) for _ in range(n)] for n in lengths]
    kl = [[abs(rng.gauss(0.0, 0.1)) for _ in range(n)] for n in lengths]
    return GrpoGroup(rewards=rewards, ratios=ratios, kl=kl)


def self_check(seed: int = 0) -> list[CheckResult]:
    """Run the numerical invariants this module promises and report each.

    Covers: advantage mean/std normalization, affine invariance, pessimism
    of the clipped surrogate (10,000 samples), equality with the symmetric
    one-epsilon form, and a finite-difference probe of the gradient at
    1,000 non-kink points.
    """
    rng = random.Random(seed)
    results = []

    mean_err = 0.0
    std_err = 0.0
    affine_err = 0.0
    for _ in range(200):
        g = rng.randint(2, 8)
        rewards = [rng.uniform(-5.0, 5.0) for _ in range(g)]
        spread = max(rewards) - min(rewards)
        if spread < 1e-3:
            rewards[0] += 1.0
        adv = advantages(rewards)
        mean_err = max(mean_err, abs(math.fsum(adv) / g))
        std = math.sqrt(math.fsum(a * a for a in adv) / g)
        std_err = max(std_err, abs(std - 1.0))
        scale = rng.uniform(0.1, 3.0)
        shift = rng.uniform(-10.0, 10.0)
        moved = advantages([scale * r + shift for r in rewards])
        affine_err = max(affine_err, max(abs(x - y) for x, y in zip(adv, moved)))
    results.append(CheckResult("advantage-mean-zero", 200, mean_err, 1e-12))
    results.append(CheckResult("advantage-std-one", 200, std_err, 1e-9))
    results.append(CheckResult("advantage-affine-invariant", 200, affine_err, 1e-9))

    worst = 0.0
    for _ in range(10_000):
        rho = math.exp(rng.uniform(-1.5, 1.5))
        a = rng.uniform(-3.0, 3.0)
        eps_l = rng.uniform(0.05, 0.5)
        eps_h = rng.uniform(0.05, 0.5)
        excess = clipped_token_loss(rho, a, eps_l, eps_h) - rho * a
        worst = max(worst, excess)
    results.append(CheckResult("clip-pessimism", 10_000, worst, 0.0))

    sym_err = 0.0
    for _ in range(2_000):
        rho = math.exp(rng.uniform(-1.5, 1.5))
        a = rng.uniform(-3.0, 3.0)
        eps = rng.uniform(0.05, 0.5)
        reference = min(rho * a, min(max(rho, 1.0 - eps), 1.0 + eps) * a)
        sym_err = max(sym_err, abs(clipped_token_loss(rho, a, eps, eps) - reference))
    results.append(CheckResult("symmetric-epsilon-recovery", 2_000, sym_err, 0.0))

    config = GrpoConfig()
    h = 1e-5
    margin = 1e-2
    fd_err = 0.0
    checked = 0
    while checked < 1_000:
        group = _random_group(rng)
        adv = advantages(group.rewards, config.std_floor)
        i = rng.randrange(len(group.ratios))
        t = rng.randrange(len(group.ratios[i]))
        rho = group.ratios[i][t]
        if abs(adv[i]) < 0.1:
            continue
        if (
            abs(rho - (1.0 - config.eps_low)) < margin
            or abs(rho - (1.0 + config.eps_high)) < margin
        ):
            continue
        analytic = objective_gradient_wrt_rho(group, config)[i][t]
        group.ratios[i][t] = rho + h
        up = objective(group, config).total
        group.ratios[i][t] = rho - h
        down = objective(group, config).total
        group.ratios[i][t] = rho
        numeric = (up - down) / (2 * h)
        scale = max(1e-12, abs(analytic), abs(numeric))
        fd_err = max(fd_err, abs(analytic - numeric) / scale)
        checked += 1
    results.append(CheckResult("gradient-finite-difference", 1_000, fd_err, 1e-6))

    return results
