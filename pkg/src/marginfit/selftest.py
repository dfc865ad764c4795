"""Built-in correctness checks, runnable from the CLI without any data files.

Each check is named and independent; the runner reports PASS/FAIL per check
and an overall verdict. Gradient checks compare analytic gradients to central
finite differences; the recall check compares the evaluator to a full-sort
oracle with the same tie rule.
"""

from __future__ import annotations

import numpy as np

from . import losses
from .evaluation import MODE_BINARY, MODE_FLOAT, recall_at_k
from .losses import (
    KIND_ADAPTIVE,
    KIND_LMCL,
    KIND_NORM_SOFTMAX,
    LOSS_KINDS,
    TEMPERATURE_MODES,
    LossConfig,
    ProxyBank,
    adaptive_margin_loss,
    lmcl,
    loss_backward_check,
    norm_softmax,
)

GRAD_TOLERANCE = 1e-4
GRAD_SEEDS = 5


def _random_instance(seed, batch=8, dim=16, classes=10):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, dim))
    x = (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)
    p = rng.standard_normal((classes, dim))
    p = (p / np.linalg.norm(p, axis=1, keepdims=True)).astype(np.float32)
    labels = rng.integers(0, classes, batch)
    d = rng.uniform(0.0, 0.85, size=(classes, classes))
    d = ((d + d.T) / 2.0).astype(np.float32)
    np.fill_diagonal(d, 0.0)
    return x, ProxyBank(p), labels, d


def _check_gradients(kind, mode):
    def run():
        worst = 0.0
        for seed in range(GRAD_SEEDS):
            sigma = 20.0 if seed % 2 else 1.0
            cfg = LossConfig(kind=kind, sigma=sigma, margin=0.4, temperature_mode=mode)
            worst = max(worst, loss_backward_check(cfg, seed))
        return worst <= GRAD_TOLERANCE, f"max relative error {worst:.2e}"

    return f"gradients_{kind}_{mode}", run


def _check_reduction_identities():
    for seed in range(25):
        x, bank, labels, _ = _random_instance(seed, batch=6, dim=8, classes=7)
        sigma = 20.0 if seed % 2 else 1.0
        zero_d = np.zeros((7, 7), np.float32)
        ada = adaptive_margin_loss(
            x, bank, labels, LossConfig(KIND_ADAPTIVE, sigma, 0.4), zero_d
        ).per_sample_loss
        lm = lmcl(x, bank, labels, LossConfig(KIND_LMCL, sigma, 0.4)).per_sample_loss
        if np.max(np.abs(ada - lm)) > 1e-6:
            return False, f"adaptive(D=0) != lmcl at seed {seed}"
        lm0 = lmcl(x, bank, labels, LossConfig(KIND_LMCL, sigma, 0.0)).per_sample_loss
        ns = norm_softmax(x, bank, labels, LossConfig(KIND_NORM_SOFTMAX, sigma)).per_sample_loss
        if np.max(np.abs(lm0 - ns)) > 1e-6:
            return False, f"lmcl(m=0) != norm_softmax at seed {seed}"
    return True, "adaptive(D=0) == lmcl, lmcl(m=0) == norm_softmax on 25 instances"


def _check_margin_monotonicity():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        x, bank, labels, dmat = _random_instance(seed)
        sigma = 20.0 if seed % 2 else 1.0
        cfg = LossConfig(KIND_ADAPTIVE, sigma, 0.4)
        y = int(labels[0])
        z = int((y + 1 + rng.integers(0, bank.num_classes - 1)) % bank.num_classes)
        if z == y:
            continue
        bumped = dmat.astype(np.float64)
        bumped[y, z] += 0.1
        bumped[z, y] += 0.1
        base = losses._forward_f64(
            x.astype(np.float64), bank.proxies.astype(np.float64),
            labels, cfg.tau, cfg.margin, dmat.astype(np.float64)[labels, :],
        )[3]
        bump = losses._forward_f64(
            x.astype(np.float64), bank.proxies.astype(np.float64),
            labels, cfg.tau, cfg.margin, bumped[labels, :],
        )[3]
        affected = labels == y
        if not np.all(bump[affected] >= base[affected]):
            return False, f"loss decreased at seed {seed}"
        cos_xz = x.astype(np.float64) @ bank.proxies[z].astype(np.float64)
        strict = affected & (cos_xz < 1.0 - 1e-6)
        if not np.all(bump[strict] > base[strict]):
            return False, f"no strict increase at seed {seed}"
    return True, "single-entry margin bumps never decrease affected losses (25 instances)"


def _brute_force_recall(q, qlab, g, glab, ks, mode):
    q64, g64 = q.astype(np.float64), g.astype(np.float64)
    hits = {k: 0 for k in ks}
    for qi in range(q64.shape[0]):
        if mode == MODE_FLOAT:
            key = [(-float(q64[qi] @ g64[gi]), gi) for gi in range(g64.shape[0])]
        else:
            qb = q64[qi] > 0
            key = [(int(np.sum(qb != (g64[gi] > 0))), gi) for gi in range(g64.shape[0])]
        ranked = [glab[gi] for _, gi in sorted(key)]
        for k in ks:
            if qlab[qi] in ranked[:k]:
                hits[k] += 1
    return [hits[k] / q64.shape[0] for k in ks]


def _check_recall_oracle():
    ks = [1, 5, 10]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal((int(rng.integers(2, 15)), 6)).astype(np.float32)
        g = rng.standard_normal((int(rng.integers(10, 60)), 6)).astype(np.float32)
        qlab = rng.integers(0, 5, q.shape[0])
        glab = rng.integers(0, 5, g.shape[0])
        for mode in (MODE_FLOAT, MODE_BINARY):
            got = recall_at_k(q, qlab, g, glab, ks=ks, mode=mode).recall
            want = _brute_force_recall(q, qlab, g, glab, ks, mode)
            if got != want:
                return False, f"mismatch at seed {seed} mode {mode}: {got} vs {want}"
    return True, "float and binary recall match full-sort oracle on 10 instances"


def all_checks():
    checks = [_check_gradients(kind, mode) for kind in LOSS_KINDS for mode in TEMPERATURE_MODES]
    checks.append(("reduction_identities", _check_reduction_identities))
    checks.append(("margin_monotonicity", _check_margin_monotonicity))
    checks.append(("recall_oracle", _check_recall_oracle))
    return checks


def run_selftest(echo=print) -> bool:
    """Run every named check; returns True iff all pass."""
    all_ok = True
    for name, run in all_checks():
        try:
            ok, detail = run()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    echo(f"selftest: {'PASS' if all_ok else 'FAIL'}")
    return all_ok
