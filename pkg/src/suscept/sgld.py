"""SGLD sampling from the localized tempered posterior, with component
restriction, per-draw functional recording, and the LLC estimator.

The update rule is

    w <- w + (eps/2) * (-n_beta * grad_minibatch(w) - gamma * (w - w*)) + eta

with eta ~ N(0, eps * I), applied only to the coordinates of the component
being sampled; all other coordinates stay frozen at the center. The sampler
works against either a model-backed target or a closed-form analytic
potential, which is what the calibration oracles use.
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import model

DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class SGLDConfig:
    n_beta: float
    gamma: float
    epsilon: float
    n_chains: int
    n_draws: int
    burn_in: int
    minibatch_size: int = 128

    def __post_init__(self):
        if min(self.n_beta, self.epsilon) <= 0 or self.gamma < 0:
            raise ValueError("n_beta, epsilon must be positive and gamma nonnegative")
        if self.n_chains < 1 or self.n_draws < 1 or self.burn_in < 0:
            raise ValueError("invalid chain/draw counts")


# presets used for the full-scale experiments; desk runs shrink draws/chains
LANGUAGE_PRESET = SGLDConfig(n_beta=30.0, gamma=300.0, epsilon=3e-4,
                             n_chains=4, n_draws=300, burn_in=33, minibatch_size=128)
BRACKETS_PRESET = SGLDConfig(n_beta=100.0, gamma=500.0, epsilon=3e-6,
                             n_chains=4, n_draws=5000, burn_in=555, minibatch_size=128)


class AnalyticTarget:
    """Closed-form potential: loss(w) and grad(w) on flat numpy vectors.

    `measured` is an optional sequence of per-sample loss functions; the
    reference loss is the full potential (no minibatching).
    """

    def __init__(self, center, loss, grad, measured=()):
        self.center = np.asarray(center, dtype=np.float64)
        self._loss = loss
        self._grad = grad
        self._measured = list(measured)

    @property
    def dim(self):
        return self.center.size

    @property
    def n_measured(self):
        return len(self._measured)

    def minibatch_grad(self, w, rng):
        return self._grad(w)

    def reference_loss(self, w):
        return float(self._loss(w))

    def measured_losses(self, w):
        return np.array([f(w) for f in self._measured], dtype=np.float64)


class MixtureTarget(AnalyticTarget):
    """Analytic potential L(w) = sum_i q_i * loss_i(w) over weighted samples.

    Every sample is measured; with `reference="measured_mean"` semantics the
    mean-zero susceptibility identity holds exactly when q is uniform.
    """

    def __init__(self, center, sample_losses, sample_grads, q=None):
        n = len(sample_losses)
        q = np.full(n, 1.0 / n) if q is None else np.asarray(q, dtype=np.float64)
        if abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        loss = lambda w: float(sum(qi * f(w) for qi, f in zip(q, sample_losses)))
        grad = lambda w: sum(qi * g(w) for qi, g in zip(q, sample_grads))
        super().__init__(center, loss, grad, measured=sample_losses)
        self.q = q


class ModelTarget:
    """Model-backed target: minibatch gradients over a training multiset, a
    fixed reference batch, and per-sample measured losses.

    reference="measured_mean" uses the mean of the measured losses as the
    reference loss, which makes the susceptibility mean-zero identity exact.
    """

    def __init__(self, center: model.ParamVector, train_batch_sampler,
                 eval_batch=None, measured_batch=None, reference="eval"):
        if reference not in ("eval", "measured_mean"):
            raise ValueError("reference must be 'eval' or 'measured_mean'")
        if reference == "eval" and eval_batch is None:
            raise ValueError("eval reference requires an eval_batch")
        if reference == "measured_mean" and measured_batch is None:
            raise ValueError("measured_mean reference requires a measured_batch")
        self.center = center
        self._sampler = train_batch_sampler
        self._eval_batch = eval_batch
        self._measured_batch = measured_batch
        self._reference = reference
        self._params = center.copy()
        self._last_measured = None

    @property
    def dim(self):
        return self.center.size

    @property
    def n_measured(self):
        b = self._measured_batch
        if b is None:
            return 0
        if b.targets.ndim == 1:
            return b.size
        return int((b.targets >= 0).sum())

    def _with_values(self, w):
        self._params.values[:] = w
        return self._params

    def minibatch_grad(self, w, rng):
        batch = self._sampler(rng)
        _, grad = model.loss_and_grad(self._with_values(w), batch)
        return grad.values.astype(np.float64, copy=False)

    def measured_losses(self, w):
        nll, valid = model.per_target_losses(self._with_values(w), self._measured_batch)
        out = nll[valid] if nll.ndim > 1 else nll
        self._last_measured = out
        return out

    def reference_loss(self, w):
        if self._reference == "measured_mean":
            # consume the measured losses computed for this draw, if fresh
            fresh = self._last_measured
            self._last_measured = None
            if fresh is None:
                fresh = self.measured_losses(w)
                self._last_measured = None
            return float(fresh.mean())
        return model.loss_only(self._with_values(w), self._eval_batch)


@dataclass
class ChainRecord:
    chain_id: int
    steps: np.ndarray          # recorded step index per draw
    reference_loss: np.ndarray
    measured: np.ndarray       # (n_draws, r)
    diverged: bool

    @property
    def n_draws(self):
        return len(self.steps)


@dataclass
class PosteriorRecords:
    center_loss: float
    n_beta: float
    chains: list
    measured_ids: list

    def usable(self):
        out = [c for c in self.chains if not c.diverged and c.n_draws > 0]
        if not out:
            raise RuntimeError("all SGLD chains diverged")
        return out

    def component_phi(self, chain: ChainRecord):
        return chain.reference_loss - self.center_loss


def run_sgld(target, cfg: SGLDConfig, seed: int, component_mask=None) -> PosteriorRecords:
    """Sample the localized tempered posterior around `target.center`.

    `component_mask` is a boolean coordinate mask (None means all coordinates
    move). Chains are seeded independently from `seed` and run sequentially;
    the record stream is deterministic given (target, cfg, seed).
    """
    center = np.asarray(target.center, dtype=np.float64)
    dim = center.size
    if component_mask is None:
        component_mask = np.ones(dim, dtype=bool)
    idx = np.flatnonzero(component_mask)
    if idx.size == 0:
        raise ValueError("component mask selects no coordinates")

    center_loss = float(target.reference_loss(center.copy()))
    r = target.n_measured
    chains = []
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_chains)
    half_eps = 0.5 * cfg.epsilon
    noise_scale = np.sqrt(cfg.epsilon)

    for c in range(cfg.n_chains):
        rng = np.random.default_rng(seeds[c])
        w = center.copy()
        steps = np.zeros(cfg.n_draws, dtype=np.int64)
        refs = np.full(cfg.n_draws, np.nan)
        measured = np.full((cfg.n_draws, r), np.nan)
        diverged = False
        draw = 0
        for step in range(cfg.burn_in + cfg.n_draws):
            g = target.minibatch_grad(w, rng)
            if not np.all(np.isfinite(g[idx])):
                diverged = True
                break
            drift = -half_eps * (cfg.n_beta * g[idx] + cfg.gamma * (w[idx] - center[idx]))
            w[idx] += drift + noise_scale * rng.standard_normal(idx.size)
            if step < cfg.burn_in:
                continue
            if r:
                m = target.measured_losses(w)
            ref = target.reference_loss(w)
            if not np.isfinite(ref) or abs(ref) > DIVERGENCE_THRESHOLD:
                diverged = True
                break
            steps[draw] = step
            refs[draw] = ref
            if r:
                measured[draw] = m
            draw += 1
        chains.append(ChainRecord(c, steps[:draw], refs[:draw], measured[:draw], diverged))

    records = PosteriorRecords(center_loss, cfg.n_beta, chains,
                               measured_ids=[str(i) for i in range(r)])
    records.usable()  # raises if everything diverged
    return records


@dataclass
class LlcEstimate:
    value: float
    std_error: float


def estimate_llc(records: PosteriorRecords, cfg: SGLDConfig = None) -> LlcEstimate:
    """n_beta * (E[reference loss] - center loss), pooled over usable chains;
    the standard error comes from the spread of per-chain means."""
    n_beta = cfg.n_beta if cfg is not None else records.n_beta
    chains = records.usable()
    per_chain = np.array([
        n_beta * (c.reference_loss.mean() - records.center_loss) for c in chains
    ])
    weights = np.array([c.n_draws for c in chains], dtype=np.float64)
    value = float(np.sum(per_chain * weights) / weights.sum())
    if len(per_chain) > 1:
        se = float(per_chain.std(ddof=1) / np.sqrt(len(per_chain)))
    else:
        se = 0.0
    return LlcEstimate(value, se)


def save_records(records: PosteriorRecords, path, cfg: SGLDConfig = None, seed=None):
    """Columnar table: chain, step, reference_loss, component_phi, then one
    column per measured sample; manifest JSON sits alongside."""
    path = str(path)
    cols = ["chain", "step", "reference_loss", "component_phi"] + [
        f"sample_{i}" for i in records.measured_ids]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for c in records.chains:
            phi = records.component_phi(c)
            for i in range(c.n_draws):
                row = [str(c.chain_id), str(int(c.steps[i])),
                       repr(float(c.reference_loss[i])), repr(float(phi[i]))]
                row += [repr(float(v)) for v in c.measured[i]]
                f.write(",".join(row) + "\n")
    manifest = {
        "center_loss": records.center_loss,
        "n_beta": records.n_beta,
        "measured_ids": records.measured_ids,
        "diverged_chains": [c.chain_id for c in records.chains if c.diverged],
        "n_chains": len(records.chains),
        "seed": seed,
        "config": asdict(cfg) if cfg is not None else None,
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_records(path) -> PosteriorRecords:
    path = str(path)
    with open(path + ".manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    chains = []
    diverged = set(manifest["diverged_chains"])
    for cid in range(manifest["n_chains"]):
        rows = data[data[:, 0] == cid] if data.size else np.zeros((0, 4))
        chains.append(ChainRecord(
            cid,
            rows[:, 1].astype(np.int64),
            rows[:, 2].copy(),
            rows[:, 4:].copy(),
            cid in diverged,
        ))
    return PosteriorRecords(manifest["center_loss"], manifest["n_beta"], chains,
                            manifest["measured_ids"])
