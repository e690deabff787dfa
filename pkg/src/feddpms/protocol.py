"""Federated training with differentially private latent-mean sharing, plus baselines.

A run has two phases.  Preliminary rounds train the full encoder/classifier/
decoder on every selected client and, in the last one, build a global decoder.
Secondary rounds train encoder and classifier with cross-entropy only; along
the way each client shares noisy class means of its latent codes once, and each
client is matched once to another client's shared means, from which it decodes
synthetic samples for its scarce classes.

Client work within a round depends only on the round-start global model, the
client's own state and an RNG stream keyed by ``(seed, client, round)``.  All
server-side mutation runs in ascending client id.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn, vae
from .config import ExperimentConfig
from .costs import Traffic
from .data import ClassProfile, Dataset, class_profile, merge_synthetic, sample_round_subset
from .nn import ModelParams, OptimState
from .privacy import perturb_mean
from .vae import VaeArch, VaeModel

log = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, tag, ...])
_SELECT, _TRAIN, _SUBSAMPLE, _DPMS, _INIT = 1, 2, 3, 4, 5


class PartialQuotaError(RuntimeError):
    """The acceptance filter rejected too many noisy means for one class."""

    def __init__(self, cls: int, accepted: int, attempts: int, alpha: int):
        super().__init__(f"class {cls}: {accepted}/{alpha} noisy means accepted after {attempts} attempts")
        self.cls = cls
        self.accepted = accepted
        self.attempts = attempts
        self.alpha = alpha


class ProtocolInvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class LatentMeanRecord:
    origin: int
    label: int
    z: np.ndarray
    attempt: int


@dataclass
class RoundPlan:
    selected: list[int]
    matches: dict[int, int] = field(default_factory=dict)


@dataclass
class ClientState:
    cid: int
    data: Dataset
    augmented: Dataset
    decoder: ModelParams | None = None
    enc: ModelParams | None = None
    clf: ModelParams | None = None
    has_downloaded_decoder: bool = False
    holds_decoder: bool = False
    dpms_runs: int = 0
    synth_runs: int = 0
    profile: ClassProfile | None = None


@dataclass
class ServerState:
    enc: ModelParams
    clf: ModelParams
    decoder: ModelParams | None = None
    assisting: list[int] = field(default_factory=list)
    benefited: set[int] = field(default_factory=set)
    abundant: dict[int, tuple[int, ...]] = field(default_factory=dict)
    bank: dict[int, list[LatentMeanRecord]] = field(default_factory=dict)
    dpms_failed: set[int] = field(default_factory=set)
    shared_round: dict[int, int] = field(default_factory=dict)
    benefit_round: dict[int, int] = field(default_factory=dict)
    t: int = 0
    traffic: Traffic = field(default_factory=Traffic)

    @property
    def theta(self) -> int:
        return self.enc.count + self.clf.count


@dataclass
class RoundRecord:
    round: int
    scheme: str
    test_accuracy: float | None
    client_losses: dict[int, float]
    n_assisting: int
    n_benefited: int
    uploaded: int
    downloaded: int


@dataclass
class RunResult:
    scheme: str
    rows: list[RoundRecord]
    server: ServerState
    clients: list[ClientState]
    warnings: list[str] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float | None:
        for r in reversed(self.rows):
            if r.test_accuracy is not None:
                return r.test_accuracy
        return None

    @property
    def traffic(self) -> Traffic:
        return self.server.traffic


def arch_for(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> VaeArch:
    return VaeArch(input_dim=input_dim, latent_dim=cfg.latent_dim, num_classes=num_classes,
                   enc_hidden=tuple(cfg.enc_hidden), clf_hidden=tuple(cfg.clf_hidden))


def select_clients(seed: int, t: int, K: int, k: int) -> list[int]:
    rng = np.random.default_rng([seed, _SELECT, t])
    return sorted(int(i) for i in rng.choice(K, size=k, replace=False))


# -- aggregation -------------------------------------------------------------------

def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("cannot weight clients with no data")
    return sizes / total


def aggregate(models: list[ModelParams], sizes) -> ModelParams:
    return nn.weighted_average(models, aggregation_weights(sizes))


# -- local training ------------------------------------------------------------------

def _joint(*parts: ModelParams) -> ModelParams:
    return ModelParams([layer for p in parts for layer in p.layers])


def local_train(cfg: ExperimentConfig, data: Dataset, enc: ModelParams, clf: ModelParams,
                dec: ModelParams | None, mode: str, rng: np.random.Generator, t: int,
                global_ref: ModelParams | None = None, mu_prox: float = 0.0) -> float:
    """Train the given parameters in place for ``cfg.local_epochs`` epochs.

    ``mode`` is ``"preliminary"`` (composite loss, decoder trained),
    ``"secondary"`` (cross-entropy on sampled latents) or ``"plain"``
    (cross-entropy through the latent mean, optional proximal term against
    ``global_ref``).  Returns the mean batch loss, or nan if nothing ran.
    """
    if len(data) == 0:
        return float("nan")
    originals = (enc, clf, dec) if mode == "preliminary" else (enc, clf)
    trained = _joint(*originals).contiguous()
    views, pos = [], 0
    for p in originals:
        views.append(ModelParams(trained.layers[pos:pos + len(p)]))
        pos += len(p)
    enc, clf = views[0], views[1]
    dec = views[2] if mode == "preliminary" else None

    opt = OptimState.for_params(trained, base_lr=cfg.lr, period=cfg.lr_period, gamma=cfg.lr_gamma)
    if cfg.lr_clock == "round":
        opt.schedule_step(t)
    ref = global_ref.flat() if global_ref is not None else None
    latent = enc.layers[-1][1].shape[1]
    losses = []
    for epoch in range(cfg.local_epochs):
        if cfg.lr_clock == "local_epoch" and epoch:
            opt.schedule_step()
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.x[idx], data.y[idx]
            if mode == "preliminary":
                eps = rng.standard_normal((len(idx), latent))
                loss, grads, _ = vae.preliminary_loss_and_grads(enc, clf, dec, x, y, cfg.lam, eps)
            elif mode == "secondary":
                eps = rng.standard_normal((len(idx), latent))
                loss, grads = vae.secondary_loss_and_grads(enc, clf, x, y, eps)
            elif mode == "plain":
                loss, grads = vae.plain_loss_and_grads(enc, clf, x, y)
            else:
                raise ValueError(f"unknown training mode {mode!r}")
            g = _joint(*grads).flat()
            if ref is not None:
                diff = trained.buffer - ref
                g += mu_prox * diff
                loss += 0.5 * mu_prox * float(diff @ diff)
            nn.adam_step(trained, g, opt)
            losses.append(loss)
            if cfg.max_local_steps is not None and len(losses) >= cfg.max_local_steps:
                break
        else:
            continue
        break
    for p, v in zip(originals, views):
        p.assign(v)
    return float(np.mean(losses))


# -- matching, DPMS, synthesis -------------------------------------------------------

def matching(selected, assisting, abundant: dict[int, tuple[int, ...]],
             scarce: dict[int, tuple[int, ...]]) -> dict[int, int]:
    """For each selected client with a scarce set, the assisting client whose
    abundant classes overlap it most.  Ties go to the lowest client id; a client
    is never matched to itself.  Returns ``{}`` when nothing has been shared.
    """
    if not abundant:
        return {}
    out = {}
    for i in selected:
        if i not in scarce:
            continue
        h = set(scarce[i])
        best, best_overlap = None, -1
        for j in sorted(assisting):
            if j == i:
                continue
            overlap = len(h & set(abundant[j]))
            if overlap > best_overlap:
                best, best_overlap = j, overlap
        if best is None:
            continue
        if best_overlap == 0:
            log.info("client %d matched to %d with zero scarce/abundant overlap", i, best)
        out[i] = best
    return out


def dpms(enc: ModelParams, clf: ModelParams, decoder: ModelParams, data: Dataset, n: int,
         alpha: int, noise_std: float, rng: np.random.Generator, max_attempts: int = 50,
         cid: int = 0) -> tuple[tuple[int, ...], list[LatentMeanRecord]]:
    """Noisy latent class means that survive decode-and-reclassify.

    For each of the ``n`` most abundant classes with real samples, the mean of
    the encoder's latent means over the real samples is perturbed, decoded with
    the global decoder and classified by the local model; perturbations that
    come back with the right label are kept until ``alpha`` are collected.
    Raises PartialQuotaError after ``max_attempts * alpha`` draws for a class.
    """
    real = data.real
    counts = real.class_counts
    abundant = tuple(c for c in class_profile(real, n).abundant if counts[c] > 0)
    records: list[LatentMeanRecord] = []
    limit = max_attempts * alpha
    for c in abundant:
        zbar = vae.latent_means(enc, real.x[real.y == c]).mean(axis=0)
        accepted = 0
        attempts = 0
        while accepted < alpha and attempts < limit:
            chunk = min(limit - attempts, max(alpha - accepted, 32))
            cand = perturb_mean(np.broadcast_to(zbar, (chunk, zbar.size)), noise_std, rng)
            ok = vae.predict(enc, clf, vae.decode(decoder, cand)) == c
            for j in np.flatnonzero(ok):
                if accepted == alpha:
                    break
                records.append(LatentMeanRecord(cid, int(c), cand[j].copy(), attempts + int(j) + 1))
                accepted += 1
            attempts += chunk
        if accepted < alpha:
            raise PartialQuotaError(int(c), accepted, attempts, alpha)
    return abundant, records


def class_mean_latents(enc: ModelParams, data: Dataset, classes) -> dict[int, np.ndarray]:
    real = data.real
    return {int(c): vae.latent_means(enc, real.x[real.y == c]).mean(axis=0) for c in classes}


def synthesize(decoder: ModelParams, records: list[LatentMeanRecord], num_classes: int) -> Dataset:
    if not records:
        raise ValueError("no latent means to synthesize from")
    z = np.stack([r.z for r in records])
    x = vae.decode(decoder, z)
    y = np.array([r.label for r in records], dtype=np.int64)
    return Dataset(x, y, num_classes, np.ones(len(records), dtype=bool))


def check_invariants(server: ServerState, clients: list[ClientState], alpha: int) -> None:
    a = set(server.assisting)
    if len(a) != len(server.assisting):
        raise ProtocolInvariantError("client shared more than once")
    if set(server.abundant) != a or set(server.bank) != a:
        raise ProtocolInvariantError("abundance map / latent bank keys differ from the assisting set")
    for i, recs in server.bank.items():
        if len(recs) != alpha * len(server.abundant[i]):
            raise ProtocolInvariantError(f"client {i} bank has {len(recs)} records")
        if any(r.origin != i for r in recs):
            raise ProtocolInvariantError("bank record origin mismatch")
    if not server.benefited <= {c.cid for c in clients}:
        raise ProtocolInvariantError("unknown client in benefited set")
    for c in clients:
        if c.dpms_runs > 1 or c.synth_runs > 1:
            raise ProtocolInvariantError(f"client {c.cid} shared or augmented twice")


# -- rounds ---------------------------------------------------------------------------

def _rng(cfg: ExperimentConfig, tag: int, cid: int, t: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag, cid, t])


def pretrain_round(server: ServerState, clients: list[ClientState], t: int, cfg: ExperimentConfig,
                   plan: RoundPlan) -> dict[int, float]:
    """One preliminary round; in round ``pretrain_rounds - 1`` also builds the global decoder."""
    if t >= cfg.pretrain_rounds:
        raise ValueError("preliminary round index out of range")
    last = t == cfg.pretrain_rounds - 1
    theta = server.theta
    tr = server.traffic
    losses, encs, clfs, decs, sizes = {}, [], [], [], []
    for i in plan.selected:
        c = clients[i]
        tr.add("model_down", theta)
        c.enc, c.clf = server.enc.copy(), server.clf.copy()
        losses[i] = local_train(cfg, c.data, c.enc, c.clf, c.decoder, "preliminary",
                                _rng(cfg, _TRAIN, i, t), t)
        tr.add("model_up", theta)
        encs.append(c.enc)
        clfs.append(c.clf)
        sizes.append(len(c.data))
        if last:
            tr.add("decoder_up", c.decoder.count)
            decs.append(c.decoder)
    if sum(sizes) > 0:
        server.enc = aggregate(encs, sizes)
        server.clf = aggregate(clfs, sizes)
        if last:
            server.decoder = aggregate(decs, sizes)
            for a in server.decoder.arrays():
                a.flags.writeable = False
    if last:
        for c in clients:
            c.decoder = None
    return losses


def _fetch_decoder(server: ServerState, c: ClientState) -> None:
    if not c.has_downloaded_decoder:
        server.traffic.add("decoder_down", server.decoder.count)
        server.traffic.decoder_downloads += 1
        c.has_downloaded_decoder = True
    c.holds_decoder = True


def sectrain_round(server: ServerState, clients: list[ClientState], t: int, cfg: ExperimentConfig,
                   plan: RoundPlan, num_classes: int, warnings_out: list[str] | None = None) -> dict[int, float]:
    """One secondary round: match, synthesize, train, share, aggregate."""
    if server.decoder is None:
        raise RuntimeError("secondary training needs the global decoder")
    tr = server.traffic
    theta = server.theta
    latent = server.decoder.fan_in

    # (1) matching for selected clients still seeking augmentation
    scarce = {}
    if server.assisting:
        for i in plan.selected:
            if i not in server.benefited:
                scarce[i] = class_profile(clients[i].data, cfg.n).scarce
                tr.add("meta_up", len(scarce[i]))
    plan.matches = matching(plan.selected, server.assisting, server.abundant, scarce)

    # (2) synthesis and merge
    for i in plan.selected:
        if i in plan.matches and i not in server.benefited:
            c = clients[i]
            _fetch_decoder(server, c)
            recs = server.bank[plan.matches[i]]
            tr.add("latent_down", len(recs) * latent)
            tr.add("meta_down", len(recs))
            c.augmented = merge_synthetic(c.data, synthesize(server.decoder, recs, num_classes))
            c.synth_runs += 1
            server.benefited.add(i)
            server.benefit_round[i] = t

    # (3) local training on a fresh |D_i|-sized subsample of the augmented set
    losses, encs, clfs, sizes = {}, [], [], []
    for i in plan.selected:
        c = clients[i]
        tr.add("model_down", theta)
        c.enc, c.clf = server.enc.copy(), server.clf.copy()
        batch = sample_round_subset(c.augmented, len(c.data), _rng(cfg, _SUBSAMPLE, i, t))
        losses[i] = local_train(cfg, batch, c.enc, c.clf, None, "secondary", _rng(cfg, _TRAIN, i, t), t)
        tr.add("model_up", theta)
        encs.append(c.enc)
        clfs.append(c.clf)
        sizes.append(len(c.augmented))

    # (4) one-time sharing of noisy latent means
    for i in plan.selected:
        c = clients[i]
        if i in server.assisting or i in server.dpms_failed:
            continue
        _fetch_decoder(server, c)
        c.dpms_runs += 1
        try:
            abundant, recs = dpms(c.enc, c.clf, server.decoder, c.data, cfg.n, cfg.alpha, cfg.noise_std,
                                  _rng(cfg, _DPMS, i, t), cfg.max_attempts, cid=i)
        except PartialQuotaError as exc:
            msg = f"round {t}: client {i} shares nothing: {exc}"
            log.warning(msg)
            if warnings_out is not None:
                warnings_out.append(msg)
            server.dpms_failed.add(i)
            continue
        if not recs:
            # no real samples, so nothing to share; never retried
            server.dpms_failed.add(i)
            continue
        tr.add("latent_up", len(recs) * latent)
        tr.add("meta_up", len(abundant) + len(recs))
        server.assisting.append(i)
        server.abundant[i] = abundant
        server.bank[i] = recs
        server.shared_round[i] = t

    # (5) size-weighted aggregation over augmented sizes
    if sum(sizes) > 0:
        server.enc = aggregate(encs, sizes)
        server.clf = aggregate(clfs, sizes)
    # a client holds the decoder for at most one round
    for c in clients:
        c.holds_decoder = False
    return losses


def baseline_round(server: ServerState, clients: list[ClientState], t: int, cfg: ExperimentConfig,
                   plan: RoundPlan, mu_prox: float) -> dict[int, float]:
    tr = server.traffic
    theta = server.theta
    ref = _joint(server.enc, server.clf) if mu_prox > 0 or cfg.scheme == "fedprox" else None
    losses, encs, clfs, sizes = {}, [], [], []
    for i in plan.selected:
        c = clients[i]
        tr.add("model_down", theta)
        c.enc, c.clf = server.enc.copy(), server.clf.copy()
        losses[i] = local_train(cfg, c.data, c.enc, c.clf, None, "plain", _rng(cfg, _TRAIN, i, t), t,
                                global_ref=ref, mu_prox=mu_prox)
        tr.add("model_up", theta)
        encs.append(c.enc)
        clfs.append(c.clf)
        sizes.append(len(c.data))
    if sum(sizes) > 0:
        server.enc = aggregate(encs, sizes)
        server.clf = aggregate(clfs, sizes)
    return losses


def evaluate(enc: ModelParams, clf: ModelParams, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(vae.predict(enc, clf, test.x) == test.y))


# -- whole runs ------------------------------------------------------------------------

def init_state(cfg: ExperimentConfig, parts: list[Dataset], with_decoder: bool):
    ref = parts[0]
    arch = arch_for(cfg, ref.dim, ref.num_classes)
    model = vae.init_model(arch, np.random.default_rng([cfg.seed, _INIT]))
    server = ServerState(enc=model.enc, clf=model.clf)
    clients = [ClientState(cid=i, data=d, augmented=d,
                           decoder=model.dec.copy() if with_decoder else None)
               for i, d in enumerate(parts)]
    return server, clients


def run(cfg: ExperimentConfig, parts: list[Dataset], test: Dataset | None) -> RunResult:
    """Run ``cfg.scheme`` for ``cfg.rounds`` rounds over the client datasets ``parts``."""
    scheme = cfg.scheme
    K = len(parts)
    if not 1 <= cfg.clients_per_round <= K:
        raise ValueError("clients_per_round must lie in [1, number of clients]")
    feddpms = scheme == "feddpms"
    if feddpms and not 1 <= cfg.pretrain_rounds <= cfg.rounds:
        raise ValueError("feddpms needs 1 <= pretrain_rounds <= rounds")
    num_classes = parts[0].num_classes
    server, clients = init_state(cfg, parts, with_decoder=feddpms)
    result = RunResult(scheme, [], server, clients)
    mu_prox = cfg.mu_prox if scheme == "fedprox" else 0.0
    for t in range(cfg.rounds):
        server.t = t
        plan = RoundPlan(select_clients(cfg.seed, t, K, cfg.clients_per_round))
        up0, down0 = server.traffic.uploaded, server.traffic.downloaded
        if not feddpms:
            losses = baseline_round(server, clients, t, cfg, plan, mu_prox)
        elif t < cfg.pretrain_rounds:
            losses = pretrain_round(server, clients, t, cfg, plan)
        else:
            losses = sectrain_round(server, clients, t, cfg, plan, num_classes, result.warnings)
        if feddpms:
            check_invariants(server, clients, cfg.alpha)
        acc = None
        if test is not None and ((t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1):
            acc = evaluate(server.enc, server.clf, test)
        result.rows.append(RoundRecord(
            round=t, scheme=scheme, test_accuracy=acc, client_losses=losses,
            n_assisting=len(server.assisting), n_benefited=len(server.benefited),
            uploaded=server.traffic.uploaded - up0, downloaded=server.traffic.downloaded - down0,
        ))
    return result


def run_feddpms(parts, test, cfg: ExperimentConfig) -> RunResult:
    return run(_as_scheme(cfg, "feddpms"), parts, test)


def run_fedavg(parts, test, cfg: ExperimentConfig) -> RunResult:
    return run(_as_scheme(cfg, "fedavg"), parts, test)


def run_fedprox(parts, test, cfg: ExperimentConfig) -> RunResult:
    return run(_as_scheme(cfg, "fedprox"), parts, test)


def _as_scheme(cfg: ExperimentConfig, scheme: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, scheme=scheme)
